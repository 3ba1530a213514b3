use ctrlf::data::{synthetic_smoke, DataSource};
use ctrlf::model::fusion::FusionKind;
use ctrlf::model::{CtrlfModel, VariantConfig};
use ctrlf::train::{evaluate_train_split, train, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let cfg = VariantConfig::tiny(FusionKind::Akf { alpha: 10.0 }, 8);
    let mut model = CtrlfModel::<f32>::build(&cfg, 0).unwrap();
    let data = DataSource::Memory(synthetic_smoke(8, 8, 32, 0));
    let tc = TrainConfig {
        epochs: 150,
        batch_size: 32,
        warmup_epochs: 5,
        seed: 0,
        augment: false,
        ..TrainConfig::default()
    };
    let _ = train(&mut model, &data, &tc, None, None).unwrap();
    let r = evaluate_train_split(&mut model, &data, 32).unwrap();
    println!(
        "per-branch on train: fused={:.3} cnn={:.3} mfca={:.3}  elapsed={:.0}s",
        r.fused_acc, r.cnn_acc, r.trans_acc, t0.elapsed().as_secs_f64()
    );
}
