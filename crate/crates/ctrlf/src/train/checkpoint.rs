//! Checkpoint format: a text config snapshot, a text tensor manifest
//! (name, dtype, shape, byte offset), and a little-endian raw blob, in one
//! file. Save -> load -> save round-trips byte-identically.

use crate::error::{Error, Result};
use crate::model::fusion::FusionKind;
use crate::model::mfca::MfcaConfig;
use crate::model::{CtrlfModel, VariantConfig};
use crate::tensor::{Scalar, TensorData};
use crate::train::{AdamW, TrainConfig};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8] = b"CTRLFCK1\n";

fn fusion_kv(out: &mut String, fusion: &FusionKind) {
    match fusion {
        FusionKind::Akf { alpha } => {
            out.push_str("fusion=akf\n");
            out.push_str(&format!("alpha={alpha:?}\n"));
        }
        FusionKind::Ckf { k, dropout_rate } => {
            out.push_str("fusion=ckf\n");
            out.push_str(&format!("ckf_k={k}\n"));
            out.push_str(&format!("ckf_dropout={dropout_rate:?}\n"));
        }
    }
}

/// Variant config as key=value lines (floats printed in round-trip form).
pub fn variant_to_kv(cfg: &VariantConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("variant={}\n", cfg.name));
    s.push_str(&format!(
        "stage_blocks={}\n",
        cfg.stage_blocks.map(|b| b.to_string()).join(",")
    ));
    s.push_str(&format!(
        "stage_channels={}\n",
        cfg.stage_channels.map(|b| b.to_string()).join(",")
    ));
    s.push_str(&format!("stem_width={}\n", cfg.stem_width));
    let m = &cfg.mfca;
    s.push_str(&format!("patch_small={}\n", m.patch_small));
    s.push_str(&format!("patch_large={}\n", m.patch_large));
    s.push_str(&format!("dim_small={}\n", m.dim_small));
    s.push_str(&format!("dim_large={}\n", m.dim_large));
    s.push_str(&format!("depth_small={}\n", m.depth_small));
    s.push_str(&format!("depth_large={}\n", m.depth_large));
    s.push_str(&format!("rounds={}\n", m.rounds));
    s.push_str(&format!("heads={}\n", m.heads));
    s.push_str(&format!("ffn_ratio_small={}\n", m.ffn_ratio_small));
    s.push_str(&format!("ffn_ratio_large={}\n", m.ffn_ratio_large));
    s.push_str(&format!("head_layernorm={}\n", m.head_layernorm));
    fusion_kv(&mut s, &cfg.fusion);
    s.push_str(&format!("classes={}\n", cfg.classes));
    s.push_str(&format!("resolution={}\n", cfg.resolution));
    s
}

fn kv_map(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("missing key '{key}'")))
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    get(map, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for '{key}'")))
}

fn parse4(map: &BTreeMap<String, String>, key: &str) -> Result<[usize; 4]> {
    let items: Vec<usize> = get(map, key)?
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint(format!("bad value for '{key}'")))?;
    items
        .try_into()
        .map_err(|_| Error::Checkpoint(format!("'{key}' needs 4 entries")))
}

pub fn variant_from_kv(text: &str) -> Result<VariantConfig> {
    let map = kv_map(text);
    let fusion = match get(&map, "fusion")? {
        "akf" => FusionKind::Akf {
            alpha: parse(&map, "alpha")?,
        },
        "ckf" => FusionKind::Ckf {
            k: parse(&map, "ckf_k")?,
            dropout_rate: parse(&map, "ckf_dropout")?,
        },
        other => return Err(Error::Checkpoint(format!("unknown fusion '{other}'"))),
    };
    Ok(VariantConfig {
        name: get(&map, "variant")?.to_string(),
        stage_blocks: parse4(&map, "stage_blocks")?,
        stage_channels: parse4(&map, "stage_channels")?,
        stem_width: parse(&map, "stem_width")?,
        mfca: MfcaConfig {
            patch_small: parse(&map, "patch_small")?,
            patch_large: parse(&map, "patch_large")?,
            dim_small: parse(&map, "dim_small")?,
            dim_large: parse(&map, "dim_large")?,
            depth_small: parse(&map, "depth_small")?,
            depth_large: parse(&map, "depth_large")?,
            rounds: parse(&map, "rounds")?,
            heads: parse(&map, "heads")?,
            ffn_ratio_small: parse(&map, "ffn_ratio_small")?,
            ffn_ratio_large: parse(&map, "ffn_ratio_large")?,
            head_layernorm: parse(&map, "head_layernorm")?,
        },
        fusion,
        classes: parse(&map, "classes")?,
        resolution: parse(&map, "resolution")?,
    })
}

/// Saves model parameters + buffers, optimizer moments, epoch index, seeds,
/// and the config snapshot.
pub fn save(
    path: &Path,
    model: &CtrlfModel<f32>,
    optimizer: &AdamW<f32>,
    epoch: usize,
    train_seed: u64,
    best_acc: f64,
) -> Result<()> {
    let mut config = variant_to_kv(&model.cfg);
    config.push_str(&format!("model_seed={}\n", model.seed));
    config.push_str(&format!("train_seed={train_seed}\n"));
    config.push_str(&format!("epoch={epoch}\n"));
    config.push_str(&format!("optim_step={}\n", optimizer.step_count));
    config.push_str(&format!("best_acc={best_acc:?}\n"));
    config.push_str(&format!("beta1={:?}\n", optimizer.beta1));
    config.push_str(&format!("beta2={:?}\n", optimizer.beta2));
    config.push_str(&format!("opt_eps={:?}\n", optimizer.eps));
    config.push_str(&format!("opt_weight_decay={:?}\n", optimizer.weight_decay));

    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let put = |name: &str, shape: &[usize], data: &[f32], blob: &mut Vec<u8>, manifest: &mut String| {
        let shape_str = shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        manifest.push_str(&format!(
            "{name}\t{}\t{shape_str}\t{}\n",
            f32::DTYPE,
            blob.len()
        ));
        for &v in data {
            v.write_le(blob);
        }
    };
    for p in model.store.iter() {
        put(&p.name, &p.value.shape, &p.value.data, &mut blob, &mut manifest);
    }
    for (idx, p) in model.store.iter().enumerate() {
        if p.trainable {
            put(
                &format!("optim.m.{}", p.name),
                &p.value.shape,
                &optimizer.m[idx],
                &mut blob,
                &mut manifest,
            );
            put(
                &format!("optim.v.{}", p.name),
                &p.value.shape,
                &optimizer.v[idx],
                &mut blob,
                &mut manifest,
            );
        }
    }

    let mut out: Vec<u8> = Vec::with_capacity(blob.len() + manifest.len() + config.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: CtrlfModel<f32>,
    pub optimizer: AdamW<f32>,
    pub epoch: usize,
    pub train_seed: u64,
    pub best_acc: f64,
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut at = MAGIC.len();
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let config_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let config = String::from_utf8(take(&mut at, config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
    let manifest_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let manifest = String::from_utf8(take(&mut at, manifest_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("manifest is not utf-8".into()))?;
    let blob_len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    let blob = take(&mut at, blob_len)?;

    let map = kv_map(&config);
    let variant = variant_from_kv(&config)?;
    let model_seed: u64 = parse(&map, "model_seed")?;
    let train_seed: u64 = parse(&map, "train_seed")?;
    let epoch: usize = parse(&map, "epoch")?;
    let optim_step: u64 = parse(&map, "optim_step")?;
    let best_acc: f64 = parse(&map, "best_acc")?;

    let mut tensors: BTreeMap<String, TensorData<f32>> = BTreeMap::new();
    for line in manifest.lines() {
        let mut parts = line.split('\t');
        let (name, dtype, shape_str, offset) = (
            parts.next().ok_or_else(|| Error::Checkpoint("bad manifest row".into()))?,
            parts.next().ok_or_else(|| Error::Checkpoint("bad manifest row".into()))?,
            parts.next().ok_or_else(|| Error::Checkpoint("bad manifest row".into()))?,
            parts.next().ok_or_else(|| Error::Checkpoint("bad manifest row".into()))?,
        );
        if dtype != f32::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dtype {dtype}, expected {}",
                f32::DTYPE
            )));
        }
        let shape: Vec<usize> = shape_str
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape for '{name}'")))?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset for '{name}'")))?;
        let n: usize = shape.iter().product();
        if offset + n * f32::BYTES > blob.len() {
            return Err(Error::Checkpoint(format!("tensor '{name}' overruns the blob")));
        }
        let data: Vec<f32> = (0..n)
            .map(|i| f32::read_le(&blob[offset + i * f32::BYTES..]))
            .collect();
        tensors.insert(name.to_string(), TensorData::new(shape, data));
    }

    let mut model = CtrlfModel::<f32>::build(&variant, model_seed)?;
    let mut optimizer = AdamW::new(
        &model.store,
        &TrainConfig {
            beta1: parse(&map, "beta1")?,
            beta2: parse(&map, "beta2")?,
            eps: parse(&map, "opt_eps")?,
            weight_decay: parse(&map, "opt_weight_decay")?,
            ..TrainConfig::default()
        },
    );
    optimizer.step_count = optim_step;
    for (idx, p) in model.store.iter_mut().enumerate() {
        let t = tensors
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor '{}'", p.name)))?;
        if t.shape != p.value.shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, expected {:?}",
                p.name, t.shape, p.value.shape
            )));
        }
        p.value = t.clone();
        if p.trainable {
            let m = tensors
                .get(&format!("optim.m.{}", p.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for '{}'", p.name)))?;
            let v = tensors
                .get(&format!("optim.v.{}", p.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for '{}'", p.name)))?;
            optimizer.m[idx] = m.data.clone();
            optimizer.v[idx] = v.data.clone();
        }
    }

    Ok(LoadedCheckpoint {
        model,
        optimizer,
        epoch,
        train_seed,
        best_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fusion::FusionKind;

    fn tiny_model(seed: u64) -> CtrlfModel<f32> {
        let cfg = VariantConfig::tiny(FusionKind::Akf { alpha: 10.0 }, 4);
        CtrlfModel::build(&cfg, seed).unwrap()
    }

    #[test]
    fn variant_kv_roundtrip() {
        for cfg in [
            VariantConfig::ctrlf_s(FusionKind::Akf { alpha: 10.0 }, 102, 224),
            VariantConfig::ctrlf_b(
                FusionKind::Ckf {
                    k: 128,
                    dropout_rate: 0.5,
                },
                38,
                224,
            ),
            VariantConfig::tiny(FusionKind::Akf { alpha: 7.25 }, 8),
        ] {
            let kv = variant_to_kv(&cfg);
            let back = variant_from_kv(&kv).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(3);
        let opt = AdamW::new(&model.store, &TrainConfig::default());
        let p1 = dir.path().join("a.ckpt");
        save(&p1, &model, &opt, 7, 42, 0.625).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.epoch, 7);
        assert_eq!(loaded.train_seed, 42);
        assert_eq!(loaded.best_acc, 0.625);
        let p2 = dir.path().join("b.ckpt");
        save(&p2, &loaded.model, &loaded.optimizer, 7, 42, 0.625).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_params_match_saved() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(9);
        // perturb one parameter so the load is distinguishable from a
        // fresh build
        let id = model.store.by_name("conv.stem.conv.weight").unwrap();
        model.store.get_mut(id).value.data[0] = 123.456;
        let mut opt = AdamW::new(&model.store, &TrainConfig::default());
        opt.step_count = 11;
        opt.m[id.0][0] = 0.5;
        let p = dir.path().join("c.ckpt");
        save(&p, &model, &opt, 2, 0, 0.0).unwrap();
        let loaded = load(&p).unwrap();
        let lid = loaded.model.store.by_name("conv.stem.conv.weight").unwrap();
        assert_eq!(loaded.model.store.get(lid).value.data[0], 123.456);
        assert_eq!(loaded.optimizer.step_count, 11);
        assert_eq!(loaded.optimizer.m[lid.0][0], 0.5);
    }

    #[test]
    fn non_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        fs::write(&p, b"garbage").unwrap();
        assert!(load(&p).is_err());
    }
}
