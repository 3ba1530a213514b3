//! Analytic parameter and FLOP counting.
//!
//! Parameter counts are exact: a dedicated test asserts equality with the
//! enumeration of trainable scalars in a built model, at zero tolerance.
//! FLOPs use the multiply-accumulate convention (1 MAC = 1 FLOP): convs and
//! linears count k^2*Cin*Cout*Hout*Wout/groups and in*out per position;
//! attention counts its projections plus one Nq*Nkv*h*dk term for the
//! attention matrix; norms, activations, pooling, and elementwise ops are
//! free.

use crate::error::Result;
use crate::model::convpath::{se_squeeze_width, MbconvConfig, MBCONV_EXPANSION};
use crate::model::fusion::FusionKind;
use crate::model::mfca::divisors;
use crate::model::VariantConfig;
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-module and total cost of one build. Totals equal the sum of parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    fn from_entries(entries: Vec<CostEntry>) -> Self {
        let total_params = entries.iter().map(|e| e.params).sum();
        let total_flops = entries.iter().map(|e| e.flops).sum();
        CostReport {
            entries,
            total_params,
            total_flops,
        }
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>14} {:>16}", "module", "params", "flops")?;
        for e in &self.entries {
            writeln!(f, "{:<14} {:>14} {:>16}", e.module, e.params, e.flops)?;
        }
        writeln!(f, "{:<14} {:>14} {:>16}", "total", self.total_params, self.total_flops)?;
        writeln!(
            f,
            "{:<14} {:>13.2}M {:>15.2}G",
            "",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        )
    }
}

struct Cost {
    params: u64,
    flops: u64,
}

impl Cost {
    fn zero() -> Self {
        Cost { params: 0, flops: 0 }
    }
    fn add(&mut self, other: Cost) {
        self.params += other.params;
        self.flops += other.flops;
    }
}

fn conv(k: u64, c_in: u64, c_out: u64, groups: u64, out_hw: u64) -> Cost {
    let params = k * k * (c_in / groups) * c_out;
    Cost {
        params,
        flops: params * out_hw,
    }
}

fn batch_norm(channels: u64) -> Cost {
    Cost {
        params: 2 * channels,
        flops: 0,
    }
}

fn layer_norm(dim: u64) -> Cost {
    Cost {
        params: 2 * dim,
        flops: 0,
    }
}

/// Linear with bias applied at `positions` spatial/token positions.
fn linear(in_dim: u64, out_dim: u64, positions: u64) -> Cost {
    Cost {
        params: in_dim * out_dim + out_dim,
        flops: in_dim * out_dim * positions,
    }
}

/// Multi-head attention at token dim `d` with `nq` queries and `nkv`
/// keys/values. The quadratic attention-matrix term is counted once.
fn attention(d: u64, heads: u64, nq: u64, nkv: u64) -> Cost {
    let dk = d / heads;
    let inner = heads * dk;
    let mut c = Cost::zero();
    c.add(linear(d, inner, nq)); // q
    c.add(linear(d, inner, nkv)); // k
    c.add(linear(d, inner, nkv)); // v
    c.add(Cost {
        params: 0,
        flops: nq * nkv * inner,
    });
    c.add(linear(inner, d, nq)); // out
    c
}

fn mbconv(cfg: &MbconvConfig, in_side: u64) -> Cost {
    let e = cfg.expanded() as u64;
    let (c_in, c_out) = (cfg.in_channels as u64, cfg.out_channels as u64);
    let out_side = in_side / cfg.stride as u64;
    let sq = se_squeeze_width(cfg.in_channels) as u64;
    let mut c = Cost::zero();
    c.add(conv(1, c_in, e, 1, in_side * in_side)); // expand
    c.add(batch_norm(e));
    c.add(conv(3, e, e, e, out_side * out_side)); // depthwise, strided
    c.add(batch_norm(e));
    c.add(linear(e, sq, 1)); // squeeze
    c.add(linear(sq, e, 1)); // excite
    c.add(conv(1, e, c_out, 1, out_side * out_side)); // project
    c.add(batch_norm(c_out));
    c
}

fn encoder_block(d: u64, heads: u64, ffn_ratio: u64, tokens: u64) -> Cost {
    let mut c = Cost::zero();
    c.add(layer_norm(d));
    c.add(attention(d, heads, tokens, tokens));
    c.add(layer_norm(d));
    c.add(linear(d, d * ffn_ratio, tokens));
    c.add(linear(d * ffn_ratio, d, tokens));
    c
}

/// One direction of an exchange round: the aligned CLS (a single query)
/// attends over 1 + N_other fused tokens at the other branch's dim.
fn exchange_direction(d_from: u64, d_to: u64, heads: u64, n_other: u64) -> Cost {
    let mut c = Cost::zero();
    c.add(linear(d_from, d_to, 1)); // align
    c.add(layer_norm(d_to));
    c.add(attention(d_to, heads, 1, 1 + n_other));
    c.add(linear(d_to, d_from, 1)); // back
    c
}

/// Analytic cost of a full build at its configured resolution. FLOPs are
/// per image (batch 1).
pub fn count_costs(cfg: &VariantConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut entries = Vec::new();
    let res = cfg.resolution as u64;
    let classes = cfg.classes as u64;

    // stem: 3x3 stride-1 conv at full resolution
    let mut stem = Cost::zero();
    stem.add(conv(3, 3, cfg.stem_width as u64, 1, res * res));
    stem.add(batch_norm(cfg.stem_width as u64));
    entries.push(CostEntry {
        module: "conv.stem".into(),
        params: stem.params,
        flops: stem.flops,
    });

    let mut in_ch = cfg.stem_width;
    let mut side = res;
    for (si, (&count, &out_ch)) in cfg.stage_blocks.iter().zip(&cfg.stage_channels).enumerate() {
        let mut stage = Cost::zero();
        for bi in 0..count {
            let block = MbconvConfig {
                in_channels: if bi == 0 { in_ch } else { out_ch },
                out_channels: out_ch,
                stride: if bi == 0 { 2 } else { 1 },
            };
            stage.add(mbconv(&block, side));
            if bi == 0 {
                side /= 2;
            }
        }
        entries.push(CostEntry {
            module: format!("conv.s{}", si + 1),
            params: stage.params,
            flops: stage.flops,
        });
        in_ch = out_ch;
    }

    let mut head = Cost::zero();
    head.add(linear(cfg.stage_channels[3] as u64, classes, 1));
    entries.push(CostEntry {
        module: "conv.head".into(),
        params: head.params,
        flops: head.flops,
    });

    let (s2_side, s4_side) = cfg.feature_sides();
    let m = &cfg.mfca;
    let (ds, dl) = (m.dim_small as u64, m.dim_large as u64);
    let heads = m.heads as u64;
    let n_small = ((s4_side / m.patch_small) * (s4_side / m.patch_small)) as u64;
    let n_large = ((s2_side / m.patch_large) * (s2_side / m.patch_large)) as u64;
    let c_small = cfg.stage_channels[3] as u64; // S4 channels feed the small branch
    let c_large = cfg.stage_channels[1] as u64; // S2 channels feed the large branch

    let mut small = Cost::zero();
    small.add(linear(
        (m.patch_small * m.patch_small) as u64 * c_small,
        ds,
        n_small,
    ));
    small.add(Cost {
        params: ds + (n_small + 1) * ds, // cls + positional table
        flops: 0,
    });
    for _ in 0..m.depth_small {
        small.add(encoder_block(ds, heads, m.ffn_ratio_small as u64, n_small + 1));
    }
    entries.push(CostEntry {
        module: "mfca.small".into(),
        params: small.params,
        flops: small.flops,
    });

    let mut large = Cost::zero();
    large.add(linear(
        (m.patch_large * m.patch_large) as u64 * c_large,
        dl,
        n_large,
    ));
    large.add(Cost {
        params: dl + (n_large + 1) * dl,
        flops: 0,
    });
    for _ in 0..m.depth_large {
        large.add(encoder_block(dl, heads, m.ffn_ratio_large as u64, n_large + 1));
    }
    entries.push(CostEntry {
        module: "mfca.large".into(),
        params: large.params,
        flops: large.flops,
    });

    let mut cross = Cost::zero();
    for _ in 0..m.rounds {
        cross.add(exchange_direction(dl, ds, heads, n_small));
        cross.add(exchange_direction(ds, dl, heads, n_large));
    }
    entries.push(CostEntry {
        module: "mfca.cross".into(),
        params: cross.params,
        flops: cross.flops,
    });

    let mut mheads = Cost::zero();
    if m.head_layernorm {
        mheads.add(layer_norm(ds));
        mheads.add(layer_norm(dl));
    }
    mheads.add(linear(ds, classes, 1));
    mheads.add(linear(dl, classes, 1));
    entries.push(CostEntry {
        module: "mfca.heads".into(),
        params: mheads.params,
        flops: mheads.flops,
    });

    let mut fusion = Cost::zero();
    match &cfg.fusion {
        FusionKind::Akf { .. } => {} // normalization, mixing, softmax: no MACs
        FusionKind::Ckf { k, .. } => {
            let k = *k as u64;
            fusion.add(linear(classes, k, 1));
            fusion.add(linear(classes, k, 1));
            fusion.add(linear(2 * k, classes, 1));
        }
    }
    entries.push(CostEntry {
        module: "fusion".into(),
        params: fusion.params,
        flops: fusion.flops,
    });

    Ok(CostReport::from_entries(entries))
}

/// Patch sizes included in the sweep grids: divisors of the feature side,
/// size 2 and up (1x1 patches degenerate into per-pixel tokens whose
/// positional table dwarfs the embedding and breaks the grid's param
/// monotonicity).
pub fn sweep_patch_sizes(side: usize) -> Vec<usize> {
    divisors(side).into_iter().filter(|&p| p >= 2).collect()
}

/// Cost grid over patch-size combinations. Invalid combinations are skipped
/// and reported in the warnings list.
pub fn patch_sweep(
    cfg: &VariantConfig,
    patch_sizes_large: &[usize],
    patch_sizes_small: &[usize],
) -> (Vec<(usize, usize, CostReport)>, Vec<String>) {
    let mut grid = Vec::new();
    let mut warnings = Vec::new();
    let (s2_side, s4_side) = cfg.feature_sides();
    for &pl in patch_sizes_large {
        for &ps in patch_sizes_small {
            if pl == 0 || s2_side % pl != 0 || ps == 0 || s4_side % ps != 0 {
                warnings.push(format!(
                    "skipping patch pair ({pl},{ps}): must divide feature sides {s2_side}/{s4_side}"
                ));
                continue;
            }
            let mut c = cfg.clone();
            c.mfca.patch_large = pl;
            c.mfca.patch_small = ps;
            match count_costs(&c) {
                Ok(report) => grid.push((pl, ps, report)),
                Err(e) => warnings.push(format!("skipping patch pair ({pl},{ps}): {e}")),
            }
        }
    }
    (grid, warnings)
}

/// CSV rendering of a sweep grid: one row per valid combination.
pub fn sweep_csv(grid: &[(usize, usize, CostReport)]) -> String {
    let mut out = String::from("patch_large,patch_small,params,flops\n");
    for (pl, ps, report) in grid {
        out.push_str(&format!(
            "{},{},{},{}\n",
            pl, ps, report.total_params, report.total_flops
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CtrlfModel;

    fn akf() -> FusionKind {
        FusionKind::Akf { alpha: 10.0 }
    }

    fn ckf() -> FusionKind {
        FusionKind::Ckf {
            k: 128,
            dropout_rate: 0.5,
        }
    }

    #[test]
    fn totals_equal_sum_of_parts() {
        let cfg = VariantConfig::ctrlf_s(akf(), 102, 224);
        let r = count_costs(&cfg).unwrap();
        assert_eq!(r.total_params, r.entries.iter().map(|e| e.params).sum::<u64>());
        assert_eq!(r.total_flops, r.entries.iter().map(|e| e.flops).sum::<u64>());
    }

    #[test]
    fn analytic_params_match_built_model_exactly() {
        // zero tolerance: the analytic formulas and the built model must
        // agree scalar for scalar
        let cases = vec![
            VariantConfig::tiny(akf(), 8),
            VariantConfig::tiny(ckf(), 8),
            {
                let mut c = VariantConfig::tiny(akf(), 5);
                c.mfca.patch_large = 4;
                c.mfca.patch_small = 1;
                c
            },
            VariantConfig::ctrlf_s(akf(), 102, 224),
            VariantConfig::ctrlf_s(ckf(), 38, 224),
        ];
        for cfg in cases {
            let analytic = count_costs(&cfg).unwrap().total_params;
            let model = CtrlfModel::<f32>::build(&cfg, 0).unwrap();
            assert_eq!(
                analytic,
                model.num_trainable_params(),
                "analytic vs enumerated for {} ({})",
                cfg.name,
                cfg.fusion.name()
            );
        }
    }

    #[test]
    fn published_cost_table_within_ten_percent() {
        let within = |got: u64, want: f64| {
            let got = got as f64;
            (got - want).abs() / want <= 0.10
        };
        let s_akf = count_costs(&VariantConfig::ctrlf_s(akf(), 102, 224)).unwrap();
        assert!(within(s_akf.total_params, 9.97e6), "S+AKF params {}", s_akf.total_params);
        assert!(within(s_akf.total_flops, 1.43e9), "S+AKF flops {}", s_akf.total_flops);

        let b_akf = count_costs(&VariantConfig::ctrlf_b(akf(), 102, 224)).unwrap();
        assert!(within(b_akf.total_params, 21.36e6), "B+AKF params {}", b_akf.total_params);
        assert!(within(b_akf.total_flops, 3.29e9), "B+AKF flops {}", b_akf.total_flops);
    }

    #[test]
    fn akf_ckf_param_delta_small() {
        for (mk, name) in [(VariantConfig::ctrlf_s as fn(FusionKind, usize, usize) -> VariantConfig, "s"), (VariantConfig::ctrlf_b as fn(FusionKind, usize, usize) -> VariantConfig, "b")] {
            let a = count_costs(&mk(akf(), 102, 224)).unwrap().total_params;
            let c = count_costs(&mk(ckf(), 102, 224)).unwrap().total_params;
            assert!(c > a, "ckf adds parameters");
            assert!(
                c - a < 100_000,
                "variant {name}: fusion delta {} exceeds 0.1M",
                c - a
            );
        }
    }

    #[test]
    fn flops_scale_with_resolution() {
        for mk in [VariantConfig::ctrlf_s as fn(FusionKind, usize, usize) -> VariantConfig, VariantConfig::ctrlf_b] {
            let lo = count_costs(&mk(akf(), 102, 224)).unwrap().total_flops as f64;
            let hi = count_costs(&mk(akf(), 102, 384)).unwrap().total_flops as f64;
            let ratio = hi / lo;
            assert!((2.7..=3.1).contains(&ratio), "scaling ratio {ratio}");
        }
    }

    #[test]
    fn sweep_grid_monotone() {
        let cfg = VariantConfig::ctrlf_s(ckf(), 102, 224);
        let larges = sweep_patch_sizes(56);
        let smalls = sweep_patch_sizes(14);
        assert_eq!(larges, vec![2, 4, 7, 8, 14, 28, 56]);
        assert_eq!(smalls, vec![2, 7, 14]);
        let (grid, warnings) = patch_sweep(&cfg, &larges, &smalls);
        assert!(warnings.is_empty());
        assert_eq!(grid.len(), larges.len() * smalls.len());
        let lookup = |pl: usize, ps: usize| {
            grid.iter()
                .find(|(a, b, _)| *a == pl && *b == ps)
                .map(|(_, _, r)| r)
                .unwrap()
        };
        // flops non-increasing and params non-decreasing in each patch dim
        for &ps in &smalls {
            for w in larges.windows(2) {
                let (a, b) = (lookup(w[0], ps), lookup(w[1], ps));
                assert!(b.total_flops <= a.total_flops, "flops at large {}->{}", w[0], w[1]);
                assert!(b.total_params >= a.total_params, "params at large {}->{}", w[0], w[1]);
            }
        }
        for &pl in &larges {
            for w in smalls.windows(2) {
                let (a, b) = (lookup(pl, w[0]), lookup(pl, w[1]));
                assert!(b.total_flops <= a.total_flops, "flops at small {}->{}", w[0], w[1]);
                assert!(b.total_params >= a.total_params, "params at small {}->{}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn sweep_skips_invalid_sizes_with_warning() {
        let cfg = VariantConfig::ctrlf_s(ckf(), 102, 224);
        let (grid, warnings) = patch_sweep(&cfg, &[8, 5], &[2]);
        assert_eq!(grid.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("(5,2)"));
    }

    #[test]
    fn csv_format() {
        let cfg = VariantConfig::ctrlf_s(ckf(), 102, 224);
        let (grid, _) = patch_sweep(&cfg, &[8], &[2]);
        let csv = sweep_csv(&grid);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "patch_large,patch_small,params,flops");
        let row = lines.next().unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], "8");
        assert_eq!(fields[1], "2");
        assert!(fields[2].parse::<u64>().is_ok());
        assert!(fields[3].parse::<u64>().is_ok());
    }

    #[test]
    fn depthwise_cost_independent_of_channel_mixing() {
        // depthwise k x k over C channels: C * k^2 weights, no cross terms
        let c = conv(3, 64, 64, 64, 10 * 10);
        assert_eq!(c.params, 64 * 9);
        assert_eq!(c.flops, 64 * 9 * 100);
    }
}
