//! Invariant suite run by `nlcodec selftest` on small random models.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::finite_diff_check;
use crate::ccn::{build_mask, causality_probe, ConditionalModel, GroupSchedule, MaskKind, MaskedConv};
use crate::coder::{decode_block, encode_block, ideal_bits, DecodeMode};
use crate::entropy::{mog_table, EntropyConfig, EntropyModel, HeadKind};
use crate::error::Result;
use crate::infer::CodingModel;
use crate::metrics::ms_ssim_node;
use crate::params::ParamSet;
use crate::quantizer::Quantizer;
use crate::synth::uniform_codes;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Test hook: sets every context mask to all ones before probing.
    pub sabotage_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {:<14} {}", self.name, self.detail)
    }
}

fn check(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn small_model(kind: HeadKind, m: usize, nonlocal: bool, rng: &mut impl Rng) -> Result<EntropyModel> {
    let mut cfg = EntropyConfig::new(m);
    cfg.levels = 4;
    cfg.components = 2;
    cfg.n_feat = 2;
    cfg.res_blocks = 1;
    cfg.nonlocal = nonlocal;
    let q = Quantizer::new(m, cfg.levels);
    EntropyModel::new(cfg, kind, q.all_centers(), rng)
}

fn causality(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (kind, nonlocal) in [(HeadKind::Post, true), (HeadKind::Mog, true), (HeadKind::Post, false)] {
        let m = rng.gen_range(2..=4);
        let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
        let mut model = small_model(kind, m, nonlocal, rng)?;
        if opts.sabotage_mask {
            model.sabotage_masks(rng);
        }
        let y = uniform_codes(m, h, w, model.levels(), rng);
        for k in 0..GroupSchedule::new(m, h, w).num_groups() {
            worst = worst.max(causality_probe(&model, &y, k, rng)?);
            probes += 1;
        }
    }
    Ok((worst <= 1e-12, format!("{probes} probes, max change {worst:.3e}")))
}

fn masks() -> Result<(bool, String)> {
    for radius in 1..=2 {
        for m in 1..=5 {
            for kind in [MaskKind::Input, MaskKind::Hidden] {
                let mask = build_mask(kind, radius, m);
                let ri = radius as isize;
                let mut expected = 0;
                for r in 0..m as isize {
                    for s in 0..m as isize {
                        for u in -ri..=ri {
                            for v in -ri..=ri {
                                let on = match kind {
                                    MaskKind::Input => s + u + v < r,
                                    MaskKind::Hidden => s + u + v <= r,
                                };
                                if on != mask.get(r as usize, s as usize, u, v) {
                                    return Ok((false, format!("{kind:?} mask wrong at r={r} s={s} u={u} v={v}")));
                                }
                                expected += on as usize;
                            }
                        }
                    }
                }
                if expected != mask.count_ones() {
                    return Ok((false, format!("{kind:?} mask has {} ones, expected {expected}", mask.count_ones())));
                }
            }
        }
    }
    Ok((true, "radius 1..2, M 1..5".into()))
}

fn normalization(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let q = Quantizer::new(1, 8);
    let centers = q.channel_centers(0);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let c = 3;
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = raw.iter().map(|v| v.exp()).sum();
        let pi: Vec<f64> = raw.iter().map(|v| v.exp() / z).collect();
        let mu: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let s: Vec<f64> = (0..c).map(|_| rng.gen_range(-6.9f64..6.9).exp()).collect();
        let t = mog_table(&pi, &mu, &s, &centers);
        worst = worst.max((t.iter().sum::<f64>() - 1.0).abs());
    }
    let mog_ok = worst <= 1e-6;
    let model = small_model(HeadKind::Post, 3, true, rng)?;
    let y = uniform_codes(3, 4, 5, model.levels(), rng);
    let mut post_worst: f64 = 0.0;
    for row in model.tables(&y)? {
        post_worst = post_worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((
        mog_ok && post_worst <= 1e-9,
        format!("mog {worst:.2e}, post {post_worst:.2e}"),
    ))
}

fn round_trip(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut total = 0;
    for _ in 0..3 {
        let m = rng.gen_range(2..=4);
        let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let mut model = small_model(HeadKind::Post, m, true, rng)?;
        if opts.sabotage_mask {
            model.sabotage_masks(rng);
        }
        let cm = CodingModel::compile(&model)?;
        let y = uniform_codes(m, h, w, cm.levels(), rng);
        let payload = encode_block(&y, &cm)?;
        for mode in [DecodeMode::GroupParallel, DecodeMode::Serial] {
            let back = decode_block(&payload, &cm, (m, h, w), mode)?;
            if back != y {
                return Ok((false, format!("{mode:?} decode differs on {m}x{h}x{w}")));
            }
        }
        let over = payload.len() as f64 * 8.0 - ideal_bits(&y, &cm)?;
        if over > 64.0 {
            return Ok((false, format!("payload exceeds ideal length by {over:.1} bits")));
        }
        total += payload.len();
    }
    Ok((true, format!("3 blocks, {total} payload bytes")))
}

fn gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    const EPS: f64 = 1e-5;
    let mut errs = Vec::new();

    let mut ps = ParamSet::new();
    let conv = MaskedConv::new(&mut ps, "c", MaskKind::Input, 3, 1, 2, 1, rng);
    let x = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
    errs.push((
        "masked conv",
        finite_diff_check(
            |g, v| {
                let p = ps.bind(g, false);
                let o = conv.forward(g, &p, v)?;
                let s = g.square(o);
                Ok(g.sum(s))
            },
            &x,
            EPS,
        )?,
    ));

    let y = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(0.0..1.0));
    let logw = Tensor::from_fn(&[2, 2], |_| rng.gen_range(-0.5..0.5));
    errs.push((
        "non-local",
        finite_diff_check(
            |g, lw| {
                let yv = g.constant(y.clone());
                let o = g.nonlocal(yv, lw, None)?;
                let s = g.square(o);
                Ok(g.sum(s))
            },
            &logw,
            EPS,
        )?,
    ));

    let mu = Tensor::from_fn(&[1, 2, 1, 2, 2], |_| rng.gen_range(0.0..1.0));
    let pi = Tensor::from_fn(&[1, 2, 1, 2, 2], |i| if i < 4 { 0.3 } else { 0.7 });
    let sc = Tensor::from_fn(&[1, 2, 1, 2, 2], |_| rng.gen_range(0.1..0.5));
    let lo = vec![0.1, f64::NEG_INFINITY, 0.3, 0.55];
    let hi = vec![0.4, 0.2, f64::INFINITY, 0.8];
    errs.push((
        "mog",
        finite_diff_check(
            |g, m| {
                let p = g.constant(pi.clone());
                let s = g.constant(sc.clone());
                let o = g.mog_prob(p, m, s, lo.clone(), hi.clone())?;
                Ok(g.bits(o, 1e-9))
            },
            &mu,
            EPS,
        )?,
    ));

    let a = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.2..0.8));
    let b = a.map(|v| (v + 0.1).min(1.0));
    errs.push((
        "ms-ssim",
        finite_diff_check(
            |g, x| {
                let t = g.constant(b.clone());
                ms_ssim_node(g, x, t)
            },
            &a,
            EPS,
        )?,
    ));

    let worst = errs.iter().fold(0.0f64, |m, e| m.max(e.1));
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst < 1e-4, detail))
}

/// Runs every check; the suite passes iff all results pass.
pub fn run(opts: &SelftestOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    vec![
        check("causality", causality(opts, &mut rng)),
        check("masks", masks()),
        check("normalization", normalization(&mut rng)),
        check("round-trip", round_trip(opts, &mut rng)),
        check("gradients", gradients(&mut rng)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sabotage_is_caught_by_causality() {
        let r = causality(&SelftestOptions { seed: 1, sabotage_mask: true }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!r.0, "{}", r.1);
        let r = causality(&SelftestOptions { seed: 1, sabotage_mask: false }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.0, "{}", r.1);
    }

    #[test]
    fn fresh_models_pass_everything() {
        for r in run(&SelftestOptions::default()) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn masks_match_enumeration() {
        assert!(masks().unwrap().0);
    }
}
