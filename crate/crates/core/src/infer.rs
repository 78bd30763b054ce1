//! Per-position evaluation of the post entropy model for coding.
//!
//! The graph forward computes whole planes with GEMM, whose summation
//! order depends on the kernel the CPU selects. Coding needs the decoder
//! to reproduce the encoder's tables bit for bit, so this module
//! re-evaluates the same network code by code with fixed-order loops and
//! a portable `exp`. Evaluation proceeds group by group: every layer is
//! computed for all members of group `k` before the next layer, since
//! hidden masks read same-group positions of the previous layer.

use rayon::prelude::*;

use crate::ccn::{ConditionalModel, GroupSchedule, MaskedConv};
use crate::entropy::{EntropyModel, HeadKind};
use crate::error::{dim_err, Error, Result};
use crate::nn::PRelu;
use crate::nonlocal::{position_rep_conf, ProxyWeights};
use crate::params::ParamSet;
use crate::quantizer::CodeBlock;

#[derive(Clone, Debug)]
struct Layer {
    m: usize,
    n_in: usize,
    taps: Vec<Vec<(usize, isize, isize)>>,
    /// `[i·M + r]` → weights over `(j, tap)`.
    w: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Layer {
    fn compile(layer: &MaskedConv, ps: &ParamSet) -> Self {
        let (m, n_in, n_out, k) = (layer.m, layer.n_in, layer.n_out, layer.kernel());
        let rad = layer.radius as isize;
        let wt = ps.get(layer.w).data();
        let taps: Vec<_> = (0..m).map(|r| layer.mask().taps(r)).collect();
        let mut w = Vec::with_capacity(n_out * m);
        for i in 0..n_out {
            for (r, tr) in taps.iter().enumerate() {
                let mut row = Vec::with_capacity(n_in * tr.len());
                for j in 0..n_in {
                    for &(s, u, v) in tr {
                        let a = (u + rad) as usize;
                        let b = (v + rad) as usize;
                        row.push(wt[(((i * m + r) * n_in * m + j * m + s) * k + a) * k + b]);
                    }
                }
                w.push(row);
            }
        }
        Self {
            m,
            n_in,
            taps,
            w,
            bias: ps.get(layer.b).data().to_vec(),
        }
    }

    #[inline]
    fn at(&self, inputs: &[&[f64]], (h, wd): (usize, usize), i: usize, (r, p, q): (usize, usize, usize)) -> f64 {
        let plane = h * wd;
        let tr = &self.taps[r];
        let row = &self.w[i * self.m + r];
        let mut acc = self.bias[i];
        for (j, x) in inputs.iter().enumerate().take(self.n_in) {
            let wj = &row[j * tr.len()..(j + 1) * tr.len()];
            for (&(s, du, dv), &wt) in tr.iter().zip(wj) {
                let pp = p as isize + du;
                let qq = q as isize + dv;
                if pp < 0 || qq < 0 || pp as usize >= h || qq as usize >= wd {
                    continue;
                }
                acc += wt * x[s * plane + pp as usize * wd + qq as usize];
            }
        }
        acc
    }
}

#[inline]
fn prelu(v: f64, a: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        a * v
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
struct ResLayer {
    c1: Layer,
    a1: Vec<f64>,
    c2: Layer,
    a2: Vec<f64>,
}

/// Frozen post model prepared for deterministic table evaluation.
#[derive(Clone, Debug)]
pub struct CodingModel {
    m: usize,
    levels: usize,
    nf: usize,
    nonlocal: bool,
    window: Option<usize>,
    proxy: ProxyWeights,
    centers: Vec<Vec<f64>>,
    local: Layer,
    local_a: Vec<f64>,
    gate: Layer,
    stem: Layer,
    stem_a: Vec<f64>,
    res: Vec<ResLayer>,
    head: Layer,
}

fn slopes(a: &PRelu, ps: &ParamSet) -> Vec<f64> {
    ps.get(a.a).data().to_vec()
}

impl CodingModel {
    pub fn compile(model: &EntropyModel) -> Result<Self> {
        if model.kind != HeadKind::Post {
            return Err(Error::Usage("coding needs a post entropy model".into()));
        }
        let ps = &model.params;
        let parts = model.parts();
        let logw = ps.get(parts.attn.logw);
        let proxy = ProxyWeights::from_rows(
            model.cfg.m,
            logw.data().iter().map(|&v| libm::exp(v)).collect(),
        )?;
        Ok(Self {
            m: model.cfg.m,
            levels: model.cfg.levels,
            nf: model.cfg.n_feat,
            nonlocal: parts.attn.enabled,
            window: parts.attn.window,
            proxy,
            centers: model.centers().to_vec(),
            local: Layer::compile(&parts.attn.local, ps),
            local_a: slopes(&parts.attn.local_act, ps),
            gate: Layer::compile(&parts.attn.gate, ps),
            stem: Layer::compile(parts.stem, ps),
            stem_a: slopes(parts.stem_act, ps),
            res: parts
                .res
                .iter()
                .map(|[(c1, a1), (c2, a2)]| ResLayer {
                    c1: Layer::compile(c1, ps),
                    a1: slopes(a1, ps),
                    c2: Layer::compile(c2, ps),
                    a2: slopes(a2, ps),
                })
                .collect(),
            head: Layer::compile(parts.heads[0], ps),
        })
    }

    pub fn channels(&self) -> usize {
        self.m
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn session(&self, h: usize, w: usize, parallel: bool) -> Session<'_> {
        let plane = h * w;
        let (m, nf) = (self.m, self.nf);
        Session {
            model: self,
            h,
            w,
            parallel,
            next: 0,
            y: vec![0.0; m * plane],
            fused: vec![0.0; (nf + 1) * m * plane],
            rep: vec![0.0; m * plane],
            conf: vec![0.0; m * plane],
            hs: vec![vec![0.0; nf * m * plane]; self.res.len() + 1],
            ts: vec![vec![0.0; nf * m * plane]; self.res.len()],
        }
    }

    /// Tables for every code of `y` in offset order, all codes known.
    pub fn teacher_forced(&self, y: &CodeBlock, parallel: bool) -> Result<Vec<Vec<f64>>> {
        let (m, h, w) = y.dims();
        if m != self.m {
            return dim_err(format!("code block has M={m}, model expects {}", self.m));
        }
        let mut s = self.session(h, w, parallel);
        for r in 0..m {
            for p in 0..h {
                for q in 0..w {
                    s.set_code(r, p, q, y.get(r, p, q))?;
                }
            }
        }
        let sched = GroupSchedule::new(m, h, w);
        let mut rows = vec![Vec::new(); y.len()];
        for k in 0..sched.num_groups() {
            let members = sched.group(k);
            for ((r, p, q), row) in members.iter().zip(s.eval_group(k)?) {
                rows[y.offset(*r, *p, *q)] = row;
            }
        }
        Ok(rows)
    }
}

impl ConditionalModel for CodingModel {
    fn levels(&self) -> usize {
        self.levels
    }

    fn tables(&self, y: &CodeBlock) -> Result<Vec<Vec<f64>>> {
        self.teacher_forced(y, false)
    }
}

/// Incremental evaluation state for one block.
pub struct Session<'a> {
    model: &'a CodingModel,
    h: usize,
    w: usize,
    parallel: bool,
    next: usize,
    y: Vec<f64>,
    fused: Vec<f64>,
    rep: Vec<f64>,
    conf: Vec<f64>,
    hs: Vec<Vec<f64>>,
    ts: Vec<Vec<f64>>,
}

impl Session<'_> {
    pub fn set_code(&mut self, r: usize, p: usize, q: usize, l: u8) -> Result<()> {
        let c = self
            .model
            .centers
            .get(r)
            .and_then(|c| c.get(l as usize))
            .ok_or_else(|| Error::Usage(format!("code ({r},{p},{q}) = {l} out of range")))?;
        self.y[(r * self.h + p) * self.w + q] = *c;
        Ok(())
    }

    fn map<F>(&self, pos: &[(usize, usize, usize)], f: F) -> Vec<Vec<f64>>
    where
        F: Fn((usize, usize, usize)) -> Vec<f64> + Sync + Send,
    {
        if self.parallel && pos.len() > 1 {
            pos.par_iter().map(|&x| f(x)).collect()
        } else {
            pos.iter().map(|&x| f(x)).collect()
        }
    }

    fn scatter(buf: &mut [f64], plane: usize, m: usize, pos: &[(usize, usize, usize)], w: usize, vals: &[Vec<f64>]) {
        for (&(r, p, q), v) in pos.iter().zip(vals) {
            for (i, x) in v.iter().enumerate() {
                buf[(i * m + r) * plane + p * w + q] = *x;
            }
        }
    }

    /// Evaluates group `k` and returns one probability row per member, in
    /// lexicographic `(r, p, q)` order. Groups must be evaluated in order
    /// and every code of earlier groups must have been set.
    pub fn eval_group(&mut self, k: usize) -> Result<Vec<Vec<f64>>> {
        if k != self.next {
            return Err(Error::Usage(format!("group {k} evaluated out of order (expected {})", self.next)));
        }
        let md = self.model;
        let (m, nf, h, w) = (md.m, md.nf, self.h, self.w);
        let plane = h * w;
        let dims = (h, w);
        let pos = GroupSchedule::new(m, h, w).group(k);
        self.next += 1;

        // local features
        let vals = {
            let y = &self.y;
            self.map(&pos, |(r, p, q)| {
                (0..nf)
                    .map(|i| prelu(md.local.at(&[y], dims, i, (r, p, q)), md.local_a[i * m + r]))
                    .collect()
            })
        };
        Self::scatter(&mut self.fused, plane, m, &pos, w, &vals);

        // non-local representation, confidence and gate
        if md.nonlocal {
            let vals = {
                let y = &self.y;
                self.map(&pos, |(r, p, q)| {
                    let mut scratch = Vec::new();
                    let (a, c) = position_rep_conf(y, dims, r, (p, q), &md.proxy, md.window, &mut scratch).unwrap_or((0.0, 0.0));
                    vec![a, c]
                })
            };
            for (&(r, p, q), v) in pos.iter().zip(&vals) {
                self.rep[r * plane + p * w + q] = v[0];
                self.conf[r * plane + p * w + q] = v[1];
            }
            let vals = {
                let mut inputs: Vec<&[f64]> = self.fused.chunks(m * plane).take(nf).collect();
                inputs.push(&self.conf);
                let rep = &self.rep;
                self.map(&pos, |(r, p, q)| {
                    let alpha = sigmoid(md.gate.at(&inputs, dims, 0, (r, p, q)));
                    vec![alpha * rep[r * plane + p * w + q]]
                })
            };
            let (_, nl_block) = self.fused.split_at_mut(nf * m * plane);
            Self::scatter(nl_block, plane, m, &pos, w, &vals);
        }

        // stem
        let vals = {
            let inputs: Vec<&[f64]> = self.fused.chunks(m * plane).collect();
            self.map(&pos, |(r, p, q)| {
                (0..nf)
                    .map(|i| prelu(md.stem.at(&inputs, dims, i, (r, p, q)), md.stem_a[i * m + r]))
                    .collect()
            })
        };
        Self::scatter(&mut self.hs[0], plane, m, &pos, w, &vals);

        // residual blocks
        for (b, rl) in md.res.iter().enumerate() {
            let vals = {
                let inputs: Vec<&[f64]> = self.hs[b].chunks(m * plane).collect();
                self.map(&pos, |(r, p, q)| {
                    (0..nf)
                        .map(|i| prelu(rl.c1.at(&inputs, dims, i, (r, p, q)), rl.a1[i * m + r]))
                        .collect()
                })
            };
            Self::scatter(&mut self.ts[b], plane, m, &pos, w, &vals);
            let vals = {
                let inputs: Vec<&[f64]> = self.ts[b].chunks(m * plane).collect();
                let hb = &self.hs[b];
                self.map(&pos, |(r, p, q)| {
                    (0..nf)
                        .map(|i| {
                            let t = prelu(rl.c2.at(&inputs, dims, i, (r, p, q)), rl.a2[i * m + r]);
                            hb[(i * m + r) * plane + p * w + q] + t
                        })
                        .collect()
                })
            };
            Self::scatter(&mut self.hs[b + 1], plane, m, &pos, w, &vals);
        }

        // post head
        let last = self.hs.last().expect("stem output");
        let inputs: Vec<&[f64]> = last.chunks(m * plane).collect();
        let rows = self.map(&pos, |(r, p, q)| {
            let logits: Vec<f64> = (0..md.levels).map(|l| md.head.at(&inputs, dims, l, (r, p, q))).collect();
            softmax(&logits)
        });
        Ok(rows)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| libm::exp(v - mx)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::EntropyConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(nonlocal: bool, seed: u64) -> EntropyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = EntropyConfig::new(3);
        cfg.levels = 5;
        cfg.n_feat = 2;
        cfg.res_blocks = 2;
        cfg.nonlocal = nonlocal;
        let centers = (0..3).map(|r| (1..=5).map(|i| i as f64 / 6.0 + 0.01 * r as f64).collect()).collect();
        EntropyModel::new(cfg, HeadKind::Post, centers, &mut rng).unwrap()
    }

    fn block(seed: u64) -> CodeBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CodeBlock::new(3, 5, 4, (0..60).map(|_| rng.gen_range(0..5)).collect()).unwrap()
    }

    #[test]
    fn agrees_with_graph_forward() {
        for nonlocal in [true, false] {
            let em = model(nonlocal, 7);
            let cm = CodingModel::compile(&em).unwrap();
            let y = block(2);
            let a = em.tables(&y).unwrap();
            let b = cm.teacher_forced(&y, false).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                for (x, z) in ra.iter().zip(rb) {
                    assert!((x - z).abs() < 1e-9, "{x} vs {z}");
                }
            }
        }
    }

    #[test]
    fn parallel_matches_serial_bitwise() {
        let em = model(true, 3);
        let cm = CodingModel::compile(&em).unwrap();
        let y = block(9);
        assert_eq!(cm.teacher_forced(&y, true).unwrap(), cm.teacher_forced(&y, false).unwrap());
    }

    #[test]
    fn groups_must_run_in_order() {
        let em = model(true, 3);
        let cm = CodingModel::compile(&em).unwrap();
        let mut s = cm.session(2, 2, false);
        assert!(s.eval_group(1).is_err());
        assert!(s.eval_group(0).is_ok());
    }

    #[test]
    fn mog_model_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let em = EntropyModel::new(EntropyConfig::new(2), HeadKind::Mog, vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]; 2], &mut rng).unwrap();
        assert!(CodingModel::compile(&em).is_err());
    }
}
