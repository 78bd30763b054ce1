//! Context-based convolutions over code blocks.
//!
//! A code block `y ∈ ℝ^{M×H×W}` is split into `K = M + H + W − 2`
//! anti-diagonal groups `GP_k = {(r, p, q) : r + p + q = k}`. A masked
//! convolution sees, for output channel `r`, the input channel `s` at
//! spatial offset `(u, v)` only when `s + u + v < r` (input layers) or
//! `s + u + v ≤ r` (hidden layers). Stacking one input layer with any
//! number of hidden layers makes the features of a code depend only on
//! codes in strictly earlier groups.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::quantizer::CodeBlock;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Input,
    Hidden,
}

/// Binary mask `m_{r,s}(u, v)` for offsets `u, v ∈ [−radius, radius]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    kind: MaskKind,
    m: usize,
    radius: usize,
    bits: Vec<bool>,
}

pub fn build_mask(kind: MaskKind, radius: usize, m: usize) -> Mask {
    let k = 2 * radius + 1;
    let mut bits = vec![false; m * m * k * k];
    for r in 0..m {
        for s in 0..m {
            for a in 0..k {
                for b in 0..k {
                    let sum = s as isize + a as isize - radius as isize + b as isize - radius as isize;
                    bits[((r * m + s) * k + a) * k + b] = match kind {
                        MaskKind::Input => sum < r as isize,
                        MaskKind::Hidden => sum <= r as isize,
                    };
                }
            }
        }
    }
    Mask { kind, m, radius, bits }
}

impl Mask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.m
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn get(&self, r: usize, s: usize, u: isize, v: isize) -> bool {
        let k = 2 * self.radius + 1;
        let (a, b) = (u + self.radius as isize, v + self.radius as isize);
        if a < 0 || b < 0 || a as usize >= k || b as usize >= k {
            return false;
        }
        self.bits[((r * self.m + s) * k + a as usize) * k + b as usize]
    }

    /// Unmasked `(s, u, v)` taps for output channel `r`, in `(s, u, v)` order.
    pub fn taps(&self, r: usize) -> Vec<(usize, isize, isize)> {
        let rad = self.radius as isize;
        let mut out = Vec::new();
        for s in 0..self.m {
            for u in -rad..=rad {
                for v in -rad..=rad {
                    if self.get(r, s, u, v) {
                        out.push((s, u, v));
                    }
                }
            }
        }
        out
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    fn fill_all(&mut self) {
        self.bits.iter_mut().for_each(|b| *b = true);
    }
}

/// Masked convolution from `n_in` to `n_out` feature blocks of `M` channels.
///
/// Weights are stored as an ordinary convolution kernel of shape
/// `[n_out·M, n_in·M, k, k]` where output channel `i·M + r` and input
/// channel `j·M + s` hold `w_{i,j,r,s}`. The bias is shared by the `M`
/// channels of each output block.
#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub kind: MaskKind,
    pub m: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub radius: usize,
    pub w: ParamId,
    pub b: ParamId,
    mask: Mask,
}

impl MaskedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        kind: MaskKind,
        m: usize,
        n_in: usize,
        n_out: usize,
        radius: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mask = build_mask(kind, radius, m);
        let k = 2 * radius + 1;
        let mut w = Tensor::zeros(&[n_out * m, n_in * m, k, k]);
        let data = w.data_mut();
        for r in 0..m {
            let taps = mask.taps(r);
            let fan_in = (n_in * taps.len()).max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for i in 0..n_out {
                for j in 0..n_in {
                    for &(s, u, v) in &taps {
                        let a = (u + radius as isize) as usize;
                        let b = (v + radius as isize) as usize;
                        data[(((i * m + r) * n_in * m + j * m + s) * k + a) * k + b] =
                            rng.gen_range(-bound..bound);
                    }
                }
            }
        }
        let w = ps.insert(format!("{name}.w"), w);
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[n_out]));
        Self {
            kind,
            m,
            n_in,
            n_out,
            radius,
            w,
            b,
            mask,
        }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn kernel(&self) -> usize {
        2 * self.radius + 1
    }

    /// Removes the mask entirely. Only meant for sabotage checks of the
    /// causality harness.
    #[doc(hidden)]
    pub fn force_unmasked(&mut self) {
        self.mask.fill_all();
    }

    pub fn mask_tensor(&self) -> Tensor {
        let (m, k) = (self.m, self.kernel());
        let mut t = Tensor::zeros(&[self.n_out * m, self.n_in * m, k, k]);
        let d = t.data_mut();
        for i in 0..self.n_out {
            for r in 0..m {
                for j in 0..self.n_in {
                    for s in 0..m {
                        for a in 0..k {
                            for b in 0..k {
                                let on = self.mask.bits[((r * m + s) * k + a) * k + b];
                                d[(((i * m + r) * self.n_in * m + j * m + s) * k + a) * k + b] =
                                    if on { 1.0 } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
        t
    }

    /// `x: [N, n_in·M, H, W] → [N, n_out·M, H, W]`, zero-padded borders.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.n_in * self.m {
            return dim_err(format!(
                "masked conv expects {} input channels ({} blocks of M={}), got shape {:?}",
                self.n_in * self.m,
                self.n_in,
                self.m,
                s
            ));
        }
        let mask = g.constant(self.mask_tensor());
        let wm = g.mul(p.var(self.w), mask)?;
        let expand = (0..self.n_out)
            .flat_map(|i| std::iter::repeat(i).take(self.m))
            .collect();
        let bias = g.gather(p.var(self.b), expand)?;
        g.conv2d(x, wm, Some(bias), 1, self.radius)
    }
}

/// Anti-diagonal decoding groups of an `M×H×W` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSchedule {
    pub m: usize,
    pub h: usize,
    pub w: usize,
}

impl GroupSchedule {
    pub fn new(m: usize, h: usize, w: usize) -> Self {
        Self { m, h, w }
    }

    pub fn num_groups(&self) -> usize {
        self.m + self.h + self.w - 2
    }

    pub fn group_of(&self, r: usize, p: usize, q: usize) -> Result<usize> {
        if r >= self.m || p >= self.h || q >= self.w {
            return Err(Error::Usage(format!(
                "position ({r},{p},{q}) outside block {}x{}x{}",
                self.m, self.h, self.w
            )));
        }
        Ok(r + p + q)
    }

    /// Members of `GP_k` in lexicographic `(r, p, q)` order.
    pub fn group(&self, k: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.m.min(k + 1) {
            for p in 0..self.h.min(k - r + 1) {
                let q = k - r - p;
                if q < self.w {
                    out.push((r, p, q));
                }
            }
        }
        out
    }

    pub fn groups(&self) -> Vec<Vec<(usize, usize, usize)>> {
        (0..self.num_groups()).map(|k| self.group(k)).collect()
    }

    /// Coding order: groups ascending, lexicographic within a group.
    pub fn canonical_order(&self) -> Vec<(usize, usize, usize)> {
        self.groups().into_iter().flatten().collect()
    }
}

/// Anything that maps a code block to one probability row per code.
pub trait ConditionalModel {
    fn levels(&self) -> usize;

    /// Rows laid out by code offset `(r·H + p)·W + q`, each of length `L`.
    fn tables(&self, y: &CodeBlock) -> Result<Vec<Vec<f64>>>;
}

/// Replaces every code in groups `≥ k` with a different random index and
/// returns the largest absolute change of any probability in the tables
/// of codes in groups `≤ k`. A causal model returns exactly zero.
pub fn causality_probe(
    model: &impl ConditionalModel,
    y: &CodeBlock,
    k: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (m, h, w) = y.dims();
    let sched = GroupSchedule::new(m, h, w);
    let levels = model.levels();
    if levels < 2 {
        return Ok(0.0);
    }
    let mut perturbed = y.clone();
    for kk in k..sched.num_groups() {
        for (r, p, q) in sched.group(kk) {
            let old = y.get(r, p, q) as usize;
            let new = (old + 1 + rng.gen_range(0..levels - 1)) % levels;
            perturbed.set(r, p, q, new as u8);
        }
    }
    let base = model.tables(y)?;
    let pert = model.tables(&perturbed)?;
    let mut worst: f64 = 0.0;
    for kk in 0..=k.min(sched.num_groups() - 1) {
        for (r, p, q) in sched.group(kk) {
            let o = y.offset(r, p, q);
            for (a, b) in base[o].iter().zip(&pert[o]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn input_mask_excludes_self() {
        let m = build_mask(MaskKind::Input, 1, 3);
        assert!(!m.get(0, 0, 0, 0));
        // r = 0 sees nothing with s + u + v >= 0
        for s in 0..3 {
            for u in -1..=1 {
                for v in -1..=1 {
                    if s as isize + u + v >= 0 {
                        assert!(!m.get(0, s, u, v));
                    }
                }
            }
        }
        let h = build_mask(MaskKind::Hidden, 1, 3);
        assert!(h.get(1, 1, 0, 0));
    }

    #[test]
    fn input_mask_enumeration_m2() {
        let m = build_mask(MaskKind::Input, 1, 2);
        assert!(m.get(1, 0, 0, 0));
        let mut ones = 0;
        for r in 0..2 {
            for s in 0..2 {
                for u in -1isize..=1 {
                    for v in -1isize..=1 {
                        let want = (s as isize + u + v) < r as isize;
                        assert_eq!(m.get(r, s, u, v), want);
                        ones += want as usize;
                    }
                }
            }
        }
        assert_eq!(ones, m.count_ones());
    }

    #[test]
    fn groups_partition_block() {
        let s = GroupSchedule::new(2, 2, 2);
        let sizes: Vec<usize> = s.groups().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![1, 3, 3, 1]);
        assert_eq!(s.group_of(0, 0, 0).unwrap(), 0);
        assert_eq!(s.group_of(1, 1, 1).unwrap(), s.num_groups() - 1);
        assert!(s.group_of(2, 0, 0).is_err());
        let s = GroupSchedule::new(3, 4, 5);
        let mut seen = vec![0u8; 60];
        for (r, p, q) in s.canonical_order() {
            seen[(r * 4 + p) * 5 + q] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    fn ones_forward(kind: MaskKind, m: usize, h: usize, w: usize, radius: usize) -> (MaskedConv, Tensor) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = MaskedConv::new(&mut ps, "c", kind, m, 1, 1, radius, &mut rng);
        ps.get_mut(layer.w).data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, m, h, w], 1.0));
        let y = layer.forward(&mut g, &p, x).unwrap();
        (layer, g.value(y).clone())
    }

    #[test]
    fn all_ones_counts_valid_taps() {
        let (m, h, w, rad) = (3, 4, 5, 1);
        let (_, out) = ones_forward(MaskKind::Input, m, h, w, rad);
        let mask = build_mask(MaskKind::Input, rad, m);
        for r in 0..m {
            for p in 0..h {
                for q in 0..w {
                    let mut count = 0;
                    for (s, u, v) in mask.taps(r) {
                        let (pp, qq) = (p as isize + u, q as isize + v);
                        if pp >= 0 && qq >= 0 && (pp as usize) < h && (qq as usize) < w {
                            let _ = s;
                            count += 1;
                        }
                    }
                    assert_eq!(out.at4(0, r, p, q), count as f64);
                }
            }
        }
    }

    #[test]
    fn first_channel_of_input_layer_is_bias() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = MaskedConv::new(&mut ps, "c", MaskKind::Input, 2, 1, 2, 1, &mut rng);
        ps.get_mut(layer.b).data_mut().copy_from_slice(&[0.5, -1.5]);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64).sin()));
        let y = layer.forward(&mut g, &p, x).unwrap();
        let out = g.value(y);
        // the first code of the first channel has an empty context
        assert_eq!(out.at4(0, 0, 0, 0), 0.5);
        assert_eq!(out.at4(0, 2, 0, 0), -1.5);
        // later positions of channel 0 see earlier anti-diagonals of channel 0
        assert_ne!(out.at4(0, 0, 1, 1), 0.5);
    }

    #[test]
    fn future_inputs_do_not_leak() {
        let (m, h, w) = (3, 4, 4);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = MaskedConv::new(&mut ps, "c", MaskKind::Input, m, 1, 2, 1, &mut rng);
        let base = Tensor::from_fn(&[1, m, h, w], |i| ((i * 7) % 11) as f64 / 11.0);
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, false);
            let x = g.constant(x);
            let y = layer.forward(&mut g, &p, x).unwrap();
            g.value(y).clone()
        };
        let y0 = run(base.clone());
        for (s, pp, qq) in [(2, 1, 1), (0, 3, 3), (1, 2, 0)] {
            let mut x = base.clone();
            x.data_mut()[(s * h + pp) * w + qq] += 5.0;
            let y1 = run(x);
            for i in 0..2 {
                for r in 0..m {
                    for p in 0..h {
                        for q in 0..w {
                            if s + pp + qq >= r + p + q {
                                assert_eq!(y0.at4(0, i * m + r, p, q), y1.at4(0, i * m + r, p, q));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = MaskedConv::new(&mut ps, "c", MaskKind::Hidden, 3, 2, 1, 1, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 5, 2, 2]));
        assert!(matches!(layer.forward(&mut g, &p, x), Err(Error::Dimension(_))));
    }
}
