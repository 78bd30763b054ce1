//! Context-based non-local operator and the attention block that fuses it
//! with the local masked-convolution features.
//!
//! For a target code `y_r(p,q)` the candidates are the same-channel codes
//! `y_r(u,v)` on earlier anti-diagonals (`u + v < p + q`). Their similarity
//! to the (still unknown) target is judged through the already available
//! lower channels:
//!
//! ```text
//! g_d(p,q; u,v) = Σ_{j<r} w_{r,j} (y_j(p,q) − y_j(u,v))²
//! w_s(u,v)      = exp(−g_d) / Σ exp(−g_d)          (over candidates)
//! rep           = Σ w_s · y_r(u,v)
//! conf          = Σ w_s · g_d
//! ```
//!
//! Positions without candidates (the first anti-diagonal) have
//! `rep = conf = 0` and are flagged invalid.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::ccn::{MaskKind, MaskedConv};
use crate::error::{dim_err, Result};
use crate::nn::PRelu;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Nonnegative proxy weights `w_{r,j}` for `j < r`, stored as logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyWeights {
    m: usize,
    w: Vec<f64>,
}

impl ProxyWeights {
    /// Row `r` starts at `1/(r+1)`.
    pub fn init(m: usize) -> Self {
        let w = (0..m * m).map(|i| 1.0 / ((i / m) + 1) as f64).collect();
        Self { m, w }
    }

    pub fn from_log(logw: &Tensor) -> Result<Self> {
        let s = logw.shape();
        if s.len() != 2 || s[0] != s[1] {
            return dim_err(format!("proxy weights must be [M, M], got {s:?}"));
        }
        Ok(Self {
            m: s[0],
            w: logw.data().iter().map(|v| v.exp()).collect(),
        })
    }

    pub fn from_rows(m: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != m * m {
            return dim_err(format!("{} proxy weights for M={m}", w.len()));
        }
        Ok(Self { m, w })
    }

    pub fn log_tensor(&self) -> Tensor {
        Tensor::new(vec![self.m, self.m], self.w.iter().map(|v| v.ln()).collect()).expect("square")
    }

    #[inline]
    pub fn get(&self, r: usize, j: usize) -> f64 {
        self.w[r * self.m + j]
    }

    pub fn channels(&self) -> usize {
        self.m
    }
}

/// Proxy similarity between `y_r(p,q)` and `y_r(u,v)`; `y` is `[M, H, W]`.
pub fn proxy_distance(
    y: &Tensor,
    r: usize,
    (p, q): (usize, usize),
    (u, v): (usize, usize),
    w: &ProxyWeights,
) -> f64 {
    let (h, wd) = (y.dim(1), y.dim(2));
    let d = y.data();
    (0..r)
        .map(|j| {
            let diff = d[(j * h + p) * wd + q] - d[(j * h + u) * wd + v];
            w.get(r, j) * diff * diff
        })
        .sum()
}

/// Whether `(u, v)` lies in the spatial context of `(p, q)`.
pub fn spatial_mask(p: usize, q: usize, u: usize, v: usize) -> bool {
    u + v < p + q
}

fn in_window(p: usize, q: usize, u: usize, v: usize, window: Option<usize>) -> bool {
    match window {
        None => true,
        Some(r) => p.abs_diff(u) <= r && q.abs_diff(v) <= r,
    }
}

/// Softmin weights over the context plane of `(p, q)` in channel `r`,
/// as an `H×W` row-major plane. All zero when the context is empty.
pub fn nonlocal_weights(
    y: &Tensor,
    r: usize,
    (p, q): (usize, usize),
    w: &ProxyWeights,
    window: Option<usize>,
) -> Vec<f64> {
    let (h, wd) = (y.dim(1), y.dim(2));
    let mut plane = vec![0.0; h * wd];
    let mut cands = Vec::new();
    for u in 0..h {
        for v in 0..wd {
            if spatial_mask(p, q, u, v) && in_window(p, q, u, v, window) {
                cands.push((u * wd + v, proxy_distance(y, r, (p, q), (u, v), w)));
            }
        }
    }
    if cands.is_empty() {
        return plane;
    }
    let gmin = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let total: f64 = cands.iter().map(|c| libm::exp(-(c.1 - gmin))).sum();
    for (i, g) in cands {
        plane[i] = libm::exp(-(g - gmin)) / total;
    }
    plane
}

/// Representation and confidence of one code, `None` if its context is empty.
///
/// Summation runs over candidates in row-major `(u, v)` order; the result
/// depends only on codes in earlier groups.
pub fn position_rep_conf(
    y: &[f64],
    (h, wd): (usize, usize),
    r: usize,
    (p, q): (usize, usize),
    w: &ProxyWeights,
    window: Option<usize>,
    scratch: &mut Vec<(usize, f64)>,
) -> Option<(f64, f64)> {
    scratch.clear();
    let plane = h * wd;
    let u_lo = window.map_or(0, |k| p.saturating_sub(k));
    let u_hi = window.map_or(h, |k| (p + k + 1).min(h));
    let v_lo = window.map_or(0, |k| q.saturating_sub(k));
    let v_hi = window.map_or(wd, |k| (q + k + 1).min(wd));
    for u in u_lo..u_hi {
        for v in v_lo..v_hi {
            if u + v >= p + q {
                continue;
            }
            let mut g = 0.0;
            for j in 0..r {
                let diff = y[j * plane + p * wd + q] - y[j * plane + u * wd + v];
                g += w.get(r, j) * diff * diff;
            }
            scratch.push((u * wd + v, g));
        }
    }
    if scratch.is_empty() {
        return None;
    }
    let gmin = scratch.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    let mut rep = 0.0;
    let mut conf = 0.0;
    for &(i, g) in scratch.iter() {
        let e = libm::exp(-(g - gmin));
        total += e;
        rep += e * y[r * plane + i];
        conf += e * g;
    }
    Some((rep / total, conf / total))
}

/// Non-local outputs for a whole `[M, H, W]` block.
#[derive(Clone, Debug)]
pub struct NonlocalOutputs {
    pub rep: Tensor,
    pub conf: Tensor,
    pub valid: Vec<bool>,
}

pub fn nonlocal_outputs(y: &Tensor, w: &ProxyWeights, window: Option<usize>) -> Result<NonlocalOutputs> {
    if y.rank() != 3 || y.dim(0) != w.channels() {
        return dim_err(format!(
            "non-local expects [M, H, W] with M={}, got {:?}",
            w.channels(),
            y.shape()
        ));
    }
    let (m, h, wd) = (y.dim(0), y.dim(1), y.dim(2));
    let mut rep = Tensor::zeros(&[m, h, wd]);
    let mut conf = Tensor::zeros(&[m, h, wd]);
    let mut valid = vec![false; m * h * wd];
    let mut scratch = Vec::new();
    for r in 0..m {
        for p in 0..h {
            for q in 0..wd {
                if let Some((a, c)) = position_rep_conf(y.data(), (h, wd), r, (p, q), w, window, &mut scratch) {
                    let o = (r * h + p) * wd + q;
                    rep.data_mut()[o] = a;
                    conf.data_mut()[o] = c;
                    valid[o] = true;
                }
            }
        }
    }
    Ok(NonlocalOutputs { rep, conf, valid })
}

/// Non-local representation plane of channel `r` with its validity flags.
pub fn nonlocal_rep(y: &Tensor, r: usize, w: &ProxyWeights, window: Option<usize>) -> (Vec<f64>, Vec<bool>) {
    let (h, wd) = (y.dim(1), y.dim(2));
    let mut scratch = Vec::new();
    let mut rep = vec![0.0; h * wd];
    let mut valid = vec![false; h * wd];
    for p in 0..h {
        for q in 0..wd {
            if let Some((a, _)) = position_rep_conf(y.data(), (h, wd), r, (p, q), w, window, &mut scratch) {
                rep[p * wd + q] = a;
                valid[p * wd + q] = true;
            }
        }
    }
    (rep, valid)
}

/// Confidence plane of channel `r` (weighted mean proxy distance).
pub fn confidence(y: &Tensor, r: usize, w: &ProxyWeights, window: Option<usize>) -> Vec<f64> {
    let (h, wd) = (y.dim(1), y.dim(2));
    let mut scratch = Vec::new();
    let mut conf = vec![0.0; h * wd];
    for p in 0..h {
        for q in 0..wd {
            if let Some((_, c)) = position_rep_conf(y.data(), (h, wd), r, (p, q), w, window, &mut scratch) {
                conf[p * wd + q] = c;
            }
        }
    }
    conf
}

/// Batched forward/backward used by the graph operator.
pub(crate) mod kernel {
    use rayon::prelude::*;

    #[derive(Clone, Copy, Debug)]
    pub struct Geom {
        pub n: usize,
        pub m: usize,
        pub h: usize,
        pub w: usize,
        pub window: Option<usize>,
    }

    impl Geom {
        fn candidates(&self, p: usize, q: usize, out: &mut Vec<usize>) {
            out.clear();
            for u in 0..self.h {
                for v in 0..self.w {
                    if u + v >= p + q {
                        continue;
                    }
                    if let Some(k) = self.window {
                        if p.abs_diff(u) > k || q.abs_diff(v) > k {
                            continue;
                        }
                    }
                    out.push(u * self.w + v);
                }
            }
        }
    }

    /// `y: [N, M, H, W]`, `logw: [M, M]` → `[N, 2M, H, W]`.
    pub fn forward(geom: &Geom, y: &[f64], logw: &[f64]) -> Vec<f64> {
        let (m, plane) = (geom.m, geom.h * geom.w);
        let wts: Vec<f64> = logw.iter().map(|v| v.exp()).collect();
        let mut out = vec![0.0; geom.n * 2 * m * plane];
        out.par_chunks_mut(2 * m * plane).enumerate().for_each(|(n, o)| {
            let yn = &y[n * m * plane..(n + 1) * m * plane];
            let mut cands = Vec::new();
            let mut gd = Vec::new();
            for p in 0..geom.h {
                for q in 0..geom.w {
                    geom.candidates(p, q, &mut cands);
                    if cands.is_empty() {
                        continue;
                    }
                    let t = p * geom.w + q;
                    for r in 0..m {
                        gd.clear();
                        for &c in &cands {
                            let mut g = 0.0;
                            for j in 0..r {
                                let d = yn[j * plane + t] - yn[j * plane + c];
                                g += wts[r * m + j] * d * d;
                            }
                            gd.push(g);
                        }
                        let gmin = gd.iter().copied().fold(f64::INFINITY, f64::min);
                        let (mut tot, mut rep, mut conf) = (0.0, 0.0, 0.0);
                        for (&c, &g) in cands.iter().zip(&gd) {
                            let e = (-(g - gmin)).exp();
                            tot += e;
                            rep += e * yn[r * plane + c];
                            conf += e * g;
                        }
                        o[r * plane + t] = rep / tot;
                        o[(m + r) * plane + t] = conf / tot;
                    }
                }
            }
        });
        out
    }

    /// Returns `(dy, dlogw)`; `dy` only when requested.
    pub fn backward(geom: &Geom, y: &[f64], logw: &[f64], dout: &[f64], need_y: bool) -> (Option<Vec<f64>>, Vec<f64>) {
        let (m, plane) = (geom.m, geom.h * geom.w);
        let wts: Vec<f64> = logw.iter().map(|v| v.exp()).collect();
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..geom.n)
            .into_par_iter()
            .map(|n| {
                let yn = &y[n * m * plane..(n + 1) * m * plane];
                let dn = &dout[n * 2 * m * plane..(n + 1) * 2 * m * plane];
                let mut dy = if need_y { vec![0.0; m * plane] } else { Vec::new() };
                let mut dw = vec![0.0; m * m];
                let mut cands = Vec::new();
                let (mut gd, mut ws) = (Vec::new(), Vec::new());
                for p in 0..geom.h {
                    for q in 0..geom.w {
                        geom.candidates(p, q, &mut cands);
                        if cands.is_empty() {
                            continue;
                        }
                        let t = p * geom.w + q;
                        for r in 0..m {
                            let a = dn[r * plane + t];
                            let b = dn[(m + r) * plane + t];
                            if a == 0.0 && b == 0.0 {
                                continue;
                            }
                            gd.clear();
                            for &c in &cands {
                                let mut g = 0.0;
                                for j in 0..r {
                                    let d = yn[j * plane + t] - yn[j * plane + c];
                                    g += wts[r * m + j] * d * d;
                                }
                                gd.push(g);
                            }
                            let gmin = gd.iter().copied().fold(f64::INFINITY, f64::min);
                            ws.clear();
                            ws.extend(gd.iter().map(|g| (-(g - gmin)).exp()));
                            let tot: f64 = ws.iter().sum();
                            ws.iter_mut().for_each(|v| *v /= tot);
                            // c_k = a·y_r(k) + b·g_k ; dL/dg_k = w_k (c̄ − c_k + b)
                            let cbar: f64 = cands
                                .iter()
                                .zip(&gd)
                                .zip(&ws)
                                .map(|((&c, &g), &wk)| wk * (a * yn[r * plane + c] + b * g))
                                .sum();
                            for ((&c, &g), &wk) in cands.iter().zip(&gd).zip(&ws) {
                                let ck = a * yn[r * plane + c] + b * g;
                                let dg = wk * (cbar - ck + b);
                                if need_y {
                                    dy[r * plane + c] += a * wk;
                                }
                                for j in 0..r {
                                    let d = yn[j * plane + t] - yn[j * plane + c];
                                    dw[r * m + j] += dg * d * d;
                                    if need_y {
                                        let s = dg * 2.0 * wts[r * m + j] * d;
                                        dy[j * plane + t] += s;
                                        dy[j * plane + c] -= s;
                                    }
                                }
                            }
                        }
                    }
                }
                (dy, dw)
            })
            .collect();
        let mut dy_all = need_y.then(|| Vec::with_capacity(geom.n * m * plane));
        let mut dlogw = vec![0.0; m * m];
        for (dy, dw) in parts {
            if let Some(acc) = dy_all.as_mut() {
                acc.extend_from_slice(&dy);
            }
            for (acc, v) in dlogw.iter_mut().zip(&dw) {
                *acc += v;
            }
        }
        for (d, w) in dlogw.iter_mut().zip(&wts) {
            *d *= w;
        }
        (dy_all, dlogw)
    }
}

/// Local masked features fused with gated non-local representations.
///
/// Output feature blocks: `n_feat` local blocks followed by one block of
/// `α ⊙ rep`, where `α = sigmoid(MConv_hidden([local, conf]))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub local: MaskedConv,
    pub local_act: PRelu,
    pub gate: MaskedConv,
    pub logw: ParamId,
    pub window: Option<usize>,
    pub enabled: bool,
    m: usize,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        m: usize,
        n_feat: usize,
        radius: usize,
        window: Option<usize>,
        enabled: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let local = MaskedConv::new(ps, &format!("{name}.local"), MaskKind::Input, m, 1, n_feat, radius, rng);
        let local_act = PRelu::new(ps, &format!("{name}.local_act"), n_feat * m);
        let gate = MaskedConv::new(ps, &format!("{name}.gate"), MaskKind::Hidden, m, n_feat + 1, 1, radius, rng);
        let logw = ps.insert(format!("{name}.logw"), ProxyWeights::init(m).log_tensor());
        Self {
            local,
            local_act,
            gate,
            logw,
            window,
            enabled,
            m,
        }
    }

    pub fn out_blocks(&self) -> usize {
        self.local.n_out + 1
    }

    /// `y: [N, M, H, W]` center values → `[N, (n_feat+1)·M, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let pre = self.local.forward(g, p, y)?;
        let local = self.local_act.forward(g, p, pre)?;
        if !self.enabled {
            let s = g.shape(y).to_vec();
            let zeros = g.constant(Tensor::zeros(&s));
            return g.concat(&[local, zeros], 1);
        }
        let nl = g.nonlocal(y, p.var(self.logw), self.window)?;
        let rep = g.slice(nl, 1, 0, self.m)?;
        let conf = g.slice(nl, 1, self.m, self.m)?;
        self.fuse(g, p, local, rep, conf)
    }

    /// `concat(local, sigmoid(gate([local, conf])) ⊙ rep)`.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, local: Var, rep: Var, conf: Var) -> Result<Var> {
        let att_in = g.concat(&[local, conf], 1)?;
        let logits = self.gate.forward(g, p, att_in)?;
        let alpha = g.sigmoid(logits);
        let gated = g.mul(alpha, rep)?;
        g.concat(&[local, gated], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(m: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[m, h, w], |i| f(i / (h * w), (i / w) % h, i % w))
    }

    #[test]
    fn proxy_distance_cases() {
        let y = block(3, 2, 2, |r, p, q| (r * 4 + p * 2 + q) as f64);
        let w = ProxyWeights::init(3);
        assert_eq!(proxy_distance(&y, 2, (1, 1), (1, 1), &w), 0.0);
        assert_eq!(proxy_distance(&y, 0, (1, 1), (0, 0), &w), 0.0);
        // r = 2, weights (0.5, 0.5), ξ(p,q) = (1, 2), ξ(u,v) = (3, 0)
        let mut y = Tensor::zeros(&[3, 1, 2]);
        y.data_mut().copy_from_slice(&[1.0, 3.0, 2.0, 0.0, 0.0, 0.0]);
        let w = ProxyWeights::from_rows(3, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(proxy_distance(&y, 2, (0, 0), (0, 1), &w), 4.0);
    }

    #[test]
    fn spatial_mask_plane() {
        for u in 0..3 {
            for v in 0..3 {
                assert!(!spatial_mask(0, 0, u, v));
            }
        }
        assert!(!spatial_mask(1, 1, 1, 1));
        assert!(spatial_mask(1, 1, 0, 1));
        let ones: usize = (0..3)
            .flat_map(|u| (0..3).map(move |v| spatial_mask(1, 1, u, v) as usize))
            .sum();
        assert_eq!(ones, 3);
    }

    #[test]
    fn weights_softmin() {
        // two candidates (0,0), (0,1) for target (1,0)... use target (0,2)
        // with candidates (0,0), (0,1); proxy distances 1 and 2.
        let mut y = Tensor::zeros(&[2, 1, 3]);
        y.data_mut()[..3].copy_from_slice(&[1.0, f64::sqrt(2.0) * 0.0 + 0.0, 0.0]);
        // ξ(0,2) = 0; ξ(0,0) = 1 → g = 1; ξ(0,1) = √2 → g = 2
        y.data_mut()[1] = 2f64.sqrt();
        let w = ProxyWeights::from_rows(2, vec![1.0; 4]).unwrap();
        let plane = nonlocal_weights(&y, 1, (0, 2), &w, None);
        let (a, b) = ((-1f64).exp(), (-2f64).exp());
        assert!((plane[0] - a / (a + b)).abs() < 1e-12);
        assert!((plane[1] - b / (a + b)).abs() < 1e-12);
        assert_eq!(plane[2], 0.0);
        assert!((plane[0] - 0.7311).abs() < 1e-4);
        // equal distances → equal weights
        let y = block(2, 1, 3, |_, _, _| 0.5);
        let plane = nonlocal_weights(&y, 1, (0, 2), &w, None);
        assert!((plane[0] - 0.5).abs() < 1e-15 && (plane[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_plane_and_empty_context() {
        let y = block(3, 4, 4, |r, p, q| if r == 2 { 0.25 } else { ((p * 3 + q) % 5) as f64 * 0.1 });
        let w = ProxyWeights::init(3);
        let (rep, valid) = nonlocal_rep(&y, 2, &w, None);
        assert!(!valid[0]);
        assert_eq!(rep[0], 0.0);
        for i in 1..16 {
            assert!(valid[i]);
            assert!((rep[i] - 0.25).abs() < 1e-15);
        }
        let conf = confidence(&y, 2, &w, None);
        assert_eq!(conf[0], 0.0);
    }

    #[test]
    fn confidence_zero_for_identical_proxies() {
        let y = block(3, 3, 3, |r, p, q| if r < 2 { 0.3 + r as f64 } else { (p + q) as f64 });
        let w = ProxyWeights::init(3);
        assert!(confidence(&y, 2, &w, None).iter().all(|&c| c == 0.0));
    }

    #[test]
    fn single_candidate_confidence() {
        // target (0,1): only candidate (0,0); g = w·(2)^2 = 4 with w = 1
        let mut y = Tensor::zeros(&[2, 1, 2]);
        y.data_mut().copy_from_slice(&[0.0, 2.0, 0.7, 0.1]);
        let w = ProxyWeights::from_rows(2, vec![1.0; 4]).unwrap();
        let conf = confidence(&y, 1, &w, None);
        assert!((conf[1] - 4.0).abs() < 1e-15);
        let (rep, _) = nonlocal_rep(&y, 1, &w, None);
        assert!((rep[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn kernel_matches_reference() {
        let (m, h, w) = (3, 4, 5);
        let y = block(m, h, w, |r, p, q| ((r * 31 + p * 7 + q * 3) % 11) as f64 / 11.0);
        let pw = ProxyWeights::from_rows(m, (0..m * m).map(|i| 0.5 + (i % 4) as f64).collect()).unwrap();
        let geom = kernel::Geom { n: 1, m, h, w, window: None };
        let out = kernel::forward(&geom, y.data(), pw.log_tensor().data());
        let refs = nonlocal_outputs(&y, &pw, None).unwrap();
        for i in 0..m * h * w {
            assert!((out[i] - refs.rep.data()[i]).abs() < 1e-12);
            assert!((out[m * h * w + i] - refs.conf.data()[i]).abs() < 1e-12);
        }
    }
}
