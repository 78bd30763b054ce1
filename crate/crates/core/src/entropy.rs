//! Entropy models over code blocks.
//!
//! Both heads share one backbone: the attention block (local masked
//! features fused with the non-local representation), a hidden masked
//! stem and a few residual masked blocks. The MoG head turns the features
//! into a per-code mixture of Gaussians whose mass over each quantization
//! interval is the symbol probability; it drives the rate term during
//! joint training. The post head emits an `L`-way softmax per code
//! directly and is the one used for actual coding.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::ccn::{ConditionalModel, MaskKind, MaskedConv};
use crate::error::{dim_err, Error, Result};
use crate::nn::PRelu;
use crate::nonlocal::AttentionBlock;
use crate::params::{Bound, ParamId, ParamSet};
use crate::quantizer::{dequantize_with, CodeBlock};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-9;
pub const LOG_SCALE_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
pub const LOG_SCALE_MAX: f64 = 6.907_755_278_982_137;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Mog,
    Post,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyConfig {
    pub m: usize,
    pub levels: usize,
    pub components: usize,
    pub n_feat: usize,
    pub radius: usize,
    pub res_blocks: usize,
    pub window: Option<usize>,
    pub nonlocal: bool,
}

impl EntropyConfig {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            levels: 8,
            components: 3,
            n_feat: 3,
            radius: 2,
            res_blocks: 3,
            window: None,
            nonlocal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n_feat == 0 || self.components == 0 {
            return Err(Error::Config("entropy model needs M, N_t and C ≥ 1".into()));
        }
        if !(2..=256).contains(&self.levels) {
            return Err(Error::Config(format!("L = {} outside 2..=256", self.levels)));
        }
        Ok(())
    }

    pub(crate) fn to_meta(&self, kind: HeadKind) -> Tensor {
        let v = [
            self.m,
            self.levels,
            self.components,
            self.n_feat,
            self.radius,
            self.res_blocks,
            self.window.map_or(0, |w| w + 1),
            self.nonlocal as usize,
            (kind == HeadKind::Post) as usize,
        ];
        Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("1-D")
    }

    pub(crate) fn from_meta(t: &Tensor) -> Result<(Self, HeadKind)> {
        let d = t.data();
        if d.len() != 9 || d.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Format("malformed entropy model metadata".into()));
        }
        let u = |i: usize| d[i] as usize;
        let cfg = Self {
            m: u(0),
            levels: u(1),
            components: u(2),
            n_feat: u(3),
            radius: u(4),
            res_blocks: u(5),
            window: (u(6) > 0).then(|| u(6) - 1),
            nonlocal: u(7) != 0,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok((cfg, if u(8) == 1 { HeadKind::Post } else { HeadKind::Mog }))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: MaskedConv,
    a1: PRelu,
    c2: MaskedConv,
    a2: PRelu,
}

#[derive(Clone, Debug)]
enum Heads {
    Mog { pi: MaskedConv, mu: MaskedConv, scale: MaskedConv },
    Post { logits: MaskedConv },
}

/// Discretized MoG parameters for a batch, each `[N, C, M, H, W]`.
#[derive(Clone, Debug)]
pub struct MoGField {
    pub pi: Tensor,
    pub mu: Tensor,
    pub scale: Tensor,
}

impl MoGField {
    pub fn components(&self) -> usize {
        self.pi.dim(1)
    }

    /// Mixture parameters of one code as `(π, μ, s)` vectors.
    pub fn at(&self, n: usize, offset: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.pi.shape();
        let (c, plane) = (s[1], s[2] * s[3] * s[4]);
        let pick = |t: &Tensor| (0..c).map(|k| t.data()[(n * c + k) * plane + offset]).collect();
        (pick(&self.pi), pick(&self.mu), pick(&self.scale))
    }
}

#[derive(Clone, Debug)]
pub struct EntropyModel {
    pub cfg: EntropyConfig,
    pub kind: HeadKind,
    pub params: ParamSet,
    attn: AttentionBlock,
    stem: MaskedConv,
    stem_act: PRelu,
    res: Vec<ResBlock>,
    heads: Heads,
    centers: Vec<Vec<f64>>,
}

impl EntropyModel {
    /// Randomly initialized model; `centers` are the quantizer's centers,
    /// used to turn indices into input values.
    pub fn new(cfg: EntropyConfig, kind: HeadKind, centers: Vec<Vec<f64>>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        check_centers(&cfg, &centers)?;
        let mut ps = ParamSet::new();
        let (m, nf, rad) = (cfg.m, cfg.n_feat, cfg.radius);
        let attn = AttentionBlock::new(&mut ps, "attn", m, nf, rad, cfg.window, cfg.nonlocal, rng);
        let stem = MaskedConv::new(&mut ps, "stem", MaskKind::Hidden, m, attn.out_blocks(), nf, rad, rng);
        let stem_act = PRelu::new(&mut ps, "stem_act", nf * m);
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock {
                c1: MaskedConv::new(&mut ps, &format!("res{i}.c1"), MaskKind::Hidden, m, nf, nf, rad, rng),
                a1: PRelu::new(&mut ps, &format!("res{i}.a1"), nf * m),
                c2: MaskedConv::new(&mut ps, &format!("res{i}.c2"), MaskKind::Hidden, m, nf, nf, rad, rng),
                a2: PRelu::new(&mut ps, &format!("res{i}.a2"), nf * m),
            })
            .collect();
        let heads = match kind {
            HeadKind::Mog => {
                let c = cfg.components;
                let pi = MaskedConv::new(&mut ps, "head.pi", MaskKind::Hidden, m, nf, c, rad, rng);
                let mu = MaskedConv::new(&mut ps, "head.mu", MaskKind::Hidden, m, nf, c, rad, rng);
                let scale = MaskedConv::new(&mut ps, "head.scale", MaskKind::Hidden, m, nf, c, rad, rng);
                // spread the initial means over the unit interval
                let b = ps.get_mut(mu.b).data_mut();
                for (k, v) in b.iter_mut().enumerate() {
                    *v = (k as f64 + 0.5) / c as f64;
                }
                ps.get_mut(scale.b).data_mut().fill((0.1f64).ln());
                Heads::Mog { pi, mu, scale }
            }
            HeadKind::Post => Heads::Post {
                logits: MaskedConv::new(&mut ps, "head.logits", MaskKind::Hidden, m, nf, cfg.levels, rad, rng),
            },
        };
        Ok(Self {
            cfg,
            kind,
            params: ps,
            attn,
            stem,
            stem_act,
            res,
            heads,
            centers,
        })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn set_centers(&mut self, centers: Vec<Vec<f64>>) -> Result<()> {
        check_centers(&self.cfg, &centers)?;
        self.centers = centers;
        Ok(())
    }

    pub fn attention(&self) -> &AttentionBlock {
        &self.attn
    }

    /// All masked layers in evaluation order.
    pub fn masked_layers(&self) -> Vec<&MaskedConv> {
        let mut out = vec![&self.attn.local, &self.attn.gate, &self.stem];
        for r in &self.res {
            out.push(&r.c1);
            out.push(&r.c2);
        }
        match &self.heads {
            Heads::Mog { pi, mu, scale } => out.extend([pi, mu, scale]),
            Heads::Post { logits } => out.push(logits),
        }
        out
    }

    #[doc(hidden)]
    pub fn masked_layers_mut(&mut self) -> Vec<&mut MaskedConv> {
        let mut out = vec![&mut self.attn.local, &mut self.attn.gate, &mut self.stem];
        for r in &mut self.res {
            out.push(&mut r.c1);
            out.push(&mut r.c2);
        }
        match &mut self.heads {
            Heads::Mog { pi, mu, scale } => out.extend([pi, mu, scale]),
            Heads::Post { logits } => out.push(logits),
        }
        out
    }

    /// Test hook: removes every context mask and fills the weights it hid
    /// with random values, producing a deliberately non-causal model.
    #[doc(hidden)]
    pub fn sabotage_masks(&mut self, rng: &mut impl Rng) {
        let ids: Vec<ParamId> = self.masked_layers().iter().map(|l| l.w).collect();
        for l in self.masked_layers_mut() {
            l.force_unmasked();
        }
        for id in ids {
            for v in self.params.get_mut(id).data_mut() {
                if *v == 0.0 {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
    }

    pub(crate) fn parts(&self) -> ModelParts<'_> {
        ModelParts {
            attn: &self.attn,
            stem: &self.stem,
            stem_act: &self.stem_act,
            res: self.res.iter().map(|r| [(&r.c1, &r.a1), (&r.c2, &r.a2)]).collect(),
            heads: match &self.heads {
                Heads::Mog { pi, mu, scale } => vec![pi, mu, scale],
                Heads::Post { logits } => vec![logits],
            },
        }
    }

    /// Backbone features `[N, N_t·M, H, W]` from center values `[N, M, H, W]`.
    pub fn features(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let s = g.shape(y);
        if s.len() != 4 || s[1] != self.cfg.m {
            return dim_err(format!("entropy model expects [N, {}, H, W], got {s:?}", self.cfg.m));
        }
        let fused = self.attn.forward(g, p, y)?;
        let pre = self.stem.forward(g, p, fused)?;
        let mut h = self.stem_act.forward(g, p, pre)?;
        for r in &self.res {
            let t = r.c1.forward(g, p, h)?;
            let t = r.a1.forward(g, p, t)?;
            let t = r.c2.forward(g, p, t)?;
            let t = r.a2.forward(g, p, t)?;
            h = g.add(h, t)?;
        }
        Ok(h)
    }

    /// `(π, μ, s)` nodes, each `[N, C, M, H, W]`.
    pub fn mog_heads(&self, g: &mut Graph, p: &Bound, feat: Var) -> Result<(Var, Var, Var)> {
        let Heads::Mog { pi, mu, scale } = &self.heads else {
            return Err(Error::Usage("MoG heads requested from a post model".into()));
        };
        let s = g.shape(feat).to_vec();
        let shape = [s[0], self.cfg.components, self.cfg.m, s[2], s[3]];
        let logits = pi.forward(g, p, feat)?;
        let logits = g.reshape(logits, &shape)?;
        let pi = g.softmax(logits, 1)?;
        let mu = mu.forward(g, p, feat)?;
        let mu = g.reshape(mu, &shape)?;
        let ls = scale.forward(g, p, feat)?;
        let ls = g.clamp(ls, LOG_SCALE_MIN, LOG_SCALE_MAX);
        let sc = g.exp(ls);
        let sc = g.reshape(sc, &shape)?;
        Ok((pi, mu, sc))
    }

    /// Post-head log-probabilities `[N, L, M, H, W]`.
    pub fn post_log_probs(&self, g: &mut Graph, p: &Bound, feat: Var) -> Result<Var> {
        let Heads::Post { logits } = &self.heads else {
            return Err(Error::Usage("post head requested from a MoG model".into()));
        };
        let s = g.shape(feat).to_vec();
        let out = logits.forward(g, p, feat)?;
        let out = g.reshape(out, &[s[0], self.cfg.levels, self.cfg.m, s[2], s[3]])?;
        g.log_softmax(out, 1)
    }

    /// Total code length in bits of `blocks` under the MoG head.
    ///
    /// `y` holds the center values fed to the backbone (possibly a
    /// straight-through node); interval bounds come from `centers`.
    pub fn rate_bits(&self, g: &mut Graph, p: &Bound, y: Var, blocks: &[CodeBlock], centers: &[Vec<f64>]) -> Result<Var> {
        let feat = self.features(g, p, y)?;
        let (pi, mu, sc) = self.mog_heads(g, p, feat)?;
        let (lo, hi) = interval_bounds(blocks, centers)?;
        let prob = g.mog_prob(pi, mu, sc, lo, hi)?;
        Ok(g.bits(prob, PROB_FLOOR))
    }

    /// Mean code length in bits per code under the post head.
    pub fn post_bits(&self, g: &mut Graph, p: &Bound, blocks: &[CodeBlock]) -> Result<Var> {
        let y = g.constant(dequantize_with(&self.centers, blocks)?);
        let feat = self.features(g, p, y)?;
        let lp = self.post_log_probs(g, p, feat)?;
        let l = self.cfg.levels;
        let (m, h, w) = blocks[0].dims();
        let plane = m * h * w;
        let mut idx = Vec::with_capacity(blocks.len() * plane);
        for (n, b) in blocks.iter().enumerate() {
            for (i, &k) in b.indices().iter().enumerate() {
                idx.push((n * l + k as usize) * plane + i);
            }
        }
        let count = idx.len() as f64;
        let picked = g.gather(lp, idx)?;
        let s = g.sum(picked);
        Ok(g.scale(s, -1.0 / (std::f64::consts::LN_2 * count)))
    }

    /// Evaluates the MoG field for a batch without tracking gradients.
    pub fn mog_field(&self, blocks: &[CodeBlock]) -> Result<MoGField> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let y = g.constant(dequantize_with(&self.centers, blocks)?);
        let feat = self.features(&mut g, &p, y)?;
        let (pi, mu, sc) = self.mog_heads(&mut g, &p, feat)?;
        Ok(MoGField {
            pi: g.value(pi).clone(),
            mu: g.value(mu).clone(),
            scale: g.value(sc).clone(),
        })
    }

    /// Post-head probabilities for one block, row per code, unfloored.
    pub fn post_rows(&self, y: &CodeBlock) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yv = g.constant(dequantize_with(&self.centers, std::slice::from_ref(y))?);
        let feat = self.features(&mut g, &p, yv)?;
        let lp = self.post_log_probs(&mut g, &p, feat)?;
        let d = g.value(lp).data();
        let (l, n) = (self.cfg.levels, y.len());
        Ok((0..n).map(|i| (0..l).map(|k| d[k * n + i].exp()).collect()).collect())
    }
}

fn check_centers(cfg: &EntropyConfig, centers: &[Vec<f64>]) -> Result<()> {
    if centers.len() != cfg.m || centers.iter().any(|c| c.len() != cfg.levels) {
        return dim_err(format!(
            "entropy model needs {}x{} centers, got {} rows",
            cfg.m,
            cfg.levels,
            centers.len()
        ));
    }
    Ok(())
}

pub(crate) struct ModelParts<'a> {
    pub attn: &'a AttentionBlock,
    pub stem: &'a MaskedConv,
    pub stem_act: &'a PRelu,
    pub res: Vec<[(&'a MaskedConv, &'a PRelu); 2]>,
    pub heads: Vec<&'a MaskedConv>,
}

impl ConditionalModel for EntropyModel {
    fn levels(&self) -> usize {
        self.cfg.levels
    }

    fn tables(&self, y: &CodeBlock) -> Result<Vec<Vec<f64>>> {
        match self.kind {
            HeadKind::Post => self.post_rows(y),
            HeadKind::Mog => {
                let field = self.mog_field(std::slice::from_ref(y))?;
                let (m, h, w) = y.dims();
                let mut rows = Vec::with_capacity(y.len());
                for r in 0..m {
                    for i in 0..h * w {
                        let (pi, mu, s) = field.at(0, r * h * w + i);
                        rows.push(mog_table(&pi, &mu, &s, &self.centers[r]));
                    }
                }
                Ok(rows)
            }
        }
    }
}

/// Interval `[a, b]` of center `l`: midpoints to the neighbours, open at the ends.
pub fn interval(centers: &[f64], l: usize) -> (f64, f64) {
    let a = if l == 0 {
        f64::NEG_INFINITY
    } else {
        0.5 * (centers[l - 1] + centers[l])
    };
    let b = if l + 1 == centers.len() {
        f64::INFINITY
    } else {
        0.5 * (centers[l] + centers[l + 1])
    };
    (a, b)
}

fn interval_bounds(blocks: &[CodeBlock], centers: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for b in blocks {
        let (m, h, w) = b.dims();
        if centers.len() != m {
            return dim_err(format!("{} center rows for M={m}", centers.len()));
        }
        for r in 0..m {
            for i in 0..h * w {
                let l = b.indices()[r * h * w + i] as usize;
                if l >= centers[r].len() {
                    return Err(Error::Usage(format!("code index {l} out of range")));
                }
                let (a, c) = interval(&centers[r], l);
                lo.push(a);
                hi.push(c);
            }
        }
    }
    Ok((lo, hi))
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

#[inline]
fn norm_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x).exp() * 0.398_942_280_401_432_7
    }
}

/// `Φ(zb) − Φ(za)` evaluated on the tail that avoids cancellation.
#[inline]
fn gauss_mass(za: f64, zb: f64) -> f64 {
    if za > 0.0 {
        norm_cdf(-za) - norm_cdf(-zb)
    } else {
        norm_cdf(zb) - norm_cdf(za)
    }
}

/// Mixture mass of one code on `[a, b]`.
pub fn mog_mass(pi: &[f64], mu: &[f64], s: &[f64], a: f64, b: f64) -> f64 {
    pi.iter()
        .zip(mu)
        .zip(s)
        .map(|((&w, &m), &sc)| w * gauss_mass((a - m) / sc, (b - m) / sc))
        .sum()
}

/// Probability of center index `l` under one code's mixture.
pub fn discrete_prob(l: usize, pi: &[f64], mu: &[f64], s: &[f64], centers: &[f64]) -> f64 {
    let (a, b) = interval(centers, l);
    mog_mass(pi, mu, s, a, b)
}

/// Full `L`-way table of one code's mixture.
pub fn mog_table(pi: &[f64], mu: &[f64], s: &[f64], centers: &[f64]) -> Vec<f64> {
    (0..centers.len()).map(|l| discrete_prob(l, pi, mu, s, centers)).collect()
}

/// Code length of `y` in bits given one probability row per code.
pub fn rate_loss(rows: &[Vec<f64>], y: &CodeBlock) -> f64 {
    y.indices()
        .iter()
        .zip(rows)
        .map(|(&k, row)| -row[k as usize].max(PROB_FLOOR).log2())
        .sum()
}

/// Mean cross-entropy in bits per code of `tables` against `y`.
pub fn post_loss(tables: &ProbTable, y: &CodeBlock) -> Result<f64> {
    if tables.len() != y.len() {
        return dim_err(format!("{} table rows for {} codes", tables.len(), y.len()));
    }
    let total: f64 = y
        .indices()
        .iter()
        .enumerate()
        .map(|(i, &k)| -tables.row(i)[k as usize].log2())
        .sum();
    Ok(total / y.len() as f64)
}

/// Floored discrete probability rows, one per code.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    levels: usize,
    p: Vec<f64>,
}

impl ProbTable {
    /// Mixes each row with the uniform floor so every entry is at least
    /// [`PROB_FLOOR`] while the row still sums to one.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let levels = rows.first().map_or(0, Vec::len);
        let mut p = Vec::with_capacity(rows.len() * levels);
        for row in rows {
            if row.len() != levels {
                return dim_err("probability rows differ in length".to_string());
            }
            p.extend(floor_row(row));
        }
        Ok(Self { levels, p })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.p.len().checked_div(self.levels).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.levels..(i + 1) * self.levels]
    }
}

/// Renormalizes a row and mixes it with the floor.
pub fn floor_row(row: &[f64]) -> Vec<f64> {
    let l = row.len() as f64;
    let total: f64 = row.iter().map(|v| v.max(0.0)).sum();
    let keep = 1.0 - l * PROB_FLOOR;
    row.iter()
        .map(|v| {
            let q = if total > 0.0 { v.max(0.0) / total } else { 1.0 / l };
            q * keep + PROB_FLOOR
        })
        .collect()
}

/// Post model output on a batch: `[N, L, M, H, W]` softmax probabilities.
pub fn post_heads(model: &EntropyModel, blocks: &[CodeBlock]) -> Result<Vec<ProbTable>> {
    blocks.iter().map(|b| ProbTable::from_rows(&model.post_rows(b)?)).collect()
}

/// Elementwise kernels behind [`Graph::mog_prob`].
pub(crate) mod mog_kernel {
    use super::{gauss_mass, norm_pdf};

    #[allow(clippy::too_many_arguments)]
    pub fn forward(n: usize, c: usize, plane: usize, pi: &[f64], mu: &[f64], s: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            for i in 0..plane {
                let (a, z) = (lo[b * plane + i], hi[b * plane + i]);
                let mut acc = 0.0;
                for k in 0..c {
                    let j = (b * c + k) * plane + i;
                    acc += pi[j] * gauss_mass((a - mu[j]) / s[j], (z - mu[j]) / s[j]);
                }
                out[b * plane + i] = acc;
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        n: usize,
        c: usize,
        plane: usize,
        pi: &[f64],
        mu: &[f64],
        s: &[f64],
        lo: &[f64],
        hi: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let len = n * c * plane;
        let (mut dpi, mut dmu, mut ds) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for b in 0..n {
            for i in 0..plane {
                let up = g[b * plane + i];
                let (a, z) = (lo[b * plane + i], hi[b * plane + i]);
                for k in 0..c {
                    let j = (b * c + k) * plane + i;
                    let (za, zb) = ((a - mu[j]) / s[j], (z - mu[j]) / s[j]);
                    let (pa, pb) = (norm_pdf(za), norm_pdf(zb));
                    let ta = if za.is_infinite() { 0.0 } else { pa * za };
                    let tb = if zb.is_infinite() { 0.0 } else { pb * zb };
                    dpi[j] = up * gauss_mass(za, zb);
                    dmu[j] = up * pi[j] * (pa - pb) / s[j];
                    ds[j] = up * pi[j] * (ta - tb) / s[j];
                }
            }
        }
        (dpi, dmu, ds)
    }
}
