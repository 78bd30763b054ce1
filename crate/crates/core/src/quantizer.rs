//! Trainable per-channel quantizer.
//!
//! Centers are parametrized by log increments, `ω_i = Σ_{j≤i} exp(σ_j)`,
//! so they are strictly increasing for any finite `σ`.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Discrete center indices for one `M×H×W` block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeBlock {
    m: usize,
    h: usize,
    w: usize,
    indices: Vec<u8>,
}

impl CodeBlock {
    pub fn new(m: usize, h: usize, w: usize, indices: Vec<u8>) -> Result<Self> {
        if m == 0 || h == 0 || w == 0 {
            return dim_err(format!("code block dims must be positive, got {m}x{h}x{w}"));
        }
        if indices.len() != m * h * w {
            return dim_err(format!(
                "code block {m}x{h}x{w} needs {} indices, got {}",
                m * h * w,
                indices.len()
            ));
        }
        Ok(Self { m, h, w, indices })
    }

    pub fn zeros(m: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(m, h, w, vec![0; m * h * w])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn offset(&self, r: usize, p: usize, q: usize) -> usize {
        (r * self.h + p) * self.w + q
    }

    #[inline]
    pub fn get(&self, r: usize, p: usize, q: usize) -> u8 {
        self.indices[self.offset(r, p, q)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, p: usize, q: usize, v: u8) {
        let o = self.offset(r, p, q);
        self.indices[o] = v;
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn max_index(&self) -> u8 {
        self.indices.iter().copied().max().unwrap_or(0)
    }

    /// Spatial crop `[top, top+h) × [left, left+w)` over all channels.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.h || left + w > self.w || h == 0 || w == 0 {
            return dim_err(format!(
                "crop {h}x{w} at ({top},{left}) exceeds block {}x{}",
                self.h, self.w
            ));
        }
        let mut out = Vec::with_capacity(self.m * h * w);
        for r in 0..self.m {
            for p in top..top + h {
                for q in left..left + w {
                    out.push(self.get(r, p, q));
                }
            }
        }
        Self::new(self.m, h, w, out)
    }
}

/// Partial sums of `exp(sigma)` (portable `exp`, so decoders on any
/// platform see the same center values).
pub fn centers(sigma: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    sigma
        .iter()
        .map(|s| {
            acc += libm::exp(*s);
            acc
        })
        .collect()
}

/// Index of the nearest center; exact ties resolve to the lower index.
pub fn nearest(z: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = (z - c) * (z - c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Quantizer {
    pub params: ParamSet,
    sigma: ParamId,
    channels: usize,
    levels: usize,
}

impl Quantizer {
    /// Uniform initialization with centers `i/(L+1)`, `i = 1..=L`.
    pub fn new(channels: usize, levels: usize) -> Self {
        let init = -((levels + 1) as f64).ln();
        let mut params = ParamSet::new();
        let sigma = params.insert("sigma", Tensor::full(&[channels, levels], init));
        Self {
            params,
            sigma,
            channels,
            levels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn sigma(&self) -> &Tensor {
        self.params.get(self.sigma)
    }

    pub fn sigma_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.sigma)
    }

    pub fn sigma_id(&self) -> ParamId {
        self.sigma
    }

    /// Centers of channel `r`.
    pub fn channel_centers(&self, r: usize) -> Vec<f64> {
        let l = self.levels;
        centers(&self.sigma().data()[r * l..(r + 1) * l])
    }

    /// All centers, row-major `[M][L]`.
    pub fn all_centers(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|r| self.channel_centers(r)).collect()
    }

    /// Quantizes `z: [N, M, H, W]` into one code block per batch item and
    /// the tensor of chosen center values.
    pub fn quantize(&self, z: &Tensor) -> Result<(Vec<CodeBlock>, Tensor)> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.channels {
            return dim_err(format!(
                "quantize expects [N, {}, H, W], got {s:?}",
                self.channels
            ));
        }
        let cs = self.all_centers();
        let plane = s[2] * s[3];
        let mut values = vec![0.0; z.numel()];
        let mut blocks = Vec::with_capacity(s[0]);
        for n in 0..s[0] {
            let mut idx = Vec::with_capacity(s[1] * plane);
            for r in 0..s[1] {
                let base = (n * s[1] + r) * plane;
                for i in 0..plane {
                    let k = nearest(z.data()[base + i], &cs[r]);
                    values[base + i] = cs[r][k];
                    idx.push(k as u8);
                }
            }
            blocks.push(CodeBlock::new(s[1], s[2], s[3], idx)?);
        }
        Ok((blocks, Tensor::new(s.to_vec(), values)?))
    }

    /// Center values of a batch of code blocks as `[N, M, H, W]`.
    pub fn dequantize(&self, blocks: &[CodeBlock]) -> Result<Tensor> {
        dequantize_with(&self.all_centers(), blocks)
    }

    /// Training-mode forward: returns `(straight-through values, L_q)`.
    ///
    /// The first output carries the quantized values forward and the
    /// identity gradient back into `z`; the quantizer loss is the mean
    /// squared quantization error and only reaches `σ`.
    pub fn train_forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<(Var, Var, Vec<CodeBlock>)> {
        let (blocks, values) = self.quantize(g.value(z))?;
        let st = g.straight_through(z, values)?;
        let lq = self.quant_loss(g, p, &blocks, z)?;
        Ok((st, lq, blocks))
    }

    /// Mean over codes of `(ω(y) − z)²` with `z` held constant.
    pub fn quant_loss(&self, g: &mut Graph, p: &Bound, blocks: &[CodeBlock], z: Var) -> Result<Var> {
        let zc = g.constant(g.value(z).clone());
        let c = g.centers(p.var(self.sigma))?;
        let (m, h, w) = blocks[0].dims();
        let plane = h * w;
        let mut idx = Vec::with_capacity(blocks.len() * m * plane);
        for b in blocks {
            for r in 0..m {
                for i in 0..plane {
                    idx.push(r * self.levels + b.indices()[r * plane + i] as usize);
                }
            }
        }
        let vals = g.gather(c, idx)?;
        let shape = g.shape(zc).to_vec();
        let vals = g.reshape(vals, &shape)?;
        quant_loss(g, vals, zc)
    }
}

pub fn dequantize_with(centers: &[Vec<f64>], blocks: &[CodeBlock]) -> Result<Tensor> {
    let Some(first) = blocks.first() else {
        return Err(Error::Usage("dequantize of an empty batch".into()));
    };
    let (m, h, w) = first.dims();
    if centers.len() != m {
        return dim_err(format!("{} center rows for {m} channels", centers.len()));
    }
    let mut data = Vec::with_capacity(blocks.len() * m * h * w);
    for b in blocks {
        if b.dims() != (m, h, w) {
            return dim_err("code blocks in a batch must share dims".to_string());
        }
        for r in 0..m {
            for p in 0..h {
                for q in 0..w {
                    let k = b.get(r, p, q) as usize;
                    let c = centers[r].get(k).ok_or_else(|| {
                        Error::Usage(format!("code index {k} out of range for {} levels", centers[r].len()))
                    })?;
                    data.push(*c);
                }
            }
        }
    }
    Tensor::new(vec![blocks.len(), m, h, w], data)
}

/// Mean squared difference of two equally shaped nodes.
pub fn quant_loss(g: &mut Graph, values: Var, z: Var) -> Result<Var> {
    let d = g.sub(values, z)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_gives_integers() {
        assert_eq!(centers(&[0.0; 4]), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn equal_ninths() {
        let c = centers(&[-(9f64.ln()); 8]);
        for (i, v) in c.iter().enumerate() {
            assert!((v - (i + 1) as f64 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn first_differences_are_exp_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..1.0)).collect();
        let c = centers(&s);
        assert!((c[0] - s[0].exp()).abs() < 1e-14);
        for i in 1..8 {
            assert!((c[i] - c[i - 1] - s[i].exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_center_cases() {
        let c = centers(&[-(9f64.ln()); 8]);
        // brute force: distances to all centers
        let d: Vec<f64> = c.iter().map(|v| (0.30 - v).abs()).collect();
        let bf = (0..8).min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()).unwrap();
        assert_eq!(bf, 2);
        assert_eq!(nearest(0.30, &c), 2);
        assert_eq!(nearest(c[4], &c), 4);
        assert_eq!(nearest(-5.0, &c), 0);
        assert_eq!(nearest(5.0, &c), 7);
        // exact midpoint between two centers resolves low
        assert_eq!(nearest(0.5, &[0.25, 0.75]), 0);
    }

    #[test]
    fn quant_loss_single_code() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1], vec![1.0 / 3.0]).unwrap());
        let z = g.constant(Tensor::new(vec![1], vec![0.3]).unwrap());
        let l = quant_loss(&mut g, v, z).unwrap();
        let want = (1.0f64 / 30.0).powi(2);
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-15);
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[3], 0.2));
        let l = quant_loss(&mut g, v, v).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn code_block_validation() {
        assert!(CodeBlock::new(2, 2, 2, vec![0; 7]).is_err());
        assert!(CodeBlock::new(0, 2, 2, vec![]).is_err());
        let b = CodeBlock::new(1, 2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(b.get(0, 1, 2), 5);
        assert_eq!(b.crop(1, 1, 1, 2).unwrap().indices(), &[4, 5]);
    }
}
