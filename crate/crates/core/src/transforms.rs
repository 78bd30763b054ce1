//! Analysis and synthesis transforms built from U-Net blocks.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Conv, PRelu};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformConfig {
    pub width: usize,
    pub m: usize,
    pub multipliers: [usize; 3],
    pub down_kernel: usize,
    pub kernel: usize,
}

impl TransformConfig {
    pub fn new(width: usize, m: usize) -> Self {
        Self {
            width,
            m,
            multipliers: [2, 2, 2],
            down_kernel: 5,
            kernel: 3,
        }
    }

    /// Width 32 and 32 latent channels, small enough for CPU training.
    pub fn desk() -> Self {
        Self::new(32, 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.m == 0 {
            return Err(Error::Config("transform width and M must be positive".into()));
        }
        if self.multipliers.contains(&0) {
            return Err(Error::Config("U-Net multipliers must be at least 1".into()));
        }
        if self.kernel % 2 == 0 || self.down_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    pub(crate) fn to_meta(&self) -> Tensor {
        let v = [
            self.width,
            self.m,
            self.multipliers[0],
            self.multipliers[1],
            self.multipliers[2],
            self.down_kernel,
            self.kernel,
        ];
        Tensor::new(vec![7], v.iter().map(|&x| x as f64).collect()).expect("1-D")
    }

    pub(crate) fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 7 || d.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Format("malformed transform metadata".into()));
        }
        let u = |i: usize| d[i] as usize;
        let cfg = Self {
            width: u(0),
            m: u(1),
            multipliers: [u(2), u(3), u(4)],
            down_kernel: u(5),
            kernel: u(6),
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

/// Three strided convolutions down, three expanding convolutions with
/// depth-to-space up, and an additive skip at every scale.
#[derive(Clone, Debug)]
pub struct UnetBlock {
    width: usize,
    multipliers: [usize; 3],
    down: Vec<(Conv, PRelu)>,
    up: Vec<(Conv, PRelu)>,
}

impl UnetBlock {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, multipliers: [usize; 3], kernel: usize, rng: &mut impl Rng) -> Self {
        let down = multipliers
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                (
                    Conv::new(ps, &format!("{name}.down{i}"), width, width, kernel, a, rng),
                    PRelu::new(ps, &format!("{name}.down{i}_act"), width),
                )
            })
            .collect();
        let up = multipliers
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                (
                    Conv::new(ps, &format!("{name}.up{i}"), width, width * a * a, kernel, 1, rng),
                    PRelu::new(ps, &format!("{name}.up{i}_act"), width),
                )
            })
            .collect();
        Self {
            width,
            multipliers,
            down,
            up,
        }
    }

    pub fn factor(&self) -> usize {
        self.multipliers.iter().product()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let f = self.factor();
        if s.len() != 4 || s[1] != self.width {
            return dim_err(format!("UnetBlock expects [N, {}, H, W], got {s:?}", self.width));
        }
        if s[2] % f != 0 || s[3] % f != 0 {
            return dim_err(format!(
                "UnetBlock spatial dims {}x{} must be multiples of {f}",
                s[2], s[3]
            ));
        }
        let mut skips = vec![x];
        let mut h = x;
        for (conv, act) in &self.down {
            let t = conv.forward(g, p, h)?;
            h = act.forward(g, p, t)?;
            skips.push(h);
        }
        skips.pop();
        for (i, (conv, act)) in self.up.iter().enumerate().rev() {
            let t = conv.forward(g, p, h)?;
            let t = g.depth_to_space(t, self.multipliers[i])?;
            let t = act.forward(g, p, t)?;
            h = g.add(t, skips[i])?;
        }
        Ok(h)
    }

    /// Zero-pads to the required multiple, runs the block, crops back.
    pub fn forward_any(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let f = self.factor();
        if s.len() == 4 && (s[2] % f != 0 || s[3] % f != 0) {
            let (h, w) = (s[2].div_ceil(f) * f, s[3].div_ceil(f) * f);
            let xp = g.pad_bottom_right(x, h, w)?;
            let y = self.forward(g, p, xp)?;
            return g.crop(y, s[2], s[3]);
        }
        self.forward(g, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub cfg: TransformConfig,
    pub params: ParamSet,
    stages: Vec<(Conv, PRelu, UnetBlock)>,
    out: Conv,
}

impl Analysis {
    pub fn new(cfg: TransformConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let stages = (0..3)
            .map(|i| {
                let cin = if i == 0 { 3 } else { cfg.width };
                (
                    Conv::new(&mut ps, &format!("down{i}"), cin, cfg.width, cfg.down_kernel, 2, rng),
                    PRelu::new(&mut ps, &format!("down{i}_act"), cfg.width),
                    UnetBlock::new(&mut ps, &format!("unet{i}"), cfg.width, cfg.multipliers, cfg.kernel, rng),
                )
            })
            .collect();
        let out = Conv::new(&mut ps, "out", cfg.width, cfg.m, cfg.kernel, 1, rng);
        Ok(Self {
            cfg,
            params: ps,
            stages,
            out,
        })
    }

    /// `x: [N, 3, H, W]` with `H, W` multiples of 8 → `z ∈ (0,1)^{N×M×H/8×W/8}`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return dim_err(format!("analysis expects [N, 3, H, W], got {s:?}"));
        }
        if s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 || s[3] == 0 {
            return dim_err(format!(
                "analysis input {}x{} must be padded to multiples of 8",
                s[2], s[3]
            ));
        }
        let mut h = x;
        for (conv, act, unet) in &self.stages {
            let t = conv.forward(g, p, h)?;
            let t = act.forward(g, p, t)?;
            h = unet.forward_any(g, p, t)?;
        }
        let z = self.out.forward(g, p, h)?;
        Ok(g.sigmoid(z))
    }

    /// Latent of a batch without gradient tracking.
    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.forward(&mut g, &p, xv)?;
        Ok(g.value(z).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub cfg: TransformConfig,
    pub params: ParamSet,
    input: (Conv, PRelu),
    stages: Vec<(UnetBlock, Conv, PRelu)>,
    out: Conv,
}

impl Synthesis {
    pub fn new(cfg: TransformConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let input = (
            Conv::new(&mut ps, "in", cfg.m, cfg.width, cfg.kernel, 1, rng),
            PRelu::new(&mut ps, "in_act", cfg.width),
        );
        let stages = (0..3)
            .map(|i| {
                (
                    UnetBlock::new(&mut ps, &format!("unet{i}"), cfg.width, cfg.multipliers, cfg.kernel, rng),
                    Conv::new(&mut ps, &format!("up{i}"), cfg.width, 4 * cfg.width, cfg.kernel, 1, rng),
                    PRelu::new(&mut ps, &format!("up{i}_act"), cfg.width),
                )
            })
            .collect();
        let out = Conv::new(&mut ps, "out", cfg.width, 3, cfg.kernel, 1, rng);
        Ok(Self {
            cfg,
            params: ps,
            input,
            stages,
            out,
        })
    }

    /// `y: [N, M, h, w]` center values → `[N, 3, 8h, 8w]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let s = g.shape(y);
        if s.len() != 4 || s[1] != self.cfg.m {
            return dim_err(format!("synthesis expects [N, {}, H, W], got {s:?}", self.cfg.m));
        }
        let t = self.input.0.forward(g, p, y)?;
        let mut h = self.input.1.forward(g, p, t)?;
        for (unet, conv, act) in &self.stages {
            let t = unet.forward_any(g, p, h)?;
            let t = conv.forward(g, p, t)?;
            let t = g.depth_to_space(t, 2)?;
            h = act.forward(g, p, t)?;
        }
        self.out.forward(g, p, h)
    }

    pub fn run(&self, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let x = self.forward(&mut g, &p, yv)?;
        Ok(g.value(x).clone())
    }
}

/// Replicates the bottom row and right column of `[N, C, H, W]` up to the
/// next multiple of `factor`; returns the original `(H, W)`.
pub fn pad_replicate(x: &Tensor, factor: usize) -> Result<(Tensor, (usize, usize))> {
    let s = x.shape();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 || factor == 0 {
        return dim_err(format!("pad_replicate expects a nonempty [N, C, H, W], got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let (hp, wp) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let src = x.data();
    let mut out = Vec::with_capacity(s[0] * s[1] * hp * wp);
    for nc in 0..s[0] * s[1] {
        for y in 0..hp {
            let row = &src[(nc * h + y.min(h - 1)) * w..][..w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat(row[w - 1]).take(wp - w));
        }
    }
    Ok((Tensor::new(vec![s[0], s[1], hp, wp], out)?, (h, w)))
}

/// Top-left `h×w` window of `[N, C, H, W]`.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || h > s[2] || w > s[3] {
        return dim_err(format!("cannot crop {s:?} to {h}x{w}"));
    }
    let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
    for nc in 0..s[0] * s[1] {
        for y in 0..h {
            out.extend_from_slice(&x.data()[(nc * s[2] + y) * s[3]..][..w]);
        }
    }
    Tensor::new(vec![s[0], s[1], h, w], out)
}
