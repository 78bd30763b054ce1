//! im2col/GEMM convolution kernels (cross-correlation, square kernels).

use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a · b + beta · c` with optional transposes; all matrices row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let hw = g.out_hw();
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..k {
            for b in 0..k {
                let row = &mut col[((c * k + a) * k + b) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + a as isize - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + b as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let hw = g.out_hw();
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..k {
            for b in 0..k {
                let row = &col[((c * k + a) * k + b) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + a as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + b as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_sz = g.ci * g.h * g.w;
    let out_sz = g.co * g.out_hw();
    let kk = g.col_rows();
    let mut out = vec![0.0; g.n * out_sz];
    out.par_chunks_mut(out_sz)
        .enumerate()
        .for_each_init(Vec::new, |col, (n, y)| {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            if let Some(b) = bias {
                for (co, row) in y.chunks_mut(g.out_hw()).enumerate() {
                    row.fill(b[co]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            if g.is_pointwise() {
                gemm(g.co, kk, g.out_hw(), w, false, xn, false, beta, y);
            } else {
                col.resize(kk * g.out_hw(), 0.0);
                im2col(g, xn, col);
                gemm(g.co, kk, g.out_hw(), w, false, col, false, beta, y);
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads {
    let in_sz = g.ci * g.h * g.w;
    let out_sz = g.co * g.out_hw();
    let kk = g.col_rows();
    let hw = g.out_hw();
    // Per-item partials, reduced afterwards in batch order so the result
    // does not depend on the worker count.
    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
            let pointwise = g.is_pointwise();
            let mut col = Vec::new();
            if need_w && !pointwise {
                col.resize(kk * hw, 0.0);
                im2col(g, xn, &mut col);
            }
            let mut dw = Vec::new();
            if need_w {
                dw.resize(g.co * kk, 0.0);
                let src: &[f64] = if pointwise { xn } else { &col };
                gemm(g.co, hw, kk, dyn_, false, src, true, 0.0, &mut dw);
            }
            let mut db = Vec::new();
            if need_b {
                db = dyn_.chunks(hw).map(|r| r.iter().sum()).collect();
            }
            let mut dx = Vec::new();
            if need_x {
                dx.resize(in_sz, 0.0);
                if pointwise {
                    gemm(kk, g.co, hw, w, true, dyn_, false, 0.0, &mut dx);
                } else {
                    col.resize(kk * hw, 0.0);
                    gemm(kk, g.co, hw, w, true, dyn_, false, 0.0, &mut col);
                    col2im(g, &col, &mut dx);
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut out = ConvGrads {
        dx: need_x.then(|| Vec::with_capacity(g.n * in_sz)),
        dw: need_w.then(|| vec![0.0; g.co * kk]),
        db: need_b.then(|| vec![0.0; g.co]),
    };
    for (dx, dw, db) in parts {
        if let Some(acc) = out.dx.as_mut() {
            acc.extend_from_slice(&dx);
        }
        if let Some(acc) = out.dw.as_mut() {
            acc.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
        if let Some(acc) = out.db.as_mut() {
            acc.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        }
    }
    out
}
