//! Distortion measures on `[N, 3, H, W]` images in `[0, 1]`.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const CS_FLOOR: f64 = 1e-12;

/// Smallest spatial side MS-SSIM accepts (four halvings leave one pixel).
pub const MS_SSIM_MIN_SIDE: usize = 16;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("mse of {:?} and {:?}", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel().max(1) as f64)
}

/// `10·log10(1/mse)`; infinite for identical images.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR as printed in reports: `inf` for a perfect match.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_string()
    } else {
        format!("{db}")
    }
}

/// Normalized 1-D Gaussian of `len` taps centred on the window.
pub fn gaussian_window(len: usize) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..len)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn window_2d(len: usize) -> Tensor {
    let g = gaussian_window(len);
    Tensor::from_fn(&[1, 1, len, len], |i| g[i / len] * g[i % len])
}

/// Per-channel `(mean cs, mean ssim)` maps at one scale; inputs `[B, 1, H, W]`.
fn ssim_terms(g: &mut Graph, x: Var, y: Var) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let k = WINDOW.min(s[2]).min(s[3]);
    let w = g.constant(window_2d(k));
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mx = g.conv2d(x, w, None, 1, 0)?;
    let my = g.conv2d(y, w, None, 1, 0)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.conv2d(xx, w, None, 1, 0)?;
    let eyy = g.conv2d(yy, w, None, 1, 0)?;
    let exy = g.conv2d(xy, w, None, 1, 0)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cov = g.sub(exy, mxy)?;
    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.offset(cs_num, c2);
    let cs_den = g.add(vx, vy)?;
    let cs_den = g.offset(cs_den, c2);
    let cs = g.div(cs_num, cs_den)?;
    let l_num = g.scale(mxy, 2.0);
    let l_num = g.offset(l_num, c1);
    let l_den = g.add(mx2, my2)?;
    let l_den = g.offset(l_den, c1);
    let l = g.div(l_num, l_den)?;
    let ssim = g.mul(l, cs)?;
    let spatial = |g: &mut Graph, v: Var| -> Result<Var> {
        let sh = g.shape(v).to_vec();
        let flat = g.reshape(v, &[sh[0], sh[2] * sh[3]])?;
        let tot = g.sum_axis(flat, 1)?;
        Ok(g.scale(tot, 1.0 / (sh[2] * sh[3]) as f64))
    };
    let mcs = spatial(g, cs)?;
    let mssim = spatial(g, ssim)?;
    Ok((mcs, mssim))
}

/// Mean MS-SSIM over images and channels as a differentiable scalar.
pub fn ms_ssim_node(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s != g.shape(y) || s.len() != 4 {
        return dim_err(format!("ms_ssim of {:?} and {:?}", s, g.shape(y)));
    }
    if s[2] < MS_SSIM_MIN_SIDE || s[3] < MS_SSIM_MIN_SIDE {
        return dim_err(format!(
            "ms_ssim needs at least {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE} pixels, got {}x{}",
            s[2], s[3]
        ));
    }
    let mut xs = g.reshape(x, &[s[0] * s[1], 1, s[2], s[3]])?;
    let mut ys = g.reshape(y, &[s[0] * s[1], 1, s[2], s[3]])?;
    let mut prod: Option<Var> = None;
    for (j, &wj) in MS_SSIM_WEIGHTS.iter().enumerate() {
        if j > 0 {
            xs = g.avg_pool2(xs)?;
            ys = g.avg_pool2(ys)?;
        }
        let (mcs, mssim) = ssim_terms(g, xs, ys)?;
        let term = if j + 1 == MS_SSIM_WEIGHTS.len() { mssim } else { mcs };
        let term = g.clamp(term, CS_FLOOR, f64::INFINITY);
        let term = g.powf(term, wj);
        prod = Some(match prod {
            None => term,
            Some(p) => g.mul(p, term)?,
        });
    }
    Ok(g.mean(prod.expect("five scales")))
}

/// `100 − 100·MS-SSIM`.
pub fn ms_ssim_loss_node(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let m = ms_ssim_node(g, x, y)?;
    let l = g.scale(m, -100.0);
    Ok(g.offset(l, 100.0))
}

pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let y = g.constant(b.clone());
    let m = ms_ssim_node(&mut g, x, y)?;
    g.value(m).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[1, 3, 32, 32], |i| f(i / 1024, (i / 32) % 32, i % 32))
    }

    #[test]
    fn mse_and_psnr() {
        let a = img(|c, y, x| ((c + y * 3 + x * 5) % 17) as f64 / 20.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(format_psnr(psnr(0.0)), "inf");
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn identical_images_score_one() {
        let a = img(|c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 11.0);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = img(|c, y, x| ((c * 5 + y * 7 + x * 3) % 13) as f64 / 13.0);
        let v = ms_ssim(&a, &b).unwrap();
        assert!((0.0..1.0).contains(&v));
    }

    #[test]
    fn window_is_normalized() {
        for len in [1, 4, 8, 11] {
            assert!((gaussian_window(len).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn small_images_rejected() {
        let a = Tensor::zeros(&[1, 3, 8, 32]);
        assert!(ms_ssim(&a, &a).is_err());
    }
}
