//! Seeded procedural images and code blocks for tests and toy training.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::quantizer::CodeBlock;
use crate::tensor::Tensor;

/// A `[1, 3, h, w]` image in `[0, 1]`: a smooth colour gradient, a few
/// flat shapes and a striped texture patch.
pub fn image(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)));
    let mut px = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = base[c] + grad[c].0 * y as f64 / h as f64 + grad[c].1 * x as f64 / w as f64;
                px[(c * h + y) * w + x] = v;
            }
        }
    }
    for _ in 0..rng.gen_range(2..5) {
        let col: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let rad = rng.gen_range(0.1..0.35) * h.min(w) as f64;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx < rad * rad
                } else {
                    dy.abs() < rad && dx.abs() < rad * 0.7
                };
                if inside {
                    for c in 0..3 {
                        px[(c * h + y) * w + x] = col[c];
                    }
                }
            }
        }
    }
    let period = rng.gen_range(3.0..8.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (y0, x0) = (rng.gen_range(0..h / 2 + 1), rng.gen_range(0..w / 2 + 1));
    for y in y0..(y0 + h / 3).min(h) {
        for x in x0..(x0 + w / 3).min(w) {
            let t = (y as f64 * angle.sin() + x as f64 * angle.cos()) * std::f64::consts::TAU / period;
            for c in 0..3 {
                px[(c * h + y) * w + x] += 0.15 * t.sin();
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("sized")
}

/// Stacks `[1, 3, h, w]` images into one batch.
pub fn batch(images: &[Tensor]) -> Tensor {
    let s = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::new(vec![images.len(), s[1], s[2], s[3]], data).expect("equal shapes")
}

/// Random `size×size` crop of a `[1, C, H, W]` image.
pub fn random_crop(img: &Tensor, size: usize, rng: &mut impl Rng) -> Tensor {
    let s = img.shape();
    let top = rng.gen_range(0..=s[2] - size);
    let left = rng.gen_range(0..=s[3] - size);
    Tensor::from_fn(&[1, s[1], size, size], |i| {
        let c = i / (size * size);
        let y = (i / size) % size;
        let x = i % size;
        img.at4(0, c, top + y, left + x)
    })
}

pub fn uniform_codes(m: usize, h: usize, w: usize, levels: usize, rng: &mut impl Rng) -> CodeBlock {
    let idx = (0..m * h * w).map(|_| rng.gen_range(0..levels) as u8).collect();
    CodeBlock::new(m, h, w, idx).expect("sized")
}

/// Codes drawn i.i.d. from `probs`.
pub fn iid_codes(m: usize, h: usize, w: usize, probs: &[f64], rng: &mut impl Rng) -> CodeBlock {
    let dist = WeightedIndex::new(probs).expect("valid weights");
    let idx = (0..m * h * w).map(|_| dist.sample(rng) as u8).collect();
    CodeBlock::new(m, h, w, idx).expect("sized")
}

/// Every code equals its left neighbour; the first column is uniform.
pub fn left_copy_codes(m: usize, h: usize, w: usize, levels: usize, rng: &mut impl Rng) -> CodeBlock {
    let mut b = CodeBlock::zeros(m, h, w).expect("sized");
    for r in 0..m {
        for p in 0..h {
            let v = rng.gen_range(0..levels) as u8;
            for q in 0..w {
                b.set(r, p, q, v);
            }
        }
    }
    b
}

/// Each block draws a small dictionary of `M`-vectors and places a random
/// entry at every position, so a code is predictable from any other
/// position whose lower channels match.
pub fn repeated_texture_codes(m: usize, h: usize, w: usize, levels: usize, words: usize, rng: &mut impl Rng) -> CodeBlock {
    let dict: Vec<Vec<u8>> = (0..words)
        .map(|_| (0..m).map(|_| rng.gen_range(0..levels) as u8).collect())
        .collect();
    let mut b = CodeBlock::zeros(m, h, w).expect("sized");
    for p in 0..h {
        for q in 0..w {
            let word = &dict[rng.gen_range(0..words)];
            for (r, &v) in word.iter().enumerate() {
                b.set(r, p, q, v);
            }
        }
    }
    b
}

/// Empirical entropy in bits of the index histogram of `blocks`.
pub fn empirical_entropy(blocks: &[CodeBlock], levels: usize) -> f64 {
    let mut hist = vec![0usize; levels];
    let mut n = 0usize;
    for b in blocks {
        for &k in b.indices() {
            hist[k as usize] += 1;
            n += 1;
        }
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn images_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let im = image(40, 24, &mut rng);
        assert_eq!(im.shape(), &[1, 3, 40, 24]);
        assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn left_copy_is_constant_along_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = left_copy_codes(2, 3, 5, 8, &mut rng);
        for r in 0..2 {
            for p in 0..3 {
                assert!((1..5).all(|q| b.get(r, p, q) == b.get(r, p, 0)));
            }
        }
    }

    #[test]
    fn entropy_of_uniform_codes_near_three_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blocks: Vec<_> = (0..20).map(|_| uniform_codes(4, 8, 8, 8, &mut rng)).collect();
        let e = empirical_entropy(&blocks, 8);
        assert!(e <= 3.0 && e > 2.95);
    }
}
