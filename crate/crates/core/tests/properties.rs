use nlcodec::ccn::{build_mask, GroupSchedule, MaskKind};
use nlcodec::coder::{freq_quantize, RangeDecoder, RangeEncoder, FREQ_TOTAL};
use nlcodec::entropy::{floor_row, mog_table};
use nlcodec::quantizer::{centers, nearest, Quantizer};
use nlcodec::training::CodeDataset;
use nlcodec::{CodeBlock, Tensor};
use proptest::prelude::*;

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0..1.0f64, 0.0..1e-12f64, Just(0.0)], 2..20).prop_filter("some mass", |r| {
        r.iter().sum::<f64>() > 1e-9
    })
}

fn normalize(r: &[f64]) -> Vec<f64> {
    let s: f64 = r.iter().sum();
    r.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn frequency_tables_fill_the_range(row in row_strategy()) {
        let t = freq_quantize(&normalize(&row));
        let total: u32 = (0..t.symbols()).map(|s| t.freq(s)).sum();
        prop_assert_eq!(total, FREQ_TOTAL);
        prop_assert!((0..t.symbols()).all(|s| t.freq(s) >= 1));
        prop_assert_eq!(*t.cum().last().unwrap(), FREQ_TOTAL);
    }

    #[test]
    fn floored_rows_stay_normalized(row in row_strategy()) {
        let p = floor_row(&normalize(&row));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 1e-9));
    }

    #[test]
    fn range_coder_round_trips(rows in prop::collection::vec(row_strategy(), 1..8), picks in prop::collection::vec(any::<u32>(), 1..300)) {
        let tables: Vec<_> = rows.iter().map(|r| freq_quantize(&normalize(r))).collect();
        let seq: Vec<(usize, usize)> = picks
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let t = i % tables.len();
                (t, p as usize % tables[t].symbols())
            })
            .collect();
        let mut enc = RangeEncoder::new();
        for &(t, s) in &seq {
            enc.encode(&tables[t], s);
        }
        let bytes = enc.finish();
        let ideal: f64 = seq.iter().map(|&(t, s)| tables[t].bits(s)).sum();
        prop_assert!(bytes.len() as f64 * 8.0 <= ideal + 64.0);
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(t, s) in &seq {
            prop_assert_eq!(dec.decode(&tables[t]).unwrap(), s);
        }
        prop_assert!(dec.finish().is_ok());
    }

    #[test]
    fn centers_are_strictly_increasing(sigma in prop::collection::vec(-12.0..3.0f64, 1..16)) {
        let c = centers(&sigma);
        prop_assert!(c[0] > 0.0);
        prop_assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn nearest_matches_brute_force(z in -1.0..2.0f64, sigma in prop::collection::vec(-4.0..0.0f64, 1..10)) {
        let c = centers(&sigma);
        let k = nearest(z, &c);
        let best = c.iter().map(|v| (z - v).abs()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!((z - c[k]).abs(), best);
    }

    #[test]
    fn quantization_is_idempotent(vals in prop::collection::vec(0.0..1.0f64, 2 * 3 * 4), shift in -0.3..0.3f64) {
        let mut q = Quantizer::new(2, 8);
        q.sigma_mut().data_mut()[3] += shift;
        let z = Tensor::new(vec![1, 2, 3, 4], vals).unwrap();
        let (blocks, values) = q.quantize(&z).unwrap();
        let (again, values2) = q.quantize(&values).unwrap();
        prop_assert_eq!(&blocks, &again);
        prop_assert_eq!(&values, &values2);
        prop_assert_eq!(q.dequantize(&blocks).unwrap(), values);
    }

    #[test]
    fn mog_tables_sum_to_one(
        comps in prop::collection::vec((-3.0..3.0f64, -0.5..1.5f64, -6.0..2.0f64), 1..5),
    ) {
        let z: f64 = comps.iter().map(|c| c.0.exp()).sum();
        let pi: Vec<f64> = comps.iter().map(|c| c.0.exp() / z).collect();
        let mu: Vec<f64> = comps.iter().map(|c| c.1).collect();
        let s: Vec<f64> = comps.iter().map(|c| c.2.exp()).collect();
        let c = Quantizer::new(1, 8).channel_centers(0);
        let t = mog_table(&pi, &mu, &s, &c);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(t.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn groups_partition_the_block(m in 1usize..6, h in 1usize..7, w in 1usize..7) {
        let s = GroupSchedule::new(m, h, w);
        let mut seen = vec![false; m * h * w];
        for k in 0..s.num_groups() {
            for (r, p, q) in s.group(k) {
                prop_assert_eq!(r + p + q, k);
                prop_assert_eq!(s.group_of(r, p, q).unwrap(), k);
                let i = (r * h + p) * w + q;
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.into_iter().all(|b| b));
    }

    #[test]
    fn input_mask_is_inside_hidden_mask(m in 1usize..7, radius in 1usize..4) {
        let a = build_mask(MaskKind::Input, radius, m);
        let b = build_mask(MaskKind::Hidden, radius, m);
        let ri = radius as isize;
        for r in 0..m {
            prop_assert!(!a.get(r, r, 0, 0));
            prop_assert!(b.get(r, r, 0, 0));
            for s in 0..m {
                for u in -ri..=ri {
                    for v in -ri..=ri {
                        prop_assert!(!a.get(r, s, u, v) || b.get(r, s, u, v));
                    }
                }
            }
        }
    }

    #[test]
    fn code_datasets_round_trip(sizes in prop::collection::vec((1usize..5, 1usize..5), 0..5), seed in any::<u64>()) {
        let blocks: Vec<CodeBlock> = sizes
            .iter()
            .enumerate()
            .map(|(n, &(h, w))| {
                let idx = (0..3 * h * w).map(|i| ((seed >> (i % 60)) as usize + n + i) as u8 % 8).collect();
                CodeBlock::new(3, h, w, idx).unwrap()
            })
            .collect();
        let d = CodeDataset::new(3, 8, blocks).unwrap();
        prop_assert_eq!(CodeDataset::from_bytes(&d.to_bytes()).unwrap(), d);
    }
}
