//! Property tests over the library's invariants.

use proptest::prelude::*;

use pmt::gradcore::Tensor;
use pmt::losses::{dda_align_loss, dda_mask, sharpen, warmup};
use pmt::segmetrics::{dice_jaccard, hd95_asd};
use pmt::synthdata::split;

fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, len)
}

fn tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(v.to_vec(), &[v.len()]).unwrap()
}

proptest! {
    /// Shape-legal inputs produce defined outputs; illegal pairs error, never
    /// a crash.
    #[test]
    fn binary_ops_are_total_over_shapes(
        a_shape in prop::collection::vec(1usize..5, 1..4),
        b_shape in prop::collection::vec(1usize..5, 1..4),
    ) {
        let a = Tensor::<f64>::full(&a_shape, 0.5);
        let b = Tensor::<f64>::full(&b_shape, 2.0);
        for result in [a.add(&b), a.sub(&b), a.mul(&b), a.div(&b)] {
            match result {
                Ok(t) => prop_assert_eq!(t.shape(), a_shape.clone()),
                Err(_) => prop_assert_ne!(a_shape.clone(), b_shape.clone()),
            }
        }
    }

    /// Sharpening is monotone in p, fixes exactly {0, 1/2, 1}, and with
    /// T < 1 moves mass away from 1/2.
    #[test]
    fn sharpen_monotone_and_repelling(
        mut ps in prop::collection::vec(0.0f64..=1.0, 2..20),
        temp in 0.05f64..1.0,
    ) {
        ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let out = sharpen(&tensor(&ps), temp).unwrap().to_vec();
        for w in out.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
        for (&p, &s) in ps.iter().zip(&out) {
            prop_assert!((s - 0.5).abs() + 1e-12 >= (p - 0.5).abs());
            if p == 0.0 || p == 0.5 || p == 1.0 {
                prop_assert!((s - p).abs() < 1e-12);
            }
        }
    }

    /// The disagreement mask is 0/1-valued and zero wherever the binarized
    /// predictions agree.
    #[test]
    fn dda_mask_is_binary_and_zero_on_agreement(
        a in unit_vec(16),
        b in unit_vec(16),
    ) {
        let m = dda_mask(&[tensor(&a), tensor(&b)], 0.5).unwrap().to_vec();
        for ((&ma, &va), &vb) in m.iter().zip(&a).zip(&b) {
            prop_assert!(ma == 0.0 || ma == 1.0);
            let (ba, bb) = (va > 0.5, vb > 0.5);
            if ba == bb {
                prop_assert_eq!(ma, 0.0);
            } else {
                prop_assert_eq!(ma, 1.0);
            }
        }
    }

    /// Alignment loss stays in [0, 1] for predictions and targets in [0, 1].
    #[test]
    fn alignment_loss_bounded(
        pred in unit_vec(16),
        gt_bits in prop::collection::vec(prop::bool::ANY, 16),
        mask_bits in prop::collection::vec(prop::bool::ANY, 16),
    ) {
        let gt: Vec<f64> = gt_bits.iter().map(|&b| f64::from(b)).collect();
        let mask: Vec<f64> = mask_bits.iter().map(|&b| f64::from(b)).collect();
        let l = dda_align_loss(&tensor(&pred), &tensor(&gt), &tensor(&mask))
            .unwrap()
            .item()
            .unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    /// Warm-up is non-decreasing and spans (hat*e^-5, hat].
    #[test]
    fn warmup_monotone_with_bounded_range(t_max in 2usize..5000, hat in 0.1f64..100.0) {
        let mut prev = 0.0;
        for t in 0..=t_max {
            let v = warmup(t, t_max, hat).unwrap();
            prop_assert!(v >= prev - 1e-12);
            prop_assert!(v >= hat * (-5.0f64).exp() - 1e-12 && v <= hat + 1e-12);
            prev = v;
        }
        prop_assert_eq!(warmup(t_max, t_max, hat).unwrap(), hat);
    }

    /// Surface metrics are symmetric and translation invariant; overlap
    /// scores stay in [0, 1].
    #[test]
    fn metrics_symmetric_and_translation_invariant(
        a_bits in prop::collection::vec(prop::bool::ANY, 64),
        b_bits in prop::collection::vec(prop::bool::ANY, 64),
        dy in 0usize..4,
        dx in 0usize..4,
    ) {
        let embed = |bits: &[bool], oy: usize, ox: usize| -> Vec<u8> {
            let mut m = vec![0u8; 144];
            for y in 0..8 {
                for x in 0..8 {
                    m[(y + oy) * 12 + x + ox] = u8::from(bits[y * 8 + x]);
                }
            }
            m
        };
        let a0 = embed(&a_bits, 0, 0);
        let b0 = embed(&b_bits, 0, 0);
        let (d, j) = dice_jaccard(&a0, &b0).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        if a_bits.iter().any(|&v| v) && b_bits.iter().any(|&v| v) {
            let ab = hd95_asd(&a0, &b0, 12, 12).unwrap();
            let ba = hd95_asd(&b0, &a0, 12, 12).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.0 >= 0.0 && ab.1 >= 0.0);
            let at = embed(&a_bits, dy, dx);
            let bt = embed(&b_bits, dy, dx);
            let tr = hd95_asd(&at, &bt, 12, 12).unwrap();
            prop_assert!((ab.0 - tr.0).abs() < 1e-12 && (ab.1 - tr.1).abs() < 1e-12);
            let (dt, jt) = dice_jaccard(&at, &bt).unwrap();
            prop_assert_eq!((d, j), (dt, jt));
        }
    }

    /// Train/test/labeled is a partition respecting the declared fractions
    /// within integer rounding.
    #[test]
    fn split_is_a_partition(count in 5usize..400, frac in 0.05f64..=1.0, seed in any::<u64>()) {
        let s = match split(count, frac, seed) {
            Ok(s) => s,
            // fewer than one labeled sample is a legal rejection
            Err(_) => return Ok(()),
        };
        let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
        let n_test = (count as f64 * 0.2 + 0.5).floor() as usize;
        prop_assert_eq!(s.test.len(), n_test);
        let n_train = count - n_test;
        let n_lab = (n_train as f64 * frac + 0.5).floor() as usize;
        prop_assert_eq!(s.labeled.len(), n_lab);
    }
}
