//! Property tests for the cross-cutting invariants.

use cgnet::ops::{self, ConvSpec, LossReduction};
use cgnet::rng::Pcg32;
use cgnet::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Realized convolution output extents obey the floor formula.
    #[test]
    fn conv_output_dims_follow_floor_formula(
        h in 1usize..14,
        w in 1usize..14,
        k in 1usize..4,
        s in 1usize..3,
        p in 0usize..3,
        d in 1usize..3,
    ) {
        let spec = ConvSpec::square(2, 3, k, s, p, d, 1, false);
        let x = Tensor::<f64>::zeros(&[1, 2, h, w]).unwrap();
        let wt = Tensor::<f64>::zeros(&spec.weight_dims()).unwrap();
        let formula = |len: usize| -> i64 {
            (len as i64 + 2 * p as i64 - d as i64 * (k as i64 - 1) - 1) / s as i64 + 1
        };
        let (eh, ew) = (formula(h), formula(w));
        match ops::conv2d_forward(&x, &wt, None, &spec) {
            Ok(y) => {
                prop_assert!(eh >= 1 && ew >= 1);
                prop_assert_eq!(y.dims(), &[1, 3, eh as usize, ew as usize]);
            }
            Err(_) => prop_assert!(eh < 1 || ew < 1),
        }
    }

    /// Concatenation followed by channel slicing recovers both inputs
    /// bitwise.
    #[test]
    fn concat_slice_roundtrip(
        n in 1usize..3,
        ca in 1usize..5,
        cb in 1usize..5,
        h in 1usize..5,
        w in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = Pcg32::new(seed, 0);
        let a = Tensor::<f32>::rand_normal(&mut rng, &[n, ca, h, w], 0.0, 1.0).unwrap();
        let b = Tensor::<f32>::rand_normal(&mut rng, &[n, cb, h, w], 0.0, 1.0).unwrap();
        let cat = a.concat_channels(&b).unwrap();
        prop_assert_eq!(cat.slice_channels(0, ca).unwrap(), a);
        prop_assert_eq!(cat.slice_channels(ca, ca + cb).unwrap(), b);
    }

    /// The masked cross-entropy is invariant to adding a per-pixel constant
    /// to all class scores.
    #[test]
    fn ce_shift_invariance(seed in 0u64..1000, shift in -20.0f64..20.0) {
        let mut rng = Pcg32::new(seed, 1);
        let k = 4;
        let scores = Tensor::<f64>::rand_normal(&mut rng, &[1, k, 3, 3], 0.0, 3.0).unwrap();
        let labels: Vec<u8> = (0..9)
            .map(|_| if rng.below(5) == 0 { 255 } else { rng.below(k as u32) as u8 })
            .collect();
        if labels.iter().all(|&l| l == 255) {
            return Ok(());
        }
        let (l0, _) = ops::softmax_ce_masked(&scores, &labels, 255, LossReduction::Mean).unwrap();
        let plane = 9;
        let shifted: Vec<f64> = scores
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + shift * ((i % plane) as f64 / plane as f64 + 0.5))
            .collect();
        let shifted = Tensor::from_vec(scores.dims(), shifted).unwrap();
        let (l1, _) = ops::softmax_ce_masked(&shifted, &labels, 255, LossReduction::Mean).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-6 * (1.0 + l0.abs()), "{} vs {}", l0, l1);
    }

    /// Depthwise convolution never mixes channels.
    #[test]
    fn depthwise_channel_independence(seed in 0u64..500, ch in 0usize..4) {
        let spec = ConvSpec::square(4, 4, 3, 1, 2, 2, 4, false);
        let mut rng = Pcg32::new(seed, 2);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 4, 5, 5], 0.0, 1.0).unwrap();
        let w = Tensor::<f64>::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 1.0).unwrap();
        let y0 = ops::conv2d_forward(&x, &w, None, &spec).unwrap();
        let mut bumped = x.data().to_vec();
        bumped[ch * 25 + (seed as usize % 25)] += 0.5;
        let x1 = Tensor::from_vec(x.dims(), bumped).unwrap();
        let y1 = ops::conv2d_forward(&x1, &w, None, &spec).unwrap();
        for c in 0..4 {
            let changed = (0..25).any(|p| y0.data()[c * 25 + p] != y1.data()[c * 25 + p]);
            prop_assert_eq!(changed, c == ch);
        }
    }
}
