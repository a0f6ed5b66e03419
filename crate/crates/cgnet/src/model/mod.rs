//! Network assembly: block and network configuration, parameter storage,
//! the context-guided block, the full model with parameter/FLOP accounting,
//! and bit-exact checkpointing.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use block::{CgBlock, GlobalGate};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile, TrainState};
pub use config::{ActKind, CgBlockConfig, NetworkConfig, Residual, SurMode};
pub use network::{Mode, Network, ShapeTrace, UPSAMPLE_FACTOR};
pub use params::{Param, ParamId, ParamKind, ParamStore};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use crate::tensor::Tensor;

    fn net(m: usize, n: usize, k: usize, seed: u64) -> Network<f32> {
        let cfg = NetworkConfig {
            num_classes: k,
            blocks_stage2: m,
            blocks_stage3: n,
            ..Default::default()
        };
        Network::build(cfg, &mut Pcg32::new(seed, 0)).unwrap()
    }

    #[test]
    fn table_parameter_budgets() {
        // (M, N, expected millions) pairs; tolerance +-0.03 M.
        let cases = [
            (3, 9, 0.34),
            (3, 12, 0.38),
            (3, 15, 0.41),
            (3, 18, 0.45),
            (3, 21, 0.49),
        ];
        for (m, n, want) in cases {
            let got = net(m, n, 19, 1).count_params() as f64 / 1e6;
            assert!(
                (got - want).abs() <= 0.03,
                "M={m} N={n}: {got:.4} M vs {want} M"
            );
        }
    }

    #[test]
    fn pointwise_classifier_closed_form() {
        // a lone 1x1 conv 256 -> 19 with bias holds 256*19 + 19 scalars
        let mut store = ParamStore::<f32>::new();
        let mut rng = Pcg32::new(1, 0);
        let spec = crate::ops::ConvSpec::square(256, 19, 1, 1, 0, 1, 1, true);
        layers::Conv2dLayer::new(&mut store, &mut rng, "cls", spec);
        assert_eq!(store.count_learnable(), 256 * 19 + 19);
        assert_eq!(store.count_learnable(), 4883);
    }

    #[test]
    fn param_count_is_pure_in_config() {
        let a = net(3, 9, 19, 1).count_params();
        let b = net(3, 9, 19, 999).count_params();
        assert_eq!(a, b);
    }

    #[test]
    fn param_count_grows_with_depth() {
        for n in 9..12 {
            assert!(net(3, n + 1, 19, 1).count_params() > net(3, n, 19, 1).count_params());
        }
    }

    #[test]
    fn flops_budget_m3n21() {
        let model = net(3, 21, 19, 1);
        let flops = model.estimate_flops(640, 360).unwrap() as f64 / 1e9;
        assert!((flops - 6.0).abs() <= 0.9, "{flops} G");
    }

    #[test]
    fn flops_single_conv_closed_form() {
        // first stage-1 conv alone: 2 * 320*180 * 32 * 3 * 9
        let spec = crate::ops::ConvSpec::square(3, 32, 3, 2, 1, 1, 1, false);
        let (ho, wo) = spec.out_hw(640, 360).unwrap();
        assert_eq!((ho, wo), (320, 180));
        let want: u64 = 2 * 320 * 180 * 32 * 3 * 9;
        assert_eq!(want, 99_532_800);
    }

    #[test]
    fn flops_linear_in_area() {
        let model = net(3, 3, 4, 1);
        let f1 = model.estimate_flops(64, 64).unwrap();
        let f2 = model.estimate_flops(128, 64).unwrap();
        let ratio = f2 as f64 / f1 as f64;
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn full_scale_shapes() {
        let model = net(3, 21, 19, 1);
        let x = Tensor::zeros(&[1, 3, 680, 680]).unwrap();
        let (scores, trace) = model.infer_traced(&x).unwrap();
        assert_eq!(trace.stage1, (340, 340));
        assert_eq!(trace.stage2, (170, 170));
        assert_eq!(trace.stage3, (85, 85));
        assert_eq!(trace.scores_pre_upsample, vec![1, 19, 85, 85]);
        assert_eq!(scores.dims(), &[1, 19, 680, 680]);
    }

    #[test]
    fn small_input_shapes() {
        let model = net(1, 1, 4, 2);
        let x = Tensor::zeros(&[1, 3, 64, 64]).unwrap();
        let y = model.forward_infer(&x).unwrap();
        assert_eq!(y.dims(), &[1, 4, 64, 64]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let model = net(1, 1, 4, 2);
        let x = Tensor::zeros(&[1, 3, 50, 50]).unwrap();
        assert!(model.forward_infer(&x).is_err());
    }

    #[test]
    fn infer_is_pure_and_deterministic() {
        let model = net(1, 2, 4, 3);
        let mut rng = Pcg32::new(5, 1);
        let x = Tensor::rand_normal(&mut rng, &[1, 3, 32, 32], 0.0, 1.0).unwrap();
        let before: u64 = store_digest(model.params());
        let y1 = model.forward_infer(&x).unwrap();
        let y2 = model.forward_infer(&x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(store_digest(model.params()), before);
    }

    fn store_digest(store: &ParamStore<f32>) -> u64 {
        let mut bytes = Vec::new();
        for p in store.iter() {
            bytes.extend_from_slice(p.name.as_bytes());
            for &v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        checkpoint::fnv1a64(&bytes)
    }

    #[test]
    fn train_forward_then_backward_fills_grads() {
        let mut model = net(1, 1, 3, 4);
        let mut rng = Pcg32::new(6, 0);
        let x = Tensor::rand_normal(&mut rng, &[2, 3, 16, 16], 0.0, 1.0).unwrap();
        let scores = model.forward_train(&x).unwrap();
        let go = Tensor::rand_normal(&mut rng, scores.dims(), 0.0, 1.0).unwrap();
        model.backward(&go).unwrap();
        let nonzero = model
            .params()
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .filter(|p| p.grad.data().iter().any(|&v| v != 0.0))
            .count();
        let learnable = model
            .params()
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .count();
        assert_eq!(nonzero, learnable, "every learnable tensor receives gradient");
    }
}
