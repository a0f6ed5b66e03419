//! Finite-difference verification of every backward kernel and of the whole
//! network at micro scale, in f64.
//!
//! Central differences use `h = 1e-5 * max(1, |theta|)`; errors are relative
//! with denominator `max(1, |analytic| + |numeric|)`.

use crate::error::Result;
use crate::model::{ActKind, Network, NetworkConfig, ParamKind};
use crate::ops;
use crate::ops::{ConvSpec, LossReduction};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, analytic.abs() + numeric.abs())
}

/// Central-difference gradient of `eval` with respect to `values`.
pub fn central_diff(values: &Tensor<f64>, mut eval: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut grads = vec![0.0; values.len()];
    for (i, slot) in grads.iter_mut().enumerate() {
        let theta = values.data()[i];
        let h = 1e-5 * theta.abs().max(1.0);
        let mut probe = values.clone();
        probe.data_mut()[i] = theta + h;
        let up = eval(&probe);
        probe.data_mut()[i] = theta - h;
        let down = eval(&probe);
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::from_vec(values.dims(), grads).expect("dims")
}

pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {:>12.3e} (tol {:.0e}) {}\n",
                if e.passed() { "ok  " } else { "FAIL" },
                e.max_rel_err,
                e.tolerance,
                e.name
            ));
        }
        out.push_str(&format!(
            "{} of {} checks passed\n",
            self.entries.iter().filter(|e| e.passed()).count(),
            self.entries.len()
        ));
        out
    }

    fn push(&mut self, name: impl Into<String>, err: f64, tol: f64) {
        self.entries.push(CheckEntry {
            name: name.into(),
            max_rel_err: err,
            tolerance: tol,
        });
    }
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum()
}

fn check_conv(report: &mut GradCheckReport, label: &str, spec: ConvSpec, tol: f64) {
    let mut rng = Pcg32::new(0x5eed, 1);
    let x = Tensor::<f64>::rand_normal(&mut rng, &[2, spec.in_channels, 6, 6], 0.0, 1.0).unwrap();
    let w = Tensor::<f64>::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 0.7).unwrap();
    let b = spec
        .has_bias
        .then(|| Tensor::<f64>::rand_normal(&mut rng, &[spec.out_channels], 0.0, 0.5).unwrap());
    let y = ops::conv2d_forward(&x, &w, b.as_ref(), &spec).unwrap();
    let r = Tensor::<f64>::rand_normal(&mut rng, y.dims(), 0.0, 1.0).unwrap();

    let (gx, gw, gb) = ops::conv2d_backward(&r, &x, &w, &spec).unwrap();
    let fx = |xx: &Tensor<f64>| inner(&ops::conv2d_forward(xx, &w, b.as_ref(), &spec).unwrap(), &r);
    report.push(format!("{label}/grad_x"), max_rel_err(&gx, &central_diff(&x, fx)), tol);
    let fw = |ww: &Tensor<f64>| inner(&ops::conv2d_forward(&x, ww, b.as_ref(), &spec).unwrap(), &r);
    report.push(format!("{label}/grad_w"), max_rel_err(&gw, &central_diff(&w, fw)), tol);
    if let (Some(bias), Some(gb)) = (b.as_ref(), gb) {
        let fb = |bb: &Tensor<f64>| inner(&ops::conv2d_forward(&x, &w, Some(bb), &spec).unwrap(), &r);
        report.push(format!("{label}/grad_b"), max_rel_err(&gb, &central_diff(bias, fb)), tol);
    }
}

/// Per-kernel finite-difference checks covering stride 2, dilations 1/2/4,
/// channel-wise grouping and padding >= 1.
pub fn check_kernels(tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport::default();

    check_conv(&mut report, "conv3x3", ConvSpec::square(3, 4, 3, 1, 1, 1, 1, true), tol);
    check_conv(&mut report, "conv3x3_s2", ConvSpec::square(3, 4, 3, 2, 1, 1, 1, false), tol);
    check_conv(&mut report, "conv3x3_d2_cw", ConvSpec::square(4, 4, 3, 1, 2, 2, 4, false), tol);
    check_conv(&mut report, "conv3x3_d4_cw", ConvSpec::square(6, 6, 3, 1, 4, 4, 6, false), tol);
    check_conv(&mut report, "conv3x3_g2", ConvSpec::square(4, 6, 3, 2, 1, 1, 2, true), tol);
    check_conv(&mut report, "conv1x1", ConvSpec::square(5, 3, 1, 1, 0, 1, 1, true), tol);

    // batchnorm, train mode
    {
        let mut rng = Pcg32::new(0xb0, 2);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[3, 4, 5, 5], 0.0, 1.5).unwrap();
        let gamma = Tensor::<f64>::rand_normal(&mut rng, &[4], 1.0, 0.3).unwrap();
        let beta = Tensor::<f64>::rand_normal(&mut rng, &[4], 0.0, 0.3).unwrap();
        let eps = 1e-5;
        let fwd = |xx: &Tensor<f64>, gg: &Tensor<f64>, bb: &Tensor<f64>| {
            let mut rm = Tensor::zeros(&[4]).unwrap();
            let mut rv = Tensor::full(&[4], 1.0).unwrap();
            ops::batchnorm_forward_train(xx, gg, bb, &mut rm, &mut rv, eps, 0.1)
                .unwrap()
                .0
        };
        let y = fwd(&x, &gamma, &beta);
        let mut rng2 = Pcg32::new(0xb1, 0);
        let r = Tensor::<f64>::rand_normal(&mut rng2, y.dims(), 0.0, 1.0).unwrap();
        let cache = {
            let mut rm = Tensor::zeros(&[4]).unwrap();
            let mut rv = Tensor::full(&[4], 1.0).unwrap();
            ops::batchnorm_forward_train(&x, &gamma, &beta, &mut rm, &mut rv, eps, 0.1)
                .unwrap()
                .1
        };
        let (gx, gg, gb) = ops::batchnorm_backward(&r, &x, &gamma, &cache, eps).unwrap();
        report.push(
            "batchnorm/grad_x",
            max_rel_err(&gx, &central_diff(&x, |xx| inner(&fwd(xx, &gamma, &beta), &r))),
            tol,
        );
        report.push(
            "batchnorm/grad_gamma",
            max_rel_err(&gg, &central_diff(&gamma, |g| inner(&fwd(&x, g, &beta), &r))),
            tol,
        );
        report.push(
            "batchnorm/grad_beta",
            max_rel_err(&gb, &central_diff(&beta, |b| inner(&fwd(&x, &gamma, b), &r))),
            tol,
        );
    }

    // prelu
    {
        let mut rng = Pcg32::new(0xab, 3);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[2, 3, 4, 4], 0.0, 1.0).unwrap();
        let slope = Tensor::<f64>::rand_normal(&mut rng, &[3], 0.25, 0.1).unwrap();
        let y = ops::prelu_forward(&x, &slope).unwrap();
        let r = Tensor::<f64>::rand_normal(&mut rng, y.dims(), 0.0, 1.0).unwrap();
        let (gx, ga) = ops::prelu_backward(&r, &x, &slope).unwrap();
        report.push(
            "prelu/grad_x",
            max_rel_err(&gx, &central_diff(&x, |xx| inner(&ops::prelu_forward(xx, &slope).unwrap(), &r))),
            tol,
        );
        report.push(
            "prelu/grad_slope",
            max_rel_err(&ga, &central_diff(&slope, |a| inner(&ops::prelu_forward(&x, a).unwrap(), &r))),
            tol,
        );
    }

    // relu: parameter-free, so only the input gradient exists
    {
        let mut rng = Pcg32::new(0xac, 4);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[2, 2, 4, 4], 0.0, 1.0).unwrap();
        let r = Tensor::<f64>::rand_normal(&mut rng, x.dims(), 0.0, 1.0).unwrap();
        let gx = ops::relu_backward(&r, &x).unwrap();
        report.push(
            "relu/grad_x",
            max_rel_err(&gx, &central_diff(&x, |xx| inner(&ops::relu_forward(xx), &r))),
            tol,
        );
    }

    // sigmoid
    {
        let mut rng = Pcg32::new(0xad, 5);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[2, 3, 3, 3], 0.0, 2.0).unwrap();
        let y = ops::sigmoid_forward(&x);
        let r = Tensor::<f64>::rand_normal(&mut rng, x.dims(), 0.0, 1.0).unwrap();
        let gx = ops::sigmoid_backward(&r, &y).unwrap();
        report.push(
            "sigmoid/grad_x",
            max_rel_err(&gx, &central_diff(&x, |xx| inner(&ops::sigmoid_forward(xx), &r))),
            tol,
        );
    }

    // affine
    {
        let mut rng = Pcg32::new(0xae, 6);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[3, 5], 0.0, 1.0).unwrap();
        let w = Tensor::<f64>::rand_normal(&mut rng, &[4, 5], 0.0, 1.0).unwrap();
        let b = Tensor::<f64>::rand_normal(&mut rng, &[4], 0.0, 1.0).unwrap();
        let y = ops::affine_forward(&x, &w, &b).unwrap();
        let r = Tensor::<f64>::rand_normal(&mut rng, y.dims(), 0.0, 1.0).unwrap();
        let (gx, gw, gb) = ops::affine_backward(&r, &x, &w).unwrap();
        report.push(
            "affine/grad_x",
            max_rel_err(&gx, &central_diff(&x, |xx| inner(&ops::affine_forward(xx, &w, &b).unwrap(), &r))),
            tol,
        );
        report.push(
            "affine/grad_w",
            max_rel_err(&gw, &central_diff(&w, |ww| inner(&ops::affine_forward(&x, ww, &b).unwrap(), &r))),
            tol,
        );
        report.push(
            "affine/grad_b",
            max_rel_err(&gb, &central_diff(&b, |bb| inner(&ops::affine_forward(&x, &w, bb).unwrap(), &r))),
            tol,
        );
    }

    // pooling
    {
        let mut rng = Pcg32::new(0xaf, 7);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[2, 3, 4, 4], 0.0, 1.0).unwrap();
        let y = ops::global_avg_pool_forward(&x).unwrap();
        let r = Tensor::<f64>::rand_normal(&mut rng, y.dims(), 0.0, 1.0).unwrap();
        let gx = ops::global_avg_pool_backward(&r, 4, 4).unwrap();
        report.push(
            "global_avg_pool/grad_x",
            max_rel_err(
                &gx,
                &central_diff(&x, |xx| inner(&ops::global_avg_pool_forward(xx).unwrap(), &r)),
            ),
            tol,
        );

        let x2 = Tensor::<f64>::rand_normal(&mut rng, &[1, 2, 5, 7], 0.0, 1.0).unwrap();
        let y2 = ops::avg_pool3x3s2_forward(&x2).unwrap();
        let r2 = Tensor::<f64>::rand_normal(&mut rng, y2.dims(), 0.0, 1.0).unwrap();
        let gx2 = ops::avg_pool3x3s2_backward(&r2, 5, 7).unwrap();
        report.push(
            "avg_pool3x3s2/grad_x",
            max_rel_err(
                &gx2,
                &central_diff(&x2, |xx| inner(&ops::avg_pool3x3s2_forward(xx).unwrap(), &r2)),
            ),
            tol,
        );
    }

    // bilinear upsample
    {
        let mut rng = Pcg32::new(0xb2, 8);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 2, 3, 4], 0.0, 1.0).unwrap();
        let y = ops::bilinear_upsample_forward(&x, 4).unwrap();
        let r = Tensor::<f64>::rand_normal(&mut rng, y.dims(), 0.0, 1.0).unwrap();
        let gx = ops::bilinear_upsample_backward(&r, 4, 3, 4).unwrap();
        report.push(
            "bilinear_upsample/grad_x",
            max_rel_err(
                &gx,
                &central_diff(&x, |xx| inner(&ops::bilinear_upsample_forward(xx, 4).unwrap(), &r)),
            ),
            tol,
        );
    }

    // per-channel scaling
    {
        let mut rng = Pcg32::new(0xb3, 9);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[2, 3, 4, 4], 0.0, 1.0).unwrap();
        let g = Tensor::<f64>::rand_normal(&mut rng, &[2, 3], 0.5, 0.3).unwrap();
        let r = Tensor::<f64>::rand_normal(&mut rng, x.dims(), 0.0, 1.0).unwrap();
        let (gx, gg) = ops::scale_channels_backward(&r, &x, &g).unwrap();
        report.push(
            "scale_channels/grad_x",
            max_rel_err(&gx, &central_diff(&x, |xx| inner(&xx.scale_channels(&g).unwrap(), &r))),
            tol,
        );
        report.push(
            "scale_channels/grad_gate",
            max_rel_err(&gg, &central_diff(&g, |gg2| inner(&x.scale_channels(gg2).unwrap(), &r))),
            tol,
        );
    }

    // masked cross-entropy: the loss is its own objective
    {
        let mut rng = Pcg32::new(0xb4, 10);
        let scores = Tensor::<f64>::rand_normal(&mut rng, &[2, 4, 3, 3], 0.0, 2.0).unwrap();
        let labels: Vec<u8> = (0..18)
            .map(|_| {
                if rng.below(6) == 0 {
                    255
                } else {
                    rng.below(4) as u8
                }
            })
            .collect();
        let (_, grad) = ops::softmax_ce_masked(&scores, &labels, 255, LossReduction::Mean).unwrap();
        let numeric = central_diff(&scores, |s| {
            ops::softmax_ce_masked(s, &labels, 255, LossReduction::Mean).unwrap().0
        });
        report.push("softmax_ce_masked/grad_scores", max_rel_err(&grad, &numeric), tol);
    }

    report
}

/// The micro configuration used for the end-to-end model check:
/// one block per stage, stage widths 8/8/16, three classes.
pub fn micro_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        blocks_stage2: 1,
        blocks_stage3: 1,
        stage_channels: [8, 8, 16],
        dilations: [2, 4],
        glo_reduction: 4,
        activation: ActKind::Prelu,
        ..Default::default()
    }
}

/// End-to-end check: every parameter gradient of the micro network against
/// central differences of the train-mode loss.
pub fn check_model(tol: f64) -> Result<GradCheckReport> {
    let mut rng = Pcg32::new(0x31337, 0);
    let mut net = Network::<f64>::build(micro_config(), &mut rng)?;
    let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 3, 16, 16], 0.0, 1.0)?;
    let labels: Vec<u8> = (0..256)
        .map(|_| {
            if rng.below(8) == 0 {
                255
            } else {
                rng.below(3) as u8
            }
        })
        .collect();

    let loss_of = |net: &mut Network<f64>| -> f64 {
        let scores = net.forward_train(&x).expect("forward");
        ops::softmax_ce_masked(&scores, &labels, 255, LossReduction::Mean)
            .expect("loss")
            .0
    };

    // analytic gradients
    let scores = net.forward_train(&x)?;
    let (_, grad) = ops::softmax_ce_masked(&scores, &labels, 255, LossReduction::Mean)?;
    net.backward(&grad)?;

    let names_and_grads: Vec<(String, Tensor<f64>)> = net
        .params()
        .iter()
        .filter(|p| p.kind != ParamKind::Buffer)
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    // Each parameter tensor is probed independently against its own clone of
    // the network, so the entries can be checked in parallel.
    let check_entry = |name: &str, analytic: &Tensor<f64>| -> CheckEntry {
        let mut probe = net.clone();
        let id = probe.params().lookup(name).expect("name");
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let theta = probe.params().get(id).value.data()[i];
            let h = 1e-5 * theta.abs().max(1.0);
            probe.params_mut().get_mut(id).value.data_mut()[i] = theta + h;
            let up = loss_of(&mut probe);
            probe.params_mut().get_mut(id).value.data_mut()[i] = theta - h;
            let down = loss_of(&mut probe);
            probe.params_mut().get_mut(id).value.data_mut()[i] = theta;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
        CheckEntry {
            name: name.to_string(),
            max_rel_err: worst,
            tolerance: tol,
        }
    };

    #[cfg(feature = "parallel")]
    let entries: Vec<CheckEntry> = {
        use rayon::prelude::*;
        names_and_grads
            .par_iter()
            .map(|(name, analytic)| check_entry(name, analytic))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let entries: Vec<CheckEntry> = names_and_grads
        .iter()
        .map(|(name, analytic)| check_entry(name, analytic))
        .collect();

    Ok(GradCheckReport { entries })
}

/// Kernel suite at `kernel_tol` plus the micro-model check at `model_tol`.
pub fn run_gradcheck(kernel_tol: f64, model_tol: f64) -> Result<GradCheckReport> {
    let mut report = check_kernels(kernel_tol);
    let model = check_model(model_tol)?;
    report.entries.extend(model.entries);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_suite_passes_at_1e4() {
        let report = check_kernels(1e-4);
        assert!(report.passed(), "\n{}", report.to_text());
    }

    #[test]
    fn relu_check_reports_no_parameter_entries() {
        let report = check_kernels(1e-4);
        let relu_entries: Vec<_> = report
            .entries
            .iter()
            .filter(|e| e.name.starts_with("relu/"))
            .collect();
        assert_eq!(relu_entries.len(), 1);
        assert_eq!(relu_entries[0].name, "relu/grad_x");
    }
}
