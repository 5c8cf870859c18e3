//! Numerical verification of every analytic gradient.
//!
//! Each kernel is checked in `f64` against central differences of a
//! scalar objective (a fixed random projection of the kernel output, or
//! the loss itself where one exists). A miniature end-to-end network
//! covering every layer type closes the loop over whole-model training
//! gradients. The suite is deterministic: fixed seeds, fixed shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{
    conv2d, conv2d_backward, dropout, dropout_backward, linear, linear_backward, lrn,
    lrn_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, softmax_xent,
    softmax_xent_backward, ConvParams, LrnParams, PassMode,
};
use crate::net::{self, LayerDef, LayerKind, NetworkSpec, StepRng};
use crate::tensor::Tensor;

/// Relative-error ceiling every check must stay under.
pub const TOLERANCE: f64 = 1e-4;
/// Elements where analytic and numeric gradients are both below this are
/// treated as matching zeros.
pub const BOTH_SMALL: f64 = 1e-8;

/// Result of one gradient comparison.
#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl KernelCheck {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Deliberate defects for exercising the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    None,
    /// Adds 1e-3 to every element of the convolution input gradient.
    ConvInputOffset,
}

/// Central difference of `f` at `x`, one coordinate at a time, with a
/// magnitude-scaled step.
pub fn central_diff<F: FnMut(&Tensor<f64>) -> f64>(mut f: F, x: &Tensor<f64>) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape()).expect("shape is valid");
    for i in 0..x.len() {
        let xi = x.data()[i];
        let eps = 1e-6 * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = xi - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = xi;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Worst elementwise relative error between two gradients, with the
/// matching-zeros exemption.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            if a.abs() < BOTH_SMALL && n.abs() < BOTH_SMALL {
                0.0
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

fn fill_uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("shape is valid")
}

/// Uniform magnitudes in [0.2, 1.2) with random sign: keeps ReLU and
/// maxpool inputs away from their kinks so the difference quotient is
/// taken on a smooth patch.
fn fill_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.2..1.2);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
    .expect("shape is valid")
}

fn project(output: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    output
        .data()
        .iter()
        .zip(r.data())
        .map(|(&o, &w)| o * w)
        .sum()
}

fn check(name: &'static str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> KernelCheck {
    KernelCheck {
        name,
        max_rel_err: max_rel_error(analytic, numeric),
        tolerance: TOLERANCE,
    }
}

fn conv_checks(fault: FaultInjection, out: &mut Vec<KernelCheck>) {
    struct Case {
        names: [&'static str; 3],
        in_channels: usize,
        filters: usize,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    }
    let cases = [
        Case {
            names: ["conv.input", "conv.filters", "conv.bias"],
            in_channels: 2,
            filters: 3,
            stride: (2, 2),
            padding: (1, 1),
            groups: 1,
        },
        Case {
            names: [
                "conv_grouped.input",
                "conv_grouped.filters",
                "conv_grouped.bias",
            ],
            in_channels: 4,
            filters: 4,
            stride: (1, 1),
            padding: (0, 0),
            groups: 2,
        },
    ];
    for case in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = fill_uniform(&mut rng, &[2, 6, 6, case.in_channels], -1.0, 1.0);
        let params = ConvParams {
            filters: fill_uniform(
                &mut rng,
                &[case.filters, 3, 3, case.in_channels / case.groups],
                -0.7,
                0.7,
            ),
            bias: fill_uniform(&mut rng, &[case.filters], -0.3, 0.3),
            stride: case.stride,
            padding: case.padding,
            groups: case.groups,
        };
        let y = conv2d(&x, &params).expect("case is well formed");
        let r = fill_uniform(&mut rng, y.shape(), -1.0, 1.0);
        let grads = conv2d_backward(&x, &params, &r).expect("case is well formed");

        let mut dinput = grads.input;
        if fault == FaultInjection::ConvInputOffset {
            dinput = dinput.map(|g| g + 1e-3);
        }
        let fd_input = central_diff(
            |x2| project(&conv2d(x2, &params).unwrap(), &r),
            &x,
        );
        out.push(check(case.names[0], &dinput, &fd_input));

        let fd_filters = central_diff(
            |f2| {
                let p = ConvParams {
                    filters: f2.clone(),
                    ..params.clone()
                };
                project(&conv2d(&x, &p).unwrap(), &r)
            },
            &params.filters,
        );
        out.push(check(case.names[1], &grads.filters, &fd_filters));

        let fd_bias = central_diff(
            |b2| {
                let p = ConvParams {
                    bias: b2.clone(),
                    ..params.clone()
                };
                project(&conv2d(&x, &p).unwrap(), &r)
            },
            &params.bias,
        );
        out.push(check(case.names[2], &grads.bias, &fd_bias));
    }
}

/// Miniature network touching every layer kind; small enough to
/// difference every parameter.
pub fn mini_network_spec() -> NetworkSpec {
    use LayerKind::*;
    NetworkSpec {
        name: "mini".into(),
        input_shape: [8, 8, 2],
        class_count: 3,
        layers: vec![
            LayerDef {
                name: "conv1".into(),
                kind: Conv {
                    out_channels: 3,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (0, 0),
                    groups: 1,
                },
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "relu1".into(),
                kind: Relu,
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "norm1".into(),
                kind: Lrn(LrnParams::default()),
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "pool1".into(),
                kind: MaxPool {
                    kernel: (2, 2),
                    stride: (2, 2),
                },
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "conv2".into(),
                kind: Conv {
                    out_channels: 4,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (0, 0),
                    groups: 1,
                },
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "relu2".into(),
                kind: Relu,
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "flatten".into(),
                kind: Flatten,
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "drop1".into(),
                kind: Dropout { keep_prob: 0.5 },
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "fc1".into(),
                kind: Linear { out_features: 3 },
                lr_multiplier: 1.0,
            },
            LayerDef {
                name: "softmax".into(),
                kind: Softmax,
                lr_multiplier: 1.0,
            },
        ],
    }
}

fn end_to_end_check(out: &mut Vec<KernelCheck>) {
    let spec = mini_network_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let batch = fill_off_kink(&mut rng, &[2, 8, 8, 2]);
    let labels = [0usize, 2];
    let srng = StepRng { seed: 13, step: 0 };
    let params = spec.init_params::<f64>(29).expect("mini spec is valid");

    let (_, analytic) =
        net::loss_and_grads(&spec, &params, &batch, &labels, srng).expect("mini spec runs");

    let mut worst = 0f64;
    for (name, tensor) in &params {
        let fd = central_diff(
            |t2| {
                let mut p2 = params.clone();
                p2.insert(name.clone(), t2.clone());
                net::batch_loss(&spec, &p2, &batch, &labels, PassMode::Train, srng)
                    .expect("mini spec runs")
            },
            tensor,
        );
        worst = worst.max(max_rel_error(&analytic[name], &fd));
    }
    out.push(KernelCheck {
        name: "net.params",
        max_rel_err: worst,
        tolerance: TOLERANCE,
    });
}

/// Runs every gradient check and returns the per-check results.
pub fn run_kernel_suite(fault: FaultInjection) -> Vec<KernelCheck> {
    let mut out = Vec::new();

    conv_checks(fault, &mut out);

    // Overlapping 3x3/stride-2 pooling, inputs off the tie hyperplanes.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = fill_off_kink(&mut rng, &[2, 7, 7, 3]);
        let y = maxpool2d(&x, (3, 3), (2, 2)).unwrap();
        let r = fill_uniform(&mut rng, y.shape(), -1.0, 1.0);
        let analytic = maxpool2d_backward(&x, (3, 3), (2, 2), &r).unwrap();
        let fd = central_diff(
            |x2| project(&maxpool2d(x2, (3, 3), (2, 2)).unwrap(), &r),
            &x,
        );
        out.push(check("maxpool.input", &analytic, &fd));
    }

    {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x = fill_off_kink(&mut rng, &[2, 3, 3, 4]);
        let r = fill_uniform(&mut rng, x.shape(), -1.0, 1.0);
        let analytic = relu_backward(&x, &r).unwrap();
        let fd = central_diff(|x2| project(&relu(x2), &r), &x);
        out.push(check("relu.input", &analytic, &fd));
    }

    {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let p = LrnParams::default();
        let x = fill_uniform(&mut rng, &[2, 3, 3, 7], -1.0, 1.0);
        let y = lrn(&x, &p).unwrap();
        let r = fill_uniform(&mut rng, y.shape(), -1.0, 1.0);
        let analytic = lrn_backward(&x, &p, &r).unwrap();
        let fd = central_diff(|x2| project(&lrn(x2, &p).unwrap(), &r), &x);
        out.push(check("lrn.input", &analytic, &fd));
    }

    {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let x = fill_uniform(&mut rng, &[3, 5], -1.0, 1.0);
        let w = fill_uniform(&mut rng, &[5, 4], -0.7, 0.7);
        let b = fill_uniform(&mut rng, &[4], -0.3, 0.3);
        let y = linear(&x, &w, &b).unwrap();
        let r = fill_uniform(&mut rng, y.shape(), -1.0, 1.0);
        let grads = linear_backward(&x, &w, &b, &r).unwrap();
        let fd_x = central_diff(|x2| project(&linear(x2, &w, &b).unwrap(), &r), &x);
        out.push(check("linear.input", &grads.input, &fd_x));
        let fd_w = central_diff(|w2| project(&linear(&x, w2, &b).unwrap(), &r), &w);
        out.push(check("linear.weights", &grads.weights, &fd_w));
        let fd_b = central_diff(|b2| project(&linear(&x, &w, b2).unwrap(), &r), &b);
        out.push(check("linear.bias", &grads.bias, &fd_b));
    }

    // Dropout with the mask pinned by a fixed stream; each evaluation
    // rebuilds the identical mask, so the objective is differentiable.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let x = fill_uniform(&mut rng, &[2, 3, 3, 2], -1.0, 1.0);
        let fixed = |x2: &Tensor<f64>| {
            let mut stream = ChaCha8Rng::seed_from_u64(99);
            dropout(x2, 0.6, PassMode::Train, &mut stream).unwrap()
        };
        let (y, mask) = fixed(&x);
        let r = fill_uniform(&mut rng, y.shape(), -1.0, 1.0);
        let analytic = dropout_backward(&r, &mask).unwrap();
        let fd = central_diff(|x2| project(&fixed(x2).0, &r), &x);
        out.push(check("dropout.input", &analytic, &fd));
    }

    {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let logits = fill_uniform(&mut rng, &[3, 5], -2.0, 2.0);
        let labels = [1usize, 0, 4];
        let (probs, _) = softmax_xent(&logits, &labels).unwrap();
        let analytic = softmax_xent_backward(&probs, &labels).unwrap();
        let fd = central_diff(
            |l2| softmax_xent(l2, &labels).unwrap().1,
            &logits,
        );
        out.push(check("softmax_xent.logits", &analytic, &fd));
    }

    end_to_end_check(&mut out);

    out
}

pub fn suite_passes(checks: &[KernelCheck]) -> bool {
    checks.iter().all(KernelCheck::pass)
}
