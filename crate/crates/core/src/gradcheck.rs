//! Central-difference gradient oracle for the differentiable ops.
//!
//! Every op is reduced to a scalar objective: losses are scalar already, and
//! tensor-valued ops are contracted against a fixed random upstream tensor
//! `r`, so `f(x) = Σ r · op(x)` and the analytic gradient is `op.backward(r)`.
//! Everything runs at f64.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, IGNORE};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

type T64 = Tensor<f64>;
type Objective = Box<dyn Fn(&[T64]) -> Result<f64>>;
type Analytic = Box<dyn Fn(&[T64]) -> Result<Vec<T64>>>;

/// One randomized configuration of an op under test.
pub struct Case {
    pub description: String,
    pub inputs: Vec<T64>,
    /// Indices into `inputs` that are differentiated, in the order the
    /// analytic closure returns their gradients.
    pub wrt: Vec<usize>,
    f: Objective,
    grad: Analytic,
    /// Elements of `inputs[wrt[j]]` skipped by the comparison (kinks).
    skip: Vec<Vec<bool>>,
}

impl Case {
    pub fn new(
        description: impl Into<String>,
        inputs: Vec<T64>,
        wrt: Vec<usize>,
        f: impl Fn(&[T64]) -> Result<f64> + 'static,
        grad: impl Fn(&[T64]) -> Result<Vec<T64>> + 'static,
    ) -> Self {
        let skip = wrt.iter().map(|&i| vec![false; inputs[i].len()]).collect();
        Case {
            description: description.into(),
            inputs,
            wrt,
            f: Box::new(f),
            grad: Box::new(grad),
            skip,
        }
    }

    /// Excludes elements of the `j`-th differentiated input where `pred` holds.
    pub fn exclude(mut self, j: usize, pred: impl Fn(f64) -> bool) -> Self {
        let data = self.inputs[self.wrt[j]].data();
        self.skip[j] = data.iter().map(|&v| pred(v)).collect();
        self
    }
}

/// Max relative error `|a − n| / max(|a|, |n|, 1e-8)` between the analytic
/// gradient `a` and the central difference `n` over all non-excluded elements.
pub fn grad_check(case: &Case, eps: f64) -> Result<f64> {
    let analytic = (case.grad)(&case.inputs)?;
    if analytic.len() != case.wrt.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: {} analytic gradients for {} inputs",
            case.description,
            analytic.len(),
            case.wrt.len()
        )));
    }
    let mut inputs = case.inputs.clone();
    let mut worst = 0.0f64;
    for (j, &idx) in case.wrt.iter().enumerate() {
        if analytic[j].shape() != inputs[idx].shape() {
            return Err(Error::shape(
                "grad_check",
                format!("gradient {:?} vs input {:?}", analytic[j].shape(), inputs[idx].shape()),
            ));
        }
        for e in 0..inputs[idx].len() {
            if case.skip[j][e] {
                continue;
            }
            let x0 = inputs[idx].data()[e];
            inputs[idx].data_mut()[e] = x0 + eps;
            let hi = (case.f)(&inputs)?;
            inputs[idx].data_mut()[e] = x0 - eps;
            let lo = (case.f)(&inputs)?;
            inputs[idx].data_mut()[e] = x0;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic[j].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// The ops covered by the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedOp {
    Conv2d,
    Relu,
    UpsampleNearest,
    SoftmaxCe,
    MaskedMse,
    /// Test double: a 1×1 conv whose reported weight gradient is off by 1%.
    /// Not part of [`CheckedOp::ALL`].
    FaultyConv,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 5] = [
        CheckedOp::Conv2d,
        CheckedOp::Relu,
        CheckedOp::UpsampleNearest,
        CheckedOp::SoftmaxCe,
        CheckedOp::MaskedMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::Conv2d => "conv2d",
            CheckedOp::Relu => "relu",
            CheckedOp::UpsampleNearest => "upsample_nearest",
            CheckedOp::SoftmaxCe => "softmax_ce",
            CheckedOp::MaskedMse => "masked_mse",
            CheckedOp::FaultyConv => "faulty_conv",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .chain([CheckedOp::FaultyConv])
            .find(|op| op.name() == name)
    }

    /// Draws one random small configuration.
    pub fn sample(self, rng: &mut impl Rng) -> Case {
        match self {
            CheckedOp::Conv2d => conv_case(rng),
            CheckedOp::Relu => relu_case(rng),
            CheckedOp::UpsampleNearest => upsample_case(rng),
            CheckedOp::SoftmaxCe => softmax_ce_case(rng),
            CheckedOp::MaskedMse => masked_mse_case(rng),
            CheckedOp::FaultyConv => faulty_case(rng),
        }
    }
}

impl fmt::Display for CheckedOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: CheckedOp,
    pub trials: usize,
    pub max_error: f64,
    /// Description of the configuration that produced `max_error`.
    pub worst_case: String,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

/// Runs `trials` random configurations of `op`, seeded deterministically.
pub fn check_op(op: CheckedOp, trials: usize, seed: u64, eps: f64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport {
        op,
        trials,
        max_error: 0.0,
        worst_case: String::new(),
    };
    for _ in 0..trials {
        let case = op.sample(&mut rng);
        let err = grad_check(&case, eps)?;
        if err >= report.max_error {
            report.max_error = err;
            report.worst_case = case.description;
        }
    }
    Ok(report)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn dot(a: &T64, b: &T64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_case(rng: &mut impl Rng) -> Case {
    let n = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let h = rng.random_range(k.max(2)..=7);
    let w = rng.random_range(k.max(2)..=7);
    let has_bias = rng.random_bool(0.5);
    let x = uniform(rng, &[n, cin, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let r = uniform(rng, &[n, cout, ho, wo], -1.0, 1.0);
    let r2 = r.clone();
    let mut wrt = vec![0, 1];
    if has_bias {
        wrt.push(2);
    }
    Case::new(
        format!("conv2d x[{n},{cin},{h},{w}] w[{cout},{cin},{k},{k}] s{stride} p{pad} bias={has_bias}"),
        vec![x, wt, b],
        wrt,
        move |v| {
            let y = ops::conv2d(&v[0], &v[1], has_bias.then_some(&v[2]), stride, pad)?;
            Ok(dot(&y, &r))
        },
        move |v| {
            let g = ops::conv2d_backward(&v[0], &v[1], has_bias, stride, pad, &r2, true)?;
            let mut out = vec![g.input.expect("input grad requested"), g.weight];
            out.extend(g.bias);
            Ok(out)
        },
    )
}

fn relu_case(rng: &mut impl Rng) -> Case {
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    ];
    let x = uniform(rng, &shape, -1.0, 1.0);
    let r = uniform(rng, &shape, -1.0, 1.0);
    let r2 = r.clone();
    Case::new(
        format!("relu {shape:?}"),
        vec![x],
        vec![0],
        move |v| Ok(dot(&ops::relu(&v[0]), &r)),
        move |v| Ok(vec![ops::relu_backward(&v[0], &r2)]),
    )
    .exclude(0, |x| x.abs() <= DEFAULT_EPS)
}

fn upsample_case(rng: &mut impl Rng) -> Case {
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    ];
    let f = rng.random_range(1..=3);
    let x = uniform(rng, &shape, -1.0, 1.0);
    let r = uniform(rng, &[shape[0], shape[1], shape[2] * f, shape[3] * f], -1.0, 1.0);
    let r2 = r.clone();
    Case::new(
        format!("upsample_nearest {shape:?} x{f}"),
        vec![x],
        vec![0],
        move |v| Ok(dot(&ops::upsample_nearest(&v[0], f)?, &r)),
        move |_| Ok(vec![ops::upsample_nearest_backward(&r2, f)?]),
    )
}

fn softmax_ce_case(rng: &mut impl Rng) -> Case {
    let (n, c, h, w) = (
        rng.random_range(1..=2),
        rng.random_range(2..=4),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    );
    let logits = uniform(rng, &[n, c, h, w], -2.0, 2.0);
    let labels: Vec<u8> = (0..n * h * w)
        .map(|_| {
            if rng.random_bool(0.2) {
                IGNORE
            } else {
                rng.random_range(0..c) as u8
            }
        })
        .collect();
    let l2 = labels.clone();
    Case::new(
        format!("softmax_ce [{n},{c},{h},{w}]"),
        vec![logits],
        vec![0],
        move |v| Ok(ops::softmax_ce(&v[0], &labels)?.loss),
        move |v| Ok(vec![ops::softmax_ce(&v[0], &l2)?.grad]),
    )
}

fn masked_mse_case(rng: &mut impl Rng) -> Case {
    let (n, c, h, w) = (
        rng.random_range(1..=2),
        3,
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    );
    let pred = uniform(rng, &[n, c, h, w], -1.0, 1.0);
    let target = uniform(rng, &[n, c, h, w], 0.0, 1.0);
    let mask = Tensor::from_fn([n, 1, h, w], |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
    Case::new(
        format!("masked_mse [{n},{c},{h},{w}]"),
        vec![pred, target, mask],
        vec![0],
        |v| Ok(ops::masked_mse(&v[0], &v[1], &v[2])?.loss),
        |v| Ok(vec![ops::masked_mse(&v[0], &v[1], &v[2])?.grad]),
    )
}

fn faulty_case(rng: &mut impl Rng) -> Case {
    let x = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
    let wt = uniform(rng, &[2, 2, 1, 1], -1.0, 1.0);
    let r = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
    let r2 = r.clone();
    Case::new(
        "faulty_conv [1,2,3,3]",
        vec![x, wt],
        vec![1],
        move |v| Ok(dot(&ops::conv2d(&v[0], &v[1], None, 1, 0)?, &r)),
        move |v| {
            let g = ops::conv2d_backward(&v[0], &v[1], false, 1, 0, &r2, false)?;
            Ok(vec![g.weight.map(|v| v * 1.01)])
        },
    )
}
