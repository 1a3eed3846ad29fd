//! Central finite-difference checks of the analytic gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::operator::{nlroi_backward, nlroi_forward, NlRoiConfig, NlRoiParams};
use crate::ops;
use crate::prng::Prng;
use crate::tensor::{exact_sum, Tensor};

/// Step used throughout the crate's own checks.
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences `(L(x + εe_k) − L(x − εe_k)) / 2ε` for every coordinate `k`.
pub fn finite_diff<F>(loss: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    probe_coordinates(x, step, |plus, minus| {
        let (lp, lm) = (loss(plus)?, loss(minus)?);
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::Numerical(
                "loss is not finite at a probe point".into(),
            ));
        }
        Ok(lp - lm)
    })
}

/// Central differences of the projected loss `L(x) = Σ R ⊙ f(x)`.
///
/// `L(x + εe_k) − L(x − εe_k)` is evaluated as the exactly summed projection of
/// the output difference, so outputs a probe leaves untouched contribute
/// nothing and the large constant part of `L` never enters the subtraction.
pub fn finite_diff_projected<F>(f: F, projection: &Tensor, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    probe_coordinates(x, step, |plus, minus| {
        let (op, om) = (f(plus)?, f(minus)?);
        op.expect_shape(projection.shape(), "projected finite difference")?;
        om.expect_shape(projection.shape(), "projected finite difference")?;
        let delta = exact_sum(
            op.data()
                .iter()
                .zip(om.data())
                .zip(projection.data())
                .map(|((a, b), r)| r * (a - b)),
        );
        if !delta.is_finite() {
            return Err(Error::Numerical(
                "output is not finite at a probe point".into(),
            ));
        }
        Ok(delta)
    })
}

/// Runs `diff(x + εe_k, x − εe_k)` for every `k` and divides by the exactly
/// representable distance between the two probe points.
fn probe_coordinates<D>(x: &Tensor, step: f64, diff: D) -> Result<Tensor>
where
    D: Fn(&Tensor, &Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Numerical(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut plus = x.clone();
    let mut minus = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let orig = x.data()[k];
        let (hi, lo) = (orig + step, orig - step);
        plus.data_mut()[k] = hi;
        minus.data_mut()[k] = lo;
        let delta = diff(&plus, &minus).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("coordinate {k}: {msg}")),
            other => other,
        })?;
        grad.data_mut()[k] = delta / (hi - lo);
        plus.data_mut()[k] = orig;
        minus.data_mut()[k] = orig;
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl TensorCheck {
    pub fn compare(name: impl Into<String>, analytic: &Tensor, numeric: &Tensor) -> Result<Self> {
        analytic.expect_shape(numeric.shape(), "gradient comparison")?;
        let mut check = TensorCheck {
            name: name.into(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: analytic.data().first().copied().unwrap_or(0.0),
            numeric: numeric.data().first().copied().unwrap_or(0.0),
        };
        for (k, (&a, &b)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = relative_error(a, b);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = b;
            }
        }
        Ok(check)
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
    pub step: f64,
    /// Random weights `R` of the probe loss `L = Σ R ⊙ output`.
    pub projection: Tensor,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    /// `GRADCHECK pass=<bool> max_rel_err=<float>`
    pub fn summary_line(&self) -> String {
        format!(
            "GRADCHECK pass={} max_rel_err={:e}",
            self.passed(),
            self.max_rel_err()
        )
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>13} {:>7} {:>14} {:>14}  status",
            "tensor", "max_rel_err", "index", "analytic", "numeric"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<10} {:>13.3e} {:>7} {:>14.6e} {:>14.6e}  {}",
                c.name,
                c.max_rel_err,
                c.worst_index,
                c.analytic,
                c.numeric,
                if c.max_rel_err < self.tolerance {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        write!(f, "{}", self.summary_line())
    }
}

fn random_tensor(shape: &[usize], rng: &mut Prng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Random blob of `n` RoIs and random parameters for `config`, drawn from `seed`.
///
/// Biases are drawn too, so every bias path carries a nonzero value.
pub fn random_problem(config: &NlRoiConfig, n: usize, seed: u64) -> (Tensor, NlRoiParams) {
    let mut rng = Prng::new(seed);
    let mut params = NlRoiParams::init(config, &mut rng);
    for (name, t) in params.tensors_mut() {
        if name.starts_with('b') {
            for v in t.data_mut() {
                *v = rng.uniform_range(-0.1, 0.1);
            }
        }
    }
    let x = Tensor::from_fn(&[n, config.d, config.h, config.w], |_| rng.normal());
    (x, params)
}

/// Compares the analytic gradients of `L = Σ R ⊙ nlroi_forward(X)` w.r.t. `X`
/// and all eight parameter tensors against central differences.
pub fn check_all_gradients(
    config: &NlRoiConfig,
    n: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradReport> {
    config.validate()?;
    let (x, params) = random_problem(config, n, seed);
    let (out, cache) = nlroi_forward(&x, &params, config)?;
    let mut rng = Prng::derived(seed, 0x6772_6164);
    let projection = random_tensor(out.shape(), &mut rng);
    let (dx, grads) = nlroi_backward(&cache, &params, config, &projection)?;

    let forward_x = |probe: &Tensor| Ok(nlroi_forward(probe, &params, config)?.0);
    let numeric_x = finite_diff_projected(forward_x, &projection, &x, step)?;
    let mut checks = vec![TensorCheck::compare("x", &dx, &numeric_x)?];

    for (idx, (name, analytic)) in grads.tensors().into_iter().enumerate() {
        let base = params.tensors()[idx].1.clone();
        let forward_p = |probe: &Tensor| {
            let mut p = params.clone();
            *p.tensors_mut()[idx].1 = probe.clone();
            Ok(nlroi_forward(&x, &p, config)?.0)
        };
        let numeric = finite_diff_projected(forward_p, &projection, &base, step)?;
        checks.push(TensorCheck::compare(name, analytic, &numeric)?);
    }
    Ok(GradReport {
        checks,
        tolerance,
        step,
        projection,
    })
}

type ForwardFn = dyn Fn(&[Tensor]) -> Result<Tensor>;
type BackwardFn = dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>;

/// Finite-difference check of every primitive's vector-Jacobian product on
/// random inputs of shape up to `(3, 4, 5, 5)`.
pub fn check_primitive_gradients(seed: u64, step: f64, tolerance: f64) -> Result<GradReport> {
    let mut rng = Prng::new(seed);
    let mut checks = Vec::new();
    let mut last_projection = Tensor::scalar(0.0);

    let mut push = |name: &str,
                    inputs: &[Tensor],
                    forward: &ForwardFn,
                    backward: &BackwardFn,
                    rng: &mut Prng|
     -> Result<()> {
        let out = forward(inputs)?;
        let projection = random_tensor(out.shape(), rng);
        let analytic = backward(inputs, &projection)?;
        for (k, grad) in analytic.iter().enumerate() {
            let forward_k = |probe: &Tensor| {
                let mut args = inputs.to_vec();
                args[k] = probe.clone();
                forward(&args)
            };
            let numeric = finite_diff_projected(forward_k, &projection, &inputs[k], step)?;
            checks.push(TensorCheck::compare(
                format!("{name}[{k}]"),
                grad,
                &numeric,
            )?);
        }
        last_projection = projection;
        Ok(())
    };

    let a = random_tensor(&[4, 5], &mut rng);
    let b = random_tensor(&[5, 3], &mut rng);
    push(
        "matmul",
        &[a, b],
        &|t| ops::matmul(&t[0], &t[1]),
        &|t, g| ops::vjp(ops::Primitive::Matmul { a: &t[0], b: &t[1] }, g),
        &mut rng,
    )?;

    let x = random_tensor(&[3, 4, 5, 5], &mut rng);
    let w = random_tensor(&[3, 4], &mut rng);
    let bias = random_tensor(&[3], &mut rng);
    push(
        "conv1x1",
        &[x, w, bias],
        &|t| ops::conv2d_1x1(&t[0], &t[1], &t[2]),
        &|t, g| ops::vjp(ops::Primitive::Conv2d1x1 { x: &t[0], w: &t[1] }, g),
        &mut rng,
    )?;

    let x = random_tensor(&[2, 3, 5, 4], &mut rng);
    let w = random_tensor(&[2, 3, 3, 3], &mut rng);
    let bias = random_tensor(&[2], &mut rng);
    push(
        "conv3x3",
        &[x, w, bias],
        &|t| ops::conv2d_3x3_same(&t[0], &t[1], &t[2]),
        &|t, g| ops::vjp(ops::Primitive::Conv2d3x3Same { x: &t[0], w: &t[1] }, g),
        &mut rng,
    )?;

    for (name, mask) in [("softmax", false), ("softmax_masked", true)] {
        let s = Tensor::from_fn(&[5, 5], |_| rng.uniform_range(-2.0, 2.0));
        push(
            name,
            &[s],
            &move |t| ops::softmax_rows(&t[0], mask),
            &move |t, g| {
                let out = ops::softmax_rows(&t[0], mask)?;
                ops::vjp(ops::Primitive::SoftmaxRows { output: &out }, g)
            },
            &mut rng,
        )?;
    }

    // keep inputs away from the kink so the central difference stays on one side
    let x = Tensor::from_fn(&[3, 4, 5, 5], |_| {
        let v = rng.uniform_range(0.01, 1.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    });
    push(
        "relu",
        &[x],
        &|t| Ok(ops::relu(&t[0])),
        &|t, g| ops::vjp(ops::Primitive::Relu { x: &t[0] }, g),
        &mut rng,
    )?;

    let x = random_tensor(&[3, 4, 5, 5], &mut rng);
    push(
        "avg_pool",
        &[x],
        &|t| ops::global_avg_pool(&t[0]),
        &|t, g| {
            ops::vjp(
                ops::Primitive::GlobalAvgPool {
                    input_shape: t[0].shape(),
                },
                g,
            )
        },
        &mut rng,
    )?;

    let v = random_tensor(&[3, 4], &mut rng);
    push(
        "tile",
        &[v],
        &|t| ops::tile_spatial(&t[0], 5, 5),
        &|_, g| ops::vjp(ops::Primitive::TileSpatial, g),
        &mut rng,
    )?;

    let x = random_tensor(&[3, 4, 5, 5], &mut rng);
    let t2 = random_tensor(&[3, 2, 5, 5], &mut rng);
    push(
        "concat",
        &[x, t2],
        &|t| ops::concat_channels(&t[0], &t[1]),
        &|t, g| {
            ops::vjp(
                ops::Primitive::ConcatChannels {
                    x_channels: t[0].shape()[1],
                },
                g,
            )
        },
        &mut rng,
    )?;

    Ok(GradReport {
        checks,
        tolerance,
        step,
        projection: last_projection,
    })
}
