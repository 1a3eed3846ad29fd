//! Synthetic "majority context" classification task.
//!
//! Every RoI in a scene is labelled with the scene's majority class, but its
//! own features only reveal its latent class. A per-RoI classifier is
//! therefore capped well below perfect accuracy, while a model that can look
//! at the other RoIs can recover the label.

use crate::error::{Error, Result};
use crate::operator::{nlroi_backward, nlroi_forward, ForwardCache, NlRoiConfig, NlRoiParams};
use crate::ops::{global_avg_pool, global_avg_pool_vjp, matmul, matmul_vjp};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Standard deviation of the feature noise.
pub const NOISE_SIGMA: f64 = 0.1;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// Scene dimensions: `n` RoIs of shape `(d, h, w)`, `k` classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskShape {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub noise_sigma: f64,
}

impl TaskShape {
    pub fn new(n: usize, k: usize, d: usize, h: usize, w: usize) -> Self {
        TaskShape {
            n,
            k,
            d,
            h,
            w,
            noise_sigma: NOISE_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k > self.d {
            return Err(Error::Config(format!(
                "k_classes ({}) must not exceed d ({})",
                self.k, self.d
            )));
        }
        if self.k < 2 {
            return Err(Error::Config("the task needs at least 2 classes".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("a scene needs at least 2 RoIs".into()));
        }
        if self.h == 0 || self.w == 0 {
            return Err(Error::Config("h and w must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(
                "noise sigma must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TaskShape {
    fn default() -> Self {
        TaskShape::new(8, 4, 16, 3, 3)
    }
}

/// `⌈0.6·n⌉`, computed in integers.
pub fn majority_count(n: usize) -> usize {
    (3 * n).div_ceil(5)
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// `(N, D, H, W)` feature blob.
    pub features: Tensor,
    pub latent_classes: Vec<usize>,
    pub majority_class: usize,
    pub labels: Vec<usize>,
}

/// Draws one scene.
pub fn generate_scene(prng: &mut Prng, shape: &TaskShape) -> Result<Scene> {
    shape.validate()?;
    let TaskShape { n, k, d, h, w, .. } = *shape;
    let sigma = shape.noise_sigma;

    let majority_class = prng.below(k);
    let mut latent_classes = vec![usize::MAX; n];
    for slot in rand::seq::index::sample(prng.rng(), n, majority_count(n)) {
        latent_classes[slot] = majority_class;
    }
    for c in latent_classes.iter_mut().filter(|c| **c == usize::MAX) {
        let other = prng.below(k - 1);
        *c = if other >= majority_class {
            other + 1
        } else {
            other
        };
    }

    let plane = h * w;
    let mut data = vec![0.0; n * d * plane];
    for (i, &latent) in latent_classes.iter().enumerate() {
        for ch in 0..d {
            let dst = &mut data[(i * d + ch) * plane..][..plane];
            if ch < k {
                let hot = if ch == latent { 1.0 } else { 0.0 };
                dst.fill(hot + sigma * prng.normal());
            } else {
                for v in dst {
                    *v = sigma * prng.normal();
                }
            }
        }
    }

    Ok(Scene {
        features: Tensor::new(vec![n, d, h, w], data)?,
        latent_classes,
        majority_class,
        labels: vec![majority_class; n],
    })
}

/// Monte-Carlo accuracy of the per-RoI predictor that knows whether it is a
/// majority member: members are always right, minority RoIs guess uniformly
/// among the `k - 1` classes other than their own.
pub fn baseline_ceiling(n: usize, k: usize, trials: usize, prng: &mut Prng) -> f64 {
    let m = majority_count(n).min(n);
    let mut correct = 0u64;
    for _ in 0..trials {
        correct += m as u64;
        for _ in m..n {
            if k == 2 || prng.below(k - 1) == 0 {
                correct += 1;
            }
        }
    }
    correct as f64 / (trials.max(1) * n) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    NlRoi,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NlRoi => "nlroi",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "nlroi" => Ok(Variant::NlRoi),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Per-RoI classifier: optional NL-RoI block, global average pool, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub nlroi: Option<(NlRoiConfig, NlRoiParams)>,
    /// `(K, F)` head weights, `F = D` or `D + D_g`.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ToyModel {
    pub fn init(variant: Variant, config: &NlRoiConfig, k: usize, prng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let (nlroi, features) = match variant {
            Variant::Baseline => (None, config.d),
            Variant::NlRoi => {
                let params = NlRoiParams::init(config, prng);
                (Some((*config, params)), config.output_channels())
            }
        };
        // A zero head gives exactly uniform logits, so an untrained model sits at
        // chance whatever the features look like.
        Ok(ToyModel {
            nlroi,
            head_w: Tensor::zeros(&[k, features]),
            head_b: Tensor::zeros(&[k]),
        })
    }

    /// The initialization [`train`] starts from for `seed`.
    pub fn seeded(variant: Variant, config: &NlRoiConfig, k: usize, seed: u64) -> Result<Self> {
        Self::init(variant, config, k, &mut Prng::derived(seed, STREAM_INIT))
    }

    pub fn variant(&self) -> Variant {
        if self.nlroi.is_some() {
            Variant::NlRoi
        } else {
            Variant::Baseline
        }
    }

    pub fn classes(&self) -> usize {
        self.head_w.shape()[0]
    }

    /// Tensors in storage order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some((_, p)) = &self.nlroi {
            out.extend(p.tensors().map(|(n, t)| (n.to_string(), t.clone())));
        }
        out.push(("head_w".into(), self.head_w.clone()));
        out.push(("head_b".into(), self.head_b.clone()));
        out
    }

    /// Rebuilds a model from saved tensors; the variant follows from which
    /// names are present.
    pub fn from_named(
        tensors: &[(String, Tensor)],
        config: &NlRoiConfig,
        k: usize,
    ) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        let missing = |name: &str| Error::Format(format!("weights have no tensor `{name}`"));

        let nlroi = if find("w_phi").is_some() {
            let mut params = NlRoiParams::zeros(config);
            for (name, slot) in params.tensors_mut() {
                *slot = find(name).ok_or_else(|| missing(name))?;
            }
            params.validate(config)?;
            Some((*config, params))
        } else {
            None
        };
        let features = if nlroi.is_some() {
            config.output_channels()
        } else {
            config.d
        };
        let head_w = find("head_w").ok_or_else(|| missing("head_w"))?;
        let head_b = find("head_b").ok_or_else(|| missing("head_b"))?;
        head_w.expect_shape(&[k, features], "head_w")?;
        head_b.expect_shape(&[k], "head_b")?;

        let known = tensors.iter().all(|(n, _)| {
            n == "head_w"
                || n == "head_b"
                || (nlroi.is_some() && NlRoiParams::NAMES.contains(&n.as_str()))
        });
        if !known {
            return Err(Error::Format("weights contain unexpected tensors".into()));
        }
        Ok(ToyModel {
            nlroi,
            head_w,
            head_b,
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some((_, p)) = &mut self.nlroi {
            out.extend(p.tensors_mut().map(|(_, t)| t));
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// `(N, K)` logits for one scene.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.forward(features)?.logits)
    }

    fn forward(&self, features: &Tensor) -> Result<Pass> {
        let (blob, cache) = match &self.nlroi {
            Some((config, params)) => {
                let (out, cache) = nlroi_forward(features, params, config)?;
                (out, Some(cache))
            }
            None => (features.clone(), None),
        };
        let pooled = global_avg_pool(&blob)?;
        let mut logits = matmul(&pooled, &self.head_w.transpose()?)?;
        let k = self.classes();
        for row in logits.data_mut().chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(self.head_b.data()) {
                *v += b;
            }
        }
        Ok(Pass {
            blob_shape: blob.shape().to_vec(),
            pooled,
            logits,
            cache,
        })
    }

    /// Mean cross-entropy over the RoIs of one scene and its gradient, in
    /// [`Self::params_mut`] order.
    fn loss_and_grads(&self, scene: &Scene) -> Result<(f64, Vec<Tensor>)> {
        let pass = self.forward(&scene.features)?;
        let k = self.classes();
        let n = scene.labels.len();

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n * k];
        for (i, row) in pass.logits.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let label = scene.labels[i];
            loss += denom.ln() + max - row[label];
            for c in 0..k {
                let p = (row[c] - max).exp() / denom;
                let target = if c == label { 1.0 } else { 0.0 };
                dlogits[i * k + c] = (p - target) / n as f64;
            }
        }
        loss /= n as f64;

        let dlogits = Tensor::new(vec![n, k], dlogits)?;
        let head_t = self.head_w.transpose()?;
        let (dpooled, dhead_t) = matmul_vjp(&pass.pooled, &head_t, &dlogits)?;
        let mut dhead_b = vec![0.0; k];
        for row in dlogits.data().chunks(k) {
            for (acc, v) in dhead_b.iter_mut().zip(row) {
                *acc += v;
            }
        }

        let mut grads = Vec::new();
        if let (Some((config, params)), Some(cache)) = (&self.nlroi, &pass.cache) {
            let dblob = global_avg_pool_vjp(&pass.blob_shape, &dpooled)?;
            let (_, dparams) = nlroi_backward(cache, params, config, &dblob)?;
            grads.extend(dparams.tensors().map(|(_, t)| t.clone()));
        }
        grads.push(dhead_t.transpose()?);
        grads.push(Tensor::new(vec![k], dhead_b)?);
        Ok((loss, grads))
    }
}

struct Pass {
    blob_shape: Vec<usize>,
    pooled: Tensor,
    logits: Tensor,
    cache: Option<ForwardCache>,
}

/// SGD-with-momentum settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub scenes_per_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 3000,
            scenes_per_step: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) {
            return Err(Error::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(finite_nonneg(self.momentum) && self.momentum < 1.0) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !finite_nonneg(self.weight_decay) {
            return Err(Error::Config(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        if self.scenes_per_step == 0 {
            return Err(Error::Config("scenes_per_step must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trains a fresh model and returns it with the loss of every step.
///
/// `on_step(step, loss)` is called after each update with the 1-based step
/// number and the loss measured before that update.
pub fn train(
    variant: Variant,
    config: &NlRoiConfig,
    task: &TaskShape,
    hyper: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(ToyModel, Vec<f64>)> {
    hyper.validate()?;
    task.validate()?;
    if (config.d, config.h, config.w) != (task.d, task.h, task.w) {
        return Err(Error::Config(
            "operator and task disagree on (d, h, w)".into(),
        ));
    }

    let mut model = ToyModel::seeded(variant, config, task.k, hyper.seed)?;
    let mut scenes = Prng::derived(hyper.seed, STREAM_TRAIN);
    let mut velocity: Vec<Tensor> = model
        .params_mut()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut losses = Vec::with_capacity(hyper.steps);
    let inv = 1.0 / hyper.scenes_per_step as f64;

    for step in 1..=hyper.steps {
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for _ in 0..hyper.scenes_per_step {
            let scene = generate_scene(&mut scenes, task)?;
            let (loss, grads) = model.loss_and_grads(&scene)?;
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(sum) => {
                    for (s, g) in sum.iter_mut().zip(&grads) {
                        for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let loss = total * inv;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);

        let grads = acc.unwrap_or_default();
        for ((param, v), g) in model
            .params_mut()
            .into_iter()
            .zip(&mut velocity)
            .zip(&grads)
        {
            let p = param.data_mut();
            for ((w, v), g) in p.iter_mut().zip(v.data_mut()).zip(g.data()) {
                let grad = g * inv + hyper.weight_decay * *w;
                *v = hyper.momentum * *v + grad;
                *w -= hyper.learning_rate * *v;
            }
        }
        on_step(step, loss);
    }
    Ok((model, losses))
}

/// Mean per-RoI accuracy over `scenes` fresh scenes. The scene stream is
/// derived from `seed` so it never coincides with a training stream.
pub fn evaluate(model: &ToyModel, task: &TaskShape, scenes: usize, seed: u64) -> Result<f64> {
    let mut prng = Prng::derived(seed, STREAM_EVAL);
    let k = model.classes();
    let (mut correct, mut total) = (0usize, 0usize);
    for _ in 0..scenes {
        let scene = generate_scene(&mut prng, task)?;
        let logits = model.logits(&scene.features)?;
        for (row, &label) in logits.data().chunks(k).zip(&scene.labels) {
            if argmax(row) == label {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / total as f64)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
