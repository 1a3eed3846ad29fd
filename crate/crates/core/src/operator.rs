//! The non-local RoI operator.
//!
//! For a blob `X` of `N` RoI feature maps, each RoI `i` receives
//!
//! ```text
//! y_i = Σ_j softmax_j(⟨φ(x_i), ψ(x_j)⟩ / scale) · g(x_j)
//! ```
//!
//! where `φ`, `ψ` are 1×1 convolutions flattened to `D_f·H·W` vectors and
//! `g` is a bottleneck (1×1 conv, ReLU, 3×3 conv, global average pool)
//! producing one `D_g` vector per RoI. The vectors `y_i` are tiled over
//! `H×W` and appended after the input channels.

use crate::error::{Error, Result};
use crate::ops::{
    concat_channels, concat_channels_vjp, conv2d_1x1, conv2d_1x1_vjp, conv2d_3x3_same,
    conv2d_3x3_same_vjp, global_avg_pool, global_avg_pool_vjp, matmul, matmul_exact, matmul_vjp,
    relu, relu_vjp, softmax_rows, softmax_rows_vjp, tile_spatial, tile_spatial_vjp,
};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Divisor applied to the raw relation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    /// `√D_f`
    #[default]
    PerChannel,
    /// `√(D_f·H·W)`, the length of the flattened embedding.
    FullFlatten,
}

/// How a RoI is kept from attending to itself when `attend_to_self` is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiagonalMask {
    /// The diagonal gets zero probability and each row renormalizes over the
    /// other RoIs.
    #[default]
    Exclude,
    /// Debug mode: the diagonal *score* is overwritten with 0 before the
    /// softmax, so the RoI still receives weight `e^0` relative to the others.
    ZeroScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlRoiConfig {
    /// Input channels `D`.
    pub d: usize,
    /// Channels of the `φ`/`ψ` embeddings.
    pub d_f: usize,
    /// Channels of the first (1×1) convolution of `g`.
    pub d_mid: usize,
    /// Channels appended to the output.
    pub d_g: usize,
    pub h: usize,
    pub w: usize,
    pub attend_to_self: bool,
    pub scaling: Scaling,
    pub diagonal_mask: DiagonalMask,
}

impl NlRoiConfig {
    /// Bottleneck defaults: `D_f = D_g = max(1, D/4)` and `D_mid = D_f`.
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        let quarter = (d / 4).max(1);
        NlRoiConfig {
            d,
            d_f: quarter,
            d_mid: quarter,
            d_g: quarter,
            h,
            w,
            attend_to_self: true,
            scaling: Scaling::PerChannel,
            diagonal_mask: DiagonalMask::Exclude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_f", self.d_f),
            ("d_mid", self.d_mid),
            ("h", self.h),
            ("w", self.w),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_f > self.d {
            return Err(Error::Config(format!(
                "d_f ({}) must not exceed d ({})",
                self.d_f, self.d
            )));
        }
        if self.d_mid > self.d {
            return Err(Error::Config(format!(
                "d_mid ({}) must not exceed d ({})",
                self.d_mid, self.d
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        match self.scaling {
            Scaling::PerChannel => (self.d_f as f64).sqrt(),
            Scaling::FullFlatten => ((self.d_f * self.h * self.w) as f64).sqrt(),
        }
    }

    pub fn output_channels(&self) -> usize {
        self.d + self.d_g
    }

    /// Smallest RoI count the operator accepts, apart from the empty blob.
    pub fn min_rois(&self) -> usize {
        if !self.attend_to_self && self.diagonal_mask == DiagonalMask::Exclude {
            2
        } else {
            1
        }
    }

    fn check_blob(&self, x: &Tensor) -> Result<usize> {
        let (n, d, h, w) = x.dims4("feature blob")?;
        if (d, h, w) != (self.d, self.h, self.w) {
            return Err(Error::dim(format!(
                "feature blob {:?} does not match configured (N, {}, {}, {})",
                x.shape(),
                self.d,
                self.h,
                self.w
            )));
        }
        Ok(n)
    }
}

impl Default for NlRoiConfig {
    fn default() -> Self {
        NlRoiConfig::new(16, 3, 3)
    }
}

/// Learnable weights; also used to hold their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NlRoiParams {
    pub w_phi: Tensor,
    pub b_phi: Tensor,
    pub w_psi: Tensor,
    pub b_psi: Tensor,
    pub w_g1: Tensor,
    pub b_g1: Tensor,
    pub w_g2: Tensor,
    pub b_g2: Tensor,
}

impl NlRoiParams {
    /// Names in storage and initialization order.
    pub const NAMES: [&'static str; 8] = [
        "w_phi", "b_phi", "w_psi", "b_psi", "w_g1", "b_g1", "w_g2", "b_g2",
    ];

    pub fn shapes(config: &NlRoiConfig) -> [Vec<usize>; 8] {
        let c = config;
        [
            vec![c.d_f, c.d],
            vec![c.d_f],
            vec![c.d_f, c.d],
            vec![c.d_f],
            vec![c.d_mid, c.d],
            vec![c.d_mid],
            vec![c.d_g, c.d_mid, 3, 3],
            vec![c.d_g],
        ]
    }

    pub fn zeros(config: &NlRoiConfig) -> Self {
        let [a, b, c, d, e, f, g, h] = Self::shapes(config).map(|s| Tensor::zeros(&s));
        NlRoiParams {
            w_phi: a,
            b_phi: b,
            w_psi: c,
            b_psi: d,
            w_g1: e,
            b_g1: f,
            w_g2: g,
            b_g2: h,
        }
    }

    /// Weights uniform in `[-s, s)` with `s = √(6 / fan_in)`; biases zero.
    pub fn init(config: &NlRoiConfig, prng: &mut Prng) -> Self {
        let mut params = Self::zeros(config);
        for (name, t) in params.tensors_mut() {
            if !name.starts_with('w') {
                continue;
            }
            let fan_in: usize = t.shape()[1..].iter().product();
            let s = (6.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = prng.uniform_range(-s, s);
            }
        }
        params
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        let n = Self::NAMES;
        [
            (n[0], &self.w_phi),
            (n[1], &self.b_phi),
            (n[2], &self.w_psi),
            (n[3], &self.b_psi),
            (n[4], &self.w_g1),
            (n[5], &self.b_g1),
            (n[6], &self.w_g2),
            (n[7], &self.b_g2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        let n = Self::NAMES;
        [
            (n[0], &mut self.w_phi),
            (n[1], &mut self.b_phi),
            (n[2], &mut self.w_psi),
            (n[3], &mut self.b_psi),
            (n[4], &mut self.w_g1),
            (n[5], &mut self.b_g1),
            (n[6], &mut self.w_g2),
            (n[7], &mut self.b_g2),
        ]
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn validate(&self, config: &NlRoiConfig) -> Result<()> {
        for ((name, t), shape) in self.tensors().into_iter().zip(Self::shapes(config)) {
            t.expect_shape(&shape, name)?;
            if !t.is_finite() {
                return Err(Error::Numerical(format!(
                    "{name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

/// Pre-softmax relation scores of one blob, kept apart from their divisor.
#[derive(Debug, Clone)]
pub struct RelationScores {
    /// `Φ·Ψᵀ` before scaling; independent of the scaling mode.
    pub unscaled: Tensor,
    pub scale: f64,
}

impl RelationScores {
    pub fn scaled(&self) -> Tensor {
        self.unscaled.map(|v| v / self.scale)
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Tensor,
    /// `φ(X)` flattened to `(N, D_f·H·W)`.
    pub phi: Tensor,
    /// `ψ(X)` flattened, without the ψ bias unless it affects the attention.
    pub psi: Tensor,
    /// Scores the attention was computed from; these differ from
    /// [`relation_scores`] by a per-row constant when the ψ bias is omitted.
    pub scores: RelationScores,
    pub attention: Tensor,
    pub g_hidden_pre: Tensor,
    pub g_hidden: Tensor,
    pub g_conv_shape: Vec<usize>,
    /// Pooled embeddings `G`, `(N, D_g)`.
    pub embedding: Tensor,
    /// Aggregated non-local vectors, `(N, D_g)`.
    pub aggregated: Tensor,
}

fn flatten_rois(t: Tensor) -> Result<Tensor> {
    let n = t.shape()[0];
    let per = t.shape()[1..].iter().product();
    t.reshape(&[n, per])
}

fn embeddings(x: &Tensor, params: &NlRoiParams) -> Result<(Tensor, Tensor)> {
    let phi = flatten_rois(conv2d_1x1(x, &params.w_phi, &params.b_phi)?)?;
    let psi = flatten_rois(conv2d_1x1(x, &params.w_psi, &params.b_psi)?)?;
    Ok((phi, psi))
}

/// Whether `b_psi` can change the attention weights.
///
/// The ψ bias adds `⟨φ(x_i), b_psi⟩` to every score of row `i`, which the row
/// softmax cancels. Only the zero-score diagonal mode pins one entry per row
/// and breaks that symmetry.
fn key_bias_matters(config: &NlRoiConfig) -> bool {
    !config.attend_to_self && config.diagonal_mask == DiagonalMask::ZeroScore
}

/// `φ`/`ψ` embeddings as consumed by the attention path; the ψ bias is
/// omitted whenever the softmax cancels it, so the output is then exactly
/// independent of `b_psi`.
fn attention_embeddings(
    x: &Tensor,
    params: &NlRoiParams,
    config: &NlRoiConfig,
) -> Result<(Tensor, Tensor)> {
    if key_bias_matters(config) {
        return embeddings(x, params);
    }
    let phi = flatten_rois(conv2d_1x1(x, &params.w_phi, &params.b_phi)?)?;
    let psi = flatten_rois(conv2d_1x1(x, &params.w_psi, &Tensor::zeros(&[config.d_f]))?)?;
    Ok((phi, psi))
}

fn scores_from(phi: &Tensor, psi: &Tensor, config: &NlRoiConfig) -> Result<RelationScores> {
    Ok(RelationScores {
        unscaled: matmul(phi, &psi.transpose()?)?,
        scale: config.scale(),
    })
}

/// Unscaled scores and divisor; `S[i, j]` is how strongly RoI `i` attends to RoI `j`.
pub fn relation_score_parts(
    x: &Tensor,
    params: &NlRoiParams,
    config: &NlRoiConfig,
) -> Result<RelationScores> {
    config.check_blob(x)?;
    let (phi, psi) = embeddings(x, params)?;
    scores_from(&phi, &psi, config)
}

/// Scaled pre-softmax score matrix `(N, N)`.
pub fn relation_scores(x: &Tensor, params: &NlRoiParams, config: &NlRoiConfig) -> Result<Tensor> {
    Ok(relation_score_parts(x, params, config)?.scaled())
}

/// Row softmax of the scores, excluding the diagonal when `attend_to_self` is false.
pub fn attention_weights(s: &Tensor, attend_to_self: bool) -> Result<Tensor> {
    softmax_rows(s, !attend_to_self)
}

fn attention_for(s: &Tensor, config: &NlRoiConfig) -> Result<Tensor> {
    match (config.attend_to_self, config.diagonal_mask) {
        (true, _) => attention_weights(s, true),
        (false, DiagonalMask::Exclude) => attention_weights(s, false),
        (false, DiagonalMask::ZeroScore) => {
            let (n, _) = s.dims2("attention scores")?;
            let mut zeroed = s.clone();
            for i in 0..n {
                zeroed.data_mut()[i * n + i] = 0.0;
            }
            attention_weights(&zeroed, true)
        }
    }
}

struct GPass {
    hidden_pre: Tensor,
    hidden: Tensor,
    conv_shape: Vec<usize>,
    pooled: Tensor,
}

fn g_pass(x: &Tensor, params: &NlRoiParams) -> Result<GPass> {
    let hidden_pre = conv2d_1x1(x, &params.w_g1, &params.b_g1)?;
    let hidden = relu(&hidden_pre);
    let conv = conv2d_3x3_same(&hidden, &params.w_g2, &params.b_g2)?;
    let pooled = global_avg_pool(&conv)?;
    Ok(GPass {
        hidden_pre,
        hidden,
        conv_shape: conv.shape().to_vec(),
        pooled,
    })
}

/// The bottleneck embedding `g`, one `D_g` row per RoI.
pub fn embed_g(x: &Tensor, params: &NlRoiParams, config: &NlRoiConfig) -> Result<Tensor> {
    config.check_blob(x)?;
    Ok(g_pass(x, params)?.pooled)
}

fn check_roi_count(n: usize, config: &NlRoiConfig) -> Result<()> {
    if n > 0 && n < config.min_rois() {
        return Err(Error::DegenerateAttention(format!(
            "{n} RoI(s) cannot be processed without attending to self"
        )));
    }
    Ok(())
}

/// Forward pass; returns the `(N, D + D_g, H, W)` output and the cache for [`nlroi_backward`].
///
/// An empty blob (`N = 0`) yields an empty output.
pub fn nlroi_forward(
    x: &Tensor,
    params: &NlRoiParams,
    config: &NlRoiConfig,
) -> Result<(Tensor, ForwardCache)> {
    let n = config.check_blob(x)?;
    check_roi_count(n, config)?;
    params.validate(config)?;

    let (phi, psi) = attention_embeddings(x, params, config)?;
    let scores = scores_from(&phi, &psi, config)?;
    let attention = attention_for(&scores.scaled(), config)?;
    let g = g_pass(x, params)?;
    // Sum over RoIs with exact rounding so relabelling RoIs only relabels outputs.
    let aggregated = matmul_exact(&attention, &g.pooled)?;
    let out = concat_channels(x, &tile_spatial(&aggregated, config.h, config.w)?)?;

    let cache = ForwardCache {
        x: x.clone(),
        phi,
        psi,
        scores,
        attention,
        g_hidden_pre: g.hidden_pre,
        g_hidden: g.hidden,
        g_conv_shape: g.conv_shape,
        embedding: g.pooled,
        aggregated,
    };
    Ok((out, cache))
}

/// Reverse-mode gradients of a scalar loss given `d_out = ∂L/∂output`.
pub fn nlroi_backward(
    cache: &ForwardCache,
    params: &NlRoiParams,
    config: &NlRoiConfig,
    d_out: &Tensor,
) -> Result<(Tensor, NlRoiParams)> {
    let n = cache.x.shape()[0];
    d_out.expect_shape(
        &[n, config.output_channels(), config.h, config.w],
        "nlroi_backward upstream gradient",
    )?;
    let (dx_pass, d_tiled) = concat_channels_vjp(config.d, d_out)?;
    let d_agg = tile_spatial_vjp(&d_tiled)?;

    let (d_attention, d_embedding) = matmul_vjp(&cache.attention, &cache.embedding, &d_agg)?;

    // Relation branch.
    let mut d_scores = softmax_rows_vjp(&cache.attention, &d_attention)?;
    if !config.attend_to_self && config.diagonal_mask == DiagonalMask::ZeroScore {
        // the overwritten diagonal score is a constant
        for i in 0..n {
            d_scores.data_mut()[i * n + i] = 0.0;
        }
    }
    let scale = cache.scores.scale;
    let d_unscaled = d_scores.map(|v| v / scale);
    let psi_t = cache.psi.transpose()?;
    let (d_phi, d_psi_t) = matmul_vjp(&cache.phi, &psi_t, &d_unscaled)?;
    let emb_shape = [n, config.d_f, config.h, config.w];
    let d_phi = d_phi.reshape(&emb_shape)?;
    let d_psi = d_psi_t.transpose()?.reshape(&emb_shape)?;
    let (dx_phi, dw_phi, db_phi) = conv2d_1x1_vjp(&cache.x, &params.w_phi, &d_phi)?;
    let (dx_psi, dw_psi, mut db_psi) = conv2d_1x1_vjp(&cache.x, &params.w_psi, &d_psi)?;
    if !key_bias_matters(config) {
        db_psi = Tensor::zeros(&[config.d_f]);
    }

    // Embedding branch.
    let d_conv = global_avg_pool_vjp(&cache.g_conv_shape, &d_embedding)?;
    let (d_hidden, dw_g2, db_g2) = conv2d_3x3_same_vjp(&cache.g_hidden, &params.w_g2, &d_conv)?;
    let d_hidden_pre = relu_vjp(&cache.g_hidden_pre, &d_hidden)?;
    let (dx_g, dw_g1, db_g1) = conv2d_1x1_vjp(&cache.x, &params.w_g1, &d_hidden_pre)?;

    let mut dx = dx_pass;
    for part in [&dx_phi, &dx_psi, &dx_g] {
        for (a, b) in dx.data_mut().iter_mut().zip(part.data()) {
            *a += b;
        }
    }
    let grads = NlRoiParams {
        w_phi: dw_phi,
        b_phi: db_phi,
        w_psi: dw_psi,
        b_psi: db_psi,
        w_g1: dw_g1,
        b_g1: db_g1,
        w_g2: dw_g2,
        b_g2: db_g2,
    };
    Ok((dx, grads))
}

/// Loop-level evaluation of the weighted sum, used as an oracle for [`nlroi_forward`].
///
/// Every quantity is computed per RoI with explicit loops and without the
/// primitive ops: `f(x_i, x_j) = exp(⟨φ(x_i), ψ(x_j)⟩ / scale − m_i)`,
/// `C_i = Σ_j f(x_i, x_j)`, `y_i = Σ_j f(x_i, x_j)·g(x_j) / C_i`, where `m_i`
/// is the largest score of row `i` over the attended set.
#[allow(clippy::needless_range_loop)]
pub fn nlroi_reference(x: &Tensor, params: &NlRoiParams, config: &NlRoiConfig) -> Result<Tensor> {
    let n = config.check_blob(x)?;
    check_roi_count(n, config)?;
    params.validate(config)?;
    let c = config;
    let hw = c.h * c.w;
    let roi = |i: usize| &x.data()[i * c.d * hw..(i + 1) * c.d * hw];

    let pointwise = |xi: &[f64], w: &Tensor, b: &Tensor, cout: usize| -> Vec<f64> {
        let mut out = vec![0.0; cout * hw];
        for o in 0..cout {
            for p in 0..hw {
                let mut s = b.data()[o];
                for ch in 0..c.d {
                    s += w.data()[o * c.d + ch] * xi[ch * hw + p];
                }
                out[o * hw + p] = s;
            }
        }
        out
    };

    let g_of = |xi: &[f64]| -> Vec<f64> {
        let hidden: Vec<f64> = pointwise(xi, &params.w_g1, &params.b_g1, c.d_mid)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let mut g = vec![0.0; c.d_g];
        for (o, gv) in g.iter_mut().enumerate() {
            let mut total = 0.0;
            for y in 0..c.h as isize {
                for xx in 0..c.w as isize {
                    let mut s = params.b_g2.data()[o];
                    for m in 0..c.d_mid {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, xx + kx);
                                if sy < 0 || sx < 0 || sy >= c.h as isize || sx >= c.w as isize {
                                    continue;
                                }
                                let widx = ((o * c.d_mid + m) * 3 + (ky + 1) as usize) * 3
                                    + (kx + 1) as usize;
                                s += params.w_g2.data()[widx]
                                    * hidden[m * hw + sy as usize * c.w + sx as usize];
                            }
                        }
                    }
                    total += s;
                }
            }
            *gv = total / hw as f64;
        }
        g
    };

    let phis: Vec<Vec<f64>> = (0..n)
        .map(|i| pointwise(roi(i), &params.w_phi, &params.b_phi, c.d_f))
        .collect();
    let psis: Vec<Vec<f64>> = (0..n)
        .map(|j| pointwise(roi(j), &params.w_psi, &params.b_psi, c.d_f))
        .collect();
    let gs: Vec<Vec<f64>> = (0..n).map(|j| g_of(roi(j))).collect();
    let scale = c.scale();

    let mut out = Tensor::zeros(&[n, c.output_channels(), c.h, c.w]);
    let od = out.data_mut();
    for i in 0..n {
        let attended =
            |j: usize| c.attend_to_self || c.diagonal_mask == DiagonalMask::ZeroScore || j != i;
        let score = |j: usize| -> f64 {
            if !c.attend_to_self && c.diagonal_mask == DiagonalMask::ZeroScore && j == i {
                return 0.0;
            }
            phis[i]
                .iter()
                .zip(&psis[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / scale
        };
        let scores: Vec<f64> = (0..n).map(score).collect();
        let max = (0..n)
            .filter(|&j| attended(j))
            .map(|j| scores[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        let mut y = vec![0.0; c.d_g];
        for j in (0..n).filter(|&j| attended(j)) {
            let f = (scores[j] - max).exp();
            norm += f;
            for (yc, gc) in y.iter_mut().zip(&gs[j]) {
                *yc += f * gc;
            }
        }
        let base = i * c.output_channels() * hw;
        od[base..base + c.d * hw].copy_from_slice(roi(i));
        for (ch, yc) in y.iter().enumerate() {
            let start = base + (c.d + ch) * hw;
            od[start..start + hw].fill(yc / norm);
        }
    }
    Ok(out)
}
