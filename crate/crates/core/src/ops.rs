//! The primitive operations the non-local RoI operator is built from.
//!
//! Every forward op is a pure function of its inputs with a fixed summation
//! order, so results are bit-reproducible. Each op has a matching
//! vector-Jacobian product (`*_vjp`); [`vjp`] dispatches on [`Primitive`].

use crate::error::{Error, Result};
use crate::tensor::{exact_sum_with, Tensor};

/// `C = A · B` with each entry accumulated over the inner index in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner dimensions differ, lhs {:?} vs rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bpj) in row.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `C = A · B` where every entry is the correctly rounded inner product.
///
/// Unlike [`matmul`], the result does not depend on the order of the inner
/// index, so permuting the columns of `A` together with the rows of `B`
/// leaves `C` bitwise unchanged.
pub fn matmul_exact(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner dimensions differ, lhs {:?} vs rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut partials = Vec::new();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = exact_sum_with(
                &mut partials,
                arow.iter().enumerate().map(|(p, &aip)| aip * bd[p * n + j]),
            );
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Pointwise convolution: `out[n,o,h,w] = b[o] + Σ_c W[o,c]·X[n,c,h,w]`.
pub fn conv2d_1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, cin, h, wd) = x.dims4("conv2d_1x1 input")?;
    let (cout, wcin) = w.dims2("conv2d_1x1 weight")?;
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv2d_1x1: weight {:?} expects {wcin} input channels, input {:?} has {cin}",
            w.shape(),
            x.shape()
        )));
    }
    b.expect_shape(&[cout], "conv2d_1x1 bias")?;
    let hw = h * wd;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * cout * hw];
    for ni in 0..n {
        for o in 0..cout {
            let dst = &mut out[(ni * cout + o) * hw..(ni * cout + o + 1) * hw];
            for c in 0..cin {
                let woc = wdat[o * cin + c];
                let src = &xd[(ni * cin + c) * hw..(ni * cin + c + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += woc * s;
                }
            }
            for d in dst.iter_mut() {
                *d += bd[o];
            }
        }
    }
    Tensor::new(vec![n, cout, h, wd], out)
}

/// 3×3 cross-correlation, stride 1, zero padding 1 on every border.
pub fn conv2d_3x3_same(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, cin, h, wd) = x.dims4("conv2d_3x3 input")?;
    let (cout, wcin, kh, kw) = w.dims4("conv2d_3x3 weight")?;
    if (kh, kw) != (3, 3) {
        return Err(Error::dim(format!(
            "conv2d_3x3: kernel must be 3x3, got {:?}",
            w.shape()
        )));
    }
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv2d_3x3: weight {:?} expects {wcin} input channels, input {:?} has {cin}",
            w.shape(),
            x.shape()
        )));
    }
    b.expect_shape(&[cout], "conv2d_3x3 bias")?;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * cout * h * wd];
    for ni in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        let plane = &xd[(ni * cin + c) * h * wd..(ni * cin + c + 1) * h * wd];
                        let kern = &wdat[(o * cin + c) * 9..(o * cin + c + 1) * 9];
                        for dy in 0..3 {
                            let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < h) else {
                                continue;
                            };
                            for dx in 0..3 {
                                let Some(sx) = (xx + dx).checked_sub(1).filter(|&v| v < wd) else {
                                    continue;
                                };
                                acc += kern[dy * 3 + dx] * plane[sy * wd + sx];
                            }
                        }
                    }
                    out[((ni * cout + o) * h + y) * wd + xx] = bd[o] + acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, h, wd], out)
}

/// Row-wise softmax with max subtraction.
///
/// With `mask_diagonal`, entry `(i, i)` is excluded from row `i`: it gets
/// probability exactly 0 and the row renormalizes over the rest. Row sums
/// are computed exactly, so a row's result does not depend on column order.
pub fn softmax_rows(s: &Tensor, mask_diagonal: bool) -> Result<Tensor> {
    let (rows, cols) = s.dims2("softmax_rows")?;
    if mask_diagonal && rows != cols {
        return Err(Error::dim(format!(
            "softmax_rows: diagonal masking needs a square matrix, got {:?}",
            s.shape()
        )));
    }
    let unmasked_per_row = if mask_diagonal {
        cols.saturating_sub(1)
    } else {
        cols
    };
    if rows > 0 && unmasked_per_row == 0 {
        return Err(Error::DegenerateAttention(format!(
            "softmax over {:?} leaves a row with no unmasked entries",
            s.shape()
        )));
    }
    let sd = s.data();
    let mut out = vec![0.0; rows * cols];
    let mut partials = Vec::new();
    for i in 0..rows {
        let row = &sd[i * cols..(i + 1) * cols];
        let live = |j: usize| !(mask_diagonal && i == j);
        let max = (0..cols)
            .filter(|&j| live(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            dst[j] = if live(j) { (row[j] - max).exp() } else { 0.0 };
        }
        let denom = exact_sum_with(&mut partials, dst.iter().copied());
        for v in dst.iter_mut() {
            *v /= denom;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Spatial mean of every `(n, c)` plane.
///
/// The plane sum is exact and the division is corrected by its exact
/// remainder, so a constant plane returns its value exactly.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::dim(format!(
            "global_avg_pool: zero spatial size in {:?}",
            x.shape()
        )));
    }
    let mut partials = Vec::new();
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| exact_mean(&mut partials, plane))
        .collect();
    Tensor::new(vec![n, c], out)
}

fn exact_mean(partials: &mut Vec<f64>, values: &[f64]) -> f64 {
    let count = values.len() as f64;
    let hi = exact_sum_with(partials, values.iter().copied());
    partials.push(-hi);
    let mut scratch = Vec::new();
    let lo = exact_sum_with(&mut scratch, partials.iter().copied());
    let q = hi / count;
    let rem = (-q).mul_add(count, hi);
    q + (rem + lo) / count
}

/// Broadcast `(N, C)` to `(N, C, H, W)`.
pub fn tile_spatial(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = v.dims2("tile_spatial")?;
    if h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "tile_spatial: spatial size must be at least 1x1, got {h}x{w}"
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for &val in v.data() {
        out.extend(std::iter::repeat_n(val, hw));
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Channel concatenation; the channels of `x` come first.
pub fn concat_channels(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    let (n, d, h, w) = x.dims4("concat_channels lhs")?;
    let (tn, dg, th, tw) = t.dims4("concat_channels rhs")?;
    if (n, h, w) != (tn, th, tw) {
        return Err(Error::dim(format!(
            "concat_channels: batch/spatial sizes differ, {:?} vs {:?}",
            x.shape(),
            t.shape()
        )));
    }
    let (xs, ts) = (d * h * w, dg * h * w);
    let mut out = Vec::with_capacity(n * (xs + ts));
    for ni in 0..n {
        out.extend_from_slice(&x.data()[ni * xs..(ni + 1) * xs]);
        out.extend_from_slice(&t.data()[ni * ts..(ni + 1) * ts]);
    }
    Tensor::new(vec![n, d + dg, h, w], out)
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products
// ---------------------------------------------------------------------------

/// Returns `(dA, dB)`.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = a.dims2("matmul lhs")?;
    let (_, n) = b.dims2("matmul rhs")?;
    dc.expect_shape(&[m, n], "matmul upstream gradient")?;
    Ok((matmul(dc, &b.transpose()?)?, matmul(&a.transpose()?, dc)?))
}

/// Returns `(dX, dW, db)`.
pub fn conv2d_1x1_vjp(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, cin, h, wd) = x.dims4("conv2d_1x1 input")?;
    let (cout, _) = w.dims2("conv2d_1x1 weight")?;
    dy.expect_shape(&[n, cout, h, wd], "conv2d_1x1 upstream gradient")?;
    let hw = h * wd;
    let (xd, wdat, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for o in 0..cout {
            let g = &gd[(ni * cout + o) * hw..(ni * cout + o + 1) * hw];
            db[o] += g.iter().sum::<f64>();
            for c in 0..cin {
                let xs = &xd[(ni * cin + c) * hw..(ni * cin + c + 1) * hw];
                let woc = wdat[o * cin + c];
                let mut acc = 0.0;
                let dxs = &mut dx[(ni * cin + c) * hw..(ni * cin + c + 1) * hw];
                for p in 0..hw {
                    acc += g[p] * xs[p];
                    dxs[p] += woc * g[p];
                }
                dw[o * cin + c] += acc;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

/// Returns `(dX, dW, db)`.
pub fn conv2d_3x3_same_vjp(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, cin, h, wd) = x.dims4("conv2d_3x3 input")?;
    let (cout, _, _, _) = w.dims4("conv2d_3x3 weight")?;
    dy.expect_shape(&[n, cout, h, wd], "conv2d_3x3 upstream gradient")?;
    let (xd, wdat, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let g = gd[((ni * cout + o) * h + y) * wd + xx];
                    db[o] += g;
                    for c in 0..cin {
                        let base = (ni * cin + c) * h * wd;
                        let kbase = (o * cin + c) * 9;
                        for dy_ in 0..3 {
                            let Some(sy) = (y + dy_).checked_sub(1).filter(|&v| v < h) else {
                                continue;
                            };
                            for dx_ in 0..3 {
                                let Some(sx) = (xx + dx_).checked_sub(1).filter(|&v| v < wd) else {
                                    continue;
                                };
                                let src = base + sy * wd + sx;
                                dw[kbase + dy_ * 3 + dx_] += g * xd[src];
                                dx[src] += g * wdat[kbase + dy_ * 3 + dx_];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

/// Gradient w.r.t. the scores given the softmax *output* `a`.
///
/// Masked entries have `a = 0` and therefore receive zero gradient.
pub fn softmax_rows_vjp(a: &Tensor, da: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.dims2("softmax_rows output")?;
    da.expect_shape(a.shape(), "softmax_rows upstream gradient")?;
    let (ad, gd) = (a.data(), da.data());
    let mut ds = vec![0.0; rows * cols];
    for i in 0..rows {
        let ar = &ad[i * cols..(i + 1) * cols];
        let gr = &gd[i * cols..(i + 1) * cols];
        let dot: f64 = ar.iter().zip(gr).map(|(a, g)| a * g).sum();
        for j in 0..cols {
            ds[i * cols + j] = ar[j] * (gr[j] - dot);
        }
    }
    Tensor::new(vec![rows, cols], ds)
}

/// Subgradient 0 at exactly 0.
pub fn relu_vjp(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn global_avg_pool_vjp(input_shape: &[usize], dv: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::dim(format!(
            "global_avg_pool: expected a rank-4 input shape, got {input_shape:?}"
        )));
    };
    dv.expect_shape(&[n, c], "global_avg_pool upstream gradient")?;
    let hw = (h * w) as f64;
    let spread = dv.map(|g| g / hw);
    tile_spatial(&spread, h, w)
}

pub fn tile_spatial_vjp(dt: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dt.dims4("tile_spatial upstream gradient")?;
    let hw = h * w;
    let out = dt
        .data()
        .chunks_exact(hw.max(1))
        .map(|plane| plane.iter().sum())
        .collect();
    Tensor::new(vec![n, c], out)
}

/// Splits the upstream gradient into `(dX, dT)` at channel `x_channels`.
pub fn concat_channels_vjp(x_channels: usize, dout: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, total, h, w) = dout.dims4("concat_channels upstream gradient")?;
    if x_channels > total {
        return Err(Error::dim(format!(
            "concat_channels: split at {x_channels} exceeds {total} channels"
        )));
    }
    let hw = h * w;
    let (xs, ts) = (x_channels * hw, (total - x_channels) * hw);
    let mut dx = Vec::with_capacity(n * xs);
    let mut dt = Vec::with_capacity(n * ts);
    for chunk in dout.data().chunks_exact((xs + ts).max(1)).take(n) {
        dx.extend_from_slice(&chunk[..xs]);
        dt.extend_from_slice(&chunk[xs..]);
    }
    Ok((
        Tensor::new(vec![n, x_channels, h, w], dx)?,
        Tensor::new(vec![n, total - x_channels, h, w], dt)?,
    ))
}

/// A primitive together with the forward values its backward pass needs.
#[derive(Debug, Clone, Copy)]
pub enum Primitive<'a> {
    Matmul {
        a: &'a Tensor,
        b: &'a Tensor,
    },
    Conv2d1x1 {
        x: &'a Tensor,
        w: &'a Tensor,
    },
    Conv2d3x3Same {
        x: &'a Tensor,
        w: &'a Tensor,
    },
    /// Saves the forward *output*.
    SoftmaxRows {
        output: &'a Tensor,
    },
    Relu {
        x: &'a Tensor,
    },
    GlobalAvgPool {
        input_shape: &'a [usize],
    },
    TileSpatial,
    ConcatChannels {
        x_channels: usize,
    },
}

/// Gradients w.r.t. every differentiable input of `op`, in argument order
/// (weights before biases for the convolutions).
pub fn vjp(op: Primitive<'_>, upstream: &Tensor) -> Result<Vec<Tensor>> {
    Ok(match op {
        Primitive::Matmul { a, b } => {
            let (da, db) = matmul_vjp(a, b, upstream)?;
            vec![da, db]
        }
        Primitive::Conv2d1x1 { x, w } => {
            let (dx, dw, db) = conv2d_1x1_vjp(x, w, upstream)?;
            vec![dx, dw, db]
        }
        Primitive::Conv2d3x3Same { x, w } => {
            let (dx, dw, db) = conv2d_3x3_same_vjp(x, w, upstream)?;
            vec![dx, dw, db]
        }
        Primitive::SoftmaxRows { output } => vec![softmax_rows_vjp(output, upstream)?],
        Primitive::Relu { x } => vec![relu_vjp(x, upstream)?],
        Primitive::GlobalAvgPool { input_shape } => {
            vec![global_avg_pool_vjp(input_shape, upstream)?]
        }
        Primitive::TileSpatial => vec![tile_spatial_vjp(upstream)?],
        Primitive::ConcatChannels { x_channels } => {
            let (dx, dt) = concat_channels_vjp(x_channels, upstream)?;
            vec![dx, dt]
        }
    })
}
