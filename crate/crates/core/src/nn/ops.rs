//! Forward and backward kernels for every graph operation.
//!
//! `eval` is a pure function of the input values; the graph calls it when a
//! node is created and the finite-difference replay calls it again with
//! perturbed inputs. `backprop` returns one gradient contribution per input
//! so the tape can accumulate them without aliasing.

use super::tensor::Tensor;
use super::NnError;

/// Operation attached to a graph node. Inputs are listed in the order the
/// kernels expect them.
#[derive(Debug, Clone)]
pub enum Op {
    /// External value: network input, constant, or trainable parameter.
    Leaf,
    /// inputs: [x (N,L,Ci), w (K,Ci,Co), b (Co)] -> (N, L-K+1, Co). Valid, stride 1.
    Conv1d,
    /// inputs: [x (N,H,W,Ci), w (KH,KW,Ci,Co), b (Co)] -> (N, H-KH+1, W-KW+1, Co).
    Conv2d,
    /// inputs: [x (N,...,C), gamma (C), beta (C)]; normalizes with batch stats.
    BatchNormTrain { eps: f64 },
    /// inputs: [x, gamma, beta, running_mean (C), running_var (C)].
    BatchNormInfer { eps: f64 },
    /// input: [x (N,L,C)]; window 2, stride 2, trailing remainder dropped.
    AvgPool1d,
    /// input: [x (N,L,C)]; window 2, stride 2.
    MaxPool1d,
    /// input: [x (N,H,W,C)]; window 2x2, stride 2x2.
    MaxPool2d,
    /// input: [x (N,...)] -> (N, F).
    Flatten,
    /// inputs: [x (N,In), w (In,Out), b (Out)] -> (N,Out).
    Dense,
    Relu,
    Sigmoid,
    /// input: [x (N,D)] -> (N,1), mean over columns.
    RowMean,
    /// inputs: [a (N,A), b (N,B)] -> (N,A+B).
    ConcatCols,
    /// input: [x (N,D)] -> (N,1), column `col`.
    SliceCol { col: usize },
    /// inputs: [x (N,D), s (N,1)] -> x scaled per row by s.
    RowScale,
    /// input: [x (N,D)] -> rows scaled to unit L2 norm; all-zero rows map to e0.
    L2NormRows,
    /// input: [z (N,D), rows unit norm] -> scalar supervised contrastive loss.
    SupConLoss { tau: f64, labels: Vec<u8> },
    /// input: [p (N,1) probabilities] -> scalar mean binary cross-entropy.
    BceLoss { labels: Vec<f64> },
    /// input: [x] -> scalar 0.5 * sum((x - target)^2).
    SseLoss { target: Vec<f64> },
}

/// Per-node scratch retained from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Aux {
    None,
    /// Batch statistics (per channel) for BatchNormTrain.
    ChannelStats { mean: Vec<f64>, var: Vec<f64> },
    /// Absolute argmax data indices for max pooling.
    Indices(Vec<usize>),
    /// Row-major N x N softmax matrix (diagonal zero) for SupConLoss.
    Softmax(Vec<f64>),
    /// Per-row L2 norms for L2NormRows; a zero entry marks a degenerate row.
    RowNorms(Vec<f64>),
}

/// Threshold below which a pre-normalization row counts as all-zero.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Probability clamp for binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

pub(crate) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Aux), NnError> {
    match op {
        Op::Leaf => Err(NnError::Usage("leaf nodes are not evaluated".into())),
        Op::Conv1d => conv1d_fwd(inputs[0], inputs[1], inputs[2]),
        Op::Conv2d => conv2d_fwd(inputs[0], inputs[1], inputs[2]),
        Op::BatchNormTrain { eps } => bn_train_fwd(inputs[0], inputs[1], inputs[2], *eps),
        Op::BatchNormInfer { eps } => {
            bn_infer_fwd(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], *eps)
        }
        Op::AvgPool1d => avgpool1d_fwd(inputs[0]),
        Op::MaxPool1d => maxpool1d_fwd(inputs[0]),
        Op::MaxPool2d => maxpool2d_fwd(inputs[0]),
        Op::Flatten => flatten_fwd(inputs[0]),
        Op::Dense => dense_fwd(inputs[0], inputs[1], inputs[2]),
        Op::Relu => {
            let data = inputs[0].data().iter().map(|&v| v.max(0.0)).collect();
            Ok((Tensor::new(inputs[0].shape().to_vec(), data)?, Aux::None))
        }
        Op::Sigmoid => {
            let data = inputs[0].data().iter().map(|&v| sigmoid(v)).collect();
            Ok((Tensor::new(inputs[0].shape().to_vec(), data)?, Aux::None))
        }
        Op::RowMean => row_mean_fwd(inputs[0]),
        Op::ConcatCols => concat_cols_fwd(inputs[0], inputs[1]),
        Op::SliceCol { col } => slice_col_fwd(inputs[0], *col),
        Op::RowScale => row_scale_fwd(inputs[0], inputs[1]),
        Op::L2NormRows => l2norm_rows_fwd(inputs[0]),
        Op::SupConLoss { tau, labels } => supcon_fwd(inputs[0], *tau, labels),
        Op::BceLoss { labels } => bce_fwd(inputs[0], labels),
        Op::SseLoss { target } => sse_fwd(inputs[0], target),
    }
}

/// Gradient contribution per input. `need[k]` is false when input `k` does not
/// require gradients; kernels may skip that work and return `None` for it.
pub(crate) fn backprop(
    op: &Op,
    inputs: &[&Tensor],
    value: &Tensor,
    aux: &Aux,
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Conv1d => conv1d_bwd(inputs, gout, need),
        Op::Conv2d => conv2d_bwd(inputs, gout, need),
        Op::BatchNormTrain { eps } => bn_train_bwd(inputs, aux, gout, need, *eps),
        Op::BatchNormInfer { eps } => bn_infer_bwd(inputs, gout, need, *eps),
        Op::AvgPool1d => avgpool1d_bwd(inputs[0], gout, need),
        Op::MaxPool1d | Op::MaxPool2d => maxpool_bwd(inputs[0], aux, gout, need),
        Op::Flatten => {
            if !need[0] {
                return Ok(vec![None]);
            }
            Ok(vec![Some(gout.reshaped(inputs[0].shape().to_vec())?)])
        }
        Op::Dense => dense_bwd(inputs, gout, need),
        Op::Relu => {
            if !need[0] {
                return Ok(vec![None]);
            }
            let data = inputs[0]
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
        }
        Op::Sigmoid => {
            if !need[0] {
                return Ok(vec![None]);
            }
            let data = value
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect();
            Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
        }
        Op::RowMean => row_mean_bwd(inputs[0], gout, need),
        Op::ConcatCols => concat_cols_bwd(inputs, gout, need),
        Op::SliceCol { col } => slice_col_bwd(inputs[0], *col, gout, need),
        Op::RowScale => row_scale_bwd(inputs, gout, need),
        Op::L2NormRows => l2norm_rows_bwd(inputs[0], value, aux, gout, need),
        Op::SupConLoss { tau, labels } => supcon_bwd(inputs[0], aux, *tau, labels, gout, need),
        Op::BceLoss { labels } => bce_bwd(inputs[0], labels, gout, need),
        Op::SseLoss { target } => sse_bwd(inputs[0], target, gout, need),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

fn conv1d_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, l, ci) = dims3(x, "conv1d input")?;
    let ws = w.shape();
    if ws.len() != 3 || ws[1] != ci {
        return Err(shape_err(format!(
            "conv1d kernel shape {:?} incompatible with input channels {}",
            ws, ci
        )));
    }
    let (k, co) = (ws[0], ws[2]);
    if l < k {
        return Err(shape_err(format!(
            "conv1d input length {} shorter than kernel {}",
            l, k
        )));
    }
    if b.shape() != [co] {
        return Err(shape_err(format!("conv1d bias shape {:?} != ({co})", b.shape())));
    }
    let lo = l - k + 1;
    let mut out = vec![0.0; n * lo * co];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    for ni in 0..n {
        for i in 0..lo {
            let acc = &mut out[(ni * lo + i) * co..(ni * lo + i + 1) * co];
            acc.copy_from_slice(bd);
            for kk in 0..k {
                let xrow = &xd[(ni * l + i + kk) * ci..(ni * l + i + kk + 1) * ci];
                for (cii, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(kk * ci + cii) * co..(kk * ci + cii + 1) * co];
                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                        *a += xv * wv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, lo, co], out)?, Aux::None))
}

fn conv1d_bwd(
    inputs: &[&Tensor],
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
    let (n, l, ci) = dims3(x, "conv1d input")?;
    let (k, co) = (w.shape()[0], w.shape()[2]);
    let lo = l - k + 1;
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());

    let mut gx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let mut gb = need[2].then(|| Tensor::zeros(b.shape().to_vec()));

    for ni in 0..n {
        for i in 0..lo {
            let grow = &gd[(ni * lo + i) * co..(ni * lo + i + 1) * co];
            if let Some(gb) = gb.as_mut() {
                for (s, &g) in gb.data_mut().iter_mut().zip(grow) {
                    *s += g;
                }
            }
            for kk in 0..k {
                let xoff = (ni * l + i + kk) * ci;
                for cii in 0..ci {
                    let woff = (kk * ci + cii) * co;
                    if let Some(gw) = gw.as_mut() {
                        let xv = xd[xoff + cii];
                        let dst = &mut gw.data_mut()[woff..woff + co];
                        for (d, &g) in dst.iter_mut().zip(grow) {
                            *d += xv * g;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wrow = &wd[woff..woff + co];
                        let mut s = 0.0;
                        for (wv, g) in wrow.iter().zip(grow) {
                            s += wv * g;
                        }
                        gx.data_mut()[xoff + cii] += s;
                    }
                }
            }
        }
    }
    Ok(vec![gx, gw, gb])
}

fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, h, wd_, ci) = dims4(x, "conv2d input")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ci {
        return Err(shape_err(format!(
            "conv2d kernel shape {:?} incompatible with input channels {}",
            ws, ci
        )));
    }
    let (kh, kw, co) = (ws[0], ws[1], ws[3]);
    if h < kh || wd_ < kw {
        return Err(shape_err(format!(
            "conv2d input ({h},{wd_}) undersized for kernel ({kh},{kw})"
        )));
    }
    if b.shape() != [co] {
        return Err(shape_err(format!("conv2d bias shape {:?} != ({co})", b.shape())));
    }
    let (ho, wo) = (h - kh + 1, wd_ - kw + 1);
    let mut out = vec![0.0; n * ho * wo * co];
    let xd = x.data();
    let kd = w.data();
    let bd = b.data();
    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let off = ((ni * ho + i) * wo + j) * co;
                let acc = &mut out[off..off + co];
                acc.copy_from_slice(bd);
                for p in 0..kh {
                    for q in 0..kw {
                        let xoff = ((ni * h + i + p) * wd_ + j + q) * ci;
                        let xrow = &xd[xoff..xoff + ci];
                        for (cii, &xv) in xrow.iter().enumerate() {
                            let woff = ((p * kw + q) * ci + cii) * co;
                            let wrow = &kd[woff..woff + co];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, ho, wo, co], out)?, Aux::None))
}

fn conv2d_bwd(
    inputs: &[&Tensor],
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
    let (n, h, wd_, ci) = dims4(x, "conv2d input")?;
    let (kh, kw, co) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (ho, wo) = (h - kh + 1, wd_ - kw + 1);
    let (xd, kd, gd) = (x.data(), w.data(), gout.data());

    let mut gx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let mut gb = need[2].then(|| Tensor::zeros(b.shape().to_vec()));

    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let goff = ((ni * ho + i) * wo + j) * co;
                let grow = &gd[goff..goff + co];
                if let Some(gb) = gb.as_mut() {
                    for (s, &g) in gb.data_mut().iter_mut().zip(grow) {
                        *s += g;
                    }
                }
                for p in 0..kh {
                    for q in 0..kw {
                        let xoff = ((ni * h + i + p) * wd_ + j + q) * ci;
                        for cii in 0..ci {
                            let woff = ((p * kw + q) * ci + cii) * co;
                            if let Some(gw) = gw.as_mut() {
                                let xv = xd[xoff + cii];
                                let dst = &mut gw.data_mut()[woff..woff + co];
                                for (d, &g) in dst.iter_mut().zip(grow) {
                                    *d += xv * g;
                                }
                            }
                            if let Some(gx) = gx.as_mut() {
                                let wrow = &kd[woff..woff + co];
                                let mut s = 0.0;
                                for (wv, g) in wrow.iter().zip(grow) {
                                    s += wv * g;
                                }
                                gx.data_mut()[xoff + cii] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(vec![gx, gw, gb])
}

// ---------------------------------------------------------------------------
// Batch normalization (channels-last; statistics over every other axis)
// ---------------------------------------------------------------------------

fn bn_channels(x: &Tensor, gamma: &Tensor) -> Result<usize, NnError> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("batchnorm on rank-0 tensor".into()))?;
    if gamma.shape() != [c] {
        return Err(shape_err(format!(
            "batchnorm channel mismatch: input {:?} vs gamma {:?}",
            x.shape(),
            gamma.shape()
        )));
    }
    Ok(c)
}

fn bn_train_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Aux), NnError> {
    let c = bn_channels(x, gamma)?;
    let m = x.len() / c;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    for (i, &v) in xd.iter().enumerate() {
        mean[i % c] += v;
    }
    for mu in mean.iter_mut() {
        *mu /= m as f64;
    }
    let mut var = vec![0.0; c];
    for (i, &v) in xd.iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    for vv in var.iter_mut() {
        *vv /= m as f64;
    }
    let gd = gamma.data();
    let bd = beta.data();
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let out = xd
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            gd[ch] * (v - mean[ch]) * inv[ch] + bd[ch]
        })
        .collect();
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Aux::ChannelStats { mean, var },
    ))
}

fn bn_train_bwd(
    inputs: &[&Tensor],
    aux: &Aux,
    gout: &Tensor,
    need: &[bool],
    eps: f64,
) -> Result<Vec<Option<Tensor>>, NnError> {
    let (x, gamma) = (inputs[0], inputs[1]);
    let Aux::ChannelStats { mean, var } = aux else {
        return Err(NnError::Usage("batchnorm backward without stats".into()));
    };
    let c = mean.len();
    let m = x.len() / c;
    let xd = x.data();
    let gd = gout.data();
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    // Per-channel sums of g and g * xhat.
    let mut s1 = vec![0.0; c];
    let mut s2 = vec![0.0; c];
    for (i, &g) in gd.iter().enumerate() {
        let ch = i % c;
        s1[ch] += g;
        s2[ch] += g * (xd[i] - mean[ch]) * inv[ch];
    }

    let gx = if need[0] {
        let gm = gamma.data();
        let mf = m as f64;
        let data = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                let xhat = (v - mean[ch]) * inv[ch];
                gm[ch] * inv[ch] * (gd[i] - s1[ch] / mf - xhat * s2[ch] / mf)
            })
            .collect();
        Some(Tensor::new(x.shape().to_vec(), data)?)
    } else {
        None
    };
    let ggamma = need[1].then(|| Tensor::new(vec![c], s2).unwrap());
    let gbeta = need[2].then(|| Tensor::new(vec![c], s1).unwrap());
    Ok(vec![gx, ggamma, gbeta])
}

fn bn_infer_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    rmean: &Tensor,
    rvar: &Tensor,
    eps: f64,
) -> Result<(Tensor, Aux), NnError> {
    let c = bn_channels(x, gamma)?;
    if rmean.shape() != [c] || rvar.shape() != [c] {
        return Err(shape_err("batchnorm running stats shape mismatch".into()));
    }
    let (gd, bd, md, vd) = (gamma.data(), beta.data(), rmean.data(), rvar.data());
    let inv: Vec<f64> = vd.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            gd[ch] * (v - md[ch]) * inv[ch] + bd[ch]
        })
        .collect();
    Ok((Tensor::new(x.shape().to_vec(), out)?, Aux::None))
}

fn bn_infer_bwd(
    inputs: &[&Tensor],
    gout: &Tensor,
    need: &[bool],
    eps: f64,
) -> Result<Vec<Option<Tensor>>, NnError> {
    let (x, gamma, _beta, rmean, rvar) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
    let c = gamma.len();
    let (xd, gm, md, vd, gd) = (x.data(), gamma.data(), rmean.data(), rvar.data(), gout.data());
    let inv: Vec<f64> = vd.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut s1 = vec![0.0; c];
    let mut s2 = vec![0.0; c];
    for (i, &g) in gd.iter().enumerate() {
        let ch = i % c;
        s1[ch] += g;
        s2[ch] += g * (xd[i] - md[ch]) * inv[ch];
    }
    let gx = if need[0] {
        let data = gd
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let ch = i % c;
                g * gm[ch] * inv[ch]
            })
            .collect();
        Some(Tensor::new(x.shape().to_vec(), data)?)
    } else {
        None
    };
    let ggamma = need[1].then(|| Tensor::new(vec![c], s2).unwrap());
    let gbeta = need[2].then(|| Tensor::new(vec![c], s1).unwrap());
    // Running statistics are constants; no gradient flows to them.
    Ok(vec![gx, ggamma, gbeta, None, None])
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

fn avgpool1d_fwd(x: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, l, c) = dims3(x, "avgpool1d input")?;
    if l < 2 {
        return Err(shape_err(format!("avgpool1d window 2 exceeds length {l}")));
    }
    let lo = l / 2;
    let xd = x.data();
    let mut out = vec![0.0; n * lo * c];
    for ni in 0..n {
        for i in 0..lo {
            for ch in 0..c {
                let a = xd[(ni * l + 2 * i) * c + ch];
                let b = xd[(ni * l + 2 * i + 1) * c + ch];
                out[(ni * lo + i) * c + ch] = 0.5 * (a + b);
            }
        }
    }
    Ok((Tensor::new(vec![n, lo, c], out)?, Aux::None))
}

fn avgpool1d_bwd(x: &Tensor, gout: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let (n, l, c) = dims3(x, "avgpool1d input")?;
    let lo = l / 2;
    let gd = gout.data();
    let mut gx = Tensor::zeros(x.shape().to_vec());
    for ni in 0..n {
        for i in 0..lo {
            for ch in 0..c {
                let g = 0.5 * gd[(ni * lo + i) * c + ch];
                gx.data_mut()[(ni * l + 2 * i) * c + ch] += g;
                gx.data_mut()[(ni * l + 2 * i + 1) * c + ch] += g;
            }
        }
    }
    Ok(vec![Some(gx)])
}

fn maxpool1d_fwd(x: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, l, c) = dims3(x, "maxpool1d input")?;
    if l < 2 {
        return Err(shape_err(format!("maxpool1d window 2 exceeds length {l}")));
    }
    let lo = l / 2;
    let xd = x.data();
    let mut out = vec![0.0; n * lo * c];
    let mut idx = vec![0usize; n * lo * c];
    for ni in 0..n {
        for i in 0..lo {
            for ch in 0..c {
                let ia = (ni * l + 2 * i) * c + ch;
                let ib = (ni * l + 2 * i + 1) * c + ch;
                let o = (ni * lo + i) * c + ch;
                if xd[ia] >= xd[ib] {
                    out[o] = xd[ia];
                    idx[o] = ia;
                } else {
                    out[o] = xd[ib];
                    idx[o] = ib;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, lo, c], out)?, Aux::Indices(idx)))
}

fn maxpool2d_fwd(x: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, h, w, c) = dims4(x, "maxpool2d input")?;
    if h < 2 || w < 2 {
        return Err(shape_err(format!("maxpool2d window 2x2 exceeds input ({h},{w})")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * ho * wo * c];
    let mut idx = vec![0usize; n * ho * wo * c];
    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let o = ((ni * ho + i) * wo + j) * c + ch;
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0usize;
                    for p in 0..2 {
                        for q in 0..2 {
                            let xi = ((ni * h + 2 * i + p) * w + 2 * j + q) * c + ch;
                            if xd[xi] > best {
                                best = xd[xi];
                                bi = xi;
                            }
                        }
                    }
                    out[o] = best;
                    idx[o] = bi;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, ho, wo, c], out)?, Aux::Indices(idx)))
}

fn maxpool_bwd(x: &Tensor, aux: &Aux, gout: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let Aux::Indices(idx) = aux else {
        return Err(NnError::Usage("maxpool backward without indices".into()));
    };
    let mut gx = Tensor::zeros(x.shape().to_vec());
    for (o, &i) in idx.iter().enumerate() {
        gx.data_mut()[i] += gout.data()[o];
    }
    Ok(vec![Some(gx)])
}

// ---------------------------------------------------------------------------
// Dense / shape / elementwise
// ---------------------------------------------------------------------------

fn flatten_fwd(x: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| shape_err("flatten on rank-0 tensor".into()))?;
    let f = x.len() / n;
    Ok((x.reshaped(vec![n, f])?, Aux::None))
}

fn dense_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, fin) = dims2(x, "dense input")?;
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != fin {
        return Err(shape_err(format!(
            "dense weight shape {:?} incompatible with input width {}",
            ws, fin
        )));
    }
    let fout = ws[1];
    if b.shape() != [fout] {
        return Err(shape_err(format!("dense bias shape {:?} != ({fout})", b.shape())));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * fout];
    for ni in 0..n {
        let res = &mut out[ni * fout..(ni + 1) * fout];
        res.copy_from_slice(bd);
        let xrow = &xd[ni * fin..(ni + 1) * fin];
        for (i, &xv) in xrow.iter().enumerate() {
            let wrow = &wd[i * fout..(i + 1) * fout];
            for (r, &wv) in res.iter_mut().zip(wrow) {
                *r += xv * wv;
            }
        }
    }
    Ok((Tensor::new(vec![n, fout], out)?, Aux::None))
}

fn dense_bwd(inputs: &[&Tensor], gout: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>, NnError> {
    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
    let (n, fin) = dims2(x, "dense input")?;
    let fout = w.shape()[1];
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());

    let mut gx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let mut gb = need[2].then(|| Tensor::zeros(b.shape().to_vec()));

    for ni in 0..n {
        let grow = &gd[ni * fout..(ni + 1) * fout];
        if let Some(gb) = gb.as_mut() {
            for (s, &g) in gb.data_mut().iter_mut().zip(grow) {
                *s += g;
            }
        }
        let xrow = &xd[ni * fin..(ni + 1) * fin];
        for i in 0..fin {
            if let Some(gw) = gw.as_mut() {
                let xv = xrow[i];
                let dst = &mut gw.data_mut()[i * fout..(i + 1) * fout];
                for (d, &g) in dst.iter_mut().zip(grow) {
                    *d += xv * g;
                }
            }
            if let Some(gx) = gx.as_mut() {
                let wrow = &wd[i * fout..(i + 1) * fout];
                let mut s = 0.0;
                for (wv, g) in wrow.iter().zip(grow) {
                    s += wv * g;
                }
                gx.data_mut()[ni * fin + i] += s;
            }
        }
    }
    Ok(vec![gx, gw, gb])
}

fn row_mean_fwd(x: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, d) = dims2(x, "row_mean input")?;
    let xd = x.data();
    let out = (0..n)
        .map(|ni| xd[ni * d..(ni + 1) * d].iter().sum::<f64>() / d as f64)
        .collect();
    Ok((Tensor::new(vec![n, 1], out)?, Aux::None))
}

fn row_mean_bwd(x: &Tensor, gout: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let (n, d) = dims2(x, "row_mean input")?;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    for ni in 0..n {
        let g = gout.data()[ni] / d as f64;
        for v in gx.data_mut()[ni * d..(ni + 1) * d].iter_mut() {
            *v = g;
        }
    }
    Ok(vec![Some(gx)])
}

fn concat_cols_fwd(a: &Tensor, b: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, da) = dims2(a, "concat input")?;
    let (nb, db) = dims2(b, "concat input")?;
    if n != nb {
        return Err(shape_err(format!("concat row mismatch: {n} vs {nb}")));
    }
    let mut out = vec![0.0; n * (da + db)];
    for ni in 0..n {
        out[ni * (da + db)..ni * (da + db) + da].copy_from_slice(&a.data()[ni * da..(ni + 1) * da]);
        out[ni * (da + db) + da..(ni + 1) * (da + db)]
            .copy_from_slice(&b.data()[ni * db..(ni + 1) * db]);
    }
    Ok((Tensor::new(vec![n, da + db], out)?, Aux::None))
}

fn concat_cols_bwd(
    inputs: &[&Tensor],
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    let (a, b) = (inputs[0], inputs[1]);
    let (n, da) = dims2(a, "concat input")?;
    let db = b.shape()[1];
    let gd = gout.data();
    let ga = if need[0] {
        let mut g = Tensor::zeros(a.shape().to_vec());
        for ni in 0..n {
            g.data_mut()[ni * da..(ni + 1) * da]
                .copy_from_slice(&gd[ni * (da + db)..ni * (da + db) + da]);
        }
        Some(g)
    } else {
        None
    };
    let gb = if need[1] {
        let mut g = Tensor::zeros(b.shape().to_vec());
        for ni in 0..n {
            g.data_mut()[ni * db..(ni + 1) * db]
                .copy_from_slice(&gd[ni * (da + db) + da..(ni + 1) * (da + db)]);
        }
        Some(g)
    } else {
        None
    };
    Ok(vec![ga, gb])
}

fn slice_col_fwd(x: &Tensor, col: usize) -> Result<(Tensor, Aux), NnError> {
    let (n, d) = dims2(x, "slice_col input")?;
    if col >= d {
        return Err(shape_err(format!("column {col} out of range for width {d}")));
    }
    let out = (0..n).map(|ni| x.data()[ni * d + col]).collect();
    Ok((Tensor::new(vec![n, 1], out)?, Aux::None))
}

fn slice_col_bwd(
    x: &Tensor,
    col: usize,
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let (n, d) = dims2(x, "slice_col input")?;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    for ni in 0..n {
        gx.data_mut()[ni * d + col] = gout.data()[ni];
    }
    Ok(vec![Some(gx)])
}

fn row_scale_fwd(x: &Tensor, s: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, d) = dims2(x, "row_scale input")?;
    if s.shape() != [n, 1] {
        return Err(shape_err(format!(
            "row_scale scale shape {:?} != ({n},1)",
            s.shape()
        )));
    }
    let sd = s.data();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * sd[i / d])
        .collect();
    Ok((Tensor::new(vec![n, d], out)?, Aux::None))
}

fn row_scale_bwd(
    inputs: &[&Tensor],
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    let (x, s) = (inputs[0], inputs[1]);
    let (n, d) = dims2(x, "row_scale input")?;
    let gd = gout.data();
    let gx = if need[0] {
        let sd = s.data();
        let data = gd.iter().enumerate().map(|(i, &g)| g * sd[i / d]).collect();
        Some(Tensor::new(vec![n, d], data)?)
    } else {
        None
    };
    let gs = if need[1] {
        let xd = x.data();
        let mut data = vec![0.0; n];
        for (i, &g) in gd.iter().enumerate() {
            data[i / d] += g * xd[i];
        }
        Some(Tensor::new(vec![n, 1], data)?)
    } else {
        None
    };
    Ok(vec![gx, gs])
}

fn l2norm_rows_fwd(x: &Tensor) -> Result<(Tensor, Aux), NnError> {
    let (n, d) = dims2(x, "l2norm input")?;
    let xd = x.data();
    let mut out = vec![0.0; n * d];
    let mut norms = vec![0.0; n];
    for ni in 0..n {
        let row = &xd[ni * d..(ni + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            // Degenerate row: fixed unit basis vector, flagged via zero norm.
            out[ni * d] = 1.0;
            norms[ni] = 0.0;
        } else {
            for (o, &v) in out[ni * d..(ni + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms[ni] = norm;
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, Aux::RowNorms(norms)))
}

fn l2norm_rows_bwd(
    x: &Tensor,
    value: &Tensor,
    aux: &Aux,
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let Aux::RowNorms(norms) = aux else {
        return Err(NnError::Usage("l2norm backward without norms".into()));
    };
    let (n, d) = dims2(x, "l2norm input")?;
    let (yd, gd) = (value.data(), gout.data());
    let mut gx = Tensor::zeros(vec![n, d]);
    for ni in 0..n {
        let norm = norms[ni];
        if norm == 0.0 {
            continue; // degenerate row contributes no gradient
        }
        let y = &yd[ni * d..(ni + 1) * d];
        let g = &gd[ni * d..(ni + 1) * d];
        let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((o, &yi), &gi) in gx.data_mut()[ni * d..(ni + 1) * d]
            .iter_mut()
            .zip(y)
            .zip(g)
        {
            *o = (gi - dot * yi) / norm;
        }
    }
    Ok(vec![Some(gx)])
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn supcon_fwd(z: &Tensor, tau: f64, labels: &[u8]) -> Result<(Tensor, Aux), NnError> {
    let (n, d) = dims2(z, "supcon input")?;
    if labels.len() != n {
        return Err(shape_err(format!(
            "supcon labels {} != batch {}",
            labels.len(),
            n
        )));
    }
    for (i, &li) in labels.iter().enumerate() {
        let has_positive = labels
            .iter()
            .enumerate()
            .any(|(p, &lp)| p != i && lp == li);
        if !has_positive {
            return Err(NnError::BatchComposition(format!(
                "anchor {i} has no same-class positive in the batch"
            )));
        }
    }
    let zd = z.data();
    // Logits s_ia = z_i . z_a / tau with the diagonal excluded.
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for a in 0..n {
            if a == i {
                continue;
            }
            let (ri, ra) = (&zd[i * d..(i + 1) * d], &zd[a * d..(a + 1) * d]);
            logits[i * n + a] = ri.iter().zip(ra).map(|(&x, &y)| x * y).sum::<f64>() / tau;
        }
    }
    let mut softmax = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|(a, _)| *a != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for a in 0..n {
            if a == i {
                continue;
            }
            denom += (row[a] - max).exp();
        }
        let lse = max + denom.ln();
        let mut npos = 0usize;
        let mut pos_sum = 0.0;
        for a in 0..n {
            if a == i {
                continue;
            }
            softmax[i * n + a] = (row[a] - max).exp() / denom;
            if labels[a] == labels[i] {
                npos += 1;
                pos_sum += row[a] - lse;
            }
        }
        loss += -pos_sum / npos as f64;
    }
    Ok((Tensor::scalar(loss), Aux::Softmax(softmax)))
}

fn supcon_bwd(
    z: &Tensor,
    aux: &Aux,
    tau: f64,
    labels: &[u8],
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let Aux::Softmax(softmax) = aux else {
        return Err(NnError::Usage("supcon backward without softmax".into()));
    };
    let (n, d) = dims2(z, "supcon input")?;
    let zd = z.data();
    let g0 = gout.item();

    // dL/dS with S the (masked) logit matrix.
    let mut gs = vec![0.0; n * n];
    for i in 0..n {
        let npos = labels
            .iter()
            .enumerate()
            .filter(|(a, &la)| *a != i && la == labels[i])
            .count() as f64;
        for a in 0..n {
            if a == i {
                continue;
            }
            let pos = if labels[a] == labels[i] { 1.0 / npos } else { 0.0 };
            gs[i * n + a] = softmax[i * n + a] - pos;
        }
    }
    // dL/dz_k = sum_a (gs[k,a] + gs[a,k]) z_a / tau
    let mut gz = Tensor::zeros(vec![n, d]);
    for k in 0..n {
        let dst = &mut gz.data_mut()[k * d..(k + 1) * d];
        for a in 0..n {
            if a == k {
                continue;
            }
            let coeff = (gs[k * n + a] + gs[a * n + k]) * g0 / tau;
            let row = &zd[a * d..(a + 1) * d];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o += coeff * v;
            }
        }
    }
    Ok(vec![Some(gz)])
}

fn bce_fwd(p: &Tensor, labels: &[f64]) -> Result<(Tensor, Aux), NnError> {
    let n = p.len();
    if labels.len() != n {
        return Err(shape_err(format!("bce labels {} != batch {n}", labels.len())));
    }
    let mut loss = 0.0;
    for (&pi, &y) in p.data().iter().zip(labels) {
        let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    Ok((Tensor::scalar(loss / n as f64), Aux::None))
}

fn bce_bwd(
    p: &Tensor,
    labels: &[f64],
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let n = p.len();
    let g0 = gout.item() / n as f64;
    let data = p
        .data()
        .iter()
        .zip(labels)
        .map(|(&pi, &y)| {
            if pi <= BCE_CLAMP || pi >= 1.0 - BCE_CLAMP {
                0.0 // clamp active: flat region
            } else {
                g0 * (pi - y) / (pi * (1.0 - pi))
            }
        })
        .collect();
    Ok(vec![Some(Tensor::new(p.shape().to_vec(), data)?)])
}

fn sse_fwd(x: &Tensor, target: &[f64]) -> Result<(Tensor, Aux), NnError> {
    if target.len() != x.len() {
        return Err(shape_err(format!(
            "sse target {} != input {}",
            target.len(),
            x.len()
        )));
    }
    let loss = x
        .data()
        .iter()
        .zip(target)
        .map(|(&v, &t)| 0.5 * (v - t) * (v - t))
        .sum();
    Ok((Tensor::scalar(loss), Aux::None))
}

fn sse_bwd(
    x: &Tensor,
    target: &[f64],
    gout: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>, NnError> {
    if !need[0] {
        return Ok(vec![None]);
    }
    let g0 = gout.item();
    let data = x
        .data()
        .iter()
        .zip(target)
        .map(|(&v, &t)| g0 * (v - t))
        .collect();
    Ok(vec![Some(Tensor::new(x.shape().to_vec(), data)?)])
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize), NnError> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(shape_err(format!("{what} must be rank 2, got {s:?}"))),
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize), NnError> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(shape_err(format!("{what} must be rank 3, got {s:?}"))),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize), NnError> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(shape_err(format!("{what} must be rank 4, got {s:?}"))),
    }
}
