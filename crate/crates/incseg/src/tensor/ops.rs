//! Differentiable operations: convolution, batch norm, activations, losses.
//!
//! Every op validates shapes up front and, when gradients are enabled,
//! attaches a backward closure to its output tensor. Layouts are NCHW for
//! activations, `(cout, cin, kh, kw)` for convolution weights and
//! `(cin, cout, kh, kw)` for transposed-convolution weights.

use crate::error::{Error, Result};
use crate::tensor::gemm::{col2im_add, gemm_a_bt, gemm_at_b, gemm_rowmajor, im2col};
use crate::tensor::{Scalar, Tensor};

fn expect_4d<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let shape = t.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be 4-d (NCHW), got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-d cross-correlation, no bias. `x`: (n, cin, h, w), `w`: (cout, cin, kh, kw).
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let (n, cin, h, wd) = expect_4d(x, "conv2d input")?;
    let (cout, wcin, kh, kw) = expect_4d(w, "conv2d weight")?;
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if kh != kw {
        return Err(Error::InvalidArgument(format!("conv2d kernel must be square, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let ho = out_extent(h, kh, stride, pad)?;
    let wo = out_extent(wd, kw, stride, pad)?;

    // One wide column matrix for the whole batch: rows are kernel taps,
    // sample s owns the column block [s*sp, (s+1)*sp).
    let kk = cin * kh * kw;
    let sp = ho * wo;
    let ns = n * sp;
    let mut cols = vec![S::ZERO; kk * ns];
    x.with_data(|xd| {
        for s in 0..n {
            im2col(
                &xd[s * cin * h * wd..(s + 1) * cin * h * wd],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut cols[s * sp..],
                ns,
            );
        }
    });
    let mut out_wide = vec![S::ZERO; cout * ns];
    w.with_data(|wdat| gemm_rowmajor(cout, kk, ns, S::ONE, wdat, &cols, S::ZERO, &mut out_wide));
    let mut out = vec![S::ZERO; n * cout * sp];
    for s in 0..n {
        for co in 0..cout {
            out[(s * cout + co) * sp..(s * cout + co + 1) * sp]
                .copy_from_slice(&out_wide[co * ns + s * sp..co * ns + (s + 1) * sp]);
        }
    }
    drop(out_wide);

    let xc = x.clone();
    let wc = w.clone();
    Ok(Tensor::from_op(
        vec![n, cout, ho, wo],
        out,
        vec![x.clone(), w.clone()],
        Box::new(move |gout, _| {
            let need_dx = xc.participates();
            let need_dw = wc.requires_grad();
            if !need_dx && !need_dw {
                return;
            }
            let mut gwide = vec![S::ZERO; cout * ns];
            for s in 0..n {
                for co in 0..cout {
                    gwide[co * ns + s * sp..co * ns + (s + 1) * sp]
                        .copy_from_slice(&gout[(s * cout + co) * sp..(s * cout + co + 1) * sp]);
                }
            }
            if need_dw {
                let mut dw = vec![S::ZERO; cout * kk];
                gemm_a_bt(cout, ns, kk, S::ONE, &gwide, &cols, S::ZERO, &mut dw);
                wc.with_grad_mut(|g| {
                    for (gi, di) in g.iter_mut().zip(&dw) {
                        *gi += *di;
                    }
                });
            }
            if need_dx {
                let wdat = wc.to_vec();
                let mut dcols = vec![S::ZERO; kk * ns];
                gemm_at_b(kk, cout, ns, S::ONE, &wdat, &gwide, S::ZERO, &mut dcols);
                let mut dx = vec![S::ZERO; n * cin * h * wd];
                for s in 0..n {
                    col2im_add(
                        &dcols[s * sp..],
                        cin,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                        &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd],
                        ns,
                    );
                }
                xc.with_grad_mut(|g| {
                    for (gi, di) in g.iter_mut().zip(&dx) {
                        *gi += *di;
                    }
                });
            }
        }),
    ))
}

/// 2-d transposed convolution with even square kernels and implicit padding
/// `(k - 2) / 2`, so stride 2 exactly doubles the spatial extents.
/// `x`: (n, cin, h, w), `w`: (cin, cout, k, k).
pub fn conv_transpose2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let (n, cin, h, wd) = expect_4d(x, "conv_transpose2d input")?;
    let (wcin, cout, kh, kw) = expect_4d(w, "conv_transpose2d weight")?;
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if kh != kw || kh < 2 || kh % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "conv_transpose2d kernel must be square and even, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv_transpose2d stride must be >= 1".into()));
    }
    let pad = (kh - 2) / 2;
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;

    // Transposition makes this the scatter dual of conv2d, so the same
    // lowering applies with the roles of image and columns swapped: columns
    // are indexed by (cout, tap) x (input pixel) and col2im scatters them
    // onto the enlarged output. The weight is already laid out as the
    // (cin, cout*kh*kw) matrix this needs.
    let hwi = h * wd;
    let nhw = n * hwi;
    let ckk = cout * kh * kw;
    let mut xwide = vec![S::ZERO; cin * nhw];
    x.with_data(|xd| {
        for s in 0..n {
            for ci in 0..cin {
                xwide[ci * nhw + s * hwi..ci * nhw + (s + 1) * hwi]
                    .copy_from_slice(&xd[(s * cin + ci) * hwi..(s * cin + ci + 1) * hwi]);
            }
        }
    });
    let mut cols = vec![S::ZERO; ckk * nhw];
    w.with_data(|wdat| gemm_at_b(ckk, cin, nhw, S::ONE, wdat, &xwide, S::ZERO, &mut cols));
    let mut out = vec![S::ZERO; n * cout * ho * wo];
    for s in 0..n {
        col2im_add(
            &cols[s * hwi..],
            cout,
            ho,
            wo,
            kh,
            kw,
            stride,
            pad,
            h,
            wd,
            &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo],
            nhw,
        );
    }
    drop(cols);

    let xc = x.clone();
    let wc = w.clone();
    Ok(Tensor::from_op(
        vec![n, cout, ho, wo],
        out,
        vec![x.clone(), w.clone()],
        Box::new(move |gout, _| {
            let need_dx = xc.participates();
            let need_dw = wc.requires_grad();
            if !need_dx && !need_dw {
                return;
            }
            let mut gcols = vec![S::ZERO; ckk * nhw];
            for s in 0..n {
                im2col(
                    &gout[s * cout * ho * wo..(s + 1) * cout * ho * wo],
                    cout,
                    ho,
                    wo,
                    kh,
                    kw,
                    stride,
                    pad,
                    h,
                    wd,
                    &mut gcols[s * hwi..],
                    nhw,
                );
            }
            if need_dw {
                let mut dw = vec![S::ZERO; cin * ckk];
                gemm_a_bt(cin, nhw, ckk, S::ONE, &xwide, &gcols, S::ZERO, &mut dw);
                wc.with_grad_mut(|g| {
                    for (gi, di) in g.iter_mut().zip(&dw) {
                        *gi += *di;
                    }
                });
            }
            if need_dx {
                let wdat = wc.to_vec();
                let mut dxwide = vec![S::ZERO; cin * nhw];
                gemm_rowmajor(cin, ckk, nhw, S::ONE, &wdat, &gcols, S::ZERO, &mut dxwide);
                xc.with_grad_mut(|g| {
                    for s in 0..n {
                        for ci in 0..cin {
                            let dst = &mut g[(s * cin + ci) * hwi..(s * cin + ci + 1) * hwi];
                            let src = &dxwide[ci * nhw + s * hwi..ci * nhw + (s + 1) * hwi];
                            for (gi, di) in dst.iter_mut().zip(src) {
                                *gi += *di;
                            }
                        }
                    }
                });
            }
        }),
    ))
}

/// Normalization mode — always chosen explicitly by the caller, never
/// inferred from global state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel running statistics owned by the model, updated in-place by
/// train-mode batch norm and read by infer mode.
#[derive(Clone, Debug)]
pub struct RunningStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![S::ZERO; channels], var: vec![S::ONE; channels] }
    }
}

/// Batch normalization over (n, h, w) per channel.
///
/// Train mode normalizes by biased batch statistics and folds them into
/// `stats` with exponential momentum; infer mode normalizes by `stats`
/// without touching them. Both modes are differentiable with respect to
/// the input, `scale` (gamma) and `shift` (beta).
pub fn batch_norm2d<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    stats: &mut RunningStats<S>,
    mode: BnMode,
    momentum: S,
    eps: S,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = expect_4d(x, "batch_norm input")?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm scale/shift must have shape [{c}], got {:?} and {:?}",
            scale.shape(),
            shift.shape()
        )));
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm running stats sized {} for {c} channels",
            stats.mean.len()
        )));
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::InvalidArgument("batch_norm on an empty batch".into()));
    }
    let hw = h * w;
    let m_s = S::from_f64(m as f64);

    let (mean, invstd): (Vec<S>, Vec<S>) = match mode {
        BnMode::Train => {
            let mut mean = vec![S::ZERO; c];
            let mut var = vec![S::ZERO; c];
            x.with_data(|xd| {
                for ci in 0..c {
                    let mut acc = S::ZERO;
                    for s in 0..n {
                        for v in &xd[(s * c + ci) * hw..(s * c + ci + 1) * hw] {
                            acc += *v;
                        }
                    }
                    let mu = acc / m_s;
                    let mut vacc = S::ZERO;
                    for s in 0..n {
                        for v in &xd[(s * c + ci) * hw..(s * c + ci + 1) * hw] {
                            let d = *v - mu;
                            vacc += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = vacc / m_s;
                }
            });
            for ci in 0..c {
                stats.mean[ci] = (S::ONE - momentum) * stats.mean[ci] + momentum * mean[ci];
                stats.var[ci] = (S::ONE - momentum) * stats.var[ci] + momentum * var[ci];
            }
            let invstd = var.iter().map(|v| S::ONE / (*v + eps).sqrt()).collect();
            (mean, invstd)
        }
        BnMode::Infer => {
            let invstd = stats.var.iter().map(|v| S::ONE / (*v + eps).sqrt()).collect();
            (stats.mean.clone(), invstd)
        }
    };

    let numel = n * c * hw;
    let mut xhat = vec![S::ZERO; numel];
    let mut out = vec![S::ZERO; numel];
    x.with_data(|xd| {
        scale.with_data(|gd| {
            shift.with_data(|bd| {
                for s in 0..n {
                    for ci in 0..c {
                        let base = (s * c + ci) * hw;
                        let (mu, istd, ga, be) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
                        for k in 0..hw {
                            let xh = (xd[base + k] - mu) * istd;
                            xhat[base + k] = xh;
                            out[base + k] = ga * xh + be;
                        }
                    }
                }
            });
        });
    });

    let xc = x.clone();
    let scalec = scale.clone();
    let shiftc = shift.clone();
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![x.clone(), scale.clone(), shift.clone()],
        Box::new(move |gout, _| {
            let mut sum_g = vec![S::ZERO; c];
            let mut sum_gx = vec![S::ZERO; c];
            for s in 0..n {
                for ci in 0..c {
                    let base = (s * c + ci) * hw;
                    let mut sg = S::ZERO;
                    let mut sgx = S::ZERO;
                    for k in 0..hw {
                        sg += gout[base + k];
                        sgx += gout[base + k] * xhat[base + k];
                    }
                    sum_g[ci] += sg;
                    sum_gx[ci] += sgx;
                }
            }
            if shiftc.requires_grad() {
                shiftc.with_grad_mut(|g| {
                    for (gi, si) in g.iter_mut().zip(&sum_g) {
                        *gi += *si;
                    }
                });
            }
            if scalec.requires_grad() {
                scalec.with_grad_mut(|g| {
                    for (gi, si) in g.iter_mut().zip(&sum_gx) {
                        *gi += *si;
                    }
                });
            }
            if xc.participates() {
                let gd = scalec.to_vec();
                let mut dx = vec![S::ZERO; numel];
                match mode {
                    BnMode::Train => {
                        for s in 0..n {
                            for ci in 0..c {
                                let base = (s * c + ci) * hw;
                                let a = gd[ci] * invstd[ci];
                                let k1 = sum_g[ci] / m_s;
                                let k2 = sum_gx[ci] / m_s;
                                for k in 0..hw {
                                    dx[base + k] = a * (gout[base + k] - k1 - xhat[base + k] * k2);
                                }
                            }
                        }
                    }
                    BnMode::Infer => {
                        for s in 0..n {
                            for ci in 0..c {
                                let base = (s * c + ci) * hw;
                                let a = gd[ci] * invstd[ci];
                                for k in 0..hw {
                                    dx[base + k] = a * gout[base + k];
                                }
                            }
                        }
                    }
                }
                xc.with_grad_mut(|g| {
                    for (gi, di) in g.iter_mut().zip(&dx) {
                        *gi += *di;
                    }
                });
            }
        }),
    ))
}

/// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    let out = x.with_data(|xd| xd.iter().map(|v| v.maximum(S::ZERO)).collect());
    let xc = x.clone();
    Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |gout, _| {
            if xc.participates() {
                let mask: Vec<S> = xc.with_data(|xd| {
                    xd.iter().zip(gout).map(|(x, g)| if *x > S::ZERO { *g } else { S::ZERO }).collect()
                });
                xc.with_grad_mut(|g| {
                    for (gi, di) in g.iter_mut().zip(&mask) {
                        *gi += *di;
                    }
                });
            }
        }),
    )
}

fn log_softmax_raw<S: Scalar>(xd: &[S], n: usize, c: usize, hw: usize, out: &mut [S]) {
    for s in 0..n {
        for k in 0..hw {
            let mut maxv = xd[(s * c) * hw + k];
            for ci in 1..c {
                maxv = maxv.maximum(xd[(s * c + ci) * hw + k]);
            }
            let mut sum = S::ZERO;
            for ci in 0..c {
                sum += (xd[(s * c + ci) * hw + k] - maxv).exp();
            }
            let lse = maxv + sum.ln();
            for ci in 0..c {
                let idx = (s * c + ci) * hw + k;
                out[idx] = xd[idx] - lse;
            }
        }
    }
}

/// Log-softmax over the channel axis of an (n, c, h, w) tensor,
/// max-shifted for numerical stability.
pub fn log_softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = expect_4d(x, "log_softmax input")?;
    let hw = h * w;
    let mut out = vec![S::ZERO; n * c * hw];
    x.with_data(|xd| log_softmax_raw(xd, n, c, hw, &mut out));
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![x.clone()],
        Box::new(move |gout, odata| {
            if !xc.participates() {
                return;
            }
            let mut dx = vec![S::ZERO; gout.len()];
            for s in 0..n {
                for k in 0..hw {
                    let mut gsum = S::ZERO;
                    for ci in 0..c {
                        gsum += gout[(s * c + ci) * hw + k];
                    }
                    for ci in 0..c {
                        let idx = (s * c + ci) * hw + k;
                        dx[idx] = gout[idx] - odata[idx].exp() * gsum;
                    }
                }
            }
            xc.with_grad_mut(|g| {
                for (gi, di) in g.iter_mut().zip(&dx) {
                    *gi += *di;
                }
            });
        }),
    ))
}

/// Dense per-pixel class labels for a batch, stored as (n, h, w) bytes.
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n * h * w != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "label map ({n}, {h}, {w}) implies {} entries, got {}",
                n * h * w,
                data.len()
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }
}

/// Cross-entropy loss plus the number of pixels that contributed to it.
pub struct CeOutput<S: Scalar> {
    pub loss: Tensor<S>,
    /// Pixels not equal to the ignore index. 0 means the loss is a
    /// gradient-free constant zero.
    pub valid_pixels: usize,
}

/// Mean pixel-wise negative log-likelihood over non-ignored pixels.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &LabelMap,
    ignore_index: u8,
) -> Result<CeOutput<S>> {
    let (n, c, h, w) = expect_4d(logits, "cross_entropy logits")?;
    if (labels.n, labels.h, labels.w) != (n, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "labels ({}, {}, {}) do not match logits ({n}, {h}, {w})",
            labels.n, labels.h, labels.w
        )));
    }
    for &l in &labels.data {
        if l != ignore_index && (l as usize) >= c {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {c} classes (ignore index {ignore_index})"
            )));
        }
    }
    let valid = labels.data.iter().filter(|&&l| l != ignore_index).count();
    if valid == 0 {
        return Ok(CeOutput { loss: Tensor::scalar(S::ZERO), valid_pixels: 0 });
    }

    let ls = log_softmax(logits)?;
    let hw = h * w;
    let k_s = S::from_f64(valid as f64);
    let label_data = labels.data.clone();
    let mut acc = S::ZERO;
    ls.with_data(|lsd| {
        for s in 0..n {
            for k in 0..hw {
                let l = label_data[s * hw + k];
                if l != ignore_index {
                    acc += lsd[(s * c + l as usize) * hw + k];
                }
            }
        }
    });
    let lsc = ls.clone();
    let loss = Tensor::from_op(
        vec![],
        vec![-acc / k_s],
        vec![ls.clone()],
        Box::new(move |gout, _| {
            if !lsc.participates() {
                return;
            }
            let g = gout[0] / k_s;
            lsc.with_grad_mut(|gl| {
                for s in 0..n {
                    for k in 0..hw {
                        let l = label_data[s * hw + k];
                        if l != ignore_index {
                            gl[(s * c + l as usize) * hw + k] -= g;
                        }
                    }
                }
            });
        }),
    );
    Ok(CeOutput { loss, valid_pixels: valid })
}

/// KL(teacher || student) between per-pixel class distributions induced by
/// two logit tensors, averaged over batch and pixels.
///
/// The teacher side is evaluated outside the autodiff graph, so gradients
/// flow only into the student logits.
pub fn kl_div<S: Scalar>(student_logits: &Tensor<S>, teacher_logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = expect_4d(student_logits, "kl_div student logits")?;
    let tshape = teacher_logits.shape();
    if tshape != [n, c, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "kl_div teacher shape {tshape:?} does not match student {:?}",
            [n, c, h, w]
        )));
    }
    let hw = h * w;
    let mut t_ls = vec![S::ZERO; n * c * hw];
    teacher_logits.with_data(|td| log_softmax_raw(td, n, c, hw, &mut t_ls));
    let p: Vec<S> = t_ls.iter().map(|v| v.exp()).collect();

    let s_ls = log_softmax(student_logits)?;
    let npix = S::from_f64((n * hw) as f64);
    let mut acc = S::ZERO;
    s_ls.with_data(|sd| {
        for i in 0..sd.len() {
            acc += p[i] * (t_ls[i] - sd[i]);
        }
    });
    let slc = s_ls.clone();
    Ok(Tensor::from_op(
        vec![],
        vec![acc / npix],
        vec![s_ls.clone()],
        Box::new(move |gout, _| {
            if !slc.participates() {
                return;
            }
            let g = gout[0] / npix;
            slc.with_grad_mut(|gl| {
                for (gi, pi) in gl.iter_mut().zip(&p) {
                    *gi -= *pi * g;
                }
            });
        }),
    ))
}

/// Elementwise sum of two same-shape tensors.
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x + *y).collect()));
    let ac = a.clone();
    let bc = b.clone();
    Ok(Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |gout, _| {
            for t in [&ac, &bc] {
                if t.participates() {
                    t.with_grad_mut(|g| {
                        for (gi, di) in g.iter_mut().zip(gout) {
                            *gi += *di;
                        }
                    });
                }
            }
        }),
    ))
}

/// Multiply every element by a constant.
pub fn scale<S: Scalar>(a: &Tensor<S>, factor: S) -> Tensor<S> {
    let out = a.with_data(|ad| ad.iter().map(|x| *x * factor).collect());
    let ac = a.clone();
    Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |gout, _| {
            if ac.participates() {
                ac.with_grad_mut(|g| {
                    for (gi, di) in g.iter_mut().zip(gout) {
                        *gi += factor * *di;
                    }
                });
            }
        }),
    )
}

/// Scalar projection sum_i weights[i] * a[i]; handy for reducing an op
/// output to a scalar loss in gradient checks.
pub fn weighted_sum<S: Scalar>(a: &Tensor<S>, weights: &[S]) -> Result<Tensor<S>> {
    if a.numel() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "weighted_sum over {} elements with {} weights",
            a.numel(),
            weights.len()
        )));
    }
    let acc = a.with_data(|ad| {
        let mut acc = S::ZERO;
        for (x, w) in ad.iter().zip(weights) {
            acc += *x * *w;
        }
        acc
    });
    let ac = a.clone();
    let wts = weights.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![acc],
        vec![a.clone()],
        Box::new(move |gout, _| {
            if ac.participates() {
                ac.with_grad_mut(|g| {
                    for (gi, wi) in g.iter_mut().zip(&wts) {
                        *gi += *wi * gout[0];
                    }
                });
            }
        }),
    ))
}

/// Per-pixel argmax over the channel axis; ties resolve to the lowest
/// class index. Returns (n, h, w) class ids in row-major order.
pub fn argmax_channels<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<u8>> {
    let (n, c, h, w) = expect_4d(logits, "argmax input")?;
    if c == 0 || c > 255 {
        return Err(Error::InvalidArgument(format!("argmax supports 1..=255 channels, got {c}")));
    }
    let hw = h * w;
    let mut out = vec![0u8; n * hw];
    logits.with_data(|xd| {
        for s in 0..n {
            for k in 0..hw {
                let mut best = 0usize;
                let mut bestv = xd[(s * c) * hw + k];
                for ci in 1..c {
                    let v = xd[(s * c + ci) * hw + k];
                    if v > bestv {
                        bestv = v;
                        best = ci;
                    }
                }
                out[s * hw + k] = best as u8;
            }
        }
    });
    Ok(out)
}
