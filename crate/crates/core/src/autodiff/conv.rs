//! Convolutions (im2col + GEMM) and max pooling.
//!
//! Padding is always explicit: every layer declares the zeros it adds on
//! each side.

use serde::{Deserialize, Serialize};

use super::tape::{GradStore, Node, Op, Var};
use super::{invalid, TensorError};
use crate::scalar::{gemm_into, Scalar};
use crate::tensor::Tensor;

/// Geometry of a 1-D convolution over `(batch, channels, length)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Default for Conv1dGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
        }
    }
}

impl Conv1dGeometry {
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Stride-1 2-D convolution over `(batch, channels, height, width)` with
/// per-side zero padding `[top, bottom, left, right]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub pad: [usize; 4],
}

impl Conv2dGeometry {
    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad[0] + self.pad[1];
        let pw = w + self.pad[2] + self.pad[3];
        (ph >= kh && pw >= kw).then(|| (ph - kh + 1, pw - kw + 1))
    }
}

/// Max-pooling window; padded cells never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool2dGeometry {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl Pool2dGeometry {
    /// Non-overlapping `kh × kw` pooling.
    pub fn tiles(kh: usize, kw: usize) -> Self {
        Self {
            kernel: [kh, kw],
            stride: [kh, kw],
            pad: [0, 0],
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad[0];
        let pw = w + 2 * self.pad[1];
        (ph >= self.kernel[0] && pw >= self.kernel[1]).then(|| {
            (
                (ph - self.kernel[0]) / self.stride[0] + 1,
                (pw - self.kernel[1]) / self.stride[1] + 1,
            )
        })
    }
}

fn rank_check<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::RankMismatch {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Column matrix `(cin·k, lout)` for one sample of a 1-D convolution.
fn im2col_1d<T: Scalar>(x: &[T], cin: usize, len: usize, k: usize, lout: usize, g: &Conv1dGeometry, col: &mut [T]) {
    for c in 0..cin {
        for kk in 0..k {
            let row = &mut col[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, v) in row.iter_mut().enumerate() {
                let pos = (t * g.stride + kk * g.dilation) as isize - g.pad_left as isize;
                *v = if pos >= 0 && (pos as usize) < len {
                    x[c * len + pos as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_1d<T: Scalar>(col: &[T], cin: usize, len: usize, k: usize, lout: usize, g: &Conv1dGeometry, dx: &mut [T]) {
    for c in 0..cin {
        for kk in 0..k {
            let row = &col[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * g.stride + kk * g.dilation) as isize - g.pad_left as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[c * len + pos as usize] += v;
                }
            }
        }
    }
}

struct Dims2d {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

/// Output columns `[lo, hi)` whose kernel offset `j` lands inside the row;
/// column `ox` reads source index `ox + j - pad`.
fn valid_cols(d: &Dims2d, j: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j).min(d.wo);
    let hi = (d.w + pad).saturating_sub(j).min(d.wo).max(lo);
    (lo, hi)
}

fn im2col_2d<T: Scalar>(x: &[T], d: &Dims2d, pad: &[usize; 4], col: &mut [T]) {
    let hw = d.ho * d.wo;
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &mut col[((c * d.kh + i) * d.kw + j) * hw..][..hw];
                let (lo, hi) = valid_cols(d, j, pad[2]);
                for oy in 0..d.ho {
                    let y = (oy + i) as isize - pad[0] as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if y < 0 || y as usize >= d.h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * d.h + y as usize) * d.w..][..d.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if hi > lo {
                        let start = lo + j - pad[2];
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    }
                }
            }
        }
    }
}

fn col2im_2d<T: Scalar>(col: &[T], d: &Dims2d, pad: &[usize; 4], dx: &mut [T]) {
    let hw = d.ho * d.wo;
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &col[((c * d.kh + i) * d.kw + j) * hw..][..hw];
                let (lo, hi) = valid_cols(d, j, pad[2]);
                if hi == lo {
                    continue;
                }
                let start = lo + j - pad[2];
                for oy in 0..d.ho {
                    let y = (oy + i) as isize - pad[0] as isize;
                    if y < 0 || y as usize >= d.h {
                        continue;
                    }
                    let dst = &mut dx[(c * d.h + y as usize) * d.w + start..][..hi - lo];
                    for (v, g) in dst.iter_mut().zip(&row[oy * d.wo + lo..oy * d.wo + hi]) {
                        *v += *g;
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `x (B, Cin, L)` ⊛ `w (Cout, Cin, K)` → `(B, Cout, Lout)`; no bias.
    pub fn conv1d(self, w: Var<'t, T>, geom: Conv1dGeometry) -> Result<Var<'t, T>, TensorError> {
        self.check_same_tape(&w);
        let (xv, wv) = (self.value(), w.value());
        rank_check("conv1d", &xv, 3)?;
        rank_check("conv1d", &wv, 3)?;
        let (b, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, wcin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(invalid("conv1d", "stride and dilation must be positive"));
        }
        let lout = geom
            .output_len(len, k)
            .ok_or_else(|| invalid("conv1d", format!("input length {len} shorter than the kernel span")))?;
        let mut col = vec![T::zero(); cin * k * lout];
        let mut out = vec![T::zero(); b * cout * lout];
        for i in 0..b {
            im2col_1d(&xv.data()[i * cin * len..(i + 1) * cin * len], cin, len, k, lout, &geom, &mut col);
            gemm_into(cout, cin * k, lout, wv.data(), false, &col, false, &mut out[i * cout * lout..(i + 1) * cout * lout], false);
        }
        let rg = self.tape.requires(&[self.id, w.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![b, cout, lout], out),
            Op::Conv1d {
                x: self.id,
                w: w.id,
                geom,
            },
            rg,
        ))
    }

    /// `x (B, C, H, W)` ⊛ `w (O, C, KH, KW)` → `(B, O, Ho, Wo)`; no bias.
    pub fn conv2d(self, w: Var<'t, T>, geom: Conv2dGeometry) -> Result<Var<'t, T>, TensorError> {
        self.check_same_tape(&w);
        let (xv, wv) = (self.value(), w.value());
        rank_check("conv2d", &xv, 4)?;
        rank_check("conv2d", &wv, 4)?;
        let s = xv.shape();
        let ws = wv.shape();
        if ws[1] != s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: s.to_vec(),
                right: ws.to_vec(),
            });
        }
        let (ho, wo) = geom
            .output_hw(s[2], s[3], ws[2], ws[3])
            .ok_or_else(|| invalid("conv2d", format!("input {:?} smaller than kernel {:?}", s, ws)))?;
        let d = Dims2d {
            c: s[1],
            h: s[2],
            w: s[3],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
        };
        let (batch, o) = (s[0], ws[0]);
        let kdim = d.c * d.kh * d.kw;
        let in_len = d.c * d.h * d.w;
        let out_len = o * ho * wo;
        let mut col = vec![T::zero(); kdim * ho * wo];
        let mut out = vec![T::zero(); batch * out_len];
        for i in 0..batch {
            im2col_2d(&xv.data()[i * in_len..(i + 1) * in_len], &d, &geom.pad, &mut col);
            gemm_into(o, kdim, ho * wo, wv.data(), false, &col, false, &mut out[i * out_len..(i + 1) * out_len], false);
        }
        let rg = self.tape.requires(&[self.id, w.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![batch, o, ho, wo], out),
            Op::Conv2d {
                x: self.id,
                w: w.id,
                geom,
            },
            rg,
        ))
    }

    /// Max pooling over the last two axes of `(B, C, H, W)`.
    pub fn max_pool2d(self, geom: Pool2dGeometry) -> Result<Var<'t, T>, TensorError> {
        let xv = self.value();
        rank_check("max_pool2d", &xv, 4)?;
        if geom.stride.contains(&0) || geom.pad[0] >= geom.kernel[0] || geom.pad[1] >= geom.kernel[1] {
            return Err(invalid("max_pool2d", "stride must be positive and padding smaller than the window"));
        }
        let s = xv.shape();
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = geom
            .output_hw(h, w)
            .ok_or_else(|| invalid("max_pool2d", format!("input {s:?} smaller than window {:?}", geom.kernel)))?;
        let planes = s[0] * s[1];
        let x = xv.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        let tiled = geom.pad == [0, 0] && geom.stride == geom.kernel;
        for p in 0..planes {
            let base = p * h * w;
            if tiled {
                max_pool_tiles(x, base, w, ho, wo, geom.kernel, &mut out, &mut argmax);
                continue;
            }
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for i in 0..geom.kernel[0] {
                        let y = (oy * geom.stride[0] + i) as isize - geom.pad[0] as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for j in 0..geom.kernel[1] {
                            let xx = (ox * geom.stride[1] + j) as isize - geom.pad[1] as isize;
                            if xx < 0 || xx as usize >= w {
                                continue;
                            }
                            let at = base + y as usize * w + xx as usize;
                            if best_at == usize::MAX || x[at] > best {
                                best = x[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![s[0], s[1], ho, wo], out),
            Op::MaxPool2d { x: self.id, argmax },
            rg,
        ))
    }
}

/// Non-overlapping, unpadded windows: every cell is in bounds.
#[allow(clippy::too_many_arguments)]
fn max_pool_tiles<T: Scalar>(
    x: &[T],
    base: usize,
    w: usize,
    ho: usize,
    wo: usize,
    [kh, kw]: [usize; 2],
    out: &mut Vec<T>,
    argmax: &mut Vec<usize>,
) {
    for oy in 0..ho {
        for ox in 0..wo {
            let mut best_at = base + oy * kh * w + ox * kw;
            let mut best = x[best_at];
            for i in 0..kh {
                let row = base + (oy * kh + i) * w + ox * kw;
                for (j, &v) in x[row..row + kw].iter().enumerate() {
                    if v > best {
                        best = v;
                        best_at = row + j;
                    }
                }
            }
            out.push(best);
            argmax.push(best_at);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<T: Scalar>(
    x: usize,
    w: usize,
    geom: &Conv1dGeometry,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
    want_x: bool,
    want_w: bool,
) {
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    let (b, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (cout, k) = (wv.shape()[0], wv.shape()[2]);
    let lout = geom.output_len(len, k).expect("validated in forward");
    let mut col = vec![T::zero(); cin * k * lout];
    let mut dw = want_w.then(|| vec![T::zero(); wv.numel()]);
    let mut dx = want_x.then(|| vec![T::zero(); xv.numel()]);
    for i in 0..b {
        let gi = &g[i * cout * lout..(i + 1) * cout * lout];
        if let Some(dw) = dw.as_mut() {
            im2col_1d(&xv.data()[i * cin * len..(i + 1) * cin * len], cin, len, k, lout, geom, &mut col);
            // dW += G · colᵀ
            gemm_into(cout, lout, cin * k, gi, false, &col, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · G
            gemm_into(cin * k, cout, lout, wv.data(), true, gi, false, &mut col, false);
            col2im_1d(&col, cin, len, k, lout, geom, &mut dx[i * cin * len..(i + 1) * cin * len]);
        }
    }
    if let Some(dw) = dw {
        store.add(w, dw);
    }
    if let Some(dx) = dx {
        store.add(x, dx);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: usize,
    w: usize,
    geom: &Conv2dGeometry,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
    want_x: bool,
    want_w: bool,
) {
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    let s = xv.shape();
    let ws = wv.shape();
    let (ho, wo) = geom.output_hw(s[2], s[3], ws[2], ws[3]).expect("validated in forward");
    let d = Dims2d {
        c: s[1],
        h: s[2],
        w: s[3],
        kh: ws[2],
        kw: ws[3],
        ho,
        wo,
    };
    let (batch, o) = (s[0], ws[0]);
    let kdim = d.c * d.kh * d.kw;
    let in_len = d.c * d.h * d.w;
    let out_len = o * ho * wo;
    let mut col = vec![T::zero(); kdim * ho * wo];
    let mut dw = want_w.then(|| vec![T::zero(); wv.numel()]);
    let mut dx = want_x.then(|| vec![T::zero(); xv.numel()]);
    for i in 0..batch {
        let gi = &g[i * out_len..(i + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col_2d(&xv.data()[i * in_len..(i + 1) * in_len], &d, &geom.pad, &mut col);
            gemm_into(o, ho * wo, kdim, gi, false, &col, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm_into(kdim, o, ho * wo, wv.data(), true, gi, false, &mut col, false);
            col2im_2d(&col, &d, &geom.pad, &mut dx[i * in_len..(i + 1) * in_len]);
        }
    }
    if let Some(dw) = dw {
        store.add(w, dw);
    }
    if let Some(dx) = dx {
        store.add(x, dx);
    }
}
