//! Convolution and pooling ops.
//!
//! All convolutions use "same" padding: output extent is `ceil(in/stride)`,
//! with total padding `max((out-1)*stride + k - in, 0)` split as
//! `pad_begin = pad_total / 2`.

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

use super::{accumulate, reshaped, Tape, TensorD, Var};

fn same_pad(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

/// Gather `(N,H,W,Ci)` into im2col layout `(N*OH*OW, KH*KW*Ci)`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &TensorD,
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> (Array2<f64>, usize, usize) {
    let (oh, ph) = same_pad(h, kh, sh);
    let (ow, pw) = same_pad(w, kw, sw);
    let mut cols = Array2::<f64>::zeros((n * oh * ow, kh * kw * ci));
    let xs = x.as_slice().expect("im2col: standard layout");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as i64 - ph as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as i64 - pw as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        let src = ((ni * h + iy as usize) * w + ix as usize) * ci;
                        let dst = (ky * kw + kx) * ci;
                        for c in 0..ci {
                            cols[(row, dst + c)] = xs[src + c];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter im2col-layout gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> TensorD {
    let (oh, ph) = same_pad(h, kh, sh);
    let (ow, pw) = same_pad(w, kw, sw);
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, h, w, ci]));
    let ds = dx.as_slice_mut().unwrap();
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as i64 - ph as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as i64 - pw as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        let dst = ((ni * h + iy as usize) * w + ix as usize) * ci;
                        let src = (ky * kw + kx) * ci;
                        for c in 0..ci {
                            ds[dst + c] += dcols[(row, src + c)];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// 2-D convolution with same padding and per-channel bias.
    ///
    /// `x (N,H,W,Ci)`, `kernel (KH,KW,Ci,Co)`, `bias (Co)` -> `(N,OH,OW,Co)`.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var, bias: Var, stride: (usize, usize)) -> Var {
        let xs: Vec<usize> = self.value(x).shape().to_vec();
        let ks: Vec<usize> = self.value(kernel).shape().to_vec();
        let (n, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, kci, co) = (ks[0], ks[1], ks[2], ks[3]);
        assert_eq!(ci, kci, "conv2d: channel mismatch");
        let (sh, sw) = stride;
        let (cols, oh, ow) = im2col(self.value(x), n, h, w, ci, kh, kw, sh, sw);
        let kmat = reshaped(self.value(kernel), &[kh * kw * ci, co])
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut out_mat = cols.dot(&kmat);
        {
            let b = self.value(bias);
            let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out_mat += &b1;
        }
        let out = reshaped(&out_mat.into_dyn(), &[n, oh, ow, co]);
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let g_mat = reshaped(g, &[n * oh * ow, co])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let (cols, _, _) = im2col(t.value(x), n, h, w, ci, kh, kw, sh, sw);
                let kmat = reshaped(t.value(kernel), &[kh * kw * ci, co])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let dk = cols.t().dot(&g_mat);
                accumulate(&mut slots[kernel.0], reshaped(&dk.into_dyn(), &[kh, kw, ci, co]));
                accumulate(&mut slots[bias.0], g_mat.sum_axis(Axis(0)).into_dyn());
                let dcols = g_mat.dot(&kmat.t());
                accumulate(&mut slots[x.0], col2im(&dcols, n, h, w, ci, kh, kw, sh, sw));
            }),
        )
    }

    /// Temporal convolution over the first axis, stride 1, same padding.
    ///
    /// `x (T,S,Ci)`, `kernel (KT,Ci,Co)`, `bias (Co)` -> `(T,S,Co)`. The `S`
    /// axis (flattened spatial positions) is untouched.
    pub fn conv1d_time_same(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xs: Vec<usize> = self.value(x).shape().to_vec();
        let ks: Vec<usize> = self.value(kernel).shape().to_vec();
        let (t_len, s, ci) = (xs[0], xs[1], xs[2]);
        let (kt, kci, co) = (ks[0], ks[1], ks[2]);
        assert_eq!(ci, kci, "conv1d: channel mismatch");
        let pad = (kt - 1) / 2;
        let x_mat = reshaped(self.value(x), &[t_len * s, ci])
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut out_mat = Array2::<f64>::zeros((t_len * s, co));
        {
            let b = self.value(bias);
            let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out_mat += &b1;
        }
        for dt in 0..kt {
            let off = dt as i64 - pad as i64;
            let tlo = (-off).max(0) as usize;
            let thi = ((t_len as i64 - off).min(t_len as i64)).max(0) as usize;
            if tlo >= thi {
                continue;
            }
            let kslice = self
                .value(kernel)
                .index_axis(Axis(0), dt)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let src = x_mat.slice(ndarray::s![
                ((tlo as i64 + off) as usize * s)..((thi as i64 + off) as usize * s),
                ..
            ]);
            let contrib = src.dot(&kslice);
            let mut dst = out_mat.slice_mut(ndarray::s![tlo * s..thi * s, ..]);
            dst += &contrib;
        }
        let out = reshaped(&out_mat.into_dyn(), &[t_len, s, co]);
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let g_mat = reshaped(g, &[t_len * s, co])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let x_mat = reshaped(t.value(x), &[t_len * s, ci])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut dk = ArrayD::<f64>::zeros(IxDyn(&[kt, ci, co]));
                let mut dx_mat = Array2::<f64>::zeros((t_len * s, ci));
                for dt in 0..kt {
                    let off = dt as i64 - pad as i64;
                    let tlo = (-off).max(0) as usize;
                    let thi = ((t_len as i64 - off).min(t_len as i64)).max(0) as usize;
                    if tlo >= thi {
                        continue;
                    }
                    let src = x_mat.slice(ndarray::s![
                        ((tlo as i64 + off) as usize * s)..((thi as i64 + off) as usize * s),
                        ..
                    ]);
                    let grows = g_mat.slice(ndarray::s![tlo * s..thi * s, ..]);
                    dk.index_axis_mut(Axis(0), dt)
                        .assign(&(src.t().dot(&grows)));
                    let kslice = t
                        .value(kernel)
                        .index_axis(Axis(0), dt)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let dsrc = grows.dot(&kslice.t());
                    let mut dst = dx_mat.slice_mut(ndarray::s![
                        ((tlo as i64 + off) as usize * s)..((thi as i64 + off) as usize * s),
                        ..
                    ]);
                    dst += &dsrc;
                }
                accumulate(&mut slots[kernel.0], dk);
                accumulate(&mut slots[bias.0], g_mat.sum_axis(Axis(0)).into_dyn());
                accumulate(&mut slots[x.0], reshaped(&dx_mat.into_dyn(), &[t_len, s, ci]));
            }),
        )
    }

    /// Depthwise temporal convolution: `x (T,C)`, `kernel (K,C)`, `bias (C)`.
    pub fn depthwise1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xv = self.value2(x).to_owned();
        let kv = self.value2(kernel).to_owned();
        let (t_len, c) = (xv.nrows(), xv.ncols());
        let (k, kc) = (kv.nrows(), kv.ncols());
        assert_eq!(c, kc, "depthwise1d: channel mismatch");
        let pad = (k - 1) / 2;
        let bv = self.value(bias).clone();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array2::<f64>::zeros((t_len, c));
        for ti in 0..t_len {
            for j in 0..k {
                let src = ti as i64 + j as i64 - pad as i64;
                if src < 0 || src >= t_len as i64 {
                    continue;
                }
                for ch in 0..c {
                    out[(ti, ch)] += xv[(src as usize, ch)] * kv[(j, ch)];
                }
            }
            let mut row = out.row_mut(ti);
            row += &b1;
        }
        self.push_op(
            out.into_dyn(),
            Box::new(move |t, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = t.value2(x);
                let kv = t.value2(kernel);
                let mut dx = Array2::<f64>::zeros((t_len, c));
                let mut dk = Array2::<f64>::zeros((k, c));
                for ti in 0..t_len {
                    for j in 0..k {
                        let src = ti as i64 + j as i64 - pad as i64;
                        if src < 0 || src >= t_len as i64 {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            dx[(s, ch)] += g2[(ti, ch)] * kv[(j, ch)];
                            dk[(j, ch)] += g2[(ti, ch)] * xv[(s, ch)];
                        }
                    }
                }
                accumulate(&mut slots[x.0], dx.into_dyn());
                accumulate(&mut slots[kernel.0], dk.into_dyn());
                accumulate(&mut slots[bias.0], g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Mean over the middle (spatial) axis: `x (T,S,C) -> (T,C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xs: Vec<usize> = self.value(x).shape().to_vec();
        let (t_len, s, c) = (xs[0], xs[1], xs[2]);
        let out = self.value(x).mean_axis(Axis(1)).unwrap();
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[t_len, s, c]));
                for ti in 0..t_len {
                    let grow = g2.row(ti).mapv(|v| v / s as f64);
                    for si in 0..s {
                        dx.index_axis_mut(Axis(0), ti)
                            .index_axis_mut(Axis(0), si)
                            .assign(&grow);
                    }
                }
                accumulate(&mut slots[x.0], dx);
            }),
        )
    }
}
