//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of a forward pass. [`Tape::backward`]
//! walks the recording in reverse and accumulates gradients for every node
//! that contributed to the loss. Values are `f64` throughout so gradients can
//! be verified against central finite differences at tight tolerances.
//!
//! The engine is deliberately small: ops are methods on `Tape`, each pushing
//! a node whose backward closure reads parent values straight off the tape.
//! There is no graph optimization and no broadcasting beyond what individual
//! ops define.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

pub mod check;
mod conv;

pub type TensorD = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tape, &TensorD, &mut [Option<TensorD>]) + Send + Sync>;

struct Node {
    value: TensorD,
    back: Option<BackFn>,
}

/// Records a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    slots: Vec<Option<TensorD>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&TensorD> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

pub(crate) fn accumulate(slot: &mut Option<TensorD>, g: TensorD) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

/// Reshape helper that tolerates non-standard layouts.
pub fn reshaped(a: &TensorD, dims: &[usize]) -> TensorD {
    let std = a.as_standard_layout().into_owned();
    std.into_shape_with_order(IxDyn(dims))
        .expect("reshape: element count mismatch")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorD {
        &self.nodes[v.0].value
    }

    pub(crate) fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 tensor")
    }

    fn push(&mut self, value: TensorD, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor with no gradient history (input, parameter, constant).
    pub fn leaf(&mut self, value: TensorD) -> Var {
        self.push(value, None)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(ndarray::arr0(value).into_dyn(), None)
    }

    pub(crate) fn push_op(&mut self, value: TensorD, back: BackFn) -> Var {
        self.push(value, Some(back))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut slots: Vec<Option<TensorD>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = TensorD::ones(self.nodes[root.0].value.raw_dim());
        assert_eq!(seed.len(), 1, "backward root must be a scalar");
        slots[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(self, &g, &mut slots);
            }
            slots[i] = Some(g);
        }
        Gradients { slots }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape");
        let out = self.value(a) + self.value(b);
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                accumulate(&mut slots[a.0], g.clone());
                accumulate(&mut slots[b.0], g.clone());
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape");
        let out = self.value(a) * self.value(b);
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                accumulate(&mut slots[a.0], g * t.value(b));
                accumulate(&mut slots[b.0], g * t.value(a));
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                accumulate(&mut slots[a.0], g.mapv(|x| x * c));
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accumulate(&mut slots[a.0], g * &mask);
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid_scalar);
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let s = t.value(a).mapv(sigmoid_scalar);
                let d = s.mapv(|v| v * (1.0 - v));
                accumulate(&mut slots[a.0], g * &d);
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let d = t.value(a).mapv(|x| {
                    let y = x.tanh();
                    1.0 - y * y
                });
                accumulate(&mut slots[a.0], g * &d);
            }),
        )
    }

    /// x * sigmoid(x).
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid_scalar(x));
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let d = t.value(a).mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s * (1.0 + x * (1.0 - s))
                });
                accumulate(&mut slots[a.0], g * &d);
            }),
        )
    }

    /// Gated linear unit over the last axis: `[a | b] -> a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let v = self.value2(x);
        let (m, n2) = (v.nrows(), v.ncols());
        assert!(n2 % 2 == 0, "glu: last dim must be even");
        let n = n2 / 2;
        let a = v.slice(ndarray::s![.., ..n]);
        let b = v.slice(ndarray::s![.., n..]);
        let out = (&a * &b.mapv(sigmoid_scalar)).into_dyn();
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let v = t.value2(x);
                let a = v.slice(ndarray::s![.., ..n]);
                let b = v.slice(ndarray::s![.., n..]);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let s = b.mapv(sigmoid_scalar);
                let mut dx = Array2::<f64>::zeros((m, 2 * n));
                {
                    let mut da = dx.slice_mut(ndarray::s![.., ..n]);
                    da.assign(&(&g2 * &s));
                }
                {
                    let mut db = dx.slice_mut(ndarray::s![.., n..]);
                    db.assign(&(&g2 * &a * &s * &s.mapv(|v| 1.0 - v)));
                }
                accumulate(&mut slots[x.0], dx.into_dyn());
            }),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// 2-D matrix product `(M,K) x (K,N) -> (M,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value2(a);
        let bv = self.value2(b);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims");
        let out = av.dot(&bv).into_dyn();
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = t.value2(a);
                let bv = t.value2(b);
                accumulate(&mut slots[a.0], g2.dot(&bv.t()).into_dyn());
                accumulate(&mut slots[b.0], av.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// Batched matrix product `(B,M,K) x (B,K,N) -> (B,M,N)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bb, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(ba, bb, "bmm: batch dims");
        assert_eq!(k, k2, "bmm: inner dims");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[ba, m, n]));
        for i in 0..ba {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let av = t.value(a);
                let bv = t.value(b);
                let mut da = ArrayD::<f64>::zeros(av.raw_dim());
                let mut db = ArrayD::<f64>::zeros(bv.raw_dim());
                for i in 0..ba {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let ai = av
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let bi = bv
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                accumulate(&mut slots[a.0], da);
                accumulate(&mut slots[b.0], db);
            }),
        )
    }

    /// Broadcast-add a bias row vector to every row of a 2-D tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value2(a).to_owned();
        let bv = self.value(bias);
        assert_eq!(bv.len(), av.ncols(), "add_row: bias length");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = (&av + &b1).into_dyn();
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                accumulate(&mut slots[a.0], g2.to_owned().into_dyn());
                accumulate(&mut slots[bias.0], g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Affine map of row vectors: `x (M,I) . w (I,O) + b (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let out = reshaped(self.value(a), dims);
        let old: Vec<usize> = self.value(a).shape().to_vec();
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                accumulate(&mut slots[a.0], reshaped(g, &old));
            }),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_v: Vec<usize> = axes.to_vec();
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .into_owned();
        // inverse permutation for the gradient
        let mut inv = vec![0usize; axes_v.len()];
        for (i, &ax) in axes_v.iter().enumerate() {
            inv[ax] = i;
        }
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                let gp = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                accumulate(&mut slots[a.0], gp);
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value2(a);
        let (m, n) = (av.nrows(), av.ncols());
        assert!(start + len <= m, "slice_rows: out of range");
        let out = av.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push_op(
            out.into_dyn(),
            Box::new(move |_, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::<f64>::zeros((m, n));
                da.slice_mut(ndarray::s![start..start + len, ..]).assign(&g2);
                accumulate(&mut slots[a.0], da.into_dyn());
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value2(a);
        let (m, n) = (av.nrows(), av.ncols());
        assert!(start + len <= n, "slice_cols: out of range");
        let out = av.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push_op(
            out.into_dyn(),
            Box::new(move |_, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::<f64>::zeros((m, n));
                da.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                accumulate(&mut slots[a.0], da.into_dyn());
            }),
        )
    }

    /// Stack 2-D tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&v| self.value2(v)).collect();
        let out = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_rows: column mismatch");
        let rows: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let parts_v: Vec<Var> = parts.to_vec();
        self.push_op(
            out.into_dyn(),
            Box::new(move |_, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut at = 0usize;
                for (i, &p) in parts_v.iter().enumerate() {
                    let r = rows[i];
                    let part = g2.slice(ndarray::s![at..at + r, ..]).to_owned();
                    accumulate(&mut slots[p.0], part.into_dyn());
                    at += r;
                }
            }),
        )
    }

    /// Gather rows of an embedding table: `table (V,E), ids (L) -> (L,E)`.
    pub fn embedding_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value2(table);
        let (v, e) = (tv.nrows(), tv.ncols());
        let mut out = Array2::<f64>::zeros((ids.len(), e));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "embedding_rows: id out of range");
            out.row_mut(i).assign(&tv.row(id));
        }
        let ids_v: Vec<usize> = ids.to_vec();
        self.push_op(
            out.into_dyn(),
            Box::new(move |_, g, slots| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<f64>::zeros((v, e));
                for (i, &id) in ids_v.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g2.row(i);
                }
                accumulate(&mut slots[table.0], dt.into_dyn());
            }),
        )
    }

    // ---- normalization & softmax -------------------------------------------

    /// Layer norm over the last axis of a 2-D tensor, with affine params.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value2(x).to_owned();
        let (m, n) = (xv.nrows(), xv.ncols());
        let mut out = Array2::<f64>::zeros((m, n));
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for i in 0..m {
            let row = xv.row(i);
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            let xhat = row.mapv(|v| (v - mu) * inv);
            out.row_mut(i).assign(&(&xhat * &g1 + &b1));
        }
        self.push_op(
            out.into_dyn(),
            Box::new(move |t, g, slots| {
                let xv = t.value2(x);
                let gv = t.value(gamma);
                let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f64>::zeros((m, n));
                let mut dgamma = ndarray::Array1::<f64>::zeros(n);
                let mut dbeta = ndarray::Array1::<f64>::zeros(n);
                for i in 0..m {
                    let row = xv.row(i);
                    let mu = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat = row.mapv(|v| (v - mu) * inv);
                    let grow = g2.row(i);
                    dgamma += &(&grow * &xhat);
                    dbeta += &grow;
                    let dxhat = (&grow * &g1).to_owned();
                    let mean_dxhat = dxhat.mean().unwrap();
                    let mean_dxhat_xhat = (&dxhat * &xhat).mean().unwrap();
                    let dxi = xhat.mapv(|h| -h * mean_dxhat_xhat) + &dxhat - mean_dxhat;
                    dx.row_mut(i).assign(&dxi.mapv(|v| v * inv));
                }
                accumulate(&mut slots[x.0], dx.into_dyn());
                accumulate(&mut slots[gamma.0], dgamma.into_dyn());
                accumulate(&mut slots[beta.0], dbeta.into_dyn());
            }),
        )
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value2(x);
        let out = log_softmax_rows(&xv.to_owned());
        self.push_op(
            out.clone().into_dyn(),
            Box::new(move |t, g, slots| {
                // recompute y = log_softmax(x)
                let y = log_softmax_rows(&t.value2(x).to_owned());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let rowsum = g2.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = &g2 - &(y.mapv(f64::exp) * &rowsum);
                accumulate(&mut slots[x.0], dx.into_dyn());
            }),
        )
    }

    /// Softmax over the last axis of a rank-3 tensor (attention scores).
    pub fn softmax_last3(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let shape: Vec<usize> = xv.shape().to_vec();
        let n = shape[2];
        let flat = reshaped(&xv, &[shape[0] * shape[1], n]);
        let flat2 = flat.into_dimensionality::<Ix2>().unwrap();
        let y = softmax_rows(&flat2);
        let out = reshaped(&y.into_dyn(), &shape);
        self.push_op(
            out,
            Box::new(move |t, g, slots| {
                let shape: Vec<usize> = t.value(x).shape().to_vec();
                let n = shape[2];
                let flat = reshaped(t.value(x), &[shape[0] * shape[1], n])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let y = softmax_rows(&flat);
                let g2 = reshaped(g, &[shape[0] * shape[1], n])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let dot = (&g2 * &y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = &y * &(&g2 - &dot);
                accumulate(&mut slots[x.0], reshaped(&dx.into_dyn(), &shape));
            }),
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let m = self.value(x).sum() / n;
        self.push_op(
            ndarray::arr0(m).into_dyn(),
            Box::new(move |t, g, slots| {
                let gs = g.sum() / n;
                let d = TensorD::from_elem(t.value(x).raw_dim(), gs);
                accumulate(&mut slots[x.0], d);
            }),
        )
    }

    /// Mean of scalar nodes (batch loss reduction).
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean_of: empty");
        let n = parts.len() as f64;
        let s: f64 = parts.iter().map(|&v| self.value(v).sum()).sum::<f64>() / n;
        let parts_v: Vec<Var> = parts.to_vec();
        self.push_op(
            ndarray::arr0(s).into_dyn(),
            Box::new(move |t, g, slots| {
                let gs = g.sum() / n;
                for &p in &parts_v {
                    let d = TensorD::from_elem(t.value(p).raw_dim(), gs);
                    accumulate(&mut slots[p.0], d);
                }
            }),
        )
    }

    /// Negative log-likelihood summed over masked rows of a log-prob matrix.
    ///
    /// Returns the sum (not the mean) so callers can pool counts across a
    /// batch before normalizing.
    pub fn masked_nll_sum(&mut self, logp: Var, labels: &[u32], mask: &[bool]) -> Var {
        let lv = self.value2(logp);
        assert_eq!(lv.nrows(), labels.len(), "masked_nll: rows");
        assert_eq!(labels.len(), mask.len(), "masked_nll: mask length");
        let mut s = 0.0;
        for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
            if m {
                s -= lv[(i, y as usize)];
            }
        }
        let labels_v: Vec<u32> = labels.to_vec();
        let mask_v: Vec<bool> = mask.to_vec();
        self.push_op(
            ndarray::arr0(s).into_dyn(),
            Box::new(move |t, g, slots| {
                let gs = g.sum();
                let lv = t.value2(logp);
                let mut d = Array2::<f64>::zeros((lv.nrows(), lv.ncols()));
                for (i, (&y, &m)) in labels_v.iter().zip(&mask_v).enumerate() {
                    if m {
                        d[(i, y as usize)] -= gs;
                    }
                }
                accumulate(&mut slots[logp.0], d.into_dyn());
            }),
        )
    }

    /// Expand a per-head relative-position bias table to full attention shape.
    ///
    /// `table (H, 2R+1)` becomes `(H, T, T)` with entry `[h,i,j] =
    /// table[h, clamp(j-i, -R, R) + R]`.
    pub fn relpos_expand(&mut self, table: Var, t_len: usize) -> Var {
        let tv = self.value2(table);
        let (h, b) = (tv.nrows(), tv.ncols());
        let r = (b - 1) / 2;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[h, t_len, t_len]));
        for hh in 0..h {
            for i in 0..t_len {
                for j in 0..t_len {
                    let d = (j as i64 - i as i64).clamp(-(r as i64), r as i64) + r as i64;
                    out[[hh, i, j]] = tv[(hh, d as usize)];
                }
            }
        }
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                let mut dt = Array2::<f64>::zeros((h, b));
                for hh in 0..h {
                    for i in 0..t_len {
                        for j in 0..t_len {
                            let d =
                                (j as i64 - i as i64).clamp(-(r as i64), r as i64) + r as i64;
                            dt[(hh, d as usize)] += g[[hh, i, j]];
                        }
                    }
                }
                accumulate(&mut slots[table.0], dt.into_dyn());
            }),
        )
    }

    /// Pairwise broadcast sum of row sets: `a (T,J), b (U,J) -> (T,U,J)`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value2(a);
        let bv = self.value2(b);
        assert_eq!(av.ncols(), bv.ncols(), "outer_add: feature dims");
        let (tn, un, j) = (av.nrows(), bv.nrows(), av.ncols());
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[tn, un, j]));
        for ti in 0..tn {
            for ui in 0..un {
                let row = &av.row(ti) + &bv.row(ui);
                out.index_axis_mut(Axis(0), ti)
                    .index_axis_mut(Axis(0), ui)
                    .assign(&row);
            }
        }
        self.push_op(
            out,
            Box::new(move |_, g, slots| {
                let g3 = g.view();
                let mut da = Array2::<f64>::zeros((tn, j));
                let mut db = Array2::<f64>::zeros((un, j));
                for ti in 0..tn {
                    for ui in 0..un {
                        let gslice = g3
                            .index_axis(Axis(0), ti)
                            .index_axis(Axis(0), ui)
                            .to_owned();
                        let mut ra = da.row_mut(ti);
                        ra += &gslice;
                        let mut rb = db.row_mut(ui);
                        rb += &gslice;
                    }
                }
                accumulate(&mut slots[a.0], da.into_dyn());
                accumulate(&mut slots[b.0], db.into_dyn());
            }),
        )
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.mapv(|v| (v - mx).exp()).sum().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}
