//! Minimal reverse-mode automatic differentiation over a flat expression
//! arena. Values are dense row-major tensors; each operation records enough
//! context to push gradients back to its parents in a single reverse sweep.
//!
//! Generic over `f32` (training) and `f64` (finite-difference gradient
//! checking): the same model code runs at either precision.

use num_traits::Float;

/// Element type of the computation graph.
pub trait Real:
    Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> TensorData<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        TensorData { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        TensorData { shape: shape.to_vec(), data }
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Self {
        TensorData::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        TensorData { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn cast<U: Real>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.into_f64())).collect(),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<T> {
    value: TensorData<T>,
    parents: Vec<Var>,
    op: Op<T>,
    needs_grad: bool,
}

enum Op<T> {
    Leaf,
    Add,
    AddBias,
    Scale(T),
    MatMul,
    /// C = A * B^T with B stored (m, k).
    MatMulBt,
    Relu,
    SoftmaxRows,
    LayerNormRows {
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        ctx: ConvCtx,
        cols: Vec<T>,
    },
    MeanPoolHw,
    MeanRows,
    SliceCols {
        from: usize,
        to: usize,
    },
    ConcatCols {
        widths: Vec<usize>,
    },
    MinMaxNormCols {
        argmin: Vec<usize>,
        argmax: Vec<usize>,
        inv_range: Vec<T>,
    },
    CausalConv1d {
        dilation: usize,
    },
    CrossEntropyLogits {
        target: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct ConvCtx {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Expression arena with reverse-mode gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: TensorData<T>, parents: Vec<Var>, op: Op<T>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, parents, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not require a gradient (model inputs).
    pub fn input(&mut self, value: TensorData<T>) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that accumulates a gradient (trainable parameter).
    pub fn param(&mut self, value: TensorData<T>) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let shape = va.shape.clone();
        self.push(TensorData { shape, data }, vec![a, b], Op::Add)
    }

    /// Row-broadcast bias add: x is (n, m), b is (m).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let m = vx.cols();
        assert_eq!(vb.numel(), m, "bias length mismatch");
        let mut data = vx.data.clone();
        for row in data.chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(&vb.data) {
                *v += bv;
            }
        }
        let shape = vx.shape.clone();
        self.push(TensorData { shape, data }, vec![x, b], Op::AddBias)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&v| v * c).collect();
        let shape = vx.shape.clone();
        self.push(TensorData { shape, data }, vec![x], Op::Scale(c))
    }

    /// (n, k) x (k, m) -> (n, m)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (va.rows(), va.cols());
        let (k2, m) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![T::zero(); n * m];
        matmul_acc(&va.data, &vb.data, &mut out, n, k, m);
        self.push(TensorData::from_vec(&[n, m], out), vec![a, b], Op::MatMul)
    }

    /// (n, k) x (m, k)^T -> (n, m)
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (va.rows(), va.cols());
        let (m, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_bt inner dim mismatch");
        let mut out = vec![T::zero(); n * m];
        matmul_abt(&va.data, &vb.data, &mut out, n, k, m);
        self.push(TensorData::from_vec(&[n, m], out), vec![a, b], Op::MatMulBt)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = vx.shape.clone();
        self.push(TensorData { shape, data }, vec![x], Op::Relu)
    }

    /// Numerically stable softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let m = vx.cols();
        let mut data = vx.data.clone();
        for row in data.chunks_mut(m) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = vx.shape.clone();
        self.push(TensorData { shape, data }, vec![x], Op::SoftmaxRows)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, m) = (vx.rows(), vx.cols());
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        assert_eq!(vg.numel(), m);
        assert_eq!(vb.numel(), m);
        let mut out = vec![T::zero(); n * m];
        let mut xhat = vec![T::zero(); n * m];
        let mut inv_std = vec![T::zero(); n];
        for i in 0..n {
            let row = &vx.data[i * m..(i + 1) * m];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / T::from_f64(m as f64);
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / T::from_f64(m as f64);
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let xh = (row[j] - mean) * is;
                xhat[i * m + j] = xh;
                out[i * m + j] = xh * vg.data[j] + vb.data[j];
            }
        }
        self.push(
            TensorData::from_vec(&[n, m], out),
            vec![x, gamma, beta],
            Op::LayerNormRows { xhat, inv_std },
        )
    }

    /// 2-D convolution over NCHW input with an (out, in, kh, kw) kernel,
    /// square stride, and zero padding. Uses im2col + matmul internally.
    pub fn conv2d(&mut self, x: Var, wgt: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[wgt.0].value;
        let vb = &self.nodes[bias.0].value;
        assert_eq!(vx.shape.len(), 4, "conv2d expects NCHW input");
        let (n, cin, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (cout, cin2, kh, kw) = (vw.shape[0], vw.shape[1], vw.shape[2], vw.shape[3]);
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(vb.numel(), cout);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ctx = ConvCtx { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow };

        let cols = im2col(&vx.data, &ctx);
        let patches = n * oh * ow;
        let ksize = cin * kh * kw;
        // (patches, ksize) x (cout, ksize)^T -> (patches, cout)
        let mut z = vec![T::zero(); patches * cout];
        matmul_abt(&cols, &vw.data, &mut z, patches, ksize, cout);
        // Scatter into NCHW with bias.
        let mut out = vec![T::zero(); n * cout * oh * ow];
        for p in 0..patches {
            let (ni, rest) = (p / (oh * ow), p % (oh * ow));
            for c in 0..cout {
                out[((ni * cout + c) * oh * ow) + rest] = z[p * cout + c] + vb.data[c];
            }
        }
        self.push(
            TensorData::from_vec(&[n, cout, oh, ow], out),
            vec![x, wgt, bias],
            Op::Conv2d { ctx, cols },
        )
    }

    /// Global average pool: (n, c, h, w) -> (n, c).
    pub fn mean_pool_hw(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape.len(), 4);
        let (n, c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let plane = &vx.data[i * h * w..(i + 1) * h * w];
            out[i] = plane.iter().fold(T::zero(), |a, &b| a + b) * inv;
        }
        self.push(TensorData::from_vec(&[n, c], out), vec![x], Op::MeanPoolHw)
    }

    /// Temporal mean: (n, m) -> (1, m).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, m) = (vx.rows(), vx.cols());
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); m];
        for i in 0..n {
            for j in 0..m {
                out[j] += vx.data[i * m + j] * inv;
            }
        }
        self.push(TensorData::from_vec(&[1, m], out), vec![x], Op::MeanRows)
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, m) = (vx.rows(), vx.cols());
        assert!(from < to && to <= m, "bad column slice");
        let mut out = Vec::with_capacity(n * (to - from));
        for i in 0..n {
            out.extend_from_slice(&vx.data[i * m + from..i * m + to]);
        }
        self.push(TensorData::from_vec(&[n, to - from], out), vec![x], Op::SliceCols { from, to })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let m: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * m];
        let mut off = 0;
        for (p, &wid) in parts.iter().zip(&widths) {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                out[i * m + off..i * m + off + wid]
                    .copy_from_slice(&vp.data[i * wid..(i + 1) * wid]);
            }
            off += wid;
        }
        self.push(TensorData::from_vec(&[n, m], out), parts.to_vec(), Op::ConcatCols { widths })
    }

    /// Per-column min-max rescaling to [0, 1] over the rows (the time
    /// sequence). Columns with max == min map to all zeros.
    pub fn min_max_norm_cols(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, m) = (vx.rows(), vx.cols());
        assert!(n > 0, "min_max_norm_cols on empty sequence");
        let mut argmin = vec![0usize; m];
        let mut argmax = vec![0usize; m];
        let mut inv_range = vec![T::zero(); m];
        let mut out = vec![T::zero(); n * m];
        for j in 0..m {
            let (mut mn, mut mx) = (vx.data[j], vx.data[j]);
            for i in 1..n {
                let v = vx.data[i * m + j];
                if v < mn {
                    mn = v;
                    argmin[j] = i;
                }
                if v > mx {
                    mx = v;
                    argmax[j] = i;
                }
            }
            let range = mx - mn;
            if range > T::zero() {
                inv_range[j] = T::one() / range;
                for i in 0..n {
                    // Division keeps the column extremes exactly at 0 and 1.
                    out[i * m + j] = (vx.data[i * m + j] - mn) / range;
                }
            }
            // else: all zeros, inv_range stays 0 and the column passes no
            // gradient (the output is constant in a neighborhood).
        }
        self.push(
            TensorData::from_vec(&[n, m], out),
            vec![x],
            Op::MinMaxNormCols { argmin, argmax, inv_range },
        )
    }

    /// Dilated causal 1-D convolution along rows: x is (n, cin) with time as
    /// the row axis, weight is (cout, cin, k); y[t] only reads x[t' <= t].
    pub fn causal_conv1d(&mut self, x: Var, wgt: Var, bias: Var, dilation: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[wgt.0].value;
        let vb = &self.nodes[bias.0].value;
        let (n, cin) = (vx.rows(), vx.cols());
        let (cout, cin2, k) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        assert_eq!(cin, cin2, "causal_conv1d channel mismatch");
        assert_eq!(vb.numel(), cout);
        let mut out = vec![T::zero(); n * cout];
        for t in 0..n {
            for o in 0..cout {
                let mut acc = vb.data[o];
                for j in 0..k {
                    let lag = (k - 1 - j) * dilation;
                    if t >= lag {
                        let row = &vx.data[(t - lag) * cin..(t - lag + 1) * cin];
                        // weight layout (cout, cin, k): w[o][c][j]
                        for (c, &xv) in row.iter().enumerate() {
                            acc += vw.data[(o * cin + c) * k + j] * xv;
                        }
                    }
                }
                out[t * cout + o] = acc;
            }
        }
        self.push(
            TensorData::from_vec(&[n, cout], out),
            vec![x, wgt, bias],
            Op::CausalConv1d { dilation },
        )
    }

    /// Fused softmax cross-entropy on a (1, k) logit row; returns a scalar.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Var {
        let vl = &self.nodes[logits.0].value;
        let k = vl.cols();
        assert_eq!(vl.rows(), 1, "cross_entropy_logits expects a single logit row");
        assert!(target < k, "target class out of range");
        let row = &vl.data[..k];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        let mut probs = vec![T::zero(); k];
        for j in 0..k {
            probs[j] = (row[j] - max).exp();
            sum += probs[j];
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let loss = sum.ln() + max - row[target];
        self.push(TensorData::scalar(loss), vec![logits], Op::CrossEntropyLogits { target, probs })
    }

    /// Sum of scalar losses.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Reverse sweep from a scalar loss; returns per-variable gradients for
    /// every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<TensorData<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorData::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let keep = self.nodes[idx].needs_grad;
            if !keep && !matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            let contributions = self.backward_node(idx, &gout);
            grads[idx] = Some(gout);
            for (parent, contrib) in contributions {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.data.iter_mut().zip(&contrib.data) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, gout: &TensorData<T>) -> Vec<(Var, TensorData<T>)> {
        let node = &self.nodes[idx];
        let parents = &node.parents;
        let pval = |i: usize| &self.nodes[parents[i].0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add => {
                vec![(parents[0], gout.clone()), (parents[1], gout.clone())]
            }
            Op::AddBias => {
                let m = pval(1).numel();
                let mut db = TensorData::zeros(&pval(1).shape);
                for row in gout.data.chunks(m) {
                    for (d, &g) in db.data.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                vec![(parents[0], gout.clone()), (parents[1], db)]
            }
            Op::Scale(c) => {
                let mut dx = gout.clone();
                for v in dx.data.iter_mut() {
                    *v *= *c;
                }
                vec![(parents[0], dx)]
            }
            Op::MatMul => {
                let (a, b) = (pval(0), pval(1));
                let (n, k, m) = (a.rows(), a.cols(), b.cols());
                let mut da = vec![T::zero(); n * k];
                matmul_abt(&gout.data, &b.data, &mut da, n, m, k);
                let mut db = vec![T::zero(); k * m];
                matmul_atb(&a.data, &gout.data, &mut db, n, k, m);
                vec![
                    (parents[0], TensorData::from_vec(&a.shape, da)),
                    (parents[1], TensorData::from_vec(&b.shape, db)),
                ]
            }
            Op::MatMulBt => {
                let (a, b) = (pval(0), pval(1));
                let (n, k, m) = (a.rows(), a.cols(), b.rows());
                let mut da = vec![T::zero(); n * k];
                matmul_acc(&gout.data, &b.data, &mut da, n, m, k);
                let mut db = vec![T::zero(); m * k];
                matmul_atb(&gout.data, &a.data, &mut db, n, m, k);
                vec![
                    (parents[0], TensorData::from_vec(&a.shape, da)),
                    (parents[1], TensorData::from_vec(&b.shape, db)),
                ]
            }
            Op::Relu => {
                let x = pval(0);
                let data = x
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(parents[0], TensorData { shape: x.shape.clone(), data })]
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let m = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for (i, (yr, gr)) in y.data.chunks(m).zip(gout.data.chunks(m)).enumerate() {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for j in 0..m {
                        dx[i * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(parents[0], TensorData { shape: y.shape.clone(), data: dx })]
            }
            Op::LayerNormRows { xhat, inv_std } => {
                let x = pval(0);
                let gamma = pval(1);
                let (n, m) = (x.rows(), x.cols());
                let inv_m = T::from_f64(1.0 / m as f64);
                let mut dx = vec![T::zero(); n * m];
                let mut dgamma = vec![T::zero(); m];
                let mut dbeta = vec![T::zero(); m];
                for i in 0..n {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..m {
                        let g = gout.data[i * m + j] * gamma.data[j];
                        sum_g += g;
                        sum_gx += g * xhat[i * m + j];
                        dgamma[j] += gout.data[i * m + j] * xhat[i * m + j];
                        dbeta[j] += gout.data[i * m + j];
                    }
                    for j in 0..m {
                        let g = gout.data[i * m + j] * gamma.data[j];
                        dx[i * m + j] =
                            (g - sum_g * inv_m - xhat[i * m + j] * sum_gx * inv_m) * inv_std[i];
                    }
                }
                vec![
                    (parents[0], TensorData::from_vec(&x.shape, dx)),
                    (parents[1], TensorData::from_vec(&gamma.shape, dgamma)),
                    (parents[2], TensorData::from_vec(&self.nodes[parents[2].0].value.shape, dbeta)),
                ]
            }
            Op::Conv2d { ctx, cols } => {
                let wv = pval(1);
                let patches = ctx.n * ctx.oh * ctx.ow;
                let ksize = ctx.cin * ctx.kh * ctx.kw;
                // Gather upstream into (patches, cout).
                let mut dz = vec![T::zero(); patches * ctx.cout];
                let mut db = vec![T::zero(); ctx.cout];
                for p in 0..patches {
                    let (ni, rest) = (p / (ctx.oh * ctx.ow), p % (ctx.oh * ctx.ow));
                    for c in 0..ctx.cout {
                        let g = gout.data[(ni * ctx.cout + c) * ctx.oh * ctx.ow + rest];
                        dz[p * ctx.cout + c] = g;
                        db[c] += g;
                    }
                }
                let mut dw = vec![T::zero(); ctx.cout * ksize];
                matmul_atb(&dz, cols, &mut dw, patches, ctx.cout, ksize);
                let mut dcols = vec![T::zero(); patches * ksize];
                matmul_acc(&dz, &wv.data, &mut dcols, patches, ctx.cout, ksize);
                let dx = col2im(&dcols, ctx);
                vec![
                    (parents[0], TensorData::from_vec(&pval(0).shape, dx)),
                    (parents[1], TensorData::from_vec(&wv.shape, dw)),
                    (parents[2], TensorData::from_vec(&self.nodes[parents[2].0].value.shape, db)),
                ]
            }
            Op::MeanPoolHw => {
                let x = pval(0);
                let (h, w) = (x.shape[2], x.shape[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = vec![T::zero(); x.numel()];
                for i in 0..gout.numel() {
                    let g = gout.data[i] * inv;
                    for v in dx[i * h * w..(i + 1) * h * w].iter_mut() {
                        *v = g;
                    }
                }
                vec![(parents[0], TensorData::from_vec(&x.shape, dx))]
            }
            Op::MeanRows => {
                let x = pval(0);
                let (n, m) = (x.rows(), x.cols());
                let inv = T::from_f64(1.0 / n as f64);
                let mut dx = vec![T::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = gout.data[j] * inv;
                    }
                }
                vec![(parents[0], TensorData::from_vec(&x.shape, dx))]
            }
            Op::SliceCols { from, to } => {
                let x = pval(0);
                let (n, m) = (x.rows(), x.cols());
                let wid = to - from;
                let mut dx = vec![T::zero(); n * m];
                for i in 0..n {
                    dx[i * m + from..i * m + to].copy_from_slice(&gout.data[i * wid..(i + 1) * wid]);
                }
                vec![(parents[0], TensorData::from_vec(&x.shape, dx))]
            }
            Op::ConcatCols { widths } => {
                let n = node.value.rows();
                let m = node.value.cols();
                let mut out = Vec::with_capacity(parents.len());
                let mut off = 0;
                for (pi, &wid) in widths.iter().enumerate() {
                    let mut dp = vec![T::zero(); n * wid];
                    for i in 0..n {
                        dp[i * wid..(i + 1) * wid]
                            .copy_from_slice(&gout.data[i * m + off..i * m + off + wid]);
                    }
                    out.push((parents[pi], TensorData::from_vec(&[n, wid], dp)));
                    off += wid;
                }
                out
            }
            Op::MinMaxNormCols { argmin, argmax, inv_range } => {
                let y = &node.value;
                let (n, m) = (y.rows(), y.cols());
                let mut dx = vec![T::zero(); n * m];
                for j in 0..m {
                    let ir = inv_range[j];
                    if ir == T::zero() {
                        continue;
                    }
                    let mut sum_g = T::zero();
                    let mut sum_gy = T::zero();
                    for i in 0..n {
                        let g = gout.data[i * m + j];
                        sum_g += g;
                        sum_gy += g * y.data[i * m + j];
                        dx[i * m + j] = g * ir;
                    }
                    // d/d x_min: every output shifts and rescales; d/d x_max:
                    // pure rescale. Derived from y_i = (x_i - mn) / (mx - mn).
                    dx[argmin[j] * m + j] += (sum_gy - sum_g) * ir;
                    dx[argmax[j] * m + j] -= sum_gy * ir;
                }
                vec![(parents[0], TensorData::from_vec(&pval(0).shape, dx))]
            }
            Op::CausalConv1d { dilation } => {
                let x = pval(0);
                let wv = pval(1);
                let (n, cin) = (x.rows(), x.cols());
                let (cout, _, k) = (wv.shape[0], wv.shape[1], wv.shape[2]);
                let mut dx = vec![T::zero(); n * cin];
                let mut dw = vec![T::zero(); wv.numel()];
                let mut db = vec![T::zero(); cout];
                for t in 0..n {
                    for o in 0..cout {
                        let g = gout.data[t * cout + o];
                        db[o] += g;
                        for j in 0..k {
                            let lag = (k - 1 - j) * dilation;
                            if t >= lag {
                                for c in 0..cin {
                                    dw[(o * cin + c) * k + j] += g * x.data[(t - lag) * cin + c];
                                    dx[(t - lag) * cin + c] += g * wv.data[(o * cin + c) * k + j];
                                }
                            }
                        }
                    }
                }
                vec![
                    (parents[0], TensorData::from_vec(&x.shape, dx)),
                    (parents[1], TensorData::from_vec(&wv.shape, dw)),
                    (parents[2], TensorData::from_vec(&self.nodes[parents[2].0].value.shape, db)),
                ]
            }
            Op::CrossEntropyLogits { target, probs } => {
                let g = gout.data[0];
                let mut dl = probs.clone();
                dl[*target] -= T::one();
                for v in dl.iter_mut() {
                    *v *= g;
                }
                vec![(parents[0], TensorData::from_vec(&pval(0).shape, dl))]
            }
        }
    }
}

/// Gradients keyed by graph variable.
pub struct Gradients<T> {
    grads: Vec<Option<TensorData<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&TensorData<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<TensorData<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

// C(n,m) += A(n,k) * B(k,m)
fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// C(k,m) += A(n,k)^T * B(n,m)
fn matmul_atb<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * m..(kk + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// C(n,m) += A(n,k) * B(m,k)^T
fn matmul_abt<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            c[i * m + j] += acc;
        }
    }
}

fn im2col<T: Real>(x: &[T], ctx: &ConvCtx) -> Vec<T> {
    let ksize = ctx.cin * ctx.kh * ctx.kw;
    let mut cols = vec![T::zero(); ctx.n * ctx.oh * ctx.ow * ksize];
    let mut p = 0;
    for ni in 0..ctx.n {
        for oy in 0..ctx.oh {
            for ox in 0..ctx.ow {
                let base = p * ksize;
                let iy0 = (oy * ctx.stride) as isize - ctx.pad as isize;
                let ix0 = (ox * ctx.stride) as isize - ctx.pad as isize;
                let mut q = base;
                for c in 0..ctx.cin {
                    let plane = &x[(ni * ctx.cin + c) * ctx.h * ctx.w..];
                    for ky in 0..ctx.kh {
                        let iy = iy0 + ky as isize;
                        for kx in 0..ctx.kw {
                            let ix = ix0 + kx as isize;
                            if iy >= 0 && iy < ctx.h as isize && ix >= 0 && ix < ctx.w as isize {
                                cols[q] = plane[iy as usize * ctx.w + ix as usize];
                            }
                            q += 1;
                        }
                    }
                }
                p += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &[T], ctx: &ConvCtx) -> Vec<T> {
    let ksize = ctx.cin * ctx.kh * ctx.kw;
    let mut dx = vec![T::zero(); ctx.n * ctx.cin * ctx.h * ctx.w];
    let mut p = 0;
    for ni in 0..ctx.n {
        for oy in 0..ctx.oh {
            for ox in 0..ctx.ow {
                let base = p * ksize;
                let iy0 = (oy * ctx.stride) as isize - ctx.pad as isize;
                let ix0 = (ox * ctx.stride) as isize - ctx.pad as isize;
                let mut q = base;
                for c in 0..ctx.cin {
                    let off = (ni * ctx.cin + c) * ctx.h * ctx.w;
                    for ky in 0..ctx.kh {
                        let iy = iy0 + ky as isize;
                        for kx in 0..ctx.kw {
                            let ix = ix0 + kx as isize;
                            if iy >= 0 && iy < ctx.h as isize && ix >= 0 && ix < ctx.w as isize {
                                dx[off + iy as usize * ctx.w + ix as usize] += dcols[q];
                            }
                            q += 1;
                        }
                    }
                }
                p += 1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> TensorData<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        TensorData::from_vec(shape, data)
    }

    /// Central finite differences against the analytic gradient for an
    /// arbitrary graph builder.
    fn check_op<F>(build: F, param_shapes: &[&[usize]], tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let values: Vec<TensorData<f64>> =
            param_shapes.iter().map(|s| randn(&mut rng, s)).collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.param(v.clone())).collect();
        let loss = build(&mut g, &vars);
        let mut grads = g.backward(loss);
        let analytic: Vec<TensorData<f64>> =
            vars.iter().map(|&v| grads.take(v).expect("missing grad")).collect();

        let eps = 1e-5;
        for (pi, shape) in param_shapes.iter().enumerate() {
            for idx in 0..shape.iter().product::<usize>() {
                let mut perturbed = values.clone();
                perturbed[pi].data[idx] += eps;
                let mut g1 = Graph::new();
                let v1: Vec<Var> = perturbed.iter().map(|v| g1.param(v.clone())).collect();
                let l1 = build(&mut g1, &v1);
                let up = g1.value(l1).data[0];

                perturbed[pi].data[idx] -= 2.0 * eps;
                let mut g2 = Graph::new();
                let v2: Vec<Var> = perturbed.iter().map(|v| g2.param(v.clone())).collect();
                let l2 = build(&mut g2, &v2);
                let down = g2.value(l2).data[0];

                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[pi].data[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "param {pi} idx {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn sum_all(g: &mut Graph<f64>, x: Var) -> Var {
        // Reduce to a scalar via mean ops so every element contributes.
        let m = g.value(x).cols();
        let pooled = g.mean_rows(x);
        let n1 = g.value(pooled).numel();
        assert_eq!(n1, m);
        let mut acc = g.slice_cols(pooled, 0, 1);
        for j in 1..m {
            let col = g.slice_cols(pooled, j, j + 1);
            acc = g.add(acc, col);
        }
        acc
    }

    #[test]
    fn grad_matmul_bias_relu() {
        check_op(
            |g, vars| {
                let y = g.matmul(vars[0], vars[1]);
                let y = g.add_bias(y, vars[2]);
                let y = g.relu(y);
                sum_all(g, y)
            },
            &[&[3, 4], &[4, 5], &[5]],
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_bt() {
        check_op(
            |g, vars| {
                let y = g.matmul_bt(vars[0], vars[1]);
                sum_all(g, y)
            },
            &[&[3, 4], &[6, 4]],
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_cross_entropy() {
        check_op(
            |g, vars| {
                let y = g.matmul(vars[0], vars[1]);
                g.cross_entropy_logits(y, 2)
            },
            &[&[1, 4], &[4, 6]],
            1e-6,
        );
    }

    #[test]
    fn grad_layer_norm() {
        check_op(
            |g, vars| {
                let y = g.layer_norm_rows(vars[0], vars[1], vars[2], 1e-5);
                sum_all_weighted(g, y)
            },
            &[&[4, 6], &[6], &[6]],
            1e-5,
        );
    }

    /// A non-uniform scalarization so symmetric errors cannot cancel.
    fn sum_all_weighted(g: &mut Graph<f64>, x: Var) -> Var {
        let (n, m) = (g.value(x).rows(), g.value(x).cols());
        let w: Vec<f64> = (0..n * m).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wvar = g.input(TensorData::from_vec(&[m, 1], w[..m].to_vec()));
        let prod = g.matmul(x, wvar);
        let pooled = g.mean_rows(prod);
        g.scale(pooled, n as f64)
    }

    #[test]
    fn grad_softmax_rows() {
        check_op(
            |g, vars| {
                let y = g.softmax_rows(vars[0]);
                sum_all_weighted(g, y)
            },
            &[&[3, 5]],
            1e-6,
        );
    }

    #[test]
    fn grad_minmax_norm() {
        check_op(
            |g, vars| {
                let y = g.min_max_norm_cols(vars[0]);
                sum_all_weighted(g, y)
            },
            &[&[6, 4]],
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d() {
        check_op(
            |g, vars| {
                let y = g.conv2d(vars[0], vars[1], vars[2], 2, 1);
                let y = g.relu(y);
                let p = g.mean_pool_hw(y);
                sum_all_weighted(g, p)
            },
            &[&[2, 2, 6, 7], &[3, 2, 3, 3], &[3]],
            1e-5,
        );
    }

    #[test]
    fn grad_causal_conv() {
        check_op(
            |g, vars| {
                let y = g.causal_conv1d(vars[0], vars[1], vars[2], 2);
                sum_all_weighted(g, y)
            },
            &[&[9, 3], &[4, 3, 3], &[4]],
            1e-6,
        );
    }

    #[test]
    fn grad_slice_concat() {
        check_op(
            |g, vars| {
                let a = g.slice_cols(vars[0], 0, 2);
                let b = g.slice_cols(vars[0], 2, 5);
                let y = g.concat_cols(&[b, a]);
                sum_all_weighted(g, y)
            },
            &[&[4, 5]],
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = g.input(randn(&mut rng, &[50, 17]));
        let y = g.softmax_rows(x);
        for row in g.value(y).data.chunks(17) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn minmax_hits_zero_and_one() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = g.input(randn(&mut rng, &[20, 6]));
        let y = g.min_max_norm_cols(x);
        let v = g.value(y);
        for j in 0..6 {
            let col: Vec<f64> = (0..20).map(|i| v.data[i * 6 + j]).collect();
            let mn = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(mn, 0.0);
            assert_eq!(mx, 1.0);
            assert!(col.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn minmax_constant_column_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(TensorData::from_vec(&[3, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]));
        let y = g.min_max_norm_cols(x);
        let v = g.value(y);
        assert_eq!(v.data[0], 0.0);
        assert_eq!(v.data[2], 0.0);
        assert_eq!(v.data[4], 0.0);
    }

    #[test]
    fn minmax_affine_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let base = randn(&mut rng, &[10, 3]);
        let mut scaled = base.clone();
        for v in scaled.data.iter_mut() {
            *v = 2.5 * *v + 7.0;
        }
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(base);
        let b = g.input(scaled);
        let ya = g.min_max_norm_cols(a);
        let yb = g.min_max_norm_cols(b);
        for (x, y) in g.value(ya).data.iter().zip(&g.value(yb).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_conv_zero_input_is_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let w = randn(&mut rng, &[4, 3, 3]);
        let b = randn(&mut rng, &[4]);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(TensorData::zeros(&[15, 3]));
        let wv = g.input(w);
        let bv = g.input(b.clone());
        let y = g.causal_conv1d(x, wv, bv, 2);
        for row in g.value(y).data.chunks(4) {
            assert_eq!(row, &b.data[..], "zero input must yield the bias at every step");
        }
    }

    #[test]
    fn causal_conv_is_causal() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x0 = randn(&mut rng, &[12, 3]);
        let w = randn(&mut rng, &[3, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let mut x1 = x0.clone();
        let t_perturb = 7;
        x1.data[t_perturb * 3] += 10.0;

        let run = |x: TensorData<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.input(x);
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let y = g.causal_conv1d(xv, wv, bv, 2);
            g.value(y).clone()
        };
        let y0 = run(x0);
        let y1 = run(x1);
        let mut any_after = false;
        for t in 0..12 {
            let differs = (0..3).any(|c| y0.data[t * 3 + c] != y1.data[t * 3 + c]);
            if t < t_perturb {
                assert!(!differs, "causality violated at t={t}");
            }
            any_after |= differs;
        }
        assert!(any_after, "perturbation had no effect at all");
    }
}
