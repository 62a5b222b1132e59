//! A small reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node list
//! is a valid topological order for backpropagation. Leaves are either inputs
//! (no gradient unless requested) or named parameters from a [`ParamStore`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::conv::{self, ConvGeom};
use super::params::ParamStore;
use super::real::{gemm, Layout, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: usize,
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Affine { x: Var, scale: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentMean { x: Var, segments: Vec<Vec<usize>> },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    ConvT2d { x: Var, w: Var, b: Var, out_geom: ConvGeom, in_channels: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ChannelAffine { x: Var, scale: Vec<T> },
    PairwiseLogDensity { z: Var, mu: Var, inv_two_var: T },
    LogSumExpRows(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward tape; doubles as the saved-activation record for backward.
pub struct Graph<'p, T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
    store: &'p ParamStore<T>,
    params: BTreeMap<String, Var>,
    training: bool,
    batch_stats: Vec<BatchStats<T>>,
}

/// Per-channel mean and unbiased variance seen by one normalization layer.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Gradients of one backward sweep, kept for leaves only.
pub struct Gradients<T> {
    graph: u32,
    leaf_grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf; zeros if the leaf was not reached.
    pub fn of(&self, v: Var) -> Result<Tensor<T>> {
        if v.graph != self.graph || v.index >= self.shapes.len() {
            return Err(Error::MissingState(format!("{v:?} is not a node of this graph")));
        }
        let shape = self.shapes[v.index].clone();
        Ok(match &self.leaf_grads[v.index] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        })
    }

    /// Gradient for every parameter used by the graph, keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.of(v).expect("own node")))
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&v| self.of(v).expect("own node"))
    }
}

fn zeros_like<T: Real>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            store,
            params: BTreeMap::new(),
            training: false,
            batch_stats: Vec::new(),
        }
    }

    /// Normalization layers use batch statistics and record them.
    pub fn training(store: &'p ParamStore<T>) -> Self {
        Self { training: true, ..Self::new(store) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.batch_stats
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.node(*v).requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    /// Input whose gradient is recorded by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    /// Parameter leaf. Each name maps to a single node, so repeated use
    /// accumulates into one gradient.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not in store"))
            .clone();
        let v = self.input_with_grad(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn constant(&mut self, shape: &[usize], v: T) -> Var {
        self.input(Tensor::from_fn(shape, |_| v))
    }

    // ---- dense ops -------------------------------------------------------

    /// `x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        assert!(xs.len() == 2 && ws.len() == 2, "linear expects matrices, got {xs:?} {ws:?}");
        assert_eq!(xs[1], ws[1], "linear input width {xs:?} vs weight {ws:?}");
        assert_eq!(bs, vec![ws[0]], "bias shape");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * o];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            gemm(n, i, o, xv, Layout::Normal, wv, Layout::Transposed, &mut y, false);
            let bv = &self.value(b).data;
            for row in y.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v = *v + *bb;
                }
            }
        }
        self.push(Tensor { shape: vec![n, o], data: y }, Op::Linear { x, w, b }, &[x, w, b])
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| f(*v)).collect() };
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |v| v.ln())
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.map(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().fold(T::zero(), |acc, v| acc + *v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum of scalars (shape `[1]` each); `0` for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(&[1], T::zero()),
            Some((first, rest)) => rest.iter().fold(*first, |acc, t| self.add(acc, *t)),
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.shape(*p);
                assert!(s.len() == 2 && s[0] == n, "concat_cols row mismatch: {s:?}");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor { shape: vec![n, total], data }, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && start + len <= s[1], "slice_cols out of range on {s:?}");
        let (n, w) = (s[0], s[1]);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv[r * w + start..r * w + start + len]);
        }
        self.push(Tensor { shape: vec![n, len], data }, Op::SliceCols { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select_rows(idx);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Row means over index segments of a `[n, d]` matrix → `[segments, d]`.
    ///
    /// Indices are summed in ascending order regardless of how they are given,
    /// so the result is bitwise invariant to permutations of a segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[Vec<usize>]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let d = s[1];
        let segments: Vec<Vec<usize>> = segments
            .iter()
            .map(|seg| {
                assert!(!seg.is_empty(), "empty segment");
                let mut seg = seg.clone();
                seg.sort_unstable();
                seg
            })
            .collect();
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); segments.len() * d];
        for (si, seg) in segments.iter().enumerate() {
            let out = &mut data[si * d..(si + 1) * d];
            for &i in seg {
                for (o, v) in out.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                    *o = *o + *v;
                }
            }
            let inv = T::one() / T::from_usize(seg.len()).unwrap();
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        let value = Tensor { shape: vec![segments.len(), d], data };
        self.push(value, Op::SegmentMean { x, segments }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape size");
        self.push(value, Op::Reshape(x), &[x])
    }

    // ---- convolution -----------------------------------------------------

    /// `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1] && ws[2] == ws[3], "conv2d shapes {xs:?} {ws:?}");
        let geom = ConvGeom { batch: xs[0], channels: xs[1], h: xs[2], w: xs[3], kernel: ws[2], stride, pad };
        let (oh, ow, o) = (geom.out_h(), geom.out_w(), ws[0]);
        assert!(oh > 0 && ow > 0, "conv2d produces empty output for {xs:?}");
        let cols = conv::im2col(&self.value(x).data, &geom);
        let l = geom.col_cols();
        let mut ymat = vec![T::zero(); o * l];
        gemm(o, geom.col_rows(), l, &self.value(w).data, Layout::Normal, &cols, Layout::Normal, &mut ymat, false);
        let bv = &self.value(b).data;
        for (oc, row) in ymat.chunks_mut(l).enumerate() {
            for v in row.iter_mut() {
                *v = *v + bv[oc];
            }
        }
        let y = conv::channel_to_batch_major(&ymat, geom.batch, o, oh * ow);
        let value = Tensor { shape: vec![geom.batch, o, oh, ow], data: y };
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// Transposed convolution. `x: [B, Cin, H, W]`, `w: [Cin, Cout, k, k]`, `b: [Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[0] && ws[2] == ws[3], "deconv shapes {xs:?} {ws:?}");
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let oh = conv::deconv_out(h, k, stride, pad);
        let ow = conv::deconv_out(wd, k, stride, pad);
        let out_geom = ConvGeom { batch, channels: cout, h: oh, w: ow, kernel: k, stride, pad };
        assert_eq!((out_geom.out_h(), out_geom.out_w()), (h, wd), "deconv geometry not invertible");
        let l = batch * h * wd;
        let xmat = conv::batch_to_channel_major(&self.value(x).data, batch, cin, h * wd);
        let mut cols = vec![T::zero(); cout * k * k * l];
        gemm(cout * k * k, cin, l, &self.value(w).data, Layout::Transposed, &xmat, Layout::Normal, &mut cols, false);
        let mut y = conv::col2im(&cols, &out_geom);
        let bv = &self.value(b).data;
        let plane = oh * ow;
        for bi in 0..batch {
            for c in 0..cout {
                for v in &mut y[(bi * cout + c) * plane..(bi * cout + c + 1) * plane] {
                    *v = *v + bv[c];
                }
            }
        }
        let value = Tensor { shape: vec![batch, cout, oh, ow], data: y };
        self.push(value, Op::ConvT2d { x, w, b, out_geom, in_channels: cin }, &[x, w, b])
    }

    /// Per-channel batch normalization over `(B, H, W)` with batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        self.batch_norm_stats(x, gamma, beta).0
    }

    fn batch_norm_stats(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<T>, Vec<T>) {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (batch, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let eps = T::from_f64c(1e-5);
        let m = T::from_usize(batch * plane).unwrap();
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let (mut means, mut vars) = (vec![T::zero(); c], vec![T::zero(); c]);
        for ch in 0..c {
            let idx = |bi: usize| (bi * c + ch) * plane;
            let mut mean = T::zero();
            for bi in 0..batch {
                mean = mean + xv[idx(bi)..idx(bi) + plane].iter().fold(T::zero(), |a, v| a + *v);
            }
            mean = mean / m;
            let mut var = T::zero();
            for bi in 0..batch {
                var = var + xv[idx(bi)..idx(bi) + plane].iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean));
            }
            means[ch] = mean;
            vars[ch] = if batch * plane > 1 { var / (m - T::one()) } else { var };
            var = var / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..batch {
                for p in idx(bi)..idx(bi) + plane {
                    xhat[p] = (xv[p] - mean) * is;
                    y[p] = gv[ch] * xhat[p] + bv[ch];
                }
            }
        }
        let value = Tensor { shape: xs, data: y };
        (self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]), means, vars)
    }

    /// Normalization layer `{prefix}.{gamma,beta,running_mean,running_var}`:
    /// batch statistics while training, running statistics otherwise.
    pub fn normalize(&mut self, x: Var, prefix: &str) -> Var {
        if self.training {
            let gamma = self.param(&format!("{prefix}.gamma"));
            let beta = self.param(&format!("{prefix}.beta"));
            let (y, mean, var) = self.batch_norm_stats(x, gamma, beta);
            self.batch_stats.push(BatchStats { prefix: prefix.to_string(), mean, var });
            return y;
        }
        let get = |name: &str| {
            self.store.get(&format!("{prefix}.{name}")).unwrap_or_else(|| panic!("missing parameter {prefix}.{name}")).data.clone()
        };
        let (gamma, beta, mean, var) = (get("gamma"), get("beta"), get("running_mean"), get("running_var"));
        let eps = T::from_f64c(1e-5);
        let scale: Vec<T> = gamma.iter().zip(&var).map(|(g, v)| *g / (*v + eps).sqrt()).collect();
        let shift: Vec<T> = beta.iter().zip(&mean).zip(&scale).map(|((b, m), s)| *b - *m * *s).collect();
        self.channel_affine(x, scale, &shift)
    }

    /// `y[:, c] = scale[c]·x[:, c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: &[T]) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, plane) = (xs[1], xs[2..].iter().product::<usize>());
        assert_eq!(scale.len(), c);
        let data = self.value(x).data.iter().enumerate().map(|(i, v)| {
            let ch = (i / plane) % c;
            scale[ch] * *v + shift[ch]
        });
        let value = Tensor { shape: xs.clone(), data: data.collect() };
        self.push(value, Op::ChannelAffine { x, scale }, &[x])
    }

    // ---- density ops -----------------------------------------------------

    /// `out[i, j] = log N(z_i; mu_j, sigma² I)` for `z, mu: [M, D]`.
    pub fn pairwise_log_density(&mut self, z: Var, mu: Var, sigma: T) -> Var {
        let (zs, ms) = (self.shape(z).to_vec(), self.shape(mu).to_vec());
        assert!(zs.len() == 2 && ms.len() == 2 && zs[1] == ms[1], "pairwise shapes {zs:?} {ms:?}");
        let (m_z, m_mu, d) = (zs[0], ms[0], zs[1]);
        let two_pi = T::from_f64c(2.0 * std::f64::consts::PI);
        let half = T::from_f64c(0.5);
        let c = -half * T::from_usize(d).unwrap() * (two_pi * sigma * sigma).ln();
        let inv_two_var = T::one() / (T::from_f64c(2.0) * sigma * sigma);
        let (zv, mv) = (&self.value(z).data, &self.value(mu).data);
        let mut out = vec![T::zero(); m_z * m_mu];
        for i in 0..m_z {
            let zi = &zv[i * d..(i + 1) * d];
            for j in 0..m_mu {
                let mj = &mv[j * d..(j + 1) * d];
                let sq = zi.iter().zip(mj).fold(T::zero(), |a, (p, q)| a + (*p - *q) * (*p - *q));
                out[i * m_mu + j] = c - sq * inv_two_var;
            }
        }
        let value = Tensor { shape: vec![m_z, m_mu], data: out };
        self.push(value, Op::PairwiseLogDensity { z, mu, inv_two_var }, &[z, mu])
    }

    /// Row-wise log-sum-exp with max subtraction, `[M, K]` → `[M]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let k = s[1];
        let data = self
            .value(x)
            .data
            .chunks(k)
            .map(|row| {
                let m = row.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
                m + row.iter().fold(T::zero(), |a, v| a + (*v - m).exp()).ln()
            })
            .collect();
        self.push(Tensor { shape: vec![s[0]], data }, Op::LogSumExpRows(x), &[x])
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let n = self.check(output)?.value.len();
        if n != 1 {
            return Err(Error::Shape(format!("backward needs a scalar output, got {n} elements")));
        }
        self.backward_with(output, Tensor::scalar(T::one()))
    }

    /// Backpropagate an arbitrary output gradient (vector–Jacobian product).
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let out = self.check(output)?;
        if out.value.shape != seed.shape {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                seed.shape, out.value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.index] = Some(seed.data);
        for i in (0..=output.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
        }
        // Keep only leaf gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients {
            graph: self.id,
            leaf_grads: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::MissingState(format!("{v:?} has no saved forward state in this graph")));
        }
        Ok(&self.nodes[v.index])
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        // Returns the gradient buffer of `v` if it needs one.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.index].requires_grad {
                    let len = self.nodes[v.index].value.len();
                    Some(grads[v.index].get_or_insert_with(|| zeros_like(len)))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[x.index].value;
                let (n, inp) = (xs.shape[0], xs.shape[1]);
                let o = self.nodes[w.index].value.shape[0];
                if let Some(gx) = acc!(*x) {
                    gemm(n, o, inp, gy, Layout::Normal, &self.nodes[w.index].value.data, Layout::Normal, gx, true);
                }
                if let Some(gw) = acc!(*w) {
                    gemm(o, n, inp, gy, Layout::Transposed, &xs.data, Layout::Normal, gw, true);
                }
                if let Some(gb) = acc!(*b) {
                    for row in gy.chunks(o) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g = *g + *v;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((g, d), yv) in gx.iter_mut().zip(gy).zip(y) {
                        if *yv > T::zero() {
                            *g = *g + *d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((g, d), yv) in gx.iter_mut().zip(gy).zip(y) {
                        *g = *g + *d * *yv * (T::one() - *yv);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((g, d), yv) in gx.iter_mut().zip(gy).zip(y) {
                        *g = *g + *d * *yv;
                    }
                }
            }
            Op::Log(x) => {
                let xv = &self.nodes[x.index].value.data;
                if let Some(gx) = acc!(*x) {
                    for ((g, d), xv) in gx.iter_mut().zip(gy).zip(xv) {
                        *g = *g + *d / *xv;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = acc!(*x) {
                    for (g, d) in gx.iter_mut().zip(gy) {
                        *g = *g + *scale * *d;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = acc!(*a) {
                    for (g, d) in ga.iter_mut().zip(gy) {
                        *g = *g + *d;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (g, d) in gb.iter_mut().zip(gy) {
                        *g = *g + sign * *d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.index].value.data, &self.nodes[b.index].value.data);
                if let Some(ga) = acc!(*a) {
                    for ((g, d), bv) in ga.iter_mut().zip(gy).zip(bv) {
                        *g = *g + *d * *bv;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((g, d), av) in gb.iter_mut().zip(gy).zip(av) {
                        *g = *g + *d * *av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a.index].value.data, &self.nodes[b.index].value.data);
                if let Some(ga) = acc!(*a) {
                    for ((g, d), bv) in ga.iter_mut().zip(gy).zip(bv) {
                        *g = *g + *d / *bv;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (((g, d), av), bv) in gb.iter_mut().zip(gy).zip(av).zip(bv) {
                        *g = *g - *d * *av / (*bv * *bv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    for g in gx.iter_mut() {
                        *g = *g + gy[0];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape[0];
                let total = node.value.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.index].value.shape[1];
                    if let Some(gp) = acc!(*p) {
                        for r in 0..n {
                            for j in 0..w {
                                gp[r * w + j] = gp[r * w + j] + gy[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = self.nodes[x.index].value.shape[1];
                let (n, len) = (node.value.shape[0], node.value.shape[1]);
                if let Some(gx) = acc!(*x) {
                    for r in 0..n {
                        for j in 0..len {
                            gx[r * w + start + j] = gx[r * w + start + j] + gy[r * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let w = self.nodes[x.index].value.row_len();
                if let Some(gx) = acc!(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..w {
                            gx[src * w + j] = gx[src * w + j] + gy[r * w + j];
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let d = node.value.shape[1];
                if let Some(gx) = acc!(*x) {
                    for (si, seg) in segments.iter().enumerate() {
                        let inv = T::one() / T::from_usize(seg.len()).unwrap();
                        for &r in seg {
                            for j in 0..d {
                                gx[r * d + j] = gx[r * d + j] + gy[si * d + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    for (g, d) in gx.iter_mut().zip(gy) {
                        *g = *g + *d;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.nodes[w.index].value.shape[0];
                let plane = geom.out_h() * geom.out_w();
                let l = geom.col_cols();
                let ckk = geom.col_rows();
                let gymat = conv::batch_to_channel_major(gy, geom.batch, o, plane);
                if let Some(gw) = acc!(*w) {
                    gemm(o, l, ckk, &gymat, Layout::Normal, cols, Layout::Transposed, gw, true);
                }
                if let Some(gb) = acc!(*b) {
                    for (oc, row) in gymat.chunks(l).enumerate() {
                        gb[oc] = gb[oc] + row.iter().fold(T::zero(), |a, v| a + *v);
                    }
                }
                if self.nodes[x.index].requires_grad {
                    let mut gcols = vec![T::zero(); ckk * l];
                    gemm(ckk, o, l, &self.nodes[w.index].value.data, Layout::Transposed, &gymat, Layout::Normal, &mut gcols, false);
                    let gx_local = conv::col2im(&gcols, geom);
                    if let Some(gx) = acc!(*x) {
                        for (g, v) in gx.iter_mut().zip(gx_local) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::ConvT2d { x, w, b, out_geom, in_channels } => {
                let cin = *in_channels;
                let k = out_geom.kernel;
                let rows = out_geom.channels * k * k;
                let (batch, h, wd) = {
                    let s = &self.nodes[x.index].value.shape;
                    (s[0], s[2], s[3])
                };
                let l = batch * h * wd;
                let gcols = conv::im2col(gy, out_geom);
                if let Some(gw) = acc!(*w) {
                    let xmat = conv::batch_to_channel_major(&self.nodes[x.index].value.data, batch, cin, h * wd);
                    gemm(cin, l, rows, &xmat, Layout::Normal, &gcols, Layout::Transposed, gw, true);
                }
                if let Some(gb) = acc!(*b) {
                    let plane = out_geom.h * out_geom.w;
                    for bi in 0..batch {
                        for c in 0..out_geom.channels {
                            let s = &gy[(bi * out_geom.channels + c) * plane..(bi * out_geom.channels + c + 1) * plane];
                            gb[c] = gb[c] + s.iter().fold(T::zero(), |a, v| a + *v);
                        }
                    }
                }
                if self.nodes[x.index].requires_grad {
                    let mut gxmat = vec![T::zero(); cin * l];
                    gemm(cin, rows, l, &self.nodes[w.index].value.data, Layout::Normal, &gcols, Layout::Normal, &mut gxmat, false);
                    let gx_local = conv::channel_to_batch_major(&gxmat, batch, cin, h * wd);
                    if let Some(gx) = acc!(*x) {
                        for (g, v) in gx.iter_mut().zip(gx_local) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale } => {
                let s = &node.value.shape;
                let (c, plane) = (s[1], s[2..].iter().product::<usize>());
                if let Some(gx) = acc!(*x) {
                    for (i, (g, d)) in gx.iter_mut().zip(gy).enumerate() {
                        *g = *g + scale[(i / plane) % c] * *d;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let s = &node.value.shape;
                let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = T::from_usize(batch * plane).unwrap();
                let gv = &self.nodes[gamma.index].value.data;
                let mut sum_gy = vec![T::zero(); c];
                let mut sum_gy_xhat = vec![T::zero(); c];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for p in base..base + plane {
                            sum_gy[ch] = sum_gy[ch] + gy[p];
                            sum_gy_xhat[ch] = sum_gy_xhat[ch] + gy[p] * xhat[p];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for (g, v) in gb.iter_mut().zip(&sum_gy) {
                        *g = *g + *v;
                    }
                }
                if let Some(gg) = acc!(*gamma) {
                    for (g, v) in gg.iter_mut().zip(&sum_gy_xhat) {
                        *g = *g + *v;
                    }
                }
                if let Some(gx) = acc!(*x) {
                    for bi in 0..batch {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch] / m;
                            let base = (bi * c + ch) * plane;
                            for p in base..base + plane {
                                gx[p] = gx[p] + k * (m * gy[p] - sum_gy[ch] - xhat[p] * sum_gy_xhat[ch]);
                            }
                        }
                    }
                }
            }
            Op::PairwiseLogDensity { z, mu, inv_two_var } => {
                let (zv, mv) = (&self.nodes[z.index].value, &self.nodes[mu.index].value);
                let (mz, mm, d) = (zv.shape[0], mv.shape[0], zv.shape[1]);
                let two = T::from_f64c(2.0) * *inv_two_var;
                if self.nodes[z.index].requires_grad {
                    let mut local = vec![T::zero(); mz * d];
                    for i in 0..mz {
                        for j in 0..mm {
                            let g = gy[i * mm + j] * two;
                            for k in 0..d {
                                local[i * d + k] = local[i * d + k] - g * (zv.data[i * d + k] - mv.data[j * d + k]);
                            }
                        }
                    }
                    if let Some(gz) = acc!(*z) {
                        for (g, v) in gz.iter_mut().zip(local) {
                            *g = *g + v;
                        }
                    }
                }
                if self.nodes[mu.index].requires_grad {
                    let mut local = vec![T::zero(); mm * d];
                    for i in 0..mz {
                        for j in 0..mm {
                            let g = gy[i * mm + j] * two;
                            for k in 0..d {
                                local[j * d + k] = local[j * d + k] + g * (zv.data[i * d + k] - mv.data[j * d + k]);
                            }
                        }
                    }
                    if let Some(gm) = acc!(*mu) {
                        for (g, v) in gm.iter_mut().zip(local) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::LogSumExpRows(x) => {
                let xv = &self.nodes[x.index].value;
                let k = xv.shape[1];
                if let Some(gx) = acc!(*x) {
                    for (r, row) in xv.data.chunks(k).enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            gx[r * k + j] = gx[r * k + j] + gy[r] * (*v - y[r]).exp();
                        }
                    }
                }
            }
        }
    }
}
