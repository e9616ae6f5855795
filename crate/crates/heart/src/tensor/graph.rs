//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of operation records built during one forward
//! pass. Each node stores its output value and, when any operand
//! requires gradients, a closure implementing the local gradient rule.
//! [`Graph::backward`] consumes the graph, walking the tape in reverse
//! creation order (which is a topological order by construction) and
//! accumulating total derivatives into every gradient-carrying leaf.
//!
//! Shapes are static and small, so the tape is rebuilt every pass and
//! dropped after backward.

use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Forward-pass mode. Dropout is active only in [`Mode::Train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

type BackFn = Box<dyn Fn(&Tensor, &mut Sink<'_>)>;

struct Node {
    requires_grad: bool,
    backward: Option<BackFn>,
}

/// Accumulates gradient contributions into parent nodes during the
/// reverse sweep.
pub struct Sink<'a> {
    vals: &'a [Tensor],
    requires: &'a [bool],
    grads: &'a mut [Option<Tensor>],
}

impl<'a> Sink<'a> {
    /// Runs `f` over the parent's gradient buffer (allocated zeroed on
    /// first touch). No-op when the parent does not require gradients.
    fn accum(&mut self, parent: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires[parent.0] {
            return;
        }
        let slot = &mut self.grads[parent.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.vals[parent.0].shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros in the given shape when nothing reached the
    /// leaf (for example behind a dead ReLU path).
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Tape of operation records for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, backward: Option<BackFn>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.vals.push(Tensor {
            shape,
            data,
            requires_grad: false,
        });
        self.nodes.push(Node {
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Gradients flow into it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let req = t.requires_grad;
        self.vals.push(t);
        self.nodes.push(Node {
            requires_grad: req,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.vals.push(t);
        self.nodes.push(Node {
            requires_grad: false,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ── elementwise and scalar ops ──────────────────────────────────

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                sink.accum(a, |d| axpy(d, 1.0, gout.data()));
                sink.accum(b, |d| axpy(d, 1.0, gout.data()));
            }) as BackFn
        });
        Ok(self.push(self.value(a).shape().to_vec(), data, req, back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                sink.accum(a, |d| axpy(d, 1.0, gout.data()));
                sink.accum(b, |d| axpy(d, -1.0, gout.data()));
            }) as BackFn
        });
        Ok(self.push(self.value(a).shape().to_vec(), data, req, back))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(a, |d| {
                    let bv = vals[b.0].data();
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                sink.accum(b, |d| {
                    let av = vals[a.0].data();
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }) as BackFn
        });
        Ok(self.push(self.value(a).shape().to_vec(), data, req, back))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * x).collect();
        let req = self.requires(a);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(a, |d| {
                    let av = vals[a.0].data();
                    for i in 0..d.len() {
                        d[i] += 2.0 * g[i] * av[i];
                    }
                });
            }) as BackFn
        });
        self.push(self.value(a).shape().to_vec(), data, req, back)
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| k * x).collect();
        let req = self.requires(a);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                sink.accum(a, |d| axpy(d, k, gout.data()));
            }) as BackFn
        });
        self.push(self.value(a).shape().to_vec(), data, req, back)
    }

    /// Broadcast multiplication by a scalar node (shape `[1]`).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar: scalar operand has shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let data: Vec<f64> = self.value(a).data().iter().map(|x| sv * x).collect();
        let req = self.requires(a) || self.requires(s);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(a, |d| axpy(d, vals[s.0].data()[0], g));
                sink.accum(s, |d| {
                    let av = vals[a.0].data();
                    d[0] += g.iter().zip(av).map(|(gi, x)| gi * x).sum::<f64>();
                });
            }) as BackFn
        });
        Ok(self.push(self.value(a).shape().to_vec(), data, req, back))
    }

    // ── activations ─────────────────────────────────────────────────

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let req = self.requires(a);
        let oid = self.next_id();
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(a, |d| {
                    let y = vals[oid].data();
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }) as BackFn
        });
        self.push(self.value(a).shape().to_vec(), data, req, back)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let req = self.requires(a);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(a, |d| {
                    let xv = vals[a.0].data();
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }) as BackFn
        });
        self.push(self.value(a).shape().to_vec(), data, req, back)
    }

    // ── linear maps ─────────────────────────────────────────────────

    /// `w · x + b` for a vector `x[n]`, matrix `w[m,n]`, bias `b[m]`.
    pub fn dense_apply(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "dense_apply: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = bv[i];
            for j in 0..n {
                acc += row[j] * xv[j];
            }
            data[i] = acc;
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(x, |d| {
                    let wv = vals[w.0].data();
                    for i in 0..m {
                        let gi = g[i];
                        let row = &wv[i * n..(i + 1) * n];
                        for j in 0..n {
                            d[j] += gi * row[j];
                        }
                    }
                });
                sink.accum(w, |d| {
                    let xv = vals[x.0].data();
                    for i in 0..m {
                        let gi = g[i];
                        let row = &mut d[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += gi * xv[j];
                        }
                    }
                });
                sink.accum(b, |d| axpy(d, 1.0, g));
            }) as BackFn
        });
        Ok(self.push(vec![m], data, req, back))
    }

    /// Applies the same affine map to every row: `x[r,n] → x·wᵀ + b`
    /// with `w[m,n]`, `b[m]`, giving `[r,m]`.
    pub fn affine_rows(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "affine_rows: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (r, n, m) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; r * m];
        for ri in 0..r {
            let xrow = &xv[ri * n..(ri + 1) * n];
            for i in 0..m {
                let wrow = &wv[i * n..(i + 1) * n];
                let mut acc = bv[i];
                for j in 0..n {
                    acc += xrow[j] * wrow[j];
                }
                data[ri * m + i] = acc;
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(x, |d| {
                    let wv = vals[w.0].data();
                    for ri in 0..r {
                        let drow = &mut d[ri * n..(ri + 1) * n];
                        for i in 0..m {
                            let gi = g[ri * m + i];
                            let wrow = &wv[i * n..(i + 1) * n];
                            for j in 0..n {
                                drow[j] += gi * wrow[j];
                            }
                        }
                    }
                });
                sink.accum(w, |d| {
                    let xv = vals[x.0].data();
                    for ri in 0..r {
                        let xrow = &xv[ri * n..(ri + 1) * n];
                        for i in 0..m {
                            let gi = g[ri * m + i];
                            let drow = &mut d[i * n..(i + 1) * n];
                            for j in 0..n {
                                drow[j] += gi * xrow[j];
                            }
                        }
                    }
                });
                sink.accum(b, |d| {
                    for ri in 0..r {
                        for i in 0..m {
                            d[i] += g[ri * m + i];
                        }
                    }
                });
            }) as BackFn
        });
        Ok(self.push(vec![r, m], data, req, back))
    }

    /// Matrix product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.value(a).shape(), self.value(b).shape());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::Shape(format!("matmul: {as_:?} · {bs:?}")));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                // da = g · bᵀ
                sink.accum(a, |d| {
                    let bv = vals[b.0].data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                // db = aᵀ · g
                sink.accum(b, |d| {
                    let av = vals[a.0].data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let drow = &mut d[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                });
            }) as BackFn
        });
        Ok(self.push(vec![m, n], data, req, back))
    }

    /// `a[m,k] · b[n,k]ᵀ`, giving `[m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.value(a).shape(), self.value(b).shape());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::Shape(format!("matmul_nt: {as_:?} · {bs:?}ᵀ")));
        }
        let (m, k, n) = (as_[0], as_[1], bs[0]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                data[i * n + j] = acc;
            }
        }
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                // da = g · b
                sink.accum(a, |d| {
                    let bv = vals[b.0].data();
                    for i in 0..m {
                        let drow = &mut d[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let brow = &bv[j * k..(j + 1) * k];
                            for p in 0..k {
                                drow[p] += gij * brow[p];
                            }
                        }
                    }
                });
                // db = gᵀ · a
                sink.accum(b, |d| {
                    let av = vals[a.0].data();
                    for j in 0..n {
                        let drow = &mut d[j * k..(j + 1) * k];
                        for i in 0..m {
                            let gij = g[i * n + j];
                            let arow = &av[i * k..(i + 1) * k];
                            for p in 0..k {
                                drow[p] += gij * arow[p];
                            }
                        }
                    }
                });
            }) as BackFn
        });
        Ok(self.push(vec![m, n], data, req, back))
    }

    // ── normalization ───────────────────────────────────────────────

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).shape().len() != 1 {
            return Err(Error::Shape(format!(
                "softmax expects a vector, got {:?}",
                self.value(x).shape()
            )));
        }
        let data = softmax_slice(self.value(x).data());
        let req = self.requires(x);
        let oid = self.next_id();
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(x, |d| {
                    let y = vals[oid].data();
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for i in 0..d.len() {
                        d[i] += y[i] * (g[i] - dot);
                    }
                });
            }) as BackFn
        });
        Ok(self.push(self.value(x).shape().to_vec(), data, req, back))
    }

    /// Softmax applied independently to each row of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!(
                "softmax_rows expects a matrix, got {xs:?}"
            )));
        }
        let (m, n) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = softmax_slice(&xv[i * n..(i + 1) * n]);
            data[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        let req = self.requires(x);
        let oid = self.next_id();
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(x, |d| {
                    let y = vals[oid].data();
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let dr = &mut d[i * n..(i + 1) * n];
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }) as BackFn
        });
        Ok(self.push(xs, data, req, back))
    }

    /// Layer normalization of a vector with learnable `gamma`/`beta`.
    /// Variance uses the biased `1/n` estimator.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).len();
        if self.value(x).shape().len() != 1
            || self.value(gamma).shape() != [n]
            || self.value(beta).shape() != [n]
        {
            return Err(Error::Shape(format!(
                "layer_norm: x{:?} gamma{:?} beta{:?}",
                self.value(x).shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let xv = self.value(x).data();
        let mean = xv.iter().sum::<f64>() / n as f64;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = xv.iter().map(|v| (v - mean) * inv).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let data: Vec<f64> = (0..n).map(|i| xhat[i] * gv[i] + bv[i]).collect();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(beta, |d| axpy(d, 1.0, g));
                sink.accum(gamma, |d| {
                    for i in 0..n {
                        d[i] += g[i] * xhat[i];
                    }
                });
                sink.accum(x, |d| {
                    let gv = vals[gamma.0].data();
                    let dxhat: Vec<f64> = (0..n).map(|i| g[i] * gv[i]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for i in 0..n {
                        d[i] += inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                });
            }) as BackFn
        });
        Ok(self.push(vec![n], data, req, back))
    }

    // ── regularization ──────────────────────────────────────────────

    /// Inverted dropout. Identity in eval mode or at rate 0; in train
    /// mode each element is zeroed with probability `rate` and the
    /// survivors are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let xv = self.value(x).data();
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.uniform() >= rate { scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = xv.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let req = self.requires(x);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let g = gout.data();
                sink.accum(x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }) as BackFn
        });
        Ok(self.push(self.value(x).shape().to_vec(), data, req, back))
    }

    // ── reductions and combinations ─────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.requires(x);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let g = gout.data()[0];
                sink.accum(x, |d| {
                    for v in d.iter_mut() {
                        *v += g;
                    }
                });
            }) as BackFn
        });
        self.push(vec![1], vec![s], req, back)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.requires(x);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let g = gout.data()[0] / n as f64;
                sink.accum(x, |d| {
                    for v in d.iter_mut() {
                        *v += g;
                    }
                });
            }) as BackFn
        });
        self.push(vec![1], vec![s / n as f64], req, back)
    }

    /// Elementwise sum of same-shaped operands.
    pub fn sum_of(&mut self, xs: &[Var]) -> Result<Var> {
        self.combine(xs, 1.0, "sum_of")
    }

    /// Elementwise arithmetic mean of same-shaped operands.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("mean_of: empty operand list".into()));
        }
        self.combine(xs, 1.0 / xs.len() as f64, "mean_of")
    }

    fn combine(&mut self, xs: &[Var], weight: f64, op: &str) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Contract(format!("{op}: empty operand list")));
        };
        let shape = self.value(first).shape().to_vec();
        for &v in xs {
            if self.value(v).shape() != shape {
                return Err(Error::Shape(format!(
                    "{op}: mixed shapes {:?} vs {shape:?}",
                    self.value(v).shape()
                )));
            }
        }
        let mut data = vec![0.0; self.value(first).len()];
        for &v in xs {
            axpy(&mut data, weight, self.value(v).data());
        }
        let req = xs.iter().any(|&v| self.requires(v));
        let owned: Vec<Var> = xs.to_vec();
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                for &v in &owned {
                    sink.accum(v, |d| axpy(d, weight, gout.data()));
                }
            }) as BackFn
        });
        Ok(self.push(shape, data, req, back))
    }

    // ── slicing and assembly for [S, F, T] tensors ──────────────────

    /// Extracts the time series `x[s, f, ·]` from a rank-3 tensor.
    pub fn slice_time(&mut self, x: Var, s: usize, f: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || s >= xs[0] || f >= xs[1] {
            return Err(Error::Shape(format!(
                "slice_time(s={s}, f={f}) on shape {xs:?}"
            )));
        }
        let (fs, t) = (xs[1], xs[2]);
        let base = (s * fs + f) * t;
        let data = self.value(x).data()[base..base + t].to_vec();
        let req = self.requires(x);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                sink.accum(x, |d| axpy(&mut d[base..base + t], 1.0, gout.data()));
            }) as BackFn
        });
        Ok(self.push(vec![t], data, req, back))
    }

    /// Extracts the feature profile `x[s, ·, t]` from a rank-3 tensor.
    pub fn slice_feature(&mut self, x: Var, s: usize, t: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || s >= xs[0] || t >= xs[2] {
            return Err(Error::Shape(format!(
                "slice_feature(s={s}, t={t}) on shape {xs:?}"
            )));
        }
        let (fs, ts) = (xs[1], xs[2]);
        let xv = self.value(x).data();
        let data: Vec<f64> = (0..fs).map(|f| xv[(s * fs + f) * ts + t]).collect();
        let req = self.requires(x);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let g = gout.data();
                sink.accum(x, |d| {
                    for f in 0..fs {
                        d[(s * fs + f) * ts + t] += g[f];
                    }
                });
            }) as BackFn
        });
        Ok(self.push(vec![fs], data, req, back))
    }

    /// Rebuilds `[S, F, T]` from `S·F` time slices ordered `(s, f)`
    /// row-major.
    pub fn assemble_time_slices(
        &mut self,
        slices: &[Var],
        s_dim: usize,
        f_dim: usize,
    ) -> Result<Var> {
        if slices.is_empty() || slices.len() != s_dim * f_dim {
            return Err(Error::Shape(format!(
                "assemble_time_slices: {} slices for {s_dim}x{f_dim}",
                slices.len()
            )));
        }
        let t = self.value(slices[0]).len();
        let mut data = Vec::with_capacity(s_dim * f_dim * t);
        for &v in slices {
            if self.value(v).shape() != [t] {
                return Err(Error::Shape(format!(
                    "assemble_time_slices: slice shape {:?}, want [{t}]",
                    self.value(v).shape()
                )));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let req = slices.iter().any(|&v| self.requires(v));
        let owned: Vec<Var> = slices.to_vec();
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                for (i, &v) in owned.iter().enumerate() {
                    let gslice = &gout.data()[i * t..(i + 1) * t];
                    sink.accum(v, |d| axpy(d, 1.0, gslice));
                }
            }) as BackFn
        });
        Ok(self.push(vec![s_dim, f_dim, t], data, req, back))
    }

    /// Rebuilds `[S, F, T]` from `S·T` feature slices ordered `(s, t)`
    /// row-major.
    pub fn assemble_feature_slices(
        &mut self,
        slices: &[Var],
        s_dim: usize,
        t_dim: usize,
    ) -> Result<Var> {
        if slices.is_empty() || slices.len() != s_dim * t_dim {
            return Err(Error::Shape(format!(
                "assemble_feature_slices: {} slices for {s_dim}x{t_dim}",
                slices.len()
            )));
        }
        let f_dim = self.value(slices[0]).len();
        let mut data = vec![0.0; s_dim * f_dim * t_dim];
        for (i, &v) in slices.iter().enumerate() {
            if self.value(v).shape() != [f_dim] {
                return Err(Error::Shape(format!(
                    "assemble_feature_slices: slice shape {:?}, want [{f_dim}]",
                    self.value(v).shape()
                )));
            }
            let (s, t) = (i / t_dim, i % t_dim);
            let sv = self.value(v).data();
            for f in 0..f_dim {
                data[(s * f_dim + f) * t_dim + t] = sv[f];
            }
        }
        let req = slices.iter().any(|&v| self.requires(v));
        let owned: Vec<Var> = slices.to_vec();
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let g = gout.data();
                for (i, &v) in owned.iter().enumerate() {
                    let (s, t) = (i / t_dim, i % t_dim);
                    sink.accum(v, |d| {
                        for f in 0..f_dim {
                            d[f] += g[(s * f_dim + f) * t_dim + t];
                        }
                    });
                }
            }) as BackFn
        });
        Ok(self.push(vec![s_dim, f_dim, t_dim], data, req, back))
    }

    // ── embedding-space helpers ─────────────────────────────────────

    /// Lifts each scalar time step into `d` dimensions:
    /// `E[t, i] = x[t]·w[i] + b[i]`.
    pub fn embed_rows(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 1 || ws.len() != 1 || bs != ws {
            return Err(Error::Shape(format!("embed_rows: x{xs:?} w{ws:?} b{bs:?}")));
        }
        let (t, d_dim) = (xs[0], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; t * d_dim];
        for ti in 0..t {
            for i in 0..d_dim {
                data[ti * d_dim + i] = xv[ti] * wv[i] + bv[i];
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(x, |dx| {
                    let wv = vals[w.0].data();
                    for ti in 0..t {
                        let mut acc = 0.0;
                        for i in 0..d_dim {
                            acc += g[ti * d_dim + i] * wv[i];
                        }
                        dx[ti] += acc;
                    }
                });
                sink.accum(w, |dw| {
                    let xv = vals[x.0].data();
                    for ti in 0..t {
                        for i in 0..d_dim {
                            dw[i] += g[ti * d_dim + i] * xv[ti];
                        }
                    }
                });
                sink.accum(b, |db| {
                    for ti in 0..t {
                        for i in 0..d_dim {
                            db[i] += g[ti * d_dim + i];
                        }
                    }
                });
            }) as BackFn
        });
        Ok(self.push(vec![t, d_dim], data, req, back))
    }

    /// Collapses each row back to a scalar: `y[t] = e[t,·]·w + b`.
    pub fn project_rows(&mut self, e: Var, w: Var, b: Var) -> Result<Var> {
        let (es, ws, bs) = (
            self.value(e).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if es.len() != 2 || ws.len() != 1 || ws[0] != es[1] || bs != [1] {
            return Err(Error::Shape(format!(
                "project_rows: e{es:?} w{ws:?} b{bs:?}"
            )));
        }
        let (t, d_dim) = (es[0], es[1]);
        let ev = self.value(e).data();
        let wv = self.value(w).data();
        let b0 = self.value(b).data()[0];
        let data: Vec<f64> = (0..t)
            .map(|ti| {
                let row = &ev[ti * d_dim..(ti + 1) * d_dim];
                row.iter().zip(wv).map(|(a, b)| a * b).sum::<f64>() + b0
            })
            .collect();
        let req = self.requires(e) || self.requires(w) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(e, |de| {
                    let wv = vals[w.0].data();
                    for ti in 0..t {
                        let gi = g[ti];
                        let drow = &mut de[ti * d_dim..(ti + 1) * d_dim];
                        for i in 0..d_dim {
                            drow[i] += gi * wv[i];
                        }
                    }
                });
                sink.accum(w, |dw| {
                    let ev = vals[e.0].data();
                    for ti in 0..t {
                        let gi = g[ti];
                        let erow = &ev[ti * d_dim..(ti + 1) * d_dim];
                        for i in 0..d_dim {
                            dw[i] += gi * erow[i];
                        }
                    }
                });
                sink.accum(b, |db| db[0] += g.iter().sum::<f64>());
            }) as BackFn
        });
        Ok(self.push(vec![t], data, req, back))
    }

    // ── convolutional encoder/decoder kernels ───────────────────────

    /// Spatio-temporal convolution over all stations with a bounded
    /// backward-looking time window, followed by a linear combination
    /// across input features.
    ///
    /// `x[S,F,T]`, `kernels[H,S,S,L]`, `mix[H,F]`, `bias[H]` →
    /// `out[s,h,t] = bias[h] + Σ_f mix[h,f] Σ_{s',τ<L} kernels[h,s,s',τ]·x[s',f,t-τ]`
    /// with zero padding keeping the output length at `T`.
    pub fn spatio_temporal_conv(
        &mut self,
        x: Var,
        kernels: Var,
        mix: Var,
        bias: Var,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let ms = self.value(mix).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 || ms.len() != 2 || bs.len() != 1 {
            return Err(Error::Shape(format!(
                "spatio_temporal_conv: x{xs:?} kernels{ks:?} mix{ms:?} bias{bs:?}"
            )));
        }
        let (s_dim, f_dim, t_dim) = (xs[0], xs[1], xs[2]);
        let (h_dim, lag) = (ks[0], ks[3]);
        if ks[1] != s_dim || ks[2] != s_dim || ms != [h_dim, f_dim] || bs != [h_dim] || lag > t_dim
        {
            return Err(Error::Shape(format!(
                "spatio_temporal_conv: inconsistent x{xs:?} kernels{ks:?} mix{ms:?} bias{bs:?}"
            )));
        }
        let xv = self.value(x).data();
        let kv = self.value(kernels).data();
        let mv = self.value(mix).data();
        let bv = self.value(bias).data();

        // conv[h,s,f,t], kept for the backward pass
        let mut conv = vec![0.0; h_dim * s_dim * f_dim * t_dim];
        for h in 0..h_dim {
            for s in 0..s_dim {
                for sp in 0..s_dim {
                    for tau in 0..lag {
                        let kval = kv[((h * s_dim + s) * s_dim + sp) * lag + tau];
                        if kval == 0.0 {
                            continue;
                        }
                        for f in 0..f_dim {
                            let xrow =
                                &xv[(sp * f_dim + f) * t_dim..(sp * f_dim + f + 1) * t_dim];
                            let crow = &mut conv[((h * s_dim + s) * f_dim + f) * t_dim
                                ..((h * s_dim + s) * f_dim + f + 1) * t_dim];
                            for t in tau..t_dim {
                                crow[t] += kval * xrow[t - tau];
                            }
                        }
                    }
                }
            }
        }
        let mut data = vec![0.0; s_dim * h_dim * t_dim];
        for s in 0..s_dim {
            for h in 0..h_dim {
                let orow = &mut data[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim];
                for v in orow.iter_mut() {
                    *v = bv[h];
                }
                for f in 0..f_dim {
                    let m = mv[h * f_dim + f];
                    let crow = &conv[((h * s_dim + s) * f_dim + f) * t_dim
                        ..((h * s_dim + s) * f_dim + f + 1) * t_dim];
                    for t in 0..t_dim {
                        orow[t] += m * crow[t];
                    }
                }
            }
        }
        let req = self.requires(x)
            || self.requires(kernels)
            || self.requires(mix)
            || self.requires(bias);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(bias, |d| {
                    for s in 0..s_dim {
                        for h in 0..h_dim {
                            d[h] += g[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });
                sink.accum(mix, |d| {
                    for h in 0..h_dim {
                        for f in 0..f_dim {
                            let mut acc = 0.0;
                            for s in 0..s_dim {
                                let grow =
                                    &g[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim];
                                let crow = &conv[((h * s_dim + s) * f_dim + f) * t_dim
                                    ..((h * s_dim + s) * f_dim + f + 1) * t_dim];
                                for t in 0..t_dim {
                                    acc += grow[t] * crow[t];
                                }
                            }
                            d[h * f_dim + f] += acc;
                        }
                    }
                });
                // dconv[h,s,f,t] = g[s,h,t]·mix[h,f], folded into the
                // kernel and input gradients below.
                sink.accum(kernels, |d| {
                    let mv = vals[mix.0].data();
                    let xv = vals[x.0].data();
                    for h in 0..h_dim {
                        for s in 0..s_dim {
                            let grow = &g[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim];
                            for sp in 0..s_dim {
                                for tau in 0..lag {
                                    let mut acc = 0.0;
                                    for f in 0..f_dim {
                                        let m = mv[h * f_dim + f];
                                        if m == 0.0 {
                                            continue;
                                        }
                                        let xrow = &xv[(sp * f_dim + f) * t_dim
                                            ..(sp * f_dim + f + 1) * t_dim];
                                        let mut inner = 0.0;
                                        for t in tau..t_dim {
                                            inner += grow[t] * xrow[t - tau];
                                        }
                                        acc += m * inner;
                                    }
                                    d[((h * s_dim + s) * s_dim + sp) * lag + tau] += acc;
                                }
                            }
                        }
                    }
                });
                sink.accum(x, |d| {
                    let mv = vals[mix.0].data();
                    let kv = vals[kernels.0].data();
                    for h in 0..h_dim {
                        for s in 0..s_dim {
                            let grow = &g[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim];
                            for sp in 0..s_dim {
                                for tau in 0..lag {
                                    let kval = kv[((h * s_dim + s) * s_dim + sp) * lag + tau];
                                    if kval == 0.0 {
                                        continue;
                                    }
                                    for f in 0..f_dim {
                                        let m = mv[h * f_dim + f] * kval;
                                        let drow = &mut d[(sp * f_dim + f) * t_dim
                                            ..(sp * f_dim + f + 1) * t_dim];
                                        for t in tau..t_dim {
                                            drow[t - tau] += m * grow[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }) as BackFn
        });
        Ok(self.push(vec![s_dim, h_dim, t_dim], data, req, back))
    }

    /// 1x1 convolution over the latent channel axis:
    /// `x[S,H,T]`, `w[H]`, `b[1]` → `out[s,t] = Σ_h w[h]·x[s,h,t] + b`.
    pub fn channel_combine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 3 || ws.len() != 1 || ws[0] != xs[1] || bs != [1] {
            return Err(Error::Shape(format!(
                "channel_combine: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (s_dim, h_dim, t_dim) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let b0 = self.value(b).data()[0];
        let mut data = vec![b0; s_dim * t_dim];
        for s in 0..s_dim {
            for h in 0..h_dim {
                let wh = wv[h];
                let xrow = &xv[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim];
                let orow = &mut data[s * t_dim..(s + 1) * t_dim];
                for t in 0..t_dim {
                    orow[t] += wh * xrow[t];
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let back: Option<BackFn> = req.then(|| {
            Box::new(move |gout: &Tensor, sink: &mut Sink| {
                let vals = sink.vals;
                let g = gout.data();
                sink.accum(x, |d| {
                    let wv = vals[w.0].data();
                    for s in 0..s_dim {
                        let grow = &g[s * t_dim..(s + 1) * t_dim];
                        for h in 0..h_dim {
                            let wh = wv[h];
                            let drow =
                                &mut d[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim];
                            for t in 0..t_dim {
                                drow[t] += wh * grow[t];
                            }
                        }
                    }
                });
                sink.accum(w, |d| {
                    let xv = vals[x.0].data();
                    for s in 0..s_dim {
                        let grow = &g[s * t_dim..(s + 1) * t_dim];
                        for h in 0..h_dim {
                            let xrow = &xv[(s * h_dim + h) * t_dim..(s * h_dim + h + 1) * t_dim];
                            let mut acc = 0.0;
                            for t in 0..t_dim {
                                acc += grow[t] * xrow[t];
                            }
                            d[h] += acc;
                        }
                    }
                });
                sink.accum(b, |d| d[0] += g.iter().sum::<f64>());
            }) as BackFn
        });
        Ok(self.push(vec![s_dim, t_dim], data, req, back))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss node. Consumes the graph;
    /// every gradient-carrying leaf reachable from `loss` receives its
    /// total derivative.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let requires: Vec<bool> = self.nodes.iter().map(|nd| nd.requires_grad).collect();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..n).rev() {
            let Some(back) = &self.nodes[id].backward else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(id);
            let Some(gout) = upper[0].as_ref() else {
                continue;
            };
            let mut sink = Sink {
                vals: &self.vals,
                requires: &requires,
                grads: lower,
            };
            back(gout, &mut sink);
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] += a * src[i];
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Max-subtracted softmax of a slice.
fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
