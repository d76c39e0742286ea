//! Tape-based reverse-mode differentiation over the model's op set.
//!
//! A [`Tape`] records every primitive applied during a forward pass; nodes
//! are appended in topological order, so [`Tape::backward`] is a single
//! reverse sweep that visits each node once. Node handles are tied to the
//! tape that created them, so mixing tapes is caught at run time.

use crate::error::{Error, Result};
use crate::tensor::{self, Dim, Shape3, Tensor, JOINT_CAPACITY};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    idx: usize,
}

/// Gradients keyed by parameter name; keys always equal the registry.
pub type GradSet = BTreeMap<String, Tensor>;

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleByScalar { x: usize, s: usize },
    MatMul(usize, usize),
    AddBias { x: usize, b: usize },
    Relu(usize),
    Sum(usize),
    Sqrt(usize),
    Reshape(usize),
    DimRows { x: usize, dim: Dim },
    DimRowsInv { x: usize, dim: Dim },
    ModeApply { map: usize, v: usize, dim: Dim },
    SoftmaxRows(usize),
    ScaledScores { q: usize, k: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Embed { w: usize, b: usize, cube: Tensor },
    AddPositional { x: usize, pt: usize, pl: usize, pm: usize },
    MaskedMse { pred: usize, truth: Tensor, mask: Vec<bool>, n: usize },
    MaskedMae { pred: usize, truth: Tensor, mask: Vec<bool>, n: usize },
    KronLift { map: usize, dim: Dim, shape: Shape3 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation plus the registry of trainable tensors.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op });
        NodeId { tape: self.id, idx }
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.idx >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "node {:?} was not recorded on this tape",
                id
            )));
        }
        Ok(id.idx)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(id)?].value)
    }

    /// Leaf holding data that needs no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Leaf registered as a named trainable parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Tape(format!("parameter {name:?} registered twice")));
        }
        let id = self.push(t, Op::Leaf);
        self.params.push((name.to_string(), id.idx));
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.mul(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.scale(c);
        Ok(self.push(v, Op::Scale(ia, c)))
    }

    /// Multiply a tensor by a single-element scalar node (fusion weights).
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        if self.nodes[is].value.size() != 1 {
            return Err(Error::Shape("scale_by_scalar expects a 1-element scalar".into()));
        }
        let c = self.nodes[is].value.data()[0];
        let v = self.nodes[ix].value.scale(c);
        Ok(self.push(v, Op::ScaleByScalar { x: ix, s: is }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMul(ia, ib)))
    }

    /// Broadcast-add a length-`k` bias to every row of an `n x k` matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (n, k) = self.nodes[ix].value.as_matrix_dims()?;
        if self.nodes[ib].value.shape() != [k] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match row width {k}",
                self.nodes[ib].value.shape()
            )));
        }
        let mut v = self.nodes[ix].value.clone();
        for i in 0..n {
            for j in 0..k {
                v.data_mut()[i * k + j] += self.nodes[ib].value.data()[j];
            }
        }
        Ok(self.push(v, Op::AddBias { x: ix, b: ib }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.map(|a| a.max(0.0));
        Ok(self.push(v, Op::Relu(ix)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.check(x)?;
        let v = Tensor::scalar(self.nodes[ix].value.data().iter().sum());
        Ok(self.push(v, Op::Sum(ix)))
    }

    /// Square root of a 1-element scalar node.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.check(x)?;
        if self.nodes[ix].value.size() != 1 {
            return Err(Error::Shape("sqrt expects a 1-element scalar".into()));
        }
        let a = self.nodes[ix].value.data()[0];
        if a < 0.0 {
            return Err(Error::Numeric(format!("sqrt of negative value {a}")));
        }
        Ok(self.push(Tensor::scalar(a.sqrt()), Op::Sqrt(ix)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(ix)))
    }

    /// [`tensor::reshape_for_dim`] as a recorded op.
    pub fn dim_rows(&mut self, x: NodeId, dim: Dim) -> Result<NodeId> {
        let ix = self.check(x)?;
        let v = tensor::reshape_for_dim(&self.nodes[ix].value, dim)?;
        Ok(self.push(v, Op::DimRows { x: ix, dim }))
    }

    /// Inverse of [`Tape::dim_rows`].
    pub fn dim_rows_inv(&mut self, x: NodeId, dim: Dim, s: Shape3, c: usize) -> Result<NodeId> {
        let ix = self.check(x)?;
        let v = tensor::reshape_from_dim(&self.nodes[ix].value, dim, s, c)?;
        Ok(self.push(v, Op::DimRowsInv { x: ix, dim }))
    }

    pub fn mode_apply(&mut self, map: NodeId, v: NodeId, dim: Dim) -> Result<NodeId> {
        let (im, iv) = (self.check(map)?, self.check(v)?);
        let out = tensor::mode_apply(&self.nodes[im].value, &self.nodes[iv].value, dim)?;
        Ok(self.push(out, Op::ModeApply { map: im, v: iv, dim }))
    }

    pub fn softmax_rows(&mut self, s: NodeId) -> Result<NodeId> {
        let is = self.check(s)?;
        let v = tensor::softmax_rows(&self.nodes[is].value)?;
        Ok(self.push(v, Op::SoftmaxRows(is)))
    }

    pub fn scaled_scores(&mut self, q: NodeId, k: NodeId) -> Result<NodeId> {
        let (iq, ik) = (self.check(q)?, self.check(k)?);
        let v = tensor::scaled_scores(&self.nodes[iq].value, &self.nodes[ik].value)?;
        Ok(self.push(v, Op::ScaledScores { q: iq, k: ik }))
    }

    /// Per-cell normalization across the channel axis with learned
    /// scale/shift vectors of length `C`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xv = &self.nodes[ix].value;
        if xv.rank() != 4 {
            return Err(Error::Shape("layer_norm expects a T x L x M x C tensor".into()));
        }
        let c = xv.shape()[3];
        if self.nodes[ig].value.shape() != [c] || self.nodes[ib].value.shape() != [c] {
            return Err(Error::Shape("layer_norm scale/shift must have length C".into()));
        }
        let v = layer_norm_forward(xv, &self.nodes[ig].value, &self.nodes[ib].value, eps);
        Ok(self.push(v, Op::LayerNorm { x: ix, gamma: ig, beta: ib, eps }))
    }

    /// Per-measurement affine lift of a raw `T x L x M` cube to `C` channels.
    pub fn embed(&mut self, cube: &Tensor, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (iw, ib) = (self.check(w)?, self.check(b)?);
        if cube.rank() != 3 {
            return Err(Error::Shape("embed expects a T x L x M cube".into()));
        }
        let (t, l, m) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
        let wv = &self.nodes[iw].value;
        let (wm, c) = wv.as_matrix_dims()?;
        if wm != m || self.nodes[ib].value.shape() != [m, c] {
            return Err(Error::Shape(format!(
                "embed weights must be {m} x C, got {:?}",
                wv.shape()
            )));
        }
        let bv = &self.nodes[ib].value;
        let mut out = Tensor::zeros(&[t, l, m, c]);
        let mut p = 0;
        for ti in 0..t {
            for li in 0..l {
                for mi in 0..m {
                    let x = cube.data()[(ti * l + li) * m + mi];
                    for ch in 0..c {
                        out.data_mut()[p] = x * wv.data()[mi * c + ch] + bv.data()[mi * c + ch];
                        p += 1;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Embed { w: iw, b: ib, cube: cube.clone() }))
    }

    /// Adds learned per-axis embeddings `pt[t,:] + pl[l,:] + pm[m,:]` to every cell.
    pub fn add_positional(&mut self, x: NodeId, pt: NodeId, pl: NodeId, pm: NodeId) -> Result<NodeId> {
        let (ix, it, il, im) = (self.check(x)?, self.check(pt)?, self.check(pl)?, self.check(pm)?);
        let xv = &self.nodes[ix].value;
        if xv.rank() != 4 {
            return Err(Error::Shape("add_positional expects a T x L x M x C tensor".into()));
        }
        let (t, l, m, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        for (iid, n, what) in [(it, t, "time"), (il, l, "location"), (im, m, "measurement")] {
            if self.nodes[iid].value.shape() != [n, c] {
                return Err(Error::Shape(format!(
                    "{what} positional table must be {n} x {c}"
                )));
            }
        }
        let mut out = xv.clone();
        let (ptv, plv, pmv) = (
            self.nodes[it].value.clone(),
            self.nodes[il].value.clone(),
            self.nodes[im].value.clone(),
        );
        let mut p = 0;
        for ti in 0..t {
            for li in 0..l {
                for mi in 0..m {
                    for ch in 0..c {
                        out.data_mut()[p] +=
                            ptv.data()[ti * c + ch] + plv.data()[li * c + ch] + pmv.data()[mi * c + ch];
                        p += 1;
                    }
                }
            }
        }
        Ok(self.push(out, Op::AddPositional { x: ix, pt: it, pl: il, pm: im }))
    }

    /// Mean squared error over masked cells; scalar output.
    pub fn masked_mse(&mut self, pred: NodeId, truth: &Tensor, mask: &[bool]) -> Result<NodeId> {
        let ip = self.check(pred)?;
        let pv = &self.nodes[ip].value;
        if pv.shape() != truth.shape() || mask.len() != pv.size() {
            return Err(Error::Shape("masked_mse operands must agree in shape".into()));
        }
        let n = mask.iter().filter(|&&b| b).count();
        if n == 0 {
            return Err(Error::Contract("masked_mse over an empty mask".into()));
        }
        let mut acc = 0.0;
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                let e = pv.data()[i] - truth.data()[i];
                acc += e * e;
            }
        }
        let v = Tensor::scalar(acc / n as f64);
        Ok(self.push(v, Op::MaskedMse { pred: ip, truth: truth.clone(), mask: mask.to_vec(), n }))
    }

    /// Mean absolute error over masked cells; scalar output.
    pub fn masked_mae(&mut self, pred: NodeId, truth: &Tensor, mask: &[bool]) -> Result<NodeId> {
        let ip = self.check(pred)?;
        let pv = &self.nodes[ip].value;
        if pv.shape() != truth.shape() || mask.len() != pv.size() {
            return Err(Error::Shape("masked_mae operands must agree in shape".into()));
        }
        let n = mask.iter().filter(|&&b| b).count();
        if n == 0 {
            return Err(Error::Contract("masked_mae over an empty mask".into()));
        }
        let mut acc = 0.0;
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                acc += (pv.data()[i] - truth.data()[i]).abs();
            }
        }
        let v = Tensor::scalar(acc / n as f64);
        Ok(self.push(v, Op::MaskedMae { pred: ip, truth: truth.clone(), mask: mask.to_vec(), n }))
    }

    /// Lifts an `e x e` map over one axis of the cube to the joint
    /// `TLM x TLM` form (the map tensor-multiplied with identities).
    /// Differentiable counterpart of [`tensor::kron3`] factors; guarded to
    /// small cubes.
    pub fn kron_lift(&mut self, map: NodeId, dim: Dim, s: Shape3) -> Result<NodeId> {
        let im = self.check(map)?;
        let n = s.cells();
        if n > JOINT_CAPACITY {
            return Err(Error::Capacity(format!(
                "kron_lift would materialize a {n}x{n} map; cap is {JOINT_CAPACITY}"
            )));
        }
        let mv = &self.nodes[im].value;
        let (e, e2) = mv.as_matrix_dims()?;
        if e != e2 || e != s.extent(dim) {
            return Err(Error::Shape(format!(
                "kron_lift map is {e}x{e2}, expected extent {} of {s}",
                s.extent(dim)
            )));
        }
        let mut out = Tensor::zeros(&[n, n]);
        for_each_lift_entry(s, dim, |i, j, p0, p1| {
            out.data_mut()[p0 * n + p1] = mv.data()[i * e + j];
        });
        Ok(self.push(out, Op::KronLift { map: im, dim, shape: s }))
    }

    /// Names of the registered parameters, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Reverse sweep from a scalar loss node; returns one gradient per
    /// registered parameter (zero tensors for parameters the loss does not
    /// depend on). Deterministic: two sweeps over the same tape produce
    /// bitwise-identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<GradSet> {
        let start = self.check(loss)?;
        if self.nodes[start].value.size() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[start].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[start] = Some(Tensor::scalar(1.0));

        for idx in (0..=start).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_parents(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = GradSet::new();
        for (name, pidx) in &self.params {
            let g = grads[*pidx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*pidx].value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate_parents(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accum(grads, *a, g.mul(&self.nodes[*b].value)?);
                accum(grads, *b, g.mul(&self.nodes[*a].value)?);
            }
            Op::Scale(a, c) => accum(grads, *a, g.scale(*c)),
            Op::ScaleByScalar { x, s } => {
                let c = self.nodes[*s].value.data()[0];
                accum(grads, *x, g.scale(c));
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.nodes[*x].value.data())
                    .map(|(gi, xi)| gi * xi)
                    .sum();
                accum(grads, *s, Tensor::scalar(ds));
            }
            Op::MatMul(a, b) => {
                let bt = self.nodes[*b].value.transpose()?;
                accum(grads, *a, g.matmul(&bt)?);
                let at = self.nodes[*a].value.transpose()?;
                accum(grads, *b, at.matmul(g)?);
            }
            Op::AddBias { x, b } => {
                accum(grads, *x, g.clone());
                let (n, k) = g.as_matrix_dims()?;
                let mut db = Tensor::zeros(&[k]);
                for i in 0..n {
                    for j in 0..k {
                        db.data_mut()[j] += g.data()[i * k + j];
                    }
                }
                accum(grads, *b, db);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let mut dx = g.clone();
                for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= 0.0 {
                        *d = 0.0;
                    }
                }
                accum(grads, *x, dx);
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                let xs = self.nodes[*x].value.shape();
                accum(grads, *x, Tensor::zeros(xs).map(|_| g0));
            }
            Op::Sqrt(x) => {
                let y = node.value.data()[0];
                // subgradient 0 at the origin keeps a perfectly-fit loss finite
                let d = if y > 0.0 { g.data()[0] * 0.5 / y } else { 0.0 };
                accum(grads, *x, Tensor::scalar(d));
            }
            Op::Reshape(x) => {
                accum(grads, *x, g.reshaped(self.nodes[*x].value.shape())?);
            }
            Op::DimRows { x, dim } => {
                let xs = self.nodes[*x].value.shape();
                let s = Shape3::new(xs[0], xs[1], xs[2])?;
                accum(grads, *x, tensor::reshape_from_dim(g, *dim, s, xs[3])?);
            }
            Op::DimRowsInv { x, dim } => {
                accum(grads, *x, tensor::reshape_for_dim(g, *dim)?);
            }
            Op::ModeApply { map, v, dim } => {
                let at = self.nodes[*map].value.transpose()?;
                accum(grads, *v, tensor::mode_apply(&at, g, *dim)?);
                accum(grads, *map, mode_apply_map_grad(g, &self.nodes[*v].value, *dim)?);
            }
            Op::SoftmaxRows(s) => {
                let y = &node.value;
                let (n, m) = y.as_matrix_dims()?;
                let mut ds = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let yr = &y.data()[i * m..(i + 1) * m];
                    let gr = &g.data()[i * m..(i + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = &mut ds.data_mut()[i * m..(i + 1) * m];
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *s, ds);
            }
            Op::ScaledScores { q, k } => {
                let d = self.nodes[*q].value.shape()[1] as f64;
                let inv = 1.0 / d.sqrt();
                accum(grads, *q, g.matmul(&self.nodes[*k].value)?.scale(inv));
                let gt = g.transpose()?;
                accum(grads, *k, gt.matmul(&self.nodes[*q].value)?.scale(inv));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) = layer_norm_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    g,
                    *eps,
                );
                accum(grads, *x, dx);
                accum(grads, *gamma, dgamma);
                accum(grads, *beta, dbeta);
            }
            Op::Embed { w, b, cube } => {
                let (t, l, m) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
                let c = self.nodes[*w].value.shape()[1];
                let mut dw = Tensor::zeros(&[m, c]);
                let mut db = Tensor::zeros(&[m, c]);
                let mut p = 0;
                for ti in 0..t {
                    for li in 0..l {
                        for mi in 0..m {
                            let x = cube.data()[(ti * l + li) * m + mi];
                            for ch in 0..c {
                                dw.data_mut()[mi * c + ch] += g.data()[p] * x;
                                db.data_mut()[mi * c + ch] += g.data()[p];
                                p += 1;
                            }
                        }
                    }
                }
                accum(grads, *w, dw);
                accum(grads, *b, db);
            }
            Op::AddPositional { x, pt, pl, pm } => {
                accum(grads, *x, g.clone());
                let xs = self.nodes[*x].value.shape();
                let (t, l, m, c) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dt = Tensor::zeros(&[t, c]);
                let mut dl = Tensor::zeros(&[l, c]);
                let mut dm = Tensor::zeros(&[m, c]);
                let mut p = 0;
                for ti in 0..t {
                    for li in 0..l {
                        for mi in 0..m {
                            for ch in 0..c {
                                dt.data_mut()[ti * c + ch] += g.data()[p];
                                dl.data_mut()[li * c + ch] += g.data()[p];
                                dm.data_mut()[mi * c + ch] += g.data()[p];
                                p += 1;
                            }
                        }
                    }
                }
                accum(grads, *pt, dt);
                accum(grads, *pl, dl);
                accum(grads, *pm, dm);
            }
            Op::MaskedMse { pred, truth, mask, n } => {
                let g0 = g.data()[0];
                let pv = &self.nodes[*pred].value;
                let mut dp = Tensor::zeros(pv.shape());
                let scale = 2.0 * g0 / *n as f64;
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        dp.data_mut()[i] = scale * (pv.data()[i] - truth.data()[i]);
                    }
                }
                accum(grads, *pred, dp);
            }
            Op::MaskedMae { pred, truth, mask, n } => {
                let g0 = g.data()[0];
                let pv = &self.nodes[*pred].value;
                let mut dp = Tensor::zeros(pv.shape());
                let scale = g0 / *n as f64;
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        let e = pv.data()[i] - truth.data()[i];
                        dp.data_mut()[i] = scale * sign(e);
                    }
                }
                accum(grads, *pred, dp);
            }
            Op::KronLift { map, dim, shape } => {
                let e = shape.extent(*dim);
                let n = shape.cells();
                let mut dm = Tensor::zeros(&[e, e]);
                for_each_lift_entry(*shape, *dim, |i, j, p0, p1| {
                    dm.data_mut()[i * e + j] += g.data()[p0 * n + p1];
                });
                accum(grads, *map, dm);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accum(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Visits every nonzero entry of the lifted map: `(i, j)` in the factor and
/// the joint positions `(p0, p1)` that share all other axis indices.
fn for_each_lift_entry(s: Shape3, dim: Dim, mut f: impl FnMut(usize, usize, usize, usize)) {
    let e = s.extent(dim);
    for i in 0..e {
        for j in 0..e {
            match dim {
                Dim::Time => {
                    for l in 0..s.l {
                        for m in 0..s.m {
                            let p0 = (i * s.l + l) * s.m + m;
                            let p1 = (j * s.l + l) * s.m + m;
                            f(i, j, p0, p1);
                        }
                    }
                }
                Dim::Location => {
                    for t in 0..s.t {
                        for m in 0..s.m {
                            let p0 = (t * s.l + i) * s.m + m;
                            let p1 = (t * s.l + j) * s.m + m;
                            f(i, j, p0, p1);
                        }
                    }
                }
                Dim::Measurement => {
                    for t in 0..s.t {
                        for l in 0..s.l {
                            let p0 = (t * s.l + l) * s.m + i;
                            let p1 = (t * s.l + l) * s.m + j;
                            f(i, j, p0, p1);
                        }
                    }
                }
            }
        }
    }
}

fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let c = x.shape()[3];
    let cells = x.size() / c;
    let mut out = Tensor::zeros(x.shape());
    for cell in 0..cells {
        let xr = &x.data()[cell * c..(cell + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let or = &mut out.data_mut()[cell * c..(cell + 1) * c];
        for ch in 0..c {
            or[ch] = gamma.data()[ch] * (xr[ch] - mean) * inv + beta.data()[ch];
        }
    }
    out
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, g: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let c = x.shape()[3];
    let cells = x.size() / c;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for cell in 0..cells {
        let xr = &x.data()[cell * c..(cell + 1) * c];
        let gr = &g.data()[cell * c..(cell + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
        let gy: Vec<f64> = (0..c).map(|ch| gr[ch] * gamma.data()[ch]).collect();
        let mg = gy.iter().sum::<f64>() / c as f64;
        let mgx = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let dr = &mut dx.data_mut()[cell * c..(cell + 1) * c];
        for ch in 0..c {
            dr[ch] = inv * (gy[ch] - mg - xhat[ch] * mgx);
            dgamma.data_mut()[ch] += gr[ch] * xhat[ch];
            dbeta.data_mut()[ch] += gr[ch];
        }
    }
    (dx, dgamma, dbeta)
}

/// Gradient of `mode_apply` with respect to the map:
/// `da[i,j] = sum over cells sharing the other axes of g[..i..] * v[..j..]`.
fn mode_apply_map_grad(g: &Tensor, v: &Tensor, dim: Dim) -> Result<Tensor> {
    let s = Shape3::new(v.shape()[0], v.shape()[1], v.shape()[2])?;
    let c = v.shape()[3];
    let e = s.extent(dim);
    let mut da = Tensor::zeros(&[e, e]);
    let (stride_t, stride_l, stride_m) = (s.l * s.m * c, s.m * c, c);
    let (axis_stride, fixed): (usize, Vec<(usize, usize)>) = match dim {
        Dim::Time => (stride_t, cross(s.l, s.m, stride_l, stride_m)),
        Dim::Location => (stride_l, cross(s.t, s.m, stride_t, stride_m)),
        Dim::Measurement => (stride_m, cross(s.t, s.l, stride_t, stride_l)),
    };
    for i in 0..e {
        for j in 0..e {
            let mut acc = 0.0;
            for &(off_a, off_b) in &fixed {
                let gb = i * axis_stride + off_a + off_b;
                let vb = j * axis_stride + off_a + off_b;
                for ch in 0..c {
                    acc += g.data()[gb + ch] * v.data()[vb + ch];
                }
            }
            da.data_mut()[i * e + j] = acc;
        }
    }
    Ok(da)
}

fn cross(na: usize, nb: usize, sa: usize, sb: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(na * nb);
    for a in 0..na {
        for b in 0..nb {
            v.push((a * sa, b * sb));
        }
    }
    v
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked_coords: usize,
    pub seed: u64,
}

/// Default step for [`fd_check`].
pub const FD_EPS: f64 = 1e-5;
/// Default coordinate budget for [`fd_check`].
pub const FD_MAX_COORDS: usize = 512;

/// Central-difference check of [`Tape::backward`] for an arbitrary scalar
/// function of named parameters.
///
/// `build` must record the full forward pass on the provided tape and return
/// the scalar loss node. The function is evaluated twice at the base point;
/// a bitwise mismatch is reported as a determinism error. When the parameter
/// count exceeds `max_coords`, a seeded sample of coordinates is checked.
/// The relative error uses `max(|analytic|, |numeric|, 1)` as denominator,
/// i.e. plain absolute error for small gradients.
pub fn fd_check<F>(
    params: &[(String, Tensor)],
    build: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("fd_check step must be positive".into()));
    }
    let eval = |ps: &[(String, Tensor)]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (name, t) in ps {
            ids.insert(name.clone(), tape.param(name, t.clone())?);
        }
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss)?;
        if v.size() != 1 {
            return Err(Error::Contract("fd_check function must be scalar".into()));
        }
        Ok(v.data()[0])
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations at the base point differ: {base} vs {again}"
        )));
    }

    let analytic = {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (name, t) in params {
            ids.insert(name.clone(), tape.param(name, t.clone())?);
        }
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?
    };

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, t)) in params.iter().enumerate() {
        for ei in 0..t.size() {
            coords.push((pi, ei));
        }
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }

    let mut max_rel: f64 = 0.0;
    for (pi, ei) in &coords {
        let mut plus = params.to_vec();
        plus[*pi].1.data_mut()[*ei] += eps;
        let mut minus = params.to_vec();
        minus[*pi].1.data_mut()[*ei] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let ana = analytic[&params[*pi].0].data()[*ei];
        let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }

    Ok(FdReport {
        max_rel_err: max_rel,
        checked_coords: coords.len(),
        seed,
    })
}
