//! The operation tape and its backward pass.
//!
//! Nodes are appended in execution order, so the vector itself is a valid
//! topological order and one reverse sweep visits every node exactly once.
//! Saved values (e.g. group-norm statistics) live on the node that needs them.

use super::Tensor;
use crate::error::{CoreError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Constant,
    /// C[m,n] = A[m,k] B[k,n]
    MatMul(VarId, VarId),
    /// C[m,n] = A[m,k] B[n,k]^T
    MatMulNT(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// rows of A plus the single-row bias B
    AddBias(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId, f64),
    /// per-column scale by a constant weight vector
    ScaleColumns(VarId, Vec<f64>),
    /// every element of A plus the single-element tensor S
    AddScalarVar(VarId, VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Sqrt(VarId),
    Sum(VarId),
    Mean(VarId),
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    SliceCols(VarId, usize, usize),
    Reshape(VarId),
    /// x, gamma, beta; saved: inv_std and normalized values per (row, channel)
    GroupNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        n_ch: usize,
        saved_xhat: Vec<f64>,
        saved_inv_std: Vec<f64>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records primitives for one forward/backward cycle; reset between steps.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward root w.r.t. `v` (zeros if untouched).
    pub fn grad(&self, v: VarId) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
            grad: None,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Introduce a parameter; its gradient is retrievable after backward.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Introduce a value that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(CoreError::invalid("constant data length mismatch"));
        }
        Ok(self.push(Op::Constant, shape, data, false))
    }

    pub fn scalar_constant(&mut self, v: f64) -> VarId {
        self.push(Op::Constant, vec![1], vec![v], false)
    }

    fn dims2(&self, v: VarId) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(CoreError::invalid(format!("expected 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(CoreError::invalid(format!(
                "matmul inner dims differ: {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            matmul_into(av, bv, &mut out, m, ka, n);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, needs))
    }

    /// A @ B^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.dims2(a)?;
        let (n, kb) = self.dims2(b)?;
        if ka != kb {
            return Err(CoreError::invalid(format!(
                "matmul_nt inner dims differ: {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..ka {
                        acc += av[i * ka + k] * bv[j * ka + k];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a, b), vec![m, n], out, needs))
    }

    fn elementwise(&mut self, a: VarId, b: VarId, f: fn(f64, f64) -> f64, op: fn(VarId, VarId) -> Op) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::invalid(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(op(a, b), shape, out, needs))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul)
    }

    /// [m,n] + [1,n], the bias pattern of dense layers.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (m, n) = self.dims2(a)?;
        let (bm, bn) = self.dims2(bias)?;
        if bm != 1 || bn != n {
            return Err(CoreError::invalid(format!(
                "bias shape [{bm},{bn}] does not match [1,{n}]"
            )));
        }
        let mut out = self.value(a).to_vec();
        {
            let bv = self.value(bias);
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += bv[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias(a, bias), vec![m, n], out, needs))
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x * s).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, s), shape, out, needs)
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> VarId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x + s).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, s), shape, out, needs)
    }

    /// Add a single-element variable to every entry (trainable offsets).
    pub fn add_scalar_var(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).len() != 1 {
            return Err(CoreError::invalid("add_scalar_var needs a single-element tensor"));
        }
        let sv = self.value(s)[0];
        let out: Vec<f64> = self.value(a).iter().map(|&x| x + sv).collect();
        let needs = self.needs(a) || self.needs(s);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::AddScalarVar(a, s), shape, out, needs))
    }

    /// Column j scaled by weights[j]; weights are constants (BC masks).
    pub fn scale_columns(&mut self, a: VarId, weights: &[f64]) -> Result<VarId> {
        let (m, n) = self.dims2(a)?;
        if weights.len() != n {
            return Err(CoreError::invalid("scale_columns weight length mismatch"));
        }
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= weights[j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::ScaleColumns(a, weights.to_vec()), vec![m, n], out, needs))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape, out, needs)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.tanh()).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape, out, needs)
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.sqrt()).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sqrt(a), shape, out, needs)
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), vec![1], vec![s], needs)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let len = self.value(a).len();
        let s: f64 = self.value(a).iter().sum::<f64>() / len as f64;
        let needs = self.needs(a);
        self.push(Op::Mean(a), vec![1], vec![s], needs)
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_cols needs at least one part"));
        }
        let (m, _) = self.dims2(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(CoreError::invalid("concat_cols row counts differ"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut col0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..m {
                out[i * n + col0..i * n + col0 + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            col0 += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![m, n], out, needs))
    }

    /// Concatenate 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_rows needs at least one part"));
        }
        let (_, n) = self.dims2(parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(CoreError::invalid("concat_rows column counts differ"));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, n], out, needs))
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let (m, n) = self.dims2(a)?;
        if start + len > n {
            return Err(CoreError::invalid("slice_cols out of range"));
        }
        let mut out = vec![0.0; m * len];
        {
            let v = self.value(a);
            for i in 0..m {
                out[i * len..(i + 1) * len].copy_from_slice(&v[i * n + start..i * n + start + len]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start, len), vec![m, len], out, needs))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let len: usize = shape.iter().product();
        if len != self.value(a).len() {
            return Err(CoreError::invalid("reshape length mismatch"));
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), shape, out, needs))
    }

    /// Group normalization over the feature axis of [rows, features].
    ///
    /// Features split into `n_ch` contiguous channels; each (row, channel)
    /// block is standardized with epsilon 1e-5, then scaled/shifted by the
    /// per-feature affine parameters.
    pub fn group_norm(&mut self, x: VarId, n_ch: usize, gamma: VarId, beta: VarId) -> Result<VarId> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.dims2(x)?;
        if n_ch == 0 || n % n_ch != 0 {
            return Err(CoreError::invalid(format!(
                "group_norm: {n_ch} channels do not divide width {n}"
            )));
        }
        let (gm, gn) = self.dims2(gamma)?;
        let (bm, bn) = self.dims2(beta)?;
        if gm != 1 || gn != n || bm != 1 || bn != n {
            return Err(CoreError::invalid("group_norm affine params must be [1,width]"));
        }
        let cw = n / n_ch;
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m * n_ch];
        {
            let xv = self.value(x);
            let gv = self.value(gamma).to_vec();
            let bv = self.value(beta).to_vec();
            for i in 0..m {
                for ch in 0..n_ch {
                    let base = i * n + ch * cw;
                    let blk = &xv[base..base + cw];
                    let mean: f64 = blk.iter().sum::<f64>() / cw as f64;
                    let var: f64 = blk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cw as f64;
                    let is = 1.0 / (var + EPS).sqrt();
                    inv_std[i * n_ch + ch] = is;
                    for k in 0..cw {
                        let xh = (blk[k] - mean) * is;
                        xhat[base + k] = xh;
                        out[base + k] = gv[ch * cw + k] * xh + bv[ch * cw + k];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n_ch,
                saved_xhat: xhat,
                saved_inv_std: inv_std,
            },
            vec![m, n],
            out,
            needs,
        ))
    }

    /// Reverse sweep from a scalar root; gradients accumulate on every
    /// reachable node that needs them.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(CoreError::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.take().unwrap();
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: VarId, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (gi, &c) in grad.iter_mut().zip(contrib) {
            *gi += c;
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Borrow-friendly: compute contributions first, then accumulate.
        enum Contrib {
            One(VarId, Vec<f64>),
            Two(VarId, Vec<f64>, VarId, Vec<f64>),
            Three(VarId, Vec<f64>, VarId, Vec<f64>, VarId, Vec<f64>),
            Many(Vec<(VarId, Vec<f64>)>),
            None,
        }
        let contrib = match &self.nodes[id].op {
            Op::Leaf | Op::Constant => Contrib::None,
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // dA = G B^T ; dB = A^T G
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij != 0.0 {
                            for kk in 0..k {
                                da[i * k + kk] += gij * bv[kk * n + j];
                            }
                        }
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        if aik != 0.0 {
                            for j in 0..n {
                                db[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                }
                Contrib::Two(*a, da, *b, db)
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // C = A B^T: dA = G B ; dB = G^T A
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij != 0.0 {
                            for kk in 0..k {
                                da[i * k + kk] += gij * bv[j * k + kk];
                            }
                        }
                    }
                }
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij != 0.0 {
                            for kk in 0..k {
                                db[j * k + kk] += gij * av[i * k + kk];
                            }
                        }
                    }
                }
                Contrib::Two(*a, da, *b, db)
            }
            Op::Add(a, b) => Contrib::Two(*a, g.to_vec(), *b, g.to_vec()),
            Op::Sub(a, b) => {
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                Contrib::Two(*a, g.to_vec(), *b, neg)
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da: Vec<f64> = g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                Contrib::Two(*a, da, *b, db)
            }
            Op::AddBias(a, bias) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                Contrib::Two(*a, g.to_vec(), *bias, db)
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|&v| v * s).collect();
                Contrib::One(*a, da)
            }
            Op::AddScalar(a, _) => Contrib::One(*a, g.to_vec()),
            Op::AddScalarVar(a, s) => {
                let ds = vec![g.iter().sum::<f64>()];
                Contrib::Two(*a, g.to_vec(), *s, ds)
            }
            Op::ScaleColumns(a, w) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[i * n + j] * w[j];
                    }
                }
                Contrib::One(*a, da)
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].value;
                let da: Vec<f64> = g.iter().zip(yv).map(|(&gi, &y)| gi * y * (1.0 - y)).collect();
                Contrib::One(*a, da)
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[id].value;
                let da: Vec<f64> = g.iter().zip(yv).map(|(&gi, &y)| gi * (1.0 - y * y)).collect();
                Contrib::One(*a, da)
            }
            Op::Sqrt(a) => {
                let yv = &self.nodes[id].value;
                let da: Vec<f64> = g
                    .iter()
                    .zip(yv)
                    .map(|(&gi, &y)| gi * 0.5 / y.max(1e-150))
                    .collect();
                Contrib::One(*a, da)
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                Contrib::One(*a, vec![g[0]; len])
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                Contrib::One(*a, vec![g[0] / len as f64; len])
            }
            Op::ConcatCols(parts) => {
                let m = self.shape(VarId(id))[0];
                let n = self.shape(VarId(id))[1];
                let mut out = Vec::with_capacity(parts.len());
                let mut col0 = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w].copy_from_slice(&g[i * n + col0..i * n + col0 + w]);
                    }
                    out.push((p, dp));
                    col0 += w;
                }
                Contrib::Many(out)
            }
            Op::ConcatRows(parts) => {
                let n = self.shape(VarId(id))[1];
                let mut out = Vec::with_capacity(parts.len());
                let mut row0 = 0;
                for &p in parts {
                    let pm = self.shape(p)[0];
                    let dp = g[row0 * n..(row0 + pm) * n].to_vec();
                    out.push((p, dp));
                    row0 += pm;
                }
                Contrib::Many(out)
            }
            Op::SliceCols(a, start, len) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                Contrib::One(*a, da)
            }
            Op::Reshape(a) => Contrib::One(*a, g.to_vec()),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n_ch,
                saved_xhat,
                saved_inv_std,
            } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cw = n / n_ch;
                let gv = &self.nodes[gamma.0].value;
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    for ch in 0..*n_ch {
                        let base = i * n + ch * cw;
                        let is = saved_inv_std[i * n_ch + ch];
                        // dy/dxhat = gamma; standard per-block normalization backward
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for k in 0..cw {
                            let dxhat = g[base + k] * gv[ch * cw + k];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * saved_xhat[base + k];
                        }
                        for k in 0..cw {
                            let dxhat = g[base + k] * gv[ch * cw + k];
                            dx[base + k] = is
                                * (dxhat
                                    - sum_dxhat / cw as f64
                                    - saved_xhat[base + k] * sum_dxhat_xhat / cw as f64);
                            dgamma[ch * cw + k] += g[base + k] * saved_xhat[base + k];
                            dbeta[ch * cw + k] += g[base + k];
                        }
                    }
                }
                Contrib::Three(*x, dx, *gamma, dgamma, *beta, dbeta)
            }
        };
        match contrib {
            Contrib::None => {}
            Contrib::One(a, da) => self.accumulate(a, &da),
            Contrib::Two(a, da, b, db) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Contrib::Three(a, da, b, db, c, dc) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
                self.accumulate(c, &dc);
            }
            Contrib::Many(list) => {
                for (p, dp) in list {
                    self.accumulate(p, &dp);
                }
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // ikj loop order keeps the inner loop contiguous in b and out.
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
}
