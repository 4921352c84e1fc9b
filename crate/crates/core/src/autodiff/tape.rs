use rand::Rng;

use super::kernels::{self, gemm, sigmoid, WkvShape};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Relu,
    ReluSquared,
    Exp,
    /// `mu ⊙ x + (1 − mu) ⊙ prev`, inputs ordered `[mu, x, prev]`.
    Lerp,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Sigmoid,
    Relu,
    ReluSquared,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Unary(usize, Unary),
    Lerp {
        mu: usize,
        x: usize,
        prev: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanLast {
        x: usize,
        width: usize,
    },
    Reshape(usize),
    TimeShift {
        x: usize,
        steps: usize,
        width: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        width: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        a: usize,
        b: usize,
        wa: usize,
        wb: usize,
    },
    CrossEntropy {
        logits: usize,
        classes: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: usize,
        target: Vec<f64>,
    },
    Mask {
        x: usize,
        mask: Vec<f64>,
    },
    Wkv {
        g: usize,
        k: usize,
        v: usize,
        w: usize,
        u: usize,
        shape: WkvShape,
        states: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation. Nodes are append-only, so every node's inputs precede it.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Describes how `small` repeats inside `large` under leading-1 expansion.
/// Returns the output shape.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let trim = |s: &[usize]| -> Vec<usize> {
        let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
        s[first..].to_vec()
    };
    let (ta, tb) = (trim(a), trim(b));
    if a.len() >= b.len() && a.ends_with(&tb) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(&ta) {
        Ok(b.to_vec())
    } else {
        dim_err(format!("shapes {a:?} and {b:?} do not broadcast"))
    }
}

/// Sums `grad` (output-sized) into an operand of length `len` that repeats
/// with period `len`.
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in grad.chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Disables the finite-value check at op boundaries.
    pub fn unchecked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well-formed")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        tracked: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.checked && value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    /// Records a tensor as a leaf; it is differentiated iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Records a non-differentiated input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push("constant", t.shape().to_vec(), t.into_data(), Op::Leaf, false)
    }

    /// `a (…, m, k) × b (k, n) → (…, m, n)`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 {
            return dim_err(format!("matmul expects (…,m,k)×(k,n), got {sa:?}×{sb:?}"));
        }
        let k = sa[sa.len() - 1];
        if k != sb[0] {
            return dim_err(format!("matmul inner dimensions differ: {sa:?}×{sb:?}"));
        }
        let n = sb[1];
        let m = sa[..sa.len() - 1].iter().product::<usize>();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let tracked = self.tracked(&[a.0, b.0]);
        self.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            tracked,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let numel: usize = shape.iter().product();
        let (la, lb) = (va.len(), vb.len());
        let out: Vec<f64> = (0..numel).map(|i| f(va[i % la], vb[i % lb])).collect();
        let tracked = self.tracked(&[a.0, b.0]);
        self.push(name, shape, out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let tracked = self.tracked(&[a.0]);
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale(a.0, c), tracked)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |x| x.max(0.0),
            Unary::ReluSquared => |x| {
                let r = x.max(0.0);
                r * r
            },
            Unary::Exp => f64::exp,
        };
        let name = match kind {
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::ReluSquared => "relu_squared",
            Unary::Exp => "exp",
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(&[a.0]);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, Op::Unary(a.0, kind), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    /// `max(x, 0)²`.
    pub fn relu_squared(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::ReluSquared)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    /// `mu ⊙ x + (1 − mu) ⊙ prev`; `mu` may broadcast over `x`.
    pub fn lerp(&mut self, mu: Var, x: Var, prev: Var) -> Result<Var> {
        if self.shape(x) != self.shape(prev) {
            return dim_err(format!(
                "lerp endpoints differ: {:?} vs {:?}",
                self.shape(x),
                self.shape(prev)
            ));
        }
        let shape = broadcast_shape(self.shape(x), self.shape(mu))?;
        if shape != self.shape(x) {
            return dim_err("lerp weight must broadcast into the endpoints");
        }
        let (vm, vx, vp) = (self.value(mu), self.value(x), self.value(prev));
        let lm = vm.len();
        let out = (0..vx.len())
            .map(|i| {
                let m = vm[i % lm];
                m * vx[i] + (1.0 - m) * vp[i]
            })
            .collect();
        let tracked = self.tracked(&[mu.0, x.0, prev.0]);
        self.push(
            "lerp",
            shape,
            out,
            Op::Lerp {
                mu: mu.0,
                x: x.0,
                prev: prev.0,
            },
            tracked,
        )
    }

    /// Dispatches one of the elementwise primitives by selector.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            Elementwise::Lerp => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operands, got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Sigmoid => self.sigmoid(inputs[0]),
            Elementwise::Relu => self.relu(inputs[0]),
            Elementwise::ReluSquared => self.relu_squared(inputs[0]),
            Elementwise::Exp => self.exp(inputs[0]),
            Elementwise::Lerp => self.lerp(inputs[0], inputs[1], inputs[2]),
        }
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(&[a.0]);
        self.push("sum", vec![1], vec![s], Op::Sum(a.0), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(&[a.0]);
        self.push("mean", vec![1], vec![s], Op::Mean(a.0), tracked)
    }

    /// Mean over the last axis, which is removed (a rank-1 input gives `[1]`).
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().expect("tensors have rank >= 1");
        let out = self
            .value(a)
            .chunks(width)
            .map(|c| c.iter().sum::<f64>() / width as f64)
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let tracked = self.tracked(&[a.0]);
        self.push("mean_last", out_shape, out, Op::MeanLast { x: a.0, width }, tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.iter().any(|&d| d == 0) {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let tracked = self.tracked(&[a.0]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a.0), tracked)
    }

    /// Shifts along the second-to-last (time) axis: row `t` becomes row
    /// `t − 1` and row 0 becomes zero, independently for every leading index.
    pub fn time_shift(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return dim_err("time_shift expects (…, T, C)");
        }
        let width = shape[shape.len() - 1];
        let steps = shape[shape.len() - 2];
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for (o, s) in out
            .chunks_mut(steps * width)
            .zip(src.chunks(steps * width))
        {
            o[width..].copy_from_slice(&s[..(steps - 1) * width]);
        }
        let tracked = self.tracked(&[a.0]);
        self.push(
            "time_shift",
            shape,
            out,
            Op::TimeShift { x: a.0, steps, width },
            tracked,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("rank >= 1");
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return dim_err(format!("layer_norm affine params must be [{width}]"));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = vx.len() / width;
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = h * vg[j] + vb[j];
            }
        }
        let tracked = self.tracked(&[x.0, gamma.0, beta.0]);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                width,
                xhat,
                inv_std,
            },
            tracked,
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return dim_err(format!("cannot concatenate {sa:?} with {sb:?}"));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self.value(a).chunks(wa).zip(self.value(b).chunks(wb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().expect("rank >= 1") = wa + wb;
        let tracked = self.tracked(&[a.0, b.0]);
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                a: a.0,
                b: b.0,
                wa,
                wb,
            },
            tracked,
        )
    }

    /// Mean softmax cross-entropy of `(B, K)` logits against class labels,
    /// via a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return dim_err(format!(
                "cross_entropy expects ({}, K) logits, got {shape:?}",
                labels.len()
            ));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![0.0; labels.len() * classes];
        let mut loss = 0.0;
        for (r, row) in self.value(logits).chunks(classes).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (j, z) in row.iter().enumerate() {
                probs[r * classes + j] = (z - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        loss /= labels.len() as f64;
        let tracked = self.tracked(&[logits.0]);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                classes,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        )
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return dim_err("mse target length differs from prediction");
        }
        let n = target.len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n;
        let tracked = self.tracked(&[pred.0]);
        self.push(
            "mse",
            vec![1],
            vec![loss],
            Op::Mse {
                pred: pred.0,
                target: target.to_vec(),
            },
            tracked,
        )
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let tracked = self.tracked(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Mask { x: x.0, mask }, tracked)
    }

    /// Gated multi-head WKV readout: `y_t = g_t · wkv_t` per head, with
    /// `wkv_t` from the decayed key–value recurrence.
    ///
    /// `g, k, v`: `(…, T, C)`; `w, u`: `(heads, C / heads)` with `w ∈ (0, 1)`.
    pub fn wkv_gated(&mut self, g: Var, k: Var, v: Var, w: Var, u: Var) -> Result<Var> {
        let shape = self.shape(k).to_vec();
        if shape.len() < 2 || self.shape(g) != shape || self.shape(v) != shape {
            return dim_err("wkv expects equal (…, T, C) gate, key and value");
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || self.shape(u) != ws {
            return dim_err("wkv decay and bonus must both be (heads, head_dim)");
        }
        let c = shape[shape.len() - 1];
        let steps = shape[shape.len() - 2];
        if ws[0] * ws[1] != c {
            return dim_err(format!("heads×head_dim {ws:?} does not cover {c} channels"));
        }
        if let Some(bad) = self.value(w).iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::Contract(format!("wkv decay {bad} outside (0, 1)")));
        }
        let wshape = WkvShape {
            seqs: self.value(k).len() / (steps * c),
            steps,
            heads: ws[0],
            head_dim: ws[1],
        };
        let tracked = self.tracked(&[g.0, k.0, v.0, w.0, u.0]);
        let mut states = Vec::new();
        let out = kernels::wkv_forward(
            wshape,
            self.value(g),
            self.value(k),
            self.value(v),
            self.value(w),
            self.value(u),
            tracked.then_some(&mut states),
        );
        self.push(
            "wkv",
            shape,
            out,
            Op::Wkv {
                g: g.0,
                k: k.0,
                v: v.0,
                w: w.0,
                u: u.0,
                shape: wshape,
                states,
            },
            tracked,
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every tracked
    /// leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(grad);
                continue;
            }
            for (parent, g) in self.local_grads(id, &grad) {
                if !self.nodes[parent].tracked {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // only leaves keep their gradient at this point
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    /// Vector–Jacobian products of node `id` for each of its inputs.
    fn local_grads(&self, id: usize, grad: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, m, k, n } => {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, grad, false, val(b), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(a), true, grad, false, &mut gb, false);
                vec![(a, ga), (b, gb)]
            }
            &Op::Add(a, b) => vec![
                (a, reduce_to(grad, val(a).len())),
                (b, reduce_to(grad, val(b).len())),
            ],
            &Op::Sub(a, b) => {
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                vec![
                    (a, reduce_to(grad, val(a).len())),
                    (b, reduce_to(&neg, val(b).len())),
                ]
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (la, lb) = (va.len(), vb.len());
                let da: Vec<f64> = grad.iter().enumerate().map(|(i, g)| g * vb[i % lb]).collect();
                let db: Vec<f64> = grad.iter().enumerate().map(|(i, g)| g * va[i % la]).collect();
                vec![(a, reduce_to(&da, la)), (b, reduce_to(&db, lb))]
            }
            &Op::Scale(a, c) => vec![(a, grad.iter().map(|g| g * c).collect())],
            &Op::Unary(a, kind) => {
                let (x, y) = (val(a), &node.value);
                let d: Vec<f64> = match kind {
                    Unary::Sigmoid => (0..grad.len()).map(|i| grad[i] * y[i] * (1.0 - y[i])).collect(),
                    Unary::Relu => (0..grad.len())
                        .map(|i| if x[i] > 0.0 { grad[i] } else { 0.0 })
                        .collect(),
                    Unary::ReluSquared => (0..grad.len())
                        .map(|i| grad[i] * 2.0 * x[i].max(0.0))
                        .collect(),
                    Unary::Exp => (0..grad.len()).map(|i| grad[i] * y[i]).collect(),
                };
                vec![(a, d)]
            }
            &Op::Lerp { mu, x, prev } => {
                let (vm, vx, vp) = (val(mu), val(x), val(prev));
                let lm = vm.len();
                let dx = (0..grad.len()).map(|i| grad[i] * vm[i % lm]).collect();
                let dp = (0..grad.len()).map(|i| grad[i] * (1.0 - vm[i % lm])).collect();
                let dm: Vec<f64> = (0..grad.len()).map(|i| grad[i] * (vx[i] - vp[i])).collect();
                vec![(mu, reduce_to(&dm, lm)), (x, dx), (prev, dp)]
            }
            &Op::Sum(a) => vec![(a, vec![grad[0]; val(a).len()])],
            &Op::Mean(a) => {
                let n = val(a).len();
                vec![(a, vec![grad[0] / n as f64; n])]
            }
            &Op::MeanLast { x, width } => {
                let d = grad
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g / width as f64, width))
                    .collect();
                vec![(x, d)]
            }
            &Op::Reshape(a) => vec![(a, grad.to_vec())],
            &Op::TimeShift { x, steps, width } => {
                let mut d = vec![0.0; grad.len()];
                for (dc, gc) in d.chunks_mut(steps * width).zip(grad.chunks(steps * width)) {
                    dc[..(steps - 1) * width].copy_from_slice(&gc[width..]);
                }
                vec![(x, d)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                xhat,
                inv_std,
            } => {
                let w = *width;
                let vg = val(*gamma);
                let mut dx = vec![0.0; grad.len()];
                let mut dgamma = vec![0.0; w];
                let mut dbeta = vec![0.0; w];
                for (r, is) in inv_std.iter().enumerate() {
                    let g = &grad[r * w..(r + 1) * w];
                    let h = &xhat[r * w..(r + 1) * w];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..w {
                        let dh = g[j] * vg[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                        dgamma[j] += g[j] * h[j];
                        dbeta[j] += g[j];
                    }
                    for j in 0..w {
                        let dh = g[j] * vg[j];
                        dx[r * w + j] =
                            is * (dh - sum_dh / w as f64 - h[j] * sum_dh_h / w as f64);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            &Op::Concat { a, b, wa, wb } => {
                let mut da = Vec::with_capacity(val(a).len());
                let mut db = Vec::with_capacity(val(b).len());
                for row in grad.chunks(wa + wb) {
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                vec![(a, da), (b, db)]
            }
            Op::CrossEntropy {
                logits,
                classes,
                labels,
                probs,
            } => {
                let scale = grad[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::Mse { pred, target } => {
                let n = target.len() as f64;
                let d = val(*pred)
                    .iter()
                    .zip(target)
                    .map(|(p, t)| grad[0] * 2.0 * (p - t) / n)
                    .collect();
                vec![(*pred, d)]
            }
            Op::Mask { x, mask } => vec![(*x, grad.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::Wkv {
                g,
                k,
                v,
                w,
                u,
                shape,
                states,
            } => {
                let gr = kernels::wkv_backward(
                    *shape,
                    val(*g),
                    val(*k),
                    val(*v),
                    val(*w),
                    val(*u),
                    states,
                    grad,
                );
                vec![(*g, gr.g), (*k, gr.k), (*v, gr.v), (*w, gr.w), (*u, gr.u)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        let t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad();
        tape.leaf(&t).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), &[3.0, 4.0]);
        assert_eq!(tape.shape(y), &[2, 1]);

        let a = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![-1.0, 2.0]).unwrap();
        let r = tape.elementwise(Elementwise::ReluSquared, &[x]).unwrap();
        assert_eq!(tape.value(r), &[0.0, 4.0]);

        let z = tape.constant(&[1], vec![0.0]).unwrap();
        let s = tape.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        assert_eq!(tape.value(s), &[0.5]);

        let mu = tape.constant(&[1], vec![0.25]).unwrap();
        let xt = tape.constant(&[1], vec![4.0]).unwrap();
        let xp = tape.constant(&[1], vec![8.0]).unwrap();
        let l = tape.elementwise(Elementwise::Lerp, &[mu, xt, xp]).unwrap();
        assert_eq!(tape.value(l), &[7.0]);
    }

    #[test]
    fn broadcasting_is_leading_one_only() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![1.0; 6]).unwrap();
        let bias = tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(y), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let bias1 = tape.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(tape.add(a, bias1).is_ok());
        // trailing expansion is not allowed
        let col = tape.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.add(a, col), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape_leaf(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(tape.is_empty(), "tape is cleared after backward");
    }

    #[test]
    fn backward_sigmoid_of_dot_at_zero() {
        let xs = [0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let w = tape_leaf(&mut tape, &[1, 3], &[0.0; 3]);
        let x = tape.constant(&[3, 1], xs.to_vec()).unwrap();
        let z = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let expected: Vec<f64> = xs.iter().map(|x| 0.25 * x).collect();
        assert_eq!(grads.get(w).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape_leaf(&mut tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(Var(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1], vec![1000.0]).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite("exp"))));
        let mut loose = Tape::unchecked();
        let x = loose.constant(&[1], vec![1000.0]).unwrap();
        assert!(loose.exp(x).is_ok());
    }

    #[test]
    fn time_shift_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = tape.time_shift(x).unwrap();
        assert_eq!(tape.value(s), &[0.0, 1.0, 2.0]);
        let s2 = tape.time_shift(s).unwrap();
        assert_eq!(tape.value(s2), &[0.0, 0.0, 1.0]);
        let one = tape.constant(&[1, 2], vec![5.0, 6.0]).unwrap();
        let z = tape.time_shift(one).unwrap();
        assert_eq!(tape.value(z), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape_leaf(&mut tape, &[2, 2], &[0.0; 4]);
        let l = tape.cross_entropy(z, &[0, 1]).unwrap();
        assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(z).unwrap(), &[-0.25, 0.25, 0.25, -0.25]);
    }
}
