// Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//
// The tape is a Wengert list: operations are recorded in forward order and
// replayed exactly once in reverse by `backward`. Values are computed eagerly
// at record time; the tape stores handles to operand/result tensors plus
// whatever forward values the VJPs need.
//
// Gradients accumulate into each tensor's own `grad` buffer, so a parameter
// shared by many ops ends up with the sum of all its contributions.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;

/// Guard for L2 normalization: inputs with norm below this map through a
/// constant 1/EPS scale instead of dividing by zero.
pub const L2_NORM_EPS: f64 = 1e-12;

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense row-major numeric array with shape and optional gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols view of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor");
        (self.shape[0], self.shape[1])
    }

    fn grad_mut(&mut self) -> &mut Vec<f64> {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}

/// Shared handle to a tensor on a tape. Tapes and their tensors are confined
/// to one thread; send plain `Tensor` values across threads instead.
pub type Var = Rc<RefCell<Tensor>>;

/// Create a leaf variable (no producing op).
pub fn leaf(tensor: Tensor) -> Var {
    Rc::new(RefCell::new(tensor))
}

/// Create a leaf that participates in gradients.
pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Var {
    let mut t = Tensor::new(shape, data);
    t.requires_grad = true;
    leaf(t)
}

fn shape_str(s: &[usize]) -> String {
    let mut out = String::from("[");
    for (i, d) in s.iter().enumerate() {
        if i > 0 {
            out.push('x');
        }
        out.push_str(&format!("{d}"));
    }
    out.push(']');
    out
}

// ── Custom ops ───────────────────────────────────────────────────────

/// A fused forward/backward pair recorded on the tape as a single op.
///
/// The implementor computes its output (and any cache it needs) before
/// recording; `backward` receives the output gradient and writes input
/// gradients into the provided sinks (one per input, `None` when that
/// input does not require grad).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, dy: &[f64], inputs: &[&Tensor], dinputs: &mut [Option<&mut [f64]>]);
}

// ── Tape ops ─────────────────────────────────────────────────────────

enum Op {
    Matmul { a: Var, b: Var, out: Var },
    MatmulBT { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, c: f64, out: Var },
    Outer { a: Var, b: Var, out: Var },
    Softmax { a: Var, out: Var, cols: usize },
    Sigmoid { a: Var, out: Var },
    Silu { a: Var, out: Var },
    L2Normalize { a: Var, out: Var, norm: f64 },
    Concat { parts: Vec<Var>, out: Var },
    Slice { a: Var, out: Var, start: usize },
    ReduceSum { a: Var, out: Var },
    RmsNorm { x: Var, gain: Var, out: Var, cols: usize, inv_rms: Vec<f64> },
    Embedding { table: Var, out: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, out: Var, targets: Vec<usize>, mask: Vec<bool>, cols: usize, mean: bool },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var>, out: Var },
}

/// Ordered record of primitive ops; replaying it backward visits each op
/// exactly once. Operands always precede their consumers because values are
/// computed eagerly at record time.
pub struct Tape {
    ops: Vec<Op>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), consumed: false }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Drop all recorded ops so the tape can be reused.
    pub fn reset(&mut self) {
        self.ops.clear();
        self.consumed = false;
    }

    fn push_out(&mut self, requires_grad: bool, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = requires_grad;
        leaf(t)
    }

    // ── Primitive builders ──────────────────────────────────────

    /// out = a @ b for a: [m,k], b: [k,n].
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (a.borrow(), b.borrow());
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {} and {}",
                shape_str(&av.shape),
                shape_str(&bv.shape)
            )));
        }
        let (m, k) = (av.shape[0], av.shape[1]);
        let n = bv.shape[1];
        let mut data = vec![0.0; m * n];
        linalg::matmul(&av.data, &bv.data, &mut data, m, k, n);
        let rg = av.requires_grad || bv.requires_grad;
        drop((av, bv));
        let out = self.push_out(rg, vec![m, n], data);
        self.ops.push(Op::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// out = a @ b^T for a: [m,k], b: [n,k].
    pub fn matmul_bt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (a.borrow(), b.borrow());
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[1] {
            return Err(Error::Dimension(format!(
                "matmul_bt: incompatible shapes {} and {}",
                shape_str(&av.shape),
                shape_str(&bv.shape)
            )));
        }
        let (m, k) = (av.shape[0], av.shape[1]);
        let n = bv.shape[0];
        let mut data = vec![0.0; m * n];
        linalg::matmul_a_bt(&av.data, &bv.data, &mut data, m, k, n);
        let rg = av.requires_grad || bv.requires_grad;
        drop((av, bv));
        let out = self.push_out(rg, vec![m, n], data);
        self.ops.push(Op::MatmulBT { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Elementwise a + b (same shape).
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (a.borrow(), b.borrow());
        if av.shape != bv.shape {
            return Err(Error::Dimension(format!(
                "add: shapes {} and {} differ",
                shape_str(&av.shape),
                shape_str(&bv.shape)
            )));
        }
        let data: Vec<f64> = av.data.iter().zip(bv.data.iter()).map(|(x, y)| x + y).collect();
        let rg = av.requires_grad || bv.requires_grad;
        let shape = av.shape.clone();
        drop((av, bv));
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::Add { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Elementwise a - b (same shape).
    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (a.borrow(), b.borrow());
        if av.shape != bv.shape {
            return Err(Error::Dimension(format!(
                "sub: shapes {} and {} differ",
                shape_str(&av.shape),
                shape_str(&bv.shape)
            )));
        }
        let data: Vec<f64> = av.data.iter().zip(bv.data.iter()).map(|(x, y)| x - y).collect();
        let rg = av.requires_grad || bv.requires_grad;
        let shape = av.shape.clone();
        drop((av, bv));
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::Sub { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Elementwise a * b (same shape).
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (a.borrow(), b.borrow());
        if av.shape != bv.shape {
            return Err(Error::Dimension(format!(
                "mul: shapes {} and {} differ",
                shape_str(&av.shape),
                shape_str(&bv.shape)
            )));
        }
        let data: Vec<f64> = av.data.iter().zip(bv.data.iter()).map(|(x, y)| x * y).collect();
        let rg = av.requires_grad || bv.requires_grad;
        let shape = av.shape.clone();
        drop((av, bv));
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::Mul { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// c * a for a constant c.
    pub fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        let av = a.borrow();
        let data: Vec<f64> = av.data.iter().map(|x| c * x).collect();
        let rg = av.requires_grad;
        let shape = av.shape.clone();
        drop(av);
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::Scale { a: a.clone(), c, out: out.clone() });
        Ok(out)
    }

    /// Outer product of two vectors: out[i,j] = a[i] * b[j].
    pub fn outer(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (a.borrow(), b.borrow());
        if av.shape.len() != 1 || bv.shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "outer: expected vectors, got {} and {}",
                shape_str(&av.shape),
                shape_str(&bv.shape)
            )));
        }
        let (m, n) = (av.data.len(), bv.data.len());
        let mut data = vec![0.0; m * n];
        linalg::outer_acc(&av.data, &bv.data, &mut data);
        let rg = av.requires_grad || bv.requires_grad;
        drop((av, bv));
        let out = self.push_out(rg, vec![m, n], data);
        self.ops.push(Op::Outer { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Softmax along the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: &Var) -> Result<Var> {
        let av = a.borrow();
        if av.data.is_empty() {
            return Err(Error::Domain("softmax: empty input".into()));
        }
        let cols = *av.shape.last().unwrap();
        let mut data = av.data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = av.requires_grad;
        let shape = av.shape.clone();
        drop(av);
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::Softmax { a: a.clone(), out: out.clone(), cols });
        Ok(out)
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let av = a.borrow();
        let data: Vec<f64> = av.data.iter().map(|&x| math::sigmoid(x)).collect();
        let rg = av.requires_grad;
        let shape = av.shape.clone();
        drop(av);
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::Sigmoid { a: a.clone(), out: out.clone() });
        Ok(out)
    }

    /// Elementwise SiLU.
    pub fn silu(&mut self, a: &Var) -> Result<Var> {
        let av = a.borrow();
        let data: Vec<f64> = av.data.iter().map(|&x| math::silu(x)).collect();
        let rg = av.requires_grad;
        let shape = av.shape.clone();
        drop(av);
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::Silu { a: a.clone(), out: out.clone() });
        Ok(out)
    }

    /// L2-normalize a vector, dividing by max(norm, eps).
    pub fn l2_normalize(&mut self, a: &Var) -> Result<Var> {
        let av = a.borrow();
        if av.shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "l2_normalize: expected a vector, got {}",
                shape_str(&av.shape)
            )));
        }
        let norm = linalg::norm2(&av.data);
        let inv = 1.0 / norm.max(L2_NORM_EPS);
        let data: Vec<f64> = av.data.iter().map(|x| x * inv).collect();
        let rg = av.requires_grad;
        let shape = av.shape.clone();
        drop(av);
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::L2Normalize { a: a.clone(), out: out.clone(), norm });
        Ok(out)
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no operands".into()));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            let pv = p.borrow();
            if pv.shape.len() != 1 {
                return Err(Error::Dimension(format!(
                    "concat: expected vectors, got {}",
                    shape_str(&pv.shape)
                )));
            }
            rg |= pv.requires_grad;
            data.extend_from_slice(&pv.data);
        }
        let n = data.len();
        let out = self.push_out(rg, vec![n], data);
        self.ops.push(Op::Concat { parts: parts.to_vec(), out: out.clone() });
        Ok(out)
    }

    /// Contiguous slice of a vector.
    pub fn slice(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let av = a.borrow();
        if av.shape.len() != 1 || start + len > av.data.len() {
            return Err(Error::Dimension(format!(
                "slice: [{start}, {start}+{len}) out of bounds for {}",
                shape_str(&av.shape)
            )));
        }
        let data = av.data[start..start + len].to_vec();
        let rg = av.requires_grad;
        drop(av);
        let out = self.push_out(rg, vec![len], data);
        self.ops.push(Op::Slice { a: a.clone(), out: out.clone(), start });
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn reduce_sum(&mut self, a: &Var) -> Result<Var> {
        let av = a.borrow();
        let s: f64 = av.data.iter().sum();
        let rg = av.requires_grad;
        drop(av);
        let out = self.push_out(rg, vec![1], vec![s]);
        self.ops.push(Op::ReduceSum { a: a.clone(), out: out.clone() });
        Ok(out)
    }

    /// Row-wise RMS normalization with a learned gain:
    /// y[r,:] = x[r,:] * gain / sqrt(mean(x[r,:]^2) + 1e-6).
    pub fn rms_norm(&mut self, x: &Var, gain: &Var) -> Result<Var> {
        let (xv, gv) = (x.borrow(), gain.borrow());
        let cols = *xv.shape.last().unwrap();
        if gv.shape != [cols] {
            return Err(Error::Dimension(format!(
                "rms_norm: gain {} does not match row width {cols}",
                shape_str(&gv.shape)
            )));
        }
        let rows = xv.data.len() / cols;
        let mut inv_rms = vec![0.0; rows];
        let mut data = vec![0.0; xv.data.len()];
        for r in 0..rows {
            let row = &xv.data[r * cols..(r + 1) * cols];
            let ms = linalg::dot(row, row) / cols as f64;
            let inv = 1.0 / math::sqrt(ms + 1e-6);
            inv_rms[r] = inv;
            for j in 0..cols {
                data[r * cols + j] = row[j] * inv * gv.data[j];
            }
        }
        let rg = xv.requires_grad || gv.requires_grad;
        let shape = xv.shape.clone();
        drop((xv, gv));
        let out = self.push_out(rg, shape, data);
        self.ops.push(Op::RmsNorm { x: x.clone(), gain: gain.clone(), out: out.clone(), cols, inv_rms });
        Ok(out)
    }

    /// Look up embedding rows: out[t,:] = table[ids[t],:].
    pub fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let tv = table.borrow();
        let (vocab, d) = tv.dims2();
        for &id in ids {
            if id >= vocab {
                return Err(Error::Input(format!("embedding: token id {id} >= vocab {vocab}")));
            }
        }
        let mut data = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            data[t * d..(t + 1) * d].copy_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        let rg = tv.requires_grad;
        drop(tv);
        let out = self.push_out(rg, vec![ids.len(), d], data);
        self.ops.push(Op::Embedding { table: table.clone(), out: out.clone(), ids: ids.to_vec() });
        Ok(out)
    }

    /// Cross-entropy over masked rows of `logits` [T, V]; `mean` divides by
    /// the number of supervised positions, otherwise the sum is returned.
    pub fn cross_entropy(
        &mut self,
        logits: &Var,
        targets: &[usize],
        mask: &[bool],
        mean: bool,
    ) -> Result<Var> {
        let lv = logits.borrow();
        let (t_len, cols) = lv.dims2();
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {} vs targets {} / mask {}",
                shape_str(&lv.shape),
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: empty supervision mask".into()));
        }
        for (t, &y) in targets.iter().enumerate() {
            if mask[t] && y >= cols {
                return Err(Error::Input(format!("cross_entropy: target {y} >= vocab {cols}")));
            }
        }
        let mut total = 0.0;
        for t in 0..t_len {
            if !mask[t] {
                continue;
            }
            let row = &lv.data[t * cols..(t + 1) * cols];
            total += log_sum_exp(row) - row[targets[t]];
        }
        if mean {
            total /= count as f64;
        }
        let rg = lv.requires_grad;
        drop(lv);
        let out = self.push_out(rg, vec![1], vec![total]);
        self.ops.push(Op::CrossEntropy {
            logits: logits.clone(),
            out: out.clone(),
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            cols,
            mean,
        });
        Ok(out)
    }

    /// Record a fused op whose output was computed by the caller.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: &[&Var],
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
    ) -> Var {
        let rg = inputs.iter().any(|v| v.borrow().requires_grad);
        let out = self.push_out(rg, out_shape, out_data);
        self.ops.push(Op::Custom {
            op,
            inputs: inputs.iter().map(|v| (*v).clone()).collect(),
            out: out.clone(),
        });
        out
    }

    // ── Backward ────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss, seeding its gradient with 1.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse sweep with an explicit seed on the scalar loss. Populates the
    /// `grad` of every recorded tensor that requires grad, then marks the
    /// tape consumed.
    pub fn backward_seeded(&mut self, loss: &Var, seed: f64) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward: tape already consumed (reset first)".into()));
        }
        {
            let mut lt = loss.borrow_mut();
            if lt.numel() != 1 {
                return Err(Error::Contract(format!(
                    "backward: loss must be scalar, got {}",
                    shape_str(&lt.shape)
                )));
            }
            lt.grad_mut()[0] += seed;
        }
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        self.consumed = true;
        Ok(())
    }

    fn backward_op(&mut self, idx: usize) {
        match &self.ops[idx] {
            Op::Matmul { a, b, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let (m, n) = out.borrow().dims2();
                let k = a.borrow().shape[1];
                if a.borrow().requires_grad {
                    // dA = dY @ B^T
                    let bv = b.borrow();
                    let mut bt = vec![0.0; k * n];
                    linalg::transpose(&bv.data, &mut bt, k, n);
                    drop(bv);
                    let mut av = a.borrow_mut();
                    linalg::matmul_acc(&dy, &bt, av.grad_mut(), m, n, k);
                }
                if b.borrow().requires_grad {
                    // dB = A^T @ dY
                    let a_data = a.borrow().data.clone();
                    let mut bv = b.borrow_mut();
                    linalg::matmul_at_b_acc(&a_data, &dy, bv.grad_mut(), m, k, n);
                }
            }
            Op::MatmulBT { a, b, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let (m, n) = out.borrow().dims2();
                let k = a.borrow().shape[1];
                if a.borrow().requires_grad {
                    // dA = dY @ B
                    let b_data = b.borrow().data.clone();
                    let mut av = a.borrow_mut();
                    linalg::matmul_acc(&dy, &b_data, av.grad_mut(), m, n, k);
                }
                if b.borrow().requires_grad {
                    // dB = dY^T @ A
                    let a_data = a.borrow().data.clone();
                    let mut bv = b.borrow_mut();
                    linalg::matmul_at_b_acc(&dy, &a_data, bv.grad_mut(), m, n, k);
                }
            }
            Op::Add { a, b, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                accumulate(a, &dy, 1.0);
                accumulate(b, &dy, 1.0);
            }
            Op::Sub { a, b, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                accumulate(a, &dy, 1.0);
                accumulate(b, &dy, -1.0);
            }
            Op::Mul { a, b, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                if a.borrow().requires_grad {
                    let contrib: Vec<f64> = {
                        let bv = b.borrow();
                        dy.iter().zip(bv.data.iter()).map(|(d, x)| d * x).collect()
                    };
                    accumulate(a, &contrib, 1.0);
                }
                if b.borrow().requires_grad {
                    let contrib: Vec<f64> = {
                        let av = a.borrow();
                        dy.iter().zip(av.data.iter()).map(|(d, x)| d * x).collect()
                    };
                    accumulate(b, &contrib, 1.0);
                }
            }
            Op::Scale { a, c, out } => {
                let c = *c;
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                accumulate(a, &dy, c);
            }
            Op::Outer { a, b, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let (m, n) = out.borrow().dims2();
                if a.borrow().requires_grad {
                    let mut da = vec![0.0; m];
                    {
                        let bv = b.borrow();
                        linalg::matvec(&dy, &bv.data, &mut da, m, n);
                    }
                    accumulate(a, &da, 1.0);
                }
                if b.borrow().requires_grad {
                    let mut db = vec![0.0; n];
                    {
                        let av = a.borrow();
                        linalg::matvec_t(&dy, &av.data, &mut db, m, n);
                    }
                    accumulate(b, &db, 1.0);
                }
            }
            Op::Softmax { a, out, cols } => {
                let cols = *cols;
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let da = {
                    let ov = out.borrow();
                    let mut da = vec![0.0; dy.len()];
                    for (r, row) in ov.data.chunks(cols).enumerate() {
                        let dy_row = &dy[r * cols..(r + 1) * cols];
                        let dot = linalg::dot(dy_row, row);
                        for j in 0..cols {
                            da[r * cols + j] = row[j] * (dy_row[j] - dot);
                        }
                    }
                    da
                };
                accumulate(a, &da, 1.0);
            }
            Op::Sigmoid { a, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let da: Vec<f64> = {
                    let ov = out.borrow();
                    dy.iter().zip(ov.data.iter()).map(|(d, s)| d * s * (1.0 - s)).collect()
                };
                accumulate(a, &da, 1.0);
            }
            Op::Silu { a, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let da: Vec<f64> = {
                    let av = a.borrow();
                    dy.iter().zip(av.data.iter()).map(|(d, &x)| d * math::silu_deriv(x)).collect()
                };
                accumulate(a, &da, 1.0);
            }
            Op::L2Normalize { a, out, norm } => {
                let norm = *norm;
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let da = {
                    let ov = out.borrow();
                    l2_normalize_vjp(&dy, &ov.data, norm)
                };
                accumulate(a, &da, 1.0);
            }
            Op::Concat { parts, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let parts = parts.clone();
                let mut off = 0;
                for p in &parts {
                    let n = p.borrow().numel();
                    accumulate(p, &dy[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::Slice { a, out, start } => {
                let start = *start;
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                if !a.borrow().requires_grad {
                    return;
                }
                let mut av = a.borrow_mut();
                let g = av.grad_mut();
                for (j, d) in dy.iter().enumerate() {
                    g[start + j] += d;
                }
            }
            Op::ReduceSum { a, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                if !a.borrow().requires_grad {
                    return;
                }
                let mut av = a.borrow_mut();
                let g = av.grad_mut();
                for gv in g.iter_mut() {
                    *gv += dy[0];
                }
            }
            Op::RmsNorm { x, gain, out, cols, inv_rms } => {
                let cols = *cols;
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                let (dx, dg) = {
                    let xv = x.borrow();
                    let gv = gain.borrow();
                    let rows = inv_rms.len();
                    let mut dx = vec![0.0; xv.data.len()];
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let row = &xv.data[r * cols..(r + 1) * cols];
                        let dy_row = &dy[r * cols..(r + 1) * cols];
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += dy_row[j] * gv.data[j] * row[j];
                            dg[j] += dy_row[j] * row[j] * inv;
                        }
                        let c = s * inv * inv * inv / cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] = dy_row[j] * gv.data[j] * inv - row[j] * c;
                        }
                    }
                    (dx, dg)
                };
                accumulate(x, &dx, 1.0);
                accumulate(gain, &dg, 1.0);
            }
            Op::Embedding { table, out, ids } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                if !table.borrow().requires_grad {
                    return;
                }
                let ids = ids.clone();
                let mut tv = table.borrow_mut();
                let d = tv.shape[1];
                let g = tv.grad_mut();
                for (t, &id) in ids.iter().enumerate() {
                    linalg::axpy(1.0, &dy[t * d..(t + 1) * d], &mut g[id * d..(id + 1) * d]);
                }
            }
            Op::CrossEntropy { logits, out, targets, mask, cols, mean } => {
                let cols = *cols;
                let mean = *mean;
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                if !logits.borrow().requires_grad {
                    return;
                }
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = if mean { dy[0] / count } else { dy[0] };
                let dl = {
                    let lv = logits.borrow();
                    let mut dl = vec![0.0; lv.data.len()];
                    for t in 0..targets.len() {
                        if !mask[t] {
                            continue;
                        }
                        let row = &lv.data[t * cols..(t + 1) * cols];
                        let drow = &mut dl[t * cols..(t + 1) * cols];
                        drow.copy_from_slice(row);
                        softmax_in_place(drow);
                        drow[targets[t]] -= 1.0;
                        for v in drow.iter_mut() {
                            *v *= scale;
                        }
                    }
                    dl
                };
                accumulate(logits, &dl, 1.0);
            }
            Op::Custom { op, inputs, out } => {
                let dy = match take_grad(out) {
                    Some(g) => g,
                    None => return,
                };
                // Snapshot input values, then hand mutable grad slices to
                // the op's backward.
                let datas: Vec<Tensor> = inputs
                    .iter()
                    .map(|v| {
                        let b = v.borrow();
                        let mut t = Tensor::new(b.shape.clone(), b.data.clone());
                        t.requires_grad = b.requires_grad;
                        t
                    })
                    .collect();
                let data_refs: Vec<&Tensor> = datas.iter().collect();
                let mut borrows: Vec<_> = inputs.iter().map(|v| v.borrow_mut()).collect();
                for b in borrows.iter_mut() {
                    if b.requires_grad {
                        b.grad_mut();
                    }
                }
                let mut sinks: Vec<Option<&mut [f64]>> = borrows
                    .iter_mut()
                    .map(|b| {
                        if b.requires_grad {
                            Some(b.grad.as_mut().unwrap().as_mut_slice())
                        } else {
                            None
                        }
                    })
                    .collect();
                op.backward(&dy, &data_refs, &mut sinks);
            }
        }
    }
}

/// Read (a copy of) the accumulated gradient at a tensor, if any flowed.
fn take_grad(v: &Var) -> Option<Vec<f64>> {
    let t = v.borrow();
    t.grad.clone()
}

fn accumulate(v: &Var, contrib: &[f64], scale: f64) {
    let mut t = v.borrow_mut();
    if !t.requires_grad {
        return;
    }
    let g = t.grad_mut();
    linalg::axpy(scale, contrib, g);
}

/// Stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Stable log(sum(exp(row))).
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += math::exp(v - max);
    }
    max + math::ln(sum)
}

/// Softmax of a vector, as the standalone operation (errors on empty input).
pub fn softmax_cols(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Domain("softmax: empty input".into()));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Key/query feature map: SiLU followed by L2 normalization. A zero SiLU
/// output maps to the zero vector via the epsilon guard.
pub fn phi(k: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = k.iter().map(|&x| math::silu(x)).collect();
    let norm = linalg::norm2(&out);
    let inv = 1.0 / norm.max(L2_NORM_EPS);
    for v in out.iter_mut() {
        *v *= inv;
    }
    out
}

/// VJP of L2 normalization given the output `y`, upstream `dy`, and the
/// pre-normalization norm.
pub fn l2_normalize_vjp(dy: &[f64], y: &[f64], norm: f64) -> Vec<f64> {
    let guarded = norm.max(L2_NORM_EPS);
    if norm <= L2_NORM_EPS {
        // Below the guard the map is linear: y = z / eps.
        return dy.iter().map(|d| d / guarded).collect();
    }
    let dot = linalg::dot(dy, y);
    dy.iter()
        .zip(y.iter())
        .map(|(d, yi)| (d - yi * dot) / guarded)
        .collect()
}

/// VJP of phi at input `k` given upstream `dphi`.
pub fn phi_vjp(dphi: &[f64], k: &[f64]) -> Vec<f64> {
    let silu_out: Vec<f64> = k.iter().map(|&x| math::silu(x)).collect();
    let norm = linalg::norm2(&silu_out);
    let inv = 1.0 / norm.max(L2_NORM_EPS);
    let y: Vec<f64> = silu_out.iter().map(|v| v * inv).collect();
    let dsilu = l2_normalize_vjp(dphi, &y, norm);
    dsilu
        .iter()
        .zip(k.iter())
        .map(|(d, &x)| d * math::silu_deriv(x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central-difference gradient of a scalar-valued closure over a flat
    /// parameter vector; the independent oracle for every VJP below.
    fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        let mut work = theta.to_vec();
        for i in 0..theta.len() {
            work[i] = theta[i] + h;
            let fp = f(&work);
            work[i] = theta[i] - h;
            let fm = f(&work);
            work[i] = theta[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
        got.iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let eye = leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(&eye, &b).unwrap();
        assert_eq!(out.borrow().data, vec![1.0, 2.0, 3.0, 4.0]);

        let p = leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]));
        let v = leaf(Tensor::new(vec![2, 1], vec![5.0, 7.0]));
        let out = tape.matmul(&p, &v).unwrap();
        assert_eq!(out.borrow().data, vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(Tensor::zeros(vec![3, 4]));
        let b = leaf(Tensor::zeros(vec![3, 2]));
        let err = tape.matmul(&a, &b).unwrap_err();
        match err {
            Error::Dimension(msg) => {
                assert!(msg.contains("[3x4]") && msg.contains("[3x2]"), "{msg}");
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let (m, k, n) = (3, 4, 2);
        let mut a0 = vec![0.0; m * k];
        let mut b0 = vec![0.0; k * n];
        rng.fill_gauss(&mut a0, 1.0);
        rng.fill_gauss(&mut b0, 1.0);

        // Analytic gradients of sum(A @ B).
        let mut tape = Tape::new();
        let a = param(vec![m, k], a0.clone());
        let b = param(vec![k, n], b0.clone());
        let prod = tape.matmul(&a, &b).unwrap();
        let loss = tape.reduce_sum(&prod).unwrap();
        tape.backward(&loss).unwrap();
        let ga = a.borrow().grad.clone().unwrap();
        let gb = b.borrow().grad.clone().unwrap();

        let mut fa = |theta: &[f64]| {
            let mut c = vec![0.0; m * n];
            linalg::matmul(theta, &b0, &mut c, m, k, n);
            c.iter().sum()
        };
        let fd_a = fd_grad(&mut fa, &a0, 1e-5);
        assert!(max_rel_err(&ga, &fd_a) < 1e-6, "dA err {}", max_rel_err(&ga, &fd_a));

        let mut fb = |theta: &[f64]| {
            let mut c = vec![0.0; m * n];
            linalg::matmul(&a0, theta, &mut c, m, k, n);
            c.iter().sum()
        };
        let fd_b = fd_grad(&mut fb, &b0, 1e-5);
        assert!(max_rel_err(&gb, &fd_b) < 1e-6, "dB err {}", max_rel_err(&gb, &fd_b));
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let mut rng = Rng::new(53);
        let (m, k, n) = (3, 4, 5);
        let mut a0 = vec![0.0; m * k];
        let mut b0 = vec![0.0; n * k];
        rng.fill_gauss(&mut a0, 1.0);
        rng.fill_gauss(&mut b0, 1.0);

        let mut tape = Tape::new();
        let a = param(vec![m, k], a0.clone());
        let b = param(vec![n, k], b0.clone());
        let out = tape.matmul_bt(&a, &b).unwrap();
        // Same value as a @ transpose(b).
        let mut bt = vec![0.0; k * n];
        linalg::transpose(&b0, &mut bt, n, k);
        let bt_var = leaf(Tensor::new(vec![k, n], bt));
        let want = tape.matmul(&a, &bt_var).unwrap();
        for (x, y) in out.borrow().data.iter().zip(want.borrow().data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Gradients against finite differences.
        let loss = tape.reduce_sum(&out).unwrap();
        tape.backward(&loss).unwrap();
        let ga = a.borrow().grad.clone().unwrap();
        let gb = b.borrow().grad.clone().unwrap();
        let mut theta: Vec<f64> = a0.iter().chain(b0.iter()).cloned().collect();
        let mut f = |th: &[f64]| {
            let mut c = vec![0.0; m * n];
            linalg::matmul_a_bt(&th[..m * k], &th[m * k..], &mut c, m, k, n);
            c.iter().sum()
        };
        let fd = fd_grad(&mut f, &mut theta, 1e-5);
        let got: Vec<f64> = ga.iter().chain(gb.iter()).cloned().collect();
        assert!(max_rel_err(&got, &fd) < 1e-6);
    }

    #[test]
    fn softmax_trivial_cases() {
        assert_eq!(softmax_cols(&[3.7]).unwrap(), vec![1.0]);
        let two = softmax_cols(&[1.25, 1.25]).unwrap();
        assert!((two[0] - 0.5).abs() < 1e-15 && (two[1] - 0.5).abs() < 1e-15);
        // Closed form: softmax([0, ln 3]) = [1/4, 3/4].
        let v = softmax_cols(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax_cols(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let mut x = vec![0.0; 9];
            rng.fill_gauss(&mut x, 3.0);
            let s = softmax_cols(&x).unwrap();
            let total: f64 = s.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|&p| p > 0.0));
            let shifted: Vec<f64> = x.iter().map(|v| v + 41.5).collect();
            let s2 = softmax_cols(&shifted).unwrap();
            for (a, b) in s.iter().zip(s2.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phi_unit_norm_or_zero() {
        // One dominant coordinate: SiLU(10) ~ 10, normalizes to ~e1.
        let p = phi(&[10.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-4 && p[1].abs() < 1e-12);
        // Zero input maps to zero under the epsilon guard.
        assert_eq!(phi(&[0.0, 0.0]), vec![0.0, 0.0]);
        // Equal coordinates: normalization cancels the SiLU scale.
        let p = phi(&[1.0, 1.0]);
        let r = 0.5f64.sqrt();
        assert!((p[0] - r).abs() < 1e-12 && (p[1] - r).abs() < 1e-12);
        // Norm is 0 or 1 for arbitrary finite inputs.
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let mut k = vec![0.0; 6];
            rng.fill_gauss(&mut k, 2.0);
            let n = linalg::norm2(&phi(&k));
            assert!((n - 1.0).abs() < 1e-9 || n < 1e-9, "norm={n}");
        }
    }

    #[test]
    fn backward_sum_and_half_square_norm() {
        // loss = sum(x) -> x.grad all ones.
        let mut tape = Tape::new();
        let x = param(vec![5], vec![0.3, -1.2, 4.0, 0.0, 2.5]);
        let loss = tape.reduce_sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.borrow().grad.clone().unwrap(), vec![1.0; 5]);

        // loss = ||x||^2 / 2 -> x.grad = x.
        let mut tape = Tape::new();
        let x0 = vec![0.5, -2.0, 3.25];
        let x = param(vec![3], x0.clone());
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.reduce_sum(&sq).unwrap();
        let loss = tape.scale(&s, 0.5).unwrap();
        tape.backward(&loss).unwrap();
        let g = x.borrow().grad.clone().unwrap();
        for (gv, xv) in g.iter().zip(x0.iter()) {
            assert!((gv - xv).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_consumed_tape() {
        let mut tape = Tape::new();
        let x = param(vec![3], vec![1.0, 2.0, 3.0]);
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
        let loss = tape.reduce_sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        // Second backward on a consumed tape is a contract error.
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
        tape.reset();
        assert_eq!(tape.num_ops(), 0);
    }

    /// Composite of the primitive set against central finite differences.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let n = 6;
        let mut theta0 = vec![0.0; n * n + n];
        rng.fill_gauss(&mut theta0, 0.8);

        let run = |theta: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let w = param(vec![n, n], theta[..n * n].to_vec());
            let x = param(vec![n, 1], theta[n * n..].to_vec());
            let h = tape.matmul(&w, &x).unwrap();
            let h2 = tape.sigmoid(&h).unwrap();
            let h3 = tape.silu(&h2).unwrap();
            let prod = tape.mul(&h3, &h3).unwrap();
            let s = tape.reduce_sum(&prod).unwrap();
            let val = s.borrow().data[0];
            if !want_grad {
                return (val, Vec::new());
            }
            tape.backward(&s).unwrap();
            let mut g = w.borrow().grad.clone().unwrap();
            g.extend_from_slice(&x.borrow().grad.clone().unwrap());
            (val, g)
        };

        let (_, got) = run(&theta0, true);
        let mut f = |theta: &[f64]| run(theta, false).0;
        let fd = fd_grad(&mut f, &theta0, 1e-5);
        let err = max_rel_err(&got, &fd);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn softmax_l2norm_concat_slice_outer_gradients() {
        let mut rng = Rng::new(31);
        let n = 5;
        let mut theta0 = vec![0.0; 2 * n];
        rng.fill_gauss(&mut theta0, 1.1);

        let run = |theta: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let a = param(vec![n], theta[..n].to_vec());
            let b = param(vec![n], theta[n..].to_vec());
            let sm = tape.softmax(&a).unwrap();
            let nb = tape.l2_normalize(&b).unwrap();
            let cat = tape.concat(&[sm.clone(), nb.clone()]).unwrap();
            let sl = tape.slice(&cat, 2, 2 * n - 3).unwrap();
            let op = tape.outer(&sl, &nb).unwrap();
            let s = tape.reduce_sum(&op).unwrap();
            let loss = tape.scale(&s, 0.5).unwrap();
            let val = loss.borrow().data[0];
            if !want_grad {
                return (val, Vec::new());
            }
            tape.backward(&loss).unwrap();
            let mut g = a.borrow().grad.clone().unwrap();
            g.extend_from_slice(&b.borrow().grad.clone().unwrap());
            (val, g)
        };

        let (_, got) = run(&theta0, true);
        let mut f = |theta: &[f64]| run(theta, false).0;
        let fd = fd_grad(&mut f, &theta0, 1e-6);
        let err = max_rel_err(&got, &fd);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn rms_norm_embedding_cross_entropy_gradients() {
        let mut rng = Rng::new(37);
        let (vocab, d) = (4, 3);
        let ids = [0usize, 2, 1, 3, 2];
        let targets = [1usize, 0, 3, 2, 0];
        let mask = [true, false, true, true, false];
        let mut theta0 = vec![0.0; vocab * d + d + d * vocab];
        rng.fill_gauss(&mut theta0, 0.9);

        let run = |theta: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let table = param(vec![vocab, d], theta[..vocab * d].to_vec());
            let gain = param(vec![d], theta[vocab * d..vocab * d + d].to_vec());
            let proj = param(vec![d, vocab], theta[vocab * d + d..].to_vec());
            let e = tape.embedding(&table, &ids).unwrap();
            let h = tape.rms_norm(&e, &gain).unwrap();
            let logits = tape.matmul(&h, &proj).unwrap();
            let loss = tape.cross_entropy(&logits, &targets, &mask, true).unwrap();
            let val = loss.borrow().data[0];
            if !want_grad {
                return (val, Vec::new());
            }
            tape.backward(&loss).unwrap();
            let mut g = table.borrow().grad.clone().unwrap();
            g.extend_from_slice(&gain.borrow().grad.clone().unwrap());
            g.extend_from_slice(&proj.borrow().grad.clone().unwrap());
            (val, g)
        };

        let (_, got) = run(&theta0, true);
        let mut f = |theta: &[f64]| run(theta, false).0;
        let fd = fd_grad(&mut f, &theta0, 1e-6);
        let err = max_rel_err(&got, &fd);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = leaf(Tensor::zeros(vec![3, 10]));
        let loss = tape
            .cross_entropy(&logits, &[1, 2, 3], &[true, true, true], true)
            .unwrap();
        assert!((loss.borrow().data[0] - 10.0f64.ln()).abs() < 1e-12);
        // Empty mask is a contract error.
        let err = tape.cross_entropy(&logits, &[1, 2, 3], &[false, false, false], true);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn identical_tapes_give_bit_identical_gradients() {
        let mut rng = Rng::new(41);
        let mut w0 = vec![0.0; 16];
        rng.fill_gauss(&mut w0, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let w = param(vec![4, 4], w0.clone());
            let x = leaf(Tensor::new(vec![4, 1], vec![0.2, -0.4, 0.6, 1.0]));
            let h = tape.matmul(&w, &x).unwrap();
            let s = tape.silu(&h).unwrap();
            let loss = tape.reduce_sum(&s).unwrap();
            tape.backward(&loss).unwrap();
            let g = w.borrow().grad.clone().unwrap();
            g
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2);
    }
}
