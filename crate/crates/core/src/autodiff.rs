//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Shapes vary per branch (each patch size yields a different token count),
//! so the graph is define-by-run: every forward call records operations on
//! a [`Tape`]; [`Tape::backward`] replays them in reverse. All math is
//! `f64`, and gradient accumulation follows tape order, which makes repeat
//! runs bitwise identical.

use crate::error::Error;
use crate::params::ParamStore;
use crate::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Identity of a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Running mean/variance of one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(features: usize) -> Self {
        BnRunning { mean: vec![0.0; features], var: vec![1.0; features] }
    }
}

/// How a batch-norm op sources its statistics.
pub enum BnMode<'a> {
    /// Normalize with batch statistics; update `running` by EMA when given.
    /// (Gradient checks pass `None` to keep the function fixed.)
    Train { running: Option<&'a mut BnRunning> },
    /// Normalize with frozen running statistics.
    Eval { running: &'a BnRunning },
}

struct Slot {
    value: Tensor,
    grad: Option<Vec<f64>>,
}

enum Op {
    Matmul { a: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    Transpose { a: VarId, out: VarId, rows: usize, cols: usize },
    Add { a: VarId, b: VarId, out: VarId },
    Sub { a: VarId, b: VarId, out: VarId },
    Mul { a: VarId, b: VarId, out: VarId },
    Scale { a: VarId, c: f64, out: VarId },
    AddScalar { a: VarId, out: VarId },
    AddRowVec { x: VarId, v: VarId, out: VarId, rows: usize, cols: usize },
    SoftmaxRows { a: VarId, out: VarId, rows: usize, cols: usize },
    Gelu { a: VarId, out: VarId },
    Dropout { a: VarId, out: VarId, mask: Vec<f64> },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Tokenize { y: VarId, out: VarId, p: usize, s: usize, d: usize },
    SliceRows { a: VarId, out: VarId, start: usize, rows: usize, cols: usize },
    ConcatFlat { parts: Vec<VarId>, out: VarId, sizes: Vec<usize> },
    ConcatCols { parts: Vec<VarId>, out: VarId, rows: usize, widths: Vec<usize> },
    Reshape { a: VarId, out: VarId },
    SumAll { a: VarId, out: VarId },
    MulVarScalar { a: VarId, s: VarId, out: VarId },
    AddVarScalar { a: VarId, s: VarId, out: VarId, sign: f64 },
    RecipScalar { s: VarId, out: VarId },
}

/// Wengert-list tape: forward ops append, `backward` replays in reverse.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    flops: u64,
    swept: bool,
    corrupt_matmul: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register an input value (parameter, data or constant table).
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.slots.push(Slot { value, grad: None });
        VarId(self.slots.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.slots[id.0].value
    }

    /// Gradient buffer, if this var was reached by `backward`.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.slots[id.0].grad.as_deref()
    }

    /// Forward FLOPs recorded so far (multiply-add counted as two).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Make `matmul`'s backward produce wrong values. Test-harness hook:
    /// lets the gradient checker prove it can detect a broken VJP.
    pub fn corrupt_matmul_backward(&mut self) {
        self.corrupt_matmul = true;
    }

    fn push(&mut self, value: Tensor) -> VarId {
        self.slots.push(Slot { value, grad: None });
        VarId(self.slots.len() - 1)
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.slots[a.0].value, &self.slots[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_raw(ta.data(), tb.data(), m, k, n, &mut out);
        let out = self.push(Tensor::matrix(m, n, out)?);
        self.flops += 2 * (m * k * n) as u64;
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.slots[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("transpose: rank-2 required, got {:?}", ta.shape())));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; rows * cols];
        transpose_raw(ta.data(), rows, cols, &mut out);
        let out = self.push(Tensor::matrix(cols, rows, out)?);
        self.ops.push(Op::Transpose { a, out, rows, cols });
        Ok(out)
    }

    fn binary_elementwise(
        &mut self,
        a: VarId,
        b: VarId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(VarId, usize)> {
        let (ta, tb) = (&self.slots[a.0].value, &self.slots[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let n = data.len();
        let shape = ta.shape().to_vec();
        let out = self.push(Tensor::new(shape, data)?);
        self.flops += n as u64;
        Ok((out, n))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (out, _) = self.binary_elementwise(a, b, "add", |x, y| x + y)?;
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (out, _) = self.binary_elementwise(a, b, "sub", |x, y| x - y)?;
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (out, _) = self.binary_elementwise(a, b, "mul", |x, y| x * y)?;
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let ta = &self.slots[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Scale { a, c, out });
        Ok(out)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let ta = &self.slots[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x + c).collect();
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::AddScalar { a, out });
        Ok(out)
    }

    /// Broadcast-add a length-`cols` vector to every row of a matrix.
    pub fn add_row_vec(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (tx, tv) = (&self.slots[x.0].value, &self.slots[v.0].value);
        if tx.rank() != 2 || tv.rank() != 1 || tv.numel() != tx.cols() {
            return Err(Error::Shape(format!(
                "add_row_vec: {:?} + {:?}",
                tx.shape(),
                tv.shape()
            )));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let vd = tv.data();
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[i % cols])
            .collect();
        self.flops += data.len() as u64;
        let out = self.push(Tensor::matrix(rows, cols, data)?);
        self.ops.push(Op::AddRowVec { x, v, out, rows, cols });
        Ok(out)
    }

    /// Row-wise softmax with max subtraction (safe for huge magnitudes).
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.slots[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("softmax_rows: rank-2 required, got {:?}", ta.shape())));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - mx).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        self.flops += 5 * (rows * cols) as u64;
        let out = self.push(Tensor::matrix(rows, cols, data)?);
        self.ops.push(Op::SoftmaxRows { a, out, rows, cols });
        Ok(out)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.slots[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = ta.shape().to_vec();
        self.flops += 10 * data.len() as u64;
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Gelu { a, out });
        Ok(out)
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)`. `rate == 0` is the identity and consumes no randomness.
    pub fn dropout(&mut self, a: VarId, rate: f64, rng: &mut ChaCha8Rng) -> Result<VarId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let ta = &self.slots[a.0].value;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::Dropout { a, out, mask });
        Ok(out)
    }

    /// Per-feature batch norm over the row (token) axis of a `rows×features`
    /// matrix. Train mode standardizes with biased batch statistics and, when
    /// a running buffer is supplied, updates it by EMA (momentum
    /// [`BN_MOMENTUM`]); eval mode applies the frozen affine map.
    pub fn batch_norm_tokens(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mode: BnMode,
    ) -> Result<VarId> {
        let tx = &self.slots[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::Shape(format!("batch_norm: rank-2 required, got {:?}", tx.shape())));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let (tg, tb) = (&self.slots[gamma.0].value, &self.slots[beta.0].value);
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::Shape(format!(
                "batch_norm: feature dim {cols} vs gamma {} / beta {}",
                tg.numel(),
                tb.numel()
            )));
        }

        let xd = tx.data();
        let (mean, var, train) = match &mode {
            BnMode::Train { .. } => {
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mean[c] += xd[r * cols + c];
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let d = xd[r * cols + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= rows as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval { running } => {
                if running.mean.len() != cols {
                    return Err(Error::Shape(format!(
                        "batch_norm: running stats have {} features, input has {cols}",
                        running.mean.len()
                    )));
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };

        if let BnMode::Train { running: Some(run) } = mode {
            if run.mean.len() != cols {
                return Err(Error::Shape(format!(
                    "batch_norm: running stats have {} features, input has {cols}",
                    run.mean.len()
                )));
            }
            for c in 0..cols {
                run.mean[c] = (1.0 - BN_MOMENTUM) * run.mean[c] + BN_MOMENTUM * mean[c];
                run.var[c] = (1.0 - BN_MOMENTUM) * run.var[c] + BN_MOMENTUM * var[c];
            }
        }

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; rows * cols];
        let mut data = vec![0.0; rows * cols];
        let (gd, bd) = (tg.data(), tb.data());
        for r in 0..rows {
            for c in 0..cols {
                let h = (xd[r * cols + c] - mean[c]) * inv_std[c];
                xhat[r * cols + c] = h;
                data[r * cols + c] = gd[c] * h + bd[c];
            }
        }
        self.flops += 8 * (rows * cols) as u64;
        let out = self.push(Tensor::matrix(rows, cols, data)?);
        self.ops.push(Op::BatchNorm { x, gamma, beta, out, rows, cols, xhat, inv_std, train });
        Ok(out)
    }

    /// Patch tokenization of a 1-D series (see [`crate::tokenizer`]).
    pub fn tokenize(&mut self, y: VarId, p: usize, s: usize) -> Result<VarId> {
        let ty = &self.slots[y.0].value;
        if ty.rank() != 1 {
            return Err(Error::Shape(format!("tokenize: rank-1 required, got {:?}", ty.shape())));
        }
        let d = ty.numel();
        let tokens = crate::tokenizer::tokenize_values(ty.data(), p, s)?;
        let out = self.push(tokens);
        self.ops.push(Op::Tokenize { y, out, p, s, d });
        Ok(out)
    }

    /// Copy a contiguous row range out of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: VarId, start: usize, rows: usize) -> Result<VarId> {
        let ta = &self.slots[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("slice_rows: rank-2 required, got {:?}", ta.shape())));
        }
        let (total, cols) = (ta.rows(), ta.cols());
        if rows == 0 || start + rows > total {
            return Err(Error::Shape(format!(
                "slice_rows: rows {start}..{} out of a {total}-row matrix",
                start + rows
            )));
        }
        let data = ta.data()[start * cols..(start + rows) * cols].to_vec();
        let out = self.push(Tensor::matrix(rows, cols, data)?);
        self.ops.push(Op::SliceRows { a, out, start, rows, cols });
        Ok(out)
    }

    /// Flatten each input row-major and concatenate into one vector.
    pub fn concat_flat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_flat: no inputs".into()));
        }
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.slots[p.0].value;
            sizes.push(t.numel());
            data.extend_from_slice(t.data());
        }
        let out = self.push(Tensor::vector(data));
        self.ops.push(Op::ConcatFlat { parts: parts.to_vec(), out, sizes });
        Ok(out)
    }

    /// Concatenate rank-2 inputs with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let rows = self.slots[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.slots[p.0].value;
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: expected {rows} rows, got {:?}",
                    t.shape()
                )));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.slots[p.0].value;
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = self.push(Tensor::matrix(rows, total, data)?);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out, rows, widths });
        Ok(out)
    }

    pub fn reshape(&mut self, a: VarId, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        let t = self.slots[a.0].value.clone().reshaped(shape)?;
        let out = self.push(t);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    fn check_scalar_var(&self, s: VarId, name: &str) -> Result<()> {
        if self.slots[s.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "{name}: scalar operand must have one element, got {:?}",
                self.slots[s.0].value.shape()
            )));
        }
        Ok(())
    }

    /// Broadcast-multiply by a length-1 variable.
    pub fn mul_var_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        self.check_scalar_var(s, "mul_var_scalar")?;
        let sv = self.slots[s.0].value.data()[0];
        let ta = &self.slots[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x * sv).collect();
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::MulVarScalar { a, s, out });
        Ok(out)
    }

    /// Broadcast-add a length-1 variable.
    pub fn add_var_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        self.var_scalar_shift(a, s, 1.0, "add_var_scalar")
    }

    /// Broadcast-subtract a length-1 variable.
    pub fn sub_var_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        self.var_scalar_shift(a, s, -1.0, "sub_var_scalar")
    }

    fn var_scalar_shift(&mut self, a: VarId, s: VarId, sign: f64, name: &str) -> Result<VarId> {
        self.check_scalar_var(s, name)?;
        let sv = self.slots[s.0].value.data()[0] * sign;
        let ta = &self.slots[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x + sv).collect();
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        let out = self.push(Tensor::new(shape, data)?);
        self.ops.push(Op::AddVarScalar { a, s, out, sign });
        Ok(out)
    }

    /// Reciprocal of a length-1 variable.
    pub fn recip_scalar(&mut self, s: VarId) -> Result<VarId> {
        self.check_scalar_var(s, "recip_scalar")?;
        let sv = self.slots[s.0].value.data()[0];
        self.flops += 1;
        let out = self.push(Tensor::vector(vec![1.0 / sv]));
        self.ops.push(Op::RecipScalar { s, out });
        Ok(out)
    }

    /// Sum of all elements, as a length-1 tensor.
    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.slots[a.0].value;
        let s: f64 = ta.data().iter().sum();
        self.flops += ta.numel() as u64;
        let out = self.push(Tensor::vector(vec![s]));
        self.ops.push(Op::SumAll { a, out });
        Ok(out)
    }

    // ---- backward --------------------------------------------------------

    fn accumulate(&mut self, id: VarId, delta: &[f64]) {
        let slot = &mut self.slots[id.0];
        let g = slot
            .grad
            .get_or_insert_with(|| vec![0.0; slot.value.numel()]);
        for (acc, d) in g.iter_mut().zip(delta) {
            *acc += d;
        }
    }

    /// Reverse sweep from a scalar `root`. Populates `grad` on every var
    /// that influences it; replay order is the reverse of recording order.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.swept {
            return Err(Error::Config("backward already ran on this tape".into()));
        }
        if self.slots[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.slots[root.0].value.shape()
            )));
        }
        self.swept = true;
        self.slots[root.0].grad = Some(vec![1.0]);

        for oi in (0..self.ops.len()).rev() {
            // Take the op out to appease the borrow checker; put it back after.
            let op = std::mem::replace(&mut self.ops[oi], Op::SumAll { a: VarId(0), out: VarId(0) });
            self.backward_op(&op);
            self.ops[oi] = op;
        }
        Ok(())
    }

    fn out_grad(&self, out: VarId) -> Option<Vec<f64>> {
        self.slots[out.0].grad.clone()
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (m, k, n) = (*m, *k, *n);
                let av = self.slots[a.0].value.data().to_vec();
                let bv = self.slots[b.0].value.data().to_vec();
                // dA = g · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                if self.corrupt_matmul {
                    for v in &mut da {
                        *v *= 1.1;
                    }
                }
                // dB = Aᵀ · g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av_ip = av[i * k + p];
                        if av_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av_ip * g[i * n + j];
                        }
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Transpose { a, out, rows, cols } => {
                let Some(g) = self.out_grad(*out) else { return };
                let mut da = vec![0.0; rows * cols];
                transpose_raw(&g, *cols, *rows, &mut da);
                self.accumulate(*a, &da);
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g);
                self.accumulate(*b, &g);
            }
            Op::Sub { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let av = self.slots[a.0].value.data().to_vec();
                let bv = self.slots[b.0].value.data().to_vec();
                let da: Vec<f64> = g.iter().zip(&bv).map(|(&gv, &x)| gv * x).collect();
                let db: Vec<f64> = g.iter().zip(&av).map(|(&gv, &x)| gv * x).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { a, c, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let da: Vec<f64> = g.iter().map(|&v| v * c).collect();
                self.accumulate(*a, &da);
            }
            Op::AddScalar { a, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g);
            }
            Op::AddRowVec { x, v, out, rows, cols } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*x, &g);
                let mut dv = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dv[c] += g[r * cols + c];
                    }
                }
                self.accumulate(*v, &dv);
            }
            Op::SoftmaxRows { a, out, rows, cols } => {
                let Some(g) = self.out_grad(*out) else { return };
                let y = self.slots[out.0].value.data().to_vec();
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for c in 0..*cols {
                        da[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Gelu { a, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let x = self.slots[a.0].value.data().to_vec();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Dropout { a, out, mask } => {
                let Some(g) = self.out_grad(*out) else { return };
                let da: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(*a, &da);
            }
            Op::BatchNorm { x, gamma, beta, out, rows, cols, xhat, inv_std, train } => {
                let Some(g) = self.out_grad(*out) else { return };
                let (rows, cols) = (*rows, *cols);
                let gd = self.slots[gamma.0].value.data().to_vec();

                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dgamma[c] += g[r * cols + c] * xhat[r * cols + c];
                        dbeta[c] += g[r * cols + c];
                    }
                }

                let mut dx = vec![0.0; rows * cols];
                if *train {
                    // Batch statistics depend on x: full BN backward.
                    let mut gsum = vec![0.0; cols];
                    let mut gxsum = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gsum[c] += g[r * cols + c];
                            gxsum[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    let rn = rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let gc = g[r * cols + c];
                            dx[r * cols + c] = gd[c] * inv_std[c]
                                * (gc - gsum[c] / rn - xhat[r * cols + c] * gxsum[c] / rn);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[r * cols + c] * gd[c] * inv_std[c];
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::Tokenize { y, out, p, s, d } => {
                let Some(g) = self.out_grad(*out) else { return };
                let dy = crate::tokenizer::tokenize_backward(&g, *p, *s, *d);
                self.accumulate(*y, &dy);
            }
            Op::SliceRows { a, out, start, rows, cols } => {
                let Some(g) = self.out_grad(*out) else { return };
                let mut da = vec![0.0; self.slots[a.0].value.numel()];
                da[start * cols..(start + rows) * cols].copy_from_slice(&g);
                self.accumulate(*a, &da);
            }
            Op::ConcatFlat { parts, out, sizes } => {
                let Some(g) = self.out_grad(*out) else { return };
                let mut off = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    self.accumulate(p, &g[off..off + sz]);
                    off += sz;
                }
            }
            Op::ConcatCols { parts, out, rows, widths } => {
                let Some(g) = self.out_grad(*out) else { return };
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..*rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(p, &dp);
                    off += w;
                }
            }
            Op::Reshape { a, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g);
            }
            Op::SumAll { a, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let da = vec![g[0]; self.slots[a.0].value.numel()];
                self.accumulate(*a, &da);
            }
            Op::MulVarScalar { a, s, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let sv = self.slots[s.0].value.data()[0];
                let av = self.slots[a.0].value.data().to_vec();
                let da: Vec<f64> = g.iter().map(|&gv| gv * sv).collect();
                let ds: f64 = g.iter().zip(&av).map(|(&gv, &x)| gv * x).sum();
                self.accumulate(*a, &da);
                self.accumulate(*s, &[ds]);
            }
            Op::AddVarScalar { a, s, out, sign } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g);
                let ds: f64 = g.iter().sum::<f64>() * sign;
                self.accumulate(*s, &[ds]);
            }
            Op::RecipScalar { s, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let sv = self.slots[s.0].value.data()[0];
                self.accumulate(*s, &[-g[0] / (sv * sv)]);
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let phi_small = INV_SQRT_2PI * (-0.5 * x * x).exp();
    phi_big + x * phi_small
}

// ---- finite differences ----------------------------------------------------

/// Compare analytic gradients against central finite differences for the
/// scalar function defined by `build` (which records the computation of a
/// scalar root from the bound parameter leaves, in a fixed deterministic way).
///
/// Returns the max over all parameter scalars of
/// `|analytic − central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if !h.is_finite() || !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("finite_diff_check: h must lie in [1e-7, 1e-4], got {h}")));
    }

    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let root = build(&mut tape, &binding)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = binding
        .iter()
        .zip(params.iter())
        .map(|(&id, e)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; e.tensor.numel()])
        })
        .collect();

    let eval = |store: &ParamStore, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let root = build(&mut tape, &binding)?;
        Ok(tape.value(root).data()[0])
    };

    let mut work = params.clone();
    let mut max_rel = 0.0_f64;
    for ei in 0..params.len() {
        for k in 0..params.entry(crate::params::ParamId(ei)).tensor.numel() {
            let orig = {
                let e = work.entry(crate::params::ParamId(ei));
                e.tensor.data()[k]
            };
            work.entry_mut(crate::params::ParamId(ei)).tensor.data_mut()[k] = orig + h;
            let fp = eval(&work, &mut build)?;
            work.entry_mut(crate::params::ParamId(ei)).tensor.data_mut()[k] = orig - h;
            let fm = eval(&work, &mut build)?;
            work.entry_mut(crate::params::ParamId(ei)).tensor.data_mut()[k] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "finite_diff_check: non-finite objective at perturbed parameter {} index {k}",
                    params.entry(crate::params::ParamId(ei)).name
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ei][k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
