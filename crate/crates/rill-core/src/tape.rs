//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it
//! once in reverse and accumulates gradients for every recorded node.  The
//! op set is the smallest one that covers multi-head MLPs and logic-loss
//! expressions: scalar arithmetic, `exp`/`ln`/`log2`, `min`/`max`/`relu`
//! with active-branch subgradients, hard indicator gates, n-ary
//! sum/mean/product, dense matmul, a row-broadcast bias add, row-wise
//! softmax and mean cross-entropy, and matrix-entry extraction.
//!
//! Scalars captured by [`Tape::constant`] carry no node and receive no
//! gradient.  Ties in `min`/`max` take the left argument; `relu` uses
//! subgradient 0 at the kink; indicator gates pass gradient only through
//! their payload on the active branch, never through the condition.
//!
//! Nodes are appended in topological order and iterated in fixed order both
//! ways, so identical inputs replay to bit-identical values and gradients.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major `f64` matrix, shared between tape ops and plain
/// (non-recording) forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = k * other.cols;
                let crow = i * other.cols;
                for j in 0..other.cols {
                    out.data[crow + j] += a * other.data[orow + j];
                }
            }
        }
        out
    }

    /// Adds a `1 x cols` bias row to every row.
    pub fn add_row_bias(&self, bias: &Matrix) -> Matrix {
        assert_eq!(bias.rows, 1, "bias must be a single row");
        assert_eq!(bias.cols, self.cols, "bias width must match");
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += bias.data[c];
            }
        }
        out
    }

    pub fn relu(&self) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let mut m = f64::NEG_INFINITY;
            for &v in row.iter() {
                if v > m {
                    m = v;
                }
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }
}

/// Errors raised while recording.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapeError {
    /// Logarithm of a non-positive value.
    #[error("logarithm of non-positive value {0}")]
    LogDomain(f64),
    /// Division by zero.
    #[error("division by zero")]
    DivByZero,
    /// An operation produced a NaN or infinity.
    #[error("non-finite result in `{op}`")]
    NonFinite { op: &'static str },
    /// Operand shapes do not fit the operation.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },
}

/// A recorded scalar: its forward value plus, unless it is a constant, the
/// tape node that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Value {
    val: f64,
    node: Option<usize>,
}

impl Value {
    pub fn value(&self) -> f64 {
        self.val
    }

    /// True when no gradient can flow into this value.
    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }
}

/// Handle to a matrix node on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MatHandle {
    id: usize,
    rows: usize,
    cols: usize,
}

impl MatHandle {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Indicator gate condition: strictly greater, or less-or-equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Gt,
    Le,
}

enum Payload {
    S,
    M(Matrix),
}

enum Op {
    Leaf,
    /// One differentiable input with a baked local partial.
    Unary { a: usize, d: f64 },
    /// Up to two differentiable inputs with baked local partials; `None`
    /// marks a constant operand.
    Binary {
        a: Option<usize>,
        b: Option<usize>,
        da: f64,
        db: f64,
    },
    /// Differentiable inputs of an n-ary reduction with baked partials.
    Nary { inputs: Vec<usize>, partials: Vec<f64> },
    MatMul { a: usize, b: usize },
    AddRowBias { a: usize, b: usize },
    ReluMat { a: usize },
    SoftmaxRows { a: usize },
    /// Mean of `-ln p[r, c]` over the listed targets.
    CrossEntropyMean {
        probs: usize,
        targets: Vec<(usize, usize)>,
    },
    Entry { m: usize, r: usize, c: usize },
}

struct Node {
    op: Op,
    payload: Payload,
}

/// Recording tape.  One tape per forward pass; drop it after `backward`.
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any recorded `min`/`max`/`relu`/gate from its
    /// switching point; `INFINITY` when the tape has no kinked op.
    /// Finite-difference checks use this to stay away from subgradient
    /// boundaries.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn note_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    fn push_scalar(&mut self, val: f64, op: Op) -> Value {
        self.nodes.push(Node {
            op,
            payload: Payload::S,
        });
        Value {
            val,
            node: Some(self.nodes.len() - 1),
        }
    }

    fn push_matrix(&mut self, m: Matrix, op: Op) -> MatHandle {
        let (rows, cols) = (m.rows(), m.cols());
        self.nodes.push(Node {
            op,
            payload: Payload::M(m),
        });
        MatHandle {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    /// A constant scalar; no node, no gradient.
    ///
    /// # Panics
    ///
    /// Panics when `v` is NaN or infinite.
    pub fn constant(v: f64) -> Value {
        assert!(v.is_finite(), "constants must be finite, got {v}");
        Value { val: v, node: None }
    }

    /// A differentiable scalar input.
    ///
    /// # Panics
    ///
    /// Panics when `v` is NaN or infinite.
    pub fn leaf(&mut self, v: f64) -> Value {
        assert!(v.is_finite(), "leaf values must be finite, got {v}");
        self.push_scalar(v, Op::Leaf)
    }

    /// A differentiable matrix input.
    pub fn matrix_leaf(&mut self, m: Matrix) -> MatHandle {
        debug_assert!(m.data().iter().all(|v| v.is_finite()));
        self.push_matrix(m, Op::Leaf)
    }

    fn binary(&mut self, val: f64, a: Value, b: Value, da: f64, db: f64) -> Value {
        if a.node.is_none() && b.node.is_none() {
            return Value { val, node: None };
        }
        self.push_scalar(
            val,
            Op::Binary {
                a: a.node,
                b: b.node,
                da,
                db,
            },
        )
    }

    fn unary(&mut self, val: f64, a: Value, d: f64) -> Value {
        match a.node {
            Some(id) => self.push_scalar(val, Op::Unary { a: id, d }),
            None => Value { val, node: None },
        }
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        self.binary(a.val + b.val, a, b, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        self.binary(a.val - b.val, a, b, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        self.binary(a.val * b.val, a, b, b.val, a.val)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value, TapeError> {
        if b.val == 0.0 {
            return Err(TapeError::DivByZero);
        }
        let val = a.val / b.val;
        Ok(self.binary(val, a, b, 1.0 / b.val, -a.val / (b.val * b.val)))
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.unary(-a.val, a, -1.0)
    }

    pub fn ln(&mut self, a: Value) -> Result<Value, TapeError> {
        if a.val <= 0.0 {
            return Err(TapeError::LogDomain(a.val));
        }
        Ok(self.unary(libm::log(a.val), a, 1.0 / a.val))
    }

    pub fn log2(&mut self, a: Value) -> Result<Value, TapeError> {
        if a.val <= 0.0 {
            return Err(TapeError::LogDomain(a.val));
        }
        Ok(self.unary(libm::log2(a.val), a, 1.0 / (a.val * core::f64::consts::LN_2)))
    }

    pub fn exp(&mut self, a: Value) -> Result<Value, TapeError> {
        let val = libm::exp(a.val);
        if !val.is_finite() {
            return Err(TapeError::NonFinite { op: "exp" });
        }
        Ok(self.unary(val, a, val))
    }

    /// Active-branch subgradient; exact ties take the left argument.
    pub fn min(&mut self, a: Value, b: Value) -> Value {
        self.note_kink(libm::fabs(a.val - b.val));
        if a.val <= b.val {
            self.binary(a.val, a, b, 1.0, 0.0)
        } else {
            self.binary(b.val, a, b, 0.0, 1.0)
        }
    }

    /// Active-branch subgradient; exact ties take the left argument.
    pub fn max(&mut self, a: Value, b: Value) -> Value {
        self.note_kink(libm::fabs(a.val - b.val));
        if a.val >= b.val {
            self.binary(a.val, a, b, 1.0, 0.0)
        } else {
            self.binary(b.val, a, b, 0.0, 1.0)
        }
    }

    /// `max(a, 0)` with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Value) -> Value {
        self.note_kink(libm::fabs(a.val));
        if a.val > 0.0 {
            self.unary(a.val, a, 1.0)
        } else {
            self.unary(0.0, a, 0.0)
        }
    }

    /// Hard indicator gate: returns `payload` when `cond ? threshold` holds
    /// for the chosen mode and the constant 0 otherwise.  The condition
    /// itself never receives gradient; on the active branch the payload
    /// passes through with derivative 1.
    pub fn gate(&mut self, cond: f64, threshold: f64, mode: GateMode, payload: Value) -> Value {
        self.note_kink(libm::fabs(cond - threshold));
        let open = match mode {
            GateMode::Gt => cond > threshold,
            GateMode::Le => cond <= threshold,
        };
        if open {
            payload
        } else {
            Value { val: 0.0, node: None }
        }
    }

    fn nary(&mut self, val: f64, items: &[Value], partial_of: impl Fn(usize) -> f64) -> Value {
        let mut inputs = Vec::new();
        let mut partials = Vec::new();
        for (i, item) in items.iter().enumerate() {
            if let Some(id) = item.node {
                inputs.push(id);
                partials.push(partial_of(i));
            }
        }
        if inputs.is_empty() {
            return Value { val, node: None };
        }
        self.push_scalar(val, Op::Nary { inputs, partials })
    }

    pub fn sum(&mut self, items: &[Value]) -> Value {
        let val = items.iter().map(|v| v.val).sum();
        self.nary(val, items, |_| 1.0)
    }

    /// # Panics
    ///
    /// Panics on an empty slice.
    pub fn mean(&mut self, items: &[Value]) -> Value {
        assert!(!items.is_empty(), "mean of an empty slice");
        let n = items.len() as f64;
        let val = items.iter().map(|v| v.val).sum::<f64>() / n;
        self.nary(val, items, |_| 1.0 / n)
    }

    /// Product of all items; the partial for each factor is the exact
    /// leave-one-out product, so zeros are handled without division.
    pub fn product(&mut self, items: &[Value]) -> Value {
        let n = items.len();
        let mut prefix = vec![1.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] * items[i].val;
        }
        let mut suffix = vec![1.0; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] * items[i].val;
        }
        self.nary(prefix[n], items, |i| prefix[i] * suffix[i + 1])
    }

    pub fn matmul(&mut self, a: MatHandle, b: MatHandle) -> Result<MatHandle, TapeError> {
        if a.cols != b.rows {
            return Err(TapeError::Shape {
                op: "matmul",
                detail: alloc::format!("{}x{} @ {}x{}", a.rows, a.cols, b.rows, b.cols),
            });
        }
        let m = self.matrix(a).matmul(self.matrix(b));
        Ok(self.push_matrix(m, Op::MatMul { a: a.id, b: b.id }))
    }

    pub fn add_row_bias(&mut self, a: MatHandle, bias: MatHandle) -> Result<MatHandle, TapeError> {
        if bias.rows != 1 || bias.cols != a.cols {
            return Err(TapeError::Shape {
                op: "add_row_bias",
                detail: alloc::format!("{}x{} + {}x{}", a.rows, a.cols, bias.rows, bias.cols),
            });
        }
        let m = self.matrix(a).add_row_bias(self.matrix(bias));
        Ok(self.push_matrix(m, Op::AddRowBias { a: a.id, b: bias.id }))
    }

    pub fn relu_mat(&mut self, a: MatHandle) -> MatHandle {
        let input = self.matrix(a);
        let mut margin = f64::INFINITY;
        for &v in input.data() {
            let m = libm::fabs(v);
            if m < margin {
                margin = m;
            }
        }
        let m = input.relu();
        self.note_kink(margin);
        self.push_matrix(m, Op::ReluMat { a: a.id })
    }

    pub fn softmax_rows(&mut self, a: MatHandle) -> MatHandle {
        let m = self.matrix(a).softmax_rows();
        self.push_matrix(m, Op::SoftmaxRows { a: a.id })
    }

    /// Mean of `-ln p[row, class]` over `targets`.
    ///
    /// # Panics
    ///
    /// Panics when `targets` is empty or indexes out of bounds.
    pub fn cross_entropy_mean(
        &mut self,
        probs: MatHandle,
        targets: &[(usize, usize)],
    ) -> Result<Value, TapeError> {
        assert!(!targets.is_empty(), "cross-entropy needs at least one target");
        let m = self.matrix(probs);
        let mut total = 0.0;
        for &(r, c) in targets {
            let p = m.get(r, c);
            if p <= 0.0 {
                return Err(TapeError::LogDomain(p));
            }
            total -= libm::log(p);
        }
        let val = total / targets.len() as f64;
        Ok(self.push_scalar(
            val,
            Op::CrossEntropyMean {
                probs: probs.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Extracts one matrix entry as a differentiable scalar.
    ///
    /// # Panics
    ///
    /// Panics when the indices are out of bounds.
    pub fn entry(&mut self, m: MatHandle, r: usize, c: usize) -> Value {
        assert!(r < m.rows && c < m.cols, "entry ({r},{c}) outside {}x{}", m.rows, m.cols);
        let val = self.matrix(m).get(r, c);
        self.push_scalar(val, Op::Entry { m: m.id, r, c })
    }

    /// Borrows the forward value of a matrix node.
    pub fn matrix(&self, h: MatHandle) -> &Matrix {
        match &self.nodes[h.id].payload {
            Payload::M(m) => m,
            Payload::S => unreachable!("matrix handle points at a scalar node"),
        }
    }

    /// Reverse accumulation from `root`; every node is visited exactly once.
    /// A constant root yields all-zero gradients.
    pub fn backward(&self, root: Value) -> Gradients {
        let mut grads: Vec<Grad> = self
            .nodes
            .iter()
            .map(|n| match &n.payload {
                Payload::S => Grad::S(0.0),
                Payload::M(m) => Grad::M(vec![0.0; m.data().len()]),
            })
            .collect();
        let Some(root_id) = root.node else {
            return Gradients { grads };
        };
        match &mut grads[root_id] {
            Grad::S(g) => *g = 1.0,
            Grad::M(_) => unreachable!("scalar Value points at a matrix node"),
        }

        for id in (0..=root_id).rev() {
            // Take the slot out so inputs can be scattered into, then put it
            // back: callers read leaf gradients from the same storage.
            let out = core::mem::replace(&mut grads[id], Grad::S(0.0));
            match (&self.nodes[id].op, &out) {
                (Op::Leaf, _) => {}
                (Op::Unary { a, d }, Grad::S(g)) => {
                    grads[*a].add_scalar(g * d);
                }
                (Op::Binary { a, b, da, db }, Grad::S(g)) => {
                    if let Some(a) = a {
                        grads[*a].add_scalar(g * da);
                    }
                    if let Some(b) = b {
                        grads[*b].add_scalar(g * db);
                    }
                }
                (Op::Nary { inputs, partials }, Grad::S(g)) => {
                    for (a, d) in inputs.iter().zip(partials.iter()) {
                        grads[*a].add_scalar(g * d);
                    }
                }
                (Op::Entry { m, r, c }, Grad::S(g)) => {
                    let cols = match &self.nodes[*m].payload {
                        Payload::M(mat) => mat.cols(),
                        Payload::S => unreachable!(),
                    };
                    grads[*m].slice_mut()[r * cols + c] += g;
                }
                (Op::CrossEntropyMean { probs, targets }, Grad::S(g)) => {
                    let (pm, cols) = match &self.nodes[*probs].payload {
                        Payload::M(m) => (m, m.cols()),
                        Payload::S => unreachable!(),
                    };
                    let scale = g / targets.len() as f64;
                    let slice = grads[*probs].slice_mut();
                    for &(r, c) in targets {
                        slice[r * cols + c] -= scale / pm.get(r, c);
                    }
                }
                (Op::MatMul { a, b }, Grad::M(g)) => {
                    let (am, bm) = match (&self.nodes[*a].payload, &self.nodes[*b].payload) {
                        (Payload::M(am), Payload::M(bm)) => (am, bm),
                        _ => unreachable!(),
                    };
                    let (n, m, k) = (am.rows(), am.cols(), bm.cols());
                    {
                        let da = grads[*a].slice_mut();
                        for i in 0..n {
                            for j in 0..k {
                                let gv = g[i * k + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for t in 0..m {
                                    da[i * m + t] += gv * bm.get(t, j);
                                }
                            }
                        }
                    }
                    {
                        let db = grads[*b].slice_mut();
                        for i in 0..n {
                            for t in 0..m {
                                let av = am.get(i, t);
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..k {
                                    db[t * k + j] += av * g[i * k + j];
                                }
                            }
                        }
                    }
                }
                (Op::AddRowBias { a, b }, Grad::M(g)) => {
                    let cols = match &self.nodes[*a].payload {
                        Payload::M(m) => m.cols(),
                        Payload::S => unreachable!(),
                    };
                    {
                        let da = grads[*a].slice_mut();
                        for (dst, src) in da.iter_mut().zip(g.iter()) {
                            *dst += src;
                        }
                    }
                    {
                        let db = grads[*b].slice_mut();
                        for (i, src) in g.iter().enumerate() {
                            db[i % cols] += src;
                        }
                    }
                }
                (Op::ReluMat { a }, Grad::M(g)) => {
                    let am = match &self.nodes[*a].payload {
                        Payload::M(m) => m,
                        Payload::S => unreachable!(),
                    };
                    let da = grads[*a].slice_mut();
                    for (i, src) in g.iter().enumerate() {
                        if am.data()[i] > 0.0 {
                            da[i] += src;
                        }
                    }
                }
                (Op::SoftmaxRows { a }, Grad::M(g)) => {
                    let ym = match &self.nodes[id].payload {
                        Payload::M(m) => m,
                        Payload::S => unreachable!(),
                    };
                    let (rows, cols) = (ym.rows(), ym.cols());
                    let da = grads[*a].slice_mut();
                    for r in 0..rows {
                        let y = ym.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += gr[j] * y[j];
                        }
                        for j in 0..cols {
                            da[r * cols + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                (op, _) => {
                    let _ = op;
                    unreachable!("gradient shape does not match op");
                }
            }
            grads[id] = out;
        }
        Gradients { grads }
    }
}

enum Grad {
    S(f64),
    M(Vec<f64>),
}

impl Grad {
    fn add_scalar(&mut self, v: f64) {
        match self {
            Grad::S(g) => *g += v,
            Grad::M(_) => unreachable!("scalar gradient into a matrix slot"),
        }
    }

    fn slice_mut(&mut self) -> &mut [f64] {
        match self {
            Grad::M(g) => g,
            Grad::S(_) => unreachable!("matrix gradient into a scalar slot"),
        }
    }
}

/// Gradients of one `backward` pass, indexed by the handles that produced
/// the forward values.
pub struct Gradients {
    grads: Vec<Grad>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; 0 for constants.
    pub fn wrt(&self, v: Value) -> f64 {
        match v.node {
            Some(id) => match &self.grads[id] {
                Grad::S(g) => *g,
                Grad::M(_) => unreachable!(),
            },
            None => 0.0,
        }
    }

    /// Flat row-major gradient of the root with respect to a matrix leaf.
    pub fn wrt_matrix(&self, h: MatHandle) -> &[f64] {
        match &self.grads[h.id] {
            Grad::M(g) => g,
            Grad::S(_) => unreachable!(),
        }
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` constructs a scalar expression from leaves placed at `point`.
/// When the built tape reports a kink within `10 h` of a switching point,
/// the whole point is nudged deterministically and rebuilt (up to 16
/// times) so the comparison happens on a smooth neighbourhood.  Returns
/// `max_i |ad_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn finite_difference_check<F>(build: &F, point: &[f64], h: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value, TapeError>,
{
    let mut at: Vec<f64> = point.to_vec();
    let mut attempt = 0usize;
    let (tape, leaves, root) = loop {
        let mut tape = Tape::new();
        let leaves: Vec<Value> = at.iter().map(|&v| tape.leaf(v)).collect();
        let root = build(&mut tape, &leaves)?;
        if tape.kink_margin() > 10.0 * h || attempt >= 16 {
            break (tape, leaves, root);
        }
        attempt += 1;
        // Coordinate-dependent offsets so that ties between leaves move apart.
        for (i, v) in at.iter_mut().enumerate() {
            *v += 12.0 * h * (1.0 + i as f64);
        }
    };

    let grads = tape.backward(root);
    let eval = |pt: &[f64]| -> Result<f64, TapeError> {
        let mut t = Tape::new();
        let leaves: Vec<Value> = pt.iter().map(|&v| t.leaf(v)).collect();
        Ok(build(&mut t, &leaves)?.value())
    };

    let mut worst = 0.0f64;
    let mut probe = at.clone();
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let up = eval(&probe)?;
        probe[i] = at[i] - h;
        let down = eval(&probe)?;
        probe[i] = at[i];
        let fd = (up - down) / (2.0 * h);
        let ad = grads.wrt(leaves[i]);
        let err = libm::fabs(ad - fd) / (libm::fabs(fd) + 1e-12);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(0.3);
        let y = t.leaf(0.6);
        let z = t.mul(x, y);
        assert!((z.value() - 0.18).abs() < 1e-15);
        let g = t.backward(z);
        assert_eq!(g.wrt(x), 0.6);
        assert_eq!(g.wrt(y), 0.3);
    }

    #[test]
    fn ln_at_one() {
        let mut t = Tape::new();
        let x = t.leaf(1.0);
        let z = t.ln(x).unwrap();
        assert_eq!(z.value(), 0.0);
        let g = t.backward(z);
        assert_eq!(g.wrt(x), 1.0);
    }

    #[test]
    fn min_takes_active_branch() {
        let mut t = Tape::new();
        let a = t.leaf(0.2);
        let b = t.leaf(0.9);
        let z = t.min(a, b);
        assert_eq!(z.value(), 0.2);
        let g = t.backward(z);
        assert_eq!(g.wrt(a), 1.0);
        assert_eq!(g.wrt(b), 0.0);
    }

    #[test]
    fn min_tie_takes_left() {
        let mut t = Tape::new();
        let a = t.leaf(0.5);
        let b = t.leaf(0.5);
        let z = t.min(a, b);
        let g = t.backward(z);
        assert_eq!(g.wrt(a), 1.0);
        assert_eq!(g.wrt(b), 0.0);
    }

    // d/dx of 1 - x + x*y at (0.3, 0.6) is y - 1 = -0.4.
    #[test]
    fn hand_differentiated_implication() {
        let mut t = Tape::new();
        let x = t.leaf(0.3);
        let y = t.leaf(0.6);
        let one = Tape::constant(1.0);
        let xy = t.mul(x, y);
        let a = t.sub(one, x);
        let z = t.add(a, xy);
        assert!((z.value() - 0.88).abs() < 1e-15);
        let g = t.backward(z);
        assert!((g.wrt(x) + 0.4).abs() < 1e-15);
        assert!((g.wrt(y) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(2.0);
        let c = Tape::constant(5.0);
        let g = t.backward(c);
        assert_eq!(g.wrt(x), 0.0);
        assert_eq!(g.wrt(c), 0.0);
    }

    #[test]
    fn gate_semantics() {
        // open: payload and its gradient pass through
        let mut t = Tape::new();
        let l = t.leaf(0.5);
        let z = t.gate(0.5, 0.25, GateMode::Gt, l);
        assert_eq!(z.value(), 0.5);
        let g = t.backward(z);
        assert_eq!(g.wrt(l), 1.0);

        // closed: constant zero, no gradient
        let mut t = Tape::new();
        let l = t.leaf(0.1);
        let z = t.gate(0.1, 0.25, GateMode::Gt, l);
        assert_eq!(z.value(), 0.0);
        let g = t.backward(z);
        assert_eq!(g.wrt(l), 0.0);

        // boundary is strict for Gt and inclusive for Le
        let mut t = Tape::new();
        let l = t.leaf(0.25);
        assert_eq!(t.gate(0.25, 0.25, GateMode::Gt, l).value(), 0.0);
        assert_eq!(t.gate(0.25, 0.25, GateMode::Le, l).value(), 0.25);
    }

    #[test]
    fn sum_of_independent_subgraphs_is_concatenation() {
        // gradients of x0*x1 + x2*x3 match the per-product gradients
        let mut t = Tape::new();
        let xs: Vec<Value> = [0.2, 0.7, 1.3, -0.4].iter().map(|&v| t.leaf(v)).collect();
        let p1 = t.mul(xs[0], xs[1]);
        let p2 = t.mul(xs[2], xs[3]);
        let z = t.sum(&[p1, p2]);
        let g = t.backward(z);
        assert_eq!(g.wrt(xs[0]), 0.7);
        assert_eq!(g.wrt(xs[1]), 0.2);
        assert_eq!(g.wrt(xs[2]), -0.4);
        assert_eq!(g.wrt(xs[3]), 1.3);
    }

    #[test]
    fn product_handles_zero_factors() {
        let mut t = Tape::new();
        let xs: Vec<Value> = [0.5, 0.0, 2.0].iter().map(|&v| t.leaf(v)).collect();
        let z = t.product(&xs);
        assert_eq!(z.value(), 0.0);
        let g = t.backward(z);
        assert_eq!(g.wrt(xs[0]), 0.0);
        assert_eq!(g.wrt(xs[1]), 1.0);
        assert_eq!(g.wrt(xs[2]), 0.0);
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = t.leaf(-1.0);
        assert_eq!(t.ln(x).unwrap_err(), TapeError::LogDomain(-1.0));
        assert_eq!(t.log2(x).unwrap_err(), TapeError::LogDomain(-1.0));
        let zero = t.leaf(0.0);
        let one = t.leaf(1.0);
        assert_eq!(t.div(one, zero).unwrap_err(), TapeError::DivByZero);
        let big = t.leaf(1000.0);
        assert!(matches!(t.exp(big), Err(TapeError::NonFinite { .. })));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(0.37);
            let y = t.leaf(0.81);
            let xy = t.mul(x, y);
            let e = t.exp(xy).unwrap();
            let l = t.ln(e).unwrap();
            let m = t.min(l, y);
            let z = t.mean(&[m, x, xy]);
            let g = t.backward(z);
            (z.value(), g.wrt(x), g.wrt(y))
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        assert_eq!(a.2.to_bits(), b.2.to_bits());
    }

    // Finite-difference check for the matrix pipeline: params enter as
    // matrix leaves and the perturbation is applied per entry.
    fn matrix_objective(params: &[f64], t: &mut Tape) -> (MatHandle, MatHandle, Value) {
        let x = Matrix::from_data(2, 3, vec![0.3, -0.2, 0.8, 1.1, 0.4, -0.6]);
        let w = Matrix::from_data(3, 2, params[..6].to_vec());
        let b = Matrix::from_data(1, 2, params[6..].to_vec());
        let xh = t.matrix_leaf(x);
        let wh = t.matrix_leaf(w);
        let bh = t.matrix_leaf(b);
        let z = t.matmul(xh, wh).unwrap();
        let z = t.add_row_bias(z, bh).unwrap();
        let r = t.relu_mat(z);
        let p = t.softmax_rows(r);
        let ce = t.cross_entropy_mean(p, &[(0, 1), (1, 0)]).unwrap();
        let e = t.entry(p, 0, 0);
        let combo = t.mul(e, Tape::constant(0.35));
        let root = t.add(ce, combo);
        (wh, bh, root)
    }

    #[test]
    fn matrix_pipeline_gradients_match_finite_differences() {
        let params = [0.5, -0.3, 0.2, 0.9, -0.7, 0.4, 0.05, -0.15];
        let mut t = Tape::new();
        let (wh, bh, root) = matrix_objective(&params, &mut t);
        let g = t.backward(root);
        let ad: Vec<f64> = g
            .wrt_matrix(wh)
            .iter()
            .chain(g.wrt_matrix(bh).iter())
            .copied()
            .collect();

        let h = 1e-6;
        for i in 0..params.len() {
            let mut up = params;
            up[i] += h;
            let mut down = params;
            down[i] -= h;
            let mut tu = Tape::new();
            let fu = matrix_objective(&up, &mut tu).2.value();
            let mut td = Tape::new();
            let fd_val = matrix_objective(&down, &mut td).2.value();
            let fd = (fu - fd_val) / (2.0 * h);
            assert!(
                (ad[i] - fd).abs() / (fd.abs() + 1e-12) < 1e-6,
                "param {i}: ad {} vs fd {}",
                ad[i],
                fd
            );
        }
    }

    #[test]
    fn finite_difference_checker_on_smooth_expression() {
        let build = |t: &mut Tape, xs: &[Value]| {
            let a = t.mul(xs[0], xs[1]);
            let b = t.exp(a)?;
            let c = t.add(b, xs[2]);
            t.ln(c)
        };
        let err = finite_difference_check(&build, &[0.4, 0.7, 1.3], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn finite_difference_checker_on_constant() {
        let build = |_t: &mut Tape, _xs: &[Value]| Ok(Tape::constant(3.5));
        let err = finite_difference_check(&build, &[0.1, 0.2], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_difference_checker_resamples_near_kinks() {
        // min sits exactly at a tie at the requested point
        let build = |t: &mut Tape, xs: &[Value]| {
            let m = t.min(xs[0], xs[1]);
            Ok(t.mul(m, xs[0]))
        };
        let err = finite_difference_check(&build, &[0.5, 0.5], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
