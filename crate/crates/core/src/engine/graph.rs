use rand::Rng;

use super::tensor::{gemm, Float, Tensor};
use super::EngineError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_trans: bool,
        b_trans: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Abs(Var),
    Softmax(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    PairwiseSqDist(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Softmax(_) => "softmax",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::PairwiseSqDist(_) => "pairwise_sq_dist",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every operation evaluates immediately and records enough state to run
/// reverse-mode differentiation later. Values are checked for NaN/Inf as
/// they are produced, so a non-finite forward surfaces as an error at the
/// op that caused it.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (inputs, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, EngineError> {
        if !value.all_finite() {
            return Err(EngineError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), EngineError> {
        if self.shape(a) != self.shape(b) {
            return Err(EngineError::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Matrix product `op(a) · op(b)` for 2-D operands, or a batched product
    /// when both operands are 3-D with equal leading dimension. A transposed
    /// flag means the operand is stored with its last two axes swapped.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_trans: bool, b_trans: bool) -> Result<Var, EngineError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, ra, ca, rb, cb) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => {
                return Err(EngineError::Shape(format!("matmul: {sa:?} x {sb:?}")));
            }
        };
        let (m, k) = if a_trans { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if b_trans { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(EngineError::Shape(format!(
                "matmul inner dims: {sa:?}{} x {sb:?}{}",
                if a_trans { "ᵀ" } else { "" },
                if b_trans { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[g * m * k..(g + 1) * m * k],
                    a_trans,
                    &bd[g * k * n..(g + 1) * k * n],
                    b_trans,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a vector along the last axis of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, EngineError> {
        let d = self.value(a).last_dim();
        if self.shape(bias) != [d] {
            return Err(EngineError::Shape(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let mut v = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += *y;
            }
        }
        self.push(v, Op::AddRow { a, bias }, &[a, bias])
    }

    /// `a @ w + b`, the affine map used throughout the encoder.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var, EngineError> {
        let h = self.matmul(a, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, EngineError> {
        let f = T::lit(factor);
        let v = map(self.value(a), |x| x * f);
        self.push(v, Op::Scale { a, factor: f }, &[a])
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, EngineError> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(EngineError::Shape(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::lit(d as f64);
        let eps = T::lit(eps);
        let mut normed = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let nv = (row[c] - mean) * rs;
                normed[r * d + c] = nv;
                out[r * d + c] = nv * g[c] + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, EngineError> {
        let c = T::lit(SQRT_2_OVER_PI);
        let k = T::lit(GELU_COEF);
        let half = T::lit(0.5);
        let v = map(self.value(a), |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, EngineError> {
        let v = map(self.value(a), |x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var, EngineError> {
        let v = map(self.value(a), |x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, EngineError> {
        let mut v = self.value(a).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Selects rows of `table` (first axis) in the given order. Serves as
    /// embedding lookup and as row selection of hidden states.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, EngineError> {
        let t = self.value(table);
        let shape = t.shape();
        if shape.is_empty() {
            return Err(EngineError::Shape("gather from scalar".into()));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(EngineError::Shape(format!("gather index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Mean softmax cross-entropy of `logits` `[n, classes]` against class
    /// indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, EngineError> {
        let l = self.value(logits);
        if l.shape().len() != 2 || l.shape()[0] != targets.len() || targets.is_empty() {
            return Err(EngineError::Shape(format!(
                "cross_entropy: logits {:?}, {} targets",
                l.shape(),
                targets.len()
            )));
        }
        let c = l.shape()[1];
        let mut probs = l.data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[r];
            if t >= c {
                return Err(EngineError::Shape(format!("target {t} out of {c} classes")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[t]).as_f64();
            softmax_in_place(row);
        }
        let value = Tensor::scalar(T::lit(total / targets.len() as f64));
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, EngineError> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, EngineError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(EngineError::Shape("mean of empty tensor".into()));
        }
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, EngineError> {
        let src = self.value(a);
        let v = permute_tensor(src, perm)?;
        self.push(
            v,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    /// `out[i][j] = ‖x_i − x_j‖²` over the rows of a 2-D input.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(EngineError::Shape(format!("pairwise_sq_dist: {:?}", t.shape())));
        }
        let n = t.shape()[0];
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        self.push(value, Op::PairwiseSqDist(x), &[x])
    }

    /// Inverted dropout with a mask drawn from `rng`. The mask is recorded as
    /// a constant input, so replaying the same RNG stream replays the graph.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var, EngineError> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let shape = self.shape(a).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, EngineError> {
        if self.value(loss).len() != 1 {
            return Err(EngineError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
                batch,
                m,
                k,
                n,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let gd = g.data();
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let bs = &bd[bi * k * n..(bi + 1) * k * n];
                        let das = &mut da[bi * m * k..(bi + 1) * m * k];
                        if a_trans {
                            // stored [k, m] = op(b) · gᵀ
                            gemm(k, n, m, bs, b_trans, gs, true, das, false);
                        } else {
                            // [m, k] = g · op(b)ᵀ
                            gemm(m, n, k, gs, false, bs, !b_trans, das, false);
                        }
                    }
                    let t = Tensor::new(self.shape(a).to_vec(), da).expect("matmul grad shape");
                    self.acc(grads, a, t);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let dbs = &mut db[bi * k * n..(bi + 1) * k * n];
                        if b_trans {
                            // stored [n, k] = gᵀ · op(a)
                            gemm(n, m, k, gs, true, as_, a_trans, dbs, false);
                        } else {
                            // [k, n] = op(a)ᵀ · g
                            gemm(k, m, n, as_, !a_trans, gs, false, dbs, false);
                        }
                    }
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("matmul grad shape");
                    self.acc(grads, b, t);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                if self.wants(b) {
                    self.acc(grads, b, map(g, |x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.acc(grads, a, zip_map(g, self.value(b), |x, y| x * y));
                }
                if self.wants(b) {
                    self.acc(grads, b, zip_map(g, self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow { a, bias } => {
                self.acc(grads, a, g.clone());
                if self.wants(bias) {
                    let d = g.last_dim();
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, bias, Tensor::new(vec![d], db).expect("bias grad"));
                }
            }
            &Op::Scale { a, factor } => {
                self.acc(grads, a, map(g, |x| x * factor));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = g.last_dim();
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let dn = T::lit(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let nr = &normed[r * d..(r + 1) * d];
                        let mut sum_dn = T::zero();
                        let mut sum_dn_n = T::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            sum_dn += dxh;
                            sum_dn_n += dxh * nr[c];
                        }
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            dx[r * d + c] = rs / dn * (dn * dxh - sum_dn - nr[c] * sum_dn_n);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("ln grad"));
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, nr) in g.data().chunks(d).zip(normed.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * nr[c];
                            db[c] += gr[c];
                        }
                    }
                    self.acc(grads, *gain, Tensor::new(vec![d], dg).expect("ln gain grad"));
                    self.acc(grads, *bias, Tensor::new(vec![d], db).expect("ln bias grad"));
                }
            }
            &Op::Gelu(a) => {
                let c = T::lit(SQRT_2_OVER_PI);
                let k = T::lit(GELU_COEF);
                let half = T::lit(0.5);
                let three_k = T::lit(3.0 * GELU_COEF);
                let dx = zip_map(g, self.value(a), |gv, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let du = c * (T::one() + three_k * x * x);
                    gv * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                });
                self.acc(grads, a, dx);
            }
            &Op::Tanh(a) => {
                let dx = zip_map(g, out, |gv, y| gv * (T::one() - y * y));
                self.acc(grads, a, dx);
            }
            &Op::Abs(a) => {
                let dx = zip_map(g, self.value(a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, a, dx);
            }
            &Op::Softmax(a) => {
                let d = out.last_dim();
                let mut dx = vec![T::zero(); out.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum::<T>();
                    for c in 0..d {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, a, Tensor::new(out.shape().to_vec(), dx).expect("softmax grad"));
            }
            Op::Gather { table, indices } => {
                if self.wants(*table) {
                    let t = self.value(*table);
                    let width: usize = t.shape()[1..].iter().product();
                    let mut dt = vec![T::zero(); t.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g.data()[r * width..(r + 1) * width];
                        for (acc, &v) in dt[i * width..(i + 1) * width].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *table, Tensor::new(t.shape().to_vec(), dt).expect("gather grad"));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let scale = g.item() / T::lit(targets.len() as f64);
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= T::one();
                }
                for v in dl.iter_mut() {
                    *v *= scale;
                }
                let shape = self.shape(*logits).to_vec();
                self.acc(grads, *logits, Tensor::new(shape, dl).expect("ce grad"));
            }
            &Op::Sum(a) => {
                let s = self.shape(a).to_vec();
                self.acc(grads, a, Tensor::full(&s, g.item()));
            }
            &Op::Mean(a) => {
                let s = self.shape(a).to_vec();
                let n = self.value(a).len();
                self.acc(grads, a, Tensor::full(&s, g.item() / T::lit(n as f64)));
            }
            &Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                self.acc(grads, a, g.clone().reshaped(s).expect("reshape grad"));
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = permute_tensor(g, &inv).expect("permute grad");
                self.acc(grads, *a, dx);
            }
            &Op::PairwiseSqDist(x) => {
                let xv = self.value(x);
                let n = xv.shape()[0];
                let k = xv.shape()[1];
                let two = T::lit(2.0);
                let mut dx = vec![T::zero(); n * k];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = two * (g.data()[i * n + j] + g.data()[j * n + i]);
                        if w == T::zero() {
                            continue;
                        }
                        for c in 0..k {
                            dx[i * k + c] += w * (xv.data()[i * k + c] - xv.data()[j * k + c]);
                        }
                    }
                }
                self.acc(grads, x, Tensor::new(vec![n, k], dx).expect("pdist grad"));
            }
        }
    }
}

/// Gradients of a scalar loss with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or explicit zeros shaped like `like` when the loss
    /// does not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn map<T: Float>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("map keeps shape")
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("zip_map keeps shape")
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn permute_tensor<T: Float>(src: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>, EngineError> {
    let in_shape = src.shape();
    let rank = in_shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(EngineError::Shape(format!("permute {perm:?} of shape {in_shape:?}")));
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let data = src.data();
    for _ in 0..total {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
