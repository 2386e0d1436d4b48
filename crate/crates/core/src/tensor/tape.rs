use super::params::{ParamGrads, ParamId, ParamStore};
use super::{gemm_nn, gemm_nt_acc, gemm_tn_acc, Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<F>,
        rstd: Vec<F>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    Interleave(Vec<Var>),
    RepeatRows(Var),
    OverlayRows {
        base: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    Attention(Box<AttentionCache<F>>),
    Sum(Var),
    Nll {
        probs: Var,
        targets: Vec<usize>,
        floor: F,
    },
}

struct AttentionCache<F> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_group: usize,
    k_group: usize,
    scale: F,
    probs: Vec<F>,
    mask: Option<Vec<F>>,
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Transpose(x)
            | Op::RepeatRows(x)
            | Op::Sum(x) => vec![*x],
            Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) | Op::Interleave(parts) => parts.clone(),
            Op::GatherRows { src, .. } => vec![*src],
            Op::OverlayRows { base, fill, .. } => vec![*base, *fill],
            Op::Attention(c) => vec![c.q, c.k, c.v],
            Op::Nll { probs, .. } => vec![*probs],
        }
    }
}

struct Node<F> {
    value: Option<Tensor<F>>,
    param: Option<ParamId>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation so that gradients can be obtained with
/// [`Tape::backward`].
///
/// Parameter leaves borrow their values from a [`ParamStore`] instead of
/// copying them. A tape is append-only: every node refers only to earlier
/// nodes, so the recorded order is already topological.
pub struct Tape<'p, F> {
    params: Option<&'p ParamStore<F>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<'static, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<'static, F> {
    pub fn new() -> Self {
        Tape {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Tape {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("tape has no parameter store");
        assert!(id.0 < store.len(), "parameter id out of range");
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Free leaf that receives gradients (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(id)) => self.params.expect("param leaf without store").get(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Post-softmax attention weights of an [`Tape::attention`] node, laid out
    /// as `[group][head][query][key]`, before any dropout mask.
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm_nn(ta, tb, &mut out, F::zero());
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: tx.shape(),
                right: tb.shape(),
            });
        }
        let mut out = tx.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push("relu", out, Op::Relu(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(TensorError::NonFinite("softmax_rows input"));
        }
        let mut out = tx.clone();
        let cols = out.cols();
        if cols > 0 {
            for row in out.data_mut().chunks_exact_mut(cols) {
                softmax_row(row);
            }
        }
        self.push("softmax_rows", out, Op::Softmax(x))
    }

    /// Per-row normalization to zero mean and unit variance followed by a
    /// `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let cols = tx.cols();
        for t in [tg, tb] {
            if t.shape() != (1, cols) {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: tx.shape(),
                    right: t.shape(),
                });
            }
        }
        let n = F::of(cols as f64);
        let mut xhat = tx.clone();
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = Tensor::zeros(tx.rows(), cols);
        for r in 0..tx.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let s = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
            let (gd, bd) = (tg.data(), tb.data());
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xhat.get(r, c) * gd[c] + bd[c];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(*first),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: tx.shape(),
                right: (start, len),
            });
        }
        let mut out = Tensor::zeros(tx.rows(), len);
        for r in 0..tx.rows() {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..start + len]);
        }
        self.push("slice_cols", out, Op::SliceCols { x, start })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x))
    }

    /// Output row `r` is row `index[r]` of `src`. Gradients scatter-add back.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let mut out = Tensor::zeros(index.len(), t.cols());
        for (r, &i) in index.iter().enumerate() {
            if i >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: t.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
        )
    }

    /// Stacks `n` equally shaped `b x d` tensors into `(b * n) x d` with output
    /// row `i * n + s` taken from row `i` of `parts[s]`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "interleave_rows",
            msg: "no inputs".into(),
        })?;
        let shape = self.shape(*first);
        for &p in parts {
            if self.shape(p) != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "interleave_rows",
                    left: shape,
                    right: self.shape(p),
                });
            }
        }
        let n = parts.len();
        let mut out = Tensor::zeros(shape.0 * n, shape.1);
        for (s, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            for i in 0..shape.0 {
                out.row_mut(i * n + s).copy_from_slice(t.row(i));
            }
        }
        self.push("interleave_rows", out, Op::Interleave(parts.to_vec()))
    }

    /// Repeats a single row `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                left: t.shape(),
                right: (1, t.cols()),
            });
        }
        let mut out = Tensor::zeros(times, t.cols());
        for r in 0..times {
            out.row_mut(r).copy_from_slice(t.row(0));
        }
        self.push("repeat_rows", out, Op::RepeatRows(x))
    }

    /// Copy of `base` with each row listed in `rows` replaced by the single
    /// row `fill`.
    pub fn overlay_rows(&mut self, base: Var, fill: Var, rows: &[usize]) -> Result<Var> {
        let (tb, tf) = (self.value(base), self.value(fill));
        if tf.shape() != (1, tb.cols()) {
            return Err(TensorError::ShapeMismatch {
                op: "overlay_rows",
                left: tb.shape(),
                right: tf.shape(),
            });
        }
        let mut out = tb.clone();
        for &r in rows {
            if r >= tb.rows() {
                return Err(TensorError::IndexOutOfRange {
                    index: r,
                    len: tb.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(tf.row(0));
        }
        self.push(
            "overlay_rows",
            out,
            Op::OverlayRows {
                base,
                fill,
                rows: rows.to_vec(),
            },
        )
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` holds `groups * q_group` rows and `k`, `v` hold `groups * k_group`
    /// rows; queries attend only to keys of their own group. Columns are split
    /// into `heads` contiguous slices of equal width. `mask`, when given,
    /// multiplies the attention weights (inverted dropout) and has one entry
    /// per `[group][head][query][key]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_group: usize,
        k_group: usize,
        mask: Option<Vec<F>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.shape() != tv.shape() || tk.cols() != d {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: tk.shape(),
                right: tv.shape(),
            });
        }
        if heads == 0 || d % heads != 0 || q_group == 0 || k_group == 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{heads} heads over width {d}, groups {q_group}/{k_group}"),
            });
        }
        if tq.rows() % q_group != 0
            || tk.rows() % k_group != 0
            || tq.rows() / q_group != tk.rows() / k_group
        {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: tq.shape(),
                right: tk.shape(),
            });
        }
        let groups = tq.rows() / q_group;
        let hd = d / heads;
        let n_probs = groups * heads * q_group * k_group;
        if let Some(m) = &mask {
            if m.len() != n_probs {
                return Err(TensorError::Invalid {
                    op: "attention",
                    msg: format!("mask has {} entries, expected {n_probs}", m.len()),
                });
            }
        }
        let scale = F::one() / F::of(hd as f64).sqrt();
        let mut probs = vec![F::zero(); n_probs];
        let mut out = Tensor::zeros(tq.rows(), d);
        let mut weights = vec![F::zero(); k_group];
        for g in 0..groups {
            for h in 0..heads {
                let cs = h * hd;
                for i in 0..q_group {
                    let qrow = &tq.row(g * q_group + i)[cs..cs + hd];
                    let base = ((g * heads + h) * q_group + i) * k_group;
                    let p = &mut probs[base..base + k_group];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &tk.row(g * k_group + j)[cs..cs + hd];
                        *pj = dot(qrow, krow) * scale;
                    }
                    softmax_row(p);
                    weights.copy_from_slice(p);
                    if let Some(m) = &mask {
                        for (w, &mj) in weights.iter_mut().zip(&m[base..base + k_group]) {
                            *w *= mj;
                        }
                    }
                    let orow = &mut out.row_mut(g * q_group + i)[cs..cs + hd];
                    for (j, &w) in weights.iter().enumerate() {
                        let vrow = &tv.row(g * k_group + j)[cs..cs + hd];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                q_group,
                k_group,
                scale,
                probs,
                mask,
            })),
        )
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::filled(1, 1, s), Op::Sum(x))
    }

    /// Mean over rows of `-ln(max(probs[r][targets[r]], floor))`.
    pub fn nll(&mut self, probs: Var, targets: &[usize], floor: F) -> Result<Var> {
        let t = self.value(probs);
        if targets.len() != t.rows() || t.rows() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "nll",
                left: t.shape(),
                right: (targets.len(), 1),
            });
        }
        let mut total = F::zero();
        for (r, &c) in targets.iter().enumerate() {
            if c >= t.cols() {
                return Err(TensorError::IndexOutOfRange {
                    index: c,
                    len: t.cols(),
                });
            }
            total -= t.get(r, c).max(floor).ln();
        }
        let loss = total / F::of(t.rows() as f64);
        self.push(
            "nll",
            Tensor::filled(1, 1, loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                floor,
            },
        )
    }

    /// Reverse pass from a scalar node.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NotScalar(r, c));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(TensorError::GraphCycle {
                        node: i,
                        input: input.0,
                    });
                }
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> &'g mut Tensor<F> {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        if matches!(self.nodes[i].op, Op::Leaf) {
            return;
        }
        let out = self.nodes[i].value.as_ref().expect("op node has a value");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let tb = self.value(*b);
                    gemm_nt_acc(g, tb, self.slot(grads, *a));
                }
                if self.wants(*b) {
                    let ta = self.value(*a);
                    gemm_tn_acc(ta, g, self.slot(grads, *b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.slot(grads, v).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let tb = self.value(*b);
                    let s = self.slot(grads, *a);
                    for ((o, &gv), &y) in s.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * y;
                    }
                }
                if self.wants(*b) {
                    let ta = self.value(*a);
                    let s = self.slot(grads, *b);
                    for ((o, &gv), &x) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    self.slot(grads, *x).add_assign(g);
                }
                if self.wants(*bias) {
                    let s = self.slot(grads, *bias);
                    add_col_sums(g, s.data_mut());
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    for (o, &gv) in s.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * *c;
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    for ((o, &gv), &y) in s.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if y > F::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let cols = out.cols();
                    let s = self.slot(grads, *x);
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let inner = dot(y, gr);
                        for ((o, &yv), &gv) in s.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *o += yv * (gv - inner);
                        }
                    }
                    debug_assert_eq!(s.cols(), cols);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                if self.wants(*gain) {
                    let s = self.slot(grads, *gain);
                    for r in 0..g.rows() {
                        for ((o, &gv), &xh) in s.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * xh;
                        }
                    }
                }
                if self.wants(*bias) {
                    add_col_sums(g, self.slot(grads, *bias).data_mut());
                }
                if self.wants(*x) {
                    let tg = self.value(*gain).data().to_vec();
                    let n = F::of(g.cols() as f64);
                    let s = self.slot(grads, *x);
                    let mut dxhat = vec![F::zero(); g.cols()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let xh = xhat.row(r);
                        for ((d, &gv), &gn) in dxhat.iter_mut().zip(g.row(r)).zip(&tg) {
                            *d = gv * gn;
                        }
                        let mean_d = dxhat.iter().copied().sum::<F>() / n;
                        let mean_dx = dot(&dxhat, xh) / n;
                        for ((o, &d), &xv) in s.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o += rs * (d - mean_d - xv * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.wants(p) {
                        let s = self.slot(grads, p);
                        for r in 0..g.rows() {
                            for (o, &gv) in s.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let w = g.cols();
                    let s = self.slot(grads, *x);
                    for r in 0..g.rows() {
                        for (o, &gv) in s.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    self.slot(grads, *x).add_assign(&g.transpose());
                }
            }
            Op::GatherRows { src, index } => {
                if self.wants(*src) {
                    let s = self.slot(grads, *src);
                    for (r, &i) in index.iter().enumerate() {
                        for (o, &gv) in s.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Interleave(parts) => {
                let n = parts.len();
                for (si, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        let s = self.slot(grads, p);
                        for b in 0..s.rows() {
                            for (o, &gv) in s.row_mut(b).iter_mut().zip(g.row(b * n + si)) {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            Op::RepeatRows(x) => {
                if self.wants(*x) {
                    add_col_sums(g, self.slot(grads, *x).data_mut());
                }
            }
            Op::OverlayRows { base, fill, rows } => {
                if self.wants(*base) {
                    let mut gb = g.clone();
                    for &r in rows {
                        gb.row_mut(r).iter_mut().for_each(|v| *v = F::zero());
                    }
                    self.slot(grads, *base).add_assign(&gb);
                }
                if self.wants(*fill) {
                    let s = self.slot(grads, *fill);
                    for &r in rows {
                        for (o, &gv) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Attention(c) => self.backward_attention(c, g, grads),
            Op::Sum(x) => {
                if self.wants(*x) {
                    let gv = g.get(0, 0);
                    for o in self.slot(grads, *x).data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Nll {
                probs,
                targets,
                floor,
            } => {
                if self.wants(*probs) {
                    let tp = self.value(*probs);
                    let coef = g.get(0, 0) / F::of(targets.len() as f64);
                    let ps: Vec<F> = targets
                        .iter()
                        .enumerate()
                        .map(|(r, &c)| tp.get(r, c))
                        .collect();
                    let s = self.slot(grads, *probs);
                    for (r, (&c, &p)) in targets.iter().zip(&ps).enumerate() {
                        if p > *floor {
                            let cur = s.get(r, c);
                            s.set(r, c, cur - coef / p);
                        }
                    }
                }
            }
        }
    }

    fn backward_attention(
        &self,
        c: &AttentionCache<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (tq, tk, tv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = tq.cols();
        let hd = d / c.heads;
        let groups = tq.rows() / c.q_group;
        let (nq, nk) = (c.q_group, c.k_group);
        let mut dq = Tensor::zeros(tq.rows(), d);
        let mut dk = Tensor::zeros(tk.rows(), d);
        let mut dv = Tensor::zeros(tv.rows(), d);
        let mut dp = vec![F::zero(); nk];
        for gi in 0..groups {
            for h in 0..c.heads {
                let cs = h * hd;
                for i in 0..nq {
                    let qr = gi * nq + i;
                    let base = ((gi * c.heads + h) * nq + i) * nk;
                    let p = &c.probs[base..base + nk];
                    let m = c.mask.as_ref().map(|m| &m[base..base + nk]);
                    let grow = &g.row(qr)[cs..cs + hd];
                    for j in 0..nk {
                        let kr = gi * nk + j;
                        let w = p[j] * m.map_or(F::one(), |m| m[j]);
                        for (o, &gv) in dv.row_mut(kr)[cs..cs + hd].iter_mut().zip(grow) {
                            *o += w * gv;
                        }
                        let dw = dot(grow, &tv.row(kr)[cs..cs + hd]);
                        dp[j] = dw * m.map_or(F::one(), |m| m[j]);
                    }
                    let inner = dot(p, &dp);
                    let qrow = &tq.row(qr)[cs..cs + hd];
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - inner) * c.scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let kr = gi * nk + j;
                        let krow = &tk.row(kr)[cs..cs + hd];
                        for (o, &kv) in dq.row_mut(qr)[cs..cs + hd].iter_mut().zip(krow) {
                            *o += ds * kv;
                        }
                        for (o, &qv) in dk.row_mut(kr)[cs..cs + hd].iter_mut().zip(qrow) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        for (v, t) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if self.wants(v) {
                self.slot(grads, v).add_assign(&t);
            }
        }
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn add_col_sums<F: Real>(g: &Tensor<F>, out: &mut [F]) {
    for r in 0..g.rows() {
        for (o, &gv) in out.iter_mut().zip(g.row(r)) {
            *o += gv;
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Gradients for every node of a tape after [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, zero-filled when `v` is not on a path to
    /// the loss.
    pub fn wrt(&self, tape: &Tape<'_, F>, v: Var) -> Tensor<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.shape(v);
                Tensor::zeros(r, c)
            }
        }
    }

    /// Adds the gradients of all parameter leaves into `acc`.
    pub fn accumulate_params(&self, tape: &Tape<'_, F>, acc: &mut ParamGrads<F>) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &self.grads[i]) {
                acc.get_mut(id).add_assign(g);
            }
        }
    }

    /// Parameter gradients aligned with the tape's store; parameters the
    /// loss does not touch get zeros.
    pub fn param_grads(&self, tape: &Tape<'_, F>) -> ParamGrads<F> {
        let store = tape.params.expect("tape has no parameter store");
        let mut acc = ParamGrads::zeros_like(store);
        self.accumulate_params(tape, &mut acc);
        acc
    }

    /// Same as [`Gradients::param_grads`], moving the tensors out instead of
    /// copying them.
    pub fn into_param_grads(mut self, tape: &Tape<'_, F>) -> ParamGrads<F> {
        let store = tape.params.expect("tape has no parameter store");
        let mut out: Vec<Option<Tensor<F>>> = (0..store.len()).map(|_| None).collect();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                out[id.0] = self.grads[i].take();
            }
        }
        let grads = out
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| {
                g.unwrap_or_else(|| {
                    let (r, c) = store.get(id).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect();
        ParamGrads { grads }
    }
}
