//! Tape-based reverse-mode autograd.
//!
//! A [`Tape`] is an append-only list of nodes; each op records its parents
//! and whatever forward context its backward rule needs. [`Tape::backward`]
//! walks the tape in reverse topological order (which is just reverse
//! creation order), accumulates activation gradients tape-locally, and adds
//! parameter gradients into the persistent accumulators of a
//! [`ParamSet`], so two backward calls double them and `zero_grads` resets
//! them. Scatter-style backwards (embedding, row select) accumulate
//! sequentially in index order, keeping results independent of thread
//! count.

use super::kernel;
use super::model::ParamSet;
use super::tensor::{Scalar, Tensor};
use super::NeuralError;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Embed { table: Var, ids: Vec<u32> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddBiasRows { a: Var, bias: Var },
    MatMulNN { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNT { a: Var, b: Var, m: usize, k: usize, n: usize },
    LayerNormRows { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu { a: Var },
    SoftmaxCausal { a: Var },
    SoftmaxRows { a: Var },
    SliceCols { a: Var, start: usize, width: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SelectRows { a: Var, rows: Vec<usize> },
    MeanRows { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    Exp { a: Var },
    Clamp { a: Var, lo: T, hi: T },
    MinElem { a: Var, b: Var },
    Square { a: Var },
    GatherLogProbs { logits: Var, targets: Vec<u32>, probs: Vec<T> },
    BceWithLogits { logit: Var, labels: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    // (node index, param index) pairs fed back into the ParamSet.
    links: Vec<(usize, usize)>,
}

fn mismatch(op: &'static str, detail: String) -> NeuralError {
    NeuralError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), links: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on shape {:?}", t.shape());
        t.data()[0]
    }

    /// A node with no gradient path; inputs, targets, and constants.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf tied to `params[index]`; backward adds into that parameter's
    /// gradient accumulator.
    pub fn param(&mut self, params: &ParamSet<T>, index: usize) -> Var {
        let v = self.push(params.tensor(index).clone(), true, Op::Leaf);
        self.links.push((v.0, index));
        v
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize), NeuralError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(mismatch(op, format!("expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NeuralError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Rows of `table` selected by token id: `[len(ids), dim]`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var, NeuralError> {
        let (vocab, dim) = self.shape2(table, "embed")?;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(NeuralError::TokenOutOfRange { id, vocab });
            }
            let row = &self.value(table).data()[id as usize * dim..(id as usize + 1) * dim];
            data.extend_from_slice(row);
        }
        let value = Tensor::from_vec(&[ids.len(), dim], data);
        let rg = self.rg(table);
        Ok(self.push(value, rg, Op::Embed { table, ids: ids.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NeuralError> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Scale { a, c }))
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_bias_rows(&mut self, a: Var, bias: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(a, "add_bias_rows")?;
        let bs = self.value(bias).shape();
        if bs != [n] {
            return Err(mismatch("add_bias_rows", format!("bias {bs:?} for input [{m},{n}]")));
        }
        let mut data = self.value(a).data().to_vec();
        let bias_data = self.value(bias).data();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bias_data) {
                *x += b;
            }
        }
        let value = Tensor::from_vec(&[m, n], data);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, rg, Op::AddBiasRows { a, bias }))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul_nn(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (m, k) = self.shape2(a, "matmul_nn")?;
        let (k2, n) = self.shape2(b, "matmul_nn")?;
        if k != k2 {
            return Err(mismatch("matmul_nn", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let data = kernel::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_vec(&[m, n], data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatMulNN { a, b, m, k, n }))
    }

    /// `[m,k] · [n,k]^T`; the usual layout for `x · W^T` with `W [out,in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (m, k) = self.shape2(a, "matmul_nt")?;
        let (n, k2) = self.shape2(b, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let data = kernel::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_vec(&[m, n], data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatMulNT { a, b, m, k, n }))
    }

    pub fn layernorm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(x, "layernorm_rows")?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(mismatch(
                "layernorm_rows",
                format!(
                    "gain {:?} / bias {:?} for input [{m},{n}]",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let (y, xhat, inv_std) = kernel::layernorm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            m,
            n,
        );
        let value = Tensor::from_vec(&[m, n], y);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, rg, Op::LayerNormRows { x, gain, bias, xhat, inv_std }))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NeuralError> {
        let data = self.value(a).data().iter().map(|&x| kernel::gelu(x)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Gelu { a }))
    }

    /// Causal softmax on square attention scores; see
    /// [`kernel::softmax_causal`].
    pub fn softmax_causal(&mut self, a: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(a, "softmax_causal")?;
        if m != n {
            return Err(mismatch("softmax_causal", format!("scores must be square, got [{m},{n}]")));
        }
        let data = kernel::softmax_causal(self.value(a).data(), m);
        let value = Tensor::from_vec(&[m, n], data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::SoftmaxCausal { a }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(a, "softmax_rows")?;
        let data = kernel::softmax_rows(self.value(a).data(), m, n);
        let value = Tensor::from_vec(&[m, n], data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::SoftmaxRows { a }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(a, "slice_cols")?;
        if start + width > n || width == 0 {
            return Err(mismatch("slice_cols", format!("cols {start}..{} of [{m},{n}]", start + width)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let value = Tensor::from_vec(&[m, width], data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::SliceCols { a, start, width }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no parts".into()));
        }
        let (m, _) = self.shape2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.shape2(p, "concat_cols")?;
            if mp != m {
                return Err(mismatch("concat_cols", format!("row counts {m} vs {mp}")));
            }
            total += np;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let np = self.value(p).cols();
                data.extend_from_slice(&self.value(p).data()[i * np..(i + 1) * np]);
            }
        }
        let value = Tensor::from_vec(&[m, total], data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "no parts".into()));
        }
        let (_, n) = self.shape2(parts[0], "concat_rows")?;
        let mut total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (mp, np) = self.shape2(p, "concat_rows")?;
            if np != n {
                return Err(mismatch("concat_rows", format!("col counts {n} vs {np}")));
            }
            total += mp;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[total, n], data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(a, "select_rows")?;
        if rows.is_empty() {
            return Err(mismatch("select_rows", "no rows selected".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(mismatch("select_rows", format!("row {r} of [{m},{n}]")));
            }
            data.extend_from_slice(&self.value(a).data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::from_vec(&[rows.len(), n], data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::SelectRows { a, rows: rows.to_vec() }))
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(a, "mean_rows")?;
        let inv_m = T::ONE / T::from_f64(m as f64);
        let src = self.value(a).data();
        let mut data = vec![T::ZERO; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in &mut data {
            *v *= inv_m;
        }
        let value = Tensor::from_vec(&[1, n], data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::MeanRows { a }))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, NeuralError> {
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let value = Tensor::from_vec(&[1], vec![acc]);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, NeuralError> {
        let len = self.value(a).len();
        if len == 0 {
            return Err(mismatch("mean_all", "empty input".into()));
        }
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let value = Tensor::from_vec(&[1], vec![acc / T::from_f64(len as f64)]);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::MeanAll { a }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NeuralError> {
        let data = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Exp { a }))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, NeuralError> {
        let data = self.value(a).data().iter().map(|&x| x.max_s(lo).min_s(hi)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Clamp { a, lo, hi }))
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.same_shape(a, b, "min_elem")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x.min_s(y))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MinElem { a, b }))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NeuralError> {
        let data = self.value(a).data().iter().map(|&x| x * x).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Square { a }))
    }

    /// Per-row `log softmax(logits)[target]`: `[m,V] -> [m,1]`. Matches
    /// [`kernel::log_prob_of`] bitwise, which PPO relies on when it replays
    /// sampled tokens through the tape.
    pub fn gather_log_probs(&mut self, logits: Var, targets: &[u32]) -> Result<Var, NeuralError> {
        let (m, vocab) = self.shape2(logits, "gather_log_probs")?;
        if targets.len() != m {
            return Err(mismatch(
                "gather_log_probs",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::ZERO; m * vocab];
        let mut out = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= vocab {
                return Err(NeuralError::TokenOutOfRange { id: t, vocab });
            }
            let row = &src[i * vocab..(i + 1) * vocab];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max_s(v);
            }
            let mut sum = T::ZERO;
            for &v in row {
                sum += (v - mx).exp();
            }
            out.push(row[t as usize] - mx - sum.ln());
            let inv = T::ONE / sum;
            for (j, &v) in row.iter().enumerate() {
                probs[i * vocab + j] = (v - mx).exp() * inv;
            }
        }
        let value = Tensor::from_vec(&[m, 1], out);
        let rg = self.rg(logits);
        Ok(self.push(value, rg, Op::GatherLogProbs { logits, targets: targets.to_vec(), probs }))
    }

    /// Stable binary cross-entropy per row: `[m,1]` logits and `m` labels
    /// in {0,1} to `[m,1]` losses.
    pub fn bce_with_logits(&mut self, logit: Var, labels: &[T]) -> Result<Var, NeuralError> {
        let (m, n) = self.shape2(logit, "bce_with_logits")?;
        if n != 1 || labels.len() != m {
            return Err(mismatch(
                "bce_with_logits",
                format!("logits [{m},{n}] with {} labels", labels.len()),
            ));
        }
        let data = self
            .value(logit)
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| kernel::bce_with_logit(x, y))
            .collect();
        let value = Tensor::from_vec(&[m, 1], data);
        let rg = self.rg(logit);
        Ok(self.push(value, rg, Op::BceWithLogits { logit, labels: labels.to_vec() }))
    }

    /// Reverse sweep from `loss`, a scalar node with a gradient path to at
    /// least one parameter. Parameter gradients accumulate into `params`;
    /// calling twice without `zero_grads` doubles them.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<(), NeuralError> {
        let ln = self.nodes[loss.0].value.len();
        if ln != 1 {
            return Err(NeuralError::NonScalarLoss(ln));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NeuralError::DetachedBackward);
        }
        let mut grads: Vec<Vec<T>> = Vec::with_capacity(loss.0 + 1);
        for node in self.nodes.iter().take(loss.0 + 1) {
            if node.requires_grad {
                grads.push(vec![T::ZERO; node.value.len()]);
            } else {
                grads.push(Vec::new());
            }
        }
        grads[loss.0][0] = T::ONE;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g: &[T] = &upper[0];
            self.backward_node(i, g, lower);
        }

        for &(node_i, param_i) in &self.links {
            if node_i <= loss.0 && !grads[node_i].is_empty() {
                params.tensor_mut(param_i).accumulate_grad(&grads[node_i]);
            }
        }
        Ok(())
    }

    // Adds node i's backward contributions into its parents' grad buffers
    // (all parents have smaller indices, so they live in `lower`). A parent
    // without a gradient path has an empty buffer and is skipped.
    fn backward_node(&self, i: usize, g: &[T], lower: &mut [Vec<T>]) {
        fn acc<T: Scalar>(dst: &mut [T], src: impl Iterator<Item = T>) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Embed { table, ids } => {
                if !lower[table.0].is_empty() {
                    let dim = shape(*table)[1];
                    let dst = &mut lower[table.0];
                    for (pos, &id) in ids.iter().enumerate() {
                        let base = id as usize * dim;
                        for j in 0..dim {
                            dst[base + j] += g[pos * dim + j];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if !lower[a.0].is_empty() {
                    acc(&mut lower[a.0], g.iter().copied());
                }
                if !lower[b.0].is_empty() {
                    acc(&mut lower[b.0], g.iter().copied());
                }
            }
            Op::Sub { a, b } => {
                if !lower[a.0].is_empty() {
                    acc(&mut lower[a.0], g.iter().copied());
                }
                if !lower[b.0].is_empty() {
                    acc(&mut lower[b.0], g.iter().map(|&x| -x));
                }
            }
            Op::Mul { a, b } => {
                if !lower[a.0].is_empty() {
                    let bv = val(*b);
                    acc(&mut lower[a.0], g.iter().zip(bv).map(|(&gi, &bi)| gi * bi));
                }
                if !lower[b.0].is_empty() {
                    let av = val(*a);
                    acc(&mut lower[b.0], g.iter().zip(av).map(|(&gi, &ai)| gi * ai));
                }
            }
            Op::Scale { a, c } => {
                if !lower[a.0].is_empty() {
                    let c = *c;
                    acc(&mut lower[a.0], g.iter().map(|&x| x * c));
                }
            }
            Op::AddBiasRows { a, bias } => {
                if !lower[a.0].is_empty() {
                    acc(&mut lower[a.0], g.iter().copied());
                }
                if !lower[bias.0].is_empty() {
                    let n = shape(*bias)[0];
                    let dst = &mut lower[bias.0];
                    for row in g.chunks(n) {
                        for (d, &x) in dst.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MatMulNN { a, b, m, k, n } => {
                if !lower[a.0].is_empty() {
                    let ga = kernel::matmul_nt(g, val(*b), *m, *n, *k);
                    acc(&mut lower[a.0], ga.into_iter());
                }
                if !lower[b.0].is_empty() {
                    let gb = kernel::matmul_tn(val(*a), g, *k, *m, *n);
                    acc(&mut lower[b.0], gb.into_iter());
                }
            }
            Op::MatMulNT { a, b, m, k, n } => {
                if !lower[a.0].is_empty() {
                    let ga = kernel::matmul_nn(g, val(*b), *m, *n, *k);
                    acc(&mut lower[a.0], ga.into_iter());
                }
                if !lower[b.0].is_empty() {
                    let gb = kernel::matmul_tn(g, val(*a), *n, *m, *k);
                    acc(&mut lower[b.0], gb.into_iter());
                }
            }
            Op::LayerNormRows { x, gain, bias, xhat, inv_std } => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                let gain_v = val(*gain);
                let inv_n = T::ONE / T::from_f64(n as f64);
                if !lower[x.0].is_empty() {
                    let dst = &mut lower[x.0];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for j in 0..n {
                            let dh = grow[j] * gain_v[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        s1 *= inv_n;
                        s2 *= inv_n;
                        for j in 0..n {
                            let dh = grow[j] * gain_v[j];
                            dst[r * n + j] += inv_std[r] * (dh - s1 - hrow[j] * s2);
                        }
                    }
                }
                if !lower[gain.0].is_empty() {
                    let dst = &mut lower[gain.0];
                    for r in 0..m {
                        for j in 0..n {
                            dst[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if !lower[bias.0].is_empty() {
                    let dst = &mut lower[bias.0];
                    for r in 0..m {
                        for j in 0..n {
                            dst[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if !lower[a.0].is_empty() {
                    let av = val(*a);
                    acc(
                        &mut lower[a.0],
                        g.iter().zip(av).map(|(&gi, &x)| gi * kernel::gelu_prime(x)),
                    );
                }
            }
            Op::SoftmaxCausal { a } => {
                if !lower[a.0].is_empty() {
                    let y = self.nodes[i].value.data();
                    let t = self.nodes[i].value.rows();
                    let dst = &mut lower[a.0];
                    for r in 0..t {
                        let limit = r + 1;
                        let yrow = &y[r * t..r * t + limit];
                        let grow = &g[r * t..r * t + limit];
                        let mut s = T::ZERO;
                        for j in 0..limit {
                            s += grow[j] * yrow[j];
                        }
                        for j in 0..limit {
                            dst[r * t + j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if !lower[a.0].is_empty() {
                    let y = self.nodes[i].value.data();
                    let (m, n) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    let dst = &mut lower[a.0];
                    for r in 0..m {
                        let yrow = &y[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let mut s = T::ZERO;
                        for j in 0..n {
                            s += grow[j] * yrow[j];
                        }
                        for j in 0..n {
                            dst[r * n + j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::SliceCols { a, start, width } => {
                if !lower[a.0].is_empty() {
                    let n = shape(*a)[1];
                    let m = shape(*a)[0];
                    let dst = &mut lower[a.0];
                    for r in 0..m {
                        for j in 0..*width {
                            dst[r * n + start + j] += g[r * width + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let np = shape(p)[1];
                    if !lower[p.0].is_empty() {
                        let dst = &mut lower[p.0];
                        for r in 0..m {
                            for j in 0..np {
                                dst[r * np + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += np;
                }
            }
            Op::ConcatRows { parts } => {
                let n = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let mp = shape(p)[0];
                    if !lower[p.0].is_empty() {
                        acc(&mut lower[p.0], g[offset * n..(offset + mp) * n].iter().copied());
                    }
                    offset += mp;
                }
            }
            Op::SelectRows { a, rows } => {
                if !lower[a.0].is_empty() {
                    let n = shape(*a)[1];
                    let dst = &mut lower[a.0];
                    for (r, &src_row) in rows.iter().enumerate() {
                        for j in 0..n {
                            dst[src_row * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::MeanRows { a } => {
                if !lower[a.0].is_empty() {
                    let (m, n) = (shape(*a)[0], shape(*a)[1]);
                    let inv_m = T::ONE / T::from_f64(m as f64);
                    let dst = &mut lower[a.0];
                    for r in 0..m {
                        for j in 0..n {
                            dst[r * n + j] += g[j] * inv_m;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if !lower[a.0].is_empty() {
                    let g0 = g[0];
                    let len = lower[a.0].len();
                    acc(&mut lower[a.0], std::iter::repeat(g0).take(len));
                }
            }
            Op::MeanAll { a } => {
                if !lower[a.0].is_empty() {
                    let len = lower[a.0].len();
                    let gm = g[0] / T::from_f64(len as f64);
                    acc(&mut lower[a.0], std::iter::repeat(gm).take(len));
                }
            }
            Op::Exp { a } => {
                if !lower[a.0].is_empty() {
                    let y = self.nodes[i].value.data();
                    acc(&mut lower[a.0], g.iter().zip(y).map(|(&gi, &yi)| gi * yi));
                }
            }
            Op::Clamp { a, lo, hi } => {
                if !lower[a.0].is_empty() {
                    let av = val(*a);
                    acc(
                        &mut lower[a.0],
                        g.iter().zip(av).map(|(&gi, &x)| {
                            if x >= *lo && x <= *hi {
                                gi
                            } else {
                                T::ZERO
                            }
                        }),
                    );
                }
            }
            Op::MinElem { a, b } => {
                let av = val(*a);
                let bv = val(*b);
                if !lower[a.0].is_empty() {
                    acc(
                        &mut lower[a.0],
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&gi, (&x, &y))| if x <= y { gi } else { T::ZERO }),
                    );
                }
                if !lower[b.0].is_empty() {
                    acc(
                        &mut lower[b.0],
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&gi, (&x, &y))| if x <= y { T::ZERO } else { gi }),
                    );
                }
            }
            Op::Square { a } => {
                if !lower[a.0].is_empty() {
                    let two = T::from_f64(2.0);
                    let av = val(*a);
                    acc(&mut lower[a.0], g.iter().zip(av).map(|(&gi, &x)| two * x * gi));
                }
            }
            Op::GatherLogProbs { logits, targets, probs } => {
                if !lower[logits.0].is_empty() {
                    let vocab = shape(*logits)[1];
                    let dst = &mut lower[logits.0];
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        let base = r * vocab;
                        for j in 0..vocab {
                            let indicator = if j == t as usize { T::ONE } else { T::ZERO };
                            dst[base + j] += gr * (indicator - probs[base + j]);
                        }
                    }
                }
            }
            Op::BceWithLogits { logit, labels } => {
                if !lower[logit.0].is_empty() {
                    let xv = val(*logit);
                    acc(
                        &mut lower[logit.0],
                        g.iter()
                            .zip(xv.iter().zip(labels))
                            .map(|(&gi, (&x, &y))| gi * (kernel::sigmoid(x) - y)),
                    );
                }
            }
        }
    }
}
