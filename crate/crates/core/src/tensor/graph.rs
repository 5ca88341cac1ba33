use super::{gemm_into, Scalar, Tensor, TensorError, MASK_NEG};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Append-only computation tape. Nodes are stored in creation order, which
/// is a topological order, so backward is a single reverse sweep.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
    masked_row_warnings: usize,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            masked_row_warnings: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of softmax rows that had every entry masked.
    pub fn masked_row_warnings(&self) -> usize {
        self.masked_row_warnings
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears leaf gradients and re-arms [`Graph::backward`].
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.expect_rank2(op)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Matrix product `a·b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product against a transposed right operand, `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var, TensorError> {
        let op = if b_t { "matmul_nt" } else { "matmul" };
        let (m, k) = self.rank2(a, op)?;
        let (br, bc) = self.rank2(b, op)?;
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(self.mismatch(op, a, b));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_t,
            &mut out,
            (m, k, n),
            F::zero(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, b_t },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds the vector `bias` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.rank2(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(self.mismatch("add_row", x, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (d, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *d += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, factor), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with learned gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.rank2(x, "layer_norm")?;
        if self.value(gain).numel() != n {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).numel() != n {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let eps = F::from_f64_lossy(1e-5);
        let nf = F::from_usize(n).expect("dim fits");
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.rank2(table, "embedding")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let (m, _) = self.rank2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.rank2(p, "concat_cols")?;
            if pm != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![F::zero(); m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * n + offset..r * n + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let (_, n) = self.rank2(first, "concat_rows")?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.rank2(p, "concat_rows")?;
            if pn != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            m += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.rank2(x, "slice_cols")?;
        if start > end || end > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: n,
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![m, w], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.rank2(x, "slice_rows")?;
        if start > end || end > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: m,
            });
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![end - start, n], out)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Row-wise softmax of `x + mask`. `mask` entries are `0` or
    /// [`MASK_NEG`]. A row whose every entry is masked yields all zeros and
    /// is counted in [`Graph::masked_row_warnings`].
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<F>>) -> Result<Var, TensorError> {
        let (m, n) = self.rank2(x, "softmax_rows")?;
        if let Some(mask) = mask {
            if mask.shape() != [m, n] {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: vec![m, n],
                    rhs: mask.shape().to_vec(),
                });
            }
        }
        let half_neg = F::from_f64_lossy(MASK_NEG * 0.5);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); m * n];
        let mut warnings = 0;
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mrow = mask.map(|t| &t.data()[r * n..(r + 1) * n]);
            if n > 0 {
                if let Some(mrow) = mrow {
                    if mrow.iter().all(|&v| v <= half_neg) {
                        warnings += 1;
                        continue;
                    }
                }
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut max = F::neg_infinity();
            for c in 0..n {
                let v = row[c] + mrow.map_or(F::zero(), |mr| mr[c]);
                dst[c] = v;
                if v > max {
                    max = v;
                }
            }
            let mut total = F::zero();
            for v in dst.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in dst.iter_mut() {
                *v = *v / total;
            }
        }
        if warnings > 0 {
            log::warn!("softmax_rows: {warnings} row(s) fully masked, emitted zeros");
            self.masked_row_warnings += warnings;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over the rows where `loss_mask` is true.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        loss_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (t, v) = self.rank2(logits, "cross_entropy")?;
        if targets.len() != t || loss_mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), loss_mask.len()],
            });
        }
        let rows: Vec<usize> = (0..t).filter(|&i| loss_mask[i]).collect();
        if rows.is_empty() {
            return Err(TensorError::NoSupervisedPositions);
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); rows.len() * v];
        let mut row_targets = Vec::with_capacity(rows.len());
        let mut total = 0.0f64;
        for (k, &r) in rows.iter().enumerate() {
            let target = targets[r];
            if target >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: v,
                });
            }
            row_targets.push(target);
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let p = &mut probs[k * v..(k + 1) * v];
            let mut z = F::zero();
            for (pv, &lv) in p.iter_mut().zip(row) {
                *pv = (lv - max).exp();
                z += *pv;
            }
            for pv in p.iter_mut() {
                *pv = *pv / z;
            }
            let nll = (max + z.ln() - row[target]).to_f64_lossy();
            total += nll;
        }
        let loss = F::from_f64_lossy(total / rows.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                targets: row_targets,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients on every
    /// leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += *v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Accumulates into a parent's gradient buffer if the parent needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = dims2(&nodes[a.0].value);
                let n = node.value.cols();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |da| {
                    // dA = dC·Bᵀ  (or dC·B when B was used transposed)
                    gemm_into(g, false, bv, !*b_t, da, (m, n, k), F::one());
                });
                acc(*b, &mut |db| {
                    if *b_t {
                        // dB (n×k) = dCᵀ·A
                        gemm_into(g, true, av, false, db, (n, m, k), F::one());
                    } else {
                        // dB (k×n) = Aᵀ·dC
                        gemm_into(av, true, g, false, db, (k, m, n), F::one());
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let n = node.value.cols();
                acc(*bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |da| {
                    for ((d, &gv), &bvv) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bvv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gv), &avv) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * avv;
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gv = nodes[gain.0].value.data();
                let nf = F::from_usize(n).expect("dim fits");
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![F::zero(); n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..n {
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for c in 0..n {
                            dx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(&node.value);
                acc(*x, &mut |dx| {
                    // output is m×n, input n×m
                    for i in 0..m {
                        for j in 0..n {
                            dx[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = dims2(&node.value);
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |dp| {
                        for r in 0..m {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * n + offset..r * n + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = dims2(&node.value);
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |dx| {
                    for r in 0..m {
                        add_into(
                            &mut dx[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                let len = node.value.numel();
                acc(*x, &mut |dx| {
                    add_into(&mut dx[start * n..start * n + len], g);
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = dims2(&node.value);
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / F::from_usize(rows.len()).expect("count fits");
                acc(*logits, &mut |dl| {
                    for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let dst = &mut dl[r * v..(r + 1) * v];
                        for (d, &pv) in dst.iter_mut().zip(p) {
                            *d += scale * pv;
                        }
                        dst[t] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g0;
                    }
                });
            }
        }
    }
}

fn dims2<F: Scalar>(t: &Tensor<F>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}
