use super::{Gradients, ParamId, ParamSet, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Transpose(Var),
    Softmax { input: Var, cols: usize },
    Embedding { table: Var, row: usize },
    Sum(Var),
    Dot(Var, Var),
    Max { input: Var, argmax: Vec<usize> },
    Nll { dist: Var, target: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    // Empty for parameter leaves; their values are read from the ParamSet.
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Probability floor inside `nll` so a vanishing target probability
/// yields a large finite loss instead of infinity.
pub const NLL_FLOOR: f64 = 1e-12;

/// Operation tape over a borrowed parameter set.
///
/// Nodes are appended in evaluation order, so the tape is always
/// topologically sorted and backward is a single reverse sweep.
pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("tensors have rank at most 2"),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf referring to a learned tensor. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Constant, false)
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.constant(Tensor::zeros(&[len]))
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("node shapes are consistent")
    }

    /// First element of a value; the value itself for scalars.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracks(v)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = match sa {
            [m, k] => (*m, *k),
            _ => return Err(self.shape_err("matmul", a, b)),
        };
        let (kb, n, out_shape) = match sb {
            [kb] => (*kb, 1, vec![m]),
            [kb, n] => (*kb, *n, vec![m, *n]),
            _ => return Err(self.shape_err("matmul", a, b)),
        };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &av[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &x) in row.iter().enumerate() {
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (d, &y) in dst.iter_mut().zip(brow) {
                    *d = *d + x * y;
                }
            }
        }
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(out_shape, out, Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(shape, out, op, rg))
    }

    /// Elementwise sum of equal shapes, or a `[m,n]` matrix plus an `[n]`
    /// vector broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if let ([m, n], [nb]) = (self.shape(a), self.shape(b)) {
            let (m, n) = (*m, *n);
            if n != *nb {
                return Err(self.shape_err("add", a, b));
            }
            let bv = self.value(b).to_vec();
            let out = self
                .value(a)
                .chunks(n)
                .flat_map(|row| row.iter().zip(&bv).map(|(&x, &y)| x + y))
                .collect();
            let rg = self.tracks(a) || self.tracks(b);
            return Ok(self.push(vec![m, n], out, Op::AddRow(a, b), rg));
        }
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = T::of(factor);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracks(a);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracks(a);
        self.push(shape, out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracks(a);
        self.push(shape, out, Op::Sigmoid(a), rg)
    }

    /// Joins scalars and vectors end to end into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() > 1 {
                return Err(TensorError::Invalid {
                    op: "concat",
                    reason: format!("expected vectors, got shape {:?}", self.shape(p)),
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.tracks(p));
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks vectors (one row each) and matrices (all their rows) of a
    /// common width into one matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(TensorError::Invalid {
                op: "stack",
                reason: "no rows".into(),
            });
        };
        let width = match self.shape(first) {
            [n] | [_, n] => *n,
            _ => return Err(self.shape_err("stack", first, first)),
        };
        let mut out = Vec::with_capacity(rows.len() * width);
        let mut count = 0;
        for &r in rows {
            count += match self.shape(r) {
                [n] if *n == width => 1,
                [m, n] if *n == width => *m,
                _ => return Err(self.shape_err("stack", first, r)),
            };
            out.extend_from_slice(self.value(r));
        }
        let rg = rows.iter().any(|&r| self.tracks(r));
        Ok(self.push(vec![count, width], out, Op::Stack(rows.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            _ => return Err(self.shape_err("transpose", a, a)),
        };
        let av = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.tracks(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// Row-wise softmax with masked entries set to exactly zero.
    ///
    /// `mask` has either one entry per column (shared by every row) or one
    /// entry per element. Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if shape.is_empty() || (mask.len() != cols && mask.len() != rows * cols) {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let keep = |r: usize, c: usize| {
            if mask.len() == cols {
                mask[c]
            } else {
                mask[r * cols + c]
            }
        };
        let av = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&c| keep(r, c))
                .map(|c| row[c])
                .fold(None, |m: Option<T>, x| Some(m.map_or(x, |m| m.max(x))))
                .ok_or(TensorError::AllMasked {
                    op: "masked_softmax",
                    row: r,
                })?;
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for c in 0..cols {
                if keep(r, c) {
                    dst[c] = (row[c] - max).exp();
                    total = total + dst[c];
                }
            }
            dst.iter_mut().for_each(|x| *x = *x / total);
        }
        let rg = self.tracks(a);
        Ok(self.push(shape, out, Op::Softmax { input: a, cols }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        self.masked_softmax(a, &vec![true; cols])
    }

    /// Row `id` of an embedding table.
    pub fn embedding(&mut self, table: Var, id: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(table) {
            [r, c] => (*r, *c),
            _ => return Err(self.shape_err("embedding", table, table)),
        };
        if id >= rows {
            return Err(TensorError::Index {
                op: "embedding",
                index: id,
                len: rows,
            });
        }
        let out = self.value(table)[id * cols..(id + 1) * cols].to_vec();
        let rg = self.tracks(table);
        Ok(self.push(vec![cols], out, Op::Embedding { table, row: id }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.tracks(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(self.shape_err("dot", a, b));
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .sum();
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(Vec::new(), vec![s], Op::Dot(a, b), rg))
    }

    /// Maximum along `axis`. A vector reduces to a scalar (axis 0); a
    /// matrix reduces over rows (axis 0, giving one value per column) or
    /// over columns (axis 1, one value per row). Ties go to the first index.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let av = self.value(a);
        let argmax_of = |idx: &mut dyn Iterator<Item = usize>| {
            let first = idx.next().expect("non-empty reduction");
            idx.fold(first, |best, i| if av[i] > av[best] { i } else { best })
        };
        let (out_shape, argmax): (Vec<usize>, Vec<usize>) = match (shape.as_slice(), axis) {
            ([n], 0) if *n > 0 => (Vec::new(), vec![argmax_of(&mut (0..*n))]),
            ([r, c], 0) if *r > 0 => (
                vec![*c],
                (0..*c)
                    .map(|j| argmax_of(&mut (0..*r).map(|i| i * c + j)))
                    .collect(),
            ),
            ([r, c], 1) if *c > 0 => (
                vec![*r],
                (0..*r)
                    .map(|i| argmax_of(&mut (i * c..(i + 1) * c)))
                    .collect(),
            ),
            _ => {
                return Err(TensorError::Invalid {
                    op: "max_over_axis",
                    reason: format!("axis {axis} invalid for shape {shape:?}"),
                })
            }
        };
        let out = argmax.iter().map(|&i| av[i]).collect();
        let rg = self.tracks(a);
        Ok(self.push(out_shape, out, Op::Max { input: a, argmax }, rg))
    }

    /// `-ln(max(p[target], 1e-12))` for a probability vector `p`.
    pub fn nll(&mut self, dist: Var, target: usize) -> Result<Var> {
        let len = match self.shape(dist) {
            [n] => *n,
            _ => return Err(self.shape_err("nll", dist, dist)),
        };
        if target >= len {
            return Err(TensorError::Index {
                op: "nll",
                index: target,
                len,
            });
        }
        let p = self.value(dist)[target].max(T::of(NLL_FLOOR));
        let rg = self.tracks(dist);
        Ok(self.push(Vec::new(), vec![-p.ln()], Op::Nll { dist, target }, rg))
    }

    /// Mean of a non-empty list of scalars.
    pub fn mean(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                reason: "no terms".into(),
            });
        }
        let joined = self.concat(scalars)?;
        let total = self.sum(joined);
        Ok(self.scale(total, 1.0 / scalars.len() as f64))
    }

    /// Fails if any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    /// Gradient of scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(loss, &mut out)?;
        Ok(out)
    }

    /// Like [`Graph::backward`] but adds into existing buffers, which is
    /// how gradients accumulate across the instances of a batch.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if out.len() != self.params.len() {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!(
                    "gradient buffer holds {} tensors, parameter set {}",
                    out.len(),
                    self.params.len()
                ),
            });
        }
        if !self.tracks(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        match self.nodes[loss.0].op {
            Op::Param(id) => {
                out.get_mut(id).data_mut()[0] = out.get(id).data()[0] + T::one();
                return Ok(());
            }
            _ => grads[loss.0] = Some(vec![T::one()]),
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(Var(i), &g, &mut grads, out);
        }
        Ok(())
    }

    /// Gradient buffer of `v`: the parameter's slot for leaves, a lazily
    /// allocated per-node buffer otherwise.
    fn slot<'a>(
        &self,
        v: Var,
        grads: &'a mut [Option<Vec<T>>],
        out: &'a mut Gradients<T>,
    ) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        match node.op {
            Op::Param(id) => Some(out.get_mut(id).data_mut()),
            _ => Some(
                grads[v.0]
                    .get_or_insert_with(|| vec![T::zero(); node.value.len()])
                    .as_mut_slice(),
            ),
        }
    }

    fn propagate(&self, v: Var, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        let node = &self.nodes[v.0];
        let y = &node.value;
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = rows_cols(self.shape(a));
                let n = if self.shape(b).len() == 1 {
                    1
                } else {
                    self.shape(b)[1]
                };
                if let Some(da) = self.slot(a, grads, out) {
                    let bv = self.value(b);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let s: T = gi.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            da[i * k + p] = da[i * k + p] + s;
                        }
                    }
                }
                if let Some(db) = self.slot(b, grads, out) {
                    let av = self.value(a);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            let dst = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in dst.iter_mut().zip(gi) {
                                *d = *d + x * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(v, grads, out) {
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.slot(*a, grads, out) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                }
                if let Some(db) = self.slot(*b, grads, out) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &gv)| *d = *d + gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(*a, grads, out) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                }
                if let Some(db) = self.slot(*b, grads, out) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = self.slot(a, grads, out) {
                    let bv = self.value(b);
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * x;
                    }
                }
                if let Some(db) = self.slot(b, grads, out) {
                    let av = self.value(a);
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.slot(*a, grads, out) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *c);
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.slot(*a, grads, out) {
                    for ((d, &gv), &t) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * (T::one() - t * t);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.slot(*a, grads, out) {
                    for ((d, &gv), &s) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * s * (T::one() - s);
                    }
                }
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape.iter().product::<usize>();
                    if let Some(d) = self.slot(p, grads, out) {
                        for (d, &gv) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *d = *d + gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.shape(*a));
                if let Some(d) = self.slot(*a, grads, out) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { input, cols } => {
                if let Some(d) = self.slot(*input, grads, out) {
                    for ((yr, gr), dr) in y
                        .chunks(*cols)
                        .zip(g.chunks(*cols))
                        .zip(d.chunks_mut(*cols))
                    {
                        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - inner);
                        }
                    }
                }
            }
            Op::Embedding { table, row } => {
                let cols = g.len();
                if let Some(d) = self.slot(*table, grads, out) {
                    let dst = &mut d[row * cols..(row + 1) * cols];
                    dst.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(*a, grads, out) {
                    d.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = self.slot(a, grads, out) {
                    let bv = self.value(b);
                    da.iter_mut().zip(bv).for_each(|(d, &x)| *d = *d + g[0] * x);
                }
                if let Some(db) = self.slot(b, grads, out) {
                    let av = self.value(a);
                    db.iter_mut().zip(av).for_each(|(d, &x)| *d = *d + g[0] * x);
                }
            }
            Op::Max { input, argmax } => {
                if let Some(d) = self.slot(*input, grads, out) {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        d[i] = d[i] + gv;
                    }
                }
            }
            Op::Nll { dist, target } => {
                let p = self.value(*dist)[*target];
                if let Some(d) = self.slot(*dist, grads, out) {
                    if p > T::of(NLL_FLOOR) {
                        d[*target] = d[*target] - g[0] / p;
                    }
                }
            }
        }
    }
}
