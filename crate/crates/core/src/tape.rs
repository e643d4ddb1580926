//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! Every node holds an `Array2<f64>` (rows are batch entries). A fresh tape
//! is built per loss evaluation; `backward` returns gradients for every node
//! that requires them. The op set is exactly what the training losses need:
//! dense layers, pointwise nonlinearities, Gaussian KL algebra, per-row
//! scaling for diffusion coefficients, and stop-gradient.

use ndarray::{Array1, Array2, Axis};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// Broadcast-add a 1 x m bias to every row of an n x m matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Neg(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    /// Multiply row i by the constant weight w[i].
    RowScale(NodeId, Array1<f64>),
    /// (n, m) -> (n, 1), sum over columns.
    SumCols(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    StopGrad(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[bias].value.nrows(), 1);
        let v = &self.nodes[a].value + &self.nodes[bias].value;
        let rg = self.rg(a) || self.rg(bias);
        self.push(v, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a, c), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn row_scale(&mut self, a: NodeId, w: Array1<f64>) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.nrows(), w.len());
        let mut v = self.nodes[a].value.clone();
        for (mut row, &c) in v.rows_mut().into_iter().zip(w.iter()) {
            row.mapv_inplace(|x| x * c);
        }
        let rg = self.rg(a);
        self.push(v, Op::RowScale(a, w), rg)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum_axis(Axis(1));
        let n = s.len();
        let v = s.into_shape_with_order((n, 1)).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let arr = &self.nodes[a].value;
        let v = Array2::from_elem((1, 1), arr.sum() / arr.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut at = 0;
        for &p in parts {
            let part = &self.nodes[p].value;
            assert_eq!(part.nrows(), n, "concat_cols: row mismatch");
            v.slice_mut(ndarray::s![.., at..at + part.ncols()])
                .assign(part);
            at += part.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    /// Identity in value; blocks all gradient flow through this edge.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(v, Op::StopGrad(a), false)
    }

    // Compound helpers built from primitive ops.

    /// Elementwise minimum: a - relu(a - b).
    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let r = self.relu(d);
        self.sub(a, r)
    }

    /// Squared L2 norm of each row: (n, m) -> (n, 1).
    pub fn row_sq_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        self.sum_cols(sq)
    }

    /// L2 norm of each row with a small floor inside the root for a finite
    /// gradient at zero: sqrt(sum x^2 + eps).
    pub fn row_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let sq = self.row_sq_norm(a);
        let shifted = self.add_scalar(sq, eps);
        self.sqrt(shifted)
    }

    /// Reverse pass from a scalar (1x1) loss node. Returns per-node gradients;
    /// entries are `None` for nodes that do not require gradients.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Array2<f64>>> {
        assert_eq!(
            self.nodes[loss].value.dim(),
            (1, 1),
            "backward() expects a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss].requires_grad {
            return grads;
        }
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf | Op::Const => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    self.accum(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    let ng = g.mapv(|x| -x);
                    self.accum(&mut grads, *b, &ng);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    self.accum(&mut grads, *a, &ga);
                    self.accum(&mut grads, *b, &gb);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.nodes[*b].value.t());
                        self.accum(&mut grads, *a, &ga);
                    }
                    if self.rg(*b) {
                        let gb = self.nodes[*a].value.t().dot(&g);
                        self.accum(&mut grads, *b, &gb);
                    }
                }
                Op::AddRow(a, bias) => {
                    self.accum(&mut grads, *a, &g);
                    if self.rg(*bias) {
                        let s = g.sum_axis(Axis(0));
                        let m = s.len();
                        let gb = s.into_shape_with_order((1, m)).unwrap();
                        self.accum(&mut grads, *bias, &gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = g.mapv(|x| x * c);
                    self.accum(&mut grads, *a, &ga);
                }
                Op::AddScalar(a, _) => {
                    self.accum(&mut grads, *a, &g);
                }
                Op::Neg(a) => {
                    let ga = g.mapv(|x| -x);
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let ga = &g * &y.mapv(|t| 1.0 - t * t);
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let ga = &g * &mask;
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[id].value;
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Ln(a) => {
                    let ga = &g / &self.nodes[*a].value;
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[id].value;
                    let ga = &g * &y.mapv(|v| 0.5 / v.max(1e-150));
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = &g * &x.mapv(|v| 2.0 * v);
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    let mask = x.mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                    let ga = &g * &mask;
                    self.accum(&mut grads, *a, &ga);
                }
                Op::RowScale(a, w) => {
                    let mut ga = g.clone();
                    for (mut row, &c) in ga.rows_mut().into_iter().zip(w.iter()) {
                        row.mapv_inplace(|x| x * c);
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::SumCols(a) => {
                    let (n, m) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((n, m));
                    for i in 0..n {
                        let gi = g[[i, 0]];
                        ga.row_mut(i).fill(gi);
                    }
                    self.accum(&mut grads, *a, &ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                    self.accum(&mut grads, *a, &ga);
                }
                Op::MeanAll(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let c = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    let ga = Array2::from_elem(dim, c);
                    self.accum(&mut grads, *a, &ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.rg(p) {
                            let gp = g.slice(ndarray::s![.., at..at + w]).to_owned();
                            self.accum(&mut grads, p, &gp);
                        }
                        at += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (n, m) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((n, m));
                    ga.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    self.accum(&mut grads, *a, &ga);
                }
                Op::StopGrad(_) => {}
            }
            grads[id] = Some(g);
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, g: &Array2<f64>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences against backward() for a composite graph.
    fn fd_check<F>(x0: Array2<f64>, f: F)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let loss = f(&mut t, x);
        let grads = t.backward(loss);
        let g = grads[x].as_ref().expect("grad missing").clone();

        let eps = 1e-5;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut xp = x0.clone();
                xp[[i, j]] += eps;
                let mut tp = Tape::new();
                let n = tp.leaf(xp);
                let lp = f(&mut tp, n);
                let fp = tp.scalar(lp);

                let mut xm = x0.clone();
                xm[[i, j]] -= eps;
                let mut tm = Tape::new();
                let n = tm.leaf(xm);
                let lm = f(&mut tm, n);
                let fm = tm.scalar(lm);

                let fd = (fp - fm) / (2.0 * eps);
                let rel = (g[[i, j]] - fd).abs() / fd.abs().max(1e-6);
                assert!(
                    rel < 1e-5,
                    "grad mismatch at ({i},{j}): backprop {} vs fd {fd}",
                    g[[i, j]]
                );
            }
        }
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];
        fd_check(x0, |t, x| {
            let w = t.constant(array![[0.5, -1.0], [2.0, 0.3], [-0.7, 0.8]]);
            let h = t.matmul(x, w);
            let h = t.tanh(h);
            let e = t.exp(h);
            let s = t.square(e);
            let n = t.row_norm(s, 1e-12);
            t.mean_all(n)
        });
    }

    #[test]
    fn row_scale_and_slice_match_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1, 0.2], [0.9, 0.2, -0.4, -1.3]];
        fd_check(x0, |t, x| {
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_cols(x, 2, 4);
            let w = Array1::from(vec![0.3, 1.7]);
            let a = t.row_scale(a, w);
            let c = t.concat_cols(&[a, b]);
            let c = t.relu(c);
            t.mean_all(c)
        });
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let sg = t.stop_grad(x);
        let y = t.mul(x, sg); // d/dx (x * const) = const
        let loss = t.sum_all(y);
        let grads = t.backward(loss);
        let g = grads[x].as_ref().unwrap();
        assert_eq!(g, &array![[1.0, 2.0]]);
    }

    #[test]
    fn min_matches_elementwise_minimum() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, -2.0, 3.0]]);
        let b = t.constant(array![[0.5, 0.0, 4.0]]);
        let m = t.min(a, b);
        assert_eq!(t.value(m), &array![[0.5, -2.0, 3.0]]);
    }

    #[test]
    fn matmul_gradients_for_both_sides() {
        let a0 = array![[0.2, -0.5], [1.0, 0.7]];
        fd_check(a0, |t, a| {
            let b = t.constant(array![[0.3, 0.9], [-1.1, 0.4]]);
            let c = t.matmul(a, b);
            let d = t.matmul(b, a);
            let s = t.add(c, d);
            t.mean_all(s)
        });
    }
}
