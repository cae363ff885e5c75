//! Reverse-mode automatic differentiation over 2-D double-precision arrays.
//!
//! Every value is an `Array2<f64>`: scalars are 1x1, row vectors 1xN. Ops
//! build a dynamic graph of reference-counted nodes; [`Tensor::backward`]
//! walks it in reverse topological order and accumulates gradients into the
//! leaves. A graph lives on the thread that built it; parameter values are
//! shared across threads behind `Arc`, so independent forward/backward
//! passes can run in parallel on snapshots of the same parameters.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, Zip};

/// Contribution of an op to its parents' gradients: given the upstream
/// gradient, return one optional gradient per parent (None for parents that
/// do not require grad).
type GradFn = Box<dyn Fn(&Array2<f64>) -> Vec<Option<Array2<f64>>>>;

struct Node {
    values: Arc<Array2<f64>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
    grad: RefCell<Option<Array2<f64>>>,
}

impl Drop for Node {
    // Default recursive drop of the parent chain overflows the stack on
    // long recurrences (one GRU step per frame); unlink iteratively.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.node) {
                stack.extend(std::mem::take(&mut node.parents));
            }
        }
    }
}

/// Handle to a node in the computation graph. Cloning is cheap and shares
/// the node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Trainable leaf. Gradients accumulate here across backward calls.
    pub fn leaf(values: Arc<Array2<f64>>) -> Self {
        Tensor {
            node: Rc::new(Node {
                values,
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: true,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Non-trainable input (data, noise, positional encodings).
    pub fn constant(values: Array2<f64>) -> Self {
        Tensor::constant_shared(Arc::new(values))
    }

    /// Non-trainable input sharing an existing allocation.
    pub fn constant_shared(values: Arc<Array2<f64>>) -> Self {
        Tensor {
            node: Rc::new(Node {
                values,
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: false,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::constant(Array2::zeros((rows, cols)))
    }

    fn from_op(values: Array2<f64>, parents: Vec<Tensor>, grad_fn: GradFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                values: Arc::new(values),
                grad_fn: if requires_grad { Some(grad_fn) } else { None },
                // Without gradients there is nothing to walk; dropping the
                // parent links lets inference free intermediates eagerly.
                parents: if requires_grad { parents } else { Vec::new() },
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.node.values
    }

    pub fn values_arc(&self) -> Arc<Array2<f64>> {
        Arc::clone(&self.node.values)
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.node.values.dim();
        (d.0, d.1)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Extract the value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() requires a 1x1 tensor");
        self.node.values[(0, 0)]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Gradient accumulated by backward passes, if any.
    pub fn grad(&self) -> Option<Array2<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: Array2<f64>) {
        debug_assert_eq!(g.dim(), self.node.values.dim(), "gradient shape mismatch");
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode pass from a scalar output. Gradients accumulate into
    /// every reachable leaf with `requires_grad`; interior gradients are
    /// dropped as soon as they have been propagated.
    pub fn backward(&self) {
        assert_eq!(self.shape(), (1, 1), "backward() requires a scalar loss");
        if !self.node.requires_grad {
            return;
        }
        let order = topo_order(self);
        self.accumulate_grad(Array2::ones((1, 1)));
        for t in order.iter().rev() {
            if t.node.grad_fn.is_none() {
                continue; // leaf or constant: keep accumulated grad
            }
            let upstream = t.node.grad.borrow_mut().take();
            let Some(upstream) = upstream else { continue };
            let grad_fn = t.node.grad_fn.as_ref().unwrap();
            let contributions = grad_fn(&upstream);
            debug_assert_eq!(contributions.len(), t.node.parents.len());
            for (parent, contrib) in t.node.parents.iter().zip(contributions) {
                if let Some(c) = contrib {
                    if parent.node.requires_grad {
                        parent.accumulate_grad(c);
                    }
                }
            }
        }
    }
}

/// Iterative post-order over the reachable graph (recursion would overflow
/// on long recurrent chains).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    if visited.insert(Rc::as_ptr(&root.node)) {
        stack.push((root.clone(), 0));
    }
    while let Some((t, child_idx)) = stack.pop() {
        if child_idx < t.node.parents.len() {
            let child = t.node.parents[child_idx].clone();
            stack.push((t, child_idx + 1));
            if child.node.requires_grad && visited.insert(Rc::as_ptr(&child.node)) {
                stack.push((child, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "add");
        let values = self.values() + other.values();
        Tensor::from_op(values, vec![self.clone(), other.clone()], Box::new(|g| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "sub");
        let values = self.values() - other.values();
        Tensor::from_op(values, vec![self.clone(), other.clone()], Box::new(|g| {
            vec![Some(g.clone()), Some(-g)]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "mul");
        let values = self.values() * other.values();
        let a = self.values_arc();
        let b = other.values_arc();
        Tensor::from_op(values, vec![self.clone(), other.clone()], Box::new(move |g| {
            vec![Some(g * &*b), Some(g * &*a)]
        }))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "div");
        let values = self.values() / other.values();
        let a = self.values_arc();
        let b = other.values_arc();
        Tensor::from_op(values, vec![self.clone(), other.clone()], Box::new(move |g| {
            let da = g / &*b;
            let db = -(g * &*a) / (&*b * &*b);
            vec![Some(da), Some(db)]
        }))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values() * c;
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| vec![Some(g * c)]))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let values = self.values() + c;
        Tensor::from_op(values, vec![self.clone()], Box::new(|g| vec![Some(g.clone())]))
    }

    pub fn exp(&self) -> Tensor {
        let values = self.values().mapv(f64::exp);
        let y = Arc::new(values.clone());
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            vec![Some(g * &*y)]
        }))
    }

    pub fn ln(&self) -> Tensor {
        let values = self.values().mapv(f64::ln);
        let x = self.values_arc();
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| vec![Some(g / &*x)]))
    }

    pub fn sqrt(&self) -> Tensor {
        let values = self.values().mapv(f64::sqrt);
        let y = Arc::new(values.clone());
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            vec![Some(g / (&*y * 2.0))]
        }))
    }

    pub fn sigmoid(&self) -> Tensor {
        let values = self.values().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = Arc::new(values.clone());
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            vec![Some(g * &y.mapv(|v| v * (1.0 - v)))]
        }))
    }

    pub fn tanh(&self) -> Tensor {
        let values = self.values().mapv(f64::tanh);
        let y = Arc::new(values.clone());
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            vec![Some(g * &y.mapv(|v| 1.0 - v * v))]
        }))
    }

    pub fn relu(&self) -> Tensor {
        let values = self.values().mapv(|v| v.max(0.0));
        let x = self.values_arc();
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*x).for_each(|gd, &xv| {
                if xv <= 0.0 {
                    *gd = 0.0;
                }
            });
            vec![Some(d)]
        }))
    }

    /// Elementwise clamp. Gradient is 1 strictly inside the interval, 0 at
    /// and beyond the saturation points.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo < hi);
        let values = self.values().mapv(|v| v.clamp(lo, hi));
        let x = self.values_arc();
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*x).for_each(|gd, &xv| {
                if xv <= lo || xv >= hi {
                    *gd = 0.0;
                }
            });
            vec![Some(d)]
        }))
    }
}

// ---------------------------------------------------------------------------
// Broadcasting (row vector over rows, column vector over columns)
// ---------------------------------------------------------------------------

impl Tensor {
    /// `self (n x d)` + `row (1 x d)` broadcast to every row.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        assert_eq!(row.rows(), 1, "add_row: rhs must be 1 x d");
        assert_eq!(self.cols(), row.cols(), "add_row: width mismatch");
        let values = self.values() + &row.values().row(0);
        Tensor::from_op(values, vec![self.clone(), row.clone()], Box::new(|g| {
            let col_sum = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            vec![Some(g.clone()), Some(col_sum)]
        }))
    }

    /// `self (n x d)` * `row (1 x d)` broadcast to every row.
    pub fn mul_row(&self, row: &Tensor) -> Tensor {
        assert_eq!(row.rows(), 1, "mul_row: rhs must be 1 x d");
        assert_eq!(self.cols(), row.cols(), "mul_row: width mismatch");
        let values = self.values() * &row.values().row(0);
        let a = self.values_arc();
        let r = row.values_arc();
        Tensor::from_op(values, vec![self.clone(), row.clone()], Box::new(move |g| {
            let da = g * &r.row(0);
            let dr = (g * &*a)
                .sum_axis(ndarray::Axis(0))
                .insert_axis(ndarray::Axis(0));
            vec![Some(da), Some(dr)]
        }))
    }

    /// `self (n x d)` - `col (n x 1)` broadcast across columns.
    pub fn sub_col(&self, col: &Tensor) -> Tensor {
        assert_eq!(col.cols(), 1, "sub_col: rhs must be n x 1");
        assert_eq!(self.rows(), col.rows(), "sub_col: height mismatch");
        let values = self.values() - &col.values().column(0).insert_axis(ndarray::Axis(1));
        Tensor::from_op(values, vec![self.clone(), col.clone()], Box::new(|g| {
            let row_sum = -g.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
            vec![Some(g.clone()), Some(row_sum)]
        }))
    }

    /// `self (n x d)` / `col (n x 1)` broadcast across columns.
    pub fn div_col(&self, col: &Tensor) -> Tensor {
        assert_eq!(col.cols(), 1, "div_col: rhs must be n x 1");
        assert_eq!(self.rows(), col.rows(), "div_col: height mismatch");
        let c = col.values_arc();
        let a = self.values_arc();
        let values = self.values() / &c.column(0).insert_axis(ndarray::Axis(1));
        Tensor::from_op(values, vec![self.clone(), col.clone()], Box::new(move |g| {
            let cv = c.column(0).insert_axis(ndarray::Axis(1));
            let da = g / &cv;
            let dc = -(g * &*a / (&cv * &cv))
                .sum_axis(ndarray::Axis(1))
                .insert_axis(ndarray::Axis(1));
            vec![Some(da), Some(dc)]
        }))
    }

    /// Replicate a `1 x d` row `n` times into an `n x d` matrix.
    pub fn repeat_row(&self, n: usize) -> Tensor {
        assert_eq!(self.rows(), 1, "repeat_row: input must be 1 x d");
        let d = self.cols();
        let mut values = Array2::zeros((n, d));
        for mut r in values.rows_mut() {
            r.assign(&self.values().row(0));
        }
        Tensor::from_op(values, vec![self.clone()], Box::new(|g| {
            vec![Some(g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)))]
        }))
    }
}

// ---------------------------------------------------------------------------
// Reductions, linear algebra, shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let total = self.values().sum();
        let shape = self.shape();
        Tensor::from_op(
            Array2::from_elem((1, 1), total),
            vec![self.clone()],
            Box::new(move |g| vec![Some(Array2::from_elem(shape, g[(0, 0)]))]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = (self.rows() * self.cols()) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Per-row mean over columns: `n x d` -> `n x 1`.
    pub fn mean_cols(&self) -> Tensor {
        let d = self.cols() as f64;
        let values = self
            .values()
            .mean_axis(ndarray::Axis(1))
            .expect("non-empty")
            .insert_axis(ndarray::Axis(1));
        let width = self.cols();
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            let mut out = Array2::zeros((g.dim().0, width));
            for (mut row, gv) in out.rows_mut().into_iter().zip(g.column(0)) {
                row.fill(gv / d);
            }
            vec![Some(out)]
        }))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols(), other.rows(), "matmul: inner dimension mismatch");
        let values = self.values().dot(other.values());
        let a = self.values_arc();
        let b = other.values_arc();
        Tensor::from_op(values, vec![self.clone(), other.clone()], Box::new(move |g| {
            let da = g.dot(&b.t());
            let db = a.t().dot(g);
            vec![Some(da), Some(db)]
        }))
    }

    pub fn transpose(&self) -> Tensor {
        let values = self.values().t().to_owned();
        Tensor::from_op(values, vec![self.clone()], Box::new(|g| {
            vec![Some(g.t().to_owned())]
        }))
    }

    /// Column-wise concatenation: `n x a` ++ `n x b` -> `n x (a+b)`.
    pub fn concat_cols(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows(), other.rows(), "concat_cols: height mismatch");
        let a_cols = self.cols();
        let values = ndarray::concatenate(
            ndarray::Axis(1),
            &[self.values().view(), other.values().view()],
        )
        .expect("concat_cols");
        Tensor::from_op(values, vec![self.clone(), other.clone()], Box::new(move |g| {
            let da = g.slice(s![.., ..a_cols]).to_owned();
            let db = g.slice(s![.., a_cols..]).to_owned();
            vec![Some(da), Some(db)]
        }))
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Tensor {
        assert!(from < to && to <= self.cols(), "slice_cols: bad range");
        let values = self.values().slice(s![.., from..to]).to_owned();
        let full = self.shape();
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            let mut out = Array2::zeros(full);
            out.slice_mut(s![.., from..to]).assign(g);
            vec![Some(out)]
        }))
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Tensor {
        assert!(from < to && to <= self.rows(), "slice_rows: bad range");
        let values = self.values().slice(s![from..to, ..]).to_owned();
        let full = self.shape();
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            let mut out = Array2::zeros(full);
            out.slice_mut(s![from..to, ..]).assign(g);
            vec![Some(out)]
        }))
    }

    /// Row-wise softmax restricted to `allowed` entries; disallowed entries
    /// are exactly zero in the output and receive zero gradient. Every row
    /// must have at least one allowed entry.
    pub fn masked_softmax_rows(&self, allowed: &Array2<bool>) -> Tensor {
        assert_eq!(
            self.shape(),
            (allowed.dim().0, allowed.dim().1),
            "masked_softmax_rows: mask shape mismatch"
        );
        let (n, d) = self.shape();
        let mut values = Array2::zeros((n, d));
        for r in 0..n {
            let row = self.values().row(r);
            assert!(
                allowed.row(r).iter().any(|&a| a),
                "masked_softmax_rows: empty mask row {r}"
            );
            let m = row
                .iter()
                .zip(allowed.row(r))
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..d {
                if allowed[(r, c)] {
                    let e = (row[c] - m).exp();
                    values[(r, c)] = e;
                    sum += e;
                }
            }
            for c in 0..d {
                values[(r, c)] /= sum;
            }
        }
        let y = Arc::new(values.clone());
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            // dx = y * (g - sum_j g_j y_j) per row; masked entries stay zero.
            let mut out = Array2::zeros(g.dim());
            for r in 0..g.dim().0 {
                let dot: f64 = g
                    .row(r)
                    .iter()
                    .zip(y.row(r).iter())
                    .map(|(&gv, &yv)| gv * yv)
                    .sum();
                for c in 0..g.dim().1 {
                    out[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                }
            }
            vec![Some(out)]
        }))
    }

    /// Shift rows down by one: row 0 becomes zero, row i takes row i-1, the
    /// last row is dropped. Realizes strict-past dependencies when paired
    /// with an inclusive causal mask.
    pub fn shift_down(&self) -> Tensor {
        let (n, d) = self.shape();
        let mut values = Array2::zeros((n, d));
        if n > 1 {
            values
                .slice_mut(s![1.., ..])
                .assign(&self.values().slice(s![..n - 1, ..]));
        }
        Tensor::from_op(values, vec![self.clone()], Box::new(move |g| {
            let mut out = Array2::zeros((n, d));
            if n > 1 {
                out.slice_mut(s![..n - 1, ..]).assign(&g.slice(s![1.., ..]));
            }
            vec![Some(out)]
        }))
    }
}
