//! Reverse-mode automatic differentiation over dense 2-d matrices.
//!
//! Every [`Tensor`] is a reference-counted node in a dynamically built
//! computation graph: forward operations record their parents and a backward
//! closure, and [`Tensor::backward`] walks the graph in reverse topological
//! order accumulating gradients. Values are `f64` so that loss oracles and
//! finite-difference gradient checks can be held to tight tolerances.
//!
//! Design notes:
//! * Matrices are row-major `Vec<f64>` with shape (rows, cols). Scalars are
//!   1x1. Matrix multiplication dispatches to `matrixmultiply::dgemm`.
//! * Gradients accumulate: calling `backward` twice, or reusing a parameter
//!   in several subgraphs, sums contributions. Callers zero parameter
//!   gradients between optimizer steps.
//! * A thread-local guard ([`no_grad`]) disables graph construction, used for
//!   greedy decoding and evaluation where gradients are never needed.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// RAII guard that disables gradient tracking on the current thread.
pub struct NoGradGuard {
    prev: bool,
}

/// Disable graph construction until the returned guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

/// Backward closure: receives the node's output gradient and output data and
/// accumulates into the gradients of the parent tensors it captured.
type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

struct Inner {
    id: usize,
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the computation graph: a dense matrix plus autodiff bookkeeping.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.0.rows)
            .field("cols", &self.0.cols)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn make(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        let enabled = GRAD_ENABLED.with(|g| g.get());
        let requires = enabled && parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            rows,
            cols,
            data: RefCell::new(data),
            grad: RefCell::new(if requires { vec![0.0; rows * cols] } else { Vec::new() }),
            requires_grad: requires,
            parents: if requires { parents } else { Vec::new() },
            backward: if requires { backward } else { None },
        }))
    }

    /// Constant (non-trainable) tensor.
    pub fn constant(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::make(rows, cols, data, Vec::new(), None)
    }

    /// Trainable leaf tensor; always tracks gradients.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            rows,
            cols,
            data: RefCell::new(data),
            grad: RefCell::new(vec![0.0; rows * cols]),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Constant tensor of zeros.
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn len(&self) -> usize {
        self.0.rows * self.0.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn grad(&self) -> Ref<'_, Vec<f64>> {
        self.0.grad.borrow()
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.0.data.borrow()[0]
    }

    pub fn value_at(&self, r: usize, c: usize) -> f64 {
        self.0.data.borrow()[r * self.0.cols + c]
    }

    /// Copy of one row of the underlying data.
    pub fn row(&self, r: usize) -> Vec<f64> {
        let d = self.0.data.borrow();
        d[r * self.0.cols..(r + 1) * self.0.cols].to_vec()
    }

    pub fn zero_grad(&self) {
        for g in self.0.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    /// Multiply every accumulated gradient entry by `factor` (used for
    /// global-norm clipping).
    pub fn scale_grad(&self, factor: f64) {
        for g in self.0.grad.borrow_mut().iter_mut() {
            *g *= factor;
        }
    }

    fn accum_grad_with(&self, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if self.0.requires_grad {
            let mut grad = self.0.grad.borrow_mut();
            for (i, gi) in g.iter().enumerate() {
                grad[i] += f(i, *gi);
            }
        }
    }

    fn accum_grad(&self, g: &[f64]) {
        self.accum_grad_with(g, |_, v| v);
    }

    /// Run backpropagation from this scalar node, accumulating gradients into
    /// every reachable tensor with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar loss");
        assert!(
            self.0.requires_grad,
            "backward() on a tensor with no gradient path"
        );
        self.0.grad.borrow_mut()[0] += 1.0;
        let order = topo_order(self);
        for node in order.iter().rev() {
            if let Some(f) = &node.0.backward {
                let g = node.0.grad.borrow();
                let d = node.0.data.borrow();
                f(&g, &d);
            }
        }
    }

    // ------------------------------------------------------------------
    // Elementwise and broadcast operations
    // ------------------------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.rows(), self.cols()), (other.rows(), other.cols()), "add shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, _| {
                pa.accum_grad(g);
                pb.accum_grad(g);
            })),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.rows(), self.cols()), (other.rows(), other.cols()), "sub shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, _| {
                pa.accum_grad(g);
                pb.accum_grad_with(g, |_, v| -v);
            })),
        )
    }

    /// Add a 1xN bias row to every row of an MxN matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        assert_eq!(bias.rows(), 1, "bias must be a row vector");
        assert_eq!(bias.cols(), self.cols(), "bias width mismatch");
        let n = self.cols();
        let bd = bias.data().clone();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + bd[i % n])
            .collect();
        let (pa, pb) = (self.clone(), bias.clone());
        let rows = self.rows();
        Tensor::make(
            rows,
            n,
            data,
            vec![self.clone(), bias.clone()],
            Some(Box::new(move |g, _| {
                pa.accum_grad(g);
                if pb.0.requires_grad {
                    let mut grad = pb.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[c] += g[r * n + c];
                        }
                    }
                }
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        let pa = self.clone();
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g, _| pa.accum_grad_with(g, |_, v| v * c))),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a + c).collect();
        let pa = self.clone();
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g, _| pa.accum_grad(g))),
        )
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            (self.rows(), self.cols()),
            (other.rows(), other.cols()),
            "hadamard shape mismatch"
        );
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, _| {
                {
                    let bd = pb.0.data.borrow();
                    pa.accum_grad_with(g, |i, v| v * bd[i]);
                }
                let ad = pa.0.data.borrow();
                pb.accum_grad_with(g, |i, v| v * ad[i]);
            })),
        )
    }

    pub fn div_elem(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            (self.rows(), self.cols()),
            (other.rows(), other.cols()),
            "div shape mismatch"
        );
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a / b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, out| {
                {
                    let bd = pb.0.data.borrow();
                    pa.accum_grad_with(g, |i, v| v / bd[i]);
                }
                let bd = pb.0.data.borrow();
                pb.accum_grad_with(g, |i, v| -v * out[i] / bd[i]);
            })),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.max(0.0)).collect();
        let pa = self.clone();
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let ad = pa.0.data.borrow();
                pa.accum_grad_with(g, |i, v| if ad[i] > 0.0 { v } else { 0.0 });
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let pa = self.clone();
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                pa.accum_grad_with(g, |i, v| v * out[i] * (1.0 - out[i]));
            })),
        )
    }

    /// Elementwise sqrt(x + shift); `shift > 0` keeps the derivative finite
    /// at zero input.
    pub fn sqrt_shift(&self, shift: f64) -> Tensor {
        assert!(shift > 0.0, "sqrt_shift requires a positive shift");
        let data: Vec<f64> = self.data().iter().map(|a| (a + shift).sqrt()).collect();
        let pa = self.clone();
        Tensor::make(
            self.rows(),
            self.cols(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                pa.accum_grad_with(g, |i, v| v * 0.5 / out[i]);
            })),
        )
    }

    // ------------------------------------------------------------------
    // Matrix multiplication
    // ------------------------------------------------------------------

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_ex(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (m, k1) = if ta {
            (self.cols(), self.rows())
        } else {
            (self.rows(), self.cols())
        };
        let (k2, n) = if tb {
            (other.cols(), other.rows())
        } else {
            (other.rows(), other.cols())
        };
        assert_eq!(k1, k2, "matmul inner dimension mismatch: {k1} vs {k2}");
        let k = k1;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), ta, &other.data(), tb, 0.0, &mut out);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(
            m,
            n,
            out,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, _| {
                if pa.0.requires_grad {
                    let bd = pb.0.data.borrow();
                    let mut ga = pa.0.grad.borrow_mut();
                    if !ta {
                        // dA += G . B^T
                        gemm(m, n, k, g, false, &bd, !tb, 1.0, &mut ga);
                    } else {
                        // dA_phys = (G . B^T)^T = B . G^T
                        gemm(k, n, m, &bd, tb, g, true, 1.0, &mut ga);
                    }
                }
                if pb.0.requires_grad {
                    let ad = pa.0.data.borrow();
                    let mut gb = pb.0.grad.borrow_mut();
                    if !tb {
                        // dB += A^T . G
                        gemm(k, m, n, &ad, !ta, g, false, 1.0, &mut gb);
                    } else {
                        // dB_phys = (A^T . G)^T = G^T . A
                        gemm(n, m, k, g, true, &ad, ta, 1.0, &mut gb);
                    }
                }
            })),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_ex(other, false, false)
    }

    /// `self . other^T`, the common attention-score shape.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        self.matmul_ex(other, false, true)
    }

    // ------------------------------------------------------------------
    // Shape manipulation
    // ------------------------------------------------------------------

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor {
        assert!(r0 <= r1 && r1 <= self.rows(), "row slice out of bounds");
        let n = self.cols();
        let data = self.data()[r0 * n..r1 * n].to_vec();
        let pa = self.clone();
        Tensor::make(
            r1 - r0,
            n,
            data,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                if pa.0.requires_grad {
                    let mut grad = pa.0.grad.borrow_mut();
                    for (i, gi) in g.iter().enumerate() {
                        grad[r0 * n + i] += gi;
                    }
                }
            })),
        )
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor {
        assert!(c0 <= c1 && c1 <= self.cols(), "column slice out of bounds");
        let (rows, n) = (self.rows(), self.cols());
        let w = c1 - c0;
        let src = self.data();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * n + c0..r * n + c1]);
        }
        drop(src);
        let pa = self.clone();
        Tensor::make(
            rows,
            w,
            data,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                if pa.0.requires_grad {
                    let mut grad = pa.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..w {
                            grad[r * n + c0 + c] += g[r * w + c];
                        }
                    }
                }
            })),
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let n = parts[0].cols();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), n, "concat_rows width mismatch");
            offsets.push(rows);
            rows += p.rows();
            data.extend_from_slice(&p.data());
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        Tensor::make(
            rows,
            n,
            data,
            parts.to_vec(),
            Some(Box::new(move |g, _| {
                for (idx, p) in owned.iter().enumerate() {
                    let start = offsets[idx] * n;
                    let len = sizes[idx] * n;
                    p.accum_grad_with(&g[start..start + len], |_, v| v);
                }
            })),
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = parts[0].rows();
        let mut width = 0;
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(p.rows(), rows, "concat_cols height mismatch");
            offsets.push(width);
            width += p.cols();
        }
        let mut data = vec![0.0; rows * width];
        for (idx, p) in parts.iter().enumerate() {
            let pd = p.data();
            let w = p.cols();
            for r in 0..rows {
                data[r * width + offsets[idx]..r * width + offsets[idx] + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        Tensor::make(
            rows,
            width,
            data,
            parts.to_vec(),
            Some(Box::new(move |g, _| {
                for (idx, p) in owned.iter().enumerate() {
                    if !p.0.requires_grad {
                        continue;
                    }
                    let w = widths[idx];
                    let off = offsets[idx];
                    let mut grad = p.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..w {
                            grad[r * w + c] += g[r * width + off + c];
                        }
                    }
                }
            })),
        )
    }

    /// Gather rows of an embedding table: output row i is `table[ids[i]]`.
    pub fn gather_rows(&self, ids: &[u32]) -> Tensor {
        let d = self.cols();
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < self.rows(), "token id {id} outside embedding table");
            data.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        drop(table);
        let pa = self.clone();
        let ids: Vec<u32> = ids.to_vec();
        Tensor::make(
            ids.len(),
            d,
            data,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                if pa.0.requires_grad {
                    let mut grad = pa.0.grad.borrow_mut();
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for c in 0..d {
                            grad[id * d + c] += g[i * d + c];
                        }
                    }
                }
            })),
        )
    }

    // ------------------------------------------------------------------
    // Reductions and normalizations
    // ------------------------------------------------------------------

    pub fn row_sums(&self) -> Tensor {
        let (rows, n) = (self.rows(), self.cols());
        let src = self.data();
        let data: Vec<f64> = (0..rows).map(|r| src[r * n..(r + 1) * n].iter().sum()).collect();
        drop(src);
        let pa = self.clone();
        Tensor::make(
            rows,
            1,
            data,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                if pa.0.requires_grad {
                    let mut grad = pa.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[r * n + c] += g[r];
                        }
                    }
                }
            })),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::make(
            1,
            1,
            vec![total],
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                pa.accum_grad_with(&vec![g[0]; pa.len()], |_, v| v);
            })),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let len = self.len() as f64;
        let total: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::make(
            1,
            1,
            vec![total / len],
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                pa.accum_grad_with(&vec![g[0] / len; pa.len()], |_, v| v);
            })),
        )
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Tensor {
        let (rows, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..n {
                let e = (row[c] - m).exp();
                data[r * n + c] = e;
                sum += e;
            }
            for c in 0..n {
                data[r * n + c] /= sum;
            }
        }
        drop(src);
        let pa = self.clone();
        Tensor::make(
            rows,
            n,
            data,
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                if pa.0.requires_grad {
                    let mut grad = pa.0.grad.borrow_mut();
                    for r in 0..rows {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            grad[r * n + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
            })),
        )
    }

    /// Log-sum-exp over all elements (max-subtracted), producing a scalar.
    pub fn log_sum_exp(&self) -> Tensor {
        let src = self.data();
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = src.iter().map(|&x| (x - m).exp()).sum();
        let value = m + sum.ln();
        drop(src);
        let pa = self.clone();
        Tensor::make(
            1,
            1,
            vec![value],
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                if pa.0.requires_grad {
                    let lse = out[0];
                    let ad = pa.0.data.borrow();
                    let weights: Vec<f64> = ad.iter().map(|&x| (x - lse).exp()).collect();
                    drop(ad);
                    pa.accum_grad_with(&weights, |_, w| g[0] * w);
                }
            })),
        )
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of the
    /// logits, summed over rows. Rows whose target equals `ignore_id` are
    /// excluded. This is the fused softmax + cross-entropy used for the
    /// generation objective.
    pub fn nll_sum(&self, targets: &[u32], ignore_id: Option<u32>) -> Tensor {
        let (rows, v) = (self.rows(), self.cols());
        assert_eq!(targets.len(), rows, "one target per logit row required");
        let src = self.data();
        let mut lses = vec![0.0; rows];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + sum.ln();
            lses[r] = lse;
            if Some(t) == ignore_id {
                continue;
            }
            assert!((t as usize) < v, "target id {t} outside vocabulary of {v}");
            total += lse - row[t as usize];
        }
        drop(src);
        let pa = self.clone();
        let targets: Vec<u32> = targets.to_vec();
        Tensor::make(
            1,
            1,
            vec![total],
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                if pa.0.requires_grad {
                    let ad = pa.0.data.borrow();
                    let mut grad = pa.0.grad.borrow_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == ignore_id {
                            continue;
                        }
                        let row = &ad[r * v..(r + 1) * v];
                        for c in 0..v {
                            let p = (row[c] - lses[r]).exp();
                            let delta = if c == t as usize { 1.0 } else { 0.0 };
                            grad[r * v + c] += g[0] * (p - delta);
                        }
                    }
                }
            })),
        )
    }

    /// Row-wise layer normalization with learnable scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let (rows, n) = (self.rows(), self.cols());
        assert_eq!(gamma.cols(), n, "layer_norm gamma width mismatch");
        assert_eq!(beta.cols(), n, "layer_norm beta width mismatch");
        let src = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0; rows * n];
        let mut normalized = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..n {
                let xhat = (row[c] - mean) * istd;
                normalized[r * n + c] = xhat;
                data[r * n + c] = gd[c] * xhat + bd[c];
            }
        }
        drop(src);
        drop(gd);
        drop(bd);
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::make(
            rows,
            n,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g, _| {
                if pg.0.requires_grad {
                    let mut grad = pg.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[c] += g[r * n + c] * normalized[r * n + c];
                        }
                    }
                }
                if pb.0.requires_grad {
                    let mut grad = pb.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[c] += g[r * n + c];
                        }
                    }
                }
                if px.0.requires_grad {
                    let gd = pg.0.data.borrow();
                    let mut grad = px.0.grad.borrow_mut();
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &normalized[r * n..(r + 1) * n];
                        let mut mean_gg = 0.0;
                        let mut mean_ggx = 0.0;
                        for c in 0..n {
                            let gg = gr[c] * gd[c];
                            mean_gg += gg;
                            mean_ggx += gg * xh[c];
                        }
                        mean_gg /= n as f64;
                        mean_ggx /= n as f64;
                        for c in 0..n {
                            let gg = gr[c] * gd[c];
                            grad[r * n + c] += inv_std[r] * (gg - mean_gg - xh[c] * mean_ggx);
                        }
                    }
                }
            })),
        )
    }

    /// Batch normalization over the row (token) dimension using batch
    /// statistics; returns the output plus the per-column mean and biased
    /// variance so callers can maintain running averages.
    pub fn batch_norm_cols_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> (Tensor, Vec<f64>, Vec<f64>) {
        let (rows, n) = (self.rows(), self.cols());
        assert!(rows > 0, "batch norm requires at least one row");
        assert_eq!(gamma.cols(), n, "batch_norm gamma width mismatch");
        assert_eq!(beta.cols(), n, "batch_norm beta width mismatch");
        let src = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for r in 0..rows {
            for c in 0..n {
                mean[c] += src[r * n + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        for r in 0..rows {
            for c in 0..n {
                var[c] += (src[r * n + c] - mean[c]).powi(2);
            }
        }
        for v in var.iter_mut() {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = vec![0.0; rows * n];
        let mut normalized = vec![0.0; rows * n];
        for r in 0..rows {
            for c in 0..n {
                let xhat = (src[r * n + c] - mean[c]) * inv_std[c];
                normalized[r * n + c] = xhat;
                data[r * n + c] = gd[c] * xhat + bd[c];
            }
        }
        drop(src);
        drop(gd);
        drop(bd);
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        let inv_std_b = inv_std.clone();
        let normalized_b = normalized;
        let out = Tensor::make(
            rows,
            n,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g, _| {
                if pg.0.requires_grad {
                    let mut grad = pg.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[c] += g[r * n + c] * normalized_b[r * n + c];
                        }
                    }
                }
                if pb.0.requires_grad {
                    let mut grad = pb.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[c] += g[r * n + c];
                        }
                    }
                }
                if px.0.requires_grad {
                    let gd = pg.0.data.borrow();
                    let mut grad = px.0.grad.borrow_mut();
                    for c in 0..n {
                        let mut mean_gg = 0.0;
                        let mut mean_ggx = 0.0;
                        for r in 0..rows {
                            let gg = g[r * n + c] * gd[c];
                            mean_gg += gg;
                            mean_ggx += gg * normalized_b[r * n + c];
                        }
                        mean_gg /= rows as f64;
                        mean_ggx /= rows as f64;
                        for r in 0..rows {
                            let gg = g[r * n + c] * gd[c];
                            grad[r * n + c] += inv_std_b[c]
                                * (gg - mean_gg - normalized_b[r * n + c] * mean_ggx);
                        }
                    }
                }
            })),
        );
        (out, mean, var)
    }

    /// Batch normalization with frozen statistics (evaluation mode).
    pub fn batch_norm_cols_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Tensor {
        let (rows, n) = (self.rows(), self.cols());
        assert_eq!(mean.len(), n, "running mean width mismatch");
        assert_eq!(var.len(), n, "running variance width mismatch");
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0; rows * n];
        let mut normalized = vec![0.0; rows * n];
        for r in 0..rows {
            for c in 0..n {
                let xhat = (src[r * n + c] - mean[c]) * inv_std[c];
                normalized[r * n + c] = xhat;
                data[r * n + c] = gd[c] * xhat + bd[c];
            }
        }
        drop(src);
        drop(gd);
        drop(bd);
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::make(
            rows,
            n,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g, _| {
                if pg.0.requires_grad {
                    let mut grad = pg.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[c] += g[r * n + c] * normalized[r * n + c];
                        }
                    }
                }
                if pb.0.requires_grad {
                    let mut grad = pb.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[c] += g[r * n + c];
                        }
                    }
                }
                if px.0.requires_grad {
                    let gd = pg.0.data.borrow();
                    let mut grad = px.0.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            grad[r * n + c] += g[r * n + c] * gd[c] * inv_std[c];
                        }
                    }
                }
            })),
        )
    }

    /// Binary cross-entropy against constant labels, summed over elements.
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before the logs.
    pub fn bce_sum(&self, labels: &[f64], clamp: f64) -> Tensor {
        assert_eq!(labels.len(), self.len(), "one label per probability required");
        let src = self.data();
        let mut total = 0.0;
        for (i, &p) in src.iter().enumerate() {
            let p = p.clamp(clamp, 1.0 - clamp);
            total -= labels[i] * p.ln() + (1.0 - labels[i]) * (1.0 - p).ln();
        }
        drop(src);
        let pa = self.clone();
        let labels: Vec<f64> = labels.to_vec();
        Tensor::make(
            1,
            1,
            vec![total],
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                if pa.0.requires_grad {
                    let ad = pa.0.data.borrow();
                    let mut grad = pa.0.grad.borrow_mut();
                    for (i, &p) in ad.iter().enumerate() {
                        // Zero gradient where the clamp saturates.
                        if p <= clamp || p >= 1.0 - clamp {
                            continue;
                        }
                        grad[i] += g[0] * (-(labels[i] / p) + (1.0 - labels[i]) / (1.0 - p));
                    }
                }
            })),
        )
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reverse topological order of the reachable gradient-tracking subgraph.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    visited.insert(root.0.id);
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, parent_idx)) = stack.pop() {
        if parent_idx < node.0.parents.len() {
            let parent = node.0.parents[parent_idx].clone();
            stack.push((node, parent_idx + 1));
            if parent.0.requires_grad && visited.insert(parent.0.id) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// C(m x n) = A(m x k) . B(k x n) + beta * C, where either operand may be
/// stored transposed (`ta`/`tb`). Buffers are row-major.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length mismatch");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length mismatch");
    assert_eq!(c.len(), m * n, "gemm: output buffer length mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
