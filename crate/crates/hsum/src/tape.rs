//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every intermediate value is a two-dimensional array (scalars are `1 x 1`,
//! row vectors `1 x d`). Operations append nodes to a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node, in particular the parameter leaves.
//!
//! The operation set is exactly what the encoder and its losses need — dense
//! affine maps, masked softmax attention, layer norm, a few pointwise
//! nonlinearities, and shape plumbing (concat/slice/gather). All math is
//! plain `ndarray`; nothing here is parallel or approximate, which keeps
//! gradient checks tight.

use crate::error::{HsumError, Result};
use ndarray::{s, Array1, Array2, Axis};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_COEFF: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    /// `a * scale + shift`, elementwise; the shift needs no storage since
    /// its derivative vanishes.
    Affine {
        a: Var,
        scale: f64,
    },
    /// `x + b` with `b` a `1 x d` row broadcast over the rows of `x`.
    AddRow {
        x: Var,
        b: Var,
    },
    MatMul(Var, Var),
    /// `a . b^T` without materializing the transpose.
    MatMulNT(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    DiagPart(Var),
    Ln(Var),
    PowConst(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized activations, cached for the backward pass.
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Array1<f64>,
        eps: f64,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        indices: Vec<usize>,
    },
    MeanRows(Var),
    MeanAll(Var),
    SumAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Growable record of a computation, with values stored per node.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `var`; zero-filled if the node did not influence the
    /// output.
    pub fn get(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn try_get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn with<R>(&self, var: Var, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.nodes.borrow()[var.0].value)
    }

    /// Current value of a node (cloned).
    pub fn value(&self, var: Var) -> Array2<f64> {
        self.with(var, Clone::clone)
    }

    /// Value of a `1 x 1` node as a scalar.
    pub fn scalar(&self, var: Var) -> f64 {
        self.with(var, |v| {
            assert_eq!(v.dim(), (1, 1), "scalar() on a non-scalar node");
            v[[0, 0]]
        })
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.with(var, |v| v.dim())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduce a constant or parameter leaf.
    pub fn input(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Convenience leaf for a `1 x 1` scalar.
    pub fn scalar_input(&self, value: f64) -> Var {
        self.input(Array2::from_elem((1, 1), value))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: shape {sa:?} vs {sb:?}");
        sa
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.with(a, |x| self.with(b, |y| x + y));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.with(a, |x| self.with(b, |y| x - y));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul_elem");
        let v = self.with(a, |x| self.with(b, |y| x * y));
        self.push(v, Op::MulElem(a, b))
    }

    /// Elementwise `a * scale + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e * scale + shift));
        self.push(v, Op::Affine { a, scale })
    }

    pub fn scale(&self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Add a `1 x d` row vector to every row of `x`.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let (_, d) = self.shape(x);
        assert_eq!(self.shape(b), (1, d), "add_row: bias must be 1 x {d}");
        let v = self.with(x, |xv| self.with(b, |bv| xv + &bv.row(0)));
        self.push(v, Op::AddRow { x, b })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let ((_, k), (k2, _)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let v = self.with(a, |x| self.with(b, |y| x.dot(y)));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a . b^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let ((_, k), (_, k2)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul_nt: trailing dimensions differ");
        let v = self.with(a, |x| self.with(b, |y| x.dot(&y.t())));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.t().to_owned());
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise softmax with the max-subtraction trick.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|e| (e - max).exp());
                let sum: f64 = row.sum();
                row.mapv_inplace(|e| e / sum);
            }
            out
        });
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise `ln(sum(exp(x)))`, returned as an `n x 1` column.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let mut out = Array2::zeros((x.nrows(), 1));
            for (i, row) in x.rows().into_iter().enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&e| (e - max).exp()).sum();
                out[[i, 0]] = max + sum.ln();
            }
            out
        });
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Main diagonal of a square matrix as an `n x 1` column.
    pub fn diag_part(&self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(n, m, "diag_part: matrix must be square");
        let v = self.with(a, |x| {
            Array2::from_shape_fn((n, 1), |(i, _)| x[[i, i]])
        });
        self.push(v, Op::DiagPart(a))
    }

    /// Natural log; inputs must already be strictly positive (clamp first).
    pub fn ln(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(f64::ln));
        self.push(v, Op::Ln(a))
    }

    /// Elementwise power with a constant exponent (used with exponents >= 1).
    pub fn pow_const(&self, a: Var, exponent: f64) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.powf(exponent)));
        self.push(v, Op::PowConst(a, exponent))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(|e| 1.0 / (1.0 + (-e).exp())));
        self.push(v, Op::Sigmoid(a))
    }

    /// Smooth GELU (tanh form); the backward pass differentiates the same
    /// approximation, so gradient checks are exact.
    pub fn gelu(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(gelu_value));
        self.push(v, Op::Gelu(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp binds.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.clamp(lo, hi)));
        self.push(v, Op::Clamp { a, lo, hi })
    }

    /// Row-wise layer normalization with learnable `1 x d` scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, d), "layer_norm: gamma must be 1 x {d}");
        assert_eq!(self.shape(beta), (1, d), "layer_norm: beta must be 1 x {d}");
        let (value, xhat, inv_std) = self.with(x, |xv| {
            self.with(gamma, |g| {
                self.with(beta, |b| {
                    let mut xhat = Array2::zeros((n, d));
                    let mut inv_std = Array1::zeros(n);
                    for i in 0..n {
                        let row = xv.row(i);
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|e| (e - mean).powi(2)).mean().unwrap();
                        let is = 1.0 / (var + eps).sqrt();
                        inv_std[i] = is;
                        for j in 0..d {
                            xhat[[i, j]] = (xv[[i, j]] - mean) * is;
                        }
                    }
                    let value = &xhat * &g.row(0) + &b.row(0);
                    (value, xhat, inv_std)
                })
            })
        });
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scale each row to unit Euclidean norm (rows shorter than `eps` are
    /// divided by `eps` instead).
    pub fn l2_normalize_rows(&self, x: Var, eps: f64) -> Var {
        let (value, norms) = self.with(x, |xv| {
            let mut out = xv.clone();
            let mut norms = Array1::zeros(xv.nrows());
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                norms[i] = n;
                let div = n.max(eps);
                row.mapv_inplace(|e| e / div);
            }
            (out, norms)
        });
        self.push(value, Op::L2NormalizeRows { x, norms, eps })
    }

    /// Stack variables vertically; all must share a column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let d = self.shape(parts[0]).1;
        let n: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Array2::zeros((n, d));
        let mut row = 0;
        for &p in parts {
            self.with(p, |v| {
                assert_eq!(v.ncols(), d, "concat_rows: column mismatch");
                out.slice_mut(s![row..row + v.nrows(), ..]).assign(v);
                row += v.nrows();
            });
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Stack variables horizontally; all must share a row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let n = self.shape(parts[0]).0;
        let d: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Array2::zeros((n, d));
        let mut col = 0;
        for &p in parts {
            self.with(p, |v| {
                assert_eq!(v.nrows(), n, "concat_cols: row mismatch");
                out.slice_mut(s![.., col..col + v.ncols()]).assign(v);
                col += v.ncols();
            });
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let (n, _) = self.shape(a);
        assert!(start + len <= n, "slice_rows: range out of bounds");
        let v = self.with(a, |x| x.slice(s![start..start + len, ..]).to_owned());
        self.push(v, Op::SliceRows { a, start })
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let (_, d) = self.shape(a);
        assert!(start + len <= d, "slice_cols: range out of bounds");
        let v = self.with(a, |x| x.slice(s![.., start..start + len]).to_owned());
        self.push(v, Op::SliceCols { a, start })
    }

    /// Select rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let (n, d) = self.shape(a);
        let mut out = Array2::zeros((indices.len(), d));
        self.with(a, |x| {
            for (k, &i) in indices.iter().enumerate() {
                assert!(i < n, "gather_rows: index {i} out of {n}");
                out.row_mut(k).assign(&x.row(i));
            }
        });
        self.push(
            out,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
        )
    }

    /// Column-wise mean over rows, returned as `1 x d`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            x.mean_axis(Axis(0))
                .expect("mean_rows: empty input")
                .insert_axis(Axis(0))
        });
        self.push(v, Op::MeanRows(a))
    }

    /// Mean of every entry, as `1 x 1`.
    pub fn mean_all(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            Array2::from_elem((1, 1), x.mean().expect("mean_all: empty input"))
        });
        self.push(v, Op::MeanAll(a))
    }

    /// Sum of every entry, as `1 x 1`.
    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.with(a, |x| Array2::from_elem((1, 1), x.sum()));
        self.push(v, Op::SumAll(a))
    }

    /// Reverse-mode sweep from a `1 x 1` node. Returns a gradient per node;
    /// errors if the seed value is not finite.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.0].value;
        assert_eq!(out_val.dim(), (1, 1), "backward: output must be scalar");
        if !out_val[[0, 0]].is_finite() {
            return Err(HsumError::Invariant(format!(
                "backward on non-finite value {}",
                out_val[[0, 0]]
            )));
        }

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            // Take the accumulated gradient while routing contributions to
            // the node's inputs, then put it back for the caller.
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let mut send = |var: Var, contribution: Array2<f64>| {
                match &mut grads[var.0] {
                    Some(existing) => *existing += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, -&g);
                }
                Op::MulElem(a, b) => {
                    send(*a, &g * &nodes[b.0].value);
                    send(*b, &g * &nodes[a.0].value);
                }
                Op::Affine { a, scale } => send(*a, &g * *scale),
                Op::AddRow { x, b } => {
                    send(*x, g.clone());
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&nodes[b.0].value.t()));
                    send(*b, nodes[a.0].value.t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    send(*a, g.dot(&nodes[b.0].value));
                    send(*b, g.t().dot(&nodes[a.0].value));
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = y.row(i).dot(&g.row(i));
                        for j in 0..y.ncols() {
                            da[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    send(*a, da);
                }
                Op::LogSumExpRows(a) => {
                    let x = &nodes[a.0].value;
                    let mut da = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let lse = node.value[[i, 0]];
                        for j in 0..x.ncols() {
                            da[[i, j]] = g[[i, 0]] * (x[[i, j]] - lse).exp();
                        }
                    }
                    send(*a, da);
                }
                Op::DiagPart(a) => {
                    let n = nodes[a.0].value.nrows();
                    let mut da = Array2::zeros((n, n));
                    for i in 0..n {
                        da[[i, i]] = g[[i, 0]];
                    }
                    send(*a, da);
                }
                Op::Ln(a) => send(*a, &g / &nodes[a.0].value),
                Op::PowConst(a, e) => {
                    let x = &nodes[a.0].value;
                    send(*a, &g * &x.mapv(|v| e * v.powf(e - 1.0)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, &g * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::Gelu(a) => {
                    let x = &nodes[a.0].value;
                    send(*a, &g * &x.mapv(gelu_derivative));
                }
                Op::Clamp { a, lo, hi } => {
                    let x = &nodes[a.0].value;
                    let pass = x.mapv(|v| f64::from(u8::from(v > *lo && v < *hi)));
                    send(*a, &g * &pass);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gval = &nodes[gamma.0].value;
                    let (n, d) = xhat.dim();
                    send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let mut dx = Array2::zeros((n, d));
                    for i in 0..n {
                        let mut dxhat = Array1::zeros(d);
                        for j in 0..d {
                            dxhat[j] = g[[i, j]] * gval[[0, j]];
                        }
                        let mean_dxhat = dxhat.mean().unwrap();
                        let mean_dxhat_xhat = (0..d)
                            .map(|j| dxhat[j] * xhat[[i, j]])
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            dx[[i, j]] = inv_std[i]
                                * (dxhat[j] - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                        }
                    }
                    send(*x, dx);
                }
                Op::L2NormalizeRows { x, norms, eps } => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        if norms[i] > *eps {
                            let dot: f64 = y.row(i).dot(&g.row(i));
                            for j in 0..y.ncols() {
                                dx[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norms[i];
                            }
                        } else {
                            for j in 0..y.ncols() {
                                dx[[i, j]] = g[[i, j]] / eps;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let rows = nodes[p.0].value.nrows();
                        send(p, g.slice(s![row..row + rows, ..]).to_owned());
                        row += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let cols = nodes[p.0].value.ncols();
                        send(p, g.slice(s![.., col..col + cols]).to_owned());
                        col += cols;
                    }
                }
                Op::SliceRows { a, start } => {
                    let mut da = Array2::zeros(nodes[a.0].value.dim());
                    da.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*a, da);
                }
                Op::SliceCols { a, start } => {
                    let mut da = Array2::zeros(nodes[a.0].value.dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, da);
                }
                Op::GatherRows { a, indices } => {
                    let mut da = Array2::zeros(nodes[a.0].value.dim());
                    for (k, &i) in indices.iter().enumerate() {
                        let mut row = da.row_mut(i);
                        row += &g.row(k);
                    }
                    send(*a, da);
                }
                Op::MeanRows(a) => {
                    let n = nodes[a.0].value.nrows() as f64;
                    let mut da = Array2::zeros(nodes[a.0].value.dim());
                    for mut row in da.rows_mut() {
                        row.assign(&(&g.row(0) / n));
                    }
                    send(*a, da);
                }
                Op::MeanAll(a) => {
                    let (n, d) = nodes[a.0].value.dim();
                    let scale = g[[0, 0]] / (n * d) as f64;
                    send(*a, Array2::from_elem((n, d), scale));
                }
                Op::SumAll(a) => {
                    let dim = nodes[a.0].value.dim();
                    send(*a, Array2::from_elem(dim, g[[0, 0]]));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn gelu_value(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x.powi(3))).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEFF * x.powi(3));
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}
