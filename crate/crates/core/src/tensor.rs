//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Everything runs in 64-bit floats: the models here are tiny, and
//! gradient-check fidelity outranks speed. The design is a classic explicit
//! tape — a [`Graph`] records one [`Node`] per operation in topological
//! order, forward values are computed eagerly, and [`Graph::backward`]
//! replays the tape in exact reverse order, accumulating gradients for every
//! node that requires them. The tape is consumed by the backward pass, so a
//! stale graph can never leak gradients into a later step.
//!
//! Shape discipline is strict: there is no implicit broadcasting. The only
//! shape-coupling operations are the explicit ones ([`Graph::add_row`] for
//! per-row bias, [`Graph::reshape`], [`Graph::concat_cols`] /
//! [`Graph::slice_cols`] for head splitting). Mismatches are errors naming
//! both shapes, never silent coercions.
//!
//! Matrix products route through `matrixmultiply::dgemm`; transposed
//! operands are expressed with strides so backward passes do not copy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ───────────────────────────────────────────────────────────────────────
// Tensor
// ───────────────────────────────────────────────────────────────────────

/// A dense row-major tensor of 64-bit floats.
///
/// Invariants: `shape.iter().product() == data.len()`, and every documented
/// operation maps finite inputs to finite outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!(
                    "shape {:?} implies {} elements but data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// Tensor of the given shape filled with `value`.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// The dimension sizes.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat row-major data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat data (shape is fixed).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// True when this is a rank-0 or single-element tensor.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Shape {
                op: "Tensor::scalar_value",
                detail: format!("expected scalar, got shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert!(self.shape.len() == 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert!(self.shape.len() == 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    /// Element (i, j) of a 2-D tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.shape.len() == 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(self.shape.len() == 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Mutable row `i` of a 2-D tensor.
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert!(self.shape.len() == 2);
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Transpose of a 2-D tensor (copying).
    pub fn transposed(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op: "Tensor::transposed",
                detail: format!("expected 2-D, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Value-level matrix product (no tape).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul_nn(self, other)
    }

    /// Elementwise sum with a same-shaped tensor (no tape).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "Tensor::add",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Elementwise difference (no tape).
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "Tensor::sub",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Every element multiplied by a constant (no tape).
    pub fn scaled(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Index of the largest element in each row of a 2-D tensor
    /// (first index wins ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert!(self.shape.len() == 2, "argmax_rows() requires a 2-D tensor");
        (0..self.shape[0])
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Largest absolute elementwise difference against a same-shaped tensor.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff() requires equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of the flattened data.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with the listed rows replaced by the rows of `replacement`
    /// (which must have `rows.len()` rows and matching column count).
    pub fn with_rows_replaced(&self, rows: &[usize], replacement: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || replacement.shape.len() != 2 {
            return Err(Error::Shape {
                op: "Tensor::with_rows_replaced",
                detail: format!("{:?} vs {:?} (both must be 2-D)", self.shape, replacement.shape),
            });
        }
        if replacement.shape[0] != rows.len() || replacement.shape[1] != self.shape[1] {
            return Err(Error::Shape {
                op: "Tensor::with_rows_replaced",
                detail: format!(
                    "replacement {:?} does not cover {} rows of width {}",
                    replacement.shape,
                    rows.len(),
                    self.shape[1]
                ),
            });
        }
        let mut out = self.clone();
        for (k, &i) in rows.iter().enumerate() {
            if i >= self.shape[0] {
                return Err(Error::Param(format!(
                    "row index {} out of range for {} rows",
                    i, self.shape[0]
                )));
            }
            out.row_mut(i).copy_from_slice(replacement.row(k));
        }
        Ok(out)
    }

    /// Stacks equally shaped 2-D tensors into one (n, rows, cols) tensor.
    pub fn stack(slices: &[Tensor]) -> Result<Tensor> {
        if slices.is_empty() {
            return Err(Error::Param("Tensor::stack on empty list".into()));
        }
        let shape = slices[0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "Tensor::stack",
                detail: format!("expected 2-D slices, got {:?}", shape),
            });
        }
        let mut data = Vec::with_capacity(slices.len() * slices[0].numel());
        for s in slices {
            if s.shape != shape {
                return Err(Error::Shape {
                    op: "Tensor::stack",
                    detail: format!("{:?} vs {:?}", shape, s.shape),
                });
            }
            data.extend_from_slice(&s.data);
        }
        Tensor::new(vec![slices.len(), shape[0], shape[1]], data)
    }

    /// Extracts 2-D slice `i` of a 3-D tensor.
    pub fn unstack(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::Shape {
                op: "Tensor::unstack",
                detail: format!("expected 3-D, got {:?}", self.shape),
            });
        }
        let (n, r, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if i >= n {
            return Err(Error::Param(format!("slice {} out of range for {}", i, n)));
        }
        Tensor::new(vec![r, c], self.data[i * r * c..(i + 1) * r * c].to_vec())
    }
}

/// C = A · B for row-major 2-D tensors, via `matrixmultiply`.
fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("{:?} × {:?}", a.shape, b.shape),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    // Row-major strides: row stride = column count, column stride = 1.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

/// C = A · Bᵀ without materializing the transpose (strides express it).
fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::Shape {
            op: "matmul_nt",
            detail: format!("{:?} × {:?}ᵀ", a.shape, b.shape),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

/// C = Aᵀ · B without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul_tn",
            detail: format!("{:?}ᵀ × {:?}", a.shape, b.shape),
        });
    }
    let (m, k, n) = (a.shape[1], a.shape[0], b.shape[1]);
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            1,
            m as isize,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

// ───────────────────────────────────────────────────────────────────────
// Tape
// ───────────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded operation: the op kind with its input node ids, plus the
/// eagerly computed forward value.
#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation kinds. Saved intermediates live in the op variant itself;
/// the backward pass recomputes nothing except cheap elementwise terms.
#[derive(Debug)]
enum Op {
    /// Input node; participates in gradients iff `requires_grad`.
    Leaf,
    /// Elementwise a + b, equal shapes.
    Add(usize, usize),
    /// Elementwise a − b, equal shapes.
    Sub(usize, usize),
    /// Elementwise (Hadamard) a ⊙ b, equal shapes.
    Mul(usize, usize),
    /// a · k for constant k.
    Scale(usize, f64),
    /// (r, c) matrix plus a length-c row vector added to every row.
    AddRow(usize, usize),
    /// Matrix product a · b.
    MatMul(usize, usize),
    /// 2-D transpose.
    Transpose(usize),
    /// Same data, new shape.
    Reshape(usize),
    /// Horizontal concatenation of equally tall 2-D inputs.
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    /// Columns [lo, hi) of a 2-D input.
    SliceCols { src: usize, lo: usize, hi: usize },
    /// Rows of `table` selected by index; gradient scatter-adds.
    GatherRows { table: usize, indices: Vec<usize> },
    /// Row-wise softmax of a 2-D input (max-stabilized).
    Softmax(usize),
    /// Elementwise GELU (tanh form — smooth everywhere, which keeps
    /// finite-difference checks clean).
    Gelu(usize),
    /// Row-wise layer normalization with affine gain/bias.
    LayerNorm { x: usize, gain: usize, bias: usize },
    /// Mean over rows of −log softmax(logits)[target].
    CrossEntropy { logits: usize, targets: Vec<usize> },
    /// KL(softmax(p/T) ‖ softmax(q/T)) averaged over rows.
    KlDiv { p: usize, q: usize, temperature: f64 },
    /// Sum of all elements (scalar).
    Sum(usize),
    /// Mean of all elements (scalar).
    Mean(usize),
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if that node required one.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// The computation tape: owns every node of one forward pass.
///
/// A fresh graph is built per forward pass; [`Graph::backward`] consumes it,
/// so gradients can never be read against a stale tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerical floor inside layer normalization's square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    /// Empty tape.
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no nodes have been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a gradient-tracked input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Forward value of a node.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape { op, detail: format!("{:?} vs {:?}", sa, sb) });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    /// Elementwise difference of two same-shaped nodes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product of two same-shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    /// Every element multiplied by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).scaled(k);
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::Scale(a.0, k), rg))
    }

    /// Adds a length-c row vector to every row of an (r, c) matrix — the
    /// only broadcast in the engine (bias addition).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("{:?} + row {:?}", sa, sr),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let mut data = self.value(a).data().to_vec();
        let rowv = self.value(row).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowv[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.needs(a.0) || self.needs(row.0);
        Ok(self.push(value, Op::AddRow(a.0, row.0), rg))
    }

    /// Matrix product of two 2-D nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nn(self.value(a), self.value(b))?;
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transposed()?;
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    /// Same data under a new shape (element counts must agree).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Concatenates equally tall 2-D nodes side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Param("concat_cols on empty list".into()));
        }
        let r = self.value(parts[0]).shape().first().copied().unwrap_or(0);
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("expected 2-D with {} rows, got {:?}", r, s),
                });
            }
            total_c += s[1];
        }
        let mut data = vec![0.0; r * total_c];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.shape()[1];
            for i in 0..r {
                data[i * total_c + offset..i * total_c + offset + c]
                    .copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let value = Tensor::new(vec![r, total_c], data)?;
        let rg = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Vertical concatenation of 2-D nodes with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Param("concat_rows on empty list".into()));
        }
        let c = self.value(parts[0]).shape().get(1).copied().unwrap_or(0);
        let mut total_r = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[1] != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("expected 2-D with {} cols, got {:?}", c, s),
                });
            }
            total_r += s[0];
        }
        let mut data = Vec::with_capacity(total_r * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![total_r, c], data)?;
        let rg = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Columns [lo, hi) of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 || lo >= hi || hi > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("[{}, {}) of {:?}", lo, hi, s),
            });
        }
        let (r, c, w) = (s[0], s[1], hi - lo);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + lo..i * c + hi]);
        }
        let value = Tensor::new(vec![r, w], data)?;
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::SliceCols { src: a.0, lo, hi }, rg))
    }

    /// Selects rows of a 2-D table by index (embedding lookup, loss-position
    /// gathering). Gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("expected 2-D table, got {:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut data = vec![0.0; indices.len() * c];
        for (k, &i) in indices.iter().enumerate() {
            if i >= r {
                return Err(Error::Param(format!(
                    "gather_rows index {} out of range for {} rows",
                    i, r
                )));
            }
            data[k * c..(k + 1) * c].copy_from_slice(self.value(table).row(i));
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        let rg = self.needs(table.0);
        Ok(self.push(value, Op::GatherRows { table: table.0, indices: indices.to_vec() }, rg))
    }

    /// Row-wise softmax of a 2-D node, stabilized by max subtraction.
    /// Every output row is nonnegative and sums to 1 within 1e-12.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("expected 2-D, got {:?}", s),
            });
        }
        let value = softmax_rows(self.value(a));
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::Softmax(a.0), rg))
    }

    /// Elementwise GELU, tanh form:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu_value(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::Gelu(a.0), rg))
    }

    /// Row-wise layer normalization: each row is shifted to zero mean and
    /// scaled to unit variance (ε = 1e-5 inside the square root), then
    /// multiplied by `gain` and shifted by `bias` (both length = columns).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (sx, sg, sb) = (
            self.value(x).shape().to_vec(),
            self.value(gain).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", sx, sg, sb),
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        Ok(self.push(value, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 }, rg))
    }

    /// Mean over positions of `−log softmax(logits)[target]` — one logit row
    /// per target. Computed with the log-sum-exp trick.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} targets", s, targets.len()),
            });
        }
        if targets.is_empty() {
            return Err(Error::Param("cross_entropy with no targets".into()));
        }
        let vocab = s[1];
        for &t in targets {
            if t >= vocab {
                return Err(Error::Param(format!(
                    "target id {} outside vocabulary of {}",
                    t, vocab
                )));
            }
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = self.value(logits).row(i);
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let rg = self.needs(logits.0);
        Ok(self.push(value, Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() }, rg))
    }

    /// `KL(softmax(p/T) ‖ softmax(q/T))` averaged over rows. Nonnegative;
    /// zero exactly when the softened distributions coincide.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Param(format!(
                "kl_divergence temperature must be positive, got {}",
                temperature
            )));
        }
        self.check_same_shape("kl_divergence", p_logits, q_logits)?;
        let s = self.value(p_logits).shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "kl_divergence",
                detail: format!("expected 2-D logits, got {:?}", s),
            });
        }
        let rows = s[0];
        let mut total = 0.0;
        for i in 0..rows {
            let lp = log_softmax(self.value(p_logits).row(i), temperature);
            let lq = log_softmax(self.value(q_logits).row(i), temperature);
            total += lp
                .iter()
                .zip(&lq)
                .map(|(&a, &b)| a.exp() * (a - b))
                .sum::<f64>();
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.needs(p_logits.0) || self.needs(q_logits.0);
        Ok(self.push(
            value,
            Op::KlDiv { p: p_logits.0, q: q_logits.0, temperature },
            rg,
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::Sum(a.0), rg))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Param("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n as f64);
        let rg = self.needs(a.0);
        Ok(self.push(value, Op::Mean(a.0), rg))
    }

    /// Reverse pass from a scalar loss. Visits nodes in exact reverse
    /// recording order and accumulates gradients for every node on a path
    /// to a gradient-tracked leaf. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward: loss var not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.accumulate_parents(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Applies node `id`'s backward rule, adding contributions into the
    /// parents' gradient slots.
    fn accumulate_parents(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let add_into = |slot: &mut Option<Tensor>, inc: Tensor| -> Result<()> {
            match slot {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), inc.shape());
                    for (a, b) in acc.data_mut().iter_mut().zip(inc.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(inc),
            }
            Ok(())
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[*a], g.clone())?;
                }
                if self.needs(*b) {
                    add_into(&mut grads[*b], g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[*a], g.clone())?;
                }
                if self.needs(*b) {
                    add_into(&mut grads[*b], g.scaled(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.nodes[*b].value.data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    add_into(&mut grads[*a], Tensor::new(g.shape().to_vec(), data)?)?;
                }
                if self.needs(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    add_into(&mut grads[*b], Tensor::new(g.shape().to_vec(), data)?)?;
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    add_into(&mut grads[*a], g.scaled(*k))?;
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(&mut grads[*a], g.clone())?;
                }
                if self.needs(*row) {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut sum = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            sum[j] += g.data()[i * c + j];
                        }
                    }
                    add_into(&mut grads[*row], Tensor::new(vec![c], sum)?)?;
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[*a], matmul_nt(g, &self.nodes[*b].value)?)?;
                }
                if self.needs(*b) {
                    add_into(&mut grads[*b], matmul_tn(&self.nodes[*a].value, g)?)?;
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    add_into(&mut grads[*a], g.transposed()?)?;
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    add_into(&mut grads[*a], g.reshaped(self.nodes[*a].value.shape())?)?;
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.shape()[0];
                let total_c = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if self.needs(p) {
                        let mut data = vec![0.0; r * c];
                        for i in 0..r {
                            data[i * c..(i + 1) * c].copy_from_slice(
                                &g.data()[i * total_c + offset..i * total_c + offset + c],
                            );
                        }
                        add_into(&mut grads[p], Tensor::new(vec![r, c], data)?)?;
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p].value.shape()[0];
                    if self.needs(p) {
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        add_into(&mut grads[p], Tensor::new(vec![r, c], data)?)?;
                    }
                    offset += r;
                }
            }
            Op::SliceCols { src, lo, hi } => {
                if self.needs(*src) {
                    let s = self.nodes[*src].value.shape();
                    let (r, c, w) = (s[0], s[1], hi - lo);
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        data[i * c + lo..i * c + hi]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    add_into(&mut grads[*src], Tensor::new(vec![r, c], data)?)?;
                }
            }
            Op::GatherRows { table, indices } => {
                if self.needs(*table) {
                    let s = self.nodes[*table].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let mut data = vec![0.0; r * c];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            data[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    add_into(&mut grads[*table], Tensor::new(vec![r, c], data)?)?;
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let s = &self.nodes[id].value;
                    let (r, c) = (s.shape()[0], s.shape()[1]);
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        let srow = s.row(i);
                        let grow = g.row(i);
                        let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            data[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    add_into(&mut grads[*a], Tensor::new(vec![r, c], data)?)?;
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let data = self.nodes[*a]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gi)| gi * gelu_derivative(x))
                        .collect();
                    add_into(
                        &mut grads[*a],
                        Tensor::new(self.nodes[*a].value.shape().to_vec(), data)?,
                    )?;
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gain].value.data();
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = xv.row(i);
                    let grow = g.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // Normalized row and the gain-scaled upstream gradient.
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> = grow.iter().zip(gv).map(|(gi, wi)| gi * wi).collect();
                    let mean_gg = gg.iter().sum::<f64>() / c as f64;
                    let mean_gg_xhat =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = (gg[j] - mean_gg - xhat[j] * mean_gg_xhat) * inv;
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                if self.needs(*x) {
                    add_into(&mut grads[*x], Tensor::new(vec![r, c], dx)?)?;
                }
                if self.needs(*gain) {
                    add_into(&mut grads[*gain], Tensor::new(vec![c], dgain)?)?;
                }
                if self.needs(*bias) {
                    add_into(&mut grads[*bias], Tensor::new(vec![c], dbias)?)?;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let lv = &self.nodes[*logits].value;
                    let (r, c) = (lv.shape()[0], lv.shape()[1]);
                    let upstream = g.data()[0] / r as f64;
                    let mut data = vec![0.0; r * c];
                    for (i, &t) in targets.iter().enumerate() {
                        let probs = softmax_row(lv.row(i));
                        for j in 0..c {
                            data[i * c + j] = upstream * (probs[j] - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    add_into(&mut grads[*logits], Tensor::new(vec![r, c], data)?)?;
                }
            }
            Op::KlDiv { p, q, temperature } => {
                let pv = &self.nodes[*p].value;
                let qv = &self.nodes[*q].value;
                let (r, c) = (pv.shape()[0], pv.shape()[1]);
                let upstream = g.data()[0] / r as f64;
                let t = *temperature;
                if self.needs(*q) {
                    // d/dq of −Σ p·log softmax(q/T): (softmax(q/T) − p)/T.
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        let lp = log_softmax(pv.row(i), t);
                        let lq = log_softmax(qv.row(i), t);
                        for j in 0..c {
                            data[i * c + j] = upstream * (lq[j].exp() - lp[j].exp()) / t;
                        }
                    }
                    add_into(&mut grads[*q], Tensor::new(vec![r, c], data)?)?;
                }
                if self.needs(*p) {
                    // d/dp of Σ p·(log p − log q) with p = softmax(p̂/T):
                    // chain u = log p − log q + 1 through the softmax Jacobian.
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        let lp = log_softmax(pv.row(i), t);
                        let lq = log_softmax(qv.row(i), t);
                        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                        let u: Vec<f64> =
                            lp.iter().zip(&lq).map(|(a, b)| a - b + 1.0).collect();
                        let pu: f64 = probs.iter().zip(&u).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            data[i * c + j] = upstream * probs[j] * (u[j] - pu) / t;
                        }
                    }
                    add_into(&mut grads[*p], Tensor::new(vec![r, c], data)?)?;
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    add_into(&mut grads[*a], Tensor::full(&shape, g.data()[0]))?;
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    let n = self.nodes[*a].value.numel() as f64;
                    add_into(&mut grads[*a], Tensor::full(&shape, g.data()[0] / n))?;
                }
            }
        }
        Ok(())
    }
}

// ───────────────────────────────────────────────────────────────────────
// Elementwise helpers (shared by forward and backward)
// ───────────────────────────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044715;

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// log(Σ exp(x)) with max stabilization.
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row softmax as a plain vector.
fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Row log-softmax of `row / temperature`.
fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|v| v - lse).collect()
}

/// Row-wise softmax of a 2-D tensor (value-level helper, shared with
/// analysis code that works outside the tape).
pub fn softmax_rows(x: &Tensor) -> Tensor {
    assert!(x.shape().len() == 2, "softmax_rows() requires a 2-D tensor");
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let probs = softmax_row(x.row(i));
        data[i * c..(i + 1) * c].copy_from_slice(&probs);
    }
    Tensor::new(vec![r, c], data).expect("shape preserved")
}
