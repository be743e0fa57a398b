//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node to a [`Tape`] holding its forward value and
//! enough information to run its backward rule. [`Tape::backward`] walks the
//! nodes in reverse execution order once and returns a [`Gradients`] table;
//! the tape itself is left untouched, so one forward pass can be
//! differentiated against many scalar outputs (activation maps do exactly
//! that, once per descriptor channel).

mod gradcheck;
mod params;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, relative_discrepancy, FdReport};
pub use params::{Binder, ParamId, ParamStore, Parameter};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::KernelMap;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, DenseTensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    RowSoftmax(usize, f64),
    Relu(usize),
    AddBias(usize, usize),
    MulRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Weighted(usize, Arc<DenseTensor>),
    Sum(usize),
    Mean(usize),
    Pick(usize, usize),
    RowNorm(usize),
    RowNormalize(usize),
    RowScaleNorm(usize, f64),
    GatherRows(usize, Arc<Vec<usize>>),
    ConcatCols(usize, usize),
    Reshape(usize),
    SparseConv {
        input: usize,
        kernel: usize,
        map: Arc<KernelMap>,
        transpose: bool,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node of a tape.
///
/// Nodes the scalar does not depend on have no entry.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &DenseTensor) -> DenseTensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseTensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::contract("variable does not belong to this tape"));
        }
        Ok(v.idx)
    }

    fn val(&self, idx: usize) -> &DenseTensor {
        &self.nodes[idx].value
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: DenseTensor) -> Var {
        self.push(value, Op::Param(id))
    }

    /// Parameter leaves recorded so far.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(idx, n)| match n.op {
            Op::Param(id) => Some((id, Var { tape: self.id, idx })),
            _ => None,
        })
    }

    fn matrix(&self, idx: usize, op: &'static str) -> Result<(usize, usize)> {
        let t = self.val(idx);
        if !t.is_matrix() {
            return Err(Error::dim(op, t.shape(), &[0, 0]));
        }
        Ok((t.rows(), t.cols()))
    }

    fn finite(&self, value: DenseTensor, op: &'static str) -> Result<DenseTensor> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numeric(op))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix(ia, "matmul")?;
        let (k2, n) = self.matrix(ib, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.val(ia).shape(), self.val(ib).shape()));
        }
        let mut out = DenseTensor::zeros(&[m, n]);
        gemm_acc(self.val(ia).data(), self.val(ib).data(), out.data_mut(), m, k, n);
        let out = self.finite(out, "matmul")?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix(ia, "matmul_nt")?;
        let (n, k2) = self.matrix(ib, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                self.val(ia).shape(),
                self.val(ib).shape(),
            ));
        }
        let mut out = DenseTensor::zeros(&[m, n]);
        gemm_nt_acc(self.val(ia).data(), self.val(ib).data(), out.data_mut(), m, k, n);
        let out = self.finite(out, "matmul_nt")?;
        Ok(self.push(out, Op::MatMulNt(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.matrix(ia, "transpose")?;
        let out = self.val(ia).transpose();
        Ok(self.push(out, Op::Transpose(ia)))
    }

    /// Softmax of every row of `a / scale`, computed with max subtraction.
    pub fn row_softmax(&mut self, a: Var, scale: f64) -> Result<Var> {
        let ia = self.check(a)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::contract(format!(
                "softmax scale must be positive, got {scale}"
            )));
        }
        self.matrix(ia, "row_softmax")?;
        let x = self.val(ia);
        if !x.is_finite() {
            return Err(Error::Numeric("row_softmax"));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / scale).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::RowSoftmax(ia, scale)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let mut out = self.val(ia).clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        Ok(self.push(out, Op::Relu(ia)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (_, n) = self.matrix(ia, "add_bias")?;
        if self.val(ib).numel() != n {
            return Err(Error::dim("add_bias", self.val(ia).shape(), self.val(ib).shape()));
        }
        let mut out = self.val(ia).clone();
        let b = self.val(ib).data().to_vec();
        for r in 0..out.rows() {
            for (v, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(ia, ib)))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ia, iw) = (self.check(a)?, self.check(w)?);
        let (_, n) = self.matrix(ia, "mul_row")?;
        if self.val(iw).numel() != n {
            return Err(Error::dim("mul_row", self.val(ia).shape(), self.val(iw).shape()));
        }
        let mut out = self.val(ia).clone();
        let w = self.val(iw).data().to_vec();
        for r in 0..out.rows() {
            for (v, wv) in out.row_mut(r).iter_mut().zip(&w) {
                *v *= wv;
            }
        }
        Ok(self.push(out, Op::MulRow(ia, iw)))
    }

    /// `x·weight + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    fn same_shape(&self, ia: usize, ib: usize, op: &'static str) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::dim(op, self.val(ia).shape(), self.val(ib).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "add")?;
        let mut out = self.val(ia).clone();
        out.add_assign(self.val(ib));
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "sub")?;
        let mut out = self.val(ia).clone();
        for (v, w) in out.data_mut().iter_mut().zip(self.nodes[ib].value.data()) {
            *v -= w;
        }
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let mut out = self.val(ia).clone();
        out.scale(s);
        Ok(self.push(out, Op::Scale(ia, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let mut out = self.val(ia).clone();
        for v in out.data_mut() {
            *v += s;
        }
        Ok(self.push(out, Op::AddScalar(ia)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let mut out = self.val(ia).clone();
        for v in out.data_mut() {
            *v *= *v;
        }
        Ok(self.push(out, Op::Square(ia)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn weighted(&mut self, a: Var, w: Arc<DenseTensor>) -> Result<Var> {
        let ia = self.check(a)?;
        if self.val(ia).shape() != w.shape() {
            return Err(Error::dim("weighted", self.val(ia).shape(), w.shape()));
        }
        let mut out = self.val(ia).clone();
        for (v, c) in out.data_mut().iter_mut().zip(w.data()) {
            *v *= c;
        }
        Ok(self.push(out, Op::Weighted(ia, w)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).sum();
        Ok(self.push(DenseTensor::scalar(s), Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.val(ia).numel();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = self.val(ia).sum() / n as f64;
        Ok(self.push(DenseTensor::scalar(s), Op::Mean(ia)))
    }

    /// The single element at `(row, col)` of a matrix, as a scalar.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.matrix(ia, "pick")?;
        if row >= m || col >= n {
            return Err(Error::dim("pick", &[m, n], &[row, col]));
        }
        let flat = row * n + col;
        let v = self.val(ia).data()[flat];
        Ok(self.push(DenseTensor::scalar(v), Op::Pick(ia, flat)))
    }

    /// Euclidean norm of each row, as an `m×1` column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, _) = self.matrix(ia, "row_norm")?;
        let x = self.val(ia);
        let data = (0..m)
            .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = DenseTensor::new(vec![m, 1], data)?;
        Ok(self.push(out, Op::RowNorm(ia)))
    }

    /// Scales each row to unit Euclidean norm; zero rows become uniform.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.matrix(ia, "row_normalize")?;
        let mut out = self.val(ia).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n != 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            } else {
                // A zero row has no direction; it maps to the uniform unit
                // vector and passes no gradient back.
                let u = 1.0 / (row.len() as f64).sqrt();
                row.iter_mut().for_each(|v| *v = u);
            }
        }
        Ok(self.push(out, Op::RowNormalize(ia)))
    }

    /// Divides each row by its root-mean-square (plus `eps` under the root).
    pub fn row_scale_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let (_, n) = self.matrix(ia, "row_scale_norm")?;
        let mut out = self.val(ia).clone();
        if n > 0 {
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let s = (row.iter().map(|v| v * v).sum::<f64>() / n as f64 + eps).sqrt();
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        Ok(self.push(out, Op::RowScaleNorm(ia, eps)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.matrix(ia, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::dim("gather_rows", &[m, n], &[bad]));
        }
        let x = self.val(ia);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows.iter() {
            data.extend_from_slice(x.row(r));
        }
        let out = DenseTensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(out, Op::GatherRows(ia, rows)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, na) = self.matrix(ia, "concat_cols")?;
        let (m2, nb) = self.matrix(ib, "concat_cols")?;
        if m != m2 {
            return Err(Error::dim(
                "concat_cols",
                self.val(ia).shape(),
                self.val(ib).shape(),
            ));
        }
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(self.val(ia).row(r));
            data.extend_from_slice(self.val(ib).row(r));
        }
        let out = DenseTensor::new(vec![m, na + nb], data)?;
        Ok(self.push(out, Op::ConcatCols(ia, ib)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    /// Gather-scatter convolution over a kernel map.
    ///
    /// Forward: `out[o] += in[i] · kernel[s]` for every pair `(i, o)` of
    /// offset `s`. With `transpose` the roles of the two pair columns swap,
    /// which makes the operation the adjoint of the forward one when the
    /// per-offset kernel matrices are transposed.
    pub(crate) fn sparse_conv(
        &mut self,
        input: Var,
        kernel: Var,
        map: Arc<KernelMap>,
        transpose: bool,
    ) -> Result<Var> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let (m_in, c_in) = self.matrix(ii, "sparse_conv")?;
        let ks = self.val(ik).shape().to_vec();
        if ks.len() != 3 || ks[0] != map.volume() || ks[1] != c_in {
            return Err(Error::dim("sparse_conv", &[map.volume(), m_in, c_in], &ks));
        }
        let (in_rows, out_rows) = if transpose {
            (map.out_rows(), map.in_rows())
        } else {
            (map.in_rows(), map.out_rows())
        };
        if in_rows != m_in {
            return Err(Error::dim("sparse_conv", &[in_rows], &[m_in]));
        }
        let c_out = ks[2];
        let mut out = DenseTensor::zeros(&[out_rows, c_out]);
        {
            let x = self.val(ii).data();
            let k = self.val(ik).data();
            let o = out.data_mut();
            for (s, pairs) in map.pairs().iter().enumerate() {
                let ks_mat = &k[s * c_in * c_out..(s + 1) * c_in * c_out];
                for &(a, b) in pairs {
                    let (src, dst) = if transpose { (b, a) } else { (a, b) };
                    let (src, dst) = (src as usize, dst as usize);
                    let xrow = &x[src * c_in..(src + 1) * c_in];
                    let orow = &mut o[dst * c_out..(dst + 1) * c_out];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &ks_mat[ci * c_out..(ci + 1) * c_out];
                        for (ov, kv) in orow.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
        let out = self.finite(out, "sparse_conv")?;
        Ok(self.push(
            out,
            Op::SparseConv {
                input: ii,
                kernel: ik,
                map,
                transpose,
            },
        ))
    }

    /// 2-D convolution of an `H×W×C_in` input with a `k×k×C_in×C_out`
    /// kernel, zero padding `k/2` and the given stride.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let is = self.val(ii).shape().to_vec();
        let ks = self.val(ik).shape().to_vec();
        if is.len() != 3 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != is[2] || stride == 0 {
            return Err(Error::dim("conv2d", &is, &ks));
        }
        let (h, w, ci) = (is[0], is[1], is[2]);
        let (k, co) = (ks[0], ks[3]);
        let pad = k / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("conv2d", &is, &ks));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = DenseTensor::zeros(&[ho, wo, co]);
        {
            let x = self.val(ii).data();
            let kd = self.val(ik).data();
            let o = out.data_mut();
            for oy in 0..ho {
                for ox in 0..wo {
                    let orow = &mut o[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = (iy as usize * w + ix as usize) * ci;
                            let kbase = (ky * k + kx) * ci * co;
                            for c in 0..ci {
                                let xv = x[base + c];
                                if xv == 0.0 {
                                    continue;
                                }
                                let krow = &kd[kbase + c * co..kbase + (c + 1) * co];
                                for (ov, kv) in orow.iter_mut().zip(krow) {
                                    *ov += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = self.finite(out, "conv2d")?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                stride,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if !self.val(il).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(il).shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; il + 1];
        grads[il] = Some(DenseTensor::filled(self.val(il).shape(), 1.0));
        for idx in (0..=il).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { tape: self.id, grads })
    }

    fn backward_node(&self, idx: usize, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) {
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(ia, ib) => {
                let (a, b) = (self.val(ia), self.val(ib));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut da = DenseTensor::zeros(a.shape());
                gemm_nt_acc(g.data(), b.data(), da.data_mut(), m, n, k);
                let mut db = DenseTensor::zeros(b.shape());
                gemm_tn_acc(a.data(), g.data(), db.data_mut(), m, k, n);
                accumulate(grads, ia, da);
                accumulate(grads, ib, db);
            }
            &Op::MatMulNt(ia, ib) => {
                let (a, b) = (self.val(ia), self.val(ib));
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                let mut da = DenseTensor::zeros(a.shape());
                gemm_acc(g.data(), b.data(), da.data_mut(), m, n, k);
                let mut db = DenseTensor::zeros(b.shape());
                gemm_tn_acc(g.data(), a.data(), db.data_mut(), m, n, k);
                accumulate(grads, ia, da);
                accumulate(grads, ib, db);
            }
            &Op::Transpose(ia) => accumulate(grads, ia, g.transpose()),
            &Op::RowSoftmax(ia, scale) => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = yv * (*d - dot) / scale;
                    }
                }
                accumulate(grads, ia, dx);
            }
            &Op::Relu(ia) => {
                let mut dx = g.clone();
                for (d, x) in dx.data_mut().iter_mut().zip(self.val(ia).data()) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, ia, dx);
            }
            &Op::AddBias(ia, ib) => {
                let mut db = DenseTensor::zeros(self.val(ib).shape());
                for r in 0..g.rows() {
                    for (d, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                accumulate(grads, ia, g.clone());
                accumulate(grads, ib, db);
            }
            &Op::MulRow(ia, iw) => {
                let (a, w) = (self.val(ia), self.val(iw));
                let mut da = g.clone();
                let mut dw = DenseTensor::zeros(w.shape());
                for r in 0..g.rows() {
                    let ar = a.row(r);
                    for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                        dw.data_mut()[c] += *d * ar[c];
                        *d *= w.data()[c];
                    }
                }
                accumulate(grads, ia, da);
                accumulate(grads, iw, dw);
            }
            &Op::Add(ia, ib) => {
                accumulate(grads, ia, g.clone());
                accumulate(grads, ib, g.clone());
            }
            &Op::Sub(ia, ib) => {
                accumulate(grads, ia, g.clone());
                let mut neg = g.clone();
                neg.scale(-1.0);
                accumulate(grads, ib, neg);
            }
            &Op::Scale(ia, s) => {
                let mut dx = g.clone();
                dx.scale(s);
                accumulate(grads, ia, dx);
            }
            &Op::AddScalar(ia) => accumulate(grads, ia, g.clone()),
            &Op::Square(ia) => {
                let mut dx = g.clone();
                for (d, x) in dx.data_mut().iter_mut().zip(self.val(ia).data()) {
                    *d *= 2.0 * x;
                }
                accumulate(grads, ia, dx);
            }
            Op::Weighted(ia, w) => {
                let mut dx = g.clone();
                for (d, c) in dx.data_mut().iter_mut().zip(w.data()) {
                    *d *= c;
                }
                accumulate(grads, *ia, dx);
            }
            &Op::Sum(ia) => {
                let dx = DenseTensor::filled(self.val(ia).shape(), g.data()[0]);
                accumulate(grads, ia, dx);
            }
            &Op::Mean(ia) => {
                let n = self.val(ia).numel() as f64;
                let dx = DenseTensor::filled(self.val(ia).shape(), g.data()[0] / n);
                accumulate(grads, ia, dx);
            }
            &Op::Pick(ia, flat) => {
                let mut dx = DenseTensor::zeros(self.val(ia).shape());
                dx.data_mut()[flat] = g.data()[0];
                accumulate(grads, ia, dx);
            }
            &Op::RowNorm(ia) => {
                let x = self.val(ia);
                let mut dx = DenseTensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let n = y.data()[r];
                    if n > 0.0 {
                        let s = g.data()[r] / n;
                        for (d, xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *d = s * xv;
                        }
                    }
                }
                accumulate(grads, ia, dx);
            }
            &Op::RowNormalize(ia) => {
                let x = self.val(ia);
                let mut dx = DenseTensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * dot) / n;
                        }
                    }
                }
                accumulate(grads, ia, dx);
            }
            &Op::RowScaleNorm(ia, eps) => {
                let x = self.val(ia);
                let c = x.cols();
                let mut dx = DenseTensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let s = (xr.iter().map(|v| v * v).sum::<f64>() / c as f64 + eps).sqrt();
                    let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let k = dot / (c as f64 * s * s * s);
                    for ((d, gv), xv) in dx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                        *d = gv / s - xv * k;
                    }
                }
                accumulate(grads, ia, dx);
            }
            Op::GatherRows(ia, rows) => {
                let mut dx = DenseTensor::zeros(self.val(*ia).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                accumulate(grads, *ia, dx);
            }
            &Op::ConcatCols(ia, ib) => {
                let na = self.val(ia).cols();
                let mut da = DenseTensor::zeros(self.val(ia).shape());
                let mut db = DenseTensor::zeros(self.val(ib).shape());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    da.row_mut(r).copy_from_slice(&gr[..na]);
                    db.row_mut(r).copy_from_slice(&gr[na..]);
                }
                accumulate(grads, ia, da);
                accumulate(grads, ib, db);
            }
            &Op::Reshape(ia) => {
                let dx = g
                    .clone()
                    .reshaped(self.val(ia).shape())
                    .expect("reshape preserves element count");
                accumulate(grads, ia, dx);
            }
            Op::SparseConv {
                input,
                kernel,
                map,
                transpose,
            } => {
                let (x, k) = (self.val(*input), self.val(*kernel));
                let (c_in, c_out) = (k.shape()[1], k.shape()[2]);
                let mut dx = DenseTensor::zeros(x.shape());
                let mut dk = DenseTensor::zeros(k.shape());
                {
                    let (xd, kd, gd) = (x.data(), k.data(), g.data());
                    let (dxd, dkd) = (dx.data_mut(), dk.data_mut());
                    for (s, pairs) in map.pairs().iter().enumerate() {
                        let off = s * c_in * c_out;
                        for &(a, b) in pairs {
                            let (src, dst) = if *transpose { (b, a) } else { (a, b) };
                            let (src, dst) = (src as usize, dst as usize);
                            let grow = &gd[dst * c_out..(dst + 1) * c_out];
                            for ci in 0..c_in {
                                let krow = &kd[off + ci * c_out..off + (ci + 1) * c_out];
                                dxd[src * c_in + ci] +=
                                    krow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                                let xv = xd[src * c_in + ci];
                                if xv != 0.0 {
                                    let dkrow = &mut dkd[off + ci * c_out..off + (ci + 1) * c_out];
                                    for (d, gv) in dkrow.iter_mut().zip(grow) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
            }
            &Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                let (x, kt) = (self.val(input), self.val(kernel));
                let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (k, co) = (kt.shape()[0], kt.shape()[3]);
                let (ho, wo) = (y.shape()[0], y.shape()[1]);
                let pad = k / 2;
                let mut dx = DenseTensor::zeros(x.shape());
                let mut dk = DenseTensor::zeros(kt.shape());
                {
                    let (xd, kd, gd) = (x.data(), kt.data(), g.data());
                    let (dxd, dkd) = (dx.data_mut(), dk.data_mut());
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let grow = &gd[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let base = (iy as usize * w + ix as usize) * ci;
                                    let kbase = (ky * k + kx) * ci * co;
                                    for c in 0..ci {
                                        let krow = &kd[kbase + c * co..kbase + (c + 1) * co];
                                        dxd[base + c] +=
                                            krow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                                        let xv = xd[base + c];
                                        if xv != 0.0 {
                                            let dkrow = &mut dkd[kbase + c * co..kbase + (c + 1) * co];
                                            for (d, gv) in dkrow.iter_mut().zip(grow) {
                                                *d += xv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, input, dx);
                accumulate(grads, kernel, dk);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<DenseTensor>], idx: usize, g: DenseTensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests;
