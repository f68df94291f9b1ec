//! Eagerly evaluated computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order; forward values are computed at
//! construction time, so shape and domain errors surface immediately at the
//! call that introduced them. `backward` walks the node list in reverse and
//! accumulates gradients, zeroing every gradient buffer first so repeated
//! calls give identical results.

use super::{Tensor, TensorError};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const GELU_S2P: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S2P * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_S2P * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_S2P * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale { factor: f64 },
    AddConst,
    Relu,
    Gelu,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Recip,
    Clamp { lo: f64, hi: f64 },
    Transpose,
    SliceCols { start: usize, width: usize },
    ConcatCols,
    Reshape,
    MeanRows,
    RowSums,
    SumAll,
    Pick { index: usize },
    MulBcast,
    MulCol,
    SoftmaxRows,
    LayerNorm { eps: f64 },
    Correlate2d { kern: Vec<f64>, kh: usize, kw: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

/// Projection parameters for one multi-head self-attention block, already
/// registered as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Rows/cols view: rank-1 tensors act as a single row.
fn rows_cols(shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(TensorError::NotAMatrix {
            shape: shape.to_vec(),
        }),
    }
}

fn require_matrix(shape: &[usize]) -> Result<(usize, usize), TensorError> {
    if shape.len() == 2 {
        Ok((shape[0], shape[1]))
    } else {
        Err(TensorError::NotAMatrix {
            shape: shape.to_vec(),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// First element, for scalar nodes.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("graph nodes hold valid tensors")
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            values,
            grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a leaf holding a copy of `t`'s values.
    pub fn input(&mut self, t: &Tensor) -> Result<NodeId, TensorError> {
        for (index, &value) in t.values().iter().enumerate() {
            if !value.is_finite() {
                return Err(TensorError::NonFinite { index, value });
            }
        }
        Ok(self.push(
            Op::Input,
            vec![],
            t.shape().to_vec(),
            t.values().to_vec(),
        ))
    }

    pub fn scalar_input(&mut self, v: f64) -> Result<NodeId, TensorError> {
        let t = Tensor::scalar(v)?;
        self.input(&t)
    }

    // ── binary elementwise ──────────────────────────────────────────────

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::OperandMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add, vec![a, b], self.nodes[a.0].shape.clone(), values))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub, vec![a, b], self.nodes[a.0].shape.clone(), values))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul, vec![a, b], self.nodes[a.0].shape.clone(), values))
    }

    /// `x + b` with `b` broadcast across rows (bias add).
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (_, c) = rows_cols(&self.nodes[x.0].shape)?;
        let (br, bc) = rows_cols(&self.nodes[b.0].shape)?;
        if br != 1 || bc != c {
            return Err(TensorError::OperandMismatch {
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let bv = self.nodes[b.0].values.clone();
        let values = self.nodes[x.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        Ok(self.push(
            Op::AddRow,
            vec![x, b],
            self.nodes[x.0].shape.clone(),
            values,
        ))
    }

    // ── unary ───────────────────────────────────────────────────────────

    fn unary<F: Fn(f64) -> f64>(&mut self, op: Op, x: NodeId, f: F) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|&v| f(v)).collect();
        self.push(op, vec![x], self.nodes[x.0].shape.clone(), values)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale { factor }, x, |v| v * factor)
    }

    pub fn add_const(&mut self, x: NodeId, offset: f64) -> NodeId {
        self.unary(Op::AddConst, x, |v| v + offset)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Gelu, x, gelu_val)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp, x, f64::exp)
    }

    /// Natural log; every input value must be strictly positive.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        if let Some(&bad) = self.nodes[x.0].values.iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::OutOfRange {
                what: "ln input",
                detail: format!("requires positive values, got {bad}"),
            });
        }
        Ok(self.unary(Op::Ln, x, f64::ln))
    }

    /// Square root; every input value must be strictly positive so the
    /// gradient stays finite.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        if let Some(&bad) = self.nodes[x.0].values.iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::OutOfRange {
                what: "sqrt input",
                detail: format!("requires positive values, got {bad}"),
            });
        }
        Ok(self.unary(Op::Sqrt, x, f64::sqrt))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Abs, x, f64::abs)
    }

    /// Elementwise reciprocal; zeros are rejected.
    pub fn recip(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[x.0].values.iter().any(|&v| v == 0.0) {
            return Err(TensorError::OutOfRange {
                what: "recip input",
                detail: "requires nonzero values".to_string(),
            });
        }
        Ok(self.unary(Op::Recip, x, |v| 1.0 / v))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::ClampBounds { lo, hi });
        }
        Ok(self.unary(Op::Clamp { lo, hi }, x, |v| v.clamp(lo, hi)))
    }

    // ── structure ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = require_matrix(&self.nodes[a.0].shape)?;
        let (k2, n) = require_matrix(&self.nodes[b.0].shape)?;
        if k != k2 {
            return Err(TensorError::MatmulMismatch { m, k, k2, n });
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.nodes[a.0].values.as_ptr(),
                k as isize,
                1,
                self.nodes[b.0].values.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n], out))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = require_matrix(&self.nodes[x.0].shape)?;
        let src = &self.nodes[x.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![x], vec![c, r], out))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId, TensorError> {
        let (r, c) = require_matrix(&self.nodes[x.0].shape)?;
        let end = start + width;
        if width == 0 || end > c {
            return Err(TensorError::ColumnRange {
                start,
                end,
                cols: c,
            });
        }
        let src = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(
            Op::SliceCols { start, width },
            vec![x],
            vec![r, width],
            out,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::OutOfRange {
                what: "concat_cols",
                detail: "needs at least one part".to_string(),
            });
        }
        let (r, _) = require_matrix(&self.nodes[parts[0].0].shape)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = require_matrix(&self.nodes[p.0].shape)?;
            if pr != r {
                return Err(TensorError::OperandMismatch {
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].values;
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![r, total], out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != self.nodes[x.0].values.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                got: self.nodes[x.0].values.len(),
            });
        }
        let values = self.nodes[x.0].values.clone();
        Ok(self.push(Op::Reshape, vec![x], shape, values))
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = require_matrix(&self.nodes[x.0].shape)?;
        let src = &self.nodes[x.0].values;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        Ok(self.push(Op::MeanRows, vec![x], vec![1, c], out))
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn row_sums(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = require_matrix(&self.nodes[x.0].shape)?;
        let src = &self.nodes[x.0].values;
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(Op::RowSums, vec![x], vec![r, 1], out))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].values.iter().sum();
        self.push(Op::SumAll, vec![x], vec![1], vec![s])
    }

    /// Selects one element by flat index as a scalar node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let len = self.nodes[x.0].values.len();
        if index >= len {
            return Err(TensorError::IndexOutOfBounds { index, len });
        }
        let v = self.nodes[x.0].values[index];
        Ok(self.push(Op::Pick { index }, vec![x], vec![1], vec![v]))
    }

    /// `x * s` with scalar node `s` broadcast over every element.
    pub fn mul_bcast(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[s.0].values.len() != 1 {
            return Err(TensorError::NonScalarSeed {
                shape: self.nodes[s.0].shape.clone(),
            });
        }
        let f = self.nodes[s.0].values[0];
        let values = self.nodes[x.0].values.iter().map(|&v| v * f).collect();
        Ok(self.push(
            Op::MulBcast,
            vec![x, s],
            self.nodes[x.0].shape.clone(),
            values,
        ))
    }

    /// `x[i, j] * s[i, 0]`: per-row scaling.
    pub fn mul_col(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = require_matrix(&self.nodes[x.0].shape)?;
        let (sr, sc) = require_matrix(&self.nodes[s.0].shape)?;
        if sr != r || sc != 1 {
            return Err(TensorError::OperandMismatch {
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[s.0].shape.clone(),
            });
        }
        let sv = self.nodes[s.0].values.clone();
        let src = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(src[i * c + j] * sv[i]);
            }
        }
        Ok(self.push(Op::MulCol, vec![x, s], vec![r, c], out))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = rows_cols(&self.nodes[x.0].shape)?;
        let src = &self.nodes[x.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        Ok(self.push(
            Op::SoftmaxRows,
            vec![x],
            self.nodes[x.0].shape.clone(),
            out,
        ))
    }

    /// Per-row layer normalization over the last axis with learned gain/bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::NotPositive {
                what: "layer_norm eps",
                got: eps,
            });
        }
        let (r, d) = rows_cols(&self.nodes[x.0].shape)?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = rows_cols(&self.nodes[id.0].shape)?;
            if gr != 1 || gc != d {
                return Err(TensorError::OutOfRange {
                    what: "layer_norm parameter",
                    detail: format!(
                        "{name} has shape {:?}, expected {d} values",
                        self.nodes[id.0].shape
                    ),
                });
            }
        }
        let src = &self.nodes[x.0].values;
        let g = &self.nodes[gain.0].values;
        let b = &self.nodes[bias.0].values;
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm { eps },
            vec![x, gain, bias],
            self.nodes[x.0].shape.clone(),
            out,
        ))
    }

    /// 2-D cross-correlation with a fixed (non-learned) odd-sized kernel and
    /// replicate edge padding.
    pub fn correlate2d(
        &mut self,
        x: NodeId,
        kern: &[f64],
        kh: usize,
        kw: usize,
    ) -> Result<NodeId, TensorError> {
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::KernelDims { kh, kw });
        }
        if kern.len() != kh * kw {
            return Err(TensorError::ShapeMismatch {
                shape: vec![kh, kw],
                expected: kh * kw,
                got: kern.len(),
            });
        }
        let (r, c) = require_matrix(&self.nodes[x.0].shape)?;
        let src = &self.nodes[x.0].values;
        let out = correlate2d_replicate(src, r, c, kern, kh, kw);
        Ok(self.push(
            Op::Correlate2d {
                kern: kern.to_vec(),
                kh,
                kw,
            },
            vec![x],
            vec![r, c],
            out,
        ))
    }

    // ── composites ──────────────────────────────────────────────────────

    /// `x @ w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Scales to unit L2 norm; rejects (near-)zero vectors.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sq = self.mul(x, x)?;
        let ss = self.sum_all(sq);
        if self.scalar_value(ss) <= 0.0 {
            return Err(TensorError::ZeroNorm { op: "l2_normalize" });
        }
        let norm = self.sqrt(ss)?;
        let inv = self.recip(norm)?;
        self.mul_bcast(x, inv)
    }

    /// Cosine similarity between two same-shaped vectors, as a scalar node.
    pub fn cosine(&mut self, u: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(u, v)?;
        let un = self.l2_normalize(u)?;
        let vn = self.l2_normalize(v)?;
        let prod = self.mul(un, vn)?;
        Ok(self.sum_all(prod))
    }

    /// Mean absolute difference over every cell, as a scalar node.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(pred, target)?;
        let n = self.nodes[pred.0].values.len();
        let diff = self.sub(pred, target)?;
        let a = self.abs(diff);
        let s = self.sum_all(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Additive-angular-margin softmax loss for one embedding row against a
    /// class weight matrix. The embedding and every class row are length
    /// normalized inside the op; the margin is added to the true-class angle.
    pub fn aam_softmax_loss(
        &mut self,
        embedding: NodeId,
        weights: NodeId,
        label: usize,
        margin: f64,
        scale: f64,
    ) -> Result<NodeId, TensorError> {
        let (er, d) = rows_cols(&self.nodes[embedding.0].shape)?;
        let (classes, wd) = require_matrix(&self.nodes[weights.0].shape)?;
        if er != 1 || wd != d {
            return Err(TensorError::OperandMismatch {
                left: self.nodes[embedding.0].shape.clone(),
                right: self.nodes[weights.0].shape.clone(),
            });
        }
        if label >= classes {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(TensorError::OutOfRange {
                what: "aam margin",
                detail: format!("must lie in [0, pi/2), got {margin}"),
            });
        }
        if !(scale > 0.0) {
            return Err(TensorError::NotPositive {
                what: "aam scale",
                got: scale,
            });
        }

        let e2 = if self.nodes[embedding.0].shape.len() == 1 {
            self.reshape(embedding, vec![1, d])?
        } else {
            embedding
        };
        let en = self.row_normalize(e2)?;
        let wn = self.row_normalize(weights)?;
        let wt = self.transpose(wn)?;
        let cos = self.matmul(en, wt)?; // [1, classes]
        let c = self.pick(cos, label)?;

        // cos(theta + m) = cos*cos(m) - sin*sin(m), with the sine squared
        // clamped away from zero so the gradient stays finite at |cos| = 1.
        let c2 = self.mul(c, c)?;
        let neg = self.scale(c2, -1.0);
        let one_minus = self.add_const(neg, 1.0);
        let sin2 = self.clamp(one_minus, 1e-12, 1.0)?;
        let sin_theta = self.sqrt(sin2)?;
        let term_cos = self.scale(c, margin.cos());
        let term_sin = self.scale(sin_theta, margin.sin());
        let phi = self.sub(term_cos, term_sin)?;

        // Replace the true-class logit: others keep scale*cos.
        let logits = self.scale(cos, scale);
        let phi_s = self.scale(phi, scale);
        let c_s = self.scale(c, scale);
        let delta = self.sub(phi_s, c_s)?;
        let mut hot = vec![0.0; classes];
        hot[label] = 1.0;
        let hot_t = Tensor::matrix(1, classes, hot)?;
        let hot_id = self.input(&hot_t)?;
        let patch = self.mul_bcast(hot_id, delta)?;
        let adjusted = self.add(logits, patch)?;

        let p = self.softmax_rows(adjusted)?;
        let p_label = self.pick(p, label)?;
        let lp = self.ln(p_label)?;
        Ok(self.scale(lp, -1.0))
    }

    /// Normalizes each row of a matrix to unit L2 norm.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sq = self.mul(x, x)?;
        let ss = self.row_sums(sq)?;
        if self.nodes[ss.0].values.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::ZeroNorm {
                op: "row_normalize",
            });
        }
        let norm = self.sqrt(ss)?;
        let inv = self.recip(norm)?;
        self.mul_col(x, inv)
    }

    /// Multi-head scaled dot-product self-attention over `x: [T, d]`.
    pub fn multihead_attention(
        &mut self,
        x: NodeId,
        w: &AttentionWeights,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (_, d) = require_matrix(&self.nodes[x.0].shape)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::HeadSplit { dim: d, heads });
        }
        let dh = d / heads;
        let q = self.linear(x, w.wq, w.bq)?;
        let k = self.linear(x, w.wk, w.bk)?;
        let v = self.linear(x, w.wv, w.bv)?;
        let mut outs = Vec::with_capacity(heads);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            let qi = self.slice_cols(q, h * dh, dh)?;
            let ki = self.slice_cols(k, h * dh, dh)?;
            let vi = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(ki)?;
            let scores = self.matmul(qi, kt)?;
            let scaled = self.scale(scores, inv_sqrt);
            let attn = self.softmax_rows(scaled)?;
            let oi = self.matmul(attn, vi)?;
            outs.push(oi);
        }
        let merged = self.concat_cols(&outs)?;
        self.linear(merged, w.wo, w.bo)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `seed` node. All gradient buffers are
    /// zeroed first, so calling this repeatedly yields identical gradients.
    pub fn backward(&mut self, seed: NodeId) -> Result<(), TensorError> {
        if self.nodes[seed.0].values.len() != 1 {
            return Err(TensorError::NonScalarSeed {
                shape: self.nodes[seed.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
        self.nodes[seed.0].grad[0] = 1.0;

        for idx in (0..=seed.0).rev() {
            // Split off this node's gradient so input grads can be borrowed
            // mutably; the op never reads its own grad after this point.
            let (head, tail) = self.nodes.split_at_mut(idx);
            let node = &tail[0];
            let g = &node.grad;
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::MatMul => {
                    let a = node.inputs[0].0;
                    let b = node.inputs[1].0;
                    let (m, k) = (head[a].shape[0], head[a].shape[1]);
                    let n = node.shape[1];
                    let a_vals = head[a].values.clone();
                    let b_vals = head[b].values.clone();
                    unsafe {
                        // dA += G * B^T
                        matrixmultiply::dgemm(
                            m,
                            n,
                            k,
                            1.0,
                            g.as_ptr(),
                            n as isize,
                            1,
                            b_vals.as_ptr(),
                            1,
                            n as isize,
                            1.0,
                            head[a].grad.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                        // dB += A^T * G
                        matrixmultiply::dgemm(
                            k,
                            m,
                            n,
                            1.0,
                            a_vals.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            1.0,
                            head[b].grad.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
                Op::Add => {
                    let (a, b) = (node.inputs[0].0, node.inputs[1].0);
                    if a == b {
                        for (ga, &gv) in head[a].grad.iter_mut().zip(g) {
                            *ga += 2.0 * gv;
                        }
                    } else {
                        for (i, &gv) in g.iter().enumerate() {
                            head[a].grad[i] += gv;
                        }
                        for (i, &gv) in g.iter().enumerate() {
                            head[b].grad[i] += gv;
                        }
                    }
                }
                Op::Sub => {
                    let (a, b) = (node.inputs[0].0, node.inputs[1].0);
                    if a == b {
                        // x - x: gradients cancel.
                    } else {
                        for (i, &gv) in g.iter().enumerate() {
                            head[a].grad[i] += gv;
                        }
                        for (i, &gv) in g.iter().enumerate() {
                            head[b].grad[i] -= gv;
                        }
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0].0, node.inputs[1].0);
                    if a == b {
                        let av = head[a].values.clone();
                        for (i, &gv) in g.iter().enumerate() {
                            head[a].grad[i] += 2.0 * gv * av[i];
                        }
                    } else {
                        let av = head[a].values.clone();
                        let bv = head[b].values.clone();
                        for (i, &gv) in g.iter().enumerate() {
                            head[a].grad[i] += gv * bv[i];
                        }
                        for (i, &gv) in g.iter().enumerate() {
                            head[b].grad[i] += gv * av[i];
                        }
                    }
                }
                Op::AddRow => {
                    let (x, b) = (node.inputs[0].0, node.inputs[1].0);
                    let c = head[b].values.len();
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv;
                    }
                    for (i, &gv) in g.iter().enumerate() {
                        head[b].grad[i % c] += gv;
                    }
                }
                Op::Scale { factor } => {
                    let x = node.inputs[0].0;
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv * factor;
                    }
                }
                Op::AddConst => {
                    let x = node.inputs[0].0;
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv;
                    }
                }
                Op::Relu => {
                    let x = node.inputs[0].0;
                    let xv = head[x].values.clone();
                    for (i, &gv) in g.iter().enumerate() {
                        if xv[i] > 0.0 {
                            head[x].grad[i] += gv;
                        }
                    }
                }
                Op::Gelu => {
                    let x = node.inputs[0].0;
                    let xv = head[x].values.clone();
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv * gelu_grad(xv[i]);
                    }
                }
                Op::Tanh => {
                    let x = node.inputs[0].0;
                    for (i, &gv) in g.iter().enumerate() {
                        let y = node.values[i];
                        head[x].grad[i] += gv * (1.0 - y * y);
                    }
                }
                Op::Exp => {
                    let x = node.inputs[0].0;
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv * node.values[i];
                    }
                }
                Op::Ln => {
                    let x = node.inputs[0].0;
                    let xv = head[x].values.clone();
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv / xv[i];
                    }
                }
                Op::Sqrt => {
                    let x = node.inputs[0].0;
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv * 0.5 / node.values[i];
                    }
                }
                Op::Abs => {
                    let x = node.inputs[0].0;
                    let xv = head[x].values.clone();
                    for (i, &gv) in g.iter().enumerate() {
                        let s = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        head[x].grad[i] += gv * s;
                    }
                }
                Op::Recip => {
                    let x = node.inputs[0].0;
                    for (i, &gv) in g.iter().enumerate() {
                        let y = node.values[i];
                        head[x].grad[i] -= gv * y * y;
                    }
                }
                Op::Clamp { lo, hi } => {
                    let x = node.inputs[0].0;
                    let xv = head[x].values.clone();
                    for (i, &gv) in g.iter().enumerate() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            head[x].grad[i] += gv;
                        }
                    }
                }
                Op::Transpose => {
                    let x = node.inputs[0].0;
                    let (r, c) = (head[x].shape[0], head[x].shape[1]);
                    for i in 0..r {
                        for j in 0..c {
                            head[x].grad[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::SliceCols { start, width } => {
                    let x = node.inputs[0].0;
                    let c = head[x].shape[1];
                    let r = head[x].shape[0];
                    for i in 0..r {
                        for j in 0..*width {
                            head[x].grad[i * c + start + j] += g[i * width + j];
                        }
                    }
                }
                Op::ConcatCols => {
                    let r = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let w = head[inp.0].shape[1];
                        for i in 0..r {
                            for j in 0..w {
                                head[inp.0].grad[i * w + j] += g[i * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::Reshape => {
                    let x = node.inputs[0].0;
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv;
                    }
                }
                Op::MeanRows => {
                    let x = node.inputs[0].0;
                    let (r, c) = (head[x].shape[0], head[x].shape[1]);
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            head[x].grad[i * c + j] += g[j] * inv;
                        }
                    }
                }
                Op::RowSums => {
                    let x = node.inputs[0].0;
                    let (r, c) = (head[x].shape[0], head[x].shape[1]);
                    for i in 0..r {
                        for j in 0..c {
                            head[x].grad[i * c + j] += g[i];
                        }
                    }
                }
                Op::SumAll => {
                    let x = node.inputs[0].0;
                    for gx in head[x].grad.iter_mut() {
                        *gx += g[0];
                    }
                }
                Op::Pick { index } => {
                    let x = node.inputs[0].0;
                    head[x].grad[*index] += g[0];
                }
                Op::MulBcast => {
                    let (x, s) = (node.inputs[0].0, node.inputs[1].0);
                    let f = head[s].values[0];
                    let xv = head[x].values.clone();
                    for (i, &gv) in g.iter().enumerate() {
                        head[x].grad[i] += gv * f;
                    }
                    let mut acc = 0.0;
                    for (i, &gv) in g.iter().enumerate() {
                        acc += gv * xv[i];
                    }
                    head[s].grad[0] += acc;
                }
                Op::MulCol => {
                    let (x, s) = (node.inputs[0].0, node.inputs[1].0);
                    let (r, c) = (head[x].shape[0], head[x].shape[1]);
                    let sv = head[s].values.clone();
                    let xv = head[x].values.clone();
                    for i in 0..r {
                        for j in 0..c {
                            head[x].grad[i * c + j] += g[i * c + j] * sv[i];
                        }
                    }
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i * c + j] * xv[i * c + j];
                        }
                        head[s].grad[i] += acc;
                    }
                }
                Op::SoftmaxRows => {
                    let x = node.inputs[0].0;
                    let (r, c) = rows_cols(&node.shape).expect("validated at build");
                    for i in 0..r {
                        let p = &node.values[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..c {
                            head[x].grad[i * c + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { eps } => {
                    let (x, gain, bias) = (node.inputs[0].0, node.inputs[1].0, node.inputs[2].0);
                    let (r, d) = rows_cols(&node.shape).expect("validated at build");
                    let xv = head[x].values.clone();
                    let gv = head[gain].values.clone();
                    for i in 0..r {
                        let row = &xv[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = &g[i * d..(i + 1) * d];
                        // dxhat, plus parameter grads.
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            head[gain].grad[j] += gr[j] * xhat;
                            head[bias].grad[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * (row[j] - mean) * inv)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            head[x].grad[i * d + j] +=
                                inv * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                Op::Correlate2d { kern, kh, kw } => {
                    let x = node.inputs[0].0;
                    let (r, c) = (head[x].shape[0], head[x].shape[1]);
                    let hh = (*kh / 2) as isize;
                    let hw = (*kw / 2) as isize;
                    for t in 0..r as isize {
                        for u in 0..c as isize {
                            let gv = g[(t as usize) * c + u as usize];
                            if gv == 0.0 {
                                continue;
                            }
                            let center = (t as usize) * c + u as usize;
                            head[x].grad[center] += gv;
                            for i in 0..*kh as isize {
                                for j in 0..*kw as isize {
                                    let ti = (t + i - hh).clamp(0, r as isize - 1) as usize;
                                    let uj = (u + j - hw).clamp(0, c as isize - 1) as usize;
                                    let kv = gv * kern[(i as usize) * kw + j as usize];
                                    head[x].grad[ti * c + uj] += kv;
                                    head[x].grad[center] -= kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shared forward kernel for 2-D cross-correlation with replicate padding;
/// also used directly by the non-differentiable filter paths.
///
/// Computed in residual form, `y = x_center + sum(k * (x_tap - x_center))`,
/// which equals the plain weighted sum whenever the kernel sums to 1 but
/// preserves constant inputs bit-exactly regardless of rounding.
pub(crate) fn correlate2d_replicate(
    src: &[f64],
    r: usize,
    c: usize,
    kern: &[f64],
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let hh = (kh / 2) as isize;
    let hw = (kw / 2) as isize;
    let mut out = vec![0.0; r * c];
    for t in 0..r as isize {
        for u in 0..c as isize {
            let center = src[(t as usize) * c + u as usize];
            let mut acc = center;
            for i in 0..kh as isize {
                for j in 0..kw as isize {
                    let ti = (t + i - hh).clamp(0, r as isize - 1) as usize;
                    let uj = (u + j - hw).clamp(0, c as isize - 1) as usize;
                    acc += kern[(i as usize) * kw + j as usize] * (src[ti * c + uj] - center);
                }
            }
            out[(t as usize) * c + u as usize] = acc;
        }
    }
    out
}
