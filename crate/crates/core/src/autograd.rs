//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Tape`] is an arena of [`Tensor`] nodes. Forward ops append nodes that
//! record their inputs and enough saved state to run the chain rule;
//! [`Tape::backward`] walks the arena in reverse, visiting each node once.
//! Node inputs always precede the node itself, so arena order is a
//! topological order.
//!
//! The op set is exactly what a small decoder-only transformer and its
//! training losses need: matrix products (plain and B-transposed), row
//! softmax, layer normalization, GELU/ReLU, embedding lookup, row/column
//! concatenation and row slicing, elementwise arithmetic, masked
//! reductions, the token-level NLL, and a fused KL-against-reference loss.
//! There is no broadcasting beyond bias addition over the last axis.
//!
//! A tape is single-threaded: tensors are immutable after creation except
//! for their gradient buffers, and a tape must not be shared across
//! concurrently executing computations. Independent tapes may run in
//! parallel.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// Dense row-major f32 tensor.
///
/// `grad` is only ever allocated for tensors with `requires_grad` set, and
/// only once backward reaches them.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Recorded operation: inputs plus saved forward state for the backward rule.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A[m,k] * B[k,n]
    Matmul { a: TensorId, b: TensorId },
    /// C = A[m,k] * B[n,k]^T
    MatmulTransB { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// Bias broadcast over the last axis.
    AddBias { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f32 },
    /// -inf above the main diagonal of a square matrix.
    CausalMask { a: TensorId },
    /// Row softmax; the node's own output is the saved state.
    Softmax { a: TensorId },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Normalized pre-affine activations, one entry per element of x.
        xhat: Vec<f32>,
        /// 1/sqrt(var + eps), one entry per row.
        inv_std: Vec<f32>,
    },
    Gelu { a: TensorId },
    Relu { a: TensorId },
    Embedding { table: TensorId, ids: Vec<usize> },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    ConcatCols { parts: Vec<TensorId> },
    Reshape { a: TensorId },
    Log { a: TensorId },
    SumAll { a: TensorId },
    MaskedSum { a: TensorId, mask: Vec<bool> },
    MaskedMean { a: TensorId, mask: Vec<bool>, count: usize },
    /// Mean over non-pad rows of -log p[row, target[row]].
    NllToken {
        probs: TensorId,
        targets: Vec<u32>,
        pad_id: u32,
        count: usize,
    },
    /// Token-level KL(softmax(logits) || exp(ref_logp)) averaged over
    /// masked rows; `ref_logp` is a constant, so gradients reach only the
    /// logits side.
    KlToRef {
        logits: TensorId,
        ref_logp: Vec<f32>,
        mask: Vec<bool>,
        logp: Vec<f32>,
        row_kl: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Arena of tensors plus their recorded operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    /// Register a new leaf tensor.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "leaf: shape {} implies {} elements, data has {}",
                shape_str(&shape),
                numel,
                data.len()
            )));
        }
        Ok(self.push(
            Tensor { shape, data, requires_grad, grad: None },
            Op::Leaf,
        ))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.node(id).tensor.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.node(id).tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).tensor.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> Result<f32> {
        let t = &self.node(id).tensor;
        if t.numel() != 1 {
            return Err(Error::Usage(format!(
                "expected scalar, got shape {}",
                shape_str(&t.shape)
            )));
        }
        Ok(t.data[0])
    }

    /// Drop every gradient buffer on the tape.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.node(*id).tensor.requires_grad)
    }

    fn check_2d(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "{what}: expected 2-D tensor, got {}",
                shape_str(s)
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Rows/cols view of any tensor of rank >= 1, flattening leading axes.
    fn row_view(&self, id: TensorId) -> (usize, usize) {
        let s = self.shape(id);
        let cols = *s.last().unwrap_or(&1);
        let rows = self.node(id).tensor.numel() / cols.max(1);
        (rows, cols)
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.check_2d(a, "matmul lhs")?;
        let (k2, n) = self.check_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ, {} x {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let mut out = vec![0.0f32; m * n];
        mm_accum(&mut out, self.data(a), self.data(b), m, k, n);
        let rg = self.requires(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out, requires_grad: rg, grad: None },
            Op::Matmul { a, b },
        ))
    }

    /// C = A * B^T, with B stored row-major as [n, k].
    pub fn matmul_trans_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.check_2d(a, "matmul_trans_b lhs")?;
        let (n, k2) = self.check_2d(b, "matmul_trans_b rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_trans_b: inner dimensions differ, {} x {}^T",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                let mut s = 0.0f32;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                out[i * n + j] = s;
            }
        }
        let rg = self.requires(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out, requires_grad: rg, grad: None },
            Op::MatmulTransB { a, b },
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {} vs {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a, b]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Add { a, b }))
    }

    /// Add a [cols]-shaped bias to every row of `a`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.row_view(a);
        let bs = self.shape(bias);
        if bs != [cols] {
            return Err(Error::Shape(format!(
                "add_bias: bias {} does not match last axis of {}",
                shape_str(bs),
                shape_str(self.shape(a))
            )));
        }
        let ad = self.data(a);
        let bd = self.data(bias);
        let mut data = Vec::with_capacity(ad.len());
        for r in 0..rows {
            for c in 0..cols {
                data.push(ad[r * cols + c] + bd[c]);
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a, bias]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: {} vs {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a, b]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Scale { a, c }))
    }

    /// Set entries above the main diagonal to -inf (pre-softmax causal mask).
    pub fn causal_mask(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.check_2d(a, "causal_mask")?;
        if r != c {
            return Err(Error::Shape(format!(
                "causal_mask: matrix must be square, got {}",
                shape_str(self.shape(a))
            )));
        }
        let ad = self.data(a);
        let mut data = ad.to_vec();
        for i in 0..r {
            for j in (i + 1)..c {
                data[i * c + j] = f32::NEG_INFINITY;
            }
        }
        let rg = self.requires(&[a]);
        Ok(self.push(
            Tensor { shape: vec![r, c], data, requires_grad: rg, grad: None },
            Op::CausalMask { a },
        ))
    }

    /// Numerically stable softmax along the last axis.
    ///
    /// -inf entries are legal (they come from the causal mask) and produce
    /// exact zeros; NaN input or an all -inf row is a numeric error.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.row_view(a);
        let ad = self.data(a);
        if ad.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax: NaN in input".into()));
        }
        let mut data = vec![0.0f32; ad.len()];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                return Err(Error::Numeric(format!("softmax: row {r} is entirely -inf")));
            }
            let mut sum = 0.0f32;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Softmax { a }))
    }

    /// Per-row normalization to zero mean / unit variance, then an affine
    /// transform by `gain` and `bias` over the last axis.
    pub fn layernorm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f32) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm: eps must be positive, got {eps}")));
        }
        let (rows, cols) = self.row_view(x);
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::Shape(format!(
                "layernorm: gain {} / bias {} do not match last axis of {}",
                shape_str(self.shape(gain)),
                shape_str(self.shape(bias)),
                shape_str(self.shape(x))
            )));
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut xhat = vec![0.0f32; xd.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut data = vec![0.0f32; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                data[r * cols + c] = xh * gd[c] + bd[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data, requires_grad: rg, grad: None },
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Gelu { a }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Relu { a }))
    }

    /// Gather rows of `table` ([vocab, dim]) by index.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, dim) = self.check_2d(table, "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Usage(format!(
                "embedding: index {bad} out of range for table with {vocab} rows"
            )));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let rg = self.requires(&[table]);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), dim], data, requires_grad: rg, grad: None },
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// Stack 2-D tensors with identical column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows: no parts".into()));
        }
        let (_, cols) = self.check_2d(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.check_2d(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column count {c} differs from {cols}"
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let rg = self.requires(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, cols], data, requires_grad: rg, grad: None },
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    /// Contiguous row range [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.check_2d(a, "slice_rows")?;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows: range {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.requires(&[a]);
        Ok(self.push(
            Tensor { shape: vec![len, cols], data, requires_grad: rg, grad: None },
            Op::SliceRows { a, start },
        ))
    }

    /// Concatenate 2-D tensors with identical row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols: no parts".into()));
        }
        let (rows, _) = self.check_2d(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.check_2d(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row count {r} differs from {rows}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0f32; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.requires(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, total], data, requires_grad: rg, grad: None },
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).tensor.numel() {
            return Err(Error::Shape(format!(
                "reshape: {} -> {} changes element count",
                shape_str(self.shape(a)),
                shape_str(&shape)
            )));
        }
        let data = self.data(a).to_vec();
        let rg = self.requires(&[a]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Reshape { a }))
    }

    /// Elementwise natural log; rejects non-positive inputs.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        let data: Vec<f32> = self.data(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Log { a }))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        let rg = self.requires(&[a]);
        Ok(self.push(
            Tensor { shape: vec![1], data: vec![s as f32], requires_grad: rg, grad: None },
            Op::SumAll { a },
        ))
    }

    /// Sum over elements whose mask entry is true.
    pub fn masked_sum(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        self.check_mask(a, mask)?;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x as f64)
            .sum();
        let rg = self.requires(&[a]);
        Ok(self.push(
            Tensor { shape: vec![1], data: vec![s as f32], requires_grad: rg, grad: None },
            Op::MaskedSum { a, mask: mask.to_vec() },
        ))
    }

    /// Mean over elements whose mask entry is true.
    pub fn masked_mean(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        self.check_mask(a, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyCriteria);
        }
        let s: f64 = self
            .data(a)
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x as f64)
            .sum();
        let rg = self.requires(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![(s / count as f64) as f32],
                requires_grad: rg,
                grad: None,
            },
            Op::MaskedMean { a, mask: mask.to_vec(), count },
        ))
    }

    fn check_mask(&self, a: TensorId, mask: &[bool]) -> Result<()> {
        let n = self.node(a).tensor.numel();
        if n != mask.len() {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} elements",
                mask.len(),
                n
            )));
        }
        Ok(())
    }

    /// Mean over non-pad positions of -log p(target).
    ///
    /// `probs` is [positions, vocab] with rows on the simplex (softmax
    /// output); `targets[t] == pad_id` drops position t from both the sum
    /// and the divisor.
    pub fn nll_token(&mut self, probs: TensorId, targets: &[u32], pad_id: u32) -> Result<TensorId> {
        let (rows, vocab) = self.check_2d(probs, "nll_token probs")?;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "nll_token: {} targets for {} probability rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad_id && t as usize >= vocab) {
            return Err(Error::Usage(format!(
                "nll_token: target {bad} out of range for vocab {vocab}"
            )));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::EmptyCriteria);
        }
        let pd = self.data(probs);
        let mut total = 0.0f64;
        for (t, &tgt) in targets.iter().enumerate() {
            if tgt != pad_id {
                total -= (pd[t * vocab + tgt as usize] as f64).ln();
            }
        }
        let rg = self.requires(&[probs]);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![(total / count as f64) as f32],
                requires_grad: rg,
                grad: None,
            },
            Op::NllToken { probs, targets: targets.to_vec(), pad_id, count },
        ))
    }

    /// Token-level KL divergence of the model's next-token distributions
    /// against a frozen reference, averaged over masked rows.
    ///
    /// `logits` is [positions, vocab]; `ref_logp` holds the reference
    /// log-probabilities for the same rows as plain data, so gradients flow
    /// only into `logits`.
    pub fn kl_to_ref(&mut self, logits: TensorId, ref_logp: &[f32], mask: &[bool]) -> Result<TensorId> {
        let (rows, vocab) = self.check_2d(logits, "kl_to_ref logits")?;
        if ref_logp.len() != rows * vocab {
            return Err(Error::Shape(format!(
                "kl_to_ref: reference log-probs have {} entries, logits {}",
                ref_logp.len(),
                rows * vocab
            )));
        }
        if mask.len() != rows {
            return Err(Error::Shape(format!(
                "kl_to_ref: mask length {} for {} rows",
                mask.len(),
                rows
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyCriteria);
        }
        let ld = self.data(logits);
        let logp = log_softmax_rows(ld, rows, vocab);
        let mut row_kl = vec![0.0f64; rows];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let mut kl = 0.0f64;
            for v in 0..vocab {
                let lp = logp[r * vocab + v] as f64;
                let p = lp.exp();
                if p > 0.0 {
                    kl += p * (lp - ref_logp[r * vocab + v] as f64);
                }
            }
            row_kl[r] = kl;
            total += kl;
        }
        let rg = self.requires(&[logits]);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![(total / count as f64) as f32],
                requires_grad: rg,
                grad: None,
            },
            Op::KlToRef {
                logits,
                ref_logp: ref_logp.to_vec(),
                mask: mask.to_vec(),
                logp,
                row_kl,
                count,
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss; accumulates into the grad buffer
    /// of every `requires_grad` ancestor. Calling backward again without
    /// [`Tape::zero_grads`] adds a second contribution.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let t = &self.node(loss).tensor;
        if t.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {}",
                shape_str(&t.shape)
            )));
        }
        if !t.requires_grad {
            return Ok(()); // nothing upstream wants gradients
        }
        // Seed buffers local to this sweep so repeated backward calls
        // accumulate into tensor grads exactly once per call.
        let mut seed: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        seed[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = seed[idx].take() else { continue };
            // Record into the tensor's persistent grad buffer.
            {
                let tensor = &mut self.nodes[idx].tensor;
                let buf = tensor.grad.get_or_insert_with(|| vec![0.0; out_grad.len()]);
                for (g, o) in buf.iter_mut().zip(&out_grad) {
                    *g += o;
                }
            }
            let contribs = self.input_grads(idx, &out_grad)?;
            for (TensorId(i), c) in contribs {
                match &mut seed[i] {
                    Some(buf) => {
                        for (g, v) in buf.iter_mut().zip(&c) {
                            *g += v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to each requires-grad input.
    fn input_grads(&self, idx: usize, dout: &[f32]) -> Result<Vec<(TensorId, Vec<f32>)>> {
        let node = &self.nodes[idx];
        let mut out: Vec<(TensorId, Vec<f32>)> = Vec::new();
        let want = |id: TensorId| self.node(id).tensor.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if want(*a) {
                    // dA = dC * B^T
                    let bd = self.data(*b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0f32;
                            for j in 0..n {
                                s += dout[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    out.push((*a, da));
                }
                if want(*b) {
                    // dB = A^T * dC
                    let ad = self.data(*a);
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += av * dout[i * n + j];
                                }
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::MatmulTransB { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if want(*a) {
                    // dA = dC * B
                    let bd = self.data(*b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let dv = dout[i * n + j];
                            if dv != 0.0 {
                                for p in 0..k {
                                    da[i * k + p] += dv * bd[j * k + p];
                                }
                            }
                        }
                    }
                    out.push((*a, da));
                }
                if want(*b) {
                    // dB = dC^T * A
                    let ad = self.data(*a);
                    let mut db = vec![0.0f32; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let dv = dout[i * n + j];
                            if dv != 0.0 {
                                for p in 0..k {
                                    db[j * k + p] += dv * ad[i * k + p];
                                }
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    out.push((*a, dout.to_vec()));
                }
                if want(*b) {
                    out.push((*b, dout.to_vec()));
                }
            }
            Op::AddBias { a, bias } => {
                let (rows, cols) = self.row_view(*a);
                if want(*a) {
                    out.push((*a, dout.to_vec()));
                }
                if want(*bias) {
                    let mut db = vec![0.0f32; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += dout[r * cols + c];
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let bd = self.data(*b);
                    out.push((*a, dout.iter().zip(bd).map(|(d, y)| d * y).collect()));
                }
                if want(*b) {
                    let ad = self.data(*a);
                    out.push((*b, dout.iter().zip(ad).map(|(d, x)| d * x).collect()));
                }
            }
            Op::Scale { a, c } => {
                if want(*a) {
                    out.push((*a, dout.iter().map(|d| d * c).collect()));
                }
            }
            Op::CausalMask { a } => {
                if want(*a) {
                    let n = self.shape(*a)[0];
                    let mut da = dout.to_vec();
                    for i in 0..n {
                        for j in (i + 1)..n {
                            da[i * n + j] = 0.0;
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::Softmax { a } => {
                if want(*a) {
                    let (rows, cols) = self.row_view(*a);
                    let y = &node.tensor.data;
                    let mut da = vec![0.0f32; y.len()];
                    for r in 0..rows {
                        let row = &y[r * cols..(r + 1) * cols];
                        let drow = &dout[r * cols..(r + 1) * cols];
                        let dot: f32 = row.iter().zip(drow).map(|(y, d)| y * d).sum();
                        for c in 0..cols {
                            da[r * cols + c] = row[c] * (drow[c] - dot);
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, cols) = self.row_view(*x);
                let gd = self.data(*gain);
                if want(*gain) {
                    let mut dg = vec![0.0f32; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += dout[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    out.push((*gain, dg));
                }
                if want(*bias) {
                    let mut db = vec![0.0f32; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += dout[r * cols + c];
                        }
                    }
                    out.push((*bias, db));
                }
                if want(*x) {
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0f32;
                        let mut mean_dxhat_xhat = 0.0f32;
                        for c in 0..cols {
                            let dxh = dout[r * cols + c] * gd[c];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * cols + c];
                        }
                        mean_dxhat /= cols as f32;
                        mean_dxhat_xhat /= cols as f32;
                        for c in 0..cols {
                            let dxh = dout[r * cols + c] * gd[c];
                            dx[r * cols + c] = inv_std[r]
                                * (dxh - mean_dxhat - xhat[r * cols + c] * mean_dxhat_xhat);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gelu { a } => {
                if want(*a) {
                    let ad = self.data(*a);
                    out.push((
                        *a,
                        dout.iter()
                            .zip(ad)
                            .map(|(d, &x)| d * gelu_grad_scalar(x))
                            .collect(),
                    ));
                }
            }
            Op::Relu { a } => {
                if want(*a) {
                    let ad = self.data(*a);
                    out.push((
                        *a,
                        dout.iter()
                            .zip(ad)
                            .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                            .collect(),
                    ));
                }
            }
            Op::Embedding { table, ids } => {
                if want(*table) {
                    let dim = self.shape(*table)[1];
                    let mut dt = vec![0.0f32; self.node(*table).tensor.numel()];
                    for (t, &i) in ids.iter().enumerate() {
                        for c in 0..dim {
                            dt[i * dim + c] += dout[t * dim + c];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::ConcatRows { parts } => {
                let cols = node.tensor.shape[1];
                let mut row = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    if want(p) {
                        out.push((p, dout[row * cols..(row + r) * cols].to_vec()));
                    }
                    row += r;
                }
            }
            Op::SliceRows { a, start } => {
                if want(*a) {
                    let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let len = node.tensor.shape[0];
                    let mut da = vec![0.0f32; rows * cols];
                    da[start * cols..(start + len) * cols].copy_from_slice(dout);
                    out.push((*a, da));
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.tensor.shape[0];
                let total = node.tensor.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if want(p) {
                        let mut dp = vec![0.0f32; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&dout[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::Reshape { a } => {
                if want(*a) {
                    out.push((*a, dout.to_vec()));
                }
            }
            Op::Log { a } => {
                if want(*a) {
                    let ad = self.data(*a);
                    out.push((*a, dout.iter().zip(ad).map(|(d, x)| d / x).collect()));
                }
            }
            Op::SumAll { a } => {
                if want(*a) {
                    let n = self.node(*a).tensor.numel();
                    out.push((*a, vec![dout[0]; n]));
                }
            }
            Op::MaskedSum { a, mask } => {
                if want(*a) {
                    out.push((
                        *a,
                        mask.iter().map(|&m| if m { dout[0] } else { 0.0 }).collect(),
                    ));
                }
            }
            Op::MaskedMean { a, mask, count } => {
                if want(*a) {
                    let g = dout[0] / *count as f32;
                    out.push((*a, mask.iter().map(|&m| if m { g } else { 0.0 }).collect()));
                }
            }
            Op::NllToken { probs, targets, pad_id, count } => {
                if want(*probs) {
                    let vocab = self.shape(*probs)[1];
                    let pd = self.data(*probs);
                    let mut dp = vec![0.0f32; pd.len()];
                    let g = dout[0] / *count as f32;
                    for (t, &tgt) in targets.iter().enumerate() {
                        if tgt != *pad_id {
                            let i = t * vocab + tgt as usize;
                            dp[i] = -g / pd[i];
                        }
                    }
                    out.push((*probs, dp));
                }
            }
            Op::KlToRef { logits, ref_logp, mask, logp, row_kl, count } => {
                if want(*logits) {
                    let vocab = self.shape(*logits)[1];
                    let rows = self.shape(*logits)[0];
                    let mut dz = vec![0.0f32; rows * vocab];
                    let g = dout[0] / *count as f32;
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        for v in 0..vocab {
                            let lp = logp[r * vocab + v];
                            let p = lp.exp();
                            dz[r * vocab + v] =
                                g * p * (lp - ref_logp[r * vocab + v] - row_kl[r] as f32);
                        }
                    }
                    out.push((*logits, dz));
                }
            }
        }
        Ok(out)
    }
}

/// out += a[m,k] * b[k,n]
fn mm_accum(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let br = &b[p * n..(p + 1) * n];
                let or = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
}

const GELU_S: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise log-softmax with f64 accumulation of the partition function.
pub fn log_softmax_rows(logits: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
        let lse = max as f64 + sum.ln();
        for c in 0..cols {
            out[r * cols + c] = (row[c] as f64 - lse) as f32;
        }
    }
    out
}

/// Row-wise softmax outside the tape (sampling, oracles).
pub fn softmax_rows(logits: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (c, &x) in row.iter().enumerate() {
            let e = (x - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    out
}
