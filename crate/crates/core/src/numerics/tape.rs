//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward operation appends an [`Op`] describing its inputs, output
//! and the dimensions needed to replay it. [`Tape::backward`] walks the ops
//! in exact reverse execution order and accumulates gradient contributions
//! additively, so a buffer consumed by several ops receives the sum of the
//! branch gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
}

enum Op {
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Transpose { input: usize, out: usize, rows: usize, cols: usize },
    SoftmaxRows { input: usize, out: usize, rows: usize, cols: usize },
    LayerNorm { input: usize, gain: usize, bias: usize, out: usize, rows: usize, cols: usize, eps: f64 },
    Conv3x3 { input: usize, kernel: usize, bias: usize, out: usize, c_in: usize, c_out: usize, h: usize, w: usize },
    Upsample2x { input: usize, out: usize, c: usize, h: usize, w: usize },
    Relu { input: usize, out: usize },
    Sigmoid { input: usize, out: usize },
    Abs { input: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { input: usize, factor: f64, out: usize },
    AddConst { input: usize, out: usize },
    BiasAddRows { input: usize, bias: usize, out: usize, rows: usize, cols: usize },
    SumAll { input: usize, out: usize },
    ConcatCols { inputs: Vec<usize>, out: usize, rows: usize, widths: Vec<usize> },
    PairwiseAbsDiff { field: usize, out: usize, n: usize },
    RowVarianceMean { field: usize, out: usize, w: usize, h: usize },
    EmbedAdd { nodes: usize, bank: usize, idx: Vec<usize>, out: usize, n: usize, c: usize },
    GatherPairsConcat { nodes: usize, pairs: Vec<(usize, usize)>, out: usize, c: usize },
    ScatterEdgeBias { values: usize, pairs: Vec<(usize, usize)>, out: usize, n: usize },
    PatchExtract { image: usize, out: usize, h_img: usize, w_img: usize, patch: usize },
}

/// Per-buffer gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss never
    /// depended on it (which means the gradient is identically zero).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Records forward operations and replays them in reverse.
#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn alloc(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.bufs.len();
        self.bufs.push(Buf { data, shape });
        Var(id)
    }

    /// Copies a tensor onto the tape as a leaf value.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.alloc(t.data().to_vec(), t.dims().to_vec())
    }

    pub fn input_slice(&mut self, data: &[f64], shape: Vec<usize>) -> Var {
        self.alloc(data.to_vec(), shape)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.bufs[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape buffer is self-consistent")
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![0, 0] });
        }
        Ok((s[0], s[1]))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// c[i,j] = Σ_k a[i,k]·b[k,j]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape2(a, "matmul")?;
        let (kb, n) = self.shape2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_kernel(self.value(a), self.value(b), m, ka, n);
        let v = self.alloc(out, vec![m, n]);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out: v.0, m, k: ka, n });
        Ok(v)
    }

    /// Reinterprets `input` as `rows`×`cols` and transposes it.
    pub fn transpose(&mut self, input: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(input).len(), rows * cols, "transpose: length mismatch");
        let x = self.value(input);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        let v = self.alloc(out, vec![cols, rows]);
        self.ops.push(Op::Transpose { input: input.0, out: v.0, rows, cols });
        v
    }

    // ── normalization ────────────────────────────────────────────────

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, input: Var) -> Var {
        let s = self.shape(input);
        assert_eq!(s.len(), 2, "softmax_rows expects a rank-2 input");
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(input);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let v = self.alloc(out, vec![rows, cols]);
        self.ops.push(Op::SoftmaxRows { input: input.0, out: v.0, rows, cols });
        v
    }

    /// Per-row mean/variance normalization followed by a `gain`/`bias` affine map.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape2(input, "layer_norm")?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![cols],
                rhs: vec![self.value(gain).len(), self.value(bias).len()],
            });
        }
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let mut out = vec![0.0; rows * cols];
        {
            let x = self.value(input);
            let g = &self.bufs[gain.0].data;
            let b = &self.bufs[bias.0].data;
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let (mean, var) = row_stats(row);
                let inv = 1.0 / (var + eps).sqrt();
                let orow = &mut out[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    orow[c] = g[c] * (row[c] - mean) * inv + b[c];
                }
            }
        }
        let v = self.alloc(out, vec![rows, cols]);
        self.ops.push(Op::LayerNorm { input: input.0, gain: gain.0, bias: bias.0, out: v.0, rows, cols, eps });
        Ok(v)
    }

    // ── convolution / resampling ─────────────────────────────────────

    /// 3×3 cross-correlation with zero padding of 1. `input` is read as
    /// `c_in`×`h`×`w`; the kernel must be `c_out`×`c_in`×3×3.
    pub fn conv2d_3x3(&mut self, input: Var, kernel: Var, bias: Var, h: usize, w: usize) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::ShapeMismatch { op: "conv2d_3x3", lhs: ks, rhs: vec![0, 0, 3, 3] });
        }
        let (c_out, c_in) = (ks[0], ks[1]);
        if self.value(input).len() != c_in * h * w {
            return Err(Error::ShapeMismatch {
                op: "conv2d_3x3",
                lhs: self.shape(input).to_vec(),
                rhs: vec![c_in, h, w],
            });
        }
        if self.value(bias).len() != c_out {
            return Err(Error::ShapeMismatch {
                op: "conv2d_3x3",
                lhs: vec![self.value(bias).len()],
                rhs: vec![c_out],
            });
        }
        let out = conv3x3_kernel(self.value(input), &self.bufs[kernel.0].data, &self.bufs[bias.0].data, c_in, c_out, h, w);
        let v = self.alloc(out, vec![c_out, h, w]);
        self.ops.push(Op::Conv3x3 { input: input.0, kernel: kernel.0, bias: bias.0, out: v.0, c_in, c_out, h, w });
        Ok(v)
    }

    /// Nearest-neighbor 2× upsampling of a `c`×`h`×`w` buffer.
    pub fn upsample2x(&mut self, input: Var, c: usize, h: usize, w: usize) -> Var {
        assert_eq!(self.value(input).len(), c * h * w, "upsample2x: length mismatch");
        let x = self.value(input);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[ch * h * w + i * w + j];
                    let base = ch * h2 * w2 + 2 * i * w2 + 2 * j;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + w2] = v;
                    out[base + w2 + 1] = v;
                }
            }
        }
        let v = self.alloc(out, vec![c, h2, w2]);
        self.ops.push(Op::Upsample2x { input: input.0, out: v.0, c, h, w });
        v
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(input).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::Relu { input: input.0, out: v.0 });
        v
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.shape(input).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::Sigmoid { input: input.0, out: v.0 });
        v
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|v| v.abs()).collect();
        let shape = self.shape(input).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::Abs { input: input.0, out: v.0 });
        v
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::Add { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::Sub { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::Scale { input: input.0, factor, out: v.0 });
        v
    }

    pub fn add_const(&mut self, input: Var, constant: f64) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|v| v + constant).collect();
        let shape = self.shape(input).to_vec();
        let v = self.alloc(out, shape);
        self.ops.push(Op::AddConst { input: input.0, out: v.0 });
        v
    }

    /// Adds `bias` (length = cols) to every row of a rank-2 buffer.
    pub fn bias_add_rows(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape2(input, "bias_add_rows")?;
        if self.value(bias).len() != cols {
            return Err(Error::ShapeMismatch {
                op: "bias_add_rows",
                lhs: self.shape(input).to_vec(),
                rhs: vec![self.value(bias).len()],
            });
        }
        let mut out = self.value(input).to_vec();
        {
            let b = &self.bufs[bias.0].data;
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] += b[c];
                }
            }
        }
        let v = self.alloc(out, vec![rows, cols]);
        self.ops.push(Op::BiasAddRows { input: input.0, bias: bias.0, out: v.0, rows, cols });
        Ok(v)
    }

    /// Sum of all entries, as a 1-element buffer.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).iter().sum();
        let v = self.alloc(vec![s], vec![1]);
        self.ops.push(Op::SumAll { input: input.0, out: v.0 });
        v
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        let s = self.sum_all(input);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenates rank-2 buffers with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols: empty input list");
        let (rows, _) = self.shape2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let x = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&x[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let v = self.alloc(out, vec![rows, total]);
        self.ops.push(Op::ConcatCols { inputs: parts.iter().map(|p| p.0).collect(), out: v.0, rows, widths });
        Ok(v)
    }

    // ── graph-specific ops ───────────────────────────────────────────

    /// out[i,j] = |f[i] − f[j]| for a length-`n` field; symmetric with a
    /// zero diagonal by construction.
    pub fn pairwise_abs_diff(&mut self, field: Var) -> Var {
        let f = self.value(field);
        let n = f.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (f[i] - f[j]).abs();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let v = self.alloc(out, vec![n, n]);
        self.ops.push(Op::PairwiseAbsDiff { field: field.0, out: v.0, n });
        v
    }

    /// Mean over all nodes of the squared deviation from the node's
    /// grid-row mean: (1/n)·Σ_rows Σ_{i in row} (f_i − mean_row)².
    ///
    /// Rows are centered on their first element before the mean is taken,
    /// which leaves the value unchanged but makes it exactly zero for
    /// bit-identical constant rows.
    pub fn row_variance_mean(&mut self, field: Var, w: usize, h: usize) -> Var {
        assert_eq!(self.value(field).len(), w * h, "row_variance_mean: field/grid mismatch");
        let f = self.value(field);
        let mut q = 0.0;
        for y in 0..h {
            let row = &f[y * w..(y + 1) * w];
            let mean_c = row.iter().map(|v| v - row[0]).sum::<f64>() / w as f64;
            q += row.iter().map(|v| {
                let d = (v - row[0]) - mean_c;
                d * d
            }).sum::<f64>();
        }
        q /= (w * h) as f64;
        let v = self.alloc(vec![q], vec![1]);
        self.ops.push(Op::RowVarianceMean { field: field.0, out: v.0, w, h });
        v
    }

    /// out[i] = nodes[i] + bank[idx[i]]; gradients flow to the nodes and,
    /// via scatter-add, to the selected bank rows.
    pub fn embed_add(&mut self, nodes: Var, bank: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.shape2(nodes, "embed_add")?;
        let (rows, bc) = self.shape2(bank, "embed_add")?;
        if bc != c {
            return Err(Error::ShapeMismatch {
                op: "embed_add",
                lhs: self.shape(nodes).to_vec(),
                rhs: self.shape(bank).to_vec(),
            });
        }
        if idx.len() != n {
            return Err(Error::contract(format!("embed_add: {} indices for {n} nodes", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("embed_add: index {bad} out of range for bank of {rows} rows")));
        }
        let mut out = self.value(nodes).to_vec();
        {
            let b = &self.bufs[bank.0].data;
            for (i, &r) in idx.iter().enumerate() {
                for ch in 0..c {
                    out[i * c + ch] += b[r * c + ch];
                }
            }
        }
        let v = self.alloc(out, vec![n, c]);
        self.ops.push(Op::EmbedAdd { nodes: nodes.0, bank: bank.0, idx: idx.to_vec(), out: v.0, n, c });
        Ok(v)
    }

    /// Builds the per-edge feature matrix [nodes[i], nodes[j]] (P×2C) for a
    /// list of directed pairs.
    pub fn gather_pairs_concat(&mut self, nodes: Var, pairs: &[(usize, usize)]) -> Var {
        let s = self.shape(nodes);
        assert_eq!(s.len(), 2, "gather_pairs_concat expects rank-2 nodes");
        let (n, c) = (s[0], s[1]);
        assert!(pairs.iter().all(|&(i, j)| i < n && j < n), "gather_pairs_concat: pair out of range");
        let x = self.value(nodes);
        let mut out = vec![0.0; pairs.len() * 2 * c];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            out[p * 2 * c..p * 2 * c + c].copy_from_slice(&x[i * c..(i + 1) * c]);
            out[p * 2 * c + c..(p + 1) * 2 * c].copy_from_slice(&x[j * c..(j + 1) * c]);
        }
        let v = self.alloc(out, vec![pairs.len(), 2 * c]);
        self.ops.push(Op::GatherPairsConcat { nodes: nodes.0, pairs: pairs.to_vec(), out: v.0, c });
        v
    }

    /// Scatters per-edge scalars into an N×N bias matrix (zeros elsewhere).
    /// Pairs must be unique.
    pub fn scatter_edge_bias(&mut self, values: Var, pairs: &[(usize, usize)], n: usize) -> Var {
        assert_eq!(self.value(values).len(), pairs.len(), "scatter_edge_bias: value/pair count mismatch");
        let vals = self.value(values);
        let mut out = vec![0.0; n * n];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            out[i * n + j] = vals[p];
        }
        let v = self.alloc(out, vec![n, n]);
        self.ops.push(Op::ScatterEdgeBias { values: values.0, pairs: pairs.to_vec(), out: v.0, n });
        v
    }

    /// Splits a single-channel image into non-overlapping `patch`×`patch`
    /// tiles, one flattened tile per row.
    pub fn patch_extract(&mut self, image: Var, h_img: usize, w_img: usize, patch: usize) -> Result<Var> {
        if h_img % patch != 0 || w_img % patch != 0 {
            return Err(Error::contract(format!(
                "patch_extract: image {h_img}x{w_img} not divisible by patch {patch}"
            )));
        }
        if self.value(image).len() != h_img * w_img {
            return Err(Error::ShapeMismatch {
                op: "patch_extract",
                lhs: self.shape(image).to_vec(),
                rhs: vec![h_img, w_img],
            });
        }
        let (gh, gw) = (h_img / patch, w_img / patch);
        let n = gh * gw;
        let x = self.value(image);
        let mut out = vec![0.0; n * patch * patch];
        for py in 0..gh {
            for px in 0..gw {
                let node = py * gw + px;
                for dy in 0..patch {
                    let src = (py * patch + dy) * w_img + px * patch;
                    let dst = node * patch * patch + dy * patch;
                    out[dst..dst + patch].copy_from_slice(&x[src..src + patch]);
                }
            }
        }
        let v = self.alloc(out, vec![n, patch * patch]);
        self.ops.push(Op::PatchExtract { image: image.0, out: v.0, h_img, w_img, patch });
        Ok(v)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Seeds `loss` with 1 and replays every recorded op in reverse,
    /// accumulating gradients additively. `loss` must be a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.bufs.len()];
        grads[loss.0] = Some(vec![1.0]);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        // Takes the upstream gradient of `out`; if the loss never reached
        // this op there is nothing to propagate.
        macro_rules! upstream {
            ($out:expr) => {
                match grads[$out].as_ref() {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }

        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let dc = upstream!(*out);
                let (m, k, n) = (*m, *k, *n);
                let bv = &self.bufs[*b].data;
                let av = &self.bufs[*a].data;
                {
                    let da = acc(grads, *a, m * k);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dc[i * n + j] * bv[kk * n + j];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                }
                let db = acc(grads, *b, k * n);
                for i in 0..m {
                    for kk in 0..k {
                        let av_ik = av[i * k + kk];
                        let dbrow = &mut db[kk * n..(kk + 1) * n];
                        let dcrow = &dc[i * n..(i + 1) * n];
                        for j in 0..n {
                            dbrow[j] += av_ik * dcrow[j];
                        }
                    }
                }
            }
            Op::Transpose { input, out, rows, cols } => {
                let dy = upstream!(*out);
                let dx = acc(grads, *input, rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] += dy[c * rows + r];
                    }
                }
            }
            Op::SoftmaxRows { input, out, rows, cols } => {
                let dy = upstream!(*out);
                let y = &self.bufs[*out].data;
                let dx = acc(grads, *input, rows * cols);
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    let dxr = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..*cols {
                        dxr[c] += yr[c] * (dyr[c] - dot);
                    }
                }
            }
            Op::LayerNorm { input, gain, bias, out, rows, cols, eps } => {
                let dy = upstream!(*out);
                let x = &self.bufs[*input].data;
                let g = &self.bufs[*gain].data;
                let cols_f = *cols as f64;
                // dgain/dbias first (they only need x̂ and dy)
                {
                    let dg = acc(grads, *gain, *cols);
                    for r in 0..*rows {
                        let row = &x[r * cols..(r + 1) * cols];
                        let (mean, var) = row_stats(row);
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..*cols {
                            dg[c] += dy[r * cols + c] * (row[c] - mean) * inv;
                        }
                    }
                }
                {
                    let db = acc(grads, *bias, *cols);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += dy[r * cols + c];
                        }
                    }
                }
                let dx = acc(grads, *input, rows * cols);
                for r in 0..*rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let (mean, var) = row_stats(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let mut m1 = 0.0; // mean of dx̂
                    let mut m2 = 0.0; // mean of dx̂ ⊙ x̂
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = dyr[c] * g[c];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= cols_f;
                    m2 /= cols_f;
                    let dxr = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = dyr[c] * g[c];
                        dxr[c] += (dxhat - m1 - xhat * m2) * inv;
                    }
                }
            }
            Op::Conv3x3 { input, kernel, bias, out, c_in, c_out, h, w } => {
                let dy = upstream!(*out);
                let (c_in, c_out, h, w) = (*c_in, *c_out, *h, *w);
                let x = &self.bufs[*input].data;
                let kern = &self.bufs[*kernel].data;
                {
                    let db = acc(grads, *bias, c_out);
                    for o in 0..c_out {
                        db[o] += dy[o * h * w..(o + 1) * h * w].iter().sum::<f64>();
                    }
                }
                {
                    let dk = acc(grads, *kernel, c_out * c_in * 9);
                    for o in 0..c_out {
                        for c in 0..c_in {
                            let kb = (o * c_in + c) * 9;
                            for dyk in 0..3usize {
                                let (y0, y1) = conv_range(dyk, h);
                                for dxk in 0..3usize {
                                    let (x0, x1) = conv_range(dxk, w);
                                    if y1 <= y0 || x1 <= x0 {
                                        continue;
                                    }
                                    let mut s = 0.0;
                                    for i in y0..y1 {
                                        let src = c * h * w + (i + dyk - 1) * w + (x0 + dxk - 1);
                                        let dst = o * h * w + i * w + x0;
                                        for t in 0..(x1 - x0) {
                                            s += dy[dst + t] * x[src + t];
                                        }
                                    }
                                    dk[kb + dyk * 3 + dxk] += s;
                                }
                            }
                        }
                    }
                }
                let dx = acc(grads, *input, c_in * h * w);
                for o in 0..c_out {
                    for c in 0..c_in {
                        let kb = (o * c_in + c) * 9;
                        for dyk in 0..3usize {
                            let (y0, y1) = conv_range(dyk, h);
                            for dxk in 0..3usize {
                                let (x0, x1) = conv_range(dxk, w);
                                if y1 <= y0 || x1 <= x0 {
                                    continue;
                                }
                                let kv = kern[kb + dyk * 3 + dxk];
                                for i in y0..y1 {
                                    let src = c * h * w + (i + dyk - 1) * w + (x0 + dxk - 1);
                                    let dst = o * h * w + i * w + x0;
                                    for t in 0..(x1 - x0) {
                                        dx[src + t] += kv * dy[dst + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x { input, out, c, h, w } => {
                let dy = upstream!(*out);
                let (c, h, w) = (*c, *h, *w);
                let (h2, w2) = (2 * h, 2 * w);
                let dx = acc(grads, *input, c * h * w);
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let base = ch * h2 * w2 + 2 * i * w2 + 2 * j;
                            dx[ch * h * w + i * w + j] +=
                                dy[base] + dy[base + 1] + dy[base + w2] + dy[base + w2 + 1];
                        }
                    }
                }
            }
            Op::Relu { input, out } => {
                let dy = upstream!(*out);
                let x = &self.bufs[*input].data;
                let dx = acc(grads, *input, x.len());
                for i in 0..x.len() {
                    if x[i] > 0.0 {
                        dx[i] += dy[i];
                    }
                }
            }
            Op::Sigmoid { input, out } => {
                let dy = upstream!(*out);
                let y = &self.bufs[*out].data;
                let dx = acc(grads, *input, y.len());
                for i in 0..y.len() {
                    dx[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Abs { input, out } => {
                let dy = upstream!(*out);
                let x = &self.bufs[*input].data;
                let dx = acc(grads, *input, x.len());
                for i in 0..x.len() {
                    dx[i] += dy[i] * sign_subgrad(x[i]);
                }
            }
            Op::Add { a, b, out } => {
                let dy = upstream!(*out);
                {
                    let da = acc(grads, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i];
                    }
                }
                let db = acc(grads, *b, dy.len());
                for i in 0..dy.len() {
                    db[i] += dy[i];
                }
            }
            Op::Sub { a, b, out } => {
                let dy = upstream!(*out);
                {
                    let da = acc(grads, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i];
                    }
                }
                let db = acc(grads, *b, dy.len());
                for i in 0..dy.len() {
                    db[i] -= dy[i];
                }
            }
            Op::Mul { a, b, out } => {
                let dy = upstream!(*out);
                let av = self.bufs[*a].data.clone();
                let bv = &self.bufs[*b].data;
                {
                    let da = acc(grads, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                let db = acc(grads, *b, dy.len());
                for i in 0..dy.len() {
                    db[i] += dy[i] * av[i];
                }
            }
            Op::Scale { input, factor, out } => {
                let dy = upstream!(*out);
                let dx = acc(grads, *input, dy.len());
                for i in 0..dy.len() {
                    dx[i] += dy[i] * factor;
                }
            }
            Op::AddConst { input, out } => {
                let dy = upstream!(*out);
                let dx = acc(grads, *input, dy.len());
                for i in 0..dy.len() {
                    dx[i] += dy[i];
                }
            }
            Op::BiasAddRows { input, bias, out, rows, cols } => {
                let dy = upstream!(*out);
                {
                    let dx = acc(grads, *input, rows * cols);
                    for i in 0..dy.len() {
                        dx[i] += dy[i];
                    }
                }
                let db = acc(grads, *bias, *cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += dy[r * cols + c];
                    }
                }
            }
            Op::SumAll { input, out } => {
                let dy = upstream!(*out);
                let n = self.bufs[*input].data.len();
                let dx = acc(grads, *input, n);
                for v in dx.iter_mut() {
                    *v += dy[0];
                }
            }
            Op::ConcatCols { inputs, out, rows, widths } => {
                let dy = upstream!(*out);
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&inp, &wd) in inputs.iter().zip(widths) {
                    let dx = acc(grads, inp, rows * wd);
                    for r in 0..*rows {
                        for c in 0..wd {
                            dx[r * wd + c] += dy[r * total + off + c];
                        }
                    }
                    off += wd;
                }
            }
            Op::PairwiseAbsDiff { field, out, n } => {
                let dy = upstream!(*out);
                let f = &self.bufs[*field].data;
                let df = acc(grads, *field, *n);
                let n = *n;
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let s = sign_subgrad(f[i] - f[j]);
                        // d|f_i − f_j|/df_i = s for both the (i,j) and (j,i) entries
                        df[i] += s * (dy[i * n + j] + dy[j * n + i]);
                    }
                }
            }
            Op::RowVarianceMean { field, out, w, h } => {
                let dy = upstream!(*out)[0];
                let f = &self.bufs[*field].data;
                let n = w * h;
                let df = acc(grads, *field, n);
                let scale = 2.0 / n as f64;
                for y in 0..*h {
                    let row = &f[y * w..(y + 1) * w];
                    let mean_c = row.iter().map(|v| v - row[0]).sum::<f64>() / *w as f64;
                    for c in 0..*w {
                        df[y * w + c] += dy * scale * ((row[c] - row[0]) - mean_c);
                    }
                }
            }
            Op::EmbedAdd { nodes, bank, idx, out, n, c } => {
                let dy = upstream!(*out);
                {
                    let dn = acc(grads, *nodes, n * c);
                    for i in 0..dy.len() {
                        dn[i] += dy[i];
                    }
                }
                let bank_len = self.bufs[*bank].data.len();
                let db = acc(grads, *bank, bank_len);
                for (i, &r) in idx.iter().enumerate() {
                    for ch in 0..*c {
                        db[r * c + ch] += dy[i * c + ch];
                    }
                }
            }
            Op::GatherPairsConcat { nodes, pairs, out, c } => {
                let dy = upstream!(*out);
                let n = self.bufs[*nodes].data.len();
                let dn = acc(grads, *nodes, n);
                let c = *c;
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    for ch in 0..c {
                        dn[i * c + ch] += dy[p * 2 * c + ch];
                        dn[j * c + ch] += dy[p * 2 * c + c + ch];
                    }
                }
            }
            Op::ScatterEdgeBias { values, pairs, out, n } => {
                let dy = upstream!(*out);
                let dv = acc(grads, *values, pairs.len());
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    dv[p] += dy[i * n + j];
                }
            }
            Op::PatchExtract { image, out, h_img, w_img, patch } => {
                let dy = upstream!(*out);
                let dx = acc(grads, *image, h_img * w_img);
                let (gh, gw, p) = (h_img / patch, w_img / patch, *patch);
                for py in 0..gh {
                    for px in 0..gw {
                        let node = py * gw + px;
                        for dyk in 0..p {
                            let dst = (py * p + dyk) * w_img + px * p;
                            let src = node * p * p + dyk * p;
                            for t in 0..p {
                                dx[dst + t] += dy[src + t];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn sign_subgrad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Output rows `i` for which input row `i + dy − 1` is in bounds.
fn conv_range(d: usize, extent: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { extent.saturating_sub(1) } else { extent };
    (lo, hi)
}

fn conv3x3_kernel(x: &[f64], kern: &[f64], bias: &[f64], c_in: usize, c_out: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        out[o * h * w..(o + 1) * h * w].iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..c_in {
            let kb = (o * c_in + c) * 9;
            for dy in 0..3usize {
                let (y0, y1) = conv_range(dy, h);
                for dx in 0..3usize {
                    let (x0, x1) = conv_range(dx, w);
                    if y1 <= y0 || x1 <= x0 {
                        continue;
                    }
                    let kv = kern[kb + dy * 3 + dx];
                    for i in y0..y1 {
                        let src = c * h * w + (i + dy - 1) * w + (x0 + dx - 1);
                        let dst = o * h * w + i * w + x0;
                        for t in 0..(x1 - x0) {
                            out[dst + t] += kv * x[src + t];
                        }
                    }
                }
            }
        }
    }
    out
}
