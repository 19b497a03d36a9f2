//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles as it runs
//! forward; [`Tape::backward`] then walks the record once in reverse and
//! accumulates gradients for every node flagged as a parameter. One tape is
//! built per sample, so nodes own plain values and no state ever crosses
//! tapes. All arithmetic is f64 and single-threaded per tape, which keeps
//! gradient reduction bit-reproducible when samples are summed in a fixed
//! order outside.

use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Coefficient of the tanh-based GELU approximation: sqrt(2/pi).
const GELU_C: f64 = 0.7978845608028654;
const GELU_A: f64 = 0.044715;
/// Variance floor added inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op {
    Leaf,
    Add(usize, usize),
    /// Broadcast-add a `[1, c]` row vector to every row of the first input.
    AddRow(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    StackRows(Vec<usize>),
    SliceCols {
        input: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    SoftmaxRows(usize),
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    SelectRow {
        input: usize,
        row: usize,
    },
    GatherRows {
        input: usize,
        indices: Vec<usize>,
    },
    /// Elementwise multiply by a fixed mask (entries 0 or 1/(1-p)).
    Dropout {
        input: usize,
        mask: Tensor,
    },
    MseLoss {
        input: usize,
        target: Tensor,
    },
    MeanRows(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, addressed by the `Var`s of the
/// tape that produced them. Only parameter nodes retain a gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter that is known to be reachable from the loss.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.grads[v.0]
            .as_ref()
            .expect("parameter did not receive a gradient")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Record a value that gradients never flow into (inputs, fixed tables).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Record a trainable value; its gradient survives `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), ng, false)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.nodes[a.0].value.add_row(&self.nodes[row.0].value);
        let ng = self.needs(&[a.0, row.0]);
        self.push(value, Op::AddRow(a.0, row.0), ng, false)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.scale(s);
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Scale(a.0, s), ng, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.mul(&self.nodes[b.0].value);
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), ng, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), ng, false)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose();
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Transpose(a.0), ng, false)
    }

    /// Stack inputs vertically; each keeps its own row count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows needs at least one input");
        let cols = self.nodes[parts[0].0].value.cols();
        let total: usize = parts.iter().map(|v| self.nodes[v.0].value.rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut off = 0;
        for v in parts {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.cols(), cols, "stack_rows width mismatch");
            for r in 0..t.rows() {
                out.row_mut(off + r).copy_from_slice(t.row(r));
            }
            off += t.rows();
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let ng = self.needs(&ids);
        self.push(out, Op::StackRows(ids), ng, false)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.needs(&[a.0]);
        self.push(out, Op::SliceCols { input: a.0, start, len }, ng, false)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|v| self.nodes[v.0].value.cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for v in parts {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let ng = self.needs(&ids);
        self.push(out, Op::ConcatCols(ids), ng, false)
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for (oo, &v) in o.iter_mut().zip(row) {
                *oo = (v - max).exp();
                sum += *oo;
            }
            for oo in o.iter_mut() {
                *oo /= sum;
            }
        }
        let ng = self.needs(&[a.0]);
        self.push(out, Op::SoftmaxRows(a.0), ng, false)
    }

    /// Row-wise layer normalization with affine parameters (both `[1, c]`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        assert_eq!(g.shape(), (1, t.cols()), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, t.cols()), "layer_norm beta shape");
        let c = t.cols() as f64;
        let mut out = Tensor::zeros(t.rows(), t.cols());
        let mut mean = Vec::with_capacity(t.rows());
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let o = out.row_mut(r);
            for j in 0..row.len() {
                o[j] = g.data()[j] * (row[j] - mu) * is + b.data()[j];
            }
            mean.push(mu);
            inv_std.push(is);
        }
        let ng = self.needs(&[a.0, gamma.0, beta.0]);
        self.push(
            out,
            Op::LayerNorm {
                input: a.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
            },
            ng,
            false,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = t.clone();
        for v in out.data_mut() {
            *v = gelu_scalar(*v);
        }
        let ng = self.needs(&[a.0]);
        self.push(out, Op::Gelu(a.0), ng, false)
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(row < t.rows(), "select_row out of range");
        let out = Tensor::row_vector(t.row(row).to_vec());
        let ng = self.needs(&[a.0]);
        self.push(out, Op::SelectRow { input: a.0, row }, ng, false)
    }

    /// Gather rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (r, &src) in indices.iter().enumerate() {
            assert!(src < t.rows(), "gather_rows index out of range");
            out.row_mut(r).copy_from_slice(t.row(src));
        }
        let ng = self.needs(&[a.0]);
        self.push(
            out,
            Op::GatherRows {
                input: a.0,
                indices: indices.to_vec(),
            },
            ng,
            false,
        )
    }

    /// Apply a fixed dropout mask whose entries are 0 or 1/(1-p).
    pub fn dropout(&mut self, a: Var, mask: Tensor) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), mask.shape(), "dropout mask shape");
        let value = self.nodes[a.0].value.mul(&mask);
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Dropout { input: a.0, mask }, ng, false)
    }

    /// Mean squared error against a fixed target, over all elements.
    pub fn mse_loss(&mut self, a: Var, target: Tensor) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.shape(), target.shape(), "mse_loss shape mismatch");
        let n = t.len() as f64;
        let sum: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| (p - y) * (p - y))
            .sum();
        let ng = self.needs(&[a.0]);
        self.push(
            Tensor::scalar(sum / n),
            Op::MseLoss { input: a.0, target },
            ng,
            false,
        )
    }

    /// Mean over rows, producing a `[1, c]` vector.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / t.rows() as f64;
        for o in out.data_mut() {
            *o *= inv;
        }
        let ng = self.needs(&[a.0]);
        self.push(out, Op::MeanRows(a.0), ng, false)
    }

    /// Run reverse accumulation from a scalar root. Gradients are kept only
    /// for parameter nodes; intermediates are freed as soon as consumed.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, || g.clone());
                    self.accum(&mut grads, *b, || g.clone());
                }
                Op::AddRow(a, row) => {
                    self.accum(&mut grads, *a, || g.clone());
                    self.accum(&mut grads, *row, || {
                        let mut sum = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in sum.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        sum
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.accum(&mut grads, *a, || g.scale(s));
                }
                Op::Mul(a, b) => {
                    self.accum(&mut grads, *a, || g.mul(&self.nodes[*b].value));
                    self.accum(&mut grads, *b, || g.mul(&self.nodes[*a].value));
                }
                Op::MatMul(a, b) => {
                    self.accum(&mut grads, *a, || g.matmul_bt(&self.nodes[*b].value));
                    self.accum(&mut grads, *b, || self.nodes[*a].value.matmul_at(&g));
                }
                Op::Transpose(a) => {
                    self.accum(&mut grads, *a, || g.transpose());
                }
                Op::StackRows(ids) => {
                    let mut off = 0;
                    for &id in ids {
                        let rows = self.nodes[id].value.rows();
                        self.accum(&mut grads, id, || {
                            let mut part = Tensor::zeros(rows, g.cols());
                            for r in 0..rows {
                                part.row_mut(r).copy_from_slice(g.row(off + r));
                            }
                            part
                        });
                        off += rows;
                    }
                }
                Op::SliceCols { input, start, len } => {
                    let (start, len) = (*start, *len);
                    self.accum(&mut grads, *input, || {
                        let src = &self.nodes[*input].value;
                        let mut part = Tensor::zeros(src.rows(), src.cols());
                        for r in 0..src.rows() {
                            part.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                        }
                        part
                    });
                }
                Op::ConcatCols(ids) => {
                    let mut off = 0;
                    for &id in ids {
                        let cols = self.nodes[id].value.cols();
                        self.accum(&mut grads, id, || {
                            let mut part = Tensor::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                part.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            part
                        });
                        off += cols;
                    }
                }
                Op::SoftmaxRows(a) => {
                    // dx_j = s_j * (g_j - sum_k g_k s_k), per row.
                    let s = &node.value;
                    self.accum(&mut grads, *a, || {
                        let mut dx = Tensor::zeros(s.rows(), s.cols());
                        for r in 0..s.rows() {
                            let (sr, gr) = (s.row(r), g.row(r));
                            let dot: f64 = sr.iter().zip(gr).map(|(&si, &gi)| si * gi).sum();
                            for (o, (&si, &gi)) in
                                dx.row_mut(r).iter_mut().zip(sr.iter().zip(gr))
                            {
                                *o = si * (gi - dot);
                            }
                        }
                        dx
                    });
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let x = &self.nodes[*input].value;
                    let gm = &self.nodes[*gamma].value;
                    let c = x.cols() as f64;
                    self.accum(&mut grads, *beta, || {
                        let mut db = Tensor::zeros(1, x.cols());
                        for r in 0..x.rows() {
                            for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        db
                    });
                    self.accum(&mut grads, *gamma, || {
                        let mut dg = Tensor::zeros(1, x.cols());
                        for r in 0..x.rows() {
                            let xr = x.row(r);
                            for j in 0..xr.len() {
                                let xhat = (xr[j] - mean[r]) * inv_std[r];
                                dg.row_mut(0)[j] += g.row(r)[j] * xhat;
                            }
                        }
                        dg
                    });
                    self.accum(&mut grads, *input, || {
                        let mut dx = Tensor::zeros(x.rows(), x.cols());
                        for r in 0..x.rows() {
                            let xr = x.row(r);
                            let gr = g.row(r);
                            // dxhat_j, and its plain and xhat-weighted means.
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..xr.len() {
                                let xhat = (xr[j] - mean[r]) * inv_std[r];
                                let d = gr[j] * gm.data()[j];
                                sum_d += d;
                                sum_dx += d * xhat;
                            }
                            for j in 0..xr.len() {
                                let xhat = (xr[j] - mean[r]) * inv_std[r];
                                let d = gr[j] * gm.data()[j];
                                dx.row_mut(r)[j] =
                                    inv_std[r] * (d - sum_d / c - xhat * sum_dx / c);
                            }
                        }
                        dx
                    });
                }
                Op::Gelu(a) => {
                    self.accum(&mut grads, *a, || {
                        let x = &self.nodes[*a].value;
                        let mut dx = g.clone();
                        for (o, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                            *o *= gelu_grad_scalar(xv);
                        }
                        dx
                    });
                }
                Op::SelectRow { input, row } => {
                    let row = *row;
                    self.accum(&mut grads, *input, || {
                        let src = &self.nodes[*input].value;
                        let mut dx = Tensor::zeros(src.rows(), src.cols());
                        dx.row_mut(row).copy_from_slice(g.row(0));
                        dx
                    });
                }
                Op::GatherRows { input, indices } => {
                    self.accum(&mut grads, *input, || {
                        let src = &self.nodes[*input].value;
                        let mut dx = Tensor::zeros(src.rows(), src.cols());
                        for (r, &dst) in indices.iter().enumerate() {
                            for (o, &v) in dx.row_mut(dst).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        dx
                    });
                }
                Op::Dropout { input, mask } => {
                    self.accum(&mut grads, *input, || g.mul(mask));
                }
                Op::MseLoss { input, target } => {
                    self.accum(&mut grads, *input, || {
                        let x = &self.nodes[*input].value;
                        let scale = g.item() * 2.0 / x.len() as f64;
                        let mut dx = Tensor::zeros(x.rows(), x.cols());
                        for ((o, &p), &y) in
                            dx.data_mut().iter_mut().zip(x.data()).zip(target.data())
                        {
                            *o = scale * (p - y);
                        }
                        dx
                    });
                }
                Op::MeanRows(a) => {
                    self.accum(&mut grads, *a, || {
                        let src = &self.nodes[*a].value;
                        let inv = 1.0 / src.rows() as f64;
                        let mut dx = Tensor::zeros(src.rows(), src.cols());
                        for r in 0..src.rows() {
                            for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                                *o = v * inv;
                            }
                        }
                        dx
                    });
                }
            }
            if node.is_param {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accum(
        &self,
        grads: &mut [Option<Tensor>],
        target: usize,
        make: impl FnOnce() -> Tensor,
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let delta = make();
        match &mut grads[target] {
            Some(t) => t.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }
}
