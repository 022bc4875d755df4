//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node to the tape. [`Graph::backward`]
//! walks the tape once in reverse and sums the contributions of every consumer.
//! The tape also counts floating-point work under a fixed contract: one
//! multiply-accumulate inside a matmul/linear/conv is 2 FLOPs (the `mac`
//! bucket), everything else is charged per element to the `elementwise` bucket.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{
    cast, col2im, gather, gemm_nn, gemm_nt, gemm_tn, im2col, inverse_axes, numel, permute_raw,
    pixel_shuffle_index, scatter, ConvGeom, Padding, Scalar, Tensor,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floating-point work recorded by a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// 2 × multiply-accumulates of matmul, linear and conv ops.
    pub mac: u64,
    /// Bias adds, normalisation, softmax, activations and other per-element work.
    pub elementwise: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.mac + self.elementwise
    }
}

impl std::ops::Sub for FlopCount {
    type Output = FlopCount;
    fn sub(self, rhs: FlopCount) -> FlopCount {
        FlopCount {
            mac: self.mac - rhs.mac,
            elementwise: self.elementwise - rhs.elementwise,
        }
    }
}

/// Per-element costs charged to the elementwise bucket.
pub mod cost {
    /// subtract max, exp, accumulate, divide
    pub const SOFTMAX: u64 = 4;
    /// mean, centre, square, variance, normalise, gain, bias
    pub const LAYER_NORM: u64 = 7;
    /// sqrt and reciprocal, once per normalised row
    pub const LAYER_NORM_ROW: u64 = 2;
    /// cube, two fused multiply-adds, tanh, add, two multiplies
    pub const GELU: u64 = 8;
    /// square-accumulate, divide
    pub const NORMALIZE: u64 = 3;
    /// subtract, abs, accumulate
    pub const ABS_DIFF: u64 = 3;
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Sum(Var),
    Mean(Var),
    AbsDiffMean(Var, Var),
    Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    ExpClampMax {
        x: Var,
        max_log: T,
    },
    ScaleHeads {
        x: Var,
        s: Var,
        heads: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    flops: FlopCount,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: FlopCount::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are produced only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x + y);
        self.flops.elementwise += out.len() as u64;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x - y);
        self.flops.elementwise += out.len() as u64;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x * y);
        self.flops.elementwise += out.len() as u64;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s: T = cast(s);
        let out = self.value(a).scale(s);
        self.flops.elementwise += out.len() as u64;
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Batched matrix product `[…, m, k] × […, k, n] → […, m, n]` with equal leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k || sa[..r - 2] != sb[..r - 2] {
            return Err(bad());
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                gemm_nn(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.flops.mac += 2 * (batch * m * k * n) as u64;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, batch, m, k, n },
            &[a, b],
        ))
    }

    /// `x[…, cin] · w[cin, cout] + b[cout]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let cin = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != cin {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let cout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&sx) / cin;
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
            self.flops.elementwise += (rows * cout) as u64;
        }
        gemm_nn(rows, cin, cout, self.value(x).data(), self.value(w).data(), &mut out);
        self.flops.mac += 2 * (rows * cin * cout) as u64;
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(cout);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            },
            &inputs,
        ))
    }

    /// NHWC cross-correlation with a `[k, k, cin, cout]` kernel, `k ∈ {1,3}`, stride `∈ {1,2}`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = geom.rows();
        let mut out = vec![T::zero(); rows * geom.cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(geom.cout) {
                row.copy_from_slice(bias);
            }
            self.flops.elementwise += (rows * geom.cout) as u64;
        }
        let cols = if geom.is_pointwise() {
            gemm_nn(rows, geom.cin, geom.cout, self.value(x).data(), self.value(w).data(), &mut out);
            None
        } else {
            let cols = im2col(&geom, self.value(x).data());
            gemm_nn(rows, geom.patch(), geom.cout, &cols, self.value(w).data(), &mut out);
            Some(cols)
        };
        self.flops.mac += 2 * (rows * geom.patch() * geom.cout) as u64;
        let shape = vec![geom.b, geom.ho, geom.wo, geom.cout];
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let shape = t.shape().to_vec();
        self.flops.elementwise += cost::SOFTMAX * out.len() as u64;
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// Layer normalisation over the last axis followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let t = self.value(x);
        let c = *t.shape().last().unwrap();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps: T = cast(eps);
        let inv_c: T = cast(1.0 / c as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.len() / c;
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let len = t.len();
        let shape = t.shape().to_vec();
        self.flops.elementwise += cost::LAYER_NORM * len as u64 + cost::LAYER_NORM_ROW * rows as u64;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| cast(gelu_parts(v.as_f64()).0));
        self.flops.elementwise += cost::GELU * out.len() as u64;
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose_last",
                detail: format!("need rank >= 2, got {:?}", self.shape(x)),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    fn gather_op(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Var {
        let out = gather(self.value(x).data(), &index);
        self.push(Tensor::from_parts(shape, out), Op::Gather { x, index }, &[x])
    }

    /// `[B, H, W, C·r²] → [B, rH, rW, C]`; channel block `(dy, dx)` is row-major.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || !s[3].is_multiple_of(r * r) {
            return Err(Error::Shape {
                op: "pixel_shuffle",
                detail: format!("channels of {s:?} not divisible by r²={}", r * r),
            });
        }
        let index = pixel_shuffle_index(&s, r);
        let shape = vec![s[0], s[1] * r, s[2] * r, s[3] / (r * r)];
        Ok(self.gather_op(x, Rc::new(index), shape))
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || !s[1].is_multiple_of(r) || !s[2].is_multiple_of(r) {
            return Err(Error::Shape {
                op: "pixel_unshuffle",
                detail: format!("spatial dims of {s:?} not divisible by r={r}"),
            });
        }
        let src = [s[0], s[1] / r, s[2] / r, s[3] * r * r];
        let fwd = pixel_shuffle_index(&src, r);
        let mut index = vec![0; fwd.len()];
        for (i, &j) in fwd.iter().enumerate() {
            index[j] = i;
        }
        Ok(self.gather_op(x, Rc::new(index), src.to_vec()))
    }

    /// Nearest-neighbour upsampling of `[B, H, W, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 {
            return Err(Error::Shape {
                op: "upsample_nearest",
                detail: format!("need [B,H,W,C] and r >= 1, got {s:?}, r={r}"),
            });
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut index = Vec::with_capacity(b * h * w * c * r * r);
        for bi in 0..b {
            for oy in 0..h * r {
                for ox in 0..w * r {
                    let base = ((bi * h + oy / r) * w + ox / r) * c;
                    index.extend(base..base + c);
                }
            }
        }
        Ok(self.gather_op(x, Rc::new(index), vec![b, h * r, w * r, c]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum());
        self.flops.elementwise += t.len() as u64;
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n: T = cast(t.len() as f64);
        let out = Tensor::scalar(t.sum() / n);
        self.flops.elementwise += t.len() as u64 + 1;
        self.push(out, Op::Mean(x), &[x])
    }

    /// Mean absolute difference (L1 loss).
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("l1_loss", ta, tb)?;
        let n: T = cast(ta.len() as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        self.flops.elementwise += cost::ABS_DIFF * ta.len() as u64;
        Ok(self.push(Tensor::scalar(s / n), Op::AbsDiffMean(a, b), &[a, b]))
    }

    /// Divides every last-axis row by `max(‖row‖, eps)`.
    pub fn normalize_last(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let eps: T = cast(eps);
        let mut norms = Vec::with_capacity(t.len() / n);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let len = t.len();
        let shape = t.shape().to_vec();
        self.flops.elementwise += cost::NORMALIZE * len as u64 + norms.len() as u64;
        self.push(Tensor::from_parts(shape, out), Op::Normalize { x, norms, eps }, &[x])
    }

    /// `exp(min(x, ln(max)))`, zero gradient where clamped.
    pub fn exp_clamp_max(&mut self, x: Var, max: f64) -> Var {
        let max_log: T = cast(max.ln());
        let out = self.value(x).map(|v| v.min(max_log).exp());
        self.flops.elementwise += out.len() as u64;
        self.push(out, Op::ExpClampMax { x, max_log }, &[x])
    }

    /// Multiplies `x[…, h, n, m]` by a per-head factor `s[h]`.
    pub fn scale_heads(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let heads = self.shape(s)[0];
        if sx.len() < 3 || self.shape(s).len() != 1 || sx[sx.len() - 3] != heads {
            return Err(Error::Dimension {
                op: "scale_heads",
                lhs: sx,
                rhs: self.shape(s).to_vec(),
            });
        }
        let inner = sx[sx.len() - 2] * sx[sx.len() - 1];
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let f = sv[i % heads];
            for v in chunk {
                *v = *v * f;
            }
        }
        self.flops.elementwise += out.len() as u64;
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::ScaleHeads { x, s, heads, inner },
            &[x, s],
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            inputs,
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.filter(|_| self.nodes[i].requires_grad)
                        .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                })
                .collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, g: Vec<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, gy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, gy.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, gy.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, gy.iter().map(|&g| g * *s).collect()),
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &gy[bi * m * n..(bi + 1) * m * n],
                            &vb[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    acc(a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &va[bi * m * k..(bi + 1) * m * k],
                            &gy[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    acc(b, gb);
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            } => {
                if self.wants(x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    gemm_nt(rows, cout, cin, gy, self.value(w).data(), &mut gx);
                    acc(x, gx);
                }
                if self.wants(w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    gemm_tn(rows, cin, cout, self.value(x).data(), gy, &mut gw);
                    acc(w, gw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    acc(b, column_sums(gy, cout));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.rows();
                let patch = geom.patch();
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); rows * patch];
                    gemm_nt(rows, geom.cout, patch, gy, self.value(*w).data(), &mut gcols);
                    let gx = if geom.is_pointwise() {
                        gcols
                    } else {
                        col2im(geom, &gcols)
                    };
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); patch * geom.cout];
                    let src = cols.as_deref().unwrap_or_else(|| self.value(*x).data());
                    gemm_tn(rows, patch, geom.cout, src, gy, &mut gw);
                    acc(*w, gw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    acc(b, column_sums(gy, geom.cout));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gy.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = self.value(*gain).data();
                let c = g.len();
                if self.wants(*x) {
                    let inv_c: T = cast(1.0 / c as f64);
                    let mut gx = Vec::with_capacity(xhat.len());
                    for ((xr, gr), &r) in xhat.chunks(c).zip(gy.chunks(c)).zip(rstd) {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let d = gr[j] * g[j];
                            m1 += d;
                            m2 += d * xr[j];
                        }
                        m1 = m1 * inv_c;
                        m2 = m2 * inv_c;
                        for j in 0..c {
                            gx.push(r * (gr[j] * g[j] - m1 - xr[j] * m2));
                        }
                    }
                    acc(*x, gx);
                }
                if self.wants(*gain) {
                    let mut gg = vec![T::zero(); c];
                    for (xr, gr) in xhat.chunks(c).zip(gy.chunks(c)) {
                        for j in 0..c {
                            gg[j] += xr[j] * gr[j];
                        }
                    }
                    acc(*gain, gg);
                }
                if self.wants(*bias) {
                    acc(*bias, column_sums(gy, c));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    xv.iter()
                        .zip(gy)
                        .map(|(&v, &g)| g * cast(gelu_parts(v.as_f64()).1))
                        .collect(),
                );
            }
            Op::Reshape(x) => acc(*x, gy.to_vec()),
            Op::Permute(x, axes) => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), gy.to_vec());
                acc(*x, permute_raw(&gt, &inverse_axes(axes)).into_data());
            }
            Op::Gather { x, index } => acc(*x, scatter(gy, index, self.value(*x).len())),
            Op::Sum(x) => acc(*x, vec![gy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g = gy[0] / cast(n as f64);
                acc(*x, vec![g; n]);
            }
            Op::AbsDiffMean(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = gy[0] / cast(va.len() as f64);
                let sign: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    acc(*b, sign.iter().map(|&s| -s).collect());
                }
                if self.wants(*a) {
                    acc(*a, sign);
                }
            }
            Op::Normalize { x, norms, eps } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut gx = Vec::with_capacity(y.len());
                for ((yr, gr), &nrm) in y.chunks(n).zip(gy.chunks(n)).zip(norms) {
                    if nrm > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / nrm));
                    } else {
                        gx.extend(gr.iter().map(|&gv| gv / nrm));
                    }
                }
                acc(*x, gx);
            }
            Op::ExpClampMax { x, max_log } => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                acc(
                    *x,
                    xv.iter()
                        .zip(y)
                        .zip(gy)
                        .map(|((&v, &yv), &g)| if v < *max_log { g * yv } else { T::zero() })
                        .collect(),
                );
            }
            &Op::ScaleHeads { x, s, heads, inner } => {
                if self.wants(x) {
                    let sv = self.value(s).data();
                    let mut gx = gy.to_vec();
                    for (i, chunk) in gx.chunks_mut(inner).enumerate() {
                        for v in chunk {
                            *v = *v * sv[i % heads];
                        }
                    }
                    acc(x, gx);
                }
                if self.wants(s) {
                    let xv = self.value(x).data();
                    let mut gs = vec![T::zero(); heads];
                    for (i, (xc, gc)) in xv.chunks(inner).zip(gy.chunks(inner)).enumerate() {
                        gs[i % heads] += xc.iter().zip(gc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    acc(s, gs);
                }
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gy.len() / total;
                let mut off = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&gy[r * total + off..r * total + off + w]);
                        }
                        acc(v, g);
                    }
                    off += w;
                }
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
