//! Reverse-mode tape: records forward ops, then walks them backwards
//! accumulating adjoints into every leaf that requires a gradient.
//!
//! A tape is built per forward pass and dropped after the optimizer step, so
//! graph memory never outlives one batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::kernels;
use super::{strides_for, Scalar, Tensor};
use crate::error::{Result, SydError};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Integer crop rectangle on a feature grid (row, col, height, width).
#[derive(Clone, Copy, Debug)]
pub struct CropRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Running statistics of a batch-norm layer. The learnable scale/shift live
/// outside as ordinary parameter tensors.
#[derive(Clone, Debug)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.99,
            eps: 1e-5,
        }
    }
}

type Taps<T> = Vec<(usize, usize, T, T)>;

enum Op<T> {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    MeanAxes {
        x: TensorId,
        out_map: Vec<usize>,
        count: usize,
    },
    MaxAxes {
        x: TensorId,
        arg: Vec<usize>,
    },
    SumAll {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        rows: usize,
        training: bool,
    },
    ScaleNoise {
        x: TensorId,
        noise: Vec<T>,
    },
    Bilinear {
        x: TensorId,
        row_taps: Taps<T>,
        col_taps: Taps<T>,
    },
    CrossEntropy {
        probs: TensorId,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probability floor inside the cross-entropy log.
pub const CE_PROB_FLOOR: f64 = 1e-12;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        id
    }

    /// Register a parameter or input tensor. Gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> TensorId {
        self.push(
            tensor.data().to_vec(),
            tensor.shape().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Register a non-differentiable value.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SydError::ShapeMismatch {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SydError::ShapeMismatch {
                op: "variable",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, Op::Leaf, true))
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec()).expect("node is consistent")
    }

    /// Gradient accumulated on a leaf after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SydError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul_nn(self.data(a), self.data(b), m, k, n);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(data, vec![m, n], Op::MatMul { a, b, m, k, n }, needs))
    }

    /// Batched matmul: [batch,m,k] x [batch,k,n] -> [batch,m,n].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(SydError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let c = kernels::matmul_nn(
                &self.data(a)[bi * m * k..(bi + 1) * m * k],
                &self.data(b)[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
            data[bi * m * n..(bi + 1) * m * n].copy_from_slice(&c);
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(
            data,
            vec![batch, m, n],
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    // ── Elementwise with broadcasting ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            SydError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            }
        })?;
        let data = map_broadcast(
            self.data(a),
            self.shape(a),
            self.data(b),
            self.shape(b),
            &out_shape,
            f,
        );
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(data, out_shape, op, needs))
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, Op::Sigmoid { x }, needs)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.max_val(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, Op::Relu { x }, needs)
    }

    // ── Shape ───────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(SydError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, shape, Op::Reshape { x }, needs))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(SydError::InvalidAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(SydError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let s = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            offset += len;
        }
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(
            data,
            out_shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Arithmetic mean over the given axes; reduced axes are removed from the
    /// shape (a full reduction yields shape [1]).
    pub fn mean_axes(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let (out_shape, out_map, count) = self.reduction_plan(x, axes, "mean")?;
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for (i, &v) in self.data(x).iter().enumerate() {
            data[out_map[i]] += v;
        }
        let inv = T::from_f64(1.0 / count as f64);
        for v in &mut data {
            *v = *v * inv;
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, out_shape, Op::MeanAxes { x, out_map, count }, needs))
    }

    /// Maximum over the given axes (first occurrence wins on ties).
    pub fn max_axes(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let (out_shape, out_map, _) = self.reduction_plan(x, axes, "max")?;
        let out_numel: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); out_numel];
        let mut arg = vec![usize::MAX; out_numel];
        for (i, &v) in self.data(x).iter().enumerate() {
            let o = out_map[i];
            if arg[o] == usize::MAX || v > data[o] {
                data[o] = v;
                arg[o] = i;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, out_shape, Op::MaxAxes { x, arg }, needs))
    }

    fn reduction_plan(
        &self,
        x: TensorId,
        axes: &[usize],
        name: &'static str,
    ) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        let shape = self.shape(x).to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(SydError::InvalidAxis {
                    op: name,
                    axis: ax,
                    shape,
                });
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();

        // Flat input index -> flat output index.
        let in_strides = strides_for(&shape);
        let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_strides = strides_for(&out_shape);
        let numel: usize = shape.iter().product();
        let mut out_map = vec![0usize; numel];
        for (i, slot) in out_map.iter_mut().enumerate() {
            let mut o = 0;
            for (oi, &d) in kept.iter().enumerate() {
                let coord = (i / in_strides[d]) % shape[d];
                o += coord * out_strides.get(oi).copied().unwrap_or(1);
            }
            *slot = o;
        }
        Ok((out_shape, out_map, count))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = T::zero();
        for &v in self.data(x) {
            s += v;
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(vec![s], vec![1], Op::SumAll { x }, needs)
    }

    // ── Softmax ─────────────────────────────────────────────────────────

    /// Max-subtracted softmax along one axis.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(SydError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = src[at(0)];
                for a in 1..len {
                    max = max.max_val(src[at(a)]);
                }
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    data[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[at(a)] = data[at(a)] / sum;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, shape, Op::Softmax { x, axis }, needs))
    }

    // ── Neural-net ops ──────────────────────────────────────────────────

    /// 2D convolution, NHWC input, [kh,kw,cin,cout] weights.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(SydError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (batch, h, width, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, _, cout) = (sw[0], sw[1], sw[2], sw[3]);
        if self.shape(bias) != [cout] {
            return Err(SydError::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![cout],
            });
        }
        let (data, oh, ow) = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            self.data(bias),
            batch,
            h,
            width,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
        );
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[bias.0].needs_grad;
        Ok(self.push(
            data,
            vec![batch, oh, ow, cout],
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                oh,
                ow,
            },
            needs,
        ))
    }

    /// Batch normalization over all leading axes; the trailing axis is the
    /// channel axis. Training mode normalizes by batch statistics and updates
    /// `running` in place; eval mode normalizes by the running statistics.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: &mut BnRunning<T>,
        training: bool,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| SydError::InvalidAxis {
            op: "batch_norm",
            axis: 0,
            shape: shape.clone(),
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(SydError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![c],
            });
        }
        let src = self.data(x).to_vec();
        let rows = src.len() / c;
        let eps = T::from_f64(running.eps);

        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            for row in src.chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let inv_rows = T::from_f64(1.0 / rows as f64);
            for m in &mut mean {
                *m = *m * inv_rows;
            }
            let mut var = vec![T::zero(); c];
            for row in src.chunks(c) {
                for ((v, &m), &s) in var.iter_mut().zip(&mean).zip(row) {
                    let d = s - m;
                    *v += d * d;
                }
            }
            for v in &mut var {
                *v = *v * inv_rows;
            }
            let mom = T::from_f64(running.momentum);
            let rest = T::one() - mom;
            for (r, &b) in running.mean.iter_mut().zip(&mean) {
                *r = *r * mom + b * rest;
            }
            for (r, &b) in running.var.iter_mut().zip(&var) {
                *r = *r * mom + b * rest;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        for (r, row) in src.chunks(c).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean[j]) * inv_std[j];
            }
        }
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut data = vec![T::zero(); src.len()];
        for (i, &xh) in xhat.iter().enumerate() {
            let j = i % c;
            data[i] = g[j] * xh + b[j];
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            data,
            shape,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                training,
            },
            needs,
        ))
    }

    /// Multiplicative Gaussian noise with sigma = sqrt(rho / (1 - rho)).
    /// Identity in eval mode and at rho = 0; the noise carries no learnable
    /// parameters.
    pub fn gaussian_dropout(
        &mut self,
        x: TensorId,
        rho: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rho) {
            return Err(SydError::Parameter(format!(
                "gaussian dropout rate must satisfy 0 <= rho < 1, got {rho}"
            )));
        }
        if !training || rho == 0.0 {
            return Ok(x);
        }
        let sigma = (rho / (1.0 - rho)).sqrt();
        let normal = Normal::new(1.0, sigma).expect("sigma is finite and positive");
        let noise: Vec<T> = (0..self.data(x).len())
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Ok(self.scale_noise(x, noise))
    }

    /// Standard (Bernoulli) inverted dropout, for the general-dropout ablation.
    pub fn bernoulli_dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(SydError::Parameter(format!(
                "dropout rate must satisfy 0 <= rate < 1, got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let noise: Vec<T> = (0..self.data(x).len())
            .map(|_| {
                if rng.random_range(0.0..1.0) < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        Ok(self.scale_noise(x, noise))
    }

    fn scale_noise(&mut self, x: TensorId, noise: Vec<T>) -> TensorId {
        let data: Vec<T> = self
            .data(x)
            .iter()
            .zip(&noise)
            .map(|(&v, &n)| v * n)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, Op::ScaleNoise { x, noise }, needs)
    }

    /// Crop a rectangle out of [b,h,w,c] and bilinearly resize it to
    /// (out_h, out_w), half-pixel-center convention.
    pub fn bilinear_resize(
        &mut self,
        x: TensorId,
        crop: CropRect,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(SydError::ShapeMismatch {
                op: "bilinear_resize",
                lhs: shape,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (batch, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if crop.h == 0 || crop.w == 0 || crop.y + crop.h > h || crop.x + crop.w > w {
            return Err(SydError::Geometry(format!(
                "crop {}x{} at ({},{}) exceeds grid {}x{}",
                crop.h, crop.w, crop.y, crop.x, h, w
            )));
        }
        let row_taps = kernels::bilinear_axis_taps::<T>(crop.y, crop.h, out_h);
        let col_taps = kernels::bilinear_axis_taps::<T>(crop.x, crop.w, out_w);

        let src = self.data(x);
        let mut data = vec![T::zero(); batch * out_h * out_w * c];
        for bi in 0..batch {
            let sb = bi * h * w * c;
            let ob = bi * out_h * out_w * c;
            for (oy, &(y0, y1, wy0, wy1)) in row_taps.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in col_taps.iter().enumerate() {
                    let dst = ob + (oy * out_w + ox) * c;
                    let p00 = sb + (y0 * w + x0) * c;
                    let p01 = sb + (y0 * w + x1) * c;
                    let p10 = sb + (y1 * w + x0) * c;
                    let p11 = sb + (y1 * w + x1) * c;
                    for ch in 0..c {
                        data[dst + ch] = wy0 * (wx0 * src[p00 + ch] + wx1 * src[p01 + ch])
                            + wy1 * (wx0 * src[p10 + ch] + wx1 * src[p11 + ch]);
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(
            data,
            vec![batch, out_h, out_w, c],
            Op::Bilinear {
                x,
                row_taps,
                col_taps,
            },
            needs,
        ))
    }

    /// Mean over the batch of -log p(true class), with the probability
    /// floored at 1e-12. Inputs are probability rows, not logits.
    pub fn cross_entropy(&mut self, probs: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(SydError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        for &l in labels {
            if l >= classes {
                return Err(SydError::Label {
                    label: l,
                    num_classes: classes,
                });
            }
        }
        let floor = T::from_f64(CE_PROB_FLOOR);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let p = self.data(probs)[i * classes + l].max_val(floor);
            loss += -p.ln();
        }
        loss = loss * T::from_f64(1.0 / labels.len() as f64);
        let needs = self.nodes[probs.0].needs_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from `root`, accumulating d(sum(root))/d(leaf) into every
    /// leaf that requires a gradient. Leaf gradients stay readable via
    /// [`Tape::grad`]; interior gradients are dropped as soon as consumed.
    pub fn backward(&mut self, root: TensorId) {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(vec![T::one(); self.nodes[root.0].data.len()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if is_leaf {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::MatMul { a, b, m, k, n } => {
                if self.nodes[a.0].needs_grad {
                    let da = kernels::matmul_nt(g, &self.nodes[b.0].data, *m, *n, *k);
                    accumulate(&mut grads[a.0], da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = kernels::matmul_tn(&self.nodes[a.0].data, g, *k, *m, *n);
                    accumulate(&mut grads[b.0], db);
                }
            }

            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let block = kernels::matmul_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                        da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&block);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let block = kernels::matmul_tn(
                            &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                        );
                        db[bi * k * n..(bi + 1) * k * n].copy_from_slice(&block);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }

            Op::Add { a, b } => {
                let out_shape = &self.nodes[i].shape;
                if self.nodes[a.0].needs_grad {
                    let da = reduce_to_shape(g, out_shape, &self.nodes[a.0].shape);
                    accumulate(&mut grads[a.0], da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = reduce_to_shape(g, out_shape, &self.nodes[b.0].shape);
                    accumulate(&mut grads[b.0], db);
                }
            }

            Op::Mul { a, b } => {
                let out_shape = &self.nodes[i].shape;
                if self.nodes[a.0].needs_grad {
                    let g_times_b = map_broadcast(
                        g,
                        out_shape,
                        &self.nodes[b.0].data,
                        &self.nodes[b.0].shape,
                        out_shape,
                        |gv, bv| gv * bv,
                    );
                    let da = reduce_to_shape(&g_times_b, out_shape, &self.nodes[a.0].shape);
                    accumulate(&mut grads[a.0], da);
                }
                if self.nodes[b.0].needs_grad {
                    let g_times_a = map_broadcast(
                        g,
                        out_shape,
                        &self.nodes[a.0].data,
                        &self.nodes[a.0].shape,
                        out_shape,
                        |gv, av| gv * av,
                    );
                    let db = reduce_to_shape(&g_times_a, out_shape, &self.nodes[b.0].shape);
                    accumulate(&mut grads[b.0], db);
                }
            }

            Op::Tanh { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }

            Op::Sigmoid { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }

            Op::Relu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }

            Op::Reshape { x } => {
                accumulate(&mut grads[x.0], g.to_vec());
            }

            Op::Concat { parts, axis } => {
                let out_shape = &self.nodes[i].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![T::zero(); self.nodes[p.0].data.len()];
                        for o in 0..outer {
                            let src = (o * axis_total + offset) * inner;
                            let dst = o * len * inner;
                            dp[dst..dst + len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    offset += len;
                }
            }

            Op::MeanAxes { x, out_map, count } => {
                let inv = T::from_f64(1.0 / *count as f64);
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                for (iidx, d) in dx.iter_mut().enumerate() {
                    *d = g[out_map[iidx]] * inv;
                }
                accumulate(&mut grads[x.0], dx);
            }

            Op::MaxAxes { x, arg } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += g[o];
                }
                accumulate(&mut grads[x.0], dx);
            }

            Op::SumAll { x } => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                accumulate(&mut grads[x.0], dx);
            }

            Op::Softmax { x, axis } => {
                let shape = &self.nodes[i].shape;
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let y = &self.nodes[i].data;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + ii;
                        let mut dot = T::zero();
                        for a in 0..len {
                            dot += g[at(a)] * y[at(a)];
                        }
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }

            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                oh,
                ow,
            } => {
                let sx = &self.nodes[x.0].shape;
                let sw = &self.nodes[w.0].shape;
                let (batch, h, width, cin) = (sx[0], sx[1], sx[2], sx[3]);
                let (kh, kw, _, cout) = (sw[0], sw[1], sw[2], sw[3]);
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::conv2d_backward_input(
                        g,
                        &self.nodes[w.0].data,
                        batch,
                        h,
                        width,
                        cin,
                        kh,
                        kw,
                        cout,
                        *stride,
                        *pad,
                        *oh,
                        *ow,
                    );
                    accumulate(&mut grads[x.0], dx);
                }
                if self.nodes[w.0].needs_grad || self.nodes[bias.0].needs_grad {
                    let (dw, db) = kernels::conv2d_backward_weight(
                        g,
                        &self.nodes[x.0].data,
                        batch,
                        h,
                        width,
                        cin,
                        kh,
                        kw,
                        cout,
                        *stride,
                        *pad,
                        *oh,
                        *ow,
                    );
                    if self.nodes[w.0].needs_grad {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if self.nodes[bias.0].needs_grad {
                        accumulate(&mut grads[bias.0], db);
                    }
                }
            }

            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                training,
            } => {
                let c = inv_std.len();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (r, row) in g.chunks(c).enumerate() {
                    for (j, &gv) in row.iter().enumerate() {
                        dgamma[j] += gv * xhat[r * c + j];
                        dbeta[j] += gv;
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let gm = &self.nodes[gamma.0].data;
                    let mut dx = vec![T::zero(); g.len()];
                    if *training {
                        let inv_rows = T::from_f64(1.0 / *rows as f64);
                        for (idx, d) in dx.iter_mut().enumerate() {
                            let j = idx % c;
                            *d = gm[j]
                                * inv_std[j]
                                * (g[idx]
                                    - dbeta[j] * inv_rows
                                    - xhat[idx] * dgamma[j] * inv_rows);
                        }
                    } else {
                        for (idx, d) in dx.iter_mut().enumerate() {
                            let j = idx % c;
                            *d = g[idx] * gm[j] * inv_std[j];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.nodes[gamma.0].needs_grad {
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if self.nodes[beta.0].needs_grad {
                    accumulate(&mut grads[beta.0], dbeta);
                }
            }

            Op::ScaleNoise { x, noise } => {
                let dx: Vec<T> = g.iter().zip(noise).map(|(&gv, &n)| gv * n).collect();
                accumulate(&mut grads[x.0], dx);
            }

            Op::Bilinear { x, row_taps, col_taps } => {
                let sx = &self.nodes[x.0].shape;
                let (batch, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                let (out_h, out_w) = (row_taps.len(), col_taps.len());
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                for bi in 0..batch {
                    let sb = bi * h * w * c;
                    let ob = bi * out_h * out_w * c;
                    for (oy, &(y0, y1, wy0, wy1)) in row_taps.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in col_taps.iter().enumerate() {
                            let src = ob + (oy * out_w + ox) * c;
                            let p00 = sb + (y0 * w + x0) * c;
                            let p01 = sb + (y0 * w + x1) * c;
                            let p10 = sb + (y1 * w + x0) * c;
                            let p11 = sb + (y1 * w + x1) * c;
                            for ch in 0..c {
                                let gv = g[src + ch];
                                dx[p00 + ch] += wy0 * wx0 * gv;
                                dx[p01 + ch] += wy0 * wx1 * gv;
                                dx[p10 + ch] += wy1 * wx0 * gv;
                                dx[p11 + ch] += wy1 * wx1 * gv;
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }

            Op::CrossEntropy { probs, labels } => {
                let classes = self.nodes[probs.0].shape[1];
                let floor = T::from_f64(CE_PROB_FLOOR);
                let scale = g[0] * T::from_f64(1.0 / labels.len() as f64);
                let mut dp = vec![T::zero(); self.nodes[probs.0].data.len()];
                for (bi, &l) in labels.iter().enumerate() {
                    let p = self.nodes[probs.0].data[bi * classes + l];
                    if p > floor {
                        dp[bi * classes + l] = -scale / p;
                    }
                }
                accumulate(&mut grads[probs.0], dp);
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, add: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(add) {
                *a += b;
            }
        }
        None => *slot = Some(add),
    }
}

/// NumPy-style broadcast result shape, or None if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[d] = da.max(db);
    }
    Some(out)
}

/// Per-output-dim stride into an operand, zero where the operand broadcasts.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let strides = strides_for(shape);
    let mut out = vec![0usize; rank];
    let offset = rank - shape.len();
    for (d, &s) in shape.iter().enumerate() {
        out[offset + d] = if s == 1 { 0 } else { strides[d] };
    }
    out
}

/// Elementwise combine with broadcasting (odometer walk over the output).
fn map_broadcast<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let rank = out_shape.len();
    let a_str = bcast_strides(a_shape, out_shape);
    let b_str = bcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a[ai], b[bi]));
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += a_str[d];
            bi += b_str[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= a_str[d] * out_shape[d];
            bi -= b_str[d] * out_shape[d];
        }
    }
    out
}

/// Sum a gradient of `from_shape` down to `to_shape` (undo broadcasting).
fn reduce_to_shape<T: Scalar>(grad: &[T], from_shape: &[usize], to_shape: &[usize]) -> Vec<T> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let numel_to: usize = to_shape.iter().product();
    let rank = from_shape.len();
    let t_str = bcast_strides(to_shape, from_shape);
    let mut out = vec![T::zero(); numel_to];
    let mut coords = vec![0usize; rank];
    let mut ti = 0usize;
    for &gv in grad {
        out[ti] += gv;
        for d in (0..rank).rev() {
            coords[d] += 1;
            ti += t_str[d];
            if coords[d] < from_shape[d] {
                break;
            }
            coords[d] = 0;
            ti -= t_str[d] * from_shape[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = t.matmul(eye, m).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut t = tape();
        let a = t.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![2.0, 5.0]).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.data(y), &[2.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut t = tape();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut t = tape();
        let x = t.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        for &v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = t.constant(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!((t.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((t.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_stable() {
        let mut t = tape();
        let x = t.constant(vec![2], vec![1000.0, 1000.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut t = tape();
        let x = t
            .constant(vec![2, 3], vec![0.3, -2.0, 5.0, 1.0, 1.0, -7.5])
            .unwrap();
        let y = t.softmax(x, 1).unwrap();
        for row in t.data(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn tanh_sigmoid_origin() {
        let mut t = tape();
        let x = t.constant(vec![1], vec![0.0]).unwrap();
        let th = t.tanh(x);
        let sg = t.sigmoid(x);
        assert_eq!(t.data(th), &[0.0]);
        assert_eq!(t.data(sg), &[0.5]);
    }

    #[test]
    fn residual_with_unit_mask_doubles() {
        // a*ones + a == 2a, the fusion identity with a unit mask
        let mut t = tape();
        let a = t.constant(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let ones = t.constant(vec![3], vec![1.0; 3]).unwrap();
        let prod = t.mul(a, ones).unwrap();
        let y = t.add(prod, a).unwrap();
        assert_eq!(t.data(y), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn mean_and_max_reductions() {
        let mut t = tape();
        // 2x2x1 spatial map [1,2,3,4]: spatial mean 2.5
        let x = t.constant(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gap = t.mean_axes(x, &[0, 1]).unwrap();
        assert_eq!(t.shape(gap), &[1]);
        assert_eq!(t.data(gap), &[2.5]);
        // 1x1x3 map [1,5,2]: channel max 5
        let x = t.constant(vec![1, 1, 3], vec![1.0, 5.0, 2.0]).unwrap();
        let gmp = t.max_axes(x, &[2]).unwrap();
        assert_eq!(t.shape(gmp), &[1, 1]);
        assert_eq!(t.data(gmp), &[5.0]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let mut t = tape();
        let x = t.constant(vec![3, 3, 2], vec![0.7; 18]).unwrap();
        let gap = t.mean_axes(x, &[0, 1]).unwrap();
        let gmp = t.max_axes(x, &[0, 1]).unwrap();
        for &v in t.data(gap) {
            assert!((v - 0.7).abs() < 1e-12);
        }
        assert_eq!(t.data(gmp), &[0.7, 0.7]);
    }

    #[test]
    fn cross_entropy_perfect_and_uniform() {
        let mut t = tape();
        let perfect = t
            .constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let loss = t.cross_entropy(perfect, &[0, 2]).unwrap();
        assert!(t.data(loss)[0].abs() < 1e-9);

        let uniform = t.constant(vec![1, 4], vec![0.25; 4]).unwrap();
        let loss = t.cross_entropy(uniform, &[1]).unwrap();
        assert!((t.data(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = tape();
        let p = t.constant(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            t.cross_entropy(p, &[3]),
            Err(SydError::Label { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn gaussian_dropout_eval_is_same_node() {
        let mut t = tape();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = t.gaussian_dropout(x, 0.37, false, &mut rng).unwrap();
        assert_eq!(x, y);
        // rho = 0 is the identity in training mode too
        let y = t.gaussian_dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn gaussian_dropout_rejects_rho_one() {
        let mut t = tape();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t.constant(vec![1], vec![1.0]).unwrap();
        assert!(t.gaussian_dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn gaussian_dropout_preserves_expectation() {
        // Empirical mean of y/x over 1e5 draws stays within [0.99, 1.01] at rho=0.2.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![n], vec![2.0; n]).unwrap();
        let y = t.gaussian_dropout(x, 0.2, true, &mut rng).unwrap();
        let mean: f64 = t.data(y).iter().map(|&v| v / 2.0).sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean ratio {mean}");
    }

    #[test]
    fn batch_norm_zero_variance_outputs_shift() {
        let mut t = tape();
        let x = t.constant(vec![4, 2], vec![3.0; 8]).unwrap();
        let gamma = t.constant(vec![2], vec![1.5, 2.0]).unwrap();
        let beta = t.constant(vec![2], vec![0.25, -1.0]).unwrap();
        let mut running = BnRunning::new(2);
        let y = t.batch_norm(x, gamma, beta, &mut running, true).unwrap();
        for row in t.data(y).chunks(2) {
            assert!((row[0] - 0.25).abs() < 1e-6);
            assert!((row[1] + 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_standardizes_batch() {
        let mut t = tape();
        let data: Vec<f64> = (0..32).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let x = t.constant(vec![16, 2], data).unwrap();
        let gamma = t.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let mut running = BnRunning::new(2);
        let y = t.batch_norm(x, gamma, beta, &mut running, true).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = t.data(y).iter().skip(j).step_by(2).copied().collect();
            let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / col.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batch_norm_eval_is_repeatable() {
        let mut running = BnRunning::new(2);
        running.mean = vec![0.5, -0.5];
        running.var = vec![2.0, 0.3];
        let run = |running: &mut BnRunning<f64>| {
            let mut t = tape();
            let x = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
            let gamma = t.constant(vec![2], vec![1.1, 0.9]).unwrap();
            let beta = t.constant(vec![2], vec![0.0, 0.1]).unwrap();
            let y = t.batch_norm(x, gamma, beta, running, false).unwrap();
            t.data(y).to_vec()
        };
        let a = run(&mut running);
        let b = run(&mut running);
        assert_eq!(a, b);
    }

    #[test]
    fn composite_chain_matches_manual_adjoints() {
        // y = sigmoid(tanh(x) * k); dy/dx = sig' * k * tanh'
        let mut t = tape();
        let x = t.variable(vec![3], vec![0.3, -1.2, 0.9]).unwrap();
        let k = t.constant(vec![3], vec![2.0, 0.5, -1.0]).unwrap();
        let th = t.tanh(x);
        let prod = t.mul(th, k).unwrap();
        let y = t.sigmoid(prod);
        let loss = t.sum_all(y);
        t.backward(loss);
        let grad = t.grad(x).unwrap().to_vec();

        for (i, (&xv, &kv)) in [0.3, -1.2, 0.9].iter().zip(&[2.0, 0.5, -1.0]).enumerate() {
            let tv: f64 = f64::tanh(xv);
            let s = 1.0 / (1.0 + f64::exp(-(tv * kv)));
            let manual = s * (1.0 - s) * kv * (1.0 - tv * tv);
            assert!(
                (grad[i] - manual).abs() < 1e-12,
                "entry {i}: {} vs {manual}",
                grad[i]
            );
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = tape();
        let a = t.variable(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.variable(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.add(a, b).unwrap();
        let loss = t.sum_all(y);
        t.backward(loss);
        assert_eq!(t.grad(a).unwrap(), &[1.0; 6]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn bilinear_identity_resize() {
        let mut t = tape();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = t.constant(vec![1, 4, 4, 1], data.clone()).unwrap();
        let y = t
            .bilinear_resize(x, CropRect { y: 0, x: 0, h: 4, w: 4 }, 4, 4)
            .unwrap();
        assert_eq!(t.data(y), &data[..]);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let mut t = tape();
        let x = t.constant(vec![1, 2, 2, 3], vec![0.4; 12]).unwrap();
        let y = t
            .bilinear_resize(x, CropRect { y: 0, x: 0, h: 2, w: 2 }, 5, 7)
            .unwrap();
        for &v in t.data(y) {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_rejects_out_of_bounds_crop() {
        let mut t = tape();
        let x = t.constant(vec![1, 4, 4, 1], vec![0.0; 16]).unwrap();
        let err = t
            .bilinear_resize(x, CropRect { y: 2, x: 0, h: 3, w: 4 }, 2, 2)
            .unwrap_err();
        assert!(matches!(err, SydError::Geometry(_)));
    }

    #[test]
    fn fixed_seed_forward_backward_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut t: Tape<f32> = Tape::new();
            let x = t
                .variable(vec![4, 3], (0..12).map(|v| v as f32 * 0.1).collect())
                .unwrap();
            let w = t
                .variable(vec![3, 2], (0..6).map(|v| 0.05 * v as f32 - 0.1).collect())
                .unwrap();
            let h = t.matmul(x, w).unwrap();
            let h = t.gaussian_dropout(h, 0.2, true, &mut rng).unwrap();
            let p = t.softmax(h, 1).unwrap();
            let loss = t.cross_entropy(p, &[0, 1, 0, 1]).unwrap();
            t.backward(loss);
            (
                t.data(loss).to_vec(),
                t.grad(w).unwrap().to_vec(),
                t.grad(x).unwrap().to_vec(),
            )
        };
        let (l1, gw1, gx1) = run();
        let (l2, gw2, gx2) = run();
        assert_eq!(l1, l2);
        assert_eq!(gw1, gw2);
        assert_eq!(gx1, gx2);
    }
}
