//! The patch-based attention head: cross-patch channel attention, a pooled
//! spatial attention mask, residual fusion, and the regularized softmax
//! classifier. Also provides the attention-only baseline head and a
//! finite-difference verification harness over every head parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SydError};
use crate::tensor::gradcheck::{central_difference, max_rel_error, RelError};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{BnIds, BnLayer, Scalar, Tensor};

/// Activation of the spatial-attention MLP (softmax is the published default;
/// sigmoid reproduces the ablation variant).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaActivation {
    Softmax,
    Sigmoid,
}

/// Regularizer in the classification stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutKind {
    Gaussian,
    Bernoulli,
    None,
}

/// Static geometry and switches of the head.
#[derive(Clone, Debug)]
pub struct HeadConfig {
    /// Backbone channel count c.
    pub channels: usize,
    /// Attention hidden width; defaults to max(c/8, 16).
    pub attn_hidden: usize,
    /// Number of patches n.
    pub patch_count: usize,
    /// Pooled patch spatial size (the backbone's h, w).
    pub patch_h: usize,
    pub patch_w: usize,
    pub num_classes: usize,
    /// Dropout rate rho.
    pub rho: f64,
    pub dropout: DropoutKind,
    pub sa_activation: SaActivation,
    /// Whether the channel-attention softmax over j includes j = i.
    pub ca_include_self: bool,
    pub use_ca: bool,
    pub use_sa: bool,
}

impl HeadConfig {
    pub fn new(channels: usize, patch_count: usize, patch_h: usize, patch_w: usize, num_classes: usize) -> Self {
        Self {
            channels,
            attn_hidden: default_attn_hidden(channels),
            patch_count,
            patch_h,
            patch_w,
            num_classes,
            rho: 0.2,
            dropout: DropoutKind::Gaussian,
            sa_activation: SaActivation::Softmax,
            ca_include_self: true,
            use_ca: true,
            use_sa: true,
        }
    }
}

pub fn default_attn_hidden(channels: usize) -> usize {
    (channels / 8).max(16)
}

// ── Parameter bundles ───────────────────────────────────────────────────

/// Channel-attention weights: the pairwise attention map, its gate, the
/// per-pair score, and the per-patch weighting.
#[derive(Clone, Debug)]
pub struct CaParams<T> {
    pub w_psi: Tensor<T>,
    pub w_psi_prime: Tensor<T>,
    pub b_psi: Tensor<T>,
    pub w_theta: Tensor<T>,
    pub b_theta: Tensor<T>,
    pub w_delta: Tensor<T>,
    pub b_delta: Tensor<T>,
    pub w_phi: Tensor<T>,
    pub b_phi: Tensor<T>,
}

impl<T: Scalar> CaParams<T> {
    pub fn init(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = |shape: Vec<usize>, fi: usize, fo: usize, rng: &mut ChaCha8Rng| {
            Tensor::glorot_uniform(shape, fi, fo, rng).with_requires_grad()
        };
        Self {
            w_psi: g(vec![channels, hidden], channels, hidden, rng),
            w_psi_prime: g(vec![channels, hidden], channels, hidden, rng),
            b_psi: Tensor::zeros(vec![hidden]).with_requires_grad(),
            w_theta: g(vec![hidden, 1], hidden, 1, rng),
            b_theta: Tensor::zeros(vec![1]).with_requires_grad(),
            w_delta: g(vec![1, 1], 1, 1, rng),
            b_delta: Tensor::zeros(vec![1]).with_requires_grad(),
            w_phi: g(vec![channels, 1], channels, 1, rng),
            b_phi: Tensor::zeros(vec![1]).with_requires_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> CaIds {
        CaIds {
            w_psi: tape.leaf(&self.w_psi),
            w_psi_prime: tape.leaf(&self.w_psi_prime),
            b_psi: tape.leaf(&self.b_psi),
            w_theta: tape.leaf(&self.w_theta),
            b_theta: tape.leaf(&self.b_theta),
            w_delta: tape.leaf(&self.w_delta),
            b_delta: tape.leaf(&self.b_delta),
            w_phi: tape.leaf(&self.w_phi),
            b_phi: tape.leaf(&self.b_phi),
        }
    }

    pub fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w_psi"), &mut self.w_psi);
        f(format!("{prefix}.w_psi_prime"), &mut self.w_psi_prime);
        f(format!("{prefix}.b_psi"), &mut self.b_psi);
        f(format!("{prefix}.w_theta"), &mut self.w_theta);
        f(format!("{prefix}.b_theta"), &mut self.b_theta);
        f(format!("{prefix}.w_delta"), &mut self.w_delta);
        f(format!("{prefix}.b_delta"), &mut self.b_delta);
        f(format!("{prefix}.w_phi"), &mut self.w_phi);
        f(format!("{prefix}.b_phi"), &mut self.b_phi);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CaIds {
    pub w_psi: TensorId,
    pub w_psi_prime: TensorId,
    pub b_psi: TensorId,
    pub w_theta: TensorId,
    pub b_theta: TensorId,
    pub w_delta: TensorId,
    pub b_delta: TensorId,
    pub w_phi: TensorId,
    pub b_phi: TensorId,
}

/// Spatial-attention MLP: dense from the flattened pooled planes to c,
/// then activation, dropout, and batch norm.
#[derive(Clone, Debug)]
pub struct SaParams<T> {
    pub dense: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BnLayer<T>,
}

impl<T: Scalar> SaParams<T> {
    pub fn init(cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let in_dim = 2 * cfg.patch_count * cfg.patch_h * cfg.patch_w;
        Self {
            dense: Tensor::glorot_uniform(vec![in_dim, cfg.channels], in_dim, cfg.channels, rng)
                .with_requires_grad(),
            bias: Tensor::zeros(vec![cfg.channels]).with_requires_grad(),
            bn: BnLayer::new(cfg.channels),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> SaIds {
        SaIds {
            dense: tape.leaf(&self.dense),
            bias: tape.leaf(&self.bias),
            bn: self.bn.bind(tape),
        }
    }

    pub fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.dense"), &mut self.dense);
        f(format!("{prefix}.bias"), &mut self.bias);
        f(format!("{prefix}.bn.gamma"), &mut self.bn.gamma);
        f(format!("{prefix}.bn.beta"), &mut self.bn.beta);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SaIds {
    pub dense: TensorId,
    pub bias: TensorId,
    pub bn: BnIds,
}

/// Final stage shared by every model variant: dropout + batch norm, then a
/// dense layer to class logits and softmax.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    pub bn: BnLayer<T>,
    pub dense: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn init(channels: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn: BnLayer::new(channels),
            dense: Tensor::glorot_uniform(vec![channels, num_classes], channels, num_classes, rng)
                .with_requires_grad(),
            bias: Tensor::zeros(vec![num_classes]).with_requires_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ClassifierIds {
        ClassifierIds {
            bn: self.bn.bind(tape),
            dense: tape.leaf(&self.dense),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.bn.gamma"), &mut self.bn.gamma);
        f(format!("{prefix}.bn.beta"), &mut self.bn.beta);
        f(format!("{prefix}.dense"), &mut self.dense);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierIds {
    pub bn: BnIds,
    pub dense: TensorId,
    pub bias: TensorId,
}

/// All learnable state of the PbA head. The CA and SA branches are allocated
/// only when enabled, so ablated variants carry no dead parameters.
#[derive(Clone, Debug)]
pub struct PbaParams<T> {
    pub ca: Option<CaParams<T>>,
    pub sa: Option<SaParams<T>>,
    pub classifier: ClassifierHead<T>,
}

impl<T: Scalar> PbaParams<T> {
    pub fn init(cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ca: cfg
                .use_ca
                .then(|| CaParams::init(cfg.channels, cfg.attn_hidden, rng)),
            sa: cfg.use_sa.then(|| SaParams::init(cfg, rng)),
            classifier: ClassifierHead::init(cfg.channels, cfg.num_classes, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> PbaIds {
        PbaIds {
            ca: self.ca.as_ref().map(|p| p.bind(tape)),
            sa: self.sa.as_ref().map(|p| p.bind(tape)),
            classifier: self.classifier.bind(tape),
        }
    }

    pub fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(ca) = &mut self.ca {
            ca.walk_params(&format!("{prefix}.ca"), f);
        }
        if let Some(sa) = &mut self.sa {
            sa.walk_params(&format!("{prefix}.sa"), f);
        }
        self.classifier.walk_params(&format!("{prefix}.classifier"), f);
    }

    pub fn walk_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        if let Some(sa) = &mut self.sa {
            f(format!("{prefix}.sa.bn.running_mean"), &mut sa.bn.running.mean);
            f(format!("{prefix}.sa.bn.running_var"), &mut sa.bn.running.var);
        }
        f(
            format!("{prefix}.classifier.bn.running_mean"),
            &mut self.classifier.bn.running.mean,
        );
        f(
            format!("{prefix}.classifier.bn.running_var"),
            &mut self.classifier.bn.running.var,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PbaIds {
    pub ca: Option<CaIds>,
    pub sa: Option<SaIds>,
    pub classifier: ClassifierIds,
}

// ── Forward passes ──────────────────────────────────────────────────────

/// Channel-attention output plus the normalized weights, kept visible for
/// diagnostics and invariant checks.
pub struct CaOutput {
    /// [b, c]
    pub f_ca: TensorId,
    /// [b, n, n] rows summing to one.
    pub delta: TensorId,
    /// [b, n] summing to one.
    pub phi: TensorId,
    /// [b, n, c] pooled aggregated patch features.
    pub f_tilde: TensorId,
}

/// Cross-patch channel attention over pooled patch features [b,n,h,w,c]:
/// pairwise gated affinities reduce to one logit per ordered pair, a softmax
/// over neighbors re-weights whole patch maps, pooled aggregates are then
/// softmax-weighted into a single [b,c] descriptor.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    patch_feats: TensorId,
    ids: &CaIds,
    include_self: bool,
) -> Result<CaOutput> {
    let shape = tape.shape(patch_feats).to_vec();
    if shape.len() != 5 {
        return Err(SydError::ShapeMismatch {
            op: "channel_attention",
            lhs: shape,
            rhs: vec![0; 5],
        });
    }
    let (b, n, h, w, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let hw = h * w;
    let hidden = tape.shape(ids.w_psi)[1];

    // psi_{i,j} = tanh(F_i W_psi + F_j W_psi' + b_psi), per spatial location
    let flat = tape.reshape(patch_feats, vec![b * n * hw, c])?;
    let a_proj = tape.matmul(flat, ids.w_psi)?;
    let b_proj = tape.matmul(flat, ids.w_psi_prime)?;
    let a5 = tape.reshape(a_proj, vec![b, n, 1, hw, hidden])?;
    let b5 = tape.reshape(b_proj, vec![b, 1, n, hw, hidden])?;
    let pre = tape.add(a5, b5)?;
    let pre = tape.add(pre, ids.b_psi)?;
    let psi = tape.tanh(pre);

    // theta_{i,j} = sigmoid(psi W_theta + b_theta), then spatial mean to one
    // logit per ordered pair
    let psi_flat = tape.reshape(psi, vec![b * n * n * hw, hidden])?;
    let gate = tape.matmul(psi_flat, ids.w_theta)?;
    let gate = tape.add(gate, ids.b_theta)?;
    let gate = tape.sigmoid(gate);
    let gate = tape.reshape(gate, vec![b, n, n, hw])?;
    let pair_logits = tape.mean_axes(gate, &[3])?;

    // delta_i = softmax_j(w_delta theta_{i,j} + b_delta)
    let scored = tape.mul(pair_logits, ids.w_delta)?;
    let scored = tape.add(scored, ids.b_delta)?;
    let scored = if include_self {
        scored
    } else {
        // mask the diagonal before the softmax so delta_{i,i} underflows to 0
        let mut mask = vec![T::zero(); n * n];
        for i in 0..n {
            mask[i * n + i] = T::from_f64(-1e30);
        }
        let mask = tape.constant(vec![n, n], mask)?;
        tape.add(scored, mask)?
    };
    let delta = tape.softmax(scored, 2)?;

    // F_hat_i = sum_j delta_{i,j} F_j (whole patch maps, scalar-weighted)
    let feats_mat = tape.reshape(patch_feats, vec![b, n, hw * c])?;
    let f_hat = tape.bmm(delta, feats_mat)?;
    let f_hat = tape.reshape(f_hat, vec![b, n, h, w, c])?;

    // F_tilde_i = spatial GAP; phi = softmax_i(w_phi F_tilde_i + b_phi)
    let f_tilde = tape.mean_axes(f_hat, &[2, 3])?;
    let ft_flat = tape.reshape(f_tilde, vec![b * n, c])?;
    let scores = tape.matmul(ft_flat, ids.w_phi)?;
    let scores = tape.add(scores, ids.b_phi)?;
    let scores = tape.reshape(scores, vec![b, n])?;
    let phi = tape.softmax(scores, 1)?;

    // F_CA = sum_i phi_i F_tilde_i
    let phi_row = tape.reshape(phi, vec![b, 1, n])?;
    let f_ca = tape.bmm(phi_row, f_tilde)?;
    let f_ca = tape.reshape(f_ca, vec![b, c])?;

    Ok(CaOutput {
        f_ca,
        delta,
        phi,
        f_tilde,
    })
}

/// Spatial-attention output; `mask` is the post-activation value before
/// dropout and batch norm (softmax mode: sums to one over channels).
pub struct SaOutput {
    /// [b, c]
    pub f_sa: TensorId,
    /// [b, c] pre-regularization mask.
    pub mask: TensorId,
}

/// Spatial attention: per patch, channel-axis GAP and GMP planes are stacked
/// and concatenated, everything is flattened (patch-major, then row, column,
/// then {gap, gmp}) and passed through dense -> activation -> dropout -> BN.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    patch_feats: TensorId,
    ids: &SaIds,
    sa: &mut SaParams<T>,
    cfg: &HeadConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<SaOutput> {
    let shape = tape.shape(patch_feats).to_vec();
    if shape.len() != 5 {
        return Err(SydError::ShapeMismatch {
            op: "spatial_attention",
            lhs: shape,
            rhs: vec![0; 5],
        });
    }
    let (b, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);

    let gap = tape.mean_axes(patch_feats, &[4])?;
    let gmp = tape.max_axes(patch_feats, &[4])?;
    let gap = tape.reshape(gap, vec![b, n, h, w, 1])?;
    let gmp = tape.reshape(gmp, vec![b, n, h, w, 1])?;
    let fused = tape.concat(&[gap, gmp], 4)?;
    let flat = tape.reshape(fused, vec![b, 2 * n * h * w])?;

    let z = tape.matmul(flat, ids.dense)?;
    let z = tape.add(z, ids.bias)?;
    let mask = match cfg.sa_activation {
        SaActivation::Softmax => tape.softmax(z, 1)?,
        SaActivation::Sigmoid => tape.sigmoid(z),
    };
    let dropped = apply_dropout(tape, mask, cfg, training, rng)?;
    let f_sa = sa.bn.forward(tape, &ids.bn, dropped, training)?;
    Ok(SaOutput { f_sa, mask })
}

/// Residual fusion F_CA * F_SA + F_CA.
pub fn fuse_pba<T: Scalar>(
    tape: &mut Tape<T>,
    f_ca: TensorId,
    f_sa: TensorId,
) -> Result<TensorId> {
    let prod = tape.mul(f_ca, f_sa)?;
    tape.add(prod, f_ca)
}

fn apply_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    cfg: &HeadConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    match cfg.dropout {
        DropoutKind::Gaussian => tape.gaussian_dropout(x, cfg.rho, training, rng),
        DropoutKind::Bernoulli => tape.bernoulli_dropout(x, cfg.rho, training, rng),
        DropoutKind::None => Ok(x),
    }
}

/// Everything the head produces for one batch.
pub struct HeadOutput {
    /// [b, L] probability rows.
    pub y_pred: TensorId,
    /// [b, c] fused descriptor.
    pub f_pba: TensorId,
    pub f_ca: Option<TensorId>,
    pub f_sa: Option<TensorId>,
}

/// Full classification pass: fused patch descriptor plus the global-pooled
/// feature map, regularized and projected to class probabilities.
///
/// `patch_feats` may be absent only when both attention branches are off, in
/// which case the head degenerates to the plain GAP classifier.
#[allow(clippy::too_many_arguments)]
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    fmap: TensorId,
    patch_feats: Option<TensorId>,
    ids: &PbaIds,
    params: &mut PbaParams<T>,
    cfg: &HeadConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<HeadOutput> {
    let fshape = tape.shape(fmap).to_vec();
    let (b, c) = (fshape[0], fshape[3]);
    let gap_f = tape.mean_axes(fmap, &[1, 2])?;
    debug_assert_eq!(tape.shape(gap_f), &[b, c]);

    let mut f_ca_out = None;
    let mut f_sa_out = None;

    let f_pba = match patch_feats {
        Some(feats) if cfg.use_ca || cfg.use_sa => {
            // CA-less variants re-weight the global descriptor instead
            let ca_vec = if cfg.use_ca {
                let ids_ca = ids.ca.as_ref().expect("CA enabled but unbound");
                let out = channel_attention(tape, feats, ids_ca, cfg.ca_include_self)?;
                f_ca_out = Some(out.f_ca);
                out.f_ca
            } else {
                gap_f
            };
            if cfg.use_sa {
                let ids_sa = ids.sa.as_ref().expect("SA enabled but unbound");
                let sa_params = params.sa.as_mut().expect("SA enabled but missing params");
                let out = spatial_attention(tape, feats, ids_sa, sa_params, cfg, training, rng)?;
                f_sa_out = Some(out.f_sa);
                fuse_pba(tape, ca_vec, out.f_sa)?
            } else {
                ca_vec
            }
        }
        Some(feats) => {
            // patches without attention: the mean of per-patch pooled features
            let per_patch = tape.mean_axes(feats, &[2, 3])?;
            tape.mean_axes(per_patch, &[1])?
        }
        None => gap_f,
    };

    let f_f = tape.add(f_pba, gap_f)?;
    let reg = apply_dropout(tape, f_f, cfg, training, rng)?;
    let reg = params
        .classifier
        .bn
        .forward(tape, &ids.classifier.bn, reg, training)?;
    let logits = tape.matmul(reg, ids.classifier.dense)?;
    let logits = tape.add(logits, ids.classifier.bias)?;
    let y_pred = tape.softmax(logits, 1)?;

    Ok(HeadOutput {
        y_pred,
        f_pba,
        f_ca: f_ca_out,
        f_sa: f_sa_out,
    })
}

/// Plain-GAP baseline: GAP(F) -> dropout + BN -> dense -> softmax.
pub fn gap_baseline_head<T: Scalar>(
    tape: &mut Tape<T>,
    fmap: TensorId,
    ids: &ClassifierIds,
    classifier: &mut ClassifierHead<T>,
    cfg: &HeadConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<HeadOutput> {
    let gap_f = tape.mean_axes(fmap, &[1, 2])?;
    let reg = apply_dropout(tape, gap_f, cfg, training, rng)?;
    let reg = classifier.bn.forward(tape, &ids.bn, reg, training)?;
    let logits = tape.matmul(reg, ids.dense)?;
    let logits = tape.add(logits, ids.bias)?;
    let y_pred = tape.softmax(logits, 1)?;
    Ok(HeadOutput {
        y_pred,
        f_pba: gap_f,
        f_ca: None,
        f_sa: None,
    })
}

/// Attention-over-features baseline: the channel-attention path applied to
/// the whole feature map as a single patch (n = 1, self-pair), then the
/// softmax classification stage. No patches, no spatial branch.
#[allow(clippy::too_many_arguments)]
pub fn attention_baseline_head<T: Scalar>(
    tape: &mut Tape<T>,
    fmap: TensorId,
    ca_ids: &CaIds,
    cls_ids: &ClassifierIds,
    classifier: &mut ClassifierHead<T>,
    cfg: &HeadConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<HeadOutput> {
    let shape = tape.shape(fmap).to_vec();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let single = tape.reshape(fmap, vec![b, 1, h, w, c])?;
    let ca = channel_attention(tape, single, ca_ids, cfg.ca_include_self)?;
    let reg = apply_dropout(tape, ca.f_ca, cfg, training, rng)?;
    let reg = classifier.bn.forward(tape, &cls_ids.bn, reg, training)?;
    let logits = tape.matmul(reg, cls_ids.dense)?;
    let logits = tape.add(logits, cls_ids.bias)?;
    let y_pred = tape.softmax(logits, 1)?;
    Ok(HeadOutput {
        y_pred,
        f_pba: ca.f_ca,
        f_ca: Some(ca.f_ca),
        f_sa: None,
    })
}

/// One pairwise attention logit: tanh/sigmoid gate over two patch maps,
/// reduced to a scalar by spatial mean. Exposed for tests and diagnostics.
pub fn pairwise_attention_logit<T: Scalar>(
    f_i: &Tensor<T>,
    f_j: &Tensor<T>,
    ca: &CaParams<T>,
) -> Result<T> {
    if f_i.shape() != f_j.shape() || f_i.shape().len() != 3 {
        return Err(SydError::ShapeMismatch {
            op: "pairwise_attention_logit",
            lhs: f_i.shape().to_vec(),
            rhs: f_j.shape().to_vec(),
        });
    }
    let (h, w, c) = (f_i.shape()[0], f_i.shape()[1], f_i.shape()[2]);
    if ca.w_psi.shape()[0] != c {
        return Err(SydError::ShapeMismatch {
            op: "pairwise_attention_logit",
            lhs: f_i.shape().to_vec(),
            rhs: ca.w_psi.shape().to_vec(),
        });
    }
    let mut tape: Tape<T> = Tape::new();
    let ids = ca.bind(&mut tape);
    let fi = tape.constant(vec![h * w, c], f_i.data().to_vec())?;
    let fj = tape.constant(vec![h * w, c], f_j.data().to_vec())?;
    let pi = tape.matmul(fi, ids.w_psi)?;
    let pj = tape.matmul(fj, ids.w_psi_prime)?;
    let pre = tape.add(pi, pj)?;
    let pre = tape.add(pre, ids.b_psi)?;
    let psi = tape.tanh(pre);
    let gate = tape.matmul(psi, ids.w_theta)?;
    let gate = tape.add(gate, ids.b_theta)?;
    let gate = tape.sigmoid(gate);
    let logit = tape.mean_axes(gate, &[0, 1])?;
    Ok(tape.data(logit)[0])
}

// ── Gradient verification harness ───────────────────────────────────────

/// One row of the head gradient-check table.
#[derive(Clone, Debug)]
pub struct GradRow {
    pub name: String,
    pub err: RelError,
}

/// Outcome of the finite-difference sweep over every head parameter.
#[derive(Clone, Debug)]
pub struct HeadGradCheck {
    pub rows: Vec<GradRow>,
    pub max: f64,
    pub tolerance: f64,
}

impl HeadGradCheck {
    pub fn passed(&self) -> bool {
        self.max < self.tolerance
    }

    pub fn worst(&self) -> &GradRow {
        self.rows
            .iter()
            .max_by(|a, b| a.err.max.total_cmp(&b.err.max))
            .expect("at least one parameter group")
    }
}

/// Finite-difference check of d(loss)/d(parameter) for every parameter of a
/// small randomly initialized head (n=3, h=w=2, c=8, hidden=4, L=3), in f64
/// with dropout in eval mode so the forward is pure.
pub fn head_grad_check(tolerance: f64, seed: u64) -> Result<HeadGradCheck> {
    let mut cfg = HeadConfig::new(8, 3, 2, 2, 3);
    cfg.attn_hidden = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: PbaParams<f64> = PbaParams::init(&cfg, &mut rng);

    // randomized running statistics make the eval-mode BN path non-trivial
    let mut stats_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    params.walk_buffers("head", &mut |name, buf| {
        let mut r = ChaCha8Rng::seed_from_u64(stats_rng.random::<u64>());
        for v in buf.iter_mut() {
            *v = if name.ends_with("var") {
                r.random_range(0.5..1.5)
            } else {
                r.random_range(-0.3..0.3)
            };
        }
    });

    let batch = 2;
    let (n, h, w, c) = (cfg.patch_count, cfg.patch_h, cfg.patch_w, cfg.channels);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDA7A);
    let fmap_data: Vec<f64> = (0..batch * h * w * c)
        .map(|_| data_rng.random_range(-1.0..1.0))
        .collect();
    let feats_data: Vec<f64> = (0..batch * n * h * w * c)
        .map(|_| data_rng.random_range(-1.0..1.0))
        .collect();
    let labels = vec![0usize, 2];

    let forward = |params: &mut PbaParams<f64>| -> Result<(Tape<f64>, PbaIds, TensorId)> {
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let fmap = tape.constant(vec![batch, h, w, c], fmap_data.clone())?;
        let feats = tape.constant(vec![batch, n, h, w, c], feats_data.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = classify(&mut tape, fmap, Some(feats), &ids, params, &cfg, false, &mut rng)?;
        let loss = tape.cross_entropy(out.y_pred, &labels)?;
        Ok((tape, ids, loss))
    };

    // One backward pass gives every analytic gradient. Leaf registration in
    // `bind` follows the same order as `walk_params`, which the zip relies on.
    let (mut tape, ids, loss) = forward(&mut params)?;
    tape.backward(loss);
    let mut bound_ids: Vec<TensorId> = Vec::new();
    if let Some(ca) = &ids.ca {
        bound_ids.extend([
            ca.w_psi, ca.w_psi_prime, ca.b_psi, ca.w_theta, ca.b_theta, ca.w_delta, ca.b_delta,
            ca.w_phi, ca.b_phi,
        ]);
    }
    if let Some(sa) = &ids.sa {
        bound_ids.extend([sa.dense, sa.bias, sa.bn.gamma, sa.bn.beta]);
    }
    bound_ids.extend([
        ids.classifier.bn.gamma,
        ids.classifier.bn.beta,
        ids.classifier.dense,
        ids.classifier.bias,
    ]);

    let mut names: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    params.walk_params("head", &mut |name, t| {
        names.push(name);
        values.push(t.data().to_vec());
    });
    assert_eq!(names.len(), bound_ids.len(), "bind/walk order drifted");
    let analytic: Vec<Vec<f64>> = bound_ids
        .iter()
        .map(|&id| tape.grad(id).expect("parameter gradient").to_vec())
        .collect();

    // Numeric side: central differences, re-running the forward with one
    // parameter tensor perturbed at a time.
    let mut rows = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let numeric = central_difference(&values[pi], |vals| {
            let mut probe = params.clone();
            let mut count = 0usize;
            probe.walk_params("head", &mut |_, t| {
                if count == pi {
                    t.data_mut().copy_from_slice(vals);
                }
                count += 1;
            });
            let (t, _, l) = forward(&mut probe).expect("forward in FD probe");
            t.data(l)[0]
        });
        let err = max_rel_error(&analytic[pi], &numeric);
        rows.push(GradRow {
            name: name.clone(),
            err,
        });
    }

    let max = rows.iter().map(|r| r.err.max).fold(0.0, f64::max);
    Ok(HeadGradCheck {
        rows,
        max,
        tolerance,
    })
}
