//! Model assembly: backbone (optional) plus one of the head variants, with
//! uniform parameter walking for the optimizer, checkpoints, and counting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_baseline_head, classify, gap_baseline_head, CaIds, CaParams, ClassifierHead,
    ClassifierIds, HeadConfig, HeadOutput, PbaIds, PbaParams,
};
use crate::backbone::{ConvBlockIds, ReferenceCnn};
use crate::error::{Result, SydError};
use crate::patches::{extract_patch_features, PatchSet};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};

/// Baseline selector; anything but `None` disables the patch path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    None,
    Gap,
    EraseGap,
    Attention,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub head: HeadConfig,
    /// Present exactly when the patch path is active (baseline == None).
    pub patch_set: Option<PatchSet>,
    /// None runs on imported frozen features.
    pub backbone_channels: Option<usize>,
    pub baseline: Baseline,
}

#[derive(Clone, Debug)]
pub enum Head<T> {
    Pba(PbaParams<T>),
    Gap(ClassifierHead<T>),
    Attention {
        ca: CaParams<T>,
        classifier: ClassifierHead<T>,
    },
}

pub enum HeadIds {
    Pba(PbaIds),
    Gap(ClassifierIds),
    Attention { ca: CaIds, classifier: ClassifierIds },
}

pub struct ModelIds {
    pub backbone: Vec<ConvBlockIds>,
    pub head: HeadIds,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub backbone: Option<ReferenceCnn<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = cfg
            .backbone_channels
            .map(|c| ReferenceCnn::init(c, &mut rng));
        let head = match cfg.baseline {
            Baseline::None => Head::Pba(PbaParams::init(&cfg.head, &mut rng)),
            Baseline::Gap | Baseline::EraseGap => {
                Head::Gap(ClassifierHead::init(cfg.head.channels, cfg.head.num_classes, &mut rng))
            }
            Baseline::Attention => Head::Attention {
                ca: CaParams::init(cfg.head.channels, cfg.head.attn_hidden, &mut rng),
                classifier: ClassifierHead::init(cfg.head.channels, cfg.head.num_classes, &mut rng),
            },
        };
        Self {
            cfg,
            backbone,
            head,
        }
    }

    /// Register every parameter as a tape leaf. The flat id list follows
    /// `walk_params` order exactly, which gradient harvesting relies on.
    pub fn bind(&self, tape: &mut Tape<T>) -> (ModelIds, Vec<TensorId>) {
        let mut flat = Vec::new();
        let backbone = self
            .backbone
            .as_ref()
            .map(|b| b.bind(tape))
            .unwrap_or_default();
        for b in &backbone {
            flat.extend([b.weight, b.bias, b.bn.gamma, b.bn.beta]);
        }
        let head = match &self.head {
            Head::Pba(p) => {
                let ids = p.bind(tape);
                if let Some(ca) = &ids.ca {
                    flat.extend([
                        ca.w_psi, ca.w_psi_prime, ca.b_psi, ca.w_theta, ca.b_theta, ca.w_delta,
                        ca.b_delta, ca.w_phi, ca.b_phi,
                    ]);
                }
                if let Some(sa) = &ids.sa {
                    flat.extend([sa.dense, sa.bias, sa.bn.gamma, sa.bn.beta]);
                }
                flat.extend([
                    ids.classifier.bn.gamma,
                    ids.classifier.bn.beta,
                    ids.classifier.dense,
                    ids.classifier.bias,
                ]);
                HeadIds::Pba(ids)
            }
            Head::Gap(c) => {
                let ids = c.bind(tape);
                flat.extend([ids.bn.gamma, ids.bn.beta, ids.dense, ids.bias]);
                HeadIds::Gap(ids)
            }
            Head::Attention { ca, classifier } => {
                let ca_ids = ca.bind(tape);
                flat.extend([
                    ca_ids.w_psi,
                    ca_ids.w_psi_prime,
                    ca_ids.b_psi,
                    ca_ids.w_theta,
                    ca_ids.b_theta,
                    ca_ids.w_delta,
                    ca_ids.b_delta,
                    ca_ids.w_phi,
                    ca_ids.b_phi,
                ]);
                let cls_ids = classifier.bind(tape);
                flat.extend([cls_ids.bn.gamma, cls_ids.bn.beta, cls_ids.dense, cls_ids.bias]);
                HeadIds::Attention {
                    ca: ca_ids,
                    classifier: cls_ids,
                }
            }
        };
        (
            ModelIds {
                backbone,
                head,
            },
            flat,
        )
    }

    /// Forward from raw input (images for the reference backbone, otherwise a
    /// precomputed feature map) to class probabilities.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        ids: &ModelIds,
        input: TensorId,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<HeadOutput> {
        let fmap = match (&mut self.backbone, ids.backbone.is_empty()) {
            (Some(b), false) => b.forward(tape, &ids.backbone, input, training)?,
            (None, true) => input,
            _ => {
                return Err(SydError::Config(
                    "backbone parameters and bindings out of sync".into(),
                ))
            }
        };
        let cfg = self.cfg.head.clone();
        match (&mut self.head, &ids.head) {
            (Head::Pba(params), HeadIds::Pba(pids)) => {
                let set = self.cfg.patch_set.as_ref().ok_or_else(|| {
                    SydError::Config("patch-based head requires a patch set".into())
                })?;
                let feats = extract_patch_features(tape, fmap, set)?;
                classify(tape, fmap, Some(feats), pids, params, &cfg, training, rng)
            }
            (Head::Gap(classifier), HeadIds::Gap(cids)) => {
                gap_baseline_head(tape, fmap, cids, classifier, &cfg, training, rng)
            }
            (Head::Attention { ca: _, classifier }, HeadIds::Attention { ca: ca_ids, classifier: cls_ids }) => {
                attention_baseline_head(tape, fmap, ca_ids, cls_ids, classifier, &cfg, training, rng)
            }
            _ => Err(SydError::Config("head parameters and bindings out of sync".into())),
        }
    }

    pub fn walk_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(b) = &mut self.backbone {
            b.walk_params("backbone", f);
        }
        match &mut self.head {
            Head::Pba(p) => p.walk_params("head", f),
            Head::Gap(c) => c.walk_params("head.classifier", f),
            Head::Attention { ca, classifier } => {
                ca.walk_params("head.ca", f);
                classifier.walk_params("head.classifier", f);
            }
        }
    }

    pub fn walk_buffers(&mut self, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        if let Some(b) = &mut self.backbone {
            b.walk_buffers("backbone", f);
        }
        match &mut self.head {
            Head::Pba(p) => p.walk_buffers("head", f),
            Head::Gap(c) => {
                f("head.classifier.bn.running_mean".into(), &mut c.bn.running.mean);
                f("head.classifier.bn.running_var".into(), &mut c.bn.running.var);
            }
            Head::Attention { classifier, .. } => {
                f("head.classifier.bn.running_mean".into(), &mut classifier.bn.running.mean);
                f("head.classifier.bn.running_var".into(), &mut classifier.bn.running.var);
            }
        }
    }

    /// Copy gradients off the tape into the parameter tensors.
    pub fn harvest_grads(&mut self, tape: &Tape<T>, flat: &[TensorId]) -> Result<()> {
        let mut i = 0;
        let mut missing: Option<String> = None;
        self.walk_params(&mut |name, t| {
            match tape.grad(flat[i]) {
                Some(g) => t.set_grad(g.to_vec()),
                None => {
                    if missing.is_none() {
                        missing = Some(name);
                    }
                }
            }
            i += 1;
        });
        match missing {
            Some(param) => Err(SydError::MissingGradient { param }),
            None => Ok(()),
        }
    }
}

/// Exact parameter count by walking stored tensors, grouped by prefix.
#[derive(Clone, Debug)]
pub struct ParamCount {
    pub total: usize,
    pub backbone: usize,
    pub head: usize,
    pub by_tensor: Vec<(String, usize)>,
}

pub fn count_parameters<T: Scalar>(model: &mut Model<T>) -> ParamCount {
    let mut by_tensor = Vec::new();
    let mut total = 0;
    let mut backbone = 0;
    let mut head = 0;
    model.walk_params(&mut |name, t| {
        let n = t.numel();
        total += n;
        if name.starts_with("backbone") {
            backbone += n;
        } else {
            head += n;
        }
        by_tensor.push((name, n));
    });
    ParamCount {
        total,
        backbone,
        head,
        by_tensor,
    }
}
