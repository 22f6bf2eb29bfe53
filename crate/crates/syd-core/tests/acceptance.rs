//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured values. Criterion 7 trains real models and takes minutes;
//! everything else is seconds.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use syd_core::attention::{
    classify, head_grad_check, HeadConfig, PbaParams, SaActivation,
};
use syd_core::augment::{augment_train, sample_erase_rects, AugmentConfig, EraseFill};
use syd_core::data::{generate_synthetic, ImageStore, Split, SynthSpec};
use syd_core::patches::{
    build_patch_set, pool_patch, upsample_feature_map, PatchSet, PatchSetName,
};
use syd_core::tensor::tape::{BnRunning, Tape};
use syd_core::tensor::Tensor;
use syd_core::trainer::{
    self, build_model_config, load_checkpoint, train, Baseline, Mode, Model, TrainConfig,
    TrainData,
};

// ── 1. gradient correctness ─────────────────────────────────────────────

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let check = head_grad_check(1e-3, 20260809).expect("grad check harness");
    let elapsed = started.elapsed();
    assert!(
        check.passed(),
        "worst parameter {} rel err {}",
        check.worst().name,
        check.worst().err.max
    );
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "acceptance 1 (gradient correctness): PASS — max rel err {:.3e} over {} parameter tensors in {:.2?}",
        check.max,
        check.rows.len(),
        elapsed
    );
}

// ── 2. equation-oracle equivalence ──────────────────────────────────────

/// Loop-based transcription of the head equations on plain f64 buffers.
/// Everything is written as direct sums over indices, independent of the
/// tape engine.
mod oracle {
    pub struct HeadParams<'a> {
        pub w_psi: &'a [f64],       // [c][ca]
        pub w_psi_prime: &'a [f64], // [c][ca]
        pub b_psi: &'a [f64],       // [ca]
        pub w_theta: &'a [f64],     // [ca]
        pub b_theta: f64,
        pub w_delta: f64,
        pub b_delta: f64,
        pub w_phi: &'a [f64], // [c]
        pub b_phi: f64,
        pub mlp_dense: &'a [f64], // [2*n*h*w][c]
        pub mlp_bias: &'a [f64],  // [c]
        pub mlp_bn: BnEval<'a>,
        pub head_dense: &'a [f64], // [c][l]
        pub head_bias: &'a [f64],  // [l]
        pub head_bn: BnEval<'a>,
    }

    pub struct BnEval<'a> {
        pub gamma: &'a [f64],
        pub beta: &'a [f64],
        pub mean: &'a [f64],
        pub var: &'a [f64],
        pub eps: f64,
    }

    impl BnEval<'_> {
        fn apply(&self, x: &[f64]) -> Vec<f64> {
            x.iter()
                .enumerate()
                .map(|(j, &v)| {
                    self.gamma[j] * (v - self.mean[j]) / (self.var[j] + self.eps).sqrt()
                        + self.beta[j]
                })
                .collect()
        }
    }

    fn softmax(xs: &[f64]) -> Vec<f64> {
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / sum).collect()
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// feats: [n][h][w][c] flattened; fmap: [h][w][c]. Returns class
    /// probabilities (eval mode, dropout off).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        feats: &[f64],
        fmap: &[f64],
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        ca: usize,
        l: usize,
        p: &HeadParams,
    ) -> Vec<f64> {
        let hw = h * w;
        let at = |i: usize, pos: usize, ch: usize| feats[(i * hw + pos) * c + ch];

        // pairwise logits: psi = tanh(Wpsi Fi + Wpsi' Fj + b), gated by
        // sigmoid(Wtheta psi + b), spatially averaged
        let mut pair = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for pos in 0..hw {
                    let mut gate_in = p.b_theta;
                    for a in 0..ca {
                        let mut pre = p.b_psi[a];
                        for ch in 0..c {
                            pre += p.w_psi[ch * ca + a] * at(i, pos, ch)
                                + p.w_psi_prime[ch * ca + a] * at(j, pos, ch);
                        }
                        gate_in += p.w_theta[a] * pre.tanh();
                    }
                    acc += sigmoid(gate_in);
                }
                pair[i * n + j] = acc / hw as f64;
            }
        }

        // delta rows: softmax over j of w_delta * t + b_delta
        let mut f_tilde = vec![0.0; n * c];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| p.w_delta * pair[i * n + j] + p.b_delta)
                .collect();
            let delta = softmax(&scores);
            // F_hat_i = sum_j delta_j F_j, then spatial GAP
            for ch in 0..c {
                let mut mean = 0.0;
                for pos in 0..hw {
                    let mut v = 0.0;
                    for j in 0..n {
                        v += delta[j] * at(j, pos, ch);
                    }
                    mean += v;
                }
                f_tilde[i * c + ch] = mean / hw as f64;
            }
        }

        // phi = softmax over i of w_phi . f_tilde_i + b_phi; F_CA = weighted sum
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = p.b_phi;
                for ch in 0..c {
                    s += p.w_phi[ch] * f_tilde[i * c + ch];
                }
                s
            })
            .collect();
        let phi = softmax(&scores);
        let mut f_ca = vec![0.0; c];
        for ch in 0..c {
            for i in 0..n {
                f_ca[ch] += phi[i] * f_tilde[i * c + ch];
            }
        }

        // spatial attention: per patch channel GAP/GMP planes, flattened
        // patch-major then row, col, {gap,gmp}; dense -> softmax -> BN
        let mut flat = vec![0.0; 2 * n * hw];
        for i in 0..n {
            for pos in 0..hw {
                let mut mean = 0.0;
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    let v = at(i, pos, ch);
                    mean += v;
                    max = max.max(v);
                }
                flat[(i * hw + pos) * 2] = mean / c as f64;
                flat[(i * hw + pos) * 2 + 1] = max;
            }
        }
        let mut z = p.mlp_bias.to_vec();
        for (row, &v) in flat.iter().enumerate() {
            for ch in 0..c {
                z[ch] += v * p.mlp_dense[row * c + ch];
            }
        }
        let mask = softmax(&z);
        let f_sa = p.mlp_bn.apply(&mask);

        // fusion and classification
        let mut f_f = vec![0.0; c];
        for ch in 0..c {
            let f_pba = f_ca[ch] * f_sa[ch] + f_ca[ch];
            let mut gap_f = 0.0;
            for pos in 0..hw {
                gap_f += fmap[pos * c + ch];
            }
            f_f[ch] = f_pba + gap_f / hw as f64;
        }
        let reg = p.head_bn.apply(&f_f);
        let mut logits = p.head_bias.to_vec();
        for ch in 0..c {
            for cls in 0..l {
                logits[cls] += reg[ch] * p.head_dense[ch * l + cls];
            }
        }
        softmax(&logits)
    }
}

#[test]
fn criterion_2_equation_oracle_equivalence() {
    let started = Instant::now();
    let (h, w, c, ca, l) = (2usize, 2usize, 4usize, 4usize, 3usize);
    let mut worst: f64 = 0.0;

    for instance in 0..20u64 {
        let n = if instance % 2 == 0 { 1 } else { 3 };
        let mut cfg = HeadConfig::new(c, n, h, w, l);
        cfg.attn_hidden = ca;
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + instance);
        let mut params: PbaParams<f64> = PbaParams::init(&cfg, &mut rng);

        // randomize BN statistics so the eval path is non-trivial
        params.walk_buffers("head", &mut |name, buf| {
            for v in buf.iter_mut() {
                *v = if name.ends_with("var") {
                    rng.random_range(0.4..1.6)
                } else {
                    rng.random_range(-0.4..0.4)
                };
            }
        });

        let feats: Vec<f64> = (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fmap: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();

        // engine route
        let mut tape: Tape<f64> = Tape::new();
        let ids = params.bind(&mut tape);
        let fmap_id = tape.constant(vec![1, h, w, c], fmap.clone()).unwrap();
        let feats_id = tape.constant(vec![1, n, h, w, c], feats.clone()).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let out = classify(&mut tape, fmap_id, Some(feats_id), &ids, &mut params, &cfg, false, &mut drng)
            .unwrap();
        let engine = tape.data(out.y_pred).to_vec();

        // independent loop transcription
        let sa = params.sa.as_ref().unwrap();
        let ca_p = params.ca.as_ref().unwrap();
        let oracle_probs = oracle::forward(
            &feats,
            &fmap,
            n,
            h,
            w,
            c,
            ca,
            l,
            &oracle::HeadParams {
                w_psi: ca_p.w_psi.data(),
                w_psi_prime: ca_p.w_psi_prime.data(),
                b_psi: ca_p.b_psi.data(),
                w_theta: ca_p.w_theta.data(),
                b_theta: ca_p.b_theta.data()[0],
                w_delta: ca_p.w_delta.data()[0],
                b_delta: ca_p.b_delta.data()[0],
                w_phi: ca_p.w_phi.data(),
                b_phi: ca_p.b_phi.data()[0],
                mlp_dense: sa.dense.data(),
                mlp_bias: sa.bias.data(),
                mlp_bn: oracle::BnEval {
                    gamma: sa.bn.gamma.data(),
                    beta: sa.bn.beta.data(),
                    mean: &sa.bn.running.mean,
                    var: &sa.bn.running.var,
                    eps: sa.bn.running.eps,
                },
                head_dense: params.classifier.dense.data(),
                head_bias: params.classifier.bias.data(),
                head_bn: oracle::BnEval {
                    gamma: params.classifier.bn.gamma.data(),
                    beta: params.classifier.bn.beta.data(),
                    mean: &params.classifier.bn.running.mean,
                    var: &params.classifier.bn.running.var,
                    eps: params.classifier.bn.running.eps,
                },
            },
        );

        for (a, b) in engine.iter().zip(&oracle_probs) {
            worst = worst.max((a - b).abs());
        }
        assert_eq!(engine.len(), oracle_probs.len());
    }
    let elapsed = started.elapsed();
    assert!(worst < 1e-10, "max |engine - oracle| = {worst}");
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!(
        "acceptance 2 (equation-oracle equivalence): PASS — max deviation {worst:.3e} over 20 instances in {elapsed:.2?}"
    );
}

// ── 3. patch geometry ───────────────────────────────────────────────────

#[test]
fn criterion_3_patch_geometry() {
    let started = Instant::now();
    let expected = [
        (PatchSetName::P9, 9),
        (PatchSetName::P12, 12),
        (PatchSetName::P16, 16),
        (PatchSetName::P20, 20),
        (PatchSetName::P25, 25),
        (PatchSetName::P30, 30),
    ];
    for (name, count) in expected {
        let set = build_patch_set(name).unwrap();
        assert_eq!(set.n(), count, "{name}");

        // uniform tiling covers every cell exactly once
        let grid = set.grid_size;
        let mut coverage = vec![0u32; grid * grid];
        for p in &set.uniform {
            for y in p.y..p.y + p.dh {
                for x in p.x..p.x + p.dw {
                    coverage[y * grid + x] += 1;
                }
            }
        }
        assert!(coverage.iter().all(|&v| v == 1), "{name}: tiling not exact");

        // hierarchy strictly nested, ending at the full grid
        for pair in set.hierarchical.windows(2) {
            assert!(pair[1].contains(&pair[0]), "{name}: not nested");
            assert!(pair[1].dw > pair[0].dw, "{name}: not strictly growing");
        }
        if let Some(largest) = set.hierarchical.last() {
            assert_eq!((largest.x, largest.y, largest.dw, largest.dh), (0, 0, grid, grid));
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 1);
    println!("acceptance 3 (patch geometry): PASS — all six sets tile and nest exactly in {elapsed:.2?}");
}

// ── 4. bilinear oracle ──────────────────────────────────────────────────

fn bilinear_reference(
    src: &[f64],
    src_w: usize,
    c: usize,
    crop: (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (cy, cx, ch, cw) = crop;
    let mut out = vec![0.0; out_h * out_w * c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let sy = ((oy as f64 + 0.5) * ch as f64 / out_h as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
            let sx = ((ox as f64 + 0.5) * cw as f64 / out_w as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(ch - 1), (x0 + 1).min(cw - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ci in 0..c {
                let at = |yy: usize, xx: usize| src[((cy + yy) * src_w + cx + xx) * c + ci];
                out[(oy * out_w + ox) * c + ci] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    out
}

#[test]
fn criterion_4_bilinear_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;

    for &(grid, set_name) in &[(48usize, PatchSetName::P20), (45usize, PatchSetName::P30)] {
        let (h, w, c) = (7usize, 7usize, 3usize);
        let src: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let fmap = tape.constant(vec![1, h, w, c], src.clone()).unwrap();
        let up = upsample_feature_map(&mut tape, fmap, grid).unwrap();
        let reference = bilinear_reference(&src, w, c, (0, 0, h, w), grid, grid);
        for (a, b) in tape.data(up).iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }

        // pool every patch of the published set from the upsampled grid
        let set = build_patch_set(set_name).unwrap();
        let up_data = tape.data(up).to_vec();
        for patch in set.all() {
            let pooled = pool_patch(&mut tape, up, patch, h, w).unwrap();
            let reference = bilinear_reference(
                &up_data,
                grid,
                c,
                (patch.y, patch.x, patch.dh, patch.dw),
                h,
                w,
            );
            for (a, b) in tape.data(pooled).iter().zip(&reference) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    // random crops on random geometry
    for trial in 0..20u64 {
        let mut trng = ChaCha8Rng::seed_from_u64(500 + trial);
        let h = trng.random_range(2..9);
        let w = trng.random_range(2..9);
        let c = trng.random_range(1..4);
        let src: Vec<f64> = (0..h * w * c).map(|_| trng.random_range(-1.0..1.0)).collect();
        let cy = trng.random_range(0..h);
        let cx = trng.random_range(0..w);
        let ch = trng.random_range(1..=h - cy);
        let cw = trng.random_range(1..=w - cx);
        let (oh, ow) = (trng.random_range(1..8), trng.random_range(1..8));

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1, h, w, c], src.clone()).unwrap();
        let out = tape
            .bilinear_resize(
                x,
                syd_core::tensor::tape::CropRect { y: cy, x: cx, h: ch, w: cw },
                oh,
                ow,
            )
            .unwrap();
        let reference = bilinear_reference(&src, w, c, (cy, cx, ch, cw), oh, ow);
        for (a, b) in tape.data(out).iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }

    let elapsed = started.elapsed();
    assert!(worst < 1e-6, "max deviation {worst}");
    assert!(elapsed.as_secs() < 5);
    println!(
        "acceptance 4 (bilinear oracle): PASS — 7->48 and 7->45 upsampling plus patch pooling within {worst:.3e} in {elapsed:.2?}"
    );
}

// ── 5. erasing statistics ───────────────────────────────────────────────

#[test]
fn criterion_5_erasing_statistics() {
    let started = Instant::now();
    let img = 224usize;
    let area = (img * img) as f64;
    let two_region = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let rects = sample_erase_rects(&two_region, &mut rng, img).unwrap();
        assert_eq!(rects.len(), 2);
        let total: usize = rects.iter().map(|r| r.area()).sum();
        let frac = total as f64 / area;
        assert!((0.1..=0.8).contains(&frac), "fraction {frac}");
        assert!(!rects[0].overlaps(&rects[1]));
        for r in &rects {
            assert!(r.x + r.w <= img && r.y + r.h <= img);
        }
    }

    let single = AugmentConfig {
        erase_regions: 1,
        ..AugmentConfig::default()
    };
    for _ in 0..10_000 {
        let rects = sample_erase_rects(&single, &mut rng, img).unwrap();
        let frac = rects[0].area() as f64 / area;
        assert!((0.1..=0.8).contains(&frac), "fraction {frac}");
    }

    // fixed-fill pixels are exactly 127
    let fill_cfg = AugmentConfig {
        rotation_deg: 0.0,
        scale_jitter: 0.0,
        source_size: 224,
        crop_size: 224,
        erase_regions: 2,
        erase_fill: EraseFill::Fixed127,
        ..AugmentConfig::default()
    };
    let src: Vec<u8> = (0..224 * 224 * 3).map(|i| (i % 251) as u8).collect();
    let expected = 127.0f32 / 255.0;
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let (out, record) = augment_train(&src, &fill_cfg, &mut rng).unwrap();
        assert_eq!(record.rects.len(), 2);
        for r in &record.rects {
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    for chan in 0..3 {
                        assert_eq!(out[(y * 224 + x) * 3 + chan].to_bits(), expected.to_bits());
                    }
                }
            }
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30);
    println!(
        "acceptance 5 (erasing statistics): PASS — 10^4 two-region and 10^4 single-region draws in bounds, fixed fill exact, in {elapsed:.2?}"
    );
}

// ── 6. schedule fidelity ────────────────────────────────────────────────

#[test]
fn criterion_6_schedule_fidelity() {
    let mut sgd = syd_core::tensor::sgd::SgdState::new(0.007, 50, 0.1);
    let mut observed = Vec::new();
    for epoch in [0usize, 50, 100] {
        sgd.epoch = epoch;
        observed.push(sgd.effective_lr());
    }
    assert_eq!(observed, [0.007, 0.0007, 7e-5]);
    println!(
        "acceptance 6 (schedule fidelity): PASS — effective lr at epochs 0/50/100 = {observed:?} exactly"
    );
}

// ── 7. desk-scale ordering ──────────────────────────────────────────────

fn criterion_7_config(data_dir: &std::path::Path) -> (TrainConfig, TrainData) {
    let (manifest, _) = syd_core::data::scan_dataset(data_dir).unwrap();
    let mut aug = AugmentConfig {
        source_size: 64,
        crop_size: 64,
        ..AugmentConfig::default()
    };
    aug.erase_regions = 2;
    aug.erase_fill = EraseFill::RandomRgb;
    let cfg = TrainConfig {
        patch_set: PatchSetName::P20,
        epochs: 30,
        batch_size: 8,
        // the published 200-epoch schedule decays every 50 epochs; the same
        // thirds-of-the-run cadence at desk scale is a decay every 10-20
        lr_step: 20,
        mode: Mode::Scratch,
        baseline: Baseline::None,
        backbone_channels: 128,
        checkpoint_every: 0,
        aug,
        ..TrainConfig::default()
    };
    let data = TrainData::Images(ImageStore::new(manifest, 64));
    (cfg, data)
}

#[test]
fn criterion_7_desk_scale_ordering() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 4,
        samples_per_class: 100,
        image_size: 64,
        seed: 11,
    };
    generate_synthetic(&spec, dir.path()).unwrap();

    let seeds = [0u64, 1, 2];
    let mut means = [0.0f64; 3]; // gap, attention, pba
    let labels = ["gap", "attention", "pba(P20)"];
    for (slot, variant) in labels.iter().enumerate() {
        let mut sum = 0.0;
        for &seed in &seeds {
            let (mut cfg, data) = criterion_7_config(dir.path());
            cfg.seed = seed;
            match slot {
                0 => cfg.baseline = Baseline::Gap,
                1 => cfg.baseline = Baseline::Attention,
                _ => cfg.baseline = Baseline::None,
            }
            let run_start = Instant::now();
            let outcome = train(&cfg, &data, None).unwrap();
            let run_time = run_start.elapsed();
            assert!(
                run_time.as_secs() < 900,
                "{variant} seed {seed} took {run_time:?}"
            );
            println!(
                "  criterion 7 run: {variant} seed {seed} -> top1 {:.2}% in {:.1?}",
                outcome.final_test.top1, run_time
            );
            sum += outcome.final_test.top1;
        }
        means[slot] = sum / seeds.len() as f64;
    }

    let (gap, attention, pba) = (means[0], means[1], means[2]);
    assert!(
        pba >= gap + 2.0,
        "mean top1: pba {pba:.2} vs gap {gap:.2} (needs +2)"
    );
    assert!(
        pba >= attention,
        "mean top1: pba {pba:.2} vs attention baseline {attention:.2}"
    );
    println!(
        "acceptance 7 (desk-scale ordering): PASS — mean top1 pba(P20) {pba:.2}% >= gap {gap:.2}% + 2 and >= attention {attention:.2}%, total {:.1?}",
        started.elapsed()
    );
}

// ── 8. determinism ──────────────────────────────────────────────────────

#[test]
fn criterion_8_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 3,
        samples_per_class: 8,
        image_size: 32,
        seed: 88,
    };
    generate_synthetic(&spec, dir.path()).unwrap();

    let make = || {
        let (manifest, _) = syd_core::data::scan_dataset(dir.path()).unwrap();
        let aug = AugmentConfig {
            source_size: 32,
            crop_size: 32,
            ..AugmentConfig::default()
        };
        let cfg = TrainConfig {
            patch_set: PatchSetName::P9,
            epochs: 3,
            batch_size: 4,
            backbone_channels: 16,
            attn_hidden: Some(8),
            seed: 5,
            checkpoint_every: 1,
            aug,
            ..TrainConfig::default()
        };
        let data = TrainData::Images(ImageStore::new(manifest, 32));
        (cfg, data)
    };

    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    let (cfg, data) = make();
    train(&cfg, &data, Some(run_a.path())).unwrap();
    let (cfg2, data2) = make();
    train(&cfg2, &data2, Some(run_b.path())).unwrap();

    let csv_a = std::fs::read(run_a.path().join("metrics.csv")).unwrap();
    let csv_b = std::fs::read(run_b.path().join("metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "metrics CSVs differ between identical runs");

    // checkpoint reload reproduces eval probabilities bitwise
    let (cfg3, data3) = make();
    let model_cfg = build_model_config(&cfg3, &data3).unwrap();
    let mut fresh: Model<f32> = Model::init(model_cfg.clone(), 999);
    load_checkpoint(&run_a.path().join("checkpoints/final.sydw"), &mut fresh).unwrap();
    let mut fresh2: Model<f32> = Model::init(model_cfg, 123);
    load_checkpoint(&run_b.path().join("checkpoints/final.sydw"), &mut fresh2).unwrap();

    let eval_bits = |model: &mut Model<f32>, data: &TrainData, cfg: &TrainConfig| -> Vec<u32> {
        let result = trainer::evaluate_model(model, cfg, data, Split::Test, 0, 0.0).unwrap();
        let _ = result;
        // probabilities via a direct forward on the first test batch
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let TrainData::Images(store) = data else { unreachable!() };
        let batch = syd_core::data::BatchIterator::new(store, Split::Test, 4, None)
            .unwrap()
            .next()
            .unwrap();
        let crop = cfg.aug.crop_size;
        let mut buf: Vec<f32> = Vec::new();
        for img in &batch.images {
            buf.extend(syd_core::augment::augment_eval(img, &cfg.aug).unwrap());
        }
        let input = Tensor::new(vec![batch.images.len(), crop, crop, 3], buf).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let (ids, _) = model.bind(&mut tape);
        let input_id = tape
            .constant(input.shape().to_vec(), input.data().to_vec())
            .unwrap();
        let out = model.forward(&mut tape, &ids, input_id, false, &mut rng).unwrap();
        tape.data(out.y_pred).iter().map(|v| v.to_bits()).collect()
    };
    let bits_a = eval_bits(&mut fresh, &data3, &cfg3);
    let bits_b = eval_bits(&mut fresh2, &data3, &cfg3);
    assert_eq!(bits_a, bits_b, "reloaded checkpoints disagree bitwise");

    println!(
        "acceptance 8 (determinism): PASS — identical metrics CSVs and bitwise-equal reloaded eval probabilities in {:.2?}",
        started.elapsed()
    );
}

// ── 9. Gaussian dropout ─────────────────────────────────────────────────

#[test]
fn criterion_9_gaussian_dropout() {
    let started = Instant::now();
    // sigma(0.2) = sqrt(0.2 / 0.8) = 0.5
    let sigma = (0.2f64 / (1.0 - 0.2)).sqrt();
    assert_eq!(sigma, 0.5);

    // empirical noise std within 2% over 1e6 draws
    let n = 1_000_000usize;
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(vec![n], vec![1.0; n]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = tape.gaussian_dropout(x, 0.2, true, &mut rng).unwrap();
    let vals = tape.data(y);
    let mean: f64 = vals.iter().sum::<f64>() / n as f64;
    let var: f64 = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    assert!(
        (std - 0.5).abs() / 0.5 < 0.02,
        "empirical noise std {std} deviates more than 2% from 0.5"
    );

    // eval mode is the identity, bitwise
    let data: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
    let x = tape.constant(vec![1000], data.clone()).unwrap();
    let y = tape.gaussian_dropout(x, 0.7, false, &mut rng).unwrap();
    assert_eq!(
        tape.data(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    println!(
        "acceptance 9 (gaussian dropout): PASS — sigma(0.2) = 0.5 exactly, empirical std {std:.4}, eval identity bitwise, in {:.2?}",
        started.elapsed()
    );
}

// ── patch-set diagnostics used by the suite ─────────────────────────────

#[test]
fn patch_sets_describe_cleanly() {
    for name in [PatchSetName::P9, PatchSetName::P30] {
        let set: PatchSet = build_patch_set(name).unwrap();
        let text = set.describe();
        assert_eq!(text.lines().count(), 1 + set.n());
    }
}
