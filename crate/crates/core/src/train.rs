//! Training loop and evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::NoiseSpec;
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::ParamSet;
use crate::loss::{multiscale_loss_tape, ssim};
use crate::net::DenoiserNet;
use crate::optim::{adam_step, apply_grads, clip_grad_norm, OptimState, Schedule};
use crate::tape::Tape;
use crate::tensor::{Shape4, Tensor4};

/// Fixed pool of aligned training samples, stacked along batch.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub noisy: Tensor4,
    pub clean: Tensor4,
    pub nir: Tensor4,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.noisy.shape().batch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let (n, c, nr) = (self.noisy.shape(), self.clean.shape(), self.nir.shape());
        if n != c || n.batch != nr.batch || n.height != nr.height || n.width != nr.width {
            return Err(Error::ShapeMismatch {
                op: "train_set",
                lhs: n.as_array().to_vec(),
                rhs: nr.as_array().to_vec(),
            });
        }
        Ok(())
    }

    fn gather(&self, indices: &[usize]) -> (Tensor4, Tensor4, Tensor4) {
        (
            gather_batch(&self.noisy, indices),
            gather_batch(&self.clean, indices),
            gather_batch(&self.nir, indices),
        )
    }
}

fn gather_batch(t: &Tensor4, indices: &[usize]) -> Tensor4 {
    let s = t.shape();
    let stride = s.channels * s.height * s.width;
    let mut out = Tensor4::zeros(Shape4::new(indices.len(), s.channels, s.height, s.width));
    for (i, &src) in indices.iter().enumerate() {
        out.data_mut()[i * stride..(i + 1) * stride]
            .copy_from_slice(&t.data()[src * stride..(src + 1) * stride]);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub clip_norm: f64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // desk-scale defaults; the full-protocol values (batch 32,
        // 120k steps) stay selectable through the config file
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            schedule: Schedule::Cosine { lr_start: 2e-3, lr_end: 1e-6, total_steps: 2000 },
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.lr, p.loss));
    }
    out
}

/// Per-scale ground-truth targets for one batch.
fn batch_targets(clean: &Tensor4, net: &DenoiserNet) -> Result<Vec<Tensor4>> {
    let mut targets = Vec::new();
    let mut current = clean.clone();
    for (i, &s) in net.config().supervised_scales().iter().enumerate() {
        debug_assert_eq!(i, s);
        if s > 0 {
            current = kernels::downsample2x(&current)?;
        }
        targets.push(current.clone());
    }
    Ok(targets)
}

/// One optimizer step on one batch; returns the loss value.
pub fn train_step(
    net: &mut DenoiserNet,
    state: &mut OptimState,
    noisy: &Tensor4,
    clean: &Tensor4,
    nir: Option<&Tensor4>,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let targets = batch_targets(clean, net)?;
    let mut tape = Tape::new();
    let vr = tape.leaf(noisy.clone());
    let vn = nir.map(|t| tape.leaf(t.clone()));
    let outs = net.forward(&mut tape, vr, vn)?;
    let loss = multiscale_loss_tape(&mut tape, &outs, &targets)?;
    let loss_val = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = tape.param_grads();
    net.zero_grads();
    apply_grads(&mut net.params_mut(), &grads)?;
    if clip_norm > 0.0 {
        clip_grad_norm(&mut net.params_mut(), clip_norm);
    }
    adam_step(&mut net.params_mut(), state, lr)?;
    Ok(loss_val)
}

/// Train over a fixed sample pool; deterministic for a fixed seed.
/// Checkpoints (with optimizer state) go to `out_dir` when configured.
pub fn train(
    net: &mut DenoiserNet,
    state: &mut OptimState,
    set: &TrainSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<LossPoint>> {
    set.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let uses_nir = net.config().fusion_mode != crate::net::FusionMode::Single;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let start_step = state.step;
    for local in 0..cfg.steps.saturating_sub(start_step) {
        let step = start_step + local;
        // batch order depends only on (seed, step), so a resumed run
        // draws the same batches as the original
        let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ step.wrapping_mul(0x9e3779b97f4a7c15));
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|_| batch_rng.gen_range(0..set.len())).collect();
        let _ = &mut rng;
        let (noisy, clean, nir) = set.gather(&indices);
        let lr = cfg.schedule.lr_at(step);
        let loss = train_step(
            net,
            state,
            &noisy,
            &clean,
            if uses_nir { Some(&nir) } else { None },
            lr,
            cfg.clip_norm,
        )?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} at step {step}; batch indices {indices:?}"
            )));
        }
        curve.push(LossPoint { step, lr, loss });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("step{:06}.ckpt", step + 1)), net, Some(state))?;
            }
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    /// None encodes infinite PSNR (exact match).
    pub psnr: Option<f64>,
    pub ssim: f64,
}

pub fn metric_table_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("image,psnr,ssim\n");
    for r in rows {
        let p = r.psnr.map_or("inf".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!("{},{},{:.6}\n", r.id, p, r.ssim));
    }
    if !rows.is_empty() {
        let finite: Vec<f64> = rows.iter().filter_map(|r| r.psnr).collect();
        let mean_psnr = if finite.len() == rows.len() {
            format!("{:.4}", finite.iter().sum::<f64>() / finite.len() as f64)
        } else {
            "inf".to_string()
        };
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
        out.push_str(&format!("mean,{},{:.6}\n", mean_psnr, mean_ssim));
    }
    out
}

/// Center-crop spatial dims to a multiple of `m`.
pub fn crop_to_multiple(t: &Tensor4, m: usize) -> Tensor4 {
    let s = t.shape();
    let (h, w) = (s.height / m * m, s.width / m * m);
    if h == s.height && w == s.width {
        return t.clone();
    }
    let (y0, x0) = ((s.height - h) / 2, (s.width - w) / 2);
    let mut out = Tensor4::zeros(Shape4::new(s.batch, s.channels, h, w));
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(b, c, y, x, t.at(b, c, y0 + y, x0 + x));
                }
            }
        }
    }
    out
}

/// Denoise each scene (noise synthesized from the clean image with the
/// given spec, seeded per scene) and report PSNR/SSIM of the restored
/// output against the clean image.
pub fn evaluate(
    net: &DenoiserNet,
    scenes: &[(String, Tensor4, Tensor4)],
    spec: &NoiseSpec,
) -> Result<Vec<EvalRow>> {
    let m = net.config().spatial_multiple();
    let uses_nir = net.config().fusion_mode != crate::net::FusionMode::Single;
    let mut rows = Vec::with_capacity(scenes.len());
    for (i, (id, clean, nir)) in scenes.iter().enumerate() {
        let clean = crop_to_multiple(clean, m);
        let nir_c = crop_to_multiple(nir, m);
        let scene_spec = NoiseSpec { seed: spec.seed.wrapping_add(i as u64), ..*spec };
        let noisy = crate::data::synth_noise(&clean, &scene_spec)?;
        let outs = net.infer(&noisy, if uses_nir { Some(&nir_c) } else { None })?;
        let restored = outs[0].map(|v| v.clamp(0.0, 1.0));
        rows.push(EvalRow {
            id: id.clone(),
            psnr: crate::loss::psnr(&restored, &clean, 1.0)?,
            ssim: ssim(&restored, &clean)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{net_init, FusionMode, NetConfig};

    fn tiny_cfg(mode: FusionMode, seed: u64) -> NetConfig {
        NetConfig {
            scales: 2,
            base_channels: 4,
            blocks_per_scale: 1,
            fusion_mode: mode,
            sfm_kernel_size: 3,
            seed,
            ..NetConfig::default()
        }
    }

    fn toy_set(n: usize, size: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape4::new(n, 3, size, size);
        let clean = Tensor4::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.gen_range(0.2..0.8)).collect(),
        )
        .unwrap();
        let noisy = clean.map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
        let nshape = Shape4::new(n, 1, size, size);
        let nir = Tensor4::from_vec(
            nshape,
            (0..nshape.numel()).map(|_| rng.gen_range(0.2..0.8)).collect(),
        )
        .unwrap();
        TrainSet { noisy, clean, nir }
    }

    fn short_train_cfg(steps: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            schedule: Schedule::Cosine { lr_start: 1e-3, lr_end: 1e-5, total_steps: steps },
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_tiny_overfit() {
        let mut net = net_init(&tiny_cfg(FusionMode::Sfm, 1)).unwrap();
        let mut state = OptimState::new(&net.params());
        let set = toy_set(4, 8, 2);
        let curve = train(&mut net, &mut state, &set, &short_train_cfg(60, 3), None).unwrap();
        let first: f64 = curve[..10].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        let last: f64 = curve[curve.len() - 10..].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        assert!(last < first, "first {first}, last {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut net = net_init(&tiny_cfg(FusionMode::Sum, 4)).unwrap();
            let mut state = OptimState::new(&net.params());
            let set = toy_set(4, 8, 5);
            train(&mut net, &mut state, &set, &short_train_cfg(20, 6), None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    #[test]
    fn resume_matches_unresumed_run() {
        let set = toy_set(4, 8, 7);
        let cfg = short_train_cfg(30, 8);

        let mut full_net = net_init(&tiny_cfg(FusionMode::Sum, 9)).unwrap();
        let mut full_state = OptimState::new(&full_net.params());
        let full = train(&mut full_net, &mut full_state, &set, &cfg, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut net = net_init(&tiny_cfg(FusionMode::Sum, 9)).unwrap();
        let mut state = OptimState::new(&net.params());
        let half_cfg = TrainConfig { steps: 20, ..cfg.clone() };
        train(&mut net, &mut state, &set, &half_cfg, None).unwrap();
        let path = dir.path().join("mid.ckpt");
        crate::checkpoint::save_checkpoint(&path, &net, Some(&state)).unwrap();

        let (mut resumed, rstate) = crate::checkpoint::load_checkpoint(&path).unwrap();
        let mut rstate = rstate.unwrap();
        let tail = train(&mut resumed, &mut rstate, &set, &cfg, None).unwrap();
        assert_eq!(tail.len(), 10);
        for (a, b) in full[20..].iter().zip(&tail) {
            assert_eq!(a.step, b.step);
            assert!((a.loss - b.loss).abs() < 1e-6, "step {}: {} vs {}", a.step, a.loss, b.loss);
        }
    }

    #[test]
    fn empty_set_rejected() {
        let mut net = net_init(&tiny_cfg(FusionMode::Single, 1)).unwrap();
        let mut state = OptimState::new(&net.params());
        let set = toy_set(1, 8, 0);
        let empty = TrainSet {
            noisy: Tensor4::zeros(Shape4::new(0, 3, 8, 8)),
            clean: Tensor4::zeros(Shape4::new(0, 3, 8, 8)),
            nir: Tensor4::zeros(Shape4::new(0, 1, 8, 8)),
        };
        assert!(train(&mut net, &mut state, &empty, &short_train_cfg(1, 0), None).is_err());
        let _ = set;
    }

    #[test]
    fn evaluate_identity_model_reports_noisy_psnr() {
        let mut net = net_init(&tiny_cfg(FusionMode::Sum, 2)).unwrap();
        for p in net.params_mut() {
            if p.name.starts_with("net.head") {
                p.value.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape4::new(1, 3, 16, 16);
        let clean = Tensor4::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.gen_range(0.3..0.7)).collect(),
        )
        .unwrap();
        let nir = Tensor4::full(Shape4::new(1, 1, 16, 16), 0.5);
        let spec = NoiseSpec::new(8.0, 1.0, 11).unwrap();
        let rows = evaluate(&net, &[("a".into(), clean.clone(), nir)], &spec).unwrap();
        assert_eq!(rows.len(), 1);
        // zero residual heads pass the noisy input through
        let scene_spec = NoiseSpec { seed: spec.seed, ..spec };
        let noisy = crate::data::synth_noise(&clean, &scene_spec).unwrap();
        let expected = crate::loss::psnr(&noisy, &clean, 1.0).unwrap().unwrap();
        assert!((rows[0].psnr.unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn evaluate_gt_against_itself() {
        // a net that outputs the clean input: zero heads, zero noise
        let mut net = net_init(&tiny_cfg(FusionMode::Sum, 2)).unwrap();
        for p in net.params_mut() {
            if p.name.starts_with("net.head") {
                p.value.fill(0.0);
            }
        }
        let clean = Tensor4::full(Shape4::new(1, 3, 16, 16), 0.4);
        let nir = Tensor4::full(Shape4::new(1, 1, 16, 16), 0.5);
        let spec = NoiseSpec::new(0.0, 1.0, 0).unwrap();
        let rows = evaluate(&net, &[("gt".into(), clean, nir)], &spec).unwrap();
        assert!(rows[0].psnr.is_none()); // infinite sentinel
        assert!((rows[0].ssim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn metric_table_has_row_per_scene_plus_mean() {
        let rows = vec![
            EvalRow { id: "a".into(), psnr: Some(30.0), ssim: 0.9 },
            EvalRow { id: "b".into(), psnr: Some(32.0), ssim: 0.95 },
        ];
        let csv = metric_table_csv(&rows);
        assert_eq!(csv.lines().count(), 4); // header + 2 rows + mean
        assert!(csv.lines().last().unwrap().starts_with("mean,31.0000"));
    }

    #[test]
    fn crop_to_multiple_centers() {
        let t = Tensor4::from_vec(
            Shape4::new(1, 1, 5, 6),
            (0..30).map(|v| v as f64).collect(),
        )
        .unwrap();
        let c = crop_to_multiple(&t, 4);
        assert_eq!(c.shape(), Shape4::new(1, 1, 4, 4));
        assert_eq!(c.at(0, 0, 0, 0), t.at(0, 0, 0, 1));
    }
}
