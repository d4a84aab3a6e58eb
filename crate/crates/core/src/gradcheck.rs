//! Finite-difference verification of every differentiable operation.
//!
//! Each check builds a scalar loss from a forward computation twice: once
//! through the tape (analytic gradients via `backward`) and once through
//! central finite differences on the recorded forward values only. The
//! two never share a gradient code path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::loss::multiscale_loss_tape;
use crate::modulation::{sfm_forward, sfm_init, SfmConfig};
use crate::net::{net_init, FusionMode, NetConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape4, Tensor4};

pub const FD_STEP: f64 = 1e-5;
pub const OPS_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare analytic gradients of `build` (a scalar function of the
/// inputs assembled on a tape) against central finite differences.
pub fn check_scalar_fn(
    name: &str,
    inputs: &[Tensor4],
    tolerance: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let eval = |xs: &[Tensor4]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid(format!("{name}: check output must be scalar")));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor4> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor4::zeros(tape.value(v).shape())))
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor4> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(grad.data()[i], numeric));
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_rel, tolerance })
}

fn rand_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.2..1.2)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// Reduce a tensor output to a scalar through a fixed random weighting,
/// so every output element influences the loss.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor4) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Gradient checks for every tensor-core operation on randomized small
/// tensors (1–4 channels, up to 8×8).
pub fn check_ops(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // dense conv, k in {1, 3}
    for &(c_in, c_out, k) in &[(1usize, 2usize, 1usize), (3, 2, 3), (4, 4, 3)] {
        let x = rand_tensor(Shape4::new(2, c_in, 6, 6), &mut rng);
        let w = rand_tensor(Shape4::new(c_out, c_in, k, k), &mut rng);
        let b = rand_tensor(Shape4::new(1, c_out, 1, 1), &mut rng);
        let wgt = rand_tensor(Shape4::new(2, c_out, 6, 6), &mut rng);
        reports.push(check_scalar_fn(
            &format!("conv2d_{c_in}to{c_out}_k{k}"),
            &[x, w, b],
            OPS_TOLERANCE,
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 1)?;
                weighted_sum(tape, y, &wgt)
            },
        )?);
    }

    // depthwise conv, k in {3, 5}
    for &k in &[3usize, 5] {
        let c = 3;
        let x = rand_tensor(Shape4::new(1, c, 8, 8), &mut rng);
        let w = rand_tensor(Shape4::new(c, 1, k, k), &mut rng);
        let b = rand_tensor(Shape4::new(1, c, 1, 1), &mut rng);
        let wgt = rand_tensor(Shape4::new(1, c, 8, 8), &mut rng);
        reports.push(check_scalar_fn(
            &format!("dwconv2d_k{k}"),
            &[x, w, b],
            OPS_TOLERANCE,
            move |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], c)?;
                weighted_sum(tape, y, &wgt)
            },
        )?);
    }

    // layer_norm
    {
        let x = rand_tensor(Shape4::new(2, 4, 4, 4), &mut rng);
        let gamma = rand_tensor(Shape4::new(1, 4, 1, 1), &mut rng);
        let beta = rand_tensor(Shape4::new(1, 4, 1, 1), &mut rng);
        let wgt = rand_tensor(Shape4::new(2, 4, 4, 4), &mut rng);
        reports.push(check_scalar_fn(
            "layer_norm",
            &[x, gamma, beta],
            OPS_TOLERANCE,
            |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2])?;
                weighted_sum(tape, y, &wgt)
            },
        )?);
    }

    // prelu; keep inputs away from the kink at 0
    {
        let mut x = rand_tensor(Shape4::new(1, 2, 5, 5), &mut rng);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let alpha = rand_tensor(Shape4::new(1, 2, 1, 1), &mut rng);
        let wgt = rand_tensor(Shape4::new(1, 2, 5, 5), &mut rng);
        reports.push(check_scalar_fn("prelu", &[x, alpha], OPS_TOLERANCE, |tape, vars| {
            let y = tape.prelu(vars[0], vars[1])?;
            weighted_sum(tape, y, &wgt)
        })?);
    }

    // concat + split round trip
    {
        let a = rand_tensor(Shape4::new(1, 2, 4, 4), &mut rng);
        let b = rand_tensor(Shape4::new(1, 3, 4, 4), &mut rng);
        let wgt_a = rand_tensor(Shape4::new(1, 2, 4, 4), &mut rng);
        let wgt_b = rand_tensor(Shape4::new(1, 3, 4, 4), &mut rng);
        reports.push(check_scalar_fn("concat_split", &[a, b], OPS_TOLERANCE, |tape, vars| {
            let cat = tape.concat(vars[0], vars[1])?;
            let (x, y) = tape.split(cat, 2)?;
            let sx = weighted_sum(tape, x, &wgt_a)?;
            let sy = weighted_sum(tape, y, &wgt_b)?;
            tape.add(sx, sy)
        })?);
    }

    // paired softmax (both halves)
    {
        let a = rand_tensor(Shape4::new(1, 3, 4, 4), &mut rng);
        let b = rand_tensor(Shape4::new(1, 3, 4, 4), &mut rng);
        let wgt_a = rand_tensor(Shape4::new(1, 3, 4, 4), &mut rng);
        let wgt_b = rand_tensor(Shape4::new(1, 3, 4, 4), &mut rng);
        reports.push(check_scalar_fn("paired_softmax", &[a, b], OPS_TOLERANCE, |tape, vars| {
            let (oa, ob) = tape.paired_softmax(vars[0], vars[1])?;
            let sa = weighted_sum(tape, oa, &wgt_a)?;
            let sb = weighted_sum(tape, ob, &wgt_b)?;
            tape.add(sa, sb)
        })?);
    }

    // elementwise mul/add/sub/scale
    {
        let a = rand_tensor(Shape4::new(2, 2, 3, 3), &mut rng);
        let b = rand_tensor(Shape4::new(2, 2, 3, 3), &mut rng);
        let wgt = rand_tensor(Shape4::new(2, 2, 3, 3), &mut rng);
        reports.push(check_scalar_fn("elementwise", &[a, b], OPS_TOLERANCE, |tape, vars| {
            let m = tape.mul(vars[0], vars[1])?;
            let s = tape.add(m, vars[0])?;
            let d = tape.sub(s, vars[1])?;
            let sc = tape.scale(d, 1.7)?;
            weighted_sum(tape, sc, &wgt)
        })?);
    }

    // resampling
    {
        let x = rand_tensor(Shape4::new(1, 2, 8, 8), &mut rng);
        let wgt_d = rand_tensor(Shape4::new(1, 2, 4, 4), &mut rng);
        reports.push(check_scalar_fn("downsample2x", &[x], OPS_TOLERANCE, |tape, vars| {
            let y = tape.downsample2x(vars[0])?;
            weighted_sum(tape, y, &wgt_d)
        })?);
        let x = rand_tensor(Shape4::new(1, 2, 4, 4), &mut rng);
        let wgt_u = rand_tensor(Shape4::new(1, 2, 8, 8), &mut rng);
        reports.push(check_scalar_fn("upsample_nearest2x", &[x], OPS_TOLERANCE, |tape, vars| {
            let y = tape.upsample_nearest2x(vars[0])?;
            weighted_sum(tape, y, &wgt_u)
        })?);
    }

    // rms loss term (away from the non-differentiable zero)
    {
        let x = rand_tensor(Shape4::new(1, 1, 4, 4), &mut rng);
        reports.push(check_scalar_fn("rms", &[x], OPS_TOLERANCE, |tape, vars| tape.rms(vars[0]))?);
    }

    Ok(reports)
}

/// Full-pipeline gradient checks through the modulation stages.
pub fn check_sfm(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let channels = 2;
    let cfg = SfmConfig { kernel_size: 3, ..SfmConfig::with_defaults(channels) };
    let sfm = sfm_init(&cfg, seed ^ 0x5f5f)?;
    let shape = Shape4::new(1, channels, 6, 6);
    let f_n = rand_tensor(shape, &mut rng);
    let f_r = rand_tensor(shape, &mut rng);
    let wgt = rand_tensor(shape, &mut rng);

    // single-stage weight pipelines
    for (i, label) in [(0usize, "gmm_forward"), (1, "lmm_forward")] {
        let stage = &sfm.stages[i];
        let wgt = wgt.clone();
        reports.push(check_scalar_fn(
            label,
            &[f_n.clone(), f_r.clone()],
            OPS_TOLERANCE,
            move |tape, vars| {
                let w = stage.forward_weights(tape, vars[0], vars[1])?;
                let a = weighted_sum(tape, w.w_nir, &wgt)?;
                let b = weighted_sum(tape, w.w_rgb, &wgt)?;
                tape.add(a, b)
            },
        )?);
    }

    // end-to-end fused output w.r.t. both feature inputs
    reports.push(check_scalar_fn(
        "sfm_forward",
        &[f_n.clone(), f_r.clone()],
        OPS_TOLERANCE,
        |tape, vars| {
            let fused = sfm_forward(tape, vars[0], vars[1], &sfm)?;
            weighted_sum(tape, fused, &wgt)
        },
    )?);

    // and w.r.t. the SFM parameters, through the param-grad path
    reports.push(check_params_grad("sfm_params", seed, |_| sfm.clone(), &f_n, &f_r)?);
    Ok(reports)
}

fn check_params_grad(
    name: &str,
    _seed: u64,
    make: impl Fn(u64) -> crate::modulation::SfmParams,
    f_n: &Tensor4,
    f_r: &Tensor4,
) -> Result<CheckReport> {
    let mut sfm = make(0);
    let eval = |sfm: &crate::modulation::SfmParams| -> f64 {
        let mut tape = Tape::new();
        let vn = tape.leaf(f_n.clone());
        let vr = tape.leaf(f_r.clone());
        let fused = sfm_forward(&mut tape, vn, vr, sfm).unwrap();
        let s = tape.sum_all(fused).unwrap();
        tape.value(s).data()[0]
    };

    let mut tape = Tape::new();
    let vn = tape.leaf(f_n.clone());
    let vr = tape.leaf(f_r.clone());
    let fused = sfm_forward(&mut tape, vn, vr, &sfm)?;
    let loss = tape.sum_all(fused)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let mut max_rel = 0.0f64;
    let param_ids: Vec<u64> = sfm.params().iter().map(|p| p.id()).collect();
    for (pi, pid) in param_ids.iter().enumerate() {
        let n = sfm.params()[pi].numel();
        for i in 0..n {
            let orig = sfm.params()[pi].value.data()[i];
            sfm.params_mut()[pi].value.data_mut()[i] = orig + FD_STEP;
            let fp = eval(&sfm);
            sfm.params_mut()[pi].value.data_mut()[i] = orig - FD_STEP;
            let fm = eval(&sfm);
            sfm.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let analytic = grads.get(pid).map(|g| g.data()[i]).unwrap_or(0.0);
            max_rel = max_rel.max(rel_err(analytic, numeric));
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_rel, tolerance: OPS_TOLERANCE })
}

/// End-to-end check on a tiny network: every parameter's analytic
/// gradient of the multi-scale loss vs finite differences.
pub fn check_net(seed: u64) -> Result<Vec<CheckReport>> {
    let cfg = NetConfig {
        scales: 2,
        base_channels: 4,
        blocks_per_scale: 1,
        fusion_mode: FusionMode::Sfm,
        sfm_kernel_size: 3,
        seed,
        ..NetConfig::default()
    };
    let mut net = net_init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let rgb = rand_tensor(Shape4::new(1, 3, 8, 8), &mut rng).map(|v| v.abs().min(1.0));
    let nir = rand_tensor(Shape4::new(1, 1, 8, 8), &mut rng).map(|v| v.abs().min(1.0));
    let target = rand_tensor(Shape4::new(1, 3, 8, 8), &mut rng).map(|v| v.abs().min(1.0));

    let eval = |net: &crate::net::DenoiserNet| -> f64 {
        let mut tape = Tape::new();
        let vr = tape.leaf(rgb.clone());
        let vn = tape.leaf(nir.clone());
        let outs = net.forward(&mut tape, vr, Some(vn)).unwrap();
        let loss =
            multiscale_loss_tape(&mut tape, &outs, std::slice::from_ref(&target)).unwrap();
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let vr = tape.leaf(rgb.clone());
    let vn = tape.leaf(nir.clone());
    let outs = net.forward(&mut tape, vr, Some(vn))?;
    let loss = multiscale_loss_tape(&mut tape, &outs, std::slice::from_ref(&target))?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let mut max_rel = 0.0f64;
    let n_params = net.params().len();
    for pi in 0..n_params {
        let pid = net.params()[pi].id();
        let n = net.params()[pi].numel();
        for i in 0..n {
            let orig = net.params()[pi].value.data()[i];
            net.params_mut()[pi].value.data_mut()[i] = orig + FD_STEP;
            let fp = eval(&net);
            net.params_mut()[pi].value.data_mut()[i] = orig - FD_STEP;
            let fm = eval(&net);
            net.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let analytic = grads.get(&pid).map(|g| g.data()[i]).unwrap_or(0.0);
            max_rel = max_rel.max(rel_err(analytic, numeric));
        }
    }
    Ok(vec![CheckReport {
        name: "net_end_to_end".to_string(),
        max_rel_err: max_rel,
        tolerance: NET_TOLERANCE,
    }])
}

/// Run the named scope and return its reports; `Err` only on
/// construction failure, a failing check is reported in-band.
pub fn run_scope(scope: &str, seed: u64) -> Result<Vec<CheckReport>> {
    match scope {
        "ops" => check_ops(seed),
        "sfm" => check_sfm(seed),
        "net" => check_net(seed),
        other => Err(Error::invalid(format!(
            "unknown gradcheck scope '{other}' (expected ops, sfm, or net)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_scope_passes() {
        for r in check_ops(1234).unwrap() {
            assert!(r.passed(), "{}: max rel err {} >= {}", r.name, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn sfm_scope_passes() {
        for r in check_sfm(99).unwrap() {
            assert!(r.passed(), "{}: max rel err {} >= {}", r.name, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn unknown_scope_rejected() {
        assert!(run_scope("bogus", 0).is_err());
    }
}
