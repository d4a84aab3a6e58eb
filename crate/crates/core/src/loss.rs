//! Multi-scale training loss and image quality metrics.
//!
//! The loss sums per-scale RMS residuals between each supervised output
//! and the matching 2×-downsampled ground truth. RMS (the ℓ2 norm
//! divided by sqrt of the element count) keeps level contributions
//! resolution-independent.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// Tensors at strictly halving resolutions, finest first.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    levels: Vec<Tensor4>,
}

impl ScalePyramid {
    pub fn new(levels: Vec<Tensor4>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("pyramid must have at least one level"));
        }
        for w in levels.windows(2) {
            let (a, b) = (w[0].shape(), w[1].shape());
            if b.height * 2 != a.height || b.width * 2 != a.width || a.batch != b.batch
                || a.channels != b.channels
            {
                return Err(Error::ShapeMismatch {
                    op: "scale_pyramid",
                    lhs: a.as_array().to_vec(),
                    rhs: b.as_array().to_vec(),
                });
            }
        }
        Ok(ScalePyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor4] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Ground-truth pyramid: level 1 is the image itself, each further level
/// 2×2 average-pooled from the previous.
pub fn gt_pyramid(gt: &Tensor4, levels: usize) -> Result<ScalePyramid> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let s = gt.shape();
    let m = 1usize << (levels - 1);
    if s.height % m != 0 || s.width % m != 0 {
        return Err(Error::invalid(format!(
            "spatial size {}x{} not divisible by {m}",
            s.height, s.width
        )));
    }
    let mut out = vec![gt.clone()];
    for _ in 1..levels {
        let next = kernels::downsample2x(out.last().unwrap())?;
        out.push(next);
    }
    ScalePyramid::new(out)
}

/// Tape version used during training: sum over levels of the RMS
/// residual. `targets` are value tensors (no gradient flows to them).
pub fn multiscale_loss_tape(
    tape: &mut Tape,
    outputs: &[Var],
    targets: &[Tensor4],
) -> Result<Var> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(Error::invalid(format!(
            "pyramid length mismatch: {} outputs vs {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&out, tgt) in outputs.iter().zip(targets) {
        if tape.value(out).shape() != tgt.shape() {
            return Err(Error::ShapeMismatch {
                op: "multiscale_loss",
                lhs: tape.value(out).shape().as_array().to_vec(),
                rhs: tgt.shape().as_array().to_vec(),
            });
        }
        let vt = tape.leaf(tgt.clone());
        let r = tape.sub(out, vt)?;
        let term = tape.rms(r)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Value-level multi-scale loss.
pub fn multiscale_loss(outputs: &ScalePyramid, targets: &ScalePyramid) -> Result<f64> {
    let mut tape = Tape::new();
    let outs: Vec<Var> = outputs.levels().iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = multiscale_loss_tape(&mut tape, &outs, targets.levels())?;
    Ok(tape.value(loss).data()[0])
}

/// PSNR in decibels; `None` signals infinite PSNR (zero MSE).
pub fn psnr(a: &Tensor4, b: &Tensor4, peak: f64) -> Result<Option<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().as_array().to_vec(),
            rhs: b.shape().as_array().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(None);
    }
    Ok(Some(10.0 * (peak * peak / mse).log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Windowed SSIM with an 11×11 Gaussian window (σ=1.5), K1=0.01,
/// K2=0.03, dynamic range 1.0; valid windows only, mean over windows,
/// channels, and batch.
pub fn ssim(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().as_array().to_vec(),
            rhs: b.shape().as_array().to_vec(),
        });
    }
    let s = a.shape();
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            s.height, s.width
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..s.batch {
        for ci in 0..s.channels {
            for y0 in 0..=(s.height - SSIM_WINDOW) {
                for x0 in 0..=(s.width - SSIM_WINDOW) {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    let mut aa = 0.0;
                    let mut bb = 0.0;
                    let mut ab = 0.0;
                    for wy in 0..SSIM_WINDOW {
                        for wx in 0..SSIM_WINDOW {
                            let wv = win[wy * SSIM_WINDOW + wx];
                            let va = a.at(bi, ci, y0 + wy, x0 + wx);
                            let vb = b.at(bi, ci, y0 + wy, x0 + wx);
                            mu_a += wv * va;
                            mu_b += wv * vb;
                            aa += wv * va * va;
                            bb += wv * vb * vb;
                            ab += wv * va * vb;
                        }
                    }
                    let var_a = aa - mu_a * mu_a;
                    let var_b = bb - mu_b * mu_b;
                    let cov = ab - mu_a * mu_b;
                    let v = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                    total += v;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
