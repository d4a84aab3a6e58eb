//! Image I/O, scene manifests, patch sampling, and the synthetic
//! low-light noise model.
//!
//! Noise model: the clean image is first scaled by `brightness_scale`
//! (the low-light factor), then two zero-mean Gaussian components are
//! added per pixel: a signal-dependent shot component with variance
//! (sigma/255)·x' (x' the scaled intensity) and a read component with
//! standard deviation sigma/255. The result is clamped to [0, 1].
//! Everything is deterministic given the spec's seed.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Noise level on [0, 255]-scaled intensities, as in the two
    /// synthetic presets sigma = 4 and sigma = 8.
    pub sigma: f64,
    /// Multiplicative low-light factor in (0, 1].
    pub brightness_scale: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, brightness_scale: f64, seed: u64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        if !(brightness_scale > 0.0 && brightness_scale <= 1.0) {
            return Err(Error::invalid(format!(
                "brightness_scale must be in (0, 1], got {brightness_scale}"
            )));
        }
        Ok(NoiseSpec { sigma, brightness_scale, seed })
    }

    /// Named presets exposed in config files and the CLI.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let (sigma, brightness) = match name {
            "dvd-sigma4" => (4.0, 1.0),
            "dvd-sigma8" => (8.0, 1.0),
            "real-low" => (4.0, 0.5),
            "real-middle" => (8.0, 0.5),
            "real-high" => (16.0, 0.5),
            other => {
                return Err(Error::invalid(format!(
                    "unknown noise preset '{other}' (dvd-sigma4, dvd-sigma8, real-low, real-middle, real-high)"
                )))
            }
        };
        NoiseSpec::new(sigma, brightness, seed)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["dvd-sigma4", "dvd-sigma8", "real-low", "real-middle", "real-high"]
    }

    /// Analytic variance of (noisy − scaled clean) at scaled intensity `x`.
    pub fn residual_variance(&self, x_scaled: f64) -> f64 {
        let s = self.sigma / 255.0;
        s * x_scaled + s * s
    }
}

/// Add the documented shot + read noise to a clean [0,1] image.
pub fn synth_noise(clean: &Tensor4, spec: &NoiseSpec) -> Result<Tensor4> {
    if spec.sigma < 0.0 {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    let mut out = clean.scale(spec.brightness_scale);
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let s = spec.sigma / 255.0;
    for v in out.data_mut() {
        let var = s * v.max(0.0) + s * s;
        *v = (*v + unit.sample(&mut rng) * var.sqrt()).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Load an 8- or 16-bit PNG as a [0,1] tensor; RGB gives 3 channels,
/// grayscale 1.
pub fn load_image(path: &Path) -> Result<Tensor4> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            Tensor4::from_vec(Shape4::new(1, 1, h, w), data)
        }
        image::DynamicImage::ImageLuma16(g) => {
            let data = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
            Tensor4::from_vec(Shape4::new(1, 1, h, w), data)
        }
        other => {
            let is_16bit = matches!(
                other,
                image::DynamicImage::ImageRgb16(_) | image::DynamicImage::ImageRgba16(_)
            );
            if is_16bit {
                let rgb = other.to_rgb16();
                let mut data = vec![0.0; 3 * h * w];
                for (y, x, p) in rgb.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p))
                {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = p.0[c] as f64 / 65535.0;
                    }
                }
                Tensor4::from_vec(Shape4::new(1, 3, h, w), data)
            } else {
                let rgb = other.to_rgb8();
                let mut data = vec![0.0; 3 * h * w];
                for (y, x, p) in rgb.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p))
                {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = p.0[c] as f64 / 255.0;
                    }
                }
                Tensor4::from_vec(Shape4::new(1, 3, h, w), data)
            }
        }
    }
}

/// Save a 1- or 3-channel tensor (batch 1) as an 8-bit PNG, clamping to
/// [0,1] and quantizing.
pub fn save_image(t: &Tensor4, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.batch != 1 || (s.channels != 1 && s.channels != 3) {
        return Err(Error::invalid(format!(
            "save_image wants a (1, 1|3, H, W) tensor, got {:?}",
            s.as_array()
        )));
    }
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (s.width as u32, s.height as u32);
    let result = if s.channels == 1 {
        let buf: Vec<u8> = t.data().iter().map(|&v| quant(v)).collect();
        image::GrayImage::from_raw(w, h, buf).unwrap().save(path)
    } else {
        let mut buf = vec![0u8; 3 * s.height * s.width];
        for y in 0..s.height {
            for x in 0..s.width {
                for c in 0..3 {
                    buf[(y * s.width + x) * 3 + c] = quant(t.at(0, c, y, x));
                }
            }
        }
        image::RgbImage::from_raw(w, h, buf).unwrap().save(path)
    };
    result.map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// One dataset scene: clean RGB, NIR guide, and zero or more noisy
/// variants tagged with a level name.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub clean: PathBuf,
    pub nir: PathBuf,
    pub noisy: Vec<(String, PathBuf)>,
}

/// Manifest format: one record per line, tab-separated:
/// `id<TAB>clean<TAB>nir[<TAB>level=path ...]`. Lines starting with `#`
/// are comments.
pub fn parse_manifest(text: &str) -> Result<Vec<SceneRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Manifest(format!(
                "line {}: expected at least 3 tab-separated fields",
                lineno + 1
            )));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::Manifest(format!("duplicate scene id '{}'", fields[0])));
        }
        let mut noisy = Vec::new();
        for f in &fields[3..] {
            let (level, path) = f.split_once('=').ok_or_else(|| {
                Error::Manifest(format!("line {}: noisy field '{}' is not level=path", lineno + 1, f))
            })?;
            noisy.push((level.to_string(), PathBuf::from(path)));
        }
        records.push(SceneRecord {
            id: fields[0].to_string(),
            clean: PathBuf::from(fields[1]),
            nir: PathBuf::from(fields[2]),
            noisy,
        });
    }
    Ok(records)
}

pub fn format_manifest(records: &[SceneRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = write!(out, "{}\t{}\t{}", r.id, r.clean.display(), r.nir.display());
        for (level, path) in &r.noisy {
            let _ = write!(out, "\t{}={}", level, path.display());
        }
        out.push('\n');
    }
    out
}

pub fn load_manifest(path: &Path) -> Result<Vec<SceneRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let records = parse_manifest(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for r in &records {
        for p in std::iter::once(&r.clean)
            .chain(std::iter::once(&r.nir))
            .chain(r.noisy.iter().map(|(_, p)| p))
        {
            let resolved = if p.is_absolute() { p.clone() } else { base.join(p) };
            if !resolved.exists() {
                return Err(Error::Manifest(format!(
                    "scene '{}': file {} does not exist",
                    r.id,
                    resolved.display()
                )));
            }
        }
    }
    Ok(records)
}

/// Deterministic disjoint/exhaustive split by shuffled scene order.
pub fn split_manifest(
    records: &[SceneRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid("train_fraction must be in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (records.len() as f64 * train_fraction).round() as usize;
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, test))
}

/// Aligned training patches; all tensors share the same crop windows
/// and augmentation.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub noisy_rgb: Tensor4,
    pub clean_rgb: Tensor4,
    pub nir: Tensor4,
    pub patch_size: usize,
}

#[derive(Debug, Clone, Copy)]
struct PatchTransform {
    y0: usize,
    x0: usize,
    flip_h: bool,
    flip_v: bool,
}

fn crop_with(t: &Tensor4, tr: PatchTransform, size: usize) -> Tensor4 {
    let s = t.shape();
    let mut out = Tensor4::zeros(Shape4::new(1, s.channels, size, size));
    for c in 0..s.channels {
        for y in 0..size {
            for x in 0..size {
                let sy = if tr.flip_v { tr.y0 + size - 1 - y } else { tr.y0 + y };
                let sx = if tr.flip_h { tr.x0 + size - 1 - x } else { tr.x0 + x };
                out.set(0, c, y, x, t.at(0, c, sy, sx));
            }
        }
    }
    out
}

fn stack_batch(patches: &[Tensor4]) -> Tensor4 {
    let s = patches[0].shape();
    let mut out = Tensor4::zeros(Shape4::new(patches.len(), s.channels, s.height, s.width));
    let stride = s.channels * s.height * s.width;
    for (i, p) in patches.iter().enumerate() {
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(p.data());
    }
    out
}

/// Sample `n` aligned patch triples from in-memory scene images.
/// `augment` adds random horizontal/vertical flips, applied identically
/// to all three images of a sample.
pub fn sample_patches(
    noisy_rgb: &Tensor4,
    clean_rgb: &Tensor4,
    nir: &Tensor4,
    n: usize,
    size: usize,
    augment: bool,
    seed: u64,
) -> Result<PatchBatch> {
    let s = clean_rgb.shape();
    for (label, t) in [("noisy_rgb", noisy_rgb), ("nir", nir)] {
        let ts = t.shape();
        if ts.height != s.height || ts.width != s.width || ts.batch != 1 {
            return Err(Error::ShapeMismatch {
                op: "sample_patches",
                lhs: s.as_array().to_vec(),
                rhs: ts.as_array().to_vec(),
            });
        }
        let _ = label;
    }
    if s.height < size || s.width < size {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than patch size {size}",
            s.height, s.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    let mut guide = Vec::with_capacity(n);
    for _ in 0..n {
        let tr = PatchTransform {
            y0: rng.gen_range(0..=s.height - size),
            x0: rng.gen_range(0..=s.width - size),
            flip_h: augment && rng.gen_bool(0.5),
            flip_v: augment && rng.gen_bool(0.5),
        };
        noisy.push(crop_with(noisy_rgb, tr, size));
        clean.push(crop_with(clean_rgb, tr, size));
        guide.push(crop_with(nir, tr, size));
    }
    Ok(PatchBatch {
        noisy_rgb: stack_batch(&noisy),
        clean_rgb: stack_batch(&clean),
        nir: stack_batch(&guide),
        patch_size: size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(c: usize, h: usize, w: usize) -> Tensor4 {
        // encodes (y, x) coordinates so crops are checkable
        let mut t = Tensor4::zeros(Shape4::new(1, c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    t.set(0, ci, y, x, (y * w + x) as f64 / (h * w) as f64);
                }
            }
        }
        t
    }

    #[test]
    fn noiseless_identity() {
        let clean = ramp_image(3, 8, 8);
        let spec = NoiseSpec::new(0.0, 1.0, 7).unwrap();
        let noisy = synth_noise(&clean, &spec).unwrap();
        assert_eq!(noisy, clean);
    }

    #[test]
    fn noise_is_reproducible() {
        let clean = ramp_image(3, 8, 8);
        let spec = NoiseSpec::new(8.0, 1.0, 42).unwrap();
        let a = synth_noise(&clean, &spec).unwrap();
        let b = synth_noise(&clean, &spec).unwrap();
        assert_eq!(a, b);
        let c = synth_noise(&clean, &NoiseSpec::new(8.0, 1.0, 43).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(NoiseSpec::new(-1.0, 1.0, 0).is_err());
        assert!(NoiseSpec::new(1.0, 0.0, 0).is_err());
        assert!(NoiseSpec::new(1.0, 1.5, 0).is_err());
    }

    #[test]
    fn noise_statistics_on_constant_image() {
        let clean = Tensor4::full(Shape4::new(1, 1, 512, 512), 0.5);
        let spec = NoiseSpec::new(8.0, 1.0, 5).unwrap();
        let noisy = synth_noise(&clean, &spec).unwrap();
        let n = noisy.numel() as f64;
        let mean = noisy.mean();
        let var = noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let predicted = spec.residual_variance(0.5);
        assert!((var - predicted).abs() / predicted < 0.02, "var {var} vs {predicted}");
        let se = (predicted / n).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let records = vec![
            SceneRecord {
                id: "s1".into(),
                clean: "a/clean.png".into(),
                nir: "a/nir.png".into(),
                noisy: vec![("low".into(), "a/n0.png".into()), ("high".into(), "a/n1.png".into())],
            },
            SceneRecord {
                id: "s2".into(),
                clean: "b/clean.png".into(),
                nir: "b/nir.png".into(),
                noisy: vec![],
            },
        ];
        let text = format_manifest(&records);
        let parsed = parse_manifest(&text).unwrap();
        assert_eq!(parsed, records);

        let dup = format!("{}{}", text, text);
        assert!(parse_manifest(&dup).is_err());
        assert!(parse_manifest("only_two\tfields").is_err());
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let records: Vec<SceneRecord> = (0..100)
            .map(|i| SceneRecord {
                id: format!("s{i}"),
                clean: "c.png".into(),
                nir: "n.png".into(),
                noisy: vec![],
            })
            .collect();
        let (train, test) = split_manifest(&records, 0.7, 1).unwrap();
        assert_eq!(train.len(), 70);
        assert_eq!(test.len(), 30);
        let train_ids: HashSet<_> = train.iter().map(|r| r.id.clone()).collect();
        let test_ids: HashSet<_> = test.iter().map(|r| r.id.clone()).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        assert_eq!(train_ids.len() + test_ids.len(), 100);
        let (train2, _) = split_manifest(&records, 0.7, 1).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn patches_are_colocated() {
        let clean = ramp_image(3, 16, 16);
        let nir = ramp_image(1, 16, 16);
        let noisy = ramp_image(3, 16, 16);
        let b = sample_patches(&noisy, &clean, &nir, 4, 8, true, 3).unwrap();
        // coordinate-encoding images: all three crops carry identical values
        for i in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    let v = b.clean_rgb.at(i, 0, y, x);
                    assert_eq!(b.nir.at(i, 0, y, x), v);
                    assert_eq!(b.noisy_rgb.at(i, 2, y, x), v);
                }
            }
        }
        let b2 = sample_patches(&noisy, &clean, &nir, 4, 8, true, 3).unwrap();
        assert_eq!(b.clean_rgb, b2.clean_rgb);
    }

    #[test]
    fn augmentation_commutes_with_residual() {
        let clean = ramp_image(3, 16, 16);
        let noisy = clean.map(|v| v + 0.1);
        let nir = ramp_image(1, 16, 16);
        let b = sample_patches(&noisy, &clean, &nir, 8, 8, true, 9).unwrap();
        let residual = b.noisy_rgb.ew_sub(&b.clean_rgb).unwrap();
        assert!(residual.data().iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn patch_too_large_rejected() {
        let img = ramp_image(3, 8, 8);
        let nir = ramp_image(1, 8, 8);
        assert!(sample_patches(&img, &img, &nir, 1, 16, false, 0).is_err());
    }

    #[test]
    fn png_roundtrip_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = ramp_image(3, 8, 8);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn grayscale_loads_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = ramp_image(1, 8, 8);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape().channels, 1);
    }

    #[test]
    fn sixteen_bit_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g16.png");
        let img = ramp_image(1, 8, 8);
        // write a 16-bit PNG directly
        let buf: Vec<u16> =
            img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(8, 8, buf)
            .unwrap()
            .save(&path)
            .unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 1.0 / 65535.0 + 1e-12);
    }

    #[test]
    fn unreadable_file_rejected_with_path() {
        let err = load_image(Path::new("/no/such/file.png")).unwrap_err();
        assert!(format!("{err}").contains("file.png"));
    }
}
