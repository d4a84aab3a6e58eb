//! Command-line front end: noise synthesis, training, evaluation,
//! single-image fusion, and finite-difference gradient checking.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nirfuse::checkpoint::{load_checkpoint, save_checkpoint};
use nirfuse::config::RunConfig;
use nirfuse::data::{
    self, format_manifest, load_image, load_manifest, save_image, split_manifest, NoiseSpec,
    SceneRecord,
};
use nirfuse::error::{Error, Result};
use nirfuse::gradcheck;
use nirfuse::layers::ParamSet;
use nirfuse::net::{net_init, FusionMode};
use nirfuse::optim::OptimState;
use nirfuse::train::{self, loss_curve_csv, metric_table_csv, TrainSet};
use nirfuse::{Shape4, Tensor4};

#[derive(Parser)]
#[command(
    name = "nirfuse",
    version,
    about = "NIR-guided low-light image denoiser with selective feature fusion",
    after_help = "Environment:\n  NIRFUSE_THREADS  cap on internal worker threads (>= 1)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize noisy low-light variants of clean images and write a
    /// dataset manifest.
    Synth(SynthArgs),
    /// Train a denoiser on a manifest dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest dataset (PSNR/SSIM table).
    Eval(EvalArgs),
    /// Denoise one RGB image guided by one NIR image.
    Fuse(FuseArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean PNGs; `<id>.png` is the clean RGB image and an
    /// optional `<id>_nir.png` is its NIR guide (derived from luma when
    /// absent).
    #[arg(long)]
    in_dir: PathBuf,
    /// Output dataset directory (noisy PNGs + manifest.tsv).
    #[arg(long)]
    out_dir: PathBuf,
    /// Noise preset: dvd-sigma4, dvd-sigma8, real-low, real-middle, real-high.
    #[arg(long, default_value = "dvd-sigma8")]
    preset: String,
    /// Override the preset's sigma.
    #[arg(long)]
    sigma: Option<f64>,
    /// Override the preset's brightness scale.
    #[arg(long)]
    brightness: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration ([net], [trainer], [data], [noise]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory containing manifest.tsv.
    #[arg(long)]
    data_dir: PathBuf,
    /// Run directory: checkpoints, loss curve, config echo, metrics.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override [trainer].steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Override [trainer].seed and [net].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override [net].fusion_mode (single, sum, sfm).
    #[arg(long)]
    fusion_mode: Option<String>,
    /// Resume from an existing checkpoint instead of fresh init.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory containing manifest.tsv.
    #[arg(long)]
    data_dir: PathBuf,
    /// Noise preset applied to the clean images during evaluation.
    #[arg(long, default_value = "dvd-sigma8")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the CSV table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Noisy RGB input PNG.
    #[arg(long)]
    rgb: PathBuf,
    /// NIR guide PNG (converted to single channel if RGB).
    #[arg(long)]
    nir: PathBuf,
    /// Restored output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Scope: ops, sfm, net, or all.
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let _threads = thread_cap()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parse NIRFUSE_THREADS. Kernels currently run on one thread, so any
/// cap >= 1 is honored trivially; the variable is still validated so a
/// typo fails fast.
fn thread_cap() -> Result<usize> {
    match std::env::var("NIRFUSE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("NIRFUSE_THREADS must be an integer, got '{v}'")))?;
            if n == 0 {
                return Err(Error::invalid("NIRFUSE_THREADS must be >= 1"));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Rec. 601 luma, used when a scene has no captured NIR guide.
fn to_luma(t: &Tensor4) -> Tensor4 {
    let s = t.shape();
    if s.channels == 1 {
        return t.clone();
    }
    let mut out = Tensor4::zeros(Shape4::new(s.batch, 1, s.height, s.width));
    for b in 0..s.batch {
        for y in 0..s.height {
            for x in 0..s.width {
                let v = 0.299 * t.at(b, 0, y, x) + 0.587 * t.at(b, 1, y, x)
                    + 0.114 * t.at(b, 2, y, x);
                out.set(b, 0, y, x, v);
            }
        }
    }
    out
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = NoiseSpec::preset(&a.preset, a.seed)?;
    if let Some(s) = a.sigma {
        spec = NoiseSpec::new(s, spec.brightness_scale, a.seed)?;
    }
    if let Some(b) = a.brightness {
        spec = NoiseSpec::new(spec.sigma, b, a.seed)?;
    }

    let entries = std::fs::read_dir(&a.in_dir)
        .map_err(|e| Error::Io { path: a.in_dir.clone(), source: e })?;
    let mut ids: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io { path: a.in_dir.clone(), source: e })?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".png") {
            if !stem.ends_with("_nir") && !stem.ends_with("_noisy") {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Manifest(format!("no clean PNGs found in {}", a.in_dir.display())));
    }

    create_dir(&a.out_dir)?;
    let level = a.preset.clone();
    let mut records = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let clean_src = a.in_dir.join(format!("{id}.png"));
        let clean = load_image(&clean_src)?;
        let clean_dst = format!("{id}.png");
        std::fs::copy(&clean_src, a.out_dir.join(&clean_dst))
            .map_err(|e| Error::Io { path: clean_src.clone(), source: e })?;

        let nir_src = a.in_dir.join(format!("{id}_nir.png"));
        let nir_dst = format!("{id}_nir.png");
        if nir_src.exists() {
            std::fs::copy(&nir_src, a.out_dir.join(&nir_dst))
                .map_err(|e| Error::Io { path: nir_src.clone(), source: e })?;
        } else {
            save_image(&to_luma(&clean), &a.out_dir.join(&nir_dst))?;
        }

        // per-scene seed keyed by sorted position: rerunning with the
        // same inputs and seed rewrites identical files
        let scene_spec = NoiseSpec { seed: spec.seed.wrapping_add(i as u64), ..spec };
        let noisy = data::synth_noise(&clean, &scene_spec)?;
        let noisy_dst = format!("{id}_noisy.png");
        save_image(&noisy, &a.out_dir.join(&noisy_dst))?;

        records.push(SceneRecord {
            id: id.clone(),
            clean: clean_dst.into(),
            nir: nir_dst.into(),
            noisy: vec![(level.clone(), noisy_dst.into())],
        });
    }
    write_file(&a.out_dir.join("manifest.tsv"), &format_manifest(&records))?;
    println!(
        "wrote {} scenes (sigma {}, brightness {}) to {}",
        records.len(),
        spec.sigma,
        spec.brightness_scale,
        a.out_dir.display()
    );
    Ok(())
}

/// Resolve a manifest-relative path against the manifest's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

struct LoadedScene {
    id: String,
    clean: Tensor4,
    nir: Tensor4,
    noisy: Option<Tensor4>,
}

fn load_scenes(data_dir: &Path) -> Result<Vec<LoadedScene>> {
    let manifest = data_dir.join("manifest.tsv");
    let records = load_manifest(&manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    records
        .iter()
        .map(|r| {
            let clean = load_image(&resolve(&base, &r.clean))?;
            let nir = to_luma(&load_image(&resolve(&base, &r.nir))?);
            let noisy = match r.noisy.first() {
                Some((_, p)) => Some(load_image(&resolve(&base, p))?),
                None => None,
            };
            Ok(LoadedScene { id: r.id.clone(), clean, nir, noisy })
        })
        .collect()
}

fn build_train_set(
    scenes: &[LoadedScene],
    cfg: &RunConfig,
    spec: &NoiseSpec,
) -> Result<TrainSet> {
    let mut noisy_parts = Vec::new();
    let mut clean_parts = Vec::new();
    let mut nir_parts = Vec::new();
    for (i, sc) in scenes.iter().enumerate() {
        let noisy = match &sc.noisy {
            Some(t) => t.clone(),
            None => {
                let scene_spec = NoiseSpec { seed: spec.seed.wrapping_add(i as u64), ..*spec };
                data::synth_noise(&sc.clean, &scene_spec)?
            }
        };
        let batch = data::sample_patches(
            &noisy,
            &sc.clean,
            &sc.nir,
            cfg.data.patches_per_scene,
            cfg.data.patch_size,
            cfg.data.augment,
            cfg.trainer.seed.wrapping_add(i as u64),
        )?;
        noisy_parts.push(batch.noisy_rgb);
        clean_parts.push(batch.clean_rgb);
        nir_parts.push(batch.nir);
    }
    Ok(TrainSet {
        noisy: concat_batch(&noisy_parts),
        clean: concat_batch(&clean_parts),
        nir: concat_batch(&nir_parts),
    })
}

fn concat_batch(parts: &[Tensor4]) -> Tensor4 {
    let s = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.shape().batch).sum();
    let mut out = Tensor4::zeros(Shape4::new(total, s.channels, s.height, s.width));
    let mut off = 0;
    for p in parts {
        let n = p.numel();
        out.data_mut()[off..off + n].copy_from_slice(p.data());
        off += n;
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(steps) = a.steps {
        cfg.trainer.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.trainer.seed = seed;
        cfg.net.seed = seed;
    }
    if let Some(mode) = &a.fusion_mode {
        cfg.net.fusion_mode = match mode.as_str() {
            "single" => FusionMode::Single,
            "sum" => FusionMode::Sum,
            "sfm" => FusionMode::Sfm,
            other => {
                return Err(Error::invalid(format!(
                    "unknown fusion mode '{other}' (single, sum, sfm)"
                )))
            }
        };
    }
    cfg.net.validate()?;
    let m = cfg.net.spatial_multiple();
    if cfg.data.patch_size % m != 0 {
        return Err(Error::Config(format!(
            "patch_size {} must be a multiple of {} for {} scales",
            cfg.data.patch_size, m, cfg.net.scales
        )));
    }

    let spec = cfg.noise.resolve()?;
    let scenes = load_scenes(&a.data_dir)?;
    // scene-level split keeps train and test content disjoint
    let pseudo: Vec<SceneRecord> = scenes
        .iter()
        .map(|s| SceneRecord {
            id: s.id.clone(),
            clean: PathBuf::new(),
            nir: PathBuf::new(),
            noisy: vec![],
        })
        .collect();
    let (train_recs, test_recs) =
        split_manifest(&pseudo, cfg.data.train_fraction, cfg.data.split_seed)?;
    let owned: Vec<LoadedScene> = train_recs
        .iter()
        .map(|r| {
            let s = scenes.iter().find(|s| s.id == r.id).unwrap();
            LoadedScene {
                id: s.id.clone(),
                clean: s.clean.clone(),
                nir: s.nir.clone(),
                noisy: s.noisy.clone(),
            }
        })
        .collect();
    if owned.is_empty() {
        return Err(Error::Manifest("training split is empty".into()));
    }
    let set = build_train_set(&owned, &cfg, &spec)?;

    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("run_config.toml"), &cfg.to_toml())?;

    let (mut net, mut state) = match &a.resume {
        Some(path) => {
            let (net, state) = load_checkpoint(path)?;
            let state = state
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            (net, state)
        }
        None => {
            let net = net_init(&cfg.net)?;
            let state = OptimState::new(&net.params());
            (net, state)
        }
    };

    println!(
        "training: {} scenes, {} patches, {} params, {} steps",
        owned.len(),
        set.noisy.shape().batch,
        net.params().iter().map(|p| p.value.numel()).sum::<usize>(),
        cfg.trainer.steps
    );
    let curve = train::train(&mut net, &mut state, &set, &cfg.trainer, Some(&a.out_dir))?;
    write_file(&a.out_dir.join("loss_curve.csv"), &loss_curve_csv(&curve))?;
    save_checkpoint(&a.out_dir.join("final.ckpt"), &net, Some(&state))?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("loss: {} -> {}", first.loss, last.loss);
    }

    if !test_recs.is_empty() {
        let eval_scenes: Vec<(String, Tensor4, Tensor4)> = test_recs
            .iter()
            .map(|r| {
                let s = scenes.iter().find(|s| s.id == r.id).unwrap();
                (s.id.clone(), s.clean.clone(), s.nir.clone())
            })
            .collect();
        let rows = train::evaluate(&net, &eval_scenes, &spec)?;
        let csv = metric_table_csv(&rows);
        write_file(&a.out_dir.join("metrics.csv"), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (net, _) = load_checkpoint(&a.checkpoint)?;
    let spec = NoiseSpec::preset(&a.preset, a.seed)?;
    let scenes = load_scenes(&a.data_dir)?;
    let eval_scenes: Vec<(String, Tensor4, Tensor4)> =
        scenes.into_iter().map(|s| (s.id, s.clean, s.nir)).collect();
    let rows = train::evaluate(&net, &eval_scenes, &spec)?;
    let csv = metric_table_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.out {
        write_file(out, &csv)?;
    }
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let (net, _) = load_checkpoint(&a.checkpoint)?;
    let rgb = load_image(&a.rgb)?;
    let nir = to_luma(&load_image(&a.nir)?);
    let rs = rgb.shape();
    let ns = nir.shape();
    if rs.height != ns.height || rs.width != ns.width {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: rs.as_array().to_vec(),
            rhs: ns.as_array().to_vec(),
        });
    }
    let m = net.config().spatial_multiple();
    if rs.height % m != 0 || rs.width % m != 0 {
        return Err(Error::invalid(format!(
            "input {}x{} is not a multiple of {m}; crop first",
            rs.height, rs.width
        )));
    }
    let uses_nir = net.config().fusion_mode != FusionMode::Single;
    let outs = net.infer(&rgb, if uses_nir { Some(&nir) } else { None })?;
    let restored = outs[0].map(|v| v.clamp(0.0, 1.0));
    save_image(&restored, &a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), rs.width, rs.height);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_scope(&a.scope, a.seed)?;
    let mut failed = 0usize;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{status}  {:<28} max_rel_err {:.3e}  (tol {:.0e})", r.name, r.max_rel_err, r.tolerance);
        if !r.passed() {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", reports.len(), failed);
    if failed > 0 {
        return Err(Error::Numerical(format!(
            "{failed} gradient check(s) exceeded tolerance in scope '{}'",
            a.scope
        )));
    }
    Ok(())
}
