//! Command-line surface: `synth`, `train`, `sample`, `eval`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddinpaint_core::metrics::{evaluate_case, make_report, CaseMetrics, SsimRegion};
use ddinpaint_core::phantom::{generate_phantom, PhantomSpec};
use ddinpaint_core::pipeline::{inpaint_volume, Smoothing};
use ddinpaint_core::smooth::DEFAULT_SIGMA;
use ddinpaint_core::trainer::{SliceDataset, TrainEvent, Trainer};
use ddinpaint_core::volume::{center_crop_slices, preprocess, renormalize_output, void, MaskedCase, Volume};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Manifest, ManifestCase};
use crate::error::{write_atomic, Error, Result};
use crate::nifti::NiftiVolume;
use crate::volume_io::{is_nifti, read_volume, write_volume};

#[derive(Debug, Parser)]
#[command(name = "ddinpaint", version, about = "Slice-wise diffusion inpainting of 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom cases and a manifest.
    Synth(SynthArgs),
    /// Train the denoiser on every masked slice of a dataset.
    Train(TrainArgs),
    /// Inpaint one case with a trained checkpoint.
    Sample(SampleArgs),
    /// Masked SSIM / PSNR / MSE of predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// `D,H,W`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path, rewritten at every checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total step count to reach.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Case directory with `baseline` and `mask` volumes.
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Gaussian post-smoothing width (default 1.075).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub no_smooth: bool,
    /// Only overwrite masked voxels with smoothed values.
    #[arg(long)]
    pub smooth_within_mask: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the baseline outside the mask.
    #[arg(long)]
    pub composite: bool,
    /// Leave the output in the preprocessed [0, 1] range.
    #[arg(long)]
    pub no_renorm: bool,
    /// Center-crop or pad slices to the model size instead of failing.
    #[arg(long)]
    pub crop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    MaskAverage,
    BoundingBox,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction volume, or a directory of `<case>.vvol` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_range: Option<f64>,
    #[arg(long, value_enum)]
    pub ssim_region: Option<RegionArg>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected D,H,W, got {s:?}"));
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.parse().map_err(|_| format!("bad extent {p:?}"))?;
        if *d == 0 {
            return Err("extents must be positive".into());
        }
    }
    Ok(dims)
}

/// Result of a command that may fail per case while still finishing.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub case_failures: usize,
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<Outcome> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Sample(a) => cmd_sample(a, out),
        Command::Eval(a) => cmd_eval(a, out, err),
    }
}

fn log(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn log_config(out: &mut dyn Write, config: &RunConfig) -> Result<()> {
    log(out, format_args!("config={}", config.to_json()))
}

pub fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    if let Some(d) = a.dims {
        config.synth.dims = d;
    }
    if let Some(s) = a.seed {
        config.synth.seed = s;
    }
    config.synth.validate()?;
    log_config(out, &config)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut manifest = Manifest { cases: Vec::with_capacity(a.count) };
    for i in 0..a.count {
        let spec = PhantomSpec { seed: config.synth.seed.wrapping_add(i as u64), ..config.synth.clone() };
        let case = generate_phantom(&spec)?;
        let name = dataset::case_dir_name(i);
        dataset::write_case(&a.out.join(&name), &case)?;
        manifest.cases.push(ManifestCase { id: name.clone(), dir: name, dims: spec.dims });
    }
    dataset::write_manifest(&a.out, &manifest)?;
    log(out, format_args!("wrote {} cases to {}", a.count, a.out.display()))?;
    Ok(Outcome::default())
}

/// Preprocess, crop to the model size and void; slices keep the
/// per-volume normalization.
pub fn load_training_cases(root: &Path, image_size: usize) -> Result<Vec<MaskedCase>> {
    let manifest = dataset::read_manifest(root)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for c in &manifest.cases {
        let dir = root.join(&c.dir);
        let (gt, mask) = dataset::read_training_volumes(&dir)?;
        let gt = preprocess(&gt);
        let (gt, _) = center_crop_slices(&gt, image_size)?;
        let (mask, _) = center_crop_slices(&mask, image_size)?;
        cases.push(MaskedCase::from_ground_truth(gt, mask)?);
    }
    Ok(cases)
}

pub fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.steps {
        config.train.steps = v;
    }
    if let Some(v) = a.seed {
        config.train.seed = v;
    }
    if let Some(v) = a.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        config.train.adam.lr = v;
    }
    if let Some(v) = a.timesteps {
        config.schedule.timesteps = v;
    }
    if let Some(v) = a.checkpoint_every {
        config.train.checkpoint_every = v;
    }
    if let Some(v) = a.log_every {
        config.log_every = v;
    }

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = checkpoint::load(path)?;
            // the network, schedule and run seed come from the checkpoint
            config.unet = ckpt.unet.clone();
            config.schedule.timesteps = ckpt.schedule.timesteps;
            config.schedule.beta_start = Some(ckpt.schedule.beta_start);
            config.schedule.beta_end = Some(ckpt.schedule.beta_end);
            config.train.seed = ckpt.train.seed;
            ckpt.train = config.train.clone();
            let t = Trainer::from_checkpoint(&ckpt)?;
            log(out, format_args!("resumed from {} at step {}", path.display(), t.step_count()))?;
            t
        }
        None => Trainer::new(&config.unet, config.schedule.resolve(), config.train.clone())?,
    };
    log_config(out, &config)?;

    let cases = load_training_cases(&a.data, config.unet.image_size)?;
    let data = SliceDataset::from_cases(config.unet.image_size, cases.iter())?;
    log(out, format_args!("cases={} slices={} parameters={}", cases.len(), data.len(), trainer.model().num_parameters()))?;

    let start = Instant::now();
    let log_every = config.log_every.max(1);
    let ckpt_path = a.out.clone();
    trainer.train(&data, |event| {
        match event {
            TrainEvent::Step { step, loss } => {
                if step % log_every == 0 {
                    writeln!(out, "step={step} loss={loss:.6} elapsed={:.1}s", start.elapsed().as_secs_f64())
                        .map_err(|e| ddinpaint_core::Error::State(e.to_string()))?;
                }
            }
            TrainEvent::Checkpoint(c) => {
                checkpoint::save(&ckpt_path, c).map_err(|e| ddinpaint_core::Error::State(e.to_string()))?;
                writeln!(out, "checkpoint step={} path={}", c.step, ckpt_path.display())
                    .map_err(|e| ddinpaint_core::Error::State(e.to_string()))?;
            }
        }
        Ok(())
    })?;
    Ok(Outcome::default())
}

/// Overwrite the in-plane window of `full` with `cropped`.
fn paste_window(full: &Volume, cropped: &Volume, w: &ddinpaint_core::volume::CropWindow) -> Result<Volume> {
    let [d, h, wd] = full.dims();
    let size = w.size;
    let mut vox = full.voxels().to_vec();
    for z in 0..d {
        for r in 0..w.extent[0] {
            for c in 0..w.extent[1] {
                let src = (z * size + w.target_start[0] + r) * size + w.target_start[1] + c;
                let dst = (z * h + w.source_start[0] + r) * wd + w.source_start[1] + c;
                vox[dst] = cropped.voxels()[src];
            }
        }
    }
    Ok(Volume::new(full.dims(), vox)?)
}

pub fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    let s = &mut config.sample;
    if let Some(seed) = a.seed {
        s.inpaint.seed = seed;
    }
    if a.composite {
        s.inpaint.composite = true;
    }
    if a.no_renorm {
        s.renormalize = false;
    }
    if a.crop {
        s.crop = true;
    }
    let sigma = a.sigma.unwrap_or(match s.inpaint.smoothing {
        Smoothing::Volume { sigma } | Smoothing::WithinMask { sigma } => sigma,
        Smoothing::Off => DEFAULT_SIGMA,
    });
    if a.no_smooth {
        s.inpaint.smoothing = Smoothing::Off;
    } else if a.smooth_within_mask {
        s.inpaint.smoothing = Smoothing::WithinMask { sigma };
    } else if a.sigma.is_some() {
        s.inpaint.smoothing = Smoothing::Volume { sigma };
    }

    let ckpt = checkpoint::load(&a.ckpt)?;
    config.unet = ckpt.unet.clone();
    config.schedule.timesteps = ckpt.schedule.timesteps;
    config.schedule.beta_start = Some(ckpt.schedule.beta_start);
    config.schedule.beta_end = Some(ckpt.schedule.beta_end);
    log_config(out, &config)?;
    let sc = config.sample;

    let case = dataset::read_inference_case(&a.case)?;
    let baseline_path = dataset::member_path(&a.case, dataset::BASELINE).expect("read_inference_case found it");
    let template = if is_nifti(&baseline_path) { Some(NiftiVolume::read(&baseline_path)?) } else { None };
    if ddinpaint_core::volume::nonzero_slices(&case.mask).is_empty() {
        write_volume(&a.out, &case.baseline, template.as_ref())?;
        log(out, format_args!("no masked slices; baseline copied to {}", a.out.display()))?;
        return Ok(Outcome::default());
    }

    let size = ckpt.unet.image_size;
    let [_, h, w] = case.baseline.dims();
    if (h != size || w != size) && !sc.crop {
        return Err(Error::Usage(format!("case slices are {h}x{w} but the checkpoint expects {size}x{size} (pass --crop to center-crop)")));
    }
    let prepared = if sc.preprocess { void(&preprocess(&case.baseline), &case.mask)? } else { case.baseline.clone() };
    let (b, window) = center_crop_slices(&prepared, size)?;
    let (m, _) = center_crop_slices(&case.mask, size)?;

    let model = ckpt.ema_model()?;
    let schedule = ckpt.schedule.build()?;
    let start = Instant::now();
    let result = inpaint_volume(&model, size, &schedule, &b, &m, &sc.inpaint)?;
    log(out, format_args!("sampled {} slices in {:.1}s", result.replaced.len(), start.elapsed().as_secs_f64()))?;

    let full = paste_window(&prepared, &result.volume, &window)?;
    let final_volume = if sc.renormalize { renormalize_output(&full, &case.baseline) } else { full };
    write_volume(&a.out, &final_volume, template.as_ref())?;
    log(out, format_args!("wrote {}", a.out.display()))?;
    Ok(Outcome::default())
}

fn volume_file_stem(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_str()?;
    if ext.eq_ignore_ascii_case("vvol") || ext.eq_ignore_ascii_case("nii") {
        path.file_stem()?.to_str().map(str::to_owned)
    } else {
        None
    }
}

/// `<dir>/<id>.vvol|.nii`, else the case-layout member `<dir>/<id>/<stem>`.
fn resolve_in(dir: &Path, id: &str, stem: &str) -> Option<PathBuf> {
    dataset::member_path(dir, id).or_else(|| dataset::member_path(&dir.join(id), stem))
}

pub fn cmd_eval(a: EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Outcome> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    if let Some(r) = a.data_range {
        config.eval.ssim.data_range = r;
    }
    if let Some(r) = a.ssim_region {
        config.eval.region = match r {
            RegionArg::MaskAverage => SsimRegion::MaskAverage,
            RegionArg::BoundingBox => SsimRegion::BoundingBox,
        };
    }
    log_config(out, &config)?;

    let jobs: Vec<(String, PathBuf, Option<PathBuf>, Option<PathBuf>)> = if a.pred.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&a.pred)
            .map_err(|e| Error::io(&a.pred, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && volume_file_stem(p).is_some())
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|p| {
                let id = volume_file_stem(&p).expect("filtered above");
                let gt = resolve_in(&a.gt, &id, dataset::GT);
                let mask = resolve_in(&a.mask, &id, dataset::MASK);
                (id, p, gt, mask)
            })
            .collect()
    } else {
        let id = volume_file_stem(&a.pred).unwrap_or_else(|| a.pred.display().to_string());
        vec![(id, a.pred.clone(), Some(a.gt.clone()), Some(a.mask.clone()))]
    };
    if jobs.is_empty() {
        return Err(Error::Usage(format!("no prediction volumes found in {}", a.pred.display())));
    }

    let mut rows: Vec<CaseMetrics> = Vec::new();
    let mut failures = 0;
    for (id, pred, gt, mask) in jobs {
        let result = (|| -> Result<CaseMetrics> {
            let gt = gt.ok_or_else(|| Error::Usage(format!("no ground truth for case {id}")))?;
            let mask = mask.ok_or_else(|| Error::Usage(format!("no mask for case {id}")))?;
            let p = read_volume(&pred)?;
            let g = read_volume(&gt)?;
            let m = dataset::read_mask(&mask)?;
            Ok(evaluate_case(&id, &p, &g, &m, &config.eval)?)
        })();
        match result {
            Ok(r) => rows.push(r),
            Err(e) => {
                failures += 1;
                let _ = writeln!(err, "case {id}: {e}");
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Usage(format!("all {failures} cases failed")));
    }
    let report = make_report(rows)?;
    write_atomic(&a.out, report.to_csv().as_bytes())?;
    write!(out, "{}", report.to_table()).map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    if failures > 0 {
        let _ = writeln!(err, "{failures} case(s) failed");
    }
    Ok(Outcome { case_failures: failures })
}
