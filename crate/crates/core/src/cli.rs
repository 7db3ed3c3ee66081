//! The `masscrf` command line: `synth`, `train`, `eval` and `gradcheck`.
//!
//! Settings resolve in three layers: built-in defaults, then a flat
//! `key = value` config file (`--config`), then command-line flags. Every
//! command writes the resolved settings to `run_config.txt` in its output
//! directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use image::{Rgb, RgbImage};

use crate::crf::UpdateForm;
use crate::dataio::{
    load_masks_dir, synth_benchmark, synth_generate, training_set, write_dataset_dir, Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::boundary;
use crate::model::{prepare, Variant};
use crate::tensor::Tensor;
use crate::trainer::{evaluate_state, EvalReport, TrainConfig, TrainState};

pub const RESOLVED_CONFIG_FILE: &str = "run_config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";
pub const TRIMAP_FILE: &str = "trimap.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";
/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "MASSCRF_THREADS";

/// Every setting a command can read.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Add the three flipped copies of every training sample.
    pub augment: bool,
    pub synth: SynthConfig,
    /// Samples `synth` holds out as a test split (0 writes a single train split).
    pub test_count: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overlays: bool,
    pub gradcheck_op: Option<String>,
    pub gradcheck_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            augment: true,
            synth: SynthConfig::default(),
            test_count: 0,
            data: None,
            checkpoint: None,
            resume: None,
            out: None,
            overlays: false,
            gradcheck_op: None,
            gradcheck_seeds: gradcheck::DEFAULT_SEEDS,
        }
    }
}

/// Recognised config keys, in the order they are echoed.
pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "network",
    "train_prior",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "epochs",
    "batch_size",
    "epsilon",
    "lambda",
    "seed",
    "augment",
    "crf.weights",
    "crf.theta_alpha",
    "crf.theta_beta",
    "crf.theta_gamma",
    "crf.steps_train",
    "crf.steps_test",
    "crf.update_form",
    "synth.count",
    "synth.test_count",
    "synth.contrast",
    "synth.noise_sigma",
    "data",
    "checkpoint",
    "resume",
    "out",
    "overlays",
    "gradcheck.op",
    "gradcheck.seeds",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one `key = value` setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "variant" => t.variant = value.parse()?,
            "network" => t.model.network = value.to_string(),
            "train_prior" => t.model.train_prior = parse_bool(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                self.synth.seed = t.seed;
            }
            "augment" => self.augment = parse_bool(key, value)?,
            "crf.weights" => {
                t.model.crf.weights = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<Vec<f64>>>()?;
            }
            "crf.theta_alpha" => t.model.crf.theta_alpha = parse(key, value)?,
            "crf.theta_beta" => t.model.crf.theta_beta = parse(key, value)?,
            "crf.theta_gamma" => t.model.crf.theta_gamma = parse(key, value)?,
            "crf.steps_train" => t.model.crf.steps_train = parse(key, value)?,
            "crf.steps_test" => t.model.crf.steps_test = parse(key, value)?,
            "crf.update_form" => t.model.crf.update_form = value.parse::<UpdateForm>()?,
            "synth.count" => self.synth.count = parse(key, value)?,
            "synth.test_count" => self.test_count = parse(key, value)?,
            "synth.contrast" => self.synth.contrast = parse(key, value)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse(key, value)?,
            "data" => self.data = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "resume" => self.resume = opt_path(value),
            "out" => self.out = opt_path(value),
            "overlays" => self.overlays = parse_bool(key, value)?,
            "gradcheck.op" => self.gradcheck_op = (!value.is_empty()).then(|| value.to_string()),
            "gradcheck.seeds" => self.gradcheck_seeds = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (known keys: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let c = &t.model.crf;
        Some(match key {
            "variant" => t.variant.to_string(),
            "network" => t.model.network.clone(),
            "train_prior" => t.model.train_prior.to_string(),
            "lr" => t.lr.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epsilon" => t.epsilon.to_string(),
            "lambda" => t.lambda.to_string(),
            "seed" => t.seed.to_string(),
            "augment" => self.augment.to_string(),
            "crf.weights" => c.weights.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "crf.theta_alpha" => c.theta_alpha.to_string(),
            "crf.theta_beta" => c.theta_beta.to_string(),
            "crf.theta_gamma" => c.theta_gamma.to_string(),
            "crf.steps_train" => c.steps_train.to_string(),
            "crf.steps_test" => c.steps_test.to_string(),
            "crf.update_form" => c.update_form.to_string(),
            "synth.count" => self.synth.count.to_string(),
            "synth.test_count" => self.test_count.to_string(),
            "synth.contrast" => self.synth.contrast.to_string(),
            "synth.noise_sigma" => self.synth.noise_sigma.to_string(),
            "data" => show_path(&self.data),
            "checkpoint" => show_path(&self.checkpoint),
            "resume" => show_path(&self.resume),
            "out" => show_path(&self.out),
            "overlays" => self.overlays.to_string(),
            "gradcheck.op" => self.gradcheck_op.clone().unwrap_or_default(),
            "gradcheck.seeds" => self.gradcheck_seeds.to_string(),
            _ => return None,
        })
    }

    /// Applies a config document: `key = value` lines, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved masscrf settings\n");
        for key in CONFIG_KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("an output directory is required (--out DIR)".into()))
    }

    fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "masscrf", version, about = "Mass segmentation with FCN-CRF models and adversarial training")]
pub struct Cli {
    /// Flat `key = value` config file applied before command-line flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (PGM images, masks, manifest).
    Synth {
        #[arg(long)]
        count: Option<usize>,
        /// Hold out this many samples in `<out>/test`; the rest go to `<out>/train`.
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        contrast: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a variant; writes a checkpoint and per-epoch metrics.
    Train {
        /// Training dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        network: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a test dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fail unless the checkpoint holds this variant.
        #[arg(long)]
        variant: Option<String>,
        /// Also write PNG overlays (red groundtruth, green prediction contours).
        #[arg(long)]
        overlays: bool,
    },
    /// Finite-difference gradient checks; exit code 0 iff all pass.
    Gradcheck {
        /// Only checks with this name or name prefix.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

/// Exit code for an error: 2 for numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::TrainingDiverged { .. } | Error::DegenerateGradient { .. } => 2,
        _ => 1,
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool already built earlier in this process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Resolves settings for a parsed command line.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(p) = &cli.out {
        flags.push(("out", p.display().to_string()));
    }
    if let Some(s) = cli.seed {
        flags.push(("seed", s.to_string()));
    }
    let mut put = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match &cli.command {
        Command::Synth { count, test_count, contrast, noise } => {
            put("synth.count", count.map(|v| v.to_string()));
            put("synth.test_count", test_count.map(|v| v.to_string()));
            put("synth.contrast", contrast.map(|v| v.to_string()));
            put("synth.noise_sigma", noise.map(|v| v.to_string()));
        }
        Command::Train { data, variant, epochs, batch_size, lr, epsilon, lambda, network, resume } => {
            put("data", path(data));
            put("variant", variant.clone());
            put("epochs", epochs.map(|v| v.to_string()));
            put("batch_size", batch_size.map(|v| v.to_string()));
            put("lr", lr.map(|v| v.to_string()));
            put("epsilon", epsilon.map(|v| v.to_string()));
            put("lambda", lambda.map(|v| v.to_string()));
            put("network", network.clone());
            put("resume", path(resume));
        }
        Command::Eval { checkpoint, data, variant, overlays } => {
            put("checkpoint", path(checkpoint));
            put("data", path(data));
            put("variant", variant.clone());
            put("overlays", overlays.then(|| "true".to_string()));
        }
        Command::Gradcheck { op, seeds } => {
            put("gradcheck.op", op.clone());
            put("gradcheck.seeds", seeds.map(|v| v.to_string()));
        }
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

/// Runs a parsed command; returns the exit code for non-error outcomes.
pub fn run(cli: Cli) -> Result<i32> {
    configure_threads()?;
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Synth { .. } => cmd_synth(&cfg).map(|_| 0),
        Command::Train { .. } => cmd_train(&cfg).map(|_| 0),
        Command::Eval { variant, .. } => {
            let expected = variant.as_deref().map(str::parse::<Variant>).transpose()?;
            cmd_eval(&cfg, expected).map(|_| 0)
        }
        Command::Gradcheck { .. } => cmd_gradcheck(&cfg).map(|r| if r.passed() { 0 } else { 2 }),
    }
}

fn usage(sub: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    cmd.find_subcommand_mut(sub).map(|c| c.render_usage().to_string()).unwrap_or_default()
}

/// Writes a synthetic dataset; with `test_count > 0` into `train/` and
/// `test/` subdirectories.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.synth.count == 0 {
        return Err(Error::BadParam(format!("--count must be at least 1\n{}", usage("synth"))));
    }
    let out = cfg.out_dir()?;
    if cfg.test_count > 0 {
        let (train, test) = synth_benchmark(&cfg.synth, cfg.test_count)?;
        write_dataset_dir(&train, out.join("train"), Some(&cfg.synth))?;
        write_dataset_dir(&test, out.join("test"), Some(&cfg.synth))?;
    } else {
        let ds = synth_generate(&cfg.synth)?;
        write_dataset_dir(&ds, out, Some(&cfg.synth))?;
    }
    cfg.write_resolved(out)?;
    log::info!("wrote {} synthetic samples to {}", cfg.synth.count, out.display());
    Ok(out.to_path_buf())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn open_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    TrainState::load(path)
}

/// Trains (or resumes) and writes the checkpoint and metrics after every epoch.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainState> {
    let out = cfg.out_dir()?;
    let raw = load_masks_dir(required(&cfg.data, "data")?)?;
    if raw.split != Split::Train {
        return Err(Error::NotTrainSplit);
    }
    let (mut state, train) = match &cfg.resume {
        Some(path) => {
            let mut state = open_checkpoint(path)?;
            state.config.epochs = cfg.train.epochs;
            let mut train = if cfg.augment { crate::dataio::augment(&raw)? } else { raw };
            train.norm = state.norm.clone();
            (state, train)
        }
        None => {
            let train = training_set(&raw, cfg.augment)?;
            (TrainState::new(cfg.train.clone(), &train)?, train)
        }
    };
    let mut resolved = cfg.clone();
    resolved.train = state.config.clone();
    resolved.write_resolved(out)?;

    let samples = prepare(&train);
    while state.epoch < state.config.epochs {
        let e = state.run_epoch(&samples)?;
        println!("epoch {:>3}  loss {:.6}  train dice {:.4}", e.epoch, e.loss, e.dice_train);
        state.save(out.join(CHECKPOINT_FILE))?;
        std::fs::write(out.join(METRICS_FILE), state.metrics_csv())?;
    }
    if state.log.is_empty() || !out.join(CHECKPOINT_FILE).exists() {
        state.save(out.join(CHECKPOINT_FILE))?;
        std::fs::write(out.join(METRICS_FILE), state.metrics_csv())?;
    }
    Ok(state)
}

pub fn summary_text(report: &EvalReport) -> String {
    let mut s = format!(
        "variant = {}\nsamples = {}\nmean_dice = {}\nempty_trimap_bands = {}\n",
        report.variant,
        report.per_sample.len(),
        report.mean_dice,
        report.empty_bands
    );
    for (w, a) in &report.trimap {
        s.push_str(&format!("trimap_accuracy_w{w} = {a}\n"));
    }
    s
}

/// Evaluates a checkpoint; writes summary, per-sample and trimap CSVs, and
/// optional overlays.
pub fn cmd_eval(cfg: &RunConfig, expected: Option<Variant>) -> Result<EvalReport> {
    let out = cfg.out_dir()?;
    let state = open_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let test = load_masks_dir(required(&cfg.data, "data")?)?;
    if test.split != Split::Test {
        log::warn!("evaluating on a `{}` split", test.split);
    }
    let report = evaluate_state(&state, &test, expected)?;
    let mut resolved = cfg.clone();
    resolved.train = state.config.clone();
    resolved.write_resolved(out)?;
    std::fs::write(out.join(SUMMARY_FILE), summary_text(&report))?;
    std::fs::write(out.join(PER_SAMPLE_FILE), report.per_sample_csv())?;
    std::fs::write(out.join(TRIMAP_FILE), report.trimap_csv())?;
    if cfg.overlays {
        let dir = out.join("overlays");
        std::fs::create_dir_all(&dir)?;
        for (s, pred) in test.samples.iter().zip(&report.predictions) {
            let img = render_overlay(&s.image, &s.mask, pred, 4)?;
            img.save(dir.join(format!("{}.png", s.id))).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
    }
    println!("{}: mean test dice {:.4} over {} samples", report.variant, report.mean_dice, report.per_sample.len());
    Ok(report)
}

pub const GT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Grey image upscaled by `scale`, with the groundtruth contour in red and
/// the predicted contour in green (yellow where they coincide).
pub fn render_overlay(image: &Tensor, gt: &[u8], pred: &[u8], scale: u32) -> Result<RgbImage> {
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let contour = |mask: &[u8]| -> Result<Vec<bool>> {
        Ok(boundary(mask, h, w)?.into_iter().zip(mask).map(|(b, &m)| b && m != 0).collect())
    };
    let (gc, pc) = (contour(gt)?, contour(pred)?);
    let scale = scale.max(1);
    let mut img = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let i = (y / scale) as usize * w + (x / scale) as usize;
        let g = (image.data()[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = match (gc[i], pc[i]) {
            (true, true) => Rgb([255, 255, 0]),
            (true, false) => GT_COLOR,
            (false, true) => PRED_COLOR,
            (false, false) => Rgb([g, g, g]),
        };
    }
    Ok(img)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<gradcheck::GradcheckReport> {
    let report = gradcheck::run(cfg.gradcheck_op.as_deref(), cfg.train.seed, cfg.gradcheck_seeds)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &cfg.out {
        cfg.write_resolved(out)?;
        std::fs::write(out.join(GRADCHECK_FILE), &text)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_comments() {
        let cfg =
            RunConfig::from_text("# demo\nvariant = fcn_crf_adv  # inline\n\nepsilon=0.5\ncrf.weights = 0.5, 2\n")
                .unwrap();
        assert_eq!(cfg.train.variant, Variant::FcnCrfAdv);
        assert_eq!(cfg.train.epsilon, 0.5);
        assert_eq!(cfg.train.model.crf.weights, vec![0.5, 2.0]);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::from_text("epsilom = 0.1").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("epsilom") && m.contains("line 1")));
        assert!(matches!(RunConfig::from_text("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn every_listed_key_can_be_read() {
        let cfg = RunConfig::default();
        for key in CONFIG_KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn flags_override_file_values() {
        let cli =
            Cli::try_parse_from(["masscrf", "--seed", "9", "train", "--variant", "fcn_adv", "--epochs", "3"]).unwrap();
        let cfg = resolve(&cli).unwrap();
        assert_eq!((cfg.train.seed, cfg.synth.seed, cfg.train.epochs), (9, 9, 3));
        assert_eq!(cfg.train.variant, Variant::FcnAdv);
    }

    #[test]
    fn overlay_colours_contours() {
        let gt: Vec<u8> = (0..25).map(|i| u8::from((1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)))).collect();
        let img = render_overlay(&Tensor::full(&[1, 1, 5, 5], 0.5), &gt, &vec![0; 25], 1).unwrap();
        assert_eq!(*img.get_pixel(1, 1), GT_COLOR);
        assert_eq!(*img.get_pixel(2, 2), Rgb([128, 128, 128]));
        let both = render_overlay(&Tensor::full(&[1, 1, 5, 5], 0.5), &gt, &gt, 1).unwrap();
        assert_eq!(*both.get_pixel(1, 1), Rgb([255, 255, 0]));
    }
}
