//! Command-line front end: `synth`, `train`, `eval`, `gradcheck` and
//! `spectrogram`, sharing one config resolution path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::audio::{wav_spectrogram, BandScale, Normalization, SpectrogramConfig};
use crate::config::RunConfig;
use crate::data::{load_split, synth_generate, write_features, SubSequence};
use crate::error::Error;
use crate::gradients::{
    compare, finite_diff_grads, kink_exposure, loss_and_grads, seeded_batch, GradCheckReport,
    DEFAULT_STEP, DEFAULT_TOL,
};
use crate::metrics::{evaluate_split, predict_split, targets_of, CccReport};
use crate::model::{io, Dims, FusionModel, Model, ModelKind, Target};
use crate::training::{train_from, TrainHistory};

/// Exit status for a failed validation or check.
pub const EXIT_FAILURE: u8 = 1;
/// Exit status for a usage or configuration error.
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "avfusion", version, about = "Audio-visual fusion for valence/arousal regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic complementary-modality dataset.
    Synth(SynthArgs),
    /// Train a fusion model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split with clipped predictions.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Compute the normalised log-power spectrogram of a wave file.
    Spectrogram(SpectrogramArgs),
}

/// Flags mirroring the config keys. Flags beat the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seq_len: Option<String>,
    #[arg(long)]
    pub d_a: Option<String>,
    #[arg(long)]
    pub d_v: Option<String>,
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub head_hidden: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub beta1: Option<String>,
    #[arg(long)]
    pub beta2: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub freeze_correlation: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub train_sequences: Option<String>,
    #[arg(long)]
    pub val_sequences: Option<String>,
    #[arg(long)]
    pub test_sequences: Option<String>,
    #[arg(long)]
    pub subseqs_per_sequence: Option<String>,
    #[arg(long)]
    pub ar_coef: Option<String>,
    #[arg(long)]
    pub noise_sigma: Option<String>,
    #[arg(long)]
    pub mask_prob: Option<String>,
    #[arg(long)]
    pub train_manifest: Option<String>,
    #[arg(long)]
    pub val_manifest: Option<String>,
    #[arg(long)]
    pub eval_manifest: Option<String>,
    /// Output directory.
    #[arg(long, env = "AVFUSION_OUT_DIR")]
    pub out_dir: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("model", &self.model),
            ("target", &self.target),
            ("seq_len", &self.seq_len),
            ("d_a", &self.d_a),
            ("d_v", &self.d_v),
            ("k", &self.k),
            ("head_hidden", &self.head_hidden),
            ("lr", &self.lr),
            ("optimizer", &self.optimizer),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("eps", &self.eps),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("batch_size", &self.batch_size),
            ("dropout", &self.dropout),
            ("max_epochs", &self.max_epochs),
            ("patience", &self.patience),
            ("freeze_correlation", &self.freeze_correlation),
            ("seed", &self.seed),
            ("train_sequences", &self.train_sequences),
            ("val_sequences", &self.val_sequences),
            ("test_sequences", &self.test_sequences),
            ("subseqs_per_sequence", &self.subseqs_per_sequence),
            ("ar_coef", &self.ar_coef),
            ("noise_sigma", &self.noise_sigma),
            ("mask_prob", &self.mask_prob),
            ("train_manifest", &self.train_manifest),
            ("val_manifest", &self.val_manifest),
            ("eval_manifest", &self.eval_manifest),
            ("out_dir", &self.out_dir),
        ]
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, UsageError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).map_err(|e| UsageError(e.to_string()))?,
            None => RunConfig::default(),
        };
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)
                    .map_err(|e| UsageError(format!("--{}: {e}", key.replace('_', "-"))))?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Parameter file to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Sub-sequences in the check batch.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
    /// Perturb one analytic gradient before comparing.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SpectrogramArgs {
    /// Mono 16-bit or float wave file.
    pub input: PathBuf,
    /// Output AVF1 file (default: `<out_dir>/<input stem>.avf`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Use a mel filterbank instead of equal-width bands.
    #[arg(long)]
    pub mel: bool,
    /// Normalise each band separately.
    #[arg(long)]
    pub per_band: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// A bad flag, config key or config value.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// What a command produced: text for stdout and whether its check passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub message: String,
    pub success: bool,
}

impl Outcome {
    fn ok(message: String) -> Self {
        Outcome {
            message,
            success: true,
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a.config.resolve()?),
        Command::Train(a) => cmd_train(&a.config.resolve()?),
        Command::Eval(a) => cmd_eval(&a.config.resolve()?, &a.checkpoint),
        Command::Gradcheck(a) => {
            let cfg = a.config.resolve()?;
            let report = cmd_gradcheck(&cfg, a.batch, a.tol, a.step, a.inject_fault)?;
            Ok(Outcome {
                success: report.passed(),
                message: report.to_string(),
            })
        }
        Command::Spectrogram(a) => {
            let cfg = a.config.resolve()?;
            let spec = SpectrogramConfig {
                band_scale: if a.mel { BandScale::Mel } else { BandScale::Linear },
                normalization: if a.per_band {
                    Normalization::PerBand
                } else {
                    Normalization::Global
                },
                ..SpectrogramConfig::default()
            };
            let out = match a.output {
                Some(p) => p,
                None => {
                    let stem = a.input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    cfg.out_dir.join(format!("{stem}.avf"))
                }
            };
            let (rows, cols) = cmd_spectrogram(&cfg, &a.input, &out, &spec)?;
            Ok(Outcome::ok(format!("{rows} x {cols}\nwrote {}", out.display())))
        }
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Generates the synthetic dataset under `out_dir`.
pub fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    cfg.synth.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let out = synth_generate(&cfg.synth, &cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let mut msg = out.report.clone();
    for (split, path, _) in &out.manifests {
        writeln!(msg, "manifest {split}: {}", path.display()).ok();
    }
    Ok(Outcome::ok(msg))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| UsageError(format!("missing --{} (or `{key}` in the config)", key.replace('_', "-"))).into())
}

fn load(path: &Path) -> anyhow::Result<(crate::data::DatasetManifest, Vec<SubSequence>)> {
    if !path.is_file() {
        bail!("manifest not found: {}", path.display());
    }
    let (m, subs) = load_split(path).with_context(|| format!("loading {}", path.display()))?;
    if subs.is_empty() {
        bail!("{} yields no complete sub-sequences", path.display());
    }
    Ok((m, subs))
}

fn extension(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Jca => "jcap",
        ModelKind::Concat => "conp",
        ModelKind::VanillaCa => "vcap",
    }
}

/// Summary written after training; the `val` block is the same text
/// `eval` writes for the best checkpoint on the validation split.
pub fn train_summary(cfg: &RunConfig, history: &TrainHistory, train: &CccReport, val: &CccReport) -> String {
    let mut s = String::new();
    writeln!(s, "model={}", cfg.model).ok();
    writeln!(s, "target={}", cfg.train.target).ok();
    writeln!(s, "epochs_run={}", history.epochs.len()).ok();
    writeln!(s, "best_epoch={}", history.best_epoch).ok();
    writeln!(s, "best_val_ccc={:.17e}", history.best_val_ccc).ok();
    writeln!(s, "[train]").ok();
    s.push_str(&train.to_records());
    writeln!(s, "[val]").ok();
    s.push_str(&val.to_records());
    s
}

/// Trains on `train_manifest`, early-stopping on `val_manifest`.
///
/// Writes `checkpoints/epoch-NNN.<ext>`, `best.<ext>`, `train_log.txt`,
/// `train_summary.txt` and the resolved config under `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let train_path = required(&cfg.train_manifest, "train_manifest")?;
    let val_path = required(&cfg.val_manifest, "val_manifest")?;
    let (tm, train_set) = load(train_path)?;
    let (vm, val_set) = load(val_path)?;
    if (tm.seq_len, tm.d_a, tm.d_v) != (vm.seq_len, vm.d_a, vm.d_v) {
        bail!(
            "train manifest dims (L={}, d_a={}, d_v={}) differ from val (L={}, d_a={}, d_v={})",
            tm.seq_len, tm.d_a, tm.d_v, vm.seq_len, vm.d_a, vm.d_v
        );
    }
    let mut cfg = cfg.clone();
    cfg.synth.seq_len = tm.seq_len;
    cfg.synth.d_a = tm.d_a;
    cfg.synth.d_v = tm.d_v;
    cfg.train.validate()?;
    let dims = cfg.dims()?;
    let out = cfg.out_dir.clone();
    let ckpt_dir = out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    cfg.write_resolved(&out)?;
    let ext = extension(cfg.model);

    let model = Model::xavier(cfg.model, dims, cfg.train.head_spec(), cfg.train.seed)?;
    let outcome = train_from(model, &train_set, &val_set, &cfg.train, |rec, m| {
        io::save(m, &ckpt_dir.join(format!("epoch-{:03}.{ext}", rec.epoch)))
    })?;
    io::save(&outcome.best, &out.join(format!("best.{ext}")))?;
    write(&out.join("train_log.txt"), &outcome.history.to_log())?;
    let train_report = evaluate_split(&outcome.best, &train_set, cfg.train.target)?;
    let val_report = evaluate_split(&outcome.best, &val_set, cfg.train.target)?;
    let summary = train_summary(&cfg, &outcome.history, &train_report, &val_report);
    write(&out.join("train_summary.txt"), &summary)?;
    Ok(Outcome::ok(summary))
}

/// Evaluates `checkpoint` on `eval_manifest`; writes `eval_report.txt`
/// and `predictions.csv` under `out_dir`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<Outcome> {
    let data_path = required(&cfg.eval_manifest, "eval_manifest")?;
    let model = io::load(checkpoint)?;
    let (m, data) = load(data_path)?;
    let dims = model.dims();
    if (dims.seq_len, dims.d_a, dims.d_v) != (m.seq_len, m.d_a, m.d_v) {
        bail!(
            "checkpoint expects L={} d_a={} d_v={} but {} has L={} d_a={} d_v={}",
            dims.seq_len,
            dims.d_a,
            dims.d_v,
            data_path.display(),
            m.seq_len,
            m.d_a,
            m.d_v
        );
    }
    let target = if model.head().output_dim() == 2 {
        Target::Both
    } else if cfg.train.target == Target::Both {
        bail!("checkpoint has one output but target=both was requested");
    } else {
        cfg.train.target
    };
    let report = evaluate_split(&model, &data, target)?;
    let preds = predict_split(&model, &data)?;
    let targets = targets_of(target);
    let mut csv = String::from("id,clip");
    for t in &targets {
        write!(csv, ",pred_{t},label_{t}").ok();
    }
    csv.push('\n');
    let mut row = 0;
    for s in &data {
        for c in 0..s.clips() {
            write!(csv, "{},{c}", s.id).ok();
            for (j, t) in targets.iter().enumerate() {
                write!(csv, ",{:.17e},{:.17e}", preds[j][row], s.labels(*t)[c]).ok();
            }
            csv.push('\n');
            row += 1;
        }
    }
    ensure_dir(&cfg.out_dir)?;
    let mut resolved = cfg.clone();
    resolved.train.target = target;
    resolved.model = model.kind();
    resolved.write_resolved(&cfg.out_dir)?;
    write(&cfg.out_dir.join("eval_report.txt"), &report.to_records())?;
    write(&cfg.out_dir.join("predictions.csv"), &csv)?;
    Ok(Outcome::ok(format!("split={}\n{report}", m.split)))
}

/// Gradient check on a seeded instance with the configured dims. With
/// `inject_fault` the output bias gradient is perturbed first; no ReLU
/// sits downstream of it, so the check can never excuse it as a kink.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    batch: usize,
    tol: f64,
    step: f64,
    inject_fault: bool,
) -> anyhow::Result<GradCheckReport> {
    if batch == 0 {
        return Err(UsageError("--batch must be >= 1".into()).into());
    }
    let dims: Dims = cfg.dims()?;
    let model = Model::xavier(cfg.model, dims, cfg.train.head_spec(), cfg.train.seed)?;
    let data = seeded_batch(dims, batch, cfg.train.seed.wrapping_add(1))?;
    let target = cfg.train.target;
    let mut analytic = loss_and_grads(&model, &data, target, None)?;
    if inject_fault {
        let last = analytic.grads.len() - 1;
        let g = &mut analytic.grads[last].as_mut_slice()[0];
        *g += 1.0 + g.abs();
    }
    let numeric = finite_diff_grads(&model, &data, target, None, step)?;
    let exposed = kink_exposure(&model, &data, None)?;
    let report = compare(&analytic, &numeric, &exposed, tol, step);
    if !cfg.out_dir.as_os_str().is_empty() {
        ensure_dir(&cfg.out_dir)?;
        cfg.write_resolved(&cfg.out_dir)?;
        write(&cfg.out_dir.join("gradcheck_report.txt"), &report.to_records())?;
    }
    Ok(report)
}

/// Spectrogram of a wave file written as AVF1 (bands × frames).
pub fn cmd_spectrogram(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    spec: &SpectrogramConfig,
) -> anyhow::Result<(usize, usize)> {
    let m = wav_spectrogram(input, spec)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_features(output, &m)?;
    cfg.write_resolved(output.parent().unwrap_or(Path::new(".")))?;
    Ok(m.shape())
}

/// Maps an error to its exit status.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}
