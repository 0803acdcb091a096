//! Command-line front end behind the `selgan` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Failures print a
//! single JSON line on stderr. `SELGAN_LOG` sets the log filter.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::dump_selection;
use crate::classifier::{FitOptions, GridClassifier};
use crate::config::FileConfig;
use crate::data::{generate_synthetic, DataSource, SynthSpec};
use crate::error::Error;
use crate::image::{ImageTensor, PairedSample, Palette, SemanticMap};
use crate::metrics::{evaluate, Classifier, EvalSet, Metric, PerImageRow};
use crate::model::build_ablation;
use crate::trainer::{
    attention_sweep, format_table, run_ablation, run_training, steps_per_epoch, Experiment, RunOptions, RunSetup,
    TrainState, LATEST_CHECKPOINT,
};

pub const LOG_ENV: &str = "SELGAN_LOG";

#[derive(Parser, Debug)]
#[command(name = "selgan", version, about = "Cross-view image translation with attention selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a CSV loss log.
    Train(TrainArgs),
    /// Generate target views for one condition image and several semantic maps.
    Generate(GenerateArgs),
    /// Score generated images against references.
    Evaluate(EvaluateArgs),
    /// Train and score ablation baselines.
    Ablate(AblateArgs),
    /// Train baseline F at several attention widths.
    Sweep(SweepArgs),
    /// Write intermediate, attention and uncertainty maps for one input.
    DumpAttention(DumpArgs),
    /// Write the synthetic dataset to disk.
    Synth(SynthArgs),
    /// Fit the metric classifier on a dataset.
    TrainClassifier(ClassifierArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config file, or the presets `default` / `desk`.
    #[arg(long)]
    pub config: String,
    /// Manifest path or `synthetic:seed=7,n=8,size=64,classes=4`.
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Overrides `run.epochs`.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Overrides `run.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from `<out>/latest.sgck` when present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub semantic: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the coarse image, reconstructed semantics and selection maps.
    #[arg(long)]
    pub dump_internals: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub real_dir: PathBuf,
    #[arg(long)]
    pub fake_dir: PathBuf,
    /// Comma-separated subset of ssim,psnr,sd,kl,is,topk,seg.
    #[arg(long, value_delimiter = ',', default_value = "ssim,psnr,sd,kl,is,topk")]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    /// Reference semantic maps, paired by file name (for `seg`).
    #[arg(long, requires_all = ["fake_semantic_dir", "palette"])]
    pub real_semantic_dir: Option<PathBuf>,
    #[arg(long)]
    pub fake_semantic_dir: Option<PathBuf>,
    /// Palette as a JSON list of `[r, g, b]`.
    #[arg(long)]
    pub palette: Option<String>,
    /// Directory for `metrics.json` and `per_image.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HarnessArgs {
    #[arg(long, default_value = "desk")]
    pub config: String,
    #[arg(long, default_value = "synthetic:seed=7,n=8,size=64,classes=4")]
    pub data: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `run.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Directory for the results table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "A,B,C,D,E,F,G,H")]
    pub baselines: Vec<String>,
    #[command(flatten)]
    pub common: HarnessArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long = "n", value_delimiter = ',', default_value = "0,1,5,10")]
    pub n_values: Vec<usize>,
    #[command(flatten)]
    pub common: HarnessArgs,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub semantic: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// e.g. `synthetic:seed=7,n=64,size=64,classes=4`.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub iterations: usize,
}

/// Outcome of one command.
#[derive(Debug, Default, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

/// Failure class of a command.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// The single-line JSON diagnostic.
    pub fn to_json(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({ "error": kind, "message": msg }).to_string()
    }
}

type CmdResult = Result<Vec<PathBuf>, CliError>;

fn load_config(name: &str) -> Result<FileConfig, CliError> {
    Ok(match name {
        "default" => FileConfig::default(),
        "desk" => FileConfig::desk(),
        path => FileConfig::load(Path::new(path))?,
    })
}

fn load_data(spec: &str) -> Result<(Vec<PairedSample>, Palette), CliError> {
    let src = DataSource::parse(spec)?;
    Ok(src.load()?)
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let (samples, _) = load_data(&a.data)?;
    let size = samples.first().map(|s| (s.height(), s.width())).unwrap_or((64, 64));
    let latest = a.out.join(LATEST_CHECKPOINT);
    let mut state = if a.resume && latest.exists() {
        let state = TrainState::load(&latest)?;
        if state.seed != a.seed {
            return Err(CliError::Usage(format!(
                "checkpoint was trained with seed {}, not {}",
                state.seed, a.seed
            )));
        }
        state
    } else {
        TrainState::new(&RunSetup {
            model: cfg.model.clone(),
            attention: cfg.attention.clone(),
            train: cfg.train.clone(),
            wiring: cfg.wiring()?,
            augment: cfg.augment,
            image_size: size,
            seed: a.seed,
        })?
    };
    let epochs = a.epochs.or(if a.steps.is_some() { None } else { cfg.run.epochs });
    let total_steps = match epochs {
        Some(e) => e * steps_per_epoch(samples.len(), cfg.run.batch_size),
        None => a.steps.unwrap_or(cfg.run.steps),
    };
    let trace = run_training(
        &mut state,
        &samples,
        &RunOptions {
            total_steps,
            batch_size: cfg.run.batch_size,
            checkpoint_every: cfg.run.checkpoint_every,
            out_dir: Some(a.out.clone()),
        },
    )?;
    print_json(&serde_json::json!({
        "steps": state.step,
        "final_total": trace.last().map(|(_, b)| b.total),
        "checkpoint": latest,
    }));
    Ok(vec![latest, a.out.join(crate::trainer::LOG_FILE)])
}

fn placeholder_palette() -> Palette {
    Palette(vec![[0, 0, 0]])
}

fn input_sample(image: &Path, semantic: &Path, size: (usize, usize)) -> Result<PairedSample, CliError> {
    let cond = ImageTensor::load_png(image)?;
    let sem = ImageTensor::load_png(semantic)?;
    for (p, im) in [(image, &cond), (semantic, &sem)] {
        if (im.height(), im.width()) != size {
            return Err(CliError::Runtime(format!(
                "{} is {}x{}, the checkpoint expects {}x{}",
                p.display(),
                im.height(),
                im.width(),
                size.0,
                size.1
            )));
        }
    }
    let id = semantic.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PairedSample::new(cond.clone(), cond, SemanticMap::new(sem, placeholder_palette())?, id)?)
}

fn cmd_generate(a: &GenerateArgs) -> CmdResult {
    let state = TrainState::load(&a.checkpoint)?;
    let model = &state.model;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = Vec::new();
    for sem in &a.semantic {
        let sample = input_sample(&a.image, sem, model.image_size)?;
        let out = model.generate(std::slice::from_ref(&sample))?.remove(0);
        let stem = &sample.sample_id;
        let path = a.out.join(format!("{stem}.png"));
        out.final_image().save_png(&path)?;
        written.push(path);
        if a.dump_internals {
            let coarse = a.out.join(format!("{stem}_coarse.png"));
            out.coarse_image.save_png(&coarse)?;
            written.push(coarse);
            for (tag, map) in [("semantic_coarse", &out.recon_semantic), ("semantic_refined", &out.refined_semantic)] {
                if let Some(m) = map {
                    let p = a.out.join(format!("{stem}_{tag}.png"));
                    m.image.save_png(&p)?;
                    written.push(p);
                }
            }
            if let Some(sel) = model.selection_output(&sample)? {
                written.extend(dump_selection(&sel, &a.out.join(format!("{stem}_internals")))?);
            }
        }
    }
    print_json(&serde_json::json!({ "written": written }));
    Ok(written)
}

fn cmd_dump(a: &DumpArgs) -> CmdResult {
    let state = TrainState::load(&a.checkpoint)?;
    let sample = input_sample(&a.image, &a.semantic, state.model.image_size)?;
    let sel = state.model.selection_output(&sample)?.ok_or_else(|| {
        CliError::Runtime(format!(
            "baseline {} has no attention selection to dump",
            state.model.wiring.baseline
        ))
    })?;
    let written = dump_selection(&sel, &a.out)?;
    print_json(&serde_json::json!({ "written": written }));
    Ok(written)
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), p);
            }
        }
    }
    Ok(out)
}

fn paired(real: &Path, fake: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    let (r, f) = (png_files(real)?, png_files(fake)?);
    let orphans: Vec<String> = r
        .keys()
        .filter(|k| !f.contains_key(*k))
        .map(|k| format!("{}", real.join(k).display()))
        .chain(f.keys().filter(|k| !r.contains_key(*k)).map(|k| format!("{}", fake.join(k).display())))
        .collect();
    if !orphans.is_empty() {
        return Err(CliError::Usage(format!("unpaired files: {}", orphans.join(", "))));
    }
    Ok(r.into_iter().map(|(k, p)| (k.clone(), p, f[&k].clone())).collect())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    let metrics = a.metrics.iter().map(|m| m.parse::<Metric>()).collect::<Result<Vec<_>, _>>()?;
    let pairs = paired(&a.real_dir, &a.fake_dir)?;
    let mut ids = Vec::new();
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for (id, r, f) in &pairs {
        ids.push(id.clone());
        real.push(ImageTensor::load_png(r)?);
        fake.push(ImageTensor::load_png(f)?);
    }
    let (mut real_sem, mut fake_sem) = (Vec::new(), Vec::new());
    if let (Some(rd), Some(fd), Some(pal)) = (&a.real_semantic_dir, &a.fake_semantic_dir, &a.palette) {
        let palette: Palette = serde_json::from_str(pal).map_err(|e| CliError::Usage(format!("--palette: {e}")))?;
        for (_, r, f) in paired(rd, fd)? {
            real_sem.push(SemanticMap::new(ImageTensor::load_png(&r)?, palette.clone())?);
            fake_sem.push(SemanticMap::new(ImageTensor::load_png(&f)?, palette.clone())?);
        }
    }
    let clf = a.classifier.as_deref().map(GridClassifier::load).transpose()?;
    let set = EvalSet {
        ids,
        real,
        fake,
        real_semantic: real_sem,
        fake_semantic: fake_sem,
        classifier: clf.as_ref().map(|c| c as &dyn Classifier),
        inception_splits: a.splits,
    };
    let (report, rows) = evaluate(&set, &metrics)?;
    let json = serde_json::to_value(&report).expect("report serialises");
    print_json(&json);
    let mut written = Vec::new();
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let jp = out.join("metrics.json");
        std::fs::write(&jp, serde_json::to_string_pretty(&json).expect("json")).map_err(|e| Error::io(&jp, e))?;
        let cp = out.join("per_image.csv");
        let mut csv = format!("{}\n", PerImageRow::CSV_HEADER);
        for r in &rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(&cp, csv).map_err(|e| Error::io(&cp, e))?;
        written.extend([jp, cp]);
    }
    Ok(written)
}

fn experiment(h: &HarnessArgs) -> Result<(Experiment, Vec<PairedSample>), CliError> {
    let cfg = load_config(&h.config)?;
    let (samples, _) = load_data(&h.data)?;
    let exp = Experiment {
        model: cfg.model,
        attention: cfg.attention,
        train: cfg.train,
        augment: cfg.augment,
        steps: h.steps.unwrap_or(cfg.run.steps),
        batch_size: cfg.run.batch_size,
        seed: h.seed,
    };
    Ok((exp, samples))
}

fn emit_table(h: &HarnessArgs, name: &str, table: String) -> CmdResult {
    print!("{table}");
    match &h.out {
        Some(out) => {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let p = out.join(name);
            std::fs::write(&p, table).map_err(|e| Error::io(&p, e))?;
            Ok(vec![p])
        }
        None => Ok(Vec::new()),
    }
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    let ids = a
        .baselines
        .iter()
        .map(|b| {
            let mut chars = b.trim().chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => build_ablation(c).map(|w| w.baseline).map_err(CliError::from),
                _ => Err(CliError::Usage(format!("unknown baseline `{b}` (expected A..H)"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (exp, samples) = experiment(&a.common)?;
    let rows = run_ablation(&exp, &ids, &samples, &samples)?;
    emit_table(&a.common, "ablation.csv", format_table("baseline", &rows))
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    let (exp, samples) = experiment(&a.common)?;
    let rows = attention_sweep(&exp, &a.n_values, &samples, &samples)?;
    emit_table(&a.common, "sweep.csv", format_table("n", &rows))
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let spec = SynthSpec::parse(&a.spec)?;
    let m = generate_synthetic(&spec, &a.out)?;
    let path = a.out.join(crate::data::MANIFEST_FILE);
    print_json(&serde_json::json!({ "manifest": path, "samples": m.entries.len() }));
    Ok(vec![path])
}

fn cmd_train_classifier(a: &ClassifierArgs) -> CmdResult {
    let (samples, _) = load_data(&a.data)?;
    let clf = GridClassifier::fit_samples(
        &samples,
        FitOptions {
            iterations: a.iterations,
            ..FitOptions::default()
        },
    )?;
    clf.save(&a.out)?;
    print_json(&serde_json::json!({ "classifier": a.out, "n_classes": clf.n_classes }));
    Ok(vec![a.out.clone()])
}

/// Runs an already parsed command.
pub fn execute(cli: &Cli) -> Result<CommandResult, CliError> {
    let artifacts = match &cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Generate(a) => cmd_generate(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::DumpAttention(a) => cmd_dump(a)?,
        Command::Synth(a) => cmd_synth(a)?,
        Command::TrainClassifier(a) => cmd_train_classifier(a)?,
    };
    Ok(CommandResult { exit_code: 0, artifacts })
}

/// Parses `args` (program name first), runs the command and reports
/// failures on stderr.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return CommandResult::default();
            }
            let msg = e.to_string();
            let detail: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            let text = detail.join(" ");
            let text = text.trim_start_matches("error: ");
            let err = CliError::Usage(if text.is_empty() { "invalid arguments".into() } else { text.to_string() });
            eprintln!("{}", err.to_json());
            return CommandResult {
                exit_code: err.exit_code(),
                artifacts: Vec::new(),
            };
        }
    };
    match execute(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", e.to_json());
            CommandResult {
                exit_code: e.exit_code(),
                artifacts: Vec::new(),
            }
        }
    }
}

/// Entry point of the binary.
pub fn main_from_env() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    run(std::env::args_os()).exit_code
}
