//! `mtlkit` command-line interface.
//!
//! Reports go to stdout as JSON unless an output path is given. Any failure
//! prints one JSON line `{"error": <kind>, "message": <text>}` to stderr and
//! exits with status 1.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mtlkit::analysis::{attention, build_index, retrieval_report};
use mtlkit::checkpoint::Checkpoint;
use mtlkit::config::RunConfig;
use mtlkit::data::{center_crop, load_manifest, synthesize, write_manifest, write_pgm, AugmentConfig, Dataset, SynthSpec};
use mtlkit::eval::{correlation_matrix, cross_validate, ensemble_max, ensemble_mean, MetricReport, ScoreMatrix};
use mtlkit::network::Head;
use mtlkit::objective::TaskMode;
use mtlkit::train::{evaluate, holdout_split, train};
use mtlkit::{Error, Result};

#[derive(Parser)]
#[command(name = "mtlkit", version, about = "Multi-task lesion and body-location classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest + PPM images).
    Synth(SynthArgs),
    /// Train a network from a run config.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint, or re-score saved score files.
    Eval(EvalArgs),
    /// Combine two score files element-wise and report metrics.
    Ensemble(EnsembleArgs),
    /// K-fold cross-validation.
    Cv(CvArgs),
    /// Lesion/location co-occurrence matrix as CSV.
    Correlate(CorrelateArgs),
    /// Nearest-neighbour retrieval on pooled features.
    Retrieve(RetrieveArgs),
    /// Export class activation maps.
    Attention(AttentionArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthesis spec; defaults apply to omitted fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
}

/// Flags that override fields of the run config.
#[derive(Args)]
struct Overrides {
    /// JSON run config; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mtl,
    LesionOnly,
    LocationOnly,
}

impl From<ModeArg> for TaskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mtl => TaskMode::Mtl,
            ModeArg::LesionOnly => TaskMode::LesionOnly,
            ModeArg::LocationOnly => TaskMode::LocationOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Lesion,
    Location,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Lesion => Head::Lesion,
            HeadArg::Location => Head::Location,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: Overrides,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory for the log, checkpoints and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest with the labels (and images, when scoring a checkpoint).
    #[arg(long)]
    data: PathBuf,
    /// Average activations over ten crops instead of the center crop.
    #[arg(long)]
    ten_crop: bool,
    /// Directory for `lesion_scores.csv` and `location_scores.csv`.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    /// Saved lesion scores to evaluate without a checkpoint.
    #[arg(long)]
    lesion_scores: Option<PathBuf>,
    /// Saved location scores to evaluate without a checkpoint.
    #[arg(long)]
    location_scores: Option<PathBuf>,
    /// Heads to report; defaults to both.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Run config supplying the evaluation geometry.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Manifest with the labels.
    #[arg(long)]
    data: PathBuf,
    /// Score kind; inferred from the column names when absent.
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Average instead of taking the maximum.
    #[arg(long)]
    mean: bool,
    /// Where to write the combined scores.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    run: Overrides,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Also run this mode and report the difference from `--mode`.
    #[arg(long, value_enum)]
    compare: Option<ModeArg>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Images to index.
    #[arg(long)]
    data: PathBuf,
    /// Query images; the indexed set when absent.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample ids to render; every sample when absent.
    #[arg(long)]
    id: Vec<String>,
    #[arg(long, value_enum, default_value = "lesion")]
    head: HeadArg,
    /// Class index; the ground-truth class when absent (first positive
    /// lesion, or the true location).
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            // A closed pipe on stdout (e.g. `| head`) is not an error.
            if let Err(e) = writeln!(std::io::stdout(), "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn require_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::BadConfig("no training data: set `data` in the config or pass --data".into()))?;
    load_manifest(path)
}

/// Evaluation geometry: from a run config when given, else defaults with
/// the crop matched to the network input.
fn eval_geometry(config: Option<&Path>, ck: &Checkpoint) -> Result<AugmentConfig> {
    let mut aug = match config {
        Some(p) => RunConfig::load(p)?.augment,
        None => AugmentConfig::default(),
    };
    aug.crop = ck.net.config().input_size;
    Ok(aug)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::BadSpec(e.to_string()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.samples {
        spec.samples = n;
    }
    let ds = synthesize(&spec)?;
    write_manifest(&ds, &a.out)?;
    std::fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(o) = a.out {
        cfg.out_dir = Some(o);
    }
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::BadConfig("no output directory: set `out_dir` or pass --out".into()))?;
    let ds = require_data(&cfg)?;
    let (fit, val) = match &cfg.validation_data {
        Some(p) => (ds, load_manifest(p)?),
        None => holdout_split(&ds, cfg.validation_fraction, cfg.seed),
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let outcome = train(&fit, (!val.is_empty()).then_some(&val), &cfg, &mut |entry| {
        writeln!(log, "{}", serde_json::to_string(entry)?)?;
        log.flush()?;
        Ok(())
    })?;
    outcome.last.save(out.join("final.ckpt"))?;
    outcome.best.save(out.join("best.ckpt"))?;
    eprintln!(
        "{}",
        json!({"epochs": cfg.epochs, "best_epoch": outcome.best_epoch, "out": out.display().to_string()})
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let heads = a.mode.map_or(TaskMode::Mtl, TaskMode::from);
    let report = match &a.checkpoint {
        Some(ck_path) => {
            if a.lesion_scores.is_some() || a.location_scores.is_some() {
                return Err(Error::BadConfig("pass either --checkpoint or saved scores, not both".into()));
            }
            let ck = Checkpoint::load(ck_path)?;
            let ds = load_manifest(&a.data)?;
            let aug = eval_geometry(a.config.as_deref(), &ck)?;
            let (preds, report) = evaluate(&ck, &ds, &aug, a.ten_crop, heads)?;
            if let Some(dir) = &a.scores_out {
                std::fs::create_dir_all(dir)?;
                preds.lesion.write_csv(dir.join("lesion_scores.csv"))?;
                preds.location.write_csv(dir.join("location_scores.csv"))?;
            }
            report
        }
        None => {
            if a.lesion_scores.is_none() && a.location_scores.is_none() {
                return Err(Error::BadConfig("pass --checkpoint or at least one saved score file".into()));
            }
            let ds = load_manifest(&a.data)?;
            let les = a.lesion_scores.as_ref().map(|p| ScoreMatrix::read_csv(p, Head::Lesion)).transpose()?;
            let loc = a.location_scores.as_ref().map(|p| ScoreMatrix::read_csv(p, Head::Location)).transpose()?;
            MetricReport::from_scores(
                les.as_ref().filter(|_| heads.trains_lesions()),
                loc.as_ref().filter(|_| heads.trains_locations()),
                &ds,
            )?
        }
    };
    write_json(&report, a.out.as_deref())
}

fn cmd_ensemble(a: EnsembleArgs) -> Result<()> {
    let ds = load_manifest(&a.data)?;
    let head = match a.head {
        Some(h) => h.into(),
        None => {
            let probe = ScoreMatrix::read_csv(&a.a, Head::Lesion)?;
            if probe.classes == ds.lesion_names {
                Head::Lesion
            } else if probe.classes == ds.location_names {
                Head::Location
            } else {
                return Err(Error::MatrixMismatch("score columns match neither lesion nor location names".into()));
            }
        }
    };
    let (x, y) = (ScoreMatrix::read_csv(&a.a, head)?, ScoreMatrix::read_csv(&a.b, head)?);
    let combined = if a.mean { ensemble_mean(&x, &y)? } else { ensemble_max(&x, &y)? };
    if let Some(p) = &a.scores_out {
        combined.write_csv(p)?;
    }
    let report = match head {
        Head::Lesion => MetricReport::from_scores(Some(&combined), None, &ds)?,
        Head::Location => MetricReport::from_scores(None, Some(&combined), &ds)?,
    };
    write_json(&report, a.out.as_deref())
}

fn cmd_cv(a: CvArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    let mode = a.mode.map_or(cfg.mode, TaskMode::from);
    let ds = require_data(&cfg)?;
    let primary = cross_validate(&ds, &cfg, mode)?;
    let value = match a.compare.map(TaskMode::from) {
        None => serde_json::to_value(&primary)?,
        Some(other) => {
            let baseline = cross_validate(&ds, &cfg, other)?;
            let diff = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x - y);
            json!({
                "runs": [primary, baseline],
                "delta": {
                    "map_class": diff(primary.mean.map_class, baseline.mean.map_class),
                    "map_image": diff(primary.mean.map_image, baseline.mean.map_image),
                    "top1": diff(primary.mean.top1, baseline.mean.top1),
                    "top3": diff(primary.mean.top3, baseline.mean.top3),
                },
            })
        }
    };
    write_json(&value, a.out.as_deref())
}

fn cmd_correlate(a: CorrelateArgs) -> Result<()> {
    let ds = load_manifest(&a.data)?;
    let csv = correlation_matrix(&ds).to_csv(&ds.lesion_names, &ds.location_names)?;
    match a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => {
            if let Err(e) = std::io::stdout().write_all(csv.as_bytes()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let aug = eval_geometry(a.config.as_deref(), &ck)?;
    let ds = load_manifest(&a.data)?;
    let index = build_index(&ck.net, &ds, &ck.channel_means, &aug)?;
    let queries = match &a.queries {
        Some(p) => build_index(&ck.net, &load_manifest(p)?, &ck.channel_means, &aug)?,
        None => index.clone(),
    };
    write_json(&retrieval_report(&index, &queries, a.k)?, a.out.as_deref())
}

fn cmd_attention(a: AttentionArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let aug = eval_geometry(a.config.as_deref(), &ck)?;
    let ds = load_manifest(&a.data)?;
    let head: Head = a.head.into();
    let names = match head {
        Head::Lesion => &ds.lesion_names,
        Head::Location => &ds.location_names,
    };
    let samples: Vec<_> = if a.id.is_empty() {
        ds.samples.iter().collect()
    } else {
        a.id.iter()
            .map(|id| {
                ds.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::UnknownLabel(format!("sample id {id}")))
            })
            .collect::<Result<_>>()?
    };
    std::fs::create_dir_all(&a.out)?;
    for s in samples {
        let class = match (a.class, head) {
            (Some(c), _) => c,
            (None, Head::Lesion) => s.lesions.iter().position(|&b| b == 1).expect("validated sample"),
            (None, Head::Location) => s.location - 1,
        };
        let view = center_crop(&s.image, &aug, &ck.channel_means)?;
        let map = attention(&ck.net, &view, head, class, true)?;
        let side = ck.net.config().input_size;
        let stem = format!("{}_{}_{class}", s.id, head.as_str());
        write_pgm(a.out.join(format!("{stem}.pgm")), side, side, map.upsampled.as_deref().expect("requested"))?;
        let sidecar = json!({
            "id": s.id,
            "head": head,
            "class_index": class,
            "class_name": names.get(class),
            "map_height": map.height,
            "map_width": map.width,
            "image": format!("{stem}.pgm"),
            "image_size": side,
            "map": map.map,
        });
        write_json(&sidecar, Some(&a.out.join(format!("{stem}.json"))))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Attention(a) => cmd_attention(a),
    }
}

fn fail(kind: &str, message: String) -> ! {
    eprintln!("{}", json!({"error": kind, "message": message}));
    std::process::exit(1);
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => fail("Usage", e.to_string().lines().next().unwrap_or("invalid arguments").to_string()),
    };
    if let Err(e) = run(cli) {
        fail(e.kind(), e.to_string());
    }
}
