use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use promptmoe::checkpoint::{self, CheckpointMeta};
use promptmoe::harness::{self, ExperimentSpec, Stage};
use promptmoe::model::{ModelConfig, MoeModel};
use promptmoe::param::Parameters;
use promptmoe::synth::{self, cap_per_class, kshot_support, Dataset, DatasetSpec};
use promptmoe::train::{self, AdaptationRegime, PretextConfig, SpecSet, TrainConfig};
use promptmoe::{Error, Result};

#[derive(Parser)]
#[command(name = "promptmoe", version, about = "Prompt adaptation of a mixture-of-experts spectrogram transformer")]
struct Cli {
    /// Root directory for datasets, checkpoints and tables.
    #[arg(long, env = "PROMPTMOE_OUT", default_value = "runs", global = true)]
    out: PathBuf,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build source and target datasets.
    Synth,
    /// Pretext-pretrain the three experts on the source slices.
    Pretrain {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// One adaptation run on the target task.
    Adapt(AdaptArgs),
    /// Data-scale sweep over per-class caps.
    StageA(SweepArgs),
    /// Few-shot sweep over support sizes.
    StageB(SweepArgs),
    /// Prompt-length sweep.
    Ablation(SweepArgs),
    /// Trainable parameter counts per regime.
    ReportParams {
        #[arg(long, default_value = "rfprompt")]
        regime: String,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
    },
    /// Write fused embeddings of the target test split as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint_in: PathBuf,
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Score a checkpoint on the target test split.
    Eval {
        #[arg(long)]
        checkpoint_in: PathBuf,
    },
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, default_value = "rfprompt")]
    regime: String,
    /// Per-class cap on the training split.
    #[arg(long, conflicts_with = "shots")]
    cap: Option<usize>,
    /// Exactly K training records per class.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, default_value_t = 16)]
    prompt_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
}

fn default_source() -> DatasetSpec {
    DatasetSpec::default_source()
}

fn default_target() -> DatasetSpec {
    DatasetSpec::default_target()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    pretext: PretextConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_source")]
    source: DatasetSpec,
    #[serde(default = "default_target")]
    target: DatasetSpec,
    #[serde(default)]
    seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretext: PretextConfig::default(),
            train: TrainConfig::default(),
            source: default_source(),
            target: default_target(),
            seed: 0,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

struct Ctx {
    out: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn pretext_path(&self) -> PathBuf {
        self.out.join("pretext.ckpt")
    }

    /// Loads a saved dataset, building and saving it on first use.
    fn dataset(&self, spec: &DatasetSpec) -> Result<Dataset> {
        let dir = self.data_dir();
        if dir.join(format!("{}.manifest.json", spec.name)).exists() {
            let ds = synth::load_dataset(&dir, &spec.name)?;
            if ds.spec == *spec {
                return Ok(ds);
            }
            info!("{} on disk was built from a different spec; rebuilding", spec.name);
        }
        let ds = synth::build_dataset(spec)?;
        synth::save_dataset(&ds, &dir)?;
        Ok(ds)
    }

    fn base_model(&self, path: Option<&Path>) -> Result<MoeModel> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| self.pretext_path());
        if !path.exists() {
            return Err(Error::Data(format!(
                "checkpoint {} not found; run `pretrain` first",
                path.display()
            )));
        }
        Ok(checkpoint::load(&path)?.0)
    }
}

fn print_metrics(label: &str, r: &harness::MetricsReport) {
    println!(
        "{label}: accuracy {:.4}, macro F1 {:.4}, trainable {} of {} ({:.4}%)",
        r.accuracy,
        r.macro_f1,
        r.trainable_params,
        r.total_params,
        100.0 * r.trainable_fraction
    );
    for (c, row) in r.confusion.iter().enumerate() {
        println!("  {c}: {row:?}  P {:.3} R {:.3}", r.precision[c], r.recall[c]);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx { out: cli.out, cfg };
    match cli.command {
        Command::Synth => {
            for spec in [&ctx.cfg.source, &ctx.cfg.target] {
                let ds = synth::build_dataset(spec)?;
                synth::save_dataset(&ds, &ctx.data_dir())?;
                println!("{}: {} records, {} classes", spec.name, ds.records.len(), ds.n_classes());
            }
        }
        Command::Pretrain {
            seed,
            epochs,
            checkpoint_out,
        } => {
            let seed = seed.unwrap_or(ctx.cfg.seed);
            let mut pc = ctx.cfg.pretext.clone();
            pc.seed = seed;
            if let Some(e) = epochs {
                pc.epochs = e;
            }
            let source = ctx.dataset(&ctx.cfg.source)?;
            let base = MoeModel::new(ctx.cfg.model, seed)?;
            let (model, reports) = train::pretext_pretrain(&base, &source, &pc)?;
            let mut meta = CheckpointMeta::for_model(&model, seed);
            for r in &reports {
                println!("expert {}: val acc {:.4} (epoch {})", r.expert, r.val_acc, r.best_epoch);
                meta.metrics.insert(format!("expert{}_val_acc", r.expert), r.val_acc);
            }
            let path = checkpoint_out.unwrap_or_else(|| ctx.pretext_path());
            checkpoint::save(&path, &model, &meta)?;
            println!("saved {}", path.display());
        }
        Command::Adapt(a) => {
            let base = ctx.base_model(a.checkpoint_in.as_deref())?;
            let seed = a.seed.unwrap_or(ctx.cfg.seed);
            let regime = AdaptationRegime::parse(&a.regime, base.config.backbone.n_layers, a.prompt_len)?;
            let ds = ctx.dataset(&ctx.cfg.target)?;
            let part = match (a.cap, a.shots) {
                (Some(n), _) => cap_per_class(&ds.splits.train, n)?,
                (None, Some(k)) => kshot_support(&ds.splits.train, k)?,
                (None, None) => ds.splits.train.clone(),
            };
            let set = |p: &synth::Partition| SpecSet::from_dataset(&ds, &p.indices(), |c| c);
            let (train_set, val, test) = (set(&part)?, set(&ds.splits.val)?, set(&ds.splits.test)?);
            let tc = TrainConfig {
                seed,
                ..ctx.cfg.train.clone()
            };
            let sigma = promptmoe::prompt::DEFAULT_SIGMA;
            let (best, history, row) =
                harness::run_cell(&base, &regime, &train_set, &val, &test, ds.n_classes(), sigma, &tc)?;
            print_metrics(&regime.to_string(), &row.report);
            let stem = format!("adapt_{}_s{seed}", regime.short_name());
            write(&ctx.out.join(format!("{stem}.history.csv")), history.to_csv().as_bytes())?;
            let mut meta = CheckpointMeta::for_model(&best, seed);
            meta.regime = Some(regime);
            meta.epoch = history.best_epoch;
            meta.metrics.insert("test_acc".into(), row.report.accuracy);
            meta.metrics.insert("test_macro_f1".into(), row.report.macro_f1);
            let path = a.checkpoint_out.unwrap_or_else(|| ctx.out.join(format!("{stem}.ckpt")));
            checkpoint::save(&path, &best, &meta)?;
            println!("saved {}", path.display());
        }
        Command::StageA(s) | Command::StageB(s) | Command::Ablation(s) => {
            let spec: ExperimentSpec = match &s.spec {
                Some(p) => read_json(p)?,
                None => return Err(Error::Config("--spec is required for sweeps".into())),
            };
            let base = ctx.base_model(s.checkpoint_in.as_deref())?;
            let datasets = spec
                .conditions
                .iter()
                .map(|d| ctx.dataset(d))
                .collect::<Result<Vec<_>>>()?;
            let (table, stem) = match spec.stage {
                Stage::A => (harness::run_stage_a(&spec, &base, &datasets)?, "stage_a"),
                Stage::B => (harness::run_stage_b(&spec, &base, &datasets)?, "stage_b"),
                Stage::Ablation => (harness::run_ablation(&spec, &base, &datasets)?, "ablation"),
            };
            let seeds = spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            let dir = ctx.out.join(&spec.output_dir);
            table.write(&dir, stem, &seeds)?;
            print!("{}", table.render(&seeds));
        }
        Command::ReportParams { regime, prompt_len } => {
            let mut model = MoeModel::new(ctx.cfg.model, ctx.cfg.seed)?;
            let regime = AdaptationRegime::parse(&regime, model.config.backbone.n_layers, prompt_len)?;
            if let AdaptationRegime::RfPrompt { prompt_len } = regime {
                model.attach_default_prompts(prompt_len, ctx.cfg.seed)?;
            }
            let report = harness::report_params(&model, &regime)?;
            print!("{}", report.render());
            println!("total parameters: {}", model.param_count());
        }
        Command::ExportEmbeddings { checkpoint_in, path } => {
            let model = checkpoint::load(&checkpoint_in)?.0;
            let ds = ctx.dataset(&ctx.cfg.target)?;
            let test = SpecSet::from_dataset(&ds, &ds.splits.test.indices(), |c| c)?;
            let path = path.unwrap_or_else(|| ctx.out.join("embeddings.csv"));
            let n = harness::export_embeddings(&model, &test, &path)?;
            println!("wrote {n} rows to {}", path.display());
        }
        Command::Eval { checkpoint_in } => {
            let (model, meta) = checkpoint::load(&checkpoint_in)?;
            let ds = ctx.dataset(&ctx.cfg.target)?;
            let test = SpecSet::from_dataset(&ds, &ds.splits.test.indices(), |c| c)?;
            let mut report = harness::evaluate(&model, &test)?;
            if let Some(regime) = &meta.regime {
                let p = harness::report_params(&model, regime)?;
                report = report.with_params(p.trainable, p.total);
            }
            print_metrics("test", &report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
