use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsside::dataio::{
    load_manifest, read_rgb_png, write_depth_png16, write_rgb_png, write_synthetic_dataset, SyntheticSpec,
    DEFAULT_DEPTH_SCALE,
};
use dsside::pipeline::{
    ablation_run, evaluate, load_samples, robust_side_infer, side_by_side, train, AblationVariant, ModelSet,
    Overrides, PipelineConfig, RouterMethod, Sample, SceneContext, TrainOutputs, TrainTarget, Trainer,
};
use dsside::router::{load_scene_probabilities, load_scene_table, DepthRange, SceneLabelTable, SceneProbabilities};
use dsside::{Error, Result};

#[derive(Parser)]
#[command(name = "dsside", version, about = "Scene-routed single-image depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Coarse-depth routing threshold in meters.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of top scene categories that vote.
    #[arg(long)]
    topk: Option<usize>,
    /// scene_classification, coarse_depth, forced_low, forced_high or cde_only.
    #[arg(long)]
    router: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "width-mult")]
    width_mult: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            sigma: self.sigma,
            top_k: self.topk,
            router: self.router.as_deref().map(str::parse::<RouterMethod>).transpose()?,
            seed: self.seed,
            width_multiplier: self.width_mult,
        })?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a low-range, high-range or coarse network.
    Train {
        #[command(flatten)]
        common: Common,
        /// low, high or coarse.
        #[arg(long, default_value = "low")]
        target: String,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run routed inference over a manifest and report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Manifest to evaluate; defaults to paths.eval_manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Predict depth for RGB images; writes a 16-bit depth PNG and a
    /// side-by-side visualization per input.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Print the routing decision for each input image.
    Route {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Train and compare a set of network/objective variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// tasks, skips or sam.
        #[arg(long, default_value = "tasks")]
        preset: String,
        #[arg(long, default_value = "low")]
        target: String,
    },
    /// Render a synthetic dataset and its manifest.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Defaults to synthetic.output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
}

fn manifest_samples(path: &Path, range: Option<DepthRange>) -> Result<Vec<Sample>> {
    let records = load_manifest(path).map_err(|e| match e {
        Error::Io { .. } | Error::Parse { .. } => Error::Data(e.to_string()),
        other => other,
    })?;
    let records: Vec<_> = records.into_iter().filter(|r| range.is_none_or(|g| r.range == g)).collect();
    load_samples(&records)
}

fn scene_inputs(cfg: &PipelineConfig) -> Result<(SceneLabelTable, Option<HashMap<String, SceneProbabilities>>)> {
    let table = match &cfg.router.scene_table {
        Some(p) => load_scene_table(p)?,
        None => SceneLabelTable::places365(),
    };
    let probs = match (&cfg.paths.scene_probs, cfg.router.method) {
        (Some(p), _) => Some(load_scene_probabilities(p)?.into_iter().collect()),
        (None, RouterMethod::SceneClassification) => {
            return Err(Error::Config("scene_classification routing needs paths.scene_probs".into()))
        }
        (None, _) => None,
    };
    Ok((table, probs))
}

fn file_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, target, resume } => {
            let cfg = common.load()?;
            let target: TrainTarget = target.parse()?;
            let range = target.range();
            let train_set = manifest_samples(required(&cfg.paths.train_manifest, "train_manifest")?, range)?;
            let val_set = match &cfg.paths.val_manifest {
                Some(p) => manifest_samples(p, range)?,
                None => Vec::new(),
            };
            let outputs = TrainOutputs {
                dir: required(&cfg.paths.output_dir, "output_dir")?.to_path_buf(),
            };
            let resume = resume
                .map(|p| dsside::netgraph::load_checkpoint(&p).and_then(|c| Trainer::from_checkpoint(&c)))
                .transpose()?;
            let report = train(&cfg, target, &train_set, &val_set, Some(&outputs), resume)?;
            if let Some(last) = report.history.last() {
                println!("step {}: loss {:.5}", last.step, last.total);
            }
            if let Some(best) = &report.best {
                println!("best validation REL {:.4} at step {}", best.metrics.rel, best.step);
            }
            println!("checkpoints in {}", outputs.dir.display());
        }
        Command::Eval { common, manifest, json } => {
            let cfg = common.load()?;
            let path = match &manifest {
                Some(p) => p.as_path(),
                None => required(&cfg.paths.eval_manifest, "eval_manifest")?,
            };
            let samples = manifest_samples(path, None)?;
            let models = ModelSet::load(&cfg)?;
            let (table, probs) = scene_inputs(&cfg)?;
            let report = evaluate(&cfg, &samples, &models, &table, probs.as_ref())?;
            print!("{}", report.table());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
                std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Infer {
            common,
            input,
            output_dir,
        } => {
            let cfg = common.load()?;
            let models = ModelSet::load(&cfg)?;
            let (table, probs) = scene_inputs(&cfg)?;
            std::fs::create_dir_all(&output_dir).map_err(|e| Error::Io {
                path: output_dir.clone(),
                source: e,
            })?;
            for path in &input {
                let id = file_id(path);
                let image = read_rgb_png(path)?;
                let scene = scene_context(&table, probs.as_ref(), &id)?;
                let (depth, decision) = robust_side_infer(&image, &cfg, &models, scene)?;
                let scheme = match (cfg.router.method, decision.range) {
                    (RouterMethod::CdeOnly, _) => cfg.schemes.coarse,
                    (_, DepthRange::Low) => cfg.schemes.low,
                    (_, DepthRange::High) => cfg.schemes.high,
                };
                write_depth_png16(&depth, output_dir.join(format!("{id}_depth.png")), DEFAULT_DEPTH_SCALE)?;
                let viz = side_by_side(&image, &depth, scheme.alpha(), scheme.beta())?;
                write_rgb_png(&viz, output_dir.join(format!("{id}_viz.png")))?;
                println!("{id}: {} ({:?})", decision.range, decision.method);
            }
        }
        Command::Route { common, input } => {
            let mut cfg = common.load()?;
            if cfg.router.method == RouterMethod::CdeOnly {
                cfg.router.method = RouterMethod::CoarseDepth;
            }
            let (table, probs) = scene_inputs(&cfg)?;
            let models = ModelSet {
                coarse: match cfg.router.method {
                    RouterMethod::CoarseDepth => Some(dsside::pipeline::DepthNet::load(required(
                        &cfg.paths.coarse_checkpoint,
                        "coarse_checkpoint",
                    )?)?),
                    _ => None,
                },
                ..ModelSet::default()
            };
            for path in &input {
                let id = file_id(path);
                let image = read_rgb_png(path)?;
                let scene = scene_context(&table, probs.as_ref(), &id)?;
                let decision = dsside::pipeline::route(&image, &cfg, &models, scene)?;
                let line = serde_json::to_string(&decision).map_err(|e| Error::Format(e.to_string()))?;
                println!("{id}\t{}\t{line}", decision.range);
            }
        }
        Command::Ablate {
            common,
            preset,
            target,
        } => {
            let cfg = common.load()?;
            let target: TrainTarget = target.parse()?;
            let variants = AblationVariant::preset(&preset)?;
            let train_set = manifest_samples(required(&cfg.paths.train_manifest, "train_manifest")?, target.range())?;
            let val_set = match &cfg.paths.val_manifest {
                Some(p) => manifest_samples(p, target.range())?,
                None => Vec::new(),
            };
            let table = ablation_run(&cfg, target, &variants, &train_set, &val_set)?;
            print!("{}", table.format());
        }
        Command::GenSynthetic { common, output_dir } => {
            let cfg = common.load()?;
            let s = &cfg.synthetic;
            let dir = match &output_dir {
                Some(d) => d.as_path(),
                None => s.output_dir.as_deref().ok_or_else(|| {
                    Error::Config("synthetic.output_dir is not set and --output-dir not given".into())
                })?,
            };
            let mut specs = Vec::new();
            for i in 0..s.low_count {
                let spec = SyntheticSpec::new(DepthRange::Low, s.width, s.height, s.seed + i as u64);
                specs.push(match s.low_max_depth {
                    Some(cap) => spec.with_max_depth(cap),
                    None => spec,
                });
            }
            for i in 0..s.high_count {
                specs.push(SyntheticSpec::new(DepthRange::High, s.width, s.height, s.seed + i as u64));
            }
            let records = write_synthetic_dataset(dir, &specs)?;
            println!("wrote {} samples to {}", records.len(), dir.join("manifest.tsv").display());
        }
    }
    Ok(())
}

fn scene_context<'a>(
    table: &'a SceneLabelTable,
    probs: Option<&'a HashMap<String, SceneProbabilities>>,
    id: &str,
) -> Result<Option<SceneContext<'a>>> {
    probs
        .map(|map| {
            map.get(id)
                .map(|p| SceneContext { table, probs: p })
                .ok_or_else(|| Error::Data(format!("no scene probabilities for `{id}`")))
        })
        .transpose()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
