//! Command-line entry point: `gen`, `train`, `eval`, `ablate`, `cam`.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{generate_dataset, split, FrameCache, FrameRecord, GenConfig, LoadOptions, Manifest};
use crate::error::{Error, Result};
use crate::evaltools::{ablation_suite, ablation_tsv, branch_image, grad_cam, rmse, CamBranch};
use crate::nmfnet::{ModalitySet, Model, NetConfig};
use crate::simworld::{Archetype, EpisodeConfig};
use crate::trainer::{train_with, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "nmfnet", version, about = "Multimodal steering network: simulate, train, evaluate")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate episodes and write a dataset.
    Gen(GenArgs),
    /// Train a model on a dataset's training split.
    Train(TrainArgs),
    /// Per-environment RMSE of a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and evaluate all seven modality subsets.
    Ablate(AblateArgs),
    /// Export a Grad-CAM heatmap for one frame.
    Cam(CamArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EnvChoice {
    House,
    City,
    Cave,
    All,
}

impl EnvChoice {
    fn archetypes(self) -> Vec<Archetype> {
        match self {
            EnvChoice::House => vec![Archetype::House],
            EnvChoice::City => vec![Archetype::City],
            EnvChoice::Cave => vec![Archetype::Cave],
            EnvChoice::All => Archetype::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    /// Held-out records.
    Test,
    /// Held-out records rendered with randomized textures.
    TestDr,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub env: EnvChoice,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.45)]
    pub dr_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Split and loading options shared by every subcommand that reads a dataset.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Points sampled from each cloud.
    #[arg(long, default_value_t = crate::cloudnet::DEFAULT_SAMPLES)]
    pub n_sample: usize,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, value_enum, default_value = "on")]
    pub dr: OnOff,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Global gradient-norm clip (off by default).
    #[arg(long)]
    pub clip: Option<f32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "rgb,laser,cloud")]
    pub modalities: ModalitySet,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve TSV; defaults to the checkpoint path with `.loss.tsv`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub frame: u64,
    #[arg(long, default_value = "rgb")]
    pub branch: CamBranch,
    #[arg(long, default_value_t = crate::cloudnet::DEFAULT_SAMPLES)]
    pub n_sample: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overlay PPM; defaults to the map path with `.overlay.ppm`.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

/// Collects the fully resolved settings as `key = value` lines, the same
/// syntax `--config` accepts.
struct Resolved(Vec<(String, String)>);

impl Resolved {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn add(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    fn add_path(&mut self, key: &str, value: &Path) -> &mut Self {
        self.add(key, value.display())
    }

    fn data(&mut self, d: &DataArgs) -> &mut Self {
        self.add_path("data", &d.data)
            .add("train-fraction", d.train_fraction)
            .add("split-seed", d.split_seed)
            .add("n-sample", d.n_sample)
    }

    fn optim(&mut self, o: &OptimArgs) -> &mut Self {
        self.add("epochs", o.epochs)
            .add("lr", o.lr)
            .add("momentum", o.momentum)
            .add("batch", o.batch)
            .add("dr", if o.dr == OnOff::On { "on" } else { "off" })
            .add("seed", o.seed);
        if let Some(c) = o.clip {
            self.add("clip", c);
        }
        self
    }

    fn print(&self, command: &str) {
        println!("# resolved config: {command}");
        for (k, v) in &self.0 {
            println!("{k} = {v}");
        }
    }
}

/// Expands `--config FILE` into flags placed right after the subcommand,
/// so that flags given on the command line override the file.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut file = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let path = it
                .next()
                .ok_or_else(|| Error::Config("--config needs a file".into()))?;
            file = Some(PathBuf::from(path));
        } else if let Some(p) = s.strip_prefix("--config=") {
            file = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    let text = fs::read_to_string(&file)?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&file, format!("line {}: expected key = value", n + 1)))?;
        let v = v.trim().trim_matches('"');
        extra.push(OsString::from(format!("--{}", k.trim())));
        extra.push(OsString::from(v));
    }
    // program name, subcommand, then file flags
    let at = rest.len().min(2);
    rest.splice(at..at, extra);
    Ok(rest)
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_split(d: &DataArgs) -> Result<(Manifest, Vec<FrameRecord>, Vec<FrameRecord>)> {
    let manifest = Manifest::load(&d.data)?;
    let (train, test) = split(&manifest.records, d.train_fraction, d.split_seed)?;
    Ok((manifest, train, test))
}

fn train_config(o: &OptimArgs, modalities: ModalitySet) -> TrainConfig {
    TrainConfig {
        lr: o.lr,
        momentum: o.momentum,
        batch_size: o.batch,
        epochs: o.epochs,
        seed: o.seed,
        modalities,
        dr_training: o.dr == OnOff::On,
        clip: o.clip,
        net: NetConfig::default(),
        checkpoint: None,
        loss_log: None,
    }
}

fn load_options(n_sample: usize) -> LoadOptions {
    LoadOptions {
        n_sample,
        ..LoadOptions::default()
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => {
            Resolved::new()
                .add("env", format!("{:?}", a.env).to_lowercase())
                .add("episodes", a.episodes)
                .add("frames", a.frames)
                .add("dr-fraction", a.dr_fraction)
                .add("seed", a.seed)
                .add_path("out", &a.out)
                .print("gen");
            let cfg = GenConfig {
                envs: a.env.archetypes(),
                episodes: a.episodes,
                frames: a.frames,
                dr_fraction: a.dr_fraction,
                seed: a.seed,
                episode: EpisodeConfig::default(),
            };
            let m = generate_dataset(&cfg, &a.out)?;
            let dr = m.records.iter().filter(|r| r.dr_flag).count();
            println!("wrote {} records ({dr} with randomized textures) to {}", m.records.len(), a.out.display());
        }
        Command::Train(a) => {
            let loss_log = a.loss_log.clone().unwrap_or_else(|| a.out.with_extension("loss.tsv"));
            Resolved::new()
                .data(&a.data)
                .add("modalities", a.modalities)
                .optim(&a.optim)
                .add_path("out", &a.out)
                .add_path("loss-log", &loss_log)
                .print("train");
            let (_, train, _) = load_split(&a.data)?;
            let cfg = TrainConfig {
                checkpoint: Some(a.out.clone()),
                loss_log: Some(loss_log),
                ..train_config(&a.optim, a.modalities)
            };
            let used = crate::trainer::training_records(&train, &cfg);
            println!(
                "training on {} of {} train-split records ({} with randomized textures excluded)",
                used.len(),
                train.len(),
                train.len() - used.len()
            );
            let cache = FrameCache::load(&a.data.data, &used, a.modalities, &load_options(a.data.n_sample))?;
            let state = train_with(&cache, &used, &cfg, |e| {
                println!("epoch {} steps {} mean loss {:.6}", e.epoch + 1, e.steps, e.mean_loss)
            })?;
            println!("saved {} after {} steps", a.out.display(), state.step);
        }
        Command::Eval(a) => {
            Resolved::new()
                .add_path("ckpt", &a.ckpt)
                .data(&a.data)
                .add("split", format!("{:?}", a.split).to_lowercase())
                .add("batch", a.batch)
                .add_path("report", &a.report)
                .print("eval");
            let model = Model::load(&a.ckpt)?;
            let (manifest, train, test) = load_split(&a.data)?;
            let records = match a.split {
                SplitChoice::Test => test,
                SplitChoice::TestDr => test.into_iter().filter(|r| r.dr_flag).collect(),
                SplitChoice::Train => train,
                SplitChoice::All => manifest.records,
            };
            let cache = FrameCache::load(&a.data.data, &records, model.modalities(), &load_options(a.data.n_sample))?;
            let report = rmse(&model, &cache, &records, a.batch)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            fs::write(&a.report, report.to_tsv())?;
            print!("{}", report.to_tsv());
        }
        Command::Ablate(a) => {
            Resolved::new().data(&a.data).optim(&a.optim).add_path("out", &a.out).print("ablate");
            let (_, train, test) = load_split(&a.data)?;
            let mut all = train.clone();
            all.extend(test.iter().cloned());
            let cache = FrameCache::load(&a.data.data, &all, ModalitySet::ALL, &load_options(a.data.n_sample))?;
            let cfg = train_config(&a.optim, ModalitySet::ALL);
            let rows = ablation_suite(&cache, &train, &test, &cfg, |m, e| {
                println!("{} epoch {} mean loss {:.6}", m.label(), e.epoch + 1, e.mean_loss)
            })?;
            let tsv = ablation_tsv(&rows);
            fs::write(&a.out, &tsv)?;
            print!("{tsv}");
        }
        Command::Cam(a) => {
            let overlay = a.overlay.clone().unwrap_or_else(|| a.out.with_extension("overlay.ppm"));
            Resolved::new()
                .add_path("ckpt", &a.ckpt)
                .add_path("data", &a.data)
                .add("frame", a.frame)
                .add("branch", a.branch)
                .add("n-sample", a.n_sample)
                .add_path("out", &a.out)
                .add_path("overlay", &overlay)
                .print("cam");
            let model = Model::load(&a.ckpt)?;
            let manifest = Manifest::load(&a.data)?;
            let record = manifest
                .records
                .iter()
                .find(|r| r.frame_id == a.frame)
                .ok_or_else(|| Error::Config(format!("frame {} not in the manifest", a.frame)))?;
            let records = std::slice::from_ref(record);
            let cache = FrameCache::load(&a.data, records, model.modalities(), &load_options(a.n_sample))?;
            let batch = crate::dataset::make_batch(&cache, &[a.frame], model.modalities())?;
            let map = grad_cam(&model, &batch.input, a.branch)?;
            map.to_image().write(&a.out)?;
            map.overlay(&branch_image(&batch.input, a.branch)?)?.write(&overlay)?;
            println!("wrote {} and {}", a.out.display(), overlay.display());
        }
    }
    Ok(())
}
