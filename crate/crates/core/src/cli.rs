//! Experiment configuration and the `dmmd` command line.
//!
//! Every command reads one [`ExperimentConfig`] (a TOML file, or the defaults
//! when `--config` is omitted) with the flag overrides applied, then writes its
//! artifacts under the output directory:
//!
//! | command              | writes                                              |
//! |----------------------|-----------------------------------------------------|
//! | `generate`           | `config.toml`, source and target dataset files      |
//! | `train`              | `source_model.ckpt`, `train_log.csv`                |
//! | `adapt`              | `adapted_model.ckpt`, `adapt_log.csv`               |
//! | `eval`               | `eval_<model>_<domain>.txt`                         |
//! | `plot-distributions` | `hist_<model>_<domain>_<wc/bc>.csv`, `overlap_<model>.txt` |
//! | `op-count`           | nothing, prints pair counts                         |

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{AdamConfig, Backbone, BackboneConfig, Checkpoint, LrSchedule};
use crate::data::{
    all_features, class_index, generate_synthetic, load_dataset, save_dataset, DatasetBundle, Domain, GenerationConfig,
    Sample, SamplerConfig, Split,
};
use crate::dissimilarity::{distance_op_count, distance_values, mmd, write_histogram, KernelConfig, LossToggles};
use crate::error::{Error, Result};
use crate::eval::{evaluate, overlap_coefficient, EvalConfig, EvalReport};
use crate::losses::SupervisedLossConfig;
use crate::trainer::{adapt, train_source, EvalHook, TrainConfig, TrainLog};

pub const SOURCE_CHECKPOINT: &str = "source_model.ckpt";
pub const ADAPTED_CHECKPOINT: &str = "adapted_model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const ADAPT_LOG: &str = "adapt_log.csv";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Output directory for every artifact.
    pub out: PathBuf,
    /// Dataset files; relative paths resolve against `out`.
    pub source: PathBuf,
    pub target: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            source: PathBuf::from("source.dataset"),
            target: PathBuf::from("target.dataset"),
        }
    }
}

/// Network shape. Input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let toy = BackboneConfig::toy(1, 1);
        Self {
            hidden: toy.hidden,
            embedding_dim: toy.embedding_dim,
            init_seed: toy.init_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_supervised: usize,
    pub epochs_uda: usize,
    pub seed: u64,
    pub reset_optimizer: bool,
    pub eval_every: usize,
    pub toggles: LossToggles,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs_supervised: t.epochs_supervised,
            epochs_uda: t.epochs_uda,
            seed: t.seed,
            reset_optimizer: t.reset_optimizer,
            eval_every: t.eval_every,
            toggles: t.toggles,
            schedule: t.schedule,
            adam: t.adam,
        }
    }
}

/// Everything one experiment needs. No field has a serde default, so a
/// parsed file re-serializes to exactly the canonical text it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    pub generation: GenerationConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub loss: SupervisedLossConfig,
    pub kernel: KernelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            generation: GenerationConfig::default(),
            model: ModelConfig::default(),
            sampler: TrainConfig::default().sampler,
            loss: SupervisedLossConfig::default(),
            kernel: KernelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.training().validate()?;
        if self.model.embedding_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("model layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs_supervised: self.train.epochs_supervised,
            epochs_uda: self.train.epochs_uda,
            sampler: self.sampler,
            loss: self.loss,
            kernel: self.kernel.clone(),
            toggles: self.train.toggles,
            schedule: self.train.schedule,
            adam: self.train.adam,
            reset_optimizer: self.train.reset_optimizer,
            eval_every: self.train.eval_every,
            seed: self.train.seed,
        }
    }

    pub fn backbone(&self, input_dim: usize, classes: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            hidden: self.model.hidden.clone(),
            embedding_dim: self.model.embedding_dim,
            classes,
            init_seed: self.model.init_seed,
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out
    }

    pub fn dataset_path(&self, domain: Domain) -> PathBuf {
        let p = match domain {
            Domain::Source => &self.paths.source,
            Domain::Target => &self.paths.target,
        };
        self.paths.out.join(p)
    }

    /// Applies command-line overrides. `--seed` reseeds both data generation
    /// and training.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.generation.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(s) = o.severity {
            self.generation.severity = s;
        }
        if let Some(v) = o.toggle_wc {
            self.train.toggles.wc = v;
        }
        if let Some(v) = o.toggle_bc {
            self.train.toggles.bc = v;
        }
        if let Some(v) = o.toggle_feat {
            self.train.toggles.feature = v;
        }
        if let Some(n) = o.epochs_supervised {
            self.train.epochs_supervised = n;
        }
        if let Some(n) = o.epochs_uda {
            self.train.epochs_uda = n;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, clap::Args)]
pub struct Overrides {
    /// Experiment config file (TOML); defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Domain-shift severity multiplier.
    #[arg(long, global = true)]
    pub severity: Option<f64>,
    /// Within-class distance MMD term.
    #[arg(long = "toggle-wc", global = true, value_name = "BOOL")]
    pub toggle_wc: Option<bool>,
    /// Between-class distance MMD term.
    #[arg(long = "toggle-bc", global = true, value_name = "BOOL")]
    pub toggle_bc: Option<bool>,
    /// Feature-space MMD term.
    #[arg(long = "toggle-feat", global = true, value_name = "BOOL")]
    pub toggle_feat: Option<bool>,
    /// Supervised source epochs.
    #[arg(long = "epochs-supervised", global = true)]
    pub epochs_supervised: Option<usize>,
    /// Adaptation epochs.
    #[arg(long = "epochs-uda", global = true)]
    pub epochs_uda: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Source,
    Adapted,
}

impl ModelChoice {
    fn file(self) -> &'static str {
        match self {
            ModelChoice::Source => SOURCE_CHECKPOINT,
            ModelChoice::Adapted => ADAPTED_CHECKPOINT,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModelChoice::Source => "source",
            ModelChoice::Adapted => "adapted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainChoice {
    Source,
    Target,
}

impl From<DomainChoice> for Domain {
    fn from(d: DomainChoice) -> Self {
        match d {
            DomainChoice::Source => Domain::Source,
            DomainChoice::Target => Domain::Target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Subcommand)]
pub enum Command {
    /// Generate the synthetic source and target datasets.
    Generate,
    /// Supervised training on the labelled source domain.
    Train,
    /// Adaptation to the target domain, starting from the source checkpoint.
    Adapt,
    /// Rank-k and mAP of a checkpoint on a domain's query/gallery split.
    Eval {
        #[arg(long, value_enum, default_value = "adapted")]
        model: ModelChoice,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainChoice,
    },
    /// WC/BC distance histograms of both domains' test splits.
    PlotDistributions {
        #[arg(long, value_enum, default_value = "adapted")]
        model: ModelChoice,
    },
    /// Number of WC, BC and total distance computations per batch.
    OpCount {
        /// Defaults to the sampler batch size.
        #[arg(long)]
        batch_size: Option<u64>,
        /// Defaults to the sampler occurrences per group.
        #[arg(long)]
        occurrences: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Parser)]
#[command(
    name = "dmmd",
    version,
    about = "Dissimilarity-space MMD domain adaptation experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    /// Loads the config file (or defaults) and applies the flags.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.overrides.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.config()?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Adapt => cmd_adapt(&cfg, out),
        Command::Eval { model, domain } => cmd_eval(&cfg, *model, (*domain).into(), out).map(|_| ()),
        Command::PlotDistributions { model } => cmd_plot_distributions(&cfg, *model, out).map(|_| ()),
        Command::OpCount {
            batch_size,
            occurrences,
        } => {
            let b = batch_size.unwrap_or(cfg.sampler.batch_size as u64);
            let n = occurrences.unwrap_or(cfg.sampler.occurrences as u64);
            let c = distance_op_count(b, n)?;
            emit(
                out,
                &format!(
                    "batch_size = {b}\noccurrences = {n}\nwc = {}\nbc = {}\ntotal = {}\n",
                    c.within_class, c.between_class, c.total
                ),
            )
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("writing output", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.out_dir();
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_file(&dir.join(CONFIG_ECHO), &cfg.to_toml()?)
}

fn load_domain(cfg: &ExperimentConfig, domain: Domain) -> Result<DatasetBundle> {
    let path = cfg.dataset_path(domain);
    if !path.exists() {
        return Err(Error::Input(format!(
            "{domain} dataset {} not found; run `dmmd generate` first",
            path.display()
        )));
    }
    let bundle = load_dataset(&path)?;
    if bundle.domain != domain {
        return Err(Error::Input(format!(
            "{} holds the {} domain, expected {domain}",
            path.display(),
            bundle.domain
        )));
    }
    Ok(bundle)
}

fn load_checkpoint(cfg: &ExperimentConfig, model: ModelChoice) -> Result<Checkpoint> {
    let path = cfg.out_dir().join(model.file());
    if !path.exists() {
        let hint = match model {
            ModelChoice::Source => "run `dmmd train` first",
            ModelChoice::Adapted => "run `dmmd adapt` first",
        };
        return Err(Error::Input(format!("no checkpoint at {}; {hint}", path.display())));
    }
    Checkpoint::load(&path)
}

/// Biased MMD between the raw training features of the two domains.
pub fn raw_feature_mmd(source: &[Sample], target: &[Sample], kernel: &KernelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(all_features(source)?)?;
    let b = g.constant(all_features(target)?)?;
    let m = mmd(&mut g, a, b, kernel)?;
    Ok(g.scalar(m))
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    prepare_out(cfg)?;
    let domains = generate_synthetic(&cfg.generation)?;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<8} {:<8} {:>5} {:>8} {:>7}",
        "domain", "split", "ids", "cameras", "images"
    );
    for bundle in [&domains.source, &domains.target] {
        let path = cfg.dataset_path(bundle.domain);
        save_dataset(bundle, &path)?;
        info!("wrote {}", path.display());
        for (name, split) in [
            ("train", Split::Train),
            ("gallery", Split::Gallery),
            ("query", Split::Query),
        ] {
            let (ids, cams, images) = bundle.summary(split);
            let _ = writeln!(
                table,
                "{:<8} {:<8} {ids:>5} {cams:>8} {images:>7}",
                bundle.domain.to_string(),
                name
            );
        }
    }
    let shift = raw_feature_mmd(&domains.source.train, &domains.target.train, &cfg.kernel)?;
    let _ = writeln!(table, "severity = {}", cfg.generation.severity);
    let _ = writeln!(table, "feature_mmd = {shift}");
    emit(out, &table)
}

fn test_hook<'a>(bundle: &'a DatasetBundle, eval: EvalConfig) -> impl FnMut(&Backbone) -> Result<(f64, f64)> + 'a {
    move |b: &Backbone| {
        let r = evaluate(b, &bundle.query, &bundle.gallery, &eval)?;
        Ok((r.rank1, r.map))
    }
}

fn log_summary(phase: &str, log: &TrainLog) -> String {
    match (log.records.first(), log.records.last()) {
        (Some(first), Some(last)) => format!(
            "{phase}: {} epochs, total loss {:.6} -> {:.6}, lmmd {:.6} -> {:.6}\n",
            log.len(),
            first.total,
            last.total,
            first.lmmd(),
            last.lmmd()
        ),
        _ => format!("{phase}: 0 epochs\n"),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    prepare_out(cfg)?;
    let source = load_domain(cfg, Domain::Source)?;
    let classes = class_index(&source.train).len();
    let mut backbone = Backbone::new(&cfg.backbone(source.input_dim(), classes))?;
    let mut hook = test_hook(&source, cfg.eval);
    let hook: &mut EvalHook<'_> = &mut hook;
    let outcome = train_source(&mut backbone, &source.train, &cfg.training(), Some(hook))?;
    let dir = cfg.out_dir();
    Checkpoint {
        backbone,
        optimizer: Some(outcome.optimizer),
    }
    .save(&dir.join(SOURCE_CHECKPOINT))?;
    outcome.log.save(&dir.join(TRAIN_LOG))?;
    emit(out, &log_summary("train", &outcome.log))
}

pub fn cmd_adapt(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let start = load_checkpoint(cfg, ModelChoice::Source)?;
    prepare_out(cfg)?;
    let source = load_domain(cfg, Domain::Source)?;
    let target = load_domain(cfg, Domain::Target)?;
    let mut backbone = start.backbone;
    let mut hook = test_hook(&target, cfg.eval);
    let hook: &mut EvalHook<'_> = &mut hook;
    let outcome = adapt(
        &mut backbone,
        &source.train,
        &target.train,
        &cfg.training(),
        start.optimizer,
        Some(hook),
    )?;
    let dir = cfg.out_dir();
    Checkpoint {
        backbone,
        optimizer: Some(outcome.optimizer),
    }
    .save(&dir.join(ADAPTED_CHECKPOINT))?;
    outcome.log.save(&dir.join(ADAPT_LOG))?;
    emit(out, &log_summary("adapt", &outcome.log))
}

pub fn cmd_eval(cfg: &ExperimentConfig, model: ModelChoice, domain: Domain, out: &mut dyn Write) -> Result<EvalReport> {
    let ckpt = load_checkpoint(cfg, model)?;
    let data = load_domain(cfg, domain)?;
    let report = evaluate(&ckpt.backbone, &data.query, &data.gallery, &cfg.eval)?;
    let mut text = format!("model = {}\ndomain = {domain}\n", model.name());
    text.push_str(&report.to_text());
    write_file(
        &cfg.out_dir().join(format!("eval_{}_{domain}.txt", model.name())),
        &text,
    )?;
    emit(
        out,
        &format!(
            "model = {}\ndomain = {domain}\nrank1 = {}\nrank5 = {}\nrank10 = {}\nmap = {}\n",
            model.name(),
            report.rank1,
            report.rank5,
            report.rank10,
            report.map
        ),
    )?;
    Ok(report)
}

/// WC/BC overlap of each domain's test split under one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlaps {
    pub source: f64,
    pub target: f64,
}

pub fn cmd_plot_distributions(cfg: &ExperimentConfig, model: ModelChoice, out: &mut dyn Write) -> Result<Overlaps> {
    let ckpt = load_checkpoint(cfg, model)?;
    let dir = cfg.out_dir();
    let mut overlap = [0.0; 2];
    for (slot, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let data = load_domain(cfg, domain)?;
        let pooled: Vec<Sample> = data.query.iter().chain(&data.gallery).cloned().collect();
        let emb = ckpt.backbone.embed_batch(&all_features(&pooled)?)?;
        let ids: Vec<u32> = pooled.iter().map(|s| s.identity).collect();
        let (wc, bc) = distance_values(&emb, &ids);
        for (kind, values) in [("wc", &wc), ("bc", &bc)] {
            let path = dir.join(format!("hist_{}_{domain}_{kind}.csv", model.name()));
            write_histogram(&path, values)?;
            info!("wrote {}", path.display());
        }
        overlap[slot] = overlap_coefficient(&wc, &bc)?;
    }
    let text = format!(
        "model = {}\nsource = {}\ntarget = {}\n",
        model.name(),
        overlap[0],
        overlap[1]
    );
    write_file(&dir.join(format!("overlap_{}.txt", model.name())), &text)?;
    emit(out, &text)?;
    Ok(Overlaps {
        source: overlap[0],
        target: overlap[1],
    })
}
