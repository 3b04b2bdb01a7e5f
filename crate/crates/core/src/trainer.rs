//! Two-phase training: supervised learning on the source domain, then
//! adaptation that adds the D-MMD alignment term over paired source/target
//! batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};

use crate::autodiff::{Graph, Var};
use crate::backbone::{adam_step, AdamConfig, Backbone, BoundBackbone, LrSchedule, OptimizerState};
use crate::data::{class_index, feature_matrix, Batch, GroupKey, PkSampler, Sample, SamplerConfig};
use crate::dissimilarity::{dmmd_loss, GroupedBatch, KernelConfig, LossToggles};
use crate::error::{Error, Result};
use crate::losses::{supervised_loss, SupervisedLossConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// N^s, supervised epochs.
    pub epochs_supervised: usize,
    /// N^u, adaptation epochs.
    pub epochs_uda: usize,
    pub sampler: SamplerConfig,
    pub loss: SupervisedLossConfig,
    pub kernel: KernelConfig,
    pub toggles: LossToggles,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Start adaptation with fresh Adam moments.
    pub reset_optimizer: bool,
    /// Run the evaluation hook every this many epochs; 0 disables it.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_supervised: 30,
            epochs_uda: 40,
            sampler: SamplerConfig {
                batch_size: 32,
                occurrences: 4,
            },
            loss: SupervisedLossConfig::default(),
            kernel: KernelConfig::default(),
            toggles: LossToggles::ALL,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            reset_optimizer: true,
            eval_every: 0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.loss.validate()?;
        self.kernel.validate()?;
        self.schedule.validate()
    }
}

/// Sampler seeds. The source stream is shared by both phases so that
/// adaptation without alignment terms replays supervised training.
const SOURCE_STREAM: u64 = 0x5EED_0001;
const TARGET_STREAM: u64 = 0x5EED_0002;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number within its phase.
    pub epoch: usize,
    pub lces: f64,
    pub ltri: f64,
    pub lmmd_wc: f64,
    pub lmmd_bc: f64,
    pub lmmd_feat: f64,
    pub total: f64,
    pub lr: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

impl EpochRecord {
    /// Sum of the enabled alignment terms.
    pub fn lmmd(&self) -> f64 {
        self.lmmd_wc + self.lmmd_bc + self.lmmd_feat
    }
}

/// Epoch means of every loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn to_csv(&self) -> String {
        let metrics = self.records.iter().any(|r| r.rank1.is_some());
        let mut out = String::from("epoch,lces,ltri,lmmd_wc,lmmd_bc,lmmd_feat,total,lr");
        if metrics {
            out.push_str(",rank1,map");
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.lces, r.ltri, r.lmmd_wc, r.lmmd_bc, r.lmmd_feat, r.total, r.lr
            );
            if metrics {
                let _ = write!(out, ",{},{}", opt(r.rank1), opt(r.map));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Result of one training phase.
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub log: TrainLog,
    pub optimizer: OptimizerState,
}

/// Called with the current backbone; returns `(rank1, mAP)`.
pub type EvalHook<'a> = dyn FnMut(&Backbone) -> Result<(f64, f64)> + 'a;

#[derive(Default)]
struct Accumulator {
    sums: [f64; 6],
    batches: usize,
}

impl Accumulator {
    fn add(&mut self, terms: [f64; 6]) {
        for (s, t) in self.sums.iter_mut().zip(terms) {
            *s += t;
        }
        self.batches += 1;
    }

    fn record(&self, epoch: usize, lr: f64) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        let [lces, ltri, wc, bc, feat, total] = self.sums.map(|s| s / n);
        EpochRecord {
            epoch,
            lces,
            ltri,
            lmmd_wc: wc,
            lmmd_bc: bc,
            lmmd_feat: feat,
            total,
            lr,
            rank1: None,
            map: None,
        }
    }
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Diverged {
            epoch,
            batch,
            message: e.to_string(),
        },
        other => other,
    }
}

fn class_labels(classes: &BTreeMap<u32, usize>, samples: &[Sample], batch: &Batch) -> Vec<usize> {
    batch.indices.iter().map(|&i| classes[&samples[i].identity]).collect()
}

struct SourceStep<'a> {
    samples: &'a [Sample],
    classes: &'a BTreeMap<u32, usize>,
}

impl SourceStep<'_> {
    fn build(
        &self,
        g: &mut Graph,
        bound: &BoundBackbone,
        batch: &Batch,
        loss: &SupervisedLossConfig,
    ) -> Result<(Var, [f64; 2], Var)> {
        let x = g.constant(feature_matrix(self.samples, &batch.indices)?)?;
        let emb = bound.embed(g, x)?;
        let logits = bound.classify(g, emb)?;
        let labels = class_labels(self.classes, self.samples, batch);
        let terms = supervised_loss(g, logits, emb, &labels, &batch.groups, loss)?;
        Ok((
            emb,
            [g.scalar(terms.cross_entropy), g.scalar(terms.triplet)],
            terms.total,
        ))
    }
}

fn checked_classes(backbone: &Backbone, source: &[Sample]) -> Result<BTreeMap<u32, usize>> {
    let classes = class_index(source);
    if classes.len() > backbone.classes() {
        return Err(Error::Input(format!(
            "source has {} identities but the classifier head has {} outputs",
            classes.len(),
            backbone.classes()
        )));
    }
    Ok(classes)
}

fn maybe_eval(
    record: &mut EpochRecord,
    every: usize,
    backbone: &Backbone,
    hook: &mut Option<&mut EvalHook<'_>>,
) -> Result<()> {
    if every > 0 && record.epoch.is_multiple_of(every) {
        if let Some(h) = hook.as_mut() {
            let (r1, map) = h(backbone)?;
            record.rank1 = Some(r1);
            record.map = Some(map);
        }
    }
    Ok(())
}

/// Phase 1: `epochs_supervised` epochs of label-smoothed cross-entropy plus
/// batch-hard triplet loss on identity-grouped source batches.
pub fn train_source(
    backbone: &mut Backbone,
    source: &[Sample],
    config: &TrainConfig,
    mut hook: Option<&mut EvalHook<'_>>,
) -> Result<PhaseOutcome> {
    config.validate()?;
    let classes = checked_classes(backbone, source)?;
    let mut sampler = PkSampler::new(
        source,
        GroupKey::Identity,
        config.sampler,
        stream_seed(config.seed, SOURCE_STREAM),
    )?;
    let mut optimizer = OptimizerState::new(backbone, config.schedule.at(0));
    let step = SourceStep {
        samples: source,
        classes: &classes,
    };
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs_supervised {
        optimizer.lr = config.schedule.at(epoch);
        let mut acc = Accumulator::default();
        for (b, batch) in sampler.epoch().iter().enumerate() {
            let ctx = diverged(epoch + 1, b);
            let mut g = Graph::new();
            let bound = backbone.bind(&mut g).map_err(&ctx)?;
            let (_, [lces, ltri], total) = step.build(&mut g, &bound, batch, &config.loss).map_err(&ctx)?;
            g.backward(total).map_err(&ctx)?;
            adam_step(backbone, &mut optimizer, &bound.gradients(&g), &config.adam).map_err(&ctx)?;
            acc.add([lces, ltri, 0.0, 0.0, 0.0, g.scalar(total)]);
        }
        let mut record = acc.record(epoch + 1, optimizer.lr);
        maybe_eval(&mut record, config.eval_every, backbone, &mut hook)?;
        info!(
            "supervised epoch {}: lces {:.4} ltri {:.4} lr {}",
            record.epoch, record.lces, record.ltri, record.lr
        );
        log.records.push(record);
    }
    Ok(PhaseOutcome { log, optimizer })
}

/// Phase 2: `epochs_uda` epochs over zipped (source by identity, target by
/// tracklet) batches minimising the supervised loss on the source batch plus
/// the enabled D-MMD terms. Each epoch stops at the shorter batch stream.
///
/// `previous` is the optimizer state from phase 1; it is only used when
/// `reset_optimizer` is off.
pub fn adapt(
    backbone: &mut Backbone,
    source: &[Sample],
    target: &[Sample],
    config: &TrainConfig,
    previous: Option<OptimizerState>,
    mut hook: Option<&mut EvalHook<'_>>,
) -> Result<PhaseOutcome> {
    config.validate()?;
    let classes = checked_classes(backbone, source)?;
    let mut source_sampler = PkSampler::new(
        source,
        GroupKey::Identity,
        config.sampler,
        stream_seed(config.seed, SOURCE_STREAM),
    )?;
    let mut target_sampler = PkSampler::new(
        target,
        GroupKey::Tracklet,
        config.sampler,
        stream_seed(config.seed, TARGET_STREAM),
    )?;
    let mut optimizer = match previous {
        Some(state) if !config.reset_optimizer => state,
        _ => OptimizerState::new(backbone, config.schedule.at(0)),
    };
    let step = SourceStep {
        samples: source,
        classes: &classes,
    };
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs_uda {
        optimizer.lr = config.schedule.at(epoch);
        let source_batches = source_sampler.epoch();
        let target_batches = target_sampler.epoch();
        debug!(
            "adapt epoch {}: {} source / {} target batches",
            epoch + 1,
            source_batches.len(),
            target_batches.len()
        );
        let mut acc = Accumulator::default();
        for (b, (bs, bt)) in source_batches.iter().zip(&target_batches).enumerate() {
            let ctx = diverged(epoch + 1, b);
            let mut g = Graph::new();
            let bound = backbone.bind(&mut g).map_err(&ctx)?;
            let (emb_s, [lces, ltri], sup) = step.build(&mut g, &bound, bs, &config.loss).map_err(&ctx)?;
            let mut terms = [lces, ltri, 0.0, 0.0, 0.0, 0.0];
            let total = if config.toggles.any() {
                let xt = g
                    .constant(feature_matrix(target, &bt.indices).map_err(&ctx)?)
                    .map_err(&ctx)?;
                let emb_t = bound.embed(&mut g, xt).map_err(&ctx)?;
                let d = dmmd_loss(
                    &mut g,
                    GroupedBatch {
                        embeddings: emb_s,
                        groups: &bs.groups,
                    },
                    GroupedBatch {
                        embeddings: emb_t,
                        groups: &bt.groups,
                    },
                    &config.kernel,
                    config.toggles,
                )
                .map_err(&ctx)?;
                terms[2] = d.wc_value(&g);
                terms[3] = d.bc_value(&g);
                terms[4] = d.feature_value(&g);
                g.add(sup, d.total).map_err(&ctx)?
            } else {
                sup
            };
            terms[5] = g.scalar(total);
            g.backward(total).map_err(&ctx)?;
            adam_step(backbone, &mut optimizer, &bound.gradients(&g), &config.adam).map_err(&ctx)?;
            acc.add(terms);
        }
        let mut record = acc.record(epoch + 1, optimizer.lr);
        maybe_eval(&mut record, config.eval_every, backbone, &mut hook)?;
        info!(
            "adapt epoch {}: lces {:.4} ltri {:.4} wc {:.4} bc {:.4} feat {:.4} lr {}",
            record.epoch, record.lces, record.ltri, record.lmmd_wc, record.lmmd_bc, record.lmmd_feat, record.lr
        );
        log.records.push(record);
    }
    Ok(PhaseOutcome { log, optimizer })
}
