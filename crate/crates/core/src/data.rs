//! Synthetic re-identification data with a controllable domain shift.
//!
//! Every identity is a Gaussian cluster centre in a latent space. Each
//! (identity, camera) episode is one tracklet: a camera-specific offset plus
//! temporally correlated frame noise. Latent points are mixed into the input
//! space by a random linear map shared by both domains; target samples then
//! pass through a fixed affine transform (rotation, anisotropic scaling,
//! translation) whose strength is set by `severity`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Input(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl Split {
    const ALL: [Split; 3] = [Split::Train, Split::Gallery, Split::Query];

    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub identity: u32,
    pub tracklet: u32,
    pub domain: Domain,
    pub camera: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub seed: u64,
    /// Training identities per domain.
    pub identities: usize,
    /// Held-out identities per domain, used for query/gallery.
    pub test_identities: usize,
    pub cameras: usize,
    pub frames_per_tracklet: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub identity_spread: f64,
    pub camera_spread: f64,
    /// Per-camera appearance offset in input space, drawn afresh for each
    /// domain's cameras.
    pub camera_bias: f64,
    pub frame_noise: f64,
    /// AR(1) coefficient of frame noise along a tracklet.
    pub frame_correlation: f64,
    pub input_noise: f64,
    /// Global multiplier of the target shift; 0 disables it.
    pub severity: f64,
    /// Typical Givens rotation angle (radians) at severity 1.
    pub shift_rotation: f64,
    /// Log-scale half-range of the per-axis scaling at severity 1.
    pub shift_anisotropy: f64,
    /// Per-axis standard deviation of the translation at severity 1.
    pub shift_translation: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            identities: 50,
            test_identities: 50,
            cameras: 2,
            frames_per_tracklet: 8,
            input_dim: 16,
            latent_dim: 8,
            identity_spread: 1.0,
            camera_spread: 0.3,
            camera_bias: 0.0,
            frame_noise: 0.2,
            frame_correlation: 0.5,
            input_noise: 0.1,
            severity: 1.0,
            shift_rotation: 1.6,
            shift_anisotropy: 2.0,
            shift_translation: 2.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.identities < 4 {
            return fail(format!("need at least 4 training identities, got {}", self.identities));
        }
        if self.test_identities < 1 {
            return fail("need at least one test identity".into());
        }
        if self.cameras < 2 {
            return fail(format!("need at least 2 cameras, got {}", self.cameras));
        }
        if self.frames_per_tracklet < 2 {
            return fail(format!(
                "need at least 2 frames per tracklet, got {}",
                self.frames_per_tracklet
            ));
        }
        if self.input_dim == 0 || self.latent_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        for (name, v) in [
            ("identity_spread", self.identity_spread),
            ("camera_spread", self.camera_spread),
            ("camera_bias", self.camera_bias),
            ("frame_noise", self.frame_noise),
            ("input_noise", self.input_noise),
            ("severity", self.severity),
            ("shift_rotation", self.shift_rotation),
            ("shift_anisotropy", self.shift_anisotropy),
            ("shift_translation", self.shift_translation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.frame_correlation) {
            return fail(format!(
                "frame_correlation must lie in [0, 1), got {}",
                self.frame_correlation
            ));
        }
        Ok(())
    }
}

/// One domain: train / gallery / query partitions plus how they were made.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub domain: Domain,
    pub config: GenerationConfig,
    pub train: Vec<Sample>,
    pub gallery: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl DatasetBundle {
    pub fn partition(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Gallery => &self.gallery,
            Split::Query => &self.query,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.train
            .iter()
            .chain(&self.gallery)
            .chain(&self.query)
            .next()
            .map_or(0, |s| s.features.len())
    }

    /// Summary row: (#identities, #cameras, #images) of a partition.
    pub fn summary(&self, split: Split) -> (usize, usize, usize) {
        let part = self.partition(split);
        let ids: BTreeSet<u32> = part.iter().map(|s| s.identity).collect();
        let cams: BTreeSet<u32> = part.iter().map(|s| s.camera).collect();
        (ids.len(), cams.len(), part.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomains {
    pub source: DatasetBundle,
    pub target: DatasetBundle,
}

/// Affine map applied to target-domain inputs: `x ↦ R · diag(scale) · x + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub rotation: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl DomainShift {
    fn draw(rng: &mut ChaCha8Rng, dim: usize, config: &GenerationConfig) -> Self {
        let sev = config.severity;
        let mut rotation = Tensor::identity(dim).into_data();
        // Givens rotations on (0,1), (2,3), … then (1,2), (3,4), …
        let planes: Vec<(usize, usize)> = (0..dim.saturating_sub(1))
            .step_by(2)
            .chain((1..dim.saturating_sub(1)).step_by(2))
            .map(|i| (i, i + 1))
            .collect();
        for (p, q) in planes {
            let base: f64 = rng.random_range(0.5..1.5);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let angle = sev * config.shift_rotation * sign * base;
            let (s, c) = angle.sin_cos();
            for row in 0..dim {
                let a = rotation[row * dim + p];
                let b = rotation[row * dim + q];
                rotation[row * dim + p] = c * a - s * b;
                rotation[row * dim + q] = s * a + c * b;
            }
        }
        let scale = (0..dim)
            .map(|_| (sev * config.shift_anisotropy * rng.random_range(-1.0..1.0f64)).exp())
            .collect();
        let shift = (0..dim)
            .map(|_| sev * config.shift_translation * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rotation, scale, shift }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        let scaled: Vec<f64> = x.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
        (0..dim)
            .map(|r| {
                let row = &self.rotation[r * dim..(r + 1) * dim];
                row.iter().zip(&scaled).map(|(a, b)| a * b).sum::<f64>() + self.shift[r]
            })
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    sd * rng.sample::<f64, _>(StandardNormal)
}

/// Generates a source and a target domain. Identities of the two domains
/// are disjoint; the same seed always yields the same data.
pub fn generate_synthetic(config: &GenerationConfig) -> Result<SyntheticDomains> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (din, dlat) = (config.input_dim, config.latent_dim);
    let mix_sd = 1.0 / (dlat as f64).sqrt();
    let mixing: Vec<f64> = (0..din * dlat).map(|_| normal(&mut rng, mix_sd)).collect();
    let shift = DomainShift::draw(&mut rng, din, config);

    let per_domain = (config.identities + config.test_identities) as u32;
    let tracklets_per_domain = per_domain * config.cameras as u32;
    let make = |domain: Domain, rng: &mut ChaCha8Rng| -> DatasetBundle {
        let (id_base, tr_base) = match domain {
            Domain::Source => (0, 0),
            Domain::Target => (per_domain, tracklets_per_domain),
        };
        let mut bundle = DatasetBundle {
            domain,
            config: config.clone(),
            train: Vec::new(),
            gallery: Vec::new(),
            query: Vec::new(),
        };
        let innov = (1.0 - config.frame_correlation.powi(2)).sqrt();
        let camera_offsets: Vec<Vec<f64>> = (0..config.cameras)
            .map(|_| (0..din).map(|_| normal(rng, config.camera_bias)).collect())
            .collect();
        for local in 0..per_domain {
            let identity = id_base + local;
            let centre: Vec<f64> = (0..dlat).map(|_| normal(rng, config.identity_spread)).collect();
            let held_out = local as usize >= config.identities;
            for camera in 0..config.cameras as u32 {
                let tracklet = tr_base + local * config.cameras as u32 + camera;
                let offset: Vec<f64> = (0..dlat).map(|_| normal(rng, config.camera_spread)).collect();
                let mut drift: Vec<f64> = (0..dlat).map(|_| normal(rng, 1.0)).collect();
                for frame in 0..config.frames_per_tracklet {
                    if frame > 0 {
                        for d in drift.iter_mut() {
                            *d = config.frame_correlation * *d + innov * normal(rng, 1.0);
                        }
                    }
                    let latent: Vec<f64> = (0..dlat)
                        .map(|k| centre[k] + offset[k] + config.frame_noise * drift[k])
                        .collect();
                    let mut x: Vec<f64> = (0..din)
                        .map(|r| {
                            let row = &mixing[r * dlat..(r + 1) * dlat];
                            row.iter().zip(&latent).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .collect();
                    for (v, o) in x.iter_mut().zip(&camera_offsets[camera as usize]) {
                        *v += o + normal(rng, config.input_noise);
                    }
                    if domain == Domain::Target {
                        x = shift.apply(&x);
                    }
                    let sample = Sample {
                        features: x,
                        identity,
                        tracklet,
                        domain,
                        camera,
                    };
                    match (held_out, frame) {
                        (false, _) => bundle.train.push(sample),
                        (true, 0) => bundle.query.push(sample),
                        (true, _) => bundle.gallery.push(sample),
                    }
                }
            }
        }
        bundle
    };
    let source = make(Domain::Source, &mut rng);
    let target = make(Domain::Target, &mut rng);
    Ok(SyntheticDomains { source, target })
}

/// Row-stacked features of the selected samples.
pub fn feature_matrix(samples: &[Sample], indices: &[usize]) -> Result<Tensor> {
    let cols = indices.first().map_or(0, |&i| samples[i].features.len());
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        let f = &samples[i].features;
        if f.len() != cols {
            return Err(Error::shape(
                "feature_matrix",
                format!("sample {i} has {} features, expected {cols}", f.len()),
            ));
        }
        data.extend_from_slice(f);
    }
    Tensor::matrix(indices.len(), cols, data)
}

pub fn all_features(samples: &[Sample]) -> Result<Tensor> {
    feature_matrix(samples, &(0..samples.len()).collect::<Vec<_>>())
}

/// Dense class indices `0..N` for the identities present, in ascending id order.
pub fn class_index(samples: &[Sample]) -> BTreeMap<u32, usize> {
    let ids: BTreeSet<u32> = samples.iter().map(|s| s.identity).collect();
    ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub occurrences: usize,
}

impl SamplerConfig {
    pub fn groups_per_batch(&self) -> usize {
        self.batch_size / self.occurrences
    }

    pub fn validate(&self) -> Result<()> {
        if self.occurrences < 2 {
            return Err(Error::Config(format!(
                "occurrences must be ≥ 2, got {}",
                self.occurrences
            )));
        }
        if !self.batch_size.is_multiple_of(self.occurrences) {
            return Err(Error::Config(format!(
                "occurrences {} must divide batch size {}",
                self.occurrences, self.batch_size
            )));
        }
        if self.batch_size / self.occurrences < 2 {
            return Err(Error::Config("a batch needs at least two groups".into()));
        }
        Ok(())
    }
}

/// What a P×K batch is grouped by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKey {
    /// Ground-truth identity (labelled source data).
    Identity,
    /// Tracklet id (unlabelled target data).
    Tracklet,
}

impl GroupKey {
    pub fn of(self, s: &Sample) -> u32 {
        match self {
            GroupKey::Identity => s.identity,
            GroupKey::Tracklet => s.tracklet,
        }
    }
}

/// Indices into a partition, laid out as consecutive runs of `occurrences`
/// samples per group, with the matching group labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub groups: Vec<u32>,
}

#[derive(Clone, Debug)]
struct Group {
    identity: u32,
    members: Vec<usize>,
}

/// P×K sampler. Each epoch shuffles every group's members, cuts them into
/// chunks of `occurrences`, shuffles the chunks and packs them into batches
/// of `batch_size / occurrences` chunks. No batch holds two groups of the
/// same identity, so two tracklets of one person never meet in a batch.
#[derive(Clone, Debug)]
pub struct PkSampler {
    config: SamplerConfig,
    key: GroupKey,
    groups: BTreeMap<u32, Group>,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(samples: &[Sample], key: GroupKey, config: SamplerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut groups: BTreeMap<u32, Group> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups
                .entry(key.of(s))
                .or_insert_with(|| Group {
                    identity: s.identity,
                    members: Vec::new(),
                })
                .members
                .push(i);
        }
        groups.retain(|_, g| g.members.len() >= config.occurrences);
        let identities: BTreeSet<u32> = groups.values().map(|g| g.identity).collect();
        let needed = config.groups_per_batch();
        if identities.len() < needed {
            return Err(Error::Input(format!(
                "batch needs {needed} groups with ≥ {} samples each, only {} available",
                config.occurrences,
                identities.len()
            )));
        }
        Ok(Self {
            config,
            key,
            groups,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn key(&self) -> GroupKey {
        self.key
    }

    /// Batches of the next epoch.
    pub fn epoch(&mut self) -> Vec<Batch> {
        let k = self.config.occurrences;
        let p = self.config.groups_per_batch();
        let mut chunks: Vec<(u32, u32, Vec<usize>)> = Vec::new();
        for (&label, group) in &self.groups {
            let mut members = group.members.clone();
            members.shuffle(&mut self.rng);
            for chunk in members.chunks_exact(k) {
                chunks.push((label, group.identity, chunk.to_vec()));
            }
        }
        chunks.shuffle(&mut self.rng);

        let mut pending: VecDeque<_> = chunks.into();
        let mut batches = Vec::new();
        loop {
            let mut used = BTreeSet::new();
            let mut picked = Vec::with_capacity(p);
            let mut deferred = VecDeque::new();
            while picked.len() < p {
                let Some(chunk) = pending.pop_front() else { break };
                if used.insert(chunk.1) {
                    picked.push(chunk);
                } else {
                    deferred.push_back(chunk);
                }
            }
            deferred.extend(pending);
            pending = deferred;
            if picked.len() < p {
                break;
            }
            let mut batch = Batch {
                indices: Vec::with_capacity(p * k),
                groups: Vec::with_capacity(p * k),
            };
            for (label, _, members) in picked {
                batch.groups.extend(std::iter::repeat_n(label, members.len()));
                batch.indices.extend(members);
            }
            batches.push(batch);
        }
        batches
    }
}

/// A single P×K batch from a fresh sampler.
pub fn pk_sample(samples: &[Sample], config: SamplerConfig, key: GroupKey, seed: u64) -> Result<Batch> {
    let mut sampler = PkSampler::new(samples, key, config, seed)?;
    sampler
        .epoch()
        .into_iter()
        .next()
        .ok_or_else(|| Error::Input("partition too small for one batch".into()))
}

const DATASET_MAGIC: &str = "# dmmd-dataset v1";
const CONFIG_PREFIX: &str = "#! ";

/// Writes a bundle as delimited text: a magic line, the generation config
/// and row counts as comments, a header, then one row per sample.
pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    out.push_str(&format!("# domain={}\n", bundle.domain));
    let cfg =
        toml::to_string(&bundle.config).map_err(|e| Error::Config(format!("serialising generation config: {e}")))?;
    for line in cfg.lines() {
        out.push_str(CONFIG_PREFIX);
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!(
        "# rows train={} gallery={} query={}\n",
        bundle.train.len(),
        bundle.gallery.len(),
        bundle.query.len()
    ));
    let dim = bundle.input_dim();
    out.push_str("split,id,tracklet,domain,camera");
    for k in 0..dim {
        out.push_str(&format!(",f{k}"));
    }
    out.push('\n');
    for split in Split::ALL {
        for s in bundle.partition(split) {
            out.push_str(&format!(
                "{},{},{},{},{}",
                split.as_str(),
                s.identity,
                s.tracklet,
                s.domain,
                s.camera
            ));
            for v in &s.features {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    match lines.next() {
        Some((_, l)) if l == DATASET_MAGIC => {}
        _ => return Err(err(1, format!("expected `{DATASET_MAGIC}`"))),
    }
    let mut domain = None;
    let mut cfg_text = String::new();
    let mut counts: Option<[usize; 3]> = None;
    let mut header_line = 0;
    let mut dim = 0;
    for (no, line) in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("# domain=") {
            domain = Some(rest.parse::<Domain>().map_err(|e| err(no, e.to_string()))?);
        } else if let Some(rest) = line.strip_prefix(CONFIG_PREFIX) {
            cfg_text.push_str(rest);
            cfg_text.push('\n');
        } else if let Some(rest) = line.strip_prefix("# rows ") {
            let mut c = [0usize; 3];
            for (slot, field) in c.iter_mut().zip(rest.split(' ')) {
                let value = field.split_once('=').map(|(_, v)| v);
                *slot = value
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(no, format!("malformed row count `{field}`")))?;
            }
            counts = Some(c);
        } else if line.starts_with("split,") {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[..5] != ["split", "id", "tracklet", "domain", "camera"][..]
                || fields[5..].iter().enumerate().any(|(k, f)| *f != format!("f{k}"))
            {
                return Err(err(no, "malformed header".into()));
            }
            dim = fields.len() - 5;
            header_line = no;
            break;
        } else {
            return Err(err(no, format!("unexpected line `{line}`")));
        }
    }
    if header_line == 0 {
        return Err(err(text.lines().count(), "missing header".into()));
    }
    let domain = domain.ok_or_else(|| err(header_line, "missing domain line".into()))?;
    let counts = counts.ok_or_else(|| err(header_line, "missing row counts".into()))?;
    let config: GenerationConfig =
        toml::from_str(&cfg_text).map_err(|e| err(header_line, format!("generation config: {e}")))?;

    let mut bundle = DatasetBundle {
        domain,
        config,
        train: Vec::new(),
        gallery: Vec::new(),
        query: Vec::new(),
    };
    let mut last_line = header_line;
    for (no, line) in lines {
        last_line = no;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + dim {
            return Err(err(no, format!("expected {} fields, found {}", 5 + dim, fields.len())));
        }
        let split: Split = fields[0].parse().map_err(|e: Error| err(no, e.to_string()))?;
        let int = |k: usize| -> Result<u32> {
            fields[k]
                .parse()
                .map_err(|_| err(no, format!("bad integer `{}`", fields[k])))
        };
        let sample_domain: Domain = fields[3].parse().map_err(|e: Error| err(no, e.to_string()))?;
        let features = fields[5..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(no, format!("bad feature value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let sample = Sample {
            features,
            identity: int(1)?,
            tracklet: int(2)?,
            domain: sample_domain,
            camera: int(4)?,
        };
        match split {
            Split::Train => bundle.train.push(sample),
            Split::Gallery => bundle.gallery.push(sample),
            Split::Query => bundle.query.push(sample),
        }
    }
    let got = [bundle.train.len(), bundle.gallery.len(), bundle.query.len()];
    if got != counts {
        return Err(err(
            last_line,
            format!("truncated or padded file: expected rows {counts:?}, found {got:?}"),
        ));
    }
    Ok(bundle)
}
