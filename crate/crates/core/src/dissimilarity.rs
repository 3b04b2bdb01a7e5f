//! Alignment in the dissimilarity space.
//!
//! Embeddings of a batch are turned into two flat samples of Euclidean
//! distances: within-class (pairs sharing a group label) and between-class
//! (pairs with different labels). Source batches are grouped by identity,
//! target batches by tracklet. The D-MMD loss is the sum of the kernel MMD
//! between the source and target within-class samples, the same for the
//! between-class samples, and the plain feature-space MMD of the embeddings.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Domain;
use crate::error::{Error, Result};

/// Bin count used by histogram export and the overlap diagnostic.
pub const HISTOGRAM_BINS: usize = 50;

/// Bandwidth multipliers of the median heuristic.
pub const MEDIAN_LADDER: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// All unordered pairs `(i, j)` with `i < j`, row-major.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Position of `(i, j)`, `i < j < n`, in [`all_pairs`].
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub fn within_class_pairs<L: PartialEq>(labels: &[L]) -> Vec<(usize, usize)> {
    all_pairs(labels.len())
        .into_iter()
        .filter(|&(i, j)| labels[i] == labels[j])
        .collect()
}

pub fn between_class_pairs<L: PartialEq>(labels: &[L]) -> Vec<(usize, usize)> {
    all_pairs(labels.len())
        .into_iter()
        .filter(|&(i, j)| labels[i] != labels[j])
        .collect()
}

/// `‖e_i − e_j‖₂` for every listed pair, as a vector node.
pub fn pair_distances(g: &mut Graph, embeddings: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let a = g.index_select(embeddings, &left)?;
    let b = g.index_select(embeddings, &right)?;
    let diff = g.sub(a, b)?;
    g.row_norm(diff)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    WithinClass,
    BetweenClass,
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::WithinClass => "wc",
            DistanceKind::BetweenClass => "bc",
        })
    }
}

/// A sample of pairwise distances living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct DistanceDistribution {
    pub values: Var,
    pub kind: DistanceKind,
    pub domain: Domain,
    pub len: usize,
}

impl DistanceDistribution {
    pub fn values<'g>(&self, g: &'g Graph) -> &'g [f64] {
        g.value(self.values).data()
    }
}

fn check_batch(g: &Graph, embeddings: Var, n: usize) -> Result<()> {
    let v = g.value(embeddings);
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if v.shape().len() != 2 || v.rows() != n {
        return Err(Error::shape(
            "pair distances",
            format!("embeddings {:?} for {n} labels", v.shape()),
        ));
    }
    Ok(())
}

/// Distances between every pair of samples sharing a group label.
pub fn wc_distances<L: PartialEq>(
    g: &mut Graph,
    embeddings: Var,
    groups: &[L],
    domain: Domain,
) -> Result<DistanceDistribution> {
    check_batch(g, embeddings, groups.len())?;
    let pairs = within_class_pairs(groups);
    let values = pair_distances(g, embeddings, &pairs)?;
    Ok(DistanceDistribution {
        values,
        kind: DistanceKind::WithinClass,
        domain,
        len: pairs.len(),
    })
}

/// Distances between every pair of samples with different group labels.
pub fn bc_distances<L: PartialEq>(
    g: &mut Graph,
    embeddings: Var,
    groups: &[L],
    domain: Domain,
) -> Result<DistanceDistribution> {
    check_batch(g, embeddings, groups.len())?;
    if groups.iter().all(|l| *l == groups[0]) {
        return Err(Error::Input("between-class distances need at least two groups".into()));
    }
    let pairs = between_class_pairs(groups);
    let values = pair_distances(g, embeddings, &pairs)?;
    Ok(DistanceDistribution {
        values,
        kind: DistanceKind::BetweenClass,
        domain,
        len: pairs.len(),
    })
}

/// Plain within/between-class distance values for an embedding matrix.
pub fn distance_values<L: PartialEq>(embeddings: &Tensor, groups: &[L]) -> (Vec<f64>, Vec<f64>) {
    let mut wc = Vec::new();
    let mut bc = Vec::new();
    for (i, j) in all_pairs(groups.len()) {
        let d = embeddings
            .row(i)
            .iter()
            .zip(embeddings.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if groups[i] == groups[j] {
            wc.push(d);
        } else {
            bc.push(d);
        }
    }
    (wc, bc)
}

/// Gaussian RBF kernel bandwidths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    /// Fixed σ values.
    Fixed { bandwidths: Vec<f64> },
    /// σ = multiplier × median pairwise gap of the pooled sample, recomputed
    /// for every MMD evaluation and held constant during differentiation.
    Median { multipliers: Vec<f64> },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Median {
            multipliers: MEDIAN_LADDER.to_vec(),
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let list = match self {
            KernelConfig::Fixed { bandwidths } => bandwidths,
            KernelConfig::Median { multipliers } => multipliers,
        };
        if list.is_empty() {
            return Err(Error::Config("kernel needs at least one bandwidth".into()));
        }
        if let Some(bad) = list.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!("kernel bandwidths must be positive, got {bad}")));
        }
        Ok(())
    }

    /// Concrete σ values for a pair of samples.
    pub fn bandwidths(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            KernelConfig::Fixed { bandwidths } => Ok(bandwidths.clone()),
            KernelConfig::Median { multipliers } => {
                let mut median = median_pairwise_gap(a, b);
                // Degenerate pooled sample (all points coincide).
                if median.is_nan() || median <= 1e-12 {
                    median = 1.0;
                }
                Ok(multipliers.iter().map(|m| m * median).collect())
            }
        }
    }
}

/// Median Euclidean distance over all distinct pairs of the pooled rows of
/// `a` and `b`. Scalar samples use an O(n log n) selection.
pub fn median_pairwise_gap(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let total = n * (n - 1) / 2;
    let ranks = if total % 2 == 1 {
        vec![total / 2]
    } else {
        vec![total / 2 - 1, total / 2]
    };

    let picked: Vec<f64> = if a.cols() == 1 {
        let mut sorted: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        sorted.sort_by(f64::total_cmp);
        ranks.iter().map(|&k| kth_scalar_gap(&sorted, k)).collect()
    } else {
        let mut gaps = Vec::with_capacity(total);
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                gaps.push(d);
            }
        }
        ranks
            .iter()
            .map(|&k| *gaps.select_nth_unstable_by(k, f64::total_cmp).1)
            .collect()
    };
    picked.iter().sum::<f64>() / picked.len() as f64
}

// Number of pairs i < j with sorted[j] − sorted[i] ≤ t.
fn count_gaps_le(sorted: &[f64], t: f64) -> usize {
    let mut count = 0;
    let mut lo = 0;
    for hi in 0..sorted.len() {
        while sorted[hi] - sorted[lo] > t {
            lo += 1;
        }
        count += hi - lo;
    }
    count
}

// k-th smallest (0-based) pairwise gap of a sorted sample, by bisection on the
// bit pattern of non-negative doubles (which orders like the values).
fn kth_scalar_gap(sorted: &[f64], k: usize) -> f64 {
    let span = sorted[sorted.len() - 1] - sorted[0];
    let (mut lo, mut hi) = (0u64, span.to_bits());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if count_gaps_le(sorted, f64::from_bits(mid)) > k {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    f64::from_bits(lo)
}

/// Biased (V-statistic) kernel MMD between samples `a` and `b`:
///
/// `mean k(a, a') + mean k(b, b') − 2 mean k(a, b)`, diagonal terms included.
///
/// Vectors are samples of scalars, matrices samples of row vectors.
pub fn mmd(g: &mut Graph, a: Var, b: Var, kernel: &KernelConfig) -> Result<Var> {
    if g.value(a).is_empty() || g.value(b).is_empty() {
        return Err(Error::Input("MMD needs non-empty samples".into()));
    }
    let sigmas = kernel.bandwidths(g.value(a), g.value(b))?;
    let kaa = g.kernel_mean(a, a, &sigmas)?;
    let kbb = g.kernel_mean(b, b, &sigmas)?;
    // Ordering the cross term by content keeps mmd(a, b) and mmd(b, a)
    // bit-identical whichever node was created first.
    let (x, y) = match g.value(a).data().partial_cmp(g.value(b).data()) {
        Some(std::cmp::Ordering::Greater) => (b, a),
        _ => (a, b),
    };
    let kab = g.kernel_mean(x, y, &sigmas)?;
    let within = g.add(kaa, kbb)?;
    let cross = g.affine(kab, -2.0, 0.0)?;
    g.add(within, cross)
}

/// MMD between the source and target embedding batches in feature space.
pub fn feature_mmd(g: &mut Graph, source: Var, target: Var, kernel: &KernelConfig) -> Result<Var> {
    for v in [source, target] {
        if g.value(v).shape().len() != 2 {
            return Err(Error::shape(
                "feature_mmd",
                format!("expected embedding matrix, got {:?}", g.value(v).shape()),
            ));
        }
    }
    mmd(g, source, target, kernel)
}

/// Which D-MMD terms contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub wc: bool,
    pub bc: bool,
    pub feature: bool,
}

impl LossToggles {
    pub const ALL: Self = Self {
        wc: true,
        bc: true,
        feature: true,
    };
    pub const NONE: Self = Self {
        wc: false,
        bc: false,
        feature: false,
    };

    pub fn any(&self) -> bool {
        self.wc || self.bc || self.feature
    }
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// Nodes of the D-MMD loss; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct DmmdTerms {
    pub wc: Option<Var>,
    pub bc: Option<Var>,
    pub feature: Option<Var>,
    pub total: Var,
}

impl DmmdTerms {
    pub fn wc_value(&self, g: &Graph) -> f64 {
        self.wc.map_or(0.0, |v| g.scalar(v))
    }

    pub fn bc_value(&self, g: &Graph) -> f64 {
        self.bc.map_or(0.0, |v| g.scalar(v))
    }

    pub fn feature_value(&self, g: &Graph) -> f64 {
        self.feature.map_or(0.0, |v| g.scalar(v))
    }
}

/// An embedded batch together with its grouping (identity or tracklet).
#[derive(Clone, Copy, Debug)]
pub struct GroupedBatch<'a, L> {
    pub embeddings: Var,
    pub groups: &'a [L],
}

/// `MMD(d_s^wc, d_t^wc) + MMD(d_s^bc, d_t^bc) + MMD(φ_s, φ_t)`, restricted to
/// the enabled terms. With every term disabled the result is a constant 0.
pub fn dmmd_loss<L: PartialEq>(
    g: &mut Graph,
    source: GroupedBatch<'_, L>,
    target: GroupedBatch<'_, L>,
    kernel: &KernelConfig,
    toggles: LossToggles,
) -> Result<DmmdTerms> {
    let mut wc = None;
    let mut bc = None;
    let mut feature = None;

    if toggles.wc {
        let s = wc_distances(g, source.embeddings, source.groups, Domain::Source)?;
        let t = wc_distances(g, target.embeddings, target.groups, Domain::Target)?;
        wc = Some(mmd(g, s.values, t.values, kernel)?);
    }
    if toggles.bc {
        let s = bc_distances(g, source.embeddings, source.groups, Domain::Source)?;
        let t = bc_distances(g, target.embeddings, target.groups, Domain::Target)?;
        bc = Some(mmd(g, s.values, t.values, kernel)?);
    }
    if toggles.feature {
        feature = Some(feature_mmd(g, source.embeddings, target.embeddings, kernel)?);
    }

    let mut total: Option<Var> = None;
    for term in [wc, bc, feature].into_iter().flatten() {
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    Ok(DmmdTerms { wc, bc, feature, total })
}

/// Distance-computation count for a batch of `batch_size` samples with
/// `occurrences` samples per identity, evaluated literally as
/// `(N_o − 1)! · |B|/N_o + N_o · (|B|/N_o − 1)²`.
///
/// This is a reporting formula; the loss itself enumerates every pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistanceOpCount {
    pub within_class: u64,
    pub between_class: u64,
    pub total: u64,
}

pub fn distance_op_count(batch_size: u64, occurrences: u64) -> Result<DistanceOpCount> {
    if occurrences < 2 {
        return Err(Error::Config(format!("occurrences must be ≥ 2, got {occurrences}")));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(occurrences) {
        return Err(Error::Config(format!(
            "occurrences {occurrences} must divide batch size {batch_size}"
        )));
    }
    let overflow = || Error::Config("distance count overflows u64".into());
    let groups = batch_size / occurrences;
    let factorial = (1..occurrences)
        .try_fold(1u64, |acc, k| acc.checked_mul(k))
        .ok_or_else(overflow)?;
    let within_class = factorial.checked_mul(groups).ok_or_else(overflow)?;
    let between_class = (groups - 1)
        .checked_mul(groups - 1)
        .and_then(|sq| sq.checked_mul(occurrences))
        .ok_or_else(overflow)?;
    Ok(DistanceOpCount {
        within_class,
        between_class,
        total: within_class.checked_add(between_class).ok_or_else(overflow)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Counts of `values` in `bins` equal-width bins over `[0, upper]`; the last
/// bin is closed on the right.
pub fn bin_counts(values: &[f64], upper: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = upper / bins as f64;
    for &v in values {
        let idx = if width > 0.0 { (v / width).floor() as usize } else { 0 };
        counts[idx.min(bins - 1)] += 1;
    }
    counts
}

/// Fixed-count histogram over `[0, max(values)]`.
pub fn histogram(values: &[f64]) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::Input("cannot histogram an empty distribution".into()));
    }
    if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Input(format!("distances must be finite and ≥ 0, got {bad}")));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let upper = if max > 0.0 { max } else { 1.0 };
    let width = upper / HISTOGRAM_BINS as f64;
    Ok(bin_counts(values, upper, HISTOGRAM_BINS)
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            left: i as f64 * width,
            right: if i + 1 == HISTOGRAM_BINS {
                upper
            } else {
                (i + 1) as f64 * width
            },
            count,
        })
        .collect())
}

/// Writes `bin_left,bin_right,count` rows with a header line.
pub fn write_histogram(path: &Path, values: &[f64]) -> Result<()> {
    let bins = histogram(values)?;
    let ctx = || format!("writing histogram {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "bin_left,bin_right,count").map_err(|e| Error::io(ctx(), e))?;
    for b in bins {
        writeln!(w, "{},{},{}", b.left, b.right, b.count).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}
