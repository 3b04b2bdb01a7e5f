//! Supervised objectives on the labelled source domain: label-smoothed
//! softmax cross-entropy plus a weighted batch-hard triplet loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dissimilarity::{all_pairs, pair_distances, pair_index};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedLossConfig {
    /// Label-smoothing strength in `[0, 1]`.
    pub epsilon: f64,
    /// Triplet margin, strictly positive.
    pub margin: f64,
    /// Weight of the triplet term, non-negative.
    pub lambda: f64,
}

impl Default for SupervisedLossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            margin: 0.3,
            lambda: 1.0,
        }
    }
}

impl SupervisedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `(1 − ε) · CE + ε / N` over a `K × N` logit matrix, with class ids in `0..N`.
///
/// The `ε / N` term is a constant offset: it shifts the reported value but
/// carries no gradient.
pub fn cross_entropy_smoothed(g: &mut Graph, logits: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("cross_entropy", format!("logits {shape:?}")));
    }
    let (k, n) = (shape[0], shape[1]);
    if labels.len() != k {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch of {k}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Input(format!("label {bad} out of range for {n} classes")));
    }
    let lse = g.logsumexp_rows(logits)?;
    let target = g.pick(logits, labels)?;
    let nll = g.sub(lse, target)?;
    let ce = g.mean(nll)?;
    g.affine(ce, 1.0 - epsilon, epsilon / n as f64)
}

/// Batch-hard triplet loss: for each anchor, `[m + max d(a,p) − min d(a,n)]₊`
/// on Euclidean embedding distances, averaged over all anchors.
///
/// Ties in the max/min are resolved towards the lowest batch index.
pub fn triplet_batch_hard<L: PartialEq>(g: &mut Graph, embeddings: Var, labels: &[L], margin: f64) -> Result<Var> {
    let n = labels.len();
    if g.value(embeddings).rows() != n || g.value(embeddings).shape().len() != 2 {
        return Err(Error::shape(
            "triplet",
            format!("embeddings {:?} for {n} labels", g.value(embeddings).shape()),
        ));
    }
    for (i, li) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, lj)| j != i && lj == li) {
            return Err(Error::Input(format!(
                "sample {i} has no positive in the batch; batch-hard mining needs ≥ 2 samples per identity"
            )));
        }
    }
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(Error::Input(
            "batch holds a single identity; batch-hard mining needs ≥ 2 identities".into(),
        ));
    }

    let pairs = all_pairs(n);
    let dist = pair_distances(g, embeddings, &pairs)?;
    let d = g.value(dist).data();

    let mut hardest_pos = Vec::with_capacity(n);
    let mut hardest_neg = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != a) {
            let idx = pair_index(n, a.min(j), a.max(j));
            let v = d[idx];
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| v > best) {
                    pos = Some((idx, v));
                }
            } else if neg.is_none_or(|(_, best)| v < best) {
                neg = Some((idx, v));
            }
        }
        // Both exist: validated above.
        hardest_pos.push(pos.map(|p| p.0).unwrap_or_default());
        hardest_neg.push(neg.map(|p| p.0).unwrap_or_default());
    }

    let pos = g.index_select(dist, &hardest_pos)?;
    let neg = g.index_select(dist, &hardest_neg)?;
    let gap = g.sub(pos, neg)?;
    let shifted = g.affine(gap, 1.0, margin)?;
    let hinge = g.relu(shifted)?;
    g.mean(hinge)
}

/// Nodes of the supervised objective.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedTerms {
    pub cross_entropy: Var,
    pub triplet: Var,
    pub total: Var,
}

/// `L_ces + λ · L_tri`.
pub fn supervised_loss<L: PartialEq>(
    g: &mut Graph,
    logits: Var,
    embeddings: Var,
    classes: &[usize],
    groups: &[L],
    config: &SupervisedLossConfig,
) -> Result<SupervisedTerms> {
    config.validate()?;
    let cross_entropy = cross_entropy_smoothed(g, logits, classes, config.epsilon)?;
    let triplet = triplet_batch_hard(g, embeddings, groups, config.margin)?;
    let weighted = g.affine(triplet, config.lambda, 0.0)?;
    let total = g.add(cross_entropy, weighted)?;
    Ok(SupervisedTerms {
        cross_entropy,
        triplet,
        total,
    })
}
