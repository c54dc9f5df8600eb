//! Evaluation metrics: top-1 accuracy, the minimum-nearest-distance
//! memorization ratio, and communication-cost accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::fed::{FederationConfig, GanMode, TargetNet};
use crate::nn::Network;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Top-1 accuracy of one classifier on a labeled set.
pub fn accuracy(net: &TargetNet, test: &LabeledDataset) -> Result<f64> {
    if test.len() == 0 {
        return Err(Error::Domain("accuracy on an empty test set".into()));
    }
    let logits = net.forward(&test.inputs)?;
    let c = logits.cols();
    let mut correct = 0usize;
    for (i, &label) in test.labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-group top-1 accuracy plus the unweighted mean over groups.
pub fn mean_accuracy(
    targets: &BTreeMap<usize, TargetNet>,
    test: &LabeledDataset,
) -> Result<(BTreeMap<usize, f64>, f64)> {
    if targets.is_empty() {
        return Err(Error::Domain("mean_accuracy over no networks".into()));
    }
    let mut per_key = BTreeMap::new();
    for (&key, net) in targets {
        per_key.insert(key, accuracy(net, test)?);
    }
    let mean = per_key.values().sum::<f64>() / per_key.len() as f64;
    Ok((per_key, mean))
}

/// Distance used by the memorization ratio.
pub enum Distance<'a> {
    /// Plain Euclidean distance in sample space.
    L2,
    /// Euclidean distance in the embedding of a probe network.
    ProbeFeature(&'a Network),
}

impl Distance<'_> {
    fn name(&self) -> &'static str {
        match self {
            Distance::L2 => "l2",
            Distance::ProbeFeature(_) => "probe_feature",
        }
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Distance::L2 => Ok(x.clone()),
            Distance::ProbeFeature(net) => net.forward(x),
        }
    }
}

/// Memorization audit: per-probe ratio of nearest-validation distance to
/// nearest-synthetic distance; a mean above 1 means synthetic samples sit
/// closer to the training data than fresh real data does.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MndReport {
    pub per_sample_ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub distance_kind: String,
    pub synthetic_size: usize,
    pub validation_size: usize,
    /// Probe points whose nearest synthetic distance was exactly zero;
    /// excluded from the mean.
    pub duplicate_hits: usize,
}

fn min_sq_dist(point: &[f64], set: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for r in 0..set.rows() {
        let row = set.row(r);
        let mut d = 0.0;
        for (a, b) in point.iter().zip(row) {
            d += (a - b) * (a - b);
        }
        if d < best {
            best = d;
        }
    }
    best
}

/// Mean minimum-nearest-distance ratio of `probe` against a synthetic set
/// `s` and an equal-sized held-out validation set `v`.
pub fn mnd_ratio(probe: &Tensor, s: &Tensor, v: &Tensor, distance: &Distance) -> Result<MndReport> {
    if s.rows() != v.rows() || s.rows() == 0 {
        return Err(Error::Domain(format!(
            "synthetic and validation sets must be equal-sized and non-empty (|S|={}, |V|={})",
            s.rows(),
            v.rows()
        )));
    }
    if probe.cols() != s.cols() || probe.cols() != v.cols() || probe.rows() == 0 {
        return Err(Error::Shape("probe/synthetic/validation dimension mismatch".into()));
    }
    let ep = distance.embed(probe)?;
    let es = distance.embed(s)?;
    let ev = distance.embed(v)?;
    let mut ratios = Vec::with_capacity(ep.rows());
    let mut duplicate_hits = 0usize;
    for i in 0..ep.rows() {
        let x = ep.row(i);
        let num = min_sq_dist(x, &ev).sqrt();
        let den = min_sq_dist(x, &es).sqrt();
        if den == 0.0 {
            duplicate_hits += 1;
        } else {
            ratios.push(num / den);
        }
    }
    if ratios.is_empty() {
        return Err(Error::Numeric(
            "every probe point exactly duplicated in the synthetic set".into(),
        ));
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(MndReport {
        per_sample_ratios: ratios,
        mean_ratio,
        distance_kind: distance.name().to_string(),
        synthetic_size: s.rows(),
        validation_size: v.rows(),
        duplicate_hits,
    })
}

/// Closed-form per-phase communication float counts (one direction; up and
/// down are symmetric). Assumes full participation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub fe_up: u64,
    pub fe_down: u64,
    pub ka_up: u64,
    pub ka_down: u64,
    pub tn_up: u64,
    pub tn_down: u64,
}

impl CommLedger {
    pub fn total_up(&self) -> u64 {
        self.fe_up + self.ka_up + self.tn_up
    }

    pub fn total_down(&self) -> u64 {
        self.fe_down + self.ka_down + self.tn_down
    }
}

/// Total generative rounds, counting the interleaved rounds of the GAN
/// update mode.
pub fn total_ka_rounds(cfg: &FederationConfig) -> usize {
    match cfg.gan_mode {
        GanMode::Freeze => cfg.rounds_ka,
        GanMode::Update => cfg.rounds_ka / 2 + cfg.rounds_tn,
    }
}

/// System-wide closed-form communication ledger. `group_keys[k]` is client
/// k's aggregation group; `target_params` maps a group to the per-round
/// exchanged target vector length (header-only size for the feature
/// variant). Target floats count only for groups shared by >= 2 clients.
pub fn comm_ledger(
    cfg: &FederationConfig,
    group_keys: &[usize],
    gen_params: usize,
    fe_params: usize,
    target_params: &BTreeMap<usize, usize>,
) -> CommLedger {
    let k = group_keys.len() as u64;
    let fe = cfg.rounds_fe as u64 * k * fe_params as u64;
    let ka = total_ka_rounds(cfg) as u64 * k * gen_params as u64;
    let mut group_sizes: BTreeMap<usize, u64> = BTreeMap::new();
    for &g in group_keys {
        *group_sizes.entry(g).or_default() += 1;
    }
    let mut tn_per_round = 0u64;
    for &g in group_keys {
        if group_sizes[&g] >= 2 {
            tn_per_round += *target_params.get(&g).unwrap_or(&0) as u64;
        }
    }
    let tn = cfg.rounds_tn as u64 * tn_per_round;
    CommLedger { fe_up: fe, fe_down: fe, ka_up: ka, ka_down: ka, tn_up: tn, tn_down: tn }
}
