//! Client/server state, the architecture zoo, and parameter aggregation.

pub mod loops;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::gen::{GenArch, GenFamily, GenModel, GuidanceConfig};
use crate::nn::{loss_and_grad, Activation, LayerSpec, Loss, Network};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Shrinking shared-stem widths; homogeneity level h in 1..=5 shares the
/// first h rungs, level 6 shares the whole network.
const STEM_WIDTHS: [usize; 5] = [32, 24, 16, 12, 10];

/// Complete homogeneity: feature extractor is the entire network.
pub const MAX_HOMOGENEITY: usize = 6;

/// Heterogeneous header hidden widths. The first hidden width is uniform
/// across the zoo so the LG-style first-layer aggregation baseline stays
/// applicable.
const HEAD_ZOO: [&[usize]; 10] = [
    &[16],
    &[16, 8],
    &[16, 12],
    &[16, 16],
    &[16, 8, 8],
    &[16, 24],
    &[16, 12, 8],
    &[16, 32],
    &[16, 16, 8],
    &[16, 10],
];

/// A target classifier split into a (possibly empty) shared feature
/// extractor and an architecture-specific header.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNet {
    pub fe: Network,
    pub head: Network,
}

impl TargetNet {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.head.is_identity() {
            return self.fe.forward(x);
        }
        if self.fe.is_identity() {
            return self.head.forward(x);
        }
        self.head.forward(&self.fe.forward(x)?)
    }

    pub fn feature_dim(&self) -> usize {
        self.fe.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.fe.param_count() + self.head.param_count()
    }

    /// Feature extractor first, then header.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = self.fe.flatten_params();
        v.extend(self.head.flatten_params());
        v
    }

    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat length {} != target parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let n = self.fe.param_count();
        self.fe.unflatten_params(&flat[..n])?;
        self.head.unflatten_params(&flat[n..])
    }

    /// One SGD cross-entropy step through the whole network. Returns the
    /// batch loss.
    pub fn sgd_step_full(&mut self, x: &Tensor, y: &[usize], lr: f64) -> Result<f64> {
        if self.head.is_identity() {
            let (j, grad) = loss_and_grad(&self.fe, x, &Loss::CrossEntropy(y))?;
            let mut p = self.fe.flatten_params();
            OptimizerState::sgd(lr).step(&mut p, &grad)?;
            self.fe.unflatten_params(&p)?;
            return Ok(j);
        }
        if self.fe.is_identity() {
            let (j, grad) = loss_and_grad(&self.head, x, &Loss::CrossEntropy(y))?;
            let mut p = self.head.flatten_params();
            OptimizerState::sgd(lr).step(&mut p, &grad)?;
            self.head.unflatten_params(&p)?;
            return Ok(j);
        }
        let fe_cache = self.fe.forward_cache(x)?;
        let head_cache = self.head.forward_cache(fe_cache.output())?;
        let (j, dout) = crate::nn::softmax_cross_entropy(head_cache.output(), y)?;
        let (head_grad, d_features) = self.head.backward(&head_cache, &dout)?;
        let (fe_grad, _) = self.fe.backward(&fe_cache, &d_features)?;
        let mut flat = self.flatten_params();
        let mut grads = fe_grad;
        grads.extend(head_grad);
        OptimizerState::sgd(lr).step(&mut flat, &grads)?;
        self.unflatten_params(&flat)?;
        Ok(j)
    }

    /// One SGD cross-entropy step on the header only; `features` is the
    /// header input (already through the frozen extractor).
    pub fn sgd_step_head(&mut self, features: &Tensor, y: &[usize], lr: f64) -> Result<f64> {
        if self.head.is_identity() {
            // Complete homogeneity: nothing to train in stage (iii).
            let out = self.fe.is_identity().then(|| features.clone());
            let logits = match out {
                Some(t) => t,
                None => return Ok(0.0),
            };
            let (j, _) = crate::nn::softmax_cross_entropy(&logits, y)?;
            return Ok(j);
        }
        let (j, grad) = loss_and_grad(&self.head, features, &Loss::CrossEntropy(y))?;
        let mut p = self.head.flatten_params();
        OptimizerState::sgd(lr).step(&mut p, &grad)?;
        self.head.unflatten_params(&p)?;
        Ok(j)
    }
}

/// One candidate architecture: extractor and header layer specs.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub fe_specs: Vec<LayerSpec>,
    pub head_specs: Vec<LayerSpec>,
    pub input_dim: usize,
}

impl TargetSpec {
    /// Zero-parameter instantiation; callers init from a named stream.
    pub fn instantiate(&self) -> Result<TargetNet> {
        let fe = if self.fe_specs.is_empty() {
            Network::identity(self.input_dim)
        } else {
            Network::new(&self.fe_specs)?
        };
        let head = if self.head_specs.is_empty() {
            Network::identity(fe.out_dim())
        } else {
            Network::new(&self.head_specs)?
        };
        Ok(TargetNet { fe, head })
    }
}

fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense { in_dim: i, out_dim: o }
}

fn relu() -> LayerSpec {
    LayerSpec::Act(Activation::Relu)
}

/// Feature dimension at a homogeneity level for the standard zoo.
pub fn feature_dim_at(input_dim: usize, class_count: usize, hl: usize) -> usize {
    match hl {
        0 => input_dim,
        h if h <= STEM_WIDTHS.len() => STEM_WIDTHS[h - 1],
        _ => class_count,
    }
}

/// Builds the M-candidate heterogeneous architecture zoo at a homogeneity
/// level. Level 0 is fully heterogeneous (empty shared extractor);
/// level 6 is one fully shared network with empty headers.
pub fn build_archs(
    input_dim: usize,
    class_count: usize,
    arch_count: usize,
    hl: usize,
) -> Result<Vec<TargetSpec>> {
    if arch_count == 0 || hl > MAX_HOMOGENEITY {
        return Err(Error::Domain(format!(
            "invalid zoo request: M={arch_count} hl={hl} (max {MAX_HOMOGENEITY})"
        )));
    }
    let mut fe_specs = Vec::new();
    let mut cur = input_dim;
    for &w in STEM_WIDTHS.iter().take(hl.min(STEM_WIDTHS.len())) {
        fe_specs.push(dense(cur, w));
        fe_specs.push(relu());
        cur = w;
    }
    if hl == MAX_HOMOGENEITY {
        // Whole network shared: stem + one shared head ending in logits.
        fe_specs.push(dense(cur, 16));
        fe_specs.push(relu());
        fe_specs.push(dense(16, class_count));
        let spec = TargetSpec { fe_specs, head_specs: Vec::new(), input_dim };
        return Ok(vec![spec; arch_count]);
    }
    let mut out = Vec::with_capacity(arch_count);
    for m in 0..arch_count {
        let hidden = HEAD_ZOO[m % HEAD_ZOO.len()];
        let mut head_specs = Vec::new();
        let mut hcur = cur;
        for &w in hidden {
            head_specs.push(dense(hcur, w));
            head_specs.push(relu());
            hcur = w;
        }
        head_specs.push(dense(hcur, class_count));
        out.push(TargetSpec { fe_specs: fe_specs.clone(), head_specs, input_dim });
    }
    Ok(out)
}

/// One client's fixed identity: architecture index and local shard.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub arch_index: usize,
    pub shard: LabeledDataset,
}

/// Server-side global state.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub gen_global: Option<GenModel>,
    pub target_global: BTreeMap<usize, TargetNet>,
    pub fe_global: Option<Network>,
}

/// GAN handling during target-network training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GanMode {
    Freeze,
    Update,
}

impl std::str::FromStr for GanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(GanMode::Freeze),
            "update" => Ok(GanMode::Update),
            other => Err(Error::Parse(format!("unknown gan_mode `{other}`"))),
        }
    }
}

/// Every knob of the round loops.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub rounds_ka: usize,
    pub rounds_tn: usize,
    pub rounds_fe: usize,
    pub epochs_gen: usize,
    pub epochs_syn: usize,
    pub epochs_real: usize,
    pub epochs_warmup: usize,
    pub target_lr: f64,
    /// Generative learning rate; None uses the family default.
    pub gen_lr: Option<f64>,
    pub batch: usize,
    pub client_count: usize,
    pub arch_count: usize,
    pub gen_family: GenFamily,
    pub gen_arch: GenArch,
    pub guidance: GuidanceConfig,
    pub gan_mode: GanMode,
    pub homogeneity_level: usize,
    /// Fraction of clients participating each round; 1.0 = everyone.
    pub participation: f64,
    pub seed: u64,
    /// Run client updates on a thread pool; bitwise identical to serial.
    pub parallel: bool,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_count == 0 || self.arch_count == 0 || self.batch == 0 {
            return Err(Error::Config("client count, arch count and batch must be positive".into()));
        }
        if self.target_lr <= 0.0 {
            return Err(Error::Config("target learning rate must be positive".into()));
        }
        if self.gan_mode == GanMode::Update && self.gen_family != GenFamily::Cgan {
            return Err(Error::Config("gan_mode=update is only valid for the cgan family".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config("participation must lie in (0, 1]".into()));
        }
        if self.homogeneity_level > MAX_HOMOGENEITY {
            return Err(Error::Config(format!(
                "homogeneity level {} exceeds {MAX_HOMOGENEITY}",
                self.homogeneity_level
            )));
        }
        Ok(())
    }
}

/// Coordinate-wise arithmetic mean of equal-length parameter vectors,
/// summed in ascending client-index order. Bitwise-identical inputs are
/// returned unchanged so averaging is exactly idempotent.
pub fn aggregate(param_sets: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = param_sets
        .first()
        .ok_or_else(|| Error::Domain("aggregate of empty set".into()))?;
    if param_sets.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Domain("aggregate length mismatch".into()));
    }
    if param_sets.iter().all(|p| p == first) {
        return Ok(first.clone());
    }
    let k = param_sets.len() as f64;
    let mut out = vec![0.0; first.len()];
    for set in param_sets {
        for (o, &v) in out.iter_mut().zip(set) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= k;
    }
    Ok(out)
}

/// Per-group mean keyed by an arbitrary grouping index (architecture for
/// grouped aggregation, client id for the local-only baseline). Groups
/// collect members in ascending input order.
pub fn aggregate_by_key(items: &[(usize, Vec<f64>)]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (key, params) in items {
        groups.entry(*key).or_default().push(params.clone());
    }
    groups
        .into_iter()
        .map(|(key, sets)| Ok((key, aggregate(&sets)?)))
        .collect()
}
