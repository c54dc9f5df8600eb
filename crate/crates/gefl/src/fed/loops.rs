//! The federated round loops: generative knowledge aggregation, target
//! network training, feature-extractor warm-up, and the baselines.
//!
//! Every client update is a pure function of (global params, shard, named
//! RNG stream), so the per-round client map runs serially or on a thread
//! pool with bitwise-identical results.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::gen::GenModel;
use crate::metrics::mean_accuracy;
use crate::nn::Network;
use crate::rng::{stream, tag};
use crate::{Error, Result};

use super::{
    aggregate, aggregate_by_key, build_archs, ClientState, FederationConfig, GanMode, ServerState,
    TargetNet, TargetSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Fe,
    Ka,
    Tn,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Fe => "fe",
            Stage::Ka => "ka",
            Stage::Tn => "tn",
        })
    }
}

/// One row of the round-indexed experiment trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub stage: Stage,
    /// Aggregation-group key: architecture index, or client id for the
    /// local-only baseline; 0 for stage-level rows without a group.
    pub arch: usize,
    pub accuracy: Option<f64>,
    pub loss: f64,
    pub comm_up_floats: u64,
    pub comm_down_floats: u64,
}

/// Round trace plus cumulative communication and sample bookkeeping.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub cum_up_floats: u64,
    pub cum_down_floats: u64,
    pub syn_samples: u64,
    pub real_samples: u64,
}

impl Trace {
    fn add_comm(&mut self, up: u64, down: u64) {
        self.cum_up_floats += up;
        self.cum_down_floats += down;
    }

    /// Mean accuracy of the last evaluated round, unweighted over groups.
    pub fn final_mean_accuracy(&self) -> Option<f64> {
        let last_round = self
            .rows
            .iter()
            .rev()
            .find(|r| r.accuracy.is_some())
            .map(|r| (r.round, r.stage))?;
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (r.round, r.stage) == last_round)
            .filter_map(|r| r.accuracy)
            .collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Full-batch-size minibatch index lists covering one epoch: a seeded
/// shuffle cycled so every batch has exactly `batch` elements and the
/// epoch has ceil(n / batch) steps.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let steps = n.div_ceil(batch);
    (0..steps)
        .map(|s| (0..batch).map(|j| perm[(s * batch + j) % n]).collect())
        .collect()
}

/// The round's participating clients: everyone at participation 1.0,
/// otherwise a seeded without-replacement draw returned in ascending id
/// order so the aggregation order stays fixed.
fn participants<'a>(
    clients: &'a [ClientState],
    cfg: &FederationConfig,
    stage_tag: u64,
    round: usize,
) -> Vec<&'a ClientState> {
    if cfg.participation >= 1.0 {
        return clients.iter().collect();
    }
    let take = ((cfg.participation * clients.len() as f64).ceil() as usize).max(1);
    let mut idx: Vec<usize> = (0..clients.len()).collect();
    idx.shuffle(&mut stream(cfg.seed, &[tag::PARTITION, stage_tag, round as u64]));
    idx.truncate(take);
    idx.sort_unstable();
    idx.into_iter().map(|i| &clients[i]).collect()
}

fn map_clients<T: Send>(
    parallel: bool,
    clients: &[&ClientState],
    f: impl Fn(&ClientState) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel {
        clients.par_iter().map(|c| f(c)).collect()
    } else {
        clients.iter().map(|c| f(c)).collect()
    }
}

/// Builds client states by evenly assigning architectures `k mod M`.
pub fn init_clients(shards: Vec<LabeledDataset>, arch_count: usize) -> Vec<ClientState> {
    shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientState { id, arch_index: id % arch_count, shard })
        .collect()
}

/// Instantiates and seeds one global target per aggregation key.
pub fn init_targets(
    zoo: &[TargetSpec],
    clients: &[ClientState],
    group_by_client: bool,
    seed: u64,
) -> Result<BTreeMap<usize, TargetNet>> {
    let mut out = BTreeMap::new();
    for c in clients {
        let key = if group_by_client { c.id } else { c.arch_index };
        if !out.contains_key(&key) {
            let mut net = zoo[c.arch_index].instantiate()?;
            let mut rng = stream(seed, &[tag::INIT, 2, key as u64]);
            net.fe.init_params(&mut rng);
            net.head.init_params(&mut rng);
            out.insert(key, net);
        }
    }
    Ok(out)
}

struct GenUpdate {
    params: Vec<f64>,
    loss_sum: f64,
    steps: usize,
}

/// Stage (i) of the round loop: `rounds` federated rounds of local
/// generative training followed by full averaging. With `fe` given the
/// training batches are feature representations (the GeFL-F variant).
pub fn generative_knowledge_aggregation(
    gen: &mut GenModel,
    clients: &[ClientState],
    cfg: &FederationConfig,
    fe: Option<&Network>,
    rounds: usize,
    round_offset: usize,
    trace: &mut Trace,
) -> Result<()> {
    let gen_size = gen.param_count() as u64;
    for round in 0..rounds {
        let active = participants(clients, cfg, tag::KA, round_offset + round);
        let global = &*gen;
        let results = map_clients(cfg.parallel, &active, |client| {
            let mut local = global.clone();
            let mut opts = local.default_optimizers(cfg.gen_lr);
            let mut rng = stream(cfg.seed, &[tag::KA, (round_offset + round) as u64, client.id as u64]);
            let mut loss_sum = 0.0;
            let mut steps = 0;
            for _ in 0..cfg.epochs_gen {
                for batch in epoch_batches(client.shard.len(), cfg.batch, &mut rng) {
                    let mut x = client.shard.inputs.gather_rows(&batch)?;
                    if let Some(fe) = fe {
                        x = fe.forward(&x)?;
                    }
                    let y: Vec<usize> = batch.iter().map(|&i| client.shard.labels[i]).collect();
                    loss_sum += local.train_step(&x, &y, &mut opts, &mut rng)?;
                    steps += 1;
                }
            }
            Ok(GenUpdate { params: local.flatten_params(), loss_sum, steps })
        })?;
        let sets: Vec<Vec<f64>> = results.iter().map(|r| r.params.clone()).collect();
        gen.unflatten_params(&aggregate(&sets)?)?;
        let total_steps: usize = results.iter().map(|r| r.steps).sum();
        let mean_loss = if total_steps == 0 {
            0.0
        } else {
            results.iter().map(|r| r.loss_sum).sum::<f64>() / total_steps as f64
        };
        let k = active.len() as u64;
        trace.add_comm(k * gen_size, k * gen_size);
        trace.rows.push(TraceRow {
            round: round_offset + round,
            stage: Stage::Ka,
            arch: 0,
            accuracy: None,
            loss: mean_loss,
            comm_up_floats: trace.cum_up_floats,
            comm_down_floats: trace.cum_down_floats,
        });
    }
    Ok(())
}

struct TargetUpdate {
    key: usize,
    params: Vec<f64>,
    loss_sum: f64,
    steps: usize,
    syn_samples: u64,
    real_samples: u64,
}

/// Options for [`target_network_training`] beyond the shared config.
pub struct TnOptions<'a> {
    /// Frozen generative model providing synthetic batches; required when
    /// `epochs_syn > 0`.
    pub gen: Option<&'a GenModel>,
    /// Train headers only through a frozen shared extractor.
    pub head_only: bool,
    /// Aggregate per client id instead of per architecture (local-only).
    pub group_by_client: bool,
    /// LG-style partial aggregation: first dense layer averaged over all
    /// clients, remaining layers per group.
    pub lg_first_layer: bool,
}

impl Default for TnOptions<'_> {
    fn default() -> Self {
        TnOptions { gen: None, head_only: false, group_by_client: false, lg_first_layer: false }
    }
}

fn lg_first_layer_len(targets: &BTreeMap<usize, TargetNet>) -> Result<usize> {
    let mut lens = BTreeMap::new();
    for net in targets.values() {
        let specs = if net.fe.is_identity() { net.head.specs() } else { net.fe.specs() };
        let first = specs
            .iter()
            .find_map(|s| match s {
                crate::nn::LayerSpec::Dense { in_dim, out_dim } => Some(in_dim * out_dim + out_dim),
                _ => None,
            })
            .ok_or_else(|| Error::Config("lg_partial needs at least one dense layer".into()))?;
        lens.insert(first, ());
    }
    if lens.len() != 1 {
        return Err(Error::Config(
            "lg_partial requires an identical first dense layer across architectures".into(),
        ));
    }
    Ok(*lens.keys().next().unwrap())
}

/// Stage (ii)/(iii) of the round loops: `rounds_tn` federated rounds of
/// synthetic-then-real local training with grouped aggregation, evaluated
/// against `test` every round.
pub fn target_network_training(
    server: &mut ServerState,
    clients: &[ClientState],
    cfg: &FederationConfig,
    opts: &TnOptions,
    test: &LabeledDataset,
    round_offset: usize,
    trace: &mut Trace,
) -> Result<()> {
    if cfg.epochs_syn > 0 && opts.gen.is_none() {
        return Err(Error::Config("synthetic epochs requested without a generative model".into()));
    }
    let lg_len = if opts.lg_first_layer {
        Some(lg_first_layer_len(&server.target_global)?)
    } else {
        None
    };
    for round in 0..cfg.rounds_tn {
        let active = participants(clients, cfg, tag::TN, round_offset + round);
        let targets = &server.target_global;
        let results = map_clients(cfg.parallel, &active, |client| {
            let key = if opts.group_by_client { client.id } else { client.arch_index };
            let mut net = targets
                .get(&key)
                .ok_or_else(|| Error::Config(format!("no global target for key {key}")))?
                .clone();
            let mut rng =
                stream(cfg.seed, &[tag::TN, (round_offset + round) as u64, client.id as u64]);
            let steps_per_epoch = client.shard.len().div_ceil(cfg.batch);
            let mut loss_sum = 0.0;
            let mut steps = 0usize;
            let mut syn_samples = 0u64;
            // Synthetic epochs: labels from the uniform global prior.
            for _ in 0..cfg.epochs_syn {
                let gen = opts.gen.unwrap();
                for _ in 0..steps_per_epoch {
                    let y: Vec<usize> =
                        (0..cfg.batch).map(|_| rng.gen_range(0..client.shard.class_count)).collect();
                    let x = gen.sample(&y, &cfg.guidance, &mut rng)?;
                    loss_sum += if opts.head_only {
                        net.sgd_step_head(&x, &y, cfg.target_lr)?
                    } else {
                        net.sgd_step_full(&x, &y, cfg.target_lr)?
                    };
                    steps += 1;
                    syn_samples += cfg.batch as u64;
                }
            }
            let mut real_samples = 0u64;
            for _ in 0..cfg.epochs_real {
                for batch in epoch_batches(client.shard.len(), cfg.batch, &mut rng) {
                    let x = client.shard.inputs.gather_rows(&batch)?;
                    let y: Vec<usize> = batch.iter().map(|&i| client.shard.labels[i]).collect();
                    loss_sum += if opts.head_only {
                        let features = net.fe.forward(&x)?;
                        net.sgd_step_head(&features, &y, cfg.target_lr)?
                    } else {
                        net.sgd_step_full(&x, &y, cfg.target_lr)?
                    };
                    steps += 1;
                    real_samples += cfg.batch as u64;
                }
            }
            let params = if opts.head_only {
                net.head.flatten_params()
            } else {
                net.flatten_params()
            };
            Ok(TargetUpdate { key, params, loss_sum, steps, syn_samples, real_samples })
        })?;

        // Grouped aggregation (Algorithm 2 per key).
        let items: Vec<(usize, Vec<f64>)> =
            results.iter().map(|r| (r.key, r.params.clone())).collect();
        let mut merged = aggregate_by_key(&items)?;
        if let Some(first_len) = lg_len {
            let all: Vec<Vec<f64>> =
                results.iter().map(|r| r.params[..first_len].to_vec()).collect();
            let shared = aggregate(&all)?;
            for v in merged.values_mut() {
                v[..first_len].copy_from_slice(&shared);
            }
        }
        for (key, flat) in merged {
            let net = server.target_global.get_mut(&key).unwrap();
            if opts.head_only {
                net.head.unflatten_params(&flat)?;
            } else {
                net.unflatten_params(&flat)?;
            }
        }

        // Communication: exchanged only for keys shared by >= 2 clients.
        let mut group_sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &results {
            *group_sizes.entry(r.key).or_default() += 1;
        }
        let mut comm = 0u64;
        for r in &results {
            if group_sizes[&r.key] >= 2 {
                comm += r.params.len() as u64;
            }
        }
        trace.add_comm(comm, comm);
        for r in &results {
            trace.syn_samples += r.syn_samples;
            trace.real_samples += r.real_samples;
        }

        // Per-group evaluation row.
        let (per_key, _) = mean_accuracy(&server.target_global, test)?;
        let mut group_loss: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &results {
            let e = group_loss.entry(r.key).or_default();
            e.0 += r.loss_sum;
            e.1 += r.steps;
        }
        for (&key, &acc) in &per_key {
            let (ls, st) = group_loss.get(&key).copied().unwrap_or((0.0, 0));
            trace.rows.push(TraceRow {
                round: round_offset + round,
                stage: Stage::Tn,
                arch: key,
                accuracy: Some(acc),
                loss: if st == 0 { 0.0 } else { ls / st as f64 },
                comm_up_floats: trace.cum_up_floats,
                comm_down_floats: trace.cum_down_floats,
            });
        }
    }
    Ok(())
}

struct WarmupUpdate {
    key: usize,
    fe_params: Vec<f64>,
    head_params: Vec<f64>,
    loss_sum: f64,
    steps: usize,
}

/// Stage (i) of the GeFL-F loop: full-model local training, extractor
/// averaged over all clients, headers per architecture.
pub fn warmup_feature_extractor(
    server: &mut ServerState,
    clients: &[ClientState],
    cfg: &FederationConfig,
    test: &LabeledDataset,
    trace: &mut Trace,
) -> Result<()> {
    let fe_size = server
        .fe_global
        .as_ref()
        .map(|f| f.param_count())
        .unwrap_or(0) as u64;
    for round in 0..cfg.rounds_fe {
        let fe_global = server
            .fe_global
            .clone()
            .ok_or_else(|| Error::Config("warm-up requires a shared feature extractor".into()))?;
        let active = participants(clients, cfg, tag::FE, round);
        let targets = &server.target_global;
        let results = map_clients(cfg.parallel, &active, |client| {
            let key = client.arch_index;
            let head = targets
                .get(&key)
                .ok_or_else(|| Error::Config(format!("no global target for arch {key}")))?
                .head
                .clone();
            let mut net = TargetNet { fe: fe_global.clone(), head };
            let mut rng = stream(cfg.seed, &[tag::FE, round as u64, client.id as u64]);
            let mut loss_sum = 0.0;
            let mut steps = 0;
            for _ in 0..cfg.epochs_warmup {
                for batch in epoch_batches(client.shard.len(), cfg.batch, &mut rng) {
                    let x = client.shard.inputs.gather_rows(&batch)?;
                    let y: Vec<usize> = batch.iter().map(|&i| client.shard.labels[i]).collect();
                    loss_sum += net.sgd_step_full(&x, &y, cfg.target_lr)?;
                    steps += 1;
                }
            }
            Ok(WarmupUpdate {
                key,
                fe_params: net.fe.flatten_params(),
                head_params: net.head.flatten_params(),
                loss_sum,
                steps,
            })
        })?;

        let fe_sets: Vec<Vec<f64>> = results.iter().map(|r| r.fe_params.clone()).collect();
        let fe_mean = aggregate(&fe_sets)?;
        server.fe_global.as_mut().unwrap().unflatten_params(&fe_mean)?;
        let head_items: Vec<(usize, Vec<f64>)> =
            results.iter().map(|r| (r.key, r.head_params.clone())).collect();
        for (key, flat) in aggregate_by_key(&head_items)? {
            let net = server.target_global.get_mut(&key).unwrap();
            net.fe.unflatten_params(&fe_mean)?;
            net.head.unflatten_params(&flat)?;
        }
        // Keep every global target's extractor in sync with the shared one.
        for net in server.target_global.values_mut() {
            net.fe.unflatten_params(&fe_mean)?;
        }

        let k = active.len() as u64;
        trace.add_comm(k * fe_size, k * fe_size);
        let (per_key, _) = mean_accuracy(&server.target_global, test)?;
        let total_steps: usize = results.iter().map(|r| r.steps).sum();
        let mean_loss = if total_steps == 0 {
            0.0
        } else {
            results.iter().map(|r| r.loss_sum).sum::<f64>() / total_steps as f64
        };
        for (&key, &acc) in &per_key {
            trace.rows.push(TraceRow {
                round,
                stage: Stage::Fe,
                arch: key,
                accuracy: Some(acc),
                loss: mean_loss,
                comm_up_floats: trace.cum_up_floats,
                comm_down_floats: trace.cum_down_floats,
            });
        }
    }
    Ok(())
}

/// Complete GeFL: generative knowledge aggregation then generatively
/// augmented target-network training. Returns the final server state and
/// the full trace.
pub fn run_gefl(
    clients: &[ClientState],
    cfg: &FederationConfig,
    gen_init: GenModel,
    test: &LabeledDataset,
) -> Result<(ServerState, Trace)> {
    cfg.validate()?;
    let zoo = build_archs(test.feature_dim(), test.class_count, cfg.arch_count, 0)?;
    let mut server = ServerState {
        gen_global: Some(gen_init),
        target_global: init_targets(&zoo, clients, false, cfg.seed)?,
        fe_global: None,
    };
    let mut trace = Trace::default();
    // In update mode half the KA budget runs up front and the rest
    // interleaves with target training.
    let upfront = match cfg.gan_mode {
        GanMode::Freeze => cfg.rounds_ka,
        GanMode::Update => cfg.rounds_ka / 2,
    };
    let mut gen = server.gen_global.take().unwrap();
    generative_knowledge_aggregation(&mut gen, clients, cfg, None, upfront, 0, &mut trace)?;

    match cfg.gan_mode {
        GanMode::Freeze => {
            let opts = TnOptions { gen: Some(&gen), ..Default::default() };
            target_network_training(&mut server, clients, cfg, &opts, test, 0, &mut trace)?;
        }
        GanMode::Update => {
            // One target round, then one interleaved KA round.
            let per_round = FederationConfig { rounds_tn: 1, ..cfg.clone() };
            for round in 0..cfg.rounds_tn {
                let opts = TnOptions { gen: Some(&gen), ..Default::default() };
                target_network_training(
                    &mut server,
                    clients,
                    &per_round,
                    &opts,
                    test,
                    round,
                    &mut trace,
                )?;
                generative_knowledge_aggregation(
                    &mut gen,
                    clients,
                    cfg,
                    None,
                    1,
                    upfront + round,
                    &mut trace,
                )?;
            }
        }
    }
    server.gen_global = Some(gen);
    Ok((server, trace))
}

/// Complete GeFL-F: warm-up, feature-space knowledge aggregation, then
/// header-only training on synthetic features and real samples.
pub fn run_geflf(
    clients: &[ClientState],
    cfg: &FederationConfig,
    gen_init: GenModel,
    test: &LabeledDataset,
) -> Result<(ServerState, Trace)> {
    cfg.validate()?;
    if cfg.homogeneity_level == 0 {
        return Err(Error::Config("geflf requires homogeneity level >= 1".into()));
    }
    let zoo = build_archs(
        test.feature_dim(),
        test.class_count,
        cfg.arch_count,
        cfg.homogeneity_level,
    )?;
    let mut targets = init_targets(&zoo, clients, false, cfg.seed)?;
    // One shared extractor instance; seed it from its own stream and copy
    // into every per-arch target.
    let mut fe = zoo[0].instantiate()?.fe;
    fe.init_params(&mut stream(cfg.seed, &[tag::INIT, 3]));
    let fe_flat = fe.flatten_params();
    for net in targets.values_mut() {
        net.fe.unflatten_params(&fe_flat)?;
    }
    let mut server = ServerState { gen_global: Some(gen_init), target_global: targets, fe_global: Some(fe) };
    let mut trace = Trace::default();

    warmup_feature_extractor(&mut server, clients, cfg, test, &mut trace)?;

    let fe_frozen = server.fe_global.clone().unwrap();
    let fe_before = fe_frozen.flatten_params();
    let mut gen = server.gen_global.take().unwrap();
    if gen.sample_dim != fe_frozen.out_dim() && !fe_frozen.is_identity() {
        return Err(Error::Config(format!(
            "feature-generative sample dim {} != extractor output dim {}",
            gen.sample_dim,
            fe_frozen.out_dim()
        )));
    }
    generative_knowledge_aggregation(
        &mut gen,
        clients,
        cfg,
        Some(&fe_frozen),
        cfg.rounds_ka,
        0,
        &mut trace,
    )?;

    let opts = TnOptions { gen: Some(&gen), head_only: true, ..Default::default() };
    target_network_training(&mut server, clients, cfg, &opts, test, 0, &mut trace)?;
    // Freeze contract: stages (ii)-(iii) never touch the extractor.
    debug_assert_eq!(server.fe_global.as_ref().unwrap().flatten_params(), fe_before);
    server.gen_global = Some(gen);
    Ok((server, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    GroupedFedavg,
    LocalOnly,
    LgPartial,
}

/// Baselines without generative augmentation; all run the target loop
/// with zero synthetic epochs.
pub fn run_baseline(
    kind: BaselineKind,
    clients: &[ClientState],
    cfg: &FederationConfig,
    test: &LabeledDataset,
) -> Result<(ServerState, Trace)> {
    cfg.validate()?;
    let zoo = build_archs(test.feature_dim(), test.class_count, cfg.arch_count, 0)?;
    let group_by_client = kind == BaselineKind::LocalOnly;
    let mut server = ServerState {
        gen_global: None,
        target_global: init_targets(&zoo, clients, group_by_client, cfg.seed)?,
        fe_global: None,
    };
    let mut trace = Trace::default();
    let cfg = FederationConfig { epochs_syn: 0, ..cfg.clone() };
    let opts = TnOptions {
        gen: None,
        head_only: false,
        group_by_client,
        lg_first_layer: kind == BaselineKind::LgPartial,
    };
    target_network_training(&mut server, clients, &cfg, &opts, test, 0, &mut trace)?;
    Ok((server, trace))
}
