//! Experiment orchestration: dataset construction, client setup, method
//! dispatch, and report assembly.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::config::{DatasetKind, ExperimentConfig, Method};
use crate::datasets::{make_blobs, make_glyphs, partition_iid, split_train_val, LabeledDataset, PartitionPlan};
use crate::fed::loops::{init_clients, run_baseline, run_gefl, run_geflf, BaselineKind, Trace};
use crate::fed::{feature_dim_at, ServerState};
use crate::gen::GenModel;
use crate::metrics::{comm_ledger, mean_accuracy, CommLedger};
use crate::report::{report_file_name, trace_file_name, trace_to_csv, RunReport, SCHEMA_VERSION};
use crate::rng::{stream, tag};
use crate::Result;

/// Builds the configured dataset with inputs in `[0,1]^d`. Blob
/// coordinates are mapped affinely into the unit box so every generative
/// family sees the same sample space as the image data.
pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<LabeledDataset> {
    match cfg.dataset {
        DatasetKind::Blobs => {
            let raw = make_blobs(cfg.classes, cfg.dim, cfg.n_per_class, cfg.noise, seed)?;
            let inputs = raw.inputs.map(|v| v / 10.0 + 0.5).clamp01();
            LabeledDataset::new(inputs, raw.labels, raw.class_count)
        }
        DatasetKind::Glyphs => {
            make_glyphs(cfg.classes, cfg.dim, cfg.n_per_class, cfg.noise, cfg.shift_max, seed)
        }
    }
}

/// One finished run: the report plus the raw state tests poke at.
pub struct RunOutcome {
    pub report: RunReport,
    pub server: ServerState,
    pub trace: Trace,
    pub test: LabeledDataset,
}

/// Runs one experiment for one seed.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let fed = cfg.fed(seed)?;
    let full = build_dataset(cfg, seed)?;
    let (train, test) = split_train_val(&full, cfg.test_fraction, seed)?;
    let shards = partition_iid(
        &train,
        &PartitionPlan { client_count: cfg.clients, fraction: cfg.fraction, seed },
    )?;
    let clients = init_clients(shards, cfg.archs);
    let input_dim = test.feature_dim();

    let (server, trace) = match cfg.method {
        Method::Gefl => {
            let gen = GenModel::build(
                &fed.gen_arch,
                input_dim,
                cfg.classes,
                true,
                &mut stream(seed, &[tag::INIT, 1]),
            )?;
            run_gefl(&clients, &fed, gen, &test)?
        }
        Method::Geflf => {
            let fdim = feature_dim_at(input_dim, cfg.classes, cfg.homogeneity_level);
            let gen = GenModel::build(
                &fed.gen_arch,
                fdim,
                cfg.classes,
                false,
                &mut stream(seed, &[tag::INIT, 1]),
            )?;
            run_geflf(&clients, &fed, gen, &test)?
        }
        Method::GroupedFedavg => run_baseline(BaselineKind::GroupedFedavg, &clients, &fed, &test)?,
        Method::LocalOnly => run_baseline(BaselineKind::LocalOnly, &clients, &fed, &test)?,
        Method::LgPartial => run_baseline(BaselineKind::LgPartial, &clients, &fed, &test)?,
    };

    let (final_per_arch, final_mean_accuracy) = mean_accuracy(&server.target_global, &test)?;
    let comm = closed_form_comm(cfg, &server, &clients.iter().map(|c| c.arch_index).collect::<Vec<_>>());
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.emit(),
        method: cfg.method.to_string(),
        seed,
        trace: trace.clone(),
        final_per_arch,
        final_mean_accuracy,
        comm,
        mnd: None,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, server, trace, test })
}

fn closed_form_comm(cfg: &ExperimentConfig, server: &ServerState, archs: &[usize]) -> CommLedger {
    let fed = cfg.fed(0).expect("validated config");
    let group_keys: Vec<usize> = match cfg.method {
        Method::LocalOnly => (0..archs.len()).collect(),
        _ => archs.to_vec(),
    };
    let gen_params = match cfg.method {
        Method::Gefl | Method::Geflf => {
            server.gen_global.as_ref().map(|g| g.param_count()).unwrap_or(0)
        }
        _ => 0,
    };
    let fe_params = if cfg.method == Method::Geflf {
        server.fe_global.as_ref().map(|f| f.param_count()).unwrap_or(0)
    } else {
        0
    };
    let target_params: BTreeMap<usize, usize> = server
        .target_global
        .iter()
        .map(|(&k, net)| {
            let n = if cfg.method == Method::Geflf {
                net.head.param_count()
            } else {
                net.param_count()
            };
            (k, n)
        })
        .collect();
    comm_ledger(&fed, &group_keys, gen_params, fe_params, &target_params)
}

/// Writes the JSON report and CSV trace for one run.
pub fn write_outputs(out_dir: &Path, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join(report_file_name(outcome.report.seed)),
        outcome.report.to_json()?,
    )?;
    std::fs::write(out_dir.join(trace_file_name(outcome.report.seed)), trace_to_csv(&outcome.trace))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny(method: &str) -> ExperimentConfig {
        parse_config(&format!(
            "method = {method}\nclasses = 3\ndim = 4\nn_per_class = 120\nnoise = 0.8\n\
             fraction = 0.5\nclients = 3\narchs = 3\nt_ka = 1\nt_tn = 1\nt_fe = 1\n\
             t_g = 1\nt_s = 1\nt_r = 1\nt_w = 1\nbatch = 16\nseeds = 1\n"
        ))
        .unwrap()
    }

    #[test]
    fn dataset_lives_in_unit_box() {
        let cfg = tiny("gefl");
        let ds = build_dataset(&cfg, 4).unwrap();
        assert!(ds.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.len(), 360);
    }

    #[test]
    fn every_method_produces_a_report() {
        for method in ["gefl", "geflf", "grouped_fedavg", "local_only", "lg_partial"] {
            let outcome = run_experiment(&tiny(method), 1).unwrap();
            assert_eq!(outcome.report.method, method);
            assert!(outcome.report.final_mean_accuracy.is_finite());
            assert!(!outcome.trace.rows.is_empty(), "{method} trace empty");
        }
    }

    #[test]
    fn comm_ledger_matches_live_trace() {
        for method in ["gefl", "geflf", "grouped_fedavg", "local_only"] {
            let outcome = run_experiment(&tiny(method), 2).unwrap();
            assert_eq!(
                outcome.report.comm.total_up(),
                outcome.trace.cum_up_floats,
                "{method} up"
            );
            assert_eq!(
                outcome.report.comm.total_down(),
                outcome.trace.cum_down_floats,
                "{method} down"
            );
        }
    }

    #[test]
    fn local_only_ignores_other_clients_data() {
        // Changing the noise changes every shard; a local-only client's
        // accuracy must only depend on its own shard and the test set, so
        // we instead perturb via archs: the grouped run with distinct
        // archs equals the local-only run bitwise.
        let fedavg = run_experiment(&tiny("grouped_fedavg"), 3).unwrap();
        let local = run_experiment(&tiny("local_only"), 3).unwrap();
        assert_eq!(fedavg.report.final_per_arch, local.report.final_per_arch);
    }
}
