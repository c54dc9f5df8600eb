//! End-to-end tests of the `gefl` binary: deterministic outputs, exit
//! codes, and the audit subcommands.

use std::path::Path;
use std::process::{Command, Output};

use gefl::checkpoint::save_network;
use gefl::nn::{LayerSpec, Network};
use gefl::report::{RunReport, CSV_HEADER};
use gefl::rng::{stream, tag};

fn gefl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gefl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to spawn gefl")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let text = format!(
        "classes = 3\ndim = 4\nn_per_class = 120\nnoise = 0.6\nfraction = 0.5\n\
         clients = 3\narchs = 3\nt_ka = 2\nt_tn = 2\nt_g = 1\nt_s = 1\nt_r = 1\n\
         batch = 16\nseeds = 1 2\n{extra}"
    );
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn run_is_byte_identical_across_reruns_and_parallelism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "exp.cfg", "method = gefl\n");
    write_config(dir, "exp_par.cfg", "method = gefl\nparallel = true\n");
    for (cfg, out) in [("exp.cfg", "a"), ("exp.cfg", "b"), ("exp_par.cfg", "c")] {
        let o = gefl(&["run", "--config", cfg, "--out", out], dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for seed in [1, 2] {
        let a = read(dir, &format!("a/trace_seed{seed}.csv"));
        assert_eq!(a, read(dir, &format!("b/trace_seed{seed}.csv")), "rerun diverged");
        assert_eq!(a, read(dir, &format!("c/trace_seed{seed}.csv")), "parallel run diverged");
        assert!(a.starts_with(CSV_HEADER));
    }
}

#[test]
fn run_report_round_trip_is_self_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "exp.cfg", "method = grouped_fedavg\n");
    let o = gefl(&["run", "--config", "exp.cfg", "--out", "out"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = RunReport::from_json(&read(dir, "out/report_seed1.json")).unwrap();
    assert_eq!(rep.seed, 1);
    assert_eq!(rep.method, "grouped_fedavg");
    assert_eq!(rep.trace.final_mean_accuracy(), Some(rep.final_mean_accuracy));

    let o = gefl(&["report", "--dir", "out"], dir);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("grouped_fedavg"), "{table}");
    assert!(table.contains("seeds=2"), "{table}");
}

#[test]
fn bad_config_exits_2_missing_file_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.cfg"), "bogus = 1\n").unwrap();
    let o = gefl(&["run", "--config", "bad.cfg"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let o = gefl(&["run", "--config", "no_such_file.cfg"], dir);
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(dir.join("neg.cfg"), "alpha = -0.5\n").unwrap();
    let o = gefl(&["run", "--config", "neg.cfg"], dir);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mnd_of_identical_sets_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "data.cfg", "method = gefl\n");
    let mut csv = String::new();
    let mut rng = stream(4, &[tag::EVAL]);
    use rand::Rng;
    for _ in 0..16 {
        let row: Vec<String> = (0..4).map(|_| rng.gen_range(0.0..1.0).to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(dir.join("s.csv"), &csv).unwrap();
    let o = gefl(
        &[
            "mnd",
            "--data-spec",
            "data.cfg",
            "--synthetic-csv",
            "s.csv",
            "--validation-csv",
            "s.csv",
            "--probe-size",
            "32",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["mean_ratio"], 1.0);
    assert_eq!(report["duplicate_hits"], 0);
}

#[test]
fn invert_recovers_input_through_checkpoint_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // Full-rank square extractor: inversion can recover x exactly.
    let mut fe = Network::new(&[LayerSpec::Dense { in_dim: 9, out_dim: 9 }]).unwrap();
    fe.init_params(&mut stream(7, &[tag::INIT]));
    save_network(&dir.join("fe.ckpt"), &fe).unwrap();

    let x: Vec<f64> = (0..9).map(|i| 0.1 + 0.08 * i as f64).collect();
    let f = fe
        .forward(&gefl::tensor::Tensor::new(vec![1, 9], x.clone()).unwrap())
        .unwrap();
    let line: Vec<String> = f.data().iter().map(|v| v.to_string()).collect();
    std::fs::write(dir.join("f.csv"), format!("{}\n", line.join(","))).unwrap();

    let o = gefl(
        &[
            "invert",
            "--fe-checkpoint",
            "fe.ckpt",
            "--feature-file",
            "f.csv",
            "--steps",
            "800",
            "--tv-weight",
            "0",
            "--out",
            "xhat.csv",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let xhat: Vec<f64> = read(dir, "xhat.csv")
        .trim()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let err: f64 = xhat
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(err < 1e-2, "reconstruction error {err}");
}

#[test]
fn fraction_sweep_keeps_schema_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (i, fraction) in ["0.2", "0.5"].iter().enumerate() {
        let name = format!("f{i}.cfg");
        write_config(dir, &name, &format!("method = local_only\nfraction = {fraction}\nseeds = 1\n"));
        let out = format!("out{i}");
        let o = gefl(&["run", "--config", &name, "--out", &out], dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = read(dir, &format!("{out}/trace_seed1.csv"));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        for line in lines {
            assert_eq!(line.split(',').count(), 7, "bad row: {line}");
        }
        let rep = RunReport::from_json(&read(dir, &format!("{out}/report_seed1.json"))).unwrap();
        assert!(rep.config.contains(&format!("fraction = {fraction}")));
    }
}
