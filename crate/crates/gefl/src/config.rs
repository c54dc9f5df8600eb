//! Experiment configuration: flat `key = value` text with `#` comments,
//! strict unknown-key rejection, and an emitter whose output reparses to
//! an equal config.

use std::fmt::Write as _;

use crate::fed::{FederationConfig, GanMode};
use crate::gen::{GenArch, GenFamily, GuidanceConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Glyphs,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "glyphs" => Ok(DatasetKind::Glyphs),
            other => Err(Error::Parse(format!("unknown dataset `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Glyphs => "glyphs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gefl,
    Geflf,
    GroupedFedavg,
    LocalOnly,
    LgPartial,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gefl" => Ok(Method::Gefl),
            "geflf" => Ok(Method::Geflf),
            "grouped_fedavg" => Ok(Method::GroupedFedavg),
            "local_only" => Ok(Method::LocalOnly),
            "lg_partial" => Ok(Method::LgPartial),
            other => Err(Error::Parse(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gefl => "gefl",
            Method::Geflf => "geflf",
            Method::GroupedFedavg => "grouped_fedavg",
            Method::LocalOnly => "local_only",
            Method::LgPartial => "lg_partial",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    RealPlusSyn,
    SynOnly,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real_plus_syn" => Ok(EvalMode::RealPlusSyn),
            "syn_only" => Ok(EvalMode::SynOnly),
            other => Err(Error::Parse(format!("unknown eval_mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::RealPlusSyn => "real_plus_syn",
            EvalMode::SynOnly => "syn_only",
        })
    }
}

/// Everything an experiment run needs, minus the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub classes: usize,
    /// Blob dimensionality, or the glyph side length.
    pub dim: usize,
    pub n_per_class: usize,
    pub noise: f64,
    /// Maximum glyph jitter in pixels (glyphs only).
    pub shift_max: usize,
    /// Fraction of the training pool each client holds.
    pub fraction: f64,
    /// Held-out test fraction of the full dataset.
    pub test_fraction: f64,
    pub method: Method,
    pub eval_mode: EvalMode,
    pub gen_family: GenFamily,
    pub guidance_w: f64,
    pub gan_mode: GanMode,
    pub homogeneity_level: usize,
    pub t_ka: usize,
    pub t_tn: usize,
    pub t_fe: usize,
    pub t_g: usize,
    pub t_s: usize,
    pub t_r: usize,
    pub t_w: usize,
    /// Target-network SGD learning rate.
    pub alpha: f64,
    /// Generative learning rate; absent uses the family default.
    pub beta: Option<f64>,
    pub batch: usize,
    pub clients: usize,
    pub archs: usize,
    pub participation: f64,
    pub latent: usize,
    pub hidden: usize,
    pub timesteps: usize,
    pub uncond_drop: f64,
    pub seeds: Vec<u64>,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Blobs,
            classes: 4,
            dim: 8,
            n_per_class: 250,
            noise: 1.0,
            shift_max: 1,
            fraction: 0.1,
            test_fraction: 0.25,
            method: Method::Gefl,
            eval_mode: EvalMode::RealPlusSyn,
            gen_family: GenFamily::Cvae,
            guidance_w: 0.0,
            gan_mode: GanMode::Freeze,
            homogeneity_level: 1,
            t_ka: 10,
            t_tn: 10,
            t_fe: 5,
            t_g: 5,
            t_s: 1,
            t_r: 5,
            t_w: 5,
            alpha: 0.1,
            beta: None,
            batch: 64,
            clients: 10,
            archs: 10,
            participation: 1.0,
            latent: 16,
            hidden: 48,
            timesteps: 100,
            uncond_drop: 0.1,
            seeds: vec![1],
            parallel: false,
        }
    }
}

fn parse_val<T: std::str::FromStr>(line_no: usize, key: &str, val: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    val.parse().map_err(|e| Error::Parse(format!("line {line_no}: bad value for {key}: {e}")))
}

/// Parses config text; every line is `key = value`, `#` starts a comment,
/// unknown keys are rejected with their line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, val)) = line.split_once('=') else {
            return Err(Error::Parse(format!("line {line_no}: expected `key = value`")));
        };
        let (key, val) = (key.trim(), val.trim());
        match key {
            "dataset" => cfg.dataset = parse_val(line_no, key, val)?,
            "classes" => cfg.classes = parse_val(line_no, key, val)?,
            "dim" => cfg.dim = parse_val(line_no, key, val)?,
            "n_per_class" => cfg.n_per_class = parse_val(line_no, key, val)?,
            "noise" => cfg.noise = parse_val(line_no, key, val)?,
            "shift_max" => cfg.shift_max = parse_val(line_no, key, val)?,
            "fraction" => cfg.fraction = parse_val(line_no, key, val)?,
            "test_fraction" => cfg.test_fraction = parse_val(line_no, key, val)?,
            "method" => cfg.method = parse_val(line_no, key, val)?,
            "eval_mode" => cfg.eval_mode = parse_val(line_no, key, val)?,
            "gen_family" => cfg.gen_family = parse_val(line_no, key, val)?,
            "guidance_w" => cfg.guidance_w = parse_val(line_no, key, val)?,
            "gan_mode" => cfg.gan_mode = parse_val(line_no, key, val)?,
            "homogeneity_level" => cfg.homogeneity_level = parse_val(line_no, key, val)?,
            "t_ka" => cfg.t_ka = parse_val(line_no, key, val)?,
            "t_tn" => cfg.t_tn = parse_val(line_no, key, val)?,
            "t_fe" => cfg.t_fe = parse_val(line_no, key, val)?,
            "t_g" => cfg.t_g = parse_val(line_no, key, val)?,
            "t_s" => cfg.t_s = parse_val(line_no, key, val)?,
            "t_r" => cfg.t_r = parse_val(line_no, key, val)?,
            "t_w" => cfg.t_w = parse_val(line_no, key, val)?,
            "alpha" => cfg.alpha = parse_val(line_no, key, val)?,
            "beta" => cfg.beta = Some(parse_val(line_no, key, val)?),
            "batch" => cfg.batch = parse_val(line_no, key, val)?,
            "clients" => cfg.clients = parse_val(line_no, key, val)?,
            "archs" => cfg.archs = parse_val(line_no, key, val)?,
            "participation" => cfg.participation = parse_val(line_no, key, val)?,
            "latent" => cfg.latent = parse_val(line_no, key, val)?,
            "hidden" => cfg.hidden = parse_val(line_no, key, val)?,
            "timesteps" => cfg.timesteps = parse_val(line_no, key, val)?,
            "uncond_drop" => cfg.uncond_drop = parse_val(line_no, key, val)?,
            "seeds" => {
                cfg.seeds = val
                    .split_whitespace()
                    .map(|s| parse_val(line_no, key, s))
                    .collect::<Result<_>>()?;
            }
            "parallel" => cfg.parallel = parse_val(line_no, key, val)?,
            other => {
                return Err(Error::Parse(format!("line {line_no}: unknown key `{other}`")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config("beta must be positive".into()));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config("fraction must lie in (0, 1]".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        // Federation-level constraints, checked with a stand-in seed.
        self.fed(0)?.validate()
    }

    /// The federation config for one seed.
    pub fn fed(&self, seed: u64) -> Result<FederationConfig> {
        Ok(FederationConfig {
            rounds_ka: self.t_ka,
            rounds_tn: self.t_tn,
            rounds_fe: self.t_fe,
            epochs_gen: self.t_g,
            epochs_syn: self.t_s,
            epochs_real: match self.eval_mode {
                EvalMode::RealPlusSyn => self.t_r,
                EvalMode::SynOnly => 0,
            },
            epochs_warmup: self.t_w,
            target_lr: self.alpha,
            gen_lr: self.beta,
            batch: self.batch,
            client_count: self.clients,
            arch_count: self.archs,
            gen_family: self.gen_family,
            gen_arch: GenArch {
                family: self.gen_family,
                latent_dim: self.latent,
                hidden: self.hidden,
                timesteps: self.timesteps,
                uncond_drop_prob: self.uncond_drop,
            },
            guidance: GuidanceConfig::new(self.guidance_w)?,
            gan_mode: self.gan_mode,
            homogeneity_level: self.homogeneity_level,
            participation: self.participation,
            seed,
            parallel: self.parallel,
        })
    }

    /// Emits config text that reparses to an equal config.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dataset = {}", self.dataset).unwrap();
        writeln!(out, "classes = {}", self.classes).unwrap();
        writeln!(out, "dim = {}", self.dim).unwrap();
        writeln!(out, "n_per_class = {}", self.n_per_class).unwrap();
        writeln!(out, "noise = {}", self.noise).unwrap();
        writeln!(out, "shift_max = {}", self.shift_max).unwrap();
        writeln!(out, "fraction = {}", self.fraction).unwrap();
        writeln!(out, "test_fraction = {}", self.test_fraction).unwrap();
        writeln!(out, "method = {}", self.method).unwrap();
        writeln!(out, "eval_mode = {}", self.eval_mode).unwrap();
        writeln!(out, "gen_family = {}", self.gen_family).unwrap();
        writeln!(out, "guidance_w = {}", self.guidance_w).unwrap();
        let gm = match self.gan_mode {
            GanMode::Freeze => "freeze",
            GanMode::Update => "update",
        };
        writeln!(out, "gan_mode = {gm}").unwrap();
        writeln!(out, "homogeneity_level = {}", self.homogeneity_level).unwrap();
        writeln!(out, "t_ka = {}", self.t_ka).unwrap();
        writeln!(out, "t_tn = {}", self.t_tn).unwrap();
        writeln!(out, "t_fe = {}", self.t_fe).unwrap();
        writeln!(out, "t_g = {}", self.t_g).unwrap();
        writeln!(out, "t_s = {}", self.t_s).unwrap();
        writeln!(out, "t_r = {}", self.t_r).unwrap();
        writeln!(out, "t_w = {}", self.t_w).unwrap();
        writeln!(out, "alpha = {}", self.alpha).unwrap();
        if let Some(b) = self.beta {
            writeln!(out, "beta = {b}").unwrap();
        }
        writeln!(out, "batch = {}", self.batch).unwrap();
        writeln!(out, "clients = {}", self.clients).unwrap();
        writeln!(out, "archs = {}", self.archs).unwrap();
        writeln!(out, "participation = {}", self.participation).unwrap();
        writeln!(out, "latent = {}", self.latent).unwrap();
        writeln!(out, "hidden = {}", self.hidden).unwrap();
        writeln!(out, "timesteps = {}", self.timesteps).unwrap();
        writeln!(out, "uncond_drop = {}", self.uncond_drop).unwrap();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        writeln!(out, "seeds = {}", seeds.join(" ")).unwrap();
        writeln!(out, "parallel = {}", self.parallel).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.t_w, cfg.t_g, cfg.t_s, cfg.t_r), (5, 5, 1, 5));
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.alpha, 0.1);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = parse_config("# header\n\nbatch = 32  # trailing\n").unwrap();
        assert_eq!(cfg.batch, 32);
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = parse_config("batch = 32\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(parse_config("alpha = -1\n").is_err());
    }

    #[test]
    fn bad_value_names_line_and_key() {
        let err = parse_config("clients = many\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("clients"), "{msg}");
    }

    #[test]
    fn emit_round_trips() {
        let text = "method = geflf\ngen_family = cddpm\nguidance_w = 2\nbeta = 0.0005\n\
                    seeds = 3 5 8\nhomogeneity_level = 2\nparallel = true\n";
        let cfg = parse_config(text).unwrap();
        let again = parse_config(&cfg.emit()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn syn_only_zeroes_real_epochs() {
        let cfg = parse_config("eval_mode = syn_only\n").unwrap();
        assert_eq!(cfg.fed(1).unwrap().epochs_real, 0);
        assert_eq!(cfg.fed(1).unwrap().epochs_syn, 1);
    }

    #[test]
    fn update_mode_requires_cgan() {
        assert!(parse_config("gan_mode = update\n").is_err());
        assert!(parse_config("gan_mode = update\ngen_family = cgan\n").is_ok());
    }
}
