//! Conditional generative families behind one train/sample contract.
//!
//! All three families (CVAE, CGAN, mini-DDPM) expose the same surface —
//! `train_step` on an `(x, y)` minibatch and conditional `sample` — so the
//! federation loops stay family-agnostic. The feature-space variants are
//! the same code paths with `clamp_output = false` and `sample_dim` set to
//! the feature dimension.

pub mod cgan;
pub mod cvae;
pub mod ddpm;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, LayerSpec, Network};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenFamily {
    Cvae,
    Cgan,
    Cddpm,
}

impl std::str::FromStr for GenFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvae" => Ok(GenFamily::Cvae),
            "cgan" => Ok(GenFamily::Cgan),
            "cddpm" | "ddpm" => Ok(GenFamily::Cddpm),
            other => Err(Error::Parse(format!("unknown generative family `{other}`"))),
        }
    }
}

impl std::fmt::Display for GenFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GenFamily::Cvae => "cvae",
            GenFamily::Cgan => "cgan",
            GenFamily::Cddpm => "cddpm",
        };
        f.write_str(s)
    }
}

/// Classifier-free guidance weight for DDPM sampling; ignored by the
/// likelihood families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub w: f64,
}

impl GuidanceConfig {
    pub fn new(w: f64) -> Result<Self> {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Domain(format!("guidance weight {w} must be finite and >= 0")));
        }
        Ok(GuidanceConfig { w })
    }

    pub fn off() -> Self {
        GuidanceConfig { w: 0.0 }
    }
}

/// Family-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilyParams {
    Cvae {
        encoder: Network,
        decoder: Network,
        latent_dim: usize,
    },
    Cgan {
        generator: Network,
        discriminator: Network,
        latent_dim: usize,
    },
    Cddpm {
        denoiser: Network,
        timesteps: usize,
        betas: Vec<f64>,
        uncond_drop_prob: f64,
    },
}

/// A conditional generative model: family parameters plus the sample-space
/// contract it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct GenModel {
    pub params: FamilyParams,
    pub class_count: usize,
    pub sample_dim: usize,
    /// Data space clamps samples to [0,1]; feature space leaves them raw.
    pub clamp_output: bool,
}

/// Optimizer bundle: one slot per trained network pair. CGAN uses both,
/// the likelihood families only the primary.
#[derive(Debug, Clone)]
pub struct GenOptimizers {
    pub primary: OptimizerState,
    pub secondary: Option<OptimizerState>,
}

/// Architecture knobs for the default MLP backbones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenArch {
    pub family: GenFamily,
    pub latent_dim: usize,
    pub hidden: usize,
    pub timesteps: usize,
    pub uncond_drop_prob: f64,
}

impl GenArch {
    pub fn new(family: GenFamily) -> Self {
        GenArch {
            family,
            latent_dim: 16,
            hidden: 48,
            timesteps: 100,
            uncond_drop_prob: 0.1,
        }
    }
}

fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense { in_dim: i, out_dim: o }
}

fn relu() -> LayerSpec {
    LayerSpec::Act(Activation::Relu)
}

fn lrelu() -> LayerSpec {
    LayerSpec::Act(Activation::LeakyRelu(0.2))
}

/// Linear schedule 1e-4 -> 0.02 over `t` steps.
pub fn linear_beta_schedule(t: usize) -> Vec<f64> {
    let (lo, hi) = (1e-4, 0.02);
    (0..t)
        .map(|i| {
            if t == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (t - 1) as f64
            }
        })
        .collect()
}

/// Cumulative products alpha_bar_t = prod_{s<=t} (1 - beta_s), 1-indexed
/// by timestep; `alpha_bar[0]` is for t=1.
pub fn alpha_bars(betas: &[f64]) -> Result<Vec<f64>> {
    if betas.is_empty() || betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b <= 0.0) {
        return Err(Error::Domain("betas must be non-empty and strictly in (0,1)".into()));
    }
    let mut out = Vec::with_capacity(betas.len());
    let mut acc = 1.0;
    for &b in betas {
        acc *= 1.0 - b;
        out.push(acc);
    }
    Ok(out)
}

impl GenModel {
    /// Builds a model with default MLP backbones for the given sample
    /// space. `clamp_output = true` for data space, false for features.
    pub fn build(
        arch: &GenArch,
        sample_dim: usize,
        class_count: usize,
        clamp_output: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let (d, c, l, h) = (sample_dim, class_count, arch.latent_dim, arch.hidden);
        if d == 0 || c < 2 || l == 0 || h == 0 {
            return Err(Error::Domain("invalid generative model dims".into()));
        }
        let params = match arch.family {
            GenFamily::Cvae => {
                let mut encoder = Network::new(&[dense(d + c, h), relu(), dense(h, 2 * l)])?;
                let mut decoder = Network::new(&[dense(l + c, h), relu(), dense(h, d)])?;
                encoder.init_params(rng);
                decoder.init_params(rng);
                FamilyParams::Cvae { encoder, decoder, latent_dim: l }
            }
            GenFamily::Cgan => {
                let mut gen_specs = vec![dense(l + c, h), relu(), dense(h, h), relu(), dense(h, d)];
                if clamp_output {
                    gen_specs.push(LayerSpec::Act(Activation::Tanh));
                }
                let mut generator = Network::new(&gen_specs)?;
                let mut discriminator =
                    Network::new(&[dense(d + c, h), lrelu(), dense(h, h), lrelu(), dense(h, 1)])?;
                generator.init_params(rng);
                discriminator.init_params(rng);
                FamilyParams::Cgan { generator, discriminator, latent_dim: l }
            }
            GenFamily::Cddpm => {
                let t = arch.timesteps;
                if t == 0 {
                    return Err(Error::Domain("cddpm needs at least one timestep".into()));
                }
                let in_dim = d + ddpm::TIME_EMBED_DIM + c;
                let mut denoiser =
                    Network::new(&[dense(in_dim, h), relu(), dense(h, h), relu(), dense(h, d)])?;
                denoiser.init_params(rng);
                FamilyParams::Cddpm {
                    denoiser,
                    timesteps: t,
                    betas: linear_beta_schedule(t),
                    uncond_drop_prob: arch.uncond_drop_prob,
                }
            }
        };
        Ok(GenModel { params, class_count, sample_dim, clamp_output })
    }

    pub fn family(&self) -> GenFamily {
        match self.params {
            FamilyParams::Cvae { .. } => GenFamily::Cvae,
            FamilyParams::Cgan { .. } => GenFamily::Cgan,
            FamilyParams::Cddpm { .. } => GenFamily::Cddpm,
        }
    }

    /// Adam with the shared (0.5, 0.999) betas and the family's default
    /// learning rate; `lr_override` replaces the default when given.
    pub fn default_optimizers(&self, lr_override: Option<f64>) -> GenOptimizers {
        match self.params {
            FamilyParams::Cvae { .. } => GenOptimizers {
                primary: OptimizerState::adam(lr_override.unwrap_or(1e-3), 0.5, 0.999),
                secondary: None,
            },
            FamilyParams::Cgan { .. } => {
                let lr = lr_override.unwrap_or(2e-4);
                GenOptimizers {
                    primary: OptimizerState::adam(lr, 0.5, 0.999),
                    secondary: Some(OptimizerState::adam(lr, 0.5, 0.999)),
                }
            }
            FamilyParams::Cddpm { .. } => GenOptimizers {
                primary: OptimizerState::adam(lr_override.unwrap_or(1e-4), 0.5, 0.999),
                secondary: None,
            },
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.params {
            FamilyParams::Cvae { encoder, decoder, .. } => {
                encoder.param_count() + decoder.param_count()
            }
            FamilyParams::Cgan { generator, discriminator, .. } => {
                generator.param_count() + discriminator.param_count()
            }
            FamilyParams::Cddpm { denoiser, .. } => denoiser.param_count(),
        }
    }

    /// Every trained network's parameters, concatenated in a fixed order.
    /// This is the vector Algorithm-2 averaging operates on; for CGAN both
    /// generator and discriminator are included.
    pub fn flatten_params(&self) -> Vec<f64> {
        match &self.params {
            FamilyParams::Cvae { encoder, decoder, .. } => {
                let mut v = encoder.flatten_params();
                v.extend(decoder.flatten_params());
                v
            }
            FamilyParams::Cgan { generator, discriminator, .. } => {
                let mut v = generator.flatten_params();
                v.extend(discriminator.flatten_params());
                v
            }
            FamilyParams::Cddpm { denoiser, .. } => denoiser.flatten_params(),
        }
    }

    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector length {} != generative parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        match &mut self.params {
            FamilyParams::Cvae { encoder, decoder, .. } => {
                let n = encoder.param_count();
                encoder.unflatten_params(&flat[..n])?;
                decoder.unflatten_params(&flat[n..])?;
            }
            FamilyParams::Cgan { generator, discriminator, .. } => {
                let n = generator.param_count();
                generator.unflatten_params(&flat[..n])?;
                discriminator.unflatten_params(&flat[n..])?;
            }
            FamilyParams::Cddpm { denoiser, .. } => denoiser.unflatten_params(flat)?,
        }
        Ok(())
    }

    /// One family-appropriate training step on an `(x, y)` minibatch.
    /// Returns the primary loss (discriminator loss for CGAN).
    pub fn train_step(
        &mut self,
        x: &Tensor,
        y: &[usize],
        opts: &mut GenOptimizers,
        rng: &mut ChaCha12Rng,
    ) -> Result<f64> {
        match self.family() {
            GenFamily::Cvae => cvae::train_step(self, x, y, &mut opts.primary, rng),
            GenFamily::Cgan => {
                let opt_d = opts
                    .secondary
                    .as_mut()
                    .ok_or_else(|| Error::Config("cgan needs a discriminator optimizer".into()))?;
                let (loss_d, _loss_g) = cgan::train_step(self, x, y, &mut opts.primary, opt_d, rng)?;
                Ok(loss_d)
            }
            GenFamily::Cddpm => ddpm::train_step(self, x, y, &mut opts.primary, rng),
        }
    }

    /// Conditional samples for the given labels.
    pub fn sample(
        &self,
        labels: &[usize],
        guidance: &GuidanceConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        match self.family() {
            GenFamily::Cvae => cvae::sample(self, labels, rng),
            GenFamily::Cgan => cgan::sample(self, labels, rng),
            GenFamily::Cddpm => ddpm::sample(self, labels, guidance, rng),
        }
    }
}

pub(crate) fn check_labels(labels: &[usize], class_count: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::Domain(format!("label {bad} out of range [0,{class_count})")));
    }
    Ok(())
}
