//! Mini-DDPM: noise-prediction training with label dropout for
//! classifier-free guidance, and guided ancestral sampling.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::sse_mean_batch;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{alpha_bars, check_labels, FamilyParams, GenModel, GuidanceConfig};

pub const TIME_EMBED_DIM: usize = 2;

/// Time embedding fed to the denoiser alongside the noisy sample:
/// normalized step index and the noise level at that step.
fn time_embed(t: usize, timesteps: usize, alpha_bar_t: f64) -> [f64; TIME_EMBED_DIM] {
    [t as f64 / timesteps as f64, (1.0 - alpha_bar_t).sqrt()]
}

/// Closed-form forward noising: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    betas: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let bars = alpha_bars(betas)?;
    if t == 0 || t > betas.len() {
        return Err(Error::Domain(format!("timestep {t} outside [1,{}]", betas.len())));
    }
    let abar = bars[t - 1];
    let (a, s) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = x0.clone();
    for v in out.data_mut() {
        let eps: f64 = StandardNormal.sample(rng);
        *v = a * *v + s * eps;
    }
    Ok(out)
}

/// Builds the denoiser input row: x_t, time embedding, label embedding
/// (one-hot, or all-zero for the unconditional null label).
fn denoiser_input(
    xt: &[f64],
    t: usize,
    timesteps: usize,
    abar: f64,
    label: Option<usize>,
    class_count: usize,
) -> Vec<f64> {
    let mut row = Vec::with_capacity(xt.len() + TIME_EMBED_DIM + class_count);
    row.extend_from_slice(xt);
    row.extend_from_slice(&time_embed(t, timesteps, abar));
    let mut oh = vec![0.0; class_count];
    if let Some(y) = label {
        oh[y] = 1.0;
    }
    row.extend(oh);
    row
}

/// One epsilon-prediction step: per-sample uniform timestep, closed-form
/// noising, MSE on the predicted noise; labels dropped to the null
/// embedding with probability `uncond_drop_prob`.
pub fn train_step(
    model: &mut GenModel,
    x: &Tensor,
    y: &[usize],
    opt: &mut OptimizerState,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let class_count = model.class_count;
    let FamilyParams::Cddpm { denoiser, timesteps, betas, uncond_drop_prob } = &mut model.params
    else {
        return Err(Error::Config("train_step called on a non-cddpm model".into()));
    };
    check_labels(y, class_count)?;
    let bars = alpha_bars(betas)?;
    let (b, d) = (x.rows(), x.cols());
    let mut rows = Vec::with_capacity(b);
    let mut eps_all = vec![0.0; b * d];
    for r in 0..b {
        let t = rng.gen_range(1..=*timesteps);
        let abar = bars[t - 1];
        let (a, s) = (abar.sqrt(), (1.0 - abar).sqrt());
        let x0 = x.row(r);
        let mut xt = vec![0.0; d];
        for i in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            eps_all[r * d + i] = e;
            xt[i] = a * x0[i] + s * e;
        }
        let label = if rng.gen::<f64>() < *uncond_drop_prob {
            None
        } else {
            Some(y[r])
        };
        rows.push(denoiser_input(&xt, t, *timesteps, abar, label, class_count));
    }
    let input = Tensor::from_rows(&rows)?;
    let eps = Tensor::new(vec![b, d], eps_all)?;
    let cache = denoiser.forward_cache(&input)?;
    let (loss, dout) = sse_mean_batch(cache.output(), &eps)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite ddpm loss {loss}")));
    }
    let (grad, _) = denoiser.backward(&cache, &dout)?;
    let mut params = denoiser.flatten_params();
    opt.step(&mut params, &grad)?;
    denoiser.unflatten_params(&params)?;
    Ok(loss)
}

/// Guided noise estimate (1+w) eps_cond - w eps_uncond for one batch at
/// one timestep. The unconditional pass is skipped entirely at w = 0 so
/// that the guided estimate is bitwise the conditional one.
fn guided_eps(
    model: &GenModel,
    xt: &Tensor,
    t: usize,
    abar: f64,
    labels: &[usize],
    w: f64,
) -> Result<Tensor> {
    let FamilyParams::Cddpm { denoiser, timesteps, .. } = &model.params else {
        unreachable!()
    };
    let cond_rows: Vec<Vec<f64>> = (0..xt.rows())
        .map(|r| denoiser_input(xt.row(r), t, *timesteps, abar, Some(labels[r]), model.class_count))
        .collect();
    let eps_cond = denoiser.forward(&Tensor::from_rows(&cond_rows)?)?;
    if w == 0.0 {
        return Ok(eps_cond);
    }
    let uncond_rows: Vec<Vec<f64>> = (0..xt.rows())
        .map(|r| denoiser_input(xt.row(r), t, *timesteps, abar, None, model.class_count))
        .collect();
    let eps_uncond = denoiser.forward(&Tensor::from_rows(&uncond_rows)?)?;
    let mut out = eps_cond;
    for (o, &u) in out.data_mut().iter_mut().zip(eps_uncond.data()) {
        *o = (1.0 + w) * *o - w * u;
    }
    Ok(out)
}

/// Ancestral reverse loop t = T..1 with classifier-free guidance.
pub fn sample(
    model: &GenModel,
    labels: &[usize],
    guidance: &GuidanceConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let FamilyParams::Cddpm { timesteps, betas, uncond_drop_prob, .. } = &model.params else {
        return Err(Error::Config("sample called on a non-cddpm model".into()));
    };
    check_labels(labels, model.class_count)?;
    if guidance.w > 0.0 && *uncond_drop_prob == 0.0 {
        return Err(Error::Config(
            "guidance w > 0 requires a model trained with uncond_drop_prob > 0".into(),
        ));
    }
    let bars = alpha_bars(betas)?;
    let (n, d) = (labels.len(), model.sample_dim);
    let mut x = vec![0.0; n * d];
    for v in x.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let mut x = Tensor::new(vec![n, d], x)?;
    for t in (1..=*timesteps).rev() {
        let beta = betas[t - 1];
        let abar = bars[t - 1];
        let alpha = 1.0 - beta;
        let eps_hat = guided_eps(model, &x, t, abar, labels, guidance.w)?;
        let coef = beta / (1.0 - abar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        for (xi, &e) in x.data_mut().iter_mut().zip(eps_hat.data()) {
            let mut v = inv_sqrt_alpha * (*xi - coef * e);
            if t > 1 {
                let z: f64 = StandardNormal.sample(rng);
                v += beta.sqrt() * z;
            }
            *xi = v;
        }
    }
    x.check_finite()?;
    Ok(if model.clamp_output { x.clamp01() } else { x })
}
