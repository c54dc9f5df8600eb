//! Conditional VAE: reconstruction + Gaussian KL objective with the
//! reparameterized draw z = mu + sigma * eps. Labels enter encoder and
//! decoder as one-hot concatenation.

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{one_hot, sse_mean_batch};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{check_labels, FamilyParams, GenModel};

/// Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over latent dims,
/// mean over the batch, plus its gradients wrt (mu, logvar).
fn kl_and_grads(mu_logvar: &Tensor, latent_dim: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let b = mu_logvar.rows();
    let mut kl = 0.0;
    let mut dmu = vec![0.0; b * latent_dim];
    let mut dlogvar = vec![0.0; b * latent_dim];
    for r in 0..b {
        let row = mu_logvar.row(r);
        for i in 0..latent_dim {
            let mu = row[i];
            let logvar = row[latent_dim + i];
            let var = logvar.exp();
            kl += 0.5 * (mu * mu + var - 1.0 - logvar);
            dmu[r * latent_dim + i] = mu / b as f64;
            dlogvar[r * latent_dim + i] = 0.5 * (var - 1.0) / b as f64;
        }
    }
    (kl / b as f64, dmu, dlogvar)
}

/// One joint encoder+decoder step; returns the ELBO-style loss
/// (per-sample reconstruction SSE + KL, mean over the batch).
pub fn train_step(
    model: &mut GenModel,
    x: &Tensor,
    y: &[usize],
    opt: &mut OptimizerState,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let class_count = model.class_count;
    let FamilyParams::Cvae { encoder, decoder, latent_dim } = &mut model.params else {
        return Err(Error::Config("train_step called on a non-cvae model".into()));
    };
    let l = *latent_dim;
    check_labels(y, class_count)?;
    let b = x.rows();
    let oh = one_hot(y, class_count)?;

    let enc_cache = encoder.forward_cache(&x.concat_cols(&oh)?)?;
    let mu_logvar = enc_cache.output();

    // Reparameterized draw z = mu + sigma * eps.
    let mut z = vec![0.0; b * l];
    let mut eps = vec![0.0; b * l];
    let mut sigma = vec![0.0; b * l];
    for r in 0..b {
        let row = mu_logvar.row(r);
        for i in 0..l {
            let e: f64 = StandardNormal.sample(rng);
            let s = (0.5 * row[l + i]).exp();
            eps[r * l + i] = e;
            sigma[r * l + i] = s;
            z[r * l + i] = row[i] + s * e;
        }
    }
    let z = Tensor::new(vec![b, l], z)?;

    let dec_cache = decoder.forward_cache(&z.concat_cols(&oh)?)?;
    let (recon, dxhat) = sse_mean_batch(dec_cache.output(), x)?;
    let (kl, dmu_kl, dlogvar_kl) = kl_and_grads(mu_logvar, l);
    let loss = recon + kl;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite cvae loss {loss}")));
    }

    let (dec_grad, d_dec_in) = decoder.backward(&dec_cache, &dxhat)?;

    // Chain dz back into (mu, logvar) and add the KL terms.
    let mut enc_out_grad = vec![0.0; b * 2 * l];
    for r in 0..b {
        for i in 0..l {
            let dz = d_dec_in.row(r)[i];
            enc_out_grad[r * 2 * l + i] = dz + dmu_kl[r * l + i];
            enc_out_grad[r * 2 * l + l + i] =
                dz * 0.5 * sigma[r * l + i] * eps[r * l + i] + dlogvar_kl[r * l + i];
        }
    }
    let enc_out_grad = Tensor::new(vec![b, 2 * l], enc_out_grad)?;
    let (enc_grad, _) = encoder.backward(&enc_cache, &enc_out_grad)?;

    let mut params = encoder.flatten_params();
    let enc_n = params.len();
    params.extend(decoder.flatten_params());
    let mut grads = enc_grad;
    grads.extend(dec_grad);
    opt.step(&mut params, &grads)?;
    encoder.unflatten_params(&params[..enc_n])?;
    decoder.unflatten_params(&params[enc_n..])?;
    Ok(loss)
}

/// Decodes z ~ N(0, I) concatenated with the one-hot label; clamped to
/// [0,1] in data space, raw in feature space.
pub fn sample(model: &GenModel, labels: &[usize], rng: &mut ChaCha12Rng) -> Result<Tensor> {
    let FamilyParams::Cvae { decoder, latent_dim, .. } = &model.params else {
        return Err(Error::Config("sample called on a non-cvae model".into()));
    };
    check_labels(labels, model.class_count)?;
    let (n, l) = (labels.len(), *latent_dim);
    let mut z = vec![0.0; n * l];
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let z = Tensor::new(vec![n, l], z)?;
    let oh = one_hot(labels, model.class_count)?;
    let out = decoder.forward(&z.concat_cols(&oh)?)?;
    Ok(if model.clamp_output { out.clamp01() } else { out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_blobs;
    use crate::gen::{GenArch, GenFamily};
    use crate::rng::{stream, tag};

    #[test]
    fn kl_zero_for_standard_normal_posterior() {
        let ml = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        let (kl, dmu, _) = kl_and_grads(&ml, 2);
        assert_eq!(kl, 0.0);
        assert!(dmu.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_half_per_unit_mean_dim() {
        // mu = 1 in each dim, logvar = 0 -> KL per dim = 0.5.
        let ml = Tensor::matrix(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (kl, _, _) = kl_and_grads(&ml, 2);
        assert!((kl - 1.0).abs() < 1e-12, "2 dims x 0.5 = 1, got {kl}");
    }

    #[test]
    fn loss_decreases_on_blobs() {
        let ds = make_blobs(2, 4, 60, 0.3, 21).unwrap();
        // Blobs live outside [0,1]; rescale into the unit box first.
        let x = ds.inputs.map(|v| (v / 10.0 + 0.5).clamp(0.0, 1.0));
        let mut rng = stream(4, &[tag::INIT]);
        let mut m = GenModel::build(&GenArch::new(GenFamily::Cvae), 4, 2, true, &mut rng).unwrap();
        let mut opts = m.default_optimizers(None);
        let mut train_rng = stream(4, &[tag::KA]);
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(m.train_step(&x, &ds.labels, &mut opts, &mut train_rng).unwrap());
        }
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "smoothed loss should fall: {head} -> {tail}");
    }

    #[test]
    fn trained_samples_near_class_centers() {
        // Train on well-separated 2-class blobs mapped into [0,1]^2 and
        // check conditional sample means land near the mapped centers.
        let spread = 0.2;
        let ds = make_blobs(2, 2, 100, spread, 33).unwrap();
        let x = ds.inputs.map(|v| v / 10.0 + 0.5);
        let mut rng = stream(5, &[tag::INIT]);
        let mut m = GenModel::build(&GenArch::new(GenFamily::Cvae), 2, 2, true, &mut rng).unwrap();
        let mut opts = m.default_optimizers(None);
        let mut train_rng = stream(5, &[tag::KA]);
        for _ in 0..800 {
            m.train_step(&x, &ds.labels, &mut opts, &mut train_rng).unwrap();
        }
        for class in 0..2usize {
            let labels = vec![class; 64];
            let s = m
                .sample(&labels, &crate::gen::GuidanceConfig::off(), &mut stream(6, &[tag::SAMPLE]))
                .unwrap();
            // Empirical class center of the training data in mapped space.
            let mut center = [0.0f64; 2];
            let mut n = 0.0;
            for i in 0..ds.len() {
                if ds.labels[i] == class {
                    center[0] += x.row(i)[0];
                    center[1] += x.row(i)[1];
                    n += 1.0;
                }
            }
            center[0] /= n;
            center[1] /= n;
            let mut mean = [0.0f64; 2];
            for i in 0..s.rows() {
                mean[0] += s.row(i)[0];
                mean[1] += s.row(i)[1];
            }
            mean[0] /= 64.0;
            mean[1] /= 64.0;
            let mapped_spread = spread / 10.0;
            let dist = ((mean[0] - center[0]).powi(2) + (mean[1] - center[1]).powi(2)).sqrt();
            assert!(
                dist < 3.0 * mapped_spread,
                "class {class} sample mean {mean:?} too far from center {center:?} ({dist})"
            );
        }
    }

    #[test]
    fn wrong_family_rejected() {
        let mut rng = stream(1, &[tag::INIT]);
        let mut m = GenModel::build(&GenArch::new(GenFamily::Cgan), 4, 2, true, &mut rng).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.5; 4]).unwrap();
        let mut opt = OptimizerState::sgd(0.1);
        assert!(matches!(
            train_step(&mut m, &x, &[0], &mut opt, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
