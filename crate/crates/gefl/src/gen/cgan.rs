//! Conditional GAN: sigmoid-BCE discriminator step followed by a
//! non-saturating generator step, with one-hot label conditioning on both
//! networks' inputs.

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{bce_with_logits, one_hot, Network};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{check_labels, FamilyParams, GenModel};

fn latent_batch(n: usize, l: usize, rng: &mut ChaCha12Rng) -> Result<Tensor> {
    let mut z = vec![0.0; n * l];
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    Tensor::new(vec![n, l], z)
}

/// Maps the generator's raw output into sample space. With a tanh head
/// (data space) this rescales [-1,1] to [0,1]; feature space is identity.
fn to_sample_space(raw: &Tensor, clamp: bool) -> Tensor {
    if clamp {
        raw.map(|v| (v + 1.0) / 2.0)
    } else {
        raw.clone()
    }
}

/// One discriminator step (real -> 1, fake -> 0) then one generator step
/// (fake -> 1). Returns `(loss_d, loss_g)`.
pub fn train_step(
    model: &mut GenModel,
    x: &Tensor,
    y: &[usize],
    opt_g: &mut OptimizerState,
    opt_d: &mut OptimizerState,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    let class_count = model.class_count;
    let clamp = model.clamp_output;
    let FamilyParams::Cgan { generator, discriminator, latent_dim } = &mut model.params else {
        return Err(Error::Config("train_step called on a non-cgan model".into()));
    };
    check_labels(y, class_count)?;
    let b = x.rows();
    let oh = one_hot(y, class_count)?;

    // Discriminator step on real-vs-fake with the current generator.
    let z = latent_batch(b, *latent_dim, rng)?;
    let fake = to_sample_space(&generator.forward(&z.concat_cols(&oh)?)?, clamp);
    let d_real_in = x.concat_cols(&oh)?;
    let d_fake_in = fake.concat_cols(&oh)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * b);
    for i in 0..b {
        rows.push(d_real_in.row(i).to_vec());
    }
    for i in 0..b {
        rows.push(d_fake_in.row(i).to_vec());
    }
    let d_in = Tensor::from_rows(&rows)?;
    let mut targets = vec![1.0; b];
    targets.extend(std::iter::repeat(0.0).take(b));
    let d_cache = discriminator.forward_cache(&d_in)?;
    let (loss_d, dlogits) = bce_with_logits(d_cache.output(), &targets)?;
    let (d_grad, _) = discriminator.backward(&d_cache, &dlogits)?;
    step_net(discriminator, opt_d, &d_grad)?;

    // Generator step: fresh noise, non-saturating BCE(fake -> 1).
    let z2 = latent_batch(b, *latent_dim, rng)?;
    let g_cache = generator.forward_cache(&z2.concat_cols(&oh)?)?;
    let fake2 = to_sample_space(g_cache.output(), clamp);
    let d_cache2 = discriminator.forward_cache(&fake2.concat_cols(&oh)?)?;
    let (loss_g, dlogits_g) = bce_with_logits(d_cache2.output(), &vec![1.0; b])?;
    let (_, d_in_grad) = discriminator.backward(&d_cache2, &dlogits_g)?;
    // Keep the sample columns, drop the label columns, undo the rescale.
    let d = fake2.cols();
    let mut raw_grad = vec![0.0; b * d];
    let scale = if clamp { 0.5 } else { 1.0 };
    for r in 0..b {
        for i in 0..d {
            raw_grad[r * d + i] = d_in_grad.row(r)[i] * scale;
        }
    }
    let raw_grad = Tensor::new(vec![b, d], raw_grad)?;
    let (g_grad, _) = generator.backward(&g_cache, &raw_grad)?;
    step_net(generator, opt_g, &g_grad)?;

    if !loss_d.is_finite() || !loss_g.is_finite() {
        return Err(Error::Numeric(format!("non-finite gan loss d={loss_d} g={loss_g}")));
    }
    Ok((loss_d, loss_g))
}

fn step_net(net: &mut Network, opt: &mut OptimizerState, grads: &[f64]) -> Result<()> {
    let mut params = net.flatten_params();
    opt.step(&mut params, grads)?;
    net.unflatten_params(&params)
}

/// Generator samples for the given labels.
pub fn sample(model: &GenModel, labels: &[usize], rng: &mut ChaCha12Rng) -> Result<Tensor> {
    let FamilyParams::Cgan { generator, latent_dim, .. } = &model.params else {
        return Err(Error::Config("sample called on a non-cgan model".into()));
    };
    check_labels(labels, model.class_count)?;
    let z = latent_batch(labels.len(), *latent_dim, rng)?;
    let oh = one_hot(labels, model.class_count)?;
    let raw = generator.forward(&z.concat_cols(&oh)?)?;
    Ok(to_sample_space(&raw, model.clamp_output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_blobs;
    use crate::gen::{GenArch, GenFamily, GuidanceConfig};
    use crate::nn::sigmoid;
    use crate::rng::{stream, tag};

    #[test]
    fn zeroed_discriminator_head_gives_ln2_loss() {
        // With the final dense layer zeroed, D outputs logit 0 -> p = 0.5,
        // so each BCE term is ln 2 regardless of target.
        let mut rng = stream(2, &[tag::INIT]);
        let mut m = GenModel::build(&GenArch::new(GenFamily::Cgan), 4, 2, true, &mut rng).unwrap();
        if let FamilyParams::Cgan { discriminator, .. } = &mut m.params {
            let mut flat = discriminator.flatten_params();
            let n = flat.len();
            // Final dense layer: h weights + 1 bias at the tail.
            for v in flat[n - (48 + 1)..].iter_mut() {
                *v = 0.0;
            }
            discriminator.unflatten_params(&flat).unwrap();
            let x = Tensor::matrix(3, 6, vec![0.3; 18]).unwrap();
            let out = discriminator.forward(&x).unwrap();
            assert!(out.data().iter().all(|&z| z == 0.0));
            let (loss, _) = bce_with_logits(&out, &[1.0, 0.0, 1.0]).unwrap();
            assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        } else {
            unreachable!();
        }
    }

    #[test]
    fn perfect_discriminator_loss_vanishes() {
        let logits = Tensor::matrix(2, 1, vec![20.0, -20.0]).unwrap();
        let (loss, _) = bce_with_logits(&logits, &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-8);
        assert!(sigmoid(20.0) > 1.0 - 1e-8);
    }

    #[test]
    fn training_drives_discriminator_toward_chance() {
        let ds = make_blobs(2, 2, 100, 0.3, 44).unwrap();
        let x = ds.inputs.map(|v| v / 10.0 + 0.5);
        let mut rng = stream(6, &[tag::INIT]);
        let mut m = GenModel::build(&GenArch::new(GenFamily::Cgan), 2, 2, true, &mut rng).unwrap();
        let mut opts = m.default_optimizers(None);
        let mut train_rng = stream(6, &[tag::KA]);
        for _ in 0..2000 {
            m.train_step(&x, &ds.labels, &mut opts, &mut train_rng).unwrap();
        }
        // Probe: held-out real batch vs fresh fakes through the trained D.
        let probe = make_blobs(2, 2, 64, 0.3, 45).unwrap();
        let px = probe.inputs.map(|v| v / 10.0 + 0.5);
        let fakes = m
            .sample(&probe.labels, &GuidanceConfig::off(), &mut stream(7, &[tag::SAMPLE]))
            .unwrap();
        let FamilyParams::Cgan { discriminator, .. } = &m.params else {
            unreachable!()
        };
        let oh = one_hot(&probe.labels, 2).unwrap();
        let real_logits = discriminator.forward(&px.concat_cols(&oh).unwrap()).unwrap();
        let fake_logits = discriminator.forward(&fakes.concat_cols(&oh).unwrap()).unwrap();
        let mut correct = 0usize;
        for &z in real_logits.data() {
            if z > 0.0 {
                correct += 1;
            }
        }
        for &z in fake_logits.data() {
            if z <= 0.0 {
                correct += 1;
            }
        }
        let acc = correct as f64 / (2 * probe.len()) as f64;
        assert!(
            (acc - 0.5).abs() <= 0.15,
            "discriminator accuracy {acc} should drift toward chance"
        );
    }
}
