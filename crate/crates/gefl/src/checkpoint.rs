//! Plain-text checkpoints: a small structural header followed by the flat
//! parameter vector, one value per line. Values use the shortest decimal
//! form that parses back to the identical f64, so save/load round-trips
//! bitwise.

use std::fmt::Write as _;
use std::path::Path;

use crate::gen::{FamilyParams, GenFamily, GenModel};
use crate::nn::{LayerSpec, Network};
use crate::{Error, Result};

const MAGIC: &str = "geflckpt 1";

fn specs_line(net: &Network) -> Result<String> {
    serde_json::to_string(&net.specs())
        .map_err(|e| Error::Parse(format!("layer spec serialization failed: {e}")))
}

fn parse_specs(json: &str) -> Result<Vec<LayerSpec>> {
    serde_json::from_str(json).map_err(|e| Error::Parse(format!("bad layer specs: {e}")))
}

fn write_params(out: &mut String, flat: &[f64]) {
    writeln!(out, "params {}", flat.len()).unwrap();
    for v in flat {
        writeln!(out, "{v}").unwrap();
    }
}

/// Serializes a plain network (e.g. a frozen feature extractor).
pub fn network_to_string(net: &Network) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "kind network").unwrap();
    writeln!(out, "in_dim {}", net.in_dim()).unwrap();
    writeln!(out, "specs {}", specs_line(net)?).unwrap();
    write_params(&mut out, &net.flatten_params());
    Ok(out)
}

/// Serializes a generative model with its family header.
pub fn gen_to_string(model: &GenModel) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "kind gen").unwrap();
    writeln!(out, "family {}", model.family()).unwrap();
    writeln!(out, "class_count {}", model.class_count).unwrap();
    writeln!(out, "sample_dim {}", model.sample_dim).unwrap();
    writeln!(out, "clamp {}", u8::from(model.clamp_output)).unwrap();
    match &model.params {
        FamilyParams::Cvae { encoder, decoder, latent_dim } => {
            writeln!(out, "latent {latent_dim}").unwrap();
            writeln!(out, "net {}", specs_line(encoder)?).unwrap();
            writeln!(out, "net {}", specs_line(decoder)?).unwrap();
        }
        FamilyParams::Cgan { generator, discriminator, latent_dim } => {
            writeln!(out, "latent {latent_dim}").unwrap();
            writeln!(out, "net {}", specs_line(generator)?).unwrap();
            writeln!(out, "net {}", specs_line(discriminator)?).unwrap();
        }
        FamilyParams::Cddpm { denoiser, timesteps, betas, uncond_drop_prob } => {
            writeln!(out, "timesteps {timesteps}").unwrap();
            writeln!(out, "drop {uncond_drop_prob}").unwrap();
            let beta_strs: Vec<String> = betas.iter().map(|b| b.to_string()).collect();
            writeln!(out, "betas {}", beta_strs.join(" ")).unwrap();
            writeln!(out, "net {}", specs_line(denoiser)?).unwrap();
        }
    }
    write_params(&mut out, &model.flatten_params());
    Ok(out)
}

struct Lines<'a> {
    iter: std::str::Lines<'a>,
    number: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { iter: text.lines(), number: 0 }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.number += 1;
        self.iter
            .next()
            .ok_or_else(|| Error::Parse(format!("checkpoint truncated at line {}", self.number)))
    }

    /// Next line, which must start with `key `; returns the value part.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| {
                Error::Parse(format!("line {}: expected `{key} ...`, got `{line}`", self.number))
            })
    }

    fn usize_field(&mut self, key: &str) -> Result<usize> {
        let n = self.number + 1;
        self.field(key)?
            .parse()
            .map_err(|e| Error::Parse(format!("line {n}: bad {key}: {e}")))
    }

    fn f64_field(&mut self, key: &str) -> Result<f64> {
        let n = self.number + 1;
        self.field(key)?
            .parse()
            .map_err(|e| Error::Parse(format!("line {n}: bad {key}: {e}")))
    }

    fn params(&mut self) -> Result<Vec<f64>> {
        let count: usize = self.usize_field("params")?;
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            let line = self.next()?;
            flat.push(
                line.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: bad value: {e}", self.number)))?,
            );
        }
        Ok(flat)
    }
}

fn net_from_specs(specs: &[LayerSpec], in_dim: usize) -> Result<Network> {
    if specs.is_empty() {
        Ok(Network::identity(in_dim))
    } else {
        Network::new(specs)
    }
}

pub fn network_from_string(text: &str) -> Result<Network> {
    let mut lines = Lines::new(text);
    if lines.next()? != MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    if lines.field("kind")? != "network" {
        return Err(Error::Parse("checkpoint holds a generative model, not a network".into()));
    }
    let in_dim = lines.usize_field("in_dim")?;
    let specs = parse_specs(lines.field("specs")?)?;
    let mut net = net_from_specs(&specs, in_dim)?;
    net.unflatten_params(&lines.params()?)?;
    Ok(net)
}

pub fn gen_from_string(text: &str) -> Result<GenModel> {
    let mut lines = Lines::new(text);
    if lines.next()? != MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    if lines.field("kind")? != "gen" {
        return Err(Error::Parse("checkpoint holds a network, not a generative model".into()));
    }
    let family: GenFamily = lines.field("family")?.parse()?;
    let class_count = lines.usize_field("class_count")?;
    let sample_dim = lines.usize_field("sample_dim")?;
    let clamp_output = match lines.field("clamp")? {
        "0" => false,
        "1" => true,
        other => return Err(Error::Parse(format!("bad clamp flag `{other}`"))),
    };
    let params = match family {
        GenFamily::Cvae => {
            let latent_dim = lines.usize_field("latent")?;
            let encoder = net_from_specs(&parse_specs(lines.field("net")?)?, 0)?;
            let decoder = net_from_specs(&parse_specs(lines.field("net")?)?, 0)?;
            FamilyParams::Cvae { encoder, decoder, latent_dim }
        }
        GenFamily::Cgan => {
            let latent_dim = lines.usize_field("latent")?;
            let generator = net_from_specs(&parse_specs(lines.field("net")?)?, 0)?;
            let discriminator = net_from_specs(&parse_specs(lines.field("net")?)?, 0)?;
            FamilyParams::Cgan { generator, discriminator, latent_dim }
        }
        GenFamily::Cddpm => {
            let timesteps = lines.usize_field("timesteps")?;
            let uncond_drop_prob = lines.f64_field("drop")?;
            let betas: Vec<f64> = lines
                .field("betas")?
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("bad beta: {e}"))))
                .collect::<Result<_>>()?;
            if betas.len() != timesteps {
                return Err(Error::Parse(format!(
                    "schedule length {} != timesteps {timesteps}",
                    betas.len()
                )));
            }
            let denoiser = net_from_specs(&parse_specs(lines.field("net")?)?, 0)?;
            FamilyParams::Cddpm { denoiser, timesteps, betas, uncond_drop_prob }
        }
    };
    let mut model = GenModel { params, class_count, sample_dim, clamp_output };
    model.unflatten_params(&lines.params()?)?;
    Ok(model)
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    std::fs::write(path, network_to_string(net)?)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    network_from_string(&std::fs::read_to_string(path)?)
}

pub fn save_gen(path: &Path, model: &GenModel) -> Result<()> {
    std::fs::write(path, gen_to_string(model)?)?;
    Ok(())
}

pub fn load_gen(path: &Path) -> Result<GenModel> {
    gen_from_string(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::GenArch;
    use crate::rng::{stream, tag};

    #[test]
    fn network_roundtrip_is_bitwise() {
        let specs = [
            LayerSpec::Dense { in_dim: 6, out_dim: 5 },
            LayerSpec::Act(crate::nn::Activation::Relu),
            LayerSpec::Dense { in_dim: 5, out_dim: 3 },
        ];
        let mut net = Network::new(&specs).unwrap();
        net.init_params(&mut stream(21, &[tag::INIT]));
        let text = network_to_string(&net).unwrap();
        let back = network_from_string(&text).unwrap();
        assert_eq!(back.flatten_params(), net.flatten_params());
        assert_eq!(back.specs(), net.specs());
    }

    #[test]
    fn gen_roundtrip_all_families() {
        for family in [GenFamily::Cvae, GenFamily::Cgan, GenFamily::Cddpm] {
            let mut rng = stream(22, &[tag::INIT, family as u64]);
            let arch = GenArch { timesteps: 8, ..GenArch::new(family) };
            let model = GenModel::build(&arch, 6, 3, true, &mut rng).unwrap();
            let text = gen_to_string(&model).unwrap();
            let back = gen_from_string(&text).unwrap();
            assert_eq!(back.family(), family);
            assert_eq!(back.flatten_params(), model.flatten_params());
            assert_eq!(back.class_count, 3);
            assert_eq!(back.sample_dim, 6);
            assert!(back.clamp_output);
        }
    }

    #[test]
    fn cddpm_schedule_survives_roundtrip() {
        let mut rng = stream(23, &[tag::INIT]);
        let arch = GenArch { timesteps: 5, ..GenArch::new(GenFamily::Cddpm) };
        let model = GenModel::build(&arch, 4, 2, false, &mut rng).unwrap();
        let back = gen_from_string(&gen_to_string(&model).unwrap()).unwrap();
        let (FamilyParams::Cddpm { betas: a, .. }, FamilyParams::Cddpm { betas: b, .. }) =
            (&model.params, &back.params)
        else {
            unreachable!()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_kind_and_garbage_rejected() {
        assert!(network_from_string("nonsense").is_err());
        let mut rng = stream(24, &[tag::INIT]);
        let model =
            GenModel::build(&GenArch::new(GenFamily::Cvae), 4, 2, true, &mut rng).unwrap();
        let text = gen_to_string(&model).unwrap();
        assert!(network_from_string(&text).is_err());
        // Truncated parameter block.
        let cut: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(gen_from_string(&cut).is_err());
    }
}
