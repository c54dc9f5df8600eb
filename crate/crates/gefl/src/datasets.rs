//! Procedural desk-scale datasets, stratified splitting, and the IID even
//! partitioner.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{stream, tag};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Inputs plus class labels; the universal dataset shape.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Domain(format!("label {bad} >= class count {class_count}")));
        }
        Ok(LabeledDataset { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let inputs = self.inputs.gather_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(inputs, labels, self.class_count)
    }

    /// Writes the CSV dump format: header `label,x0,x1,...`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let d = self.feature_dim();
        write!(w, "label")?;
        for j in 0..d {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{}", self.labels[i])?;
            for v in self.inputs.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// How the global train pool is carved into client shards.
#[derive(Debug, Clone, Copy)]
pub struct PartitionPlan {
    pub client_count: usize,
    /// Share of the full train pool used, in (0, 1].
    pub fraction: f64,
    pub seed: u64,
}

/// Class centers on a radius-3 circle in the first two coordinates.
fn blob_center(c: usize, class_count: usize, dim: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
    let mut center = vec![0.0; dim];
    center[0] = 3.0 * angle.cos();
    center[1] = 3.0 * angle.sin();
    center
}

/// Gaussian blobs, one cluster per class.
pub fn make_blobs(
    class_count: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count < 2 || dim < 2 || n_per_class < 1 || spread <= 0.0 {
        return Err(Error::Domain(format!(
            "invalid blob sizes: C={class_count} d={dim} n={n_per_class} spread={spread}"
        )));
    }
    let mut rng = stream(seed, &[tag::DATASET, class_count as u64, dim as u64]);
    let n = class_count * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        let center = blob_center(c, class_count, dim);
        for _ in 0..n_per_class {
            for &mu in &center {
                let eps: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + spread * eps);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, dim], data)?, labels, class_count)
}

/// Fixed binary stroke template for one glyph class on a `side x side` grid.
fn glyph_template(class: usize, side: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let last = side - 1;
    let mut set = |r: usize, c: usize| img[r * side + c] = 1.0;
    match class {
        // border box
        0 => {
            for i in 0..side {
                set(0, i);
                set(last, i);
                set(i, 0);
                set(i, last);
            }
        }
        // vertical bar
        1 => {
            for r in 0..side {
                set(r, side / 2);
                set(r, side / 2 - 1);
            }
        }
        // horizontal bar
        2 => {
            for c in 0..side {
                set(side / 2, c);
                set(side / 2 - 1, c);
            }
        }
        // main diagonal
        3 => {
            for i in 0..side {
                set(i, i);
                if i + 1 < side {
                    set(i + 1, i);
                }
            }
        }
        // anti-diagonal
        4 => {
            for i in 0..side {
                set(i, last - i);
                if i + 1 < side {
                    set(i + 1, last - i);
                }
            }
        }
        // plus
        5 => {
            for i in 0..side {
                set(i, side / 2);
                set(side / 2, i);
            }
        }
        // X
        6 => {
            for i in 0..side {
                set(i, i);
                set(i, last - i);
            }
        }
        // top half filled
        7 => {
            for r in 0..side / 2 {
                for c in 0..side {
                    set(r, c);
                }
            }
        }
        // left half filled
        8 => {
            for r in 0..side {
                for c in 0..side / 2 {
                    set(r, c);
                }
            }
        }
        // checkerboard (period 2)
        _ => {
            for r in 0..side {
                for c in 0..side {
                    if (r / 2 + c / 2) % 2 == 0 {
                        set(r, c);
                    }
                }
            }
        }
    }
    img
}

/// Returns the clean template image for a class; exposed for template-match
/// oracles and inversion targets.
pub fn glyph_class_template(class: usize, side: usize) -> Result<Tensor> {
    if !(6..=16).contains(&side) || class >= 10 {
        return Err(Error::Domain(format!("invalid glyph template class={class} side={side}")));
    }
    Tensor::new(vec![1, side * side], glyph_template(class, side))
}

/// Procedural glyph images: fixed per-class stroke templates with integer
/// shifts and additive pixel noise, clamped to [0, 1].
pub fn make_glyphs(
    class_count: usize,
    side: usize,
    n_per_class: usize,
    noise: f64,
    shift_max: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(6..=16).contains(&side) || class_count < 2 || class_count > 10 || n_per_class < 1 {
        return Err(Error::Domain(format!(
            "invalid glyph sizes: C={class_count} side={side} n={n_per_class}"
        )));
    }
    let d = side * side;
    let mut rng = stream(seed, &[tag::DATASET, class_count as u64, side as u64, 17]);
    let n = class_count * n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let shift = shift_max as i64;
    for c in 0..class_count {
        let template = glyph_template(c, side);
        for _ in 0..n_per_class {
            let (dr, dc) = if shift > 0 {
                (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift))
            } else {
                (0, 0)
            };
            for r in 0..side as i64 {
                for col in 0..side as i64 {
                    let (sr, sc) = (r - dr, col - dc);
                    let mut v = if (0..side as i64).contains(&sr) && (0..side as i64).contains(&sc) {
                        template[(sr * side as i64 + sc) as usize]
                    } else {
                        0.0
                    };
                    if noise > 0.0 {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        v += noise * eps;
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, d], data)?, labels, class_count)
}

/// Seeded stratified pick of `count` indices, class balance within +-1.
fn stratified_indices(ds: &LabeledDataset, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for v in &mut by_class {
        v.shuffle(rng);
    }
    // Round-robin over classes so any remainder spreads one per class.
    let mut picked = Vec::with_capacity(count);
    let mut depth = 0;
    while picked.len() < count {
        let mut took = false;
        for v in &by_class {
            if picked.len() == count {
                break;
            }
            if depth < v.len() {
                picked.push(v[depth]);
                took = true;
            }
        }
        if !took {
            break;
        }
        depth += 1;
    }
    picked
}

/// Evenly divides a seeded stratified subsample of `fraction * N` points
/// into `client_count` disjoint equal shards.
pub fn partition_iid(ds: &LabeledDataset, plan: &PartitionPlan) -> Result<Vec<LabeledDataset>> {
    if plan.client_count == 0 || !(plan.fraction > 0.0 && plan.fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "invalid partition plan K={} fraction={}",
            plan.client_count, plan.fraction
        )));
    }
    let pool = (plan.fraction * ds.len() as f64).floor() as usize;
    if pool < plan.client_count * ds.class_count {
        return Err(Error::Domain(format!(
            "pool of {pool} too small for {} clients x {} classes",
            plan.client_count, ds.class_count
        )));
    }
    let mut rng = stream(plan.seed, &[tag::PARTITION, plan.client_count as u64]);
    let mut idx = stratified_indices(ds, pool, &mut rng);
    idx.shuffle(&mut rng);
    let per_shard = pool / plan.client_count;
    (0..plan.client_count)
        .map(|k| ds.subset(&idx[k * per_shard..(k + 1) * per_shard]))
        .collect()
}

/// Disjoint seeded split, stratified by class.
pub fn split_train_val(
    ds: &LabeledDataset,
    val_ratio: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_ratio > 0.0 && val_ratio < 1.0) {
        return Err(Error::Domain(format!("val_ratio {val_ratio} outside (0,1)")));
    }
    let val_count = (val_ratio * ds.len() as f64).round() as usize;
    if val_count == 0 || val_count == ds.len() {
        return Err(Error::Domain("degenerate split".into()));
    }
    let mut rng = stream(seed, &[tag::SPLIT]);
    let val_idx = stratified_indices(ds, val_count, &mut rng);
    let mut in_val = vec![false; ds.len()];
    for &i in &val_idx {
        in_val[i] = true;
    }
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| !in_val[i]).collect();
    Ok((ds.subset(&train_idx)?, ds.subset(&val_idx)?))
}
