//! Planted-prototype synthetic datasets.
//!
//! Labels come in small families. Each label's prototype is a sparse
//! direction made of a family component shared with its siblings plus a
//! component of its own, so siblings are natural hard negatives for one
//! another. A point is a noisy positive mixture of its labels' prototypes.
//! The prototypes are returned as label features, and scoring test points
//! against them gives an accuracy oracle for the split.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use super::{SparseDataset, SparseVector};
use crate::rng::{rng_for, stream};
use crate::{Error, Result};

const FAMILY_SIZE: usize = 4;
const SHARED_FEATURES: usize = 6;
const OWN_FEATURES: usize = 10;
const FAMILY_WEIGHT: f32 = 0.8;
const ORACLE_FLOOR: f64 = 0.95;
const ORACLE_NOISE_LIMIT: f64 = 0.1;

fn random_support(rng: &mut impl Rng, n_features: usize, count: usize) -> Vec<u32> {
    sample(rng, n_features, count.min(n_features))
        .into_iter()
        .map(|j| j as u32)
        .collect()
}

fn prototypes(rng: &mut impl Rng, n_features: usize, n_labels: usize) -> Vec<SparseVector> {
    let n_families = n_labels.div_ceil(FAMILY_SIZE);
    let families: Vec<Vec<(u32, f32)>> = (0..n_families)
        .map(|_| {
            random_support(rng, n_features, SHARED_FEATURES)
                .into_iter()
                .map(|j| (j, FAMILY_WEIGHT * rng.random_range(0.5f32..1.5)))
                .collect()
        })
        .collect();
    (0..n_labels)
        .map(|l| {
            let mut acc: BTreeMap<u32, f32> = families[l / FAMILY_SIZE].iter().copied().collect();
            for j in random_support(rng, n_features, OWN_FEATURES) {
                *acc.entry(j).or_default() += rng.random_range(0.5f32..1.5);
            }
            let norm = acc.values().map(|v| v * v).sum::<f32>().sqrt();
            SparseVector::from_pairs(acc.into_iter().map(|(j, v)| (j, v / norm)).collect())
                .expect("prototype entries are unique and finite")
        })
        .collect()
}

fn draw_point(
    rng: &mut impl Rng,
    protos: &[SparseVector],
    n_features: usize,
    labels_per_point: usize,
    noise: f64,
) -> (SparseVector, Vec<u32>) {
    let mut labels: Vec<u32> = sample(rng, protos.len(), labels_per_point)
        .into_iter()
        .map(|l| l as u32)
        .collect();
    labels.sort_unstable();
    let mut acc: BTreeMap<u32, f32> = BTreeMap::new();
    let mut support = 0usize;
    for &l in &labels {
        let weight = rng.random_range(0.5f32..1.5);
        for (j, v) in protos[l as usize].iter() {
            support += 1;
            if noise > 0.0 && rng.random_bool(noise) {
                continue;
            }
            *acc.entry(j).or_default() += weight * v * rng.random_range(0.8f32..1.2);
        }
    }
    let n_noise = (2.0 * noise * support as f64).round() as usize;
    for j in random_support(rng, n_features, n_noise) {
        *acc.entry(j).or_default() += rng.random_range(0.0f32..0.6);
    }
    let row = SparseVector::from_pairs(acc.into_iter().collect()).expect("point entries are unique and finite");
    (row, labels)
}

/// Generates `(train, test)` with `n_points` training rows and a quarter as
/// many test rows. Both carry the prototypes as label features.
///
/// Fails when the prototype oracle reaches P@1 below 0.95 on the test split
/// at `noise_level <= 0.1`.
pub fn generate_synthetic(
    n_points: usize,
    n_features: usize,
    n_labels: usize,
    labels_per_point: usize,
    noise_level: f64,
    seed: u64,
) -> Result<(SparseDataset, SparseDataset)> {
    if n_points == 0 || n_features == 0 || n_labels == 0 || labels_per_point == 0 {
        return Err(Error::Infeasible("all counts must be positive".into()));
    }
    if labels_per_point > n_labels {
        return Err(Error::Infeasible(format!(
            "labels_per_point {labels_per_point} exceeds n_labels {n_labels}"
        )));
    }
    if !(0.0..1.0).contains(&noise_level) {
        return Err(Error::Infeasible("noise_level must lie in [0, 1)".into()));
    }
    let mut rng = rng_for(seed, &[stream::SYNTH]);
    let protos = prototypes(&mut rng, n_features, n_labels);
    let n_test = n_points.div_ceil(4);

    let mut split = |n: usize| -> Result<SparseDataset> {
        let (rows, positives) = (0..n)
            .map(|_| draw_point(&mut rng, &protos, n_features, labels_per_point, noise_level))
            .unzip();
        SparseDataset::new(n_features, n_labels, rows, positives, Some(protos.clone()))
    };
    let train = split(n_points)?;
    let test = split(n_test)?;

    if noise_level <= ORACLE_NOISE_LIMIT {
        let p1 = prototype_oracle_precision(&test)?;
        if p1 < ORACLE_FLOOR {
            return Err(Error::Infeasible(format!(
                "prototype oracle P@1 {p1:.3} below {ORACLE_FLOOR}; too few features for {n_labels} labels"
            )));
        }
    }
    Ok((train, test))
}

/// P@1 of ranking labels by the inner product between each row and the
/// label feature rows (the planted prototypes for synthetic data).
pub fn prototype_oracle_precision(ds: &SparseDataset) -> Result<f64> {
    let protos = ds
        .label_features()
        .ok_or_else(|| Error::Missing("label features (prototypes)".into()))?;
    let mut hits = 0usize;
    let mut counted = 0usize;
    for i in 0..ds.n_points() {
        if ds.positives(i).is_empty() {
            continue;
        }
        counted += 1;
        let mut best = (f32::NEG_INFINITY, 0u32);
        for (l, p) in protos.iter().enumerate() {
            let s = ds.row(i).dot(p);
            if s > best.0 {
                best = (s, l as u32);
            }
        }
        if ds.positives(i).binary_search(&best.1).is_ok() {
            hits += 1;
        }
    }
    Ok(hits as f64 / counted.max(1) as f64)
}
