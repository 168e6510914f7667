//! Sparse multilabel datasets: the query rows, their positive label sets
//! and optional per-label feature rows.

mod cache;
mod synthetic;
mod xc_format;

pub use cache::{read_binary, write_binary};
pub use synthetic::{generate_synthetic, prototype_oracle_precision};
pub use xc_format::{parse_xc, parse_xc_file, serialize_xc, write_xc_file};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::{Error, Result};

/// Reads a dataset file, recognizing the binary cache by its magic bytes and
/// parsing anything else as XC text.
pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<SparseDataset> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    let is_binary = std::fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut magic))
        .map(|_| &magic == b"XCDS");
    match is_binary {
        Ok(true) => read_binary(path),
        Ok(false) => parse_xc_file(path),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => parse_xc_file(path),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// `k` distinct label ids drawn uniformly from `0..n_labels`, ascending.
pub fn random_labels(n_labels: usize, k: usize, seed: u64) -> Result<Vec<u32>> {
    if k == 0 || k > n_labels {
        return Err(Error::invalid(format!("cannot draw {k} labels out of {n_labels}")));
    }
    let mut rng = crate::rng::rng_for(seed, &[crate::rng::stream::SHUFFLE, u64::MAX]);
    let mut ids: Vec<u32> = rand::seq::index::sample(&mut rng, n_labels, k)
        .into_iter()
        .map(|l| l as u32)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// A sparse row with strictly increasing feature ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseVector {
    /// Builds a vector from already-sorted, duplicate-free entries.
    pub fn new(indices: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} feature ids but {} values",
                indices.len(),
                values.len()
            )));
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "feature ids not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse vector values".into()));
        }
        Ok(Self { indices, values })
    }

    /// Sorts the pairs; duplicate feature ids are an error.
    pub fn from_pairs(mut pairs: Vec<(u32, f32)>) -> Result<Self> {
        pairs.sort_by_key(|p| p.0);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!("duplicate feature id {}", w[0].0)));
        }
        let (indices, values) = pairs.into_iter().unzip();
        Self::new(indices, values)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    #[inline]
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.last().copied()
    }

    pub fn l2_norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn dot_dense(&self, dense: &[f32]) -> f32 {
        self.iter().map(|(j, v)| v * dense[j as usize]).sum()
    }

    pub fn dot(&self, other: &SparseVector) -> f32 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0f32);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Query rows with positive label sets over a fixed label space.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    n_features: usize,
    n_labels: usize,
    rows: Vec<SparseVector>,
    positives: Vec<Vec<u32>>,
    label_features: Option<Vec<SparseVector>>,
    /// Original label id for each label of this dataset, set by
    /// [`SparseDataset::subset_by_labels`].
    label_map: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub avg_points_per_label: f64,
    pub avg_labels_per_point: f64,
    pub label_frequency: Vec<usize>,
}

impl SparseDataset {
    /// Validates and assembles a dataset. Positive sets are sorted; duplicate
    /// label ids are rejected.
    pub fn new(
        n_features: usize,
        n_labels: usize,
        rows: Vec<SparseVector>,
        mut positives: Vec<Vec<u32>>,
        label_features: Option<Vec<SparseVector>>,
    ) -> Result<Self> {
        if rows.len() != positives.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} positive sets",
                rows.len(),
                positives.len()
            )));
        }
        for row in &rows {
            check_feature_bound(row, n_features)?;
        }
        for set in positives.iter_mut() {
            set.sort_unstable();
            if let Some(w) = set.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("duplicate label id {}", w[0])));
            }
            if let Some(&l) = set.last() {
                if l as usize >= n_labels {
                    return Err(Error::OutOfRange {
                        what: "label id",
                        index: l as usize,
                        bound: n_labels,
                    });
                }
            }
        }
        if let Some(lf) = &label_features {
            if lf.len() != n_labels {
                return Err(Error::Dimension(format!(
                    "{} label feature rows for {n_labels} labels",
                    lf.len()
                )));
            }
            for row in lf {
                check_feature_bound(row, n_features)?;
            }
        }
        Ok(Self {
            n_features,
            n_labels,
            rows,
            positives,
            label_features,
            label_map: None,
        })
    }

    #[inline]
    pub fn n_points(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    #[inline]
    pub fn row(&self, i: usize) -> &SparseVector {
        &self.rows[i]
    }

    #[inline]
    pub fn rows(&self) -> &[SparseVector] {
        &self.rows
    }

    #[inline]
    pub fn positives(&self, i: usize) -> &[u32] {
        &self.positives[i]
    }

    pub fn all_positives(&self) -> &[Vec<u32>] {
        &self.positives
    }

    pub fn label_features(&self) -> Option<&[SparseVector]> {
        self.label_features.as_deref()
    }

    pub fn label_map(&self) -> Option<&[u32]> {
        self.label_map.as_deref()
    }

    /// Original label id of `label` (identity unless this is a subset).
    pub fn original_label(&self, label: u32) -> u32 {
        self.label_map.as_ref().map_or(label, |m| m[label as usize])
    }

    pub fn max_positives(&self) -> usize {
        self.positives.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn with_label_features(mut self, label_features: Vec<SparseVector>) -> Result<Self> {
        if label_features.len() != self.n_labels {
            return Err(Error::Dimension(format!(
                "{} label feature rows for {} labels",
                label_features.len(),
                self.n_labels
            )));
        }
        for row in &label_features {
            check_feature_bound(row, self.n_features)?;
        }
        self.label_features = Some(label_features);
        Ok(self)
    }

    pub fn stats(&self) -> DatasetStats {
        let mut label_frequency = vec![0usize; self.n_labels];
        for set in &self.positives {
            for &l in set {
                label_frequency[l as usize] += 1;
            }
        }
        let total: usize = label_frequency.iter().sum();
        DatasetStats {
            avg_points_per_label: total as f64 / self.n_labels.max(1) as f64,
            avg_labels_per_point: total as f64 / self.n_points().max(1) as f64,
            label_frequency,
        }
    }

    /// Restricts the label space to `label_ids` (re-indexed in increasing
    /// order) and keeps only the rows with at least one surviving positive.
    pub fn subset_by_labels(&self, label_ids: &[u32]) -> Result<Self> {
        let mut kept: Vec<u32> = label_ids.to_vec();
        kept.sort_unstable();
        kept.dedup();
        if kept.is_empty() {
            return Err(Error::invalid("empty label subset"));
        }
        if let Some(&l) = kept.last() {
            if l as usize >= self.n_labels {
                return Err(Error::OutOfRange {
                    what: "label id",
                    index: l as usize,
                    bound: self.n_labels,
                });
            }
        }
        let remap: BTreeMap<u32, u32> = kept.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect();

        let mut rows = Vec::new();
        let mut positives = Vec::new();
        for (row, set) in self.rows.iter().zip(&self.positives) {
            let mapped: Vec<u32> = set.iter().filter_map(|l| remap.get(l).copied()).collect();
            if !mapped.is_empty() {
                rows.push(row.clone());
                positives.push(mapped);
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("label subset covers no rows"));
        }
        let label_features = self
            .label_features
            .as_ref()
            .map(|lf| kept.iter().map(|&l| lf[l as usize].clone()).collect());
        let label_map = kept.iter().map(|&l| self.original_label(l)).collect();

        let mut out = Self::new(self.n_features, kept.len(), rows, positives, label_features)?;
        out.label_map = Some(label_map);
        Ok(out)
    }

    /// Appends one row per label holding that label's feature row, with the
    /// label itself as the only positive.
    pub fn augment_with_label_text(&self) -> Result<Self> {
        let lf = self
            .label_features
            .as_ref()
            .ok_or_else(|| Error::Missing("label features required for augmentation".into()))?;
        let mut rows = self.rows.clone();
        let mut positives = self.positives.clone();
        rows.extend(lf.iter().cloned());
        positives.extend((0..self.n_labels as u32).map(|l| vec![l]));
        let mut out = Self::new(
            self.n_features,
            self.n_labels,
            rows,
            positives,
            self.label_features.clone(),
        )?;
        out.label_map = self.label_map.clone();
        Ok(out)
    }

    /// Seeded random split into (train, test) by row.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid("test_fraction must lie in [0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.n_points()).collect();
        order.shuffle(&mut crate::rng::rng_for(seed, &[crate::rng::stream::SHUFFLE]));
        let n_test = (self.n_points() as f64 * test_fraction).round() as usize;
        let (test_ids, train_ids) = order.split_at(n_test);
        Ok((self.select_rows(train_ids)?, self.select_rows(test_ids)?))
    }

    pub fn select_rows(&self, ids: &[usize]) -> Result<Self> {
        let mut out = Self::new(
            self.n_features,
            self.n_labels,
            ids.iter().map(|&i| self.rows[i].clone()).collect(),
            ids.iter().map(|&i| self.positives[i].clone()).collect(),
            self.label_features.clone(),
        )?;
        out.label_map = self.label_map.clone();
        Ok(out)
    }

    /// Fits log-idf weights on this dataset and applies them to its rows and
    /// label features, then L2-normalizes every row.
    pub fn tfidf_normalize(&self) -> Self {
        TfIdf::fit(self).transform(self)
    }
}

fn check_feature_bound(row: &SparseVector, n_features: usize) -> Result<()> {
    match row.max_index() {
        Some(j) if j as usize >= n_features => Err(Error::OutOfRange {
            what: "feature id",
            index: j as usize,
            bound: n_features,
        }),
        _ => Ok(()),
    }
}

/// Inverse document frequencies `ln(N / df) + 1`, fitted on one corpus and
/// reusable on another split in the same feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdf {
    idf: Vec<f32>,
}

impl TfIdf {
    pub fn fit(ds: &SparseDataset) -> Self {
        let mut df = vec![0usize; ds.n_features()];
        for row in ds.rows() {
            for &j in row.indices() {
                df[j as usize] += 1;
            }
        }
        let n = ds.n_points().max(1) as f64;
        let idf = df
            .iter()
            .map(|&c| {
                if c == 0 {
                    1.0
                } else {
                    ((n / c as f64).ln() + 1.0) as f32
                }
            })
            .collect();
        Self { idf }
    }

    pub fn idf(&self) -> &[f32] {
        &self.idf
    }

    pub fn apply(&self, row: &SparseVector) -> SparseVector {
        let values: Vec<f32> = row
            .iter()
            .map(|(j, v)| v * self.idf.get(j as usize).copied().unwrap_or(1.0))
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        let values = if norm > 0.0 {
            values.into_iter().map(|v| v / norm).collect()
        } else {
            values
        };
        SparseVector {
            indices: row.indices.clone(),
            values,
        }
    }

    pub fn transform(&self, ds: &SparseDataset) -> SparseDataset {
        SparseDataset {
            n_features: ds.n_features,
            n_labels: ds.n_labels,
            rows: ds.rows.iter().map(|r| self.apply(r)).collect(),
            positives: ds.positives.clone(),
            label_features: ds
                .label_features
                .as_ref()
                .map(|lf| lf.iter().map(|r| self.apply(r)).collect()),
            label_map: ds.label_map.clone(),
        }
    }
}
