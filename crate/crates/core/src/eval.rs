//! Ranking metrics, label propensities and top-k prediction.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::anns::{AnnsIndex, Cand};
use crate::classifier::{ClassifierBank, ScoredLabels};
use crate::dataset::SparseDataset;
use crate::encoder::EncoderParams;
use crate::{Error, Result};

fn check_k(ranked: &[u32], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if ranked.len() < k {
        return Err(Error::invalid(format!("{} predictions for k = {k}", ranked.len())));
    }
    Ok(())
}

#[inline]
fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// `|top-k ∩ positives| / k`.
pub fn precision_at_k(ranked: &[u32], positives: &[u32], k: usize) -> Result<f64> {
    check_k(ranked, k)?;
    let hits = ranked[..k].iter().filter(|l| positives.contains(l)).count();
    Ok(hits as f64 / k as f64)
}

/// Binary-gain DCG@k over the ideal DCG of `min(k, |positives|)` hits.
pub fn ndcg_at_k(ranked: &[u32], positives: &[u32], k: usize) -> Result<f64> {
    check_k(ranked, k)?;
    if positives.is_empty() {
        return Ok(0.0);
    }
    let dcg: f64 = ranked[..k]
        .iter()
        .enumerate()
        .filter(|(_, l)| positives.contains(l))
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..k.min(positives.len())).map(discount).sum();
    Ok(dcg / ideal)
}

/// Per-label propensities `p = 1 / (1 + C * (N_l + B)^-A)` with
/// `C = (ln N - 1) * (B + 1)^A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub a: f64,
    pub b: f64,
    pub n_points: usize,
    propensities: Vec<f64>,
}

impl PropensityModel {
    pub fn uniform(n_labels: usize) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            n_points: 0,
            propensities: vec![1.0; n_labels],
        }
    }

    pub fn propensity(&self, label: u32) -> Result<f64> {
        self.propensities.get(label as usize).copied().ok_or(Error::OutOfRange {
            what: "propensity label",
            index: label as usize,
            bound: self.propensities.len(),
        })
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    pub fn n_labels(&self) -> usize {
        self.propensities.len()
    }
}

pub const DEFAULT_PROPENSITY_A: f64 = 0.55;
pub const DEFAULT_PROPENSITY_B: f64 = 1.5;

pub fn fit_propensity(label_frequency: &[usize], n_points: usize, a: f64, b: f64) -> Result<PropensityModel> {
    if n_points < 2 {
        return Err(Error::invalid("propensity model needs N >= 2"));
    }
    let c = ((n_points as f64).ln() - 1.0) * (b + 1.0).powf(a);
    let propensities = label_frequency
        .iter()
        .map(|&f| 1.0 / (1.0 + c * (-a * (f as f64 + b).ln()).exp()))
        .collect();
    Ok(PropensityModel {
        a,
        b,
        n_points,
        propensities,
    })
}

fn inverse_propensities(positives: &[u32], prop: &PropensityModel) -> Result<Vec<f64>> {
    let mut inv: Vec<f64> = positives
        .iter()
        .map(|&l| prop.propensity(l).map(|p| 1.0 / p))
        .collect::<Result<_>>()?;
    inv.sort_by(|a, b| b.total_cmp(a));
    Ok(inv)
}

/// Propensity-scored precision, normalized by the best ordering of this
/// query's positives and scaled by `min(k, |positives|) / k` so that it
/// equals P@k under uniform propensities.
pub fn psp_at_k(ranked: &[u32], positives: &[u32], prop: &PropensityModel, k: usize) -> Result<f64> {
    check_k(ranked, k)?;
    if positives.is_empty() {
        return Ok(0.0);
    }
    let mut raw = 0.0;
    for l in &ranked[..k] {
        if positives.contains(l) {
            raw += 1.0 / prop.propensity(*l)?;
        }
    }
    let inv = inverse_propensities(positives, prop)?;
    let m = k.min(positives.len());
    let ideal: f64 = inv[..m].iter().sum();
    Ok(raw / ideal * m as f64 / k as f64)
}

/// Propensity-scored nDCG: discounted inverse-propensity gains over the
/// best achievable ordering of this query's positives.
pub fn psn_at_k(ranked: &[u32], positives: &[u32], prop: &PropensityModel, k: usize) -> Result<f64> {
    check_k(ranked, k)?;
    if positives.is_empty() {
        return Ok(0.0);
    }
    let mut dcg = 0.0;
    for (i, l) in ranked[..k].iter().enumerate() {
        if positives.contains(l) {
            dcg += discount(i) / prop.propensity(*l)?;
        }
    }
    let inv = inverse_propensities(positives, prop)?;
    let ideal: f64 = inv.iter().take(k).enumerate().map(|(i, g)| g * discount(i)).sum();
    Ok(dcg / ideal)
}

/// The `k` highest scores, ties towards the lower id.
pub fn top_k(scores: &[f32], k: usize) -> ScoredLabels {
    let mut all: Vec<Cand> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| Cand { score: s, id: i as u32 })
        .collect();
    let k = k.min(all.len());
    if k < all.len() {
        all.select_nth_unstable_by(k, |a, b| b.cmp(a));
        all.truncate(k);
    }
    all.sort_unstable_by(|a, b| b.cmp(a));
    ScoredLabels {
        label_ids: all.iter().map(|c| c.id).collect(),
        scores: all.iter().map(|c| c.score).collect(),
    }
}

/// How [`predict_topk`] ranks labels.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// Score every label and sort.
    Exact,
    /// Query an index built over the final classifier vectors.
    Anns { index: &'a AnnsIndex, query_beam: usize },
}

pub fn predict_topk(
    encoder: &EncoderParams<f32>,
    bank: &ClassifierBank<f32>,
    row: &crate::SparseVector,
    k: usize,
    predictor: Predictor<'_>,
) -> Result<ScoredLabels> {
    if k > bank.n_labels() {
        return Err(Error::invalid(format!("k = {k} exceeds L = {}", bank.n_labels())));
    }
    let emb = encoder.embed(row)?;
    match predictor {
        Predictor::Exact => Ok(top_k(&bank.score_all(&emb)?, k)),
        Predictor::Anns { index, query_beam } => index.query_topk(&emb, k, query_beam),
    }
}

/// Mean metrics over the rows of a split that have at least one positive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub p_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub psp_at: BTreeMap<usize, f64>,
    pub psn_at: BTreeMap<usize, f64>,
    pub n_evaluated: usize,
    pub n_excluded: usize,
}

const FAMILIES: [&str; 4] = ["p_at", "ndcg_at", "psp_at", "psn_at"];

impl MetricsReport {
    fn family(&self, i: usize) -> &BTreeMap<usize, f64> {
        [&self.p_at, &self.ndcg_at, &self.psp_at, &self.psn_at][i]
    }

    fn family_mut(&mut self, i: usize) -> &mut BTreeMap<usize, f64> {
        match i {
            0 => &mut self.p_at,
            1 => &mut self.ndcg_at,
            2 => &mut self.psp_at,
            _ => &mut self.psn_at,
        }
    }

    /// Flat key/value view: `p_at_1`, `ndcg_at_3`, ..., `n_evaluated`,
    /// `n_excluded`.
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (i, name) in FAMILIES.iter().enumerate() {
            for (k, v) in self.family(i) {
                m.insert(format!("{name}_{k}"), serde_json::json!(v));
            }
        }
        m.insert("n_evaluated".into(), self.n_evaluated.into());
        m.insert("n_excluded".into(), self.n_excluded.into());
        serde_json::Value::Object(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("metrics serialize")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string() + "\n").map_err(|e| Error::io(path, e))
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricsReport {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = serde_json::Map::deserialize(d)?;
        let mut out = MetricsReport::default();
        for (key, value) in map {
            let count = || {
                value
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| D::Error::custom(key.to_string()))
            };
            match key.as_str() {
                "n_evaluated" => out.n_evaluated = count()?,
                "n_excluded" => out.n_excluded = count()?,
                _ => {
                    let (i, k) = FAMILIES
                        .iter()
                        .enumerate()
                        .find_map(|(i, f)| {
                            key.strip_prefix(f)
                                .and_then(|r| r.strip_prefix('_'))
                                .and_then(|r| r.parse::<usize>().ok())
                                .map(|k| (i, k))
                        })
                        .ok_or_else(|| D::Error::custom(format!("unknown metric key {key}")))?;
                    let v = value
                        .as_f64()
                        .ok_or_else(|| D::Error::custom(format!("{key} is not a number")))?;
                    out.family_mut(i).insert(k, v);
                }
            }
        }
        Ok(out)
    }
}

/// Metrics of one query for every `k`, in the order p, ndcg, psp, psn.
pub fn row_metrics(ranked: &[u32], positives: &[u32], prop: &PropensityModel, ks: &[usize]) -> Result<Vec<[f64; 4]>> {
    ks.iter()
        .map(|&k| {
            Ok([
                precision_at_k(ranked, positives, k)?,
                ndcg_at_k(ranked, positives, k)?,
                psp_at_k(ranked, positives, prop, k)?,
                psn_at_k(ranked, positives, prop, k)?,
            ])
        })
        .collect()
}

/// Evaluates every row of `ds`; rows without positives are excluded from
/// the averages and counted in `n_excluded`.
pub fn evaluate(
    ds: &SparseDataset,
    encoder: &EncoderParams<f32>,
    bank: &ClassifierBank<f32>,
    ks: &[usize],
    prop: &PropensityModel,
    predictor: Predictor<'_>,
) -> Result<MetricsReport> {
    let k_max = ks
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::invalid("no k values given"))?;
    if k_max > ds.n_labels() {
        return Err(Error::invalid(format!("k = {k_max} exceeds L = {}", ds.n_labels())));
    }
    if prop.n_labels() != ds.n_labels() {
        return Err(Error::Dimension(format!(
            "propensities for {} labels, dataset has {}",
            prop.n_labels(),
            ds.n_labels()
        )));
    }
    let per_row: Vec<Option<Vec<[f64; 4]>>> = (0..ds.n_points())
        .into_par_iter()
        .map(|i| {
            let positives = ds.positives(i);
            if positives.is_empty() {
                return Ok(None);
            }
            let ranked = predict_topk(encoder, bank, ds.row(i), k_max, predictor)?.label_ids;
            row_metrics(&ranked, positives, prop, ks).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![[0.0f64; 4]; ks.len()];
    let mut n = 0usize;
    for row in per_row.iter().flatten() {
        n += 1;
        for (acc, m) in sums.iter_mut().zip(row) {
            for f in 0..4 {
                acc[f] += m[f];
            }
        }
    }
    let mut report = MetricsReport {
        n_evaluated: n,
        n_excluded: ds.n_points() - n,
        ..Default::default()
    };
    for (&k, acc) in ks.iter().zip(&sums) {
        for (f, &total) in acc.iter().enumerate() {
            report
                .family_mut(f)
                .insert(k, if n == 0 { 0.0 } else { total / n as f64 });
        }
    }
    Ok(report)
}
