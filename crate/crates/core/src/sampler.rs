//! Per-query label slates for every negative-sampling strategy.
//!
//! A slate lists positive slots, then hard negatives, then random negatives.
//! Random negatives are drawn uniformly with replacement from the labels
//! outside the hard set and carry the weight `(L - k_h) / k_r`; positives
//! that land among the negatives are neutralized by the mask, not removed.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anns::{retrieve_hard_negatives, AnnsIndex, IndexKind, IndexParams, NegativeCache};
use crate::encoder::EncoderParams;
use crate::linalg::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerStrategy {
    /// Uniform random negatives only.
    RandomOnly,
    /// Only hard negatives from the staged (stale) classifier index.
    StaleHard,
    /// Only hard negatives from an index over the current classifiers,
    /// rebuilt every iteration.
    UpToDateHard,
    /// Stale classifier hard negatives plus weighted random negatives.
    Mixture,
    /// Mixture with the hard share ramped up linearly after `tau_s`.
    CurriculumMixture,
    /// Only hard negatives retrieved by encoded label features.
    LabelEmbHard,
    /// Label-feature hard negatives plus weighted random negatives.
    LabelEmbMixture,
}

impl SamplerStrategy {
    pub const ALL: [SamplerStrategy; 7] = [
        Self::RandomOnly,
        Self::StaleHard,
        Self::UpToDateHard,
        Self::Mixture,
        Self::CurriculumMixture,
        Self::LabelEmbHard,
        Self::LabelEmbMixture,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomOnly => "random-only",
            Self::StaleHard => "stale-hard",
            Self::UpToDateHard => "up-to-date-hard",
            Self::Mixture => "mixture",
            Self::CurriculumMixture => "curriculum-mixture",
            Self::LabelEmbHard => "label-emb-hard",
            Self::LabelEmbMixture => "label-emb-mixture",
        }
    }

    /// Whether the strategy uses hard negatives once past the warm phase.
    pub fn uses_hard(&self) -> bool {
        *self != Self::RandomOnly
    }

    /// Whether hard negatives come from a staged cache.
    pub fn uses_cache(&self) -> bool {
        !matches!(self, Self::RandomOnly | Self::UpToDateHard)
    }

    /// Whether the whole negative budget goes to hard negatives.
    pub fn hard_only(&self) -> bool {
        matches!(self, Self::StaleHard | Self::UpToDateHard | Self::LabelEmbHard)
    }

    /// Whether the index is built over encoded label features instead of
    /// classifier vectors.
    pub fn uses_label_embeddings(&self) -> bool {
        matches!(self, Self::LabelEmbHard | Self::LabelEmbMixture)
    }
}

impl fmt::Display for SamplerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Self::ALL
            .into_iter()
            .find(|st| st.name().replace('-', "") == norm)
            .ok_or_else(|| Error::invalid(format!("unknown strategy '{s}'")))
    }
}

/// Slate size parameters shared by every strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlateBudget {
    pub k_p: usize,
    pub k_h: usize,
    pub k_r: usize,
    pub tau_s: usize,
    pub curriculum_ramp: usize,
}

impl SlateBudget {
    pub fn negatives(&self) -> usize {
        self.k_h + self.k_r
    }

    /// Hard negatives a cache row must hold for `strategy`.
    pub fn cache_width(&self, strategy: SamplerStrategy) -> usize {
        if strategy.hard_only() {
            self.negatives()
        } else if strategy.uses_hard() {
            self.k_h
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Positive,
    /// Random non-positive filling a positive slot.
    Pad,
    Hard,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSlate {
    pub label_ids: Vec<u32>,
    pub y_mask: Vec<bool>,
    pub weights: Vec<f32>,
    pub provenance: Vec<SlotKind>,
    /// Snapshot epoch of the cache the hard slots came from, if any.
    pub hard_snapshot_epoch: Option<u32>,
}

impl LabelSlate {
    pub fn len(&self) -> usize {
        self.label_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_ids.is_empty()
    }

    pub fn n_positive_slots(&self) -> usize {
        self.provenance
            .iter()
            .take_while(|k| matches!(k, SlotKind::Positive | SlotKind::Pad))
            .count()
    }

    pub fn count(&self, kind: SlotKind) -> usize {
        self.provenance.iter().filter(|&&k| k == kind).count()
    }
}

/// `k_p` positive slots: a uniform subset of the positives when there are
/// enough, otherwise all positives followed by random non-positive pads.
/// The mask is `true` exactly on real positives.
/// The positive set sorted and duplicate-free; borrowed when it already is.
fn sorted_set(positives: &[u32]) -> Cow<'_, [u32]> {
    if positives.windows(2).all(|w| w[0] < w[1]) {
        Cow::Borrowed(positives)
    } else {
        let mut v = positives.to_vec();
        v.sort_unstable();
        v.dedup();
        Cow::Owned(v)
    }
}

pub fn build_positive_slots(
    positives: &[u32],
    k_p: usize,
    n_labels: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, Vec<bool>)> {
    let positives = &*sorted_set(positives);
    if k_p == 0 {
        return Err(Error::invalid("k_p must be positive"));
    }
    if positives.len() >= k_p {
        let ids = sample(rng, positives.len(), k_p)
            .into_iter()
            .map(|i| positives[i])
            .collect();
        return Ok((ids, vec![true; k_p]));
    }
    if positives.len() == n_labels {
        return Err(Error::invalid("no non-positive label left to pad with"));
    }
    let mut ids = positives.to_vec();
    let mut mask = vec![true; positives.len()];
    while ids.len() < k_p {
        let l = rng.random_range(0..n_labels as u32);
        if positives.binary_search(&l).is_err() {
            ids.push(l);
            mask.push(false);
        }
    }
    Ok((ids, mask))
}

/// `k_r` i.i.d. uniform draws from `[L] \ hard`.
pub fn sample_random_negatives(n_labels: usize, hard: &[u32], k_r: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let mut excluded = hard.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    if excluded.iter().any(|&h| h as usize >= n_labels) {
        return Err(Error::invalid("hard set contains out-of-range labels"));
    }
    let pool = n_labels - excluded.len();
    if pool == 0 {
        return Err(Error::invalid("hard set covers every label"));
    }
    Ok((0..k_r)
        .map(|_| {
            // Map a rank in the complement back to a label id.
            let mut l = rng.random_range(0..pool as u32);
            for &h in &excluded {
                if h <= l {
                    l += 1;
                } else {
                    break;
                }
            }
            l
        })
        .collect())
}

/// Hard and random counts at `epoch` for a curriculum: the hard share grows
/// linearly from 0 at `tau_s` to `k_h` at `tau_s + ramp`; the total stays
/// `k_h + k_r`.
pub fn curriculum_counts(epoch: usize, budget: &SlateBudget) -> Result<(usize, usize)> {
    if budget.curriculum_ramp < 1 {
        return Err(Error::invalid("curriculum ramp must be at least 1 epoch"));
    }
    let total = budget.negatives();
    if epoch < budget.tau_s {
        return Ok((0, total));
    }
    let frac = ((epoch - budget.tau_s) as f64 / budget.curriculum_ramp as f64).min(1.0);
    let k_h = (budget.k_h as f64 * frac).round() as usize;
    Ok((k_h, total - k_h))
}

/// Hard and random slot counts for `strategy` at `epoch`.
pub fn slot_counts(strategy: SamplerStrategy, epoch: usize, budget: &SlateBudget) -> Result<(usize, usize)> {
    if !strategy.uses_hard() || epoch < budget.tau_s {
        return Ok((0, budget.negatives()));
    }
    Ok(match strategy {
        SamplerStrategy::CurriculumMixture => curriculum_counts(epoch, budget)?,
        s if s.hard_only() => (budget.negatives(), 0),
        _ => (budget.k_h, budget.k_r),
    })
}

/// Hard negatives available to a query, best first.
#[derive(Debug, Clone, Copy)]
pub struct HardSource<'a> {
    pub ids: &'a [u32],
    pub snapshot_epoch: Option<u32>,
}

/// Assembles the slate of one query. Before `tau_s` every strategy samples
/// like [`SamplerStrategy::RandomOnly`]. Hard strategies take the leading
/// ids of `hard`, which must be present from `tau_s` on.
pub fn assemble_slate(
    strategy: SamplerStrategy,
    budget: &SlateBudget,
    positives: &[u32],
    n_labels: usize,
    epoch: usize,
    hard: Option<HardSource<'_>>,
    rng: &mut impl Rng,
) -> Result<LabelSlate> {
    let positives = &*sorted_set(positives);
    let (k_h, k_r) = slot_counts(strategy, epoch, budget)?;
    if k_h >= n_labels {
        return Err(Error::invalid(format!("k_h {k_h} must be below L {n_labels}")));
    }
    let (pos_ids, pos_mask) = build_positive_slots(positives, budget.k_p, n_labels, rng)?;
    let (hard_ids, snapshot) = if k_h == 0 {
        (&[][..], None)
    } else {
        let src = hard.ok_or_else(|| Error::Missing(format!("hard negatives for strategy {strategy}")))?;
        if src.ids.len() < k_h {
            return Err(Error::Dimension(format!(
                "{} hard negatives available, {k_h} needed",
                src.ids.len()
            )));
        }
        (&src.ids[..k_h], src.snapshot_epoch)
    };
    let random = if k_r > 0 {
        sample_random_negatives(n_labels, hard_ids, k_r, rng)?
    } else {
        Vec::new()
    };
    let c = if k_r > 0 {
        ((n_labels - k_h) as f64 / k_r as f64) as f32
    } else {
        0.0
    };

    let n = budget.k_p + k_h + k_r;
    let mut slate = LabelSlate {
        label_ids: Vec::with_capacity(n),
        y_mask: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        provenance: Vec::with_capacity(n),
        hard_snapshot_epoch: snapshot,
    };
    for (&l, &m) in pos_ids.iter().zip(&pos_mask) {
        slate.label_ids.push(l);
        slate.y_mask.push(m);
        slate.weights.push(1.0);
        slate
            .provenance
            .push(if m { SlotKind::Positive } else { SlotKind::Pad });
    }
    let negatives = hard_ids
        .iter()
        .map(|&l| (l, 1.0, SlotKind::Hard))
        .chain(random.iter().map(|&l| (l, c, SlotKind::Random)));
    for (l, w, kind) in negatives {
        slate.label_ids.push(l);
        slate.y_mask.push(positives.binary_search(&l).is_ok());
        slate.weights.push(w);
        slate.provenance.push(kind);
    }
    Ok(slate)
}

/// Hard negatives retrieved by inner product against encoded label
/// features rather than classifier vectors.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_label_embedding_hard(
    encoder: &EncoderParams<f32>,
    label_features: Option<&[crate::SparseVector]>,
    embeddings: &DenseMatrix<f32>,
    positives: &[Vec<u32>],
    k_h: usize,
    kind: IndexKind,
    params: &IndexParams,
    snapshot_epoch: u32,
) -> Result<NegativeCache> {
    let features = label_features.ok_or_else(|| Error::Missing("label features".into()))?;
    let label_emb = encoder.embed_all(features)?;
    let index = AnnsIndex::build(kind, label_emb, params)?.with_snapshot_epoch(snapshot_epoch);
    retrieve_hard_negatives(&index, embeddings, positives, k_h, params.query_beam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::init_classifiers;
    use crate::encoder::{init_encoder, EncoderShape, HiddenLayer, InitScheme};
    use crate::SparseVector;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn budget(k_p: usize, k_h: usize, k_r: usize, tau_s: usize) -> SlateBudget {
        SlateBudget {
            k_p,
            k_h,
            k_r,
            tau_s,
            curriculum_ramp: 20,
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in SamplerStrategy::ALL {
            assert_eq!(s.name().parse::<SamplerStrategy>().unwrap(), s);
            assert_eq!(format!("{s:?}").parse::<SamplerStrategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!("hardest".parse::<SamplerStrategy>().is_err());
    }

    #[test]
    fn padding_and_exact_positive_slots() {
        let (ids, mask) = build_positive_slots(&[3], 3, 10, &mut rng(1)).unwrap();
        assert_eq!(ids[0], 3);
        assert_eq!(mask, vec![true, false, false]);
        assert!(ids[1..].iter().all(|&l| l != 3 && l < 10));

        let (mut ids, mask) = build_positive_slots(&[1, 4, 6], 3, 10, &mut rng(2)).unwrap();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 4, 6]);
        assert_eq!(mask, vec![true; 3]);
        assert!(build_positive_slots(&[0], 0, 10, &mut rng(0)).is_err());
    }

    #[test]
    fn positive_subsets_are_uniform() {
        let positives: Vec<u32> = (0..20).collect();
        let mut counts = [0usize; 20];
        let mut r = rng(3);
        let n = 100_000;
        for _ in 0..n {
            let (ids, _) = build_positive_slots(&positives, 7, 50, &mut r).unwrap();
            let mut s = ids.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 7);
            for l in ids {
                counts[l as usize] += 1;
            }
        }
        let p = 7.0 / 20.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn random_negatives_avoid_hard_set() {
        let draws = sample_random_negatives(2, &[0], 50, &mut rng(4)).unwrap();
        assert!(draws.iter().all(|&l| l == 1));
        assert!(sample_random_negatives(2, &[0, 1], 1, &mut rng(4)).is_err());
        let rep = sample_random_negatives(5, &[0, 1, 2], 10, &mut rng(5)).unwrap();
        let mut uniq = rep.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert!(uniq.len() < rep.len());
    }

    #[test]
    fn random_negative_frequencies() {
        let hard: Vec<u32> = (0..100).step_by(10).collect();
        let n = 1_000_000;
        let draws = sample_random_negatives(100, &hard, n, &mut rng(6)).unwrap();
        let mut counts = [0usize; 100];
        for l in draws {
            counts[l as usize] += 1;
        }
        let p = 1.0 / 90.0;
        let tol = 5.0 * (p * (1.0 - p) / n as f64).sqrt();
        for (l, &c) in counts.iter().enumerate() {
            if hard.contains(&(l as u32)) {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 / n as f64 - p).abs() < tol, "label {l}");
            }
        }
    }

    #[test]
    fn curriculum_schedule() {
        let b = budget(1, 50, 400, 5);
        assert_eq!(curriculum_counts(2, &b).unwrap(), (0, 450));
        assert_eq!(curriculum_counts(15, &b).unwrap(), (25, 425));
        assert_eq!(curriculum_counts(25, &b).unwrap(), (50, 400));
        assert_eq!(curriculum_counts(90, &b).unwrap(), (50, 400));
        let zero = SlateBudget {
            curriculum_ramp: 0,
            ..b
        };
        assert!(curriculum_counts(6, &zero).is_err());
    }

    #[test]
    fn warm_phase_matches_random_only() {
        let b = budget(2, 3, 5, 4);
        let hard = [7u32, 8, 9];
        let src = HardSource {
            ids: &hard,
            snapshot_epoch: Some(0),
        };
        for epoch in 0..4 {
            let a = assemble_slate(SamplerStrategy::Mixture, &b, &[1], 20, epoch, Some(src), &mut rng(9)).unwrap();
            let r = assemble_slate(SamplerStrategy::RandomOnly, &b, &[1], 20, epoch, None, &mut rng(9)).unwrap();
            assert_eq!(a, r);
            assert_eq!(a.count(SlotKind::Hard), 0);
        }
    }

    #[test]
    fn mixture_uses_cache_row_verbatim() {
        let b = budget(2, 3, 5, 1);
        let hard = [7u32, 8, 9];
        let src = HardSource {
            ids: &hard,
            snapshot_epoch: Some(4),
        };
        let s = assemble_slate(SamplerStrategy::Mixture, &b, &[1, 9], 20, 1, Some(src), &mut rng(1)).unwrap();
        assert_eq!(&s.label_ids[2..5], &hard);
        assert_eq!(s.len(), 2 + 3 + 5);
        assert_eq!(s.hard_snapshot_epoch, Some(4));
        assert!(s.y_mask[4]);
        let c = (20.0 - 3.0) / 5.0;
        assert!(s.weights[5..].iter().all(|&w| w == c));
        assert!(s.weights[..5].iter().all(|&w| w == 1.0));
        for (l, m) in s.label_ids.iter().zip(&s.y_mask) {
            assert_eq!(*m, [1, 9].contains(l));
        }
        assert!(assemble_slate(SamplerStrategy::Mixture, &b, &[1], 20, 1, None, &mut rng(1)).is_err());

        let only = assemble_slate(SamplerStrategy::StaleHard, &b, &[1], 20, 1, Some(src), &mut rng(1));
        assert!(only.is_err(), "hard-only needs k_h + k_r cached ids");
        let wide: Vec<u32> = (10..18).collect();
        let only = assemble_slate(
            SamplerStrategy::StaleHard,
            &b,
            &[1],
            20,
            1,
            Some(HardSource {
                ids: &wide,
                snapshot_epoch: Some(0),
            }),
            &mut rng(1),
        )
        .unwrap();
        assert_eq!(only.count(SlotKind::Hard), 8);
        assert_eq!(only.count(SlotKind::Random), 0);
        assert_eq!(only.len(), 2 + 8);
    }

    #[test]
    fn random_slot_marginal() {
        let b = budget(1, 4, 6, 0);
        let hard = [0u32, 1, 2, 3];
        let src = HardSource {
            ids: &hard,
            snapshot_epoch: Some(0),
        };
        let mut r = rng(12);
        let n = 40_000;
        let target = 17u32;
        let mut hits = 0usize;
        for _ in 0..n {
            let s = assemble_slate(SamplerStrategy::Mixture, &b, &[5], 30, 0, Some(src), &mut r).unwrap();
            hits += s
                .label_ids
                .iter()
                .zip(&s.provenance)
                .filter(|(&l, &k)| k == SlotKind::Random && l == target)
                .count();
        }
        // Expected occurrences per slate: k_r / (L - k_h).
        let mean = hits as f64 / n as f64;
        let want = 6.0 / 26.0;
        let sd = (want / n as f64).sqrt();
        assert!((mean - want).abs() < 5.0 * sd, "{mean} vs {want}");
    }

    #[test]
    fn up_to_date_hard_matches_brute_force() {
        let bank = init_classifiers::<f32>(100, 5, InitScheme::UniformScaled, 3).unwrap();
        let emb = DenseMatrix::from_fn(3, 5, |r, c| ((r + 2 * c) % 5) as f32 * 0.3 - 0.5);
        let positives = vec![vec![0u32, 4], vec![7], vec![]];
        let index = AnnsIndex::build_exact(bank.weights().clone()).unwrap();
        let cache = retrieve_hard_negatives(&index, &emb, &positives, 6, 0).unwrap();
        for q in 0..3 {
            let scores = bank.score_all(emb.row(q)).unwrap();
            let mut ids: Vec<u32> = (0..100).filter(|l| !positives[q].contains(l)).collect();
            ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
            let b = budget(1, 3, 3, 0);
            let slate = assemble_slate(
                SamplerStrategy::UpToDateHard,
                &b,
                &positives[q],
                100,
                0,
                Some(HardSource {
                    ids: cache.row(q),
                    snapshot_epoch: None,
                }),
                &mut rng(q as u64),
            )
            .unwrap();
            let hard: Vec<u32> = slate
                .label_ids
                .iter()
                .zip(&slate.provenance)
                .filter(|(_, &k)| k == SlotKind::Hard)
                .map(|(&l, _)| l)
                .collect();
            assert_eq!(hard, ids[..6]);
        }
    }

    fn identity_encoder(d: usize) -> EncoderParams<f32> {
        let proj = DenseMatrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });
        EncoderParams::new(proj, None::<HiddenLayer<f32>>).unwrap()
    }

    #[test]
    fn label_embedding_hard_degenerate_alignment() {
        let d = 6;
        let bank = init_classifiers::<f32>(40, d, InitScheme::UniformScaled, 8).unwrap();
        let features: Vec<SparseVector> = (0..40)
            .map(|l| {
                SparseVector::from_pairs(bank.row(l).iter().enumerate().map(|(j, &v)| (j as u32, v)).collect()).unwrap()
            })
            .collect();
        let emb = DenseMatrix::from_fn(5, d, |r, c| ((r * 7 + c * 3) % 11) as f32 / 11.0 - 0.4);
        let positives = vec![vec![1u32], vec![2, 3], vec![], vec![0], vec![39]];
        let params = IndexParams::default();
        let via_labels = retrieve_label_embedding_hard(
            &identity_encoder(d),
            Some(&features),
            &emb,
            &positives,
            5,
            IndexKind::Exact,
            &params,
            2,
        )
        .unwrap();
        let index = AnnsIndex::build_exact(bank.weights().clone())
            .unwrap()
            .with_snapshot_epoch(2);
        let via_w = retrieve_hard_negatives(&index, &emb, &positives, 5, 0).unwrap();
        assert_eq!(via_labels, via_w);

        let zero = init_encoder::<f32>(
            EncoderShape {
                input_dim: d,
                proj_dim: d,
                out_dim: d,
                hidden: false,
            },
            InitScheme::Zeros,
            0,
        )
        .unwrap();
        let tied = retrieve_label_embedding_hard(
            &zero,
            Some(&features),
            &emb,
            &positives,
            3,
            IndexKind::Exact,
            &params,
            0,
        )
        .unwrap();
        assert_eq!(tied.row(0), &[0, 2, 3]);
        assert_eq!(tied.row(1), &[0, 1, 4]);
        assert!(retrieve_label_embedding_hard(&zero, None, &emb, &positives, 3, IndexKind::Exact, &params, 0).is_err());
    }
}
