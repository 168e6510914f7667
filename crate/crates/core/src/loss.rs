//! Full BCE over all labels and its importance-weighted slate estimator.
//!
//! For a query with scores `s_l` and labels `y_l`:
//!
//! ```text
//! full  = sum_l y_l * softplus(-s_l) + (1 - y_l) * softplus(s_l)
//! slate = L_+  +  L_-(H)  +  (L - k_h) / k_r * L_-(R)
//! ```
//!
//! where `R` holds `k_r` labels drawn uniformly with replacement from the
//! labels outside the hard set `H`, so the slate loss and its gradients are
//! unbiased for the full ones. A positive that lands in `H` or `R` is
//! neutralized by the `(1 - y)` factor of `L_-`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::classifier::ClassifierBank;
use crate::linalg::{axpy, dot};
use crate::rng::rng_for;
use crate::{Error, Result, Scalar};

const SOFTPLUS_CLAMP: f64 = 30.0;

/// `ln(1 + e^s)`, linear above 30 and exponential below -30.
#[inline]
pub fn softplus<T: Scalar>(s: T) -> T {
    let clamp = T::from_f64_lossy(SOFTPLUS_CLAMP);
    if s > clamp {
        s
    } else if s < -clamp {
        s.exp()
    } else {
        s.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

/// Loss contribution and score derivative of one slate slot. Positive-role
/// slots carry the full BCE term; negative-role slots only `(1 - y) * softplus(s)`.
#[inline]
pub fn slot_term<T: Scalar>(score: T, y: bool, negative_role: bool, weight: T) -> (T, T) {
    match (y, negative_role) {
        (true, false) => (weight * softplus(-score), weight * (sigmoid(score) - T::one())),
        (true, true) => (T::zero(), T::zero()),
        (false, _) => (weight * softplus(score), weight * sigmoid(score)),
    }
}

/// Weighted slate loss. Slots `[0, n_positive_slots)` take the positive
/// role, the rest the negative role. Returns the loss and `dloss/dscore` per
/// slot.
pub fn slate_terms<T: Scalar>(scores: &[T], y_mask: &[bool], weights: &[T], n_positive_slots: usize) -> (T, Vec<T>) {
    debug_assert_eq!(scores.len(), y_mask.len());
    debug_assert_eq!(scores.len(), weights.len());
    let mut total = T::zero();
    let coeffs = scores
        .iter()
        .zip(y_mask)
        .zip(weights)
        .enumerate()
        .map(|(i, ((&s, &y), &w))| {
            let (l, g) = slot_term(s, y, i >= n_positive_slots, w);
            total += l;
            g
        })
        .collect();
    (total, coeffs)
}

pub fn full_bce_loss<T: Scalar>(scores: &[T], positives: &[u32]) -> Result<T> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut is_pos = vec![false; scores.len()];
    for &p in positives {
        *is_pos.get_mut(p as usize).ok_or(Error::OutOfRange {
            what: "label id",
            index: p as usize,
            bound: scores.len(),
        })? = true;
    }
    Ok(scores
        .iter()
        .zip(&is_pos)
        .map(|(&s, &y)| if y { softplus(-s) } else { softplus(s) })
        .sum())
}

/// Labels of one slate: positive slots, then hard, then random negatives.
#[derive(Debug, Clone, Copy)]
pub struct SlateSpec<'a> {
    pub positives: &'a [u32],
    pub hard: &'a [u32],
    pub random: &'a [u32],
}

impl SlateSpec<'_> {
    pub fn len(&self) -> usize {
        self.positives.len() + self.hard.len() + self.random.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.positives.iter().chain(self.hard).chain(self.random).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T = f64> {
    /// Terms of the positive slots (padding slots included).
    pub positive_part: T,
    pub hard_negative_part: T,
    pub random_negative_part_weighted: T,
    pub total: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlateGradients<T = f64> {
    pub per_label: BTreeMap<u32, Vec<T>>,
    pub wrt_embedding: Vec<T>,
}

/// Importance weight `(L - k_h) / k_r` of each random slot.
pub fn random_weight(n_labels: usize, k_h: usize, k_r: usize) -> f64 {
    (n_labels - k_h) as f64 / k_r as f64
}

fn validate(slate: &SlateSpec<'_>, slots: usize, y_len: usize, n_labels: usize, k_h: usize, k_r: usize) -> Result<()> {
    if k_h >= n_labels {
        return Err(Error::invalid(format!("k_h {k_h} must be below L {n_labels}")));
    }
    if k_r == 0 {
        return Err(Error::invalid("k_r must be positive"));
    }
    if slate.hard.len() != k_h || slate.random.len() != k_r {
        return Err(Error::Dimension(format!(
            "slate holds {} hard and {} random labels, expected {k_h} and {k_r}",
            slate.hard.len(),
            slate.random.len()
        )));
    }
    if slots != slate.len() || y_len != slate.len() {
        return Err(Error::Dimension(format!(
            "{slots} scores and {y_len} mask entries for a slate of {}",
            slate.len()
        )));
    }
    if let Some(l) = slate.labels().find(|&l| l as usize >= n_labels) {
        return Err(Error::OutOfRange {
            what: "slate label",
            index: l as usize,
            bound: n_labels,
        });
    }
    Ok(())
}

fn slot_weights<T: Scalar>(slate: &SlateSpec<'_>, n_labels: usize, k_h: usize, k_r: usize) -> Vec<T> {
    let c = T::from_f64_lossy(random_weight(n_labels, k_h, k_r));
    std::iter::repeat_n(T::one(), slate.positives.len() + slate.hard.len())
        .chain(std::iter::repeat_n(c, slate.random.len()))
        .collect()
}

/// The sampled slate estimator of the full BCE loss, split by slot group.
pub fn astra_loss<T: Scalar>(
    scores_on_slate: &[T],
    y_mask_on_slate: &[bool],
    slate: &SlateSpec<'_>,
    n_labels: usize,
    k_h: usize,
    k_r: usize,
) -> Result<LossBreakdown<T>> {
    validate(slate, scores_on_slate.len(), y_mask_on_slate.len(), n_labels, k_h, k_r)?;
    if scores_on_slate.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("slate scores".into()));
    }
    let weights = slot_weights::<T>(slate, n_labels, k_h, k_r);
    let n_p = slate.positives.len();
    let n_h = slate.hard.len();
    let mut parts = [T::zero(); 3];
    for (i, ((&s, &y), &w)) in scores_on_slate.iter().zip(y_mask_on_slate).zip(&weights).enumerate() {
        let group = if i < n_p {
            0
        } else if i < n_p + n_h {
            1
        } else {
            2
        };
        parts[group] += slot_term(s, y, i >= n_p, w).0;
    }
    Ok(LossBreakdown {
        positive_part: parts[0],
        hard_negative_part: parts[1],
        random_negative_part_weighted: parts[2],
        total: parts[0] + parts[1] + parts[2],
    })
}

/// Gradients of [`astra_loss`] with respect to every classifier row on the
/// slate and the query embedding. A label occupying several slots
/// accumulates one contribution per slot.
pub fn astra_gradients<T: Scalar>(
    embedding: &[T],
    bank: &ClassifierBank<T>,
    y_mask_on_slate: &[bool],
    slate: &SlateSpec<'_>,
    n_labels: usize,
    k_h: usize,
    k_r: usize,
) -> Result<SlateGradients<T>> {
    validate(slate, slate.len(), y_mask_on_slate.len(), n_labels, k_h, k_r)?;
    if bank.n_labels() != n_labels {
        return Err(Error::Dimension(format!(
            "bank has {} labels, expected {n_labels}",
            bank.n_labels()
        )));
    }
    let labels: Vec<u32> = slate.labels().collect();
    let scores = bank.score_labels(embedding, &labels)?.scores;
    let weights = slot_weights::<T>(slate, n_labels, k_h, k_r);
    let (_, coeffs) = slate_terms(&scores, y_mask_on_slate, &weights, slate.positives.len());
    Ok(gradients_from_coeffs(embedding, bank, &labels, &coeffs))
}

/// Chain rule from per-slot score derivatives to classifier rows and the
/// embedding.
pub fn gradients_from_coeffs<T: Scalar>(
    embedding: &[T],
    bank: &ClassifierBank<T>,
    labels: &[u32],
    coeffs: &[T],
) -> SlateGradients<T> {
    let mut per_label: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    let mut wrt_embedding = vec![T::zero(); embedding.len()];
    for (&l, &c) in labels.iter().zip(coeffs) {
        let row = per_label.entry(l).or_insert_with(|| vec![T::zero(); embedding.len()]);
        axpy(c, embedding, row);
        axpy(c, bank.row(l), &mut wrt_embedding);
    }
    SlateGradients {
        per_label,
        wrt_embedding,
    }
}

/// A fixed query against a fixed bank, used to study the estimator.
#[derive(Debug, Clone)]
pub struct ProbeInstance {
    pub embedding: Vec<f64>,
    pub bank: ClassifierBank<f64>,
    pub positives: Vec<u32>,
    pub hard: Vec<u32>,
}

/// How random negatives are produced for the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomDraw {
    /// `k_r` i.i.d. uniform draws from the labels outside the hard set.
    WithReplacement,
    /// Every label outside the hard set exactly once (`k_r = L - k_h`).
    Exhaustive,
}

impl ProbeInstance {
    fn complement(&self) -> Vec<u32> {
        let hard: std::collections::BTreeSet<u32> = self.hard.iter().copied().collect();
        (0..self.bank.n_labels() as u32).filter(|l| !hard.contains(l)).collect()
    }

    fn mask(&self, labels: &[u32]) -> Vec<bool> {
        labels.iter().map(|l| self.positives.contains(l)).collect()
    }

    pub fn slate_gradient(&self, random: &[u32]) -> Result<SlateGradients<f64>> {
        let slate = SlateSpec {
            positives: &self.positives,
            hard: &self.hard,
            random,
        };
        let labels: Vec<u32> = slate.labels().collect();
        astra_gradients(
            &self.embedding,
            &self.bank,
            &self.mask(&labels),
            &slate,
            self.bank.n_labels(),
            self.hard.len(),
            random.len(),
        )
    }

    /// Exact full-loss gradient, assembled from the exhaustive slate.
    pub fn exact_gradient(&self) -> Result<SlateGradients<f64>> {
        self.slate_gradient(&self.complement())
    }

    /// Draws `k_r` labels uniformly with replacement from outside the hard set.
    pub fn draw_random(&self, k_r: usize, rng: &mut impl Rng) -> Vec<u32> {
        let pool = self.complement();
        (0..k_r).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Root-mean-square of `|grad_hat - grad|` for the embedding gradient, over
/// `trials` independent random draws, for each `k_r`.
pub fn gradient_variance_probe(
    instance: &ProbeInstance,
    k_r_values: &[usize],
    trials: usize,
    draw: RandomDraw,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if trials < 1000 {
        return Err(Error::invalid("gradient_variance_probe needs at least 1000 trials"));
    }
    let exact = instance.exact_gradient()?.wrt_embedding;
    let complement = instance.complement();
    k_r_values
        .iter()
        .map(|&k_r| {
            let mut rng = rng_for(seed, &[k_r as u64]);
            let mut sum_sq = 0.0;
            for _ in 0..trials {
                let random = match draw {
                    RandomDraw::WithReplacement => instance.draw_random(k_r, &mut rng),
                    RandomDraw::Exhaustive => {
                        if k_r != complement.len() {
                            return Err(Error::invalid(format!(
                                "exhaustive draw needs k_r = L - k_h = {}",
                                complement.len()
                            )));
                        }
                        complement.clone()
                    }
                };
                let g = instance.slate_gradient(&random)?.wrt_embedding;
                let err: Vec<f64> = g.iter().zip(&exact).map(|(a, b)| a - b).collect();
                sum_sq += dot(&err, &err);
            }
            Ok((k_r, (sum_sq / trials as f64).sqrt()))
        })
        .collect()
}
