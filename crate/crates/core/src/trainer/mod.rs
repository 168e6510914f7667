//! The training loop: shuffled mini-batches, slate assembly, sampled BCE
//! gradients, Adam on the encoder and sparse SGD on the classifiers, with the
//! staged hard-negative refresh running on a background thread.

mod checkpoint;
mod config;
mod log;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anns::{
    expected_snapshot_epoch, plan_refresh, retrieve_hard_negatives, AnnsIndex, NegativeCache, RefreshJob,
    RefreshWorker, Stage,
};
use crate::classifier::{init_classifiers, ClassifierBank};
use crate::dataset::SparseDataset;
use crate::encoder::{init_encoder, EncoderParams};
use crate::eval::{evaluate, Predictor, PropensityModel};
use crate::linalg::{axpy, matmul, matmul_into, DenseMatrix};
use crate::loss::{full_bce_loss, slate_terms};
use crate::rng::{rng_for, stream};
use crate::sampler::{assemble_slate, HardSource, SamplerStrategy, SlotKind};
use crate::{Error, Result};

pub use checkpoint::TrainedModel;
pub use config::TrainConfig;
pub use log::{EpochRecord, EventKind, RefreshEvent, TrainLog, CSV_HEADER};
pub use optim::{lr_at, AdamState};

/// Largest label count the dense full-loss baseline accepts.
pub const FULL_LOSS_MAX_LABELS: usize = 50_000;

/// Everything the trainer mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderParams<f32>,
    pub bank: ClassifierBank<f32>,
    pub adam: AdamState<f32>,
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, n_features: usize, n_labels: usize) -> Result<Self> {
        let encoder = init_encoder(cfg.encoder_shape(n_features), cfg.init, cfg.seed)?;
        let bank = init_classifiers(n_labels, cfg.embed_dim, cfg.init, cfg.seed)?;
        Ok(Self {
            adam: AdamState::new(&encoder),
            encoder,
            bank,
            step: 0,
        })
    }

    pub fn to_model(&self, cfg: &TrainConfig) -> TrainedModel {
        TrainedModel {
            encoder: self.encoder.clone(),
            bank: self.bank.clone(),
            config_digest: cfg.digest(),
        }
    }
}

/// What each training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Sampled(SamplerStrategy),
    /// Every label on every slate.
    Full,
}

impl Objective {
    fn strategy(&self) -> Option<SamplerStrategy> {
        match self {
            Self::Sampled(s) => Some(*s),
            Self::Full => None,
        }
    }

    fn uses_cache(&self) -> bool {
        self.strategy().is_some_and(|s| s.uses_cache())
    }
}

/// Hard negatives available to the rows of one batch.
enum BatchHard<'a> {
    None,
    Cache(&'a NegativeCache),
    /// Retrieved this step, indexed by position in the batch.
    Fresh(NegativeCache),
}

struct RowOut {
    loss: f64,
    /// `None` means every label.
    labels: Option<Vec<u32>>,
    coeffs: Vec<f32>,
    emb_d: Vec<f32>,
    grad_emb: Vec<f32>,
    hard_slots: usize,
    snapshot: Option<u32>,
}

#[derive(Debug, Default)]
struct StepStats {
    loss_sum: f64,
    rows: usize,
    hard_slots: u64,
    index_queries: u64,
    snapshot: Option<u32>,
}

fn dropout_mask(seed: u64, epoch: usize, row: usize, d: usize, rate: f32) -> Option<Vec<f32>> {
    if rate <= 0.0 {
        return None;
    }
    let mut rng = rng_for(seed, &[stream::DROPOUT, epoch as u64, row as u64]);
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..d)
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

struct StepCtx<'a> {
    ds: &'a SparseDataset,
    cfg: &'a TrainConfig,
    objective: Objective,
    epoch: usize,
    total_steps: usize,
    warmup: usize,
}

fn row_forward(
    ctx: &StepCtx<'_>,
    state: &TrainState,
    row: usize,
    emb: &[f32],
    hard: Option<HardSource<'_>>,
) -> Result<RowOut> {
    let cfg = ctx.cfg;
    let n_labels = ctx.ds.n_labels();
    let positives = ctx.ds.positives(row);
    let mask = dropout_mask(cfg.seed, ctx.epoch, row, emb.len(), cfg.dropout);
    let emb_d: Vec<f32> = match &mask {
        Some(m) => emb.iter().zip(m).map(|(e, m)| e * m).collect(),
        None => emb.to_vec(),
    };
    let (labels, loss, coeffs, hard_slots, snapshot) = match ctx.objective {
        Objective::Sampled(strategy) => {
            let mut rng = rng_for(cfg.seed, &[stream::SLATE, ctx.epoch as u64, row as u64]);
            let slate = assemble_slate(strategy, &cfg.budget(), positives, n_labels, ctx.epoch, hard, &mut rng)?;
            let scores = state.bank.score_labels(&emb_d, &slate.label_ids)?.scores;
            let (loss, coeffs) = slate_terms(&scores, &slate.y_mask, &slate.weights, slate.n_positive_slots());
            let hard_slots = slate.count(SlotKind::Hard);
            (
                Some(slate.label_ids),
                loss,
                coeffs,
                hard_slots,
                slate.hard_snapshot_epoch,
            )
        }
        Objective::Full => unreachable!("full-loss rows go through full_forward"),
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("slate loss of row {row}")));
    }
    let mut grad_emb = vec![0.0f32; emb.len()];
    if let Some(ls) = &labels {
        for (&l, &c) in ls.iter().zip(&coeffs) {
            axpy(c, state.bank.row(l), &mut grad_emb);
        }
    }
    if let Some(m) = &mask {
        grad_emb.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
    }
    Ok(RowOut {
        loss: loss as f64,
        labels,
        coeffs,
        emb_d,
        grad_emb,
        hard_slots,
        snapshot,
    })
}

fn full_targets(n_labels: usize, positives: &[u32]) -> Vec<bool> {
    let mut y = vec![false; n_labels];
    for &p in positives {
        y[p as usize] = true;
    }
    y
}

/// Every-label forward pass and embedding gradients of a batch, computed as
/// dense products so that each classifier row is read once per batch.
fn full_forward(ctx: &StepCtx<'_>, state: &TrainState, batch: &[usize], embs: &[Vec<f32>]) -> Result<Vec<RowOut>> {
    let cfg = ctx.cfg;
    let n_labels = ctx.ds.n_labels();
    let d = state.bank.dim();
    let masks: Vec<Option<Vec<f32>>> = batch
        .iter()
        .map(|&i| dropout_mask(cfg.seed, ctx.epoch, i, d, cfg.dropout))
        .collect();
    let mut emb_d = DenseMatrix::zeros(batch.len(), d);
    for (b, (e, m)) in embs.iter().zip(&masks).enumerate() {
        match m {
            Some(m) => emb_d
                .row_mut(b)
                .iter_mut()
                .zip(e.iter().zip(m))
                .for_each(|(o, (e, m))| *o = e * m),
            None => emb_d.row_mut(b).copy_from_slice(e),
        }
    }
    let scores = state.bank.score_batch(&emb_d)?;
    let ones = vec![1.0f32; n_labels];
    let terms: Vec<(f32, Vec<f32>)> = batch
        .par_iter()
        .enumerate()
        .map(|(b, &i)| {
            let y = full_targets(n_labels, ctx.ds.positives(i));
            slate_terms(scores.row(b), &y, &ones, n_labels)
        })
        .collect();
    if let Some(b) = terms.iter().position(|(l, _)| !l.is_finite()) {
        return Err(Error::NonFinite(format!("slate loss of row {}", batch[b])));
    }
    let coeffs = DenseMatrix::from_vec(
        batch.len(),
        n_labels,
        terms.iter().flat_map(|(_, c)| c.iter().copied()).collect(),
    )?;
    let grads = matmul(&coeffs, false, state.bank.weights(), false)?;
    Ok(terms
        .into_iter()
        .zip(masks)
        .enumerate()
        .map(|(b, ((loss, coeffs), mask))| {
            let mut grad_emb = grads.row(b).to_vec();
            if let Some(m) = &mask {
                grad_emb.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
            }
            RowOut {
                loss: loss as f64,
                labels: None,
                coeffs,
                emb_d: emb_d.row(b).to_vec(),
                grad_emb,
                hard_slots: 0,
                snapshot: None,
            }
        })
        .collect())
}

/// `scale * C^T E` for the rows' every-label coefficients `C` and dropped-out
/// embeddings `E`: the dense classifier gradient.
fn full_classifier_grad(outs: &[RowOut], n_labels: usize, d: usize, scale: f32) -> Result<DenseMatrix<f32>> {
    let c = DenseMatrix::from_vec(
        outs.len(),
        n_labels,
        outs.iter().flat_map(|o| o.coeffs.iter().copied()).collect(),
    )?;
    let e = DenseMatrix::from_vec(
        outs.len(),
        d,
        outs.iter().flat_map(|o| o.emb_d.iter().copied()).collect(),
    )?;
    let mut grads = DenseMatrix::zeros(n_labels, d);
    matmul_into(scale, &c, true, &e, false, 0.0, &mut grads)?;
    Ok(grads)
}

/// Hard negatives for the rows of a batch under the current classifiers.
fn fresh_hard(ctx: &StepCtx<'_>, state: &TrainState, batch: &[usize], embs: &[Vec<f32>]) -> Result<NegativeCache> {
    let cfg = ctx.cfg;
    let strategy = ctx.objective.strategy().expect("fresh retrieval needs a strategy");
    let width = cfg.budget().cache_width(strategy);
    let index = AnnsIndex::build(cfg.up_to_date_index, state.bank.weights().clone(), &cfg.index_params())?;
    let d = state.encoder.out_dim();
    let m = DenseMatrix::from_vec(batch.len(), d, embs.concat())?;
    let positives: Vec<Vec<u32>> = batch.iter().map(|&i| ctx.ds.positives(i).to_vec()).collect();
    retrieve_hard_negatives(&index, &m, &positives, width, cfg.query_beam)
}

fn needs_fresh(ctx: &StepCtx<'_>) -> bool {
    ctx.objective == Objective::Sampled(SamplerStrategy::UpToDateHard) && ctx.epoch >= ctx.cfg.tau_s
}

fn train_step(
    ctx: &StepCtx<'_>,
    state: &mut TrainState,
    batch: &[usize],
    cache: Option<&NegativeCache>,
    saved: Option<&mut DenseMatrix<f32>>,
) -> Result<StepStats> {
    let ds = ctx.ds;
    let cfg = ctx.cfg;
    let embs: Vec<Vec<f32>> = batch
        .par_iter()
        .map(|&i| state.encoder.embed(ds.row(i)))
        .collect::<Result<_>>()?;
    if let Some(buf) = saved {
        for (&i, e) in batch.iter().zip(&embs) {
            buf.row_mut(i).copy_from_slice(e);
        }
    }
    let mut stats = StepStats::default();
    let hard = if needs_fresh(ctx) {
        stats.index_queries += batch.len() as u64;
        BatchHard::Fresh(fresh_hard(ctx, state, batch, &embs)?)
    } else {
        match cache {
            Some(c) => BatchHard::Cache(c),
            None => BatchHard::None,
        }
    };

    let outs: Vec<RowOut> = if ctx.objective == Objective::Full {
        full_forward(ctx, state, batch, &embs)?
    } else {
        let st: &TrainState = state;
        batch
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let src = match &hard {
                    BatchHard::None => None,
                    BatchHard::Cache(c) => Some(HardSource {
                        ids: c.row(i),
                        snapshot_epoch: Some(c.built_from_epoch()),
                    }),
                    BatchHard::Fresh(c) => Some(HardSource {
                        ids: c.row(b),
                        snapshot_epoch: None,
                    }),
                };
                row_forward(ctx, st, i, &embs[b], src)
            })
            .collect::<Result<_>>()?
    };

    let scale = 1.0 / batch.len() as f32;
    let mut enc_grad = state.encoder.zeros_like();
    for (&i, out) in batch.iter().zip(&outs) {
        state
            .encoder
            .accumulate_backward(ds.row(i), &out.grad_emb, &mut enc_grad)?;
        stats.loss_sum += out.loss;
        stats.hard_slots += out.hard_slots as u64;
        if out.snapshot.is_some() {
            stats.snapshot = out.snapshot;
        }
    }
    stats.rows = batch.len();
    for t in enc_grad.tensors_mut() {
        t.iter_mut().for_each(|g| *g *= scale);
    }

    let lr_e = lr_at(state.step, ctx.total_steps, ctx.warmup, cfg.lr_encoder as f64);
    let lr_c = lr_at(state.step, ctx.total_steps, ctx.warmup, cfg.lr_classifier as f64) as f32;
    match ctx.objective {
        Objective::Sampled(_) => {
            let mut grads: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
            for out in &outs {
                let labels = out.labels.as_ref().expect("sampled rows list their labels");
                for (&l, &c) in labels.iter().zip(&out.coeffs) {
                    let g = grads.entry(l).or_insert_with(|| vec![0.0; out.emb_d.len()]);
                    axpy(c * scale, &out.emb_d, g);
                }
            }
            state.bank.apply_updates(&grads, lr_c, cfg.weight_decay_classifier)?;
        }
        Objective::Full => {
            let grads = full_classifier_grad(&outs, state.bank.n_labels(), state.bank.dim(), scale)?;
            state
                .bank
                .apply_dense_update(&grads, lr_c, cfg.weight_decay_classifier)?;
        }
    }
    state.adam.step(&mut state.encoder, &enc_grad, lr_e)?;
    state.step += 1;
    Ok(stats)
}

/// Rows with at least one positive, in a seeded per-epoch order.
fn epoch_order(ds: &SparseDataset, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..ds.n_points()).filter(|&i| !ds.positives(i).is_empty()).collect();
    rows.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
    rows
}

fn trainable_rows(ds: &SparseDataset) -> usize {
    ds.all_positives().iter().filter(|p| !p.is_empty()).count()
}

/// Steps per epoch and total.
fn step_counts(ds: &SparseDataset, cfg: &TrainConfig) -> (usize, usize) {
    let per_epoch = trainable_rows(ds).div_ceil(cfg.batch_size);
    (per_epoch, per_epoch * cfg.epochs)
}

/// Fixed rows on which the exact full loss is tracked.
pub fn probe_rows(ds: &SparseDataset, cfg: &TrainConfig) -> Vec<usize> {
    let rows: Vec<usize> = (0..ds.n_points()).filter(|&i| !ds.positives(i).is_empty()).collect();
    let n = cfg.probe_rows.min(rows.len());
    let mut rng = rng_for(cfg.seed, &[stream::PROBE]);
    let mut picked: Vec<usize> = sample(&mut rng, rows.len(), n).into_iter().map(|k| rows[k]).collect();
    picked.sort_unstable();
    picked
}

/// Mean exact full loss per row over `rows`, without dropout.
pub fn probe_full_loss(state: &TrainState, ds: &SparseDataset, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = rows
        .par_iter()
        .map(|&i| {
            let emb = state.encoder.embed(ds.row(i))?;
            let scores: Vec<f64> = state.bank.score_all(&emb)?.into_iter().map(f64::from).collect();
            full_bce_loss(&scores, ds.positives(i))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / rows.len() as f64)
}

/// Held-out P@1 and P@5 (P@5 only when there are at least five labels).
pub fn heldout_precision(state: &TrainState, ds: &SparseDataset) -> Result<(f64, Option<f64>)> {
    let ks: Vec<usize> = if ds.n_labels() >= 5 { vec![1, 5] } else { vec![1] };
    let report = evaluate(
        ds,
        &state.encoder,
        &state.bank,
        &ks,
        &PropensityModel::uniform(ds.n_labels()),
        Predictor::Exact,
    )?;
    Ok((report.p_at[&1], report.p_at.get(&5).copied()))
}

/// A parameter snapshot waiting for its build stage.
struct Snapshot {
    epoch: u32,
    vectors: DenseMatrix<f32>,
    embeddings: DenseMatrix<f32>,
}

fn index_vectors(state: &TrainState, ds: &SparseDataset, strategy: SamplerStrategy) -> Result<DenseMatrix<f32>> {
    if strategy.uses_label_embeddings() {
        let features = ds
            .label_features()
            .ok_or_else(|| Error::Missing("label features".into()))?;
        state.encoder.embed_all(features)
    } else {
        Ok(state.bank.weights().clone())
    }
}

fn check_dims(ds: &SparseDataset, other: &SparseDataset) -> Result<()> {
    if ds.n_labels() != other.n_labels() || ds.n_features() != other.n_features() {
        return Err(Error::Dimension(format!(
            "held-out split is {}x{} (features x labels), training split {}x{}",
            other.n_features(),
            other.n_labels(),
            ds.n_features(),
            ds.n_labels()
        )));
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs from `state`. Held-out P@1/P@5 and the probe
/// loss are computed every `eval_every` epochs, at `tau_s` and at the end;
/// checkpoints are written at the same points when a directory is given.
pub fn run_training(
    state: &mut TrainState,
    ds: &SparseDataset,
    heldout: Option<&SparseDataset>,
    cfg: &TrainConfig,
    objective: Objective,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate(ds.n_labels(), ds.max_positives())?;
    if let Some(h) = heldout {
        check_dims(ds, h)?;
    }
    if let Some(s) = objective.strategy() {
        if s.uses_label_embeddings() && ds.label_features().is_none() {
            return Err(Error::Missing(format!("label features for strategy {s}")));
        }
    }
    let schedule = cfg.schedule()?;
    let (_, total_steps) = step_counts(ds, cfg);
    let ctx_base = |epoch| StepCtx {
        ds,
        cfg,
        objective,
        epoch,
        total_steps,
        warmup: cfg.warmup_steps.min(total_steps.saturating_sub(1)),
    };
    let probe = probe_rows(ds, cfg);
    let positives = Arc::new(ds.all_positives().to_vec());
    let mut worker = objective.uses_cache().then(RefreshWorker::spawn);
    let mut cache: Option<NegativeCache> = None;
    let mut pending: Option<Snapshot> = None;
    let mut log = TrainLog::default();
    let mut wall = 0.0f64;
    let d = state.encoder.out_dim();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let stage = match (objective.uses_cache(), objective.strategy()) {
            (true, Some(strategy)) => {
                let mut st = plan_refresh(epoch, &schedule);
                st.save_embeddings &= epoch + 2 < cfg.epochs;
                st.build_retrieve &= epoch + 1 < cfg.epochs;
                let _ = strategy;
                st
            }
            _ => Stage::IDLE,
        };
        let mut stall = 0.0;
        if stage.consume_new {
            let w = worker.as_mut().expect("cache strategies run a worker");
            let (outcome, blocked) = w.wait()?;
            let want = expected_snapshot_epoch(epoch);
            if outcome.consume_epoch != epoch || outcome.cache.built_from_epoch() != want {
                return Err(Error::invalid(format!(
                    "refresh for epoch {} stamped {} arrived at epoch {epoch} (expected stamp {want})",
                    outcome.consume_epoch,
                    outcome.cache.built_from_epoch()
                )));
            }
            stall = blocked.as_secs_f64();
            if stall > 1e-3 {
                ::log::info!("epoch {epoch}: blocked {stall:.3}s waiting for the refresh worker");
                log.events.push(RefreshEvent {
                    epoch,
                    kind: EventKind::Stall,
                    snapshot_epoch: want,
                    consume_epoch: epoch,
                    seconds: stall,
                });
            }
            log.events.push(RefreshEvent {
                epoch,
                kind: EventKind::ConsumeNew,
                snapshot_epoch: want,
                consume_epoch: epoch,
                seconds: outcome.build_seconds + outcome.retrieve_seconds,
            });
            cache = Some(outcome.cache);
        }
        if stage.build_retrieve {
            let strategy = objective.strategy().expect("cache strategies have a strategy");
            let snap = match pending.take() {
                Some(s) => s,
                None => {
                    // The save stage would precede epoch 0: snapshot the current state.
                    let all: Vec<usize> = (0..ds.n_points()).collect();
                    Snapshot {
                        epoch: epoch.saturating_sub(1) as u32,
                        vectors: index_vectors(state, ds, strategy)?,
                        embeddings: state.encoder.embed_rows(ds, &all)?.embeddings,
                    }
                }
            };
            log.events.push(RefreshEvent {
                epoch,
                kind: EventKind::BuildRetrieve,
                snapshot_epoch: snap.epoch,
                consume_epoch: epoch + 1,
                seconds: 0.0,
            });
            worker
                .as_mut()
                .expect("cache strategies run a worker")
                .submit(RefreshJob {
                    consume_epoch: epoch + 1,
                    snapshot_epoch: snap.epoch,
                    vectors: snap.vectors,
                    embeddings: snap.embeddings,
                    positives: positives.clone(),
                    k_h: cfg.budget().cache_width(strategy),
                    kind: cfg.index_kind,
                    params: cfg.index_params(),
                })?;
        }

        let ctx = ctx_base(epoch);
        let mut saved = stage.save_embeddings.then(|| DenseMatrix::zeros(ds.n_points(), d));
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        let mut snapshot = None;
        for batch in epoch_order(ds, cfg.seed, epoch).chunks(cfg.batch_size) {
            let st = train_step(&ctx, state, batch, cache.as_ref(), saved.as_mut())?;
            loss_sum += st.loss_sum;
            rows += st.rows;
            log.hard_slots += st.hard_slots;
            log.trainer_index_queries += st.index_queries;
            snapshot = snapshot.or(st.snapshot);
        }
        if let Some(embeddings) = saved {
            let strategy = objective.strategy().expect("cache strategies have a strategy");
            pending = Some(Snapshot {
                epoch: epoch as u32,
                vectors: index_vectors(state, ds, strategy)?,
                embeddings,
            });
            log.events.push(RefreshEvent {
                epoch,
                kind: EventKind::SaveEmbeddings,
                snapshot_epoch: epoch as u32,
                consume_epoch: epoch + 2,
                seconds: 0.0,
            });
        }
        let epoch_seconds = started.elapsed().as_secs_f64();
        wall += epoch_seconds;

        let last = epoch + 1 == cfg.epochs;
        let eval_now = last || (epoch + 1) % cfg.eval_every == 0 || epoch == cfg.tau_s;
        let (probe_loss, p1, p5) = if eval_now {
            let probe_loss = probe_full_loss(state, ds, &probe)?;
            let (p1, p5) = match heldout {
                Some(h) => {
                    let (p1, p5) = heldout_precision(state, h)?;
                    (Some(p1), p5)
                }
                None => (None, None),
            };
            if let Some(dir) = checkpoint_dir {
                state.to_model(cfg).save(dir.join("model.xast"))?;
            }
            (Some(probe_loss), p1, p5)
        } else {
            (None, None, None)
        };
        let mean_loss = if rows == 0 { 0.0 } else { loss_sum / rows as f64 };
        ::log::debug!("epoch {epoch}: loss {mean_loss:.4} p@1 {p1:?} stage {}", stage.label());
        log.records.push(EpochRecord {
            epoch,
            wall_seconds: wall,
            epoch_seconds,
            mean_slate_loss: mean_loss,
            probe_full_loss: probe_loss,
            p_at_1: p1,
            p_at_5: p5,
            snapshot_epoch: snapshot,
            stage: stage.label(),
            stall_seconds: stall,
        });
    }
    Ok(log)
}

/// Trains from a fresh initialization with the configured strategy.
pub fn train(
    ds: &SparseDataset,
    heldout: Option<&SparseDataset>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, TrainLog)> {
    let mut state = TrainState::init(cfg, ds.n_features(), ds.n_labels())?;
    let log = run_training(
        &mut state,
        ds,
        heldout,
        cfg,
        Objective::Sampled(cfg.strategy),
        checkpoint_dir,
    )?;
    Ok((state.to_model(cfg), log))
}

/// The same loop with every label on every slate and exact targets.
pub fn train_full_loss_baseline(
    ds: &SparseDataset,
    heldout: Option<&SparseDataset>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, TrainLog)> {
    if ds.n_labels() > FULL_LOSS_MAX_LABELS {
        return Err(Error::invalid(format!(
            "full-loss baseline is limited to {FULL_LOSS_MAX_LABELS} labels, dataset has {}",
            ds.n_labels()
        )));
    }
    let mut state = TrainState::init(cfg, ds.n_features(), ds.n_labels())?;
    let log = run_training(&mut state, ds, heldout, cfg, Objective::Full, checkpoint_dir)?;
    Ok((state.to_model(cfg), log))
}

/// Median milliseconds per phase of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationBreakdown {
    pub data_prep: f64,
    pub embed_fwd: f64,
    pub clf_fwd: f64,
    pub loss: f64,
    pub backward: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times each phase of `iterations` single-threaded training steps, as if at
/// epoch `tau_s` (so hard strategies draw hard negatives). Hard strategies
/// other than up-to-date retrieval read `cache`, or an exact retrieval over
/// the current classifiers when none is given. The full objective is not
/// subject to the baseline's label cap here.
pub fn measure_iteration_breakdown(
    state: &mut TrainState,
    ds: &SparseDataset,
    cfg: &TrainConfig,
    objective: Objective,
    iterations: usize,
    cache: Option<&NegativeCache>,
) -> Result<IterationBreakdown> {
    if iterations < 100 {
        return Err(Error::invalid("iteration breakdown needs at least 100 iterations"));
    }
    let epoch = cfg.tau_s;
    let ctx = StepCtx {
        ds,
        cfg,
        objective,
        epoch,
        total_steps: usize::MAX,
        warmup: 0,
    };
    let order = epoch_order(ds, cfg.seed, epoch);
    if order.is_empty() {
        return Err(Error::invalid("no rows with positives"));
    }
    let batches: Vec<Vec<usize>> = (0..iterations)
        .map(|it| {
            (0..cfg.batch_size)
                .map(|j| order[(it * cfg.batch_size + j) % order.len()])
                .collect()
        })
        .collect();
    let built;
    let cache = match (objective.strategy(), cache) {
        (Some(s), None) if s.uses_cache() => {
            let mut rows: Vec<usize> = batches.concat();
            rows.sort_unstable();
            rows.dedup();
            let index = AnnsIndex::build_exact(state.bank.weights().clone())?;
            let emb = state
                .encoder
                .embed_rows(ds, &(0..ds.n_points()).collect::<Vec<_>>())?
                .embeddings;
            let mut per_row = vec![Vec::new(); ds.n_points()];
            let width = cfg.budget().cache_width(s);
            let sub = DenseMatrix::from_vec(
                rows.len(),
                emb.cols(),
                rows.iter().flat_map(|&i| emb.row(i).to_vec()).collect(),
            )?;
            let pos: Vec<Vec<u32>> = rows.iter().map(|&i| ds.positives(i).to_vec()).collect();
            let got = retrieve_hard_negatives(&index, &sub, &pos, width, cfg.query_beam)?;
            for (k, &i) in rows.iter().enumerate() {
                per_row[i] = got.row(k).to_vec();
            }
            // Rows never visited still need a valid entry.
            for (i, r) in per_row.iter_mut().enumerate() {
                if r.is_empty() {
                    *r = (0..width as u32)
                        .map(|l| (l + i as u32) % ds.n_labels() as u32)
                        .collect();
                }
            }
            built = NegativeCache::from_rows(width, &per_row, 0, ds.n_labels())?;
            Some(&built)
        }
        (_, c) => c,
    };

    let mut times: [Vec<f64>; 5] = Default::default();
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;
    for batch in &batches {
        // Data preparation: slate assembly (and up-to-date retrieval).
        let t = Instant::now();
        let fresh = if needs_fresh(&ctx) {
            let embs: Vec<Vec<f32>> = batch
                .iter()
                .map(|&i| state.encoder.embed(ds.row(i)))
                .collect::<Result<_>>()?;
            Some(fresh_hard(&ctx, state, batch, &embs)?)
        } else {
            None
        };
        let slates: Vec<Option<crate::sampler::LabelSlate>> = batch
            .iter()
            .enumerate()
            .map(|(b, &i)| match objective {
                Objective::Sampled(strategy) => {
                    let src = match (&fresh, cache) {
                        (Some(f), _) => Some(HardSource {
                            ids: f.row(b),
                            snapshot_epoch: None,
                        }),
                        (None, Some(c)) => Some(HardSource {
                            ids: c.row(i),
                            snapshot_epoch: Some(c.built_from_epoch()),
                        }),
                        _ => None,
                    };
                    let mut rng = rng_for(cfg.seed, &[stream::SLATE, epoch as u64, i as u64]);
                    assemble_slate(
                        strategy,
                        &cfg.budget(),
                        ds.positives(i),
                        ds.n_labels(),
                        epoch,
                        src,
                        &mut rng,
                    )
                    .map(Some)
                }
                Objective::Full => Ok(None),
            })
            .collect::<Result<_>>()?;
        times[0].push(ms(t));

        let t = Instant::now();
        let embs: Vec<Vec<f32>> = batch
            .iter()
            .map(|&i| {
                let e = state.encoder.embed(ds.row(i))?;
                Ok(match dropout_mask(cfg.seed, epoch, i, e.len(), cfg.dropout) {
                    Some(m) => e.iter().zip(&m).map(|(a, b)| a * b).collect(),
                    None => e,
                })
            })
            .collect::<Result<_>>()?;
        times[1].push(ms(t));

        let t = Instant::now();
        let full = objective == Objective::Full;
        let scores: Vec<Vec<f32>> = if full {
            let e = DenseMatrix::from_vec(embs.len(), state.bank.dim(), embs.concat())?;
            let s = state.bank.score_batch(&e)?;
            (0..embs.len()).map(|b| s.row(b).to_vec()).collect()
        } else {
            slates
                .iter()
                .zip(&embs)
                .map(|(s, e)| {
                    let s = s.as_ref().expect("sampled rows carry a slate");
                    state.bank.score_labels(e, &s.label_ids).map(|x| x.scores)
                })
                .collect::<Result<_>>()?
        };
        times[2].push(ms(t));

        let t = Instant::now();
        let coeffs: Vec<Vec<f32>> = slates
            .iter()
            .zip(&scores)
            .zip(batch)
            .map(|((s, sc), &i)| match s {
                Some(s) => slate_terms(sc, &s.y_mask, &s.weights, s.n_positive_slots()).1,
                None => {
                    slate_terms(
                        sc,
                        &full_targets(sc.len(), ds.positives(i)),
                        &vec![1.0; sc.len()],
                        sc.len(),
                    )
                    .1
                }
            })
            .collect();
        times[3].push(ms(t));

        let t = Instant::now();
        let scale = 1.0 / batch.len() as f32;
        let mut enc_grad = state.encoder.zeros_like();
        let g_embs: Vec<Vec<f32>> = if full {
            let c = DenseMatrix::from_vec(batch.len(), ds.n_labels(), coeffs.concat())?;
            let g = matmul(&c, false, state.bank.weights(), false)?;
            let e = DenseMatrix::from_vec(batch.len(), state.bank.dim(), embs.concat())?;
            let mut dense = DenseMatrix::zeros(state.bank.n_labels(), state.bank.dim());
            matmul_into(scale, &c, true, &e, false, 0.0, &mut dense)?;
            state
                .bank
                .apply_dense_update(&dense, cfg.lr_classifier, cfg.weight_decay_classifier)?;
            (0..batch.len()).map(|b| g.row(b).to_vec()).collect()
        } else {
            let mut sparse: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
            let mut out = Vec::with_capacity(batch.len());
            for ((s, c), e) in slates.iter().zip(&coeffs).zip(&embs) {
                let s = s.as_ref().expect("sampled rows carry a slate");
                let mut g_emb = vec![0.0f32; e.len()];
                for (&l, &cl) in s.label_ids.iter().zip(c) {
                    axpy(cl, state.bank.row(l), &mut g_emb);
                    axpy(cl * scale, e, sparse.entry(l).or_insert_with(|| vec![0.0; e.len()]));
                }
                out.push(g_emb);
            }
            state
                .bank
                .apply_updates(&sparse, cfg.lr_classifier, cfg.weight_decay_classifier)?;
            out
        };
        for (g, &i) in g_embs.iter().zip(batch) {
            state.encoder.accumulate_backward(ds.row(i), g, &mut enc_grad)?;
        }
        for t in enc_grad.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
        state.adam.step(&mut state.encoder, &enc_grad, cfg.lr_encoder as f64)?;
        times[4].push(ms(t));
    }
    let [a, b, c, d, e] = times;
    Ok(IterationBreakdown {
        data_prep: median(a),
        embed_fwd: median(b),
        clf_fwd: median(c),
        loss: median(d),
        backward: median(e),
    })
}

#[cfg(test)]
mod tests;
