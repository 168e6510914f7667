//! Staged refresh of the hard-negative cache.
//!
//! A cache consumed from epoch `c` on is prepared over the two epochs before
//! it: embeddings are saved during epoch `c - 2` and the classifier vectors
//! are snapshotted at its end; during epoch `c - 1` a background thread
//! builds the index over that snapshot and retrieves hard negatives for
//! every saved embedding; at the start of epoch `c` the trainer swaps the
//! new cache in, blocking only if the worker has not finished.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::{retrieve_hard_negatives, AnnsIndex, IndexKind, IndexParams, NegativeCache};
use crate::linalg::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshSchedule {
    /// First epoch that uses hard negatives.
    pub tau_s: usize,
    /// Epochs between consecutive cache swaps.
    pub tau_r: usize,
}

impl RefreshSchedule {
    pub fn new(tau_s: usize, tau_r: usize) -> Result<Self> {
        if tau_s < 1 || tau_r < 1 {
            return Err(Error::invalid("tau_s and tau_r must be at least 1"));
        }
        Ok(Self { tau_s, tau_r })
    }

    pub fn is_consume_epoch(&self, epoch: usize) -> bool {
        epoch >= self.tau_s && (epoch - self.tau_s).is_multiple_of(self.tau_r)
    }
}

/// What the refresh pipeline does during one epoch. With `tau_r < 3`
/// several stages (for different caches) overlap in the same epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stage {
    pub save_embeddings: bool,
    pub build_retrieve: bool,
    pub consume_new: bool,
}

impl Stage {
    pub const IDLE: Stage = Stage {
        save_embeddings: false,
        build_retrieve: false,
        consume_new: false,
    };

    pub fn is_idle(&self) -> bool {
        *self == Self::IDLE
    }

    /// `idle`, or the active stages joined with `+`.
    pub fn label(&self) -> String {
        if self.is_idle() {
            return "idle".into();
        }
        let parts: Vec<&str> = [
            (self.save_embeddings, "save_embeddings"),
            (self.build_retrieve, "build_retrieve"),
            (self.consume_new, "consume_new"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        parts.join("+")
    }
}

/// Stage of `epoch`. When the save epoch of a cache would precede epoch 0
/// (only for `tau_s = 1`), the save folds into the build stage, which then
/// snapshots the initial state.
pub fn plan_refresh(epoch: usize, schedule: &RefreshSchedule) -> Stage {
    Stage {
        save_embeddings: schedule.is_consume_epoch(epoch + 2),
        build_retrieve: schedule.is_consume_epoch(epoch + 1),
        consume_new: schedule.is_consume_epoch(epoch),
    }
}

/// Snapshot epoch stamped on the cache consumed from `consume_epoch`.
pub fn expected_snapshot_epoch(consume_epoch: usize) -> u32 {
    consume_epoch.saturating_sub(2) as u32
}

/// Everything the background worker needs, owned so the trainer can keep
/// mutating its parameters.
#[derive(Debug, Clone)]
pub struct RefreshJob {
    pub consume_epoch: usize,
    pub snapshot_epoch: u32,
    pub vectors: DenseMatrix<f32>,
    pub embeddings: DenseMatrix<f32>,
    pub positives: Arc<Vec<Vec<u32>>>,
    pub k_h: usize,
    pub kind: IndexKind,
    pub params: IndexParams,
}

#[derive(Debug, Clone)]
pub struct RefreshOutcome {
    pub consume_epoch: usize,
    pub cache: NegativeCache,
    pub build_seconds: f64,
    pub retrieve_seconds: f64,
}

impl RefreshJob {
    pub fn run(self) -> Result<RefreshOutcome> {
        let start = Instant::now();
        let index = AnnsIndex::build(self.kind, self.vectors, &self.params)?.with_snapshot_epoch(self.snapshot_epoch);
        let build_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let cache = retrieve_hard_negatives(
            &index,
            &self.embeddings,
            &self.positives,
            self.k_h,
            self.params.query_beam,
        )?;
        Ok(RefreshOutcome {
            consume_epoch: self.consume_epoch,
            cache,
            build_seconds,
            retrieve_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// A background thread running refresh jobs in submission order.
pub struct RefreshWorker {
    jobs: Option<Sender<RefreshJob>>,
    results: Receiver<Result<RefreshOutcome>>,
    handle: Option<JoinHandle<()>>,
    pending: usize,
}

impl RefreshWorker {
    pub fn spawn() -> Self {
        let (job_tx, job_rx) = unbounded::<RefreshJob>();
        let (res_tx, res_rx) = unbounded();
        let handle = std::thread::Builder::new()
            .name("anns-refresh".into())
            .spawn(move || {
                for job in job_rx {
                    if res_tx.send(job.run()).is_err() {
                        break;
                    }
                }
            })
            .expect("spawning the refresh thread");
        Self {
            jobs: Some(job_tx),
            results: res_rx,
            handle: Some(handle),
            pending: 0,
        }
    }

    pub fn submit(&mut self, job: RefreshJob) -> Result<()> {
        self.jobs
            .as_ref()
            .and_then(|tx| tx.send(job).ok())
            .ok_or_else(|| Error::invalid("refresh worker has shut down"))?;
        self.pending += 1;
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Blocks for the oldest outstanding job. Returns its outcome and how
    /// long the caller was blocked.
    pub fn wait(&mut self) -> Result<(RefreshOutcome, Duration)> {
        if self.pending == 0 {
            return Err(Error::Missing("no refresh job in flight".into()));
        }
        let start = Instant::now();
        let outcome = self
            .results
            .recv()
            .map_err(|_| Error::invalid("refresh worker exited unexpectedly"))??;
        self.pending -= 1;
        Ok((outcome, start.elapsed()))
    }
}

impl Drop for RefreshWorker {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_stages() {
        let s = RefreshSchedule::new(5, 5).unwrap();
        let stages: Vec<String> = (0..11).map(|e| plan_refresh(e, &s).label()).collect();
        assert_eq!(
            stages,
            [
                "idle",
                "idle",
                "idle",
                "save_embeddings",
                "build_retrieve",
                "consume_new",
                "idle",
                "idle",
                "save_embeddings",
                "build_retrieve",
                "consume_new"
            ]
        );
    }

    #[test]
    fn consume_epochs_match_closed_form() {
        for tau_s in 1..8 {
            for tau_r in 1..8 {
                let s = RefreshSchedule::new(tau_s, tau_r).unwrap();
                let got: Vec<usize> = (0..100).filter(|&e| plan_refresh(e, &s).consume_new).collect();
                let want: Vec<usize> = (0..).map(|j| tau_s + j * tau_r).take_while(|&e| e < 100).collect();
                assert_eq!(got, want, "tau_s={tau_s} tau_r={tau_r}");
                for &c in &want {
                    assert!(plan_refresh(c - 1, &s).build_retrieve);
                    if c >= 2 {
                        assert!(plan_refresh(c - 2, &s).save_embeddings);
                    }
                }
            }
        }
        assert!(RefreshSchedule::new(0, 1).is_err());
        assert!(RefreshSchedule::new(1, 0).is_err());
    }

    #[test]
    fn overlapping_stages_with_short_interval() {
        let s = RefreshSchedule::new(3, 1).unwrap();
        let st = plan_refresh(4, &s);
        assert!(st.save_embeddings && st.build_retrieve && st.consume_new);
        assert_eq!(st.label(), "save_embeddings+build_retrieve+consume_new");
    }

    #[test]
    fn worker_runs_jobs_in_order() {
        let vectors = DenseMatrix::from_fn(20, 3, |r, c| ((r * 3 + c) % 7) as f32 - 3.0);
        let embeddings = DenseMatrix::from_fn(4, 3, |r, c| (r + c) as f32 * 0.1);
        let positives = Arc::new(vec![vec![0], vec![1], vec![], vec![2, 3]]);
        let mut worker = RefreshWorker::spawn();
        for (i, epoch) in [(3usize, 1u32), (5, 3)] {
            worker
                .submit(RefreshJob {
                    consume_epoch: i,
                    snapshot_epoch: epoch,
                    vectors: vectors.clone(),
                    embeddings: embeddings.clone(),
                    positives: positives.clone(),
                    k_h: 4,
                    kind: IndexKind::Exact,
                    params: IndexParams::default(),
                })
                .unwrap();
        }
        let (a, _) = worker.wait().unwrap();
        let (b, _) = worker.wait().unwrap();
        assert_eq!((a.consume_epoch, a.cache.built_from_epoch()), (3, 1));
        assert_eq!((b.consume_epoch, b.cache.built_from_epoch()), (5, 3));
        assert!(worker.wait().is_err());
    }
}
