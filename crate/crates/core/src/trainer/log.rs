use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CSV_HEADER: &str = "epoch,wall_seconds,mean_slate_loss,probe_full_loss,p_at_1,p_at_5,snapshot_epoch";

/// One row per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cumulative training time at the end of this epoch, evaluation excluded.
    pub wall_seconds: f64,
    pub epoch_seconds: f64,
    pub mean_slate_loss: f64,
    pub probe_full_loss: Option<f64>,
    pub p_at_1: Option<f64>,
    pub p_at_5: Option<f64>,
    /// Snapshot epoch of the cache the epoch's hard negatives came from.
    pub snapshot_epoch: Option<u32>,
    pub stage: String,
    /// Time the trainer spent blocked waiting for the refresh worker.
    pub stall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SaveEmbeddings,
    BuildRetrieve,
    ConsumeNew,
    Stall,
}

/// A refresh-pipeline event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub epoch: usize,
    pub kind: EventKind,
    pub snapshot_epoch: u32,
    /// Epoch from which the cache concerned is consumed.
    pub consume_epoch: usize,
    /// Build plus retrieval time for consume events, blocked time for
    /// stalls, zero otherwise.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub events: Vec<RefreshEvent>,
    /// Index queries issued by the trainer thread (up-to-date retrieval).
    pub trainer_index_queries: u64,
    /// Hard-negative slots consumed.
    pub hard_slots: u64,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.wall_seconds,
                r.mean_slate_loss,
                opt(r.probe_full_loss),
                opt(r.p_at_1),
                opt(r.p_at_5),
                opt(r.snapshot_epoch)
            )
            .expect("writing to a string");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }

    pub fn write_files(&self, csv: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<()> {
        let (csv, json) = (csv.as_ref(), json.as_ref());
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(json, self.to_json() + "\n").map_err(|e| Error::io(json, e))
    }

    pub fn final_p_at_1(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.p_at_1)
    }

    /// Mean training seconds per epoch.
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.epoch_seconds).sum::<f64>() / self.records.len() as f64
    }
}
