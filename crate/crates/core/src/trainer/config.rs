use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anns::{IndexKind, IndexParams, RefreshSchedule};
use crate::encoder::{EncoderShape, InitScheme};
use crate::sampler::{SamplerStrategy, SlateBudget};
use crate::{Error, Result};

/// Every knob of a training run. Serialized flat, so it doubles as the
/// on-disk run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f32,
    pub lr_classifier: f32,
    pub warmup_steps: usize,
    /// Dropout rate on embeddings during training.
    pub dropout: f32,
    pub weight_decay_classifier: f32,
    pub k_r: usize,
    pub k_h: usize,
    pub k_p: usize,
    pub tau_s: usize,
    pub tau_r: usize,
    /// Epochs over which the curriculum strategy ramps up its hard share.
    pub curriculum_ramp: usize,
    pub strategy: SamplerStrategy,
    pub seed: u64,
    pub eval_every: usize,
    pub embed_dim: usize,
    /// Width of the tanh hidden layer; 0 means a single linear layer.
    pub hidden_dim: usize,
    pub init: InitScheme,
    /// Index used by the staged refresh. `auto` scans when a graph search
    /// would examine as many vectors as the index holds.
    pub index_kind: IndexKind,
    /// Index rebuilt every iteration by the up-to-date strategy.
    pub up_to_date_index: IndexKind,
    pub max_degree: usize,
    pub build_beam: usize,
    pub query_beam: usize,
    pub probe_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr_encoder: 0.01,
            lr_classifier: 3.0,
            warmup_steps: 50,
            dropout: 0.1,
            weight_decay_classifier: 1e-4,
            k_r: 48,
            k_h: 24,
            k_p: 3,
            tau_s: 2,
            tau_r: 5,
            curriculum_ramp: 10,
            strategy: SamplerStrategy::Mixture,
            seed: 0,
            eval_every: 1,
            embed_dim: 64,
            hidden_dim: 0,
            init: InitScheme::UniformScaled,
            index_kind: IndexKind::Auto,
            up_to_date_index: IndexKind::Exact,
            max_degree: 32,
            build_beam: 128,
            query_beam: 256,
            probe_rows: 200,
        }
    }
}

impl TrainConfig {
    pub fn budget(&self) -> SlateBudget {
        SlateBudget {
            k_p: self.k_p,
            k_h: self.k_h,
            k_r: self.k_r,
            tau_s: self.tau_s,
            curriculum_ramp: self.curriculum_ramp,
        }
    }

    pub fn schedule(&self) -> Result<RefreshSchedule> {
        RefreshSchedule::new(self.tau_s, self.tau_r)
    }

    pub fn index_params(&self) -> IndexParams {
        IndexParams {
            max_degree: self.max_degree,
            build_beam: self.build_beam,
            query_beam: self.query_beam,
            seed: self.seed,
        }
    }

    pub fn encoder_shape(&self, input_dim: usize) -> EncoderShape {
        EncoderShape {
            input_dim,
            proj_dim: if self.hidden_dim > 0 {
                self.hidden_dim
            } else {
                self.embed_dim
            },
            out_dim: self.embed_dim,
            hidden: self.hidden_dim > 0,
        }
    }

    /// Checks the configuration on its own and against dataset dimensions.
    pub fn validate(&self, n_labels: usize, max_positives: usize) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("k_r", self.k_r),
            ("k_p", self.k_p),
            ("tau_s", self.tau_s),
            ("tau_r", self.tau_r),
            ("eval_every", self.eval_every),
            ("embed_dim", self.embed_dim),
            ("curriculum_ramp", self.curriculum_ramp),
            ("query_beam", self.query_beam),
            ("build_beam", self.build_beam),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.max_degree < 2 {
            return Err(Error::invalid("max_degree must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_classifier", self.lr_classifier),
            ("weight_decay_classifier", self.weight_decay_classifier),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        let width = self.budget().cache_width(self.strategy);
        if self.strategy.uses_hard() && width + max_positives > n_labels {
            return Err(Error::invalid(format!(
                "{width} hard negatives plus {max_positives} positives exceed L = {n_labels}"
            )));
        }
        if self.k_h >= n_labels {
            return Err(Error::invalid(format!("k_h {} must be below L {n_labels}", self.k_h)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    /// Names of every configuration key.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()).expect("config serializes") {
            serde_json::Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }
}
