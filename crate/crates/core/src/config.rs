use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Every hyperparameter of a training run. Defaults are the published recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub lstm_layers: usize,
    /// Concatenated width of both directions.
    pub lstm_total: usize,
    pub heads: usize,
    pub fc_layers: usize,
    pub fc_dim: usize,
    pub recon_levels: usize,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Sentence categorization loss on/off (`-SCM` when off).
    pub scm: bool,
    /// Reconstruction loss on/off (`-ITM` when off).
    pub itm: bool,
    /// Whether source sentences enter the reconstruction loss (`-ITMs` when off).
    pub itm_source: bool,
    pub freeze_embeddings: bool,
    /// Learning rate of the embedding table; `None` uses `lr`.
    pub embedding_lr: Option<f64>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub lowercase: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            lstm_layers: 3,
            lstm_total: 400,
            heads: 8,
            fc_layers: 4,
            fc_dim: 512,
            recon_levels: 3,
            lambda: 0.4,
            beta: 0.8,
            lr: 0.008,
            batch_size: 64,
            epochs: 20,
            dropout: 0.45,
            seed: 0,
            scm: true,
            itm: true,
            itm_source: true,
            freeze_embeddings: false,
            embedding_lr: None,
            clip_norm: Some(5.0),
            lowercase: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if matches!(self.embedding_lr, Some(r) if !(r > 0.0 && r.is_finite())) {
            return fail("embedding learning rate must be positive".into());
        }
        if self.recon_levels > self.fc_layers {
            return fail(format!(
                "{} reconstruction levels exceed {} FC layers",
                self.recon_levels, self.fc_layers
            ));
        }
        if self.fc_layers == 0 || self.fc_dim == 0 {
            return fail("at least one FC layer of nonzero width is required".into());
        }
        if self.lstm_layers > 0 && (self.lstm_total < 2 || self.lstm_total % 2 != 0) {
            return fail(format!("BiLSTM width {} must be even and positive", self.lstm_total));
        }
        if self.embedding_dim == 0 {
            return fail("embedding dimension must be positive".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch size {} must be at least 2", self.batch_size));
        }
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} = {v} must be a finite non-negative weight"));
            }
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return fail("clip norm must be positive".into());
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.embedding_dim,
            num_lstm_layers: self.lstm_layers,
            lstm_hidden: self.lstm_total / 2,
            num_heads: self.heads,
            dropout: self.dropout,
        }
    }

    /// λ as applied, zero when the categorization module is switched off.
    pub fn effective_lambda(&self) -> f64 {
        if self.scm {
            self.lambda
        } else {
            0.0
        }
    }

    /// β as applied, zero when the reconstruction module is switched off.
    pub fn effective_beta(&self) -> f64 {
        if self.itm && self.recon_levels > 0 {
            self.beta
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.encoder().lstm_hidden, 200);
        assert_eq!(c.encoder().output_dim(), 400);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ModelConfig { dropout: 1.0, ..Default::default() },
            ModelConfig { lr: 0.0, ..Default::default() },
            ModelConfig { recon_levels: 5, ..Default::default() },
            ModelConfig { lambda: -1.0, ..Default::default() },
            ModelConfig { lstm_total: 401, ..Default::default() },
            ModelConfig { batch_size: 1, ..Default::default() },
            ModelConfig { embedding_lr: Some(0.0), ..Default::default() },
            ModelConfig { embedding_lr: Some(f64::NAN), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn switches_zero_weights() {
        let c = ModelConfig { scm: false, itm: false, ..Default::default() };
        assert_eq!(c.effective_lambda(), 0.0);
        assert_eq!(c.effective_beta(), 0.0);
        let c = ModelConfig { recon_levels: 0, ..Default::default() };
        assert_eq!(c.effective_beta(), 0.0);
    }
}
