//! Multi-level reconstruction between fine-grained word features and the
//! coarse sentence vector.
//!
//! Level `k` sums the FC features `r^k` over tokens into `s_k` and decodes it
//! with `W2_k · ReLU(W1_k · s_k)`; the squared distance to the sentence vector
//! `s` is the reconstruction error. One decoder bank serves every domain.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::init;
use crate::model::Model;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelDecoder {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionDecoder {
    pub levels: Vec<LevelDecoder>,
}

impl ReconstructionDecoder {
    /// `levels` decoders from `fc_dim`-wide level sums to `sentence_dim`,
    /// with a hidden width of `fc_dim`.
    pub fn new(
        store: &mut ParamStore,
        levels: usize,
        fc_dim: usize,
        sentence_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = fc_dim;
        let levels = (0..levels)
            .map(|k| LevelDecoder {
                w1: store.add(format!("decoder{}.w1", k + 1), init::linear(fc_dim, hidden, rng)),
                w2: store.add(format!("decoder{}.w2", k + 1), init::linear(hidden, sentence_dim, rng)),
            })
            .collect();
        ReconstructionDecoder { levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.levels.iter().flat_map(|l| [l.w1, l.w2])
    }

    /// `d(s, s_k)` on the tape for the 1-based `level`.
    pub fn distance(&self, tape: &mut Tape, s: Var, s_k: Var, level: usize) -> Var {
        let dec = &self.levels[level - 1];
        let w1 = tape.param(dec.w1);
        let w2 = tape.param(dec.w2);
        let hidden = tape.matmul(s_k, w1);
        let hidden = tape.relu(hidden);
        let decoded = tape.matmul(hidden, w2);
        let diff = tape.sub(s, decoded);
        tape.squared_norm(diff)
    }

    /// Summed distance over levels `1..=R`; level `k` reads FC level `k`.
    pub fn total(&self, tape: &mut Tape, s: Var, fc_levels: &[Var]) -> Option<Var> {
        let mut total = None;
        for (k, &r) in fc_levels.iter().take(self.levels.len()).enumerate() {
            let s_k = tape.sum_rows(r);
            let d = self.distance(tape, s, s_k, k + 1);
            total = Some(match total {
                Some(acc) => tape.add(acc, d),
                None => d,
            });
        }
        total
    }

    /// Value-level `d(s, s_k)`.
    pub fn reconstruct_distance(
        &self,
        store: &ParamStore,
        s: &Array1<f64>,
        s_k: &Array1<f64>,
        level: usize,
    ) -> Result<f64> {
        if level == 0 || level > self.levels.len() {
            return Err(Error::Validation(format!(
                "reconstruction level {level} outside 1..={}",
                self.levels.len()
            )));
        }
        let dec = &self.levels[level - 1];
        let hidden = s_k.dot(store.get(dec.w1)).mapv(|x| x.max(0.0));
        let decoded = hidden.dot(store.get(dec.w2));
        Ok((s - &decoded).iter().map(|x| x * x).sum())
    }
}

/// `s_k = Σ_i r^k_i`, the unnormalized token sum.
pub fn aggregate_level(r_k: &Array2<f64>) -> Array1<f64> {
    r_k.sum_axis(Axis(0))
}

/// Mean summed-level distance over the source batch plus the same over the
/// target batch. Dropout off. With `include_source` false the source batch
/// is left out entirely.
pub fn reconstruction_loss(
    model: &Model,
    source: &[&Sentence],
    target: &[&Sentence],
    include_source: bool,
) -> Result<f64> {
    if model.transfer.num_levels() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let source = if include_source { source } else { &[] };
    for batch in [source, target] {
        if batch.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for s in batch {
            let mut pass = model.forward(&s.tokens, None)?;
            if let Some(d) = model.transfer.total(&mut pass.tape, pass.s, &pass.levels) {
                sum += pass.tape.scalar(d);
            }
        }
        total += sum / batch.len() as f64;
    }
    Ok(total)
}
