//! Sentence-level multi-label category head.
//!
//! A single attention vector shared by all domains pools the attended token
//! states into a sentence vector `s`; each domain owns its own bank of
//! per-category logistic classifiers.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softmax_rows, Mat, ParamId, ParamStore, Tape, Var};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::init;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceVector {
    pub s: Array1<f64>,
    pub alpha_g: Array1<f64>,
}

/// Logistic classifiers for one domain, one column per category.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryHeads {
    pub domain: String,
    pub categories: Vec<String>,
    pub w: ParamId,
    pub b: ParamId,
}

impl CategoryHeads {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Categorizer {
    pub attention: ParamId,
    pub heads: Vec<CategoryHeads>,
    dim: usize,
}

impl Categorizer {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Categorizer {
            attention: store.add("general_attention.w", init::linear(dim, 1, rng)),
            heads: Vec::new(),
            dim,
        }
    }

    pub fn register_domain(
        &mut self,
        store: &mut ParamStore,
        domain: &str,
        categories: &[String],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if self.heads.iter().any(|h| h.domain == domain) {
            return Err(Error::Config(format!("domain `{domain}` registered twice")));
        }
        let c = categories.len();
        let bound = 1.0 / (self.dim as f64).sqrt();
        self.heads.push(CategoryHeads {
            domain: domain.to_owned(),
            categories: categories.to_vec(),
            w: store.add(format!("heads.{domain}.w"), init::uniform((self.dim, c), bound, rng)),
            b: store.add(format!("heads.{domain}.b"), init::uniform((1, c), bound, rng)),
        });
        Ok(())
    }

    pub fn heads(&self, domain: &str) -> Result<&CategoryHeads> {
        self.heads
            .iter()
            .find(|h| h.domain == domain)
            .ok_or_else(|| Error::UnknownDomain(domain.to_owned()))
    }

    /// Returns `(s, alpha_g)` with `alpha_g = softmax(H w)` as an `n x 1`
    /// column and `s = alpha_gᵀ H` as a `1 x d` row.
    pub fn pool(&self, tape: &mut Tape, h: Var) -> (Var, Var) {
        let w = tape.param(self.attention);
        let logits = tape.matmul(h, w);
        let logits = tape.transpose(logits);
        let alpha = tape.softmax_rows(logits);
        let s = tape.matmul(alpha, h);
        let alpha = tape.transpose(alpha);
        (s, alpha)
    }

    pub fn logits(&self, tape: &mut Tape, s: Var, domain: &str) -> Result<Var> {
        let heads = self.heads(domain)?;
        let w = tape.param(heads.w);
        let b = tape.param(heads.b);
        let z = tape.matmul(s, w);
        Ok(tape.add_row(z, b))
    }

    /// Summed two-sided binary cross-entropy of one sentence's categories.
    pub fn bce(&self, tape: &mut Tape, s: Var, domain: &str, targets: &[bool]) -> Result<Var> {
        let heads = self.heads(domain)?;
        if targets.len() != heads.len() {
            return Err(Error::Shape(format!(
                "{} category labels for domain `{domain}` with {} categories",
                targets.len(),
                heads.len()
            )));
        }
        let logits = self.logits(tape, s, domain)?;
        let z = Mat::from_shape_fn((1, targets.len()), |(_, j)| f64::from(u8::from(targets[j])));
        Ok(tape.bce_with_logits(logits, Arc::new(z)))
    }

    pub fn sentence_vector(&self, store: &ParamStore, h: &Array2<f64>) -> Result<SentenceVector> {
        sentence_vector(h, store.get(self.attention))
    }

    pub fn predict_categories(&self, store: &ParamStore, s: &SentenceVector, domain: &str) -> Result<Array1<f64>> {
        let heads = self.heads(domain)?;
        let logits = s.s.dot(store.get(heads.w)) + store.get(heads.b).row(0);
        Ok(logits.mapv(sigmoid))
    }
}

/// Attention pooling with an explicit `d x 1` weight column.
pub fn sentence_vector(h: &Array2<f64>, w: &Array2<f64>) -> Result<SentenceVector> {
    if h.nrows() == 0 {
        return Err(Error::Validation("cannot pool an empty sentence".into()));
    }
    if w.dim() != (h.ncols(), 1) {
        return Err(Error::Shape(format!(
            "attention weight {:?} for states of width {}",
            w.dim(),
            h.ncols()
        )));
    }
    let logits = h.dot(w).reversed_axes();
    let alpha = softmax_rows(&logits).row(0).to_owned();
    let s = alpha.dot(h);
    Ok(SentenceVector { s, alpha_g: alpha })
}

/// Per-category BCE summed over categories, averaged per domain, and the
/// two domain means added. Dropout off.
pub fn categorization_loss(model: &Model, source: &[&Sentence], target: &[&Sentence]) -> Result<f64> {
    let mut total = 0.0;
    for batch in [source, target] {
        if batch.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for s in batch {
            let mut pass = model.forward(&s.tokens, None)?;
            let l = model.categorizer.bce(&mut pass.tape, pass.s, &s.domain_id, &s.categories)?;
            sum += pass.tape.scalar(l);
        }
        total += sum / batch.len() as f64;
    }
    Ok(total)
}
