//! Joint optimization of `L = L_e + λ·L_c + β·L_r` over half-source,
//! half-target mini-batches with Adam.
//!
//! Source sentences contribute all three terms; target sentences carry no
//! token labels and contribute only the categorization and reconstruction
//! terms. Every random draw (batch order, dropout masks) is derived from the
//! run seed and the (epoch, batch, slot) position, so runs replay exactly and
//! a restored checkpoint continues the same trajectory.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradBuffer, Mat, ParamId, ParamStore, Var};
use crate::corpus::{tags_to_spans, DomainCorpus, Sentence, SpanSet};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::{exact_match_f1, F1Report};
use crate::model::Model;

pub use crate::config::ModelConfig;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_FORMAT: &str = "aspect-transfer-checkpoint/1";

pub fn total_loss(extraction: f64, categorization: f64, reconstruction: f64, lambda: f64, beta: f64) -> f64 {
    extraction + lambda * categorization + beta * reconstruction
}

/// Sentence indices of one mixed batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Splits an epoch into batches of `batch_size / 2` source plus as many
/// target sentences. The larger corpus is visited once without replacement;
/// the smaller one is reshuffled and cycled to keep pace.
pub fn make_batches(
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<MixedBatch>> {
    if source_len == 0 || target_len == 0 {
        return Err(Error::Validation(format!(
            "mixed batching needs both corpora non-empty (source {source_len}, target {target_len})"
        )));
    }
    let half = batch_size / 2;
    if half == 0 {
        return Err(Error::Config(format!("batch size {batch_size} cannot be halved")));
    }
    let draws = source_len.max(target_len);
    let source = draw_indices(source_len, draws, stream_seed(&[seed, epoch as u64, 1]));
    let target = draw_indices(target_len, draws, stream_seed(&[seed, epoch as u64, 2]));
    Ok(source
        .chunks(half)
        .zip(target.chunks(half))
        .map(|(s, t)| MixedBatch {
            source: s.to_vec(),
            target: t.to_vec(),
        })
        .collect())
}

/// `count` indices from consecutive fresh permutations of `0..len`.
fn draw_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count + len);
    while out.len() < count {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng);
        out.extend(perm);
    }
    out.truncate(count);
    out
}

/// Mixes a tuple of integers into one 64-bit seed (splitmix64 finalizer).
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub extraction: f64,
    pub categorization: f64,
    pub reconstruction: f64,
    pub total: f64,
}

impl LossComponents {
    fn check(&self, epoch: usize, batch: usize) -> Result<()> {
        for (component, value) in [
            ("extraction", self.extraction),
            ("categorization", self.categorization),
            ("reconstruction", self.reconstruction),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component,
                    value,
                    epoch,
                    batch,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Batch-averaged loss components.
    pub losses: LossComponents,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.losses;
        write!(
            f,
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            self.epoch, l.extraction, l.categorization, l.reconstruction, l.total
        )
    }
}

/// Adam with bias correction; parameters without a gradient in a step are
/// left untouched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        Adam {
            lr,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &GradBuffer) {
        self.update_with(params, grads, |_| None);
    }

    /// One step where `rate(id)` may override the learning rate per parameter.
    pub fn update_with(&mut self, params: &mut ParamStore, grads: &GradBuffer, rate: impl Fn(ParamId) -> Option<f64>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (id, g) in grads.iter() {
            let lr = rate(id).unwrap_or(self.lr);
            if !params.param(id).trainable {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            });
            Zip::from(params.get_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub state: TrainingState,
}

/// Per-sentence terms kept as tape handles until backward.
struct Terms {
    extraction: Option<Var>,
    categorization: Var,
    reconstruction: Option<Var>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let optimizer = Adam::new(model.config.lr, &model.params);
        let state = TrainingState {
            epoch: 0,
            seed: model.config.seed,
            history: Vec::new(),
        };
        Trainer {
            model,
            optimizer,
            state,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn check_inputs(&self, source: &DomainCorpus, target: &DomainCorpus) -> Result<()> {
        if !source.has_token_labels {
            return Err(Error::Validation(format!(
                "source domain `{}` must carry token labels",
                source.name
            )));
        }
        self.model.check_domain(source)?;
        self.model.check_domain(target)
    }

    /// Accumulated gradient of the batch objective, without an update.
    pub fn batch_gradients(
        &self,
        source: &DomainCorpus,
        target: &DomainCorpus,
        batch: &MixedBatch,
        epoch: usize,
        index: usize,
    ) -> Result<(GradBuffer, LossComponents)> {
        let model = &self.model;
        let config = &model.config;
        let lambda = config.effective_lambda();
        let beta = config.effective_beta();
        let embed_trainable = model.params.param(model.embedding).trainable;
        let embed_shape = model.params.get(model.embedding).dim();

        let mut grads = GradBuffer::new(&model.params);
        let mut losses = LossComponents::default();

        let sides: [(&DomainCorpus, &[usize], bool, u64); 2] = [
            (source, &batch.source, true, 1),
            (target, &batch.target, false, 2),
        ];
        for (corpus, indices, is_source, stream) in sides {
            if indices.is_empty() {
                continue;
            }
            let norm = 1.0 / indices.len() as f64;
            let recon_active = !is_source || config.itm_source;
            for (slot, &i) in indices.iter().enumerate() {
                let sentence = &corpus.sentences[i];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(&[self.state.seed, epoch as u64, index as u64, stream, slot as u64]));
                let mut pass = model.forward(&sentence.tokens, Some(&mut rng))?;
                let terms = self.sentence_terms(&mut pass, sentence, is_source, recon_active)?;
                let tape = &mut pass.tape;

                if let Some(le) = terms.extraction {
                    losses.extraction += norm * tape.scalar(le);
                }
                losses.categorization += norm * tape.scalar(terms.categorization);
                if let Some(lr) = terms.reconstruction {
                    losses.reconstruction += norm * tape.scalar(lr);
                }

                let mut weighted = Vec::with_capacity(3);
                if let Some(le) = terms.extraction {
                    weighted.push(tape.scale(le, norm));
                }
                if lambda > 0.0 {
                    weighted.push(tape.scale(terms.categorization, lambda * norm));
                }
                if let (Some(lr), true) = (terms.reconstruction, beta > 0.0) {
                    weighted.push(tape.scale(lr, beta * norm));
                }
                let Some(mut objective) = weighted.first().copied() else {
                    continue;
                };
                for &w in &weighted[1..] {
                    objective = tape.add(objective, w);
                }
                let mut g = tape.backward_into(objective, &mut grads);
                grads.absorb(&g);
                if embed_trainable {
                    if let Some(gx) = g.take(pass.input) {
                        grads.add_rows(model.embedding, embed_shape, &pass.rows, &gx);
                    }
                }
            }
        }
        losses.total = total_loss(losses.extraction, losses.categorization, losses.reconstruction, lambda, beta);
        losses.check(epoch, index)?;
        grads.settle();
        Ok((grads, losses))
    }

    fn sentence_terms(
        &self,
        pass: &mut crate::model::Pass<'_>,
        sentence: &Sentence,
        is_source: bool,
        recon_active: bool,
    ) -> Result<Terms> {
        let model = &self.model;
        let tape = &mut pass.tape;
        let extraction = if is_source {
            let tags = sentence
                .tags
                .as_deref()
                .ok_or_else(|| Error::Validation("source sentence without tags".into()))?;
            Some(model.extractor.nll(tape, pass.emissions, tags))
        } else {
            None
        };
        let categorization = model
            .categorizer
            .bce(tape, pass.s, &sentence.domain_id, &sentence.categories)?;
        let reconstruction = if recon_active {
            model.transfer.total(tape, pass.s, &pass.levels)
        } else {
            None
        };
        Ok(Terms {
            extraction,
            categorization,
            reconstruction,
        })
    }

    pub fn train_batch(
        &mut self,
        source: &DomainCorpus,
        target: &DomainCorpus,
        batch: &MixedBatch,
        epoch: usize,
        index: usize,
    ) -> Result<LossComponents> {
        let (mut grads, losses) = self.batch_gradients(source, target, batch, epoch, index)?;
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                component: "gradient",
                value: norm,
                epoch,
                batch: index,
            });
        }
        if let Some(clip) = self.model.config.clip_norm {
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let (embedding, embedding_lr) = (self.model.embedding, self.model.config.embedding_lr);
        self.optimizer
            .update_with(&mut self.model.params, &grads, |id| embedding_lr.filter(|_| id == embedding));
        Ok(losses)
    }

    pub fn run_epoch(&mut self, source: &DomainCorpus, target: &DomainCorpus) -> Result<EpochRecord> {
        self.check_inputs(source, target)?;
        let epoch = self.state.epoch;
        let batches = make_batches(
            source.len(),
            target.len(),
            self.model.config.batch_size,
            self.state.seed,
            epoch,
        )?;
        let mut sum = LossComponents::default();
        for (index, batch) in batches.iter().enumerate() {
            let l = self.train_batch(source, target, batch, epoch, index)?;
            sum.extraction += l.extraction;
            sum.categorization += l.categorization;
            sum.reconstruction += l.reconstruction;
            sum.total += l.total;
        }
        let k = batches.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            batches: batches.len(),
            losses: LossComponents {
                extraction: sum.extraction / k,
                categorization: sum.categorization / k,
                reconstruction: sum.reconstruction / k,
                total: sum.total / k,
            },
        };
        self.state.epoch += 1;
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn fit(&mut self, source: &DomainCorpus, target: &DomainCorpus) -> Result<&[EpochRecord]> {
        self.fit_with(source, target, |_| {})
    }

    pub fn fit_with<F: FnMut(&EpochRecord)>(
        &mut self,
        source: &DomainCorpus,
        target: &DomainCorpus,
        mut on_epoch: F,
    ) -> Result<&[EpochRecord]> {
        while self.state.epoch < self.model.config.epochs {
            let record = self.run_epoch(source, target)?;
            on_epoch(&record);
        }
        Ok(&self.state.history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            state: self.state.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Trainer {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            state: ckpt.state,
        }
    }
}

/// Builds a model for the pair and trains it for `config.epochs` epochs.
pub fn fit(
    source: &DomainCorpus,
    target: &DomainCorpus,
    embeddings: EmbeddingTable,
    config: ModelConfig,
) -> Result<Trainer> {
    let model = Model::for_pair(config, embeddings, source, target)?;
    let mut trainer = Trainer::new(model);
    trainer.fit(source, target)?;
    Ok(trainer)
}

/// Everything needed to serialize and resume a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: Model,
    pub optimizer: Adam,
    pub state: TrainingState,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint format `{}`",
                path.display(),
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}

/// Viterbi spans for every sentence.
pub fn predict_spans(model: &Model, corpus: &DomainCorpus) -> Result<Vec<SpanSet>> {
    corpus
        .sentences
        .iter()
        .map(|s| model.decode(&s.tokens).map(|tags| tags_to_spans(&tags)))
        .collect()
}

/// Exact-match span F1 of the model's decodes against the corpus tags.
pub fn evaluate(model: &Model, corpus: &DomainCorpus) -> Result<F1Report> {
    let gold = gold_spans(corpus)?;
    let predicted = predict_spans(model, corpus)?;
    exact_match_f1(&predicted, &gold)
}

pub fn gold_spans(corpus: &DomainCorpus) -> Result<Vec<SpanSet>> {
    if !corpus.has_token_labels || corpus.is_empty() {
        return Err(Error::Validation(format!(
            "corpus `{}` has no token labels; evaluation needs gold spans",
            corpus.name
        )));
    }
    Ok(corpus.sentences.iter().filter_map(Sentence::spans).collect())
}

/// Named module removals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Everything on.
    Full,
    /// No sentence categorization loss.
    NoScm,
    /// No reconstruction loss.
    NoItm,
    /// Reconstruction on target sentences only.
    NoItmSource,
    /// Extraction loss only.
    SourceOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::SourceOnly,
        Ablation::NoScm,
        Ablation::NoItm,
        Ablation::NoItmSource,
        Ablation::Full,
    ];

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let mut c = config.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoScm => c.scm = false,
            Ablation::NoItm => c.itm = false,
            Ablation::NoItmSource => c.itm_source = false,
            Ablation::SourceOnly => {
                c.scm = false;
                c.itm = false;
            }
        }
        c
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoScm => "-SCM",
            Ablation::NoItm => "-ITM",
            Ablation::NoItmSource => "-ITMs",
            Ablation::SourceOnly => "source-only",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "-SCM" | "no-scm" => Ok(Ablation::NoScm),
            "-ITM" | "no-itm" => Ok(Ablation::NoItm),
            "-ITMs" | "no-itm-source" => Ok(Ablation::NoItmSource),
            "source-only" | "none" => Ok(Ablation::SourceOnly),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected full, -SCM, -ITM, -ITMs or source-only)"
            ))),
        }
    }
}

/// The corpora of one transfer setting.
#[derive(Clone, Debug)]
pub struct TransferData {
    pub source: DomainCorpus,
    pub target: DomainCorpus,
    pub target_test: DomainCorpus,
    pub embeddings: EmbeddingTable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub config: ModelConfig,
    pub report: F1Report,
    pub history: Vec<EpochRecord>,
}

pub fn run_ablation(data: &TransferData, config: &ModelConfig, which: Ablation) -> Result<AblationReport> {
    let config = which.apply(config);
    let trainer = fit(&data.source, &data.target, data.embeddings.clone(), config.clone())?;
    let report = evaluate(&trainer.model, &data.target_test)?;
    Ok(AblationReport {
        ablation: which,
        config,
        report,
        history: trainer.state.history,
    })
}
