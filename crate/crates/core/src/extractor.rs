//! Token-level aspect extraction head: a ReLU fully-connected stack whose last
//! level feeds a linear-chain CRF over {BA, IA, N}.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{BioTag, Sentence};
use crate::crf::ScoreView;
use crate::error::{Error, Result};
use crate::init;
use crate::model::Model;

/// Affine map `x W + b` over the rows of `x`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Dense {
            w: store.add(format!("{name}.w"), init::uniform((fan_in, fan_out), bound, rng)),
            b: store.add(format!("{name}.b"), init::uniform((1, fan_out), bound, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// All `K` levels `r^1..r^K` of the FC stack, each `n x d_fc`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcStackOutput {
    pub levels: Vec<Array2<f64>>,
}

/// Plain-value CRF parameters: emission projection plus chain potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub emission_w: Array2<f64>,
    pub emission_b: Array1<f64>,
    pub transition: Array2<f64>,
    pub start: Array1<f64>,
    pub stop: Array1<f64>,
}

impl CrfParams {
    /// Zero chain potentials around the given emission projection.
    pub fn with_projection(emission_w: Array2<f64>, emission_b: Array1<f64>) -> Self {
        let l = BioTag::COUNT;
        CrfParams {
            emission_w,
            emission_b,
            transition: Array2::zeros((l, l)),
            start: Array1::zeros(l),
            stop: Array1::zeros(l),
        }
    }

    pub fn emissions(&self, r_k: &Array2<f64>) -> Array2<f64> {
        r_k.dot(&self.emission_w) + &self.emission_b
    }

    fn view<'a>(&'a self, emissions: &'a Array2<f64>) -> ScoreView<'a> {
        ScoreView::new(emissions, &self.transition, self.start.view(), self.stop.view())
    }

    pub fn score(&self, r_k: &Array2<f64>, tags: &[BioTag]) -> Result<f64> {
        if tags.len() != r_k.nrows() {
            return Err(Error::Shape(format!(
                "{} tags for a sentence of {} tokens",
                tags.len(),
                r_k.nrows()
            )));
        }
        let e = self.emissions(r_k);
        let idx: Vec<usize> = tags.iter().map(|t| t.index()).collect();
        Ok(self.view(&e).score(&idx))
    }

    pub fn log_partition(&self, r_k: &Array2<f64>) -> Result<f64> {
        if r_k.nrows() == 0 {
            return Err(Error::Validation("CRF over an empty sentence".into()));
        }
        let e = self.emissions(r_k);
        Ok(self.view(&e).log_partition())
    }

    pub fn viterbi_decode(&self, r_k: &Array2<f64>) -> Result<Vec<BioTag>> {
        if r_k.nrows() == 0 {
            return Err(Error::Validation("CRF over an empty sentence".into()));
        }
        let e = self.emissions(r_k);
        Ok(self.view(&e).viterbi().into_iter().map(BioTag::from_index).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Extractor {
    pub fc: Vec<Dense>,
    pub emission: Dense,
    pub transitions: ParamId,
    pub start: ParamId,
    pub stop: ParamId,
}

impl Extractor {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        fc_dim: usize,
        fc_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if fc_layers == 0 || fc_dim == 0 {
            return Err(Error::Config("the extraction head needs at least one FC layer".into()));
        }
        let mut fc = Vec::with_capacity(fc_layers);
        let mut width = input_dim;
        for k in 0..fc_layers {
            fc.push(Dense::new(store, &format!("fc{}", k + 1), width, fc_dim, rng));
            width = fc_dim;
        }
        let l = BioTag::COUNT;
        Ok(Extractor {
            fc,
            emission: Dense::new(store, "crf.emission", fc_dim, l, rng),
            transitions: store.add("crf.transitions", init::uniform((l, l), 0.1, rng)),
            start: store.add("crf.start", init::uniform((1, l), 0.1, rng)),
            stop: store.add("crf.stop", init::uniform((1, l), 0.1, rng)),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.fc.len()
    }

    /// `r^k = ReLU(FC_k(r^(k-1)))` with `r^0 = H`; returns `r^1..r^K`.
    pub fn levels(&self, tape: &mut Tape, h: Var) -> Vec<Var> {
        let mut r = h;
        self.fc
            .iter()
            .map(|layer| {
                let z = layer.forward(tape, r);
                r = tape.relu(z);
                r
            })
            .collect()
    }

    pub fn emissions(&self, tape: &mut Tape, r_k: Var) -> Var {
        self.emission.forward(tape, r_k)
    }

    /// CRF negative log-likelihood of `tags`.
    pub fn nll(&self, tape: &mut Tape, emissions: Var, tags: &[BioTag]) -> Var {
        let t = tape.param(self.transitions);
        let a = tape.param(self.start);
        let b = tape.param(self.stop);
        let idx: Vec<usize> = tags.iter().map(|t| t.index()).collect();
        tape.crf_nll(emissions, t, a, b, &idx)
    }

    pub fn fc_stack(&self, store: &ParamStore, h: &Array2<f64>) -> FcStackOutput {
        let mut tape = Tape::new(store);
        let x = tape.constant(h.clone());
        let levels = self.levels(&mut tape, x);
        FcStackOutput {
            levels: levels.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    pub fn crf_params(&self, store: &ParamStore) -> CrfParams {
        CrfParams {
            emission_w: store.get(self.emission.w).clone(),
            emission_b: store.get(self.emission.b).index_axis(Axis(0), 0).to_owned(),
            transition: store.get(self.transitions).clone(),
            start: store.get(self.start).index_axis(Axis(0), 0).to_owned(),
            stop: store.get(self.stop).index_axis(Axis(0), 0).to_owned(),
        }
    }
}

/// Mean CRF negative log-likelihood over labeled sentences, dropout off.
pub fn extraction_loss(model: &Model, batch: &[&Sentence]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let tags = s
            .tags
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("sentence {i} in the extraction batch has no tags")))?;
        let mut pass = model.forward(&s.tokens, None)?;
        let nll = model.extractor.nll(&mut pass.tape, pass.emissions, tags);
        total += pass.tape.scalar(nll);
    }
    Ok(total / batch.len() as f64)
}
