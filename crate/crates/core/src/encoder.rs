//! Shared sentence encoder: stacked bidirectional LSTMs followed by multi-head
//! scaled dot-product self-attention.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_lstm_layers: usize,
    /// Per-direction hidden size; each token's recurrent output is twice this.
    pub lstm_hidden: usize,
    /// `0` removes the attention layer.
    pub num_heads: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Width of `H_T`, the last recurrent layer's output.
    pub fn recurrent_dim(&self) -> usize {
        if self.num_lstm_layers == 0 {
            self.input_dim
        } else {
            2 * self.lstm_hidden
        }
    }

    pub fn head_dim(&self) -> usize {
        match self.num_heads {
            0 => 0,
            m => self.recurrent_dim().div_ceil(m),
        }
    }

    /// Width of `H`, the attended states.
    pub fn output_dim(&self) -> usize {
        match self.num_heads {
            0 => self.recurrent_dim(),
            m => m * self.head_dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h_t: Array2<f64>,
    pub h: Array2<f64>,
    /// One `n x n` row-stochastic matrix per head.
    pub alpha: Vec<Array2<f64>>,
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub h_t: Var,
    pub h: Var,
    pub alpha: Vec<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmCell {
            w_ih: store.add(format!("{name}.w_ih"), init::uniform((input, 4 * hidden), bound, rng)),
            w_hh: store.add(format!("{name}.w_hh"), init::uniform((hidden, 4 * hidden), bound, rng)),
            bias: store.add(format!("{name}.bias"), init::uniform((1, 4 * hidden), bound, rng)),
            hidden,
        }
    }

    /// Runs the cell over the rows of `x` (gate order i, f, g, o), right to
    /// left when `reverse`. Row `t` of the result is the state after token `t`.
    pub fn run(&self, tape: &mut Tape, x: Var, reverse: bool) -> Var {
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let bias = tape.param(self.bias);
        tape.lstm(x, w_ih, w_hh, bias, reverse)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiLstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    /// Per head `m`: `alpha = softmax(Q_m K_mᵀ / sqrt(d))`, output `alpha V_m`;
    /// head outputs are concatenated.
    pub fn forward(&self, tape: &mut Tape, h_t: Var) -> (Var, Vec<Var>) {
        let d = self.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let w_q = tape.param(self.w_q);
        let w_k = tape.param(self.w_k);
        let w_v = tape.param(self.w_v);
        let q = tape.matmul(h_t, w_q);
        let k = tape.matmul(h_t, w_k);
        let v = tape.matmul(h_t, w_v);
        let mut outs = Vec::with_capacity(self.heads);
        let mut alphas = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let (lo, hi) = (m * d, (m + 1) * d);
            let qm = tape.slice_cols(q, lo, hi);
            let km = tape.slice_cols(k, lo, hi);
            let vm = tape.slice_cols(v, lo, hi);
            let logits = tape.matmul_t(qm, km);
            let logits = tape.scale(logits, scale);
            let alpha = tape.softmax_rows(logits);
            outs.push(tape.matmul(alpha, vm));
            alphas.push(alpha);
        }
        let h = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        (h, alphas)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<BiLstmLayer>,
    pub attention: Option<MultiHeadAttention>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.num_lstm_layers > 0 && config.lstm_hidden == 0 {
            return Err(Error::Config("recurrent layers need a nonzero hidden size".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let mut layers = Vec::with_capacity(config.num_lstm_layers);
        let mut width = config.input_dim;
        for l in 0..config.num_lstm_layers {
            layers.push(BiLstmLayer {
                forward: LstmCell::new(store, &format!("lstm{l}.fwd"), width, config.lstm_hidden, rng),
                backward: LstmCell::new(store, &format!("lstm{l}.bwd"), width, config.lstm_hidden, rng),
            });
            width = 2 * config.lstm_hidden;
        }
        let attention = (config.num_heads > 0).then(|| {
            let inner = config.output_dim();
            let bound = 1.0 / (width as f64).sqrt();
            MultiHeadAttention {
                w_q: store.add("attn.w_q", init::uniform((width, inner), bound, rng)),
                w_k: store.add("attn.w_k", init::uniform((width, inner), bound, rng)),
                w_v: store.add("attn.w_v", init::uniform((width, inner), bound, rng)),
                heads: config.num_heads,
                head_dim: config.head_dim(),
            }
        });
        Ok(Encoder {
            config,
            layers,
            attention,
        })
    }

    /// Stacked BiLSTM; layer 0 reads the word vectors. With zero layers the
    /// input passes through unchanged.
    pub fn recurrent(&self, tape: &mut Tape, x: Var, mut dropout: Option<&mut ChaCha8Rng>) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let f = layer.forward.run(tape, h, false);
            let b = layer.backward.run(tape, h, true);
            h = tape.concat_cols(&[f, b]);
            if let Some(rng) = dropout.as_deref_mut() {
                h = apply_dropout(tape, h, self.config.dropout, rng);
            }
        }
        h
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mut dropout: Option<&mut ChaCha8Rng>) -> EncoderVars {
        let h_t = self.recurrent(tape, x, dropout.as_deref_mut());
        match &self.attention {
            Some(attn) => {
                let (mut h, alpha) = attn.forward(tape, h_t);
                if let Some(rng) = dropout {
                    h = apply_dropout(tape, h, self.config.dropout, rng);
                }
                EncoderVars { h_t, h, alpha }
            }
            None => EncoderVars {
                h_t,
                h: h_t,
                alpha: Vec::new(),
            },
        }
    }

    /// Inference-mode recurrent pass over an `n x input_dim` matrix.
    pub fn encode_recurrent(&self, store: &ParamStore, embeddings: &Array2<f64>) -> Result<Array2<f64>> {
        check_input(embeddings, self.config.input_dim)?;
        let mut tape = Tape::new(store);
        let x = tape.constant(embeddings.clone());
        let h = self.recurrent(&mut tape, x, None);
        Ok(tape.value(h).clone())
    }

    /// Inference-mode attention over a given `H_T`. Without attention heads
    /// this is the identity.
    pub fn multi_head_attention(&self, store: &ParamStore, h_t: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let Some(attn) = &self.attention else {
            return (h_t.clone(), Vec::new());
        };
        let mut tape = Tape::new(store);
        let x = tape.constant(h_t.clone());
        let (h, alpha) = attn.forward(&mut tape, x);
        (
            tape.value(h).clone(),
            alpha.iter().map(|&a| tape.value(a).clone()).collect(),
        )
    }

    pub fn encode(&self, store: &ParamStore, embeddings: &Array2<f64>) -> Result<EncoderOutput> {
        check_input(embeddings, self.config.input_dim)?;
        let mut tape = Tape::new(store);
        let x = tape.constant(embeddings.clone());
        let vars = self.forward(&mut tape, x, None);
        Ok(EncoderOutput {
            h_t: tape.value(vars.h_t).clone(),
            h: tape.value(vars.h).clone(),
            alpha: vars.alpha.iter().map(|&a| tape.value(a).clone()).collect(),
        })
    }
}

fn check_input(x: &Array2<f64>, dim: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Validation("cannot encode an empty sentence".into()));
    }
    if x.ncols() != dim {
        return Err(Error::Shape(format!("input width {} but encoder expects {dim}", x.ncols())));
    }
    Ok(())
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
pub fn apply_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let dim = tape.value(x).dim();
    let mask = Mat::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    tape.mul_const(x, Arc::new(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s, Axis};
    use rand::SeedableRng;

    fn encoder(layers: usize, heads: usize) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = EncoderConfig {
            input_dim: 3,
            num_lstm_layers: layers,
            lstm_hidden: 4,
            num_heads: heads,
            dropout: 0.45,
        };
        (Encoder::new(config, &mut store, &mut rng).unwrap(), store)
    }

    fn input(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin())
    }

    #[test]
    fn single_token_shapes() {
        let (enc, store) = encoder(2, 2);
        let out = enc.encode(&store, &input(1)).unwrap();
        assert_eq!(out.h_t.dim(), (1, 8));
        assert_eq!(out.h.dim(), (1, 8));
        for a in &out.alpha {
            assert_eq!(a, &array![[1.0]]);
        }
    }

    #[test]
    fn empty_sentence_is_an_error() {
        let (enc, store) = encoder(1, 1);
        assert!(enc.encode_recurrent(&store, &Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn deterministic_without_dropout() {
        let (enc, store) = encoder(3, 2);
        let a = enc.encode(&store, &input(5)).unwrap();
        let b = enc.encode(&store, &input(5)).unwrap();
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn bidirectional_symmetry() {
        let (enc, mut store) = encoder(1, 0);
        let x = input(4);
        let out = enc.encode_recurrent(&store, &x).unwrap();

        // Swap the parameter roles of the two directions and reverse the input.
        let layer = &enc.layers[0];
        for (a, b) in [
            (layer.forward.w_ih, layer.backward.w_ih),
            (layer.forward.w_hh, layer.backward.w_hh),
            (layer.forward.bias, layer.backward.bias),
        ] {
            let va = store.get(a).clone();
            let vb = store.get(b).clone();
            *store.get_mut(a) = vb;
            *store.get_mut(b) = va;
        }
        let mut reversed = x.clone();
        reversed.invert_axis(Axis(0));
        let swapped = enc.encode_recurrent(&store, &reversed).unwrap();

        let h = 4;
        for i in 0..4 {
            let j = 3 - i;
            let fwd = out.slice(s![i, ..h]);
            let bwd = out.slice(s![i, h..]);
            for (x, y) in fwd.iter().zip(swapped.slice(s![j, h..])) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in bwd.iter().zip(swapped.slice(s![j, ..h])) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_is_identity() {
        let (enc, store) = encoder(1, 0);
        let h_t = input(3);
        let (h, alpha) = enc.multi_head_attention(&store, &h_t);
        assert_eq!(h, h_t);
        assert!(alpha.is_empty());
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let (enc, store) = encoder(0, 1);
        let h_t = Array2::from_elem((4, 3), 0.5);
        let (_, alpha) = enc.multi_head_attention(&store, &h_t);
        for x in alpha[0].iter() {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_two_token_attention() {
        // One head, d = 1: q_i = h_i, k_j = h_j, v_j = h_j via 1x1 identity maps.
        let mut store = ParamStore::new();
        let one = || array![[1.0]];
        let attn = MultiHeadAttention {
            w_q: store.add("q", one()),
            w_k: store.add("k", one()),
            w_v: store.add("v", one()),
            heads: 1,
            head_dim: 1,
        };
        // Row 0 query is 1, keys (1, 1 + ln 3): softmax is shift invariant, so
        // the weights are those of (0, ln 3), i.e. (1/4, 3/4).
        let h_t = array![[1.0], [1.0 + 3f64.ln()]];
        let mut tape = Tape::new(&store);
        let x = tape.constant(h_t.clone());
        let (h, alpha) = attn.forward(&mut tape, x);
        let a = tape.value(alpha[0]);
        assert!((a[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((a[[0, 1]] - 0.75).abs() < 1e-12);
        let expected = 0.25 * h_t[[0, 0]] + 0.75 * h_t[[1, 0]];
        assert!((tape.value(h)[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (enc, store) = encoder(0, 3);
        let h_t = input(4);
        let perm = [2, 0, 3, 1];
        let permuted = Array2::from_shape_fn((4, 3), |(i, j)| h_t[[perm[i], j]]);
        let (h, _) = enc.multi_head_attention(&store, &h_t);
        let (hp, _) = enc.multi_head_attention(&store, &permuted);
        for i in 0..4 {
            for (a, b) in hp.row(i).iter().zip(h.row(perm[i])) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uneven_heads_round_up() {
        let config = EncoderConfig {
            input_dim: 300,
            num_lstm_layers: 0,
            lstm_hidden: 0,
            num_heads: 8,
            dropout: 0.0,
        };
        assert_eq!(config.head_dim(), 38);
        assert_eq!(config.output_dim(), 304);
    }
}
