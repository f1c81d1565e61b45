//! The full network: embeddings → encoder → {extractor, categorizer} with the
//! reconstruction decoders tying the two heads together.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::categorizer::{Categorizer, SentenceVector};
use crate::config::ModelConfig;
use crate::corpus::{BioTag, DomainCorpus};
use crate::embeddings::{gather_rows, EmbeddingTable, Vocab};
use crate::encoder::{Encoder, EncoderOutput, EncoderVars};
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::transfer::ReconstructionDecoder;

const INIT_STREAM: u64 = 0x5eed_0f_1a7e;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub embedding: ParamId,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub extractor: Extractor,
    pub categorizer: Categorizer,
    pub transfer: ReconstructionDecoder,
}

/// One sentence's forward graph.
pub struct Pass<'m> {
    pub tape: Tape<'m>,
    /// Leaf holding the looked-up word vectors.
    pub input: Var,
    /// Vocabulary rows of the tokens, for scattering input gradients.
    pub rows: Vec<usize>,
    pub encoder: EncoderVars,
    pub levels: Vec<Var>,
    pub emissions: Var,
    pub s: Var,
    pub alpha_g: Var,
}

impl Model {
    /// Initializes every parameter from `config.seed` and registers one
    /// category head bank per `(domain, categories)` pair.
    pub fn new(config: ModelConfig, embeddings: EmbeddingTable, domains: &[(&str, &[String])]) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, config says {}",
                embeddings.dim(),
                config.embedding_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_STREAM);
        let mut params = ParamStore::new();
        let EmbeddingTable { vocab, matrix } = embeddings;
        let embedding = params.add("embedding", matrix);
        params.set_trainable(embedding, !config.freeze_embeddings);

        let encoder = Encoder::new(config.encoder(), &mut params, &mut rng)?;
        let width = encoder.config.output_dim();
        let extractor = Extractor::new(&mut params, width, config.fc_dim, config.fc_layers, &mut rng)?;
        let mut categorizer = Categorizer::new(&mut params, width, &mut rng);
        for (name, categories) in domains {
            categorizer.register_domain(&mut params, name, categories, &mut rng)?;
        }
        let transfer = ReconstructionDecoder::new(&mut params, config.recon_levels, config.fc_dim, width, &mut rng);
        Ok(Model {
            config,
            vocab,
            embedding,
            params,
            encoder,
            extractor,
            categorizer,
            transfer,
        })
    }

    /// Model with head banks for both corpora of a transfer pair.
    pub fn for_pair(
        config: ModelConfig,
        embeddings: EmbeddingTable,
        source: &DomainCorpus,
        target: &DomainCorpus,
    ) -> Result<Self> {
        if source.name == target.name {
            return Err(Error::Config(format!(
                "source and target share the domain name `{}`",
                source.name
            )));
        }
        Model::new(
            config,
            embeddings,
            &[
                (source.name.as_str(), &source.category_set),
                (target.name.as_str(), &target.category_set),
            ],
        )
    }

    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable {
            vocab: self.vocab.clone(),
            matrix: self.params.get(self.embedding).clone(),
        }
    }

    /// Builds the forward graph; dropout is active iff `dropout` is given.
    pub fn forward<S: AsRef<str>>(&self, tokens: &[S], mut dropout: Option<&mut ChaCha8Rng>) -> Result<Pass<'_>> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot run the model on an empty sentence".into()));
        }
        let rows = self.vocab.indices(tokens);
        let mut tape = Tape::new(&self.params);
        let input = tape.input(gather_rows(self.params.get(self.embedding), &rows));
        let encoder = self.encoder.forward(&mut tape, input, dropout.as_deref_mut());
        let levels = self.extractor.levels(&mut tape, encoder.h);
        let last = *levels.last().expect("at least one FC level");
        let emissions = self.extractor.emissions(&mut tape, last);
        let (s, alpha_g) = self.categorizer.pool(&mut tape, encoder.h);
        Ok(Pass {
            tape,
            input,
            rows,
            encoder,
            levels,
            emissions,
            s,
            alpha_g,
        })
    }

    /// Viterbi labels with dropout off.
    pub fn decode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<BioTag>> {
        let pass = self.forward(tokens, None)?;
        let r_k = pass.tape.value(*pass.levels.last().expect("FC level")).clone();
        self.extractor.crf_params(&self.params).viterbi_decode(&r_k)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<EncoderOutput> {
        let x = gather_rows(self.params.get(self.embedding), &self.vocab.indices(tokens));
        self.encoder.encode(&self.params, &x)
    }

    pub fn sentence_vector<S: AsRef<str>>(&self, tokens: &[S]) -> Result<SentenceVector> {
        let out = self.encode(tokens)?;
        self.categorizer.sentence_vector(&self.params, &out.h)
    }

    /// The general-attention weights `alpha_g` per token, dropout off.
    pub fn token_attention<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        Ok(self.sentence_vector(tokens)?.alpha_g.to_vec())
    }

    pub fn lookup<S: AsRef<str>>(&self, tokens: &[S]) -> Array2<f64> {
        gather_rows(self.params.get(self.embedding), &self.vocab.indices(tokens))
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.categorizer.heads.iter().map(|h| h.domain.as_str())
    }

    /// Errors unless `corpus` matches a registered domain's category set.
    pub fn check_domain(&self, corpus: &DomainCorpus) -> Result<()> {
        let heads = self.categorizer.heads(&corpus.name)?;
        if heads.categories != corpus.category_set {
            return Err(Error::Validation(format!(
                "domain `{}`: model was trained with categories [{}], corpus has [{}]",
                corpus.name,
                heads.categories.join(","),
                corpus.category_set.join(",")
            )));
        }
        Ok(())
    }
}
