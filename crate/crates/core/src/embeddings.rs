//! Vocabulary and pretrained word vectors.
//!
//! Row 0 is the all-zero padding row and row 1 the seeded random row shared by
//! every out-of-vocabulary token. Rows read from the embedding file are kept
//! bit-identical to the text values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Range of the uniform draw used for the unknown-token row.
pub const UNK_INIT_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    index: BTreeMap<String, usize>,
    size: usize,
    lowercase: bool,
}

impl Vocab {
    fn with_specials(lowercase: bool) -> Self {
        let mut index = BTreeMap::new();
        index.insert(PAD_TOKEN.to_owned(), PAD_INDEX);
        index.insert(UNK_TOKEN.to_owned(), UNK_INDEX);
        Vocab {
            index,
            size: 2,
            lowercase,
        }
    }

    fn push(&mut self, token: String) -> usize {
        let next = self.size;
        let id = *self.index.entry(token).or_insert(next);
        if id == next {
            self.size += 1;
        }
        id
    }

    fn normalize<'t>(&self, token: &'t str) -> std::borrow::Cow<'t, str> {
        if self.lowercase {
            token.to_lowercase().into()
        } else {
            token.into()
        }
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(self.normalize(token).as_ref()).copied()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn indices<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn unk_index(&self) -> usize {
        UNK_INDEX
    }

    pub fn pad_index(&self) -> usize {
        PAD_INDEX
    }

    /// `n x dim` matrix of the vectors for `tokens`, unknowns mapped to the unk row.
    pub fn lookup<S: AsRef<str>>(&self, tokens: &[S]) -> Array2<f64> {
        gather_rows(&self.matrix, &self.vocab.indices(tokens))
    }

    /// Builds a table from in-memory vectors; used by generators and tests.
    pub fn from_vectors<I>(vectors: I, dim: usize, seed: u64, lowercase: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut vocab = Vocab::with_specials(lowercase);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (token, vector) in vectors {
            if vector.len() != dim {
                return Err(Error::Validation(format!(
                    "vector for `{token}` has {} entries, expected {dim}",
                    vector.len()
                )));
            }
            let token = vocab.normalize(&token).into_owned();
            if vocab.get(&token).is_none() {
                vocab.push(token);
                rows.push(vector);
            }
        }
        Ok(Self::assemble(vocab, rows, dim, seed))
    }

    fn assemble(vocab: Vocab, rows: Vec<Vec<f64>>, dim: usize, seed: u64) -> Self {
        let mut matrix = Array2::zeros((vocab.len(), dim));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in matrix.row_mut(UNK_INDEX) {
            *x = rng.random_range(-UNK_INIT_RANGE..=UNK_INIT_RANGE);
        }
        for (i, row) in rows.into_iter().enumerate() {
            for (dst, src) in matrix.row_mut(i + 2).iter_mut().zip(row) {
                *dst = src;
            }
        }
        EmbeddingTable { vocab, matrix }
    }
}

pub fn gather_rows(matrix: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), matrix.ncols()));
    for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&matrix.row(r));
    }
    out
}

/// Reads a whitespace-delimited text embedding file, keeping only tokens that
/// occur in `corpus_vocab`. An optional word2vec-style `count dim` first line
/// is accepted and its dimension checked against `dim`.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    corpus_vocab: &BTreeSet<String>,
    dim: usize,
    seed: u64,
    lowercase: bool,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let wanted: BTreeSet<String> = if lowercase {
        corpus_vocab.iter().map(|t| t.to_lowercase()).collect()
    } else {
        corpus_vocab.clone()
    };

    let mut vocab = Vocab::with_specials(lowercase);
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let rest: Vec<&str> = fields.collect();
        if lineno == 1 && rest.len() == 1 {
            if let (Ok(_), Ok(header_dim)) = (token.parse::<usize>(), rest[0].parse::<usize>()) {
                if header_dim != dim {
                    return Err(Error::Config(format!(
                        "{}: header declares dimension {header_dim}, expected {dim}",
                        path.display()
                    )));
                }
                continue;
            }
        }
        if rest.len() != dim {
            return Err(parse_err(
                lineno,
                format!("expected {dim} values after `{token}`, found {}", rest.len()),
            ));
        }
        let token = vocab.normalize(token).into_owned();
        if !wanted.contains(&token) || vocab.get(&token).is_some() {
            continue;
        }
        let vector = rest
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, format!("bad float: {e}")))?;
        vocab.push(token);
        rows.push(vector);
    }
    Ok(EmbeddingTable::assemble(vocab, rows, dim, seed))
}

/// Writes vectors in the whitespace text format read by [`load_embeddings`],
/// with shortest round-trip float formatting.
pub fn save_embeddings(path: impl AsRef<Path>, vectors: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        for (token, v) in vectors {
            write!(out, "{token}")?;
            for x in v {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}
