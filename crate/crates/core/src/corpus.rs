//! Sentences, domain corpora, the BIO/span codec and the line-oriented corpus
//! file format.
//!
//! A corpus file is UTF-8 text. The first line names the category set:
//!
//! ```text
//! #categories<TAB>service,food,price
//! ```
//!
//! and every following line is one record:
//!
//! ```text
//! I like the service staff<TAB>N N N BA IA<TAB>service
//! ```
//!
//! Tags are `-` for an unlabeled sentence and categories are `-` when the
//! sentence mentions none.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADER_KEY: &str = "#categories";
const NONE_FIELD: &str = "-";

/// Token label: beginning of an aspect, inside an aspect, or outside.
///
/// The discriminant order doubles as the Viterbi tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BioTag {
    BA = 0,
    IA = 1,
    N = 2,
}

impl BioTag {
    pub const ALL: [BioTag; 3] = [BioTag::BA, BioTag::IA, BioTag::N];
    pub const COUNT: usize = 3;

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn from_index(index: usize) -> BioTag {
        Self::ALL[index]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioTag::BA => "BA",
            BioTag::IA => "IA",
            BioTag::N => "N",
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BioTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "BA" => Ok(BioTag::BA),
            "IA" => Ok(BioTag::IA),
            "N" => Ok(BioTag::N),
            other => Err(format!("unknown tag `{other}` (expected BA, IA or N)")),
        }
    }
}

/// True when no `IA` opens a span (position 0 or directly after `N`).
pub fn is_well_formed(tags: &[BioTag]) -> bool {
    let mut prev = BioTag::N;
    for &tag in tags {
        if tag == BioTag::IA && prev == BioTag::N {
            return false;
        }
        prev = tag;
    }
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Option<Vec<BioTag>>,
    /// Multi-hot over the owning domain's category set, in header order.
    pub categories: Vec<bool>,
    pub domain_id: String,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold spans, when the sentence carries tags.
    pub fn spans(&self) -> Option<SpanSet> {
        self.tags.as_deref().map(tags_to_spans)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub name: String,
    pub category_set: Vec<String>,
    pub sentences: Vec<Sentence>,
    pub has_token_labels: bool,
}

impl DomainCorpus {
    /// Builds a corpus and checks every invariant: unique category names,
    /// tag/token alignment, category vector widths, and uniform labeling.
    pub fn new(
        name: impl Into<String>,
        category_set: Vec<String>,
        sentences: Vec<Sentence>,
    ) -> Result<Self> {
        let name = name.into();
        check_category_names(&category_set)?;
        let mut labeled = 0;
        for (i, s) in sentences.iter().enumerate() {
            if s.tokens.is_empty() {
                return Err(Error::Validation(format!("sentence {i} has no tokens")));
            }
            if let Some(tags) = &s.tags {
                if tags.len() != s.tokens.len() {
                    return Err(Error::Validation(format!(
                        "sentence {i}: {} tags for {} tokens",
                        tags.len(),
                        s.tokens.len()
                    )));
                }
                labeled += 1;
            }
            if s.categories.len() != category_set.len() {
                return Err(Error::Validation(format!(
                    "sentence {i}: category vector has width {}, domain has {} categories",
                    s.categories.len(),
                    category_set.len()
                )));
            }
        }
        if labeled != 0 && labeled != sentences.len() {
            return Err(Error::Validation(format!(
                "{labeled} of {} sentences carry tags; a corpus is either fully labeled or unlabeled",
                sentences.len()
            )));
        }
        let has_token_labels = labeled == sentences.len();
        Ok(DomainCorpus {
            name,
            category_set,
            sentences,
            has_token_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Same sentences with token labels dropped, as a target domain is seen
    /// during training.
    pub fn without_labels(&self) -> DomainCorpus {
        DomainCorpus {
            name: self.name.clone(),
            category_set: self.category_set.clone(),
            sentences: self
                .sentences
                .iter()
                .map(|s| Sentence {
                    tags: None,
                    ..s.clone()
                })
                .collect(),
            has_token_labels: self.sentences.is_empty(),
        }
    }

    fn with_sentences(&self, sentences: Vec<Sentence>) -> DomainCorpus {
        DomainCorpus {
            name: self.name.clone(),
            category_set: self.category_set.clone(),
            has_token_labels: self.has_token_labels,
            sentences,
        }
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.category_set.iter().position(|c| c == name)
    }
}

fn check_category_names(names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for name in names {
        if name.is_empty()
            || name == NONE_FIELD
            || name.contains(|c: char| c == ',' || c.is_whitespace())
        {
            return Err(Error::Validation(format!("invalid category name `{name}`")));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Validation(format!("duplicate category `{name}`")));
        }
    }
    Ok(())
}

/// An inclusive token span `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start {start} after end {end}");
        Span { start, end }
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span::new(start, end)
    }
}

/// A set of pairwise non-overlapping spans.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanSet(BTreeSet<Span>);

impl SpanSet {
    pub fn new() -> Self {
        SpanSet(BTreeSet::new())
    }

    /// Rejects overlapping spans.
    pub fn try_from_spans<I, S>(spans: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<Span>,
    {
        let set: BTreeSet<Span> = spans.into_iter().map(Into::into).collect();
        let mut last_end: Option<usize> = None;
        for span in &set {
            if let Some(end) = last_end {
                if span.start <= end {
                    return Err(Error::Validation(format!(
                        "span ({}, {}) overlaps a previous span ending at {end}",
                        span.start, span.end
                    )));
                }
            }
            last_end = Some(span.end);
        }
        Ok(SpanSet(set))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, span: &Span) -> bool {
        self.0.contains(span)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Span> {
        self.0.iter()
    }

    pub fn intersection_count(&self, other: &SpanSet) -> usize {
        self.0.intersection(&other.0).count()
    }
}

impl<'a> IntoIterator for &'a SpanSet {
    type Item = &'a Span;
    type IntoIter = std::collections::btree_set::Iter<'a, Span>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Decodes tags into spans. A run opens at `BA` and extends over the
/// following `IA`s; an `IA` with nothing to continue opens a new span.
pub fn tags_to_spans(tags: &[BioTag]) -> SpanSet {
    let mut spans = BTreeSet::new();
    let mut open: Option<usize> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            BioTag::BA => {
                if let Some(start) = open.take() {
                    spans.insert(Span::new(start, i - 1));
                }
                open = Some(i);
            }
            BioTag::IA => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            BioTag::N => {
                if let Some(start) = open.take() {
                    spans.insert(Span::new(start, i - 1));
                }
            }
        }
    }
    if let Some(start) = open {
        spans.insert(Span::new(start, tags.len() - 1));
    }
    SpanSet(spans)
}

pub fn spans_to_tags(spans: &SpanSet, length: usize) -> Result<Vec<BioTag>> {
    let mut tags = vec![BioTag::N; length];
    let mut last_end: Option<usize> = None;
    for span in spans {
        if span.start > span.end || span.end >= length {
            return Err(Error::Validation(format!(
                "span ({}, {}) outside a sequence of length {length}",
                span.start, span.end
            )));
        }
        if matches!(last_end, Some(end) if span.start <= end) {
            return Err(Error::Validation(format!(
                "span ({}, {}) overlaps its predecessor",
                span.start, span.end
            )));
        }
        tags[span.start] = BioTag::BA;
        for tag in &mut tags[span.start + 1..=span.end] {
            *tag = BioTag::IA;
        }
        last_end = Some(span.end);
    }
    Ok(tags)
}

pub fn load_corpus(path: impl AsRef<Path>, domain_name: &str) -> Result<DomainCorpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), path, domain_name)
}

/// Parses corpus text from any reader; `origin` is only used in error messages.
pub fn read_corpus<R: Read>(reader: R, origin: &Path, domain_name: &str) -> Result<DomainCorpus> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(origin, e))?,
        None => return Err(parse_err(1, "missing `#categories` header".into())),
    };
    let header = header.strip_prefix('\u{feff}').unwrap_or(&header);
    let categories: Vec<String> = match header.split_once('\t') {
        Some((HEADER_KEY, rest)) => split_list(rest),
        _ if header == HEADER_KEY => Vec::new(),
        _ => {
            return Err(parse_err(
                1,
                format!("expected `{HEADER_KEY}<TAB>names`, found `{header}`"),
            ))
        }
    };
    check_category_names(&categories).map_err(|e| parse_err(1, e.to_string()))?;

    let mut sentences = Vec::new();
    let mut labeled = 0usize;
    for (offset, line) in lines.enumerate() {
        let lineno = offset + 2;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let tokens: Vec<String> = fields[0].split(' ').map(str::to_owned).collect();
        if tokens.iter().any(String::is_empty) {
            return Err(parse_err(lineno, "empty token".into()));
        }
        let tags = if fields[1] == NONE_FIELD {
            None
        } else {
            let tags = fields[1]
                .split(' ')
                .map(str::parse::<BioTag>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|m| parse_err(lineno, m))?;
            if tags.len() != tokens.len() {
                return Err(Error::Validation(format!(
                    "{}:{lineno}: {} tags for {} tokens",
                    origin.display(),
                    tags.len(),
                    tokens.len()
                )));
            }
            labeled += 1;
            Some(tags)
        };
        let mut mask = vec![false; categories.len()];
        for name in split_list(fields[2]) {
            match categories.iter().position(|c| *c == name) {
                Some(j) => mask[j] = true,
                None => {
                    return Err(Error::Validation(format!(
                        "{}:{lineno}: unknown category `{name}`",
                        origin.display()
                    )))
                }
            }
        }
        sentences.push(Sentence {
            tokens,
            tags,
            categories: mask,
            domain_id: domain_name.to_owned(),
        });
    }
    if labeled != 0 && labeled != sentences.len() {
        return Err(Error::Validation(format!(
            "{}: {labeled} of {} records carry tags; a corpus is either fully labeled or unlabeled",
            origin.display(),
            sentences.len()
        )));
    }
    Ok(DomainCorpus {
        name: domain_name.to_owned(),
        category_set: categories,
        has_token_labels: labeled == sentences.len(),
        sentences,
    })
}

fn split_list(field: &str) -> Vec<String> {
    if field.is_empty() || field == NONE_FIELD {
        Vec::new()
    } else {
        field.split(',').map(str::to_owned).collect()
    }
}

pub fn write_corpus<W: Write>(corpus: &DomainCorpus, mut out: W) -> std::io::Result<()> {
    let header = if corpus.category_set.is_empty() {
        NONE_FIELD.to_owned()
    } else {
        corpus.category_set.join(",")
    };
    writeln!(out, "{HEADER_KEY}\t{header}")?;
    for s in &corpus.sentences {
        let tags = match &s.tags {
            Some(tags) => tags.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(" "),
            None => NONE_FIELD.to_owned(),
        };
        let cats: Vec<&str> = corpus
            .category_set
            .iter()
            .zip(&s.categories)
            .filter(|(_, &on)| on)
            .map(|(c, _)| c.as_str())
            .collect();
        let cats = if cats.is_empty() {
            NONE_FIELD.to_owned()
        } else {
            cats.join(",")
        };
        writeln!(out, "{}\t{tags}\t{cats}", s.tokens.join(" "))?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &DomainCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_corpus(corpus, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Seeded random train/test partition. The train side gets
/// `round(train_fraction * N)` sentences, clamped so neither side is empty.
pub fn split_corpus(
    corpus: &DomainCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(DomainCorpus, DomainCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "cannot split a corpus of {n} sentence(s)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.sentences[i].clone()).collect();
    Ok((
        corpus.with_sentences(pick(train_idx)),
        corpus.with_sentences(pick(test_idx)),
    ))
}
