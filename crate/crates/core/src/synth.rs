//! Synthetic paired domains for desk-scale experiments.
//!
//! A sentence is a shuffled run of mentions padded with filler. A mention is
//! `[filler] noun [opinion]` where the noun is either an aspect term drawn
//! from a category lexicon or a distractor noun in exactly the same slot, so
//! only the word itself tells them apart. Aspect mentions are tagged and mark
//! their category; distractors are neither. Two domains built by
//! [`paired_specs`] share categories, filler, opinions and the sampling
//! process but have disjoint term and distractor lexicons.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BioTag, DomainCorpus, Sentence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    /// Aspect terms; a space separates the words of a multi-word term.
    pub terms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub categories: Vec<CategorySpec>,
    #[serde(default)]
    pub filler: Vec<String>,
    #[serde(default)]
    pub opinions: Vec<String>,
    #[serde(default)]
    pub distractors: Vec<String>,
    #[serde(default = "default_max_aspects")]
    pub max_aspects: usize,
    /// Probability of a sentence with no aspect mention.
    #[serde(default = "default_empty_rate")]
    pub empty_rate: f64,
    /// Probability of each of up to two distractor mentions.
    #[serde(default = "default_distractor_rate")]
    pub distractor_rate: f64,
    /// Most filler words padded at either end.
    #[serde(default = "default_max_padding")]
    pub max_padding: usize,
}

fn default_max_aspects() -> usize {
    2
}
fn default_empty_rate() -> f64 {
    0.15
}
fn default_distractor_rate() -> f64 {
    0.5
}
fn default_max_padding() -> usize {
    2
}

impl DomainSpec {
    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    fn term_words(&self) -> impl Iterator<Item = &str> {
        self.categories
            .iter()
            .flat_map(|c| c.terms.iter())
            .flat_map(|t| t.split_whitespace())
    }

    /// Every word the generator can emit.
    pub fn words(&self) -> BTreeSet<String> {
        self.term_words()
            .chain(self.filler.iter().map(String::as_str))
            .chain(self.opinions.iter().map(String::as_str))
            .chain(self.distractors.iter().map(String::as_str))
            .map(str::to_owned)
            .collect()
    }

    /// Aspect-term and distractor words.
    pub fn nouns(&self) -> BTreeSet<String> {
        self.term_words()
            .chain(self.distractors.iter().map(String::as_str))
            .map(str::to_owned)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("domain spec `{}`: {m}", self.name)));
        for (what, p) in [("empty_rate", self.empty_rate), ("distractor_rate", self.distractor_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{what} {p} outside [0, 1]"));
            }
        }
        if self.max_aspects == 0 && self.empty_rate < 1.0 {
            return fail("max_aspects is 0 but empty_rate is below 1".into());
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for c in &self.categories {
            if c.terms.is_empty() {
                return fail(format!("category `{}` has no terms", c.name));
            }
            for term in &c.terms {
                if term.split_whitespace().next().is_none() {
                    return fail(format!("category `{}` has an empty term", c.name));
                }
                for w in term.split_whitespace() {
                    if let Some(prev) = owner.insert(w, &c.name) {
                        if prev != c.name {
                            return fail(format!("word `{w}` appears in categories `{prev}` and `{}`", c.name));
                        }
                    }
                }
            }
        }
        for (what, list) in [
            ("filler", &self.filler),
            ("opinion", &self.opinions),
            ("distractor", &self.distractors),
        ] {
            for w in list {
                if w.split_whitespace().count() != 1 {
                    return fail(format!("{what} entry `{w}` must be a single word"));
                }
                if let Some(c) = owner.get(w.as_str()) {
                    return fail(format!("{what} word `{w}` is also a term of category `{c}`"));
                }
            }
        }
        Ok(())
    }
}

/// Errors if the two specs share any aspect-term or distractor word.
pub fn check_disjoint(a: &DomainSpec, b: &DomainSpec) -> Result<()> {
    if let Some(w) = a.nouns().intersection(&b.nouns()).next() {
        return Err(Error::Validation(format!(
            "domains `{}` and `{}` share the noun `{w}`",
            a.name, b.name
        )));
    }
    Ok(())
}

/// Generates `size` labeled sentences from `spec`.
pub fn generate_synthetic(spec: &DomainSpec, size: usize, seed: u64) -> Result<DomainCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..size).map(|_| sentence(spec, &mut rng)).collect();
    DomainCorpus::new(spec.name.clone(), spec.category_names(), sentences)
}

fn sentence(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Sentence {
    let mut categories = vec![false; spec.categories.len()];
    let mut mentions: Vec<Vec<(String, BioTag)>> = Vec::new();
    let aspects = if spec.categories.is_empty() || rng.random_bool(spec.empty_rate) {
        0
    } else {
        rng.random_range(1..=spec.max_aspects)
    };
    for _ in 0..aspects {
        let c = rng.random_range(0..spec.categories.len());
        categories[c] = true;
        let term = spec.categories[c].terms.choose(rng).expect("validated non-empty");
        mentions.push(mention(spec, term.split_whitespace(), true, rng));
    }
    if !spec.distractors.is_empty() {
        for _ in 0..2 {
            if rng.random_bool(spec.distractor_rate) {
                let noun = spec.distractors.choose(rng).expect("non-empty").clone();
                mentions.push(mention(spec, std::iter::once(noun.as_str()), false, rng));
            }
        }
    }
    mentions.shuffle(rng);

    let mut words = padding(spec, rng);
    words.extend(mentions.into_iter().flatten());
    words.extend(padding(spec, rng));
    if words.is_empty() {
        let w = spec.filler.first().or(spec.opinions.first()).map_or("none", String::as_str);
        words.push((w.to_owned(), BioTag::N));
    }
    let (tokens, tags) = words.into_iter().unzip();
    Sentence {
        tokens,
        tags: Some(tags),
        categories,
        domain_id: spec.name.clone(),
    }
}

fn padding(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<(String, BioTag)> {
    if spec.filler.is_empty() {
        return Vec::new();
    }
    (0..rng.random_range(0..=spec.max_padding))
        .map(|_| (spec.filler.choose(rng).expect("non-empty").clone(), BioTag::N))
        .collect()
}

/// `[filler] noun [opinion]`; only an aspect noun is tagged.
fn mention<'a>(
    spec: &DomainSpec,
    noun: impl Iterator<Item = &'a str>,
    aspect: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, BioTag)> {
    let mut out = Vec::new();
    if let Some(f) = spec.filler.choose(rng) {
        out.push((f.clone(), BioTag::N));
    }
    for (i, w) in noun.enumerate() {
        let tag = match (aspect, i) {
            (false, _) => BioTag::N,
            (true, 0) => BioTag::BA,
            (true, _) => BioTag::IA,
        };
        out.push((w.to_owned(), tag));
    }
    if let Some(o) = spec.opinions.choose(rng) {
        out.push((o.clone(), BioTag::N));
    }
    out
}

/// Knobs for [`paired_specs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub categories: usize,
    pub terms_per_category: usize,
    /// Every `n`th term of a category has two words; 0 disables.
    pub multiword_every: usize,
    pub distractors: usize,
    pub filler: usize,
    pub opinions: usize,
    pub max_aspects: usize,
    pub empty_rate: f64,
    pub distractor_rate: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            categories: 4,
            terms_per_category: 6,
            multiword_every: 3,
            distractors: 12,
            filler: 10,
            opinions: 8,
            max_aspects: 2,
            empty_rate: default_empty_rate(),
            distractor_rate: default_distractor_rate(),
        }
    }
}

/// Two domains with the same categories, filler and opinion words and
/// disjoint aspect and distractor lexicons.
pub fn paired_specs(names: (&str, &str), config: &PairConfig) -> (DomainSpec, DomainSpec) {
    let mut words = PseudoWords::default();
    let filler = words.take(config.filler);
    let opinions = words.take(config.opinions);
    let mut build = |name: &str| {
        let categories = (0..config.categories)
            .map(|c| CategorySpec {
                name: format!("cat{c}"),
                terms: (0..config.terms_per_category)
                    .map(|t| {
                        let multi = config.multiword_every > 0 && (t + 1) % config.multiword_every == 0;
                        words.take(if multi { 2 } else { 1 }).join(" ")
                    })
                    .collect(),
            })
            .collect();
        DomainSpec {
            name: name.to_owned(),
            categories,
            filler: filler.clone(),
            opinions: opinions.clone(),
            distractors: words.take(config.distractors),
            max_aspects: config.max_aspects,
            empty_rate: config.empty_rate,
            distractor_rate: config.distractor_rate,
            max_padding: default_max_padding(),
        }
    };
    let a = build(names.0);
    let b = build(names.1);
    (a, b)
}

/// Pronounceable, collision-free words from a running counter.
#[derive(Default)]
struct PseudoWords {
    next: usize,
}

impl PseudoWords {
    const ONSETS: &'static [u8] = b"bdfgklmnprstvz";
    const VOWELS: &'static [u8] = b"aeiou";

    fn word(mut i: usize) -> String {
        let base = Self::ONSETS.len() * Self::VOWELS.len();
        // Three syllables give 343,000 distinct words.
        let mut out = String::new();
        for _ in 0..3 {
            let syl = i % base;
            i /= base;
            out.push(Self::ONSETS[syl / Self::VOWELS.len()] as char);
            out.push(Self::VOWELS[syl % Self::VOWELS.len()] as char);
        }
        out
    }

    fn take(&mut self, n: usize) -> Vec<String> {
        let out = (self.next..self.next + n).map(Self::word).collect();
        self.next += n;
        out
    }
}

/// Shape of [`synthetic_embeddings`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorSpec {
    pub dim: usize,
    /// Weight of one direction shared by every noun (aspect terms and
    /// distractors), the way pretrained vectors cluster nouns.
    pub noun_weight: f64,
    /// Weight of a direction shared by the words of one category's terms,
    /// the way pretrained vectors cluster words of a topic.
    pub category_weight: f64,
}

impl VectorSpec {
    pub fn new(dim: usize) -> Self {
        VectorSpec {
            dim,
            noun_weight: 1.0,
            category_weight: 0.0,
        }
    }
}

fn unit_direction(dim: usize, normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// Random N(0, 1/dim) word vectors for every word of `specs`, in sorted
/// word order, plus the shared directions of `shape`.
pub fn synthetic_embeddings(specs: &[&DomainSpec], shape: &VectorSpec, seed: u64) -> Vec<(String, Vec<f64>)> {
    let dim = shape.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive scale");
    let noun_dir = unit_direction(dim, &normal, &mut rng);
    let mut words = BTreeSet::new();
    let mut nouns = BTreeSet::new();
    for s in specs {
        words.extend(s.words());
        nouns.extend(s.nouns());
    }
    // A zero weight draws no topic directions, so the word vectors match
    // those of a spec without topics.
    let mut topic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if shape.category_weight != 0.0 {
        for s in specs {
            for c in &s.categories {
                let dir = unit_direction(dim, &normal, &mut rng);
                for w in c.terms.iter().flat_map(|t| t.split_whitespace()) {
                    topic.insert(w.to_owned(), dir.clone());
                }
            }
        }
    }
    words
        .into_iter()
        .map(|w| {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            if nouns.contains(&w) {
                for (x, d) in v.iter_mut().zip(&noun_dir) {
                    *x += shape.noun_weight * d;
                }
            }
            if let Some(dir) = topic.get(&w) {
                for (x, d) in v.iter_mut().zip(dir) {
                    *x += shape.category_weight * d;
                }
            }
            (w, v)
        })
        .collect()
}
