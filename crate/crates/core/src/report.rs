//! Per-token general-attention weights in a plot-ready table.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{BioTag, DomainCorpus};
use crate::error::Result;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub sentence: usize,
    pub position: usize,
    pub token: String,
    pub weight: f64,
    /// Whether the token lies in a gold span; `None` without token labels.
    pub aspect: Option<bool>,
}

pub fn attention_rows(model: &Model, corpus: &DomainCorpus) -> Result<Vec<AttentionRow>> {
    let mut rows = Vec::new();
    for (i, s) in corpus.sentences.iter().enumerate() {
        let weights = model.token_attention(&s.tokens)?;
        for (j, (token, weight)) in s.tokens.iter().zip(weights).enumerate() {
            rows.push(AttentionRow {
                sentence: i,
                position: j,
                token: token.clone(),
                weight,
                aspect: s.tags.as_ref().map(|t| t[j] != BioTag::N),
            });
        }
    }
    Ok(rows)
}

/// Tab-separated with a header; the aspect column is `1`, `0` or `-`.
pub fn write_attention_tsv<W: Write>(rows: &[AttentionRow], mut out: W) -> io::Result<()> {
    writeln!(out, "sentence\tposition\ttoken\tweight\taspect")?;
    for r in rows {
        let aspect = match r.aspect {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.sentence, r.position, r.token, r.weight, aspect)?;
    }
    Ok(())
}

/// Mean over sentences that contain both aspect and other tokens of the
/// average aspect-token weight divided by the uniform weight `1/n`. Above 1
/// means aspect tokens draw more than their share. `None` when no sentence
/// qualifies.
pub fn aspect_attention_lift(rows: &[AttentionRow]) -> Option<f64> {
    let mut lifts = Vec::new();
    for sentence in rows.chunk_by(|a, b| a.sentence == b.sentence) {
        let n = sentence.len() as f64;
        let aspect: Vec<f64> = sentence.iter().filter(|r| r.aspect == Some(true)).map(|r| r.weight).collect();
        if aspect.is_empty() || aspect.len() == sentence.len() {
            continue;
        }
        let mean = aspect.iter().sum::<f64>() / aspect.len() as f64;
        lifts.push(mean * n);
    }
    (!lifts.is_empty()).then(|| lifts.iter().sum::<f64>() / lifts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sentence: usize, weight: f64, aspect: bool) -> AttentionRow {
        AttentionRow {
            sentence,
            position: 0,
            token: "w".into(),
            weight,
            aspect: Some(aspect),
        }
    }

    #[test]
    fn lift_examples() {
        // Uniform weights give a lift of exactly 1.
        let rows = [row(0, 0.25, true), row(0, 0.25, false), row(0, 0.25, false), row(0, 0.25, false)];
        assert_eq!(aspect_attention_lift(&rows), Some(1.0));
        let rows = [row(0, 0.75, true), row(0, 0.25, false)];
        assert_eq!(aspect_attention_lift(&rows), Some(1.5));
        assert_eq!(aspect_attention_lift(&[row(0, 1.0, false)]), None);
    }

    #[test]
    fn tsv_layout() {
        let mut r = row(2, 0.5, true);
        r.token = "staff".into();
        let mut u = row(2, 0.5, false);
        u.aspect = None;
        let mut buf = Vec::new();
        write_attention_tsv(&[r, u], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "sentence\tposition\ttoken\tweight\taspect\n2\t0\tstaff\t0.5\t1\n2\t0\tw\t0.5\t-\n");
    }
}
