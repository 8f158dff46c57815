// SPDX-License-Identifier: Apache-2.0

//! Rule-based caption augmentation.
//!
//! Nouns and verbs (per a static lexicon) are replaced by nearby words in a
//! word-embedding space. A candidate survives only if its word cosine clears
//! `sim_token_threshold`, it shares a noun/verb tag with the original token,
//! and the sentence with that one substitution still scores at least
//! `sim_sentence_threshold` against the original caption. Accepted
//! replacements accumulate left to right.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("neither sentence has a token in the embedding vocabulary")]
    NoVocabOverlapInput,
    #[error("pooled sentence vector has zero norm")]
    ZeroPooledVector,
    #[error("caption is empty")]
    EmptyCaption,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

fn read_text(path: &Path) -> Result<String, AugmentError> {
    fs::read_to_string(path).map_err(|e| AugmentError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn is_opening(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{")
}

fn is_punct_token(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if !c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn tokenize(caption: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in caption.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Joins with single spaces, attaching punctuation to its neighbour.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let attach = is_punct_token(tok) && !is_opening(tok);
        if !out.is_empty() && !attach && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = is_opening(tok);
    }
    out
}

/// Case-folded word vectors.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    /// Row-normalized vectors; all-zero rows stay zero.
    unit: Array2<f64>,
    raw: Array2<f64>,
}

impl WordEmbeddingTable {
    /// Builds a table; later duplicates of a case-folded word are ignored.
    pub fn from_entries<I, S>(entries: I) -> Result<Self, AugmentError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        let mut flat = Vec::new();
        let mut dim = None;
        for (word, vec) in entries {
            let word = word.as_ref().to_lowercase();
            let d = *dim.get_or_insert(vec.len());
            if vec.len() != d || d == 0 {
                return Err(AugmentError::InvalidConfig(format!(
                    "vector for {word:?} has {} dims, expected {d}",
                    vec.len()
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(AugmentError::InvalidConfig(format!(
                    "non-finite value in vector for {word:?}"
                )));
            }
            if index.contains_key(&word) {
                continue;
            }
            index.insert(word.clone(), words.len());
            words.push(word);
            flat.extend(vec);
        }
        let dim = dim.unwrap_or(0);
        let raw = Array2::from_shape_vec((words.len(), dim), flat).expect("consistent dims");
        let mut unit = raw.clone();
        for mut row in unit.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        Ok(Self {
            words,
            index,
            unit,
            raw,
        })
    }

    /// Parses the plain-text word-vector layout: `token v1 v2 ... vd` per
    /// line. A leading `count dim` header line is skipped.
    pub fn parse(text: &str, source: &str) -> Result<Self, AugmentError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values: Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| AugmentError::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() {
                continue;
            }
            if values.is_empty() {
                return Err(AugmentError::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: "token without vector".into(),
                });
            }
            entries.push((word.to_string(), values));
        }
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AugmentError> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn vector(&self, token: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index
            .get(&token.to_lowercase())
            .map(|&i| self.raw.row(i))
    }

    /// Cosine of two in-vocabulary words.
    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let ia = *self.index.get(&a.to_lowercase())?;
        let ib = *self.index.get(&b.to_lowercase())?;
        Some(self.unit.row(ia).dot(&self.unit.row(ib)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PosTags {
    pub noun: bool,
    pub verb: bool,
    pub other: bool,
}

impl PosTags {
    pub const OTHER: PosTags = PosTags {
        noun: false,
        verb: false,
        other: true,
    };

    pub fn is_markable(&self) -> bool {
        self.noun || self.verb
    }

    /// Shares a noun or verb tag.
    pub fn compatible(&self, other: &PosTags) -> bool {
        (self.noun && other.noun) || (self.verb && other.verb)
    }
}

/// Static token to part-of-speech map; unknown tokens are `OTHER`.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    tags: HashMap<String, PosTags>,
}

impl PosLexicon {
    pub fn insert(&mut self, token: &str, tags: PosTags) {
        self.tags.insert(token.to_lowercase(), tags);
    }

    pub fn tags(&self, token: &str) -> PosTags {
        self.tags
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(PosTags::OTHER)
    }

    /// Lines of `token<TAB>TAG[,TAG...]` with tags NOUN, VERB or OTHER.
    pub fn parse(text: &str, source: &str) -> Result<Self, AugmentError> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| AugmentError::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let (token, tag_list) = line
                .split_once('\t')
                .ok_or_else(|| err("expected token<TAB>tags".into()))?;
            let mut tags = PosTags::default();
            for tag in tag_list.split(',') {
                match tag.trim().to_ascii_uppercase().as_str() {
                    "NOUN" => tags.noun = true,
                    "VERB" => tags.verb = true,
                    "OTHER" => tags.other = true,
                    other => return Err(err(format!("unknown tag {other:?}"))),
                }
            }
            lex.insert(token.trim(), tags);
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AugmentError> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    BestScore,
    SeededRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub sim_token_threshold: f64,
    pub sim_sentence_threshold: f64,
    pub max_candidates: usize,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sim_token_threshold: 0.65,
            sim_sentence_threshold: 0.75,
            max_candidates: 10,
            selection: Selection::BestScore,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, v) in [
            ("sim_token_threshold", self.sim_token_threshold),
            ("sim_sentence_threshold", self.sim_sentence_threshold),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(AugmentError::InvalidConfig(format!(
                    "{name} must lie in [-1, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Up to `max_candidates` other words with cosine at least the token
/// threshold, by descending cosine then lexicographically.
pub fn nearest_candidates(
    token: &str,
    table: &WordEmbeddingTable,
    cfg: &AugmentConfig,
) -> Vec<(String, f64)> {
    let Some(&i) = table.index.get(&token.to_lowercase()) else {
        return Vec::new();
    };
    let q = table.unit.row(i);
    if q.iter().all(|&v| v == 0.0) {
        return Vec::new();
    }
    let mut out: Vec<(String, f64)> = table
        .unit
        .rows()
        .into_iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, row)| (j, q.dot(&row)))
        .filter(|&(_, cos)| cos >= cfg.sim_token_threshold)
        .map(|(j, cos)| (table.words[j].clone(), cos))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(cfg.max_candidates);
    out
}

/// Sentence similarity used to gate replacements.
pub trait SentenceScorer {
    fn score(&self, original: &[String], candidate: &[String]) -> Result<f64, AugmentError>;
}

/// Cosine between mean-pooled in-vocabulary word vectors.
pub struct MeanPooledCosine<'a> {
    pub table: &'a WordEmbeddingTable,
}

impl MeanPooledCosine<'_> {
    fn pool(&self, tokens: &[String]) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.table.dim()];
        let mut n = 0usize;
        for t in tokens {
            if let Some(v) = self.table.vector(t) {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                n += 1;
            }
        }
        (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
    }
}

impl SentenceScorer for MeanPooledCosine<'_> {
    fn score(&self, original: &[String], candidate: &[String]) -> Result<f64, AugmentError> {
        let a = self
            .pool(original)
            .ok_or(AugmentError::NoVocabOverlapInput)?;
        let b = self
            .pool(candidate)
            .ok_or(AugmentError::NoVocabOverlapInput)?;
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(AugmentError::ZeroPooledVector);
        }
        Ok((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

pub fn sentence_score(
    original: &[String],
    candidate: &[String],
    table: &WordEmbeddingTable,
) -> Result<f64, AugmentError> {
    MeanPooledCosine { table }.score(original, candidate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub position: usize,
    pub original: String,
    pub replacement: String,
    pub token_cos: f64,
    pub sentence_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCaption {
    pub tokens: Vec<String>,
    pub log: Vec<Replacement>,
}

impl AugmentedCaption {
    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

/// Augments one caption with the mean-pooled cosine scorer.
pub fn augment_caption(
    caption: &str,
    table: &WordEmbeddingTable,
    lexicon: &PosLexicon,
    cfg: &AugmentConfig,
) -> Result<AugmentedCaption, AugmentError> {
    augment_caption_with(caption, table, lexicon, &MeanPooledCosine { table }, cfg)
}

/// Each candidate is scored as the original caption with only that token
/// swapped, so decisions do not depend on earlier replacements.
pub fn augment_caption_with(
    caption: &str,
    table: &WordEmbeddingTable,
    lexicon: &PosLexicon,
    scorer: &dyn SentenceScorer,
    cfg: &AugmentConfig,
) -> Result<AugmentedCaption, AugmentError> {
    cfg.validate()?;
    let original = tokenize(caption);
    if original.is_empty() {
        return Err(AugmentError::EmptyCaption);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = original.clone();
    let mut log = Vec::new();
    let mut probe = original.clone();
    for (pos, token) in original.iter().enumerate() {
        let tags = lexicon.tags(token);
        if !tags.is_markable() {
            continue;
        }
        let mut survivors: Vec<(String, f64, f64)> = Vec::new();
        let mut failed = false;
        for (cand, cos) in nearest_candidates(token, table, cfg) {
            if !lexicon.tags(&cand).compatible(&tags) {
                continue;
            }
            probe[pos] = cand.clone();
            let score = scorer.score(&original, &probe);
            probe[pos] = token.clone();
            match score {
                Ok(s) if s >= cfg.sim_sentence_threshold => survivors.push((cand, cos, s)),
                Ok(_) => {}
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed || survivors.is_empty() {
            continue;
        }
        let pick = match cfg.selection {
            Selection::BestScore => {
                // candidates arrive in (cosine desc, word asc) order, so the
                // first maximum is the deterministic choice
                let mut best = 0;
                for (i, s) in survivors.iter().enumerate() {
                    if s.2 > survivors[best].2 {
                        best = i;
                    }
                }
                best
            }
            Selection::SeededRandom => rng.random_range(0..survivors.len()),
        };
        let (replacement, token_cos, sentence_score) = survivors.swap_remove(pick);
        tokens[pos] = replacement.clone();
        log.push(Replacement {
            position: pos,
            original: token.clone(),
            replacement,
            token_cos,
            sentence_score,
        });
    }
    Ok(AugmentedCaption { tokens, log })
}

/// One log line of a corpus run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedReplacement {
    pub line: usize,
    #[serde(flatten)]
    pub replacement: Replacement,
}

/// Augments captions in parallel; caption `i` uses seed `cfg.seed ^ i`.
/// Empty lines pass through unchanged.
pub fn augment_corpus(
    captions: &[String],
    table: &WordEmbeddingTable,
    lexicon: &PosLexicon,
    cfg: &AugmentConfig,
) -> Result<(Vec<String>, Vec<LoggedReplacement>), AugmentError> {
    cfg.validate()?;
    let results: Vec<(String, Vec<Replacement>)> = captions
        .par_iter()
        .enumerate()
        .map(|(i, caption)| {
            if caption.trim().is_empty() {
                return Ok((caption.clone(), Vec::new()));
            }
            let local = AugmentConfig {
                seed: cfg.seed ^ i as u64,
                ..*cfg
            };
            let aug = augment_caption(caption, table, lexicon, &local)?;
            Ok((aug.text(), aug.log))
        })
        .collect::<Result<_, AugmentError>>()?;
    let mut out = Vec::with_capacity(captions.len());
    let mut log = Vec::new();
    for (line, (text, reps)) in results.into_iter().enumerate() {
        out.push(text);
        log.extend(
            reps.into_iter()
                .map(|replacement| LoggedReplacement { line, replacement }),
        );
    }
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    /// planes ~ aircraft (cos 0.9), road orthogonal-ish (cos 0.1).
    fn toy_table() -> WordEmbeddingTable {
        let c = 0.9f64;
        let s = (1.0 - c * c).sqrt();
        WordEmbeddingTable::from_entries(vec![
            ("planes", vec![1.0, 0.0, 0.0, 0.0]),
            ("aircraft", vec![c, s, 0.0, 0.0]),
            ("road", vec![0.1, 0.0, (1.0f64 - 0.01).sqrt(), 0.0]),
            ("many", vec![0.0, 0.0, 0.0, 1.0]),
        ])
        .unwrap()
    }

    fn toy_lexicon() -> PosLexicon {
        let noun = PosTags {
            noun: true,
            ..Default::default()
        };
        let mut lex = PosLexicon::default();
        lex.insert("planes", noun);
        lex.insert("aircraft", noun);
        lex.insert("road", noun);
        lex
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Many planes are parked."),
            toks(&["many", "planes", "are", "parked", "."])
        );
        assert!(tokenize("").is_empty());
        assert_eq!(
            detokenize(&tokenize("  Many   planes, (two)  are parked .")),
            "many planes, (two) are parked."
        );
    }

    #[test]
    fn candidates_from_toy_table() {
        let table = toy_table();
        let cfg = AugmentConfig::default();
        let c = nearest_candidates("planes", &table, &cfg);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].0, "aircraft");
        assert!((c[0].1 - 0.9).abs() < 1e-12);
        assert!(nearest_candidates("boats", &table, &cfg).is_empty());
        let unreachable = AugmentConfig {
            sim_token_threshold: 1.01,
            ..cfg
        };
        assert!(nearest_candidates("planes", &table, &unreachable).is_empty());
        assert!(unreachable.validate().is_err());
        assert!(nearest_candidates("PLANES", &table, &cfg).len() == 1);
    }

    #[test]
    fn sentence_scores() {
        let table = toy_table();
        let s = toks(&["many", "planes"]);
        assert!((sentence_score(&s, &s, &table).unwrap() - 1.0).abs() < 1e-15);
        // "planes" and "many" are orthogonal
        let o = sentence_score(&toks(&["planes"]), &toks(&["many"]), &table).unwrap();
        assert!(o.abs() < 1e-15);
        let single = sentence_score(&toks(&["planes"]), &toks(&["aircraft"]), &table).unwrap();
        assert!((single - table.cosine("planes", "aircraft").unwrap()).abs() < 1e-15);
        assert_eq!(
            sentence_score(&toks(&["xyz"]), &s, &table).unwrap_err(),
            AugmentError::NoVocabOverlapInput
        );
    }

    #[test]
    fn augment_toy_caption() {
        let table = toy_table();
        let lex = toy_lexicon();
        let out = augment_caption(
            "many planes are parked",
            &table,
            &lex,
            &AugmentConfig::default(),
        )
        .unwrap();
        assert_eq!(out.text(), "many aircraft are parked");
        assert_eq!(out.log.len(), 1);
        let r = &out.log[0];
        assert_eq!((r.position, r.original.as_str()), (1, "planes"));
        let expected = sentence_score(
            &toks(&["many", "planes", "are", "parked"]),
            &toks(&["many", "aircraft", "are", "parked"]),
            &table,
        )
        .unwrap();
        assert_eq!(r.sentence_score, expected);
    }

    #[test]
    fn unmarked_and_ceiling() {
        let table = toy_table();
        let lex = PosLexicon::default();
        let out = augment_caption(
            "many planes are parked",
            &table,
            &lex,
            &AugmentConfig::default(),
        )
        .unwrap();
        assert_eq!(out.text(), "many planes are parked");
        assert!(out.log.is_empty());
        let ceiling = AugmentConfig {
            sim_sentence_threshold: 1.0,
            ..Default::default()
        };
        let out =
            augment_caption("many planes are parked", &table, &toy_lexicon(), &ceiling).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(
            augment_caption("  ", &table, &lex, &AugmentConfig::default()).unwrap_err(),
            AugmentError::EmptyCaption
        );
    }

    #[test]
    fn pos_filter() {
        let table = toy_table();
        let mut lex = toy_lexicon();
        lex.insert(
            "aircraft",
            PosTags {
                verb: true,
                ..Default::default()
            },
        );
        let out = augment_caption("many planes", &table, &lex, &AugmentConfig::default()).unwrap();
        assert!(out.log.is_empty());
    }

    #[test]
    fn parse_resources() {
        let t = WordEmbeddingTable::parse("2 3\nPlanes 1 0 0\nroad 0 1 0\n", "mem").unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert!(t.contains("planes"));
        assert!(WordEmbeddingTable::parse("a 1 2\nb 1\n", "mem").is_err());
        let lex = PosLexicon::parse("planes\tNOUN\npark\tNOUN,VERB\n", "mem").unwrap();
        assert!(lex.tags("park").noun && lex.tags("park").verb);
        assert_eq!(lex.tags("the"), PosTags::OTHER);
        assert!(PosLexicon::parse("x\tADJ\n", "mem").is_err());
    }
}
