//! Semantic tokens for the three query hierarchies: the holistic sentence
//! embedding, filtered keyword embeddings, and scene-attribute tokens built
//! from keyframe detections.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::stable_hash;
use crate::numerics::{linear, DenseMatrix};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Words removed before building keyword trajectories.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopSet(BTreeSet<String>);

impl StopSet {
    /// Parses the stop-word file format: one token per line, `#` comments,
    /// blank lines ignored, tokens lowercased.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    /// The bundled list (articles, prepositions, auxiliaries, pronouns).
    pub fn default_list() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<S> for StopSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(|s| s.as_ref().to_lowercase()).collect())
    }
}

/// Splits on whitespace and punctuation, lowercases, and drops stop words.
/// Returns `(words, keywords)`; keyword order and duplicates are preserved.
pub fn tokenize_and_filter(text: &str, stop: &StopSet) -> Result<(Vec<String>, Vec<String>)> {
    if text.trim().is_empty() {
        return Err(Error::Input("reference text is empty".into()));
    }
    let words: Vec<String> = text
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .map(|w| w.trim_matches(|c| c == '\'' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    if words.is_empty() {
        return Err(Error::Input(format!("reference text `{text}` has no words")));
    }
    let keywords = words.iter().filter(|w| !stop.contains(w)).cloned().collect();
    Ok((words, keywords))
}

/// Deterministic unit vector for `word`: a ChaCha stream seeded from the
/// word's bytes and `seed`, `dim` standard-normal draws, L2-normalized.
pub fn synthetic_encode(word: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::Config(format!("encoder dim must be at least 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(word.as_bytes(), seed));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    Ok(v)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Text encoder adapter. The default sentence embedding is the renormalized
/// mean of the word vectors.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_word(&self, word: &str) -> Result<Vec<f64>>;

    fn encode_sentence(&self, words: &[String]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        for (index, w) in words.iter().enumerate() {
            let v = self.encode_word(w).map_err(|e| Error::Adapter {
                index,
                message: e.to_string(),
            })?;
            acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
        }
        let n = words.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        normalize(&mut acc);
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_word(&self, word: &str) -> Result<Vec<f64>> {
        synthetic_encode(word, self.dim, self.seed)
    }
}

/// Precomputed embeddings, one `word v1 v2 ... vd` line per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEncoder {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl TableEncoder {
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut table = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default().to_lowercase();
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        field: word.clone(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        field: word,
                        message: format!("expected {d} values, found {}", values.len()),
                    })
                }
                _ => {}
            }
            table.insert(word, values);
        }
        let dim = dim.ok_or_else(|| Error::Input("embedding table is empty".into()))?;
        if dim < 2 {
            return Err(Error::Config(format!("embedding dim must be at least 2, got {dim}")));
        }
        Ok(Self { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl TextEncoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_word(&self, word: &str) -> Result<Vec<f64>> {
        self.table
            .get(word)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no embedding for `{word}`")))
    }
}

/// Reference text with its holistic and keyword embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBundle {
    pub raw_text: String,
    pub words: Vec<String>,
    pub keywords: Vec<String>,
    /// `N_R × d`; one row for the synthetic encoder.
    pub holistic: DenseMatrix,
    /// `N̂_K × d`; zero rows when every word was a stop word.
    pub keyword_embeddings: DenseMatrix,
}

pub fn embed_reference(
    text: &str,
    stop: &StopSet,
    encoder: &dyn TextEncoder,
) -> Result<ReferenceBundle> {
    let (words, keywords) = tokenize_and_filter(text, stop)?;
    let holistic = DenseMatrix::row_vector(&encoder.encode_sentence(&words)?);
    let mut keyword_embeddings = DenseMatrix::zeros(keywords.len(), encoder.dim());
    for (index, kw) in keywords.iter().enumerate() {
        let v = encoder.encode_word(kw).map_err(|e| Error::Adapter {
            index,
            message: e.to_string(),
        })?;
        if v.len() != encoder.dim() {
            return Err(Error::Adapter {
                index,
                message: format!("expected {} values, got {}", encoder.dim(), v.len()),
            });
        }
        keyword_embeddings.row_mut(index).copy_from_slice(&v);
    }
    Ok(ReferenceBundle {
        raw_text: text.to_string(),
        words,
        keywords,
        holistic,
        keyword_embeddings,
    })
}

/// A keyframe detection. Boxes are `[x1, y1, x2, y2]`, normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub category: String,
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        if !self.bbox.iter().all(|v| (0.0..=1.0).contains(v)) || !(x1 < x2 && y1 < y2) {
            return Err(Error::Input(format!("malformed detection box {:?}", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Input(format!(
                "detection confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAttributeToken {
    pub vector: Vec<f64>,
    pub source_detection: usize,
}

/// Keeps detections at or above `threshold`, most confident first (stable on
/// ties), at most `max_count`, and projects `[encode(category) ‖ bbox]`
/// through `P_BS = (weight, bias)`.
pub fn build_scene_attribute_tokens(
    detections: &[Detection],
    encoder: &dyn TextEncoder,
    weight: &DenseMatrix,
    bias: &[f64],
    threshold: f64,
    max_count: usize,
) -> Result<Vec<SceneAttributeToken>> {
    let mut kept: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.confidence >= threshold)
        .collect();
    kept.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    kept.truncate(max_count);

    let expected = encoder.dim() + 4;
    if !kept.is_empty() && weight.rows() != expected {
        return Err(Error::dim("P_BS", weight.shape(), (expected, weight.cols())));
    }
    kept.into_iter()
        .map(|(index, det)| {
            let mut input = encoder.encode_word(&det.category)?;
            input.extend_from_slice(&det.bbox);
            let out = linear(&DenseMatrix::row_vector(&input), weight, bias)?;
            Ok(SceneAttributeToken {
                vector: out.into_data(),
                source_detection: index,
            })
        })
        .collect()
}
