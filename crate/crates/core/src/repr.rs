//! Cross-language representation geometry: per-layer language vectors from
//! last-token hidden states, cosine similarity matrices, and the per-layer
//! averaged similarity profile.
//!
//! A language's vector at a layer is the mean, over that language's
//! documents, of the hidden state at the final token position. Hidden-state
//! labels follow the model's residual-stream convention: "emb" is the
//! embedding output, intermediate labels are post-residual block outputs,
//! and the last block's label reads the state after the final norm.

use std::io::Write;

use rayon::prelude::*;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, Parameters};
use crate::tokenizer::Tokenizer;

/// Which hidden state a language vector reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprLayer {
    /// Embedding output, labeled "emb".
    Embedding,
    /// Residual-stream output of block `i`, labeled "i". The last block's
    /// state is taken after the final norm.
    Block(usize),
}

impl ReprLayer {
    pub fn label(&self) -> String {
        match self {
            ReprLayer::Embedding => "emb".to_string(),
            ReprLayer::Block(i) => i.to_string(),
        }
    }

    /// "emb" followed by every block, in reading order.
    pub fn all(n_layers: usize) -> Vec<ReprLayer> {
        let mut out = vec![ReprLayer::Embedding];
        out.extend((0..n_layers).map(ReprLayer::Block));
        out
    }

    /// Position in [`ReprLayer::all`]'s ordering.
    fn slot(&self) -> usize {
        match self {
            ReprLayer::Embedding => 0,
            ReprLayer::Block(i) => i + 1,
        }
    }
}

/// All layer labels in profile order.
pub fn layer_labels(n_layers: usize) -> Vec<String> {
    ReprLayer::all(n_layers).iter().map(|l| l.label()).collect()
}

/// One language's mean last-token state at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageRepresentation {
    pub lang: String,
    pub layer: String,
    pub vector: Vec<f64>,
    /// True when the vector has zero norm; similarities over it are
    /// undefined.
    pub degenerate: bool,
}

/// Last-token hidden states of one document, one `[d_model]` vector per
/// label in [`ReprLayer::all`] order.
fn doc_states(params: &Parameters, cfg: &ModelConfig, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
    let out = forward(params, cfg, tokens)?;
    let last = tokens.len() - 1;
    let mut states = Vec::with_capacity(cfg.n_layers + 1);
    states.push(out.cache.embedding.row(last).to_vec());
    for l in 0..cfg.n_layers {
        if l + 1 == cfg.n_layers {
            states.push(out.cache.final_norm.row(last).to_vec());
        } else {
            states.push(out.cache.layers[l].out.row(last).to_vec());
        }
    }
    Ok(states)
}

fn encode_docs(tok: &Tokenizer, cfg: &ModelConfig, docs: &[&str]) -> Result<Vec<Vec<u32>>> {
    if docs.is_empty() {
        return Err(Error::InvalidInput(
            "no documents to build a language vector from".into(),
        ));
    }
    if tok.vocab_size() > cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer vocab {} exceeds model vocab {}",
            tok.vocab_size(),
            cfg.vocab_size
        )));
    }
    docs.iter()
        .enumerate()
        .map(|(i, text)| {
            let mut ids = tok.encode(text.as_bytes());
            // Over-long documents are truncated; "last token" then means
            // the last one inside the context window.
            ids.truncate(cfg.context_len);
            if ids.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "document {i} encodes to zero tokens"
                )));
            }
            Ok(ids)
        })
        .collect()
}

/// Mean last-token states over documents, one vector per layer label.
/// Documents fan out in parallel; the mean is accumulated in document
/// order, so results do not depend on the worker count.
fn mean_states(
    params: &Parameters,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    docs: &[&str],
) -> Result<Vec<Vec<f64>>> {
    let encoded = encode_docs(tok, cfg, docs)?;
    let per_doc = encoded
        .par_iter()
        .map(|ids| doc_states(params, cfg, ids))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = per_doc[0].clone();
    for doc in &per_doc[1..] {
        for (m, s) in mean.iter_mut().zip(doc) {
            for (mv, sv) in m.iter_mut().zip(s) {
                *mv += sv;
            }
        }
    }
    let inv = 1.0 / per_doc.len() as f64;
    for m in &mut mean {
        for v in m {
            *v *= inv;
        }
    }
    Ok(mean)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean last-token state of one language's documents at one layer.
pub fn language_vector(
    params: &Parameters,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    lang: &str,
    docs: &[&str],
    layer: ReprLayer,
) -> Result<LanguageRepresentation> {
    if let ReprLayer::Block(i) = layer {
        if i >= cfg.n_layers {
            return Err(Error::IndexOutOfRange {
                what: "representation layer",
                index: i,
                size: cfg.n_layers,
            });
        }
    }
    let states = mean_states(params, cfg, tok, docs)?;
    let vector = states[layer.slot()].clone();
    let degenerate = norm(&vector) == 0.0;
    Ok(LanguageRepresentation {
        lang: lang.to_string(),
        layer: layer.label(),
        vector,
        degenerate,
    })
}

/// Cosine similarity of two nonzero vectors, clamped into [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput(
            "cosine similarity of a zero vector is undefined".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise language similarities at one layer. Symmetric with a unit
/// diagonal by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub layer: String,
    pub languages: Vec<String>,
    /// `values[i][j]` = similarity of languages i and j.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Mean of the strictly-off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.languages.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.values[i][j];
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }
}

/// Similarity matrices for every layer label plus the per-layer averages.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    pub languages: Vec<String>,
    /// Layer labels in profile order: "emb", then each block.
    pub labels: Vec<String>,
    /// One matrix per label, aligned with `labels`.
    pub matrices: Vec<SimilarityMatrix>,
    /// Mean off-diagonal similarity per label, aligned with `labels`.
    pub mean_similarity: Vec<f64>,
}

impl SimilarityProfile {
    /// The middle block, the default layer for cross-language summaries.
    pub fn mid_block(n_layers: usize) -> ReprLayer {
        ReprLayer::Block(n_layers / 2)
    }

    pub fn matrix(&self, layer: ReprLayer) -> &SimilarityMatrix {
        &self.matrices[layer.slot()]
    }

    pub fn mean_at(&self, layer: ReprLayer) -> f64 {
        self.mean_similarity[layer.slot()]
    }
}

/// Language vectors at every layer in one pass over the corpus, then all
/// pairwise cosines. Languages keep the corpus's column order.
pub fn similarity_profile(
    params: &Parameters,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    parallel: &ParallelCorpus,
) -> Result<SimilarityProfile> {
    let languages: Vec<String> = parallel.languages().to_vec();
    if languages.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "similarity profile needs at least 2 languages, got {}",
            languages.len()
        )));
    }
    // vectors[lang][label] -> [d_model]
    let mut vectors = Vec::with_capacity(languages.len());
    for lang in &languages {
        vectors.push(mean_states(params, cfg, tok, &parallel.column(lang)?)?);
    }
    let labels = layer_labels(cfg.n_layers);
    let mut matrices = Vec::with_capacity(labels.len());
    let mut mean_similarity = Vec::with_capacity(labels.len());
    for (slot, label) in labels.iter().enumerate() {
        let n = languages.len();
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            values[i][i] = 1.0;
            for j in i + 1..n {
                let s = cosine_similarity(&vectors[i][slot], &vectors[j][slot])?;
                values[i][j] = s;
                values[j][i] = s;
            }
        }
        let matrix = SimilarityMatrix {
            layer: label.clone(),
            languages: languages.clone(),
            values,
        };
        mean_similarity.push(matrix.mean_off_diagonal());
        matrices.push(matrix);
    }
    Ok(SimilarityProfile {
        languages,
        labels,
        matrices,
        mean_similarity,
    })
}

/// CSV of one layer's matrix: languages as header row and leading column.
pub fn write_similarity_csv(m: &SimilarityMatrix, w: &mut dyn Write) -> std::io::Result<()> {
    write!(w, "lang")?;
    for lang in &m.languages {
        write!(w, ",{lang}")?;
    }
    writeln!(w)?;
    for (lang, row) in m.languages.iter().zip(&m.values) {
        write!(w, "{lang}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Two-column CSV of the per-layer averaged similarity, "emb" row first.
pub fn write_layer_profile_csv(p: &SimilarityProfile, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "layer,mean_similarity")?;
    for (label, mean) in p.labels.iter().zip(&p.mean_similarity) {
        writeln!(w, "{label},{mean}")?;
    }
    Ok(())
}
