//! Bidirectional retrieval evaluation with R@k.
//!
//! Ranks are pessimistic: a candidate's rank is one plus the number of other
//! candidates scoring at least as high. With several positives a query
//! counts its best-ranked one.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aux_caption::{caption_score_matrix, fuse_scores, FusionConfig, TextSource};
use crate::embedding_io::{Bundle, Split};
use crate::error::{Error, Result};
use crate::hierarchy::{MultiGranularityAudio, MultiGranularityText};
use crate::model::{caption_index, captions_for, Model};
use crate::similarity::{ScoreConfig, ScoreMode};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Rank of candidate `c` in `row` (1-based, ties counted against it).
pub fn pessimistic_rank(row: &[f64], c: usize) -> usize {
    let s = row[c];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| j != c && x >= s)
        .count()
}

/// Best rank over `positives`.
pub fn best_rank(row: &[f64], positives: &[usize]) -> Result<usize> {
    if positives.is_empty() {
        return Err(Error::usage("a query needs at least one positive"));
    }
    positives
        .iter()
        .map(|&p| {
            if p >= row.len() {
                Err(Error::usage(format!(
                    "positive {p} outside {} candidates",
                    row.len()
                )))
            } else {
                Ok(pessimistic_rank(row, p))
            }
        })
        .try_fold(usize::MAX, |best, r| r.map(|r| best.min(r)))
}

/// Fraction of queries (rows of `scores`) whose best positive ranks `<= k`.
pub fn recall_at_k(scores: &Tensor, relevance: &[Vec<usize>], k: usize) -> Result<f64> {
    Ok(recalls(scores, relevance, &[k])?[0])
}

/// [`recall_at_k`] for several `k` from one ranking pass.
pub fn recalls(scores: &Tensor, relevance: &[Vec<usize>], ks: &[usize]) -> Result<Vec<f64>> {
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::usage("k must be >= 1"));
    }
    let (q, c) = scores.dims2()?;
    if relevance.len() != q {
        return Err(Error::usage(format!(
            "{q} queries but {} relevance lists",
            relevance.len()
        )));
    }
    if q == 0 || c == 0 {
        return Err(Error::usage("empty score matrix"));
    }
    if !scores.is_finite() {
        return Err(Error::data("score matrix contains non-finite values"));
    }
    let ranks = (0..q)
        .map(|i| best_rank(scores.row(i), &relevance[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64)
        .collect())
}

/// Query/candidate layout of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSet {
    /// Audio ids in first-appearance order.
    pub audio_ids: Vec<String>,
    pub text_ids: Vec<String>,
    /// Per text query, indices into `audio_ids`.
    pub text_to_audio: Vec<Vec<usize>>,
    /// Per audio query, indices into `text_ids`.
    pub audio_to_text: Vec<Vec<usize>>,
}

pub fn retrieval_set(bundle: &Bundle, split: Split) -> Result<RetrievalSet> {
    let pairs = bundle.split_pairs(split);
    if pairs.is_empty() {
        return Err(Error::data(format!("split '{}' is empty", split.as_str())));
    }
    let mut audio: HashMap<&str, usize> = HashMap::new();
    let mut text: HashMap<&str, usize> = HashMap::new();
    let mut set = RetrievalSet {
        audio_ids: Vec::new(),
        text_ids: Vec::new(),
        text_to_audio: Vec::new(),
        audio_to_text: Vec::new(),
    };
    for p in &pairs {
        let a = *audio.entry(&p.audio_id).or_insert_with(|| {
            set.audio_ids.push(p.audio_id.clone());
            set.audio_to_text.push(Vec::new());
            set.audio_ids.len() - 1
        });
        let t = *text.entry(&p.text_id).or_insert_with(|| {
            set.text_ids.push(p.text_id.clone());
            set.text_to_audio.push(Vec::new());
            set.text_ids.len() - 1
        });
        set.audio_to_text[a].push(t);
        set.text_to_audio[t].push(a);
    }
    Ok(set)
}

/// Detached hierarchies of every item in a [`RetrievalSet`].
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub audio: Vec<MultiGranularityAudio<Tensor>>,
    pub text: Vec<MultiGranularityText<Tensor>>,
    /// Projected caption cls row per audio item, if it has a caption.
    pub captions: Vec<Option<Tensor>>,
}

pub fn encode_split(model: &Model, bundle: &Bundle, set: &RetrievalSet) -> Result<EncodedSplit> {
    if bundle.dim() != model.config.dim() {
        return Err(Error::data(format!(
            "bundle dimension {} does not match model dimension {}",
            bundle.dim(),
            model.config.dim()
        )));
    }
    let index = caption_index(bundle);
    let audio = set
        .audio_ids
        .par_iter()
        .map(|id| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let cap = index.get(id).map(String::as_str);
            Ok(bound.audio_item(bundle, id, cap)?.detach())
        })
        .collect::<Result<Vec<_>>>()?;
    let text = set
        .text_ids
        .par_iter()
        .map(|id| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            Ok(bound
                .text_item(bundle, id, TextSource::Text)?
                .hierarchy
                .detach())
        })
        .collect::<Result<Vec<_>>>()?;
    let captions = captions_for(bundle, &set.audio_ids)?
        .into_iter()
        .map(|c| {
            c.map(|c| {
                let tape = Tape::new();
                Ok(model.bind(&tape).caption_cls(&c)?.value())
            })
            .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedSplit {
        audio,
        text,
        captions,
    })
}

fn unit_rows(t: &Tensor) -> Tensor {
    t.l2_normalize_rows().0
}

fn ci_of_units(a: &Tensor, b: &Tensor) -> Result<f64> {
    let s = a.matmul(&b.transpose()?)?;
    let (m, n) = s.dims2()?;
    let col_max: f64 = (0..n)
        .map(|j| {
            (0..m)
                .map(|i| s.get2(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / n as f64;
    let row_max: f64 = (0..m)
        .map(|i| s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / m as f64;
    Ok(0.5 * (col_max + row_max))
}

/// `A×T` matrix of retrieval scores; entry `(i, j)` equals
/// `eval_score_value(audio[i], text[j], config)`.
pub fn score_matrix(
    audio: &[MultiGranularityAudio<Tensor>],
    text: &[MultiGranularityText<Tensor>],
    config: &ScoreConfig,
) -> Result<Tensor> {
    config.validate()?;
    let na: Vec<_> = audio
        .iter()
        .map(|a| {
            (
                unit_rows(&a.frames),
                unit_rows(&a.segments),
                unit_rows(&a.clip),
            )
        })
        .collect();
    let nt: Vec<_> = text
        .iter()
        .map(|t| {
            (
                unit_rows(&t.words),
                unit_rows(&t.phrases),
                unit_rows(&t.sentence),
            )
        })
        .collect();
    let rows = na
        .par_iter()
        .map(|(af, as_, ac)| {
            nt.iter()
                .map(|(tw, tp, ts)| {
                    let cs = ac
                        .matmul(&ts.transpose()?)?
                        .item()
                        .ok_or_else(|| Error::usage("clip and sentence must be single rows"))?;
                    Ok(match config.mode {
                        ScoreMode::ClipSentenceOnly => cs,
                        ScoreMode::HciCombined => {
                            cs + config.alpha * ci_of_units(af, tw)?
                                + config.beta * ci_of_units(as_, tp)?
                        }
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(
        vec![audio.len(), text.len()],
        rows.into_iter().flatten().collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub text_to_audio: DirectionReport,
    pub audio_to_text: DirectionReport,
    pub score_mode: ScoreMode,
    /// Effective fusion weight; 0 when fusion is disabled.
    pub fusion_lambda: f64,
}

fn direction(scores: &Tensor, relevance: &[Vec<usize>]) -> Result<DirectionReport> {
    let r = recalls(scores, relevance, &DEFAULT_KS)?;
    Ok(DirectionReport {
        r1: r[0],
        r5: r[1],
        r10: r[2],
        queries: relevance.len(),
    })
}

/// Fused `A×T` score matrix of a split.
pub fn split_scores(
    encoded: &EncodedSplit,
    score: &ScoreConfig,
    fusion: &FusionConfig,
) -> Result<Tensor> {
    fusion.validate()?;
    let s = score_matrix(&encoded.audio, &encoded.text, score)?;
    if !fusion.enabled {
        return Ok(s);
    }
    if encoded.captions.iter().all(Option::is_none) {
        return Err(Error::data(
            "score fusion is enabled but no audio item has a caption",
        ));
    }
    let text_cls = encoded
        .text
        .iter()
        .map(|t| {
            t.cls
                .clone()
                .ok_or_else(|| Error::data("score fusion needs a cls embedding for every text"))
        })
        .collect::<Result<Vec<_>>>()?;
    let tc = caption_score_matrix(&text_cls, &encoded.captions)?.transpose()?;
    fuse_scores(&s, &tc, fusion)
}

pub fn evaluate(
    model: &Model,
    bundle: &Bundle,
    split: Split,
    score: &ScoreConfig,
    fusion: &FusionConfig,
) -> Result<EvalReport> {
    let set = retrieval_set(bundle, split)?;
    let encoded = encode_split(model, bundle, &set)?;
    let s = split_scores(&encoded, score, fusion)?;
    Ok(EvalReport {
        split,
        text_to_audio: direction(&s.transpose()?, &set.text_to_audio)?,
        audio_to_text: direction(&s, &set.audio_to_text)?,
        score_mode: score.mode,
        fusion_lambda: if fusion.enabled { fusion.lambda } else { 0.0 },
    })
}
