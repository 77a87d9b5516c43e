//! Cosine similarity and the symmetric max-mean cross-modal interaction score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{MultiGranularityAudio, MultiGranularityText};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `cos(A^c, T^s)`.
    ClipSentenceOnly,
    /// `cos(A^c, T^s) + α·CI(A^f, T^w) + β·CI(A^s, T^p)`.
    HciCombined,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::ClipSentenceOnly => "clip_sentence_only",
            ScoreMode::HciCombined => "hci_combined",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub tau: f64,
    pub mode: ScoreMode,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            tau: DEFAULT_TAU,
            mode: ScoreMode::HciCombined,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::usage(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_pair(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::usage(format!(
            "{what}: incompatible shapes {sa:?} and {sb:?}"
        )));
    }
    Ok(())
}

/// `N×M` matrix of row cosines, norms clamped below at 1e-12.
pub fn cosine_matrix<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_pair(&a, &b, "cosine")?;
    a.l2_normalize()?.matmul(b.l2_normalize()?.t()?)
}

/// Cosine of two `1×D` vectors as a `1×1` node; zero vectors give 0.
pub fn cosine<'t>(u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    if u.shape().first() != Some(&1) || v.shape().first() != Some(&1) {
        return Err(Error::usage(format!(
            "cosine expects 1×D vectors, got {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    cosine_matrix(u, v)
}

/// `(mean_n max_m S[m,n] + mean_m max_n S[m,n]) / 2` with `S` the cosine
/// matrix between the rows of `a` and of `b`.
pub fn ci<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let s = cosine_matrix(a, b)?;
    let b_to_a = s.max(0)?.mean(1)?;
    let a_to_b = s.max(1)?.mean(0)?;
    b_to_a.add(a_to_b)?.scale(0.5)
}

/// Entry `(i, j)` is `ci(a[i], b[j])`.
pub fn pairwise_ci_matrix<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Result<Var<'t>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::usage(format!(
            "pairwise CI needs equal nonempty batches, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let rows = a
        .iter()
        .map(|&ai| {
            let row: Vec<Var<'t>> = b.iter().map(|&bj| ci(ai, bj)).collect::<Result<_>>()?;
            Var::concat(&row, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&rows, 0)
}

/// Retrieval score of an audio/text pair under `config.mode`.
pub fn eval_score<'t>(
    audio: &MultiGranularityAudio<Var<'t>>,
    text: &MultiGranularityText<Var<'t>>,
    config: &ScoreConfig,
) -> Result<Var<'t>> {
    let cs = cosine(audio.clip, text.sentence)?;
    match config.mode {
        ScoreMode::ClipSentenceOnly => Ok(cs),
        ScoreMode::HciCombined => cs
            .add(ci(audio.frames, text.words)?.scale(config.alpha)?)?
            .add(ci(audio.segments, text.phrases)?.scale(config.beta)?),
    }
}

/// [`cosine`] on plain tensors.
pub fn cosine_value(u: &Tensor, v: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(cosine(tape.constant(u.clone()), tape.constant(v.clone()))?.item())
}

/// [`ci`] on plain tensors.
pub fn ci_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(ci(tape.constant(a.clone()), tape.constant(b.clone()))?.item())
}

/// [`eval_score`] on detached hierarchies.
pub fn eval_score_value(
    audio: &MultiGranularityAudio<Tensor>,
    text: &MultiGranularityText<Tensor>,
    config: &ScoreConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let a = MultiGranularityAudio {
        frames: c(&audio.frames),
        segments: c(&audio.segments),
        clip: c(&audio.clip),
    };
    let t = MultiGranularityText {
        words: c(&text.words),
        phrases: c(&text.phrases),
        sentence: c(&text.sentence),
        cls: None,
    };
    Ok(eval_score(&a, &t, config)?.item())
}
