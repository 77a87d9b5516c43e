//! Symmetric contrastive losses over in-batch similarity matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{MultiGranularityAudio, MultiGranularityText};
use crate::similarity::{
    cosine_matrix, pairwise_ci_matrix, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_TAU,
};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub enable_fw: bool,
    pub enable_sp: bool,
    pub enable_tc: bool,
    /// Weight on the text-caption term in the total.
    pub tc_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            enable_fw: true,
            enable_sp: true,
            enable_tc: false,
            tc_weight: 1.0,
        }
    }
}

impl LossConfig {
    /// Clip-sentence NT-Xent only.
    pub fn ntxent() -> Self {
        LossConfig {
            enable_fw: false,
            enable_sp: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::usage(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.tc_weight >= 0.0) {
            return Err(Error::usage("alpha, beta and tc_weight must be >= 0"));
        }
        Ok(())
    }

    pub fn uses_hierarchy(&self) -> bool {
        self.enable_fw || self.enable_sp
    }
}

/// Symmetric NT-Xent of an `N×N` similarity matrix whose diagonal holds the
/// positive pairs.
///
/// Each direction is `Σ_i [log Σ_j exp((S_ij − m_i)/τ) − (S_ii − m_i)/τ]`
/// with `m_i` the row (column) maximum held constant, so nothing overflows
/// and the positive term never cancels against a large offset.
pub fn nt_xent<'t>(s: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::usage(format!(
            "nt_xent needs a square matrix, got {shape:?}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::usage(format!("tau must be > 0, got {tau}")));
    }
    let n = shape[0];
    let tape = s.tape();
    let logits = s.scale(1.0 / tau)?;
    let eye = tape.constant(Tensor::eye(n));
    let values = logits.value();

    let direction = |reduce: usize, across: usize| -> Result<Var<'t>> {
        let max = tape.constant(values.max_axis(reduce)?.0);
        let shifted = logits.sub(max)?;
        let lse = shifted.exp()?.sum(reduce)?.ln()?;
        let diag = shifted.mul(eye)?.sum(reduce)?;
        lse.sub(diag)?.sum(across)
    };
    let rows = direction(1, 0)?;
    let cols = direction(0, 1)?;
    rows.add(cols)?.scale(1.0 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    FrameWord,
    SegmentPhrase,
}

/// NT-Xent over the CI matrix at one granularity.
pub fn granular_loss<'t>(
    level: Granularity,
    audio: &[MultiGranularityAudio<Var<'t>>],
    text: &[MultiGranularityText<Var<'t>>],
    tau: f64,
) -> Result<Var<'t>> {
    let (a, t): (Vec<_>, Vec<_>) = match level {
        Granularity::FrameWord => (
            audio.iter().map(|x| x.frames).collect(),
            text.iter().map(|x| x.words).collect(),
        ),
        Granularity::SegmentPhrase => (
            audio.iter().map(|x| x.segments).collect(),
            text.iter().map(|x| x.phrases).collect(),
        ),
    };
    nt_xent(pairwise_ci_matrix(&a, &t)?, tau)
}

/// NT-Xent over the clip-sentence cosine matrix.
pub fn clip_sentence_loss<'t>(
    audio: &[MultiGranularityAudio<Var<'t>>],
    text: &[MultiGranularityText<Var<'t>>],
    tau: f64,
) -> Result<Var<'t>> {
    if audio.len() != text.len() || audio.is_empty() {
        return Err(Error::usage(format!(
            "clip-sentence loss needs equal nonempty batches, got {} and {}",
            audio.len(),
            text.len()
        )));
    }
    let clips: Vec<_> = audio.iter().map(|a| a.clip).collect();
    let sentences: Vec<_> = text.iter().map(|t| t.sentence).collect();
    nt_xent(
        cosine_matrix(Var::concat(&clips, 0)?, Var::concat(&sentences, 0)?)?,
        tau,
    )
}

/// NT-Xent over the cosine matrix of text and caption cls rows (`N×D` each).
pub fn text_caption_loss<'t>(text_cls: Var<'t>, caption_cls: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if text_cls.shape()[0] != caption_cls.shape()[0] {
        return Err(Error::usage(format!(
            "text/caption batches differ: {:?} vs {:?}",
            text_cls.shape(),
            caption_cls.shape()
        )));
    }
    nt_xent(cosine_matrix(text_cls, caption_cls)?, tau)
}

/// Loss nodes for one batch; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub cs: Var<'t>,
    pub fw: Option<Var<'t>>,
    pub sp: Option<Var<'t>>,
    pub tc: Option<Var<'t>>,
    /// Audio-text objective: `cs + α·fw + β·sp` over the enabled terms.
    pub at: Var<'t>,
    pub total: Var<'t>,
}

/// Scalar values of a [`LossTerms`]; disabled terms read 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cs: f64,
    pub l_fw: f64,
    pub l_sp: f64,
    pub l_tc: f64,
    pub l_at: f64,
    pub l_total: f64,
    pub fw_enabled: bool,
    pub sp_enabled: bool,
    pub tc_enabled: bool,
}

impl LossBreakdown {
    /// `l_at` and `l_total` recomputed from the parts.
    pub fn combine(&self, config: &LossConfig) -> (f64, f64) {
        let mut at = self.l_cs;
        if self.fw_enabled {
            at += config.alpha * self.l_fw;
        }
        if self.sp_enabled {
            at += config.beta * self.l_sp;
        }
        let total = if self.tc_enabled {
            at + config.tc_weight * self.l_tc
        } else {
            at
        };
        (at, total)
    }

    /// Mean of several breakdowns sharing the same enabled terms.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let Some(first) = items.first() else {
            return LossBreakdown::default();
        };
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            l_cs: avg(|b| b.l_cs),
            l_fw: avg(|b| b.l_fw),
            l_sp: avg(|b| b.l_sp),
            l_tc: avg(|b| b.l_tc),
            l_at: avg(|b| b.l_at),
            l_total: avg(|b| b.l_total),
            fw_enabled: first.fw_enabled,
            sp_enabled: first.sp_enabled,
            tc_enabled: first.tc_enabled,
        }
    }
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        let v = |x: Option<Var<'_>>| x.map_or(0.0, |x| x.item());
        LossBreakdown {
            l_cs: self.cs.item(),
            l_fw: v(self.fw),
            l_sp: v(self.sp),
            l_tc: v(self.tc),
            l_at: self.at.item(),
            l_total: self.total.item(),
            fw_enabled: self.fw.is_some(),
            sp_enabled: self.sp.is_some(),
            tc_enabled: self.tc.is_some(),
        }
    }
}

/// Everything the loss family needs from one batch.
#[derive(Clone, Debug, Default)]
pub struct LossBatch<'t> {
    pub audio: Vec<MultiGranularityAudio<Var<'t>>>,
    pub text: Vec<MultiGranularityText<Var<'t>>>,
    /// Per item: whether the text side has word-level rows. Items without
    /// them (cls-only captions used as text) join the clip-sentence term only.
    pub fine_grained: Vec<bool>,
    /// Text cls rows for the text-caption term.
    pub tc_text: Vec<Var<'t>>,
    /// Caption cls rows aligned with `tc_text`; `None` where missing.
    pub tc_caption: Vec<Option<Var<'t>>>,
}

impl<'t> LossBatch<'t> {
    pub fn new(
        audio: Vec<MultiGranularityAudio<Var<'t>>>,
        text: Vec<MultiGranularityText<Var<'t>>>,
    ) -> Self {
        let fine_grained = vec![true; audio.len()];
        LossBatch {
            audio,
            text,
            fine_grained,
            tc_text: Vec::new(),
            tc_caption: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }
}

fn granular_subset<'t>(level: Granularity, batch: &LossBatch<'t>, tau: f64) -> Result<Var<'t>> {
    if batch.fine_grained.iter().all(|&f| f) {
        return granular_loss(level, &batch.audio, &batch.text, tau);
    }
    let keep: Vec<usize> = (0..batch.len())
        .filter(|&i| batch.fine_grained[i])
        .collect();
    if keep.is_empty() {
        let tape = batch.audio[0].clip.tape();
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let audio: Vec<_> = keep.iter().map(|&i| batch.audio[i].clone()).collect();
    let text: Vec<_> = keep.iter().map(|&i| batch.text[i].clone()).collect();
    granular_loss(level, &audio, &text, tau)
}

/// `L_c-s + α·L_f-w + β·L_s-p` over the enabled terms.
pub fn hci_loss<'t>(batch: &LossBatch<'t>, config: &LossConfig) -> Result<LossTerms<'t>> {
    config.validate()?;
    if batch.audio.len() != batch.text.len() || batch.fine_grained.len() != batch.len() {
        return Err(Error::usage("loss batch fields have different lengths"));
    }
    let cs = clip_sentence_loss(&batch.audio, &batch.text, config.tau)?;
    let fw = config
        .enable_fw
        .then(|| granular_subset(Granularity::FrameWord, batch, config.tau))
        .transpose()?;
    let sp = config
        .enable_sp
        .then(|| granular_subset(Granularity::SegmentPhrase, batch, config.tau))
        .transpose()?;
    let mut at = cs;
    if let Some(fw) = fw {
        at = at.add(fw.scale(config.alpha)?)?;
    }
    if let Some(sp) = sp {
        at = at.add(sp.scale(config.beta)?)?;
    }
    Ok(LossTerms {
        cs,
        fw,
        sp,
        tc: None,
        at,
        total: at,
    })
}

/// `L_at + w·L_tc`, where `L_at` is [`hci_loss`] (plain NT-Xent when both
/// granular terms are disabled). `L_tc` runs over the `tc_text` rows only; a
/// batch without any (all pairs augmented) contributes `L_tc = 0`.
pub fn total_loss<'t>(batch: &LossBatch<'t>, config: &LossConfig) -> Result<LossTerms<'t>> {
    let mut terms = hci_loss(batch, config)?;
    if config.enable_tc {
        if batch.tc_caption.len() != batch.tc_text.len() {
            return Err(Error::usage("text and caption lists differ in length"));
        }
        let tc = if batch.tc_text.is_empty() {
            batch.audio[0].clip.tape().constant(Tensor::scalar(0.0))
        } else {
            let captions: Vec<Var<'t>> = batch
                .tc_caption
                .iter()
                .map(|c| {
                    c.ok_or_else(|| {
                        Error::data("text-caption loss enabled but a caption embedding is missing")
                    })
                })
                .collect::<Result<_>>()?;
            text_caption_loss(
                Var::concat(&batch.tc_text, 0)?,
                Var::concat(&captions, 0)?,
                config.tau,
            )?
        };
        terms.total = terms.at.add(tc.scale(config.tc_weight)?)?;
        terms.tc = Some(tc);
    }
    Ok(terms)
}
