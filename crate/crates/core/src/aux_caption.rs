//! Auxiliary captions: extra positive pairs, co-attention enhancement of
//! audio frames, and text-caption score fusion.
//!
//! The co-attention block is two pre-norm transformer layers. The first takes
//! queries from the frames and keys/values from the caption rows, the second
//! is ordinary self-attention over the enhanced frames:
//!
//! ```text
//! x = x + MHA(LN(x), C);  x = x + FF(LN(x))
//! x = x + MHA(LN(x), LN(x));  x = x + FF(LN(x))
//! ```
//!
//! `LN` is layer normalization with a learned `γ, β` pair. Attention output
//! projections and the second feed-forward layer start at zero, so a freshly
//! initialized block returns its input unchanged.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding_io::{Bundle, EmbeddingSequence, Modality, PairRecord, Paired, Split};
use crate::error::{Error, Result};
use crate::hierarchy::{gaussian_tensor, mlp_h, BoundMlp, MlpParams};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_FUSION_LAMBDA: f64 = 1.0;

/// Which caption rows feed the co-attention keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionKv {
    /// The single cls row.
    Cls,
    /// Token rows when stored, else the cls row.
    Tokens,
}

/// Cumulative caption settings: augmentation, then enhancement, then
/// text-caption matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcLevel {
    Off,
    Da,
    DaAcfi,
    DaAcfiTcm,
}

impl AcLevel {
    pub fn augment(self) -> bool {
        self >= AcLevel::Da
    }

    pub fn enhance(self) -> bool {
        self >= AcLevel::DaAcfi
    }

    pub fn tcm(self) -> bool {
        self >= AcLevel::DaAcfiTcm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AcLevel::Off => "off",
            AcLevel::Da => "da",
            AcLevel::DaAcfi => "da+acfi",
            AcLevel::DaAcfiTcm => "da+acfi+tcm",
        }
    }
}

impl std::str::FromStr for AcLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AcLevel::Off),
            "da" => Ok(AcLevel::Da),
            "da+acfi" => Ok(AcLevel::DaAcfi),
            "da+acfi+tcm" => Ok(AcLevel::DaAcfiTcm),
            other => Err(Error::usage(format!("unknown caption setting '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcConfig {
    pub level: AcLevel,
    pub heads: usize,
    pub caption_kv: CaptionKv,
    /// Feed enhanced frames to the clip level only; frames and segments
    /// stay unenhanced.
    pub enhance_clip_only: bool,
}

impl Default for AcConfig {
    fn default() -> Self {
        AcConfig {
            level: AcLevel::Off,
            heads: DEFAULT_HEADS,
            caption_kv: CaptionKv::Cls,
            enhance_clip_only: false,
        }
    }
}

impl AcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.level.enhance() && (self.heads == 0 || dim % self.heads != 0) {
            return Err(Error::usage(format!(
                "dimension {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// A generated caption: optional token rows and an always-present cls row.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub tokens: Option<Tensor>,
    pub cls: Tensor,
}

impl CaptionRecord {
    pub fn from_sequence(seq: &EmbeddingSequence) -> Result<Self> {
        if seq.modality != Modality::Caption {
            return Err(Error::data(format!("'{}' is not a caption", seq.item_id)));
        }
        let cls = seq
            .summary()
            .ok_or_else(|| Error::data(format!("caption '{}' has no cls row", seq.item_id)))?;
        Ok(CaptionRecord {
            caption_id: seq.item_id.clone(),
            tokens: seq.tokens().cloned(),
            cls,
        })
    }

    /// Rows used as keys and values.
    pub fn key_values(&self, mode: CaptionKv) -> &Tensor {
        match (mode, &self.tokens) {
            (CaptionKv::Tokens, Some(t)) => t,
            _ => &self.cls,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub enabled: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: DEFAULT_FUSION_LAMBDA,
            enabled: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::usage(format!(
                "fusion lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `s_at + λ·s_tc`, or `s_at` when fusion is disabled.
pub fn fuse(s_at: f64, s_tc: f64, config: &FusionConfig) -> f64 {
    if config.enabled {
        s_at + config.lambda * s_tc
    } else {
        s_at
    }
}

/// Elementwise [`fuse`] over equal-shape tensors.
pub fn fuse_scores(s_at: &Tensor, s_tc: &Tensor, config: &FusionConfig) -> Result<Tensor> {
    config.validate()?;
    if s_at.shape() != s_tc.shape() {
        return Err(Error::usage(format!(
            "cannot fuse scores of shapes {:?} and {:?}",
            s_at.shape(),
            s_tc.shape()
        )));
    }
    Ok(s_at.zip_map(s_tc, |a, t| fuse(a, t, config)))
}

/// Which embedding plays the text role of a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    Text,
    Caption,
}

/// A positive pair as seen by the trainer. For augmented pairs `text_id`
/// names the caption and `text_source` is `Caption`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrainingPair {
    pub audio_id: String,
    pub text_id: String,
    pub text_source: TextSource,
    /// Caption of the audio clip, used for enhancement and text-caption
    /// matching.
    pub caption_id: Option<String>,
}

impl TrainingPair {
    pub fn from_record(p: &PairRecord) -> Self {
        TrainingPair {
            audio_id: p.audio_id.clone(),
            text_id: p.text_id.clone(),
            text_source: TextSource::Text,
            caption_id: p.caption_id.clone(),
        }
    }
}

impl Paired for TrainingPair {
    fn audio_key(&self) -> &str {
        &self.audio_id
    }

    fn text_key(&self) -> &str {
        &self.text_id
    }
}

/// The split's pairs followed by one `(audio, caption)` pair per captioned
/// pair. An `(audio, caption)` pair already produced is not added again.
pub fn augment_pairs(bundle: &Bundle, split: Split) -> Vec<TrainingPair> {
    let originals: Vec<TrainingPair> = bundle
        .pairs()
        .iter()
        .filter(|p| p.split == split)
        .map(TrainingPair::from_record)
        .collect();
    let mut seen: HashSet<(String, String)> = originals
        .iter()
        .map(|p| (p.audio_id.clone(), p.text_id.clone()))
        .collect();
    let mut out = originals.clone();
    for p in &originals {
        let Some(c) = &p.caption_id else { continue };
        if seen.insert((p.audio_id.clone(), c.clone())) {
            out.push(TrainingPair {
                audio_id: p.audio_id.clone(),
                text_id: c.clone(),
                text_source: TextSource::Caption,
                caption_id: Some(c.clone()),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
}

/// Multi-head attention: per-head `D×(D/H)` projections, concatenated heads
/// mixed by `out: D×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub out: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoAttentionParams {
    pub dim: usize,
    pub cross: AttentionParams,
    pub cross_norm: LayerNormParams,
    pub cross_ff: MlpParams,
    pub cross_ff_norm: LayerNormParams,
    pub self_attn: AttentionParams,
    pub self_norm: LayerNormParams,
    pub self_ff: MlpParams,
    pub self_ff_norm: LayerNormParams,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    dim: usize,
    zero_out: bool,
}

impl Init<'_> {
    fn attention(&mut self, prefix: &str, heads: usize) -> Result<AttentionParams> {
        let (d, dh) = (self.dim, self.dim / heads);
        let s = 1.0 / (d as f64).sqrt();
        let mut hs = Vec::with_capacity(heads);
        for i in 0..heads {
            let mut proj = |name: &str| {
                let t = gaussian_tensor(self.rng, &[d, dh], s);
                self.store.add(format!("{prefix}.head{i}.{name}"), t)
            };
            hs.push(HeadParams {
                q: proj("q")?,
                k: proj("k")?,
                v: proj("v")?,
            });
        }
        let out = if self.zero_out {
            Tensor::zeros(&[d, d])
        } else {
            gaussian_tensor(self.rng, &[d, d], s)
        };
        Ok(AttentionParams {
            heads: hs,
            out: self.store.add(format!("{prefix}.out"), out)?,
        })
    }

    fn norm(&mut self, prefix: &str) -> Result<LayerNormParams> {
        let d = self.dim;
        let (gamma, beta) = if self.zero_out {
            (Tensor::ones(&[1, d]), Tensor::zeros(&[1, d]))
        } else {
            let g = gaussian_tensor(self.rng, &[1, d], 0.1).map(|x| x + 1.0);
            (g, gaussian_tensor(self.rng, &[1, d], 0.1))
        };
        Ok(LayerNormParams {
            gamma: self.store.add(format!("{prefix}.gamma"), gamma)?,
            beta: self.store.add(format!("{prefix}.beta"), beta)?,
        })
    }

    fn feed_forward(&mut self, prefix: &str) -> Result<MlpParams> {
        let p = MlpParams::init(self.store, prefix, self.dim, self.rng)?;
        if self.zero_out {
            *self.store.value_mut(p.w2) = Tensor::zeros(&[2 * self.dim, self.dim]);
        } else {
            *self.store.value_mut(p.b1) = gaussian_tensor(self.rng, &[1, 2 * self.dim], 0.1);
            *self.store.value_mut(p.b2) = gaussian_tensor(self.rng, &[1, self.dim], 0.1);
        }
        Ok(p)
    }
}

impl CoAttentionParams {
    /// Default initialization: Gaussian `1/√D` projections, unit-gain layer
    /// norms, zero output projections and zero second feed-forward layers.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(store, prefix, dim, heads, rng, true)
    }

    /// Every parameter random and nonzero; used to exercise all gradient
    /// paths.
    pub fn init_dense(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(store, prefix, dim, heads, rng, false)
    }

    fn build(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
        zero_out: bool,
    ) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::usage(format!(
                "dimension {dim} is not divisible by {heads} heads"
            )));
        }
        let mut init = Init {
            store,
            rng,
            dim,
            zero_out,
        };
        Ok(CoAttentionParams {
            dim,
            cross: init.attention(&format!("{prefix}.cross.attn"), heads)?,
            cross_norm: init.norm(&format!("{prefix}.cross.attn_norm"))?,
            cross_ff: init.feed_forward(&format!("{prefix}.cross.ff"))?,
            cross_ff_norm: init.norm(&format!("{prefix}.cross.ff_norm"))?,
            self_attn: init.attention(&format!("{prefix}.self.attn"), heads)?,
            self_norm: init.norm(&format!("{prefix}.self.attn_norm"))?,
            self_ff: init.feed_forward(&format!("{prefix}.self.ff"))?,
            self_ff_norm: init.norm(&format!("{prefix}.self.ff_norm"))?,
        })
    }

    pub fn heads(&self) -> usize {
        self.cross.heads.len()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundCoAttention<'t> {
        let attn = |a: &AttentionParams| BoundAttention {
            heads: a
                .heads
                .iter()
                .map(|h| BoundHead {
                    q: tape.param(store, h.q),
                    k: tape.param(store, h.k),
                    v: tape.param(store, h.v),
                })
                .collect(),
            out: tape.param(store, a.out),
        };
        let norm = |n: &LayerNormParams| BoundNorm {
            gamma: tape.param(store, n.gamma),
            beta: tape.param(store, n.beta),
        };
        BoundCoAttention {
            dim: self.dim,
            cross: attn(&self.cross),
            cross_norm: norm(&self.cross_norm),
            cross_ff: self.cross_ff.bind(tape, store),
            cross_ff_norm: norm(&self.cross_ff_norm),
            self_attn: attn(&self.self_attn),
            self_norm: norm(&self.self_norm),
            self_ff: self.self_ff.bind(tape, store),
            self_ff_norm: norm(&self.self_ff_norm),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct BoundAttention<'t> {
    pub heads: Vec<BoundHead<'t>>,
    pub out: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundNorm<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct BoundCoAttention<'t> {
    pub dim: usize,
    pub cross: BoundAttention<'t>,
    pub cross_norm: BoundNorm<'t>,
    pub cross_ff: BoundMlp<'t>,
    pub cross_ff_norm: BoundNorm<'t>,
    pub self_attn: BoundAttention<'t>,
    pub self_norm: BoundNorm<'t>,
    pub self_ff: BoundMlp<'t>,
    pub self_ff_norm: BoundNorm<'t>,
}

/// Output of [`co_attend`] plus the per-head attention weights of both
/// layers (`N_f×N_c` for the cross layer, `N_f×N_f` for the self layer).
#[derive(Clone, Debug)]
pub struct CoAttention<'t> {
    pub output: Var<'t>,
    pub cross_weights: Vec<Var<'t>>,
    pub self_weights: Vec<Var<'t>>,
}

fn norm<'t>(x: Var<'t>, p: &BoundNorm<'t>) -> Result<Var<'t>> {
    x.layer_norm()?.mul(p.gamma)?.add(p.beta)
}

fn attend<'t>(
    queries: Var<'t>,
    keys: Var<'t>,
    p: &BoundAttention<'t>,
    weights: &mut Vec<Var<'t>>,
) -> Result<Var<'t>> {
    let mut outs = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let q = queries.matmul(h.q)?;
        let k = keys.matmul(h.k)?;
        let v = keys.matmul(h.v)?;
        let scale = 1.0 / (q.shape()[1] as f64).sqrt();
        let w = q.matmul(k.t()?)?.scale(scale)?.softmax(1)?;
        outs.push(w.matmul(v)?);
        weights.push(w);
    }
    Var::concat(&outs, 1)?.matmul(p.out)
}

/// Enhances `frames` (`N_f×D`) with caption rows (`N_c×D`).
pub fn co_attend<'t>(
    frames: Var<'t>,
    caption: Var<'t>,
    p: &BoundCoAttention<'t>,
) -> Result<CoAttention<'t>> {
    let (fs, cs) = (frames.shape(), caption.shape());
    if fs.len() != 2
        || cs.len() != 2
        || fs[1] != p.dim
        || cs[1] != p.dim
        || fs[0] == 0
        || cs[0] == 0
    {
        return Err(Error::usage(format!(
            "co-attention expects N×{d} frames and M×{d} caption rows, got {fs:?} and {cs:?}",
            d = p.dim
        )));
    }
    let mut cross_weights = Vec::new();
    let mut self_weights = Vec::new();
    let mut x = frames;
    x = x.add(attend(
        norm(x, &p.cross_norm)?,
        caption,
        &p.cross,
        &mut cross_weights,
    )?)?;
    x = x.add(mlp_h(norm(x, &p.cross_ff_norm)?, &p.cross_ff)?)?;
    let n = norm(x, &p.self_norm)?;
    x = x.add(attend(n, n, &p.self_attn, &mut self_weights)?)?;
    x = x.add(mlp_h(norm(x, &p.self_ff_norm)?, &p.self_ff)?)?;
    Ok(CoAttention {
        output: x,
        cross_weights,
        self_weights,
    })
}

/// Cosine between each text cls row and each audio's caption cls row;
/// audio items without a caption score 0. Result is `texts × audios`.
pub fn caption_score_matrix(text_cls: &[Tensor], captions: &[Option<Tensor>]) -> Result<Tensor> {
    let unit = |t: &Tensor| t.l2_normalize_rows().0;
    let texts: Vec<Tensor> = text_cls.iter().map(unit).collect();
    let caps: Vec<Option<Tensor>> = captions.iter().map(|c| c.as_ref().map(unit)).collect();
    let mut data = Vec::with_capacity(texts.len() * caps.len());
    for t in &texts {
        for c in &caps {
            data.push(match c {
                Some(c) => {
                    if c.shape() != t.shape() || t.rows() != 1 {
                        return Err(Error::usage(format!(
                            "cls rows must be 1×D, got {:?} and {:?}",
                            t.shape(),
                            c.shape()
                        )));
                    }
                    t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
                }
                None => 0.0,
            });
        }
    }
    Tensor::new(vec![texts.len(), caps.len()], data)
}
