//! Frame → segment → clip and word → phrase → sentence representations.
//!
//! Each level is produced by attention pooling,
//! `softmax(X·W)ᵀ · h(X)`, where the softmax runs over the rows of `X` so
//! that every output slot is a convex combination of the rows of `h(X)`,
//! and `h` is a D-2D-D feed-forward block with a ReLU after the first layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceMode {
    /// Sentence level is the text encoder's cls vector.
    Cls,
    /// Sentence level is pooled from the phrases.
    Aggregated,
}

/// Which axis of `X·W` the pooling softmax normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Over input rows: each output slot is a distribution over rows.
    Rows,
    /// Over output slots, per input row.
    Slots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub dim: usize,
    pub segments: usize,
    pub phrases: usize,
    pub sentence_mode: SentenceMode,
    pub projection_enabled: bool,
    pub softmax_axis: SoftmaxAxis,
    /// Reuse the segment (phrase) `h` at the clip (sentence) level.
    pub shared_h: bool,
}

impl HierarchyConfig {
    pub fn new(dim: usize) -> Self {
        HierarchyConfig {
            dim,
            segments: 10,
            phrases: 10,
            sentence_mode: SentenceMode::Cls,
            projection_enabled: true,
            softmax_axis: SoftmaxAxis::Rows,
            shared_h: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.segments == 0 || self.phrases == 0 {
            return Err(Error::usage(format!(
                "dim, segments and phrases must be >= 1 (got {}, {}, {})",
                self.dim, self.segments, self.phrases
            )));
        }
        Ok(())
    }
}

pub(crate) fn gaussian_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.gaussian_vec(n, scale)).expect("shape matches length")
}

/// Parameters of `h`: `W1: D×2D`, `b1: 1×2D`, `W2: 2D×D`, `b2: 1×D`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    /// Gaussian weights of scale `1/√D`, zero biases.
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        let s = 1.0 / (dim as f64).sqrt();
        Ok(MlpParams {
            w1: store.add(
                format!("{prefix}.w1"),
                gaussian_tensor(rng, &[dim, 2 * dim], s),
            )?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, 2 * dim]))?,
            w2: store.add(
                format!("{prefix}.w2"),
                gaussian_tensor(rng, &[2 * dim, dim], s),
            )?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, dim]))?,
        })
    }

    /// Weights that make `h` the identity: `ReLU(x) − ReLU(−x) = x`.
    pub fn identity(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let mut w1 = Tensor::zeros(&[dim, 2 * dim]);
        let mut w2 = Tensor::zeros(&[2 * dim, dim]);
        for i in 0..dim {
            w1.data_mut()[i * 2 * dim + i] = 1.0;
            w1.data_mut()[i * 2 * dim + dim + i] = -1.0;
            w2.data_mut()[i * dim + i] = 1.0;
            w2.data_mut()[(dim + i) * dim + i] = -1.0;
        }
        Ok(MlpParams {
            w1: store.add(format!("{prefix}.w1"), w1)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, 2 * dim]))?,
            w2: store.add(format!("{prefix}.w2"), w2)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundMlp<'t> {
        BoundMlp {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlp<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// `h(X) = ReLU(X·W1 + b1)·W2 + b2`.
pub fn mlp_h<'t>(x: Var<'t>, p: &BoundMlp<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let (w1, b1, w2, b2) = (p.w1.shape(), p.b1.shape(), p.w2.shape(), p.b2.shape());
    let ok = xs.len() == 2
        && w1.len() == 2
        && w1[0] == xs[1]
        && b1 == [1, w1[1]]
        && w2 == [w1[1], xs[1]]
        && b2 == [1, xs[1]];
    if !ok {
        return Err(Error::usage(format!(
            "mlp shapes do not line up: x {xs:?}, w1 {w1:?}, b1 {b1:?}, w2 {w2:?}, b2 {b2:?}"
        )));
    }
    x.matmul(p.w1)?.add(p.b1)?.relu()?.matmul(p.w2)?.add(p.b2)
}

/// Pooling projection `W: D×M` plus its `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregatorParams {
    pub w: ParamId,
    pub h: MlpParams,
}

impl AggregatorParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        slots: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::usage("aggregator needs at least one output slot"));
        }
        let w = store.add(
            format!("{prefix}.w"),
            gaussian_tensor(rng, &[dim, slots], 1.0 / (dim as f64).sqrt()),
        )?;
        let h = MlpParams::init(store, &format!("{prefix}.h"), dim, rng)?;
        Ok(AggregatorParams { w, h })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundAggregator<'t> {
        BoundAggregator {
            w: tape.param(store, self.w),
            h: self.h.bind(tape, store),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAggregator<'t> {
    pub w: Var<'t>,
    pub h: BoundMlp<'t>,
}

/// Pooling weights `softmax(X·W)`, shape `R×M`.
pub fn aggregation_weights<'t>(
    x: Var<'t>,
    agg: &BoundAggregator<'t>,
    axis: SoftmaxAxis,
) -> Result<Var<'t>> {
    let (xs, ws) = (x.shape(), agg.w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::usage(format!(
            "aggregate: input {xs:?} does not match projection {ws:?}"
        )));
    }
    let axis = match axis {
        SoftmaxAxis::Rows => 0,
        SoftmaxAxis::Slots => 1,
    };
    x.matmul(agg.w)?.softmax(axis)
}

/// `softmax(X·W)ᵀ · h(X)`, shape `M×D`.
pub fn aggregate<'t>(x: Var<'t>, agg: &BoundAggregator<'t>, axis: SoftmaxAxis) -> Result<Var<'t>> {
    let weights = aggregation_weights(x, agg, axis)?;
    weights.t()?.matmul(mlp_h(x, &agg.h)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiGranularityAudio<T> {
    pub frames: T,
    pub segments: T,
    pub clip: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiGranularityText<T> {
    pub words: T,
    pub phrases: T,
    pub sentence: T,
    pub cls: Option<T>,
}

impl MultiGranularityAudio<Var<'_>> {
    pub fn detach(&self) -> MultiGranularityAudio<Tensor> {
        MultiGranularityAudio {
            frames: self.frames.value(),
            segments: self.segments.value(),
            clip: self.clip.value(),
        }
    }
}

impl MultiGranularityText<Var<'_>> {
    pub fn detach(&self) -> MultiGranularityText<Tensor> {
        MultiGranularityText {
            words: self.words.value(),
            phrases: self.phrases.value(),
            sentence: self.sentence.value(),
            cls: self.cls.map(|c| c.value()),
        }
    }
}

/// Trainable parameters of both hierarchies.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyParams {
    pub audio_proj: Option<ParamId>,
    pub text_proj: Option<ParamId>,
    pub segment: AggregatorParams,
    pub clip: AggregatorParams,
    pub phrase: AggregatorParams,
    pub sentence: AggregatorParams,
}

impl HierarchyParams {
    /// Seeded initialization. Projections start at identity plus Gaussian
    /// noise of scale 1e-3.
    pub fn init(store: &mut ParamStore, config: &HierarchyConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let proj = |store: &mut ParamStore, name: &str, rng: &mut Rng| -> Result<Option<ParamId>> {
            if !config.projection_enabled {
                return Ok(None);
            }
            let mut p = Tensor::eye(d);
            for (v, n) in p.data_mut().iter_mut().zip(rng.gaussian_vec(d * d, 1e-3)) {
                *v += n;
            }
            Ok(Some(store.add(name, p)?))
        };
        let audio_proj = proj(store, "audio.proj", rng)?;
        let text_proj = proj(store, "text.proj", rng)?;
        let segment = AggregatorParams::init(store, "audio.segment", d, config.segments, rng)?;
        let phrase = AggregatorParams::init(store, "text.phrase", d, config.phrases, rng)?;
        let (clip, sentence) = if config.shared_h {
            let w = store.add(
                "audio.clip.w",
                gaussian_tensor(rng, &[d, 1], 1.0 / (d as f64).sqrt()),
            )?;
            let clip = AggregatorParams { w, h: segment.h };
            let w = store.add(
                "text.sentence.w",
                gaussian_tensor(rng, &[d, 1], 1.0 / (d as f64).sqrt()),
            )?;
            (clip, AggregatorParams { w, h: phrase.h })
        } else {
            (
                AggregatorParams::init(store, "audio.clip", d, 1, rng)?,
                AggregatorParams::init(store, "text.sentence", d, 1, rng)?,
            )
        };
        Ok(HierarchyParams {
            audio_proj,
            text_proj,
            segment,
            clip,
            phrase,
            sentence,
        })
    }

    /// Identity projections, zero pooling weights (uniform pooling) and
    /// identity `h` at every level.
    pub fn identity(store: &mut ParamStore, config: &HierarchyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let (audio_proj, text_proj) = if config.projection_enabled {
            (
                Some(store.add("audio.proj", Tensor::eye(d))?),
                Some(store.add("text.proj", Tensor::eye(d))?),
            )
        } else {
            (None, None)
        };
        let agg =
            |store: &mut ParamStore, prefix: &str, slots: usize| -> Result<AggregatorParams> {
                Ok(AggregatorParams {
                    w: store.add(format!("{prefix}.w"), Tensor::zeros(&[d, slots]))?,
                    h: MlpParams::identity(store, &format!("{prefix}.h"), d)?,
                })
            };
        Ok(HierarchyParams {
            audio_proj,
            text_proj,
            segment: agg(store, "audio.segment", config.segments)?,
            phrase: agg(store, "text.phrase", config.phrases)?,
            clip: agg(store, "audio.clip", 1)?,
            sentence: agg(store, "text.sentence", 1)?,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundHierarchy<'t> {
        BoundHierarchy {
            audio_proj: self.audio_proj.map(|p| tape.param(store, p)),
            text_proj: self.text_proj.map(|p| tape.param(store, p)),
            segment: self.segment.bind(tape, store),
            clip: self.clip.bind(tape, store),
            phrase: self.phrase.bind(tape, store),
            sentence: self.sentence.bind(tape, store),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHierarchy<'t> {
    pub audio_proj: Option<Var<'t>>,
    pub text_proj: Option<Var<'t>>,
    pub segment: BoundAggregator<'t>,
    pub clip: BoundAggregator<'t>,
    pub phrase: BoundAggregator<'t>,
    pub sentence: BoundAggregator<'t>,
}

fn project<'t>(x: Var<'t>, proj: Option<Var<'t>>) -> Result<Var<'t>> {
    match proj {
        Some(p) => x.matmul(p),
        None => Ok(x),
    }
}

impl<'t> BoundHierarchy<'t> {
    /// Applies the audio input projection (identity when disabled).
    pub fn project_audio(&self, frames: Var<'t>) -> Result<Var<'t>> {
        project(frames, self.audio_proj)
    }

    pub fn project_text(&self, rows: Var<'t>) -> Result<Var<'t>> {
        project(rows, self.text_proj)
    }

    /// Segment and clip levels from already projected (and possibly
    /// enhanced) frames.
    pub fn audio_from_frames(
        &self,
        frames: Var<'t>,
        config: &HierarchyConfig,
    ) -> Result<MultiGranularityAudio<Var<'t>>> {
        let segments = aggregate(frames, &self.segment, config.softmax_axis)?;
        let clip = aggregate(segments, &self.clip, config.softmax_axis)?;
        Ok(MultiGranularityAudio {
            frames,
            segments,
            clip,
        })
    }
}

/// Frames (`N_f×D`) to `{A^f, A^s, A^c}`.
pub fn build_audio_hierarchy<'t>(
    frames: Var<'t>,
    params: &BoundHierarchy<'t>,
    config: &HierarchyConfig,
) -> Result<MultiGranularityAudio<Var<'t>>> {
    check_rows(frames, config.dim, "frames")?;
    let frames = params.project_audio(frames)?;
    params.audio_from_frames(frames, config)
}

/// Words (`N_w×D`) and optional cls (`1×D`) to `{T^w, T^p, T^s}`.
pub fn build_text_hierarchy<'t>(
    words: Var<'t>,
    cls: Option<Var<'t>>,
    params: &BoundHierarchy<'t>,
    config: &HierarchyConfig,
) -> Result<MultiGranularityText<Var<'t>>> {
    check_rows(words, config.dim, "words")?;
    let words = params.project_text(words)?;
    let cls = match cls {
        Some(c) => {
            if c.shape() != [1, config.dim] {
                return Err(Error::usage(format!("cls has shape {:?}", c.shape())));
            }
            Some(params.project_text(c)?)
        }
        None => None,
    };
    let phrases = aggregate(words, &params.phrase, config.softmax_axis)?;
    let sentence = match config.sentence_mode {
        SentenceMode::Cls => {
            cls.ok_or_else(|| Error::data("sentence mode 'cls' needs a cls embedding"))?
        }
        SentenceMode::Aggregated => aggregate(phrases, &params.sentence, config.softmax_axis)?,
    };
    Ok(MultiGranularityText {
        words,
        phrases,
        sentence,
        cls,
    })
}

fn check_rows(x: Var<'_>, dim: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[0] == 0 || s[1] != dim {
        return Err(Error::usage(format!(
            "{what} must be R×{dim} with R >= 1, got {s:?}"
        )));
    }
    Ok(())
}
