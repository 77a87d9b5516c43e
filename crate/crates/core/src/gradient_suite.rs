//! Finite-difference checks of every loss and trainable block on small random
//! inputs.

use serde::Serialize;

use crate::aux_caption::{co_attend, CoAttentionParams};
use crate::error::Result;
use crate::hierarchy::{
    aggregate, build_audio_hierarchy, build_text_hierarchy, mlp_h, AggregatorParams,
    HierarchyConfig, HierarchyParams, MlpParams, MultiGranularityAudio, MultiGranularityText,
    SoftmaxAxis,
};
use crate::losses::{
    clip_sentence_loss, granular_loss, hci_loss, nt_xent, text_caption_loss, total_loss,
    Granularity, LossBatch, LossConfig,
};
use crate::rng::Rng;
use crate::tensor::{grad_check, ParamId, ParamStore, Tape, Tensor, Var};

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

/// Batch and sequence sizes drawn for one seed: `N ∈ 2..=4`, `D ∈ {4, 8}`,
/// sequence lengths in `1..=6`.
struct Sizes {
    n: usize,
    d: usize,
    lens: Vec<(usize, usize)>,
}

impl Sizes {
    fn draw(rng: &mut Rng) -> Self {
        let n = 2 + rng.below(3);
        let d = [4, 8][rng.below(2)];
        let lens = (0..n)
            .map(|_| (1 + rng.below(6), 1 + rng.below(6)))
            .collect();
        Sizes { n, d, lens }
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.gaussian_vec(n, 1.0)).expect("shape matches length")
}

fn add_random(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: String,
    shape: &[usize],
) -> Result<ParamId> {
    store.add(name, random(rng, shape))
}

/// `Σ out ⊙ R` for a fixed random `R`, turning a matrix output into a scalar
/// with a generic gradient.
fn probe<'t>(out: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    out.mul(out.tape().constant(r.clone()))?.sum_all()
}

struct RawBatch {
    frames: Vec<ParamId>,
    segments: Vec<ParamId>,
    clips: Vec<ParamId>,
    words: Vec<ParamId>,
    phrases: Vec<ParamId>,
    sentences: Vec<ParamId>,
}

impl RawBatch {
    fn new(store: &mut ParamStore, rng: &mut Rng, s: &Sizes) -> Result<Self> {
        let mut b = RawBatch {
            frames: vec![],
            segments: vec![],
            clips: vec![],
            words: vec![],
            phrases: vec![],
            sentences: vec![],
        };
        for (i, &(nf, nw)) in s.lens.iter().enumerate() {
            b.frames
                .push(add_random(store, rng, format!("f{i}"), &[nf, s.d])?);
            let ns = 1 + rng.below(3);
            b.segments
                .push(add_random(store, rng, format!("s{i}"), &[ns, s.d])?);
            b.clips
                .push(add_random(store, rng, format!("c{i}"), &[1, s.d])?);
            b.words
                .push(add_random(store, rng, format!("w{i}"), &[nw, s.d])?);
            let np = 1 + rng.below(3);
            b.phrases
                .push(add_random(store, rng, format!("p{i}"), &[np, s.d])?);
            b.sentences
                .push(add_random(store, rng, format!("t{i}"), &[1, s.d])?);
        }
        Ok(b)
    }

    fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> LossBatch<'t> {
        let p = |id: &ParamId| tape.param(store, *id);
        let audio = (0..self.frames.len())
            .map(|i| MultiGranularityAudio {
                frames: p(&self.frames[i]),
                segments: p(&self.segments[i]),
                clip: p(&self.clips[i]),
            })
            .collect();
        let text = (0..self.words.len())
            .map(|i| MultiGranularityText {
                words: p(&self.words[i]),
                phrases: p(&self.phrases[i]),
                sentence: p(&self.sentences[i]),
                cls: Some(p(&self.sentences[i])),
            })
            .collect();
        LossBatch::new(audio, text)
    }
}

const TAU: f64 = 0.07;

fn check_nt_xent(rng: &mut Rng, s: &Sizes) -> Result<f64> {
    let mut store = ParamStore::new();
    let data = (0..s.n * s.n).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let id = store.add("s", Tensor::new(vec![s.n, s.n], data)?)?;
    grad_check(&mut store, GRAD_EPS, |tape, st| {
        nt_xent(tape.param(st, id), TAU)
    })
}

fn check_batch_loss(
    rng: &mut Rng,
    s: &Sizes,
    f: impl for<'t> Fn(&LossBatch<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let raw = RawBatch::new(&mut store, rng, s)?;
    grad_check(&mut store, GRAD_EPS, |tape, st| f(&raw.bind(tape, st)))
}

fn check_text_caption(rng: &mut Rng, s: &Sizes) -> Result<f64> {
    let mut store = ParamStore::new();
    let t = add_random(&mut store, rng, "text".into(), &[s.n, s.d])?;
    let c = add_random(&mut store, rng, "caption".into(), &[s.n, s.d])?;
    grad_check(&mut store, GRAD_EPS, |tape, st| {
        text_caption_loss(tape.param(st, t), tape.param(st, c), TAU)
    })
}

fn check_total(rng: &mut Rng, s: &Sizes) -> Result<f64> {
    let mut store = ParamStore::new();
    let raw = RawBatch::new(&mut store, rng, s)?;
    let caps: Vec<ParamId> = (0..s.n)
        .map(|i| add_random(&mut store, rng, format!("cap{i}"), &[1, s.d]))
        .collect::<Result<_>>()?;
    let config = LossConfig {
        enable_tc: true,
        ..LossConfig::default()
    };
    grad_check(&mut store, GRAD_EPS, |tape, st| {
        let mut b = raw.bind(tape, st);
        b.tc_text = b.text.iter().map(|t| t.cls.expect("cls bound")).collect();
        b.tc_caption = caps.iter().map(|&c| Some(tape.param(st, c))).collect();
        Ok(total_loss(&b, &config)?.total)
    })
}

fn check_mlp(rng: &mut Rng, s: &Sizes) -> Result<f64> {
    let mut store = ParamStore::new();
    let rows = s.lens[0].0;
    let x = add_random(&mut store, rng, "x".into(), &[rows, s.d])?;
    let h = MlpParams::init(&mut store, "h", s.d, rng)?;
    *store.value_mut(h.b1) = random(rng, &[1, 2 * s.d]);
    *store.value_mut(h.b2) = random(rng, &[1, s.d]);
    let r = random(rng, &[rows, s.d]);
    grad_check(&mut store, GRAD_EPS, |tape, st| {
        probe(mlp_h(tape.param(st, x), &h.bind(tape, st))?, &r)
    })
}

fn check_aggregate(rng: &mut Rng, s: &Sizes, axis: SoftmaxAxis) -> Result<f64> {
    let mut store = ParamStore::new();
    let rows = s.lens[0].0;
    let slots = 1 + rng.below(3);
    let x = add_random(&mut store, rng, "x".into(), &[rows, s.d])?;
    let agg = AggregatorParams::init(&mut store, "agg", s.d, slots, rng)?;
    let r = random(rng, &[slots, s.d]);
    grad_check(&mut store, GRAD_EPS, |tape, st| {
        probe(aggregate(tape.param(st, x), &agg.bind(tape, st), axis)?, &r)
    })
}

fn check_hierarchy_loss(rng: &mut Rng, s: &Sizes) -> Result<f64> {
    let mut store = ParamStore::new();
    let config = HierarchyConfig {
        segments: 2,
        phrases: 2,
        ..HierarchyConfig::new(s.d)
    };
    let params = HierarchyParams::init(&mut store, &config, rng)?;
    let inputs: Vec<(Tensor, Tensor, Tensor)> = s
        .lens
        .iter()
        .map(|&(nf, nw)| {
            (
                random(rng, &[nf, s.d]),
                random(rng, &[nw, s.d]),
                random(rng, &[1, s.d]),
            )
        })
        .collect();
    let loss = LossConfig::default();
    grad_check(&mut store, GRAD_EPS, |tape, st| {
        let bound = params.bind(tape, st);
        let mut audio = Vec::new();
        let mut text = Vec::new();
        for (f, w, c) in &inputs {
            audio.push(build_audio_hierarchy(
                tape.constant(f.clone()),
                &bound,
                &config,
            )?);
            text.push(build_text_hierarchy(
                tape.constant(w.clone()),
                Some(tape.constant(c.clone())),
                &bound,
                &config,
            )?);
        }
        Ok(hci_loss(&LossBatch::new(audio, text), &loss)?.total)
    })
}

fn check_co_attend(rng: &mut Rng, s: &Sizes) -> Result<f64> {
    let mut store = ParamStore::new();
    let (nf, nc) = s.lens[0];
    let params = CoAttentionParams::init_dense(&mut store, "ca", s.d, 2, rng)?;
    let frames = add_random(&mut store, rng, "frames".into(), &[nf, s.d])?;
    let caption = add_random(&mut store, rng, "caption".into(), &[nc, s.d])?;
    let r = random(rng, &[nf, s.d]);
    grad_check(&mut store, GRAD_EPS, |tape, st| {
        let out = co_attend(
            tape.param(st, frames),
            tape.param(st, caption),
            &params.bind(tape, st),
        )?;
        probe(out.output, &r)
    })
}

/// Runs every check for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = Rng::new(seed);
    let s = Sizes::draw(&mut rng);
    let hci = LossConfig::default();
    let case = |name, v: Result<f64>| {
        v.map(|max_rel_error| GradCheckCase {
            name,
            max_rel_error,
        })
    };
    Ok(vec![
        case("nt_xent", check_nt_xent(&mut rng, &s))?,
        case(
            "clip_sentence_loss",
            check_batch_loss(&mut rng, &s, |b| clip_sentence_loss(&b.audio, &b.text, TAU)),
        )?,
        case(
            "frame_word_loss",
            check_batch_loss(&mut rng, &s, |b| {
                granular_loss(Granularity::FrameWord, &b.audio, &b.text, TAU)
            }),
        )?,
        case(
            "segment_phrase_loss",
            check_batch_loss(&mut rng, &s, |b| {
                granular_loss(Granularity::SegmentPhrase, &b.audio, &b.text, TAU)
            }),
        )?,
        case(
            "hci_loss",
            check_batch_loss(&mut rng, &s, |b| Ok(hci_loss(b, &hci)?.total)),
        )?,
        case("text_caption_loss", check_text_caption(&mut rng, &s))?,
        case("total_loss", check_total(&mut rng, &s))?,
        case("mlp_h", check_mlp(&mut rng, &s))?,
        case(
            "aggregate",
            check_aggregate(&mut rng, &s, SoftmaxAxis::Rows),
        )?,
        case(
            "aggregate_slots",
            check_aggregate(&mut rng, &s, SoftmaxAxis::Slots),
        )?,
        case("hierarchy_hci_loss", check_hierarchy_loss(&mut rng, &s))?,
        case("co_attend", check_co_attend(&mut rng, &s))?,
    ])
}
