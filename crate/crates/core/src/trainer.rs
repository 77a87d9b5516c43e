//! Mini-batch training with Adam, and the checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "HCICKPT1" | u32 version=1 | u32 count
//! per parameter: u32 name_len | name (UTF-8) | u32 rank | rank*u32 dims | f64 values
//! rest of file: UTF-8 JSON {"model": .., "train": .., "step": ..}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aux_caption::{augment_pairs, CaptionRecord, FusionConfig, TextSource, TrainingPair};
use crate::embedding_io::{batch_pairs, write_atomic, Bundle, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBatch, LossBreakdown, LossConfig, LossTerms};
use crate::model::{BoundModel, Model, ModelConfig};
use crate::tensor::{ParamStore, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

pub const CKPT_MAGIC: &[u8; 8] = b"HCICKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine_decay: bool,
    /// Rescale gradients to this global L2 norm when larger.
    pub clip_grad: Option<f64>,
}

impl TrainConfig {
    pub fn new(dim: usize) -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            loss: LossConfig::ntxent(),
            model: ModelConfig::new(dim),
            fusion: FusionConfig::default(),
            cosine_decay: false,
            clip_grad: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::usage(
                "batch size must be >= 2 (a batch of one has no negatives)",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return Err(Error::usage(format!("gradient clip must be > 0, got {c}")));
            }
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.fusion.validate()
    }

    /// Loss settings actually optimized: text-caption matching turns on the
    /// text-caption term.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        l.enable_tc |= self.model.ac.level.tcm();
        l
    }
}

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update of `param` in place; `t` is the 1-based step.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(Error::usage(format!(
            "adam shapes differ: param {:?}, grad {:?}, m {:?}, v {:?}",
            param.shape(),
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let (p, g) = (param.data_mut(), grad.data());
    for i in 0..p.len() {
        let mi = &mut m.data_mut()[i];
        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g[i];
        let m_hat = *mi / c1;
        let vi = &mut v.data_mut()[i];
        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let v_hat = *vi / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Applies the gradients stored in `store` (missing ones count as zero) and
/// advances `state.t`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::usage(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let grad = store
            .grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        adam_update(
            store.value_mut(id),
            &grad,
            &mut state.m[i],
            &mut state.v[i],
            state.t,
            lr,
        )?;
    }
    Ok(())
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let sq: f64 = store
        .ids()
        .filter_map(|id| store.grad(id))
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
}

/// Training pairs for `split`: the split's pairs, plus caption pairs when
/// augmentation is on.
pub fn training_pairs(bundle: &Bundle, split: Split, config: &TrainConfig) -> Vec<TrainingPair> {
    if config.model.ac.level.augment() {
        augment_pairs(bundle, split)
    } else {
        bundle
            .pairs()
            .iter()
            .filter(|p| p.split == split)
            .map(TrainingPair::from_record)
            .collect()
    }
}

fn check_captions(bundle: &Bundle, config: &TrainConfig) -> Result<()> {
    let needs = config.model.ac.level.augment() || config.effective_loss().enable_tc;
    if !needs {
        return Ok(());
    }
    for p in bundle.pairs().iter().filter(|p| p.split == Split::Train) {
        if p.caption_id.is_none() {
            return Err(Error::data(format!(
                "caption settings need captions but pair ({}, {}) has none",
                p.audio_id, p.text_id
            )));
        }
    }
    Ok(())
}

/// Loss nodes for the pairs `batch` of `pairs`.
pub fn batch_loss<'t>(
    model: &BoundModel<'t>,
    bundle: &Bundle,
    pairs: &[TrainingPair],
    batch: &[usize],
    loss: &LossConfig,
) -> Result<LossTerms<'t>> {
    let mut lb = LossBatch::default();
    for &i in batch {
        let p = pairs
            .get(i)
            .ok_or_else(|| Error::usage(format!("batch index {i} out of range")))?;
        lb.audio
            .push(model.audio_item(bundle, &p.audio_id, p.caption_id.as_deref())?);
        let text = model.text_item(bundle, &p.text_id, p.text_source)?;
        if loss.enable_tc && p.text_source == TextSource::Text {
            let cls = text
                .hierarchy
                .cls
                .ok_or_else(|| Error::data(format!("text '{}' has no cls embedding", p.text_id)))?;
            lb.tc_text.push(cls);
            let cap = match &p.caption_id {
                Some(c) => {
                    Some(model.caption_cls(&CaptionRecord::from_sequence(bundle.require(c)?)?)?)
                }
                None => None,
            };
            lb.tc_caption.push(cap);
        }
        lb.text.push(text.hierarchy);
        lb.fine_grained.push(text.fine_grained);
    }
    total_loss(&lb, loss)
}

/// Forward pass only.
pub fn evaluate_batch(
    model: &Model,
    bundle: &Bundle,
    pairs: &[TrainingPair],
    batch: &[usize],
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    Ok(batch_loss(&bound, bundle, pairs, batch, loss)?.breakdown())
}

/// One optimizer step on `batch`; returns the loss before the step.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    bundle: &Bundle,
    pairs: &[TrainingPair],
    batch: &[usize],
    loss: &LossConfig,
    lr: f64,
    clip_grad: Option<f64>,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let terms = batch_loss(&bound, bundle, pairs, batch, loss)?;
    let breakdown = terms.breakdown();
    if !breakdown.l_total.is_finite() {
        return Err(Error::data("training produced a non-finite loss"));
    }
    let grads = tape.backward(terms.total)?;
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store)?;
    if let Some(c) = clip_grad {
        clip_gradients(&mut model.store, c);
    }
    adam_step(&mut model.store, state, lr).map(|_| breakdown)
}

fn learning_rate(config: &TrainConfig, step: u64, total: u64) -> f64 {
    if config.cosine_decay && total > 0 {
        let frac = step as f64 / total as f64;
        config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    } else {
        config.learning_rate
    }
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: Model,
    pub checkpoint: Checkpoint,
    /// Per epoch, the mean loss over a fixed partition of the training pairs
    /// evaluated after that epoch's updates.
    pub history: Vec<LossBreakdown>,
}

/// Trains a freshly initialized model on the train split.
pub fn fit(bundle: &Bundle, config: &TrainConfig) -> Result<FitResult> {
    fit_with_progress(bundle, config, |_, _| {})
}

/// [`fit`] calling `on_epoch(epoch, breakdown)` after every epoch.
pub fn fit_with_progress(
    bundle: &Bundle,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<FitResult> {
    config.validate()?;
    if bundle.dim() != config.model.dim() {
        return Err(Error::data(format!(
            "bundle dimension {} does not match model dimension {}",
            bundle.dim(),
            config.model.dim()
        )));
    }
    let pairs = training_pairs(bundle, Split::Train, config);
    if pairs.is_empty() {
        return Err(Error::data("the train split is empty"));
    }
    check_captions(bundle, config)?;
    let loss = config.effective_loss();

    let mut model = Model::init(config.model.clone(), config.seed)?;
    let mut state = AdamState::new(&model.store);
    let probe = batch_pairs(&pairs, config.batch_size, config.seed, false)?;
    let epoch_batches = (0..config.epochs)
        .map(|e| {
            batch_pairs(
                &pairs,
                config.batch_size,
                config.seed.wrapping_add(e as u64),
                false,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let total_steps: u64 = epoch_batches.iter().map(|b| b.batches.len() as u64).sum();

    let mut history = Vec::with_capacity(config.epochs);
    for (epoch, batches) in epoch_batches.iter().enumerate() {
        for b in &batches.batches {
            let lr = learning_rate(config, state.t, total_steps);
            train_step(
                &mut model,
                &mut state,
                bundle,
                &pairs,
                &b.pair_indices,
                &loss,
                lr,
                config.clip_grad,
            )?;
        }
        let parts = probe
            .batches
            .iter()
            .map(|b| evaluate_batch(&model, bundle, &pairs, &b.pair_indices, &loss))
            .collect::<Result<Vec<_>>>()?;
        let mean = LossBreakdown::mean(&parts);
        if !mean.l_total.is_finite() {
            return Err(Error::data(format!(
                "non-finite loss after epoch {}",
                epoch + 1
            )));
        }
        on_epoch(epoch, &mean);
        history.push(mean);
    }
    model.store.zero_grad();
    let checkpoint = Checkpoint::from_model(&model, Some(config.clone()), state.t);
    Ok(FitResult {
        model,
        checkpoint,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: Option<TrainConfig>, step: u64) -> Self {
        Checkpoint {
            params: model.named_params(),
            meta: CheckpointMeta {
                model: model.config.clone(),
                train,
                step,
            },
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.meta.model.clone(), &self.params)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.params.len(), "parameter count")?.to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&u32_len(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::data(format!("cannot encode checkpoint config: {e}")))?;
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::data("bad magic: not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::data("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| {
                    Error::data(format!("parameter '{name}' shape {shape:?} is too large"))
                })?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::data(e.to_string()))?;
            params.push((name, t));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[r.pos..])
            .map_err(|e| Error::data(format!("bad checkpoint config: {e}")))?;
        Ok(Checkpoint { params, meta })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::data(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data("unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}
