//! Embedding bundles: encoder outputs plus the pairing manifest.
//!
//! A bundle on disk is a directory holding `embeddings.heb` (HEB1 binary,
//! little-endian) and `pairs.json`:
//!
//! ```text
//! "HCIEMB01" | u32 version=1 | u32 dim | u32 count
//! per item: u32 id_len | id (UTF-8) | u8 modality (0 audio, 1 text, 2 caption)
//!           | u8 flags (bit0 has_cls) | u32 rows | rows*dim f32 | [dim f32 cls]
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;

pub const HEB_MAGIC: &[u8; 8] = b"HCIEMB01";
pub const HEB_VERSION: u32 = 1;
pub const EMBEDDINGS_FILE: &str = "embeddings.heb";
pub const PAIRS_FILE: &str = "pairs.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
    Caption,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Text => 1,
            Modality::Caption => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Text),
            2 => Some(Modality::Caption),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// `fnv1a64(id) mod 10`: 0..=7 train, 8 val, 9 test.
    pub fn from_hash(id: &str) -> Split {
        match fnv1a64(id) % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split '{other}'"))),
        }
    }
}

/// One encoder output: a `rows × dim` matrix and an optional summary vector.
///
/// A caption stored without `cls` is cls-only: its single matrix row is the
/// caption embedding and it carries no token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub item_id: String,
    pub modality: Modality,
    pub matrix: Tensor,
    pub cls: Option<Tensor>,
}

impl EmbeddingSequence {
    /// Summary vector: the cls row when present, else the single row of a
    /// cls-only caption.
    pub fn summary(&self) -> Option<Tensor> {
        match (&self.cls, self.modality) {
            (Some(c), _) => Some(c.clone()),
            (None, Modality::Caption) if self.matrix.rows() == 1 => Some(self.matrix.clone()),
            _ => None,
        }
    }

    /// Token-level rows, if this sequence has any.
    pub fn tokens(&self) -> Option<&Tensor> {
        match (self.modality, &self.cls) {
            (Modality::Caption, None) => None,
            _ => Some(&self.matrix),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRecord {
    pub audio_id: String,
    pub text_id: String,
    pub caption_id: Option<String>,
    pub split: Split,
}

/// Validated collection of sequences and pairs sharing one feature dimension.
#[derive(Clone, Debug)]
pub struct Bundle {
    dim: usize,
    sequences: Vec<EmbeddingSequence>,
    pairs: Vec<PairRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for Bundle {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.sequences == other.sequences && self.pairs == other.pairs
    }
}

impl Bundle {
    pub fn new(
        dim: usize,
        sequences: Vec<EmbeddingSequence>,
        pairs: Vec<PairRecord>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::data("bundle dimension must be positive"));
        }
        let mut index = HashMap::with_capacity(sequences.len());
        for (i, s) in sequences.iter().enumerate() {
            validate_sequence(s, dim)?;
            if index.insert(s.item_id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate item id '{}'", s.item_id)));
            }
        }
        let bundle = Bundle {
            dim,
            sequences,
            pairs,
            index,
        };
        bundle.validate_pairs()?;
        Ok(bundle)
    }

    fn validate_pairs(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            self.expect_modality(&p.audio_id, Modality::Audio)?;
            self.expect_modality(&p.text_id, Modality::Text)?;
            if let Some(c) = &p.caption_id {
                self.expect_modality(c, Modality::Caption)?;
            }
            if !seen.insert((p.split, p.audio_id.as_str(), p.text_id.as_str())) {
                return Err(Error::data(format!(
                    "duplicate pair ({}, {}) in split {}",
                    p.audio_id,
                    p.text_id,
                    p.split.as_str()
                )));
            }
        }
        Ok(())
    }

    fn expect_modality(&self, id: &str, modality: Modality) -> Result<()> {
        match self.get(id) {
            None => Err(Error::data(format!("pair references missing id '{id}'"))),
            Some(s) if s.modality != modality => Err(Error::data(format!(
                "pair references '{id}' as {modality:?} but it is {:?}",
                s.modality
            ))),
            Some(_) => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sequences(&self) -> &[EmbeddingSequence] {
        &self.sequences
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingSequence> {
        self.index.get(id).map(|&i| &self.sequences[i])
    }

    pub fn require(&self, id: &str) -> Result<&EmbeddingSequence> {
        self.get(id)
            .ok_or_else(|| Error::data(format!("unknown item id '{id}'")))
    }

    pub fn split_pairs(&self, split: Split) -> Vec<PairRecord> {
        self.pairs
            .iter()
            .filter(|p| p.split == split)
            .cloned()
            .collect()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.sequences
            .iter()
            .filter(|s| s.modality == modality)
            .count()
    }
}

fn validate_sequence(s: &EmbeddingSequence, dim: usize) -> Result<()> {
    let (rows, cols) = s
        .matrix
        .dims2()
        .map_err(|_| Error::data(format!("item '{}' matrix is not 2-D", s.item_id)))?;
    if rows == 0 || cols != dim {
        return Err(Error::data(format!(
            "item '{}' has shape {rows}x{cols}, expected rows>=1 and {dim} columns",
            s.item_id
        )));
    }
    if !s.matrix.is_finite() {
        return Err(Error::data(format!(
            "item '{}' has non-finite values",
            s.item_id
        )));
    }
    if let Some(cls) = &s.cls {
        if s.modality == Modality::Audio {
            return Err(Error::data(format!(
                "audio item '{}' must not carry a cls vector",
                s.item_id
            )));
        }
        if cls.shape() != [1, dim] {
            return Err(Error::data(format!(
                "item '{}' cls has shape {:?}, expected [1, {dim}]",
                s.item_id,
                cls.shape()
            )));
        }
        if !cls.is_finite() {
            return Err(Error::data(format!(
                "item '{}' has a non-finite cls",
                s.item_id
            )));
        }
    } else if s.modality == Modality::Caption && rows != 1 {
        return Err(Error::data(format!(
            "caption '{}' without cls must have exactly one row",
            s.item_id
        )));
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::data(format!("{what} {n} exceeds u32")))
}

/// Serializes sequences to HEB1 bytes.
pub fn encode_heb(dim: usize, sequences: &[EmbeddingSequence]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(HEB_MAGIC);
    put_u32(&mut out, HEB_VERSION);
    put_u32(&mut out, to_u32(dim, "dimension")?);
    put_u32(&mut out, to_u32(sequences.len(), "item count")?);
    for s in sequences {
        put_u32(&mut out, to_u32(s.item_id.len(), "id length")?);
        out.extend_from_slice(s.item_id.as_bytes());
        out.push(s.modality.code());
        out.push(u8::from(s.cls.is_some()));
        put_u32(&mut out, to_u32(s.matrix.rows(), "row count")?);
        put_f32s(&mut out, s.matrix.data());
        if let Some(cls) = &s.cls {
            put_f32s(&mut out, cls.data());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::data("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::data("size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }
}

/// Parses HEB1 bytes into `(dim, sequences)`.
pub fn decode_heb(bytes: &[u8]) -> Result<(usize, Vec<EmbeddingSequence>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)
        .map_err(|_| Error::data("bad magic: file too short"))?
        != HEB_MAGIC
    {
        return Err(Error::data("bad magic: not an HCIEMB01 file"));
    }
    let version = r.u32()?;
    if version != HEB_VERSION {
        return Err(Error::data(format!("unsupported HEB version {version}")));
    }
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::data("dimension must be positive"));
    }
    let count = r.u32()? as usize;
    let mut sequences = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let item_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::data("item id is not valid UTF-8"))?
            .to_owned();
        let code = r.u8()?;
        let modality = Modality::from_code(code)
            .ok_or_else(|| Error::data(format!("item '{item_id}': unknown modality {code}")))?;
        let flags = r.u8()?;
        if flags & !1 != 0 {
            return Err(Error::data(format!(
                "item '{item_id}': unknown flags {flags:#x}"
            )));
        }
        let rows = r.u32()? as usize;
        if rows == 0 {
            return Err(Error::data(format!("item '{item_id}' has zero rows")));
        }
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Error::data("size overflow"))?;
        let matrix = Tensor::new(vec![rows, dim], r.f32s(n)?)?;
        let cls = if flags & 1 == 1 {
            Some(Tensor::new(vec![1, dim], r.f32s(dim)?)?)
        } else {
            None
        };
        let seq = EmbeddingSequence {
            item_id,
            modality,
            matrix,
            cls,
        };
        validate_sequence(&seq, dim)?;
        sequences.push(seq);
    }
    if r.pos != bytes.len() {
        return Err(Error::data(format!(
            "{} trailing bytes after last item",
            bytes.len() - r.pos
        )));
    }
    Ok((dim, sequences))
}

pub fn encode_pairs(pairs: &[PairRecord]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(pairs)
        .map_err(|e| Error::data(format!("encoding pairs: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes `bytes` to `path` through a sibling temporary file, so a failed
/// write never leaves a partial target behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Writes `embeddings.heb` and `pairs.json` into `dir`, creating it if needed.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let heb = encode_heb(bundle.dim, &bundle.sequences)?;
    let pairs = encode_pairs(&bundle.pairs)?;
    write_atomic(&dir.join(EMBEDDINGS_FILE), &heb)?;
    write_atomic(&dir.join(PAIRS_FILE), &pairs)
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let heb_path = dir.join(EMBEDDINGS_FILE);
    let pairs_path = dir.join(PAIRS_FILE);
    let heb = fs::read(&heb_path).map_err(|e| Error::io(&heb_path, e))?;
    let (dim, sequences) = decode_heb(&heb)
        .map_err(|e| Error::data(format!("{}: {}", heb_path.display(), strip(e))))?;
    let raw = fs::read(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
    let pairs: Vec<PairRecord> = serde_json::from_slice(&raw)
        .map_err(|e| Error::data(format!("{}: {e}", pairs_path.display())))?;
    Bundle::new(dim, sequences, pairs)
        .map_err(|e| Error::data(format!("{}: {}", dir.display(), strip(e))))
}

fn strip(e: Error) -> String {
    match e {
        Error::Usage(m) | Error::Data(m) => m,
        other => other.to_string(),
    }
}

/// Anything with an audio side and a text side that can be batched.
pub trait Paired {
    fn audio_key(&self) -> &str;
    fn text_key(&self) -> &str;
}

impl Paired for PairRecord {
    fn audio_key(&self) -> &str {
        &self.audio_id
    }

    fn text_key(&self) -> &str {
        &self.text_id
    }
}

/// Indices into a pair list forming one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub pair_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pair_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Pairs left out of this epoch because no conflict-free slot existed.
    pub dropped: usize,
}

/// Seeded shuffle of `pairs` into batches whose audio ids are pairwise
/// distinct and whose text ids are pairwise distinct.
///
/// A pair that collides with its batch is swapped with the first later pair
/// that does not; if none exists it is dropped for this epoch.
pub fn batch_pairs<P: Paired>(
    pairs: &[P],
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    if pairs.is_empty() {
        return Err(Error::data("no pairs to batch"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    Rng::new(seed).shuffle(&mut order);

    let mut batches = Vec::new();
    let mut dropped = 0;
    let mut start = 0;
    while start < order.len() {
        let mut audio = HashSet::new();
        let mut text = HashSet::new();
        let mut members = Vec::with_capacity(batch_size);
        let mut j = start;
        while j < (start + batch_size).min(order.len()) {
            let fits = |k: usize| {
                let p = &pairs[order[k]];
                !audio.contains(p.audio_key()) && !text.contains(p.text_key())
            };
            if !fits(j) {
                let end = (start + batch_size).min(order.len());
                match (end..order.len()).find(|&k| fits(k)) {
                    Some(k) => order.swap(j, k),
                    None => {
                        order.remove(j);
                        dropped += 1;
                        continue;
                    }
                }
            }
            let p = &pairs[order[j]];
            audio.insert(p.audio_key());
            text.insert(p.text_key());
            members.push(order[j]);
            j += 1;
        }
        start = j;
        if !members.is_empty() && (!drop_last || members.len() == batch_size) {
            batches.push(Batch {
                pair_indices: members,
            });
        }
    }
    Ok(Batches { batches, dropped })
}

/// [`batch_pairs`] over one split of a bundle; indices refer to
/// `bundle.split_pairs(split)`.
pub fn make_batches(
    bundle: &Bundle,
    split: Split,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Batches> {
    let pairs = bundle.split_pairs(split);
    if pairs.is_empty() {
        return Err(Error::data(format!("split '{}' is empty", split.as_str())));
    }
    batch_pairs(&pairs, batch_size, seed, drop_last)
}

/// Parameters of the synthetic hierarchical generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub items: usize,
    pub classes: usize,
    pub frames: usize,
    pub words: usize,
    /// Caption token rows; 0 writes cls-only captions.
    pub caption_tokens: usize,
    pub dim: usize,
    /// Noise scale for text words and text cls (and audio/captions unless overridden).
    pub sigma: f64,
    pub audio_sigma: Option<f64>,
    pub caption_sigma: Option<f64>,
    /// Number of per-item events shared between audio segments and text
    /// phrases; 0 disables the offsets.
    pub segments: usize,
    pub offset_scale: f64,
    /// Scale of the per-item deviation added to the class latent.
    pub item_spread: f64,
    /// Gram–Schmidt the class latents (requires classes <= dim).
    pub orthogonal_latents: bool,
    pub captions: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            items: 64,
            classes: 8,
            frames: 20,
            words: 12,
            caption_tokens: 8,
            dim: 16,
            sigma: 0.05,
            audio_sigma: None,
            caption_sigma: None,
            segments: 0,
            offset_scale: 0.5,
            item_spread: 0.7,
            orthogonal_latents: false,
            captions: true,
            seed: 0,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates a bundle with known latent structure.
///
/// Draw order (all from one [`Rng`] seeded with `config.seed`): class
/// latents, then per item in order: item deviation, event offsets, audio
/// frames, text words, text cls, caption tokens, caption cls. Item `k`
/// belongs to class `k mod classes`. Frame `f` carries event
/// `f·segments/frames`, word `w` carries event `w·segments/words`.
/// Values are rounded to `f32` so the in-memory bundle equals its reload.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Bundle> {
    let c = config;
    if c.items == 0 || c.classes == 0 || c.classes > c.items {
        return Err(Error::usage(format!(
            "need 1 <= classes <= items, got classes={} items={}",
            c.classes, c.items
        )));
    }
    if c.dim == 0 || c.frames == 0 || c.words == 0 {
        return Err(Error::usage("dim, frames and words must be positive"));
    }
    let sigmas = [Some(c.sigma), c.audio_sigma, c.caption_sigma];
    if sigmas
        .iter()
        .flatten()
        .any(|s| !(*s >= 0.0) || !s.is_finite())
        || !(c.offset_scale >= 0.0)
        || !(c.item_spread >= 0.0)
    {
        return Err(Error::usage(
            "noise and offset scales must be finite and >= 0",
        ));
    }
    if c.orthogonal_latents && c.classes > c.dim {
        return Err(Error::usage(format!(
            "cannot orthogonalize {} latents in dimension {}",
            c.classes, c.dim
        )));
    }
    let d = c.dim;
    let audio_sigma = c.audio_sigma.unwrap_or(c.sigma);
    let caption_sigma = c.caption_sigma.unwrap_or(c.sigma);
    let mut rng = Rng::new(c.seed);

    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(c.classes);
    for _ in 0..c.classes {
        let mut z = rng.gaussian_vec(d, 1.0);
        if c.orthogonal_latents {
            for prev in &latents {
                let dot: f64 = z.iter().zip(prev).map(|(a, b)| a * b).sum();
                z.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        normalize(&mut z);
        latents.push(z);
    }

    let noisy = |rng: &mut Rng, base: &[f64], sigma: f64| -> Vec<f64> {
        base.iter()
            .map(|&b| round_f32(b + sigma * rng.gaussian()))
            .collect()
    };
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut sequences = Vec::new();
    let mut pairs = Vec::new();
    for k in 0..c.items {
        let mut z = latents[k % c.classes].clone();
        if c.item_spread > 0.0 {
            let dev = rng.gaussian_vec(d, c.item_spread * inv_sqrt_d);
            z.iter_mut().zip(&dev).for_each(|(a, b)| *a += b);
            normalize(&mut z);
        }
        let events: Vec<Vec<f64>> = (0..c.segments)
            .map(|_| rng.gaussian_vec(d, c.offset_scale * inv_sqrt_d))
            .collect();
        let with_event = |row: usize, rows: usize| -> Vec<f64> {
            if events.is_empty() {
                return z.clone();
            }
            let e = &events[row * events.len() / rows];
            z.iter().zip(e).map(|(a, b)| a + b).collect()
        };

        let mut frames = Vec::with_capacity(c.frames * d);
        for f in 0..c.frames {
            frames.extend(noisy(&mut rng, &with_event(f, c.frames), audio_sigma));
        }
        let mut words = Vec::with_capacity(c.words * d);
        for w in 0..c.words {
            words.extend(noisy(&mut rng, &with_event(w, c.words), c.sigma));
        }
        let text_cls = noisy(&mut rng, &z, c.sigma);

        let audio_id = format!("audio-{k:04}");
        let text_id = format!("text-{k:04}");
        let caption_id = format!("caption-{k:04}");
        sequences.push(EmbeddingSequence {
            item_id: audio_id.clone(),
            modality: Modality::Audio,
            matrix: Tensor::new(vec![c.frames, d], frames)?,
            cls: None,
        });
        sequences.push(EmbeddingSequence {
            item_id: text_id.clone(),
            modality: Modality::Text,
            matrix: Tensor::new(vec![c.words, d], words)?,
            cls: Some(Tensor::new(vec![1, d], text_cls)?),
        });
        if c.captions {
            let mut tokens = Vec::with_capacity(c.caption_tokens * d);
            for _ in 0..c.caption_tokens {
                tokens.extend(noisy(&mut rng, &z, caption_sigma));
            }
            let cls = Tensor::new(vec![1, d], noisy(&mut rng, &z, caption_sigma))?;
            let (matrix, cls) = if c.caption_tokens > 0 {
                (Tensor::new(vec![c.caption_tokens, d], tokens)?, Some(cls))
            } else {
                (cls, None)
            };
            sequences.push(EmbeddingSequence {
                item_id: caption_id.clone(),
                modality: Modality::Caption,
                matrix,
                cls,
            });
        }
        pairs.push(PairRecord {
            split: Split::from_hash(&audio_id),
            audio_id,
            text_id,
            caption_id: c.captions.then_some(caption_id),
        });
    }
    Bundle::new(d, sequences, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, t: &str) -> PairRecord {
        PairRecord {
            audio_id: a.into(),
            text_id: t.into(),
            caption_id: None,
            split: Split::Train,
        }
    }

    fn tiny_bundle() -> Bundle {
        Bundle::new(
            1,
            vec![EmbeddingSequence {
                item_id: "a".into(),
                modality: Modality::Audio,
                matrix: Tensor::zeros(&[1, 1]),
                cls: None,
            }],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn single_item_file_layout() {
        let b = tiny_bundle();
        let bytes = encode_heb(b.dim(), b.sequences()).unwrap();
        // header 20 bytes; item: 4 + 1 + 1 + 1 + 4 + 4
        assert_eq!(bytes.len(), 20 + 15);
        assert_eq!(&bytes[..8], b"HCIEMB01");
        let (dim, seqs) = decode_heb(&bytes).unwrap();
        assert_eq!(dim, 1);
        assert_eq!(seqs, b.sequences());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let b = generate_synthetic(&SyntheticConfig {
            items: 4,
            classes: 2,
            ..Default::default()
        })
        .unwrap();
        let bytes = encode_heb(b.dim(), b.sequences()).unwrap();
        let err = decode_heb(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_heb(1, tiny_bundle().sequences()).unwrap();
        bytes[0] = b'X';
        assert!(decode_heb(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn dangling_reference_names_the_id() {
        let b = tiny_bundle();
        let err = Bundle::new(1, b.sequences().to_vec(), vec![pair("a", "ghost")]).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn audio_with_cls_is_rejected() {
        let seq = EmbeddingSequence {
            item_id: "a".into(),
            modality: Modality::Audio,
            matrix: Tensor::zeros(&[1, 2]),
            cls: Some(Tensor::zeros(&[1, 2])),
        };
        assert!(Bundle::new(2, vec![seq], vec![]).is_err());
    }

    fn ten_pairs() -> Vec<PairRecord> {
        (0..10)
            .map(|i| pair(&format!("a{i}"), &format!("t{i}")))
            .collect()
    }

    #[test]
    fn batch_sizes() {
        let pairs = ten_pairs();
        let b = batch_pairs(&pairs, 4, 1, true).unwrap();
        assert_eq!(
            b.batches.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![4, 4]
        );
        let b = batch_pairs(&pairs, 4, 1, false).unwrap();
        assert_eq!(
            b.batches.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
    }

    #[test]
    fn batching_is_deterministic() {
        let pairs = ten_pairs();
        assert_eq!(
            batch_pairs(&pairs, 3, 9, false).unwrap(),
            batch_pairs(&pairs, 3, 9, false).unwrap()
        );
        assert_ne!(
            batch_pairs(&pairs, 10, 9, false).unwrap(),
            batch_pairs(&pairs, 10, 10, false).unwrap()
        );
    }

    #[test]
    fn repair_separates_shared_audio() {
        // every audio appears twice, as with caption augmentation
        let mut pairs = ten_pairs();
        pairs.extend((0..10).map(|i| pair(&format!("a{i}"), &format!("c{i}"))));
        for seed in 0..20 {
            let b = batch_pairs(&pairs, 4, seed, false).unwrap();
            let mut total = b.dropped;
            for batch in &b.batches {
                let audio: HashSet<_> = batch
                    .pair_indices
                    .iter()
                    .map(|&i| &pairs[i].audio_id)
                    .collect();
                assert_eq!(audio.len(), batch.len());
                total += batch.len();
            }
            assert_eq!(total, pairs.len());
        }
    }

    #[test]
    fn unrepairable_pairs_are_dropped() {
        let pairs = vec![pair("a", "t1"), pair("a", "t2"), pair("a", "t3")];
        let b = batch_pairs(&pairs, 3, 0, false).unwrap();
        assert_eq!(b.batches.len(), 1);
        assert_eq!(b.batches[0].len(), 1);
        assert_eq!(b.dropped, 2);
    }

    #[test]
    fn empty_split_is_data_error() {
        let err = make_batches(&tiny_bundle(), Split::Test, 2, 0, false).unwrap_err();
        assert!(!err.is_usage());
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn row_mean(t: &Tensor) -> Vec<f64> {
        t.mean_axis(0).unwrap().into_data()
    }

    #[test]
    fn noiseless_pairs_align() {
        let cfg = SyntheticConfig {
            items: 6,
            classes: 3,
            sigma: 0.0,
            segments: 0,
            item_spread: 0.0,
            orthogonal_latents: true,
            ..Default::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        let mean = |id: &str| row_mean(&b.get(id).unwrap().matrix);
        for p in b.pairs() {
            let c = cosine(&mean(&p.audio_id), &mean(&p.text_id));
            assert!((c - 1.0).abs() < 1e-6, "{c}");
        }
        // items 0 and 1 are of different classes
        let c = cosine(&mean("audio-0000"), &mean("text-0001"));
        assert!(c.abs() < 1e-6, "{c}");
    }

    #[test]
    fn within_pair_beats_cross_class() {
        let b = generate_synthetic(&SyntheticConfig {
            items: 64,
            classes: 8,
            sigma: 0.05,
            dim: 16,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let means: Vec<(Vec<f64>, Vec<f64>)> = b
            .pairs()
            .iter()
            .map(|p| {
                (
                    row_mean(&b.get(&p.audio_id).unwrap().matrix),
                    row_mean(&b.get(&p.text_id).unwrap().matrix),
                )
            })
            .collect();
        let within: f64 = means.iter().map(|(a, t)| cosine(a, t)).sum::<f64>() / means.len() as f64;
        let mut cross = 0.0;
        let mut n = 0;
        for i in 0..64 {
            for j in 0..64 {
                if i % 8 != j % 8 {
                    cross += cosine(&means[i].0, &means[j].1);
                    n += 1;
                }
            }
        }
        cross /= n as f64;
        assert!(within > cross, "within {within} cross {cross}");
        assert!(within > 0.95);
    }

    #[test]
    fn generator_is_reproducible() {
        let cfg = SyntheticConfig {
            items: 10,
            classes: 2,
            segments: 3,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&cfg).unwrap()
        );
    }

    #[test]
    fn invalid_config_is_usage_error() {
        let cfg = SyntheticConfig {
            items: 2,
            classes: 3,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).unwrap_err().is_usage());
        let cfg = SyntheticConfig {
            sigma: -1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).unwrap_err().is_usage());
    }

    #[test]
    fn split_hash_is_roughly_balanced() {
        let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
        for s in Split::ALL {
            assert!(!b.split_pairs(s).is_empty(), "{s:?} empty");
        }
    }
}
