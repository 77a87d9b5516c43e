//! The trainable model: both hierarchies plus the optional co-attention block
//! in one parameter store, and the glue from bundle items to hierarchies.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::aux_caption::{
    co_attend, AcConfig, BoundCoAttention, CaptionRecord, CoAttentionParams, TextSource,
};
use crate::embedding_io::{Bundle, Modality};
use crate::error::{Error, Result};
use crate::hierarchy::{
    build_text_hierarchy, BoundHierarchy, HierarchyConfig, HierarchyParams, MultiGranularityAudio,
    MultiGranularityText,
};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

const COATTN_PREFIX: &str = "coattn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hierarchy: HierarchyConfig,
    pub ac: AcConfig,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        ModelConfig {
            hierarchy: HierarchyConfig::new(dim),
            ac: AcConfig::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.hierarchy.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate()?;
        self.ac.validate(self.hierarchy.dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub hierarchy: HierarchyParams,
    pub coattn: Option<CoAttentionParams>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let hierarchy = HierarchyParams::init(&mut store, &config.hierarchy, &mut rng)?;
        let coattn = Self::init_coattn(&mut store, &config, &mut rng)?;
        Ok(Model {
            config,
            store,
            hierarchy,
            coattn,
        })
    }

    /// Untrained model whose hierarchy passes embeddings through unchanged
    /// (identity projections, uniform pooling, identity `h`).
    pub fn identity(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let hierarchy = HierarchyParams::identity(&mut store, &config.hierarchy)?;
        let coattn = Self::init_coattn(&mut store, &config, &mut Rng::new(0))?;
        Ok(Model {
            config,
            store,
            hierarchy,
            coattn,
        })
    }

    fn init_coattn(
        store: &mut ParamStore,
        config: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Option<CoAttentionParams>> {
        if !config.ac.level.enhance() {
            return Ok(None);
        }
        CoAttentionParams::init(store, COATTN_PREFIX, config.dim(), config.ac.heads, rng).map(Some)
    }

    /// Rebuilds a model from named parameter values. Every parameter the
    /// configuration implies must be present with the matching shape.
    pub fn from_params(config: ModelConfig, params: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Model::init(config, 0)?;
        let given: HashMap<&str, &Tensor> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if given.len() != params.len() {
            return Err(Error::data("duplicate parameter names"));
        }
        let expected: HashSet<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        if let Some(extra) = given.keys().find(|n| !expected.contains(**n)) {
            return Err(Error::data(format!(
                "parameter '{extra}' does not belong to this configuration"
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let value = given
                .get(name.as_str())
                .ok_or_else(|| Error::data(format!("missing parameter '{name}'")))?;
            let want = model.store.value(id).shape().to_vec();
            if value.shape() != want.as_slice() {
                return Err(Error::data(format!(
                    "parameter '{name}' has shape {:?} but the configuration needs {want:?}",
                    value.shape()
                )));
            }
            *model.store.value_mut(id) = (*value).clone();
        }
        Ok(model)
    }

    /// Named parameter values in store order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            config: self.config.clone(),
            hierarchy: self.hierarchy.bind(tape, &self.store),
            coattn: self.coattn.as_ref().map(|c| c.bind(tape, &self.store)),
            tape,
        }
    }
}

/// Model parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel<'t> {
    pub config: ModelConfig,
    pub hierarchy: BoundHierarchy<'t>,
    pub coattn: Option<BoundCoAttention<'t>>,
    tape: &'t Tape,
}

/// Text side of one pair as used by the losses.
#[derive(Clone, Debug)]
pub struct TextItem<'t> {
    pub hierarchy: MultiGranularityText<Var<'t>>,
    /// False when the text has no token rows (a cls-only caption).
    pub fine_grained: bool,
}

impl<'t> BoundModel<'t> {
    /// Audio hierarchy; `caption` (caption rows, already projected) enhances
    /// the frames when the co-attention block is present.
    pub fn audio(
        &self,
        frames: Var<'t>,
        caption: Option<Var<'t>>,
    ) -> Result<MultiGranularityAudio<Var<'t>>> {
        let h = &self.config.hierarchy;
        let s = frames.shape();
        if s.len() != 2 || s[0] == 0 || s[1] != h.dim {
            return Err(Error::usage(format!(
                "frames must be R×{} with R >= 1, got {s:?}",
                h.dim
            )));
        }
        let projected = self.hierarchy.project_audio(frames)?;
        let (Some(block), Some(caption)) = (&self.coattn, caption) else {
            return self.hierarchy.audio_from_frames(projected, h);
        };
        let enhanced = co_attend(projected, caption, block)?.output;
        let full = self.hierarchy.audio_from_frames(enhanced, h)?;
        if !self.config.ac.enhance_clip_only {
            return Ok(full);
        }
        let base = self.hierarchy.audio_from_frames(projected, h)?;
        Ok(MultiGranularityAudio {
            frames: base.frames,
            segments: base.segments,
            clip: full.clip,
        })
    }

    pub fn text(
        &self,
        words: Var<'t>,
        cls: Option<Var<'t>>,
    ) -> Result<MultiGranularityText<Var<'t>>> {
        build_text_hierarchy(words, cls, &self.hierarchy, &self.config.hierarchy)
    }

    /// Caption cls row in the shared text space.
    pub fn caption_cls(&self, caption: &CaptionRecord) -> Result<Var<'t>> {
        self.hierarchy
            .project_text(self.tape.constant(caption.cls.clone()))
    }

    /// Audio hierarchy of a bundle item, enhanced by `caption_id` when given
    /// and the model has a co-attention block.
    pub fn audio_item(
        &self,
        bundle: &Bundle,
        audio_id: &str,
        caption_id: Option<&str>,
    ) -> Result<MultiGranularityAudio<Var<'t>>> {
        let seq = bundle.require(audio_id)?;
        let caption = match (&self.coattn, caption_id) {
            (Some(_), Some(c)) => {
                let rec = CaptionRecord::from_sequence(bundle.require(c)?)?;
                let kv = rec.key_values(self.config.ac.caption_kv).clone();
                Some(self.hierarchy.project_text(self.tape.constant(kv))?)
            }
            _ => None,
        };
        self.audio(self.tape.constant(seq.matrix.clone()), caption)
    }

    /// Text hierarchy of a bundle item. A caption used as text contributes its
    /// token rows as words, or its cls row when it has no tokens.
    pub fn text_item(&self, bundle: &Bundle, id: &str, source: TextSource) -> Result<TextItem<'t>> {
        let seq = bundle.require(id)?;
        let c = |t: &Tensor| self.tape.constant(t.clone());
        match source {
            TextSource::Text => Ok(TextItem {
                hierarchy: self.text(c(&seq.matrix), seq.cls.as_ref().map(c))?,
                fine_grained: true,
            }),
            TextSource::Caption => {
                let rec = CaptionRecord::from_sequence(seq)?;
                let words = rec.tokens.as_ref().unwrap_or(&rec.cls);
                Ok(TextItem {
                    hierarchy: self.text(c(words), Some(c(&rec.cls)))?,
                    fine_grained: rec.tokens.is_some(),
                })
            }
        }
    }
}

/// First caption paired with each audio id.
pub fn caption_index(bundle: &Bundle) -> HashMap<String, String> {
    let mut out = HashMap::new();
    for p in bundle.pairs() {
        if let Some(c) = &p.caption_id {
            out.entry(p.audio_id.clone()).or_insert_with(|| c.clone());
        }
    }
    out
}

/// Detached caption records for the listed audio ids (`None` where the audio
/// has no caption).
pub fn captions_for(bundle: &Bundle, audio_ids: &[String]) -> Result<Vec<Option<CaptionRecord>>> {
    let index = caption_index(bundle);
    audio_ids
        .iter()
        .map(|a| {
            index
                .get(a)
                .map(|c| {
                    let seq = bundle.require(c)?;
                    debug_assert_eq!(seq.modality, Modality::Caption);
                    CaptionRecord::from_sequence(seq)
                })
                .transpose()
        })
        .collect()
}
