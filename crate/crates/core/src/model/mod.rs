//! The sequence model: a post-norm transformer encoder over a window of
//! action features with learned absolute positional encodings and two
//! appended classification tokens (verb, noun), a center-masking step, two
//! cross-attending reconstruction decoders (visual, text), and the verb/noun
//! classifier heads.
//!
//! Graph-level methods work on whole minibatches: `n` windows of `W` rows
//! stacked along the row axis. The `*_sequence` helpers wrap them for a
//! single window without gradient tracking.

pub mod checkpoint;
pub mod layers;
pub mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use layers::CrossAttentionValues;
pub use params::{Bound, EncoderLayout, Param, ParamId, ParamStore, ReconLayout};

use crate::tensor::{Graph, Tensor, TensorError, Var};
use params::{Registrar, RECON_PREFIXES, TEXT_PREFIXES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("window length mismatch: expected {expected} rows, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("window length {0} is even; the center action is undefined")]
    EvenWindow(usize),
    #[error("visual input width {got} does not match the expected {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("modality mismatch: {0}")]
    Modality(String),
    #[error("model has no reconstruction branch")]
    NoReconstruction,
    #[error("parameter problems: {}", .0.join("; "))]
    Params(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipAggregation {
    /// Arithmetic mean of the sampled clips.
    #[default]
    Mean,
    /// Learned affine map over the ordered concatenation of sampled clips.
    Relational,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Window length `W` (odd).
    pub window: usize,
    pub d_model: usize,
    pub d_visual: usize,
    pub d_text: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub vocab_size: usize,
    pub cross_attention_values: CrossAttentionValues,
    pub decoder_self_attention: bool,
    pub layer_norm_eps: f64,
    pub clip_aggregation: ClipAggregation,
    pub clips_sampled: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 5,
            d_model: 768,
            d_visual: 1024,
            d_text: 768,
            d_ff: 3072,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 8,
            n_verbs: 97,
            n_nouns: 300,
            vocab_size: 512,
            cross_attention_values: CrossAttentionValues::QueryStream,
            decoder_self_attention: true,
            layer_norm_eps: 1e-5,
            clip_aggregation: ClipAggregation::Mean,
            clips_sampled: 5,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.window == 0 || self.window % 2 == 0 {
            v.push(format!("model.window must be odd and >= 1, got {}", self.window));
        }
        for (name, val) in [
            ("d_model", self.d_model),
            ("d_visual", self.d_visual),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_verbs", self.n_verbs),
            ("n_nouns", self.n_nouns),
            ("vocab_size", self.vocab_size),
            ("clips_sampled", self.clips_sampled),
        ] {
            if val == 0 {
                v.push(format!("model.{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            v.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_text != self.d_model {
            v.push(format!(
                "model.d_text ({}) must equal model.d_model ({})",
                self.d_text, self.d_model
            ));
        }
        if !(self.layer_norm_eps >= 0.0 && self.layer_norm_eps.is_finite()) {
            v.push("model.layer_norm_eps must be finite and >= 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(v))
        }
    }

    /// Width of one window row fed to the model.
    pub fn visual_input_width(&self) -> usize {
        match self.clip_aggregation {
            ClipAggregation::Mean => self.d_visual,
            ClipAggregation::Relational => self.clips_sampled * self.d_visual,
        }
    }

    pub fn center(&self) -> usize {
        self.window / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Text,
}

/// Per-window activations. Text sequences carry no classification slots.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub positions: Tensor,
    pub cls_slots: Option<Tensor>,
    pub modality: Modality,
}

impl EncodedSequence {
    /// The text stream is the identity of its input features.
    pub fn text(features: Tensor) -> Self {
        EncodedSequence {
            positions: features,
            cls_slots: None,
            modality: Modality::Text,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.rows() + self.cls_slots.as_ref().map_or(0, |c| c.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zeros the center row of the `W` positions; classification slots are
/// left untouched.
pub fn mask_center(seq: &EncodedSequence) -> Result<EncodedSequence> {
    let w = seq.positions.rows();
    if w % 2 == 0 {
        return Err(ModelError::EvenWindow(w));
    }
    let cols = seq.positions.cols();
    let mut data = seq.positions.values().to_vec();
    data[(w / 2) * cols..(w / 2 + 1) * cols].fill(0.0);
    Ok(EncodedSequence {
        positions: Tensor::new(seq.positions.shape().to_vec(), data)?,
        cls_slots: seq.cls_slots.clone(),
        modality: seq.modality,
    })
}

/// Graph handles for an encoded minibatch: `positions` has `n·W` rows and
/// `cls` has `2·n` rows ordered `(window, slot)` with slot 0 = verb.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    pub positions: Var,
    pub cls: Var,
    pub windows: usize,
}

#[derive(Clone, Debug)]
pub struct SeqDgModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: EncoderLayout,
    recon: Option<ReconLayout>,
}

impl SeqDgModel {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Registrar::random(&mut store, &mut rng);
        let encoder = reg.encoder(&config);
        let recon = Some(reg.recon(&config));
        Ok(SeqDgModel {
            config,
            store,
            encoder,
            recon,
        })
    }

    /// Rebuilds a model from named tensors. The encoder side must be
    /// complete; the reconstruction branch is restored only when all of its
    /// tensors are present. Frozen text-embedding tensors are ignored.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(ModelError::Params(vec![format!("{name}: duplicated")]));
            }
        }
        let mut store = ParamStore::default();
        let (encoder, recon) = {
            let mut reg = Registrar::load(&mut store, &mut map);
            let encoder = reg.encoder(&config);
            let problems = reg.take_problems();
            if !problems.is_empty() {
                return Err(ModelError::Params(problems));
            }
            let mark = reg.mark();
            let recon = reg.recon(&config);
            let recon = if reg.take_problems().is_empty() {
                Some(recon)
            } else {
                reg.rollback(mark);
                None
            };
            (encoder, recon)
        };
        let unknown: Vec<String> = map
            .keys()
            .filter(|k| {
                !TEXT_PREFIXES.iter().any(|p| k.starts_with(p))
                    && !RECON_PREFIXES.iter().any(|p| k.starts_with(p))
            })
            .map(|k| format!("{k}: unknown parameter"))
            .collect();
        if !unknown.is_empty() {
            return Err(ModelError::Params(unknown));
        }
        Ok(SeqDgModel {
            config,
            store,
            encoder,
            recon,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder_layout(&self) -> &EncoderLayout {
        &self.encoder
    }

    pub fn recon_layout(&self) -> Option<&ReconLayout> {
        self.recon.as_ref()
    }

    pub fn has_reconstruction(&self) -> bool {
        self.recon.is_some()
    }

    /// Named copies of every parameter, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn inference_param_ids(&self) -> Vec<ParamId> {
        self.encoder.ids()
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.ids();
        if let Some(r) = &self.recon {
            ids.extend(r.ids());
        }
        ids
    }

    pub fn bind_all(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound::bind(g, &self.store, &self.all_param_ids(), trainable)
    }

    /// Binds only what classification needs, as constants.
    pub fn bind_inference(&self, g: &mut Graph) -> Bound {
        Bound::bind(g, &self.store, &self.inference_param_ids(), false)
    }

    /// Projects `n·W` visual rows, adds positional encodings, appends the
    /// verb and noun tokens to every window and runs the encoder stack.
    pub fn encode(&self, g: &mut Graph, b: &Bound, visual: Var) -> Result<EncodedBatch> {
        let cfg = &self.config;
        let w = cfg.window;
        let x = g.value(visual);
        if x.cols() != cfg.visual_input_width() {
            return Err(ModelError::InputWidth {
                expected: cfg.visual_input_width(),
                got: x.cols(),
            });
        }
        if x.rows() % w != 0 {
            return Err(ModelError::WindowLength {
                expected: w,
                got: x.rows(),
            });
        }
        let n = x.rows() / w;
        let mut h = visual;
        if let Some(agg) = &self.encoder.clip_agg {
            h = agg.resolve(b).apply(g, h)?;
        }
        h = self.encoder.proj.resolve(b).apply(g, h)?;

        let pe = b.get(self.encoder.pos_enc);
        let tiled: Vec<(usize, usize)> = (0..n * w).map(|r| (0, r % w)).collect();
        let pe = g.gather_rows(&[pe], &tiled)?;
        h = g.add(h, pe)?;

        let cls_verb = b.get(self.encoder.cls_verb);
        let cls_noun = b.get(self.encoder.cls_noun);
        let seq = w + 2;
        let mut picks = Vec::with_capacity(n * seq);
        for s in 0..n {
            picks.extend((0..w).map(|i| (0, s * w + i)));
            picks.push((1, 0));
            picks.push((2, 0));
        }
        h = g.gather_rows(&[h, cls_verb, cls_noun], &picks)?;
        for layer in &self.encoder.layers {
            let vars = layer.resolve(b, cfg.n_heads);
            h = layers::encoder_layer(g, h, &vars, seq, cfg.layer_norm_eps)?;
        }
        let pos: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| (0..w).map(move |i| (0, s * seq + i)))
            .collect();
        let positions = g.gather_rows(&[h], &pos)?;
        let slots: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| [(0, s * seq + w), (0, s * seq + w + 1)])
            .collect();
        let cls = g.gather_rows(&[h], &slots)?;
        Ok(EncodedBatch {
            positions,
            cls,
            windows: n,
        })
    }

    /// Zeros the center row of every window in an `n·W`-row tensor.
    pub fn mask_center(&self, g: &mut Graph, positions: Var) -> Result<Var> {
        let w = self.config.window;
        let rows = g.value(positions).rows();
        if rows % w != 0 {
            return Err(ModelError::WindowLength { expected: w, got: rows });
        }
        let centers: Vec<usize> = (0..rows / w).map(|s| s * w + w / 2).collect();
        Ok(g.zero_rows(positions, &centers)?)
    }

    /// Runs the decoder for `which` over the masked stream, cross-attending to
    /// the unmasked context stream of the other modality.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        masked: Var,
        context: Var,
        which: Modality,
    ) -> Result<Var> {
        let recon = self.recon.as_ref().ok_or(ModelError::NoReconstruction)?;
        let cfg = &self.config;
        let (rm, rc) = (g.value(masked).rows(), g.value(context).rows());
        if rm != rc || rm % cfg.window != 0 {
            return Err(ModelError::WindowLength {
                expected: rm,
                got: rc,
            });
        }
        let stack = match which {
            Modality::Visual => &recon.visual,
            Modality::Text => &recon.text,
        };
        let mut h = masked;
        for layer in stack {
            let vars = layer.resolve(b, cfg.n_heads);
            h = layers::decoder_layer(
                g,
                h,
                context,
                &vars,
                cfg.window,
                cfg.cross_attention_values,
                cfg.layer_norm_eps,
            )?;
        }
        Ok(h)
    }

    /// Verb logits from slot 0 and noun logits from slot 1 of each window.
    pub fn classify(&self, g: &mut Graph, b: &Bound, cls: Var) -> Result<(Var, Var)> {
        let rows = g.value(cls).rows();
        if rows % 2 != 0 {
            return Err(ModelError::WindowLength { expected: 2, got: rows });
        }
        let n = rows / 2;
        let verb_rows: Vec<(usize, usize)> = (0..n).map(|s| (0, 2 * s)).collect();
        let noun_rows: Vec<(usize, usize)> = (0..n).map(|s| (0, 2 * s + 1)).collect();
        let verb_in = g.gather_rows(&[cls], &verb_rows)?;
        let noun_in = g.gather_rows(&[cls], &noun_rows)?;
        let verb = self.encoder.verb_head.resolve(b).apply(g, verb_in)?;
        let noun = self.encoder.noun_head.resolve(b).apply(g, noun_in)?;
        Ok((verb, noun))
    }

    /// Vocabulary logits for the center row of each reconstructed text window.
    pub fn text_logits(&self, g: &mut Graph, b: &Bound, recon_text: Var) -> Result<Var> {
        let recon = self.recon.as_ref().ok_or(ModelError::NoReconstruction)?;
        let w = self.config.window;
        let n = g.value(recon_text).rows() / w;
        let centers: Vec<(usize, usize)> = (0..n).map(|s| (0, s * w + w / 2)).collect();
        let c = g.gather_rows(&[recon_text], &centers)?;
        Ok(recon.text_head.resolve(b).apply(g, c)?)
    }

    /// Encodes one window of `W` visual rows.
    pub fn encode_sequence(&self, visual: &Tensor) -> Result<EncodedSequence> {
        if visual.rows() != self.config.window {
            return Err(ModelError::WindowLength {
                expected: self.config.window,
                got: visual.rows(),
            });
        }
        let mut g = Graph::new();
        let b = self.bind_inference(&mut g);
        let x = g.constant(visual.clone());
        let enc = self.encode(&mut g, &b, x)?;
        Ok(EncodedSequence {
            positions: g.value(enc.positions).clone(),
            cls_slots: Some(g.value(enc.cls).clone()),
            modality: Modality::Visual,
        })
    }

    /// Reconstructs one window. The visual decoder takes masked visual plus
    /// text context; the text decoder takes masked text plus visual context.
    pub fn decode_sequence(
        &self,
        masked: &EncodedSequence,
        context: &EncodedSequence,
        which: Modality,
    ) -> Result<Tensor> {
        let other = match which {
            Modality::Visual => Modality::Text,
            Modality::Text => Modality::Visual,
        };
        if masked.modality != which || context.modality != other {
            return Err(ModelError::Modality(format!(
                "{which:?} decoder needs {which:?} masked input and {other:?} context, got {:?} and {:?}",
                masked.modality, context.modality
            )));
        }
        let mut g = Graph::new();
        let b = self.bind_all(&mut g, false);
        let m = g.constant(masked.positions.clone());
        let c = g.constant(context.positions.clone());
        let out = self.decode(&mut g, &b, m, c, which)?;
        Ok(g.value(out).clone())
    }

    /// Raw verb and noun logits for one window's classification slots.
    pub fn classify_slots(&self, cls_slots: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind_inference(&mut g);
        let c = g.constant(cls_slots.clone());
        let (v, n) = self.classify(&mut g, &b, c)?;
        Ok((
            g.value(v).values().to_vec(),
            g.value(n).values().to_vec(),
        ))
    }
}
