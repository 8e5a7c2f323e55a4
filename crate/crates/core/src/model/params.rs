use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    AttentionVars, DecoderLayerVars, EncoderLayerVars, FeedForwardVars, LinearVars, NormVars,
};
use super::{ClipAggregation, ModelConfig};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }
}

/// Graph leaves for a subset of the store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn bind(g: &mut Graph, store: &ParamStore, ids: &[ParamId], trainable: bool) -> Bound {
        let mut vars = vec![None; store.len()];
        for &id in ids {
            vars[id.0] = Some(g.leaf(store.get(id).value.clone(), trainable));
        }
        Bound { vars }
    }

    /// Uses caller-created leaves, e.g. the ones a gradient check perturbs.
    pub fn from_vars(store: &ParamStore, pairs: &[(ParamId, Var)]) -> Bound {
        let mut vars = vec![None; store.len()];
        for &(id, v) in pairs {
            vars[id.0] = Some(v);
        }
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter was not bound to this graph")
    }

    pub fn try_get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn resolve(&self, b: &Bound) -> LinearVars {
        LinearVars {
            weight: b.get(self.weight),
            bias: b.get(self.bias),
        }
    }

    fn ids(&self, out: &mut Vec<ParamId>) {
        out.extend([self.weight, self.bias]);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn resolve(&self, b: &Bound) -> NormVars {
        NormVars {
            gain: b.get(self.gain),
            bias: b.get(self.bias),
        }
    }

    fn ids(&self, out: &mut Vec<ParamId>) {
        out.extend([self.gain, self.bias]);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn resolve(&self, b: &Bound, heads: usize) -> AttentionVars {
        AttentionVars {
            q: self.q.resolve(b),
            k: self.k.resolve(b),
            v: self.v.resolve(b),
            out: self.out.resolve(b),
            heads,
        }
    }

    fn ids(&self, out: &mut Vec<ParamId>) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.ids(out);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn resolve(&self, b: &Bound) -> FeedForwardVars {
        FeedForwardVars {
            up: self.up.resolve(b),
            down: self.down.resolve(b),
        }
    }

    fn ids(&self, out: &mut Vec<ParamId>) {
        self.up.ids(out);
        self.down.ids(out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub norm_attn: Norm,
    pub ff: FeedForward,
    pub norm_ff: Norm,
}

impl EncoderLayer {
    pub fn resolve(&self, b: &Bound, heads: usize) -> EncoderLayerVars {
        EncoderLayerVars {
            attn: self.attn.resolve(b, heads),
            norm_attn: self.norm_attn.resolve(b),
            ff: self.ff.resolve(b),
            norm_ff: self.norm_ff.resolve(b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attn: Option<(Attention, Norm)>,
    pub cross: Attention,
    pub norm_cross: Norm,
    pub ff: FeedForward,
    pub norm_ff: Norm,
}

impl DecoderLayer {
    pub fn resolve(&self, b: &Bound, heads: usize) -> DecoderLayerVars {
        DecoderLayerVars {
            self_attn: self
                .self_attn
                .map(|(a, n)| (a.resolve(b, heads), n.resolve(b))),
            cross: self.cross.resolve(b, heads),
            norm_cross: self.norm_cross.resolve(b),
            ff: self.ff.resolve(b),
            norm_ff: self.norm_ff.resolve(b),
        }
    }
}

/// Everything the inference path reads: clip aggregation, projection,
/// positional encodings, classification tokens, encoder and classifier.
#[derive(Clone, Debug)]
pub struct EncoderLayout {
    pub clip_agg: Option<Linear>,
    pub proj: Linear,
    pub pos_enc: ParamId,
    pub cls_verb: ParamId,
    pub cls_noun: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub verb_head: Linear,
    pub noun_head: Linear,
}

impl EncoderLayout {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(l) = &self.clip_agg {
            l.ids(&mut out);
        }
        self.proj.ids(&mut out);
        out.extend([self.pos_enc, self.cls_verb, self.cls_noun]);
        for l in &self.layers {
            l.attn.ids(&mut out);
            l.norm_attn.ids(&mut out);
            l.ff.ids(&mut out);
            l.norm_ff.ids(&mut out);
        }
        self.verb_head.ids(&mut out);
        self.noun_head.ids(&mut out);
        out
    }
}

/// Training-only reconstruction branch: both decoders and the token head.
#[derive(Clone, Debug)]
pub struct ReconLayout {
    pub visual: Vec<DecoderLayer>,
    pub text: Vec<DecoderLayer>,
    pub text_head: Linear,
}

impl ReconLayout {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for l in self.visual.iter().chain(&self.text) {
            if let Some((a, n)) = &l.self_attn {
                a.ids(&mut out);
                n.ids(&mut out);
            }
            l.cross.ids(&mut out);
            l.norm_cross.ids(&mut out);
            l.ff.ids(&mut out);
            l.norm_ff.ids(&mut out);
        }
        self.text_head.ids(&mut out);
        out
    }
}

pub(crate) const TEXT_PREFIXES: [&str; 3] = ["dec_t.", "text_head.", "text_embed."];
pub(crate) const RECON_PREFIXES: [&str; 3] = ["dec_v.", "dec_t.", "text_head."];

enum Init {
    FanIn(usize),
    Zeros,
    Ones,
    Uniform(f64),
    Stacked(usize, usize),
}

enum Source<'a> {
    Random(&'a mut ChaCha8Rng),
    Load {
        tensors: &'a mut BTreeMap<String, Tensor>,
        problems: Vec<String>,
    },
}

pub(crate) struct Registrar<'a> {
    store: &'a mut ParamStore,
    source: Source<'a>,
}

impl<'a> Registrar<'a> {
    pub(crate) fn random(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Registrar {
            store,
            source: Source::Random(rng),
        }
    }

    pub(crate) fn load(store: &'a mut ParamStore, tensors: &'a mut BTreeMap<String, Tensor>) -> Self {
        Registrar {
            store,
            source: Source::Load {
                tensors,
                problems: Vec::new(),
            },
        }
    }

    pub(crate) fn mark(&self) -> usize {
        self.store.len()
    }

    /// Problems recorded while loading (missing names, shape mismatches).
    pub(crate) fn take_problems(&mut self) -> Vec<String> {
        match &mut self.source {
            Source::Load { problems, .. } => std::mem::take(problems),
            Source::Random(_) => Vec::new(),
        }
    }

    pub(crate) fn rollback(&mut self, mark: usize) {
        self.store.truncate(mark);
    }

    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let value = match &mut self.source {
            Source::Random(rng) => initial_value(rng, shape, init),
            Source::Load { tensors, problems } => match tensors.remove(&name) {
                Some(t) if t.shape() == shape => t,
                Some(t) => {
                    problems.push(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    ));
                    Tensor::zeros(shape)
                }
                None => {
                    problems.push(format!("{name}: missing"));
                    Tensor::zeros(shape)
                }
            },
        };
        self.store.push(name, value)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: self.tensor(format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in)),
            bias: self.tensor(format!("{name}.bias"), &[d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.tensor(format!("{name}.gain"), &[d], Init::Ones),
            bias: self.tensor(format!("{name}.bias"), &[d], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, d_ff),
            down: self.linear(&format!("{name}.down"), d_ff, d),
        }
    }

    pub(crate) fn encoder(&mut self, cfg: &ModelConfig) -> EncoderLayout {
        let d = cfg.d_model;
        let clip_agg = match cfg.clip_aggregation {
            ClipAggregation::Mean => None,
            ClipAggregation::Relational => {
                let k = cfg.clips_sampled;
                let weight = self.tensor(
                    "clip_agg.weight".into(),
                    &[k * cfg.d_visual, cfg.d_visual],
                    Init::Stacked(k, cfg.d_visual),
                );
                let bias = self.tensor("clip_agg.bias".into(), &[cfg.d_visual], Init::Zeros);
                Some(Linear { weight, bias })
            }
        };
        let proj = self.linear("proj", cfg.d_visual, d);
        let pos_enc = self.tensor("pos_enc".into(), &[cfg.window, d], Init::Uniform(0.5));
        let cls_verb = self.tensor("cls_verb".into(), &[d], Init::Uniform(0.5));
        let cls_noun = self.tensor("cls_noun".into(), &[d], Init::Uniform(0.5));
        let layers = (0..cfg.n_enc_layers)
            .map(|l| EncoderLayer {
                attn: self.attention(&format!("enc.{l}.attn"), d),
                norm_attn: self.norm(&format!("enc.{l}.norm_attn"), d),
                ff: self.feed_forward(&format!("enc.{l}.ff"), d, cfg.d_ff),
                norm_ff: self.norm(&format!("enc.{l}.norm_ff"), d),
            })
            .collect();
        let verb_head = self.linear("head.verb", d, cfg.n_verbs);
        let noun_head = self.linear("head.noun", d, cfg.n_nouns);
        EncoderLayout {
            clip_agg,
            proj,
            pos_enc,
            cls_verb,
            cls_noun,
            layers,
            verb_head,
            noun_head,
        }
    }

    fn decoder(&mut self, prefix: &str, cfg: &ModelConfig) -> Vec<DecoderLayer> {
        let d = cfg.d_model;
        (0..cfg.n_dec_layers)
            .map(|l| {
                let name = format!("{prefix}.{l}");
                DecoderLayer {
                    self_attn: cfg.decoder_self_attention.then(|| {
                        (
                            self.attention(&format!("{name}.self_attn"), d),
                            self.norm(&format!("{name}.norm_self"), d),
                        )
                    }),
                    cross: self.attention(&format!("{name}.cross_attn"), d),
                    norm_cross: self.norm(&format!("{name}.norm_cross"), d),
                    ff: self.feed_forward(&format!("{name}.ff"), d, cfg.d_ff),
                    norm_ff: self.norm(&format!("{name}.norm_ff"), d),
                }
            })
            .collect()
    }

    pub(crate) fn recon(&mut self, cfg: &ModelConfig) -> ReconLayout {
        ReconLayout {
            visual: self.decoder("dec_v", cfg),
            text: self.decoder("dec_t", cfg),
            text_head: self.linear("text_head", cfg.d_model, cfg.vocab_size),
        }
    }
}

fn initial_value(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor {
    let mut t = Tensor::zeros(shape);
    match init {
        Init::Zeros => {}
        Init::Ones => t.values_mut().fill(1.0),
        Init::FanIn(fan_in) => {
            let a = 1.0 / (fan_in as f64).sqrt();
            t.values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-a..a));
        }
        Init::Uniform(a) => t
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-a..a)),
        Init::Stacked(k, width) => {
            // [I/k; I/k; ...]: starts out as the clip mean.
            let cols = width;
            for c in 0..k {
                for i in 0..width {
                    t.values_mut()[(c * width + i) * cols + i] = 1.0 / k as f64;
                }
            }
        }
    }
    t
}
