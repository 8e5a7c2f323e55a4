//! Synthetic multi-domain feature datasets where sequence context is needed.
//!
//! Actions are organised in scripts of five `[M, C, A, E, P]`. Videos are
//! chains of whole scripts, the next script chosen uniformly. Scripts come in
//! pairs whose interior actions `C, A, E` share a prototype with their
//! counterpart in the partner script, so a single action cannot tell them
//! apart. `C` and `E` are resolved by an adjacent distinct action; `A` only by
//! actions two steps away, which needs a window of five.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    io_err, ActionRecord, DataError, DomainEntry, DomainRole, FeatureStore, Manifest,
    MANIFEST_VERSION,
};
use crate::rng::stream;

pub const SCRIPT_LEN: usize = 5;
/// Script positions whose prototypes are shared within a script pair.
const AMBIGUOUS_POSITIONS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("generator truth: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_source_domains: usize,
    pub n_target_domains: usize,
    /// One action class per verb; must be a multiple of five.
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub n_ambiguous_pairs: usize,
    pub videos_per_domain: usize,
    pub actions_per_video: usize,
    pub clips_per_action: usize,
    pub d_visual: usize,
    pub d_text: usize,
    /// Rotation angle bound (radians), scale spread and offset size of the
    /// per-domain transforms. Zero gives identity transforms.
    pub domain_shift: f64,
    /// Per-clip Gaussian noise standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_source_domains: 4,
            n_target_domains: 1,
            n_verbs: 20,
            n_nouns: 20,
            n_ambiguous_pairs: 6,
            videos_per_domain: 8,
            actions_per_video: 50,
            clips_per_action: 10,
            d_visual: 64,
            d_text: 32,
            domain_shift: 0.5,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_scripts(&self) -> usize {
        self.n_verbs / SCRIPT_LEN
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_verbs == 0 || self.n_verbs % SCRIPT_LEN != 0 {
            v.push(format!(
                "synth.n_verbs must be a positive multiple of {SCRIPT_LEN}, got {}",
                self.n_verbs
            ));
        }
        let max_pairs = AMBIGUOUS_POSITIONS.len() * (self.n_scripts() / 2);
        if self.n_ambiguous_pairs > max_pairs {
            v.push(format!(
                "synth.n_ambiguous_pairs {} exceeds {max_pairs} for {} scripts",
                self.n_ambiguous_pairs,
                self.n_scripts()
            ));
        }
        let nouns_needed = self.n_verbs.saturating_sub(self.n_ambiguous_pairs);
        if self.n_nouns < nouns_needed {
            v.push(format!(
                "synth.n_nouns must be >= {nouns_needed}, got {}",
                self.n_nouns
            ));
        }
        for (name, x) in [
            ("n_source_domains", self.n_source_domains),
            ("videos_per_domain", self.videos_per_domain),
            ("actions_per_video", self.actions_per_video),
            ("clips_per_action", self.clips_per_action),
            ("d_visual", self.d_visual),
            ("d_text", self.d_text),
        ] {
            if x == 0 {
                v.push(format!("synth.{name} must be >= 1"));
            }
        }
        for (name, x) in [("domain_shift", self.domain_shift), ("noise_sigma", self.noise_sigma)] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("synth.{name} must be finite and >= 0, got {x}"));
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionClass {
    pub verb: usize,
    pub noun: usize,
    pub script: usize,
    pub position: usize,
    /// Actions sharing a group have identical prototypes.
    pub group: usize,
}

/// `x ↦ scale · rotation · x + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub id: u32,
    pub role: DomainRole,
    /// Row-major `d_visual × d_visual`.
    pub rotation: Vec<f64>,
    pub scale: f64,
    pub offset: Vec<f64>,
}

impl DomainTransform {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| {
                let row = &self.rotation[i * d..(i + 1) * d];
                self.scale * row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>() + self.offset[i]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    /// Probability of each action opening a video.
    pub initial: Vec<f64>,
    /// Row-major `n_actions × n_actions`, rows sum to one.
    pub transitions: Vec<f64>,
}

impl Grammar {
    pub fn n_actions(&self) -> usize {
        self.initial.len()
    }

    pub fn p(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.n_actions() + to]
    }

    /// Chains of whole scripts, the next script drawn uniformly.
    pub fn scripts(n_scripts: usize) -> Grammar {
        let n = n_scripts * SCRIPT_LEN;
        let mut initial = vec![0.0; n];
        let mut transitions = vec![0.0; n * n];
        for s in 0..n_scripts {
            initial[s * SCRIPT_LEN] = 1.0 / n_scripts as f64;
        }
        for a in 0..n {
            if a % SCRIPT_LEN + 1 < SCRIPT_LEN {
                transitions[a * n + a + 1] = 1.0;
            } else {
                for s in 0..n_scripts {
                    transitions[a * n + s * SCRIPT_LEN] = 1.0 / n_scripts as f64;
                }
            }
        }
        Grammar {
            initial,
            transitions,
        }
    }

    pub fn uniform(n: usize) -> Grammar {
        Grammar {
            initial: vec![1.0 / n as f64; n],
            transitions: vec![1.0 / n as f64; n * n],
        }
    }

    fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let draw = |probs: &[f64], rng: &mut dyn rand::RngCore| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        };
        let n = self.n_actions();
        let mut seq = Vec::with_capacity(len);
        let mut cur = draw(&self.initial, rng);
        seq.push(cur);
        while seq.len() < len {
            cur = draw(&self.transitions[cur * n..(cur + 1) * n], rng);
            seq.push(cur);
        }
        seq
    }

    /// Marginal distribution of the action at each of `len` positions.
    pub fn marginals(&self, len: usize) -> Vec<Vec<f64>> {
        let n = self.n_actions();
        let mut out = Vec::with_capacity(len);
        let mut cur = self.initial.clone();
        for _ in 0..len {
            let mut next = vec![0.0; n];
            for (a, &pa) in cur.iter().enumerate() {
                if pa > 0.0 {
                    for (b, nb) in next.iter_mut().enumerate() {
                        *nb += pa * self.p(a, b);
                    }
                }
            }
            out.push(std::mem::replace(&mut cur, next));
        }
        out
    }
}

/// Everything the generator used, for oracle computations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub actions: Vec<ActionClass>,
    pub grammar: Grammar,
    /// One row of `d_visual` per prototype group.
    pub prototypes: Vec<Vec<f64>>,
    pub domains: Vec<DomainTransform>,
}

impl SynthTruth {
    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn action_of(&self, verb: usize, noun: usize) -> Option<usize> {
        self.actions.iter().position(|a| a.verb == verb && a.noun == noun)
    }

    pub fn group_members(&self, action: usize) -> Vec<usize> {
        let g = self.actions[action].group;
        (0..self.n_actions()).filter(|&a| self.actions[a].group == g).collect()
    }

    pub fn domain(&self, id: u32) -> Option<&DomainTransform> {
        self.domains.iter().find(|d| d.id == id)
    }

    /// Noise-free feature of `action` as observed in `domain`.
    pub fn mean_feature(&self, action: usize, domain: u32) -> Vec<f64> {
        let proto = &self.prototypes[self.actions[action].group];
        self.domain(domain).expect("known domain").apply(proto)
    }

    /// Posterior over actions for one instance's clips (clip-major), using
    /// the generator's own densities and the marginal action frequency.
    pub fn bayes_posterior(&self, clips: &[f32], domain: u32) -> Vec<f64> {
        let d = self.config.d_visual;
        let sigma = self.config.noise_sigma;
        let prior = self.stationary();
        let log_lik: Vec<f64> = (0..self.n_actions())
            .map(|a| {
                let mu = self.mean_feature(a, domain);
                let sq: f64 = clips
                    .chunks_exact(d)
                    .flat_map(|c| c.iter().zip(&mu).map(|(&x, m)| (f64::from(x) - m).powi(2)))
                    .sum();
                if prior[a] == 0.0 {
                    f64::NEG_INFINITY
                } else if sigma == 0.0 {
                    if sq < 1e-9 { prior[a].ln() } else { f64::NEG_INFINITY }
                } else {
                    prior[a].ln() - sq / (2.0 * sigma * sigma)
                }
            })
            .collect();
        let m = log_lik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_lik.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }

    /// Average action frequency over a video.
    pub fn stationary(&self) -> Vec<f64> {
        let len = self.config.actions_per_video.max(1);
        let mut avg = vec![0.0; self.n_actions()];
        for m in self.grammar.marginals(len) {
            for (a, p) in avg.iter_mut().zip(m) {
                *a += p / len as f64;
            }
        }
        avg
    }

    /// MAP center action among those sharing its prototype, given the
    /// neighboring labels; ties go to the lowest id.
    pub fn context_oracle(&self, prev: Option<usize>, center: usize, next: Option<usize>) -> usize {
        let mut best = (f64::NEG_INFINITY, center);
        for c in self.group_members(center) {
            let before = match prev {
                Some(p) => self.grammar.p(p, c),
                None => self.grammar.initial[c],
            };
            let after = next.map_or(1.0, |n| self.grammar.p(c, n));
            let score = before * after;
            if score > best.0 {
                best = (score, c);
            }
        }
        best.1
    }

    /// Expected accuracy of [`Self::context_oracle`] over videos drawn from
    /// the grammar, by enumerating every (previous, center, next) state.
    pub fn expected_context_accuracy(&self) -> f64 {
        let len = self.config.actions_per_video;
        let n = self.n_actions();
        let marg = self.grammar.marginals(len);
        let mut total = 0.0;
        for t in 0..len {
            let prevs: Vec<(Option<usize>, f64)> = if t == 0 {
                vec![(None, 1.0)]
            } else {
                (0..n).map(|p| (Some(p), marg[t - 1][p])).collect()
            };
            for (prev, pp) in prevs {
                if pp == 0.0 {
                    continue;
                }
                for c in 0..n {
                    let pc = match prev {
                        Some(p) => pp * self.grammar.p(p, c),
                        None => marg[0][c],
                    };
                    if pc == 0.0 {
                        continue;
                    }
                    if t + 1 == len {
                        total += pc * f64::from(u8::from(self.context_oracle(prev, c, None) == c));
                        continue;
                    }
                    for nx in 0..n {
                        let p = pc * self.grammar.p(c, nx);
                        if p > 0.0 && self.context_oracle(prev, c, Some(nx)) == c {
                            total += p;
                        }
                    }
                }
            }
        }
        total / len as f64
    }

    /// Best possible single-action accuracy when prototype groups never
    /// overlap: each group is guessed at chance among its members.
    pub fn single_action_ceiling(&self) -> f64 {
        self.stationary()
            .iter()
            .enumerate()
            .map(|(a, p)| p / self.group_members(a).len() as f64)
            .sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json + "\n").map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Credit for a posterior: `1/k` if the true class is among `k` tied maxima.
pub fn tie_credit(posterior: &[f64], truth: usize) -> f64 {
    let m = posterior.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let winners = posterior.iter().filter(|&&p| p == m).count();
    if posterior[truth] == m {
        1.0 / winners as f64
    } else {
        0.0
    }
}

const PROTOTYPES: u64 = 1;
const DOMAIN: u64 = 2;
const VIDEO: u64 = 3;

fn action_classes(cfg: &SynthConfig) -> Vec<ActionClass> {
    let n_scripts = cfg.n_scripts();
    // (script, position) pairs whose prototype is borrowed from the partner
    // script, filled pair by pair.
    let mut shared = Vec::new();
    'outer: for pair in 0..n_scripts / 2 {
        for &p in &AMBIGUOUS_POSITIONS {
            if shared.len() == cfg.n_ambiguous_pairs {
                break 'outer;
            }
            shared.push((2 * pair + 1, p));
        }
    }
    let mut out: Vec<ActionClass> = Vec::with_capacity(cfg.n_verbs);
    let mut next_noun = 0;
    let mut next_group = 0;
    for a in 0..cfg.n_verbs {
        let (script, position) = (a / SCRIPT_LEN, a % SCRIPT_LEN);
        let (noun, group) = if shared.contains(&(script, position)) {
            let partner = &out[(script - 1) * SCRIPT_LEN + position];
            (partner.noun, partner.group)
        } else {
            next_noun += 1;
            next_group += 1;
            (next_noun - 1, next_group - 1)
        };
        out.push(ActionClass {
            verb: a,
            noun,
            script,
            position,
            group,
        });
    }
    out
}

fn random_transform(cfg: &SynthConfig, id: u32, role: DomainRole) -> DomainTransform {
    let d = cfg.d_visual;
    let k = cfg.domain_shift;
    let mut rng = stream(cfg.seed, &[DOMAIN, u64::from(id)]);
    let mut rot = vec![0.0; d * d];
    for i in 0..d {
        rot[i * d + i] = 1.0;
    }
    if d > 1 && k > 0.0 {
        for _ in 0..d {
            let p = rng.random_range(0..d);
            let mut q = rng.random_range(0..d - 1);
            if q >= p {
                q += 1;
            }
            let theta = rng.random_range(-k..=k);
            let (s, c) = theta.sin_cos();
            // Left-multiply by the Givens rotation in plane (p, q).
            for col in 0..d {
                let (rp, rq) = (rot[p * d + col], rot[q * d + col]);
                rot[p * d + col] = c * rp - s * rq;
                rot[q * d + col] = s * rp + c * rq;
            }
        }
    }
    // Sources shrink, targets grow: the two scale ranges never meet.
    let u: f64 = rng.random_range(0.0..1.0);
    let scale = match role {
        DomainRole::Source => 1.0 - 0.25 * k * u,
        DomainRole::Target => 1.0 + 0.25 * k * (1.0 - u),
    };
    let offset = (0..d)
        .map(|_| k * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect::<Vec<f64>>();
    DomainTransform {
        id,
        role,
        rotation: rot,
        scale,
        offset,
    }
}

/// Deterministic in `cfg` (including its seed).
pub fn generate(cfg: &SynthConfig) -> Result<(FeatureStore, SynthTruth)> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(SynthError::Config(problems));
    }
    let actions = action_classes(cfg);
    let n_groups = actions.iter().map(|a| a.group).max().map_or(0, |g| g + 1);
    let mut rng = stream(cfg.seed, &[PROTOTYPES]);
    let prototypes: Vec<Vec<f64>> = (0..n_groups)
        .map(|_| (0..cfg.d_visual).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    let mut entries = Vec::new();
    let mut domains = Vec::new();
    for i in 0..cfg.n_source_domains + cfg.n_target_domains {
        let (role, name) = if i < cfg.n_source_domains {
            (DomainRole::Source, format!("source{i}"))
        } else {
            (DomainRole::Target, format!("target{}", i - cfg.n_source_domains))
        };
        entries.push(DomainEntry {
            id: i as u32,
            name,
            role,
        });
        domains.push(random_transform(cfg, i as u32, role));
    }
    let truth = SynthTruth {
        config: cfg.clone(),
        actions,
        grammar: Grammar::scripts(cfg.n_scripts()),
        prototypes,
        domains,
    };

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| {
        SynthError::Config(vec![format!("synth.noise_sigma: {e}")])
    })?;
    let mut records = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    for dom in &truth.domains {
        for v in 0..cfg.videos_per_domain {
            let mut rng = stream(cfg.seed, &[VIDEO, u64::from(dom.id), v as u64]);
            let seq = truth.grammar.sample(cfg.actions_per_video, &mut rng);
            for (t, &a) in seq.iter().enumerate() {
                let mean = truth.mean_feature(a, dom.id);
                let offset = blob.len();
                for _ in 0..cfg.clips_per_action {
                    blob.extend(mean.iter().map(|m| (m + noise.sample(&mut rng)) as f32));
                }
                let class = &truth.actions[a];
                records.push(ActionRecord {
                    action_id: records.len(),
                    video_id: format!("d{}_v{v:03}", dom.id),
                    domain_id: dom.id,
                    verb: class.verb,
                    noun: class.noun,
                    tokens: vec![class.verb as u32, (cfg.n_verbs + class.noun) as u32],
                    temporal_index: t,
                    offset,
                    n_clips: cfg.clips_per_action,
                });
            }
        }
    }
    let vocab = (0..cfg.n_verbs)
        .map(|v| format!("verb{v}"))
        .chain((0..cfg.n_nouns).map(|n| format!("noun{n}")))
        .collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dataset: format!("synth-seed{}", cfg.seed),
        d_visual: cfg.d_visual,
        d_text: cfg.d_text,
        clips_per_action: cfg.clips_per_action,
        n_verbs: cfg.n_verbs,
        n_nouns: cfg.n_nouns,
        vocab,
        domains: entries,
        actions: records,
        blob: String::new(),
        text_features: None,
    };
    let store = FeatureStore::new(manifest, blob, None)?;
    Ok((store, truth))
}

/// Writes the dataset and `truth.json` into `dir`; returns the manifest path.
pub fn write(dir: impl AsRef<Path>, store: &FeatureStore, truth: &SynthTruth) -> Result<std::path::PathBuf> {
    let manifest = store.save(dir.as_ref())?;
    truth.save(dir.as_ref().join("truth.json"))?;
    Ok(manifest)
}
