use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DataError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: u32,
    pub name: String,
    pub role: DomainRole,
}

/// One annotated action. `offset` counts f32 elements into the feature blob,
/// where the action's `n_clips × d_visual` values are stored clip-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    pub action_id: usize,
    pub video_id: String,
    pub domain_id: u32,
    pub verb: usize,
    pub noun: usize,
    pub tokens: Vec<u32>,
    pub temporal_index: usize,
    pub offset: usize,
    pub n_clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dataset: String,
    pub d_visual: usize,
    pub d_text: usize,
    pub clips_per_action: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub vocab: Vec<String>,
    pub domains: Vec<DomainEntry>,
    pub actions: Vec<ActionRecord>,
    /// Feature blob path, relative to the manifest's directory.
    pub blob: String,
    /// Optional precomputed text features, one `d_text` row per action in
    /// manifest order.
    #[serde(default)]
    pub text_features: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    source: Vec<u32>,
    target: Vec<u32>,
}

impl DatasetSplit {
    pub fn new(source: Vec<u32>, target: Vec<u32>) -> Result<Self> {
        let overlap: Vec<String> = source
            .iter()
            .filter(|d| target.contains(d))
            .map(|d| format!("domain {d} is both source and target"))
            .collect();
        if !overlap.is_empty() {
            return Err(DataError::Invalid(overlap));
        }
        Ok(DatasetSplit { source, target })
    }

    pub fn source(&self) -> &[u32] {
        &self.source
    }

    pub fn target(&self) -> &[u32] {
        &self.target
    }

    pub fn is_source(&self, domain: u32) -> bool {
        self.source.contains(&domain)
    }
}

/// Manifest plus feature blob, validated on construction and immutable after.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    manifest: Manifest,
    blob: Vec<f32>,
    text: Option<Vec<f32>>,
}

impl FeatureStore {
    pub fn new(manifest: Manifest, blob: Vec<f32>, text: Option<Vec<f32>>) -> Result<Self> {
        let problems = violations(&manifest, &blob, text.as_deref());
        if !problems.is_empty() {
            return Err(DataError::Invalid(problems));
        }
        Ok(FeatureStore {
            manifest,
            blob,
            text,
        })
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(DataError::Invalid(vec![format!(
                "unsupported manifest version {}",
                manifest.version
            )]));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let blob = read_f32(&dir.join(&manifest.blob))?;
        let text = match &manifest.text_features {
            Some(p) => Some(read_f32(&dir.join(p))?),
            None => None,
        };
        Self::new(manifest, blob, text)
    }

    /// Writes `manifest.json` and the blob files into `dir`, pointing the
    /// manifest at them. Returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = self.manifest.clone();
        manifest.blob = "features.f32".into();
        write_f32(&dir.join(&manifest.blob), &self.blob)?;
        if let Some(text) = &self.text {
            let name = "text_features.f32".to_string();
            write_f32(&dir.join(&name), text)?;
            manifest.text_features = Some(name);
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[ActionRecord] {
        &self.manifest.actions
    }

    pub fn len(&self) -> usize {
        self.manifest.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.actions.is_empty()
    }

    pub fn d_visual(&self) -> usize {
        self.manifest.d_visual
    }

    pub fn d_text(&self) -> usize {
        self.manifest.d_text
    }

    pub fn vocab_size(&self) -> usize {
        self.manifest.vocab.len()
    }

    pub fn blob(&self) -> &[f32] {
        &self.blob
    }

    /// All clips of record `index`, clip-major.
    pub fn clips(&self, index: usize) -> &[f32] {
        let r = &self.manifest.actions[index];
        &self.blob[r.offset..r.offset + r.n_clips * self.manifest.d_visual]
    }

    pub fn clip(&self, index: usize, clip: usize) -> &[f32] {
        let d = self.manifest.d_visual;
        &self.clips(index)[clip * d..(clip + 1) * d]
    }

    pub fn has_text_features(&self) -> bool {
        self.text.is_some()
    }

    pub fn text_features(&self, index: usize) -> Option<&[f32]> {
        let d = self.manifest.d_text;
        self.text.as_ref().map(|t| &t[index * d..(index + 1) * d])
    }

    /// Same store with the precomputed text features dropped.
    pub fn without_text(&self) -> Self {
        let mut out = self.clone();
        out.text = None;
        out.manifest.text_features = None;
        out
    }

    pub fn split(&self) -> DatasetSplit {
        let ids = |role| {
            self.manifest
                .domains
                .iter()
                .filter(|d| d.role == role)
                .map(|d| d.id)
                .collect()
        };
        DatasetSplit {
            source: ids(DomainRole::Source),
            target: ids(DomainRole::Target),
        }
    }

    /// Record indices grouped per video and sorted by temporal index; videos
    /// ordered by id.
    pub fn videos(&self) -> Vec<Vec<usize>> {
        self.videos_where(|_| true)
    }

    pub fn videos_in(&self, domains: &[u32]) -> Vec<Vec<usize>> {
        self.videos_where(|r| domains.contains(&r.domain_id))
    }

    fn videos_where(&self, keep: impl Fn(&ActionRecord) -> bool) -> Vec<Vec<usize>> {
        let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.manifest.actions.iter().enumerate() {
            if keep(r) {
                by_video.entry(&r.video_id).or_default().push(i);
            }
        }
        by_video
            .into_values()
            .map(|mut v| {
                v.sort_by_key(|&i| self.manifest.actions[i].temporal_index);
                v
            })
            .collect()
    }
}

fn violations(m: &Manifest, blob: &[f32], text: Option<&[f32]>) -> Vec<String> {
    let mut out = Vec::new();
    for (name, v) in [
        ("d_visual", m.d_visual),
        ("d_text", m.d_text),
        ("clips_per_action", m.clips_per_action),
        ("n_verbs", m.n_verbs),
        ("n_nouns", m.n_nouns),
    ] {
        if v == 0 {
            out.push(format!("{name} must be positive"));
        }
    }
    let mut domain_ids = BTreeSet::new();
    for d in &m.domains {
        if !domain_ids.insert(d.id) {
            out.push(format!("domain {} listed twice", d.id));
        }
    }

    let mut needed = 0usize;
    let mut ids = BTreeSet::new();
    let mut videos: BTreeMap<&str, (u32, Vec<usize>)> = BTreeMap::new();
    for r in &m.actions {
        let a = r.action_id;
        if !ids.insert(a) {
            out.push(format!("action {a}: duplicate action_id"));
        }
        if !domain_ids.contains(&r.domain_id) {
            out.push(format!("action {a}: unknown domain {}", r.domain_id));
        }
        if r.verb >= m.n_verbs {
            out.push(format!("action {a}: verb {} not below {}", r.verb, m.n_verbs));
        }
        if r.noun >= m.n_nouns {
            out.push(format!("action {a}: noun {} not below {}", r.noun, m.n_nouns));
        }
        if let Some(t) = r.tokens.iter().find(|&&t| t as usize >= m.vocab.len()) {
            out.push(format!("action {a}: token {t} outside vocabulary of {}", m.vocab.len()));
        }
        if r.n_clips == 0 {
            out.push(format!("action {a}: no clips"));
        }
        let span = r.n_clips * m.d_visual;
        needed += span;
        if r.offset.checked_add(span).is_none_or(|end| end > blob.len()) {
            out.push(format!("action {a}: features out of bounds"));
        }
        let entry = videos.entry(&r.video_id).or_insert((r.domain_id, Vec::new()));
        if entry.0 != r.domain_id {
            out.push(format!("video {}: spans several domains", r.video_id));
        }
        entry.1.push(r.temporal_index);
    }
    if needed != blob.len() {
        out.push(format!(
            "blob holds {} floats, records need {needed}",
            blob.len()
        ));
    }
    for (video, (_, mut idx)) in videos {
        idx.sort_unstable();
        if idx.windows(2).any(|w| w[1] != w[0] + 1) {
            out.push(format!("video {video}: temporal indices not consecutive and unique"));
        }
    }
    if let Some(t) = text {
        if t.len() != m.actions.len() * m.d_text {
            out.push(format!(
                "text features hold {} floats, expected {}",
                t.len(),
                m.actions.len() * m.d_text
            ));
        }
    }
    if blob.iter().chain(text.unwrap_or(&[])).any(|v| !v.is_finite()) {
        out.push("non-finite feature value".into());
    }
    out
}

pub(crate) fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::Invalid(vec![format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )]));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io_err(path))
}
