use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::store::read_f32;
use super::{
    io_err, ActionRecord, DataError, DomainEntry, DomainRole, FeatureStore, Manifest, Result,
    MANIFEST_VERSION,
};

/// One row of an annotation CSV.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct AnnotationRow {
    pub video_id: String,
    pub domain_id: String,
    pub temporal_index: usize,
    pub verb_class: usize,
    pub noun_class: usize,
    pub narration: String,
}

const COLUMNS: [&str; 6] = [
    "video_id",
    "domain_id",
    "temporal_index",
    "verb_class",
    "noun_class",
    "narration",
];

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_annotations(file, &path.display().to_string())
}

/// Parses CSV text with a header row; errors carry the 1-based line number.
pub fn parse_annotations(input: impl Read, name: &str) -> Result<Vec<AnnotationRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let err = |line: u64, message: String| DataError::Csv {
        path: name.to_string(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let missing: Vec<&str> = COLUMNS
        .iter()
        .copied()
        .filter(|c| !header.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(err(1, format!("missing columns: {}", missing.join(", "))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: AnnotationRow = rec
            .deserialize(Some(&header))
            .map_err(|e| err(line, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

pub(crate) fn tokenize(narration: &str) -> impl Iterator<Item = String> + '_ {
    narration.split_whitespace().map(str::to_lowercase)
}

/// Everything besides the CSV needed to build a dataset from real features.
#[derive(Clone, Debug)]
pub struct ImportSpec {
    pub dataset: String,
    pub d_visual: usize,
    pub d_text: usize,
    pub clips_per_action: usize,
    /// Defaults to one past the largest class in the CSV.
    pub n_verbs: Option<usize>,
    pub n_nouns: Option<usize>,
    /// Domain names (as written in the CSV) held out as targets.
    pub target_domains: Vec<String>,
    /// Features for every CSV row in row order, `clips_per_action × d_visual`
    /// floats each.
    pub blob: PathBuf,
    pub text_features: Option<PathBuf>,
}

/// Annotation rows describing a loaded store; domains are named as in its
/// manifest and narrations are rebuilt from the tokens.
pub fn annotation_rows(store: &FeatureStore) -> Vec<AnnotationRow> {
    let m = store.manifest();
    let names: BTreeMap<u32, &str> = m.domains.iter().map(|d| (d.id, d.name.as_str())).collect();
    m.actions
        .iter()
        .map(|r| AnnotationRow {
            video_id: r.video_id.clone(),
            domain_id: names[&r.domain_id].to_string(),
            temporal_index: r.temporal_index,
            verb_class: r.verb,
            noun_class: r.noun,
            narration: r
                .tokens
                .iter()
                .map(|&t| m.vocab[t as usize].as_str())
                .collect::<Vec<_>>()
                .join(" "),
        })
        .collect()
}

pub fn import_annotations(rows: &[AnnotationRow], spec: &ImportSpec) -> Result<FeatureStore> {
    let names: BTreeSet<&str> = rows.iter().map(|r| r.domain_id.as_str()).collect();
    let unknown: Vec<String> = spec
        .target_domains
        .iter()
        .filter(|t| !names.contains(t.as_str()))
        .map(|t| format!("target domain {t} does not occur in the annotations"))
        .collect();
    if !unknown.is_empty() {
        return Err(DataError::Invalid(unknown));
    }
    let domain_ids: BTreeMap<&str, u32> = names.iter().zip(0..).map(|(n, i)| (*n, i)).collect();
    let domains = domain_ids
        .iter()
        .map(|(name, &id)| DomainEntry {
            id,
            name: name.to_string(),
            role: if spec.target_domains.iter().any(|t| t == name) {
                DomainRole::Target
            } else {
                DomainRole::Source
            },
        })
        .collect();

    let vocab: Vec<String> = rows
        .iter()
        .flat_map(|r| tokenize(&r.narration))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let token_ids: BTreeMap<&str, u32> = vocab.iter().zip(0..).map(|(w, i)| (w.as_str(), i)).collect();

    let span = spec.clips_per_action * spec.d_visual;
    let actions = rows
        .iter()
        .enumerate()
        .map(|(i, r)| ActionRecord {
            action_id: i,
            video_id: r.video_id.clone(),
            domain_id: domain_ids[r.domain_id.as_str()],
            verb: r.verb_class,
            noun: r.noun_class,
            tokens: tokenize(&r.narration).map(|w| token_ids[w.as_str()]).collect(),
            temporal_index: r.temporal_index,
            offset: i * span,
            n_clips: spec.clips_per_action,
        })
        .collect();
    let max_class = |f: fn(&AnnotationRow) -> usize| rows.iter().map(f).max().map_or(0, |m| m + 1);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dataset: spec.dataset.clone(),
        d_visual: spec.d_visual,
        d_text: spec.d_text,
        clips_per_action: spec.clips_per_action,
        n_verbs: spec.n_verbs.unwrap_or_else(|| max_class(|r| r.verb_class)),
        n_nouns: spec.n_nouns.unwrap_or_else(|| max_class(|r| r.noun_class)),
        vocab,
        domains,
        actions,
        blob: String::new(),
        text_features: None,
    };
    let blob = read_f32(&spec.blob)?;
    let text = match &spec.text_features {
        Some(p) => Some(read_f32(p)?),
        None => None,
    };
    FeatureStore::new(manifest, blob, text)
}
