//! Counts label sub-sequences that recur across domains.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::AnnotationRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Verb,
    Noun,
    /// The (verb, noun) pair.
    Action,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Verb, Category::Noun, Category::Action];

    fn label(self, r: &AnnotationRow) -> (usize, usize) {
        match self {
            Category::Verb => (r.verb_class, 0),
            Category::Noun => (r.noun_class, 0),
            Category::Action => (r.verb_class, r.noun_class),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Verb => "verb",
            Category::Noun => "noun",
            Category::Action => "action",
        }
    }
}

/// Tallies for sub-sequences of exactly `length` and of any length in
/// `2..=length`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthCounts {
    pub length: usize,
    /// Distinct repeating label patterns.
    pub distinct: usize,
    /// Occurrences (overlapping, within videos) of repeating patterns.
    pub occurrences: usize,
    pub cumulative_distinct: usize,
    pub cumulative_occurrences: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqCountTable {
    pub category: Category,
    pub max_length: usize,
    pub rows: Vec<LengthCounts>,
}

impl SeqCountTable {
    pub fn at(&self, length: usize) -> Option<&LengthCounts> {
        self.rows.iter().find(|r| r.length == length)
    }
}

/// Rows grouped per video and ordered by temporal index; videos by id.
fn videos(rows: &[AnnotationRow]) -> Vec<Vec<&AnnotationRow>> {
    let mut by: BTreeMap<&str, Vec<&AnnotationRow>> = BTreeMap::new();
    for r in rows {
        by.entry(&r.video_id).or_default().push(r);
    }
    by.into_values()
        .map(|mut v| {
            v.sort_by_key(|r| r.temporal_index);
            v
        })
        .collect()
}

/// A contiguous n-gram repeats when it occurs in at least two domains.
pub fn count_repeats(rows: &[AnnotationRow], max_length: usize, category: Category) -> SeqCountTable {
    let videos = videos(rows);
    let mut out = Vec::new();
    let (mut cum_distinct, mut cum_occ) = (0, 0);
    for n in 2..=max_length {
        let mut seen: HashMap<Vec<(usize, usize)>, (BTreeSet<&str>, usize)> = HashMap::new();
        for v in &videos {
            for w in v.windows(n) {
                let key = w.iter().map(|r| category.label(r)).collect();
                let e = seen.entry(key).or_default();
                e.0.insert(&w[0].domain_id);
                e.1 += 1;
            }
        }
        let (mut distinct, mut occurrences) = (0, 0);
        for (domains, count) in seen.values() {
            if domains.len() >= 2 {
                distinct += 1;
                occurrences += count;
            }
        }
        cum_distinct += distinct;
        cum_occ += occurrences;
        out.push(LengthCounts {
            length: n,
            distinct,
            occurrences,
            cumulative_distinct: cum_distinct,
            cumulative_occurrences: cum_occ,
        });
    }
    SeqCountTable {
        category,
        max_length,
        rows: out,
    }
}

/// Plain-text table: one line per category and statistic, one column per
/// maximum length, cumulative counts.
pub fn render_text(tables: &[SeqCountTable]) -> String {
    let max = tables.iter().map(|t| t.max_length).max().unwrap_or(1);
    let mut s = String::new();
    let _ = write!(s, "{:<22}", "sub-sequences <= L");
    for l in 2..=max {
        let _ = write!(s, "{:>10}", format!("L={l}"));
    }
    s.push('\n');
    for (stat, pick) in [
        ("occurrences", (|r: &LengthCounts| r.cumulative_occurrences) as fn(&LengthCounts) -> usize),
        ("distinct", |r: &LengthCounts| r.cumulative_distinct),
    ] {
        for t in tables {
            let _ = write!(s, "{:<22}", format!("{} {stat}", t.category.name()));
            for r in &t.rows {
                let _ = write!(s, "{:>10}", pick(r));
            }
            s.push('\n');
        }
    }
    s
}
