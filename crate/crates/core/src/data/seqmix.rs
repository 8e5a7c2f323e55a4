use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionRecord, SequenceWindow};

/// Source-domain records indexed by their (verb, noun) label.
#[derive(Clone, Debug, Default)]
pub struct SeqMixPool {
    by_label: BTreeMap<(usize, usize), Vec<usize>>,
}

impl SeqMixPool {
    /// Only records whose domain is listed in `source_domains` enter the pool.
    pub fn new(records: &[ActionRecord], source_domains: &[u32]) -> Self {
        let mut by_label: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if source_domains.contains(&r.domain_id) {
                by_label.entry((r.verb, r.noun)).or_default().push(i);
            }
        }
        SeqMixPool { by_label }
    }

    pub fn len(&self) -> usize {
        self.by_label.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_label.is_empty()
    }

    fn candidates<'a>(
        &'a self,
        records: &'a [ActionRecord],
        of: &ActionRecord,
    ) -> impl Iterator<Item = usize> + Clone + 'a {
        let domain = of.domain_id;
        self.by_label
            .get(&(of.verb, of.noun))
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .copied()
            .filter(move |&j| records[j].domain_id != domain)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqMixStats {
    pub draws: u64,
    /// Draws where the probability-`p` coin came up.
    pub fired: u64,
    pub replaced: u64,
    pub no_candidate: u64,
}

impl SeqMixStats {
    pub fn merge(&mut self, other: &SeqMixStats) {
        self.draws += other.draws;
        self.fired += other.fired;
        self.replaced += other.replaced;
        self.no_candidate += other.no_candidate;
    }
}

/// With probability `p_mix`, swaps one uniformly chosen non-padding slot
/// for a same-label action from a different source domain. Labels of the
/// center never change because replacements share the label.
pub fn seqmix(
    window: &SequenceWindow,
    records: &[ActionRecord],
    pool: &SeqMixPool,
    p_mix: f64,
    exclude_center: bool,
    rng: &mut impl Rng,
    stats: &mut SeqMixStats,
) -> SequenceWindow {
    stats.draws += 1;
    let mut out = window.clone();
    if p_mix <= 0.0 || !rng.random_bool(p_mix.min(1.0)) {
        return out;
    }
    stats.fired += 1;
    let center = window.center_slot();
    let eligible: Vec<usize> = (0..window.len())
        .filter(|&s| !window.padded[s] && !(exclude_center && s == center))
        .collect();
    if eligible.is_empty() {
        stats.no_candidate += 1;
        return out;
    }
    let slot = eligible[rng.random_range(0..eligible.len())];
    let candidates = pool.candidates(records, &records[window.slots[slot]]);
    let n = candidates.clone().count();
    if n == 0 {
        stats.no_candidate += 1;
        return out;
    }
    let pick = candidates
        .clone()
        .nth(rng.random_range(0..n))
        .expect("index below candidate count");
    out.slots[slot] = pick;
    if slot == center {
        out.center = pick;
    }
    stats.replaced += 1;
    out
}
