use proptest::prelude::*;
use seqdg::data::{annotation_rows, AnnotationRow};
use seqdg::stats::{count_repeats, render_text, Category, SeqCountTable};

fn row(video: &str, domain: &str, t: usize, verb: usize, noun: usize) -> AnnotationRow {
    AnnotationRow {
        video_id: video.into(),
        domain_id: domain.into(),
        temporal_index: t,
        verb_class: verb,
        noun_class: noun,
        narration: String::new(),
    }
}

fn corpus(videos: &[(&str, &str, &[(usize, usize)])]) -> Vec<AnnotationRow> {
    videos
        .iter()
        .flat_map(|(v, d, acts)| acts.iter().enumerate().map(move |(t, &(vb, n))| row(v, d, t, vb, n)))
        .collect()
}

/// Twelve actions, two domains.
fn hand_corpus() -> Vec<AnnotationRow> {
    corpus(&[
        ("a1", "A", &[(1, 5), (2, 5), (3, 6), (1, 5), (2, 7)]),
        ("b1", "B", &[(1, 5), (2, 5), (3, 6), (4, 6)]),
        ("a2", "A", &[(4, 6), (1, 5), (2, 5)]),
    ])
}

/// Quadratic reference: list every n-gram occurrence with its domain, then
/// scan the list once per pattern.
fn brute_force(rows: &[AnnotationRow], n: usize, cat: Category) -> (usize, usize) {
    let label = |r: &AnnotationRow| match cat {
        Category::Verb => (r.verb_class, 0),
        Category::Noun => (r.noun_class, 0),
        Category::Action => (r.verb_class, r.noun_class),
    };
    let mut video_ids: Vec<&str> = rows.iter().map(|r| r.video_id.as_str()).collect();
    video_ids.sort();
    video_ids.dedup();
    let mut occ: Vec<(Vec<(usize, usize)>, &str)> = Vec::new();
    for v in video_ids {
        let mut seq: Vec<&AnnotationRow> = rows.iter().filter(|r| r.video_id == v).collect();
        seq.sort_by_key(|r| r.temporal_index);
        for i in 0..seq.len().saturating_sub(n - 1) {
            occ.push((seq[i..i + n].iter().map(|r| label(r)).collect(), &seq[i].domain_id));
        }
    }
    let mut patterns: Vec<&Vec<(usize, usize)>> = occ.iter().map(|(p, _)| p).collect();
    patterns.sort();
    patterns.dedup();
    let (mut distinct, mut occurrences) = (0, 0);
    for p in patterns {
        let hits: Vec<&str> = occ.iter().filter(|(q, _)| q == p).map(|(_, d)| *d).collect();
        if hits.iter().any(|d| *d != hits[0]) {
            distinct += 1;
            occurrences += hits.len();
        }
    }
    (distinct, occurrences)
}

fn exact(t: &SeqCountTable) -> Vec<(usize, usize)> {
    t.rows.iter().map(|r| (r.distinct, r.occurrences)).collect()
}

#[test]
fn hand_counted_corpus() {
    let rows = hand_corpus();
    assert_eq!(rows.len(), 12);
    let verb = count_repeats(&rows, 4, Category::Verb);
    assert_eq!(exact(&verb), vec![(2, 6), (1, 2), (0, 0)]);
    let action = count_repeats(&rows, 4, Category::Action);
    assert_eq!(exact(&action), vec![(2, 5), (1, 2), (0, 0)]);
    let l4 = verb.at(4).unwrap();
    assert_eq!((l4.cumulative_distinct, l4.cumulative_occurrences), (3, 8));
    for cat in Category::ALL {
        let t = count_repeats(&rows, 4, cat);
        for r in &t.rows {
            assert_eq!((r.distinct, r.occurrences), brute_force(&rows, r.length, cat));
        }
    }
}

#[test]
fn a_single_domain_never_repeats() {
    let rows = corpus(&[
        ("x", "A", &[(1, 1), (2, 2), (1, 1), (2, 2)]),
        ("y", "A", &[(1, 1), (2, 2)]),
    ]);
    for cat in Category::ALL {
        assert!(count_repeats(&rows, 5, cat).rows.iter().all(|r| r.occurrences == 0 && r.distinct == 0));
    }
}

#[test]
fn identical_videos_in_two_domains_repeat_everywhere() {
    let acts: &[(usize, usize)] = &[(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5)];
    let rows = corpus(&[("x", "A", acts), ("y", "B", acts)]);
    let t = count_repeats(&rows, 6, Category::Action);
    for r in &t.rows {
        let windows = acts.len() - r.length + 1;
        assert_eq!((r.distinct, r.occurrences), (windows, 2 * windows));
    }
}

#[test]
fn rendering_lists_every_category() {
    let rows = hand_corpus();
    let tables: Vec<_> = Category::ALL.iter().map(|&c| count_repeats(&rows, 3, c)).collect();
    let text = render_text(&tables);
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().any(|l| l.starts_with("verb occurrences") && l.ends_with(" 6         8")));
}

#[test]
fn store_rows_reflect_manifest() {
    let (store, _) = seqdg::synth::generate(&seqdg::synth::SynthConfig {
        videos_per_domain: 2,
        actions_per_video: 10,
        ..seqdg::synth::SynthConfig::default()
    })
    .unwrap();
    let rows = annotation_rows(&store);
    assert_eq!(rows.len(), store.len());
    let r = &rows[0];
    assert_eq!(r.domain_id, "source0");
    assert_eq!(r.narration, format!("verb{} noun{}", r.verb_class, r.noun_class));
    // Scripts recur across source domains.
    assert!(count_repeats(&rows, 5, Category::Verb).at(5).unwrap().occurrences > 0);
}

fn arb_corpus() -> impl Strategy<Value = Vec<AnnotationRow>> {
    prop::collection::vec((0usize..3, prop::collection::vec((0usize..3, 0usize..3), 1..12)), 1..6).prop_map(|vids| {
        vids.iter()
            .enumerate()
            .flat_map(|(i, (d, acts))| {
                let (video, domain) = (format!("v{i}"), format!("d{d}"));
                acts.iter()
                    .enumerate()
                    .map(move |(t, &(vb, n))| row(&video, &domain, t, vb, n))
                    .collect::<Vec<_>>()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn matches_brute_force(rows in arb_corpus(), max_len in 2usize..6) {
        for cat in Category::ALL {
            let t = count_repeats(&rows, max_len, cat);
            prop_assert_eq!(t.rows.len(), max_len - 1);
            for r in &t.rows {
                prop_assert_eq!((r.distinct, r.occurrences), brute_force(&rows, r.length, cat));
            }
        }
    }

    #[test]
    fn row_order_does_not_matter(rows in arb_corpus(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        for cat in Category::ALL {
            prop_assert_eq!(count_repeats(&rows, 4, cat), count_repeats(&shuffled, 4, cat));
        }
    }

    #[test]
    fn cumulative_counts_grow_and_actions_bound_verbs(rows in arb_corpus()) {
        let verb = count_repeats(&rows, 5, Category::Verb);
        let noun = count_repeats(&rows, 5, Category::Noun);
        let action = count_repeats(&rows, 5, Category::Action);
        for t in [&verb, &noun, &action] {
            for w in t.rows.windows(2) {
                prop_assert!(w[1].cumulative_occurrences >= w[0].cumulative_occurrences);
                prop_assert!(w[1].cumulative_distinct >= w[0].cumulative_distinct);
            }
        }
        for ((a, v), n) in action.rows.iter().zip(&verb.rows).zip(&noun.rows) {
            prop_assert!(a.occurrences <= v.occurrences.min(n.occurrences));
        }
    }
}
