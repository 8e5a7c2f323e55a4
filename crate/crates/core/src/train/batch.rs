use crate::data::{
    visual_rows, ClipReduce, DataError, FeatureStore, NarrationEmbedder, SequenceWindow,
};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

use super::Result;

/// Per-record text features: precomputed ones from the store when present,
/// otherwise narration embeddings.
#[derive(Clone, Debug)]
pub struct TextTable {
    rows: Vec<Vec<f64>>,
    width: usize,
}

impl TextTable {
    pub fn from_store(store: &FeatureStore, embedder: &NarrationEmbedder) -> Result<Self> {
        let rows = (0..store.len())
            .map(|i| match store.text_features(i) {
                Some(t) => Ok(t.iter().map(|&v| f64::from(v)).collect()),
                None => embedder.embed(&store.records()[i].tokens),
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        let width = if store.has_text_features() {
            store.d_text()
        } else {
            embedder.d_text()
        };
        Ok(TextTable { rows, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, record: usize) -> &[f64] {
        &self.rows[record]
    }
}

/// A minibatch of windows stacked along the rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub visual: Tensor,
    pub text: Option<Tensor>,
    pub verbs: Vec<usize>,
    pub nouns: Vec<usize>,
    /// Narration tokens of each window's center action.
    pub center_tokens: Vec<Vec<u32>>,
}

impl Batch {
    /// `visual` holds each window's rows from [`visual_rows`], in order.
    pub fn assemble(
        store: &FeatureStore,
        windows: &[SequenceWindow],
        visual: Vec<f64>,
        text: Option<&TextTable>,
    ) -> Result<Self> {
        let w = windows.first().map_or(0, SequenceWindow::len);
        let rows = windows.len() * w;
        let width = if rows == 0 { 0 } else { visual.len() / rows };
        let visual = Tensor::new(vec![rows, width], visual)?;
        let text = match text {
            Some(table) => {
                let mut data = Vec::with_capacity(rows * table.width());
                for win in windows {
                    for &slot in &win.slots {
                        data.extend_from_slice(table.row(slot));
                    }
                }
                Some(Tensor::new(vec![rows, table.width()], data)?)
            }
            None => None,
        };
        let records = store.records();
        Ok(Batch {
            visual,
            text,
            verbs: windows.iter().map(|w| records[w.center].verb).collect(),
            nouns: windows.iter().map(|w| records[w.center].noun).collect(),
            center_tokens: windows
                .iter()
                .map(|w| records[w.center].tokens.clone())
                .collect(),
        })
    }

    /// Evenly spaced clips for every window, as at evaluation time.
    pub fn from_windows(
        store: &FeatureStore,
        windows: &[SequenceWindow],
        cfg: &ModelConfig,
        text: Option<&TextTable>,
    ) -> Result<Self> {
        let mut visual = Vec::new();
        for w in windows {
            visual.extend(visual_rows::<rand_chacha::ChaCha8Rng>(
                store,
                w,
                ClipReduce::from(cfg.clip_aggregation),
                cfg.clips_sampled,
                None,
            )?);
        }
        Self::assemble(store, windows, visual, text)
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }
}
