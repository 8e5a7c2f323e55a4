//! Sliding-window inference and top-k verb/noun/action accuracy.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_windows, visual_rows, ClipReduce, DataError, FeatureStore};
use crate::model::{Bound, ModelError, SeqDgModel};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model was trained with W={trained}, evaluation asked for W={requested}")]
    WindowMismatch { trained: usize, requested: usize },
    #[error("top-{k} requested but the {head} head has only {classes} classes")]
    TopK {
        k: usize,
        head: &'static str,
        classes: usize,
    },
    #[error("{predictions} predictions but {labels} labels")]
    LabelCount { predictions: usize, labels: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Indices of the `k` largest logits, descending; ties go to the lower id.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

const STORED_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub action_id: usize,
    pub verb_logits: Vec<f64>,
    pub noun_logits: Vec<f64>,
    pub top_verbs: Vec<usize>,
    pub top_nouns: Vec<usize>,
}

impl Prediction {
    fn new(action_id: usize, verb_logits: Vec<f64>, noun_logits: Vec<f64>) -> Self {
        Prediction {
            action_id,
            top_verbs: top_k(&verb_logits, STORED_K),
            top_nouns: top_k(&noun_logits, STORED_K),
            verb_logits,
            noun_logits,
        }
    }
}

const EVAL_BATCH: usize = 64;

/// Predicts every action of `videos` (record indices per video, temporally
/// sorted) from the window centered on it. Only the encoder and the
/// classifier are used; text never enters.
pub fn sliding_window_predict(
    store: &FeatureStore,
    videos: &[Vec<usize>],
    model: &SeqDgModel,
    w: usize,
) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    if w != cfg.window {
        return Err(EvalError::WindowMismatch {
            trained: cfg.window,
            requested: w,
        });
    }
    let windows = build_windows(videos, w)?;
    let reduce = ClipReduce::from(cfg.clip_aggregation);
    let mut g = Graph::new();
    let bound = model.bind_inference(&mut g);
    let mark = g.len();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let mut rows = Vec::new();
        for win in chunk {
            rows.extend(visual_rows::<rand_chacha::ChaCha8Rng>(
                store,
                win,
                reduce,
                cfg.clips_sampled,
                None,
            )?);
        }
        let x = Tensor::new(vec![chunk.len() * w, rows.len() / (chunk.len() * w)], rows)?;
        let (verb, noun) = classify_batch(&mut g, &bound, model, x)?;
        for (i, win) in chunk.iter().enumerate() {
            out.push(Prediction::new(
                store.records()[win.center].action_id,
                verb.row(i).to_vec(),
                noun.row(i).to_vec(),
            ));
        }
        g.truncate(mark);
    }
    Ok(out)
}

fn classify_batch(
    g: &mut Graph,
    b: &Bound,
    model: &SeqDgModel,
    x: Tensor,
) -> Result<(Tensor, Tensor)> {
    let x = g.constant(x);
    let enc = model.encode(g, b, x)?;
    let (v, n) = model.classify(g, b, enc.cls)?;
    Ok((g.value(v).clone(), g.value(n).clone()))
}

/// Percentages of predictions whose true classes are in the top-k.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub verb: f64,
    pub noun: f64,
    pub action: f64,
}

impl Accuracy {
    /// Rounded to one decimal, as reported.
    pub fn rounded(&self) -> Accuracy {
        let r = |x: f64| (x * 10.0).round() / 10.0;
        Accuracy {
            verb: r(self.verb),
            noun: r(self.noun),
            action: r(self.action),
        }
    }
}

/// Action top-k counts a hit only when the verb and the noun are both in
/// their own top-k lists.
pub fn accuracy(predictions: &[Prediction], labels: &[(usize, usize)], k: usize) -> Result<Accuracy> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LabelCount {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let Some(first) = predictions.first() else {
        return Ok(Accuracy::default());
    };
    for (head, classes) in [("verb", first.verb_logits.len()), ("noun", first.noun_logits.len())] {
        if k == 0 || k > classes {
            return Err(EvalError::TopK { k, head, classes });
        }
    }
    let (mut v, mut n, mut a) = (0usize, 0usize, 0usize);
    for (p, &(verb, noun)) in predictions.iter().zip(labels) {
        let v_ok = top_k(&p.verb_logits, k).contains(&verb);
        let n_ok = top_k(&p.noun_logits, k).contains(&noun);
        v += usize::from(v_ok);
        n += usize::from(n_ok);
        a += usize::from(v_ok && n_ok);
    }
    let pct = |h: usize| 100.0 * h as f64 / predictions.len() as f64;
    Ok(Accuracy {
        verb: pct(v),
        noun: pct(n),
        action: pct(a),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub split: String,
    pub samples: usize,
    pub top1: Accuracy,
    /// Absent when a head has fewer than five classes.
    pub top5: Option<Accuracy>,
}

/// Predictions and metrics for every action in `domains`.
pub fn evaluate(
    store: &FeatureStore,
    model: &SeqDgModel,
    domains: &[u32],
    split: &str,
) -> Result<(EvalResults, Vec<Prediction>)> {
    let videos = store.videos_in(domains);
    let preds = sliding_window_predict(store, &videos, model, model.config().window)?;
    let by_id: std::collections::HashMap<usize, &crate::data::ActionRecord> =
        store.records().iter().map(|r| (r.action_id, r)).collect();
    let labels: Vec<(usize, usize)> = preds
        .iter()
        .map(|p| {
            let r = by_id[&p.action_id];
            (r.verb, r.noun)
        })
        .collect();
    let top1 = accuracy(&preds, &labels, 1)?;
    let top5 = match accuracy(&preds, &labels, 5) {
        Ok(a) => Some(a),
        Err(EvalError::TopK { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok((
        EvalResults {
            split: split.to_string(),
            samples: preds.len(),
            top1,
            top5,
        },
        preds,
    ))
}

/// One JSON object per line.
pub fn write_predictions(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut f, p).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
