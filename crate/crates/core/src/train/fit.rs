use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_windows, seqmix, visual_rows, ClipReduce, FeatureStore, NarrationEmbedder, SeqMixPool, SeqMixStats,
    SequenceWindow,
};
use crate::model::{ModelError, ParamId, SeqDgModel};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Graph, Tensor, TensorError};

use super::{composite_loss, forward, lr_at, Batch, LossBreakdown, Result};
use super::{TextTable, TrainConfig, TrainError};

/// Checkpoint name of the frozen narration table.
pub const TEXT_TABLE_NAME: &str = "text_embed.table";

const SHUFFLE: u64 = 1;
const WINDOW: u64 = 2;
const TEXT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Window-weighted means over the epoch's batches.
    pub loss: LossBreakdown,
    pub source_verb_acc: f64,
    pub source_noun_acc: f64,
    pub source_action_acc: f64,
    pub windows: usize,
    pub seqmix_replaced: u64,
    pub seqmix_no_candidate: u64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: SeqDgModel,
    pub history: Vec<EpochMetrics>,
    pub seqmix: SeqMixStats,
    /// Frozen narration table, absent when the store ships text features.
    pub text_table: Option<Tensor>,
}

impl FitReport {
    pub fn frozen_tensors(&self) -> Vec<(String, Tensor)> {
        self.text_table
            .iter()
            .map(|t| (TEXT_TABLE_NAME.to_string(), t.clone()))
            .collect()
    }
}

/// Narration embedder used for a run seeded with `seed`.
pub fn narration_embedder(store: &FeatureStore, d_text: usize, seed: u64) -> Result<NarrationEmbedder> {
    Ok(NarrationEmbedder::new(store.vocab_size().max(1), d_text, derive_seed(seed, &[TEXT]))?)
}

fn check_compatible(store: &FeatureStore, model: &SeqDgModel) -> Result<()> {
    let cfg = model.config();
    let mut v = Vec::new();
    let m = store.manifest();
    if m.d_visual != cfg.d_visual {
        v.push(format!("dataset d_visual {} != model.d_visual {}", m.d_visual, cfg.d_visual));
    }
    if store.has_text_features() && m.d_text != cfg.d_text {
        v.push(format!("dataset d_text {} != model.d_text {}", m.d_text, cfg.d_text));
    }
    if m.n_verbs > cfg.n_verbs {
        v.push(format!("dataset has {} verbs, model.n_verbs is {}", m.n_verbs, cfg.n_verbs));
    }
    if m.n_nouns > cfg.n_nouns {
        v.push(format!("dataset has {} nouns, model.n_nouns is {}", m.n_nouns, cfg.n_nouns));
    }
    if m.vocab.len() > cfg.vocab_size {
        v.push(format!(
            "dataset vocabulary has {} tokens, model.vocab_size is {}",
            m.vocab.len(),
            cfg.vocab_size
        ));
    }
    if let Some(r) = store.records().iter().find(|r| r.n_clips < cfg.clips_sampled) {
        v.push(format!(
            "action {} has {} clips, model.clips_sampled is {}",
            r.action_id, r.n_clips, cfg.clips_sampled
        ));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Model(ModelError::Config(v)))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains on the store's source domains only. `on_epoch` sees each epoch's
/// metrics as soon as the epoch finishes.
pub fn fit(
    store: &FeatureStore,
    mut model: SeqDgModel,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitReport> {
    cfg.validate()?;
    check_compatible(store, &model)?;
    let mcfg = model.config().clone();
    let split = store.split();
    let windows = build_windows(&store.videos_in(split.source()), mcfg.window)?;
    let pool = SeqMixPool::new(store.records(), split.source());
    let reduce = ClipReduce::from(mcfg.clip_aggregation);

    let embedder = narration_embedder(store, mcfg.d_text, cfg.seed)?;
    let text = if cfg.reconstructs() {
        Some(TextTable::from_store(store, &embedder)?)
    } else {
        None
    };
    let ids = if cfg.reconstructs() {
        model.all_param_ids()
    } else {
        model.inference_param_ids()
    };
    let mut velocity: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut total_mix = SeqMixStats::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let mut mix = SeqMixStats::default();
        let mut sums = LossBreakdown::default();
        let (mut hits_v, mut hits_n, mut hits_a) = (0usize, 0usize, 0usize);

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut mixed: Vec<SequenceWindow> = Vec::with_capacity(chunk.len());
            let mut visual = Vec::new();
            for &wi in chunk {
                let mut rng = stream(cfg.seed, &[WINDOW, epoch as u64, wi as u64]);
                let win = seqmix(
                    &windows[wi],
                    store.records(),
                    &pool,
                    cfg.p_mix,
                    cfg.seqmix_exclude_center,
                    &mut rng,
                    &mut mix,
                );
                for &slot in &win.slots {
                    let r = &store.records()[slot];
                    if !split.is_source(r.domain_id) {
                        return Err(TrainError::TargetLeak {
                            action: r.action_id,
                            domain: r.domain_id,
                        });
                    }
                }
                visual.extend(visual_rows(store, &win, reduce, mcfg.clips_sampled, Some(&mut rng))?);
                mixed.push(win);
            }
            let batch = Batch::assemble(store, &mixed, visual, text.as_ref())?;

            let diverged = |e: TensorError| match e {
                TensorError::NonFinite { op } => TrainError::Divergence {
                    epoch,
                    batch: batch_idx,
                    detail: format!("non-finite value in {op}"),
                },
                other => TrainError::Tensor(other),
            };
            let lift = |e: TrainError| match e {
                TrainError::Tensor(t) => diverged(t),
                TrainError::Model(ModelError::Tensor(t)) => diverged(t),
                other => other,
            };

            let mut g = Graph::new();
            let bound = crate::model::Bound::bind(&mut g, model.params(), &ids, true);
            let out = forward(&mut g, &model, &bound, &batch, cfg).map_err(lift)?;
            let (total, parts) =
                composite_loss(&mut g, &out, &batch, cfg.lambda_rv, cfg.lambda_rt).map_err(lift)?;
            if !parts.total.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_idx,
                    detail: format!("loss is {}", parts.total),
                });
            }
            let n = batch.len();
            sums.classification += parts.classification * n as f64;
            sums.recon_visual += parts.recon_visual * n as f64;
            sums.recon_text += parts.recon_text * n as f64;
            sums.total += parts.total * n as f64;

            let (vl, nl) = (g.value(out.verb_logits), g.value(out.noun_logits));
            for i in 0..n {
                let v_ok = argmax(vl.row(i)) == batch.verbs[i];
                let n_ok = argmax(nl.row(i)) == batch.nouns[i];
                hits_v += usize::from(v_ok);
                hits_n += usize::from(n_ok);
                hits_a += usize::from(v_ok && n_ok);
            }

            g.backward(total).map_err(diverged)?;
            if lr == 0.0 {
                continue;
            }
            for &id in &ids {
                let grad = g
                    .grad(bound.get(id))
                    .expect("trainable parameter has a gradient");
                let param = model.params_mut().get_mut(id);
                if cfg.momentum > 0.0 {
                    let vel = velocity
                        .entry(id)
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    for ((p, v), g) in param.value.values_mut().iter_mut().zip(vel).zip(grad) {
                        *v = cfg.momentum * *v + g;
                        *p -= lr * *v;
                    }
                } else {
                    for (p, g) in param.value.values_mut().iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                }
            }
        }

        let count = windows.len().max(1) as f64;
        let pct = |h: usize| 100.0 * h as f64 / count;
        let metrics = EpochMetrics {
            epoch,
            lr,
            loss: LossBreakdown {
                classification: sums.classification / count,
                recon_visual: sums.recon_visual / count,
                recon_text: sums.recon_text / count,
                total: sums.total / count,
            },
            source_verb_acc: pct(hits_v),
            source_noun_acc: pct(hits_n),
            source_action_acc: pct(hits_a),
            windows: windows.len(),
            seqmix_replaced: mix.replaced,
            seqmix_no_candidate: mix.no_candidate,
        };
        on_epoch(&metrics);
        history.push(metrics);
        total_mix.merge(&mix);
    }

    let text_table = if store.has_text_features() {
        None
    } else {
        Some(embedder.table().clone())
    };
    Ok(FitReport {
        model,
        history,
        seqmix: total_mix,
        text_table,
    })
}
