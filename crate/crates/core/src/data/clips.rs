use rand::Rng;

use super::{DataError, FeatureStore, Result, SequenceWindow};
use crate::model::ClipAggregation;
use crate::tensor::Tensor;

/// How sampled clips are reduced before they reach the model. `Concat`
/// feeds the learned relational layer, which owns the affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipReduce {
    Mean,
    Concat,
}

impl From<ClipAggregation> for ClipReduce {
    fn from(a: ClipAggregation) -> Self {
        match a {
            ClipAggregation::Mean => ClipReduce::Mean,
            ClipAggregation::Relational => ClipReduce::Concat,
        }
    }
}

/// `k` distinct clip indices drawn uniformly, returned in temporal order.
pub fn sample_clip_indices(n_clips: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    check_count(n_clips, k)?;
    let mut idx = rand::seq::index::sample(rng, n_clips, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Evenly spaced indices `⌊(i + ½)·n/k⌋`, used at evaluation time.
pub fn eval_clip_indices(n_clips: usize, k: usize) -> Result<Vec<usize>> {
    check_count(n_clips, k)?;
    Ok((0..k).map(|i| (2 * i + 1) * n_clips / (2 * k)).collect())
}

fn check_count(n_clips: usize, k: usize) -> Result<()> {
    if k == 0 || k > n_clips {
        return Err(DataError::ClipCount {
            action: usize::MAX,
            expected: k,
            got: n_clips,
        });
    }
    Ok(())
}

/// Reduces an `n_clips × D_V` tensor to one feature row.
pub fn aggregate_clips(clips: &Tensor, mode: ClipReduce) -> Result<Vec<f64>> {
    if clips.shape().len() != 2 {
        return Err(DataError::Shape(format!(
            "clips must be a matrix, got shape {:?}",
            clips.shape()
        )));
    }
    Ok(match mode {
        ClipReduce::Mean => {
            let n = clips.rows() as f64;
            let mut out = vec![0.0; clips.cols()];
            for r in 0..clips.rows() {
                for (o, v) in out.iter_mut().zip(clips.row(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
            out
        }
        ClipReduce::Concat => clips.values().to_vec(),
    })
}

/// Affine map over the concatenated clips: `concat(c_1..c_k)·W + b`.
pub fn relational_summary(clips: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let x = clips.values();
    if weight.shape() != [x.len(), bias.len()] {
        return Err(DataError::Shape(format!(
            "relational weight {:?} does not map {} inputs to {} outputs",
            weight.shape(),
            x.len(),
            bias.len()
        )));
    }
    let mut out = bias.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(weight.row(i)) {
            *o += xi * w;
        }
    }
    Ok(out)
}

impl FeatureStore {
    /// Selected clips of record `index` as a `k × D_V` tensor.
    pub fn clip_tensor(&self, index: usize, clips: &[usize]) -> Result<Tensor> {
        let n = self.records()[index].n_clips;
        if let Some(&bad) = clips.iter().find(|&&c| c >= n) {
            return Err(DataError::ClipCount {
                action: self.records()[index].action_id,
                expected: bad + 1,
                got: n,
            });
        }
        let d = self.d_visual();
        let mut data = Vec::with_capacity(clips.len() * d);
        for &c in clips {
            data.extend(self.clip(index, c).iter().map(|&v| f64::from(v)));
        }
        Tensor::new(vec![clips.len(), d], data).map_err(|e| DataError::Shape(e.to_string()))
    }
}

/// Model input rows for one window, `W × width` flattened. Clips are drawn
/// at random with `rng`, or evenly spaced when it is `None`.
pub fn visual_rows<R: Rng>(
    store: &FeatureStore,
    window: &SequenceWindow,
    reduce: ClipReduce,
    clips: usize,
    mut rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &slot in &window.slots {
        let n = store.records()[slot].n_clips;
        let idx = match rng.as_deref_mut() {
            Some(r) => sample_clip_indices(n, clips, r),
            None => eval_clip_indices(n, clips),
        }
        .map_err(|_| DataError::ClipCount {
            action: store.records()[slot].action_id,
            expected: clips,
            got: n,
        })?;
        let t = store.clip_tensor(slot, &idx)?;
        out.extend(aggregate_clips(&t, reduce)?);
    }
    Ok(out)
}
