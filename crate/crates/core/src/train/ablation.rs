use std::fmt;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::model::ModelConfig;

/// One cell of a component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub sequence: bool,
    pub seqmix: bool,
    pub lambda_rv: f64,
    pub lambda_rt: f64,
    pub window: usize,
}

impl AblationPoint {
    /// The single-action baseline: no context, no mixing, no reconstruction.
    pub fn baseline() -> Self {
        AblationPoint {
            sequence: false,
            seqmix: false,
            lambda_rv: 0.0,
            lambda_rt: 0.0,
            window: 1,
        }
    }

    /// Without sequence context the window collapses to the center action,
    /// which leaves nothing to reconstruct from.
    pub fn canonical(self) -> Self {
        if self.sequence && self.window > 1 {
            self
        } else {
            AblationPoint {
                sequence: false,
                lambda_rv: 0.0,
                lambda_rt: 0.0,
                window: 1,
                ..self
            }
        }
    }

    /// `p_mix` of the base config is kept when mixing is on.
    pub fn configure(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let p = self.canonical();
        let model = ModelConfig {
            window: p.window,
            ..model.clone()
        };
        let train = TrainConfig {
            lambda_rv: p.lambda_rv,
            lambda_rt: p.lambda_rt,
            p_mix: if p.seqmix { train.p_mix } else { 0.0 },
            ..train.clone()
        };
        (model, train)
    }
}

impl fmt::Display for AblationPoint {
    /// Short directory-safe name such as `w5-mix-rv1-rt1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.canonical();
        write!(f, "w{}", p.window)?;
        if p.seqmix {
            write!(f, "-mix")?;
        }
        write!(f, "-rv{}-rt{}", p.lambda_rv, p.lambda_rt)
    }
}

/// Cartesian product of the axes after canonicalization, duplicates
/// removed, in first-seen order.
pub fn ablation_grid(
    sequence: &[bool],
    seqmix: &[bool],
    lambda_rv: &[f64],
    lambda_rt: &[f64],
    windows: &[usize],
) -> Vec<AblationPoint> {
    let mut out: Vec<AblationPoint> = Vec::new();
    for &s in sequence {
        for &m in seqmix {
            for &rv in lambda_rv {
                for &rt in lambda_rt {
                    for &w in windows {
                        let p = AblationPoint {
                            sequence: s,
                            seqmix: m,
                            lambda_rv: rv,
                            lambda_rt: rt,
                            window: w,
                        }
                        .canonical();
                        if !out.contains(&p) {
                            out.push(p);
                        }
                    }
                }
            }
        }
    }
    out
}
