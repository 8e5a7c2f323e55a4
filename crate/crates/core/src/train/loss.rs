use serde::{Deserialize, Serialize};

use crate::model::{Bound, Modality, ModelError, SeqDgModel};
use crate::tensor::{Graph, Var};

use super::{Batch, Result, TextLossKind, TrainConfig};

#[derive(Clone, Copy, Debug)]
pub enum TextOutputs {
    Features { recon: Var, target: Var },
    /// One logit row per center-narration token; targets live in
    /// [`ForwardOutputs::token_targets`].
    Tokens { logits: Var },
}

/// Graph handles produced by one training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub verb_logits: Var,
    pub noun_logits: Var,
    /// Reconstructed visual stream and its detached target.
    pub visual: Option<(Var, Var)>,
    pub text: Option<TextOutputs>,
    pub token_targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Verb plus noun cross-entropy on the center action.
    pub classification: f64,
    pub recon_visual: f64,
    pub recon_text: f64,
    pub total: f64,
}

/// Encodes, classifies and, for each reconstruction term with a positive
/// weight, masks the center and decodes it. Terms with zero weight are not
/// built at all.
pub fn forward(
    g: &mut Graph,
    model: &SeqDgModel,
    b: &Bound,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<ForwardOutputs> {
    let x = g.constant(batch.visual.clone());
    let enc = model.encode(g, b, x)?;
    let (verb_logits, noun_logits) = model.classify(g, b, enc.cls)?;
    let mut out = ForwardOutputs {
        verb_logits,
        noun_logits,
        visual: None,
        text: None,
        token_targets: Vec::new(),
    };
    if !cfg.reconstructs() {
        return Ok(out);
    }
    let z_t = match &batch.text {
        Some(t) => g.constant(t.clone()),
        None => {
            return Err(ModelError::Modality("reconstruction needs text features".into()).into())
        }
    };
    let z_v = enc.positions;
    if cfg.lambda_rv > 0.0 {
        let masked = model.mask_center(g, z_v)?;
        let recon = model.decode(g, b, masked, z_t, Modality::Visual)?;
        let target = g.detach(z_v);
        out.visual = Some((recon, target));
    }
    if cfg.lambda_rt > 0.0 {
        let masked = model.mask_center(g, z_t)?;
        let recon = model.decode(g, b, masked, z_v, Modality::Text)?;
        out.text = match cfg.text_loss {
            TextLossKind::Mse => Some(TextOutputs::Features { recon, target: z_t }),
            TextLossKind::TokenCrossEntropy => {
                let centers = model.text_logits(g, b, recon)?;
                let mut picks = Vec::new();
                for (w, tokens) in batch.center_tokens.iter().enumerate() {
                    for &t in tokens {
                        picks.push((0, w));
                        out.token_targets.push(t as usize);
                    }
                }
                if picks.is_empty() {
                    None
                } else {
                    let logits = g.gather_rows(&[centers], &picks)?;
                    Some(TextOutputs::Tokens { logits })
                }
            }
        };
    }
    Ok(out)
}

/// `L = L_C + λ_rV·L_rV + λ_rT·L_rT`; returns the total node and the values.
pub fn composite_loss(
    g: &mut Graph,
    out: &ForwardOutputs,
    batch: &Batch,
    lambda_rv: f64,
    lambda_rt: f64,
) -> Result<(Var, LossBreakdown)> {
    let lv = g.cross_entropy(out.verb_logits, &batch.verbs)?;
    let ln = g.cross_entropy(out.noun_logits, &batch.nouns)?;
    let lc = g.add(lv, ln)?;
    let mut terms = vec![(lc, 1.0)];
    let mut parts = LossBreakdown {
        classification: g.value(lc).values()[0],
        ..LossBreakdown::default()
    };
    if let Some((recon, target)) = out.visual {
        let l = g.mse(recon, target)?;
        parts.recon_visual = g.value(l).values()[0];
        terms.push((l, lambda_rv));
    }
    if let Some(text) = out.text {
        let l = match text {
            TextOutputs::Features { recon, target } => g.mse(recon, target)?,
            TextOutputs::Tokens { logits } => g.cross_entropy(logits, &out.token_targets)?,
        };
        parts.recon_text = g.value(l).values()[0];
        terms.push((l, lambda_rt));
    }
    let total = g.weighted_sum(&terms)?;
    parts.total = g.value(total).values()[0];
    Ok((total, parts))
}
