use crate::model::{Bound, SeqDgModel};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport, Graph, TensorError};

use super::{composite_loss, forward, Batch, Result, TrainConfig};

/// Finite-difference check of the full training objective on `batch`, over
/// every parameter the objective touches. The visual reconstruction target
/// is a stop-gradient copy of the encoder output, so it is frozen at the
/// unperturbed parameters; otherwise the differences would see it move.
pub fn check_loss_gradients(
    model: &SeqDgModel,
    batch: &Batch,
    cfg: &TrainConfig,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let ids = if cfg.reconstructs() {
        model.all_param_ids()
    } else {
        model.inference_param_ids()
    };
    let params: Vec<_> = ids
        .iter()
        .map(|&id| {
            let p = model.params().get(id);
            (p.name.clone(), p.value.clone())
        })
        .collect();
    let frozen_target = {
        let mut g = Graph::new();
        let b = model.bind_all(&mut g, false);
        let out = forward(&mut g, model, &b, batch, cfg)?;
        out.visual.map(|(_, t)| g.value(t).clone())
    };
    let report = grad_check(
        &params,
        |g, vars| {
            let pairs: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let b = Bound::from_vars(model.params(), &pairs);
            let lift = |e: super::TrainError| TensorError::Invalid(e.to_string());
            let mut out = forward(g, model, &b, batch, cfg).map_err(lift)?;
            if let (Some((recon, _)), Some(t)) = (out.visual, &frozen_target) {
                out.visual = Some((recon, g.constant(t.clone())));
            }
            let (total, _) =
                composite_loss(g, &out, batch, cfg.lambda_rv, cfg.lambda_rt).map_err(lift)?;
            Ok(total)
        },
        gc,
    )?;
    Ok(report)
}
