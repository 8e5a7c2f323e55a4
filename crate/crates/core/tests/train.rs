use seqdg::data::build_windows;
use seqdg::eval::evaluate;
use seqdg::model::{Checkpoint, ModelConfig, SeqDgModel};
use seqdg::synth::{generate, SynthConfig};
use seqdg::tensor::{GradCheckConfig, Graph};
use seqdg::train::{
    ablation_grid, check_loss_gradients, composite_loss, AblationPoint, fit, forward, lr_at, narration_embedder, Batch,
    ForwardOutputs, TextLossKind, TextTable, TrainConfig, TrainError,
};

fn toy_synth() -> SynthConfig {
    SynthConfig {
        n_source_domains: 2,
        n_target_domains: 1,
        n_verbs: 10,
        n_nouns: 10,
        n_ambiguous_pairs: 3,
        videos_per_domain: 2,
        actions_per_video: 10,
        clips_per_action: 3,
        d_visual: 6,
        d_text: 8,
        seed: 5,
        ..SynthConfig::default()
    }
}

fn toy_model(window: usize) -> ModelConfig {
    ModelConfig {
        window,
        d_model: 8,
        d_visual: 6,
        d_text: 8,
        d_ff: 12,
        n_heads: 2,
        n_verbs: 10,
        n_nouns: 10,
        vocab_size: 20,
        clips_sampled: 2,
        ..ModelConfig::default()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 0.05,
        lr_decay_epochs: vec![],
        seed: 11,
        ..TrainConfig::default()
    }
}

fn toy_batch(cfg: &ModelConfig, tcfg: &TrainConfig) -> (Batch, SeqDgModel) {
    let (store, _) = generate(&toy_synth()).unwrap();
    let videos = store.videos_in(store.split().source());
    let windows = build_windows(&videos, cfg.window).unwrap();
    let embedder = narration_embedder(&store, cfg.d_text, tcfg.seed).unwrap();
    let text = TextTable::from_store(&store, &embedder).unwrap();
    let batch = Batch::from_windows(&store, &windows[..6], cfg, Some(&text)).unwrap();
    (batch, SeqDgModel::new(cfg.clone(), 3).unwrap())
}

fn run_forward(
    model: &SeqDgModel,
    batch: &Batch,
    cfg: &TrainConfig,
    lv: f64,
    lt: f64,
) -> (Graph, ForwardOutputs, seqdg::train::LossBreakdown, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let b = model.bind_all(&mut g, true);
    let out = forward(&mut g, model, &b, batch, cfg).unwrap();
    let (total, parts) = composite_loss(&mut g, &out, batch, lv, lt).unwrap();
    g.backward(total).unwrap();
    let grads = model
        .all_param_ids()
        .iter()
        .map(|&id| g.grad(b.get(id)).unwrap().to_vec())
        .collect();
    (g, out, parts, grads)
}

#[test]
fn step_schedule() {
    let cfg = TrainConfig::default();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b;
    assert!(close(lr_at(0, &cfg), 0.005));
    assert!(close(lr_at(49, &cfg), 0.005));
    assert!(close(lr_at(50, &cfg), 0.0005));
    assert!(close(lr_at(74, &cfg), 0.0005));
    assert!(close(lr_at(75, &cfg), 0.00005));
    assert!(close(lr_at(99, &cfg), 0.00005));
}

#[test]
fn config_violations_are_all_reported() {
    let cfg = TrainConfig {
        lambda_rv: -1.0,
        lr: f64::NAN,
        lr_decay_epochs: vec![75, 50],
        p_mix: 1.5,
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.violations().len(), 5, "{:?}", cfg.violations());
    assert!(TrainConfig::default().violations().is_empty());
}

#[test]
fn zero_weights_reduce_to_classification() {
    let mcfg = toy_model(3);
    let tcfg = quick(1);
    let (batch, model) = toy_batch(&mcfg, &tcfg);
    let (_, _, parts, _) = run_forward(&model, &batch, &tcfg, 0.0, 0.0);
    assert_eq!(parts.total, parts.classification);
    assert!(parts.recon_visual > 0.0 && parts.recon_text > 0.0);
}

#[test]
fn identical_reconstruction_has_zero_loss() {
    let mcfg = toy_model(3);
    let tcfg = quick(1);
    let (batch, model) = toy_batch(&mcfg, &tcfg);
    let mut g = Graph::new();
    let b = model.bind_all(&mut g, true);
    let mut out = forward(&mut g, &model, &b, &batch, &tcfg).unwrap();
    let (_, target) = out.visual.unwrap();
    out.visual = Some((target, target));
    let (_, parts) = composite_loss(&mut g, &out, &batch, 1.0, 1.0).unwrap();
    assert_eq!(parts.recon_visual, 0.0);
}

fn log_softmax_ce(row: &[f64], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - row[label]
}

#[test]
fn components_match_independent_recomputation() {
    let mcfg = toy_model(3);
    for kind in [TextLossKind::Mse, TextLossKind::TokenCrossEntropy] {
        let tcfg = TrainConfig { text_loss: kind, ..quick(1) };
        let (batch, model) = toy_batch(&mcfg, &tcfg);
        let (g, out, parts, _) = run_forward(&model, &batch, &tcfg, 1.0, 1.0);

        let n = batch.len() as f64;
        let (vl, nl) = (g.value(out.verb_logits), g.value(out.noun_logits));
        let lc: f64 = (0..batch.len())
            .map(|i| log_softmax_ce(vl.row(i), batch.verbs[i]) + log_softmax_ce(nl.row(i), batch.nouns[i]))
            .sum::<f64>()
            / n;
        let mse = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
        };
        let (rv, tv) = out.visual.unwrap();
        let lrv = mse(g.value(rv).values(), g.value(tv).values());
        let lrt = match out.text.unwrap() {
            seqdg::train::TextOutputs::Features { recon, target } => {
                mse(g.value(recon).values(), g.value(target).values())
            }
            seqdg::train::TextOutputs::Tokens { logits } => {
                let l = g.value(logits);
                let t = &out.token_targets;
                assert_eq!(t.len(), 2 * batch.len());
                (0..t.len()).map(|i| log_softmax_ce(l.row(i), t[i])).sum::<f64>() / t.len() as f64
            }
        };
        assert!((parts.classification - lc).abs() < 1e-12);
        assert!((parts.recon_visual - lrv).abs() < 1e-12);
        assert!((parts.recon_text - lrt).abs() < 1e-12);
        assert!((parts.total - (lc + lrv + lrt)).abs() < 1e-12);
    }
}

#[test]
fn total_gradient_is_weighted_sum_of_components() {
    let mcfg = toy_model(3);
    let tcfg = quick(1);
    let (batch, model) = toy_batch(&mcfg, &tcfg);
    let (_, _, _, g00) = run_forward(&model, &batch, &tcfg, 0.0, 0.0);
    let (_, _, _, g10) = run_forward(&model, &batch, &tcfg, 1.0, 0.0);
    let (_, _, _, g01) = run_forward(&model, &batch, &tcfg, 0.0, 1.0);
    let (a, b) = (0.7, 2.5);
    let (_, _, parts, gab) = run_forward(&model, &batch, &tcfg, a, b);
    assert!(
        (parts.total - (parts.classification + a * parts.recon_visual + b * parts.recon_text)).abs() < 1e-12
    );
    for p in 0..g00.len() {
        for i in 0..g00[p].len() {
            let expected = g00[p][i] + a * (g10[p][i] - g00[p][i]) + b * (g01[p][i] - g00[p][i]);
            assert!((gab[p][i] - expected).abs() < 1e-10 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let mcfg = ModelConfig {
        d_model: 8,
        d_text: 8,
        ..toy_model(3)
    };
    for kind in [TextLossKind::Mse, TextLossKind::TokenCrossEntropy] {
        let tcfg = TrainConfig { text_loss: kind, ..quick(1) };
        let (batch, model) = toy_batch(&mcfg, &tcfg);
        let report = check_loss_gradients(&model, &batch, &tcfg, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-3, "{kind:?}: {} {:?}", report.max_rel_err, report.failing_params());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let (store, _) = generate(&SynthConfig {
        n_source_domains: 1,
        n_target_domains: 0,
        videos_per_domain: 1,
        actions_per_video: 4,
        ..toy_synth()
    })
    .unwrap();
    let model = SeqDgModel::new(toy_model(3), 1).unwrap();
    let before = model.params().clone();
    let report = fit(&store, model, &TrainConfig { lr: 0.0, ..quick(1) }, |_| {}).unwrap();
    assert_eq!(report.history[0].windows, 4);
    for ((_, a), (_, b)) in before.iter().zip(report.model.params().iter()) {
        let bits = |t: &seqdg::tensor::Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (store, _) = generate(&toy_synth()).unwrap();
    let run = || {
        let model = SeqDgModel::new(toy_model(3), 9).unwrap();
        let r = fit(&store, model, &quick(3), |_| {}).unwrap();
        let ck = Checkpoint::from_model(&r.model, serde_json::json!({}), r.frozen_tensors(), vec![]).unwrap();
        (ck.to_bytes(), serde_json::to_string(&r.history).unwrap())
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);

    let model = SeqDgModel::new(toy_model(3), 9).unwrap();
    let other = fit(&store, model, &TrainConfig { seed: 12, ..quick(3) }, |_| {}).unwrap();
    let ck = Checkpoint::from_model(&other.model, serde_json::json!({}), other.frozen_tensors(), vec![]).unwrap();
    assert_ne!(ck.to_bytes(), a);
}

#[test]
fn memorizes_eight_windows() {
    let (store, _) = generate(&SynthConfig {
        n_source_domains: 1,
        n_target_domains: 0,
        n_ambiguous_pairs: 0,
        videos_per_domain: 1,
        actions_per_video: 8,
        ..toy_synth()
    })
    .unwrap();
    let model = SeqDgModel::new(toy_model(3), 4).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        ..quick(200)
    };
    let r = fit(&store, model, &cfg, |_| {}).unwrap();
    let (res, _) = evaluate(&store, &r.model, store.split().source(), "source").unwrap();
    assert_eq!(res.samples, 8);
    assert_eq!(res.top1.action, 100.0);
}

#[test]
fn training_touches_source_domains_only() {
    let (store, _) = generate(&toy_synth()).unwrap();
    let source_actions = store
        .records()
        .iter()
        .filter(|r| store.split().is_source(r.domain_id))
        .count();
    assert!(source_actions < store.len());
    let model = SeqDgModel::new(toy_model(5), 2).unwrap();
    let cfg = TrainConfig { p_mix: 1.0, ..quick(2) };
    let r = fit(&store, model, &cfg, |_| {}).unwrap();
    assert_eq!(r.history[0].windows, source_actions);
    assert!(r.seqmix.replaced > 0);
}

#[test]
fn untrained_classification_loss_is_near_uniform() {
    let (store, _) = generate(&SynthConfig::default()).unwrap();
    let mcfg = ModelConfig {
        d_model: 32,
        d_visual: 64,
        d_text: 32,
        d_ff: 64,
        n_heads: 4,
        n_verbs: 20,
        n_nouns: 20,
        vocab_size: 40,
        ..ModelConfig::default()
    };
    let model = SeqDgModel::new(mcfg, 0).unwrap();
    let cfg = TrainConfig {
        lambda_rv: 0.0,
        lambda_rt: 0.0,
        lr: 1e-9,
        epochs: 1,
        ..TrainConfig::default()
    };
    let r = fit(&store, model, &cfg, |_| {}).unwrap();
    let expected = 2.0 * 20f64.ln();
    let got = r.history[0].loss.classification;
    assert!((got - expected).abs() < 0.1 * expected, "{got} vs {expected}");
}

#[test]
fn divergence_is_reported() {
    let (store, _) = generate(&toy_synth()).unwrap();
    let model = SeqDgModel::new(toy_model(3), 2).unwrap();
    let cfg = TrainConfig { lr: 1e150, ..quick(5) };
    match fit(&store, model, &cfg, |_| {}) {
        Err(TrainError::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|r| r.history)),
    }
}

#[test]
fn metrics_track_learning_rate() {
    let (store, _) = generate(&toy_synth()).unwrap();
    let model = SeqDgModel::new(toy_model(1), 2).unwrap();
    let cfg = TrainConfig {
        lr: 0.005,
        epochs: 4,
        lr_decay_epochs: vec![1, 3],
        lambda_rv: 0.0,
        lambda_rt: 0.0,
        ..quick(4)
    };
    let mut seen = Vec::new();
    fit(&store, model, &cfg, |m| seen.push(m.lr)).unwrap();
    let expected = [0.005, 0.0005, 0.0005, 0.00005];
    for (a, b) in seen.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn ablation_grid_folds_context_free_points_into_the_baseline() {
    let grid = ablation_grid(&[false, true], &[false, true], &[0.0, 1.0], &[0.0, 1.0], &[1, 5]);
    // Two single-action points (with and without mixing) plus 2 x 2 x 2 at W=5.
    assert_eq!(grid.len(), 10);
    assert_eq!(grid[0], AblationPoint::baseline());
    assert!(grid.iter().filter(|p| p.window == 1).all(|p| p.lambda_rv == 0.0 && p.lambda_rt == 0.0 && !p.sequence));

    let base = AblationPoint { lambda_rv: 1.0, ..AblationPoint::baseline() };
    let (m, t) = base.configure(&toy_model(5), &TrainConfig::default());
    assert_eq!(m.window, 1);
    assert_eq!((t.lambda_rv, t.lambda_rt, t.p_mix), (0.0, 0.0, 0.0));
    assert_eq!(base.to_string(), "w1-rv0-rt0");

    let full = AblationPoint { sequence: true, seqmix: true, lambda_rv: 1.0, lambda_rt: 0.5, window: 5 };
    let (m, t) = full.configure(&toy_model(3), &TrainConfig::default());
    assert_eq!(m.window, 5);
    assert_eq!((t.lambda_rv, t.lambda_rt, t.p_mix), (1.0, 0.5, 0.5));
    assert_eq!(full.to_string(), "w5-mix-rv1-rt0.5");
}
