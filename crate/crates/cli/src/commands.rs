use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use seqdg::data::{
    annotation_rows, build_windows, import_annotations, read_annotations, AnnotationRow,
    FeatureStore, ImportSpec,
};
use seqdg::eval::{evaluate, write_predictions, EvalResults};
use seqdg::model::{Checkpoint, ModelConfig, SeqDgModel};
use seqdg::stats::{count_repeats, render_text, Category};
use seqdg::synth::{generate, write, SynthConfig};
use seqdg::tensor::GradCheckConfig;
use seqdg::train::{
    ablation_grid, check_loss_gradients, fit, narration_embedder, AblationPoint, Batch,
    FitReport, TextTable,
};

use crate::config::{check, config_error, RunConfig};
use crate::rundir::{dataset_hashes, sha256_file, RunDir};
use crate::{Common, GradientMismatch, Overrides, Split};

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    RunConfig::load(common.config.as_deref())
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common, o: &Overrides) {
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = o.window {
        cfg.model.window = w;
    }
    if let Some(l) = o.lambda_rv {
        cfg.train.lambda_rv = l;
    }
    if let Some(l) = o.lambda_rt {
        cfg.train.lambda_rt = l;
    }
    if let Some(p) = o.p_mix {
        cfg.train.p_mix = p;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
}

fn manifest_path(cli: Option<PathBuf>, cfg: &mut RunConfig) -> anyhow::Result<PathBuf> {
    let path = cli
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| config_error("no dataset: pass --data or set data.manifest"))?;
    let path = std::path::absolute(&path).unwrap_or(path);
    cfg.data.manifest = Some(path.clone());
    Ok(path)
}

fn load_store(path: &Path) -> anyhow::Result<FeatureStore> {
    FeatureStore::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    seed: u64,
    version: &'a str,
    data: Vec<crate::rundir::FileHash>,
}

fn write_provenance(run: &RunDir, command: &str, cfg: &RunConfig, seed: u64, data: Vec<crate::rundir::FileHash>) -> anyhow::Result<()> {
    run.write("config.toml", cfg.to_toml()?)?;
    run.write_json(
        "run.json",
        &RunInfo {
            command,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            data,
        },
    )
}

pub fn synth_gen(common: &Common) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
    }
    check(cfg.synth.violations())?;
    let mut run = RunDir::create(common.out.as_deref(), "synth-gen", common.quiet)?;
    let (store, truth) = generate(&cfg.synth)?;
    let manifest = write(run.path(), &store, &truth)?;
    cfg.data.manifest = Some(PathBuf::from("manifest.json"));
    write_provenance(&run, "synth-gen", &cfg, cfg.synth.seed, dataset_hashes(&manifest)?)?;

    let ceiling = truth.single_action_ceiling();
    let context = truth.expected_context_accuracy();
    run.write_json(
        "oracle.json",
        &serde_json::json!({
            "single_action_ceiling": ceiling,
            "context_oracle_accuracy": context,
            "margin_points": 100.0 * (context - ceiling),
        }),
    )?;
    run.log(format!(
        "wrote {} actions in {} domains to {}",
        store.len(),
        store.manifest().domains.len(),
        manifest.display()
    ));
    run.log(format!(
        "single-action ceiling {:.1}%, context oracle {:.1}%",
        100.0 * ceiling,
        100.0 * context
    ));
    Ok(())
}

pub fn import(
    common: &Common,
    annotations: Option<PathBuf>,
    blob: Option<PathBuf>,
    text_features: Option<PathBuf>,
    target_domains: Vec<String>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    let imp = &mut cfg.import;
    imp.annotations = annotations.or(imp.annotations.take());
    imp.blob = blob.or(imp.blob.take());
    imp.text_features = text_features.or(imp.text_features.take());
    if !target_domains.is_empty() {
        imp.target_domains = target_domains;
    }
    let mut problems = Vec::new();
    if imp.annotations.is_none() {
        problems.push("import.annotations (or --annotations) is required".to_string());
    }
    if imp.blob.is_none() {
        problems.push("import.blob (or --blob) is required".to_string());
    }
    for (name, v) in [("d_visual", imp.d_visual), ("d_text", imp.d_text), ("clips_per_action", imp.clips_per_action)] {
        if v == 0 {
            problems.push(format!("import.{name} must be >= 1"));
        }
    }
    check(problems)?;
    let csv = imp.annotations.clone().expect("checked");
    let spec = ImportSpec {
        dataset: imp.dataset.clone(),
        d_visual: imp.d_visual,
        d_text: imp.d_text,
        clips_per_action: imp.clips_per_action,
        n_verbs: imp.n_verbs,
        n_nouns: imp.n_nouns,
        target_domains: imp.target_domains.clone(),
        blob: imp.blob.clone().expect("checked"),
        text_features: imp.text_features.clone(),
    };
    let rows = read_annotations(&csv)?;
    let store = import_annotations(&rows, &spec)?;

    let mut run = RunDir::create(common.out.as_deref(), "import", common.quiet)?;
    let manifest = store.save(run.path())?;
    let mut inputs = vec![csv, spec.blob.clone()];
    inputs.extend(spec.text_features.clone());
    let mut hashes = inputs
        .into_iter()
        .map(|path| Ok(crate::rundir::FileHash { sha256: sha256_file(&path)?, path }))
        .collect::<anyhow::Result<Vec<_>>>()?;
    hashes.extend(dataset_hashes(&manifest)?);
    cfg.data.manifest = Some(PathBuf::from("manifest.json"));
    write_provenance(&run, "import", &cfg, 0, hashes)?;
    let split = store.split();
    run.log(format!(
        "imported {} actions, {} source and {} target domains, into {}",
        store.len(),
        split.source().len(),
        split.target().len(),
        manifest.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct TrainResults {
    seqmix: seqdg::data::SeqMixStats,
    source: EvalResults,
    target: Option<EvalResults>,
}

/// Trains one model, streaming epoch metrics to `metrics`.
fn train_model(
    store: &FeatureStore,
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
    run: &mut RunDir,
    metrics: &Path,
) -> anyhow::Result<FitReport> {
    let model = SeqDgModel::new(model_cfg.clone(), cfg.train.seed)?;
    let mut out = BufWriter::new(File::create(metrics).with_context(|| format!("creating {}", metrics.display()))?);
    let mut write_err = None;
    let report = fit(store, model, &cfg.train, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
        run.log(format!(
            "epoch {:>3}  lr {:.2e}  loss {:.4} (cls {:.4} rv {:.4} rt {:.4})  source action {:.1}%",
            m.epoch,
            m.lr,
            m.loss.total,
            m.loss.classification,
            m.loss.recon_visual,
            m.loss.recon_text,
            m.source_action_acc
        ));
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    out.flush()?;
    Ok(report)
}

fn evaluate_splits(store: &FeatureStore, model: &SeqDgModel) -> anyhow::Result<(EvalResults, Option<EvalResults>)> {
    let split = store.split();
    let (source, _) = evaluate(store, model, split.source(), "source")?;
    let target = if split.target().is_empty() {
        None
    } else {
        Some(evaluate(store, model, split.target(), "target")?.0)
    };
    Ok((source, target))
}

fn describe(r: &EvalResults) -> String {
    let a = r.top1.rounded();
    format!(
        "{} ({} actions): top-1 verb {:.1} noun {:.1} action {:.1}",
        r.split, r.samples, a.verb, a.noun, a.action
    )
}

pub fn train(common: &Common, overrides: &Overrides, data: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    apply_overrides(&mut cfg, common, overrides);
    let manifest = manifest_path(data, &mut cfg)?;
    let store = load_store(&manifest)?;
    cfg.fit_model_to(&store);
    check(cfg.train_violations(Some(&store)))?;

    let mut run = RunDir::create(common.out.as_deref(), "train", common.quiet)?;
    write_provenance(&run, "train", &cfg, cfg.train.seed, dataset_hashes(&manifest)?)?;
    run.log(format!("training on {} with W={}", manifest.display(), cfg.model.window));
    let metrics = run.join("metrics.jsonl");
    let report = train_model(&store, &cfg.model, &cfg, &mut run, &metrics)?;

    let mut rng_state = cfg.train.seed.to_le_bytes().to_vec();
    rng_state.extend((cfg.train.epochs as u64).to_le_bytes());
    let ck = Checkpoint::from_model(&report.model, serde_json::to_value(&cfg)?, report.frozen_tensors(), rng_state)?;
    ck.save(run.join("checkpoint.ckpt"))?;

    let (source, target) = evaluate_splits(&store, &report.model)?;
    run.log(describe(&source));
    if let Some(t) = &target {
        run.log(describe(t));
    }
    run.write_json(
        "results.json",
        &TrainResults {
            seqmix: report.seqmix,
            source,
            target,
        },
    )?;
    run.log(format!("run directory: {}", run.path().display()));
    Ok(())
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    data: Option<PathBuf>,
    split: Split,
    window: Option<usize>,
) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut cfg: RunConfig = serde_json::from_value(ck.config_value()?)
        .map_err(|e| config_error(format!("checkpoint config: {e}")))?;
    let model = ck.to_model()?;
    if let Some(w) = window {
        if w != model.config().window {
            return Err(seqdg::eval::EvalError::WindowMismatch {
                trained: model.config().window,
                requested: w,
            }
            .into());
        }
    }
    let manifest = manifest_path(data, &mut cfg)?;
    let store = load_store(&manifest)?;
    let s = store.split();
    let (domains, name) = match split {
        Split::Source => (s.source().to_vec(), "source"),
        Split::Target => (s.target().to_vec(), "target"),
        Split::All => ([s.source(), s.target()].concat(), "all"),
    };

    let mut run = RunDir::create(common.out.as_deref(), "eval", common.quiet)?;
    let mut hashes = vec![crate::rundir::FileHash {
        path: checkpoint.to_path_buf(),
        sha256: sha256_file(checkpoint)?,
    }];
    hashes.extend(dataset_hashes(&manifest)?);
    write_provenance(&run, "eval", &cfg, cfg.train.seed, hashes)?;
    let (results, preds) = evaluate(&store, &model, &domains, name)?;
    write_predictions(run.join("predictions.jsonl"), &preds)?;
    run.write_json("results.json", &results)?;
    run.log(describe(&results));
    Ok(())
}

#[derive(Serialize)]
struct AblationRun {
    point: AblationPoint,
    label: String,
    seed: u64,
    target: EvalResults,
}

#[derive(Serialize)]
struct AblationSummary {
    point: AblationPoint,
    label: String,
    seeds: Vec<u64>,
    mean_target_top1_verb: f64,
    mean_target_top1_noun: f64,
    mean_target_top1_action: f64,
}

pub fn ablate(common: &Common, overrides: &Overrides, data: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    apply_overrides(&mut cfg, common, overrides);
    if let Some(s) = common.seed {
        cfg.ablate.seeds = vec![s];
    }
    if let Some(w) = overrides.window {
        cfg.ablate.windows = vec![w];
    }
    if let Some(l) = overrides.lambda_rv {
        cfg.ablate.lambda_rv = vec![l];
    }
    if let Some(l) = overrides.lambda_rt {
        cfg.ablate.lambda_rt = vec![l];
    }
    let manifest = manifest_path(data, &mut cfg)?;
    let store = load_store(&manifest)?;
    cfg.fit_model_to(&store);
    let mut problems = cfg.train_violations(Some(&store));
    problems.extend(cfg.ablate_violations());
    if store.split().target().is_empty() {
        problems.push("ablate needs at least one target domain in the dataset".into());
    }
    check(problems)?;

    let a = &cfg.ablate;
    let grid = ablation_grid(&a.sequence, &a.seqmix, &a.lambda_rv, &a.lambda_rt, &a.windows);
    let mut run = RunDir::create(common.out.as_deref(), "ablate", common.quiet)?;
    write_provenance(&run, "ablate", &cfg, a.seeds[0], dataset_hashes(&manifest)?)?;
    run.log(format!("{} grid points x {} seeds", grid.len(), a.seeds.len()));

    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for point in &grid {
        let label = point.to_string();
        let mut sums = [0.0; 3];
        for &seed in &cfg.ablate.seeds {
            let (model_cfg, train_cfg) = point.configure(&cfg.model, &cfg.train);
            let point_cfg = RunConfig {
                model: model_cfg.clone(),
                train: seqdg::train::TrainConfig { seed, ..train_cfg },
                ..cfg.clone()
            };
            let dir = run.path().join(&label).join(format!("seed{seed}"));
            std::fs::create_dir_all(&dir)?;
            run.log(format!("== {label} seed {seed}"));
            let report = train_model(&store, &model_cfg, &point_cfg, &mut run, &dir.join("metrics.jsonl"))?;
            let (target, _) = evaluate(&store, &report.model, store.split().target(), "target")?;
            run.log(describe(&target));
            std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(&target)? + "\n")?;
            sums[0] += target.top1.verb;
            sums[1] += target.top1.noun;
            sums[2] += target.top1.action;
            runs.push(AblationRun {
                point: *point,
                label: label.clone(),
                seed,
                target,
            });
        }
        let n = cfg.ablate.seeds.len() as f64;
        summary.push(AblationSummary {
            point: *point,
            label,
            seeds: cfg.ablate.seeds.clone(),
            mean_target_top1_verb: sums[0] / n,
            mean_target_top1_noun: sums[1] / n,
            mean_target_top1_action: sums[2] / n,
        });
    }
    run.write_json("runs.json", &runs)?;
    run.write_json("summary.json", &summary)?;
    let mut csv = String::from("label,window,seqmix,lambda_rv,lambda_rt,verb,noun,action\n");
    for s in &summary {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.2},{:.2},{:.2}\n",
            s.label,
            s.point.window,
            s.point.seqmix,
            s.point.lambda_rv,
            s.point.lambda_rt,
            s.mean_target_top1_verb,
            s.mean_target_top1_noun,
            s.mean_target_top1_action
        ));
    }
    run.write("summary.csv", &csv)?;
    run.log("mean target top-1 (verb / noun / action):");
    for s in &summary {
        run.log(format!(
            "  {:<24} {:>6.1} {:>6.1} {:>6.1}",
            s.label, s.mean_target_top1_verb, s.mean_target_top1_noun, s.mean_target_top1_action
        ));
    }
    Ok(())
}

pub fn seq_stats(
    common: &Common,
    annotations: Vec<PathBuf>,
    data: Option<PathBuf>,
    max_length: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if !annotations.is_empty() {
        cfg.stats.annotations = annotations;
    }
    if let Some(m) = max_length {
        cfg.stats.max_length = m;
    }
    if cfg.stats.max_length < 2 {
        check(vec![format!("stats.max_length must be >= 2, got {}", cfg.stats.max_length)])?;
    }
    let (rows, hashes): (Vec<AnnotationRow>, _) = if cfg.stats.annotations.is_empty() {
        let manifest = manifest_path(data, &mut cfg)?;
        (annotation_rows(&load_store(&manifest)?), dataset_hashes(&manifest)?)
    } else {
        let mut rows = Vec::new();
        let mut hashes = Vec::new();
        for p in &cfg.stats.annotations {
            rows.extend(read_annotations(p)?);
            hashes.push(crate::rundir::FileHash {
                path: p.clone(),
                sha256: sha256_file(p)?,
            });
        }
        (rows, hashes)
    };
    let mut run = RunDir::create(common.out.as_deref(), "seq-stats", common.quiet)?;
    write_provenance(&run, "seq-stats", &cfg, 0, hashes)?;
    let tables: Vec<_> = Category::ALL
        .iter()
        .map(|&c| count_repeats(&rows, cfg.stats.max_length, c))
        .collect();
    let text = render_text(&tables);
    run.write("table.txt", &text)?;
    run.write_json("counts.json", &tables)?;
    run.log(format!("{} annotated actions", rows.len()));
    if !common.quiet {
        print!("{text}");
    }
    Ok(())
}

pub fn grad_check(common: &Common, overrides: &Overrides) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    apply_overrides(&mut cfg, common, overrides);
    if let Some(w) = overrides.window {
        cfg.grad_check.window = w;
    }
    let gc = cfg.grad_check.clone();
    // Five verbs and five nouns: a ten-word narration vocabulary.
    let synth = SynthConfig {
        n_source_domains: 2,
        n_target_domains: 0,
        n_verbs: 5,
        n_nouns: 5,
        n_ambiguous_pairs: 0,
        videos_per_domain: 1,
        actions_per_video: 6,
        clips_per_action: 2,
        d_visual: 6,
        d_text: gc.d_model,
        seed: cfg.train.seed,
        ..SynthConfig::default()
    };
    let model_cfg = ModelConfig {
        window: gc.window,
        d_model: gc.d_model,
        d_text: gc.d_model,
        d_ff: 2 * gc.d_model,
        n_heads: gc.n_heads,
        clips_sampled: 2,
        ..cfg.model.clone()
    };
    check(synth.violations())?;
    let (store, _) = generate(&synth)?;
    cfg.model = model_cfg;
    cfg.fit_model_to(&store);
    let mut problems = cfg.train_violations(None);
    if !(gc.h >= 1e-6 && gc.h <= 1e-4) {
        problems.push(format!("grad_check.h must lie in [1e-6, 1e-4], got {}", gc.h));
    }
    if gc.batch == 0 {
        problems.push("grad_check.batch must be >= 1".into());
    }
    check(problems)?;

    let mut run = RunDir::create(common.out.as_deref(), "grad-check", common.quiet)?;
    write_provenance(&run, "grad-check", &cfg, cfg.train.seed, Vec::new())?;
    let windows = build_windows(&store.videos(), cfg.model.window)?;
    let embedder = narration_embedder(&store, cfg.model.d_text, cfg.train.seed)?;
    let text = TextTable::from_store(&store, &embedder)?;
    let take = gc.batch.min(windows.len());
    let batch = Batch::from_windows(&store, &windows[..take], &cfg.model, Some(&text))?;
    let model = SeqDgModel::new(cfg.model.clone(), cfg.train.seed)?;
    let started = std::time::Instant::now();
    let report = check_loss_gradients(
        &model,
        &batch,
        &cfg.train,
        &GradCheckConfig {
            h: gc.h,
            tol: gc.tol,
            floor: gc.floor,
        },
    )?;
    let per_param: Vec<_> = report
        .params
        .iter()
        .map(|p| serde_json::json!({"name": p.name, "max_rel_err": p.max_rel_err, "failing": p.failing.len()}))
        .collect();
    run.write_json(
        "report.json",
        &serde_json::json!({
            "max_rel_err": report.max_rel_err,
            "tol": report.tol,
            "coordinates": report.coordinates,
            "seconds": started.elapsed().as_secs_f64(),
            "params": per_param,
        }),
    )?;
    run.log(format!(
        "{} coordinates, max relative error {:.3e} (tolerance {:.0e})",
        report.coordinates, report.max_rel_err, report.tol
    ));
    if !report.passed() {
        return Err(GradientMismatch(report.failing_params().join(", ")).into());
    }
    Ok(())
}
