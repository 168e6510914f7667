use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;
use xc_core::anns::{measure_recall, AnnsIndex, IndexKind};
use xc_core::dataset::{
    generate_synthetic, load_dataset, parse_xc_file, random_labels, write_binary, write_xc_file, TfIdf,
};
use xc_core::eval::{evaluate, fit_propensity, Predictor};
use xc_core::trainer::{train, train_full_loss_baseline, TrainLog, TrainedModel};
use xc_core::{Error, MetricsReport, SamplerStrategy, SparseDataset, SparseVector};

use crate::config::{prepare_out, EvalMode, RunConfig};
use crate::ConfigError;

const FULL_LOSS_ARM: &str = "full-loss";

/// Training and optional held-out split after featurization and label
/// restriction.
pub struct Splits {
    pub train: SparseDataset,
    pub test: Option<SparseDataset>,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn label_feature_rows(path: &Path, n_labels: usize) -> Result<Vec<SparseVector>> {
    let lf = parse_xc_file(path)?;
    if lf.n_points() != n_labels {
        return Err(Error::Dimension(format!(
            "{} has {} rows for {} labels",
            path.display(),
            lf.n_points(),
            n_labels
        ))
        .into());
    }
    Ok(lf.rows().to_vec())
}

/// Loads the configured splits, or generates the synthetic pair.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let e = &cfg.extras;
    let (mut train, mut test) = match &e.train_path {
        Some(p) => {
            let train = load_dataset(p)?;
            let test = e.test_path.as_ref().map(load_dataset).transpose()?;
            (train, test)
        }
        None => {
            let (tr, te) = generate_synthetic(
                e.synth_n_points,
                e.synth_n_features,
                e.synth_n_labels,
                e.synth_labels_per_point,
                e.synth_noise,
                e.synth_seed,
            )?;
            (tr, Some(te))
        }
    };
    if let Some(p) = &e.label_features_path {
        let rows = label_feature_rows(p, train.n_labels())?;
        train = train.with_label_features(rows.clone())?;
        test = test.map(|t| t.with_label_features(rows)).transpose()?;
    }
    if let Some(t) = &test {
        if t.n_labels() != train.n_labels() || t.n_features() != train.n_features() {
            return Err(Error::Dimension(format!(
                "test split is {} features x {} labels, training split {} x {}",
                t.n_features(),
                t.n_labels(),
                train.n_features(),
                train.n_labels()
            ))
            .into());
        }
    }
    if e.tfidf {
        let tf = TfIdf::fit(&train);
        train = tf.transform(&train);
        test = test.map(|t| tf.transform(&t));
    }
    if e.label_subset > 0 {
        let labels = random_labels(train.n_labels(), e.label_subset, cfg.train.seed)?;
        train = train.subset_by_labels(&labels)?;
        test = test.map(|t| t.subset_by_labels(&labels)).transpose()?;
    }
    Ok(Splits { train, test })
}

fn metrics_for(
    cfg: &RunConfig,
    model: &TrainedModel,
    splits: &Splits,
    eval_ds: &SparseDataset,
    predictor: Predictor<'_>,
) -> Result<MetricsReport> {
    let stats = splits.train.stats();
    let prop = fit_propensity(
        &stats.label_frequency,
        splits.train.n_points(),
        cfg.extras.propensity_a,
        cfg.extras.propensity_b,
    )?;
    Ok(evaluate(
        eval_ds,
        &model.encoder,
        &model.bank,
        &cfg.extras.ks,
        &prop,
        predictor,
    )?)
}

fn summarize(log: &TrainLog) -> serde_json::Value {
    let last = log.records.last();
    json!({
        "epochs": log.records.len(),
        "final_p_at_1": log.final_p_at_1(),
        "final_p_at_5": log.records.iter().rev().find_map(|r| r.p_at_5),
        "final_mean_slate_loss": last.map(|r| r.mean_slate_loss),
        "wall_seconds": last.map(|r| r.wall_seconds),
    })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.check_inputs(false)?;
    prepare_out(out)?;
    let splits = load_splits(cfg)?;
    write_json(&out.join("config.json"), &cfg.to_json())?;
    let (model, log) = train(&splits.train, splits.test.as_ref(), &cfg.train, Some(out))?;
    model.save(out.join("model.xast"))?;
    log.write_files(out.join("train_log.csv"), out.join("train_log.json"))?;
    let eval_ds = splits.test.as_ref().unwrap_or(&splits.train);
    let report = metrics_for(cfg, &model, &splits, eval_ds, Predictor::Exact)?;
    report.write_json(out.join("metrics.json"))?;
    println!("{}", serde_json::to_string_pretty(&summarize(&log))?);
    println!("{}", report.to_json_string());
    Ok(())
}

fn check_model_dims(model: &TrainedModel, ds: &SparseDataset) -> Result<()> {
    let input = model.encoder.input_dim();
    if input != ds.n_features() {
        return Err(Error::Dimension(format!(
            "checkpoint encoder expects {input} features, dataset has {}",
            ds.n_features()
        ))
        .into());
    }
    if model.bank.n_labels() != ds.n_labels() {
        return Err(Error::Dimension(format!(
            "checkpoint has {} labels, dataset has {}",
            model.bank.n_labels(),
            ds.n_labels()
        ))
        .into());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.check_inputs(true)?;
    prepare_out(out)?;
    let model = TrainedModel::load(cfg.extras.checkpoint.as_ref().expect("checked"))?;
    let splits = load_splits(cfg)?;
    let eval_ds = splits.test.as_ref().unwrap_or(&splits.train);
    check_model_dims(&model, eval_ds)?;
    let mode = cfg.extras.eval_mode;
    let mut reports = Vec::new();
    if matches!(mode, EvalMode::Exact | EvalMode::Both) {
        let r = metrics_for(cfg, &model, &splits, eval_ds, Predictor::Exact)?;
        r.write_json(out.join("metrics_exact.json"))?;
        reports.push(("exact", r));
    }
    if matches!(mode, EvalMode::Anns | EvalMode::Both) {
        let index = AnnsIndex::build(
            IndexKind::ApproxGraph,
            model.bank.weights().clone(),
            &cfg.train.index_params(),
        )?;
        let predictor = Predictor::Anns {
            index: &index,
            query_beam: cfg.train.query_beam,
        };
        let r = metrics_for(cfg, &model, &splits, eval_ds, predictor)?;
        r.write_json(out.join("metrics_anns.json"))?;
        reports.push(("anns", r));
        if mode == EvalMode::Both {
            let k = cfg.extras.ks.iter().copied().max().expect("ks validated non-empty");
            let rows: Vec<usize> = (0..eval_ds.n_points()).collect();
            let queries = model.encoder.embed_rows(eval_ds, &rows)?.embeddings;
            let exact = AnnsIndex::build_exact(model.bank.weights().clone())?;
            let recall = measure_recall(&index, &exact, &queries, k, cfg.train.query_beam)?;
            log::info!("recall@{k} of the graph index against exact scoring: {recall:.4}");
            write_json(&out.join("recall.json"), &json!({ "k": k, "recall": recall }))?;
        }
    }
    for (name, r) in &reports {
        println!("{name}: {}", r.to_json_string());
    }
    Ok(())
}

/// One ablation arm: a sampling strategy or the full loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Strategy(SamplerStrategy),
    FullLoss,
}

impl Arm {
    pub fn parse(name: &str) -> Result<Self> {
        if name == FULL_LOSS_ARM {
            return Ok(Self::FullLoss);
        }
        name.parse::<SamplerStrategy>()
            .map(Self::Strategy)
            .map_err(|_| ConfigError(format!("unknown ablation arm `{name}`")).into())
    }

    pub fn name(&self) -> String {
        match self {
            Self::Strategy(s) => s.name().to_string(),
            Self::FullLoss => FULL_LOSS_ARM.to_string(),
        }
    }
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.check_inputs(false)?;
    if cfg.extras.arms.is_empty() {
        return Err(ConfigError("ablation needs at least one arm".into()).into());
    }
    let arms: Vec<Arm> = cfg.extras.arms.iter().map(|a| Arm::parse(a)).collect::<Result<_>>()?;
    prepare_out(out)?;
    let splits = load_splits(cfg)?;
    write_json(&out.join("config.json"), &cfg.to_json())?;
    let mut summary_csv = String::from("arm,final_p_at_1,final_p_at_5,mean_epoch_seconds,wall_seconds\n");
    let mut summary = Vec::new();
    for arm in arms {
        let name = arm.name();
        log::info!("ablation arm {name}");
        let (_, log) = match arm {
            Arm::FullLoss => train_full_loss_baseline(&splits.train, splits.test.as_ref(), &cfg.train, None)?,
            Arm::Strategy(s) => {
                let c = xc_core::TrainConfig {
                    strategy: s,
                    ..cfg.train.clone()
                };
                train(&splits.train, splits.test.as_ref(), &c, None)?
            }
        };
        let mut curve = String::from("epoch,wall_seconds,p_at_1,p_at_5\n");
        for r in &log.records {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            curve.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                r.wall_seconds,
                opt(r.p_at_1),
                opt(r.p_at_5)
            ));
        }
        let path = out.join(format!("curve_{name}.csv"));
        std::fs::write(&path, curve).with_context(|| format!("cannot write {}", path.display()))?;
        let p1 = log.final_p_at_1();
        let p5 = log.records.iter().rev().find_map(|r| r.p_at_5);
        let wall = log.records.last().map(|r| r.wall_seconds).unwrap_or(0.0);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        summary_csv.push_str(&format!(
            "{name},{},{},{},{wall}\n",
            opt(p1),
            opt(p5),
            log.mean_epoch_seconds()
        ));
        summary.push(json!({
            "arm": name,
            "final_p_at_1": p1,
            "final_p_at_5": p5,
            "mean_epoch_seconds": log.mean_epoch_seconds(),
            "wall_seconds": wall,
        }));
    }
    let path = out.join("summary.csv");
    std::fs::write(&path, &summary_csv).with_context(|| format!("cannot write {}", path.display()))?;
    write_json(&out.join("summary.json"), &serde_json::Value::Array(summary))?;
    print!("{summary_csv}");
    Ok(())
}

fn label_features_dataset(ds: &SparseDataset) -> Result<Option<SparseDataset>> {
    let Some(lf) = ds.label_features() else {
        return Ok(None);
    };
    let positives = (0..ds.n_labels() as u32).map(|l| vec![l]).collect();
    Ok(Some(SparseDataset::new(
        ds.n_features(),
        ds.n_labels(),
        lf.to_vec(),
        positives,
        None,
    )?))
}

pub fn cmd_gen_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let e = &cfg.extras;
    let (train, test) = generate_synthetic(
        e.synth_n_points,
        e.synth_n_features,
        e.synth_n_labels,
        e.synth_labels_per_point,
        e.synth_noise,
        e.synth_seed,
    )?;
    write_xc_file(&train, out.join("train.txt"))?;
    write_xc_file(&test, out.join("test.txt"))?;
    if let Some(lf) = label_features_dataset(&train)? {
        write_xc_file(&lf, out.join("label_features.txt"))?;
    }
    if e.binary_cache {
        write_binary(&train, out.join("train.xcds"))?;
        write_binary(&test, out.join("test.xcds"))?;
    }
    let oracle = xc_core::dataset::prototype_oracle_precision(&test)?;
    let info = json!({
        "n_train": train.n_points(),
        "n_test": test.n_points(),
        "n_features": train.n_features(),
        "n_labels": train.n_labels(),
        "prototype_oracle_p_at_1": oracle,
    });
    write_json(&out.join("synth.json"), &info)?;
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

pub fn cmd_index_recall(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.check_inputs(true)?;
    prepare_out(out)?;
    let model = TrainedModel::load(cfg.extras.checkpoint.as_ref().expect("checked"))?;
    let splits = load_splits(cfg)?;
    let ds = splits.test.as_ref().unwrap_or(&splits.train);
    check_model_dims(&model, ds)?;
    let k = cfg.extras.recall_k;
    if k == 0 || k > model.bank.n_labels() {
        return Err(ConfigError(format!("recall_k must lie in 1..={}", model.bank.n_labels())).into());
    }
    let n = cfg.extras.recall_queries.min(ds.n_points());
    if n == 0 {
        return Err(ConfigError("recall_queries must be positive".into()).into());
    }
    let rows: Vec<usize> = (0..n).collect();
    let queries = model.encoder.embed_rows(ds, &rows)?.embeddings;
    let params = cfg.train.index_params();
    let started = std::time::Instant::now();
    let approx = AnnsIndex::build(IndexKind::ApproxGraph, model.bank.weights().clone(), &params)?;
    let build_seconds = started.elapsed().as_secs_f64();
    let exact = AnnsIndex::build_exact(model.bank.weights().clone())?;
    let recall = measure_recall(&approx, &exact, &queries, k, params.query_beam)?;
    let info = json!({
        "recall": recall,
        "k": k,
        "n_queries": n,
        "n_labels": model.bank.n_labels(),
        "max_degree": params.max_degree,
        "build_beam": params.build_beam,
        "query_beam": params.query_beam,
        "build_seconds": build_seconds,
    });
    write_json(&out.join("recall.json"), &info)?;
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}
