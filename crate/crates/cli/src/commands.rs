use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use mspt::clustering::{cache_prototypes, extract_all, load_prototypes, KMeansConfig, PrototypeSet};
use mspt::data::{
    generate_synthetic, load_dataset, save_dataset, split_holdout, split_kfold, validate_manifest, Dataset, FoldPlan,
    SyntheticConfig,
};
use mspt::digest::config_digest;
use mspt::mffm::{write_attention_csv, write_gap_weights_csv, AttentionDump};
use mspt::model::{predict, ModelKind};
use mspt::train::{
    ablate_fusion, ablate_k, bench_complexity, evaluate, run_identity, run_plan_with_models, FoldResult, MetricsReport,
    TrainedModel,
};
use mspt::{Error, Result, Tensor2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{absolutize, Doc, RunConfig};
use crate::{Command, RunArgs};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const MODELS_DIR: &str = "models";

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen { config, out, seed } => gen(&config, &out, seed),
        Command::Cluster {
            data,
            out,
            config,
            k,
            restarts,
            seed,
        } => cluster(&data, &out, config.as_deref(), k, restarts, seed),
        Command::Train(args) => train(&resolve(&args)?),
        Command::Eval { run, dump_attention } => eval(&resolve(&run)?, dump_attention),
        Command::AblateK { run, k_values } => {
            let mut cfg = resolve(&run)?;
            if let Some(kv) = k_values {
                cfg.ablation.k_values = kv;
            }
            cmd_ablate_k(&cfg)
        }
        Command::AblateFusion(args) => cmd_ablate_fusion(&resolve(&args)?),
        Command::Bench {
            config,
            n_values,
            dense_n_values,
            k,
            d,
            repeats,
            seed,
            out,
        } => {
            let mut doc = Doc::load(config.as_deref())?;
            if let Some(s) = n_values {
                doc.set(&["bench", "pt_n_values"], parse_list(&s)?);
            }
            if let Some(s) = dense_n_values {
                doc.set(&["bench", "dense_n_values"], parse_list(&s)?);
            }
            doc.set_opt(&["bench", "k"], k);
            doc.set_opt(&["bench", "d"], d);
            doc.set_opt(&["bench", "repeats"], repeats);
            doc.set_opt(&["bench", "seed"], seed);
            doc.set(&["out_dir"], out.to_string_lossy().into_owned());
            let mut cfg: RunConfig = doc.parse()?;
            absolutize(&mut cfg.out_dir)?;
            bench(&cfg)
        }
        Command::Validate { data } => {
            let report = validate_manifest(&data);
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(if report.is_valid() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("`{t}` is not a bag size"))))
        .collect()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut doc = Doc::load(Some(config))?;
    doc.set_opt(&["seed"], seed);
    let cfg: SyntheticConfig = doc.parse()?;
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, out)?;
    println!(
        "{}",
        json!({"config_digest": config_digest(&cfg), "n_bags": ds.len(), "out": out})
    );
    Ok(ExitCode::SUCCESS)
}

fn cluster(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    k: Option<usize>,
    restarts: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut doc = Doc::load(config)?;
    doc.set_opt(&["k"], k);
    doc.set_opt(&["n_restarts"], restarts);
    doc.set_opt(&["seed"], seed);
    let cfg: KMeansConfig = doc.parse()?;
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let set = extract_all(&ds, &cfg)?;
    cache_prototypes(&set, out)?;
    let padded: usize = set.bags.iter().map(|b| b.warnings.len()).sum();
    println!(
        "{}",
        json!({"config_digest": set.digest, "n_bags": set.bags.len(), "padded_scales": padded, "out": out})
    );
    Ok(ExitCode::SUCCESS)
}

/// Merges the config file with the flags and resolves every path.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut doc = Doc::load(args.config.as_deref())?;
    for key in ["data_dir", "protos_dir", "out_dir"] {
        doc.resolve_file_path(key);
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
    doc.set_opt(&["data_dir"], path(&args.data_dir));
    doc.set_opt(&["protos_dir"], path(&args.protos_dir));
    doc.set_opt(&["out_dir"], path(&args.out_dir));
    if let Some(s) = args.seed {
        for section in ["train", "split", "bench"] {
            doc.set(&[section, "seed"], s);
        }
        for section in ["kmeans", "synthetic"] {
            if doc.has(section) {
                doc.set(&[section, "seed"], s);
            }
        }
    }
    if let Some(m) = &args.model {
        let kind = ModelKind::parse(m)?;
        doc.set(
            &["train", "model"],
            serde_json::to_value(kind).expect("model kind serializes"),
        );
    }
    if let Some(k) = args.k {
        doc.set(&["train", "k"], k);
        if doc.has("kmeans") {
            doc.set(&["kmeans", "k"], k);
        }
    }
    doc.set_opt(&["train", "max_epochs"], args.max_epochs);
    doc.set_opt(&["train", "early_stop_patience"], args.patience);
    doc.set_opt(&["train", "lr"], args.lr);
    doc.set_opt(&["split", "k_folds"], args.k_folds);
    let mut cfg: RunConfig = doc.parse()?;
    absolutize(&mut cfg.data_dir)?;
    absolutize(&mut cfg.protos_dir)?;
    absolutize(&mut cfg.out_dir)?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn fold_plan(ds: &Dataset, cfg: &RunConfig) -> Result<FoldPlan> {
    match cfg.split.n_test {
        Some(n) => split_holdout(ds, n, cfg.split.seed),
        None => split_kfold(ds, cfg.split.k_folds, cfg.split.seed),
    }
}

fn prototypes(cfg: &RunConfig, needed: bool) -> Result<Option<PrototypeSet>> {
    if !needed {
        return Ok(None);
    }
    Ok(Some(load_prototypes(cfg.protos_dir()?, cfg.kmeans()?)?))
}

/// The resolved run config next to what the metrics were computed from,
/// and the digest of both.
fn embed(cfg: &RunConfig, inputs: Value) -> (Value, String) {
    let v = json!({"run": cfg, "inputs": inputs});
    let digest = config_digest(&v);
    (v, digest)
}

fn data_inputs(ds: &Dataset, protos: Option<&PrototypeSet>) -> Value {
    json!({
        "dataset": config_digest(&ds.provenance),
        "prototypes": protos.map(|p| p.digest.clone()),
    })
}

#[derive(Serialize)]
struct Wrapped<'a, T> {
    config: Value,
    config_digest: String,
    result: &'a T,
}

fn write_wrapped<T: Serialize>(path: &Path, cfg: &RunConfig, inputs: Value, result: &T) -> Result<String> {
    let (config, config_digest) = embed(cfg, inputs);
    let w = Wrapped {
        config,
        config_digest,
        result,
    };
    write_text(path, &serde_json::to_string_pretty(&w).expect("report serializes"))?;
    Ok(w.config_digest)
}

/// A fold's trained model as written by `train` and read by `eval`.
#[derive(Serialize, Deserialize)]
struct SavedModel {
    /// Digest of the training inputs, checked by `eval`.
    identity_digest: String,
    fold: usize,
    model: TrainedModel,
}

fn model_path(out: &Path, fold: usize) -> PathBuf {
    out.join(MODELS_DIR).join(format!("fold{fold}.json"))
}

fn print_summary(report: &MetricsReport) {
    println!(
        "{}",
        json!({
            "model": report.model,
            "config_digest": report.config_digest,
            "accuracy": report.accuracy,
            "auc": report.auc,
        })
    );
}

fn train(cfg: &RunConfig) -> Result<ExitCode> {
    let ds = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_dir()?;
    let plan = fold_plan(&ds, cfg)?;
    let protos = prototypes(cfg, cfg.train.model.needs_prototypes())?;
    let (mut report, models) = run_plan_with_models(&ds, &plan, protos.as_ref(), &cfg.train)?;
    let identity_digest = report.config_digest.clone();
    (report.config, report.config_digest) = embed(cfg, report.config.clone());
    create_dir(&out.join(MODELS_DIR))?;
    for (fold, model) in models.into_iter().enumerate() {
        let saved = SavedModel {
            identity_digest: identity_digest.clone(),
            fold,
            model,
        };
        let path = model_path(out, fold);
        write_text(&path, &serde_json::to_string(&saved).expect("model serializes"))?;
    }
    write_text(
        &out.join("split.json"),
        &serde_json::to_string_pretty(&plan).expect("plan serializes"),
    )?;
    write_text(&out.join(REPORT_JSON), &report.to_json())?;
    report.write_csv(&out.join(REPORT_CSV))?;
    print_summary(&report);
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &RunConfig, dump_attention: bool) -> Result<ExitCode> {
    let start = Instant::now();
    let ds = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_dir()?;
    let plan = fold_plan(&ds, cfg)?;
    let protos = prototypes(cfg, cfg.train.model.needs_prototypes())?;
    let identity = run_identity(&ds, &plan, protos.as_ref(), &cfg.train);
    let identity_digest = config_digest(&identity);

    let mut folds = Vec::with_capacity(plan.folds.len());
    let mut rows = Vec::new();
    let mut maps: Vec<(String, String, Tensor2)> = Vec::new();
    let mut gap_rows: Vec<(String, Tensor2)> = Vec::new();
    for (i, fold) in plan.folds.iter().enumerate() {
        let saved: SavedModel = read_json(&model_path(out, i))?;
        if saved.identity_digest != identity_digest || saved.fold != i {
            return Err(Error::Config(format!(
                "{} was trained with a different config or split; rerun `train`",
                model_path(out, i).display()
            )));
        }
        let m = &saved.model;
        let test = ds.select(&fold.test)?;
        let ev = evaluate(&m.spec, &m.params, &test, protos.as_ref())?;
        let auc = ev.auc()?;
        for j in 0..ev.bag_ids.len() {
            rows.push([
                i.to_string(),
                ev.bag_ids[j].clone(),
                ev.labels[j].to_string(),
                ev.predicted[j].to_string(),
                ev.scores[j].to_string(),
            ]);
        }
        if dump_attention {
            for bag in &test {
                let p = protos.as_ref().map(|s| s.get(&bag.bag_id)).transpose()?;
                let pred = predict(&m.spec, &m.params, bag, p)?;
                for (s, a) in pred.a_maps.into_iter().enumerate() {
                    let scale = ds.scale_names.get(s).cloned().unwrap_or_else(|| s.to_string());
                    maps.push((bag.bag_id.clone(), scale, a));
                }
                if let Some(g) = pred.gap_weights {
                    gap_rows.push((bag.bag_id.clone(), g));
                }
            }
        }
        folds.push(FoldResult {
            fold: i,
            n_train: fold.train.len(),
            n_test: fold.test.len(),
            accuracy: ev.accuracy,
            auc,
            epochs_run: m.epochs_run,
            best_epoch: m.best_epoch,
            loss_curve: m.loss_curve.clone(),
        });
    }
    let (config, digest) = embed(cfg, identity);
    let report = MetricsReport::from_folds(
        cfg.train.model.name(),
        config,
        digest,
        folds,
        start.elapsed().as_secs_f64(),
    );
    write_text(&out.join(EVAL_JSON), &report.to_json())?;
    report.write_csv(&out.join(EVAL_CSV))?;
    write_predictions(&out.join("predictions.csv"), &rows)?;
    if dump_attention {
        let dumps: Vec<AttentionDump<'_>> = maps
            .iter()
            .map(|(bag_id, scale, a_map)| AttentionDump { bag_id, scale, a_map })
            .collect();
        write_attention_csv(&out.join("attention.csv"), &dumps)?;
        write_gap_weights_csv(&out.join("gap_weights.csv"), &gap_rows)?;
    }
    print_summary(&report);
    Ok(ExitCode::SUCCESS)
}

fn write_predictions(path: &Path, rows: &[[String; 5]]) -> Result<()> {
    let err = |e: csv::Error| io_err(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["fold", "bag_id", "label", "predicted", "score"])
        .map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_ablate_k(cfg: &RunConfig) -> Result<ExitCode> {
    let ds = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_dir()?;
    let plan = fold_plan(&ds, cfg)?;
    let grid = ablate_k(&ds, &plan, &cfg.train, cfg.kmeans()?, &cfg.ablation.k_values)?;
    create_dir(out)?;
    let digest = write_wrapped(&out.join("k_grid.json"), cfg, data_inputs(&ds, None), &grid)?;
    grid.write_csv(&out.join("k_grid.csv"))?;
    println!("{}", json!({"config_digest": digest, "best_pt_k": grid.best_pt_k()}));
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate_fusion(cfg: &RunConfig) -> Result<ExitCode> {
    let ds = load_dataset(cfg.data_dir()?)?;
    let out = cfg.out_dir()?;
    let plan = fold_plan(&ds, cfg)?;
    let protos = load_prototypes(cfg.protos_dir()?, cfg.kmeans()?)?;
    let table = ablate_fusion(&ds, &plan, &protos, &cfg.train)?;
    create_dir(out)?;
    let digest = write_wrapped(&out.join("fusion.json"), cfg, data_inputs(&ds, Some(&protos)), &table)?;
    table.write_csv(&out.join("fusion.csv"))?;
    let accuracy: Vec<Value> = table
        .rows
        .iter()
        .map(|r| json!({"strategy": r.strategy, "accuracy": r.accuracy.mean}))
        .collect();
    println!("{}", json!({"config_digest": digest, "rows": accuracy}));
    Ok(ExitCode::SUCCESS)
}

fn bench(cfg: &RunConfig) -> Result<ExitCode> {
    let out = cfg.out_dir()?;
    let report = bench_complexity(&cfg.bench)?;
    create_dir(out)?;
    let digest = write_wrapped(&out.join("bench.json"), cfg, Value::Null, &report)?;
    report.write_csv(&out.join("bench.csv"))?;
    println!(
        "{}",
        json!({"config_digest": digest, "rows": report.rows.len(), "pt_slope": report.pt_slope, "dense_slope": report.dense_slope})
    );
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_size_lists_allow_empty() {
        assert_eq!(parse_list("").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_list("1024, 2048").unwrap(), vec![1024, 2048]);
        assert!(matches!(parse_list("1k"), Err(Error::Config(_))));
    }
}
