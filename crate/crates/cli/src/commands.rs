//! Subcommand implementations. Every report is pretty JSON holding the resolved flat config
//! and the content hash of each checkpoint it used.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use seqsel::dataset::{load_dataset, write_records, SplitSpec};
use seqsel::harness::{
    hold_out, mean_se, render_table, run_method, summarize, train_variant, ExperimentReport, HarnessConfig,
    Method, MethodSummary, TaskSplit,
};
use seqsel::oracle::{CachedOracle, Oracle, PromptTemplate, RemoteOracle, SyntheticOracle, SyntheticTaskSpec};
use seqsel::trainer::{load_best, sub_seed, CheckpointDir, TrainTask};
use seqsel::{batch_construct, PrefixMode, ScorerModel, SuffixIndex};

use crate::config::{OracleKind, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Fills the seeds derived from the global seed.
pub fn derive_seeds(config: &mut RunConfig) {
    config.task.noise_seed = sub_seed(config.seed, "gen", 0, 0);
    config.train.seed = sub_seed(config.seed, "train", 0, 0);
}

pub fn validate(config: &RunConfig) -> Result<()> {
    config.train.validate()?;
    config.search.validate()?;
    config.task.validate(config.search.max_len)?;
    if config.data.eval_queries == 0 || config.data.eval_queries >= config.data.n_queries {
        return Err(CliError::Config(format!(
            "data.eval_queries must lie in 1..{}",
            config.data.n_queries
        )));
    }
    if config.ablate.seeds.is_empty() {
        return Err(CliError::Config("ablate.seeds must not be empty".into()));
    }
    Ok(())
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err("creating", dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err("writing", path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn report_path(config: &RunConfig, name: &str) -> PathBuf {
    config.paths.reports.join(name)
}

/// Task sidecar written next to a generated dataset.
pub fn sidecar(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".task.json");
    PathBuf::from(s)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

/// Loads a dataset and holds out the evaluation queries.
fn load_split(config: &RunConfig, path: &Path) -> Result<TaskSplit> {
    require(path, "dataset")?;
    let data = load_dataset(
        path,
        SplitSpec {
            query_count: config.data.n_queries,
            seed: sub_seed(config.seed, "split", 0, 0),
        },
    )?;
    Ok(hold_out(data, config.data.eval_queries)?)
}

/// The synthetic spec a dataset was generated with; the configured spec when no sidecar exists.
fn task_spec(config: &RunConfig, dataset: &Path) -> Result<SyntheticTaskSpec> {
    let path = sidecar(dataset);
    if !path.exists() {
        return Ok(config.task.clone());
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err("reading", &path, e))?;
    let spec: SyntheticTaskSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;
    spec.validate(config.search.max_len)?;
    Ok(spec)
}

fn build_oracle(config: &RunConfig, dataset: &Path) -> Result<Arc<dyn Oracle>> {
    let base: Arc<dyn Oracle> = match config.oracle.kind {
        OracleKind::Synthetic => Arc::new(SyntheticOracle::new(task_spec(config, dataset)?)),
        OracleKind::Remote => {
            let template = match &config.oracle.template {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| io_err("reading", path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?
                }
                None => PromptTemplate::default(),
            };
            Arc::new(RemoteOracle::new(config.oracle.remote.clone(), template)?)
        }
    };
    Ok(match &config.oracle.cache {
        Some(path) => Arc::new(CachedOracle::persistent(base, path)?),
        None => Arc::new(CachedOracle::in_memory(base)),
    })
}

fn harness_config(config: &RunConfig) -> HarnessConfig {
    HarnessConfig {
        search: config.search.clone(),
        train: config.train.clone(),
        knn_k: config.ablate.knn_k,
    }
}

fn load_checkpoint(config: &RunConfig) -> Result<ScorerModel> {
    let best = CheckpointDir(config.paths.checkpoint.clone()).best();
    require(&best, "checkpoint")?;
    Ok(load_best(&config.paths.checkpoint)?)
}

/// One acceptance direction and whether it held.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

fn check(name: &str, holds: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        holds,
        detail,
    }
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("{} {}: {}", if c.holds { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn fail_on(checks: &[Check]) -> Result<()> {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.holds).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(failed.join(", ")))
    }
}

pub fn gen(config: &RunConfig) -> Result<()> {
    let spec = &config.task;
    let records = spec.generate(config.data.n_candidates + config.data.n_queries);
    let out = &config.paths.dataset;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err("creating", dir, e))?;
    }
    write_records(out, &records).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_json(&sidecar(out), spec)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

pub fn train_cmd(config: &RunConfig) -> Result<String> {
    let split = load_split(config, &config.paths.dataset)?;
    let oracle = build_oracle(config, &config.paths.dataset)?;
    let dir = CheckpointDir(config.paths.checkpoint.clone());
    let tasks = [TrainTask {
        dataset: &split.train,
        oracle: &*oracle,
    }];
    let outcome = seqsel::train(&tasks, &config.train, Some(&dir))?;
    let hash = outcome.model.fingerprint().to_string();
    for e in &outcome.log {
        println!(
            "epoch {:>3}  loss {:.4}  held-out sequence {:.3}  head {:.3}",
            e.epoch, e.train_loss, e.heldout.sequence, e.heldout.head
        );
    }
    println!(
        "initial held-out sequence {:.3}; best epoch {}; checkpoint {hash}",
        outcome.initial.sequence, outcome.best_epoch
    );
    write_json(
        &report_path(config, "train.json"),
        &json!({
            "config": config.to_flat_json(),
            "checkpoint": hash,
            "initial": outcome.initial,
            "best_epoch": outcome.best_epoch,
            "log": outcome.log,
        }),
    )?;
    Ok(hash)
}

pub fn train(config: &RunConfig) -> Result<()> {
    train_cmd(config).map(|_| ())
}

pub fn index(config: &RunConfig) -> Result<()> {
    let model = load_checkpoint(config)?;
    let split = load_split(config, &config.paths.dataset)?;
    let index = SuffixIndex::load_or_build(&model, split.pool(), &config.paths.index)?;
    println!(
        "index {} holds {} entries for checkpoint {}",
        config.paths.index.display(),
        index.len(),
        model.fingerprint()
    );
    Ok(())
}

pub fn infer(config: &RunConfig) -> Result<()> {
    let model = load_checkpoint(config)?;
    let split = load_split(config, &config.paths.dataset)?;
    let oracle = build_oracle(config, &config.paths.dataset)?;
    let index = SuffixIndex::load_or_build(&model, split.pool(), &config.paths.index)?;
    let mut search = config.search.clone();
    search.record_trace = config.paths.trace.is_some();
    let results = batch_construct(&model, &index, split.pool(), &split.eval, &search);
    let mut rows = Vec::with_capacity(results.len());
    let mut qualities = Vec::with_capacity(results.len());
    let mut trace_lines = String::new();
    for (q, r) in split.eval.iter().zip(results) {
        let r = r?;
        let quality = oracle.evaluate(q, &r.best, split.pool())?.quality;
        qualities.push(quality);
        if let Some(t) = &r.trace {
            trace_lines.push_str(&serde_json::to_string(&json!({"query_id": q.id, "steps": t})).map_err(|e| CliError::Runtime(e.to_string()))?);
            trace_lines.push('\n');
        }
        rows.push(json!({
            "query_id": q.id,
            "sequence": r.best.elements(),
            "score": r.best_score,
            "quality": quality,
            "finished": r.finished_count,
            "counters": r.counters,
        }));
    }
    if let Some(path) = &config.paths.trace {
        write_file(path, trace_lines.as_bytes())?;
    }
    let (mean, se) = mean_se(&qualities);
    let mean_len = rows
        .iter()
        .map(|r| r["sequence"].as_array().map_or(0, |a| a.len()) as f64)
        .sum::<f64>()
        / rows.len().max(1) as f64;
    println!(
        "{} queries: mean quality {mean:.4} ± {se:.4}, mean length {mean_len:.2}",
        rows.len()
    );
    write_json(
        &report_path(config, "infer.json"),
        &json!({
            "config": config.to_flat_json(),
            "checkpoint": model.fingerprint(),
            "index": index.fingerprint(),
            "oracle": oracle.name(),
            "mean_quality": mean,
            "std_error": se,
            "mean_len": mean_len,
            "per_query": rows,
        }),
    )
}

fn summary(summaries: &[MethodSummary], m: Method) -> Option<&MethodSummary> {
    summaries.iter().find(|s| s.method == m)
}

/// Directional checks over seed means.
pub fn ablation_checks(summaries: &[MethodSummary]) -> Vec<Check> {
    let mut out = Vec::new();
    let Some(besc) = summary(summaries, Method::Besc) else {
        return out;
    };
    let mut cmp = |name: &str, other: Method, strict: bool| {
        if let Some(o) = summary(summaries, other) {
            let holds = if strict { besc.mean > o.mean } else { besc.mean >= o.mean };
            let op = if strict { ">" } else { ">=" };
            out.push(check(
                name,
                holds,
                format!("besc {:.4} {op} {} {:.4}", besc.mean, o.method.label(), o.mean),
            ));
        }
    };
    cmp("dynamic beats static", Method::BescStatic, true);
    cmp("unshuffled at least shuffled", Method::BescShuffled, false);
    cmp("full prefix beats length-only", Method::BescLengthOnly, true);
    if let Some(best) = summaries
        .iter()
        .filter(|s| matches!(s.method, Method::BescFixedLen(_)))
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
    {
        out.push(check(
            "auto length at least best fixed length minus one s.e.",
            besc.mean >= best.mean - besc.std_error,
            format!(
                "besc {:.4} >= {} {:.4} - {:.4}",
                besc.mean,
                best.method.label(),
                best.mean,
                besc.std_error
            ),
        ));
    }
    out
}

/// Baseline checks: trained search beats random by 0.1 and beats kNN.
pub fn quality_checks(summaries: &[MethodSummary]) -> Vec<Check> {
    let mut out = Vec::new();
    let (Some(b), Some(r), Some(k)) = (
        summary(summaries, Method::Besc),
        summary(summaries, Method::Random),
        summary(summaries, Method::Knn),
    ) else {
        return out;
    };
    out.push(check(
        "besc beats random by 0.1",
        b.mean - r.mean >= 0.10,
        format!("besc {:.4} - random {:.4} = {:.4}", b.mean, r.mean, b.mean - r.mean),
    ));
    out.push(check(
        "besc beats knn",
        b.mean > k.mean,
        format!("besc {:.4} > knn {:.4}", b.mean, k.mean),
    ));
    out
}

fn per_seed_rows(reports: &[ExperimentReport]) -> Vec<Value> {
    reports
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "method": r.method.label(),
                "mean_quality": r.mean_quality,
                "std_error": r.std_error,
                "mean_len": r.mean_len,
                "checkpoint": r.checkpoint,
            })
        })
        .collect()
}

fn summary_rows(summaries: &[MethodSummary]) -> Vec<Value> {
    summaries
        .iter()
        .map(|s| {
            json!({
                "method": s.method.label(),
                "mean": s.mean,
                "std_error": s.std_error,
                "per_seed": s.per_seed,
            })
        })
        .collect()
}

fn run_seed_methods(
    split: &TaskSplit,
    oracle: &dyn Oracle,
    hc: &HarnessConfig,
    methods: &[(Method, Option<&ScorerModel>)],
    seed: u64,
    reports: &mut Vec<ExperimentReport>,
) -> Result<()> {
    for &(m, model) in methods {
        let r = run_method(m, split.name(), split.pool(), &split.eval, model, oracle, hc, seed)?;
        println!("seed {seed}  {:<22} {:.4}  len {:.2}", m.label(), r.mean_quality, r.mean_len);
        reports.push(r);
    }
    Ok(())
}

fn variant_seed(seed: u64) -> u64 {
    sub_seed(seed, "train", 0, 0)
}

/// Runs the ablation table and returns its checks.
pub fn ablate_inner(config: &RunConfig) -> Result<Vec<Check>> {
    let split = load_split(config, &config.paths.dataset)?;
    let oracle = build_oracle(config, &config.paths.dataset)?;
    let hc = harness_config(config);
    let mut reports = Vec::new();
    for &seed in &config.ablate.seeds {
        let ts = variant_seed(seed);
        let dynamic = train_variant(&split, &*oracle, &hc, PrefixMode::Dynamic, ts)?;
        let stat = train_variant(&split, &*oracle, &hc, PrefixMode::Static, ts)?;
        let length = train_variant(&split, &*oracle, &hc, PrefixMode::LengthOnly, ts)?;
        let mut methods = vec![(Method::Besc, Some(&dynamic)), (Method::BescShuffled, Some(&dynamic))];
        for &k in &config.ablate.fixed_lengths {
            if k >= 1 && k <= config.search.max_len {
                methods.push((Method::BescFixedLen(k), Some(&dynamic)));
            }
        }
        methods.extend([
            (Method::BescStatic, Some(&stat)),
            (Method::BescLengthOnly, Some(&length)),
            (Method::Random, None),
            (Method::Knn, None),
        ]);
        run_seed_methods(&split, &*oracle, &hc, &methods, seed, &mut reports)?;
    }
    let summaries = summarize(&reports);
    let mut checks = quality_checks(&summaries);
    checks.extend(ablation_checks(&summaries));
    let table = render_table(
        &format!("{} ({} seeds)", split.name(), config.ablate.seeds.len()),
        &summaries,
    );
    print!("{table}");
    print_checks(&checks);
    write_file(&report_path(config, "ablate.txt"), table.as_bytes())?;
    write_json(
        &report_path(config, "ablate.json"),
        &json!({
            "config": config.to_flat_json(),
            "task": split.name(),
            "summary": summary_rows(&summaries),
            "runs": per_seed_rows(&reports),
            "checks": checks,
        }),
    )?;
    Ok(checks)
}

pub fn ablate(config: &RunConfig) -> Result<()> {
    fail_on(&ablate_inner(config)?)
}

pub fn transfer(config: &RunConfig) -> Result<()> {
    let target_path = config
        .transfer
        .target
        .clone()
        .ok_or_else(|| CliError::Config("transfer needs a target dataset".into()))?;
    if config.transfer.sources.len() < 2 {
        return Err(CliError::Config("transfer needs at least two source datasets".into()));
    }
    let target = load_split(config, &target_path)?;
    let target_oracle = build_oracle(config, &target_path)?;
    let mut sources = Vec::new();
    for path in &config.transfer.sources {
        sources.push((load_split(config, path)?, build_oracle(config, path)?));
    }
    if sources.iter().any(|(s, _)| s.name() == target.name()) {
        return Err(CliError::Config(format!("target {} is also a source", target.name())));
    }
    let source_refs: Vec<(&TaskSplit, &dyn Oracle)> = sources.iter().map(|(s, o)| (s, &**o as &dyn Oracle)).collect();
    let hc = harness_config(config);
    let mut reports = Vec::new();
    for &seed in &config.ablate.seeds {
        let ts = variant_seed(seed);
        let (pre, _) = seqsel::harness::run_transfer(&source_refs, (&target, &*target_oracle), &hc, ts)?;
        println!("seed {seed}  {:<22} {:.4}  len {:.2}", "pretrained", pre.mean_quality, pre.mean_len);
        let pre = ExperimentReport { seed, ..pre };
        reports.push(pre);
        let single = train_variant(&target, &*target_oracle, &hc, PrefixMode::Dynamic, ts)?;
        run_seed_methods(
            &target,
            &*target_oracle,
            &hc,
            &[(Method::Besc, Some(&single)), (Method::Knn, None)],
            seed,
            &mut reports,
        )?;
    }
    let summaries = summarize(&reports);
    let (pre, single, knn) = (
        summary(&summaries, Method::Pretrained).expect("pretrained ran"),
        summary(&summaries, Method::Besc).expect("single-task ran"),
        summary(&summaries, Method::Knn).expect("knn ran"),
    );
    let checks = vec![
        check(
            "pretrained at least knn",
            pre.mean >= knn.mean,
            format!("pretrained {:.4} >= knn {:.4}", pre.mean, knn.mean),
        ),
        check(
            "pretrained at most single-task",
            pre.mean <= single.mean,
            format!("pretrained {:.4} <= single-task {:.4}", pre.mean, single.mean),
        ),
    ];
    let title = format!(
        "{} <- {} ({} seeds; besc = single-task)",
        target.name(),
        sources.iter().map(|(s, _)| s.name()).collect::<Vec<_>>().join(", "),
        config.ablate.seeds.len()
    );
    let table = render_table(&title, &summaries);
    print!("{table}");
    print_checks(&checks);
    write_file(&report_path(config, "transfer.txt"), table.as_bytes())?;
    write_json(
        &report_path(config, "transfer.json"),
        &json!({
            "config": config.to_flat_json(),
            "target": target.name(),
            "sources": sources.iter().map(|(s, _)| s.name()).collect::<Vec<_>>(),
            "summary": summary_rows(&summaries),
            "runs": per_seed_rows(&reports),
            "checks": checks,
        }),
    )?;
    fail_on(&checks)
}

pub fn pipeline(config: &RunConfig) -> Result<()> {
    gen(config)?;
    train(config)?;
    index(config)?;
    infer(config)?;
    fail_on(&ablate_inner(config)?)
}
