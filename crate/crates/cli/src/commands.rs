use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use deltaknn::delta::{build_delta_matrix, one_shot_pass, raw_path_for, save_raw, zero_shot_pass};
use deltaknn::embedding::EmbeddingClient;
use deltaknn::evaluator::{
    render_table, sweep_k, write_predictions, EvalReport, Fold, OrderingStudy,
};
use deltaknn::synthetic::SyntheticSpec;
use deltaknn::{
    Corpus, DeltaMatrix, EmbeddingStore, Experiment, Gateway, PromptTemplate, Split, Strategy,
};
use serde::Serialize;

use crate::config::{grid_row, RunConfig};
use crate::{Common, SweepKind, UsageError};

fn load_corpus(c: &RunConfig) -> Result<Corpus> {
    let path = c.corpus.path.as_ref().expect("validated");
    if !path.exists() {
        bail!(UsageError::error(format!(
            "corpus file {} does not exist",
            path.display()
        )));
    }
    let mut corpus =
        Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if let Some(test) = &c.corpus.test_path {
        if !test.exists() {
            bail!(UsageError::error(format!(
                "test corpus {} does not exist",
                test.display()
            )));
        }
        let t = Corpus::load(test).with_context(|| format!("loading corpus {}", test.display()))?;
        let docs = t
            .documents()
            .iter()
            .cloned()
            .map(|d| d.with_split(Split::Test))
            .collect();
        corpus.extend(Corpus::from_documents(t.name.clone(), docs)?)?;
    }
    Ok(corpus)
}

fn connect(c: &RunConfig) -> Result<Gateway> {
    if let Some(rules) = &c.backend.mock_rules {
        if !rules.exists() {
            bail!(UsageError::error(format!(
                "mock rule file {} does not exist",
                rules.display()
            )));
        }
    }
    c.backend.connect().context("connecting to the backend")
}

fn missing(strategy: Strategy, what: &str, path: &Path, producer: &str) -> anyhow::Error {
    anyhow!(
        "strategy {strategy} needs {what} at {}, which does not exist; produce it with `deltaknn {producer}`",
        path.display()
    )
}

fn load_matrix(c: &RunConfig, strategy: Strategy) -> Result<DeltaMatrix> {
    let path = c.matrix_path();
    if !path.exists() {
        return Err(missing(strategy, "the delta matrix", &path, "build-matrix"));
    }
    let m = DeltaMatrix::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let probe = c.prompt.probe_template()?.fingerprint();
    if m.metadata.prompt_fingerprint != probe {
        log::warn!(
            "matrix {} was probed with a different prompt template",
            path.display()
        );
    }
    Ok(m)
}

fn load_embeddings(c: &RunConfig, strategy: Strategy) -> Result<EmbeddingStore> {
    let path = c.embeddings_path();
    if !path.exists() {
        return Err(missing(strategy, "document embeddings", &path, "embed"));
    }
    EmbeddingStore::load(&path).with_context(|| format!("loading {}", path.display()))
}

struct Loaded {
    matrix: Option<DeltaMatrix>,
    embeddings: Option<EmbeddingStore>,
}

fn load_artifacts(c: &RunConfig, strategy: Strategy) -> Result<Loaded> {
    let needs_matrix = strategy == Strategy::DeltaKnn;
    let needs_embeddings = matches!(strategy, Strategy::DeltaKnn | Strategy::TopK);
    Ok(Loaded {
        matrix: needs_matrix.then(|| load_matrix(c, strategy)).transpose()?,
        embeddings: needs_embeddings
            .then(|| load_embeddings(c, strategy))
            .transpose()?,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Archives the effective config with every derived path spelled out.
fn write_resolved(c: &RunConfig) -> Result<()> {
    let mut pinned = c.clone();
    pinned.matrix.path = Some(c.matrix_path());
    pinned.embeddings.path = Some(c.embeddings_path());
    write_file(
        &c.output_dir.join("config.resolved.toml"),
        &pinned.to_toml()?,
    )
}

/// `1..20` (inclusive) or `1,5,13`.
pub fn parse_list(spec: &str) -> Result<Vec<usize>> {
    let bad = || UsageError::error(format!("cannot parse {spec:?} as `a..b` or a comma list"));
    if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b
            .trim_start_matches('=')
            .trim()
            .parse()
            .map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

fn unix_time() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

pub fn build_matrix(common: &Common, probe_row: Option<usize>, record_time: bool) -> Result<()> {
    let mut c = common.resolve()?;
    if let Some(row) = probe_row {
        grid_row(row)?;
        c.prompt.probe_row = Some(row);
    }
    let corpus = load_corpus(&c)?;
    let train = corpus.in_split(Split::Train);
    let d = train.len();
    if d < 2 {
        bail!(UsageError::error(format!(
            "need at least 2 training documents, found {d}"
        )));
    }
    let zero = d * c.runs;
    let one = d * (d - 1) * c.runs;
    if common.dry_run {
        println!("zero-shot calls: {zero}");
        println!("one-shot calls: {one}");
        println!("total backend calls: {}", zero + one);
        return Ok(());
    }
    let template = c.prompt.probe_template()?;
    let gateway = connect(&c)?;
    log::info!("zero-shot pass: {zero} calls");
    let p0 = zero_shot_pass(&gateway, &train, &template, c.runs)?;
    log::info!("one-shot pass: {one} calls");
    let p1 = one_shot_pass(&gateway, &train, &template, c.runs)?;
    let mut matrix = build_delta_matrix(&p0, &p1)?;
    if record_time {
        matrix.metadata.created = Some(unix_time());
    }
    let path = c.matrix_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    matrix.save(&path)?;
    save_raw(raw_path_for(&path), &p0, &p1)?;
    write_resolved(&c)?;
    println!(
        "wrote {} ({d} documents, {} runs, {} backend calls)",
        path.display(),
        c.runs,
        zero + one
    );
    Ok(())
}

pub fn embed(common: &Common, from: Option<&Path>) -> Result<()> {
    let c = common.resolve()?;
    let corpus = load_corpus(&c)?;
    let out = c.embeddings_path();
    let store = match from {
        Some(src) => {
            let store = EmbeddingStore::load(src)
                .with_context(|| format!("loading embeddings {}", src.display()))?;
            let absent: Vec<&str> = corpus.ids().filter(|id| !store.contains(id)).collect();
            if !absent.is_empty() {
                bail!(
                    "{} has no vector for {} document(s), e.g. {:?}",
                    src.display(),
                    absent.len(),
                    absent[0]
                );
            }
            store
        }
        None => {
            if common.dry_run {
                println!("documents to embed: {}", corpus.len());
                return Ok(());
            }
            let base_url = c.embeddings.base_url.clone().ok_or_else(|| {
                UsageError::error("remote embedding needs `embeddings.base_url` (or pass --from)")
            })?;
            let cache = c
                .embeddings
                .cache_dir
                .clone()
                .unwrap_or_else(|| c.output_dir.join("embedding-cache"));
            let client = EmbeddingClient::new(
                base_url,
                c.embeddings.model_name.clone(),
                cache,
                &c.embeddings.api_key_env,
                c.backend.timeout(),
                c.backend.max_retries,
            )
            .with_batch_size(c.embeddings.batch_size);
            let docs = corpus
                .documents()
                .iter()
                .map(|d| (d.id.as_str(), d.text.as_str()));
            EmbeddingStore::from_vectors(client.embed_documents(docs)?)?
        }
    };
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    store.save(&out)?;
    println!(
        "wrote {} ({} vectors, dimension {})",
        out.display(),
        store.len(),
        store.dim().unwrap_or(0)
    );
    Ok(())
}

/// Backend calls one evaluation pass over `folds` will make.
fn planned_calls(folds: &[Fold<'_>], c: &RunConfig, strategy: Strategy) -> usize {
    let targets: usize = folds.iter().map(|f| f.targets.len()).sum();
    let scoring: usize = if strategy == Strategy::Cone && c.selection.n_shot > 0 {
        folds
            .iter()
            .map(|f| {
                f.targets
                    .iter()
                    .map(|t| f.pool.iter().filter(|d| d.id != t.id).count())
                    .sum::<usize>()
            })
            .sum()
    } else {
        0
    };
    targets * c.runs + scoring
}

fn experiment<'a>(
    c: &RunConfig,
    gateway: &'a Gateway,
    loaded: &'a Loaded,
    template: PromptTemplate,
) -> Experiment<'a> {
    Experiment {
        gateway,
        template,
        matrix: loaded.matrix.as_ref(),
        embeddings: loaded.embeddings.as_ref(),
        runs: c.runs,
    }
}

pub fn eval(common: &Common) -> Result<()> {
    let c = common.resolve()?;
    let corpus = load_corpus(&c)?;
    let strategy = c.selection.strategy;
    let folds = Experiment::folds(&corpus, c.eval.split_spec(), c.seed)?;
    if common.dry_run {
        println!("backend calls: {}", planned_calls(&folds, &c, strategy));
        return Ok(());
    }
    let loaded = load_artifacts(&c, strategy)?;
    let gateway = connect(&c)?;
    let exp = experiment(&c, &gateway, &loaded, c.prompt.template()?);
    let out = exp.evaluate(&folds, &c.selection, None)?;
    let table = render_table(&[(strategy.to_string(), &out.report)]);
    write_json(&c.output_dir.join("report.json"), &out.report)?;
    write_file(&c.output_dir.join("report.txt"), &table)?;
    write_predictions(c.output_dir.join("predictions.jsonl"), &out.predictions)?;
    write_resolved(&c)?;
    print!("{table}");
    if out.report.fallback_parse_count > 0 {
        println!(
            "{} completion(s) carried no probability and were scored at 0.5",
            out.report.fallback_parse_count
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct Point<'a> {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<usize>,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    kind: &'static str,
    points: Vec<Point<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_k: Option<usize>,
}

fn row_name(t: &PromptTemplate) -> String {
    let mut parts = Vec::new();
    for (on, name) in [
        (t.role, "Role"),
        (t.context, "Context"),
        (t.linguistic, "Linguistic"),
        (t.cot, "CoT"),
        (t.guided_cot, "Guided-CoT"),
    ] {
        if on {
            parts.push(name);
        }
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}

fn finish_sweep(c: &RunConfig, out: SweepOutput<'_>, stem: &str) -> Result<()> {
    let rows: Vec<(String, &EvalReport)> = out
        .points
        .iter()
        .map(|p| (p.name.clone(), p.report))
        .collect();
    let mut table = render_table(&rows);
    if let Some(k) = out.best_k {
        table.push_str(&format!("best_k = {k}\n"));
    }
    write_json(&c.output_dir.join(format!("{stem}.json")), &out)?;
    write_file(&c.output_dir.join(format!("{stem}.txt")), &table)?;
    write_resolved(c)?;
    print!("{table}");
    Ok(())
}

fn render_ordering(study: &OrderingStudy) -> String {
    let mut s = String::from("order     ACC\n");
    for e in &study.entries {
        let order: Vec<String> = e.order.iter().map(|i| (i + 1).to_string()).collect();
        s.push_str(&format!("{:<8}  {:.1}\n", order.join(""), 100.0 * e.acc));
    }
    s.push_str(&format!(
        "min {:.1}  mean {:.1}  std {:.1}  max {:.1}\n",
        100.0 * study.min,
        100.0 * study.mean,
        100.0 * study.std,
        100.0 * study.max
    ));
    s
}

pub fn sweep(common: &Common, kind: SweepKind, k_range: &str, n_values: &str) -> Result<()> {
    let c = common.resolve()?;
    let corpus = load_corpus(&c)?;
    let strategy = match kind {
        SweepKind::K => Strategy::DeltaKnn,
        _ => c.selection.strategy,
    };
    let folds = match kind {
        SweepKind::K => {
            deltaknn::evaluator::cv_folds(&corpus.in_split(Split::Train), c.eval.n_folds, c.seed)?
        }
        _ => Experiment::folds(&corpus, c.eval.split_spec(), c.seed)?,
    };
    let points = match kind {
        SweepKind::K => parse_list(k_range)?.len(),
        SweepKind::Nshot => parse_list(n_values)?.len(),
        SweepKind::PromptGrid => 7,
        SweepKind::Ordering => 24,
    };
    if common.dry_run {
        println!(
            "backend calls: {}",
            points * planned_calls(&folds, &c, strategy)
        );
        return Ok(());
    }
    let loaded = load_artifacts(&c, strategy)?;
    let gateway = connect(&c)?;
    let template = c.prompt.template()?;
    match kind {
        SweepKind::K => {
            let exp = experiment(&c, &gateway, &loaded, template);
            let train = corpus.in_split(Split::Train);
            let ks = parse_list(k_range)?;
            let result = sweep_k(&exp, &train, &c.selection, &ks, c.eval.n_folds, c.seed)?;
            let out = SweepOutput {
                kind: "k",
                points: result
                    .reports
                    .iter()
                    .map(|(k, r)| Point {
                        name: format!("k={k}"),
                        value: Some(*k),
                        report: r,
                    })
                    .collect(),
                best_k: Some(result.best_k),
            };
            finish_sweep(&c, out, "sweep_k")
        }
        SweepKind::Nshot => {
            let exp = experiment(&c, &gateway, &loaded, template);
            let reports = exp.sweep_nshot(&folds, &c.selection, &parse_list(n_values)?)?;
            let out = SweepOutput {
                kind: "nshot",
                points: reports
                    .iter()
                    .map(|(n, r)| Point {
                        name: format!("n={n}"),
                        value: Some(*n),
                        report: r,
                    })
                    .collect(),
                best_k: None,
            };
            finish_sweep(&c, out, "sweep_nshot")
        }
        SweepKind::PromptGrid => {
            let mut reports = Vec::with_capacity(7);
            for row in 1..=7 {
                let mut t = grid_row(row)?;
                t.components = c.prompt.components.clone();
                let name = format!("{row}: {}", row_name(&t));
                let exp = experiment(&c, &gateway, &loaded, t);
                reports.push((name, row, exp.evaluate(&folds, &c.selection, None)?.report));
            }
            let out = SweepOutput {
                kind: "prompt_grid",
                points: reports
                    .iter()
                    .map(|(name, row, r)| Point {
                        name: name.clone(),
                        value: Some(*row),
                        report: r,
                    })
                    .collect(),
                best_k: None,
            };
            finish_sweep(&c, out, "sweep_prompt_grid")
        }
        SweepKind::Ordering => {
            let exp = experiment(&c, &gateway, &loaded, template);
            let study = exp.ordering_study(&folds, &c.selection)?;
            let text = render_ordering(&study);
            write_json(&c.output_dir.join("sweep_ordering.json"), &study)?;
            write_file(&c.output_dir.join("sweep_ordering.txt"), &text)?;
            write_resolved(&c)?;
            print!("{text}");
            Ok(())
        }
    }
}

pub fn inspect_matrix(path: Option<&Path>, config: Option<&Path>, top: usize) -> Result<()> {
    let path: PathBuf = match (path, config) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(cfg)) => RunConfig::load(cfg)?.matrix_path(),
        (None, None) => bail!(UsageError::error("give a matrix path or --config")),
    };
    if !path.exists() {
        bail!(UsageError::error(format!(
            "matrix file {} does not exist",
            path.display()
        )));
    }
    let m = DeltaMatrix::load(&path).with_context(|| format!("loading {}", path.display()))?;
    print!("{}", describe_matrix(&m, top));
    Ok(())
}

/// Shape, provenance, value range and the demonstrations with the highest and
/// lowest mean gain across all targets.
pub fn describe_matrix(m: &DeltaMatrix, top: usize) -> String {
    let values: Vec<f64> = m.entries().map(|(_, _, v)| v).collect();
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let positive = values.iter().filter(|v| **v > 0.0).count();
    let mut s = format!(
        "documents: {}\nruns: {}\nmodel: {}\nprompt fingerprint: {}\n",
        m.len(),
        m.runs(),
        m.metadata.model,
        m.metadata.prompt_fingerprint
    );
    if let Some(t) = &m.metadata.created {
        s.push_str(&format!("created: {t}\n"));
    }
    s.push_str(&format!(
        "off-diagonal entries: {}\nmean {mean:+.4}  min {min:+.4}  max {max:+.4}  positive {:.1}%\n",
        values.len(),
        100.0 * positive as f64 / n
    ));
    let d = m.len();
    if d > 1 {
        let mut rows: Vec<(&str, f64)> = m
            .doc_ids()
            .iter()
            .map(|id| {
                let sum: f64 = m
                    .entries()
                    .filter(|(a, _, _)| a == id)
                    .map(|(_, _, v)| v)
                    .sum();
                (id.as_str(), sum / (d - 1) as f64)
            })
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let k = top.min(rows.len());
        s.push_str("best demonstrations (mean gain):\n");
        for (id, v) in &rows[..k] {
            s.push_str(&format!("  {id}  {v:+.4}\n"));
        }
        s.push_str("worst demonstrations (mean gain):\n");
        for (id, v) in rows[rows.len() - k..].iter().rev() {
            s.push_str(&format!("  {id}  {v:+.4}\n"));
        }
    }
    s
}

pub fn synth(dir: &Path, train_per_label: usize, test_per_label: usize, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        train_per_label,
        test_per_label,
        seed,
        ..Default::default()
    };
    let data = spec.generate()?;
    fs::create_dir_all(dir)?;
    data.corpus.save(dir.join("corpus.jsonl"))?;
    data.embeddings.save(dir.join("embeddings.jsonl"))?;
    data.mock.save(dir.join("mock.json"))?;
    let mut c = RunConfig {
        seed,
        ..Default::default()
    };
    c.corpus.path = Some("corpus.jsonl".into());
    c.backend.model_name = data.mock.model_name.clone();
    c.backend.mock_rules = Some("mock.json".into());
    c.embeddings.path = Some("embeddings.jsonl".into());
    c.selection.k_neighbors = c.selection.k_neighbors.min(2 * train_per_label);
    // The mock averages per-demonstration answers, so every 2+2 set scores the
    // same; unbalanced selection is where strategies differ.
    c.selection.balance = false;
    write_file(&dir.join("config.toml"), &c.to_toml()?)?;
    println!(
        "wrote {} documents, embeddings, mock rules and config.toml to {}",
        data.corpus.len(),
        dir.display()
    );
    Ok(())
}
