//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use vl_core::encoder::Vocabulary;
use vl_data::manifest::{load_manifest, save_manifest, Manifest, Split};
use vl_data::stats::stats as manifest_stats;
use vl_data::subset::{average_length, restrict_labels, subset_strategy, vocabulary_size, SubsetSpec};
use vl_data::synthetic::generate_shape_world;
use vl_train::checkpoint::load_checkpoint;
use vl_train::corpus::PretrainCorpus;
use vl_train::runs::{
    build_pretrain_model, finetune_run, pretrain_run, FinetuneOutcome, InitMode,
};

use crate::config::{
    load_generate_config, load_run_config, resolve_out_dir, RunConfigFile, CONFIG_VERSION,
};
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))
}

fn write_resolved_config(dir: &Path, cfg: &RunConfigFile) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Io(format!("serialize resolved config: {e}")))?;
    std::fs::write(dir.join("config.resolved.toml"), text)
        .map_err(|e| CliError::Io(format!("write resolved config: {e}")))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("read {}: {e}", path.display())))?;
    let tokens: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Vocabulary::from_tokens(tokens)?)
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split '{other}'"))),
    }
}

#[derive(Serialize)]
struct RunSummary {
    command: String,
    seed: u64,
    steps: usize,
    final_accuracy: Option<f64>,
    best_accuracy: Option<f64>,
    wall_secs: f64,
}

pub fn generate(
    config_path: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_generate_config(&config_path)?;
    if let Some(s) = seed {
        cfg.shapeworld.seed = s;
    }
    let dir = resolve_out_dir(out, None, "shapeworld").ok_or_else(|| {
        CliError::Config("generate needs --out (or VL_OUT_ROOT set)".into())
    })?;
    ensure_dir(&dir)?;
    let world = generate_shape_world(&cfg.shapeworld)?;
    save_manifest(&world.captions, &dir.join("captions.jsonl"))?;
    save_manifest(&world.labels, &dir.join("labels.jsonl"))?;
    save_manifest(&world.vqa, &dir.join("vqa.jsonl"))?;
    save_manifest(&world.pairs, &dir.join("pairs.jsonl"))?;
    let vocab = Vocabulary::from_texts(world.all_texts().iter().map(String::as_str));
    write_json(&dir.join("vocab.json"), &vocab.tokens().to_vec())?;
    let resolved = toml::to_string_pretty(&cfg)
        .map_err(|e| CliError::Io(format!("serialize resolved config: {e}")))?;
    std::fs::write(dir.join("shapeworld.resolved.toml"), resolved)
        .map_err(|e| CliError::Io(format!("write resolved config: {e}")))?;
    println!(
        "generated shape world in {} (captions {}, labels {}, vqa {}, pairs {}, vocab {})",
        dir.display(),
        world.captions.len(),
        world.labels.len(),
        world.vqa.len(),
        world.pairs.len(),
        vocab.len()
    );
    Ok(())
}

fn apply_pretrain_overrides(
    cfg: &mut RunConfigFile,
    steps: Option<usize>,
    seed: Option<u64>,
    batch: Option<usize>,
) {
    if let Some(v) = steps {
        cfg.optimization.steps = Some(v);
    }
    if let Some(v) = seed {
        cfg.optimization.seed = Some(v);
    }
    if let Some(v) = batch {
        cfg.optimization.batch = Some(v);
    }
}

pub fn pretrain(
    config_path: PathBuf,
    steps: Option<usize>,
    seed: Option<u64>,
    batch: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(&config_path)?;
    apply_pretrain_overrides(&mut cfg, steps, seed, batch);
    let scheme = cfg
        .task
        .scheme
        .clone()
        .ok_or_else(|| CliError::Config("pretraining needs task.scheme".into()))?;
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| CliError::Config("pretraining needs data.manifest".into()))?;
    let vocab_path = cfg
        .data
        .vocab
        .clone()
        .ok_or_else(|| CliError::Config("pretraining needs data.vocab".into()))?;
    let steps = cfg
        .optimization
        .steps
        .ok_or_else(|| CliError::Config("pretraining needs optimization.steps".into()))?;

    let mut manifest = load_manifest(&manifest_path)?;
    if let Some(max_n) = cfg.task.max_labels {
        let (restricted, unique) = restrict_labels(&manifest, max_n)?;
        manifest = restricted;
        println!("restricted to top-{max_n} labels per record ({unique} unique labels)");
    }
    let vocab = load_vocab(&vocab_path)?;
    let model_cfg = cfg.model_config();
    let opts = cfg.pretrain_options();

    let dir = resolve_out_dir(out, cfg.output.dir.clone(), "pretrain");
    if let Some(d) = &dir {
        ensure_dir(d)?;
        write_resolved_config(d, &cfg)?;
    }

    let model = build_pretrain_model(model_cfg.clone(), vocab, opts.seed)?;
    let corpus = PretrainCorpus::new(&manifest, &scheme, model_cfg.patch_size)?;
    let started = Instant::now();
    let outcome = pretrain_run(model, &corpus, steps, &opts, dir.as_deref(), None)?;
    let last = outcome.metrics.iter().rev().find(|r| r.split == "train");
    if let Some(row) = last {
        println!(
            "pretraining done: {} steps, final train loss {:.4} (mlm {:.4}, itm {:.4})",
            steps,
            row.loss_total,
            row.loss_mlm.unwrap_or(f64::NAN),
            row.loss_itm.unwrap_or(f64::NAN)
        );
    }
    if let Some(d) = &dir {
        write_json(
            &d.join("summary.json"),
            &RunSummary {
                command: "pretrain".into(),
                seed: opts.seed,
                steps,
                final_accuracy: None,
                best_accuracy: None,
                wall_secs: started.elapsed().as_secs_f64(),
            },
        )?;
        println!("run directory: {}", d.display());
    }
    Ok(())
}

pub fn finetune(
    config_path: PathBuf,
    init: String,
    epochs: Option<usize>,
    seed: Option<u64>,
    batch: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(&config_path)?;
    if let Some(v) = epochs {
        cfg.optimization.epochs = Some(v);
    }
    if let Some(v) = seed {
        cfg.optimization.seed = Some(v);
    }
    if let Some(v) = batch {
        cfg.optimization.batch = Some(v);
    }
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| CliError::Config("finetuning needs data.manifest".into()))?;
    let vocab_path = cfg
        .data
        .vocab
        .clone()
        .ok_or_else(|| CliError::Config("finetuning needs data.vocab".into()))?;
    let manifest = load_manifest(&manifest_path)?;
    let vocab = load_vocab(&vocab_path)?;
    let model_cfg = cfg.model_config();
    let task_name = cfg.task.name.clone().unwrap_or_else(|| "task".to_string());
    let epochs = cfg.optimization.epochs.unwrap_or(10);

    let ckpt_holder;
    let captions_holder;
    let labels_holder;
    let (init_mode, after_bimodal) = match init.as_str() {
        "random" => (InitMode::Random, false),
        "unimodal" => {
            let cap_path = cfg.data.captions.clone().ok_or_else(|| {
                CliError::Config("unimodal init needs data.captions".into())
            })?;
            let lab_path = cfg.data.labels.clone().ok_or_else(|| {
                CliError::Config("unimodal init needs data.labels".into())
            })?;
            captions_holder = load_manifest(&cap_path)?;
            labels_holder = load_manifest(&lab_path)?;
            (
                InitMode::UnimodalProxy {
                    captions: &captions_holder,
                    labels: &labels_holder,
                    opts: cfg.proxy_options(),
                },
                false,
            )
        }
        path => {
            ckpt_holder = load_checkpoint(Path::new(path))?;
            (InitMode::FromCheckpoint(&ckpt_holder), true)
        }
    };
    let opts = cfg.finetune_options(after_bimodal)?;

    let dir = resolve_out_dir(out, cfg.output.dir.clone(), "finetune");
    if let Some(d) = &dir {
        ensure_dir(d)?;
        write_resolved_config(d, &cfg)?;
    }
    let started = Instant::now();
    let outcome: FinetuneOutcome = finetune_run(
        &model_cfg,
        &vocab,
        &task_name,
        &manifest,
        init_mode,
        epochs,
        &opts,
        Split::Test,
        dir.as_deref(),
    )?;
    println!(
        "finetuning done: final accuracy {:.4}, best accuracy {:.4}",
        outcome.final_accuracy, outcome.best_accuracy
    );
    if let Some(d) = &dir {
        write_json(
            &d.join("summary.json"),
            &RunSummary {
                command: "finetune".into(),
                seed: opts.seed,
                steps: outcome.metrics.iter().filter(|r| r.split == "train").count(),
                final_accuracy: Some(outcome.final_accuracy),
                best_accuracy: Some(outcome.best_accuracy),
                wall_secs: started.elapsed().as_secs_f64(),
            },
        )?;
        println!("run directory: {}", d.display());
    }
    Ok(())
}

pub fn evaluate(
    checkpoint: PathBuf,
    manifest_path: PathBuf,
    split: String,
    batch: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&checkpoint)?;
    let manifest = load_manifest(&manifest_path)?;
    let split = parse_split(&split)?;
    let accuracy = vl_train::runs::evaluate_checkpoint(&ckpt, &manifest, split, batch)?;
    println!("{accuracy:.4}");
    #[derive(Serialize)]
    struct Report {
        checkpoint: String,
        manifest: String,
        split: String,
        accuracy: f64,
    }
    let report = Report {
        checkpoint: checkpoint.display().to_string(),
        manifest: manifest_path.display().to_string(),
        split: format!("{split:?}").to_lowercase(),
        accuracy,
    };
    let report_path =
        out.unwrap_or_else(|| checkpoint.with_extension("eval.json"));
    write_json(&report_path, &report)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn subset(
    manifest_path: PathBuf,
    strategy: String,
    k: Option<usize>,
    p: Option<f64>,
    pool: usize,
    seed: u64,
    out: PathBuf,
) -> Result<(), CliError> {
    let manifest = load_manifest(&manifest_path)?;
    let spec = SubsetSpec { k, p, pool, seed };
    let strat = subset_strategy(&strategy)?;
    let selected = strat.select(&manifest, &spec)?;
    save_manifest(&selected, &out)?;
    println!(
        "{} -> {} records (size {}, average length {:.2}, vocabulary {})",
        strategy,
        selected.len(),
        selected.len(),
        average_length(&selected),
        vocabulary_size(&selected)
    );
    Ok(())
}

pub fn stats(manifest_path: PathBuf, out: Option<PathBuf>) -> Result<(), CliError> {
    let manifest = load_manifest(&manifest_path)?;
    let s = manifest_stats(&manifest);
    println!(
        "training_instances {}  unique_texts {}  training_images {}",
        s.training_instances, s.unique_texts, s.training_images
    );
    if let Some(path) = out {
        write_json(&path, &s)?;
    }
    Ok(())
}

pub fn gradcheck(config: Option<PathBuf>, seed: u64, coords: usize) -> Result<(), CliError> {
    let model_cfg = match config {
        Some(path) => load_run_config(&path)?.model_config(),
        None => Default::default(),
    };
    let report = vl_train::gradcheck::run_gradcheck(&model_cfg, seed, coords)?;
    for (name, rel) in &report.items {
        println!("{name}: {rel:.3e}");
    }
    println!("max relative error: {:.3e}", report.max_rel);
    if report.max_rel >= 1e-4 {
        return Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel
        )));
    }
    Ok(())
}

// ---- grid -------------------------------------------------------------------

#[derive(Debug, Clone, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfigFile {
    pub version: u32,
    pub grid: GridSection,
    pub data: GridData,
    #[serde(default)]
    pub model: Option<vl_core::encoder::VLConfig>,
    #[serde(default)]
    pub optimization: crate::config::OptSection,
}

#[derive(Debug, Clone, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Caption-corpus fractions in percent (0 means no bimodal pretraining).
    pub fractions: Vec<f64>,
    /// Pretraining step budget per fraction, parallel to `fractions`.
    pub steps: Vec<usize>,
    /// Tasks to finetune: "pair" and/or "vqa".
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    #[serde(default)]
    pub scheme: Option<String>,
}

#[derive(Debug, Clone, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridData {
    pub captions: PathBuf,
    pub labels: PathBuf,
    pub vqa: PathBuf,
    pub pairs: PathBuf,
    pub vocab: PathBuf,
}

#[derive(Debug, Clone)]
struct GridCell {
    fraction: f64,
    steps: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize)]
struct GridRow {
    fraction: f64,
    task: String,
    seed: u64,
    accuracy: f64,
    best_accuracy: f64,
}

/// Subsets the train split to `percent` while keeping validation intact.
fn fraction_of_train(manifest: &Manifest, percent: f64, seed: u64) -> Result<Manifest, CliError> {
    if percent >= 100.0 {
        return Ok(manifest.clone());
    }
    let train: Vec<_> = manifest.split(Split::Train).cloned().collect();
    let rest: Vec<_> = manifest.records.iter().filter(|r| r.split != Split::Train).cloned().collect();
    let train_manifest = manifest.with_records(train);
    let spec = SubsetSpec::with_p(percent / 100.0, seed);
    let sub = subset_strategy("fraction")?.select(&train_manifest, &spec)?;
    let mut records = sub.records;
    records.extend(rest);
    Ok(manifest.with_records(records))
}

fn run_grid_cell(
    cell: &GridCell,
    cfg: &GridConfigFile,
    captions: &Manifest,
    labels: &Manifest,
    vqa: &Manifest,
    pairs: &Manifest,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> Result<Vec<GridRow>, CliError> {
    let model_cfg = cfg.model.clone().unwrap_or_default();
    let run_cfg = RunConfigFile {
        version: CONFIG_VERSION,
        model: Some(model_cfg.clone()),
        data: Default::default(),
        task: Default::default(),
        optimization: cfg.optimization.clone(),
        output: Default::default(),
    };

    // bimodal pretraining at this fraction (skipped at 0%)
    let ckpt = if cell.fraction > 0.0 {
        let subset = fraction_of_train(captions, cell.fraction, cell.seed)?;
        let scheme = cfg.grid.scheme.as_deref().unwrap_or("cc");
        let mut opts = run_cfg.pretrain_options();
        opts.seed = cell.seed;
        let model = build_pretrain_model(model_cfg.clone(), vocab.clone(), cell.seed)?;
        let corpus = PretrainCorpus::new(&subset, scheme, model_cfg.patch_size)?;
        let dir = out_dir.map(|d| d.join(format!("pretrain-f{}-s{}", cell.fraction, cell.seed)));
        if let Some(d) = &dir {
            ensure_dir(d)?;
        }
        let outcome = pretrain_run(model, &corpus, cell.steps, &opts, dir.as_deref(), None)?;
        Some(outcome.checkpoint)
    } else {
        None
    };

    let mut rows = Vec::new();
    for task in &cfg.grid.tasks {
        let (manifest, task_name) = match task.as_str() {
            "pair" => (pairs, "nlvr2"),
            "vqa" => (vqa, "vqav2"),
            other => return Err(CliError::Config(format!("unknown grid task '{other}'"))),
        };
        let mut task_cfg = run_cfg.clone();
        task_cfg.task.name = Some(task_name.to_string());
        let mut opts = task_cfg.finetune_options(ckpt.is_some())?;
        opts.seed = cell.seed;
        let proxy = {
            let mut p = task_cfg.proxy_options();
            p.seed = cell.seed;
            p
        };
        let init = match &ckpt {
            Some(c) => InitMode::FromCheckpoint(c),
            None => InitMode::UnimodalProxy { captions, labels, opts: proxy },
        };
        let dir = out_dir.map(|d| {
            d.join(format!("finetune-{task}-f{}-s{}", cell.fraction, cell.seed))
        });
        if let Some(d) = &dir {
            ensure_dir(d)?;
        }
        let outcome = finetune_run(
            &model_cfg,
            vocab,
            task_name,
            manifest,
            init,
            cfg.grid.epochs,
            &opts,
            Split::Test,
            dir.as_deref(),
        )?;
        rows.push(GridRow {
            fraction: cell.fraction,
            task: task.clone(),
            seed: cell.seed,
            accuracy: outcome.final_accuracy,
            best_accuracy: outcome.best_accuracy,
        });
    }
    Ok(rows)
}

pub fn grid(config_path: PathBuf, out: Option<PathBuf>, parallel: usize) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&config_path)
        .map_err(|e| CliError::Io(format!("read {}: {e}", config_path.display())))?;
    let cfg: GridConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "config version {} unsupported (expected {CONFIG_VERSION})",
            cfg.version
        )));
    }
    if cfg.grid.fractions.len() != cfg.grid.steps.len() {
        return Err(CliError::Config(
            "grid.steps must parallel grid.fractions (a step budget per fraction)".into(),
        ));
    }
    let captions = load_manifest(&cfg.data.captions)?;
    let labels = load_manifest(&cfg.data.labels)?;
    let vqa = load_manifest(&cfg.data.vqa)?;
    let pairs = load_manifest(&cfg.data.pairs)?;
    let vocab = load_vocab(&cfg.data.vocab)?;
    let dir = resolve_out_dir(out, None, "grid");
    if let Some(d) = &dir {
        ensure_dir(d)?;
    }

    let mut cells = Vec::new();
    for &seed in &cfg.grid.seeds {
        for (&fraction, &steps) in cfg.grid.fractions.iter().zip(&cfg.grid.steps) {
            cells.push(GridCell { fraction, steps, seed });
        }
    }

    let workers = parallel.max(1);
    let mut rows: Vec<GridRow> = Vec::new();
    if workers == 1 {
        for cell in &cells {
            rows.extend(run_grid_cell(cell, &cfg, &captions, &labels, &vqa, &pairs, &vocab, dir.as_deref())?);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: std::sync::Mutex<Vec<(usize, Vec<GridRow>)>> = std::sync::Mutex::new(Vec::new());
        let err: std::sync::Mutex<Option<CliError>> = std::sync::Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    match run_grid_cell(
                        &cells[i], &cfg, &captions, &labels, &vqa, &pairs, &vocab,
                        dir.as_deref(),
                    ) {
                        Ok(r) => results.lock().unwrap().push((i, r)),
                        Err(e) => {
                            *err.lock().unwrap() = Some(e);
                            break;
                        }
                    }
                });
            }
        });
        if let Some(e) = err.into_inner().unwrap() {
            return Err(e);
        }
        let mut collected = results.into_inner().unwrap();
        collected.sort_by_key(|(i, _)| *i);
        rows = collected.into_iter().flat_map(|(_, r)| r).collect();
    }

    let mut table = String::from("fraction\ttask\tseed\taccuracy\tbest\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\n",
            r.fraction, r.task, r.seed, r.accuracy, r.best_accuracy
        ));
    }
    print!("{table}");
    if let Some(d) = &dir {
        std::fs::write(d.join("grid-results.tsv"), &table)
            .map_err(|e| CliError::Io(format!("write grid results: {e}")))?;
        println!("results written to {}", d.join("grid-results.tsv").display());
    }
    Ok(())
}
