//! Training loops: bimodal pretraining, the unimodal proxy phases, and
//! downstream finetuning, with metrics, checkpointing, and resume.

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use vl_core::encoder::{TokenSequence, VLConfig, VLModel, Vocabulary};
use vl_core::finetune::{
    classify_pair_batch, classify_single_batch, evaluate, finetune_loss, init_classifier_head,
    FinetuneExample, TaskInputs, TaskMode,
};
use vl_core::nn::{self, ForwardCtx, ParamStore};
use vl_core::objectives::{init_itm_head, init_mlm_head, pretrain_loss};
use vl_core::tape::Tape;
use vl_core::{CoreError, SeededRng};
use vl_data::manifest::{Manifest, Split};

use crate::checkpoint::{checkpoint_of, provenance_for, Checkpoint};
use crate::corpus::{
    build_pretrain_batch, finetune_examples, task_from_manifest, trim_batch, PretrainCorpus,
};
use crate::error::{Result, TrainError};
use crate::groups::{make_param_groups, LrTable, ParamGroup, PRETRAIN_DEFAULT};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::optim::{AdamW, OptimHyper};
use crate::schedule::{lr_at, Schedule};

/// Knobs shared by the training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub lr_table: LrTable,
    pub hyper: OptimHyper,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub eval_every: usize,
    /// Cap on validation instances per evaluation.
    pub max_val_examples: usize,
    pub itm_mismatch_p: f64,
    pub mlm_on_mismatch: bool,
    /// Stop after this many validations without improvement; off by default.
    pub patience: Option<usize>,
    /// Interrupt the run after this absolute step (for checkpoint/resume);
    /// the schedule still spans the full configured step count.
    pub stop_after_steps: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            lr_table: PRETRAIN_DEFAULT,
            hyper: OptimHyper::default(),
            warmup_fraction: 0.10,
            batch_size: 32,
            seed: 0,
            eval_every: 100,
            max_val_examples: 256,
            itm_mismatch_p: 0.5,
            mlm_on_mismatch: true,
            patience: None,
            stop_after_steps: None,
        }
    }
}

/// Fresh encoder plus MLM and ITM heads, ready for pretraining.
pub fn build_pretrain_model(config: VLConfig, vocab: Vocabulary, seed: u64) -> Result<VLModel> {
    let mut model = VLModel::new(config, vocab, seed)?;
    let factory = SeededRng::new(seed);
    init_mlm_head(&mut model.params, &factory, model.config.d, model.vocab.len());
    init_itm_head(&mut model.params, &factory, model.config.d);
    Ok(model)
}

fn shuffled_indices(n: usize, epoch: u64, factory: &SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = factory.stream_indexed("shuffle", epoch);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Runs (or resumes) bimodal pretraining for `total_steps` optimizer steps.
/// Writes `metrics.csv`, `checkpoint-final.vlck` and `checkpoint-best.vlck`
/// into `out_dir` when given.
pub fn pretrain_run(
    mut model: VLModel,
    corpus: &PretrainCorpus,
    total_steps: usize,
    opts: &RunOptions,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    let schedule = Schedule::new(total_steps, opts.warmup_fraction)?;
    let groups = make_param_groups(&model.params, &opts.lr_table)?;
    let factory = SeededRng::new(opts.seed);
    let mut optimizer = match resume {
        Some(ckpt) => {
            model.params = ckpt.params.clone();
            ckpt.optimizer
                .clone()
                .ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?
        }
        None => AdamW::new(&model.params, opts.hyper),
    };
    let start_step = resume.map(|c| c.schedule_step).unwrap_or(0);
    let steps_per_epoch = corpus.len().div_ceil(opts.batch_size);
    let mut writer = MetricsWriter::new(out_dir.map(|d| d.join("metrics.csv")).as_deref())?;
    let started = Instant::now();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut evals_since_best = 0usize;
    let mut cached_epoch: Option<(u64, Vec<usize>)> = None;
    let mut completed = start_step;

    for step in start_step..total_steps {
        if opts.stop_after_steps.is_some_and(|stop| step >= stop) {
            break;
        }
        completed = step + 1;
        let epoch = (step / steps_per_epoch) as u64;
        let pos = step % steps_per_epoch;
        if cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            cached_epoch = Some((epoch, shuffled_indices(corpus.len(), epoch, &factory)));
        }
        let order = &cached_epoch.as_ref().unwrap().1;
        let lo = pos * opts.batch_size;
        let hi = (lo + opts.batch_size).min(corpus.len());
        let indices = &order[lo..hi];
        let batch = build_pretrain_batch(
            corpus,
            indices,
            &model.vocab,
            model.config.max_text_len,
            epoch,
            step as u64,
            &factory,
            opts.itm_mismatch_p,
        )?;
        let batch_id = format!("step {step} (first record {})", corpus.train[indices[0]].id);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::train(
            model.config.dropout,
            factory.stream_indexed("dropout", step as u64),
        );
        let texts: Vec<TokenSequence> = batch.iter().map(|b| b.tokens.clone()).collect();
        let images: Vec<_> = batch.iter().map(|b| b.patches.clone()).collect();
        let run_step = (|| -> Result<(f64, f64, f64)> {
            let out = model.forward(&mut tape, &bound, &texts, &images, &mut ctx)?;
            let (loss, mlm, itm) =
                pretrain_loss(&mut tape, &out, &batch, &bound, opts.mlm_on_mismatch)?;
            let total = tape.value(loss).item();
            tape.backward(loss)?;
            Ok((total, mlm, itm))
        })();
        let (total, mlm, itm) = run_step.map_err(|e| match e {
            TrainError::Core(CoreError::NonFinite { .. }) => {
                TrainError::NonFiniteLoss { batch_id: batch_id.clone() }
            }
            other => other,
        })?;
        model.params.zero_grads();
        model.params.accumulate_grads(&tape, &bound);
        drop(tape);

        let lrs: Vec<f64> = groups.iter().map(|g| lr_at(step, &schedule, g.peak_lr)).collect();
        optimizer.apply(&mut model.params, &groups, &lrs)?;

        writer.push(MetricsRow {
            step,
            split: "train",
            loss_mlm: Some(mlm),
            loss_itm: Some(itm),
            loss_total: total,
            accuracy: None,
            lrs: groups.iter().zip(&lrs).map(|(g, &lr)| (g.name.clone(), lr)).collect(),
            wall_secs: started.elapsed().as_secs_f64(),
        })?;

        let is_last = step + 1 == total_steps;
        if !corpus.validation.is_empty()
            && opts.eval_every > 0
            && ((step + 1) % opts.eval_every == 0 || is_last)
        {
            let (vmlm, vitm) = validation_loss(&model, corpus, opts, &factory)?;
            let vtotal = vmlm + vitm;
            writer.push(MetricsRow {
                step,
                split: "validation",
                loss_mlm: Some(vmlm),
                loss_itm: Some(vitm),
                loss_total: vtotal,
                accuracy: None,
                lrs: Vec::new(),
                wall_secs: started.elapsed().as_secs_f64(),
            })?;
            let improved = best.as_ref().map(|(b, _)| vtotal < *b).unwrap_or(true);
            if improved {
                best = Some((vtotal, snapshot(&model, &optimizer, opts.seed, step + 1, steps_per_epoch)));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if let Some(patience) = opts.patience {
                    if evals_since_best >= patience {
                        break;
                    }
                }
            }
        }
    }

    let final_ckpt = snapshot(&model, &optimizer, opts.seed, completed, steps_per_epoch);
    let best_ckpt = best.map(|(_, c)| c).unwrap_or_else(|| final_ckpt.clone());
    if let Some(dir) = out_dir {
        crate::checkpoint::save_checkpoint(&final_ckpt, &dir.join("checkpoint-final.vlck"))?;
        crate::checkpoint::save_checkpoint(&best_ckpt, &dir.join("checkpoint-best.vlck"))?;
    }
    Ok(PretrainOutcome {
        checkpoint: final_ckpt,
        best_checkpoint: best_ckpt,
        metrics: writer.finish()?,
    })
}

fn snapshot(
    model: &VLModel,
    optimizer: &AdamW,
    seed: u64,
    schedule_step: usize,
    steps_per_epoch: usize,
) -> Checkpoint {
    let mut ckpt = checkpoint_of(model, seed, None);
    ckpt.optimizer = Some(optimizer.clone());
    ckpt.schedule_step = schedule_step;
    ckpt.epoch = (schedule_step / steps_per_epoch.max(1)) as u64;
    ckpt.step_in_epoch = (schedule_step % steps_per_epoch.max(1)) as u64;
    ckpt
}

/// Deterministic validation loss: fixed masking streams, negatives drawn
/// per-record from a validation-only pool, evaluation mode.
fn validation_loss(
    model: &VLModel,
    corpus: &PretrainCorpus,
    opts: &RunOptions,
    factory: &SeededRng,
) -> Result<(f64, f64)> {
    let n = corpus.validation.len().min(opts.max_val_examples);
    let val_corpus = PretrainCorpus {
        train: corpus.validation[..n].to_vec(),
        validation: Vec::new(),
        scheme: corpus.scheme,
        patch_size: corpus.patch_size,
        train_image_ids: corpus.validation[..n]
            .iter()
            .map(|r| r.image.as_ref().map(vl_data::manifest::ImageRef::id).unwrap_or_default())
            .collect(),
    };
    let mut total_mlm = 0.0;
    let mut total_itm = 0.0;
    let mut batches = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(opts.batch_size) {
        let batch = build_pretrain_batch(
            &val_corpus,
            chunk,
            &model.vocab,
            model.config.max_text_len,
            u64::MAX, // epoch key reserved for validation
            u64::MAX,
            factory,
            opts.itm_mismatch_p,
        )?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let texts: Vec<TokenSequence> = batch.iter().map(|b| b.tokens.clone()).collect();
        let images: Vec<_> = batch.iter().map(|b| b.patches.clone()).collect();
        let out = model.forward(&mut tape, &bound, &texts, &images, &mut ctx)?;
        let (_, mlm, itm) = pretrain_loss(&mut tape, &out, &batch, &bound, opts.mlm_on_mismatch)?;
        total_mlm += mlm;
        total_itm += itm;
        batches += 1.0;
    }
    Ok((total_mlm / batches, total_itm / batches))
}

// ---- unimodal proxy -----------------------------------------------------

/// Options for the two unimodal proxy phases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub hyper: OptimHyper,
    pub seed: u64,
}

impl Default for ProxyOptions {
    fn default() -> Self {
        ProxyOptions {
            steps: 300,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_fraction: 0.10,
            hyper: OptimHyper::default(),
            seed: 0,
        }
    }
}

/// Pretrains the text encoder with text-only masked prediction and the
/// image encoder with patch classification over class labels, then marks
/// both encoders pretrained. Projections, fusion layers and heads stay
/// fresh.
pub fn unimodal_proxy_pretrain(
    model: &mut VLModel,
    captions: &Manifest,
    labels: &Manifest,
    opts: &ProxyOptions,
) -> Result<()> {
    let factory = SeededRng::new(opts.seed);
    let schedule = Schedule::new(opts.steps, opts.warmup_fraction)?;

    // ---- text phase: masked prediction from the unimodal text encoder ----
    let d_txt = model.config.d_txt;
    init_mlm_head_at(&mut model.params, &factory, "proxy.mlm", d_txt, model.vocab.len());
    let corpus = PretrainCorpus::new(captions, "cc", model.config.patch_size)?;
    let text_groups = vec![proxy_group(&model.params, &["text."], "text-encoder", opts.peak_lr), {
        proxy_group(&model.params, &["proxy.mlm"], "proxy-head", opts.peak_lr)
    }];
    let mut optimizer = AdamW::new(&model.params, opts.hyper);
    let steps_per_epoch = corpus.len().div_ceil(opts.batch_size);
    for step in 0..opts.steps {
        let epoch = (step / steps_per_epoch) as u64;
        let order = shuffled_indices(corpus.len(), epoch, &factory);
        let pos = step % steps_per_epoch;
        let lo = pos * opts.batch_size;
        let hi = (lo + opts.batch_size).min(corpus.len());
        let batch = build_pretrain_batch(
            &corpus,
            &order[lo..hi],
            &model.vocab,
            model.config.max_text_len,
            epoch,
            step as u64,
            &factory,
            0.0, // images withheld: no ITM, no negatives
        )?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let texts: Vec<TokenSequence> = batch.iter().map(|b| b.tokens.clone()).collect();
        let (h, _) = model.encode_text(&mut tape, &bound, &texts, &mut ctx)?;
        let mut idx = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (b, inst) in batch.iter().enumerate() {
            let k = inst.plan.positions.len().max(1);
            for (&p, &orig) in inst.plan.positions.iter().zip(inst.plan.original_ids.iter()) {
                idx.push((b, p));
                targets.push(orig);
                weights.push(1.0 / (batch.len() as f64 * k as f64));
            }
        }
        let rows = tape.gather_rows(h, &idx)?;
        let logits = nn::linear(&mut tape, &bound, "proxy.mlm", rows)?;
        let loss = tape.cross_entropy_weighted(logits, &targets, &weights)?;
        tape.backward(loss)?;
        model.params.zero_grads();
        model.params.accumulate_grads(&tape, &bound);
        drop(tape);
        let lrs: Vec<f64> = text_groups.iter().map(|g| lr_at(step, &schedule, g.peak_lr)).collect();
        optimizer.apply(&mut model.params, &text_groups, &lrs)?;
    }
    model.params.remove_prefix("proxy.");

    // ---- image phase: classify the class label from the image CLS ----
    let classes: Vec<String> = {
        let mut c: Vec<String> = labels
            .records
            .iter()
            .filter_map(|r| r.class_label.clone())
            .collect();
        c.sort();
        c.dedup();
        c
    };
    if classes.is_empty() {
        return Err(TrainError::Config("label corpus has no class labels for the proxy".into()));
    }
    nn::init_linear(
        &mut model.params,
        &factory,
        "proxy.imgcls",
        model.config.d_img,
        classes.len(),
    );
    let img_groups = vec![
        proxy_group(&model.params, &["image."], "image-encoder", opts.peak_lr),
        proxy_group(&model.params, &["proxy.imgcls"], "proxy-head", opts.peak_lr),
    ];
    let mut optimizer = AdamW::new(&model.params, opts.hyper);
    let records: Vec<_> = labels.split(Split::Train).cloned().collect();
    if records.is_empty() {
        return Err(TrainError::Config("label corpus has no train records".into()));
    }
    let steps_per_epoch = records.len().div_ceil(opts.batch_size);
    for step in 0..opts.steps {
        let epoch = (step / steps_per_epoch) as u64;
        let order = shuffled_indices(records.len(), epoch, &factory);
        let pos = step % steps_per_epoch;
        let lo = pos * opts.batch_size;
        let hi = (lo + opts.batch_size).min(records.len());
        let mut images = Vec::new();
        let mut gold = Vec::new();
        for &i in &order[lo..hi] {
            let r = &records[i];
            let image = vl_data::synthetic::render_ref(r.image.as_ref().unwrap())?;
            images.push(vl_core::encoder::patchify(&image, model.config.patch_size)?);
            let class = r.class_label.as_ref().unwrap();
            gold.push(classes.iter().position(|c| c == class).unwrap());
        }
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let (h, _) = model.encode_image(&mut tape, &bound, &images, &mut ctx)?;
        let cls = tape.select_pos(h, 0)?;
        let logits = nn::linear(&mut tape, &bound, "proxy.imgcls", cls)?;
        let loss = tape.cross_entropy_from_logits(logits, &gold)?;
        tape.backward(loss)?;
        model.params.zero_grads();
        model.params.accumulate_grads(&tape, &bound);
        drop(tape);
        let lrs: Vec<f64> = img_groups.iter().map(|g| lr_at(step, &schedule, g.peak_lr)).collect();
        optimizer.apply(&mut model.params, &img_groups, &lrs)?;
    }
    model.params.remove_prefix("proxy.");
    model.params.mark_pretrained("text.");
    model.params.mark_pretrained("image.");
    Ok(())
}

fn init_mlm_head_at(store: &mut ParamStore, factory: &SeededRng, path: &str, d: usize, v: usize) {
    nn::init_linear(store, factory, path, d, v);
}

fn proxy_group(store: &ParamStore, prefixes: &[&str], name: &str, lr: f64) -> ParamGroup {
    let paths: Vec<String> = store
        .paths()
        .filter(|p| prefixes.iter().any(|pre| p.starts_with(pre)))
        .cloned()
        .collect();
    ParamGroup {
        name: name.to_string(),
        kind: crate::groups::GroupKind::Fresh,
        peak_lr: lr,
        paths,
    }
}

// ---- finetuning -----------------------------------------------------------

/// How to initialize the encoder for a finetuning run.
pub enum InitMode<'a> {
    Random,
    UnimodalProxy { captions: &'a Manifest, labels: &'a Manifest, opts: ProxyOptions },
    FromCheckpoint(&'a Checkpoint),
}

pub struct FinetuneOutcome {
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Finetunes a classifier head (and the encoder, at per-group rates) on a
/// vqa or pair_reasoning manifest; reports accuracy on `eval_split`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_run(
    config: &VLConfig,
    vocab: &Vocabulary,
    task_name: &str,
    manifest: &Manifest,
    init: InitMode<'_>,
    epochs: usize,
    opts: &RunOptions,
    eval_split: Split,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let factory = SeededRng::new(opts.seed);
    let mut model = match init {
        InitMode::Random => VLModel::new(config.clone(), vocab.clone(), opts.seed)?,
        InitMode::UnimodalProxy { captions, labels, opts: proxy_opts } => {
            let mut m = VLModel::new(config.clone(), vocab.clone(), opts.seed)?;
            unimodal_proxy_pretrain(&mut m, captions, labels, &proxy_opts)?;
            m
        }
        InitMode::FromCheckpoint(ckpt) => {
            let mut m = VLModel::new(config.clone(), vocab.clone(), opts.seed)?;
            crate::checkpoint::adopt_encoder_weights(&mut m, ckpt)?;
            m
        }
    };
    let task = task_from_manifest(task_name, manifest)?;
    init_classifier_head(&mut model.params, &factory, model.config.d, &task)?;

    let groups = make_param_groups(&model.params, &opts.lr_table)?;
    let mut optimizer = AdamW::new(&model.params, opts.hyper);

    let train = finetune_examples(manifest, Split::Train, vocab, config.max_text_len, config.patch_size)?;
    if train.is_empty() {
        return Err(TrainError::Config("finetuning needs train records".into()));
    }
    let eval_set = finetune_examples(manifest, eval_split, vocab, config.max_text_len, config.patch_size)?;
    let steps_per_epoch = train.len().div_ceil(opts.batch_size);
    let total_steps = steps_per_epoch * epochs.max(1);
    let schedule = Schedule::new(total_steps, opts.warmup_fraction)?;
    let mut writer = MetricsWriter::new(out_dir.map(|d| d.join("metrics.csv")).as_deref())?;
    let started = Instant::now();
    let mut best: Option<(f64, Checkpoint)> = None;

    for step in 0..total_steps {
        let epoch = (step / steps_per_epoch) as u64;
        let order = shuffled_indices(train.len(), epoch, &factory);
        let pos = step % steps_per_epoch;
        let lo = pos * opts.batch_size;
        let hi = (lo + opts.batch_size).min(train.len());
        let chunk: Vec<&FinetuneExample> = order[lo..hi].iter().map(|&i| &train[i]).collect();

        let mut texts: Vec<TokenSequence> = chunk.iter().map(|e| e.text.clone()).collect();
        trim_batch(&mut texts);
        let gold: Vec<usize> = chunk.iter().map(|e| e.gold).collect();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::train(
            model.config.dropout,
            factory.stream_indexed("dropout", step as u64),
        );
        let batch_id = format!("finetune step {step}");
        let run_step = (|| -> Result<f64> {
            let logits = match task.mode {
                TaskMode::SingleImage => {
                    let images: Vec<_> = chunk
                        .iter()
                        .map(|e| match &e.inputs {
                            TaskInputs::Single(p) => p.clone(),
                            TaskInputs::Pair(..) => unreachable!("validated by task mode"),
                        })
                        .collect();
                    classify_single_batch(&model, &task, &mut tape, &bound, &texts, &images, &mut ctx)?
                }
                TaskMode::ImagePair => {
                    let mut lefts = Vec::new();
                    let mut rights = Vec::new();
                    for e in &chunk {
                        match &e.inputs {
                            TaskInputs::Pair(l, r) => {
                                lefts.push(l.clone());
                                rights.push(r.clone());
                            }
                            TaskInputs::Single(_) => unreachable!("validated by task mode"),
                        }
                    }
                    classify_pair_batch(
                        &model, &task, &mut tape, &bound, &texts, &lefts, &rights, &mut ctx,
                    )?
                }
            };
            let loss = finetune_loss(&mut tape, logits, &gold)?;
            let total = tape.value(loss).item();
            tape.backward(loss)?;
            Ok(total)
        })();
        let total = run_step.map_err(|e| match e {
            TrainError::Core(CoreError::NonFinite { .. }) => {
                TrainError::NonFiniteLoss { batch_id: batch_id.clone() }
            }
            other => other,
        })?;
        model.params.zero_grads();
        model.params.accumulate_grads(&tape, &bound);
        drop(tape);
        let lrs: Vec<f64> = groups.iter().map(|g| lr_at(step, &schedule, g.peak_lr)).collect();
        optimizer.apply(&mut model.params, &groups, &lrs)?;

        writer.push(MetricsRow {
            step,
            split: "train",
            loss_mlm: None,
            loss_itm: None,
            loss_total: total,
            accuracy: None,
            lrs: groups.iter().zip(&lrs).map(|(g, &lr)| (g.name.clone(), lr)).collect(),
            wall_secs: started.elapsed().as_secs_f64(),
        })?;

        // end of epoch: measure accuracy
        if pos + 1 == steps_per_epoch && !eval_set.is_empty() {
            let acc = evaluate(&model, &task, &eval_set, opts.batch_size)?;
            writer.push(MetricsRow {
                step,
                split: "eval",
                loss_mlm: None,
                loss_itm: None,
                loss_total: 0.0,
                accuracy: Some(acc),
                lrs: Vec::new(),
                wall_secs: started.elapsed().as_secs_f64(),
            })?;
            if best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true) {
                let mut ckpt = checkpoint_of(&model, opts.seed, Some(task.clone()));
                ckpt.optimizer = Some(optimizer.clone());
                ckpt.schedule_step = step + 1;
                best = Some((acc, ckpt));
            }
        }
    }

    let final_accuracy = if eval_set.is_empty() {
        0.0
    } else {
        evaluate(&model, &task, &eval_set, opts.batch_size)?
    };
    let mut final_ckpt = checkpoint_of(&model, opts.seed, Some(task.clone()));
    final_ckpt.optimizer = Some(optimizer);
    final_ckpt.schedule_step = total_steps;
    final_ckpt.provenance = provenance_for(&model.config, model.vocab.tokens());
    let (best_accuracy, best_ckpt) = best
        .map(|(a, c)| (a, c))
        .unwrap_or_else(|| (final_accuracy, final_ckpt.clone()));
    if let Some(dir) = out_dir {
        crate::checkpoint::save_checkpoint(&final_ckpt, &dir.join("checkpoint-final.vlck"))?;
        crate::checkpoint::save_checkpoint(&best_ckpt, &dir.join("checkpoint-best.vlck"))?;
    }
    Ok(FinetuneOutcome {
        final_accuracy,
        best_accuracy,
        checkpoint: final_ckpt,
        metrics: writer.finish()?,
    })
}

/// Accuracy of a task checkpoint on one split of a manifest.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, manifest: &Manifest, split: Split, batch: usize) -> Result<f64> {
    let task = ckpt
        .task
        .clone()
        .ok_or_else(|| TrainError::Config("checkpoint carries no task head".into()))?;
    let model = ckpt.to_model()?;
    let examples = finetune_examples(
        manifest,
        split,
        &model.vocab,
        model.config.max_text_len,
        model.config.patch_size,
    )?;
    if examples.is_empty() {
        return Err(TrainError::Config(format!("no records in split {split:?}")));
    }
    Ok(evaluate(&model, &task, &examples, batch)?)
}
