//! Manual probes for training dynamics at desk scale. The heavy ones are
//! ignored by default and used to calibrate the run configurations:
//!   cargo test -p vl-train --test learnability -- --ignored --nocapture

use vl_core::encoder::{VLConfig, Vocabulary};
use vl_core::SeededRng;
use vl_train::corpus::PretrainCorpus;
use vl_train::groups::LrTable;
use vl_train::runs::{build_pretrain_model, pretrain_run, RunOptions};
use vl_data::synthetic::{generate_shape_world, ShapeWorldConfig, SplitSizes};

fn world(seed: u64, n_captions: usize) -> vl_data::synthetic::ShapeWorld {
    generate_shape_world(&ShapeWorldConfig {
        grid: 2,
        cell: 16,
        captions: SplitSizes { train: n_captions, validation: 300, test: 0 },
        labels: SplitSizes { train: 2_000, validation: 0, test: 0 },
        vqa: SplitSizes { train: 2_000, validation: 0, test: 500 },
        pairs: SplitSizes { train: 1_500, validation: 0, test: 500 },
        seed,
        ..ShapeWorldConfig::default()
    })
    .unwrap()
}

#[test]
#[ignore]
fn pretraining_loss_trajectory() {
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
    let w = world(1, 10_000);
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    println!("vocab size {}, ln V = {:.3}", vocab.len(), (vocab.len() as f64).ln());
    let model = build_pretrain_model(VLConfig::default(), vocab, 11).unwrap();
    let corpus = PretrainCorpus::new(&w.captions, "cc", 8).unwrap();
    let opts = RunOptions {
        lr_table: LrTable::Pretrain { pretrained: lr / 5.0, fresh: lr },
        seed: 11,
        eval_every: 100,
        ..RunOptions::default()
    };
    let start = std::time::Instant::now();
    let out = pretrain_run(model, &corpus, steps, &opts, None, None).unwrap();
    for row in out.metrics.iter().filter(|r| r.split == "validation") {
        println!(
            "step {:4} val: mlm {:.3} itm {:.3}",
            row.step,
            row.loss_mlm.unwrap(),
            row.loss_itm.unwrap()
        );
    }
    let train_rows: Vec<_> = out.metrics.iter().filter(|r| r.split == "train").collect();
    let window = 50.min(train_rows.len());
    let early: f64 = train_rows[..window].iter().map(|r| r.loss_total).sum::<f64>() / window as f64;
    let late: f64 = train_rows[train_rows.len() - window..]
        .iter()
        .map(|r| r.loss_total)
        .sum::<f64>()
        / window as f64;
    println!(
        "train loss: first-{window} avg {early:.3}, last-{window} avg {late:.3}, wall {:.0}s",
        start.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn itm_overfit_tiny_corpus() {
    // 64 pairs, long training: if ITM cannot even overfit this, the
    // objective wiring is broken rather than underpowered
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-3);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let w = world(2, 64);
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    let model = build_pretrain_model(VLConfig::default(), vocab, 21).unwrap();
    let corpus = PretrainCorpus::new(&w.captions, "cc", 8).unwrap();
    let opts = RunOptions {
        lr_table: LrTable::Pretrain { pretrained: lr / 5.0, fresh: lr },
        seed: 21,
        eval_every: 0,
        batch_size: 16,
        ..RunOptions::default()
    };
    let out = pretrain_run(model, &corpus, steps, &opts, None, None).unwrap();
    for chunk in out.metrics.chunks(40) {
        let itm: f64 =
            chunk.iter().filter_map(|r| r.loss_itm).sum::<f64>() / chunk.len() as f64;
        let mlm: f64 =
            chunk.iter().filter_map(|r| r.loss_mlm).sum::<f64>() / chunk.len() as f64;
        println!("steps {:4}..: train mlm {mlm:.3} itm {itm:.3}", chunk[0].step);
    }
}

#[test]
#[ignore]
fn itm_alone_overfit() {
    use vl_core::nn::ForwardCtx;
    use vl_core::objectives::itm_loss;
    use vl_core::tape::Tape;
    use vl_train::corpus::build_pretrain_batch;
    use vl_train::groups::make_param_groups;
    use vl_train::optim::AdamW;
    use vl_train::schedule::{lr_at, Schedule};

    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(3e-3);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(800);
    let bsz: usize = std::env::var("BS").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
    let npairs: usize = std::env::var("N").ok().and_then(|v| v.parse().ok()).unwrap_or(64);
    let w = world(2, npairs);
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    let mut model = build_pretrain_model(VLConfig::default(), vocab, 21).unwrap();
    let corpus = PretrainCorpus::new(&w.captions, "cc", 8).unwrap();
    let factory = SeededRng::new(21);
    let groups = make_param_groups(
        &model.params,
        &LrTable::Pretrain { pretrained: lr / 5.0, fresh: lr },
    )
    .unwrap();
    let mut opt = AdamW::new(&model.params, Default::default());
    let schedule = Schedule::new(steps, 0.1).unwrap();
    let spe = npairs.div_ceil(bsz);
    let mut recent = Vec::new();
    for step in 0..steps {
        let epoch = (step / spe) as u64;
        let lo = (step % spe) * bsz;
        let hi = (lo + bsz).min(npairs);
        let idx: Vec<usize> = (lo..hi).collect();
        let batch = build_pretrain_batch(&corpus, &idx, &model.vocab, 24, epoch, step as u64, &factory, 0.5).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let texts: Vec<_> = batch.iter().map(|b| b.tokens.clone()).collect();
        let images: Vec<_> = batch.iter().map(|b| b.patches.clone()).collect();
        let out = model.forward(&mut tape, &bound, &texts, &images, &mut ctx).unwrap();
        let labels: Vec<_> = batch.iter().map(|b| b.itm_label).collect();
        let loss = itm_loss(&mut tape, &out, &labels, &bound).unwrap();
        let total = tape.value(loss).item();
        tape.backward(loss).unwrap();
        model.params.zero_grads();
        model.params.accumulate_grads(&tape, &bound);
        drop(tape);
        let lrs: Vec<f64> = groups.iter().map(|g| lr_at(step, &schedule, g.peak_lr)).collect();
        opt.apply(&mut model.params, &groups, &lrs).unwrap();
        recent.push(total);
        if (step + 1) % 100 == 0 {
            let avg: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
            println!("step {:4}: itm {avg:.3}", step + 1);
            recent.clear();
        }
    }
}

#[test]
#[ignore]
fn diagnose_cls_variation() {
    use vl_core::nn::ForwardCtx;
    use vl_core::tape::Tape;
    use vl_train::corpus::build_pretrain_batch;

    let w = world(2, 64);
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    let model = build_pretrain_model(VLConfig::default(), vocab, 21).unwrap();
    let corpus = PretrainCorpus::new(&w.captions, "cc", 8).unwrap();
    let factory = SeededRng::new(21);
    let idx: Vec<usize> = (0..16).collect();
    let batch = build_pretrain_batch(&corpus, &idx, &model.vocab, 24, 0, 0, &factory, 0.5).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ctx = ForwardCtx::eval();
    let texts: Vec<_> = batch.iter().map(|b| b.tokens.clone()).collect();
    let images: Vec<_> = batch.iter().map(|b| b.patches.clone()).collect();
    let out = model.forward(&mut tape, &bound, &texts, &images, &mut ctx).unwrap();
    let d = model.config.d;
    for (name, var) in [("h_img0", out.h_img), ("h_txt0", out.h_txt)] {
        let cls = tape.select_pos(var, 0).unwrap();
        let data = &tape.value(cls).data;
        // mean per-dim std across the batch
        let mut total_std = 0.0;
        for c in 0..d {
            let col: Vec<f64> = (0..16).map(|b| data[b * d + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 16.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            total_std += var.sqrt();
        }
        let mut norm = 0.0;
        for v in &data[..d] {
            norm += v * v;
        }
        println!("{name}: mean per-dim std {:.4}, row norm {:.3}", total_std / d as f64, norm.sqrt());
    }
    let logit = {
        let labels: Vec<_> = batch.iter().map(|b| b.itm_label).collect();
        let _ = labels;
        let img = tape.select_pos(out.h_img, 0).unwrap();
        let txt = tape.select_pos(out.h_txt, 0).unwrap();
        let pair = tape.concat_cols(&[img, txt]).unwrap();
        let l = vl_core::nn::linear(&mut tape, &bound, "head.itm", pair).unwrap();
        tape.value(l).data.clone()
    };
    let mean: f64 = logit.iter().sum::<f64>() / logit.len() as f64;
    let std: f64 =
        (logit.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / logit.len() as f64).sqrt();
    println!("itm logits: mean {mean:.4} std {std:.6}");
    // how much do matched vs mismatched differ at the image CLS input?
    let img_cls = tape.select_pos(out.h_img, 0).unwrap();
    let data = tape.value(img_cls).data.clone();
    let mut pairwise = 0.0;
    let mut count = 0.0;
    for a in 0..16 {
        for b in (a + 1)..16 {
            let d2: f64 = (0..d).map(|c| (data[a * d + c] - data[b * d + c]).powi(2)).sum();
            pairwise += d2.sqrt();
            count += 1.0;
        }
    }
    println!("mean pairwise distance of h_img0 rows: {:.4}", pairwise / count);
}

#[test]
#[ignore]
fn image_only_prediction_probe() {
    // single-object scenes, single-label scheme: the text is [CLS, MASK],
    // so the only route to the target is through the image
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(600);
    let w = generate_shape_world(&ShapeWorldConfig {
        grid: 2,
        cell: 16,
        min_objects: 1,
        max_objects: 1,
        labels: SplitSizes { train: 2_000, validation: 300, test: 0 },
        captions: SplitSizes { train: 10, validation: 0, test: 0 },
        vqa: SplitSizes { train: 10, validation: 0, test: 10 },
        pairs: SplitSizes { train: 10, validation: 0, test: 10 },
        seed: 5,
        ..ShapeWorldConfig::default()
    })
    .unwrap();
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    println!("classes: shapes, ln 3 = {:.3}", 3f64.ln());
    let model = build_pretrain_model(VLConfig::default(), vocab, 31).unwrap();
    let corpus = PretrainCorpus::new(&w.labels, "imagenet", 8).unwrap();
    let opts = RunOptions {
        lr_table: LrTable::Pretrain { pretrained: lr / 5.0, fresh: lr },
        seed: 31,
        eval_every: 100,
        ..RunOptions::default()
    };
    let out = pretrain_run(model, &corpus, steps, &opts, None, None).unwrap();
    for row in out.metrics.iter().filter(|r| r.split == "validation") {
        println!(
            "step {:4} val: mlm {:.3} itm {:.3}",
            row.step,
            row.loss_mlm.unwrap(),
            row.loss_itm.unwrap()
        );
    }
    let train_rows: Vec<_> = out.metrics.iter().filter(|r| r.split == "train").collect();
    for chunk in train_rows.chunks(100) {
        let mlm: f64 = chunk.iter().filter_map(|r| r.loss_mlm).sum::<f64>() / chunk.len() as f64;
        let itm: f64 = chunk.iter().filter_map(|r| r.loss_itm).sum::<f64>() / chunk.len() as f64;
        println!("train {:4}..: mlm {mlm:.3} itm {itm:.3}", chunk[0].step);
    }
}

#[test]
#[ignore]
fn transfer_probe() {
    use vl_data::manifest::Split;
    use vl_train::runs::{finetune_run, unimodal_proxy_pretrain, InitMode, ProxyOptions};

    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1200);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    let head_lr: f64 = std::env::var("HEAD_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(5e-3);
    let cross_lr: f64 = std::env::var("CROSS_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(5e-4);
    let enc_lr: f64 = std::env::var("ENC_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4);
    let seed: u64 = std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(11);

    let w = world(1, 10_000);
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    let cfg = VLConfig::default();

    // bimodal pretraining
    let t0 = std::time::Instant::now();
    let model = build_pretrain_model(cfg.clone(), vocab.clone(), seed).unwrap();
    let corpus = PretrainCorpus::new(&w.captions, "cc", cfg.patch_size).unwrap();
    let opts = RunOptions {
        lr_table: LrTable::Pretrain { pretrained: lr / 5.0, fresh: lr },
        seed,
        eval_every: 400,
        ..RunOptions::default()
    };
    let pre = pretrain_run(model, &corpus, steps, &opts, None, None).unwrap();
    let last_val = pre.metrics.iter().rev().find(|r| r.split == "validation").unwrap();
    println!(
        "pretrain {:.0}s: val mlm {:.3} itm {:.3}",
        t0.elapsed().as_secs_f64(),
        last_val.loss_mlm.unwrap(),
        last_val.loss_itm.unwrap()
    );

    let ft_opts = |seed| RunOptions {
        lr_table: LrTable::Finetune { encoders: enc_lr, cross_modal: cross_lr, head: head_lr },
        seed,
        eval_every: 0,
        ..RunOptions::default()
    };

    // pair task: random vs bimodal
    let t0 = std::time::Instant::now();
    let rand_pair = finetune_run(
        &cfg, &vocab, "nlvr2", &w.pairs, InitMode::Random, epochs, &ft_opts(seed), Split::Test, None,
    )
    .unwrap();
    println!(
        "pair from random: final {:.3} best {:.3} ({:.0}s)",
        rand_pair.final_accuracy,
        rand_pair.best_accuracy,
        t0.elapsed().as_secs_f64()
    );
    let t0 = std::time::Instant::now();
    let bi_pair = finetune_run(
        &cfg, &vocab, "nlvr2", &w.pairs,
        InitMode::FromCheckpoint(&pre.checkpoint),
        epochs, &ft_opts(seed), Split::Test, None,
    )
    .unwrap();
    println!(
        "pair from bimodal: final {:.3} best {:.3} ({:.0}s)",
        bi_pair.final_accuracy,
        bi_pair.best_accuracy,
        t0.elapsed().as_secs_f64()
    );

    // vqa: unimodal-proxy vs bimodal
    let proxy_opts = ProxyOptions { seed, ..ProxyOptions::default() };
    let t0 = std::time::Instant::now();
    let mut proxy_model_probe = vl_core::encoder::VLModel::new(cfg.clone(), vocab.clone(), seed).unwrap();
    unimodal_proxy_pretrain(&mut proxy_model_probe, &w.captions, &w.labels, &proxy_opts).unwrap();
    println!("proxy phases: {:.0}s", t0.elapsed().as_secs_f64());
    let t0 = std::time::Instant::now();
    let uni_vqa = finetune_run(
        &cfg, &vocab, "vqav2", &w.vqa,
        InitMode::UnimodalProxy { captions: &w.captions, labels: &w.labels, opts: proxy_opts.clone() },
        epochs, &ft_opts(seed), Split::Test, None,
    )
    .unwrap();
    println!(
        "vqa from unimodal: final {:.3} best {:.3} ({:.0}s)",
        uni_vqa.final_accuracy,
        uni_vqa.best_accuracy,
        t0.elapsed().as_secs_f64()
    );
    let t0 = std::time::Instant::now();
    let bi_vqa = finetune_run(
        &cfg, &vocab, "vqav2", &w.vqa,
        InitMode::FromCheckpoint(&pre.checkpoint),
        epochs, &ft_opts(seed), Split::Test, None,
    )
    .unwrap();
    println!(
        "vqa from bimodal: final {:.3} best {:.3} ({:.0}s)",
        bi_vqa.final_accuracy,
        bi_vqa.best_accuracy,
        t0.elapsed().as_secs_f64()
    );
    let pair_gap = bi_pair.final_accuracy - rand_pair.final_accuracy;
    let vqa_gap = bi_vqa.final_accuracy - uni_vqa.final_accuracy;
    println!("pair gap {pair_gap:.3}, vqa gap {vqa_gap:.3}");
}

#[test]
#[ignore]
fn vqa_arms_probe() {
    use vl_data::manifest::Split;
    use vl_train::runs::{finetune_run, InitMode, ProxyOptions};

    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1200);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let head_lr: f64 = std::env::var("HEAD_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(5e-3);
    let cross_lr: f64 = std::env::var("CROSS_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let enc_lr: f64 = std::env::var("ENC_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(3e-4);
    let seed: u64 = std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(11);

    let w = world(1, 10_000);
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    let cfg = VLConfig::default();
    let cache = std::path::PathBuf::from(format!("/tmp/probe-ckpt-{steps}-{seed}.vlck"));
    let pre_ckpt = if cache.exists() {
        vl_train::checkpoint::load_checkpoint(&cache).unwrap()
    } else {
        let model = build_pretrain_model(cfg.clone(), vocab.clone(), seed).unwrap();
        let corpus = PretrainCorpus::new(&w.captions, "cc", cfg.patch_size).unwrap();
        let opts = RunOptions {
            lr_table: LrTable::Pretrain { pretrained: lr / 5.0, fresh: lr },
            seed,
            eval_every: 0,
            ..RunOptions::default()
        };
        let pre = pretrain_run(model, &corpus, steps, &opts, None, None).unwrap();
        vl_train::checkpoint::save_checkpoint(&pre.checkpoint, &cache).unwrap();
        pre.checkpoint
    };
    let ft_opts = RunOptions {
        lr_table: LrTable::Finetune { encoders: enc_lr, cross_modal: cross_lr, head: head_lr },
        seed,
        eval_every: 0,
        ..RunOptions::default()
    };
    let proxy_opts = ProxyOptions { seed, ..ProxyOptions::default() };
    let uni = if std::env::var("SKIP_UNI").is_ok() {
        None
    } else {
        Some(finetune_run(
            &cfg, &vocab, "vqav2", &w.vqa,
            InitMode::UnimodalProxy { captions: &w.captions, labels: &w.labels, opts: proxy_opts },
            epochs, &ft_opts, Split::Test, None,
        )
        .unwrap())
    };
    let bi = finetune_run(
        &cfg, &vocab, "vqav2", &w.vqa,
        InitMode::FromCheckpoint(&pre_ckpt),
        epochs, &ft_opts, Split::Test, None,
    )
    .unwrap();
    let uni_acc = uni.map(|u| u.final_accuracy).unwrap_or(f64::NAN);
    println!(
        "epochs {epochs} enc {enc_lr} cross {cross_lr} head {head_lr}: vqa unimodal {:.3} bimodal {:.3} gap {:+.3}",
        uni_acc,
        bi.final_accuracy,
        bi.final_accuracy - uni_acc
    );
}

#[test]
#[ignore]
fn fraction_and_ccil_probe() {
    use vl_data::manifest::Split;
    use vl_data::subset::{restrict_labels, subset_strategy, SubsetSpec};
    use vl_train::runs::{finetune_run, InitMode};

    let seed: u64 = std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(11);
    let w = world(1, 10_000);
    let vocab = Vocabulary::from_texts(w.all_texts().iter().map(String::as_str));
    let cfg = VLConfig::default();

    let ft_opts = RunOptions {
        lr_table: LrTable::Finetune { encoders: 1e-4, cross_modal: 5e-4, head: 5e-3 },
        seed,
        eval_every: 0,
        ..RunOptions::default()
    };

    let pretrain_with = |manifest: &vl_data::Manifest, scheme: &str, steps: usize| {
        let model = build_pretrain_model(cfg.clone(), vocab.clone(), seed).unwrap();
        let corpus = PretrainCorpus::new(manifest, scheme, cfg.patch_size).unwrap();
        let opts = RunOptions {
            lr_table: LrTable::Pretrain { pretrained: 2e-4, fresh: 1e-3 },
            seed,
            eval_every: 0,
            ..RunOptions::default()
        };
        pretrain_run(model, &corpus, steps, &opts, None, None).unwrap().checkpoint
    };

    let pair_from = |ckpt: &vl_train::Checkpoint| {
        finetune_run(
            &cfg, &vocab, "nlvr2", &w.pairs,
            InitMode::FromCheckpoint(ckpt),
            4, &ft_opts, Split::Test, None,
        )
        .unwrap()
        .final_accuracy
    };

    if std::env::var("SKIP_FRACTION").is_err() {
        // fraction sweep: train-split subsets of the caption corpus
        let train: Vec<_> = w.captions.split(Split::Train).cloned().collect();
        let rest: Vec<_> = w.captions.records.iter().filter(|r| r.split != Split::Train).cloned().collect();
        let train_manifest = w.captions.with_records(train);
        for (pct, steps) in [(0.01, 300), (0.10, 600), (1.0, 1200)] {
            let sub = if pct < 1.0 {
                let s = subset_strategy("fraction").unwrap();
                let picked = s.select(&train_manifest, &SubsetSpec::with_p(pct, seed)).unwrap();
                let mut records = picked.records;
                records.extend(rest.iter().cloned());
                w.captions.with_records(records)
            } else {
                w.captions.clone()
            };
            let t0 = std::time::Instant::now();
            let ckpt = pretrain_with(&sub, "cc", steps);
            let acc = pair_from(&ckpt);
            println!(
                "fraction {:>4}%: {} steps -> pair {:.3} ({:.0}s)",
                pct * 100.0,
                steps,
                acc,
                t0.elapsed().as_secs_f64()
            );
        }
    }

    if std::env::var("SKIP_CCIL").is_err() {
        for max_n in [1usize, 3] {
            let (restricted, unique) = restrict_labels(&w.labels, max_n).unwrap();
            let t0 = std::time::Instant::now();
            let ckpt = pretrain_with(&restricted, "ccil", 1200);
            let acc = pair_from(&ckpt);
            println!(
                "ccil max_n {max_n} ({unique} unique labels): pair {:.3} ({:.0}s)",
                acc,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
