//! End-to-end gradient verification: every differentiable op, a fusion
//! transformer layer, the full pretraining loss, and both finetune heads,
//! all against central finite differences.
//!
//! Large tensors are probed on a fixed random subset of coordinates, and
//! init-scale weights are conditioned (scaled up) where true gradients
//! would otherwise sit below the f64 cancellation noise of the difference
//! quotient.

use rand::Rng;

use vl_core::encoder::{patchify, tokenize, Image, VLConfig, VLModel, Vocabulary};
use vl_core::finetune::{
    classify_pair_batch, classify_single_batch, finetune_loss, init_classifier_head, TaskMode,
    TaskSpec,
};
use vl_core::gradcheck::{grad_check, grad_check_sampled};
use vl_core::nn::{self, ForwardCtx, KeyMask};
use vl_core::objectives::{mask_cc, pretrain_loss, ItmLabel, PretrainInstance};
use vl_core::tensor::Tensor;
use vl_core::SeededRng;

use crate::error::Result;
use crate::runs::build_pretrain_model;

pub struct GradReport {
    pub items: Vec<(String, f64)>,
    pub max_rel: f64,
}

impl GradReport {
    fn push(&mut self, name: &str, rel: f64) {
        self.items.push((name.to_string(), rel));
        self.max_rel = self.max_rel.max(rel);
    }
}

fn random_tensor(factory: &SeededRng, label: &str, shape: Vec<usize>, scale: f64) -> Tensor {
    let mut rng = factory.stream(label);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| (rng.random::<f64>() - 0.5) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

fn toy_image(factory: &SeededRng, label: &str, cfg: &VLConfig) -> Image {
    let mut rng = factory.stream(label);
    let n = cfg.image_h * cfg.image_w * cfg.image_channels;
    Image::new(
        cfg.image_h,
        cfg.image_w,
        cfg.image_channels,
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

/// Runs the whole verification suite on the given (usually default)
/// configuration. `coords_per_tensor` bounds the sampled coordinates for
/// the end-to-end checks.
pub fn run_gradcheck(config: &VLConfig, seed: u64, coords_per_tensor: usize) -> Result<GradReport> {
    let factory = SeededRng::new(seed);
    let mut report = GradReport { items: Vec::new(), max_rel: 0.0 };
    let eps = 1e-5;

    // ---- individual ops ----
    let x = random_tensor(&factory, "op:x", vec![3, 4], 2.0);
    let w = random_tensor(&factory, "op:w", vec![4, 5], 2.0);
    report.push(
        "op.matmul",
        grad_check(
            |tape, v| {
                let wv = tape.constant(w.clone());
                let y = tape.matmul(v, wv)?;
                tape.sum_all(y)
            },
            &x,
            eps,
        )?,
    );
    report.push(
        "op.softmax",
        grad_check(
            |tape, v| {
                let s = tape.softmax(v, 1)?;
                let probe = tape.constant(random_tensor(&factory, "op:softmax-probe", vec![3, 4], 1.0));
                let weighted = tape.mul(s, probe)?;
                tape.sum_all(weighted)
            },
            &x,
            eps,
        )?,
    );
    report.push(
        "op.layer_norm",
        grad_check(
            |tape, v| {
                let g = tape.constant(random_tensor(&factory, "op:ln-g", vec![4], 2.0));
                let b = tape.constant(random_tensor(&factory, "op:ln-b", vec![4], 1.0));
                let y = tape.layer_norm(v, g, b, 1e-5)?;
                let probe = tape.constant(random_tensor(&factory, "op:ln-probe", vec![3, 4], 1.0));
                let weighted = tape.mul(y, probe)?;
                tape.sum_all(weighted)
            },
            &x,
            eps,
        )?,
    );
    report.push(
        "op.gelu",
        grad_check(
            |tape, v| {
                let y = tape.gelu(v)?;
                tape.sum_all(y)
            },
            &x,
            eps,
        )?,
    );
    report.push(
        "op.add_broadcast",
        grad_check(
            |tape, v| {
                let b = tape.constant(random_tensor(&factory, "op:add-b", vec![4], 1.0));
                let y = tape.add(v, b)?;
                tape.sum_all(y)
            },
            &x,
            eps,
        )?,
    );
    report.push(
        "op.mul",
        grad_check(
            |tape, v| {
                let y = tape.mul(v, v)?;
                tape.sum_all(y)
            },
            &x,
            eps,
        )?,
    );
    report.push(
        "op.dropout",
        grad_check(
            |tape, v| {
                // the mask is a deterministic function of the stream
                let mut rng = factory.stream("op:dropout");
                let y = tape.dropout(v, 0.3, &mut rng, true)?;
                tape.sum_all(y)
            },
            &x,
            eps,
        )?,
    );
    let table = random_tensor(&factory, "op:table", vec![6, 3], 2.0);
    report.push(
        "op.embedding_gather",
        grad_check(
            |tape, v| {
                let y = tape.embedding_gather(v, &[0, 2, 5, 2], &[4])?;
                let probe = tape.constant(random_tensor(&factory, "op:gather-probe", vec![4, 3], 1.0));
                let weighted = tape.mul(y, probe)?;
                tape.sum_all(weighted)
            },
            &table,
            eps,
        )?,
    );
    let q = random_tensor(&factory, "op:q", vec![1, 3, 6], 1.5);
    let kv = random_tensor(&factory, "op:kv", vec![1, 4, 6], 1.5);
    report.push(
        "op.attention",
        grad_check(
            |tape, v| {
                let k = tape.constant(kv.clone());
                let val = tape.constant(random_tensor(&factory, "op:v", vec![1, 4, 6], 1.5));
                let mask = KeyMask::new(1, 4, vec![true, true, false, true]).unwrap();
                let mixed = nn::attention_core(tape, v, k, val, &mask, 2)?;
                let probe = tape.constant(random_tensor(&factory, "op:att-probe", vec![1, 3, 6], 1.0));
                let weighted = tape.mul(mixed, probe)?;
                tape.sum_all(weighted)
            },
            &q,
            eps,
        )?,
    );
    let logits = random_tensor(&factory, "op:logits", vec![3, 5], 3.0);
    report.push(
        "op.cross_entropy",
        grad_check(|tape, v| tape.cross_entropy_from_logits(v, &[1, 4, 0]), &logits, eps)?,
    );
    let z = random_tensor(&factory, "op:z", vec![4], 3.0);
    report.push(
        "op.bce_with_logits",
        grad_check(|tape, v| tape.bce_with_logits(v, &[1.0, 0.0, 1.0, 1.0]), &z, eps)?,
    );

    // ---- one fusion transformer layer, all parameters ----
    {
        let width = 8;
        let mut store = nn::ParamStore::new();
        nn::init_transformer_layer(&mut store, &factory, "layer", width, width * 2, true);
        let x = random_tensor(&factory, "layer:x", vec![1, 3, width], 1.0);
        let src = random_tensor(&factory, "layer:src", vec![1, 2, width], 1.0);
        let mut worst = 0.0f64;
        let paths: Vec<String> = store.paths().cloned().collect();
        for path in paths {
            let store = store.clone();
            let probe = store.get(&path).tensor.clone();
            let key = path.clone();
            let (x, src) = (x.clone(), src.clone());
            let rel = grad_check(
                move |tape, v| {
                    let mut bound = store.bind(tape);
                    bound.insert_override(&key, v);
                    let xv = tape.constant(x.clone());
                    let sv = tape.constant(src.clone());
                    let self_mask = KeyMask::all_visible(1, 3);
                    let cross_mask = KeyMask::all_visible(1, 2);
                    let mut ctx = ForwardCtx::eval();
                    let y = nn::transformer_layer(
                        tape,
                        &bound,
                        "layer",
                        xv,
                        &self_mask,
                        Some((sv, &cross_mask)),
                        true,
                        2,
                        &mut ctx,
                    )?;
                    tape.sum_all(y)
                },
                &probe,
                eps,
            )?;
            worst = worst.max(rel);
        }
        report.push("fusion_layer.all_params", worst);
    }

    // ---- full pretraining loss over every parameter tensor (sampled) ----
    {
        let vocab = Vocabulary::from_texts([
            "a red square and a blue circle there is in the image green triangle",
        ]);
        let model = build_pretrain_model(config.clone(), vocab, seed)?;
        let caption = "a red square and a blue circle";
        let seq = tokenize(caption, &model.vocab, model.config.max_text_len);
        let mut rng = factory.stream("e2e:mask");
        let (tokens, plan) = mask_cc(&seq, &mut rng, 0.15)?;
        let patches = patchify(&toy_image(&factory, "e2e:img", config), config.patch_size)?;
        let batch = vec![PretrainInstance {
            tokens,
            plan,
            patches,
            itm_label: ItmLabel::Match,
            image_id: "gc".into(),
        }];
        let mut worst: (String, f64) = (String::new(), 0.0);
        let paths: Vec<String> = model.params.paths().cloned().collect();
        for path in paths {
            let probe = model.params.get(&path).tensor.clone();
            let model = model.clone();
            let batch = batch.clone();
            let key = path.clone();
            let mut coord_rng = factory.stream(&format!("e2e:coords:{path}"));
            let rel = grad_check_sampled(
                move |tape, v| {
                    let mut bound = model.params.bind(tape);
                    bound.insert_override(&key, v);
                    let mut ctx = ForwardCtx::eval();
                    let texts: Vec<_> = batch.iter().map(|b| b.tokens.clone()).collect();
                    let images: Vec<_> = batch.iter().map(|b| b.patches.clone()).collect();
                    let out = model.forward(tape, &bound, &texts, &images, &mut ctx)?;
                    let (loss, _, _) = pretrain_loss(tape, &out, &batch, &bound, true)?;
                    Ok(loss)
                },
                &probe,
                eps,
                coords_per_tensor,
                &mut coord_rng,
            )?;
            if rel > worst.1 {
                worst = (path, rel);
            }
        }
        report.push(&format!("pretrain_loss.all_params (worst: {})", worst.0), worst.1);
    }

    // ---- both finetune heads through the encoder (sampled) ----
    {
        let vocab = Vocabulary::from_texts([
            "what color is the square how many circles are there left right image contains",
        ]);
        let mut model = VLModel::new(config.clone(), vocab, seed)?;
        let single = TaskSpec {
            name: "vqa-check".into(),
            classes: (0..5).map(|i| format!("c{i}")).collect(),
            mode: TaskMode::SingleImage,
        };
        init_classifier_head(&mut model.params, &factory, model.config.d, &single)?;
        let text = tokenize("what color is the square", &model.vocab, model.config.max_text_len);
        let img = patchify(&toy_image(&factory, "head:img", config), config.patch_size)?;
        let mut worst = 0.0f64;
        for path in ["head.cls.fc1.w", "head.cls.fc1.b", "head.cls.fc2.w", "head.cls.fc2.b"] {
            let probe = model.params.get(path).tensor.clone();
            let model = model.clone();
            let single = single.clone();
            let (text, img) = (text.clone(), img.clone());
            let mut coord_rng = factory.stream(&format!("head:coords:{path}"));
            let rel = grad_check_sampled(
                move |tape, v| {
                    let mut bound = model.params.bind(tape);
                    bound.insert_override(path, v);
                    let mut ctx = ForwardCtx::eval();
                    let logits = classify_single_batch(
                        &model,
                        &single,
                        tape,
                        &bound,
                        std::slice::from_ref(&text),
                        std::slice::from_ref(&img),
                        &mut ctx,
                    )?;
                    finetune_loss(tape, logits, &[2])
                },
                &probe,
                eps,
                coords_per_tensor,
                &mut coord_rng,
            )?;
            worst = worst.max(rel);
        }
        report.push("finetune_head.single_image", worst);

        let mut model = VLModel::new(model.config.clone(), model.vocab.clone(), seed + 1)?;
        let pair = TaskSpec {
            name: "pair-check".into(),
            classes: vec!["false".into(), "true".into()],
            mode: TaskMode::ImagePair,
        };
        init_classifier_head(&mut model.params, &factory, model.config.d, &pair)?;
        let text = tokenize("the left image contains a square", &model.vocab, model.config.max_text_len);
        let left = patchify(&toy_image(&factory, "head:left", config), config.patch_size)?;
        let right = patchify(&toy_image(&factory, "head:right", config), config.patch_size)?;
        let mut worst = 0.0f64;
        for path in ["head.cls.fc1.w", "head.cls.fc2.w", "fusion.txt.layer0.cross.q.w"] {
            let probe = model.params.get(path).tensor.clone();
            let model = model.clone();
            let pair = pair.clone();
            let (text, left, right) = (text.clone(), left.clone(), right.clone());
            let mut coord_rng = factory.stream(&format!("pair:coords:{path}"));
            let rel = grad_check_sampled(
                move |tape, v| {
                    let mut bound = model.params.bind(tape);
                    bound.insert_override(path, v);
                    let mut ctx = ForwardCtx::eval();
                    let logits = classify_pair_batch(
                        &model,
                        &pair,
                        tape,
                        &bound,
                        std::slice::from_ref(&text),
                        std::slice::from_ref(&left),
                        std::slice::from_ref(&right),
                        &mut ctx,
                    )?;
                    finetune_loss(tape, logits, &[1])
                },
                &probe,
                eps,
                coords_per_tensor,
                &mut coord_rng,
            )?;
            worst = worst.max(rel);
        }
        report.push("finetune_head.image_pair", worst);
    }

    Ok(report)
}
