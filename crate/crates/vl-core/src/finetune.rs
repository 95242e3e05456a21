//! Downstream classification: the two-layer MLP head over concatenated CLS
//! representations, the single-image and image-pair setups, and accuracy
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::encoder::{PatchSequence, TokenSequence, VLModel, VLOutput};
use crate::error::{CoreError, Result};
use crate::nn::{self, Bound, ForwardCtx, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    SingleImage,
    ImagePair,
}

/// A downstream classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: Vec<String>,
    pub mode: TaskMode,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(CoreError::Config(format!("task {} has no classes", self.name)));
        }
        if self.mode == TaskMode::ImagePair && self.classes.len() != 2 {
            return Err(CoreError::Config(format!(
                "image-pair task {} must be binary, got {} classes",
                self.name,
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Width of the concatenated CLS features feeding the head.
    pub fn head_input_width(&self, d: usize) -> usize {
        match self.mode {
            TaskMode::SingleImage => 2 * d,
            TaskMode::ImagePair => 4 * d,
        }
    }
}

/// Two-layer MLP head with gelu; hidden width is twice the input width.
pub fn init_classifier_head(
    store: &mut ParamStore,
    factory: &SeededRng,
    d: usize,
    task: &TaskSpec,
) -> Result<()> {
    task.validate()?;
    let input = task.head_input_width(d);
    nn::init_linear(store, factory, "head.cls.fc1", input, 2 * input);
    nn::init_linear(store, factory, "head.cls.fc2", 2 * input, task.num_classes());
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub class_id: usize,
}

/// Argmax with ties broken toward the lowest class id.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// [h_0^img; h_0^txt] for each batch row.
pub fn single_features(tape: &mut Tape, out: &VLOutput) -> Result<Var> {
    let img = tape.select_pos(out.h_img, 0)?;
    let txt = tape.select_pos(out.h_txt, 0)?;
    tape.concat_cols(&[img, txt])
}

/// [h_0^img,L; h_0^txt,L; h_0^img,R; h_0^txt,R] in this fixed order.
pub fn pair_features(tape: &mut Tape, left: &VLOutput, right: &VLOutput) -> Result<Var> {
    let img_l = tape.select_pos(left.h_img, 0)?;
    let txt_l = tape.select_pos(left.h_txt, 0)?;
    let img_r = tape.select_pos(right.h_img, 0)?;
    let txt_r = tape.select_pos(right.h_txt, 0)?;
    tape.concat_cols(&[img_l, txt_l, img_r, txt_r])
}

fn head_logits(tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
    let h = nn::linear(tape, bound, "head.cls.fc1", features)?;
    let h = tape.gelu(h)?;
    nn::linear(tape, bound, "head.cls.fc2", h)
}

/// Logits for a batch of single-image examples.
pub fn classify_single_batch(
    model: &VLModel,
    task: &TaskSpec,
    tape: &mut Tape,
    bound: &Bound,
    texts: &[TokenSequence],
    images: &[PatchSequence],
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if task.mode != TaskMode::SingleImage {
        return Err(CoreError::Contract(format!(
            "task {} is not a single-image task",
            task.name
        )));
    }
    let out = model.forward(tape, bound, texts, images, ctx)?;
    let features = single_features(tape, &out)?;
    head_logits(tape, bound, features)
}

/// Logits for a batch of image-pair examples. The text is passed once and
/// encoded twice, once with each image, through the same shared encoder.
#[allow(clippy::too_many_arguments)]
pub fn classify_pair_batch(
    model: &VLModel,
    task: &TaskSpec,
    tape: &mut Tape,
    bound: &Bound,
    texts: &[TokenSequence],
    lefts: &[PatchSequence],
    rights: &[PatchSequence],
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if task.mode != TaskMode::ImagePair {
        return Err(CoreError::Contract(format!(
            "task {} is not an image-pair task",
            task.name
        )));
    }
    let left = model.forward(tape, bound, texts, lefts, ctx)?;
    let right = model.forward(tape, bound, texts, rights, ctx)?;
    let features = pair_features(tape, &left, &right)?;
    head_logits(tape, bound, features)
}

/// Cross-entropy against gold class indices.
pub fn finetune_loss(tape: &mut Tape, logits: Var, gold: &[usize]) -> Result<Var> {
    tape.cross_entropy_from_logits(logits, gold)
}

/// One or two images depending on the task mode.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskInputs {
    Single(PatchSequence),
    Pair(PatchSequence, PatchSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneExample {
    pub text: TokenSequence,
    pub inputs: TaskInputs,
    pub gold: usize,
}

/// Batched argmax predictions; evaluation never mutates the model.
pub fn predict(
    model: &VLModel,
    task: &TaskSpec,
    examples: &[FinetuneExample],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let texts: Vec<TokenSequence> = chunk.iter().map(|e| e.text.clone()).collect();
        let logits = match task.mode {
            TaskMode::SingleImage => {
                let images: Vec<PatchSequence> = chunk
                    .iter()
                    .map(|e| match &e.inputs {
                        TaskInputs::Single(p) => Ok(p.clone()),
                        TaskInputs::Pair(..) => Err(CoreError::Contract(
                            "pair inputs passed to a single-image task".into(),
                        )),
                    })
                    .collect::<Result<_>>()?;
                classify_single_batch(model, task, &mut tape, &bound, &texts, &images, &mut ctx)?
            }
            TaskMode::ImagePair => {
                let mut lefts = Vec::with_capacity(chunk.len());
                let mut rights = Vec::with_capacity(chunk.len());
                for e in chunk {
                    match &e.inputs {
                        TaskInputs::Pair(l, r) => {
                            lefts.push(l.clone());
                            rights.push(r.clone());
                        }
                        TaskInputs::Single(_) => {
                            return Err(CoreError::Contract(
                                "single inputs passed to an image-pair task".into(),
                            ))
                        }
                    }
                }
                classify_pair_batch(
                    model, task, &mut tape, &bound, &texts, &lefts, &rights, &mut ctx,
                )?
            }
        };
        let t = tape.value(logits);
        let c = task.num_classes();
        for r in 0..chunk.len() {
            let row = t.data[r * c..(r + 1) * c].to_vec();
            let class_id = argmax(&row);
            preds.push(Prediction { logits: row, class_id });
        }
    }
    Ok(preds)
}

/// Fraction of examples whose argmax matches gold.
pub fn evaluate(
    model: &VLModel,
    task: &TaskSpec,
    examples: &[FinetuneExample],
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(CoreError::Contract("evaluate on an empty dataset".into()));
    }
    let preds = predict(model, task, examples, batch_size)?;
    let correct = preds
        .iter()
        .zip(examples)
        .filter(|(p, e)| p.class_id == e.gold)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}
