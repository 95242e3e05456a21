//! Record-to-batch preparation: masking-scheme application, on-demand scene
//! rendering, ITM negative pools, and finetune example assembly.

use vl_core::encoder::{patchify, PatchSequence, TokenSequence, Vocabulary};
use vl_core::finetune::{FinetuneExample, TaskInputs, TaskMode, TaskSpec};
use vl_core::objectives::{
    sample_itm_negatives, ImagePool, ItmLabel, MaskingScheme, PretrainInstance, TextMaterial,
};
use vl_core::SeededRng;
use vl_data::manifest::{DatasetKind, ExampleRecord, ImageRef, Manifest, Split};
use vl_data::synthetic::render_ref;

use crate::error::{Result, TrainError};

/// A pretraining corpus bound to a masking scheme.
pub struct PretrainCorpus {
    pub train: Vec<ExampleRecord>,
    pub validation: Vec<ExampleRecord>,
    pub scheme: &'static dyn MaskingScheme,
    pub patch_size: usize,
    pub(crate) train_image_ids: Vec<String>,
}

impl PretrainCorpus {
    pub fn new(manifest: &Manifest, scheme_name: &str, patch_size: usize) -> Result<Self> {
        let scheme = vl_core::objectives::masking_scheme(scheme_name)?;
        let train: Vec<ExampleRecord> = manifest.split(Split::Train).cloned().collect();
        let validation: Vec<ExampleRecord> = manifest.split(Split::Validation).cloned().collect();
        if train.is_empty() {
            return Err(TrainError::Config("pretraining corpus has no train records".into()));
        }
        let train_image_ids = train
            .iter()
            .map(|r| r.image.as_ref().map(ImageRef::id).unwrap_or_default())
            .collect();
        Ok(PretrainCorpus { train, validation, scheme, patch_size, train_image_ids })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

fn material_of(record: &ExampleRecord) -> TextMaterial {
    let labels = match &record.confidences {
        Some(confs) => record
            .texts
            .iter()
            .cloned()
            .zip(confs.iter().cloned())
            .collect(),
        None => Vec::new(),
    };
    TextMaterial {
        caption: record.texts.first().cloned(),
        class_label: record.class_label.clone(),
        labels,
    }
}

fn patches_of(record: &ExampleRecord, patch_size: usize) -> Result<PatchSequence> {
    let image_ref = record
        .image
        .as_ref()
        .ok_or_else(|| TrainError::Config(format!("record {} has no image", record.id)))?;
    let image = render_ref(image_ref)?;
    Ok(patchify(&image, patch_size)?)
}

impl ImagePool for PretrainCorpus {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn image_id(&self, idx: usize) -> &str {
        &self.train_image_ids[idx]
    }

    fn patches(&self, idx: usize) -> vl_core::Result<PatchSequence> {
        let record = &self.train[idx];
        let image_ref = record
            .image
            .as_ref()
            .ok_or_else(|| vl_core::CoreError::Contract(format!("record {} has no image", record.id)))?;
        let image = render_ref(image_ref)
            .map_err(|e| vl_core::CoreError::Contract(e.to_string()))?;
        patchify(&image, self.patch_size)
    }
}

/// Drops trailing positions that are PAD in every sequence of the batch.
pub fn trim_batch(seqs: &mut [TokenSequence]) {
    let max_real = seqs.iter().map(TokenSequence::real_len).max().unwrap_or(1);
    for s in seqs {
        s.ids.truncate(max_real);
        s.attention.truncate(max_real);
    }
}

/// Builds one pretraining batch. Masking draws come from per-(epoch, record)
/// substreams; negative sampling is keyed by the global step, so a resumed
/// run rebuilds the identical batch.
#[allow(clippy::too_many_arguments)]
pub fn build_pretrain_batch(
    corpus: &PretrainCorpus,
    indices: &[usize],
    vocab: &Vocabulary,
    max_len: usize,
    epoch: u64,
    global_step: u64,
    factory: &SeededRng,
    itm_p: f64,
) -> Result<Vec<PretrainInstance>> {
    let mut batch = Vec::with_capacity(indices.len());
    for &i in indices {
        let record = &corpus.train[i];
        let material = material_of(record);
        let mut rng = factory.stream(&format!("mask:{epoch}:{}", record.id));
        let (tokens, plan) = corpus.scheme.build(&material, vocab, max_len, &mut rng)?;
        batch.push(PretrainInstance {
            tokens,
            plan,
            patches: patches_of(record, corpus.patch_size)?,
            itm_label: ItmLabel::Match,
            image_id: corpus.train_image_ids[i].clone(),
        });
    }
    if itm_p > 0.0 {
        let mut rng = factory.stream_indexed("negatives", global_step);
        sample_itm_negatives(&mut batch, corpus, &mut rng, itm_p)?;
    }
    let mut seqs: Vec<TokenSequence> = batch.iter().map(|b| b.tokens.clone()).collect();
    trim_batch(&mut seqs);
    for (inst, seq) in batch.iter_mut().zip(seqs) {
        inst.tokens = seq;
    }
    Ok(batch)
}

/// Task spec derived from a manifest.
pub fn task_from_manifest(name: &str, manifest: &Manifest) -> Result<TaskSpec> {
    let mode = match manifest.kind {
        DatasetKind::Vqa => TaskMode::SingleImage,
        DatasetKind::PairReasoning => TaskMode::ImagePair,
        other => {
            return Err(TrainError::Config(format!(
                "manifest kind {other:?} is not a finetuning task"
            )))
        }
    };
    let task = TaskSpec { name: name.to_string(), classes: manifest.classes.clone(), mode };
    task.validate()?;
    Ok(task)
}

/// Converts records of a split into finetune examples.
pub fn finetune_examples(
    manifest: &Manifest,
    split: Split,
    vocab: &Vocabulary,
    max_len: usize,
    patch_size: usize,
) -> Result<Vec<FinetuneExample>> {
    let mut out = Vec::new();
    for r in manifest.split(split) {
        let gold = r
            .gold_class
            .ok_or_else(|| TrainError::Config(format!("record {} has no gold class", r.id)))?;
        let text = vl_core::encoder::tokenize(&r.texts[0], vocab, max_len);
        let inputs = match manifest.kind {
            DatasetKind::Vqa => TaskInputs::Single(patches_of(r, patch_size)?),
            DatasetKind::PairReasoning => {
                let left = r
                    .image_left
                    .as_ref()
                    .ok_or_else(|| TrainError::Config(format!("record {} missing left image", r.id)))?;
                let right = r
                    .image_right
                    .as_ref()
                    .ok_or_else(|| TrainError::Config(format!("record {} missing right image", r.id)))?;
                TaskInputs::Pair(
                    patchify(&render_ref(left)?, patch_size)?,
                    patchify(&render_ref(right)?, patch_size)?,
                )
            }
            other => {
                return Err(TrainError::Config(format!(
                    "manifest kind {other:?} is not a finetuning task"
                )))
            }
        };
        out.push(FinetuneExample { text, inputs, gold });
    }
    Ok(out)
}
