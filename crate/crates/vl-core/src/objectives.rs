//! Pretraining objectives: the dataset-specific masking schemes, ITM
//! negative sampling, and the MLM / ITM losses.
//!
//! Masking schemes are interchangeable strategies behind `MaskingScheme`,
//! registered by name ("cc", "imagenet", "ccil") and selected at runtime
//! from the run configuration.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    tokenize, tokenize_words, PatchSequence, TokenSequence, VLOutput, Vocabulary, COMMA_ID,
    MASK_ID,
};
use crate::error::{CoreError, Result};
use crate::nn::{self, Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Which positions were masked and what stood there before replacement.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub original_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItmLabel {
    Match,
    Mismatch,
}

impl ItmLabel {
    pub fn target(self) -> f64 {
        match self {
            ItmLabel::Match => 1.0,
            ItmLabel::Mismatch => 0.0,
        }
    }
}

/// One pretraining example after masking and (possibly) image substitution.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainInstance {
    pub tokens: TokenSequence,
    pub plan: MaskingPlan,
    pub patches: PatchSequence,
    pub itm_label: ItmLabel,
    pub image_id: String,
}

/// Text fields a masking scheme may draw from; which ones must be present
/// depends on the scheme.
#[derive(Debug, Clone, Default)]
pub struct TextMaterial {
    pub caption: Option<String>,
    pub class_label: Option<String>,
    /// (label, machine-generated confidence) pairs, any order.
    pub labels: Vec<(String, f64)>,
}

/// A dataset-specific way of turning text material into a masked sequence.
pub trait MaskingScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(
        &self,
        material: &TextMaterial,
        vocab: &Vocabulary,
        max_len: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<(TokenSequence, MaskingPlan)>;
}

/// Caption scheme: mask a 15% share of the content tokens.
pub struct CaptionMasking {
    pub rate: f64,
}

/// Single-label scheme: the text is one class phrase, fully masked.
pub struct LabelAllMasking;

/// Confidence-ordered label-list scheme: mask all tokens of one
/// uniformly-sampled label.
pub struct SampledLabelMasking;

static CC: CaptionMasking = CaptionMasking { rate: 0.15 };
static IMAGENET: LabelAllMasking = LabelAllMasking;
static CCIL: SampledLabelMasking = SampledLabelMasking;

static SCHEMES: [&dyn MaskingScheme; 3] = [&CC, &IMAGENET, &CCIL];

pub fn masking_schemes() -> &'static [&'static dyn MaskingScheme] {
    &SCHEMES
}

/// Looks a scheme up by its registered name.
pub fn masking_scheme(name: &str) -> Result<&'static dyn MaskingScheme> {
    SCHEMES
        .iter()
        .find(|s| s.name() == name)
        .copied()
        .ok_or_else(|| {
            CoreError::Config(format!(
                "unknown masking scheme '{name}' (known: {})",
                SCHEMES.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
            ))
        })
}

impl MaskingScheme for CaptionMasking {
    fn name(&self) -> &'static str {
        "cc"
    }

    fn build(
        &self,
        material: &TextMaterial,
        vocab: &Vocabulary,
        max_len: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<(TokenSequence, MaskingPlan)> {
        let caption = material
            .caption
            .as_deref()
            .ok_or_else(|| CoreError::Contract("caption scheme needs a caption".into()))?;
        let seq = tokenize(caption, vocab, max_len);
        mask_cc(&seq, rng, self.rate)
    }
}

impl MaskingScheme for LabelAllMasking {
    fn name(&self) -> &'static str {
        "imagenet"
    }

    fn build(
        &self,
        material: &TextMaterial,
        vocab: &Vocabulary,
        max_len: usize,
        _rng: &mut ChaCha12Rng,
    ) -> Result<(TokenSequence, MaskingPlan)> {
        let label = material
            .class_label
            .as_deref()
            .ok_or_else(|| CoreError::Contract("label scheme needs a class label".into()))?;
        let seq = tokenize(label, vocab, max_len);
        Ok(mask_label_all(&seq))
    }
}

impl MaskingScheme for SampledLabelMasking {
    fn name(&self) -> &'static str {
        "ccil"
    }

    fn build(
        &self,
        material: &TextMaterial,
        vocab: &Vocabulary,
        max_len: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<(TokenSequence, MaskingPlan)> {
        if material.labels.is_empty() {
            return Err(CoreError::Contract("label-list scheme needs at least one label".into()));
        }
        let (seq, spans) = ccil_sequence(&material.labels, vocab, max_len);
        mask_one_label(&seq, &spans, rng)
    }
}

/// Masks a 15%-style share of content tokens: the count is
/// floor(rate * n) plus a Bernoulli draw on the fractional part (so the
/// expected count is exactly rate * n), with a minimum of one.
pub fn mask_cc(
    seq: &TokenSequence,
    rng: &mut ChaCha12Rng,
    rate: f64,
) -> Result<(TokenSequence, MaskingPlan)> {
    let mut content = seq.content_positions();
    if content.is_empty() {
        return Err(CoreError::Contract(
            "cannot mask a sequence with no content tokens".into(),
        ));
    }
    let expected = rate * content.len() as f64;
    let mut count = expected.floor() as usize;
    if rng.random::<f64>() < expected - expected.floor() {
        count += 1;
    }
    let count = count.clamp(1, content.len());
    // partial Fisher-Yates for a uniform sample without replacement
    for i in 0..count {
        let j = rng.random_range(i..content.len());
        content.swap(i, j);
    }
    let mut positions: Vec<usize> = content[..count].to_vec();
    positions.sort_unstable();
    Ok(apply_mask(seq, &positions))
}

/// Masks every content token (the single-label scheme). A label that
/// tokenizes to nothing yields a plan with zero positions.
pub fn mask_label_all(seq: &TokenSequence) -> (TokenSequence, MaskingPlan) {
    let positions = seq.content_positions();
    apply_mask(seq, &positions)
}

/// Labels joined by comma separators, ordered by descending confidence.
pub fn build_ccil_text(labels: &[(String, f64)]) -> String {
    let mut ordered: Vec<&(String, f64)> = labels.iter().collect();
    ordered.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    ordered
        .iter()
        .map(|(l, _)| l.as_str())
        .collect::<Vec<_>>()
        .join(" , ")
}

/// Tokenizes the confidence-ordered label list and tracks each label's
/// token span through truncation. Spans that truncation removed entirely
/// are dropped.
pub fn ccil_sequence(
    labels: &[(String, f64)],
    vocab: &Vocabulary,
    max_len: usize,
) -> (TokenSequence, Vec<(usize, usize)>) {
    let text = build_ccil_text(labels);
    let seq = tokenize(&text, vocab, max_len);

    let mut ordered: Vec<&(String, f64)> = labels.iter().collect();
    ordered.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut spans = Vec::new();
    let mut pos = 1; // after CLS
    for (i, (label, _)) in ordered.iter().enumerate() {
        if i > 0 {
            pos += 1; // the comma separator
        }
        let ntok = tokenize_words(label).len();
        let start = pos.min(max_len);
        let end = (pos + ntok).min(max_len);
        if end > start {
            spans.push((start, end));
        }
        pos += ntok;
    }
    (seq, spans)
}

/// Masks all tokens of one uniformly-chosen label span.
pub fn mask_one_label(
    seq: &TokenSequence,
    spans: &[(usize, usize)],
    rng: &mut ChaCha12Rng,
) -> Result<(TokenSequence, MaskingPlan)> {
    if spans.is_empty() {
        return Err(CoreError::Contract("no label span survives truncation".into()));
    }
    let (start, end) = spans[rng.random_range(0..spans.len())];
    let positions: Vec<usize> = (start..end)
        .filter(|&p| seq.ids[p] != COMMA_ID && seq.attention[p])
        .collect();
    Ok(apply_mask(seq, &positions))
}

fn apply_mask(seq: &TokenSequence, positions: &[usize]) -> (TokenSequence, MaskingPlan) {
    let mut masked = seq.clone();
    let mut plan = MaskingPlan::default();
    for &p in positions {
        debug_assert!(p > 0 && seq.attention[p], "mask position must be real content");
        plan.positions.push(p);
        plan.original_ids.push(seq.ids[p]);
        masked.ids[p] = MASK_ID;
    }
    (masked, plan)
}

/// Source of replacement images for ITM negatives.
pub trait ImagePool {
    fn len(&self) -> usize;
    fn image_id(&self, idx: usize) -> &str;
    fn patches(&self, idx: usize) -> Result<PatchSequence>;
}

/// Flips each instance to a mismatch with probability `p`, substituting an
/// image drawn uniformly from the pool; the replacement never carries the
/// instance's own image id. Captions and masking plans are left untouched.
pub fn sample_itm_negatives(
    batch: &mut [PretrainInstance],
    pool: &dyn ImagePool,
    rng: &mut ChaCha12Rng,
    p: f64,
) -> Result<()> {
    for inst in batch.iter_mut() {
        if rng.random::<f64>() >= p {
            continue;
        }
        let mut replacement = None;
        for _ in 0..64 {
            let j = rng.random_range(0..pool.len());
            if pool.image_id(j) != inst.image_id {
                replacement = Some(j);
                break;
            }
        }
        if replacement.is_none() {
            // the pool may be tiny or degenerate; check exhaustively
            replacement = (0..pool.len()).find(|&j| pool.image_id(j) != inst.image_id);
        }
        let Some(j) = replacement else {
            return Err(CoreError::Contract(format!(
                "no valid ITM negative exists for image {}",
                inst.image_id
            )));
        };
        inst.patches = pool.patches(j)?;
        inst.image_id = pool.image_id(j).to_string();
        inst.itm_label = ItmLabel::Mismatch;
    }
    Ok(())
}

// ---- heads and losses ------------------------------------------------------

/// MLM head: d -> V, untied from the input embedding table.
pub fn init_mlm_head(store: &mut ParamStore, factory: &SeededRng, d: usize, vocab_size: usize) {
    nn::init_linear(store, factory, "head.mlm", d, vocab_size);
}

/// ITM head: a single logit over the concatenated CLS pair.
pub fn init_itm_head(store: &mut ParamStore, factory: &SeededRng, d: usize) {
    nn::init_linear(store, factory, "head.itm", 2 * d, 1);
}

/// Mean cross-entropy over each instance's masked positions, averaged over
/// the batch. Instances with no masked positions contribute zero.
pub fn mlm_loss(
    tape: &mut Tape,
    out: &VLOutput,
    plans: &[PlanRef],
    bound: &Bound,
) -> Result<Var> {
    let bsz = plans.len();
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        let k = plan.positions.len();
        for (&p, &orig) in plan.positions.iter().zip(plan.original_ids.iter()) {
            idx.push((b, p));
            targets.push(orig);
            weights.push(1.0 / (bsz as f64 * k as f64));
        }
    }
    if idx.is_empty() {
        return Ok(tape.constant(crate::tensor::Tensor::scalar(0.0)));
    }
    let rows = tape.gather_rows(out.h_txt, &idx)?;
    let logits = nn::linear(tape, bound, "head.mlm", rows)?;
    tape.cross_entropy_weighted(logits, &targets, &weights)
}

/// Binary cross-entropy on the sigmoid logit over [h_0^img; h_0^txt].
pub fn itm_loss(
    tape: &mut Tape,
    out: &VLOutput,
    labels: &[ItmLabel],
    bound: &Bound,
) -> Result<Var> {
    let img_cls = tape.select_pos(out.h_img, 0)?;
    let txt_cls = tape.select_pos(out.h_txt, 0)?;
    let pair = tape.concat_cols(&[img_cls, txt_cls])?;
    let logit = nn::linear(tape, bound, "head.itm", pair)?;
    let targets: Vec<f64> = labels.iter().map(|l| l.target()).collect();
    tape.bce_with_logits(logit, &targets)
}

/// Per-batch pretraining loss: MLM + ITM with unit weights.
pub fn pretrain_loss(
    tape: &mut Tape,
    out: &VLOutput,
    batch: &[PretrainInstance],
    bound: &Bound,
    mlm_on_mismatch: bool,
) -> Result<(Var, f64, f64)> {
    let plans: Vec<PlanRef> = batch
        .iter()
        .map(|inst| {
            if mlm_on_mismatch || inst.itm_label == ItmLabel::Match {
                PlanRef {
                    positions: &inst.plan.positions,
                    original_ids: &inst.plan.original_ids,
                }
            } else {
                PlanRef { positions: &[], original_ids: &[] }
            }
        })
        .collect();
    let labels: Vec<ItmLabel> = batch.iter().map(|i| i.itm_label).collect();
    let mlm = mlm_loss(tape, out, &plans, bound)?;
    let itm = itm_loss(tape, out, &labels, bound)?;
    let total = tape.add(mlm, itm)?;
    Ok((total, tape.value(mlm).item(), tape.value(itm).item()))
}

/// Borrowed view of a masking plan, so callers can blank out plans (e.g.
/// for mismatched instances) without cloning.
pub struct PlanRef<'a> {
    pub positions: &'a [usize],
    pub original_ids: &'a [usize],
}

impl<'a> From<&'a MaskingPlan> for PlanRef<'a> {
    fn from(p: &'a MaskingPlan) -> Self {
        PlanRef { positions: &p.positions, original_ids: &p.original_ids }
    }
}
