//! The fusion vision-language encoder: tokenizer and vocabulary, patch
//! extraction, unimodal text/image encoders, modality projections, and the
//! cross-attention fusion stack producing the contextualized `h_txt` /
//! `h_img` sequences.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::nn::{self, Bound, ForwardCtx, InitScheme, KeyMask, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const COMMA_ID: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const CLS_TOKEN: &str = "<cls>";
pub const MASK_TOKEN: &str = "<mask>";
pub const UNK_TOKEN: &str = "<unk>";
pub const COMMA_TOKEN: &str = ",";

/// Token <-> id map with the five special symbols at fixed low ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn specials() -> Vec<String> {
        vec![
            PAD_TOKEN.into(),
            CLS_TOKEN.into(),
            MASK_TOKEN.into(),
            UNK_TOKEN.into(),
            COMMA_TOKEN.into(),
        ]
    }

    /// Builds a vocabulary from raw texts: specials first, then the sorted
    /// set of distinct word tokens (sorted so the ids are reproducible).
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(tokenize_words)
            .filter(|w| w != COMMA_TOKEN)
            .collect();
        words.sort();
        words.dedup();
        let mut tokens = Self::specials();
        tokens.extend(words);
        Self::from_tokens(tokens).expect("specials are in place")
    }

    /// Restores a vocabulary from a serialized token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = Self::specials();
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(CoreError::Contract(
                "vocabulary token list must start with the special symbols".into(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// PAD, CLS, MASK, UNK and COMMA all count as special.
    pub fn is_special(id: usize) -> bool {
        id <= COMMA_ID
    }
}

/// Lowercases and splits on whitespace and punctuation; a comma becomes its
/// own token, every other non-alphanumeric character is a plain separator.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if ch == ',' {
                out.push(COMMA_TOKEN.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Fixed-length token ids; position 0 is always CLS, PAD fills the tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (non-PAD) positions, CLS included.
    pub fn real_len(&self) -> usize {
        self.attention.iter().filter(|a| **a).count()
    }

    /// Positions holding maskable content: real positions whose id is not
    /// one of the special symbols.
    pub fn content_positions(&self) -> Vec<usize> {
        (1..self.ids.len())
            .filter(|&i| self.attention[i] && !Vocabulary::is_special(self.ids[i]))
            .collect()
    }
}

/// Lowercase, split, prepend CLS, truncate to `max_len` total, pad.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 1, "max_len must fit at least CLS");
    let mut ids = vec![CLS_ID];
    for w in tokenize_words(text) {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&w));
    }
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let attention = (0..max_len).map(|i| i < real).collect();
    TokenSequence { ids, attention }
}

/// Raw image as an H x W x C float array in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(CoreError::DimensionMismatch {
                op: "Image::new",
                lhs: vec![h, w, c],
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: "Image::new" });
        }
        Ok(Image { h, w, c, data })
    }

    pub fn pixel(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.w + c) * self.c + ch]
    }
}

/// Flattened non-overlapping patches plus the CLS_img slot at position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// Row-major patch vectors, `grid.0 * grid.1` rows of `dim` floats.
    pub patches: Vec<f64>,
    pub dim: usize,
    pub grid: (usize, usize),
}

impl PatchSequence {
    /// Sequence length including the CLS slot.
    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Splits an image into P x P x C patches, row-major over the patch grid.
pub fn patchify(image: &Image, p: usize) -> Result<PatchSequence> {
    if p == 0 || image.h % p != 0 || image.w % p != 0 {
        return Err(CoreError::Config(format!(
            "image {}x{} not divisible by patch size {p}",
            image.h, image.w
        )));
    }
    let (gh, gw) = (image.h / p, image.w / p);
    let dim = p * p * image.c;
    let mut patches = Vec::with_capacity(gh * gw * dim);
    for gr in 0..gh {
        for gc in 0..gw {
            for r in 0..p {
                for c in 0..p {
                    for ch in 0..image.c {
                        patches.push(image.pixel(gr * p + r, gc * p + c, ch));
                    }
                }
            }
        }
    }
    Ok(PatchSequence { patches, dim, grid: (gh, gw) })
}

/// Model dimensions. The defaults are the desk-scale configuration; the
/// reference-scale values (224x224 images, patch 16, wide encoders) remain
/// expressible through the same fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VLConfig {
    pub d_txt: usize,
    pub d_img: usize,
    pub d: usize,
    pub text_layers: usize,
    pub image_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    pub max_text_len: usize,
    /// Hidden width of each feed-forward block as a multiple of the width.
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Layer-norm after the fusion stack; on by default.
    pub final_ln: bool,
}

impl Default for VLConfig {
    fn default() -> Self {
        VLConfig {
            d_txt: 48,
            d_img: 48,
            d: 64,
            text_layers: 2,
            image_layers: 2,
            fusion_layers: 2,
            heads: 4,
            image_h: 32,
            image_w: 32,
            patch_size: 8,
            image_channels: 3,
            max_text_len: 24,
            ffn_mult: 4,
            dropout: 0.0,
            final_ln: true,
        }
    }
}

impl VLConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_txt,
            self.d_img,
            self.d,
            self.heads,
            self.image_h,
            self.image_w,
            self.patch_size,
            self.image_channels,
            self.max_text_len,
        ];
        if positive.iter().any(|&v| v == 0) || self.ffn_mult == 0 {
            return Err(CoreError::Config("all model dimensions must be positive".into()));
        }
        for (name, w) in [("d_txt", self.d_txt), ("d_img", self.d_img), ("d", self.d)] {
            if w % self.heads != 0 {
                return Err(CoreError::Config(format!(
                    "{name}={w} not divisible by heads={}",
                    self.heads
                )));
            }
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(CoreError::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    /// Image sequence length including the CLS slot.
    pub fn image_seq_len(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size) + 1
    }
}

/// Post-fusion contextualized sequences; index 0 of each is the CLS
/// representation consumed by the heads.
pub struct VLOutput {
    pub h_txt: Var,
    pub h_img: Var,
    pub txt_mask: KeyMask,
    pub img_mask: KeyMask,
}

/// The full encoder: parameters plus the vocabulary they are sized for.
#[derive(Debug, Clone, PartialEq)]
pub struct VLModel {
    pub config: VLConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl VLModel {
    pub fn new(config: VLConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let factory = SeededRng::new(seed);
        let mut params = ParamStore::new();
        let embed_txt = InitScheme::TruncNormal { sigma: nn::weight_sigma(config.d_txt) };
        let embed_img = InitScheme::TruncNormal { sigma: nn::weight_sigma(config.d_img) };

        params.init(&factory, "text.tok", vec![vocab.len(), config.d_txt], embed_txt);
        params.init(&factory, "text.pos", vec![config.max_text_len, config.d_txt], embed_txt);
        for i in 0..config.text_layers {
            nn::init_transformer_layer(
                &mut params,
                &factory,
                &format!("text.layer{i}"),
                config.d_txt,
                config.d_txt * config.ffn_mult,
                false,
            );
        }
        nn::init_layer_norm(&mut params, &factory, "text.out_ln", config.d_txt);

        nn::init_linear(&mut params, &factory, "image.patch", config.patch_dim(), config.d_img);
        params.init(&factory, "image.cls", vec![1, config.d_img], embed_img);
        params.init(&factory, "image.pos", vec![config.image_seq_len(), config.d_img], embed_img);
        for i in 0..config.image_layers {
            nn::init_transformer_layer(
                &mut params,
                &factory,
                &format!("image.layer{i}"),
                config.d_img,
                config.d_img * config.ffn_mult,
                false,
            );
        }
        nn::init_layer_norm(&mut params, &factory, "image.out_ln", config.d_img);

        nn::init_linear(&mut params, &factory, "proj.txt", config.d_txt, config.d);
        nn::init_linear(&mut params, &factory, "proj.img", config.d_img, config.d);
        for side in ["txt", "img"] {
            for i in 0..config.fusion_layers {
                nn::init_transformer_layer(
                    &mut params,
                    &factory,
                    &format!("fusion.{side}.layer{i}"),
                    config.d,
                    config.d * config.ffn_mult,
                    true,
                );
            }
            if config.final_ln {
                nn::init_layer_norm(&mut params, &factory, &format!("fusion.{side}.out_ln"), config.d);
            }
        }

        Ok(VLModel { config, vocab, params })
    }

    /// Unimodal text encoding to d_txt width.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seqs: &[TokenSequence],
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, KeyMask)> {
        let bsz = seqs.len();
        let l = seqs[0].len();
        if l > self.config.max_text_len {
            return Err(CoreError::Config(format!(
                "sequence length {l} exceeds position table {}",
                self.config.max_text_len
            )));
        }
        let mut ids = Vec::with_capacity(bsz * l);
        let mut visible = Vec::with_capacity(bsz * l);
        for s in seqs {
            if s.len() != l {
                return Err(CoreError::Contract("ragged batch of token sequences".into()));
            }
            ids.extend_from_slice(&s.ids);
            visible.extend_from_slice(&s.attention);
        }
        let mask = KeyMask::new(bsz, l, visible)?;

        let tok = bound.var("text.tok");
        let mut h = tape.embedding_gather(tok, &ids, &[bsz, l])?;
        let pos_full = bound.var("text.pos");
        let pos = if l == self.config.max_text_len {
            pos_full
        } else {
            // leading rows of the position table
            let all = tape.reshape(pos_full, vec![1, self.config.max_text_len, self.config.d_txt])?;
            let rows: Vec<(usize, usize)> = (0..l).map(|p| (0, p)).collect();
            let cut = tape.gather_rows(all, &rows)?;
            tape.reshape(cut, vec![l, self.config.d_txt])?
        };
        h = tape.add(h, pos)?;
        h = tape.dropout(h, ctx.dropout, &mut ctx.rng, ctx.train)?;
        for i in 0..self.config.text_layers {
            h = nn::transformer_layer(
                tape,
                bound,
                &format!("text.layer{i}"),
                h,
                &mask,
                None,
                false,
                self.config.heads,
                ctx,
            )?;
        }
        let h = nn::layer_norm_at(tape, bound, "text.out_ln", h)?;
        Ok((h, mask))
    }

    /// Unimodal image encoding to d_img width; position 0 is the learned
    /// CLS_img vector.
    pub fn encode_image(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: &[PatchSequence],
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, KeyMask)> {
        let bsz = images.len();
        let m = images[0].num_patches();
        let dim = images[0].dim;
        if dim != self.config.patch_dim() || m + 1 != self.config.image_seq_len() {
            return Err(CoreError::Config(format!(
                "patch sequence {}x{dim} does not match the configured geometry",
                m + 1
            )));
        }
        let mut flat = Vec::with_capacity(bsz * m * dim);
        for im in images {
            if im.num_patches() != m || im.dim != dim {
                return Err(CoreError::Contract("ragged batch of patch sequences".into()));
            }
            flat.extend_from_slice(&im.patches);
        }
        let patches = tape.constant(Tensor::new(vec![bsz, m, dim], flat)?);
        let proj = nn::linear(tape, bound, "image.patch", patches)?;
        let cls_table = bound.var("image.cls");
        let cls = tape.embedding_gather(cls_table, &vec![0; bsz], &[bsz, 1])?;
        let mut h = tape.concat_rows3(&[cls, proj])?;
        h = tape.add(h, bound.var("image.pos"))?;
        h = tape.dropout(h, ctx.dropout, &mut ctx.rng, ctx.train)?;
        let mask = KeyMask::all_visible(bsz, m + 1);
        for i in 0..self.config.image_layers {
            h = nn::transformer_layer(
                tape,
                bound,
                &format!("image.layer{i}"),
                h,
                &mask,
                None,
                false,
                self.config.heads,
                ctx,
            )?;
        }
        let h = nn::layer_norm_at(tape, bound, "image.out_ln", h)?;
        Ok((h, mask))
    }

    /// Projects both modalities to the shared width and runs the fusion
    /// stack. Cross-attention is parallel: in each layer both modalities
    /// attend to the other's input to that layer.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h_txt_hat: Var,
        h_img_hat: Var,
        txt_mask: KeyMask,
        img_mask: KeyMask,
        ctx: &mut ForwardCtx,
    ) -> Result<VLOutput> {
        let mut t = nn::linear(tape, bound, "proj.txt", h_txt_hat)?;
        let mut i = nn::linear(tape, bound, "proj.img", h_img_hat)?;
        for layer in 0..self.config.fusion_layers {
            let (t_in, i_in) = (t, i);
            t = nn::transformer_layer(
                tape,
                bound,
                &format!("fusion.txt.layer{layer}"),
                t_in,
                &txt_mask,
                Some((i_in, &img_mask)),
                true,
                self.config.heads,
                ctx,
            )?;
            i = nn::transformer_layer(
                tape,
                bound,
                &format!("fusion.img.layer{layer}"),
                i_in,
                &img_mask,
                Some((t_in, &txt_mask)),
                true,
                self.config.heads,
                ctx,
            )?;
        }
        if self.config.final_ln {
            t = nn::layer_norm_at(tape, bound, "fusion.txt.out_ln", t)?;
            i = nn::layer_norm_at(tape, bound, "fusion.img.out_ln", i)?;
        }
        Ok(VLOutput { h_txt: t, h_img: i, txt_mask, img_mask })
    }

    /// Full forward pass over a batch of (text, image) pairs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seqs: &[TokenSequence],
        images: &[PatchSequence],
        ctx: &mut ForwardCtx,
    ) -> Result<VLOutput> {
        if seqs.len() != images.len() {
            return Err(CoreError::Contract(format!(
                "batch size mismatch: {} texts vs {} images",
                seqs.len(),
                images.len()
            )));
        }
        let (ht, tmask) = self.encode_text(tape, bound, seqs, ctx)?;
        let (hi, imask) = self.encode_image(tape, bound, images, ctx)?;
        self.fuse(tape, bound, ht, hi, tmask, imask, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> VLConfig {
        VLConfig {
            d_txt: 8,
            d_img: 12,
            d: 16,
            text_layers: 1,
            image_layers: 1,
            fusion_layers: 1,
            heads: 2,
            image_h: 16,
            image_w: 16,
            patch_size: 8,
            image_channels: 3,
            max_text_len: 8,
            ffn_mult: 4,
            dropout: 0.0,
            final_ln: true,
        }
    }

    fn toy_vocab() -> Vocabulary {
        Vocabulary::from_texts([
            "snail on a branch isolated",
            "room, interior design, furniture",
            "red square and blue circle",
        ])
    }

    fn toy_image(seed: u64, cfg: &VLConfig) -> Image {
        use rand::Rng;
        let mut rng = SeededRng::new(seed).stream("img");
        let n = cfg.image_h * cfg.image_w * cfg.image_channels;
        Image::new(
            cfg.image_h,
            cfg.image_w,
            cfg.image_channels,
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tokenize_caption() {
        let v = toy_vocab();
        let s = tokenize("snail on a branch", &v, 8);
        let words: Vec<&str> = s.ids[..5].iter().map(|&i| v.token(i)).collect();
        assert_eq!(words, vec![CLS_TOKEN, "snail", "on", "a", "branch"]);
        assert!(s.ids[5..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn tokenize_empty_text() {
        let v = toy_vocab();
        let s = tokenize("", &v, 4);
        assert_eq!(s.ids, vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(s.real_len(), 1);
    }

    #[test]
    fn tokenize_comma_is_own_token() {
        let v = toy_vocab();
        let s = tokenize("room, interior design", &v, 8);
        let words: Vec<&str> = s.ids[..5].iter().map(|&i| v.token(i)).collect();
        assert_eq!(words, vec![CLS_TOKEN, "room", ",", "interior", "design"]);
    }

    #[test]
    fn tokenize_unknown_word_maps_to_unk() {
        let v = toy_vocab();
        let s = tokenize("zeppelin", &v, 4);
        assert_eq!(s.ids[1], UNK_ID);
    }

    #[test]
    fn tokenize_truncates_to_max_len() {
        let v = toy_vocab();
        let s = tokenize("snail on a branch isolated", &v, 4);
        assert_eq!(s.len(), 4);
        assert_eq!(s.real_len(), 4);
    }

    #[test]
    fn patchify_reference_geometry() {
        // 224x224 at patch 16 -> 196 patches plus the CLS slot
        let img = Image::new(224, 224, 1, vec![0.5; 224 * 224]).unwrap();
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.count(), 197);
    }

    #[test]
    fn patchify_single_patch() {
        let img = Image::new(8, 8, 3, vec![0.1; 192]).unwrap();
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.count(), 2);
        assert_eq!(p.dim, 192);
    }

    #[test]
    fn patchify_indivisible_is_config_error() {
        let img = Image::new(8, 8, 3, vec![0.1; 192]).unwrap();
        assert!(matches!(patchify(&img, 3), Err(CoreError::Config(_))));
    }

    #[test]
    fn fuse_outputs_shared_width_despite_different_encoder_widths() {
        let cfg = toy_config();
        assert_ne!(cfg.d_txt, cfg.d_img);
        let model = VLModel::new(cfg.clone(), toy_vocab(), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let seqs = vec![tokenize("snail on a branch", &model.vocab, cfg.max_text_len)];
        let imgs = vec![patchify(&toy_image(2, &cfg), cfg.patch_size).unwrap()];
        let mut ctx = ForwardCtx::eval();
        let out = model.forward(&mut tape, &bound, &seqs, &imgs, &mut ctx).unwrap();
        assert_eq!(tape.shape(out.h_txt), &[1, cfg.max_text_len, cfg.d]);
        assert_eq!(tape.shape(out.h_img), &[1, cfg.image_seq_len(), cfg.d]);
    }

    #[test]
    fn zero_cross_projections_make_text_ignore_the_image() {
        let cfg = toy_config();
        let mut model = VLModel::new(cfg.clone(), toy_vocab(), 3).unwrap();
        for layer in 0..cfg.fusion_layers {
            model
                .params
                .get_mut(&format!("fusion.txt.layer{layer}.cross.o.w"))
                .tensor
                .data
                .fill(0.0);
            model
                .params
                .get_mut(&format!("fusion.txt.layer{layer}.cross.o.b"))
                .tensor
                .data
                .fill(0.0);
        }
        let seqs = vec![tokenize("snail on a branch", &model.vocab, cfg.max_text_len)];
        let run = |img_seed: u64| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let imgs = vec![patchify(&toy_image(img_seed, &cfg), cfg.patch_size).unwrap()];
            let mut ctx = ForwardCtx::eval();
            let out = model.forward(&mut tape, &bound, &seqs, &imgs, &mut ctx).unwrap();
            tape.value(out.h_txt).data.clone()
        };
        assert_eq!(run(10), run(11), "h_txt must not depend on the image");
    }

    #[test]
    fn cross_modal_sensitivity_with_random_weights() {
        let cfg = toy_config();
        let model = VLModel::new(cfg.clone(), toy_vocab(), 4).unwrap();
        let seqs = vec![tokenize("snail on a branch", &model.vocab, cfg.max_text_len)];
        let run = |img: &Image| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let imgs = vec![patchify(img, cfg.patch_size).unwrap()];
            let mut ctx = ForwardCtx::eval();
            let out = model.forward(&mut tape, &bound, &seqs, &imgs, &mut ctx).unwrap();
            (
                tape.value(out.h_txt).data.clone(),
                tape.value(out.h_img).data.clone(),
            )
        };
        let base = toy_image(20, &cfg);
        let mut perturbed = base.clone();
        perturbed.data[0] += 0.5;
        let (t0, _) = run(&base);
        let (t1, _) = run(&perturbed);
        let diff: f64 = t0.iter().zip(&t1).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "changing the image must change h_txt (got {diff})");

        // and symmetrically for the text side
        let run_txt = |text: &str| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let seqs = vec![tokenize(text, &model.vocab, cfg.max_text_len)];
            let imgs = vec![patchify(&base, cfg.patch_size).unwrap()];
            let mut ctx = ForwardCtx::eval();
            let out = model.forward(&mut tape, &bound, &seqs, &imgs, &mut ctx).unwrap();
            tape.value(out.h_img).data.clone()
        };
        let i0 = run_txt("snail on a branch");
        let i1 = run_txt("room interior design");
        let diff: f64 = i0.iter().zip(&i1).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "changing the text must change h_img");
    }

    #[test]
    fn image_jacobian_of_text_cls_is_nonzero() {
        // finite-difference probe through the fused stack
        let cfg = toy_config();
        let model = VLModel::new(cfg.clone(), toy_vocab(), 5).unwrap();
        let seqs = vec![tokenize("snail on a branch", &model.vocab, cfg.max_text_len)];
        let eval_cls = |img: &Image| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let imgs = vec![patchify(img, cfg.patch_size).unwrap()];
            let mut ctx = ForwardCtx::eval();
            let out = model.forward(&mut tape, &bound, &seqs, &imgs, &mut ctx).unwrap();
            let cls = tape.select_pos(out.h_txt, 0).unwrap();
            // a single coordinate: the sum of a layer-normed row is
            // identically zero, which would hide the dependence
            tape.value(cls).data[0]
        };
        let base = toy_image(30, &cfg);
        let mut plus = base.clone();
        plus.data[5] += 1e-4;
        let mut minus = base.clone();
        minus.data[5] -= 1e-4;
        let j = (eval_cls(&plus) - eval_cls(&minus)) / 2e-4;
        assert!(j.abs() > 1e-10, "Jacobian w.r.t. an image pixel is {j}");
    }

    #[test]
    fn padding_invariance_of_non_pad_positions() {
        let cfg = toy_config();
        let model = VLModel::new(cfg.clone(), toy_vocab(), 6).unwrap();
        let img = patchify(&toy_image(40, &cfg), cfg.patch_size).unwrap();
        // same text with and without room for extra PAD: build short and long
        let short = tokenize("snail on a", &model.vocab, 5); // CLS + 3 words + 1 pad? no: len 5 -> CLS + 3 + 1 pad
        let long = tokenize("snail on a", &model.vocab, cfg.max_text_len);
        let run = |seq: TokenSequence| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut ctx = ForwardCtx::eval();
            let out = model
                .forward(&mut tape, &bound, &[seq], &[img.clone()], &mut ctx)
                .unwrap();
            tape.value(out.h_txt).data.clone()
        };
        let hs = run(short);
        let hl = run(long);
        // compare the four real positions (CLS + 3 words)
        for pos in 0..4 {
            for c in 0..cfg.d {
                let a = hs[pos * cfg.d + c];
                let b = hl[pos * cfg.d + c];
                assert!(
                    (a - b).abs() < 1e-10,
                    "padding changed position {pos} ({a} vs {b})"
                );
            }
        }
    }

    #[test]
    fn sequence_longer_than_position_table_is_config_error() {
        let cfg = toy_config();
        let model = VLModel::new(cfg.clone(), toy_vocab(), 7).unwrap();
        let mut seq = tokenize("snail on a branch", &model.vocab, cfg.max_text_len);
        seq.ids.push(PAD_ID);
        seq.attention.push(false);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let r = model.encode_text(&mut tape, &bound, &[seq], &mut ctx);
        assert!(matches!(r, Err(CoreError::Config(_))));
    }

    #[test]
    fn vocabulary_roundtrip_and_specials() {
        let v = toy_vocab();
        assert_eq!(v.id(CLS_TOKEN), CLS_ID);
        assert_eq!(v.id(","), COMMA_ID);
        assert_eq!(v.id("definitely-not-present"), UNK_ID);
        let restored = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(restored, v);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }
}
