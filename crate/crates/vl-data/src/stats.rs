//! Dataset statistics over the training split.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use vl_core::encoder::tokenize_words;

use crate::manifest::{Manifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub training_instances: usize,
    pub unique_texts: usize,
    pub training_images: usize,
}

/// Normalization used for text identity: lowercase word tokens rejoined.
fn normalize(text: &str) -> String {
    tokenize_words(text).join(" ")
}

pub fn stats(manifest: &Manifest) -> ManifestStats {
    let mut texts: HashSet<String> = HashSet::new();
    let mut images: HashSet<String> = HashSet::new();
    let mut instances = 0;
    for r in manifest.split(Split::Train) {
        instances += 1;
        for t in &r.texts {
            texts.insert(normalize(t));
        }
        for img in [&r.image, &r.image_left, &r.image_right].into_iter().flatten() {
            images.insert(img.id());
        }
    }
    ManifestStats {
        training_instances: instances,
        unique_texts: texts.len(),
        training_images: images.len(),
    }
}
