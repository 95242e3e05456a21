//! Corpus subset selection: fraction sampling, length extremes, and the
//! greedy vocabulary procedures, each behind the `SubsetStrategy` trait and
//! selected by name at runtime.

use std::collections::HashSet;

use rand::Rng;
use vl_core::encoder::{tokenize_words, COMMA_TOKEN};
use vl_core::SeededRng;

use crate::error::{DataError, Result};
use crate::manifest::{ExampleRecord, Manifest};

/// What to select and how; exactly one of `k` / `p` must be set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSpec {
    pub k: Option<usize>,
    pub p: Option<f64>,
    /// Candidate pool per greedy step.
    pub pool: usize,
    pub seed: u64,
}

impl SubsetSpec {
    pub fn with_k(k: usize, seed: u64) -> Self {
        SubsetSpec { k: Some(k), p: None, pool: 10_000, seed }
    }

    pub fn with_p(p: f64, seed: u64) -> Self {
        SubsetSpec { k: None, p: Some(p), pool: 10_000, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.k, self.p) {
            (Some(_), Some(_)) | (None, None) => Err(DataError::Contract(
                "exactly one of k and p must be set".into(),
            )),
            _ => {
                if let Some(p) = self.p {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(DataError::Contract(format!("fraction {p} outside [0,1]")));
                    }
                }
                if self.pool == 0 {
                    return Err(DataError::Contract("candidate pool must be positive".into()));
                }
                Ok(())
            }
        }
    }

    fn size_for(&self, n: usize, needs_k: bool) -> Result<usize> {
        self.validate()?;
        match (self.k, self.p) {
            (Some(k), None) => Ok(k),
            (None, Some(p)) if !needs_k => Ok((p * n as f64).round() as usize),
            _ => Err(DataError::Contract("this strategy needs k, not p".into())),
        }
    }
}

/// Content tokens of a record for length / vocabulary purposes: the model
/// tokenizer applied to all texts, specials (commas) excluded.
pub fn record_tokens(r: &ExampleRecord) -> Vec<String> {
    r.texts
        .iter()
        .flat_map(|t| tokenize_words(t))
        .filter(|w| w != COMMA_TOKEN)
        .collect()
}

pub trait SubsetStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, manifest: &Manifest, spec: &SubsetSpec) -> Result<Manifest>;
}

struct FractionSubset;
struct LengthSubset {
    maximize: bool,
}
struct GreedyVocabSubset {
    maximize: bool,
}

static FRACTION: FractionSubset = FractionSubset;
static MIN_LENGTH: LengthSubset = LengthSubset { maximize: false };
static MAX_LENGTH: LengthSubset = LengthSubset { maximize: true };
static MIN_VOCAB: GreedyVocabSubset = GreedyVocabSubset { maximize: false };
static MAX_VOCAB: GreedyVocabSubset = GreedyVocabSubset { maximize: true };

static STRATEGIES: [&dyn SubsetStrategy; 5] =
    [&FRACTION, &MIN_LENGTH, &MAX_LENGTH, &MIN_VOCAB, &MAX_VOCAB];

pub fn subset_strategies() -> &'static [&'static dyn SubsetStrategy] {
    &STRATEGIES
}

pub fn subset_strategy(name: &str) -> Result<&'static dyn SubsetStrategy> {
    STRATEGIES
        .iter()
        .find(|s| s.name() == name)
        .copied()
        .ok_or_else(|| {
            DataError::Contract(format!(
                "unknown subset strategy '{name}' (known: {})",
                STRATEGIES.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
            ))
        })
}

/// Order-stable manifest from a set of kept indices.
fn keep_indices(manifest: &Manifest, mut idx: Vec<usize>) -> Manifest {
    idx.sort_unstable();
    let records = idx.iter().map(|&i| manifest.records[i].clone()).collect();
    manifest.with_records(records)
}

impl SubsetStrategy for FractionSubset {
    fn name(&self) -> &'static str {
        "fraction"
    }

    fn select(&self, manifest: &Manifest, spec: &SubsetSpec) -> Result<Manifest> {
        let n = manifest.len();
        let size = spec.size_for(n, false)?.min(n);
        if spec.p == Some(1.0) {
            return Ok(manifest.clone());
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = SeededRng::new(spec.seed).stream("subset:fraction");
        for i in 0..size {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(size);
        Ok(keep_indices(manifest, idx))
    }
}

impl SubsetStrategy for LengthSubset {
    fn name(&self) -> &'static str {
        if self.maximize {
            "max_length"
        } else {
            "min_length"
        }
    }

    fn select(&self, manifest: &Manifest, spec: &SubsetSpec) -> Result<Manifest> {
        let k = spec.size_for(manifest.len(), true)?;
        if k > manifest.len() {
            return Err(DataError::Contract(format!(
                "k={k} exceeds corpus size {}",
                manifest.len()
            )));
        }
        let mut keyed: Vec<(usize, usize, &str)> = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (i, record_tokens(r).len(), r.id.as_str()))
            .collect();
        // ties break by record id
        keyed.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(b.2)));
        let idx: Vec<usize> = if self.maximize {
            keyed.iter().rev().take(k).map(|(i, _, _)| *i).collect()
        } else {
            keyed.iter().take(k).map(|(i, _, _)| *i).collect()
        };
        Ok(keep_indices(manifest, idx))
    }
}

impl SubsetStrategy for GreedyVocabSubset {
    fn name(&self) -> &'static str {
        if self.maximize {
            "max_vocab"
        } else {
            "min_vocab"
        }
    }

    /// Start from an empty selection; each step samples a candidate set of
    /// `pool` unselected records and admits the one that minimizes or
    /// maximizes the resulting vocabulary. Ties break by smallest id.
    fn select(&self, manifest: &Manifest, spec: &SubsetSpec) -> Result<Manifest> {
        let n = manifest.len();
        let k = spec.size_for(n, true)?;
        if k > n {
            return Err(DataError::Contract(format!("k={k} exceeds corpus size {n}")));
        }
        let token_sets: Vec<HashSet<String>> = manifest
            .records
            .iter()
            .map(|r| record_tokens(r).into_iter().collect())
            .collect();
        let mut rng = SeededRng::new(spec.seed).stream("subset:greedy-vocab");
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut vocab: HashSet<String> = HashSet::new();
        let mut chosen = Vec::with_capacity(k);
        for _ in 0..k {
            let pool = spec.pool.min(remaining.len());
            for i in 0..pool {
                let j = rng.random_range(i..remaining.len());
                remaining.swap(i, j);
            }
            let mut best: Option<(usize, usize)> = None; // (slot in remaining, new tokens)
            for (slot, &cand) in remaining[..pool].iter().enumerate() {
                let new = token_sets[cand].iter().filter(|t| !vocab.contains(*t)).count();
                let better = match best {
                    None => true,
                    Some((bslot, bnew)) => {
                        let cmp = if self.maximize { new > bnew } else { new < bnew };
                        cmp || (new == bnew
                            && manifest.records[cand].id < manifest.records[remaining[bslot]].id)
                    }
                };
                if better {
                    best = Some((slot, new));
                }
            }
            let (slot, _) = best.expect("pool is non-empty");
            let picked = remaining.swap_remove(slot);
            vocab.extend(token_sets[picked].iter().cloned());
            chosen.push(picked);
        }
        Ok(keep_indices(manifest, chosen))
    }
}

/// Distinct content tokens across a manifest.
pub fn vocabulary_size(manifest: &Manifest) -> usize {
    let mut v = HashSet::new();
    for r in &manifest.records {
        v.extend(record_tokens(r));
    }
    v.len()
}

/// Mean content-token count per record.
pub fn average_length(manifest: &Manifest) -> f64 {
    if manifest.is_empty() {
        return 0.0;
    }
    let total: usize = manifest.records.iter().map(|r| record_tokens(r).len()).sum();
    total as f64 / manifest.len() as f64
}

/// Keeps each multi-label record's top-`max_n` labels by confidence.
/// Returns the restricted manifest and its distinct-label count.
pub fn restrict_labels(manifest: &Manifest, max_n: usize) -> Result<(Manifest, usize)> {
    if max_n == 0 {
        return Err(DataError::Contract("max_n must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(manifest.len());
    let mut unique: HashSet<String> = HashSet::new();
    for r in &manifest.records {
        let mut r = r.clone();
        if let Some(confs) = r.confidences.clone() {
            let mut order: Vec<usize> = (0..r.texts.len()).collect();
            order.sort_by(|&a, &b| {
                confs[b].partial_cmp(&confs[a]).unwrap_or(std::cmp::Ordering::Equal)
            });
            order.truncate(max_n);
            r.texts = order.iter().map(|&i| r.texts[i].clone()).collect();
            r.confidences = Some(order.iter().map(|&i| confs[i]).collect());
        }
        unique.extend(r.texts.iter().cloned());
        records.push(r);
    }
    Ok((manifest.with_records(records), unique.len()))
}

/// Rewrites class labels through a child -> ancestor mapping; labels not in
/// the mapping pass through unchanged.
pub fn collapse_classes(
    manifest: &Manifest,
    mapping: &std::collections::HashMap<String, String>,
) -> Manifest {
    let records = manifest
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(c) = &r.class_label {
                if let Some(ancestor) = mapping.get(c) {
                    r.class_label = Some(ancestor.clone());
                }
            }
            r
        })
        .collect();
    manifest.with_records(records)
}

/// Downsamples every class to the smallest class count, deterministically
/// under the seed; records without a class label are dropped.
pub fn rebalance(manifest: &Manifest, seed: u64) -> Result<Manifest> {
    use std::collections::BTreeMap;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if let Some(c) = &r.class_label {
            by_class.entry(c.as_str()).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(DataError::Contract("rebalance needs class labels".into()));
    }
    let min = by_class.values().map(Vec::len).min().unwrap();
    let factory = SeededRng::new(seed);
    let mut keep = Vec::new();
    for (class, mut idx) in by_class {
        let mut rng = factory.stream(&format!("rebalance:{class}"));
        let n = idx.len();
        for i in 0..min {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        keep.extend_from_slice(&idx[..min]);
    }
    Ok(keep_indices(manifest, keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{DatasetKind, ImageRef, Split};

    fn record(id: &str, text: &str) -> ExampleRecord {
        ExampleRecord {
            id: id.into(),
            split: Split::Train,
            image: Some(ImageRef::Ref(format!("scene:{id}"))),
            image_left: None,
            image_right: None,
            texts: vec![text.into()],
            confidences: None,
            class_label: None,
            gold_class: None,
        }
    }

    fn corpus(texts: &[&str]) -> Manifest {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| record(&format!("r{i:03}"), t))
            .collect();
        Manifest::new(DatasetKind::Captions, vec![], records).unwrap()
    }

    #[test]
    fn fraction_full_is_identity() {
        let m = corpus(&["a b", "c d e", "f"]);
        let s = subset_strategy("fraction").unwrap();
        let out = s.select(&m, &SubsetSpec::with_p(1.0, 0)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn fraction_size_is_rounded_product() {
        let texts: Vec<String> = (0..1000).map(|i| format!("word{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let m = corpus(&refs);
        let s = subset_strategy("fraction").unwrap();
        let out = s.select(&m, &SubsetSpec::with_p(0.05, 1)).unwrap();
        assert_eq!(out.len(), 50);
    }

    #[test]
    fn fraction_overlap_between_seeds_is_sane() {
        let texts: Vec<String> = (0..1000).map(|i| format!("word{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let m = corpus(&refs);
        let s = subset_strategy("fraction").unwrap();
        let a = s.select(&m, &SubsetSpec::with_p(0.05, 1)).unwrap();
        let b = s.select(&m, &SubsetSpec::with_p(0.05, 2)).unwrap();
        let ids_a: HashSet<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
        let overlap = b.records.iter().filter(|r| ids_a.contains(r.id.as_str())).count();
        // expectation is p^2 * N = 2.5; anything above ~12 means the samples
        // are correlated, identical samples would give 50
        assert!(overlap <= 12, "overlap {overlap}");
        assert_ne!(a.records, b.records);
    }

    #[test]
    fn min_length_picks_shortest() {
        let m = corpus(&["a b c", "a b c d e", "a b c d e f g"]);
        let s = subset_strategy("min_length").unwrap();
        let out = s.select(&m, &SubsetSpec::with_k(2, 0)).unwrap();
        let lens: Vec<usize> = out.records.iter().map(|r| record_tokens(r).len()).collect();
        assert_eq!(lens, vec![3, 5]);
    }

    #[test]
    fn length_extremes_match_exhaustive_enumeration() {
        // every size-k subset of a <= 12 record corpus
        let texts: Vec<String> = (0..12)
            .map(|i| (0..(i % 5) + 1).map(|j| format!("w{i}x{j}")).collect::<Vec<_>>().join(" "))
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let m = corpus(&refs);
        let lens: Vec<usize> = m.records.iter().map(|r| record_tokens(r).len()).collect();
        for k in [1usize, 3, 6] {
            let mut best_min = f64::INFINITY;
            let mut best_max = f64::NEG_INFINITY;
            for mask in 0u32..(1 << 12) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let sum: usize = (0..12).filter(|i| mask & (1 << i) != 0).map(|i| lens[i]).sum();
                let avg = sum as f64 / k as f64;
                best_min = best_min.min(avg);
                best_max = best_max.max(avg);
            }
            let got_min = subset_strategy("min_length")
                .unwrap()
                .select(&m, &SubsetSpec::with_k(k, 0))
                .unwrap();
            let got_max = subset_strategy("max_length")
                .unwrap()
                .select(&m, &SubsetSpec::with_k(k, 0))
                .unwrap();
            assert_eq!(average_length(&got_min), best_min, "k={k}");
            assert_eq!(average_length(&got_max), best_max, "k={k}");
        }
    }

    #[test]
    fn greedy_vocab_first_step_definition() {
        let m = corpus(&["p q r s", "a", "x y"]);
        let s = subset_strategy("min_vocab").unwrap();
        let spec = SubsetSpec { pool: 10, ..SubsetSpec::with_k(1, 0) };
        let out = s.select(&m, &spec).unwrap();
        assert_eq!(vocabulary_size(&out), 1, "k=1 min picks the fewest distinct tokens");
    }

    #[test]
    fn greedy_min_beats_random_and_max_beats_random() {
        // 30 records, exhaustive candidate pool
        let texts: Vec<String> = (0..30)
            .map(|i| {
                let shared = format!("common{} filler", i % 3);
                let unique: Vec<String> = (0..3).map(|j| format!("rare{i}x{j}")).collect();
                format!("{shared} {}", unique.join(" "))
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let m = corpus(&refs);
        let k = 10;
        let mut min_wins = 0;
        let mut max_wins = 0;
        for seed in 0..20u64 {
            let spec = |s| SubsetSpec { pool: 30, ..SubsetSpec::with_k(k, s) };
            let greedy_min = subset_strategy("min_vocab").unwrap().select(&m, &spec(seed)).unwrap();
            let greedy_max = subset_strategy("max_vocab").unwrap().select(&m, &spec(seed)).unwrap();
            let random = subset_strategy("fraction")
                .unwrap()
                .select(&m, &SubsetSpec { pool: 30, k: None, p: Some(k as f64 / 30.0), seed })
                .unwrap();
            if vocabulary_size(&greedy_min) <= vocabulary_size(&random) {
                min_wins += 1;
            }
            if vocabulary_size(&greedy_max) >= vocabulary_size(&random) {
                max_wins += 1;
            }
            assert!(
                vocabulary_size(&greedy_max) > vocabulary_size(&greedy_min),
                "max must exceed min on a lexically diverse corpus"
            );
        }
        assert!(min_wins >= 19, "greedy-min lost to random too often: {min_wins}/20");
        assert_eq!(max_wins, 20, "greedy-max must never lose to random");
    }

    #[test]
    fn greedy_vocab_is_deterministic() {
        let texts: Vec<String> = (0..25).map(|i| format!("a{i} b{} c", i % 4)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let m = corpus(&refs);
        let spec = SubsetSpec { pool: 7, ..SubsetSpec::with_k(6, 42) };
        let s = subset_strategy("max_vocab").unwrap();
        assert_eq!(s.select(&m, &spec).unwrap(), s.select(&m, &spec).unwrap());
    }

    #[test]
    fn k_larger_than_corpus_is_contract_error() {
        let m = corpus(&["a", "b"]);
        let s = subset_strategy("min_vocab").unwrap();
        assert!(s.select(&m, &SubsetSpec::with_k(3, 0)).is_err());
    }

    #[test]
    fn spec_requires_exactly_one_of_k_p() {
        assert!(SubsetSpec { k: Some(1), p: Some(0.5), pool: 1, seed: 0 }.validate().is_err());
        assert!(SubsetSpec { k: None, p: None, pool: 1, seed: 0 }.validate().is_err());
    }

    fn multi_label_record(id: &str, labels: &[(&str, f64)]) -> ExampleRecord {
        ExampleRecord {
            id: id.into(),
            split: Split::Train,
            image: Some(ImageRef::Ref(format!("scene:{id}"))),
            image_left: None,
            image_right: None,
            texts: labels.iter().map(|(l, _)| l.to_string()).collect(),
            confidences: Some(labels.iter().map(|(_, c)| *c).collect()),
            class_label: None,
            gold_class: None,
        }
    }

    #[test]
    fn restrict_labels_keeps_top_confidence() {
        let m = Manifest::new(
            DatasetKind::MultiLabel,
            vec![],
            vec![multi_label_record("a", &[("low", 0.2), ("high", 0.9), ("mid", 0.5)])],
        )
        .unwrap();
        let (out, unique) = restrict_labels(&m, 1).unwrap();
        assert_eq!(out.records[0].texts, vec!["high"]);
        assert_eq!(unique, 1);
    }

    #[test]
    fn restrict_labels_identity_when_max_exceeds_counts() {
        let m = Manifest::new(
            DatasetKind::MultiLabel,
            vec![],
            vec![multi_label_record("a", &[("x", 0.9), ("y", 0.4)])],
        )
        .unwrap();
        let (out, unique) = restrict_labels(&m, 10).unwrap();
        assert_eq!(out.records[0].texts.len(), 2);
        assert_eq!(unique, 2);
    }

    #[test]
    fn restrict_labels_unique_count_is_monotone() {
        let records: Vec<ExampleRecord> = (0..40)
            .map(|i| {
                multi_label_record(
                    &format!("r{i:02}"),
                    &[
                        (&format!("top{}", i % 3), 0.9),
                        (&format!("mid{}", i % 7), 0.6),
                        (&format!("low{i}"), 0.3),
                    ],
                )
            })
            .collect();
        let m = Manifest::new(DatasetKind::MultiLabel, vec![], records).unwrap();
        let mut prev = 0;
        for max_n in 1..=3 {
            let (_, unique) = restrict_labels(&m, max_n).unwrap();
            assert!(unique >= prev, "unique labels must be non-decreasing in max_n");
            prev = unique;
        }
        assert!(prev > restrict_labels(&m, 1).unwrap().1);
    }

    fn labeled(id: &str, class: &str) -> ExampleRecord {
        ExampleRecord {
            class_label: Some(class.into()),
            ..record(id, "some text")
        }
    }

    #[test]
    fn collapse_rewrites_mapped_classes() {
        let mapping: std::collections::HashMap<String, String> = [
            ("poodle".to_string(), "dog".to_string()),
            ("beagle".to_string(), "dog".to_string()),
        ]
        .into();
        let m = Manifest::new(
            DatasetKind::SingleLabel,
            vec![],
            vec![labeled("a", "poodle"), labeled("b", "beagle"), labeled("c", "cat")],
        )
        .unwrap();
        let out = collapse_classes(&m, &mapping);
        let classes: Vec<&str> = out
            .records
            .iter()
            .map(|r| r.class_label.as_deref().unwrap())
            .collect();
        assert_eq!(classes, vec!["dog", "dog", "cat"]);
    }

    #[test]
    fn collapse_with_empty_mapping_is_identity() {
        let m = Manifest::new(DatasetKind::SingleLabel, vec![], vec![labeled("a", "poodle")])
            .unwrap();
        assert_eq!(collapse_classes(&m, &Default::default()), m);
    }

    #[test]
    fn rebalance_equalizes_class_counts() {
        let mut records = Vec::new();
        for i in 0..9 {
            records.push(labeled(&format!("d{i}"), "dog"));
        }
        for i in 0..4 {
            records.push(labeled(&format!("c{i}"), "cat"));
        }
        let m = Manifest::new(DatasetKind::SingleLabel, vec![], records).unwrap();
        let out = rebalance(&m, 5).unwrap();
        let dogs = out.records.iter().filter(|r| r.class_label.as_deref() == Some("dog")).count();
        let cats = out.records.iter().filter(|r| r.class_label.as_deref() == Some("cat")).count();
        assert_eq!(dogs, 4);
        assert_eq!(cats, 4);
        assert_eq!(rebalance(&m, 5).unwrap(), out, "deterministic under seed");
    }
}
