//! Parameter groups with per-group peak learning rates.
//!
//! Pretraining distinguishes pretrained vs freshly initialized weights;
//! finetuning uses the three-way split into unimodal encoders, the
//! cross-modal transformer (projections + fusion stack), and the
//! classifier head, with per-task default rates.

use serde::{Deserialize, Serialize};

use vl_core::nn::ParamStore;

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Pretrained,
    Fresh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub kind: GroupKind,
    pub peak_lr: f64,
    pub paths: Vec<String>,
}

/// Peak learning rates, either by initialization status (pretraining) or by
/// model region (finetuning).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LrTable {
    Pretrain { pretrained: f64, fresh: f64 },
    Finetune { encoders: f64, cross_modal: f64, head: f64 },
}

/// Pretraining defaults: pretrained weights step slower than fresh ones.
pub const PRETRAIN_DEFAULT: LrTable = LrTable::Pretrain { pretrained: 1e-4, fresh: 5e-4 };

/// Per-task finetuning defaults, before any bimodal pretraining.
pub fn finetune_defaults_before(task: &str) -> Option<LrTable> {
    match task {
        "vqav2" => Some(LrTable::Finetune { encoders: 2e-5, cross_modal: 2e-4, head: 2e-4 }),
        "gqa" => Some(LrTable::Finetune { encoders: 1e-5, cross_modal: 1e-4, head: 1e-4 }),
        "nlvr2" => Some(LrTable::Finetune { encoders: 1e-5, cross_modal: 1e-4, head: 1e-4 }),
        _ => None,
    }
}

/// Per-task finetuning defaults, after bimodal pretraining.
pub fn finetune_defaults_after(task: &str) -> Option<LrTable> {
    match task {
        "vqav2" => Some(LrTable::Finetune { encoders: 2e-5, cross_modal: 1e-4, head: 1e-3 }),
        "gqa" => Some(LrTable::Finetune { encoders: 1e-5, cross_modal: 1e-4, head: 1e-4 }),
        "nlvr2" => Some(LrTable::Finetune { encoders: 1e-5, cross_modal: 5e-5, head: 5e-4 }),
        _ => None,
    }
}

fn region_of(path: &str) -> Option<&'static str> {
    if path.starts_with("text.") || path.starts_with("image.") {
        Some("encoders")
    } else if path.starts_with("proj.") || path.starts_with("fusion.") {
        Some("cross_modal")
    } else if path.starts_with("head.") || path.starts_with("proxy.") {
        Some("head")
    } else {
        None
    }
}

/// Partitions every parameter into exactly one group.
pub fn make_param_groups(store: &ParamStore, table: &LrTable) -> Result<Vec<ParamGroup>> {
    let groups = match table {
        LrTable::Pretrain { pretrained, fresh } => {
            let mut pre = Vec::new();
            let mut fr = Vec::new();
            for (path, p) in store.iter() {
                if p.pretrained {
                    pre.push(path.clone());
                } else {
                    fr.push(path.clone());
                }
            }
            let mut out = Vec::new();
            if !pre.is_empty() {
                out.push(ParamGroup {
                    name: "pretrained".into(),
                    kind: GroupKind::Pretrained,
                    peak_lr: *pretrained,
                    paths: pre,
                });
            }
            if !fr.is_empty() {
                out.push(ParamGroup {
                    name: "fresh".into(),
                    kind: GroupKind::Fresh,
                    peak_lr: *fresh,
                    paths: fr,
                });
            }
            out
        }
        LrTable::Finetune { encoders, cross_modal, head } => {
            let mut buckets: [(&str, f64, Vec<String>); 3] = [
                ("encoders", *encoders, Vec::new()),
                ("cross_modal", *cross_modal, Vec::new()),
                ("head", *head, Vec::new()),
            ];
            for (path, _) in store.iter() {
                let region = region_of(path).ok_or_else(|| {
                    TrainError::Config(format!("parameter {path} not covered by any group"))
                })?;
                buckets
                    .iter_mut()
                    .find(|(name, _, _)| *name == region)
                    .unwrap()
                    .2
                    .push(path.clone());
            }
            buckets
                .into_iter()
                .filter(|(_, _, paths)| !paths.is_empty())
                .map(|(name, peak_lr, paths)| {
                    let all_pretrained = paths.iter().all(|p| store.get(p).pretrained);
                    ParamGroup {
                        name: name.into(),
                        kind: if all_pretrained { GroupKind::Pretrained } else { GroupKind::Fresh },
                        peak_lr,
                        paths,
                    }
                })
                .collect()
        }
    };

    // partition check: every parameter in exactly one group
    let mut seen = std::collections::HashSet::new();
    for g in &groups {
        for p in &g.paths {
            if !seen.insert(p.clone()) {
                return Err(TrainError::Config(format!("parameter {p} is in two groups")));
            }
        }
    }
    if seen.len() != store.len() {
        return Err(TrainError::Config(format!(
            "groups cover {} of {} parameters",
            seen.len(),
            store.len()
        )));
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vl_core::nn::InitScheme;
    use vl_core::SeededRng;

    fn store_with(paths: &[&str]) -> ParamStore {
        let f = SeededRng::new(0);
        let mut s = ParamStore::new();
        for p in paths {
            s.init(&f, p, vec![2], InitScheme::Zeros);
        }
        s
    }

    #[test]
    fn nlvr2_after_pretraining_rates() {
        let t = finetune_defaults_after("nlvr2").unwrap();
        assert_eq!(t, LrTable::Finetune { encoders: 1e-5, cross_modal: 5e-5, head: 5e-4 });
    }

    #[test]
    fn vqav2_tables_match_both_regimes() {
        assert_eq!(
            finetune_defaults_before("vqav2").unwrap(),
            LrTable::Finetune { encoders: 2e-5, cross_modal: 2e-4, head: 2e-4 }
        );
        assert_eq!(
            finetune_defaults_after("vqav2").unwrap(),
            LrTable::Finetune { encoders: 2e-5, cross_modal: 1e-4, head: 1e-3 }
        );
    }

    #[test]
    fn no_pretrained_flags_gives_single_fresh_group() {
        let store = store_with(&["text.tok", "head.mlm.w"]);
        let groups = make_param_groups(&store, &PRETRAIN_DEFAULT).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].kind, GroupKind::Fresh);
        assert_eq!(groups[0].paths.len(), 2);
    }

    #[test]
    fn pretrain_partition_by_flag() {
        let mut store = store_with(&["text.tok", "image.cls", "head.mlm.w"]);
        store.mark_pretrained("text.");
        store.mark_pretrained("image.");
        let groups = make_param_groups(&store, &PRETRAIN_DEFAULT).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].name, "pretrained");
        assert_eq!(groups[0].paths.len(), 2);
        assert_eq!(groups[1].paths, vec!["head.mlm.w"]);
    }

    #[test]
    fn finetune_partition_covers_all_regions() {
        let store = store_with(&[
            "text.tok",
            "image.patch.w",
            "proj.txt.w",
            "fusion.txt.layer0.self.q.w",
            "head.cls.fc1.w",
        ]);
        let table = finetune_defaults_after("nlvr2").unwrap();
        let groups = make_param_groups(&store, &table).unwrap();
        let total: usize = groups.iter().map(|g| g.paths.len()).sum();
        assert_eq!(total, store.len());
        let enc = groups.iter().find(|g| g.name == "encoders").unwrap();
        assert_eq!(enc.paths.len(), 2);
    }

    #[test]
    fn uncovered_path_is_an_error() {
        let store = store_with(&["mystery.w"]);
        let table = finetune_defaults_before("gqa").unwrap();
        assert!(make_param_groups(&store, &table).is_err());
    }
}
