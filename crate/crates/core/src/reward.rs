//! The reward engine: normalization plus the five reward families, each
//! producing a scalar in `[0, 1]` together with the match evidence behind it.
//!
//! Reward families by task kind:
//!
//! | kind                | rule                                             |
//! |---------------------|--------------------------------------------------|
//! | `single_id`         | exact match after normalization                  |
//! | `attack_technique`  | exact 1.0, base-technique-only match 0.5, else 0 |
//! | `id_set`            | set F1: `2|P∩T| / (|P|+|T|)`                     |
//! | `cvss_vector`       | `1 − |s(pred) − s(gold)| / 10` on base scores    |
//! | `actor_attribution` | any normalized candidate hits the alias set      |

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cvss::{cvss_base_score, parse_cvss};
use crate::extract::{extract, ids_in_span, ExtractedAnswer, ExtractionMode};
use crate::task::{AliasTable, Catalog, GoldLabel, TaskInstance, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("gold actor {0} is not present in the alias table")]
    ActorNotInTable(String),
    #[error("actor task {uid} scored without an alias table")]
    MissingAliasTable { uid: String },
    #[error("gold label does not fit task kind {kind:?} for uid {uid}")]
    GoldKindMismatch { uid: String, kind: TaskKind },
    #[error("empty input: {0}")]
    EmptyInput(String),
}

/// Why a reward took the value it did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    ExactMatch,
    BaseTechniqueHalf,
    SetOverlap {
        intersection: usize,
        pred_size: usize,
        gold_size: usize,
    },
    CvssDistance {
        #[serde(serialize_with = "ser_one_dp", deserialize_with = "de_dp")]
        pred_score: f64,
        #[serde(serialize_with = "ser_one_dp", deserialize_with = "de_dp")]
        gold_score: f64,
    },
    AliasHit {
        matched_alias: String,
    },
    ParseFailure,
    NoMatch,
}

/// Scalar reward in `[0, 1]` plus the evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    #[serde(serialize_with = "ser_six_dp", deserialize_with = "de_dp")]
    pub reward: f64,
    pub evidence: Evidence,
}

// Fixed-point decimal renderings keep golden files stable: six decimals for
// rewards, one for CVSS scores.
fn ser_six_dp<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&format_args!("{v:.6}"))
}

fn ser_one_dp<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&format_args!("{v:.1}"))
}

fn de_dp<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let text = String::deserialize(d)?;
    text.parse().map_err(serde::de::Error::custom)
}

impl RewardReport {
    fn parse_failure() -> Self {
        RewardReport {
            reward: 0.0,
            evidence: Evidence::ParseFailure,
        }
    }
}

/// Canonicalizes an identifier: trim, uppercase, and zero-pad a technique
/// sub-suffix to three digits (`T1059.3` -> `T1059.003`). Idempotent.
pub fn norm_id(id: &str) -> String {
    let upper = id.trim().to_ascii_uppercase();
    if let Some((base, suffix)) = upper.split_once('.') {
        let base_ok = base.len() == 5
            && base.starts_with('T')
            && base[1..].bytes().all(|b| b.is_ascii_digit());
        let suffix_ok = (1..=3).contains(&suffix.len())
            && suffix.bytes().all(|b| b.is_ascii_digit());
        if base_ok && suffix_ok {
            return format!("{base}.{suffix:0>3}");
        }
    }
    upper
}

/// Normalizes an actor mention: lowercase, each run of non-alphanumeric
/// characters collapsed to a single space, trimmed. Idempotent.
pub fn norm_actor(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_space = false;
    for ch in name.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Base technique without the sub-technique suffix.
fn base_technique(id: &str) -> &str {
    id.split_once('.').map_or(id, |(base, _)| base)
}

fn has_subtechnique(id: &str) -> bool {
    id.contains('.')
}

fn first_valid_id(pred: &ExtractedAnswer, catalog: Option<&Catalog>) -> Option<String> {
    pred.ids
        .iter()
        .map(|raw| norm_id(raw))
        .find(|id| catalog.map_or(true, |c| !c.rejects(id)))
}

/// Exact-match reward for single canonical identifiers.
pub fn reward_exact(
    pred: Option<&ExtractedAnswer>,
    gold: &str,
    catalog: Option<&Catalog>,
) -> RewardReport {
    let Some(pred) = pred else {
        return RewardReport::parse_failure();
    };
    let Some(pred_id) = first_valid_id(pred, catalog) else {
        return RewardReport::parse_failure();
    };
    if pred_id == norm_id(gold) {
        RewardReport {
            reward: 1.0,
            evidence: Evidence::ExactMatch,
        }
    } else {
        RewardReport {
            reward: 0.0,
            evidence: Evidence::NoMatch,
        }
    }
}

/// Technique reward with half credit when prediction and target share the
/// base technique but differ only in sub-technique specificity.
pub fn reward_technique(
    pred: Option<&ExtractedAnswer>,
    gold: &str,
    catalog: Option<&Catalog>,
) -> RewardReport {
    let Some(pred) = pred else {
        return RewardReport::parse_failure();
    };
    let Some(pred_id) = first_valid_id(pred, catalog) else {
        return RewardReport::parse_failure();
    };
    let gold_id = norm_id(gold);
    if pred_id == gold_id {
        return RewardReport {
            reward: 1.0,
            evidence: Evidence::ExactMatch,
        };
    }
    if base_technique(&pred_id) == base_technique(&gold_id)
        && (has_subtechnique(&pred_id) || has_subtechnique(&gold_id))
    {
        return RewardReport {
            reward: 0.5,
            evidence: Evidence::BaseTechniqueHalf,
        };
    }
    RewardReport {
        reward: 0.0,
        evidence: Evidence::NoMatch,
    }
}

/// Normalized prediction set: grammar-valid ids only, deduped by set
/// construction, catalog-filtered when a catalog is present.
fn prediction_set(pred: &ExtractedAnswer, catalog: Option<&Catalog>) -> BTreeSet<String> {
    pred.ids
        .iter()
        .map(|raw| norm_id(raw))
        .filter(|id| catalog.map_or(true, |c| !c.rejects(id)))
        .collect()
}

/// Set-F1 reward for multi-label identifier sets.
pub fn reward_set_f1(
    pred: Option<&ExtractedAnswer>,
    gold: &BTreeSet<String>,
    catalog: Option<&Catalog>,
) -> RewardReport {
    let Some(pred) = pred else {
        return RewardReport::parse_failure();
    };
    let pred_set = prediction_set(pred, catalog);
    let gold_set: BTreeSet<String> = gold.iter().map(|id| norm_id(id)).collect();
    let intersection = pred_set.intersection(&gold_set).count();
    let evidence = Evidence::SetOverlap {
        intersection,
        pred_size: pred_set.len(),
        gold_size: gold_set.len(),
    };
    let reward = match (pred_set.is_empty(), gold_set.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => 2.0 * intersection as f64 / (pred_set.len() + gold_set.len()) as f64,
    };
    RewardReport { reward, evidence }
}

/// CVSS reward: parse the predicted vector, then score by base-score
/// distance, `1 − |s(pred) − s(gold)| / 10`.
pub fn reward_cvss(pred: Option<&ExtractedAnswer>, gold: &crate::cvss::CvssVector) -> RewardReport {
    let Some(pred) = pred else {
        return RewardReport::parse_failure();
    };
    // The longest vector token in the span is the prediction.
    let Some(token) = pred.ids.iter().max_by_key(|t| t.len()) else {
        return RewardReport::parse_failure();
    };
    let Ok(vector) = parse_cvss(token) else {
        return RewardReport::parse_failure();
    };
    let pred_score = cvss_base_score(&vector);
    let gold_score = cvss_base_score(gold);
    let reward = (1.0 - (pred_score - gold_score).abs() / 10.0).max(0.0);
    RewardReport {
        reward,
        evidence: Evidence::CvssDistance {
            pred_score,
            gold_score,
        },
    }
}

/// Actor reward: the answer span is split on commas/semicolons and each
/// normalized candidate is checked against the gold actor's alias set.
pub fn reward_actor(
    pred: Option<&ExtractedAnswer>,
    gold: &str,
    table: &AliasTable,
) -> Result<RewardReport, RewardError> {
    let aliases = table
        .aliases(gold)
        .ok_or_else(|| RewardError::ActorNotInTable(gold.to_string()))?;
    let Some(pred) = pred else {
        return Ok(RewardReport::parse_failure());
    };
    let candidates: BTreeSet<String> = pred
        .span
        .split([',', ';'])
        .map(norm_actor)
        .filter(|c| !c.is_empty())
        .collect();
    if candidates.is_empty() {
        return Ok(RewardReport::parse_failure());
    }
    for alias in aliases {
        if candidates.contains(&norm_actor(alias)) {
            return Ok(RewardReport {
                reward: 1.0,
                evidence: Evidence::AliasHit {
                    matched_alias: alias.clone(),
                },
            });
        }
    }
    Ok(RewardReport {
        reward: 0.0,
        evidence: Evidence::NoMatch,
    })
}

/// Evaluation-suite aggregate for CVSS prediction: `1 − MAD/7.7` over
/// (pred, gold) base-score pairs. Distinct from the per-instance reward.
pub fn vsp_eval_score(pairs: &[(f64, f64)]) -> Result<f64, RewardError> {
    if pairs.is_empty() {
        return Err(RewardError::EmptyInput("vsp score needs pairs".into()));
    }
    let mad = pairs
        .iter()
        .map(|(pred, gold)| (pred - gold).abs())
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(1.0 - mad / 7.7)
}

/// Extraction plus reward for one completion against one instance: the full
/// verifier. Dispatch is total over `TaskKind`.
pub fn score_completion(
    instance: &TaskInstance,
    completion: &str,
    mode: ExtractionMode,
    aliases: Option<&AliasTable>,
    catalog: Option<&Catalog>,
) -> Result<(RewardReport, Option<ExtractedAnswer>), RewardError> {
    let pred = extract(completion, instance.kind, mode);
    let report = match (&instance.gold, instance.kind) {
        (GoldLabel::Id(gold), TaskKind::SingleId) => reward_exact(pred.as_ref(), gold, catalog),
        (GoldLabel::Id(gold), TaskKind::AttackTechnique) => {
            reward_technique(pred.as_ref(), gold, catalog)
        }
        (GoldLabel::IdSet(gold), TaskKind::IdSet) => reward_set_f1(pred.as_ref(), gold, catalog),
        (GoldLabel::Cvss(gold), TaskKind::CvssVector) => reward_cvss(pred.as_ref(), gold),
        (GoldLabel::Actor(gold), TaskKind::ActorAttribution) => {
            let table = aliases.ok_or_else(|| RewardError::MissingAliasTable {
                uid: instance.uid.clone(),
            })?;
            reward_actor(pred.as_ref(), gold, table)?
        }
        (_, kind) => {
            return Err(RewardError::GoldKindMismatch {
                uid: instance.uid.clone(),
                kind,
            })
        }
    };
    Ok((report, pred))
}

/// Convenience used by the loop: score a raw answer string (not a full
/// completion) as if it had been extracted. The span is the answer itself.
pub fn score_answer_text(
    instance: &TaskInstance,
    answer: &str,
    aliases: Option<&AliasTable>,
    catalog: Option<&Catalog>,
) -> Result<RewardReport, RewardError> {
    let pred = ExtractedAnswer {
        span: answer.to_string(),
        ids: ids_in_span(answer, instance.kind),
        source: crate::extract::AnswerSource::Boxed,
    };
    let report = match (&instance.gold, instance.kind) {
        (GoldLabel::Id(gold), TaskKind::SingleId) => reward_exact(Some(&pred), gold, catalog),
        (GoldLabel::Id(gold), TaskKind::AttackTechnique) => {
            reward_technique(Some(&pred), gold, catalog)
        }
        (GoldLabel::IdSet(gold), TaskKind::IdSet) => reward_set_f1(Some(&pred), gold, catalog),
        (GoldLabel::Cvss(gold), TaskKind::CvssVector) => reward_cvss(Some(&pred), gold),
        (GoldLabel::Actor(gold), TaskKind::ActorAttribution) => {
            let table = aliases.ok_or_else(|| RewardError::MissingAliasTable {
                uid: instance.uid.clone(),
            })?;
            reward_actor(Some(&pred), gold, table)?
        }
        (_, kind) => {
            return Err(RewardError::GoldKindMismatch {
                uid: instance.uid.clone(),
                kind,
            })
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::AnswerSource;
    use proptest::prelude::*;

    fn answer(span: &str, kind: TaskKind) -> ExtractedAnswer {
        ExtractedAnswer {
            span: span.to_string(),
            ids: ids_in_span(span, kind),
            source: AnswerSource::Boxed,
        }
    }

    #[test]
    fn norm_id_pads_subtechnique_suffix() {
        assert_eq!(norm_id("T1059.3"), "T1059.003");
        assert_eq!(norm_id(" cwe-79 "), "CWE-79");
        assert_eq!(norm_id("T1059"), "T1059");
        assert_eq!(norm_id("t1059.03"), "T1059.003");
    }

    #[test]
    fn norm_actor_examples() {
        assert_eq!(norm_actor("APT-28"), "apt 28");
        assert_eq!(norm_actor("fancybear"), "fancybear");
        assert_eq!(norm_actor("  Lazarus   Group "), "lazarus group");
    }

    proptest! {
        #[test]
        fn norm_id_is_idempotent(s in "[A-Za-z0-9.\\- ]{0,16}") {
            prop_assert_eq!(norm_id(&norm_id(&s)), norm_id(&s));
        }

        #[test]
        fn norm_actor_is_idempotent(s in ".{0,24}") {
            prop_assert_eq!(norm_actor(&norm_actor(&s)), norm_actor(&s));
        }

        #[test]
        fn set_f1_is_symmetric(
            p in proptest::collection::btree_set(0usize..6, 0..5),
            t in proptest::collection::btree_set(0usize..6, 0..5),
        ) {
            let ids: Vec<String> = (0..6).map(|i| format!("CWE-{i}")).collect();
            let to_set = |s: &std::collections::BTreeSet<usize>| -> BTreeSet<String> {
                s.iter().map(|&i| ids[i].clone()).collect()
            };
            let as_answer = |s: &BTreeSet<String>| ExtractedAnswer {
                span: s.iter().cloned().collect::<Vec<_>>().join(", "),
                ids: s.iter().cloned().collect(),
                source: AnswerSource::Boxed,
            };
            let (ps, ts) = (to_set(&p), to_set(&t));
            let ab = reward_set_f1(Some(&as_answer(&ps)), &ts, None).reward;
            let ba = reward_set_f1(Some(&as_answer(&ts)), &ps, None).reward;
            prop_assert_eq!(ab, ba);
        }
    }

    #[test]
    fn exact_match_family() {
        let gold = "CAPEC-66";
        assert_eq!(
            reward_exact(Some(&answer("CAPEC-66", TaskKind::SingleId)), gold, None).reward,
            1.0
        );
        assert_eq!(
            reward_exact(Some(&answer("capec-66", TaskKind::SingleId)), gold, None).reward,
            1.0
        );
        assert_eq!(
            reward_exact(Some(&answer("CAPEC-63", TaskKind::SingleId)), gold, None).reward,
            0.0
        );
        assert_eq!(
            reward_exact(None, gold, None).evidence,
            Evidence::ParseFailure
        );
    }

    #[test]
    fn technique_grading_trichotomy() {
        let gold = "T1059.003";
        let full = reward_technique(
            Some(&answer("T1059.003", TaskKind::AttackTechnique)),
            gold,
            None,
        );
        assert_eq!((full.reward, full.evidence), (1.0, Evidence::ExactMatch));
        let half = reward_technique(Some(&answer("T1059", TaskKind::AttackTechnique)), gold, None);
        assert_eq!(
            (half.reward, half.evidence),
            (0.5, Evidence::BaseTechniqueHalf)
        );
        let miss = reward_technique(Some(&answer("T1027", TaskKind::AttackTechnique)), gold, None);
        assert_eq!((miss.reward, miss.evidence), (0.0, Evidence::NoMatch));
        // Both bare: exact branch, not the half branch.
        assert_eq!(
            reward_technique(Some(&answer("T1059", TaskKind::AttackTechnique)), "T1059", None)
                .reward,
            1.0
        );
        // Both sub-techniques under one base: specificity does not differ.
        assert_eq!(
            reward_technique(
                Some(&answer("T1059.001", TaskKind::AttackTechnique)),
                gold,
                None
            )
            .reward,
            0.5
        );
    }

    #[test]
    fn set_f1_branches() {
        let empty = BTreeSet::new();
        let gold: BTreeSet<String> = ["CWE-79", "CWE-89"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            reward_set_f1(Some(&answer("none here", TaskKind::IdSet)), &empty, None).reward,
            1.0
        );
        assert_eq!(
            reward_set_f1(Some(&answer("TA0001", TaskKind::IdSet)), &empty, None).reward,
            0.0
        );
        let partial = reward_set_f1(Some(&answer("CWE-79", TaskKind::IdSet)), &gold, None);
        assert_eq!(partial.reward, 2.0 / 3.0);
        assert_eq!(
            partial.evidence,
            Evidence::SetOverlap {
                intersection: 1,
                pred_size: 1,
                gold_size: 2
            }
        );
        // Duplicates removed by set construction.
        assert_eq!(
            reward_set_f1(
                Some(&answer("CWE-79, cwe-79, CWE-89", TaskKind::IdSet)),
                &gold,
                None
            )
            .reward,
            1.0
        );
    }

    #[test]
    fn set_f1_matches_bitmask_oracle() {
        // Exhaustive recomputation over all |P|,|T| <= 4 subsets of a 6-ID
        // universe, enumerated as bitmasks.
        let ids: Vec<String> = (0..6).map(|i| format!("CWE-{}", 70 + i)).collect();
        for p_mask in 0u32..64 {
            if p_mask.count_ones() > 4 {
                continue;
            }
            for t_mask in 0u32..64 {
                if t_mask.count_ones() > 4 {
                    continue;
                }
                let pick = |mask: u32| -> BTreeSet<String> {
                    (0..6)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| ids[i as usize].clone())
                        .collect()
                };
                let (p, t) = (pick(p_mask), pick(t_mask));
                let span = p.iter().cloned().collect::<Vec<_>>().join(" ");
                let got = reward_set_f1(Some(&answer(&span, TaskKind::IdSet)), &t, None).reward;
                let inter = (p_mask & t_mask).count_ones() as f64;
                let expected = if p_mask == 0 && t_mask == 0 {
                    1.0
                } else if p_mask == 0 || t_mask == 0 {
                    0.0
                } else {
                    2.0 * inter / (p_mask.count_ones() + t_mask.count_ones()) as f64
                };
                assert_eq!(got, expected, "P={p:?} T={t:?}");
            }
        }
    }

    #[test]
    fn cvss_reward_distance() {
        let gold = parse_cvss("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap();
        let exact = reward_cvss(
            Some(&answer(
                "CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H",
                TaskKind::CvssVector,
            )),
            &gold,
        );
        assert_eq!(exact.reward, 1.0);
        let fail = reward_cvss(Some(&answer("no vector", TaskKind::CvssVector)), &gold);
        assert_eq!((fail.reward, fail.evidence), (0.0, Evidence::ParseFailure));
        let bad_version = reward_cvss(
            Some(&answer(
                "CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H",
                TaskKind::CvssVector,
            )),
            &gold,
        );
        assert_eq!(bad_version.evidence, Evidence::ParseFailure);
    }

    #[test]
    fn cvss_reward_monotone_in_score_distance() {
        let gold = parse_cvss("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap();
        let preds = [
            "CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H",
            "CVSS:3.1/AV:N/AC:L/PR:L/UI:N/S:U/C:H/I:H/A:H",
            "CVSS:3.1/AV:L/AC:H/PR:H/UI:R/S:U/C:L/I:N/A:N",
            "CVSS:3.1/AV:P/AC:H/PR:H/UI:R/S:U/C:N/I:N/A:N",
        ];
        let mut last = f64::INFINITY;
        for pred in preds {
            let r = reward_cvss(Some(&answer(pred, TaskKind::CvssVector)), &gold).reward;
            assert!(r <= last, "{pred}");
            assert!((0.0..=1.0).contains(&r));
            last = r;
        }
    }

    #[test]
    fn actor_reward_alias_intersection() {
        let mut table = AliasTable::new();
        table.insert("FancyBear", &["APT28", "Sofacy"]);
        let hit = reward_actor(
            Some(&answer("APT28; Sofacy", TaskKind::ActorAttribution)),
            "FancyBear",
            &table,
        )
        .unwrap();
        assert_eq!(hit.reward, 1.0);
        assert!(matches!(hit.evidence, Evidence::AliasHit { .. }));
        let canonical = reward_actor(
            Some(&answer("FancyBear", TaskKind::ActorAttribution)),
            "FancyBear",
            &table,
        )
        .unwrap();
        assert_eq!(canonical.reward, 1.0);
        let miss = reward_actor(
            Some(&answer("Lazarus", TaskKind::ActorAttribution)),
            "FancyBear",
            &table,
        )
        .unwrap();
        assert_eq!(miss.reward, 0.0);
        assert!(reward_actor(None, "Unlisted", &table).is_err());
    }

    #[test]
    fn vsp_eval_score_formula() {
        assert_eq!(vsp_eval_score(&[(9.8, 9.8), (5.0, 5.0)]).unwrap(), 1.0);
        assert_eq!(vsp_eval_score(&[(0.0, 7.7)]).unwrap(), 0.0);
        let got = vsp_eval_score(&[(5.0, 5.0), (3.0, 5.0)]).unwrap();
        assert!((got - (1.0 - 1.0 / 7.7)).abs() < 1e-12);
        assert!(vsp_eval_score(&[]).is_err());
    }

    #[test]
    fn dispatch_is_total_over_task_kinds() {
        let mut table = AliasTable::new();
        table.insert("FancyBear", &["APT28"]);
        for kind in TaskKind::ALL {
            let (gold, completion) = match kind {
                TaskKind::SingleId => (GoldLabel::Id("CAPEC-66".into()), "\\boxed{CAPEC-66}"),
                TaskKind::AttackTechnique => {
                    (GoldLabel::Id("T1059.003".into()), "\\boxed{T1059.003}")
                }
                TaskKind::IdSet => (
                    GoldLabel::IdSet(["CWE-79".to_string()].into_iter().collect()),
                    "\\boxed{CWE-79}",
                ),
                TaskKind::CvssVector => (
                    GoldLabel::Cvss(
                        parse_cvss("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap(),
                    ),
                    "\\boxed{CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H}",
                ),
                TaskKind::ActorAttribution => {
                    (GoldLabel::Actor("FancyBear".into()), "\\boxed{APT28}")
                }
            };
            let instance = TaskInstance {
                uid: format!("k-{kind:?}"),
                kind,
                prompt: "p".into(),
                gold,
                label_details: None,
            };
            let (report, _) = score_completion(
                &instance,
                completion,
                ExtractionMode::Strict,
                Some(&table),
                None,
            )
            .unwrap();
            assert_eq!(report.reward, 1.0, "kind {kind:?}");
        }
    }

    #[test]
    fn catalog_filters_invalid_ids() {
        let mut catalog = Catalog::default();
        catalog.valid_cwes.insert("CWE-79".into());
        let gold: BTreeSet<String> = ["CWE-79".to_string()].into_iter().collect();
        // CWE-9999 not in catalog: discarded, leaving a perfect set.
        let r = reward_set_f1(
            Some(&answer("CWE-79, CWE-9999", TaskKind::IdSet)),
            &gold,
            Some(&catalog),
        );
        assert_eq!(r.reward, 1.0);
        // Single-id: a catalog-rejected prediction is a parse failure.
        let r = reward_exact(
            Some(&answer("CWE-9999", TaskKind::SingleId)),
            "CWE-79",
            Some(&catalog),
        );
        assert_eq!(r.evidence, Evidence::ParseFailure);
    }

    #[test]
    fn reward_always_in_unit_interval() {
        let gold = parse_cvss("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap();
        let spans = [
            "\\boxed{CVSS:3.1/AV:P/AC:H/PR:H/UI:R/S:U/C:N/I:N/A:N}",
            "\\boxed{CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:C/C:H/I:H/A:H}",
            "garbage",
        ];
        for span in spans {
            let r = reward_cvss(Some(&answer(span, TaskKind::CvssVector)), &gold);
            assert!((0.0..=1.0).contains(&r.reward));
        }
    }

    #[test]
    fn report_serializes_fixed_point_decimals() {
        let report = RewardReport {
            reward: 2.0 / 3.0,
            evidence: Evidence::CvssDistance {
                pred_score: 5.0,
                gold_score: 9.8,
            },
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"reward\":\"0.666667\""), "{json}");
        assert!(json.contains("\"pred_score\":\"5.0\""), "{json}");
        assert!(json.contains("\"gold_score\":\"9.8\""), "{json}");
    }
}
