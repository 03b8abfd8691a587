//! Task instances and the JSONL dataset format consumed by the scorer,
//! the filter pipeline, and the loop simulator.
//!
//! A dataset file is newline-delimited JSON, one instance per line:
//!
//! ```text
//! {"uid":"t-001","kind":"attack_technique","prompt":"...","gold":"T1059.003"}
//! {"uid":"t-002","kind":"id_set","prompt":"...","gold":["CWE-79","CWE-89"]}
//! ```
//!
//! `gold` is a string for single-label kinds (including the CVSS vector
//! string and the canonical actor name) and an array for `id_set`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cvss::{parse_cvss, CvssVector};
use crate::reward::{norm_actor, norm_id};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid {field}: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate uid {uid} at line {line}")]
    DuplicateUid { line: usize, uid: String },
}

/// Task family; fixes which reward function applies to a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Single canonical identifier, exact match (CAPEC, CWE, tactic, ...).
    SingleId,
    /// ATT&CK technique with sub-technique half credit.
    AttackTechnique,
    /// Set-valued identifier target scored with set F1.
    IdSet,
    /// CVSS v3.1 base vector scored by base-score distance.
    CvssVector,
    /// Threat-actor attribution scored against an alias set.
    ActorAttribution,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::SingleId,
        TaskKind::AttackTechnique,
        TaskKind::IdSet,
        TaskKind::CvssVector,
        TaskKind::ActorAttribution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SingleId => "single_id",
            TaskKind::AttackTechnique => "attack_technique",
            TaskKind::IdSet => "id_set",
            TaskKind::CvssVector => "cvss_vector",
            TaskKind::ActorAttribution => "actor_attribution",
        }
    }
}

/// Ground-truth label for one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum GoldLabel {
    Id(String),
    IdSet(BTreeSet<String>),
    Cvss(CvssVector),
    Actor(String),
}

impl GoldLabel {
    /// The label rendered the way a model is expected to answer it.
    pub fn answer_text(&self) -> String {
        match self {
            GoldLabel::Id(id) => id.clone(),
            GoldLabel::IdSet(ids) => ids.iter().cloned().collect::<Vec<_>>().join(", "),
            GoldLabel::Cvss(v) => v.to_vector_string(),
            GoldLabel::Actor(name) => name.clone(),
        }
    }

    /// One string per gold label, for label-revealing prompt blocks.
    pub fn label_lines(&self) -> Vec<String> {
        match self {
            GoldLabel::IdSet(ids) => ids.iter().cloned().collect(),
            other => vec![other.answer_text()],
        }
    }
}

/// One prompt/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub uid: String,
    pub kind: TaskKind,
    pub prompt: String,
    pub gold: GoldLabel,
    pub label_details: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    uid: String,
    kind: TaskKind,
    prompt: String,
    gold: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_details: Option<String>,
}

fn gold_from_value(kind: TaskKind, value: &serde_json::Value) -> Result<GoldLabel, String> {
    match kind {
        TaskKind::SingleId | TaskKind::AttackTechnique => {
            let id = value.as_str().ok_or("expected a string gold label")?;
            if id.trim().is_empty() {
                return Err("empty identifier".into());
            }
            Ok(GoldLabel::Id(norm_id(id)))
        }
        TaskKind::IdSet => {
            let arr = value.as_array().ok_or("expected an array gold label")?;
            let mut set = BTreeSet::new();
            for item in arr {
                let id = item.as_str().ok_or("expected string array elements")?;
                set.insert(norm_id(id));
            }
            if set.is_empty() {
                return Err("id_set gold must be non-empty".into());
            }
            Ok(GoldLabel::IdSet(set))
        }
        TaskKind::CvssVector => {
            let text = value.as_str().ok_or("expected a CVSS vector string")?;
            let vector = parse_cvss(text).map_err(|e| e.to_string())?;
            Ok(GoldLabel::Cvss(vector))
        }
        TaskKind::ActorAttribution => {
            let name = value.as_str().ok_or("expected an actor name string")?;
            if name.trim().is_empty() {
                return Err("empty actor name".into());
            }
            Ok(GoldLabel::Actor(name.trim().to_string()))
        }
    }
}

fn gold_to_value(gold: &GoldLabel) -> serde_json::Value {
    match gold {
        GoldLabel::Id(id) => serde_json::Value::String(id.clone()),
        GoldLabel::IdSet(ids) => {
            serde_json::Value::Array(ids.iter().map(|s| s.clone().into()).collect())
        }
        GoldLabel::Cvss(v) => serde_json::Value::String(v.to_vector_string()),
        GoldLabel::Actor(name) => serde_json::Value::String(name.clone()),
    }
}

fn instance_from_line(line_no: usize, line: &str) -> Result<TaskInstance, DatasetError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| DatasetError::Schema {
        line: line_no,
        field: "record".into(),
        message: e.to_string(),
    })?;
    let gold = gold_from_value(raw.kind, &raw.gold).map_err(|message| DatasetError::Schema {
        line: line_no,
        field: "gold".into(),
        message,
    })?;
    Ok(TaskInstance {
        uid: raw.uid,
        kind: raw.kind,
        prompt: raw.prompt,
        gold,
        label_details: raw.label_details,
    })
}

/// Loads a newline-delimited dataset file.
///
/// In strict mode any malformed record (or duplicate uid) aborts the load
/// with its line number; otherwise malformed records are skipped.
pub fn load_dataset(path: &Path, strict: bool) -> Result<Vec<TaskInstance>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match instance_from_line(line_no, &line) {
            Ok(instance) => {
                if !seen.insert(instance.uid.clone()) {
                    if strict {
                        return Err(DatasetError::DuplicateUid {
                            line: line_no,
                            uid: instance.uid,
                        });
                    }
                    continue;
                }
                out.push(instance);
            }
            Err(err) if strict => return Err(err),
            Err(_) => {}
        }
    }
    Ok(out)
}

/// Serializes instances back to the dataset line format.
pub fn serialize_dataset(instances: &[TaskInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let raw = RawRecord {
            uid: inst.uid.clone(),
            kind: inst.kind,
            prompt: inst.prompt.clone(),
            gold: gold_to_value(&inst.gold),
            label_details: inst.label_details.clone(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("record serialization"));
        out.push('\n');
    }
    out
}

/// Canonical actor name -> alias set (the canonical name is its own alias).
///
/// Lookup is closed under normalization: every stored alias resolves back
/// to its canonical name through [`resolve_actor`].
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    canonical: BTreeMap<String, BTreeSet<String>>,
    by_norm: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AliasRecord {
    canonical: String,
    aliases: Vec<String>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, canonical: &str, aliases: &[&str]) {
        let entry = self
            .canonical
            .entry(canonical.to_string())
            .or_insert_with(BTreeSet::new);
        entry.insert(canonical.to_string());
        self.by_norm
            .insert(norm_actor(canonical), canonical.to_string());
        for alias in aliases {
            entry.insert((*alias).to_string());
            self.by_norm
                .insert(norm_actor(alias), canonical.to_string());
        }
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut table = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: AliasRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
                    line: idx + 1,
                    field: "alias record".into(),
                    message: e.to_string(),
                })?;
            let aliases: Vec<&str> = record.aliases.iter().map(String::as_str).collect();
            table.insert(&record.canonical, &aliases);
        }
        Ok(table)
    }

    pub fn contains(&self, canonical: &str) -> bool {
        self.canonical.contains_key(canonical)
    }

    /// Normalized alias set for a canonical name.
    pub fn normalized_aliases(&self, canonical: &str) -> Option<BTreeSet<String>> {
        self.canonical
            .get(canonical)
            .map(|set| set.iter().map(|a| norm_actor(a)).collect())
    }

    /// Raw alias set for a canonical name.
    pub fn aliases(&self, canonical: &str) -> Option<&BTreeSet<String>> {
        self.canonical.get(canonical)
    }

    pub fn canonical_names(&self) -> impl Iterator<Item = &String> {
        self.canonical.keys()
    }
}

/// Resolves a raw mention to a canonical actor name, if any alias matches
/// after normalization. Absence is a value, not an error.
pub fn resolve_actor<'t>(name: &str, table: &'t AliasTable) -> Option<&'t str> {
    table.by_norm.get(&norm_actor(name)).map(String::as_str)
}

/// Known-identifier sets, one per identifier family. All entries are stored
/// in normalized form. Catalogs are optional everywhere: when absent,
/// identifier validity is syntax-only.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub valid_techniques: BTreeSet<String>,
    pub valid_tactics: BTreeSet<String>,
    pub valid_mitigations: BTreeSet<String>,
    pub valid_cwes: BTreeSet<String>,
    pub valid_capecs: BTreeSet<String>,
}

impl Catalog {
    /// Loads one-ID-per-line files from a directory. Missing files leave the
    /// corresponding family unconstrained (empty set = no check).
    pub fn load_dir(dir: &Path) -> Result<Self, DatasetError> {
        let mut catalog = Self::default();
        let families: [(&str, &mut BTreeSet<String>); 5] = [
            ("techniques.txt", &mut catalog.valid_techniques),
            ("tactics.txt", &mut catalog.valid_tactics),
            ("mitigations.txt", &mut catalog.valid_mitigations),
            ("cwes.txt", &mut catalog.valid_cwes),
            ("capecs.txt", &mut catalog.valid_capecs),
        ];
        for (file, set) in families {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            for line in fs::read_to_string(&path)?.lines() {
                let id = line.trim();
                if !id.is_empty() {
                    set.insert(norm_id(id));
                }
            }
        }
        Ok(catalog)
    }

    /// True when the identifier belongs to a family this catalog constrains
    /// and is absent from it. Unknown shapes are never rejected here.
    pub fn rejects(&self, normalized_id: &str) -> bool {
        let family: Option<&BTreeSet<String>> = if normalized_id.starts_with("TA") {
            Some(&self.valid_tactics)
        } else if normalized_id.starts_with("T") {
            Some(&self.valid_techniques)
        } else if normalized_id.starts_with("M") {
            Some(&self.valid_mitigations)
        } else if normalized_id.starts_with("CWE-") {
            Some(&self.valid_cwes)
        } else if normalized_id.starts_with("CAPEC-") {
            Some(&self.valid_capecs)
        } else {
            None
        };
        match family {
            Some(set) if !set.is_empty() => !set.contains(normalized_id),
            _ => false,
        }
    }
}
