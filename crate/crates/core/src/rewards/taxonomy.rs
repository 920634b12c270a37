use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RewardError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arousal {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Affect {
    pub valence: Valence,
    pub arousal: Arousal,
}

/// Closed label space plus alias map and the per-label valence/arousal table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionTaxonomy {
    pub name: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    #[serde(default)]
    pub valence_arousal: BTreeMap<String, Affect>,
}

const BUILTIN: &[(&str, &str)] = &[
    ("emoset", include_str!("../../data/taxonomies/emoset.json")),
    (
        "emotion6",
        include_str!("../../data/taxonomies/emotion6.json"),
    ),
    ("webemo", include_str!("../../data/taxonomies/webemo.json")),
    (
        "synthetic4",
        include_str!("../../data/taxonomies/synthetic4.json"),
    ),
];

/// Lower-cases, trims and drops trailing punctuation.
pub fn normalize_label(text: &str) -> String {
    text.trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .trim()
        .to_lowercase()
}

impl EmotionTaxonomy {
    pub fn new(
        name: impl Into<String>,
        labels: Vec<String>,
        aliases: BTreeMap<String, String>,
        valence_arousal: BTreeMap<String, Affect>,
    ) -> Result<Self, RewardError> {
        let t = Self {
            name: name.into(),
            labels,
            aliases,
            valence_arousal,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, json)| Self::from_json(json).expect("builtin taxonomy is valid"))
    }

    pub fn from_json(json: &str) -> Result<Self, RewardError> {
        let t: Self = serde_json::from_str(json)
            .map_err(|e| RewardError::Config(format!("taxonomy json: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    /// Loads a builtin by name, or a taxonomy file by path.
    pub fn load(name_or_path: &str) -> Result<Self, RewardError> {
        if let Some(t) = Self::builtin(name_or_path) {
            return Ok(t);
        }
        let path = Path::new(name_or_path);
        let json = std::fs::read_to_string(path).map_err(|e| {
            RewardError::Config(format!("cannot read taxonomy {}: {e}", path.display()))
        })?;
        Self::from_json(&json)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if self.labels.is_empty() {
            return Err(RewardError::Config("taxonomy has no labels".into()));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.is_empty() || normalize_label(l) != *l {
                return Err(RewardError::Config(format!(
                    "label {l:?} is not in canonical lower-case form"
                )));
            }
            if self.labels[..i].contains(l) {
                return Err(RewardError::Config(format!("duplicate label {l:?}")));
            }
        }
        for (alias, target) in &self.aliases {
            if !self.labels.contains(target) {
                return Err(RewardError::Config(format!(
                    "alias {alias:?} maps to unknown label {target:?}"
                )));
            }
        }
        for label in self.valence_arousal.keys() {
            if !self.labels.contains(label) {
                return Err(RewardError::Config(format!(
                    "valence/arousal entry for unknown label {label:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Maps free text to a canonical label (case-fold, trim, strip terminal
    /// punctuation, alias lookup). `None` if outside the taxonomy.
    pub fn canonicalize(&self, text: &str) -> Option<&str> {
        let norm = normalize_label(text);
        if let Some(l) = self.labels.iter().find(|l| **l == norm) {
            return Some(l);
        }
        self.aliases
            .iter()
            .find(|(alias, _)| normalize_label(alias) == norm)
            .map(|(_, target)| target.as_str())
    }

    pub fn affect(&self, label: &str) -> Option<Affect> {
        self.valence_arousal.get(label).copied()
    }

    /// Every label together with all surface forms that name it.
    pub(crate) fn surface_forms(&self) -> Vec<(String, &str)> {
        let mut forms: Vec<(String, &str)> = self
            .labels
            .iter()
            .map(|l| (l.clone(), l.as_str()))
            .collect();
        forms.extend(
            self.aliases
                .iter()
                .map(|(a, t)| (normalize_label(a), t.as_str())),
        );
        forms
    }

    /// Stable content hash of the label list.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for l in &self.labels {
            h.update([0u8]);
            h.update(l.as_bytes());
        }
        hex::encode(h.finalize())
    }
}
