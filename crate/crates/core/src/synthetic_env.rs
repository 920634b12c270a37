//! Synthetic emotional scenes, the tag-based oracle judge, and dataset
//! manifests.
//!
//! A scene stands in for an image: a gold emotion, a set of salient triggers,
//! and a feature vector laid out as
//!
//! ```text
//! [ emotion one-hot (L) | trigger presence (T) | noise (d - L - T) ]
//! ```
//!
//! scaled by `signal` plus Gaussian noise on every coordinate, so both the
//! emotion and the triggers are linearly decodable.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{
    Arousal, EmotionTaxonomy, EmotionVerdict, Judge, JudgeError, SceneRef, Valence, Verdict,
};
use crate::rng::{stream_rng, DOMAIN_SCENES};
use crate::toy_policy::{Choices, ClauseBank, Demonstration, Head, ToyPolicy};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment configuration error: {0}")]
    Config(String),
    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene_id: String,
    pub features: Vec<f64>,
    /// Sorted trigger ids present in the scene.
    pub trigger_ids: Vec<usize>,
    pub gold_emotion: String,
    pub valence: Valence,
    pub arousal: Arousal,
}

impl SyntheticScene {
    /// What a judge gets to see: trigger surface forms and a caption.
    pub fn scene_ref(&self, bank: &ClauseBank) -> SceneRef {
        let triggers: Vec<String> = self
            .trigger_ids
            .iter()
            .map(|&t| bank.trigger_names[t].clone())
            .collect();
        SceneRef {
            id: self.scene_id.clone(),
            caption: Some(caption_for(&triggers)),
            triggers,
            image_url: None,
        }
    }
}

fn caption_for(triggers: &[String]) -> String {
    match triggers {
        [] => "A photo of an ordinary scene.".to_string(),
        [one] => format!("A photo showing {one}."),
        [init @ .., last] => format!("A photo showing {} and {last}.", init.join(", ")),
    }
}

/// Positions of the signal blocks inside a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_emotions: usize,
    pub n_triggers: usize,
    pub feature_dim: usize,
}

impl FeatureLayout {
    pub fn new(
        taxonomy: &EmotionTaxonomy,
        bank: &ClauseBank,
        feature_dim: usize,
    ) -> Result<Self, EnvError> {
        let layout = Self {
            n_emotions: taxonomy.len(),
            n_triggers: bank.trigger_names.len(),
            feature_dim,
        };
        if feature_dim < layout.signal_dims() {
            return Err(EnvError::Config(format!(
                "feature dimension {feature_dim} is below the {} signal dimensions",
                layout.signal_dims()
            )));
        }
        Ok(layout)
    }

    pub fn signal_dims(&self) -> usize {
        self.n_emotions + self.n_triggers
    }

    pub fn emotion_index(&self, label_idx: usize) -> usize {
        label_idx
    }

    pub fn trigger_index(&self, trigger: usize) -> usize {
        self.n_emotions + trigger
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Extra pure-noise dimensions beyond the signal blocks.
    pub noise_dims: usize,
    pub signal: f64,
    pub noise_std: f64,
    /// Chance of adding one trigger that belongs to a different emotion.
    pub distractor_prob: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            noise_dims: 4,
            signal: 1.0,
            noise_std: 0.1,
            distractor_prob: 0.25,
        }
    }
}

/// Deterministic scene generator. Scene `i` depends only on `(seed, i)`.
pub fn generate_dataset(
    seed: u64,
    n: usize,
    taxonomy: &EmotionTaxonomy,
    bank: &ClauseBank,
    params: &SceneParams,
) -> Result<Vec<SyntheticScene>, EnvError> {
    if n < taxonomy.len() {
        return Err(EnvError::Config(format!(
            "need at least one scene per label: n={n} < {} labels",
            taxonomy.len()
        )));
    }
    if !(params.noise_std >= 0.0
        && params.signal.is_finite()
        && (0.0..=1.0).contains(&params.distractor_prob))
    {
        return Err(EnvError::Config("invalid scene parameters".into()));
    }
    if bank.emotion_triggers.len() != taxonomy.len() {
        return Err(EnvError::Config(
            "clause bank was built for a different taxonomy".into(),
        ));
    }
    let layout = FeatureLayout::new(
        taxonomy,
        bank,
        taxonomy.len() + bank.trigger_names.len() + params.noise_dims,
    )?;
    let noise = Normal::new(0.0, params.noise_std).map_err(|e| EnvError::Config(e.to_string()))?;

    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, &[DOMAIN_SCENES, i as u64]);
            let gold_idx = i % taxonomy.len();
            let gold = taxonomy.labels[gold_idx].clone();
            let affect = taxonomy.affect(&gold).ok_or_else(|| {
                EnvError::Config(format!(
                    "taxonomy has no valence/arousal entry for {gold:?}"
                ))
            })?;

            let own = &bank.emotion_triggers[gold_idx];
            let first = *own.choose(&mut rng).expect("every emotion has triggers");
            let mut triggers: Vec<usize> = own
                .iter()
                .copied()
                .filter(|&t| t == first || rng.gen_bool(0.5))
                .collect();
            if taxonomy.len() > 1 && rng.gen_bool(params.distractor_prob) {
                let others: Vec<usize> = (0..bank.trigger_names.len())
                    .filter(|t| !own.contains(t))
                    .collect();
                triggers.push(
                    *others
                        .choose(&mut rng)
                        .expect("other emotions have triggers"),
                );
            }
            triggers.sort_unstable();

            let mut features: Vec<f64> = (0..layout.feature_dim)
                .map(|_| noise.sample(&mut rng))
                .collect();
            features[layout.emotion_index(gold_idx)] += params.signal;
            for &t in &triggers {
                features[layout.trigger_index(t)] += params.signal;
            }

            Ok(SyntheticScene {
                scene_id: format!("scene-{i:05}"),
                features,
                trigger_ids: triggers,
                gold_emotion: gold,
                valence: affect.valence,
                arousal: affect.arousal,
            })
        })
        .collect()
}

/// Yes iff `step1` mentions a trigger that is present in the scene.
pub fn oracle_yes_no(scene: &SceneRef, step1: &str) -> Verdict {
    if scene
        .triggers
        .iter()
        .any(|t| !t.is_empty() && step1.contains(t.as_str()))
    {
        Verdict::Yes
    } else {
        Verdict::No
    }
}

/// Emotion tag of the single reflection clause found in the text.
pub fn oracle_emotion(
    bank: &ClauseBank,
    steps12: &str,
    taxonomy: &EmotionTaxonomy,
) -> EmotionVerdict {
    match bank.find_reflection_clause(steps12) {
        Some(i) if taxonomy.contains(&bank.reflections[i].emotion) => {
            EmotionVerdict::Label(bank.reflections[i].emotion.clone())
        }
        _ => EmotionVerdict::Unmatched(steps12.to_string()),
    }
}

/// Ground-truth judge computed from scene triggers and clause tags.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    bank: ClauseBank,
}

impl OracleJudge {
    pub fn new(bank: ClauseBank) -> Self {
        Self { bank }
    }
}

impl Judge for OracleJudge {
    fn judge_yes_no(
        &self,
        scene: &SceneRef,
        text: &str,
        _prompt: &str,
    ) -> Result<Verdict, JudgeError> {
        Ok(oracle_yes_no(scene, text))
    }

    fn judge_emotion(
        &self,
        text: &str,
        _prompt: &str,
        taxonomy: &EmotionTaxonomy,
    ) -> Result<EmotionVerdict, JudgeError> {
        Ok(oracle_emotion(&self.bank, text, taxonomy))
    }
}

/// Choices that earn every reward on `scene`: a present own-emotion trigger,
/// the gold reflection, the matching conclusion, and the gold answer.
pub fn oracle_choices(
    scene: &SyntheticScene,
    taxonomy: &EmotionTaxonomy,
    bank: &ClauseBank,
) -> Result<Choices, EnvError> {
    let gold = taxonomy.index_of(&scene.gold_emotion).ok_or_else(|| {
        EnvError::Config(format!(
            "gold label {:?} not in taxonomy",
            scene.gold_emotion
        ))
    })?;
    let own = &bank.emotion_triggers[gold];
    let trigger_id = scene
        .trigger_ids
        .iter()
        .copied()
        .find(|t| own.contains(t))
        .or_else(|| scene.trigger_ids.first().copied())
        .ok_or_else(|| EnvError::Config(format!("scene {} has no triggers", scene.scene_id)))?;
    let trigger = bank
        .triggers
        .iter()
        .position(|c| c.trigger_ids.contains(&trigger_id))
        .ok_or_else(|| EnvError::Config("no clause mentions the trigger".into()))?;
    let reflection = bank
        .reflections
        .iter()
        .position(|r| r.emotion == scene.gold_emotion)
        .ok_or_else(|| EnvError::Config("no reflection clause for gold label".into()))?;
    let affect = crate::rewards::Affect {
        valence: scene.valence,
        arousal: scene.arousal,
    };
    let conclusion = bank
        .conclusion_for(affect)
        .ok_or_else(|| EnvError::Config("no conclusion clause for affect".into()))?;
    Ok(Choices {
        trigger,
        reflection,
        conclusion,
        answer: gold,
    })
}

pub fn demonstrations(
    scenes: &[SyntheticScene],
    taxonomy: &EmotionTaxonomy,
    bank: &ClauseBank,
) -> Result<Vec<Demonstration>, EnvError> {
    scenes
        .iter()
        .map(|s| {
            Ok(Demonstration {
                features: s.features.clone(),
                choices: oracle_choices(s, taxonomy, bank)?,
            })
        })
        .collect()
}

/// Policy whose priors point away from the right answers: the gold label and
/// gold reflection are penalized by `strength`, and the trigger head prefers
/// the clause that mentions nothing.
pub fn adversarial_policy(
    layout: &FeatureLayout,
    taxonomy: &EmotionTaxonomy,
    bank: &ClauseBank,
    strength: f64,
) -> Result<ToyPolicy, EnvError> {
    let mut p = ToyPolicy::for_bank(bank, taxonomy, layout.feature_dim)
        .map_err(|e| EnvError::Config(e.to_string()))?;
    for e in 0..taxonomy.len() {
        let f = layout.emotion_index(e);
        let i = p.weight_index(Head::Answer, e, f);
        p.params_mut()[i] = -strength;
        if let Some(r) = bank
            .reflections
            .iter()
            .position(|r| r.emotion == taxonomy.labels[e])
        {
            let i = p.weight_index(Head::Reflection, r, f);
            p.params_mut()[i] = -strength;
        }
    }
    if let Some(generic) = bank.triggers.iter().position(|c| c.trigger_ids.is_empty()) {
        let i = p.bias_index(Head::Trigger, generic);
        p.params_mut()[i] = strength;
    }
    Ok(p)
}

/// Scenes plus the label space and clause bank they were generated with.
#[derive(Debug, Clone)]
pub struct Environment {
    pub taxonomy: EmotionTaxonomy,
    pub bank: ClauseBank,
    pub scenes: Vec<SyntheticScene>,
}

impl Environment {
    pub fn new(
        taxonomy: EmotionTaxonomy,
        bank: ClauseBank,
        scenes: Vec<SyntheticScene>,
    ) -> Result<Self, EnvError> {
        bank.validate(&taxonomy)
            .map_err(|e| EnvError::Config(e.to_string()))?;
        let dim = scenes.first().map(|s| s.features.len());
        let mut ids = HashSet::new();
        for s in &scenes {
            if !taxonomy.contains(&s.gold_emotion) {
                return Err(EnvError::Config(format!(
                    "scene {} has unknown label",
                    s.scene_id
                )));
            }
            if Some(s.features.len()) != dim {
                return Err(EnvError::Config(
                    "scenes have differing feature dimensions".into(),
                ));
            }
            if s.trigger_ids.iter().any(|&t| t >= bank.trigger_names.len()) {
                return Err(EnvError::Config(format!(
                    "scene {} has unknown trigger",
                    s.scene_id
                )));
            }
            if !ids.insert(s.scene_id.as_str()) {
                return Err(EnvError::Config(format!(
                    "duplicate scene id {}",
                    s.scene_id
                )));
            }
        }
        Ok(Self {
            taxonomy,
            bank,
            scenes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.features.len())
    }

    pub fn layout(&self) -> Result<FeatureLayout, EnvError> {
        FeatureLayout::new(&self.taxonomy, &self.bank, self.feature_dim())
    }
}

pub fn write_scenes(path: &Path, scenes: &[SyntheticScene]) -> Result<(), EnvError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s).map_err(|e| EnvError::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scenes(path: &Path) -> Result<Vec<SyntheticScene>, EnvError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line).map_err(|e| EnvError::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(scenes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl ManifestRecord {
    pub fn scene_ref(&self) -> SceneRef {
        SceneRef {
            id: self.id.clone(),
            caption: self.caption.clone(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub taxonomy: String,
    pub split: String,
    pub records: Vec<ManifestRecord>,
}

/// Parses a JSONL manifest of `{id, label, caption?}` records. Labels are
/// canonicalized against the taxonomy; the split name is the file stem.
pub fn load_manifest(path: &Path, taxonomy: &EmotionTaxonomy) -> Result<DatasetManifest, EnvError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| EnvError::Manifest {
                line: lineno,
                reason: e.to_string(),
            })?;
        rec.label = taxonomy
            .canonicalize(&rec.label)
            .ok_or_else(|| EnvError::Manifest {
                line: lineno,
                reason: format!("label {:?} is not in taxonomy {}", rec.label, taxonomy.name),
            })?
            .to_string();
        if !ids.insert(rec.id.clone()) {
            return Err(EnvError::Manifest {
                line: lineno,
                reason: format!("duplicate id {:?}", rec.id),
            });
        }
        records.push(rec);
    }
    let split = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("unknown")
        .to_string();
    Ok(DatasetManifest {
        taxonomy: taxonomy.name.clone(),
        split,
        records,
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), EnvError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| EnvError::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
