//! Run configuration and the commands behind the `rgrpo` binary.
//!
//! Every command resolves and validates the full configuration, loads its
//! inputs, and only then creates the output directory, so a rejected run
//! leaves nothing behind.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{
    evaluate, run_training, Decoding, EvalReport, GrpoError, KlMode, ObjectiveConfig, StepMetrics,
    TrainConfig,
};
use crate::remote_judge::{FixtureTransport, RemoteJudge, RemoteJudgeConfig};
use crate::rewards::{
    score_rollout, EmotionTaxonomy, Judge, JudgeError, RewardBreakdown, RewardError, RewardWeights,
    SceneRef,
};
use crate::rng::{stream_rng, stream_seed, DOMAIN_DEMOS, DOMAIN_INIT};
use crate::synthetic_env::{
    adversarial_policy, demonstrations, generate_dataset, load_manifest, load_scenes,
    write_manifest, write_scenes, EnvError, Environment, ManifestRecord, OracleJudge, SceneParams,
};
use crate::toy_policy::{
    sft_update, Checkpoint, ClauseBank, PolicyError, SelfJudge, SftConfig, ToyPolicy,
};
use crate::trace_grammar::{build_set_prompt, parse_trace};

/// Learning rate used when fine-tuning a full-size vision-language policy.
/// Kept for reference only: the toy policy's loss surface is on a completely
/// different scale, so its default (`RunConfig::learning_rate`) is far larger.
pub const FULL_SCALE_LEARNING_RATE: f64 = 2.0e-6;

const TASK_TEXT: &str = "Identify the emotion this image evokes in a viewer.";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("training aborted after {completed} step(s): {error}")]
    Aborted { completed: usize, error: GrpoError },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_scenes: usize,
        #[serde(default)]
        params: SceneParams,
    },
    /// A scenes JSONL file written by `gen-data`.
    Scenes { path: PathBuf },
    /// `{id, label, caption?}` records; scoring only, there are no features.
    Manifest { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Zero,
    Random {
        scale: f64,
    },
    /// Priors pointing away from the gold answers; see `adversarial_policy`.
    Adversarial {
        strength: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeSpec {
    Oracle,
    #[serde(rename = "self")]
    SelfJudge,
    Remote {
        #[serde(default)]
        remote: RemoteJudgeConfig,
        /// Replay recorded exchanges instead of calling the endpoint.
        #[serde(default)]
        fixtures: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColdStartConfig {
    pub enabled: bool,
    /// Demonstrations come from a separate synthetic draw, not the training scenes.
    pub n_demos: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        let sft = SftConfig::default();
        Self {
            enabled: false,
            n_demos: 256,
            epochs: sft.epochs,
            lr: sft.lr,
            batch_size: sft.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Built-in taxonomy name or path to a taxonomy JSON file.
    pub taxonomy: String,
    pub triggers_per_emotion: usize,
    pub dataset: DatasetSpec,
    pub group_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub kl_mode: KlMode,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub temperature: f64,
    pub record_wall_time: bool,
    pub init: InitSpec,
    /// Start from a saved checkpoint instead of `init`.
    pub init_checkpoint: Option<PathBuf>,
    pub cold_start: ColdStartConfig,
    pub judge: JudgeSpec,
    pub decoding: Decoding,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let obj = ObjectiveConfig::default();
        let train = TrainConfig::default();
        let w = RewardWeights::default();
        Self {
            seed: train.seed,
            taxonomy: "synthetic4".into(),
            triggers_per_emotion: 2,
            dataset: DatasetSpec::Synthetic {
                n_scenes: 16,
                params: SceneParams::default(),
            },
            group_size: obj.group_size,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            clip_epsilon: obj.clip_epsilon,
            kl_beta: obj.kl_beta,
            kl_mode: obj.kl_mode,
            learning_rate: train.learning_rate,
            steps: train.steps,
            batch_size: train.batch_size,
            workers: train.workers,
            temperature: 1.0,
            record_wall_time: false,
            init: InitSpec::Zero,
            init_checkpoint: None,
            cold_start: ColdStartConfig::default(),
            judge: JudgeSpec::Oracle,
            decoding: Decoding::Greedy,
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub group_size: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub judge: Option<String>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.group_size {
            self.group_size = v;
        }
        if let Some(v) = o.lambda1 {
            self.lambda1 = v;
        }
        if let Some(v) = o.lambda2 {
            self.lambda2 = v;
        }
        if let Some(j) = &o.judge {
            self.judge = match j.as_str() {
                "oracle" => JudgeSpec::Oracle,
                "self" => JudgeSpec::SelfJudge,
                "remote" => match &self.judge {
                    r @ JudgeSpec::Remote { .. } => r.clone(),
                    _ => JudgeSpec::Remote {
                        remote: RemoteJudgeConfig::default(),
                        fixtures: None,
                    },
                },
                other => {
                    return Err(CliError::Config(format!(
                        "unknown judge {other:?} (oracle, self, remote)"
                    )))
                }
            };
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<RewardWeights, CliError> {
        RewardWeights::new(self.lambda1, self.lambda2).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let tc = TrainConfig {
            objective: ObjectiveConfig {
                clip_epsilon: self.clip_epsilon,
                kl_beta: self.kl_beta,
                group_size: self.group_size,
                kl_mode: self.kl_mode,
                ..ObjectiveConfig::default()
            },
            weights: self.weights()?,
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            workers: self.workers,
            record_wall_time: self.record_wall_time,
        };
        tc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(tc)
    }

    /// Checks everything that can be checked without touching the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.train_config()?;
        if self.triggers_per_emotion == 0 {
            return bad("triggers_per_emotion must be >= 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        match self.init {
            InitSpec::Random { scale } if !(scale.is_finite() && scale >= 0.0) => {
                return bad(format!("init scale must be finite and >= 0, got {scale}"));
            }
            InitSpec::Adversarial { strength } if !strength.is_finite() => {
                return bad(format!(
                    "adversarial strength must be finite, got {strength}"
                ));
            }
            _ => {}
        }
        if let DatasetSpec::Synthetic { n_scenes, params } = &self.dataset {
            if *n_scenes == 0 {
                return bad("dataset.n_scenes must be >= 1".into());
            }
            if !(params.noise_std.is_finite() && params.noise_std >= 0.0)
                || !params.signal.is_finite()
                || !(0.0..=1.0).contains(&params.distractor_prob)
            {
                return bad("invalid synthetic scene parameters".into());
            }
        }
        let cs = &self.cold_start;
        if cs.enabled {
            if cs.n_demos == 0 || cs.batch_size == 0 {
                return bad("cold_start.n_demos and cold_start.batch_size must be >= 1".into());
            }
            if !(cs.lr.is_finite() && cs.lr >= 0.0) {
                return bad(format!(
                    "cold_start.lr must be finite and >= 0, got {}",
                    cs.lr
                ));
            }
        }
        if let JudgeSpec::Remote { remote, .. } = &self.judge {
            remote
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.out.as_os_str().is_empty() {
            return bad("out must not be empty".into());
        }
        Ok(())
    }
}

/// Config plus the taxonomy and clause bank it names.
pub struct Resolved {
    pub config: RunConfig,
    pub taxonomy: EmotionTaxonomy,
    pub bank: ClauseBank,
}

pub fn resolve(config: RunConfig) -> Result<Resolved, CliError> {
    config.validate()?;
    let taxonomy =
        EmotionTaxonomy::load(&config.taxonomy).map_err(|e| CliError::Config(e.to_string()))?;
    let bank = ClauseBank::for_taxonomy(&taxonomy, config.triggers_per_emotion)?;
    Ok(Resolved {
        config,
        taxonomy,
        bank,
    })
}

impl Resolved {
    /// Scenes with features; manifests have none and are rejected here.
    pub fn environment(&self) -> Result<Environment, CliError> {
        let scenes = match &self.config.dataset {
            DatasetSpec::Synthetic { n_scenes, params } => {
                generate_dataset(self.config.seed, *n_scenes, &self.taxonomy, &self.bank, params)?
            }
            DatasetSpec::Scenes { path } => load_scenes(path).map_err(|e| match e {
                EnvError::Io(source) => CliError::Io { path: path.clone(), source },
                other => other.into(),
            })?,
            DatasetSpec::Manifest { .. } => {
                return Err(CliError::Config(
                    "a manifest has no scene features; this command needs a synthetic or scenes dataset".into(),
                ))
            }
        };
        Ok(Environment::new(
            self.taxonomy.clone(),
            self.bank.clone(),
            scenes,
        )?)
    }

    /// Scoring targets: `(scene ref, gold label)` keyed by id, in dataset order.
    pub fn scoring_targets(&self) -> Result<Vec<(SceneRef, String)>, CliError> {
        match &self.config.dataset {
            DatasetSpec::Manifest { path } => {
                let m = load_manifest(path, &self.taxonomy).map_err(|e| match e {
                    EnvError::Io(source) => CliError::Io {
                        path: path.clone(),
                        source,
                    },
                    other => other.into(),
                })?;
                Ok(m.records
                    .iter()
                    .map(|r| (r.scene_ref(), r.label.clone()))
                    .collect())
            }
            _ => {
                let env = self.environment()?;
                Ok(env
                    .scenes
                    .iter()
                    .map(|s| (s.scene_ref(&env.bank), s.gold_emotion.clone()))
                    .collect())
            }
        }
    }

    pub fn initial_policy(&self, env: &Environment) -> Result<ToyPolicy, CliError> {
        if let Some(path) = &self.config.init_checkpoint {
            let p = Checkpoint::load(path, &self.taxonomy, &self.bank)?;
            if p.feature_dim() != env.feature_dim() {
                return Err(CliError::Config(format!(
                    "checkpoint feature_dim {} does not match dataset feature_dim {}",
                    p.feature_dim(),
                    env.feature_dim()
                )));
            }
            return Ok(p);
        }
        let base = ToyPolicy::for_bank(&self.bank, &self.taxonomy, env.feature_dim())?;
        let p = match self.config.init {
            InitSpec::Zero => base,
            InitSpec::Random { scale } => {
                base.randomized(scale, &mut stream_rng(self.config.seed, &[DOMAIN_INIT]))
            }
            InitSpec::Adversarial { strength } => {
                adversarial_policy(&env.layout()?, &self.taxonomy, &self.bank, strength)?
            }
        };
        Ok(p.with_temperature(self.config.temperature)?)
    }

    /// Supervised warm-up on a fresh synthetic draw with the training
    /// environment's scene parameters. Returns the policy and its curve.
    pub fn cold_start(
        &self,
        env: &Environment,
        policy: &ToyPolicy,
    ) -> Result<(ToyPolicy, Vec<f64>), CliError> {
        let cs = &self.config.cold_start;
        let params = match &self.config.dataset {
            DatasetSpec::Synthetic { params, .. } => *params,
            _ => SceneParams::default(),
        };
        let demo_scenes = generate_dataset(
            stream_seed(self.config.seed, &[DOMAIN_DEMOS]),
            cs.n_demos.max(self.taxonomy.len()),
            &self.taxonomy,
            &self.bank,
            &params,
        )?;
        if demo_scenes.first().map(|s| s.features.len()) != Some(env.feature_dim()) {
            return Err(CliError::Config(
                "cold-start demonstrations and training scenes have different feature sizes".into(),
            ));
        }
        let demos = demonstrations(&demo_scenes, &self.taxonomy, &self.bank)?;
        let out = sft_update(
            policy,
            &demos,
            &SftConfig {
                epochs: cs.epochs,
                lr: cs.lr,
                batch_size: cs.batch_size,
            },
        )?;
        Ok((out.policy, out.log_likelihood))
    }

    /// Builds the configured judge. The self judge is frozen at `policy`.
    pub fn judge(
        &self,
        env: Option<&Environment>,
        policy: Option<&ToyPolicy>,
    ) -> Result<Box<dyn Judge>, CliError> {
        Ok(match &self.config.judge {
            JudgeSpec::Oracle => Box::new(OracleJudge::new(self.bank.clone())),
            JudgeSpec::SelfJudge => {
                let (env, policy) = env.zip(policy).ok_or_else(|| {
                    CliError::Config("the self judge needs scene features and a policy".into())
                })?;
                let features: HashMap<String, Vec<f64>> = env
                    .scenes
                    .iter()
                    .map(|s| (s.scene_id.clone(), s.features.clone()))
                    .collect();
                Box::new(SelfJudge::new(
                    policy.snapshot(),
                    self.bank.clone(),
                    features,
                ))
            }
            JudgeSpec::Remote { remote, fixtures } => match fixtures {
                Some(path) => Box::new(RemoteJudge::with_transport(
                    remote.clone(),
                    None,
                    Box::new(FixtureTransport::load(path)?),
                )?),
                None => Box::new(RemoteJudge::new(remote.clone())?),
            },
        })
    }

    fn create_out(&self) -> Result<&Path, CliError> {
        let out = &self.config.out;
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        Ok(out)
    }

    fn write_config(&self) -> Result<(), CliError> {
        let path = self.config.out.join("config.json");
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<(), CliError> {
    let mut text = String::from("epoch,mean_log_likelihood\n");
    for (i, v) in curve.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataSummary {
    pub n_scenes: usize,
    pub scenes_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Writes `scenes.jsonl`, `manifest.jsonl` (id, label, caption) and the
/// instruction prompt the taxonomy induces.
pub fn cmd_gen_data(config: RunConfig) -> Result<GenDataSummary, CliError> {
    let r = resolve(config)?;
    if !matches!(r.config.dataset, DatasetSpec::Synthetic { .. }) {
        return Err(CliError::Config(
            "gen-data needs a synthetic dataset spec".into(),
        ));
    }
    let env = r.environment()?;
    let prompt = build_set_prompt(&r.taxonomy.labels, TASK_TEXT)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let out = r.create_out()?;
    let scenes_path = out.join("scenes.jsonl");
    let manifest_path = out.join("manifest.jsonl");
    write_scenes(&scenes_path, &env.scenes)?;
    let records: Vec<ManifestRecord> = env
        .scenes
        .iter()
        .map(|s| ManifestRecord {
            id: s.scene_id.clone(),
            label: s.gold_emotion.clone(),
            caption: s.scene_ref(&env.bank).caption,
        })
        .collect();
    write_manifest(&manifest_path, &records)?;
    let prompt_path = out.join("prompt.txt");
    std::fs::write(&prompt_path, prompt.render() + "\n").map_err(io_err(&prompt_path))?;
    Ok(GenDataSummary {
        n_scenes: env.scenes.len(),
        scenes_path,
        manifest_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartSummary {
    pub log_likelihood: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Runs the supervised warm-up and writes `checkpoint.json` plus
/// `sft_curve.csv`, regardless of `cold_start.enabled`.
pub fn cmd_cold_start(config: RunConfig) -> Result<ColdStartSummary, CliError> {
    let mut config = config;
    config.cold_start.enabled = true;
    let r = resolve(config)?;
    let env = r.environment()?;
    let init = r.initial_policy(&env)?;
    let (policy, curve) = r.cold_start(&env, &init)?;
    let out = r.create_out()?;
    r.write_config()?;
    let checkpoint = out.join("checkpoint.json");
    Checkpoint::new(&policy, &r.taxonomy, &r.bank).save(&checkpoint)?;
    write_curve(&out.join("sft_curve.csv"), &curve)?;
    Ok(ColdStartSummary {
        log_likelihood: curve,
        checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
}

impl MetricsWriter {
    fn create(out: &Path) -> Result<Self, CliError> {
        let open = |name: &str| {
            let p = out.join(name);
            File::create(&p).map(BufWriter::new).map_err(io_err(&p))
        };
        let mut w = Self {
            jsonl: open("metrics.jsonl")?,
            csv: open("metrics.csv")?,
        };
        writeln!(w.csv, "{}", StepMetrics::CSV_HEADER).map_err(io_err(out))?;
        Ok(w)
    }

    fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.jsonl, m)?;
        self.jsonl.write_all(b"\n")?;
        writeln!(self.csv, "{}", m.csv_row())?;
        // Flushed per step so an abort leaves complete lines behind.
        self.jsonl.flush()?;
        self.csv.flush()
    }
}

/// Trains from the configured initialization (after the optional cold
/// start). Writes `config.json`, `metrics.jsonl`, `metrics.csv` as it goes
/// and `checkpoint.json` on success. On abort the logs hold every completed
/// step and the error says how many there were.
pub fn cmd_train(config: RunConfig) -> Result<TrainSummary, CliError> {
    let r = resolve(config)?;
    let tc = r.config.train_config()?;
    let env = r.environment()?;
    let mut policy = r.initial_policy(&env)?;
    let mut curve = None;
    if r.config.cold_start.enabled {
        let (p, c) = r.cold_start(&env, &policy)?;
        policy = p;
        curve = Some(c);
    }
    let judge = r.judge(Some(&env), Some(&policy))?;

    let out = r.create_out()?;
    r.write_config()?;
    if let Some(c) = &curve {
        write_curve(&out.join("sft_curve.csv"), c)?;
    }
    let mut writer = MetricsWriter::create(out)?;
    let result = run_training(&tc, &env, judge.as_ref(), &policy, &mut |m| writer.write(m));
    drop(writer);
    match result {
        Ok(outcome) => {
            let checkpoint = out.join("checkpoint.json");
            Checkpoint::new(&outcome.policy, &r.taxonomy, &r.bank).save(&checkpoint)?;
            Ok(TrainSummary {
                metrics: outcome.metrics,
                checkpoint,
            })
        }
        Err(abort) => Err(CliError::Aborted {
            completed: abort.metrics.len(),
            error: abort.error,
        }),
    }
}

/// Decodes the checkpoint over the dataset and writes `report.json`.
pub fn cmd_eval(config: RunConfig, checkpoint: &Path) -> Result<EvalReport, CliError> {
    let r = resolve(config)?;
    let env = r.environment()?;
    let policy = Checkpoint::load(checkpoint, &r.taxonomy, &r.bank)?;
    if policy.feature_dim() != env.feature_dim() {
        return Err(CliError::Config(format!(
            "checkpoint feature_dim {} does not match dataset feature_dim {}",
            policy.feature_dim(),
            env.feature_dim()
        )));
    }
    let judge = r.judge(Some(&env), Some(&policy))?;
    let report = evaluate(
        &policy,
        &env,
        judge.as_ref(),
        &r.config.weights()?,
        r.config.decoding,
    )?;
    let out = r.create_out()?;
    let path = out.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(report)
}

/// One externally produced output to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    pub id: String,
    pub malformed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub rewards: RewardBreakdown,
}

/// Scores each `{id, output}` line against the dataset's gold labels and
/// writes `scored.jsonl` in input order. Outputs that violate the trace
/// grammar score zero and are flagged; lines that are not valid records, or
/// reference unknown ids, are errors.
pub fn cmd_score_traces(config: RunConfig, traces: &Path) -> Result<Vec<ScoredTrace>, CliError> {
    let r = resolve(config)?;
    if matches!(r.config.judge, JudgeSpec::SelfJudge) {
        return Err(CliError::Config(
            "score-traces supports the oracle and remote judges".into(),
        ));
    }
    let targets = r.scoring_targets()?;
    let by_id: HashMap<&str, &(SceneRef, String)> =
        targets.iter().map(|t| (t.0.id.as_str(), t)).collect();
    let weights = r.config.weights()?;

    let file = File::open(traces).map_err(io_err(traces))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(traces))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("{} line {}: {e}", traces.display(), i + 1)))?;
        if !by_id.contains_key(rec.id.as_str()) {
            return Err(CliError::Config(format!(
                "{} line {}: unknown id {:?}",
                traces.display(),
                i + 1,
                rec.id
            )));
        }
        records.push(rec);
    }

    let judge = r.judge(None, None)?;
    let mut scored = Vec::with_capacity(records.len());
    for rec in records {
        let (scene, gold) = by_id[rec.id.as_str()];
        let failure = parse_trace(&rec.output)
            .err()
            .map(|f| f.kind.as_str().to_string());
        let rewards = score_rollout(
            &rec.output,
            scene,
            gold,
            &r.taxonomy,
            &weights,
            judge.as_ref(),
        )?;
        scored.push(ScoredTrace {
            id: rec.id,
            malformed: failure.is_some(),
            failure,
            rewards,
        });
    }

    let out = r.create_out()?;
    let path = out.join("scored.jsonl");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for s in &scored {
        serde_json::to_writer(&mut w, s).expect("scored record serializes");
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(scored)
}
