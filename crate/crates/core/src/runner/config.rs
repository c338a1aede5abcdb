use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::{ConvLayerConfig, EncoderConfig};
use crate::envsim::EnvConfig;
use crate::masking::{FillMode, Granularity, MaskPolicy, MaskSpec};
use crate::{Error, Result};

/// One cell type of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    /// Unmasked pretraining, unmasked probing.
    Observable,
    /// Unmasked pretraining, masked probing.
    NonObservable,
    /// No pretraining; encoder and heads trained jointly on masked frames.
    Supervised,
    /// Frozen randomly initialized encoder, masked probing.
    RandomCnn,
    /// Pretraining with the given anchor mask ratio, masked probing.
    PretrainMasked(f64),
}

impl Condition {
    pub const MASKED_RATIOS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

    /// The standard matrix, in report column order.
    pub fn standard() -> Vec<Condition> {
        let mut out = vec![
            Condition::Observable,
            Condition::NonObservable,
            Condition::Supervised,
            Condition::RandomCnn,
        ];
        out.extend(Self::MASKED_RATIOS.map(Condition::PretrainMasked));
        out
    }

    pub fn parse(text: &str) -> Result<Condition> {
        let t = text.trim();
        Ok(match t {
            "observable" => Condition::Observable,
            "non_observable" => Condition::NonObservable,
            "supervised" => Condition::Supervised,
            "random_cnn" => Condition::RandomCnn,
            _ => {
                let inner = t
                    .strip_prefix("pretrain_masked(")
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| Error::config(format!("unknown condition `{t}`")))?;
                let p: f64 = inner
                    .parse()
                    .map_err(|_| Error::config(format!("bad mask ratio in `{t}`")))?;
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::config(format!("pretrain_masked ratio must lie in (0, 1), got {p}")));
                }
                Condition::PretrainMasked(p)
            }
        })
    }

    /// Anchor mask ratio used in pretraining, or `None` when the condition
    /// does not pretrain.
    pub fn pretrain_ratio(&self) -> Option<f64> {
        match self {
            Condition::Observable | Condition::NonObservable => Some(0.0),
            Condition::PretrainMasked(p) => Some(*p),
            Condition::Supervised | Condition::RandomCnn => None,
        }
    }

    pub fn probe_ratio(&self, configured: f64) -> f64 {
        match self {
            Condition::Observable => 0.0,
            _ => configured,
        }
    }

    pub fn frozen(&self) -> bool {
        !matches!(self, Condition::Supervised)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Observable => f.write_str("observable"),
            Condition::NonObservable => f.write_str("non_observable"),
            Condition::Supervised => f.write_str("supervised"),
            Condition::RandomCnn => f.write_str("random_cnn"),
            Condition::PretrainMasked(p) => write!(f, "pretrain_masked({p})"),
        }
    }
}

/// Dataset sizes in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepBudgets {
    pub pretrain: usize,
    pub probe_train: usize,
    pub probe_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBudget {
    pub updates: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Everything that determines an experiment's numbers, plus where to put
/// the outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `desk` or `paper`; the base the other keys override.
    pub profile: String,
    pub env: EnvConfig,
    pub encoder: EncoderConfig,
    /// Pretraining mask template; its ratio is used by single pretrain runs.
    pub mask: MaskSpec,
    pub mask_positives: bool,
    pub probe_mask_ratio: f64,
    pub steps: StepBudgets,
    pub pretrain: TrainingBudget,
    pub pretrain_log_every: usize,
    pub probe: TrainingBudget,
    pub entropy_threshold: f64,
    pub conditions: Vec<Condition>,
    pub seeds: usize,
    pub master_seed: u64,
    /// Read datasets from `<dir>/<split>` instead of collecting them.
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn format_layers(layers: &[ConvLayerConfig]) -> String {
    layers
        .iter()
        .map(|l| format!("{}:{}:{}:{}", l.out_channels, l.kernel, l.stride, l.padding))
        .collect::<Vec<_>>()
        .join(",")
}

/// `out:kernel:stride:padding` entries separated by commas.
fn parse_layers(value: &str) -> Result<Vec<ConvLayerConfig>> {
    value
        .split(',')
        .map(|entry| {
            let f: Vec<usize> = entry
                .trim()
                .split(':')
                .map(|x| parse_num("encoder.layers", x))
                .collect::<Result<_>>()?;
            match f[..] {
                [out_channels, kernel, stride, padding] => Ok(ConvLayerConfig {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                }),
                _ => Err(Error::config(format!(
                    "`encoder.layers`: `{entry}` is not out:kernel:stride:padding"
                ))),
            }
        })
        .collect()
}

impl ExperimentConfig {
    /// Single-core budget: 64x64 frames, compact encoder.
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: "desk".into(),
            env: EnvConfig::desk(),
            encoder: EncoderConfig::compact(),
            mask: MaskSpec::default(),
            mask_positives: false,
            probe_mask_ratio: 0.4,
            steps: StepBudgets {
                pretrain: 5000,
                probe_train: 3000,
                probe_test: 1000,
            },
            // A larger step than the paper profile makes up for far fewer updates.
            pretrain: TrainingBudget {
                updates: 3000,
                batch_size: 64,
                learning_rate: 1e-3,
            },
            pretrain_log_every: 50,
            probe: TrainingBudget {
                updates: 1500,
                batch_size: 64,
                learning_rate: 3e-4,
            },
            entropy_threshold: 0.6,
            conditions: Condition::standard(),
            seeds: 3,
            master_seed: 0,
            data_dir: None,
            out: PathBuf::from("mstdim-out"),
        }
    }

    /// Full-size frames and step counts; impractical without much more compute.
    pub fn paper() -> Self {
        ExperimentConfig {
            profile: "paper".into(),
            env: EnvConfig::paper(),
            encoder: EncoderConfig::atari(),
            steps: StepBudgets {
                pretrain: 80000,
                probe_train: 35000,
                probe_test: 10000,
            },
            pretrain: TrainingBudget {
                updates: 125000,
                batch_size: 64,
                learning_rate: 3e-4,
            },
            probe: TrainingBudget {
                updates: 54700,
                batch_size: 64,
                learning_rate: 3e-4,
            },
            ..ExperimentConfig::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::config(format!("unknown profile `{name}` (desk or paper)"))),
        }
    }

    /// Parses `key = value` lines (`#` starts a comment) over the profile
    /// named by `profile`, or `base` when the text names none.
    pub fn parse(text: &str, base: ExperimentConfig) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut config = match pairs.iter().find(|(k, _)| k == "profile") {
            Some((_, v)) => Self::profile(v)?,
            None => base,
        };
        // Keys that other keys refine go first.
        const FIRST: [&str; 2] = ["encoder.preset", "mask.granularity"];
        for first in FIRST {
            if let Some((k, v)) = pairs.iter().find(|(k, _)| k == first) {
                config.set(k, v)?;
            }
        }
        for (k, v) in &pairs {
            if k != "profile" && !FIRST.contains(&k.as_str()) {
                config.set(k, v)?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Self::desk())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "profile" => *self = Self::profile(v)?,
            "env.name" => self.env.name = v.to_string(),
            "env.height" => self.env.height = parse_num(key, v)?,
            "env.width" => self.env.width = parse_num(key, v)?,
            "env.agent_speed" => self.env.agent_speed = parse_num(key, v)?,
            "env.ball_speed" => self.env.ball_speed = parse_num(key, v)?,
            "env.ball_size" => self.env.ball_size = parse_num(key, v)?,
            "env.enemy_width" => self.env.enemy_width = parse_num(key, v)?,
            "env.enemy_height" => self.env.enemy_height = parse_num(key, v)?,
            "env.enemy_speed" => self.env.enemy_speed = parse_num(key, v)?,
            "env.episode_cap" => self.env.episode_cap = parse_num(key, v)?,
            "encoder.preset" => {
                self.encoder = match v {
                    "desk" => EncoderConfig::desk(),
                    "compact" => EncoderConfig::compact(),
                    "atari" => EncoderConfig::atari(),
                    _ => return Err(Error::config(format!("unknown encoder preset `{v}`"))),
                }
            }
            "encoder.layers" => self.encoder.layers = parse_layers(v)?,
            "encoder.local_layer" => self.encoder.local_layer = parse_num(key, v)?,
            "encoder.global_dim" => self.encoder.global_dim = parse_num(key, v)?,
            "mask.ratio" => self.mask.ratio = parse_num(key, v)?,
            "mask.granularity" => {
                self.mask.granularity = match v {
                    "pixel" => Granularity::Pixel,
                    "patch" => match self.mask.granularity {
                        Granularity::Patch(s) => Granularity::Patch(s),
                        Granularity::Pixel => Granularity::Patch(4),
                    },
                    _ => return Err(Error::config(format!("`{key}`: expected pixel or patch, got `{v}`"))),
                }
            }
            "mask.patch_side" => match self.mask.granularity {
                Granularity::Patch(_) => self.mask.granularity = Granularity::Patch(parse_num(key, v)?),
                Granularity::Pixel => {
                    return Err(Error::config("`mask.patch_side` needs `mask.granularity = patch`"))
                }
            },
            "mask.fill" => {
                self.mask.fill = match v {
                    "zero" => FillMode::Zero,
                    "uniform_noise" => FillMode::UniformNoise,
                    _ => return Err(Error::config(format!("`{key}`: expected zero or uniform_noise, got `{v}`"))),
                }
            }
            "mask.policy" => {
                self.mask.policy = match v {
                    "fresh_per_visit" => MaskPolicy::FreshPerVisit,
                    "fixed_per_observation" => MaskPolicy::FixedPerObservation,
                    _ => {
                        return Err(Error::config(format!(
                            "`{key}`: expected fresh_per_visit or fixed_per_observation, got `{v}`"
                        )))
                    }
                }
            }
            "mask.positives" => self.mask_positives = parse_bool(key, v)?,
            "probe.mask_ratio" => self.probe_mask_ratio = parse_num(key, v)?,
            "probe.updates" => self.probe.updates = parse_num(key, v)?,
            "probe.batch_size" => self.probe.batch_size = parse_num(key, v)?,
            "probe.learning_rate" => self.probe.learning_rate = parse_num(key, v)?,
            "probe.entropy_threshold" => self.entropy_threshold = parse_num(key, v)?,
            "pretrain.updates" => self.pretrain.updates = parse_num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(key, v)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse_num(key, v)?,
            "pretrain.log_every" => self.pretrain_log_every = parse_num(key, v)?,
            "steps.pretrain" => self.steps.pretrain = parse_num(key, v)?,
            "steps.probe_train" => self.steps.probe_train = parse_num(key, v)?,
            "steps.probe_test" => self.steps.probe_test = parse_num(key, v)?,
            "experiment.conditions" => {
                self.conditions = split_conditions(v).into_iter().map(Condition::parse).collect::<Result<_>>()?
            }
            "experiment.seeds" => self.seeds = parse_num(key, v)?,
            "experiment.master_seed" => self.master_seed = parse_num(key, v)?,
            "experiment.out" => self.out = PathBuf::from(v),
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let enc = self.encoder_for_env();
        enc.geometries()?;
        enc.local_shape()?;
        self.mask.validate(self.env.height, self.env.width)?;
        if !(0.0..=1.0).contains(&self.probe_mask_ratio) {
            return Err(Error::config(format!("probe.mask_ratio must lie in [0, 1], got {}", self.probe_mask_ratio)));
        }
        if self.conditions.is_empty() || self.seeds == 0 {
            return Err(Error::config("the experiment needs at least one condition and one seed"));
        }
        for (name, b) in [("pretrain", &self.pretrain), ("probe", &self.probe)] {
            if b.batch_size < 2 || b.learning_rate.is_nan() || b.learning_rate <= 0.0 {
                return Err(Error::config(format!("{name}: batch size must be >= 2 and learning rate positive")));
            }
        }
        if self.steps.pretrain < 2 || self.steps.probe_train == 0 || self.steps.probe_test == 0 {
            return Err(Error::config("step budgets must be positive"));
        }
        if self.entropy_threshold < 0.0 {
            return Err(Error::config("probe.entropy_threshold must be >= 0"));
        }
        Ok(())
    }

    /// Encoder config with the input shape of the configured frames.
    pub fn encoder_for_env(&self) -> EncoderConfig {
        self.encoder.clone().with_input(1, self.env.height, self.env.width)
    }

    /// Canonical `key = value` pairs; parsing them reproduces the config.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("profile", self.profile.clone());
        let e = &self.env;
        put("env.name", e.name.clone());
        put("env.height", e.height.to_string());
        put("env.width", e.width.to_string());
        put("env.agent_speed", e.agent_speed.to_string());
        put("env.ball_speed", e.ball_speed.to_string());
        put("env.ball_size", e.ball_size.to_string());
        put("env.enemy_width", e.enemy_width.to_string());
        put("env.enemy_height", e.enemy_height.to_string());
        put("env.enemy_speed", e.enemy_speed.to_string());
        put("env.episode_cap", e.episode_cap.to_string());
        put("encoder.layers", format_layers(&self.encoder.layers));
        put("encoder.local_layer", self.encoder.local_layer.to_string());
        put("encoder.global_dim", self.encoder.global_dim.to_string());
        for (k, v) in mask_pairs(&self.mask) {
            put(k, v);
        }
        put("mask.positives", self.mask_positives.to_string());
        put("probe.mask_ratio", self.probe_mask_ratio.to_string());
        put("probe.updates", self.probe.updates.to_string());
        put("probe.batch_size", self.probe.batch_size.to_string());
        put("probe.learning_rate", self.probe.learning_rate.to_string());
        put("probe.entropy_threshold", self.entropy_threshold.to_string());
        put("pretrain.updates", self.pretrain.updates.to_string());
        put("pretrain.batch_size", self.pretrain.batch_size.to_string());
        put("pretrain.learning_rate", self.pretrain.learning_rate.to_string());
        put("pretrain.log_every", self.pretrain_log_every.to_string());
        put("steps.pretrain", self.steps.pretrain.to_string());
        put("steps.probe_train", self.steps.probe_train.to_string());
        put("steps.probe_test", self.steps.probe_test.to_string());
        put(
            "experiment.conditions",
            self.conditions.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        put("experiment.seeds", self.seeds.to_string());
        put("experiment.master_seed", self.master_seed.to_string());
        put("experiment.out", self.out.display().to_string());
        if let Some(d) = &self.data_dir {
            put("data.dir", d.display().to_string());
        }
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of the canonical config, excluding only the output location.
    pub fn fingerprint(&self) -> String {
        let mut pairs = self.to_pairs();
        pairs.remove("experiment.out");
        digest_pairs(&pairs)
    }

    /// Hash of the settings that determine a pretrained checkpoint for an
    /// anchor mask ratio.
    pub fn pretrain_key(&self, ratio: f64) -> String {
        let mut pairs: BTreeMap<String, String> = self
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| {
                k.starts_with("env.")
                    || k.starts_with("encoder.")
                    || k.starts_with("mask.")
                    || k.starts_with("pretrain.")
                    || k == "steps.pretrain"
                    || k == "data.dir"
            })
            .collect();
        pairs.insert("mask.ratio".into(), ratio.to_string());
        pairs.remove("pretrain.log_every");
        digest_pairs(&pairs)
    }

    pub fn pretrain_mask(&self, ratio: f64) -> MaskSpec {
        MaskSpec { ratio, ..self.mask }
    }

    /// Probe-training masks: a new mask on every visit.
    pub fn probe_train_mask(&self, ratio: f64) -> MaskSpec {
        MaskSpec {
            ratio,
            policy: MaskPolicy::FreshPerVisit,
            ..self.mask
        }
    }

    /// Probe-test masks: fixed per observation.
    pub fn probe_test_mask(&self, ratio: f64) -> MaskSpec {
        MaskSpec {
            ratio,
            policy: MaskPolicy::FixedPerObservation,
            ..self.mask
        }
    }
}

fn split_conditions(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn mask_pairs(m: &MaskSpec) -> Vec<(&'static str, String)> {
    let (granularity, side) = match m.granularity {
        Granularity::Pixel => ("pixel", None),
        Granularity::Patch(s) => ("patch", Some(s)),
    };
    let mut out = vec![
        ("mask.ratio", m.ratio.to_string()),
        ("mask.granularity", granularity.to_string()),
        (
            "mask.fill",
            match m.fill {
                FillMode::Zero => "zero",
                FillMode::UniformNoise => "uniform_noise",
            }
            .to_string(),
        ),
        (
            "mask.policy",
            match m.policy {
                MaskPolicy::FreshPerVisit => "fresh_per_visit",
                MaskPolicy::FixedPerObservation => "fixed_per_observation",
            }
            .to_string(),
        ),
    ];
    if let Some(s) = side {
        out.push(("mask.patch_side", s.to_string()));
    }
    out
}

fn digest_pairs(pairs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in pairs {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable 64-bit seed from a master seed, a label and an index.
pub fn derive_seed(master: u64, label: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
