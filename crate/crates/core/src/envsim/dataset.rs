use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{variable_specs, Action, Category, EnvConfig, EnvState, VariableSpec};
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    ProbeTrain,
    ProbeTest,
}

impl Split {
    pub fn key(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::ProbeTrain => "probe_train",
            Split::ProbeTest => "probe_test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Pretrain => 1,
            Split::ProbeTrain => 2,
            Split::ProbeTest => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpan {
    pub episode: u32,
    pub start: usize,
    pub len: usize,
}

/// One frame with its labels.
#[derive(Debug, Clone)]
pub struct Observation<T = f32> {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub labels: Vec<u8>,
    pub step: usize,
    pub episode: u32,
}

/// Immutable collection of frames grouped into temporally ordered episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub env: EnvConfig,
    pub seed: u64,
    pub split: Split,
    pub channels: usize,
    pub variables: Vec<VariableSpec>,
    frames: Vec<u8>,
    labels: Vec<u8>,
    episodes: Vec<EpisodeSpan>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    env: EnvConfig,
    seed: u64,
    split: Split,
    channels: usize,
    height: usize,
    width: usize,
    frames: usize,
    episodes: usize,
    variables: Vec<ManifestVariable>,
    byte_order: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestVariable {
    name: String,
    category: String,
}

const FORMAT: &str = "mstdim-trajectories-v1";

/// Rolls out a uniform-random policy for `n_steps` frames, restarting the
/// environment every `episode_cap` steps. Each split draws from its own
/// random stream, so splits never share an episode.
pub fn collect_trajectories(
    config: &EnvConfig,
    seed: u64,
    n_steps: usize,
    split: Split,
) -> Result<TrajectoryDataset> {
    if n_steps == 0 {
        return Err(Error::config("collect_trajectories needs n_steps > 0"));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    let pixels = config.height * config.width;
    let specs = variable_specs();
    let mut frames = Vec::with_capacity(n_steps * pixels);
    let mut labels = Vec::with_capacity(n_steps * specs.len());
    let mut episodes = Vec::new();
    let mut produced = 0;
    while produced < n_steps {
        let len = config.episode_cap.min(n_steps - produced);
        episodes.push(EpisodeSpan {
            episode: episodes.len() as u32,
            start: produced,
            len,
        });
        let mut state = EnvState::reset(config, &mut rng)?;
        for t in 0..len {
            if t > 0 {
                let action = Action::from_index(rng.gen_range(0..Action::COUNT))?;
                state = state.step(config, action, &mut rng)?;
            }
            frames.extend(state.render(config));
            labels.extend(state.labels());
        }
        produced += len;
    }
    Ok(TrajectoryDataset {
        env: config.clone(),
        seed,
        split,
        channels: 1,
        variables: specs,
        frames,
        labels,
        episodes,
    })
}

impl TrajectoryDataset {
    /// Assembles a dataset from in-memory buffers (frames `[N, C, H, W]`,
    /// labels `[N, V]`), checking that the pieces agree.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        env: EnvConfig,
        seed: u64,
        split: Split,
        channels: usize,
        variables: Vec<VariableSpec>,
        frames: Vec<u8>,
        labels: Vec<u8>,
        episodes: Vec<EpisodeSpan>,
    ) -> Result<TrajectoryDataset> {
        if channels == 0 || variables.is_empty() {
            return Err(Error::config("dataset needs at least one channel and one variable"));
        }
        let n = labels.len() / variables.len();
        if labels.len() != n * variables.len() || frames.len() != n * channels * env.height * env.width {
            return Err(Error::config("frame and label buffers disagree on the number of frames"));
        }
        let mut next = 0;
        for e in &episodes {
            if e.start != next || e.len == 0 {
                return Err(Error::config("episodes must be contiguous and non-empty"));
            }
            next += e.len;
        }
        if next != n {
            return Err(Error::config("episodes do not cover all frames"));
        }
        Ok(TrajectoryDataset {
            env,
            seed,
            split,
            channels,
            variables,
            frames,
            labels,
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.variables.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.env.height
    }

    pub fn width(&self) -> usize {
        self.env.width
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.env.height * self.env.width
    }

    pub fn episodes(&self) -> &[EpisodeSpan] {
        &self.episodes
    }

    pub fn frame(&self, index: usize) -> &[u8] {
        &self.frames[index * self.frame_len()..(index + 1) * self.frame_len()]
    }

    pub fn frame_labels(&self, index: usize) -> &[u8] {
        let v = self.variables.len();
        &self.labels[index * v..(index + 1) * v]
    }

    pub fn variable_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::config(format!("unknown state variable `{name}`")))
    }

    /// Values of one variable over every frame.
    pub fn variable_values(&self, index: usize) -> impl Iterator<Item = u8> + '_ {
        let v = self.variables.len();
        self.labels.iter().skip(index).step_by(v).copied()
    }

    /// Writes frame `index` scaled to `[0, 1]` into `out`.
    pub fn write_image<T: Real>(&self, index: usize, out: &mut [T]) {
        let scale = T::from_f64(1.0 / 255.0);
        for (o, &p) in out.iter_mut().zip(self.frame(index)) {
            *o = T::from_f64(p as f64) * scale;
        }
    }

    pub fn observation<T: Real>(&self, index: usize) -> Observation<T> {
        let mut data = vec![T::zero(); self.frame_len()];
        self.write_image(index, &mut data);
        let span = self
            .episodes
            .iter()
            .find(|e| index >= e.start && index < e.start + e.len)
            .expect("index inside an episode");
        Observation {
            image: Tensor::from_vec(&[self.channels, self.height(), self.width()], data)
                .expect("frame length matches shape"),
            labels: self.frame_labels(index).to_vec(),
            step: index - span.start,
            episode: span.episode,
        }
    }

    /// All `(t, t + 1)` index pairs that stay within one episode.
    pub fn consecutive_pairs(&self) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .flat_map(|e| (e.start..e.start + e.len.saturating_sub(1)).map(|t| (t, t + 1)))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: FORMAT.to_string(),
            env: self.env.clone(),
            seed: self.seed,
            split: self.split,
            channels: self.channels,
            height: self.height(),
            width: self.width(),
            frames: self.len(),
            episodes: self.episodes.len(),
            variables: self
                .variables
                .iter()
                .map(|v| ManifestVariable {
                    name: v.name.clone(),
                    category: v.category.key().to_string(),
                })
                .collect(),
            byte_order: "little".to_string(),
        };
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(
            "manifest.json",
            serde_json::to_string_pretty(&manifest)
                .expect("manifest serializes")
                .as_bytes(),
        )?;
        write("frames.bin", &self.frames)?;
        write("labels.bin", &self.labels)?;
        write(
            "episodes.json",
            serde_json::to_string_pretty(&self.episodes)
                .expect("episodes serialize")
                .as_bytes(),
        )
    }

    /// Loads a dataset directory and checks every structural invariant.
    pub fn ingest(dir: &Path) -> Result<TrajectoryDataset> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?).map_err(|e| {
            let field = e.to_string();
            Error::ingest(&manifest_path, field, "manifest does not parse")
        })?;
        let bad = |file: &str, field: &str, reason: String| Error::ingest(dir.join(file), field, reason);

        if manifest.format != FORMAT {
            return Err(bad("manifest.json", "format", format!("expected {FORMAT}")));
        }
        if manifest.byte_order != "little" {
            return Err(bad("manifest.json", "byte_order", "only `little` is supported".into()));
        }
        if manifest.channels == 0 {
            return Err(bad("manifest.json", "channels", "must be positive".into()));
        }
        if manifest.height != manifest.env.height || manifest.width != manifest.env.width {
            return Err(bad(
                "manifest.json",
                "height",
                "frame size disagrees with env descriptor".into(),
            ));
        }
        let mut variables = Vec::with_capacity(manifest.variables.len());
        for v in &manifest.variables {
            let category = Category::from_key(&v.category).ok_or_else(|| {
                bad(
                    "manifest.json",
                    "variables.category",
                    format!("unknown category `{}` for `{}`", v.category, v.name),
                )
            })?;
            variables.push(VariableSpec {
                name: v.name.clone(),
                category,
            });
        }
        if variables.is_empty() {
            return Err(bad("manifest.json", "variables", "no state variables".into()));
        }

        let frame_len = manifest.channels * manifest.height * manifest.width;
        let frames = read("frames.bin")?;
        if frames.len() != manifest.frames * frame_len {
            return Err(bad(
                "frames.bin",
                "height",
                format!(
                    "expected {} frames of {}x{}x{} ({} bytes), found {} bytes",
                    manifest.frames,
                    manifest.channels,
                    manifest.height,
                    manifest.width,
                    manifest.frames * frame_len,
                    frames.len()
                ),
            ));
        }
        let labels = read("labels.bin")?;
        if labels.len() != manifest.frames * variables.len() {
            return Err(bad(
                "labels.bin",
                "variables",
                format!(
                    "expected {} label bytes ({} frames x {} variables), found {}",
                    manifest.frames * variables.len(),
                    manifest.frames,
                    variables.len(),
                    labels.len()
                ),
            ));
        }
        let episodes: Vec<EpisodeSpan> = serde_json::from_slice(&read("episodes.json")?)
            .map_err(|e| bad("episodes.json", "episodes", e.to_string()))?;
        if episodes.len() != manifest.episodes {
            return Err(bad(
                "episodes.json",
                "episodes",
                format!("manifest declares {} episodes", manifest.episodes),
            ));
        }
        let mut next = 0;
        for e in &episodes {
            if e.start != next || e.len == 0 {
                return Err(bad(
                    "episodes.json",
                    "start",
                    format!("episode {} does not start where the previous ended", e.episode),
                ));
            }
            next += e.len;
        }
        if next != manifest.frames {
            return Err(bad("episodes.json", "len", "episodes do not cover all frames".into()));
        }
        Ok(TrajectoryDataset {
            env: manifest.env,
            seed: manifest.seed,
            split: manifest.split,
            channels: manifest.channels,
            variables,
            frames,
            labels,
            episodes,
        })
    }
}

/// Shannon entropy (nats) of a variable's empirical value distribution.
pub fn label_entropy(dataset: &TrajectoryDataset, variable: &str) -> Result<f64> {
    let index = dataset.variable_index(variable)?;
    if dataset.is_empty() {
        return Err(Error::config("label_entropy on an empty dataset"));
    }
    Ok(entropy_of(dataset.variable_values(index)))
}

pub(crate) fn entropy_of(values: impl Iterator<Item = u8>) -> f64 {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    let mut n = 0usize;
    for v in values {
        *counts.entry(v).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}
