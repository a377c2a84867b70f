//! Run configuration: one TOML document holding every setting a command
//! reads, so that the copy archived next to a run's outputs reproduces it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use prosody_diffusion::corpus::CorpusConfig;
use prosody_diffusion::denoiser::DenoiserConfig;
use prosody_diffusion::guidance::GuidanceParams;
use prosody_diffusion::model::{ModelConfig, TrainConfig};
use prosody_diffusion::schedule::ScheduleConfig;
use prosody_diffusion::style::StyleConfig;
use serde::{Deserialize, Serialize};

pub const ARCHIVE_NAME: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Diversified,
    Transfer,
    Control,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSettings {
    pub mode: SampleMode,
    /// Utterance CSV whose `phoneme_id` column supplies the text.
    pub text: Option<PathBuf>,
    /// Phoneme ids given inline; used when `text` is absent.
    pub phonemes: Vec<usize>,
    pub reference: Option<PathBuf>,
    pub token: Option<usize>,
    pub weights: Option<Vec<f64>>,
    pub raw_weights: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub unconditional: bool,
    /// Post-hoc multipliers for pitch, energy and duration on the raw scale.
    pub scale: [f64; 3],
    pub diagnostics: bool,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            mode: SampleMode::Diversified,
            text: None,
            phonemes: Vec::new(),
            reference: None,
            token: None,
            weights: None,
            raw_weights: None,
            seeds: Vec::new(),
            unconditional: false,
            scale: [1.0; 3],
            diagnostics: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub etas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_utterances: usize,
    /// Generations per validation utterance for the divergence metrics.
    pub repeats: usize,
    pub samples_per_token: usize,
    pub transfer_etas: Vec<f64>,
    pub svg: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            etas: vec![1.0, 3.0, 5.0, 7.0],
            sweep_seeds: vec![0, 1, 2],
            sweep_utterances: 24,
            repeats: 2,
            samples_per_token: 50,
            transfer_etas: vec![0.5, 1.0, 2.0],
            svg: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSettings {
    pub input: Option<PathBuf>,
    pub x: String,
    /// Columns to draw; empty means every column except `x`.
    pub y: Vec<String>,
}

impl Default for PlotSettings {
    fn default() -> Self {
        PlotSettings {
            input: None,
            x: "step".into(),
            y: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// When false, the denoisers train and sample with zeroed text features.
    pub text_condition: bool,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub denoiser: DenoiserConfig,
    pub style: StyleConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceParams,
    pub optimizer: TrainConfig,
    pub sample: SampleSettings,
    pub eval: EvalSettings,
    pub plot: PlotSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            text_condition: true,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            denoiser: DenoiserConfig::default(),
            style: StyleConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceParams::default(),
            optimizer: TrainConfig::default(),
            sample: SampleSettings::default(),
            eval: EvalSettings::default(),
            plot: PlotSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            denoiser: self.denoiser.clone(),
            style: self.style.clone(),
            schedule: self.schedule,
            vocab_size: self.corpus.vocab_size,
            text_condition: self.text_condition,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config().validate()?;
        self.guidance.validate()?;
        self.optimizer.validate()?;
        if self.guidance.steps != self.schedule.steps {
            bail!(
                "guidance.steps ({}) must equal schedule.steps ({})",
                self.guidance.steps,
                self.schedule.steps
            );
        }
        if self.sample.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            bail!("sample.scale factors must be positive");
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir` with every path made
    /// absolute, so a rerun from another directory reads the same inputs.
    pub fn archive(&self, dir: &Path) -> Result<PathBuf> {
        let mut resolved = self.clone();
        resolved.output_dir = absolute(dir)?;
        for p in [
            &mut resolved.paths.corpus,
            &mut resolved.paths.checkpoint,
            &mut resolved.paths.resume,
            &mut resolved.sample.text,
            &mut resolved.sample.reference,
            &mut resolved.plot.input,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(p)?;
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ARCHIVE_NAME);
        std::fs::write(&path, resolved.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}
