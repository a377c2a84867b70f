//! Synthetic prosody corpus with known style archetypes.
//!
//! Each archetype fixes a pitch contour (base level, sinusoid amplitude and
//! frequency), an energy level and spread, and a duration level and spread.
//! Phoneme identities add deterministic intrinsic offsets to duration, energy
//! and pitch, so the text carries real information about the target. Pitch and
//! energy are produced frame by frame and averaged per phoneme, mirroring how
//! phoneme-level features are extracted from real recordings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, normal, Substream};

pub const CHANNELS: usize = 3;
pub const PITCH: usize = 0;
pub const ENERGY: usize = 1;
pub const DURATION: usize = 2;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["pitch", "energy", "duration"];

/// Phoneme-level prosody: log-pitch, energy and log-duration over `L` phonemes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodySequence {
    len: usize,
    values: Vec<f64>,
}

impl ProsodySequence {
    /// `values` is channel-major: all `L` log-pitch values, then energy, then
    /// log-duration.
    pub fn new(values: Vec<f64>, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("prosody sequence needs at least one phoneme"));
        }
        if values.len() != CHANNELS * len {
            return Err(Error::ShapeMismatch {
                expected: vec![CHANNELS, len],
                actual: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prosody values must be finite"));
        }
        Ok(ProsodySequence { len, values })
    }

    pub fn from_channels(pitch: &[f64], energy: &[f64], duration: &[f64]) -> Result<Self> {
        if pitch.len() != energy.len() || pitch.len() != duration.len() {
            return Err(Error::invalid("channel lengths differ"));
        }
        let mut values = Vec::with_capacity(3 * pitch.len());
        values.extend_from_slice(pitch);
        values.extend_from_slice(energy);
        values.extend_from_slice(duration);
        Self::new(values, pitch.len())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `[1, 3, L]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, CHANNELS, self.len], self.values.clone()).expect("consistent shape")
    }

    /// Example `b` of a `[B, 3, L]` batch.
    pub fn from_batch(batch: &Tensor, b: usize) -> Result<Self> {
        let (_, c, l) = batch.dims3();
        if c != CHANNELS {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        Self::new(batch.example(b).to_vec(), l)
    }

    /// Stacks equal-length sequences into `[B, 3, L]`.
    pub fn batch(seqs: &[&ProsodySequence]) -> Result<Tensor> {
        let parts: Vec<Tensor> = seqs
            .iter()
            .map(|s| Tensor::new(vec![CHANNELS, s.len], s.values.clone()))
            .collect::<Result<_>>()?;
        Tensor::stack(&parts)
    }

    /// Pitch in Hz, raw energy, and duration in frames.
    pub fn to_raw_scale(&self) -> [Vec<f64>; CHANNELS] {
        [
            self.channel(PITCH).iter().map(|v| v.exp()).collect(),
            self.channel(ENERGY).to_vec(),
            self.channel(DURATION).iter().map(|v| v.exp()).collect(),
        ]
    }

    /// Multiplies raw-scale pitch, energy and duration by per-channel factors.
    /// Log channels shift by `ln(factor)`, so the raw values scale exactly.
    pub fn scale_raw(&self, factors: [f64; CHANNELS]) -> Result<Self> {
        if factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::invalid("scaling factors must be positive and finite"));
        }
        let mut out = self.clone();
        for (c, &f) in factors.iter().enumerate() {
            if f == 1.0 {
                continue;
            }
            let shift = f.ln();
            for v in out.channel_mut(c) {
                if c == ENERGY {
                    *v *= f;
                } else {
                    *v += shift;
                }
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self, phoneme_ids: &[usize]) -> String {
        let mut out = String::from("phoneme_id,log_pitch,energy,log_duration\n");
        for i in 0..self.len {
            writeln!(
                out,
                "{},{},{},{}",
                phoneme_ids[i],
                self.channel(PITCH)[i],
                self.channel(ENERGY)[i],
                self.channel(DURATION)[i]
            )
            .unwrap();
        }
        out
    }
}

/// Parses the `phoneme_id,log_pitch,energy,log_duration` CSV layout.
pub fn parse_prosody_csv(text: &str) -> Result<(Vec<usize>, ProsodySequence)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty prosody CSV".into()))?;
    if header.trim() != "phoneme_id,log_pitch,energy,log_duration" {
        return Err(Error::Format(format!("unexpected CSV header `{header}`")));
    }
    let (mut ids, mut p, mut e, mut d) = (vec![], vec![], vec![], vec![]);
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("malformed CSV row {}", n + 2));
        if fields.len() != 4 {
            return Err(bad());
        }
        ids.push(fields[0].parse().map_err(|_| bad())?);
        p.push(fields[1].parse().map_err(|_| bad())?);
        e.push(fields[2].parse().map_err(|_| bad())?);
        d.push(fields[3].parse().map_err(|_| bad())?);
    }
    Ok((ids, ProsodySequence::from_channels(&p, &e, &d)?))
}

/// Per-phoneme arithmetic mean of frame values between consecutive boundaries.
pub fn phoneme_average(frame_values: &[f64], boundaries: &[usize]) -> Result<Vec<f64>> {
    if boundaries.len() < 2 {
        return Err(Error::invalid("need at least two boundaries"));
    }
    if boundaries[0] != 0 || *boundaries.last().unwrap() != frame_values.len() {
        return Err(Error::invalid("boundaries must span all frames"));
    }
    boundaries
        .windows(2)
        .map(|w| {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!("empty segment {}..{}", w[0], w[1])));
            }
            let seg = &frame_values[w[0]..w[1]];
            Ok(seg.iter().sum::<f64>() / seg.len() as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchParams {
    /// Log of the base pitch in Hz.
    pub base: f64,
    pub amplitude: f64,
    /// Radians per phoneme.
    pub frequency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub mean: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleArchetype {
    pub id: usize,
    pub pitch: PitchParams,
    pub energy: LevelParams,
    /// Log-frames.
    pub duration: LevelParams,
}

const AMPLITUDES: [f64; 4] = [0.04, 0.20, 0.09, 0.14];
const FREQUENCIES: [f64; 4] = [0.30, 0.55, 0.40, 0.70];
const ENERGY_MEANS: [f64; 4] = [48.0, 70.0, 60.0, 40.0];
const ENERGY_SPREADS: [f64; 4] = [3.0, 8.0, 5.0, 4.0];
const DURATION_FRAMES: [f64; 4] = [9.0, 6.0, 7.5, 5.0];
const DURATION_SPREADS: [f64; 4] = [0.08, 0.20, 0.12, 0.10];

const PITCH_FRAME_NOISE: f64 = 0.015;
const PITCH_PHONEME_NOISE: f64 = 0.02;
const PHASE_JITTER: f64 = 0.3;
const DECLINATION: f64 = 0.008;
const ENERGY_FRAME_NOISE: f64 = 1.0;
/// Probability that a phoneme is drawn from the style's preferred band.
const STYLE_BAND_BIAS: f64 = 0.35;

impl StyleArchetype {
    /// Archetype `k`: base pitch rises by a factor 1.25 per style, the other
    /// parameters cycle through four contrasting settings.
    pub fn standard(k: usize) -> Self {
        let c = k % 4;
        let tier = (k / 4) as f64;
        StyleArchetype {
            id: k,
            pitch: PitchParams {
                base: (110.0f64).ln() + k as f64 * 1.25f64.ln(),
                amplitude: AMPLITUDES[c],
                frequency: FREQUENCIES[c] + 0.05 * tier,
            },
            energy: LevelParams {
                mean: ENERGY_MEANS[c] + 3.0 * tier,
                spread: ENERGY_SPREADS[c],
            },
            duration: LevelParams {
                mean: DURATION_FRAMES[c].ln(),
                spread: DURATION_SPREADS[c],
            },
        }
    }
}

fn intrinsic_duration(p: usize) -> f64 {
    0.3 * (1.3 * p as f64 + 0.5).sin()
}

fn intrinsic_energy(p: usize) -> f64 {
    6.0 * (0.9 * p as f64).cos()
}

fn intrinsic_pitch(p: usize) -> f64 {
    0.03 * (2.1 * p as f64).sin()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub phoneme_ids: Vec<usize>,
    pub prosody: ProsodySequence,
    pub style_id: usize,
}

impl Utterance {
    pub fn new(id: usize, phoneme_ids: Vec<usize>, prosody: ProsodySequence, style_id: usize) -> Self {
        Utterance {
            id,
            phoneme_ids,
            prosody,
            style_id,
        }
    }

    pub fn prosody(&self) -> &ProsodySequence {
        &self.prosody
    }

    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub archetypes: usize,
    pub utterances_per_style: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub validation_fraction: f64,
    /// Required ratio of between-style channel-mean gap to within-style spread.
    pub separation_margin: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            archetypes: 4,
            utterances_per_style: 250,
            min_len: 8,
            max_len: 24,
            vocab_size: 40,
            validation_fraction: 0.1,
            separation_margin: 2.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes < 2 {
            return Err(Error::invalid("need at least 2 style archetypes"));
        }
        if self.utterances_per_style == 0 {
            return Err(Error::invalid("need at least 1 utterance per style"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.vocab_size < self.archetypes {
            return Err(Error::invalid("vocabulary must have at least one phoneme per style"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-channel standardization fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalizer {
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a ProsodySequence>) -> Result<Self> {
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let mut n = 0usize;
        let seqs: Vec<_> = seqs.into_iter().collect();
        for s in &seqs {
            for c in 0..CHANNELS {
                sum[c] += s.channel(c).iter().sum::<f64>();
            }
            n += s.len();
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit normalization on an empty corpus"));
        }
        let mean = sum.map(|s| s / n as f64);
        for s in &seqs {
            for c in 0..CHANNELS {
                sq[c] += s.channel(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.map(|s| (s / n as f64).sqrt());
        if let Some(c) = (0..CHANNELS).find(|&c| std[c] < 1e-12) {
            return Err(Error::Degenerate(format!("channel {} has zero variance", CHANNEL_NAMES[c])));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, seq: &ProsodySequence) -> ProsodySequence {
        let mut out = seq.clone();
        for c in 0..CHANNELS {
            out.channel_mut(c)
                .iter_mut()
                .for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
        out
    }

    pub fn denormalize(&self, seq: &ProsodySequence) -> ProsodySequence {
        let mut out = seq.clone();
        for c in 0..CHANNELS {
            out.channel_mut(c)
                .iter_mut()
                .for_each(|v| *v = *v * self.std[c] + self.mean[c]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub archetypes: Vec<StyleArchetype>,
    pub utterances: Vec<Utterance>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub normalizer: Normalizer,
}

fn generate_utterance(
    id: usize,
    arch: &StyleArchetype,
    cfg: &CorpusConfig,
    rng: &mut rng::Rng,
) -> Result<Utterance> {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let band = cfg.vocab_size / cfg.archetypes;
    let band_start = (arch.id % cfg.archetypes) * band;
    let ids: Vec<usize> = (0..len)
        .map(|_| {
            if rng.random_bool(STYLE_BAND_BIAS) {
                band_start + rng.random_range(0..band)
            } else {
                rng.random_range(0..cfg.vocab_size)
            }
        })
        .collect();
    let phase = PHASE_JITTER * normal(rng);

    let mut log_duration = Vec::with_capacity(len);
    let mut pitch_frames = Vec::new();
    let mut energy_frames = Vec::new();
    let mut boundaries = vec![0];
    for (i, &p) in ids.iter().enumerate() {
        let d = arch.duration.mean + intrinsic_duration(p) + arch.duration.spread * normal(rng);
        log_duration.push(d);
        let frames = (d.exp().round() as usize).max(1);
        let pitch_level = arch.pitch.base + intrinsic_pitch(p) + PITCH_PHONEME_NOISE * normal(rng);
        let energy_level = arch.energy.mean + intrinsic_energy(p) + arch.energy.spread * normal(rng);
        for j in 0..frames {
            let pos = i as f64 + (j as f64 + 0.5) / frames as f64;
            let contour = arch.pitch.amplitude * (arch.pitch.frequency * pos + phase).sin();
            pitch_frames.push(pitch_level + contour - DECLINATION * pos + PITCH_FRAME_NOISE * normal(rng));
            energy_frames.push(energy_level + ENERGY_FRAME_NOISE * normal(rng));
        }
        boundaries.push(pitch_frames.len());
    }
    let pitch = phoneme_average(&pitch_frames, &boundaries)?;
    let energy = phoneme_average(&energy_frames, &boundaries)?;
    let prosody = ProsodySequence::from_channels(&pitch, &energy, &log_duration)?;
    Ok(Utterance::new(id, ids, prosody, arch.id))
}

/// Builds the full corpus deterministically from `(config, seed)`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = rng::stream(seed, Substream::Corpus);
    let archetypes: Vec<StyleArchetype> = (0..config.archetypes).map(StyleArchetype::standard).collect();
    let mut utterances = Vec::with_capacity(config.archetypes * config.utterances_per_style);
    for arch in &archetypes {
        for _ in 0..config.utterances_per_style {
            let id = utterances.len();
            utterances.push(generate_utterance(id, arch, config, &mut rng)?);
        }
    }
    check_separation(&utterances, config)?;

    let mut train = Vec::new();
    let mut validation = Vec::new();
    for k in 0..config.archetypes {
        let mut ids: Vec<usize> = (k * config.utterances_per_style..(k + 1) * config.utterances_per_style).collect();
        ids.shuffle(&mut rng);
        let n_val = (config.validation_fraction * ids.len() as f64).round() as usize;
        validation.extend_from_slice(&ids[..n_val]);
        train.extend_from_slice(&ids[n_val..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    let normalizer = Normalizer::fit(train.iter().map(|&i| utterances[i].prosody()))?;
    Ok(Corpus {
        config: config.clone(),
        seed,
        archetypes,
        utterances,
        train,
        validation,
        normalizer,
    })
}

/// Every pair of styles must differ in some channel's mean by at least
/// `margin` times the larger within-style spread of utterance means.
fn check_separation(utterances: &[Utterance], config: &CorpusConfig) -> Result<()> {
    let k = config.archetypes;
    let mut stats = vec![[(0.0, 0.0); CHANNELS]; k];
    for (style, stat) in stats.iter_mut().enumerate() {
        let members: Vec<&Utterance> = utterances.iter().filter(|u| u.style_id == style).collect();
        for (c, slot) in stat.iter_mut().enumerate() {
            let means: Vec<f64> = members
                .iter()
                .map(|u| {
                    let ch = u.prosody().channel(c);
                    ch.iter().sum::<f64>() / ch.len() as f64
                })
                .collect();
            let m = means.iter().sum::<f64>() / means.len() as f64;
            let sd = (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
            *slot = (m, sd);
        }
    }
    for a in 0..k {
        for b in a + 1..k {
            let separated = (0..CHANNELS).any(|c| {
                let (ma, sa) = stats[a][c];
                let (mb, sb) = stats[b][c];
                (ma - mb).abs() >= config.separation_margin * sa.max(sb)
            });
            if !separated {
                return Err(Error::Degenerate(format!(
                    "styles {a} and {b} are not separated by margin {}",
                    config.separation_margin
                )));
            }
        }
    }
    Ok(())
}

impl Corpus {
    pub fn utterance(&self, id: usize) -> &Utterance {
        &self.utterances[id]
    }

    pub fn train_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().map(|&i| &self.utterances[i])
    }

    pub fn validation_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.validation.iter().map(|&i| &self.utterances[i])
    }

    pub fn style_count(&self) -> usize {
        self.archetypes.len()
    }

    /// Writes `manifest.json` plus `utterances/utt_NNNNN.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let utt_dir = dir.join("utterances");
        std::fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
        let mut entries = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let file = format!("utterances/utt_{:05}.csv", u.id);
            let path = dir.join(&file);
            std::fs::write(&path, u.prosody().to_csv(&u.phoneme_ids)).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestUtterance {
                id: u.id,
                style_id: u.style_id,
                length: u.len(),
                file,
            });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            seed: self.seed,
            archetypes: self.archetypes.clone(),
            utterances: entries,
            train: self.train.clone(),
            validation: self.validation.clone(),
            normalization: self.normalizer,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for (i, m) in manifest.utterances.iter().enumerate() {
            if m.id != i {
                return Err(Error::Format(format!("manifest utterance {i} has id {}", m.id)));
            }
            let p: PathBuf = dir.join(&m.file);
            let csv = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let (ids, prosody) = parse_prosody_csv(&csv)?;
            if ids.len() != m.length {
                return Err(Error::Format(format!("{} has {} rows, manifest says {}", m.file, ids.len(), m.length)));
            }
            utterances.push(Utterance::new(m.id, ids, prosody, m.style_id));
        }
        Ok(Corpus {
            config: manifest.config,
            seed: manifest.seed,
            archetypes: manifest.archetypes,
            utterances,
            train: manifest.train,
            validation: manifest.validation,
            normalizer: manifest.normalization,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestUtterance {
    id: usize,
    style_id: usize,
    length: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: CorpusConfig,
    seed: u64,
    archetypes: Vec<StyleArchetype>,
    utterances: Vec<ManifestUtterance>,
    train: Vec<usize>,
    validation: Vec<usize>,
    normalization: Normalizer,
}
