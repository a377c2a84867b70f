//! The trained bundle: both denoisers, the style bank, the frozen text
//! features, normalization statistics, and the training loop around them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::compute::checkpoint::{self, Entry};
use crate::compute::{Adam, ParamSet, Tensor};
use crate::corpus::{Corpus, Normalizer, ProsodySequence};
use crate::denoiser::{Denoiser, DenoiserConfig, StyleCondition, TextEmbedding, TextEncoder};
use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceParams, StepDiagnostics, TrainBatch};
use crate::rng::{self, Rng, Substream};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::style::{StyleBank, StyleConfig, TokenWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub style: StyleConfig,
    pub schedule: ScheduleConfig,
    pub vocab_size: usize,
    /// When false, both denoisers see an all-zero text embedding.
    #[serde(default = "enabled")]
    pub text_condition: bool,
}

fn enabled() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            denoiser: DenoiserConfig::default(),
            style: StyleConfig::default(),
            schedule: ScheduleConfig::default(),
            vocab_size: 40,
            text_condition: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.style.validate()?;
        if self.style.token_dim != self.denoiser.condition_dim {
            return Err(Error::invalid(format!(
                "style token_dim {} must equal denoiser condition_dim {}",
                self.style.token_dim, self.denoiser.condition_dim
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        NoiseSchedule::from_config(&self.schedule)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            steps: 4000,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Adam::default()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    seed: u64,
    step: u64,
    normalizer: Normalizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyModel {
    pub config: ModelConfig,
    pub theta1: Denoiser,
    pub theta2: Denoiser,
    pub bank: StyleBank,
    pub text: TextEncoder,
    pub normalizer: Normalizer,
    pub seed: u64,
    /// Completed training steps.
    pub step: u64,
    schedule: NoiseSchedule,
}

impl ProsodyModel {
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, Substream::Init);
        let theta1 = Denoiser::new(config.denoiser.clone(), true, "theta1", &mut r)?;
        let theta2 = Denoiser::new(config.denoiser.clone(), false, "theta2", &mut r)?;
        let bank = StyleBank::new(config.style.clone(), &mut r)?;
        let text = TextEncoder::new(config.vocab_size, config.denoiser.condition_dim, &mut r)?;
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok(ProsodyModel {
            config,
            theta1,
            theta2,
            bank,
            text,
            normalizer,
            seed,
            step: 0,
            schedule,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn token_count(&self) -> usize {
        self.bank.token_count()
    }

    /// Text embedding for equal-length phoneme sequences.
    pub fn embed_text(&self, batch: &[&[usize]]) -> Result<TextEmbedding> {
        let y = self.text.embed(batch)?;
        Ok(if self.config.text_condition { y } else { y.zeros_like() })
    }

    /// Style condition of one reference given on the corpus (log) scale.
    pub fn encode_reference(&self, reference: &ProsodySequence) -> Result<(StyleCondition, TokenWeights)> {
        let norm = self.normalizer.normalize(reference);
        let (c, mut w) = self.bank.encode_batch(&norm.to_tensor())?;
        Ok((c, w.remove(0)))
    }

    pub fn encode_references(&self, refs: &[&ProsodySequence]) -> Result<(StyleCondition, Vec<TokenWeights>)> {
        let norm: Vec<ProsodySequence> = refs.iter().map(|r| self.normalizer.normalize(r)).collect();
        let batch = ProsodySequence::batch(&norm.iter().collect::<Vec<_>>())?;
        self.bank.encode_batch(&batch)
    }

    /// Samples prosody for equal-length phoneme sequences and returns it on
    /// the corpus scale. A one-row condition is shared by the whole batch.
    pub fn generate(
        &self,
        phonemes: &[&[usize]],
        condition: Option<&StyleCondition>,
        params: &GuidanceParams,
        rng: &mut Rng,
    ) -> Result<(Vec<ProsodySequence>, Vec<StepDiagnostics>)> {
        let y = self.embed_text(phonemes)?;
        let b = phonemes.len();
        let expanded;
        let c = match condition {
            Some(c) if c.tensor().shape()[0] == 1 && b > 1 => {
                expanded = c.repeat_example(0, b);
                Some(&expanded)
            }
            other => other,
        };
        let (x0, diag) =
            guidance::sample_with_diagnostics(&self.theta1, &self.theta2, &y, c, params, &self.schedule, rng)?;
        let out = (0..b)
            .map(|i| ProsodySequence::from_batch(&x0, i).map(|s| self.normalizer.denormalize(&s)))
            .collect::<Result<_>>()?;
        Ok((out, diag))
    }

    fn sets(&self) -> [&ParamSet; 3] {
        [self.theta1.params(), self.theta2.params(), self.bank.params()]
    }

    fn sets_mut(&mut self) -> [&mut ParamSet; 3] {
        [self.theta1.params_mut(), self.theta2.params_mut(), self.bank.params_mut()]
    }

    pub fn to_entries(&self) -> Result<Vec<Entry>> {
        let meta = Meta {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            normalizer: self.normalizer,
        };
        let bytes = serde_json::to_vec(&meta)?;
        let mut entries = vec![Entry::new("meta.json", vec![bytes.len()], bytes.iter().map(|&b| f64::from(b)).collect())];
        entries.push(Entry::new(
            "text.table",
            vec![self.text.vocab_size(), self.text.dim()],
            self.text.table().to_vec(),
        ));
        for set in self.sets() {
            for p in set.iter() {
                let base = format!("{}.{}", set.tag(), p.name);
                let n = p.tensor.len();
                entries.push(Entry::new(base.clone(), p.tensor.shape().to_vec(), p.tensor.values().to_vec()));
                entries.push(Entry::new(format!("adam.{base}.m"), vec![n], p.first_moment.clone()));
                entries.push(Entry::new(format!("adam.{base}.v"), vec![n], p.second_moment.clone()));
                entries.push(Entry::new(format!("adam.{base}.n"), vec![1], vec![p.step_counter as f64]));
            }
        }
        Ok(entries)
    }

    pub fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut by_name: BTreeMap<String, Entry> = entries.into_iter().map(|e| (e.name.clone(), e)).collect();
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };
        let meta = take("meta.json")?;
        let bytes: Vec<u8> = meta.values.iter().map(|&v| v as u8).collect();
        let meta: Meta = serde_json::from_slice(&bytes)?;
        let mut model = ProsodyModel::new(meta.config, meta.normalizer, meta.seed)?;
        model.step = meta.step;
        let table = take("text.table")?;
        model.text = TextEncoder::from_table(model.config.vocab_size, model.config.denoiser.condition_dim, table.values)?;
        for set in model.sets_mut() {
            let tag = set.tag().to_string();
            for p in set.iter_mut() {
                let base = format!("{tag}.{}", p.name);
                let v = take(&base)?;
                crate::error::ensure_shape(p.tensor.shape(), &v.shape)?;
                p.tensor.values_mut().copy_from_slice(&v.values);
                let n = p.tensor.len();
                let m = take(&format!("adam.{base}.m"))?;
                let s = take(&format!("adam.{base}.v"))?;
                if m.values.len() != n || s.values.len() != n {
                    return Err(Error::Format(format!("optimizer state for `{base}` has the wrong size")));
                }
                p.first_moment = m.values;
                p.second_moment = s.values;
                p.step_counter = take(&format!("adam.{base}.n"))?.values[0] as u64;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_entries()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(checkpoint::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_c: f64,
    pub loss_nc: f64,
}

/// Training utterances grouped by length, so each minibatch is rectangular.
#[derive(Clone, Debug)]
pub struct LengthBuckets {
    buckets: Vec<Vec<usize>>,
    total: usize,
}

impl LengthBuckets {
    pub fn new(corpus: &Corpus) -> Result<Self> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &corpus.train {
            map.entry(corpus.utterances[i].len()).or_default().push(i);
        }
        let buckets: Vec<Vec<usize>> = map.into_values().collect();
        let total = buckets.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::invalid("corpus has no training utterances"));
        }
        Ok(LengthBuckets { buckets, total })
    }

    /// A bucket chosen in proportion to its size, then up to `batch`
    /// distinct utterances from it.
    pub fn draw(&self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        let mut pick = rng.random_range(0..self.total);
        let bucket = self
            .buckets
            .iter()
            .find(|b| {
                if pick < b.len() {
                    true
                } else {
                    pick -= b.len();
                    false
                }
            })
            .expect("pick below total");
        let mut ids = bucket.clone();
        ids.shuffle(rng);
        ids.truncate(batch);
        ids
    }
}

/// Normalized minibatch for `ids`; each utterance serves as its own style reference.
pub fn make_batch(model: &ProsodyModel, corpus: &Corpus, ids: &[usize]) -> Result<TrainBatch> {
    let seqs: Vec<ProsodySequence> = ids
        .iter()
        .map(|&i| model.normalizer.normalize(corpus.utterances[i].prosody()))
        .collect();
    let x0 = ProsodySequence::batch(&seqs.iter().collect::<Vec<_>>())?;
    let phonemes: Vec<&[usize]> = ids.iter().map(|&i| corpus.utterances[i].phoneme_ids.as_slice()).collect();
    Ok(TrainBatch {
        y: model.embed_text(&phonemes)?,
        reference: x0.clone(),
        x0,
    })
}

/// Advances training until `model.step == config.steps`, calling `on_step`
/// after every update.
///
/// Each step draws from its own position in the training stream, so a run
/// resumed from a checkpoint continues exactly as an uninterrupted one.
pub fn train(
    model: &mut ProsodyModel,
    corpus: &Corpus,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &ProsodyModel) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if corpus.normalizer != model.normalizer {
        return Err(Error::invalid("corpus normalization differs from the model's"));
    }
    if corpus.config.vocab_size > model.config.vocab_size {
        return Err(Error::invalid("corpus vocabulary exceeds the model's"));
    }
    let buckets = LengthBuckets::new(corpus)?;
    let optimizer = config.optimizer();
    let schedule = model.schedule.clone();
    while model.step < config.steps {
        let mut r = rng::at_index(model.seed, Substream::Training, model.step);
        let ids = buckets.draw(config.batch_size, &mut r);
        let batch = make_batch(model, corpus, &ids)?;
        let (loss_c, loss_nc) = guidance::train_step(
            &mut model.theta1,
            &mut model.theta2,
            &mut model.bank,
            &batch,
            &optimizer,
            &schedule,
            &mut r,
        )?;
        model.step += 1;
        on_step(&StepRecord { step: model.step, loss_c, loss_nc }, model)?;
    }
    Ok(())
}

/// Mean per-element diffusion loss of both denoisers on held-out data at
/// fixed step indices; used for quick progress checks.
pub fn validation_loss(model: &ProsodyModel, corpus: &Corpus, steps: &[usize], seed: u64) -> Result<(f64, f64)> {
    let mut r = rng::stream(seed, Substream::Eval);
    let (mut sum_c, mut sum_nc, mut n) = (0.0, 0.0, 0usize);
    for &i in &corpus.validation {
        let batch = make_batch(model, corpus, &[i])?;
        let (c, _) = model.bank.encode_batch(&batch.reference)?;
        for &t in steps {
            let eps = Tensor::new(batch.x0.shape().to_vec(), rng::normals(&mut r, batch.x0.len()))?;
            let s = [t];
            sum_c += guidance::diffusion_loss(&model.theta1, &batch.x0, &s, &eps, &batch.y, Some(&c), &model.schedule)?;
            sum_nc += guidance::diffusion_loss(&model.theta2, &batch.x0, &s, &eps, &batch.y, None, &model.schedule)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no validation utterances"));
    }
    Ok((sum_c / n as f64, sum_nc / n as f64))
}
