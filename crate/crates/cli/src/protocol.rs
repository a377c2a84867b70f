//! Evaluation protocols over a trained model and its corpus: distribution
//! divergence, guidance-scale sweeps, token control and style transfer.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use prosody_diffusion::compute::Tensor;
use prosody_diffusion::corpus::{Corpus, ProsodySequence, CHANNELS};
use prosody_diffusion::denoiser::StyleCondition;
use prosody_diffusion::eval::{channel_js, cluster_separation, raw_descriptor, sequence_cv, DEFAULT_BINS};
use prosody_diffusion::guidance::GuidanceParams;
use prosody_diffusion::model::ProsodyModel;
use prosody_diffusion::rng::{self, Substream};
use prosody_diffusion::style::TokenWeights;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Largest number of same-length sequences sampled together.
pub const BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct Job {
    pub phonemes: Vec<usize>,
    /// One-row condition, or `None` for the unconditional path.
    pub condition: Option<StyleCondition>,
}

fn stack(conditions: &[&StyleCondition]) -> Result<StyleCondition> {
    let d = conditions[0].tensor().shape()[1];
    let values = conditions.iter().flat_map(|c| c.tensor().values().iter().copied()).collect();
    Ok(StyleCondition::new(Tensor::new(vec![conditions.len(), d], values)?)?)
}

/// Samples every job, batching equal-length jobs. Batch `k` (in length
/// order) draws from position `k` of the seed's sampling stream.
pub fn generate_jobs(model: &ProsodyModel, jobs: &[Job], params: &GuidanceParams, seed: u64) -> Result<Vec<ProsodySequence>> {
    let mut groups: BTreeMap<(usize, bool), Vec<usize>> = BTreeMap::new();
    for (i, j) in jobs.iter().enumerate() {
        groups.entry((j.phonemes.len(), j.condition.is_some())).or_default().push(i);
    }
    let mut out: Vec<Option<ProsodySequence>> = vec![None; jobs.len()];
    let mut block = 0u64;
    for ((_, conditioned), idx) in groups {
        for chunk in idx.chunks(BATCH) {
            let mut r = rng::at_index(seed, Substream::Sampling, block);
            block += 1;
            let phonemes: Vec<&[usize]> = chunk.iter().map(|&i| jobs[i].phonemes.as_slice()).collect();
            let condition = if conditioned {
                let rows: Vec<&StyleCondition> = chunk.iter().filter_map(|&i| jobs[i].condition.as_ref()).collect();
                Some(stack(&rows)?)
            } else {
                None
            };
            let (seqs, _) = model.generate(&phonemes, condition.as_ref(), params, &mut r)?;
            for (&i, s) in chunk.iter().zip(seqs) {
                out[i] = Some(s);
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every job sampled")).collect())
}

fn train_by_style(corpus: &Corpus) -> Vec<Vec<usize>> {
    let mut by_style = vec![Vec::new(); corpus.style_count()];
    for &i in &corpus.train {
        by_style[corpus.utterances[i].style_id].push(i);
    }
    by_style
}

/// For each validation utterance, `repeats` jobs on its text with the style
/// of a random training utterance of the same archetype. Returns the jobs
/// and their archetype ids.
pub fn validation_jobs(model: &ProsodyModel, corpus: &Corpus, repeats: usize, seed: u64) -> Result<(Vec<Job>, Vec<usize>)> {
    let mut r = rng::stream(seed, Substream::Eval);
    let by_style = train_by_style(corpus);
    let (mut jobs, mut styles) = (Vec::new(), Vec::new());
    for _ in 0..repeats {
        for u in corpus.validation_utterances() {
            let pool = &by_style[u.style_id];
            if pool.is_empty() {
                bail!("archetype {} has no training utterances", u.style_id);
            }
            let reference = &corpus.utterances[pool[r.random_range(0..pool.len())]];
            let (c, _) = model.encode_reference(reference.prosody())?;
            jobs.push(Job {
                phonemes: u.phoneme_ids.clone(),
                condition: Some(c),
            });
            styles.push(u.style_id);
        }
    }
    Ok((jobs, styles))
}

/// Per-channel divergence against held-out data, computed within each
/// archetype and averaged over archetypes.
pub fn grouped_js(corpus: &Corpus, generated: &[ProsodySequence], styles: &[usize]) -> Result<[f64; CHANNELS]> {
    let k = corpus.style_count();
    let mut acc = [0.0; CHANNELS];
    for s in 0..k {
        let gen: Vec<ProsodySequence> = generated
            .iter()
            .zip(styles)
            .filter(|(_, &st)| st == s)
            .map(|(g, _)| g.clone())
            .collect();
        let truth: Vec<ProsodySequence> = corpus
            .validation_utterances()
            .filter(|u| u.style_id == s)
            .map(|u| u.prosody().clone())
            .collect();
        let js = channel_js(&gen, &truth, DEFAULT_BINS)?;
        for c in 0..CHANNELS {
            acc[c] += js[c] / k as f64;
        }
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergence {
    pub conditional: [f64; CHANNELS],
    pub unconditional: [f64; CHANNELS],
}

/// Divergence of conditional sampling under `params` and of the
/// unconditional path, on the same texts and seeds.
pub fn divergence(model: &ProsodyModel, corpus: &Corpus, params: &GuidanceParams, repeats: usize, seed: u64) -> Result<Divergence> {
    let (jobs, styles) = validation_jobs(model, corpus, repeats, seed)?;
    let conditional = grouped_js(corpus, &generate_jobs(model, &jobs, params, seed)?, &styles)?;
    let bare: Vec<Job> = jobs
        .into_iter()
        .map(|j| Job {
            condition: None,
            ..j
        })
        .collect();
    let unconditional = grouped_js(corpus, &generate_jobs(model, &bare, params, seed)?, &styles)?;
    Ok(Divergence {
        conditional,
        unconditional,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub eta: f64,
    pub cv: [f64; CHANNELS],
}

/// Mean per-utterance CV at each guiding scale over the first `utterances`
/// validation texts and every seed.
pub fn eta_sweep(
    model: &ProsodyModel,
    corpus: &Corpus,
    base: &GuidanceParams,
    etas: &[f64],
    seeds: &[u64],
    utterances: usize,
) -> Result<Vec<SweepRow>> {
    if etas.is_empty() || seeds.is_empty() {
        bail!("sweep needs at least one eta and one seed");
    }
    let (mut jobs, _) = validation_jobs(model, corpus, 1, seeds[0])?;
    jobs.truncate(utterances.max(1));
    etas.iter()
        .map(|&eta| {
            let params = GuidanceParams { eta, ..*base };
            let mut sum = [0.0; CHANNELS];
            let mut n = 0.0;
            for &seed in seeds {
                for s in generate_jobs(model, &jobs, &params, seed)? {
                    let cv = sequence_cv(&s)?;
                    for c in 0..CHANNELS {
                        sum[c] += cv[c];
                    }
                    n += 1.0;
                }
            }
            Ok(SweepRow {
                eta,
                cv: sum.map(|v| v / n),
            })
        })
        .collect()
}

/// For each archetype, the token with the highest mean attention weight over
/// its training utterances, assigned greedily so tokens are distinct.
pub fn dominant_tokens(model: &ProsodyModel, corpus: &Corpus) -> Result<Vec<usize>> {
    let k = corpus.style_count();
    let t = model.token_count();
    if k > t {
        bail!("{k} archetypes but only {t} tokens");
    }
    let mut mean = vec![vec![0.0; t]; k];
    let mut count = vec![0.0f64; k];
    for u in corpus.train_utterances() {
        let (_, w) = model.encode_reference(u.prosody())?;
        for (m, v) in mean[u.style_id].iter_mut().zip(w.as_slice()) {
            *m += v;
        }
        count[u.style_id] += 1.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * t);
    for s in 0..k {
        for j in 0..t {
            pairs.push((mean[s][j] / count[s].max(1.0), s, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![None; k];
    let mut used = vec![false; t];
    for (_, s, j) in pairs {
        if assigned[s].is_none() && !used[j] {
            assigned[s] = Some(j);
            used[j] = true;
        }
    }
    Ok(assigned.into_iter().map(|a| a.expect("k <= t")).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenControl {
    pub tokens: Vec<usize>,
    pub accuracy: f64,
    /// Mean accuracy over label shuffles of the same descriptors.
    pub baseline: f64,
}

pub const BASELINE_SHUFFLES: usize = 20;

/// Generates `per_token` samples from each one-hot token condition and
/// measures how well their descriptors cluster by token.
pub fn token_control(
    model: &ProsodyModel,
    corpus: &Corpus,
    tokens: &[usize],
    per_token: usize,
    params: &GuidanceParams,
    seed: u64,
) -> Result<TokenControl> {
    let texts: Vec<&[usize]> = corpus.validation_utterances().map(|u| u.phoneme_ids.as_slice()).collect();
    if texts.is_empty() {
        bail!("no validation texts");
    }
    let mut jobs = Vec::new();
    let mut labels = Vec::new();
    for &tok in tokens {
        let c = model
            .bank
            .condition_from_weights(&TokenWeights::one_hot(tok, model.token_count())?)?;
        for i in 0..per_token {
            jobs.push(Job {
                phonemes: texts[i % texts.len()].to_vec(),
                condition: Some(c.clone()),
            });
            labels.push(tok);
        }
    }
    let generated = generate_jobs(model, &jobs, params, seed)?;
    let mut samples = Vec::with_capacity(generated.len());
    for (s, &l) in generated.iter().zip(&labels) {
        samples.push((l, raw_descriptor(s)?));
    }
    let accuracy = cluster_separation(&samples)?;
    let mut r = rng::stream(seed, Substream::Eval);
    let mut shuffled = labels.clone();
    let mut total = 0.0;
    for _ in 0..BASELINE_SHUFFLES {
        shuffled.shuffle(&mut r);
        let relabeled: Vec<_> = shuffled.iter().zip(&samples).map(|(&l, (_, d))| (l, *d)).collect();
        total += cluster_separation(&relabeled)?;
    }
    Ok(TokenControl {
        tokens: tokens.to_vec(),
        accuracy,
        baseline: total / BASELINE_SHUFFLES as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub reference: usize,
    pub text_style: usize,
    /// `(eta, mean pitch CV)` per guiding scale.
    pub rows: Vec<(f64, f64)>,
}

fn pitch_cv(s: &ProsodySequence) -> Result<f64> {
    Ok(sequence_cv(s)?[0])
}

/// Transfers the training utterance with the most pitch variation onto the
/// validation texts of the archetype with the least, sweeping the guiding scale.
pub fn transfer_sweep(
    model: &ProsodyModel,
    corpus: &Corpus,
    base: &GuidanceParams,
    etas: &[f64],
    seeds: &[u64],
    texts: usize,
) -> Result<Transfer> {
    if etas.is_empty() || seeds.is_empty() {
        bail!("transfer sweep needs at least one eta and one seed");
    }
    let mut reference = None;
    let mut best = f64::NEG_INFINITY;
    for u in corpus.train_utterances() {
        let cv = pitch_cv(u.prosody())?;
        if cv > best {
            best = cv;
            reference = Some(u.id);
        }
    }
    let reference = reference.expect("nonempty training split");
    let mut style_cv = vec![(0.0, 0.0); corpus.style_count()];
    for u in corpus.train_utterances() {
        style_cv[u.style_id].0 += pitch_cv(u.prosody())?;
        style_cv[u.style_id].1 += 1.0;
    }
    let text_style = (0..style_cv.len())
        .min_by(|&a, &b| (style_cv[a].0 / style_cv[a].1).total_cmp(&(style_cv[b].0 / style_cv[b].1)))
        .expect("at least two archetypes");
    let (c, _) = model.encode_reference(corpus.utterances[reference].prosody())?;
    let jobs: Vec<Job> = corpus
        .validation_utterances()
        .filter(|u| u.style_id == text_style)
        .take(texts.max(1))
        .map(|u| Job {
            phonemes: u.phoneme_ids.clone(),
            condition: Some(c.clone()),
        })
        .collect();
    let rows = etas
        .iter()
        .map(|&eta| {
            let params = GuidanceParams { eta, ..*base };
            let (mut sum, mut n) = (0.0, 0.0);
            for &seed in seeds {
                for s in generate_jobs(model, &jobs, &params, seed)? {
                    sum += pitch_cv(&s)?;
                    n += 1.0;
                }
            }
            Ok((eta, sum / n))
        })
        .collect::<Result<_>>()?;
    Ok(Transfer {
        reference,
        text_style,
        rows,
    })
}
