//! Subcommand bodies. Each one takes a resolved [`RunConfig`], archives it
//! into its output directory, and writes plain-file artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use prosody_diffusion::corpus::{
    generate_corpus, parse_prosody_csv, Corpus, ProsodySequence, CHANNEL_NAMES, DURATION, ENERGY, PITCH,
};
use prosody_diffusion::guidance::StepDiagnostics;
use prosody_diffusion::model::{self, ProsodyModel};
use prosody_diffusion::rng::{self, Substream};
use prosody_diffusion::schedule::NoiseSchedule;
use prosody_diffusion::style::TokenWeights;
use rand::Rng as _;

use crate::config::{RunConfig, SampleMode};
use crate::{plot, protocol};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("missing {what}"))
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.corpus.validate()?;
    let out = &cfg.output_dir;
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    corpus.save(out)?;
    cfg.archive(out)?;
    Ok(out.clone())
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = require(&cfg.paths.corpus, "corpus directory (paths.corpus / --corpus)")?;
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

pub fn load_model(cfg: &RunConfig) -> Result<ProsodyModel> {
    let path = require(&cfg.paths.checkpoint, "checkpoint (paths.checkpoint / --checkpoint)")?;
    ProsodyModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn loss_rows_up_to(path: &Path, step: u64) -> Result<String> {
    let mut kept = String::from("step,loss_c,loss_nc\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: u64 = line.split(',').next().unwrap_or("").parse().unwrap_or(u64::MAX);
            if s <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    Ok(kept)
}

/// Trains (or resumes) and writes `loss.csv`, periodic checkpoints under
/// `checkpoints/`, and the final `model.ckpt`.
pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let corpus = load_corpus(cfg)?;
    let mut cfg = cfg.clone();
    cfg.corpus = corpus.config.clone();
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(out.join("checkpoints")).with_context(|| format!("creating {}", out.display()))?;
    let mut model = match &cfg.paths.resume {
        Some(p) => {
            let m = ProsodyModel::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if m.config != cfg.model_config() || m.seed != cfg.seed || m.normalizer != corpus.normalizer {
                bail!("corpus/config mismatch: checkpoint {} was trained with different settings", p.display());
            }
            m
        }
        None => ProsodyModel::new(cfg.model_config(), corpus.normalizer, cfg.seed)?,
    };
    cfg.archive(&out)?;
    let loss_path = out.join("loss.csv");
    let mut log = loss_rows_up_to(&loss_path, model.step)?;
    let every = cfg.optimizer.checkpoint_every;
    model::train(&mut model, &corpus, &cfg.optimizer, |rec, m| {
        writeln!(log, "{},{},{}", rec.step, rec.loss_c, rec.loss_nc).expect("string write");
        if every > 0 && rec.step % every == 0 {
            m.save(&out.join("checkpoints").join(format!("step_{:07}.ckpt", rec.step)))?;
        }
        Ok(())
    })?;
    write(&loss_path, log)?;
    let final_path = out.join("model.ckpt");
    model.save(&final_path)?;
    Ok(final_path)
}

fn read_sequence(path: &Path) -> Result<(Vec<usize>, ProsodySequence)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_prosody_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

/// The sampler always runs the checkpoint's own step count.
fn with_checkpoint_schedule(cfg: &RunConfig, model: &ProsodyModel) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.schedule = model.config.schedule;
    cfg.guidance.steps = model.schedule().steps();
    cfg
}

fn diagnostics_csv(diag: &[StepDiagnostics]) -> String {
    let mut s = String::from("t,sigma_cond,sigma_cfg,applied_ratio\n");
    for d in diag {
        let r = d.per_example[0];
        writeln!(s, "{},{},{},{}", d.t, r.sigma_cond, r.sigma_cfg, r.applied_ratio).expect("string write");
    }
    s
}

/// Denormalized values (Hz, energy, frames) times the per-channel factors.
fn raw_csv(seq: &ProsodySequence, text: &[usize], scale: [f64; 3]) -> String {
    let mut out = String::from("phoneme_id,pitch_hz,energy,duration_frames\n");
    let (p, e, d) = (seq.channel(PITCH), seq.channel(ENERGY), seq.channel(DURATION));
    for i in 0..seq.len() {
        writeln!(
            out,
            "{},{},{},{}",
            text[i],
            p[i].exp() * scale[0],
            e[i] * scale[1],
            d[i].exp() * scale[2]
        )
        .expect("string write");
    }
    out
}

/// Output of one `sample` run: one CSV per seed.
pub struct Samples {
    pub files: Vec<PathBuf>,
}

pub fn sample(cfg: &RunConfig) -> Result<Samples> {
    let model = load_model(cfg)?;
    let cfg = &with_checkpoint_schedule(cfg, &model);
    cfg.guidance.validate()?;
    let s = &cfg.sample;
    let mut text = match &s.text {
        Some(p) => Some(read_sequence(p)?.0),
        None if !s.phonemes.is_empty() => Some(s.phonemes.clone()),
        None => None,
    };
    let mut weights_out: Option<TokenWeights> = None;
    let condition = if s.unconditional {
        None
    } else {
        match s.mode {
            SampleMode::Transfer | SampleMode::Diversified => {
                let reference = match (&s.reference, s.mode) {
                    (Some(p), _) => read_sequence(p)?,
                    (None, SampleMode::Transfer) => bail!("transfer mode needs a reference utterance (--reference)"),
                    (None, _) => {
                        let corpus = load_corpus(cfg).context("diversified mode needs --reference or --corpus")?;
                        let mut r = rng::stream(cfg.seed, Substream::Eval);
                        let u = &corpus.utterances[corpus.train[r.random_range(0..corpus.train.len())]];
                        (u.phoneme_ids.clone(), u.prosody().clone())
                    }
                };
                if text.is_none() && s.mode == SampleMode::Diversified {
                    text = Some(reference.0.clone());
                }
                let (c, w) = model.encode_reference(&reference.1)?;
                weights_out = Some(w);
                Some(c)
            }
            SampleMode::Control => {
                let t = model.token_count();
                let c = match (s.token, &s.weights, &s.raw_weights) {
                    (Some(k), None, None) => {
                        if k >= t {
                            bail!("token id {k} out of range: the model has {t} tokens");
                        }
                        model.bank.condition_from_weights(&TokenWeights::one_hot(k, t)?)?
                    }
                    (None, Some(w), None) => model.bank.condition_from_weights(&TokenWeights::new(w.clone())?)?,
                    (None, None, Some(w)) => model.bank.condition_from_raw_weights(w)?,
                    (None, None, None) => bail!("control mode needs --token, --weights or --raw-weights"),
                    _ => bail!("give exactly one of --token, --weights, --raw-weights"),
                };
                Some(c)
            }
        }
    };
    let text = text.context("missing text: give --text or --phonemes")?;
    let seeds = if s.seeds.is_empty() { vec![cfg.seed] } else { s.seeds.clone() };
    let out = &cfg.output_dir;
    cfg.archive(out)?;
    if let Some(w) = &weights_out {
        let mut csv = String::from("token,weight\n");
        for (k, v) in w.as_slice().iter().enumerate() {
            writeln!(csv, "{k},{v}").expect("string write");
        }
        write(&out.join("style_weights.csv"), csv)?;
    }
    let mut files = Vec::new();
    for seed in seeds {
        let mut r = rng::stream(seed, Substream::Sampling);
        let (mut seqs, diag) = model.generate(&[&text], condition.as_ref(), &cfg.guidance, &mut r)?;
        let seq = seqs.remove(0);
        write(&out.join(format!("sample_seed{seed}_raw.csv")), raw_csv(&seq, &text, s.scale))?;
        let seq = if s.scale != [1.0; 3] { seq.scale_raw(s.scale)? } else { seq };
        let path = out.join(format!("sample_seed{seed}.csv"));
        write(&path, seq.to_csv(&text))?;
        if s.diagnostics {
            write(&out.join(format!("diagnostics_seed{seed}.csv")), diagnostics_csv(&diag))?;
        }
        files.push(path);
    }
    Ok(Samples { files })
}

pub fn eval(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.eval.etas.is_empty() {
        bail!("empty sweep: eval.etas lists no guiding scales");
    }
    let model = load_model(cfg)?;
    let cfg = &with_checkpoint_schedule(cfg, &model);
    cfg.guidance.validate()?;
    let e = &cfg.eval;
    let corpus = load_corpus(cfg)?;
    let out = &cfg.output_dir;
    cfg.archive(out)?;
    let params = cfg.guidance;
    let div = protocol::divergence(&model, &corpus, &params, e.repeats, cfg.seed)?;
    let tokens = protocol::dominant_tokens(&model, &corpus)?;
    let control = protocol::token_control(&model, &corpus, &tokens, e.samples_per_token, &params, cfg.seed)?;
    let sweep = protocol::eta_sweep(&model, &corpus, &params, &e.etas, &e.sweep_seeds, e.sweep_utterances)?;
    let transfer = protocol::transfer_sweep(&model, &corpus, &params, &e.transfer_etas, &e.sweep_seeds, e.sweep_utterances)?;

    let mut report = String::from("metric,channel,value\n");
    for (name, js) in [("js_conditional", div.conditional), ("js_unconditional", div.unconditional)] {
        for (c, v) in CHANNEL_NAMES.iter().zip(js) {
            writeln!(report, "{name},{c},{v}")?;
        }
    }
    writeln!(report, "cluster_accuracy,all,{}", control.accuracy)?;
    writeln!(report, "cluster_baseline,all,{}", control.baseline)?;
    for (eta, cv) in &transfer.rows {
        writeln!(report, "transfer_cv_eta_{eta},pitch,{cv}")?;
    }
    write(&out.join("report.csv"), &report)?;
    let mut sweep_csv = String::from("eta,cv_pitch,cv_energy,cv_duration\n");
    for row in &sweep {
        writeln!(sweep_csv, "{},{},{},{}", row.eta, row.cv[0], row.cv[1], row.cv[2])?;
    }
    write(&out.join("eta_sweep.csv"), &sweep_csv)?;
    if e.svg {
        let bars: Vec<(String, f64)> = CHANNEL_NAMES
            .iter()
            .zip(div.conditional)
            .map(|(c, v)| (format!("{c} cond"), v))
            .chain(CHANNEL_NAMES.iter().zip(div.unconditional).map(|(c, v)| (format!("{c} uncond"), v)))
            .collect();
        plot::bar_chart(&out.join("js.svg"), "JS divergence", &bars)?;
        let series: Vec<(String, Vec<(f64, f64)>)> = CHANNEL_NAMES
            .iter()
            .enumerate()
            .map(|(c, name)| (name.to_string(), sweep.iter().map(|r| (r.eta, r.cv[c])).collect()))
            .collect();
        plot::line_chart(&out.join("eta_sweep.svg"), "CV (%) by guiding scale", "eta", &series)?;
    }
    Ok(out.join("report.csv"))
}

pub fn plot_csv(cfg: &RunConfig) -> Result<PathBuf> {
    let input = require(&cfg.plot.input, "input CSV (plot.input / --input)")?;
    let (x, ys) = (cfg.plot.x.as_str(), &cfg.plot.y);
    let mut reader = csv::Reader::from_path(input).with_context(|| format!("reading {}", input.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("column `{name}` not in {}", input.display()))
    };
    let xi = col(x)?;
    let ys: Vec<String> = if ys.is_empty() {
        headers.iter().filter(|h| *h != x).map(str::to_string).collect()
    } else {
        ys.clone()
    };
    let yi: Vec<usize> = ys.iter().map(|y| col(y)).collect::<Result<_>>()?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = ys.iter().map(|y| (y.clone(), Vec::new())).collect();
    for rec in reader.records() {
        let rec = rec?;
        let xv: f64 = rec[xi].parse().with_context(|| format!("non-numeric `{x}` value {}", &rec[xi]))?;
        for (s, &i) in series.iter_mut().zip(&yi) {
            s.1.push((xv, rec[i].parse().with_context(|| format!("non-numeric value {}", &rec[i]))?));
        }
    }
    let out = &cfg.output_dir;
    cfg.archive(out)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let path = out.join(format!("{stem}.svg"));
    plot::line_chart(&path, stem, x, &series)?;
    Ok(path)
}

pub fn schedule(cfg: &RunConfig) -> Result<PathBuf> {
    let s = NoiseSchedule::from_config(&cfg.schedule)?;
    let out = &cfg.output_dir;
    cfg.archive(out)?;
    let path = out.join("schedule.csv");
    write(&path, s.to_csv())?;
    Ok(path)
}
