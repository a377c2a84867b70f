//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if a gated criterion fails.

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use prosody_cli::commands;
use prosody_cli::config::RunConfig;
use prosody_cli::protocol::{self, Divergence};
use prosody_diffusion::compute::Tensor;
use prosody_diffusion::corpus::{Corpus, ProsodySequence, CHANNELS, CHANNEL_NAMES};
use prosody_diffusion::denoiser::{Denoiser, StyleCondition, TextEmbedding};
use prosody_diffusion::guidance::{
    rescale, reverse_step, sample, sample_with_diagnostics, terminal_draw, GuidanceParams,
};
use prosody_diffusion::model::ProsodyModel;
use prosody_diffusion::rng::{normals, stream, Rng, Substream};
use prosody_diffusion::schedule::{forward_diffuse, NoiseSchedule};

/// Criteria reported but not gating the exit status.
const UNGATED: &[usize] = &[10];

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(results: &mut Vec<Outcome>, id: usize, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2}: {verdict}  {detail}");
    results.push(Outcome { id, pass, detail });
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

fn criterion_1() -> (bool, String) {
    let checks = gradcheck::all();
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let slowest = checks.iter().map(|c| c.elapsed).max().unwrap_or_default();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    (
        failed.is_empty(),
        format!("{} checks, worst relative error {worst:.2e}, slowest {slowest:?}, failing {failed:?}", checks.len()),
    )
}

fn criterion_2() -> (bool, String) {
    let start = Instant::now();
    let schedule = NoiseSchedule::cosine(200).unwrap();
    let t = 100;
    let draws = 10_000;
    let x0 = Tensor::new(vec![1, 3, 4], normals(&mut stream(2, Substream::Eval), 12)).unwrap();
    let mut rng = stream(3, Substream::Eval);
    let mut sum = vec![0.0; 12];
    let mut sq = vec![0.0; 12];
    for _ in 0..draws {
        let eps = Tensor::new(vec![1, 3, 4], normals(&mut rng, 12)).unwrap();
        let xt = forward_diffuse(&x0, t, &eps, &schedule).unwrap();
        for (i, v) in xt.values().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let ab = schedule.alpha_bar(t);
    let var_true = 1.0 - ab;
    let se = (var_true / draws as f64).sqrt();
    let n = draws as f64;
    let (mut worst_z, mut worst_var) = (0.0f64, 0.0f64);
    for i in 0..12 {
        let mean = sum[i] / n;
        let var = (sq[i] - n * mean * mean) / (n - 1.0);
        worst_z = worst_z.max((mean - ab.sqrt() * x0.values()[i]).abs() / se);
        worst_var = worst_var.max((var / var_true - 1.0).abs());
    }
    let elapsed = start.elapsed();
    (
        worst_z < 3.0 && worst_var < 0.05 && elapsed < Duration::from_secs(10),
        format!("max |mean error|/SE {worst_z:.2}, max variance error {:.2}%, {elapsed:?}", 100.0 * worst_var),
    )
}

/// Ancestral sampling with a single denoiser and no guidance arithmetic.
fn single_path(
    den: &Denoiser,
    y: &TextEmbedding,
    c: Option<&StyleCondition>,
    tau: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Tensor {
    let b = y.batch();
    let mut x = terminal_draw(vec![b, CHANNELS, y.len()], tau, rng).unwrap();
    for t in (1..=schedule.steps()).rev() {
        let eps = den.predict_noise(&x, &vec![t; b], schedule, y, c).unwrap();
        x = reverse_step(&x, t, &eps, schedule, rng).unwrap();
    }
    x
}

/// The first `n` training references sharing one length.
fn same_length_refs(corpus: &Corpus, n: usize) -> Vec<&ProsodySequence> {
    let mut by_len: BTreeMap<usize, Vec<&ProsodySequence>> = BTreeMap::new();
    for u in corpus.train_utterances() {
        let group = by_len.entry(u.len()).or_default();
        group.push(u.prosody());
        if group.len() == n {
            return group.clone();
        }
    }
    panic!("no {n} training utterances share a length");
}

fn criterion_3(model: &ProsodyModel, corpus: &Corpus) -> (bool, String) {
    let texts: Vec<&[usize]> = corpus.validation_utterances().take(3).map(|u| u.phoneme_ids.as_slice()).collect();
    let len = texts.iter().map(|t| t.len()).min().unwrap();
    let texts: Vec<&[usize]> = texts.iter().map(|t| &t[..len]).collect();
    let y = model.embed_text(&texts).unwrap();
    let refs = same_length_refs(corpus, 3);
    let (c, _) = model.encode_references(&refs).unwrap();
    let schedule = model.schedule();
    let mut ok = true;
    let mut parts = Vec::new();
    for (eta, den, cond) in [(1.0, &model.theta1, Some(&c)), (0.0, &model.theta2, None)] {
        let params = GuidanceParams { eta, gamma: 0.7, tau: 1.0, steps: schedule.steps() };
        let guided = sample(&model.theta1, &model.theta2, &y, Some(&c), &params, schedule, &mut stream(5, Substream::Sampling)).unwrap();
        let plain = single_path(den, &y, cond, 1.0, schedule, &mut stream(5, Substream::Sampling));
        let same = guided.values().iter().zip(plain.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        ok &= same && guided.shape() == plain.shape();
        parts.push(format!("eta={eta}: {}", if same { "bit-identical" } else { "differs" }));
    }
    (ok, parts.join(", "))
}

fn criterion_4(model: &ProsodyModel, corpus: &Corpus) -> (bool, String) {
    let mut rng = stream(4, Substream::Eval);
    let mut ok = true;
    let mut worst_rel = 0.0f64;
    for case in 0..50 {
        let shape = vec![3, CHANNELS, 6 + case % 7];
        let n: usize = shape.iter().product();
        let c = Tensor::new(shape.clone(), normals(&mut rng, n)).unwrap();
        let spread = 1.0 + case as f64 / 10.0;
        let cfg = Tensor::new(shape.clone(), normals(&mut rng, n).into_iter().map(|v| v * spread).collect()).unwrap();
        let (zero, _) = rescale(&cfg, &c, 0.0).unwrap();
        ok &= zero.values().iter().zip(cfg.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        let (full, _) = rescale(&cfg, &c, 1.0).unwrap();
        let (mid, _) = rescale(&cfg, &c, 0.4).unwrap();
        for b in 0..3 {
            let target = population_std(c.example(b));
            let s_full = population_std(full.example(b));
            let s_zero = population_std(cfg.example(b));
            let s_mid = population_std(mid.example(b));
            worst_rel = worst_rel.max((s_full / target - 1.0).abs());
            let (lo, hi) = if s_zero < s_full { (s_zero, s_full) } else { (s_full, s_zero) };
            ok &= s_mid > lo && s_mid < hi;
        }
    }
    let texts: Vec<&[usize]> = corpus.validation_utterances().take(2).map(|u| &u.phoneme_ids[..8]).collect();
    let y = model.embed_text(&texts).unwrap();
    let refs = same_length_refs(corpus, 2);
    let (c, _) = model.encode_references(&refs).unwrap();
    let params = GuidanceParams { eta: 4.0, gamma: 1.0, tau: 1.0, steps: model.schedule().steps() };
    let (_, diags) = sample_with_diagnostics(
        &model.theta1, &model.theta2, &y, Some(&c), &params, model.schedule(), &mut stream(6, Substream::Sampling),
    )
    .unwrap();
    let mut worst_step = 0.0f64;
    for d in &diags {
        for r in &d.per_example {
            worst_step = worst_step.max((r.applied_ratio * r.sigma_cfg / r.sigma_cond - 1.0).abs());
        }
    }
    ok &= worst_rel < 1e-9 && worst_step < 1e-9;
    (
        ok,
        format!("gamma=1 worst relative std error {worst_rel:.1e} (random), {worst_step:.1e} over {} sampler steps", diags.len()),
    )
}

fn criterion_5() -> (bool, String) {
    let draw = |tau: f64, seed: u64| {
        let t = terminal_draw(vec![10_000], tau, &mut stream(seed, Substream::Sampling)).unwrap();
        population_std(t.values())
    };
    let ratio = draw(4.0, 8) / draw(1.0, 9);
    ((ratio / 0.5 - 1.0).abs() < 0.03, format!("std ratio tau=4 vs tau=1: {ratio:.4}"))
}

fn train_model(cfg: &RunConfig, dir: &Path) -> (ProsodyModel, Duration) {
    let mut cfg = cfg.clone();
    cfg.output_dir = dir.to_path_buf();
    let start = Instant::now();
    let path = commands::train(&cfg).unwrap();
    let elapsed = start.elapsed();
    (ProsodyModel::load(&path).unwrap(), elapsed)
}

fn fmt3(v: [f64; CHANNELS]) -> String {
    let parts: Vec<String> = CHANNEL_NAMES.iter().zip(v).map(|(n, x)| format!("{n} {x:.4}")).collect();
    parts.join(", ")
}

fn criterion_11(root: &Path) -> (bool, String) {
    let base = RunConfig::from_toml(
        r#"
seed = 5
[corpus]
archetypes = 2
utterances_per_style = 12
min_len = 6
max_len = 9
[denoiser]
residual_layers = 2
hidden_channels = 8
time_embedding_dim = 8
condition_dim = 8
dilation_cycle = [1, 2]
[style]
token_count = 4
token_dim = 8
heads = 2
reference_channels = 8
reference_layers = 1
[schedule]
steps = 8
[guidance]
steps = 8
eta = 2.0
[optimizer]
steps = 3
batch_size = 4
checkpoint_every = 2
[sample]
seeds = [1, 2]
diagnostics = true
[eval]
etas = [1.0, 3.0]
sweep_seeds = [0]
sweep_utterances = 2
repeats = 1
samples_per_token = 3
transfer_etas = [0.5, 1.0]
svg = true
"#,
    )
    .unwrap();
    let at = |name: &str| {
        let mut c = base.clone();
        c.output_dir = root.join(name);
        c.paths.corpus = Some(root.join("gen-data"));
        c.paths.checkpoint = Some(root.join("train/model.ckpt"));
        c.plot.input = Some(root.join("train/loss.csv"));
        c
    };
    let runs: [(&str, fn(&RunConfig) -> anyhow::Result<()>); 6] = [
        ("gen-data", |c| commands::gen_data(c).map(drop)),
        ("train", |c| commands::train(c).map(drop)),
        ("sample", |c| commands::sample(c).map(drop)),
        ("eval", |c| commands::eval(c).map(drop)),
        ("plot", |c| commands::plot_csv(c).map(drop)),
        ("schedule", |c| commands::schedule(c).map(drop)),
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, run) in runs {
        run(&at(name)).unwrap();
        let mut again = RunConfig::load(&root.join(name).join("config.toml")).unwrap();
        again.output_dir = root.join(format!("{name}.rerun"));
        run(&again).unwrap();
        for (rel, bytes) in outputs(&root.join(name)) {
            files += 1;
            if fs::read(again.output_dir.join(&rel)).ok().as_deref() != Some(bytes.as_slice()) {
                differing.push(format!("{name}/{}", rel.display()));
            }
        }
    }
    (
        differing.is_empty(),
        format!("6 commands, {files} output files compared, differing {differing:?}"),
    )
}

fn outputs(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.toml" {
                found.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    found
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let (p, d) = criterion_1();
    report(&mut results, 1, p, d);
    let (p, d) = criterion_2();
    report(&mut results, 2, p, d);
    let (p, d) = criterion_5();
    report(&mut results, 5, p, d);

    let root = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output_dir = root.path().join("data");
    commands::gen_data(&cfg).unwrap();
    cfg.paths.corpus = Some(cfg.output_dir.clone());
    let corpus = commands::load_corpus(&cfg).unwrap();

    let (model, train_time) = train_model(&cfg, &root.path().join("default"));
    let (p, d) = criterion_3(&model, &corpus);
    report(&mut results, 3, p, d);
    let (p, d) = criterion_4(&model, &corpus);
    report(&mut results, 4, p, d);

    let e = &cfg.eval;
    let params = GuidanceParams { eta: 1.0, gamma: 0.7, ..cfg.guidance };
    let div: Divergence = protocol::divergence(&model, &corpus, &params, e.repeats, cfg.seed).unwrap();
    let js_ok = div.conditional.iter().all(|v| *v < 0.08);
    report(
        &mut results,
        6,
        js_ok && train_time <= Duration::from_secs(30 * 60),
        format!("training {:.1} min; conditional JS {}", train_time.as_secs_f64() / 60.0, fmt3(div.conditional)),
    );

    let sweep = protocol::eta_sweep(&model, &corpus, &cfg.guidance, &[1.0, 3.0, 5.0, 7.0], &e.sweep_seeds, e.sweep_utterances).unwrap();
    let cv: Vec<f64> = sweep.iter().map(|r| r.cv[0]).collect();
    let monotone = cv.windows(2).all(|w| w[1] >= w[0]);
    report(
        &mut results,
        7,
        monotone && cv[3] >= 1.5 * cv[0],
        format!("pitch CV at eta 1,3,5,7: {cv:.2?}"),
    );

    let tokens = protocol::dominant_tokens(&model, &corpus).unwrap();
    let control = protocol::token_control(&model, &corpus, &tokens, 50, &cfg.guidance, cfg.seed).unwrap();
    let chance = 1.0 / corpus.style_count() as f64;
    report(
        &mut results,
        8,
        control.accuracy >= 0.8 && (control.baseline - chance).abs() < 0.1,
        format!("tokens {:?}, accuracy {:.3}, shuffled-label baseline {:.3}", tokens, control.accuracy, control.baseline),
    );

    let transfer = protocol::transfer_sweep(&model, &corpus, &cfg.guidance, &[0.5, 1.0, 2.0], &e.sweep_seeds, e.sweep_utterances).unwrap();
    let tcv: Vec<f64> = transfer.rows.iter().map(|r| r.1).collect();
    report(
        &mut results,
        9,
        tcv.windows(2).all(|w| w[1] > w[0]),
        format!("pitch CV at eta 0.5,1,2: {tcv:.2?}"),
    );

    let mut notext_cfg = cfg.clone();
    notext_cfg.text_condition = false;
    let (notext, _) = train_model(&notext_cfg, &root.path().join("notext"));
    let notext_div = protocol::divergence(&notext, &corpus, &params, e.repeats, cfg.seed).unwrap();
    let isc_worse = (0..CHANNELS).all(|c| div.unconditional[c] > div.conditional[c]);
    let tec_worse = (0..CHANNELS).all(|c| notext_div.conditional[c] > div.unconditional[c]);
    report(
        &mut results,
        10,
        isc_worse && tec_worse,
        format!(
            "conditional {}; unconditional {}; zeroed text {}",
            fmt3(div.conditional),
            fmt3(div.unconditional),
            fmt3(notext_div.conditional)
        ),
    );

    let (p, d) = criterion_11(&root.path().join("repro"));
    report(&mut results, 11, p, d);

    results.sort_by_key(|r| r.id);
    println!("summary:");
    for r in &results {
        let note = if UNGATED.contains(&r.id) { " (not gating)" } else { "" };
        println!("  {:>2} {}{note}: {}", r.id, if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    if results.iter().all(|r| r.pass || UNGATED.contains(&r.id)) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
