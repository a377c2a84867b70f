use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use prosody_diffusion::denoiser::StyleInjection;
use prosody_cli::commands;
use prosody_cli::config::{RunConfig, SampleMode};

#[derive(Parser)]
#[command(name = "prosody", version, about = "Guided diffusion prosody generation")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    guidance: GuidanceFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GuidanceFlags {
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        styles: Option<usize>,
        #[arg(long)]
        per_style: Option<usize>,
    },
    /// Train the guided and unguided denoisers with the style bank.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        train_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Train with zeroed text features.
        #[arg(long)]
        no_text: bool,
        #[arg(long, value_enum)]
        style_injection: Option<Injection>,
    },
    /// Sample prosody in diversified, transfer or control mode.
    Sample {
        #[arg(long, value_enum)]
        mode: Option<SampleMode>,
        /// Utterance CSV providing the phoneme text.
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        phonemes: Option<Vec<usize>>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        token: Option<usize>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        weights: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        raw_weights: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        unconditional: bool,
        /// Pitch, energy and duration multipliers.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        scale: Option<Vec<f64>>,
        #[arg(long)]
        diagnostics: bool,
    },
    /// Divergence, diversity, token-control and transfer metrics.
    Eval {
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        sweep_seeds: Option<Vec<u64>>,
        #[arg(long)]
        samples_per_token: Option<usize>,
        #[arg(long)]
        svg: bool,
    },
    /// Draw columns of a CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        x: Option<String>,
        #[arg(long, value_delimiter = ',')]
        y: Option<Vec<String>>,
    },
    /// Dump the noise schedule table.
    Schedule,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Injection {
    Conditioner,
    StepEmbedding,
}

impl From<Injection> for StyleInjection {
    fn from(i: Injection) -> Self {
        match i {
            Injection::Conditioner => StyleInjection::Conditioner,
            Injection::StepEmbedding => StyleInjection::StepEmbedding,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cli: Cli) -> Result<(RunConfig, Command)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.output_dir, cli.out);
    if cli.corpus.is_some() {
        cfg.paths.corpus = cli.corpus;
    }
    if cli.checkpoint.is_some() {
        cfg.paths.checkpoint = cli.checkpoint;
    }
    let g = cli.guidance;
    set(&mut cfg.guidance.eta, g.eta);
    set(&mut cfg.guidance.gamma, g.gamma);
    set(&mut cfg.guidance.tau, g.tau);
    if let Some(steps) = g.steps {
        cfg.guidance.steps = steps;
        cfg.schedule.steps = steps;
    }
    match &cli.command {
        Command::GenData { styles, per_style } => {
            set(&mut cfg.corpus.archetypes, *styles);
            set(&mut cfg.corpus.utterances_per_style, *per_style);
        }
        Command::Train {
            resume,
            train_steps,
            batch_size,
            learning_rate,
            checkpoint_every,
            no_text,
            style_injection,
        } => {
            if resume.is_some() {
                cfg.paths.resume = resume.clone();
            }
            set(&mut cfg.optimizer.steps, *train_steps);
            set(&mut cfg.optimizer.batch_size, *batch_size);
            set(&mut cfg.optimizer.learning_rate, *learning_rate);
            set(&mut cfg.optimizer.checkpoint_every, *checkpoint_every);
            if *no_text {
                cfg.text_condition = false;
            }
            set(&mut cfg.denoiser.style_injection, style_injection.map(Into::into));
        }
        Command::Sample {
            mode,
            text,
            phonemes,
            reference,
            token,
            weights,
            raw_weights,
            seeds,
            unconditional,
            scale,
            diagnostics,
        } => {
            let s = &mut cfg.sample;
            set(&mut s.mode, *mode);
            if text.is_some() {
                s.text = text.clone();
            }
            set(&mut s.phonemes, phonemes.clone());
            if reference.is_some() {
                s.reference = reference.clone();
            }
            if token.is_some() || weights.is_some() || raw_weights.is_some() {
                s.token = *token;
                s.weights = weights.clone();
                s.raw_weights = raw_weights.clone();
            }
            set(&mut s.seeds, seeds.clone());
            s.unconditional |= *unconditional;
            if let Some(v) = scale {
                s.scale = v
                    .as_slice()
                    .try_into()
                    .map_err(|_| anyhow::anyhow!("--scale takes three factors: pitch,energy,duration"))?;
            }
            s.diagnostics |= *diagnostics;
        }
        Command::Eval {
            etas,
            sweep_seeds,
            samples_per_token,
            svg,
        } => {
            set(&mut cfg.eval.etas, etas.clone());
            set(&mut cfg.eval.sweep_seeds, sweep_seeds.clone());
            set(&mut cfg.eval.samples_per_token, *samples_per_token);
            cfg.eval.svg |= *svg;
        }
        Command::Plot { input, x, y } => {
            if input.is_some() {
                cfg.plot.input = input.clone();
            }
            set(&mut cfg.plot.x, x.clone());
            set(&mut cfg.plot.y, y.clone());
        }
        Command::Schedule => {}
    }
    Ok((cfg, cli.command))
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let (cfg, command) = resolve(cli)?;
    Ok(match command {
        Command::GenData { .. } => vec![commands::gen_data(&cfg)?],
        Command::Train { .. } => vec![commands::train(&cfg)?],
        Command::Sample { .. } => commands::sample(&cfg)?.files,
        Command::Eval { .. } => vec![commands::eval(&cfg)?],
        Command::Plot { .. } => vec![commands::plot_csv(&cfg)?],
        Command::Schedule => vec![commands::schedule(&cfg)?],
    })
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.chain().find_map(|e| e.downcast_ref::<prosody_diffusion::Error>()) {
        return e.kind();
    }
    let text = format!("{err:#}");
    if text.contains("mismatch") {
        "config_mismatch"
    } else if text.contains("out of range") {
        "out_of_range"
    } else if text.starts_with("missing") || text.contains("needs") || text.contains("give exactly one") {
        "missing_argument"
    } else if text.contains("empty sweep") {
        "empty_sweep"
    } else if err.chain().any(|e| e.is::<std::io::Error>()) {
        "io"
    } else {
        "invalid_input"
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), &format!("{e:#}")),
    }
}
