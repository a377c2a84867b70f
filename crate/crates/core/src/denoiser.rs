//! Noise-prediction network: a stack of bidirectional dilated-convolution
//! residual layers conditioned on the diffusion step, the text embedding and,
//! for the conditional instance, the style vector.
//!
//! Each layer adds a projection of the step embedding to its input, runs a
//! same-length dilated convolution into a `2H`-wide gate pre-activation, adds
//! a 1×1 projection of the condition sequence, and splits the gated output into
//! a residual update and a skip contribution. The residual stream carries the
//! three prosody channels; `H` (the hidden width) only exists inside the gate.

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::corpus::CHANNELS;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;

/// Where the style vector enters the conditional denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleInjection {
    /// `condition = y + c`, broadcast over positions.
    #[default]
    Conditioner,
    /// `c` is projected into the step-embedding path instead of being summed
    /// with the text embedding.
    StepEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub residual_layers: usize,
    pub residual_channels: usize,
    pub kernel_size: usize,
    pub dilation_cycle: Vec<usize>,
    pub hidden_channels: usize,
    pub time_embedding_dim: usize,
    pub condition_dim: usize,
    #[serde(default)]
    pub style_injection: StyleInjection,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            residual_layers: 12,
            residual_channels: CHANNELS,
            kernel_size: 3,
            dilation_cycle: vec![1, 2, 4, 8],
            hidden_channels: 64,
            time_embedding_dim: 32,
            condition_dim: 64,
            style_injection: StyleInjection::Conditioner,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.residual_layers == 0 {
            return Err(Error::invalid("denoiser needs at least one residual layer"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("denoiser kernel size must be odd"));
        }
        if self.residual_channels != CHANNELS {
            return Err(Error::invalid(format!(
                "residual channels must equal the {CHANNELS} prosody channels"
            )));
        }
        if self.dilation_cycle.is_empty() || self.dilation_cycle.contains(&0) {
            return Err(Error::invalid("dilation cycle must be non-empty and positive"));
        }
        if self.hidden_channels == 0 || self.condition_dim == 0 {
            return Err(Error::invalid("hidden and condition widths must be positive"));
        }
        if self.time_embedding_dim < 2 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::invalid("time embedding dim must be even and at least 2"));
        }
        Ok(())
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.residual_layers)
            .map(|i| self.dilation_cycle[i % self.dilation_cycle.len()])
            .collect()
    }

    /// Number of positions on each side of `i` that can influence output `i`.
    pub fn receptive_radius(&self) -> usize {
        (crate::compute::receptive_field(self.kernel_size, &self.dilations()) - 1) / 2
    }
}

/// Sinusoidal embedding of step `t ∈ 1..=steps`.
pub fn embed_time(t: usize, dim: usize, steps: usize) -> Result<Vec<f64>> {
    if t == 0 || t > steps {
        return Err(Error::StepOutOfRange { t, steps });
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::invalid("embedding dim must be even and at least 2"));
    }
    Ok(sinusoid(t as f64, dim))
}

fn sinusoid(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
    out
}

/// Per-phoneme text conditions `y`, batched as `[B, D, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Tensor);

impl TextEmbedding {
    pub fn new(t: Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[2] == 0 {
            return Err(Error::invalid(format!("text embedding must be [B, D, L>=1], got {shape:?}")));
        }
        if !t.is_finite() {
            return Err(Error::invalid("text embedding must be finite"));
        }
        Ok(TextEmbedding(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same shape, all zeros (the text-free ablation).
    pub fn zeros_like(&self) -> Self {
        TextEmbedding(Tensor::zeros(self.0.shape().to_vec()))
    }

    /// Example `b` repeated `n` times.
    pub fn repeat_example(&self, b: usize, n: usize) -> Self {
        let (_, d, l) = self.0.dims3();
        let row = self.0.example(b);
        let values = (0..n).flat_map(|_| row.iter().copied()).collect();
        TextEmbedding(Tensor::new(vec![n, d, l], values).expect("consistent shape"))
    }
}

/// Sentence-level style vectors `c`, batched as `[B, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCondition(pub Tensor);

impl StyleCondition {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::invalid(format!("style condition must be [B, D], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::invalid("style condition must be finite"));
        }
        Ok(StyleCondition(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn vector(&self, b: usize) -> &[f64] {
        self.0.example(b)
    }

    pub fn repeat_example(&self, b: usize, n: usize) -> Self {
        let row = self.0.example(b);
        let values = (0..n).flat_map(|_| row.iter().copied()).collect();
        StyleCondition(Tensor::new(vec![n, row.len()], values).expect("consistent shape"))
    }
}

/// Text front end: fixed random phoneme features plus sinusoidal positions.
///
/// The features are frozen so that the two denoisers share no trainable
/// state; each denoiser learns its own projection of `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    vocab_size: usize,
    dim: usize,
    table: Vec<f64>,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if vocab_size == 0 || dim < 2 || dim % 2 != 0 {
            return Err(Error::invalid("text encoder needs a vocabulary and an even dim"));
        }
        Ok(TextEncoder {
            vocab_size,
            dim,
            table: rng::normals(rng, vocab_size * dim),
        })
    }

    pub fn from_table(vocab_size: usize, dim: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != vocab_size * dim {
            return Err(Error::ShapeMismatch {
                expected: vec![vocab_size, dim],
                actual: vec![table.len()],
            });
        }
        Ok(TextEncoder { vocab_size, dim, table })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Embeds equal-length phoneme sequences into `[B, D, L]`.
    pub fn embed(&self, batch: &[&[usize]]) -> Result<TextEmbedding> {
        let len = batch.first().map_or(0, |s| s.len());
        if batch.is_empty() || len == 0 {
            return Err(Error::invalid("cannot embed an empty phoneme batch"));
        }
        let d = self.dim;
        let positions: Vec<Vec<f64>> = (0..len).map(|l| sinusoid(l as f64, d)).collect();
        let mut values = vec![0.0; batch.len() * d * len];
        for (b, ids) in batch.iter().enumerate() {
            if ids.len() != len {
                return Err(Error::invalid("phoneme sequences in one batch must share a length"));
            }
            for (l, &p) in ids.iter().enumerate() {
                if p >= self.vocab_size {
                    return Err(Error::invalid(format!("phoneme id {p} outside vocabulary {}", self.vocab_size)));
                }
                for k in 0..d {
                    values[(b * d + k) * len + l] = self.table[p * d + k] + positions[l][k];
                }
            }
        }
        TextEmbedding::new(Tensor::new(vec![batch.len(), d, len], values)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    time_w: ParamId,
    time_b: ParamId,
    dilated_w: ParamId,
    dilated_b: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Handles {
    input_w: ParamId,
    input_b: ParamId,
    time1_w: ParamId,
    time1_b: ParamId,
    time2_w: ParamId,
    time2_b: ParamId,
    null_condition: ParamId,
    style: Option<(ParamId, ParamId)>,
    layers: Vec<LayerParams>,
    skip_w: ParamId,
    skip_b: ParamId,
    output_w: ParamId,
    output_b: ParamId,
}

/// One noise predictor. `accepts_style` distinguishes the conditional
/// instance from the unconditional one; both share the same architecture and
/// parameter names, and the unconditional one feeds a learned null vector in
/// place of `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamSet,
    accepts_style: bool,
    handles: Handles,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, accepts_style: bool, tag: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c, h, d, e, k) = (
            config.residual_channels,
            config.hidden_channels,
            config.condition_dim,
            config.time_embedding_dim,
            config.kernel_size,
        );
        let mut p = ParamSet::new(tag);
        let input_w = p.add_weight("input.weight", vec![c, c, 1], c, rng)?;
        let input_b = p.add_zeros("input.bias", vec![c])?;
        let time1_w = p.add_weight("time.fc1.weight", vec![h, e], e, rng)?;
        let time1_b = p.add_zeros("time.fc1.bias", vec![h])?;
        let time2_w = p.add_weight("time.fc2.weight", vec![h, h], h, rng)?;
        let time2_b = p.add_zeros("time.fc2.bias", vec![h])?;
        let null_condition = p.add_zeros("null_condition", vec![d])?;
        let style = match config.style_injection {
            StyleInjection::Conditioner => None,
            StyleInjection::StepEmbedding => Some((
                p.add_weight("style.weight", vec![h, d], d, rng)?,
                p.add_zeros("style.bias", vec![h])?,
            )),
        };
        let mut layers = Vec::with_capacity(config.residual_layers);
        for (i, dilation) in config.dilations().into_iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerParams {
                time_w: p.add_weight(&n("time.weight"), vec![c, h], h, rng)?,
                time_b: p.add_zeros(&n("time.bias"), vec![c])?,
                dilated_w: p.add_weight(&n("dilated.weight"), vec![2 * h, c, k], c * k, rng)?,
                dilated_b: p.add_zeros(&n("dilated.bias"), vec![2 * h])?,
                cond_w: p.add_weight(&n("condition.weight"), vec![2 * h, d, 1], d, rng)?,
                cond_b: p.add_zeros(&n("condition.bias"), vec![2 * h])?,
                out_w: p.add_weight(&n("output.weight"), vec![2 * c, h, 1], h, rng)?,
                out_b: p.add_zeros(&n("output.bias"), vec![2 * c])?,
                dilation,
            });
        }
        let skip_w = p.add_weight("skip.weight", vec![h, c, 1], c, rng)?;
        let skip_b = p.add_zeros("skip.bias", vec![h])?;
        let output_w = p.add_weight("output.weight", vec![c, h, 1], h, rng)?;
        let output_b = p.add_zeros("output.bias", vec![c])?;
        Ok(Denoiser {
            config,
            params: p,
            accepts_style,
            handles: Handles {
                input_w,
                input_b,
                time1_w,
                time1_b,
                time2_w,
                time2_b,
                null_condition,
                style,
                layers,
                skip_w,
                skip_b,
                output_w,
                output_b,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn accepts_style(&self) -> bool {
        self.accepts_style
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_style(&self, has_style: bool) -> Result<()> {
        match (self.accepts_style, has_style) {
            (true, false) => Err(Error::StyleMismatch("conditional denoiser requires a style condition".into())),
            (false, true) => Err(Error::StyleMismatch("unconditional denoiser must not receive a style condition".into())),
            _ => Ok(()),
        }
    }

    /// Records the forward pass into `g`.
    ///
    /// `x_t` is `[B, 3, L]`, `steps` holds one step index per example, `y` is
    /// `[B, D, L]` and `style` (conditional instance only) is `[B, D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_t: Var,
        steps: &[usize],
        schedule: &NoiseSchedule,
        y: Var,
        style: Option<Var>,
    ) -> Result<Var> {
        self.check_style(style.is_some())?;
        let cfg = &self.config;
        let &[b, c, l] = g.shape(x_t) else {
            return Err(Error::invalid(format!("x_t must be [B, 3, L], got {:?}", g.shape(x_t))));
        };
        if c != cfg.residual_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![b, cfg.residual_channels, l],
                actual: g.shape(x_t).to_vec(),
            });
        }
        if g.shape(y) != [b, cfg.condition_dim, l] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, cfg.condition_dim, l],
                actual: g.shape(y).to_vec(),
            });
        }
        if steps.len() != b {
            return Err(Error::invalid(format!("{} step indices for batch of {b}", steps.len())));
        }
        if let Some(s) = style {
            if g.shape(s) != [b, cfg.condition_dim] {
                return Err(Error::ShapeMismatch {
                    expected: vec![b, cfg.condition_dim],
                    actual: g.shape(s).to_vec(),
                });
            }
        }
        let hd = &self.handles;
        let ps = &self.params;
        let w = |g: &mut Graph, id: ParamId| g.param(ps, id);

        let mut temb_vals = Vec::with_capacity(b * cfg.time_embedding_dim);
        let mut prior = Vec::with_capacity(b * c * l);
        for &t in steps {
            schedule.check_step(t)?;
            temb_vals.extend(embed_time(t, cfg.time_embedding_dim, schedule.steps())?);
            prior.extend(std::iter::repeat_n((1.0 - schedule.alpha_bar(t)).sqrt(), c * l));
        }
        let temb = g.constant(Tensor::new(vec![b, cfg.time_embedding_dim], temb_vals)?);
        let (w1, b1) = (w(g, hd.time1_w), w(g, hd.time1_b));
        let t1 = g.linear(temb, w1, Some(b1))?;
        let t1 = g.silu(t1);
        let (w2, b2) = (w(g, hd.time2_w), w(g, hd.time2_b));
        let t2 = g.linear(t1, w2, Some(b2))?;
        let mut temb = g.silu(t2);

        let style_vec = match style {
            Some(s) => s,
            None => {
                let null = w(g, hd.null_condition);
                g.repeat_rows(null, b)
            }
        };
        let condition = match (cfg.style_injection, hd.style) {
            (StyleInjection::StepEmbedding, Some((sw, sb))) => {
                let (sw, sb) = (w(g, sw), w(g, sb));
                let proj = g.linear(style_vec, sw, Some(sb))?;
                temb = g.add(temb, proj)?;
                y
            }
            _ => {
                let spread = g.broadcast_positions(style_vec, l)?;
                g.add(y, spread)?
            }
        };

        let (iw, ib) = (w(g, hd.input_w), w(g, hd.input_b));
        let mut h = g.conv1d(x_t, iw, Some(ib), 1)?;
        let mut skip: Option<Var> = None;
        let hidden = cfg.hidden_channels;
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        for layer in &hd.layers {
            let (tw, tb) = (w(g, layer.time_w), w(g, layer.time_b));
            let tp = g.linear(temb, tw, Some(tb))?;
            let tp = g.broadcast_positions(tp, l)?;
            let hin = g.add(h, tp)?;
            let (dw, db) = (w(g, layer.dilated_w), w(g, layer.dilated_b));
            let conv = g.conv1d(hin, dw, Some(db), layer.dilation)?;
            let (cw, cb) = (w(g, layer.cond_w), w(g, layer.cond_b));
            let cproj = g.conv1d(condition, cw, Some(cb), 1)?;
            let pre = g.add(conv, cproj)?;
            let filter = g.slice_channels(pre, 0, hidden)?;
            let gate = g.slice_channels(pre, hidden, hidden)?;
            let act = g.gated(filter, gate)?;
            let (ow, ob) = (w(g, layer.out_w), w(g, layer.out_b));
            let out = g.conv1d(act, ow, Some(ob), 1)?;
            let residual = g.slice_channels(out, 0, c)?;
            let skip_part = g.slice_channels(out, c, c)?;
            let sum = g.add(h, residual)?;
            h = g.scale(sum, inv_sqrt2);
            skip = Some(match skip {
                Some(s) => g.add(s, skip_part)?,
                None => skip_part,
            });
        }
        let skip = g.scale(skip.expect("at least one layer"), 1.0 / (hd.layers.len() as f64).sqrt());
        let (sw, sb) = (w(g, hd.skip_w), w(g, hd.skip_b));
        let s = g.conv1d(skip, sw, Some(sb), 1)?;
        let s = g.silu(s);
        let (ow, ob) = (w(g, hd.output_w), w(g, hd.output_b));
        let residual = g.conv1d(s, ow, Some(ob), 1)?;
        let prior = g.constant(Tensor::new(vec![b, c, l], prior)?);
        let base = g.mul(prior, x_t)?;
        g.add(base, residual)
    }

    /// Evaluates `ε_θ(x_t, t, y[, c])` with one step index per example.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        steps: &[usize],
        schedule: &NoiseSchedule,
        y: &TextEmbedding,
        style: Option<&StyleCondition>,
    ) -> Result<Tensor> {
        self.check_style(style.is_some())?;
        let (xs, ys) = (x_t.shape(), y.tensor().shape());
        if xs.len() != 3 || ys[2] != xs[2] {
            return Err(Error::invalid(format!(
                "x_t {xs:?} and text embedding {ys:?} disagree on length"
            )));
        }
        let mut g = Graph::new();
        let xv = g.constant(x_t.clone());
        let yv = g.constant(y.tensor().clone());
        let sv = style.map(|s| g.constant(s.tensor().clone()));
        let out = self.forward(&mut g, xv, steps, schedule, yv, sv)?;
        Ok(g.tensor(out))
    }
}
