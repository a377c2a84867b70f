//! Style-token bank producing the sentence-level style condition `c`.
//!
//! A reference encoder turns a prosody sequence into a query vector; multi-head
//! scaled dot-product attention scores it against the learnable tokens. The
//! per-head softmax distributions are averaged into one weight vector `w` on
//! the simplex, and `c = Σ_k w_k · v_k` where `v_k` is token `k` after the
//! value and output projections. Because `c` is linear in `w`, inference can
//! bypass the reference entirely and dial token weights directly.

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::corpus::{ProsodySequence, CHANNELS};
use crate::denoiser::StyleCondition;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleConfig {
    pub token_count: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub reference_channels: usize,
    pub reference_layers: usize,
    pub reference_kernel: usize,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            token_count: 10,
            token_dim: 64,
            heads: 4,
            reference_channels: 32,
            reference_layers: 2,
            reference_kernel: 3,
        }
    }
}

impl StyleConfig {
    /// Ten 256-wide tokens with four attention heads.
    pub fn full_scale() -> Self {
        StyleConfig {
            token_dim: 256,
            ..StyleConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_count < 2 {
            return Err(Error::invalid("style bank needs at least 2 tokens"));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} heads do not divide token dim {}",
                self.heads, self.token_dim
            )));
        }
        if self.reference_layers == 0 || self.reference_channels == 0 {
            return Err(Error::invalid("reference encoder needs at least one layer"));
        }
        if self.reference_kernel % 2 == 0 {
            return Err(Error::invalid("reference kernel size must be odd"));
        }
        Ok(())
    }
}

/// Attention weights over the style tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWeights(Vec<f64>);

impl TokenWeights {
    /// Accepts weights already on the simplex (within [`SIMPLEX_TOLERANCE`]).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < -SIMPLEX_TOLERANCE) {
            return Err(Error::invalid("token weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::invalid(format!("token weights sum to {sum}, not 1")));
        }
        Ok(TokenWeights(weights))
    }

    /// Rescales nonnegative weights with a positive sum onto the simplex.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("token weights must be finite and nonnegative"));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("token weights must have a positive sum"));
        }
        Ok(TokenWeights(raw.iter().map(|w| w / sum).collect()))
    }

    pub fn one_hot(token: usize, count: usize) -> Result<Self> {
        if token >= count {
            return Err(Error::invalid(format!("token id {token} outside 0..{count}")));
        }
        let mut w = vec![0.0; count];
        w[token] = 1.0;
        Ok(TokenWeights(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1_distance(&self, other: &TokenWeights) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Handles {
    conv: Vec<(ParamId, ParamId)>,
    query_proj: (ParamId, ParamId),
    tokens: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank {
    config: StyleConfig,
    params: ParamSet,
    handles: Handles,
}

impl StyleBank {
    pub fn new(config: StyleConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (r, d, k) = (config.reference_channels, config.token_dim, config.reference_kernel);
        let mut p = ParamSet::new("style");
        let mut conv = Vec::with_capacity(config.reference_layers);
        let mut cin = CHANNELS;
        for i in 0..config.reference_layers {
            conv.push((
                p.add_weight(&format!("reference.conv{i}.weight"), vec![r, cin, k], cin * k, rng)?,
                p.add_zeros(&format!("reference.conv{i}.bias"), vec![r])?,
            ));
            cin = r;
        }
        let query_proj = (
            p.add_weight("reference.query.weight", vec![d, r], r, rng)?,
            p.add_zeros("reference.query.bias", vec![d])?,
        );
        let tokens = p.add_weight("tokens", vec![config.token_count, d], 1, rng)?;
        let wq = p.add_weight("attention.query.weight", vec![d, d], d, rng)?;
        let wk = p.add_weight("attention.key.weight", vec![d, d], d, rng)?;
        let wv = p.add_weight("attention.value.weight", vec![d, d], d, rng)?;
        let wo = p.add_weight("attention.output.weight", vec![d, d], d, rng)?;
        Ok(StyleBank {
            config,
            params: p,
            handles: Handles {
                conv,
                query_proj,
                tokens,
                wq,
                wk,
                wv,
                wo,
            },
        })
    }

    pub fn config(&self) -> &StyleConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn token_count(&self) -> usize {
        self.config.token_count
    }

    /// Returns `(tanh(tokens), projected values)`, both `[T, D]`.
    fn token_views(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let h = &self.handles;
        let tokens = g.param(&self.params, h.tokens);
        let keys_src = g.tanh(tokens);
        let wv = g.param(&self.params, h.wv);
        let wo = g.param(&self.params, h.wo);
        let v = g.linear(keys_src, wv, None)?;
        let projected = g.linear(v, wo, None)?;
        Ok((keys_src, projected))
    }

    /// Records the reference encoder and attention. `reference` is `[B, 3, L]`;
    /// returns `(c [B, D], w [B, T])`.
    pub fn encode_graph(&self, g: &mut Graph, reference: Var) -> Result<(Var, Var)> {
        let shape = g.shape(reference).to_vec();
        if shape.len() != 3 || shape[1] != CHANNELS {
            return Err(Error::invalid(format!("reference must be [B, 3, L], got {shape:?}")));
        }
        if shape[2] == 0 {
            return Err(Error::invalid("empty reference"));
        }
        let h = &self.handles;
        let p = &self.params;
        let mut x = reference;
        for &(w, b) in &h.conv {
            let (w, b) = (g.param(p, w), g.param(p, b));
            let y = g.conv1d(x, w, Some(b), 1)?;
            x = g.relu(y);
        }
        let pooled = g.mean_positions(x)?;
        let (qw, qb) = (g.param(p, h.query_proj.0), g.param(p, h.query_proj.1));
        let q_in = g.linear(pooled, qw, Some(qb))?;
        let q_in = g.tanh(q_in);

        let (keys_src, projected) = self.token_views(g)?;
        let wq = g.param(p, h.wq);
        let wk = g.param(p, h.wk);
        let q = g.linear(q_in, wq, None)?;
        let k = g.linear(keys_src, wk, None)?;
        let heads = self.config.heads;
        let dh = self.config.token_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut total: Option<Var> = None;
        for head in 0..heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let scores = g.matmul(qh, kh, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            total = Some(match total {
                Some(t) => g.add(t, attn)?,
                None => attn,
            });
        }
        let weights = g.scale(total.expect("at least one head"), 1.0 / heads as f64);
        let c = g.matmul(weights, projected, false)?;
        Ok((c, weights))
    }

    /// Style condition and token weights for each reference in a `[B, 3, L]` batch.
    pub fn encode_batch(&self, reference: &Tensor) -> Result<(StyleCondition, Vec<TokenWeights>)> {
        let mut g = Graph::new();
        let r = g.constant(reference.clone());
        let (c, w) = self.encode_graph(&mut g, r)?;
        let weights = g
            .value(w)
            .chunks(self.config.token_count)
            .map(|row| TokenWeights(row.to_vec()))
            .collect();
        Ok((StyleCondition::new(g.tensor(c))?, weights))
    }

    /// Condition from one set of explicit token weights, as a `[1, D]` batch.
    pub fn condition_from_weights(&self, w: &TokenWeights) -> Result<StyleCondition> {
        TokenWeights::new(w.0.clone())?;
        self.condition_from_raw_weights(&w.0)
    }

    /// Like [`condition_from_weights`](Self::condition_from_weights) without
    /// the simplex check, for deliberate over- or under-weighting of tokens.
    pub fn condition_from_raw_weights(&self, w: &[f64]) -> Result<StyleCondition> {
        if w.len() != self.config.token_count {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.token_count],
                actual: vec![w.len()],
            });
        }
        let mut g = Graph::new();
        let wv = g.constant(Tensor::new(vec![1, w.len()], w.to_vec())?);
        let (_, projected) = self.token_views(&mut g)?;
        let c = g.matmul(wv, projected, false)?;
        StyleCondition::new(g.tensor(c))
    }

    /// Token `k` after the value and output projections: `[T, D]`.
    pub fn projected_tokens(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let (_, projected) = self.token_views(&mut g)?;
        Ok(g.tensor(projected))
    }
}

/// `(c, w)` for a single reference utterance.
pub fn encode_style(bank: &StyleBank, reference: &ProsodySequence) -> Result<(StyleCondition, TokenWeights)> {
    let (c, mut w) = bank.encode_batch(&reference.to_tensor())?;
    Ok((c, w.remove(0)))
}

pub fn condition_from_weights(bank: &StyleBank, w: &TokenWeights) -> Result<StyleCondition> {
    bank.condition_from_weights(w)
}
