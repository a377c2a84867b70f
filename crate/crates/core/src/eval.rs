//! Distribution and diversity metrics for generated prosody.

use serde::{Deserialize, Serialize};

use crate::corpus::{ProsodySequence, CHANNELS};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;
pub const SMOOTHING: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || masses.len() + 1 != edges.len() {
            return Err(Error::invalid("histogram needs B+1 edges for B masses, B >= 1"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("histogram edges must be strictly increasing"));
        }
        if masses.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::invalid("histogram masses must be nonnegative"));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("histogram masses sum to {total}")));
        }
        Ok(Histogram { edges, masses })
    }

    /// `bins` uniform bins over `[lo, hi]`; values outside land in the edge
    /// bins. Each bin gets `SMOOTHING` extra mass before normalization.
    pub fn uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("histogram values must be finite"));
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![SMOOTHING; bins];
        for &v in values {
            let k = ((v - lo) / width).floor();
            let k = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
            counts[k] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Histogram::new(edges, counts.into_iter().map(|c| c / total).collect())
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
}

/// Jensen-Shannon divergence in nats, within `[0, ln 2]`.
pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::invalid("histograms have different bin edges"));
    }
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let js = p
        .masses
        .iter()
        .zip(&q.masses)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_to_mid(a, m) + 0.5 * kl_to_mid(b, m)
        })
        .sum::<f64>();
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// `100 · std / |mean|`, population standard deviation.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("coefficient of variation of no values"));
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(Error::Degenerate("coefficient of variation with zero mean".into()));
    }
    Ok(100.0 * population_std(values) / m.abs())
}

pub const STATISTICS: [&str; 7] = ["mean", "std", "median", "min", "max", "skewness", "kurtosis"];

/// Seven statistics per channel, channel-major: pitch, energy, duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyDescriptor(pub [f64; 21]);

impl ProsodyDescriptor {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.0[c * 7..(c + 1) * 7]
    }
}

fn channel_statistics(v: &[f64]) -> Result<[f64; 7]> {
    let n = v.len() as f64;
    let m = mean(v);
    let sd = population_std(v);
    if sd == 0.0 {
        return Err(Error::Degenerate("descriptor of a constant channel".into()));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    Ok([
        m,
        sd,
        median,
        sorted[0],
        sorted[sorted.len() - 1],
        m3 / sd.powi(3),
        m4 / sd.powi(4),
    ])
}

/// Descriptor of the channels exactly as stored in `sample`.
pub fn descriptor(sample: &ProsodySequence) -> Result<ProsodyDescriptor> {
    if sample.len() < 2 {
        return Err(Error::invalid("descriptor needs at least two positions"));
    }
    let mut out = [0.0; 21];
    for c in 0..CHANNELS {
        out[c * 7..(c + 1) * 7].copy_from_slice(&channel_statistics(sample.channel(c))?);
    }
    Ok(ProsodyDescriptor(out))
}

/// Descriptor after mapping pitch and duration back from log scale.
pub fn raw_descriptor(sample: &ProsodySequence) -> Result<ProsodyDescriptor> {
    let [p, e, d] = sample.to_raw_scale();
    descriptor(&ProsodySequence::from_channels(&p, &e, &d)?)
}

/// Leave-one-out nearest-centroid accuracy on standardized descriptors.
pub fn cluster_separation(samples: &[(usize, ProsodyDescriptor)]) -> Result<f64> {
    let labels: std::collections::BTreeMap<usize, usize> =
        samples.iter().fold(Default::default(), |mut m, (l, _)| {
            *m.entry(*l).or_insert(0) += 1;
            m
        });
    if labels.len() < 2 {
        return Err(Error::invalid("cluster separation needs at least two labels"));
    }
    if let Some((l, _)) = labels.iter().find(|(_, &n)| n < 2) {
        return Err(Error::invalid(format!("label {l} has fewer than two samples")));
    }
    let n = samples.len() as f64;
    let mut z: Vec<[f64; 21]> = samples.iter().map(|(_, d)| d.0).collect();
    for k in 0..21 {
        let col: Vec<f64> = z.iter().map(|r| r[k]).collect();
        let (m, sd) = (col.iter().sum::<f64>() / n, population_std(&col));
        for r in &mut z {
            r[k] = if sd > 0.0 { (r[k] - m) / sd } else { 0.0 };
        }
    }
    let keys: Vec<usize> = labels.keys().copied().collect();
    let mut sums = vec![[0.0; 21]; keys.len()];
    let counts: Vec<f64> = keys.iter().map(|k| labels[k] as f64).collect();
    let slot = |l: usize| keys.binary_search(&l).expect("known label");
    for ((l, _), r) in samples.iter().zip(&z) {
        for (s, v) in sums[slot(*l)].iter_mut().zip(r) {
            *s += v;
        }
    }
    let mut correct = 0usize;
    for ((l, _), r) in samples.iter().zip(&z) {
        let own = slot(*l);
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..keys.len() {
            let (cnt, held) = if j == own { (counts[j] - 1.0, true) } else { (counts[j], false) };
            let dist: f64 = (0..21)
                .map(|k| {
                    let s = if held { sums[j][k] - r[k] } else { sums[j][k] };
                    (r[k] - s / cnt).powi(2)
                })
                .sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        correct += usize::from(best.1 == own);
    }
    Ok(correct as f64 / n)
}

/// Per-channel divergence between generated and reference values on the raw
/// scale, with bins spanning the reference range.
pub fn channel_js(generated: &[ProsodySequence], reference: &[ProsodySequence], bins: usize) -> Result<[f64; CHANNELS]> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("channel divergence needs generated and reference samples"));
    }
    let pool = |seqs: &[ProsodySequence]| {
        let mut out: [Vec<f64>; CHANNELS] = Default::default();
        for s in seqs {
            for (o, ch) in out.iter_mut().zip(s.to_raw_scale()) {
                o.extend(ch);
            }
        }
        out
    };
    let (gen, refs) = (pool(generated), pool(reference));
    let mut out = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        let lo = refs[c].iter().copied().fold(f64::INFINITY, f64::min);
        let hi = refs[c].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo < hi) {
            return Err(Error::Degenerate(format!("reference channel {c} is constant")));
        }
        let p = Histogram::uniform(&gen[c], lo, hi, bins)?;
        let q = Histogram::uniform(&refs[c], lo, hi, bins)?;
        out[c] = js_divergence(&p, &q)?;
    }
    Ok(out)
}

/// Per-channel pitch, energy and duration CV of one sequence on the raw scale.
pub fn sequence_cv(sample: &ProsodySequence) -> Result<[f64; CHANNELS]> {
    let raw = sample.to_raw_scale();
    let mut out = [0.0; CHANNELS];
    for (o, ch) in out.iter_mut().zip(&raw) {
        *o = coefficient_of_variation(ch)?;
    }
    Ok(out)
}
