//! Central finite-difference checks of every differentiable operation and of
//! complete small models. Shared by the gradient tests and the acceptance run.

use std::time::{Duration, Instant};

use prosody_diffusion::compute::{Graph, ParamSet, Tensor, Var};
use prosody_diffusion::denoiser::{Denoiser, DenoiserConfig, StyleInjection};
use prosody_diffusion::schedule::NoiseSchedule;
use prosody_diffusion::rng::{normals, stream, Substream};
use prosody_diffusion::style::{StyleBank, StyleConfig};
use prosody_diffusion::Result;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const BUDGET: Duration = Duration::from_secs(1);

fn random(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let v = normals(&mut stream(seed, Substream::Eval), n)
        .into_iter()
        .map(|x| if x.abs() < 1e-2 { x + 0.05 } else { x })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Projects the op output onto a fixed random direction so every output
/// element contributes, then compares input gradients.
fn scalar(g: &mut Graph, build: &Build, vars: &[Var]) -> Var {
    let out = build(g, vars).unwrap();
    let dir = g.constant(random(g.shape(out), 999));
    let prod = g.mul(out, dir).unwrap();
    g.sum(prod)
}

fn loss_at(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let s = scalar(&mut g, build, &vars);
    g.value(s)[0]
}

pub struct Check {
    pub name: String,
    pub error: f64,
    pub elapsed: Duration,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < TOL && self.elapsed < BUDGET
    }
}

fn check_op(out: &mut Vec<Check>, name: &str, inputs: Vec<Tensor>, build: &Build) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let s = scalar(&mut g, build, &vars);
    g.backward(s, &mut []).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].values_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].values_mut()[j] -= H;
            numeric.push((loss_at(&plus, build) - loss_at(&minus, build)) / (2.0 * H));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    out.push(Check { name: name.to_string(), error: worst, elapsed: start.elapsed() });
}

pub fn elementwise_ops() -> Vec<Check> {
    let mut out = Vec::new();
    let a = random(&[2, 3, 4], 1);
    let b = random(&[2, 3, 4], 2);
    check_op(&mut out, "add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]));
    check_op(&mut out, "sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]));
    check_op(&mut out, "mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]));
    check_op(&mut out, "scale", vec![a.clone()], &|g, v| Ok(g.scale(v[0], -1.7)));
    check_op(&mut out, "tanh", vec![a.clone()], &|g, v| Ok(g.tanh(v[0])));
    check_op(&mut out, "sigmoid", vec![a.clone()], &|g, v| Ok(g.sigmoid(v[0])));
    check_op(&mut out, "silu", vec![a.clone()], &|g, v| Ok(g.silu(v[0])));
    check_op(&mut out, "relu", vec![a.clone()], &|g, v| Ok(g.relu(v[0])));
    check_op(&mut out, "gated", vec![a, b], &|g, v| g.gated(v[0], v[1]));
    out
}

pub fn conv1d_all_arguments() -> Vec<Check> {
    let mut out = Vec::new();
    for (k, dilation) in [(3, 1), (3, 2), (5, 3), (1, 1)] {
        let x = random(&[2, 3, 7], 3);
        let w = random(&[4, 3, k], 4);
        let b = random(&[4], 5);
        check_op(&mut out, &format!("conv1d k={k} d={dilation}"), vec![x.clone(), w.clone(), b], &move |g, v| {
            g.conv1d(v[0], v[1], Some(v[2]), dilation)
        });
        check_op(&mut out, &format!("conv1d k={k} d={dilation} no bias"), vec![x, w], &move |g, v| g.conv1d(v[0], v[1], None, dilation));
    }
    out
}

pub fn dense_ops() -> Vec<Check> {
    let mut out = Vec::new();
    let x = random(&[3, 5], 6);
    let w = random(&[4, 5], 7);
    let b = random(&[4], 8);
    check_op(&mut out, "linear", vec![x.clone(), w.clone(), b], &|g, v| g.linear(v[0], v[1], Some(v[2])));
    check_op(&mut out, "linear no bias", vec![x.clone(), w.clone()], &|g, v| g.linear(v[0], v[1], None));
    check_op(&mut out, "matmul trans", vec![x.clone(), w], &|g, v| g.matmul(v[0], v[1], true));
    check_op(&mut out, "matmul", vec![x, random(&[5, 2], 9)], &|g, v| g.matmul(v[0], v[1], false));
    out
}

pub fn shape_ops() -> Vec<Check> {
    let mut out = Vec::new();
    let m = random(&[2, 6], 10);
    check_op(&mut out, "broadcast_positions", vec![m.clone()], &|g, v| g.broadcast_positions(v[0], 4));
    check_op(&mut out, "repeat_rows", vec![random(&[6], 11)], &|g, v| Ok(g.repeat_rows(v[0], 3)));
    check_op(&mut out, "slice_channels", vec![random(&[2, 5, 3], 12)], &|g, v| g.slice_channels(v[0], 1, 3));
    check_op(&mut out, "slice_cols", vec![m.clone()], &|g, v| g.slice_cols(v[0], 2, 3));
    check_op(&mut out, "concat_cols", vec![m.clone(), random(&[2, 3], 13)], &|g, v| g.concat_cols(&[v[0], v[1]]));
    check_op(&mut out, "softmax", vec![m.clone()], &|g, v| Ok(g.softmax(v[0])));
    check_op(&mut out, "mean_positions", vec![random(&[2, 3, 5], 14)], &|g, v| g.mean_positions(v[0]));
    check_op(&mut out, "reshape", vec![m.clone()], &|g, v| g.reshape(v[0], vec![3, 4]));
    check_op(&mut out, "sum", vec![m.clone()], &|g, v| {
        let s = g.sum(v[0]);
        Ok(g.scale(s, 1.0))
    });
    check_op(&mut out, "mse", vec![m, random(&[2, 6], 15)], &|g, v| g.mse(v[0], v[1]));
    out
}

/// Finite differences over every element of every parameter in `sets`.
fn check_params(out: &mut Vec<Check>, name: &str, sets: &mut [&mut ParamSet], loss: &dyn Fn(&[&ParamSet], bool) -> (f64, Vec<Vec<f64>>)) {
    let start = Instant::now();
    let (_, analytic) = {
        let views: Vec<&ParamSet> = sets.iter().map(|s| &**s).collect();
        loss(&views, true)
    };
    let mut k = 0;
    let mut worst = 0.0f64;
    for s in 0..sets.len() {
        for p in 0..sets[s].len() {
            let id = sets[s].iter().nth(p).map(|q| q.name.clone()).unwrap();
            let pid = sets[s].id(&id).unwrap();
            let n = sets[s].get(pid).tensor.len();
            let mut numeric = Vec::with_capacity(n);
            for j in 0..n {
                let orig = sets[s].get(pid).tensor.values()[j];
                sets[s].get_mut(pid).tensor.values_mut()[j] = orig + H;
                let up = loss(&sets.iter().map(|s| &**s).collect::<Vec<_>>(), false).0;
                sets[s].get_mut(pid).tensor.values_mut()[j] = orig - H;
                let down = loss(&sets.iter().map(|s| &**s).collect::<Vec<_>>(), false).0;
                sets[s].get_mut(pid).tensor.values_mut()[j] = orig;
                numeric.push((up - down) / (2.0 * H));
            }
            worst = worst.max(relative_error(&analytic[k], &numeric));
            k += 1;
        }
    }
    out.push(Check { name: name.to_string(), error: worst, elapsed: start.elapsed() });
}

fn tiny(style_injection: StyleInjection) -> DenoiserConfig {
    DenoiserConfig {
        residual_layers: 2,
        hidden_channels: 3,
        time_embedding_dim: 4,
        condition_dim: 4,
        dilation_cycle: vec![1, 2],
        style_injection,
        ..DenoiserConfig::default()
    }
}

fn grads_of(set: &mut ParamSet) -> Vec<Vec<f64>> {
    set.iter_mut().map(|p| p.tensor.take_grad().unwrap()).collect()
}

pub fn two_layer_denoiser_with_style_bank() -> Vec<Check> {
    let mut out = Vec::new();
    for injection in [StyleInjection::Conditioner, StyleInjection::StepEmbedding] {
        let mut rng = stream(21, Substream::Init);
        let mut den = Denoiser::new(tiny(injection), true, "theta1", &mut rng).unwrap();
        let style = StyleConfig {
            token_count: 3,
            token_dim: 4,
            heads: 2,
            reference_channels: 2,
            reference_layers: 1,
            reference_kernel: 3,
        };
        let bank = StyleBank::new(style, &mut rng).unwrap();
        let x = random(&[2, 3, 5], 22);
        let y = random(&[2, 4, 5], 23);
        let reference = random(&[2, 3, 4], 24);
        let eps = random(&[2, 3, 5], 25);
        let den_cfg = den.config().clone();
        let loss = move |sets: &[&ParamSet], want_grads: bool| {
            let mut d = Denoiser::new(den_cfg.clone(), true, "theta1", &mut stream(21, Substream::Init)).unwrap();
            d.params_mut().load_values_from(sets[0]).unwrap();
            let mut b = StyleBank::new(bank.config().clone(), &mut stream(0, Substream::Init)).unwrap();
            b.params_mut().load_values_from(sets[1]).unwrap();
            let mut g = Graph::new();
            let (xv, yv, rv, ev) = (
                g.constant(x.clone()),
                g.constant(y.clone()),
                g.constant(reference.clone()),
                g.constant(eps.clone()),
            );
            let (c, _) = b.encode_graph(&mut g, rv).unwrap();
            let pred = d.forward(&mut g, xv, &[3, 17], &NoiseSchedule::cosine(20).unwrap(), yv, Some(c)).unwrap();
            let l = g.mse(pred, ev).unwrap();
            let value = g.value(l)[0];
            if !want_grads {
                return (value, Vec::new());
            }
            g.backward(l, &mut [d.params_mut(), b.params_mut()]).unwrap();
            let mut all = grads_of(d.params_mut());
            all.extend(grads_of(b.params_mut()));
            (value, all)
        };
        let mut bank_params = StyleBank::new(
            StyleConfig {
                token_count: 3,
                token_dim: 4,
                heads: 2,
                reference_channels: 2,
                reference_layers: 1,
                reference_kernel: 3,
            },
            &mut stream(0, Substream::Init),
        )
        .unwrap()
        .params()
        .clone();
        for (i, p) in bank_params.iter_mut().enumerate() {
            let fresh = random(p.tensor.shape(), 40 + i as u64);
            p.tensor.values_mut().copy_from_slice(fresh.values());
        }
        for (i, p) in den.params_mut().iter_mut().enumerate() {
            let fresh = random(p.tensor.shape(), 60 + i as u64).map(|v| 0.5 * v);
            p.tensor.values_mut().copy_from_slice(fresh.values());
        }
        let mut den_params = den.params().clone();
        check_params(&mut out, &format!("denoiser {injection:?}"), &mut [&mut den_params, &mut bank_params], &loss);
    }
    out
}

pub fn unconditional_denoiser() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = stream(31, Substream::Init);
    let den = Denoiser::new(tiny(StyleInjection::Conditioner), false, "theta2", &mut rng).unwrap();
    let (x, y, eps) = (random(&[1, 3, 6], 32), random(&[1, 4, 6], 33), random(&[1, 3, 6], 34));
    let cfg = den.config().clone();
    let loss = move |sets: &[&ParamSet], want_grads: bool| {
        let mut d = Denoiser::new(cfg.clone(), false, "theta2", &mut stream(31, Substream::Init)).unwrap();
        d.params_mut().load_values_from(sets[0]).unwrap();
        let mut g = Graph::new();
        let (xv, yv, ev) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(eps.clone()));
        let pred = d.forward(&mut g, xv, &[9], &NoiseSchedule::cosine(20).unwrap(), yv, None).unwrap();
        let l = g.mse(pred, ev).unwrap();
        let value = g.value(l)[0];
        if !want_grads {
            return (value, Vec::new());
        }
        g.backward(l, &mut [d.params_mut()]).unwrap();
        (value, grads_of(d.params_mut()))
    };
    let mut params = den.params().clone();
    for (i, p) in params.iter_mut().enumerate() {
        let fresh = random(p.tensor.shape(), 70 + i as u64).map(|v| 0.5 * v);
        p.tensor.values_mut().copy_from_slice(fresh.values());
    }
    check_params(&mut out, "unconditional denoiser", &mut [&mut params], &loss);
    out
}

pub fn all() -> Vec<Check> {
    [
        elementwise_ops(),
        conv1d_all_arguments(),
        dense_ops(),
        shape_ops(),
        two_layer_denoiser_with_style_bank(),
        unconditional_denoiser(),
    ]
    .into_iter()
    .flatten()
    .collect()
}
