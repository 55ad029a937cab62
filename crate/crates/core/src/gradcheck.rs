//! Central finite-difference checks of the backward passes.
//!
//! Checks run the generic kernels in `f64`. An entry is skipped when the
//! ±ε perturbation changes the piecewise regime of the function (a ReLU sign,
//! a pooling argmax, a sampled stochastic-pool index), since the derivative
//! is not defined across such a switch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{self, Mode, PoolGeometry};
use crate::network::{network_backward, network_forward, LayerAux, LayerSpec, ModelState, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Entries below this magnitude (analytic and numeric) are not compared.
    pub floor: f64,
    /// Upper bound on perturbed entries per tensor; larger tensors are sampled.
    pub max_entries: usize,
    pub batch: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: 64,
            batch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.max_rel_error)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < tolerance)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn sample_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, max).into_vec()
    }
}

/// Compares `analytic` against central differences of `eval` over the
/// entries of `values`. `eval` returns the scalar objective and a regime
/// signature.
fn check_tensor<S: PartialEq>(
    name: &str,
    values: &mut [f64],
    analytic: &[f64],
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    base_sig: &S,
    mut eval: impl FnMut(&[f64]) -> Result<(f64, S)>,
) -> Result<TensorCheck> {
    let mut check = TensorCheck {
        name: name.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in sample_indices(values.len(), cfg.max_entries, rng) {
        let orig = values[i];
        values[i] = orig + cfg.eps;
        let (plus, sig_p) = eval(values)?;
        values[i] = orig - cfg.eps;
        let (minus, sig_m) = eval(values)?;
        values[i] = orig;
        if &sig_p != base_sig || &sig_m != base_sig {
            check.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        if analytic[i].abs().max(numeric.abs()) <= cfg.floor {
            continue;
        }
        check.checked += 1;
        check.max_rel_error = check.max_rel_error.max(rel_error(analytic[i], numeric));
    }
    Ok(check)
}

fn signature(aux: &[LayerAux<f64>], inputs: &[Tensor<f64>], spec: &NetworkSpec) -> Vec<Vec<usize>> {
    spec.layers
        .iter()
        .zip(aux)
        .zip(inputs)
        .map(|((layer, a), x)| match (layer, a) {
            (LayerSpec::Relu, _) => x.data().iter().map(|&v| usize::from(v > 0.0)).collect(),
            (_, LayerAux::Indices(idx)) => idx.clone(),
            _ => Vec::new(),
        })
        .collect()
}

/// Checks every parameter tensor and the input gradient of a randomly
/// initialized network on a random batch, in training mode with a fixed
/// stochastic stream.
pub fn check_network(spec: &NetworkSpec, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelState::<f64>::init(spec, &mut rng)?;
    for p in &mut model.params {
        p.bias = Tensor::uniform(p.bias.shape(), 0.1, &mut rng);
    }
    let [c, h, w] = spec.input_shape;
    let x = Tensor::<f64>::uniform(&[cfg.batch, c, h, w], 1.0, &mut rng);
    let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..spec.class_count)).collect();
    let stream: u64 = rng.gen();

    let eval = |m: &ModelState<f64>, x: &Tensor<f64>| -> Result<(f64, Vec<Vec<usize>>)> {
        let pass = network_forward(m, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(stream))?;
        let xent = layers::softmax_xent(&pass.logits, &labels)?;
        Ok((xent.loss, signature(&pass.aux, &pass.inputs, spec)))
    };

    let pass = network_forward(&model, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(stream))?;
    let base_sig = signature(&pass.aux, &pass.inputs, spec);
    let grads = network_backward(&model, &pass, &labels)?;

    let mut report = GradcheckReport::default();
    for (pi, g) in grads.params.iter().enumerate() {
        let layer = g.layer;
        let kind = spec.layers[layer].kind();
        for which in ["weight", "bias"] {
            let analytic = if which == "weight" { g.weight.data() } else { g.bias.data() };
            let mut values = {
                let p = &model.params[pi];
                if which == "weight" { p.weight.clone() } else { p.bias.clone() }
            };
            let mut probe = model.clone();
            let check = check_tensor(
                &format!("layer {layer} ({kind}) {which}"),
                values.data_mut(),
                analytic,
                cfg,
                &mut rng,
                &base_sig,
                |vals| {
                    let p = &mut probe.params[pi];
                    let t = if which == "weight" { &mut p.weight } else { &mut p.bias };
                    t.data_mut().copy_from_slice(vals);
                    eval(&probe, &x)
                },
            )?;
            report.checks.push(check);
        }
    }
    let mut xv = x.clone();
    let mut probe_x = x.clone();
    let check = check_tensor(
        "input",
        xv.data_mut(),
        grads.input.data(),
        cfg,
        &mut rng,
        &base_sig,
        |vals| {
            probe_x.data_mut().copy_from_slice(vals);
            eval(&model, &probe_x)
        },
    )?;
    report.checks.push(check);
    Ok(report)
}

/// Kernel-level checks with a random linear objective `Σ r ⊙ f(x)`.
pub fn check_layers(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };

    // conv, random geometry
    {
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let (c, o, hw) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(4..=6));
        let x = Tensor::<f64>::uniform(&[2, c, hw, hw], 1.0, &mut rng);
        let f = Tensor::<f64>::uniform(&[o, c, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[o], 1.0, &mut rng);
        let y = layers::conv_forward(&x, &f, &b, stride, pad)?;
        let r = Tensor::<f64>::uniform(y.shape(), 1.0, &mut rng);
        let g = layers::conv_backward(&x, &f, &r, stride, pad)?;
        let mut probe = (x.clone(), f.clone(), b.clone());
        for (name, which, analytic) in [
            ("conv grad_x", 0, g.grad_x.data()),
            ("conv grad_filters", 1, g.grad_filters.data()),
            ("conv grad_bias", 2, g.grad_bias.data()),
        ] {
            let mut vals = [&x, &f, &b][which].clone();
            let check = check_tensor(name, vals.data_mut(), analytic, cfg, &mut rng, &(), |v| {
                let t = match which {
                    0 => &mut probe.0,
                    1 => &mut probe.1,
                    _ => &mut probe.2,
                };
                t.data_mut().copy_from_slice(v);
                let y = layers::conv_forward(&probe.0, &probe.1, &probe.2, stride, pad)?;
                probe = (x.clone(), f.clone(), b.clone());
                Ok((dot(&r, &y), ()))
            })?;
            report.checks.push(check);
        }
    }

    // fully connected
    {
        let (n, i, o) = (2, rng.gen_range(2..=6), rng.gen_range(2..=5));
        let x = Tensor::<f64>::uniform(&[n, i], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[o, i], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[o], 1.0, &mut rng);
        let r = Tensor::<f64>::uniform(&[n, o], 1.0, &mut rng);
        let g = layers::fc_backward(&x, &w, &r)?;
        for (name, which, analytic) in [
            ("fc grad_x", 0, g.grad_x.data()),
            ("fc grad_weight", 1, g.grad_weight.data()),
            ("fc grad_bias", 2, g.grad_bias.data()),
        ] {
            let mut vals = [&x, &w, &b][which].clone();
            let check = check_tensor(name, vals.data_mut(), analytic, cfg, &mut rng, &(), |v| {
                let mut probe = [x.clone(), w.clone(), b.clone()];
                probe[which].data_mut().copy_from_slice(v);
                let y = layers::fc_forward(&probe[0], &probe[1], &probe[2])?;
                Ok((dot(&r, &y), ()))
            })?;
            report.checks.push(check);
        }
    }

    // relu, inputs kept away from the kink
    {
        let mut x = Tensor::<f64>::uniform(&[2, 2, 3, 3], 1.0, &mut rng);
        for v in x.data_mut() {
            *v += 0.1 * v.signum();
        }
        let r = Tensor::<f64>::uniform(x.shape(), 1.0, &mut rng);
        let g = layers::relu_backward(&x, &r)?;
        let shape = x.shape().to_vec();
        let base: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        let check = check_tensor("relu grad_x", x.clone().data_mut(), g.data(), cfg, &mut rng, &base, |v| {
            let t = Tensor::from_vec(&shape, v.to_vec())?;
            let sig: Vec<bool> = v.iter().map(|&a| a > 0.0).collect();
            Ok((dot(&r, &layers::relu_forward(&t)), sig))
        })?;
        report.checks.push(check);
    }

    // max pooling with overlapping windows
    {
        let geo = PoolGeometry {
            window: 3,
            stride: 2,
            pad: rng.gen_range(0..=1),
        };
        let x = Tensor::<f64>::uniform(&[2, 2, 7, 7], 1.0, &mut rng);
        let (y, idx) = layers::maxpool_forward(&x, geo)?;
        let r = Tensor::<f64>::uniform(y.shape(), 1.0, &mut rng);
        let g = layers::maxpool_backward(x.shape(), &idx, &r)?;
        let shape = x.shape().to_vec();
        let check = check_tensor("maxpool grad_x", x.clone().data_mut(), g.data(), cfg, &mut rng, &idx, |v| {
            let (y, idx) = layers::maxpool_forward(&Tensor::from_vec(&shape, v.to_vec())?, geo)?;
            Ok((dot(&r, &y), idx))
        })?;
        report.checks.push(check);
    }

    // stochastic pooling, training (fixed stream) and inference
    {
        let geo = PoolGeometry {
            window: 2,
            stride: 2,
            pad: 0,
        };
        let x = Tensor::<f64>::uniform(&[2, 2, 4, 4], 1.0, &mut rng).map(|v| 1.0 + 0.5 * v.abs());
        let stream: u64 = rng.gen();
        let (y, idx) = layers::stochpool_forward(&x, geo, &mut ChaCha8Rng::seed_from_u64(stream), Mode::Train)?;
        let r = Tensor::<f64>::uniform(y.shape(), 1.0, &mut rng);
        let g = layers::maxpool_backward(x.shape(), &idx, &r)?;
        let shape = x.shape().to_vec();
        let check = check_tensor("stochpool(train) grad_x", x.clone().data_mut(), g.data(), cfg, &mut rng, &idx, |v| {
            let t = Tensor::from_vec(&shape, v.to_vec())?;
            let (y, idx) = layers::stochpool_forward(&t, geo, &mut ChaCha8Rng::seed_from_u64(stream), Mode::Train)?;
            Ok((dot(&r, &y), idx))
        })?;
        report.checks.push(check);

        let g = layers::stochpool_infer_backward(&x, geo, &r)?;
        let check = check_tensor("stochpool(infer) grad_x", x.clone().data_mut(), g.data(), cfg, &mut rng, &(), |v| {
            let t = Tensor::from_vec(&shape, v.to_vec())?;
            let (y, _) = layers::stochpool_forward(&t, geo, &mut ChaCha8Rng::seed_from_u64(0), Mode::Infer)?;
            Ok((dot(&r, &y), ()))
        })?;
        report.checks.push(check);
    }

    // dropout, training mask from a fixed stream
    {
        let x = Tensor::<f64>::uniform(&[2, 10], 1.0, &mut rng);
        let stream: u64 = rng.gen();
        let (_, mask) = layers::dropout_forward(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(stream), Mode::Train);
        let r = Tensor::<f64>::uniform(x.shape(), 1.0, &mut rng);
        let g = layers::dropout_backward(&mask, &r)?;
        let shape = x.shape().to_vec();
        let check = check_tensor("dropout grad_x", x.clone().data_mut(), g.data(), cfg, &mut rng, &(), |v| {
            let t = Tensor::from_vec(&shape, v.to_vec())?;
            let (y, _) = layers::dropout_forward(&t, 0.5, &mut ChaCha8Rng::seed_from_u64(stream), Mode::Train);
            Ok((dot(&r, &y), ()))
        })?;
        report.checks.push(check);
    }

    // softmax cross-entropy
    {
        let k = rng.gen_range(2..=6);
        let logits = Tensor::<f64>::uniform(&[3, k], 2.0, &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..k)).collect();
        let s = layers::softmax_xent(&logits, &labels)?;
        let check = check_tensor(
            "softmax_xent grad_logits",
            logits.clone().data_mut(),
            s.grad_logits.data(),
            cfg,
            &mut rng,
            &(),
            |v| Ok((layers::softmax_xent(&Tensor::from_vec(&[3, k], v.to_vec())?, &labels)?.loss, ())),
        )?;
        report.checks.push(check);
    }
    Ok(report)
}
