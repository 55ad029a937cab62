//! Convolutional RBM: block-Gibbs conditionals, probabilistic max pooling,
//! CD-1 training, filter export and transfer into a CNN.
//!
//! Hidden inference is valid cross-correlation; reconstruction is the full
//! convolution of each hidden map with its own filter, summed over maps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers;
use crate::network::{LayerSpec, ModelState};
use crate::tensor::{sigmoid, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrbmGeometry {
    pub filters: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pool_block: usize,
}

impl CrbmGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.in_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.pool_block == 0 {
            return Err(Error::Config(format!("every CRBM extent must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Weights, hidden biases and the visible bias.
    pub fn param_count(&self) -> usize {
        self.filters * self.in_channels * self.kernel_h * self.kernel_w + self.filters + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrbmState<T: Real = f32> {
    /// `(K, C, kh, kw)`.
    pub filters: Tensor<T>,
    /// One per filter, shared across positions.
    pub hidden_bias: Tensor<T>,
    /// Shared across all visible units.
    pub visible_bias: T,
    pub pool_block: usize,
}

impl<T: Real> CrbmState<T> {
    pub fn zeros(g: CrbmGeometry) -> Result<Self> {
        g.validate()?;
        Ok(CrbmState {
            filters: Tensor::zeros(&[g.filters, g.in_channels, g.kernel_h, g.kernel_w]),
            hidden_bias: Tensor::zeros(&[g.filters]),
            visible_bias: T::zero(),
            pool_block: g.pool_block,
        })
    }

    /// Small uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(g: CrbmGeometry, rng: &mut R) -> Result<Self> {
        let mut s = Self::zeros(g)?;
        s.filters = Tensor::uniform(s.filters.shape(), 0.01, rng);
        Ok(s)
    }

    pub fn geometry(&self) -> CrbmGeometry {
        let d = self.filters.shape();
        CrbmGeometry {
            filters: d[0],
            in_channels: d[1],
            kernel_h: d[2],
            kernel_w: d[3],
            pool_block: self.pool_block,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.filters.all_finite() && self.hidden_bias.all_finite() && self.visible_bias.is_finite()
    }

    pub fn cast<U: Real>(&self) -> CrbmState<U> {
        CrbmState {
            filters: self.filters.cast(),
            hidden_bias: self.hidden_bias.cast(),
            visible_bias: U::of(self.visible_bias.to_f64().expect("real")),
            pool_block: self.pool_block,
        }
    }
}

fn check_visible<T: Real>(v: &Tensor<T>, s: &CrbmState<T>) -> Result<()> {
    let g = s.geometry();
    match *v.shape() {
        [_, c, h, w] if c == g.in_channels && h >= g.kernel_h && w >= g.kernel_w => Ok(()),
        ref sh => Err(Error::shape(format!(
            "visible batch {sh:?} does not fit {} channels with {}x{} filters",
            g.in_channels, g.kernel_h, g.kernel_w
        ))),
    }
}

/// `(W ⋆ v)_k + b_k` by valid cross-correlation.
pub fn hidden_preact<T: Real>(v: &Tensor<T>, s: &CrbmState<T>) -> Result<Tensor<T>> {
    check_visible(v, s)?;
    layers::conv_forward(v, &s.filters, &s.hidden_bias, 1, 0)
}

/// `P(h_k,ij = 1 | v)` without pooling.
pub fn hidden_prob<T: Real>(v: &Tensor<T>, s: &CrbmState<T>) -> Result<Tensor<T>> {
    Ok(hidden_preact(v, s)?.map(sigmoid))
}

/// `Σ_k (h_k * W_k) + c` by full convolution.
pub fn visible_preact<T: Real>(h: &Tensor<T>, s: &CrbmState<T>) -> Result<Tensor<T>> {
    let g = s.geometry();
    let [n, k, ho, wo] = *h.shape() else {
        return Err(Error::shape(format!("hidden batch must be 4-D, got {:?}", h.shape())));
    };
    if k != g.filters {
        return Err(Error::shape(format!("hidden batch has {k} maps, CRBM has {} filters", g.filters)));
    }
    let vis = Tensor::zeros(&[n, g.in_channels, ho + g.kernel_h - 1, wo + g.kernel_w - 1]);
    let mut pre = layers::conv_backward(&vis, &s.filters, h, 1, 0)?.grad_x;
    let c = s.visible_bias;
    for x in pre.data_mut() {
        *x += c;
    }
    Ok(pre)
}

/// `P(v_ij = 1 | h)`.
pub fn visible_prob<T: Real>(h: &Tensor<T>, s: &CrbmState<T>) -> Result<Tensor<T>> {
    Ok(visible_preact(h, s)?.map(sigmoid))
}

/// Probabilistic max pooling over non-overlapping `block × block` regions;
/// edge blocks are partial (missing units act as −∞ pre-activations).
#[derive(Clone, Debug)]
pub struct PoolOutcome<T: Real> {
    /// `P(unit on)`, same shape as the pre-activations.
    pub on_prob: Tensor<T>,
    /// `1 − P(all off)` per block.
    pub pooled_prob: Tensor<T>,
    /// At most one 1 per block.
    pub hidden_sample: Tensor<T>,
    /// Block indicator of `hidden_sample`.
    pub pooled_sample: Tensor<T>,
}

fn blocks(h: usize, w: usize, block: usize) -> (usize, usize) {
    (h.div_ceil(block), w.div_ceil(block))
}

/// Exact probabilities only; no sampling.
pub fn prob_maxpool_probs<T: Real>(preact: &Tensor<T>, block: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    pool_impl(preact, block, None::<&mut ChaCha8Rng>).map(|o| (o.on_prob, o.pooled_prob))
}

pub fn prob_maxpool<T: Real, R: Rng + ?Sized>(preact: &Tensor<T>, block: usize, rng: &mut R) -> Result<PoolOutcome<T>> {
    pool_impl(preact, block, Some(rng))
}

fn pool_impl<T: Real, R: Rng + ?Sized>(preact: &Tensor<T>, block: usize, mut rng: Option<&mut R>) -> Result<PoolOutcome<T>> {
    let [n, k, h, w] = *preact.shape() else {
        return Err(Error::shape(format!("pre-activations must be 4-D, got {:?}", preact.shape())));
    };
    if block == 0 {
        return Err(Error::shape("pool block must be >= 1"));
    }
    let (ph, pw) = blocks(h, w, block);
    let mut on = Tensor::zeros(preact.shape());
    let mut sample = Tensor::zeros(preact.shape());
    let mut pooled = Tensor::zeros(&[n, k, ph, pw]);
    let mut pooled_sample = Tensor::zeros(&[n, k, ph, pw]);
    let xs = preact.data();
    let mut units = Vec::with_capacity(block * block);
    for map in 0..n * k {
        let base = map * h * w;
        for bi in 0..ph {
            for bj in 0..pw {
                units.clear();
                for i in bi * block..((bi + 1) * block).min(h) {
                    for j in bj * block..((bj + 1) * block).min(w) {
                        units.push(base + i * w + j);
                    }
                }
                // Shift by max(0, max preact) so the off state's exp(0) is included.
                let m = units.iter().map(|&u| xs[u]).fold(T::zero(), T::max);
                let off = (-m).exp();
                let z = off + units.iter().map(|&u| (xs[u] - m).exp()).sum::<T>();
                let pidx = map * ph * pw + bi * pw + bj;
                for &u in &units {
                    let p = (xs[u] - m).exp() / z;
                    on.data_mut()[u] = p;
                }
                pooled.data_mut()[pidx] = T::one() - off / z;
                if let Some(r) = rng.as_deref_mut() {
                    let draw = T::of(r.gen::<f64>());
                    let mut acc = T::zero();
                    for &u in &units {
                        acc += on.data()[u];
                        if draw < acc {
                            sample.data_mut()[u] = T::one();
                            pooled_sample.data_mut()[pidx] = T::one();
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(PoolOutcome {
        on_prob: on,
        pooled_prob: pooled,
        hidden_sample: sample,
        pooled_sample,
    })
}

/// Hidden probabilities used by CD-1: sigmoid when `pool_block == 1`, the
/// block-constrained probabilities otherwise.
fn hidden_probs_for_cd<T: Real>(v: &Tensor<T>, s: &CrbmState<T>) -> Result<Tensor<T>> {
    let pre = hidden_preact(v, s)?;
    if s.pool_block == 1 {
        Ok(pre.map(sigmoid))
    } else {
        Ok(prob_maxpool_probs(&pre, s.pool_block)?.0)
    }
}

/// Positive-phase hidden sample.
pub fn sample_hidden<T: Real, R: Rng + ?Sized>(v: &Tensor<T>, s: &CrbmState<T>, rng: &mut R) -> Result<Tensor<T>> {
    let pre = hidden_preact(v, s)?;
    if s.pool_block == 1 {
        let mut out = pre;
        for a in out.data_mut() {
            *a = if T::of(rng.gen::<f64>()) < sigmoid(*a) { T::one() } else { T::zero() };
        }
        Ok(out)
    } else {
        Ok(prob_maxpool(&pre, s.pool_block, rng)?.hidden_sample)
    }
}

/// Ascent direction of one CD-1 step for a fixed positive-phase sample.
#[derive(Clone, Debug)]
pub struct Cd1Grads<T: Real> {
    pub filters: Tensor<T>,
    pub hidden_bias: Tensor<T>,
    pub visible_bias: T,
    /// Reconstruction probabilities.
    pub v_neg: Tensor<T>,
    pub h_neg: Tensor<T>,
}

/// `ΔW_k = (corr(v, h⁺_k) − corr(v⁻, h⁻_k)) / (N·Ho·Wo)`,
/// `Δb_k = mean(h⁺_k) − mean(h⁻_k)`, `Δc = mean(v) − mean(v⁻)`.
pub fn cd1_gradient<T: Real>(v: &Tensor<T>, h_pos: &Tensor<T>, s: &CrbmState<T>) -> Result<Cd1Grads<T>> {
    check_visible(v, s)?;
    let v_neg = visible_prob(h_pos, s)?;
    v_neg.expect_shape(v.shape())?;
    let h_neg = hidden_probs_for_cd(&v_neg, s)?;
    let pos = layers::conv_backward(v, &s.filters, h_pos, 1, 0)?;
    let neg = layers::conv_backward(&v_neg, &s.filters, &h_neg, 1, 0)?;
    let [n, _, ho, wo] = *h_pos.shape() else { unreachable!() };
    let norm = T::of(1.0 / (n * ho * wo) as f64);
    let mut filters = pos.grad_filters;
    for (a, &b) in filters.data_mut().iter_mut().zip(neg.grad_filters.data()) {
        *a = (*a - b) * norm;
    }
    let mut hidden_bias = pos.grad_bias;
    for (a, &b) in hidden_bias.data_mut().iter_mut().zip(neg.grad_bias.data()) {
        *a = (*a - b) * norm;
    }
    let visible_bias = v.mean() - v_neg.mean();
    Ok(Cd1Grads {
        filters,
        hidden_bias,
        visible_bias,
        v_neg,
        h_neg,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cd1Config {
    pub lr: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// First 1-based epoch that uses `momentum_final`.
    pub momentum_switch_epoch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub variance_ratio_limit: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for Cd1Config {
    fn default() -> Self {
        Cd1Config {
            lr: 0.1,
            momentum_initial: 0.5,
            momentum_final: 0.9,
            momentum_switch_epoch: 5,
            batch_size: 10,
            epochs: 30,
            variance_ratio_limit: 2.0,
            lr_decay: 0.9,
            seed: 0,
        }
    }
}

impl Cd1Config {
    /// Missing fields take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Cd1Config = toml::from_str(text).map_err(|e| Error::Config(format!("CD-1 config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum_initial)
            && (0.0..1.0).contains(&self.momentum_final)
            && self.batch_size >= 1
            && self.variance_ratio_limit > 0.0
            && self.lr_decay > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid CD-1 configuration: {self:?}")))
        }
    }

    pub fn momentum_at(&self, epoch: usize) -> f64 {
        if epoch >= self.momentum_switch_epoch {
            self.momentum_final
        } else {
            self.momentum_initial
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconStats {
    /// Mean squared error between the data and its reconstruction.
    pub recon_mse: f64,
    /// `var(v⁻) / var(v)`, 0 when the data are constant.
    pub var_ratio: f64,
    /// Whether the variance-ratio rule fired after this batch.
    pub triggered: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrbmEpochLog {
    pub epoch: usize,
    pub recon_mse: f64,
    pub var_ratio_mean: f64,
    pub lr: f64,
}

impl CrbmEpochLog {
    /// `epoch, recon_mse, var_ratio_mean, lr`
    pub fn to_line(&self) -> String {
        format!("{}, {:.6}, {:.6}, {:.6}", self.epoch, self.recon_mse, self.var_ratio_mean, self.lr)
    }
}

/// CD-1 learner with momentum buffers.
#[derive(Clone, Debug)]
pub struct CrbmTrainer {
    pub state: CrbmState,
    pub vel_filters: Tensor,
    pub vel_hidden_bias: Tensor,
    pub vel_visible_bias: f32,
    pub lr: f64,
    pub momentum: f64,
    pub config: Cd1Config,
}

impl CrbmTrainer {
    pub fn new(state: CrbmState, config: Cd1Config) -> Result<Self> {
        config.validate()?;
        Ok(CrbmTrainer {
            vel_filters: Tensor::zeros(state.filters.shape()),
            vel_hidden_bias: Tensor::zeros(state.hidden_bias.shape()),
            vel_visible_bias: 0.0,
            lr: config.lr,
            momentum: config.momentum_initial,
            state,
            config,
        })
    }

    /// One CD-1 update on `batch`, then the variance-ratio rule.
    pub fn step<R: Rng + ?Sized>(&mut self, batch: &Tensor, rng: &mut R) -> Result<ReconStats> {
        let h_pos = sample_hidden(batch, &self.state, rng)?;
        let g = cd1_gradient(batch, &h_pos, &self.state)?;
        if !g.filters.all_finite() || !g.hidden_bias.all_finite() || !g.visible_bias.is_finite() {
            return Err(Error::NonFinite("CD-1 update".into()));
        }
        let (lr, mu) = (self.lr as f32, self.momentum as f32);
        for ((p, v), &d) in self
            .state
            .filters
            .data_mut()
            .iter_mut()
            .zip(self.vel_filters.data_mut())
            .zip(g.filters.data())
        {
            *v = mu * *v + lr * d;
            *p += *v;
        }
        for ((p, v), &d) in self
            .state
            .hidden_bias
            .data_mut()
            .iter_mut()
            .zip(self.vel_hidden_bias.data_mut())
            .zip(g.hidden_bias.data())
        {
            *v = mu * *v + lr * d;
            *p += *v;
        }
        self.vel_visible_bias = mu * self.vel_visible_bias + lr * g.visible_bias;
        self.state.visible_bias += self.vel_visible_bias;

        let diff: f64 = batch
            .data()
            .iter()
            .zip(g.v_neg.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let recon_mse = diff / batch.len() as f64;
        let data_var = batch.variance() as f64;
        let var_ratio = if data_var > 0.0 {
            g.v_neg.variance() as f64 / data_var
        } else {
            0.0
        };
        let triggered = var_ratio > self.config.variance_ratio_limit;
        if triggered {
            self.lr *= self.config.lr_decay;
            self.vel_filters.scale(0.0);
            self.vel_hidden_bias.scale(0.0);
            log::debug!("variance ratio {var_ratio:.3}: lr reduced to {}", self.lr);
        }
        Ok(ReconStats {
            recon_mse,
            var_ratio,
            triggered,
        })
    }
}

/// Trains a CRBM on `data` `(N, C, H, W)` with values in `[0, 1]`.
pub fn train_crbm(
    data: &Tensor,
    geometry: CrbmGeometry,
    cfg: &Cd1Config,
) -> Result<(CrbmState, Vec<CrbmEpochLog>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let state = CrbmState::init(geometry, &mut rng)?;
    train_crbm_from(state, data, cfg, &mut rng, |_| {})
}

pub fn train_crbm_from<R: Rng + ?Sized>(
    state: CrbmState,
    data: &Tensor,
    cfg: &Cd1Config,
    rng: &mut R,
    mut on_epoch: impl FnMut(&CrbmEpochLog),
) -> Result<(CrbmState, Vec<CrbmEpochLog>)> {
    if data.shape().len() != 4 || data.batch() == 0 {
        return Err(Error::Data(format!("CRBM needs a non-empty (N, C, H, W) set, got {:?}", data.shape())));
    }
    if data.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Data("CRBM inputs must lie in [0, 1]".into()));
    }
    check_visible(data, &state)?;
    let mut trainer = CrbmTrainer::new(state, cfg.clone())?;
    let mut order: Vec<usize> = (0..data.batch()).collect();
    let per = data.per_item();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        trainer.momentum = cfg.momentum_at(epoch);
        order.shuffle(rng);
        let (mut mse, mut ratio, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut buf = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                buf.extend_from_slice(data.item(i));
            }
            let mut shape = data.shape().to_vec();
            shape[0] = chunk.len();
            let stats = trainer.step(&Tensor::from_vec(&shape, buf)?, rng)?;
            mse += stats.recon_mse;
            ratio += stats.var_ratio;
            batches += 1;
        }
        let entry = CrbmEpochLog {
            epoch,
            recon_mse: mse / batches as f64,
            var_ratio_mean: ratio / batches as f64,
            lr: trainer.lr,
        };
        log::info!("crbm epoch {}", entry.to_line());
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((trainer.state, log))
}

/// Deterministic pooled block probabilities, the input of a stacked CRBM.
pub fn pooled_features(v: &Tensor, s: &CrbmState) -> Result<Tensor> {
    let pre = hidden_preact(v, s)?;
    Ok(prob_maxpool_probs(&pre, s.pool_block)?.1)
}

/// 8-bit raster: `channels` is 1 (graymap) or 3 (interleaved RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Tiles `(K, C, kh, kw)` filters into a grid of `ceil(sqrt(K))` columns with
/// 1-pixel zero separators; each filter is min-max scaled to `[0, 255]`
/// (a constant filter maps to 128).
pub fn filter_raster(filters: &Tensor) -> Result<Raster> {
    let [k, c, kh, kw] = *filters.shape() else {
        return Err(Error::shape(format!("filters must be 4-D, got {:?}", filters.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("filter export supports 1 or 3 channels, got {c}")));
    }
    let cols = (1..=k).find(|&q| q * q >= k).unwrap_or(1);
    let rows = k.div_ceil(cols).max(1);
    let width = cols * kw + cols + 1;
    let height = rows * kh + rows + 1;
    let mut pixels = vec![0u8; width * height * c];
    for f in 0..k {
        let vals = filters.item(f);
        let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let (r, col) = (f / cols, f % cols);
        let (y0, x0) = (1 + r * (kh + 1), 1 + col * (kw + 1));
        for ch in 0..c {
            for u in 0..kh {
                for v in 0..kw {
                    let x = vals[(ch * kh + u) * kw + v];
                    let p = if hi > lo {
                        (((x - lo) / (hi - lo)) * 255.0).round() as u8
                    } else {
                        128
                    };
                    pixels[((y0 + u) * width + x0 + v) * c + ch] = p;
                }
            }
        }
    }
    Ok(Raster {
        width,
        height,
        channels: c,
        pixels,
    })
}

/// Filters of conv layer `layer` of `model`.
pub fn conv_filters(model: &ModelState, layer: usize) -> Result<&Tensor> {
    match model.spec.layers.get(layer) {
        Some(LayerSpec::Conv { .. }) => Ok(&model.param_for_layer(layer).expect("conv has params").weight),
        Some(l) => Err(Error::Spec {
            layer,
            msg: format!("{} is not a convolution", l.kind()),
        }),
        None => Err(Error::Spec {
            layer,
            msg: format!("model has {} layers", model.spec.layers.len()),
        }),
    }
}

/// Copies the CRBM filters and hidden biases into conv layer `layer`.
pub fn transfer_to_cnn(s: &CrbmState, model: &ModelState, layer: usize) -> Result<ModelState> {
    let existing = conv_filters(model, layer)?;
    if existing.shape() != s.filters.shape() {
        return Err(Error::Spec {
            layer,
            msg: format!(
                "conv filters {:?} do not match CRBM filters {:?}",
                existing.shape(),
                s.filters.shape()
            ),
        });
    }
    if let LayerSpec::Conv { stride, pad, .. } = model.spec.layers[layer] {
        if stride != 1 || pad != 0 {
            log::warn!("layer {layer} uses stride {stride} pad {pad}; CRBM filters were learned at stride 1 without padding");
        }
    }
    let mut out = model.clone();
    let p = out.param_for_layer_mut(layer).expect("conv has params");
    p.weight = s.filters.clone();
    p.bias = s.hidden_bias.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(k: usize, c: usize, kh: usize, kw: usize, b: usize) -> CrbmGeometry {
        CrbmGeometry {
            filters: k,
            in_channels: c,
            kernel_h: kh,
            kernel_w: kw,
            pool_block: b,
        }
    }

    #[test]
    fn zero_model_is_half() {
        let s = CrbmState::<f32>::zeros(geom(2, 1, 3, 3, 1)).unwrap();
        let v = Tensor::filled(&[1, 1, 5, 5], 0.7);
        assert!(hidden_prob(&v, &s).unwrap().data().iter().all(|&p| p == 0.5));
        let h = Tensor::zeros(&[1, 2, 3, 3]);
        let vp = visible_prob(&h, &s).unwrap();
        assert_eq!(vp.shape(), &[1, 1, 5, 5]);
        assert!(vp.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn saturated_hidden_bias() {
        let mut s = CrbmState::<f32>::zeros(geom(1, 1, 2, 2, 1)).unwrap();
        s.hidden_bias.data_mut()[0] = 10.0;
        let v = Tensor::filled(&[1, 1, 3, 3], 0.3);
        assert!(hidden_prob(&v, &s).unwrap().data().iter().all(|&p| (p - 1.0).abs() < 1e-4));
    }

    #[test]
    fn full_convolution_footprint() {
        let mut s = CrbmState::<f64>::zeros(geom(1, 1, 3, 3, 1)).unwrap();
        s.filters = Tensor::filled(&[1, 1, 3, 3], 1.0);
        s.visible_bias = -0.25;
        let mut h = Tensor::zeros(&[1, 1, 4, 4]);
        h.data_mut()[4 + 1] = 1.0; // (1, 1)
        let pre = visible_preact(&h, &s).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                let want = if inside { 0.75 } else { -0.25 };
                assert_eq!(pre.data()[i * 6 + j], want, "({i},{j})");
            }
        }
    }

    #[test]
    fn degenerate_pool_blocks() {
        let pre = Tensor::<f64>::filled(&[1, 1, 2, 2], f64::NEG_INFINITY);
        let (on, pooled) = prob_maxpool_probs(&pre, 2).unwrap();
        assert_eq!(pooled.data(), &[0.0]);
        assert!(on.data().iter().all(|&p| p == 0.0));
        let pre = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        assert_eq!(prob_maxpool_probs(&pre, 1).unwrap().0.data(), &[0.5]);
    }

    #[test]
    fn pool_sampling_frequencies() {
        let pre = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let o = prob_maxpool(&pre, 2, &mut rng).unwrap();
            let on: Vec<usize> = (0..4).filter(|&i| o.hidden_sample.data()[i] == 1.0).collect();
            assert!(on.len() <= 1);
            assert_eq!(o.pooled_sample.data()[0], on.len() as f64);
            counts[on.first().copied().unwrap_or(4)] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.2).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn pool_handles_ragged_edges() {
        let pre = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let (on, pooled) = prob_maxpool_probs(&pre, 2).unwrap();
        assert_eq!(pooled.shape(), &[1, 1, 2, 2]);
        // corner block holds a single unit
        assert!((on.data()[8] - 0.5).abs() < 1e-12);
        assert!((pooled.data()[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_model_visible_bias_step() {
        let s = CrbmState::<f64>::zeros(geom(1, 1, 2, 2, 1)).unwrap();
        let v = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let h = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = cd1_gradient(&v, &h, &s).unwrap();
        assert!((g.visible_bias - (v.mean() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn variance_rule_fires() {
        // Strong positive weights reconstruct near-constant data as a high-variance pattern.
        let mut s = CrbmState::<f32>::zeros(geom(1, 1, 1, 1, 1)).unwrap();
        s.filters.data_mut()[0] = 12.0;
        s.visible_bias = -6.0;
        s.hidden_bias.data_mut()[0] = -6.0;
        let cfg = Cd1Config::default();
        let mut t = CrbmTrainer::new(s, cfg.clone()).unwrap();
        t.vel_filters.data_mut()[0] = 0.3;
        let batch = Tensor::from_vec(&[1, 1, 2, 2], vec![0.45, 0.45, 0.45, 0.55]).unwrap();
        let stats = t.step(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(stats.var_ratio > 2.0, "{stats:?}");
        assert!(stats.triggered);
        assert!(t.lr < cfg.lr && (t.lr - cfg.lr * 0.9).abs() < 1e-12);
        assert_eq!(t.vel_filters.data(), &[0.0]);
        assert_eq!(t.vel_hidden_bias.data(), &[0.0]);
    }

    #[test]
    fn config_toml_fills_defaults() {
        let c = Cd1Config::from_toml("epochs = 3\nlr = 0.05\n").unwrap();
        assert_eq!(c, Cd1Config { epochs: 3, lr: 0.05, ..Cd1Config::default() });
        assert_eq!(Cd1Config::from_toml(&c.to_toml()).unwrap(), c);
        assert!(Cd1Config::from_toml("lr = -1.0").is_err());
        assert!(Cd1Config::from_toml("rate = 1.0").is_err());
    }

    #[test]
    fn zero_lr_keeps_state() {
        let data = Tensor::uniform(&[12, 1, 6, 6], 0.5, &mut ChaCha8Rng::seed_from_u64(1)).map(|x| x + 0.5);
        let cfg = Cd1Config {
            lr: 0.0,
            epochs: 3,
            ..Cd1Config::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = CrbmState::init(geom(2, 1, 3, 3, 1), &mut rng).unwrap();
        let (s, log) = train_crbm(&data, geom(2, 1, 3, 3, 1), &cfg).unwrap();
        assert_eq!(s, init);
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn raster_layout() {
        let f = Tensor::uniform(&[4, 1, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let r = filter_raster(&f).unwrap();
        assert_eq!((r.width, r.height), (9, 9));
        let f = Tensor::zeros(&[64, 1, 7, 7]);
        let r = filter_raster(&f).unwrap();
        assert_eq!((r.width, r.height), (65, 65));
        assert_eq!(r.pixels[65 + 1], 128);
        assert_eq!(r.pixels[0], 0);
        assert!(filter_raster(&Tensor::zeros(&[2, 2, 3, 3])).is_err());
    }

    #[test]
    fn transfer_checks_geometry() {
        let toy = crate::network::builtin::named("toy").unwrap();
        let m = ModelState::init(&toy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = CrbmState::init(geom(4, 1, 3, 3, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let t = transfer_to_cnn(&s, &m, 0).unwrap();
        assert_eq!(t.params[0].weight, s.filters);
        assert_eq!(t.params[0].bias, s.hidden_bias);
        assert_eq!(t.params[1], m.params[1]);
        let bad = CrbmState::init(geom(4, 1, 5, 5, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let err = transfer_to_cnn(&bad, &m, 0).unwrap_err().to_string();
        assert!(err.contains("[4, 1, 3, 3]") && err.contains("[4, 1, 5, 5]"), "{err}");
        assert!(transfer_to_cnn(&s, &m, 1).is_err());
    }
}
