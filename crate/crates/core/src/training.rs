//! Mini-batch SGD with momentum, warm starts and training recipes.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Mode};
use crate::network::{network_backward, network_forward, LayerSpec, ModelState, NetworkSpec, Param};
use crate::tensor::{Real, Tensor};

/// Images `(N, C, H, W)` with one class index per image.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the listed items into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.per_item();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.item(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::from_vec(&shape, data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Momentum SGD state; `velocity` mirrors the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub velocity: Vec<Param<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub epoch: usize,
    pub batch_size: usize,
}

impl<T: Real> OptimState<T> {
    pub fn new(model: &ModelState<T>, lr: f64, momentum: f64, batch_size: usize) -> Self {
        OptimState {
            velocity: model
                .params
                .iter()
                .map(|p| Param {
                    layer: p.layer,
                    weight: Tensor::zeros(p.weight.shape()),
                    bias: Tensor::zeros(p.bias.shape()),
                })
                .collect(),
            lr,
            momentum,
            epoch: 0,
            batch_size,
        }
    }
}

/// `v ← momentum·v − lr·g; p ← p + v` for every parameter tensor. Nothing is
/// modified when any gradient is malformed.
pub fn sgd_step<T: Real>(model: &mut ModelState<T>, grads: &[Param<T>], optim: &mut OptimState<T>) -> Result<()> {
    if grads.len() != model.params.len() || optim.velocity.len() != model.params.len() {
        return Err(Error::shape(format!(
            "{} parameter tensors, {} gradients, {} velocities",
            model.params.len(),
            grads.len(),
            optim.velocity.len()
        )));
    }
    for ((p, g), v) in model.params.iter().zip(grads).zip(&optim.velocity) {
        for (pt, gt, vt) in [(&p.weight, &g.weight, &v.weight), (&p.bias, &g.bias, &v.bias)] {
            gt.expect_shape(pt.shape())?;
            vt.expect_shape(pt.shape())?;
        }
        if !g.weight.all_finite() || !g.bias.all_finite() {
            return Err(Error::NonFinite(format!("gradient of layer {}", p.layer)));
        }
    }
    let lr = T::of(optim.lr);
    let mu = T::of(optim.momentum);
    for ((p, g), v) in model.params.iter_mut().zip(grads).zip(&mut optim.velocity) {
        for (pt, gt, vt) in [
            (&mut p.weight, &g.weight, &mut v.weight),
            (&mut p.bias, &g.bias, &mut v.bias),
        ] {
            for ((pv, &gv), vv) in pt.data_mut().iter_mut().zip(gt.data()).zip(vt.data_mut()) {
                *vv = mu * *vv - lr * gv;
                *pv += *vv;
            }
        }
    }
    Ok(())
}

/// How many leading parameterized layers a warm start copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerCountRepr", into = "LayerCountRepr")]
pub enum LayerCount {
    All,
    FirstN(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerCountRepr {
    N(usize),
    Word(String),
}

impl TryFrom<LayerCountRepr> for LayerCount {
    type Error = String;
    fn try_from(r: LayerCountRepr) -> std::result::Result<Self, String> {
        match r {
            LayerCountRepr::N(n) => Ok(LayerCount::FirstN(n)),
            LayerCountRepr::Word(w) => w.parse(),
        }
    }
}

impl From<LayerCount> for LayerCountRepr {
    fn from(c: LayerCount) -> Self {
        match c {
            LayerCount::All => LayerCountRepr::Word("all".into()),
            LayerCount::FirstN(n) => LayerCountRepr::N(n),
        }
    }
}

impl std::str::FromStr for LayerCount {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(LayerCount::All);
        }
        s.parse()
            .map(LayerCount::FirstN)
            .map_err(|_| format!("layer count must be \"all\" or an integer, got {s:?}"))
    }
}

impl fmt::Display for LayerCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerCount::All => f.write_str("all"),
            LayerCount::FirstN(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    WarmStart { path: PathBuf, layers: LayerCount },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    32
}
fn yes() -> bool {
    true
}
fn scratch() -> Init {
    Init::Scratch
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "scratch")]
    pub init: Init,
    #[serde(default)]
    pub seed: u64,
    /// When false, dropout layers train and infer as the identity.
    #[serde(default = "yes")]
    pub dropout: bool,
    /// When false, stochastic pooling layers are replaced by max pooling.
    #[serde(default = "yes")]
    pub stochastic: bool,
}

impl TrainRecipe {
    /// First leaf models: 15 epochs from scratch, lr 0.01, momentum 0.9.
    pub fn leaf_scratch() -> Self {
        TrainRecipe {
            epochs: 15,
            lr: 0.01,
            momentum: 0.9,
            batch_size: default_batch(),
            init: Init::Scratch,
            seed: 0,
            dropout: true,
            stochastic: true,
        }
    }

    /// Remaining leaf models: warm-started from a trained leaf, 32 epochs at lr 0.001.
    pub fn leaf_warm(path: impl Into<PathBuf>) -> Self {
        TrainRecipe {
            epochs: 32,
            lr: 0.001,
            init: Init::WarmStart {
                path: path.into(),
                layers: LayerCount::All,
            },
            ..Self::leaf_scratch()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let r: TrainRecipe = toml::from_str(text).map_err(|e| Error::Config(format!("recipe: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// The spec as trained under this recipe's regularization toggles.
    pub fn effective_spec(&self, spec: &NetworkSpec) -> NetworkSpec {
        let mut out = spec.clone();
        for layer in &mut out.layers {
            match *layer {
                LayerSpec::Dropout { .. } if !self.dropout => *layer = LayerSpec::Dropout { p: 0.0 },
                LayerSpec::StochasticPool { window, stride, pad } if !self.stochastic => {
                    *layer = LayerSpec::MaxPool { window, stride, pad }
                }
                _ => {}
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl EpochLog {
    /// `epoch, mean_loss, top1, top5`
    pub fn to_line(&self) -> String {
        format!("{}, {:.6}, {:.6}, {:.6}", self.epoch, self.mean_loss, self.top1, self.top5)
    }
}

/// Copies the first `count` parameterized layers of `source` into a fresh
/// model of `target`. Returns the model and the transferred layer indices.
pub fn warm_start(
    target: &NetworkSpec,
    source: &ModelState,
    count: LayerCount,
    seed: u64,
) -> Result<(ModelState, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelState::init(target, &mut rng)?;
    let transferred = copy_layers(&mut model, source, count)?;
    Ok((model, transferred))
}

/// Overwrites the first `count` parameterized layers of `model` with those of
/// `source`; the rest keep their values. Returns the overwritten layer indices.
pub fn copy_layers(model: &mut ModelState, source: &ModelState, count: LayerCount) -> Result<Vec<usize>> {
    let n = match count {
        LayerCount::All => {
            if source.params.len() != model.params.len() {
                return Err(Error::Config(format!(
                    "source has {} parameterized layers, target {}",
                    source.params.len(),
                    model.params.len()
                )));
            }
            model.params.len()
        }
        LayerCount::FirstN(n) => {
            if n > source.params.len() || n > model.params.len() {
                return Err(Error::Config(format!(
                    "cannot transfer {n} layers: source has {}, target {}",
                    source.params.len(),
                    model.params.len()
                )));
            }
            n
        }
    };
    for (dst, src) in model.params.iter().zip(&source.params).take(n) {
        if dst.weight.shape() != src.weight.shape() || dst.bias.shape() != src.bias.shape() {
            return Err(Error::Spec {
                layer: dst.layer,
                msg: format!(
                    "target weight {:?} does not match source layer {} weight {:?}",
                    dst.weight.shape(),
                    src.layer,
                    src.weight.shape()
                ),
            });
        }
    }
    let mut transferred = Vec::with_capacity(n);
    for (dst, src) in model.params.iter_mut().zip(&source.params).take(n) {
        dst.weight = src.weight.clone();
        dst.bias = src.bias.clone();
        transferred.push(dst.layer);
    }
    Ok(transferred)
}

fn check_labels(data: &LabeledImages, classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if let Some(&label) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// Initializes per the recipe (loading the warm-start source if needed) and
/// trains.
pub fn train_model(spec: &NetworkSpec, data: &LabeledImages, recipe: &TrainRecipe) -> Result<(ModelState, Vec<EpochLog>)> {
    recipe.validate()?;
    let spec = recipe.effective_spec(spec);
    let model = match &recipe.init {
        Init::Scratch => ModelState::init(&spec, &mut ChaCha8Rng::seed_from_u64(recipe.seed))?,
        Init::WarmStart { path, layers } => {
            let source = crate::dataio::load_model(path)?;
            warm_start(&spec, &source, *layers, recipe.seed)?.0
        }
    };
    train_from(model, data, recipe, |_| {})
}

/// Trains `model` in place of its spec's toggled form, calling `on_epoch`
/// after every epoch.
pub fn train_from(
    mut model: ModelState,
    data: &LabeledImages,
    recipe: &TrainRecipe,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelState, Vec<EpochLog>)> {
    recipe.validate()?;
    check_labels(data, model.class_count())?;
    model.spec = recipe.effective_spec(&model.spec);
    let [c, h, w] = model.spec.input_shape;
    if data.images.shape()[1..] != [c, h, w] {
        return Err(Error::shape(format!(
            "images {:?} do not match input shape {h} x {w} x {c}",
            &data.images.shape()[1..]
        )));
    }
    // Distinct stream from the one used for initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed ^ 0x5eed_7a11_0000_0001);
    let mut optim = OptimState::new(&model, recipe.lr, recipe.momentum, recipe.batch_size);
    let mut log = Vec::with_capacity(recipe.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut top1, mut top5) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(recipe.batch_size) {
            let (x, labels) = data.gather(chunk)?;
            let pass = network_forward(&model, &x, Mode::Train, &mut rng)?;
            let grads = network_backward(&model, &pass, &labels)?;
            sgd_step(&mut model, &grads.params, &mut optim)?;
            loss_sum += grads.loss as f64 * chunk.len() as f64;
            for (b, &label) in labels.iter().enumerate() {
                let ranked = layers::top_k(pass.probabilities.item(b), 5);
                top1 += usize::from(ranked[0] == label);
                top5 += usize::from(ranked.contains(&label));
            }
        }
        optim.epoch += 1;
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch: optim.epoch,
            mean_loss: loss_sum / n,
            top1: top1 as f64 / n,
            top5: top5 as f64 / n,
        };
        log::info!("{} epoch {}", model.spec.name, entry.to_line());
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

/// Inference-mode top-1 and top-5 accuracy.
pub fn accuracy(model: &ModelState, data: &LabeledImages) -> Result<(f64, f64)> {
    check_labels(data, model.class_count())?;
    let (mut top1, mut top5) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, labels) = data.gather(chunk)?;
        let probs = model.predict(&x)?;
        for (b, &label) in labels.iter().enumerate() {
            let ranked = layers::top_k(probs.item(b), 5);
            top1 += usize::from(ranked[0] == label);
            top5 += usize::from(ranked.contains(&label));
        }
    }
    let n = data.len() as f64;
    Ok((top1 as f64 / n, top5 as f64 / n))
}
