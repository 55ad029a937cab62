//! Forward and backward kernels for the layer types of the network specs.
//!
//! Spatial activations are `(N, C, H, W)`, flat activations `(N, U)`.
//! Convolution is cross-correlation with zero padding; pooling windows ignore
//! padded positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Output extent of a strided window sweep, or `None` if it would be empty.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (input + 2 * pad).checked_sub(kernel)?;
    Some(span / stride + 1)
}

/// Range of output positions `j` for which `j * stride + offset` lands in
/// `[0, input)`.
fn valid_range(out: usize, input: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (input as isize - 1 - offset).div_euclid(s) + 1;
    let lo = lo.max(0) as usize;
    let hi = hi.clamp(0, out as isize) as usize;
    (lo.min(hi), hi)
}

fn dims4<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    let xd = dims4(x, "conv input")?;
    let fd = dims4(filters, "conv filters")?;
    if xd[1] != fd[1] {
        return Err(Error::shape(format!(
            "conv input has {} channels, filters expect {}",
            xd[1], fd[1]
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv stride must be >= 1"));
    }
    let ho = out_extent(xd[2], fd[2], stride, pad);
    let wo = out_extent(xd[3], fd[3], stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok((xd, fd, ho, wo)),
        _ => Err(Error::shape(format!(
            "kernel {}x{} does not fit input {}x{} with pad {pad}",
            fd[2], fd[3], xd[2], xd[3]
        ))),
    }
}

pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ([n, c, h, w], [o, _, kh, kw], ho, wo) = conv_geometry(x, filters, stride, pad)?;
    bias.expect_shape(&[o])?;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let xs = x.data();
    let fs = filters.data();
    let out_data = out.data_mut();
    for b in 0..n {
        for oc in 0..o {
            let obase = ((b * o) + oc) * ho * wo;
            out_data[obase..obase + ho * wo].fill(bias.data()[oc]);
            for ic in 0..c {
                let xbase = ((b * c) + ic) * h * w;
                let fbase = ((oc * c) + ic) * kh * kw;
                for u in 0..kh {
                    let (i0, i1) = valid_range(ho, h, stride, u as isize - pad as isize);
                    for v in 0..kw {
                        let wv = fs[fbase + u * kw + v];
                        let (j0, j1) = valid_range(wo, w, stride, v as isize - pad as isize);
                        for i in i0..i1 {
                            let y = i * stride + u - pad;
                            let orow = obase + i * wo;
                            let xrow = xbase + y * w;
                            for j in j0..j1 {
                                let xx = j * stride + v - pad;
                                out_data[orow + j] += wv * xs[xrow + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T: Real> {
    pub grad_x: Tensor<T>,
    pub grad_filters: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let ([n, c, h, w], [o, _, kh, kw], ho, wo) = conv_geometry(x, filters, stride, pad)?;
    grad_out.expect_shape(&[n, o, ho, wo])?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gf = Tensor::zeros(filters.shape());
    let mut gb = Tensor::zeros(&[o]);
    let xs = x.data();
    let fs = filters.data();
    let gs = grad_out.data();
    for b in 0..n {
        for oc in 0..o {
            let obase = ((b * o) + oc) * ho * wo;
            gb.data_mut()[oc] += gs[obase..obase + ho * wo].iter().copied().sum::<T>();
            for ic in 0..c {
                let xbase = ((b * c) + ic) * h * w;
                let fbase = ((oc * c) + ic) * kh * kw;
                for u in 0..kh {
                    let (i0, i1) = valid_range(ho, h, stride, u as isize - pad as isize);
                    for v in 0..kw {
                        let wv = fs[fbase + u * kw + v];
                        let (j0, j1) = valid_range(wo, w, stride, v as isize - pad as isize);
                        let mut acc = T::zero();
                        let gxd = gx.data_mut();
                        for i in i0..i1 {
                            let y = i * stride + u - pad;
                            let orow = obase + i * wo;
                            let xrow = xbase + y * w;
                            for j in j0..j1 {
                                let xx = j * stride + v - pad;
                                let g = gs[orow + j];
                                acc += g * xs[xrow + xx];
                                gxd[xrow + xx] += g * wv;
                            }
                        }
                        gf.data_mut()[fbase + u * kw + v] += acc;
                    }
                }
            }
        }
    }
    #[cfg(feature = "fault-injection")]
    if crate::fault::active("conv_backward") {
        gf.scale(T::of(1.5));
    }
    Ok(ConvGrads {
        grad_x: gx,
        grad_filters: gf,
        grad_bias: gb,
    })
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(x.shape())?;
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    #[cfg(feature = "fault-injection")]
    if crate::fault::active("relu_backward") {
        g.scale(T::of(1.5));
    }
    Ok(g)
}

/// Geometry shared by max and stochastic pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeometry {
    fn output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 || self.pad >= self.window {
            return Err(Error::shape(format!("invalid pooling geometry {self:?}")));
        }
        match (
            out_extent(h, self.window, self.stride, self.pad),
            out_extent(w, self.window, self.stride, self.pad),
        ) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::shape(format!("pool window {} exceeds {h}x{w}", self.window))),
        }
    }

    /// Flat input offsets (within one channel plane) covered by output cell (i, j).
    fn region(&self, i: usize, j: usize, h: usize, w: usize, buf: &mut Vec<usize>) {
        buf.clear();
        let y0 = (i * self.stride) as isize - self.pad as isize;
        let x0 = (j * self.stride) as isize - self.pad as isize;
        for dy in 0..self.window as isize {
            let y = y0 + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in 0..self.window as isize {
                let x = x0 + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                buf.push(y as usize * w + x as usize);
            }
        }
    }
}

/// Sweeps every pooling region, handing `f` the flat input indices of the
/// region and the flat output index.
fn for_each_region<T: Real>(
    x: &Tensor<T>,
    g: PoolGeometry,
    mut f: impl FnMut(&[usize], usize),
) -> Result<Vec<usize>> {
    let [n, c, h, w] = dims4(x, "pool input")?;
    let (ho, wo) = g.output(h, w)?;
    let mut buf = Vec::with_capacity(g.window * g.window);
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                g.region(i, j, h, w, &mut buf);
                for idx in buf.iter_mut() {
                    *idx += plane * h * w;
                }
                f(&buf, (plane * ho + i) * wo + j);
            }
        }
    }
    Ok(vec![n, c, ho, wo])
}

/// Max pooling; returns the output and, per output element, the flat input
/// index of the first maximum in row-major order.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>, g: PoolGeometry) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut vals = Vec::new();
    let mut idxs = Vec::new();
    let xs = x.data();
    let shape = for_each_region(x, g, |region, _| {
        let mut best = region[0];
        for &r in &region[1..] {
            if xs[r] > xs[best] {
                best = r;
            }
        }
        vals.push(xs[best]);
        idxs.push(best);
    })?;
    Ok((Tensor::from_vec(&shape, vals)?, idxs))
}

pub fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    indices: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if indices.len() != grad_out.len() {
        return Err(Error::shape("maxpool indices do not match gradient"));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    Ok(gx)
}

/// Stochastic pooling. Training samples one activation per region with
/// probability proportional to its value (uniform over an all-zero region)
/// and records the chosen flat index; inference returns the
/// probability-weighted average and records nothing.
pub fn stochpool_forward<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    g: PoolGeometry,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if let Some(bad) = x.data().iter().find(|&&v| v < T::zero()) {
        return Err(Error::shape(format!(
            "stochastic pooling needs non-negative activations, found {bad:?}"
        )));
    }
    let xs = x.data();
    let mut vals = Vec::new();
    let mut idxs = Vec::new();
    let shape = for_each_region(x, g, |region, _| {
        let total: T = region.iter().map(|&r| xs[r]).sum();
        match mode {
            Mode::Train => {
                let pick = if total > T::zero() {
                    let u = T::of(rng.gen::<f64>()) * total;
                    let mut acc = T::zero();
                    let mut chosen = *region.last().expect("region is non-empty");
                    for &r in region {
                        acc += xs[r];
                        if u < acc {
                            chosen = r;
                            break;
                        }
                    }
                    chosen
                } else {
                    // One draw per region in every branch keeps the rng stream aligned.
                    let u = rng.gen::<f64>();
                    region[((u * region.len() as f64) as usize).min(region.len() - 1)]
                };
                vals.push(xs[pick]);
                idxs.push(pick);
            }
            Mode::Infer => {
                let v = if total > T::zero() {
                    region.iter().map(|&r| xs[r] * xs[r]).sum::<T>() / total
                } else {
                    T::zero()
                };
                vals.push(v);
            }
        }
    })?;
    Ok((Tensor::from_vec(&shape, vals)?, idxs))
}

/// Gradient of the inference-mode (probability-weighted) stochastic pool.
pub fn stochpool_infer_backward<T: Real>(
    x: &Tensor<T>,
    g: PoolGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut gx = Tensor::zeros(x.shape());
    let xs = x.data();
    let go = grad_out.data();
    let gxd = gx.data_mut();
    let shape = for_each_region(x, g, |region, out_idx| {
        let s1: T = region.iter().map(|&r| xs[r]).sum();
        if s1 <= T::zero() {
            return;
        }
        let s2: T = region.iter().map(|&r| xs[r] * xs[r]).sum();
        let two = T::of(2.0);
        for &r in region {
            gxd[r] += go[out_idx] * (two * xs[r] * s1 - s2) / (s1 * s1);
        }
    })?;
    grad_out.expect_shape(&shape)?;
    Ok(gx)
}

/// Dropout. Training zeroes each element with probability `p` and passes the
/// survivors unscaled; inference scales everything by `1 - p`.
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut R,
    mode: Mode,
) -> (Tensor<T>, Vec<T>) {
    match mode {
        Mode::Infer => (x.map(|v| v * T::of(1.0 - p)), Vec::new()),
        Mode::Train => {
            let mask: Vec<T> = (0..x.len())
                .map(|_| if p > 0.0 && rng.gen::<f64>() < p { T::zero() } else { T::one() })
                .collect();
            let mut out = x.clone();
            for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
                *o *= m;
            }
            (out, mask)
        }
    }
}

pub fn dropout_backward<T: Real>(mask: &[T], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.len() != grad_out.len() {
        return Err(Error::shape("dropout mask does not match gradient"));
    }
    let mut g = grad_out.clone();
    for (gv, &m) in g.data_mut().iter_mut().zip(mask) {
        *gv *= m;
    }
    Ok(g)
}

/// `out[n] = W · x[n] + b` with `W` of shape `(out, in)`; `x` is flattened per item.
pub fn fc_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (o, i) = fc_dims(x, weight, bias)?;
    let n = x.batch();
    let mut out = Tensor::zeros(&[n, o]);
    let ws = weight.data();
    for b in 0..n {
        let xb = x.item(b);
        let od = &mut out.data_mut()[b * o..(b + 1) * o];
        for (r, ov) in od.iter_mut().enumerate() {
            let row = &ws[r * i..(r + 1) * i];
            *ov = bias.data()[r] + row.iter().zip(xb).map(|(&a, &c)| a * c).sum::<T>();
        }
    }
    Ok(out)
}

fn fc_dims<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let [o, i] = *weight.shape() else {
        return Err(Error::shape(format!("fc weight must be 2-D, got {:?}", weight.shape())));
    };
    if x.per_item() != i {
        return Err(Error::shape(format!(
            "fc expects {i} inputs per item, got {}",
            x.per_item()
        )));
    }
    bias.expect_shape(&[o])?;
    Ok((o, i))
}

pub struct FcGrads<T: Real> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

/// Adjoints of [`fc_forward`]; `grad_x` takes the shape of `x`.
pub fn fc_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let [o, i] = *weight.shape() else {
        return Err(Error::shape("fc weight must be 2-D"));
    };
    let n = x.batch();
    if x.per_item() != i {
        return Err(Error::shape("fc input does not match weight"));
    }
    grad_out.expect_shape(&[n, o])?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(&[o, i]);
    let mut gb = Tensor::zeros(&[o]);
    let ws = weight.data();
    for b in 0..n {
        let xb = x.item(b);
        let gob = grad_out.item(b);
        for r in 0..o {
            let g = gob[r];
            gb.data_mut()[r] += g;
            if g == T::zero() {
                continue;
            }
            let gwrow = &mut gw.data_mut()[r * i..(r + 1) * i];
            for (acc, &xv) in gwrow.iter_mut().zip(xb) {
                *acc += g * xv;
            }
            let gxb = &mut gx.data_mut()[b * i..(b + 1) * i];
            for (acc, &wv) in gxb.iter_mut().zip(&ws[r * i..(r + 1) * i]) {
                *acc += g * wv;
            }
        }
    }
    Ok(FcGrads {
        grad_x: gx,
        grad_weight: gw,
        grad_bias: gb,
    })
}

/// Row-wise softmax of `(N, K)` logits, shifted by the row maximum.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.per_item();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Indices of the `k` largest values in descending order; ties go to the
/// lower index.
pub fn top_k<T: Real>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub struct SoftmaxXent<T: Real> {
    pub probabilities: Tensor<T>,
    /// Mean of `-ln p[label]` over the batch.
    pub loss: T,
    /// `(p - onehot) / N`, the gradient of the mean loss.
    pub grad_logits: Tensor<T>,
}

pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxXent<T>> {
    let n = logits.batch();
    let k = logits.per_item();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    let probs = softmax(logits);
    let inv_n = T::of(1.0 / n as f64);
    let mut grad = probs.clone();
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[b * k..(b + 1) * k];
        loss -= probs.data()[b * k + label].max(T::min_positive_value()).ln();
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(SoftmaxXent {
        probabilities: probs,
        loss: loss * inv_n,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn extents() {
        assert_eq!(out_extent(223, 3, 2, 0), Some(111));
        assert_eq!(out_extent(7, 1, 1, 0), Some(7));
        assert_eq!(out_extent(225, 7, 2, 1), Some(111));
        assert_eq!(out_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn identity_and_sum_filters() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let f = t(&[1, 1, 1, 1], vec![1.0]);
        let out = conv_forward(&x, &f, &t(&[1], vec![0.0]), 1, 0).unwrap();
        assert_eq!(out, x);
        let x = Tensor::filled(&[1, 1, 3, 3], 2.0);
        let f = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv_forward(&x, &f, &t(&[1], vec![0.0]), 1, 0).unwrap();
        assert_eq!(out.data(), &[18.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let f = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv_forward(&x, &f, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_backward_zero_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[2, 2, 5, 5], 1.0, &mut rng);
        let f = Tensor::<f64>::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        let g = conv_backward(&x, &f, &Tensor::zeros(&[2, 3, 3, 3]), 1, 0).unwrap();
        assert!(g.grad_x.data().iter().chain(g.grad_filters.data()).all(|&v| v == 0.0));
        let go = Tensor::<f64>::uniform(&[2, 3, 3, 3], 1.0, &mut rng);
        let g = conv_backward(&x, &f, &go, 1, 0).unwrap();
        for o in 0..3 {
            let want: f64 = (0..2)
                .flat_map(|n| go.data()[(n * 3 + o) * 9..(n * 3 + o + 1) * 9].iter())
                .sum();
            assert!((g.grad_bias.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_definition() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&y), y);
        let g = relu_backward(&x, &t(&[3], vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_quadrants() {
        let x = t(&[1, 1, 4, 4], (0..16).map(f64::from).collect());
        let g = PoolGeometry { window: 2, stride: 2, pad: 0 };
        let (y, idx) = maxpool_forward(&x, g).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(idx, vec![5, 7, 13, 15]);
    }

    #[test]
    fn maxpool_constant_routes_to_first() {
        let x = Tensor::<f64>::filled(&[1, 1, 3, 3], 4.0);
        let g = PoolGeometry { window: 2, stride: 1, pad: 0 };
        let (y, idx) = maxpool_forward(&x, g).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.0));
        assert_eq!(idx, vec![0, 1, 3, 4]);
        let gx = maxpool_backward(x.shape(), &idx, &Tensor::filled(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_padding_excludes_border() {
        let x = t(&[1, 1, 2, 2], vec![-1.0, -2.0, -3.0, -4.0]);
        let g = PoolGeometry { window: 3, stride: 2, pad: 1 };
        let (y, _) = maxpool_forward(&x, g).unwrap();
        assert_eq!(y.data(), &[-1.0]);
    }

    #[test]
    fn stochpool_degenerate_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = PoolGeometry { window: 2, stride: 2, pad: 0 };
        let x = t(&[1, 1, 2, 2], vec![0.0, 0.0, 7.0, 0.0]);
        for _ in 0..50 {
            let (y, idx) = stochpool_forward(&x, g, &mut rng, Mode::Train).unwrap();
            assert_eq!(y.data(), &[7.0]);
            assert_eq!(idx, vec![2]);
        }
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert_eq!(stochpool_forward(&z, g, &mut rng, Mode::Train).unwrap().0.data(), &[0.0]);
        assert_eq!(stochpool_forward(&z, g, &mut rng, Mode::Infer).unwrap().0.data(), &[0.0]);
        let neg = t(&[1, 1, 2, 2], vec![0.0, -1.0, 0.0, 0.0]);
        assert!(stochpool_forward(&neg, g, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn stochpool_infer_is_weighted_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = PoolGeometry { window: 2, stride: 2, pad: 0 };
        let x = t(&[1, 1, 2, 2], vec![1.0, 3.0, 0.0, 0.0]);
        let (y, _) = stochpool_forward(&x, g, &mut rng, Mode::Infer).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn stochpool_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = PoolGeometry { window: 2, stride: 2, pad: 0 };
        // Region [1, 3] plus two zeros, which carry no probability mass.
        let x = t(&[1, 1, 2, 2], vec![1.0, 3.0, 0.0, 0.0]);
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| stochpool_forward(&x, g, &mut rng, Mode::Train).unwrap().0.data()[0] == 3.0)
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 0.02, "{freq}");
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = t(&[4], vec![1.0, -2.0, 3.0, 4.0]);
        for mode in [Mode::Train, Mode::Infer] {
            assert_eq!(dropout_forward(&x, 0.0, &mut rng, mode).0, x);
        }
        let (y, _) = dropout_forward(&x, 0.5, &mut rng, Mode::Infer);
        assert_eq!(y.data(), &[0.5, -1.0, 1.5, 2.0]);
        let big = Tensor::<f32>::filled(&[100_000], 1.0);
        let (y, mask) = dropout_forward(&big, 0.5, &mut rng, Mode::Train);
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((0.49..=0.51).contains(&zeros), "{zeros}");
        let g = dropout_backward(&mask, &big).unwrap();
        assert_eq!(g, y);
    }

    #[test]
    fn fc_identity() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(fc_forward(&x, &w, &Tensor::zeros(&[3])).unwrap(), x);
        assert!(fc_forward(&x, &Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn fc_weight_grad_is_sum_of_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(&[2, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut rng);
        let go = Tensor::<f64>::uniform(&[2, 3], 1.0, &mut rng);
        let g = fc_backward(&x, &w, &go).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let want: f64 = (0..2).map(|n| go.item(n)[r] * x.item(n)[c]).sum();
                assert!((g.grad_weight.data()[r * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_known_values() {
        let s = softmax_xent(&Tensor::<f64>::zeros(&[1, 4]), &[2]).unwrap();
        assert!(s.probabilities.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
        assert!((s.loss - 4f64.ln()).abs() < 1e-12);
        let s = softmax_xent(&t(&[1, 3], vec![1.0, 2.0, 3.0]), &[0]).unwrap();
        // e^k / (e + e^2 + e^3) evaluated separately at high precision.
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (p, w) in s.probabilities.data().iter().zip(want) {
            assert!((p - w).abs() < 1e-12);
        }
        assert!(s.grad_logits.sum().abs() < 1e-12);
        assert!(matches!(
            softmax_xent(&t(&[1, 3], vec![0.0; 3]), &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }
}
