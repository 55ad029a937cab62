//! Synthetic image sets for desk-scale experiments.

use rand::Rng;

use crate::error::Result;
use crate::taxonomy::SynsetId;
use crate::tensor::Tensor;
use crate::training::LabeledImages;

/// Binary images whose rows (bars) or columns (stripes) are each on with
/// probability 1/2. Shape `(n, 1, size, size)`.
pub fn bars_and_stripes<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let vertical = rng.gen::<bool>();
        let on: Vec<bool> = (0..size).map(|_| rng.gen()).collect();
        for i in 0..size {
            for j in 0..size {
                let lit = if vertical { on[j] } else { on[i] };
                data.push(if lit { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::from_vec(&[n, 1, size, size], data).expect("length matches")
}

/// Two classes: a bright left half (0) or a bright right half (1), with
/// uniform noise of amplitude 0.2.
pub fn two_halves<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> LabeledImages {
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = k % 2;
        for _ in 0..size {
            for j in 0..size {
                let bright = (j < size / 2) == (label == 0);
                let base = if bright { 0.8 } else { 0.2 };
                data.push(base + rng.gen_range(-0.2..0.2f32));
            }
        }
        labels.push(label);
    }
    LabeledImages::new(Tensor::from_vec(&[n, 1, size, size], data).expect("length matches"), labels)
        .expect("labels match")
}

pub const SHAPE_KINDS: [&str; 4] = ["square", "ring", "plus", "cross"];
pub const QUADRANTS: [&str; 4] = ["top_left", "top_right", "bottom_left", "bottom_right"];

/// Synset of shape class `kind * 4 + quadrant`.
pub fn shape_synset(class: usize) -> SynsetId {
    SynsetId::new(2000 + class as u32).expect("in range")
}

/// ISA edges grouping the 16 shape classes under one parent per shape kind
/// below a common root, as `parent child` lines.
pub fn shapes_isa_text() -> String {
    let root = SynsetId::new(1).expect("in range");
    let mut s = String::new();
    for kind in 0..4 {
        let parent = SynsetId::new(1000 + kind as u32).expect("in range");
        s.push_str(&format!("{root} {parent}\n"));
        for q in 0..4 {
            s.push_str(&format!("{parent} {}\n", shape_synset(kind * 4 + q)));
        }
    }
    s
}

pub fn shape_class_name(class: usize) -> String {
    format!("{}_{}", SHAPE_KINDS[class / 4], QUADRANTS[class % 4])
}

fn shape_mask(kind: usize, dy: i32, dx: i32) -> bool {
    // dy, dx in [-3, 3]
    let (ay, ax) = (dy.abs(), dx.abs());
    match kind {
        0 => ay <= 2 && ax <= 2,
        1 => ay.max(ax) == 3,
        2 => (ay <= 3 && ax == 0) || (ax <= 3 && ay == 0),
        _ => ay == ax,
    }
}

/// 16×16 grayscale images of 16 classes: shape kind (`class / 4`) drawn in
/// quadrant `class % 4`, with ±1 pixel position jitter, random contrast and
/// uniform noise. Items are interleaved by class.
pub fn shapes<R: Rng + ?Sized>(per_class: usize, rng: &mut R) -> LabeledImages {
    const S: usize = 16;
    let n = per_class * 16;
    let mut data = Vec::with_capacity(n * S * S);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for class in 0..16 {
            let (kind, q) = (class / 4, class % 4);
            let cy = if q < 2 { 4 } else { 11 } + rng.gen_range(-1..=1);
            let cx = if q % 2 == 0 { 4 } else { 11 } + rng.gen_range(-1..=1);
            let fg = rng.gen_range(0.6..1.0f32);
            let bg = rng.gen_range(0.0..0.2f32);
            for y in 0..S as i32 {
                for x in 0..S as i32 {
                    let (dy, dx) = (y - cy, x - cx);
                    let on = dy.abs() <= 3 && dx.abs() <= 3 && shape_mask(kind, dy, dx);
                    let v = if on { fg } else { bg } + rng.gen_range(-0.1..0.1f32);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    LabeledImages::new(Tensor::from_vec(&[n, 1, S, S], data).expect("length matches"), labels)
        .expect("labels match")
}

/// Stratified split keeping the first `round(count · fraction)` items of every
/// class (in item order) for the first part.
pub fn split_by_class(data: &LabeledImages, fraction: f64) -> Result<(LabeledImages, LabeledImages)> {
    let classes = data.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in &data.labels {
        counts[l] += 1;
    }
    let keep: Vec<usize> = counts.iter().map(|&c| (c as f64 * fraction).round() as usize).collect();
    let mut seen = vec![0usize; classes];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, &l) in data.labels.iter().enumerate() {
        if seen[l] < keep[l] {
            a.push(i);
        } else {
            b.push(i);
        }
        seen[l] += 1;
    }
    let part = |idx: &[usize]| -> Result<LabeledImages> {
        let (x, y) = data.gather(idx)?;
        LabeledImages::new(x, y)
    };
    Ok((part(&a)?, part(&b)?))
}

/// Items whose label satisfies `keep`, relabelled by `map`.
pub fn select(data: &LabeledImages, keep: impl Fn(usize) -> Option<usize>) -> Result<LabeledImages> {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| keep(data.labels[i]).is_some()).collect();
    let (x, y) = data.gather(&idx)?;
    LabeledImages::new(x, y.into_iter().map(|l| keep(l).expect("filtered")).collect())
}
