//! Image decoding, directory datasets, augmentation, the model container and
//! small file helpers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crbm::{CrbmGeometry, CrbmState, Raster};
use crate::error::{Error, Result};
use crate::network::{ModelState, NetworkSpec, Param};
use crate::tensor::Tensor;
use crate::training::LabeledImages;

// ---- images ----

fn pnm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::ImageFormat("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pnm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = pnm_token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageFormat(format!("bad header field {:?}", String::from_utf8_lossy(t))))
}

/// Decodes binary P5 (graymap) or P6 (pixmap) with maxval ≤ 255 into
/// `(C, H, W)` values scaled to `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = pnm_token(bytes, &mut pos)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        m => {
            return Err(Error::ImageFormat(format!(
                "magic {:?} is neither P5 nor P6",
                String::from_utf8_lossy(m)
            )))
        }
    };
    let w = pnm_number(bytes, &mut pos)?;
    let h = pnm_number(bytes, &mut pos)?;
    let maxval = pnm_number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::ImageFormat(format!("maxval {maxval} is not 8-bit")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::ImageFormat(format!("raster holds {} of {n} bytes", bytes.len().saturating_sub(pos))))?;
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = raster[(y * w + x) * channels + c] as f32 * scale;
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Encodes a `(C, H, W)` tensor with `C` of 1 or 3, clamping to `[0, 1]`.
pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::shape(format!("image must be (C, H, W), got {:?}", img.shape())));
    };
    let pixels: Vec<u8> = (0..h * w * c)
        .map(|i| {
            let (pix, ch) = (i / c, i % c);
            let v = img.data()[ch * h * w + pix];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    encode_raster(&Raster {
        width: w,
        height: h,
        channels: c,
        pixels,
    })
}

pub fn encode_raster(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::ImageFormat(format!("{c} channels cannot be written as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_image(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    write_atomic(path, &encode_image(img)?)
}

/// Bilinear resize of `(C, H, W)` with corner-aligned sampling.
pub fn resize(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [c, ih, iw] = *img.shape() else {
        return Err(Error::shape(format!("image must be (C, H, W), got {:?}", img.shape())));
    };
    if h == 0 || w == 0 || ih == 0 || iw == 0 {
        return Err(Error::shape("cannot resize empty images"));
    }
    if (ih, iw) == (h, w) {
        return Ok(img.clone());
    }
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let src = img.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, ih);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, iw);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * ih + yy) * iw + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Converts between 1 and 3 channels (replication or channel mean).
pub fn to_channels(img: &Tensor, channels: usize) -> Result<Tensor> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::shape(format!("image must be (C, H, W), got {:?}", img.shape())));
    };
    match (c, channels) {
        (a, b) if a == b => Ok(img.clone()),
        (1, 3) => Tensor::from_vec(&[3, h, w], img.data().repeat(3)),
        (3, 1) => {
            let d = img.data();
            let n = h * w;
            Tensor::from_vec(&[1, h, w], (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0).collect())
        }
        _ => Err(Error::shape(format!("cannot convert {c} channels to {channels}"))),
    }
}

pub fn hflip(img: &Tensor) -> Tensor {
    let [c, h, w] = *img.shape() else {
        panic!("hflip expects (C, H, W)");
    };
    let mut out = img.clone();
    let d = out.data_mut();
    for row in 0..c * h {
        d[row * w..(row + 1) * w].reverse();
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_margin: usize,
    pub hflip: bool,
}

/// One draw of augmentation choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// Offsets are uniform over the valid crop positions.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let dy = rng.gen_range(0..=cfg.crop_margin);
        let dx = rng.gen_range(0..=cfg.crop_margin);
        let flip = rng.gen::<bool>() && cfg.hflip;
        AugmentDraw { dy, dx, flip }
    }
}

/// Crop `(h − margin) × (w − margin)` at the drawn offset, resize back, then
/// optionally mirror.
pub fn apply_augment(img: &Tensor, cfg: &AugmentConfig, draw: AugmentDraw) -> Result<Tensor> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::shape(format!("image must be (C, H, W), got {:?}", img.shape())));
    };
    let m = cfg.crop_margin;
    if m >= h.min(w) {
        return Err(Error::Config(format!("crop margin {m} must be below {}", h.min(w))));
    }
    let mut out = if m == 0 {
        img.clone()
    } else {
        let (ch, cw) = (h - m, w - m);
        let d = img.data();
        let mut crop = Vec::with_capacity(c * ch * cw);
        for k in 0..c {
            for y in 0..ch {
                let row = (k * h + y + draw.dy) * w + draw.dx;
                crop.extend_from_slice(&d[row..row + cw]);
            }
        }
        resize(&Tensor::from_vec(&[c, ch, cw], crop)?, h, w)?
    };
    if draw.flip {
        out = hflip(&out);
    }
    Ok(out)
}

pub fn augment<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Result<Tensor> {
    let draw = AugmentDraw::sample(cfg, rng);
    apply_augment(img, cfg, draw)
}

/// Appends augmented copies of every item, `copies` per item.
pub fn augment_set(data: &LabeledImages, cfg: &AugmentConfig, copies: usize, seed: u64) -> Result<LabeledImages> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = data.images.shape()[1..].to_vec();
    let mut images = data.images.data().to_vec();
    let mut labels = data.labels.clone();
    for _ in 0..copies {
        for i in 0..data.len() {
            let img = Tensor::from_vec(&shape, data.images.item(i).to_vec())?;
            images.extend_from_slice(augment(&img, &mut rng, cfg)?.data());
            labels.push(data.labels[i]);
        }
    }
    let mut full = vec![labels.len()];
    full.extend_from_slice(&shape);
    LabeledImages::new(Tensor::from_vec(&full, images)?, labels)
}

// ---- datasets ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Directory-per-class image set; images decode on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<(usize, PathBuf)>,
    pub class_names: Vec<String>,
    /// `[C, H, W]` every image is converted to.
    pub geometry: [usize; 3],
    pub warnings: Vec<String>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    v.sort();
    Ok(v)
}

/// Classes are subdirectories of `root` in lexicographic order. Each class's
/// files are shuffled with `seed` and the first `round(n · train_fraction)`
/// go to the training split.
pub fn load_dataset(root: &Path, geometry: [usize; 3], split: Split, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("split fraction {train_fraction} outside [0, 1]")));
    }
    let mut class_names = Vec::new();
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("class directory {} is not UTF-8", dir.display())))?
            .to_string();
        let mut files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            let w = format!("class directory {name} holds no images; excluded");
            log::warn!("{w}");
            warnings.push(w);
            continue;
        }
        files.shuffle(&mut rng);
        let cut = (files.len() as f64 * train_fraction).round() as usize;
        let chosen = match split {
            Split::Train => &files[..cut],
            Split::Val => &files[cut..],
        };
        let class = class_names.len();
        items.extend(chosen.iter().map(|p| (class, p.clone())));
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Data(format!("{} has no class directories with images", root.display())));
    }
    Ok(Dataset {
        items,
        class_names,
        geometry,
        warnings,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Decodes item `i` and converts it to the dataset geometry.
    pub fn load_item(&self, i: usize) -> Result<Tensor> {
        let (_, path) = &self.items[i];
        let [c, h, w] = self.geometry;
        let img = read_image(path)?;
        let img = to_channels(&img, c).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        resize(&img, h, w)
    }

    pub fn load_all(&self) -> Result<LabeledImages> {
        let [c, h, w] = self.geometry;
        let mut data = Vec::with_capacity(self.len() * c * h * w);
        for i in 0..self.len() {
            data.extend_from_slice(self.load_item(i)?.data());
        }
        LabeledImages::new(
            Tensor::from_vec(&[self.len(), c, h, w], data)?,
            self.items.iter().map(|(l, _)| *l).collect(),
        )
    }
}

/// Writes `<root>/<class>/<index>.pgm|ppm` for every image.
pub fn write_dataset(root: &Path, class_names: &[String], data: &LabeledImages) -> Result<()> {
    let shape = data.images.shape()[1..].to_vec();
    let ext = if shape[0] == 3 { "ppm" } else { "pgm" };
    for name in class_names {
        let d = root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    for (i, &label) in data.labels.iter().enumerate() {
        let name = class_names
            .get(label)
            .ok_or(Error::Label {
                label,
                classes: class_names.len(),
            })?;
        let img = Tensor::from_vec(&shape, data.images.item(i).to_vec())?;
        write_image(&root.join(name).join(format!("{i:05}.{ext}")), &img)?;
    }
    Ok(())
}

// ---- model container ----

pub const MAGIC: [u8; 4] = *b"HDLC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Cnn,
    Crbm,
}

/// JSON header of a container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub kind: ArtifactKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crbm: Option<CrbmGeometry>,
    /// Number of f32 values in the payload.
    pub values: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Class names and provenance stored alongside parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelInfo {
    pub class_names: Vec<String>,
    pub provenance: BTreeMap<String, String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

fn encode_container(meta: &ContainerMeta, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<(ContainerMeta, usize)> {
    let head = |r: std::ops::Range<usize>| {
        bytes
            .get(r)
            .ok_or_else(|| Error::Metadata("file ends inside the header".into()))
    };
    let magic: [u8; 4] = head(0..4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::Magic(magic));
    }
    let version = u32::from_le_bytes(head(4..8)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = u32::from_le_bytes(head(8..12)?.try_into().expect("4 bytes")) as usize;
    let meta: ContainerMeta =
        serde_json::from_slice(head(12..12 + len)?).map_err(|e| Error::Metadata(e.to_string()))?;
    Ok((meta, 12 + len))
}

/// Reads only the header of a container.
pub fn read_metadata(path: &Path) -> Result<ContainerMeta> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut buf = Vec::with_capacity(64);
    (&mut f)
        .take(12)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if buf.len() >= 4 && buf[..4] != MAGIC {
        return Err(Error::Magic(buf[..4].try_into().expect("4 bytes")));
    }
    if buf.len() == 12 {
        let len = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as u64;
        (&mut f)
            .take(len)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    }
    Ok(parse_header(&buf)?.0)
}

fn read_container(path: &Path) -> Result<(ContainerMeta, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (meta, start) = parse_header(&bytes)?;
    let payload = &bytes[start..];
    let expected = meta.values * 4;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            found: payload.len(),
            expected,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((meta, values))
}

fn take(values: &[f32], pos: &mut usize, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let t = Tensor::from_vec(shape, values[*pos..*pos + n].to_vec())?;
    *pos += n;
    Ok(t)
}

pub fn save_model(path: &Path, model: &ModelState, info: &ModelInfo) -> Result<()> {
    let mut payload = Vec::with_capacity(model.spec.param_count());
    for p in &model.params {
        payload.extend_from_slice(p.weight.data());
        payload.extend_from_slice(p.bias.data());
    }
    let meta = ContainerMeta {
        kind: ArtifactKind::Cnn,
        spec: Some(model.spec.clone()),
        crbm: None,
        values: payload.len(),
        class_names: info.class_names.clone(),
        provenance: info.provenance.clone(),
    };
    write_atomic(path, &encode_container(&meta, &payload))
}

pub fn load_model_with_info(path: &Path) -> Result<(ModelState, ModelInfo)> {
    let (meta, values) = read_container(path)?;
    if meta.kind != ArtifactKind::Cnn {
        return Err(Error::Metadata(format!("{} holds a {:?}, not a CNN", path.display(), meta.kind)));
    }
    let spec = meta
        .spec
        .ok_or_else(|| Error::Metadata("CNN container without a spec".into()))?;
    let expected = spec.param_count();
    if meta.values != expected {
        return Err(Error::Metadata(format!(
            "count mismatch: payload declares {} values, spec needs {expected}",
            meta.values
        )));
    }
    let mut pos = 0;
    let mut params = Vec::new();
    for layer in spec.param_layers() {
        let (ws, bs) = spec.layers[layer].param_shapes().expect("param layer");
        params.push(Param {
            layer,
            weight: take(&values, &mut pos, &ws)?,
            bias: take(&values, &mut pos, &bs)?,
        });
    }
    let info = ModelInfo {
        class_names: meta.class_names,
        provenance: meta.provenance,
    };
    Ok((ModelState::from_params(spec, params)?, info))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    Ok(load_model_with_info(path)?.0)
}

pub fn save_crbm(path: &Path, s: &CrbmState, info: &ModelInfo) -> Result<()> {
    let g = s.geometry();
    let mut payload = Vec::with_capacity(g.param_count());
    payload.extend_from_slice(s.filters.data());
    payload.extend_from_slice(s.hidden_bias.data());
    payload.push(s.visible_bias);
    let meta = ContainerMeta {
        kind: ArtifactKind::Crbm,
        spec: None,
        crbm: Some(g),
        values: payload.len(),
        class_names: info.class_names.clone(),
        provenance: info.provenance.clone(),
    };
    write_atomic(path, &encode_container(&meta, &payload))
}

pub fn load_crbm(path: &Path) -> Result<CrbmState> {
    let (meta, values) = read_container(path)?;
    if meta.kind != ArtifactKind::Crbm {
        return Err(Error::Metadata(format!("{} holds a {:?}, not a CRBM", path.display(), meta.kind)));
    }
    let g = meta
        .crbm
        .ok_or_else(|| Error::Metadata("CRBM container without geometry".into()))?;
    g.validate()?;
    if meta.values != g.param_count() {
        return Err(Error::Metadata(format!(
            "count mismatch: payload declares {} values, geometry needs {}",
            meta.values,
            g.param_count()
        )));
    }
    let mut pos = 0;
    let filters = take(&values, &mut pos, &[g.filters, g.in_channels, g.kernel_h, g.kernel_w])?;
    let hidden_bias = take(&values, &mut pos, &[g.filters])?;
    Ok(CrbmState {
        filters,
        hidden_bias,
        visible_bias: values[pos],
        pool_block: g.pool_block,
    })
}

// ---- text files ----

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Appends one line per entry, creating the file if needed.
pub fn append_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    for l in lines {
        writeln!(f, "{}", l.as_ref()).map_err(|e| Error::io(format!("appending to {}", path.display()), e))?;
    }
    Ok(())
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    write_atomic(path, &encode_raster(r)?)
}
