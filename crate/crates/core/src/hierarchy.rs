//! Root/leaf model bundles, routed two-step classification and top-5
//! evaluation.
//!
//! Root softmax index `r − 1` is RID `r`; leaf softmax index `l − 1` is LID
//! `l` of that group.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio;
use crate::error::{Error, Result};
use crate::network::ModelState;
use crate::taxonomy::LeafPartition;
use crate::tensor::Tensor;

/// Anything that yields class probabilities for a `(C, H, W)` image.
pub trait Classifier: Sync {
    fn class_count(&self) -> usize;
    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>>;
}

impl Classifier for ModelState {
    fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        let [c, h, w] = self.spec.input_shape;
        image.expect_shape(&[c, h, w])?;
        Ok(self.predict(image)?.data().iter().map(|&p| p as f64).collect())
    }
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }

    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        (**self).probabilities(image)
    }
}

/// Adapts a closure into a [`Classifier`].
pub struct FnClassifier<F> {
    pub classes: usize,
    pub f: F,
}

impl<F: Fn(&Tensor) -> Result<Vec<f64>> + Sync> Classifier for FnClassifier<F> {
    fn class_count(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        (self.f)(image)
    }
}

/// Ranked `(label, confidence)` pairs, descending confidence, ties by lower label.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub entries: Vec<(u32, f64)>,
}

impl TopK {
    pub fn from_candidates(mut candidates: Vec<(u32, f64)>, k: usize) -> Self {
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        candidates.truncate(k);
        TopK { entries: candidates }
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn contains(&self, label: u32) -> bool {
        self.labels().any(|l| l == label)
    }
}

/// The `k` most probable classes; labels are 0-based class indices.
pub fn classify_flat<C: Classifier + ?Sized>(model: &C, image: &Tensor, k: usize) -> Result<TopK> {
    let probs = model.probabilities(image)?;
    if probs.len() != model.class_count() {
        return Err(Error::shape(format!(
            "classifier returned {} probabilities for {} classes",
            probs.len(),
            model.class_count()
        )));
    }
    Ok(TopK::from_candidates(
        probs.into_iter().enumerate().map(|(i, p)| (i as u32, p)).collect(),
        k,
    ))
}

pub struct HierarchyBundle<C> {
    pub root: C,
    pub leaves: BTreeMap<u32, C>,
    pub partition: LeafPartition,
}

impl<C: Classifier> HierarchyBundle<C> {
    /// Checks that the root has one class per group and every group has a
    /// leaf of matching width.
    pub fn new(root: C, leaves: BTreeMap<u32, C>, partition: LeafPartition) -> Result<Self> {
        let groups = partition.group_count();
        if root.class_count() != groups {
            return Err(Error::Config(format!(
                "root model has {} classes for {groups} leaf groups",
                root.class_count()
            )));
        }
        for rid in 1..=groups as u32 {
            let size = partition.group(rid).expect("rid in range").len();
            let leaf = leaves.get(&rid).ok_or(Error::MissingLeaf(rid))?;
            if leaf.class_count() != size {
                return Err(Error::Config(format!(
                    "leaf model for RID {rid} has {} classes, group holds {size}",
                    leaf.class_count()
                )));
            }
        }
        if let Some(extra) = leaves.keys().find(|&&r| r == 0 || r as usize > groups) {
            return Err(Error::Config(format!("leaf model for unknown RID {extra}")));
        }
        Ok(HierarchyBundle {
            root,
            leaves,
            partition,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteWidths {
    pub root_k: usize,
    pub leaf_k: usize,
    pub out_k: usize,
}

impl Default for RouteWidths {
    fn default() -> Self {
        RouteWidths {
            root_k: 5,
            leaf_k: 5,
            out_k: 5,
        }
    }
}

/// Top root RIDs, each leaf's top LIDs scaled by the RID confidence, pooled
/// and ranked; labels are GIDs. Widths are clamped to the group count and
/// group sizes.
pub fn classify_hierarchical<C: Classifier>(
    bundle: &HierarchyBundle<C>,
    image: &Tensor,
    widths: RouteWidths,
) -> Result<TopK> {
    let root = classify_flat(&bundle.root, image, widths.root_k)?;
    let mut candidates = Vec::with_capacity(widths.root_k * widths.leaf_k);
    for &(r, rconf) in &root.entries {
        let rid = r + 1;
        let leaf = bundle.leaves.get(&rid).ok_or(Error::MissingLeaf(rid))?;
        for (l, lconf) in classify_flat(leaf, image, widths.leaf_k)?.entries {
            let gid = bundle
                .partition
                .gid(rid, l + 1)
                .ok_or_else(|| Error::Config(format!("RID {rid} has no LID {}", l + 1)))?;
            candidates.push((gid, lconf * rconf));
        }
    }
    Ok(TopK::from_candidates(candidates, widths.out_k))
}

#[derive(Clone, Debug)]
pub struct TestItem {
    pub gid: u32,
    /// Checked against the partition when present; the GID decides.
    pub rid: Option<u32>,
    pub image: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RidStats {
    pub total: usize,
    pub top5_errors: usize,
    pub top1_errors: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub top5_errors: usize,
    pub top5_error_pct: f64,
    pub top1_errors: usize,
    pub per_rid: BTreeMap<u32, RidStats>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn top1_accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            1.0 - self.top1_errors as f64 / self.total as f64
        }
    }

    /// `total, errors, pct`
    pub fn summary_line(&self) -> String {
        format!("{}, {}, {:.4}", self.total, self.top5_errors, self.top5_error_pct)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "items: {}\ntop-5 errors: {} ({:.2}%)\ntop-1 accuracy: {:.4}\n",
            self.total,
            self.top5_errors,
            self.top5_error_pct,
            self.top1_accuracy()
        );
        for (rid, r) in &self.per_rid {
            let pct = if r.total == 0 { 0.0 } else { 100.0 * r.top5_errors as f64 / r.total as f64 };
            s.push_str(&format!("RID {rid}: {} items, {} top-5 errors ({pct:.2}%)\n", r.total, r.top5_errors));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str(&self.summary_line());
        s.push('\n');
        s
    }
}

/// Evaluates with the default widths (5, 5, 5) on one thread.
pub fn evaluate_top5<C: Classifier>(bundle: &HierarchyBundle<C>, items: &[TestItem]) -> Result<EvalReport> {
    evaluate(bundle, items, RouteWidths::default(), 1)
}

/// Counts items whose GID is missing from the routed top-`out_k`. Items are
/// split across `threads` workers; the report does not depend on the split.
pub fn evaluate<C: Classifier>(
    bundle: &HierarchyBundle<C>,
    items: &[TestItem],
    widths: RouteWidths,
    threads: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (i, item) in items.iter().enumerate() {
        let (rid, _) = bundle
            .partition
            .rid_lid_of_gid(item.gid)
            .ok_or(Error::UnknownGid(item.gid))?;
        if let Some(given) = item.rid.filter(|&r| r != rid) {
            let w = format!("item {i}: supplied RID {given} conflicts with GID {} (RID {rid}); ignored", item.gid);
            log::warn!("{w}");
            report.warnings.push(w);
        }
    }
    let threads = threads.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    let outcomes: Vec<Result<Vec<(bool, bool)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|item| {
                            let top = classify_hierarchical(bundle, &item.image, widths)?;
                            let top1 = top.entries.first().map(|e| e.0) == Some(item.gid);
                            Ok((top.contains(item.gid), top1))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut hits = Vec::with_capacity(items.len());
    for o in outcomes {
        hits.extend(o?);
    }
    for (item, (in_top, top1)) in items.iter().zip(hits) {
        let (rid, _) = bundle.partition.rid_lid_of_gid(item.gid).expect("checked above");
        let r = report.per_rid.entry(rid).or_default();
        r.total += 1;
        report.total += 1;
        if !in_top {
            r.top5_errors += 1;
            report.top5_errors += 1;
        }
        if !top1 {
            r.top1_errors += 1;
            report.top1_errors += 1;
        }
    }
    report.top5_error_pct = if report.total == 0 {
        0.0
    } else {
        100.0 * report.top5_errors as f64 / report.total as f64
    };
    Ok(report)
}

/// Flat top-`k` error count over `(class index, image)` pairs.
pub fn evaluate_flat<C: Classifier + ?Sized>(model: &C, items: &[(usize, Tensor)], k: usize) -> Result<(usize, usize)> {
    let mut errors = 0;
    for (label, image) in items {
        if !classify_flat(model, image, k)?.contains(*label as u32) {
            errors += 1;
        }
    }
    Ok((items.len(), errors))
}

/// Paths of a bundle's parts; relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub root: PathBuf,
    pub partition: PathBuf,
    /// RID (as a string key) to leaf model path.
    pub leaves: BTreeMap<String, PathBuf>,
}

impl BundleManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bundle manifest: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn leaf_rids(&self) -> Result<BTreeMap<u32, PathBuf>> {
        self.leaves
            .iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|r| (r, v.clone()))
                    .map_err(|_| Error::Config(format!("bundle manifest: leaf key {k:?} is not a RID")))
            })
            .collect()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_bundle(manifest_path: &Path) -> Result<HierarchyBundle<ModelState>> {
    let m = BundleManifest::from_toml(&dataio::read_text(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let partition = LeafPartition::from_json(&dataio::read_text(&resolve(base, &m.partition))?)?;
    let root = dataio::load_model(&resolve(base, &m.root))?;
    let mut leaves = BTreeMap::new();
    for (rid, p) in m.leaf_rids()? {
        leaves.insert(rid, dataio::load_model(&resolve(base, &p))?);
    }
    HierarchyBundle::new(root, leaves, partition)
}
