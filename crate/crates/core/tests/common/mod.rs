//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hierdl_core::taxonomy::{HierarchyTree, IsaMap, LeafPartition, SynsetId};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

// ---- numeric kernels, f64, direct index arithmetic ----

/// Cross-correlation with zero padding; x `[n][c][h][w]` flattened.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    f: &[f64],
    (o, kh, kw): (usize, usize, usize),
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += f[((oi * c + ci) * kh + u) * kw + v]
                                    * x[((ni * c + ci) * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Σ_k full convolution of hidden map k with filter k, plus c.
pub fn naive_visible(
    h: &[f64],
    (n, k, ho, wo): (usize, usize, usize, usize),
    f: &[f64],
    (c, kh, kw): (usize, usize, usize),
    vbias: f64,
) -> Vec<f64> {
    let (vh, vw) = (ho + kh - 1, wo + kw - 1);
    let mut out = vec![0.0; n * c * vh * vw];
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..vh {
                for j in 0..vw {
                    let mut acc = vbias;
                    for ki in 0..k {
                        for p in 0..kh {
                            for q in 0..kw {
                                if i < p || j < q || i - p >= ho || j - q >= wo {
                                    continue;
                                }
                                acc += h[((ni * k + ki) * ho + i - p) * wo + j - q] * f[((ki * c + ci) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[((ni * c + ci) * vh + i) * vw + j] = acc;
                }
            }
        }
    }
    out
}

/// Per-unit on-probabilities and per-block pooled probabilities, by
/// explicit enumeration of the block's states.
pub fn naive_prob_pool(pre: &[f64], (maps, h, w): (usize, usize, usize), block: usize) -> (Vec<f64>, Vec<f64>) {
    let (ph, pw) = (h.div_ceil(block), w.div_ceil(block));
    let mut on = vec![0.0; maps * h * w];
    let mut pooled = vec![0.0; maps * ph * pw];
    for m in 0..maps {
        for bi in 0..ph {
            for bj in 0..pw {
                let mut cells = Vec::new();
                for i in bi * block..(bi * block + block).min(h) {
                    for j in bj * block..(bj * block + block).min(w) {
                        cells.push((m * h + i) * w + j);
                    }
                }
                // states: all off (energy 0), or exactly one cell on
                let weights: Vec<f64> = cells.iter().map(|&c| pre[c].exp()).collect();
                let z = 1.0 + weights.iter().sum::<f64>();
                for (&c, wgt) in cells.iter().zip(&weights) {
                    on[c] = wgt / z;
                }
                pooled[(m * ph + bi) * pw + bj] = 1.0 - 1.0 / z;
            }
        }
    }
    (on, pooled)
}

// ---- taxonomy ----

pub fn sid(n: u32) -> SynsetId {
    SynsetId::new(n).unwrap()
}

/// Random DAG on up to `max_nodes` nodes with distinct IDs; edges only go from
/// an earlier node to a later one in a random order, so the graph is acyclic
/// but parent IDs are not necessarily smaller than child IDs. Returns the map
/// and its nodes that appear in at least one edge.
pub fn random_dag<R: Rng>(rng: &mut R, max_nodes: usize) -> (IsaMap, Vec<SynsetId>) {
    let n = rng.gen_range(1..=max_nodes);
    let mut ids: BTreeSet<u32> = BTreeSet::new();
    while ids.len() < n {
        ids.insert(rng.gen_range(1..100_000));
    }
    let mut order: Vec<SynsetId> = ids.into_iter().map(sid).collect();
    order.shuffle(rng);
    let mut m = IsaMap::new();
    for j in 1..n {
        let parents = rng.gen_range(0..=3.min(j));
        for _ in 0..parents {
            let i = rng.gen_range(0..j);
            m.insert(order[i], order[j]).unwrap();
        }
    }
    let known: Vec<SynsetId> = order.into_iter().filter(|&s| m.contains(s)).collect();
    (m, known)
}

/// All parent chains from `s` upward to a parentless node.
pub fn all_upward_paths(s: SynsetId, m: &IsaMap) -> Vec<Vec<SynsetId>> {
    let parents: Vec<SynsetId> = m.parents_of(s).collect();
    if parents.is_empty() {
        return vec![vec![s]];
    }
    let mut out = Vec::new();
    for p in parents {
        for mut path in all_upward_paths(p, m) {
            path.insert(0, s);
            out.push(path);
        }
    }
    out
}

/// The root-to-`s` path whose upward reading is lexicographically largest,
/// which is the path choosing the largest parent at every step.
pub fn brute_deepest_branch(s: SynsetId, m: &IsaMap) -> Vec<SynsetId> {
    let mut best = all_upward_paths(s, m).into_iter().max().unwrap();
    best.reverse();
    best
}

/// Expected tree after `iterations` roll-ups, from branch positions alone:
/// a node survives when its depth is at most `max_depth − iterations`, and
/// a synset's members land on its ancestor at that cut, listed in preorder
/// with children visited in ID order.
pub fn brute_htree(synsets: &[SynsetId], m: &IsaMap, iterations: usize) -> BTreeMap<SynsetId, Vec<SynsetId>> {
    let mut parent: BTreeMap<SynsetId, SynsetId> = BTreeMap::new();
    let mut depth: BTreeMap<SynsetId, usize> = BTreeMap::new();
    let mut members: BTreeSet<SynsetId> = BTreeSet::new();
    for &s in synsets {
        let branch = brute_deepest_branch(s, m);
        for (d, &node) in branch.iter().enumerate() {
            depth.insert(node, d);
            if d > 0 {
                parent.insert(node, branch[d - 1]);
            }
        }
        members.insert(s);
    }
    let max_depth = depth.values().copied().max().unwrap_or(0);
    let cut = max_depth.saturating_sub(iterations);
    let mut children: BTreeMap<SynsetId, Vec<SynsetId>> = BTreeMap::new();
    for (&c, &p) in &parent {
        children.entry(p).or_default().push(c);
    }
    fn preorder(
        n: SynsetId,
        kids: &BTreeMap<SynsetId, Vec<SynsetId>>,
        members: &BTreeSet<SynsetId>,
        out: &mut Vec<SynsetId>,
    ) {
        if members.contains(&n) {
            out.push(n);
        }
        for &c in kids.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            preorder(c, kids, members, out);
        }
    }
    let mut out = BTreeMap::new();
    for (&n, &d) in &depth {
        if d <= cut {
            let mut list = Vec::new();
            if d == cut {
                preorder(n, &children, &members, &mut list);
            } else if members.contains(&n) {
                list.push(n);
            }
            out.insert(n, list);
        }
    }
    out
}

pub fn tree_members(t: &HierarchyTree) -> BTreeMap<SynsetId, Vec<SynsetId>> {
    t.nodes.iter().map(|&n| (n, t.members_of(n).to_vec())).collect()
}

/// Disjointness, coverage, size bounds and label bijection of a partition.
pub fn check_partition(p: &LeafPartition, synsets: &[SynsetId], max: usize, min: usize) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for g in p.leaves() {
        if g.is_empty() || g.len() > max {
            return Err(format!("group size {} outside [1, {max}]", g.len()));
        }
        if g.len() < min && p.warnings.is_empty() {
            return Err(format!("undersized group {} without a warning", g.len()));
        }
        for &s in g {
            if !seen.insert(s) {
                return Err(format!("{s} in two groups"));
            }
        }
    }
    let want: BTreeSet<SynsetId> = synsets.iter().copied().collect();
    if seen != want {
        return Err("groups do not cover the synsets exactly".into());
    }
    let mut gids = BTreeSet::new();
    for &s in &want {
        let (r, l, g) = (p.rid_of(s).unwrap(), p.lid_of(s).unwrap(), p.gid_of(s).unwrap());
        if p.group(r).unwrap()[l as usize - 1] != s || p.gid(r, l) != Some(g) || p.rid_lid_of_gid(g) != Some((r, l)) {
            return Err(format!("labels of {s} are inconsistent"));
        }
        if p.synset_of_gid(g) != Some(s) {
            return Err(format!("GID {g} does not map back to {s}"));
        }
        gids.insert(g);
    }
    if gids != (1..=want.len() as u32).collect() {
        return Err("GIDs are not 1..=N".into());
    }
    Ok(())
}

// ---- routing ----

/// Every (RID, LID) product for the `root_k` best RIDs and each leaf's
/// `leaf_k` best LIDs, ranked by descending product then GID.
pub fn brute_route(
    root: &[f64],
    leaves: &BTreeMap<u32, Vec<f64>>,
    p: &LeafPartition,
    root_k: usize,
    leaf_k: usize,
    out_k: usize,
) -> Vec<(u32, f64)> {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        // stable selection: repeatedly take the first maximum
        let mut chosen = Vec::new();
        while !idx.is_empty() {
            let mut best = 0;
            for t in 1..idx.len() {
                if v[idx[t]] > v[idx[best]] {
                    best = t;
                }
            }
            chosen.push(idx.remove(best));
        }
        chosen
    };
    let mut all = Vec::new();
    for r in rank(root).into_iter().take(root_k) {
        let rid = r as u32 + 1;
        let leaf = &leaves[&rid];
        for l in rank(leaf).into_iter().take(leaf_k) {
            all.push((p.gid(rid, l as u32 + 1).unwrap(), root[r] * leaf[l]));
        }
    }
    let mut out = Vec::new();
    while out.len() < out_k && !all.is_empty() {
        let mut best = 0;
        for t in 1..all.len() {
            let (g, c) = all[t];
            let (bg, bc) = all[best];
            if c > bc || (c == bc && g < bg) {
                best = t;
            }
        }
        out.push(all.remove(best));
    }
    out
}

// ---- randomized kernel comparisons, shared by property tests and acceptance ----

use hierdl_core::crbm::{self, CrbmState};
use hierdl_core::layers;
use hierdl_core::Tensor;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random conv shape, stride and pad; returns the largest deviation from
/// [`naive_conv`].
pub fn conv_case<R: Rng>(rng: &mut R) -> f64 {
    let (n, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let stride = rng.gen_range(1..=3);
    let pad = rng.gen_range(0..kh.min(kw));
    let h = rng.gen_range(kh.max(2)..=9);
    let w = rng.gen_range(kw.max(2)..=9);
    let x = Tensor::<f64>::uniform(&[n, c, h, w], 1.0, rng);
    let f = Tensor::<f64>::uniform(&[o, c, kh, kw], 1.0, rng);
    let b = Tensor::<f64>::uniform(&[o], 1.0, rng);
    let got = layers::conv_forward(&x, &f, &b, stride, pad).unwrap();
    let (want, ho, wo) = naive_conv(x.data(), (n, c, h, w), f.data(), (o, kh, kw), b.data(), stride, pad);
    assert_eq!(got.shape(), &[n, o, ho, wo]);
    max_abs_diff(got.data(), &want)
}

fn random_crbm<R: Rng>(rng: &mut R) -> CrbmState<f64> {
    let g = crbm::CrbmGeometry {
        filters: rng.gen_range(1..=4),
        in_channels: rng.gen_range(1..=3),
        kernel_h: rng.gen_range(1..=4),
        kernel_w: rng.gen_range(1..=4),
        pool_block: 1,
    };
    let mut s = CrbmState::<f64>::zeros(g).unwrap();
    s.filters = Tensor::uniform(s.filters.shape(), 1.0, rng);
    s.hidden_bias = Tensor::uniform(s.hidden_bias.shape(), 1.0, rng);
    s.visible_bias = rng.gen_range(-1.0..1.0);
    s
}

/// Hidden conditional `σ(W ⋆ v + b)` against the naive loop.
pub fn hidden_case<R: Rng>(rng: &mut R) -> f64 {
    let s = random_crbm(rng);
    let g = s.geometry();
    let n = rng.gen_range(1..=2);
    let (h, w) = (rng.gen_range(g.kernel_h..=9), rng.gen_range(g.kernel_w..=9));
    let v = Tensor::<f64>::uniform(&[n, g.in_channels, h, w], 1.0, rng).map(f64::abs);
    let got = crbm::hidden_prob(&v, &s).unwrap();
    let (pre, _, _) = naive_conv(
        v.data(),
        (n, g.in_channels, h, w),
        s.filters.data(),
        (g.filters, g.kernel_h, g.kernel_w),
        s.hidden_bias.data(),
        1,
        0,
    );
    let want: Vec<f64> = pre.into_iter().map(logistic).collect();
    max_abs_diff(got.data(), &want)
}

/// Visible conditional `σ(Σ_k h_k * W_k + c)` against the naive loop.
pub fn visible_case<R: Rng>(rng: &mut R) -> f64 {
    let s = random_crbm(rng);
    let g = s.geometry();
    let n = rng.gen_range(1..=2);
    let (ho, wo) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
    let h = Tensor::<f64>::uniform(&[n, g.filters, ho, wo], 1.0, rng).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    let got = crbm::visible_prob(&h, &s).unwrap();
    let pre = naive_visible(
        h.data(),
        (n, g.filters, ho, wo),
        s.filters.data(),
        (g.in_channels, g.kernel_h, g.kernel_w),
        s.visible_bias,
    );
    let want: Vec<f64> = pre.into_iter().map(logistic).collect();
    max_abs_diff(got.data(), &want)
}

/// Probabilistic max pooling probabilities against state enumeration, with
/// pre-activations large enough to exercise the overflow shift.
pub fn pool_case<R: Rng>(rng: &mut R) -> f64 {
    let (n, k) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
    let block = rng.gen_range(1..=4);
    let scale = if rng.gen_bool(0.2) { 30.0 } else { 4.0 };
    let pre = Tensor::<f64>::uniform(&[n, k, h, w], scale, rng);
    let (on, pooled) = crbm::prob_maxpool_probs(&pre, block).unwrap();
    let (want_on, want_pooled) = naive_prob_pool(pre.data(), (n * k, h, w), block);
    max_abs_diff(on.data(), &want_on).max(max_abs_diff(pooled.data(), &want_pooled))
}

/// One random taxonomy trial: deepest branches and the rolled-up tree against
/// the brute-force enumerators, member preservation and depth decrease across
/// every pass, and partition invariants.
pub fn taxonomy_case<R: Rng>(rng: &mut R) -> Result<(), String> {
    use hierdl_core::taxonomy::{self, build_htree, deepest_branch, partition_leaves};
    let (m, nodes) = random_dag(rng, 50);
    for &s in &nodes {
        let got = deepest_branch(s, &m).map_err(|e| e.to_string())?;
        let want = brute_deepest_branch(s, &m);
        if got != want {
            return Err(format!("deepest_branch({s}): {got:?} vs {want:?}"));
        }
        for pair in got.windows(2) {
            if taxonomy::closest_parent(pair[1], &m) != Some(pair[0]) {
                return Err(format!("{} is not the closest parent of {}", pair[0], pair[1]));
            }
        }
    }
    if nodes.is_empty() {
        return Ok(());
    }
    let mut synsets: Vec<SynsetId> = nodes.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
    if synsets.is_empty() {
        synsets.push(nodes[0]);
    }
    let iterations = rng.gen_range(0..8);
    let tree = build_htree(&synsets, &m, iterations).map_err(|e| e.to_string())?;
    let want = brute_htree(&synsets, &m, iterations);
    if tree_members(&tree) != want {
        return Err(format!("build_htree after {iterations} passes differs from the depth-cut oracle"));
    }
    let mut sorted = synsets.clone();
    sorted.sort();
    let mut pass = build_htree(&synsets, &m, 0).map_err(|e| e.to_string())?;
    loop {
        let before = pass.max_depth();
        if !pass.roll_up_once() {
            break;
        }
        let mut members: Vec<SynsetId> = pass.members.values().flatten().copied().collect();
        members.sort();
        if members != sorted {
            return Err("roll-up changed the member multiset".into());
        }
        if pass.max_depth() >= before {
            return Err("roll-up did not reduce depth".into());
        }
    }
    let max = rng.gen_range(1..=12);
    let min = rng.gen_range(1..=max);
    let p = partition_leaves(&tree, max, min).map_err(|e| e.to_string())?;
    check_partition(&p, &synsets, max, min)
}

/// Confidence tables indexed by the item number stored in the image.
pub type Tables = Vec<(Vec<f64>, BTreeMap<u32, Vec<f64>>)>;

type TableFn = Box<dyn Fn(&Tensor) -> hierdl_core::Result<Vec<f64>> + Send + Sync>;

pub fn item_image(i: usize) -> Tensor {
    Tensor::from_vec(&[1, 1, 1], vec![i as f32]).unwrap()
}

/// A bundle whose root and leaves replay fixed tables for each item.
pub fn table_bundle(
    p: &LeafPartition,
    tables: std::sync::Arc<Tables>,
) -> hierdl_core::hierarchy::HierarchyBundle<hierdl_core::hierarchy::FnClassifier<TableFn>> {
    use hierdl_core::hierarchy::{FnClassifier, HierarchyBundle};
    let t = tables.clone();
    let root = FnClassifier::<TableFn> {
        classes: p.group_count(),
        f: Box::new(move |img: &Tensor| Ok(t[img.data()[0] as usize].0.clone())),
    };
    let mut leaves = BTreeMap::new();
    for rid in 1..=p.group_count() as u32 {
        let t = tables.clone();
        leaves.insert(
            rid,
            FnClassifier::<TableFn> {
                classes: p.group(rid).unwrap().len(),
                f: Box::new(move |img: &Tensor| Ok(t[img.data()[0] as usize].1[&rid].clone())),
            },
        );
    }
    HierarchyBundle::new(root, leaves, p.clone()).unwrap()
}

/// Probability vector whose entries are sometimes quantized to force ties.
fn random_probs<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let coarse = rng.gen_bool(0.3);
    let raw: Vec<f64> = (0..n)
        .map(|_| if coarse { rng.gen_range(1..4) as f64 } else { rng.gen_range(0.01..1.0) })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

/// One random routing trial: ranked outputs against [`brute_route`] and the
/// evaluation report against an independent count.
pub fn routing_case<R: Rng>(rng: &mut R) -> Result<(), String> {
    use hierdl_core::hierarchy::{classify_hierarchical, evaluate, evaluate_top5, RidStats, RouteWidths, TestItem};
    let groups = rng.gen_range(1..=6);
    let mut next = 1u32;
    let leaves: Vec<Vec<SynsetId>> = (0..groups)
        .map(|_| {
            (0..rng.gen_range(1..=7))
                .map(|_| {
                    next += rng.gen_range(1..5);
                    sid(next)
                })
                .collect()
        })
        .collect();
    let p = LeafPartition::from_groups(leaves).map_err(|e| e.to_string())?;
    let n_items = rng.gen_range(1..=12);
    let tables: Tables = (0..n_items)
        .map(|_| {
            let root = random_probs(p.group_count(), rng);
            let leaves = (1..=p.group_count() as u32)
                .map(|r| (r, random_probs(p.group(r).unwrap().len(), rng)))
                .collect();
            (root, leaves)
        })
        .collect();
    let tables = std::sync::Arc::new(tables);
    let bundle = table_bundle(&p, tables.clone());
    let widths = if rng.gen_bool(0.3) {
        RouteWidths::default()
    } else {
        RouteWidths {
            root_k: rng.gen_range(1..=8),
            leaf_k: rng.gen_range(1..=8),
            out_k: rng.gen_range(1..=10),
        }
    };
    let n = p.synset_count() as u32;
    let items: Vec<TestItem> = (0..n_items)
        .map(|i| TestItem {
            gid: rng.gen_range(1..=n),
            rid: None,
            image: item_image(i),
        })
        .collect();
    let mut want = hierdl_core::hierarchy::EvalReport::default();
    for (i, item) in items.iter().enumerate() {
        let got = classify_hierarchical(&bundle, &item.image, widths).map_err(|e| e.to_string())?;
        let brute = brute_route(&tables[i].0, &tables[i].1, &p, widths.root_k, widths.leaf_k, widths.out_k);
        if got.entries != brute {
            return Err(format!("item {i}: {:?} vs {:?}", got.entries, brute));
        }
        let rid = p.rid_of(p.synset_of_gid(item.gid).unwrap()).unwrap();
        let stats: &mut RidStats = want.per_rid.entry(rid).or_default();
        stats.total += 1;
        want.total += 1;
        if !brute.iter().any(|e| e.0 == item.gid) {
            stats.top5_errors += 1;
            want.top5_errors += 1;
        }
        if brute.first().map(|e| e.0) != Some(item.gid) {
            stats.top1_errors += 1;
            want.top1_errors += 1;
        }
    }
    want.top5_error_pct = 100.0 * want.top5_errors as f64 / want.total as f64;
    let report = evaluate(&bundle, &items, widths, rng.gen_range(1..=4)).map_err(|e| e.to_string())?;
    if report != want {
        return Err(format!("report {report:?} vs independent count {want:?}"));
    }
    if widths == RouteWidths::default() && evaluate_top5(&bundle, &items).map_err(|e| e.to_string())? != want {
        return Err("evaluate_top5 differs from the independent count".into());
    }
    Ok(())
}

// ---- desk-scale experiments shared by integration tests and acceptance ----

/// First- and final-epoch reconstruction MSE of CD-1 on 8×8 bars and stripes
/// with 8 filters of 5×5, for each seed.
pub fn cd1_bars_runs(seeds: std::ops::Range<u64>, epochs: usize) -> Vec<(f64, f64)> {
    use rand::SeedableRng;
    seeds
        .map(|seed| {
            let data = hierdl_core::synth::bars_and_stripes(200, 8, &mut rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed));
            let g = crbm::CrbmGeometry { filters: 8, in_channels: 1, kernel_h: 5, kernel_w: 5, pool_block: 1 };
            let cfg = crbm::Cd1Config { seed, epochs, ..crbm::Cd1Config::default() };
            let (_, log) = crbm::train_crbm(&data, g, &cfg).unwrap();
            (log[0].recon_mse, log[log.len() - 1].recon_mse)
        })
        .collect()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// A CRBM whose reconstructions are far more spread out than its input: large
/// filters of mixed sign over a nearly constant batch.
pub fn variance_trigger() -> (crbm::CrbmTrainer, Tensor) {
    let g = crbm::CrbmGeometry { filters: 2, in_channels: 1, kernel_h: 3, kernel_w: 3, pool_block: 1 };
    let mut s = CrbmState::zeros(g).unwrap();
    for (i, w) in s.filters.data_mut().iter_mut().enumerate() {
        *w = if i % 2 == 0 { 6.0 } else { -6.0 };
    }
    let batch = Tensor::from_vec(&[2, 1, 6, 6], (0..72).map(|i| if i % 7 == 0 { 0.55 } else { 0.5 }).collect()).unwrap();
    (crbm::CrbmTrainer::new(s, crbm::Cd1Config::default()).unwrap(), batch)
}

/// Everything produced by one run of the desk-scale hierarchy.
#[derive(Debug, PartialEq)]
pub struct DeskRun {
    pub partition: LeafPartition,
    pub root: hierdl_core::ModelState,
    pub leaves: BTreeMap<u32, hierdl_core::ModelState>,
    pub report: hierdl_core::hierarchy::EvalReport,
    pub crbm_leaves: BTreeMap<u32, hierdl_core::ModelState>,
    pub crbm_report: hierdl_core::hierarchy::EvalReport,
}

pub const DESK_EPOCHS: usize = 10;

/// Shape taxonomy -> partition (groups of exactly 4) -> root + leaf models
/// trained from scratch, and again with CRBM-initialized first layers, each
/// evaluated on the held-out 20% of 200 images per class.
pub fn desk_hierarchy(seed: u64) -> DeskRun {
    use hierdl_core::hierarchy::{evaluate, HierarchyBundle, RouteWidths, TestItem};
    use hierdl_core::network::builtin;
    use hierdl_core::synth;
    use hierdl_core::taxonomy::{build_htree, parse_isa_str, partition_leaves};
    use hierdl_core::training::{train_from, train_model, TrainRecipe};
    use rand::SeedableRng;

    let isa = parse_isa_str(&synth::shapes_isa_text()).unwrap();
    let synsets: Vec<SynsetId> = (0..16).map(synth::shape_synset).collect();
    let tree = build_htree(&synsets, &isa, 0).unwrap();
    let partition = partition_leaves(&tree, 4, 4).unwrap();
    let rid_lid = |class: usize| {
        let s = synth::shape_synset(class);
        (partition.rid_of(s).unwrap() as usize, partition.lid_of(s).unwrap() as usize)
    };

    let all = synth::shapes(200, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = synth::split_by_class(&all, 0.8).unwrap();
    let spec = |classes| builtin::named("desk").unwrap().with_class_count(classes).unwrap();
    let recipe = |s: u64| TrainRecipe { epochs: DESK_EPOCHS, lr: 0.05, batch_size: 32, seed: s, ..TrainRecipe::leaf_scratch() };

    let root_train = synth::select(&train, |c| Some(rid_lid(c).0 - 1)).unwrap();
    let root = train_model(&spec(partition.group_count()), &root_train, &recipe(seed)).unwrap().0;

    let mut leaves = BTreeMap::new();
    let mut crbm_leaves = BTreeMap::new();
    for rid in 1..=partition.group_count() as u32 {
        let size = partition.group(rid).unwrap().len();
        let leaf_train = synth::select(&train, |c| {
            let (r, l) = rid_lid(c);
            (r == rid as usize).then_some(l - 1)
        })
        .unwrap();
        let leaf_spec = spec(size);
        let r = recipe(seed.wrapping_mul(31).wrapping_add(rid as u64));
        leaves.insert(rid, train_model(&leaf_spec, &leaf_train, &r).unwrap().0);

        let g = crbm::CrbmGeometry { filters: 8, in_channels: 1, kernel_h: 3, kernel_w: 3, pool_block: 1 };
        let cfg = crbm::Cd1Config { epochs: 5, seed: r.seed, ..crbm::Cd1Config::default() };
        let (rbm, _) = crbm::train_crbm(&leaf_train.images, g, &cfg).unwrap();
        let fresh = hierdl_core::ModelState::init(&leaf_spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(r.seed)).unwrap();
        let init = crbm::transfer_to_cnn(&rbm, &fresh, 0).unwrap();
        crbm_leaves.insert(rid, train_from(init, &leaf_train, &r, |_| {}).unwrap().0);
    }

    let items: Vec<TestItem> = (0..test.len())
        .map(|i| TestItem {
            gid: partition.gid_of(synth::shape_synset(test.labels[i])).unwrap(),
            rid: None,
            image: Tensor::from_vec(&[1, 16, 16], test.images.item(i).to_vec()).unwrap(),
        })
        .collect();
    let eval = |leaves: &BTreeMap<u32, hierdl_core::ModelState>| {
        let bundle = HierarchyBundle::new(root.clone(), leaves.clone(), partition.clone()).unwrap();
        evaluate(&bundle, &items, RouteWidths::default(), 1).unwrap()
    };
    let report = eval(&leaves);
    let crbm_report = eval(&crbm_leaves);
    DeskRun { partition, root, leaves, report, crbm_leaves, crbm_report }
}
