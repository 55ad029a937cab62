//! Synset taxonomy: ISA-file parsing, deepest-branch trees with iterative
//! roll-up, and partitioning of synsets into leaf-model groups.
//!
//! Synset IDs double as a depth proxy: among the parents of a synset the one
//! with the largest numeric ID is taken to be the deepest, so following the
//! maximal parent repeatedly yields the deepest root-to-synset branch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A WordNet synset identifier, `n` followed by exactly eight decimal digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SynsetId(u32);

/// Parent given to synsets that appear nowhere in the ISA relation.
pub const SYNTHETIC_ROOT: SynsetId = SynsetId(0);

impl SynsetId {
    pub const MAX: u32 = 99_999_999;

    pub fn new(numeric: u32) -> Option<Self> {
        (numeric <= Self::MAX).then_some(SynsetId(numeric))
    }

    pub fn numeric(self) -> u32 {
        self.0
    }
}

impl fmt::Display for SynsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{:08}", self.0)
    }
}

impl fmt::Debug for SynsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for SynsetId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let digits = s
            .strip_prefix('n')
            .filter(|d| d.len() == 8 && d.bytes().all(|b| b.is_ascii_digit()))
            .ok_or_else(|| format!("malformed synset id {s:?}, expected n + 8 digits"))?;
        Ok(SynsetId(digits.parse().expect("eight ascii digits fit in u32")))
    }
}

impl TryFrom<String> for SynsetId {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<SynsetId> for String {
    fn from(s: SynsetId) -> String {
        s.to_string()
    }
}

/// Child → parents multimap read from an ISA relationship file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IsaMap {
    parents: BTreeMap<SynsetId, BTreeSet<SynsetId>>,
    nodes: BTreeSet<SynsetId>,
}

impl IsaMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a `parent → child` edge. Self-edges are rejected; cycles are only
    /// detected by [`IsaMap::check_acyclic`].
    pub fn insert(&mut self, parent: SynsetId, child: SynsetId) -> Result<()> {
        if parent == child {
            return Err(Error::Parse {
                line: 0,
                msg: format!("self-edge on {child}"),
            });
        }
        self.parents.entry(child).or_default().insert(parent);
        self.nodes.insert(parent);
        self.nodes.insert(child);
        Ok(())
    }

    pub fn parents_of(&self, s: SynsetId) -> impl Iterator<Item = SynsetId> + '_ {
        self.parents.get(&s).into_iter().flatten().copied()
    }

    pub fn contains(&self, s: SynsetId) -> bool {
        self.nodes.contains(&s)
    }

    pub fn nodes(&self) -> &BTreeSet<SynsetId> {
        &self.nodes
    }

    pub fn edge_count(&self) -> usize {
        self.parents.values().map(BTreeSet::len).sum()
    }

    /// Iterates `(parent, child)` edges ordered by child then parent.
    pub fn edges(&self) -> impl Iterator<Item = (SynsetId, SynsetId)> + '_ {
        self.parents
            .iter()
            .flat_map(|(&c, ps)| ps.iter().map(move |&p| (p, c)))
    }

    /// Fails with a cycle error naming one cycle if the child → parent graph
    /// is not a DAG.
    pub fn check_acyclic(&self) -> Result<()> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: BTreeMap<SynsetId, Mark> = BTreeMap::new();
        for &start in self.parents.keys() {
            if marks.contains_key(&start) {
                continue;
            }
            // Explicit stack of (node, remaining parents) keeps deep chains off the call stack.
            let mut path: Vec<SynsetId> = vec![start];
            let mut stack: Vec<Vec<SynsetId>> = vec![self.parents_of(start).collect()];
            marks.insert(start, Mark::Open);
            while let Some(pending) = stack.last_mut() {
                match pending.pop() {
                    Some(next) => match marks.get(&next) {
                        Some(Mark::Done) => {}
                        Some(Mark::Open) => {
                            let from = path.iter().position(|&n| n == next).unwrap_or(0);
                            let mut cycle: Vec<String> =
                                path[from..].iter().map(ToString::to_string).collect();
                            cycle.push(next.to_string());
                            return Err(Error::Cycle(cycle.join(" -> ")));
                        }
                        None => {
                            marks.insert(next, Mark::Open);
                            path.push(next);
                            stack.push(self.parents_of(next).collect());
                        }
                    },
                    None => {
                        let done = path.pop().expect("path tracks stack");
                        marks.insert(done, Mark::Done);
                        stack.pop();
                    }
                }
            }
        }
        Ok(())
    }

    /// One `parent child` line per edge, in [`IsaMap::edges`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, c) in self.edges() {
            out.push_str(&format!("{p} {c}\n"));
        }
        out
    }
}

/// Parses an ISA relationship stream: one `parent child` pair per line,
/// whitespace separated. Blank lines and lines starting with `#` are skipped.
pub fn parse_isa_map<R: BufRead>(reader: R) -> Result<IsaMap> {
    let mut map = IsaMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading ISA line {lineno}"), e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected \"parent child\", got {} tokens", tokens.len()),
            });
        }
        let parse = |t: &str| {
            t.parse::<SynsetId>()
                .map_err(|msg| Error::Parse { line: lineno, msg })
        };
        let (parent, child) = (parse(tokens[0])?, parse(tokens[1])?);
        map.insert(parent, child).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { line: lineno, msg },
            other => other,
        })?;
    }
    map.check_acyclic()?;
    Ok(map)
}

pub fn parse_isa_str(text: &str) -> Result<IsaMap> {
    parse_isa_map(text.as_bytes())
}

/// Reads a synset list: one id per line, `#` comments and blank lines skipped.
pub fn parse_synset_list<R: BufRead>(reader: R) -> Result<Vec<SynsetId>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading synset list", e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.parse().map_err(|msg| Error::Parse { line: idx + 1, msg })?);
    }
    Ok(out)
}

/// The parent of `s` with the largest numeric ID.
pub fn closest_parent(s: SynsetId, m: &IsaMap) -> Option<SynsetId> {
    m.parents.get(&s).and_then(|ps| ps.last().copied())
}

/// Root-to-`s` path built by repeatedly stepping to the closest parent.
pub fn deepest_branch(s: SynsetId, m: &IsaMap) -> Result<Vec<SynsetId>> {
    let limit = m.nodes.len() + 1;
    let mut branch = vec![s];
    let mut cur = s;
    while let Some(p) = closest_parent(cur, m) {
        if branch.len() > limit {
            return Err(Error::Cycle(format!("deepest branch of {s} does not terminate")));
        }
        branch.push(p);
        cur = p;
    }
    branch.reverse();
    Ok(branch)
}

/// Forest of synsets produced by the union of deepest branches followed by
/// `iteration` roll-up passes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HierarchyTree {
    pub nodes: BTreeSet<SynsetId>,
    pub parent: BTreeMap<SynsetId, SynsetId>,
    pub members: BTreeMap<SynsetId, Vec<SynsetId>>,
    pub iteration: usize,
    pub warnings: Vec<String>,
}

impl HierarchyTree {
    pub fn children(&self) -> BTreeMap<SynsetId, Vec<SynsetId>> {
        let mut kids: BTreeMap<SynsetId, Vec<SynsetId>> = BTreeMap::new();
        for (&c, &p) in &self.parent {
            kids.entry(p).or_default().push(c);
        }
        kids
    }

    pub fn roots(&self) -> Vec<SynsetId> {
        self.nodes
            .iter()
            .copied()
            .filter(|n| !self.parent.contains_key(n))
            .collect()
    }

    /// Number of parent links from `node` to its root.
    pub fn depth_of(&self, node: SynsetId) -> usize {
        let mut d = 0;
        let mut cur = node;
        while let Some(&p) = self.parent.get(&cur) {
            d += 1;
            cur = p;
        }
        d
    }

    pub fn depths(&self) -> BTreeMap<SynsetId, usize> {
        let mut depths = BTreeMap::new();
        for &n in &self.nodes {
            depth_memo(self, n, &mut depths);
        }
        depths
    }

    pub fn max_depth(&self) -> usize {
        self.depths().values().copied().max().unwrap_or(0)
    }

    pub fn members_of(&self, node: SynsetId) -> &[SynsetId] {
        self.members.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All members in the subtree rooted at `node`, node first then children
    /// in ID order.
    pub fn subtree_members(&self, node: SynsetId) -> Vec<SynsetId> {
        let kids = self.children();
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            out.extend_from_slice(self.members_of(n));
            if let Some(cs) = kids.get(&n) {
                stack.extend(cs.iter().rev());
            }
        }
        out
    }

    pub fn member_count(&self) -> usize {
        self.members.values().map(Vec::len).sum()
    }

    /// Removes every node at the current maximum depth, appending its members
    /// to its parent's. Returns false when the tree is already a single level.
    pub fn roll_up_once(&mut self) -> bool {
        let depths = self.depths();
        let max = depths.values().copied().max().unwrap_or(0);
        if max == 0 {
            return false;
        }
        // Nodes at the maximum depth are necessarily leaves; BTreeMap order
        // gives child-ID order within each parent.
        for (&node, _) in depths.iter().filter(|(_, &d)| d == max) {
            let parent = self.parent.remove(&node).expect("non-root has a parent");
            let moved = self.members.remove(&node).unwrap_or_default();
            self.members.entry(parent).or_default().extend(moved);
            self.nodes.remove(&node);
        }
        self.iteration += 1;
        true
    }

    pub fn to_json(&self) -> String {
        let file = TreeFile {
            iteration: self.iteration,
            nodes: self
                .nodes
                .iter()
                .map(|&id| TreeNodeRecord {
                    id,
                    parent: self.parent.get(&id).copied(),
                    members: self.members_of(id).to_vec(),
                })
                .collect(),
            warnings: self.warnings.clone(),
        };
        serde_json::to_string_pretty(&file).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TreeFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("tree file: {e}")))?;
        let mut tree = HierarchyTree {
            iteration: file.iteration,
            warnings: file.warnings,
            ..Default::default()
        };
        for rec in file.nodes {
            if !tree.nodes.insert(rec.id) {
                return Err(Error::Config(format!("tree file: duplicate node {}", rec.id)));
            }
            if let Some(p) = rec.parent {
                tree.parent.insert(rec.id, p);
            }
            tree.members.insert(rec.id, rec.members);
        }
        if let Some((c, p)) = tree.parent.iter().find(|(_, p)| !tree.nodes.contains(p)) {
            return Err(Error::Config(format!("tree file: parent {p} of {c} is not a node")));
        }
        Ok(tree)
    }
}

fn depth_memo(tree: &HierarchyTree, node: SynsetId, memo: &mut BTreeMap<SynsetId, usize>) -> usize {
    if let Some(&d) = memo.get(&node) {
        return d;
    }
    let mut chain = vec![node];
    let mut base = 0;
    let mut cur = node;
    while let Some(&p) = tree.parent.get(&cur) {
        if let Some(&d) = memo.get(&p) {
            base = d + 1;
            break;
        }
        chain.push(p);
        cur = p;
    }
    // chain runs from node towards the root; the last entry is either a root or
    // the child of a memoized node.
    for (i, &n) in chain.iter().rev().enumerate() {
        memo.insert(n, base + i);
    }
    memo[&node]
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    iteration: usize,
    nodes: Vec<TreeNodeRecord>,
    #[serde(default)]
    warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TreeNodeRecord {
    id: SynsetId,
    parent: Option<SynsetId>,
    members: Vec<SynsetId>,
}

/// Builds the union of deepest branches for `synsets`, then performs up to
/// `iterations` roll-up passes, deepest level first.
pub fn build_htree(synsets: &[SynsetId], m: &IsaMap, iterations: usize) -> Result<HierarchyTree> {
    let mut tree = HierarchyTree::default();
    let mut seen = BTreeSet::new();
    for &s in synsets {
        if !seen.insert(s) {
            tree.warnings.push(format!("duplicate synset {s} ignored"));
            continue;
        }
        if m.contains(s) {
            let branch = deepest_branch(s, m)?;
            for pair in branch.windows(2) {
                tree.parent.insert(pair[1], pair[0]);
            }
            tree.nodes.extend(branch);
        } else {
            tree.warnings
                .push(format!("{s} not in ISA map, attached under {SYNTHETIC_ROOT}"));
            tree.nodes.insert(SYNTHETIC_ROOT);
            tree.nodes.insert(s);
            tree.parent.insert(s, SYNTHETIC_ROOT);
        }
        tree.members.insert(s, vec![s]);
    }
    for w in &tree.warnings {
        warn!("{w}");
    }
    for &n in &tree.nodes {
        tree.members.entry(n).or_default();
    }
    for _ in 0..iterations {
        if !tree.roll_up_once() {
            break;
        }
    }
    Ok(tree)
}

/// Synsets grouped into leaf models with their RID / LID / GID labels.
///
/// RIDs index `leaves` (1-based); a synset's LID is its 1-based position in its
/// group; GIDs number all synsets 1..=N.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafPartition {
    leaves: Vec<Vec<SynsetId>>,
    rid_of: BTreeMap<SynsetId, u32>,
    lid_of: BTreeMap<SynsetId, u32>,
    gid_of: BTreeMap<SynsetId, u32>,
    by_gid: Vec<SynsetId>,
    pub warnings: Vec<String>,
}

impl LeafPartition {
    /// Canonical labelling: groups sorted internally, RIDs by descending size
    /// (ties by smallest member), GIDs by global synset order.
    pub fn from_groups(groups: Vec<Vec<SynsetId>>) -> Result<Self> {
        let mut groups: Vec<Vec<SynsetId>> = groups
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|mut g| {
                g.sort();
                g
            })
            .collect();
        groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        let mut all: Vec<SynsetId> = groups.iter().flatten().copied().collect();
        all.sort();
        let gid_of = all
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i as u32 + 1))
            .collect();
        Self::with_labels(groups, gid_of)
    }

    /// Builds a partition from explicit RID order (index + 1), LID order
    /// (position + 1) and GID assignment, validating the bijections.
    pub fn with_labels(
        leaves: Vec<Vec<SynsetId>>,
        gid_of: BTreeMap<SynsetId, u32>,
    ) -> Result<Self> {
        let mut rid_of = BTreeMap::new();
        let mut lid_of = BTreeMap::new();
        for (r, group) in leaves.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Config(format!("leaf group {} is empty", r + 1)));
            }
            for (l, &s) in group.iter().enumerate() {
                if rid_of.insert(s, r as u32 + 1).is_some() {
                    return Err(Error::Config(format!("{s} appears in more than one group")));
                }
                lid_of.insert(s, l as u32 + 1);
            }
        }
        let n = rid_of.len();
        if gid_of.len() != n || rid_of.keys().any(|s| !gid_of.contains_key(s)) {
            return Err(Error::Config("GID map does not cover exactly the grouped synsets".into()));
        }
        let mut by_gid = vec![None; n];
        for (&s, &g) in &gid_of {
            let slot = (g as usize)
                .checked_sub(1)
                .and_then(|i| by_gid.get_mut(i))
                .ok_or(Error::UnknownGid(g))?;
            if slot.replace(s).is_some() {
                return Err(Error::Config(format!("GID {g} assigned twice")));
            }
        }
        Ok(LeafPartition {
            leaves,
            rid_of,
            lid_of,
            gid_of,
            by_gid: by_gid.into_iter().map(|s| s.expect("bijection checked")).collect(),
            warnings: Vec::new(),
        })
    }

    pub fn leaves(&self) -> &[Vec<SynsetId>] {
        &self.leaves
    }

    pub fn group_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn synset_count(&self) -> usize {
        self.by_gid.len()
    }

    pub fn group(&self, rid: u32) -> Option<&[SynsetId]> {
        (rid as usize)
            .checked_sub(1)
            .and_then(|i| self.leaves.get(i))
            .map(Vec::as_slice)
    }

    pub fn rid_of(&self, s: SynsetId) -> Option<u32> {
        self.rid_of.get(&s).copied()
    }

    pub fn lid_of(&self, s: SynsetId) -> Option<u32> {
        self.lid_of.get(&s).copied()
    }

    pub fn gid_of(&self, s: SynsetId) -> Option<u32> {
        self.gid_of.get(&s).copied()
    }

    pub fn synset_of_gid(&self, gid: u32) -> Option<SynsetId> {
        (gid as usize)
            .checked_sub(1)
            .and_then(|i| self.by_gid.get(i))
            .copied()
    }

    /// GID of the `lid`-th synset of group `rid`.
    pub fn gid(&self, rid: u32, lid: u32) -> Option<u32> {
        let s = *self.group(rid)?.get((lid as usize).checked_sub(1)?)?;
        self.gid_of(s)
    }

    pub fn rid_lid_of_gid(&self, gid: u32) -> Option<(u32, u32)> {
        let s = self.synset_of_gid(gid)?;
        Some((self.rid_of[&s], self.lid_of[&s]))
    }

    pub fn to_json(&self) -> String {
        let file = PartitionFile {
            groups: self
                .leaves
                .iter()
                .enumerate()
                .map(|(r, g)| GroupRecord {
                    rid: r as u32 + 1,
                    synsets: g
                        .iter()
                        .enumerate()
                        .map(|(l, &s)| MemberRecord {
                            id: s,
                            lid: l as u32 + 1,
                            gid: self.gid_of[&s],
                        })
                        .collect(),
                })
                .collect(),
            warnings: self.warnings.clone(),
        };
        serde_json::to_string_pretty(&file).expect("partition serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: PartitionFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("partition file: {e}")))?;
        file.groups.sort_by_key(|g| g.rid);
        let mut leaves = Vec::new();
        let mut gid_of = BTreeMap::new();
        for (i, mut g) in file.groups.into_iter().enumerate() {
            if g.rid as usize != i + 1 {
                return Err(Error::Config(format!("partition file: RIDs not contiguous at {}", g.rid)));
            }
            g.synsets.sort_by_key(|m| m.lid);
            for (j, m) in g.synsets.iter().enumerate() {
                if m.lid as usize != j + 1 {
                    return Err(Error::Config(format!(
                        "partition file: LIDs of RID {} not contiguous at {}",
                        g.rid, m.lid
                    )));
                }
                gid_of.insert(m.id, m.gid);
            }
            leaves.push(g.synsets.into_iter().map(|m| m.id).collect());
        }
        let mut p = Self::with_labels(leaves, gid_of)?;
        p.warnings = file.warnings;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    groups: Vec<GroupRecord>,
    #[serde(default)]
    warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GroupRecord {
    rid: u32,
    synsets: Vec<MemberRecord>,
}

#[derive(Serialize, Deserialize)]
struct MemberRecord {
    id: SynsetId,
    lid: u32,
    gid: u32,
}

/// Splits the tree into leaf groups of at most `max_leaf_size` synsets.
///
/// Top-level subtrees that fit become groups; oversized subtrees are split
/// along child boundaries, a node's own members forming their own chunk(s).
/// Groups smaller than `min_leaf_size` are merged with the smallest sibling
/// that keeps the result within bounds; leftovers bubble up one level and are
/// emitted with a warning if still unmergeable at the top.
pub fn partition_leaves(
    tree: &HierarchyTree,
    max_leaf_size: usize,
    min_leaf_size: usize,
) -> Result<LeafPartition> {
    if min_leaf_size < 1 || max_leaf_size < min_leaf_size {
        return Err(Error::Config(format!(
            "need max_leaf_size >= min_leaf_size >= 1, got max {max_leaf_size} min {min_leaf_size}"
        )));
    }
    let splitter = Splitter {
        tree,
        children: tree.children(),
        sizes: subtree_sizes(tree),
        max: max_leaf_size,
        min: min_leaf_size,
    };
    let roots = tree.roots();
    let (mut groups, small) = splitter.split(&[], &roots);
    let mut warnings = Vec::new();
    for g in small {
        let msg = format!(
            "group of {} synsets starting at {} is below min_leaf_size {} with no merge partner",
            g.len(),
            g.iter().min().expect("non-empty"),
            min_leaf_size
        );
        warn!("{msg}");
        warnings.push(msg);
        groups.push(g);
    }
    let mut partition = LeafPartition::from_groups(groups)?;
    partition.warnings = warnings;
    Ok(partition)
}

fn subtree_sizes(tree: &HierarchyTree) -> BTreeMap<SynsetId, usize> {
    let depths = tree.depths();
    let mut order: Vec<(usize, SynsetId)> = depths.iter().map(|(&n, &d)| (d, n)).collect();
    order.sort_by(|a, b| b.cmp(a));
    let mut sizes: BTreeMap<SynsetId, usize> = BTreeMap::new();
    for (_, n) in order {
        let own = tree.members_of(n).len();
        let total = own + sizes.get(&n).copied().unwrap_or(0);
        sizes.insert(n, total);
        if let Some(&p) = tree.parent.get(&n) {
            *sizes.entry(p).or_default() += total;
        }
    }
    sizes
}

struct Splitter<'a> {
    tree: &'a HierarchyTree,
    children: BTreeMap<SynsetId, Vec<SynsetId>>,
    sizes: BTreeMap<SynsetId, usize>,
    max: usize,
    min: usize,
}

impl Splitter<'_> {
    /// Returns (final groups, undersized groups still looking for a partner).
    fn split(&self, own: &[SynsetId], kids: &[SynsetId]) -> (Vec<Vec<SynsetId>>, Vec<Vec<SynsetId>>) {
        let mut finals = Vec::new();
        let mut pool = balanced_chunks(own, self.max);
        for &kid in kids {
            let size = self.sizes.get(&kid).copied().unwrap_or(0);
            if size == 0 {
                continue;
            }
            if size <= self.max {
                pool.push(self.tree.subtree_members(kid));
            } else {
                let grandkids = self.children.get(&kid).map(Vec::as_slice).unwrap_or(&[]);
                let (f, small) = self.split(self.tree.members_of(kid), grandkids);
                finals.extend(f);
                pool.extend(small);
            }
        }
        let (f, small) = merge_undersized(pool, self.min, self.max);
        finals.extend(f);
        (finals, small)
    }
}

fn balanced_chunks(items: &[SynsetId], max: usize) -> Vec<Vec<SynsetId>> {
    if items.is_empty() {
        return Vec::new();
    }
    let mut sorted = items.to_vec();
    sorted.sort();
    let n_chunks = sorted.len().div_ceil(max);
    let base = sorted.len() / n_chunks;
    let extra = sorted.len() % n_chunks;
    let mut out = Vec::with_capacity(n_chunks);
    let mut start = 0;
    for i in 0..n_chunks {
        let len = base + usize::from(i < extra);
        out.push(sorted[start..start + len].to_vec());
        start += len;
    }
    out
}

fn merge_undersized(
    pool: Vec<Vec<SynsetId>>,
    min: usize,
    max: usize,
) -> (Vec<Vec<SynsetId>>, Vec<Vec<SynsetId>>) {
    let key = |g: &Vec<SynsetId>| (g.len(), g.iter().min().copied());
    let mut pool: Vec<(Vec<SynsetId>, bool)> = pool.into_iter().map(|g| (g, false)).collect();
    loop {
        let Some(i) = (0..pool.len())
            .filter(|&i| pool[i].0.len() < min && !pool[i].1)
            .min_by_key(|&i| key(&pool[i].0))
        else {
            break;
        };
        let need = pool[i].0.len();
        let partner = (0..pool.len())
            .filter(|&j| j != i && pool[j].0.len() + need <= max)
            .min_by_key(|&j| key(&pool[j].0));
        match partner {
            Some(j) => {
                let (other, _) = pool.swap_remove(j);
                // swap_remove may have moved i into slot j.
                let i = if i == pool.len() { j } else { i };
                pool[i].0.extend(other);
                pool[i].0.sort();
            }
            None => pool[i].1 = true,
        }
    }
    pool.into_iter()
        .map(|(g, _)| g)
        .partition(|g| g.len() >= min)
}
