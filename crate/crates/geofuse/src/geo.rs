//! Spatial indexing over projected planar coordinates.
//!
//! Exact k-nearest-neighbour queries (k-d tree with a contract of equality to
//! brute force), spatial block splitting for leakage-free evaluation, and
//! neighbour-distance statistics. Coordinates are Euclidean meters in one
//! projected reference system; no geodesic math anywhere.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub east: f64,
    pub north: f64,
}

impl GeoPoint {
    pub fn new(east: f64, north: f64) -> Self {
        GeoPoint { east, north }
    }

    pub fn distance_sq(&self, other: &GeoPoint) -> f64 {
        let de = self.east - other.east;
        let dn = self.north - other.north;
        de * de + dn * dn
    }

    pub fn distance(&self, other: &GeoPoint) -> f64 {
        self.distance_sq(other).sqrt()
    }

    fn coord(&self, dim: u8) -> f64 {
        if dim == 0 {
            self.east
        } else {
            self.north
        }
    }
}

/// Nearest neighbours of one sample, sorted by (distance, id) ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborList {
    pub origin_id: usize,
    /// `(sample id, distance in meters)`, non-decreasing distances.
    pub neighbors: Vec<(usize, f64)>,
    /// True when fewer than the requested k neighbours were eligible.
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// Assignment of every sample to a split, constant within each spatial block.
/// Both maps are ordered so serialized splits are byte-stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSplit {
    pub block_size_m: f64,
    pub min_east: f64,
    pub min_north: f64,
    pub assignment: BTreeMap<usize, Split>,
    /// `(block_row, block_col)` → split; row indexes north, col indexes east.
    #[serde(with = "grid_key")]
    pub block_grid: BTreeMap<(i64, i64), Split>,
}

/// JSON object keys must be strings, so grid cells serialize as "row,col".
mod grid_key {
    use super::Split;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(i64, i64), Split>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, Split> =
            map.iter().map(|((r, c), v)| (format!("{r},{c}"), *v)).collect();
        keyed.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(i64, i64), Split>, D::Error> {
        let keyed = BTreeMap::<String, Split>::deserialize(d)?;
        keyed
            .into_iter()
            .map(|(k, v)| {
                let (r, c) = k
                    .split_once(',')
                    .ok_or_else(|| D::Error::custom("block key must be 'row,col'"))?;
                let r = r.parse().map_err(D::Error::custom)?;
                let c = c.parse().map_err(D::Error::custom)?;
                Ok(((r, c), v))
            })
            .collect()
    }
}

impl BlockSplit {
    pub fn split_of(&self, id: usize) -> Option<Split> {
        self.assignment.get(&id).copied()
    }

    pub fn block_of(&self, p: &GeoPoint) -> (i64, i64) {
        let row = ((p.north - self.min_north) / self.block_size_m).floor() as i64;
        let col = ((p.east - self.min_east) / self.block_size_m).floor() as i64;
        (row, col)
    }

    /// Sample ids of one split, ascending.
    pub fn ids_in(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        ids
    }
}

#[derive(Debug)]
struct KdNode {
    slot: usize,
    dim: u8,
    left: i32,
    right: i32,
}

/// Immutable exact-kNN index. Safe for concurrent read-only queries.
#[derive(Debug)]
pub struct SpatialIndex {
    points: Vec<GeoPoint>,
    ids: Vec<usize>,
    id_to_slot: HashMap<usize, usize>,
    nodes: Vec<KdNode>,
    root: i32,
}

/// Candidate ordered by (squared distance, id); the heap's max is the
/// current worst of the best-k, so smaller compares as better.
#[derive(PartialEq)]
struct Cand {
    d2: f64,
    id: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .expect("non-finite distance")
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn build_index(points: &[(usize, GeoPoint)]) -> Result<SpatialIndex> {
    if points.is_empty() {
        return Err(Error::data("cannot index zero points"));
    }
    let mut id_to_slot = HashMap::with_capacity(points.len());
    let mut ids = Vec::with_capacity(points.len());
    let mut pts = Vec::with_capacity(points.len());
    for (slot, (id, p)) in points.iter().enumerate() {
        if !p.east.is_finite() || !p.north.is_finite() {
            return Err(Error::data(format!("non-finite coordinate for id {id}")));
        }
        if id_to_slot.insert(*id, slot).is_some() {
            return Err(Error::data(format!("duplicate sample id {id}")));
        }
        ids.push(*id);
        pts.push(*p);
    }
    let mut slots: Vec<usize> = (0..points.len()).collect();
    let mut nodes = Vec::with_capacity(points.len());
    let root = build_subtree(&mut slots, 0, &pts, &ids, &mut nodes);
    Ok(SpatialIndex {
        points: pts,
        ids,
        id_to_slot,
        nodes,
        root,
    })
}

fn build_subtree(
    slots: &mut [usize],
    dim: u8,
    points: &[GeoPoint],
    ids: &[usize],
    nodes: &mut Vec<KdNode>,
) -> i32 {
    if slots.is_empty() {
        return -1;
    }
    // Total order (coordinate, id) keeps the build deterministic under ties.
    slots.sort_unstable_by(|&a, &b| {
        points[a]
            .coord(dim)
            .partial_cmp(&points[b].coord(dim))
            .expect("non-finite coordinate")
            .then(ids[a].cmp(&ids[b]))
    });
    let mid = slots.len() / 2;
    let idx = nodes.len();
    nodes.push(KdNode {
        slot: slots[mid],
        dim,
        left: -1,
        right: -1,
    });
    let (left_slots, rest) = slots.split_at_mut(mid);
    let right_slots = &mut rest[1..];
    let left = build_subtree(left_slots, dim ^ 1, points, ids, nodes);
    let right = build_subtree(right_slots, dim ^ 1, points, ids, nodes);
    nodes[idx].left = left;
    nodes[idx].right = right;
    idx as i32
}

impl SpatialIndex {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.id_to_slot.contains_key(&id)
    }

    pub fn point(&self, id: usize) -> Option<&GeoPoint> {
        self.id_to_slot.get(&id).map(|&s| &self.points[s])
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }

    /// k nearest other samples of `origin_id`, every sample eligible.
    pub fn query_knn(&self, origin_id: usize, k: usize) -> Result<NeighborList> {
        self.query_knn_filtered(origin_id, k, |_| true)
    }

    /// k nearest other samples for which `eligible` holds. Exactly equal to
    /// brute-force search sorted by (distance, id); short lists are flagged,
    /// not errors.
    pub fn query_knn_filtered(
        &self,
        origin_id: usize,
        k: usize,
        eligible: impl Fn(usize) -> bool,
    ) -> Result<NeighborList> {
        let &slot = self
            .id_to_slot
            .get(&origin_id)
            .ok_or_else(|| Error::data(format!("unknown origin id {origin_id}")))?;
        let query = self.points[slot];
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(self.root, &query, origin_id, k, &eligible, &mut heap);
        }
        let mut found: Vec<Cand> = heap.into_vec();
        found.sort_unstable();
        let truncated = found.len() < k;
        let neighbors = found
            .into_iter()
            .map(|c| (c.id, c.d2.sqrt()))
            .collect();
        Ok(NeighborList {
            origin_id,
            neighbors,
            truncated,
        })
    }

    fn search(
        &self,
        node_idx: i32,
        query: &GeoPoint,
        origin_id: usize,
        k: usize,
        eligible: &impl Fn(usize) -> bool,
        heap: &mut BinaryHeap<Cand>,
    ) {
        if node_idx < 0 {
            return;
        }
        let node = &self.nodes[node_idx as usize];
        let p = &self.points[node.slot];
        let id = self.ids[node.slot];
        if id != origin_id && eligible(id) {
            let cand = Cand {
                d2: p.distance_sq(query),
                id,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let diff = query.coord(node.dim) - p.coord(node.dim);
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, query, origin_id, k, eligible, heap);
        // Descend the far side unless every point there is strictly worse
        // than the current k-th best; on equal distance a smaller id could
        // still win, so prune only on strict inequality.
        let must_check_far = heap.len() < k
            || heap
                .peek()
                .map(|worst| diff * diff <= worst.d2)
                .unwrap_or(true);
        if must_check_far {
            self.search(far, query, origin_id, k, eligible, heap);
        }
    }
}

/// Assign every sample to train/val/test by seeded shuffle of the non-empty
/// spatial blocks, with block counts apportioned to the requested fractions
/// by largest remainder.
pub fn block_split(
    points: &[(usize, GeoPoint)],
    block_size_m: f64,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<BlockSplit> {
    if points.is_empty() {
        return Err(Error::data("cannot split zero samples"));
    }
    if !(block_size_m > 0.0) {
        return Err(Error::config("block size must be positive"));
    }
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split fractions must be positive and sum to 1",
        ));
    }
    let min_east = points.iter().map(|(_, p)| p.east).fold(f64::INFINITY, f64::min);
    let min_north = points.iter().map(|(_, p)| p.north).fold(f64::INFINITY, f64::min);
    let block_of = |p: &GeoPoint| -> (i64, i64) {
        let row = ((p.north - min_north) / block_size_m).floor() as i64;
        let col = ((p.east - min_east) / block_size_m).floor() as i64;
        (row, col)
    };

    // Non-empty blocks in (row, col) order, then a seeded shuffle.
    let mut blocks: Vec<(i64, i64)> = Vec::new();
    {
        let mut seen = BTreeMap::new();
        for (_, p) in points {
            seen.entry(block_of(p)).or_insert(());
        }
        blocks.extend(seen.keys().copied());
    }
    let mut rng = stream(seed, "block-split", 0);
    shuffle(&mut blocks, &mut rng);

    let counts = apportion(blocks.len(), [ft, fv, fe]);
    let mut block_grid = BTreeMap::new();
    let mut cursor = 0;
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for block in &blocks[cursor..cursor + count] {
            block_grid.insert(*block, split);
        }
        cursor += count;
    }

    let mut assignment = BTreeMap::new();
    for (id, p) in points {
        assignment.insert(*id, block_grid[&block_of(p)]);
    }
    Ok(BlockSplit {
        block_size_m,
        min_east,
        min_north,
        assignment,
        block_grid,
    })
}

/// Largest-remainder apportionment of `n` items to three fractions; ties on
/// remainder go to the earlier class.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(3);
    let mut assigned = 0;
    for (i, f) in fractions.into_iter().enumerate() {
        let quota = f * n as f64;
        counts[i] = quota.floor() as usize;
        assigned += counts[i];
        remainders.push((quota - quota.floor(), i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (_, i) in remainders.into_iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Fisher–Yates with the crate's deterministic generator.
fn shuffle<T>(items: &mut [T], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Distance statistics for the rank-th nearest neighbour, rank = 1..=k_max.
#[derive(Clone, Debug, PartialEq)]
pub struct RankDistanceStats {
    pub rank: usize,
    pub count: usize,
    pub mean: f64,
    /// One value per requested percentile, same order as the request.
    pub percentile_values: Vec<f64>,
}

/// Mean and percentiles of the distance to each neighbour rank over `ids`.
/// Samples with fewer than `k_max` neighbours contribute only to the ranks
/// they possess; ranks possessed by nobody are omitted.
pub fn knn_distance_stats(
    index: &SpatialIndex,
    ids: &[usize],
    k_max: usize,
    percentiles: &[f64],
) -> Result<Vec<RankDistanceStats>> {
    if k_max == 0 {
        return Err(Error::config("k_max must be at least 1"));
    }
    let mut per_rank: Vec<Vec<f64>> = vec![Vec::new(); k_max];
    for &id in ids {
        let list = index.query_knn(id, k_max)?;
        for (rank0, (_, d)) in list.neighbors.iter().enumerate() {
            per_rank[rank0].push(*d);
        }
    }
    let mut out = Vec::new();
    for (rank0, mut dists) in per_rank.into_iter().enumerate() {
        if dists.is_empty() {
            continue;
        }
        dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let percentile_values = percentiles
            .iter()
            .map(|&p| percentile(&dists, p))
            .collect();
        out.push(RankDistanceStats {
            rank: rank0 + 1,
            count: dists.len(),
            mean,
            percentile_values,
        });
    }
    Ok(out)
}

/// Linear-interpolation percentile of a sorted slice; `p` in [0, 100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}
