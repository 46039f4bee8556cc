//! Geometric clustering of scattered locations: the cluster tree over the
//! index set and the block cluster tree over index pairs, whose admissible
//! blocks drive low-rank compression.

use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::rng;
use std::collections::HashMap;

/// Ordered list of d-dimensional locations (d = 2 or 3) together with the
/// permutation induced by cluster-tree construction.
///
/// Coordinates are kept in their original input order; `perm` maps an
/// original index to its tree-ordered position. Points are stored padded to
/// three coordinates (z = 0 in 2-D) so distance loops are branch-free.
#[derive(Debug, Clone)]
pub struct PointSet {
    coords: Vec<[f64; 3]>,
    dim: usize,
    perm: Vec<u32>,
    inv_perm: Vec<u32>,
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let dim = points[0].len();
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidParameter(format!(
                "spatial dimension must be 2 or 3, got {dim}"
            )));
        }
        let mut coords = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFiniteCoordinate { index: i });
            }
            let mut c = [0.0; 3];
            c[..dim].copy_from_slice(p);
            coords.push(c);
        }
        let n = coords.len();
        Ok(PointSet {
            coords,
            dim,
            perm: (0..n as u32).collect(),
            inv_perm: (0..n as u32).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Coordinates of the point with original index `i`.
    pub fn point(&self, i: usize) -> [f64; 3] {
        self.coords[i]
    }

    /// Original index -> tree-ordered position.
    pub fn perm(&self) -> &[u32] {
        &self.perm
    }

    /// Tree-ordered position -> original index.
    pub fn inv_perm(&self) -> &[u32] {
        &self.inv_perm
    }

    /// Reorder a vector given in original order into tree order.
    pub fn permute_to_tree_order(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: z.len() });
        }
        let mut out = vec![0.0; z.len()];
        for (i, &zi) in z.iter().enumerate() {
            out[self.perm[i] as usize] = zi;
        }
        Ok(out)
    }

    /// Inverse of [`permute_to_tree_order`].
    pub fn permute_to_original_order(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: z.len() });
        }
        let mut out = vec![0.0; z.len()];
        for i in 0..z.len() {
            out[i] = z[self.perm[i] as usize];
        }
        Ok(out)
    }

    fn set_tree_order(&mut self, order: Vec<u32>) {
        debug_assert_eq!(order.len(), self.coords.len());
        let mut perm = vec![0u32; order.len()];
        for (t, &orig) in order.iter().enumerate() {
            perm[orig as usize] = t as u32;
        }
        self.perm = perm;
        self.inv_perm = order;
    }
}

/// Node of the binary cluster tree: an index range [lo, hi) over the
/// tree-ordered points plus its axis-aligned bounding box.
#[derive(Debug, Clone)]
pub struct ClusterNode {
    pub lo: usize,
    pub hi: usize,
    pub bb_min: [f64; 3],
    pub bb_max: [f64; 3],
    pub children: Option<[u32; 2]>,
    pub level: u32,
}

impl ClusterNode {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    /// Bounding-box diameter (diagonal length).
    pub fn diam(&self) -> f64 {
        let mut s = 0.0;
        for k in 0..3 {
            let e = self.bb_max[k] - self.bb_min[k];
            s += e * e;
        }
        s.sqrt()
    }

    /// Distance between the bounding boxes of two nodes (0 if they overlap).
    pub fn dist(&self, other: &ClusterNode) -> f64 {
        let mut s = 0.0;
        for k in 0..3 {
            let g = (self.bb_min[k] - other.bb_max[k]).max(other.bb_min[k] - self.bb_max[k]).max(0.0);
            s += g * g;
        }
        s.sqrt()
    }
}

/// Binary geometric cluster tree built by median bisection.
#[derive(Debug, Clone)]
pub struct ClusterTree {
    nodes: Vec<ClusterNode>,
    n_min: usize,
    dim: usize,
    /// Coordinates in tree order, for cache-friendly kernel evaluation.
    ord_coords: Vec<[f64; 3]>,
    leaf_count: usize,
}

impl ClusterTree {
    pub fn root(&self) -> u32 {
        0
    }

    pub fn node(&self, id: u32) -> &ClusterNode {
        &self.nodes[id as usize]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn n_min(&self) -> usize {
        self.n_min
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ord_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ord_coords.is_empty()
    }

    /// Coordinates of the point at tree position `t`.
    pub fn tree_point(&self, t: usize) -> [f64; 3] {
        self.ord_coords[t]
    }

    pub fn tree_points(&self) -> &[[f64; 3]] {
        &self.ord_coords
    }

    pub fn depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0) + 1
    }

    /// Structure hash over the tree geometry and ordering; used to key
    /// factorization caches and to fingerprint dump files.
    pub fn structural_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.nodes.len() * 16 + 16);
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.n_min as u64).to_le_bytes());
        for n in &self.nodes {
            bytes.extend_from_slice(&(n.lo as u64).to_le_bytes());
            bytes.extend_from_slice(&(n.hi as u64).to_le_bytes());
            bytes.push(n.children.is_some() as u8);
        }
        for c in &self.ord_coords {
            for k in 0..3 {
                bytes.extend_from_slice(&c[k].to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

fn bbox_of(coords: &[[f64; 3]], order: &[u32]) -> Result<([f64; 3], [f64; 3])> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order {
        let p = coords[i as usize];
        for k in 0..3 {
            if !p[k].is_finite() {
                return Err(Error::NonFiniteCoordinate { index: i as usize });
            }
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    Ok((lo, hi))
}

/// Build the cluster tree over `points` by median bisection along the longest
/// bounding-box axis, and update `points.perm` to the in-order leaf traversal.
///
/// Ties in the median coordinate are broken by original index, which makes
/// the resulting ordering canonical: it is the unique sort by
/// (split-axis coordinate, original index) applied recursively.
pub fn build_cluster_tree(points: &mut PointSet, n_min: usize) -> Result<ClusterTree> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if n_min < 1 {
        return Err(Error::InvalidParameter("n_min must be >= 1".into()));
    }
    let n = points.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut nodes: Vec<ClusterNode> = Vec::new();
    let mut leaf_count = 0usize;

    // explicit stack to avoid recursion limits on deep trees
    struct Task {
        lo: usize,
        hi: usize,
        level: u32,
        parent_slot: Option<(usize, usize)>,
    }
    let mut stack = vec![Task { lo: 0, hi: n, level: 0, parent_slot: None }];
    while let Some(task) = stack.pop() {
        let (bb_min, bb_max) = bbox_of(&points.coords, &order[task.lo..task.hi])?;
        let id = nodes.len() as u32;
        if let Some((p, slot)) = task.parent_slot {
            nodes[p].children.as_mut().unwrap()[slot] = id;
        }
        let count = task.hi - task.lo;
        if count <= n_min {
            nodes.push(ClusterNode {
                lo: task.lo,
                hi: task.hi,
                bb_min,
                bb_max,
                children: None,
                level: task.level,
            });
            leaf_count += 1;
            // canonical within-leaf order
            order[task.lo..task.hi].sort_unstable();
            continue;
        }
        let mut axis = 0;
        let mut best = f64::NEG_INFINITY;
        for k in 0..points.dim {
            let e = bb_max[k] - bb_min[k];
            if e > best {
                best = e;
                axis = k;
            }
        }
        order[task.lo..task.hi].sort_unstable_by(|&a, &b| {
            points.coords[a as usize][axis]
                .total_cmp(&points.coords[b as usize][axis])
                .then(a.cmp(&b))
        });
        let mid = task.lo + count / 2;
        nodes.push(ClusterNode {
            lo: task.lo,
            hi: task.hi,
            bb_min,
            bb_max,
            children: Some([u32::MAX, u32::MAX]),
            level: task.level,
        });
        let parent = id as usize;
        // push right first so the left child is processed (and numbered) first
        stack.push(Task { lo: mid, hi: task.hi, level: task.level + 1, parent_slot: Some((parent, 1)) });
        stack.push(Task { lo: task.lo, hi: mid, level: task.level + 1, parent_slot: Some((parent, 0)) });
    }

    let ord_coords: Vec<[f64; 3]> = order.iter().map(|&i| points.coords[i as usize]).collect();
    points.set_tree_order(order);
    Ok(ClusterTree { nodes, n_min, dim: points.dim, ord_coords, leaf_count })
}

/// Status of a block in the block cluster tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    /// Admissible: eligible for low-rank storage.
    AdmissibleLeaf,
    /// Not admissible and at least one cluster is a leaf: stored dense.
    InadmissibleLeaf,
    /// Not admissible, both clusters interior: subdivided into 2x2 children.
    Subdivided([u32; 4]),
}

#[derive(Debug, Clone)]
pub struct BlockNode {
    pub row: u32,
    pub col: u32,
    pub kind: BlockKind,
    /// Block id of the transposed pair (col, row); equals the own id on the
    /// diagonal.
    pub partner: u32,
    pub level: u32,
}

/// Block cluster tree over I x I with the min-diameter admissibility
/// condition min{diam(t), diam(s)} <= eta * dist(t, s).
#[derive(Debug, Clone)]
pub struct BlockClusterTree {
    blocks: Vec<BlockNode>,
    eta: f64,
    leaf_ids: Vec<u32>,
    n: usize,
}

impl BlockClusterTree {
    pub fn root(&self) -> u32 {
        0
    }

    pub fn block(&self, id: u32) -> &BlockNode {
        &self.blocks[id as usize]
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Ids of all leaf blocks (admissible and inadmissible), in construction
    /// order. The leaves tile I x I exactly.
    pub fn leaf_ids(&self) -> &[u32] {
        &self.leaf_ids
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Build the block cluster tree for `tree` paired with itself.
///
/// A block is admissible iff min{diam(t), diam(s)} <= eta * dist(t, s); a
/// non-admissible block with a leaf cluster becomes an inadmissible (dense)
/// leaf, otherwise it is subdivided into the 2x2 children blocks.
pub fn build_block_tree(tree: &ClusterTree, eta: f64) -> Result<BlockClusterTree> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter("eta must be > 0".into()));
    }
    let mut blocks: Vec<BlockNode> = Vec::new();
    let mut leaf_ids: Vec<u32> = Vec::new();
    let mut index: HashMap<(u32, u32), u32> = HashMap::new();

    struct Task {
        row: u32,
        col: u32,
        level: u32,
        parent_slot: Option<(usize, usize)>,
    }
    let mut stack = vec![Task { row: tree.root(), col: tree.root(), level: 0, parent_slot: None }];
    while let Some(task) = stack.pop() {
        let id = blocks.len() as u32;
        if let Some((p, slot)) = task.parent_slot {
            if let BlockKind::Subdivided(ch) = &mut blocks[p].kind {
                ch[slot] = id;
            }
        }
        index.insert((task.row, task.col), id);
        let rn = tree.node(task.row);
        let cn = tree.node(task.col);
        let admissible = rn.diam().min(cn.diam()) <= eta * rn.dist(cn);
        let kind = if admissible {
            leaf_ids.push(id);
            BlockKind::AdmissibleLeaf
        } else if rn.is_leaf() || cn.is_leaf() {
            leaf_ids.push(id);
            BlockKind::InadmissibleLeaf
        } else {
            BlockKind::Subdivided([u32::MAX; 4])
        };
        let subdivided = matches!(kind, BlockKind::Subdivided(_));
        blocks.push(BlockNode { row: task.row, col: task.col, kind, partner: u32::MAX, level: task.level });
        if subdivided {
            let rc = tree.node(task.row).children.unwrap();
            let cc = tree.node(task.col).children.unwrap();
            let parent = id as usize;
            // children in row-major order; pushed reversed so they are
            // numbered in row-major order
            for slot in (0..4).rev() {
                let (i, j) = (slot / 2, slot % 2);
                stack.push(Task { row: rc[i], col: cc[j], level: task.level + 1, parent_slot: Some((parent, slot)) });
            }
        }
    }
    for id in 0..blocks.len() {
        let key = (blocks[id].col, blocks[id].row);
        blocks[id].partner = *index.get(&key).expect("block tree is symmetric");
    }
    Ok(BlockClusterTree { blocks, eta, leaf_ids, n: tree.len() })
}

/// Scattered locations in the unit square: a sqrt_n x sqrt_n lattice with
/// cell centers jittered by i.i.d. uniforms on (-perturbation, perturbation),
/// ordered lexicographically by the lattice pair (i, j).
pub fn generate_perturbed_mesh(sqrt_n: usize, perturbation: f64, seed: u64) -> Result<PointSet> {
    if sqrt_n < 1 {
        return Err(Error::InvalidParameter("sqrt_n must be >= 1".into()));
    }
    if !(0.0..0.5).contains(&perturbation) {
        return Err(Error::InvalidParameter(format!(
            "perturbation must lie in [0, 0.5), got {perturbation}; values >= 0.5 allow coincident points across cells"
        )));
    }
    let mut rng = rng::seeded(seed);
    let s = sqrt_n as f64;
    let mut pts = Vec::with_capacity(sqrt_n * sqrt_n);
    for i in 1..=sqrt_n {
        for j in 1..=sqrt_n {
            let x = (i as f64 - 0.5 + rng::uniform_sym(&mut rng, perturbation)) / s;
            let y = (j as f64 - 0.5 + rng::uniform_sym(&mut rng, perturbation)) / s;
            pts.push(vec![x, y]);
        }
    }
    PointSet::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_tree() {
        let mut ps = PointSet::new(vec![vec![0.3, 0.7]]).unwrap();
        let t = build_cluster_tree(&mut ps, 32).unwrap();
        assert_eq!(t.node_count(), 1);
        assert_eq!(t.leaf_count(), 1);
        assert!(t.node(0).is_leaf());
    }

    #[test]
    fn collinear_median_split() {
        // 64 equispaced points on a line in 2-D: root splits 32/32 along x
        let pts: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, 1.0]).collect();
        let mut ps = PointSet::new(pts).unwrap();
        let t = build_cluster_tree(&mut ps, 32).unwrap();
        let root = t.node(t.root());
        let [l, r] = root.children.unwrap();
        assert_eq!(t.node(l).len(), 32);
        assert_eq!(t.node(r).len(), 32);
        // split along x: left child covers x in [0, 31]
        assert!(t.node(l).bb_max[0] < t.node(r).bb_min[0]);
        assert_eq!(t.leaf_count(), 2);
    }

    #[test]
    fn empty_and_bad_inputs_rejected() {
        assert!(PointSet::new(vec![]).is_err());
        assert!(PointSet::new(vec![vec![f64::NAN, 0.0]]).is_err());
        assert!(generate_perturbed_mesh(4, 0.5, 1).is_err());
        assert!(generate_perturbed_mesh(0, 0.1, 1).is_err());
    }

    #[test]
    fn unperturbed_2x2_mesh() {
        let ps = generate_perturbed_mesh(2, 0.0, 123).unwrap();
        let expect = [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]];
        for (i, e) in expect.iter().enumerate() {
            let p = ps.point(i);
            assert_eq!(&[p[0], p[1]], e);
        }
    }

    #[test]
    fn mesh_is_seed_reproducible_and_in_unit_square() {
        let a = generate_perturbed_mesh(129, 0.4, 7).unwrap();
        let b = generate_perturbed_mesh(129, 0.4, 7).unwrap();
        assert_eq!(a.len(), 16_641);
        for i in 0..a.len() {
            assert_eq!(a.point(i), b.point(i));
            let p = a.point(i);
            assert!(p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0);
        }
        let c = generate_perturbed_mesh(129, 0.4, 8).unwrap();
        assert_ne!(a.point(0), c.point(0));
    }

    #[test]
    fn tree_depth_bound_and_leaf_sizes() {
        let mut ps = generate_perturbed_mesh(40, 0.4, 5).unwrap();
        let n = ps.len();
        let n_min = 32;
        let t = build_cluster_tree(&mut ps, n_min).unwrap();
        let bound = ((n as f64 / n_min as f64).log2().ceil() as u32) + 1;
        assert!(t.depth() <= bound, "depth {} bound {}", t.depth(), bound);
        for id in 0..t.node_count() {
            let node = t.node(id as u32);
            if node.is_leaf() {
                assert!(node.len() <= n_min);
            } else {
                let [l, r] = node.children.unwrap();
                assert_eq!(t.node(l).lo, node.lo);
                assert_eq!(t.node(l).hi, t.node(r).lo);
                assert_eq!(t.node(r).hi, node.hi);
            }
        }
    }

    #[test]
    fn perm_roundtrip() {
        let mut ps = generate_perturbed_mesh(20, 0.3, 11).unwrap();
        build_cluster_tree(&mut ps, 16).unwrap();
        let z: Vec<f64> = (0..ps.len()).map(|i| i as f64).collect();
        let zt = ps.permute_to_tree_order(&z).unwrap();
        let back = ps.permute_to_original_order(&zt).unwrap();
        assert_eq!(z, back);
        // perm is a bijection
        let mut seen = vec![false; ps.len()];
        for &p in ps.perm() {
            assert!(!seen[p as usize]);
            seen[p as usize] = true;
        }
    }

    #[test]
    fn bbox_contains_points() {
        let mut ps = generate_perturbed_mesh(15, 0.4, 3).unwrap();
        let t = build_cluster_tree(&mut ps, 8).unwrap();
        for id in 0..t.node_count() {
            let node = t.node(id as u32);
            for ti in node.lo..node.hi {
                let p = t.tree_point(ti);
                for k in 0..2 {
                    assert!(p[k] >= node.bb_min[k] && p[k] <= node.bb_max[k]);
                }
            }
        }
    }

    #[test]
    fn single_leaf_block_tree() {
        let mut ps = PointSet::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let t = build_cluster_tree(&mut ps, 32).unwrap();
        let bt = build_block_tree(&t, 2.0).unwrap();
        assert_eq!(bt.block_count(), 1);
        assert_eq!(bt.block(0).kind, BlockKind::InadmissibleLeaf);
    }

    #[test]
    fn touching_boxes_are_inadmissible() {
        // two unit segments of points sharing an endpoint: dist = 0, diam > 0
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(vec![i as f64 / 7.0, 0.0]);
        }
        for i in 0..8 {
            pts.push(vec![1.0 + i as f64 / 7.0, 0.0]);
        }
        let mut ps = PointSet::new(pts).unwrap();
        let t = build_cluster_tree(&mut ps, 8).unwrap();
        let root = t.node(t.root());
        let [l, r] = root.children.unwrap();
        let (ln, rn) = (t.node(l), t.node(r));
        assert_eq!(ln.dist(rn), 0.0);
        assert!(ln.diam() > 0.0);
        // min-diameter condition fails at dist 0 and positive diameter
        assert!(!(ln.diam().min(rn.diam()) <= 2.0 * ln.dist(rn)));
    }

    #[test]
    fn block_leaves_tile_exhaustively() {
        // O(n^2) membership oracle on a random cloud
        let mut ps = generate_perturbed_mesh(32, 0.4, 99).unwrap(); // n = 1024
        let t = build_cluster_tree(&mut ps, 32).unwrap();
        let bt = build_block_tree(&t, 2.0).unwrap();
        let n = ps.len();
        let mut cover = vec![0u8; n * n];
        for &id in bt.leaf_ids() {
            let b = bt.block(id);
            let (rn, cn) = (t.node(b.row), t.node(b.col));
            for i in rn.lo..rn.hi {
                for j in cn.lo..cn.hi {
                    cover[i * n + j] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn admissible_blocks_are_separated_and_partners_match() {
        let mut ps = generate_perturbed_mesh(24, 0.4, 4).unwrap();
        let t = build_cluster_tree(&mut ps, 16).unwrap();
        let bt = build_block_tree(&t, 2.0).unwrap();
        for id in 0..bt.block_count() as u32 {
            let b = bt.block(id);
            let p = bt.block(b.partner);
            assert_eq!((p.row, p.col), (b.col, b.row));
            assert_eq!(bt.block(p.partner).row, b.row);
            if b.kind == BlockKind::AdmissibleLeaf {
                let (rn, cn) = (t.node(b.row), t.node(b.col));
                if rn.diam().min(cn.diam()) > 0.0 {
                    assert!(rn.dist(cn) > 0.0);
                }
            }
        }
    }
}
