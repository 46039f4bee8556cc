//! Hierarchical storage of covariance matrices: dense inadmissible leaves,
//! ACA-compressed admissible leaves, and upper-triangle-plus-mirror symmetry.

pub mod aca;
pub mod format;

use crate::dense::{gemm_nn, gemm_nt, jacobi_svd, thin_qr, Mat};
use crate::error::{Error, Result};
use crate::geometry::{BlockClusterTree, BlockKind, ClusterTree};
use crate::kernels::{MaternKernel, MaternParams};
use aca::{aca_block, AcaOutcome, AcaStop, BlockEntry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Compression strategy: every block truncated to rank k, or every block
/// compressed to a spectral tolerance eps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RankPolicy {
    Fixed { k: usize },
    Adaptive { eps: f64 },
}

impl RankPolicy {
    pub fn fixed(k: usize) -> Self {
        RankPolicy::Fixed { k }
    }

    pub fn adaptive(eps: f64) -> Self {
        RankPolicy::Adaptive { eps }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::Fixed { k } => {
                if k == 0 {
                    return Err(Error::InvalidParameter("fixed rank must be >= 1".into()));
                }
            }
            RankPolicy::Adaptive { eps } => {
                if !(eps > 0.0) || !eps.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "adaptive tolerance must be positive, got {eps}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RankPolicy::Fixed { k } => write!(f, "fixed(k={k})"),
            RankPolicy::Adaptive { eps } => write!(f, "adaptive(eps={eps:e})"),
        }
    }
}

/// Payload of a leaf block.
#[derive(Debug, Clone)]
pub enum LeafData {
    Dense(Mat),
    /// block ~= u * v^T; rank 0 encodes an exactly-zero block.
    LowRank { u: Mat, v: Mat },
}

impl LeafData {
    pub fn rank(&self) -> Option<usize> {
        match self {
            LeafData::Dense(_) => None,
            LeafData::LowRank { u, .. } => Some(u.ncols()),
        }
    }

    pub fn bytes(&self) -> usize {
        match self {
            LeafData::Dense(m) => 8 * m.nrows() * m.ncols(),
            LeafData::LowRank { u, v } => 8 * (u.nrows() + v.nrows()) * u.ncols(),
        }
    }
}

/// A resolved view of a leaf block: the stored data plus whether it must be
/// read transposed (mirrored lower-triangle blocks).
#[derive(Clone, Copy)]
pub struct LeafView<'a> {
    pub data: &'a LeafData,
    pub transposed: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssemblyStats {
    /// admissible blocks that fell back to dense storage (rank cap hit)
    pub dense_fallbacks: usize,
}

/// Hierarchical matrix over a block cluster tree. Only blocks with
/// row-range start <= col-range start hold data; their transpose partners
/// mirror it, which makes the matrix exactly symmetric (the  C := (C + C^T)/2
/// remedy realized structurally).
#[derive(Clone)]
pub struct HMatrix {
    ct: Arc<ClusterTree>,
    bt: Arc<BlockClusterTree>,
    leaves: Vec<Option<LeafData>>,
    policy: RankPolicy,
    stats: AssemblyStats,
}

impl HMatrix {
    pub fn n(&self) -> usize {
        self.ct.len()
    }

    pub fn cluster_tree(&self) -> &Arc<ClusterTree> {
        &self.ct
    }

    pub fn block_tree(&self) -> &Arc<BlockClusterTree> {
        &self.bt
    }

    pub fn policy(&self) -> RankPolicy {
        self.policy
    }

    pub fn assembly_stats(&self) -> &AssemblyStats {
        &self.stats
    }

    /// True when this block id holds its own data (diagonal or upper block).
    pub fn is_holder(&self, id: u32) -> bool {
        let b = self.bt.block(id);
        let (r, c) = (self.ct.node(b.row), self.ct.node(b.col));
        r.lo <= c.lo
    }

    /// Resolve the data for a leaf block, following the mirror if needed.
    pub fn leaf(&self, id: u32) -> LeafView<'_> {
        if let Some(data) = &self.leaves[id as usize] {
            LeafView { data, transposed: false }
        } else {
            let partner = self.bt.block(id).partner;
            let data = self.leaves[partner as usize]
                .as_ref()
                .expect("mirrored leaf has a holder partner");
            LeafView { data, transposed: true }
        }
    }

    /// Expand to a dense matrix (tree ordering). Tests and diagnostics only.
    pub fn to_dense(&self, cap: usize) -> Result<Mat> {
        let n = self.n();
        if n > cap {
            return Err(Error::DenseCapExceeded { n, cap });
        }
        let mut out = Mat::zeros(n, n);
        for &id in self.bt.leaf_ids() {
            let b = self.bt.block(id);
            let (rn, cn) = (self.ct.node(b.row), self.ct.node(b.col));
            let view = self.leaf(id);
            match view.data {
                LeafData::Dense(m) => {
                    for i in 0..rn.len() {
                        for j in 0..cn.len() {
                            out[(rn.lo + i, cn.lo + j)] =
                                if view.transposed { m[(j, i)] } else { m[(i, j)] };
                        }
                    }
                }
                LeafData::LowRank { u, v } => {
                    let (a, b_) = if view.transposed { (v, u) } else { (u, v) };
                    for i in 0..rn.len() {
                        for j in 0..cn.len() {
                            out[(rn.lo + i, cn.lo + j)] =
                                crate::dense::dot(a.row(i), b_.row(j));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Matérn entry oracle in tree ordering: the nugget sits on the diagonal.
pub struct MaternTreeEntry<'a> {
    kernel: MaternKernel,
    coords: &'a [[f64; 3]],
}

impl<'a> MaternTreeEntry<'a> {
    pub fn new(ct: &'a ClusterTree, params: &MaternParams) -> Result<Self> {
        Ok(MaternTreeEntry { kernel: MaternKernel::new(params)?, coords: ct.tree_points() })
    }
}

impl BlockEntry for MaternTreeEntry<'_> {
    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.kernel.diag()
        } else {
            self.kernel.eval_points(self.coords[i], self.coords[j])
        }
    }

    fn fill_row(&self, i: usize, jlo: usize, out: &mut [f64]) {
        let pi = self.coords[i];
        for (k, o) in out.iter_mut().enumerate() {
            let j = jlo + k;
            *o = if i == j { self.kernel.diag() } else { self.kernel.eval_points(pi, self.coords[j]) };
        }
    }

    fn fill_col(&self, j: usize, ilo: usize, out: &mut [f64]) {
        let pj = self.coords[j];
        for (k, o) in out.iter_mut().enumerate() {
            let i = ilo + k;
            *o = if i == j { self.kernel.diag() } else { self.kernel.eval_points(self.coords[i], pj) };
        }
    }
}

/// Assemble the hierarchical covariance matrix for Matérn parameters.
pub fn assemble(
    ct: &Arc<ClusterTree>,
    bt: &Arc<BlockClusterTree>,
    params: &MaternParams,
    policy: RankPolicy,
) -> Result<HMatrix> {
    let entry = MaternTreeEntry::new(ct, params)?;
    assemble_with(ct, bt, &entry, policy)
}

/// Assemble from an arbitrary entry oracle (test kernels, cached matrices).
pub fn assemble_with(
    ct: &Arc<ClusterTree>,
    bt: &Arc<BlockClusterTree>,
    entry: &(impl BlockEntry + ?Sized),
    policy: RankPolicy,
) -> Result<HMatrix> {
    policy.validate()?;
    // holder leaves only; mirrors resolve through partners
    let jobs: Vec<u32> = bt
        .leaf_ids()
        .iter()
        .copied()
        .filter(|&id| {
            let b = bt.block(id);
            ct.node(b.row).lo <= ct.node(b.col).lo
        })
        .collect();

    let results: Vec<(u32, LeafData, bool)> = jobs
        .par_iter()
        .map(|&id| {
            let b = bt.block(id);
            let (rn, cn) = (ct.node(b.row), ct.node(b.col));
            match b.kind {
                BlockKind::InadmissibleLeaf => {
                    (id, dense_leaf(entry, rn.lo, rn.hi, cn.lo, cn.hi), false)
                }
                BlockKind::AdmissibleLeaf => {
                    let stop = match policy {
                        RankPolicy::Fixed { k } => AcaStop::Fixed(k),
                        RankPolicy::Adaptive { eps } => AcaStop::Adaptive(eps),
                    };
                    match aca_block(entry, rn.lo, rn.hi, cn.lo, cn.hi, stop) {
                        AcaOutcome::LowRank { u, v } => (id, LeafData::LowRank { u, v }, false),
                        AcaOutcome::CapExhausted => {
                            (id, dense_leaf(entry, rn.lo, rn.hi, cn.lo, cn.hi), true)
                        }
                    }
                }
                BlockKind::Subdivided(_) => unreachable!("leaf ids contain no subdivided blocks"),
            }
        })
        .collect();

    let mut leaves: Vec<Option<LeafData>> = vec![None; bt.block_count()];
    let mut fallbacks = 0;
    for (id, data, fell_back) in results {
        fallbacks += fell_back as usize;
        leaves[id as usize] = Some(data);
    }
    Ok(HMatrix {
        ct: Arc::clone(ct),
        bt: Arc::clone(bt),
        leaves,
        policy,
        stats: AssemblyStats { dense_fallbacks: fallbacks },
    })
}

fn dense_leaf<E: BlockEntry + ?Sized>(entry: &E, rlo: usize, rhi: usize, clo: usize, chi: usize) -> LeafData {
    let m = rhi - rlo;
    let p = chi - clo;
    let mut out = Mat::zeros(m, p);
    for i in 0..m {
        entry.fill_row(rlo + i, clo, out.row_mut(i));
    }
    LeafData::Dense(out)
}

/// Re-orthogonalize low-rank factors and truncate by the policy: thin QR of
/// each factor, SVD of the small core, keep the leading singular values
/// (top-k, or all sigma_i > eps * sigma_1). The spectral error of the cut is
/// at most the first discarded singular value.
///
/// Works on transposed factor copies so every inner loop runs over
/// contiguous rows; the QR is modified Gram-Schmidt with selective
/// reorthogonalization.
pub fn truncate_lowrank(u: &Mat, v: &Mat, policy: RankPolicy) -> (Mat, Mat) {
    truncate_lowrank_prefixed(u, v, policy, 0)
}

/// Truncation that exploits a leading block of already-orthogonal factor
/// columns (the invariant maintained by repeated truncated additions): the
/// first `orth_prefix` columns of u and v skip re-orthogonalization.
pub(crate) fn truncate_lowrank_prefixed(
    u: &Mat,
    v: &Mat,
    policy: RankPolicy,
    orth_prefix: usize,
) -> (Mat, Mat) {
    let m = u.nrows();
    let p = v.nrows();
    let r = u.ncols();
    if r == 0 {
        return (u.clone(), v.clone());
    }
    let _t0 = std::time::Instant::now();
    let _g = TruncGuard(_t0);
    let mut ut = u.transpose(); // r x m, rows are factor columns
    let mut vt = v.transpose(); // r x p
    let ru = mgs_rows(&mut ut, orth_prefix); // r x r, ru[(j, i)] = coefficient of q_j in column i
    let rv = mgs_rows(&mut vt, orth_prefix);
    let mut core = Mat::zeros(r, r);
    gemm_nt(&mut core, 1.0, &ru, &rv);
    let _tj = std::time::Instant::now();
    let (w, s, x) = crate::dense::svd_small(&core);
    JACOBI_NS.fetch_add(_tj.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
    let keep = kept_rank(&s, policy);
    // U'^T = (W diag(s))^T[..keep] * Q_u^T, row-major small-by-thin products
    let mut wt = Mat::zeros(keep, r);
    for k in 0..keep {
        for j in 0..r {
            wt[(k, j)] = w[(j, k)] * s[k];
        }
    }
    let mut xt = Mat::zeros(keep, r);
    for k in 0..keep {
        for j in 0..r {
            xt[(k, j)] = x[(j, k)];
        }
    }
    let mut ut_out = Mat::zeros(keep, m);
    gemm_nn(&mut ut_out, 1.0, &wt, &ut);
    let mut vt_out = Mat::zeros(keep, p);
    gemm_nn(&mut vt_out, 1.0, &xt, &vt);
    (ut_out.transpose(), vt_out.transpose())
}

/// In-place modified Gram-Schmidt on the rows of `a` (r x m): rows become
/// orthonormal (or zero for numerically dependent rows). Returns the upper
/// coefficient matrix R with R[(j, i)] such that original row i =
/// sum_j R[(j, i)] * q_j. One selective reorthogonalization pass keeps the
/// basis orthogonal to machine precision under heavy cancellation.
fn mgs_rows(a: &mut Mat, orth_prefix: usize) -> Mat {
    let r = a.nrows();
    let nc = a.ncols();
    let mut rr = Mat::zeros(r, r);
    for i in 0..r {
        let norm0 = {
            let ri = a.row(i);
            crate::dense::dot(ri, ri).sqrt()
        };
        if i < orth_prefix {
            // already orthogonal to the other prefix rows by construction
            let ri = a.row_mut(i);
            if norm0 > 0.0 {
                let inv = 1.0 / norm0;
                for x in ri.iter_mut() {
                    *x *= inv;
                }
                rr[(i, i)] = norm0;
            }
            continue;
        }
        for pass in 0..2 {
            let (head, tail) = a.data_mut().split_at_mut(i * nc);
            let ri = &mut tail[..nc];
            for j in 0..i {
                let qj = &head[j * nc..(j + 1) * nc];
                let c = crate::dense::dot(qj, ri);
                if c != 0.0 {
                    for (x, q) in ri.iter_mut().zip(qj) {
                        *x -= c * q;
                    }
                }
                rr[(j, i)] += c;
            }
            let norm1 = crate::dense::dot(ri, ri).sqrt();
            if pass == 0 && norm1 < 0.5 * norm0 && norm1 > 0.0 {
                continue; // severe cancellation: reorthogonalize once
            }
            break;
        }
        let ri = a.row_mut(i);
        let norm = crate::dense::dot(ri, ri).sqrt();
        if norm > norm0 * 1e-15 && norm > 0.0 {
            let inv = 1.0 / norm;
            for x in ri.iter_mut() {
                *x *= inv;
            }
            rr[(i, i)] = norm;
        } else {
            for x in ri.iter_mut() {
                *x = 0.0;
            }
        }
    }
    rr
}

struct TruncGuard(std::time::Instant);
impl Drop for TruncGuard {
    fn drop(&mut self) {
        TRUNC_ALL_NS.fetch_add(self.0.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
        TRUNC_ALL_CALLS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }
}
pub static JACOBI_NS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static TRUNC_ALL_NS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static TRUNC_ALL_CALLS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

fn kept_rank(s: &[f64], policy: RankPolicy) -> usize {
    let s1 = s.first().copied().unwrap_or(0.0);
    if s1 <= 0.0 {
        return 0;
    }
    // exact-zero directions (up to roundoff) are always dropped
    let floor = s1 * 1e-15;
    let nonzero = s.iter().take_while(|&&x| x > floor).count();
    match policy {
        RankPolicy::Fixed { k } => nonzero.min(k),
        RankPolicy::Adaptive { eps } => s.iter().take(nonzero).take_while(|&&x| x > eps * s1).count(),
    }
}

/// Truncate a leaf: low-rank leaves are recompressed, dense leaves pass
/// through unchanged.
pub fn truncate(leaf: &LeafData, policy: RankPolicy) -> LeafData {
    match leaf {
        LeafData::Dense(m) => LeafData::Dense(m.clone()),
        LeafData::LowRank { u, v } => {
            let (u2, v2) = truncate_lowrank(u, v, policy);
            LeafData::LowRank { u: u2, v: v2 }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelRanks {
    pub level: u32,
    pub lowrank_blocks: usize,
    pub dense_blocks: usize,
    pub max_rank: usize,
}

/// Byte accounting for an assembled matrix, 8-byte reals. The stored format
/// is symmetric (upper triangle plus diagonal; mirrored blocks cost nothing),
/// and `bytes_compressed` counts what is actually stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionStats {
    pub n: usize,
    pub bytes_compressed: u64,
    pub bytes_dense_equivalent: u64,
    pub compression_ratio: f64,
    pub max_rank: usize,
    pub levels: Vec<LevelRanks>,
    pub dense_fallbacks: usize,
}

pub fn compression_stats(h: &HMatrix) -> CompressionStats {
    let n = h.n();
    let mut bytes = 0u64;
    let mut max_rank = 0usize;
    let mut by_level: std::collections::BTreeMap<u32, LevelRanks> = Default::default();
    for &id in h.bt.leaf_ids() {
        if !h.is_holder(id) {
            continue;
        }
        let b = h.bt.block(id);
        let data = h.leaves[id as usize].as_ref().unwrap();
        bytes += data.bytes() as u64;
        let e = by_level.entry(b.level).or_insert(LevelRanks {
            level: b.level,
            lowrank_blocks: 0,
            dense_blocks: 0,
            max_rank: 0,
        });
        match data.rank() {
            Some(r) => {
                e.lowrank_blocks += 1;
                e.max_rank = e.max_rank.max(r);
                max_rank = max_rank.max(r);
            }
            None => e.dense_blocks += 1,
        }
    }
    let dense = 8u64 * (n as u64) * (n as u64);
    CompressionStats {
        n,
        bytes_compressed: bytes,
        bytes_dense_equivalent: dense,
        compression_ratio: 1.0 - bytes as f64 / dense as f64,
        max_rank,
        levels: by_level.into_values().collect(),
        dense_fallbacks: h.stats.dense_fallbacks,
    }
}
