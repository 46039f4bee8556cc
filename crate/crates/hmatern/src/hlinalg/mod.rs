//! Hierarchical arithmetic: matrix-vector products, the recursive block
//! Cholesky / LDL^T factorization with truncation after every update, the
//! triangular solves behind the likelihood, and norm diagnostics.

pub mod work;

use crate::dense::{cholesky_lower, dot, ldlt_lower, Mat};
use crate::error::{Error, Result};
use crate::hmatrix::format::{self, DumpKind, Header};
use crate::hmatrix::{HMatrix, LeafData, RankPolicy};
use crate::rng;
use serde::{Deserialize, Serialize};
use work::WNode;

/// Factorization flavor. LDL^T avoids square roots of the pivots and is the
/// default for likelihood work; LL^T is kept for parity with the plain
/// Cholesky formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    Llt,
    Ldlt,
}

/// Lower-triangular hierarchical factorization of a symmetric H-matrix.
pub struct HFactorization {
    lower: WNode,
    diag: Option<Vec<f64>>,
    mode: FactorMode,
    logdet: f64,
    n: usize,
    policy: RankPolicy,
    max_rank: usize,
    tree_hash: u64,
    dim: u32,
}

impl HFactorization {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> FactorMode {
        self.mode
    }

    pub fn policy(&self) -> RankPolicy {
        self.policy
    }

    /// log det of the factored matrix (natural log), accumulated during the
    /// factorization.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Largest low-rank block rank appearing in the factor.
    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    /// The LDL^T diagonal (None in LL^T mode).
    pub fn diag(&self) -> Option<&[f64]> {
        self.diag.as_deref()
    }

    /// Recompute log det from the stored factors: 2 sum log L_ii for LL^T,
    /// sum log D_ii for LDL^T.
    pub fn logdet_recomputed(&self) -> f64 {
        match self.mode {
            FactorMode::Ldlt => self.diag.as_ref().unwrap().iter().map(|&d| d.ln()).sum(),
            FactorMode::Llt => walk_diag_logdet(&self.lower),
        }
    }

    /// Forward substitution v = L^{-1} rhs; in LDL^T mode the result is
    /// additionally scaled by D^{-1/2} so that |v|^2 = rhs^T C^{-1} rhs in
    /// both modes.
    pub fn solve_lower(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: rhs.len() });
        }
        let mut v = rhs.to_vec();
        match self.mode {
            FactorMode::Llt => work::solve_lower_vec_tree(&self.lower, false, &mut v),
            FactorMode::Ldlt => {
                work::solve_lower_vec_tree(&self.lower, true, &mut v);
                for (vi, di) in v.iter_mut().zip(self.diag.as_ref().unwrap()) {
                    *vi /= di.sqrt();
                }
            }
        }
        Ok(v)
    }

    /// Full covariance solve y = (L L^T)^{-1} z (or the LDL^T equivalent).
    pub fn solve_cov(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: z.len() });
        }
        let mut v = z.to_vec();
        match self.mode {
            FactorMode::Llt => {
                work::solve_lower_vec_tree(&self.lower, false, &mut v);
                work::solve_lower_transpose_vec_tree(&self.lower, false, &mut v);
            }
            FactorMode::Ldlt => {
                work::solve_lower_vec_tree(&self.lower, true, &mut v);
                for (vi, di) in v.iter_mut().zip(self.diag.as_ref().unwrap()) {
                    *vi /= di;
                }
                work::solve_lower_transpose_vec_tree(&self.lower, true, &mut v);
            }
        }
        Ok(v)
    }

    /// y = L x (LL^T) or L D^{1/2} x (LDL^T): pushes white noise through the
    /// factor so that cov(y) = C.
    pub fn apply_lower(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        let mut v = x.to_vec();
        match self.mode {
            FactorMode::Llt => work::apply_lower_vec_tree(&self.lower, false, &mut v),
            FactorMode::Ldlt => {
                for (vi, di) in v.iter_mut().zip(self.diag.as_ref().unwrap()) {
                    *vi *= di.sqrt();
                }
                work::apply_lower_vec_tree(&self.lower, true, &mut v);
            }
        }
        Ok(v)
    }

    /// Dense expansion of L (or unit-lower L in LDL^T mode); diagnostics.
    pub fn factor_to_dense(&self, cap: usize) -> Result<Mat> {
        if self.n > cap {
            return Err(Error::DenseCapExceeded { n: self.n, cap });
        }
        let mut out = Mat::zeros(self.n, self.n);
        work::wnode_to_dense(&self.lower, &mut out, 0, 0);
        Ok(out)
    }

    /// Serialize with the shared dump format (kind marks the mode; the LDL^T
    /// diagonal follows the leaf records).
    pub fn dump<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let mut count = 0u64;
        for_each_leaf(&self.lower, &mut |_| count += 1);
        format::write_header(
            w,
            &Header {
                kind: match self.mode {
                    FactorMode::Llt => DumpKind::FactorLl,
                    FactorMode::Ldlt => DumpKind::FactorLdl,
                },
                n: self.n as u64,
                dim: self.dim,
                policy: self.policy,
                tree_hash: self.tree_hash,
                records: count,
            },
        )?;
        let mut id = 0u32;
        let mut res = Ok(());
        for_each_leaf(&self.lower, &mut |node| {
            if res.is_err() {
                return;
            }
            let data = match node {
                WNode::Dense(m) => LeafData::Dense(m.clone()),
                WNode::LowRank { u, v } => LeafData::LowRank { u: u.clone(), v: v.clone() },
                WNode::Branch(_) => unreachable!(),
            };
            res = format::write_leaf_record(w, id, &data);
            id += 1;
        });
        res?;
        if let Some(d) = &self.diag {
            let mut buf = Vec::with_capacity(d.len() * 8);
            for &x in d {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Load a factor dump produced against the same matrix trees.
    pub fn load<R: std::io::Read>(r: &mut R, h: &HMatrix) -> Result<HFactorization> {
        let header = format::read_header(r)?;
        let mode = match header.kind {
            DumpKind::FactorLl => FactorMode::Llt,
            DumpKind::FactorLdl => FactorMode::Ldlt,
            DumpKind::Covariance => {
                return Err(Error::Format("dump contains a covariance matrix, not a factor".into()))
            }
        };
        let hash = format::tree_fingerprint(h.cluster_tree(), h.block_tree());
        if header.tree_hash != hash || header.n as usize != h.n() {
            return Err(Error::Format("factor dump does not match these trees".into()));
        }
        let mut records = Vec::with_capacity(header.records as usize);
        for _ in 0..header.records {
            records.push(format::read_leaf_record(r)?.1);
        }
        // rebuild the lower structure and fill it with the records in the
        // same canonical order the dump used
        let mut skeleton = work::build_lower(h, h.block_tree().root(), header.policy);
        let mut iter = records.into_iter();
        fill_leaves(&mut skeleton, &mut iter)?;
        let diag = match mode {
            FactorMode::Ldlt => {
                let mut buf = vec![0u8; h.n() * 8];
                r.read_exact(&mut buf)?;
                Some(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                        .collect::<Vec<f64>>(),
                )
            }
            FactorMode::Llt => None,
        };
        let max_rank = skeleton.max_rank();
        let mut f = HFactorization {
            lower: skeleton,
            diag,
            mode,
            logdet: 0.0,
            n: h.n(),
            policy: header.policy,
            max_rank,
            tree_hash: hash,
            dim: header.dim,
        };
        f.logdet = f.logdet_recomputed();
        Ok(f)
    }
}

fn for_each_leaf(node: &WNode, f: &mut impl FnMut(&WNode)) {
    match node {
        WNode::Branch(b) => {
            for row in &b.ch {
                for c in row.iter().flatten() {
                    for_each_leaf(c, f);
                }
            }
        }
        leaf => f(leaf),
    }
}

fn fill_leaves(node: &mut WNode, records: &mut impl Iterator<Item = LeafData>) -> Result<()> {
    match node {
        WNode::Branch(b) => {
            for row in b.ch.iter_mut() {
                for c in row.iter_mut().flatten() {
                    fill_leaves(c, records)?;
                }
            }
            Ok(())
        }
        leaf => {
            let rec = records
                .next()
                .ok_or_else(|| Error::Format("factor dump has too few leaf records".into()))?;
            let (er, ec) = (leaf.nrows(), leaf.ncols());
            let (gr, gc) = match &rec {
                LeafData::Dense(m) => (m.nrows(), m.ncols()),
                LeafData::LowRank { u, v } => (u.nrows(), v.nrows()),
            };
            if (er, ec) != (gr, gc) {
                return Err(Error::Format(format!(
                    "factor dump leaf shape {gr}x{gc} does not match the tree ({er}x{ec})"
                )));
            }
            *leaf = match rec {
                LeafData::Dense(m) => WNode::Dense(m),
                LeafData::LowRank { u, v } => WNode::LowRank { u, v },
            };
            Ok(())
        }
    }
}

fn walk_diag_logdet(node: &WNode) -> f64 {
    match node {
        WNode::Dense(m) => (0..m.nrows()).map(|i| 2.0 * m[(i, i)].ln()).sum(),
        WNode::Branch(b) => {
            walk_diag_logdet(b.ch[0][0].as_ref().unwrap()) + walk_diag_logdet(b.ch[1][1].as_ref().unwrap())
        }
        WNode::LowRank { .. } => unreachable!(),
    }
}

/// y = C z through the hierarchical leaves.
pub fn matvec(h: &HMatrix, z: &[f64]) -> Result<Vec<f64>> {
    let n = h.n();
    if z.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: z.len() });
    }
    let mut y = vec![0.0; n];
    let ct = h.cluster_tree();
    for &id in h.block_tree().leaf_ids() {
        let b = h.block_tree().block(id);
        let (rn, cn) = (ct.node(b.row), ct.node(b.col));
        let view = h.leaf(id);
        let zc = &z[cn.lo..cn.hi];
        let yr = &mut y[rn.lo..rn.hi];
        match (view.data, view.transposed) {
            (LeafData::Dense(m), false) => {
                for i in 0..m.nrows() {
                    yr[i] += dot(m.row(i), zc);
                }
            }
            (LeafData::Dense(m), true) => {
                for i in 0..m.nrows() {
                    let s = zc[i];
                    if s != 0.0 {
                        let row = m.row(i);
                        for j in 0..m.ncols() {
                            yr[j] += s * row[j];
                        }
                    }
                }
            }
            (LeafData::LowRank { u, v }, transposed) => {
                let (a, b_) = if transposed { (v, u) } else { (u, v) };
                let r = a.ncols();
                if r == 0 {
                    continue;
                }
                let mut t = vec![0.0; r];
                for q in 0..b_.nrows() {
                    let s = zc[q];
                    if s != 0.0 {
                        let brow = b_.row(q);
                        for l in 0..r {
                            t[l] += s * brow[l];
                        }
                    }
                }
                for i in 0..a.nrows() {
                    yr[i] += dot(a.row(i), &t);
                }
            }
        }
    }
    Ok(y)
}

/// Recursive block factorization: factor the diagonal block, triangular-solve
/// the subdiagonal block, Schur-update the trailing block with truncation
/// after every addition, recurse.
pub fn factorize(h: &HMatrix, mode: FactorMode, policy: Option<RankPolicy>) -> Result<HFactorization> {
    let policy = policy.unwrap_or_else(|| h.policy());
    policy.validate()?;
    let n = h.n();
    let mut lower = work::build_lower(h, h.block_tree().root(), policy);
    let mut d = vec![0.0; n];
    factor_rec(&mut lower, 0, &mut d, mode, policy)?;
    let (diag, logdet) = match mode {
        FactorMode::Ldlt => {
            let logdet = d.iter().map(|&x| x.ln()).sum();
            (Some(d), logdet)
        }
        FactorMode::Llt => (None, walk_diag_logdet(&lower)),
    };
    let max_rank = lower.max_rank();
    Ok(HFactorization {
        lower,
        diag,
        mode,
        logdet,
        n,
        policy,
        max_rank,
        tree_hash: format::tree_fingerprint(h.cluster_tree(), h.block_tree()),
        dim: h.cluster_tree().dim() as u32,
    })
}

fn factor_rec(node: &mut WNode, off: usize, d: &mut [f64], mode: FactorMode, policy: RankPolicy) -> Result<()> {
    match node {
        WNode::Dense(m) => {
            let k = m.nrows();
            match mode {
                FactorMode::Llt => {
                    cholesky_lower(m).map_err(|e| shift_position(e, off))?;
                }
                FactorMode::Ldlt => {
                    let dj = ldlt_lower(m).map_err(|e| shift_position(e, off))?;
                    d[off..off + k].copy_from_slice(&dj);
                }
            }
            // the factor stores only the lower triangle
            for i in 0..k {
                for j in i + 1..k {
                    m[(i, j)] = 0.0;
                }
            }
            Ok(())
        }
        WNode::Branch(b) => {
            let rsplit = b.rsplit;
            let (top, bottom) = b.ch.split_at_mut(1);
            let a00 = top[0][0].as_mut().unwrap();
            factor_rec(a00, off, d, mode, policy)?;
            let (b10, b11) = bottom[0].split_at_mut(1);
            let x = b10[0].as_mut().unwrap();
            let a11 = b11[0].as_mut().unwrap();
            match mode {
                FactorMode::Llt => {
                    work::solve_right_lower_transpose(x, a00, false, policy);
                    work::mul_add(a11, x, x, -1.0, policy);
                }
                FactorMode::Ldlt => {
                    work::solve_right_lower_transpose(x, a00, true, policy);
                    let dslice = &d[off..off + rsplit];
                    let dinv: Vec<f64> = dslice.iter().map(|&v| 1.0 / v).collect();
                    work::scale_cols_tree(x, &dinv);
                    // trailing update A11 -= (X D) X^T
                    let t0 = std::time::Instant::now();
                    let mut xd = x.clone_node();
                    work::scale_cols_tree(&mut xd, dslice);
                    work::prof::CLONE_NS.fetch_add(t0.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
                    work::mul_add(a11, &xd, x, -1.0, policy);
                }
            }
            factor_rec(a11, off + rsplit, d, mode, policy)
        }
        WNode::LowRank { .. } => unreachable!("diagonal path was materialized dense"),
    }
}

fn shift_position(e: Error, off: usize) -> Error {
    match e {
        Error::NotPositiveDefinite { position } => {
            Error::NotPositiveDefinite { position: position + off }
        }
        other => other,
    }
}

/// Power-iteration estimate of ||I - (L L^T)^{-1} C||_2, the factorization
/// residual. A lower-bound estimate; `iters` around 50 is plenty for the
/// well-separated spectra seen here.
pub fn inverse_residual_norm(h: &HMatrix, f: &HFactorization, iters: usize, seed: u64) -> Result<f64> {
    let n = h.n();
    let mut v = rng::standard_normal_vec(&mut rng::seeded(seed), n);
    normalize(&mut v);
    let apply_m = |x: &[f64]| -> Result<Vec<f64>> {
        let cx = matvec(h, x)?;
        let s = f.solve_cov(&cx)?;
        Ok(x.iter().zip(&s).map(|(a, b)| a - b).collect())
    };
    let apply_mt = |x: &[f64]| -> Result<Vec<f64>> {
        let s = f.solve_cov(x)?;
        let cs = matvec(h, &s)?;
        Ok(x.iter().zip(&cs).map(|(a, b)| a - b).collect())
    };
    let mut sigma2 = 0.0f64;
    for _ in 0..iters.max(1) {
        let w = apply_m(&v)?;
        let mut g = apply_mt(&w)?;
        sigma2 = dot(&v, &g).abs();
        let nrm = dot(&g, &g).sqrt();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        for gi in g.iter_mut() {
            *gi /= nrm;
        }
        v = g;
    }
    Ok(sigma2.sqrt())
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Theorem-style log-det perturbation bound: -n log(1 - eps) for a measured
/// spectral radius eps of C~^{-1} C - I.
pub fn logdet_error_bound(epsilon_spectral: f64, n: usize) -> Result<f64> {
    if !(epsilon_spectral > 0.0 && epsilon_spectral < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "spectral epsilon must lie in (0, 1), got {epsilon_spectral}"
        )));
    }
    Ok(-(n as f64) * (1.0 - epsilon_spectral).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_block_tree, build_cluster_tree, generate_perturbed_mesh, PointSet};
    use crate::hmatrix::{assemble, assemble_with, aca::BlockEntry};
    use crate::kernels::MaternParams;
    use std::sync::Arc;

    fn matern_setup(
        sqrt_n: usize,
        n_min: usize,
        seed: u64,
        params: &MaternParams,
        eps: f64,
    ) -> (HMatrix, Mat) {
        let mut ps = generate_perturbed_mesh(sqrt_n, 0.4, seed).unwrap();
        let ct = Arc::new(build_cluster_tree(&mut ps, n_min).unwrap());
        let bt = Arc::new(build_block_tree(&ct, 2.0).unwrap());
        let h = assemble(&ct, &bt, params, RankPolicy::adaptive(eps)).unwrap();
        let dense = crate::kernels::build_dense_covariance(&ps, params, 1 << 20).unwrap();
        (h, dense)
    }

    struct IdentityEntry;
    impl BlockEntry for IdentityEntry {
        fn entry(&self, i: usize, j: usize) -> f64 {
            if i == j {
                1.0
            } else {
                0.0
            }
        }
    }

    #[test]
    fn identity_factorization_is_exact() {
        let mut ps = generate_perturbed_mesh(12, 0.4, 1).unwrap();
        let ct = Arc::new(build_cluster_tree(&mut ps, 16).unwrap());
        let bt = Arc::new(build_block_tree(&ct, 2.0).unwrap());
        let h = assemble_with(&ct, &bt, &IdentityEntry, RankPolicy::adaptive(1e-8)).unwrap();
        for mode in [FactorMode::Llt, FactorMode::Ldlt] {
            let f = factorize(&h, mode, None).unwrap();
            assert!(f.logdet().abs() < 1e-14);
            assert_eq!(f.max_rank(), 0);
            let z: Vec<f64> = (0..h.n()).map(|i| (i as f64 * 0.37).sin()).collect();
            let v = f.solve_lower(&z).unwrap();
            for (a, b) in v.iter().zip(&z) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn hand_2x2_cholesky() {
        struct Two;
        impl BlockEntry for Two {
            fn entry(&self, i: usize, j: usize) -> f64 {
                [[4.0, 2.0], [2.0, 3.0]][i][j]
            }
        }
        let mut ps = PointSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let ct = Arc::new(build_cluster_tree(&mut ps, 8).unwrap());
        let bt = Arc::new(build_block_tree(&ct, 2.0).unwrap());
        let h = assemble_with(&ct, &bt, &Two, RankPolicy::adaptive(1e-8)).unwrap();
        let f = factorize(&h, FactorMode::Llt, None).unwrap();
        let l = f.factor_to_dense(16).unwrap();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert!((f.logdet() - 8f64.ln()).abs() < 1e-14);
        assert!((f.logdet_recomputed() - f.logdet()).abs() < 1e-12);
    }

    #[test]
    fn matvec_zero_and_dense_equivalence() {
        let params = MaternParams::new(1.0, 0.1, 0.5, 0.0).unwrap();
        let (h, dense) = matern_setup(16, 16, 3, &params, 1e-8);
        let zero = vec![0.0; h.n()];
        assert!(matvec(&h, &zero).unwrap().iter().all(|&x| x == 0.0));

        let z: Vec<f64> = (0..h.n()).map(|i| ((i * 37) as f64 * 0.11).sin()).collect();
        let y = matvec(&h, &z).unwrap();
        let yd = dense.matvec(&z);
        let num: f64 = y.iter().zip(&yd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = yd.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(num / den <= 1e-6, "rel err {}", num / den);
    }

    #[test]
    fn factorization_solves_match_dense() {
        let params = MaternParams::new(1.3, 0.09, 0.5, 0.0).unwrap();
        let (h, mut dense) = matern_setup(24, 32, 5, &params, 1e-8); // n = 576
        let n = h.n();
        let z: Vec<f64> = (0..n).map(|i| ((i * 13) as f64 * 0.29).cos()).collect();
        let ld_dense = crate::dense::cholesky_lower(&mut dense).unwrap();
        let mut x = z.clone();
        crate::dense::solve_lower_vec(&dense, &mut x, false);
        let quad_dense = dot(&x, &x);

        for mode in [FactorMode::Llt, FactorMode::Ldlt] {
            let f = factorize(&h, mode, None).unwrap();
            assert!((f.logdet() - ld_dense).abs() < 1e-6 * ld_dense.abs().max(1.0), "logdet");
            assert!((f.logdet_recomputed() - f.logdet()).abs() <= 1e-12 * f.logdet().abs().max(1.0));
            let v = f.solve_lower(&z).unwrap();
            let quad = dot(&v, &v);
            assert!(
                (quad - quad_dense).abs() <= 1e-5 * quad_dense.abs(),
                "mode {mode:?}: {quad} vs {quad_dense}"
            );
        }
    }

    #[test]
    fn solve_then_apply_roundtrip_and_residual() {
        let params = MaternParams::new(1.0, 0.07, 1.5, 0.0).unwrap();
        let (h, _) = matern_setup(24, 16, 8, &params, 1e-6);
        let n = h.n();
        for mode in [FactorMode::Llt, FactorMode::Ldlt] {
            let f = factorize(&h, mode, None).unwrap();
            let z: Vec<f64> = (0..n).map(|i| ((i * 7) as f64).sin()).collect();
            // apply_lower is the exact inverse of the two solves
            let y = f.apply_lower(&z).unwrap();
            let v = f.solve_lower(&y).unwrap();
            let quad = dot(&v, &v);
            assert!((quad - dot(&z, &z)).abs() <= 1e-9 * dot(&z, &z), "|L^{{-1}}(Lz)|^2");
            // (L L^T)^{-1} C z ~= z at the factorization accuracy
            let back = f.solve_cov(&matvec(&h, &z).unwrap()).unwrap();
            let err: f64 = back.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-3, "cov roundtrip err {err}");
            // inverse residual is small at tight tolerance
            let r = inverse_residual_norm(&h, &f, 30, 42).unwrap();
            assert!(r < 1e-3, "residual {r}");
        }
    }

    #[test]
    fn ldlt_and_llt_agree_on_logdet() {
        let params = MaternParams::new(0.9, 0.12, 0.5, 0.0).unwrap();
        let (h, _) = matern_setup(20, 16, 2, &params, 1e-8);
        let f1 = factorize(&h, FactorMode::Llt, None).unwrap();
        let f2 = factorize(&h, FactorMode::Ldlt, None).unwrap();
        assert!((f1.logdet() - f2.logdet()).abs() < 1e-8 * f1.logdet().abs().max(1.0));
    }

    #[test]
    fn not_positive_definite_reports_position() {
        struct Indefinite;
        impl BlockEntry for Indefinite {
            fn entry(&self, i: usize, j: usize) -> f64 {
                if i == j {
                    if i >= 2 {
                        -1.0
                    } else {
                        1.0
                    }
                } else {
                    0.0
                }
            }
        }
        let mut ps = PointSet::new((0..8).map(|i| vec![i as f64, 0.0]).collect()).unwrap();
        let ct = Arc::new(build_cluster_tree(&mut ps, 4).unwrap());
        let bt = Arc::new(build_block_tree(&ct, 2.0).unwrap());
        let h = assemble_with(&ct, &bt, &Indefinite, RankPolicy::adaptive(1e-8)).unwrap();
        match factorize(&h, FactorMode::Ldlt, None) {
            Err(Error::NotPositiveDefinite { position }) => assert_eq!(position, 2),
            other => panic!("expected failure, got logdet {:?}", other.map(|f| f.logdet())),
        }
    }

    #[test]
    fn bound_helper_values() {
        assert!((logdet_error_bound(0.5, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        let b = logdet_error_bound(1e-3, 1000).unwrap();
        assert!((b - 1.0005) < 1e-3 && b > 1.0);
        assert!(logdet_error_bound(1.0, 10).is_err());
        assert!(logdet_error_bound(0.0, 10).is_err());
    }

    #[test]
    fn factor_dump_roundtrip() {
        let params = MaternParams::new(1.0, 0.1, 0.5, 0.0).unwrap();
        let (h, _) = matern_setup(16, 16, 11, &params, 1e-6);
        for mode in [FactorMode::Llt, FactorMode::Ldlt] {
            let f = factorize(&h, mode, None).unwrap();
            let mut buf = Vec::new();
            f.dump(&mut buf).unwrap();
            let g = HFactorization::load(&mut buf.as_slice(), &h).unwrap();
            assert_eq!(g.mode(), mode);
            assert!((g.logdet() - f.logdet()).abs() <= 1e-12 * f.logdet().abs().max(1.0));
            let z: Vec<f64> = (0..h.n()).map(|i| (i as f64 * 0.5).cos()).collect();
            let a = f.solve_lower(&z).unwrap();
            let b = g.solve_lower(&z).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x, y);
            }
        }
    }
}
