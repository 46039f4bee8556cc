//! Partial-pivoted adaptive cross approximation of a matrix block that is
//! only available entrywise.

use crate::dense::{dot, Mat};

/// Entrywise access to the (tree-ordered) covariance matrix, the only
/// interface the compression engine needs. Indices are global tree positions.
pub trait BlockEntry: Sync {
    fn entry(&self, i: usize, j: usize) -> f64;

    /// Row i restricted to columns [jlo, jlo + out.len()).
    fn fill_row(&self, i: usize, jlo: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.entry(i, jlo + k);
        }
    }

    /// Column j restricted to rows [ilo, ilo + out.len()).
    fn fill_col(&self, j: usize, ilo: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.entry(ilo + k, j);
        }
    }
}

/// Hard cap on ACA rank, bounding breakdown pathologies.
pub const ACA_RANK_CAP: usize = 256;

pub enum AcaOutcome {
    /// Factors (u, v) with the block approximated by u * v^T.
    LowRank { u: Mat, v: Mat },
    /// Adaptive tolerance was not reached within the rank cap; the caller
    /// falls back to dense storage.
    CapExhausted,
}

pub enum AcaStop {
    /// Stop when ||u_r|| * ||v_r|| <= eps * ||approximant||_F.
    Adaptive(f64),
    /// Run exactly k terms (or to exhaustion).
    Fixed(usize),
}

/// Cross-approximate the block rows [rlo, rhi) x cols [clo, chi).
///
/// Pivoting: the first pivot row is row 0 of the block; each subsequent pivot
/// row maximizes |u_r| over unused rows, and the pivot column maximizes the
/// residual within the chosen row over unused columns. An exactly zero
/// residual row terminates the expansion (the block is reproduced exactly,
/// rank 0 encoding an all-zero block).
pub fn aca_block<E: BlockEntry + ?Sized>(
    entry: &E,
    rlo: usize,
    rhi: usize,
    clo: usize,
    chi: usize,
    stop: AcaStop,
) -> AcaOutcome {
    let m = rhi - rlo;
    let p = chi - clo;
    let cap = m.min(p).min(ACA_RANK_CAP);
    let max_terms = match stop {
        AcaStop::Adaptive(_) => cap,
        AcaStop::Fixed(k) => k.min(m).min(p),
    };

    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut vs: Vec<Vec<f64>> = Vec::new();
    let mut row_used = vec![false; m];
    let mut col_used = vec![false; p];
    let mut frob2 = 0.0f64; // ||approximant||_F^2, updated incrementally
    let mut next_row = 0usize;
    let mut converged = matches!(stop, AcaStop::Fixed(_));

    for _r in 0..max_terms {
        let i = next_row;
        row_used[i] = true;
        // residual row i
        let mut vrow = vec![0.0; p];
        entry.fill_row(rlo + i, clo, &mut vrow);
        for l in 0..us.len() {
            let ui = us[l][i];
            if ui != 0.0 {
                for (vj, wl) in vrow.iter_mut().zip(&vs[l]) {
                    *vj -= ui * wl;
                }
            }
        }
        // pivot column: max |residual| over unused columns
        let mut j_piv = usize::MAX;
        let mut best = 0.0f64;
        for (j, &vj) in vrow.iter().enumerate() {
            if !col_used[j] && vj.abs() > best {
                best = vj.abs();
                j_piv = j;
            }
        }
        if j_piv == usize::MAX || best == 0.0 {
            // exact reproduction of every unused row seen so far
            converged = true;
            break;
        }
        col_used[j_piv] = true;
        let delta = vrow[j_piv];
        // residual column at the pivot, scaled by 1/delta
        let mut ucol = vec![0.0; m];
        entry.fill_col(clo + j_piv, rlo, &mut ucol);
        for l in 0..us.len() {
            let vj = vs[l][j_piv];
            if vj != 0.0 {
                for (ui, ul) in ucol.iter_mut().zip(&us[l]) {
                    *ui -= vj * ul;
                }
            }
        }
        let inv = 1.0 / delta;
        for ui in ucol.iter_mut() {
            *ui *= inv;
        }

        let unorm2 = dot(&ucol, &ucol);
        let vnorm2 = dot(&vrow, &vrow);

        // a candidate whose norm contribution is already below the tolerance
        // relative to the accumulated approximant is discarded: the expansion
        // has converged with the terms committed so far
        if let AcaStop::Adaptive(eps) = stop {
            if !us.is_empty() && (unorm2 * vnorm2).sqrt() <= eps * frob2.max(0.0).sqrt() {
                converged = true;
                break;
            }
        }

        let mut cross = 0.0;
        for l in 0..us.len() {
            cross += dot(&us[l], &ucol) * dot(&vs[l], &vrow);
        }
        frob2 += 2.0 * cross + unorm2 * vnorm2;

        // next pivot row before moving the buffers
        next_row = usize::MAX;
        let mut best_u = 0.0f64;
        for (ii, &ui) in ucol.iter().enumerate() {
            if !row_used[ii] && ui.abs() > best_u {
                best_u = ui.abs();
                next_row = ii;
            }
        }

        us.push(ucol);
        vs.push(vrow);

        if next_row == usize::MAX {
            // all rows used
            converged = true;
            break;
        }
    }

    if !converged {
        return AcaOutcome::CapExhausted;
    }
    let r = us.len();
    let mut u = Mat::zeros(m, r);
    let mut v = Mat::zeros(p, r);
    for l in 0..r {
        for i in 0..m {
            u[(i, l)] = us[l][i];
        }
        for j in 0..p {
            v[(j, l)] = vs[l][j];
        }
    }
    AcaOutcome::LowRank { u, v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::gemm_nt;

    struct DenseOracle(Mat);
    impl BlockEntry for DenseOracle {
        fn entry(&self, i: usize, j: usize) -> f64 {
            self.0[(i, j)]
        }
    }

    #[test]
    fn exact_on_rank_one() {
        let g: Vec<f64> = (0..20).map(|i| 0.5 + (i as f64 * 0.3).sin()).collect();
        let m = Mat::from_fn(20, 20, |i, j| g[i] * g[j]);
        let out = aca_block(&DenseOracle(m.clone()), 0, 20, 0, 20, AcaStop::Adaptive(1e-10));
        match out {
            AcaOutcome::LowRank { u, v } => {
                assert_eq!(u.ncols(), 1);
                let mut rec = Mat::zeros(20, 20);
                gemm_nt(&mut rec, 1.0, &u, &v);
                rec.sub_assign(&m);
                assert!(rec.frob_norm() < 1e-14 * m.frob_norm());
            }
            _ => panic!("expected low rank"),
        }
    }

    #[test]
    fn zero_block_gets_rank_zero() {
        let m = Mat::zeros(8, 5);
        match aca_block(&DenseOracle(m), 0, 8, 0, 5, AcaStop::Adaptive(1e-8)) {
            AcaOutcome::LowRank { u, v } => {
                assert_eq!(u.ncols(), 0);
                assert_eq!(v.ncols(), 0);
            }
            _ => panic!("expected rank-0"),
        }
    }

    #[test]
    fn fixed_rank_runs_exactly_k_terms() {
        let m = Mat::from_fn(16, 12, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
        match aca_block(&DenseOracle(m), 0, 16, 0, 12, AcaStop::Fixed(5)) {
            AcaOutcome::LowRank { u, v } => {
                assert_eq!(u.ncols(), 5);
                assert_eq!(v.ncols(), 5);
            }
            _ => panic!("fixed mode never falls back"),
        }
    }

    #[test]
    fn adaptive_reaches_tolerance_on_smooth_block() {
        // smooth kernel evaluated on well-separated clusters
        let m = Mat::from_fn(40, 40, |i, j| {
            let x = i as f64 / 40.0;
            let y = 4.0 + j as f64 / 40.0;
            (-(x - y).abs()).exp()
        });
        let eps = 1e-6;
        match aca_block(&DenseOracle(m.clone()), 0, 40, 0, 40, AcaStop::Adaptive(eps)) {
            AcaOutcome::LowRank { u, v } => {
                assert!(u.ncols() < 12, "rank {}", u.ncols());
                let mut rec = Mat::zeros(40, 40);
                gemm_nt(&mut rec, 1.0, &u, &v);
                rec.sub_assign(&m);
                assert!(rec.frob_norm() <= 50.0 * eps * m.frob_norm());
            }
            _ => panic!("expected convergence"),
        }
    }
}
