//! Mutable recursive block trees backing the hierarchical factorization.
//!
//! A `WNode` mirrors the block-cluster-tree structure of one block: a dense
//! leaf, a low-rank leaf (u * v^T), or a 2x2 branch. Diagonal blocks carry
//! only their lower triangle (the upper child slot is empty); off-diagonal
//! blocks carry all four children. Every operation recurses over this shape,
//! truncating after each low-rank addition in a fixed canonical order, so
//! results are independent of the parallel schedule.

use crate::dense::{dot, gemm_nt, Mat};
use crate::hmatrix::{truncate_lowrank, truncate_lowrank_prefixed, HMatrix, LeafData, RankPolicy};
use crate::geometry::BlockKind;

pub(crate) enum WNode {
    Dense(Mat),
    LowRank { u: Mat, v: Mat },
    Branch(Box<WBranch>),
}

pub(crate) struct WBranch {
    pub nrows: usize,
    pub ncols: usize,
    /// rows in the first row child / cols in the first column child
    pub rsplit: usize,
    pub csplit: usize,
    /// children[row][col]; children[0][1] is None on the diagonal path
    pub ch: [[Option<WNode>; 2]; 2],
}

impl WNode {
    pub(crate) fn nrows(&self) -> usize {
        match self {
            WNode::Dense(m) => m.nrows(),
            WNode::LowRank { u, .. } => u.nrows(),
            WNode::Branch(b) => b.nrows,
        }
    }

    pub(crate) fn ncols(&self) -> usize {
        match self {
            WNode::Dense(m) => m.ncols(),
            WNode::LowRank { v, .. } => v.nrows(),
            WNode::Branch(b) => b.ncols,
        }
    }

    pub(crate) fn max_rank(&self) -> usize {
        match self {
            WNode::Dense(_) => 0,
            WNode::LowRank { u, .. } => u.ncols(),
            WNode::Branch(b) => {
                let mut r = 0;
                for row in &b.ch {
                    for c in row.iter().flatten() {
                        r = r.max(c.max_rank());
                    }
                }
                r
            }
        }
    }

    pub(crate) fn clone_node(&self) -> WNode {
        match self {
            WNode::Dense(m) => WNode::Dense(m.clone()),
            WNode::LowRank { u, v } => WNode::LowRank { u: u.clone(), v: v.clone() },
            WNode::Branch(b) => WNode::Branch(Box::new(WBranch {
                nrows: b.nrows,
                ncols: b.ncols,
                rsplit: b.rsplit,
                csplit: b.csplit,
                ch: [
                    [b.ch[0][0].as_ref().map(|c| c.clone_node()), b.ch[0][1].as_ref().map(|c| c.clone_node())],
                    [b.ch[1][0].as_ref().map(|c| c.clone_node()), b.ch[1][1].as_ref().map(|c| c.clone_node())],
                ],
            })),
        }
    }
}

/// Low-rank working leaves below this dimension are cheaper to carry dense:
/// additions become plain GEMMs instead of re-orthogonalize-and-SVD cycles,
/// and the storage difference at these sizes is marginal.
const DENSE_SWITCH_DIM: usize = 64;

fn leaf_to_node(view: crate::hmatrix::LeafView<'_>, policy: RankPolicy) -> WNode {
    match view.data {
        LeafData::Dense(m) => {
            if view.transposed {
                WNode::Dense(m.transpose())
            } else {
                WNode::Dense(m.clone())
            }
        }
        LeafData::LowRank { u, v } => {
            let (a, b) = if view.transposed { (v, u) } else { (u, v) };
            if a.nrows().min(b.nrows()) <= DENSE_SWITCH_DIM {
                let mut m = Mat::zeros(a.nrows(), b.nrows());
                gemm_nt(&mut m, 1.0, a, b);
                return WNode::Dense(m);
            }
            // orthogonalize once so later truncated additions can rely on an
            // orthogonal-prefix invariant
            let (uu, vv) = truncate_lowrank(a, b, policy);
            WNode::LowRank { u: uu, v: vv }
        }
    }
}

/// Materialize the lower-triangular working tree of a diagonal block.
pub(crate) fn build_lower(h: &HMatrix, block: u32, policy: RankPolicy) -> WNode {
    let bt = h.block_tree();
    let ct = h.cluster_tree();
    let b = bt.block(block);
    debug_assert_eq!(b.row, b.col);
    match b.kind {
        BlockKind::Subdivided(ch) => {
            let rn = ct.node(b.row);
            let rc = ct.node(b.row).children.unwrap();
            let rsplit = ct.node(rc[0]).len();
            WNode::Branch(Box::new(WBranch {
                nrows: rn.len(),
                ncols: rn.len(),
                rsplit,
                csplit: rsplit,
                ch: [
                    [Some(build_lower(h, ch[0], policy)), None],
                    [Some(build_full(h, ch[2], policy)), Some(build_lower(h, ch[3], policy))],
                ],
            }))
        }
        // a degenerate admissible diagonal block is materialized dense so the
        // factorization can pivot through it
        BlockKind::AdmissibleLeaf => {
            let view = h.leaf(block);
            match leaf_to_node(view, policy) {
                WNode::LowRank { u, v } => {
                    let mut m = Mat::zeros(u.nrows(), v.nrows());
                    gemm_nt(&mut m, 1.0, &u, &v);
                    WNode::Dense(m)
                }
                other => other,
            }
        }
        BlockKind::InadmissibleLeaf => leaf_to_node(h.leaf(block), policy),
    }
}

/// Materialize a full (off-diagonal) block.
pub(crate) fn build_full(h: &HMatrix, block: u32, policy: RankPolicy) -> WNode {
    let bt = h.block_tree();
    let ct = h.cluster_tree();
    let b = bt.block(block);
    match b.kind {
        BlockKind::Subdivided(ch) => {
            let (rn, cn) = (ct.node(b.row), ct.node(b.col));
            let rc = ct.node(b.row).children.unwrap();
            let cc = ct.node(b.col).children.unwrap();
            WNode::Branch(Box::new(WBranch {
                nrows: rn.len(),
                ncols: cn.len(),
                rsplit: ct.node(rc[0]).len(),
                csplit: ct.node(cc[0]).len(),
                ch: [
                    [Some(build_full(h, ch[0], policy)), Some(build_full(h, ch[1], policy))],
                    [Some(build_full(h, ch[2], policy)), Some(build_full(h, ch[3], policy))],
                ],
            }))
        }
        _ => leaf_to_node(h.leaf(block), policy),
    }
}

// ---------------------------------------------------------------------------
// block * thin dense products
// ---------------------------------------------------------------------------

/// rows [doff..) of dst (a nc-column row-major buffer) +=
/// alpha * node * rows [soff..) of src.
pub(crate) fn apply_thin_raw(
    node: &WNode,
    src: &[f64],
    soff: usize,
    dst: &mut [f64],
    doff: usize,
    nc: usize,
    alpha: f64,
) {
    match node {
        WNode::Dense(d) => {
            for i in 0..d.nrows() {
                let drow = &mut dst[(doff + i) * nc..(doff + i + 1) * nc];
                for k in 0..d.ncols() {
                    let a = alpha * d[(i, k)];
                    if a != 0.0 {
                        let srow = &src[(soff + k) * nc..(soff + k + 1) * nc];
                        for j in 0..nc {
                            drow[j] += a * srow[j];
                        }
                    }
                }
            }
        }
        WNode::LowRank { u, v } => {
            let r = u.ncols();
            if r == 0 {
                return;
            }
            // t = v^T * src_window, r x nc
            let mut t = vec![0.0; r * nc];
            for q in 0..v.nrows() {
                let srow = &src[(soff + q) * nc..(soff + q + 1) * nc];
                let vrow = v.row(q);
                for l in 0..r {
                    let vl = vrow[l];
                    if vl != 0.0 {
                        let trow = &mut t[l * nc..(l + 1) * nc];
                        for j in 0..nc {
                            trow[j] += vl * srow[j];
                        }
                    }
                }
            }
            for i in 0..u.nrows() {
                let drow = &mut dst[(doff + i) * nc..(doff + i + 1) * nc];
                let urow = u.row(i);
                for l in 0..r {
                    let a = alpha * urow[l];
                    if a != 0.0 {
                        let trow = &t[l * nc..(l + 1) * nc];
                        for j in 0..nc {
                            drow[j] += a * trow[j];
                        }
                    }
                }
            }
        }
        WNode::Branch(b) => {
            let roff = [0, b.rsplit];
            let coff = [0, b.csplit];
            for i in 0..2 {
                for j in 0..2 {
                    if let Some(c) = &b.ch[i][j] {
                        apply_thin_raw(c, src, soff + coff[j], dst, doff + roff[i], nc, alpha);
                    } else {
                        debug_assert!(i == 0 && j == 1, "only the diagonal upper slot may be empty");
                    }
                }
            }
        }
    }
}

/// out rows += alpha * node * x rows; distinct buffers.
pub(crate) fn apply_thin(node: &WNode, x: &Mat, xoff: usize, out: &mut Mat, ooff: usize, alpha: f64) {
    debug_assert_eq!(x.ncols(), out.ncols());
    let nc = x.ncols();
    if nc == 0 {
        return;
    }
    apply_thin_raw(node, x.data(), xoff, out.data_mut(), ooff, nc, alpha);
}

// ---------------------------------------------------------------------------
// triangular solves with thin right-hand sides
// ---------------------------------------------------------------------------

/// x rows [xoff..xoff+n) := L^{-1} * (those rows), L the diagonal-block tree.
pub(crate) fn solve_lower_thin(l: &WNode, unit: bool, x: &mut Mat, xoff: usize) {
    let nc = x.ncols();
    if nc == 0 {
        return;
    }
    solve_lower_thin_raw(l, unit, x.data_mut(), xoff, nc);
}

fn solve_lower_thin_raw(l: &WNode, unit: bool, x: &mut [f64], xoff: usize, nc: usize) {
    match l {
        WNode::Dense(m) => {
            let n = m.nrows();
            for i in 0..n {
                let (head, tail) = x.split_at_mut((xoff + i) * nc);
                let xrow = &mut tail[..nc];
                for k in 0..i {
                    let lik = m[(i, k)];
                    if lik != 0.0 {
                        let xk = &head[(xoff + k) * nc..(xoff + k + 1) * nc];
                        for j in 0..nc {
                            xrow[j] -= lik * xk[j];
                        }
                    }
                }
                if !unit {
                    let inv = 1.0 / m[(i, i)];
                    for v in xrow.iter_mut() {
                        *v *= inv;
                    }
                }
            }
        }
        WNode::Branch(b) => {
            let l00 = b.ch[0][0].as_ref().unwrap();
            let l10 = b.ch[1][0].as_ref().unwrap();
            let l11 = b.ch[1][1].as_ref().unwrap();
            solve_lower_thin_raw(l00, unit, x, xoff, nc);
            let (head, tail) = x.split_at_mut((xoff + b.rsplit) * nc);
            apply_thin_raw(l10, head, xoff, tail, 0, nc, -1.0);
            solve_lower_thin_raw(l11, unit, x, xoff + b.rsplit, nc);
        }
        WNode::LowRank { .. } => unreachable!("diagonal factor blocks are dense or branch"),
    }
}

/// X := X * L^{-T} for a dense X, columns [coff..) matching L's range.
fn solve_right_dense(x: &mut Mat, coff: usize, l: &WNode, unit: bool) {
    match l {
        WNode::Dense(m) => {
            let k = m.nrows();
            for r in 0..x.nrows() {
                let row = x.row_mut(r);
                for i in 0..k {
                    let mut s = row[coff + i];
                    for t in 0..i {
                        s -= m[(i, t)] * row[coff + t];
                    }
                    row[coff + i] = if unit { s } else { s / m[(i, i)] };
                }
            }
        }
        WNode::Branch(b) => {
            let l00 = b.ch[0][0].as_ref().unwrap();
            let l10 = b.ch[1][0].as_ref().unwrap();
            let l11 = b.ch[1][1].as_ref().unwrap();
            solve_right_dense(x, coff, l00, unit);
            // X1 -= X0 * L10^T; copy the source column window once per level
            let s0 = b.rsplit;
            let mut src = Mat::zeros(x.nrows(), s0);
            for r in 0..x.nrows() {
                src.row_mut(r).copy_from_slice(&x.row(r)[coff..coff + s0]);
            }
            apply_right_t_dense(x, &src, 0, coff + s0, l10, -1.0);
            solve_right_dense(x, coff + s0, l11, unit);
        }
        WNode::LowRank { .. } => unreachable!(),
    }
}

/// x[:, dstc..dstc+b.nrows) += alpha * src[:, srcc..srcc+b.ncols) * b^T.
fn apply_right_t_dense(x: &mut Mat, src: &Mat, srcc: usize, dstc: usize, b: &WNode, alpha: f64) {
    match b {
        WNode::Dense(d) => {
            for r in 0..x.nrows() {
                let (q, p) = (d.nrows(), d.ncols());
                for i in 0..q {
                    let mut s = 0.0;
                    let srow = &src.row(r)[srcc..srcc + p];
                    let drow = d.row(i);
                    for j in 0..p {
                        s += drow[j] * srow[j];
                    }
                    x.row_mut(r)[dstc + i] += alpha * s;
                }
            }
        }
        WNode::LowRank { u, v } => {
            let rk = u.ncols();
            if rk == 0 {
                return;
            }
            let p = v.nrows();
            for r in 0..x.nrows() {
                let mut t = vec![0.0; rk];
                {
                    let srow = &src.row(r)[srcc..srcc + p];
                    for q in 0..p {
                        let sv = srow[q];
                        if sv != 0.0 {
                            let vrow = v.row(q);
                            for l in 0..rk {
                                t[l] += sv * vrow[l];
                            }
                        }
                    }
                }
                let xrow = x.row_mut(r);
                for i in 0..u.nrows() {
                    xrow[dstc + i] += alpha * dot(u.row(i), &t);
                }
            }
        }
        WNode::Branch(br) => {
            let roff = [0, br.rsplit];
            let coff = [0, br.csplit];
            for i in 0..2 {
                for j in 0..2 {
                    if let Some(c) = &br.ch[i][j] {
                        apply_right_t_dense(x, src, srcc + coff[j], dstc + roff[i], c, alpha);
                    }
                }
            }
        }
    }
}

/// X := X * L^{-T} (optionally followed by a D^{-1} column scaling done by
/// the caller), the off-diagonal solve of the block factorization.
pub(crate) fn solve_right_lower_transpose(x: &mut WNode, l: &WNode, unit: bool, policy: RankPolicy) {
    match x {
        WNode::LowRank { v, .. } => solve_lower_thin(l, unit, v, 0),
        WNode::Dense(m) => solve_right_dense(m, 0, l, unit),
        WNode::Branch(b) => {
            let lb = match l {
                WNode::Branch(lb) => lb,
                _ => unreachable!("subdivided block against a leaf diagonal"),
            };
            let l00 = lb.ch[0][0].as_ref().unwrap();
            let l10 = lb.ch[1][0].as_ref().unwrap();
            let l11 = lb.ch[1][1].as_ref().unwrap();
            let big = b.nrows + b.ncols >= 1024;
            let do_row = |row: &mut [Option<WNode>; 2]| {
                let (x0s, x1s) = row.split_at_mut(1);
                let x0 = x0s[0].as_mut().unwrap();
                let x1 = x1s[0].as_mut().unwrap();
                solve_right_lower_transpose(x0, l00, unit, policy);
                mul_add(x1, x0, l10, -1.0, policy);
                solve_right_lower_transpose(x1, l11, unit, policy);
            };
            let (row0, row1) = b.ch.split_at_mut(1);
            if big {
                rayon::join(|| do_row(&mut row0[0]), || do_row(&mut row1[0]));
            } else {
                do_row(&mut row0[0]);
                do_row(&mut row1[0]);
            }
        }
    }
}

/// Scale the columns of a block by d (length = block cols).
pub(crate) fn scale_cols_tree(x: &mut WNode, d: &[f64]) {
    match x {
        WNode::Dense(m) => m.scale_cols(d),
        WNode::LowRank { v, .. } => {
            for q in 0..v.nrows() {
                let s = d[q];
                for val in v.row_mut(q) {
                    *val *= s;
                }
            }
        }
        WNode::Branch(b) => {
            let cs = b.csplit;
            for row in b.ch.iter_mut() {
                if let Some(c) = &mut row[0] {
                    scale_cols_tree(c, &d[..cs]);
                }
                if let Some(c) = &mut row[1] {
                    scale_cols_tree(c, &d[cs..]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// truncated products and additions
// ---------------------------------------------------------------------------

/// C += alpha * A * B^T, where A is (r x m), B is (s x m), C is (r x s) in
/// block coordinates. Low-rank additions are truncated immediately under the
/// given policy.
pub(crate) fn mul_add(c: &mut WNode, a: &WNode, b: &WNode, alpha: f64, policy: RankPolicy) {
    match (a, b) {
        (WNode::LowRank { u: ua, v: va }, WNode::LowRank { u: ub, v: vb }) => {
            // contract through the smaller inner rank
            let (ra, rb) = (ua.ncols(), ub.ncols());
            if ra == 0 || rb == 0 {
                return;
            }
            let mut g = Mat::zeros(ra, rb);
            crate::dense::gemm_tn(&mut g, alpha, va, vb);
            if rb <= ra {
                let mut uc = Mat::zeros(ua.nrows(), rb);
                crate::dense::gemm_nn(&mut uc, 1.0, ua, &g);
                add_lowrank(c, &uc, ub, policy);
            } else {
                let mut wc = Mat::zeros(ub.nrows(), ra);
                crate::dense::gemm_nt(&mut wc, 1.0, ub, &g);
                add_lowrank(c, ua, &wc, policy);
            }
        }
        (WNode::LowRank { u: ua, v: va }, _) => {
            if ua.ncols() == 0 {
                return;
            }
            let mut w = Mat::zeros(b.nrows(), ua.ncols());
            let t0 = std::time::Instant::now();
            apply_thin(b, va, 0, &mut w, 0, alpha);
            prof::APPLY_NS.fetch_add(t0.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
            add_lowrank(c, ua, &w, policy);
        }
        (_, WNode::LowRank { u: ub, v: vb }) => {
            if ub.ncols() == 0 {
                return;
            }
            let mut w = Mat::zeros(a.nrows(), ub.ncols());
            apply_thin(a, vb, 0, &mut w, 0, alpha);
            add_lowrank(c, &w, ub, policy);
        }
        (WNode::Dense(da), WNode::Dense(db)) => {
            let t0 = std::time::Instant::now();
            let mut p = Mat::zeros(da.nrows(), db.nrows());
            gemm_nt(&mut p, 1.0, da, db);
            prof::GEMM_NS.fetch_add(t0.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
            add_dense(c, &p, alpha, policy);
        }
        (WNode::Dense(da), WNode::Branch(_)) => {
            // dense leaf against a subdivided block: da is small, so carry
            // the product densely; t = alpha * B * A^T, contribution = t^T
            let at = da.transpose();
            let mut t = Mat::zeros(b.nrows(), da.nrows());
            apply_thin(b, &at, 0, &mut t, 0, alpha);
            add_dense(c, &t.transpose(), 1.0, policy);
        }
        (WNode::Branch(_), WNode::Dense(db)) => {
            let dbt = db.transpose();
            let mut w = Mat::zeros(a.nrows(), db.nrows());
            apply_thin(a, &dbt, 0, &mut w, 0, alpha);
            add_dense(c, &w, 1.0, policy);
        }
        (WNode::Branch(ab), WNode::Branch(bb)) => match c {
            WNode::Branch(cb) => {
                debug_assert_eq!(ab.csplit, bb.csplit, "shared middle split");
                let [crow0, crow1] = &mut cb.ch;
                let run_row = |crow: &mut [Option<WNode>; 2], i: usize| {
                    for j in 0..2 {
                        if let Some(cij) = crow[j].as_mut() {
                            for k in 0..2 {
                                let aik = ab.ch[i][k].as_ref().unwrap();
                                let bjk = bb.ch[j][k].as_ref().unwrap();
                                mul_add(cij, aik, bjk, alpha, policy);
                            }
                        }
                    }
                };
                if cb.nrows + cb.ncols >= 1024 {
                    rayon::join(|| run_row(crow0, 0), || run_row(crow1, 1));
                } else {
                    run_row(crow0, 0);
                    run_row(crow1, 1);
                }
            }
            _ => {
                // leaf target under a subdivided product: agglomerate A to
                // low rank first
                let (ua, va) = to_lowrank(a, policy);
                if ua.ncols() == 0 {
                    return;
                }
                let mut w = Mat::zeros(b.nrows(), ua.ncols());
                apply_thin(b, &va, 0, &mut w, 0, alpha);
                add_lowrank(c, &ua, &w, policy);
            }
        },
    }
}

/// C += u * w^T (the scaling is already folded into the factors).
pub(crate) fn add_lowrank(c: &mut WNode, u: &Mat, w: &Mat, policy: RankPolicy) {
    if u.ncols() == 0 {
        return;
    }
    match c {
        WNode::Dense(m) => gemm_nt(m, 1.0, u, w),
        WNode::LowRank { u: cu, v: cv } => {
            let t0 = std::time::Instant::now();
            // a contribution far below the truncation floor cannot survive
            // the sigma > eps * sigma_1 cut; adding it would only burn a
            // re-orthogonalization. |E|_F <= sum_l |u_l| |w_l| and, with the
            // orthogonal-prefix invariant, |C|_F^2 = sum_l |cu_l|^2.
            if let RankPolicy::Adaptive { eps } = policy {
                if cu.ncols() > 0 {
                    let target2 = col_norm2_sum(cu);
                    let bound: f64 = (0..u.ncols())
                        .map(|l| (col_norm2(u, l) * col_norm2(w, l)).sqrt())
                        .sum();
                    if bound <= 1e-2 * eps * target2.sqrt() {
                        return;
                    }
                }
            }
            let prefix = cu.ncols();
            let nu = cu.hcat(u);
            let nv = cv.hcat(w);
            let (tu, tv) = truncate_lowrank_prefixed(&nu, &nv, policy, prefix);
            *cu = tu;
            *cv = tv;
            prof::TRUNCATE_NS.fetch_add(t0.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
            prof::TRUNCATE_CALLS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        WNode::Branch(b) => {
            let u0 = u.row_block(0, b.rsplit);
            let u1 = u.row_block(b.rsplit, u.nrows());
            let w0 = w.row_block(0, b.csplit);
            let w1 = w.row_block(b.csplit, w.nrows());
            if let Some(ch) = b.ch[0][0].as_mut() {
                add_lowrank(ch, &u0, &w0, policy);
            }
            if let Some(ch) = b.ch[0][1].as_mut() {
                add_lowrank(ch, &u0, &w1, policy);
            }
            if let Some(ch) = b.ch[1][0].as_mut() {
                add_lowrank(ch, &u1, &w0, policy);
            }
            if let Some(ch) = b.ch[1][1].as_mut() {
                add_lowrank(ch, &u1, &w1, policy);
            }
        }
    }
}

/// C += alpha * P for a dense P covering the whole block.
pub(crate) fn add_dense(c: &mut WNode, p: &Mat, alpha: f64, policy: RankPolicy) {
    match c {
        WNode::Dense(m) => {
            for (x, y) in m.data_mut().iter_mut().zip(p.data()) {
                *x += alpha * y;
            }
        }
        WNode::LowRank { .. } => {
            // compact the dense contribution first; its numerical rank is
            // usually far below its dimensions
            let (up, sp, vp) = crate::dense::svd_small(p);
            let smax = sp.first().copied().unwrap_or(0.0);
            let q = sp.iter().take_while(|&&x| x > smax * 1e-15).count();
            if q == 0 {
                return;
            }
            let mut uq = Mat::zeros(up.nrows(), q);
            for i in 0..up.nrows() {
                for l in 0..q {
                    uq[(i, l)] = up[(i, l)] * sp[l] * alpha;
                }
            }
            let mut vq = Mat::zeros(vp.nrows(), q);
            for i in 0..vp.nrows() {
                for l in 0..q {
                    vq[(i, l)] = vp[(i, l)];
                }
            }
            add_lowrank(c, &uq, &vq, policy);
        }
        WNode::Branch(b) => {
            let quad = |rlo: usize, rhi: usize, clo: usize, chi: usize| {
                let mut q = Mat::zeros(rhi - rlo, chi - clo);
                for i in rlo..rhi {
                    q.row_mut(i - rlo).copy_from_slice(&p.row(i)[clo..chi]);
                }
                q
            };
            let (rs, cs) = (b.rsplit, b.csplit);
            let (nr, ncl) = (b.nrows, b.ncols);
            if let Some(ch) = b.ch[0][0].as_mut() {
                add_dense(ch, &quad(0, rs, 0, cs), alpha, policy);
            }
            if let Some(ch) = b.ch[0][1].as_mut() {
                add_dense(ch, &quad(0, rs, cs, ncl), alpha, policy);
            }
            if let Some(ch) = b.ch[1][0].as_mut() {
                add_dense(ch, &quad(rs, nr, 0, cs), alpha, policy);
            }
            if let Some(ch) = b.ch[1][1].as_mut() {
                add_dense(ch, &quad(rs, nr, cs, ncl), alpha, policy);
            }
        }
    }
}

#[allow(dead_code)]
fn to_lowrank_dense(m: &Mat, policy: RankPolicy) -> (Mat, Mat) {
    truncate_lowrank(m, &Mat::identity(m.ncols()), policy)
}

/// Agglomerate an arbitrary block into truncated low-rank factors.
pub(crate) fn to_lowrank(node: &WNode, policy: RankPolicy) -> (Mat, Mat) {
    match node {
        WNode::Dense(m) => to_lowrank_dense(m, policy),
        WNode::LowRank { u, v } => (u.clone(), v.clone()),
        WNode::Branch(b) => {
            let parts: Vec<(usize, usize, Mat, Mat)> = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)]
                .iter()
                .filter_map(|&(i, j)| {
                    b.ch[i][j].as_ref().map(|c| {
                        let (u, v) = to_lowrank(c, policy);
                        (i, j, u, v)
                    })
                })
                .collect();
            let total: usize = parts.iter().map(|(_, _, u, _)| u.ncols()).sum();
            let mut bu = Mat::zeros(b.nrows, total);
            let mut bv = Mat::zeros(b.ncols, total);
            let roff = [0, b.rsplit];
            let coff = [0, b.csplit];
            let mut col = 0;
            for (i, j, u, v) in parts {
                for r in 0..u.nrows() {
                    for l in 0..u.ncols() {
                        bu[(roff[i] + r, col + l)] = u[(r, l)];
                    }
                }
                for r in 0..v.nrows() {
                    for l in 0..v.ncols() {
                        bv[(coff[j] + r, col + l)] = v[(r, l)];
                    }
                }
                col += u.ncols();
            }
            truncate_lowrank(&bu, &bv, policy)
        }
    }
}

// ---------------------------------------------------------------------------
// vector kernels
// ---------------------------------------------------------------------------

/// dst += alpha * node * src (block-local windows, disjoint buffers).
pub(crate) fn apply_vec(node: &WNode, src: &[f64], dst: &mut [f64], alpha: f64) {
    match node {
        WNode::Dense(d) => {
            for i in 0..d.nrows() {
                dst[i] += alpha * dot(d.row(i), src);
            }
        }
        WNode::LowRank { u, v } => {
            let r = u.ncols();
            if r == 0 {
                return;
            }
            let mut t = vec![0.0; r];
            for q in 0..v.nrows() {
                let s = src[q];
                if s != 0.0 {
                    let vrow = v.row(q);
                    for l in 0..r {
                        t[l] += s * vrow[l];
                    }
                }
            }
            for i in 0..u.nrows() {
                dst[i] += alpha * dot(u.row(i), &t);
            }
        }
        WNode::Branch(b) => {
            let (s0, s1) = src.split_at(b.csplit);
            let (d0, d1) = dst.split_at_mut(b.rsplit);
            if let Some(c) = &b.ch[0][0] {
                apply_vec(c, s0, d0, alpha);
            }
            if let Some(c) = &b.ch[0][1] {
                apply_vec(c, s1, d0, alpha);
            }
            if let Some(c) = &b.ch[1][0] {
                apply_vec(c, s0, d1, alpha);
            }
            if let Some(c) = &b.ch[1][1] {
                apply_vec(c, s1, d1, alpha);
            }
        }
    }
}

/// dst += alpha * node^T * src.
pub(crate) fn apply_transpose_vec(node: &WNode, src: &[f64], dst: &mut [f64], alpha: f64) {
    match node {
        WNode::Dense(d) => {
            for i in 0..d.nrows() {
                let s = alpha * src[i];
                if s != 0.0 {
                    let row = d.row(i);
                    for j in 0..d.ncols() {
                        dst[j] += s * row[j];
                    }
                }
            }
        }
        WNode::LowRank { u, v } => {
            let r = u.ncols();
            if r == 0 {
                return;
            }
            let mut t = vec![0.0; r];
            for q in 0..u.nrows() {
                let s = src[q];
                if s != 0.0 {
                    let urow = u.row(q);
                    for l in 0..r {
                        t[l] += s * urow[l];
                    }
                }
            }
            for i in 0..v.nrows() {
                dst[i] += alpha * dot(v.row(i), &t);
            }
        }
        WNode::Branch(b) => {
            let (s0, s1) = src.split_at(b.rsplit);
            let (d0, d1) = dst.split_at_mut(b.csplit);
            if let Some(c) = &b.ch[0][0] {
                apply_transpose_vec(c, s0, d0, alpha);
            }
            if let Some(c) = &b.ch[0][1] {
                apply_transpose_vec(c, s0, d1, alpha);
            }
            if let Some(c) = &b.ch[1][0] {
                apply_transpose_vec(c, s1, d0, alpha);
            }
            if let Some(c) = &b.ch[1][1] {
                apply_transpose_vec(c, s1, d1, alpha);
            }
        }
    }
}

/// x := L^{-1} x over the block-local window.
pub(crate) fn solve_lower_vec_tree(l: &WNode, unit: bool, x: &mut [f64]) {
    match l {
        WNode::Dense(m) => {
            for i in 0..m.nrows() {
                let s = dot(&m.row(i)[..i], &x[..i]);
                let num = x[i] - s;
                x[i] = if unit { num } else { num / m[(i, i)] };
            }
        }
        WNode::Branch(b) => {
            let (x0, x1) = x.split_at_mut(b.rsplit);
            solve_lower_vec_tree(b.ch[0][0].as_ref().unwrap(), unit, x0);
            apply_vec(b.ch[1][0].as_ref().unwrap(), x0, x1, -1.0);
            solve_lower_vec_tree(b.ch[1][1].as_ref().unwrap(), unit, x1);
        }
        WNode::LowRank { .. } => unreachable!(),
    }
}

/// x := L^{-T} x.
pub(crate) fn solve_lower_transpose_vec_tree(l: &WNode, unit: bool, x: &mut [f64]) {
    match l {
        WNode::Dense(m) => {
            let n = m.nrows();
            for i in (0..n).rev() {
                let mut s = x[i];
                for k in i + 1..n {
                    s -= m[(k, i)] * x[k];
                }
                x[i] = if unit { s } else { s / m[(i, i)] };
            }
        }
        WNode::Branch(b) => {
            let (x0, x1) = x.split_at_mut(b.rsplit);
            solve_lower_transpose_vec_tree(b.ch[1][1].as_ref().unwrap(), unit, x1);
            apply_transpose_vec(b.ch[1][0].as_ref().unwrap(), x1, x0, -1.0);
            solve_lower_transpose_vec_tree(b.ch[0][0].as_ref().unwrap(), unit, x0);
        }
        WNode::LowRank { .. } => unreachable!(),
    }
}

/// x := L x (in place), used for sampling Z = L xi.
pub(crate) fn apply_lower_vec_tree(l: &WNode, unit: bool, x: &mut [f64]) {
    match l {
        WNode::Dense(m) => {
            for i in (0..m.nrows()).rev() {
                let s = dot(&m.row(i)[..i], &x[..i]);
                x[i] = s + if unit { x[i] } else { m[(i, i)] * x[i] };
            }
        }
        WNode::Branch(b) => {
            let (x0, x1) = x.split_at_mut(b.rsplit);
            apply_lower_vec_tree(b.ch[1][1].as_ref().unwrap(), unit, x1);
            apply_vec(b.ch[1][0].as_ref().unwrap(), x0, x1, 1.0);
            apply_lower_vec_tree(b.ch[0][0].as_ref().unwrap(), unit, x0);
        }
        WNode::LowRank { .. } => unreachable!(),
    }
}

/// Expand a working tree into a dense matrix window (tests, diagnostics).
pub(crate) fn wnode_to_dense(node: &WNode, out: &mut Mat, roff: usize, coff: usize) {
    match node {
        WNode::Dense(m) => {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out[(roff + i, coff + j)] += m[(i, j)];
                }
            }
        }
        WNode::LowRank { u, v } => {
            for i in 0..u.nrows() {
                for j in 0..v.nrows() {
                    out[(roff + i, coff + j)] += dot(u.row(i), v.row(j));
                }
            }
        }
        WNode::Branch(b) => {
            let roffs = [0, b.rsplit];
            let coffs = [0, b.csplit];
            for i in 0..2 {
                for j in 0..2 {
                    if let Some(c) = &b.ch[i][j] {
                        wnode_to_dense(c, out, roff + roffs[i], coff + coffs[j]);
                    }
                }
            }
        }
    }
}

// temporary instrumentation for performance tuning
pub mod prof {
    use std::sync::atomic::{AtomicU64, Ordering};
    pub static TRUNCATE_NS: AtomicU64 = AtomicU64::new(0);
    pub static TRUNCATE_CALLS: AtomicU64 = AtomicU64::new(0);
    pub static APPLY_NS: AtomicU64 = AtomicU64::new(0);
    pub static SOLVE_DENSE_NS: AtomicU64 = AtomicU64::new(0);
    pub static GEMM_NS: AtomicU64 = AtomicU64::new(0);
    pub static CLONE_NS: AtomicU64 = AtomicU64::new(0);
    pub fn report() -> String {
        format!(
            "truncate {:.2}s/{} apply {:.2}s solve_dense {:.2}s gemm {:.2}s clone {:.2}s",
            TRUNCATE_NS.load(Ordering::Relaxed) as f64 / 1e9,
            TRUNCATE_CALLS.load(Ordering::Relaxed),
            APPLY_NS.load(Ordering::Relaxed) as f64 / 1e9,
            SOLVE_DENSE_NS.load(Ordering::Relaxed) as f64 / 1e9,
            GEMM_NS.load(Ordering::Relaxed) as f64 / 1e9,
            CLONE_NS.load(Ordering::Relaxed) as f64 / 1e9,
        )
    }
}

fn col_norm2(m: &Mat, l: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..m.nrows() {
        let x = m[(i, l)];
        s += x * x;
    }
    s
}

fn col_norm2_sum(m: &Mat) -> f64 {
    m.data().iter().map(|x| x * x).sum()
}
