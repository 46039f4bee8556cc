//! Small dense-matrix kernels backing leaf blocks, truncation, and the dense
//! oracle path of the likelihood. Row-major storage throughout.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    nr: usize,
    nc: usize,
    a: Vec<f64>,
}

impl Mat {
    pub fn zeros(nr: usize, nc: usize) -> Self {
        Mat { nr, nc, a: vec![0.0; nr * nc] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(nr: usize, nc: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut a = Vec::with_capacity(nr * nc);
        for i in 0..nr {
            for j in 0..nc {
                a.push(f(i, j));
            }
        }
        Mat { nr, nc, a }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nr = rows.len();
        let nc = if nr == 0 { 0 } else { rows[0].len() };
        let mut a = Vec::with_capacity(nr * nc);
        for r in rows {
            assert_eq!(r.len(), nc, "ragged rows");
            a.extend_from_slice(r);
        }
        Mat { nr, nc, a }
    }

    pub fn nrows(&self) -> usize {
        self.nr
    }

    pub fn ncols(&self) -> usize {
        self.nc
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.nc..(i + 1) * self.nc]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.a[i * self.nc..(i + 1) * self.nc]
    }

    pub fn data(&self) -> &[f64] {
        &self.a
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.nc, self.nr);
        for i in 0..self.nr {
            for j in 0..self.nc {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.a {
            *v *= s;
        }
    }

    /// Multiply row i by d[i].
    pub fn scale_rows(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.nr);
        for i in 0..self.nr {
            let s = d[i];
            for v in self.row_mut(i) {
                *v *= s;
            }
        }
    }

    /// Multiply column j by d[j].
    pub fn scale_cols(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.nc);
        for i in 0..self.nr {
            let row = &mut self.a[i * self.nc..(i + 1) * self.nc];
            for (v, s) in row.iter_mut().zip(d) {
                *v *= s;
            }
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Horizontal concatenation [self | other].
    pub fn hcat(&self, other: &Mat) -> Mat {
        assert_eq!(self.nr, other.nr);
        let mut out = Mat::zeros(self.nr, self.nc + other.nc);
        for i in 0..self.nr {
            out.row_mut(i)[..self.nc].copy_from_slice(self.row(i));
            out.row_mut(i)[self.nc..].copy_from_slice(other.row(i));
        }
        out
    }

    /// Copy of rows [lo, hi).
    pub fn row_block(&self, lo: usize, hi: usize) -> Mat {
        assert!(lo <= hi && hi <= self.nr);
        Mat { nr: hi - lo, nc: self.nc, a: self.a[lo * self.nc..hi * self.nc].to_vec() }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.nr, self.nc), (other.nr, other.nc));
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
    }

    pub fn sub_assign(&mut self, other: &Mat) {
        assert_eq!((self.nr, self.nc), (other.nr, other.nc));
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x -= y;
        }
    }

    /// y = self * x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nc);
        (0..self.nr).map(|i| dot(self.row(i), x)).collect()
    }

    /// y = self^T * x.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nr);
        let mut y = vec![0.0; self.nc];
        for i in 0..self.nr {
            let xi = x[i];
            if xi != 0.0 {
                for (yj, aij) in y.iter_mut().zip(self.row(i)) {
                    *yj += xi * aij;
                }
            }
        }
        y
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i * self.nc + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i * self.nc + j]
    }
}

/// Dot product with four independent accumulators so the reduction
/// vectorizes; strict left-to-right summation would force scalar code.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in 0..chunks {
        let i = c * 8;
        let (xa, xb) = (&a[i..i + 8], &b[i..i + 8]);
        s0 += xa[0] * xb[0] + xa[4] * xb[4];
        s1 += xa[1] * xb[1] + xa[5] * xb[5];
        s2 += xa[2] * xb[2] + xa[6] * xb[6];
        s3 += xa[3] * xb[3] + xa[7] * xb[7];
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

/// C += alpha * A * B.
pub fn gemm_nn(c: &mut Mat, alpha: f64, a: &Mat, b: &Mat) {
    assert_eq!(a.nc, b.nr);
    assert_eq!((c.nr, c.nc), (a.nr, b.nc));
    for i in 0..a.nr {
        let arow = &a.a[i * a.nc..(i + 1) * a.nc];
        let crow = &mut c.a[i * c.nc..(i + 1) * c.nc];
        for (k, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                let s = alpha * aik;
                let brow = &b.a[k * b.nc..(k + 1) * b.nc];
                for j in 0..b.nc {
                    crow[j] += s * brow[j];
                }
            }
        }
    }
}

/// C += alpha * A * B^T. Rows of A against rows of B: contiguous dots.
pub fn gemm_nt(c: &mut Mat, alpha: f64, a: &Mat, b: &Mat) {
    assert_eq!(a.nc, b.nc);
    assert_eq!((c.nr, c.nc), (a.nr, b.nr));
    for i in 0..a.nr {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for j in 0..b.nr {
            crow[j] += alpha * dot(arow, b.row(j));
        }
    }
}

/// C += alpha * A^T * B.
pub fn gemm_tn(c: &mut Mat, alpha: f64, a: &Mat, b: &Mat) {
    assert_eq!(a.nr, b.nr);
    assert_eq!((c.nr, c.nc), (a.nc, b.nc));
    for k in 0..a.nr {
        let arow = a.row(k);
        let brow = &b.a[k * b.nc..(k + 1) * b.nc];
        for i in 0..a.nc {
            let s = alpha * arow[i];
            if s != 0.0 {
                let crow = &mut c.a[i * c.nc..(i + 1) * c.nc];
                for j in 0..b.nc {
                    crow[j] += s * brow[j];
                }
            }
        }
    }
}

/// In-place Cholesky C = L L^T on the lower triangle. Returns log det C.
/// The upper triangle is left untouched.
pub fn cholesky_lower(c: &mut Mat) -> Result<f64> {
    assert_eq!(c.nr, c.nc);
    let n = c.nr;
    let mut logdet = 0.0;
    for j in 0..n {
        // d = c_jj - sum_k l_jk^2
        let mut d = c[(j, j)] - dot(&c.row(j)[..j], &c.row(j)[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { position: j });
        }
        d = d.sqrt();
        c[(j, j)] = d;
        logdet += 2.0 * d.ln();
        let inv = 1.0 / d;
        // split_at_mut to read row j while writing rows below
        let (top, bottom) = c.a.split_at_mut((j + 1) * n);
        let rowj = &top[j * n..j * n + j];
        for (bi, brow) in bottom.chunks_exact_mut(n).enumerate() {
            let i = j + 1 + bi;
            let _ = i;
            let s = dot(&brow[..j], rowj);
            brow[j] = (brow[j] - s) * inv;
        }
    }
    Ok(logdet)
}

/// In-place LDL^T on the lower triangle: unit lower L (implicit unit diagonal,
/// strictly-lower entries stored) and D returned as a vector. Requires all
/// pivots > 0 (positive definite input).
pub fn ldlt_lower(c: &mut Mat) -> Result<Vec<f64>> {
    assert_eq!(c.nr, c.nc);
    let n = c.nr;
    let mut d = vec![0.0; n];
    let mut w = vec![0.0; n];
    for j in 0..n {
        for k in 0..j {
            w[k] = c[(j, k)] * d[k];
        }
        let dj = c[(j, j)] - dot(&c.row(j)[..j], &w[..j]);
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(Error::NotPositiveDefinite { position: j });
        }
        d[j] = dj;
        let inv = 1.0 / dj;
        let (top, bottom) = c.a.split_at_mut((j + 1) * n);
        let _rowj = &top[j * n..j * n + j];
        for brow in bottom.chunks_exact_mut(n) {
            let s = dot(&brow[..j], &w[..j]);
            brow[j] = (brow[j] - s) * inv;
        }
        c[(j, j)] = 1.0;
    }
    Ok(d)
}

/// Solve L x = b in place for lower-triangular L (diagonal taken from L).
pub fn solve_lower_vec(l: &Mat, b: &mut [f64], unit_diag: bool) {
    let n = l.nr;
    assert_eq!(b.len(), n);
    for i in 0..n {
        let s = dot(&l.row(i)[..i], &b[..i]);
        let num = b[i] - s;
        b[i] = if unit_diag { num } else { num / l[(i, i)] };
    }
}

/// Solve L^T x = b in place.
pub fn solve_lower_transpose_vec(l: &Mat, b: &mut [f64], unit_diag: bool) {
    let n = l.nr;
    assert_eq!(b.len(), n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = if unit_diag { s } else { s / l[(i, i)] };
    }
}

/// Solve L X = B in place on the columns of B (B is n x m).
pub fn solve_lower_mat(l: &Mat, b: &mut Mat, unit_diag: bool) {
    let n = l.nr;
    assert_eq!(b.nr, n);
    for i in 0..n {
        let (done, rest) = b.a.split_at_mut(i * b.nc);
        let brow = &mut rest[..b.nc];
        for k in 0..i {
            let lik = l[(i, k)];
            if lik != 0.0 {
                let bk = &done[k * b.nc..(k + 1) * b.nc];
                for j in 0..b.nc {
                    brow[j] -= lik * bk[j];
                }
            }
        }
        if !unit_diag {
            let inv = 1.0 / l[(i, i)];
            for v in brow.iter_mut() {
                *v *= inv;
            }
        }
    }
}

/// Solve X L^T = B in place on the rows of B (forward substitution per row).
pub fn solve_right_lower_transpose_mat(l: &Mat, b: &mut Mat, unit_diag: bool) {
    let n = l.nr;
    assert_eq!(b.nc, n);
    for r in 0..b.nr {
        let row = &mut b.a[r * n..(r + 1) * n];
        for i in 0..n {
            let s = dot(&l.row(i)[..i], &row[..i]);
            let num = row[i] - s;
            row[i] = if unit_diag { num } else { num / l[(i, i)] };
        }
    }
}

/// Thin Householder QR: A (m x n) = Q R with Q (m x k), R (k x n), k = min(m, n).
pub fn thin_qr(a: &Mat) -> (Mat, Mat) {
    let m = a.nr;
    let n = a.nc;
    let k = m.min(n);
    let mut w = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        // Householder vector for column j below the diagonal
        let mut v = vec![0.0; m - j];
        for i in j..m {
            v[i - j] = w[(i, j)];
        }
        let alpha = -v[0].signum() * dot(&v, &v).sqrt();
        if alpha == 0.0 {
            vs.push(vec![0.0; m - j]);
            continue;
        }
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            vs.push(v);
            continue;
        }
        // apply I - 2 v v^T / (v^T v) to w[j.., j..]
        for c in j..n {
            let mut s = 0.0;
            for i in j..m {
                s += v[i - j] * w[(i, c)];
            }
            s *= 2.0 / vnorm2;
            for i in j..m {
                w[(i, c)] -= s * v[i - j];
            }
        }
        vs.push(v);
    }
    let mut r = Mat::zeros(k, n);
    for i in 0..k {
        for j in i..n {
            r[(i, j)] = w[(i, j)];
        }
    }
    // accumulate Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I
    let mut q = Mat::zeros(m, k);
    for i in 0..k {
        q[(i, i)] = 1.0;
    }
    for j in (0..k).rev() {
        let v = &vs[j];
        let vnorm2 = dot(v, v);
        if vnorm2 == 0.0 {
            continue;
        }
        for c in 0..k {
            let mut s = 0.0;
            for i in j..m {
                s += v[i - j] * q[(i, c)];
            }
            s *= 2.0 / vnorm2;
            for i in j..m {
                q[(i, c)] -= s * v[i - j];
            }
        }
    }
    (q, r)
}

/// One-sided Jacobi SVD: A (m x n) = U diag(s) V^T with U (m x n), V (n x n).
/// Intended for the small core matrices of low-rank truncation; singular
/// values are returned in non-increasing order. Internally the columns of A
/// are processed as contiguous rows of the transpose.
pub fn jacobi_svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let m = a.nr;
    let n = a.nc;
    if m < n {
        // work on the transpose: A^T = U' s V'^T  =>  A = V' s U'^T
        let (u, s, v) = jacobi_svd(&a.transpose());
        return (v, s, u);
    }
    // ut rows are the columns of a; vt rows accumulate the right vectors
    let mut ut = a.transpose();
    let mut vt = Mat::identity(n);
    let eps = 1e-15;
    // columns whose norm is negligible against the largest carry no usable
    // singular data; rotating them against each other never converges
    let max_norm2 = (0..n).map(|j| dot(ut.row(j), ut.row(j))).fold(0.0f64, f64::max);
    let floor2 = max_norm2 * 1e-28;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (app, aqq, apq) = {
                    let rp = ut.row(p);
                    let rq = ut.row(q);
                    (dot(rp, rp), dot(rq, rq), dot(rp, rq))
                };
                if app <= floor2 || aqq <= floor2 {
                    continue;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut ut, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    // singular values are the norms of the rows of ut
    let mut sv: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let r = ut.row(j);
            (dot(r, r).sqrt(), j)
        })
        .collect();
    sv.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut u_out = Mat::zeros(m, n);
    let mut v_out = Mat::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    for (k, &(s, j)) in sv.iter().enumerate() {
        s_out.push(s);
        let inv = if s > 0.0 { 1.0 / s } else { 0.0 };
        for i in 0..m {
            u_out[(i, k)] = ut[(j, i)] * inv;
        }
        for i in 0..n {
            v_out[(i, k)] = vt[(j, i)];
        }
    }
    (u_out, s_out, v_out)
}

/// Golub-Reinsch SVD for small matrices: Householder bidiagonalization
/// followed by implicit-shift QR on the bidiagonal, accumulating both
/// transform sets. Returns (U m x n, s, V n x n) with singular values sorted
/// non-increasing. Faster than the Jacobi route on the truncation cores.
pub fn svd_small(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let m = a.nr;
    let n = a.nc;
    if m < n {
        let (u, s, v) = svd_small(&a.transpose());
        return (v, s, u);
    }
    if n == 0 {
        return (Mat::zeros(m, 0), vec![], Mat::zeros(0, 0));
    }
    let mut u = a.clone();
    let mut w = vec![0.0f64; n];
    let mut v = Mat::zeros(n, n);
    let mut rv1 = vec![0.0f64; n];
    let sign = |a: f64, b: f64| if b >= 0.0 { a.abs() } else { -a.abs() };

    // Householder reduction to bidiagonal form
    let (mut g, mut scale, mut anorm) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let l = i + 1;
        rv1[i] = scale * g;
        g = 0.0;
        scale = 0.0;
        if i < m {
            for k in i..m {
                scale += u[(k, i)].abs();
            }
            if scale != 0.0 {
                let mut s = 0.0;
                for k in i..m {
                    u[(k, i)] /= scale;
                    s += u[(k, i)] * u[(k, i)];
                }
                let f = u[(i, i)];
                g = -sign(s.sqrt(), f);
                let h = f * g - s;
                u[(i, i)] = f - g;
                for j in l..n {
                    let mut s2 = 0.0;
                    for k in i..m {
                        s2 += u[(k, i)] * u[(k, j)];
                    }
                    let f2 = s2 / h;
                    for k in i..m {
                        let add = f2 * u[(k, i)];
                        u[(k, j)] += add;
                    }
                }
                for k in i..m {
                    u[(k, i)] *= scale;
                }
            }
        }
        w[i] = scale * g;
        g = 0.0;
        scale = 0.0;
        if i < m && i != n - 1 {
            let mut s = 0.0;
            for k in l..n {
                scale += u[(i, k)].abs();
            }
            if scale != 0.0 {
                for k in l..n {
                    u[(i, k)] /= scale;
                    s += u[(i, k)] * u[(i, k)];
                }
                let f = u[(i, l)];
                g = -sign(s.sqrt(), f);
                let h = f * g - s;
                u[(i, l)] = f - g;
                for k in l..n {
                    rv1[k] = u[(i, k)] / h;
                }
                for j in l..m {
                    let mut s2 = 0.0;
                    for k in l..n {
                        s2 += u[(j, k)] * u[(i, k)];
                    }
                    for k in l..n {
                        let add = s2 * rv1[k];
                        u[(j, k)] += add;
                    }
                }
                for k in l..n {
                    u[(i, k)] *= scale;
                }
            }
        }
        anorm = anorm.max(w[i].abs() + rv1[i].abs());
    }

    // accumulate right-hand transformations
    for i in (0..n).rev() {
        let l = i + 1;
        if i < n - 1 {
            if g != 0.0 {
                for j in l..n {
                    v[(j, i)] = (u[(i, j)] / u[(i, l)]) / g;
                }
                for j in l..n {
                    let mut s = 0.0;
                    for k in l..n {
                        s += u[(i, k)] * v[(k, j)];
                    }
                    for k in l..n {
                        let add = s * v[(k, i)];
                        v[(k, j)] += add;
                    }
                }
            }
            for j in l..n {
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        }
        v[(i, i)] = 1.0;
        g = rv1[i];
    }

    // accumulate left-hand transformations
    for i in (0..n.min(m)).rev() {
        let l = i + 1;
        g = w[i];
        for j in l..n {
            u[(i, j)] = 0.0;
        }
        if g != 0.0 {
            g = 1.0 / g;
            for j in l..n {
                let mut s = 0.0;
                for k in l..m {
                    s += u[(k, i)] * u[(k, j)];
                }
                let f = (s / u[(i, i)]) * g;
                for k in i..m {
                    let add = f * u[(k, i)];
                    u[(k, j)] += add;
                }
            }
            for j in i..m {
                u[(j, i)] *= g;
            }
        } else {
            for j in i..m {
                u[(j, i)] = 0.0;
            }
        }
        u[(i, i)] += 1.0;
    }

    // diagonalize the bidiagonal form
    for k in (0..n).rev() {
        for iteration in 0..60 {
            // test for splitting
            let mut l = k;
            let mut flag = true;
            loop {
                if rv1[l].abs() + anorm == anorm {
                    flag = false;
                    break;
                }
                if l == 0 {
                    break;
                }
                if w[l - 1].abs() + anorm == anorm {
                    break;
                }
                l -= 1;
            }
            if flag {
                // cancellation of rv1[l] for l > 0
                let nm = l - 1;
                let mut c = 0.0;
                let mut s = 1.0;
                for i in l..=k {
                    let f = s * rv1[i];
                    rv1[i] *= c;
                    if f.abs() + anorm == anorm {
                        break;
                    }
                    g = w[i];
                    let mut h = f.hypot(g);
                    w[i] = h;
                    h = 1.0 / h;
                    c = g * h;
                    s = -f * h;
                    for j in 0..m {
                        let y = u[(j, nm)];
                        let z = u[(j, i)];
                        u[(j, nm)] = y * c + z * s;
                        u[(j, i)] = z * c - y * s;
                    }
                }
            }
            let z = w[k];
            if l == k {
                if z < 0.0 {
                    w[k] = -z;
                    for j in 0..n {
                        v[(j, k)] = -v[(j, k)];
                    }
                }
                break;
            }
            if iteration == 59 {
                break; // accept the current estimate
            }
            let mut x = w[l];
            let nm = k - 1;
            let mut y = w[nm];
            g = rv1[nm];
            let mut h = rv1[k];
            let mut f = ((y - z) * (y + z) + (g - h) * (g + h)) / (2.0 * h * y);
            g = f.hypot(1.0);
            f = ((x - z) * (x + z) + h * ((y / (f + sign(g, f))) - h)) / x;
            let mut c = 1.0;
            let mut s = 1.0;
            for j in l..=nm {
                let i = j + 1;
                g = rv1[i];
                y = w[i];
                h = s * g;
                g *= c;
                let mut zz = f.hypot(h);
                rv1[j] = zz;
                c = f / zz;
                s = h / zz;
                f = x * c + g * s;
                g = g * c - x * s;
                h = y * s;
                y *= c;
                for jj in 0..n {
                    let xx = v[(jj, j)];
                    let z2 = v[(jj, i)];
                    v[(jj, j)] = xx * c + z2 * s;
                    v[(jj, i)] = z2 * c - xx * s;
                }
                zz = f.hypot(h);
                w[j] = zz;
                if zz != 0.0 {
                    let inv = 1.0 / zz;
                    c = f * inv;
                    s = h * inv;
                }
                f = c * g + s * y;
                x = c * y - s * g;
                for jj in 0..m {
                    let yy = u[(jj, j)];
                    let z2 = u[(jj, i)];
                    u[(jj, j)] = yy * c + z2 * s;
                    u[(jj, i)] = z2 * c - yy * s;
                }
            }
            rv1[l] = 0.0;
            rv1[k] = f;
            w[k] = x;
        }
    }

    // sort singular values in non-increasing order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j].partial_cmp(&w[i]).unwrap().then(i.cmp(&j)));
    let mut u_out = Mat::zeros(m, n);
    let mut v_out = Mat::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    for (kk, &j) in order.iter().enumerate() {
        s_out.push(w[j]);
        for i in 0..m {
            u_out[(i, kk)] = u[(i, j)];
        }
        for i in 0..n {
            v_out[(i, kk)] = v[(i, j)];
        }
    }
    (u_out, s_out, v_out)
}

/// rows p, q := (c * row_p - s * row_q, s * row_p + c * row_q)
fn rotate_rows(m: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let nc = m.nc;
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (head, tail) = m.a.split_at_mut(hi * nc);
    let rlo = &mut head[lo * nc..(lo + 1) * nc];
    let rhi = &mut tail[..nc];
    let (rp, rq): (&mut [f64], &mut [f64]) = if p < q { (rlo, rhi) } else { (rhi, rlo) };
    for i in 0..nc {
        let x = rp[i];
        let y = rq[i];
        rp[i] = c * x - s * y;
        rq[i] = s * x + c * y;
    }
}

/// All eigenvalues of a symmetric matrix: Householder tridiagonalization
/// followed by implicit-shift QL. Returns eigenvalues in ascending order.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    assert_eq!(a.nr, a.nc);
    let n = a.nr;
    if n == 0 {
        return vec![];
    }
    let mut z = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    // Householder reduction (eigenvalues only; transforms not accumulated)
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| z[(i, k)].abs()).sum();
            if scale == 0.0 {
                e[i] = z[(i, l)];
            } else {
                for k in 0..=l {
                    z[(i, k)] /= scale;
                    h += z[(i, k)] * z[(i, k)];
                }
                let mut f = z[(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                z[(i, l)] = f - g;
                f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += z[(j, k)] * z[(i, k)];
                    }
                    for k in j + 1..=l {
                        g += z[(k, j)] * z[(i, k)];
                    }
                    e[j] = g / h;
                    f += e[j] * z[(i, j)];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = z[(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let t = f * e[k] + g * z[(i, k)];
                        z[(j, k)] -= t;
                    }
                }
            }
        } else {
            e[i] = z[(i, l)];
        }
        d[i] = h;
    }
    e[0] = 0.0;
    for i in 0..n {
        d[i] = z[(i, i)];
    }
    // implicit QL with shifts on (d, e)
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                break; // give up on this eigenvalue; remaining estimate is returned
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                f = 0.0;
                let _ = f;
            }
            if r == 0.0 && m > l + 1 {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cholesky_hand_case() {
        // [[4,2],[2,3]] -> L = [[2,0],[1,sqrt(2)]], logdet = log 8
        let mut c = Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let ld = cholesky_lower(&mut c).unwrap();
        approx(c[(0, 0)], 2.0, 1e-15);
        approx(c[(1, 0)], 1.0, 1e-15);
        approx(c[(1, 1)], 2.0f64.sqrt(), 1e-15);
        approx(ld, 8.0f64.ln(), 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut c = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        match cholesky_lower(&mut c) {
            Err(Error::NotPositiveDefinite { position }) => assert_eq!(position, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn ldlt_matches_cholesky_logdet() {
        let n = 24;
        let mut c = Mat::from_fn(n, n, |i, j| {
            let d = (i as f64 - j as f64).abs();
            (-d / 3.0).exp()
        });
        let mut c2 = c.clone();
        let ld = cholesky_lower(&mut c).unwrap();
        let d = ldlt_lower(&mut c2).unwrap();
        let ld2: f64 = d.iter().map(|x| x.ln()).sum();
        approx(ld, ld2, 1e-10);
    }

    #[test]
    fn solves_roundtrip() {
        let n = 16;
        let mut c = Mat::from_fn(n, n, |i, j| {
            let d = (i as f64 - j as f64).abs();
            (-d / 2.0).exp() + if i == j { 0.5 } else { 0.0 }
        });
        let orig = c.clone();
        cholesky_lower(&mut c).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut b = orig.matvec(&x);
        solve_lower_vec(&c, &mut b, false);
        solve_lower_transpose_vec(&c, &mut b, false);
        for i in 0..n {
            approx(b[i], x[i], 1e-10);
        }
    }

    #[test]
    fn qr_reconstructs() {
        let a = Mat::from_fn(13, 5, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());
        let (q, r) = thin_qr(&a);
        let mut qr = Mat::zeros(13, 5);
        gemm_nn(&mut qr, 1.0, &q, &r);
        for i in 0..13 {
            for j in 0..5 {
                approx(qr[(i, j)], a[(i, j)], 1e-12);
            }
        }
        // orthonormal columns
        let mut qtq = Mat::zeros(5, 5);
        gemm_tn(&mut qtq, 1.0, &q, &q);
        for i in 0..5 {
            for j in 0..5 {
                approx(qtq[(i, j)], if i == j { 1.0 } else { 0.0 }, 1e-12);
            }
        }
    }

    #[test]
    fn svd_reconstructs_and_orders() {
        let a = Mat::from_fn(9, 6, |i, j| ((i as f64 + 1.3).powi(1) * (j as f64 * 0.9 + 0.2).cos()) + 0.1 * ((i * j) as f64).sin());
        let (u, s, v) = jacobi_svd(&a);
        for k in 1..s.len() {
            assert!(s[k - 1] >= s[k]);
        }
        // A == U diag(s) V^T
        let mut us = u.clone();
        us.scale_cols(&s);
        let mut rec = Mat::zeros(9, 6);
        gemm_nt(&mut rec, 1.0, &us, &v);
        for i in 0..9 {
            for j in 0..6 {
                approx(rec[(i, j)], a[(i, j)], 1e-11);
            }
        }
    }

    #[test]
    fn svd_small_agrees_with_jacobi() {
        let cases: Vec<Mat> = vec![
            Mat::from_fn(1, 1, |_, _| -3.5),
            Mat::from_fn(5, 5, |i, j| ((i * 3 + j * 7) as f64 * 0.31).sin()),
            Mat::from_fn(12, 8, |i, j| 1.0 / (1.0 + i as f64 + 2.0 * j as f64)),
            Mat::from_fn(7, 11, |i, j| ((i + 2) * (j + 1)) as f64 * 0.01),
            Mat::zeros(6, 4),
            // exact rank deficiency
            Mat::from_fn(10, 6, |i, j| ((i as f64).sin()) * ((j as f64).cos())),
            // wide spread of singular values
            Mat::from_fn(20, 20, |i, j| {
                0.3f64.powi(j as i32) * (((i * 13 + j * 5) as f64 * 0.17).sin() + 0.1)
            }),
        ];
        for (ci, a) in cases.iter().enumerate() {
            let (u, s, v) = svd_small(a);
            let (_, sj, _) = jacobi_svd(a);
            let smax = s.first().copied().unwrap_or(0.0).max(1e-300);
            for k in 0..s.len() {
                assert!(s[k] >= -1e-14, "case {ci}: negative sigma");
                assert!(
                    (s[k] - sj[k]).abs() <= 1e-12 * smax,
                    "case {ci} sigma[{k}]: {} vs {}",
                    s[k],
                    sj[k]
                );
                if k > 0 {
                    assert!(s[k] <= s[k - 1] + 1e-13 * smax);
                }
            }
            // reconstruction
            let mut us = u.clone();
            us.scale_cols(&s);
            let mut rec = Mat::zeros(a.nrows(), a.ncols());
            gemm_nt(&mut rec, 1.0, &us, &v);
            rec.sub_assign(a);
            assert!(rec.frob_norm() <= 1e-12 * smax.max(1.0), "case {ci} reconstruction");
            // orthogonality of the kept columns
            let mut utu = Mat::zeros(u.ncols(), u.ncols());
            gemm_tn(&mut utu, 1.0, &u, &u);
            for i in 0..u.ncols() {
                for j in 0..u.ncols() {
                    let expect = if i == j && s[i] > 1e-13 * smax { 1.0 } else { utu[(i, j)] };
                    if i != j && s[i] > 1e-12 * smax && s[j] > 1e-12 * smax {
                        assert!(utu[(i, j)].abs() < 1e-11, "case {ci} U orth ({i},{j})");
                    }
                    let _ = expect;
                }
            }
        }
    }

    #[test]
    fn sym_eigenvalues_diag_and_dense() {
        let d = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0]]);
        let ev = sym_eigenvalues(&d);
        approx(ev[0], -5.0, 1e-13);
        approx(ev[1], 3.0, 1e-13);

        // compare with characteristic polynomial on a 3x3
        let a = Mat::from_rows(&[
            vec![2.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 4.0],
        ]);
        let ev = sym_eigenvalues(&a);
        // trace and det invariants
        approx(ev.iter().sum::<f64>(), 9.0, 1e-12);
        approx(ev.iter().product::<f64>(), 2.0 * (3.0 * 4.0 - 1.0) - 1.0 * 4.0, 1e-11);
    }
}
