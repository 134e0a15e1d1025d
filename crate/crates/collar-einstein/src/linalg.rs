//! Dense/banded linear algebra helpers: complex banded LU with partial
//! pivoting, restarted right-preconditioned GMRES over real vectors, and a
//! Hermitian eigensolver built on the real symmetric embedding.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Complex banded matrix in LAPACK band storage with room for fill-in:
/// entry `(i, j)` with `j - kl <= i <= j + ku` lives at
/// `data[(kl + ku + i - j) * n + j]`, plus `kl` extra superdiagonal rows for
/// pivoting fill.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    /// (2*kl + ku + 1) x n, row-major
    data: Vec<Complex64>,
}

impl BandedMatrix {
    /// Zero matrix with the given bandwidths.
    pub fn zeros(n: usize, kl: usize, ku: usize) -> BandedMatrix {
        BandedMatrix { n, kl, ku, data: vec![Complex64::default(); (2 * kl + ku + 1) * n] }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        // storage row kl + ku + i - j (band rows shifted down by kl for fill)
        (self.kl + self.ku + i - j) * self.n + j
    }

    /// Matrix entry accessor; panics outside the band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[self.slot(i, j)]
    }

    /// Set an entry inside the band.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    /// Add to an entry inside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: Complex64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    /// In-band check.
    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && i + self.ku >= j
    }

    /// Dense copy (tests / small systems).
    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let ilo = j.saturating_sub(self.ku);
            let ihi = (j + self.kl).min(self.n - 1);
            for i in ilo..=ihi {
                m[(i, j)] = self.get(i, j);
            }
        }
        m
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::default(); self.n];
        for j in 0..self.n {
            let xj = x[j];
            if xj == Complex64::default() {
                continue;
            }
            let ilo = j.saturating_sub(self.ku);
            let ihi = (j + self.kl).min(self.n - 1);
            for i in ilo..=ihi {
                y[i] += self.get(i, j) * xj;
            }
        }
        y
    }

    /// Factor in place with partial pivoting (LAPACK zgbtrf layout).
    pub fn lu(mut self) -> Result<BandedLu> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let kv = kl + ku; // width of the (extended) upper band after fill
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            // find pivot in column j among rows j..=min(j+kl, n-1)
            let imax = (j + kl).min(n - 1);
            let mut piv = j;
            let mut pmag = self.band_abs(j, j, kv);
            for i in j + 1..=imax {
                let m = self.band_abs(i, j, kv);
                if m > pmag {
                    pmag = m;
                    piv = i;
                }
            }
            if pmag == 0.0 {
                return Err(Error::LinearSolve(format!("banded LU: zero pivot at column {j}")));
            }
            ipiv[j] = piv;
            if piv != j {
                // swap rows j and piv across columns j..=min(j+kv, n-1)
                let jhi = (j + kv).min(n - 1);
                for c in j..=jhi {
                    let a = self.fill_slot(j, c);
                    let b = self.fill_slot(piv, c);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.fill_get(j, j);
            let jhi = (j + kv).min(n - 1);
            for i in j + 1..=imax {
                let s = self.fill_slot(i, j);
                let l = self.data[s] / pivot;
                self.data[s] = l;
                if l != Complex64::default() {
                    for c in j + 1..=jhi {
                        let sc = self.fill_slot(i, c);
                        let uc = self.fill_get(j, c);
                        self.data[sc] -= l * uc;
                    }
                }
            }
        }
        Ok(BandedLu { n, kl, kv, data: self.data, ipiv })
    }

    #[inline]
    fn fill_slot(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) * self.n + j
    }

    #[inline]
    fn fill_get(&self, i: usize, j: usize) -> Complex64 {
        self.data[self.fill_slot(i, j)]
    }

    #[inline]
    fn band_abs(&self, i: usize, j: usize, _kv: usize) -> f64 {
        self.fill_get(i, j).norm()
    }
}

/// Factored banded system.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    /// upper bandwidth including fill (= kl + ku)
    kv: usize,
    data: Vec<Complex64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    #[inline]
    fn at(&self, i: usize, j: usize) -> Complex64 {
        // same storage as BandedMatrix: row kl + ku + i - j = kv + i - j
        self.data[(self.kv + i - j) * self.n + j]
    }

    /// Solve `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [Complex64]) {
        let n = self.n;
        // forward: apply P and L
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != Complex64::default() {
                let imax = (j + self.kl).min(n - 1);
                for i in j + 1..=imax {
                    let l = self.at(i, j);
                    b[i] -= l * bj;
                }
            }
        }
        // back substitution with U (bandwidth kv)
        for j in (0..n).rev() {
            let jlo = j.saturating_sub(self.kv);
            b[j] /= self.at(j, j);
            let xj = b[j];
            if xj != Complex64::default() {
                for i in jlo..j {
                    let u = self.at(i, j);
                    b[i] -= u * xj;
                }
            }
        }
    }

    /// Solve returning a fresh vector.
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Outcome of a GMRES run.
#[derive(Debug, Clone)]
pub struct GmresStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Restarted GMRES with right preconditioning on real vectors.
///
/// Solves `A x = b` where `op` applies `A` and `precond` applies an
/// approximate inverse `M^{-1}` (pass identity for none).  Returns the
/// solution together with iteration statistics; `Err` only on breakdown.
pub fn gmres(
    op: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    precond: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    restart: usize,
    max_iters: usize,
) -> Result<(Vec<f64>, GmresStats)> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            GmresStats { iterations: 0, relative_residual: 0.0, converged: true },
        ));
    }
    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    let mut total_iters = 0usize;
    let mut relres;

    'outer: loop {
        let ax = op(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let rnorm = norm2(&r);
        relres = rnorm / bnorm;
        if relres <= tol {
            break;
        }
        if total_iters >= max_iters {
            break;
        }
        let m = restart.min(max_iters - total_iters);
        // Arnoldi with modified Gram-Schmidt
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        for ri in r.iter_mut() {
            *ri /= rnorm;
        }
        v.push(r);
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = rnorm;
        let mut k_used = 0usize;
        for k in 0..m {
            total_iters += 1;
            let z = precond(&v[k]);
            let mut w = op(&z);
            for i in 0..=k {
                let hik = dot(&w, &v[i]);
                h[i][k] = hik;
                axpy(&mut w, -hik, &v[i]);
            }
            let wn = norm2(&w);
            h[k + 1][k] = wn;
            // apply accumulated Givens rotations to column k
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + wn * wn).sqrt();
            if denom == 0.0 {
                return Err(Error::LinearSolve("GMRES breakdown: zero Hessenberg column".into()));
            }
            cs[k] = h[k][k] / denom;
            sn[k] = wn / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            relres = g[k + 1].abs() / bnorm;
            if wn != 0.0 {
                let mut vn = w;
                for vi in vn.iter_mut() {
                    *vi /= wn;
                }
                v.push(vn);
            }
            if relres <= tol || total_iters >= max_iters || wn == 0.0 {
                break;
            }
        }
        // back-substitute y from the triangularized system
        let mut y = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        // x += M^{-1} (V y)
        let mut update = vec![0.0f64; n];
        for (j, yj) in y.iter().enumerate() {
            axpy(&mut update, *yj, &v[j]);
        }
        let z = precond(&update);
        for i in 0..n {
            x[i] += z[i];
        }
        if relres <= tol || total_iters >= max_iters {
            // recompute true residual once for the report
            let ax = op(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            relres = norm2(&r) / bnorm;
            if relres <= tol || total_iters >= max_iters {
                break 'outer;
            }
        }
    }
    let converged = relres <= tol;
    Ok((x, GmresStats { iterations: total_iters, relative_residual: relres, converged }))
}

#[inline]
fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Eigendecomposition of a Hermitian matrix `A = A^H` via the real symmetric
/// embedding `[[Re A, -Im A], [Im A, Re A]]`.  Returns eigenvalues ascending
/// with a unitary set of complex eigenvectors (columns).
pub fn hermitian_eigen(a: &DMatrix<Complex64>) -> (Vec<f64>, DMatrix<Complex64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut emb = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            emb[(i, j)] = v.re;
            emb[(i, j + n)] = -v.im;
            emb[(i + n, j)] = v.im;
            emb[(i + n, j + n)] = v.re;
        }
    }
    let se = nalgebra::SymmetricEigen::new(emb);
    // each complex eigenvalue appears twice; sort pairs ascending
    let mut order: Vec<usize> = (0..2 * n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    // build complex vectors v = top + i*bottom, then orthonormalize within
    // clusters and keep n of them (the embedding doubles each eigenspace).
    let mut vals: Vec<f64> = Vec::with_capacity(n);
    let mut vecs: Vec<DVector<Complex64>> = Vec::with_capacity(n);
    for &idx in &order {
        if vals.len() == n {
            break;
        }
        let lam = se.eigenvalues[idx];
        let col = se.eigenvectors.column(idx);
        let mut v = DVector::<Complex64>::zeros(n);
        for i in 0..n {
            v[i] = Complex64::new(col[i], col[i + n]);
        }
        // complex Gram-Schmidt against vectors already kept with (numerically)
        // equal eigenvalues; equal-eigenvalue copies from the embedding project
        // to zero and are skipped.
        for (vk, &lk) in vecs.iter().zip(&vals) {
            if (lk - lam).abs() <= 1e-9 * (1.0 + lam.abs()) {
                let c: Complex64 = vk.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
                for i in 0..n {
                    let sub = c * vk[i];
                    v[i] -= sub;
                }
            }
        }
        let nrm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nrm > 1e-8 {
            for z in v.iter_mut() {
                *z /= Complex64::new(nrm, 0.0);
            }
            vals.push(lam);
            vecs.push(v);
        }
    }
    assert_eq!(vals.len(), n, "hermitian_eigen failed to extract a full basis");
    let mut q = DMatrix::<Complex64>::zeros(n, n);
    for (j, v) in vecs.iter().enumerate() {
        q.set_column(j, v);
    }
    (vals, q)
}

/// Dense complex solve via LU (errors on singular systems).
pub fn dense_solve(a: &DMatrix<Complex64>, b: &DVector<Complex64>) -> Result<DVector<Complex64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::LinearSolve("dense complex LU solve failed".into()))
}

/// Least-squares solve of a real system via SVD; ranks below `rcond * s_max`
/// are treated as null.  Returns (solution, rank, smallest kept singular
/// value).
pub fn lsq_svd(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    rcond: f64,
) -> Result<(DVector<f64>, usize, f64)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let thresh = rcond * smax;
    let u = svd.u.as_ref().ok_or_else(|| Error::LinearSolve("SVD missing U".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::LinearSolve("SVD missing V^T".into()))?;
    let mut y = DVector::zeros(vt.nrows());
    let mut rank = 0usize;
    let mut smin_kept = f64::INFINITY;
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > thresh {
            let proj = u.column(k).dot(b);
            y[k] = proj / s;
            rank += 1;
            smin_kept = smin_kept.min(s);
        }
    }
    Ok((vt.transpose() * y, rank, if rank == 0 { 0.0 } else { smin_kept }))
}
