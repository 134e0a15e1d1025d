//! Grids, finite-difference stencils, quadrature and spatial FFT machinery.
//!
//! The collar is `M x [0, t_max]` with `M` a flat n-torus carrying periodic
//! coordinates.  Spatial derivatives are spectral (exact for band-limited
//! fields); derivatives in `t` use fourth-order finite differences on a
//! uniform grid, with offset stencils near the ends.  Mode solvers may refine
//! their own one-dimensional grids, so the stencil helpers work on arbitrary
//! node sets via Fornberg weights.

use crate::error::{Error, Result};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::collections::HashMap;
use std::sync::Arc;

/// Discretization of the collar `M x [0, t_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollarGrid {
    /// Fiber dimension `n >= 3`.
    pub n: usize,
    /// Anisotropy parameter `eps > 0` of the warped metric.
    pub eps: f64,
    /// Extent of the collar coordinate.
    pub t_max: f64,
    /// Number of t-nodes (uniform, including both ends), `nt >= 8`.
    pub nt: usize,
    /// Nodes per spatial axis (each even, one entry per axis).
    pub spatial_shape: Vec<usize>,
    /// Period of each spatial axis.
    pub spatial_period: Vec<f64>,
}

impl CollarGrid {
    /// Validate and build a grid.
    pub fn new(
        n: usize,
        eps: f64,
        t_max: f64,
        nt: usize,
        spatial_shape: Vec<usize>,
        spatial_period: Vec<f64>,
    ) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!("fiber dimension n={n} must be >= 3")));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps={eps} must be positive")));
        }
        if !(t_max > 0.0) {
            return Err(Error::InvalidArgument(format!("t_max={t_max} must be positive")));
        }
        if nt < 8 {
            return Err(Error::InvalidArgument(format!("nt={nt} must be >= 8")));
        }
        if spatial_shape.len() != n || spatial_period.len() != n {
            return Err(Error::InvalidArgument(format!(
                "spatial_shape/period must each have n={n} entries"
            )));
        }
        for (&m, &p) in spatial_shape.iter().zip(&spatial_period) {
            if m < 4 || m % 2 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "spatial axis length {m} must be even and >= 4"
                )));
            }
            if !(p > 0.0) {
                return Err(Error::InvalidArgument(format!("spatial period {p} must be positive")));
            }
        }
        Ok(CollarGrid { n, eps, t_max, nt, spatial_shape, spatial_period })
    }

    /// Uniform t-spacing.
    pub fn dt(&self) -> f64 {
        self.t_max / (self.nt - 1) as f64
    }

    /// t-coordinate of node `it`.
    pub fn t(&self, it: usize) -> f64 {
        self.dt() * it as f64
    }

    /// All t-nodes.
    pub fn t_nodes(&self) -> Vec<f64> {
        (0..self.nt).map(|it| self.t(it)).collect()
    }

    /// Total number of spatial nodes.
    pub fn spatial_len(&self) -> usize {
        self.spatial_shape.iter().product()
    }

    /// Grid spacing along spatial axis `a`.
    pub fn dx(&self, a: usize) -> f64 {
        self.spatial_period[a] / self.spatial_shape[a] as f64
    }

    /// Spatial coordinates of the flat index `ix`.
    pub fn x(&self, ix: usize) -> Vec<f64> {
        let mi = self.spatial_multi(ix);
        mi.iter().enumerate().map(|(a, &j)| j as f64 * self.dx(a)).collect()
    }

    /// Decompose a flat spatial index (row-major, last axis fastest).
    pub fn spatial_multi(&self, mut ix: usize) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for a in (0..self.n).rev() {
            out[a] = ix % self.spatial_shape[a];
            ix /= self.spatial_shape[a];
        }
        out
    }

    /// Flatten a spatial multi-index.
    pub fn spatial_flat(&self, mi: &[usize]) -> usize {
        let mut ix = 0;
        for a in 0..self.n {
            ix = ix * self.spatial_shape[a] + (mi[a] % self.spatial_shape[a]);
        }
        ix
    }

    /// Angular frequency vector of spatial mode `ix` (same flat layout as the
    /// spatial nodes; axis frequencies `2 pi k / period` with the signed
    /// integer `k` in `[-m/2, m/2)`).
    pub fn xi(&self, ix: usize) -> Vec<f64> {
        let mi = self.spatial_multi(ix);
        mi.iter()
            .enumerate()
            .map(|(a, &j)| {
                let m = self.spatial_shape[a];
                let k = if j < m / 2 { j as i64 } else { j as i64 - m as i64 };
                2.0 * std::f64::consts::PI * k as f64 / self.spatial_period[a]
            })
            .collect()
    }

    /// Signed integer lattice vector of spatial mode `ix`.
    pub fn mode_k(&self, ix: usize) -> Vec<i64> {
        let mi = self.spatial_multi(ix);
        mi.iter()
            .enumerate()
            .map(|(a, &j)| {
                let m = self.spatial_shape[a];
                if j < m / 2 {
                    j as i64
                } else {
                    j as i64 - m as i64
                }
            })
            .collect()
    }

    /// True if the mode sits on a Nyquist plane in any axis.
    pub fn is_nyquist(&self, ix: usize) -> bool {
        let mi = self.spatial_multi(ix);
        mi.iter().zip(&self.spatial_shape).any(|(&j, &m)| j == m / 2)
    }

    /// Flat index of the mode `-k` (complex-conjugate partner for real
    /// fields).
    pub fn conj_mode(&self, ix: usize) -> usize {
        let mi = self.spatial_multi(ix);
        let neg: Vec<usize> = mi
            .iter()
            .zip(&self.spatial_shape)
            .map(|(&j, &m)| if j == 0 { 0 } else { m - j })
            .collect();
        self.spatial_flat(&neg)
    }
}

/// Fourth-order finite-difference stencils on a (possibly non-uniform)
/// one-dimensional node set.
///
/// `weights(it, m)` returns `(offsets, w)` such that the m-th derivative at
/// node `it` is `sum w[k] f[it + offsets[k]]`.  Interior nodes use centered
/// 5-point (first/second derivative) stencils; nodes near the ends use
/// offset 6-point stencils so the order is preserved.
#[derive(Debug, Clone)]
pub struct FdStencils {
    nodes: Vec<f64>,
    /// per node: (start index, weights for m=1, weights for m=2)
    rows: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl FdStencils {
    /// Build stencils over the given strictly-increasing nodes.
    pub fn new(nodes: &[f64]) -> FdStencils {
        let nn = nodes.len();
        assert!(nn >= 6, "need at least 6 nodes for 4th-order stencils");
        let mut rows = Vec::with_capacity(nn);
        for i in 0..nn {
            // choose window: centered 5 nodes if possible, else offset 6.
            let (start, len) = if i >= 2 && i + 2 < nn {
                (i - 2, 5)
            } else if i < 2 {
                (0, 6)
            } else {
                (nn - 6, 6)
            };
            let window = &nodes[start..start + len];
            let w = fornberg_weights(nodes[i], window, 2);
            rows.push((start, w[1].clone(), w[2].clone()));
        }
        FdStencils { nodes: nodes.to_vec(), rows }
    }

    /// Nodes the stencils were built on.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Stencil for the m-th derivative (m = 1 or 2) at node `it`:
    /// `(first node index, weights)`.
    pub fn row(&self, it: usize, m: usize) -> (usize, &[f64]) {
        let (s, ref w1, ref w2) = self.rows[it];
        match m {
            1 => (s, w1),
            2 => (s, w2),
            _ => panic!("only first and second derivatives are tabulated"),
        }
    }

    /// Apply the m-th derivative to samples `f` (one value per node).
    pub fn apply(&self, f: &[f64], m: usize) -> Vec<f64> {
        (0..f.len())
            .map(|i| {
                let (s, w) = self.row(i, m);
                w.iter().enumerate().map(|(k, &wk)| wk * f[s + k]).sum()
            })
            .collect()
    }
}

/// Fornberg's algorithm: weights of derivatives `0..=m` at point `z` from
/// the nodes `x`.  Returns `m+1` weight vectors, one per derivative order.
pub fn fornberg_weights(z: f64, x: &[f64], m: usize) -> Vec<Vec<f64>> {
    let nd = x.len();
    let mut c = vec![vec![0.0f64; nd]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..nd {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Quadrature weights on arbitrary strictly-increasing nodes, exact for the
/// local polynomial interpolant of degree `stencil - 1` on each interval
/// (composite interpolatory rule; `stencil = 8` gives an O(h^8) rule on
/// smooth integrands).
pub fn interp_quadrature_weights(nodes: &[f64], stencil: usize) -> Vec<f64> {
    let nn = nodes.len();
    let s = stencil.min(nn);
    let mut w = vec![0.0f64; nn];
    for iv in 0..nn - 1 {
        // window of s nodes around the interval [iv, iv+1]
        let start = iv.saturating_sub(s / 2 - 1).min(nn - s);
        let win = &nodes[start..start + s];
        // integrate the Lagrange cardinal functions over the interval via a
        // shifted/scaled monomial basis solve (small s keeps this stable).
        let a = nodes[iv];
        let b = nodes[iv + 1];
        let mid = 0.5 * (win[0] + win[s - 1]);
        let scale = 0.5 * (win[s - 1] - win[0]);
        let mut vt = nalgebra::DMatrix::zeros(s, s);
        for (j, &xj) in win.iter().enumerate() {
            let u = (xj - mid) / scale;
            let mut p = 1.0;
            for r in 0..s {
                vt[(r, j)] = p;
                p *= u;
            }
        }
        // moments of u^r over [a,b] in u-variable
        let ua = (a - mid) / scale;
        let ub = (b - mid) / scale;
        let mut mom = nalgebra::DVector::zeros(s);
        for r in 0..s {
            mom[r] = scale * (ub.powi(r as i32 + 1) - ua.powi(r as i32 + 1)) / (r as f64 + 1.0);
        }
        let lu = vt.lu();
        let wi = lu.solve(&mom).expect("quadrature Vandermonde solve");
        for j in 0..s {
            w[start + j] += wi[j];
        }
    }
    w
}

/// Batched complex FFT over the spatial torus with the transform convention
/// `F[h](xi_k) = dx^n * sum_x h(x) exp(+i xi_k . x)` and inverse
/// `h(x) = (1/V) sum_k F[h](xi_k) exp(-i xi_k . x)`, so that spatial
/// derivatives act as multiplication by `-i xi` on mode coefficients.
pub struct SpectralEngine {
    shape: Vec<usize>,
    period: Vec<f64>,
    fwd: HashMap<usize, Arc<dyn Fft<f64>>>,
    inv: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for SpectralEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralEngine").field("shape", &self.shape).finish()
    }
}

impl SpectralEngine {
    /// Build an engine for the given axis lengths and periods.
    pub fn new(shape: &[usize], period: &[f64]) -> SpectralEngine {
        let mut planner = FftPlanner::new();
        let mut fwd = HashMap::new();
        let mut inv = HashMap::new();
        for &m in shape {
            fwd.entry(m).or_insert_with(|| planner.plan_fft(m, FftDirection::Inverse));
            inv.entry(m).or_insert_with(|| planner.plan_fft(m, FftDirection::Forward));
        }
        SpectralEngine { shape: shape.to_vec(), period: period.to_vec(), fwd, inv }
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn volume(&self) -> f64 {
        self.period.iter().product()
    }

    fn dx_total(&self) -> f64 {
        self.volume() / self.len() as f64
    }

    fn transform_axes(&self, data: &mut [Complex64], forward: bool) {
        let nd = self.shape.len();
        // strides for row-major layout, last axis fastest
        let mut strides = vec![1usize; nd];
        for a in (0..nd.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        let total = self.len();
        let mut line: Vec<Complex64> = Vec::new();
        for a in 0..nd {
            let m = self.shape[a];
            let plan = if forward { &self.fwd[&m] } else { &self.inv[&m] };
            line.resize(m, Complex64::default());
            let stride = strides[a];
            let nlines = total / m;
            for l in 0..nlines {
                // base offset of line l along axis a
                let block = l / stride;
                let rem = l % stride;
                let base = block * stride * m + rem;
                if stride == 1 {
                    plan.process(&mut data[base..base + m]);
                } else {
                    for j in 0..m {
                        line[j] = data[base + j * stride];
                    }
                    plan.process(&mut line);
                    for j in 0..m {
                        data[base + j * stride] = line[j];
                    }
                }
            }
        }
    }

    /// Forward transform of a real field into mode coefficients.
    pub fn to_modes(&self, real: &[f64]) -> Vec<Complex64> {
        assert_eq!(real.len(), self.len());
        let mut buf: Vec<Complex64> =
            real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform_axes(&mut buf, true);
        let s = self.dx_total();
        for v in buf.iter_mut() {
            *v *= s;
        }
        buf
    }

    /// Forward transform of a complex field (in place; scaled like
    /// `to_modes`).
    pub fn to_modes_complex(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len());
        self.transform_axes(buf, true);
        let s = self.dx_total();
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    /// Inverse transform; the imaginary residue is discarded.
    pub fn from_modes(&self, modes: &[Complex64]) -> Vec<f64> {
        assert_eq!(modes.len(), self.len());
        let mut buf = modes.to_vec();
        self.transform_axes(&mut buf, false);
        let s = 1.0 / self.volume();
        buf.iter().map(|v| v.re * s).collect()
    }

    /// Inverse transform keeping the complex values.
    pub fn from_modes_complex(&self, modes: &mut [Complex64]) {
        assert_eq!(modes.len(), self.len());
        self.transform_axes(modes, false);
        let s = 1.0 / self.volume();
        for v in modes.iter_mut() {
            *v *= s;
        }
    }

    /// Angular frequency vector of flat mode index `ix`.
    pub fn xi(&self, ix: usize) -> Vec<f64> {
        let nd = self.shape.len();
        let mut out = vec![0.0; nd];
        let mut rem = ix;
        for a in (0..nd).rev() {
            let m = self.shape[a];
            let j = rem % m;
            rem /= m;
            let k = if j < m / 2 { j as i64 } else { j as i64 - m as i64 };
            out[a] = 2.0 * std::f64::consts::PI * k as f64 / self.period[a];
        }
        out
    }

    /// True if mode `ix` lies on a Nyquist plane.
    pub fn is_nyquist(&self, ix: usize) -> bool {
        let nd = self.shape.len();
        let mut rem = ix;
        for a in (0..nd).rev() {
            let m = self.shape[a];
            if rem % m == m / 2 {
                return true;
            }
            rem /= m;
        }
        false
    }

    /// Spectral partial derivative of a real field along `axis`, of order
    /// `order` (1 or 2).  Odd-order derivatives zero the Nyquist plane to
    /// keep real fields real.
    pub fn deriv(&self, real: &[f64], axis: usize, order: u32) -> Vec<f64> {
        let mut modes = self.to_modes(real);
        self.apply_deriv_factor(&mut modes, axis, order);
        self.from_modes(&modes)
    }

    /// Multiply mode coefficients by the derivative symbol `(-i xi_axis)^order`.
    pub fn apply_deriv_factor(&self, modes: &mut [Complex64], axis: usize, order: u32) {
        for (ix, v) in modes.iter_mut().enumerate() {
            let xi = self.xi(ix);
            let mut f = Complex64::new(1.0, 0.0);
            for _ in 0..order {
                f *= Complex64::new(0.0, -xi[axis]);
            }
            if order % 2 == 1 && self.is_nyquist_axis(ix, axis) {
                f = Complex64::new(0.0, 0.0);
            }
            *v *= f;
        }
    }

    fn is_nyquist_axis(&self, ix: usize, axis: usize) -> bool {
        let nd = self.shape.len();
        let mut rem = ix;
        for a in (0..nd).rev() {
            let m = self.shape[a];
            let j = rem % m;
            if a == axis {
                return j == m / 2;
            }
            rem /= m;
        }
        false
    }

    /// Zero every mode on a Nyquist plane (used to band-limit sources so the
    /// discrete pipeline is self-consistent for real fields).
    pub fn band_limit(&self, real: &[f64]) -> Vec<f64> {
        let mut modes = self.to_modes(real);
        for (ix, v) in modes.iter_mut().enumerate() {
            if self.is_nyquist(ix) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        self.from_modes(&modes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_validation() {
        assert!(CollarGrid::new(3, 0.1, 12.0, 64, vec![16, 16, 16], vec![1.0; 3]).is_ok());
        assert!(CollarGrid::new(2, 0.1, 12.0, 64, vec![16, 16], vec![1.0; 2]).is_err());
        assert!(CollarGrid::new(3, -0.1, 12.0, 64, vec![16, 16, 16], vec![1.0; 3]).is_err());
        assert!(CollarGrid::new(3, 0.1, 12.0, 4, vec![16, 16, 16], vec![1.0; 3]).is_err());
        assert!(CollarGrid::new(3, 0.1, 12.0, 64, vec![15, 16, 16], vec![1.0; 3]).is_err());
    }

    #[test]
    fn fornberg_reproduces_central_weights() {
        // classic 5-point centered second derivative on uniform grid
        let x: Vec<f64> = (-2..=2).map(|i| i as f64).collect();
        let w = fornberg_weights(0.0, &x, 2);
        let expect1 = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        let expect2 = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
        for k in 0..5 {
            assert_abs_diff_eq!(w[1][k], expect1[k], epsilon = 1e-13);
            assert_abs_diff_eq!(w[2][k], expect2[k], epsilon = 1e-13);
        }
    }

    #[test]
    fn fd_stencils_are_fourth_order() {
        let f = |t: f64| (0.7 * t).sin() + 0.3 * (1.3 * t).cos();
        let f1 = |t: f64| 0.7 * (0.7 * t).cos() - 0.39 * (1.3 * t).sin();
        let f2 = |t: f64| -0.49 * (0.7 * t).sin() - 0.507 * (1.3 * t).cos();
        let mut errs = Vec::new();
        for &nn in &[41usize, 81] {
            let nodes: Vec<f64> = (0..nn).map(|i| 3.0 * i as f64 / (nn - 1) as f64).collect();
            let st = FdStencils::new(&nodes);
            let fs: Vec<f64> = nodes.iter().map(|&t| f(t)).collect();
            let d1 = st.apply(&fs, 1);
            let d2 = st.apply(&fs, 2);
            let e1: f64 = nodes
                .iter()
                .enumerate()
                .map(|(i, &t)| (d1[i] - f1(t)).abs())
                .fold(0.0, f64::max);
            let e2: f64 = nodes
                .iter()
                .enumerate()
                .map(|(i, &t)| (d2[i] - f2(t)).abs())
                .fold(0.0, f64::max);
            errs.push((e1, e2));
        }
        // halving h divides the error by about 16; accept >= 12
        assert!(errs[0].0 / errs[1].0 > 12.0, "first-derivative order too low: {errs:?}");
        assert!(errs[0].1 / errs[1].1 > 12.0, "second-derivative order too low: {errs:?}");
    }

    #[test]
    fn quadrature_high_order() {
        let f = |t: f64| (-0.8 * t).exp() * (1.0 + t).ln();
        let exact = {
            // dense reference via fine Simpson
            let nn = 200001;
            let h = 5.0 / (nn - 1) as f64;
            let mut s = 0.0;
            for i in 0..nn {
                let w = if i == 0 || i == nn - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                s += w * f(i as f64 * h);
            }
            s * h / 3.0
        };
        let mut errs = Vec::new();
        for &nn in &[41usize, 81] {
            let nodes: Vec<f64> = (0..nn).map(|i| 5.0 * i as f64 / (nn - 1) as f64).collect();
            let w = interp_quadrature_weights(&nodes, 8);
            let q: f64 = nodes.iter().zip(&w).map(|(&t, &wt)| wt * f(t)).sum();
            errs.push((q - exact).abs());
        }
        assert!(errs[1] < errs[0] / 100.0, "quadrature convergence too slow: {errs:?}");
        assert!(errs[1] < 1e-9);
    }

    #[test]
    fn spectral_derivatives_match_trig() {
        let shape = vec![8usize, 8, 8];
        let period = vec![1.0, 1.0, 1.0];
        let eng = SpectralEngine::new(&shape, &period);
        let len: usize = shape.iter().product();
        let coord = |ix: usize| -> (f64, f64, f64) {
            let z = ix % 8;
            let y = (ix / 8) % 8;
            let x = ix / 64;
            (x as f64 / 8.0, y as f64 / 8.0, z as f64 / 8.0)
        };
        let tau = 2.0 * std::f64::consts::PI;
        let f: Vec<f64> = (0..len)
            .map(|ix| {
                let (x, y, z) = coord(ix);
                (tau * x).sin() * (tau * 2.0 * y).cos() + 0.5 * (tau * z).cos()
            })
            .collect();
        let dfdx = eng.deriv(&f, 0, 1);
        let d2fdy = eng.deriv(&f, 1, 2);
        for ix in 0..len {
            let (x, y, z) = coord(ix);
            let _ = z;
            let want_dx = tau * (tau * x).cos() * (tau * 2.0 * y).cos();
            let want_dyy = -(tau * 2.0f64).powi(2) * (tau * x).sin() * (tau * 2.0 * y).cos();
            assert_abs_diff_eq!(dfdx[ix], want_dx, epsilon = 1e-10);
            assert_abs_diff_eq!(d2fdy[ix], want_dyy, epsilon = 1e-9);
        }
    }

    #[test]
    fn mode_roundtrip_and_convention() {
        // verify F[h](xi) = dx^n sum h e^{+i xi x} on a single harmonic
        let shape = vec![8usize, 4, 4];
        let period = vec![2.0, 1.0, 1.0];
        let eng = SpectralEngine::new(&shape, &period);
        let len: usize = shape.iter().product();
        let tau = 2.0 * std::f64::consts::PI;
        // h = cos(2 pi x / 2) = harmonic with k=(1,0,0), xi = (pi,0,0)
        let f: Vec<f64> = (0..len)
            .map(|ix| {
                let x0 = (ix / 16) as f64 * 2.0 / 8.0;
                (tau * x0 / 2.0).cos()
            })
            .collect();
        let modes = eng.to_modes(&f);
        // expected: hat at k=(1,0,0) and k=(-1,0,0) each = V/2 * 1
        let v = 2.0;
        let idx_p = 16; // multi (1,0,0) -> flat 1*16
        let idx_m = 7 * 16;
        assert_abs_diff_eq!(modes[idx_p].re, v / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(modes[idx_m].re, v / 2.0, epsilon = 1e-12);
        let back = eng.from_modes(&modes);
        for ix in 0..len {
            assert_abs_diff_eq!(back[ix], f[ix], epsilon = 1e-12);
        }
        // derivative convention: modes of dh/dx must equal -i xi * modes(h)
        let d = eng.deriv(&f, 0, 1);
        let dmodes = eng.to_modes(&d);
        let xi = eng.xi(idx_p)[0];
        let want = Complex64::new(0.0, -xi) * modes[idx_p];
        assert_abs_diff_eq!(dmodes[idx_p].re, want.re, epsilon = 1e-12);
        assert_abs_diff_eq!(dmodes[idx_p].im, want.im, epsilon = 1e-12);
    }
}
