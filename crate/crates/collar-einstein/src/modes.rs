//! Fourier-mode systems of the linearized gauge-fixed Einstein operator on
//! the hyperbolic half-space.
//!
//! After a Fourier transform in the flat boundary directions and an
//! exponential rescaling of the components (`H_ij = e^{-2t} ĥ_ij`,
//! `H_i0 = e^{-t} ĥ_i0`, `H_00 = ĥ_00`), the linearized operator becomes,
//! for each spatial frequency `ξ`, the coupled ODE system
//!
//! ```text
//! L_ξ H = H'' + n H' + Q0 H + e^{-t} Q1(ξ) H - e^{-2t} |ξ|² H
//! ```
//!
//! acting on packed symmetric two-tensor values `H(t)`. The boundary
//! functional is the rescaled Bianchi operator `B_ξ(H)` at `t = 0`. This
//! module builds the system, its distinguished closed-form solution
//! families, and a collocation solver for the boundary value problem on
//! `[0, t_max]` closed with strictly decaying asymptotics at the right end.
//!
//! Sign conventions: the Fourier transform uses the kernel `e^{+i ξ·x}`,
//! so a spatial derivative `∂_j` becomes multiplication by `-i ξ_j`.

use crate::error::{Error, Result};
use crate::grid::FdStencils;
use crate::linalg::{hermitian_eigen, BandedLu, BandedMatrix};
use crate::pack::{a_from_h_factor, comp_00, comp_i0, ncomp_collar, pair_pack};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// The decay rate `λ(n) = (n + sqrt(n² + 8n)) / 2` of the trace-coupled
/// solution channel; the positive root of `λ² - nλ - 2n = 0`, lying
/// strictly between `n+1` and `n+2`.
pub fn lambda_exponent(n: usize) -> f64 {
    let nf = n as f64;
    0.5 * (nf + (nf * nf + 8.0 * nf).sqrt())
}

/// The pointwise mode coefficients at one frequency.
#[derive(Debug, Clone)]
pub struct ModeOperator {
    pub n: usize,
    /// Number of packed tensor components, `(n+1)(n+2)/2`.
    pub nc: usize,
    pub xi: Vec<f64>,
    pub xi_norm: f64,
}

impl ModeOperator {
    pub fn new(n: usize, xi: &[f64]) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("fiber dimension {n} is too small")));
        }
        if xi.len() != n {
            return Err(Error::InvalidArgument(format!(
                "frequency has {} entries, expected {n}",
                xi.len()
            )));
        }
        let xi_norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(ModeOperator { n, nc: ncomp_collar(n), xi: xi.to_vec(), xi_norm })
    }

    /// Applies the zeroth-order block `Q0` to packed values.
    pub fn q0_apply(&self, h: &[Complex64], out: &mut [Complex64]) {
        let n = self.n;
        let mut trace = Complex64::default();
        for p in 0..n {
            trace += h[pair_pack(n, p, p)];
        }
        for i in 0..n {
            for j in i..n {
                let c = pair_pack(n, i, j);
                out[c] = if i == j { -2.0 * trace } else { Complex64::default() };
            }
        }
        for i in 0..n {
            let c = comp_i0(n, i);
            out[c] = -((n as f64) + 1.0) * h[c];
        }
        let c00 = comp_00(n);
        out[c00] = -2.0 * (n as f64) * h[c00];
    }

    /// Applies the first-order frequency block `Q1(ξ)` to packed values.
    pub fn q1_apply(&self, h: &[Complex64], out: &mut [Complex64]) {
        let n = self.n;
        let xi = &self.xi;
        for i in 0..n {
            for j in i..n {
                out[pair_pack(n, i, j)] =
                    -2.0 * I * (xi[i] * h[comp_i0(n, j)] + xi[j] * h[comp_i0(n, i)]);
            }
        }
        let h00 = h[comp_00(n)];
        for j in 0..n {
            let mut div = Complex64::default();
            for i in 0..n {
                div += xi[i] * h[pair_pack(n, i, j)];
            }
            out[comp_i0(n, j)] = -2.0 * I * (xi[j] * h00 - div);
        }
        let mut cross = Complex64::default();
        for i in 0..n {
            cross += xi[i] * h[comp_i0(n, i)];
        }
        out[comp_00(n)] = 4.0 * I * cross;
    }

    /// Evaluates `L_ξ H` at time `t` from pointwise values and analytic
    /// first and second derivatives.
    pub fn apply_pointwise(
        &self,
        t: f64,
        h: &[Complex64],
        dh: &[Complex64],
        ddh: &[Complex64],
    ) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.nc];
        let mut q = vec![Complex64::default(); self.nc];
        self.q0_apply(h, &mut out);
        self.q1_apply(h, &mut q);
        let e1 = (-t).exp();
        let e2 = (-2.0 * t).exp() * self.xi_norm * self.xi_norm;
        for c in 0..self.nc {
            out[c] += ddh[c] + (self.n as f64) * dh[c] + e1 * q[c] - e2 * h[c];
        }
        out
    }

    /// The boundary functional `B_ξ(H)(t)` from pointwise values and the
    /// analytic first derivative; returns `n+1` entries (`i`-rows then the
    /// `0`-row).
    pub fn bianchi_pointwise(&self, t: f64, h: &[Complex64], dh: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let nf = n as f64;
        let e1 = (-t).exp();
        let mut out = vec![Complex64::default(); n + 1];
        let mut trace = Complex64::default();
        let mut dtrace = Complex64::default();
        for p in 0..n {
            trace += h[pair_pack(n, p, p)];
            dtrace += dh[pair_pack(n, p, p)];
        }
        let h00 = h[comp_00(n)];
        for i in 0..n {
            let ci = comp_i0(n, i);
            let mut contract = Complex64::default();
            for j in 0..n {
                contract += self.xi[j] * h[pair_pack(n, i, j)];
            }
            out[i] = dh[ci] + (nf + 1.0) * h[ci] - I * e1 * contract
                + 0.5 * I * e1 * self.xi[i] * (trace + h00);
        }
        let mut cross = Complex64::default();
        for i in 0..n {
            cross += self.xi[i] * h[comp_i0(n, i)];
        }
        out[n] = nf * h00 + 0.5 * dh[comp_00(n)] - 0.5 * dtrace - trace - I * e1 * cross;
        out
    }
}

/// The mode system sampled on a time grid: pointwise coefficients plus the
/// finite-difference rows used to differentiate profiles in `t`. The grid
/// is extended with one ghost node below `t = 0` so that boundary rows and
/// the `t = 0` collocation row share regular difference windows.
pub struct ModeSystem {
    pub op: ModeOperator,
    /// Extended nodes: `nodes[0]` is the ghost node, `nodes[1] = 0`.
    pub nodes: Vec<f64>,
    pub stencils: FdStencils,
}

/// Builds the mode system for frequency `xi` on the physical grid
/// `t_grid` (which must start at `0`; the zero frequency is allowed here —
/// only the boundary value solver requires `xi != 0`).
pub fn assemble_mode_operator(n: usize, xi: &[f64], t_grid: &[f64]) -> Result<ModeSystem> {
    let op = ModeOperator::new(n, xi)?;
    if t_grid.len() < 8 {
        return Err(Error::InvalidArgument("mode grid needs at least 8 nodes".into()));
    }
    if t_grid[0] != 0.0 {
        return Err(Error::InvalidArgument("mode grid must start at t = 0".into()));
    }
    for w in t_grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArgument("mode grid must be strictly increasing".into()));
        }
    }
    let mut nodes = Vec::with_capacity(t_grid.len() + 1);
    nodes.push(-(t_grid[1] - t_grid[0]));
    nodes.extend_from_slice(t_grid);
    let stencils = FdStencils::new(&nodes);
    Ok(ModeSystem { op, nodes, stencils })
}

impl ModeSystem {
    /// Evaluates `L_ξ H` on sampled values (`[node][comp]` over the
    /// extended nodes); rows are produced at every node, edge rows using
    /// one-sided windows.
    pub fn apply(&self, h: &[Complex64]) -> Vec<Complex64> {
        let nc = self.op.nc;
        let nn = self.nodes.len();
        assert_eq!(h.len(), nn * nc);
        let mut out = vec![Complex64::default(); nn * nc];
        let mut val = vec![Complex64::default(); nc];
        let mut d1 = vec![Complex64::default(); nc];
        let mut d2 = vec![Complex64::default(); nc];
        for j in 0..nn {
            self.derivatives_at(h, j, &mut val, &mut d1, &mut d2);
            let row = self.op.apply_pointwise(self.nodes[j], &val, &d1, &d2);
            out[j * nc..(j + 1) * nc].copy_from_slice(&row);
        }
        out
    }

    /// The boundary functional at extended node `j` with the node's own
    /// difference window.
    pub fn bianchi_at(&self, h: &[Complex64], j: usize) -> Vec<Complex64> {
        let nc = self.op.nc;
        let (s1, w1) = self.stencils.row(j, 1);
        let mut val = vec![Complex64::default(); nc];
        let mut d1 = vec![Complex64::default(); nc];
        for c in 0..nc {
            val[c] = h[j * nc + c];
            let mut a = Complex64::default();
            for (k, &w) in w1.iter().enumerate() {
                a += w * h[(s1 + k) * nc + c];
            }
            d1[c] = a;
        }
        self.op.bianchi_pointwise(self.nodes[j], &val, &d1)
    }

    fn derivatives_at(
        &self,
        h: &[Complex64],
        j: usize,
        val: &mut [Complex64],
        d1: &mut [Complex64],
        d2: &mut [Complex64],
    ) {
        let nc = self.op.nc;
        let (s1, w1) = self.stencils.row(j, 1);
        let (s2, w2) = self.stencils.row(j, 2);
        for c in 0..nc {
            val[c] = h[j * nc + c];
            let mut a = Complex64::default();
            for (k, &w) in w1.iter().enumerate() {
                a += w * h[(s1 + k) * nc + c];
            }
            d1[c] = a;
            let mut b = Complex64::default();
            for (k, &w) in w2.iter().enumerate() {
                b += w * h[(s2 + k) * nc + c];
            }
            d2[c] = b;
        }
    }
}

/// A solved mode profile on an extended node set (ghost node first).
#[derive(Debug, Clone)]
pub struct ModeState {
    pub n: usize,
    pub nc: usize,
    pub xi: Vec<f64>,
    /// Extended nodes: `nodes[0]` is the ghost node below `t = 0`.
    pub nodes: Vec<f64>,
    /// Values `[node][comp]` on the extended nodes.
    pub h: Vec<Complex64>,
}

impl ModeState {
    /// Value of component `c` at extended node `j`.
    pub fn value(&self, j: usize, c: usize) -> Complex64 {
        self.h[j * self.nc + c]
    }

    /// Largest weighted amplitude `sup_j e^{rate·t_j} max_c |H_c(t_j)|`
    /// over the physical nodes.
    pub fn sup_weighted(&self, rate: f64) -> f64 {
        let mut m: f64 = 0.0;
        for j in 1..self.nodes.len() {
            let w = (rate * self.nodes[j]).exp();
            for c in 0..self.nc {
                m = m.max(w * self.value(j, c).norm());
            }
        }
        m
    }

    /// Least-squares exponent of `max_c |H_c(t)|` against `e^{s·t}` over
    /// physical nodes with `t_lo <= t <= t_hi`.
    pub fn decay_exponent(&self, t_lo: f64, t_hi: f64) -> f64 {
        let mut ts = Vec::new();
        let mut ys = Vec::new();
        for j in 1..self.nodes.len() {
            let t = self.nodes[j];
            if t < t_lo || t > t_hi {
                continue;
            }
            let amp = (0..self.nc).map(|c| self.value(j, c).norm()).fold(0.0f64, f64::max);
            if amp > 0.0 {
                ts.push(t);
                ys.push(amp.ln());
            }
        }
        fit_slope(&ts, &ys)
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    assert!(x.len() >= 2, "slope fit needs at least two samples");
    let m = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (m * sxy - sx * sy) / (m * sxx - sx * sx)
}

/// The boundary functional of a state over all physical nodes, stored
/// `[physical node][row]` with `n+1` rows per node.
pub fn mode_bianchi(sys: &ModeSystem, state: &ModeState) -> Vec<Complex64> {
    let n = sys.op.n;
    let nn = sys.nodes.len();
    let mut out = Vec::with_capacity((nn - 1) * (n + 1));
    for j in 1..nn {
        out.extend(sys.bianchi_at(&state.h, j));
    }
    out
}

/// A closed-form solution family: a sum of terms `coeff · t^p · e^{-r t}`
/// per packed component, with analytic derivatives.
#[derive(Debug, Clone)]
pub struct ModeSolution {
    pub n: usize,
    pub nc: usize,
    pub xi: Vec<f64>,
    terms: Vec<(f64, u32, Vec<Complex64>)>,
}

impl ModeSolution {
    fn new(n: usize, xi: &[f64]) -> Self {
        ModeSolution { n, nc: ncomp_collar(n), xi: xi.to_vec(), terms: Vec::new() }
    }

    fn push(&mut self, rate: f64, tpow: u32, coeff: Vec<Complex64>) {
        self.terms.push((rate, tpow, coeff));
    }

    /// Values and first and second analytic derivatives at `t`.
    pub fn eval(&self, t: f64) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
        let mut h = vec![Complex64::default(); self.nc];
        let mut dh = vec![Complex64::default(); self.nc];
        let mut ddh = vec![Complex64::default(); self.nc];
        for (rate, p, coeff) in &self.terms {
            let p = *p as i32;
            let pf = p as f64;
            let e = (-rate * t).exp();
            let tp = t.powi(p);
            let tp1 = if p >= 1 { pf * t.powi(p - 1) } else { 0.0 };
            let tp2 = if p >= 2 { pf * (pf - 1.0) * t.powi(p - 2) } else { 0.0 };
            let v = tp * e;
            let dv = (tp1 - rate * tp) * e;
            let ddv = (tp2 - 2.0 * rate * tp1 + rate * rate * tp) * e;
            for c in 0..self.nc {
                h[c] += coeff[c] * v;
                dh[c] += coeff[c] * dv;
                ddh[c] += coeff[c] * ddv;
            }
        }
        (h, dh, ddh)
    }

    /// Samples the family onto a physical grid, producing a state on the
    /// extended nodes (ghost included).
    pub fn sample_state(&self, t_grid: &[f64]) -> ModeState {
        let mut nodes = Vec::with_capacity(t_grid.len() + 1);
        nodes.push(-(t_grid[1] - t_grid[0]));
        nodes.extend_from_slice(t_grid);
        let mut h = vec![Complex64::default(); nodes.len() * self.nc];
        for (j, &t) in nodes.iter().enumerate() {
            let (v, _, _) = self.eval(t);
            h[j * self.nc..(j + 1) * self.nc].copy_from_slice(&v);
        }
        ModeState { n: self.n, nc: self.nc, xi: self.xi.clone(), nodes, h }
    }

    /// The residual `L_ξ` applied analytically at `t`.
    pub fn residual(&self, op: &ModeOperator, t: f64) -> Vec<Complex64> {
        let (h, dh, ddh) = self.eval(t);
        op.apply_pointwise(t, &h, &dh, &ddh)
    }

    /// The boundary functional applied analytically at `t`.
    pub fn bianchi(&self, op: &ModeOperator, t: f64) -> Vec<Complex64> {
        let (h, dh, _) = self.eval(t);
        op.bianchi_pointwise(t, &h, &dh)
    }
}

/// The trace-free solution family through first order in `ξ`:
/// `H_ij = i a_ij e^{-nt}` with the induced resonant mixed block
/// `H_j0 = -(2/(n+2)) ξ_l a_lj t e^{-(n+1)t}`. Errors unless `a` is
/// symmetric and trace-free.
pub fn type1_solution(n: usize, xi: &[f64], a: &DMatrix<f64>) -> Result<ModeSolution> {
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::InvalidArgument("coefficient matrix has the wrong shape".into()));
    }
    let mut trace = 0.0;
    for i in 0..n {
        trace += a[(i, i)];
        for j in 0..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 {
                return Err(Error::InvalidArgument("coefficient matrix is not symmetric".into()));
            }
        }
    }
    if trace.abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "coefficient matrix has trace {trace:e}, expected trace-free"
        )));
    }
    let mut sol = ModeSolution::new(n, xi);
    let nc = sol.nc;
    let mut c0 = vec![Complex64::default(); nc];
    for i in 0..n {
        for j in i..n {
            c0[pair_pack(n, i, j)] = I * a[(i, j)];
        }
    }
    sol.push(n as f64, 0, c0);
    let mut c1 = vec![Complex64::default(); nc];
    let scale = -2.0 / (n as f64 + 2.0);
    for j in 0..n {
        let mut v = 0.0;
        for l in 0..n {
            v += xi[l] * a[(l, j)];
        }
        c1[comp_i0(n, j)] = Complex64::new(scale * v, 0.0);
    }
    sol.push(n as f64 + 1.0, 1, c1);
    Ok(sol)
}

/// The trace-coupled family through first order in `ξ`:
/// `H_jj = a e^{-λt}`, `H_00 = b e^{-λt}`, with the induced
/// `H_j0 = K (b - a) ξ_j e^{-(λ+1)t}` where `K = 2i / (λ² + (2-n)λ - 2n)`
/// (the denominator equals `2λ`, so `K = i/λ`).
pub fn type23_solution(n: usize, xi: &[f64], a: Complex64, b: Complex64) -> Result<ModeSolution> {
    let lambda = lambda_exponent(n);
    let denom = lambda * lambda + (2.0 - n as f64) * lambda - 2.0 * (n as f64);
    if denom.abs() < 1e-12 {
        return Err(Error::LinearSolve("degenerate trace-family coupling constant".into()));
    }
    let k = 2.0 * I / denom;
    let mut sol = ModeSolution::new(n, xi);
    let nc = sol.nc;
    let mut c0 = vec![Complex64::default(); nc];
    for j in 0..n {
        c0[pair_pack(n, j, j)] = a;
    }
    c0[comp_00(n)] = b;
    sol.push(lambda, 0, c0);
    let mut c1 = vec![Complex64::default(); nc];
    for j in 0..n {
        c1[comp_i0(n, j)] = k * (b - a) * xi[j];
    }
    sol.push(lambda + 1.0, 0, c1);
    Ok(sol)
}

/// Leading boundary coefficients of the trace-coupled family at `t = 0`:
/// `B_i = (bi_a·a + bi_b·b) ξ_i + O(|ξ|²)` and `B_0 = b0_a·a + b0_b·b +
/// O(|ξ|²)`, returned as `(bi_a, bi_b, b0_a, b0_b)`.
///
/// With `K = i/λ` and `λ² = nλ + 2n` these reduce to
/// `bi_a = i n(λ-2)/(2λ)`, `bi_b = i (2n-λ)/(2λ)`, `b0_a = n(λ-2)/2`,
/// `b0_b = (2n-λ)/2` — both rows are multiples of the single functional
/// `σ = n(λ-2)a + (2n-λ)b`, so the leading boundary map of this family has
/// rank one (its kernel direction `(a, b) ∝ (2n-λ, -n(λ-2))` produces
/// boundary values of order `|ξ|²`).
pub fn trace_family_boundary_coefficients(
    n: usize,
) -> (Complex64, Complex64, Complex64, Complex64) {
    let nf = n as f64;
    let lambda = lambda_exponent(n);
    let k = 2.0 * I / (lambda * lambda + (2.0 - nf) * lambda - 2.0 * nf);
    let bi_a = (lambda - nf) * k + 0.5 * (nf - 2.0) * I;
    let bi_b = (nf - lambda) * k + 0.5 * I;
    let b0_a = Complex64::new(-(nf - 0.5 * lambda * nf), 0.0);
    let b0_b = Complex64::new(nf - 0.5 * lambda, 0.0);
    (bi_a, bi_b, b0_a, b0_b)
}

/// The mixed decaying family exact at `ξ = 0`: the pure-trace profile
/// `e^{-λt}` together with `H_j0 = b_j e^{-(n+1)t}`.
pub fn type4_solution(n: usize, b: &[f64]) -> Result<ModeSolution> {
    if b.len() != n {
        return Err(Error::InvalidArgument("mixed-block coefficient has the wrong length".into()));
    }
    let lambda = lambda_exponent(n);
    let mut sol = ModeSolution::new(n, &vec![0.0; n]);
    let nc = sol.nc;
    let mut c0 = vec![Complex64::default(); nc];
    for j in 0..n {
        c0[pair_pack(n, j, j)] = Complex64::new(1.0, 0.0);
    }
    c0[comp_00(n)] = Complex64::new(1.0, 0.0);
    sol.push(lambda, 0, c0);
    let mut c1 = vec![Complex64::default(); nc];
    for j in 0..n {
        c1[comp_i0(n, j)] = Complex64::new(b[j], 0.0);
    }
    sol.push(n as f64 + 1.0, 0, c1);
    Ok(sol)
}

/// The first-order coupling block `Q1(ξ)` in the orthonormal packed basis
/// (diagonal and `00` slots carry a `1/√2` scaling), together with its
/// eigendecomposition. The matrix is Hermitian by construction and
/// verified to `1e-12`; eigenvalues are real, ascending, with orthonormal
/// eigenvectors as columns.
pub struct Q1Decomposition {
    pub matrix: DMatrix<Complex64>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<Complex64>,
}

pub fn q1_matrix(n: usize, xi: &[f64]) -> Result<Q1Decomposition> {
    let op = ModeOperator::new(n, xi)?;
    let matrix = orthobasis_matrix(&op, |op, h, out| op.q1_apply(h, out));
    for r in 0..op.nc {
        for c in 0..op.nc {
            if (matrix[(r, c)] - matrix[(c, r)].conj()).norm() > 1e-12 {
                return Err(Error::LinearSolve(format!(
                    "first-order mode block is not Hermitian at ({r},{c})"
                )));
            }
        }
    }
    let (eigenvalues, eigenvectors) = hermitian_eigen(&matrix);
    Ok(Q1Decomposition { matrix, eigenvalues, eigenvectors })
}

/// The zeroth-order block `Q0` in the orthonormal packed basis (real
/// symmetric).
pub fn q0_matrix(n: usize) -> DMatrix<Complex64> {
    let op = ModeOperator::new(n, &vec![0.0; n]).unwrap();
    orthobasis_matrix(&op, |op, h, out| op.q0_apply(h, out))
}

fn orthobasis_matrix(
    op: &ModeOperator,
    apply: impl Fn(&ModeOperator, &[Complex64], &mut [Complex64]),
) -> DMatrix<Complex64> {
    let nc = op.nc;
    let n = op.n;
    let mut m = DMatrix::<Complex64>::zeros(nc, nc);
    let mut h = vec![Complex64::default(); nc];
    let mut out = vec![Complex64::default(); nc];
    for c in 0..nc {
        h.fill(Complex64::default());
        // Column c: feed the orthonormal basis vector through the packed
        // action, then rescale the rows into the same basis.
        h[c] = Complex64::new(1.0 / a_from_h_factor(n, c), 0.0);
        apply(op, &h, &mut out);
        for r in 0..nc {
            m[(r, c)] = out[r] * a_from_h_factor(n, r);
        }
    }
    m
}

/// One two-point asymptotic closure row: enforce
/// `w · H(t_b) = e^{μ (t_b - t_a)} w · H(t_a)` for the channel `w`
/// (coefficients expressed against packed components).
#[derive(Debug, Clone)]
pub struct ClosureRow {
    pub w: Vec<Complex64>,
    pub mu: f64,
}

/// Channel closure rows from the frozen coefficient matrix at `t_frozen`:
/// the Hermitian pencil `Q0 + s Q1(ξ/|ξ|) - s² I` with `s = e^{-t} |ξ|` is
/// diagonalized, and each eigenvalue `θ` contributes the indicial root
/// `μ = (-n ± sqrt(n² - 4θ)) / 2` — the strictly decaying root for a
/// right-end closure, the non-growing root otherwise.
pub fn pencil_closure(
    n: usize,
    xi: &[f64],
    t_frozen: f64,
    decaying: bool,
) -> Result<Vec<ClosureRow>> {
    let nf = n as f64;
    let xi_norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = (-t_frozen).exp() * xi_norm;
    let nc = ncomp_collar(n);
    let mut w = q0_matrix(n);
    if s > 0.0 {
        let unit: Vec<f64> = xi.iter().map(|v| v / xi_norm).collect();
        let q1 = q1_matrix(n, &unit)?;
        for r in 0..nc {
            for c in 0..nc {
                w[(r, c)] += s * q1.matrix[(r, c)];
            }
            w[(r, r)] -= Complex64::new(s * s, 0.0);
        }
    }
    let (theta, vecs) = hermitian_eigen(&w);
    let mut rows = Vec::with_capacity(nc);
    for (k, &th) in theta.iter().enumerate() {
        let disc = nf * nf - 4.0 * th;
        if disc < 0.0 {
            return Err(Error::NoConvergence(format!(
                "closure channel has oscillatory roots (θ = {th:.3e} at s = {s:.3e}); \
                 enlarge the time window"
            )));
        }
        let mu = if decaying { 0.5 * (-nf - disc.sqrt()) } else { 0.5 * (-nf + disc.sqrt()) };
        // Convert the orthonormal-basis eigenvector into a row functional
        // on packed components.
        let mut row = vec![Complex64::default(); nc];
        for c in 0..nc {
            row[c] = vecs[(c, k)].conj() * a_from_h_factor(n, c);
        }
        rows.push(ClosureRow { w: row, mu });
    }
    Ok(rows)
}

/// Inserts extra nodes near `t = 0` so the local step obeys
/// `Δt · e^{-t} |ξ| ≤ c0`; the returned set contains every input node.
pub fn refine_for_xi(t_grid: &[f64], xi_norm: f64, c0: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t_grid.len());
    for w in t_grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let need = ((b - a) * (-a).exp() * xi_norm / c0).ceil().max(1.0) as usize;
        for k in 0..need {
            out.push(a + (b - a) * k as f64 / need as f64);
        }
    }
    out.push(*t_grid.last().unwrap());
    out
}

/// A factored collocation system for one frequency on `[0, t_max]`:
/// value rows pinning `H(0)`, interior collocation on every node except
/// the last, and strictly decaying pencil closure rows at the right end.
pub struct ModeBvp {
    pub sys: ModeSystem,
    lu: BandedLu,
}

impl ModeBvp {
    /// Builds and factors the system on the (possibly non-uniform)
    /// physical grid `t_grid` starting at `0`.
    pub fn new(n: usize, xi: &[f64], t_grid: &[f64]) -> Result<Self> {
        let sys = assemble_mode_operator(n, xi, t_grid)?;
        let nc = sys.op.nc;
        let nn = sys.nodes.len();
        let half = 5 * nc;
        let mut mat = BandedMatrix::zeros(nn * nc, half, half);
        // Block 0: value rows pinning H(0) (the right-hand side selects
        // the boundary values).
        for c in 0..nc {
            mat.set(c, nc + c, Complex64::new(1.0, 0.0));
        }
        // Blocks 1..nn-2: collocation at the interior nodes.
        for j in 1..nn - 1 {
            add_collocation_rows(&mut mat, &sys, j, j);
        }
        // Block nn-1: closure rows at the right end.
        let rows = pencil_closure(n, xi, sys.nodes[nn - 1], true)?;
        let dt_end = sys.nodes[nn - 1] - sys.nodes[nn - 2];
        for (k, row) in rows.iter().enumerate() {
            let r = (nn - 1) * nc + k;
            let ratio = (row.mu * dt_end).exp();
            for c in 0..nc {
                if row.w[c].norm() == 0.0 {
                    continue;
                }
                mat.add(r, (nn - 1) * nc + c, row.w[c]);
                mat.add(r, (nn - 2) * nc + c, -ratio * row.w[c]);
            }
        }
        let lu = mat.lu()?;
        Ok(ModeBvp { sys, lu })
    }

    /// Solves for the decaying profile with prescribed values `H(0)` and
    /// interior source `u` (stored `[node][comp]` on the extended nodes;
    /// only collocation nodes are read; `None` means zero).
    pub fn solve(&self, boundary_value: &[Complex64], source: Option<&[Complex64]>) -> ModeState {
        let nc = self.sys.op.nc;
        let nn = self.sys.nodes.len();
        let mut rhs = vec![Complex64::default(); nn * nc];
        rhs[..nc].copy_from_slice(boundary_value);
        if let Some(u) = source {
            for j in 1..nn - 1 {
                for c in 0..nc {
                    rhs[j * nc + c] = u[j * nc + c];
                }
            }
        }
        let h = self.lu.solve(&rhs);
        ModeState {
            n: self.sys.op.n,
            nc,
            xi: self.sys.op.xi.clone(),
            nodes: self.sys.nodes.clone(),
            h,
        }
    }

    /// The boundary functional of a state at `t = 0`, using the same
    /// one-sided derivative window as the assembled system.
    pub fn bianchi_at_zero(&self, state: &ModeState) -> Vec<Complex64> {
        self.sys.bianchi_at(&state.h, 1)
    }

    /// Collocation residual of a state against a source (zero if `None`),
    /// as the largest row magnitude over the interior nodes.
    pub fn residual_sup(&self, state: &ModeState, source: Option<&[Complex64]>) -> f64 {
        let nc = self.sys.op.nc;
        let nn = self.sys.nodes.len();
        let r = self.sys.apply(&state.h);
        let mut sup: f64 = 0.0;
        for j in 1..nn - 1 {
            for c in 0..nc {
                let mut v = r[j * nc + c];
                if let Some(u) = source {
                    v -= u[j * nc + c];
                }
                sup = sup.max(v.norm());
            }
        }
        sup
    }
}

/// Adds the `L_ξ H = rhs` collocation rows for extended node `node_idx`
/// into row block `row_block` of a banded matrix over `[node][comp]`
/// unknowns.
pub fn add_collocation_rows(
    mat: &mut BandedMatrix,
    sys: &ModeSystem,
    row_block: usize,
    node_idx: usize,
) {
    let op = &sys.op;
    let nc = op.nc;
    let nf = op.n as f64;
    let t = sys.nodes[node_idx];
    let (s1, w1) = sys.stencils.row(node_idx, 1);
    let (s2, w2) = sys.stencils.row(node_idx, 2);
    // Scalar part: H'' + n H' - e^{-2t} |ξ|² H, identical in every component.
    for c in 0..nc {
        let r = row_block * nc + c;
        for (k, &w) in w2.iter().enumerate() {
            mat.add(r, (s2 + k) * nc + c, Complex64::new(w, 0.0));
        }
        for (k, &w) in w1.iter().enumerate() {
            mat.add(r, (s1 + k) * nc + c, Complex64::new(nf * w, 0.0));
        }
        let e2 = (-2.0 * t).exp() * op.xi_norm * op.xi_norm;
        mat.add(r, node_idx * nc + c, Complex64::new(-e2, 0.0));
    }
    // Coupled part: Q0 + e^{-t} Q1, column by column.
    let e1 = (-t).exp();
    let mut h = vec![Complex64::default(); nc];
    let mut q0 = vec![Complex64::default(); nc];
    let mut q1 = vec![Complex64::default(); nc];
    for c in 0..nc {
        h.fill(Complex64::default());
        h[c] = Complex64::new(1.0, 0.0);
        op.q0_apply(&h, &mut q0);
        op.q1_apply(&h, &mut q1);
        for r in 0..nc {
            let v = q0[r] + e1 * q1[r];
            if v.norm() != 0.0 {
                mat.add(row_block * nc + r, node_idx * nc + c, v);
            }
        }
    }
}

/// The decaying kernel of the mode system on a grid: one basis state per
/// packed component (unit boundary values), together with the discrete
/// boundary-functional matrix `B[a][m] = B_ξ(K_m)(0)_a`.
pub struct KernelBasis {
    pub bvp: ModeBvp,
    pub states: Vec<ModeState>,
    pub b_matrix: DMatrix<Complex64>,
}

/// Builds the decaying kernel basis at `xi != 0`, refining the grid near
/// `t = 0` when `|ξ|` is large so the first-order coefficient stays
/// resolved.
pub fn decaying_kernel_basis(n: usize, xi: &[f64], t_grid: &[f64]) -> Result<KernelBasis> {
    let xi_norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xi_norm == 0.0 {
        return Err(Error::InvalidArgument(
            "the boundary value problem needs a nonzero frequency".into(),
        ));
    }
    let refined = refine_for_xi(t_grid, xi_norm, 0.9);
    let bvp = ModeBvp::new(n, xi, &refined)?;
    let nc = bvp.sys.op.nc;
    let mut states = Vec::with_capacity(nc);
    let mut b_matrix = DMatrix::<Complex64>::zeros(n + 1, nc);
    for m in 0..nc {
        let mut e = vec![Complex64::default(); nc];
        e[m] = Complex64::new(1.0, 0.0);
        let state = bvp.solve(&e, None);
        let b = bvp.bianchi_at_zero(&state);
        for a in 0..=n {
            b_matrix[(a, m)] = b[a];
        }
        states.push(state);
    }
    Ok(KernelBasis { bvp, states, b_matrix })
}

impl KernelBasis {
    /// The linear combination `Σ c_m K_m`.
    pub fn combine(&self, c: &[Complex64]) -> ModeState {
        let nc = self.bvp.sys.op.nc;
        let mut h = vec![Complex64::default(); self.bvp.sys.nodes.len() * nc];
        for (m, state) in self.states.iter().enumerate() {
            if c[m].norm() == 0.0 {
                continue;
            }
            for (x, y) in h.iter_mut().zip(&state.h) {
                *x += c[m] * y;
            }
        }
        ModeState {
            n: self.bvp.sys.op.n,
            nc,
            xi: self.bvp.sys.op.xi.clone(),
            nodes: self.bvp.sys.nodes.clone(),
            h,
        }
    }

    /// Coefficients of the decaying solution with `B_ξ(H)(0) = target`
    /// minimizing the orthonormal-basis norm of `H(0)`; errors with the
    /// condition number if the boundary system is numerically singular.
    pub fn boundary_coefficients(&self, target: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.bvp.sys.op.n;
        let nc = self.bvp.sys.op.nc;
        // Weighted minimum norm: minimize Σ w_c² |c_c|² subject to
        // B c = target, with w_c the orthonormal-basis factors; the
        // solution is c = W⁻¹ Bᴴ (B W⁻¹ Bᴴ)⁻¹ target.
        let mut bw = DMatrix::<Complex64>::zeros(n + 1, nc);
        for a in 0..=n {
            for m in 0..nc {
                let w = a_from_h_factor(n, m);
                bw[(a, m)] = self.b_matrix[(a, m)] / Complex64::new(w * w, 0.0);
            }
        }
        let gram = &bw * self.b_matrix.adjoint();
        let svd = gram.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 0.0 || smax / smin > 1e12 {
            return Err(Error::LinearSolve(format!(
                "boundary system is numerically singular (condition number {:.3e})",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            )));
        }
        let rhs = DVector::from_column_slice(target);
        let y = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::LinearSolve("boundary system factorization failed".into()))?;
        let c = bw.adjoint() * y;
        Ok(c.iter().cloned().collect())
    }
}

/// Solves the decaying boundary value problem `L_ξ H = 0`,
/// `B_ξ(H)(0) = boundary_target`, picking the minimum-boundary-norm
/// solution; the collocation residual is verified below `1e-8`.
pub fn decaying_bvp_solve(
    n: usize,
    xi: &[f64],
    boundary_target: &[Complex64],
    t_grid: &[f64],
) -> Result<ModeState> {
    if boundary_target.len() != n + 1 {
        return Err(Error::InvalidArgument(format!(
            "boundary target has {} entries, expected {}",
            boundary_target.len(),
            n + 1
        )));
    }
    let basis = decaying_kernel_basis(n, xi, t_grid)?;
    let c = basis.boundary_coefficients(boundary_target)?;
    let state = basis.combine(&c);
    let res = basis.bvp.residual_sup(&state, None);
    let scale = state.sup_weighted(0.0).max(1.0);
    if res > 1e-8 * scale {
        return Err(Error::NoConvergence(format!(
            "collocation residual {res:.3e} exceeds tolerance at |ξ| = {:.3e}",
            basis.bvp.sys.op.xi_norm
        )));
    }
    Ok(state)
}

/// One row of the boundary-independence profile for a solution basis:
/// singular values of the `(n+1)×(n+1)` matrix `[B_ξ(H^a)(t)]` at one
/// node, both raw and with unit-normalized columns.
#[derive(Debug, Clone)]
pub struct IndependenceSample {
    pub t: f64,
    pub sigma_min_raw: f64,
    pub sigma_min_scaled: f64,
}

/// Builds the unit-target solution basis `H^a` (`B_ξ(H^a)(0) = e_a`) and
/// evaluates the `(n+1)×(n+1)` boundary matrix `[B_ξ(H^a)(t)]_a` at every
/// physical node, returning its minimum singular value per node.
pub fn boundary_independence_profile(
    n: usize,
    xi: &[f64],
    t_grid: &[f64],
) -> Result<Vec<IndependenceSample>> {
    let basis = decaying_kernel_basis(n, xi, t_grid)?;
    let mut solutions = Vec::with_capacity(n + 1);
    for a in 0..=n {
        let mut target = vec![Complex64::default(); n + 1];
        target[a] = Complex64::new(1.0, 0.0);
        let c = basis.boundary_coefficients(&target)?;
        solutions.push(basis.combine(&c));
    }
    let nn = basis.bvp.sys.nodes.len();
    let mut out = Vec::with_capacity(nn - 1);
    for j in 1..nn {
        let mut m = DMatrix::<Complex64>::zeros(n + 1, n + 1);
        for (a, sol) in solutions.iter().enumerate() {
            let b = basis.bvp.sys.bianchi_at(&sol.h, j);
            for r in 0..=n {
                m[(r, a)] = b[r];
            }
        }
        let raw = m.clone().svd(false, false).singular_values.min();
        // Column-normalized copy measures directional independence even
        // when all columns have decayed by orders of magnitude.
        let mut scaled = m;
        for a in 0..=n {
            let norm = scaled.column(a).norm();
            if norm > 0.0 {
                for r in 0..=n {
                    scaled[(r, a)] /= Complex64::new(norm, 0.0);
                }
            }
        }
        let s_scaled = scaled.svd(false, false).singular_values.min();
        out.push(IndependenceSample {
            t: basis.bvp.sys.nodes[j],
            sigma_min_raw: raw,
            sigma_min_scaled: s_scaled,
        });
    }
    Ok(out)
}

/// The leading boundary coefficient matrix at `|ξ| = 1` and its least
/// squares right inverse: row `a` holds the coefficients of
/// `B_ξ(H)(0)_a` on the packed boundary jet.
pub struct BoundaryMatrix {
    pub r: DMatrix<Complex64>,
    pub right_inverse: DMatrix<Complex64>,
}

pub fn r_matrix(n: usize, xi_unit: &[f64]) -> Result<BoundaryMatrix> {
    let norm = xi_unit.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "expected a unit frequency, got |ξ| = {norm}"
        )));
    }
    let nc = ncomp_collar(n);
    let mut m = DMatrix::<Complex64>::zeros(n + 1, nc);
    for i in 0..n {
        m[(i, comp_i0(n, i))] = Complex64::new(-1.0, 0.0);
        for j in 0..n {
            m[(i, pair_pack(n, i, j))] += -I * xi_unit[j];
        }
        for p in 0..n {
            m[(i, pair_pack(n, p, p))] += 0.5 * I * xi_unit[i];
        }
        m[(i, comp_00(n))] += 0.5 * I * xi_unit[i];
    }
    m[(n, comp_00(n))] = Complex64::new(-0.5, 0.0);
    for p in 0..n {
        m[(n, pair_pack(n, p, p))] += Complex64::new(0.5, 0.0);
    }
    for i in 0..n {
        m[(n, comp_i0(n, i))] = -I * xi_unit[i];
    }
    // Least squares right inverse Rᴴ (R Rᴴ)⁻¹; full row rank is required.
    let gram = &m * m.adjoint();
    let svd = gram.clone().svd(false, false);
    if svd.singular_values.min() < 1e-10 * svd.singular_values.max() {
        return Err(Error::LinearSolve("leading boundary matrix is rank deficient".into()));
    }
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::LinearSolve("leading boundary Gram inversion failed".into()))?;
    let right_inverse = m.adjoint() * inv;
    Ok(BoundaryMatrix { r: m, right_inverse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pack::{rotation_rep_sym, trace_free_rows};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_grid(t_max: f64, nt: usize) -> Vec<f64> {
        (0..=nt).map(|i| t_max * i as f64 / nt as f64).collect()
    }

    fn random_tracefree(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let tr = (0..n).map(|i| a[(i, i)]).sum::<f64>() / n as f64;
        for i in 0..n {
            a[(i, i)] -= tr;
        }
        a
    }

    /// The induced rotation action on orthonormal-basis components:
    /// conjugate the packed representation by the basis scaling.
    fn rotation_rep_ortho(n: usize, o: &DMatrix<f64>) -> DMatrix<Complex64> {
        let p = rotation_rep_sym(n, o);
        let nc = ncomp_collar(n);
        let mut out = DMatrix::<Complex64>::zeros(nc, nc);
        for r in 0..nc {
            for c in 0..nc {
                let v = a_from_h_factor(n, r) * p[(r, c)] / a_from_h_factor(n, c);
                out[(r, c)] = Complex64::new(v, 0.0);
            }
        }
        out
    }

    fn rotation_matrix(n: usize, axis: &[f64; 3], angle: f64) -> DMatrix<f64> {
        assert_eq!(n, 3);
        let norm = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
        let (s, c) = angle.sin_cos();
        let mut o = DMatrix::<f64>::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let cross = match (i, j) {
                    (0, 1) => -u[2],
                    (0, 2) => u[1],
                    (1, 0) => u[2],
                    (1, 2) => -u[0],
                    (2, 0) => -u[1],
                    (2, 1) => u[0],
                    _ => 0.0,
                };
                o[(i, j)] =
                    c * if i == j { 1.0 } else { 0.0 } + s * cross + (1.0 - c) * u[i] * u[j];
            }
        }
        o
    }

    #[test]
    fn lambda_satisfies_its_quadratic_and_brackets() {
        for n in 3..=10 {
            let nf = n as f64;
            let l = lambda_exponent(n);
            assert!(
                (l * l - nf * l - 2.0 * nf).abs() < 1e-12,
                "quadratic residual too large at n = {n}"
            );
            assert!(l > nf + 1.0 && l < nf + 2.0, "λ out of bracket at n = {n}");
        }
        // Frozen reference values: (3 + sqrt(33))/2 and (4 + sqrt(48))/2.
        assert!((lambda_exponent(3) - 4.372_281_323_269_014).abs() < 1e-12);
        assert!((lambda_exponent(4) - 5.464_101_615_137_754).abs() < 1e-12);
    }

    #[test]
    fn q1_is_hermitian_with_the_expected_spectrum() {
        // Frozen spectrum of Q1(e1) in the orthonormal basis for n = 3;
        // symmetric about zero.
        let q = q1_matrix(3, &[1.0, 0.0, 0.0]).unwrap();
        let expected = [-4.0, -2.0, -2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 4.0];
        assert_eq!(q.eigenvalues.len(), expected.len());
        for (e, x) in q.eigenvalues.iter().zip(expected.iter()) {
            assert!((e - x).abs() < 1e-12, "eigenvalue {e} vs expected {x}");
        }
        // Eigenvectors are orthonormal and reproduce the matrix.
        let nc = q.matrix.nrows();
        let mut recon = DMatrix::<Complex64>::zeros(nc, nc);
        for k in 0..nc {
            let v = q.eigenvectors.column(k);
            for r in 0..nc {
                for c in 0..nc {
                    recon[(r, c)] += q.eigenvalues[k] * v[r] * v[c].conj();
                }
            }
        }
        assert!((&recon - &q.matrix).norm() < 1e-10);
        // Linearity: doubling ξ doubles every eigenvalue.
        let q2 = q1_matrix(3, &[2.0, 0.0, 0.0]).unwrap();
        for (a, b) in q.eigenvalues.iter().zip(q2.eigenvalues.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        // ξ = 0 gives the zero matrix.
        let q0 = q1_matrix(3, &[0.0, 0.0, 0.0]).unwrap();
        assert!(q0.matrix.norm() == 0.0);
        // Hermiticity is enforced (to 1e-12) for arbitrary frequencies.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let xi: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(q1_matrix(3, &xi).is_ok());
        }
    }

    #[test]
    fn q1_rotates_equivariantly() {
        let n = 3;
        let o = rotation_matrix(n, &[0.36, -0.48, 0.8], 0.83);
        let xi = [0.3, -1.1, 0.7];
        let oxi: Vec<f64> = (0..3).map(|i| (0..3).map(|j| o[(i, j)] * xi[j]).sum()).collect();
        let rho = rotation_rep_ortho(n, &o);
        let q_xi = q1_matrix(n, &xi).unwrap().matrix;
        let q_oxi = q1_matrix(n, &oxi).unwrap().matrix;
        // Q1(Oξ) = ρ Q1(ξ) ρᵀ in the orthonormal basis (ρ is real
        // orthogonal there).
        let diff = &q_oxi - &rho * &q_xi * rho.transpose();
        assert!(diff.norm() < 1e-12, "equivariance defect {}", diff.norm());
    }

    #[test]
    fn type1_residual_is_second_order_and_bianchi_is_exact() {
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tracefree(n, &mut rng);
        for &scale in &[1e-3, 5e-4] {
            let xi = [scale * 0.6, -scale * 0.3, scale * 0.5];
            let op = ModeOperator::new(n, &xi).unwrap();
            let sol = type1_solution(n, &xi, &a).unwrap();
            let xin = op.xi_norm;
            for &t in &[0.0, 0.7, 2.3] {
                let res = sol.residual(&op, t);
                let sup = res.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
                let bound = 20.0 * xin * xin * (-(n as f64 + 2.0) * t).exp();
                assert!(sup < bound, "residual {sup:e} above {bound:e} at t = {t}");
            }
            // The mixed-block coefficient -(2/(n+2)) a_lj ξ_l makes the
            // leading boundary values exact: B_i = (n/(n+2)) ξ_j a_ij and
            // B_0 = O(|ξ|²) at t = 0.
            let b = sol.bianchi(&op, 0.0);
            for i in 0..n {
                let expect: f64 =
                    (0..n).map(|j| xi[j] * a[(i, j)]).sum::<f64>() * n as f64 / (n as f64 + 2.0);
                assert!((b[i] - Complex64::new(expect, 0.0)).norm() < 1e-8 * scale);
            }
            assert!(b[n].norm() < 10.0 * xin * xin);
        }
    }

    #[test]
    fn type1_residual_scales_quadratically_in_frequency() {
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tracefree(n, &mut rng);
        let sup_at = |s: f64| -> f64 {
            let xi = [s * 0.8, s * 0.6, 0.0];
            let op = ModeOperator::new(n, &xi).unwrap();
            let sol = type1_solution(n, &xi, &a).unwrap();
            let res = sol.residual(&op, 1.0);
            res.iter().map(|v| v.norm()).fold(0.0f64, f64::max)
        };
        let ratio = sup_at(1e-2) / sup_at(1e-3);
        assert!((ratio - 100.0).abs() < 5.0, "quadratic scaling ratio {ratio}");
    }

    #[test]
    fn type1_rejects_traceful_coefficients() {
        let n = 3;
        let mut a = DMatrix::<f64>::identity(n, n);
        a[(0, 1)] = 0.3;
        a[(1, 0)] = 0.3;
        assert!(type1_solution(n, &[0.1, 0.0, 0.0], &a).is_err());
    }

    #[test]
    fn zero_frequency_families_are_exact() {
        let n = 3;
        let op = ModeOperator::new(n, &[0.0, 0.0, 0.0]).unwrap();
        // Trace pair with any (a, b) …
        let sol =
            type23_solution(n, &[0.0; 3], Complex64::new(0.7, 0.0), Complex64::new(-0.4, 0.0))
                .unwrap();
        for &t in &[0.0, 1.1, 3.7] {
            let res = sol.residual(&op, t);
            assert!(res.iter().all(|v| v.norm() < 1e-13));
        }
        // … the mixed family with its e^{-(n+1)t} block …
        let sol4 = type4_solution(n, &[0.2, -1.0, 0.5]).unwrap();
        for &t in &[0.0, 1.1, 3.7] {
            let res = sol4.residual(&op, t);
            assert!(res.iter().all(|v| v.norm() < 1e-13));
        }
        // … and a bare e^{-(n+1)t} unit profile in one mixed slot.
        let nc = op.nc;
        for &t in &[0.0, 0.9] {
            let e = (-(n as f64 + 1.0) * t).exp();
            let mut h = vec![Complex64::default(); nc];
            let mut dh = vec![Complex64::default(); nc];
            let mut ddh = vec![Complex64::default(); nc];
            h[comp_i0(n, 1)] = Complex64::new(e, 0.0);
            dh[comp_i0(n, 1)] = Complex64::new(-(n as f64 + 1.0) * e, 0.0);
            ddh[comp_i0(n, 1)] = Complex64::new((n as f64 + 1.0).powi(2) * e, 0.0);
            let res = op.apply_pointwise(t, &h, &dh, &ddh);
            assert!(res.iter().all(|v| v.norm() < 1e-12));
        }
    }

    #[test]
    fn type23_coupling_constant_matches_lambda() {
        // The induced mixed-block coefficient is K(b-a) ξ_j with K = i/λ.
        let n = 3;
        let xi = [0.25, 0.0, 0.0];
        let sol = type23_solution(n, &xi, Complex64::new(1.0, 0.0), Complex64::default()).unwrap();
        let lambda = lambda_exponent(n);
        let (h, _, _) = sol.eval(0.0);
        let expect = I / lambda * (-1.0) * xi[0];
        assert!((h[comp_i0(n, 0)] - expect).norm() < 1e-14);
    }

    #[test]
    fn trace_family_boundary_map_matches_the_brackets_and_has_rank_one() {
        let n = 3;
        let (bi_a, bi_b, b0_a, b0_b) = trace_family_boundary_coefficients(n);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..4 {
            let a = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            for &scale in &[1e-3, 5e-4] {
                let xi = [0.5 * scale, -0.8 * scale, 0.2 * scale];
                let op = ModeOperator::new(n, &xi).unwrap();
                let sol = type23_solution(n, &xi, a, b).unwrap();
                let bv = sol.bianchi(&op, 0.0);
                for i in 0..n {
                    let expect = (bi_a * a + bi_b * b) * xi[i];
                    assert!(
                        (bv[i] - expect).norm() < 20.0 * scale * scale,
                        "vector row defect {:e}",
                        (bv[i] - expect).norm()
                    );
                }
                let expect0 = b0_a * a + b0_b * b;
                assert!((bv[n] - expect0).norm() < 20.0 * scale * scale);
            }
        }
        // The two bracket rows are exactly proportional: with K = i/λ and
        // λ² = nλ + 2n, both reduce to multiples of n(λ-2)a + (2n-λ)b, so
        // the leading boundary map of the trace family alone is rank one.
        let det = bi_a * b0_b - bi_b * b0_a;
        assert!(det.norm() < 1e-14, "trace-family determinant {:e}", det.norm());
        // Its kernel direction produces second-order boundary values; the
        // unit targets those brackets cannot reach are instead realized by
        // the full decaying solver (see the boundary-target test).
        let a_k = Complex64::new(2.0 * n as f64 - lambda_exponent(n), 0.0);
        let b_k = Complex64::new(-(n as f64) * (lambda_exponent(n) - 2.0), 0.0);
        for &scale in &[1e-3, 5e-4] {
            let xi = [0.5 * scale, -0.8 * scale, 0.2 * scale];
            let op = ModeOperator::new(n, &xi).unwrap();
            let sol = type23_solution(n, &xi, a_k, b_k).unwrap();
            let bv = sol.bianchi(&op, 0.0);
            for r in 0..=n {
                assert!(bv[r].norm() < 40.0 * scale * scale, "kernel direction row {r}");
            }
        }
    }

    #[test]
    fn type4_decays_at_least_like_the_tracefree_rate() {
        let n = 3;
        let sol = type4_solution(n, &[1.0, 0.0, 0.0]).unwrap();
        let state = sol.sample_state(&uniform_grid(12.0, 64));
        let slope = state.decay_exponent(2.0, 8.0);
        assert!(slope <= -(n as f64), "decay exponent {slope}");
    }

    #[test]
    fn stacked_families_have_full_rank_at_small_frequency() {
        // Types I-IV sampled at a fixed small ξ span the full component
        // space: the matrix of boundary jets (H(0), H'(0)) over a basis of
        // the four families has rank (n+1)(n+2)/2.
        let n = 3;
        let nc = ncomp_collar(n);
        let xi = [0.05, 0.02, -0.04];
        let mut columns: Vec<Vec<Complex64>> = Vec::new();
        let mut push_sol = |sol: &ModeSolution| {
            let (h, dh, _) = sol.eval(0.0);
            let mut col = h;
            col.extend(dh);
            columns.push(col);
        };
        // Type I: an orthonormal trace-free basis.
        for row in trace_free_rows(n) {
            let mut a = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = row[pair_pack(n, i, j)];
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
            push_sol(&type1_solution(n, &xi, &a).unwrap());
        }
        // Types II/III: two independent trace pairs.
        push_sol(&type23_solution(n, &xi, Complex64::new(1.0, 0.0), Complex64::default()).unwrap());
        push_sol(&type23_solution(n, &xi, Complex64::default(), Complex64::new(1.0, 0.0)).unwrap());
        // Type IV: the n mixed directions.
        for j in 0..n {
            let mut b = vec![0.0; n];
            b[j] = 1.0;
            push_sol(&type4_solution(n, &b).unwrap());
        }
        assert_eq!(columns.len(), nc);
        let mut m = DMatrix::<Complex64>::zeros(2 * nc, nc);
        for (c, col) in columns.iter().enumerate() {
            for r in 0..2 * nc {
                m[(r, c)] = col[r];
            }
        }
        let svd = m.svd(false, false);
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        assert!(smin > 1e-8 * smax, "family matrix nearly rank-deficient: {smin:e}");
    }

    #[test]
    fn bvp_solver_meets_boundary_targets_machine_exactly() {
        let n = 3;
        let xi = [0.9, -0.4, 0.3];
        let grid = uniform_grid(12.0, 64);
        let basis = decaying_kernel_basis(n, &xi, &grid).unwrap();
        let target = vec![
            Complex64::new(0.3, -0.2),
            Complex64::new(-1.1, 0.0),
            Complex64::new(0.0, 0.7),
            Complex64::new(0.5, 0.1),
        ];
        let c = basis.boundary_coefficients(&target).unwrap();
        let state = basis.combine(&c);
        let b = basis.bvp.bianchi_at_zero(&state);
        for a in 0..=n {
            assert!((b[a] - target[a]).norm() < 1e-10, "boundary defect at row {a}");
        }
        // Residual of the combination stays at the solver floor.
        let res = basis.bvp.residual_sup(&state, None);
        assert!(res < 1e-10);
        // Minimum-norm selection: the weighted coefficient vector is
        // orthogonal to the kernel of the boundary matrix (projected
        // random directions).
        let nc = basis.bvp.sys.op.nc;
        let pinv = basis.b_matrix.clone().svd(true, true).pseudo_inverse(1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let z = DVector::<Complex64>::from_fn(nc, |_, _| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let zk = &z - &pinv * (&basis.b_matrix * &z);
            let mut dot = Complex64::default();
            for m in 0..nc {
                let w = a_from_h_factor(n, m);
                dot += Complex64::new(w * w, 0.0) * c[m] * zk[m].conj();
            }
            assert!(dot.norm() < 1e-9 * zk.norm(), "coefficients are not minimum-norm");
        }
    }

    #[test]
    fn bvp_refuses_zero_frequency() {
        let grid = uniform_grid(12.0, 64);
        let target = vec![Complex64::default(); 4];
        assert!(decaying_bvp_solve(3, &[0.0, 0.0, 0.0], &target, &grid).is_err());
    }

    #[test]
    fn closure_window_is_converged() {
        // Lengthening the window changes the profile well below the
        // collocation tolerance.
        let n = 3;
        let xi = [0.6, 0.2, -0.5];
        let dt = 12.0 / 64.0;
        let grid_a = uniform_grid(12.0, 64);
        let grid_b: Vec<f64> = (0..=75).map(|i| dt * i as f64).collect();
        let target = vec![
            Complex64::new(1.0, 0.0),
            Complex64::default(),
            Complex64::default(),
            Complex64::new(0.5, 0.0),
        ];
        let sa = decaying_bvp_solve(n, &xi, &target, &grid_a).unwrap();
        let sb = decaying_bvp_solve(n, &xi, &target, &grid_b).unwrap();
        let mut diff: f64 = 0.0;
        for j in 0..sa.nodes.len() {
            for c in 0..sa.nc {
                diff = diff.max((sa.value(j, c) - sb.value(j, c)).norm());
            }
        }
        assert!(diff < 1e-9, "window truncation error {diff:e}");
    }

    #[test]
    fn small_frequency_solutions_stay_inside_the_envelope() {
        // ‖H(0)‖ obeys the |ξ|^{-2} envelope with a structure factor
        // vanishing at ξ = 0: along a ray, |ξ|²‖H(0)‖ is bounded and
        // shrinks as ξ → 0 (it behaves like |ξ| times a smooth factor).
        let n = 3;
        let grid = uniform_grid(12.0, 64);
        let mut target = vec![Complex64::default(); n + 1];
        target[0] = Complex64::new(1.0, 0.0);
        let weighted: Vec<f64> = [4e-2, 2e-2, 1e-2, 5e-3]
            .iter()
            .map(|&s| {
                let xi = [s, 0.0, 0.0];
                let state = decaying_bvp_solve(n, &xi, &target, &grid).unwrap();
                let at_zero =
                    (0..state.nc).map(|c| state.value(1, c).norm()).fold(0.0f64, f64::max);
                s * s * at_zero
            })
            .collect();
        for w in weighted.windows(2) {
            let ratio = w[1] / w[0];
            assert!(
                ratio > 0.0 && ratio < 0.8,
                "halving |ξ| should shrink |ξ|²·‖H(0)‖, got ratio {ratio}"
            );
        }
    }

    #[test]
    fn large_frequency_solutions_obey_the_decay_bound() {
        let n = 3;
        let grid = uniform_grid(12.0, 64);
        let mut target = vec![Complex64::default(); n + 1];
        target[1] = Complex64::new(1.0, 0.0);
        // sup_t |ξ| e^{(n-1)t} |H| stays comparable as |ξ| grows …
        let vals: Vec<f64> = [20.0, 40.0]
            .iter()
            .map(|&s| {
                let xi = [0.0, s, 0.0];
                let state = decaying_bvp_solve(n, &xi, &target, &grid).unwrap();
                s * state.sup_weighted(n as f64 - 1.0)
            })
            .collect();
        let ratio = vals[1] / vals[0];
        assert!(ratio > 0.3 && ratio < 3.0, "weighted amplitudes {vals:?} drift");
        // … and past the boundary layer the profile decays at least like
        // e^{-(n-1)t}.
        let xi = [0.0, 10.0, 0.0];
        let state = decaying_bvp_solve(n, &xi, &target, &grid).unwrap();
        let t_lo = xi[1].ln() + 1.0;
        let slope = state.decay_exponent(t_lo, t_lo + 4.0);
        assert!(slope <= -(n as f64 - 1.0) + 0.1, "post-layer decay exponent {slope}");
    }

    #[test]
    fn kernel_dimension_matches_the_channel_count() {
        // The strictly decaying solution space has one direction per
        // packed component: the collocation-plus-closure system (without
        // boundary rows) has nullity (n+1)(n+2)/2, checked by dense SVD.
        let n = 3;
        let nc = ncomp_collar(n);
        let grid = uniform_grid(12.0, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..20 {
            let xi: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let xin = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if xin < 1e-3 {
                continue;
            }
            let refined = refine_for_xi(&grid, xin, 0.9);
            let sys = assemble_mode_operator(n, &xi, &refined).unwrap();
            let nn = sys.nodes.len();
            let rows = (nn - 1) * nc;
            let half = 5 * nc;
            let mut banded = BandedMatrix::zeros(nn * nc, half, half);
            for j in 1..nn - 1 {
                add_collocation_rows(&mut banded, &sys, j, j);
            }
            let closure = pencil_closure(n, &xi, sys.nodes[nn - 1], true).unwrap();
            let dt_end = sys.nodes[nn - 1] - sys.nodes[nn - 2];
            for (k, row) in closure.iter().enumerate() {
                let r = (nn - 1) * nc + k;
                let ratio = (row.mu * dt_end).exp();
                for c in 0..nc {
                    banded.add(r, (nn - 1) * nc + c, row.w[c]);
                    banded.add(r, (nn - 2) * nc + c, -ratio * row.w[c]);
                }
            }
            let full = banded.to_dense();
            let mut dense = DMatrix::<Complex64>::zeros(rows, nn * nc);
            for r in 0..rows {
                for c in 0..nn * nc {
                    dense[(r, c)] = full[(r + nc, c)];
                }
            }
            let svd = dense.svd(false, false);
            let smax = svd.singular_values.max();
            let nullity = svd.singular_values.iter().filter(|&&s| s < 1e-7 * smax).count()
                + (nn * nc - rows.min(nn * nc));
            assert_eq!(nullity, nc, "wrong kernel dimension in case {case} at ξ = {xi:?}");
        }
    }

    #[test]
    fn frequency_translation_is_an_index_shift() {
        // A decaying solution at frequency e^T ξ, sampled at t + T, is a
        // decaying solution at frequency ξ. Discretely: the solve at the
        // larger frequency, shifted left by k grid nodes, matches the
        // solve at the smaller frequency pinned to the shifted values.
        // The grid is fine enough that the one difference window that
        // changes role at the seam sits below the comparison tolerance.
        let n = 3;
        let nt = 256;
        let t_max = 12.0;
        let dt = t_max / nt as f64;
        let grid = uniform_grid(t_max, nt);
        let xi_big = [1.2, 0.0, -0.3];
        let bvp_big = ModeBvp::new(n, &xi_big, &grid).unwrap();
        let nc = bvp_big.sys.op.nc;
        // An arbitrary decaying solution with nontrivial boundary values.
        let values: Vec<Complex64> = (0..nc)
            .map(|c| Complex64::new(0.3 + 0.1 * c as f64, 0.05 * c as f64 - 0.2))
            .collect();
        let big = bvp_big.solve(&values, None);
        let shift = 40usize;
        let t_shift = shift as f64 * dt;
        let scale = (-t_shift).exp();
        let xi_small: Vec<f64> = xi_big.iter().map(|v| v * scale).collect();
        // Extended node j of the small grid sits at extended node
        // j + shift of the big grid (ghost included).
        let shifted = &big.h[shift * nc..];
        let grid_small: Vec<f64> = (0..=(nt - shift)).map(|i| dt * i as f64).collect();
        let bvp_small = ModeBvp::new(n, &xi_small, &grid_small).unwrap();
        let small = bvp_small.solve(&shifted[nc..2 * nc], None);
        assert_eq!(small.h.len(), shifted.len());
        let mut sup: f64 = 0.0;
        for (a, b) in small.h.iter().zip(shifted.iter()) {
            sup = sup.max((a - b).norm());
        }
        assert!(sup < 1e-6, "translated profiles differ by {sup:e}");
    }

    #[test]
    fn boundary_matrix_stays_nonsingular_along_the_grid() {
        let n = 3;
        let grid = uniform_grid(12.0, 48);
        let profile = boundary_independence_profile(n, &[0.7, -0.2, 0.4], &grid).unwrap();
        assert_eq!(profile.len(), grid.len());
        for s in &profile {
            assert!(s.sigma_min_raw > 0.0, "raw σ_min vanished at t = {}", s.t);
            assert!(s.sigma_min_scaled > 1e-4, "scaled σ_min too small at t = {}", s.t);
        }
        // At t = 0 the matrix is the identity by construction.
        assert!((profile[0].sigma_min_raw - 1.0).abs() < 1e-9);
    }

    #[test]
    fn r_matrix_has_a_right_inverse_and_rotates_correctly() {
        let n = 3;
        let xi = {
            let v = [0.48, -0.6, 0.64];
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            [v[0] / norm, v[1] / norm, v[2] / norm]
        };
        let bm = r_matrix(n, &xi).unwrap();
        let id = &bm.r * &bm.right_inverse;
        for i in 0..=n {
            for j in 0..=n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-10);
            }
        }
        // Equivariance: R(Oξ) ρ(O) = V(O) R(ξ) with ρ the packed rotation
        // action on jets and V = diag(O, 1) on the target rows.
        let o = rotation_matrix(n, &[0.0, 0.0, 1.0], 0.4);
        let oxi: Vec<f64> = (0..n).map(|i| (0..n).map(|j| o[(i, j)] * xi[j]).sum()).collect();
        let r_rot = r_matrix(n, &oxi).unwrap().r;
        let rho = rotation_rep_sym(n, &o);
        let nc = ncomp_collar(n);
        let mut rho_c = DMatrix::<Complex64>::zeros(nc, nc);
        for a in 0..nc {
            for b in 0..nc {
                rho_c[(a, b)] = Complex64::new(rho[(a, b)], 0.0);
            }
        }
        let lhs = &r_rot * &rho_c;
        let mut v = DMatrix::<Complex64>::zeros(n + 1, n + 1);
        for a in 0..n {
            for b in 0..n {
                v[(a, b)] = Complex64::new(o[(a, b)], 0.0);
            }
        }
        v[(n, n)] = Complex64::new(1.0, 0.0);
        let rhs = &v * &bm.r;
        assert!((lhs - rhs).norm() < 1e-12);
        // The first coordinate direction: explicit assembly with full
        // row rank n+1.
        let be1 = r_matrix(n, &[1.0, 0.0, 0.0]).unwrap();
        let sv = be1.r.clone().svd(false, false).singular_values;
        assert_eq!(sv.len(), n + 1);
        assert!(sv.min() > 1e-10 * sv.max());
        // A frequency off the unit sphere is rejected.
        assert!(r_matrix(n, &[1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn unit_boundary_targets_are_realized_by_the_full_solver() {
        // The closed-form trace-family brackets alone cannot reach all
        // unit targets (their leading map is rank one); the decaying
        // solver, which also carries the mixed channel, reaches every e_a.
        let n = 3;
        let grid = uniform_grid(12.0, 64);
        let xi = [0.12, -0.07, 0.05];
        let basis = decaying_kernel_basis(n, &xi, &grid).unwrap();
        for a in 0..=n {
            let mut target = vec![Complex64::default(); n + 1];
            target[a] = Complex64::new(1.0, 0.0);
            let c = basis.boundary_coefficients(&target).unwrap();
            let state = basis.combine(&c);
            let b = basis.bvp.bianchi_at_zero(&state);
            for r in 0..=n {
                let expect = if r == a { 1.0 } else { 0.0 };
                assert!(
                    (b[r] - Complex64::new(expect, 0.0)).norm() < 1e-10,
                    "target e_{a}, row {r}"
                );
            }
        }
    }
}
