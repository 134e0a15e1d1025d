//! Curvature and linearized Einstein operators on the collar.
//!
//! The central objects are warped collar metrics `g = dt^2 + e^{2t}
//! eps^{-2} g_M` and their corrections and perturbations.  A tensor on the
//! collar is represented as a sum of *structured terms* `e^{m t} c(x)`
//! (whose t-derivatives are exact) plus an optional *sampled* part on the
//! grid (differentiated by fourth-order finite differences in `t` and
//! spectrally in `x`).  Every operator here evaluates a full second-order
//! jet of its inputs at each node and then assembles curvature pointwise,
//! so the only discretization error comes from differentiating sampled
//! parts; backgrounds built purely from structured terms are evaluated to
//! machine precision.
//!
//! Index conventions match the rest of the crate: spatial axes are
//! `0..n-1`, the collar direction `t` is axis `n`, and symmetric tensors
//! are packed by [`collar_pack`].  The curvature convention is
//! `R^a_{bcd} = d_c Gamma^a_{db} - d_d Gamma^a_{cb} + Gamma^a_{ce}
//! Gamma^e_{db} - Gamma^a_{de} Gamma^e_{cb}` with `Ric_{bd} = R^a_{bad}`,
//! so hyperbolic space has `Ric = -n g`.
//!
//! The Bianchi operator used throughout is
//! `beta(h)_a = g^{bc} grad_b h_{ac} - (1/2) grad_a (g^{bc} h_{bc})`,
//! and the gauge-fixed nonlinear map is
//! `N(r, h) = Ric(g+r+h) + n (g+r+h) - delta*_{g+r+h} beta_{gauge}(h)`,
//! whose linearization in `h` at zero is elliptic.

use crate::error::{Error, Result};
use crate::fiber::FiberMetric;
use crate::field::{CollarField, FiberField};
use crate::grid::{CollarGrid, FdStencils, SpectralEngine};
use crate::pack::{collar_pack, collar_pairs, comp_00, ncomp_collar, ncomp_sym, pair_pack};
use num_complex::Complex64;

/// Hard cap on the fiber dimension supported by the stack-allocated
/// pointwise kernels (`n <= MAX_FIBER_DIM`).
pub const MAX_FIBER_DIM: usize = 6;
const MAXD: usize = MAX_FIBER_DIM + 1;
const MAXC: usize = (MAX_FIBER_DIM + 1) * (MAX_FIBER_DIM + 2) / 2;

fn check_dim(n: usize) -> Result<()> {
    if n > MAX_FIBER_DIM {
        return Err(Error::InvalidArgument(format!(
            "fiber dimension n={n} exceeds the kernel limit {MAX_FIBER_DIM}"
        )));
    }
    Ok(())
}

/// One structured term `e^{rate * t} * coeff(x)` of a collar tensor.
#[derive(Clone)]
pub struct WarpTerm {
    /// Exponential rate in `t`.
    pub rate: f64,
    /// Spatial coefficient, one block per packed component.
    pub coeff: FiberField,
}

/// A tensor on the collar: structured terms plus an optional sampled part.
///
/// The component count is fixed by the tensor kind (`ncomp_collar(n)` for
/// symmetric 2-tensors, `n + 1` for one-forms, 1 for scalars).
#[derive(Clone, Default)]
pub struct CollarTensor {
    pub terms: Vec<WarpTerm>,
    pub sampled: Option<CollarField>,
}

impl CollarTensor {
    /// The zero tensor (no terms, no sampled part).
    pub fn zero() -> CollarTensor {
        CollarTensor { terms: Vec::new(), sampled: None }
    }

    /// Wraps a sampled field.
    pub fn from_field(f: CollarField) -> CollarTensor {
        CollarTensor { terms: Vec::new(), sampled: Some(f) }
    }

    /// Wraps structured terms.
    pub fn from_terms(terms: Vec<WarpTerm>) -> CollarTensor {
        CollarTensor { terms, sampled: None }
    }

    /// Component count, if the tensor has any content.
    pub fn ncomp(&self) -> Option<usize> {
        self.terms
            .first()
            .map(|t| t.coeff.ncomp)
            .or_else(|| self.sampled.as_ref().map(|s| s.ncomp))
    }

    /// Checks that all parts live on `grid` and carry `ncomp` components.
    pub fn validate(&self, grid: &CollarGrid, ncomp: usize) -> Result<()> {
        for term in &self.terms {
            if term.coeff.ncomp != ncomp {
                return Err(Error::InvalidArgument(format!(
                    "structured term has {} components, expected {ncomp}",
                    term.coeff.ncomp
                )));
            }
            if term.coeff.grid != *grid {
                return Err(Error::GridMismatch(
                    "structured term coefficient lives on a different grid".into(),
                ));
            }
        }
        if let Some(s) = &self.sampled {
            if s.ncomp != ncomp {
                return Err(Error::InvalidArgument(format!(
                    "sampled part has {} components, expected {ncomp}",
                    s.ncomp
                )));
            }
            if s.grid != *grid {
                return Err(Error::GridMismatch("sampled part lives on a different grid".into()));
            }
        }
        Ok(())
    }

    /// `self + scale * other` (terms concatenated, sampled parts added).
    pub fn plus(&self, other: &CollarTensor, scale: f64) -> CollarTensor {
        let mut terms = self.terms.clone();
        for t in &other.terms {
            let mut c = t.coeff.clone();
            c.scale(scale);
            terms.push(WarpTerm { rate: t.rate, coeff: c });
        }
        let sampled = match (&self.sampled, &other.sampled) {
            (Some(a), Some(b)) => {
                let mut s = a.clone();
                s.axpy(scale, b);
                Some(s)
            }
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => {
                let mut s = b.clone();
                s.scale(scale);
                Some(s)
            }
            (None, None) => None,
        };
        CollarTensor { terms, sampled }
    }

    /// Materializes every node value (ghost slice included).
    pub fn to_field(&self, grid: &CollarGrid, ncomp: usize) -> CollarField {
        let mut out = match &self.sampled {
            Some(s) => s.clone(),
            None => CollarField::zeros(grid, ncomp),
        };
        let nx = grid.spatial_len();
        for term in &self.terms {
            for c in 0..ncomp {
                for jt in 0..out.nslices() {
                    let t = out.slice_t(jt);
                    let f = (term.rate * t).exp();
                    let coeff = term.coeff.comp(c);
                    let sl = out.slice_mut(c, jt);
                    for ix in 0..nx {
                        sl[ix] += f * coeff[ix];
                    }
                }
            }
        }
        out
    }
}

/// A Riemannian metric on the collar, stored as a [`CollarTensor`].
#[derive(Clone)]
pub struct CollarMetric {
    pub grid: CollarGrid,
    pub tensor: CollarTensor,
}

impl CollarMetric {
    /// Validates component counts and grids.
    pub fn new(grid: &CollarGrid, tensor: CollarTensor) -> Result<CollarMetric> {
        check_dim(grid.n)?;
        tensor.validate(grid, ncomp_collar(grid.n))?;
        Ok(CollarMetric { grid: grid.clone(), tensor })
    }

    /// The metric `self + scale * t` (for evaluating perturbed metrics).
    pub fn with_added(&self, t: &CollarTensor, scale: f64) -> Result<CollarMetric> {
        t.validate(&self.grid, ncomp_collar(self.grid.n))?;
        CollarMetric::new(&self.grid, self.tensor.plus(t, scale))
    }

    /// Materialized component values.
    pub fn to_field(&self) -> CollarField {
        self.tensor.to_field(&self.grid, ncomp_collar(self.grid.n))
    }
}

/// Christoffel symbols of a collar metric.  Component `a * ncomp + pack(b,c)`
/// of the underlying field stores `Gamma^a_{bc}`.
pub struct ChristoffelField {
    pub grid: CollarGrid,
    pub data: CollarField,
}

impl ChristoffelField {
    /// `Gamma^a_{bc}` at physical node `(it, ix)`.
    pub fn at(&self, a: usize, b: usize, c: usize, it: usize, ix: usize) -> f64 {
        let n = self.grid.n;
        self.data.at(a * ncomp_collar(n) + collar_pack(n, b, c), it, ix)
    }
}

/// Parameters of the weighted collar norm: `sup e^{delta t}` of the
/// warp-frame magnitudes of the field and its derivatives up to order `k`,
/// plus (for `k = 2`) a sampled Hölder quotient of the top derivatives at
/// separations below one in the warped geometry.
#[derive(Debug, Clone, Copy)]
pub struct WeightedNormSpec {
    /// Exponential weight, in `(0, n)`.
    pub delta: f64,
    /// Number of derivatives measured, at most 2.
    pub k: usize,
    /// Hölder exponent in `(0, 1)` (used when `k = 2`).
    pub alpha: f64,
}

impl Default for WeightedNormSpec {
    fn default() -> Self {
        WeightedNormSpec { delta: 1.0, k: 2, alpha: 0.5 }
    }
}

/// Builds the warped collar metric `dt^2 + e^{2t} eps^{-2} g_M` on the
/// fiber metric's grid with the anisotropy `eps` (the returned metric's
/// grid carries this `eps`).
pub fn build_warped_metric(gm: &FiberMetric, eps: f64) -> Result<CollarMetric> {
    let g0 = &gm.grid;
    let grid = CollarGrid::new(
        g0.n,
        eps,
        g0.t_max,
        g0.nt,
        g0.spatial_shape.clone(),
        g0.spatial_period.clone(),
    )?;
    let n = grid.n;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();

    let mut c0 = FiberField::zeros(&grid, nc);
    for v in c0.comp_mut(comp_00(n)) {
        *v = 1.0;
    }
    let mut c2 = FiberField::zeros(&grid, nc);
    let s = eps.powi(-2);
    for i in 0..n {
        for j in i..n {
            let src = gm.comps.comp(pair_pack(n, i, j));
            let dst = c2.comp_mut(pair_pack(n, i, j));
            for ix in 0..nx {
                dst[ix] = s * src[ix];
            }
        }
    }
    CollarMetric::new(
        &grid,
        CollarTensor::from_terms(vec![
            WarpTerm { rate: 0.0, coeff: c0 },
            WarpTerm { rate: 2.0, coeff: c2 },
        ]),
    )
}

/// Closed-form Christoffel symbols of the *unperturbed* warped metric:
/// `Gamma^m_{jk} = Gamma_M`, `Gamma^t_{jk} = -e^{2t} eps^{-2} g_{M,jk}`,
/// `Gamma^i_{tk} = delta^i_k`.  Serves as the independent reference for
/// the generic differentiation path.
pub fn christoffel_closed(gm: &FiberMetric, eps: f64) -> Result<ChristoffelField> {
    let metric = build_warped_metric(gm, eps)?;
    let grid = metric.grid.clone();
    let n = grid.n;
    let nc = ncomp_collar(n);
    let ns = ncomp_sym(n);
    let nx = grid.spatial_len();
    let mut data = CollarField::zeros(&grid, (n + 1) * nc);
    let s = eps.powi(-2);
    for it in 0..grid.nt {
        let t = grid.t(it);
        let e2t = (2.0 * t).exp();
        // Gamma^m_{jk} = Gamma_M^m_{jk}
        for m in 0..n {
            for j in 0..n {
                for k in j..n {
                    let src = gm.gamma.comp(m * ns + pair_pack(n, j, k));
                    let c = m * nc + pair_pack(n, j, k);
                    let dst = data.slice_mut(c, it + 1);
                    dst.copy_from_slice(src);
                }
            }
        }
        // Gamma^t_{jk} = -e^{2t} eps^{-2} g_{M,jk}
        for j in 0..n {
            for k in j..n {
                let src = gm.comps.comp(pair_pack(n, j, k));
                let c = n * nc + pair_pack(n, j, k);
                let dst = data.slice_mut(c, it + 1);
                for ix in 0..nx {
                    dst[ix] = -e2t * s * src[ix];
                }
            }
        }
        // Gamma^i_{tk} = delta^i_k
        for i in 0..n {
            let c = i * nc + collar_pack(n, i, n);
            let dst = data.slice_mut(c, it + 1);
            for v in dst {
                *v = 1.0;
            }
        }
    }
    Ok(ChristoffelField { grid, data })
}

// ---------------------------------------------------------------------------
// Jet evaluation
// ---------------------------------------------------------------------------

/// Pointwise jets of one t-slice: values `v`, first derivatives `d[axis]`
/// (axes `0..n-1` spatial, axis `n` is `t`) and second derivatives
/// `dd[collar_pack(axis, axis)]`.
struct SliceJets {
    nc: usize,
    nx: usize,
    ndim: usize,
    v: Vec<f64>,
    d: Vec<f64>,
    dd: Vec<f64>,
}

impl SliceJets {
    #[inline]
    fn v(&self, c: usize, ix: usize) -> f64 {
        self.v[c * self.nx + ix]
    }
    #[inline]
    fn d(&self, axis: usize, c: usize, ix: usize) -> f64 {
        self.d[(axis * self.nc + c) * self.nx + ix]
    }
    #[inline]
    fn dd(&self, pair: usize, c: usize, ix: usize) -> f64 {
        self.dd[(pair * self.nc + c) * self.nx + ix]
    }
}

struct TermCache {
    rate: f64,
    v: FiberField,
    d: Vec<FiberField>,
    dd: Vec<FiberField>,
}

struct SampCache {
    /// Physical slice values, `[it] -> [comp][x]`.
    values: Vec<Vec<f64>>,
    /// Forward spatial modes, `[it * nc + c]`.
    modes: Vec<Vec<Complex64>>,
    /// Spectral first spatial derivatives, `[axis][it] -> [comp][x]`.
    dx: Vec<Vec<Vec<f64>>>,
}

/// Differentiation plan for one collar tensor: structured terms carry
/// analytic `t`-derivatives and cached spectral derivatives of their
/// coefficients; the sampled part is differentiated by finite differences
/// over the physical t-nodes and spectrally in `x`.
struct TensorJets {
    grid: CollarGrid,
    ncomp: usize,
    order: usize,
    engine: SpectralEngine,
    stencils: FdStencils,
    terms: Vec<TermCache>,
    samp: Option<SampCache>,
}

impl TensorJets {
    fn new(grid: &CollarGrid, tensor: &CollarTensor, ncomp: usize, order: usize) -> Result<TensorJets> {
        tensor.validate(grid, ncomp)?;
        let n = grid.n;
        let nx = grid.spatial_len();
        let engine = SpectralEngine::new(&grid.spatial_shape, &grid.spatial_period);
        let stencils = FdStencils::new(&grid.t_nodes());

        let mut terms = Vec::with_capacity(tensor.terms.len());
        for term in &tensor.terms {
            let mut d = Vec::with_capacity(n);
            for axis in 0..n {
                let mut f = FiberField::zeros(grid, ncomp);
                for c in 0..ncomp {
                    f.comp_mut(c).copy_from_slice(&engine.deriv(term.coeff.comp(c), axis, 1));
                }
                d.push(f);
            }
            let mut dd = Vec::new();
            if order >= 2 {
                for a in 0..n {
                    for b in a..n {
                        let mut f = FiberField::zeros(grid, ncomp);
                        for c in 0..ncomp {
                            let v = if a == b {
                                engine.deriv(term.coeff.comp(c), a, 2)
                            } else {
                                engine.deriv(&engine.deriv(term.coeff.comp(c), a, 1), b, 1)
                            };
                            f.comp_mut(c).copy_from_slice(&v);
                        }
                        dd.push(f);
                    }
                }
            }
            terms.push(TermCache { rate: term.rate, v: term.coeff.clone(), d, dd });
        }

        let samp = match &tensor.sampled {
            None => None,
            Some(field) => {
                let nt = grid.nt;
                let mut values = Vec::with_capacity(nt);
                let mut modes = Vec::with_capacity(nt * ncomp);
                for it in 0..nt {
                    let mut sl = vec![0.0; ncomp * nx];
                    for c in 0..ncomp {
                        sl[c * nx..(c + 1) * nx].copy_from_slice(field.slice(c, it + 1));
                        modes.push(engine.to_modes(field.slice(c, it + 1)));
                    }
                    values.push(sl);
                }
                let mut dx = Vec::with_capacity(n);
                for axis in 0..n {
                    let mut per_axis = Vec::with_capacity(nt);
                    for it in 0..nt {
                        let mut sl = vec![0.0; ncomp * nx];
                        for c in 0..ncomp {
                            let mut m = modes[it * ncomp + c].clone();
                            engine.apply_deriv_factor(&mut m, axis, 1);
                            sl[c * nx..(c + 1) * nx].copy_from_slice(&engine.from_modes(&m));
                        }
                        per_axis.push(sl);
                    }
                    dx.push(per_axis);
                }
                Some(SampCache { values, modes, dx })
            }
        };

        Ok(TensorJets {
            grid: grid.clone(),
            ncomp,
            order,
            engine,
            stencils,
            terms,
            samp,
        })
    }

    /// Evaluates the jets on physical slice `it`.
    fn slice(&self, it: usize) -> SliceJets {
        let n = self.grid.n;
        let ndim = n + 1;
        let nc = self.ncomp;
        let nx = self.grid.spatial_len();
        let npair = ndim * (ndim + 1) / 2;
        let t = self.grid.t(it);
        let mut js = SliceJets {
            nc,
            nx,
            ndim,
            v: vec![0.0; nc * nx],
            d: vec![0.0; ndim * nc * nx],
            dd: if self.order >= 2 { vec![0.0; npair * nc * nx] } else { Vec::new() },
        };

        // Structured terms: analytic in t, cached spectral in x.
        for term in &self.terms {
            let f = (term.rate * t).exp();
            let rf = term.rate * f;
            let rrf = term.rate * term.rate * f;
            for c in 0..nc {
                let coeff = term.v.comp(c);
                for ix in 0..nx {
                    js.v[c * nx + ix] += f * coeff[ix];
                    js.d[(n * nc + c) * nx + ix] += rf * coeff[ix];
                }
                for axis in 0..n {
                    let dc = term.d[axis].comp(c);
                    let base = (axis * nc + c) * nx;
                    for ix in 0..nx {
                        js.d[base + ix] += f * dc[ix];
                    }
                }
                if self.order >= 2 {
                    let ptt = collar_pack(n, n, n);
                    for ix in 0..nx {
                        js.dd[(ptt * nc + c) * nx + ix] += rrf * coeff[ix];
                    }
                    for axis in 0..n {
                        let dc = term.d[axis].comp(c);
                        let p = collar_pack(n, axis, n);
                        let base = (p * nc + c) * nx;
                        for ix in 0..nx {
                            js.dd[base + ix] += rf * dc[ix];
                        }
                    }
                    let mut k = 0;
                    for a in 0..n {
                        for b in a..n {
                            let ddc = term.dd[k].comp(c);
                            let p = collar_pack(n, a, b);
                            let base = (p * nc + c) * nx;
                            for ix in 0..nx {
                                js.dd[base + ix] += f * ddc[ix];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }

        // Sampled part: finite differences in t, spectral in x.
        if let Some(samp) = &self.samp {
            let (start1, w1) = self.stencils.row(it, 1);
            for (k, &w) in w1.iter().enumerate() {
                let sl = &samp.values[start1 + k];
                for i in 0..nc * nx {
                    js.d[n * nc * nx + i] += w * sl[i];
                }
            }
            let sl0 = &samp.values[it];
            for c in 0..nc {
                for ix in 0..nx {
                    js.v[c * nx + ix] += sl0[c * nx + ix];
                }
            }
            for axis in 0..n {
                let da = &samp.dx[axis][it];
                let base = axis * nc * nx;
                for i in 0..nc * nx {
                    js.d[base + i] += da[i];
                }
            }
            if self.order >= 2 {
                let ptt = collar_pack(n, n, n);
                let (start2, w2) = self.stencils.row(it, 2);
                for (k, &w) in w2.iter().enumerate() {
                    let sl = &samp.values[start2 + k];
                    let base = ptt * nc * nx;
                    for i in 0..nc * nx {
                        js.dd[base + i] += w * sl[i];
                    }
                }
                for axis in 0..n {
                    let p = collar_pack(n, axis, n);
                    let base = p * nc * nx;
                    for (k, &w) in w1.iter().enumerate() {
                        let sl = &samp.dx[axis][start1 + k];
                        for i in 0..nc * nx {
                            js.dd[base + i] += w * sl[i];
                        }
                    }
                }
                for a in 0..n {
                    for b in a..n {
                        let p = collar_pack(n, a, b);
                        for c in 0..nc {
                            let mut m = samp.modes[it * nc + c].clone();
                            if a == b {
                                self.engine.apply_deriv_factor(&mut m, a, 2);
                            } else {
                                self.engine.apply_deriv_factor(&mut m, a, 1);
                                self.engine.apply_deriv_factor(&mut m, b, 1);
                            }
                            let re = self.engine.from_modes(&m);
                            let base = (p * nc + c) * nx;
                            for ix in 0..nx {
                                js.dd[base + ix] += re[ix];
                            }
                        }
                    }
                }
            }
        }

        js
    }
}

// ---------------------------------------------------------------------------
// Pointwise kernels
// ---------------------------------------------------------------------------

/// Per-node geometric data of one metric: packed inverse, its first and
/// second derivatives, Christoffel symbols and their first derivatives,
/// and the Ricci tensor.  Second-stage entries are only valid after
/// `build` ran with `want_second`.
struct Geo {
    nd: usize,
    qi: [f64; MAXC],
    dqi: [[f64; MAXC]; MAXD],
    ga: [[f64; MAXC]; MAXD],
    dga: [[[f64; MAXC]; MAXD]; MAXD],
    ddqi: [[f64; MAXC]; MAXC],
    ric: [f64; MAXC],
    pk: [[usize; MAXD]; MAXD],
}

impl Geo {
    fn new(n: usize) -> Geo {
        let mut pk = [[0usize; MAXD]; MAXD];
        for a in 0..=n {
            for b in 0..=n {
                pk[a][b] = collar_pack(n, a, b);
            }
        }
        Geo {
            nd: n + 1,
            qi: [0.0; MAXC],
            dqi: [[0.0; MAXC]; MAXD],
            ga: [[0.0; MAXC]; MAXD],
            dga: [[[0.0; MAXC]; MAXD]; MAXD],
            ddqi: [[0.0; MAXC]; MAXC],
            ric: [0.0; MAXC],
            pk,
        }
    }

    /// Builds the node geometry from metric jets.  Returns the failing
    /// Cholesky pivot if the metric is not positive definite here.
    fn build(
        &mut self,
        q: &[f64; MAXC],
        dq: &[[f64; MAXC]; MAXD],
        ddq: &[[f64; MAXC]; MAXC],
        want_second: bool,
    ) -> std::result::Result<(), f64> {
        let nd = self.nd;
        let pk = self.pk;

        // Cholesky factorization of the packed metric.
        let mut l = [[0.0f64; MAXD]; MAXD];
        for a in 0..nd {
            for b in 0..=a {
                let mut s = q[pk[a][b]];
                for k in 0..b {
                    s -= l[a][k] * l[b][k];
                }
                if a == b {
                    if s <= 0.0 {
                        return Err(s);
                    }
                    l[a][a] = s.sqrt();
                } else {
                    l[a][b] = s / l[b][b];
                }
            }
        }
        // Invert L in place (lower triangular), then qi = L^{-T} L^{-1}.
        let mut li = [[0.0f64; MAXD]; MAXD];
        for a in 0..nd {
            li[a][a] = 1.0 / l[a][a];
            for b in 0..a {
                let mut s = 0.0;
                for k in b..a {
                    s -= l[a][k] * li[k][b];
                }
                li[a][b] = s / l[a][a];
            }
        }
        for a in 0..nd {
            for b in a..nd {
                let mut s = 0.0;
                for k in b..nd {
                    s += li[k][a] * li[k][b];
                }
                self.qi[pk[a][b]] = s;
            }
        }

        // Christoffel symbols.
        for a in 0..nd {
            for b in 0..nd {
                for c in b..nd {
                    let mut s = 0.0;
                    for e in 0..nd {
                        s += self.qi[pk[a][e]]
                            * (dq[b][pk[e][c]] + dq[c][pk[e][b]] - dq[e][pk[b][c]]);
                    }
                    self.ga[a][pk[b][c]] = 0.5 * s;
                }
            }
        }

        // d qi = -qi dq qi.
        for d in 0..nd {
            for a in 0..nd {
                for e in a..nd {
                    let mut s = 0.0;
                    for f in 0..nd {
                        let mut inner = 0.0;
                        for h in 0..nd {
                            inner += dq[d][pk[f][h]] * self.qi[pk[h][e]];
                        }
                        s += self.qi[pk[a][f]] * inner;
                    }
                    self.dqi[d][pk[a][e]] = -s;
                }
            }
        }

        if !want_second {
            return Ok(());
        }

        // d Gamma.
        for d in 0..nd {
            for a in 0..nd {
                for b in 0..nd {
                    for c in b..nd {
                        let mut s = 0.0;
                        for e in 0..nd {
                            s += self.dqi[d][pk[a][e]]
                                * (dq[b][pk[e][c]] + dq[c][pk[e][b]] - dq[e][pk[b][c]]);
                            s += self.qi[pk[a][e]]
                                * (ddq[pk[d][b]][pk[e][c]] + ddq[pk[d][c]][pk[e][b]]
                                    - ddq[pk[d][e]][pk[b][c]]);
                        }
                        self.dga[d][a][pk[b][c]] = 0.5 * s;
                    }
                }
            }
        }

        // dd qi = -(dqi[c] dq[a] qi + qi ddq[(c,a)] qi + qi dq[a] dqi[c]).
        for c in 0..nd {
            for a in c..nd {
                let pca = pk[c][a];
                for b in 0..nd {
                    for e in b..nd {
                        let mut s = 0.0;
                        for f in 0..nd {
                            for h in 0..nd {
                                s += self.dqi[c][pk[b][f]] * dq[a][pk[f][h]] * self.qi[pk[h][e]];
                                s += self.qi[pk[b][f]] * ddq[pca][pk[f][h]] * self.qi[pk[h][e]];
                                s += self.qi[pk[b][f]] * dq[a][pk[f][h]] * self.dqi[c][pk[h][e]];
                            }
                        }
                        self.ddqi[pca][pk[b][e]] = -s;
                    }
                }
            }
        }

        // Ricci: Ric_bd = d_a Gamma^a_{bd} - d_d Gamma^a_{ab}
        //              + Gamma^a_{ae} Gamma^e_{bd} - Gamma^a_{de} Gamma^e_{ab}.
        for b in 0..nd {
            for d in b..nd {
                let mut s = 0.0;
                for a in 0..nd {
                    s += self.dga[a][a][pk[b][d]];
                    s -= self.dga[d][a][pk[a][b]];
                    for e in 0..nd {
                        s += self.ga[a][pk[a][e]] * self.ga[e][pk[b][d]];
                        s -= self.ga[a][pk[d][e]] * self.ga[e][pk[a][b]];
                    }
                }
                self.ric[pk[b][d]] = s;
            }
        }

        Ok(())
    }

    /// Riemann tensor entry `R^a_{bcd}` (requires the second stage).
    #[inline]
    fn riemann(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let pk = &self.pk;
        let mut s = self.dga[c][a][pk[d][b]] - self.dga[d][a][pk[c][b]];
        for e in 0..self.nd {
            s += self.ga[a][pk[c][e]] * self.ga[e][pk[d][b]];
            s -= self.ga[a][pk[d][e]] * self.ga[e][pk[c][b]];
        }
        s
    }
}

/// Covariant derivative `T[d][(a,b)] = grad_d h_{ab}` at a node.
fn cov1(geo: &Geo, hv: &[f64; MAXC], hd: &[[f64; MAXC]; MAXD]) -> [[f64; MAXC]; MAXD] {
    let nd = geo.nd;
    let pk = &geo.pk;
    let mut t = [[0.0f64; MAXC]; MAXD];
    for d in 0..nd {
        for a in 0..nd {
            for b in a..nd {
                let mut s = hd[d][pk[a][b]];
                for e in 0..nd {
                    s -= geo.ga[e][pk[d][a]] * hv[pk[e][b]];
                    s -= geo.ga[e][pk[d][b]] * hv[pk[a][e]];
                }
                t[d][pk[a][b]] = s;
            }
        }
    }
    t
}

/// Rough Laplacian `g^{cd} grad_c grad_d h_{ab}` at a node.
fn laplacian_at(
    geo: &Geo,
    hv: &[f64; MAXC],
    hd: &[[f64; MAXC]; MAXD],
    hdd: &[[f64; MAXC]; MAXC],
) -> [f64; MAXC] {
    let nd = geo.nd;
    let pk = &geo.pk;
    let t = cov1(geo, hv, hd);
    let mut out = [0.0f64; MAXC];
    for a in 0..nd {
        for b in a..nd {
            let pab = pk[a][b];
            let mut acc = 0.0;
            for c in 0..nd {
                for d in 0..nd {
                    let w = geo.qi[pk[c][d]];
                    if w == 0.0 {
                        continue;
                    }
                    // d_c T[d][(a,b)]
                    let mut s = hdd[pk[c][d]][pab];
                    for e in 0..nd {
                        s -= geo.dga[c][e][pk[d][a]] * hv[pk[e][b]];
                        s -= geo.ga[e][pk[d][a]] * hd[c][pk[e][b]];
                        s -= geo.dga[c][e][pk[d][b]] * hv[pk[a][e]];
                        s -= geo.ga[e][pk[d][b]] * hd[c][pk[a][e]];
                    }
                    // - Gamma terms of the second covariant derivative
                    for e in 0..nd {
                        s -= geo.ga[e][pk[c][d]] * t[e][pab];
                        s -= geo.ga[e][pk[c][a]] * t[d][pk[e][b]];
                        s -= geo.ga[e][pk[c][b]] * t[d][pk[a][e]];
                    }
                    acc += w * s;
                }
            }
            out[pab] = acc;
        }
    }
    out
}

/// Bianchi one-form `beta(h)_a = g^{be} grad_b h_{ae} - (1/2) d_a tr_g h`
/// at a node, together with its first derivatives `d_c beta_a` when
/// `want_deriv` is set (needed to apply `delta*` to it analytically).
fn bianchi_at(
    geo: &Geo,
    hv: &[f64; MAXC],
    hd: &[[f64; MAXC]; MAXD],
    hdd: Option<&[[f64; MAXC]; MAXC]>,
) -> ([f64; MAXD], [[f64; MAXD]; MAXD]) {
    let nd = geo.nd;
    let pk = &geo.pk;
    let t = cov1(geo, hv, hd);
    let mut beta = [0.0f64; MAXD];
    for a in 0..nd {
        let mut s = 0.0;
        for b in 0..nd {
            for e in 0..nd {
                s += geo.qi[pk[b][e]] * t[b][pk[a][e]];
            }
            for e in 0..nd {
                s -= 0.5 * (geo.dqi[a][pk[b][e]] * hv[pk[b][e]] + geo.qi[pk[b][e]] * hd[a][pk[b][e]]);
            }
        }
        beta[a] = s;
    }

    let mut dbeta = [[0.0f64; MAXD]; MAXD];
    if let Some(hdd) = hdd {
        for c in 0..nd {
            for a in 0..nd {
                let mut s = 0.0;
                for b in 0..nd {
                    for e in 0..nd {
                        // d_c [ qi^{be} T_b(a,e) ]
                        s += geo.dqi[c][pk[b][e]] * t[b][pk[a][e]];
                        let mut dt = hdd[pk[c][b]][pk[a][e]];
                        for f in 0..nd {
                            dt -= geo.dga[c][f][pk[b][a]] * hv[pk[f][e]];
                            dt -= geo.ga[f][pk[b][a]] * hd[c][pk[f][e]];
                            dt -= geo.dga[c][f][pk[b][e]] * hv[pk[a][f]];
                            dt -= geo.ga[f][pk[b][e]] * hd[c][pk[a][f]];
                        }
                        s += geo.qi[pk[b][e]] * dt;
                        // -(1/2) d_c d_a tr
                        s -= 0.5
                            * (geo.ddqi[pk[c][a]][pk[b][e]] * hv[pk[b][e]]
                                + geo.dqi[a][pk[b][e]] * hd[c][pk[b][e]]
                                + geo.dqi[c][pk[b][e]] * hd[a][pk[b][e]]
                                + geo.qi[pk[b][e]] * hdd[pk[c][a]][pk[b][e]]);
                    }
                }
                dbeta[c][a] = s;
            }
        }
    }
    (beta, dbeta)
}

/// Symmetrized covariant derivative `delta*(w)_ab = (grad_a w_b +
/// grad_b w_a) / 2` at a node, from nodal values and derivatives of `w`.
fn delta_star_at(geo: &Geo, wv: &[f64; MAXD], wd: &[[f64; MAXD]; MAXD]) -> [f64; MAXC] {
    let nd = geo.nd;
    let pk = &geo.pk;
    let mut out = [0.0f64; MAXC];
    for a in 0..nd {
        for b in a..nd {
            let mut s = 0.5 * (wd[a][b] + wd[b][a]);
            for e in 0..nd {
                s -= geo.ga[e][pk[a][b]] * wv[e];
            }
            out[pk[a][b]] = s;
        }
    }
    out
}

/// Curvature action `(R h)_{cd} = -g^{be} R^a_{ced} h_{ab}
/// + (Ric^a_d h_{ac} + Ric^a_c h_{ad}) / 2` at a node.
fn curvature_action_at(geo: &Geo, hv: &[f64; MAXC]) -> [f64; MAXC] {
    let nd = geo.nd;
    let pk = &geo.pk;
    // Raised Ricci ru[a][d] = qi^{am} Ric_{md}.
    let mut ru = [[0.0f64; MAXD]; MAXD];
    for a in 0..nd {
        for d in 0..nd {
            let mut s = 0.0;
            for m in 0..nd {
                s += geo.qi[pk[a][m]] * geo.ric[pk[m][d]];
            }
            ru[a][d] = s;
        }
    }
    let mut out = [0.0f64; MAXC];
    for c in 0..nd {
        for d in c..nd {
            let mut s = 0.0;
            for a in 0..nd {
                for b in 0..nd {
                    let mut rb = 0.0;
                    for e in 0..nd {
                        rb += geo.qi[pk[b][e]] * geo.riemann(a, c, e, d);
                    }
                    s -= rb * hv[pk[a][b]];
                }
                s += 0.5 * (ru[a][d] * hv[pk[a][c]] + ru[a][c] * hv[pk[a][d]]);
            }
            out[pk[c][d]] = s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Slice-loop drivers
// ---------------------------------------------------------------------------

#[inline]
fn load_block(js: &SliceJets, ix: usize, v: &mut [f64; MAXC], d: &mut [[f64; MAXC]; MAXD], dd: Option<&mut [[f64; MAXC]; MAXC]>) {
    let nc = js.nc;
    for c in 0..nc {
        v[c] = js.v(c, ix);
    }
    for axis in 0..js.ndim {
        for c in 0..nc {
            d[axis][c] = js.d(axis, c, ix);
        }
    }
    if let Some(dd) = dd {
        let npair = js.ndim * (js.ndim + 1) / 2;
        for p in 0..npair {
            for c in 0..nc {
                dd[p][c] = js.dd(p, c, ix);
            }
        }
    }
}

#[inline]
fn load_oneform(js: &SliceJets, ix: usize, v: &mut [f64; MAXD], d: &mut [[f64; MAXD]; MAXD]) {
    for c in 0..js.nc {
        v[c] = js.v(c, ix);
    }
    for axis in 0..js.ndim {
        for c in 0..js.nc {
            d[axis][c] = js.d(axis, c, ix);
        }
    }
}

struct NodeBufs {
    qv: [f64; MAXC],
    qd: [[f64; MAXC]; MAXD],
    qdd: [[f64; MAXC]; MAXC],
    hv: [f64; MAXC],
    hd: [[f64; MAXC]; MAXD],
    hdd: [[f64; MAXC]; MAXC],
}

impl NodeBufs {
    fn new() -> Box<NodeBufs> {
        Box::new(NodeBufs {
            qv: [0.0; MAXC],
            qd: [[0.0; MAXC]; MAXD],
            qdd: [[0.0; MAXC]; MAXC],
            hv: [0.0; MAXC],
            hd: [[0.0; MAXC]; MAXD],
            hdd: [[0.0; MAXC]; MAXC],
        })
    }
}

fn degenerate(grid: &CollarGrid, it: usize, ix: usize, pivot: f64) -> Error {
    Error::DegenerateMetric {
        node: grid.spatial_multi(ix),
        it,
        detail: format!("Cholesky pivot {pivot:.6e}"),
    }
}

/// Christoffel symbols of a collar metric via the generic differentiation
/// path (spectral in `x`, exact/finite-difference in `t`).
pub fn christoffel(g: &CollarMetric) -> Result<ChristoffelField> {
    let grid = &g.grid;
    let n = grid.n;
    check_dim(n)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let jets = TensorJets::new(grid, &g.tensor, nc, 1)?;
    let mut data = CollarField::zeros(grid, (n + 1) * nc);
    let mut geo = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    for it in 0..grid.nt {
        let js = jets.slice(it);
        let mut rows = vec![0.0; (n + 1) * nc * nx];
        for ix in 0..nx {
            load_block(&js, ix, &mut bufs.qv, &mut bufs.qd, None);
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, false)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            for a in 0..=n {
                for c in 0..nc {
                    rows[(a * nc + c) * nx + ix] = geo.ga[a][c];
                }
            }
        }
        for c in 0..(n + 1) * nc {
            data.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(ChristoffelField { grid: grid.clone(), data })
}

/// The Einstein residual `Ric(g) + n g` (packed symmetric components).
pub fn einstein_residual(g: &CollarMetric) -> Result<CollarField> {
    let grid = &g.grid;
    let n = grid.n;
    check_dim(n)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let jets = TensorJets::new(grid, &g.tensor, nc, 2)?;
    let mut out = CollarField::zeros(grid, nc);
    let mut geo = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    for it in 0..grid.nt {
        let js = jets.slice(it);
        let mut rows = vec![0.0; nc * nx];
        for ix in 0..nx {
            load_block(&js, ix, &mut bufs.qv, &mut bufs.qd, Some(&mut bufs.qdd));
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            for c in 0..nc {
                rows[c * nx + ix] = geo.ric[c] + n as f64 * bufs.qv[c];
            }
        }
        for c in 0..nc {
            out.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(out)
}

/// The Einstein residual evaluated on the *materialized* node values of
/// the metric, so every t-derivative goes through the finite-difference
/// path.  This is the all-numeric reference: on exact warped metrics its
/// residual is dominated by the fourth-order truncation of the t-stencils
/// and shrinks by `~16x` when the t-grid is refined by 2.
pub fn einstein_residual_fd(g: &CollarMetric) -> Result<CollarField> {
    let sampled = CollarMetric::new(&g.grid, CollarTensor::from_field(g.to_field()))?;
    einstein_residual(&sampled)
}

/// Rough Laplacian `g^{cd} grad_c grad_d h` of a symmetric 2-tensor.
pub fn rough_laplacian(g: &CollarMetric, h: &CollarTensor) -> Result<CollarField> {
    let grid = &g.grid;
    let n = grid.n;
    check_dim(n)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let gj = TensorJets::new(grid, &g.tensor, nc, 2)?;
    let hj = TensorJets::new(grid, h, nc, 2)?;
    let mut out = CollarField::zeros(grid, nc);
    let mut geo = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    for it in 0..grid.nt {
        let gs = gj.slice(it);
        let hs = hj.slice(it);
        let mut rows = vec![0.0; nc * nx];
        for ix in 0..nx {
            load_block(&gs, ix, &mut bufs.qv, &mut bufs.qd, Some(&mut bufs.qdd));
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&hs, ix, &mut bufs.hv, &mut bufs.hd, Some(&mut bufs.hdd));
            let lap = laplacian_at(&geo, &bufs.hv, &bufs.hd, &bufs.hdd);
            for c in 0..nc {
                rows[c * nx + ix] = lap[c];
            }
        }
        for c in 0..nc {
            out.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(out)
}

/// Curvature action of `g` on a symmetric 2-tensor:
/// `-g^{be} R^a_{ced} h_{ab} + (Ric^a_d h_{ac} + Ric^a_c h_{ad}) / 2`.
pub fn curvature_action(g: &CollarMetric, h: &CollarTensor) -> Result<CollarField> {
    let grid = &g.grid;
    let n = grid.n;
    check_dim(n)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let gj = TensorJets::new(grid, &g.tensor, nc, 2)?;
    let hj = TensorJets::new(grid, h, nc, 1)?;
    let mut out = CollarField::zeros(grid, nc);
    let mut geo = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    for it in 0..grid.nt {
        let gs = gj.slice(it);
        let hs = hj.slice(it);
        let mut rows = vec![0.0; nc * nx];
        for ix in 0..nx {
            load_block(&gs, ix, &mut bufs.qv, &mut bufs.qd, Some(&mut bufs.qdd));
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&hs, ix, &mut bufs.hv, &mut bufs.hd, None);
            let rr = curvature_action_at(&geo, &bufs.hv);
            for c in 0..nc {
                rows[c * nx + ix] = rr[c];
            }
        }
        for c in 0..nc {
            out.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(out)
}

/// Bianchi operator `beta(h)_a = g^{be} grad_b h_{ae} - (1/2) grad_a tr_g h`
/// of a symmetric 2-tensor with respect to `g` (a one-form field with
/// `n + 1` components).
pub fn bianchi(g: &CollarMetric, h: &CollarTensor) -> Result<CollarField> {
    let grid = &g.grid;
    let n = grid.n;
    check_dim(n)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let gj = TensorJets::new(grid, &g.tensor, nc, 1)?;
    let hj = TensorJets::new(grid, h, nc, 1)?;
    let mut out = CollarField::zeros(grid, n + 1);
    let mut geo = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    for it in 0..grid.nt {
        let gs = gj.slice(it);
        let hs = hj.slice(it);
        let mut rows = vec![0.0; (n + 1) * nx];
        for ix in 0..nx {
            load_block(&gs, ix, &mut bufs.qv, &mut bufs.qd, None);
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, false)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&hs, ix, &mut bufs.hv, &mut bufs.hd, None);
            let (beta, _) = bianchi_at(&geo, &bufs.hv, &bufs.hd, None);
            for a in 0..=n {
                rows[a * nx + ix] = beta[a];
            }
        }
        for a in 0..=n {
            out.slice_mut(a, it + 1).copy_from_slice(&rows[a * nx..(a + 1) * nx]);
        }
    }
    Ok(out)
}

/// Symmetrized covariant derivative `delta*(w)_{ab} = (grad_a w_b +
/// grad_b w_a)/2` of a one-form (given as a collar tensor with `n + 1`
/// components).
pub fn delta_star(g: &CollarMetric, w: &CollarTensor) -> Result<CollarField> {
    let grid = &g.grid;
    let n = grid.n;
    check_dim(n)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let gj = TensorJets::new(grid, &g.tensor, nc, 1)?;
    let wj = TensorJets::new(grid, w, n + 1, 1)?;
    let mut out = CollarField::zeros(grid, nc);
    let mut geo = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    let mut wv = [0.0f64; MAXD];
    let mut wd = [[0.0f64; MAXD]; MAXD];
    for it in 0..grid.nt {
        let gs = gj.slice(it);
        let ws = wj.slice(it);
        let mut rows = vec![0.0; nc * nx];
        for ix in 0..nx {
            load_block(&gs, ix, &mut bufs.qv, &mut bufs.qd, None);
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, false)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_oneform(&ws, ix, &mut wv, &mut wd);
            let ds = delta_star_at(&geo, &wv, &wd);
            for c in 0..nc {
                rows[c * nx + ix] = ds[c];
            }
        }
        for c in 0..nc {
            out.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(out)
}

/// Linearization of `g -> Ric(g) + n g` at `g_tilde`, applied to `r`:
/// `-(1/2) Lap r + delta*_{g~}(beta_{g~}(r)) + R_{g~}(r) + n r`.
pub fn linearized_einstein(g_tilde: &CollarMetric, r: &CollarTensor) -> Result<CollarField> {
    let grid = &g_tilde.grid;
    let n = grid.n;
    check_dim(n)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let gj = TensorJets::new(grid, &g_tilde.tensor, nc, 2)?;
    let rj = TensorJets::new(grid, r, nc, 2)?;
    let mut out = CollarField::zeros(grid, nc);
    let mut geo = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    for it in 0..grid.nt {
        let gs = gj.slice(it);
        let rs = rj.slice(it);
        let mut rows = vec![0.0; nc * nx];
        for ix in 0..nx {
            load_block(&gs, ix, &mut bufs.qv, &mut bufs.qd, Some(&mut bufs.qdd));
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&rs, ix, &mut bufs.hv, &mut bufs.hd, Some(&mut bufs.hdd));
            let lap = laplacian_at(&geo, &bufs.hv, &bufs.hd, &bufs.hdd);
            let (beta, dbeta) = bianchi_at(&geo, &bufs.hv, &bufs.hd, Some(&bufs.hdd));
            let ds = delta_star_at(&geo, &beta, &dbeta);
            let rr = curvature_action_at(&geo, &bufs.hv);
            for c in 0..nc {
                rows[c * nx + ix] = -0.5 * lap[c] + ds[c] + rr[c] + n as f64 * bufs.hv[c];
            }
        }
        for c in 0..nc {
            out.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(out)
}

/// Gauge-fixed linearized operator
/// `L(h) = -(1/2) Lap h + delta*((beta_{g~} - beta_g)(h)) + n h + R(h)`
/// in the metric `g_tilde`, the derivative at zero of the gauge-fixed
/// nonlinear map below.
pub fn gauge_fixed_lin(
    g_tilde: &CollarMetric,
    g_gauge: &CollarMetric,
    h: &CollarTensor,
) -> Result<CollarField> {
    let grid = &g_tilde.grid;
    let n = grid.n;
    check_dim(n)?;
    if g_gauge.grid != *grid {
        return Err(Error::GridMismatch("gauge metric lives on a different grid".into()));
    }
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let gj = TensorJets::new(grid, &g_tilde.tensor, nc, 2)?;
    let uj = TensorJets::new(grid, &g_gauge.tensor, nc, 2)?;
    let hj = TensorJets::new(grid, h, nc, 2)?;
    let mut out = CollarField::zeros(grid, nc);
    let mut geo = Box::new(Geo::new(n));
    let mut geo_g = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    let mut gbufs = NodeBufs::new();
    for it in 0..grid.nt {
        let gs = gj.slice(it);
        let us = uj.slice(it);
        let hs = hj.slice(it);
        let mut rows = vec![0.0; nc * nx];
        for ix in 0..nx {
            load_block(&gs, ix, &mut bufs.qv, &mut bufs.qd, Some(&mut bufs.qdd));
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&us, ix, &mut gbufs.qv, &mut gbufs.qd, Some(&mut gbufs.qdd));
            geo_g
                .build(&gbufs.qv, &gbufs.qd, &gbufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&hs, ix, &mut bufs.hv, &mut bufs.hd, Some(&mut bufs.hdd));

            let lap = laplacian_at(&geo, &bufs.hv, &bufs.hd, &bufs.hdd);
            let (bt, dbt) = bianchi_at(&geo, &bufs.hv, &bufs.hd, Some(&bufs.hdd));
            let (bg, dbg) = bianchi_at(&geo_g, &bufs.hv, &bufs.hd, Some(&bufs.hdd));
            let mut wv = [0.0f64; MAXD];
            let mut wd = [[0.0f64; MAXD]; MAXD];
            for a in 0..=n {
                wv[a] = bt[a] - bg[a];
                for c in 0..=n {
                    wd[c][a] = dbt[c][a] - dbg[c][a];
                }
            }
            let ds = delta_star_at(&geo, &wv, &wd);
            let rr = curvature_action_at(&geo, &bufs.hv);
            for c in 0..nc {
                rows[c * nx + ix] = -0.5 * lap[c] + ds[c] + rr[c] + n as f64 * bufs.hv[c];
            }
        }
        for c in 0..nc {
            out.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(out)
}

/// Gauge-fixed nonlinear Einstein map
/// `N(r, h) = Ric(g + r + h) + n (g + r + h)
///  - delta*_{g + r + h}(beta_{gauge}(h))`.
///
/// A zero of `N` with vanishing Bianchi boundary data and negative Ricci
/// upper bound is an Einstein metric.
pub fn nonlinear_map(
    g_base: &CollarMetric,
    g_gauge: &CollarMetric,
    r: &CollarTensor,
    h: &CollarTensor,
) -> Result<CollarField> {
    let grid = &g_base.grid;
    let n = grid.n;
    check_dim(n)?;
    if g_gauge.grid != *grid {
        return Err(Error::GridMismatch("gauge metric lives on a different grid".into()));
    }
    let g_tot = g_base.with_added(r, 1.0)?.with_added(h, 1.0)?;
    let nc = ncomp_collar(n);
    let nx = grid.spatial_len();
    let gj = TensorJets::new(grid, &g_tot.tensor, nc, 2)?;
    let uj = TensorJets::new(grid, &g_gauge.tensor, nc, 2)?;
    let hj = TensorJets::new(grid, h, nc, 2)?;
    let mut out = CollarField::zeros(grid, nc);
    let mut geo = Box::new(Geo::new(n));
    let mut geo_g = Box::new(Geo::new(n));
    let mut bufs = NodeBufs::new();
    let mut gbufs = NodeBufs::new();
    for it in 0..grid.nt {
        let gs = gj.slice(it);
        let us = uj.slice(it);
        let hs = hj.slice(it);
        let mut rows = vec![0.0; nc * nx];
        for ix in 0..nx {
            load_block(&gs, ix, &mut bufs.qv, &mut bufs.qd, Some(&mut bufs.qdd));
            geo.build(&bufs.qv, &bufs.qd, &bufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&us, ix, &mut gbufs.qv, &mut gbufs.qd, Some(&mut gbufs.qdd));
            geo_g
                .build(&gbufs.qv, &gbufs.qd, &gbufs.qdd, true)
                .map_err(|p| degenerate(grid, it, ix, p))?;
            load_block(&hs, ix, &mut bufs.hv, &mut bufs.hd, Some(&mut bufs.hdd));
            let (bg, dbg) = bianchi_at(&geo_g, &bufs.hv, &bufs.hd, Some(&bufs.hdd));
            let ds = delta_star_at(&geo, &bg, &dbg);
            for c in 0..nc {
                rows[c * nx + ix] = geo.ric[c] + n as f64 * bufs.qv[c] - ds[c];
            }
        }
        for c in 0..nc {
            out.slice_mut(c, it + 1).copy_from_slice(&rows[c * nx..(c + 1) * nx]);
        }
    }
    Ok(out)
}

/// Quadratic remainder `Q(r, h) = N(r, h) - N(0, 0) - Lbar(r, h)` where
/// `Lbar(r, h)` is the linearization `(DRic_{g} + n) r + L_{g, gauge}(h)`.
/// Computed by subtraction, so `Q(0, 0)` vanishes identically.
pub fn quadratic_remainder(
    g_base: &CollarMetric,
    g_gauge: &CollarMetric,
    r: &CollarTensor,
    h: &CollarTensor,
) -> Result<CollarField> {
    let mut q = nonlinear_map(g_base, g_gauge, r, h)?;
    let n00 = einstein_residual(g_base)?;
    q.axpy(-1.0, &n00);
    let lr = linearized_einstein(g_base, r)?;
    q.axpy(-1.0, &lr);
    let lh = gauge_fixed_lin(g_base, g_gauge, h)?;
    q.axpy(-1.0, &lh);
    Ok(q)
}

// ---------------------------------------------------------------------------
// Weighted norms
// ---------------------------------------------------------------------------

/// Frame scale of one packed component at collar time `t`: each spatial
/// index contributes a factor `eps e^{-t}` (the warp frame), the `dt`
/// index contributes 1.
fn frame_scales(n: usize, ncomp: usize, eps: f64, t: f64) -> Result<Vec<f64>> {
    let w = eps * (-t).exp();
    if ncomp == ncomp_collar(n) {
        Ok(collar_pairs(n)
            .iter()
            .map(|&(a, b)| {
                let mut s = 1.0;
                if a < n {
                    s *= w;
                }
                if b < n {
                    s *= w;
                }
                s
            })
            .collect())
    } else if ncomp == n + 1 {
        Ok((0..=n).map(|a| if a < n { w } else { 1.0 }).collect())
    } else if ncomp == 1 {
        Ok(vec![1.0])
    } else {
        Err(Error::InvalidArgument(format!(
            "weighted norm expects a scalar, one-form or symmetric tensor; got {ncomp} components"
        )))
    }
}

/// Weighted collar norm: `sup_nodes e^{delta t}` of the warp-frame
/// magnitudes of the field and its frame-directional derivatives up to
/// order `spec.k`, plus (for `k = 2`) a deterministic sampled Hölder
/// quotient of the top derivatives over node pairs at collar distance
/// below one.
///
/// Frame-directional derivatives are `eps e^{-t} d/dx_i` and `d/dt`; the
/// result is uniformly equivalent to the covariant Hölder norms of the
/// warped metric.
pub fn weighted_norm(field: &CollarField, spec: &WeightedNormSpec) -> Result<f64> {
    let grid = &field.grid;
    let n = grid.n;
    if !(spec.delta > 0.0 && spec.delta < n as f64) {
        return Err(Error::InvalidArgument(format!(
            "norm weight delta={} must lie in (0, n)",
            spec.delta
        )));
    }
    if spec.k > 2 {
        return Err(Error::InvalidArgument(format!("norm order k={} must be <= 2", spec.k)));
    }
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "Hölder exponent alpha={} must lie in (0, 1)",
            spec.alpha
        )));
    }
    let nc = field.ncomp;
    let nx = grid.spatial_len();
    let tensor = CollarTensor::from_field(field.clone());
    let jets = TensorJets::new(grid, &tensor, nc, spec.k.max(1))?;
    let eps = grid.eps;
    let dt = grid.dt();

    // Hölder pairing: offsets in t up to collar distance one.
    let jmax = if spec.k == 2 { ((1.0 / dt).floor() as usize).clamp(1, 5) } else { 0 };
    // Ring buffer of frame-scaled second-derivative blocks for the last
    // slices, sampled on a fixed spatial stride.
    let stride = 2usize;
    let sub: Vec<usize> = (0..nx)
        .filter(|&ix| grid.spatial_multi(ix).iter().all(|m| m % stride == 0))
        .collect();
    let npair = (n + 1) * (n + 2) / 2;
    let mut ring: Vec<Vec<f64>> = Vec::new();

    let mut sup_part: f64 = 0.0;
    let mut holder_part: f64 = 0.0;
    for it in 0..grid.nt {
        let t = grid.t(it);
        let js = jets.slice(it);
        let comp_scale = frame_scales(n, nc, eps, t)?;
        let w = eps * (-t).exp();
        let weight = (spec.delta * t).exp();

        let mut d2block = if spec.k == 2 { vec![0.0; npair * nc * sub.len()] } else { Vec::new() };

        for ix in 0..nx {
            // |f| + |grad f| + |grad^2 f|: per-order frame magnitudes summed.
            let mut m0 = 0.0f64;
            for c in 0..nc {
                m0 = m0.max((comp_scale[c] * js.v(c, ix)).abs());
            }
            let mut val = m0;
            if spec.k >= 1 {
                let mut m1 = 0.0f64;
                for axis in 0..=n {
                    let ds = if axis < n { w } else { 1.0 };
                    for c in 0..nc {
                        m1 = m1.max((comp_scale[c] * ds * js.d(axis, c, ix)).abs());
                    }
                }
                val += m1;
            }
            if spec.k == 2 {
                let mut m2 = 0.0f64;
                for (p, &(a, b)) in collar_pairs(n).iter().enumerate() {
                    let ds = (if a < n { w } else { 1.0 }) * (if b < n { w } else { 1.0 });
                    for c in 0..nc {
                        m2 = m2.max((comp_scale[c] * ds * js.dd(p, c, ix)).abs());
                    }
                }
                val += m2;
            }
            sup_part = sup_part.max(weight * val);
        }

        if spec.k == 2 {
            for (si, &ix) in sub.iter().enumerate() {
                for (p, &(a, b)) in collar_pairs(n).iter().enumerate() {
                    let ds = (if a < n { w } else { 1.0 }) * (if b < n { w } else { 1.0 });
                    for c in 0..nc {
                        d2block[(p * nc + c) * sub.len() + si] =
                            comp_scale[c] * ds * js.dd(p, c, ix);
                    }
                }
            }
            // Quotients against earlier slices within unit distance.
            for back in 1..=jmax.min(ring.len()) {
                let prev = &ring[ring.len() - back];
                let dist = back as f64 * dt;
                if dist > 1.0 {
                    break;
                }
                let wq = (spec.delta * (t - dist)).exp() / dist.powf(spec.alpha);
                let mut diff: f64 = 0.0;
                for i in 0..d2block.len() {
                    diff = diff.max((d2block[i] - prev[i]).abs());
                }
                holder_part = holder_part.max(wq * diff);
            }
            ring.push(d2block);
            if ring.len() > jmax {
                ring.remove(0);
            }
        }
    }
    Ok(sup_part + holder_part)
}
