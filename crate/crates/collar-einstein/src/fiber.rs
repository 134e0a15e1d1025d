//! Intrinsic geometry of the fiber torus `(M, g_M)`.
//!
//! The fiber metric is a flat torus metric plus a smooth periodic
//! perturbation, sampled on the spatial grid.  All derivatives here are
//! spectral, so the operators are exact for band-limited fields and
//! converge spectrally for analytic ones.  This module supplies the
//! spatial covariant calculus used by the collar operators: Christoffel
//! symbols, Ricci and Schouten tensors, covariant derivatives of scalar,
//! one-form and symmetric-tensor fields, and rough Laplacians.
//!
//! Packing conventions: a symmetric spatial 2-tensor stores its
//! `n(n+1)/2` upper-triangle components via [`pair_pack`]; Christoffel
//! symbols `Gamma^m_{ij}` store `m * ncomp_sym + pair_pack(i, j)`; a
//! full (non-symmetric) spatial 2-tensor such as `grad_i w_j` stores
//! `i * n + j`.

use crate::error::{Error, Result};
use crate::field::FiberField;
use crate::grid::{CollarGrid, SpectralEngine};
use crate::pack::{ncomp_sym, pair_pack};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A Riemannian metric on the fiber torus with cached inverse,
/// Christoffel symbols and spectral machinery.
pub struct FiberMetric {
    pub grid: CollarGrid,
    /// Packed metric components `g_ij`, `ncomp_sym(n)` per node.
    pub comps: FiberField,
    /// Packed inverse metric components `g^ij`.
    pub inverse: FiberField,
    /// Christoffel symbols, component `m * ncomp_sym + pair_pack(i, j)`.
    pub gamma: FiberField,
    engine: SpectralEngine,
}

impl FiberMetric {
    /// The flat torus metric `delta_ij`.
    pub fn flat(grid: &CollarGrid) -> Result<FiberMetric> {
        let n = grid.n;
        let comps = FiberField::from_fn(grid, ncomp_sym(n), |c, _| {
            let mut v = 0.0;
            for i in 0..n {
                if c == pair_pack(n, i, i) {
                    v = 1.0;
                }
            }
            v
        });
        FiberMetric::new(grid, comps)
    }

    /// Builds a metric from packed components and validates positivity.
    pub fn new(grid: &CollarGrid, comps: FiberField) -> Result<FiberMetric> {
        let n = grid.n;
        let ns = ncomp_sym(n);
        if comps.ncomp != ns {
            return Err(Error::InvalidArgument(format!(
                "fiber metric needs {ns} packed components, got {}",
                comps.ncomp
            )));
        }
        let engine = SpectralEngine::new(&grid.spatial_shape, &grid.spatial_period);
        let nx = grid.spatial_len();

        // Pointwise inverse via Cholesky; failure marks a degenerate node.
        let mut inverse = FiberField::zeros(grid, ns);
        for ix in 0..nx {
            let mut m = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] = comps.comp(pair_pack(n, i, j))[ix];
                }
            }
            let chol = nalgebra::Cholesky::new(m).ok_or_else(|| Error::DegenerateMetric {
                it: 0,
                node: grid.spatial_multi(ix),
                detail: "fiber metric is not positive definite".into(),
            })?;
            let inv = chol.inverse();
            for i in 0..n {
                for j in i..n {
                    inverse.comp_mut(pair_pack(n, i, j))[ix] = inv[(i, j)];
                }
            }
        }

        // Christoffel symbols from spectral first derivatives of the metric.
        let mut dg = Vec::with_capacity(n);
        for axis in 0..n {
            let mut d = FiberField::zeros(grid, ns);
            for c in 0..ns {
                let dc = engine.deriv(comps.comp(c), axis, 1);
                d.comp_mut(c).copy_from_slice(&dc);
            }
            dg.push(d);
        }
        let mut gamma = FiberField::zeros(grid, n * ns);
        for ix in 0..nx {
            for m in 0..n {
                for i in 0..n {
                    for j in i..n {
                        let mut v = 0.0;
                        for l in 0..n {
                            let gml = inverse.comp(pair_pack(n, m, l))[ix];
                            v += gml
                                * (dg[i].comp(pair_pack(n, l, j))[ix]
                                    + dg[j].comp(pair_pack(n, l, i))[ix]
                                    - dg[l].comp(pair_pack(n, i, j))[ix]);
                        }
                        gamma.comp_mut(m * ns + pair_pack(n, i, j))[ix] = 0.5 * v;
                    }
                }
            }
        }

        Ok(FiberMetric { grid: grid.clone(), comps, inverse, gamma, engine })
    }

    /// A flat metric plus a deterministic band-limited perturbation of the
    /// given amplitude (a handful of low modes with seeded phases).  The
    /// result is checked for positivity.
    pub fn perturbed(grid: &CollarGrid, amplitude: f64, seed: u64) -> Result<FiberMetric> {
        let n = grid.n;
        let ns = ncomp_sym(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // waves: (component, integer wave vector, phase, weight)
        let mut waves: Vec<(usize, Vec<i64>, f64, f64)> = Vec::new();
        for c in 0..ns {
            for _ in 0..3 {
                let k: Vec<i64> = (0..n).map(|_| rng.random_range(-2..=2)).collect();
                if k.iter().all(|&v| v == 0) {
                    continue;
                }
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let weight = rng.random_range(0.25..1.0);
                waves.push((c, k, phase, weight));
            }
        }
        let periods = grid.spatial_period.clone();
        let comps = FiberField::from_fn(grid, ns, |c, x| {
            let mut v = 0.0;
            for i in 0..n {
                if c == pair_pack(n, i, i) {
                    v = 1.0;
                }
            }
            for (wc, k, phase, weight) in &waves {
                if *wc == c {
                    let mut arg = *phase;
                    for (a, &ka) in k.iter().enumerate() {
                        arg += ka as f64 * x[a] * std::f64::consts::TAU / periods[a];
                    }
                    v += weight * amplitude * arg.cos();
                }
            }
            v
        });
        FiberMetric::new(grid, comps)
    }

    /// Spectral derivative of every component of a spatial field.
    pub fn spatial_deriv(&self, field: &FiberField, axis: usize) -> FiberField {
        let mut out = FiberField::zeros(&self.grid, field.ncomp);
        for c in 0..field.ncomp {
            let d = self.engine.deriv(field.comp(c), axis, 1);
            out.comp_mut(c).copy_from_slice(&d);
        }
        out
    }

    /// The spectral engine for this grid's spatial shape.
    pub fn engine(&self) -> &SpectralEngine {
        &self.engine
    }

    /// Ricci tensor of the fiber metric (packed symmetric components).
    pub fn ricci(&self) -> FiberField {
        let n = self.grid.n;
        let ns = ncomp_sym(n);
        let nx = self.grid.spatial_len();
        let mut dgamma = Vec::with_capacity(n);
        for axis in 0..n {
            dgamma.push(self.spatial_deriv(&self.gamma, axis));
        }
        let ga = |m: usize, i: usize, j: usize, ix: usize| -> f64 {
            self.gamma.comp(m * ns + pair_pack(n, i, j))[ix]
        };
        let mut out = FiberField::zeros(&self.grid, ns);
        for ix in 0..nx {
            for j in 0..n {
                for k in j..n {
                    // Ric_jk = d_m Gamma^m_jk - d_k Gamma^m_mj
                    //        + Gamma^m_ml Gamma^l_jk - Gamma^m_jl Gamma^l_mk
                    // The trace term is differentiated along the second
                    // index, matching the collar assembly; the two pairings
                    // agree in the continuum but only up to spectral
                    // aliasing on a grid, so mixing them would cost
                    // cross-checks several digits.
                    let mut v = 0.0;
                    for m in 0..n {
                        v += dgamma[m].comp(m * ns + pair_pack(n, j, k))[ix];
                        v -= dgamma[k].comp(m * ns + pair_pack(n, m, j))[ix];
                        for l in 0..n {
                            v += ga(m, m, l, ix) * ga(l, j, k, ix);
                            v -= ga(m, j, l, ix) * ga(l, m, k, ix);
                        }
                    }
                    out.comp_mut(pair_pack(n, j, k))[ix] = v;
                }
            }
        }
        out
    }

    /// Scalar curvature `g^{jk} Ric_jk` (one component).
    pub fn scalar_curvature(&self) -> FiberField {
        let ric = self.ricci();
        self.trace_sym(&ric)
    }

    /// Schouten tensor `(Ric - R g / (2(n-1))) / (n-2)`.
    pub fn schouten(&self) -> FiberField {
        let n = self.grid.n;
        let ns = ncomp_sym(n);
        let nx = self.grid.spatial_len();
        let ric = self.ricci();
        let scal = self.trace_sym(&ric);
        let mut out = FiberField::zeros(&self.grid, ns);
        for c in 0..ns {
            let o = out.comp_mut(c);
            let r = ric.comp(c);
            let g = self.comps.comp(c);
            let s = scal.comp(0);
            for ix in 0..nx {
                o[ix] = (r[ix] - s[ix] * g[ix] / (2.0 * (n as f64 - 1.0))) / (n as f64 - 2.0);
            }
        }
        out
    }

    /// Gradient of a scalar field (plain spectral derivatives, `n` comps).
    pub fn grad_scalar(&self, f: &FiberField) -> FiberField {
        assert_eq!(f.ncomp, 1);
        let mut out = FiberField::zeros(&self.grid, self.grid.n);
        for axis in 0..self.grid.n {
            let d = self.engine.deriv(f.comp(0), axis, 1);
            out.comp_mut(axis).copy_from_slice(&d);
        }
        out
    }

    /// Covariant derivative of a one-form: component `i * n + j` holds
    /// `grad_i w_j`.
    pub fn cov_d_oneform(&self, w: &FiberField) -> FiberField {
        let n = self.grid.n;
        assert_eq!(w.ncomp, n);
        let ns = ncomp_sym(n);
        let nx = self.grid.spatial_len();
        let mut dw = Vec::with_capacity(n);
        for axis in 0..n {
            dw.push(self.spatial_deriv(w, axis));
        }
        let mut out = FiberField::zeros(&self.grid, n * n);
        for i in 0..n {
            for j in 0..n {
                let o = out.comp_mut(i * n + j);
                for ix in 0..nx {
                    let mut v = dw[i].comp(j)[ix];
                    for m in 0..n {
                        v -= self.gamma.comp(m * ns + pair_pack(n, i, j))[ix] * w.comp(m)[ix];
                    }
                    o[ix] = v;
                }
            }
        }
        out
    }

    /// Covariant derivative of a packed symmetric 2-tensor: component
    /// `k * ncomp_sym + pair_pack(i, j)` holds `grad_k h_ij`.
    pub fn cov_d_sym(&self, h: &FiberField) -> FiberField {
        let n = self.grid.n;
        let ns = ncomp_sym(n);
        assert_eq!(h.ncomp, ns);
        let nx = self.grid.spatial_len();
        let mut dh = Vec::with_capacity(n);
        for axis in 0..n {
            dh.push(self.spatial_deriv(h, axis));
        }
        let ga = |m: usize, i: usize, j: usize, ix: usize| -> f64 {
            self.gamma.comp(m * ns + pair_pack(n, i, j))[ix]
        };
        let mut out = FiberField::zeros(&self.grid, n * ns);
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    let o = out.comp_mut(k * ns + pair_pack(n, i, j));
                    for ix in 0..nx {
                        let mut v = dh[k].comp(pair_pack(n, i, j))[ix];
                        for m in 0..n {
                            v -= ga(m, k, i, ix) * h.comp(pair_pack(n, m, j))[ix];
                            v -= ga(m, k, j, ix) * h.comp(pair_pack(n, i, m))[ix];
                        }
                        o[ix] = v;
                    }
                }
            }
        }
        out
    }

    /// Divergence of a symmetric 2-tensor: `(div h)_j = g^{ik} grad_k h_ij`.
    pub fn divergence_sym(&self, h: &FiberField) -> FiberField {
        let n = self.grid.n;
        let ns = ncomp_sym(n);
        let nx = self.grid.spatial_len();
        let cov = self.cov_d_sym(h);
        let mut out = FiberField::zeros(&self.grid, n);
        for j in 0..n {
            let o = out.comp_mut(j);
            for ix in 0..nx {
                let mut v = 0.0;
                for i in 0..n {
                    for k in 0..n {
                        v += self.inverse.comp(pair_pack(n, i, k))[ix]
                            * cov.comp(k * ns + pair_pack(n, i, j))[ix];
                    }
                }
                o[ix] = v;
            }
        }
        out
    }

    /// Metric trace of a packed symmetric 2-tensor (one component).
    pub fn trace_sym(&self, h: &FiberField) -> FiberField {
        let n = self.grid.n;
        let nx = self.grid.spatial_len();
        let mut out = FiberField::zeros(&self.grid, 1);
        let o = out.comp_mut(0);
        for ix in 0..nx {
            let mut v = 0.0;
            for i in 0..n {
                for j in 0..n {
                    v += self.inverse.comp(pair_pack(n, i, j))[ix]
                        * h.comp(pair_pack(n, i, j))[ix];
                }
            }
            o[ix] = v;
        }
        out
    }

    /// Rough Laplacian on scalars: `g^{ik} grad_i grad_k f`.
    pub fn rough_laplacian_scalar(&self, f: &FiberField) -> FiberField {
        let n = self.grid.n;
        let grad = self.grad_scalar(f);
        let hess = self.cov_d_oneform(&grad);
        let nx = self.grid.spatial_len();
        let mut out = FiberField::zeros(&self.grid, 1);
        let o = out.comp_mut(0);
        for ix in 0..nx {
            let mut v = 0.0;
            for i in 0..n {
                for k in 0..n {
                    v += self.inverse.comp(pair_pack(n, i, k))[ix] * hess.comp(i * n + k)[ix];
                }
            }
            o[ix] = v;
        }
        out
    }

    /// Rough Laplacian on one-forms: `(g^{ik} grad_i grad_k w)_j`.
    pub fn rough_laplacian_oneform(&self, w: &FiberField) -> FiberField {
        let n = self.grid.n;
        let ns = ncomp_sym(n);
        let nx = self.grid.spatial_len();
        let cov = self.cov_d_oneform(w); // T_ij = grad_i w_j
        // grad_k T_ij = d_k T_ij - Gamma^m_ki T_mj - Gamma^m_kj T_im
        let mut dcov = Vec::with_capacity(n);
        for axis in 0..n {
            dcov.push(self.spatial_deriv(&cov, axis));
        }
        let ga = |m: usize, i: usize, j: usize, ix: usize| -> f64 {
            self.gamma.comp(m * ns + pair_pack(n, i, j))[ix]
        };
        let mut out = FiberField::zeros(&self.grid, n);
        for j in 0..n {
            let o = out.comp_mut(j);
            for ix in 0..nx {
                let mut v = 0.0;
                for k in 0..n {
                    for i in 0..n {
                        let gik = self.inverse.comp(pair_pack(n, i, k))[ix];
                        if gik == 0.0 {
                            continue;
                        }
                        let mut t = dcov[k].comp(i * n + j)[ix];
                        for m in 0..n {
                            t -= ga(m, k, i, ix) * cov.comp(m * n + j)[ix];
                            t -= ga(m, k, j, ix) * cov.comp(i * n + m)[ix];
                        }
                        v += gik * t;
                    }
                }
                o[ix] = v;
            }
        }
        out
    }

    /// Pointwise volume element `sqrt(det g_M)` (one component).
    pub fn volume_element(&self) -> FiberField {
        let n = self.grid.n;
        let nx = self.grid.spatial_len();
        let mut out = FiberField::zeros(&self.grid, 1);
        let o = out.comp_mut(0);
        for ix in 0..nx {
            let mut m = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] = self.comps.comp(pair_pack(n, i, j))[ix];
                }
            }
            o[ix] = m.determinant().sqrt();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pack::ncomp_sym;

    fn grid(n: usize, m: usize) -> CollarGrid {
        CollarGrid::new(
            n,
            0.1,
            12.0,
            16,
            vec![m; n],
            vec![std::f64::consts::TAU; n],
        )
        .unwrap()
    }

    #[test]
    fn flat_metric_has_no_connection_or_curvature() {
        let g = FiberMetric::flat(&grid(3, 8)).unwrap();
        assert!(g.gamma.sup_abs() < 1e-13);
        assert!(g.ricci().sup_abs() < 1e-12);
    }

    #[test]
    fn metric_is_covariantly_constant() {
        let g = FiberMetric::perturbed(&grid(3, 16), 0.05, 7).unwrap();
        let cov = g.cov_d_sym(&g.comps);
        assert!(cov.sup_abs() < 1e-10, "sup {:.3e}", cov.sup_abs());
    }

    #[test]
    fn pullback_of_the_flat_metric_has_vanishing_ricci() {
        // g_ij = d_i phi^a d_j phi^a for the torus diffeomorphism
        // phi(x) = x + v psi(x) is flat, so its Ricci tensor vanishes
        // identically; the metric is band-limited but genuinely
        // non-diagonal, which exercises every index pairing in the
        // curvature assembly.
        let n = 3;
        let g = grid(n, 16);
        let ns = ncomp_sym(n);
        let a = 0.03;
        let v = [0.3, 0.5, -0.2];
        let comps = FiberField::from_fn(&g, ns, |c, x| {
            let dpsi = [
                -a * (x[0] + 0.3).sin() * (2.0 * x[1]).cos(),
                -2.0 * a * (x[0] + 0.3).cos() * (2.0 * x[1]).sin(),
                0.0,
            ];
            let vv: f64 = v.iter().map(|w| w * w).sum();
            for i in 0..n {
                for j in i..n {
                    if c == pair_pack(n, i, j) {
                        let base = if i == j { 1.0 } else { 0.0 };
                        return base + v[j] * dpsi[i] + v[i] * dpsi[j] + vv * dpsi[i] * dpsi[j];
                    }
                }
            }
            0.0
        });
        let gm = FiberMetric::new(&g, comps).unwrap();
        assert!(gm.gamma.sup_abs() > 1e-3, "connection should be nontrivial");
        let sup = gm.ricci().sup_abs();
        assert!(sup < 1e-6, "flat pullback has Ricci {sup:.3e}");
    }

    #[test]
    fn contracted_bianchi_identity_holds() {
        // div Ric = d(scal)/2 ties together Christoffel symbols, curvature
        // and the covariant divergence; it fails loudly under any sign or
        // index slip.  The identity mixes spectral derivatives of derived
        // (rational-in-g) fields, so it holds only up to aliasing of their
        // spectral tails -- resolve generously.
        let g = FiberMetric::perturbed(&grid(3, 32), 0.05, 3).unwrap();
        let ric = g.ricci();
        let div = g.divergence_sym(&ric);
        let scal = g.scalar_curvature();
        let grad = g.grad_scalar(&scal);
        let mut worst: f64 = 0.0;
        for j in 0..3 {
            for ix in 0..g.grid.spatial_len() {
                worst = worst.max((div.comp(j)[ix] - 0.5 * grad.comp(j)[ix]).abs());
            }
        }
        assert!(worst < 2e-8, "contracted Bianchi defect {worst:.3e}");
    }

    #[test]
    fn schouten_trace_matches_scalar_curvature() {
        let n = 3;
        let g = FiberMetric::perturbed(&grid(n, 16), 0.05, 11).unwrap();
        let p = g.schouten();
        let tr = g.trace_sym(&p);
        let scal = g.scalar_curvature();
        for ix in 0..g.grid.spatial_len() {
            let want = scal.comp(0)[ix] / (2.0 * (n as f64 - 1.0));
            assert!((tr.comp(0)[ix] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn laplacians_are_self_adjoint_in_the_volume_pairing() {
        let g = FiberMetric::perturbed(&grid(3, 16), 0.05, 5).unwrap();
        let nx = g.grid.spatial_len();
        let f = FiberField::from_fn(&g.grid, 1, |_, x| x[0].sin() + 0.3 * (x[1] + x[2]).cos());
        let h = FiberField::from_fn(&g.grid, 1, |_, x| (x[1] - 2.0 * x[0]).cos());
        let vol = g.volume_element();
        let lf = g.rough_laplacian_scalar(&f);
        let lh = g.rough_laplacian_scalar(&h);
        let mut a = 0.0;
        let mut b = 0.0;
        for ix in 0..nx {
            a += lf.comp(0)[ix] * h.comp(0)[ix] * vol.comp(0)[ix];
            b += f.comp(0)[ix] * lh.comp(0)[ix] * vol.comp(0)[ix];
        }
        let scale = f.sup_abs() * lh.sup_abs() * nx as f64;
        assert!((a - b).abs() < 1e-9 * scale, "asymmetry {:.3e}", (a - b).abs());
    }

    #[test]
    fn degenerate_fiber_metric_is_rejected() {
        let grid = grid(3, 8);
        let comps = FiberField::from_fn(&grid, ncomp_sym(3), |_, _| 0.0);
        match FiberMetric::new(&grid, comps).err() {
            Some(crate::error::Error::DegenerateMetric { .. }) => {}
            other => panic!("expected degenerate metric error, got {other:?}"),
        }
    }
}
