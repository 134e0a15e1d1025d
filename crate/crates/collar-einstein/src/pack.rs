//! Packed component layout for symmetric 2-tensors and one-forms on the
//! collar.
//!
//! Collar coordinates are `(x_1, ..., x_n, t)`.  In code the spatial axes are
//! `0..n-1` and the `dt` slot is axis `n`.  A symmetric 2-tensor is stored as
//! `n(n+1)/2` spatial pair components (upper triangle, row-major), then the
//! `n` mixed `(i, dt)` components, then the single `(dt, dt)` component.  All
//! field containers, mode vectors and boundary matrices in this crate share
//! this ordering.

use nalgebra::DMatrix;

/// Number of packed spatial pair components: `n(n+1)/2`.
pub fn ncomp_sym(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Number of packed components of a symmetric 2-tensor on the collar:
/// `n(n+1)/2 + n + 1`.
pub fn ncomp_collar(n: usize) -> usize {
    ncomp_sym(n) + n + 1
}

/// Packed index of the unordered spatial pair `(i, j)`, `i, j < n`.
pub fn pair_pack(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // Row-major upper triangle: row i starts after i rows of lengths n, n-1, ...
    i * n - i * (i + 1) / 2 + j
}

/// Packed index of the mixed component `(i, dt)`, `i < n`.
pub fn comp_i0(n: usize, i: usize) -> usize {
    ncomp_sym(n) + i
}

/// Packed index of the `(dt, dt)` component.
pub fn comp_00(n: usize) -> usize {
    ncomp_sym(n) + n
}

/// Packed index for a general collar pair `(a, b)` with `a, b <= n`
/// (axis `n` is the `dt` slot).
pub fn collar_pack(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    if b < n {
        pair_pack(n, a, b)
    } else if a < n {
        comp_i0(n, a)
    } else {
        comp_00(n)
    }
}

/// List of index pairs `(a, b)` with `a <= b <= n` in packed order.
pub fn collar_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(ncomp_collar(n));
    for i in 0..n {
        for j in i..n {
            out.push((i, j));
        }
    }
    for i in 0..n {
        out.push((i, n));
    }
    out.push((n, n));
    out
}

/// Contraction multiplicity of packed component `c`: 2 for off-diagonal
/// pairs, 1 for diagonal pairs, so that
/// `sum_{a,b} f(a,b) = sum_c mult(c) * f(pair(c))` for symmetric `f`.
pub fn multiplicity(n: usize, c: usize) -> f64 {
    let pairs = collar_pairs(n);
    if pairs[c].0 == pairs[c].1 {
        1.0
    } else {
        2.0
    }
}

/// Factor converting a packed tensor component to the orthogonal-basis
/// component in which the first-order mode coupling matrix is Hermitian:
/// diagonal pair components and the `(dt,dt)` component are divided by
/// `sqrt(2)`, all others kept.
pub fn a_from_h_factor(n: usize, c: usize) -> f64 {
    let pairs = collar_pairs(n);
    let (a, b) = pairs[c];
    if a == b {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// Induced action of a spatial rotation `o` (an `n x n` orthogonal matrix,
/// extended by the identity on the `dt` slot) on packed symmetric-tensor
/// components: returns the `ncomp x ncomp` matrix `P` with
/// `pack(o h o^T) = P pack(h)`.
pub fn rotation_rep_sym(n: usize, o: &DMatrix<f64>) -> DMatrix<f64> {
    let nc = ncomp_collar(n);
    let pairs = collar_pairs(n);
    let ext = |a: usize, b: usize| -> f64 {
        // entries of o extended by identity on axis n
        if a < n && b < n {
            o[(a, b)]
        } else if a == n && b == n {
            1.0
        } else {
            0.0
        }
    };
    let mut p = DMatrix::zeros(nc, nc);
    for (row, &(a, b)) in pairs.iter().enumerate() {
        for (col, &(i, j)) in pairs.iter().enumerate() {
            // h'_{ab} = sum_{c,d} ext_{ac} ext_{bd} h_{cd}; collect the packed
            // (i,j) contribution with symmetry.
            let mut v = ext(a, i) * ext(b, j);
            if i != j {
                v += ext(a, j) * ext(b, i);
            }
            p[(row, col)] = v;
        }
    }
    p
}

/// Induced action of a spatial rotation on packed one-form components
/// (`n` spatial entries then the `dt` entry): block `o` plus a fixed `dt`.
pub fn rotation_rep_vec(n: usize, o: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n + 1, n + 1);
    for a in 0..n {
        for b in 0..n {
            p[(a, b)] = o[(a, b)];
        }
    }
    p[(n, n)] = 1.0;
    p
}

/// Orthonormal basis (rows) of the trace-free subspace of packed spatial
/// pair components, orthonormal with respect to the Frobenius inner product
/// of the underlying symmetric matrices with a flat metric.
///
/// Returns `n(n+1)/2 - 1` rows of length `n(n+1)/2`.
pub fn trace_free_rows(n: usize) -> Vec<Vec<f64>> {
    let ns = ncomp_sym(n);
    let mut rows = Vec::with_capacity(ns - 1);
    // Off-diagonal unit tensors (e_i ⊗ e_j + e_j ⊗ e_i)/sqrt(2): Frobenius
    // norm 1, trace-free.  In packed coordinates the component value is
    // 1/sqrt(2) at the pair slot.
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r = vec![0.0; ns];
            r[pair_pack(n, i, j)] = std::f64::consts::FRAC_1_SQRT_2;
            rows.push(r);
        }
    }
    // Diagonal trace-free combinations diag(1,..,1,-k,0,..)/sqrt(k(k+1)).
    for k in 1..n {
        let mut r = vec![0.0; ns];
        let norm = (k as f64 * (k as f64 + 1.0)).sqrt();
        for i in 0..k {
            r[pair_pack(n, i, i)] = 1.0 / norm;
        }
        r[pair_pack(n, k, k)] = -(k as f64) / norm;
        rows.push(r);
    }
    rows
}

/// Frobenius pairing weight for packed spatial components against the flat
/// metric: diagonal pairs weigh 1, off-diagonal pairs weigh 2.
pub fn frobenius_weight_sym(n: usize, c: usize) -> f64 {
    let pairs = collar_pairs(n);
    let (a, b) = pairs[c];
    debug_assert!(b < n);
    if a == b {
        1.0
    } else {
        2.0
    }
}
