//! Small dense linear-algebra helpers shared across the crate.
//!
//! Everything here is a thin convenience layer over nalgebra: complex type
//! aliases, Hermitian hygiene, eigenvalue-based factorizations, and the
//! parameterization of Hermitian matrices by real scalars that the conic
//! compiler relies on.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = Complex64;
pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Largest absolute deviation from Hermitian symmetry, `max_ij |A_ij - conj(A_ji)|`.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let d = (a[(i, j)] - a[(j, i)].conj()).norm();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Symmetrize towards the Hermitian part, `(A + A^H)/2`.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn herm_eigenvalues(a: &CMat) -> RVec {
    let mut ev: Vec<f64> = hermitize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    RVec::from_vec(ev)
}

pub fn min_eig_hermitian(a: &CMat) -> f64 {
    herm_eigenvalues(a)[0]
}

/// Rank-revealing factor of a PSD Hermitian matrix: returns `L` (d x r) with
/// `A ~= L L^H`, keeping eigenvalues above `tol * max(eig, 0)`.
pub fn psd_factor(a: &CMat, tol: f64) -> CMat {
    let eig = hermitize(a).symmetric_eigen();
    let n = a.nrows();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cut = tol * max_ev.max(1e-300);
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > cut).collect();
    let mut l = CMat::zeros(n, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for row in 0..n {
            l[(row, col)] = eig.eigenvectors[(row, i)] * s;
        }
    }
    l
}

/// Project onto the PSD cone by clipping negative eigenvalues at zero.
pub fn clip_psd(a: &CMat) -> CMat {
    let eig = hermitize(a).symmetric_eigen();
    let n = a.nrows();
    let mut out = CMat::zeros(n, n);
    for i in 0..n {
        let ev = eig.eigenvalues[i];
        if ev <= 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        for r in 0..n {
            for c in 0..n {
                out[(r, c)] += v[r] * v[c].conj() * Complex64::new(ev, 0.0);
            }
        }
    }
    out
}

/// `tr(A B)` for complex matrices with compatible dimensions.
pub fn trace_prod(a: &CMat, b: &CMat) -> Complex64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn frob_norm(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Entrywise supremum norm `max_ij |A_ij|`.
pub fn sup_norm(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn sup_norm_vec(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Number of real scalars parameterizing a Hermitian d x d matrix.
pub fn herm_param_count(d: usize) -> usize {
    d * d
}

/// Real parameter layout of a Hermitian matrix: first the d diagonal entries,
/// then for each upper-triangle position (i < j, column-major) the pair
/// (real, imaginary). `params_to_herm` and `herm_to_params` are inverses.
pub fn params_to_herm(d: usize, p: &[f64]) -> CMat {
    assert_eq!(p.len(), herm_param_count(d));
    let mut m = CMat::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = Complex64::new(p[i], 0.0);
    }
    let mut k = d;
    for j in 1..d {
        for i in 0..j {
            let z = Complex64::new(p[k], p[k + 1]);
            k += 2;
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
        }
    }
    m
}

pub fn herm_to_params(m: &CMat) -> Vec<f64> {
    let d = m.nrows();
    let mut p = Vec::with_capacity(herm_param_count(d));
    for i in 0..d {
        p.push(m[(i, i)].re);
    }
    for j in 1..d {
        for i in 0..j {
            p.push(m[(i, j)].re);
            p.push(m[(i, j)].im);
        }
    }
    p
}

/// Number of real scalars parameterizing a real symmetric d x d matrix.
pub fn sym_param_count(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Layout: diagonal first, then upper triangle column-major.
pub fn params_to_sym(d: usize, p: &[f64]) -> RMat {
    assert_eq!(p.len(), sym_param_count(d));
    let mut m = RMat::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = p[i];
    }
    let mut k = d;
    for j in 1..d {
        for i in 0..j {
            m[(i, j)] = p[k];
            m[(j, i)] = p[k];
            k += 1;
        }
    }
    m
}

pub fn sym_to_params(m: &RMat) -> Vec<f64> {
    let d = m.nrows();
    let mut p = Vec::with_capacity(sym_param_count(d));
    for i in 0..d {
        p.push(m[(i, i)]);
    }
    for j in 1..d {
        for i in 0..j {
            p.push(m[(i, j)]);
        }
    }
    p
}

/// One draw from the standard circularly-symmetric complex Gaussian CN(0, 1).
pub fn cn_sample<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
}

/// Matrix of i.i.d. CN(0, 1) entries, filled column-major so the draw order
/// is part of the crate's determinism contract.
pub fn cn_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    let mut m = CMat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = cn_sample(rng);
        }
    }
    m
}

pub fn cn_vector<R: Rng>(len: usize, rng: &mut R) -> CVec {
    let mut v = CVec::zeros(len);
    for i in 0..len {
        v[i] = cn_sample(rng);
    }
    v
}

/// splitmix64 step, used to derive independent per-trial seeds from a base
/// seed and a few tag words without coupling the streams.
pub fn mix_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x = x.wrapping_add(t).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}
