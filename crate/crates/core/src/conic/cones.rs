//! Cone kernels for the interior-point solver.
//!
//! The solver works over a product of nonnegative-orthant segments and real
//! symmetric positive-semidefinite blocks. Symmetric matrices travel through
//! the solver in scaled-vector form ("svec"): the upper triangle read column
//! by column with off-diagonal entries weighted by sqrt(2), so that the
//! Euclidean inner product of two svecs equals the trace inner product of the
//! matrices they represent.
//!
//! Each block knows how to compute its Nesterov-Todd scaling from a strictly
//! feasible primal-dual pair, apply the scaling operators, measure step
//! lengths to the cone boundary, and evaluate the Jordan-algebra products
//! that drive the predictor-corrector updates.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{RMat, RVec};

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Length of the svec representation of a `d x d` symmetric matrix.
pub fn svec_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Index of entry `(i, j)` with `i <= j` inside the svec layout.
pub fn svec_row(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// Packs a symmetric matrix into svec form (upper triangle, column-major,
/// off-diagonal entries scaled by sqrt(2)).
pub fn svec_pack(m: &RMat) -> RVec {
    let d = m.nrows();
    let mut out = DVector::zeros(svec_len(d));
    let mut idx = 0;
    for j in 0..d {
        for i in 0..=j {
            out[idx] = if i == j { m[(i, j)] } else { SQRT2 * m[(i, j)] };
            idx += 1;
        }
    }
    out
}

/// Expands an svec slice back into a dense symmetric matrix.
pub fn svec_unpack(v: &[f64], d: usize) -> RMat {
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for j in 0..d {
        for i in 0..=j {
            if i == j {
                m[(i, j)] = v[idx];
            } else {
                let val = v[idx] / SQRT2;
                m[(i, j)] = val;
                m[(j, i)] = val;
            }
            idx += 1;
        }
    }
    m
}

/// One factor of the product cone.
#[derive(Clone, Debug)]
pub enum ConeBlock {
    /// `len` scalar inequalities `s >= 0`.
    NonNeg { len: usize },
    /// A `dim x dim` real symmetric PSD block in svec form.
    Psd { dim: usize },
}

impl ConeBlock {
    /// Dimension of the block inside the flat cone vector.
    pub fn vec_len(&self) -> usize {
        match self {
            ConeBlock::NonNeg { len } => *len,
            ConeBlock::Psd { dim } => svec_len(*dim),
        }
    }

    /// Contribution to the barrier degree.
    pub fn degree(&self) -> usize {
        match self {
            ConeBlock::NonNeg { len } => *len,
            ConeBlock::Psd { dim } => *dim,
        }
    }
}

/// Total vector length of a product cone.
pub fn cone_len(blocks: &[ConeBlock]) -> usize {
    blocks.iter().map(|b| b.vec_len()).sum()
}

/// Total barrier degree of a product cone.
pub fn cone_degree(blocks: &[ConeBlock]) -> usize {
    blocks.iter().map(|b| b.degree()).sum()
}

/// Writes the cone's identity element into `out`.
pub fn cone_identity(blocks: &[ConeBlock], out: &mut RVec) {
    let mut off = 0;
    for b in blocks {
        match b {
            ConeBlock::NonNeg { len } => {
                for i in 0..*len {
                    out[off + i] = 1.0;
                }
                off += len;
            }
            ConeBlock::Psd { dim } => {
                let mut idx = off;
                for j in 0..*dim {
                    for i in 0..=j {
                        out[idx] = if i == j { 1.0 } else { 0.0 };
                        idx += 1;
                    }
                }
                off += svec_len(*dim);
            }
        }
    }
}

/// Smallest eigenvalue over all blocks of a point in cone coordinates.
///
/// Used to decide how far an initial point must be shifted to reach the
/// interior of the cone.
pub fn cone_min_eig(blocks: &[ConeBlock], v: &RVec) -> f64 {
    let mut lo = f64::INFINITY;
    let mut off = 0;
    for b in blocks {
        match b {
            ConeBlock::NonNeg { len } => {
                for i in 0..*len {
                    lo = lo.min(v[off + i]);
                }
                off += len;
            }
            ConeBlock::Psd { dim } => {
                let m = svec_unpack(&v.as_slice()[off..off + svec_len(*dim)], *dim);
                let eigs = m.symmetric_eigenvalues();
                lo = lo.min(eigs.min());
                off += svec_len(*dim);
            }
        }
    }
    if lo.is_finite() {
        lo
    } else {
        0.0
    }
}

/// Nesterov-Todd scaling data for one block.
///
/// For a PSD block the scaling is the matrix `R` with `R' Z R = R^-1 S R^-T
/// = Lambda` diagonal; the scaled point `lambda` is the diagonal of that
/// matrix. For the orthant the scaling is the elementwise geometric mean
/// `w_i = sqrt(s_i / z_i)` with `lambda_i = sqrt(s_i z_i)`.
#[derive(Clone, Debug)]
pub enum Scaling {
    NonNeg { w: RVec, lambda: RVec },
    Psd { r: RMat, r_inv: RMat, lambda: RVec },
}

impl Scaling {
    /// Identity scaling, used for the initialization solves.
    pub fn identity(block: &ConeBlock) -> Scaling {
        match block {
            ConeBlock::NonNeg { len } => Scaling::NonNeg {
                w: DVector::from_element(*len, 1.0),
                lambda: DVector::from_element(*len, 1.0),
            },
            ConeBlock::Psd { dim } => Scaling::Psd {
                r: DMatrix::identity(*dim, *dim),
                r_inv: DMatrix::identity(*dim, *dim),
                lambda: DVector::from_element(*dim, 1.0),
            },
        }
    }

    /// Computes the Nesterov-Todd scaling from strictly feasible block
    /// coordinates `s` and `z`. Returns `None` when either point has drifted
    /// out of the cone interior beyond what the Cholesky factorization can
    /// absorb.
    pub fn from_pair(block: &ConeBlock, s: &[f64], z: &[f64]) -> Option<Scaling> {
        match block {
            ConeBlock::NonNeg { len } => {
                let mut w = DVector::zeros(*len);
                let mut lambda = DVector::zeros(*len);
                for i in 0..*len {
                    if s[i] <= 0.0 || z[i] <= 0.0 {
                        return None;
                    }
                    w[i] = (s[i] / z[i]).sqrt();
                    lambda[i] = (s[i] * z[i]).sqrt();
                }
                Some(Scaling::NonNeg { w, lambda })
            }
            ConeBlock::Psd { dim } => {
                let d = *dim;
                let s_mat = svec_unpack(s, d);
                let z_mat = svec_unpack(z, d);
                let ls = s_mat.cholesky()?.l();
                let lz = z_mat.cholesky()?.l();
                // R'ZR = R^-1 S R^-T = Sigma follows from the SVD of Ls'Lz.
                let svd = (ls.transpose() * &lz).svd(true, true);
                let u = svd.u.as_ref()?;
                let vt = svd.v_t.as_ref()?;
                let sigma = &svd.singular_values;
                if sigma.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                    return None;
                }
                let mut r = &ls * u;
                let mut r_inv = vt * lz.transpose();
                for j in 0..d {
                    let root = sigma[j].sqrt();
                    for i in 0..d {
                        r[(i, j)] /= root;
                        r_inv[(j, i)] /= root;
                    }
                }
                Some(Scaling::Psd {
                    r,
                    r_inv,
                    lambda: sigma.clone_owned(),
                })
            }
        }
    }

    /// The scaled point in block coordinates (diagonal for PSD blocks).
    pub fn lambda_vec(&self, block: &ConeBlock) -> RVec {
        match (self, block) {
            (Scaling::NonNeg { lambda, .. }, _) => lambda.clone(),
            (Scaling::Psd { lambda, .. }, ConeBlock::Psd { dim }) => {
                let mut out = DVector::zeros(svec_len(*dim));
                let mut idx = 0;
                for j in 0..*dim {
                    for i in 0..=j {
                        if i == j {
                            out[idx] = lambda[j];
                        }
                        idx += 1;
                    }
                }
                out
            }
            _ => unreachable!("scaling kind mismatch"),
        }
    }

    /// Applies `W` to dual-side coordinates: `w o z` or `R' Z R`.
    pub fn apply_w(&self, block: &ConeBlock, z: &[f64]) -> RVec {
        match (self, block) {
            (Scaling::NonNeg { w, .. }, _) => {
                DVector::from_iterator(w.len(), w.iter().zip(z).map(|(wi, zi)| wi * zi))
            }
            (Scaling::Psd { r, .. }, ConeBlock::Psd { dim }) => {
                let m = svec_unpack(z, *dim);
                svec_pack(&(r.transpose() * m * r))
            }
            _ => unreachable!("scaling kind mismatch"),
        }
    }

    /// Applies the adjoint `W'` to scaled coordinates: `w o x` or `R X R'`.
    pub fn apply_wt(&self, block: &ConeBlock, x: &[f64]) -> RVec {
        match (self, block) {
            (Scaling::NonNeg { w, .. }, _) => {
                DVector::from_iterator(w.len(), w.iter().zip(x).map(|(wi, xi)| wi * xi))
            }
            (Scaling::Psd { r, .. }, ConeBlock::Psd { dim }) => {
                let m = svec_unpack(x, *dim);
                svec_pack(&(r * m * r.transpose()))
            }
            _ => unreachable!("scaling kind mismatch"),
        }
    }

    /// Applies `W^-T` to primal-side coordinates: `s / w` or `R^-1 S R^-T`.
    pub fn apply_w_inv_t(&self, block: &ConeBlock, s: &[f64]) -> RVec {
        match (self, block) {
            (Scaling::NonNeg { w, .. }, _) => {
                DVector::from_iterator(w.len(), w.iter().zip(s).map(|(wi, si)| si / wi))
            }
            (Scaling::Psd { r_inv, .. }, ConeBlock::Psd { dim }) => {
                let m = svec_unpack(s, *dim);
                svec_pack(&(r_inv * m * r_inv.transpose()))
            }
            _ => unreachable!("scaling kind mismatch"),
        }
    }

    /// Applies `W^-1` to scaled coordinates: `z / w` or `R^-T Z R^-1`.
    pub fn apply_w_inv(&self, block: &ConeBlock, z: &[f64]) -> RVec {
        match (self, block) {
            (Scaling::NonNeg { w, .. }, _) => {
                DVector::from_iterator(w.len(), w.iter().zip(z).map(|(wi, zi)| zi / wi))
            }
            (Scaling::Psd { r_inv, .. }, ConeBlock::Psd { dim }) => {
                let m = svec_unpack(z, *dim);
                svec_pack(&(r_inv.transpose() * m * r_inv))
            }
            _ => unreachable!("scaling kind mismatch"),
        }
    }

    /// The inverse scaling matrix `T^-1 = R^-T R^-1` of a PSD block.
    pub fn t_inv(&self) -> RMat {
        match self {
            Scaling::Psd { r_inv, .. } => r_inv.transpose() * r_inv,
            Scaling::NonNeg { .. } => unreachable!("t_inv is only defined for PSD blocks"),
        }
    }

    /// Largest step `alpha` keeping `lambda + alpha * dir` in the cone, where
    /// `dir` is a direction in scaled coordinates. Returns `f64::INFINITY`
    /// when the direction never leaves the cone.
    pub fn max_step(&self, block: &ConeBlock, dir: &[f64]) -> f64 {
        match (self, block) {
            (Scaling::NonNeg { lambda, .. }, _) => {
                let mut alpha = f64::INFINITY;
                for (li, di) in lambda.iter().zip(dir) {
                    if *di < 0.0 {
                        alpha = alpha.min(-li / di);
                    }
                }
                alpha
            }
            (Scaling::Psd { lambda, .. }, ConeBlock::Psd { dim }) => {
                let mut m = svec_unpack(dir, *dim);
                for j in 0..*dim {
                    for i in 0..*dim {
                        m[(i, j)] /= (lambda[i] * lambda[j]).sqrt();
                    }
                }
                let lo = m.symmetric_eigenvalues().min();
                if lo < 0.0 {
                    -1.0 / lo
                } else {
                    f64::INFINITY
                }
            }
            _ => unreachable!("scaling kind mismatch"),
        }
    }
}

/// Jordan product of two block vectors: elementwise on the orthant, the
/// symmetrized matrix product `(XY + YX) / 2` on PSD blocks.
pub fn jordan_product(block: &ConeBlock, a: &[f64], b: &[f64]) -> RVec {
    match block {
        ConeBlock::NonNeg { len } => {
            DVector::from_iterator(*len, a.iter().zip(b).map(|(x, y)| x * y))
        }
        ConeBlock::Psd { dim } => {
            let am = svec_unpack(a, *dim);
            let bm = svec_unpack(b, *dim);
            let prod = &am * &bm;
            svec_pack(&((&prod + prod.transpose()) * 0.5))
        }
    }
}

/// Solves `lambda o x = rhs` for `x`, where `lambda` is a scaled point
/// (positive vector, or diagonal of a PSD block).
pub fn jordan_solve(block: &ConeBlock, lambda_diag: &RVec, rhs: &[f64]) -> RVec {
    match block {
        ConeBlock::NonNeg { len } => {
            DVector::from_iterator(*len, lambda_diag.iter().zip(rhs).map(|(l, r)| r / l))
        }
        ConeBlock::Psd { dim } => {
            let mut m = svec_unpack(rhs, *dim);
            for j in 0..*dim {
                for i in 0..*dim {
                    m[(i, j)] *= 2.0 / (lambda_diag[i] + lambda_diag[j]);
                }
            }
            svec_pack(&m)
        }
    }
}
