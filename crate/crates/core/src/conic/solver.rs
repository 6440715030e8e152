//! Homogeneous self-dual interior-point method for linear conic programs.
//!
//! Solves the primal-dual pair
//!
//! ```text
//!   minimize    c'x                maximize    -b'y - h'z
//!   subject to  A x = b            subject to  A'y + G'z + c = 0
//!               G x + s = h                    z in K*
//!               s in K
//! ```
//!
//! where `K` is a product of nonnegative orthants and real symmetric PSD
//! cones. The algorithm embeds the pair in the self-dual model of Ye, Todd
//! and Mizuno (extra homogenizing variables `tau` and `kappa`), follows the
//! central path with Nesterov-Todd scaling and a Mehrotra predictor-corrector
//! step, and reads off either an optimal point or an infeasibility
//! certificate from the limit of `tau` and `kappa`.
//!
//! Each Newton system is reduced to a dense Cholesky factorization of the
//! scaled normal matrix `G'(W'W)^-1 G`, assembled from per-block sparse
//! constraint entries, plus a small Schur complement for the equality rows.
//! One round of iterative refinement absorbs the static regularization added
//! to keep the factorizations stable.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::cones::{
    cone_degree, cone_identity, cone_len, cone_min_eig, jordan_product, jordan_solve, svec_row,
    ConeBlock, Scaling, SQRT2,
};
use crate::linalg::{RMat, RVec};

/// Numerical controls for the interior-point loop.
#[derive(Clone, Debug)]
pub struct SolverSettings {
    /// Relative tolerance on primal/dual residuals and the duality gap.
    pub tol: f64,
    /// Iteration cap before giving up with `MaxIterations`.
    pub max_iter: usize,
    /// Static diagonal regularization added to the normal equations,
    /// relative to the largest diagonal entry.
    pub static_reg: f64,
    /// Fraction of the step to the cone boundary actually taken.
    pub step_frac: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-7,
            max_iter: 200,
            static_reg: 1e-10,
            step_frac: 0.99,
        }
    }
}

/// Terminal state of a solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    /// Residuals and gap met the tolerance; the returned point is optimal.
    Optimal,
    /// A certificate of primal infeasibility was found.
    Infeasible,
    /// The iteration cap was reached; the returned point is the best iterate.
    MaxIterations,
    /// The linear algebra broke down (lost cone interior, singular Newton
    /// system, unbounded objective, or NaN).
    NumericalFailure,
}

/// Sparse symmetric coefficient matrix of one variable inside a PSD block,
/// as expanded `(row, col, value)` entries.
pub type PsdCoeffs = Vec<(u32, u32, f64)>;

/// Per-cone-block constraint coefficients in sparse form.
///
/// These are coefficients of the *slack map* `s = h - G x` restricted to the
/// block, i.e. entries of the columns of `G`. PSD entries are plain matrix
/// coordinates (not svec-scaled) and must list both `(r, c)` and `(c, r)` for
/// off-diagonal positions.
#[derive(Clone, Debug)]
pub enum BlockData {
    NonNeg {
        /// One sparse row `(variable, coefficient)` per scalar slack.
        rows: Vec<Vec<(usize, f64)>>,
    },
    Psd {
        /// The touching variables and their coefficient matrices.
        cols: Vec<(usize, PsdCoeffs)>,
    },
}

/// A conic program in solver standard form.
#[derive(Clone, Debug)]
pub struct StandardForm {
    pub c: RVec,
    pub a: RMat,
    pub b: RVec,
    pub h: RVec,
    pub blocks: Vec<ConeBlock>,
    pub block_data: Vec<BlockData>,
    /// Dense copy of `G`, derived from `block_data`; used for residuals.
    pub g: RMat,
    /// Starting offset of each block inside the flat cone vector.
    pub offsets: Vec<usize>,
}

impl StandardForm {
    /// Assembles the standard form, deriving the dense `G` from the sparse
    /// per-block data so the two can never disagree.
    pub fn new(
        c: RVec,
        a: RMat,
        b: RVec,
        h: RVec,
        blocks: Vec<ConeBlock>,
        block_data: Vec<BlockData>,
    ) -> StandardForm {
        let n = c.len();
        assert_eq!(a.ncols(), n, "equality matrix width must match variables");
        assert_eq!(a.nrows(), b.len(), "equality rows must match rhs");
        assert_eq!(blocks.len(), block_data.len(), "one data entry per block");
        let mc = cone_len(&blocks);
        assert_eq!(h.len(), mc, "cone rhs must match total cone length");
        assert!(mc > 0, "the program must have at least one cone row");

        let mut offsets = Vec::with_capacity(blocks.len());
        let mut off = 0;
        for b in &blocks {
            offsets.push(off);
            off += b.vec_len();
        }

        let mut g = DMatrix::zeros(mc, n);
        for (bi, (block, data)) in blocks.iter().zip(&block_data).enumerate() {
            let base = offsets[bi];
            match (block, data) {
                (ConeBlock::NonNeg { len }, BlockData::NonNeg { rows }) => {
                    assert_eq!(rows.len(), *len, "one sparse row per orthant slack");
                    for (r, row) in rows.iter().enumerate() {
                        for &(var, val) in row {
                            g[(base + r, var)] += val;
                        }
                    }
                }
                (ConeBlock::Psd { dim }, BlockData::Psd { cols }) => {
                    for (var, entries) in cols {
                        for &(r, ccol, v) in entries {
                            let (r, ccol) = (r as usize, ccol as usize);
                            assert!(r < *dim && ccol < *dim, "entry outside PSD block");
                            if r == ccol {
                                g[(base + svec_row(r, ccol), *var)] += v;
                            } else if r < ccol {
                                g[(base + svec_row(r, ccol), *var)] += SQRT2 * v;
                            }
                        }
                    }
                }
                _ => panic!("block kind and block data kind must match"),
            }
        }

        StandardForm {
            c,
            a,
            b,
            h,
            blocks,
            block_data,
            g,
            offsets,
        }
    }

    /// One-line shape summary used by diagnostic dumps.
    pub fn shape_summary(&self) -> String {
        let psd: Vec<String> = self
            .blocks
            .iter()
            .filter_map(|b| match b {
                ConeBlock::Psd { dim } => Some(dim.to_string()),
                ConeBlock::NonNeg { .. } => None,
            })
            .collect();
        let nonneg: usize = self
            .blocks
            .iter()
            .map(|b| match b {
                ConeBlock::NonNeg { len } => *len,
                ConeBlock::Psd { .. } => 0,
            })
            .sum();
        format!(
            "{} variables, {} equalities, {} scalar inequalities, PSD blocks [{}]",
            self.c.len(),
            self.a.nrows(),
            nonneg,
            psd.join(", ")
        )
    }
}

/// Raw solver output in standard-form coordinates.
#[derive(Clone, Debug)]
pub struct RawSolution {
    pub status: SolveStatus,
    pub x: RVec,
    pub y: RVec,
    pub z: RVec,
    pub s: RVec,
    pub primal_obj: f64,
    pub dual_obj: f64,
    /// Absolute complementarity gap of the returned point.
    pub gap: f64,
    pub rel_gap: f64,
    pub primal_res: f64,
    pub dual_res: f64,
    pub iterations: usize,
    pub message: String,
}

/// Independently recomputed optimality residuals for a returned point.
#[derive(Clone, Debug)]
pub struct KktReport {
    /// `||A x - b||_inf`.
    pub eq_residual: f64,
    /// `||G x + s - h||_inf`.
    pub cone_residual: f64,
    /// `||A'y + G'z + c||_inf`.
    pub dual_residual: f64,
    /// Smallest eigenvalue over all primal slack blocks.
    pub s_min_eig: f64,
    /// Smallest eigenvalue over all dual blocks.
    pub z_min_eig: f64,
    /// Inner product `<s, z>`.
    pub complementarity: f64,
    /// `|c'x + b'y + h'z|`, the objective gap.
    pub gap: f64,
}

/// Recomputes KKT residuals of a solution from the problem data alone.
pub fn check_kkt(sf: &StandardForm, sol: &RawSolution) -> KktReport {
    let eq = (&sf.a * &sol.x - &sf.b).amax();
    let cone = (&sf.g * &sol.x + &sol.s - &sf.h).amax();
    let dual = (sf.a.tr_mul(&sol.y) + sf.g.tr_mul(&sol.z) + &sf.c).amax();
    let pobj = sf.c.dot(&sol.x);
    let dobj = -(sf.b.dot(&sol.y) + sf.h.dot(&sol.z));
    KktReport {
        eq_residual: if sf.b.is_empty() { 0.0 } else { eq },
        cone_residual: cone,
        dual_residual: dual,
        s_min_eig: cone_min_eig(&sf.blocks, &sol.s),
        z_min_eig: cone_min_eig(&sf.blocks, &sol.z),
        complementarity: sol.s.dot(&sol.z),
        gap: (pobj - dobj).abs(),
    }
}

fn apply_blockwise<F>(sf: &StandardForm, scalings: &[Scaling], v: &RVec, f: F) -> RVec
where
    F: Fn(&Scaling, &ConeBlock, &[f64]) -> RVec,
{
    let mut out = DVector::zeros(v.len());
    for (bi, block) in sf.blocks.iter().enumerate() {
        let off = sf.offsets[bi];
        let len = block.vec_len();
        let r = f(&scalings[bi], block, &v.as_slice()[off..off + len]);
        out.rows_mut(off, len).copy_from(&r);
    }
    out
}

fn w_apply(sf: &StandardForm, sc: &[Scaling], v: &RVec) -> RVec {
    apply_blockwise(sf, sc, v, |s, b, x| s.apply_w(b, x))
}

fn wt_apply(sf: &StandardForm, sc: &[Scaling], v: &RVec) -> RVec {
    apply_blockwise(sf, sc, v, |s, b, x| s.apply_wt(b, x))
}

fn winv_apply(sf: &StandardForm, sc: &[Scaling], v: &RVec) -> RVec {
    apply_blockwise(sf, sc, v, |s, b, x| s.apply_w_inv(b, x))
}

fn winv_t_apply(sf: &StandardForm, sc: &[Scaling], v: &RVec) -> RVec {
    apply_blockwise(sf, sc, v, |s, b, x| s.apply_w_inv_t(b, x))
}

fn jordan_all(sf: &StandardForm, a: &RVec, b: &RVec) -> RVec {
    let mut out = DVector::zeros(a.len());
    for (bi, block) in sf.blocks.iter().enumerate() {
        let off = sf.offsets[bi];
        let len = block.vec_len();
        let r = jordan_product(
            block,
            &a.as_slice()[off..off + len],
            &b.as_slice()[off..off + len],
        );
        out.rows_mut(off, len).copy_from(&r);
    }
    out
}

fn jordan_solve_all(sf: &StandardForm, scalings: &[Scaling], rhs: &RVec) -> RVec {
    let mut out = DVector::zeros(rhs.len());
    for (bi, block) in sf.blocks.iter().enumerate() {
        let off = sf.offsets[bi];
        let len = block.vec_len();
        let lambda = match &scalings[bi] {
            Scaling::NonNeg { lambda, .. } => lambda,
            Scaling::Psd { lambda, .. } => lambda,
        };
        let r = jordan_solve(block, lambda, &rhs.as_slice()[off..off + len]);
        out.rows_mut(off, len).copy_from(&r);
    }
    out
}

fn lambda_all(sf: &StandardForm, scalings: &[Scaling]) -> RVec {
    let mut out = DVector::zeros(cone_len(&sf.blocks));
    for (bi, block) in sf.blocks.iter().enumerate() {
        let off = sf.offsets[bi];
        let len = block.vec_len();
        let r = scalings[bi].lambda_vec(block);
        out.rows_mut(off, len).copy_from(&r);
    }
    out
}

fn max_step_all(sf: &StandardForm, scalings: &[Scaling], dir: &RVec) -> f64 {
    let mut alpha = f64::INFINITY;
    for (bi, block) in sf.blocks.iter().enumerate() {
        let off = sf.offsets[bi];
        let len = block.vec_len();
        alpha = alpha.min(scalings[bi].max_step(block, &dir.as_slice()[off..off + len]));
    }
    alpha
}

/// Factored Newton system for one interior-point iteration.
struct Kkt {
    /// The cone matrix premultiplied by `W^-T`, so the normal matrix is the
    /// Gram matrix `B'B`. Keeping `B` itself lets the inner refinement work
    /// in scaled dual coordinates, where roundoff grows with the condition
    /// number of `W` rather than its square.
    b: RMat,
    h_chol: Cholesky<f64, Dyn>,
    m_chol: Option<Cholesky<f64, Dyn>>,
}

fn scaled_cone_matrix(sf: &StandardForm, scalings: &[Scaling]) -> RMat {
    let mut b = sf.g.clone();
    let mut seg = Vec::new();
    for (bi, block) in sf.blocks.iter().enumerate() {
        let off = sf.offsets[bi];
        let len = block.vec_len();
        for j in 0..b.ncols() {
            seg.clear();
            seg.extend((0..len).map(|i| b[(off + i, j)]));
            if seg.iter().all(|&v| v == 0.0) {
                continue;
            }
            let scaled = scalings[bi].apply_w_inv_t(block, &seg);
            for i in 0..len {
                b[(off + i, j)] = scaled[i];
            }
        }
    }
    b
}

fn chol_with_escalating_reg(mut m: RMat, reg0: f64) -> Option<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().amax().max(1.0);
    let mut reg = reg0;
    loop {
        match Cholesky::new(m.clone()) {
            Some(c) => return Some(c),
            None => {
                if reg > 1e-4 {
                    return None;
                }
                let delta = reg * scale;
                for i in 0..m.nrows() {
                    m[(i, i)] += delta;
                }
                reg *= 100.0;
            }
        }
    }
}

fn factor_kkt(sf: &StandardForm, scalings: &[Scaling], reg: f64) -> Option<Kkt> {
    let b = scaled_cone_matrix(sf, scalings);
    let h = b.tr_mul(&b);
    let h_chol = chol_with_escalating_reg(h, reg)?;
    let m = sf.a.nrows();
    if m == 0 {
        return Some(Kkt {
            b,
            h_chol,
            m_chol: None,
        });
    }
    let hinv_at = h_chol.solve(&sf.a.transpose());
    let meq = &sf.a * hinv_at;
    let m_chol = chol_with_escalating_reg(meq, reg)?;
    Some(Kkt {
        b,
        h_chol,
        m_chol: Some(m_chol),
    })
}

impl Kkt {
    /// Solves the reduced Newton system
    ///
    /// ```text
    ///   A'uy + G'uz          = bx
    ///   A ux                 = by
    ///   G ux    - W'W uz     = bz
    /// ```
    ///
    /// The elimination runs in scaled dual coordinates `W uz` against the
    /// stored `B = W^-T G`, with iterative refinement of the same scaled
    /// system; the unscaled `uz` is recovered only at the end. This keeps
    /// every intermediate product within one factor of `W` of unit scale,
    /// which is what lets the refinement stay contractive near convergence.
    fn solve3(
        &self,
        sf: &StandardForm,
        scalings: &[Scaling],
        bx: &RVec,
        by: &RVec,
        bz: &RVec,
    ) -> (RVec, RVec, RVec) {
        let bz_s = winv_t_apply(sf, scalings, bz);
        let (mut ux, mut uy, mut uz_s) = self.solve3_scaled(sf, bx, by, &bz_s);
        for _ in 0..2 {
            let res_x = bx - (sf.a.tr_mul(&uy) + self.b.tr_mul(&uz_s));
            let res_y = by - &sf.a * &ux;
            let res_z = &bz_s - (&self.b * &ux - &uz_s);
            let (dx, dy, dz) = self.solve3_scaled(sf, &res_x, &res_y, &res_z);
            ux += dx;
            uy += dy;
            uz_s += dz;
        }
        let uz = winv_apply(sf, scalings, &uz_s);
        (ux, uy, uz)
    }

    /// One pass over the scaled system `A'uy + B'v = bx`, `A ux = by`,
    /// `B ux - v = bz_s` with `v = W uz`.
    fn solve3_scaled(
        &self,
        sf: &StandardForm,
        bx: &RVec,
        by: &RVec,
        bz_s: &RVec,
    ) -> (RVec, RVec, RVec) {
        let rxt = bx + self.b.tr_mul(bz_s);
        let (ux, uy) = match &self.m_chol {
            Some(m_chol) => {
                let t = self.h_chol.solve(&rxt);
                let rhs_y = &sf.a * t - by;
                let uy = m_chol.solve(&rhs_y);
                let ux = self.h_chol.solve(&(rxt - sf.a.tr_mul(&uy)));
                (ux, uy)
            }
            None => (self.h_chol.solve(&rxt), DVector::zeros(0)),
        };
        let uz_s = &self.b * &ux - bz_s;
        (ux, uy, uz_s)
    }
}

/// A combined Newton direction for the homogeneous embedding.
struct Direction {
    dx: RVec,
    dy: RVec,
    dz: RVec,
    ds: RVec,
    dtau: f64,
    dkappa: f64,
}

impl Direction {
    fn add(&mut self, other: &Direction) {
        self.dx += &other.dx;
        self.dy += &other.dy;
        self.dz += &other.dz;
        self.ds += &other.ds;
        self.dtau += other.dtau;
        self.dkappa += other.dkappa;
    }
}

/// Per-iteration assembler for combined directions.
///
/// Solves the full step equations
///
/// ```text
///   A'dy + G'dz + c dtau          = bx
///   A dx        - b dtau          = by
///   G dx + ds   - h dtau          = bz
///   dkappa + c'dx + b'dy + h'dz   = bt
///   lambda o (W^-T ds + W dz)     = dc
///   tau dkappa + kappa dtau       = dk
/// ```
///
/// by eliminating `ds` and `dkappa`, splitting off the homogenizing column
/// through the cached `(x1, y1, z1)` solve, and polishing the assembled
/// direction with refinement against the full system. The final rounds matter:
/// near convergence the scaled system is ill-conditioned enough that the raw
/// `dtau` picks up noise well above the surviving residuals.
struct StepSolver<'a> {
    sf: &'a StandardForm,
    scalings: &'a [Scaling],
    kkt: &'a Kkt,
    lambda: &'a RVec,
    x1: RVec,
    y1: RVec,
    z1: RVec,
    den: f64,
    tau: f64,
    kappa: f64,
}

impl StepSolver<'_> {
    fn once(&self, bx: &RVec, by: &RVec, bz: &RVec, bt: f64, dc: &RVec, dk: f64) -> Direction {
        let sf = self.sf;
        let g = jordan_solve_all(sf, self.scalings, dc);
        let bz3 = bz - wt_apply(sf, self.scalings, &g);
        let (x2, y2, z2) = self.kkt.solve3(sf, self.scalings, bx, by, &bz3);
        let dtau = (dk / self.tau + sf.c.dot(&x2) + sf.b.dot(&y2) + sf.h.dot(&z2) - bt) / self.den;
        let dx = x2 + &self.x1 * dtau;
        let dy = y2 + &self.y1 * dtau;
        let dz = z2 + &self.z1 * dtau;
        let ds = wt_apply(sf, self.scalings, &(g - w_apply(sf, self.scalings, &dz)));
        let dkappa = (dk - self.kappa * dtau) / self.tau;
        Direction {
            dx,
            dy,
            dz,
            ds,
            dtau,
            dkappa,
        }
    }

    fn refined(&self, bx: &RVec, by: &RVec, bz: &RVec, bt: f64, dc: &RVec, dk: f64) -> Direction {
        let sf = self.sf;
        let mut d = self.once(bx, by, bz, bt, dc, dk);
        for _ in 0..2 {
            let res_x = bx - (sf.a.tr_mul(&d.dy) + sf.g.tr_mul(&d.dz) + &sf.c * d.dtau);
            let res_y = by - (&sf.a * &d.dx - &sf.b * d.dtau);
            let res_z = bz - (&sf.g * &d.dx + &d.ds - &sf.h * d.dtau);
            let res_t = bt - (d.dkappa + sf.c.dot(&d.dx) + sf.b.dot(&d.dy) + sf.h.dot(&d.dz));
            let scaled_sum =
                winv_t_apply(sf, self.scalings, &d.ds) + w_apply(sf, self.scalings, &d.dz);
            let res_c = dc - jordan_all(sf, self.lambda, &scaled_sum);
            let res_k = dk - (self.tau * d.dkappa + self.kappa * d.dtau);
            let corr = self.once(&res_x, &res_y, &res_z, res_t, &res_c, res_k);
            d.add(&corr);
        }
        d
    }
}

#[derive(Clone, Copy)]
struct ExitMetrics {
    pobj: f64,
    dobj: f64,
    gap: f64,
    rel_gap: f64,
    pres: f64,
    dres: f64,
}

fn finish(
    status: SolveStatus,
    point: (RVec, RVec, RVec, RVec),
    metrics: ExitMetrics,
    iterations: usize,
    message: &str,
) -> RawSolution {
    let (x, y, z, s) = point;
    RawSolution {
        status,
        x,
        y,
        z,
        s,
        primal_obj: metrics.pobj,
        dual_obj: metrics.dobj,
        gap: metrics.gap,
        rel_gap: metrics.rel_gap,
        primal_res: metrics.pres,
        dual_res: metrics.dres,
        iterations,
        message: message.to_string(),
    }
}

/// Runs the interior-point method on a standard-form program.
pub fn solve(sf: &StandardForm, settings: &SolverSettings) -> RawSolution {
    let n = sf.c.len();
    let m = sf.b.len();
    let mc = cone_len(&sf.blocks);
    let nu = cone_degree(&sf.blocks) as f64;

    let norm_b = sf.b.norm().max(1.0);
    let norm_h = sf.h.norm().max(1.0);
    let norm_c = sf.c.norm().max(1.0);

    let mut e = DVector::zeros(mc);
    cone_identity(&sf.blocks, &mut e);

    let fail = |msg: &str, iters: usize| {
        finish(
            SolveStatus::NumericalFailure,
            (
                DVector::zeros(n),
                DVector::zeros(m),
                DVector::zeros(mc),
                DVector::zeros(mc),
            ),
            ExitMetrics {
                pobj: f64::NAN,
                dobj: f64::NAN,
                gap: f64::NAN,
                rel_gap: f64::NAN,
                pres: f64::NAN,
                dres: f64::NAN,
            },
            iters,
            msg,
        )
    };

    // Initialization: solve two Newton systems at the identity scaling and
    // shift the resulting slack and dual points into the cone interior.
    let id_scalings: Vec<Scaling> = sf.blocks.iter().map(Scaling::identity).collect();
    let kkt0 = match factor_kkt(sf, &id_scalings, settings.static_reg) {
        Some(k) => k,
        None => return fail("initial normal-equation factorization failed", 0),
    };
    let zero_n = DVector::zeros(n);
    let zero_m = DVector::zeros(m);
    let zero_mc = DVector::zeros(mc);
    let (x0, _, uz0) = kkt0.solve3(sf, &id_scalings, &zero_n, &sf.b, &sf.h);
    let mut s = -uz0;
    let me_s = cone_min_eig(&sf.blocks, &s);
    if me_s < 1e-8 * s.amax().max(1.0) {
        s += &e * (1.0 - me_s);
    }
    let neg_c = -&sf.c;
    let (_, y0, z0) = kkt0.solve3(sf, &id_scalings, &neg_c, &zero_m, &zero_mc);
    let mut z = z0;
    let me_z = cone_min_eig(&sf.blocks, &z);
    if me_z < 1e-8 * z.amax().max(1.0) {
        z += &e * (1.0 - me_z);
    }
    let mut x = x0;
    let mut y = y0;
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut stall = 0usize;

    // Working against finite precision the iteration can overshoot the best
    // point it will ever reach, so the most accurate iterate seen is kept for
    // the non-converged exits.
    let mut best_merit = f64::INFINITY;
    let mut best: Option<(RVec, RVec, RVec, RVec, ExitMetrics, usize)> = None;
    let mut exit_msg: Option<&str> = None;
    let mut iters_done = settings.max_iter;

    'main: for it in 0..settings.max_iter {
        // Residuals of the homogeneous model.
        let rx = sf.a.tr_mul(&y) + sf.g.tr_mul(&z) + &sf.c * tau;
        let ry = &sf.b * tau - &sf.a * &x;
        let rz = &s + &sf.g * &x - &sf.h * tau;
        let rt = kappa + sf.c.dot(&x) + sf.b.dot(&y) + sf.h.dot(&z);

        let gap_sz = s.dot(&z);
        let mu = (gap_sz + tau * kappa) / (nu + 1.0);
        if !mu.is_finite() || tau <= 0.0 || kappa <= 0.0 {
            exit_msg = Some("numerical breakdown (non-finite central-path parameter)");
            iters_done = it;
            break;
        }

        // Convergence metrics of the de-homogenized point.
        let pobj = sf.c.dot(&x) / tau;
        let dobj = -(sf.b.dot(&y) + sf.h.dot(&z)) / tau;
        let gap_abs = gap_sz / (tau * tau);
        let rel_gap = gap_abs / pobj.abs().max(dobj.abs()).max(1.0);
        let pres = (ry.norm() / norm_b).max(rz.norm() / norm_h) / tau;
        let dres = rx.norm() / (norm_c * tau);
        let metrics = ExitMetrics {
            pobj,
            dobj,
            gap: gap_abs,
            rel_gap,
            pres,
            dres,
        };

        if pres <= settings.tol && dres <= settings.tol && rel_gap <= settings.tol {
            return finish(
                SolveStatus::Optimal,
                (x / tau, y / tau, z / tau, s / tau),
                metrics,
                it,
                "converged",
            );
        }

        let merit = pres.max(dres).max(rel_gap);
        if merit < best_merit {
            best_merit = merit;
            best = Some((&x / tau, &y / tau, &z / tau, &s / tau, metrics, it));
        } else if merit > 1e4 * best_merit && best_merit < 1e3 * settings.tol {
            // The iteration has hit its floating-point floor and started to
            // diverge; the best point is as good as this run will get.
            exit_msg = Some("numerical floor reached short of the requested tolerance");
            iters_done = it;
            break;
        }

        // Infeasibility certificates from the homogeneous limit.
        let omega = -(sf.b.dot(&y) + sf.h.dot(&z));
        if omega > 0.0 {
            let pinf = (sf.a.tr_mul(&y) + sf.g.tr_mul(&z)).norm() / (norm_c * omega);
            if pinf <= settings.tol {
                return finish(
                    SolveStatus::Infeasible,
                    (DVector::zeros(n), y / omega, z / omega, DVector::zeros(mc)),
                    metrics,
                    it,
                    "primal infeasibility certificate (b'y + h'z = -1)",
                );
            }
        }
        let neg_cx = -sf.c.dot(&x);
        if neg_cx > 0.0 {
            let dinf =
                ((&sf.a * &x).norm() / norm_b).max((&sf.g * &x + &s).norm() / norm_h) / neg_cx;
            if dinf <= settings.tol {
                return fail(
                    "objective unbounded below (dual infeasibility certificate)",
                    it,
                );
            }
        }

        // Nesterov-Todd scaling at the current iterate.
        let mut scalings = Vec::with_capacity(sf.blocks.len());
        for (bi, block) in sf.blocks.iter().enumerate() {
            let off = sf.offsets[bi];
            let len = block.vec_len();
            match Scaling::from_pair(
                block,
                &s.as_slice()[off..off + len],
                &z.as_slice()[off..off + len],
            ) {
                Some(sc) => scalings.push(sc),
                None => {
                    exit_msg = Some("cone interior lost while updating the scaling");
                    iters_done = it;
                    break 'main;
                }
            }
        }

        let kkt = match factor_kkt(sf, &scalings, settings.static_reg) {
            Some(k) => k,
            None => {
                exit_msg = Some("normal-equation factorization failed");
                iters_done = it;
                break;
            }
        };

        let (x1, y1, z1) = kkt.solve3(sf, &scalings, &neg_c, &sf.b, &sf.h);
        // The Newton system gives c'x1 + b'y1 + h'z1 = -||W z1||^2 exactly;
        // using that identity avoids the catastrophic cancellation the naive
        // inner products suffer near convergence.
        let den = kappa / tau + w_apply(sf, &scalings, &z1).norm_squared();
        if den.abs() < 1e-300 {
            exit_msg = Some("degenerate homogenizing direction");
            iters_done = it;
            break;
        }

        let lambda = lambda_all(sf, &scalings);
        let lam_sq = jordan_all(sf, &lambda, &lambda);
        let step = StepSolver {
            sf,
            scalings: &scalings,
            kkt: &kkt,
            lambda: &lambda,
            x1,
            y1,
            z1,
            den,
            tau,
            kappa,
        };

        // Predictor (affine scaling) direction.
        let neg_rx = -&rx;
        let neg_rz = -&rz;
        let aff = step.refined(&neg_rx, &ry, &neg_rz, -rt, &(-&lam_sq), -tau * kappa);
        let dz_scaled_a = w_apply(sf, &scalings, &aff.dz);
        let ds_scaled_a = winv_t_apply(sf, &scalings, &aff.ds);

        let mut alpha_aff = max_step_all(sf, &scalings, &ds_scaled_a).min(max_step_all(
            sf,
            &scalings,
            &dz_scaled_a,
        ));
        if aff.dtau < 0.0 {
            alpha_aff = alpha_aff.min(-tau / aff.dtau);
        }
        if aff.dkappa < 0.0 {
            alpha_aff = alpha_aff.min(-kappa / aff.dkappa);
        }
        let alpha_aff = alpha_aff.min(1.0);

        let lam_ds = &lambda + &ds_scaled_a * alpha_aff;
        let lam_dz = &lambda + &dz_scaled_a * alpha_aff;
        let mu_aff = (lam_ds.dot(&lam_dz)
            + (tau + alpha_aff * aff.dtau) * (kappa + alpha_aff * aff.dkappa))
            / (nu + 1.0);
        let sigma = ((mu_aff / mu).clamp(0.0, 1.0)).powi(3);

        // Corrector: recenter toward sigma * mu and absorb the second-order
        // error of the affine step.
        let corr = jordan_all(sf, &ds_scaled_a, &dz_scaled_a);
        let d_c = &e * (sigma * mu) - &lam_sq - corr;
        let d_k = sigma * mu - tau * kappa - aff.dtau * aff.dkappa;
        let one_ms = 1.0 - sigma;
        let dir = step.refined(
            &(&neg_rx * one_ms),
            &(&ry * one_ms),
            &(&neg_rz * one_ms),
            -one_ms * rt,
            &d_c,
            d_k,
        );
        let dz_scaled = w_apply(sf, &scalings, &dir.dz);
        let ds_scaled = winv_t_apply(sf, &scalings, &dir.ds);

        let mut alpha_max =
            max_step_all(sf, &scalings, &ds_scaled).min(max_step_all(sf, &scalings, &dz_scaled));
        if dir.dtau < 0.0 {
            alpha_max = alpha_max.min(-tau / dir.dtau);
        }
        if dir.dkappa < 0.0 {
            alpha_max = alpha_max.min(-kappa / dir.dkappa);
        }
        let alpha = (settings.step_frac * alpha_max).min(1.0);

        if alpha < 1e-8 {
            stall += 1;
            if stall >= 2 {
                exit_msg = Some("step length collapsed");
                iters_done = it;
                break;
            }
        } else {
            stall = 0;
        }

        x += &dir.dx * alpha;
        y += &dir.dy * alpha;
        z += &dir.dz * alpha;
        s += &dir.ds * alpha;
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
    }

    let (status, msg) = match exit_msg {
        Some(m) => (SolveStatus::NumericalFailure, m),
        None => (SolveStatus::MaxIterations, "iteration limit reached"),
    };
    match best {
        Some((bx, by, bz, bs, metrics, bit)) => {
            let full = format!("{msg}; returning the best iterate (iteration {bit})");
            finish(status, (bx, by, bz, bs), metrics, iters_done, &full)
        }
        None => fail(msg, iters_done),
    }
}
