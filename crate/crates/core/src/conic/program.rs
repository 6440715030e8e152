//! Structured conic-program builder.
//!
//! Callers describe an optimization problem over named matrix variables
//! (Hermitian or real symmetric, free or PSD-constrained) and scalar
//! variables, with linear equalities, scalar inequalities, linear matrix
//! inequalities, and two convex epigraph gadgets: the trace of a matrix
//! inverse and a squared Frobenius norm. `compile` lowers everything to the
//! solver's real standard form: Hermitian blocks become their real symmetric
//! embedding `[[Re X, -Im X], [Im X, Re X]]`, each affine matrix inequality
//! becomes one PSD cone block, and scalar inequalities share a nonnegative
//! orthant block. Rows and matrix blocks are rescaled during lowering so the
//! solver sees coefficients of comparable magnitude.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::cones::{svec_len, svec_pack, svec_row, ConeBlock};
use super::solver::{
    self, BlockData, KktReport, PsdCoeffs, RawSolution, SolveStatus, SolverSettings, StandardForm,
};
use crate::linalg::{
    herm_param_count, hermitian_defect, params_to_herm, params_to_sym, sym_param_count, CMat, RMat,
    RVec,
};

/// Handle to one variable block created by the builder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum VarKind {
    HermPsd(usize),
    HermFree(usize),
    SymPsd(usize),
    Scalars(usize),
}

impl VarKind {
    fn param_count(self) -> usize {
        match self {
            VarKind::HermPsd(d) | VarKind::HermFree(d) => herm_param_count(d),
            VarKind::SymPsd(d) => sym_param_count(d),
            VarKind::Scalars(k) => k,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct VarBlock {
    kind: VarKind,
    offset: usize,
}

/// A real affine expression in the program's parameters.
#[derive(Clone, Debug, Default)]
pub struct LinExpr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl LinExpr {
    pub fn constant(v: f64) -> LinExpr {
        LinExpr {
            terms: Vec::new(),
            constant: v,
        }
    }

    fn term(param: usize, coef: f64) -> LinExpr {
        LinExpr {
            terms: vec![(param, coef)],
            constant: 0.0,
        }
    }

    /// Sorts terms by parameter and merges duplicates.
    fn compressed(&self) -> LinExpr {
        let mut terms = self.terms.clone();
        terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (p, v) in terms {
            match merged.last_mut() {
                Some((lp, lv)) if *lp == p => *lv += v,
                _ => merged.push((p, v)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        LinExpr {
            terms: merged,
            constant: self.constant,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.compressed().terms.is_empty()
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self.terms.extend(rhs.terms);
        self.constant += rhs.constant;
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(self, rhs: LinExpr) -> LinExpr {
        self + (-rhs)
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(mut self) -> LinExpr {
        for t in &mut self.terms {
            t.1 = -t.1;
        }
        self.constant = -self.constant;
        self
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, rhs: f64) -> LinExpr {
        for t in &mut self.terms {
            t.1 *= rhs;
        }
        self.constant *= rhs;
        self
    }
}

/// A real symmetric matrix whose entries are affine expressions.
#[derive(Clone, Debug)]
pub struct SymMatExpr {
    dim: usize,
    entries: Vec<LinExpr>,
}

impl SymMatExpr {
    pub fn zeros(dim: usize) -> SymMatExpr {
        SymMatExpr {
            dim,
            entries: vec![LinExpr::default(); svec_len(dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sets entry `(i, j)` (and its mirror) to the expression.
    pub fn set(&mut self, i: usize, j: usize, e: LinExpr) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.entries[svec_row(i, j)] = e;
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        &self.entries[svec_row(i, j)]
    }
}

/// A complex matrix whose entries are affine in the program's parameters:
/// a constant plus one coefficient matrix per parameter.
#[derive(Clone, Debug)]
pub struct HermMatExpr {
    constant: CMat,
    terms: Vec<(usize, CMat)>,
}

impl HermMatExpr {
    pub fn zeros(rows: usize, cols: usize) -> HermMatExpr {
        HermMatExpr {
            constant: CMat::zeros(rows, cols),
            terms: Vec::new(),
        }
    }

    pub fn from_constant(m: CMat) -> HermMatExpr {
        HermMatExpr {
            constant: m,
            terms: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.constant.ncols()
    }

    /// Replaces the expression by `C * self * C^H`.
    pub fn congruence(&self, c: &CMat) -> HermMatExpr {
        let ch = c.adjoint();
        HermMatExpr {
            constant: c * &self.constant * &ch,
            terms: self.terms.iter().map(|(p, m)| (*p, c * m * &ch)).collect(),
        }
    }

    pub fn scale(&self, f: f64) -> HermMatExpr {
        HermMatExpr {
            constant: &self.constant * Complex64::new(f, 0.0),
            terms: self
                .terms
                .iter()
                .map(|(p, m)| (*p, m * Complex64::new(f, 0.0)))
                .collect(),
        }
    }

    /// Entrywise product `[C]_mn [self]_mn`. A Hermitian `C` keeps the
    /// expression Hermitian; this is how a sum of congruences by diagonal
    /// matrices `sum_j diag(v_j) X diag(v_j)^H` enters in one step, since it
    /// equals the entrywise product of `X` with `sum_j v_j v_j^H`.
    pub fn hadamard(&self, c: &CMat) -> HermMatExpr {
        HermMatExpr {
            constant: self.constant.component_mul(c),
            terms: self
                .terms
                .iter()
                .map(|(p, m)| (*p, m.component_mul(c)))
                .collect(),
        }
    }

    pub fn add_expr(&self, other: &HermMatExpr) -> HermMatExpr {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        HermMatExpr {
            constant: &self.constant + &other.constant,
            terms,
        }
    }

    pub fn sub_expr(&self, other: &HermMatExpr) -> HermMatExpr {
        self.add_expr(&other.scale(-1.0))
    }

    pub fn shift(&self, m: &CMat) -> HermMatExpr {
        HermMatExpr {
            constant: &self.constant + m,
            terms: self.terms.clone(),
        }
    }

    /// Pads the expression into a larger matrix at block offset `(r0, c0)`.
    pub fn pad(&self, rows: usize, cols: usize, r0: usize, c0: usize) -> HermMatExpr {
        let place = |m: &CMat| {
            let mut big = CMat::zeros(rows, cols);
            big.view_mut((r0, c0), (m.nrows(), m.ncols())).copy_from(m);
            big
        };
        HermMatExpr {
            constant: place(&self.constant),
            terms: self.terms.iter().map(|(p, m)| (*p, place(m))).collect(),
        }
    }

    /// Merges duplicate parameters, dropping terms that cancel.
    fn compressed(&self) -> HermMatExpr {
        let mut map: BTreeMap<usize, CMat> = BTreeMap::new();
        for (p, m) in &self.terms {
            map.entry(*p)
                .and_modify(|acc| *acc += m)
                .or_insert_with(|| m.clone());
        }
        HermMatExpr {
            constant: self.constant.clone(),
            terms: map
                .into_iter()
                .filter(|(_, m)| m.iter().any(|z| z.norm_sqr() != 0.0))
                .collect(),
        }
    }
}

/// Incrementally describes a conic program; see the module docs.
#[derive(Default)]
pub struct ProgramBuilder {
    vars: Vec<VarBlock>,
    n: usize,
    objective: LinExpr,
    obj_const: f64,
    eqs: Vec<(LinExpr, f64)>,
    ineqs: Vec<(LinExpr, f64)>,
    sym_lmis: Vec<SymMatExpr>,
    herm_lmis: Vec<HermMatExpr>,
}

impl ProgramBuilder {
    pub fn new() -> ProgramBuilder {
        ProgramBuilder::default()
    }

    fn add_var(&mut self, kind: VarKind) -> BlockId {
        let id = BlockId(self.vars.len());
        self.vars.push(VarBlock {
            kind,
            offset: self.n,
        });
        self.n += kind.param_count();
        id
    }

    /// A Hermitian matrix variable constrained to the PSD cone.
    pub fn hermitian_psd(&mut self, dim: usize) -> BlockId {
        self.add_var(VarKind::HermPsd(dim))
    }

    /// An unconstrained Hermitian matrix variable.
    pub fn hermitian_free(&mut self, dim: usize) -> BlockId {
        self.add_var(VarKind::HermFree(dim))
    }

    /// A real symmetric matrix variable constrained to the PSD cone.
    pub fn symmetric_psd(&mut self, dim: usize) -> BlockId {
        self.add_var(VarKind::SymPsd(dim))
    }

    /// A group of unconstrained real scalars.
    pub fn scalars(&mut self, count: usize) -> BlockId {
        self.add_var(VarKind::Scalars(count))
    }

    fn block(&self, id: BlockId) -> VarBlock {
        self.vars[id.0]
    }

    pub fn dim(&self, id: BlockId) -> usize {
        match self.block(id).kind {
            VarKind::HermPsd(d) | VarKind::HermFree(d) | VarKind::SymPsd(d) => d,
            VarKind::Scalars(k) => k,
        }
    }

    fn param_diag(&self, vb: VarBlock, i: usize) -> usize {
        vb.offset + i
    }

    fn param_upper(&self, vb: VarBlock, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        let d = match vb.kind {
            VarKind::HermPsd(d) | VarKind::HermFree(d) | VarKind::SymPsd(d) => d,
            VarKind::Scalars(_) => panic!("matrix entry of a scalar block"),
        };
        let u = j * (j - 1) / 2 + i;
        match vb.kind {
            VarKind::HermPsd(_) | VarKind::HermFree(_) => vb.offset + d + 2 * u,
            VarKind::SymPsd(_) => vb.offset + d + u,
            VarKind::Scalars(_) => unreachable!(),
        }
    }

    pub fn scalar_expr(&self, id: BlockId, k: usize) -> LinExpr {
        let vb = self.block(id);
        match vb.kind {
            VarKind::Scalars(count) => {
                assert!(k < count);
                LinExpr::term(vb.offset + k, 1.0)
            }
            _ => panic!("scalar_expr on a matrix block"),
        }
    }

    /// Real part of entry `(i, j)` of a matrix block.
    pub fn entry_re(&self, id: BlockId, i: usize, j: usize) -> LinExpr {
        let vb = self.block(id);
        if i == j {
            LinExpr::term(self.param_diag(vb, i), 1.0)
        } else {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            LinExpr::term(self.param_upper(vb, a, b), 1.0)
        }
    }

    /// Imaginary part of entry `(i, j)` of a Hermitian block.
    pub fn entry_im(&self, id: BlockId, i: usize, j: usize) -> LinExpr {
        let vb = self.block(id);
        match vb.kind {
            VarKind::HermPsd(_) | VarKind::HermFree(_) => {}
            _ => panic!("entry_im on a non-Hermitian block"),
        }
        if i == j {
            return LinExpr::default();
        }
        let (a, b, sign) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
        LinExpr::term(self.param_upper(vb, a, b) + 1, sign)
    }

    pub fn trace_expr(&self, id: BlockId) -> LinExpr {
        let d = self.dim(id);
        let vb = self.block(id);
        LinExpr {
            terms: (0..d).map(|i| (self.param_diag(vb, i), 1.0)).collect(),
            constant: 0.0,
        }
    }

    /// `Re tr(C X)` for a Hermitian block `X` and arbitrary complex `C`.
    pub fn re_trace_product(&self, id: BlockId, c: &CMat) -> LinExpr {
        let d = self.dim(id);
        assert_eq!(c.nrows(), d);
        assert_eq!(c.ncols(), d);
        let vb = self.block(id);
        let mut e = LinExpr::default();
        for i in 0..d {
            e.terms.push((self.param_diag(vb, i), c[(i, i)].re));
        }
        for j in 1..d {
            for i in 0..j {
                let cij = c[(i, j)];
                let cji = c[(j, i)];
                e.terms.push((self.param_upper(vb, i, j), cij.re + cji.re));
                e.terms
                    .push((self.param_upper(vb, i, j) + 1, cij.im - cji.im));
            }
        }
        e.compressed()
    }

    /// `Im tr(C X)` for a Hermitian block `X` and arbitrary complex `C`.
    pub fn im_trace_product(&self, id: BlockId, c: &CMat) -> LinExpr {
        let d = self.dim(id);
        assert_eq!(c.nrows(), d);
        assert_eq!(c.ncols(), d);
        let vb = self.block(id);
        let mut e = LinExpr::default();
        for i in 0..d {
            e.terms.push((self.param_diag(vb, i), c[(i, i)].im));
        }
        for j in 1..d {
            for i in 0..j {
                let cij = c[(i, j)];
                let cji = c[(j, i)];
                e.terms.push((self.param_upper(vb, i, j), cij.im + cji.im));
                e.terms
                    .push((self.param_upper(vb, i, j) + 1, cji.re - cij.re));
            }
        }
        e.compressed()
    }

    /// `tr(C X)` for a real symmetric block `X`.
    pub fn sym_trace_product(&self, id: BlockId, c: &RMat) -> LinExpr {
        let d = self.dim(id);
        assert_eq!(c.nrows(), d);
        let vb = self.block(id);
        let mut e = LinExpr::default();
        for i in 0..d {
            e.terms.push((self.param_diag(vb, i), c[(i, i)]));
        }
        for j in 1..d {
            for i in 0..j {
                e.terms
                    .push((self.param_upper(vb, i, j), c[(i, j)] + c[(j, i)]));
            }
        }
        e.compressed()
    }

    /// The identity affine map of a Hermitian block, for building matrix
    /// expressions.
    pub fn matrix_expr(&self, id: BlockId) -> HermMatExpr {
        let d = self.dim(id);
        let vb = self.block(id);
        match vb.kind {
            VarKind::HermPsd(_) | VarKind::HermFree(_) => {}
            _ => panic!("matrix_expr on a non-Hermitian block"),
        }
        let mut terms = Vec::with_capacity(herm_param_count(d));
        for i in 0..d {
            let mut m = CMat::zeros(d, d);
            m[(i, i)] = Complex64::new(1.0, 0.0);
            terms.push((self.param_diag(vb, i), m));
        }
        for j in 1..d {
            for i in 0..j {
                let mut re = CMat::zeros(d, d);
                re[(i, j)] = Complex64::new(1.0, 0.0);
                re[(j, i)] = Complex64::new(1.0, 0.0);
                terms.push((self.param_upper(vb, i, j), re));
                let mut im = CMat::zeros(d, d);
                im[(i, j)] = Complex64::new(0.0, 1.0);
                im[(j, i)] = Complex64::new(0.0, -1.0);
                terms.push((self.param_upper(vb, i, j) + 1, im));
            }
        }
        HermMatExpr {
            constant: CMat::zeros(d, d),
            terms,
        }
    }

    /// Adds `e` to the minimized objective.
    pub fn add_objective(&mut self, e: LinExpr) {
        let e = e.compressed();
        self.obj_const += e.constant;
        self.objective.terms.extend(e.terms);
    }

    /// Constrains `e == rhs`.
    pub fn add_eq(&mut self, e: LinExpr, rhs: f64) {
        self.eqs.push((e, rhs));
    }

    /// Constrains `e >= rhs`.
    pub fn add_ineq_ge(&mut self, e: LinExpr, rhs: f64) {
        self.ineqs.push((e, rhs));
    }

    /// Constrains a real symmetric affine matrix to be PSD.
    pub fn add_lmi_sym(&mut self, m: SymMatExpr) {
        self.sym_lmis.push(m);
    }

    /// Constrains a Hermitian affine matrix to be PSD.
    pub fn add_lmi_herm(&mut self, m: HermMatExpr) {
        assert_eq!(m.nrows(), m.ncols(), "LMI matrices must be square");
        self.herm_lmis.push(m);
    }

    /// Adds `weight * tr(V)` to the objective together with the constraint
    /// `[[V, I], [I, U]] >= 0`, so that at the optimum `tr(V) = tr(U^-1)`.
    /// Returns the auxiliary block `V`.
    pub fn epigraph_trace_inverse(&mut self, u: BlockId, weight: f64) -> BlockId {
        let d = self.dim(u);
        let kind = self.block(u).kind;
        match kind {
            VarKind::SymPsd(_) => {
                let v = self.symmetric_psd(d);
                let mut lmi = SymMatExpr::zeros(2 * d);
                for j in 0..d {
                    for i in 0..=j {
                        lmi.set(i, j, self.entry_re(v, i, j));
                        lmi.set(d + i, d + j, self.entry_re(u, i, j));
                    }
                    lmi.set(j, d + j, LinExpr::constant(1.0));
                }
                self.add_lmi_sym(lmi);
                self.add_objective(self.trace_expr(v) * weight);
                v
            }
            VarKind::HermPsd(_) | VarKind::HermFree(_) => {
                let v = self.hermitian_psd(d);
                let mut eye = CMat::zeros(2 * d, 2 * d);
                for i in 0..d {
                    eye[(i, d + i)] = Complex64::new(1.0, 0.0);
                    eye[(d + i, i)] = Complex64::new(1.0, 0.0);
                }
                let lmi = self
                    .matrix_expr(v)
                    .pad(2 * d, 2 * d, 0, 0)
                    .add_expr(&self.matrix_expr(u).pad(2 * d, 2 * d, d, d))
                    .shift(&eye);
                self.add_lmi_herm(lmi);
                self.add_objective(self.trace_expr(v) * weight);
                v
            }
            VarKind::Scalars(_) => panic!("trace inverse of a scalar block"),
        }
    }

    /// Adds `weight * ||E||_F^2` to the objective through an epigraph
    /// variable `t`, where `E` is a complex affine matrix expression.
    /// Returns the scalar block holding `t`.
    ///
    /// The affine map is first compressed by a column-pivoted QR so the PSD
    /// block has side `rank + 1` rather than the raw entry count of `E`.
    pub fn epigraph_frobenius(&mut self, e: &HermMatExpr, weight: f64) -> BlockId {
        let e = e.compressed();
        let (rows, cols) = (e.nrows(), e.ncols());
        let rc = rows * cols;
        let na = e.terms.len();

        // Real coordinates of the affine map [params; 1] -> vec(E).
        let mut m = DMatrix::zeros(2 * rc, na + 1);
        let vec_real = |mat: &CMat, col: &mut nalgebra::DVectorViewMut<f64>| {
            let mut k = 0;
            for j in 0..cols {
                for i in 0..rows {
                    col[k] = mat[(i, j)].re;
                    col[rc + k] = mat[(i, j)].im;
                    k += 1;
                }
            }
        };
        for (t, (_, mat)) in e.terms.iter().enumerate() {
            vec_real(mat, &mut m.column_mut(t));
        }
        vec_real(&e.constant, &mut m.column_mut(na));

        // Rank-revealing reduction: ||M v|| = ||R P' v|| for the QR factors.
        let w_aff = frobenius_reduction(m);
        let rank = w_aff.nrows();

        // Arrow matrix [[t, r(x)'], [r(x), I]] >= 0 encodes t >= ||r||^2
        // = ||E||_F^2 with the reduced coordinates r(x) spliced in directly.
        // Keeping the affine map inside the cone block (rather than behind
        // equality-linked auxiliaries) keeps the Newton normal matrix full
        // rank even when E involves otherwise unconstrained variables.
        let t = self.scalars(1);
        let mut lmi = SymMatExpr::zeros(rank + 1);
        lmi.set(0, 0, self.scalar_expr(t, 0));
        for i in 0..rank {
            let mut entry = LinExpr::constant(w_aff[(i, na)]);
            for (k, (p, _)) in e.terms.iter().enumerate() {
                if w_aff[(i, k)] != 0.0 {
                    entry = entry + LinExpr::term(*p, w_aff[(i, k)]);
                }
            }
            lmi.set(0, 1 + i, entry);
            lmi.set(1 + i, 1 + i, LinExpr::constant(1.0));
        }
        self.add_lmi_sym(lmi);
        self.add_objective(self.scalar_expr(t, 0) * weight);
        t
    }

    /// Lowers the program to solver standard form.
    pub fn compile(&self) -> CompiledProgram {
        let n = self.n;
        let mut c = DVector::zeros(n);
        for (p, v) in &self.objective.compressed().terms {
            c[*p] += v;
        }

        let mut blocks = Vec::new();
        let mut data = Vec::new();
        let mut h_parts: Vec<RVec> = Vec::new();

        // Scalar inequalities share one orthant block, each row rescaled to
        // unit leading magnitude.
        if !self.ineqs.is_empty() {
            let mut rows = Vec::with_capacity(self.ineqs.len());
            let mut hv = Vec::with_capacity(self.ineqs.len());
            for (e, rhs) in &self.ineqs {
                let e = e.compressed();
                let h_entry = e.constant - rhs;
                let scale = e
                    .terms
                    .iter()
                    .map(|t| t.1.abs())
                    .fold(h_entry.abs(), f64::max)
                    .max(1e-12);
                rows.push(
                    e.terms
                        .iter()
                        .map(|(p, v)| (*p, -v / scale))
                        .collect::<Vec<_>>(),
                );
                hv.push(h_entry / scale);
            }
            blocks.push(ConeBlock::NonNeg { len: rows.len() });
            data.push(BlockData::NonNeg { rows });
            h_parts.push(DVector::from_vec(hv));
        }

        // PSD-constrained variable blocks, in creation order.
        for vb in &self.vars {
            match vb.kind {
                VarKind::HermPsd(d) => {
                    let cols = herm_var_cols(vb.offset, d);
                    blocks.push(ConeBlock::Psd { dim: 2 * d });
                    data.push(BlockData::Psd { cols });
                    h_parts.push(DVector::zeros(svec_len(2 * d)));
                }
                VarKind::SymPsd(d) => {
                    let mut cols = Vec::new();
                    for i in 0..d {
                        cols.push((vb.offset + i, vec![(i as u32, i as u32, -1.0)]));
                    }
                    let mut p = vb.offset + d;
                    for j in 1..d {
                        for i in 0..j {
                            cols.push((
                                p,
                                vec![(i as u32, j as u32, -1.0), (j as u32, i as u32, -1.0)],
                            ));
                            p += 1;
                        }
                    }
                    blocks.push(ConeBlock::Psd { dim: d });
                    data.push(BlockData::Psd { cols });
                    h_parts.push(DVector::zeros(svec_len(d)));
                }
                VarKind::HermFree(_) | VarKind::Scalars(_) => {}
            }
        }

        // Real symmetric LMIs with per-row Jacobi rescaling.
        for lmi in &self.sym_lmis {
            let d = lmi.dim;
            let mut mag = vec![0.0f64; d];
            for j in 0..d {
                for i in 0..=j {
                    let e = lmi.entries[svec_row(i, j)].compressed();
                    let m = e
                        .terms
                        .iter()
                        .map(|t| t.1.abs())
                        .fold(e.constant.abs(), f64::max);
                    mag[i] = mag[i].max(m);
                    mag[j] = mag[j].max(m);
                }
            }
            let dsc: Vec<f64> = mag
                .iter()
                .map(|&m| if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 })
                .collect();
            let mut cols: BTreeMap<usize, PsdCoeffs> = BTreeMap::new();
            let mut cmat = DMatrix::zeros(d, d);
            for j in 0..d {
                for i in 0..=j {
                    let e = lmi.entries[svec_row(i, j)].compressed();
                    let sc = dsc[i] * dsc[j];
                    cmat[(i, j)] = e.constant * sc;
                    cmat[(j, i)] = e.constant * sc;
                    for (p, v) in &e.terms {
                        let gv = -v * sc;
                        let col = cols.entry(*p).or_default();
                        col.push((i as u32, j as u32, gv));
                        if i != j {
                            col.push((j as u32, i as u32, gv));
                        }
                    }
                }
            }
            blocks.push(ConeBlock::Psd { dim: d });
            data.push(BlockData::Psd {
                cols: cols.into_iter().collect(),
            });
            h_parts.push(svec_pack(&cmat));
        }

        // Hermitian LMIs: rescale at the complex level (so both embedding
        // halves stay consistent), then embed as real blocks of twice the
        // side.
        for lmi in &self.herm_lmis {
            let lmi = lmi.compressed();
            let d = lmi.nrows();
            let scale_probe = |m: &CMat, mag: &mut [f64]| {
                for j in 0..d {
                    for i in 0..d {
                        let v = m[(i, j)].norm();
                        mag[i] = mag[i].max(v);
                        mag[j] = mag[j].max(v);
                    }
                }
            };
            let mut mag = vec![0.0f64; d];
            scale_probe(&lmi.constant, &mut mag);
            for (_, m) in &lmi.terms {
                scale_probe(m, &mut mag);
            }
            let dsc: Vec<f64> = mag
                .iter()
                .map(|&m| if m > 0.0 { 1.0 / m.sqrt() } else { 1.0 })
                .collect();
            let rescale = |m: &CMat| {
                CMat::from_fn(d, d, |i, j| {
                    m[(i, j)] * Complex64::new(dsc[i] * dsc[j], 0.0)
                })
            };

            let c0 = rescale(&lmi.constant);
            let defect = hermitian_defect(&c0);
            assert!(
                defect <= 1e-9 * (1.0 + c0.norm()),
                "LMI constant must be Hermitian (defect {defect})"
            );
            let mut cols = Vec::with_capacity(lmi.terms.len());
            for (p, m) in &lmi.terms {
                let ms = rescale(m);
                let defect = hermitian_defect(&ms);
                assert!(
                    defect <= 1e-9 * (1.0 + ms.norm()),
                    "LMI coefficients must be Hermitian (defect {defect})"
                );
                let mut entries = Vec::new();
                herm_embed_entries(&ms, -1.0, &mut entries);
                cols.push((*p, entries));
            }
            blocks.push(ConeBlock::Psd { dim: 2 * d });
            data.push(BlockData::Psd { cols });
            h_parts.push(svec_pack(&herm_embed(&c0)));
        }

        // Equality rows, rescaled like the inequalities.
        let m_eq = self.eqs.len();
        let mut a = DMatrix::zeros(m_eq, n);
        let mut b = DVector::zeros(m_eq);
        for (r, (e, rhs)) in self.eqs.iter().enumerate() {
            let e = e.compressed();
            let target = rhs - e.constant;
            let scale = e
                .terms
                .iter()
                .map(|t| t.1.abs())
                .fold(target.abs(), f64::max)
                .max(1e-12);
            for (p, v) in &e.terms {
                a[(r, *p)] = v / scale;
            }
            b[r] = target / scale;
        }

        let total = h_parts.iter().map(|p| p.len()).sum();
        let mut h = DVector::zeros(total);
        let mut off = 0;
        for part in &h_parts {
            h.rows_mut(off, part.len()).copy_from(part);
            off += part.len();
        }

        CompiledProgram {
            sf: StandardForm::new(c, a, b, h, blocks, data),
            vars: self.vars.clone(),
            obj_const: self.obj_const,
        }
    }

    /// Compiles and solves the program.
    pub fn solve(&self, settings: &SolverSettings) -> ConicSolution {
        self.compile().solve(settings)
    }
}

/// Compresses a tall affine map to a short one with the same norms:
/// the result `W` satisfies `||W v|| = ||M v||` for every `v` and has
/// one row per numerically independent direction of `M`.
fn frobenius_reduction(m: RMat) -> RMat {
    let ncols = m.ncols();
    let qr = m.col_piv_qr();
    let mut r = qr.r();
    let kmax = r.nrows().min(ncols);
    let lead = r[(0, 0)].abs();
    let mut rank = 0;
    for k in 0..kmax {
        if r[(k, k)].abs() > 1e-12 * lead.max(1e-300) {
            rank = k + 1;
        }
    }
    let rank = rank.max(1);
    qr.p().inv_permute_columns(&mut r);
    r.rows(0, rank).into_owned()
}

/// Sparse embedded-cone columns of a Hermitian PSD variable block.
fn herm_var_cols(offset: usize, d: usize) -> Vec<(usize, PsdCoeffs)> {
    let dd = d as u32;
    let mut cols = Vec::with_capacity(herm_param_count(d));
    for i in 0..d as u32 {
        cols.push((
            offset + i as usize,
            vec![(i, i, -1.0), (dd + i, dd + i, -1.0)],
        ));
    }
    let mut p = offset + d;
    for j in 1..d as u32 {
        for i in 0..j {
            cols.push((
                p,
                vec![
                    (i, j, -1.0),
                    (j, i, -1.0),
                    (dd + i, dd + j, -1.0),
                    (dd + j, dd + i, -1.0),
                ],
            ));
            cols.push((
                p + 1,
                vec![
                    (i, dd + j, 1.0),
                    (dd + j, i, 1.0),
                    (j, dd + i, -1.0),
                    (dd + i, j, -1.0),
                ],
            ));
            p += 2;
        }
    }
    cols
}

/// Real symmetric embedding `[[Re M, -Im M], [Im M, Re M]]`.
fn herm_embed(m: &CMat) -> RMat {
    let d = m.nrows();
    let mut out = DMatrix::zeros(2 * d, 2 * d);
    for j in 0..d {
        for i in 0..d {
            let z = m[(i, j)];
            out[(i, j)] = z.re;
            out[(d + i, d + j)] = z.re;
            out[(i, d + j)] = -z.im;
            out[(d + i, j)] = z.im;
        }
    }
    out
}

/// Expanded sparse entries of `sign * embed(M)` for a Hermitian `M`.
fn herm_embed_entries(m: &CMat, sign: f64, out: &mut PsdCoeffs) {
    let d = m.nrows();
    let dd = d as u32;
    for j in 0..d {
        for i in 0..d {
            let z = m[(i, j)];
            let (iu, ju) = (i as u32, j as u32);
            if z.re != 0.0 {
                out.push((iu, ju, sign * z.re));
                out.push((dd + iu, dd + ju, sign * z.re));
            }
            if z.im != 0.0 {
                out.push((iu, dd + ju, -sign * z.im));
                out.push((dd + iu, ju, sign * z.im));
            }
        }
    }
}

/// A compiled program ready to solve.
pub struct CompiledProgram {
    pub sf: StandardForm,
    vars: Vec<VarBlock>,
    obj_const: f64,
}

impl CompiledProgram {
    pub fn solve(self, settings: &SolverSettings) -> ConicSolution {
        let raw = solver::solve(&self.sf, settings);
        ConicSolution {
            status: raw.status,
            objective: raw.primal_obj + self.obj_const,
            duality_gap: if raw.status == SolveStatus::Optimal {
                Some(raw.rel_gap)
            } else {
                None
            },
            raw,
            sf: self.sf,
            vars: self.vars,
        }
    }

    /// Human-readable shape description for logs and debugging.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.sf.shape_summary());
        out.push('\n');
        for (k, vb) in self.vars.iter().enumerate() {
            let desc = match vb.kind {
                VarKind::HermPsd(d) => format!("hermitian psd {d}x{d}"),
                VarKind::HermFree(d) => format!("hermitian free {d}x{d}"),
                VarKind::SymPsd(d) => format!("symmetric psd {d}x{d}"),
                VarKind::Scalars(c) => format!("{c} scalars"),
            };
            out.push_str(&format!(
                "  block {k}: {desc} at parameter offset {}\n",
                vb.offset
            ));
        }
        out
    }
}

/// Solved program with typed access to the variable blocks.
pub struct ConicSolution {
    pub status: SolveStatus,
    pub objective: f64,
    /// Relative duality gap, present only for optimal solves.
    pub duality_gap: Option<f64>,
    pub raw: RawSolution,
    sf: StandardForm,
    vars: Vec<VarBlock>,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    fn params(&self, vb: VarBlock) -> &[f64] {
        &self.raw.x.as_slice()[vb.offset..vb.offset + vb.kind.param_count()]
    }

    /// Value of a Hermitian block. PSD-constrained blocks are projected onto
    /// the cone to remove the solver's terminal rounding error.
    pub fn hermitian(&self, id: BlockId) -> CMat {
        let vb = self.vars[id.0];
        match vb.kind {
            VarKind::HermPsd(d) => crate::linalg::clip_psd(&params_to_herm(d, self.params(vb))),
            VarKind::HermFree(d) => params_to_herm(d, self.params(vb)),
            _ => panic!("hermitian() on a non-Hermitian block"),
        }
    }

    /// Value of a real symmetric block, projected onto the PSD cone.
    pub fn symmetric(&self, id: BlockId) -> RMat {
        let vb = self.vars[id.0];
        match vb.kind {
            VarKind::SymPsd(d) => {
                let m = params_to_sym(d, self.params(vb));
                let complex = CMat::from_fn(d, d, |i, j| Complex64::new(m[(i, j)], 0.0));
                crate::linalg::clip_psd(&complex).map(|z| z.re)
            }
            _ => panic!("symmetric() on a non-symmetric block"),
        }
    }

    pub fn scalar(&self, id: BlockId, k: usize) -> f64 {
        let vb = self.vars[id.0];
        match vb.kind {
            VarKind::Scalars(count) => {
                assert!(k < count);
                self.raw.x[vb.offset + k]
            }
            _ => panic!("scalar() on a matrix block"),
        }
    }

    /// Recomputes KKT residuals of the returned point from the compiled
    /// problem data.
    pub fn kkt(&self) -> KktReport {
        solver::check_kkt(&self.sf, &self.raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{herm_eigenvalues, CVec};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    fn pin_sym(pb: &mut ProgramBuilder, id: BlockId, m: &RMat) {
        for j in 0..m.ncols() {
            for i in 0..=j {
                pb.add_eq(pb.entry_re(id, i, j), m[(i, j)]);
            }
        }
    }

    #[test]
    fn trace_inverse_epigraph_matches_direct_inverse() {
        let u_val = dmatrix![2.0, 0.5; 0.5, 1.0];
        let mut pb = ProgramBuilder::new();
        let u = pb.symmetric_psd(2);
        pin_sym(&mut pb, u, &u_val);
        let v = pb.epigraph_trace_inverse(u, 1.0);
        let sol = pb.solve(&settings());
        assert!(sol.is_optimal(), "{}", sol.raw.message);
        let u_inv = u_val.try_inverse().unwrap();
        assert_relative_eq!(sol.objective, u_inv.trace(), max_relative = 1e-6);
        let v_val = sol.symmetric(v);
        assert_relative_eq!((v_val - u_inv).amax(), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn frobenius_epigraph_of_a_constant_matrix() {
        let mut e = CMat::zeros(2, 2);
        e[(0, 0)] = Complex64::new(0.0, 3.0);
        e[(1, 0)] = Complex64::new(4.0, 0.0);
        let mut pb = ProgramBuilder::new();
        // An unconstrained dummy keeps the program nonempty alongside t.
        let t = pb.epigraph_frobenius(&HermMatExpr::from_constant(e), 2.0);
        let sol = pb.solve(&settings());
        assert!(sol.is_optimal());
        assert_relative_eq!(sol.scalar(t, 0), 25.0, max_relative = 1e-6);
        assert_relative_eq!(sol.objective, 50.0, max_relative = 1e-6);
    }

    #[test]
    fn frobenius_reduction_preserves_norms() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // Rank-deficient tall map: 12 rows but only 3 independent columns.
        let basis = RMat::from_fn(12, 3, |_, _| rng.gen_range(-1.0..1.0));
        let mix = RMat::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let m = &basis * &mix;
        let w = frobenius_reduction(m.clone());
        assert_eq!(w.nrows(), 3);
        for _ in 0..10 {
            let v = RVec::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
            assert_relative_eq!((&w * &v).norm(), (&m * &v).norm(), max_relative = 1e-10);
        }
    }

    #[test]
    fn entrywise_product_matches_the_diagonal_congruence_sum() {
        use crate::linalg::cn_vector;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut pb = ProgramBuilder::new();
        let x = pb.hermitian_psd(4);
        let mut sum = HermMatExpr::zeros(4, 4);
        let mut gram = CMat::zeros(4, 4);
        for _ in 0..3 {
            let v: CVec = cn_vector(4, &mut rng);
            sum = sum.add_expr(&pb.matrix_expr(x).congruence(&CMat::from_diagonal(&v)));
            gram += &v * v.adjoint();
        }
        let had = pb.matrix_expr(x).hadamard(&gram).compressed();
        let sum = sum.compressed();
        assert_eq!(sum.terms.len(), had.terms.len());
        for ((pa, ma), (pb, mb)) in sum.terms.iter().zip(&had.terms) {
            assert_eq!(pa, pb);
            assert_relative_eq!((ma - mb).map(|z| z.norm()).amax(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn frobenius_epigraph_of_zero_costs_nothing() {
        let mut pb = ProgramBuilder::new();
        let t = pb.epigraph_frobenius(&HermMatExpr::zeros(3, 2), 1.0);
        let sol = pb.solve(&settings());
        assert!(sol.is_optimal());
        assert!(sol.scalar(t, 0).abs() < 1e-6);
    }

    #[test]
    fn least_squares_through_the_frobenius_epigraph() {
        use crate::linalg::cn_vector;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: CVec = cn_vector(4, &mut rng);
        let b: CVec = cn_vector(4, &mut rng);

        let mut pb = ProgramBuilder::new();
        let x = pb.scalars(1);
        // Keep the free scalar inside box constraints so it touches a cone.
        pb.add_ineq_ge(pb.scalar_expr(x, 0), -10.0);
        pb.add_ineq_ge(LinExpr::constant(10.0) - pb.scalar_expr(x, 0), 0.0);
        let mut e = HermMatExpr::zeros(4, 1);
        e.terms.push((
            pb.scalar_expr(x, 0).terms[0].0,
            CMat::from_column_slice(4, 1, a.as_slice()),
        ));
        e = e.shift(&CMat::from_column_slice(4, 1, (-&b).as_slice()));
        pb.epigraph_frobenius(&e, 1.0);
        let sol = pb.solve(&settings());
        assert!(sol.is_optimal());

        let x_star = a.dotc(&b).re / a.norm_squared();
        let resid = &a * Complex64::new(x_star, 0.0) - &b;
        // The quadratic is flat around its minimizer, so the recovered x is
        // only accurate to the square root of the duality gap rather than
        // matching the objective's digits.
        assert_relative_eq!(sol.scalar(x, 0), x_star, max_relative = 2e-4);
        assert_relative_eq!(sol.objective, resid.norm_squared(), max_relative = 1e-6);
    }

    #[test]
    fn hermitian_dominance_recovers_the_bound() {
        use crate::linalg::cn_vector;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let v = cn_vector(3, &mut rng);
        let w = cn_vector(3, &mut rng);
        let c_mat = &v * v.adjoint() + &w * w.adjoint();

        let mut pb = ProgramBuilder::new();
        let x = pb.hermitian_psd(3);
        // X - C >= 0 with tr(X) minimized forces X = C.
        let lmi = pb.matrix_expr(x).shift(&(-&c_mat));
        pb.add_lmi_herm(lmi);
        pb.add_objective(pb.trace_expr(x));
        let sol = pb.solve(&settings());
        assert!(sol.is_optimal());
        assert_relative_eq!(sol.objective, c_mat.trace().re, max_relative = 1e-6);
        let x_val = sol.hermitian(x);
        assert_relative_eq!((&x_val - &c_mat).norm(), 0.0, epsilon = 1e-4);
    }

    #[test]
    fn largest_eigenvalue_as_a_trace_program() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let raw = crate::linalg::cn_matrix(4, 4, &mut rng);
        let c_mat = crate::linalg::hermitize(&raw);

        let mut pb = ProgramBuilder::new();
        let q = pb.hermitian_psd(4);
        pb.add_eq(pb.trace_expr(q), 1.0);
        pb.add_objective(-pb.re_trace_product(q, &c_mat));
        let sol = pb.solve(&settings());
        assert!(sol.is_optimal());

        let lam_max = herm_eigenvalues(&c_mat)[3];
        assert_relative_eq!(-sol.objective, lam_max, max_relative = 1e-6);
        let report = sol.kkt();
        assert!(report.dual_residual < 1e-6);
        assert!(report.s_min_eig > -1e-8);
        assert!(sol.duality_gap.unwrap() < 1e-6);
    }

    #[test]
    fn conflicting_equality_is_reported_infeasible() {
        let mut pb = ProgramBuilder::new();
        let x = pb.symmetric_psd(1);
        pb.add_eq(pb.entry_re(x, 0, 0), -1.0);
        pb.add_objective(pb.trace_expr(x));
        let sol = pb.solve(&settings());
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn imaginary_trace_functional_matches_dense_arithmetic() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let c = crate::linalg::cn_matrix(3, 3, &mut rng);
        let x_val = {
            let raw = crate::linalg::cn_matrix(3, 3, &mut rng);
            crate::linalg::hermitize(&raw)
        };

        let mut pb = ProgramBuilder::new();
        let x = pb.hermitian_free(3);
        for j in 0..3 {
            pb.add_eq(pb.entry_re(x, j, j), x_val[(j, j)].re);
            for i in 0..j {
                pb.add_eq(pb.entry_re(x, i, j), x_val[(i, j)].re);
                pb.add_eq(pb.entry_im(x, i, j), x_val[(i, j)].im);
            }
        }
        let re = pb.re_trace_product(x, &c);
        let im = pb.im_trace_product(x, &c);
        let t = pb.scalars(2);
        pb.add_eq(pb.scalar_expr(t, 0) - re, 0.0);
        pb.add_eq(pb.scalar_expr(t, 1) - im, 0.0);
        // Bound the pinned scalars so every parameter meets a cone.
        for k in 0..2 {
            pb.add_ineq_ge(pb.scalar_expr(t, k), -100.0);
            pb.add_ineq_ge(LinExpr::constant(100.0) - pb.scalar_expr(t, k), 0.0);
        }
        let lmi = pb.matrix_expr(x);
        let shift = CMat::identity(3, 3) * Complex64::new(100.0, 0.0);
        pb.add_lmi_herm(lmi.shift(&shift));
        let sol = pb.solve(&settings());
        assert!(sol.is_optimal(), "{}", sol.raw.message);

        let expected = (&c * &x_val).trace();
        assert_relative_eq!(sol.scalar(t, 0), expected.re, epsilon = 1e-5);
        assert_relative_eq!(sol.scalar(t, 1), expected.im, epsilon = 1e-5);
    }
}
