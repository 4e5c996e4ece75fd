//! Finite-size treatment of two coupled collective spins.
//!
//! The master equation is restricted to the maximal-spin sector of each
//! ensemble (dimension `N_α + 1`) and vectorised by column stacking:
//! `vec(AρB) = (Bᵀ ⊗ A) vec(ρ)`, so entry `ρ[i, j]` sits at index `j·D + i`
//! where `D = (N_A+1)(N_B+1)`. Hilbert-space index is `i_A·(N_B+1) + i_B`
//! and spin basis index `i` carries `m = S − i`, so index 0 is the fully
//! polarised state.
//!
//! Slow spectra come either from dense diagonalisation or from shift-invert
//! Arnoldi iterations at several shifts along the imaginary axis.

use std::io::Write;

use faer::linalg::solvers::{Solve, SolveLstsq};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{dop853, IntegrationConfig, OdeSystem, StepFailure};
use crate::model::{CouplingKind, NetworkParams};

/// Default largest Liouvillian dimension handled by dense diagonalisation.
pub const DEFAULT_DENSE_CAP: usize = 1296;
/// Environment variable overriding [`DEFAULT_DENSE_CAP`].
pub const DENSE_CAP_ENV: &str = "TIMESEED_DENSE_CAP";
/// Largest Liouvillian dimension [`build_liouvillian`] will assemble.
pub const DEFAULT_ASSEMBLY_CAP: usize = 400_000;
pub const IM_TOL: f64 = 1e-7;
pub const ZERO_TOL: f64 = 1e-10;

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DickeSpace {
    pub n_a: usize,
    pub n_b: usize,
}

impl DickeSpace {
    pub fn new(n_a: usize, n_b: usize) -> Result<Self> {
        if n_a == 0 || n_b == 0 {
            return Err(Error::invalid("atom numbers must be positive"));
        }
        Ok(Self { n_a, n_b })
    }

    /// Equal split of an even total atom number.
    pub fn symmetric(n_total: usize) -> Result<Self> {
        if n_total < 2 || n_total % 2 != 0 {
            return Err(Error::invalid(format!(
                "total atom number must be even and >= 2, got {n_total}"
            )));
        }
        Self::new(n_total / 2, n_total / 2)
    }

    /// Atom numbers taken from the `n_spins` of a two-ensemble network.
    pub fn from_params(params: &NetworkParams) -> Result<Self> {
        if params.n() != 2 {
            return Err(Error::Unsupported(format!(
                "finite-size treatment needs two ensembles, got {}",
                params.n()
            )));
        }
        Self::new(params.ensembles[0].n_spins, params.ensembles[1].n_spins)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_a + 1, self.n_b + 1)
    }

    pub fn n_total(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn hilbert_dim(&self) -> usize {
        (self.n_a + 1) * (self.n_b + 1)
    }

    pub fn liouvillian_dim(&self) -> usize {
        self.hilbert_dim().pow(2)
    }

    /// `(m_A/S_A, m_B/S_B)` of Hilbert-space basis state `idx`.
    fn rescaled_mz(&self, idx: usize) -> (f64, f64) {
        let db = self.n_b + 1;
        let (ia, ib) = (idx / db, idx % db);
        (
            1.0 - 2.0 * ia as f64 / self.n_a as f64,
            1.0 - 2.0 * ib as f64 / self.n_b as f64,
        )
    }
}

/// Complex sparse matrix in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<Complex64>,
}

impl SparseMatrix {
    /// Sums duplicate entries and drops exact zeros.
    pub fn from_triplets(dim: usize, mut entries: Vec<(usize, usize, Complex64)>) -> Self {
        entries.sort_unstable_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<Complex64> = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            if rows.last() == Some(&r) && col_idx.last() == Some(&c) {
                *values.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                col_idx.push(c);
                values.push(v);
            }
        }
        let keep: Vec<bool> = values.iter().map(|v| *v != ZERO).collect();
        let mut k = 0;
        rows.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        let mut k = 0;
        col_idx.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        values.retain(|v| *v != ZERO);
        for &r in &rows {
            row_ptr[r + 1] += 1;
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.col_idx[range.clone()].binary_search(&col) {
            Ok(k) => self.values[range.start + k],
            Err(_) => ZERO,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    pub fn to_dense(&self) -> Mat<Complex64> {
        let mut m = Mat::<Complex64>::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    /// `A − σI` in faer's compressed-column form.
    fn shifted_csc(&self, sigma: Complex64) -> Result<SparseColMat<usize, Complex64>> {
        let mut trip: Vec<Triplet<usize, usize, Complex64>> = self
            .entries()
            .map(|(r, c, v)| Triplet::new(r, c, v))
            .collect();
        trip.extend((0..self.dim).map(|i| Triplet::new(i, i, -sigma)));
        SparseColMat::try_new_from_triplets(self.dim, self.dim, &trip)
            .map_err(|e| Error::Solver(format!("sparse assembly failed: {e:?}")))
    }

    /// One `row col re im` line per stored entry, zero-based indices,
    /// 17 significant digits.
    pub fn write_coordinate<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "% {} {} {}", self.dim, self.dim, self.nnz())?;
        for (r, c, v) in self.entries() {
            writeln!(w, "{r} {c} {:.16e} {:.16e}", v.re, v.im)?;
        }
        Ok(())
    }
}

/// Dense Hilbert-space operator.
type Op = Mat<Complex64>;

/// Lowering operator of a spin `S = n/2` in the basis `m = S, S−1, …, −S`.
fn lowering(n: usize) -> Op {
    let s = n as f64 / 2.0;
    let mut op = Op::zeros(n + 1, n + 1);
    for i in 0..n {
        let m = s - i as f64;
        op[(i + 1, i)] = Complex64::new((s * (s + 1.0) - m * (m - 1.0)).sqrt(), 0.0);
    }
    op
}

fn kron(a: &Op, b: &Op) -> Op {
    let (ra, ca) = (a.nrows(), a.ncols());
    let (rb, cb) = (b.nrows(), b.ncols());
    Op::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

fn adjoint(a: &Op) -> Op {
    Op::from_fn(a.ncols(), a.nrows(), |i, j| a[(j, i)].conj())
}

fn nonzeros(a: &Op) -> Vec<(usize, usize, Complex64)> {
    let mut out = Vec::new();
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let v = a[(i, j)];
            if v != ZERO {
                out.push((i, j, v));
            }
        }
    }
    out
}

/// Pushes the superoperator `ρ ↦ coeff·AρB`.
fn push_sandwich(
    out: &mut Vec<(usize, usize, Complex64)>,
    d: usize,
    coeff: Complex64,
    a: &[(usize, usize, Complex64)],
    b: &[(usize, usize, Complex64)],
) {
    // (Bᵀ ⊗ A)[(j, i), (l, k)] = B[l, j]·A[i, k]
    for &(l, j, bv) in b {
        for &(i, k, av) in a {
            out.push((j * d + i, l * d + k, coeff * bv * av));
        }
    }
}

/// Hilbert-space operators of the two-ensemble problem.
struct Operators {
    h: Op,
    jumps: Vec<(f64, Op)>,
}

fn operators(params: &NetworkParams, space: &DickeSpace) -> Result<Operators> {
    params.validate()?;
    if params.n() != 2 {
        return Err(Error::Unsupported(format!(
            "finite-size treatment needs two ensembles, got {}",
            params.n()
        )));
    }
    let (da, db) = space.dims();
    let (sa, sb) = (space.n_a as f64 / 2.0, space.n_b as f64 / 2.0);
    let ida = Op::identity(da, da);
    let idb = Op::identity(db, db);
    let lower_a = kron(&lowering(space.n_a), &idb);
    let lower_b = kron(&ida, &lowering(space.n_b));
    let raise_a = adjoint(&lower_a);
    let raise_b = adjoint(&lower_b);
    let half = Complex64::new(0.5, 0.0);

    let (ea, eb) = (&params.ensembles[0], &params.ensembles[1]);
    let sx_a = (&lower_a + &raise_a) * faer::Scale(half);
    let sx_b = (&lower_b + &raise_b) * faer::Scale(half);
    let mut h = &sx_a * faer::Scale(Complex64::new(ea.omega, 0.0))
        + &sx_b * faer::Scale(Complex64::new(eb.omega, 0.0));
    let mut jumps = vec![(ea.kappa / sa, lower_a.clone()), (eb.kappa / sb, lower_b.clone())];

    let s_total = sa + sb;
    let strength = params.coupling.strength;
    if strength > 0.0 {
        match params.coupling.kind {
            CouplingKind::Dissipative => {
                jumps.push((strength / s_total, &lower_a + &lower_b));
            }
            CouplingKind::Coherent => {
                let exchange = &raise_a * &lower_b + &lower_a * &raise_b;
                h += exchange * faer::Scale(Complex64::new(strength / (2.0 * s_total), 0.0));
            }
        }
    }
    Ok(Operators { h, jumps })
}

pub fn build_liouvillian(params: &NetworkParams, space: &DickeSpace) -> Result<SparseMatrix> {
    build_liouvillian_capped(params, space, DEFAULT_ASSEMBLY_CAP)
}

/// Assembles the Liouvillian, refusing dimensions above `cap`.
pub fn build_liouvillian_capped(
    params: &NetworkParams,
    space: &DickeSpace,
    cap: usize,
) -> Result<SparseMatrix> {
    let dim = space.liouvillian_dim();
    if dim > cap {
        return Err(Error::Resource(format!(
            "Liouvillian dimension {dim} exceeds the assembly cap {cap}"
        )));
    }
    let ops = operators(params, space)?;
    let d = space.hilbert_dim();
    let id = nonzeros(&Op::identity(d, d));
    let mut trip = Vec::new();

    let h = nonzeros(&ops.h);
    push_sandwich(&mut trip, d, -I, &h, &id);
    push_sandwich(&mut trip, d, I, &id, &h);
    for (rate, c) in &ops.jumps {
        let cd = adjoint(c);
        let cdc = nonzeros(&(&cd * c));
        let rate = Complex64::new(*rate, 0.0);
        push_sandwich(&mut trip, d, rate, &nonzeros(c), &nonzeros(&cd));
        push_sandwich(&mut trip, d, -0.5 * rate, &cdc, &id);
        push_sandwich(&mut trip, d, -0.5 * rate, &id, &cdc);
    }
    Ok(SparseMatrix::from_triplets(dim, trip))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverPath {
    Dense,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    pub dense_cap: usize,
    pub im_tol: f64,
    pub zero_tol: f64,
    /// Upper end of the imaginary-axis strip covered by shifts.
    pub im_span: f64,
    /// Spacing of shifts along the imaginary axis.
    pub shift_spacing: f64,
    /// Real part of every shift; keeps `L − σ` away from the steady state.
    pub shift_re: f64,
    pub nev_per_shift: usize,
    pub krylov_dim: usize,
    pub max_restarts: usize,
    /// Ritz pairs count as converged when `|h·y_m| < tol·|θ|²`.
    pub tol: f64,
    /// Force a path regardless of `dense_cap`.
    pub force: Option<SolverPath>,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            dense_cap: DEFAULT_DENSE_CAP,
            im_tol: IM_TOL,
            zero_tol: ZERO_TOL,
            im_span: 1.5,
            shift_spacing: 1.5,
            shift_re: 0.25,
            nev_per_shift: 20,
            krylov_dim: 60,
            max_restarts: 200,
            tol: 1e-10,
            force: None,
        }
    }
}

impl SpectrumOptions {
    /// Defaults with `dense_cap` read from `TIMESEED_DENSE_CAP` when set.
    pub fn from_env() -> Result<Self> {
        let mut opts = Self::default();
        if let Ok(raw) = std::env::var(DENSE_CAP_ENV) {
            opts.dense_cap = raw.trim().parse().map_err(|_| {
                Error::invalid(format!("{DENSE_CAP_ENV} must be a non-negative integer, got {raw:?}"))
            })?;
        }
        Ok(opts)
    }

    /// Shift strip wide enough for the drives of `params`.
    pub fn covering(mut self, params: &NetworkParams) -> Self {
        let w = params.omegas().into_iter().fold(0.0, f64::max);
        self.im_span = self.im_span.max(w);
        self
    }

    fn shifts(&self) -> Vec<Complex64> {
        // centred in equal slices of [0, im_span]
        let count = ((self.im_span / self.shift_spacing - 1e-9).ceil() as usize).max(1);
        let width = self.im_span / count as f64;
        (0..count)
            .map(|j| Complex64::new(self.shift_re, (j as f64 + 0.5) * width))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub dim: usize,
    pub path: SolverPath,
    /// Largest real part first.
    pub eigenvalues: Vec<Complex64>,
    pub dominant: Option<Complex64>,
    pub second_dominant: Option<Complex64>,
    pub steady_count: usize,
    /// Largest `‖Lx − λx‖/‖x‖` over the returned pairs (iterative path only).
    pub max_residual: Option<f64>,
}

fn sort_by_re_desc(v: &mut [Complex64]) {
    v.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
}

fn finish(
    dim: usize,
    path: SolverPath,
    mut all: Vec<Complex64>,
    k: usize,
    opts: &SpectrumOptions,
    max_residual: Option<f64>,
) -> SpectrumResult {
    sort_by_re_desc(&mut all);
    let mut oscillating = all.iter().filter(|l| l.im > opts.im_tol);
    let dominant = oscillating.next().copied();
    let second_dominant = oscillating.next().copied();
    let steady_count = all.iter().filter(|l| l.norm() < opts.zero_tol).count();
    all.truncate(k);
    SpectrumResult {
        dim,
        path,
        eigenvalues: all,
        dominant,
        second_dominant,
        steady_count,
        max_residual,
    }
}

/// The `k` eigenvalues of largest real part, plus the dominant oscillating
/// pair. Dominant selection looks at every eigenvalue the solver produced,
/// not only the `k` returned.
pub fn slow_spectrum(l: &SparseMatrix, k: usize, opts: &SpectrumOptions) -> Result<SpectrumResult> {
    if k < 3 {
        return Err(Error::invalid(format!("need k >= 3, got {k}")));
    }
    let path = opts.force.unwrap_or(if l.dim <= opts.dense_cap {
        SolverPath::Dense
    } else {
        SolverPath::Iterative
    });
    match path {
        SolverPath::Dense => {
            let ev = dense_eigenvalues(l)?;
            Ok(finish(l.dim, path, ev, k, opts, None))
        }
        SolverPath::Iterative => {
            let (ev, res) = shift_invert_eigenvalues(l, opts)?;
            Ok(finish(l.dim, path, ev, k, opts, Some(res)))
        }
    }
}

pub fn dense_eigenvalues(l: &SparseMatrix) -> Result<Vec<Complex64>> {
    let ev = l
        .to_dense()
        .eigenvalues()
        .map_err(|e| Error::Solver(format!("dense eigensolver failed: {e:?}")))?;
    if ev.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Solver("dense eigensolver returned non-finite values".into()));
    }
    Ok(ev)
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Deterministic, generic start vector.
fn start_vector(n: usize) -> Vec<Complex64> {
    let mut v: Vec<Complex64> = (0..n)
        .map(|i| {
            let t = i as f64 + 1.0;
            Complex64::new((t * 0.754_877_666).sin() + 0.3, (t * 0.569_840_29).cos())
        })
        .collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Eigenvalues of `l` nearest to each shift, merged with their conjugates.
/// Returns the eigenvalues and the largest true residual.
pub fn shift_invert_eigenvalues(l: &SparseMatrix, opts: &SpectrumOptions) -> Result<(Vec<Complex64>, f64)> {
    let n = l.dim;
    let nev = opts.nev_per_shift.min(n.saturating_sub(2)).max(1);
    let m = opts.krylov_dim.max(2 * nev + 8).min(n);
    if m <= nev {
        return Err(Error::invalid("matrix too small for the iterative path"));
    }
    let mut found: Vec<(Complex64, f64)> = Vec::new();
    for sigma in opts.shifts() {
        let lu = l
            .shifted_csc(sigma)?
            .sp_lu()
            .map_err(|e| Error::Solver(format!("sparse LU at shift {sigma} failed: {e:?}")))?;
        let apply = |x: &[Complex64], y: &mut [Complex64]| {
            y.copy_from_slice(x);
            lu.solve_in_place(faer::MatMut::from_column_major_slice_mut(y, n, 1));
        };
        let pairs = arnoldi(n, m, nev, opts, apply).map_err(|e| match e {
            Error::Solver(msg) => Error::Solver(format!("shift {sigma}: {msg}")),
            other => other,
        })?;
        let mut lx = vec![ZERO; n];
        for (theta, x) in pairs {
            let lambda = sigma + 1.0 / theta;
            l.matvec(&x, &mut lx);
            let res = lx
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - lambda * b).norm_sqr())
                .sum::<f64>()
                .sqrt()
                / norm(&x);
            found.push((lambda, res));
            found.push((lambda.conj(), res));
        }
    }
    // merge duplicates from overlapping shifts, keeping the best residual
    found.sort_by(|a, b| b.0.re.total_cmp(&a.0.re));
    let mut merged: Vec<(Complex64, f64)> = Vec::new();
    for (lambda, res) in found {
        let dup = merged
            .iter_mut()
            .find(|(mu, _)| (*mu - lambda).norm() < 1e-8 * (1.0 + lambda.norm()));
        match dup {
            Some(entry) => {
                if res < entry.1 {
                    *entry = (lambda, res);
                }
            }
            None => merged.push((lambda, res)),
        }
    }
    let max_res = merged.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok((merged.into_iter().map(|p| p.0).collect(), max_res))
}

/// Thick-restart Arnoldi for the `nev` largest-magnitude eigenvalues of the
/// operator `apply`. Returns Ritz values with their Ritz vectors.
fn arnoldi<F>(n: usize, m: usize, nev: usize, opts: &SpectrumOptions, apply: F) -> Result<Vec<(Complex64, Vec<Complex64>)>>
where
    F: Fn(&[Complex64], &mut [Complex64]),
{
    let keep = (nev + 4).min(m / 2).max(nev);
    let mut basis: Vec<Vec<Complex64>> = vec![start_vector(n)];
    let mut h = Mat::<Complex64>::zeros(m + 1, m);
    let mut p = 0;
    let mut w = vec![ZERO; n];
    for restart in 0..=opts.max_restarts {
        let mut size = m;
        for j in p..m {
            apply(&basis[j], &mut w);
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate().take(j + 1) {
                    let c = dot(v, &w);
                    h[(i, j)] += c;
                    w.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
                }
            }
            let beta = norm(&w);
            h[(j + 1, j)] = Complex64::new(beta, 0.0);
            if !beta.is_finite() {
                return Err(Error::Solver("non-finite Krylov vector".into()));
            }
            if beta < 1e-14 {
                // invariant subspace: Ritz values are exact
                size = j + 1;
                break;
            }
            let next: Vec<Complex64> = w.iter().map(|x| x / beta).collect();
            if basis.len() > j + 1 {
                basis[j + 1] = next;
            } else {
                basis.push(next);
            }
        }

        let hm = Mat::from_fn(size, size, |i, j| h[(i, j)]);
        let eig = hm
            .eigen()
            .map_err(|e| Error::Solver(format!("projected eigenproblem failed: {e:?}")))?;
        let (u, s) = (eig.U(), eig.S());
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| s[b].norm().total_cmp(&s[a].norm()));
        let beta = h[(size, size - 1)].norm();
        let col_norm = |c: usize| (0..size).map(|i| u[(i, c)].norm_sqr()).sum::<f64>().sqrt();
        let residual = |c: usize| beta * u[(size - 1, c)].norm() / col_norm(c);
        let wanted = &order[..nev.min(size)];
        let converged = size < m || wanted.iter().all(|&c| residual(c) < opts.tol * s[c].norm_sqr());

        if converged || restart == opts.max_restarts {
            if !converged {
                let worst = wanted
                    .iter()
                    .map(|&c| residual(c) / s[c].norm_sqr())
                    .fold(0.0, f64::max);
                return Err(Error::Solver(format!(
                    "Arnoldi did not converge after {} restarts (worst scaled residual {worst:.3e}, tol {:.1e})",
                    opts.max_restarts, opts.tol
                )));
            }
            return Ok(wanted
                .iter()
                .map(|&c| {
                    let mut x = vec![ZERO; n];
                    for i in 0..size {
                        let coef = u[(i, c)];
                        x.iter_mut().zip(&basis[i]).for_each(|(a, b)| *a += coef * b);
                    }
                    (s[c], x)
                })
                .collect());
        }

        // orthonormalise the kept Ritz vectors: Y = QR
        let kept = &order[..keep];
        let mut q: Vec<Vec<Complex64>> = Vec::with_capacity(keep);
        for &c in kept {
            let mut y: Vec<Complex64> = (0..m).map(|i| u[(i, c)]).collect();
            for _ in 0..2 {
                for prev in &q {
                    let d = dot(prev, &y);
                    y.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
                }
            }
            let ny = norm(&y);
            y.iter_mut().for_each(|a| *a /= ny);
            q.push(y);
        }
        // T = Qᴴ H_m Q
        let hq: Vec<Vec<Complex64>> = q
            .iter()
            .map(|qc| (0..m).map(|i| (0..m).map(|k| h[(i, k)] * qc[k]).sum()).collect())
            .collect();
        let mut new_h = Mat::<Complex64>::zeros(m + 1, m);
        for a in 0..keep {
            for b in 0..keep {
                new_h[(a, b)] = dot(&q[a], &hq[b]);
            }
            new_h[(keep, a)] = h[(m, m - 1)] * q[a][m - 1];
        }
        let new_basis: Vec<Vec<Complex64>> = q
            .iter()
            .map(|qc| {
                let mut x = vec![ZERO; n];
                for (i, coef) in qc.iter().enumerate() {
                    x.iter_mut().zip(&basis[i]).for_each(|(a, b)| *a += coef * b);
                }
                x
            })
            .collect();
        let residual_vec = std::mem::take(&mut basis[m]);
        basis = new_basis;
        basis.push(residual_vec);
        h = new_h;
        p = keep;
    }
    unreachable!("loop returns on its last iteration")
}

/// Liouvillian plus slow spectrum for one finite size.
pub fn spectrum_at(
    params: &NetworkParams,
    space: &DickeSpace,
    k: usize,
    opts: &SpectrumOptions,
) -> Result<SpectrumResult> {
    let l = build_liouvillian(params, space)?;
    slow_spectrum(&l, k, &opts.clone().covering(params))
}

/// Spectra along a ladder of even total atom numbers. Sizes are processed
/// concurrently when the `parallel` feature is on.
pub fn spectrum_ladder(
    params: &NetworkParams,
    sizes: &[usize],
    k: usize,
    opts: &SpectrumOptions,
) -> Result<Vec<SpectrumResult>> {
    let job = |&n: &usize| spectrum_at(params, &DickeSpace::symmetric(n)?, k, opts);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        sizes.par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        sizes.iter().map(job).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// `a_0 … a_μ` of `F(N) = Σ a_i / N^i`.
    pub coefficients: Vec<f64>,
    pub mu: usize,
    /// Root-mean-square misfit at the input sizes.
    pub residual: f64,
    pub extrapolated: f64,
}

impl ScalingFit {
    pub fn eval(&self, n: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, a| acc / n + a)
    }
}

/// Least-squares fit of `values` in powers of `1/N` up to order `mu`.
pub fn scaling_fit(sizes: &[usize], values: &[f64], mu: usize) -> Result<ScalingFit> {
    if sizes.len() != values.len() {
        return Err(Error::invalid("sizes and values differ in length"));
    }
    let mut distinct = sizes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != sizes.len() || sizes.contains(&0) {
        return Err(Error::invalid("sizes must be distinct and positive"));
    }
    if sizes.len() < mu + 1 {
        return Err(Error::invalid(format!(
            "order {mu} fit needs at least {} sizes, got {}",
            mu + 1,
            sizes.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("values must be finite"));
    }
    // columns in x = N_min/N keep the design matrix well scaled
    let n_min = distinct[0] as f64;
    let rows = sizes.len();
    let a = Mat::<f64>::from_fn(rows, mu + 1, |r, c| (n_min / sizes[r] as f64).powi(c as i32));
    let mut rhs = Mat::<f64>::from_fn(rows, 1, |r, _| values[r]);
    a.qr().solve_lstsq_in_place(&mut rhs);
    let coefficients: Vec<f64> = (0..=mu).map(|c| rhs[(c, 0)] * n_min.powi(c as i32)).collect();
    let mut fit = ScalingFit {
        extrapolated: coefficients[0],
        coefficients,
        mu,
        residual: 0.0,
    };
    fit.residual = (sizes
        .iter()
        .zip(values)
        .map(|(&n, v)| (fit.eval(n as f64) - v).powi(2))
        .sum::<f64>()
        / rows as f64)
        .sqrt();
    if !fit.residual.is_finite() {
        return Err(Error::Numerical("scaling fit produced non-finite residual".into()));
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSizeSeries {
    pub times: Vec<f64>,
    /// `⟨S^z_α⟩/S_α` per sample, one entry per ensemble.
    pub mz: Vec<[f64; 2]>,
    pub trace: Vec<f64>,
}

struct Liouville<'a> {
    l: &'a SparseMatrix,
}

impl OdeSystem for Liouville<'_> {
    fn dim(&self) -> usize {
        2 * self.l.dim
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        for r in 0..self.l.dim {
            let mut acc = ZERO;
            for k in self.l.row_ptr[r]..self.l.row_ptr[r + 1] {
                let c = self.l.col_idx[k];
                acc += self.l.values[k] * Complex64::new(y[2 * c], y[2 * c + 1]);
            }
            dy[2 * r] = acc.re;
            dy[2 * r + 1] = acc.im;
        }
    }
}

/// Column-stacked density matrix of the fully polarised product state.
pub fn polarized_density(space: &DickeSpace) -> Vec<Complex64> {
    let mut rho = vec![ZERO; space.liouvillian_dim()];
    rho[0] = Complex64::new(1.0, 0.0);
    rho
}

/// Integrates the master equation and records `⟨S^z_α⟩/S_α` and `Tr ρ`.
/// `initial` is a column-stacked density matrix; `None` means fully polarised.
pub fn finite_size_trajectory(
    params: &NetworkParams,
    space: &DickeSpace,
    initial: Option<&[Complex64]>,
    cfg: &IntegrationConfig,
    dense_cap: usize,
) -> Result<FiniteSizeSeries> {
    cfg.validate()?;
    let dim = space.liouvillian_dim();
    if dim > dense_cap {
        return Err(Error::Resource(format!(
            "Liouvillian dimension {dim} exceeds the direct-integration cap {dense_cap}"
        )));
    }
    let rho0 = match initial {
        Some(r) if r.len() != dim => {
            return Err(Error::invalid(format!(
                "initial density has {} entries, expected {dim}",
                r.len()
            )))
        }
        Some(r) => r.to_vec(),
        None => polarized_density(space),
    };
    let l = build_liouvillian(params, space)?;
    let d = space.hilbert_dim();
    let diag: Vec<(f64, f64)> = (0..d).map(|i| space.rescaled_mz(i)).collect();
    let y0: Vec<f64> = rho0.iter().flat_map(|z| [z.re, z.im]).collect();

    let mut series = FiniteSizeSeries {
        times: Vec::with_capacity(cfg.sample_count()),
        mz: Vec::with_capacity(cfg.sample_count()),
        trace: Vec::with_capacity(cfg.sample_count()),
    };
    let outcome = dop853(
        &Liouville { l: &l },
        &y0,
        cfg.t_end,
        cfg.dt_out,
        cfg.rel_tol,
        cfg.abs_tol,
        cfg.max_steps,
        |t, y| {
            let (mut tr, mut za, mut zb) = (0.0, 0.0, 0.0);
            for (i, &(ma, mb)) in diag.iter().enumerate() {
                let p = y[2 * (i * d + i)];
                tr += p;
                za += p * ma;
                zb += p * mb;
            }
            series.times.push(t);
            series.trace.push(tr);
            series.mz.push([za, zb]);
        },
    );
    match outcome {
        Ok(_) => Ok(series),
        Err(StepFailure::Budget { t }) => Err(Error::Numerical(format!(
            "step budget {} exhausted at t = {t}",
            cfg.max_steps
        ))),
        Err(StepFailure::NonFinite { t }) => Err(Error::Numerical(format!("non-finite density at t = {t}"))),
        Err(StepFailure::StepUnderflow { t }) => Err(Error::Numerical(format!("step size underflow at t = {t}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CouplingSpec;

    fn pair(wa: f64, wb: f64, coupling: CouplingSpec) -> NetworkParams {
        NetworkParams::from_omegas(&[wa, wb], 1.0, coupling).unwrap()
    }

    fn trace_row_sums(l: &SparseMatrix, d: usize) -> f64 {
        // vec(I)ᵀ L: sum the rows that hold diagonal entries of ρ
        let mut sums = vec![ZERO; l.dim];
        for (r, c, v) in l.entries() {
            if r % d == r / d {
                sums[c] += v;
            }
        }
        sums.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn smallest_space_is_trace_preserving() {
        let space = DickeSpace::new(1, 1).unwrap();
        for coupling in [CouplingSpec::dissipative(0.37), CouplingSpec::coherent(0.81)] {
            let l = build_liouvillian(&pair(1.3, 0.6, coupling), &space).unwrap();
            assert_eq!(l.dim, 16);
            assert!(trace_row_sums(&l, 4) < 1e-14);
        }
    }

    #[test]
    fn lowering_matches_angular_momentum() {
        // spin 1: S⁻ elements √2, √2
        let op = lowering(2);
        assert!((op[(1, 0)].re - 2f64.sqrt()).abs() < 1e-15);
        assert!((op[(2, 1)].re - 2f64.sqrt()).abs() < 1e-15);
        // [S⁺, S⁻] = 2 S^z
        let up = adjoint(&op);
        let comm = &up * &op - &op * &up;
        for i in 0..3 {
            assert!((comm[(i, i)].re - 2.0 * (1.0 - i as f64)).abs() < 1e-14);
        }
    }

    fn single_ensemble_liouvillian(omega: f64, kappa: f64, n: usize) -> Mat<Complex64> {
        // independent build: L = −i(I⊗H − Hᵀ⊗I) + γ(c̄⊗c − ½ I⊗c†c − ½ (c†c)ᵀ⊗I)
        let s = n as f64 / 2.0;
        let c = lowering(n);
        let cd = adjoint(&c);
        let h = (&c + &cd) * faer::Scale(Complex64::new(0.5 * omega, 0.0));
        let d = n + 1;
        let id = Op::identity(d, d);
        let tr = |a: &Op| Op::from_fn(a.ncols(), a.nrows(), |i, j| a[(j, i)]);
        let conj = |a: &Op| Op::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)].conj());
        let g = Complex64::new(kappa / s, 0.0);
        let cdc = &cd * &c;
        (kron(&id, &h) - kron(&tr(&h), &id)) * faer::Scale(-I)
            + (kron(&conj(&c), &c) - (kron(&id, &cdc) + kron(&tr(&cdc), &id)) * faer::Scale(Complex64::new(0.5, 0.0)))
                * faer::Scale(g)
    }

    #[test]
    fn uncoupled_spectrum_is_pairwise_sum() {
        let (na, nb) = (2, 3);
        let p = pair(1.2, 0.7, CouplingSpec::dissipative(0.0));
        let l = build_liouvillian(&p, &DickeSpace::new(na, nb).unwrap()).unwrap();
        let full = dense_eigenvalues(&l).unwrap();
        let la = single_ensemble_liouvillian(1.2, 1.0, na).eigenvalues().unwrap();
        let lb = single_ensemble_liouvillian(0.7, 1.0, nb).eigenvalues().unwrap();
        let sums: Vec<Complex64> = la.iter().flat_map(|a| lb.iter().map(move |b| a + b)).collect();
        assert_eq!(sums.len(), full.len());
        for s in &sums {
            let best = full.iter().map(|f| (f - s).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-8, "missing {s}");
        }
    }

    #[test]
    fn hermiticity_is_preserved() {
        let space = DickeSpace::new(2, 2).unwrap();
        let l = build_liouvillian(&pair(1.5, 0.9, CouplingSpec::coherent(0.4)), &space).unwrap();
        let d = space.hilbert_dim();
        // Hermitian ρ with generic entries
        let mut rho = vec![ZERO; d * d];
        for i in 0..d {
            for j in 0..d {
                let v = Complex64::new((i + 2 * j) as f64 * 0.1, (i as f64 - j as f64) * 0.07);
                rho[j * d + i] = if i <= j { v } else { ZERO };
            }
        }
        for i in 0..d {
            for j in 0..i {
                rho[j * d + i] = rho[i * d + j].conj();
            }
            rho[i * d + i].im = 0.0;
        }
        let mut out = vec![ZERO; d * d];
        l.matvec(&rho, &mut out);
        for i in 0..d {
            for j in 0..d {
                assert!((out[j * d + i] - out[i * d + j].conj()).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn assembly_cap_is_enforced() {
        let p = pair(1.5, 0.9, CouplingSpec::dissipative(0.1));
        let err = build_liouvillian_capped(&p, &DickeSpace::new(3, 3).unwrap(), 100).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn coordinate_export_round_trips() {
        let l = build_liouvillian(&pair(1.5, 0.9, CouplingSpec::dissipative(0.1)), &DickeSpace::new(1, 2).unwrap()).unwrap();
        let mut buf = Vec::new();
        l.write_coordinate(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with('%'));
        let mut trip = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            trip.push((
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                Complex64::new(f[2].parse().unwrap(), f[3].parse().unwrap()),
            ));
        }
        assert_eq!(SparseMatrix::from_triplets(l.dim, trip), l);
    }

    #[test]
    fn iterative_matches_dense_on_small_problem() {
        let p = pair(1.5, 0.9, CouplingSpec::dissipative(0.1));
        let l = build_liouvillian(&p, &DickeSpace::symmetric(6).unwrap()).unwrap();
        let opts = SpectrumOptions::default().covering(&p);
        let dense = slow_spectrum(&l, 10, &SpectrumOptions { force: Some(SolverPath::Dense), ..opts.clone() }).unwrap();
        let iter = slow_spectrum(&l, 10, &SpectrumOptions { force: Some(SolverPath::Iterative), ..opts }).unwrap();
        assert_eq!(dense.steady_count, 1);
        assert_eq!(iter.steady_count, 1);
        assert!((dense.dominant.unwrap() - iter.dominant.unwrap()).norm() < 1e-9);
        assert!((dense.second_dominant.unwrap() - iter.second_dominant.unwrap()).norm() < 1e-9);
        // conjugate partners share a real part, so compare as sets
        for a in &dense.eigenvalues[..8] {
            let best = iter.eigenvalues.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-8, "{a} missing");
        }
    }

    #[test]
    fn k_must_be_at_least_three() {
        let l = build_liouvillian(&pair(1.0, 1.0, CouplingSpec::dissipative(0.1)), &DickeSpace::new(1, 1).unwrap()).unwrap();
        assert!(slow_spectrum(&l, 2, &SpectrumOptions::default()).is_err());
    }

    #[test]
    fn fit_recovers_polynomial() {
        let coef = [0.9, -1.3, 4.0, 2.5];
        let sizes = [6usize, 10, 14, 18, 22, 26];
        let values: Vec<f64> = sizes
            .iter()
            .map(|&n| coef.iter().enumerate().map(|(i, a)| a / (n as f64).powi(i as i32)).sum())
            .collect();
        let fit = scaling_fit(&sizes, &values, 3).unwrap();
        for (a, b) in fit.coefficients.iter().zip(coef) {
            assert!((a - b).abs() < 1e-10, "{:?}", fit.coefficients);
        }
        assert!(fit.residual < 1e-12);
        assert_eq!(fit.extrapolated, fit.coefficients[0]);
    }

    #[test]
    fn fit_rejects_underdetermined() {
        assert!(scaling_fit(&[6], &[1.0], 1).is_err());
        assert!(scaling_fit(&[6, 6], &[1.0, 1.0], 1).is_err());
        assert!(scaling_fit(&[6, 10, 14, 18], &[1.0; 4], 4).is_err());
    }

    #[test]
    fn dense_cap_env_parse() {
        // only checks the parser path; the variable is not set in tests
        let opts = SpectrumOptions::default();
        assert_eq!(opts.dense_cap, DEFAULT_DENSE_CAP);
    }

    #[test]
    fn master_equation_conserves_trace() {
        let p = pair(1.5, 0.9, CouplingSpec::dissipative(0.1));
        let space = DickeSpace::new(2, 2).unwrap();
        let cfg = IntegrationConfig::default().with_t_end(10.0).with_dt_out(0.5);
        let s = finite_size_trajectory(&p, &space, None, &cfg, DEFAULT_DENSE_CAP).unwrap();
        assert_eq!(s.mz[0], [1.0, 1.0]);
        for tr in &s.trace {
            assert!((tr - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn direct_integration_respects_cap() {
        let p = pair(1.5, 0.9, CouplingSpec::dissipative(0.1));
        let space = DickeSpace::new(3, 3).unwrap();
        let cfg = IntegrationConfig::default().with_t_end(1.0);
        assert!(matches!(
            finite_size_trajectory(&p, &space, None, &cfg, 100),
            Err(Error::Resource(_))
        ));
    }
}
