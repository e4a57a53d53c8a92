//! Half-vectorization, duplication-matrix, diagonal-selection and companion
//! machinery shared by every estimation module.
//!
//! Conventions fixed here and used everywhere else:
//! * `vech` stacks the lower triangle column by column, so
//!   `vech([[4,1],[1,9]]) = [4,1,9]`.
//! * `vec` is column-major, matching nalgebra's storage order.
//!
//! All values are immutable after construction and safe to share across
//! threads.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that a matrix is symmetric.
pub const SYMMETRY_RTOL: f64 = 1e-10;

/// Half-vectorization of a symmetric matrix: the lower triangle stacked
/// column-major into a vector of length `m(m+1)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymVec {
    dim: usize,
    data: DVector<f64>,
}

impl SymVec {
    /// Half-vectorizes `a`, which must be square and symmetric within
    /// [`SYMMETRY_RTOL`] (relative to its largest absolute entry).
    pub fn vech(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Shape(format!(
                "vech needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let m = a.nrows();
        let scale = a.amax().max(1.0);
        for j in 0..m {
            for i in (j + 1)..m {
                if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::Shape(format!(
                        "vech needs a symmetric matrix; cells ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        Ok(Self::vech_unchecked(a))
    }

    /// As [`SymVec::vech`] but without the symmetry check; reads the lower
    /// triangle only.
    pub fn vech_unchecked(a: &DMatrix<f64>) -> Self {
        let m = a.nrows();
        let mut data = DVector::zeros(m * (m + 1) / 2);
        let mut k = 0;
        for j in 0..m {
            for i in j..m {
                data[k] = a[(i, j)];
                k += 1;
            }
        }
        SymVec { dim: m, data }
    }

    /// Wraps an existing vector of length `m(m+1)/2`.
    pub fn from_vector(dim: usize, data: DVector<f64>) -> Result<Self> {
        if data.len() != vech_len(dim) {
            return Err(Error::Shape(format!(
                "vech vector for dimension {dim} must have length {}, got {}",
                vech_len(dim),
                data.len()
            )));
        }
        Ok(SymVec { dim, data })
    }

    /// Rebuilds the full symmetric matrix.
    pub fn unvech(&self) -> DMatrix<f64> {
        let m = self.dim;
        let mut a = DMatrix::zeros(m, m);
        let mut k = 0;
        for j in 0..m {
            for i in j..m {
                a[(i, j)] = self.data[k];
                a[(j, i)] = self.data[k];
                k += 1;
            }
        }
        a
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    /// Position of cell `(i, j)` (with `i >= j`) inside the vech vector.
    pub fn offset(dim: usize, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i < dim);
        // cells of columns 0..j plus the offset inside column j
        j * dim - j * (j + 1) / 2 + i
    }
}

/// Length of the half-vectorization of an `m x m` symmetric matrix.
pub fn vech_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Duplication matrix `D` of order `m` and its Moore-Penrose pseudoinverse:
/// `D vech(A) = vec(A)` for symmetric `A`, `Dplus vec(A) = vech(A)`.
#[derive(Debug, Clone)]
pub struct DuplicationOps {
    dim: usize,
    d: DMatrix<f64>,
    dplus: DMatrix<f64>,
}

impl DuplicationOps {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("duplication matrix needs order >= 1".into()));
        }
        let q = vech_len(m);
        let mut d = DMatrix::zeros(m * m, q);
        for j in 0..m {
            for i in 0..m {
                let row = j * m + i;
                let col = SymVec::offset(m, i.max(j), i.min(j));
                d[(row, col)] = 1.0;
            }
        }
        // D has full column rank and D'D is diagonal (1 on diagonal cells,
        // 2 on off-diagonal cells), so the pseudoinverse is (D'D)^-1 D'.
        let dtd = d.transpose() * &d;
        let mut dplus = d.transpose();
        for c in 0..q {
            let w = 1.0 / dtd[(c, c)];
            for r in 0..m * m {
                dplus[(c, r)] *= w;
            }
        }
        Ok(DuplicationOps { dim: m, d, dplus })
    }

    /// Shared, cached instance for order `m`; built once per process.
    pub fn cached(m: usize) -> Result<Arc<DuplicationOps>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<DuplicationOps>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("duplication cache poisoned");
        if let Some(ops) = guard.get(&m) {
            return Ok(ops.clone());
        }
        let ops = Arc::new(DuplicationOps::new(m)?);
        guard.insert(m, ops.clone());
        Ok(ops)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn dplus(&self) -> &DMatrix<f64> {
        &self.dplus
    }
}

/// Selector `F` with `F vecd(P) = vec(P)` for diagonal `P`: an `m^2 x m`
/// matrix with a single 1 in row `i*m + i` of column `i`.
#[derive(Debug, Clone)]
pub struct DiagSelector {
    dim: usize,
    f: DMatrix<f64>,
}

impl DiagSelector {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("diagonal selector needs order >= 1".into()));
        }
        let mut f = DMatrix::zeros(m * m, m);
        for i in 0..m {
            f[(i * m + i, i)] = 1.0;
        }
        Ok(DiagSelector { dim: m, f })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }
}

/// Companion form of a VAR(p): the `np x np` matrix `C` with the slope
/// blocks in its top rows and identity blocks on the subdiagonal, plus the
/// `n x np` selector `S = (I_n, 0)` that reads back the first `n` states.
#[derive(Debug, Clone)]
pub struct CompanionMatrix {
    n: usize,
    p: usize,
    c: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl CompanionMatrix {
    /// Builds the companion form from the `n x np` slope matrix
    /// `(Pi_1, ..., Pi_p)`.
    pub fn new(pi: &DMatrix<f64>, n: usize, p: usize) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::Domain("companion form needs n >= 1 and p >= 1".into()));
        }
        if pi.nrows() != n || pi.ncols() != n * p {
            return Err(Error::Shape(format!(
                "slope matrix must be {n}x{}, got {}x{}",
                n * p,
                pi.nrows(),
                pi.ncols()
            )));
        }
        let np = n * p;
        let mut c = DMatrix::zeros(np, np);
        c.view_mut((0, 0), (n, np)).copy_from(pi);
        for i in 0..n * (p - 1) {
            c[(n + i, i)] = 1.0;
        }
        let mut s = DMatrix::zeros(n, np);
        for i in 0..n {
            s[(i, i)] = 1.0;
        }
        Ok(CompanionMatrix { n, p, c, s })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Largest eigenvalue modulus; a stable VAR has spectral radius < 1.
    pub fn spectral_radius(&self) -> f64 {
        self.c
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    /// The `n x n` propagation matrices `S C^l S'` for `l = 0..=horizon`,
    /// computed by iterating powers of the companion matrix.
    pub fn propagators(&self, horizon: usize) -> Vec<DMatrix<f64>> {
        let np = self.n * self.p;
        let mut power = DMatrix::<f64>::identity(np, np);
        let mut out = Vec::with_capacity(horizon + 1);
        out.push(DMatrix::identity(self.n, self.n));
        for _ in 1..=horizon {
            power = &self.c * power;
            out.push(&self.s * &power * self.s.transpose());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_symmetric(m: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
        &a + a.transpose()
    }

    #[test]
    fn vech_matches_definition() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 9.0]);
        let v = SymVec::vech(&a).unwrap();
        assert_eq!(v.as_vector().as_slice(), &[4.0, 1.0, 9.0]);
    }

    #[test]
    fn vech_identity_three() {
        let v = SymVec::vech(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(v.as_vector().as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn vech_round_trip_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = random_symmetric(4, &mut rng);
            let back = SymVec::vech(&a).unwrap().unvech();
            assert_abs_diff_eq!(back, a, epsilon = 0.0);
        }
    }

    #[test]
    fn vech_rejects_asymmetric_and_nonsquare() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(SymVec::vech(&a), Err(Error::Shape(_))));
        let b = DMatrix::zeros(2, 3);
        assert!(matches!(SymVec::vech(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn duplication_order_one_and_two() {
        let d1 = DuplicationOps::new(1).unwrap();
        assert_eq!(d1.d().as_slice(), &[1.0]);
        assert_eq!(d1.dplus().as_slice(), &[1.0]);

        // textbook order-2 duplication matrix
        let d2 = DuplicationOps::new(2).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(d2.d(), &expected);
    }

    #[test]
    fn duplication_rejects_zero() {
        assert!(matches!(DuplicationOps::new(0), Err(Error::Domain(_))));
    }

    #[test]
    fn duplication_identities_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for m in 1..=8 {
            let ops = DuplicationOps::cached(m).unwrap();
            for _ in 0..100 {
                let a = random_symmetric(m, &mut rng);
                let vec_a = DVector::from_column_slice(a.as_slice());
                let vech_a = SymVec::vech(&a).unwrap();
                let lhs = ops.d() * vech_a.as_vector();
                assert_abs_diff_eq!(lhs, vec_a, epsilon = 1e-12);
                let rhs = ops.dplus() * &vec_a;
                assert_abs_diff_eq!(rhs, *vech_a.as_vector(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn diag_selector_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for m in 1..=8 {
            let sel = DiagSelector::new(m).unwrap();
            for _ in 0..100 {
                let diag: DVector<f64> =
                    DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
                let full = DMatrix::from_diagonal(&diag);
                let lhs = sel.f() * &diag;
                let rhs = DVector::from_column_slice(full.as_slice());
                assert_abs_diff_eq!(lhs, rhs, epsilon = 0.0);
            }
        }
    }

    #[test]
    fn companion_var1_is_slope_matrix() {
        let pi = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 0.3]));
        let comp = CompanionMatrix::new(&pi, 2, 1).unwrap();
        assert_eq!(comp.c(), &pi);
        assert!(comp.is_stable());
    }

    #[test]
    fn companion_scalar_ar2() {
        let pi = DMatrix::from_row_slice(1, 2, &[0.5, 0.2]);
        let comp = CompanionMatrix::new(&pi, 1, 2).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 1.0, 0.0]);
        assert_eq!(comp.c(), &expected);
    }

    #[test]
    fn companion_rejects_bad_shape() {
        let pi = DMatrix::zeros(2, 3);
        assert!(matches!(CompanionMatrix::new(&pi, 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn companion_eigenvalues_solve_lag_polynomial() {
        // oracle: every eigenvalue z of the companion matrix satisfies
        // det(z^p I - z^{p-1} Pi_1 - ... - Pi_p) = 0
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pi = DMatrix::from_fn(2, 4, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            0.25 * x
        });
        let comp = CompanionMatrix::new(&pi, 2, 2).unwrap();
        let pi1 = pi.view((0, 0), (2, 2)).clone_owned();
        let pi2 = pi.view((0, 2), (2, 2)).clone_owned();
        for z in comp.c().complex_eigenvalues().iter() {
            let z = *z;
            let m = nalgebra::DMatrix::<nalgebra::Complex<f64>>::from_fn(2, 2, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                nalgebra::Complex::new(id, 0.0) * z * z
                    - nalgebra::Complex::new(pi1[(i, j)], 0.0) * z
                    - nalgebra::Complex::new(pi2[(i, j)], 0.0)
            });
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            assert!(det.norm() < 1e-10, "eigenvalue {z} does not solve the lag polynomial");
        }
    }

    #[test]
    fn propagators_match_ma_recursion() {
        // oracle: Theta_0 = I, Theta_l = sum_{i=1..min(l,p)} Pi_i Theta_{l-i}
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pi = DMatrix::from_fn(2, 4, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            0.3 * x
        });
        let (n, p) = (2, 2);
        let comp = CompanionMatrix::new(&pi, n, p).unwrap();
        let props = comp.propagators(10);
        let mut thetas: Vec<DMatrix<f64>> = vec![DMatrix::identity(n, n)];
        for l in 1..=10usize {
            let mut th = DMatrix::zeros(n, n);
            for i in 1..=l.min(p) {
                th += pi.view((0, (i - 1) * n), (n, n)) * &thetas[l - i];
            }
            thetas.push(th);
        }
        for l in 0..=10 {
            assert_abs_diff_eq!(props[l], thetas[l], epsilon = 1e-12);
        }
    }
}
