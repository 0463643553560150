//! Finite state spaces, reversible kernels and the generator `L = K - Id`.
//!
//! An exchangeable pair `(X, X')` on a finite space is the same object as a
//! Markov kernel `K` that is reversible for the law `mu` of `X`. This module
//! validates such kernels, evaluates the generator `L`, the carré du champ
//!
//! ```text
//! Gamma(F,G)(x) = 1/2 sum_y K(x,y) (F(y) - F(x)) (G(y) - G(x))
//!               = 1/2 (L(FG) - F LG - G LF)
//! ```
//!
//! and the spectral data of `-L` (eigenvalues, a `mu`-orthonormal eigenbasis,
//! the spectral gap and the pseudo-inverse `L^{-1}` on mean-zero functions).
//! The exact identities behind the bounds (integration by parts, the
//! covariance identity and the fourth-moment identity) are exposed as
//! residuals so callers can certify them on any fixture.
//!
//! Kernels are stored row-compressed so that product-space generators with
//! millions of states stay cheap to apply; spectral routines densify and are
//! capped at [`DENSE_CAP`] states.

use std::collections::{BTreeMap, VecDeque};
use std::io::Read;
use std::ops::Index;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance of the detailed-balance certificate.
pub const DETAILED_BALANCE_TOL: f64 = 1e-12;
/// Tolerance on row sums of `K` at construction.
pub const ROW_SUM_TOL: f64 = 1e-10;
/// Tolerance on the total mass of `mu`.
pub const MASS_TOL: f64 = 1e-12;
/// Default eigenvalue clustering tolerance, relative to the spectral radius.
pub const DEFAULT_CLUSTER_TOL: f64 = 1e-8;
/// Largest state count for which dense spectral routines run.
pub const DENSE_CAP: usize = 4096;

/// A real-valued function on the states of a finite space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Functional(Vec<f64>);

impl Functional {
    /// Wraps a vector, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("functional"));
        }
        Ok(Self(values))
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self((0..len).map(f).collect())
    }

    pub fn constant(len: usize, c: f64) -> Self {
        Self(vec![c; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self::constant(len, 0.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination; panics on length mismatch (callers check).
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.len(), other.len(), "functional length mismatch");
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl Index<usize> for Functional {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A finite probability space with strictly positive weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteSpace {
    labels: Vec<String>,
    weights: Vec<f64>,
}

impl FiniteSpace {
    pub fn new(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if labels.len() != weights.len() {
            return Err(Error::DimensionMismatch { expected: labels.len(), got: weights.len() });
        }
        if labels.is_empty() {
            return Err(Error::Invalid("empty state space".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Invalid(format!("state {i} has weight {w}; weights must be positive")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Invalid(format!("weights sum to {total}")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Invalid(format!("duplicate state label {dup:?}")));
        }
        Ok(Self { labels, weights })
    }

    /// Weights given up to normalization.
    pub fn from_unnormalized(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Invalid("weights must have positive finite total".into()));
        }
        Self::new(labels, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| i.to_string()).collect(), vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn check(&self, f: &Functional) -> Result<()> {
        if f.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: f.len() });
        }
        Ok(())
    }

    /// `E_mu[F]`.
    pub fn expect(&self, f: &Functional) -> f64 {
        self.weights.iter().zip(f.values()).map(|(w, v)| w * v).sum()
    }

    /// `E_mu[F G]`.
    pub fn inner(&self, f: &Functional, g: &Functional) -> f64 {
        self.weights
            .iter()
            .zip(f.values().iter().zip(g.values()))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    pub fn norm(&self, f: &Functional) -> f64 {
        self.inner(f, f).sqrt()
    }

    pub fn covariance(&self, f: &Functional, g: &Functional) -> f64 {
        let (ef, eg) = (self.expect(f), self.expect(g));
        self.weights
            .iter()
            .zip(f.values().iter().zip(g.values()))
            .map(|(w, (a, b))| w * (a - ef) * (b - eg))
            .sum()
    }

    pub fn variance(&self, f: &Functional) -> f64 {
        self.covariance(f, f)
    }

    pub fn center(&self, f: &Functional) -> Functional {
        let m = self.expect(f);
        f.map(|v| v - m)
    }

    /// Centers and scales to unit variance.
    pub fn normalize(&self, f: &Functional) -> Result<Functional> {
        let v = self.variance(f);
        if !(v > 0.0) {
            return Err(Error::Precondition("cannot normalize a constant functional".into()));
        }
        Ok(self.center(f).scale(1.0 / v.sqrt()))
    }
}

/// A row-stochastic kernel reversible for the weights of its space.
#[derive(Clone, Debug)]
pub struct ReversibleKernel {
    space: FiniteSpace,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    balance_residual: f64,
}

impl ReversibleKernel {
    /// Builds from `(x, y, K(x,y))` triplets; duplicates are summed and zero
    /// entries dropped.
    pub fn from_triplets(space: FiniteSpace, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = space.len();
        for &(x, y, v) in &triplets {
            if x >= n || y >= n {
                return Err(Error::Invalid(format!("kernel index ({x},{y}) out of range for {n} states")));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("kernel"));
            }
            if v < 0.0 {
                return Err(Error::NegativeEntry { row: x, col: y, value: v });
            }
        }
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (x, y, v) in triplets {
            if last == Some((x, y)) {
                *vals.last_mut().expect("nonempty") += v;
                continue;
            }
            last = Some((x, y));
            cols.push(y);
            vals.push(v);
            row_ptr[x + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut k = Self { space, row_ptr, cols, vals, balance_residual: 0.0 };
        k.prune_zeros();
        k.validate()?;
        Ok(k)
    }

    /// Builds from per-row `(column, value)` lists; each row is sorted and
    /// duplicate columns are summed.
    pub fn from_rows(space: FiniteSpace, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = space.len();
        if rows.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: rows.len() });
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        for (x, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            let start = cols.len();
            for (y, v) in row {
                if y >= n {
                    return Err(Error::Invalid(format!("kernel index ({x},{y}) out of range for {n} states")));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite("kernel"));
                }
                if v < 0.0 {
                    return Err(Error::NegativeEntry { row: x, col: y, value: v });
                }
                if cols.len() > start && *cols.last().expect("nonempty") == y {
                    *vals.last_mut().expect("nonempty") += v;
                } else {
                    cols.push(y);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        let mut k = Self { space, row_ptr, cols, vals, balance_residual: 0.0 };
        k.prune_zeros();
        k.validate()?;
        Ok(k)
    }

    /// Builds from a dense row-major matrix.
    pub fn from_dense(space: FiniteSpace, rows: &[Vec<f64>]) -> Result<Self> {
        let n = space.len();
        if rows.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: rows.len() });
        }
        let mut trip = Vec::new();
        for (x, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: row.len() });
            }
            for (y, &v) in row.iter().enumerate() {
                if v != 0.0 || !v.is_finite() {
                    trip.push((x, y, v));
                }
            }
        }
        Self::from_triplets(space, trip)
    }

    fn prune_zeros(&mut self) {
        let n = self.space.len();
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(self.cols.len());
        let mut vals = Vec::with_capacity(self.vals.len());
        for x in 0..n {
            for k in self.row_ptr[x]..self.row_ptr[x + 1] {
                if self.vals[k] != 0.0 {
                    cols.push(self.cols[k]);
                    vals.push(self.vals[k]);
                }
            }
            row_ptr[x + 1] = cols.len();
        }
        self.row_ptr = row_ptr;
        self.cols = cols;
        self.vals = vals;
    }

    fn validate(&mut self) -> Result<()> {
        let n = self.space.len();
        for x in 0..n {
            let sum: f64 = self.vals[self.row_ptr[x]..self.row_ptr[x + 1]].iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NotStochastic { row: x, sum });
            }
        }
        let mu = self.space.weights();
        let mut worst = 0.0f64;
        for x in 0..n {
            for (y, kxy) in self.row(x) {
                if y == x {
                    continue;
                }
                let a = mu[x] * kxy;
                let b = mu[y] * self.get(y, x);
                let r = (a - b).abs();
                let scale = a.max(b);
                if r > DETAILED_BALANCE_TOL * scale {
                    return Err(Error::NotReversible { x, y, residual: a - b });
                }
                worst = worst.max(r / scale);
            }
        }
        self.balance_residual = worst;
        Ok(())
    }

    pub fn space(&self) -> &FiniteSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    /// Nonzero entries `(y, K(x,y))` of row `x`, columns ascending.
    pub fn row(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[x]..self.row_ptr[x + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        let r = self.row_ptr[x]..self.row_ptr[x + 1];
        match self.cols[r.clone()].binary_search(&y) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Largest relative detailed-balance defect found at construction.
    pub fn balance_residual(&self) -> f64 {
        self.balance_residual
    }

    /// Dense copy of `K`.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut out = vec![vec![0.0; n]; n];
        for (x, row) in out.iter_mut().enumerate() {
            for (y, v) in self.row(x) {
                row[y] = v;
            }
        }
        out
    }

    /// Connected components of the support graph (symmetric by reversibility).
    fn components(&self) -> usize {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(x) = queue.pop_front() {
                for (y, _) in self.row(x) {
                    if !seen[y] {
                        seen[y] = true;
                        queue.push_back(y);
                    }
                }
            }
        }
        count
    }
}

/// The generator `L = K - Id` of a validated reversible kernel.
#[derive(Clone, Debug)]
pub struct Generator {
    kernel: ReversibleKernel,
    components: usize,
}

/// Validates `K` against `mu` and returns its generator.
pub fn build_generator(space: FiniteSpace, kernel_matrix: &[Vec<f64>]) -> Result<Generator> {
    Ok(Generator::new(ReversibleKernel::from_dense(space, kernel_matrix)?))
}

impl Generator {
    pub fn new(kernel: ReversibleKernel) -> Self {
        let components = kernel.components();
        Self { kernel, components }
    }

    pub fn kernel(&self) -> &ReversibleKernel {
        &self.kernel
    }

    pub fn space(&self) -> &FiniteSpace {
        self.kernel.space()
    }

    pub fn len(&self) -> usize {
        self.kernel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernel.is_empty()
    }

    /// Dimension of `ker L`, i.e. the number of communicating classes.
    pub fn kernel_dimension(&self) -> usize {
        self.components
    }

    pub fn is_ergodic(&self) -> bool {
        self.components == 1
    }

    /// Every state has positive mass, so irreducibility and ergodicity
    /// coincide for reversible kernels.
    pub fn is_irreducible(&self) -> bool {
        self.is_ergodic()
    }

    fn check(&self, f: &Functional) -> Result<()> {
        self.space().check(f)
    }

    /// `KF`.
    pub fn apply_k(&self, f: &Functional) -> Result<Functional> {
        self.check(f)?;
        let v = f.values();
        Ok(Functional::from_fn(self.len(), |x| self.kernel.row(x).map(|(y, k)| k * v[y]).sum()))
    }

    /// `LF = KF - F`, evaluated as `sum_y K(x,y)(F(y) - F(x))`.
    pub fn apply_l(&self, f: &Functional) -> Result<Functional> {
        self.check(f)?;
        let v = f.values();
        Ok(Functional::from_fn(self.len(), |x| {
            self.kernel.row(x).map(|(y, k)| k * (v[y] - v[x])).sum()
        }))
    }

    /// `x -> sum_y K(x,y) h(x,y)`, the conditional expectation given `X = x`.
    pub fn cond_expect(&self, h: impl Fn(usize, usize) -> f64) -> Functional {
        Functional::from_fn(self.len(), |x| self.kernel.row(x).map(|(y, k)| k * h(x, y)).sum())
    }

    /// `E[h(X, X')] = sum_x mu(x) sum_y K(x,y) h(x,y)`.
    pub fn pair_expect(&self, h: impl Fn(usize, usize) -> f64) -> f64 {
        let mu = self.space().weights();
        (0..self.len())
            .map(|x| mu[x] * self.kernel.row(x).map(|(y, k)| k * h(x, y)).sum::<f64>())
            .sum()
    }

    /// Carré du champ from conditional increments.
    pub fn gamma(&self, f: &Functional, g: &Functional) -> Result<Functional> {
        self.check(f)?;
        self.check(g)?;
        let (a, b) = (f.values(), g.values());
        Ok(self.cond_expect(|x, y| 0.5 * (a[y] - a[x]) * (b[y] - b[x])))
    }

    /// Carré du champ from `1/2 (L(FG) - F LG - G LF)`.
    pub fn gamma_from_generator(&self, f: &Functional, g: &Functional) -> Result<Functional> {
        let lfg = self.apply_l(&f.mul(g))?;
        let lf = self.apply_l(f)?;
        let lg = self.apply_l(g)?;
        Ok(Functional::from_fn(self.len(), |x| 0.5 * (lfg[x] - f[x] * lg[x] - g[x] * lf[x])))
    }

    /// Carré du champ together with the sup-norm gap between both formulas.
    pub fn gamma_checked(&self, f: &Functional, g: &Functional) -> Result<(Functional, f64)> {
        let a = self.gamma(f, g)?;
        let b = self.gamma_from_generator(f, g)?;
        let gap = a.sub(&b).max_abs();
        Ok((a, gap))
    }

    /// Dirichlet energy `E_mu[Gamma(F,F)]`.
    pub fn energy(&self, f: &Functional) -> Result<f64> {
        self.check(f)?;
        let v = f.values();
        Ok(self.pair_expect(|x, y| 0.5 * (v[y] - v[x]).powi(2)))
    }

    /// `E[(F(X') - F(X))^k]` and friends through a user increment map.
    pub fn increment_moment(&self, f: &Functional, h: impl Fn(f64) -> f64) -> Result<f64> {
        self.check(f)?;
        let v = f.values();
        Ok(self.pair_expect(|x, y| h(v[y] - v[x])))
    }

    /// Symmetrized matrix `D^{1/2}(-L)D^{-1/2}`, written as
    /// `-sqrt(K(x,y)K(y,x))` off the diagonal so that it is exactly symmetric.
    pub fn symmetrized_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > DENSE_CAP {
            return Err(Error::CapExceeded { what: "dense spectral state count", size: n, cap: DENSE_CAP });
        }
        let mut a = DMatrix::<f64>::zeros(n, n);
        for x in 0..n {
            for (y, kxy) in self.kernel.row(x) {
                if y == x {
                    continue;
                }
                if y > x {
                    let v = -(kxy * self.kernel.get(y, x)).sqrt();
                    a[(x, y)] = v;
                    a[(y, x)] = v;
                }
            }
            a[(x, x)] = 1.0 - self.kernel.get(x, x);
        }
        Ok(a)
    }
}

/// A group of numerically equal eigenvalues.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EigenCluster {
    /// Mean of the member eigenvalues.
    pub value: f64,
    /// Index of the first member in the sorted eigenvalue list.
    pub start: usize,
    pub multiplicity: usize,
}

/// Eigen-decomposition of `-L`.
#[derive(Clone, Debug)]
pub struct SpectralData {
    eigenvalues: Vec<f64>,
    /// Columns are `mu`-orthonormal eigenfunctions.
    basis: DMatrix<f64>,
    /// The same eigenvectors in the symmetrized (Euclidean) frame.
    sym_basis: DMatrix<f64>,
    clusters: Vec<EigenCluster>,
    gap: f64,
    cluster_tol: f64,
}

/// Full spectral decomposition with eigenvalues clustered at
/// `cluster_tol` times the spectral radius.
pub fn spectral_decompose(gen: &Generator, cluster_tol: f64) -> Result<SpectralData> {
    let a = gen.symmetrized_dense()?;
    let n = a.nrows();
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut sym_basis = DMatrix::<f64>::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        // Deterministic orientation: largest-magnitude entry positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        sym_basis.set_column(c, &col);
    }
    let sqrt_mu: Vec<f64> = gen.space().weights().iter().map(|w| w.sqrt()).collect();
    let mut basis = sym_basis.clone();
    for x in 0..n {
        for c in 0..n {
            basis[(x, c)] /= sqrt_mu[x];
        }
    }
    let radius = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = cluster_tol * radius;
    let mut clusters: Vec<EigenCluster> = Vec::new();
    for (i, &v) in eigenvalues.iter().enumerate() {
        match clusters.last_mut() {
            Some(c) if v - eigenvalues[i - 1] <= tol => c.multiplicity += 1,
            _ => clusters.push(EigenCluster { value: 0.0, start: i, multiplicity: 1 }),
        }
    }
    for c in &mut clusters {
        c.value = eigenvalues[c.start..c.start + c.multiplicity].iter().sum::<f64>() / c.multiplicity as f64;
    }
    let zero = &clusters[0];
    let gap = if zero.value.abs() <= tol.max(1e-12) && zero.multiplicity == 1 && clusters.len() > 1 {
        clusters[1].value
    } else {
        0.0
    };
    Ok(SpectralData { eigenvalues, basis, sym_basis, clusters, gap, cluster_tol })
}

impl SpectralData {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn clusters(&self) -> &[EigenCluster] {
        &self.clusters
    }

    pub fn cluster_tol(&self) -> f64 {
        self.cluster_tol
    }

    /// Smallest eigenvalue above zero, or 0 when `ker L` is not one-dimensional.
    pub fn gap(&self) -> f64 {
        self.gap
    }

    /// Poincaré constant `1/gap`, unavailable without a spectral gap.
    pub fn poincare_constant(&self) -> Option<f64> {
        (self.gap > 0.0).then(|| 1.0 / self.gap)
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// The `k`-th `mu`-orthonormal eigenfunction.
    pub fn eigenfunction(&self, k: usize) -> Functional {
        Functional(self.basis.column(k).iter().copied().collect())
    }

    /// Eigenvalue multiplicities keyed by cluster, ascending.
    pub fn multiplicities(&self) -> Vec<(f64, usize)> {
        self.clusters.iter().map(|c| (c.value, c.multiplicity)).collect()
    }

    fn coefficients(&self, space: &FiniteSpace, f: &Functional) -> Vec<f64> {
        // <F, f_k>_mu = sum_x sqrt(mu_x) F(x) v_k(x) in the symmetric frame.
        let w: Vec<f64> = space.weights().iter().zip(f.values()).map(|(m, v)| m.sqrt() * v).collect();
        (0..self.len())
            .map(|k| self.sym_basis.column(k).iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn synthesize(&self, space: &FiniteSpace, coef: &[f64]) -> Functional {
        let n = self.len();
        let mut out = vec![0.0; n];
        for (k, &c) in coef.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (x, o) in out.iter_mut().enumerate() {
                *o += c * self.sym_basis[(x, k)];
            }
        }
        for (o, m) in out.iter_mut().zip(space.weights()) {
            *o /= m.sqrt();
        }
        Functional(out)
    }

    /// Orthogonal projection of `F` onto the eigenspace of cluster `c`.
    pub fn project_cluster(&self, space: &FiniteSpace, f: &Functional, c: usize) -> Functional {
        let cl = &self.clusters[c];
        let all = self.coefficients(space, f);
        let coef: Vec<f64> = (0..self.len())
            .map(|k| if k >= cl.start && k < cl.start + cl.multiplicity { all[k] } else { 0.0 })
            .collect();
        self.synthesize(space, &coef)
    }

    /// Projections onto every cluster, in cluster order.
    pub fn project_all(&self, space: &FiniteSpace, f: &Functional) -> Vec<Functional> {
        let all = self.coefficients(space, f);
        self.clusters
            .iter()
            .map(|cl| {
                let coef: Vec<f64> = (0..self.len())
                    .map(|k| if k >= cl.start && k < cl.start + cl.multiplicity { all[k] } else { 0.0 })
                    .collect();
                self.synthesize(space, &coef)
            })
            .collect()
    }

    /// Worst eigenpair residual `||-L f_k - lambda_k f_k||` in `L^2(mu)`.
    pub fn max_residual(&self, gen: &Generator) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..self.len() {
            let f = self.eigenfunction(k);
            let lf = gen.apply_l(&f)?;
            let r = lf.zip_with(&f, |a, b| -a - self.eigenvalues[k] * b);
            worst = worst.max(gen.space().norm(&r));
        }
        Ok(worst)
    }

    /// Worst deviation of the Gram matrix in `L^2(mu)` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.sym_basis.transpose() * &self.sym_basis;
        let n = g.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// `L^{-1} G`, the mean-zero solution of `L H = G - E_mu[G]`.
pub fn pseudo_inverse_apply(gen: &Generator, spec: &SpectralData, g: &Functional) -> Result<Functional> {
    gen.space().check(g)?;
    if spec.len() != gen.len() {
        return Err(Error::DimensionMismatch { expected: gen.len(), got: spec.len() });
    }
    if spec.gap() <= 0.0 {
        return Err(Error::NotErgodic(spec.clusters()[0].multiplicity));
    }
    let zero = &spec.clusters()[0];
    let mut coef = spec.coefficients(gen.space(), g);
    for (k, c) in coef.iter_mut().enumerate() {
        if k < zero.start + zero.multiplicity {
            *c = 0.0;
        } else {
            *c /= -spec.eigenvalues[k];
        }
    }
    let h = spec.synthesize(gen.space(), &coef);
    // Remove any rounding residue of the constant mode.
    Ok(gen.space().center(&h))
}

/// Residuals of the exact operator identities for a pair `(F, G)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IdentityResiduals {
    /// `|E[G LF] - E[F LG]|`.
    pub reversibility: f64,
    /// `|E[Gamma(F,G)] + E[G LF]|`.
    pub integration_by_parts: f64,
    /// `|Cov(F,G) - E[Gamma(G, -L^{-1}F)]|`; `None` without a spectral gap.
    pub covariance: Option<f64>,
    /// `|E[(dF)^4] - 4(E[F^3 LF] + 3 E[F^2 Gamma(F,F)])|`.
    pub fourth_moment: f64,
    /// Sup-norm gap between the two carré du champ formulas for `(F, G)`.
    pub gamma_formula_gap: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        [self.reversibility, self.integration_by_parts, self.covariance.unwrap_or(0.0), self.fourth_moment]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn identity_residuals(gen: &Generator, spec: &SpectralData, f: &Functional, g: &Functional) -> Result<IdentityResiduals> {
    let space = gen.space();
    let lf = gen.apply_l(f)?;
    let lg = gen.apply_l(g)?;
    let (gfg, gamma_formula_gap) = gen.gamma_checked(f, g)?;
    let reversibility = (space.inner(g, &lf) - space.inner(f, &lg)).abs();
    let integration_by_parts = (space.expect(&gfg) + space.inner(g, &lf)).abs();
    let covariance = if spec.gap() > 0.0 {
        let minus_linv_f = pseudo_inverse_apply(gen, spec, f)?.scale(-1.0);
        let gam = gen.gamma(g, &minus_linv_f)?;
        Some((space.covariance(f, g) - space.expect(&gam)).abs())
    } else {
        None
    };
    let fourth = gen.increment_moment(f, |d| d.powi(4))?;
    let gff = gen.gamma(f, f)?;
    let f3lf = space.expect(&Functional::from_fn(f.len(), |x| f[x].powi(3) * lf[x]));
    let f2g = space.expect(&Functional::from_fn(f.len(), |x| f[x] * f[x] * gff[x]));
    let fourth_moment = (fourth - 4.0 * (f3lf + 3.0 * f2g)).abs();
    Ok(IdentityResiduals { reversibility, integration_by_parts, covariance, fourth_moment, gamma_formula_gap })
}

/// `R_psi(F,G) = Gamma(psi o F, G) - psi'(F) Gamma(F,G)` together with the
/// pointwise majorant `(||psi''|| / 4) E[|dG| (dF)^2 | X]`.
pub fn remainder_with_bound(
    gen: &Generator,
    f: &Functional,
    g: &Functional,
    psi: impl Fn(f64) -> f64,
    psi_prime: impl Fn(f64) -> f64,
    psi_second_sup: f64,
) -> Result<(Functional, Functional)> {
    let psi_f = f.map(&psi);
    let lhs = gen.gamma(&psi_f, g)?;
    let gfg = gen.gamma(f, g)?;
    let r = Functional::from_fn(f.len(), |x| lhs[x] - psi_prime(f[x]) * gfg[x]);
    let (a, b) = (f.values(), g.values());
    let bound = gen.cond_expect(|x, y| 0.25 * psi_second_sup * (b[y] - b[x]).abs() * (a[y] - a[x]).powi(2));
    Ok((r, bound))
}

/// Antisymmetric `S` with `E[S(X,X') | X] = G` for centered `G`.
#[derive(Clone, Debug)]
pub struct AntisymmetricWitness {
    n: usize,
    /// `L^{-1}G`; the witness is `S(x,y) = H(y) - H(x)`.
    potential: Functional,
    matrix: Vec<f64>,
    /// `max_x |sum_y K(x,y) S(x,y) - G(x)|`.
    pub reconstruction_residual: f64,
    /// Same residual for the literal form `L(L^{-1}G)(y) - L(L^{-1}G)(x)`.
    pub literal_form_residual: f64,
}

impl AntisymmetricWitness {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.matrix[x * self.n + y]
    }

    pub fn potential(&self) -> &Functional {
        &self.potential
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `max |S(x,y) + S(y,x)|` over all pairs.
    pub fn antisymmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.n {
            for y in 0..self.n {
                worst = worst.max((self.get(x, y) + self.get(y, x)).abs());
            }
        }
        worst
    }
}

pub fn construct_antisymmetric(gen: &Generator, spec: &SpectralData, g: &Functional) -> Result<AntisymmetricWitness> {
    let space = gen.space();
    space.check(g)?;
    let mean = space.expect(g);
    if mean.abs() > 1e-10 {
        return Err(Error::Precondition(format!("target must be centered, mean is {mean:e}")));
    }
    let h = pseudo_inverse_apply(gen, spec, g)?;
    let n = gen.len();
    let mut matrix = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            matrix[x * n + y] = h[y] - h[x];
        }
    }
    let rec = gen.cond_expect(|x, y| matrix[x * n + y]);
    let reconstruction_residual = rec.sub(g).max_abs();
    let lh = gen.apply_l(&h)?;
    let literal = gen.cond_expect(|x, y| lh[y] - lh[x]);
    let literal_form_residual = literal.sub(g).max_abs();
    Ok(AntisymmetricWitness { n, potential: h, matrix, reconstruction_residual, literal_form_residual })
}

/// A random reversible kernel on `n` states: symmetric conductances on a
/// ring plus random chords (density in `[0,1]`), normalized by row.
pub fn random_reversible_kernel<R: Rng + ?Sized>(n: usize, density: f64, rng: &mut R) -> Result<Generator> {
    if n == 0 {
        return Err(Error::Invalid("need at least one state".into()));
    }
    let mut w = vec![vec![0.0; n]; n];
    for x in 0..n {
        w[x][x] = rng.random::<f64>();
        if n > 1 {
            let y = (x + 1) % n;
            let c = 0.1 + rng.random::<f64>();
            w[x][y] += c;
            w[y][x] += c;
        }
        for y in x + 1..n {
            if rng.random::<f64>() < density {
                let c = rng.random::<f64>();
                w[x][y] += c;
                w[y][x] += c;
            }
        }
    }
    if n == 1 {
        w[0][0] = 1.0;
    }
    let deg: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let total: f64 = deg.iter().sum();
    let space = FiniteSpace::new((0..n).map(|i| i.to_string()).collect(), deg.iter().map(|d| d / total).collect())
        .or_else(|_| FiniteSpace::from_unnormalized((0..n).map(|i| i.to_string()).collect(), deg.clone()))?;
    let rows: Vec<Vec<f64>> = w.iter().zip(&deg).map(|(r, d)| r.iter().map(|v| v / d).collect()).collect();
    build_generator(space, &rows)
}

#[derive(Deserialize)]
struct KernelDoc {
    labels: Vec<String>,
    mu: Vec<f64>,
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
}

/// Reads `{"labels": [...], "mu": [...], "K": [[...]]}`.
pub fn generator_from_json(text: &str) -> Result<Generator> {
    let doc: KernelDoc = serde_json::from_str(text)?;
    build_generator(FiniteSpace::new(doc.labels, doc.mu)?, &doc.k)
}

/// Reads CSV with a header of state labels; each row is `mu(x), K(x, .)`.
/// The first header cell names the weight column and is ignored.
pub fn generator_from_csv<R: Read>(reader: R) -> Result<Generator> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Invalid("kernel CSV needs a weight column and at least one state".into()));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut mu = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::Invalid(format!("kernel CSV: {e}")))?;
        if vals.len() != labels.len() + 1 {
            return Err(Error::DimensionMismatch { expected: labels.len() + 1, got: vals.len() });
        }
        mu.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }
    build_generator(FiniteSpace::new(labels, mu)?, &rows)
}

/// Reads a functional as CSV: either one value per row, or `label,value`
/// rows matched against the state labels. A header line is optional.
pub fn functional_from_csv<R: Read>(reader: R, space: &FiniteSpace) -> Result<Functional> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut by_label: BTreeMap<String, f64> = BTreeMap::new();
    let mut plain = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match rec.len() {
            1 => match rec[0].parse::<f64>() {
                Ok(v) => plain.push(v),
                Err(_) if i == 0 => continue,
                Err(e) => return Err(Error::Invalid(format!("functional CSV: {e}"))),
            },
            2 => match rec[1].parse::<f64>() {
                Ok(v) => {
                    by_label.insert(rec[0].to_string(), v);
                }
                Err(_) if i == 0 => continue,
                Err(e) => return Err(Error::Invalid(format!("functional CSV: {e}"))),
            },
            k => return Err(Error::Invalid(format!("functional CSV rows need 1 or 2 fields, found {k}"))),
        }
    }
    let values = if !by_label.is_empty() {
        if !plain.is_empty() {
            return Err(Error::Invalid("functional CSV mixes labelled and unlabelled rows".into()));
        }
        space
            .labels()
            .iter()
            .map(|l| by_label.get(l).copied().ok_or_else(|| Error::Invalid(format!("no value for state {l:?}"))))
            .collect::<Result<Vec<f64>>>()?
    } else {
        plain
    };
    let f = Functional::new(values)?;
    space.check(&f)?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_point() -> Generator {
        build_generator(FiniteSpace::uniform(2).unwrap(), &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    fn f_pm() -> Functional {
        Functional::new(vec![-1.0, 1.0]).unwrap()
    }

    #[test]
    fn two_point_swap_basics() {
        let gen = two_point();
        assert!(gen.is_ergodic());
        let lf = gen.apply_l(&f_pm()).unwrap();
        assert_eq!(lf.values(), &[2.0, -2.0]);
        let g = gen.gamma(&f_pm(), &f_pm()).unwrap();
        assert_eq!(g.values(), &[2.0, 2.0]);
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        assert!(spec.eigenvalues()[0].abs() < 1e-14);
        assert!((spec.eigenvalues()[1] - 2.0).abs() < 1e-14);
        assert!((spec.gap() - 2.0).abs() < 1e-14);
        assert!((spec.poincare_constant().unwrap() - 0.5).abs() < 1e-14);
        let h = pseudo_inverse_apply(&gen, &spec, &f_pm()).unwrap();
        assert!((h[0] - 0.5).abs() < 1e-14 && (h[1] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn identity_kernel_is_not_ergodic() {
        let gen = build_generator(FiniteSpace::uniform(3).unwrap(), &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(gen.kernel_dimension(), 3);
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(spec.gap(), 0.0);
        assert!(spec.poincare_constant().is_none());
        assert!(matches!(pseudo_inverse_apply(&gen, &spec, &Functional::zeros(3)), Err(Error::NotErgodic(_))));
    }

    #[test]
    fn detailed_balance_violation_is_rejected() {
        let space = FiniteSpace::new(vec!["a".into(), "b".into()], vec![0.25, 0.75]).unwrap();
        let err = build_generator(space, &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NotReversible { .. }));
    }

    #[test]
    fn malformed_kernels_are_rejected() {
        let space = FiniteSpace::uniform(2).unwrap();
        assert!(matches!(
            build_generator(space.clone(), &[vec![0.5, 0.4], vec![0.5, 0.5]]),
            Err(Error::NotStochastic { row: 0, .. })
        ));
        assert!(matches!(
            build_generator(space, &[vec![1.5, -0.5], vec![-0.5, 1.5]]),
            Err(Error::NegativeEntry { .. })
        ));
        assert!(FiniteSpace::new(vec!["a".into(), "a".into()], vec![0.5, 0.5]).is_err());
        assert!(FiniteSpace::new(vec!["a".into(), "b".into()], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn constant_functionals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = random_reversible_kernel(6, 0.5, &mut rng).unwrap();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let c = Functional::constant(6, 3.5);
        assert!(gen.apply_l(&c).unwrap().max_abs() < 1e-15);
        let g = Functional::from_fn(6, |i| i as f64);
        assert!(gen.gamma(&c, &g).unwrap().max_abs() == 0.0);
        assert!(pseudo_inverse_apply(&gen, &spec, &c).unwrap().max_abs() < 1e-14);
        let r = identity_residuals(&gen, &spec, &c, &c).unwrap();
        assert!(r.max() < 1e-14);
    }

    #[test]
    fn fourth_moment_on_two_point() {
        let gen = two_point();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let f = f_pm();
        assert_eq!(gen.increment_moment(&f, |d| d.powi(4)).unwrap(), 16.0);
        let r = identity_residuals(&gen, &spec, &f, &f).unwrap();
        assert!(r.fourth_moment < 1e-14);
    }

    #[test]
    fn witness_on_two_point() {
        let gen = two_point();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let w = construct_antisymmetric(&gen, &spec, &f_pm()).unwrap();
        assert!((w.get(0, 1) + 1.0).abs() < 1e-14);
        assert!((w.get(1, 0) - 1.0).abs() < 1e-14);
        assert_eq!(w.get(0, 0), 0.0);
        assert!(w.reconstruction_residual < 1e-14);
        // The literal form reconstructs LG = -2G instead of G.
        assert!((w.literal_form_residual - 3.0).abs() < 1e-12);
        let zero = construct_antisymmetric(&gen, &spec, &Functional::zeros(2)).unwrap();
        assert!(zero.antisymmetry_defect() == 0.0 && zero.get(0, 1) == 0.0);
        assert!(construct_antisymmetric(&gen, &spec, &Functional::constant(2, 1.0)).is_err());
    }

    #[test]
    fn csv_and_json_ingestion() {
        let csv_text = "mu,a,b\n0.5,0,1\n0.5,1,0\n";
        let gen = generator_from_csv(csv_text.as_bytes()).unwrap();
        assert_eq!(gen.space().labels(), &["a".to_string(), "b".to_string()]);
        let json = r#"{"labels":["a","b"],"mu":[0.5,0.5],"K":[[0,1],[1,0]]}"#;
        let gen2 = generator_from_json(json).unwrap();
        assert_eq!(gen.kernel().to_dense(), gen2.kernel().to_dense());
        let f = functional_from_csv("label,value\nb,1\na,-1\n".as_bytes(), gen.space()).unwrap();
        assert_eq!(f.values(), &[-1.0, 1.0]);
        let f2 = functional_from_csv("-1\n1\n".as_bytes(), gen.space()).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn remainder_bound_for_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = random_reversible_kernel(7, 0.6, &mut rng).unwrap();
        let f = Functional::from_fn(7, |_| rng.random::<f64>() - 0.5);
        let g = Functional::from_fn(7, |_| rng.random::<f64>() - 0.5);
        let (r, b) = remainder_with_bound(&gen, &f, &g, |x| x * x, |x| 2.0 * x, 2.0).unwrap();
        for x in 0..7 {
            assert!(r[x].abs() <= b[x] + 1e-15);
        }
    }
}
