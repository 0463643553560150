//! Symmetric kernels on a finite alphabet, degenerate U-statistics and their
//! contractions, the product formula for degenerate U-statistics, and normal
//! approximation bounds for symmetric statistics of i.i.d. samples.
//!
//! Tensors are stored row-major with coordinate 0 most significant. Kernels
//! of order 0 are constants.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{binomial, factorial, factorial_exact, guarded_sqrt, SQRT_2_OVER_PI};
use crate::stein_bounds::{BoundReport, NORMALIZATION_TOL};

/// Relative tolerance for exact symmetry of tensors.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Absolute tolerance for canonicality of derived kernels.
pub const CANONICAL_TOL: f64 = 1e-10;
/// Largest order symmetrized by a full permutation sum.
pub const SYMMETRIZE_CAP: usize = 8;
/// Largest tensor materialized.
pub const TENSOR_CAP: usize = 1 << 26;
/// Largest number of configurations enumerated in exact checks.
pub const ENUMERATION_CAP: usize = 2_000_000;

/// A probability vector on `{0, .., s-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseMeasure(Arc<Vec<f64>>);

impl BaseMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Invalid("base measure needs at least one letter".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("base measure weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("base measure has total mass {total}")));
        }
        Ok(Self(Arc::new(weights)))
    }

    pub fn uniform(s: usize) -> Result<Self> {
        Self::new(vec![1.0 / s as f64; s])
    }

    pub fn size(&self) -> usize {
        self.0.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    /// `nu^{⊗k}` as a flat row-major vector.
    pub fn product_weights(&self, k: usize) -> Vec<f64> {
        let mut w = vec![1.0];
        for _ in 0..k {
            w = w.iter().flat_map(|a| self.0.iter().map(move |b| a * b)).collect();
        }
        w
    }

    fn power(&self, k: usize) -> Result<usize> {
        self.size()
            .checked_pow(k as u32)
            .filter(|&v| v <= TENSOR_CAP)
            .ok_or(Error::CapExceeded { what: "tensor entries", size: usize::MAX, cap: TENSOR_CAP })
    }
}

/// A real function on `S^order`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    order: usize,
    measure: BaseMeasure,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(measure: BaseMeasure, order: usize, values: Vec<f64>) -> Result<Self> {
        let len = measure.power(order)?;
        if values.len() != len {
            return Err(Error::DimensionMismatch { expected: len, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor entry"));
        }
        Ok(Self { order, measure, values })
    }

    pub fn from_fn(measure: BaseMeasure, order: usize, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let len = measure.power(order)?;
        let s = measure.size();
        let mut digits = vec![0usize; order];
        let values = (0..len)
            .map(|idx| {
                decode(idx, s, &mut digits);
                f(&digits)
            })
            .collect();
        Self::new(measure, order, values)
    }

    pub fn constant(measure: BaseMeasure, c: f64) -> Result<Self> {
        Self::new(measure, 0, vec![c])
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn measure(&self) -> &BaseMeasure {
        &self.measure
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: &[usize]) -> f64 {
        let s = self.measure.size();
        self.values[x.iter().fold(0, |acc, &d| acc * s + d)]
    }

    pub fn norm_sq(&self) -> f64 {
        let w = self.measure.product_weights(self.order);
        self.values.iter().zip(&w).map(|(v, w)| w * v * v).sum()
    }

    /// `L^2(nu^order)` norm.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        let w = self.measure.product_weights(self.order);
        self.values.iter().zip(&w).map(|(v, w)| w * v).sum()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { order: self.order, measure: self.measure.clone(), values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self { order: self.order, measure: self.measure.clone(), values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect() })
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.measure != other.measure {
            return Err(Error::Invalid("tensors live on different base measures".into()));
        }
        if self.order != other.order {
            return Err(Error::DimensionMismatch { expected: self.order, got: other.order });
        }
        Ok(())
    }

    /// Integrates coordinate `i` against `nu`.
    pub fn integrate_coordinate(&self, i: usize) -> Self {
        let s = self.measure.size();
        let nu = self.measure.weights();
        let stride = s.pow((self.order - 1 - i) as u32);
        let out_len = self.values.len() / s;
        let values = (0..out_len)
            .map(|idx| {
                let (hi, lo) = (idx / stride, idx % stride);
                (0..s).map(|x| nu[x] * self.values[(hi * s + x) * stride + lo]).sum()
            })
            .collect();
        Self { order: self.order - 1, measure: self.measure.clone(), values }
    }

    /// Integrates out the last `j` coordinates.
    pub fn integrate_trailing(&self, j: usize) -> Self {
        let block = self.measure.size().pow(j as u32);
        let w = self.measure.product_weights(j);
        let values = self.values.chunks(block).map(|c| c.iter().zip(&w).map(|(v, w)| v * w).sum()).collect();
        Self { order: self.order - j, measure: self.measure.clone(), values }
    }

    /// `(I - E_i) f`.
    pub fn center_coordinate(&self, i: usize) -> Self {
        let s = self.measure.size();
        let stride = s.pow((self.order - 1 - i) as u32);
        let avg = self.integrate_coordinate(i);
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let (hi, lo) = (idx / (stride * s), idx % stride);
                v - avg.values[hi * stride + lo]
            })
            .collect();
        Self { order: self.order, measure: self.measure.clone(), values }
    }

    /// Completely degenerate part `prod_i (I - E_i) f`.
    pub fn canonical_part(&self) -> Self {
        (0..self.order).fold(self.clone(), |acc, i| acc.center_coordinate(i))
    }

    /// `max_i sup |E_i f|`; zero for constants.
    pub fn canonical_residual(&self) -> f64 {
        (0..self.order).map(|i| self.integrate_coordinate(i).sup()).fold(0.0, f64::max)
    }

    /// Largest deviation under a transposition or a full cycle of coordinates.
    pub fn symmetry_defect(&self) -> f64 {
        if self.order < 2 {
            return 0.0;
        }
        let s = self.measure.size();
        let mut d = vec![0usize; self.order];
        let mut worst = 0.0f64;
        for idx in 0..self.values.len() {
            decode(idx, s, &mut d);
            let v = self.values[idx];
            d.swap(0, 1);
            worst = worst.max((v - self.get(&d)).abs());
            d.swap(0, 1);
            d.rotate_left(1);
            worst = worst.max((v - self.get(&d)).abs());
        }
        worst
    }

    /// Average over all coordinate permutations.
    pub fn symmetrize(&self) -> Result<SymKernel> {
        if self.order > SYMMETRIZE_CAP {
            return Err(Error::CapExceeded { what: "symmetrization order", size: self.order, cap: SYMMETRIZE_CAP });
        }
        let perms = permutations(self.order);
        let s = self.measure.size();
        let inv = 1.0 / perms.len() as f64;
        let mut d = vec![0usize; self.order];
        let mut e = vec![0usize; self.order];
        let values = (0..self.values.len())
            .map(|idx| {
                decode(idx, s, &mut d);
                perms
                    .iter()
                    .map(|p| {
                        for (slot, &k) in e.iter_mut().zip(p) {
                            *slot = d[k];
                        }
                        self.get(&e)
                    })
                    .sum::<f64>()
                    * inv
            })
            .collect();
        Ok(SymKernel(Self { order: self.order, measure: self.measure.clone(), values }))
    }
}

/// A tensor invariant under coordinate permutations.
#[derive(Clone, Debug, PartialEq)]
pub struct SymKernel(Tensor);

impl SymKernel {
    /// Checks symmetry to `SYMMETRY_TOL` relative to the sup norm.
    pub fn new(t: Tensor) -> Result<Self> {
        let defect = t.symmetry_defect();
        if defect > SYMMETRY_TOL * (1.0 + t.sup()) {
            return Err(Error::Invalid(format!("kernel is not symmetric (defect {defect:e})")));
        }
        Ok(Self(t))
    }

    pub fn from_fn(measure: BaseMeasure, order: usize, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        Self::new(Tensor::from_fn(measure, order, f)?)
    }

    pub fn constant(measure: BaseMeasure, c: f64) -> Result<Self> {
        Ok(Self(Tensor::constant(measure, c)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(self.0.scale(c))
    }

    pub fn canonical_part(&self) -> Self {
        Self(self.0.canonical_part())
    }
}

impl std::ops::Deref for SymKernel {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        &self.0
    }
}

fn decode(mut idx: usize, s: usize, digits: &mut [usize]) {
    for d in digits.iter_mut().rev() {
        *d = idx % s;
        idx /= s;
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for i in 0..k {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..=i).map(move |pos| {
                    let mut q = p.clone();
                    q.insert(pos, i);
                    q
                })
            })
            .collect();
    }
    out
}

fn check_contraction(psi: &SymKernel, phi: &SymKernel, r: usize, l: usize) -> Result<()> {
    if psi.measure != phi.measure {
        return Err(Error::Invalid("kernels live on different base measures".into()));
    }
    if l > r || r > psi.order.min(phi.order) {
        return Err(Error::Invalid(format!("contraction needs 0 <= l <= r <= p ∧ q, got r = {r}, l = {l}")));
    }
    Ok(())
}

/// Visits every output entry of `psi ⋆_r^l phi` with its `nu` weight.
fn contraction_visit(psi: &SymKernel, phi: &SymKernel, r: usize, l: usize, mut visit: impl FnMut(usize, f64, f64)) {
    let m = &psi.measure;
    let (wx, wy, wt, ws) = (m.product_weights(l), m.product_weights(r - l), m.product_weights(psi.order - r), m.product_weights(phi.order - r));
    let (ny, nt, ns) = (wy.len(), wt.len(), ws.len());
    for y in 0..ny {
        for t in 0..nt {
            for s in 0..ns {
                let mut v = 0.0;
                for (x, w) in wx.iter().enumerate() {
                    v += w * psi.values[(x * ny + y) * nt + t] * phi.values[(x * ny + y) * ns + s];
                }
                visit((y * nt + t) * ns + s, v, wy[y] * wt[t] * ws[s]);
            }
        }
    }
}

/// The contraction `psi ⋆_r^l phi` on `S^{p+q-r-l}`, coordinates ordered as
/// (shared free, own of `psi`, own of `phi`).
pub fn contract(psi: &SymKernel, phi: &SymKernel, r: usize, l: usize) -> Result<Tensor> {
    check_contraction(psi, phi, r, l)?;
    let order = psi.order + phi.order - r - l;
    let mut values = vec![0.0; psi.measure.power(order)?];
    contraction_visit(psi, phi, r, l, |i, v, _| values[i] = v);
    Tensor::new(psi.measure.clone(), order, values)
}

/// `||psi ⋆_r^l phi||_2` without materializing the contraction.
pub fn contraction_norm(psi: &SymKernel, phi: &SymKernel, r: usize, l: usize) -> Result<f64> {
    check_contraction(psi, phi, r, l)?;
    psi.measure.power(psi.order + phi.order - r - l)?;
    let mut acc = 0.0;
    contraction_visit(psi, phi, r, l, |_, v, w| acc += w * v * v);
    Ok(acc.sqrt())
}

/// `alpha(p,q,t,r) = sqrt((p+q-t)!) / ((t-r)! (p-r)! (q-r)! (2r-t)!)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alpha {
    /// `(p+q-t)!`, the square of the numerator.
    pub numerator_sq: u128,
    pub denominator: u128,
}

impl Alpha {
    pub fn value(&self) -> f64 {
        (self.numerator_sq as f64).sqrt() / self.denominator as f64
    }

    /// `alpha^2` as a reduced fraction.
    pub fn squared(&self) -> (u128, u128) {
        let den = self.denominator * self.denominator;
        let g = gcd(self.numerator_sq, den);
        (self.numerator_sq / g, den / g)
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn alpha(p: usize, q: usize, t: usize, r: usize) -> Result<Alpha> {
    let pq = p.min(q);
    if p == 0 || q == 0 || t < 1 || t > (2 * pq).min(p + q - 1) || t > 2 * r || 2 * r > 2 * t.min(pq) {
        return Err(Error::Invalid(format!("alpha({p},{q},{t},{r}) is outside its index range")));
    }
    let f = |k: usize| factorial_exact(k as u64).ok_or_else(|| Error::Numerical("factorial overflow in alpha".into()));
    let denominator = [t - r, p - r, q - r, 2 * r - t]
        .iter()
        .try_fold(1u128, |acc, &k| f(k).and_then(|v| acc.checked_mul(v).ok_or_else(|| Error::Numerical("overflow in alpha".into()))))?;
    Ok(Alpha { numerator_sq: f(p + q - t)?, denominator })
}

/// All `(j, k, a, b)` with `j <= p, k <= q, b <= a <= r, b <= l,
/// a - b <= r - l, j + k - a - b <= p + q - r - l <= p + q - 1, a <= j ∧ k`.
pub fn q_set(p: usize, q: usize, r: usize, l: usize) -> Result<Vec<[usize; 4]>> {
    if l > r || r > p.min(q) {
        return Err(Error::Invalid(format!("Q({p},{q},{r},{l}) needs 0 <= l <= r <= p ∧ q")));
    }
    let mut out = Vec::new();
    if p + q - r - l + 1 > p + q {
        return Ok(out);
    }
    for j in 0..=p {
        for k in 0..=q {
            for a in 0..=r.min(j).min(k) {
                for b in 0..=a.min(l) {
                    if a - b <= r - l && j + k <= p + q - r - l + a + b {
                        out.push([j, k, a, b]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The lattice `(p, q, t, r)` with `1 <= p, q <= m`,
/// `1 <= t <= 2(p ∧ q) ∧ (p + q - 1)`, `ceil(t/2) <= r <= t ∧ p ∧ q`.
pub fn lattice(m: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for p in 1..=m {
        for q in 1..=m {
            let pq = p.min(q);
            for t in 1..=(2 * pq).min(p + q - 1) {
                for r in t.div_ceil(2)..=t.min(pq) {
                    out.push((p, q, t, r));
                }
            }
        }
    }
    out
}

/// `J_p(f)(x) = sum over p-subsets I of f(x_I)`.
pub fn u_statistic(kernel: &Tensor, sample: &[usize]) -> f64 {
    let p = kernel.order;
    if p == 0 {
        return kernel.values[0];
    }
    let n = sample.len();
    if p > n {
        return 0.0;
    }
    let s = kernel.measure.size();
    let mut idx: Vec<usize> = (0..p).collect();
    let mut total = 0.0;
    loop {
        total += kernel.values[idx.iter().fold(0, |acc, &i| acc * s + sample[i])];
        let mut i = p;
        while i > 0 && idx[i - 1] == n - p + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return total;
        }
        idx[i - 1] += 1;
        for j in i..p {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Hoeffding data of a U-statistic with kernel `psi` of order `m`.
#[derive(Clone, Debug)]
pub struct DegenerateFamily {
    pub m: usize,
    pub n: usize,
    /// `g_k` for `k = 0..=m`; `g_0 = E psi`, `g_m = psi`.
    pub g: Vec<SymKernel>,
    /// `psi_p` for `p = 1..=m`, stored at index `p - 1`.
    pub psi: Vec<SymKernel>,
    /// `Var(J_m(psi))`.
    pub sigma2: f64,
    pub canonical_residual: f64,
}

impl DegenerateFamily {
    pub fn mean(&self) -> f64 {
        self.g[0].values[0]
    }

    pub fn psi(&self, p: usize) -> &SymKernel {
        &self.psi[p - 1]
    }

    pub fn g(&self, k: usize) -> &SymKernel {
        &self.g[k]
    }

    /// `||g_k - E psi||_2`.
    pub fn g_hat_norm(&self, k: usize) -> Result<f64> {
        guarded_sqrt(self.g[k].norm_sq() - self.mean().powi(2), "variance of g_k")
    }

    /// `E[F_p^2] = C(n-p, m-p)^2 C(n, p) ||psi_p||^2 / sigma^2`.
    pub fn second_moment(&self, p: usize) -> f64 {
        let (n, m) = (self.n as u64, self.m as u64);
        binomial(n - p as u64, m - p as u64).powi(2) * binomial(n, p as u64) * self.psi(p).norm_sq() / self.sigma2
    }

    /// `n^{2m-p} ||psi_p||^2 / (sigma^2 ((m-p)!)^2 p!)`.
    pub fn second_moment_bound(&self, p: usize) -> f64 {
        let (n, m) = (self.n as f64, self.m);
        n.powi((2 * m - p) as i32) * self.psi(p).norm_sq() / (self.sigma2 * factorial((m - p) as u64).powi(2) * factorial(p as u64))
    }

    /// `phi_p = C(n-p, m-p) psi_p / sigma`, the kernels of the normalized statistic.
    pub fn phi(&self, p: usize) -> SymKernel {
        self.psi(p).scale(binomial((self.n - p) as u64, (self.m - p) as u64) / self.sigma2.sqrt())
    }
}

pub fn derive_degenerate(psi: &SymKernel, n: usize) -> Result<DegenerateFamily> {
    let m = psi.order;
    if m == 0 || n < m {
        return Err(Error::Invalid(format!("need 1 <= m <= n, got m = {m}, n = {n}")));
    }
    let g: Vec<SymKernel> = (0..=m).map(|k| SymKernel(psi.0.integrate_trailing(m - k))).collect();
    let comps: Vec<SymKernel> = (1..=m).map(|p| g[p].canonical_part()).collect();
    let canonical_residual = comps.iter().map(|c| c.canonical_residual()).fold(0.0, f64::max);
    if canonical_residual > CANONICAL_TOL * (1.0 + psi.sup()) {
        return Err(Error::Numerical(format!("derived kernels fail canonicality ({canonical_residual:e})")));
    }
    let sigma2 = (1..=m)
        .map(|p| binomial((n - p) as u64, (m - p) as u64).powi(2) * binomial(n as u64, p as u64) * comps[p - 1].norm_sq())
        .sum();
    Ok(DegenerateFamily { m, n, g, psi: comps, sigma2, canonical_residual })
}

/// Kernels of a symmetric function of `n` i.i.d. letters, `phi_p` for
/// `p = 1..=n` at index `p - 1`, with the mean.
pub fn symmetric_decomposition(f: &SymKernel) -> Result<(f64, Vec<SymKernel>)> {
    let n = f.order;
    let comps = (1..=n).map(|p| SymKernel(f.0.integrate_trailing(n - p)).canonical_part()).collect();
    Ok((f.mean(), comps))
}

fn multinomial(n: usize, parts: &[usize]) -> f64 {
    let mut rest = n;
    let mut acc = 1.0;
    for &k in parts {
        acc *= binomial(rest as u64, k as u64);
        rest -= k;
    }
    acc
}

/// One order `p + q - t` of the product formula.
#[derive(Clone, Debug)]
pub struct ProductTerm {
    pub t: usize,
    pub kernel: SymKernel,
}

/// Kernels `chi_{p+q-t}`, `t = 0..=2(p ∧ q)`, with
/// `J_p(psi) J_q(phi) = sum_t J_{p+q-t}(chi_{p+q-t})` for `n >= p + q`.
pub fn product_formula(psi: &SymKernel, phi: &SymKernel, n: usize) -> Result<Vec<ProductTerm>> {
    let (p, q) = (psi.order, phi.order);
    if p == 0 || q == 0 {
        return Err(Error::Invalid("product formula needs kernels of order >= 1".into()));
    }
    if n < p + q {
        return Err(Error::Precondition(format!("product formula needs n >= p + q = {}", p + q)));
    }
    for k in [psi, phi] {
        let res = k.canonical_residual();
        if res > CANONICAL_TOL * (1.0 + k.sup()) {
            return Err(Error::Precondition(format!("kernel is not canonical (residual {res:e})")));
        }
    }
    let pq = p.min(q);
    (0..=2 * pq)
        .map(|t| {
            let order = p + q - t;
            let mut chi = Tensor::new(psi.measure.clone(), order, vec![0.0; psi.measure.power(order)?])?;
            for r in t.div_ceil(2)..=t.min(pq) {
                let c = binomial((n + t - p - q) as u64, (t - r) as u64) * multinomial(order, &[p - r, q - r, 2 * r - t]);
                let part = contract(psi, phi, r, t - r)?.symmetrize()?.canonical_part();
                chi = chi.add(&part.0.scale(c))?;
            }
            Ok(ProductTerm { t, kernel: SymKernel(chi) })
        })
        .collect()
}

/// Enumerates `S^n` with weights, calling `f(sample)`.
fn for_each_configuration(measure: &BaseMeasure, n: usize, mut f: impl FnMut(&[usize], f64)) -> Result<()> {
    let s = measure.size();
    let total = s.checked_pow(n as u32).filter(|&v| v <= ENUMERATION_CAP).ok_or(Error::CapExceeded {
        what: "sample configurations",
        size: usize::MAX,
        cap: ENUMERATION_CAP,
    })?;
    let nu = measure.weights();
    let mut x = vec![0usize; n];
    for idx in 0..total {
        decode(idx, s, &mut x);
        f(&x, x.iter().map(|&v| nu[v]).product());
    }
    Ok(())
}

/// `max_x |J_p(psi) J_q(phi) - sum_t J_{p+q-t}(chi_{p+q-t})|` over `S^n`.
pub fn verify_product_formula(psi: &SymKernel, phi: &SymKernel, n: usize) -> Result<f64> {
    let terms = product_formula(psi, phi, n)?;
    let mut worst = 0.0f64;
    for_each_configuration(&psi.measure, n, |x, _| {
        let lhs = u_statistic(psi, x) * u_statistic(phi, x);
        let rhs: f64 = terms.iter().map(|t| u_statistic(&t.kernel, x)).sum();
        worst = worst.max((lhs - rhs).abs());
    })?;
    Ok(worst)
}

/// Exact `E[J_p(a) J_q(b)]` over `S^n`.
pub fn u_statistic_inner(a: &Tensor, b: &Tensor, n: usize) -> Result<f64> {
    let mut acc = 0.0;
    for_each_configuration(&a.measure, n, |x, w| acc += w * u_statistic(a, x) * u_statistic(b, x))?;
    Ok(acc)
}

fn subsets(n: usize, k: usize) -> Vec<u64> {
    (0u64..1 << n).filter(|s| s.count_ones() as usize == k).collect()
}

fn in_s0(i: u64, j: u64, k: u64, l: u64) -> bool {
    let cond = |a: u64, b: u64, c: u64| {
        let ab = a & b;
        ab != 0 && ab == a & !(a & c) && ab != a
    };
    i & k == 0 && j & l == 0 && cond(i, j, l) && cond(j, i, k) && cond(k, j, l) && cond(l, i, k)
}

/// `S_0(V, W)` for `V = J_q(phi)`, `W = J_p(psi)`: the sum of
/// `E[V_I V_J W_K W_L]` over the constrained quadruples, by exact expectation.
pub fn s0_quantity(phi: &SymKernel, psi: &SymKernel, n: usize) -> Result<f64> {
    if phi.measure != psi.measure {
        return Err(Error::Invalid("kernels live on different base measures".into()));
    }
    let (q, p) = (phi.order, psi.order);
    if n > 20 {
        return Err(Error::CapExceeded { what: "index set n", size: n, cap: 20 });
    }
    let (dq, dp) = (subsets(n, q), subsets(n, p));
    let count = (dq.len() as u128).pow(2) * (dp.len() as u128).pow(2);
    if count > 1u128 << 28 {
        return Err(Error::CapExceeded { what: "index quadruples", size: count.min(usize::MAX as u128) as usize, cap: 1 << 28 });
    }
    let mut cache: HashMap<[u64; 4], f64> = HashMap::new();
    let mut total = 0.0;
    for &i in &dq {
        for &j in &dq {
            for &k in &dp {
                for &l in &dp {
                    if !in_s0(i, j, k, l) {
                        continue;
                    }
                    let key = relabel([i, j, k, l]);
                    let v = match cache.get(&key) {
                        Some(v) => *v,
                        None => {
                            let v = pattern_expectation(phi, psi, key)?;
                            cache.insert(key, v);
                            v
                        }
                    };
                    total += v;
                }
            }
        }
    }
    Ok(total)
}

/// Compresses the union of the four sets onto its first bits.
fn relabel(sets: [u64; 4]) -> [u64; 4] {
    let union = sets.iter().fold(0, |a, s| a | s);
    let positions: Vec<u32> = (0..64).filter(|b| union >> b & 1 == 1).collect();
    sets.map(|s| positions.iter().enumerate().fold(0u64, |acc, (new, &old)| acc | ((s >> old & 1) << new)))
}

fn pattern_expectation(phi: &SymKernel, psi: &SymKernel, sets: [u64; 4]) -> Result<f64> {
    let u = sets.iter().fold(0, |a, s| a | s).count_ones() as usize;
    let pick = |set: u64, x: &[usize]| -> Vec<usize> { (0..u).filter(|b| set >> b & 1 == 1).map(|b| x[b]).collect() };
    let mut acc = 0.0;
    for_each_configuration(&phi.measure, u, |x, w| {
        acc += w * phi.get(&pick(sets[0], x)) * phi.get(&pick(sets[1], x)) * psi.get(&pick(sets[2], x)) * psi.get(&pick(sets[3], x));
    })?;
    Ok(acc)
}

/// Counts of the constrained quadruples by `r = |I ∩ J|`.
pub fn s0_counts(n: usize, q: usize, p: usize) -> BTreeMap<usize, usize> {
    let (dq, dp) = (subsets(n, q), subsets(n, p));
    let mut out = BTreeMap::new();
    for &i in &dq {
        for &j in &dq {
            for &k in &dp {
                for &l in &dp {
                    if in_s0(i, j, k, l) {
                        *out.entry((i & j).count_ones() as usize).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Contraction tables and bounds.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationMode {
    Exact,
    #[serde(rename = "mc")]
    MonteCarlo,
}

/// One `(p, q, t, r)` lattice point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionEntry {
    pub p: usize,
    pub q: usize,
    pub t: usize,
    pub r: usize,
    pub alpha: f64,
    pub alpha_squared: (u128, u128),
    pub norm: f64,
    pub standard_error: Option<f64>,
    /// Maximizing `(j, k, a, b)` when the norm is a maximum over a Q set.
    pub argmax: Option<[usize; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionTable {
    pub mode: EstimationMode,
    pub entries: Vec<ContractionEntry>,
}

impl ContractionTable {
    pub fn get(&self, p: usize, q: usize, t: usize, r: usize) -> Result<&ContractionEntry> {
        self.entries
            .iter()
            .find(|e| (e.p, e.q, e.t, e.r) == (p, q, t, r))
            .ok_or_else(|| Error::Invalid(format!("contraction table has no entry ({p},{q},{t},{r})")))
    }

    fn build(m: usize, mode: EstimationMode, mut norm: impl FnMut(usize, usize, usize, usize) -> Result<(f64, Option<f64>, Option<[usize; 4]>)>) -> Result<Self> {
        let entries = lattice(m)
            .into_iter()
            .map(|(p, q, t, r)| {
                let a = alpha(p, q, t, r)?;
                let (value, standard_error, argmax) = norm(p, q, t, r)?;
                Ok(ContractionEntry { p, q, t, r, alpha: a.value(), alpha_squared: a.squared(), norm: value, standard_error, argmax })
            })
            .collect::<Result<_>>()?;
        Ok(Self { mode, entries })
    }
}

/// `||k_p ⋆_r^{t-r} k_q||` for kernels `k_p` at index `p - 1`.
pub fn kernel_contraction_table(kernels: &[SymKernel]) -> Result<ContractionTable> {
    ContractionTable::build(kernels.len(), EstimationMode::Exact, |p, q, t, r| {
        Ok((contraction_norm(&kernels[p - 1], &kernels[q - 1], r, t - r)?, None, None))
    })
}

/// `max over Q(p,q,r,t-r) of ||g_j ⋆_a^b g_k||`, exactly.
pub fn g_contraction_table(family: &DegenerateFamily) -> Result<ContractionTable> {
    let mut cache: HashMap<[usize; 4], f64> = HashMap::new();
    ContractionTable::build(family.m, EstimationMode::Exact, |p, q, t, r| {
        let mut best: Option<(f64, [usize; 4])> = None;
        for key in q_set(p, q, r, t - r)? {
            let v = match cache.get(&key) {
                Some(v) => *v,
                None => {
                    let [j, k, a, b] = key;
                    let v = contraction_norm(family.g(j), family.g(k), a, b)?;
                    cache.insert(key, v);
                    v
                }
            };
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, key));
            }
        }
        let (v, key) = best.ok_or_else(|| Error::Invalid(format!("Q({p},{q},{r},{}) is empty", t - r)))?;
        Ok((v, None, Some(key)))
    })
}

/// Caller-provided `K(p, q, r, l)` constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KConstants {
    pub values: BTreeMap<String, f64>,
    /// Missing constants are an error instead of defaulting to 1.
    pub strict: bool,
}

impl KConstants {
    /// All constants 1, reported as relative-rate mode.
    pub fn relative_rate() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let values: BTreeMap<String, f64> = serde_json::from_str(text)?;
        for (k, v) in &values {
            if k.split(',').map(|s| s.trim().parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_or(true, |v| v.len() != 4) {
                return Err(Error::Invalid(format!("K-constant key {k:?} is not \"p,q,r,l\"")));
            }
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Invalid(format!("K constant {k} must be positive")));
            }
        }
        Ok(Self { values, strict: true })
    }

    /// `(value, defaulted)`.
    pub fn get(&self, p: usize, q: usize, r: usize, l: usize) -> Result<(f64, bool)> {
        match self.values.get(&format!("{p},{q},{r},{l}")) {
            Some(v) => Ok((*v, false)),
            None if self.strict => Err(Error::MissingConstant(format!("K({p},{q},{r},{l})"))),
            None => Ok((1.0, true)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetricVariant {
    GenBoundSymStat,
    SymUstat1,
    SymUstat2,
}

impl SymmetricVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "genboundsymstat" => Ok(Self::GenBoundSymStat),
            "symustat1" => Ok(Self::SymUstat1),
            "symustat2" => Ok(Self::SymUstat2),
            _ => Err(Error::Invalid(format!("unknown symmetric-statistic variant {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GenBoundSymStat => "genboundsymstat",
            Self::SymUstat1 => "symustat1",
            Self::SymUstat2 => "symustat2",
        }
    }
}

/// Closures defining one bound of the common two-term shape.
struct Assembly<'a> {
    orders: usize,
    /// Summand of the first term at `(p, q, t, r)`, excluding `(p+q-1)/(2p)`.
    first: &'a dyn Fn(usize, usize, usize, usize) -> Result<f64>,
    /// Summand of the inner `(t, r)` sum for order `q`.
    inner: &'a dyn Fn(usize, usize, usize) -> Result<f64>,
    /// `sqrt(E F_p^2)` or its replacement.
    outer: &'a dyn Fn(usize) -> f64,
    /// `2^{1/4} sqrt(q) n^{-1/4} sqrt(E F_q^2)` or its replacement.
    mid: &'a dyn Fn(usize) -> f64,
}

fn assemble(a: &Assembly) -> Result<(f64, f64)> {
    let mut first = 0.0;
    for (p, q, t, r) in lattice(a.orders) {
        first += (p + q - 1) as f64 / (2 * p) as f64 * (a.first)(p, q, t, r)?;
    }
    let mut bracket = 0.0;
    for q in 1..=a.orders {
        let mut s = 0.0;
        for t in 1..=2 * q - 1 {
            for r in t.div_ceil(2)..=t.min(q) {
                s += (a.inner)(q, t, r)?;
            }
        }
        let qf = q as f64;
        bracket += qf.powf(0.25) * ((a.mid)(q) + ((2.0 * qf - 1.0) / qf).powf(0.25) * s);
    }
    let outer: f64 = (1..=a.orders).map(|p| (a.outer)(p) / (p as f64).sqrt()).sum();
    Ok((SQRT_2_OVER_PI * first, std::f64::consts::SQRT_2 * outer * bracket * bracket))
}

fn two_term_report(variant: &str, terms: (f64, f64), n: usize) -> BoundReport {
    BoundReport::new(variant)
        .term("contraction_sum", terms.0)
        .term("fourth_moment", terms.1)
        .constant("sqrt(2/pi)", SQRT_2_OVER_PI, "sup norm of psi_h' for 1-Lipschitz h")
        .constant("kappa_q", 2.0, "kappa_q = 2q for symmetric functionals, S_0 >= 0")
        .setting("n", n.to_string())
}

/// Bound for a normalized symmetric statistic with kernels `phi_p`
/// (`p = 1..`, at index `p - 1`) from its product-formula expansion.
pub fn bound_genboundsymstat(phis: &[SymKernel], n: usize) -> Result<BoundReport> {
    if phis.is_empty() || phis.len() > n {
        return Err(Error::Invalid("need between 1 and n kernels".into()));
    }
    let second: Vec<f64> = phis.iter().enumerate().map(|(i, k)| binomial(n as u64, i as u64 + 1) * k.norm_sq()).collect();
    let var: f64 = second.iter().sum();
    if (var - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { mean: 0.0, variance: var });
    }
    let table = kernel_contraction_table(phis)?;
    let nf = n as f64;
    let first = |p: usize, q: usize, t: usize, r: usize| -> Result<f64> {
        let e = table.get(p, q, t, r)?;
        Ok(e.alpha * e.norm * nf.powf((p + q + t) as f64 / 2.0 - r as f64))
    };
    let inner = |q: usize, t: usize, r: usize| -> Result<f64> {
        let e = table.get(q, q, t, r)?;
        Ok(e.alpha.sqrt() * e.norm.sqrt() * nf.powf((2 * q + t - 2 * r) as f64 / 4.0))
    };
    let outer = |p: usize| second[p - 1].sqrt();
    let mid = |q: usize| 2f64.powf(0.25) * (q as f64).sqrt() * nf.powf(-0.25) * second[q - 1].sqrt();
    let terms = assemble(&Assembly { orders: phis.len(), first: &first, inner: &inner, outer: &outer, mid: &mid })?;
    two_term_report("genboundsymstat", terms, n).setting("contractions", "exact").finish()
}

/// Global summary of a U-statistic needed beside the contraction table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UstatSummary {
    pub m: usize,
    pub n: usize,
    pub sigma2: f64,
    /// `E[F_p^2]`, `p = 1..=m`; `None` uses `E[F_p^2] <= 1`.
    pub second_moments: Option<Vec<f64>>,
    /// `||psi_p||_2` (symustat1) or `||g_p - E psi||_2` (symustat2) for the
    /// second display; `None` skips it.
    pub component_norms: Option<Vec<f64>>,
}

impl UstatSummary {
    fn check(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::Precondition(format!("U-statistic variance must be positive, got {}", self.sigma2)));
        }
        if self.m == 0 || self.n < self.m {
            return Err(Error::Invalid(format!("need 1 <= m <= n, got m = {}, n = {}", self.m, self.n)));
        }
        Ok(())
    }
}

/// U-statistic bounds from a contraction table: `||psi_p ⋆ psi_q||` norms
/// for symustat1, `max_Q ||g_j ⋆ g_k||` norms for symustat2.
pub fn bound_ustat_table(summary: &UstatSummary, table: &ContractionTable, variant: SymmetricVariant, k: &KConstants) -> Result<BoundReport> {
    summary.check()?;
    if variant == SymmetricVariant::GenBoundSymStat {
        return Err(Error::Invalid("genboundsymstat takes phi kernels, use bound_genboundsymstat".into()));
    }
    let (m, nf, sigma) = (summary.m, summary.n as f64, summary.sigma2.sqrt());
    let with_k = variant == SymmetricVariant::SymUstat2;
    let defaulted = std::cell::Cell::new(false);
    let kval = |p: usize, q: usize, r: usize, l: usize| -> Result<f64> {
        if !with_k {
            return Ok(1.0);
        }
        let (v, d) = k.get(p, q, r, l)?;
        defaulted.set(defaulted.get() || d);
        Ok(v)
    };
    let fact = |k: usize| factorial(k as u64);
    let first = |p: usize, q: usize, t: usize, r: usize| -> Result<f64> {
        let e = table.get(p, q, t, r)?;
        Ok(e.alpha * kval(p, q, r, t - r)? * e.norm / (summary.sigma2 * fact(m - p) * fact(m - q))
            * nf.powf(2.0 * m as f64 - (p + q + 2 * r - t) as f64 / 2.0))
    };
    let inner = |q: usize, t: usize, r: usize| -> Result<f64> {
        let e = table.get(q, q, t, r)?;
        Ok(e.alpha.sqrt() * kval(q, q, r, t - r)?.sqrt() * e.norm.sqrt() / sigma * nf.powf(m as f64 - (2 * q + 2 * r - t) as f64 / 4.0))
    };
    let second = |p: usize| summary.second_moments.as_ref().map_or(1.0, |s| s[p - 1]);
    let outer = |p: usize| second(p).sqrt();
    let mid = |q: usize| 2f64.powf(0.25) * (q as f64).sqrt() * nf.powf(-0.25) * second(q).sqrt();
    let terms = assemble(&Assembly { orders: m, first: &first, inner: &inner, outer: &outer, mid: &mid })?;
    let mode = match table.mode {
        EstimationMode::Exact => "exact",
        EstimationMode::MonteCarlo => "mc",
    };
    let mut report = two_term_report(variant.name(), terms, summary.n)
        .setting("m", m.to_string())
        .setting("sigma2", format!("{:.17e}", summary.sigma2))
        .setting("contractions", mode);
    if summary.second_moments.is_none() {
        report = report.flag("second moments bounded by 1");
    }
    if with_k {
        report = report.setting("q_set_range", "j, k >= 0 with g_0 = E psi");
    }
    if let Some(norms) = &summary.component_norms {
        let outer2 = |p: usize| nf.powf(m as f64 - p as f64 / 2.0) * norms[p - 1] / (sigma * fact(m - p) * fact(p).sqrt());
        let mid2 = |q: usize| 2f64.powf(0.25) * nf.powf(m as f64 - q as f64 / 2.0 - 0.25) * norms[q - 1] / (sigma * fact(m - q) * fact(q - 1).sqrt());
        let terms2 = assemble(&Assembly { orders: m, first: &first, inner: &inner, outer: &outer2, mid: &mid2 })?;
        let name = format!("{}_second", variant.name());
        report = report.with_related(two_term_report(&name, terms2, summary.n).setting("contractions", mode).finish()?);
    }
    if defaulted.get() {
        report = report.flag("relative-rate mode: K constants defaulted to 1");
    }
    report.finish()
}

/// Exact U-statistic bound from the derived kernels.
pub fn bound_symmetric(family: &DegenerateFamily, variant: SymmetricVariant, k: &KConstants) -> Result<BoundReport> {
    if !(family.sigma2 > 0.0) {
        return Err(Error::Precondition(format!("U-statistic variance must be positive, got {}", family.sigma2)));
    }
    let m = family.m;
    match variant {
        SymmetricVariant::GenBoundSymStat => {
            let phis: Vec<SymKernel> = (1..=m).map(|p| family.phi(p)).collect();
            bound_genboundsymstat(&phis, family.n)
        }
        SymmetricVariant::SymUstat1 => {
            let table = kernel_contraction_table(&family.psi)?;
            let summary = UstatSummary {
                m,
                n: family.n,
                sigma2: family.sigma2,
                second_moments: Some((1..=m).map(|p| family.second_moment(p)).collect()),
                component_norms: Some(family.psi.iter().map(|k| k.norm()).collect()),
            };
            bound_ustat_table(&summary, &table, variant, k)
        }
        SymmetricVariant::SymUstat2 => {
            let table = g_contraction_table(family)?;
            let summary = UstatSummary {
                m,
                n: family.n,
                sigma2: family.sigma2,
                second_moments: Some((1..=m).map(|p| family.second_moment(p)).collect()),
                component_norms: Some((1..=m).map(|p| family.g_hat_norm(p)).collect::<Result<_>>()?),
            };
            bound_ustat_table(&summary, &table, variant, k)
        }
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo.

/// A law for point variables, possibly with importance weights.
pub trait PointModel: Sync {
    type Point: Clone + Send + Sync;

    /// Draws `vars` variables that enter the kernel through `tuples` and
    /// returns them with a weight making `weight * prod kernel(tuple)` an
    /// unbiased estimate of the expectation under the i.i.d. law.
    fn sample_joint(&self, vars: usize, tuples: &[Vec<usize>], rng: &mut ChaCha8Rng) -> (Vec<Self::Point>, f64);
}

/// I.i.d. letters from a base measure.
#[derive(Clone, Debug)]
pub struct FiniteModel {
    dist: WeightedIndex<f64>,
}

impl FiniteModel {
    pub fn new(measure: &BaseMeasure) -> Result<Self> {
        Ok(Self { dist: WeightedIndex::new(measure.weights()).map_err(|e| Error::Invalid(e.to_string()))? })
    }
}

impl PointModel for FiniteModel {
    type Point = usize;
    fn sample_joint(&self, vars: usize, _: &[Vec<usize>], rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
        ((0..vars).map(|_| self.dist.sample(rng)).collect(), 1.0)
    }
}

/// `count` draws of `(J_m(psi) - C(n, m) E psi) / sigma` for i.i.d. samples
/// of size `n` from `measure`, reproducible for fixed `seed`.
pub fn sample_normalized_ustat(family: &DegenerateFamily, measure: &BaseMeasure, count: usize, seed: u64) -> Result<Vec<f64>> {
    if !(family.sigma2 > 0.0) {
        return Err(Error::Precondition(format!("U-statistic variance must be positive, got {}", family.sigma2)));
    }
    let psi = family.g(family.m).tensor();
    if measure.size() != psi.measure.size() {
        return Err(Error::DimensionMismatch { expected: psi.measure.size(), got: measure.size() });
    }
    let model = FiniteModel::new(measure)?;
    let shift = binomial(family.n as u64, family.m as u64) * family.mean();
    let sd = family.sigma2.sqrt();
    let blocks = count.div_ceil(MC_BLOCK);
    let out: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            (0..MC_BLOCK.min(count - b * MC_BLOCK))
                .map(|_| {
                    let (sample, _) = model.sample_joint(family.n, &[], &mut rng);
                    (u_statistic(psi, &sample) - shift) / sd
                })
                .collect()
        })
        .collect();
    Ok(out.concat())
}

/// Mean with standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub samples: usize,
}

/// Default number of point tuples per block.
pub const MC_BLOCK: usize = 100_000;

/// `E[prod_tuples kernel(x_tuple)]` over `samples` draws split into
/// per-block streams of `seed`.
pub fn mc_product_expectation<M: PointModel>(
    model: &M,
    kernel: &(dyn Fn(&[M::Point]) -> f64 + Sync),
    vars: usize,
    tuples: &[Vec<usize>],
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::Invalid("Monte Carlo needs at least two samples".into()));
    }
    let blocks = samples.div_ceil(MC_BLOCK);
    let sums: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = MC_BLOCK.min(samples - b * MC_BLOCK);
            let mut buf = Vec::new();
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let (pts, w) = model.sample_joint(vars, tuples, &mut rng);
                let mut v = w;
                for t in tuples {
                    if v == 0.0 {
                        break;
                    }
                    buf.clear();
                    buf.extend(t.iter().map(|&i| pts[i].clone()));
                    v *= kernel(&buf);
                }
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nf = samples as f64;
    let mean = s / nf;
    let var = ((s2 / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
    if !mean.is_finite() {
        return Err(Error::NonFinite("Monte Carlo mean"));
    }
    Ok(McEstimate { mean, standard_error: (var / nf).sqrt(), samples })
}

/// Variables and kernel tuples whose product has expectation
/// `||g_j ⋆_a^b g_k||^2` for a kernel of order `m`.
pub fn contraction_tuples(m: usize, j: usize, k: usize, a: usize, b: usize) -> (usize, Vec<Vec<usize>>) {
    let mut next = 0;
    let mut take = |c: usize| {
        let v: Vec<usize> = (next..next + c).collect();
        next += c;
        v
    };
    let (x, x2, y, t, s) = (take(b), take(b), take(a - b), take(j - a), take(k - a));
    let (u, u2, v, v2) = (take(m - j), take(m - j), take(m - k), take(m - k));
    let cat = |parts: &[&Vec<usize>]| parts.iter().flat_map(|p| p.iter().copied()).collect::<Vec<_>>();
    let tuples = vec![cat(&[&x, &y, &t, &u]), cat(&[&x, &y, &s, &v]), cat(&[&x2, &y, &t, &u2]), cat(&[&x2, &y, &s, &v2])];
    (next, tuples)
}

/// Monte Carlo `||g_j ⋆_a^b g_k||` with a delta-method standard error.
pub fn mc_g_contraction_norm<M: PointModel>(
    model: &M,
    kernel: &(dyn Fn(&[M::Point]) -> f64 + Sync),
    m: usize,
    key: [usize; 4],
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let [j, k, a, b] = key;
    if j > m || k > m || b > a || a > j.min(k) {
        return Err(Error::Invalid(format!("invalid contraction index {key:?} for order {m}")));
    }
    let (vars, tuples) = contraction_tuples(m, j, k, a, b);
    let sq = mc_product_expectation(model, kernel, vars, &tuples, samples, seed)?;
    let norm = sq.mean.max(0.0).sqrt();
    let standard_error = if norm > 0.0 { sq.standard_error / (2.0 * norm) } else { sq.standard_error.sqrt() };
    Ok(McEstimate { mean: norm, standard_error, samples })
}

/// Monte Carlo symustat2 table; each quadruple uses its own stream.
pub fn g_contraction_table_mc<M: PointModel>(
    model: &M,
    kernel: &(dyn Fn(&[M::Point]) -> f64 + Sync),
    m: usize,
    samples: usize,
    seed: u64,
) -> Result<ContractionTable> {
    let mut cache: HashMap<[usize; 4], McEstimate> = HashMap::new();
    ContractionTable::build(m, EstimationMode::MonteCarlo, |p, q, t, r| {
        let mut best: Option<(McEstimate, [usize; 4])> = None;
        for key in q_set(p, q, r, t - r)? {
            let est = match cache.get(&key) {
                Some(e) => *e,
                None => {
                    let stream = key.iter().fold(seed, |acc, &v| acc.wrapping_mul(1_000_003).wrapping_add(v as u64 + 1));
                    let e = mc_g_contraction_norm(model, kernel, m, key, samples, stream)?;
                    cache.insert(key, e);
                    e
                }
            };
            if best.is_none_or(|(b, _)| est.mean > b.mean) {
                best = Some((est, key));
            }
        }
        let (e, key) = best.ok_or_else(|| Error::Invalid("empty Q set".into()))?;
        Ok((e.mean, Some(e.standard_error), Some(key)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bit() -> BaseMeasure {
        BaseMeasure::uniform(2).unwrap()
    }

    fn rad(x: usize) -> f64 {
        2.0 * x as f64 - 1.0
    }

    #[test]
    fn linear_kernel_family() {
        let psi = SymKernel::from_fn(bit(), 1, |x| rad(x[0])).unwrap();
        let fam = derive_degenerate(&psi, 7).unwrap();
        assert!((fam.sigma2 - 7.0).abs() < 1e-12);
        assert!(fam.psi(1).tensor().add(&psi.scale(-1.0)).unwrap().sup() < 1e-15);
    }

    #[test]
    fn product_and_sum_kernels() {
        let prod = SymKernel::from_fn(bit(), 2, |x| rad(x[0]) * rad(x[1])).unwrap();
        let fam = derive_degenerate(&prod, 4).unwrap();
        assert!(fam.g(1).sup() < 1e-15 && fam.psi(1).sup() < 1e-15);
        assert!(fam.psi(2).tensor().add(&prod.scale(-1.0)).unwrap().sup() < 1e-15);
        let sum = SymKernel::from_fn(bit(), 2, |x| rad(x[0]) + rad(x[1])).unwrap();
        let fam = derive_degenerate(&sum, 4).unwrap();
        for x in 0..2 {
            assert!((fam.g(1).get(&[x]) - rad(x)).abs() < 1e-15);
        }
        assert!(fam.psi(2).sup() < 1e-15);
        // Var(sum_{i<j} (x_i + x_j)) = (n-1)^2 n.
        assert!((fam.sigma2 - 36.0).abs() < 1e-12);
    }

    #[test]
    fn variance_matches_enumeration() {
        let nu = BaseMeasure::new(vec![0.2, 0.5, 0.3]).unwrap();
        let psi = SymKernel::from_fn(nu.clone(), 2, |x| (x[0] * x[1]) as f64 + (x[0] + x[1]) as f64 * 0.5 + if x[0] == x[1] { 1.0 } else { 0.0 }).unwrap();
        let n = 5;
        let fam = derive_degenerate(&psi, n).unwrap();
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for_each_configuration(&nu, n, |x, w| {
            let g = u_statistic(&psi, x);
            m1 += w * g;
            m2 += w * g * g;
        })
        .unwrap();
        assert!((m2 - m1 * m1 - fam.sigma2).abs() < 1e-9 * fam.sigma2);
        for p in 1..=2 {
            let var = u_statistic_inner(fam.psi(p), fam.psi(p), n).unwrap();
            assert!((var - binomial(n as u64, p as u64) * fam.psi(p).norm_sq()).abs() < 1e-9);
            assert!(fam.second_moment(p) <= 1.0 + 1e-12);
            assert!(fam.second_moment(p) <= fam.second_moment_bound(p) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn contraction_examples() {
        let psi = SymKernel::from_fn(bit(), 1, |x| rad(x[0])).unwrap();
        let c = contract(&psi, &psi, 1, 1).unwrap();
        assert_eq!(c.order(), 0);
        assert!((c.values()[0] - 1.0).abs() < 1e-15);
        let c = contract(&psi, &psi, 1, 0).unwrap();
        assert!(c.values().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!((contraction_norm(&psi, &psi, 0, 0).unwrap() - 1.0).abs() < 1e-15);
        assert!(contract(&psi, &psi, 0, 1).is_err());
        assert!(contract(&psi, &psi, 2, 0).is_err());
    }

    #[test]
    fn alpha_values() {
        assert_eq!(alpha(1, 1, 1, 1).unwrap().value(), 1.0);
        assert!((alpha(2, 2, 2, 1).unwrap().value() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(alpha(2, 2, 2, 1).unwrap().squared(), (2, 1));
        assert_eq!(alpha(2, 2, 3, 2).unwrap().value(), 1.0);
        assert!(alpha(1, 1, 2, 1).is_err());
        assert!(alpha(2, 2, 3, 1).is_err());
    }

    #[test]
    fn q_set_examples() {
        assert_eq!(q_set(1, 1, 1, 0).unwrap(), vec![[0, 0, 0, 0], [0, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 0]]);
        // Condition (5) forces r + l >= 1.
        assert!(q_set(2, 3, 0, 0).unwrap().is_empty());
        assert!(q_set(1, 1, 0, 1).is_err());
    }

    #[test]
    fn product_formula_small() {
        let psi = SymKernel::from_fn(bit(), 1, |x| rad(x[0])).unwrap();
        assert!(verify_product_formula(&psi, &psi, 3).unwrap() < 1e-12);
        let terms = product_formula(&psi, &psi, 3).unwrap();
        assert_eq!(terms.len(), 3);
        // t = 0 is the symmetrized tensor product times C(2, 1).
        assert!((terms[0].kernel.get(&[1, 0]) + 2.0).abs() < 1e-15);
        let prod = SymKernel::from_fn(bit(), 2, |x| rad(x[0]) * rad(x[1])).unwrap();
        let terms = product_formula(&prod, &prod, 4).unwrap();
        for a in &terms {
            for b in &terms {
                if a.t != b.t {
                    assert!(u_statistic_inner(&a.kernel, &b.kernel, 4).unwrap().abs() < 1e-10);
                }
            }
        }
        assert!(verify_product_formula(&prod, &prod, 4).unwrap() < 1e-10);
        assert!(product_formula(&prod, &prod, 3).is_err());
    }

    #[test]
    fn s0_examples() {
        let psi = SymKernel::from_fn(bit(), 1, |x| rad(x[0])).unwrap();
        assert_eq!(s0_quantity(&psi, &psi, 4).unwrap(), 0.0);
        assert!(s0_counts(4, 1, 1).is_empty());
        let prod = SymKernel::from_fn(bit(), 2, |x| rad(x[0]) * rad(x[1])).unwrap();
        let s0 = s0_quantity(&prod, &prod, 4).unwrap();
        // Lemma identity: sum_r count_r ||phi ⋆_{q-r}^{q-r} psi||^2.
        let oracle: f64 = s0_counts(4, 2, 2).iter().map(|(&r, &c)| c as f64 * contraction_norm(&prod, &prod, 2 - r, 2 - r).unwrap().powi(2)).sum();
        assert!(s0 >= 0.0 && (s0 - oracle).abs() < 1e-10, "{s0} vs {oracle}");
    }

    #[test]
    fn symustat1_linear() {
        let psi = SymKernel::from_fn(bit(), 1, |x| rad(x[0])).unwrap();
        for n in [10usize, 100, 1000] {
            let fam = derive_degenerate(&psi, n).unwrap();
            let rep = bound_symmetric(&fam, SymmetricVariant::SymUstat1, &KConstants::relative_rate()).unwrap();
            let c = SQRT_2_OVER_PI / 2.0 + 2f64.sqrt() * (1.0 + 2f64.powf(0.25)).powi(2);
            assert!((rep.total * (n as f64).sqrt() - c).abs() < 1e-10, "{}", rep.total);
            let second = rep.related_named("symustat1_second").unwrap();
            assert!((second.total - rep.total).abs() < 1e-10);
            let g = bound_symmetric(&fam, SymmetricVariant::GenBoundSymStat, &KConstants::relative_rate()).unwrap();
            assert!((g.total - rep.total).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_rows_vanish() {
        let prod = SymKernel::from_fn(bit(), 2, |x| rad(x[0]) * rad(x[1])).unwrap();
        let fam = derive_degenerate(&prod, 6).unwrap();
        let table = kernel_contraction_table(&fam.psi).unwrap();
        for e in table.entries.iter().filter(|e| e.p == 1 || e.q == 1) {
            assert_eq!(e.norm, 0.0);
        }
        let rep = bound_symmetric(&fam, SymmetricVariant::SymUstat2, &KConstants::relative_rate()).unwrap();
        assert!(rep.flags.iter().any(|f| f.contains("relative-rate")));
        let strict = KConstants { strict: true, ..KConstants::default() };
        assert!(matches!(bound_symmetric(&fam, SymmetricVariant::SymUstat2, &strict), Err(Error::MissingConstant(_))));
    }

    #[test]
    fn mc_contraction_unbiased() {
        let nu = BaseMeasure::new(vec![0.3, 0.7]).unwrap();
        let psi = SymKernel::from_fn(nu.clone(), 2, |x| (1 + x[0] + x[1]) as f64).unwrap();
        let fam = derive_degenerate(&psi, 4).unwrap();
        let model = FiniteModel::new(&nu).unwrap();
        let kernel = |x: &[usize]| psi.get(x);
        for key in [[1, 1, 1, 0], [2, 1, 1, 1], [1, 2, 0, 0], [2, 2, 1, 0]] {
            let [j, k, a, b] = key;
            let exact = contraction_norm(fam.g(j), fam.g(k), a, b).unwrap();
            let est = mc_g_contraction_norm(&model, &kernel, 2, key, 200_000, 3).unwrap();
            assert!((est.mean - exact).abs() < 4.0 * est.standard_error + 1e-12, "{key:?}: {} vs {exact} ± {}", est.mean, est.standard_error);
        }
        let again = mc_g_contraction_norm(&model, &kernel, 2, [1, 1, 1, 0], 1000, 9).unwrap();
        assert_eq!(again, mc_g_contraction_norm(&model, &kernel, 2, [1, 1, 1, 0], 1000, 9).unwrap());
    }

    #[test]
    fn k_constant_json() {
        let k = KConstants::from_json(r#"{"1,1,1,0": 2.5}"#).unwrap();
        assert_eq!(k.get(1, 1, 1, 0).unwrap(), (2.5, false));
        assert!(k.get(2, 2, 1, 0).is_err());
        assert!(KConstants::from_json(r#"{"1,1": 2.5}"#).is_err());
    }

    #[test]
    fn normalized_ustat_samples_are_standardized() {
        let mu = BaseMeasure::new(vec![0.2, 0.3, 0.5]).unwrap();
        let psi = SymKernel::from_fn(mu.clone(), 2, |x| if x[0] == x[1] { 1.0 } else { 0.0 }).unwrap();
        let fam = derive_degenerate(&psi, 12).unwrap();
        let draws = sample_normalized_ustat(&fam, &mu, 200_000, 9).unwrap();
        let k = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / k;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        assert!(mean.abs() < 5.0 * (1.0 / k).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
        assert_eq!(draws, sample_normalized_ustat(&fam, &mu, 200_000, 9).unwrap());
    }
}
