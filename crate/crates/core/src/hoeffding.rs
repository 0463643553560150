//! Product spaces, the Gibbs-sampler pair and Hoeffding decompositions.
//!
//! On `E = S_1 x ... x S_n` with product measure, the pair that resamples one
//! uniformly chosen coordinate has generator
//! `LF = (1/n) sum_j (P_j F - F)`, where `P_j` integrates out coordinate `j`.
//! Its eigenspaces are the Hoeffding spaces: order-`p` components satisfy
//! `L u = -(p/n) u`. Components are computed by the coordinatewise recursion
//! `u_M = prod_{j in M} (I - P_j) prod_{j not in M} P_j F`.
//!
//! States are indexed in mixed radix with coordinate 0 least significant and
//! subsets `M` are bitmasks over coordinates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::core_operator::{FiniteSpace, Functional, Generator, ReversibleKernel};
use crate::error::{Error, Result};
use crate::special::{guarded_root4, SQRT_2_OVER_PI};
use crate::stein_bounds::{check_normalized, BoundReport, NORMALIZATION_TOL};

/// Default limit on the number of configurations for exact operations.
pub const DEFAULT_STATE_CAP: usize = 2_000_000;
/// Limit on `2^n * states` stored by a full decomposition.
pub const DECOMPOSITION_CAP: usize = 1 << 25;

/// A finite product space with independent coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductSpace {
    alphabets: Vec<Vec<String>>,
    marginals: Vec<Vec<f64>>,
    strides: Vec<usize>,
    size: usize,
    cap: usize,
}

#[derive(Deserialize)]
struct ProductSpaceDoc {
    #[serde(default)]
    alphabets: Option<Vec<Vec<String>>>,
    #[serde(default)]
    marginals: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    alphabet: Option<Vec<String>>,
    #[serde(default)]
    marginal: Option<Vec<f64>>,
}

impl ProductSpace {
    pub fn new(alphabets: Vec<Vec<String>>, marginals: Vec<Vec<f64>>) -> Result<Self> {
        if alphabets.len() != marginals.len() {
            return Err(Error::DimensionMismatch { expected: alphabets.len(), got: marginals.len() });
        }
        let n = alphabets.len();
        if n == 0 || n > 63 {
            return Err(Error::Invalid(format!("coordinate count {n} must be in 1..=63")));
        }
        let mut strides = Vec::with_capacity(n);
        let mut size: usize = 1;
        for (j, (a, m)) in alphabets.iter().zip(&marginals).enumerate() {
            if a.len() != m.len() || a.is_empty() {
                return Err(Error::Invalid(format!("coordinate {j}: alphabet and marginal must be nonempty and equal length")));
            }
            if m.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::Invalid(format!("coordinate {j}: marginal weights must be positive")));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!("coordinate {j}: marginal sums to {s}")));
            }
            strides.push(size);
            size = size
                .checked_mul(a.len())
                .ok_or(Error::CapExceeded { what: "product space size", size: usize::MAX, cap: usize::MAX })?;
        }
        Ok(Self { alphabets, marginals, strides, size, cap: DEFAULT_STATE_CAP })
    }

    /// `n` i.i.d. coordinates with a common alphabet and law.
    pub fn iid(n: usize, alphabet: Vec<String>, marginal: Vec<f64>) -> Result<Self> {
        Self::new(vec![alphabet; n], vec![marginal; n])
    }

    /// Uniform `{-1, 1}` coordinates.
    pub fn rademacher(n: usize) -> Result<Self> {
        Self::iid(n, vec!["-1".into(), "1".into()], vec![0.5, 0.5])
    }

    /// `{0, 1}` coordinates with `P(1) = p`.
    pub fn bernoulli(n: usize, p: f64) -> Result<Self> {
        Self::iid(n, vec!["0".into(), "1".into()], vec![1.0 - p, p])
    }

    /// Reads `{"alphabets": [[..]], "marginals": [[..]]}` or the i.i.d.
    /// shorthand `{"n": .., "alphabet": [..], "marginal": [..]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProductSpaceDoc = serde_json::from_str(text)?;
        match doc {
            ProductSpaceDoc { alphabets: Some(a), marginals: Some(m), .. } => Self::new(a, m),
            ProductSpaceDoc { n: Some(n), alphabet: Some(a), marginal: Some(m), .. } => Self::iid(n, a, m),
            _ => Err(Error::Invalid("product space JSON needs alphabets+marginals or n+alphabet+marginal".into())),
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn n(&self) -> usize {
        self.alphabets.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn alphabet_size(&self, j: usize) -> usize {
        self.alphabets[j].len()
    }

    pub fn alphabets(&self) -> &[Vec<String>] {
        &self.alphabets
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    fn check_cap(&self) -> Result<()> {
        if self.size > self.cap {
            return Err(Error::CapExceeded { what: "product space states", size: self.size, cap: self.cap });
        }
        Ok(())
    }

    /// Value index of coordinate `j` in state `x`.
    pub fn coord(&self, x: usize, j: usize) -> usize {
        (x / self.strides[j]) % self.alphabets[j].len()
    }

    pub fn configuration(&self, x: usize) -> Vec<usize> {
        (0..self.n()).map(|j| self.coord(x, j)).collect()
    }

    pub fn index(&self, config: &[usize]) -> usize {
        config.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    fn with_coord(&self, x: usize, j: usize, a: usize) -> usize {
        x - self.coord(x, j) * self.strides[j] + a * self.strides[j]
    }

    pub fn weight(&self, x: usize) -> f64 {
        (0..self.n()).map(|j| self.marginals[j][self.coord(x, j)]).product()
    }

    pub fn finite_space(&self) -> Result<FiniteSpace> {
        self.check_cap()?;
        let labels = (0..self.size)
            .map(|x| (0..self.n()).map(|j| self.alphabets[j][self.coord(x, j)].as_str()).collect::<Vec<_>>().join("|"))
            .collect();
        FiniteSpace::from_unnormalized(labels, (0..self.size).map(|x| self.weight(x)).collect())
    }

    /// Tabulates `f(configuration)` over all states.
    pub fn functional(&self, f: impl Fn(&[usize]) -> f64) -> Result<Functional> {
        self.check_cap()?;
        let mut cfg = vec![0usize; self.n()];
        Functional::new(
            (0..self.size)
                .map(|x| {
                    for (j, c) in cfg.iter_mut().enumerate() {
                        *c = self.coord(x, j);
                    }
                    f(&cfg)
                })
                .collect(),
        )
    }

    /// Tabulates a function of the numeric coordinate labels.
    pub fn functional_numeric(&self, f: impl Fn(&[f64]) -> f64) -> Result<Functional> {
        let values: Vec<Vec<f64>> = self
            .alphabets
            .iter()
            .map(|a| a.iter().map(|l| l.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("non-numeric alphabet label: {e}")))?;
        self.functional(|cfg| {
            let v: Vec<f64> = cfg.iter().enumerate().map(|(j, c)| values[j][*c]).collect();
            f(&v)
        })
    }

    pub fn check(&self, f: &Functional) -> Result<()> {
        if f.len() != self.size {
            return Err(Error::DimensionMismatch { expected: self.size, got: f.len() });
        }
        Ok(())
    }

    pub fn expect(&self, f: &Functional) -> f64 {
        (0..self.size).map(|x| self.weight(x) * f[x]).sum()
    }

    pub fn inner(&self, f: &Functional, g: &Functional) -> f64 {
        (0..self.size).map(|x| self.weight(x) * f[x] * g[x]).sum()
    }

    pub fn variance(&self, f: &Functional) -> f64 {
        let m = self.expect(f);
        (0..self.size).map(|x| self.weight(x) * (f[x] - m).powi(2)).sum()
    }

    /// `P_j F`: integrates out coordinate `j`.
    pub fn integrate_out(&self, f: &[f64], j: usize) -> Vec<f64> {
        let s = self.alphabets[j].len();
        let stride = self.strides[j];
        let m = &self.marginals[j];
        let mut out = vec![0.0; f.len()];
        for x in 0..f.len() {
            if self.coord(x, j) != 0 {
                continue;
            }
            let v: f64 = (0..s).map(|a| m[a] * f[x + a * stride]).sum();
            for a in 0..s {
                out[x + a * stride] = v;
            }
        }
        out
    }

    /// `E[F | coordinates in J]`.
    pub fn condition_on(&self, f: &Functional, mask: u64) -> Functional {
        let mut v = f.values().to_vec();
        for j in 0..self.n() {
            if mask >> j & 1 == 0 {
                v = self.integrate_out(&v, j);
            }
        }
        Functional::new(v).expect("finite")
    }

    /// Matrix-free `LF = (1/n) sum_j (P_j F - F)`.
    pub fn apply_l(&self, f: &Functional) -> Result<Functional> {
        self.check(f)?;
        let n = self.n() as f64;
        let mut acc = vec![0.0; self.size];
        for j in 0..self.n() {
            let p = self.integrate_out(f.values(), j);
            for (a, (pv, fv)) in acc.iter_mut().zip(p.iter().zip(f.values())) {
                *a += pv - fv;
            }
        }
        Functional::new(acc.into_iter().map(|v| v / n).collect())
    }

    /// Matrix-free carré du champ of the Gibbs pair.
    pub fn gamma(&self, f: &Functional, g: &Functional) -> Result<Functional> {
        self.check(f)?;
        self.check(g)?;
        let n = self.n() as f64;
        Functional::new(
            (0..self.size)
                .map(|x| {
                    let mut s = 0.0;
                    for j in 0..self.n() {
                        for (a, w) in self.marginals[j].iter().enumerate() {
                            let y = self.with_coord(x, j, a);
                            s += w * (f[y] - f[x]) * (g[y] - g[x]);
                        }
                    }
                    s / (2.0 * n)
                })
                .collect(),
        )
    }

    /// True when all coordinates share alphabet and law and `F` is invariant
    /// under every permutation of coordinates (checked on adjacent swaps).
    pub fn is_coordinate_symmetric(&self, f: &Functional, tol: f64) -> bool {
        if self.alphabets.windows(2).any(|w| w[0] != w[1]) || self.marginals.windows(2).any(|w| w[0] != w[1]) {
            return false;
        }
        let scale = tol * (1.0 + f.max_abs());
        (0..self.n().saturating_sub(1)).all(|i| {
            (0..self.size).all(|x| {
                let (a, b) = (self.coord(x, i), self.coord(x, i + 1));
                let y = self.with_coord(self.with_coord(x, i, b), i + 1, a);
                (f[x] - f[y]).abs() <= scale
            })
        })
    }
}

/// Generator of the Gibbs sampler that resamples one uniform coordinate.
pub fn gibbs_generator(space: &ProductSpace) -> Result<Generator> {
    space.check_cap()?;
    let fs = space.finite_space()?;
    let n = space.n() as f64;
    let rows = (0..space.size())
        .map(|x| {
            let mut row = Vec::new();
            for j in 0..space.n() {
                for (a, w) in space.marginals[j].iter().enumerate() {
                    row.push((space.with_coord(x, j, a), w / n));
                }
            }
            row
        })
        .collect();
    Ok(Generator::new(ReversibleKernel::from_rows(fs, rows)?))
}

/// Magnetization chain of `n` i.i.d. `{0,1}` coordinates with `P(1) = p`:
/// state `k` counts ones. Exact for functionals of the count.
pub fn lumped_binary_gibbs(n: usize, p: f64) -> Result<Generator> {
    if n == 0 || !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid("need n >= 1 and 0 < p < 1".into()));
    }
    let ratio = p / (1.0 - p);
    let mut logw = vec![0.0f64; n + 1];
    for k in 1..=n {
        logw[k] = logw[k - 1] + (((n - k + 1) as f64) / k as f64 * ratio).ln();
    }
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let space = FiniteSpace::from_unnormalized((0..=n).map(|k| k.to_string()).collect(), w)?;
    let nf = n as f64;
    let rows = (0..=n)
        .map(|k| {
            let up = (n - k) as f64 / nf * p;
            let down = k as f64 / nf * (1.0 - p);
            let mut row = vec![(k, 1.0 - up - down)];
            if k < n {
                row.push((k + 1, up));
            }
            if k > 0 {
                row.push((k - 1, down));
            }
            row
        })
        .collect();
    Ok(Generator::new(ReversibleKernel::from_rows(space, rows)?))
}

/// Hoeffding components `u_M`, stored on the full grid and sorted by mask.
#[derive(Clone, Debug)]
pub struct HoeffdingDecomposition {
    n: usize,
    len: usize,
    components: Vec<(u64, Functional)>,
}

/// Decomposes `F` into its Hoeffding components. Subtrees of the recursion
/// whose sup norm falls below `1e-13 * 2^-n * ||F||_inf` are dropped.
pub fn hoeffding_decompose(space: &ProductSpace, f: &Functional) -> Result<HoeffdingDecomposition> {
    space.check_cap()?;
    space.check(f)?;
    let n = space.n();
    let volume = space.size().saturating_mul(1usize.checked_shl(n as u32).unwrap_or(usize::MAX));
    if volume > DECOMPOSITION_CAP && n > 20 {
        return Err(Error::CapExceeded { what: "decomposition volume 2^n * states", size: volume, cap: DECOMPOSITION_CAP });
    }
    let prune = 1e-13 * f.max_abs() / (2f64).powi(n as i32);
    let mut components = recurse(space, f.values().to_vec(), 0, 0, prune);
    components.sort_by_key(|c| c.0);
    Ok(HoeffdingDecomposition {
        n,
        len: space.size(),
        components: components.into_iter().map(|(m, v)| (m, Functional::new(v).expect("finite"))).collect(),
    })
}

fn recurse(space: &ProductSpace, f: Vec<f64>, j: usize, mask: u64, prune: f64) -> Vec<(u64, Vec<f64>)> {
    if f.iter().all(|v| v.abs() <= prune) {
        return Vec::new();
    }
    if j == space.n() {
        return vec![(mask, f)];
    }
    let p = space.integrate_out(&f, j);
    let r: Vec<f64> = f.iter().zip(&p).map(|(a, b)| a - b).collect();
    drop(f);
    let (mut a, b) = if j < 4 && space.size() >= 1 << 12 {
        rayon::join(|| recurse(space, p, j + 1, mask, prune), || recurse(space, r, j + 1, mask | 1 << j, prune))
    } else {
        (recurse(space, p, j + 1, mask, prune), recurse(space, r, j + 1, mask | 1 << j, prune))
    };
    a.extend(b);
    a
}

impl HoeffdingDecomposition {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Nonzero components as `(mask, u_M)`, masks ascending.
    pub fn components(&self) -> &[(u64, Functional)] {
        &self.components
    }

    pub fn component(&self, mask: u64) -> Option<&Functional> {
        self.components.binary_search_by_key(&mask, |c| c.0).ok().map(|i| &self.components[i].1)
    }

    /// `Y^(p) = sum_{|M| = p} u_M`.
    pub fn order(&self, p: usize) -> Functional {
        self.components
            .iter()
            .filter(|(m, _)| m.count_ones() as usize == p)
            .fold(Functional::zeros(self.len), |acc, (_, u)| acc.add(u))
    }

    pub fn orders(&self) -> Vec<Functional> {
        (0..=self.n).map(|p| self.order(p)).collect()
    }

    pub fn reassemble(&self) -> Functional {
        self.components.iter().fold(Functional::zeros(self.len), |acc, (_, u)| acc.add(u))
    }

    /// `E[(Y^(p))^2]` for `p = 0..=n`.
    pub fn order_second_moments(&self, space: &ProductSpace) -> Vec<f64> {
        let mut v = vec![0.0; self.n + 1];
        for (m, u) in &self.components {
            v[m.count_ones() as usize] += space.inner(u, u);
        }
        v
    }

    /// Largest `|E[u_M u_N]|` over distinct stored components.
    pub fn orthogonality_defect(&self, space: &ProductSpace) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.components.len() {
            for j in i + 1..self.components.len() {
                worst = worst.max(space.inner(&self.components[i].1, &self.components[j].1).abs());
            }
        }
        worst
    }

    /// Largest `|E[u_M | F_J]|` over components with `M` not inside `J`.
    pub fn degeneracy_defect(&self, space: &ProductSpace, j_mask: u64) -> f64 {
        self.components
            .iter()
            .filter(|(m, _)| m & !j_mask != 0)
            .map(|(_, u)| space.condition_on(u, j_mask).max_abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|u_M - E[u_M | F_M]|`, i.e. failure of `F_M`-measurability.
    pub fn measurability_defect(&self, space: &ProductSpace) -> f64 {
        self.components
            .iter()
            .map(|(m, u)| space.condition_on(u, *m).sub(u).max_abs())
            .fold(0.0, f64::max)
    }
}

/// Per-order eigen-residuals `max |L Y^(p) + (p/n) Y^(p)|`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EigenResiduals {
    pub per_order: Vec<f64>,
    pub max: f64,
}

pub fn verify_eigen(space: &ProductSpace, dec: &HoeffdingDecomposition) -> Result<EigenResiduals> {
    let n = space.n() as f64;
    let mut per_order = Vec::with_capacity(space.n() + 1);
    for (p, y) in dec.orders().into_iter().enumerate() {
        let ly = space.apply_l(&y)?;
        per_order.push(ly.zip_with(&y, |a, b| a + p as f64 / n * b).max_abs());
    }
    let max = per_order.iter().copied().fold(0.0, f64::max);
    Ok(EigenResiduals { per_order, max })
}

/// The single Hoeffding order carrying `F`, or an error when several do.
pub fn pure_order(space: &ProductSpace, f: &Functional) -> Result<usize> {
    let dec = hoeffding_decompose(space, f)?;
    let moments = dec.order_second_moments(space);
    let total: f64 = moments.iter().sum();
    let active: Vec<usize> = (0..moments.len()).filter(|&p| moments[p] > 1e-18 * (1.0 + total)).collect();
    match active.as_slice() {
        [p] => Ok(*p),
        [] => Err(Error::Precondition("zero functional has no Hoeffding order".into())),
        _ => Err(Error::Precondition(format!("functional is not a pure Hoeffding component (orders {active:?})"))),
    }
}

/// `Gamma(F_p, G_q) = (1/2n) sum_{|M| <= p+q-1} (p + q - |M|) u_M` where
/// `u_M` are the components of `F_p G_q`.
pub fn gamma_product(space: &ProductSpace, f: &Functional, g: &Functional) -> Result<(Functional, HoeffdingDecomposition)> {
    let p = pure_order(space, f)?;
    let q = pure_order(space, g)?;
    let dec = hoeffding_decompose(space, &f.mul(g))?;
    let gamma = gamma_from_product(space.n(), p, q, &dec, space.size());
    Ok((gamma, dec))
}

fn gamma_from_product(n: usize, p: usize, q: usize, dec: &HoeffdingDecomposition, len: usize) -> Functional {
    let mut acc = Functional::zeros(len);
    for (m, u) in dec.components() {
        let k = m.count_ones() as usize;
        if k < p + q {
            acc = acc.add(&u.scale((p + q - k) as f64 / (2.0 * n as f64)));
        }
    }
    acc
}

/// Influence quantities `rho_p^2 = max_i sum_{J ni i, |J| = p} E[W_J^2]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InfluenceProfile {
    /// Indexed by order `p = 0..=n` (`rho2[0] = 0`).
    pub rho2: Vec<f64>,
    /// `per_coordinate[p][i] = sum_{J ni i, |J| = p} E[W_J^2]`.
    pub per_coordinate: Vec<Vec<f64>>,
}

pub fn influence(space: &ProductSpace, dec: &HoeffdingDecomposition) -> InfluenceProfile {
    let n = space.n();
    let mut per = vec![vec![0.0; n]; n + 1];
    for (m, u) in dec.components() {
        let p = m.count_ones() as usize;
        if p == 0 {
            continue;
        }
        let e = space.inner(u, u);
        for (i, slot) in per[p].iter_mut().enumerate() {
            if m >> i & 1 == 1 {
                *slot += e;
            }
        }
    }
    let rho2 = per.iter().map(|v| v.iter().copied().fold(0.0, f64::max)).collect();
    InfluenceProfile { rho2, per_coordinate: per }
}

/// Constants `kappa_q` of the general product-space bound.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Kappa {
    /// `kappa_q = 2q`; valid only for coordinate-symmetric `F`.
    #[default]
    Symmetric,
    /// Caller-supplied values by order.
    Supplied(BTreeMap<usize, f64>),
}

/// Both displays of the general product-space bound with exact variances of
/// the product components `U_M(p, q)`.
pub fn bound_genboundind(space: &ProductSpace, f: &Functional, kappa: &Kappa) -> Result<BoundReport> {
    let fs = space.finite_space()?;
    check_normalized(&fs, f, 1.0, NORMALIZATION_TOL)?;
    let n = space.n();
    let dec = hoeffding_decompose(space, f)?;
    let orders = dec.orders();
    let moments = dec.order_second_moments(space);
    let infl = influence(space, &dec);
    let active: Vec<usize> = (1..=n).filter(|&p| moments[p] > 1e-20).collect();

    let symmetric = matches!(kappa, Kappa::Symmetric);
    if symmetric && !space.is_coordinate_symmetric(f, 1e-12) {
        return Err(Error::MissingConstant(
            "kappa_q must be supplied for functionals that are not coordinate-symmetric".into(),
        ));
    }
    let kappa_of = |q: usize| -> Result<f64> {
        match kappa {
            Kappa::Symmetric => Ok(2.0 * q as f64),
            Kappa::Supplied(map) => map.get(&q).copied().ok_or_else(|| Error::MissingConstant(format!("kappa_{q}"))),
        }
    };

    // Components of every product F_p F_q, keyed by (p, q).
    let mut products: BTreeMap<(usize, usize), HoeffdingDecomposition> = BTreeMap::new();
    for &p in &active {
        for &q in &active {
            if q < p {
                continue;
            }
            products.insert((p, q), hoeffding_decompose(space, &orders[p].mul(&orders[q]))?);
        }
    }
    let prod = |p: usize, q: usize| &products[&(p.min(q), p.max(q))];

    // First display: per-mask variance of the weighted combination.
    let mut combined: BTreeMap<u64, Functional> = BTreeMap::new();
    for &p in &active {
        for &q in &active {
            for (m, u) in prod(p, q).components() {
                let l = m.count_ones() as usize;
                if l == 0 || p + q < l + 1 {
                    continue;
                }
                let w = (p + q - l) as f64 / (2.0 * p as f64);
                let e = combined.entry(*m).or_insert_with(|| Functional::zeros(space.size()));
                *e = e.add(&u.scale(w));
            }
        }
    }
    let var_first: f64 = combined.values().map(|u| space.variance(u)).sum();
    let t1 = SQRT_2_OVER_PI * var_first.sqrt();

    let var_sum = |p: usize, q: usize, weight: &dyn Fn(usize) -> f64| -> f64 {
        prod(p, q)
            .components()
            .iter()
            .filter(|(m, _)| {
                let l = m.count_ones() as usize;
                l >= 1 && l < p + q
            })
            .map(|(m, u)| weight(m.count_ones() as usize) * space.variance(u))
            .sum()
    };

    let outer: f64 = active.iter().map(|&p| moments[p].sqrt() / (p as f64).sqrt()).sum();
    let mut inner_first = 0.0;
    let mut inner_second = 0.0;
    let mut report_constants = Vec::new();
    for &q in &active {
        let kq = kappa_of(q)?;
        report_constants.push((q, kq));
        let base = kq * moments[q] * infl.rho2[q];
        let qf = q as f64;
        let a1 = base + var_sum(q, q, &|l| (2.0 * qf - l as f64) / qf);
        let a2 = base + (2.0 * qf - 1.0) / qf * var_sum(q, q, &|_| 1.0);
        inner_first += qf.powf(0.25) * guarded_root4(a1, "product-space fourth-moment term")?;
        inner_second += qf.powf(0.25) * guarded_root4(a2, "product-space fourth-moment term")?;
    }
    let t2 = std::f64::consts::SQRT_2 * outer * inner_first * inner_first;

    let mut t1b = 0.0;
    for &p in &active {
        for &q in &active {
            let w = (p + q - 1) as f64 / (2.0 * p as f64);
            t1b += w * var_sum(p, q, &|_| 1.0).max(0.0).sqrt();
        }
    }
    let t2b = std::f64::consts::SQRT_2 * outer * inner_second * inner_second;

    let annotate = |mut r: BoundReport| {
        r = r.constant("sqrt(2/pi)", SQRT_2_OVER_PI, "sup norm of psi_h' for 1-Lipschitz h");
        for (q, kq) in &report_constants {
            let prov = if symmetric { "2q: coordinate-symmetric functional of i.i.d. coordinates" } else { "caller-supplied" };
            r = r.constant(format!("kappa[{q}]"), *kq, prov).constant(format!("rho2[{q}]"), infl.rho2[*q], "maximal single-coordinate influence");
        }
        r.setting("coordinates", n.to_string())
    };
    let second = annotate(BoundReport::new("genboundind_second"))
        .term("product_variance", SQRT_2_OVER_PI * t1b)
        .term("fourth_moment", t2b)
        .finish()?;
    annotate(BoundReport::new("genboundind"))
        .term("product_variance", t1)
        .term("fourth_moment", t2)
        .with_related(second)
        .finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_operator::{spectral_decompose, DEFAULT_CLUSTER_TOL};

    fn x(cfg: &[usize], j: usize) -> f64 {
        2.0 * cfg[j] as f64 - 1.0
    }

    #[test]
    fn gibbs_spectrum_three_bits() {
        let s = ProductSpace::rademacher(3).unwrap();
        let gen = gibbs_generator(&s).unwrap();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let m = spec.multiplicities();
        let expect = [(0.0, 1), (1.0 / 3.0, 3), (2.0 / 3.0, 3), (1.0, 1)];
        assert_eq!(m.len(), 4);
        for ((v, k), (ev, ek)) in m.iter().zip(expect) {
            assert!((v - ev).abs() < 1e-12);
            assert_eq!(*k, ek);
        }
        assert!((spec.poincare_constant().unwrap() - 3.0).abs() < 1e-10);
        let f = s.functional(|c| x(c, 0)).unwrap();
        let lf = gen.apply_l(&f).unwrap();
        assert!(lf.zip_with(&f, |a, b| a + b / 3.0).max_abs() < 1e-15);
    }

    #[test]
    fn single_coordinate_kernel_is_rank_one() {
        let s = ProductSpace::new(vec![vec!["a".into(), "b".into(), "c".into()]], vec![vec![0.2, 0.3, 0.5]]).unwrap();
        let gen = gibbs_generator(&s).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                assert!((gen.kernel().get(x, y) - s.marginals()[0][y]).abs() < 1e-15);
            }
        }
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(spec.multiplicities().len(), 2);
        assert!((spec.multiplicities()[1].0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_bernoulli_is_reversible() {
        let s = ProductSpace::bernoulli(2, 0.3).unwrap();
        let gen = gibbs_generator(&s).unwrap();
        assert!(gen.kernel().balance_residual() <= 1e-12);
    }

    #[test]
    fn decomposition_of_x1x2_plus_x1() {
        let s = ProductSpace::rademacher(2).unwrap();
        let f = s.functional(|c| x(c, 0) * x(c, 1) + x(c, 0)).unwrap();
        let dec = hoeffding_decompose(&s, &f).unwrap();
        assert!(dec.component(0b00).is_none());
        assert!(dec.component(0b10).is_none());
        assert_eq!(dec.component(0b01).unwrap(), &s.functional(|c| x(c, 0)).unwrap());
        assert_eq!(dec.component(0b11).unwrap(), &s.functional(|c| x(c, 0) * x(c, 1)).unwrap());
        let c = hoeffding_decompose(&s, &Functional::constant(4, 2.5)).unwrap();
        assert_eq!(c.components().len(), 1);
        assert_eq!(c.components()[0].0, 0);
    }

    #[test]
    fn gamma_product_examples() {
        let s = ProductSpace::rademacher(2).unwrap();
        let x12 = s.functional(|c| x(c, 0) * x(c, 1)).unwrap();
        let x1 = s.functional(|c| x(c, 0)).unwrap();
        let x2 = s.functional(|c| x(c, 1)).unwrap();
        let (g, _) = gamma_product(&s, &x12, &x12).unwrap();
        assert!(g.values().iter().all(|v| (v - 1.0).abs() < 1e-15));
        let (g, _) = gamma_product(&s, &x1, &x2).unwrap();
        assert!(g.max_abs() < 1e-15);
        let (g, _) = gamma_product(&s, &x1, &x1).unwrap();
        assert!(g.values().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(gamma_product(&s, &x1.add(&x12), &x1).is_err());
    }

    #[test]
    fn influence_examples() {
        let s = ProductSpace::rademacher(2).unwrap();
        let dec = hoeffding_decompose(&s, &s.functional(|c| x(c, 0) * x(c, 1)).unwrap()).unwrap();
        assert!((influence(&s, &dec).rho2[2] - 1.0).abs() < 1e-15);
        let n = 5;
        let s = ProductSpace::rademacher(n).unwrap();
        let mean = s.functional(|c| (0..n).map(|j| x(c, j)).sum::<f64>() / (n as f64).sqrt()).unwrap();
        let dec = hoeffding_decompose(&s, &mean).unwrap();
        assert!((influence(&s, &dec).rho2[1] - 1.0 / n as f64).abs() < 1e-14);
    }

    #[test]
    fn rademacher_mean_bound() {
        for n in [2usize, 4, 6] {
            let s = ProductSpace::rademacher(n).unwrap();
            let f = s.functional(|c| (0..n).map(|j| x(c, j)).sum::<f64>() / (n as f64).sqrt()).unwrap();
            let r = bound_genboundind(&s, &f, &Kappa::Symmetric).unwrap();
            assert!(r.term_value("product_variance").unwrap() < 1e-12);
            assert!((r.total - 2.0 / (n as f64).sqrt()).abs() < 1e-12, "n = {n}: {}", r.total);
        }
    }

    #[test]
    fn asymmetric_needs_kappa() {
        let s = ProductSpace::rademacher(3).unwrap();
        let f = s.functional(|c| (x(c, 0) + x(c, 0) * x(c, 1)) / 2f64.sqrt()).unwrap();
        assert!(matches!(bound_genboundind(&s, &f, &Kappa::Symmetric), Err(Error::MissingConstant(_))));
        let k = Kappa::Supplied(BTreeMap::from([(1, 2.0), (2, 4.0)]));
        let r = bound_genboundind(&s, &f, &k).unwrap();
        assert!(r.total > 0.0);
        assert!(r.total <= r.related[0].total + 1e-12);
        let unnormalized = f.scale(3.0);
        assert!(matches!(bound_genboundind(&s, &unnormalized, &k), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn lumped_chain_matches_full_chain() {
        let n = 6;
        let full = ProductSpace::rademacher(n).unwrap();
        let gen_full = gibbs_generator(&full).unwrap();
        let lumped = lumped_binary_gibbs(n, 0.5).unwrap();
        let f_full = full.functional(|c| (0..n).map(|j| x(c, j)).sum::<f64>() / (n as f64).sqrt()).unwrap();
        let f_lump = Functional::from_fn(n + 1, |k| (2.0 * k as f64 - n as f64) / (n as f64).sqrt());
        for h in [|d: f64| d.abs().powi(3), |d: f64| d * d] {
            let a = gen_full.increment_moment(&f_full, h).unwrap();
            let b = lumped.increment_moment(&f_lump, h).unwrap();
            assert!((a - b).abs() < 1e-13);
        }
        let spec = spectral_decompose(&lumped, DEFAULT_CLUSTER_TOL).unwrap();
        for (k, v) in spec.eigenvalues().iter().enumerate() {
            assert!((v - k as f64 / n as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn json_forms() {
        let a = ProductSpace::from_json(r#"{"n":2,"alphabet":["-1","1"],"marginal":[0.5,0.5]}"#).unwrap();
        assert_eq!(a, ProductSpace::rademacher(2).unwrap());
        let b = ProductSpace::from_json(r#"{"alphabets":[["a","b"],["c"]],"marginals":[[0.4,0.6],[1.0]]}"#).unwrap();
        assert_eq!(b.size(), 2);
        assert!(ProductSpace::from_json("{}").is_err());
    }
}
