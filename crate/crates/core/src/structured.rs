//! Structured exchangeable pairs: swap dynamics on simple random samples and
//! symmetric random walks on finite groups.
//!
//! Samples are `n`-subsets of `{0, .., N-1}` stored as bitmasks; ascending
//! mask order is colexicographic order and the rank of a subset
//! `c_0 < c_1 < ..` is `sum_i C(c_i, i + 1)`.

use std::collections::VecDeque;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::core_operator::{FiniteSpace, Functional, Generator, ReversibleKernel, SpectralData};
use crate::error::{Error, Result};
use crate::special::binomial_exact;

/// Largest number of subsets enumerated.
pub const POPULATION_CAP: usize = 2_000_000;

/// A predicted eigenvalue of `-L` with its multiplicity.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictedEigen {
    pub value: f64,
    pub multiplicity: usize,
}

/// All `n`-subsets of an `N`-population in colex order, each stored as its
/// ascending member list.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationSpace {
    big_n: usize,
    n: usize,
    /// Member lists concatenated with stride `n`.
    members: Vec<usize>,
}

impl PopulationSpace {
    pub fn new(big_n: usize, n: usize) -> Result<Self> {
        if n == 0 || n >= big_n {
            return Err(Error::Invalid(format!("need 1 <= n < N, got n = {n}, N = {big_n}")));
        }
        let count = binomial_exact(big_n as u64, n as u64).unwrap_or(u128::MAX);
        if count > POPULATION_CAP as u128 {
            return Err(Error::CapExceeded { what: "simple random sample states", size: count.min(usize::MAX as u128) as usize, cap: POPULATION_CAP });
        }
        let mut members = Vec::with_capacity(count as usize * n);
        let mut c: Vec<usize> = (0..n).collect();
        loop {
            members.extend_from_slice(&c);
            // Colex successor: bump the lowest member that can move up.
            let Some(i) = (0..n).find(|&i| c[i] + 1 < if i + 1 < n { c[i + 1] } else { big_n }) else {
                break;
            };
            c[i] += 1;
            for (j, v) in c.iter_mut().enumerate().take(i) {
                *v = j;
            }
        }
        Ok(Self { big_n, n, members })
    }

    pub fn population(&self) -> usize {
        self.big_n
    }

    pub fn sample_size(&self) -> usize {
        self.n
    }

    /// `min(n, N - n)`.
    pub fn n_star(&self) -> usize {
        self.n.min(self.big_n - self.n)
    }

    /// Ascending members of state `i`.
    pub fn state(&self, i: usize) -> &[usize] {
        &self.members[i * self.n..(i + 1) * self.n]
    }

    pub fn len(&self) -> usize {
        self.members.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Colex rank `sum_i C(c_i, i + 1)` of an ascending member list.
    pub fn rank(&self, members: &[usize]) -> usize {
        members.iter().enumerate().map(|(i, &c)| binomial_exact(c as u64, i as u64 + 1).expect("below state count") as usize).sum()
    }

    /// `lambda_p = p (N - p + 1) / (n (N - n))`.
    pub fn eigenvalue(&self, p: usize) -> f64 {
        (p * (self.big_n + 1 - p)) as f64 / (self.n * (self.big_n - self.n)) as f64
    }

    /// `lambda_p` for `p = 0..=n*` with multiplicities `C(N,p) - C(N,p-1)`.
    pub fn predicted_spectrum(&self) -> Vec<PredictedEigen> {
        (0..=self.n_star())
            .map(|p| {
                let mult = if p == 0 {
                    1
                } else {
                    (binomial_exact(self.big_n as u64, p as u64).expect("small")
                        - binomial_exact(self.big_n as u64, p as u64 - 1).expect("small")) as usize
                };
                PredictedEigen { value: self.eigenvalue(p), multiplicity: mult }
            })
            .collect()
    }

    /// Tabulates `f(members)` with members in ascending order.
    pub fn functional(&self, f: impl Fn(&[usize]) -> f64) -> Result<Functional> {
        Functional::new((0..self.len()).map(|i| f(self.state(i))).collect())
    }

    pub fn finite_space(&self) -> Result<FiniteSpace> {
        let labels = (0..self.len())
            .map(|i| {
                let m: Vec<String> = self.state(i).iter().map(|v| v.to_string()).collect();
                format!("{{{}}}", m.join(","))
            })
            .collect();
        FiniteSpace::uniform(self.len()).and_then(|u| FiniteSpace::new(labels, u.weights().to_vec()))
    }
}

/// Swap dynamics: replace a uniform member by a uniform non-member.
pub fn srs_generator(pop: &PopulationSpace) -> Result<(Generator, Vec<PredictedEigen>)> {
    let w = 1.0 / (pop.n * (pop.big_n - pop.n)) as f64;
    let mut inside = vec![false; pop.big_n];
    let mut next = Vec::with_capacity(pop.n);
    let rows = (0..pop.len())
        .map(|i| {
            let s = pop.state(i);
            s.iter().for_each(|&v| inside[v] = true);
            let mut row = Vec::with_capacity(pop.n * (pop.big_n - pop.n));
            for a in 0..pop.n {
                for b in (0..pop.big_n).filter(|&b| !inside[b]) {
                    next.clear();
                    next.extend(s.iter().enumerate().filter(|&(j, _)| j != a).map(|(_, &v)| v));
                    let pos = next.partition_point(|&v| v < b);
                    next.insert(pos, b);
                    row.push((pop.rank(&next), w));
                }
            }
            s.iter().for_each(|&v| inside[v] = false);
            row
        })
        .collect();
    let gen = Generator::new(ReversibleKernel::from_rows(pop.finite_space()?, rows)?);
    Ok((gen, pop.predicted_spectrum()))
}

/// Hoeffding components of a population statistic, by order.
#[derive(Clone, Debug)]
pub struct SrsDecomposition {
    pub mean: f64,
    /// `(p, lambda_p, F_p)` for `p = 1..=n*`.
    pub orders: Vec<(usize, f64, Functional)>,
}

impl SrsDecomposition {
    pub fn order(&self, p: usize) -> Option<&Functional> {
        self.orders.iter().find(|o| o.0 == p).map(|o| &o.2)
    }

    /// `E[F] + sum_p F_p`.
    pub fn reassemble(&self, len: usize) -> Functional {
        self.orders.iter().fold(Functional::constant(len, self.mean), |acc, o| acc.add(&o.2))
    }
}

/// Projects onto the eigenspace of each `lambda_p`, matched to the numeric
/// clusters within `1e-8`.
pub fn srs_hoeffding(pop: &PopulationSpace, gen: &Generator, spec: &SpectralData, f: &Functional) -> Result<SrsDecomposition> {
    let space = gen.space();
    space.check(f)?;
    let parts = spec.project_all(space, f);
    let mut orders = Vec::new();
    for (c, part) in spec.clusters().iter().zip(parts) {
        let p = (0..=pop.n_star())
            .find(|&p| (pop.eigenvalue(p) - c.value).abs() <= 1e-8)
            .ok_or_else(|| Error::Numerical(format!("eigenvalue {} matches no predicted lambda_p", c.value)))?;
        if p > 0 {
            orders.push((p, pop.eigenvalue(p), part));
        }
    }
    orders.sort_by_key(|o| o.0);
    Ok(SrsDecomposition { mean: space.expect(f), orders })
}

fn srs_pure_order(pop: &PopulationSpace, gen: &Generator, spec: &SpectralData, f: &Functional) -> Result<usize> {
    let dec = srs_hoeffding(pop, gen, spec, f)?;
    let space = gen.space();
    let total = space.inner(f, f);
    let mut active: Vec<usize> = dec.orders.iter().filter(|o| space.inner(&o.2, &o.2) > 1e-18 * (1.0 + total)).map(|o| o.0).collect();
    if dec.mean.abs() > 1e-9 * (1.0 + total.sqrt()) {
        active.insert(0, 0);
    }
    match active.as_slice() {
        [p] if *p > 0 => Ok(*p),
        _ => Err(Error::Precondition(format!("functional is not a pure Hoeffding component (orders {active:?})"))),
    }
}

/// Carré du champ of pure components through the product's decomposition.
#[derive(Clone, Debug)]
pub struct SrsGammaProduct {
    pub gamma: Functional,
    /// `H_k` of `F G` for `k = 0..=min(p+q, n*)`; `H_0 = E[F G]`.
    pub components: Vec<(usize, Functional)>,
    /// Sup-norm gap between the eigenvalue form and the `(N+1)` form.
    pub form_discrepancy: f64,
}

pub fn srs_gamma_product(pop: &PopulationSpace, gen: &Generator, spec: &SpectralData, f: &Functional, g: &Functional) -> Result<SrsGammaProduct> {
    let p = srs_pure_order(pop, gen, spec, f)?;
    let q = srs_pure_order(pop, gen, spec, g)?;
    let fg = f.mul(g);
    let dec = srs_hoeffding(pop, gen, spec, &fg)?;
    let top = (p + q).min(pop.n_star());
    let len = gen.len();
    let mut components = vec![(0usize, Functional::constant(len, dec.mean))];
    for (k, _, h) in &dec.orders {
        if *k <= top {
            components.push((*k, h.clone()));
        }
    }
    let (nn, n) = (pop.big_n as f64, pop.n as f64);
    let mut gamma = Functional::zeros(len);
    let mut alt = Functional::zeros(len);
    for (k, h) in &components {
        let c = 0.5 * (pop.eigenvalue(p) + pop.eigenvalue(q) - pop.eigenvalue(*k));
        gamma = gamma.add(&h.scale(c));
        let (pf, qf, kf) = (p as f64, q as f64, *k as f64);
        let c_alt = ((nn + 1.0) * (pf + qf - kf) - pf * pf - qf * qf + kf * kf) / (2.0 * n * (nn - n));
        alt = alt.add(&h.scale(c_alt));
    }
    let form_discrepancy = gamma.sub(&alt).max_abs();
    Ok(SrsGammaProduct { gamma, components, form_discrepancy })
}

// ---------------------------------------------------------------------------
// Groups.

/// A character value, real or `[re, im]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CharValue {
    Real(f64),
    Complex([f64; 2]),
}

impl CharValue {
    fn value(self) -> Complex64 {
        match self {
            CharValue::Real(r) => Complex64::new(r, 0.0),
            CharValue::Complex([re, im]) => Complex64::new(re, im),
        }
    }
}

/// Group data for a random walk driven by a class function `T`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GroupSpec {
    /// `cayley[a][b] = a * b`.
    pub cayley: Vec<Vec<usize>>,
    /// Conjugacy classes as element indices.
    pub classes: Vec<Vec<usize>>,
    /// `characters[i][j] = chi_i(C_j)`.
    pub characters: Vec<Vec<CharValue>>,
    pub dims: Vec<usize>,
    /// Per-element step probability on each class.
    #[serde(rename = "T_class")]
    pub t_class: Vec<f64>,
}

/// A validated group with derived identity and inverses.
#[derive(Clone, Debug)]
pub struct GroupData {
    spec: GroupSpec,
    identity: usize,
    inverse: Vec<usize>,
    class_of: Vec<usize>,
}

impl GroupSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn order(&self) -> usize {
        self.cayley.len()
    }

    /// Checks the group axioms, class data, character orthogonality and `T`.
    pub fn validate(self) -> Result<GroupData> {
        let m = self.order();
        if m == 0 || self.cayley.iter().any(|r| r.len() != m || r.iter().any(|&v| v >= m)) {
            return Err(Error::Invalid("Cayley table must be square with entries in range".into()));
        }
        let op = |a: usize, b: usize| self.cayley[a][b];
        let identity = (0..m)
            .find(|&e| (0..m).all(|x| op(e, x) == x && op(x, e) == x))
            .ok_or_else(|| Error::Invalid("no identity element".into()))?;
        let mut inverse = vec![0; m];
        for x in 0..m {
            inverse[x] = (0..m)
                .find(|&y| op(x, y) == identity && op(y, x) == identity)
                .ok_or_else(|| Error::Invalid(format!("element {x} has no inverse")))?;
        }
        let triples: Box<dyn Iterator<Item = (usize, usize, usize)>> = if m <= 64 {
            Box::new((0..m).flat_map(move |a| (0..m).flat_map(move |b| (0..m).map(move |c| (a, b, c)))))
        } else {
            Box::new((0..20_000usize).map(move |i| ((i * 7919) % m, (i * 104_729 + 1) % m, (i * 1_299_709 + 2) % m)))
        };
        for (a, b, c) in triples {
            if op(op(a, b), c) != op(a, op(b, c)) {
                return Err(Error::Invalid(format!("associativity fails at ({a},{b},{c})")));
            }
        }
        let k = self.classes.len();
        let mut class_of = vec![usize::MAX; m];
        for (j, cls) in self.classes.iter().enumerate() {
            for &x in cls {
                if x >= m || class_of[x] != usize::MAX {
                    return Err(Error::Invalid("conjugacy classes must partition the group".into()));
                }
                class_of[x] = j;
            }
        }
        if class_of.contains(&usize::MAX) {
            return Err(Error::Invalid("conjugacy classes must cover the group".into()));
        }
        for x in 0..m {
            for y in 0..m {
                if class_of[op(op(y, x), inverse[y])] != class_of[x] {
                    return Err(Error::Invalid(format!("class of element {x} is not closed under conjugation")));
                }
            }
        }
        if self.characters.len() != k || self.dims.len() != k || self.t_class.len() != k {
            return Err(Error::Invalid("need one character, dimension and T value per class".into()));
        }
        if self.characters.iter().any(|c| c.len() != k) {
            return Err(Error::Invalid("character table must be square".into()));
        }
        if self.dims.iter().map(|d| d * d).sum::<usize>() != m {
            return Err(Error::Invalid("sum of squared dimensions must equal the group order".into()));
        }
        let sizes: Vec<f64> = self.classes.iter().map(|c| c.len() as f64).collect();
        for i in 0..k {
            for i2 in 0..k {
                let s: Complex64 = (0..k).map(|j| sizes[j] * self.characters[i][j].value() * self.characters[i2][j].value().conj()).sum();
                let target = if i == i2 { m as f64 } else { 0.0 };
                if (s - Complex64::new(target, 0.0)).norm() > 1e-10 * m as f64 {
                    return Err(Error::Invalid(format!("characters {i} and {i2} violate orthogonality")));
                }
            }
        }
        if self.t_class.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Invalid("T must be nonnegative".into()));
        }
        let mass: f64 = (0..k).map(|j| sizes[j] * self.t_class[j]).sum();
        if (mass - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("T has total mass {mass}")));
        }
        for x in 0..m {
            if self.t_class[class_of[x]] != self.t_class[class_of[inverse[x]]] {
                return Err(Error::Precondition(format!("T is not symmetric under inversion at element {x}")));
            }
        }
        Ok(GroupData { spec: self, identity, inverse, class_of })
    }
}

impl GroupData {
    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    pub fn order(&self) -> usize {
        self.spec.order()
    }

    /// `T(x)`.
    pub fn step(&self, x: usize) -> f64 {
        self.spec.t_class[self.class_of[x]]
    }

    /// Whether the support of `T` generates the group.
    pub fn support_generates(&self) -> bool {
        let m = self.order();
        let support: Vec<usize> = (0..m).filter(|&x| self.step(x) > 0.0).collect();
        let mut seen = vec![false; m];
        seen[self.identity] = true;
        let mut queue = VecDeque::from([self.identity]);
        while let Some(x) = queue.pop_front() {
            for &s in &support {
                let y = self.spec.cayley[s][x];
                if !seen[y] {
                    seen[y] = true;
                    queue.push_back(y);
                }
            }
        }
        seen.iter().all(|&b| b)
    }

    /// `c_i = (1/d_i) sum_j m_j p_j chi_i(C_j)`.
    pub fn character_eigenvalues(&self) -> Vec<Complex64> {
        let s = &self.spec;
        (0..s.classes.len())
            .map(|i| {
                (0..s.classes.len())
                    .map(|j| s.classes[j].len() as f64 * s.t_class[j] * s.characters[i][j].value())
                    .sum::<Complex64>()
                    / s.dims[i] as f64
            })
            .collect()
    }
}

/// A group walk with its character-predicted spectrum of `-L`.
#[derive(Clone, Debug)]
pub struct GroupWalk {
    pub generator: Generator,
    /// `1 - c_i` merged across equal values, ascending.
    pub predicted: Vec<PredictedEigen>,
    pub support_generates: bool,
}

/// `K(x, y) = T(y x^{-1})` on uniform `mu`. A non-generating support is an
/// error unless `allow_reducible` is set, in which case it is flagged.
pub fn group_walk(spec: GroupSpec, allow_reducible: bool) -> Result<GroupWalk> {
    let g = spec.validate()?;
    let gens = g.support_generates();
    if !gens && !allow_reducible {
        return Err(Error::Precondition("support of T does not generate the group".into()));
    }
    let m = g.order();
    let rows = (0..m)
        .map(|x| {
            (0..m)
                .filter_map(|y| {
                    let t = g.step(g.spec.cayley[y][g.inverse[x]]);
                    (t > 0.0).then_some((y, t))
                })
                .collect()
        })
        .collect();
    let space = FiniteSpace::uniform(m)?;
    let generator = Generator::new(ReversibleKernel::from_rows(space, rows)?);
    let cs = g.character_eigenvalues();
    let mut predicted: Vec<PredictedEigen> = Vec::new();
    for (i, c) in cs.iter().enumerate() {
        if c.im.abs() > 1e-10 {
            return Err(Error::Numerical(format!("character eigenvalue {i} has imaginary part {:e}", c.im)));
        }
        let v = 1.0 - c.re;
        let d2 = g.spec.dims[i] * g.spec.dims[i];
        match predicted.iter_mut().find(|p| (p.value - v).abs() <= 1e-10) {
            Some(p) => p.multiplicity += d2,
            None => predicted.push(PredictedEigen { value: v, multiplicity: d2 }),
        }
    }
    predicted.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(GroupWalk { generator, predicted, support_generates: gens })
}

/// `Z_m` with step law `t[k] = T(k)`.
pub fn cyclic_group(m: usize, t: Vec<f64>) -> Result<GroupSpec> {
    if m == 0 || t.len() != m {
        return Err(Error::Invalid("cyclic group needs m >= 1 and one step weight per element".into()));
    }
    let cayley = (0..m).map(|a| (0..m).map(|b| (a + b) % m).collect()).collect();
    let classes = (0..m).map(|j| vec![j]).collect();
    let characters = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let th = 2.0 * std::f64::consts::PI * (i * j % m) as f64 / m as f64;
                    CharValue::Complex([th.cos(), th.sin()])
                })
                .collect()
        })
        .collect();
    Ok(GroupSpec { cayley, classes, characters, dims: vec![1; m], t_class: t })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                rec(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

fn cycle_type(p: &[usize]) -> Vec<usize> {
    let mut seen = vec![false; p.len()];
    let mut lens = Vec::new();
    for s in 0..p.len() {
        if seen[s] {
            continue;
        }
        let mut len = 0;
        let mut x = s;
        while !seen[x] {
            seen[x] = true;
            x = p[x];
            len += 1;
        }
        lens.push(len);
    }
    lens.sort_unstable_by(|a, b| b.cmp(a));
    lens
}

/// `S_3` or `S_4` with `T` given per element on each class. Classes are
/// ordered by cycle type: for `S_3` `[e, transpositions, 3-cycles]`, for
/// `S_4` `[e, (12), (12)(34), (123), (1234)]`.
pub fn symmetric_group(k: usize, t_class: Vec<f64>) -> Result<GroupSpec> {
    let (types, characters): (Vec<Vec<usize>>, Vec<Vec<f64>>) = match k {
        3 => (
            vec![vec![1, 1, 1], vec![2, 1], vec![3]],
            vec![vec![1.0, 1.0, 1.0], vec![1.0, -1.0, 1.0], vec![2.0, 0.0, -1.0]],
        ),
        4 => (
            vec![vec![1, 1, 1, 1], vec![2, 1, 1], vec![2, 2], vec![3, 1], vec![4]],
            vec![
                vec![1.0, 1.0, 1.0, 1.0, 1.0],
                vec![1.0, -1.0, 1.0, 1.0, -1.0],
                vec![3.0, 1.0, -1.0, 0.0, -1.0],
                vec![3.0, -1.0, -1.0, 0.0, 1.0],
                vec![2.0, 0.0, 2.0, -1.0, 0.0],
            ],
        ),
        _ => return Err(Error::Invalid(format!("built-in symmetric groups are S_3 and S_4, not S_{k}"))),
    };
    let dims = characters.iter().map(|c| c[0] as usize).collect();
    let perms = permutations(k);
    let index = |p: &[usize]| perms.iter().position(|q| q == p).expect("closed");
    let cayley = perms
        .iter()
        .map(|a| perms.iter().map(|b| index(&(0..k).map(|i| a[b[i]]).collect::<Vec<_>>())).collect())
        .collect();
    let classes = types.iter().map(|t| (0..perms.len()).filter(|&i| &cycle_type(&perms[i]) == t).collect()).collect();
    Ok(GroupSpec {
        cayley,
        classes,
        characters: characters.into_iter().map(|r| r.into_iter().map(CharValue::Real).collect()).collect(),
        dims,
        t_class,
    })
}

/// Random transposition walk on `S_k`.
pub fn transposition_walk(k: usize) -> Result<GroupSpec> {
    let pairs = (k * (k - 1) / 2) as f64;
    let mut t = vec![0.0; if k == 3 { 3 } else { 5 }];
    t[1] = 1.0 / pairs;
    symmetric_group(k, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_operator::{spectral_decompose, DEFAULT_CLUSTER_TOL};

    fn check_spectrum(spec: &SpectralData, predicted: &[PredictedEigen]) {
        let m = spec.multiplicities();
        assert_eq!(m.len(), predicted.len(), "{m:?} vs {predicted:?}");
        for ((v, k), p) in m.iter().zip(predicted) {
            assert!((v - p.value).abs() < 1e-9, "{v} vs {}", p.value);
            assert_eq!(*k, p.multiplicity);
        }
    }

    #[test]
    fn colex_rank_and_order() {
        let pop = PopulationSpace::new(5, 2).unwrap();
        assert_eq!(pop.len(), 10);
        assert_eq!(pop.state(0), [0, 1]);
        assert_eq!(pop.state(1), [0, 2]);
        assert_eq!(pop.state(2), [1, 2]);
        assert_eq!(pop.state(9), [3, 4]);
        for i in 0..pop.len() {
            assert_eq!(pop.rank(pop.state(i)), i);
        }
        let big = PopulationSpace::new(300, 299).unwrap();
        assert_eq!(big.len(), 300);
        assert!((0..big.len()).all(|i| big.rank(big.state(i)) == i));
    }

    #[test]
    fn srs_spectra() {
        for (nn, n, expect) in [(5usize, 2usize, vec![(0.0, 1), (5.0 / 6.0, 4), (4.0 / 3.0, 5)]), (4, 2, vec![(0.0, 1), (1.0, 3), (1.5, 2)])] {
            let pop = PopulationSpace::new(nn, n).unwrap();
            let (gen, predicted) = srs_generator(&pop).unwrap();
            for (p, (v, k)) in predicted.iter().zip(&expect) {
                assert!((p.value - v).abs() < 1e-15);
                assert_eq!(p.multiplicity, *k);
            }
            let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
            check_spectrum(&spec, &predicted);
            assert!((spec.gap() - nn as f64 / (n * (nn - n)) as f64).abs() < 1e-10);
        }
        let pop = PopulationSpace::new(6, 5).unwrap();
        assert_eq!(pop.predicted_spectrum().len(), 2);
        assert!(PopulationSpace::new(4, 4).is_err());
    }

    #[test]
    fn srs_components() {
        let pop = PopulationSpace::new(5, 2).unwrap();
        let (gen, _) = srs_generator(&pop).unwrap();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let f = pop.functional(|a| a.contains(&0) as u8 as f64).unwrap();
        let dec = srs_hoeffding(&pop, &gen, &spec, &f).unwrap();
        assert!(dec.order(2).unwrap().max_abs() < 1e-12);
        assert!(dec.reassemble(10).sub(&f).max_abs() < 1e-12);
        let f1 = gen.space().center(&f);
        let lf = gen.apply_l(&f1).unwrap();
        assert!(lf.zip_with(&f1, |a, b| a + 5.0 / 6.0 * b).max_abs() < 1e-12);
        let c = srs_hoeffding(&pop, &gen, &spec, &Functional::constant(10, 1.0)).unwrap();
        assert!(c.orders.iter().all(|o| o.2.max_abs() < 1e-12));
        let r = srs_gamma_product(&pop, &gen, &spec, &f1, &f1).unwrap();
        let direct = gen.gamma(&f1, &f1).unwrap();
        assert!(r.gamma.sub(&direct).max_abs() < 1e-12);
        assert!(r.form_discrepancy < 1e-12);
        assert!(srs_gamma_product(&pop, &gen, &spec, &f, &f1).is_err());
    }

    #[test]
    fn cyclic_walk() {
        let walk = group_walk(cyclic_group(4, vec![0.0, 0.5, 0.0, 0.5]).unwrap(), false).unwrap();
        let spec = spectral_decompose(&walk.generator, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(walk.predicted.iter().map(|p| p.multiplicity).sum::<usize>(), 4);
        check_spectrum(&spec, &walk.predicted);
        let vals: Vec<f64> = walk.predicted.iter().map(|p| p.value).collect();
        assert!((vals[0]).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12 && (vals[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_group_walks() {
        let walk = group_walk(transposition_walk(3).unwrap(), false).unwrap();
        let spec = spectral_decompose(&walk.generator, DEFAULT_CLUSTER_TOL).unwrap();
        check_spectrum(&spec, &walk.predicted);
        assert_eq!(walk.predicted.iter().map(|p| p.multiplicity).collect::<Vec<_>>(), vec![1, 4, 1]);
        let walk = group_walk(transposition_walk(4).unwrap(), false).unwrap();
        let spec = spectral_decompose(&walk.generator, DEFAULT_CLUSTER_TOL).unwrap();
        check_spectrum(&spec, &walk.predicted);
        let k = walk.generator.kernel().to_dense();
        for y in 0..24 {
            assert!(((0..24).map(|x| k[x][y]).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_step_is_reducible() {
        let spec = cyclic_group(3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(group_walk(spec.clone(), false).is_err());
        let walk = group_walk(spec, true).unwrap();
        assert!(!walk.support_generates);
        assert!(!walk.generator.is_ergodic());
        assert!(walk.predicted.iter().all(|p| p.value.abs() < 1e-12));
    }

    #[test]
    fn asymmetric_step_rejected() {
        let spec = cyclic_group(3, vec![0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(group_walk(spec, false), Err(Error::Precondition(_))));
    }

    #[test]
    fn json_round_trip() {
        let spec = symmetric_group(3, vec![0.0, 1.0 / 3.0, 0.0]).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("T_class"));
        assert_eq!(GroupSpec::from_json(&text).unwrap(), spec);
    }
}
