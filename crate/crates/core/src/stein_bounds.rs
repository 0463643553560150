//! Normal and centered-Gamma approximation bounds in the Wasserstein metric.
//!
//! Every bound is evaluated exactly on a finite space: expectations over the
//! pair `(X, X')` are the double sums `sum_x mu(x) sum_y K(x,y)(...)` of
//! [`Generator::pair_expect`]. Each bound comes back as a [`BoundReport`]
//! listing its named nonnegative terms, their sum, and every constant used.
//!
//! Families:
//! - `gb11`, `gb12`: through the pseudo-inverse `L^{-1}F`.
//! - `gb21`, `gb22`, `genexpair2`: for `F` given as a finite sum of
//!   eigenfunctions with distinct eigenvalues.
//! - `gb31`, `gb32`, `gb33`: without `L^{-1}`, using `lambda = E[Gamma(F,F)]`.
//! - `cb1`, `cb2`: classical linear-regression bounds from pair moments.
//! - Gamma `first`, `second` and `pair` for the centered Gamma law.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::core_operator::{pseudo_inverse_apply, FiniteSpace, Functional, Generator, SpectralData};
use crate::error::{Error, Result};
use crate::special::{gaussian_expectation, guarded_root4, guarded_sqrt, integrate, normal_pdf, SQRT_2_OVER_PI};

/// Tolerance on `E[F] = 0`, `Var(F) = 1` for normal bounds.
pub const NORMALIZATION_TOL: f64 = 1e-8;
/// Tolerance on `Var(F) = 2 nu` for Gamma bounds.
pub const GAMMA_VARIANCE_TOL: f64 = 1e-6;
/// Eigen-residual tolerance for supplied components.
pub const EIGEN_TOL: f64 = 1e-8;
/// Orthogonality tolerance for supplied components.
pub const ORTHO_TOL: f64 = 1e-9;

/// One named summand of a bound.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Term {
    pub label: String,
    pub value: f64,
}

/// A numerical constant entering a bound and where it comes from.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Constant {
    pub name: String,
    pub value: f64,
    pub provenance: String,
}

/// Structured result of a bound evaluation.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct BoundReport {
    pub variant: String,
    pub terms: Vec<Term>,
    pub total: f64,
    pub constants: Vec<Constant>,
    pub settings: BTreeMap<String, String>,
    pub flags: Vec<String>,
    /// Companion bounds computed alongside (alternative displays, profiles).
    pub related: Vec<BoundReport>,
}

impl BoundReport {
    pub fn new(variant: impl Into<String>) -> Self {
        Self { variant: variant.into(), ..Self::default() }
    }

    pub fn term(mut self, label: impl Into<String>, value: f64) -> Self {
        self.terms.push(Term { label: label.into(), value });
        self
    }

    pub fn constant(mut self, name: impl Into<String>, value: f64, provenance: impl Into<String>) -> Self {
        self.constants.push(Constant { name: name.into(), value, provenance: provenance.into() });
        self
    }

    pub fn setting(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.settings.insert(key.into(), value.into());
        self
    }

    pub fn flag(mut self, flag: impl Into<String>) -> Self {
        self.flags.push(flag.into());
        self
    }

    pub fn with_related(mut self, other: BoundReport) -> Self {
        self.related.push(other);
        self
    }

    /// Sums the terms into `total` after checking they are finite and
    /// nonnegative.
    pub fn finish(mut self) -> Result<Self> {
        for t in &self.terms {
            if !t.value.is_finite() {
                return Err(Error::Numerical(format!("{}: term {} is not finite", self.variant, t.label)));
            }
            if t.value < 0.0 {
                return Err(Error::Numerical(format!("{}: term {} is negative ({:e})", self.variant, t.label, t.value)));
            }
        }
        self.total = self.terms.iter().map(|t| t.value).sum();
        Ok(self)
    }

    pub fn term_value(&self, label: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.label == label).map(|t| t.value)
    }

    pub fn related_named(&self, variant: &str) -> Option<&BoundReport> {
        self.related.iter().find(|r| r.variant == variant)
    }

    /// `|total - sum of terms|`.
    pub fn total_residual(&self) -> f64 {
        (self.total - self.terms.iter().map(|t| t.value).sum::<f64>()).abs()
    }
}

fn sqrt_two_over_pi(report: BoundReport) -> BoundReport {
    report.constant("sqrt(2/pi)", SQRT_2_OVER_PI, "sup norm of psi_h' for 1-Lipschitz h")
}

/// Checks `|E F| <= tol` and `|Var F - target| <= tol`.
pub fn check_normalized(space: &FiniteSpace, f: &Functional, target_var: f64, tol: f64) -> Result<()> {
    space.check(f)?;
    let mean = space.expect(f);
    let variance = space.variance(f);
    if mean.abs() > tol || (variance - target_var).abs() > tol {
        return Err(Error::NotNormalized { mean, variance });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stein solution for the standard normal.

fn split_integral(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
    const BREAKS: [f64; 11] = [-12.0, -6.0, -3.0, -1.5, -0.5, 0.0, 0.5, 1.5, 3.0, 6.0, 12.0];
    let mut pts = vec![a];
    pts.extend(BREAKS.iter().copied().filter(|&t| t > a && t < b));
    pts.push(b);
    let mut total = 0.0;
    for w in pts.windows(2) {
        total += integrate(f, w[0], w[1], 1e-14)?;
    }
    Ok(total)
}

/// `gamma(h) = E[h(Z)]`.
pub fn gaussian_mean(h: &dyn Fn(f64) -> f64) -> Result<f64> {
    gaussian_expectation(h)
}

/// `psi_h(x) = (1/phi(x)) int_{-inf}^x (h(t) - gamma(h)) phi(t) dt` with
/// `gamma(h)` supplied. Uses the upper-tail form for `x > 0`.
pub fn stein_solution_normal_with_mean(h: &dyn Fn(f64) -> f64, gamma_h: f64, x: f64) -> Result<f64> {
    if !(x.abs() <= 30.0) {
        return Err(Error::Precondition(format!("Stein solution evaluated at |x| = {x} > 30")));
    }
    let g = |t: f64| (h(t) - gamma_h) * normal_pdf(t);
    let v = if x <= 0.0 { split_integral(&g, -40.0, x)? } else { -split_integral(&g, x, 40.0)? };
    Ok(v / normal_pdf(x))
}

/// The bounded solution of `psi' - x psi = h - gamma(h)`.
pub fn stein_solution_normal(h: &dyn Fn(f64) -> f64, x: f64) -> Result<f64> {
    let gamma_h = gaussian_mean(h)?;
    stein_solution_normal_with_mean(h, gamma_h, x)
}

/// `psi_h'(x)` from the Stein equation itself.
pub fn stein_solution_normal_derivative(h: &dyn Fn(f64) -> f64, gamma_h: f64, x: f64) -> Result<f64> {
    Ok(x * stein_solution_normal_with_mean(h, gamma_h, x)? + h(x) - gamma_h)
}

// ---------------------------------------------------------------------------
// Eigen-components.

/// `F = sum_p F_p` with `-L F_p = lambda_p F_p` and distinct `lambda_p`.
#[derive(Clone, Debug)]
pub struct EigenComponents {
    components: Vec<(f64, Functional)>,
}

impl EigenComponents {
    /// Validates eigen-residuals, distinctness and orthogonality.
    pub fn new(gen: &Generator, components: Vec<(f64, Functional)>) -> Result<Self> {
        let space = gen.space();
        for (i, (lam, f)) in components.iter().enumerate() {
            space.check(f)?;
            if !(lam.is_finite() && *lam > 0.0) {
                return Err(Error::Precondition(format!("component {i} has eigenvalue {lam}; must be positive")));
            }
            let lf = gen.apply_l(f)?;
            let res = lf.zip_with(f, |a, b| a + lam * b).max_abs();
            if res > EIGEN_TOL * (1.0 + f.max_abs()) {
                return Err(Error::Precondition(format!("component {i} is not an eigenfunction (residual {res:e})")));
            }
        }
        let scale = components.iter().fold(0.0f64, |m, (l, _)| m.max(*l));
        for i in 0..components.len() {
            for j in i + 1..components.len() {
                let (li, fi) = &components[i];
                let (lj, fj) = &components[j];
                if (li - lj).abs() <= 1e-8 * scale {
                    return Err(Error::Precondition(format!("components {i} and {j} share eigenvalue {li}")));
                }
                let ip = space.inner(fi, fj);
                if ip.abs() > ORTHO_TOL * (1.0 + space.norm(fi) * space.norm(fj)) {
                    return Err(Error::Precondition(format!("components {i} and {j} are not orthogonal ({ip:e})")));
                }
            }
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(f64, Functional)] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.components.iter().map(|(l, _)| *l).collect()
    }

    /// `sum_p F_p`.
    pub fn sum(&self, len: usize) -> Functional {
        self.components.iter().fold(Functional::zeros(len), |acc, (_, f)| acc.add(f))
    }

    /// `-L^{-1} sum_p F_p = sum_p F_p / lambda_p`.
    pub fn neg_inverse(&self, len: usize) -> Functional {
        self.components.iter().fold(Functional::zeros(len), |acc, (l, f)| acc.add(&f.scale(1.0 / l)))
    }
}

/// Projects `F` onto every nonzero eigenspace of `-L`, dropping empty ones.
pub fn project_eigencomponents(gen: &Generator, spec: &SpectralData, f: &Functional) -> Result<EigenComponents> {
    let space = gen.space();
    space.check(f)?;
    let parts = spec.project_all(space, f);
    let scale = space.norm(f).max(1.0);
    let zero_is_kernel = spec.clusters()[0].value.abs() <= 1e-9;
    let comps = spec
        .clusters()
        .iter()
        .zip(parts)
        .enumerate()
        .filter(|(i, _)| !(*i == 0 && zero_is_kernel))
        .filter(|(_, (_, p))| space.norm(p) > 1e-10 * scale)
        .map(|(_, (c, p))| (c.value, p))
        .collect();
    EigenComponents::new(gen, comps)
}

// ---------------------------------------------------------------------------
// Shared moments.

fn moment_f3lf_f2gamma(gen: &Generator, f: &Functional) -> Result<f64> {
    let space = gen.space();
    let lf = gen.apply_l(f)?;
    let gff = gen.gamma(f, f)?;
    let a = space.expect(&Functional::from_fn(f.len(), |x| f[x].powi(3) * lf[x]));
    let b = space.expect(&Functional::from_fn(f.len(), |x| f[x] * f[x] * gff[x]));
    Ok(a + 3.0 * b)
}

fn abs_third_increment(gen: &Generator, f: &Functional) -> Result<f64> {
    gen.increment_moment(f, |d| d.abs().powi(3))
}

fn mean_abs(space: &FiniteSpace, f: &Functional) -> f64 {
    space.expect(&f.map(f64::abs))
}

fn require_gap(spec: &SpectralData) -> Result<()> {
    if spec.gap() <= 0.0 {
        return Err(Error::NotErgodic(spec.clusters()[0].multiplicity));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bounds through L^{-1}.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InverseVariant {
    Gb11,
    Gb12,
}

pub fn bound_normal_inverse(gen: &Generator, spec: &SpectralData, f: &Functional, variant: InverseVariant) -> Result<BoundReport> {
    let space = gen.space();
    check_normalized(space, f, 1.0, NORMALIZATION_TOL)?;
    require_gap(spec)?;
    let h = pseudo_inverse_apply(gen, spec, f)?;
    let g = gen.gamma(f, &h.scale(-1.0))?;
    let base = sqrt_two_over_pi(BoundReport::new(match variant {
        InverseVariant::Gb11 => "gb11",
        InverseVariant::Gb12 => "gb12",
    }))
    .constant("spectral_gap", spec.gap(), "smallest nonzero eigenvalue of -L");
    let report = match variant {
        InverseVariant::Gb11 => {
            let t1 = SQRT_2_OVER_PI * mean_abs(space, &g.map(|v| 1.0 - v));
            let (a, b) = (f.values(), h.values());
            let t2 = 0.5 * gen.pair_expect(|x, y| (b[y] - b[x]).abs() * (a[y] - a[x]).powi(2));
            base.term("gamma_deviation", t1).term("increment_remainder", t2)
        }
        InverseVariant::Gb12 => {
            let t1 = SQRT_2_OVER_PI * space.variance(&g).max(0.0).sqrt();
            let a = guarded_sqrt(-space.inner(f, &h), "-E[F L^{-1}F]")?;
            let b = guarded_sqrt(moment_f3lf_f2gamma(gen, f)?, "E[F^3 LF] + 3E[F^2 Gamma(F,F)]")?;
            base.term("gamma_variance", t1).term("fourth_moment", a * b)
        }
    };
    report.finish()
}

// ---------------------------------------------------------------------------
// Bounds for sums of eigenfunctions.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenVariant {
    Gb21,
    Gb22,
    Genexpair2,
}

pub fn bound_normal_eigen(gen: &Generator, comps: &EigenComponents, variant: EigenVariant) -> Result<BoundReport> {
    let space = gen.space();
    let n = gen.len();
    if comps.is_empty() {
        return Err(Error::Precondition("no eigen-components".into()));
    }
    let f = comps.sum(n);
    check_normalized(space, &f, 1.0, NORMALIZATION_TOL)?;
    let d = comps.neg_inverse(n);
    let lambdas = comps.eigenvalues();
    let mut base = sqrt_two_over_pi(BoundReport::new(match variant {
        EigenVariant::Gb21 => "gb21",
        EigenVariant::Gb22 => "gb22",
        EigenVariant::Genexpair2 => "genexpair2",
    }));
    for (p, l) in lambdas.iter().enumerate() {
        base = base.constant(format!("lambda[{}]", p + 1), *l, "eigenvalue of -L for component");
    }
    let report = match variant {
        EigenVariant::Gb21 => {
            let g = gen.gamma(&f, &d)?;
            let mut r = base.term("gamma_deviation", SQRT_2_OVER_PI * mean_abs(space, &g.map(|v| 1.0 - v)));
            let a = f.values();
            for (p, (l, fp)) in comps.components().iter().enumerate() {
                let b = fp.values();
                let v = 0.5 / l * gen.pair_expect(|x, y| (a[y] - a[x]).powi(2) * (b[y] - b[x]).abs());
                r = r.term(format!("mixed_increment[{}]", p + 1), v);
            }
            r
        }
        EigenVariant::Gb22 => {
            let g = gen.gamma(&d, &f)?;
            let t1 = SQRT_2_OVER_PI * space.variance(&g).max(0.0).sqrt();
            let (outer, inner) = gb22_factors(space, comps, |q, fq| {
                let gq = gen.gamma(fq, fq)?;
                let lam = lambdas[q];
                let a = space.expect(&Functional::from_fn(n, |x| fq[x] * fq[x] * gq[x])) / lam;
                let b = space.expect(&fq.map(|v| v.powi(4)));
                Ok(3.0 * a - b)
            })?;
            base.term("gamma_variance", t1).term("fourth_moment", std::f64::consts::SQRT_2 * outer * inner * inner)
        }
        EigenVariant::Genexpair2 => return genexpair2(gen, comps, base),
    };
    report.finish()
}

/// `sum_p lambda_p^{-1/2} sqrt(E F_p^2)` and `sum_q lambda_q^{1/4} (radicand_q)^{1/4}`.
fn gb22_factors(
    space: &FiniteSpace,
    comps: &EigenComponents,
    radicand: impl Fn(usize, &Functional) -> Result<f64>,
) -> Result<(f64, f64)> {
    let mut outer = 0.0;
    let mut inner = 0.0;
    for (q, (l, fq)) in comps.components().iter().enumerate() {
        outer += l.powf(-0.5) * space.inner(fq, fq).sqrt();
        inner += l.powf(0.25) * guarded_root4(radicand(q, fq)?, "fourth-moment radicand")?;
    }
    Ok((outer, inner))
}

/// Both displays in pair-moment form: conditional increments are computed
/// directly from `K`, independently of the carré du champ.
fn genexpair2(gen: &Generator, comps: &EigenComponents, base: BoundReport) -> Result<BoundReport> {
    let space = gen.space();
    let n = gen.len();
    let m = comps.len();
    let lambdas = comps.eigenvalues();
    let vals: Vec<&[f64]> = comps.components().iter().map(|(_, f)| f.values()).collect();
    let cond = gen.cond_expect(|x, y| {
        let mut s = 0.0;
        for p in 0..m {
            for q in 0..m {
                s += (vals[p][y] - vals[p][x]) * (vals[q][y] - vals[q][x]) / (2.0 * lambdas[p]);
            }
        }
        s
    });
    let t1 = SQRT_2_OVER_PI * space.variance(&cond).max(0.0).sqrt();
    let t2 = 0.5
        * gen.pair_expect(|x, y| {
            let mut s = 0.0;
            for p in 0..m {
                for q in 0..m {
                    for r in 0..m {
                        s += (vals[q][y] - vals[q][x]) * (vals[r][y] - vals[r][x]) * (vals[p][y] - vals[p][x]).abs() / lambdas[p];
                    }
                }
            }
            s
        });
    let (outer, inner) = gb22_factors(space, comps, |q, fq| {
        let v = fq.values();
        let lam = lambdas[q];
        let c = gen.cond_expect(|x, y| (v[y] - v[x]).powi(2) / (2.0 * lam));
        let a = space.expect(&Functional::from_fn(n, |x| fq[x] * fq[x] * c[x]));
        let b = space.expect(&fq.map(|t| t.powi(4)));
        Ok(3.0 * a - b)
    })?;
    let second = sqrt_two_over_pi(BoundReport::new("genexpair2_second"))
        .term("conditional_variance", t1)
        .term("fourth_moment", std::f64::consts::SQRT_2 * outer * inner * inner)
        .finish()?;
    base.term("conditional_variance", t1).term("third_increment", t2).with_related(second).finish()
}

// ---------------------------------------------------------------------------
// Bounds without L^{-1}.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoInverseVariant {
    Gb31,
    Gb32,
    Gb33,
}

pub fn bound_normal_noinverse(gen: &Generator, f: &Functional, variant: NoInverseVariant) -> Result<BoundReport> {
    let space = gen.space();
    check_normalized(space, f, 1.0, NORMALIZATION_TOL)?;
    let lambda = gen.energy(f)?;
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!("lambda = E[Gamma(F,F)] = {lambda} must be positive")));
    }
    let gff = gen.gamma(f, f)?;
    let lf = gen.apply_l(f)?;
    let base = sqrt_two_over_pi(BoundReport::new(match variant {
        NoInverseVariant::Gb31 => "gb31",
        NoInverseVariant::Gb32 => "gb32",
        NoInverseVariant::Gb33 => "gb33",
    }))
    .constant("lambda", lambda, "E[Gamma(F,F)]");
    let gamma_var = SQRT_2_OVER_PI / lambda * space.variance(&gff).max(0.0).sqrt();
    let third = || -> Result<f64> { Ok(abs_third_increment(gen, f)? / (2.0 * lambda)) };
    let regression = || guarded_sqrt(space.inner(&lf, &lf) / (lambda * lambda) - 1.0, "lambda^-2 E[(LF)^2] - 1");
    let report = match variant {
        NoInverseVariant::Gb31 => {
            let t1 = SQRT_2_OVER_PI / lambda * mean_abs(space, &gff.map(|v| lambda - v));
            let t3 = mean_abs(space, &lf.zip_with(f, |a, b| a / lambda + b));
            base.term("gamma_deviation", t1).term("third_increment", third()?).term("regression_defect", t3)
        }
        NoInverseVariant::Gb32 => base
            .term("gamma_variance", gamma_var)
            .term("third_increment", third()?)
            .term("regression_defect", regression()?),
        NoInverseVariant::Gb33 => {
            let m = guarded_sqrt(moment_f3lf_f2gamma(gen, f)?, "E[F^3 LF] + 3E[F^2 Gamma(F,F)]")?;
            base.term("gamma_variance", gamma_var)
                .term("regression_defect", regression()?)
                .term("fourth_moment", std::f64::consts::SQRT_2 / lambda.sqrt() * m)
        }
    };
    report.finish()
}

// ---------------------------------------------------------------------------
// Classical bounds from pair moments.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// On the full state `X`.
    X,
    /// On the value of `W` (states with equal `W` are lumped).
    W,
}

/// One atom of the conditioning sigma-field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAtom {
    pub weight: f64,
    /// Value of `W` on the atom.
    pub w: f64,
    /// `E[W' - W | atom]`.
    pub drift: f64,
    /// `E[(W' - W)^2 | atom]`.
    pub second: f64,
}

/// Aggregated moments of an exchangeable pair `(W, W')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMoments {
    pub lambda: f64,
    pub conditioning: Conditioning,
    pub atoms: Vec<PairAtom>,
    /// `E|W' - W|^3`.
    pub third_abs: f64,
}

impl PairMoments {
    /// Exact moments of `(F(X), F(X'))` on a finite space.
    pub fn from_generator(gen: &Generator, f: &Functional, lambda: f64, conditioning: Conditioning) -> Result<Self> {
        gen.space().check(f)?;
        let v = f.values();
        let drift = gen.cond_expect(|x, y| v[y] - v[x]);
        let second = gen.cond_expect(|x, y| (v[y] - v[x]).powi(2));
        let mu = gen.space().weights();
        let mut atoms: Vec<PairAtom> = (0..gen.len())
            .map(|x| PairAtom { weight: mu[x], w: v[x], drift: drift[x], second: second[x] })
            .collect();
        if conditioning == Conditioning::W {
            atoms = lump_by_value(atoms);
        }
        Ok(Self { lambda, conditioning, atoms, third_abs: abs_third_increment(gen, f)? })
    }

    fn expect(&self, g: impl Fn(&PairAtom) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * g(a)).sum()
    }

    fn variance(&self, g: impl Fn(&PairAtom) -> f64) -> f64 {
        let m = self.expect(&g);
        self.expect(|a| (g(a) - m).powi(2))
    }
}

/// Merges atoms whose `w` agree to `1e-12` relative, averaging moments.
pub fn lump_by_value(mut atoms: Vec<PairAtom>) -> Vec<PairAtom> {
    atoms.sort_by(|a, b| a.w.total_cmp(&b.w));
    let mut out: Vec<PairAtom> = Vec::new();
    for a in atoms {
        match out.last_mut() {
            Some(last) if (a.w - last.w).abs() <= 1e-12 * (1.0 + a.w.abs()) => {
                let tw = last.weight + a.weight;
                last.drift = (last.weight * last.drift + a.weight * a.drift) / tw;
                last.second = (last.weight * last.second + a.weight * a.second) / tw;
                last.weight = tw;
            }
            _ => out.push(a),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicalVariant {
    Cb1,
    Cb2,
}

pub fn bound_classical(m: &PairMoments, variant: ClassicalVariant) -> Result<BoundReport> {
    let lambda = m.lambda;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Precondition(format!("lambda = {lambda} must be positive")));
    }
    let cond = match m.conditioning {
        Conditioning::X => "X",
        Conditioning::W => "W",
    };
    let dev = SQRT_2_OVER_PI * m.expect(|a| (1.0 - a.second / (2.0 * lambda)).abs());
    let var = SQRT_2_OVER_PI * m.variance(|a| a.second / (2.0 * lambda)).max(0.0).sqrt();
    let third_half = m.third_abs / (2.0 * lambda);
    let mk = |name: &str| {
        sqrt_two_over_pi(BoundReport::new(name)).constant("lambda", lambda, "supplied").setting("conditioning", cond)
    };
    match variant {
        ClassicalVariant::Cb1 => {
            let second = mk("cb1_variance").term("conditional_variance", var).term("third_increment", third_half).finish()?;
            mk("cb1").term("conditional_deviation", dev).term("third_increment", third_half).with_related(second).finish()
        }
        ClassicalVariant::Cb2 => {
            let r_abs = m.expect(|a| (a.drift + lambda * a.w).abs());
            let r_sq = m.expect(|a| (a.drift + lambda * a.w).powi(2));
            let second = mk("cb2_variance")
                .term("conditional_variance", var)
                .term("third_increment", third_half)
                .term("regression_remainder", 2.0 / lambda * r_sq.sqrt())
                .finish()?;
            mk("cb2")
                .term("conditional_deviation", dev)
                .term("third_increment", m.third_abs / (3.0 * lambda))
                .term("regression_remainder", r_abs / lambda)
                .with_related(second)
                .finish()
        }
    }
}

// ---------------------------------------------------------------------------
// Centered Gamma bounds.

/// Target `Z_nu = 2 X - nu` with `X ~ Gamma(nu/2, 1)` and the test-function
/// norms `(||h'||, ||h''||)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaTarget {
    pub nu: f64,
    pub h1: f64,
    pub h2: f64,
}

impl GammaTarget {
    pub fn new(nu: f64, h1: f64, h2: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Invalid(format!("nu = {nu} must be positive")));
        }
        if !(h1 > 0.0 && h2 > 0.0 && h1.is_finite() && h2.is_finite()) {
            return Err(Error::Invalid("test-function norms must be positive".into()));
        }
        Ok(Self { nu, h1, h2 })
    }

    /// Norms default to `(1, 1)`.
    pub fn with_nu(nu: f64) -> Result<Self> {
        Self::new(nu, 1.0, 1.0)
    }

    /// `max(1, 2/nu) ||h'||`.
    pub fn c1(&self) -> f64 {
        (2.0 / self.nu).max(1.0) * self.h1
    }

    /// `max(1/4, 1/(2 nu)) ||h'|| + ||h''|| / 4`.
    pub fn c2(&self) -> f64 {
        (0.5 / self.nu).max(0.25) * self.h1 + 0.25 * self.h2
    }

    fn annotate(&self, r: BoundReport) -> BoundReport {
        r.constant("nu", self.nu, "target parameter")
            .constant("h1", self.h1, "sup norm of h'")
            .constant("h2", self.h2, "sup norm of h''")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaVariant {
    First,
    Second,
    /// Regression form with `R`, `S` derived from the pair at this `lambda`.
    Pair { lambda: f64 },
}

pub fn bound_gamma(gen: &Generator, spec: &SpectralData, f: &Functional, target: &GammaTarget, variant: GammaVariant) -> Result<BoundReport> {
    let space = gen.space();
    if let GammaVariant::Pair { lambda } = variant {
        let m = GammaPairMoments::from_generator(gen, f, lambda, target.nu)?;
        return bound_gamma_pair(&m, target);
    }
    check_normalized(space, f, 2.0 * target.nu, GAMMA_VARIANCE_TOL)?;
    require_gap(spec)?;
    let h = pseudo_inverse_apply(gen, spec, f)?;
    let g = gen.gamma(f, &h.scale(-1.0))?;
    let nu = target.nu;
    let base = target
        .annotate(BoundReport::new(if variant == GammaVariant::First { "gamma_first" } else { "gamma_second" }))
        .constant("c1", target.c1(), "max(1, 2/nu) ||h'||: sup norm of psi_h'")
        .constant("c2", target.c2(), "max(1/4, 1/(2nu)) ||h'|| + ||h''||/4: quarter of Lipschitz constant of psi_h'");
    let report = if variant == GammaVariant::First {
        let t1 = target.c1() * mean_abs(space, &Functional::from_fn(f.len(), |x| 2.0 * (f[x] + nu) - g[x]));
        let (a, b) = (f.values(), h.values());
        let t2 = target.c2() * gen.pair_expect(|x, y| (b[y] - b[x]).abs() * (a[y] - a[x]).powi(2));
        base.term("gamma_deviation", t1).term("increment_remainder", t2)
    } else {
        let dev = Functional::from_fn(f.len(), |x| 2.0 * f[x] - g[x]);
        let t1 = target.c1() * space.variance(&dev).max(0.0).sqrt();
        let a = guarded_sqrt(-space.inner(f, &h), "-E[F L^{-1}F]")?;
        let b = guarded_sqrt(moment_f3lf_f2gamma(gen, f)?, "E[F^3 LF] + 3E[F^2 Gamma(F,F)]")?;
        base.term("gamma_variance", t1).term("fourth_moment", target.c2() * a * b)
    };
    report.finish()
}

/// One atom of the regression decomposition: weight, `R`, `S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionAtom {
    pub weight: f64,
    pub r: f64,
    pub s: f64,
}

/// Inputs of the regression-form Gamma bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPairMoments {
    pub lambda: f64,
    pub atoms: Vec<RegressionAtom>,
    /// `E|W' - W|^3`.
    pub third_abs: f64,
    /// `E[W^2]`.
    pub second_moment: f64,
}

impl GammaPairMoments {
    /// `R = lambda^{-1} E[W'-W | X] + W`, `S = (2 lambda)^{-1} E[(W'-W)^2 | X] - 2(W + nu)`.
    pub fn from_generator(gen: &Generator, f: &Functional, lambda: f64, nu: f64) -> Result<Self> {
        gen.space().check(f)?;
        if !(lambda > 0.0) {
            return Err(Error::Precondition(format!("lambda = {lambda} must be positive")));
        }
        let v = f.values();
        let drift = gen.cond_expect(|x, y| v[y] - v[x]);
        let second = gen.cond_expect(|x, y| (v[y] - v[x]).powi(2));
        let mu = gen.space().weights();
        let atoms = (0..gen.len())
            .map(|x| RegressionAtom {
                weight: mu[x],
                r: drift[x] / lambda + v[x],
                s: second[x] / (2.0 * lambda) - 2.0 * (v[x] + nu),
            })
            .collect();
        Ok(Self {
            lambda,
            atoms,
            third_abs: abs_third_increment(gen, f)?,
            second_moment: gen.space().inner(f, f),
        })
    }
}

pub fn bound_gamma_pair(m: &GammaPairMoments, target: &GammaTarget) -> Result<BoundReport> {
    let lambda = m.lambda;
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!("lambda = {lambda} must be positive")));
    }
    let k = (2.0 / target.nu).max(1.0);
    let e = |g: &dyn Fn(&RegressionAtom) -> f64| m.atoms.iter().map(|a| a.weight * g(a)).sum::<f64>();
    let s_abs = e(&|a| a.s.abs());
    let r_abs = e(&|a| a.r.abs());
    let third = (k * target.h1 + target.h2) / (6.0 * lambda) * m.third_abs;
    let mk = |name: &str| target.annotate(BoundReport::new(name)).constant("lambda", lambda, "supplied");
    let mut report = mk("gamma_pair")
        .term("s_term", target.h1 * k * s_abs)
        .term("r_term", target.h1 * r_abs)
        .term("third_increment", third);
    let r_zero = m.atoms.iter().all(|a| a.r.abs() <= 1e-12);
    if r_zero && (m.second_moment - 2.0 * target.nu).abs() <= GAMMA_VARIANCE_TOL {
        let s_mean = e(&|a| a.s);
        let s_var = e(&|a| (a.s - s_mean).powi(2));
        let second = mk("gamma_pair_variance")
            .term("s_variance", k * target.h1 * s_var.max(0.0).sqrt())
            .term("third_increment", third)
            .finish()?;
        report = report.with_related(second);
    } else {
        report = report.flag("variance display unavailable: R is nonzero or E[W^2] != 2 nu");
    }
    report.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_operator::{build_generator, random_reversible_kernel, spectral_decompose, DEFAULT_CLUSTER_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_point() -> (Generator, SpectralData, Functional) {
        let gen = build_generator(FiniteSpace::uniform(2).unwrap(), &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        (gen, spec, Functional::new(vec![-1.0, 1.0]).unwrap())
    }

    #[test]
    fn stein_solution_closed_forms() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let v = stein_solution_normal(&|t| t, x).unwrap();
            assert!((v + 1.0).abs() < 1e-10, "h = x at {x}: {v}");
            let v = stein_solution_normal(&|t| t * t - 1.0, x).unwrap();
            assert!((v + x).abs() < 1e-9, "h = x^2 - 1 at {x}: {v}");
        }
        // For h = |x|: psi(0) = sqrt(2 pi) (phi(0) - sqrt(2/pi)/2) = 0.
        assert!(stein_solution_normal(&|t: f64| t.abs(), 0.0).unwrap().abs() < 1e-10);
    }

    #[test]
    fn stein_solution_bounds_for_lipschitz_h() {
        let h = |t: f64| (t - 0.3).abs();
        let gh = gaussian_mean(&h).unwrap();
        let grid: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let psi: Vec<f64> = grid.iter().map(|&x| stein_solution_normal_with_mean(&h, gh, x).unwrap()).collect();
        for w in psi.windows(2) {
            assert!(((w[1] - w[0]) / 0.1).abs() <= SQRT_2_OVER_PI + 1e-6);
        }
        assert!(psi.iter().all(|v| v.abs() <= 1.0 + 1e-6));
        let x = 1.1;
        let fd = (stein_solution_normal_with_mean(&h, gh, x + 1e-5).unwrap()
            - stein_solution_normal_with_mean(&h, gh, x - 1e-5).unwrap())
            / 2e-5;
        assert!((fd - stein_solution_normal_derivative(&h, gh, x).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn two_point_values() {
        let (gen, spec, f) = two_point();
        let r = bound_normal_inverse(&gen, &spec, &f, InverseVariant::Gb11).unwrap();
        assert!(r.term_value("gamma_deviation").unwrap().abs() < 1e-14);
        assert!((r.total - 2.0).abs() < 1e-12);
        let r = bound_normal_noinverse(&gen, &f, NoInverseVariant::Gb31).unwrap();
        assert!((r.total - 2.0).abs() < 1e-12);
        let comps = project_eigencomponents(&gen, &spec, &f).unwrap();
        assert_eq!(comps.len(), 1);
        assert!((comps.eigenvalues()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_has_no_components() {
        let (gen, spec, _) = two_point();
        let comps = project_eigencomponents(&gen, &spec, &Functional::constant(2, 4.0)).unwrap();
        assert!(comps.is_empty());
    }

    #[test]
    fn equal_eigenvalues_rejected() {
        let (gen, _, f) = two_point();
        let err = EigenComponents::new(&gen, vec![(2.0, f.scale(0.5)), (2.0, f.scale(0.5))]).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn unnormalized_rejected() {
        let (gen, spec, f) = two_point();
        let err = bound_normal_inverse(&gen, &spec, &f.scale(2.0), InverseVariant::Gb11).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { .. }));
    }

    #[test]
    fn classical_collapse_on_eigenfunction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = random_reversible_kernel(8, 0.5, &mut rng).unwrap();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let f = gen.space().normalize(&spec.eigenfunction(1)).unwrap();
        let lam = spec.eigenvalues()[1];
        let gb11 = bound_normal_inverse(&gen, &spec, &f, InverseVariant::Gb11).unwrap();
        let m = PairMoments::from_generator(&gen, &f, lam, Conditioning::X).unwrap();
        let cb1 = bound_classical(&m, ClassicalVariant::Cb1).unwrap();
        assert!((gb11.total - cb1.total).abs() < 1e-10);
        let gb31 = bound_normal_noinverse(&gen, &f, NoInverseVariant::Gb31).unwrap();
        assert!(gb31.term_value("regression_defect").unwrap() < 1e-10);
    }

    #[test]
    fn cb2_with_exact_regression() {
        let (gen, _, f) = two_point();
        let m = PairMoments::from_generator(&gen, &f, 2.0, Conditioning::W).unwrap();
        let cb1 = bound_classical(&m, ClassicalVariant::Cb1).unwrap();
        let cb2 = bound_classical(&m, ClassicalVariant::Cb2).unwrap();
        assert!(cb2.term_value("regression_remainder").unwrap() < 1e-15);
        let ratio = cb2.term_value("third_increment").unwrap() / cb1.term_value("third_increment").unwrap();
        assert!((ratio - 2.0 / 3.0).abs() < 1e-14);
        let off = PairMoments { lambda: 1.0, ..m };
        assert!(bound_classical(&off, ClassicalVariant::Cb1).unwrap().term_value("conditional_deviation").unwrap() > 0.0);
    }

    #[test]
    fn gamma_pair_with_zero_remainders() {
        let m = GammaPairMoments {
            lambda: 0.5,
            atoms: vec![RegressionAtom { weight: 1.0, r: 0.0, s: 0.0 }],
            third_abs: 3.0,
            second_moment: 2.0,
        };
        let t = GammaTarget::with_nu(1.0).unwrap();
        let r = bound_gamma_pair(&m, &t).unwrap();
        assert_eq!(r.total, r.term_value("third_increment").unwrap());
        assert!((r.total - 3.0 * 3.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_bounds_on_random_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gen = random_reversible_kernel(7, 0.7, &mut rng).unwrap();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let nu = 3.0f64;
        let raw = Functional::from_fn(7, |_| rng.random::<f64>());
        let f = gen.space().normalize(&raw).unwrap().scale((2.0 * nu).sqrt());
        let t = GammaTarget::with_nu(nu).unwrap();
        let a = bound_gamma(&gen, &spec, &f, &t, GammaVariant::First).unwrap();
        let b = bound_gamma(&gen, &spec, &f, &t, GammaVariant::Second).unwrap();
        assert!(a.total.is_finite() && b.total >= 0.0);
        let p = bound_gamma(&gen, &spec, &f, &t, GammaVariant::Pair { lambda: spec.gap() }).unwrap();
        assert!(p.total > 0.0);
        assert!(bound_gamma(&gen, &spec, &f.scale(2.0), &t, GammaVariant::First).is_err());
    }

    #[test]
    fn report_invariants() {
        let r = BoundReport::new("x").term("a", 1.0).term("b", 0.5).finish().unwrap();
        assert_eq!(r.total, 1.5);
        assert_eq!(r.total_residual(), 0.0);
        assert!(BoundReport::new("x").term("a", -1.0).finish().is_err());
    }
}
