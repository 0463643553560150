//! Ground truth for the bound calculators: exact 1-Wasserstein distances
//! from empirical or finite laws to the normal and centered Gamma targets,
//! seeded samplers, and dominance verdicts.
//!
//! In one dimension `W1(P, Q) = int |F_P - F_Q|`. Between consecutive atoms
//! the empirical CDF is a constant level, so each step integrates exactly
//! through the target's CDF antiderivatives, split at the crossing quantile.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::applications::{pearson_sample, GeomGraphConfig, PearsonConfig};
use crate::core_operator::{FiniteSpace, Functional};
use crate::error::{Error, Result};
use crate::hoeffding::ProductSpace;
use crate::special::{
    centered_gamma_cdf, centered_gamma_cdf_integral, centered_gamma_quantile, centered_gamma_sf_integral, normal_cdf, normal_cdf_integral, normal_pdf,
    normal_quantile,
};
use crate::stein_bounds::BoundReport;

/// Default bootstrap resamples.
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Default bootstrap seed.
pub const BOOTSTRAP_SEED: u64 = 0x5eed;

/// Target law of the distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Normal,
    /// Centered Gamma `2 Gamma(nu/2, 1) - nu`.
    Gamma(f64),
}

impl Target {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            _ => {
                let nu = s
                    .strip_prefix("gamma:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Invalid(format!("target must be normal or gamma:<nu>, got {s:?}")))?;
                Self::gamma(nu)
            }
        }
    }

    pub fn gamma(nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::Invalid(format!("gamma target needs nu > 0, got {nu}")));
        }
        Ok(Self::Gamma(nu))
    }

    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Self::Normal => normal_cdf(x),
            Self::Gamma(nu) => centered_gamma_cdf(x, nu),
        }
    }

    fn quantile(self, p: f64) -> f64 {
        match self {
            Self::Normal => normal_quantile(p),
            Self::Gamma(nu) => centered_gamma_quantile(p, nu),
        }
    }

    /// `int_{-inf}^x F`.
    fn lower(self, x: f64) -> f64 {
        match self {
            Self::Normal => normal_cdf_integral(x),
            Self::Gamma(nu) => centered_gamma_cdf_integral(x, nu),
        }
    }

    /// `int_x^inf (1 - F)`.
    fn upper(self, x: f64) -> f64 {
        match self {
            Self::Normal => normal_pdf(x) - x * normal_cdf(-x),
            Self::Gamma(nu) => centered_gamma_sf_integral(x, nu),
        }
    }

    fn median(self) -> f64 {
        match self {
            Self::Normal => 0.0,
            Self::Gamma(nu) => centered_gamma_quantile(0.5, nu),
        }
    }
}

/// Precomputed target values at sorted atoms.
struct Grid {
    target: Target,
    median: f64,
    x: Vec<f64>,
    cdf: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Grid {
    fn new(target: Target, x: Vec<f64>) -> Self {
        let cdf = x.iter().map(|&v| target.cdf(v)).collect();
        let lower = x.iter().map(|&v| target.lower(v)).collect();
        let upper = x.iter().map(|&v| target.upper(v)).collect();
        Self { target, median: target.median(), x, cdf, lower, upper }
    }

    /// `int_{x_i}^{x_{i+1}} F`, through the better-conditioned antiderivative.
    fn mass(&self, i: usize) -> f64 {
        if self.x[i] >= self.median {
            (self.x[i + 1] - self.x[i]) - (self.upper[i] - self.upper[i + 1])
        } else {
            self.lower[i + 1] - self.lower[i]
        }
    }

    /// `int_{x_i}^{x_{i+1}} |level - F|`.
    fn step(&self, i: usize, level: f64) -> f64 {
        let (a, b) = (self.x[i], self.x[i + 1]);
        if b <= a {
            return 0.0;
        }
        let w = b - a;
        if level >= self.cdf[i + 1] {
            (level * w - self.mass(i)).max(0.0)
        } else if level <= self.cdf[i] {
            (self.mass(i) - level * w).max(0.0)
        } else {
            let c = self.target.quantile(level).clamp(a, b);
            let t = self.target;
            let (ma, mb) = if c >= self.median {
                let ua = (c - a) - (t.upper(a) - t.upper(c));
                (ua, (b - c) - (t.upper(c) - t.upper(b)))
            } else {
                (t.lower(c) - t.lower(a), t.lower(b) - t.lower(c))
            };
            (mb - level * (b - c)).max(0.0) + (level * (c - a) - ma).max(0.0)
        }
    }

    /// Distance for cumulative levels after each atom (last level is 1).
    fn distance(&self, levels: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let mut total = self.lower[0] + self.upper[n - 1];
        let mut ks = self.cdf[0].max(1.0 - self.cdf[n - 1]);
        for i in 0..n - 1 {
            total += self.step(i, levels[i]);
            ks = ks.max((levels[i] - self.cdf[i]).abs()).max((levels[i] - self.cdf[i + 1]).abs());
        }
        (total, ks)
    }
}

/// Empirical distance with a bootstrap standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1Estimate {
    pub value: f64,
    pub mc_standard_error: f64,
    pub sample_size: usize,
    /// Kolmogorov statistic, diagnostic only.
    pub ks_statistic: f64,
}

fn sorted_atoms(samples: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("W1 estimate needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    let mut s = samples.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let mut x: Vec<f64> = Vec::with_capacity(s.len());
    let mut counts: Vec<usize> = Vec::with_capacity(s.len());
    for v in s {
        if x.last() == Some(&v) {
            *counts.last_mut().expect("nonempty") += 1;
        } else {
            x.push(v);
            counts.push(1);
        }
    }
    Ok((x, counts))
}

fn levels_from_counts(counts: &[usize], total: usize) -> Vec<f64> {
    let mut acc = 0usize;
    counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / total as f64
        })
        .collect()
}

/// `W1(empirical, target)` with `resamples` bootstrap replicates.
pub fn empirical_w1(samples: &[f64], target: Target, resamples: usize, seed: u64) -> Result<W1Estimate> {
    let (x, counts) = sorted_atoms(samples)?;
    let n = samples.len();
    let grid = Grid::new(target, x);
    let (value, ks) = grid.distance(&levels_from_counts(&counts, n));
    let mut se = 0.0;
    if resamples >= 2 {
        // Resample atom counts instead of re-sorting.
        let cum: Vec<usize> = counts
            .iter()
            .scan(0usize, |s, &c| {
                *s += c;
                Some(*s)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reps = Vec::with_capacity(resamples);
        let mut boot = vec![0usize; counts.len()];
        for _ in 0..resamples {
            boot.iter_mut().for_each(|c| *c = 0);
            for _ in 0..n {
                let u = rng.random_range(0..n);
                boot[cum.partition_point(|&c| c <= u)] += 1;
            }
            reps.push(grid.distance(&levels_from_counts(&boot, n)).0);
        }
        let mean = reps.iter().sum::<f64>() / resamples as f64;
        se = (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt();
    }
    Ok(W1Estimate { value, mc_standard_error: se, sample_size: n, ks_statistic: ks })
}

pub fn empirical_w1_normal(samples: &[f64]) -> Result<W1Estimate> {
    empirical_w1(samples, Target::Normal, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED)
}

pub fn empirical_w1_gamma(samples: &[f64], nu: f64) -> Result<W1Estimate> {
    empirical_w1(samples, Target::gamma(nu)?, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED)
}

/// Exact distance from a finite law given as `(atom, weight)` pairs.
pub fn w1_atoms(atoms: &[(f64, f64)], target: Target) -> Result<f64> {
    if atoms.is_empty() {
        return Err(Error::Invalid("finite law needs at least one atom".into()));
    }
    if atoms.iter().any(|(x, w)| !x.is_finite() || !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Invalid("atoms must be finite with nonnegative weights".into()));
    }
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("finite law has zero mass".into()));
    }
    let mut a = atoms.to_vec();
    a.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut x: Vec<f64> = Vec::new();
    let mut w: Vec<f64> = Vec::new();
    for (v, m) in a {
        if x.last() == Some(&v) {
            *w.last_mut().expect("nonempty") += m;
        } else {
            x.push(v);
            w.push(m);
        }
    }
    let mut acc = 0.0;
    let mut levels: Vec<f64> = w
        .iter()
        .map(|m| {
            acc += m / total;
            acc
        })
        .collect();
    *levels.last_mut().expect("nonempty") = 1.0;
    Ok(Grid::new(target, x).distance(&levels).0)
}

/// Outcome of comparing a bound with an estimated distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    /// `bound - W1`.
    pub margin: f64,
    pub bound: f64,
    pub w1: f64,
    pub standard_error: f64,
}

/// Passes iff `bound >= W1 - 3 SE`.
pub fn dominance(bound: f64, w1: &W1Estimate) -> Verdict {
    Verdict {
        pass: bound >= w1.value - 3.0 * w1.mc_standard_error,
        margin: bound - w1.value,
        bound,
        w1: w1.value,
        standard_error: w1.mc_standard_error,
    }
}

pub fn dominance_check(bound: &BoundReport, w1: &W1Estimate) -> Verdict {
    dominance(bound.total, w1)
}

/// Specification of a reproducible sample stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerSpec {
    /// Normalized Pearson statistic.
    Pearson(PearsonConfig),
    /// Normalized subgraph count at sample size `n`.
    GeomGraph { config: GeomGraphConfig, n: usize },
    /// A functional tabulated over all configurations of a product space,
    /// in the space's index order.
    Product { space: serde_json::Value, values: Vec<f64> },
    /// A functional on a finite space with weights `mu`.
    Finite { mu: Vec<f64>, values: Vec<f64> },
    /// Standard normal draws, for calibration.
    Normal,
}

impl SamplerSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn finite(&self) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        match self {
            Self::Finite { mu, values } => {
                let labels = (0..mu.len()).map(|i| i.to_string()).collect();
                let space = FiniteSpace::from_unnormalized(labels, mu.clone())?;
                let f = Functional::new(values.clone())?;
                space.check(&f)?;
                Ok(Some((space.weights().to_vec(), values.clone())))
            }
            Self::Product { space, values } => {
                let ps = ProductSpace::from_json(&space.to_string())?;
                if values.len() != ps.size() {
                    return Err(Error::DimensionMismatch { expected: ps.size(), got: values.len() });
                }
                Ok(Some(((0..ps.size()).map(|x| ps.weight(x)).collect(), values.clone())))
            }
            _ => Ok(None),
        }
    }

    /// Atoms and weights for finite specs.
    pub fn exact_distribution(&self) -> Result<Option<Vec<(f64, f64)>>> {
        Ok(self.finite()?.map(|(w, v)| v.into_iter().zip(w).collect()))
    }
}

/// `count` draws from `spec`, reproducible for fixed `seed`.
pub fn mc_sampler(spec: &SamplerSpec, count: usize, seed: u64) -> Result<Vec<f64>> {
    match spec {
        SamplerSpec::Pearson(c) => pearson_sample(c, count, seed),
        SamplerSpec::GeomGraph { config, n } => config.sample_normalized(*n, count, seed),
        SamplerSpec::Normal => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count).map(|_| rng.sample(StandardNormal)).collect())
        }
        _ => {
            let (w, v) = spec.finite()?.expect("finite spec");
            let dist = rand::distr::weighted::WeightedIndex::new(&w).map_err(|e| Error::Invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count).map(|_| v[rng.sample(&dist)]).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{centered_gamma_pdf, integrate};

    const TWO_POINT: f64 = 0.535_377_321_547_879_9;

    #[test]
    fn closed_forms() {
        let w = empirical_w1_normal(&[0.0]).unwrap();
        assert!((w.value - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!(w.mc_standard_error < 1e-12);
        let w = empirical_w1_normal(&[-1.0, 1.0]).unwrap();
        assert!((w.value - TWO_POINT).abs() < 1e-12);
        assert!((w1_atoms(&[(-1.0, 0.5), (1.0, 0.5)], Target::Normal).unwrap() - TWO_POINT).abs() < 1e-12);
        assert!(empirical_w1_normal(&[]).is_err());
        assert!(empirical_w1_normal(&[f64::NAN]).is_err());
        assert!(empirical_w1_gamma(&[0.0], 0.0).is_err());
    }

    #[test]
    fn matches_riemann_integral() {
        let atoms = [(-0.7, 0.2), (0.1, 0.5), (2.3, 0.3)];
        let exact = w1_atoms(&atoms, Target::Normal).unwrap();
        let ecdf = |x: f64| atoms.iter().filter(|a| a.0 <= x).map(|a| a.1).sum::<f64>();
        let mut brute = 0.0;
        let h = 1e-4;
        let mut x = -12.0;
        while x < 12.0 {
            brute += h * (ecdf(x + 0.5 * h) - normal_cdf(x + 0.5 * h)).abs();
            x += h;
        }
        assert!((exact - brute).abs() < 1e-6, "{exact} vs {brute}");
    }

    #[test]
    fn gamma_median_and_exponential() {
        let nu = 3.0;
        let med = centered_gamma_quantile(0.5, nu);
        let w = empirical_w1_gamma(&[med], nu).unwrap();
        let h = |z: f64| (z - med).abs() * centered_gamma_pdf(z, nu);
        let oracle = integrate(h, -nu, med, 1e-13).unwrap() + integrate(h, med, 200.0, 1e-13).unwrap();
        assert!((w.value - oracle).abs() < 1e-8, "{} vs {oracle}", w.value);
        // nu = 2: Z = E - 2 with E ~ Exp(1/2).
        let cdf = |z: f64| if z < -2.0 { 0.0 } else { 1.0 - (-(z + 2.0) / 2.0).exp() };
        let atoms = [(-1.0, 0.25), (0.5, 0.75)];
        let exact = w1_atoms(&atoms, Target::Gamma(2.0)).unwrap();
        let ecdf = |x: f64| atoms.iter().filter(|a| a.0 <= x).map(|a| a.1).sum::<f64>();
        let brute = integrate(|x| (ecdf(x) - cdf(x)).abs(), -2.0, -1.0, 1e-12).unwrap()
            + integrate(|x| (ecdf(x) - cdf(x)).abs(), -1.0, 0.5, 1e-12).unwrap()
            + integrate(|x| (ecdf(x) - cdf(x)).abs(), 0.5, 80.0, 1e-12).unwrap();
        assert!((exact - brute).abs() < 1e-9, "{exact} vs {brute}");
    }

    #[test]
    fn quantile_grid_converges() {
        let mut last = f64::INFINITY;
        for n in [100usize, 1000, 10000] {
            let pts: Vec<f64> = (0..n).map(|i| normal_quantile((i as f64 + 0.5) / n as f64)).collect();
            let w = empirical_w1(&pts, Target::Normal, 0, 0).unwrap();
            assert!(w.value < last);
            last = w.value;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn dominance_examples() {
        let w = W1Estimate { value: TWO_POINT, mc_standard_error: 0.001, sample_size: 1, ks_statistic: 0.0 };
        let v = dominance(2.0, &w);
        assert!(v.pass && (v.margin - 1.46).abs() < 0.01);
        assert!(!dominance(0.1, &W1Estimate { value: 0.5, mc_standard_error: 0.01, ..w }).pass);
        assert!(dominance(0.5, &W1Estimate { value: 0.5, mc_standard_error: 0.02, ..w }).pass);
    }

    #[test]
    fn samplers_are_reproducible() {
        let spec = SamplerSpec::from_json(r#"{"kind": "finite", "mu": [0.5, 0.5], "values": [-1.0, 1.0]}"#).unwrap();
        let atoms = spec.exact_distribution().unwrap().unwrap();
        assert!((w1_atoms(&atoms, Target::Normal).unwrap() - TWO_POINT).abs() < 1e-12);
        let a = mc_sampler(&spec, 100, 4).unwrap();
        assert_eq!(a, mc_sampler(&spec, 100, 4).unwrap());
        assert!(a.iter().all(|v| v.abs() == 1.0));
        assert!(mc_sampler(&SamplerSpec::Normal, 10, 1).unwrap().len() == 10);
    }
}
