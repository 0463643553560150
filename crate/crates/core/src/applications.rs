//! End-to-end pipelines: Pearson's chi-square statistic with closed-form
//! contraction norms, and subgraph counts of geometric random graphs with
//! Monte Carlo contraction norms and regime classification.

use std::collections::HashMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial as BinomialLaw, Discrete};

use crate::error::{Error, Result};
use crate::stein_bounds::BoundReport;
use crate::ustat::{
    bound_symmetric, bound_ustat_table, derive_degenerate, g_contraction_table_mc, BaseMeasure, KConstants, PointModel, SymKernel, SymmetricVariant,
    UstatSummary,
};
use crate::verify::{empirical_w1_normal, W1Estimate};

/// Replicates per parallel block in graph simulations.
const SIM_BLOCK: usize = 1000;
/// Tolerance on `sum p = 1`.
pub const PROBABILITY_TOL: f64 = 1e-12;
/// Largest motif order.
pub const MOTIF_CAP: usize = 5;
/// Largest point dimension.
pub const DIM_CAP: usize = 8;
/// Allowed deviation of a fitted log-log slope from its prediction.
pub const SLOPE_TOL: f64 = 0.15;

// ---------------------------------------------------------------------------
// Pearson's statistic.

/// `n` i.i.d. draws from `p` on `m` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonConfig {
    pub n: usize,
    pub m: usize,
    pub p: Vec<f64>,
}

impl PearsonConfig {
    pub fn new(n: usize, p: Vec<f64>) -> Result<Self> {
        let c = Self { n, m: p.len(), p };
        c.validate()?;
        Ok(c)
    }

    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        Self::new(n, vec![1.0 / m as f64; m])
    }

    /// `p(i) ∝ i^(-alpha)`.
    pub fn zipf(n: usize, m: usize, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Invalid(format!("zipf exponent must be finite, got {alpha}")));
        }
        let w: Vec<f64> = (1..=m).map(|i| (i as f64).powf(-alpha)).collect();
        let s: f64 = w.iter().sum();
        Self::new(n, w.into_iter().map(|x| x / s).collect())
    }

    /// `uniform`, `zipf:<alpha>`.
    pub fn from_dist(n: usize, m: usize, dist: &str) -> Result<Self> {
        if dist == "uniform" {
            return Self::uniform(n, m);
        }
        match dist.strip_prefix("zipf:").map(str::parse::<f64>) {
            Some(Ok(a)) => Self::zipf(n, m, a),
            _ => Err(Error::Invalid(format!("distribution must be uniform or zipf:<alpha>, got {dist:?}"))),
        }
    }

    /// One probability per record, in the first column.
    pub fn from_csv<R: Read>(n: usize, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut p = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = rec.get(0).unwrap_or("");
            p.push(field.parse::<f64>().map_err(|_| Error::Invalid(format!("bad probability {field:?}")))?);
        }
        Self::new(n, p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m != self.p.len() {
            return Err(Error::DimensionMismatch { expected: self.m, got: self.p.len() });
        }
        if self.m == 0 {
            return Err(Error::Invalid("need at least one class".into()));
        }
        if let Some(i) = self.p.iter().position(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::Invalid(format!("class {i} has probability {}, need > 0", self.p[i])));
        }
        let s: f64 = self.p.iter().sum();
        if (s - 1.0).abs() > PROBABILITY_TOL {
            return Err(Error::Invalid(format!("probabilities sum to {s}")));
        }
        if self.n < 2 {
            return Err(Error::Invalid(format!("need n >= 2, got {}", self.n)));
        }
        Ok(())
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.m as f64;
        self.p.iter().all(|&x| (x - u).abs() <= 1e-15)
    }
}

/// Variance, the seven normalized contraction norms and the moment sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonTerms {
    pub sigma2: f64,
    /// `n^(1/2)|phi1*_1^0 phi1|, n|phi1*_1^0 phi2|, n^(3/2)|phi1*_1^1 phi2|,
    /// n^2|phi2*_1^1 phi2|, n^(3/2)|phi2*_1^0 phi2|, n^(3/2)|phi2*_2^1 phi2|,
    /// n|phi2*_2^0 phi2|`.
    pub quantities: [f64; 7],
    /// `||1/p - m||_2` in `L^2(p)`.
    pub l2: f64,
    /// `||1/p - m||_4` in `L^4(p)`.
    pub l4: f64,
    pub sum_inv_p: f64,
    pub sum_inv_p2: f64,
    pub sum_inv_p3: f64,
    pub p_star: f64,
}

pub fn pearson_terms(config: &PearsonConfig) -> Result<PearsonTerms> {
    config.validate()?;
    let (n, m) = (config.n as f64, config.m as f64);
    let p = &config.p;
    let dev = |x: f64| 1.0 / x - m;
    let l2_sq: f64 = p.iter().map(|&x| x * dev(x).powi(2)).sum();
    let l4_4: f64 = p.iter().map(|&x| x * dev(x).powi(4)).sum();
    let sigma2 = (l2_sq + 2.0 * (n - 1.0) * (m - 1.0)) / n;
    if !(sigma2 > 0.0) {
        return Err(Error::Precondition(format!("Pearson statistic is degenerate: variance {sigma2}")));
    }
    let sum_inv = |k: i32| p.iter().map(|&x| x.powi(-k)).sum::<f64>();
    let sum_p2: f64 = p.iter().map(|x| x * x).sum();
    // Nonnegative summands for the bracketed polynomials in the proof.
    let q2: f64 = p.iter().map(|&x| dev(x).powi(2) * (1.0 - x)).sum();
    let q7: f64 = p.iter().map(|&x| (1.0 - x).powi(4) / (x * x)).sum::<f64>() + 1.0 - sum_p2;
    let q5 = l2_sq + (m - 1.0).powi(2);
    let ns2 = n * sigma2;
    let t5 = 4.0 * n.sqrt() * q5.sqrt() / ns2;
    let quantities = [
        l4_4.sqrt() / (n.sqrt() * ns2),
        2.0 * q2.sqrt() / ns2,
        2.0 * n.sqrt() * l2_sq.sqrt() / ns2,
        4.0 * (m - 1.0).sqrt() / sigma2,
        t5,
        t5,
        4.0 * q7.sqrt() / ns2,
    ];
    Ok(PearsonTerms {
        sigma2,
        quantities,
        l2: l2_sq.sqrt(),
        l4: l4_4.sqrt().sqrt(),
        sum_inv_p: sum_inv(1),
        sum_inv_p2: sum_inv(2),
        sum_inv_p3: sum_inv(3),
        p_star: p.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Order-2 kernel `psi` with `chi^2 = sum_{j<k} psi(X_j, X_k)`.
pub fn pearson_kernel(config: &PearsonConfig) -> Result<SymKernel> {
    config.validate()?;
    let n = config.n as f64;
    let p = &config.p;
    let measure = BaseMeasure::new(p.clone())?;
    SymKernel::from_fn(measure, 2, |x| {
        let (a, b) = (x[0], x[1]);
        let diag = if a == b { 2.0 / (n * p[a]) } else { 0.0 };
        (1.0 / p[a] + 1.0 / p[b]) / (n * (n - 1.0)) + diag - 2.0 / (n - 1.0)
    })
}

/// `phi_1`, `phi_2` as printed for the normalized statistic.
pub fn pearson_phi(config: &PearsonConfig) -> Result<(SymKernel, SymKernel)> {
    let terms = pearson_terms(config)?;
    let (n, m) = (config.n as f64, config.m as f64);
    let sigma = terms.sigma2.sqrt();
    let p = &config.p;
    let measure = BaseMeasure::new(p.clone())?;
    let phi1 = SymKernel::from_fn(measure.clone(), 1, |x| (1.0 / p[x[0]] - m) / (n * sigma))?;
    let phi2 = SymKernel::from_fn(measure, 2, |x| {
        let d = if x[0] == x[1] { 1.0 / p[x[0]] } else { 0.0 };
        2.0 * (d - 1.0) / (n * sigma)
    })?;
    Ok((phi1, phi2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PearsonMode {
    Explicit,
    Rate,
}

impl PearsonMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Self::Explicit),
            "rate" => Ok(Self::Rate),
            _ => Err(Error::Invalid(format!("mode must be explicit or rate, got {s:?}"))),
        }
    }
}

fn profile(name: &str, parts: &[(&str, f64)]) -> Result<BoundReport> {
    let mut report = BoundReport::new(name).constant("C", 1.0, "absolute constant, not derived; reported as 1");
    let mut best = 0.0f64;
    for (label, v) in parts {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name}: component {label} is not finite")));
        }
        report = report.setting(format!("component {label}"), format!("{v:.17e}"));
        best = best.max(*v);
    }
    report.term("max", best).setting("mode", "rate").finish()
}

/// Rate mode: profiles with constant 1. Explicit mode: the genboundsymstat
/// bound on the exact kernels, with the rate profiles attached.
pub fn pearson_bound(config: &PearsonConfig, mode: PearsonMode) -> Result<BoundReport> {
    let t = pearson_terms(config)?;
    let (n, m) = (config.n as f64, config.m as f64);
    let (sn, sm) = (n.sqrt(), m.sqrt());
    let ns2 = n * t.sigma2;
    let first = profile(
        "pearson_theorem_first",
        &[
            ("1/sqrt(n)", 1.0 / sn),
            ("1/sqrt(m)", 1.0 / sm),
            ("l4^2/(sqrt(n) n sigma^2)", t.l4 * t.l4 / (sn * ns2)),
            ("(n^-1/4 (m-1)^-1/4 + n^-1/2) l4/(sqrt(n) sigma)", (n.powf(-0.25) * (m - 1.0).powf(-0.25) + 1.0 / sn) * t.l4 / (sn * t.sigma2.sqrt())),
            ("sqrt(sum 1/p^2)/(n sigma^2)", t.sum_inv_p2.sqrt() / ns2),
        ],
    )?;
    let third = (t.sum_inv_p3 - m.powi(4)).max(0.0).sqrt() / (n.powf(1.5) * t.sigma2);
    let second = profile(
        "pearson_theorem_second",
        &[
            ("1/sqrt(n)", 1.0 / sn),
            ("1/sqrt(m)", 1.0 / sm),
            ("sqrt(sum 1/p^3 - m^4)/(n^3/2 sigma^2)", third),
            ("sqrt(sum 1/p^2)/(n sigma^2)", t.sum_inv_p2.sqrt() / ns2),
        ],
    )?;
    let np = n * t.p_star;
    let corollary = profile(
        "pearson_corollary",
        &[("1/sqrt(n)", 1.0 / sn), ("1/sqrt(m)", 1.0 / sm), ("1/(sqrt(m)(n p*)^3/2)", 1.0 / (sm * np.powf(1.5))), ("1/(n p* sqrt(m))", 1.0 / (np * sm))],
    )?;
    let mut related = vec![second, corollary];
    if config.is_uniform() {
        related.push(profile("uniform_reduced", &[("1/sqrt(n)", 1.0 / sn), ("1/sqrt(m)", 1.0 / sm), ("sqrt(m)/n", sm / n)])?);
    }
    let mut report = match mode {
        PearsonMode::Rate => {
            let mut r = first;
            r.variant = "pearson_rate".into();
            r
        }
        PearsonMode::Explicit => {
            let family = derive_degenerate(&pearson_kernel(config)?, config.n)?;
            let mut r = bound_symmetric(&family, SymmetricVariant::GenBoundSymStat, &KConstants::relative_rate())?;
            r.variant = "pearson_explicit".into();
            related.insert(0, first);
            r.setting("mode", "explicit").setting("sigma2_family", format!("{:.17e}", family.sigma2))
        }
    };
    report = report.setting("n", config.n.to_string()).setting("m", config.m.to_string()).setting("sigma2", format!("{:.17e}", t.sigma2));
    for r in related {
        report = report.with_related(r);
    }
    Ok(report)
}

fn suffix_sums(p: &[f64]) -> Vec<f64> {
    let mut tail = vec![0.0; p.len() + 1];
    for i in (0..p.len()).rev() {
        tail[i] = tail[i + 1] + p[i];
    }
    tail
}

fn draw_chi2(config: &PearsonConfig, tail: &[f64], rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = config.n as f64;
    let mut remaining = config.n as u64;
    let mut chi2 = 0.0;
    for (i, &pi) in config.p.iter().enumerate() {
        let count = if i + 1 == config.m || remaining == 0 {
            remaining
        } else {
            let prob = (pi / tail[i]).clamp(0.0, 1.0);
            Binomial::new(remaining, prob).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng)
        };
        remaining -= count;
        let e = n * pi;
        chi2 += (count as f64 - e).powi(2) / e;
    }
    Ok(chi2)
}

/// Multinomial draws of `chi^2`, blocked per stream of `seed`.
pub fn pearson_chi2_sample(config: &PearsonConfig, count: usize, seed: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let tail = suffix_sums(&config.p);
    let blocks = count.div_ceil(SIM_BLOCK);
    let parts: Vec<Result<Vec<f64>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            (0..SIM_BLOCK.min(count - b * SIM_BLOCK)).map(|_| draw_chi2(config, &tail, &mut rng)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Draws of `F = (chi^2 - (m - 1)) / sigma`.
pub fn pearson_sample(config: &PearsonConfig, count: usize, seed: u64) -> Result<Vec<f64>> {
    let sigma = pearson_terms(config)?.sigma2.sqrt();
    let shift = config.m as f64 - 1.0;
    Ok(pearson_chi2_sample(config, count, seed)?.into_iter().map(|c| (c - shift) / sigma).collect())
}

/// Exact law of `F` for two classes, as `(atom, weight)` pairs.
pub fn pearson_exact_two_class(config: &PearsonConfig) -> Result<Vec<(f64, f64)>> {
    if config.m != 2 {
        return Err(Error::Invalid(format!("exact law is available for m = 2, got m = {}", config.m)));
    }
    let sigma = pearson_terms(config)?.sigma2.sqrt();
    let (n, p1) = (config.n as f64, config.p[0]);
    let law = BinomialLaw::new(p1, config.n as u64).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok((0..=config.n as u64)
        .map(|k| {
            let chi2 = (k as f64 - n * p1).powi(2) / (n * p1 * (1.0 - p1));
            ((chi2 - 1.0) / sigma, law.pmf(k))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Geometric random graphs.

/// Point in at most [`DIM_CAP`] dimensions; unused coordinates are zero.
pub type Point = [f64; DIM_CAP];

fn dist_sq(a: &Point, b: &Point, d: usize) -> f64 {
    (0..d).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Connected motif on `m <= 5` vertices with a lookup of every edge mask
/// isomorphic to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Motif {
    adjacency: Vec<Vec<bool>>,
    accepted: Vec<bool>,
}

fn pair_bit(i: usize, j: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    b * (b - 1) / 2 + a
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..m {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

impl Motif {
    pub fn new(adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let m = adjacency.len();
        if m < 2 {
            return Err(Error::Invalid(format!("motif needs at least 2 vertices, got {m}")));
        }
        if m > MOTIF_CAP {
            return Err(Error::CapExceeded { what: "motif order", size: m, cap: MOTIF_CAP });
        }
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != m {
                return Err(Error::DimensionMismatch { expected: m, got: row.len() });
            }
            if row[i] {
                return Err(Error::Invalid(format!("motif has a loop at vertex {i}")));
            }
            for j in 0..m {
                if row[j] != adjacency[j][i] {
                    return Err(Error::Invalid(format!("motif adjacency is not symmetric at ({i},{j})")));
                }
            }
        }
        let mut seen = vec![false; m];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for u in 0..m {
                if adjacency[v][u] && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("motif is not connected".into()));
        }
        let mut accepted = vec![false; 1 << (m * (m - 1) / 2)];
        for perm in permutations(m) {
            let mut mask = 0usize;
            for i in 0..m {
                for j in i + 1..m {
                    if adjacency[i][j] {
                        mask |= 1 << pair_bit(perm[i], perm[j]);
                    }
                }
            }
            accepted[mask] = true;
        }
        Ok(Self { adjacency, accepted })
    }

    pub fn edge() -> Self {
        Self::new(vec![vec![false, true], vec![true, false]]).expect("valid motif")
    }

    pub fn triangle() -> Self {
        Self::new(vec![vec![false, true, true], vec![true, false, true], vec![true, true, false]]).expect("valid motif")
    }

    pub fn path3() -> Self {
        Self::new(vec![vec![false, true, false], vec![true, false, true], vec![false, true, false]]).expect("valid motif")
    }

    /// `edge`, `triangle`, `path3`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "edge" => Ok(Self::edge()),
            "triangle" => Ok(Self::triangle()),
            "path3" => Ok(Self::path3()),
            _ => Err(Error::Invalid(format!("unknown motif {name:?}"))),
        }
    }

    /// 0/1 adjacency matrix, one row per record.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let row: Vec<u8> =
                rec?.iter().map(|f| f.parse::<u8>().map_err(|_| Error::Invalid(format!("bad adjacency entry {f:?}")))).collect::<Result<_>>()?;
            rows.push(row);
        }
        Self::try_from(rows)
    }

    pub fn order(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    /// Whether the graph with the given edge mask is isomorphic to the motif.
    pub fn accepts(&self, mask: usize) -> bool {
        self.accepted[mask]
    }

    /// Edge mask of the distance graph `0 < |x_i - x_j| < t`.
    pub fn distance_mask(points: &[Point], t: f64, d: usize) -> usize {
        let t2 = t * t;
        let mut mask = 0;
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let r = dist_sq(&points[i], &points[j], d);
                if r > 0.0 && r < t2 {
                    mask |= 1 << pair_bit(i, j);
                }
            }
        }
        mask
    }

    /// Induced-subgraph indicator `psi_{Delta,t}`.
    pub fn kernel(&self, points: &[Point], t: f64, d: usize) -> f64 {
        if self.accepts(Self::distance_mask(points, t, d)) {
            1.0
        } else {
            0.0
        }
    }
}

impl TryFrom<Vec<Vec<u8>>> for Motif {
    type Error = Error;
    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        let adj = rows
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|v| match v {
                        0 => Ok(false),
                        1 => Ok(true),
                        _ => Err(Error::Invalid(format!("adjacency entries must be 0 or 1, got {v}"))),
                    })
                    .collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<_>>()?;
        Self::new(adj)
    }
}

impl From<Motif> for Vec<Vec<u8>> {
    fn from(m: Motif) -> Self {
        m.adjacency.iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect()
    }
}

/// `psi_{Delta,t}` on `points`, which must match the motif order.
pub fn motif_kernel(points: &[Point], t: f64, motif: &Motif, d: usize) -> Result<f64> {
    if points.len() > MOTIF_CAP {
        return Err(Error::CapExceeded { what: "motif order", size: points.len(), cap: MOTIF_CAP });
    }
    if points.len() != motif.order() {
        return Err(Error::DimensionMismatch { expected: motif.order(), got: points.len() });
    }
    Ok(motif.kernel(points, t, d))
}

/// Law of the points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    /// Uniform on `[0, 1]^d`.
    Cube,
    /// Standard Gaussian on `R^d`.
    Gauss,
}

impl Density {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cube" => Ok(Self::Cube),
            "gauss" => Ok(Self::Gauss),
            _ => Err(Error::Invalid(format!("density must be cube or gauss, got {s:?}"))),
        }
    }

    pub fn is_uniform(self) -> bool {
        self == Self::Cube
    }

    pub fn sample(self, d: usize, rng: &mut ChaCha8Rng) -> Point {
        let mut x = [0.0; DIM_CAP];
        for v in x.iter_mut().take(d) {
            *v = match self {
                Self::Cube => rng.random::<f64>(),
                Self::Gauss => rng.sample(StandardNormal),
            };
        }
        x
    }

    pub fn pdf(self, x: &Point, d: usize) -> f64 {
        match self {
            Self::Cube => {
                if x[..d].iter().all(|v| (0.0..=1.0).contains(v)) {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Gauss => {
                let r2: f64 = x[..d].iter().map(|v| v * v).sum();
                (-0.5 * r2).exp() / (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0)
            }
        }
    }
}

fn ball_volume(d: usize, r: f64) -> f64 {
    std::f64::consts::PI.powf(d as f64 / 2.0) / libm::tgamma(d as f64 / 2.0 + 1.0) * r.powi(d as i32)
}

/// I.i.d. points with localized importance sampling: within each connected
/// group of kernel tuples the first variable follows the density and every
/// later one is uniform in a ball of radius `reach` around its parent.
#[derive(Clone, Debug)]
pub struct LocalizedModel {
    pub d: usize,
    pub density: Density,
    pub reach: f64,
    volume: f64,
}

impl LocalizedModel {
    pub fn new(d: usize, density: Density, reach: f64) -> Result<Self> {
        if d == 0 || d > DIM_CAP {
            return Err(Error::Invalid(format!("dimension must be in 1..={DIM_CAP}, got {d}")));
        }
        if !(reach.is_finite() && reach > 0.0) {
            return Err(Error::Invalid(format!("reach must be positive, got {reach}")));
        }
        Ok(Self { d, density, reach, volume: ball_volume(d, reach) })
    }

    fn in_ball(&self, center: &Point, rng: &mut ChaCha8Rng) -> Point {
        let mut dir = [0.0; DIM_CAP];
        let mut norm = 0.0f64;
        while !(norm > 0.0) {
            norm = 0.0;
            for v in dir.iter_mut().take(self.d) {
                *v = rng.sample(StandardNormal);
                norm += *v * *v;
            }
        }
        let r = self.reach * rng.random::<f64>().powf(1.0 / self.d as f64) / norm.sqrt();
        let mut x = *center;
        for k in 0..self.d {
            x[k] += r * dir[k];
        }
        x
    }
}

impl PointModel for LocalizedModel {
    type Point = Point;

    fn sample_joint(&self, vars: usize, tuples: &[Vec<usize>], rng: &mut ChaCha8Rng) -> (Vec<Point>, f64) {
        let mut parent: Vec<Option<Option<usize>>> = vec![None; vars];
        let mut order = Vec::with_capacity(vars);
        for root in 0..vars {
            if parent[root].is_some() {
                continue;
            }
            parent[root] = Some(None);
            order.push(root);
            let mut head = order.len() - 1;
            while head < order.len() {
                let v = order[head];
                head += 1;
                for t in tuples.iter().filter(|t| t.contains(&v)) {
                    for &u in t {
                        if parent[u].is_none() {
                            parent[u] = Some(Some(v));
                            order.push(u);
                        }
                    }
                }
            }
        }
        let mut pts = vec![[0.0; DIM_CAP]; vars];
        let mut w = 1.0;
        for &v in &order {
            match parent[v].expect("visited") {
                None => pts[v] = self.density.sample(self.d, rng),
                Some(p) => {
                    pts[v] = self.in_ball(&pts[p], rng);
                    w *= self.density.pdf(&pts[v], self.d) * self.volume;
                }
            }
        }
        (pts, w)
    }
}

/// Cell list for fixed-radius neighbor queries.
struct NeighborGrid<'a> {
    points: &'a [Point],
    d: usize,
    t: f64,
    origin: Point,
    layout: Layout,
}

enum Layout {
    /// Padded dense grid: cell offsets, strides, neighbor deltas.
    Dense { start: Vec<usize>, order: Vec<u32>, cell: Vec<usize>, deltas: Vec<isize> },
    Sparse { cells: HashMap<[i64; DIM_CAP], Vec<u32>> },
}

impl<'a> NeighborGrid<'a> {
    fn new(points: &'a [Point], d: usize, t: f64) -> Self {
        let mut origin = [0.0; DIM_CAP];
        let mut extent = [0usize; DIM_CAP];
        for k in 0..d {
            let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[k]), b.max(p[k])));
            origin[k] = lo;
            extent[k] = ((hi - lo) / t).floor() as usize + 3;
        }
        let cap = 8 * points.len() + 1024;
        let total = extent[..d].iter().try_fold(1usize, |acc, &e| acc.checked_mul(e).filter(|&v| v <= cap));
        let coord = |p: &Point, k: usize| ((p[k] - origin[k]) / t).floor() as i64;
        let layout = match total {
            Some(total) => {
                let mut strides = [0usize; DIM_CAP];
                let mut s = 1;
                for k in 0..d {
                    strides[k] = s;
                    s *= extent[k];
                }
                let cell: Vec<usize> = points.iter().map(|p| (0..d).map(|k| (coord(p, k) + 1) as usize * strides[k]).sum()).collect();
                let mut start = vec![0usize; total + 1];
                for &c in &cell {
                    start[c + 1] += 1;
                }
                for i in 0..total {
                    start[i + 1] += start[i];
                }
                let mut fill = start.clone();
                let mut order = vec![0u32; points.len()];
                for (i, &c) in cell.iter().enumerate() {
                    order[fill[c]] = i as u32;
                    fill[c] += 1;
                }
                let mut deltas = vec![0isize];
                for k in 0..d {
                    deltas = deltas.iter().flat_map(|&b| [-1isize, 0, 1].map(|o| b + o * strides[k] as isize)).collect();
                }
                Layout::Dense { start, order, cell, deltas }
            }
            None => {
                let mut cells: HashMap<[i64; DIM_CAP], Vec<u32>> = HashMap::new();
                for (i, p) in points.iter().enumerate() {
                    let mut key = [0i64; DIM_CAP];
                    for (k, v) in key.iter_mut().enumerate().take(d) {
                        *v = coord(p, k);
                    }
                    cells.entry(key).or_default().push(i as u32);
                }
                Layout::Sparse { cells }
            }
        };
        Self { points, d, t, origin, layout }
    }

    /// Calls `f(i, j)` for every pair `i < j` with `0 < |x_i - x_j| < t`.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let t2 = self.t * self.t;
        let mut visit = |i: usize, j: usize| {
            if j > i {
                let r = dist_sq(&self.points[i], &self.points[j], self.d);
                if r > 0.0 && r < t2 {
                    f(i, j);
                }
            }
        };
        match &self.layout {
            Layout::Dense { start, order, cell, deltas } => {
                for (i, &c) in cell.iter().enumerate() {
                    for &dl in deltas {
                        let nc = (c as isize + dl) as usize;
                        for &j in &order[start[nc]..start[nc + 1]] {
                            visit(i, j as usize);
                        }
                    }
                }
            }
            Layout::Sparse { cells } => {
                let offsets: Vec<[i64; DIM_CAP]> = (0..3usize.pow(self.d as u32))
                    .map(|mut code| {
                        let mut o = [0i64; DIM_CAP];
                        for v in o.iter_mut().take(self.d) {
                            *v = (code % 3) as i64 - 1;
                            code /= 3;
                        }
                        o
                    })
                    .collect();
                for (i, p) in self.points.iter().enumerate() {
                    let mut base = [0i64; DIM_CAP];
                    for (k, v) in base.iter_mut().enumerate().take(self.d) {
                        *v = ((p[k] - self.origin[k]) / self.t).floor() as i64;
                    }
                    for o in &offsets {
                        let mut key = base;
                        for k in 0..self.d {
                            key[k] += o[k];
                        }
                        if let Some(list) = cells.get(&key) {
                            for &j in list {
                                visit(i, j as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Induced subgraphs of the geometric graph on `points` isomorphic to the
/// motif.
pub fn count_subgraphs(points: &[Point], t: f64, motif: &Motif, d: usize) -> u64 {
    if points.len() < motif.order() {
        return 0;
    }
    let grid = NeighborGrid::new(points, d, t);
    if motif.order() == 2 {
        let mut c = 0u64;
        grid.for_each_pair(|_, _| c += 1);
        return c;
    }
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); points.len()];
    grid.for_each_pair(|i, j| {
        adj[i].push(j as u32);
        adj[j].push(i as u32);
    });
    for a in adj.iter_mut() {
        a.sort_unstable();
    }
    let mut esu = Esu { adj: &adj, m: motif.order(), motif, count: 0, sub: Vec::new() };
    for v in 0..points.len() {
        esu.sub.push(v as u32);
        let ext: Vec<u32> = adj[v].iter().copied().filter(|&u| u > v as u32).collect();
        esu.extend(ext, v as u32);
        esu.sub.pop();
    }
    esu.count
}

/// Enumeration of connected vertex subsets, each visited once.
struct Esu<'a> {
    adj: &'a [Vec<u32>],
    m: usize,
    motif: &'a Motif,
    count: u64,
    sub: Vec<u32>,
}

impl Esu<'_> {
    fn adjacent(&self, a: u32, b: u32) -> bool {
        self.adj[a as usize].binary_search(&b).is_ok()
    }

    fn extend(&mut self, mut ext: Vec<u32>, root: u32) {
        if self.sub.len() == self.m {
            let mut mask = 0;
            for i in 0..self.m {
                for j in i + 1..self.m {
                    if self.adjacent(self.sub[i], self.sub[j]) {
                        mask |= 1 << pair_bit(i, j);
                    }
                }
            }
            if self.motif.accepts(mask) {
                self.count += 1;
            }
            return;
        }
        while let Some(w) = ext.pop() {
            let mut next = ext.clone();
            for &u in &self.adj[w as usize] {
                if u > root && !self.sub.contains(&u) && !next.contains(&u) && !self.sub.iter().any(|&s| self.adjacent(s, u)) {
                    next.push(u);
                }
            }
            self.sub.push(w);
            self.extend(next, root);
            self.sub.pop();
        }
    }
}

/// `t_n = c n^(-a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusRule {
    pub c: f64,
    pub a: f64,
}

impl RadiusRule {
    pub fn new(c: f64, a: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Invalid(format!("radius constant must be positive, got {c}")));
        }
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::Invalid(format!("radius exponent must be positive so that t_n decreases, got {a}")));
        }
        Ok(Self { c, a })
    }

    /// `c*n^-a`, `n^-a` or `c`-free forms without spaces.
    pub fn parse(s: &str) -> Result<Self> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || Error::Invalid(format!("radius rule must look like c*n^-a, got {s:?}"));
        let (c, rest) = match s.split_once('*') {
            Some((c, rest)) => (c.parse::<f64>().map_err(|_| bad())?, rest.to_string()),
            None => (1.0, s.clone()),
        };
        let power = rest.strip_prefix("n^").ok_or_else(bad)?;
        let (sign, body) = match power.strip_prefix('-') {
            Some(b) => (1.0, b),
            None => (-1.0, power),
        };
        let body = body.strip_prefix('(').and_then(|b| b.strip_suffix(')')).unwrap_or(body);
        Self::new(c, sign * body.parse::<f64>().map_err(|_| bad())?)
    }

    pub fn at(&self, n: usize) -> f64 {
        self.c * (n as f64).powf(-self.a)
    }
}

/// Asymptotic case of the radius sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    C1,
    C2,
    C3,
    C4,
    /// `n^m t^(d(m-1))` does not diverge: no normal limit.
    NonNormal,
}

/// Classification of a radius rule with rate and variance exponents in `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub case: Case,
    /// `e` with `t_n^d ~ n^(-e)`.
    pub exponent: f64,
    /// `beta` with predicted rate `~ n^beta`.
    pub rate_exponent: Option<f64>,
    /// Predicted growth exponent of `Var G_n`.
    pub variance_exponent: Option<f64>,
    pub flags: Vec<String>,
}

impl Regime {
    pub fn predicted_rate(&self, n: usize) -> Option<f64> {
        self.rate_exponent.map(|b| (n as f64).powf(b))
    }
}

pub fn classify(d: usize, m: usize, density: Density, rule: &RadiusRule) -> Regime {
    let e = rule.a * d as f64;
    let mf = m as f64;
    let mut flags = Vec::new();
    let (case, rate, var) = if (e - 1.0).abs() <= 1e-12 {
        (Case::C4, Some(-0.5), Some(1.0))
    } else if e > 1.0 {
        if e < mf / (mf - 1.0) {
            let g = mf - e * (mf - 1.0);
            (Case::C1, Some(-g / 2.0), Some(g))
        } else {
            flags.push("n^m t^(d(m-1)) does not diverge: normal limit excluded".into());
            (Case::NonNormal, None, None)
        }
    } else if density.is_uniform() {
        let beta = (1.0 - 2.0 * e) / 2.0;
        if beta >= 0.0 {
            flags.push("n t^(2d) does not vanish: the rate does not decay".into());
        }
        flags.push("variance order is a lower bound only".into());
        (Case::C2, Some(beta), Some(2.0 * mf - 2.0 - e * (2.0 * mf - 3.0)))
    } else {
        (Case::C3, Some(-0.5), Some(2.0 * mf - 1.0 - e * (2.0 * mf - 2.0)))
    };
    Regime { case, exponent: e, rate_exponent: rate, variance_exponent: var, flags }
}

/// Subgraph counts of `n` i.i.d. points with radius `t_n` on a grid of `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomGraphConfig {
    pub d: usize,
    pub density: Density,
    pub motif: Motif,
    pub radius: RadiusRule,
    pub n_grid: Vec<usize>,
    pub seed: u64,
    /// Simulated graphs per `n` for the variance and the distance.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Monte Carlo draws per contraction norm.
    #[serde(default = "default_norm_samples")]
    pub norm_samples: usize,
}

fn default_replicates() -> usize {
    20_000
}

fn default_norm_samples() -> usize {
    400_000
}

impl GeomGraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > DIM_CAP {
            return Err(Error::Invalid(format!("dimension must be in 1..={DIM_CAP}, got {}", self.d)));
        }
        RadiusRule::new(self.radius.c, self.radius.a)?;
        if self.n_grid.is_empty() {
            return Err(Error::Invalid("n grid is empty".into()));
        }
        if self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("n grid must be strictly increasing".into()));
        }
        if self.n_grid[0] < self.motif.order() {
            return Err(Error::Invalid(format!("n must be at least the motif order {}", self.motif.order())));
        }
        if self.replicates < 2 || self.norm_samples < 2 {
            return Err(Error::Invalid("need at least two replicates and norm samples".into()));
        }
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        classify(self.d, self.motif.order(), self.density, &self.radius)
    }

    fn stream_seed(&self, n: usize, purpose: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((n as u64) << 8 | purpose)
    }

    pub fn sample_points(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..n).map(|_| self.density.sample(self.d, rng)).collect()
    }

    /// `count` independent values of `G_n`.
    pub fn simulate_counts(&self, n: usize, count: usize, seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        let t = self.radius.at(n);
        let blocks = count.div_ceil(SIM_BLOCK);
        let parts: Vec<Vec<f64>> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                (0..SIM_BLOCK.min(count - b * SIM_BLOCK))
                    .map(|_| count_subgraphs(&self.sample_points(n, &mut rng), t, &self.motif, self.d) as f64)
                    .collect()
            })
            .collect();
        Ok(parts.concat())
    }

    /// Counts standardized by their sample mean and standard deviation.
    pub fn sample_normalized(&self, n: usize, count: usize, seed: u64) -> Result<Vec<f64>> {
        let c = self.simulate_counts(n, count, seed)?;
        let s = moments(&c);
        if !(s.variance > 0.0) {
            return Err(Error::Precondition(format!("simulated counts at n = {n} have zero variance")));
        }
        let sd = s.variance.sqrt();
        Ok(c.into_iter().map(|v| (v - s.mean) / sd).collect())
    }
}

/// Sample mean and variance with standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub mean: f64,
    pub variance: f64,
    pub variance_se: f64,
}

pub fn moments(x: &[f64]) -> SampleMoments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    SampleMoments { mean, variance, variance_se: ((m4 - m2 * m2).max(0.0) / n).sqrt() }
}

/// Per-`n` output of the geometric graph pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomGraphPoint {
    pub n: usize,
    pub t: f64,
    pub sigma2: f64,
    pub sigma2_se: f64,
    pub mean: f64,
    pub predicted_rate: Option<f64>,
    pub bound: BoundReport,
    pub w1: W1Estimate,
}

/// Monte Carlo variance and contraction norms assembled into the
/// symustat2 bound in relative-rate mode, with the empirical distance.
pub fn geomgraph_bound(config: &GeomGraphConfig) -> Result<(Regime, Vec<GeomGraphPoint>)> {
    config.validate()?;
    let regime = config.regime();
    let m = config.motif.order();
    let case = format!("{:?}", regime.case);
    let mut out = Vec::new();
    for &n in &config.n_grid {
        let t = config.radius.at(n);
        let counts = config.simulate_counts(n, config.replicates, config.stream_seed(n, 1))?;
        let s = moments(&counts);
        if !(s.variance > 0.0) {
            return Err(Error::Precondition(format!("simulated counts at n = {n} have zero variance")));
        }
        let sd = s.variance.sqrt();
        let normalized: Vec<f64> = counts.iter().map(|v| (v - s.mean) / sd).collect();
        let w1 = empirical_w1_normal(&normalized)?;
        let model = LocalizedModel::new(config.d, config.density, (m - 1) as f64 * t)?;
        let (motif, d) = (&config.motif, config.d);
        let kernel = move |pts: &[Point]| motif.kernel(pts, t, d);
        let table = g_contraction_table_mc(&model, &kernel, m, config.norm_samples, config.stream_seed(n, 2))?;
        let summary = UstatSummary { m, n, sigma2: s.variance, second_moments: None, component_norms: None };
        let mut bound = bound_ustat_table(&summary, &table, SymmetricVariant::SymUstat2, &KConstants::relative_rate())?
            .setting("case", case.clone())
            .setting("t_n", format!("{t:.17e}"))
            .setting("sigma2_source", "simulation")
            .flag("variance from simulated graphs");
        if let Some(r) = regime.predicted_rate(n) {
            bound = bound.setting("predicted_rate", format!("{r:.17e}"));
        }
        if !regime.flags.is_empty() {
            bound.flags.extend(regime.flags.iter().cloned());
        }
        out.push(GeomGraphPoint { n, t, sigma2: s.variance, sigma2_se: s.variance_se, mean: s.mean, predicted_rate: regime.predicted_rate(n), bound, w1 });
    }
    Ok((regime, out))
}

/// Least-squares slope of `log y` on `log x` with a standard error from
/// per-point relative errors.
pub fn loglog_slope(x: &[f64], y: &[f64], rel_se: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
    let var: f64 = lx.iter().zip(rel_se).map(|(a, s)| ((a - mx) / sxx).powi(2) * s * s).sum();
    (slope, var.sqrt())
}

/// Fitted variance growth against the predicted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceOrderReport {
    pub case: Case,
    pub predicted_exponent: Option<f64>,
    pub fitted_exponent: f64,
    pub fitted_se: f64,
    /// `None` where the prediction is only a lower bound.
    pub pass: Option<bool>,
    /// `(n, sigma2, se)`.
    pub points: Vec<(usize, f64, f64)>,
    pub flags: Vec<String>,
}

pub fn variance_order_check(config: &GeomGraphConfig) -> Result<VarianceOrderReport> {
    config.validate()?;
    if config.n_grid.len() < 4 {
        return Err(Error::Invalid(format!("variance check needs at least 4 grid points, got {}", config.n_grid.len())));
    }
    let regime = config.regime();
    let mut points = Vec::new();
    for &n in &config.n_grid {
        let s = moments(&config.simulate_counts(n, config.replicates, config.stream_seed(n, 1))?);
        points.push((n, s.variance, s.variance_se));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let rel: Vec<f64> = points.iter().map(|p| p.2 / p.1).collect();
    let (slope, se) = loglog_slope(&x, &y, &rel);
    let mut flags = regime.flags.clone();
    if se > SLOPE_TOL / 3.0 {
        flags.push(format!("slope standard error {se:.3} is large: widen the replicate count"));
    }
    let pass = match (regime.case, regime.variance_exponent) {
        (Case::C2, Some(v)) => {
            flags.push(format!("lower-bound diagnostic: fitted {slope:.3} vs order exponent {v:.3}"));
            None
        }
        (_, Some(v)) => Some((slope - v).abs() <= SLOPE_TOL),
        _ => None,
    };
    Ok(VarianceOrderReport { case: regime.case, predicted_exponent: regime.variance_exponent, fitted_exponent: slope, fitted_se: se, pass, points, flags })
}
