//! Subcommand execution and report emission.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use steinpair::applications::{
    geomgraph_bound, pearson_bound, pearson_exact_two_class, pearson_sample, variance_order_check, Density, GeomGraphConfig, Motif, PearsonConfig,
    PearsonMode, RadiusRule, Regime, VarianceOrderReport,
};
use steinpair::core_operator::{functional_from_csv, identity_residuals, spectral_decompose, EigenCluster, Generator};
use steinpair::hoeffding::{bound_genboundind, hoeffding_decompose, influence, verify_eigen, EigenResiduals, Kappa, ProductSpace};
use steinpair::stein_bounds::{
    bound_classical, bound_gamma, bound_normal_eigen, bound_normal_inverse, bound_normal_noinverse, project_eigencomponents, BoundReport,
    ClassicalVariant, Conditioning, EigenVariant, GammaTarget, GammaVariant, InverseVariant, NoInverseVariant, PairMoments,
};
use steinpair::ustat::{bound_symmetric, derive_degenerate, sample_normalized_ustat, KConstants, SymmetricVariant};
use steinpair::verify::{dominance, empirical_w1, mc_sampler, w1_atoms, SamplerSpec, Target, Verdict, W1Estimate, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED};
use steinpair::{json, Error, Result};

use crate::input;
use crate::{
    AnalyzeArgs, BoundArgs, Cli, Command, GeomGraphArgs, GeomGraphSweepArgs, HoeffdingArgs, PearsonArgs, PearsonSweepArgs, Status, SweepCommand,
    UstatArgs, VerifyArgs,
};

/// Self-describing wrapper of every JSON report.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a Command,
    seed: Option<u64>,
    provenance: Vec<String>,
    result: T,
}

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn log(&self, msg: impl FnOnce() -> String) {
        if self.cli.verbose > 0 {
            eprintln!("{}", msg());
        }
    }

    fn emit<T: Serialize>(&self, command: &'static str, seed: Option<u64>, provenance: Vec<String>, result: T, extra_out: Option<&Path>) -> Result<()> {
        let env = Envelope { tool: "steinpair", version: env!("CARGO_PKG_VERSION"), command, config: &self.cli.command, seed, provenance, result };
        let mut text = json::to_string(&env)?;
        text.push('\n');
        match extra_out.or(self.cli.out.as_deref()) {
            Some(path) => std::fs::write(path, &text)?,
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        if let (Some(a), Some(b)) = (extra_out, self.cli.out.as_deref()) {
            if a != b {
                std::fs::write(b, &text)?;
            }
        }
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<Status> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::AnalyzeKernel(a) => analyze_kernel(&ctx, a),
        Command::Bound(a) => bound(&ctx, a),
        Command::Hoeffding(a) => hoeffding(&ctx, a),
        Command::UstatBound(a) => ustat(&ctx, a),
        Command::Pearson(a) => pearson(&ctx, a),
        Command::Geomgraph(a) => geomgraph(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
        Command::Sweep(SweepCommand::Pearson(a)) => sweep_pearson(&ctx, a),
        Command::Sweep(SweepCommand::Geomgraph(a)) => sweep_geomgraph(&ctx, a),
    }
}

/// Report flags, recursively through related reports.
fn report_flags(r: &BoundReport, out: &mut Vec<String>) {
    for f in &r.flags {
        if !out.contains(f) {
            out.push(f.clone());
        }
    }
    for rel in &r.related {
        report_flags(rel, out);
    }
}

fn provenance(kind: &str, reports: &[&BoundReport]) -> Vec<String> {
    let mut out = vec![kind.to_string()];
    for r in reports {
        report_flags(r, &mut out);
    }
    out
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ComponentSummary {
    eigenvalue: f64,
    second_moment: f64,
}

#[derive(Serialize)]
struct FunctionalSummary {
    mean: f64,
    variance: f64,
    energy: f64,
    components: Vec<ComponentSummary>,
    identity_residual: f64,
}

#[derive(Serialize)]
struct KernelAnalysis {
    states: usize,
    nonzeros: usize,
    balance_residual: f64,
    ergodic: bool,
    spectrum: Vec<f64>,
    clusters: Vec<EigenCluster>,
    gap: f64,
    poincare_constant: Option<f64>,
    eigen_residual: f64,
    orthonormality_defect: f64,
    functional: Option<FunctionalSummary>,
}

fn analyze_kernel(ctx: &Ctx, a: &AnalyzeArgs) -> Result<Status> {
    let gen = input::generator(&a.kernel)?;
    let spec = spectral_decompose(&gen, a.cluster_tol)?;
    let functional = match &a.functional {
        Some(p) => {
            let space = gen.space();
            let f = functional_from_csv(input::open(p)?, space)?;
            let comps = project_eigencomponents(&gen, &spec, &space.center(&f))?;
            let res = identity_residuals(&gen, &spec, &f, &f)?;
            Some(FunctionalSummary {
                mean: space.expect(&f),
                variance: space.variance(&f),
                energy: gen.energy(&f)?,
                components: comps.components().iter().map(|(l, c)| ComponentSummary { eigenvalue: *l, second_moment: space.inner(c, c) }).collect(),
                identity_residual: res.max(),
            })
        }
        None => None,
    };
    let result = KernelAnalysis {
        states: gen.len(),
        nonzeros: gen.kernel().nnz(),
        balance_residual: gen.kernel().balance_residual(),
        ergodic: gen.is_ergodic(),
        spectrum: spec.eigenvalues().to_vec(),
        clusters: spec.clusters().to_vec(),
        gap: spec.gap(),
        poincare_constant: spec.poincare_constant(),
        eigen_residual: spec.max_residual(&gen)?,
        orthonormality_defect: spec.orthonormality_defect(),
        functional,
    };
    ctx.emit("analyze-kernel", None, vec!["exact".into()], result, None)?;
    Ok(Status::Ok)
}

// ---------------------------------------------------------------------------

fn default_lambda(gen: &Generator, f: &steinpair::core_operator::Functional) -> Result<f64> {
    let var = gen.space().variance(f);
    if !(var > 0.0) {
        return Err(Error::Precondition("functional is constant".into()));
    }
    Ok(gen.energy(f)? / var)
}

fn bound(ctx: &Ctx, a: &BoundArgs) -> Result<Status> {
    let gen = input::generator(&a.kernel)?;
    let f = functional_from_csv(input::open(&a.functional)?, gen.space())?;
    let spectrum = || spectral_decompose(&gen, a.cluster_tol);
    let lambda = || a.lambda.map_or_else(|| default_lambda(&gen, &f), Ok);
    let target = || match a.nu {
        Some(nu) => GammaTarget::new(nu, a.h1, a.h2),
        None => Err(Error::Invalid(format!("variant {} needs --nu", a.variant))),
    };
    let conditioning = match a.conditioning.as_str() {
        "x" | "X" => Conditioning::X,
        "w" | "W" => Conditioning::W,
        other => return Err(Error::Invalid(format!("conditioning must be x or w, got {other:?}"))),
    };
    ctx.log(|| format!("{} states, variant {}", gen.len(), a.variant));
    let report = match a.variant.as_str() {
        "gb11" => bound_normal_inverse(&gen, &spectrum()?, &f, InverseVariant::Gb11)?,
        "gb12" => bound_normal_inverse(&gen, &spectrum()?, &f, InverseVariant::Gb12)?,
        v @ ("gb21" | "gb22" | "genexpair2") => {
            let comps = project_eigencomponents(&gen, &spectrum()?, &f)?;
            let variant = match v {
                "gb21" => EigenVariant::Gb21,
                "gb22" => EigenVariant::Gb22,
                _ => EigenVariant::Genexpair2,
            };
            bound_normal_eigen(&gen, &comps, variant)?
        }
        "gb31" => bound_normal_noinverse(&gen, &f, NoInverseVariant::Gb31)?,
        "gb32" => bound_normal_noinverse(&gen, &f, NoInverseVariant::Gb32)?,
        "gb33" => bound_normal_noinverse(&gen, &f, NoInverseVariant::Gb33)?,
        v @ ("cb1" | "cb2") => {
            let m = PairMoments::from_generator(&gen, &f, lambda()?, conditioning)?;
            bound_classical(&m, if v == "cb1" { ClassicalVariant::Cb1 } else { ClassicalVariant::Cb2 })?
        }
        "gamma_first" => bound_gamma(&gen, &spectrum()?, &f, &target()?, GammaVariant::First)?,
        "gamma_second" => bound_gamma(&gen, &spectrum()?, &f, &target()?, GammaVariant::Second)?,
        "gamma_pair" => bound_gamma(&gen, &spectrum()?, &f, &target()?, GammaVariant::Pair { lambda: lambda()? })?,
        other => return Err(Error::Invalid(format!("unknown bound variant {other:?}"))),
    };
    ctx.emit("bound", None, provenance("exact", &[&report]), &report, a.report.as_deref())?;
    Ok(Status::Ok)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct HoeffdingSummary {
    coordinates: usize,
    states: usize,
    mean: f64,
    variance: f64,
    /// `E[F_p^2]` by order `p = 0..=n`.
    order_variances: Vec<f64>,
    rho2: Vec<f64>,
    eigen_residuals: EigenResiduals,
    orthogonality_defect: f64,
    reassembly_error: f64,
    components: usize,
    bound: Option<BoundReport>,
}

fn hoeffding(ctx: &Ctx, a: &HoeffdingArgs) -> Result<Status> {
    let space = ProductSpace::from_json(&input::read_text(&a.space)?)?;
    let fs = space.finite_space()?;
    let f = functional_from_csv(input::open(&a.functional)?, &fs)?;
    let dec = hoeffding_decompose(&space, &f)?;
    let reassembled = dec.reassemble();
    let kappa = match &a.kappa {
        Some(p) => Kappa::Supplied(serde_json::from_str(&input::read_text(p)?)?),
        None => Kappa::Symmetric,
    };
    let bound = if a.bound || a.kappa.is_some() { Some(bound_genboundind(&space, &f, &kappa)?) } else { None };
    let result = HoeffdingSummary {
        coordinates: space.n(),
        states: space.size(),
        mean: space.expect(&f),
        variance: space.variance(&f),
        order_variances: dec.order_second_moments(&space),
        rho2: influence(&space, &dec).rho2,
        eigen_residuals: verify_eigen(&space, &dec)?,
        orthogonality_defect: dec.orthogonality_defect(&space),
        reassembly_error: reassembled.sub(&f).max_abs(),
        components: dec.components().len(),
        bound,
    };
    let reports: Vec<&BoundReport> = result.bound.iter().collect();
    ctx.emit("hoeffding", None, provenance("exact", &reports), &result, None)?;
    Ok(Status::Ok)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Checked {
    bound: BoundReport,
    w1: Option<W1Estimate>,
    exact_w1: Option<f64>,
    verdict: Option<Verdict>,
}

impl Checked {
    fn status(&self) -> Status {
        match &self.verdict {
            Some(v) if !v.pass => Status::Dominance,
            _ => Status::Ok,
        }
    }
}

fn check_samples(bound: BoundReport, samples: Option<Vec<f64>>, exact_w1: Option<f64>, seed: u64) -> Result<Checked> {
    let w1 = samples.map(|s| empirical_w1(&s, Target::Normal, BOOTSTRAP_RESAMPLES, seed ^ BOOTSTRAP_SEED)).transpose()?;
    let verdict = match (exact_w1, &w1) {
        (Some(e), _) => Some(dominance(bound.total, &W1Estimate { value: e, mc_standard_error: 0.0, sample_size: 0, ks_statistic: f64::NAN })),
        (None, Some(w)) => Some(dominance(bound.total, w)),
        _ => None,
    };
    Ok(Checked { bound, w1, exact_w1, verdict })
}

fn ustat(ctx: &Ctx, a: &UstatArgs) -> Result<Status> {
    let (mu, psi) = input::ustat_kernel(&a.kernel, a.alphabet, a.nu.as_deref())?;
    let variant = SymmetricVariant::parse(&a.variant)?;
    let k = match &a.k_constants {
        Some(p) => KConstants::from_json(&input::read_text(p)?)?,
        None => KConstants::relative_rate(),
    };
    let family = derive_degenerate(&psi, a.n)?;
    let report = bound_symmetric(&family, variant, &k)?;
    let samples = (a.mc_samples > 0).then(|| sample_normalized_ustat(&family, &mu, a.mc_samples, a.seed)).transpose()?;
    let kind = if samples.is_some() { "exact bound, monte carlo distance" } else { "exact" };
    let result = check_samples(report, samples, None, a.seed)?;
    ctx.emit("ustat-bound", Some(a.seed), provenance(kind, &[&result.bound]), &result, None)?;
    Ok(result.status())
}

// ---------------------------------------------------------------------------

fn pearson_config(n: usize, m: Option<usize>, dist: &str) -> Result<PearsonConfig> {
    if let Some(path) = dist.strip_prefix("csv:") {
        let c = PearsonConfig::from_csv(n, input::open(Path::new(path))?)?;
        if let Some(m) = m {
            if m != c.m {
                return Err(Error::DimensionMismatch { expected: m, got: c.m });
            }
        }
        return Ok(c);
    }
    let m = m.ok_or_else(|| Error::Invalid("--m is required unless --dist csv:<path>".into()))?;
    PearsonConfig::from_dist(n, m, dist)
}

fn pearson_checked(n: usize, m: Option<usize>, dist: &str, mode: &str, mc: usize, seed: u64) -> Result<Checked> {
    let config = pearson_config(n, m, dist)?;
    let report = pearson_bound(&config, PearsonMode::parse(mode)?)?;
    let exact = if config.m == 2 { Some(w1_atoms(&pearson_exact_two_class(&config)?, Target::Normal)?) } else { None };
    let samples = (mc > 0).then(|| pearson_sample(&config, mc, seed)).transpose()?;
    check_samples(report, samples, exact, seed)
}

fn pearson(ctx: &Ctx, a: &PearsonArgs) -> Result<Status> {
    let result = pearson_checked(a.n, a.m, &a.dist, &a.mode, a.mc_samples, a.seed)?;
    let kind = match (result.exact_w1, a.mc_samples) {
        (Some(_), _) => "exact distance",
        (None, 0) => "bound only",
        _ => "monte carlo distance",
    };
    ctx.emit("pearson", Some(a.seed), provenance(kind, &[&result.bound]), &result, None)?;
    Ok(result.status())
}

// ---------------------------------------------------------------------------

fn geomgraph_config(a: &GeomGraphArgs) -> Result<GeomGraphConfig> {
    let motif = match a.motif.strip_prefix("adj:") {
        Some(path) => Motif::from_csv(input::open(Path::new(path))?)?,
        None => Motif::builtin(&a.motif)?,
    };
    let config = GeomGraphConfig {
        d: a.d,
        density: Density::parse(&a.density)?,
        motif,
        radius: RadiusRule::parse(&a.tn)?,
        n_grid: a.ngrid.clone(),
        seed: a.seed,
        replicates: a.replicates,
        norm_samples: a.norm_samples,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct GeomGraphRun {
    regime: Regime,
    points: Vec<steinpair::applications::GeomGraphPoint>,
    verdicts: Vec<Verdict>,
    variance_check: Option<VarianceOrderReport>,
}

fn geomgraph_run(ctx: &Ctx, a: &GeomGraphArgs) -> Result<GeomGraphRun> {
    let config = geomgraph_config(a)?;
    ctx.log(|| format!("regime {:?}", config.regime().case));
    let (regime, points) = geomgraph_bound(&config)?;
    let verdicts = points.iter().map(|p| dominance(p.bound.total, &p.w1)).collect();
    let variance_check = if a.variance_check { Some(variance_order_check(&config)?) } else { None };
    Ok(GeomGraphRun { regime, points, verdicts, variance_check })
}

fn geomgraph(ctx: &Ctx, a: &GeomGraphArgs) -> Result<Status> {
    let run = geomgraph_run(ctx, a)?;
    let reports: Vec<&BoundReport> = run.points.iter().map(|p| &p.bound).collect();
    let mut prov = provenance("monte carlo variance, contraction norms and distance", &reports);
    prov.extend(run.regime.flags.iter().filter(|f| !prov.contains(f)).cloned().collect::<Vec<_>>());
    let status = if run.verdicts.iter().all(|v| v.pass) { Status::Ok } else { Status::Dominance };
    ctx.emit("geomgraph", Some(a.seed), prov, &run, None)?;
    Ok(status)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Verification {
    target: Target,
    w1: W1Estimate,
    exact_w1: Option<f64>,
    verdict: Option<Verdict>,
}

fn verify(ctx: &Ctx, a: &VerifyArgs) -> Result<Status> {
    let spec = SamplerSpec::from_json(&input::read_text(&a.spec)?)?;
    let target = Target::parse(&a.against)?;
    let bound = match &a.bound {
        Some(p) => {
            let v: serde_json::Value = serde_json::from_str(&input::read_text(p)?)?;
            Some(input::bound_total(&v).ok_or_else(|| Error::Invalid(format!("{} holds no bound report", p.display())))?)
        }
        None => None,
    };
    ctx.log(|| format!("drawing {} samples", a.samples));
    let samples = mc_sampler(&spec, a.samples, a.seed)?;
    let w1 = empirical_w1(&samples, target, BOOTSTRAP_RESAMPLES, a.seed ^ BOOTSTRAP_SEED)?;
    let exact_w1 = spec.exact_distribution()?.map(|atoms| w1_atoms(&atoms, target)).transpose()?;
    let verdict = bound.map(|b| dominance(b, &w1));
    let kind = if exact_w1.is_some() { "monte carlo distance with exact reference" } else { "monte carlo distance" };
    let result = Verification { target, w1, exact_w1, verdict };
    let status = match &result.verdict {
        Some(v) if !v.pass => Status::Dominance,
        _ => Status::Ok,
    };
    ctx.emit("verify", Some(a.seed), vec![kind.into()], &result, None)?;
    Ok(status)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SweepRow {
    n: usize,
    bound: f64,
    #[serde(rename = "W1_hat")]
    w1_hat: f64,
    #[serde(rename = "SE")]
    se: f64,
    regime: String,
    pass: bool,
}

fn write_rows(rows: &[SweepRow], path: Option<&Path>) -> Result<()> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["n", "bound", "W1_hat", "SE", "regime", "pass"]).map_err(Error::from)?;
    for r in rows {
        w.write_record([r.n.to_string(), format!("{:.16e}", r.bound), format!("{:.16e}", r.w1_hat), format!("{:.16e}", r.se), r.regime.clone(), r.pass.to_string()])
            .map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn finish_sweep(ctx: &Ctx, seed: u64, rows: Vec<SweepRow>, csv_path: Option<&Path>) -> Result<Status> {
    write_rows(&rows, csv_path)?;
    if ctx.cli.out.is_some() {
        ctx.emit("sweep", Some(seed), vec!["monte carlo distance".into()], &rows, None)?;
    }
    Ok(if rows.iter().all(|r| r.pass) { Status::Ok } else { Status::Dominance })
}

fn sweep_pearson(ctx: &Ctx, a: &PearsonSweepArgs) -> Result<Status> {
    if a.mc_samples == 0 {
        return Err(Error::Invalid("sweep needs --mc-samples > 0".into()));
    }
    let mut rows = Vec::new();
    for &n in &a.ngrid {
        ctx.log(|| format!("n = {n}"));
        let r = pearson_checked(n, a.m, &a.dist, &a.mode, a.mc_samples, a.seed)?;
        let w = r.w1.expect("samples were drawn");
        let v = r.verdict.expect("verdict from samples");
        rows.push(SweepRow { n, bound: r.bound.total, w1_hat: w.value, se: w.mc_standard_error, regime: r.bound.variant.clone(), pass: v.pass });
    }
    finish_sweep(ctx, a.seed, rows, a.csv.as_deref())
}

fn sweep_geomgraph(ctx: &Ctx, a: &GeomGraphSweepArgs) -> Result<Status> {
    let run = geomgraph_run(ctx, &a.graph)?;
    let regime = format!("{:?}", run.regime.case);
    let rows = run
        .points
        .iter()
        .zip(&run.verdicts)
        .map(|(p, v)| SweepRow { n: p.n, bound: p.bound.total, w1_hat: p.w1.value, se: p.w1.mc_standard_error, regime: regime.clone(), pass: v.pass })
        .collect();
    finish_sweep(ctx, a.graph.seed, rows, a.csv.as_deref())
}
