//! Property tests of the structural invariants.

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steinpair::core_operator::{
    pseudo_inverse_apply, random_reversible_kernel, remainder_with_bound, spectral_decompose, Functional, Generator, DEFAULT_CLUSTER_TOL,
};
use steinpair::hoeffding::{gamma_product, gibbs_generator, hoeffding_decompose, ProductSpace};
use steinpair::special::binomial;
use steinpair::stein_bounds::{bound_classical, bound_normal_inverse, ClassicalVariant, Conditioning, InverseVariant, PairMoments};
use steinpair::structured::{srs_generator, PopulationSpace};
use steinpair::ustat::{contraction_norm, derive_degenerate, u_statistic, BaseMeasure, SymKernel, Tensor};
use steinpair::verify::{empirical_w1_normal, w1_atoms, Target};

fn chain(seed: u64, n: usize) -> (Generator, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = random_reversible_kernel(n, 0.4, &mut rng).unwrap();
    (gen, rng)
}

fn random_functional(rng: &mut ChaCha8Rng, len: usize) -> Functional {
    Functional::new((0..len).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_measure(rng: &mut ChaCha8Rng, s: usize) -> BaseMeasure {
    let w: Vec<f64> = (0..s).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    let mut w: Vec<f64> = w.iter().map(|v| v / total).collect();
    let head: f64 = w[..s - 1].iter().sum();
    w[s - 1] = 1.0 - head;
    BaseMeasure::new(w).unwrap()
}

fn random_kernel(rng: &mut ChaCha8Rng, mu: &BaseMeasure, order: usize) -> SymKernel {
    let len = mu.size().pow(order as u32);
    Tensor::new(mu.clone(), order, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().symmetrize().unwrap()
}

fn random_product_space(rng: &mut ChaCha8Rng, n: usize) -> ProductSpace {
    let alphabets: Vec<Vec<String>> = (0..n).map(|_| (0..rng.random_range(2..4usize)).map(|a| a.to_string()).collect()).collect();
    let marginals = alphabets
        .iter()
        .map(|a| {
            let w: Vec<f64> = (0..a.len()).map(|_| rng.random_range(0.2..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.iter().map(|v| v / t).collect()
        })
        .collect();
    ProductSpace::new(alphabets, marginals).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generator_is_self_adjoint_and_gamma_is_nonnegative(seed in any::<u64>(), n in 2usize..12) {
        let (gen, mut rng) = chain(seed, n);
        let space = gen.space();
        let f = random_functional(&mut rng, n);
        let g = random_functional(&mut rng, n);
        let lf = gen.apply_l(&f).unwrap();
        let lg = gen.apply_l(&g).unwrap();
        prop_assert!((space.inner(&g, &lf) - space.inner(&f, &lg)).abs() <= 1e-11);
        let gff = gen.gamma(&f, &f).unwrap();
        prop_assert!(gff.min() >= -1e-14);
        prop_assert!((space.expect(&gff) - gen.energy(&f).unwrap()).abs() <= 1e-11);
    }

    #[test]
    fn poincare_inequality_is_sharp_at_the_gap(seed in any::<u64>(), n in 2usize..12) {
        let (gen, mut rng) = chain(seed, n);
        let space = gen.space();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let c = spec.poincare_constant().unwrap();
        let f = random_functional(&mut rng, n);
        prop_assert!(space.variance(&f) <= c * gen.energy(&f).unwrap() + 1e-9);
        let e = spec.eigenfunction(spec.clusters()[1].start);
        prop_assert!((space.variance(&e) - c * gen.energy(&e).unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn pseudo_inverse_contract(seed in any::<u64>(), n in 2usize..12) {
        let (gen, mut rng) = chain(seed, n);
        let space = gen.space();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let g = random_functional(&mut rng, n);
        let l_linv = gen.apply_l(&pseudo_inverse_apply(&gen, &spec, &g).unwrap()).unwrap();
        prop_assert!(l_linv.sub(&space.center(&g)).max_abs() <= 1e-9);
        let linv_l = pseudo_inverse_apply(&gen, &spec, &gen.apply_l(&g).unwrap()).unwrap();
        prop_assert!(linv_l.sub(&space.center(&g)).max_abs() <= 1e-9);
    }

    #[test]
    fn square_remainder_is_dominated(seed in any::<u64>(), n in 2usize..12) {
        let (gen, mut rng) = chain(seed, n);
        let f = random_functional(&mut rng, n);
        let g = random_functional(&mut rng, n);
        let (r, bound) = remainder_with_bound(&gen, &f, &g, |x| x * x, |x| 2.0 * x, 2.0).unwrap();
        for x in 0..n {
            prop_assert!(r[x].abs() <= bound[x] + 1e-12);
        }
    }

    #[test]
    fn inverse_bound_collapses_to_classical_on_eigenfunctions(seed in any::<u64>(), n in 3usize..10) {
        let (gen, _) = chain(seed, n);
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let k = spec.clusters()[1].start;
        let f = spec.eigenfunction(k);
        let lambda = spec.eigenvalues()[k];
        let gb11 = bound_normal_inverse(&gen, &spec, &f, InverseVariant::Gb11).unwrap();
        let cb1 = bound_classical(&PairMoments::from_generator(&gen, &f, lambda, Conditioning::X).unwrap(), ClassicalVariant::Cb1).unwrap();
        prop_assert!((gb11.total - cb1.total).abs() <= 1e-10 * (1.0 + cb1.total));
    }

    #[test]
    fn gamma_deviation_obeys_cauchy_schwarz(seed in any::<u64>(), n in 2usize..12) {
        let (gen, mut rng) = chain(seed, n);
        let space = gen.space();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let f = space.normalize(&random_functional(&mut rng, n)).unwrap();
        let h = pseudo_inverse_apply(&gen, &spec, &f).unwrap().scale(-1.0);
        let g = gen.gamma(&f, &h).unwrap();
        prop_assert!((space.expect(&g) - 1.0).abs() <= 1e-9);
        let dev = space.expect(&g.map(|v| (1.0 - v).abs()));
        prop_assert!(dev <= space.variance(&g).max(0.0).sqrt() + 1e-9);
    }

    #[test]
    fn efron_stein_on_product_spaces(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = random_product_space(&mut rng, n);
        let gen = gibbs_generator(&space).unwrap();
        let f = random_functional(&mut rng, space.size());
        prop_assert!(space.variance(&f) <= n as f64 * gen.energy(&f).unwrap() + 1e-9);
    }

    #[test]
    fn hoeffding_projection_is_idempotent(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = random_product_space(&mut rng, n);
        let f = random_functional(&mut rng, space.size());
        let dec = hoeffding_decompose(&space, &f).unwrap();
        for (mask, u) in dec.components() {
            let again = hoeffding_decompose(&space, u).unwrap();
            for (m2, v) in again.components() {
                if m2 != mask {
                    prop_assert!(v.max_abs() <= 1e-10 * (1.0 + u.max_abs()));
                }
            }
            let own = again.component(*mask).unwrap();
            prop_assert!(own.sub(u).max_abs() <= 1e-10 * (1.0 + u.max_abs()));
        }
    }

    #[test]
    fn product_formula_gamma_matches_generator(seed in any::<u64>(), n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = random_product_space(&mut rng, n);
        let gen = gibbs_generator(&space).unwrap();
        let df = hoeffding_decompose(&space, &random_functional(&mut rng, space.size())).unwrap();
        let dg = hoeffding_decompose(&space, &random_functional(&mut rng, space.size())).unwrap();
        let p = rng.random_range(1..=n);
        let q = rng.random_range(1..=n);
        let (fp, gq) = (df.order(p), dg.order(q));
        let (via_product, _) = gamma_product(&space, &fp, &gq).unwrap();
        let direct = gen.gamma(&fp, &gq).unwrap();
        prop_assert!(via_product.sub(&direct).max_abs() <= 1e-10);
    }

    #[test]
    fn contraction_norms_are_symmetric(seed in any::<u64>(), s in 2usize..4, p in 1usize..4, q in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random_measure(&mut rng, s);
        let psi = random_kernel(&mut rng, &mu, p);
        let phi = random_kernel(&mut rng, &mu, q);
        for r in 0..=p.min(q) {
            for l in 0..=r {
                let a = contraction_norm(&psi, &phi, r, l).unwrap();
                let b = contraction_norm(&phi, &psi, r, l).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
            }
        }
        let full = contraction_norm(&psi, &psi, p, p).unwrap();
        prop_assert!((full - psi.tensor().norm_sq()).abs() <= 1e-12 * (1.0 + full));
    }

    #[test]
    fn second_moments_respect_both_bounds(seed in any::<u64>(), s in 2usize..4, m in 1usize..4, extra in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random_measure(&mut rng, s);
        let psi = random_kernel(&mut rng, &mu, m);
        let family = derive_degenerate(&psi, m + extra).unwrap();
        prop_assume!(family.sigma2 > 1e-8);
        let total: f64 = (1..=m).map(|p| family.second_moment(p)).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        for p in 1..=m {
            prop_assert!(family.second_moment(p) <= 1.0 + 1e-12);
            prop_assert!(family.second_moment(p) <= family.second_moment_bound(p) * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn canonical_u_statistic_variance(seed in any::<u64>(), s in 2usize..4, p in 1usize..3, n in 3usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random_measure(&mut rng, s);
        let phi = random_kernel(&mut rng, &mu, p).canonical_part();
        let w = mu.weights();
        let mut second = 0.0;
        let mut first = 0.0;
        let mut sample = vec![0usize; n];
        for idx in 0..s.pow(n as u32) {
            let mut r = idx;
            let mut weight = 1.0;
            for x in sample.iter_mut() {
                *x = r % s;
                r /= s;
                weight *= w[*x];
            }
            let j = u_statistic(phi.tensor(), &sample);
            first += weight * j;
            second += weight * j * j;
        }
        let expected = binomial(n as u64, p as u64) * phi.tensor().norm_sq();
        prop_assert!(first.abs() <= 1e-10);
        prop_assert!((second - expected).abs() <= 1e-9 * (1.0 + expected));
    }

    #[test]
    fn w1_is_lipschitz_in_shifts(seed in any::<u64>(), c in -0.5f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + c).collect();
        let a = empirical_w1_normal(&x).unwrap().value;
        let b = empirical_w1_normal(&y).unwrap().value;
        prop_assert!((a - b).abs() <= c.abs() + 1e-12);
    }

    #[test]
    fn atom_w1_matches_riemann_sum(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut atoms: Vec<(f64, f64)> = (0..k).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(0.1..1.0))).collect();
        let t: f64 = atoms.iter().map(|a| a.1).sum();
        atoms.iter_mut().for_each(|a| a.1 /= t);
        let exact = w1_atoms(&atoms, Target::Normal).unwrap();
        let mut cuts: Vec<f64> = atoms.iter().map(|a| a.0).collect();
        cuts.extend([-12.0, 12.0]);
        cuts.sort_by(f64::total_cmp);
        let per_unit = 20_000.0;
        let riemann: f64 = cuts
            .windows(2)
            .map(|w| {
                let steps = ((w[1] - w[0]) * per_unit).ceil().max(1.0) as usize;
                let h = (w[1] - w[0]) / steps as f64;
                (0..steps)
                    .map(|i| {
                        let x = w[0] + (i as f64 + 0.5) * h;
                        let fx: f64 = atoms.iter().filter(|a| a.0 <= x).map(|a| a.1).sum();
                        (fx - Target::Normal.cdf(x)).abs() * h
                    })
                    .sum::<f64>()
            })
            .sum();
        assert_abs_diff_eq!(exact, riemann, epsilon = 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn srs_gap_and_multiplicities(big_n in 2usize..9, frac in 0.0f64..1.0) {
        let n = 1 + ((big_n - 1) as f64 * frac) as usize;
        prop_assume!(n < big_n);
        let pop = PopulationSpace::new(big_n, n).unwrap();
        let predicted = pop.predicted_spectrum();
        let dims: usize = predicted.iter().map(|e| e.multiplicity).sum();
        prop_assert_eq!(dims as u128, steinpair::special::binomial_exact(big_n as u64, n as u64).unwrap());
        let (gen, _) = srs_generator(&pop).unwrap();
        let spec = spectral_decompose(&gen, DEFAULT_CLUSTER_TOL).unwrap();
        let gap = big_n as f64 / (n * (big_n - n)) as f64;
        prop_assert!((spec.gap() - gap).abs() <= 1e-10);
    }
}
