use nalgebra::{DMatrix, DVector};
use poisson_midpoint::diffusion::{
    constant_drift_composed_law, interpolation_constants, variant_coefficients, GaussianMixture, MixtureComponent,
    NoiseSchedule, Variant,
};
use poisson_midpoint::dynamics::check_scaling_relations;
use poisson_midpoint::langevin::{draw_midpoints, MidpointOption, PoissonMidpointConfig, UnderdampedFamily};
use poisson_midpoint::metrics::{empirical_w2_1d, kl_gaussians, w2_gaussians, EmpiricalEnsemble, GaussianMoments};
use poisson_midpoint::RngStream;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (prop::collection::vec(-1.5f64..1.5, d * d), 0.05f64..2.0).prop_map(move |(v, eps)| {
        let m = DMatrix::from_vec(d, d, v);
        &m * m.transpose() + DMatrix::identity(d, d) * eps
    })
}

fn gaussian(d: usize) -> impl Strategy<Value = GaussianMoments> {
    (prop::collection::vec(-3.0f64..3.0, d), spd(d))
        .prop_map(|(m, s)| GaussianMoments::new(DVector::from_vec(m), s).unwrap())
}

fn triple() -> impl Strategy<Value = (GaussianMoments, GaussianMoments, GaussianMoments)> {
    (1usize..4).prop_flat_map(|d| (gaussian(d), gaussian(d), gaussian(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w2_is_a_metric((p, q, r) in triple()) {
        let pq = w2_gaussians(&p, &q).unwrap();
        let qp = w2_gaussians(&q, &p).unwrap();
        let pr = w2_gaussians(&p, &r).unwrap();
        let rq = w2_gaussians(&r, &q).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() <= 1e-8 * (1.0 + pq));
        prop_assert!(pq <= pr + rq + 1e-8);
        prop_assert!(w2_gaussians(&p, &p).unwrap() <= 1e-6);
    }

    #[test]
    fn kl_nonnegative((p, q, _) in triple()) {
        prop_assert!(kl_gaussians(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_gaussians(&p, &p).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn pinsker_for_shifted_gaussians(m in -4.0f64..4.0, sd in 0.1f64..3.0) {
        let p = GaussianMoments::scalar(0.0, sd * sd).unwrap();
        let q = GaussianMoments::scalar(m, sd * sd).unwrap();
        let kl = kl_gaussians(&p, &q).unwrap();
        let tv = 2.0 * Normal::new(0.0, 1.0).unwrap().cdf(m.abs() / (2.0 * sd)) - 1.0;
        prop_assert!(tv <= (kl / 2.0).sqrt() + 1e-12);
    }

    #[test]
    fn ulmc_scaling_relations(gamma in 0.1f64..10.0, h in 1e-6f64..0.3, n in 1u32..32) {
        let fam = UnderdampedFamily::new(2, gamma).unwrap();
        let r = check_scaling_relations(&fam, h, n).unwrap();
        prop_assert!(r.max() <= 1e-9, "{r:?}");
    }

    #[test]
    fn midpoint_draws_are_well_formed(k in 1usize..64, seed in any::<u64>(), opt2 in any::<bool>()) {
        let option = if opt2 { MidpointOption::Option2 } else { MidpointOption::Option1 };
        let cfg = PoissonMidpointConfig::new(k, option, 0.1);
        let mut rng = RngStream::new(seed, 0);
        for _ in 0..20 {
            let d = draw_midpoints(&cfg, &mut rng);
            prop_assert!(d.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(d.indices.iter().all(|&i| i < k));
            if opt2 {
                prop_assert_eq!(d.indices.len(), 1);
            }
        }
    }

    #[test]
    fn schedule_products_decrease(n in 1usize..300, b0 in 1e-5f64..0.05, span in 0.0f64..0.2) {
        let s = NoiseSchedule::linear(n, b0, b0 + span).unwrap();
        let mut prev = 1.0;
        for t in 1..=n {
            let a = s.alpha_bar(t);
            prop_assert!(a > 0.0 && a < prev);
            prop_assert!((a - prev * s.alpha(t)).abs() <= 2.0 * f64::EPSILON * prev);
            prev = a;
        }
    }

    #[test]
    fn one_shot_matches_composed_steps(
        vi in 0usize..7, k in 1usize..12, frac in 0.0f64..1.0, x in -2.0f64..2.0, c in -2.0f64..2.0,
    ) {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let coeffs = variant_coefficients(&sched, Variant::ALL[vi]);
        let t = k + ((100 - k) as f64 * frac) as usize;
        let ic = interpolation_constants(&coeffs, t, k).unwrap();
        let (m, v) = constant_drift_composed_law(&coeffs, x, c, t, k).unwrap();
        prop_assert!((m - (ic.a_k * x + ic.sum_b() * c)).abs() <= 1e-10);
        prop_assert!((v - ic.c.iter().map(|s| s * s).sum::<f64>()).abs() <= 1e-10);
    }

    #[test]
    fn responsibilities_sum_to_one(x in -10.0f64..10.0, tau in 0.0f64..3.0, w in 0.05f64..0.95) {
        let mix = GaussianMixture::new(vec![
            MixtureComponent::isotropic(w, vec![3.0], 1.0),
            MixtureComponent::isotropic(1.0 - w, vec![-2.0], 0.5),
        ]).unwrap();
        let r = mix.diffuse_to(tau).unwrap().responsibilities(&[x]);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(r.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn empirical_w2_symmetric(a in prop::collection::vec(-5.0f64..5.0, 1..50), b in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let ea = EmpiricalEnsemble::from_scalars(a).unwrap();
        let eb = EmpiricalEnsemble::from_scalars(b).unwrap();
        let ab = empirical_w2_1d(&ea, &eb).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - empirical_w2_1d(&eb, &ea).unwrap()).abs() <= 1e-9);
        prop_assert!(empirical_w2_1d(&ea, &ea).unwrap() <= 1e-9);
    }
}
