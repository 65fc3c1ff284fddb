use reslab::model::{forward, init_network};
use reslab::spectral::PowerIterOptions;
use reslab::tensor::{norm_sq, random_unit_vector};
use reslab::theory::{
    check_layer_norms, check_spectral_product, estimate_explosion, perturbation_report, run_trials,
    semismooth_residual, separateness_check, MeanEstimate, PerturbationConstants, PerturbationSpec, Verdict,
};
use reslab::{Network, NetworkConfig, SeedSpec, SignMask};

const UNIT: PerturbationConstants = PerturbationConstants {
    hidden: 1.0,
    flips: 1.0,
    top: 1.0,
    top_flips: 1.0,
};

#[test]
fn explosion_mean_is_stable_under_doubling_trials() {
    let depth = 16usize;
    let tau = 1.0 / (depth as f64).sqrt().sqrt();
    let cfg = NetworkConfig::resnet(depth, 64, 10, 4, tau);
    let a = estimate_explosion(&cfg, 200, &SeedSpec::new(31)).unwrap();
    let b = estimate_explosion(&cfg, 400, &SeedSpec::new(32)).unwrap();
    assert_eq!((a.trials, b.trials), (200, 400));
    let (sa, sb) = (a.extra("std_err").unwrap(), b.extra("std_err").unwrap());
    let gap = (a.measured - b.measured).abs();
    assert!(gap <= 3.0 * (sa * sa + sb * sb).sqrt(), "{} vs {} (se {sa}, {sb})", a.measured, b.measured);
}

#[test]
fn explosion_at_zero_tau_is_not_applicable() {
    let cfg = NetworkConfig::resnet(8, 32, 10, 4, 0.0);
    let r = estimate_explosion(&cfg, 30, &SeedSpec::new(1)).unwrap();
    assert_eq!(r.verdict, Verdict::NotApplicable);
    assert!((r.measured - 1.0).abs() < 0.5);
}

#[test]
fn input_layer_second_moment_is_one() {
    let cfg = NetworkConfig::resnet(2, 128, 10, 4, 0.0);
    let sq = run_trials(1000, &SeedSpec::new(808), |s| {
        let p: Network = init_network(&cfg, &s.child(0))?;
        let x = random_unit_vector(10, &s.child(1));
        Ok(norm_sq(&forward(&p, &x)?.h[0]))
    })
    .unwrap();
    let mean = MeanEstimate::from_samples(&sq).mean;
    assert!((mean - 1.0).abs() <= 0.05, "{mean}");
}

#[test]
fn halving_the_radius_never_increases_the_change() {
    let cfg = NetworkConfig::resnet(16, 256, 10, 4, 0.25);
    let keys = ["hidden", "flips", "top", "top_flips"];
    for t in 0..20u64 {
        let s = SeedSpec::with_labels(4242, &[t]);
        let p: Network = init_network(&cfg, &s.child(0)).unwrap();
        let x = random_unit_vector(10, &s.child(1));
        let spec = PerturbationSpec::seeded(0.05, &s.child(2));
        let full = perturbation_report(&p, &spec.build(&p).unwrap(), &x, &UNIT).unwrap();
        let half = perturbation_report(&p, &spec.scaled(0.5).build(&p).unwrap(), &x, &UNIT).unwrap();
        for k in keys {
            let (a, b) = (full.extra(k).unwrap(), half.extra(k).unwrap());
            assert!(b <= a, "seed {t} {k}: {b} > {a}");
        }
    }
}

#[test]
fn zero_radius_changes_nothing() {
    let cfg = NetworkConfig::resnet(8, 64, 10, 4, 0.125);
    let s = SeedSpec::new(5);
    let p: Network = init_network(&cfg, &s.child(0)).unwrap();
    let x = random_unit_vector(10, &s.child(1));
    let w = PerturbationSpec::seeded(0.0, &s.child(2)).build(&p).unwrap();
    let r = perturbation_report(&p, &w, &x, &UNIT).unwrap();
    for k in ["hidden", "flips", "top", "top_flips"] {
        assert_eq!(r.extra(k), Some(0.0), "{k}");
    }
    let data = reslab::data::gen_separated_dataset(4, 10, 4, 0.5, 1.0, &s.child(3)).unwrap();
    let r = semismooth_residual(&p, &w, &data, 1.0, 1.0).unwrap();
    let f = r.extra("loss").unwrap();
    assert!(r.extra("residual").unwrap().abs() <= 1e-10 * f.max(1.0));
}

#[test]
fn zero_tau_chain_with_identity_masks_is_exactly_one() {
    let cfg = NetworkConfig::resnet(10, 48, 10, 4, 0.0);
    let p: Network = init_network(&cfg, &SeedSpec::new(6)).unwrap();
    let masks = vec![SignMask::all_ones(48); 11];
    for (a, b) in [(1, 1), (1, 9), (3, 7), (9, 9)] {
        let r = check_spectral_product(&p, &masks, a, b, 0.5, &PowerIterOptions::default()).unwrap();
        assert_eq!(r.measured, 1.0);
    }
}

#[test]
fn zero_tau_keeps_residual_norms_constant() {
    let cfg = NetworkConfig::resnet(12, 64, 10, 4, 0.0);
    let p: Network = init_network(&cfg, &SeedSpec::new(7)).unwrap();
    let t = forward(&p, &random_unit_vector(10, &SeedSpec::new(8))).unwrap();
    let r = check_layer_norms(&t, 10.0);
    let norms = t.layer_norms();
    for l in 1..12 {
        assert_eq!(norms[l], norms[0]);
    }
    assert!(r.extra("min_norm").unwrap() <= norms[0]);
}

#[test]
fn separateness_ignores_trace_order() {
    let cfg = NetworkConfig::resnet(8, 128, 10, 4, 0.1);
    let p: Network = init_network(&cfg, &SeedSpec::new(9)).unwrap();
    let data = reslab::data::gen_separated_dataset(5, 10, 4, 0.5, 1.0, &SeedSpec::new(10)).unwrap();
    let mut traces: Vec<_> = data.features().iter().map(|x| forward(&p, x).unwrap()).collect();
    let a = separateness_check(&traces, 0.5, 0.1).unwrap();
    traces.reverse();
    traces.swap(0, 2);
    let b = separateness_check(&traces, 0.5, 0.1).unwrap();
    assert_eq!(a.measured, b.measured);
    assert_eq!(a.per_layer, b.per_layer);
}
