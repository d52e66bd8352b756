use approx::assert_relative_eq;
use proptest::prelude::*;

use mbsaem::engine::{draw_minibatch, epoch_of, nominal_epoch, run_with_latent, sa_update};
use mbsaem::frailty::{FrailtyDesign, FrailtyModel, FrailtyTheta};
use mbsaem::pk::{PkDesign, PkModel, PkTheta};
use mbsaem::sbm::{ari, permute_theta, SbmModel, SbmTheta};
use mbsaem::{run, Init, LatentModel, RngStream, SaemConfig, SaemRun, StepSizeSchedule, SuffStat};

fn sbm_model(n: usize, seed: u64) -> (SbmModel, Vec<usize>) {
    let (data, z) = SbmModel::simulate(&SbmTheta::reference(), n, &mut RngStream::new(seed, 1)).unwrap();
    (SbmModel::new(data, 2).unwrap(), z)
}

fn sbm_init() -> SbmTheta {
    SbmTheta::new(vec![0.5, 0.5], vec![0.3, 0.15, 0.12, 0.25]).unwrap()
}

fn frailty_model(seed: u64) -> FrailtyModel {
    let design = FrailtyDesign { n: 40, m: 5 };
    let (data, _) = FrailtyModel::simulate(&FrailtyTheta::reference(), &design, &mut RngStream::new(seed, 1)).unwrap();
    FrailtyModel::new(data)
}

fn frailty_init() -> FrailtyTheta {
    FrailtyTheta {
        beta: vec![1.0, 1.0],
        sigma2: 1.0,
        lambda0: 1.0,
        rho: 2.0,
    }
}

fn config(alpha: f64, iterations: usize, seed: u64) -> SaemConfig {
    SaemConfig {
        alpha,
        iterations,
        seed,
        ..SaemConfig::default()
    }
}

#[test]
fn runs_replay_bit_for_bit() {
    let (model, _) = sbm_model(60, 1);
    let cfg = config(0.3, 150, 5);
    let (a, ta) = run(&model, &cfg, Init::fixed(sbm_init())).unwrap();
    let (b, tb) = run(&model, &cfg, Init::fixed(sbm_init())).unwrap();
    assert_eq!(model.theta_to_vec(&a), model.theta_to_vec(&b));
    let strip = |t: &mbsaem::SaTrace| t.rows.iter().map(|r| (r.k, r.r_k, r.accepted, r.theta.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&ta), strip(&tb));

    let (c, _) = run(&model, &config(0.3, 150, 6), Init::fixed(sbm_init())).unwrap();
    assert_ne!(model.theta_to_vec(&a), model.theta_to_vec(&c));
}

#[test]
fn stepping_matches_run() {
    let model = frailty_model(3);
    let cfg = config(0.5, 80, 2);
    let (theta, trace) = run(&model, &cfg, Init::fixed(frailty_init())).unwrap();
    let mut chain = SaemRun::new(&model, cfg.clone(), Init::fixed(frailty_init())).unwrap();
    for k in 1..=80 {
        let row = chain.step().unwrap();
        assert_eq!(row.k, k);
        assert_eq!(row.theta, trace.rows[k].theta);
    }
    assert_eq!(model.theta_to_vec(chain.theta()), model.theta_to_vec(&theta));
}

#[test]
fn stochastic_approximation_tracks_recomputed_statistic() {
    let model = frailty_model(4);
    let cfg = SaemConfig {
        full_refresh: 0,
        ..config(0.25, 120, 8)
    };
    let mut chain = SaemRun::new(&model, cfg, Init::fixed(frailty_init())).unwrap();
    for _ in 0..120 {
        let s_prev = chain.approximation().clone();
        let z_prev = chain.latent().to_vec();
        let step = chain.sae_step().unwrap();
        let z = chain.latent();
        let moved = z.iter().zip(&z_prev).filter(|(a, b)| a != b).count();
        assert!(moved <= step.r_k);
        let full = model.full_statistic(z).unwrap();
        for (a, b) in chain.statistic().0.iter().zip(&full.0) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9, max_relative = 1e-9);
        }
        let expect = sa_update(&s_prev, &full, step.gamma).unwrap();
        for (a, b) in chain.approximation().0.iter().zip(&expect.0) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9, max_relative = 1e-9);
        }
        chain.maximize().unwrap();
    }
}

#[test]
fn full_batch_is_classical_saem() {
    let (model, _) = sbm_model(40, 2);
    let cfg = config(1.0, 60, 11);
    let mut chain = SaemRun::new(&model, cfg.clone(), Init::fixed(sbm_init())).unwrap();
    for _ in 0..60 {
        let step = chain.step().unwrap();
        assert_eq!(step.r_k, 40);
        assert_eq!(chain.statistic(), &model.full_statistic(chain.latent()).unwrap());
    }
    let (_, trace) = run(&model, &cfg, Init::fixed(sbm_init())).unwrap();
    assert_eq!(epoch_of(&trace, 60).unwrap(), 60.0);
    assert_eq!(nominal_epoch(&trace, 60), 60.0);
}

#[test]
fn trace_layout() {
    let model = frailty_model(5);
    let cfg = SaemConfig {
        thin: 7,
        ..config(0.5, 50, 1)
    };
    let (_, trace) = run(&model, &cfg, Init::fixed(frailty_init())).unwrap();
    let ks: Vec<usize> = trace.rows.iter().map(|r| r.k).collect();
    assert_eq!(ks.first(), Some(&0));
    assert_eq!(ks.last(), Some(&50));
    assert!(ks.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(trace.rows[0].theta, model.theta_to_vec(&frailty_init()));
    assert_eq!(trace.param_names.len(), model.param_descriptor().len());
    let mut csv = Vec::new();
    trace.write_csv(&mut csv, false).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), ks.len() + 1);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0,0,0")));
}

#[test]
fn rejects_invalid_configuration() {
    let (model, _) = sbm_model(10, 1);
    for alpha in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(run(&model, &config(alpha, 5, 1), Init::fixed(sbm_init())).is_err());
    }
    assert!(StepSizeSchedule::new(10, 0.4).is_err());
    assert!(StepSizeSchedule::new(10, 1.1).is_err());
    assert!(run(&model, &SaemConfig { thin: 0, ..config(0.5, 5, 1) }, Init::fixed(sbm_init())).is_err());
}

#[test]
fn sbm_fit_recovers_partition() {
    let (model, truth) = sbm_model(200, 17);
    let (theta, _, z) = run_with_latent(&model, &config(0.5, 400, 3), Init::fixed(sbm_init())).unwrap();
    let score = ari(&z, &truth).unwrap();
    assert!(score > 0.8, "ARI {score}");
    let perm = model.best_permutation(&theta, &SbmTheta::reference());
    let aligned = permute_theta(&theta, &perm);
    let reference = SbmTheta::reference();
    for (a, b) in aligned.nu_matrix().iter().zip(reference.nu_matrix()) {
        assert!((a - b).abs() < 0.03, "{a} vs {b}");
    }
}

#[test]
fn pk_fit_moves_toward_truth() {
    let design = PkDesign {
        n: 200,
        ..PkDesign::default()
    };
    let (data, _) = PkModel::simulate(&PkTheta::reference(), &design, &mut RngStream::new(2, 1)).unwrap();
    let model = PkModel::new(data);
    let init = PkTheta {
        mu: [25.0, 1.5, 3.0],
        omega2: [0.01; 3],
        sigma2: 5.0,
    };
    let (theta, _) = run(&model, &config(0.5, 1500, 4), Init::fixed(init.clone())).unwrap();
    let truth = PkTheta::reference();
    for l in 0..3 {
        assert!((theta.mu[l] / truth.mu[l]).ln().abs() < (init.mu[l] / truth.mu[l]).ln().abs(), "{theta:?}");
    }
    assert!((theta.sigma2 - truth.sigma2).abs() < 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn minibatch_is_sorted_distinct_subset(seed in any::<u64>(), n in 1usize..300, alpha in 0.01f64..1.0) {
        let mut rng = RngStream::new(seed, 0);
        let d = draw_minibatch(n, alpha, &mut rng).unwrap();
        prop_assert!(d.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(d.indices.iter().all(|&i| i < n));
    }

    #[test]
    fn sa_update_is_convex_combination(a in proptest::collection::vec(-1e3f64..1e3, 1..8), g in 0.0f64..=1.0) {
        let b: Vec<f64> = a.iter().map(|x| x * 0.5 + 1.0).collect();
        let s = sa_update(&SuffStat(a.clone()), &SuffStat(b.clone()), g).unwrap();
        for ((x, y), v) in a.iter().zip(&b).zip(&s.0) {
            prop_assert!(*v >= x.min(*y) - 1e-9 && *v <= x.max(*y) + 1e-9);
        }
    }

    #[test]
    fn step_sizes_are_valid(k in 1usize..100_000) {
        let g = StepSizeSchedule::default().gamma(k);
        prop_assert!(g > 0.0 && g <= 1.0);
        prop_assert!(StepSizeSchedule::default().gamma(k + 1) <= g);
    }

    #[test]
    fn epochs_count_simulated_components(seed in any::<u64>(), alpha in 0.05f64..1.0) {
        let (model, _) = sbm_model(30, 3);
        let (_, trace) = run(&model, &config(alpha, 20, seed), Init::fixed(sbm_init())).unwrap();
        let total: usize = trace.rows.iter().skip(1).map(|r| r.r_k).sum();
        prop_assert_eq!(epoch_of(&trace, 20).unwrap(), total as f64 / 30.0);
    }
}
