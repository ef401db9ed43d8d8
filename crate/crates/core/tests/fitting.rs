use std::time::Instant;

use tisa::fit::FitTarget;
use tisa::{
    fit_kernel_ladder, fit_kernels, fit_kernels_from, FitOptions, Kernel, KernelParams, OffsetProfile, SeededRng,
};

fn sampled(theta: &KernelParams, first: i64, last: i64) -> OffsetProfile {
    OffsetProfile::new(first, (first..=last).map(|k| theta.eval(k)).collect())
}

/// A bumpy profile with a sharp peak at 0, a broad negative lobe and a little
/// seeded noise.
fn bumpy_profile(half: i64, seed: u64) -> OffsetProfile {
    let truth = KernelParams::new(
        vec![
            Kernel::new(3.0, 0.8, 0.0),
            Kernel::new(-1.0, 0.002, 10.0),
            Kernel::new(0.7, 0.05, -30.0),
        ],
        0,
        0,
    );
    let mut rng = SeededRng::new(seed);
    OffsetProfile::new(
        -half,
        (-half..=half).map(|k| truth.eval(k) + 0.05 * rng.normal()).collect(),
    )
}

#[test]
fn recovers_a_single_known_kernel() {
    let truth = KernelParams::new(vec![Kernel::new(2.0, 0.5, -1.0)], 0, 0);
    let profile = sampled(&truth, -32, 32);
    let opts = FitOptions {
        kernels: 1,
        window: 32,
        ..FitOptions::default()
    };
    let fit = fit_kernels(&profile, &opts).unwrap();
    let target = FitTarget::new(&profile, 32).unwrap();
    let sq: f64 = target
        .offsets()
        .map(|k| (fit.params.eval(k) - truth.eval(k)).powi(2))
        .sum();
    let rmse = (sq / target.len() as f64).sqrt();
    assert!(rmse < 1e-3, "rmse {rmse}");
}

#[test]
fn ladder_never_gets_worse() {
    let profile = bumpy_profile(60, 1);
    let opts = FitOptions {
        kernels: 5,
        window: 60,
        restarts: 4,
        ..FitOptions::default()
    };
    let ladder = fit_kernel_ladder(&profile, &opts).unwrap();
    assert_eq!(ladder.len(), 5);
    for (s, pair) in ladder.windows(2).enumerate() {
        assert!(
            pair[1].rss <= pair[0].rss,
            "S={} rss {} > S={} rss {}",
            s + 2,
            pair[1].rss,
            s + 1,
            pair[0].rss
        );
    }
    for (s, r) in ladder.iter().enumerate() {
        assert_eq!(r.params.len(), s + 1);
    }
}

#[test]
fn warm_start_is_never_beaten_by_worse() {
    let profile = bumpy_profile(40, 2);
    let init = KernelParams::new(vec![Kernel::new(2.5, 0.5, 0.3)], 0, 0);
    let opts = FitOptions {
        kernels: 2,
        window: 40,
        restarts: 2,
        ..FitOptions::default()
    };
    let target = FitTarget::new(&profile, 40).unwrap();
    let fit = fit_kernels_from(&profile, &opts, &init).unwrap();
    assert!(fit.rss <= target.rss(&init));
}

#[test]
fn relabeling_offsets_shifts_the_fit() {
    let base = bumpy_profile(20, 3);
    let delta = 7;
    let moved = base.shifted(delta);
    let opts = FitOptions {
        kernels: 3,
        window: 20,
        restarts: 4,
        seed: 5,
        ..FitOptions::default()
    };
    let a = fit_kernels(&base, &opts).unwrap();
    let b = fit_kernels(&moved, &opts).unwrap();
    assert!((a.rss - b.rss).abs() <= 1e-6 * a.rss.max(1.0));
    for k in -20..=20 {
        let (x, y) = (a.params.eval(k), b.params.eval(k + delta));
        assert!((x - y).abs() < 1e-6, "offset {k}: {x} vs {y}");
    }
}

#[test]
fn full_size_fit_within_budget_on_one_core() {
    let profile = bumpy_profile(128, 4);
    let opts = FitOptions {
        kernels: 5,
        window: 128,
        restarts: 8,
        ..FitOptions::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let started = Instant::now();
    let fit = pool.install(|| fit_kernels(&profile, &opts)).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(fit.rss.is_finite());
    assert!(elapsed < 20.0, "took {elapsed:.1}s");
}

#[test]
fn fits_are_reproducible() {
    let profile = bumpy_profile(30, 6);
    let opts = FitOptions {
        kernels: 2,
        window: 30,
        restarts: 3,
        seed: 12,
        ..FitOptions::default()
    };
    let a = fit_kernels(&profile, &opts).unwrap();
    let b = fit_kernels(&profile, &opts).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.rss.to_bits(), b.rss.to_bits());
}
