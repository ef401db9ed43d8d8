//! Least-squares regression of the radial-basis scoring function onto an
//! offset profile, used to initialize positional kernels from an existing
//! model's extracted scores.
//!
//! The optimizer is full-batch gradient descent with one adaptive step size
//! per parameter. Each step moves every parameter against the sign of its
//! gradient by its own step size; a step that would raise the residual sum
//! of squares is rejected and all step sizes are halved, so the accepted RSS
//! sequence never increases. After an accepted step, parameters whose
//! gradient kept its sign grow their step by 1.1×, those whose gradient
//! flipped halve it.
//!
//! Internally, offsets and kernel centers are measured from the middle of the
//! fitted window, so relabeling a profile's offsets by a constant leaves the
//! optimizer's trajectory unchanged and only shifts the fitted centers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelParams};
use crate::rng::SeededRng;
use crate::toeplitz::OffsetProfile;

const WIDTH_CHOICES: [f64; 3] = [0.01, 0.1, 1.0];
const GROW: f64 = 1.1;
const SHRINK: f64 = 0.5;
/// Consecutive accepted steps with a relative RSS drop below `tol` before the
/// fit counts as converged.
const PATIENCE: usize = 20;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub kernels: usize,
    /// Largest `|k - center|` included in the loss, where `center` is the
    /// midpoint of the profile's offset range.
    pub window: usize,
    pub restarts: usize,
    pub max_iters: usize,
    /// Initial step size, relative to each parameter's natural scale.
    pub step: f64,
    pub seed: u64,
    /// Relative RSS change below which a step counts as stalled.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            kernels: 5,
            window: 128,
            restarts: 8,
            max_iters: 5000,
            step: 0.1,
            seed: 0,
            tol: 1e-12,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::domain("fit window must be at least 1"));
        }
        if self.restarts < 1 {
            return Err(Error::domain("at least one restart is required"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::domain("initial step must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: KernelParams,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Which start produced the result; `None` for the warm start.
    pub restart: Option<usize>,
    /// RSS after every accepted step, starting with the initial RSS.
    pub trace: Vec<f64>,
}

/// The part of a profile the loss is computed over.
#[derive(Debug, Clone)]
pub struct FitTarget {
    /// Offsets relative to `center`.
    offsets: Vec<f64>,
    values: Vec<f64>,
    center: f64,
    half_width: f64,
}

impl FitTarget {
    pub fn new(profile: &OffsetProfile, window: usize) -> Result<Self> {
        if profile.is_empty() {
            return Err(Error::domain("profile is empty"));
        }
        if profile.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("profile contains non-finite values"));
        }
        let center = (profile.first_offset() + profile.last_offset()) as f64 / 2.0;
        let half_width = window as f64;
        let (offsets, values) = profile
            .iter()
            .filter(|&(k, _)| (k as f64 - center).abs() <= half_width)
            .map(|(k, v)| (k as f64 - center, v))
            .unzip();
        let half_span = (profile.last_offset() - profile.first_offset()) as f64 / 2.0;
        Ok(Self {
            offsets,
            values,
            center,
            half_width: half_width.min(half_span.max(0.5)),
        })
    }

    pub fn offsets(&self) -> impl Iterator<Item = i64> + '_ {
        self.offsets.iter().map(|&x| (x + self.center).round() as i64)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn rss(&self, params: &KernelParams) -> f64 {
        self.relative_rss(&self.to_relative(params))
    }

    fn shift_centers(params: &KernelParams, by: f64) -> KernelParams {
        let ks = params
            .kernels
            .iter()
            .map(|k| Kernel::new(k.amplitude, k.width, k.center + by))
            .collect();
        KernelParams::new(ks, params.layer, params.head)
    }

    fn to_relative(&self, params: &KernelParams) -> KernelParams {
        Self::shift_centers(params, -self.center)
    }

    fn to_absolute(&self, params: &KernelParams) -> KernelParams {
        Self::shift_centers(params, self.center)
    }

    fn relative_rss(&self, params: &KernelParams) -> f64 {
        self.offsets
            .iter()
            .zip(&self.values)
            .map(|(&k, &y)| {
                let r = params.eval_real(k) - y;
                r * r
            })
            .sum()
    }

    fn gradient(&self, params: &KernelParams) -> Vec<f64> {
        let mut grad = vec![0.0; 3 * params.len()];
        for (&k, &y) in self.offsets.iter().zip(&self.values) {
            let r = params.eval_real(k) - y;
            for (s, g) in params.gradients_real(k, 2.0 * r).iter().enumerate() {
                grad[3 * s] += g.amplitude;
                grad[3 * s + 1] += g.width;
                grad[3 * s + 2] += g.center;
            }
        }
        grad
    }

    fn value_range(&self) -> (f64, f64) {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    fn random_start(&self, kernels: usize, rng: &mut SeededRng) -> KernelParams {
        let (lo, hi) = self.value_range();
        let spread = self.half_width / 2.0;
        let ks = (0..kernels)
            .map(|_| {
                let c = rng.uniform_in(-spread, spread);
                let a = rng.uniform_in(lo, hi);
                let b = WIDTH_CHOICES[rng.below(WIDTH_CHOICES.len())];
                Kernel::new(a, b, c)
            })
            .collect();
        KernelParams::new(ks, 0, 0)
    }

    fn amplitude_scale(&self) -> f64 {
        let (lo, hi) = self.value_range();
        let scale = (hi - lo).max(hi.abs()).max(lo.abs());
        if scale > 0.0 {
            scale
        } else {
            1.0
        }
    }
}

/// Runs the descent from `start`. The returned RSS is never above the RSS
/// of `start`.
pub fn descend(target: &FitTarget, start: KernelParams, opts: &FitOptions) -> FitResult {
    let mut res = descend_relative(target, target.to_relative(&start), opts);
    res.params = target.to_absolute(&res.params);
    res
}

/// Descent with centers measured from `target.center`.
fn descend_relative(target: &FitTarget, start: KernelParams, opts: &FitOptions) -> FitResult {
    let mut params = start;
    let n_params = 3 * params.len();
    let mut rss = target.relative_rss(&params);
    let mut trace = vec![rss];
    if n_params == 0 || target.is_empty() {
        return FitResult {
            params,
            rss,
            iterations: 0,
            converged: true,
            restart: None,
            trace,
        };
    }

    let amp_scale = target.amplitude_scale();
    let mut flat = params.to_flat();
    let mut steps: Vec<f64> = flat
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let unit = match i % 3 {
                0 => amp_scale,
                1 => 0.01,
                _ => 1.0,
            };
            opts.step * v.abs().max(unit)
        })
        .collect();
    let mut grad = target.gradient(&params);

    let (layer, head) = (params.layer, params.head);
    let mut converged = rss == 0.0;
    let mut stalled = 0;
    let mut iterations = 0;

    while iterations < opts.max_iters && !converged {
        iterations += 1;
        let candidate_flat: Vec<f64> = flat
            .iter()
            .zip(&grad)
            .zip(&steps)
            .map(|((&v, &g), &s)| if g == 0.0 { v } else { v - s * g.signum() })
            .collect();
        let candidate = KernelParams::from_flat(&candidate_flat, layer, head).expect("triples");
        let candidate_rss = target.relative_rss(&candidate);

        if candidate_rss.is_finite() && candidate_rss <= rss {
            let new_grad = target.gradient(&candidate);
            for ((s, &g_old), &g_new) in steps.iter_mut().zip(&grad).zip(&new_grad) {
                let agree = g_old * g_new;
                if agree > 0.0 {
                    *s *= GROW;
                } else if agree < 0.0 {
                    *s *= SHRINK;
                }
            }
            let drop = rss - candidate_rss;
            if drop <= opts.tol * rss {
                stalled += 1;
            } else {
                stalled = 0;
            }
            flat = candidate_flat;
            params = candidate;
            grad = new_grad;
            rss = candidate_rss;
            trace.push(rss);
            if rss == 0.0 || stalled >= PATIENCE {
                converged = true;
            }
        } else {
            steps.iter_mut().for_each(|s| *s *= SHRINK);
        }

        let max_relative_step = steps
            .iter()
            .zip(&flat)
            .map(|(s, v)| s / v.abs().max(1.0))
            .fold(0.0, f64::max);
        if max_relative_step < 1e-15 {
            converged = true;
        }
    }

    FitResult {
        params,
        rss,
        iterations,
        converged,
        restart: None,
        trace,
    }
}

fn best_of(results: impl IntoIterator<Item = FitResult>) -> FitResult {
    // Lowest RSS wins; ties go to the warm start, then the lowest restart index.
    results
        .into_iter()
        .min_by(|a, b| {
            a.rss.total_cmp(&b.rss).then_with(|| {
                a.restart
                    .map_or(-1, |r| r as i64)
                    .cmp(&b.restart.map_or(-1, |r| r as i64))
            })
        })
        .expect("at least one start")
}

fn run_restarts(target: &FitTarget, opts: &FitOptions, warm: Option<KernelParams>) -> FitResult {
    let mut results: Vec<FitResult> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = SeededRng::derive(opts.seed, r as u64);
            let start = target.random_start(opts.kernels, &mut rng);
            let mut res = descend_relative(target, start, opts);
            res.params = target.to_absolute(&res.params);
            res.restart = Some(r);
            res
        })
        .collect();
    if let Some(w) = warm {
        results.push(descend(target, w, opts));
    }
    best_of(results)
}

/// Fits `opts.kernels` radial-basis kernels to `profile`, keeping the best of
/// `opts.restarts` seeded starts.
pub fn fit_kernels(profile: &OffsetProfile, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    let target = FitTarget::new(profile, opts.window)?;
    Ok(run_restarts(&target, opts, None))
}

/// Like [`fit_kernels`], with `init` as an extra start. `init` is padded with
/// zero-amplitude kernels up to `opts.kernels`; the result's RSS is at most
/// the RSS of `init`.
pub fn fit_kernels_from(profile: &OffsetProfile, opts: &FitOptions, init: &KernelParams) -> Result<FitResult> {
    opts.validate()?;
    if init.len() > opts.kernels {
        return Err(Error::domain(format!(
            "warm start has {} kernels but only {} were requested",
            init.len(),
            opts.kernels
        )));
    }
    let target = FitTarget::new(profile, opts.window)?;
    let warm = pad_with_zero_kernels(&target, init, opts.kernels);
    Ok(run_restarts(&target, opts, Some(warm)))
}

/// Fits `1 ..= opts.kernels` kernels in turn, warm-starting each size from
/// the previous solution. RSS is non-increasing along the returned list.
pub fn fit_kernel_ladder(profile: &OffsetProfile, opts: &FitOptions) -> Result<Vec<FitResult>> {
    opts.validate()?;
    let target = FitTarget::new(profile, opts.window)?;
    let mut out: Vec<FitResult> = Vec::with_capacity(opts.kernels);
    for s in 1..=opts.kernels {
        let sized = FitOptions {
            kernels: s,
            ..opts.clone()
        };
        let warm = out.last().map(|prev| pad_with_zero_kernels(&target, &prev.params, s));
        out.push(run_restarts(&target, &sized, warm));
    }
    Ok(out)
}

/// New kernels start with zero amplitude at the offset of the largest
/// residual, which leaves the function, and so the RSS, unchanged.
fn pad_with_zero_kernels(target: &FitTarget, init: &KernelParams, kernels: usize) -> KernelParams {
    let mut params = KernelParams::new(init.kernels.clone(), 0, 0);
    if params.len() >= kernels {
        return params;
    }
    let relative = target.to_relative(init);
    let peak = target
        .offsets
        .iter()
        .zip(&target.values)
        .map(|(&x, &y)| (x, (relative.eval_real(x) - y).abs()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0.0, |(x, _)| x)
        + target.center;
    while params.len() < kernels {
        params.kernels.push(Kernel::new(0.0, 0.1, peak));
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generated(kernel: Kernel, window: i64) -> OffsetProfile {
        let p = KernelParams::new(vec![kernel], 0, 0);
        OffsetProfile::new(-window, (-window..=window).map(|k| p.eval(k)).collect())
    }

    #[test]
    fn zero_profile_fits_exactly() {
        let profile = OffsetProfile::new(-10, vec![0.0; 21]);
        for s in [1, 3] {
            let res = fit_kernels(
                &profile,
                &FitOptions {
                    kernels: s,
                    window: 10,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(res.rss < 1e-20);
            for k in &res.params.kernels {
                assert!(k.amplitude.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_and_non_finite_profiles_rejected() {
        let opts = FitOptions::default();
        assert!(fit_kernels(&OffsetProfile::new(0, vec![]), &opts).is_err());
        assert!(fit_kernels(&OffsetProfile::new(0, vec![1.0, f64::NAN]), &opts).is_err());
        let bad = FitOptions {
            restarts: 0,
            ..Default::default()
        };
        assert!(fit_kernels(&OffsetProfile::new(0, vec![1.0]), &bad).is_err());
    }

    #[test]
    fn accepted_rss_never_increases() {
        let profile = generated(Kernel::new(2.0, 0.5, -1.0), 16);
        let target = FitTarget::new(&profile, 16).unwrap();
        let start = KernelParams::new(vec![Kernel::new(0.5, 0.1, 4.0), Kernel::new(-0.2, 1.0, -6.0)], 0, 0);
        let res = descend(&target, start, &FitOptions::default());
        for w in res.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn spike_is_located() {
        let values = (-16..=16).map(|k| if k == -1 { 1.0 } else { 0.0 }).collect();
        let profile = OffsetProfile::new(-16, values);
        let res = fit_kernels(
            &profile,
            &FitOptions {
                kernels: 1,
                window: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let c = res.params.kernels[0].center;
        assert!((c + 1.0).abs() <= 0.25, "center {c}");
    }

    #[test]
    fn deterministic_for_a_seed() {
        let profile = generated(Kernel::new(1.0, 0.2, 3.0), 12);
        let opts = FitOptions {
            kernels: 2,
            window: 12,
            restarts: 4,
            seed: 99,
            ..Default::default()
        };
        let a = fit_kernels(&profile, &opts).unwrap();
        let b = fit_kernels(&profile, &opts).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.rss.to_bits(), b.rss.to_bits());
    }

    #[test]
    fn warm_start_never_worse() {
        let values = (-20..=20)
            .map(|k: i64| ((k as f64) * 0.4).sin() * 0.5 + (-(k as f64).abs() / 4.0).exp())
            .collect();
        let profile = OffsetProfile::new(-20, values);
        let opts = FitOptions {
            kernels: 1,
            window: 20,
            restarts: 2,
            max_iters: 500,
            ..Default::default()
        };
        let one = fit_kernels(&profile, &opts).unwrap();
        let two = fit_kernels_from(&profile, &FitOptions { kernels: 2, ..opts }, &one.params).unwrap();
        assert!(two.rss <= one.rss);
    }

    #[test]
    fn window_clips_support() {
        let profile = OffsetProfile::new(-3, vec![1.0; 7]);
        let target = FitTarget::new(&profile, 128).unwrap();
        assert_eq!(target.len(), 7);
        let target = FitTarget::new(&profile, 1).unwrap();
        assert_eq!(target.offsets().collect::<Vec<_>>(), vec![-1, 0, 1]);
    }
}
