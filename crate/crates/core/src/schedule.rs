//! Discrete variance-preserving noise schedule, the forward noising map and
//! classifier-free guidance.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Lower bound on `ᾱ_t`.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

/// Cumulative signal retention `ᾱ_0..=ᾱ_T` with `ᾱ_0 = 1`, strictly
/// decreasing in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Cosine schedule with offset `s = 0.008`.
    ///
    /// The normalized cosine profile `f(t)` falls to zero at `t = T`; it is
    /// lifted affinely onto `[1e-5, 1]` as `ᾱ_t = floor + (1 - floor) f(t)`
    /// so the clamp never flattens the tail into ties.
    pub fn cosine(num_steps: usize) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::arg(format!("schedule needs at least 2 steps, got {num_steps}")));
        }
        let t_max = num_steps as f64;
        let profile = |t: usize| {
            let angle = (t as f64 / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
            angle.cos().powi(2)
        };
        let norm = profile(0);
        let mut alpha_bar: Vec<f64> = (0..=num_steps)
            .map(|t| {
                let f = (profile(t) / norm).clamp(0.0, 1.0);
                (ALPHA_BAR_FLOOR + (1.0 - ALPHA_BAR_FLOOR) * f).clamp(ALPHA_BAR_FLOOR, 1.0)
            })
            .collect();
        alpha_bar[0] = 1.0;
        Self::from_alpha_bar(alpha_bar)
    }

    /// Wraps an explicit `ᾱ` table after checking the schedule invariants.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::arg("schedule needs at least 2 steps"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::arg("alpha_bar[0] must be exactly 1"));
        }
        if alpha_bar
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Less))
        {
            return Err(Error::arg("alpha_bar must be strictly decreasing"));
        }
        let last = *alpha_bar.last().unwrap();
        if !(last > 0.0 && last <= 0.01) {
            return Err(Error::arg(format!("terminal alpha_bar {last} outside (0, 0.01]")));
        }
        Ok(Self { alpha_bar })
    }

    /// `T`, the number of diffusion steps.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal scale `√ᾱ_t`.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// Noise scale `√(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Half log-SNR `ln(√ᾱ_t / σ_t)`; `+∞` at `t = 0`.
    pub fn log_snr_half(&self, t: usize) -> f64 {
        (self.signal(t) / self.sigma(t)).ln()
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            Err(Error::arg(format!("step {t} outside 0..={}", self.num_steps())))
        } else {
            Ok(())
        }
    }

    /// Timesteps for an `n`-step reverse pass: `n + 1` indices
    /// `round(T (n − i) / n)` for `i = 0..=n`, strictly decreasing from `T`
    /// to `0`.
    pub fn timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t_max = self.num_steps();
        if n == 0 || n > t_max {
            return Err(Error::arg(format!("inference steps {n} outside 1..={t_max}")));
        }
        // round-half-up in integer arithmetic
        Ok((0..=n).map(|i| (2 * t_max * (n - i) + n) / (2 * n)).collect())
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(x0: &ImageGrid, eps: &ImageGrid, t: usize, sched: &Schedule) -> Result<ImageGrid> {
    x0.check_shape(eps, "forward_noise")?;
    sched.check_step(t)?;
    let (a, s) = (sched.signal(t), sched.sigma(t));
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Classifier-free guidance: `uncond + scale · (cond − uncond)`.
pub fn cfg_combine(eps_cond: &ImageGrid, eps_uncond: &ImageGrid, scale: f64) -> Result<ImageGrid> {
    eps_cond.check_shape(eps_uncond, "cfg_combine")?;
    if !scale.is_finite() {
        return Err(Error::arg("guidance scale must be finite"));
    }
    // exact at scale 0 and scale 1
    eps_cond.zip_map(eps_uncond, |c, u| (1.0 - scale) * u + scale * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Same profile written through the complementary angle:
    /// cos((t/T + s)/(1 + s) · π/2) = sin((1 − t/T)/(1 + s) · π/2).
    fn oracle_alpha_bar(t: usize, t_max: usize) -> f64 {
        let s = 0.008_f64;
        let f = |t: usize| ((1.0 - t as f64 / t_max as f64) / (1.0 + s) * FRAC_PI_2).sin().powi(2);
        1e-5 + (1.0 - 1e-5) * f(t) / f(0)
    }

    #[test]
    fn starts_at_one_and_decreases() {
        let s = Schedule::cosine(10).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bar(10) > 0.0 && s.alpha_bar(10) <= 0.01);
    }

    #[test]
    fn matches_complementary_angle_oracle() {
        let s = Schedule::cosine(1000).unwrap();
        for t in [1, 250, 500, 999, 1000] {
            assert!((s.alpha_bar(t) - oracle_alpha_bar(t, 1000)).abs() <= 1e-12, "t = {t}");
        }
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn rejects_short_schedule() {
        assert!(matches!(Schedule::cosine(1), Err(Error::InvalidArgument(_))));
        assert!(Schedule::cosine(2).is_ok());
    }

    #[test]
    fn signal_noise_round_trip() {
        let s = Schedule::cosine(1000).unwrap();
        for t in 0..=1000 {
            let (a, sg) = (s.signal(t), s.sigma(t));
            assert!((a * a + sg * sg - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn timesteps_are_uniform_and_strict() {
        let s = Schedule::cosine(1000).unwrap();
        let ts = s.timesteps(25).unwrap();
        assert_eq!(ts.len(), 26);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[1], 960);
        assert_eq!(*ts.last().unwrap(), 0);
        for n in [1, 3, 7, 999, 1000] {
            let ts = s.timesteps(n).unwrap();
            assert!(ts.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(s.timesteps(0).is_err());
        assert!(s.timesteps(1001).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = Schedule::cosine(50).unwrap();
        let z = ImageGrid::zeros(3, 3);
        assert_eq!(forward_noise(&z, &z, 17, &s).unwrap(), z);
        let x0 = ImageGrid::from_fn(3, 3, |x, y| (x + 2 * y) as f64 - 1.5);
        let e = ImageGrid::filled(3, 3, 0.7);
        assert_eq!(forward_noise(&x0, &e, 0, &s).unwrap(), x0);
        assert!(forward_noise(&x0, &ImageGrid::zeros(2, 3), 3, &s).is_err());
    }

    #[test]
    fn forward_noise_hand_value() {
        // ᾱ = 0.25 → 0.5·1 + √0.75·1
        let s = Schedule::from_alpha_bar(vec![1.0, 0.25, 0.005]).unwrap();
        let ones = ImageGrid::filled(2, 2, 1.0);
        let out = forward_noise(&ones, &ones, 1, &s).unwrap();
        for v in out.values() {
            assert!((v - 1.366_025_403_784_438_6).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_noise_moments() {
        let s = Schedule::cosine(100).unwrap();
        let mut rng = crate::seeds::rng_from(11);
        let x0 = ImageGrid::from_fn(2, 2, |x, y| x as f64 - 0.5 * y as f64);
        let n = 20_000;
        for t in [5, 50, 95] {
            let mut sum = [0.0; 4];
            let mut sq = [0.0; 4];
            for _ in 0..n {
                let eps = ImageGrid::from_fn(2, 2, |_, _| StandardNormal.sample(&mut rng));
                let xt = forward_noise(&x0, &eps, t, &s).unwrap();
                for (i, v) in xt.values().iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
            let var_t = 1.0 - s.alpha_bar(t);
            for i in 0..4 {
                let mean = sum[i] / n as f64;
                let var = sq[i] / n as f64 - mean * mean;
                let se = (var_t / n as f64).sqrt();
                assert!((mean - s.signal(t) * x0.values()[i]).abs() <= 3.0 * se);
                // standard error of a sample variance of a Gaussian: var·√(2/n)
                assert!((var - var_t).abs() <= 3.0 * var_t * (2.0 / n as f64).sqrt());
            }
        }
    }

    #[test]
    fn cfg_identities() {
        let c = ImageGrid::from_fn(3, 2, |x, y| 0.3 * x as f64 - y as f64);
        let u = ImageGrid::from_fn(3, 2, |x, y| (x * y) as f64 + 0.1);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let out = cfg_combine(&ImageGrid::filled(2, 2, 2.0), &ImageGrid::filled(2, 2, 1.0), 7.5).unwrap();
        assert!(out.values().iter().all(|&v| v == 8.5));
        assert!(cfg_combine(&c, &ImageGrid::zeros(2, 3), 2.0).is_err());
    }

    fn grid4() -> impl Strategy<Value = ImageGrid> {
        prop::collection::vec(-1.0f64..1.0, 4).prop_map(|v| ImageGrid::new(2, 2, v).unwrap())
    }

    proptest! {
        #[test]
        fn cfg_is_affine(a in grid4(), b in grid4(), a2 in grid4(), b2 in grid4(), s in 0.0f64..10.0) {
            let lhs = cfg_combine(&a, &b, s).unwrap()
                .zip_map(&cfg_combine(&a2, &b2, s).unwrap(), |x, y| x + y).unwrap();
            let sa = a.zip_map(&a2, |x, y| x + y).unwrap();
            let sb = b.zip_map(&b2, |x, y| x + y).unwrap();
            let rhs = cfg_combine(&sa, &sb, s).unwrap();
            for (l, r) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((l - r).abs() <= 1e-12);
            }
        }
    }
}
