//! Discrete variance-preserving noise schedules and the forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaRule {
    Linear,
    Constant,
}

/// `β_1..β_T` together with the cumulative products `ᾱ_t = Π_{s≤t} (1 - β_s)`.
///
/// Timesteps are 1-based for `β` and 0-based for `ᾱ` (`ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside [0, 1]")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_1..ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    pub(crate) fn check_t(&self, t: usize, min: usize, max: usize) -> Result<()> {
        if t < min || t > max {
            return Err(Error::TimestepOutOfRange { t, min, max });
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) ε` for `1 ≤ t ≤ T`.
    pub fn forward_perturb<E: Entropy + ?Sized>(
        &self,
        x0: &[f64],
        t: usize,
        rng: &mut E,
    ) -> Result<Vec<f64>> {
        self.check_t(t, 1, self.steps())?;
        let eps = rng.standard_normal_vec(x0.len());
        Ok(self.forward_perturb_with(x0, t, &eps))
    }

    /// [`forward_perturb`](Self::forward_perturb) with explicit noise.
    pub fn forward_perturb_with(&self, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
    }

    /// One forward transition `q_{t+1|t}`: `√(1-β_{t+1}) x_t + √β_{t+1} ε`, for `0 ≤ t < T`.
    pub fn one_step_forward<E: Entropy + ?Sized>(
        &self,
        x_t: &[f64],
        t: usize,
        rng: &mut E,
    ) -> Result<Vec<f64>> {
        self.check_t(t, 0, self.steps() - 1)?;
        let beta = self.beta(t + 1);
        let (a, s) = ((1.0 - beta).sqrt(), beta.sqrt());
        Ok(x_t
            .iter()
            .map(|x| a * x + s * rng.standard_normal())
            .collect())
    }

    /// `log q_{t+1|t}(x_next | x_t)`.
    pub fn forward_log_density(&self, t: usize, x_t: &[f64], x_next: &[f64]) -> f64 {
        let beta = self.beta(t + 1);
        let a = (1.0 - beta).sqrt();
        let d = x_t.len() as f64;
        let sq: f64 = x_t
            .iter()
            .zip(x_next)
            .map(|(x, y)| (y - a * x).powi(2))
            .sum();
        -0.5 * (d * (2.0 * std::f64::consts::PI * beta).ln() + sq / beta)
    }
}

/// Builds a schedule of `steps` betas interpolated between `beta_start` and `beta_end`.
///
/// `Constant` uses `beta_start` throughout.
pub fn make_vp_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    rule: BetaRule,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(0.0 <= beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "require 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = match rule {
        BetaRule::Constant => vec![beta_start; steps],
        BetaRule::Linear if steps == 1 => vec![beta_start],
        BetaRule::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chain_rng;

    struct Fixed(f64);
    impl Entropy for Fixed {
        fn uniform(&mut self) -> f64 {
            0.5
        }
        fn standard_normal(&mut self) -> f64 {
            self.0
        }
    }

    #[test]
    fn constant_schedule_products() {
        let s = make_vp_schedule(2, 0.5, 0.5, BetaRule::Constant).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn zero_beta_is_identity() {
        let s = make_vp_schedule(1, 0.0, 0.0, BetaRule::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0]);
        let mut rng = chain_rng(1, 0);
        let x = s.forward_perturb(&[1.5, -2.0], 1, &mut rng).unwrap();
        assert_eq!(x, vec![1.5, -2.0]);
        assert_eq!(s.one_step_forward(&[0.3], 0, &mut rng).unwrap(), vec![0.3]);
    }

    #[test]
    fn linear_schedule_matches_brute_force_product() {
        let s = make_vp_schedule(1000, 1e-4, 0.02, BetaRule::Linear).unwrap();
        // independent recomputation: betas from the closed form, product in log space
        let log_prod: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0)).ln())
            .sum();
        let oracle = log_prod.exp();
        assert!(((s.alpha_bar(1000) - oracle) / oracle).abs() < 1e-10);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(make_vp_schedule(0, 0.1, 0.2, BetaRule::Linear).is_err());
        assert!(make_vp_schedule(4, 0.3, 0.2, BetaRule::Linear).is_err());
        assert!(make_vp_schedule(4, 0.1, 1.0, BetaRule::Linear).is_err());
        assert!(make_vp_schedule(4, -0.1, 0.2, BetaRule::Linear).is_err());
        assert!(NoiseSchedule::from_betas(vec![1.2]).is_err());
    }

    #[test]
    fn forward_perturb_fixed_noise() {
        let s = make_vp_schedule(1, 0.75, 0.75, BetaRule::Constant).unwrap();
        assert_eq!(s.alpha_bar(1), 0.25);
        assert_eq!(
            s.forward_perturb(&[2.0], 1, &mut Fixed(0.0)).unwrap(),
            vec![1.0]
        );
        let y = s.forward_perturb(&[2.0], 1, &mut Fixed(1.0)).unwrap()[0];
        assert!((y - 1.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn forward_timestep_bounds() {
        let s = make_vp_schedule(3, 0.1, 0.2, BetaRule::Linear).unwrap();
        let mut rng = chain_rng(0, 0);
        assert!(s.forward_perturb(&[0.0], 0, &mut rng).is_err());
        assert!(s.forward_perturb(&[0.0], 4, &mut rng).is_err());
        assert!(s.one_step_forward(&[0.0], 3, &mut rng).is_err());
        assert!(s.one_step_forward(&[0.0], 2, &mut rng).is_ok());
    }

    #[test]
    fn forward_perturb_moments() {
        let s = make_vp_schedule(10, 0.05, 0.2, BetaRule::Linear).unwrap();
        let t = 6;
        let ab = s.alpha_bar(t);
        let mut rng = chain_rng(11, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| s.forward_perturb(&[1.3], t, &mut rng).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        // var of sample variance for a Gaussian: 2σ⁴/(n-1)
        let se_var = (2.0 * want_var * want_var / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * 1.3).abs() < 3.0 * se_mean);
        assert!((var - want_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn unit_beta_forgets_the_input() {
        let s = NoiseSchedule::from_betas(vec![1.0, 0.5]).unwrap();
        let n = 20_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = chain_rng(3, i as u64);
            let x = rng.standard_normal() * 2.0;
            xs.push(x);
            ys.push(s.one_step_forward(&[x], 0, &mut rng).unwrap()[0]);
        }
        let corr = crate::stats::pearson(&xs, &ys);
        // |r| under independence is ~N(0, 1/n)
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }
}
