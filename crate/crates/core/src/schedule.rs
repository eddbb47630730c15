//! Time-indexed coefficients of the noising chain.
//!
//! Step indices are 1-based: `beta(t)`, `alpha(t)` and `sigma_sq(t)` accept
//! `1..=T`, while `alpha_bar(t)` also accepts `t = 0` where it equals 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reverse-step variance choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    Beta,
    /// `sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    #[default]
    PosteriorBeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    // length T + 1, alpha_bar[0] = 1
    alpha_bar: Vec<f64>,
    sigma_sq: Vec<f64>,
    sigma_mode: SigmaMode,
}

impl Schedule {
    /// Builds a schedule from explicit per-step betas (`betas[0]` is step 1).
    pub fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::domain("T", "step count must be at least 1"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::domain("beta", format!("beta[{}] = {b} not in (0, 1)", i + 1)));
            }
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for (i, a) in alpha.iter().enumerate() {
            let prev = alpha_bar[i];
            let next = prev * a;
            if !(next > 0.0 && next < prev) {
                return Err(Error::domain(
                    "beta",
                    format!("alpha_bar not strictly decreasing and positive at t = {}", i + 1),
                ));
            }
            alpha_bar.push(next);
        }
        let sigma_sq = sigma_table(&betas, &alpha_bar, sigma_mode);
        Ok(Self {
            beta: betas,
            alpha,
            alpha_bar,
            sigma_sq,
            sigma_mode,
        })
    }

    /// Linear betas from `beta_start` at t = 1 to `beta_end` at t = T.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, sigma_mode: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("T", "step count must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::domain("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::domain("beta_end", format!("{beta_end} not in (0, 1)")));
        }
        if beta_start > beta_end {
            return Err(Error::domain(
                "beta_start",
                format!("{beta_start} exceeds beta_end {beta_end}"),
            ));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let slope = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + i as f64 * slope).collect()
        };
        Self::from_betas(betas, sigma_mode)
    }

    pub fn constant(steps: usize, beta: f64, sigma_mode: SigmaMode) -> Result<Self> {
        Self::linear(steps, beta, beta, sigma_mode)
    }

    /// Same betas, different reverse variance.
    pub fn with_sigma_mode(&self, sigma_mode: SigmaMode) -> Self {
        let mut s = self.clone();
        s.sigma_sq = sigma_table(&s.beta, &s.alpha_bar, sigma_mode);
        s.sigma_mode = sigma_mode;
        s
    }

    /// T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.sigma_sq[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Variance of the forward posterior at step t; zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Errors unless `min <= t <= T`.
    pub fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `alpha_bar[T]`, the signal fraction left after the full chain.
    pub fn alpha_bar_limit_check(&self) -> f64 {
        self.alpha_bar[self.steps()]
    }

    /// `max_t |alpha_bar_t - exp(-sum_{s<=t} beta_s)|`, the gap between the
    /// discrete chain and the continuous-time marginal decay.
    pub fn sde_consistency_gap(&self) -> f64 {
        let mut cum = 0.0;
        let mut gap: f64 = 0.0;
        for (t, b) in self.beta.iter().enumerate() {
            cum += b;
            gap = gap.max((self.alpha_bar[t + 1] - (-cum).exp()).abs());
        }
        gap
    }

    /// Stable hex digest of T, the betas and the sigma mode.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.steps() as u64).to_le_bytes());
        for b in &self.beta {
            h.update(b.to_le_bytes());
        }
        h.update([match self.sigma_mode {
            SigmaMode::Beta => 0u8,
            SigmaMode::PosteriorBeta => 1u8,
        }]);
        h.finalize()[..16].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Plain-text table `t,beta,alpha,alpha_bar,sigma_sq`, one row per step.
    pub fn to_table(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,sigma_sq\n");
        for t in 1..=self.steps() {
            let _ = writeln!(
                out,
                "{t},{},{},{},{}",
                fmt_sig17(self.beta(t)),
                fmt_sig17(self.alpha(t)),
                fmt_sig17(self.alpha_bar(t)),
                fmt_sig17(self.sigma_sq(t)),
            );
        }
        out
    }

    /// Parses [`Schedule::to_table`] output. The sigma mode is recovered by
    /// comparing the `sigma_sq` column against `beta`.
    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "t,beta,alpha,alpha_bar,sigma_sq" => {}
            other => return Err(Error::format("schedule table", format!("bad header {other:?}"))),
        }
        let mut betas = Vec::new();
        let mut sigmas = Vec::new();
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::format("schedule table", format!("row {} has {} columns", i + 1, cols.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::format("schedule table", format!("row {}: {e}", i + 1)))
            };
            if parse(cols[0])? as usize != i + 1 {
                return Err(Error::format("schedule table", format!("row {} out of order", i + 1)));
            }
            betas.push(parse(cols[1])?);
            sigmas.push(parse(cols[4])?);
        }
        let mode = if betas.iter().zip(&sigmas).all(|(b, s)| b == s) && betas.len() > 1 {
            SigmaMode::Beta
        } else if betas.len() == 1 {
            // T = 1: the posterior variance is 0, beta is not
            if sigmas[0] == 0.0 {
                SigmaMode::PosteriorBeta
            } else {
                SigmaMode::Beta
            }
        } else {
            SigmaMode::PosteriorBeta
        };
        Self::from_betas(betas, mode)
    }
}

fn sigma_table(beta: &[f64], alpha_bar: &[f64], mode: SigmaMode) -> Vec<f64> {
    beta.iter()
        .enumerate()
        .map(|(i, &b)| match mode {
            SigmaMode::Beta => b,
            SigmaMode::PosteriorBeta => b * (1.0 - alpha_bar[i]) / (1.0 - alpha_bar[i + 1]),
        })
        .collect()
}

/// Plain decimal notation with 17 significant digits.
pub fn fmt_sig17(v: f64) -> String {
    if v == 0.0 {
        return "0.0000000000000000".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (16 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints() {
        let s = Schedule::linear(1000, 0.0004, 0.06, SigmaMode::Beta).unwrap();
        assert_eq!(s.beta(1), 0.0004);
        assert!((s.beta(1000) - 0.06).abs() < 1e-15);
        assert_eq!(s.steps(), 1000);
    }

    #[test]
    fn constant_half_is_geometric() {
        let s = Schedule::constant(3, 0.5, SigmaMode::Beta).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn two_step_product() {
        let s = Schedule::linear(2, 0.1, 0.2, SigmaMode::Beta).unwrap();
        // (1 - 0.1)(1 - 0.2) = 0.72
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.alpha_bar_limit_check() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn domain_errors_name_the_parameter() {
        let e = Schedule::linear(0, 0.1, 0.2, SigmaMode::Beta).unwrap_err();
        assert!(e.to_string().contains("`T`"));
        let e = Schedule::linear(10, 0.0, 0.2, SigmaMode::Beta).unwrap_err();
        assert!(e.to_string().contains("`beta_start`"));
        let e = Schedule::linear(10, 0.1, 1.0, SigmaMode::Beta).unwrap_err();
        assert!(e.to_string().contains("`beta_end`"));
        assert!(Schedule::linear(10, 0.3, 0.2, SigmaMode::Beta).is_err());
    }

    #[test]
    fn limit_of_default_schedule() {
        // high-precision product: 4.1084629716453e-14
        let s = Schedule::linear(1000, 0.0004, 0.06, SigmaMode::Beta).unwrap();
        let v = s.alpha_bar_limit_check();
        assert!(v < 1e-9);
        assert!((v / 4.1084629716453183e-14 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn near_one_beta_kills_signal() {
        let s = Schedule::constant(1, 0.999_999_999, SigmaMode::Beta).unwrap();
        assert!(s.alpha_bar_limit_check() < 1e-8);
    }

    #[test]
    fn sde_gap_values() {
        // high-precision oracle: 0.0014992507833338
        let s = Schedule::linear(1000, 0.0004, 0.06, SigmaMode::Beta).unwrap();
        let g = s.sde_consistency_gap();
        assert!(g < 0.02);
        assert!((g - 0.0014992507833338090).abs() < 1e-12);
        // oracle for ten steps of 0.9: 0.30656965974059911
        let s = Schedule::constant(10, 0.9, SigmaMode::Beta).unwrap();
        assert!((s.sde_consistency_gap() - 0.30656965974059911).abs() < 1e-12);
        let s = Schedule::constant(1, 1e-6, SigmaMode::Beta).unwrap();
        assert!(s.sde_consistency_gap() <= 1e-12);
    }

    #[test]
    fn posterior_sigma_bounded_by_beta() {
        let s = Schedule::linear(200, 1e-3, 0.2, SigmaMode::PosteriorBeta).unwrap();
        assert_eq!(s.sigma_sq(1), 0.0);
        for t in 1..=200 {
            assert!(s.sigma_sq(t) <= s.beta(t));
            assert_eq!(s.sigma_sq(t), s.posterior_variance(t));
        }
    }

    #[test]
    fn table_round_trip() {
        for mode in [SigmaMode::Beta, SigmaMode::PosteriorBeta] {
            let s = Schedule::linear(50, 1e-4, 0.3, mode).unwrap();
            let text = s.to_table();
            assert!(text.starts_with("t,beta,alpha,alpha_bar,sigma_sq\n"));
            let back = Schedule::from_table(&text).unwrap();
            assert_eq!(back.sigma_mode(), mode);
            for t in 1..=50 {
                assert!((back.beta(t) - s.beta(t)).abs() <= 1e-16 * s.beta(t).max(1e-300) * 10.0);
            }
        }
    }

    #[test]
    fn sig17_formatting() {
        assert_eq!(fmt_sig17(0.5), "0.50000000000000000");
        assert_eq!(fmt_sig17(1.0), "1.0000000000000000");
        assert_eq!(fmt_sig17(0.0004), "0.00040000000000000002");
    }

    #[test]
    fn fingerprint_tracks_betas_and_mode() {
        let a = Schedule::linear(10, 0.1, 0.2, SigmaMode::Beta).unwrap();
        let b = Schedule::linear(10, 0.1, 0.21, SigmaMode::Beta).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), a.with_sigma_mode(SigmaMode::PosteriorBeta).fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}
