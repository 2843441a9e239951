use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const BETA_START: f64 = 0.000_85;
pub const BETA_END: f64 = 0.012;

/// Noise schedule indexed by `t ∈ [1, T]`, rescaled to zero terminal SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_diff: usize,
    pub betas: Vec<f64>,
    /// `ᾱ_t` after rescaling.
    pub alpha_bar: Vec<f64>,
    /// `sqrt(ᾱ_t)` before rescaling.
    pub a_raw: Vec<f64>,
    a: Vec<f64>,
    s: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear in `sqrt(β)` between [`BETA_START`] and [`BETA_END`];
    /// `sqrt(ᾱ)` is then shifted and scaled so that `a_T = 0` and `a_1` is
    /// unchanged: `a'_t = a_1·(a_t − a_T)/(a_1 − a_T)`.
    pub fn new(t_diff: usize) -> Result<Self> {
        if t_diff < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {t_diff}")));
        }
        let (r0, r1) = (BETA_START.sqrt(), BETA_END.sqrt());
        let betas: Vec<f64> = (0..t_diff)
            .map(|i| {
                let r = r0 + (r1 - r0) * i as f64 / (t_diff - 1) as f64;
                r * r
            })
            .collect();
        let mut a_raw = Vec::with_capacity(t_diff);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            a_raw.push(prod.sqrt());
        }
        let (a1, at) = (a_raw[0], a_raw[t_diff - 1]);
        let mut a: Vec<f64> = a_raw.iter().map(|&x| a1 * (x - at) / (a1 - at)).collect();
        a[0] = a1;
        let s = a.iter().map(|&x| (1.0 - x * x).max(0.0).sqrt()).collect();
        let alpha_bar = a.iter().map(|&x| x * x).collect();
        Ok(Self {
            t_diff,
            betas,
            alpha_bar,
            a_raw,
            a,
            s,
        })
    }

    fn idx(&self, t: usize) -> usize {
        assert!((1..=self.t_diff).contains(&t), "timestep {t} outside [1, {}]", self.t_diff);
        t - 1
    }

    /// Signal coefficient `a_t = sqrt(ᾱ_t)`.
    pub fn a(&self, t: usize) -> f64 {
        self.a[self.idx(t)]
    }

    /// Noise coefficient `s_t = sqrt(1 − ᾱ_t)`.
    pub fn s(&self, t: usize) -> f64 {
        self.s[self.idx(t)]
    }

    /// CSV `t,a_t,s_t`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,a_t,s_t\n");
        for t in 1..=self.t_diff {
            writeln!(out, "{t},{:.17e},{:.17e}", self.a(t), self.s(t)).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::new(1000).unwrap();
        assert_eq!(s.a(1000), 0.0);
        assert_eq!(s.s(1000), 1.0);
        assert!((s.a(1) - s.a_raw[0]).abs() < 1e-12);
        assert!((s.a(1) - (1.0 - BETA_START).sqrt()).abs() < 1e-15);
        assert!((s.betas[999] - BETA_END).abs() < 1e-15);
    }

    #[test]
    fn strictly_decreasing_and_normalised() {
        for t_diff in [2, 50, 1000] {
            let s = NoiseSchedule::new(t_diff).unwrap();
            let min_gap = (1..t_diff)
                .map(|t| s.a(t) - s.a(t + 1))
                .fold(f64::INFINITY, f64::min);
            assert!(min_gap > 0.0);
            for t in 1..=t_diff {
                assert!((s.a(t).powi(2) + s.s(t).powi(2) - 1.0).abs() < 1e-6);
            }
        }
        assert!(NoiseSchedule::new(1).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let s = NoiseSchedule::new(50).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 51);
        assert!(csv.starts_with("t,a_t,s_t\n1,"));
    }
}
