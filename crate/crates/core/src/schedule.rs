//! Denoising variance schedule.

use crate::error::{Error, Result};

/// Per-step coefficients of a K-step denoising chain. Step indices are
/// 1-based: `alpha(k)` and `alpha_bar(k)` are valid for k in [1, K], with
/// `alpha_bar(k)` the running product of alphas up to k.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiffusionSchedule {
    pub k_steps: usize,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Alphas linearly interpolated from `alpha_hi` (k=1) down to `alpha_lo`
    /// (k=K). The default K=50 over [0.99, 0.81] lands alpha_bar(K) near 5e-3.
    pub fn linear_alpha(k_steps: usize, alpha_hi: f64, alpha_lo: f64) -> Result<Self> {
        if k_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let mut alpha = Vec::with_capacity(k_steps);
        for i in 0..k_steps {
            let t = if k_steps == 1 {
                0.0
            } else {
                i as f64 / (k_steps - 1) as f64
            };
            alpha.push(alpha_hi + t * (alpha_lo - alpha_hi));
        }
        let mut alpha_bar = Vec::with_capacity(k_steps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let s = DiffusionSchedule {
            k_steps,
            alpha,
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    /// Solve for `alpha_lo` by bisection so that alpha_bar(K) hits
    /// `terminal_alpha_bar`, keeping `alpha_hi` fixed.
    pub fn with_terminal(k_steps: usize, alpha_hi: f64, terminal_alpha_bar: f64) -> Result<Self> {
        if !(0.0 < terminal_alpha_bar && terminal_alpha_bar < alpha_hi.powi(k_steps as i32)) {
            return Err(Error::invalid(format!(
                "terminal alpha_bar {terminal_alpha_bar} unreachable with alpha_hi {alpha_hi}"
            )));
        }
        let terminal = |lo: f64| -> f64 {
            let mut prod = 1.0;
            for i in 0..k_steps {
                let t = if k_steps == 1 {
                    0.0
                } else {
                    i as f64 / (k_steps - 1) as f64
                };
                prod *= alpha_hi + t * (lo - alpha_hi);
            }
            prod
        };
        let (mut lo, mut hi) = (1e-4, alpha_hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if terminal(mid) > terminal_alpha_bar {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        DiffusionSchedule::linear_alpha(k_steps, alpha_hi, 0.5 * (lo + hi))
    }

    pub fn default_k50() -> Self {
        DiffusionSchedule::linear_alpha(50, 0.99, 0.81).expect("default schedule is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.k_steps || self.alpha_bar.len() != self.k_steps {
            return Err(Error::invalid("schedule length mismatch"));
        }
        for (i, &a) in self.alpha.iter().enumerate() {
            if !(0.0 < a && a < 1.0) {
                return Err(Error::invalid(format!(
                    "alpha[{}] = {a} outside (0, 1)",
                    i + 1
                )));
            }
        }
        for w in self.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::invalid("alpha_bar must be strictly decreasing"));
            }
        }
        let terminal = *self.alpha_bar.last().unwrap();
        if terminal >= 0.01 {
            return Err(Error::invalid(format!(
                "terminal alpha_bar {terminal} must be below 0.01"
            )));
        }
        Ok(())
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k < 1 || k > self.k_steps {
            return Err(Error::usage(format!(
                "denoising step {k} outside [1, {}]",
                self.k_steps
            )));
        }
        Ok(())
    }

    /// alpha at 1-based step k.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// alpha_bar at 1-based step k.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }
}
