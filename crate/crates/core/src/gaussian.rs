//! Diagonal Gaussian distributions, plain and on-tape.

use crate::tape::{NodeId, Tape};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Diagonal Gaussian with clamped log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: Array1<f64>,
    pub log_std: Array1<f64>,
}

impl GaussianDist {
    pub fn new(mean: Array1<f64>, log_std: Array1<f64>) -> Self {
        assert_eq!(mean.len(), log_std.len());
        let log_std = log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        GaussianDist { mean, log_std }
    }

    pub fn standard(dim: usize) -> Self {
        GaussianDist {
            mean: Array1::zeros(dim),
            log_std: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Array1<f64> {
        self.log_std.mapv(f64::exp)
    }

    /// KL(self || other), closed form for diagonal Gaussians.
    pub fn kl_to(&self, other: &GaussianDist) -> f64 {
        assert_eq!(self.dim(), other.dim());
        let mut total = 0.0;
        for i in 0..self.dim() {
            let lp = self.log_std[i];
            let lq = other.log_std[i];
            let var_ratio = (2.0 * (lp - lq)).exp();
            let md = self.mean[i] - other.mean[i];
            total += lq - lp + 0.5 * (var_ratio + md * md * (-2.0 * lq).exp()) - 0.5;
        }
        total
    }

    /// Draw a sample. `reparameterized` is a documentation-level flag here
    /// (both paths produce mean + std * eps); the tape-side reparameterized
    /// path is what training uses.
    pub fn sample(&self, rng: &mut ChaCha8Rng, _reparameterized: bool) -> Array1<f64> {
        let eps: Array1<f64> =
            Array1::from_shape_fn(self.dim(), |_| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &(self.std() * eps)
    }

    pub fn log_prob(&self, x: &Array1<f64>) -> f64 {
        let mut lp = 0.0;
        for i in 0..self.dim() {
            let ls = self.log_std[i];
            let z = (x[i] - self.mean[i]) * (-ls).exp();
            lp += -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }
}

/// Batched Gaussian heads on a tape: mean and clamped log-std nodes,
/// each of shape (batch, dim).
#[derive(Debug, Clone, Copy)]
pub struct GaussianNode {
    pub mean: NodeId,
    pub log_std: NodeId,
}

impl GaussianNode {
    /// Split a (batch, 2*dim) net output into mean and clamped log-std.
    pub fn from_head(tape: &mut Tape, head: NodeId, dim: usize) -> Self {
        let mean = tape.slice_cols(head, 0, dim);
        let raw = tape.slice_cols(head, dim, 2 * dim);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        GaussianNode { mean, log_std }
    }

    /// Detach: value-identical distribution with no gradient path.
    pub fn stop_grad(self, tape: &mut Tape) -> Self {
        GaussianNode {
            mean: tape.stop_grad(self.mean),
            log_std: tape.stop_grad(self.log_std),
        }
    }

    /// Reparameterized sample with externally supplied noise (batch, dim).
    pub fn rsample(self, tape: &mut Tape, eps: &Array2<f64>) -> NodeId {
        let e = tape.constant(eps.clone());
        let std = tape.exp(self.log_std);
        let scaled = tape.mul(std, e);
        tape.add(self.mean, scaled)
    }

    /// Per-row KL(self || other), shape (batch, 1).
    pub fn kl_to(self, tape: &mut Tape, other: GaussianNode) -> NodeId {
        // lq - lp + 0.5*exp(2(lp-lq)) + 0.5*(mp-mq)^2*exp(-2lq) - 0.5
        let ldiff = tape.sub(self.log_std, other.log_std);
        let two_ldiff = tape.scale(ldiff, 2.0);
        let var_ratio = tape.exp(two_ldiff);

        let md = tape.sub(self.mean, other.mean);
        let md2 = tape.square(md);
        let neg_two_lq = tape.scale(other.log_std, -2.0);
        let inv_var_q = tape.exp(neg_two_lq);
        let maha = tape.mul(md2, inv_var_q);

        let lq_minus_lp = tape.neg(ldiff);
        let a = tape.add(var_ratio, maha);
        let a = tape.scale(a, 0.5);
        let b = tape.add(lq_minus_lp, a);
        let b = tape.add_scalar(b, -0.5);
        tape.sum_cols(b)
    }

    /// Per-row KL(self || N(0, I)), shape (batch, 1).
    pub fn kl_to_standard(self, tape: &mut Tape) -> NodeId {
        // 0.5*(exp(2lp) + m^2 - 1) - lp
        let two_lp = tape.scale(self.log_std, 2.0);
        let var = tape.exp(two_lp);
        let m2 = tape.square(self.mean);
        let s = tape.add(var, m2);
        let s = tape.add_scalar(s, -1.0);
        let s = tape.scale(s, 0.5);
        let out = tape.sub(s, self.log_std);
        tape.sum_cols(out)
    }

    /// Extract row `i` as a plain distribution.
    pub fn row(self, tape: &Tape, i: usize) -> GaussianDist {
        GaussianDist {
            mean: tape.value(self.mean).row(i).to_owned(),
            log_std: tape.value(self.log_std).row(i).to_owned(),
        }
    }
}

/// Monte-Carlo KL estimate, used as the independent oracle for the closed form.
pub fn kl_monte_carlo(
    p: &GaussianDist,
    q: &GaussianDist,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples {
        let x = p.sample(rng, false);
        acc += p.log_prob(&x) - q.log_prob(&x);
    }
    acc / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::array;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = GaussianDist::new(array![0.3, -1.2], array![0.1, -0.7]);
        assert!(p.kl_to(&p).abs() < 1e-15);
    }

    #[test]
    fn log_std_is_clamped_on_construction() {
        let p = GaussianDist::new(array![0.0], array![10.0]);
        assert_eq!(p.log_std[0], LOG_STD_MAX);
        let p = GaussianDist::new(array![0.0], array![-10.0]);
        assert_eq!(p.log_std[0], LOG_STD_MIN);
    }

    #[test]
    fn closed_form_matches_monte_carlo() {
        let mut rng = rng_for(42, "kl-mc");
        let p = GaussianDist::new(array![0.5, -0.3, 1.1], array![-0.2, 0.4, 0.0]);
        let q = GaussianDist::new(array![-0.1, 0.2, 0.9], array![0.1, -0.5, 0.3]);
        let exact = p.kl_to(&q);
        let mc = kl_monte_carlo(&p, &q, 200_000, &mut rng);
        let rel = (exact - mc).abs() / exact.abs().max(1e-9);
        assert!(rel < 0.02, "closed {exact} vs mc {mc} (rel {rel})");
    }

    #[test]
    fn tape_kl_matches_plain_kl() {
        let p = GaussianDist::new(array![0.5, -0.3], array![-0.2, 0.4]);
        let q = GaussianDist::new(array![-0.1, 0.2], array![0.1, -0.5]);

        let mut t = Tape::new();
        let head_p = t.constant(array![[0.5, -0.3, -0.2, 0.4]]);
        let head_q = t.constant(array![[-0.1, 0.2, 0.1, -0.5]]);
        let gp = GaussianNode::from_head(&mut t, head_p, 2);
        let gq = GaussianNode::from_head(&mut t, head_q, 2);
        let kl = gp.kl_to(&mut t, gq);
        assert!((t.value(kl)[[0, 0]] - p.kl_to(&q)).abs() < 1e-12);

        let kl0 = gp.kl_to_standard(&mut t);
        let q0 = GaussianDist::standard(2);
        assert!((t.value(kl0)[[0, 0]] - p.kl_to(&q0)).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = GaussianDist::new(array![0.0, 1.0], array![0.0, 0.0]);
        let a = p.sample(&mut rng_for(5, "s"), true);
        let b = p.sample(&mut rng_for(5, "s"), true);
        assert_eq!(a, b);
    }
}
