//! Forward noising, the deterministic reverse chain, and the single-step
//! denoised estimate.

use crate::error::{Error, Result};
use crate::models::{AdapterKind, ModelSet};
use crate::schedule::DiffusionSchedule;
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// x^k = sqrt(alpha_bar^k) * a0 + sqrt(1 - alpha_bar^k) * eta, elementwise.
pub fn forward_diffuse(
    a0: &Array2<f64>,
    k: usize,
    eta: &Array2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    schedule.check_step(k)?;
    if a0.dim() != eta.dim() {
        return Err(Error::usage("noise shape must match the clean sequence"));
    }
    let ab = schedule.alpha_bar(k);
    Ok(a0.mapv(|v| ab.sqrt() * v) + eta.mapv(|v| (1.0 - ab).sqrt() * v))
}

/// Clean-sequence estimate from a noised sequence and the predicted noise:
/// (x^k - sqrt(1 - alpha_bar^k) * eps) / sqrt(alpha_bar^k).
pub fn denoise_with_eps(
    x_k: &Array2<f64>,
    k: usize,
    eps: &Array2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    schedule.check_step(k)?;
    let ab = schedule.alpha_bar(k);
    if ab < 1e-8 {
        return Err(Error::usage(format!(
            "alpha_bar({k}) = {ab} too small for the denoised estimate"
        )));
    }
    Ok((x_k - &eps.mapv(|v| (1.0 - ab).sqrt() * v)).mapv(|v| v / ab.sqrt()))
}

/// Single-step denoised estimate using the model's own noise prediction.
/// Inputs and output are flattened H x act sequences in normalized action
/// space; `s` is a normalized observation.
pub fn denoised_estimate(
    models: &ModelSet,
    x_k_flat: &Array1<f64>,
    k: usize,
    s: &Array1<f64>,
    d: &Array1<f64>,
    z: &Array1<f64>,
) -> Result<Array1<f64>> {
    models.schedule.check_step(k)?;
    let ab = models.schedule.alpha_bar(k);
    if ab < 1e-8 {
        return Err(Error::usage(format!(
            "alpha_bar({k}) = {ab} too small for the denoised estimate"
        )));
    }
    let eps = models.adapter_eps(x_k_flat, k, s, d, z);
    Ok((x_k_flat - &eps.mapv(|v| (1.0 - ab).sqrt() * v)).mapv(|v| v / ab.sqrt()))
}

/// Run the full deterministic reverse chain from x^K ~ N(0, I) down to x^0.
/// Everything is in normalized action space; the caller denormalizes.
/// The chain applies the posterior-mean update with no injected noise, so two
/// calls with the same rng seed produce identical sequences.
pub fn sample_actions_norm(
    models: &ModelSet,
    s_norm: &Array1<f64>,
    d: &Array1<f64>,
    z: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let h = models.dims.h;
    let act = models.dims.act;
    if models.adapter_kind == AdapterKind::Regression {
        let flat = models.adapter_regress(s_norm, d, z);
        return Ok(unflatten_seq(&flat, h, act));
    }
    let schedule = &models.schedule;
    let mut x: Array1<f64> = Array1::from_shape_fn(models.dims.seq_dim(), |_| {
        use rand::Rng;
        rng.sample::<f64, _>(StandardNormal)
    });
    for k in (1..=schedule.k_steps).rev() {
        let eps = models.adapter_eps(&x, k, s_norm, d, z);
        let a = schedule.alpha(k);
        let ab = schedule.alpha_bar(k);
        let coef = (1.0 - a) / (1.0 - ab).sqrt();
        x = (&x - &eps.mapv(|v| coef * v)).mapv(|v| v / a.sqrt());
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(
                "sample_actions",
                format!("reverse chain diverged at step k={k}"),
            ));
        }
    }
    Ok(unflatten_seq(&x, h, act))
}

/// Reverse chain in environment action space: normalizes the observation,
/// denoises, denormalizes, and clips to the actuator box [-1, 1].
pub fn sample_actions_env(
    models: &ModelSet,
    obs_raw: &[f64],
    d: &Array1<f64>,
    z: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let s_norm = models.normalize_obs(obs_raw);
    let seq = sample_actions_norm(models, &s_norm, d, z, rng)?;
    let env_seq = models.norm.denormalize_actions(&seq);
    Ok(env_seq.mapv(|v| v.clamp(-1.0, 1.0)))
}

pub fn unflatten_seq(flat: &Array1<f64>, h: usize, act: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, act), |(i, j)| flat[i * act + j])
}

pub fn flatten_seq(seq: &Array2<f64>) -> Array1<f64> {
    Array1::from(seq.iter().copied().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalization;
    use crate::env;
    use crate::models::{ModelDims, NetworkArch, TrainHyper};
    use crate::nn::Activation;
    use crate::rng::rng_for;
    use ndarray::array;

    fn tiny_models() -> ModelSet {
        let dims = ModelDims {
            obs: env::OBS_DIM,
            act: env::ACT_DIM,
            h: 3,
            z: 2,
            d: 2,
            k_embed: 8,
        };
        let arch = NetworkArch {
            encoder_hidden: vec![12],
            prior_hidden: vec![12],
            adapter_hidden: vec![12],
            activation: Activation::Tanh,
        };
        ModelSet::init(
            dims,
            arch,
            AdapterKind::Diffusion,
            DiffusionSchedule::with_terminal(10, 0.97, 0.008).unwrap(),
            TrainHyper::default(),
            Normalization::identity(env::OBS_DIM, env::ACT_DIM),
            11,
        )
        .unwrap()
    }

    #[test]
    fn forward_diffuse_matches_hand_evaluation() {
        // alpha_bar = 0.25, a0 = 1.0, eta = 1.0 -> 0.5 + sqrt(0.75).
        let schedule = DiffusionSchedule {
            k_steps: 1,
            alpha: vec![0.25],
            alpha_bar: vec![0.25],
        };
        let a0 = array![[1.0]];
        let eta = array![[1.0]];
        let x = forward_diffuse(&a0, 1, &eta, &schedule).unwrap();
        assert!((x[[0, 0]] - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((x[[0, 0]] - 1.3660254037844386).abs() < 1e-10);
    }

    #[test]
    fn zero_noise_scales_by_sqrt_alpha_bar() {
        let s = DiffusionSchedule::default_k50();
        let a0 = array![[0.7, -0.4], [0.1, 0.9]];
        let eta = Array2::zeros((2, 2));
        let k = 20;
        let x = forward_diffuse(&a0, k, &eta, &s).unwrap();
        let want = a0.mapv(|v| s.alpha_bar(k).sqrt() * v);
        assert!(x.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn near_clean_step_keeps_sequence_close() {
        let s = DiffusionSchedule::linear_alpha(50, 0.9999, 0.8).unwrap();
        let a0 = array![[0.5, -0.5]];
        let eta = array![[1.0, 1.0]];
        let x = forward_diffuse(&a0, 1, &eta, &s).unwrap();
        // alpha_bar(1) = 0.9999: x stays within ~1.1% of a0 plus tiny noise.
        assert!((x[[0, 0]] - a0[[0, 0]]).abs() < 0.02);
    }

    #[test]
    fn out_of_range_step_errors() {
        let s = DiffusionSchedule::default_k50();
        let a0 = array![[1.0]];
        assert!(forward_diffuse(&a0, 0, &a0, &s).is_err());
        assert!(forward_diffuse(&a0, 51, &a0, &s).is_err());
    }

    #[test]
    fn perfect_noise_prediction_inverts_forward_diffuse() {
        let s = DiffusionSchedule::default_k50();
        let a0 = array![[0.3, -0.8], [0.2, 0.5], [0.9, -0.1]];
        let mut rng = rng_for(0, "inv");
        let eta = Array2::from_shape_fn(a0.dim(), |_| {
            use rand::Rng;
            rng.sample::<f64, _>(StandardNormal)
        });
        for k in [1, 10, 25, 50] {
            let x = forward_diffuse(&a0, k, &eta, &s).unwrap();
            let back = denoise_with_eps(&x, k, &eta, &s).unwrap();
            let err = (&back - &a0).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-5, "k={k} err={err}");
        }
    }

    #[test]
    fn zero_eps_estimate_is_x_over_sqrt_alpha_bar() {
        let s = DiffusionSchedule::default_k50();
        let x = array![[0.4, -0.6]];
        let zero = Array2::zeros((1, 2));
        let est = denoise_with_eps(&x, 7, &zero, &s).unwrap();
        let want = x.mapv(|v| v / s.alpha_bar(7).sqrt());
        assert!(est.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn untrained_adapter_estimate_is_finite() {
        let models = tiny_models();
        let x = Array1::from(vec![0.3; models.dims.seq_dim()]);
        let s = Array1::zeros(models.dims.obs);
        let d = Array1::zeros(models.dims.d);
        let z = Array1::zeros(models.dims.z);
        let est = denoised_estimate(&models, &x, 5, &s, &d, &z).unwrap();
        assert!(est.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let models = tiny_models();
        let s = Array1::zeros(models.dims.obs);
        let d = Array1::zeros(models.dims.d);
        let z = Array1::from(vec![0.5, -0.5]);
        let a = sample_actions_norm(&models, &s, &d, &z, &mut rng_for(4, "chain")).unwrap();
        let b = sample_actions_norm(&models, &s, &d, &z, &mut rng_for(4, "chain")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (models.dims.h, models.dims.act));
    }

    #[test]
    fn env_sampling_clips_to_actuator_box() {
        let models = tiny_models();
        let obs = [0.0; env::OBS_DIM];
        let d = Array1::zeros(models.dims.d);
        let z = Array1::from(vec![2.0, -2.0]);
        let a = sample_actions_env(&models, &obs, &d, &z, &mut rng_for(4, "chain")).unwrap();
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
