//! The learned models: skill encoder, domain encoder, skill prior, and the
//! domain-conditioned action-sequence adapter, plus checkpoint I/O.

use crate::container::{plan_arrays, read_container, write_container, ArrayData, ArrayMeta};
use crate::data::{Normalization, SubTrajectory};
use crate::error::{Error, Result};
use crate::gaussian::GaussianDist;
use crate::nn::{sinusoidal_embedding, Activation, Adam, Mlp, MlpSpec, ParamStore};
use crate::rng::{rng_for, RngState};
use crate::schedule::DiffusionSchedule;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub obs: usize,
    pub act: usize,
    pub h: usize,
    pub z: usize,
    pub d: usize,
    pub k_embed: usize,
}

impl ModelDims {
    pub fn defaults(obs: usize, act: usize, h: usize) -> Self {
        ModelDims {
            obs,
            act,
            h,
            z: 8,
            d: 4,
            k_embed: 16,
        }
    }

    /// Flattened window input: (H+1) states then H actions.
    pub fn window_dim(&self) -> usize {
        (self.h + 1) * self.obs + self.h * self.act
    }

    /// Flattened action sequence.
    pub fn seq_dim(&self) -> usize {
        self.h * self.act
    }

    pub fn adapter_input_dim(&self, kind: AdapterKind) -> usize {
        match kind {
            AdapterKind::Diffusion => {
                self.seq_dim() + self.k_embed + self.obs + self.d + self.z
            }
            AdapterKind::Regression => self.obs + self.d + self.z,
        }
    }
}

/// Diffusion is the standard adapter; Regression is the ablation that maps
/// (state, domain, skill) straight to an action sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Diffusion,
    Regression,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkArch {
    pub encoder_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    pub adapter_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkArch {
    fn default() -> Self {
        NetworkArch {
            encoder_hidden: vec![96, 96],
            prior_hidden: vec![64, 64],
            adapter_hidden: vec![128, 128],
            activation: Activation::Relu,
        }
    }
}

/// Loss coefficients and optimizer settings for offline training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    /// Skill-space KL regularizer coefficient.
    pub beta: f64,
    /// Weight of the reverse KL term in the prior consistency loss.
    pub mu: f64,
    /// Triplet margin.
    pub delta: f64,
    pub learning_rate: f64,
    pub w_skill: f64,
    pub w_cross_e: f64,
    pub w_cross_a: f64,
    pub w_con: f64,
    /// Fraction of contrastive negatives synthesized by the adapter from a
    /// random domain embedding.
    pub synth_negative_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            beta: 1e-3,
            mu: 0.5,
            delta: 1.0,
            learning_rate: 1e-3,
            w_skill: 1.0,
            w_cross_e: 1.0,
            w_cross_a: 1.0,
            w_con: 1.0,
            synth_negative_fraction: 0.25,
        }
    }
}

/// The full offline-learned model set. Immutable after training; all
/// inference paths take `&self`.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub dims: ModelDims,
    pub arch: NetworkArch,
    pub adapter_kind: AdapterKind,
    pub store: ParamStore,
    pub skill_encoder: Mlp,
    pub domain_encoder: Mlp,
    pub skill_prior: Mlp,
    pub adapter: Mlp,
    pub schedule: DiffusionSchedule,
    pub hyper: TrainHyper,
    pub norm: Normalization,
}

impl ModelSet {
    pub fn init(
        dims: ModelDims,
        arch: NetworkArch,
        adapter_kind: AdapterKind,
        schedule: DiffusionSchedule,
        hyper: TrainHyper,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "model-init");
        let skill_encoder = Mlp::init(
            &mut store,
            "skill_encoder",
            MlpSpec::new(dims.window_dim(), &arch.encoder_hidden, 2 * dims.z, arch.activation),
            &mut rng,
        );
        let domain_encoder = Mlp::init(
            &mut store,
            "domain_encoder",
            MlpSpec::new(dims.window_dim(), &arch.encoder_hidden, 2 * dims.d, arch.activation),
            &mut rng,
        );
        let skill_prior = Mlp::init(
            &mut store,
            "skill_prior",
            MlpSpec::new(dims.obs, &arch.prior_hidden, 2 * dims.z, arch.activation),
            &mut rng,
        );
        let adapter = Mlp::init(
            &mut store,
            "adapter",
            MlpSpec::new(
                dims.adapter_input_dim(adapter_kind),
                &arch.adapter_hidden,
                dims.seq_dim(),
                arch.activation,
            ),
            &mut rng,
        );
        Ok(ModelSet {
            dims,
            arch,
            adapter_kind,
            store,
            skill_encoder,
            domain_encoder,
            skill_prior,
            adapter,
            schedule,
            hyper,
            norm,
        })
    }

    /// Flatten a window into the encoder input layout: states then actions.
    pub fn flatten_window(&self, w: &SubTrajectory) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.dims.window_dim());
        out.extend(w.states.iter().copied());
        out.extend(w.actions.iter().copied());
        Array1::from(out)
    }

    /// Same layout from raw state/action matrices.
    pub fn flatten_parts(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.dims.window_dim());
        out.extend(states.iter().copied());
        out.extend(actions.iter().copied());
        Array1::from(out)
    }

    fn head_to_gaussian(out: &Array2<f64>, dim: usize) -> GaussianDist {
        let mean = out.slice(ndarray::s![0, 0..dim]).to_owned();
        let log_std = out.slice(ndarray::s![0, dim..2 * dim]).to_owned();
        GaussianDist::new(mean, log_std)
    }

    /// Skill posterior for a normalized window.
    pub fn encode_skill(&self, w: &SubTrajectory) -> GaussianDist {
        let x = self.flatten_window(w).insert_axis(ndarray::Axis(0));
        let out = self.skill_encoder.forward(&self.store, &x);
        Self::head_to_gaussian(&out, self.dims.z)
    }

    /// Domain posterior for a normalized window.
    pub fn encode_domain(&self, w: &SubTrajectory) -> GaussianDist {
        let x = self.flatten_window(w).insert_axis(ndarray::Axis(0));
        let out = self.domain_encoder.forward(&self.store, &x);
        Self::head_to_gaussian(&out, self.dims.d)
    }

    /// Domain posterior from raw state/action matrices (normalized inputs).
    pub fn encode_domain_parts(&self, states: &Array2<f64>, actions: &Array2<f64>) -> GaussianDist {
        let x = self
            .flatten_parts(states, actions)
            .insert_axis(ndarray::Axis(0));
        let out = self.domain_encoder.forward(&self.store, &x);
        Self::head_to_gaussian(&out, self.dims.d)
    }

    /// State-conditioned skill prior for a normalized observation.
    pub fn skill_prior_dist(&self, obs_norm: &Array1<f64>) -> GaussianDist {
        let x = obs_norm.clone().insert_axis(ndarray::Axis(0));
        let out = self.skill_prior.forward(&self.store, &x);
        Self::head_to_gaussian(&out, self.dims.z)
    }

    /// Noise prediction for a batch of noised sequences at given steps.
    /// Rows of `x` are flattened H x act sequences; `ks` are 1-based steps.
    pub fn adapter_eps_batch(
        &self,
        x: &Array2<f64>,
        ks: &[usize],
        s: &Array2<f64>,
        d: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Array2<f64> {
        assert_eq!(self.adapter_kind, AdapterKind::Diffusion);
        let n = x.nrows();
        let mut input = Array2::zeros((n, self.dims.adapter_input_dim(AdapterKind::Diffusion)));
        for i in 0..n {
            let kemb = sinusoidal_embedding(ks[i], self.dims.k_embed);
            let mut at = 0;
            for &v in x.row(i).iter() {
                input[[i, at]] = v;
                at += 1;
            }
            for &v in kemb.iter() {
                input[[i, at]] = v;
                at += 1;
            }
            for &v in s.row(i).iter() {
                input[[i, at]] = v;
                at += 1;
            }
            for &v in d.row(i).iter() {
                input[[i, at]] = v;
                at += 1;
            }
            for &v in z.row(i).iter() {
                input[[i, at]] = v;
                at += 1;
            }
        }
        self.adapter.forward(&self.store, &input)
    }

    /// Single-row convenience wrapper over `adapter_eps_batch`.
    pub fn adapter_eps(
        &self,
        x_flat: &Array1<f64>,
        k: usize,
        s: &Array1<f64>,
        d: &Array1<f64>,
        z: &Array1<f64>,
    ) -> Array1<f64> {
        let x = x_flat.clone().insert_axis(ndarray::Axis(0));
        let s = s.clone().insert_axis(ndarray::Axis(0));
        let d = d.clone().insert_axis(ndarray::Axis(0));
        let z = z.clone().insert_axis(ndarray::Axis(0));
        self.adapter_eps_batch(&x, &[k], &s, &d, &z).row(0).to_owned()
    }

    /// Regression-adapter forward: (s, d, z) -> flattened action sequence.
    pub fn adapter_regress(
        &self,
        s: &Array1<f64>,
        d: &Array1<f64>,
        z: &Array1<f64>,
    ) -> Array1<f64> {
        assert_eq!(self.adapter_kind, AdapterKind::Regression);
        let mut input = Vec::with_capacity(self.dims.adapter_input_dim(AdapterKind::Regression));
        input.extend(s.iter().copied());
        input.extend(d.iter().copied());
        input.extend(z.iter().copied());
        let x = Array1::from(input).insert_axis(ndarray::Axis(0));
        self.adapter.forward(&self.store, &x).row(0).to_owned()
    }

    pub fn param_hash(&self) -> String {
        self.store.content_hash()
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Array1<f64> {
        let mut v = obs.to_vec();
        self.norm.normalize_state_slice(&mut v);
        Array1::from(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    version: u32,
    dims: ModelDims,
    arch: NetworkArch,
    adapter_kind: AdapterKind,
    schedule: DiffusionSchedule,
    hyper: TrainHyper,
    norm: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_lr: Option<f64>,
    arrays: Vec<ArrayMeta>,
}

/// Optimizer and RNG state needed to resume training exactly.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub adam: Adam,
    pub rng: RngState,
}

pub fn save_checkpoint(
    models: &ModelSet,
    resume: Option<&ResumeState>,
    path: &Path,
) -> Result<()> {
    let mut arrays = Vec::new();
    for (name, arr) in models.store.iter() {
        arrays.push(ArrayData::f64(
            format!("param/{name}"),
            vec![arr.nrows(), arr.ncols()],
            arr.iter().copied().collect(),
        ));
    }
    if let Some(r) = resume {
        for (name, _) in models.store.iter() {
            let pid = models.store.id_of(name).unwrap();
            let m = &r.adam.m[pid];
            let v = &r.adam.v[pid];
            arrays.push(ArrayData::f64(
                format!("adam_m/{name}"),
                vec![m.nrows(), m.ncols()],
                m.iter().copied().collect(),
            ));
            arrays.push(ArrayData::f64(
                format!("adam_v/{name}"),
                vec![v.nrows(), v.ncols()],
                v.iter().copied().collect(),
            ));
        }
    }
    let header = CheckpointHeader {
        kind: "checkpoint".to_string(),
        version: 1,
        dims: models.dims,
        arch: models.arch.clone(),
        adapter_kind: models.adapter_kind,
        schedule: models.schedule.clone(),
        hyper: models.hyper.clone(),
        norm: models.norm.clone(),
        rng: resume.map(|r| r.rng.clone()),
        adam_step: resume.map(|r| r.adam.step),
        adam_lr: resume.map(|r| r.adam.lr),
        arrays: plan_arrays(&arrays)?,
    };
    write_container(path, &header, &arrays)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSet, Option<ResumeState>)> {
    let container = read_container(path)?;
    let header: CheckpointHeader = container.typed_header()?;
    if header.kind != "checkpoint" {
        return Err(Error::format(format!(
            "expected a model checkpoint, found kind '{}'",
            header.kind
        )));
    }
    // Rebuild with the stored architecture, then overwrite parameters.
    let mut models = ModelSet::init(
        header.dims,
        header.arch.clone(),
        header.adapter_kind,
        header.schedule.clone(),
        header.hyper.clone(),
        header.norm.clone(),
        0,
    )?;
    for pid in 0..models.store.len() {
        let name = models.store.name(pid).to_string();
        let stored = container.array(&format!("param/{name}"))?;
        let arr = Array2::from_shape_vec((stored.shape[0], stored.shape[1]), stored.values.clone())
            .map_err(|e| Error::format(format!("bad parameter {name}: {e}")))?;
        if arr.dim() != models.store.get(pid).dim() {
            return Err(Error::format(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                arr.dim(),
                models.store.get(pid).dim()
            )));
        }
        *models.store.get_mut(pid) = arr;
    }
    let resume = match (&header.rng, header.adam_step, header.adam_lr) {
        (Some(rng), Some(step), Some(lr)) => {
            let mut adam = Adam::new(&models.store, lr);
            adam.step = step;
            for pid in 0..models.store.len() {
                let name = models.store.name(pid).to_string();
                let m = container.array(&format!("adam_m/{name}"))?;
                let v = container.array(&format!("adam_v/{name}"))?;
                adam.m[pid] = Array2::from_shape_vec((m.shape[0], m.shape[1]), m.values.clone())
                    .map_err(|e| Error::format(format!("bad adam state: {e}")))?;
                adam.v[pid] = Array2::from_shape_vec((v.shape[0], v.shape[1]), v.values.clone())
                    .map_err(|e| Error::format(format!("bad adam state: {e}")))?;
            }
            Some(ResumeState {
                adam,
                rng: rng.clone(),
            })
        }
        _ => None,
    };
    Ok((models, resume))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env;

    fn tiny_models() -> ModelSet {
        let dims = ModelDims {
            obs: env::OBS_DIM,
            act: env::ACT_DIM,
            h: 4,
            z: 3,
            d: 2,
            k_embed: 8,
        };
        let arch = NetworkArch {
            encoder_hidden: vec![16],
            prior_hidden: vec![16],
            adapter_hidden: vec![16],
            activation: Activation::Tanh,
        };
        ModelSet::init(
            dims,
            arch,
            AdapterKind::Diffusion,
            DiffusionSchedule::with_terminal(8, 0.95, 0.008).unwrap(),
            TrainHyper::default(),
            Normalization::identity(env::OBS_DIM, env::ACT_DIM),
            3,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters_exactly() {
        let models = tiny_models();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.icpd");
        save_checkpoint(&models, None, &p).unwrap();
        let (back, resume) = load_checkpoint(&p).unwrap();
        assert!(resume.is_none());
        assert_eq!(models.param_hash(), back.param_hash());
        assert_eq!(models.schedule, back.schedule);
    }

    #[test]
    fn checkpoint_with_resume_state_round_trips() {
        let models = tiny_models();
        let mut adam = Adam::new(&models.store, 1e-3);
        adam.step = 17;
        adam.m[0][[0, 0]] = 0.25;
        let rng = RngState::capture(&rng_for(9, "x"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.icpd");
        save_checkpoint(
            &models,
            Some(&ResumeState {
                adam: adam.clone(),
                rng: rng.clone(),
            }),
            &p,
        )
        .unwrap();
        let (_, resume) = load_checkpoint(&p).unwrap();
        let resume = resume.unwrap();
        assert_eq!(resume.adam.step, 17);
        assert_eq!(resume.adam.m[0][[0, 0]], 0.25);
        assert_eq!(resume.rng, rng);
    }

    #[test]
    fn adapter_output_has_sequence_shape() {
        let models = tiny_models();
        let x = Array1::zeros(models.dims.seq_dim());
        let s = Array1::zeros(models.dims.obs);
        let d = Array1::zeros(models.dims.d);
        let z = Array1::zeros(models.dims.z);
        let eps = models.adapter_eps(&x, 1, &s, &d, &z);
        assert_eq!(eps.len(), models.dims.seq_dim());
    }
}
