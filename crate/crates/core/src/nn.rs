//! Parameter storage, MLPs, and the Adam optimizer.
//!
//! All model parameters live in a [`ParamStore`] so that losses computed on
//! separate tapes can be combined into one joint gradient step, and so that
//! checkpoints are a flat list of named arrays.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub type ParamId = usize;

/// Named parameter arrays. Biases are stored as 1 x n matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.arrays.len();
        self.names.push(name.to_string());
        self.arrays.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.arrays[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.arrays[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.arrays.iter())
    }

    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays
            .iter()
            .all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over all parameter bytes, in registration order.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, arr) in self.iter() {
            h.update(name.as_bytes());
            for x in arr.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Accumulated gradients for a subset of parameters.
pub type GradMap = Vec<Option<Array2<f64>>>;

/// Scale-and-add `src` gradients into `dst`.
pub fn accumulate_grads(dst: &mut GradMap, src: &GradMap, weight: f64) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        if let Some(s) = s {
            match d {
                Some(acc) => acc.zip_mut_with(s, |a, b| *a += weight * b),
                slot => *slot = Some(s.mapv(|x| x * weight)),
            }
        }
    }
}

/// A tape plus the lazy binding of store parameters to leaf nodes.
pub struct TapeSession<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    leaf_of: Vec<Option<NodeId>>,
}

impl<'a> TapeSession<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        TapeSession {
            tape: Tape::new(),
            store,
            leaf_of: vec![None; store.len()],
        }
    }

    /// Leaf node for a parameter; inserted on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.leaf_of[id] {
            return n;
        }
        let n = self.tape.leaf(self.store.get(id).clone());
        self.leaf_of[id] = Some(n);
        n
    }

    /// Backward pass; maps node gradients back to parameter ids.
    pub fn grads(&self, loss: NodeId) -> (f64, GradMap) {
        let value = self.tape.scalar(loss);
        let node_grads = self.tape.backward(loss);
        let mut out: GradMap = vec![None; self.store.len()];
        for (pid, leaf) in self.leaf_of.iter().enumerate() {
            if let Some(n) = leaf {
                out[pid] = node_grads[*n].clone();
            }
        }
        (value, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Layer widths and nonlinearity for a feed-forward net with linear output.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        MlpSpec {
            input,
            hidden: hidden.to_vec(),
            output,
            activation,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output));
        dims
    }
}

/// A multilayer perceptron whose parameters live in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<(ParamId, ParamId)>, // (weight, bias)
}

impl Mlp {
    /// Register freshly initialized parameters under `name/l{i}/{w,b}`.
    pub fn init(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random_range(-bound..bound)
            });
            let b = Array2::zeros((1, fan_out));
            let wid = store.register(&format!("{name}/l{i}/w"), w);
            let bid = store.register(&format!("{name}/l{i}/b"), b);
            layers.push((wid, bid));
        }
        Mlp { spec, layers }
    }

    /// Bind to parameters already present in a store (checkpoint load).
    pub fn bind(store: &ParamStore, name: &str, spec: MlpSpec) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..spec.layer_dims().len() {
            let wid = store
                .id_of(&format!("{name}/l{i}/w"))
                .ok_or_else(|| Error::format(format!("missing parameter {name}/l{i}/w")))?;
            let bid = store
                .id_of(&format!("{name}/l{i}/b"))
                .ok_or_else(|| Error::format(format!("missing parameter {name}/l{i}/b")))?;
            layers.push((wid, bid));
        }
        Ok(Mlp { spec, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.dot(store.get(w)) + store.get(b);
            if i < last {
                h = match self.spec.activation {
                    Activation::Tanh => h.mapv(f64::tanh),
                    Activation::Relu => h.mapv(|v| v.max(0.0)),
                };
            }
        }
        h
    }

    pub fn forward_tape(&self, sess: &mut TapeSession, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = sess.param(w);
            let bn = sess.param(b);
            h = sess.tape.matmul(h, wn);
            h = sess.tape.add_row(h, bn);
            if i < last {
                h = match self.spec.activation {
                    Activation::Tanh => sess.tape.tanh(h),
                    Activation::Relu => sess.tape.relu(h),
                };
            }
        }
        h
    }
}

/// Adam with bias correction. State arrays are checkpointable.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = (0..store.len())
            .map(|i| Array2::zeros(store.get(i).dim()))
            .collect();
        let v = (0..store.len())
            .map(|i| Array2::zeros(store.get(i).dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One update over the parameters that received gradients.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (pid, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            m.zip_mut_with(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = store.get_mut(pid);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / c1;
                    let vh = v / c2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

/// Sinusoidal embedding of a denoising step index, transformer style.
///
/// Dimension must be even: pairs of (sin, cos) at geometrically spaced
/// frequencies over the [1, K] index range.
pub fn sinusoidal_embedding(k: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = k as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::array;

    #[test]
    fn mlp_tape_forward_matches_plain_forward() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(0, "nn-test");
        let spec = MlpSpec::new(3, &[8, 8], 2, Activation::Tanh);
        let net = Mlp::init(&mut store, "net", spec, &mut rng);

        let x = array![[0.1, -0.4, 0.9], [1.2, 0.0, -0.3]];
        let plain = net.forward(&store, &x);

        let mut sess = TapeSession::new(&store);
        let xn = sess.tape.constant(x);
        let out = net.forward_tape(&mut sess, xn);
        let taped = sess.tape.value(out);

        assert!(plain
            .iter()
            .zip(taped.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let pid = store.register("x", array![[5.0]]);
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = store.get(pid)[[0, 0]];
            let grads = vec![Some(array![[2.0 * x]])];
            adam.apply(&mut store, &grads);
        }
        assert!(store.get(pid)[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn bind_recovers_registered_layers() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "nn-test");
        let spec = MlpSpec::new(4, &[6], 3, Activation::Relu);
        let net = Mlp::init(&mut store, "enc", spec.clone(), &mut rng);
        let rebound = Mlp::bind(&store, "enc", spec).unwrap();
        assert_eq!(net.layers, rebound.layers);
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(1, 16);
        let b = sinusoidal_embedding(2, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert!((&a - &b).iter().any(|v| v.abs() > 1e-3));
    }
}
