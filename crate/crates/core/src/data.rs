//! Multi-domain expert dataset: generation, serialization, window sampling,
//! and few-shot demonstration sets.
//!
//! Raw trajectories are stored unnormalized; normalization statistics live in
//! the manifest and are applied at sampling time.

use crate::container::{plan_arrays, read_container, write_container, ArrayData, ArrayMeta};
use crate::env::{self, DomainSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::subseed;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Minimum expert success rate required of every domain at generation time.
pub const EXPERT_SUCCESS_FLOOR: f64 = 0.95;

/// One expert episode: T+1 observation rows, T action rows, T rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub domain_id: String,
    pub task_id: String,
    pub success: bool,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.actions.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.nrows() != self.actions.nrows() + 1 {
            return Err(Error::dataset(format!(
                "trajectory must have one more state than actions ({} vs {})",
                self.states.nrows(),
                self.actions.nrows()
            )));
        }
        if self.rewards.len() != self.actions.nrows() {
            return Err(Error::dataset("rewards must align with actions"));
        }
        let finite = self.states.iter().all(|v| v.is_finite())
            && self.actions.iter().all(|v| v.is_finite())
            && self.rewards.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::dataset("trajectory contains non-finite values"));
        }
        Ok(())
    }
}

/// Per-dimension statistics for states and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl Normalization {
    pub fn identity(obs_dim: usize, act_dim: usize) -> Self {
        Normalization {
            state_mean: vec![0.0; obs_dim],
            state_std: vec![1.0; obs_dim],
            action_mean: vec![0.0; act_dim],
            action_std: vec![1.0; act_dim],
        }
    }

    fn from_rows(states: &[Array2<f64>], actions: &[Array2<f64>]) -> Self {
        fn stats(mats: &[Array2<f64>]) -> (Vec<f64>, Vec<f64>) {
            let dim = mats[0].ncols();
            let mut mean = vec![0.0; dim];
            let mut count = 0usize;
            for m in mats {
                for row in m.rows() {
                    for (j, v) in row.iter().enumerate() {
                        mean[j] += v;
                    }
                    count += 1;
                }
            }
            for v in &mut mean {
                *v /= count as f64;
            }
            let mut var = vec![0.0; dim];
            for m in mats {
                for row in m.rows() {
                    for (j, v) in row.iter().enumerate() {
                        let d = v - mean[j];
                        var[j] += d * d;
                    }
                }
            }
            let std = var
                .iter()
                .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
                .collect();
            (mean, std)
        }
        let (state_mean, state_std) = stats(states);
        let (action_mean, action_std) = stats(actions);
        Normalization {
            state_mean,
            state_std,
            action_mean,
            action_std,
        }
    }

    pub fn normalize_state_slice(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - self.state_mean[j]) / self.state_std[j];
        }
    }

    pub fn normalize_states(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.state_mean[j]) / self.state_std[j];
            }
        }
        out
    }

    pub fn normalize_actions(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.action_mean[j]) / self.action_std[j];
            }
        }
        out
    }

    pub fn denormalize_actions(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.action_std[j] + self.action_mean[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: String,
    pub domain_id: String,
    pub task_id: String,
    pub steps: usize,
    pub success: bool,
}

/// Container header for dataset and few-shot files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: String,
    pub version: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub h: usize,
    pub domains: BTreeMap<String, DomainSpec>,
    pub tasks: BTreeMap<String, TaskSpec>,
    pub trajectories: Vec<TrajectoryEntry>,
    pub norm: Normalization,
    /// Few-shot files only: task id -> indices into `trajectories`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub demos: BTreeMap<String, Vec<usize>>,
    /// Few-shot files only: query task -> task whose demos serve it.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub substitution: BTreeMap<String, String>,
    pub arrays: Vec<ArrayMeta>,
}

/// The in-memory offline dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub version: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub h: usize,
    pub domains: BTreeMap<String, DomainSpec>,
    pub tasks: BTreeMap<String, TaskSpec>,
    pub trajectories: Vec<Trajectory>,
    pub norm: Normalization,
}

impl Dataset {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }
}

fn trajectory_from_episode(ep: &env::ExpertEpisode, domain_id: &str, task_id: &str) -> Trajectory {
    let t = ep.actions.len();
    let states = Array2::from_shape_fn((t + 1, env::OBS_DIM), |(i, j)| ep.observations[i][j]);
    let actions = Array2::from_shape_fn((t, env::ACT_DIM), |(i, j)| ep.actions[i][j]);
    Trajectory {
        states,
        actions,
        rewards: ep.rewards.clone(),
        domain_id: domain_id.to_string(),
        task_id: task_id.to_string(),
        success: ep.success,
    }
}

/// Generate one trajectory per (domain, task, episode) with the scripted
/// expert. Fails if any domain's expert success rate falls below the floor.
pub fn generate_dataset(
    domains: &[(String, DomainSpec)],
    tasks: &[(String, TaskSpec)],
    episodes_per_pair: usize,
    h: usize,
    seed: u64,
) -> Result<Dataset> {
    if episodes_per_pair == 0 {
        return Err(Error::usage("episodes_per_pair must be at least 1"));
    }
    if domains.is_empty() || tasks.is_empty() {
        return Err(Error::usage("need at least one domain and one task"));
    }
    for (id, d) in domains {
        d.validate()
            .map_err(|e| Error::dataset(format!("domain {id}: {e}")))?;
    }
    for (id, t) in tasks {
        t.validate()
            .map_err(|e| Error::dataset(format!("task {id}: {e}")))?;
    }

    let mut trajectories = Vec::new();
    let mut success_by_domain: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (did, domain) in domains {
        for (tid, task) in tasks {
            for e in 0..episodes_per_pair {
                let ep_seed = subseed(seed, &format!("gen/{did}/{tid}/{e}"));
                let ep = env::run_expert_episode(task, domain, ep_seed)?;
                let counts = success_by_domain.entry(did).or_insert((0, 0));
                counts.1 += 1;
                if ep.success {
                    counts.0 += 1;
                }
                trajectories.push(trajectory_from_episode(&ep, did, tid));
            }
        }
    }
    for (did, (ok, total)) in &success_by_domain {
        let rate = *ok as f64 / *total as f64;
        if rate < EXPERT_SUCCESS_FLOOR {
            return Err(Error::dataset(format!(
                "expert success {rate:.3} in domain {did} below {EXPERT_SUCCESS_FLOOR}; domain is mis-specified"
            )));
        }
    }

    let states: Vec<Array2<f64>> = trajectories.iter().map(|t| t.states.clone()).collect();
    let actions: Vec<Array2<f64>> = trajectories.iter().map(|t| t.actions.clone()).collect();
    let norm = Normalization::from_rows(&states, &actions);

    let ds = Dataset {
        version: 1,
        obs_dim: env::OBS_DIM,
        act_dim: env::ACT_DIM,
        h,
        domains: domains.iter().cloned().collect(),
        tasks: tasks.iter().cloned().collect(),
        trajectories,
        norm,
    };
    for t in &ds.trajectories {
        t.validate()?;
    }
    Ok(ds)
}

fn trajectory_arrays(trajectories: &[Trajectory]) -> Vec<ArrayData> {
    let mut arrays = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        arrays.push(ArrayData::f32(
            format!("traj{i}/states"),
            vec![t.states.nrows(), t.states.ncols()],
            t.states.iter().copied().collect(),
        ));
        arrays.push(ArrayData::f32(
            format!("traj{i}/actions"),
            vec![t.actions.nrows(), t.actions.ncols()],
            t.actions.iter().copied().collect(),
        ));
        arrays.push(ArrayData::f32(
            format!("traj{i}/rewards"),
            vec![t.rewards.len()],
            t.rewards.clone(),
        ));
    }
    arrays
}

#[allow(clippy::too_many_arguments)]
fn write_trajectory_file(
    path: &Path,
    kind: &str,
    obs_dim: usize,
    act_dim: usize,
    h: usize,
    domains: &BTreeMap<String, DomainSpec>,
    tasks: &BTreeMap<String, TaskSpec>,
    trajectories: &[Trajectory],
    norm: &Normalization,
    demos: BTreeMap<String, Vec<usize>>,
    substitution: BTreeMap<String, String>,
) -> Result<()> {
    let arrays = trajectory_arrays(trajectories);
    let header = DatasetHeader {
        kind: kind.to_string(),
        version: 1,
        obs_dim,
        act_dim,
        h,
        domains: domains.clone(),
        tasks: tasks.clone(),
        trajectories: trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| TrajectoryEntry {
                id: format!("traj{i}"),
                domain_id: t.domain_id.clone(),
                task_id: t.task_id.clone(),
                steps: t.steps(),
                success: t.success,
            })
            .collect(),
        norm: norm.clone(),
        demos,
        substitution,
        arrays: plan_arrays(&arrays)?,
    };
    write_container(path, &header, &arrays)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_trajectory_file(
        path,
        "dataset",
        ds.obs_dim,
        ds.act_dim,
        ds.h,
        &ds.domains,
        &ds.tasks,
        &ds.trajectories,
        &ds.norm,
        BTreeMap::new(),
        BTreeMap::new(),
    )
}

fn read_trajectories(
    header: &DatasetHeader,
    container: &crate::container::Container,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(header.trajectories.len());
    for entry in &header.trajectories {
        let states = container.array(&format!("{}/states", entry.id))?;
        let actions = container.array(&format!("{}/actions", entry.id))?;
        let rewards = container.array(&format!("{}/rewards", entry.id))?;
        let s = Array2::from_shape_vec((states.shape[0], states.shape[1]), states.values.clone())
            .map_err(|e| Error::format(format!("bad state array: {e}")))?;
        let a =
            Array2::from_shape_vec((actions.shape[0], actions.shape[1]), actions.values.clone())
                .map_err(|e| Error::format(format!("bad action array: {e}")))?;
        let t = Trajectory {
            states: s,
            actions: a,
            rewards: rewards.values.clone(),
            domain_id: entry.domain_id.clone(),
            task_id: entry.task_id.clone(),
            success: entry.success,
        };
        t.validate()?;
        if !header.domains.contains_key(&t.domain_id) {
            return Err(Error::format(format!(
                "trajectory domain {} not in domain table",
                t.domain_id
            )));
        }
        if !header.tasks.contains_key(&t.task_id) {
            return Err(Error::format(format!(
                "trajectory task {} not in task table",
                t.task_id
            )));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let container = read_container(path)?;
    let header: DatasetHeader = container.typed_header()?;
    if header.kind != "dataset" {
        return Err(Error::format(format!(
            "expected a dataset container, found kind '{}'",
            header.kind
        )));
    }
    let trajectories = read_trajectories(&header, &container)?;
    Ok(Dataset {
        version: header.version,
        obs_dim: header.obs_dim,
        act_dim: header.act_dim,
        h: header.h,
        domains: header.domains,
        tasks: header.tasks,
        trajectories,
        norm: header.norm,
    })
}

/// A contiguous H-step window: H+1 state rows, H action rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectory {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub domain_id: String,
    /// Parent trajectory index and window start, for provenance checks.
    pub traj: usize,
    pub start: usize,
}

pub type BatchB = Vec<SubTrajectory>;
pub type BatchBPrime = Vec<(SubTrajectory, SubTrajectory)>;
pub type BatchBC = Vec<(SubTrajectory, SubTrajectory, SubTrajectory)>;

/// Pre-indexed view over every valid window of a dataset.
pub struct WindowSampler<'a> {
    pub dataset: &'a Dataset,
    pub h: usize,
    windows: Vec<(usize, usize)>,
    by_domain: BTreeMap<String, Vec<usize>>,
}

impl<'a> WindowSampler<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        let h = dataset.h;
        for (i, t) in dataset.trajectories.iter().enumerate() {
            if t.steps() < h {
                return Err(Error::dataset(format!(
                    "trajectory {i} has {} steps, below the window length {h}",
                    t.steps()
                )));
            }
        }
        let mut windows = Vec::new();
        let mut by_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, t) in dataset.trajectories.iter().enumerate() {
            for start in 0..=(t.steps() - h) {
                let widx = windows.len();
                windows.push((i, start));
                by_domain.entry(t.domain_id.clone()).or_default().push(widx);
            }
        }
        Ok(WindowSampler {
            dataset,
            h,
            windows,
            by_domain,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn window(&self, widx: usize, normalized: bool) -> SubTrajectory {
        let (traj, start) = self.windows[widx];
        let t = &self.dataset.trajectories[traj];
        let states = t
            .states
            .slice(ndarray::s![start..start + self.h + 1, ..])
            .to_owned();
        let actions = t
            .actions
            .slice(ndarray::s![start..start + self.h, ..])
            .to_owned();
        let (states, actions) = if normalized {
            (
                self.dataset.norm.normalize_states(&states),
                self.dataset.norm.normalize_actions(&actions),
            )
        } else {
            (states, actions)
        };
        SubTrajectory {
            states,
            actions,
            domain_id: t.domain_id.clone(),
            traj,
            start,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(0..self.windows.len())
    }

    fn draw_in_domain(&self, domain: &str, rng: &mut ChaCha8Rng) -> usize {
        let pool = &self.by_domain[domain];
        pool[rng.random_range(0..pool.len())]
    }

    fn draw_outside_domain(&self, domain: &str, rng: &mut ChaCha8Rng) -> usize {
        loop {
            let w = self.draw(rng);
            let (traj, _) = self.windows[w];
            if self.dataset.trajectories[traj].domain_id != domain {
                return w;
            }
        }
    }

    /// Uniform windows, normalized.
    pub fn sample_b(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> BatchB {
        (0..batch_size)
            .map(|_| self.window(self.draw(rng), true))
            .collect()
    }

    /// Pairs from distinct domains.
    pub fn sample_b_prime(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<BatchBPrime> {
        self.require_multiple_domains("B'")?;
        Ok((0..batch_size)
            .map(|_| {
                let a = self.window(self.draw(rng), true);
                let b = self.window(self.draw_outside_domain(&a.domain_id, rng), true);
                (a, b)
            })
            .collect())
    }

    /// Triples (anchor, positive same domain, negative different domain).
    pub fn sample_bc(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<BatchBC> {
        self.require_multiple_domains("B_C")?;
        Ok((0..batch_size)
            .map(|_| {
                let anchor = self.window(self.draw(rng), true);
                let pos = self.window(self.draw_in_domain(&anchor.domain_id, rng), true);
                let neg = self.window(self.draw_outside_domain(&anchor.domain_id, rng), true);
                (anchor, pos, neg)
            })
            .collect())
    }

    fn require_multiple_domains(&self, what: &str) -> Result<()> {
        if self.by_domain.len() < 2 {
            return Err(Error::dataset(format!(
                "{what} sampling needs at least two domains, dataset has {}",
                self.by_domain.len()
            )));
        }
        Ok(())
    }
}

/// Few-shot demonstration set for one target domain.
#[derive(Debug, Clone)]
pub struct FewshotSet {
    pub domain_id: String,
    pub domain: DomainSpec,
    pub tasks: BTreeMap<String, TaskSpec>,
    /// Task id -> indices into `trajectories`.
    pub demos: BTreeMap<String, Vec<usize>>,
    pub trajectories: Vec<Trajectory>,
    /// Query task -> task whose demonstrations serve it (identity when the
    /// task kept its own demos).
    pub substitution: BTreeMap<String, String>,
    pub norm: Normalization,
}

impl FewshotSet {
    /// Demo trajectories answering a query for `task_id`, following the
    /// substitution map.
    pub fn pool_for_task(&self, task_id: &str) -> Result<Vec<&Trajectory>> {
        let resolved = self
            .substitution
            .get(task_id)
            .map(String::as_str)
            .unwrap_or(task_id);
        let idxs = self.demos.get(resolved).ok_or_else(|| {
            Error::usage(format!("no demonstrations available for task {task_id}"))
        })?;
        Ok(idxs.iter().map(|&i| &self.trajectories[i]).collect())
    }

    /// Trajectories still reachable through the demos map.
    pub fn all_trajectories(&self) -> Vec<&Trajectory> {
        let mut seen = vec![false; self.trajectories.len()];
        for idxs in self.demos.values() {
            for &i in idxs {
                seen[i] = true;
            }
        }
        self.trajectories
            .iter()
            .enumerate()
            .filter(|(i, _)| seen[*i])
            .map(|(_, t)| t)
            .collect()
    }
}

/// Expert demonstrations in the target domain: `shots` trajectories total,
/// distributed round-robin over tasks. Failed expert episodes are re-drawn
/// deterministically so that every stored demo is a success.
pub fn generate_fewshot(
    domain_id: &str,
    domain: &DomainSpec,
    tasks: &[(String, TaskSpec)],
    shots: usize,
    norm: &Normalization,
    seed: u64,
) -> Result<FewshotSet> {
    if shots == 0 {
        return Err(Error::usage("shots must be at least 1"));
    }
    if tasks.is_empty() {
        return Err(Error::usage("need at least one task"));
    }
    domain.validate()?;
    let mut trajectories = Vec::new();
    let mut demos: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for s in 0..shots {
        let (tid, task) = &tasks[s % tasks.len()];
        let mut ep = None;
        for retry in 0..20 {
            let ep_seed = subseed(seed, &format!("fewshot/{domain_id}/{tid}/{s}/{retry}"));
            let cand = env::run_expert_episode(task, domain, ep_seed)?;
            if cand.success {
                ep = Some(cand);
                break;
            }
        }
        let ep = ep.ok_or_else(|| {
            Error::dataset(format!(
                "expert failed 20 consecutive episodes on task {tid} in domain {domain_id}"
            ))
        })?;
        let idx = trajectories.len();
        trajectories.push(trajectory_from_episode(&ep, domain_id, tid));
        demos.entry(tid.clone()).or_default().push(idx);
    }
    let substitution = tasks
        .iter()
        .filter(|(tid, _)| demos.contains_key(tid))
        .map(|(tid, _)| (tid.clone(), tid.clone()))
        .collect();
    Ok(FewshotSet {
        domain_id: domain_id.to_string(),
        domain: domain.clone(),
        tasks: tasks.iter().cloned().collect(),
        demos,
        trajectories,
        substitution,
        norm: norm.clone(),
    })
}

/// Keep demonstrations for `ceil(fraction * num_tasks)` tasks (sorted task id
/// order); queries for dropped tasks resolve to the retained task with the
/// smallest summed waypoint distance.
pub fn task_substitution(set: &FewshotSet, available_fraction: f64) -> Result<FewshotSet> {
    if !(0.0 < available_fraction && available_fraction <= 1.0) {
        return Err(Error::usage("available_fraction must be in (0, 1]"));
    }
    let task_ids: Vec<&String> = set.demos.keys().collect();
    let keep = ((available_fraction * task_ids.len() as f64).ceil() as usize).max(1);
    let retained: Vec<String> = task_ids.iter().take(keep).map(|s| s.to_string()).collect();

    let mut out = set.clone();
    out.demos.retain(|tid, _| retained.contains(tid));
    out.substitution.clear();
    for (tid, task) in &set.tasks {
        if retained.contains(tid) {
            out.substitution.insert(tid.clone(), tid.clone());
            continue;
        }
        let mut best: Option<(&str, f64)> = None;
        for rid in &retained {
            let d = task.waypoint_distance(&set.tasks[rid]);
            if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((rid, d));
            }
        }
        let (rid, _) = best.ok_or_else(|| Error::usage("at least one task must be retained"))?;
        out.substitution.insert(tid.clone(), rid.to_string());
    }
    Ok(out)
}

pub fn write_fewshot(set: &FewshotSet, path: &Path) -> Result<()> {
    let mut domains = BTreeMap::new();
    domains.insert(set.domain_id.clone(), set.domain.clone());
    write_trajectory_file(
        path,
        "fewshot",
        env::OBS_DIM,
        env::ACT_DIM,
        0,
        &domains,
        &set.tasks,
        &set.trajectories,
        &set.norm,
        set.demos.clone(),
        set.substitution.clone(),
    )
}

pub fn read_fewshot(path: &Path) -> Result<FewshotSet> {
    let container = read_container(path)?;
    let header: DatasetHeader = container.typed_header()?;
    if header.kind != "fewshot" {
        return Err(Error::format(format!(
            "expected a fewshot container, found kind '{}'",
            header.kind
        )));
    }
    let trajectories = read_trajectories(&header, &container)?;
    let (domain_id, domain) = header
        .domains
        .into_iter()
        .next()
        .ok_or_else(|| Error::format("fewshot file has no domain"))?;
    Ok(FewshotSet {
        domain_id,
        domain,
        tasks: header.tasks,
        demos: header.demos,
        trajectories,
        substitution: header.substitution,
        norm: header.norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_domain, DisparityLevel, DomainFactor};
    use crate::rng::rng_for;

    fn small_domains() -> Vec<(String, DomainSpec)> {
        vec![
            ("source".into(), DomainSpec::source()),
            (
                "wind_low".into(),
                make_domain(DomainFactor::Wind, DisparityLevel::Low, 0),
            ),
        ]
    }

    fn small_tasks() -> Vec<(String, TaskSpec)> {
        vec![
            ("reach_r".into(), TaskSpec::new(vec![[1.0, 0.2]], 0.15, 60)),
            ("reach_u".into(), TaskSpec::new(vec![[0.1, 1.0]], 0.15, 60)),
            (
                "two_stage".into(),
                TaskSpec::new(vec![[0.8, 0.0], [0.8, 0.8]], 0.15, 110),
            ),
        ]
    }

    fn small_dataset() -> Dataset {
        generate_dataset(&small_domains(), &small_tasks(), 4, 10, 7).unwrap()
    }

    #[test]
    fn trajectory_count_matches_grid() {
        let ds = small_dataset();
        assert_eq!(ds.trajectories.len(), 2 * 3 * 4);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.icpd");
        let p2 = dir.path().join("b.icpd");
        write_dataset(&small_dataset(), &p1).unwrap();
        write_dataset(&small_dataset(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_preserves_arrays_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.icpd");
        let ds = small_dataset();
        write_dataset(&ds, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.trajectories.len(), ds.trajectories.len());
        for (a, b) in ds.trajectories.iter().zip(back.trajectories.iter()) {
            // Stored as f32: reading back reproduces the f32-rounded values.
            for (x, y) in a.states.iter().zip(b.states.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
            for (x, y) in a.actions.iter().zip(b.actions.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
            assert_eq!(a.domain_id, b.domain_id);
            assert_eq!(a.task_id, b.task_id);
        }
        // Write/read of already-f32 data is an exact fixed point.
        let p2 = dir.path().join("ds2.icpd");
        let p3 = dir.path().join("ds3.icpd");
        write_dataset(&back, &p2).unwrap();
        write_dataset(&read_dataset(&p2).unwrap(), &p3).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn degenerate_domain_is_rejected_before_generation() {
        let mut bad = DomainSpec::source();
        bad.embodiment_gain = [[1.0, 1.0], [1.0, 1.0]];
        bad.disparity_level = DisparityLevel::High;
        let domains = vec![("bad".to_string(), bad)];
        let err = generate_dataset(&domains, &small_tasks(), 2, 10, 0);
        assert!(err.is_err());
    }

    #[test]
    fn window_shapes_and_counts() {
        let ds = small_dataset();
        let sampler = WindowSampler::new(&ds).unwrap();
        let mut rng = rng_for(0, "w");
        let batch = sampler.sample_b(32, &mut rng);
        assert_eq!(batch.len(), 32);
        for w in &batch {
            assert_eq!(w.states.nrows(), ds.h + 1);
            assert_eq!(w.actions.nrows(), ds.h);
        }
    }

    #[test]
    fn windows_equal_parent_slices() {
        let ds = small_dataset();
        let sampler = WindowSampler::new(&ds).unwrap();
        let mut rng = rng_for(3, "w");
        for _ in 0..50 {
            let widx = rng.random_range(0..sampler.num_windows());
            let w = sampler.window(widx, false);
            let parent = &ds.trajectories[w.traj];
            let s = parent
                .states
                .slice(ndarray::s![w.start..w.start + ds.h + 1, ..]);
            let a = parent
                .actions
                .slice(ndarray::s![w.start..w.start + ds.h, ..]);
            assert_eq!(w.states, s.to_owned());
            assert_eq!(w.actions, a.to_owned());
        }
    }

    #[test]
    fn b_prime_pairs_are_cross_domain() {
        let ds = small_dataset();
        let sampler = WindowSampler::new(&ds).unwrap();
        let mut rng = rng_for(1, "w");
        let batch = sampler.sample_b_prime(64, &mut rng).unwrap();
        assert!(batch.iter().all(|(a, b)| a.domain_id != b.domain_id));
    }

    #[test]
    fn bc_constraints_hold_over_many_samples() {
        let ds = small_dataset();
        let sampler = WindowSampler::new(&ds).unwrap();
        let mut rng = rng_for(2, "w");
        for _ in 0..100 {
            let batch = sampler.sample_bc(100, &mut rng).unwrap();
            for (a, p, n) in &batch {
                assert_eq!(a.domain_id, p.domain_id);
                assert_ne!(a.domain_id, n.domain_id);
            }
        }
    }

    #[test]
    fn normalized_states_have_near_zero_mean() {
        let ds = small_dataset();
        let sampler = WindowSampler::new(&ds).unwrap();
        let mut rng = rng_for(4, "w");
        let mut sum = vec![0.0; ds.obs_dim];
        let mut count = 0usize;
        for _ in 0..300 {
            for w in sampler.sample_b(34, &mut rng) {
                for row in w.states.rows() {
                    for (j, v) in row.iter().enumerate() {
                        sum[j] += v;
                    }
                    count += 1;
                }
            }
        }
        for (j, s) in sum.iter().enumerate() {
            let mean = s / count as f64;
            assert!(mean.abs() < 0.05, "dim {j} mean {mean}");
        }
    }

    #[test]
    fn single_domain_dataset_cannot_produce_pairs() {
        let domains = vec![("source".to_string(), DomainSpec::source())];
        let ds = generate_dataset(&domains, &small_tasks(), 3, 10, 0).unwrap();
        let sampler = WindowSampler::new(&ds).unwrap();
        let mut rng = rng_for(0, "w");
        assert!(sampler.sample_b_prime(4, &mut rng).is_err());
        assert!(sampler.sample_bc(4, &mut rng).is_err());
    }

    #[test]
    fn fewshot_round_robin_and_degenerate_shots() {
        let domain = make_domain(DomainFactor::Wind, DisparityLevel::Low, 1);
        let tasks: Vec<(String, TaskSpec)> = small_tasks()
            .into_iter()
            .chain(std::iter::once((
                "reach_l".to_string(),
                TaskSpec::new(vec![[-1.0, 0.0]], 0.15, 60),
            )))
            .collect();
        let norm = Normalization::identity(env::OBS_DIM, env::ACT_DIM);
        let set = generate_fewshot("wind_low", &domain, &tasks, 5, &norm, 0).unwrap();
        assert_eq!(set.trajectories.len(), 5);
        // Round-robin over 4 tasks: the first task gets 2 demos.
        assert_eq!(set.demos.values().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(set.demos[&tasks[0].0].len(), 2);

        let single = generate_fewshot("wind_low", &domain, &tasks, 1, &norm, 0).unwrap();
        assert_eq!(single.trajectories.len(), 1);

        assert!(generate_fewshot("wind_low", &domain, &tasks, 0, &norm, 0).is_err());
    }

    #[test]
    fn fewshot_file_round_trip() {
        let domain = make_domain(DomainFactor::Noise, DisparityLevel::Medium, 0);
        let tasks = small_tasks();
        let norm = Normalization::identity(env::OBS_DIM, env::ACT_DIM);
        let set = generate_fewshot("noise_med", &domain, &tasks, 4, &norm, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fs.icpd");
        write_fewshot(&set, &p).unwrap();
        let back = read_fewshot(&p).unwrap();
        assert_eq!(back.domain_id, "noise_med");
        assert_eq!(back.demos, set.demos);
        assert_eq!(back.substitution, set.substitution);
        assert_eq!(back.trajectories.len(), set.trajectories.len());
    }

    #[test]
    fn substitution_identity_at_full_fraction() {
        let domain = make_domain(DomainFactor::Wind, DisparityLevel::Low, 1);
        let tasks = small_tasks();
        let norm = Normalization::identity(env::OBS_DIM, env::ACT_DIM);
        let set = generate_fewshot("wind_low", &domain, &tasks, 6, &norm, 0).unwrap();
        let full = task_substitution(&set, 1.0).unwrap();
        assert_eq!(full.demos, set.demos);
        assert!(full.substitution.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn substitution_resolves_to_nearest_task() {
        let domain = DomainSpec::source();
        let tasks = vec![
            (
                "a_near".to_string(),
                TaskSpec::new(vec![[1.0, 0.0]], 0.15, 60),
            ),
            (
                "b_twin".to_string(),
                TaskSpec::new(vec![[0.0, 1.0]], 0.15, 60),
            ),
            (
                "c_query".to_string(),
                TaskSpec::new(vec![[0.0, 1.0]], 0.15, 60),
            ),
        ];
        let norm = Normalization::identity(env::OBS_DIM, env::ACT_DIM);
        let set = generate_fewshot("source", &domain, &tasks, 6, &norm, 0).unwrap();
        // Keep 2 of 3 tasks (sorted ids): a_near and b_twin survive.
        let reduced = task_substitution(&set, 0.6).unwrap();
        assert_eq!(reduced.demos.len(), 2);
        // c_query is an exact twin of b_twin, so it resolves there.
        assert_eq!(reduced.substitution["c_query"], "b_twin");
        let pool = reduced.pool_for_task("c_query").unwrap();
        assert!(pool.iter().all(|t| t.task_id == "b_twin"));
    }

    #[test]
    fn substitution_fraction_eight_percent_keeps_one_of_twelve() {
        let domain = DomainSpec::source();
        let tasks: Vec<(String, TaskSpec)> = (0..12)
            .map(|i| {
                let angle = i as f64 * std::f64::consts::TAU / 12.0;
                (
                    format!("task{i:02}"),
                    TaskSpec::new(vec![[angle.cos(), angle.sin()]], 0.15, 60),
                )
            })
            .collect();
        let norm = Normalization::identity(env::OBS_DIM, env::ACT_DIM);
        let set = generate_fewshot("source", &domain, &tasks, 24, &norm, 0).unwrap();
        let reduced = task_substitution(&set, 0.08).unwrap();
        assert_eq!(reduced.demos.len(), 1);
        // Every query resolves to the single retained task.
        assert!(reduced
            .substitution
            .values()
            .all(|v| v == reduced.demos.keys().next().unwrap()));
    }
}
