//! Synthetic multitask point-mass suite.
//!
//! Each task is an ordered list of 2-D waypoints. The agent commands a
//! velocity, clipped per axis to `v_max`, and the waypoint index advances
//! once the agent is within `success_radius` of the current waypoint.
//! Observations are the position followed by a one-hot of the waypoint
//! index (with one extra slot meaning "all reached"); waypoint locations
//! are not observed, so the task identity carries the layout.

mod dataset;
mod rollout;

pub use dataset::{generate_dataset, load_dataset, save_dataset, Dataset, EpisodeRecord, Trajectory};
pub use rollout::{evaluate_policy, rollout_skill_policy, RolloutMode, RolloutTrace};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_WAYPOINTS: usize = 3;
pub const OBS_DIM: usize = 2 + MAX_WAYPOINTS + 1;
pub const ACTION_DIM: usize = 2;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const MAX_STEPS: usize = 120;
pub const DT: f64 = 0.1;
pub const V_MAX: f64 = 1.0;
/// Half-width of the uniform start-position jitter.
pub const START_JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassTask {
    pub id: usize,
    pub waypoints: Vec<[f64; 2]>,
    pub start: [f64; 2],
    pub success_radius: f64,
    pub max_steps: usize,
    pub dt: f64,
    pub v_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub waypoint: usize,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps_taken: usize,
    pub final_distance: f64,
}

fn in_bounds(p: &[f64; 2]) -> bool {
    p.iter().all(|v| (-1.0..=1.0).contains(v))
}

fn distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PointMassTask {
    pub fn new(id: usize, waypoints: Vec<[f64; 2]>, start: [f64; 2]) -> Result<Self> {
        if waypoints.is_empty() || waypoints.len() > MAX_WAYPOINTS {
            return Err(Error::Validation(format!(
                "task {id} needs 1..={MAX_WAYPOINTS} waypoints"
            )));
        }
        if !waypoints.iter().all(in_bounds) || !in_bounds(&start) {
            return Err(Error::Validation(format!("task {id} leaves [-1, 1]^2")));
        }
        Ok(Self {
            id,
            waypoints,
            start,
            success_radius: SUCCESS_RADIUS,
            max_steps: MAX_STEPS,
            dt: DT,
            v_max: V_MAX,
        })
    }

    pub fn reset(&self, start: [f64; 2]) -> EnvState {
        EnvState {
            pos: start,
            waypoint: 0,
            steps: 0,
        }
    }

    /// Start position with seeded jitter, clamped to the arena.
    pub fn jittered_start(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let mut s = self.start;
        for v in &mut s {
            *v = (*v + rng.random_range(-START_JITTER..=START_JITTER)).clamp(-1.0, 1.0);
        }
        s
    }

    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        let mut obs = vec![0.0; OBS_DIM];
        obs[0] = state.pos[0];
        obs[1] = state.pos[1];
        obs[2 + state.waypoint.min(MAX_WAYPOINTS)] = 1.0;
        obs
    }

    pub fn is_complete(&self, state: &EnvState) -> bool {
        state.waypoint >= self.waypoints.len()
    }

    /// Distance to the current waypoint (the last one once all are reached).
    pub fn distance_to_target(&self, state: &EnvState) -> f64 {
        let wp = state.waypoint.min(self.waypoints.len() - 1);
        distance(&state.pos, &self.waypoints[wp])
    }

    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(Error::Shape(format!(
                "action has {} dims, expected {ACTION_DIM}",
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let mut next = *state;
        for d in 0..2 {
            next.pos[d] += self.dt * action[d].clamp(-self.v_max, self.v_max);
        }
        next.steps += 1;
        if !self.is_complete(&next)
            && distance(&next.pos, &self.waypoints[next.waypoint]) <= self.success_radius
        {
            next.waypoint += 1;
        }
        let success = self.is_complete(&next);
        Ok(StepOutcome {
            state: next,
            done: success || next.steps >= self.max_steps,
            success,
        })
    }
}

/// Velocity of magnitude `min(v_max, distance / dt)` toward the current
/// waypoint; zero once every waypoint has been reached.
pub fn scripted_expert(task: &PointMassTask, state: &EnvState) -> [f64; 2] {
    if task.is_complete(state) {
        return [0.0, 0.0];
    }
    let target = task.waypoints[state.waypoint];
    let delta = [target[0] - state.pos[0], target[1] - state.pos[1]];
    let dist = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    if dist == 0.0 {
        return [0.0, 0.0];
    }
    let speed = task.v_max.min(dist / task.dt);
    [delta[0] / dist * speed, delta[1] / dist * speed]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub pretrain: Vec<PointMassTask>,
    pub heldout: Vec<PointMassTask>,
}

impl TaskSuite {
    /// The fixed suite: 8 pretraining tasks and 2 held-out tasks with their
    /// own layouts. Task ids run 0..10 with held-out tasks last.
    pub fn standard() -> Self {
        Self::generate(8, 2, 0x5EED_0001)
    }

    pub fn generate(n_pretrain: usize, n_heldout: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tasks = Vec::with_capacity(n_pretrain + n_heldout);
        for id in 0..n_pretrain + n_heldout {
            tasks.push(random_task(id, &mut rng));
        }
        let heldout = tasks.split_off(n_pretrain);
        Self {
            pretrain: tasks,
            heldout,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.pretrain.len() + self.heldout.len()
    }

    pub fn task(&self, id: usize) -> Result<&PointMassTask> {
        self.pretrain
            .iter()
            .chain(&self.heldout)
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown task {id}")))
    }
}

fn random_task(id: usize, rng: &mut ChaCha8Rng) -> PointMassTask {
    const MIN_SEGMENT: f64 = 0.5;
    let point = |rng: &mut ChaCha8Rng| [rng.random_range(-0.8..=0.8), rng.random_range(-0.8..=0.8)];
    let start = point(rng);
    let n = rng.random_range(2..=MAX_WAYPOINTS);
    let mut waypoints: Vec<[f64; 2]> = Vec::with_capacity(n);
    while waypoints.len() < n {
        let prev = *waypoints.last().unwrap_or(&start);
        let p = point(rng);
        if distance(&prev, &p) >= MIN_SEGMENT {
            waypoints.push(p);
        }
    }
    PointMassTask::new(id, waypoints, start).expect("generated inside the arena")
}

/// Runs the scripted expert from `start` and returns the trajectory.
pub fn expert_rollout(task: &PointMassTask, start: [f64; 2]) -> Result<(Trajectory, EpisodeResult)> {
    let mut state = task.reset(start);
    let mut observations = vec![task.observe(&state)];
    let mut actions = Vec::new();
    loop {
        let a = scripted_expert(task, &state);
        let out = task.step(&state, &a)?;
        actions.push(a.to_vec());
        state = out.state;
        observations.push(task.observe(&state));
        if out.done {
            let result = EpisodeResult {
                success: out.success,
                steps_taken: state.steps,
                final_distance: task.distance_to_target(&state),
            };
            return Ok((
                Trajectory {
                    task: task.id,
                    observations,
                    actions,
                },
                result,
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_task() -> PointMassTask {
        PointMassTask::new(0, vec![[1.0, 0.0]], [0.0, 0.0]).unwrap()
    }

    #[test]
    fn step_follows_dynamics() {
        let task = line_task();
        let s = task.reset([0.0, 0.0]);
        let out = task.step(&s, &[1.0, 0.0]).unwrap();
        assert!((out.state.pos[0] - 0.1).abs() < 1e-15 && out.state.pos[1] == 0.0);
        let clipped = task.step(&s, &[3.0, 0.0]).unwrap();
        assert_eq!(clipped.state.pos, out.state.pos);
        assert!(task.step(&s, &[1.0]).is_err());
    }

    #[test]
    fn zero_action_only_ends_by_budget() {
        let task = line_task();
        let mut s = task.reset([0.0, 0.0]);
        for i in 0..MAX_STEPS {
            let out = task.step(&s, &[0.0, 0.0]).unwrap();
            assert_eq!(out.state.pos, [0.0, 0.0]);
            assert_eq!(out.done, i + 1 == MAX_STEPS);
            assert!(!out.success);
            s = out.state;
        }
    }

    #[test]
    fn expert_examples() {
        let task = line_task();
        assert_eq!(scripted_expert(&task, &task.reset([0.0, 0.0])), [1.0, 0.0]);
        let at = task.reset([1.0, 0.0]);
        let a = scripted_expert(&task, &at);
        assert!(a.iter().all(|v| v.abs() < 1e-12));
        let out = task.step(&at, &a).unwrap();
        assert_eq!(out.state.waypoint, 1);
        assert!(out.success && out.done);
    }

    #[test]
    fn expert_solves_every_suite_task() {
        let suite = TaskSuite::standard();
        assert_eq!((suite.pretrain.len(), suite.heldout.len()), (8, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for task in suite.pretrain.iter().chain(&suite.heldout) {
            for _ in 0..20 {
                let start = task.jittered_start(&mut rng);
                let (traj, res) = expert_rollout(task, start).unwrap();
                assert!(res.success, "task {} failed", task.id);
                assert!(res.final_distance <= SUCCESS_RADIUS);
                assert_eq!(traj.observations.len(), traj.actions.len() + 1);
                assert!(traj
                    .actions
                    .iter()
                    .all(|a| a.iter().all(|v| v.abs() <= V_MAX)));
            }
        }
    }

    #[test]
    fn observation_layout() {
        let task = line_task();
        let obs = task.observe(&EnvState {
            pos: [0.2, -0.3],
            waypoint: 1,
            steps: 0,
        });
        assert_eq!(obs, vec![0.2, -0.3, 0.0, 1.0, 0.0, 0.0]);
    }
}
