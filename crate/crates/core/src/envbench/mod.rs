//! Toy 2-D manipulation benchmarks: velocity-capped effector kinematics,
//! scripted experts, independent success checks and an evaluation harness.
//!
//! Actions are absolute setpoints `(x, y, grip)`. A command issued at stride
//! `s` is simulated as `s` capped base steps toward the setpoint.

mod checker;
mod expert;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::{Action, Observation};
pub use checker::{check, Status};
pub use expert::ScriptedExpert;

pub const VISUAL_DIM: usize = 6;
pub const PROPRIO_DIM: usize = 3;
pub const ACTION_DIM: usize = 3;

/// Grasp radius for attaching an object to a closed gripper.
pub const GRASP_RADIUS: f64 = 0.03;
/// Distance to the wrong socket at which an insertion counts as failed.
pub const WRONG_SOCKET_RADIUS: f64 = 0.03;
/// Half-width of the door panel in `latch_close`.
pub const DOOR_HALF_WIDTH: f64 = 0.1;
/// How close to the handle the effector must be for a push to register.
pub const HANDLE_RADIUS: f64 = 0.015;
/// How far past the door the setpoint must reach to count as pushing.
pub const PUSH_DEPTH: f64 = 0.03;
/// Consecutive pushing base steps needed to release the latch.
pub const LATCH_STEPS: usize = 12;
/// Shared staging point of `approach_insert`, reached from either side.
pub const STAGING_POINT: Vec2 = [0.5, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ApproachInsert,
    LatchClose,
    TwoStagePickPlace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub success_tolerance: f64,
    pub max_base_steps: usize,
    /// Inclusive range of the expert's pre-precision pause, in base steps.
    pub pause_range: (usize, usize),
    pub precise: bool,
    pub v_max: f64,
    pub stages: Vec<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_tolerance > 0.0) || !(self.v_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "task {}: tolerance and v_max must be positive",
                self.task_id
            )));
        }
        if self.stages.is_empty() || self.pause_range.0 > self.pause_range.1 || self.max_base_steps == 0 {
            return Err(Error::InvalidArgument(format!("task {}: malformed spec", self.task_id)));
        }
        Ok(())
    }
}

fn stages(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Every registered task with its default parameters.
pub fn registered_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            task_id: "approach_insert".into(),
            kind: TaskKind::ApproachInsert,
            success_tolerance: 0.01,
            max_base_steps: 150,
            pause_range: (4, 7),
            precise: true,
            v_max: 0.02,
            stages: stages(&["transit", "staging", "insert"]),
        },
        TaskSpec {
            task_id: "latch_close".into(),
            kind: TaskKind::LatchClose,
            success_tolerance: HANDLE_RADIUS,
            max_base_steps: 160,
            pause_range: (10, 20),
            precise: false,
            v_max: 0.02,
            stages: stages(&["reach", "push", "closed"]),
        },
        TaskSpec {
            task_id: "two_stage_pick_place".into(),
            kind: TaskKind::TwoStagePickPlace,
            success_tolerance: 0.05,
            max_base_steps: 220,
            pause_range: (10, 20),
            precise: false,
            v_max: 0.02,
            stages: stages(&["reach", "carry", "placed"]),
        },
    ]
}

pub fn task_ids() -> Vec<String> {
    registered_tasks().into_iter().map(|t| t.task_id).collect()
}

pub fn task_spec(task_id: &str) -> Result<TaskSpec> {
    registered_tasks()
        .into_iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| Error::UnknownTask {
            task: task_id.to_string(),
            registered: task_ids().join(", "),
        })
}

pub type Vec2 = [f64; 2];

pub(crate) fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Full simulator state. Some fields (target socket, latch counter) are not
/// part of the observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub effector: Vec2,
    pub gripper: f64,
    /// approach_insert: the two sockets; latch_close: the handle;
    /// two_stage_pick_place: the object then the goal.
    pub objects: Vec<Vec2>,
    pub attached: Option<usize>,
    /// Index into the task's stage list; never decreases.
    pub stage: usize,
    pub step: usize,
    /// approach_insert: index of the socket that must receive the peg.
    pub target: usize,
    pub door_open: bool,
    pub latch: usize,
}

impl EnvState {
    pub fn is_finite(&self) -> bool {
        self.effector
            .iter()
            .chain(self.objects.iter().flatten())
            .all(|v| v.is_finite())
            && self.gripper.is_finite()
    }
}

/// One environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    spec: TaskSpec,
    state: EnvState,
    seed: u64,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

impl Env {
    /// Randomized initial state for `seed`.
    pub fn reset(spec: &TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = EnvState {
            effector: [0.5, 0.5],
            gripper: 0.0,
            objects: Vec::new(),
            attached: None,
            stage: 0,
            step: 0,
            target: 0,
            door_open: true,
            latch: 0,
        };
        match spec.kind {
            TaskKind::ApproachInsert => {
                let left = rng.random_bool(0.5);
                let x = if left {
                    uniform(&mut rng, 0.05, 0.25)
                } else {
                    uniform(&mut rng, 0.75, 0.95)
                };
                state.effector = [x, uniform(&mut rng, 0.3, 0.95)];
                state.gripper = 1.0;
                let a = [uniform(&mut rng, 0.2, 0.3), uniform(&mut rng, 0.1, 0.2)];
                let b = [uniform(&mut rng, 0.7, 0.8), uniform(&mut rng, 0.1, 0.2)];
                state.objects = vec![a, b];
                // the peg goes to the socket on the far side from the start
                state.target = if left { 1 } else { 0 };
            }
            TaskKind::LatchClose => {
                state.effector = [uniform(&mut rng, 0.1, 0.9), uniform(&mut rng, 0.05, 0.35)];
                state.objects = vec![[uniform(&mut rng, 0.3, 0.7), uniform(&mut rng, 0.6, 0.8)]];
            }
            TaskKind::TwoStagePickPlace => {
                state.effector = [uniform(&mut rng, 0.05, 0.95), uniform(&mut rng, 0.05, 0.95)];
                let object = [uniform(&mut rng, 0.1, 0.4), uniform(&mut rng, 0.1, 0.9)];
                let goal = [uniform(&mut rng, 0.6, 0.9), uniform(&mut rng, 0.1, 0.9)];
                state.objects = vec![object, goal];
            }
        }
        Ok(Self {
            spec: spec.clone(),
            state,
            seed,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn status(&self) -> Status {
        check(&self.spec, &self.state)
    }

    pub fn observe(&self) -> Observation {
        let s = &self.state;
        let mut visual = vec![0.0; VISUAL_DIM];
        match self.spec.kind {
            TaskKind::ApproachInsert => {
                visual[..2].copy_from_slice(&s.objects[0]);
                visual[2..4].copy_from_slice(&s.objects[1]);
            }
            TaskKind::LatchClose => {
                visual[..2].copy_from_slice(&s.objects[0]);
                visual[2] = if s.door_open { 1.0 } else { 0.0 };
            }
            TaskKind::TwoStagePickPlace => {
                visual[..2].copy_from_slice(&s.objects[0]);
                visual[2..4].copy_from_slice(&s.objects[1]);
                visual[4] = if s.attached.is_some() { 1.0 } else { 0.0 };
            }
        }
        Observation::new(visual, vec![s.effector[0], s.effector[1], s.gripper])
    }

    /// One capped base step toward `command`.
    pub fn step_base(&mut self, command: &[f64]) -> Result<()> {
        if command.len() != ACTION_DIM || command.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("command {command:?}")));
        }
        let spec = &self.spec;
        let s = &mut self.state;
        let setpoint = [command[0].clamp(0.0, 1.0), command[1].clamp(0.0, 1.0)];
        s.gripper = command[2].clamp(0.0, 1.0);

        let before = s.effector;
        let d = dist(before, setpoint);
        let mut next = if d > spec.v_max {
            let k = spec.v_max / d;
            [
                before[0] + (setpoint[0] - before[0]) * k,
                before[1] + (setpoint[1] - before[1]) * k,
            ]
        } else {
            setpoint
        };

        if spec.kind == TaskKind::LatchClose {
            let handle = s.objects[0];
            if s.door_open && (next[0] - handle[0]).abs() <= DOOR_HALF_WIDTH && before[1] <= handle[1] {
                next[1] = next[1].min(handle[1]);
            }
            let pushing = s.door_open && dist(next, handle) < HANDLE_RADIUS && command[1] > handle[1] + PUSH_DEPTH;
            s.latch = if pushing { s.latch + 1 } else { 0 };
            if s.latch > 0 {
                s.stage = s.stage.max(1);
            }
            if s.latch >= LATCH_STEPS {
                s.door_open = false;
                s.stage = 2;
            }
        }
        s.effector = next;

        if spec.kind == TaskKind::TwoStagePickPlace {
            if s.gripper >= 0.5 {
                if s.attached.is_none() && dist(s.effector, s.objects[0]) <= GRASP_RADIUS {
                    s.attached = Some(0);
                    s.stage = s.stage.max(1);
                }
            } else {
                s.attached = None;
            }
            if let Some(i) = s.attached {
                s.objects[i] = s.effector;
            }
            if s.stage >= 1 && s.attached.is_none() && dist(s.objects[0], s.objects[1]) <= spec.success_tolerance {
                s.stage = 2;
            }
        }
        if spec.kind == TaskKind::ApproachInsert {
            if dist(s.effector, STAGING_POINT) < 1e-9 {
                s.stage = s.stage.max(1);
            }
            if s.stage >= 1 && dist(s.effector, s.objects[s.target]) < 0.1 {
                s.stage = 2;
            }
        }
        s.step += 1;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("environment state at step {}", s.step)));
        }
        Ok(())
    }

    /// Executes `command` for `stride` base steps, stopping early once the
    /// episode has terminated. Returns the observation after every simulated
    /// base step.
    pub fn step(&mut self, command: &Action, stride: usize) -> Result<Vec<Observation>> {
        let mut observations = Vec::with_capacity(stride);
        for _ in 0..stride.max(1) {
            if self.status() != Status::Running || self.state.step >= self.spec.max_base_steps {
                break;
            }
            self.step_base(command.as_slice())?;
            observations.push(self.observe());
        }
        Ok(observations)
    }

    pub fn budget_exhausted(&self) -> bool {
        self.state.step >= self.spec.max_base_steps
    }
}

/// One finished episode as seen by the evaluation harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub success: bool,
    pub executed_commands: usize,
    pub base_steps_elapsed: usize,
    /// Set when the rollout aborted (e.g. non-finite state).
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_executed_commands: f64,
    pub mean_base_steps: f64,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(task_id: &str, outcomes: Vec<EpisodeOutcome>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
        }
        let n = outcomes.len() as f64;
        Ok(Self {
            task_id: task_id.to_string(),
            episodes: outcomes.len(),
            success_rate: outcomes.iter().filter(|o| o.success).count() as f64 / n,
            mean_executed_commands: outcomes.iter().map(|o| o.executed_commands as f64).sum::<f64>() / n,
            mean_base_steps: outcomes.iter().map(|o| o.base_steps_elapsed as f64).sum::<f64>() / n,
            outcomes,
        })
    }
}

/// Runs `runner` on episodes with seeds `first_seed..first_seed + episodes`.
/// Runner errors are recorded as aborted failures.
pub fn evaluate(
    spec: &TaskSpec,
    episodes: usize,
    first_seed: u64,
    mut runner: impl FnMut(&TaskSpec, u64) -> Result<EpisodeOutcome>,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be at least 1".into()));
    }
    let outcomes = (0..episodes as u64)
        .map(|i| {
            let seed = first_seed + i;
            runner(spec, seed).unwrap_or_else(|e| EpisodeOutcome {
                seed,
                success: false,
                executed_commands: 0,
                base_steps_elapsed: 0,
                aborted: Some(e.to_string()),
            })
        })
        .collect();
    EvalReport::from_outcomes(&spec.task_id, outcomes)
}

/// Runs the scripted expert at the base rate until termination.
pub fn run_expert(spec: &TaskSpec, seed: u64) -> Result<(Vec<Observation>, Vec<Action>, Env)> {
    let mut env = Env::reset(spec, seed)?;
    let mut expert = ScriptedExpert::new(&env, seed);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    while env.status() == Status::Running && !env.budget_exhausted() {
        let action = expert.act(env.state());
        observations.push(env.observe());
        env.step_base(action.as_slice())?;
        actions.push(action);
    }
    Ok((observations, actions, env))
}

/// Evaluation runner for the scripted expert.
pub fn expert_runner(spec: &TaskSpec, seed: u64) -> Result<EpisodeOutcome> {
    let (_, actions, env) = run_expert(spec, seed)?;
    Ok(EpisodeOutcome {
        seed,
        success: env.status() == Status::Success,
        executed_commands: actions.len(),
        base_steps_elapsed: env.state().step,
        aborted: None,
    })
}
