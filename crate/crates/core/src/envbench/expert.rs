//! Scripted demonstrators: a carrot-following controller over a per-episode
//! plan of travel, pause, grip and push segments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{dist, Env, EnvState, TaskKind, Vec2, STAGING_POINT};
use crate::temporal::Action;

/// Carrot distance, in base steps of travel. Equal to the coarsest stride so
/// that one setpoint covers a full low-frequency command.
pub const LOOKAHEAD: usize = 4;

/// Lateral wiggle amplitude bound during transit.
const WIGGLE: f64 = 0.05;

/// Standard deviation of per-step setpoint noise in free-space travel. It
/// ramps up over `NOISE_FADE` beyond a quiet zone of radius `QUIET_RADIUS`
/// around the segment's endpoint.
pub const TRANSIT_NOISE: f64 = 0.05;
pub const QUIET_RADIUS: f64 = 0.05;
pub const NOISE_FADE: f64 = 0.1;

/// Commanded gripper levels for open and closed, each jittered per step by up
/// to `GRIP_JITTER`. Both stay clear of the 0.5 switching point.
pub const GRIP_OPEN: f64 = 0.2;
pub const GRIP_CLOSED: f64 = 0.8;
pub const GRIP_JITTER: f64 = 0.1;

#[derive(Clone, Debug)]
enum Segment {
    /// `noisy` travel gets per-step setpoint noise outside the quiet zone.
    Travel {
        path: Vec<Vec2>,
        grip: f64,
        noisy: bool,
    },
    Pause {
        steps: usize,
        grip: f64,
    },
    Grip {
        steps: usize,
        grip: f64,
    },
    Push {
        setpoint: Vec2,
        grip: f64,
    },
}

#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    segments: Vec<Segment>,
    current: usize,
    progress: usize,
    counter: usize,
    rng: ChaCha8Rng,
}

/// Length of the clean, straight final approach to grasp and place targets.
pub const APPROACH_DISTANCE: f64 = 0.12;

/// The point `reach` short of `target` on the line from `from`, or `from`
/// itself when it is already that close.
fn pre_point(target: Vec2, from: Vec2, reach: f64) -> Vec2 {
    let d = dist(from, target);
    if d <= reach {
        return from;
    }
    let k = reach / d;
    [
        target[0] + (from[0] - target[0]) * k,
        target[1] + (from[1] - target[1]) * k,
    ]
}

/// Polyline from `from` to `to` with a random lateral wiggle that vanishes at
/// both ends, resampled so consecutive points are `spacing` apart.
fn wiggly_path(from: Vec2, to: Vec2, spacing: f64, rng: &mut impl Rng) -> Vec<Vec2> {
    let amp = rng.random_range(-WIGGLE..WIGGLE);
    let freq = rng.random_range(0.5..1.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    curve_path(from, to, spacing, amp, freq, phase)
}

fn curve_path(from: Vec2, to: Vec2, spacing: f64, amp: f64, freq: f64, phase: f64) -> Vec<Vec2> {
    let len = dist(from, to);
    if len < 1e-12 {
        return vec![to];
    }
    let normal = [-(to[1] - from[1]) / len, (to[0] - from[0]) / len];
    let dense = 400;
    let mut curve: Vec<Vec2> = (0..=dense)
        .map(|i| {
            let u = i as f64 / dense as f64;
            let off = amp * (std::f64::consts::PI * u).sin() * (std::f64::consts::TAU * freq * u + phase).sin();
            [
                (from[0] + u * (to[0] - from[0]) + off * normal[0]).clamp(0.0, 1.0),
                (from[1] + u * (to[1] - from[1]) + off * normal[1]).clamp(0.0, 1.0),
            ]
        })
        .collect();
    curve[dense] = to;
    let mut path = vec![from];
    let mut last = from;
    for &p in &curve[1..] {
        if dist(last, p) >= spacing {
            path.push(p);
            last = p;
        }
    }
    if dist(last, to) > 1e-12 {
        path.push(to);
    }
    path
}

impl ScriptedExpert {
    /// Plans the episode from the environment's initial state. The plan's
    /// random parameters derive from `seed` on a stream separate from the
    /// scene randomization.
    pub fn new(env: &Env, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let spec = env.spec();
        let s = env.state();
        let v = spec.v_max;
        let (lo, hi) = spec.pause_range;
        let pause = rng.random_range(lo..=hi);
        let noisy = |from, to, rng: &mut ChaCha8Rng| wiggly_path(from, to, v, rng);
        let clean = |from, to| curve_path(from, to, v, 0.0, 0.0, 0.0);
        let segments = match spec.kind {
            TaskKind::ApproachInsert => {
                let target = s.objects[s.target];
                vec![
                    Segment::Travel {
                        path: noisy(s.effector, STAGING_POINT, &mut rng),
                        grip: 1.0,
                        noisy: true,
                    },
                    Segment::Pause {
                        steps: pause,
                        grip: 1.0,
                    },
                    Segment::Travel {
                        path: clean(STAGING_POINT, target),
                        grip: 1.0,
                        noisy: false,
                    },
                ]
            }
            TaskKind::LatchClose => {
                let handle = s.objects[0];
                vec![
                    Segment::Travel {
                        path: noisy(s.effector, handle, &mut rng),
                        grip: 0.0,
                        noisy: true,
                    },
                    Segment::Pause {
                        steps: pause,
                        grip: 0.0,
                    },
                    Segment::Push {
                        setpoint: [handle[0], handle[1] + 2.0 * super::PUSH_DEPTH],
                        grip: 0.0,
                    },
                ]
            }
            TaskKind::TwoStagePickPlace => {
                let (object, goal) = (s.objects[0], s.objects[1]);
                let pre_grasp = pre_point(object, s.effector, APPROACH_DISTANCE);
                let pre_place = pre_point(goal, object, APPROACH_DISTANCE);
                // closed on approach; the object attaches on arrival
                vec![
                    Segment::Travel {
                        path: noisy(s.effector, pre_grasp, &mut rng),
                        grip: 1.0,
                        noisy: true,
                    },
                    Segment::Travel {
                        path: clean(pre_grasp, object),
                        grip: 1.0,
                        noisy: false,
                    },
                    Segment::Travel {
                        path: noisy(object, pre_place, &mut rng),
                        grip: 1.0,
                        noisy: true,
                    },
                    Segment::Pause {
                        steps: pause,
                        grip: 1.0,
                    },
                    Segment::Travel {
                        path: clean(pre_place, goal),
                        grip: 1.0,
                        noisy: false,
                    },
                    Segment::Grip { steps: 1, grip: 0.0 },
                ]
            }
        };
        Self {
            segments,
            current: 0,
            progress: 0,
            counter: 0,
            rng,
        }
    }

    fn grip_command(&mut self, closed: bool) -> f64 {
        let level = if closed { GRIP_CLOSED } else { GRIP_OPEN };
        level + self.rng.random_range(-GRIP_JITTER..=GRIP_JITTER)
    }

    fn advance(&mut self) {
        self.current += 1;
        self.progress = 0;
        self.counter = 0;
    }

    /// Next base-rate command. Pauses and the end of the plan emit the
    /// current effector position (a zero-delta command).
    pub fn act(&mut self, state: &EnvState) -> Action {
        let hold = |grip: f64| Action(vec![state.effector[0], state.effector[1], grip]);
        loop {
            let Some(seg) = self.segments.get(self.current) else {
                let g = self.grip_command(state.gripper >= 0.5);
                return hold(g);
            };
            match seg {
                Segment::Travel { path, grip, noisy } => {
                    let end = *path.last().unwrap();
                    if dist(state.effector, end) < 1e-9 {
                        self.advance();
                        continue;
                    }
                    let window = (self.progress + 2 * LOOKAHEAD + 1).min(path.len());
                    let nearest = (self.progress..window)
                        .min_by(|&a, &b| dist(path[a], state.effector).total_cmp(&dist(path[b], state.effector)))
                        .unwrap_or(self.progress);
                    self.progress = nearest;
                    let carrot = path[(nearest + LOOKAHEAD).min(path.len() - 1)];
                    let closed = *grip >= 0.5;
                    let sigma = f64::from(u8::from(*noisy))
                        * TRANSIT_NOISE
                        * ((dist(state.effector, end) - QUIET_RADIUS) / NOISE_FADE).clamp(0.0, 1.0);
                    let noise = Normal::new(0.0, sigma).expect("finite sigma");
                    let x = (carrot[0] + noise.sample(&mut self.rng)).clamp(0.0, 1.0);
                    let y = (carrot[1] + noise.sample(&mut self.rng)).clamp(0.0, 1.0);
                    return Action(vec![x, y, self.grip_command(closed)]);
                }
                Segment::Pause { steps, grip } | Segment::Grip { steps, grip } => {
                    if self.counter >= *steps {
                        self.advance();
                        continue;
                    }
                    self.counter += 1;
                    let closed = *grip >= 0.5;
                    return hold(self.grip_command(closed));
                }
                Segment::Push { setpoint, grip } => {
                    if !state.door_open {
                        self.advance();
                        continue;
                    }
                    let (setpoint, closed) = (*setpoint, *grip >= 0.5);
                    return Action(vec![setpoint[0], setpoint[1], self.grip_command(closed)]);
                }
            }
        }
    }

    /// True while the plan is inside a pause segment.
    pub fn pausing(&self) -> bool {
        matches!(self.segments.get(self.current), Some(Segment::Pause { .. }))
    }

    pub fn finished(&self) -> bool {
        self.current >= self.segments.len()
    }
}

#[cfg(test)]
mod tests {
    use super::super::{run_expert, task_ids, task_spec, Env};
    use super::*;

    #[test]
    fn pause_emits_zero_delta_commands() {
        for id in task_ids() {
            let spec = task_spec(&id).unwrap();
            let mut env = Env::reset(&spec, 5).unwrap();
            let mut expert = ScriptedExpert::new(&env, 5);
            let mut paused = 0;
            while env.status() == super::super::Status::Running && !env.budget_exhausted() {
                let a = expert.act(env.state());
                if expert.pausing() || (paused > 0 && expert.pausing()) {
                    assert_eq!(&a.0[..2], &env.state().effector[..]);
                    paused += 1;
                }
                env.step_base(a.as_slice()).unwrap();
            }
            assert!(paused >= spec.pause_range.0, "{id}: paused {paused}");
        }
    }

    #[test]
    fn holds_after_success() {
        for id in task_ids() {
            let spec = task_spec(&id).unwrap();
            let (_, _, env) = run_expert(&spec, 7).unwrap();
            let mut replay = Env::reset(&spec, 7).unwrap();
            let mut expert = ScriptedExpert::new(&replay, 7);
            while replay.state().step < env.state().step {
                let a = expert.act(replay.state());
                replay.step_base(a.as_slice()).unwrap();
            }
            assert_eq!(replay.status(), super::super::Status::Success, "{id}");
            // keep driving past success until the plan runs out
            for _ in 0..40 {
                if expert.finished() {
                    break;
                }
                let a = expert.act(replay.state());
                replay.step_base(a.as_slice()).unwrap();
            }
            let a = expert.act(replay.state());
            assert!(expert.finished(), "{id}");
            assert_eq!(&a.0[..2], &replay.state().effector[..]);
        }
    }

    #[test]
    fn path_steps_never_exceed_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let from = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let to = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let p = wiggly_path(from, to, 0.02, &mut rng);
            assert_eq!(*p.last().unwrap(), to);
            for w in p.windows(2) {
                assert!(dist(w[0], w[1]) < 0.04);
            }
        }
    }
}
