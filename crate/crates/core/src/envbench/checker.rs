//! Success checks computed from the simulator state alone.

use serde::{Deserialize, Serialize};

use super::{dist, EnvState, TaskKind, TaskSpec, WRONG_SOCKET_RADIUS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Success,
    Failure,
}

pub fn check(spec: &TaskSpec, state: &EnvState) -> Status {
    match spec.kind {
        TaskKind::ApproachInsert => {
            let target = state.objects[state.target];
            let other = state.objects[1 - state.target];
            if dist(state.effector, target) <= spec.success_tolerance {
                Status::Success
            } else if dist(state.effector, other) <= WRONG_SOCKET_RADIUS {
                Status::Failure
            } else {
                Status::Running
            }
        }
        TaskKind::LatchClose => {
            if state.door_open {
                Status::Running
            } else {
                Status::Success
            }
        }
        TaskKind::TwoStagePickPlace => {
            let placed = dist(state.objects[0], state.objects[1]) <= spec.success_tolerance;
            if placed && state.attached.is_none() && state.gripper < 0.5 {
                Status::Success
            } else {
                Status::Running
            }
        }
    }
}
