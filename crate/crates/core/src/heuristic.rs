//! Model-based baseline: drive a target from a fixed standoff behind it, and
//! pick the furthest target among those closer to oneself than to any other
//! herder.

use serde::{Deserialize, Serialize};

use crate::env::Controller;
use crate::sim::{RngStream, SimParams, Vec2, WorldState, OVERLAP_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicParams {
    /// Distance kept behind the target, on the side away from the goal.
    pub standoff: f64,
    pub proportional_gain: f64,
    /// Targets further than `engage_fraction * goal_radius` from the goal
    /// centre are eligible for selection. Values below 1 make herders push
    /// back drifting targets before they leave the goal.
    pub engage_fraction: f64,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        Self {
            standoff: 1.25,
            proportional_gain: 10.0,
            engage_fraction: 0.9,
        }
    }
}

impl HeuristicParams {
    pub fn validate(self) -> Result<Self, String> {
        if !(self.standoff.is_finite() && self.standoff > 0.0) {
            return Err(format!("standoff must be > 0, got {}", self.standoff));
        }
        if !(self.proportional_gain.is_finite() && self.proportional_gain > 0.0) {
            return Err(format!(
                "proportional_gain must be > 0, got {}",
                self.proportional_gain
            ));
        }
        if !(self.engage_fraction.is_finite() && self.engage_fraction > 0.0) {
            return Err(format!(
                "engage_fraction must be > 0, got {}",
                self.engage_fraction
            ));
        }
        Ok(self)
    }
}

/// Proportional approach to the point `δ` behind the target, saturated at `v_H`.
pub fn heuristic_drive(h: Vec2, t: Vec2, params: &SimParams, hp: &HeuristicParams) -> Vec2 {
    let r = t.norm();
    let behind = if r < OVERLAP_EPS {
        t
    } else {
        t + t * (hp.standoff / r)
    };
    ((behind - h) * hp.proportional_gain).saturate(params.herder_max_speed)
}

/// Index of the closest herder to `p`, ties toward the lower index.
fn closest_herder(p: Vec2, herders: &[Vec2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &h) in herders.iter().enumerate() {
        let d = p.distance(h);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Target herder `self_index` should chase, or `None` when every target it is
/// responsible for lies within the engagement radius.
pub fn heuristic_select(
    state: &WorldState,
    self_index: usize,
    params: &SimParams,
    hp: &HeuristicParams,
) -> Option<usize> {
    let engage = hp.engage_fraction * params.goal_radius;
    let mut best: Option<(usize, f64)> = None;
    for (a, &t) in state.targets.iter().enumerate() {
        let r = t.norm();
        if r <= engage || closest_herder(t, &state.herders) != self_index {
            continue;
        }
        if best.is_none_or(|(_, br)| r > br) {
            best = Some((a, r));
        }
    }
    best.map(|(a, _)| a)
}

/// Selection rule plus driving rule for every herder.
#[derive(Debug, Clone, Default)]
pub struct HeuristicController {
    pub params: HeuristicParams,
}

impl HeuristicController {
    pub fn new(params: HeuristicParams) -> Self {
        Self { params }
    }
}

impl Controller for HeuristicController {
    fn commands(
        &mut self,
        state: &WorldState,
        params: &SimParams,
        _rng: &mut RngStream,
    ) -> Vec<Vec2> {
        (0..state.herders.len())
            .map(|i| match heuristic_select(state, i, params, &self.params) {
                Some(a) => {
                    heuristic_drive(state.herders[i], state.targets[a], params, &self.params)
                }
                None => Vec2::ZERO,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(herders: &[(f64, f64)], targets: &[(f64, f64)]) -> WorldState {
        WorldState {
            herders: herders.iter().map(|&(x, y)| Vec2::new(x, y)).collect(),
            targets: targets.iter().map(|&(x, y)| Vec2::new(x, y)).collect(),
            step_index: 0,
        }
    }

    #[test]
    fn drive_examples() {
        let p = SimParams::default();
        let hp = |standoff| HeuristicParams {
            standoff,
            ..HeuristicParams::default()
        };
        let u = heuristic_drive(Vec2::new(11.0, 0.0), Vec2::new(10.0, 0.0), &p, &hp(1.0));
        assert!(u.norm() < 1e-12);
        let u = heuristic_drive(Vec2::new(11.0, 5.0), Vec2::new(10.0, 0.0), &p, &hp(1.0));
        assert!((u.x).abs() < 1e-12 && (u.y + 8.0).abs() < 1e-12);
        let u = heuristic_drive(Vec2::new(0.0, 4.0), Vec2::new(0.0, 3.0), &p, &hp(1.0));
        assert!(u.norm() < 1e-12);
        // Target at the origin: the standoff point collapses onto it.
        let u = heuristic_drive(Vec2::new(0.1, 0.0), Vec2::ZERO, &p, &hp(1.0));
        assert!((u.x + 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_partitions_targets() {
        let hp = HeuristicParams::default();
        let p = SimParams::nominal(2, 3);
        let s = world(
            &[(0.0, 10.0), (0.0, -10.0)],
            &[(0.0, 8.0), (0.0, -6.0), (10.0, 1.0)],
        );
        assert_eq!(heuristic_select(&s, 0, &p, &hp), Some(2));
        assert_eq!(heuristic_select(&s, 1, &p, &hp), Some(1));
    }

    #[test]
    fn select_single_herder_argmax() {
        let hp = HeuristicParams::default();
        let p = SimParams {
            goal_radius: 1.0,
            ..SimParams::nominal(1, 3)
        };
        let s = world(&[(0.0, 0.0)], &[(3.0, 0.0), (0.0, 9.0), (0.0, -6.0)]);
        assert_eq!(heuristic_select(&s, 0, &p, &hp), Some(1));
    }

    #[test]
    fn select_nothing_when_all_contained() {
        let hp = HeuristicParams::default();
        let p = SimParams::nominal(1, 3);
        let s = world(&[(10.0, 0.0)], &[(1.0, 0.0), (0.0, 4.5), (-2.0, 2.0)]);
        assert_eq!(heuristic_select(&s, 0, &p, &hp), None);
        let cmds = HeuristicController::default().commands(&s, &p, &mut RngStream::new(0));
        assert_eq!(cmds, vec![Vec2::ZERO]);
    }

    #[test]
    fn drifting_target_inside_buffer_is_engaged() {
        let hp = HeuristicParams::default();
        let p = SimParams::nominal(1, 1);
        // Inside the buffered goal but beyond the engagement radius.
        let s = world(&[(10.0, 0.0)], &[(0.0, 5.2)]);
        assert_eq!(heuristic_select(&s, 0, &p, &hp), Some(0));
        let strict = HeuristicParams {
            engage_fraction: 1.1,
            ..hp
        };
        assert_eq!(heuristic_select(&s, 0, &p, &strict), None);
    }

    #[test]
    fn equidistant_target_goes_to_lower_index() {
        let hp = HeuristicParams::default();
        let p = SimParams::nominal(2, 1);
        let s = world(&[(10.0, 5.0), (10.0, -5.0)], &[(10.0, 0.0)]);
        assert_eq!(heuristic_select(&s, 0, &p, &hp), Some(0));
        assert_eq!(heuristic_select(&s, 1, &p, &hp), None);
    }

    #[test]
    fn radius_ties_go_to_lower_target_index() {
        let hp = HeuristicParams::default();
        let p = SimParams::nominal(1, 2);
        let s = world(&[(0.0, 0.0)], &[(0.0, 9.0), (9.0, 0.0)]);
        assert_eq!(heuristic_select(&s, 0, &p, &hp), Some(0));
    }
}
