//! Two-layer controller: a shared categorical selector picks a target for
//! each herder, a frozen driving actor steers toward it. Observations may be
//! truncated to the nearest herders and targets so one trained selector runs
//! at any population size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Controller, SelectionObservation};
use crate::nn::MlpParams;
use crate::rl::{self, Action, PolicyKind};
use crate::sim::{RngStream, SimParams, Vec2, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HierarchyError {
    #[error("invalid sensing configuration: {0}")]
    Sensing(String),
    #[error("network does not fit the controller: {0}")]
    Network(String),
}

/// Number of herders (self included) and targets each herder perceives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingConfig {
    pub herders: usize,
    pub targets: usize,
}

impl SensingConfig {
    /// Perceive everything.
    pub fn full(params: &SimParams) -> Self {
        Self {
            herders: params.num_herders,
            targets: params.num_targets,
        }
    }

    pub fn validate(self, params: &SimParams) -> Result<Self, HierarchyError> {
        if !(1..=params.num_herders).contains(&self.herders) {
            return Err(HierarchyError::Sensing(format!(
                "perceived herders must lie in 1..={}, got {}",
                params.num_herders, self.herders
            )));
        }
        if !(1..=params.num_targets).contains(&self.targets) {
            return Err(HierarchyError::Sensing(format!(
                "perceived targets must lie in 1..={}, got {}",
                params.num_targets, self.targets
            )));
        }
        Ok(self)
    }

    pub fn feature_len(&self) -> usize {
        2 * (self.herders + self.targets)
    }
}

/// Self, the nearest other herders, then the nearest targets, all scaled by
/// the arena half-width.
pub fn topological_observe(
    state: &WorldState,
    self_index: usize,
    sensing: &SensingConfig,
    params: &SimParams,
) -> SelectionObservation {
    SelectionObservation::build(
        state,
        self_index,
        sensing.herders,
        sensing.targets,
        params.arena_half_width,
    )
}

/// Whether actions come from the distribution modes or are sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActMode {
    #[default]
    Greedy,
    Sample,
}

/// Per-herder runtime state of the hierarchical controller.
#[derive(Debug, Clone, Default, PartialEq)]
struct HerderSlot {
    hold_counter: usize,
    selection: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct HierarchicalController {
    selector: MlpParams,
    driver: MlpParams,
    sensing: SensingConfig,
    hold: usize,
    mode: ActMode,
    slots: Vec<HerderSlot>,
    decisions: usize,
}

impl HierarchicalController {
    pub fn new(
        selector: MlpParams,
        driver: MlpParams,
        sensing: SensingConfig,
        hold: usize,
    ) -> Result<Self, HierarchyError> {
        if PolicyKind::of(&selector).ok() != Some(PolicyKind::Categorical) {
            return Err(HierarchyError::Network(
                "selector needs a softmax head".into(),
            ));
        }
        if selector.input_len() != sensing.feature_len() || selector.output_len() != sensing.targets
        {
            return Err(HierarchyError::Network(format!(
                "selector {:?} does not match sensing of {} herders and {} targets",
                selector.layer_sizes, sensing.herders, sensing.targets
            )));
        }
        if driver.input_len() != 4 || driver.output_len() != 2 || driver.log_std.is_none() {
            return Err(HierarchyError::Network(format!(
                "driver must be a Gaussian 4 -> 2 actor, has {:?}",
                driver.layer_sizes
            )));
        }
        if hold == 0 {
            return Err(HierarchyError::Sensing("hold must be at least 1".into()));
        }
        Ok(Self {
            selector,
            driver,
            sensing,
            hold,
            mode: ActMode::Greedy,
            slots: Vec::new(),
            decisions: 0,
        })
    }

    pub fn with_mode(mut self, mode: ActMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn sensing(&self) -> SensingConfig {
        self.sensing
    }

    /// Selection-head evaluations since the last reset.
    pub fn decisions(&self) -> usize {
        self.decisions
    }

    /// Current global target of each herder.
    pub fn selections(&self) -> Vec<Option<usize>> {
        self.slots.iter().map(|s| s.selection).collect()
    }

    fn choose(&self, features: &[f64], rng: &mut RngStream) -> usize {
        let action = match self.mode {
            ActMode::Greedy => rl::greedy_action(&self.selector, features),
            ActMode::Sample => rl::sample_action(&self.selector, features, rng).map(|(a, _)| a),
        };
        action
            .expect("selector shape checked at construction")
            .discrete()
    }

    /// Velocity for herder `self_index`. Reads only the world state and this
    /// herder's own slot.
    pub fn act(
        &mut self,
        state: &WorldState,
        self_index: usize,
        params: &SimParams,
        rng: &mut RngStream,
    ) -> Vec2 {
        if self.slots.len() != state.herders.len() {
            self.slots = vec![HerderSlot::default(); state.herders.len()];
        }
        let obs = topological_observe(state, self_index, &self.sensing, params);
        let slot = &self.slots[self_index];
        // A target that left the perceived set forces a fresh decision.
        let visible = slot
            .selection
            .is_some_and(|a| obs.target_order.contains(&a));
        let target = if slot.hold_counter == 0 || !visible {
            let local = self.choose(&obs.features, rng);
            let global = *obs
                .target_order
                .get(local)
                .expect("selector output length equals perceived targets");
            self.decisions += 1;
            self.slots[self_index] = HerderSlot {
                hold_counter: 0,
                selection: Some(global),
            };
            global
        } else {
            slot.selection.expect("visible implies selected")
        };
        let slot = &mut self.slots[self_index];
        slot.hold_counter = (slot.hold_counter + 1) % self.hold;

        let h = state.herders[self_index];
        let t = state.targets[target];
        match self.mode {
            ActMode::Greedy => rl::driving_command(&self.driver, h, t, params)
                .expect("driver shape checked at construction"),
            ActMode::Sample => {
                let obs = crate::env::driving_features(h, t, params.arena_half_width);
                let (a, _) = rl::sample_action(&self.driver, &obs, rng)
                    .expect("driver shape checked at construction");
                match a {
                    Action::Continuous(raw) => rl::scale_action(&raw, params),
                    Action::Discrete(_) => unreachable!("driver is Gaussian"),
                }
            }
        }
    }
}

impl Controller for HierarchicalController {
    fn reset(&mut self, initial: &WorldState, _params: &SimParams) {
        self.slots = vec![HerderSlot::default(); initial.herders.len()];
        self.decisions = 0;
    }

    fn commands(
        &mut self,
        state: &WorldState,
        params: &SimParams,
        rng: &mut RngStream,
    ) -> Vec<Vec2> {
        (0..state.herders.len())
            .map(|i| self.act(state, i, params, rng))
            .collect()
    }
}
