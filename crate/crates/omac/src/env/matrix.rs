//! One-step cooperative matrix game: a single pre-decision state, shared
//! payoff indexed by the joint action, episode ends after one step.

use super::{EnvConfig, JointAction, JointObs, StateId};
use crate::error::{OmacError, Result};

#[derive(Clone, Debug)]
pub struct MatrixGame {
    pub payoff: Vec<f64>,
    pub n_agents: usize,
    pub n_actions: usize,
    pub gamma: f64,
}

impl MatrixGame {
    pub fn new(payoff: Vec<f64>, n_agents: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        if n_agents == 0 || n_actions == 0 {
            return Err(OmacError::Config(
                "matrix game needs at least one agent and one action".into(),
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(OmacError::Config(format!("gamma must be in [0,1), got {gamma}")));
        }
        let expected = n_actions.pow(n_agents as u32);
        if payoff.len() != expected {
            return Err(OmacError::Config(format!(
                "payoff tensor has {} entries, expected {}^{} = {}",
                payoff.len(),
                n_actions,
                n_agents,
                expected
            )));
        }
        if payoff.iter().any(|v| !v.is_finite()) {
            return Err(OmacError::Config("payoff entries must be finite".into()));
        }
        Ok(MatrixGame {
            payoff,
            n_agents,
            n_actions,
            gamma,
        })
    }

    pub fn config(&self) -> EnvConfig {
        EnvConfig::Matrix {
            payoff: self.payoff.clone(),
            n_agents: self.n_agents,
            n_actions: self.n_actions,
            gamma: self.gamma,
        }
    }

    /// Observation of agent i is a fixed one-hot of the agent index.
    pub fn obs_dim(&self) -> usize {
        self.n_agents
    }

    pub fn reset(&self) -> (StateId, JointObs) {
        (StateId(0), self.observe(StateId(0)))
    }

    pub fn observe(&self, s: StateId) -> JointObs {
        if s == StateId::TERMINAL {
            return vec![vec![0.0; self.obs_dim()]; self.n_agents];
        }
        (0..self.n_agents)
            .map(|i| {
                let mut o = vec![0.0; self.n_agents];
                o[i] = 1.0;
                o
            })
            .collect()
    }

    pub fn masks(&self, _s: StateId) -> Vec<Vec<bool>> {
        vec![vec![true; self.n_actions]; self.n_agents]
    }

    pub fn payoff_of(&self, action: &[usize]) -> f64 {
        let idx = action.iter().fold(0, |acc, &a| acc * self.n_actions + a);
        self.payoff[idx]
    }

    pub fn step(&self, _s: StateId, action: &JointAction) -> Result<(StateId, JointObs, f64, bool)> {
        let r = self.payoff_of(&action.0);
        Ok((StateId::TERMINAL, self.observe(StateId::TERMINAL), r, true))
    }
}
