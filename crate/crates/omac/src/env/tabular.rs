//! Exhaustive enumeration of an environment into a tabular model suitable
//! for exact dynamic programming.

use std::collections::{BTreeMap, VecDeque};

use super::{EnvSpec, JointObs, StateId};
use crate::error::{OmacError, Result};

pub const DEFAULT_ENUM_CAP: usize = 1_000_000;

/// Complete tables over all reachable states. State index 0.. refers to the
/// `states` vector; terminal absorbing states are flagged and carry no
/// outgoing transitions.
#[derive(Clone, Debug)]
pub struct TabularModel {
    pub states: Vec<StateId>,
    pub index: BTreeMap<StateId, usize>,
    pub n_agents: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// transitions[s][joint_action] -> list of (next state index, probability);
    /// empty for illegal (masked) joint actions and terminal states.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub rewards: Vec<Vec<f64>>,
    pub masks: Vec<Vec<Vec<bool>>>,
    pub terminal: Vec<bool>,
    /// Initial distribution as (state index, probability).
    pub initial: Vec<(usize, f64)>,
    pub observations: Vec<JointObs>,
}

impl TabularModel {
    pub fn joint_action_count(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    pub fn joint_action_index(&self, action: &[usize]) -> usize {
        action.iter().fold(0, |acc, &a| acc * self.n_actions + a)
    }

    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents];
        for i in (0..self.n_agents).rev() {
            out[i] = index % self.n_actions;
            index /= self.n_actions;
        }
        out
    }

    /// A joint action is legal when every component passes its agent's mask.
    pub fn joint_action_legal(&self, s: usize, ja: usize) -> bool {
        self.unravel(ja)
            .iter()
            .enumerate()
            .all(|(i, &a)| self.masks[s][i][a])
    }

    pub fn nonterminal_count(&self) -> usize {
        self.terminal.iter().filter(|&&t| !t).count()
    }

    /// Each transition row over next states must sum to 1 within 1e-9.
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.states.len() {
            if self.terminal[s] {
                continue;
            }
            for ja in 0..self.joint_action_count() {
                if !self.joint_action_legal(s, ja) {
                    continue;
                }
                let total: f64 = self.transitions[s][ja].iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(OmacError::Env(format!(
                        "transition row for state {s} action {ja} sums to {total}"
                    )));
                }
                if !self.rewards[s][ja].is_finite() {
                    return Err(OmacError::Env(format!(
                        "non-finite reward at state {s} action {ja}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn enumerate(env: &EnvSpec, cap: usize) -> Result<TabularModel> {
    let n_agents = env.n_agents();
    let n_actions = env.n_actions();
    let n_joint = env.joint_action_count();

    let initial_states: Vec<StateId> = match env {
        EnvSpec::Matrix(_) => vec![StateId(0)],
        EnvSpec::Grid(g) => g.initial_states(),
    };

    let mut states: Vec<StateId> = Vec::new();
    let mut index: BTreeMap<StateId, usize> = BTreeMap::new();
    let mut queue: VecDeque<StateId> = VecDeque::new();
    let intern = |s: StateId,
                      states: &mut Vec<StateId>,
                      index: &mut BTreeMap<StateId, usize>,
                      queue: &mut VecDeque<StateId>|
     -> usize {
        if let Some(&i) = index.get(&s) {
            return i;
        }
        let i = states.len();
        states.push(s);
        index.insert(s, i);
        if s != StateId::TERMINAL {
            queue.push_back(s);
        }
        i
    };

    for &s in &initial_states {
        intern(s, &mut states, &mut index, &mut queue);
    }

    let mut transitions: Vec<Vec<Vec<(usize, f64)>>> = Vec::new();
    let mut rewards: Vec<Vec<f64>> = Vec::new();
    let mut done_flags: Vec<(usize, StateId)> = Vec::new();

    while let Some(s) = queue.pop_front() {
        let si = index[&s];
        while transitions.len() <= si {
            transitions.push(vec![Vec::new(); n_joint]);
            rewards.push(vec![0.0; n_joint]);
        }
        let masks = env.masks(s);
        for ja in 0..n_joint {
            let action = env.unravel_joint_action(ja);
            if action.0.iter().enumerate().any(|(i, &a)| !masks[i][a]) {
                continue;
            }
            // Both built-in tasks have deterministic transitions, so a single
            // probe step recovers the full next-state distribution.
            let (ns, r) = deterministic_probe(env, s, &action)?;
            let ni = intern(ns, &mut states, &mut index, &mut queue);
            transitions[si][ja] = vec![(ni, 1.0)];
            rewards[si][ja] = r;
            if (states.len()) * n_joint > cap {
                return Err(OmacError::EnumerationTooLarge {
                    size: states.len() * n_joint,
                    cap,
                });
            }
        }
        done_flags.push((si, s));
    }

    let n = states.len();
    while transitions.len() < n {
        transitions.push(vec![Vec::new(); n_joint]);
        rewards.push(vec![0.0; n_joint]);
    }
    let terminal: Vec<bool> = states.iter().map(|&s| env.is_terminal(s)).collect();
    let masks: Vec<Vec<Vec<bool>>> = states.iter().map(|&s| env.masks(s)).collect();
    let observations: Vec<JointObs> = states.iter().map(|&s| env.observe(s)).collect();
    let p0 = 1.0 / initial_states.len() as f64;
    let initial: Vec<(usize, f64)> = initial_states.iter().map(|s| (index[s], p0)).collect();

    let model = TabularModel {
        states,
        index,
        n_agents,
        n_actions,
        gamma: env.gamma(),
        transitions,
        rewards,
        masks,
        terminal,
        initial,
        observations,
    };
    model.validate()?;
    Ok(model)
}

fn deterministic_probe(
    env: &EnvSpec,
    s: StateId,
    action: &super::JointAction,
) -> Result<(StateId, f64)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    let (ns, _, r, _) = env.step(s, action, &mut rng)?;
    Ok((ns, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;

    #[test]
    fn matrix_game_has_one_decision_state() {
        let env = EnvSpec::from_config(&EnvConfig::default_matrix()).unwrap();
        let model = env.enumerate(DEFAULT_ENUM_CAP).unwrap();
        assert_eq!(model.nonterminal_count(), 1);
        assert_eq!(model.joint_action_count(), 4);
    }

    #[test]
    fn two_by_two_grid_state_count() {
        // 2x2 grid, 1 agent, horizon 2: nonterminal states = 4 positions x 2 steps
        let cfg = EnvConfig::Grid {
            width: 2,
            height: 2,
            n_agents: 1,
            n_landmarks: 1,
            horizon: 2,
            radius: 1,
            gamma: 0.99,
        };
        let env = EnvSpec::from_config(&cfg).unwrap();
        let model = env.enumerate(DEFAULT_ENUM_CAP).unwrap();
        assert_eq!(model.nonterminal_count(), 8);
    }

    #[test]
    fn cap_exceeded_is_an_error() {
        let env = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        let err = env.enumerate(10).unwrap_err();
        assert!(matches!(
            err,
            crate::error::OmacError::EnumerationTooLarge { .. }
        ));
    }

    #[test]
    fn sampled_steps_match_tables() {
        use crate::env::JointAction;
        use rand::{Rng, SeedableRng};
        let env = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        let model = env.enumerate(DEFAULT_ENUM_CAP).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let mut checked = 0;
        'outer: for seed in 0..2000u64 {
            let (mut s, _) = env.reset(seed);
            loop {
                let si = model.index[&s];
                let masks = env.masks(s);
                let action: Vec<usize> = masks
                    .iter()
                    .map(|m| loop {
                        let a = rng.gen_range(0..m.len());
                        if m[a] {
                            break a;
                        }
                    })
                    .collect();
                let ja = model.joint_action_index(&action);
                let (ns, _, r, done) = env.step(s, &JointAction(action), &mut rng).unwrap();
                // deterministic env: the table row must be exactly this transition
                assert_eq!(model.transitions[si][ja], vec![(model.index[&ns], 1.0)]);
                assert_eq!(model.rewards[si][ja], r);
                checked += 1;
                if checked >= 10_000 {
                    break 'outer;
                }
                if done {
                    break;
                }
                s = ns;
            }
        }
        assert!(checked >= 10_000);
    }
}
