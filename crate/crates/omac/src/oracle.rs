//! Exact brute-force references: support-constrained optimal values by
//! dynamic programming, exact expectiles of discrete distributions, and
//! exhaustive joint argmax over an assembled Q_tot. These are the ground
//! truth the learned models are compared against.

use std::collections::{BTreeSet, VecDeque};

use crate::cvf::CvfModel;
use crate::env::TabularModel;
use crate::env::{JointAction, JointObs};
use crate::error::{OmacError, Result};

pub const VI_TOL: f64 = 1e-10;
pub const JOINT_ACTION_CAP: usize = 1_000_000;

/// Per-state sets of supported joint-action indices, aligned with the
/// state indexing of a `TabularModel`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportSet {
    pub per_state: Vec<BTreeSet<usize>>,
}

impl SupportSet {
    pub fn empty(model: &TabularModel) -> Self {
        SupportSet {
            per_state: vec![BTreeSet::new(); model.states.len()],
        }
    }

    /// Every legal joint action of every nonterminal state.
    pub fn full(model: &TabularModel) -> Self {
        let mut per_state = vec![BTreeSet::new(); model.states.len()];
        for s in 0..model.states.len() {
            if model.terminal[s] {
                continue;
            }
            for ja in 0..model.joint_action_count() {
                if model.joint_action_legal(s, ja) {
                    per_state[s].insert(ja);
                }
            }
        }
        SupportSet { per_state }
    }

    pub fn insert(&mut self, state: usize, joint_action: usize) {
        self.per_state[state].insert(joint_action);
    }

    pub fn total_pairs(&self) -> usize {
        self.per_state.iter().map(|s| s.len()).sum()
    }
}

/// Optimal values where the max at each state ranges only over the
/// supported joint actions. `q[s][ja]` is NaN for unsupported or illegal
/// pairs; `v` is 0 for terminal and support-unreachable states.
#[derive(Clone, Debug)]
pub struct QStarTables {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub reachable: Vec<bool>,
    pub iterations: usize,
}

impl QStarTables {
    /// Lowest-index supported joint action attaining V*(s), if any.
    pub fn greedy_action(&self, model: &TabularModel, s: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for ja in 0..model.joint_action_count() {
            let q = self.q[s][ja];
            if q.is_nan() {
                continue;
            }
            if best.map_or(true, |(_, bq)| q > bq) {
                best = Some((ja, q));
            }
        }
        best.map(|(ja, _)| ja)
    }
}

/// States reachable from the initial distribution when only supported
/// joint actions may be taken.
fn support_reachable(model: &TabularModel, support: &SupportSet) -> Result<Vec<bool>> {
    let n = model.states.len();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &(s, _) in &model.initial {
        if !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(s) = queue.pop_front() {
        if model.terminal[s] {
            continue;
        }
        if support.per_state[s].is_empty() {
            return Err(OmacError::Oracle(format!(
                "state index {s} is reachable under the support but has no supported joint action"
            )));
        }
        for &ja in &support.per_state[s] {
            if !model.joint_action_legal(s, ja) {
                return Err(OmacError::Oracle(format!(
                    "support contains illegal joint action {ja} at state index {s}"
                )));
            }
            for &(ns, _) in &model.transitions[s][ja] {
                if !seen[ns] {
                    seen[ns] = true;
                    queue.push_back(ns);
                }
            }
        }
    }
    Ok(seen)
}

/// Value iteration restricted to the support, run to a fixed point within
/// `VI_TOL`. Terminal states have value zero.
pub fn support_q_star(model: &TabularModel, support: &SupportSet) -> Result<QStarTables> {
    if support.per_state.len() != model.states.len() {
        return Err(OmacError::Oracle(format!(
            "support covers {} states, model has {}",
            support.per_state.len(),
            model.states.len()
        )));
    }
    let reachable = support_reachable(model, support)?;
    let n = model.states.len();
    let nj = model.joint_action_count();
    let mut v = vec![0.0; n];
    let max_iters = 1_000_000;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if model.terminal[s] || !reachable[s] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for &ja in &support.per_state[s] {
                let mut q = model.rewards[s][ja];
                for &(ns, p) in &model.transitions[s][ja] {
                    q += model.gamma * p * v[ns];
                }
                if q > best {
                    best = q;
                }
            }
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta <= VI_TOL {
            break;
        }
        if iterations >= max_iters {
            return Err(OmacError::Oracle(format!(
                "value iteration did not reach tolerance {VI_TOL} in {max_iters} sweeps"
            )));
        }
    }
    let mut q = vec![vec![f64::NAN; nj]; n];
    for s in 0..n {
        if model.terminal[s] || !reachable[s] {
            continue;
        }
        for &ja in &support.per_state[s] {
            let mut val = model.rewards[s][ja];
            for &(ns, p) in &model.transitions[s][ja] {
                val += model.gamma * p * v[ns];
            }
            q[s][ja] = val;
        }
    }
    Ok(QStarTables {
        v,
        q,
        reachable,
        iterations,
    })
}

/// The tau-expectile of a finite discrete distribution: the unique
/// minimizer of E[L2^tau(x - m)], found by bisection on the monotone
/// stationarity condition sum_k p_k |tau - 1{x_k < m}| (x_k - m) = 0.
pub fn expectile_of_discrete(values: &[f64], probs: &[f64], tau: f64) -> Result<f64> {
    crate::numcore::expectile::validate_tau(tau)?;
    if values.is_empty() || values.len() != probs.len() {
        return Err(OmacError::Oracle(format!(
            "expectile needs matching non-empty values/probs, got {}/{}",
            values.len(),
            probs.len()
        )));
    }
    let mass: f64 = probs.iter().sum();
    if (mass - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
        return Err(OmacError::Oracle(format!(
            "probabilities must be nonnegative and sum to 1, got sum {mass}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(OmacError::Oracle("expectile of non-finite values".into()));
    }
    let stat = |m: f64| -> f64 {
        values
            .iter()
            .zip(probs)
            .map(|(&x, &p)| {
                let w = if x - m < 0.0 { 1.0 - tau } else { tau };
                p * w * (x - m)
            })
            .sum()
    };
    let mut lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < VI_TOL {
        return Ok(lo);
    }
    // stat is strictly decreasing in m, positive at lo, negative at hi
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if stat(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= VI_TOL {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Exhaustive argmax over all legal joint actions of an arbitrary scalar
/// objective; ties broken by lowest joint-action index (lexicographic over
/// per-agent actions).
pub fn argmax_over_joint<F>(
    n_agents: usize,
    n_actions: usize,
    masks: &[Vec<bool>],
    mut f: F,
) -> Result<JointAction>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let total = n_actions
        .checked_pow(n_agents as u32)
        .ok_or_else(|| OmacError::EnumerationTooLarge {
            size: usize::MAX,
            cap: JOINT_ACTION_CAP,
        })?;
    if total > JOINT_ACTION_CAP {
        return Err(OmacError::EnumerationTooLarge {
            size: total,
            cap: JOINT_ACTION_CAP,
        });
    }
    let unravel = |mut idx: usize| {
        let mut out = vec![0; n_agents];
        for i in (0..n_agents).rev() {
            out[i] = idx % n_actions;
            idx /= n_actions;
        }
        out
    };
    let mut best: Option<(Vec<usize>, f64)> = None;
    for idx in 0..total {
        let action = unravel(idx);
        if action.iter().enumerate().any(|(i, &a)| !masks[i][a]) {
            continue;
        }
        let val = f(&action)?;
        if best.as_ref().map_or(true, |(_, bv)| val > *bv) {
            best = Some((action, val));
        }
    }
    best.map(|(a, _)| JointAction(a))
        .ok_or_else(|| OmacError::Oracle("all joint actions are masked".into()))
}

/// Exhaustive argmax of the assembled Q_tot at one joint observation.
pub fn joint_argmax_qtot(
    model: &CvfModel,
    obs: &JointObs,
    masks: &[Vec<bool>],
) -> Result<JointAction> {
    argmax_over_joint(model.dims.n_agents, model.dims.n_actions, masks, |a| {
        model.q_tot(obs, a, masks, false)
    })
}

/// Deterministic optimal joint policy per state under full support; used as
/// the planner behavior policies are perturbed around. Entries are None for
/// terminal or unreachable states.
pub fn optimal_joint_policy(model: &TabularModel) -> Result<Vec<Option<usize>>> {
    let support = SupportSet::full(model);
    let tables = support_q_star(model, &support)?;
    Ok((0..model.states.len())
        .map(|s| {
            if model.terminal[s] || !tables.reachable[s] {
                None
            } else {
                tables.greedy_action(model, s)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DEFAULT_ENUM_CAP;
    use crate::env::{EnvConfig, EnvSpec, StateId};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn matrix_model() -> TabularModel {
        let env = EnvSpec::from_config(&EnvConfig::default_matrix()).unwrap();
        env.enumerate(DEFAULT_ENUM_CAP).unwrap()
    }

    #[test]
    fn full_support_matrix_optimum() {
        let model = matrix_model();
        let support = SupportSet::full(&model);
        let tables = support_q_star(&model, &support).unwrap();
        let s0 = model.index[&StateId(0)];
        assert!((tables.v[s0] - 2.0).abs() < 1e-9);
        assert_eq!(tables.greedy_action(&model, s0), Some(3)); // (1,1)
    }

    #[test]
    fn restricted_support_excluding_optimum() {
        let model = matrix_model();
        let s0 = model.index[&StateId(0)];
        let mut support = SupportSet::empty(&model);
        for ja in [0, 1, 2] {
            support.insert(s0, ja);
        }
        let tables = support_q_star(&model, &support).unwrap();
        assert!((tables.v[s0] - 1.0).abs() < 1e-9);
        assert_eq!(tables.greedy_action(&model, s0), Some(0)); // (0,0) pays 1
    }

    fn chain_model() -> TabularModel {
        // s0 -(r=0)-> s1 -(r=1)-> terminal, one agent, one action
        let states = vec![StateId(0), StateId(1), StateId::TERMINAL];
        let index: BTreeMap<StateId, usize> =
            states.iter().cloned().zip(0..).collect();
        TabularModel {
            states,
            index,
            n_agents: 1,
            n_actions: 1,
            gamma: 0.99,
            transitions: vec![vec![vec![(1, 1.0)]], vec![vec![(2, 1.0)]], vec![vec![]]],
            rewards: vec![vec![0.0], vec![1.0], vec![0.0]],
            masks: vec![vec![vec![true]]; 3],
            terminal: vec![false, false, true],
            initial: vec![(0, 1.0)],
            observations: vec![vec![vec![0.0]]; 3],
        }
    }

    #[test]
    fn two_step_chain_discounted_backup() {
        let model = chain_model();
        let tables = support_q_star(&model, &SupportSet::full(&model)).unwrap();
        assert!((tables.v[0] - 0.99).abs() < 1e-9);
        assert!((tables.v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_support_at_reachable_state_is_an_error() {
        let model = chain_model();
        let mut support = SupportSet::empty(&model);
        support.insert(0, 0);
        // state 1 is reached via state 0 but has no supported action
        assert!(support_q_star(&model, &support).is_err());
    }

    #[test]
    fn fixed_point_stable_under_one_more_backup() {
        let env = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        let model = env.enumerate(DEFAULT_ENUM_CAP).unwrap();
        let support = SupportSet::full(&model);
        let tables = support_q_star(&model, &support).unwrap();
        for s in 0..model.states.len() {
            if model.terminal[s] || !tables.reachable[s] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for &ja in &support.per_state[s] {
                let mut q = model.rewards[s][ja];
                for &(ns, p) in &model.transitions[s][ja] {
                    q += model.gamma * p * tables.v[ns];
                }
                assert!((q - tables.q[s][ja]).abs() <= 1e-9);
                best = best.max(q);
            }
            assert!((best - tables.v[s]).abs() <= 1e-9);
        }
    }

    #[test]
    fn expectile_closed_forms() {
        let m = expectile_of_discrete(&[0.0, 1.0], &[0.5, 0.5], 0.7).unwrap();
        assert!((m - 0.7).abs() < 1e-8);
        let m = expectile_of_discrete(&[0.0, 1.0], &[0.5, 0.5], 0.999).unwrap();
        assert!((m - 0.999).abs() < 1e-8);
        let m = expectile_of_discrete(&[2.0, 4.0, 9.0], &[0.2, 0.5, 0.3], 0.5).unwrap();
        assert!((m - (0.4 + 2.0 + 2.7)).abs() < 1e-8);
    }

    #[test]
    fn expectile_near_one_approaches_supremum() {
        let values = [-3.0, 0.5, 2.0, 7.0];
        let probs = [0.25; 4];
        let m = expectile_of_discrete(&values, &probs, 0.9999).unwrap();
        let range = 10.0;
        assert!((7.0 - m).abs() <= 1e-3 * range);
    }

    #[test]
    fn expectile_rejects_bad_inputs() {
        assert!(expectile_of_discrete(&[], &[], 0.5).is_err());
        assert!(expectile_of_discrete(&[1.0], &[0.9], 0.5).is_err());
        assert!(expectile_of_discrete(&[1.0, 2.0], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn argmax_over_known_values() {
        // Q_tot values {(0,0):3.0, (0,1):2.0, (1,0):2.5, (1,1):1.0}
        let table = [3.0, 2.0, 2.5, 1.0];
        let masks = vec![vec![true, true]; 2];
        let a = argmax_over_joint(2, 2, &masks, |act| Ok(table[act[0] * 2 + act[1]])).unwrap();
        assert_eq!(a.0, vec![0, 0]);
    }

    #[test]
    fn argmax_singleton_mask() {
        let masks = vec![vec![false, true], vec![true, false]];
        let a = argmax_over_joint(2, 2, &masks, |_| Ok(0.0)).unwrap();
        assert_eq!(a.0, vec![1, 0]);
    }

    #[test]
    fn argmax_all_masked_is_error() {
        let masks = vec![vec![false, false], vec![true, true]];
        assert!(argmax_over_joint(2, 2, &masks, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn argmax_ties_break_lexicographically() {
        let masks = vec![vec![true, true]; 2];
        let a = argmax_over_joint(2, 2, &masks, |_| Ok(1.0)).unwrap();
        assert_eq!(a.0, vec![0, 0]);
    }

    #[test]
    fn planner_picks_matrix_optimum() {
        let model = matrix_model();
        let policy = optimal_joint_policy(&model).unwrap();
        let s0 = model.index[&StateId(0)];
        assert_eq!(policy[s0], Some(3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn expectile_monotone_and_bounded(
            values in proptest::collection::vec(-10.0f64..10.0, 1..6),
            tau1 in 0.05f64..0.95,
            dt in 0.0f64..0.04,
        ) {
            let n = values.len();
            let probs = vec![1.0 / n as f64; n];
            let m1 = expectile_of_discrete(&values, &probs, tau1).unwrap();
            let m2 = expectile_of_discrete(&values, &probs, tau1 + dt).unwrap();
            prop_assert!(m2 >= m1 - 1e-8);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m1 >= lo - 1e-9 && m1 <= hi + 1e-9);
        }
    }
}
