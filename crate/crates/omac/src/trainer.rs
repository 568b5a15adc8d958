//! Two-phase offline training loop: a value phase (expectile regression of
//! local values plus TD learning of the assembled Q_tot), then a policy
//! phase (advantage-weighted regression), with decentralized-execution
//! evaluation and CSV metric logging.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cvf::{masked_argmax, CvfDims, CvfModel, MixerVariant, TrainBatch};
use crate::dataset::OfflineDataset;
use crate::env::{EnvSpec, JointAction, JointObs};
use crate::error::{OmacError, Result};
use crate::numcore::{Matrix, MlpSpec, Net};

pub const DIVERGENCE_LIMIT: f64 = 1e8;
pub const AWR_CLIP: f64 = 100.0;
pub const DEFAULT_EVAL_EPISODES: usize = 32;

/// Network widths and iteration counts; switched by OMAC_PRESET=desk|paper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub hidden: usize,
    pub weight_hidden: usize,
    pub value_iters: usize,
    pub policy_iters: usize,
}

pub const DESK_PRESET: Preset = Preset {
    hidden: 32,
    weight_hidden: 16,
    value_iters: 5_000,
    policy_iters: 2_000,
};

pub const PAPER_PRESET: Preset = Preset {
    hidden: 256,
    weight_hidden: 64,
    value_iters: 50_000,
    policy_iters: 20_000,
};

pub fn preset_from_env() -> Result<Preset> {
    match std::env::var("OMAC_PRESET") {
        Ok(v) if v == "paper" => Ok(PAPER_PRESET),
        Ok(v) if v == "desk" => Ok(DESK_PRESET),
        Ok(other) => Err(OmacError::Config(format!(
            "OMAC_PRESET must be desk or paper, got '{other}'"
        ))),
        Err(_) => Ok(DESK_PRESET),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: MixerVariant,
    pub tau: f64,
    pub beta: f64,
    pub lr_value: f64,
    pub lr_policy: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub rho: f64,
    pub hidden: usize,
    pub weight_hidden: usize,
    pub value_iters: usize,
    pub policy_iters: usize,
    pub seed: u64,
    pub eval_episodes: usize,
    pub log_interval: usize,
    pub eval_interval: usize,
}

impl TrainConfig {
    pub fn preset_defaults(preset: Preset) -> Self {
        TrainConfig {
            variant: MixerVariant::Cvf,
            tau: 0.7,
            beta: 1.0,
            lr_value: 5e-4,
            lr_policy: 5e-4,
            batch_size: 128,
            gamma: 0.99,
            rho: 0.005,
            hidden: preset.hidden,
            weight_hidden: preset.weight_hidden,
            value_iters: preset.value_iters,
            policy_iters: preset.policy_iters,
            seed: 0,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            log_interval: 100,
            eval_interval: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::numcore::expectile::validate_tau(self.tau)?;
        if !(self.beta > 0.0) {
            return Err(OmacError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(OmacError::Config(format!(
                "gamma must be in [0,1), got {}",
                self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(OmacError::Config("batch_size must be positive".into()));
        }
        if !(self.lr_value > 0.0 && self.lr_policy > 0.0) {
            return Err(OmacError::Config("learning rates must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(OmacError::Config(format!("rho must be in (0,1], got {}", self.rho)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset_defaults(DESK_PRESET)
    }
}

/// One dataset transition in flat per-step form, with the mask of the
/// successor state attached for bootstrap-side action masking.
#[derive(Clone, Debug)]
pub struct FlatTransition {
    pub obs: JointObs,
    pub act: Vec<usize>,
    pub rew: f64,
    pub done: bool,
    pub mask: Vec<Vec<bool>>,
    pub next_obs: JointObs,
    pub next_mask: Vec<Vec<bool>>,
}

pub fn flatten(dataset: &OfflineDataset) -> Vec<FlatTransition> {
    let mut out = Vec::with_capacity(dataset.step_count());
    for ep in &dataset.episodes {
        for (t, step) in ep.steps.iter().enumerate() {
            let next_mask = if step.done {
                // terminal rows never bootstrap; an all-true mask keeps the
                // masked maxima well-defined
                step.mask.iter().map(|m| vec![true; m.len()]).collect()
            } else {
                ep.steps[t + 1].mask.clone()
            };
            out.push(FlatTransition {
                obs: step.obs.clone(),
                act: step.act.clone(),
                rew: step.rew,
                done: step.done,
                mask: step.mask.clone(),
                next_obs: step.next_obs.clone(),
                next_mask,
            });
        }
    }
    out
}

pub fn make_batch(
    transitions: &[FlatTransition],
    indices: &[usize],
    dims: &CvfDims,
) -> Result<TrainBatch> {
    if indices.is_empty() {
        return Err(OmacError::Validation("empty batch".into()));
    }
    let b = indices.len();
    let n = dims.n_agents;
    let d = dims.obs_dim;
    let a = dims.n_actions;
    let mut obs = vec![Matrix::zeros(b, d); n];
    let mut next_obs = vec![Matrix::zeros(b, d); n];
    let mut joint_obs = Matrix::zeros(b, n * d);
    let mut next_joint_obs = Matrix::zeros(b, n * d);
    let mut joint_onehot = Matrix::zeros(b, n * a);
    let mut act = vec![vec![0usize; b]; n];
    let mut rew = Vec::with_capacity(b);
    let mut done = Vec::with_capacity(b);
    let mut masks = vec![vec![Vec::new(); b]; n];
    let mut next_masks = vec![vec![Vec::new(); b]; n];
    for (r, &idx) in indices.iter().enumerate() {
        let tr = transitions
            .get(idx)
            .ok_or_else(|| OmacError::Validation(format!("transition index {idx} out of range")))?;
        for i in 0..n {
            if tr.obs[i].len() != d {
                return Err(OmacError::DimMismatch {
                    expected: d,
                    got: tr.obs[i].len(),
                    context: "transition observation".into(),
                });
            }
            obs[i].row_mut(r).copy_from_slice(&tr.obs[i]);
            next_obs[i].row_mut(r).copy_from_slice(&tr.next_obs[i]);
            joint_obs.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(&tr.obs[i]);
            next_joint_obs.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(&tr.next_obs[i]);
            joint_onehot.set(r, i * a + tr.act[i], 1.0);
            act[i][r] = tr.act[i];
            masks[i][r] = tr.mask[i].clone();
            next_masks[i][r] = tr.next_mask[i].clone();
        }
        rew.push(tr.rew);
        done.push(tr.done);
    }
    Ok(TrainBatch {
        obs,
        joint_obs,
        act,
        joint_onehot,
        rew,
        done,
        next_obs,
        next_joint_obs,
        masks,
        next_masks,
    })
}

/// Per-agent policy networks mapping local observations to action logits;
/// execution is a masked softmax (or its argmax).
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub nets: Vec<Net>,
    pub n_actions: usize,
}

impl PolicyModel {
    pub fn new(dims: &CvfDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let nets = (0..dims.n_agents)
            .map(|_| {
                Net::new(
                    MlpSpec::new(vec![dims.obs_dim, dims.hidden, dims.hidden, dims.n_actions]),
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(PolicyModel {
            nets,
            n_actions: dims.n_actions,
        })
    }

    /// Softmax over unmasked actions; masked actions get probability zero.
    pub fn action_probs(&self, agent: usize, obs_i: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        let logits = self.nets[agent].forward_one(obs_i)?;
        masked_softmax(&logits, mask)
    }

    /// Deterministic execution: highest-probability unmasked action, ties by
    /// lowest index.
    pub fn greedy_action(&self, agent: usize, obs_i: &[f64], mask: &[bool]) -> Result<usize> {
        let logits = self.nets[agent].forward_one(obs_i)?;
        masked_argmax(&logits, mask)
    }

    pub fn joint_greedy(&self, obs: &JointObs, masks: &[Vec<bool>]) -> Result<JointAction> {
        let mut out = Vec::with_capacity(self.nets.len());
        for i in 0..self.nets.len() {
            out.push(self.greedy_action(i, &obs[i], &masks[i])?);
        }
        Ok(JointAction(out))
    }
}

pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for (l, &m) in logits.iter().zip(mask) {
        if m && *l > max {
            max = *l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(OmacError::Validation("all actions masked".into()));
    }
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (p, (l, &m)) in probs.iter_mut().zip(logits.iter().zip(mask)) {
        if m {
            *p = (l - max).exp();
            total += *p;
        }
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub phase: String,
    pub l_v_mean: f64,
    pub l_q: f64,
    pub l_pi_mean: f64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,phase,L_V_mean,L_Q,L_pi_mean,eval_return_mean,eval_return_std\n");
        for r in &self.rows {
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iter,
                r.phase,
                r.l_v_mean,
                r.l_q,
                r.l_pi_mean,
                fmt_opt(r.eval_return_mean),
                fmt_opt(r.eval_return_std)
            ));
        }
        out
    }
}

/// One value-phase update: per-agent expectile step on V_i, a global TD
/// step on the mixing networks and local Q nets, then the target EMA.
pub fn value_step(
    model: &mut CvfModel,
    batch: &TrainBatch,
    gamma: f64,
    lr: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = model.dims.n_agents;
    let mut lv = Vec::with_capacity(n);
    for i in 0..n {
        let (loss, grads) = model.lv_loss_and_grad(i, batch)?;
        model.v_nets[i].adam_step(&grads, lr)?;
        lv.push(loss);
    }
    let (lq, grads) = model.lq_loss_and_grad(batch, gamma)?;
    model.global_adam_step(&grads, lr)?;
    model.soft_update_targets(model.rho);
    Ok((lv, lq))
}

/// Advantage-weighted regression loss for one agent and its gradient over
/// that agent's policy-net parameters. Weights exp(beta * (Q_i - baseline))
/// are clipped at `AWR_CLIP`; the value model is read-only.
pub fn policy_loss_and_grad(
    policy: &PolicyModel,
    agent: usize,
    model: &CvfModel,
    batch: &TrainBatch,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(OmacError::Validation("empty batch".into()));
    }
    let b = batch.len();
    let bf = b as f64;
    let i = agent;
    let (q_out, _) = model.q_nets[i].forward(&batch.obs[i])?;
    let mut weights = Vec::with_capacity(b);
    for r in 0..b {
        let q_sel = q_out.get(r, batch.act[i][r]);
        let base = model.baseline_value(i, batch.obs[i].row(r), &batch.masks[i][r])?;
        weights.push((beta * (q_sel - base)).exp().min(AWR_CLIP));
    }
    let (logits, tape) = policy.nets[i].forward(&batch.obs[i])?;
    let mut loss = 0.0;
    let mut gout = Matrix::zeros(b, policy.n_actions);
    for r in 0..b {
        let probs = masked_softmax(logits.row(r), &batch.masks[i][r])?;
        let a = batch.act[i][r];
        let p = probs[a].max(1e-300);
        loss += -weights[r] * p.ln() / bf;
        // d(-log p_a)/dlogit_k = p_k - 1{k=a} over unmasked k
        for k in 0..policy.n_actions {
            if batch.masks[i][r][k] {
                let ind = if k == a { 1.0 } else { 0.0 };
                gout.set(r, k, weights[r] * (probs[k] - ind) / bf);
            }
        }
    }
    let (grads, _) = policy.nets[i].backward(tape, &gout)?;
    Ok((loss, grads))
}

/// One policy-phase update: an Adam step per agent on the regression loss.
pub fn policy_step(
    policy: &mut PolicyModel,
    model: &CvfModel,
    batch: &TrainBatch,
    beta: f64,
    lr: f64,
) -> Result<Vec<f64>> {
    let n = model.dims.n_agents;
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let (loss, grads) = policy_loss_and_grad(policy, i, model, batch, beta)?;
        policy.nets[i].adam_step(&grads, lr)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Decentralized greedy execution over `n_episodes` seeded episodes.
/// Returns (mean undiscounted return, population standard deviation).
pub fn evaluate(
    policy: &PolicyModel,
    env: &EnvSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Ok((0.0, 0.0));
    }
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let ep_seed: u64 = master.gen();
        let mut rng = ChaCha20Rng::seed_from_u64(ep_seed);
        let (mut s, mut obs) = env.reset(ep_seed);
        let mut total = 0.0;
        loop {
            let masks = env.masks(s);
            let action = policy.joint_greedy(&obs, &masks)?;
            let (ns, next_obs, r, done) = env.step(s, &action, &mut rng)?;
            total += r;
            if done {
                break;
            }
            s = ns;
            obs = next_obs;
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / n_episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n_episodes as f64;
    Ok((mean, var.sqrt()))
}

/// Like `evaluate` but sampling actions from the policy distribution
/// instead of taking the argmax.
pub fn evaluate_sampled(
    policy: &PolicyModel,
    env: &EnvSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Ok((0.0, 0.0));
    }
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let ep_seed: u64 = master.gen();
        let mut rng = ChaCha20Rng::seed_from_u64(ep_seed);
        let (mut s, mut obs) = env.reset(ep_seed);
        let mut total = 0.0;
        loop {
            let masks = env.masks(s);
            let mut action = Vec::with_capacity(policy.nets.len());
            for i in 0..policy.nets.len() {
                let probs = policy.action_probs(i, &obs[i], &masks[i])?;
                let draw: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (a, &p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        chosen = a;
                        break;
                    }
                }
                action.push(chosen);
            }
            let (ns, next_obs, r, done) = env.step(s, &JointAction(action), &mut rng)?;
            total += r;
            if done {
                break;
            }
            s = ns;
            obs = next_obs;
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / n_episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n_episodes as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CvfModel,
    pub policy: PolicyModel,
    pub metrics: MetricsLog,
    pub final_eval: (f64, f64),
}

/// The full offline loop: value phase then policy phase, deterministic per
/// seed. The in-sample monitor is armed during the value phase; evaluation
/// (which reads the policy) happens only in the policy phase and at the end.
pub fn run(config: &TrainConfig, dataset: &OfflineDataset, env: &EnvSpec) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.check_fingerprint(env)?;
    let dims = CvfDims {
        n_agents: env.n_agents(),
        n_actions: env.n_actions(),
        obs_dim: env.obs_dim(),
        hidden: config.hidden,
        weight_hidden: config.weight_hidden,
    };
    let transitions = flatten(dataset);
    if transitions.is_empty() && (config.value_iters > 0 || config.policy_iters > 0) {
        return Err(OmacError::Validation(
            "cannot train on an empty dataset".into(),
        ));
    }
    let mut model = CvfModel::new(dims, config.variant, config.tau, config.rho, config.seed)?;
    let mut policy = PolicyModel::new(&dims, config.seed.wrapping_add(0x9e37_79b9))?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut metrics = MetricsLog::default();

    let sample = |rng: &mut ChaCha20Rng| -> Vec<usize> {
        (0..config.batch_size)
            .map(|_| rng.gen_range(0..transitions.len()))
            .collect()
    };

    model.monitor.enabled = true;
    let mut last_lv = 0.0;
    let mut last_lq = 0.0;
    for it in 1..=config.value_iters {
        let batch = make_batch(&transitions, &sample(&mut rng), &dims)?;
        let (lv, lq) = value_step(&mut model, &batch, config.gamma, config.lr_value)?;
        last_lv = lv.iter().sum::<f64>() / lv.len() as f64;
        last_lq = lq;
        if !last_lv.is_finite() || !lq.is_finite() || last_lv.abs() > DIVERGENCE_LIMIT || lq.abs() > DIVERGENCE_LIMIT
        {
            return Err(OmacError::Divergence(format!(
                "value phase iteration {it}: L_V mean {last_lv}, L_Q {lq}"
            )));
        }
        if it % config.log_interval == 0 || it == config.value_iters {
            metrics.rows.push(MetricsRow {
                iter: it,
                phase: "value".into(),
                l_v_mean: last_lv,
                l_q: lq,
                l_pi_mean: 0.0,
                eval_return_mean: None,
                eval_return_std: None,
            });
        }
    }
    model.monitor.enabled = false;

    for it in 1..=config.policy_iters {
        let batch = make_batch(&transitions, &sample(&mut rng), &dims)?;
        let lpi = policy_step(&mut policy, &model, &batch, config.beta, config.lr_policy)?;
        let lpi_mean = lpi.iter().sum::<f64>() / lpi.len() as f64;
        if !lpi_mean.is_finite() || lpi_mean.abs() > DIVERGENCE_LIMIT {
            return Err(OmacError::Divergence(format!(
                "policy phase iteration {it}: L_pi mean {lpi_mean}"
            )));
        }
        if it % config.log_interval == 0 || it == config.policy_iters {
            let eval = if it % config.eval_interval == 0 {
                Some(evaluate(
                    &policy,
                    env,
                    config.eval_episodes,
                    config.seed.wrapping_add(2),
                )?)
            } else {
                None
            };
            metrics.rows.push(MetricsRow {
                iter: config.value_iters + it,
                phase: "policy".into(),
                l_v_mean: last_lv,
                l_q: last_lq,
                l_pi_mean: lpi_mean,
                eval_return_mean: eval.map(|e| e.0),
                eval_return_std: eval.map(|e| e.1),
            });
        }
    }

    let final_eval = evaluate(&policy, env, config.eval_episodes, config.seed.wrapping_add(2))?;
    Ok(TrainOutcome {
        model,
        policy,
        metrics,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Tier};
    use crate::env::EnvConfig;

    fn matrix_env() -> EnvSpec {
        EnvSpec::from_config(&EnvConfig::default_matrix()).unwrap()
    }

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.value_iters = 40;
        c.policy_iters = 30;
        c.log_interval = 10;
        c.eval_interval = 20;
        c.eval_episodes = 8;
        c
    }

    fn zero_all_nets(model: &mut CvfModel) {
        for net in model
            .v_nets
            .iter_mut()
            .chain(model.q_nets.iter_mut())
            .chain(model.q_targets.iter_mut())
        {
            let z = vec![0.0; net.n_params()];
            net.set_params(&z);
        }
        for net in [
            &mut model.v_share,
            &mut model.enc_v,
            &mut model.head_v,
            &mut model.enc_q,
            &mut model.head_q,
        ] {
            let z = vec![0.0; net.n_params()];
            net.set_params(&z);
        }
    }

    #[test]
    fn masked_softmax_normalizes_and_zeroes_masked() {
        let p = masked_softmax(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p[1], 0.0);
        assert!(p[2] > p[0]);
        assert!(masked_softmax(&[1.0], &[false]).is_err());
    }

    #[test]
    fn flatten_carries_the_next_step_mask() {
        let env = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        let d = generate(&env, Tier::Poor, 4, 0).unwrap();
        let flat = flatten(&d);
        assert_eq!(flat.len(), d.step_count());
        let mut k = 0;
        for ep in &d.episodes {
            for (t, step) in ep.steps.iter().enumerate() {
                if !step.done {
                    assert_eq!(flat[k].next_mask, ep.steps[t + 1].mask);
                }
                assert_eq!(flat[k].act, step.act);
                k += 1;
            }
        }
    }

    #[test]
    fn zero_nets_zero_rewards_give_zero_losses() {
        let env = matrix_env();
        let cfg = EnvConfig::Matrix {
            payoff: vec![0.0; 4],
            n_agents: 2,
            n_actions: 2,
            gamma: 0.99,
        };
        let zenv = EnvSpec::from_config(&cfg).unwrap();
        let d = generate(&zenv, Tier::Poor, 20, 0).unwrap();
        let flat = flatten(&d);
        let dims = CvfDims {
            n_agents: 2,
            n_actions: 2,
            obs_dim: env.obs_dim(),
            hidden: 8,
            weight_hidden: 4,
        };
        let mut model = CvfModel::new(dims, MixerVariant::Cvf, 0.7, 0.005, 0).unwrap();
        zero_all_nets(&mut model);
        let batch = make_batch(&flat, &(0..flat.len()).collect::<Vec<_>>(), &dims).unwrap();
        for i in 0..2 {
            let (lv, _) = model.lv_loss_and_grad(i, &batch).unwrap();
            assert_eq!(lv, 0.0);
        }
        let (lq, _) = model.lq_loss_and_grad(&batch, 0.99).unwrap();
        assert_eq!(lq, 0.0);
    }

    #[test]
    fn expectile_half_converges_to_batch_mean_of_frozen_targets() {
        // one observation repeated; tau=0.5 makes V the least-squares mean
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 64, 1).unwrap();
        let flat = flatten(&d);
        let dims = CvfDims {
            n_agents: 2,
            n_actions: 2,
            obs_dim: env.obs_dim(),
            hidden: 16,
            weight_hidden: 8,
        };
        let mut model = CvfModel::new(dims, MixerVariant::Cvf, 0.5, 0.005, 3).unwrap();
        let batch = make_batch(&flat, &(0..flat.len()).collect::<Vec<_>>(), &dims).unwrap();
        for _ in 0..4000 {
            let (_, g) = model.lv_loss_and_grad(0, &batch).unwrap();
            model.v_nets[0].adam_step(&g, 5e-3).unwrap();
        }
        let (qbar, _) = model.q_targets[0].forward(&batch.obs[0]).unwrap();
        let mean: f64 = (0..batch.len())
            .map(|r| qbar.get(r, batch.act[0][r]))
            .sum::<f64>()
            / batch.len() as f64;
        let v = model.v_nets[0].forward_one(batch.obs[0].row(0)).unwrap()[0];
        assert!((v - mean).abs() < 1e-3, "V {v} vs mean {mean}");
    }

    #[test]
    fn soft_update_follows_the_ema_recurrence_exactly() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 32, 0).unwrap();
        let flat = flatten(&d);
        let dims = CvfDims {
            n_agents: 2,
            n_actions: 2,
            obs_dim: env.obs_dim(),
            hidden: 8,
            weight_hidden: 4,
        };
        let mut model = CvfModel::new(dims, MixerVariant::Cvf, 0.7, 0.01, 0).unwrap();
        let batch = make_batch(&flat, &(0..32).collect::<Vec<_>>(), &dims).unwrap();
        for _ in 0..3 {
            let before: Vec<Vec<f64>> = model.q_targets.iter().map(|n| n.params().to_vec()).collect();
            value_step(&mut model, &batch, 0.99, 5e-4).unwrap();
            for i in 0..2 {
                let online = model.q_nets[i].params();
                let target = model.q_targets[i].params();
                for k in 0..online.len() {
                    let expect = 0.01 * online[k] + 0.99 * before[i][k];
                    assert_eq!(target[k], expect);
                }
            }
        }
    }

    #[test]
    fn run_is_bit_deterministic() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 100, 0).unwrap();
        let cfg = small_config();
        let a = run(&cfg, &d, &env).unwrap();
        let b = run(&cfg, &d, &env).unwrap();
        assert_eq!(a.model.global_param_vec(), b.model.global_param_vec());
        for i in 0..2 {
            assert_eq!(a.model.v_nets[i].params(), b.model.v_nets[i].params());
            assert_eq!(a.policy.nets[i].params(), b.policy.nets[i].params());
        }
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
        assert_eq!(a.final_eval, b.final_eval);
    }

    #[test]
    fn run_stays_in_sample_for_the_standard_variant() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 100, 0).unwrap();
        let out = run(&small_config(), &d, &env).unwrap();
        assert_eq!(out.model.monitor.off_sample_reads, 0);
        assert!(out.model.monitor.in_sample_reads > 0);
    }

    #[test]
    fn maxq_variant_reads_off_sample() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 100, 0).unwrap();
        let mut cfg = small_config();
        cfg.variant = MixerVariant::CvfMaxQ;
        let out = run(&cfg, &d, &env).unwrap();
        assert!(out.model.monitor.off_sample_reads > 0);
    }

    #[test]
    fn empty_dataset_rejected_and_fingerprint_checked() {
        let env = matrix_env();
        let empty = generate(&env, Tier::Poor, 0, 0).unwrap();
        assert!(run(&small_config(), &empty, &env).is_err());
        let d = generate(&env, Tier::Poor, 10, 0).unwrap();
        let other = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        assert!(matches!(
            run(&small_config(), &d, &other),
            Err(OmacError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn divergence_guard_aborts() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 50, 0).unwrap();
        let mut cfg = small_config();
        cfg.lr_value = 1e7;
        cfg.value_iters = 500;
        let err = run(&cfg, &d, &env);
        assert!(matches!(err, Err(OmacError::Divergence(_))), "{err:?}");
    }

    #[test]
    fn behavior_cloning_limit_without_value_training() {
        let env = matrix_env();
        let d = generate(&env, Tier::Medium, 400, 5).unwrap();
        let mut cfg = small_config();
        cfg.value_iters = 0;
        cfg.policy_iters = 3000;
        cfg.beta = 1e-6;
        let out = run(&cfg, &d, &env).unwrap();
        let s = d.summary(None);
        let (s0, obs) = env.reset(0);
        let masks = env.masks(s0);
        for i in 0..2 {
            let probs = out.policy.action_probs(i, &obs[i], &masks[i]).unwrap();
            let total: usize = s.action_histograms[i].iter().sum();
            for a in 0..2 {
                let freq = s.action_histograms[i][a] as f64 / total as f64;
                assert!(
                    (probs[a] - freq).abs() < 0.05,
                    "agent {i} action {a}: pi {} vs data {freq}",
                    probs[a]
                );
            }
        }
    }

    #[test]
    fn matrix_value_phase_recovers_the_payoff_table() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 500, 2).unwrap();
        let mut cfg = small_config();
        cfg.value_iters = 4000;
        cfg.policy_iters = 0;
        let out = run(&cfg, &d, &env).unwrap();
        let (s0, obs) = env.reset(0);
        let masks = env.masks(s0);
        let payoff = [1.0, 0.0, 0.0, 2.0];
        for idx in 0..4 {
            let a = vec![idx / 2, idx % 2];
            let q = out.model.q_tot(&obs, &a, &masks, false).unwrap();
            assert!(
                (q - payoff[idx]).abs() < 0.05,
                "Q_tot{a:?} = {q}, payoff {}",
                payoff[idx]
            );
        }
    }

    #[test]
    fn uniform_sampled_policy_matches_expected_matrix_return() {
        let env = matrix_env();
        let dims = CvfDims {
            n_agents: 2,
            n_actions: 2,
            obs_dim: env.obs_dim(),
            hidden: 8,
            weight_hidden: 4,
        };
        let mut policy = PolicyModel::new(&dims, 0).unwrap();
        for net in &mut policy.nets {
            let z = vec![0.0; net.n_params()];
            net.set_params(&z);
        }
        // zero logits: uniform over both actions; E[payoff] = (1+0+0+2)/4
        let (mean, _) = evaluate_sampled(&policy, &env, 1000, 7).unwrap();
        assert!((mean - 0.75).abs() < 0.08, "mean {mean}");
        let again = evaluate_sampled(&policy, &env, 1000, 7).unwrap();
        assert_eq!(mean, again.0);
    }

    #[test]
    fn greedy_optimal_policy_scores_exactly_two() {
        let env = matrix_env();
        let dims = CvfDims {
            n_agents: 2,
            n_actions: 2,
            obs_dim: env.obs_dim(),
            hidden: 8,
            weight_hidden: 4,
        };
        let mut policy = PolicyModel::new(&dims, 0).unwrap();
        for net in policy.nets.iter_mut() {
            // zero weights plus a positive output bias on action 1 makes the
            // greedy action 1 for every observation
            let mut p = vec![0.0; net.n_params()];
            p[net.n_params() - 1] = 10.0;
            net.set_params(&p);
        }
        let (mean, std) = evaluate(&policy, &env, 32, 3).unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.tau = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
