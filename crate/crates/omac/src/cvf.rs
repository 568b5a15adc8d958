//! Coupled value factorization model.
//!
//! Local state-value nets V_i, local Q nets Q_i with slow target copies,
//! a shared value head over the full observation, and the coupled credit
//! assignment weight heads: a shared observation encoder feeds both the
//! state-value weights w^v(o) and, concatenated with an action encoding,
//! the Q weights w^q(o,a). Weight outputs pass through absolute value so
//! both families stay nonnegative.
//!
//! Assemblies:
//!   V_tot(o)   = sum_i w^v_i(o) V_i(o_i) + V_share(o)
//!   Q_tot(o,a) = V_tot(o) + sum_i w^q_i(o,a) (Q_i(o_i,a_i) - V_i(o_i))
//!
//! Ablation variants change the wiring: `CvfNoCca` severs the encoder
//! coupling, `Linear` mixes local Qs directly with a state bias, and
//! `CvfMaxQ` substitutes max_a Q_i for every V_i term.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::env::{JointAction, JointObs};
use crate::error::{OmacError, Result};
use crate::numcore::expectile::{expectile_loss, validate_tau};
use crate::numcore::{Matrix, MlpSpec, Net};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerVariant {
    #[serde(rename = "cvf")]
    Cvf,
    #[serde(rename = "no-cca")]
    CvfNoCca,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "maxq")]
    CvfMaxQ,
}

impl MixerVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cvf" => Ok(MixerVariant::Cvf),
            "no-cca" => Ok(MixerVariant::CvfNoCca),
            "linear" => Ok(MixerVariant::Linear),
            "maxq" => Ok(MixerVariant::CvfMaxQ),
            other => Err(OmacError::Config(format!(
                "unknown variant '{other}' (expected cvf|no-cca|linear|maxq)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MixerVariant::Cvf => "cvf",
            MixerVariant::CvfNoCca => "no-cca",
            MixerVariant::Linear => "linear",
            MixerVariant::CvfMaxQ => "maxq",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvfDims {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    /// Hidden width of the value and policy nets.
    pub hidden: usize,
    /// Hidden width of the credit-assignment weight nets.
    pub weight_hidden: usize,
}

/// Counts local Q-value reads during instrumented phases. A read is
/// off-sample when the consumed action index differs from the action stored
/// in the sampled transition.
#[derive(Clone, Debug, Default)]
pub struct InSampleMonitor {
    pub enabled: bool,
    pub in_sample_reads: u64,
    pub off_sample_reads: u64,
}

impl InSampleMonitor {
    fn record(&mut self, read_action: usize, sampled_action: usize) {
        if !self.enabled {
            return;
        }
        if read_action == sampled_action {
            self.in_sample_reads += 1;
        } else {
            self.off_sample_reads += 1;
        }
    }
}

#[derive(Clone, Debug)]
pub struct CvfModel {
    pub dims: CvfDims,
    pub variant: MixerVariant,
    pub tau: f64,
    pub rho: f64,
    pub v_nets: Vec<Net>,
    pub q_nets: Vec<Net>,
    pub q_targets: Vec<Net>,
    pub v_share: Net,
    /// Observation encoder feeding the w^v head (and, under coupling, w^q).
    pub enc_v: Net,
    pub head_v: Net,
    /// Observation+action encoder feeding the w^q head.
    pub enc_q: Net,
    pub head_q: Net,
    pub monitor: InSampleMonitor,
}

/// A batch of transitions laid out for training.
pub struct TrainBatch {
    pub obs: Vec<Matrix>,      // per agent: B x obs_dim
    pub joint_obs: Matrix,     // B x (n * obs_dim)
    pub act: Vec<Vec<usize>>,  // [agent][row]
    pub joint_onehot: Matrix,  // B x (n * |A|)
    pub rew: Vec<f64>,
    pub done: Vec<bool>,
    pub next_obs: Vec<Matrix>,
    pub next_joint_obs: Matrix,
    pub masks: Vec<Vec<Vec<bool>>>,      // [agent][row][action]
    pub next_masks: Vec<Vec<Vec<bool>>>, // [agent][row][action]
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.rew.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rew.is_empty()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn concat_obs(obs: &JointObs) -> Vec<f64> {
    obs.iter().flatten().copied().collect()
}

impl CvfModel {
    pub fn new(
        dims: CvfDims,
        variant: MixerVariant,
        tau: f64,
        rho: f64,
        seed: u64,
    ) -> Result<Self> {
        validate_tau(tau)?;
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(OmacError::Config(format!("rho must be in (0,1], got {rho}")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = dims.n_agents;
        let d = dims.obs_dim;
        let a = dims.n_actions;
        let h = dims.hidden;
        let wh = dims.weight_hidden;
        let mk = |spec: MlpSpec, rng: &mut ChaCha20Rng| Net::new(spec, rng);
        let v_nets: Vec<Net> = (0..n)
            .map(|_| mk(MlpSpec::new(vec![d, h, h, 1]), &mut rng))
            .collect::<Result<_>>()?;
        let q_nets: Vec<Net> = (0..n)
            .map(|_| mk(MlpSpec::new(vec![d, h, h, a]), &mut rng))
            .collect::<Result<_>>()?;
        let q_targets = q_nets.clone();
        let v_share = mk(MlpSpec::new(vec![n * d, h, h, 1]), &mut rng)?;
        let enc_v = mk(MlpSpec::with_output_relu(vec![n * d, wh, wh]), &mut rng)?;
        let head_v = mk(MlpSpec::new(vec![wh, n]), &mut rng)?;
        let enc_q = mk(
            MlpSpec::with_output_relu(vec![n * d + n * a, wh, wh]),
            &mut rng,
        )?;
        let head_q_in = match variant {
            MixerVariant::CvfNoCca => wh,
            _ => 2 * wh,
        };
        let head_q = mk(MlpSpec::new(vec![head_q_in, n]), &mut rng)?;
        Ok(CvfModel {
            dims,
            variant,
            tau,
            rho,
            v_nets,
            q_nets,
            q_targets,
            v_share,
            enc_v,
            head_v,
            enc_q,
            head_q,
            monitor: InSampleMonitor::default(),
        })
    }

    pub fn joint_onehot(&self, action: &[usize]) -> Vec<f64> {
        let a = self.dims.n_actions;
        let mut out = vec![0.0; self.dims.n_agents * a];
        for (i, &ai) in action.iter().enumerate() {
            out[i * a + ai] = 1.0;
        }
        out
    }

    /// Local baseline value per agent: V_i(o_i), or max_a Q_i(o_i, a) over
    /// unmasked actions for the max-Q ablation.
    fn local_baseline(&self, agent: usize, obs_i: &[f64], mask: &[bool]) -> Result<f64> {
        match self.variant {
            MixerVariant::CvfMaxQ => {
                let q = self.q_nets[agent].forward_one(obs_i)?;
                masked_max(&q, mask)
            }
            _ => Ok(self.v_nets[agent].forward_one(obs_i)?[0]),
        }
    }

    /// Read-only view of the local baseline, e.g. for advantage weighting
    /// during policy extraction.
    pub fn baseline_value(&self, agent: usize, obs_i: &[f64], mask: &[bool]) -> Result<f64> {
        self.local_baseline(agent, obs_i, mask)
    }

    /// Credit-assignment weights (w^v, w^q); both vectors have one entry per
    /// agent and are nonnegative by construction.
    pub fn cca_weights(&self, obs: &JointObs, action: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let joint = concat_obs(obs);
        if joint.len() != self.dims.n_agents * self.dims.obs_dim {
            return Err(OmacError::DimMismatch {
                expected: self.dims.n_agents * self.dims.obs_dim,
                got: joint.len(),
                context: "cca_weights joint observation".into(),
            });
        }
        let hv = self.enc_v.forward_one(&joint)?;
        let wv: Vec<f64> = self
            .head_v
            .forward_one(&hv)?
            .iter()
            .map(|y| y.abs())
            .collect();
        let mut qin = joint.clone();
        qin.extend(self.joint_onehot(action));
        let hq = self.enc_q.forward_one(&qin)?;
        let f2in: Vec<f64> = match self.variant {
            MixerVariant::CvfNoCca => hq,
            _ => hv.iter().chain(hq.iter()).copied().collect(),
        };
        let wq: Vec<f64> = self
            .head_q
            .forward_one(&f2in)?
            .iter()
            .map(|y| y.abs())
            .collect();
        Ok((wv, wq))
    }

    pub fn v_tot(&self, obs: &JointObs, masks: &[Vec<bool>]) -> Result<f64> {
        let joint = concat_obs(obs);
        let hv = self.enc_v.forward_one(&joint)?;
        let wv: Vec<f64> = self
            .head_v
            .forward_one(&hv)?
            .iter()
            .map(|y| y.abs())
            .collect();
        let vsh = self.v_share.forward_one(&joint)?[0];
        let mut total = vsh;
        for i in 0..self.dims.n_agents {
            total += wv[i] * self.local_baseline(i, &obs[i], &masks[i])?;
        }
        Ok(total)
    }

    pub fn q_tot(
        &self,
        obs: &JointObs,
        action: &[usize],
        masks: &[Vec<bool>],
        use_target: bool,
    ) -> Result<f64> {
        let (wv, wq) = self.cca_weights(obs, action)?;
        let joint = concat_obs(obs);
        let vsh = self.v_share.forward_one(&joint)?[0];
        match self.variant {
            MixerVariant::Linear => {
                let mut total = vsh;
                for i in 0..self.dims.n_agents {
                    let qrow = if use_target {
                        self.q_targets[i].forward_one(&obs[i])?
                    } else {
                        self.q_nets[i].forward_one(&obs[i])?
                    };
                    total += wv[i] * qrow[action[i]];
                }
                Ok(total)
            }
            _ => {
                let mut total = vsh;
                for i in 0..self.dims.n_agents {
                    let b = self.local_baseline(i, &obs[i], &masks[i])?;
                    let qrow = if use_target {
                        self.q_targets[i].forward_one(&obs[i])?
                    } else {
                        self.q_nets[i].forward_one(&obs[i])?
                    };
                    total += wv[i] * b + wq[i] * (qrow[action[i]] - b);
                }
                Ok(total)
            }
        }
    }

    /// Tuple of per-agent greedy actions over unmasked local Q values; ties
    /// broken by lowest action index.
    pub fn joint_greedy(&self, obs: &JointObs, masks: &[Vec<bool>]) -> Result<JointAction> {
        let mut out = Vec::with_capacity(self.dims.n_agents);
        for i in 0..self.dims.n_agents {
            let q = self.q_nets[i].forward_one(&obs[i])?;
            out.push(masked_argmax(&q, &masks[i])?);
        }
        Ok(JointAction(out))
    }

    /// Q-bar target parameters follow an exponential moving average of the
    /// online Q parameters.
    pub fn soft_update_targets(&mut self, rho: f64) {
        for (t, o) in self.q_targets.iter_mut().zip(self.q_nets.iter()) {
            t.ema_from(o, rho);
        }
    }

    // ---- training losses -------------------------------------------------

    /// Expectile regression of V_i toward in-sample target Q-bar values:
    /// mean L2^tau(Qbar_i(o_i, a_i) - V_i(o_i)). Returns the loss and the
    /// gradient w.r.t. the V_i net parameters.
    pub fn lv_loss_and_grad(&mut self, agent: usize, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(OmacError::Validation("empty batch".into()));
        }
        let b = batch.len();
        let (qbar_out, _) = self.q_targets[agent].forward(&batch.obs[agent])?;
        let mut u = Vec::with_capacity(b);
        let (v_out, tape) = self.v_nets[agent].forward(&batch.obs[agent])?;
        for r in 0..b {
            let a = batch.act[agent][r];
            self.monitor.record(a, a);
            u.push(qbar_out.get(r, a) - v_out.get(r, 0));
        }
        let (loss_vec, dldu) = expectile_loss(&u, self.tau)?;
        let loss = loss_vec.iter().sum::<f64>() / b as f64;
        let mut gout = Matrix::zeros(b, 1);
        for r in 0..b {
            // u = qbar - v, so dL/dv = -dL/du
            gout.set(r, 0, -dldu[r] / b as f64);
        }
        let (grads, _) = self.v_nets[agent].backward(tape, &gout)?;
        Ok((loss, grads))
    }

    /// Squared TD error of the assembled Q_tot against the target
    /// r + gamma * V_tot(o') (zero bootstrap on terminal transitions).
    ///
    /// Gradients flow into the local Q nets, the weight heads and encoders,
    /// and V_share — on both the prediction and bootstrap sides — while the
    /// V_i values inside the assembly are treated as constants. Under the
    /// max-Q ablation the substituted local maxima are differentiated through
    /// their argmax. Returns the loss and the gradient over
    /// `global_param_vec` order.
    pub fn lq_loss_and_grad(&mut self, batch: &TrainBatch, gamma: f64) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(OmacError::Validation("empty batch".into()));
        }
        let b = batch.len();
        let n = self.dims.n_agents;
        let a_dim = self.dims.n_actions;
        let bf = b as f64;
        let is_maxq = matches!(self.variant, MixerVariant::CvfMaxQ);

        // Per-agent baselines at o and o'. For the standard variants these
        // are detached V_i values; for max-Q they are local maxima of Q_i
        // with the attaining action recorded for the backward pass.
        let mut base = vec![vec![0.0; b]; n];
        let mut base_next = vec![vec![0.0; b]; n];
        let mut base_arg = vec![vec![0usize; b]; n];
        let mut base_next_arg = vec![vec![0usize; b]; n];
        let mut q_tapes = Vec::with_capacity(n);
        let mut qn_tapes = Vec::with_capacity(n);
        let mut q_sel = vec![vec![0.0; b]; n];
        for i in 0..n {
            let (q_out, tape) = self.q_nets[i].forward(&batch.obs[i])?;
            for r in 0..b {
                let a = batch.act[i][r];
                self.monitor.record(a, a);
                q_sel[i][r] = q_out.get(r, a);
            }
            if is_maxq {
                let (qn_out, qn_tape) = self.q_nets[i].forward(&batch.next_obs[i])?;
                for r in 0..b {
                    for a in 0..a_dim {
                        if batch.masks[i][r][a] {
                            self.monitor.record(a, batch.act[i][r]);
                        }
                    }
                    let am = masked_argmax(q_out.row(r), &batch.masks[i][r])?;
                    base[i][r] = q_out.get(r, am);
                    base_arg[i][r] = am;
                    if !batch.done[r] {
                        for a in 0..a_dim {
                            if batch.next_masks[i][r][a] {
                                self.monitor.record(a, batch.act[i][r]);
                            }
                        }
                        let am = masked_argmax(qn_out.row(r), &batch.next_masks[i][r])?;
                        base_next[i][r] = qn_out.get(r, am);
                        base_next_arg[i][r] = am;
                    }
                }
                qn_tapes.push(Some(qn_tape));
            } else {
                let (v_out, _) = self.v_nets[i].forward(&batch.obs[i])?;
                let (vn_out, _) = self.v_nets[i].forward(&batch.next_obs[i])?;
                for r in 0..b {
                    base[i][r] = v_out.get(r, 0);
                    base_next[i][r] = vn_out.get(r, 0);
                }
                qn_tapes.push(None);
            }
            q_tapes.push(tape);
        }

        // Bootstrap side: V_tot(o') with tapes (only V_i is constant).
        let (hv_next, tape_enc_v_next) = self.enc_v.forward(&batch.next_joint_obs)?;
        let (yv_next, tape_head_v_next) = self.head_v.forward(&hv_next)?;
        let (vsh_next, tape_vsh_next) = self.v_share.forward(&batch.next_joint_obs)?;
        let mut target = Vec::with_capacity(b);
        for r in 0..b {
            let mut vtot_next = vsh_next.get(r, 0);
            for i in 0..n {
                vtot_next += yv_next.get(r, i).abs() * base_next[i][r];
            }
            let bootstrap = if batch.done[r] { 0.0 } else { gamma * vtot_next };
            target.push(batch.rew[r] + bootstrap);
        }

        // Prediction side, with tapes.
        let (hv, tape_enc_v) = self.enc_v.forward(&batch.joint_obs)?;
        let (yv, tape_head_v) = self.head_v.forward(&hv)?;
        let (vsh, tape_vsh) = self.v_share.forward(&batch.joint_obs)?;

        let coupled = !matches!(self.variant, MixerVariant::CvfNoCca);
        let use_wq = !matches!(self.variant, MixerVariant::Linear);
        let wh = self.enc_v.out_dim();

        let (tape_enc_q, yq, tape_head_q) = if use_wq {
            let qin = batch.joint_obs.hcat(&batch.joint_onehot);
            let (hq, tape_enc_q) = self.enc_q.forward(&qin)?;
            let f2in = if coupled { hv.hcat(&hq) } else { hq };
            let (yq, tape_head_q) = self.head_q.forward(&f2in)?;
            (Some(tape_enc_q), Some(yq), Some(tape_head_q))
        } else {
            (None, None, None)
        };

        // Assemble Q_tot and the loss.
        let mut qtot = Vec::with_capacity(b);
        for r in 0..b {
            let mut total = vsh.get(r, 0);
            match self.variant {
                MixerVariant::Linear => {
                    for i in 0..n {
                        total += yv.get(r, i).abs() * q_sel[i][r];
                    }
                }
                _ => {
                    let yq = yq.as_ref().unwrap();
                    for i in 0..n {
                        let wv = yv.get(r, i).abs();
                        let wq = yq.get(r, i).abs();
                        total += wv * base[i][r] + wq * (q_sel[i][r] - base[i][r]);
                    }
                }
            }
            qtot.push(total);
        }
        let mut loss = 0.0;
        let mut g = Vec::with_capacity(b);
        for r in 0..b {
            let e = qtot[r] - target[r];
            loss += e * e / bf;
            g.push(2.0 * e / bf);
        }
        // dL/dtarget = -g, scaled by gamma on non-terminal rows.
        let gt: Vec<f64> = (0..b)
            .map(|r| if batch.done[r] { 0.0 } else { -g[r] * gamma })
            .collect();

        // Backward: prediction side.
        let mut acc_q: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; self.q_nets[i].n_params()]).collect();
        let mut acc_vsh = vec![0.0; self.v_share.n_params()];
        let mut acc_enc_v = vec![0.0; self.enc_v.n_params()];
        let mut acc_head_v = vec![0.0; self.head_v.n_params()];
        let mut acc_enc_q = vec![0.0; self.enc_q.n_params()];
        let mut acc_head_q = vec![0.0; self.head_q.n_params()];
        let add = |acc: &mut [f64], g: Vec<f64>| {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        };

        let mut gout_vsh = Matrix::zeros(b, 1);
        for r in 0..b {
            gout_vsh.set(r, 0, g[r]);
        }
        add(&mut acc_vsh, self.v_share.backward(tape_vsh, &gout_vsh)?.0);

        let mut d_yv = Matrix::zeros(b, n);
        let mut d_yq = Matrix::zeros(b, n);
        let mut gout_q: Vec<Matrix> = (0..n)
            .map(|i| Matrix::zeros(b, self.q_nets[i].out_dim()))
            .collect();
        for r in 0..b {
            match self.variant {
                MixerVariant::Linear => {
                    for i in 0..n {
                        d_yv.set(r, i, g[r] * q_sel[i][r] * sign(yv.get(r, i)));
                        let c = gout_q[i].get(r, batch.act[i][r]);
                        gout_q[i].set(r, batch.act[i][r], c + g[r] * yv.get(r, i).abs());
                    }
                }
                _ => {
                    let yq_m = yq.as_ref().unwrap();
                    for i in 0..n {
                        let wv = yv.get(r, i).abs();
                        let wq = yq_m.get(r, i).abs();
                        d_yv.set(r, i, g[r] * base[i][r] * sign(yv.get(r, i)));
                        let adv = q_sel[i][r] - base[i][r];
                        d_yq.set(r, i, g[r] * adv * sign(yq_m.get(r, i)));
                        let c = gout_q[i].get(r, batch.act[i][r]);
                        gout_q[i].set(r, batch.act[i][r], c + g[r] * wq);
                        if is_maxq {
                            // base appears as wv*base - wq*base
                            let am = base_arg[i][r];
                            let c = gout_q[i].get(r, am);
                            gout_q[i].set(r, am, c + g[r] * (wv - wq));
                        }
                    }
                }
            }
        }

        let (g_head_v, mut d_hv) = self.head_v.backward(tape_head_v, &d_yv)?;
        add(&mut acc_head_v, g_head_v);
        if use_wq {
            let (g_head_q, d_f2in) = self.head_q.backward(tape_head_q.unwrap(), &d_yq)?;
            add(&mut acc_head_q, g_head_q);
            let d_hq = if coupled {
                let d_hv_from_q = d_f2in.columns(0, wh);
                for k in 0..d_hv.data.len() {
                    d_hv.data[k] += d_hv_from_q.data[k];
                }
                d_f2in.columns(wh, d_f2in.cols)
            } else {
                d_f2in
            };
            add(&mut acc_enc_q, self.enc_q.backward(tape_enc_q.unwrap(), &d_hq)?.0);
        }
        add(&mut acc_enc_v, self.enc_v.backward(tape_enc_v, &d_hv)?.0);

        // Backward: bootstrap side (V_tot(o') minus the constant V_i values).
        let mut gout_vsh_next = Matrix::zeros(b, 1);
        let mut d_yv_next = Matrix::zeros(b, n);
        for r in 0..b {
            gout_vsh_next.set(r, 0, gt[r]);
            for i in 0..n {
                d_yv_next.set(r, i, gt[r] * base_next[i][r] * sign(yv_next.get(r, i)));
            }
        }
        add(
            &mut acc_vsh,
            self.v_share.backward(tape_vsh_next, &gout_vsh_next)?.0,
        );
        let (g_head_v_next, d_hv_next) = self.head_v.backward(tape_head_v_next, &d_yv_next)?;
        add(&mut acc_head_v, g_head_v_next);
        add(
            &mut acc_enc_v,
            self.enc_v.backward(tape_enc_v_next, &d_hv_next)?.0,
        );

        // Local Q nets: selected-action and (for max-Q) argmax paths.
        for i in (0..n).rev() {
            let tape = q_tapes.pop().unwrap();
            add(&mut acc_q[i], self.q_nets[i].backward(tape, &gout_q[i])?.0);
            if let Some(qn_tape) = qn_tapes.pop().unwrap() {
                let mut gout_qn = Matrix::zeros(b, a_dim);
                for r in 0..b {
                    if !batch.done[r] {
                        let am = base_next_arg[i][r];
                        gout_qn.set(r, am, gt[r] * yv_next.get(r, i).abs());
                    }
                }
                add(&mut acc_q[i], self.q_nets[i].backward(qn_tape, &gout_qn)?.0);
            }
        }

        let mut flat = Vec::new();
        for gq in acc_q {
            flat.extend(gq);
        }
        flat.extend(acc_vsh);
        flat.extend(acc_enc_v);
        flat.extend(acc_head_v);
        flat.extend(acc_enc_q);
        flat.extend(acc_head_q);
        Ok((loss, flat))
    }

    /// Sum of mean w^q entries over the batch; used to verify that the
    /// coupled encoder ties w^q training to w^v.
    pub fn wq_mean_loss_and_grad(&mut self, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
        let b = batch.len();
        let n = self.dims.n_agents;
        let coupled = !matches!(self.variant, MixerVariant::CvfNoCca);
        let wh = self.enc_v.out_dim();
        let (hv, tape_enc_v) = self.enc_v.forward(&batch.joint_obs)?;
        let qin = batch.joint_obs.hcat(&batch.joint_onehot);
        let (hq, tape_enc_q) = self.enc_q.forward(&qin)?;
        let f2in = if coupled { hv.hcat(&hq) } else { hq };
        let (yq, tape_head_q) = self.head_q.forward(&f2in)?;
        let bf = b as f64;
        let mut loss = 0.0;
        let mut d_yq = Matrix::zeros(b, n);
        for r in 0..b {
            for i in 0..n {
                loss += yq.get(r, i).abs() / bf;
                d_yq.set(r, i, sign(yq.get(r, i)) / bf);
            }
        }
        let (grads_head_q, d_f2in) = self.head_q.backward(tape_head_q, &d_yq)?;
        let (d_hv, d_hq) = if coupled {
            (d_f2in.columns(0, wh), d_f2in.columns(wh, d_f2in.cols))
        } else {
            (Matrix::zeros(b, wh), d_f2in)
        };
        let (grads_enc_q, _) = self.enc_q.backward(tape_enc_q, &d_hq)?;
        let (grads_enc_v, _) = self.enc_v.backward(tape_enc_v, &d_hv)?;
        let mut flat = Vec::new();
        for i in 0..n {
            flat.extend(vec![0.0; self.q_nets[i].n_params()]);
        }
        flat.extend(vec![0.0; self.v_share.n_params()]);
        flat.extend(grads_enc_v);
        flat.extend(vec![0.0; self.head_v.n_params()]);
        flat.extend(grads_enc_q);
        flat.extend(grads_head_q);
        Ok((loss, flat))
    }

    // ---- parameter plumbing ---------------------------------------------

    /// Nets trained by the global TD loss, in flat-gradient order.
    fn global_nets(&self) -> Vec<&Net> {
        let mut v: Vec<&Net> = self.q_nets.iter().collect();
        v.push(&self.v_share);
        v.push(&self.enc_v);
        v.push(&self.head_v);
        v.push(&self.enc_q);
        v.push(&self.head_q);
        v
    }

    fn global_nets_mut(&mut self) -> Vec<&mut Net> {
        let mut v: Vec<&mut Net> = self.q_nets.iter_mut().collect();
        v.push(&mut self.v_share);
        v.push(&mut self.enc_v);
        v.push(&mut self.head_v);
        v.push(&mut self.enc_q);
        v.push(&mut self.head_q);
        v
    }

    pub fn global_param_vec(&self) -> Vec<f64> {
        self.global_nets()
            .iter()
            .flat_map(|n| n.params().iter().copied())
            .collect()
    }

    pub fn set_global_params(&mut self, values: &[f64]) {
        let mut off = 0;
        for net in self.global_nets_mut() {
            let len = net.n_params();
            net.set_params(&values[off..off + len]);
            off += len;
        }
        assert_eq!(off, values.len());
    }

    pub fn global_adam_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        let mut off = 0;
        for net in self.global_nets_mut() {
            let len = net.n_params();
            net.adam_step(&grads[off..off + len], lr)?;
            off += len;
        }
        debug_assert_eq!(off, grads.len());
        Ok(())
    }
}

pub fn masked_max(values: &[f64], mask: &[bool]) -> Result<f64> {
    let mut best: Option<f64> = None;
    for (v, &m) in values.iter().zip(mask.iter()) {
        if m && best.map_or(true, |b| *v > b) {
            best = Some(*v);
        }
    }
    best.ok_or_else(|| OmacError::Validation("all actions masked".into()))
}

pub fn masked_argmax(values: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (a, (v, &m)) in values.iter().zip(mask.iter()).enumerate() {
        if m && best.map_or(true, |(_, bv)| *v > bv) {
            best = Some((a, *v));
        }
    }
    best.map(|(a, _)| a)
        .ok_or_else(|| OmacError::Validation("all actions masked".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::grad_check;
    use rand::Rng;

    pub fn random_batch(dims: &CvfDims, b: usize, seed: u64) -> TrainBatch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = dims.n_agents;
        let d = dims.obs_dim;
        let a = dims.n_actions;
        let mut obs = Vec::new();
        let mut next_obs = Vec::new();
        let mut act = vec![Vec::new(); n];
        for i in 0..n {
            let mut m = Matrix::zeros(b, d);
            let mut mn = Matrix::zeros(b, d);
            for r in 0..b {
                for c in 0..d {
                    m.set(r, c, rng.gen_range(-1.0..1.0));
                    mn.set(r, c, rng.gen_range(-1.0..1.0));
                }
                act[i].push(rng.gen_range(0..a));
            }
            obs.push(m);
            next_obs.push(mn);
        }
        let mut joint_obs = Matrix::zeros(b, n * d);
        let mut next_joint_obs = Matrix::zeros(b, n * d);
        let mut joint_onehot = Matrix::zeros(b, n * a);
        for r in 0..b {
            for i in 0..n {
                for c in 0..d {
                    joint_obs.set(r, i * d + c, obs[i].get(r, c));
                    next_joint_obs.set(r, i * d + c, next_obs[i].get(r, c));
                }
                joint_onehot.set(r, i * a + act[i][r], 1.0);
            }
        }
        let rew: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let done: Vec<bool> = (0..b).map(|r| r % 3 == 0).collect();
        let masks = vec![vec![vec![true; a]; b]; n];
        let next_masks = masks.clone();
        TrainBatch {
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
        }
    }

    fn check_lq_gradient(variant: MixerVariant, seed: u64) -> f64 {
        let dm = dims(2, 3, 4);
        let model = CvfModel::new(dm, variant, 0.7, 0.005, seed).unwrap();
        let batch = random_batch(&dm, 6, seed + 100);
        let p0 = model.global_param_vec();
        let mut eval = |p: &[f64]| {
            let mut m = model.clone();
            m.set_global_params(p);
            m.lq_loss_and_grad(&batch, 0.99).unwrap()
        };
        let indices: Vec<usize> = (0..p0.len()).step_by(7).collect();
        grad_check(&mut eval, &p0, &indices, 1e-5).max_rel_err
    }

    #[test]
    fn lq_gradient_matches_finite_differences_all_variants() {
        for (variant, seed) in [
            (MixerVariant::Cvf, 11),
            (MixerVariant::CvfNoCca, 12),
            (MixerVariant::Linear, 13),
            (MixerVariant::CvfMaxQ, 14),
        ] {
            let err = check_lq_gradient(variant, seed);
            assert!(err < 1e-4, "{variant:?}: max rel err {err}");
        }
    }

    #[test]
    fn lv_gradient_matches_finite_differences() {
        let dm = dims(2, 3, 4);
        let mut model = CvfModel::new(dm, MixerVariant::Cvf, 0.7, 0.005, 21).unwrap();
        let batch = random_batch(&dm, 6, 22);
        let p0 = model.v_nets[0].params().to_vec();
        let base = model.clone();
        let mut eval = |p: &[f64]| {
            let mut m = base.clone();
            m.v_nets[0].set_params(p);
            m.lv_loss_and_grad(0, &batch).unwrap()
        };
        let indices: Vec<usize> = (0..p0.len()).step_by(3).collect();
        let report = grad_check(&mut eval, &p0, &indices, 1e-5);
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
        let _ = model.lv_loss_and_grad(0, &batch);
    }

    #[test]
    fn cca_coupling_routes_wq_gradient_into_shared_encoder() {
        let dm = dims(2, 3, 4);
        let batch = random_batch(&dm, 5, 31);
        let mut coupled = CvfModel::new(dm, MixerVariant::Cvf, 0.7, 0.005, 32).unwrap();
        let (_, g) = coupled.wq_mean_loss_and_grad(&batch).unwrap();
        let enc_v_off: usize = coupled.q_nets.iter().map(|n| n.n_params()).sum::<usize>()
            + coupled.v_share.n_params();
        let enc_v_grad = &g[enc_v_off..enc_v_off + coupled.enc_v.n_params()];
        assert!(enc_v_grad.iter().any(|&x| x != 0.0));

        let mut severed = CvfModel::new(dm, MixerVariant::CvfNoCca, 0.7, 0.005, 32).unwrap();
        let (_, g) = severed.wq_mean_loss_and_grad(&batch).unwrap();
        let enc_v_grad = &g[enc_v_off..enc_v_off + severed.enc_v.n_params()];
        assert!(enc_v_grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn in_sample_monitor_counts_maxq_reads() {
        let dm = dims(2, 3, 4);
        let batch = random_batch(&dm, 5, 41);
        let mut model = CvfModel::new(dm, MixerVariant::Cvf, 0.7, 0.005, 42).unwrap();
        model.monitor.enabled = true;
        let _ = model.lv_loss_and_grad(0, &batch).unwrap();
        let _ = model.lq_loss_and_grad(&batch, 0.99).unwrap();
        assert_eq!(model.monitor.off_sample_reads, 0);
        assert!(model.monitor.in_sample_reads > 0);

        let mut maxq = CvfModel::new(dm, MixerVariant::CvfMaxQ, 0.7, 0.005, 42).unwrap();
        maxq.monitor.enabled = true;
        let _ = maxq.lq_loss_and_grad(&batch, 0.99).unwrap();
        assert!(maxq.monitor.off_sample_reads > 0);
    }

    fn dims(n: usize, a: usize, d: usize) -> CvfDims {
        CvfDims {
            n_agents: n,
            n_actions: a,
            obs_dim: d,
            hidden: 8,
            weight_hidden: 4,
        }
    }

    fn obs_for(n: usize, d: usize, seed: u64) -> JointObs {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn full_masks(n: usize, a: usize) -> Vec<Vec<bool>> {
        vec![vec![true; a]; n]
    }

    #[test]
    fn weights_nonnegative() {
        let model = CvfModel::new(dims(2, 3, 4), MixerVariant::Cvf, 0.7, 0.005, 1).unwrap();
        for seed in 0..100 {
            let obs = obs_for(2, 4, seed);
            let (wv, wq) = model.cca_weights(&obs, &[seed as usize % 3, 0]).unwrap();
            assert!(wv.iter().chain(wq.iter()).all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn wv_is_action_independent() {
        let model = CvfModel::new(dims(2, 3, 4), MixerVariant::Cvf, 0.7, 0.005, 2).unwrap();
        let obs = obs_for(2, 4, 7);
        let (wv1, wq1) = model.cca_weights(&obs, &[0, 0]).unwrap();
        let (wv2, wq2) = model.cca_weights(&obs, &[2, 1]).unwrap();
        assert_eq!(wv1, wv2);
        assert_ne!(wq1, wq2);
    }

    #[test]
    fn zero_heads_give_zero_weights() {
        let mut model = CvfModel::new(dims(2, 2, 3), MixerVariant::Cvf, 0.7, 0.005, 3).unwrap();
        let z = vec![0.0; model.head_v.n_params()];
        model.head_v.set_params(&z);
        let z = vec![0.0; model.head_q.n_params()];
        model.head_q.set_params(&z);
        let obs = obs_for(2, 3, 1);
        let (wv, wq) = model.cca_weights(&obs, &[0, 1]).unwrap();
        assert!(wv.iter().all(|&w| w == 0.0));
        assert!(wq.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn joint_greedy_per_agent_argmax_and_ties() {
        let mut model = CvfModel::new(dims(2, 2, 2), MixerVariant::Cvf, 0.7, 0.005, 4).unwrap();
        // Make Q nets produce fixed outputs by zeroing all but the output bias.
        for i in 0..2 {
            let z = vec![0.0; model.q_nets[i].n_params()];
            model.q_nets[i].set_params(&z);
        }
        // Output layer biases are the last `out_dim` params of the store.
        let set_bias = |net: &mut Net, bias: &[f64]| {
            let mut p = net.params().to_vec();
            let n = p.len();
            p[n - bias.len()..].copy_from_slice(bias);
            net.set_params(&p);
        };
        set_bias(&mut model.q_nets[0], &[0.1, 0.9]);
        set_bias(&mut model.q_nets[1], &[2.0, 1.0]);
        let obs = obs_for(2, 2, 0);
        let act = model.joint_greedy(&obs, &full_masks(2, 2)).unwrap();
        assert_eq!(act.0, vec![1, 0]);
        // exact tie -> lowest index
        set_bias(&mut model.q_nets[0], &[1.0, 1.0]);
        let act = model.joint_greedy(&obs, &full_masks(2, 2)).unwrap();
        assert_eq!(act.0[0], 0);
    }

    #[test]
    fn soft_update_full_copy_and_geometric_gap() {
        let mut model = CvfModel::new(dims(2, 2, 2), MixerVariant::Cvf, 0.7, 0.005, 5).unwrap();
        // Make targets differ, then rho=1 copies exactly.
        let zeros = vec![0.0; model.q_targets[0].n_params()];
        model.q_targets[0].set_params(&zeros);
        model.soft_update_targets(1.0);
        assert_eq!(model.q_targets[0].params(), model.q_nets[0].params());
        // rho=0.005 from zero targets: gap scales by (1-rho)^k
        model.q_targets[0].set_params(&zeros);
        let online = model.q_nets[0].params().to_vec();
        for _ in 0..3 {
            model.soft_update_targets(0.005);
        }
        let expect: Vec<f64> = online.iter().map(|&o| o * (1.0 - 0.995f64.powi(3))).collect();
        for (t, e) in model.q_targets[0].params().iter().zip(expect.iter()) {
            assert!((t - e).abs() < 1e-12);
        }
    }

    #[test]
    fn v_tot_linear_combination() {
        // n=2, w^v=(1,1), V_1=1, V_2=2, V_share=0.5 -> 3.5
        let mut model = CvfModel::new(dims(2, 2, 2), MixerVariant::Cvf, 0.7, 0.005, 6).unwrap();
        let zero_then_bias = |net: &mut Net, bias: &[f64]| {
            let mut p = vec![0.0; net.n_params()];
            let n = p.len();
            p[n - bias.len()..].copy_from_slice(bias);
            net.set_params(&p);
        };
        zero_then_bias(&mut model.v_nets[0], &[1.0]);
        zero_then_bias(&mut model.v_nets[1], &[2.0]);
        zero_then_bias(&mut model.v_share, &[0.5]);
        zero_then_bias(&mut model.enc_v, &[0.0; 4]);
        zero_then_bias(&mut model.head_v, &[1.0, 1.0]);
        let obs = obs_for(2, 2, 1);
        let v = model.v_tot(&obs, &full_masks(2, 2)).unwrap();
        assert!((v - 3.5).abs() < 1e-12);
        // w^v all zero -> V_tot = V_share
        zero_then_bias(&mut model.head_v, &[0.0, 0.0]);
        let v = model.v_tot(&obs, &full_masks(2, 2)).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn q_tot_advantage_substitution() {
        // advantages (-0.5, 0), w^q=(1,1), V_tot=3.5 -> Q_tot=3.0
        let mut model = CvfModel::new(dims(2, 2, 2), MixerVariant::Cvf, 0.7, 0.005, 7).unwrap();
        let zero_then_bias = |net: &mut Net, bias: &[f64]| {
            let mut p = vec![0.0; net.n_params()];
            let n = p.len();
            p[n - bias.len()..].copy_from_slice(bias);
            net.set_params(&p);
        };
        zero_then_bias(&mut model.v_nets[0], &[1.0]);
        zero_then_bias(&mut model.v_nets[1], &[2.0]);
        zero_then_bias(&mut model.v_share, &[0.5]);
        zero_then_bias(&mut model.enc_v, &[0.0; 4]);
        zero_then_bias(&mut model.head_v, &[1.0, 1.0]);
        zero_then_bias(&mut model.enc_q, &[0.0; 4]);
        zero_then_bias(&mut model.head_q, &[1.0, 1.0]);
        // Q_1(a0)=0.5 (adv -0.5), Q_2(a0)=2.0 (adv 0)
        zero_then_bias(&mut model.q_nets[0], &[0.5, 0.0]);
        zero_then_bias(&mut model.q_nets[1], &[2.0, 0.0]);
        let obs = obs_for(2, 2, 2);
        let q = model
            .q_tot(&obs, &[0, 0], &full_masks(2, 2), false)
            .unwrap();
        assert!((q - 3.0).abs() < 1e-12);
        // zero advantages -> Q_tot = V_tot for every joint action
        zero_then_bias(&mut model.q_nets[0], &[1.0, 1.0]);
        zero_then_bias(&mut model.q_nets[1], &[2.0, 2.0]);
        let vtot = model.v_tot(&obs, &full_masks(2, 2)).unwrap();
        for a0 in 0..2 {
            for a1 in 0..2 {
                let q = model
                    .q_tot(&obs, &[a0, a1], &full_masks(2, 2), false)
                    .unwrap();
                assert!((q - vtot).abs() < 1e-12);
            }
        }
    }
}
