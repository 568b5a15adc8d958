//! Offline datasets of controlled quality: generation by epsilon-greedy
//! perturbation of a planner-optimal joint policy, JSON Lines
//! serialization, episode-level subsampling, and summaries including the
//! empirical joint-action support.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvSpec, JointAction, JointObs, StateId, TabularModel};
use crate::error::{OmacError, Result};
use crate::oracle::{optimal_joint_policy, SupportSet};

pub const FORMAT_VERSION: &str = "1";
pub const FILE_EXTENSION: &str = "omd.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Good,
    Medium,
    Poor,
}

impl Tier {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(Tier::Good),
            "medium" => Ok(Tier::Medium),
            "poor" => Ok(Tier::Poor),
            other => Err(OmacError::Config(format!(
                "unknown tier '{other}', expected good|medium|poor"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Good => "good",
            Tier::Medium => "medium",
            Tier::Poor => "poor",
        }
    }

    /// Probability of replacing the planner action with a uniform legal one.
    pub fn epsilon(&self) -> f64 {
        match self {
            Tier::Good => 0.1,
            Tier::Medium => 0.4,
            Tier::Poor => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: JointObs,
    pub act: Vec<usize>,
    pub rew: f64,
    pub done: bool,
    pub mask: Vec<Vec<bool>>,
    pub next_obs: JointObs,
}

/// One trajectory. Exactly one step has done=true and it is the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub meta_idx: usize,
}

impl EpisodeRecord {
    pub fn undiscounted_return(&self) -> f64 {
        self.steps.iter().map(|s| s.rew).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: String,
    pub env: EnvConfig,
    pub env_fingerprint: String,
    pub tier: String,
    pub seed: u64,
    pub behavior: String,
    /// Subsampling provenance, newest last; empty for a freshly generated set.
    #[serde(default)]
    pub lineage: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetSummary {
    pub episodes: usize,
    pub steps: usize,
    pub mean_return: f64,
    /// Per-agent counts over action indices.
    pub action_histograms: Vec<Vec<usize>>,
    /// (state id, joint action index) pairs with count >= 1; present only
    /// when an environment was supplied for observation-to-state recovery.
    pub support: Option<Vec<(u64, usize)>>,
}

/// Generate episodes whose per-agent actions follow the planner-optimal
/// joint action with probability 1-epsilon and a uniform legal action
/// otherwise. Deterministic in (env config, tier, n_episodes, seed).
pub fn generate(env: &EnvSpec, tier: Tier, n_episodes: usize, seed: u64) -> Result<OfflineDataset> {
    let eps = tier.epsilon();
    let behavior = format!(
        "epsilon-greedy around planner-optimal joint policy, epsilon={eps}"
    );
    let model = env.enumerate(crate::env::DEFAULT_ENUM_CAP)?;
    let policy = optimal_joint_policy(&model)?;
    generate_with(
        env,
        n_episodes,
        seed,
        tier.as_str(),
        &behavior,
        |s, masks, rng| {
            let si = model.index[&s];
            let planned = policy[si].map(|ja| model.unravel(ja));
            let mut out = Vec::with_capacity(masks.len());
            for (i, mask) in masks.iter().enumerate() {
                let explore = eps >= 1.0 || rng.gen_range(0.0..1.0) < eps;
                let a = if explore || planned.is_none() {
                    let legal: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
                    *legal.choose(rng).expect("state with no legal action")
                } else {
                    planned.as_ref().unwrap()[i]
                };
                out.push(a);
            }
            out
        },
    )
}

/// Generation with an arbitrary behavior policy; the policy sees the
/// current state and per-agent masks and returns one action per agent.
pub fn generate_with<F>(
    env: &EnvSpec,
    n_episodes: usize,
    seed: u64,
    tier_label: &str,
    behavior: &str,
    mut policy: F,
) -> Result<OfflineDataset>
where
    F: FnMut(StateId, &[Vec<bool>], &mut ChaCha20Rng) -> Vec<usize>,
{
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let reset_seed: u64 = master.gen();
        let (mut s, mut obs) = env.reset(reset_seed);
        let mut steps = Vec::new();
        loop {
            let masks = env.masks(s);
            let act = policy(s, &masks, &mut master);
            let (ns, next_obs, rew, done) =
                env.step(s, &JointAction(act.clone()), &mut master)?;
            steps.push(StepRecord {
                obs,
                act,
                rew,
                done,
                mask: masks,
                next_obs: next_obs.clone(),
            });
            if done {
                break;
            }
            s = ns;
            obs = next_obs;
        }
        episodes.push(EpisodeRecord { steps, meta_idx: 0 });
    }
    let dataset = OfflineDataset {
        meta: DatasetMeta {
            format_version: FORMAT_VERSION.to_string(),
            env: env.config(),
            env_fingerprint: env.fingerprint(),
            tier: tier_label.to_string(),
            seed,
            behavior: behavior.to_string(),
            lineage: Vec::new(),
        },
        episodes,
    };
    dataset.validate()?;
    Ok(dataset)
}

impl OfflineDataset {
    /// Every episode ends with its single done step and every stored action
    /// passes its stored mask.
    pub fn validate(&self) -> Result<()> {
        for (e, ep) in self.episodes.iter().enumerate() {
            if ep.steps.is_empty() {
                return Err(OmacError::Validation(format!("episode {e} has no steps")));
            }
            for (t, step) in ep.steps.iter().enumerate() {
                let last = t == ep.steps.len() - 1;
                if step.done != last {
                    return Err(OmacError::Validation(format!(
                        "episode {e} step {t}: done flag must mark exactly the last step"
                    )));
                }
                if step.act.len() != step.mask.len() {
                    return Err(OmacError::Validation(format!(
                        "episode {e} step {t}: {} actions but {} masks",
                        step.act.len(),
                        step.mask.len()
                    )));
                }
                for (i, &a) in step.act.iter().enumerate() {
                    if a >= step.mask[i].len() || !step.mask[i][a] {
                        return Err(OmacError::Validation(format!(
                            "episode {e} step {t}: agent {i} action {a} is illegal under its mask"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, env: &EnvSpec) -> Result<()> {
        let found = env.fingerprint();
        if self.meta.env_fingerprint != found {
            return Err(OmacError::FingerprintMismatch {
                expected: self.meta.env_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| OmacError::Validation(format!("meta serialization failed: {e}")))?;
        writeln_str(&mut out, &meta);
        for ep in &self.episodes {
            let line = serde_json::to_string(ep)
                .map_err(|e| OmacError::Validation(format!("episode serialization failed: {e}")))?;
            writeln_str(&mut out, &line);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<OfflineDataset> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> Result<OfflineDataset> {
        let mut lines = text.lines().enumerate();
        let (_, meta_line) = lines
            .next()
            .ok_or_else(|| OmacError::Parse {
                line: 1,
                msg: "empty file, expected a meta line".into(),
            })?;
        let meta: DatasetMeta = serde_json::from_str(meta_line).map_err(|e| OmacError::Parse {
            line: 1,
            msg: format!("bad meta line: {e}"),
        })?;
        if meta.format_version != FORMAT_VERSION {
            return Err(OmacError::Parse {
                line: 1,
                msg: format!(
                    "unsupported format version '{}', expected '{}'",
                    meta.format_version, FORMAT_VERSION
                ),
            });
        }
        let mut episodes = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let ep: EpisodeRecord = serde_json::from_str(line).map_err(|e| OmacError::Parse {
                line: idx + 1,
                msg: format!("bad episode line: {e}"),
            })?;
            episodes.push(ep);
        }
        let dataset = OfflineDataset { meta, episodes };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Keep floor(ratio * N) whole episodes chosen without replacement,
    /// preserving their original order. Deterministic in the seed.
    pub fn subsample(&self, ratio: f64, seed: u64) -> Result<OfflineDataset> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(OmacError::Config(format!(
                "subsample ratio must be in (0, 1], got {ratio}"
            )));
        }
        let n = self.episodes.len();
        let keep = ((ratio * n as f64).floor() as usize).min(n);
        if keep == 0 && n > 0 {
            return Err(OmacError::Config(format!(
                "ratio {ratio} of {n} episodes keeps none"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut chosen = rand::seq::index::sample(&mut rng, n.max(1), keep.min(n)).into_vec();
        chosen.sort_unstable();
        let episodes = chosen.iter().map(|&i| self.episodes[i].clone()).collect();
        let mut meta = self.meta.clone();
        meta.lineage
            .push(format!("subsample ratio={ratio} seed={seed} kept={keep} of {n}"));
        Ok(OfflineDataset { meta, episodes })
    }

    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// Summary statistics; pass the environment to recover per-state
    /// joint-action support from observations.
    pub fn summary(&self, env: Option<&EnvSpec>) -> DatasetSummary {
        let episodes = self.episodes.len();
        let steps = self.step_count();
        let mean_return = if episodes == 0 {
            0.0
        } else {
            self.episodes
                .iter()
                .map(|e| e.undiscounted_return())
                .sum::<f64>()
                / episodes as f64
        };
        let n_agents = self
            .episodes
            .first()
            .map(|e| e.steps[0].act.len())
            .unwrap_or(0);
        let n_actions = self
            .episodes
            .first()
            .map(|e| e.steps[0].mask[0].len())
            .unwrap_or(0);
        let mut action_histograms = vec![vec![0usize; n_actions]; n_agents];
        for ep in &self.episodes {
            for step in &ep.steps {
                for (i, &a) in step.act.iter().enumerate() {
                    action_histograms[i][a] += 1;
                }
            }
        }
        let support = env.map(|env| {
            let mut counts: BTreeMap<(u64, usize), usize> = BTreeMap::new();
            for ep in &self.episodes {
                for step in &ep.steps {
                    if let Some(s) = env.state_from_joint_obs(&step.obs) {
                        let ja = env.joint_action_index(&step.act);
                        *counts.entry((s.0, ja)).or_insert(0) += 1;
                    }
                }
            }
            counts.into_keys().collect()
        });
        DatasetSummary {
            episodes,
            steps,
            mean_return,
            action_histograms,
            support,
        }
    }

    /// Empirical support aligned with an enumerated model's state indexing.
    pub fn support_set(&self, env: &EnvSpec, model: &TabularModel) -> Result<SupportSet> {
        let mut support = SupportSet::empty(model);
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, step) in ep.steps.iter().enumerate() {
                let s = env.state_from_joint_obs(&step.obs).ok_or_else(|| {
                    OmacError::Validation(format!(
                        "episode {e} step {t}: observation does not decode to a state"
                    ))
                })?;
                let si = *model.index.get(&s).ok_or_else(|| {
                    OmacError::Validation(format!(
                        "episode {e} step {t}: state {} not in the enumerated model",
                        s.0
                    ))
                })?;
                support.insert(si, model.joint_action_index(&step.act));
            }
        }
        Ok(support)
    }
}

fn writeln_str(buf: &mut String, line: &str) {
    let _ = writeln!(buf, "{line}");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_env() -> EnvSpec {
        EnvSpec::from_config(&EnvConfig::default_matrix()).unwrap()
    }

    #[test]
    fn poor_tier_is_near_uniform() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 1000, 0).unwrap();
        assert_eq!(d.episodes.len(), 1000);
        let mut joint_counts = [0usize; 4];
        for ep in &d.episodes {
            let a = &ep.steps[0].act;
            joint_counts[a[0] * 2 + a[1]] += 1;
        }
        for &c in &joint_counts {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.25).abs() <= 0.05, "joint freq {freq}");
        }
    }

    #[test]
    fn good_tier_concentrates_on_the_optimum() {
        let env = matrix_env();
        let d = generate(&env, Tier::Good, 1000, 1).unwrap();
        let hits = d
            .episodes
            .iter()
            .filter(|ep| ep.steps[0].act == vec![1, 1])
            .count();
        let freq = hits as f64 / 1000.0;
        // each agent keeps the planned action w.p. 1-eps+eps/2 = 0.95
        assert!((freq - 0.9025).abs() <= 0.03, "optimum freq {freq}");
    }

    #[test]
    fn zero_episodes_gives_valid_empty_dataset() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 0, 0).unwrap();
        assert!(d.episodes.is_empty());
        assert_eq!(d.meta.env_fingerprint, env.fingerprint());
        let s = d.summary(Some(&env));
        assert_eq!(s.episodes, 0);
        assert_eq!(s.steps, 0);
        assert_eq!(s.support, Some(vec![]));
    }

    #[test]
    fn generation_is_deterministic() {
        let env = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        let a = generate(&env, Tier::Medium, 20, 7).unwrap();
        let b = generate(&env, Tier::Medium, 20, 7).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = generate(&env, Tier::Medium, 20, 8).unwrap();
        assert_ne!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let env = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        let d = generate(&env, Tier::Good, 5, 3).unwrap();
        let text = d.to_jsonl().unwrap();
        let d2 = OfflineDataset::from_jsonl(&text).unwrap();
        assert_eq!(d, d2);
        assert_eq!(text, d2.to_jsonl().unwrap());
    }

    #[test]
    fn save_and_load_file() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 10, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.omd.jsonl");
        d.save(&path).unwrap();
        let loaded = OfflineDataset::load(&path).unwrap();
        assert_eq!(d, loaded);
        loaded.check_fingerprint(&env).unwrap();
    }

    #[test]
    fn truncated_file_is_a_parse_error_with_line_number() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 3, 0).unwrap();
        let text = d.to_jsonl().unwrap();
        let cut = &text[..text.len() - 10];
        let err = OfflineDataset::from_jsonl(cut).unwrap_err();
        match err {
            OmacError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn illegal_action_in_file_names_episode_and_step() {
        let env = matrix_env();
        let mut d = generate(&env, Tier::Poor, 2, 0).unwrap();
        d.episodes[1].steps[0].act[0] = 5;
        let text = d.to_jsonl().unwrap();
        let err = OfflineDataset::from_jsonl(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("episode 1") && msg.contains("step 0"), "{msg}");
    }

    #[test]
    fn fingerprint_mismatch_detected() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 1, 0).unwrap();
        let other = EnvSpec::from_config(&EnvConfig::default_grid()).unwrap();
        assert!(matches!(
            d.check_fingerprint(&other),
            Err(OmacError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn subsample_counts_and_determinism() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 1000, 0).unwrap();
        let half = d.subsample(0.5, 3).unwrap();
        assert_eq!(half.episodes.len(), 500);
        let again = d.subsample(0.5, 3).unwrap();
        assert_eq!(half, again);
        let tenth = d.subsample(0.1, 3).unwrap();
        assert_eq!(tenth.episodes.len(), 100);
        for ep in &tenth.episodes {
            assert!(d.episodes.contains(ep));
        }
        assert_eq!(d.subsample(1.0, 9).unwrap().episodes, d.episodes);
        assert!(d.subsample(0.0, 0).is_err());
        assert!(d.subsample(1.5, 0).is_err());
        assert_eq!(half.meta.lineage.len(), 1);
    }

    #[test]
    fn subsample_composes_on_counts() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 1000, 0).unwrap();
        let direct = d.subsample(0.5 * 0.2, 1).unwrap();
        let staged = d.subsample(0.5, 1).unwrap().subsample(0.2, 2).unwrap();
        assert_eq!(direct.episodes.len(), staged.episodes.len());
    }

    #[test]
    fn summary_support_counts() {
        let env = matrix_env();
        let d = generate(&env, Tier::Poor, 1000, 0).unwrap();
        let s = d.summary(Some(&env));
        // all 4 joint actions appear w.p. > 0.999 over 1000 poor episodes
        assert_eq!(s.support.as_ref().unwrap().len(), 4);
        assert_eq!(s.steps, 1000);
        let hist = &s.action_histograms;
        assert_eq!(hist.len(), 2);
        assert_eq!(hist[0].iter().sum::<usize>(), 1000);
    }

    #[test]
    fn support_set_restricted_by_construction() {
        let env = matrix_env();
        // behavior that never plays the optimal (1,1)
        let d = generate_with(&env, 200, 0, "poor", "uniform minus optimum", |_, masks, rng| {
            loop {
                let a: Vec<usize> = masks
                    .iter()
                    .map(|m| loop {
                        let x = rng.gen_range(0..m.len());
                        if m[x] {
                            break x;
                        }
                    })
                    .collect();
                if a != vec![1, 1] {
                    break a;
                }
            }
        })
        .unwrap();
        let model = env.enumerate(crate::env::DEFAULT_ENUM_CAP).unwrap();
        let support = d.support_set(&env, &model).unwrap();
        let s0 = model.index[&StateId(0)];
        assert!(!support.per_state[s0].contains(&3));
        assert_eq!(support.per_state[s0].len(), 3);
    }
}
