//! Command-line front end: dataset generation, training, evaluation,
//! invariant verification, and ablation sweeps.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error,
//! 3 input/artifact error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use omac::checkpoint::Checkpoint;
use omac::dataset::{generate, OfflineDataset, Tier};
use omac::env::{EnvConfig, EnvSpec};
use omac::manifest::RunManifest;
use omac::cvf::MixerVariant;
use omac::trainer::{self, preset_from_env, TrainConfig};
use omac::verify;
use omac::{OmacError, Result};

const EXIT_VERIFY_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ARTIFACT: u8 = 3;

#[derive(Parser)]
#[command(name = "omac", version, about = "Offline multi-agent RL: coupled value factorization, in-sample expectile learning, advantage-weighted policies", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset from a behavior tier.
    GenData(GenDataArgs),
    /// Train a model on an offline dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint by decentralized greedy execution.
    Eval(EvalArgs),
    /// Run numerical invariant suites against brute-force oracles.
    Verify(VerifyArgs),
    /// Sweep variants, expectile levels, and data ratios over seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Environment: matrix | grid
    #[arg(long)]
    env: String,
    /// Behavior tier: good | medium | poor
    #[arg(long)]
    tier: String,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path (.omd.jsonl); a .manifest.json is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Mixer variant: cvf | no-cca | linear | maxq
    #[arg(long, default_value = "cvf")]
    variant: String,
    /// Expectile level in (0, 1).
    #[arg(long)]
    tau: Option<f64>,
    /// Advantage temperature.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    iters_value: Option<usize>,
    #[arg(long)]
    iters_policy: Option<usize>,
    /// Episode-level subsample ratio in (0, 1]; recorded in dataset lineage.
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    /// Output directory for checkpoint, metrics CSV, and manifest.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite: gradients | structure | expectile | theorem1 | all
    #[arg(long, default_value = "all")]
    suite: String,
    /// Optional JSON report output path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Input dataset path (typically grid/poor).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated mixer variants.
    #[arg(long, default_value = "cvf,no-cca,linear")]
    variants: String,
    /// Comma-separated expectile levels; empty to skip the sweep.
    #[arg(long, default_value = "")]
    taus: String,
    /// Comma-separated dataset ratios; empty to skip the sweep.
    #[arg(long, default_value = "")]
    ratios: String,
    #[arg(long)]
    iters_value: Option<usize>,
    #[arg(long)]
    iters_policy: Option<usize>,
    /// Output CSV path; a .weights.csv sample dump is written beside it.
    #[arg(long)]
    out: PathBuf,
}

fn exit_for(err: &OmacError) -> u8 {
    match err {
        OmacError::Config(_) | OmacError::Validation(_) => EXIT_USAGE,
        _ => EXIT_ARTIFACT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    match run {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn env_by_name(name: &str) -> Result<EnvSpec> {
    let cfg = match name {
        "matrix" => EnvConfig::default_matrix(),
        "grid" => EnvConfig::default_grid(),
        other => {
            return Err(OmacError::Config(format!(
                "unknown environment '{other}', expected matrix or grid"
            )))
        }
    };
    EnvSpec::from_config(&cfg)
}

fn base_config() -> Result<TrainConfig> {
    Ok(TrainConfig::preset_defaults(preset_from_env()?))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<u8> {
    let t0 = Instant::now();
    let env = env_by_name(&a.env)?;
    let tier = Tier::parse(&a.tier)?;
    let dataset = generate(&env, tier, a.episodes, a.seed)?;
    dataset.save(&a.out)?;
    let mut manifest = RunManifest::new(
        "gen-data",
        serde_json::json!({
            "env": a.env, "tier": a.tier, "episodes": a.episodes, "seed": a.seed,
        }),
        a.seed,
    );
    manifest.add_file_hash("dataset", &a.out)?;
    manifest.wall_clock_secs = t0.elapsed().as_secs_f64();
    manifest.save(&manifest_path(&a.out))?;
    println!(
        "wrote {} ({} episodes, {} steps)",
        a.out.display(),
        dataset.episodes.len(),
        dataset.step_count()
    );
    Ok(0)
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let stem = artifact
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    artifact.with_file_name(format!("{stem}.manifest.json"))
}

fn load_dataset_and_env(path: &Path) -> Result<(OfflineDataset, EnvSpec)> {
    let dataset = OfflineDataset::load(path)?;
    let env = EnvSpec::from_config(&dataset.meta.env)?;
    dataset.check_fingerprint(&env)?;
    Ok((dataset, env))
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let t0 = Instant::now();
    let (dataset, env) = load_dataset_and_env(&a.data)?;
    let mut cfg = base_config()?;
    cfg.variant = MixerVariant::parse(&a.variant)?;
    if let Some(tau) = a.tau {
        cfg.tau = tau;
    }
    if let Some(beta) = a.beta {
        cfg.beta = beta;
    }
    if let Some(iv) = a.iters_value {
        cfg.value_iters = iv;
    }
    if let Some(ip) = a.iters_policy {
        cfg.policy_iters = ip;
    }
    cfg.seed = a.seed;
    cfg.validate()?;
    if !(a.ratio > 0.0 && a.ratio <= 1.0) {
        return Err(OmacError::Config(format!(
            "ratio must be in (0, 1], got {}",
            a.ratio
        )));
    }
    let trainset = if a.ratio < 1.0 {
        dataset.subsample(a.ratio, a.seed)?
    } else {
        dataset
    };

    let outcome = trainer::run(&cfg, &trainset, &env)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let ck_path = a.out_dir.join("checkpoint.json");
    let metrics_path = a.out_dir.join("metrics.csv");
    Checkpoint::capture(&env, &cfg, &outcome.model, &outcome.policy).save(&ck_path)?;
    std::fs::write(&metrics_path, outcome.metrics.to_csv())?;

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "config": cfg,
            "data": a.data.display().to_string(),
            "ratio": a.ratio,
            "lineage": trainset.meta.lineage,
        }),
        a.seed,
    );
    manifest.add_file_hash("dataset", &a.data)?;
    manifest.add_file_hash("checkpoint", &ck_path)?;
    manifest.add_file_hash("metrics", &metrics_path)?;
    manifest.wall_clock_secs = t0.elapsed().as_secs_f64();
    manifest.save(&a.out_dir.join("train.manifest.json"))?;
    println!(
        "final eval return {:.4} +/- {:.4} over {} episodes",
        outcome.final_eval.0, outcome.final_eval.1, cfg.eval_episodes
    );
    Ok(0)
}

fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (env, _model, policy) = ck.restore()?;
    let (mean, std) = trainer::evaluate(&policy, &env, a.episodes, a.seed)?;
    println!(
        "{}",
        serde_json::json!({ "mean": mean, "std": std, "episodes": a.episodes })
    );
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs) -> Result<u8> {
    let reports = match a.suite.as_str() {
        "gradients" => vec![verify::suite_gradients()?],
        "expectile" => vec![verify::suite_expectile()?],
        "structure" => vec![verify::suite_structure(1000)?],
        "theorem1" => vec![verify::suite_theorem1(5, 2000)?],
        "all" => verify::suite_all(1000, 5, 2000)?,
        other => {
            return Err(OmacError::Config(format!(
                "unknown suite '{other}', expected gradients|structure|expectile|theorem1|all"
            )))
        }
    };
    let mut all_pass = true;
    for r in &reports {
        print!("{}", r.render());
        all_pass &= r.passed;
    }
    if let Some(path) = &a.report {
        let text = serde_json::to_string_pretty(&reports)
            .map_err(|e| OmacError::Validation(format!("report serialization failed: {e}")))?;
        std::fs::write(path, text)?;
    }
    Ok(if all_pass { 0 } else { EXIT_VERIFY_FAIL })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| OmacError::Config(format!("bad {what} entry '{t}'")))
        })
        .collect()
}

struct AblateRow {
    setting: String,
    seed: u64,
    final_return: f64,
    final_std: f64,
    weight_corr: f64,
    weight_samples: usize,
}

/// Sample correlation between w^v_i(o) and the action-average of w^q_i(o, .)
/// over held-out observations, pooled across agents.
fn weight_correlation(
    model: &omac::cvf::CvfModel,
    env: &EnvSpec,
    n_obs: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut collected = 0usize;
    'outer: loop {
        let ep_seed: u64 = rng.gen();
        let mut step_rng = rand_chacha::ChaCha20Rng::seed_from_u64(ep_seed);
        let (mut s, mut obs) = env.reset(ep_seed);
        loop {
            let masks = env.masks(s);
            let n_joint = env.joint_action_count();
            let mut wq_mean = vec![0.0; env.n_agents()];
            let (wv, _) = model.cca_weights(&obs, &env.unravel_joint_action(0).0)?;
            for j in 0..n_joint {
                let action = env.unravel_joint_action(j);
                let (_, wq) = model.cca_weights(&obs, &action.0)?;
                for i in 0..env.n_agents() {
                    wq_mean[i] += wq[i] / n_joint as f64;
                }
            }
            for i in 0..env.n_agents() {
                xs.push(wv[i]);
                ys.push(wq_mean[i]);
            }
            collected += 1;
            if collected >= n_obs {
                break 'outer;
            }
            let action: Vec<usize> = masks
                .iter()
                .map(|m| {
                    let legal: Vec<usize> =
                        (0..m.len()).filter(|&a| m[a]).collect();
                    legal[step_rng.gen_range(0..legal.len())]
                })
                .collect();
            let (ns, next_obs, _r, done) =
                env.step(s, &omac::env::JointAction(action), &mut step_rng)?;
            if done {
                break;
            }
            s = ns;
            obs = next_obs;
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let corr = if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    };
    Ok((corr, xs.len()))
}

fn cmd_ablate(a: &AblateArgs) -> Result<u8> {
    let t0 = Instant::now();
    let (dataset, env) = load_dataset_and_env(&a.data)?;
    let variants: Vec<String> = parse_list(&a.variants, "variant")?;
    let taus: Vec<f64> = parse_list(&a.taus, "tau")?;
    let ratios: Vec<f64> = parse_list(&a.ratios, "ratio")?;

    // Cross-product of settings: each variant at defaults, plus tau and
    // ratio sweeps on the cvf variant.
    let mut settings: Vec<(String, TrainConfig, f64)> = Vec::new();
    let base = base_config()?;
    for v in &variants {
        let mut cfg = base.clone();
        cfg.variant = MixerVariant::parse(v)?;
        settings.push((format!("variant={v}"), cfg, 1.0));
    }
    for &tau in &taus {
        let mut cfg = base.clone();
        cfg.tau = tau;
        settings.push((format!("tau={tau}"), cfg, 1.0));
    }
    for &ratio in &ratios {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(OmacError::Config(format!(
                "ratio must be in (0, 1], got {ratio}"
            )));
        }
        settings.push((format!("ratio={ratio}"), base.clone(), ratio));
    }
    for (_, cfg, _) in settings.iter_mut() {
        if let Some(iv) = a.iters_value {
            cfg.value_iters = iv;
        }
        if let Some(ip) = a.iters_policy {
            cfg.policy_iters = ip;
        }
        cfg.validate()?;
    }

    let mut rows: Vec<AblateRow> = Vec::new();
    let mut weight_dump = String::from("setting,seed,agent,sample,w_v,w_q_mean\n");
    for (label, cfg, ratio) in &settings {
        for seed in 0..a.seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let trainset = if *ratio < 1.0 {
                dataset.subsample(*ratio, seed)?
            } else {
                dataset.clone()
            };
            let outcome = trainer::run(&cfg, &trainset, &env)?;
            let (corr, samples) =
                weight_correlation(&outcome.model, &env, 64, 0xC0FFEE ^ seed)?;
            dump_weight_samples(
                &mut weight_dump,
                label,
                seed,
                &outcome.model,
                &env,
                16,
                0xC0FFEE ^ seed,
            )?;
            println!(
                "{label} seed {seed}: return {:.4} corr {:.4} (n={samples})",
                outcome.final_eval.0, corr
            );
            rows.push(AblateRow {
                setting: label.clone(),
                seed,
                final_return: outcome.final_eval.0,
                final_std: outcome.final_eval.1,
                weight_corr: corr,
                weight_samples: samples,
            });
        }
    }
    rows.sort_by(|a, b| (&a.setting, a.seed).cmp(&(&b.setting, b.seed)));
    let mut csv =
        String::from("setting,seed,final_return,final_std,weight_corr,weight_samples\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.setting, r.seed, r.final_return, r.final_std, r.weight_corr, r.weight_samples
        ));
    }
    std::fs::write(&a.out, &csv)?;
    let dump_path = a.out.with_extension("weights.csv");
    std::fs::write(&dump_path, &weight_dump)?;

    let mut manifest = RunManifest::new(
        "ablate",
        serde_json::json!({
            "data": a.data.display().to_string(),
            "seeds": a.seeds,
            "variants": variants,
            "taus": taus,
            "ratios": ratios,
        }),
        0,
    );
    manifest.add_file_hash("dataset", &a.data)?;
    manifest.add_file_hash("results", &a.out)?;
    manifest.add_file_hash("weights", &dump_path)?;
    manifest.wall_clock_secs = t0.elapsed().as_secs_f64();
    manifest.save(&manifest_path(&a.out))?;
    println!("wrote {} ({} rows)", a.out.display(), rows.len());
    Ok(0)
}

/// Raw (w^v, mean w^q) pairs on held-out observations for external plotting.
fn dump_weight_samples(
    out: &mut String,
    label: &str,
    seed: u64,
    model: &omac::cvf::CvfModel,
    env: &EnvSpec,
    n_obs: usize,
    rng_seed: u64,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(rng_seed);
    for sample in 0..n_obs {
        let ep_seed: u64 = rng.gen();
        let (s, obs) = env.reset(ep_seed);
        let _ = env.masks(s);
        let n_joint = env.joint_action_count();
        let (wv, _) = model.cca_weights(&obs, &env.unravel_joint_action(0).0)?;
        let mut wq_mean = vec![0.0; env.n_agents()];
        for j in 0..n_joint {
            let action = env.unravel_joint_action(j);
            let (_, wq) = model.cca_weights(&obs, &action.0)?;
            for i in 0..env.n_agents() {
                wq_mean[i] += wq[i] / n_joint as f64;
            }
        }
        for i in 0..env.n_agents() {
            out.push_str(&format!(
                "{label},{seed},{i},{sample},{:.6},{:.6}\n",
                wv[i], wq_mean[i]
            ));
        }
    }
    Ok(())
}
