//! Command-line entry point: one binary chaining the whole pipeline.
//!
//! ```text
//! dosing-rl synth      synthetic cohort   -> <out>/synth/events_*.csv
//! dosing-rl ingest     hourly episodes    -> <out>/ingest/episodes_*.csv + transitions_*.csv
//! dosing-rl train      dueling DDQN       -> <out>/train/model.ckpt
//! dosing-rl evaluate   policy comparison  -> <out>/evaluate/
//! dosing-rl recommend  one-state lookup   -> stdout
//! ```
//!
//! Commands read their upstream artifacts from fixed names under the
//! shared `--out` root, so the default invocations chain without extra
//! flags. Every command that writes files also drops a `manifest.json`
//! beside them. All randomness descends from `--seed` (or the config's
//! seeds when the flag is absent): rerunning a command on the same inputs
//! reproduces its outputs byte for byte, manifest timestamp aside.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing
//! upstream artifact, 4 numeric failure (divergence, non-finite values).
//!
//! Each flag can also be set through the environment with the
//! `DOSING_RL_` prefix (`DOSING_RL_OUT`, `DOSING_RL_SEED`, ...).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dosing_rl::config::PipelineConfig;
use dosing_rl::eval::{self, RolloutPolicy};
use dosing_rl::ingest;
use dosing_rl::manifest::RunManifest;
use dosing_rl::mdp::{StateVector, TransitionSet, ACTION_COUNT, STATE_DIM};
use dosing_rl::qnet::{argmax, load_checkpoint};
use dosing_rl::synth;
use dosing_rl::trainer::{self, SimValidation, TrainData};
use dosing_rl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dosing-rl",
    version,
    about = "Offline reinforcement learning for personalized morphine dosing",
    after_help = "Pipeline order: synth -> ingest -> train -> evaluate. \
                  Commands find each other's artifacts under --out."
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Pipeline configuration file (TOML); built-in defaults when omitted
    #[arg(long, global = true, env = "DOSING_RL_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed override for this command's randomness
    #[arg(long, global = true, env = "DOSING_RL_SEED", value_name = "U64")]
    seed: Option<u64>,

    /// Worker threads for data-parallel stages (0 = one per core)
    #[arg(long, global = true, env = "DOSING_RL_JOBS", value_name = "N", default_value_t = 0)]
    jobs: usize,

    /// Root directory for pipeline artifacts
    #[arg(long, global = true, env = "DOSING_RL_OUT", value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Print a machine-readable JSON summary instead of text
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of raw hourly ICU event logs
    Synth {
        /// Number of admissions (overrides the config)
        #[arg(long, value_name = "N")]
        patients: Option<usize>,

        /// Episode length in hours (overrides the config)
        #[arg(long, value_name = "H")]
        hours: Option<u64>,
    },

    /// Aggregate raw events into hourly episodes and replay transitions
    Ingest {
        /// Directory of events_*.csv files [default: <out>/synth]
        #[arg(long, value_name = "DIR")]
        events: Option<PathBuf>,
    },

    /// Train the dueling double-DQN on the ingested transitions
    Train {
        /// Gradient steps (overrides the config)
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
    },

    /// Compare the learned policy against clinicians and baselines
    Evaluate {
        /// Checkpoint to evaluate [default: <out>/train/model.ckpt]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },

    /// Print the greedy dose bin and all Q-values for one state
    Recommend {
        /// Checkpoint to query [default: <out>/train/model.ckpt]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,

        /// Patient state: 19 comma-separated values (pain 0-10, heart
        /// rate, respiratory rate, then 16 co-analgesic mg channels)
        #[arg(value_name = "STATE")]
        state: String,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.common.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let cfg = match &cli.common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Synth { patients, hours } => cmd_synth(&cli.common, cfg, patients, hours),
        Command::Ingest { events } => cmd_ingest(&cli.common, cfg, events),
        Command::Train { steps } => cmd_train(&cli.common, cfg, steps),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cli.common, cfg, checkpoint),
        Command::Recommend { checkpoint, state } => cmd_recommend(&cli.common, checkpoint, &state),
    }
}

/// Prints either the JSON value or the plain-text lines, per `--json`.
fn emit(common: &Common, json: serde_json::Value, text: String) {
    if common.json {
        println!("{json}");
    } else {
        println!("{text}");
    }
}

fn cmd_synth(
    common: &Common,
    mut cfg: PipelineConfig,
    patients: Option<usize>,
    hours: Option<u64>,
) -> Result<()> {
    if let Some(n) = patients {
        cfg.cohort.n_patients = n;
    }
    if let Some(h) = hours {
        cfg.cohort.horizon_hours = h;
    }
    if let Some(s) = common.seed {
        cfg.cohort.master_seed = s;
    }
    cfg.cohort.validate()?;

    let dir = common.out.join("synth");
    std::fs::create_dir_all(&dir)?;
    let cohort = synth::generate_cohort(&cfg.cohort, &cfg.ingestion.coanalgesics)?;
    let mut outputs = Vec::with_capacity(cohort.len());
    let mut events_total = 0usize;
    for patient in &cohort {
        let path = dir.join(format!("events_{}.csv", patient.admission_id));
        ingest::write_events(&path, &patient.events)?;
        events_total += patient.events.len();
        outputs.push(path);
    }
    RunManifest::new("synth", common.config.as_deref(), Some(cfg.cohort.master_seed))
        .with_outputs(outputs.clone())
        .write(&dir)?;

    emit(
        common,
        json!({
            "command": "synth",
            "patients": cohort.len(),
            "hours": cfg.cohort.horizon_hours,
            "events": events_total,
            "seed": cfg.cohort.master_seed,
            "dir": dir,
        }),
        format!(
            "synthesized {} admissions x {} h ({} events, seed {}) -> {}",
            cohort.len(),
            cfg.cohort.horizon_hours,
            events_total,
            cfg.cohort.master_seed,
            dir.display()
        ),
    );
    Ok(())
}

/// Event files under `dir`, sorted by name for reproducible ordering.
fn event_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("events_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingArtifact(dir.join("events_*.csv")));
    }
    Ok(files)
}

fn cmd_ingest(common: &Common, cfg: PipelineConfig, events: Option<PathBuf>) -> Result<()> {
    let events_dir = events.unwrap_or_else(|| common.out.join("synth"));
    let files = event_files(&events_dir)?;
    let mut raw = Vec::new();
    for file in &files {
        raw.extend(ingest::read_events(file)?);
    }

    let drugs = &cfg.ingestion.coanalgesics;
    let (mut episodes, agg) = ingest::aggregate_cohort(&raw, drugs);
    let imputed = ingest::impute_all(&mut episodes, &cfg.ingestion.defaults);
    let seed = common.seed.unwrap_or(cfg.cohort.master_seed);
    let split = ingest::split_cohort(episodes, cfg.split, seed)?;

    let dir = common.out.join("ingest");
    std::fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    for (name, eps) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let path = dir.join(format!("episodes_{name}.csv"));
        ingest::write_episodes(&path, eps, drugs)?;
        outputs.push(path);
    }

    // The normalizer is fitted on the training split only and shared with
    // the other splits, so evaluation sees the training-time statistics.
    let (train_set, mut skipped) = TransitionSet::from_episodes(&split.train, cfg.reward_timing, None)?;
    let norm = train_set.normalizer.clone();
    let (val_set, s) =
        TransitionSet::from_episodes(&split.val, cfg.reward_timing, Some(norm.clone()))?;
    skipped += s;
    let (test_set, s) = TransitionSet::from_episodes(&split.test, cfg.reward_timing, Some(norm))?;
    skipped += s;
    let counts = [train_set.transitions.len(), val_set.transitions.len(), test_set.transitions.len()];
    for (name, set) in [("train", &train_set), ("val", &val_set), ("test", &test_set)] {
        let path = dir.join(format!("transitions_{name}.csv"));
        set.write(&path)?;
        outputs.push(path);
    }

    RunManifest::new("ingest", common.config.as_deref(), Some(seed))
        .with_inputs(files)
        .with_outputs(outputs)
        .write(&dir)?;

    emit(
        common,
        json!({
            "command": "ingest",
            "admissions": agg.admissions_out,
            "split": {"train": split.train.len(), "val": split.val.len(), "test": split.test.len()},
            "transitions": {"train": counts[0], "val": counts[1], "test": counts[2]},
            "imputed": imputed,
            "dropped_events": agg.dropped_unparseable_pain + agg.dropped_bad_value + agg.dropped_unknown_drug,
            "skipped_short_episodes": skipped,
            "dir": dir,
        }),
        format!(
            "ingested {} admissions (split {}/{}/{}; transitions {}/{}/{}; \
             {} cells imputed, {} events dropped) -> {}",
            agg.admissions_out,
            split.train.len(),
            split.val.len(),
            split.test.len(),
            counts[0],
            counts[1],
            counts[2],
            imputed.pain + imputed.hr + imputed.rr,
            agg.dropped_unparseable_pain + agg.dropped_bad_value + agg.dropped_unknown_drug,
            dir.display()
        ),
    );
    Ok(())
}

fn cmd_train(common: &Common, mut cfg: PipelineConfig, steps: Option<u64>) -> Result<()> {
    let ingest_dir = common.out.join("ingest");
    let train_path = ingest_dir.join("transitions_train.csv");
    let train_set = TransitionSet::read(&train_path)?;
    let val_path = ingest_dir.join("transitions_val.csv");
    let val_set = if val_path.exists() { Some(TransitionSet::read(&val_path)?) } else { None };

    if let Some(n) = steps {
        cfg.training.total_steps = n;
    }
    if let Some(s) = common.seed {
        cfg.training.seed = s;
    }
    // The artifact layout is owned by --out; a checkpoint_dir from the
    // config file is overridden here and recorded in train_config.json.
    cfg.training.checkpoint_dir = common.out.join("train");

    let data = TrainData::from_transition_set(&train_set)?;
    let val_data = match &val_set {
        Some(set) if !set.transitions.is_empty() => Some(TrainData::from_transition_set(set)?),
        _ => None,
    };
    let sim = (cfg.evaluation.validation_rollouts > 0).then_some(SimValidation {
        ranges: cfg.cohort.ranges,
        rollouts: cfg.evaluation.validation_rollouts,
        horizon_hours: cfg.evaluation.rollout_horizon_hours,
        master_seed: cfg.evaluation.validation_seed,
    });

    let report = trainer::train(&cfg.training, &data, val_data.as_ref(), sim.as_ref())?;

    let mut inputs = vec![train_path];
    if val_data.is_some() {
        inputs.push(val_path);
    }
    RunManifest::new("train", common.config.as_deref(), Some(cfg.training.seed))
        .with_inputs(inputs)
        .with_outputs([
            report.checkpoint_path.clone(),
            report.log_path.clone(),
            cfg.training.checkpoint_dir.join("train_config.json"),
        ])
        .write(&cfg.training.checkpoint_dir)?;

    emit(
        common,
        json!({
            "command": "train",
            "steps": report.steps_completed,
            "transitions": data.entries.len(),
            "checkpoint_step": report.checkpoint_step,
            "checkpoint_score": report.checkpoint_score,
            "final_loss": report.final_loss,
            "checkpoint": report.checkpoint_path,
        }),
        format!(
            "trained {} steps on {} transitions; checkpointed step {} (score {}) -> {}",
            report.steps_completed,
            data.entries.len(),
            report.checkpoint_step,
            report
                .checkpoint_score
                .map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}")),
            report.checkpoint_path.display()
        ),
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, mut cfg: PipelineConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let ckpt = checkpoint.unwrap_or_else(|| common.out.join("train").join("model.ckpt"));
    let (net, norm) = load_checkpoint(&ckpt)?;
    let episodes_path = common.out.join("ingest").join("episodes_test.csv");
    let (episodes, _) = ingest::read_episodes(&episodes_path)?;
    if let Some(s) = common.seed {
        cfg.evaluation.rollout_seed = s;
    }

    let report = eval::compare_policies(&net, &norm, &episodes)?;
    let dir = common.out.join("evaluate");
    std::fs::create_dir_all(&dir)?;
    let paths = eval::export_report(&report, &dir)?;

    // Simulator-based return comparison against the two fixed baselines.
    let e = cfg.evaluation;
    let roll = |policy| {
        eval::simulate_policy(
            policy,
            &cfg.cohort.ranges,
            e.rollout_episodes,
            e.rollout_horizon_hours,
            cfg.training.gamma,
            e.rollout_seed,
        )
    };
    let greedy = roll(RolloutPolicy::Greedy { net: &net, norm: &norm })?;
    let withhold = roll(RolloutPolicy::AlwaysWithhold)?;
    let random = roll(RolloutPolicy::UniformRandom)?;
    let sim_path = dir.join("simulation.json");
    let sim_doc = json!({
        "schema_version": 1,
        "greedy": greedy,
        "always_withhold": withhold,
        "uniform_random": random,
    });
    std::fs::write(&sim_path, format!("{:#}\n", sim_doc))?;

    RunManifest::new("evaluate", common.config.as_deref(), Some(e.rollout_seed))
        .with_inputs([ckpt, episodes_path])
        .with_outputs([paths.timesteps_csv.clone(), paths.report_jsonl.clone(), sim_path])
        .write(&dir)?;

    emit(
        common,
        json!({
            "command": "evaluate",
            "timesteps": report.per_timestep.len(),
            "physician_morphine_rate": report.physician_morphine_rate,
            "model_morphine_rate": report.model_morphine_rate,
            "agreement_given_physician_dosed": report.agreement_given_physician_dosed,
            "mean_return": {
                "greedy": greedy.mean_return,
                "always_withhold": withhold.mean_return,
                "uniform_random": random.mean_return,
            },
            "dir": dir,
        }),
        format!(
            "evaluated {} test hours: physician morphine rate {:.4}, model {:.4}, \
             agreement when physician dosed {}\n\
             simulated mean return (gamma {}): greedy {:.3}, withhold {:.3}, random {:.3}\n\
             -> {}",
            report.per_timestep.len(),
            report.physician_morphine_rate,
            report.model_morphine_rate,
            report
                .agreement_given_physician_dosed
                .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}")),
            cfg.training.gamma,
            greedy.mean_return,
            withhold.mean_return,
            random.mean_return,
            dir.display()
        ),
    );
    Ok(())
}

/// Parses the 19 comma-separated state values for `recommend`.
fn parse_state(text: &str) -> Result<StateVector> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != STATE_DIM {
        return Err(Error::DimensionMismatch { expected: STATE_DIM, got: parts.len() });
    }
    let mut values = [0.0; STATE_DIM];
    for (slot, raw) in values.iter_mut().zip(&parts) {
        *slot = raw
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("state value {raw:?}: {e}")))?;
    }
    let state = StateVector(values);
    if !state.is_finite() {
        return Err(Error::NonFinite("state".into()));
    }
    Ok(state)
}

fn cmd_recommend(common: &Common, checkpoint: Option<PathBuf>, state_arg: &str) -> Result<()> {
    let ckpt = checkpoint.unwrap_or_else(|| common.out.join("train").join("model.ckpt"));
    let (net, norm) = load_checkpoint(&ckpt)?;
    let state = parse_state(state_arg)?;
    let q = net.forward(&norm.normalize(&state))?;
    let action = dosing_rl::mdp::ActionIndex(argmax(&q) as u8);

    if common.json {
        println!(
            "{}",
            json!({
                "command": "recommend",
                "action": action.0,
                "label": action.label(),
                "representative_mg": action.representative_mg(),
                "q_values": q,
            })
        );
        return Ok(());
    }

    println!(
        "recommended action: {}  {}  (replay dose {} mg)",
        action.0,
        action.label(),
        action.representative_mg()
    );
    println!();
    println!("  action  bin          q-value");
    for (i, qi) in q.iter().enumerate().take(ACTION_COUNT) {
        let mark = if i == action.index() { '*' } else { ' ' };
        let label = dosing_rl::mdp::ActionIndex(i as u8).label();
        println!("{mark} {i:>6}  {label:<11}  {qi:+.6}");
    }
    Ok(())
}
