//! Policy extraction and evaluation.
//!
//! Two complementary views of a trained network:
//!
//! 1. `compare_policies` replays the held-out test episodes and tabulates,
//!    hour by hour, what the physician did against what the greedy policy
//!    recommends: administration rates, a 14×14 joint action histogram,
//!    per-agent dose histograms, and inter-dose-interval histograms.
//!    Off-policy evaluation of returns is deliberately out of scope; these
//!    are descriptive comparisons.
//! 2. `simulate_policy` rolls a policy inside the synthetic patient
//!    simulator and reports discounted-return and reward-component
//!    statistics, which supports direct comparison against the
//!    always-withhold and uniform-random baselines.
//!
//! Ties in the greedy argmax break toward the lower action index, i.e.
//! toward less morphine — a conservative prior, and deterministic.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EpisodeLog;
use crate::mdp::{
    pain_score, record_state, reward, window_score, ActionIndex, Normalizer, StateVector,
    ACTION_COUNT, HR_RANGE, RR_RANGE,
};
use crate::qnet::{argmax, QNet};
use crate::synth::{observe_pain, ParamRanges, Simulator};

/// Greedy action for one state: normalize, forward, argmax with ties
/// broken toward the lower index.
pub fn greedy_action(net: &QNet, norm: &Normalizer, state: &StateVector) -> Result<ActionIndex> {
    let q = net.forward(&norm.normalize(state))?;
    Ok(ActionIndex(argmax(&q) as u8))
}

/// One charted hour: what the physician did and what the model recommends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepRow {
    pub admission_id: String,
    pub hour: u64,
    pub physician_action: ActionIndex,
    pub model_action: ActionIndex,
}

/// Hour-by-hour physician/model comparison over a set of episodes.
///
/// Histogram conventions: `joint_histogram[p][m]` counts hours where the
/// physician took action `p` and the model recommended `m`; its row sums
/// are the physician dose histogram and its column sums the model dose
/// histogram, exactly. Interval histograms map gap length in hours to
/// count, with one gap per consecutive pair of dosed hours within an
/// admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub schema_version: u32,
    pub per_timestep: Vec<TimestepRow>,
    /// Fraction of hours with a nonzero dose, per agent.
    pub physician_morphine_rate: f64,
    pub model_morphine_rate: f64,
    /// P(model ≥ 1 | physician ≥ 1). `None` when the physician never dosed.
    pub agreement_given_physician_dosed: Option<f64>,
    /// Model action counts over hours where the physician withheld.
    pub model_given_physician_withheld: [u64; ACTION_COUNT],
    pub joint_histogram: [[u64; ACTION_COUNT]; ACTION_COUNT],
    pub physician_dose_histogram: [u64; ACTION_COUNT],
    pub model_dose_histogram: [u64; ACTION_COUNT],
    pub physician_interval_histogram: BTreeMap<u64, u64>,
    pub model_interval_histogram: BTreeMap<u64, u64>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl PolicyReport {
    /// A zero-count report (useful as an export/import fixture).
    pub fn empty() -> Self {
        PolicyReport {
            schema_version: REPORT_SCHEMA_VERSION,
            per_timestep: Vec::new(),
            physician_morphine_rate: 0.0,
            model_morphine_rate: 0.0,
            agreement_given_physician_dosed: None,
            model_given_physician_withheld: [0; ACTION_COUNT],
            joint_histogram: [[0; ACTION_COUNT]; ACTION_COUNT],
            physician_dose_histogram: [0; ACTION_COUNT],
            model_dose_histogram: [0; ACTION_COUNT],
            physician_interval_histogram: BTreeMap::new(),
            model_interval_histogram: BTreeMap::new(),
        }
    }

    fn from_rows(per_timestep: Vec<TimestepRow>) -> Self {
        let mut report = PolicyReport::empty();
        let mut physician_dosed = 0u64;
        let mut both_dosed = 0u64;
        for row in &per_timestep {
            let p = row.physician_action.index();
            let m = row.model_action.index();
            report.joint_histogram[p][m] += 1;
            report.physician_dose_histogram[p] += 1;
            report.model_dose_histogram[m] += 1;
            if p == 0 {
                report.model_given_physician_withheld[m] += 1;
            } else {
                physician_dosed += 1;
                if m >= 1 {
                    both_dosed += 1;
                }
            }
        }
        let n = per_timestep.len() as f64;
        if !per_timestep.is_empty() {
            report.physician_morphine_rate = physician_dosed as f64 / n;
            report.model_morphine_rate =
                per_timestep.iter().filter(|r| r.model_action.index() >= 1).count() as f64 / n;
        }
        if physician_dosed > 0 {
            report.agreement_given_physician_dosed = Some(both_dosed as f64 / physician_dosed as f64);
        }
        // Interval histograms need admission grouping; rows arrive sorted
        // by (admission_id, hour), so a linear scan suffices.
        let fill = |dosed: &dyn Fn(&TimestepRow) -> bool, hist: &mut BTreeMap<u64, u64>| {
            let mut last: Option<(&str, u64)> = None;
            for row in &per_timestep {
                if !dosed(row) {
                    continue;
                }
                if let Some((id, hour)) = last {
                    if id == row.admission_id {
                        *hist.entry(row.hour - hour).or_insert(0) += 1;
                    }
                }
                last = Some((&row.admission_id, row.hour));
            }
        };
        fill(&|r| r.physician_action.index() >= 1, &mut report.physician_interval_histogram);
        fill(&|r| r.model_action.index() >= 1, &mut report.model_interval_histogram);
        report.per_timestep = per_timestep;
        report
    }
}

/// Replays imputed test episodes under the greedy policy and tabulates
/// the comparison. Episodes are processed in admission-id order (sorted
/// here), each admission in parallel, so the report is deterministic.
pub fn compare_policies(
    net: &QNet,
    norm: &Normalizer,
    episodes: &[EpisodeLog],
) -> Result<PolicyReport> {
    if episodes.iter().all(|e| e.records.is_empty()) {
        return Err(Error::InsufficientData { have: 0, need: 1 });
    }
    let mut sorted: Vec<&EpisodeLog> = episodes.iter().collect();
    sorted.sort_by(|a, b| a.admission_id.cmp(&b.admission_id));

    let per_episode: Vec<Vec<TimestepRow>> = sorted
        .par_iter()
        .map(|ep| {
            ep.records
                .iter()
                .map(|rec| {
                    let state = record_state(rec, &ep.admission_id)?;
                    Ok(TimestepRow {
                        admission_id: ep.admission_id.clone(),
                        hour: rec.hour_index,
                        physician_action: crate::mdp::discretize_dose(rec.morphine_mg)?,
                        model_action: greedy_action(net, norm, &state)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PolicyReport::from_rows(per_episode.into_iter().flatten().collect()))
}

/// Policy to roll in the simulator.
#[derive(Debug, Clone, Copy)]
pub enum RolloutPolicy<'a> {
    Greedy { net: &'a QNet, norm: &'a Normalizer },
    AlwaysWithhold,
    UniformRandom,
}

/// Return and reward-component statistics over simulated episodes.
/// `sd_return` is the sample standard deviation (n−1); component means
/// are per-step averages pooled over every step of every episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub n_episodes: u32,
    pub horizon_hours: u64,
    pub gamma: f64,
    pub mean_return: f64,
    pub sd_return: f64,
    pub mean_reward: f64,
    pub mean_pain_score: f64,
    pub mean_hr_window: f64,
    pub mean_rr_window: f64,
}

/// Rolls `policy` over `n_episodes` independent simulated patients drawn
/// from `ranges` and accumulates return statistics. Episode `i` uses the
/// rollout stream `i` of `master_seed`, so results are reproducible and
/// per-episode parallelism cannot reorder them. Rollout patients carry no
/// scheduled co-analgesics; those state channels are zero.
pub fn simulate_policy(
    policy: RolloutPolicy<'_>,
    ranges: &ParamRanges,
    n_episodes: u32,
    horizon_hours: u64,
    gamma: f64,
    master_seed: u64,
) -> Result<SimSummary> {
    if n_episodes == 0 || horizon_hours == 0 {
        return Err(Error::InvalidParameter(
            "simulation needs at least one episode and one hour".into(),
        ));
    }
    if !(0.0..1.0).contains(&gamma) && gamma != 1.0 {
        return Err(Error::InvalidParameter(format!("gamma {gamma} outside [0,1]")));
    }

    struct EpisodeStats {
        ret: f64,
        reward_sum: f64,
        pain_sum: f64,
        hr_sum: f64,
        rr_sum: f64,
    }

    let run_one = |idx: u32| -> Result<EpisodeStats> {
        let mut sim = Simulator::rollout(master_seed, u64::from(idx), ranges)?;
        let mut stats = EpisodeStats {
            ret: 0.0,
            reward_sum: 0.0,
            pain_sum: 0.0,
            hr_sum: 0.0,
            rr_sum: 0.0,
        };
        let mut discount = 1.0;
        for _ in 0..horizon_hours {
            let obs = StateVector::new(
                f64::from(observe_pain(sim.state.pain)),
                sim.state.hr,
                sim.state.rr,
                &[0.0; 16],
            );
            let action = match policy {
                RolloutPolicy::Greedy { net, norm } => greedy_action(net, norm, &obs)?,
                RolloutPolicy::AlwaysWithhold => ActionIndex(0),
                RolloutPolicy::UniformRandom => {
                    let draw = (sim.random_unit() * ACTION_COUNT as f64) as usize;
                    ActionIndex(draw.min(ACTION_COUNT - 1) as u8)
                }
            };
            sim.step(action.representative_mg())?;
            let pain = f64::from(observe_pain(sim.state.pain));
            let r = reward(sim.state.hr, sim.state.rr, pain);
            stats.ret += discount * r;
            discount *= gamma;
            stats.reward_sum += r;
            stats.pain_sum += pain_score(pain);
            stats.hr_sum += window_score(sim.state.hr, HR_RANGE.0, HR_RANGE.1)?;
            stats.rr_sum += window_score(sim.state.rr, RR_RANGE.0, RR_RANGE.1)?;
        }
        Ok(stats)
    };

    let episodes: Vec<EpisodeStats> = (0..n_episodes)
        .into_par_iter()
        .map(run_one)
        .collect::<Result<Vec<_>>>()?;

    let n = f64::from(n_episodes);
    let steps = n * horizon_hours as f64;
    let mean_return = episodes.iter().map(|e| e.ret).sum::<f64>() / n;
    let var = if n_episodes > 1 {
        episodes.iter().map(|e| (e.ret - mean_return).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(SimSummary {
        n_episodes,
        horizon_hours,
        gamma,
        mean_return,
        sd_return: var.sqrt(),
        mean_reward: episodes.iter().map(|e| e.reward_sum).sum::<f64>() / steps,
        mean_pain_score: episodes.iter().map(|e| e.pain_sum).sum::<f64>() / steps,
        mean_hr_window: episodes.iter().map(|e| e.hr_sum).sum::<f64>() / steps,
        mean_rr_window: episodes.iter().map(|e| e.rr_sum).sum::<f64>() / steps,
    })
}

/// Paths written by `export_report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub timesteps_csv: PathBuf,
    pub report_jsonl: PathBuf,
}

/// One line of the JSON-lines report file. The `record` tag keeps the
/// format self-describing and extensible; `Header` is always line 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)] // a report holds a handful of lines; boxing buys nothing
enum ReportLine {
    Header {
        schema_version: u32,
        timesteps: u64,
    },
    Summary {
        physician_morphine_rate: f64,
        model_morphine_rate: f64,
        agreement_given_physician_dosed: Option<f64>,
    },
    JointHistogram {
        rows: [[u64; ACTION_COUNT]; ACTION_COUNT],
    },
    DoseHistograms {
        physician: [u64; ACTION_COUNT],
        model: [u64; ACTION_COUNT],
    },
    // (gap_hours, count) pairs, ascending; JSON object keys must be
    // strings, so the map is flattened for transport.
    IntervalHistograms {
        physician: Vec<(u64, u64)>,
        model: Vec<(u64, u64)>,
    },
    ModelGivenPhysicianWithheld {
        counts: [u64; ACTION_COUNT],
    },
}

/// Writes `timesteps.csv` (one row per charted hour) and `report.jsonl`
/// (tagged aggregate records) under `dir`. A report with no timesteps
/// produces header-only files. The pair round-trips through
/// `read_report`.
pub fn export_report(report: &PolicyReport, dir: &Path) -> Result<ReportPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        timesteps_csv: dir.join("timesteps.csv"),
        report_jsonl: dir.join("report.jsonl"),
    };

    let mut csv = csv::Writer::from_path(&paths.timesteps_csv)
        .map_err(|e| Error::format(&paths.timesteps_csv, e.to_string()))?;
    csv.write_record(["admission_id", "hour", "physician_action", "model_action"])
        .map_err(|e| Error::format(&paths.timesteps_csv, e.to_string()))?;
    for row in &report.per_timestep {
        csv.write_record([
            row.admission_id.as_str(),
            &row.hour.to_string(),
            &row.physician_action.index().to_string(),
            &row.model_action.index().to_string(),
        ])
        .map_err(|e| Error::format(&paths.timesteps_csv, e.to_string()))?;
    }
    csv.flush()?;

    let mut out = BufWriter::new(std::fs::File::create(&paths.report_jsonl)?);
    let mut lines = vec![ReportLine::Header {
        schema_version: report.schema_version,
        timesteps: report.per_timestep.len() as u64,
    }];
    if !report.per_timestep.is_empty() {
        lines.extend([
            ReportLine::Summary {
                physician_morphine_rate: report.physician_morphine_rate,
                model_morphine_rate: report.model_morphine_rate,
                agreement_given_physician_dosed: report.agreement_given_physician_dosed,
            },
            ReportLine::JointHistogram {
                rows: report.joint_histogram,
            },
            ReportLine::DoseHistograms {
                physician: report.physician_dose_histogram,
                model: report.model_dose_histogram,
            },
            ReportLine::IntervalHistograms {
                physician: report.physician_interval_histogram.iter().map(|(&k, &v)| (k, v)).collect(),
                model: report.model_interval_histogram.iter().map(|(&k, &v)| (k, v)).collect(),
            },
            ReportLine::ModelGivenPhysicianWithheld {
                counts: report.model_given_physician_withheld,
            },
        ]);
    }
    for line in &lines {
        serde_json::to_writer(&mut out, line)
            .map_err(|e| Error::format(&paths.report_jsonl, e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(paths)
}

/// Reads back what `export_report` wrote and reconstructs the report.
pub fn read_report(dir: &Path) -> Result<PolicyReport> {
    let csv_path = dir.join("timesteps.csv");
    let jsonl_path = dir.join("report.jsonl");
    for p in [&csv_path, &jsonl_path] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }

    let mut rdr = csv::Reader::from_path(&csv_path)
        .map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let expect = ["admission_id", "hour", "physician_action", "model_action"];
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(&csv_path, e.to_string()))?;
    if headers != expect.as_slice() {
        return Err(Error::format(&csv_path, format!("unexpected header {headers:?}")));
    }
    let mut per_timestep = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::format(&csv_path, e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            row.get(i)
                .ok_or_else(|| Error::format(&csv_path, format!("short row {row:?}")))
        };
        let action = |i: usize| -> Result<ActionIndex> {
            let idx: usize = field(i)?
                .parse()
                .map_err(|e| Error::format(&csv_path, format!("bad action: {e}")))?;
            if idx >= ACTION_COUNT {
                return Err(Error::format(&csv_path, format!("action {idx} out of range")));
            }
            Ok(ActionIndex(idx as u8))
        };
        per_timestep.push(TimestepRow {
            admission_id: field(0)?.to_string(),
            hour: field(1)?
                .parse()
                .map_err(|e| Error::format(&csv_path, format!("bad hour: {e}")))?,
            physician_action: action(2)?,
            model_action: action(3)?,
        });
    }

    let mut report = PolicyReport::from_rows(per_timestep);
    let reader = BufReader::new(std::fs::File::open(&jsonl_path)?);
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(&jsonl_path, format!("line {}: {e}", i + 1)))?;
        match parsed {
            ReportLine::Header {
                schema_version,
                timesteps,
            } => {
                if schema_version != REPORT_SCHEMA_VERSION {
                    return Err(Error::format(
                        &jsonl_path,
                        format!("unsupported schema version {schema_version}"),
                    ));
                }
                if timesteps as usize != report.per_timestep.len() {
                    return Err(Error::format(
                        &jsonl_path,
                        format!(
                            "header says {timesteps} timesteps but CSV has {}",
                            report.per_timestep.len()
                        ),
                    ));
                }
                report.schema_version = schema_version;
                saw_header = true;
            }
            // Aggregates are recomputed from the CSV; the stored copies
            // cross-check that the files belong together.
            ReportLine::Summary {
                physician_morphine_rate,
                ..
            } if (physician_morphine_rate - report.physician_morphine_rate).abs() > 1e-12 => {
                return Err(Error::format(
                    &jsonl_path,
                    "summary rates disagree with the timestep rows".to_string(),
                ));
            }
            ReportLine::JointHistogram { rows } if rows != report.joint_histogram => {
                return Err(Error::format(
                    &jsonl_path,
                    "joint histogram disagrees with the timestep rows".to_string(),
                ));
            }
            _ => {}
        }
    }
    if !saw_header {
        return Err(Error::format(&jsonl_path, "missing header record".to_string()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::HourlyRecord;
    use crate::qnet::{Layout, NetConfig};
    use approx::assert_relative_eq;

    fn zero_net() -> (QNet, Normalizer) {
        let cfg = NetConfig::default();
        let total = Layout::new(&cfg).total;
        let n = QNet::from_params(cfg, vec![0.0; total]).unwrap();
        (n, Normalizer::identity(crate::mdp::STATE_DIM))
    }

    /// A net whose Q-values strictly increase with the action index, for
    /// any input: everything zero except the advantage output biases.
    fn max_dose_net() -> (QNet, Normalizer) {
        let cfg = NetConfig::default();
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        for (k, slot) in params[layout.ab2.clone()].iter_mut().enumerate() {
            *slot = k as f64;
        }
        (
            QNet::from_params(cfg, params).unwrap(),
            Normalizer::identity(crate::mdp::STATE_DIM),
        )
    }

    fn record(hour: u64, morphine: f64) -> HourlyRecord {
        HourlyRecord {
            hour_index: hour,
            pain: Some(5.0),
            hr: Some(80.0),
            rr: Some(16.0),
            morphine_mg: morphine,
            coanalgesics_mg: vec![0.0; 16],
        }
    }

    fn episode(id: &str, doses: &[f64]) -> EpisodeLog {
        EpisodeLog {
            admission_id: id.to_string(),
            records: doses
                .iter()
                .enumerate()
                .map(|(h, &d)| record(h as u64, d))
                .collect(),
        }
    }

    #[test]
    fn greedy_action_breaks_ties_toward_less_morphine() {
        let (net, norm) = zero_net();
        let s = StateVector::new(3.0, 80.0, 16.0, &[0.0; 16]);
        // All parameters zero → all Q equal → tie broken at index 0.
        assert_eq!(greedy_action(&net, &norm, &s).unwrap(), ActionIndex(0));
    }

    #[test]
    fn greedy_action_is_affine_invariant() {
        let cfg = NetConfig::default();
        let net = QNet::init(cfg, 99, 3).unwrap();
        let norm = Normalizer::identity(crate::mdp::STATE_DIM);
        let s = StateVector::new(7.0, 90.0, 14.0, &[0.0; 16]);
        let q = net.forward(&norm.normalize(&s)).unwrap();
        let base = argmax(&q);
        let shifted: Vec<f64> = q.iter().map(|v| 3.25 * v + 11.0).collect();
        assert_eq!(argmax(&shifted), base);
        assert_eq!(greedy_action(&net, &norm, &s).unwrap().index(), base);
    }

    #[test]
    fn compare_policies_hand_fixture_with_withholding_model() {
        // Three episodes with known physician doses; the zero net always
        // recommends action 0.
        let (net, norm) = zero_net();
        let eps = vec![
            episode("c", &[0.0, 2.0, 0.0, 2.0]),  // actions 0,2,0,2
            episode("a", &[5.5, 0.0, 5.5]),       // actions 6,0,6
            episode("b", &[0.0, 0.0]),            // actions 0,0
        ];
        let report = compare_policies(&net, &norm, &eps).unwrap();

        assert_eq!(report.per_timestep.len(), 9);
        // Sorted by admission id: a then b then c.
        assert_eq!(report.per_timestep[0].admission_id, "a");
        assert_eq!(report.per_timestep[0].physician_action, ActionIndex(6));
        assert_eq!(report.per_timestep[8].physician_action, ActionIndex(2));

        // Physician dosed 4 of 9 hours; model never.
        assert_relative_eq!(report.physician_morphine_rate, 4.0 / 9.0);
        assert_eq!(report.model_morphine_rate, 0.0);
        assert_eq!(report.agreement_given_physician_dosed, Some(0.0));

        // Joint histogram: physician rows, model column 0 only.
        assert_eq!(report.joint_histogram[0][0], 5);
        assert_eq!(report.joint_histogram[2][0], 2);
        assert_eq!(report.joint_histogram[6][0], 2);
        assert_eq!(report.model_given_physician_withheld[0], 5);

        // Physician intervals: episode a gap 2, episode c gap 2.
        assert_eq!(report.physician_interval_histogram, BTreeMap::from([(2, 2)]));
        assert!(report.model_interval_histogram.is_empty());

        // Marginals match the per-agent histograms exactly.
        for p in 0..ACTION_COUNT {
            let row_sum: u64 = report.joint_histogram[p].iter().sum();
            assert_eq!(row_sum, report.physician_dose_histogram[p]);
        }
        for m in 0..ACTION_COUNT {
            let col_sum: u64 = (0..ACTION_COUNT).map(|p| report.joint_histogram[p][m]).sum();
            assert_eq!(col_sum, report.model_dose_histogram[m]);
        }
        let total: u64 = report.joint_histogram.iter().flatten().sum();
        assert_eq!(total, 9);
    }

    #[test]
    fn compare_policies_with_always_max_model() {
        let (net, norm) = max_dose_net();
        let eps = vec![episode("x", &[0.0, 1.0, 0.0])];
        let report = compare_policies(&net, &norm, &eps).unwrap();
        assert_eq!(report.model_morphine_rate, 1.0);
        assert_eq!(report.agreement_given_physician_dosed, Some(1.0));
        assert_eq!(report.model_dose_histogram[13], 3);
        // Model dosed every hour → gaps of 1 hour, twice.
        assert_eq!(report.model_interval_histogram, BTreeMap::from([(1, 2)]));
    }

    #[test]
    fn compare_policies_rejects_empty_test_set() {
        let (net, norm) = zero_net();
        assert!(matches!(
            compare_policies(&net, &norm, &[]),
            Err(Error::InsufficientData { .. })
        ));
        let empty = vec![EpisodeLog {
            admission_id: "e".into(),
            records: vec![],
        }];
        assert!(compare_policies(&net, &norm, &empty).is_err());
    }

    #[test]
    fn interval_counts_match_doses_minus_one_per_admission() {
        let (net, norm) = zero_net();
        let eps = vec![
            episode("a", &[1.0, 0.0, 2.0, 3.0, 0.0, 1.0]), // 4 doses → 3 gaps
            episode("b", &[0.0, 4.0, 0.0]),                // 1 dose → 0 gaps
            episode("c", &[2.0, 2.0]),                     // 2 doses → 1 gap
        ];
        let report = compare_policies(&net, &norm, &eps).unwrap();
        let gaps: u64 = report.physician_interval_histogram.values().sum();
        assert_eq!(gaps, 4);
        assert!(report.physician_interval_histogram.keys().all(|&g| g >= 1));
    }

    #[test]
    fn simulate_policy_is_deterministic_per_seed() {
        let ranges = ParamRanges::default();
        let a = simulate_policy(RolloutPolicy::AlwaysWithhold, &ranges, 20, 24, 0.99, 5).unwrap();
        let b = simulate_policy(RolloutPolicy::AlwaysWithhold, &ranges, 20, 24, 0.99, 5).unwrap();
        assert_eq!(a, b);
        let c = simulate_policy(RolloutPolicy::AlwaysWithhold, &ranges, 20, 24, 0.99, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn withholding_on_painful_patients_leaves_pain_near_baseline() {
        // Default ranges draw baseline pain in [4, 9] (mean 6.5) → mean
        // pain score ≈ 1 − 6.5/5 = −0.3 under no treatment.
        let ranges = ParamRanges::default();
        let s = simulate_policy(RolloutPolicy::AlwaysWithhold, &ranges, 100, 48, 0.99, 11).unwrap();
        assert!(
            (-0.55..=-0.05).contains(&s.mean_pain_score),
            "untreated pain score {} out of band",
            s.mean_pain_score
        );
    }

    #[test]
    fn uniform_random_policy_depresses_respiration() {
        let ranges = ParamRanges::default();
        let s = simulate_policy(RolloutPolicy::UniformRandom, &ranges, 100, 48, 0.99, 11).unwrap();
        let w = simulate_policy(RolloutPolicy::AlwaysWithhold, &ranges, 100, 48, 0.99, 11).unwrap();
        assert!(s.mean_rr_window < w.mean_rr_window - 0.5, "random dosing must crash rr");
        assert!(s.mean_pain_score > w.mean_pain_score, "but it does treat the pain");
    }

    #[test]
    fn export_and_read_round_trip() {
        let (net, norm) = zero_net();
        let eps = vec![
            episode("a", &[5.5, 0.0, 5.5]),
            episode("b", &[0.0, 2.0]),
        ];
        let report = compare_policies(&net, &norm, &eps).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_report(&report, dir.path()).unwrap();
        let back = read_report(dir.path()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn empty_report_exports_header_only_files() {
        let report = PolicyReport::empty();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_report(&report, dir.path()).unwrap();
        let csv = std::fs::read_to_string(&paths.timesteps_csv).unwrap();
        assert_eq!(csv.lines().count(), 1);
        let jsonl = std::fs::read_to_string(&paths.report_jsonl).unwrap();
        assert_eq!(jsonl.lines().count(), 1);
        assert!(jsonl.contains("\"record\":\"header\""));
        let back = read_report(dir.path()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn read_report_rejects_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_report(dir.path()),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn export_matches_golden_fixture() {
        let (net, norm) = zero_net();
        let eps = vec![episode("gold", &[5.5, 0.0, 2.0])];
        let report = compare_policies(&net, &norm, &eps).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_report(&report, dir.path()).unwrap();
        let csv = std::fs::read_to_string(&paths.timesteps_csv).unwrap();
        let jsonl = std::fs::read_to_string(&paths.report_jsonl).unwrap();
        if std::env::var("UPDATE_GOLDENS").is_ok() {
            let base = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata");
            std::fs::write(base.join("golden_timesteps.csv"), &csv).unwrap();
            std::fs::write(base.join("golden_report.jsonl"), &jsonl).unwrap();
        }
        assert_eq!(csv, include_str!("../testdata/golden_timesteps.csv"));
        assert_eq!(jsonl, include_str!("../testdata/golden_report.jsonl"));
    }
}
