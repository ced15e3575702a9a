//! MDP construction: state vectors, the 14-bin dose action space, the
//! composite reward, and conversion of hourly episodes into replay
//! transitions.
//!
//! Twenty hourly channels come out of ingestion: pain, heart rate,
//! respiration rate, sixteen co-analgesic dose channels, and morphine.
//! Morphine is the action; the remaining nineteen form the state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EpisodeLog;

/// State dimension: pain + HR + RR + 16 co-analgesic channels.
pub const STATE_DIM: usize = 19;
/// Number of discrete morphine actions.
pub const ACTION_COUNT: usize = 14;
/// Upper edges of the first 13 dose bins, in mg. Bin `k` covers
/// `(edge[k-1], edge[k]]`; the final bin is open-ended above 20 mg.
pub const BIN_UPPER_EDGES_MG: [f64; 13] =
    [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 15.0, 20.0, f64::INFINITY];

/// Acceptable heart-rate range (beats/min) for the reward window.
pub const HR_RANGE: (f64, f64) = (60.0, 100.0);
/// Acceptable respiration-rate range (breaths/min) for the reward window.
pub const RR_RANGE: (f64, f64) = (12.0, 20.0);

/// Steepness of the sigmoid window edges, per unit of the measured signal.
/// A unit-slope logistic leaves the narrow RR window at ~0.93 even at its
/// center; slope 8 saturates the interior of both windows to within 1e-3
/// of 1 while keeping the edge roll-off smooth.
pub const WINDOW_STEEPNESS: f64 = 8.0;

/// Equal mixing weights for the pain, HR, and RR reward components.
pub const COMPONENT_WEIGHT: f64 = 1.0 / 3.0;

/// A 19-dimensional patient state: `[pain, hr, rr, co_0..co_15]`, raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl StateVector {
    pub fn new(pain: f64, hr: f64, rr: f64, coanalgesics: &[f64; 16]) -> Self {
        let mut v = [0.0; STATE_DIM];
        v[0] = pain;
        v[1] = hr;
        v[2] = rr;
        v[3..].copy_from_slice(coanalgesics);
        StateVector(v)
    }

    pub fn pain(&self) -> f64 {
        self.0[0]
    }

    pub fn hr(&self) -> f64 {
        self.0[1]
    }

    pub fn rr(&self) -> f64 {
        self.0[2]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// One of the 14 discrete morphine actions. 0 withholds morphine; 1..=13
/// are increasing dose bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionIndex(pub u8);

impl ActionIndex {
    pub fn index(&self) -> usize {
        self.0 as usize
    }

    /// Human-readable mg range for the bin.
    pub fn label(&self) -> String {
        match self.0 {
            0 => "0 mg".to_string(),
            k @ 1..=10 => format!("({},{}] mg", k - 1, k),
            11 => "(10,15] mg".to_string(),
            12 => "(15,20] mg".to_string(),
            _ => "(20,inf) mg".to_string(),
        }
    }

    /// Representative dose used when replaying an action in the simulator:
    /// the bin midpoint, with 22.5 mg standing in for the open top bin.
    pub fn representative_mg(&self) -> f64 {
        match self.0 {
            0 => 0.0,
            k @ 1..=10 => k as f64 - 0.5,
            11 => 12.5,
            12 => 17.5,
            _ => 22.5,
        }
    }
}

/// Maps a morphine dose in mg onto its action bin.
///
/// 0 mg is action 0; `(k-1, k]` mg is action `k` for `k = 1..=10`;
/// `(10,15]` is 11, `(15,20]` is 12, and anything above 20 mg is 13.
pub fn discretize_dose(dose_mg: f64) -> Result<ActionIndex> {
    if !dose_mg.is_finite() || dose_mg < 0.0 {
        return Err(Error::InvalidDose(dose_mg));
    }
    if dose_mg == 0.0 {
        return Ok(ActionIndex(0));
    }
    for (i, edge) in BIN_UPPER_EDGES_MG.iter().enumerate() {
        if dose_mg <= *edge {
            return Ok(ActionIndex(i as u8 + 1));
        }
    }
    Ok(ActionIndex(ACTION_COUNT as u8 - 1))
}

/// Numerically stable logistic function.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid-window score: ~1 deep inside `[lo, hi]`, ~0 at the edges,
/// ~-1 far outside. Symmetric about the interval midpoint.
pub fn window_score(x: f64, lo: f64, hi: f64) -> Result<f64> {
    // NaN bounds must land in the error branch, hence the negated form.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo, hi });
    }
    let k = WINDOW_STEEPNESS;
    Ok(2.0 * sigmoid(k * (x - lo)) - 2.0 * sigmoid(k * (x - hi)) - 1.0)
}

/// Pain reward component: linear from +1 at no pain to -1 at worst pain.
/// Inputs outside [0,10] are clamped with a warning.
pub fn pain_score(p: f64) -> f64 {
    let clamped = p.clamp(0.0, 10.0);
    if clamped != p {
        log::warn!("pain {} outside [0,10]; clamped to {}", p, clamped);
    }
    1.0 - clamped / 5.0
}

/// Composite reward: equal-weighted pain score plus HR and RR window scores.
/// Bounded in [-1, 1]; maximal when pain is absent and both vitals sit
/// inside their acceptable ranges.
pub fn reward(hr: f64, rr: f64, p: f64) -> f64 {
    let hr_score = window_score(hr, HR_RANGE.0, HR_RANGE.1).expect("static HR range");
    let rr_score = window_score(rr, RR_RANGE.0, RR_RANGE.1).expect("static RR range");
    COMPONENT_WEIGHT * (pain_score(p) + hr_score + rr_score)
}

/// Which hour's observations the reward for action a_t is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardTiming {
    /// Reward reflects the consequence of the action: hour t+1 observations.
    #[default]
    NextHour,
    /// Ablation: reward from the same hour's observations.
    SameHour,
}

impl std::str::FromStr for RewardTiming {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "next_hour" => Ok(RewardTiming::NextHour),
            "same_hour" => Ok(RewardTiming::SameHour),
            other => Err(Error::Config(format!("unknown reward timing {other:?}"))),
        }
    }
}

/// One replay tuple. `next_state` is absent exactly when the transition is
/// terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: ActionIndex,
    pub reward: f64,
    pub next_state: Option<StateVector>,
    pub terminal: bool,
}

/// Converts an imputed episode into transitions.
///
/// Hour t supplies the state and the (discretized) morphine action; the
/// reward is evaluated per `timing`; hour t+1 supplies the next state. The
/// last pair is terminal. Episodes shorter than 2 hours are rejected.
pub fn episode_to_transitions(episode: &EpisodeLog, timing: RewardTiming) -> Result<Vec<Transition>> {
    let n = episode.records.len();
    if n < 2 {
        return Err(Error::EpisodeTooShort {
            admission_id: episode.admission_id.clone(),
            hours: n,
        });
    }
    let states: Vec<StateVector> = episode
        .records
        .iter()
        .map(|r| record_state(r, &episode.admission_id))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(n - 1);
    for t in 0..n - 1 {
        let obs = match timing {
            RewardTiming::NextHour => &states[t + 1],
            RewardTiming::SameHour => &states[t],
        };
        let terminal = t == n - 2;
        out.push(Transition {
            state: states[t],
            action: discretize_dose(episode.records[t].morphine_mg)?,
            reward: reward(obs.hr(), obs.rr(), obs.pain()),
            next_state: Some(states[t + 1]),
            terminal,
        });
    }
    out.last_mut().expect("n >= 2").next_state = None;
    Ok(out)
}

/// State vector for one imputed hourly record. Errors if a vital is
/// still missing (impute first).
pub fn record_state(r: &crate::ingest::HourlyRecord, admission_id: &str) -> Result<StateVector> {
    let mut co = [0.0; 16];
    co.copy_from_slice(&r.coanalgesics_mg);
    Ok(StateVector::new(
        r.pain.ok_or_else(|| missing(admission_id, "pain"))?,
        r.hr.ok_or_else(|| missing(admission_id, "hr"))?,
        r.rr.ok_or_else(|| missing(admission_id, "rr"))?,
        &co,
    ))
}

fn missing(admission_id: &str, channel: &str) -> Error {
    Error::Internal(format!(
        "episode {admission_id:?} has a missing {channel} value; impute before building transitions"
    ))
}

/// Per-channel z-score statistics computed on the training split and applied
/// everywhere a state enters the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Normalizer {
    /// Identity normalizer (mean 0, sd 1); used by tests and toy problems.
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    /// Fits per-channel mean and standard deviation over the states (and
    /// next states) of a transition set. Channels with ~zero variance get
    /// sd 1 so constant channels pass through unscaled.
    pub fn fit(transitions: &[Transition]) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = [0.0; STATE_DIM];
        let mut sum_sq = [0.0; STATE_DIM];
        let mut tally = |s: &StateVector| {
            for (i, x) in s.0.iter().enumerate() {
                sum[i] += x;
                sum_sq[i] += x * x;
            }
            count += 1;
        };
        for t in transitions {
            tally(&t.state);
            if let Some(ns) = &t.next_state {
                tally(ns);
            }
        }
        if count == 0 {
            return Err(Error::InsufficientData { have: 0, need: 1 });
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let sd: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd <= 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Normalizer { mean, sd })
    }

    pub fn normalize(&self, state: &StateVector) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (state.0[i] - self.mean[i]) / self.sd[i];
        }
        out
    }
}

/// A transition set plus the metadata needed to reuse it: normalization
/// statistics, bin edges, and the reward-timing convention.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub transitions: Vec<Transition>,
    pub normalizer: Normalizer,
    pub reward_timing: RewardTiming,
}

const TRANSITIONS_HEADER: &str = "#dosing-transitions v1";

impl TransitionSet {
    /// Builds a transition set from imputed episodes, skipping (and
    /// counting) episodes shorter than two hours. The normalizer is fitted
    /// on the produced transitions unless one is supplied.
    pub fn from_episodes(
        episodes: &[EpisodeLog],
        timing: RewardTiming,
        normalizer: Option<Normalizer>,
    ) -> Result<(Self, usize)> {
        let mut transitions = Vec::new();
        let mut skipped = 0usize;
        for ep in episodes {
            match episode_to_transitions(ep, timing) {
                Ok(mut ts) => transitions.append(&mut ts),
                Err(Error::EpisodeTooShort { admission_id, hours }) => {
                    log::warn!("skipping episode {admission_id:?}: {hours} hours");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let normalizer = match normalizer {
            Some(n) => n,
            None => Normalizer::fit(&transitions)?,
        };
        Ok((
            TransitionSet {
                transitions,
                normalizer,
                reward_timing: timing,
            },
            skipped,
        ))
    }

    /// Writes the line-oriented transitions format: a version line, header
    /// fields, then one `action,reward,terminal,state...,next_state...` row
    /// per transition. Floats use the shortest round-trip representation.
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{TRANSITIONS_HEADER}")?;
        writeln!(w, "state_dim,{STATE_DIM}")?;
        writeln!(w, "actions,{ACTION_COUNT}")?;
        let edges: Vec<String> = BIN_UPPER_EDGES_MG[..12].iter().map(|e| e.to_string()).collect();
        writeln!(w, "bin_upper_edges_mg,{}", edges.join(","))?;
        writeln!(w, "norm_mean,{}", join_floats(&self.normalizer.mean))?;
        writeln!(w, "norm_sd,{}", join_floats(&self.normalizer.sd))?;
        let timing = match self.reward_timing {
            RewardTiming::NextHour => "next_hour",
            RewardTiming::SameHour => "same_hour",
        };
        writeln!(w, "reward_timing,{timing}")?;
        writeln!(w, "count,{}", self.transitions.len())?;
        for t in &self.transitions {
            let next = match &t.next_state {
                Some(ns) => join_floats(&ns.0),
                None => vec![""; STATE_DIM].join(","),
            };
            writeln!(
                w,
                "{},{},{},{},{}",
                t.action.0,
                t.reward,
                u8::from(t.terminal),
                join_floats(&t.state.0),
                next
            )?;
        }
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut lines = text.lines();
        let bad = |msg: &str| Error::format(path, msg);
        if lines.next() != Some(TRANSITIONS_HEADER) {
            return Err(bad(&format!("expected header {TRANSITIONS_HEADER:?}")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(path, format!("missing field {name}")))?;
            line.strip_prefix(&format!("{name},"))
                .map(str::to_string)
                .ok_or_else(|| Error::format(path, format!("expected field {name}, got {line:?}")))
        };
        let state_dim: usize = field("state_dim")?
            .parse()
            .map_err(|_| bad("bad state_dim"))?;
        if state_dim != STATE_DIM {
            return Err(Error::DimensionMismatch {
                expected: STATE_DIM,
                got: state_dim,
            });
        }
        let actions: usize = field("actions")?.parse().map_err(|_| bad("bad actions"))?;
        if actions != ACTION_COUNT {
            return Err(bad(&format!("expected {ACTION_COUNT} actions, got {actions}")));
        }
        field("bin_upper_edges_mg")?;
        let mean = parse_floats(&field("norm_mean")?).map_err(|m| bad(&m))?;
        let sd = parse_floats(&field("norm_sd")?).map_err(|m| bad(&m))?;
        if mean.len() != STATE_DIM || sd.len() != STATE_DIM {
            return Err(bad("normalization statistics have the wrong dimension"));
        }
        let reward_timing: RewardTiming = field("reward_timing")?.parse()?;
        let count: usize = field("count")?.parse().map_err(|_| bad("bad count"))?;

        let mut transitions = Vec::with_capacity(count);
        for line in lines {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 + 2 * STATE_DIM {
                return Err(bad(&format!("row has {} fields", parts.len())));
            }
            let action = ActionIndex(parts[0].parse().map_err(|_| bad("bad action"))?);
            let reward: f64 = parts[1].parse().map_err(|_| bad("bad reward"))?;
            let terminal = match parts[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad terminal flag")),
            };
            let mut state = [0.0; STATE_DIM];
            for (i, p) in parts[3..3 + STATE_DIM].iter().enumerate() {
                state[i] = p.parse().map_err(|_| bad("bad state value"))?;
            }
            let next_state = if terminal {
                None
            } else {
                let mut ns = [0.0; STATE_DIM];
                for (i, p) in parts[3 + STATE_DIM..].iter().enumerate() {
                    ns[i] = p.parse().map_err(|_| bad("bad next-state value"))?;
                }
                Some(StateVector(ns))
            };
            transitions.push(Transition {
                state: StateVector(state),
                action,
                reward,
                next_state,
                terminal,
            });
        }
        if transitions.len() != count {
            return Err(bad(&format!(
                "expected {count} transitions, found {}",
                transitions.len()
            )));
        }
        Ok(TransitionSet {
            transitions,
            normalizer: Normalizer { mean, sd },
            reward_timing,
        })
    }
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.parse().map_err(|_| format!("bad float {p:?}")))
        .collect()
}
