//! Synthetic cohort generator: a one-compartment morphine PK/PD model
//! rolled out under a noisy rule-based clinician.
//!
//! Each patient is an independent seeded stream. The latent state tracks
//! an effect-site morphine amount with exponential elimination; pain is
//! pulled down from its (slowly recovering) baseline in proportion to the
//! effect-site amount, heart rate rises with pain, and respiration is
//! depressed by the drug. The dynamics are deliberately the simplest
//! model with those qualitative facts:
//!
//!   effect'  = (effect + dose) * 2^(-1/half_life)
//!   pain'    = clamp(baseline_pain - recovery*hour - sensitivity*effect' + noise, 0, 10)
//!   hr'      = clamp(baseline_hr + hr_pain_coeff*pain' + noise, 20, 200)
//!   rr'      = clamp(baseline_rr - resp_depression_coeff*effect' + noise, 2, 50)
//!
//! The clinician treats charted (integer) pain above a threshold with a
//! dose proportional to the excess, frequently withholds, refuses to dose
//! through low respiration, and occasionally charts an exploratory dose.
//! That suboptimality is the point: the logged behavior leaves room for
//! an offline learner to improve on it.

use chrono::NaiveDateTime;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Channel, DrugList, EpisodeLog, HourlyRecord, RawEvent, COANALGESIC_COUNT};
use crate::seeding::{stream_rng, streams};

/// Per-patient physiology and observation-noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// Untreated pain level at admission, 0-10.
    pub baseline_pain: f64,
    /// Resting heart rate, beats/min.
    pub baseline_hr: f64,
    /// Resting respiration rate, breaths/min.
    pub baseline_rr: f64,
    /// Morphine elimination half-life, hours.
    pub pk_half_life_hours: f64,
    /// Pain points relieved per mg of effect-site morphine.
    pub analgesic_sensitivity: f64,
    /// Breaths/min lost per mg of effect-site morphine.
    pub resp_depression_coeff: f64,
    /// Heart-rate elevation per pain point.
    pub hr_pain_coeff: f64,
    /// Baseline pain decline per hour (spontaneous recovery).
    pub recovery_per_hour: f64,
    /// Gaussian noise standard deviations per observation channel.
    pub noise_sd: NoiseSd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSd {
    pub pain: f64,
    pub hr: f64,
    pub rr: f64,
}

impl PatientParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=10.0).contains(&self.baseline_pain) {
            return Err(Error::InvalidParameter(format!(
                "baseline pain {} outside [0,10]",
                self.baseline_pain
            )));
        }
        if self.baseline_hr <= 0.0 || self.baseline_rr <= 0.0 {
            return Err(Error::InvalidParameter("baselines must be positive".into()));
        }
        if self.pk_half_life_hours <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "half-life {} must be positive",
                self.pk_half_life_hours
            )));
        }
        if self.analgesic_sensitivity <= 0.0
            || self.resp_depression_coeff < 0.0
            || self.hr_pain_coeff < 0.0
            || self.recovery_per_hour < 0.0
        {
            return Err(Error::InvalidParameter("coupling coefficients out of range".into()));
        }
        let sds = [self.noise_sd.pain, self.noise_sd.hr, self.noise_sd.rr];
        if sds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidParameter("noise standard deviations must be >= 0".into()));
        }
        Ok(())
    }
}

/// Latent simulator state at one hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub effect_site_mg: f64,
    pub pain: f64,
    pub hr: f64,
    pub rr: f64,
    pub hour: u64,
}

/// One hour of exponential elimination: amount × 2^(−1/half_life).
pub fn decay_step(effect_site_mg: f64, half_life_hours: f64) -> Result<f64> {
    if half_life_hours <= 0.0 || !half_life_hours.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "half-life {half_life_hours} must be positive"
        )));
    }
    if effect_site_mg < 0.0 {
        return Err(Error::InvalidDose(effect_site_mg));
    }
    Ok(effect_site_mg * (-1.0 / half_life_hours).exp2())
}

/// Advances the simulator one hour: the bolus is absorbed within the
/// administration hour and decays with it, then the pharmacodynamic
/// couplings produce the next hour's observations.
pub fn sim_step(
    state: &SimState,
    params: &PatientParams,
    dose_mg: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SimState> {
    if dose_mg < 0.0 || !dose_mg.is_finite() {
        return Err(Error::InvalidDose(dose_mg));
    }
    let hour = state.hour + 1;
    let effect = decay_step(state.effect_site_mg + dose_mg, params.pk_half_life_hours)?;
    let noise = |rng: &mut ChaCha8Rng, sd: f64| -> Result<f64> {
        let dist = Normal::new(0.0, sd)
            .map_err(|e| Error::InvalidParameter(format!("noise sd {sd}: {e}")))?;
        Ok(dist.sample(rng))
    };
    let baseline_pain = (params.baseline_pain - params.recovery_per_hour * hour as f64).max(0.0);
    let pain = (baseline_pain - params.analgesic_sensitivity * effect + noise(rng, params.noise_sd.pain)?)
        .clamp(0.0, 10.0);
    let hr = (params.baseline_hr + params.hr_pain_coeff * pain + noise(rng, params.noise_sd.hr)?)
        .clamp(20.0, 200.0);
    let rr = (params.baseline_rr - params.resp_depression_coeff * effect + noise(rng, params.noise_sd.rr)?)
        .clamp(2.0, 50.0);
    Ok(SimState {
        effect_site_mg: effect,
        pain,
        hr,
        rr,
        hour,
    })
}

/// Initial state: no drug on board, pain at baseline, vitals set by the
/// couplings plus one noise draw.
pub fn init_state(params: &PatientParams, rng: &mut ChaCha8Rng) -> Result<SimState> {
    let noise = |rng: &mut ChaCha8Rng, sd: f64| -> Result<f64> {
        let dist = Normal::new(0.0, sd)
            .map_err(|e| Error::InvalidParameter(format!("noise sd {sd}: {e}")))?;
        Ok(dist.sample(rng))
    };
    let pain = (params.baseline_pain + noise(rng, params.noise_sd.pain)?).clamp(0.0, 10.0);
    let hr = (params.baseline_hr + params.hr_pain_coeff * pain + noise(rng, params.noise_sd.hr)?)
        .clamp(20.0, 200.0);
    let rr = (params.baseline_rr + noise(rng, params.noise_sd.rr)?).clamp(2.0, 50.0);
    Ok(SimState {
        effect_site_mg: 0.0,
        pain,
        hr,
        rr,
        hour: 0,
    })
}

/// Charted pain is an integer score; the latent pain rounds to it.
pub fn observe_pain(latent_pain: f64) -> u8 {
    latent_pain.round().clamp(0.0, 10.0) as u8
}

/// Snaps a dose to the 0.25 mg charting grid. Quarter-milligram values
/// are exact in binary floating point, so dose sums survive aggregation
/// bit-for-bit.
pub fn quantize_dose(mg: f64) -> f64 {
    (mg * 4.0).round() / 4.0
}

/// Behavior policies the generator can roll.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Threshold clinician with withholding and rare exploratory doses.
    RuleBased,
    /// Never doses (baseline).
    AlwaysWithhold,
    /// Uniform random action each hour (baseline).
    UniformRandom,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rule_based" => Ok(PolicyKind::RuleBased),
            "always_withhold" => Ok(PolicyKind::AlwaysWithhold),
            "uniform_random" => Ok(PolicyKind::UniformRandom),
            other => Err(Error::Config(format!("unknown behavior policy {other:?}"))),
        }
    }
}

/// Tunables for the rule-based clinician.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClinicianRule {
    /// Treat only when charted pain is at or above this score.
    pub pain_threshold: f64,
    /// Dose scale per pain point above (threshold − 1).
    pub mg_per_pain_point: f64,
    /// Largest routine bolus.
    pub max_bolus_mg: f64,
    /// Probability of withholding despite qualifying pain.
    pub withhold_prob: f64,
    /// Probability of charting an exploratory dose drawn from [0, 25] mg.
    pub explore_prob: f64,
    /// Never dose when respiration is below this rate.
    pub rr_guard: f64,
    /// PRN lockout: no routine redose until this many hours have passed.
    pub min_redose_interval_hours: u64,
}

impl Default for ClinicianRule {
    fn default() -> Self {
        ClinicianRule {
            pain_threshold: 4.0,
            mg_per_pain_point: 1.5,
            max_bolus_mg: 10.0,
            withhold_prob: 0.5,
            explore_prob: 0.025,
            rr_guard: 12.5,
            min_redose_interval_hours: 5,
        }
    }
}

impl ClinicianRule {
    /// Dose for the hour given the charted pain score, respiration, and
    /// hours since the previous dose. Draw order (explore, withhold) is
    /// fixed so streams stay aligned across branches.
    pub fn decide(&self, pain_score: u8, rr: f64, hours_since_dose: u64, rng: &mut ChaCha8Rng) -> f64 {
        let explore = rng.random::<f64>() < self.explore_prob;
        let withhold = rng.random::<f64>() < self.withhold_prob;
        if explore {
            return quantize_dose(rng.random_range(0.0..25.0));
        }
        if f64::from(pain_score) < self.pain_threshold
            || rr < self.rr_guard
            || hours_since_dose < self.min_redose_interval_hours
            || withhold
        {
            return 0.0;
        }
        let excess = f64::from(pain_score) - self.pain_threshold + 1.0;
        quantize_dose((self.mg_per_pain_point * excess).min(self.max_bolus_mg))
    }
}

/// Ranges the generator samples patient parameters from (uniformly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamRanges {
    pub baseline_pain: (f64, f64),
    pub baseline_hr: (f64, f64),
    pub baseline_rr: (f64, f64),
    pub pk_half_life_hours: (f64, f64),
    pub analgesic_sensitivity: (f64, f64),
    pub resp_depression_coeff: (f64, f64),
    pub hr_pain_coeff: (f64, f64),
    pub recovery_per_hour: (f64, f64),
    pub noise_sd: NoiseSd,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            baseline_pain: (4.0, 9.0),
            baseline_hr: (70.0, 88.0),
            baseline_rr: (14.0, 18.0),
            pk_half_life_hours: (3.0, 4.0),
            analgesic_sensitivity: (0.25, 0.45),
            resp_depression_coeff: (0.15, 0.30),
            hr_pain_coeff: (1.5, 3.0),
            recovery_per_hour: (0.0, 0.02),
            noise_sd: NoiseSd {
                pain: 0.3,
                hr: 2.0,
                rr: 0.5,
            },
        }
    }
}

impl ParamRanges {
    fn validate(&self) -> Result<()> {
        let pairs = [
            ("baseline_pain", self.baseline_pain),
            ("baseline_hr", self.baseline_hr),
            ("baseline_rr", self.baseline_rr),
            ("pk_half_life_hours", self.pk_half_life_hours),
            ("analgesic_sensitivity", self.analgesic_sensitivity),
            ("resp_depression_coeff", self.resp_depression_coeff),
            ("hr_pain_coeff", self.hr_pain_coeff),
            ("recovery_per_hour", self.recovery_per_hour),
        ];
        for (name, (lo, hi)) in pairs {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("bad range for {name}: ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> PatientParams {
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        PatientParams {
            baseline_pain: draw(rng, self.baseline_pain),
            baseline_hr: draw(rng, self.baseline_hr),
            baseline_rr: draw(rng, self.baseline_rr),
            pk_half_life_hours: draw(rng, self.pk_half_life_hours),
            analgesic_sensitivity: draw(rng, self.analgesic_sensitivity),
            resp_depression_coeff: draw(rng, self.resp_depression_coeff),
            hr_pain_coeff: draw(rng, self.hr_pain_coeff),
            recovery_per_hour: draw(rng, self.recovery_per_hour),
            noise_sd: self.noise_sd,
        }
    }
}

/// Typical single doses (mg) for the default co-analgesic list, used when
/// scheduling background medications.
const COANALGESIC_DOSES_MG: [f64; COANALGESIC_COUNT] = [
    650.0, // acetaminophen
    10.0,  // bupivacaine
    0.05,  // dexmedetomidine
    2.0,   // diazepam
    0.05,  // fentanyl
    300.0, // gabapentin
    0.5,   // hydromorphone
    400.0, // ibuprofen
    10.0,  // ketamine
    15.0,  // ketorolac
    100.0, // lidocaine
    1.0,   // lorazepam
    2.0,   // midazolam
    5.0,   // oxycodone
    50.0,  // propofol
    50.0,  // tramadol
];

/// Cohort generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub horizon_hours: u64,
    pub master_seed: u64,
    pub policy: PolicyKind,
    pub rule: ClinicianRule,
    pub ranges: ParamRanges,
    /// Probability a pain observation is charted in any given hour.
    pub pain_observe_prob: f64,
    /// Probability a charted pain entry is free text rather than numeric.
    pub pain_text_prob: f64,
    /// Probability a patient receives each co-analgesic on a schedule.
    pub coanalgesic_use_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 100,
            horizon_hours: 72,
            master_seed: 7,
            policy: PolicyKind::RuleBased,
            rule: ClinicianRule::default(),
            ranges: ParamRanges::default(),
            pain_observe_prob: 0.7,
            pain_text_prob: 0.5,
            coanalgesic_use_prob: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        self.ranges.validate()?;
        for (name, p) in [
            ("pain_observe_prob", self.pain_observe_prob),
            ("pain_text_prob", self.pain_text_prob),
            ("coanalgesic_use_prob", self.coanalgesic_use_prob),
            ("withhold_prob", self.rule.withhold_prob),
            ("explore_prob", self.rule.explore_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }
}

/// One generated admission: the hourly truth log (observed integer pain,
/// exact vitals and doses) plus the raw event rows that render it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPatient {
    pub admission_id: String,
    pub params: PatientParams,
    pub episode: EpisodeLog,
    pub events: Vec<RawEvent>,
}

fn pain_label(score: u8) -> &'static str {
    match score {
        0 => "No Pain",
        1..=2 => "Mild",
        3..=4 => "Mild to Mod",
        5..=6 => "Mod",
        7..=8 => "Severe",
        _ => "Worst Possible",
    }
}

fn admit_time(patient_idx: usize) -> NaiveDateTime {
    // Distinct admission days keep per-patient event files disjoint in time.
    chrono::NaiveDate::from_ymd_opt(2025, 1, 1)
        .expect("static date")
        .and_hms_opt(8, 0, 0)
        .expect("static time")
        + chrono::Duration::days(patient_idx as i64)
}

/// Fixed charting minutes within each hour, one per channel.
mod minute {
    pub const HR: i64 = 0;
    pub const RR: i64 = 2;
    pub const MORPHINE: i64 = 11;
    pub const PAIN: i64 = 27;
    pub const COANALGESIC: i64 = 43;
}

struct CoanalgesicSchedule {
    drug_index: usize,
    period_hours: u64,
    offset_hours: u64,
    dose_mg: f64,
}

fn plan_coanalgesics(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<CoanalgesicSchedule> {
    let periods = [6u64, 8, 12];
    (0..COANALGESIC_COUNT)
        .filter_map(|drug_index| {
            let used = rng.random::<f64>() < cfg.coanalgesic_use_prob;
            let period_hours = periods[rng.random_range(0..periods.len())];
            let offset_hours = rng.random_range(0..period_hours);
            used.then_some(CoanalgesicSchedule {
                drug_index,
                period_hours,
                offset_hours,
                dose_mg: COANALGESIC_DOSES_MG[drug_index],
            })
        })
        .collect()
}

fn generate_patient(cfg: &SynthConfig, drugs: &DrugList, patient_idx: usize) -> Result<SynthPatient> {
    let admission_id = format!("synth-{patient_idx:05}");
    let mut rng = stream_rng(cfg.master_seed, streams::PATIENT_BASE + patient_idx as u64);
    let params = cfg.ranges.sample(&mut rng);
    params.validate()?;
    let schedules = plan_coanalgesics(cfg, &mut rng);
    let admit = admit_time(patient_idx);

    let mut records = Vec::with_capacity(cfg.horizon_hours as usize);
    let mut events = Vec::new();
    let mut state = init_state(&params, &mut rng)?;
    let mut hours_since_dose = cfg.rule.min_redose_interval_hours;

    for hour in 0..cfg.horizon_hours {
        let at = |minute_offset: i64| admit + chrono::Duration::minutes(hour as i64 * 60 + minute_offset);
        let push = |events: &mut Vec<RawEvent>, ts, channel, drug: Option<String>, value: String| {
            events.push(RawEvent {
                admission_id: admission_id.clone(),
                timestamp: ts,
                channel,
                drug_name: drug,
                value,
            });
        };

        let pain_score = observe_pain(state.pain);
        let pain_observed = rng.random::<f64>() < cfg.pain_observe_prob;
        let pain_as_text = rng.random::<f64>() < cfg.pain_text_prob;

        let dose_mg = match cfg.policy {
            PolicyKind::RuleBased => cfg.rule.decide(pain_score, state.rr, hours_since_dose, &mut rng),
            PolicyKind::AlwaysWithhold => 0.0,
            PolicyKind::UniformRandom => quantize_dose(rng.random_range(0.0..25.0)),
        };
        hours_since_dose = if dose_mg > 0.0 {
            0
        } else {
            hours_since_dose.saturating_add(1)
        };

        push(&mut events, at(minute::HR), Channel::HeartRate, None, state.hr.to_string());
        push(&mut events, at(minute::RR), Channel::RespirationRate, None, state.rr.to_string());
        if dose_mg > 0.0 {
            push(
                &mut events,
                at(minute::MORPHINE),
                Channel::MorphineBolusMg,
                None,
                dose_mg.to_string(),
            );
        }
        if pain_observed {
            if pain_as_text {
                push(
                    &mut events,
                    at(minute::PAIN),
                    Channel::PainText,
                    None,
                    format!("{pain_score}-{}", pain_label(pain_score)),
                );
            } else {
                push(
                    &mut events,
                    at(minute::PAIN),
                    Channel::PainNumeric,
                    None,
                    pain_score.to_string(),
                );
            }
        }
        let mut coanalgesics_mg = vec![0.0; COANALGESIC_COUNT];
        for s in &schedules {
            if hour % s.period_hours == s.offset_hours {
                coanalgesics_mg[s.drug_index] += s.dose_mg;
                push(
                    &mut events,
                    at(minute::COANALGESIC),
                    Channel::CoanalgesicMg,
                    Some(drugs.names()[s.drug_index].clone()),
                    s.dose_mg.to_string(),
                );
            }
        }

        records.push(HourlyRecord {
            hour_index: hour,
            pain: pain_observed.then_some(f64::from(pain_score)),
            hr: Some(state.hr),
            rr: Some(state.rr),
            morphine_mg: dose_mg,
            coanalgesics_mg,
        });

        state = sim_step(&state, &params, dose_mg, &mut rng)?;
    }

    Ok(SynthPatient {
        admission_id: admission_id.clone(),
        params,
        episode: EpisodeLog {
            admission_id,
            records,
        },
        events,
    })
}

/// Generates the cohort, one independent seeded stream per patient.
/// Patients are simulated in parallel; output order is by patient index,
/// so results are identical regardless of thread count.
pub fn generate_cohort(cfg: &SynthConfig, drugs: &DrugList) -> Result<Vec<SynthPatient>> {
    cfg.validate()?;
    (0..cfg.n_patients)
        .into_par_iter()
        .map(|idx| generate_patient(cfg, drugs, idx))
        .collect()
}

/// Interactive simulator handle for policy rollouts: same dynamics and
/// seeding scheme as cohort generation, stepped one dose at a time.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub params: PatientParams,
    pub state: SimState,
    rng: ChaCha8Rng,
}

impl Simulator {
    /// Builds rollout `idx` of an evaluation run: parameters and noise come
    /// from the rollout stream of `master_seed`.
    pub fn rollout(master_seed: u64, idx: u64, ranges: &ParamRanges) -> Result<Self> {
        ranges.validate()?;
        let mut rng = stream_rng(master_seed, streams::ROLLOUT_BASE + idx);
        let params = ranges.sample(&mut rng);
        params.validate()?;
        let state = init_state(&params, &mut rng)?;
        Ok(Simulator { params, state, rng })
    }

    /// Applies a dose and advances one hour.
    pub fn step(&mut self, dose_mg: f64) -> Result<()> {
        self.state = sim_step(&self.state, &self.params, dose_mg, &mut self.rng)?;
        Ok(())
    }

    /// Uniform draw helper for the random baseline policy, taken from the
    /// rollout's own stream.
    pub fn random_unit(&mut self) -> f64 {
        self.rng.random()
    }
}
