//! Ingestion: raw charted events to clean hourly episodes.
//!
//! The raw input is an event log in the shape a bedside system exports:
//! one row per charted observation or administered dose, with free-text
//! pain entries ("3-Mild to Mod") and irregular timestamps. This module
//! parses those rows, buckets them into admission-relative hours (means
//! for observations, sums for doses), fills gaps by carrying the last
//! observation forward, and splits admissions into train/val/test.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{stream_rng, streams};

/// Number of co-analgesic dose channels carried in every state vector.
pub const COANALGESIC_COUNT: usize = 16;

/// Default co-analgesic list: the non-morphine analgesics and analgesic
/// adjuncts whose hourly doses become state channels. Override via config;
/// the count is fixed at 16 because the state layout depends on it.
pub const DEFAULT_COANALGESICS: [&str; COANALGESIC_COUNT] = [
    "acetaminophen",
    "bupivacaine",
    "dexmedetomidine",
    "diazepam",
    "fentanyl",
    "gabapentin",
    "hydromorphone",
    "ibuprofen",
    "ketamine",
    "ketorolac",
    "lidocaine",
    "lorazepam",
    "midazolam",
    "oxycodone",
    "propofol",
    "tramadol",
];

const EVENTS_HEADER: &str = "#dosing-events v1";
const EPISODES_HEADER: &str = "#dosing-episodes v1";
const TS_SECONDS: &str = "%Y-%m-%dT%H:%M:%S";
const TS_MINUTES: &str = "%Y-%m-%dT%H:%M";

/// The configured 16-drug co-analgesic list; channel `i` of each record's
/// co-analgesic block is dose of `list[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct DrugList(Vec<String>);

impl Default for DrugList {
    fn default() -> Self {
        DrugList(DEFAULT_COANALGESICS.iter().map(|s| s.to_string()).collect())
    }
}

impl TryFrom<Vec<String>> for DrugList {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        DrugList::new(names)
    }
}

impl From<DrugList> for Vec<String> {
    fn from(list: DrugList) -> Vec<String> {
        list.0
    }
}

impl DrugList {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != COANALGESIC_COUNT {
            return Err(Error::Config(format!(
                "co-analgesic list must have exactly {COANALGESIC_COUNT} drugs, got {}",
                names.len()
            )));
        }
        let mut seen = names.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != names.len() || names.iter().any(|n| n.trim().is_empty()) {
            return Err(Error::Config("co-analgesic names must be unique and nonempty".into()));
        }
        Ok(DrugList(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, drug: &str) -> Option<usize> {
        self.0.iter().position(|d| d == drug)
    }
}

/// Fallback values used for hours before a channel's first observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortDefaults {
    pub pain: f64,
    pub hr: f64,
    pub rr: f64,
}

impl Default for CohortDefaults {
    fn default() -> Self {
        // No reported pain and textbook resting vitals: neutral under the
        // reward, so imputed lead-ins neither punish nor favor dosing.
        CohortDefaults {
            pain: 0.0,
            hr: 80.0,
            rr: 16.0,
        }
    }
}

/// Kind of charted event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    PainNumeric,
    PainText,
    MorphineBolusMg,
    CoanalgesicMg,
    HeartRate,
    RespirationRate,
}

impl Channel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::PainNumeric => "pain_numeric",
            Channel::PainText => "pain_text",
            Channel::MorphineBolusMg => "morphine_bolus_mg",
            Channel::CoanalgesicMg => "coanalgesic_mg",
            Channel::HeartRate => "heart_rate",
            Channel::RespirationRate => "respiration_rate",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pain_numeric" => Some(Channel::PainNumeric),
            "pain_text" => Some(Channel::PainText),
            "morphine_bolus_mg" => Some(Channel::MorphineBolusMg),
            "coanalgesic_mg" => Some(Channel::CoanalgesicMg),
            "heart_rate" => Some(Channel::HeartRate),
            "respiration_rate" => Some(Channel::RespirationRate),
            _ => None,
        }
    }
}

/// One charted row. `value` stays raw because pain-text entries are free
/// text; numeric channels parse it during aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub admission_id: String,
    pub timestamp: NaiveDateTime,
    pub channel: Channel,
    /// Drug name for co-analgesic doses; empty otherwise.
    pub drug_name: Option<String>,
    pub value: String,
}

/// One admission-relative hour after aggregation. Observation channels are
/// `None` until imputation fills them; dose channels default to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyRecord {
    pub hour_index: u64,
    pub pain: Option<f64>,
    pub hr: Option<f64>,
    pub rr: Option<f64>,
    pub morphine_mg: f64,
    pub coanalgesics_mg: Vec<f64>,
}

impl HourlyRecord {
    pub fn empty(hour_index: u64) -> Self {
        HourlyRecord {
            hour_index,
            pain: None,
            hr: None,
            rr: None,
            morphine_mg: 0.0,
            coanalgesics_mg: vec![0.0; COANALGESIC_COUNT],
        }
    }
}

/// All hourly records for one admission, hour 0 through the last charted
/// hour, with no gaps in `hour_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub admission_id: String,
    pub records: Vec<HourlyRecord>,
}

/// Counters for rows discarded during aggregation. Bad rows cost a
/// reading, never an admission.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub events_in: usize,
    pub dropped_unparseable_pain: usize,
    pub dropped_bad_value: usize,
    pub dropped_unknown_drug: usize,
    pub admissions_out: usize,
    pub admissions_empty: usize,
}

impl AggregateStats {
    fn absorb(&mut self, other: &AggregateStats) {
        self.events_in += other.events_in;
        self.dropped_unparseable_pain += other.dropped_unparseable_pain;
        self.dropped_bad_value += other.dropped_bad_value;
        self.dropped_unknown_drug += other.dropped_unknown_drug;
        self.admissions_out += other.admissions_out;
        self.admissions_empty += other.admissions_empty;
    }
}

/// Cells filled during imputation, per channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputeStats {
    pub pain: usize,
    pub hr: usize,
    pub rr: usize,
}

/// Extracts the leading integer of a charted pain entry, validated to the
/// 0-10 scale: "3-Mild to Mod" is 3, "7" is 7. Entries without a leading
/// integer in range are rejected (and dropped upstream).
pub fn parse_pain_text(text: &str) -> Result<u8> {
    let digits: String = text
        .trim()
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let score: u64 = digits
        .parse()
        .map_err(|_| Error::UnparseablePain(text.to_string()))?;
    if score > 10 {
        return Err(Error::UnparseablePain(text.to_string()));
    }
    Ok(score as u8)
}

#[derive(Default)]
struct HourAccum {
    pain: Vec<f64>,
    hr: Vec<f64>,
    rr: Vec<f64>,
    morphine_mg: f64,
    coanalgesics_mg: [f64; COANALGESIC_COUNT],
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn parse_nonneg(value: &str) -> Option<f64> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 0.0)
}

/// Buckets one admission's events into admission-relative hours.
///
/// Hour 0 starts at the first event's timestamp truncated to the hour.
/// Pain/HR/RR readings within an hour are averaged; doses are summed.
/// Unparseable pain, out-of-range or negative numerics, and unknown drug
/// names are dropped and counted.
pub fn aggregate_hourly(
    events: &[RawEvent],
    drugs: &DrugList,
) -> Result<(EpisodeLog, AggregateStats)> {
    let Some(first) = events.first() else {
        return Err(Error::EmptyEpisode("<no events>".into()));
    };
    let admission_id = first.admission_id.clone();
    if events.iter().any(|e| e.admission_id != admission_id) {
        return Err(Error::InvalidParameter(
            "aggregate_hourly got events from more than one admission".into(),
        ));
    }
    let mut stats = AggregateStats {
        events_in: events.len(),
        ..AggregateStats::default()
    };

    let origin = events
        .iter()
        .map(|r| r.timestamp)
        .min()
        .expect("nonempty")
        .with_minute(0)
        .and_then(|t| t.with_second(0))
        .and_then(|t| t.with_nanosecond(0))
        .expect("hour truncation is always valid");

    let mut hours: BTreeMap<u64, HourAccum> = BTreeMap::new();
    let mut kept = 0usize;
    for row in events {
        let hour = ((row.timestamp - origin).num_seconds() / 3600) as u64;
        match row.channel {
            Channel::PainNumeric => match parse_nonneg(&row.value).filter(|p| *p <= 10.0) {
                Some(p) => {
                    hours.entry(hour).or_default().pain.push(p);
                    kept += 1;
                }
                None => {
                    log::warn!("{admission_id}: dropping pain value {:?}", row.value);
                    stats.dropped_unparseable_pain += 1;
                }
            },
            Channel::PainText => match parse_pain_text(&row.value) {
                Ok(p) => {
                    hours.entry(hour).or_default().pain.push(f64::from(p));
                    kept += 1;
                }
                Err(_) => {
                    log::warn!("{admission_id}: dropping pain entry {:?}", row.value);
                    stats.dropped_unparseable_pain += 1;
                }
            },
            Channel::HeartRate | Channel::RespirationRate => match parse_nonneg(&row.value) {
                Some(v) => {
                    let acc = hours.entry(hour).or_default();
                    if row.channel == Channel::HeartRate {
                        acc.hr.push(v);
                    } else {
                        acc.rr.push(v);
                    }
                    kept += 1;
                }
                None => {
                    log::warn!(
                        "{admission_id}: dropping {} value {:?}",
                        row.channel.as_str(),
                        row.value
                    );
                    stats.dropped_bad_value += 1;
                }
            },
            Channel::MorphineBolusMg => match parse_nonneg(&row.value) {
                Some(mg) => {
                    hours.entry(hour).or_default().morphine_mg += mg;
                    kept += 1;
                }
                None => {
                    log::warn!("{admission_id}: dropping morphine dose {:?}", row.value);
                    stats.dropped_bad_value += 1;
                }
            },
            Channel::CoanalgesicMg => {
                let idx = row.drug_name.as_deref().and_then(|d| drugs.index_of(d));
                match (idx, parse_nonneg(&row.value)) {
                    (Some(i), Some(mg)) => {
                        hours.entry(hour).or_default().coanalgesics_mg[i] += mg;
                        kept += 1;
                    }
                    (None, _) => {
                        log::warn!(
                            "{admission_id}: dropping dose of unknown drug {:?}",
                            row.drug_name
                        );
                        stats.dropped_unknown_drug += 1;
                    }
                    _ => {
                        log::warn!(
                            "{admission_id}: dropping {:?} dose {:?}",
                            row.drug_name,
                            row.value
                        );
                        stats.dropped_bad_value += 1;
                    }
                }
            }
        }
    }

    if kept == 0 {
        return Err(Error::EmptyEpisode(admission_id));
    }

    let last_hour = *hours.keys().next_back().expect("kept > 0");
    let records = (0..=last_hour)
        .map(|h| match hours.get(&h) {
            Some(acc) => HourlyRecord {
                hour_index: h,
                pain: mean(&acc.pain),
                hr: mean(&acc.hr),
                rr: mean(&acc.rr),
                morphine_mg: acc.morphine_mg,
                coanalgesics_mg: acc.coanalgesics_mg.to_vec(),
            },
            None => HourlyRecord::empty(h),
        })
        .collect();
    stats.admissions_out = 1;
    Ok((
        EpisodeLog {
            admission_id,
            records,
        },
        stats,
    ))
}

/// Aggregates a whole event log: groups rows by admission (sorted by id),
/// aggregates each, and skips admissions whose every row was dropped.
pub fn aggregate_cohort(events: &[RawEvent], drugs: &DrugList) -> (Vec<EpisodeLog>, AggregateStats) {
    let mut by_admission: BTreeMap<&str, Vec<RawEvent>> = BTreeMap::new();
    for ev in events {
        by_admission
            .entry(&ev.admission_id)
            .or_default()
            .push(ev.clone());
    }
    let mut episodes = Vec::with_capacity(by_admission.len());
    let mut stats = AggregateStats::default();
    for rows in by_admission.values() {
        match aggregate_hourly(rows, drugs) {
            Ok((episode, s)) => {
                stats.absorb(&s);
                episodes.push(episode);
            }
            Err(Error::EmptyEpisode(id)) => {
                log::warn!("{id}: every event dropped; skipping admission");
                stats.events_in += rows.len();
                stats.admissions_empty += 1;
            }
            Err(_) => unreachable!("aggregate_hourly only fails on empty/mixed input"),
        }
    }
    (episodes, stats)
}

/// Fills missing observations by carrying the last value forward; hours
/// before the first observation of a channel get the cohort default.
pub fn impute_episode(episode: &mut EpisodeLog, defaults: &CohortDefaults) -> ImputeStats {
    let mut stats = ImputeStats::default();
    let mut hold = |get: fn(&HourlyRecord) -> Option<f64>,
                    set: fn(&mut HourlyRecord, f64),
                    default: f64,
                    count: &mut usize| {
        let mut last = default;
        for rec in &mut episode.records {
            match get(rec) {
                Some(v) => last = v,
                None => {
                    set(rec, last);
                    *count += 1;
                }
            }
        }
    };
    hold(|r| r.pain, |r, v| r.pain = Some(v), defaults.pain, &mut stats.pain);
    hold(|r| r.hr, |r, v| r.hr = Some(v), defaults.hr, &mut stats.hr);
    hold(|r| r.rr, |r, v| r.rr = Some(v), defaults.rr, &mut stats.rr);
    stats
}

/// Imputes every episode in place, returning summed counts.
pub fn impute_all(episodes: &mut [EpisodeLog], defaults: &CohortDefaults) -> ImputeStats {
    let mut total = ImputeStats::default();
    for ep in episodes {
        let s = impute_episode(ep, defaults);
        total.pain += s.pain;
        total.hr += s.hr;
        total.rr += s.rr;
    }
    total
}

/// Train/validation/test admission split.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    pub train: Vec<EpisodeLog>,
    pub val: Vec<EpisodeLog>,
    pub test: Vec<EpisodeLog>,
}

/// Fractions of admissions allocated to each split. Must be positive and
/// sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::Config(format!("split fractions must be positive: {self:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Splits admissions at random but reproducibly: episodes are sorted by
/// admission id, shuffled with the split stream of `master_seed`, and cut
/// at floor(fraction * n) boundaries with the remainder going to train.
pub fn split_cohort(
    mut episodes: Vec<EpisodeLog>,
    fractions: SplitFractions,
    master_seed: u64,
) -> Result<CohortSplit> {
    fractions.validate()?;
    let n = episodes.len();
    let n_val = (fractions.val * n as f64).floor() as usize;
    let n_test = (fractions.test * n as f64).floor() as usize;
    if n_val == 0 || n_test == 0 {
        let smallest = fractions.val.min(fractions.test);
        return Err(Error::InsufficientData {
            have: n,
            need: (1.0 / smallest).ceil() as usize,
        });
    }
    episodes.sort_by(|a, b| a.admission_id.cmp(&b.admission_id));
    let mut rng = stream_rng(master_seed, streams::SPLIT);
    episodes.shuffle(&mut rng);

    let test = episodes.split_off(n - n_test);
    let val = episodes.split_off(n - n_test - n_val);
    Ok(CohortSplit {
        train: episodes,
        val,
        test,
    })
}

/// Writes the versioned events CSV: a format line, then
/// `admission_id,timestamp_iso8601,channel,drug_name,value` rows with
/// minute-resolution timestamps.
pub fn write_events(path: &Path, events: &[RawEvent]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{EVENTS_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["admission_id", "timestamp_iso8601", "channel", "drug_name", "value"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for ev in events {
        w.write_record([
            ev.admission_id.as_str(),
            &ev.timestamp.format(TS_MINUTES).to_string(),
            ev.channel.as_str(),
            ev.drug_name.as_deref().unwrap_or(""),
            ev.value.as_str(),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one versioned events CSV.
pub fn read_events(path: &Path) -> Result<Vec<RawEvent>> {
    let text =
        std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let Some((first, rest)) = text.split_once('\n') else {
        return Err(Error::format(path, "empty file"));
    };
    if first.trim_end() != EVENTS_HEADER {
        return Err(Error::format(
            path,
            format!("expected format line {EVENTS_HEADER:?}, got {first:?}"),
        ));
    }
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let mut events = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        if row.len() != 5 {
            return Err(Error::format(path, format!("row {} has {} fields", i + 2, row.len())));
        }
        let timestamp = NaiveDateTime::parse_from_str(&row[1], TS_SECONDS)
            .or_else(|_| NaiveDateTime::parse_from_str(&row[1], TS_MINUTES))
            .map_err(|e| Error::format(path, format!("row {}: bad timestamp: {e}", i + 2)))?;
        let channel = Channel::parse(&row[2])
            .ok_or_else(|| Error::format(path, format!("row {}: unknown channel {:?}", i + 2, &row[2])))?;
        let drug_name = if row[3].is_empty() {
            None
        } else {
            Some(row[3].to_string())
        };
        events.push(RawEvent {
            admission_id: row[0].to_string(),
            timestamp,
            channel,
            drug_name,
            value: row[4].to_string(),
        });
    }
    Ok(events)
}

/// Reads either one events CSV or a directory of them (sorted by file
/// name, so ordering is deterministic).
pub fn read_events_path(path: &Path) -> Result<Vec<RawEvent>> {
    if !path.is_dir() {
        return read_events(path);
    }
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut events = Vec::new();
    for file in files {
        events.extend(read_events(&file)?);
    }
    Ok(events)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, path: &Path) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| Error::format(path, format!("bad float {s:?}")))
    }
}

/// Writes episodes to one line-oriented file: a format line, the drug
/// list, an episode count, then per episode a `@admission_id,hours` header
/// and `hour,pain,hr,rr,morphine,<16 co-analgesic doses>` rows. Missing
/// observations are empty fields.
pub fn write_episodes(path: &Path, episodes: &[EpisodeLog], drugs: &DrugList) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{EPISODES_HEADER}")?;
    writeln!(w, "coanalgesics,{}", drugs.names().join(","))?;
    writeln!(w, "episodes,{}", episodes.len())?;
    for ep in episodes {
        writeln!(w, "@{},{}", ep.admission_id, ep.records.len())?;
        for r in &ep.records {
            let co: Vec<String> = r.coanalgesics_mg.iter().map(|x| x.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.hour_index,
                fmt_opt(r.pain),
                fmt_opt(r.hr),
                fmt_opt(r.rr),
                r.morphine_mg,
                co.join(",")
            )?;
        }
    }
    Ok(())
}

/// Reads a file produced by [`write_episodes`], returning the episodes and
/// the drug list they were written under.
pub fn read_episodes(path: &Path) -> Result<(Vec<EpisodeLog>, DrugList)> {
    let text =
        std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut lines = text.lines();
    if lines.next() != Some(EPISODES_HEADER) {
        return Err(Error::format(path, format!("expected format line {EPISODES_HEADER:?}")));
    }
    let drugs = lines
        .next()
        .and_then(|l| l.strip_prefix("coanalgesics,"))
        .ok_or_else(|| Error::format(path, "missing co-analgesic list"))
        .and_then(|l| DrugList::new(l.split(',').map(str::to_string).collect()))?;
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("episodes,"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "missing episode count"))?;

    let mut episodes: Vec<EpisodeLog> = Vec::with_capacity(count);
    for line in lines {
        if let Some(head) = line.strip_prefix('@') {
            let (id, hours) = head
                .rsplit_once(',')
                .ok_or_else(|| Error::format(path, format!("bad episode header {line:?}")))?;
            let hours: usize = hours
                .parse()
                .map_err(|_| Error::format(path, format!("bad hour count in {line:?}")))?;
            episodes.push(EpisodeLog {
                admission_id: id.to_string(),
                records: Vec::with_capacity(hours),
            });
            continue;
        }
        let ep = episodes
            .last_mut()
            .ok_or_else(|| Error::format(path, "record row before any episode header"))?;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 + COANALGESIC_COUNT {
            return Err(Error::format(path, format!("row has {} fields", parts.len())));
        }
        let bad = |what: &str| Error::format(path, format!("bad {what} in {line:?}"));
        let mut co = Vec::with_capacity(COANALGESIC_COUNT);
        for p in &parts[5..] {
            co.push(p.parse::<f64>().map_err(|_| bad("dose"))?);
        }
        ep.records.push(HourlyRecord {
            hour_index: parts[0].parse().map_err(|_| bad("hour"))?,
            pain: parse_opt(parts[1], path)?,
            hr: parse_opt(parts[2], path)?,
            rr: parse_opt(parts[3], path)?,
            morphine_mg: parts[4].parse().map_err(|_| bad("morphine dose"))?,
            coanalgesics_mg: co,
        });
    }
    if episodes.len() != count {
        return Err(Error::format(
            path,
            format!("expected {count} episodes, found {}", episodes.len()),
        ));
    }
    for ep in &episodes {
        if ep.records.is_empty() {
            return Err(Error::EmptyEpisode(ep.admission_id.clone()));
        }
        for (i, r) in ep.records.iter().enumerate() {
            if r.hour_index != i as u64 {
                return Err(Error::format(
                    path,
                    format!("episode {:?} hour {i} has index {}", ep.admission_id, r.hour_index),
                ));
            }
        }
    }
    Ok((episodes, drugs))
}
