//! File formats: JSON-lines event logs, grid CSVs and observed registry data.
//!
//! Everything here is `f64`; floats are written in shortest round-trip form
//! so files read back bit for bit.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limit::LimitSolution;
use crate::model::{EpidemicState, EventKind, ModelSpec};
use crate::path::{replay, sample_grid, verify_replay, PathIntegrals};
use crate::trajectory::{EventRecord, SimulationConfig, Trajectory};

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse { line, message: e.to_string() }
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    config: SimulationConfig<f64>,
}

/// Writes the configuration header followed by one JSON object per event.
pub fn write_event_log<W: Write>(mut w: W, traj: &Trajectory<f64>) -> Result<()> {
    serde_json::to_writer(&mut w, &LogHeader { config: traj.config.clone() })?;
    w.write_all(b"\n")?;
    for rec in &traj.events {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a log written by [`write_event_log`], checks every snapshot by replay
/// and recomputes the path integrals.
pub fn read_event_log<R: BufRead>(r: R) -> Result<Trajectory<f64>> {
    let mut lines = r.lines().enumerate().filter_map(|(k, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((k + 1, other)),
    });
    let (line, header) = lines.next().ok_or(Error::Parse { line: 1, message: "missing header line".into() })?;
    let header: LogHeader = serde_json::from_str(&header?).map_err(|e| Error::Parse { line, message: e.to_string() })?;
    let mut events = Vec::new();
    for (line, text) in lines {
        let rec: EventRecord<f64> = serde_json::from_str(&text?).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        events.push(rec);
    }
    header.config.validate()?;
    let terminal_time = header.config.terminal_time(&events);
    let mut traj = Trajectory { config: header.config, events, terminal_time, integrals: PathIntegrals::default(), thinning: None };
    verify_replay(&traj)?;
    traj.integrals = replay(&traj, &traj.config.spec.psi)?.integrals;
    Ok(traj)
}

/// Builds a log from event types and times, filling in snapshots and pairings.
pub fn assemble_log(config: SimulationConfig<f64>, events: &[(f64, EventKind)]) -> Result<Trajectory<f64>> {
    let mut state = EpidemicState::initial(config.initial_susceptibles, config.initial_infectives);
    let mut records = Vec::with_capacity(events.len());
    for (k, &(t, kind)) in events.iter().enumerate() {
        state.apply(kind, t)?;
        records.push(EventRecord {
            k: k as u64 + 1,
            t,
            event: kind,
            s: state.susceptibles,
            i: state.infectives,
            r_count: state.removed.count(),
            r_psi_pre: 0.0,
        });
    }
    let terminal_time = config.terminal_time(&records);
    if records.last().is_some_and(|r| r.t > terminal_time) {
        return Err(Error::InconsistentLog(format!("events after the observation end {terminal_time}")));
    }
    let mut traj = Trajectory { config, events: records, terminal_time, integrals: PathIntegrals::default(), thinning: None };
    let rep = replay(&traj, &traj.config.spec.psi)?;
    for (rec, pre) in traj.events.iter_mut().zip(&rep.events) {
        rec.r_psi_pre = pre.pairing_pre;
    }
    traj.integrals = rep.integrals;
    Ok(traj)
}

/// Evenly spaced grid `0, h, 2h, …` up to `end`.
pub fn uniform_grid(end: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!("grid step must be positive, got {h}")));
    }
    let steps = (end / h + 1e-9).floor() as usize;
    Ok((0..=steps).map(|k| k as f64 * h).collect())
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    s: f64,
    i: f64,
    r_count: f64,
    r_psi: f64,
}

/// Trajectory sampled on `grid`, renormalized by `n`: columns `t, s, i, r_count, r_psi`.
pub fn write_trajectory_csv<W: Write>(w: W, traj: &Trajectory<f64>, grid: &[f64]) -> Result<()> {
    let n = traj.config.spec.n as f64;
    let mut out = csv::Writer::from_writer(w);
    for p in sample_grid(traj, &traj.config.spec.psi, grid)? {
        out.serialize(TrajectoryRow { t: p.t, s: p.s as f64 / n, i: p.i as f64 / n, r_count: p.r_count as f64 / n, r_psi: p.r_psi / n })
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LimitRow {
    t: f64,
    s: f64,
    i: f64,
    b: f64,
    m: f64,
}

/// Limit solution on its grid: columns `t, s, i, b, m`.
pub fn write_limit_csv<W: Write>(w: W, sol: &LimitSolution<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for j in 0..sol.len() {
        out.serialize(LimitRow { t: sol.times[j], s: sol.s[j], i: sol.i[j], b: sol.b[j], m: sol.m[j] }).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns of a limit CSV, as `(t, s, i, b, m)` vectors.
pub fn read_limit_csv<R: Read>(r: R) -> Result<[Vec<f64>; 5]> {
    let mut cols: [Vec<f64>; 5] = Default::default();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: LimitRow = row.map_err(csv_err)?;
        for (c, v) in cols.iter_mut().zip([row.t, row.s, row.i, row.b, row.m]) {
            c.push(v);
        }
    }
    Ok(cols)
}

/// Event types of the registry format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservedEvent {
    Infection,
    SpontaneousDetection,
    TracedDetection,
    Exit,
}

impl ObservedEvent {
    pub fn kind(self) -> EventKind {
        match self {
            ObservedEvent::Infection => EventKind::Infection,
            ObservedEvent::SpontaneousDetection => EventKind::SpontaneousDetection,
            ObservedEvent::TracedDetection => EventKind::TracedDetection,
            ObservedEvent::Exit => EventKind::InfectiveExit,
        }
    }

    fn of(kind: EventKind) -> Option<Self> {
        match kind {
            EventKind::Infection => Some(ObservedEvent::Infection),
            EventKind::SpontaneousDetection => Some(ObservedEvent::SpontaneousDetection),
            EventKind::TracedDetection => Some(ObservedEvent::TracedDetection),
            EventKind::InfectiveExit => Some(ObservedEvent::Exit),
            _ => None,
        }
    }
}

/// How to turn registry rows into a complete event log.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedOptions {
    /// Model the log is attached to; only `n` and `psi` affect the fit.
    pub spec: ModelSpec<f64>,
    /// Infectives at the origin. Default: the smallest count keeping `I ≥ 0`.
    pub initial_infectives: Option<u64>,
    /// Susceptibles at the origin. Default: the number of infections.
    pub initial_susceptibles: Option<u64>,
    /// Time zero, in the file's date form. Default: the earliest event date.
    pub origin: Option<String>,
    /// End of observation in days after the origin. Default: the last event time.
    pub horizon: Option<f64>,
    /// `(date, S)` targets; recruitment and exit events are added to match them.
    pub population: Vec<(String, u64)>,
}

impl ObservedOptions {
    pub fn new(spec: ModelSpec<f64>) -> Self {
        ObservedOptions { spec, initial_infectives: None, initial_susceptibles: None, origin: None, horizon: None, population: Vec::new() }
    }
}

/// A reconstructed log with a record of what was inferred rather than read.
#[derive(Clone, Debug)]
pub struct ObservedLog {
    pub trajectory: Trajectory<f64>,
    pub rows: usize,
    pub synthesized_infections: usize,
    pub synthesized_population_events: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum DateForm {
    Numeric,
    Iso,
}

fn parse_date(text: &str, line: usize, form: &mut Option<DateForm>) -> Result<f64> {
    let text = text.trim();
    let (value, this) = if let Ok(v) = text.parse::<f64>() {
        if !v.is_finite() {
            return Err(Error::Parse { line, message: format!("date {text} is not finite") });
        }
        (v, DateForm::Numeric)
    } else {
        let d = NaiveDate::parse_from_str(text, "%Y-%m-%d")
            .map_err(|e| Error::Parse { line, message: format!("date {text:?}: {e}") })?;
        (d.num_days_from_ce() as f64, DateForm::Iso)
    };
    match form {
        Some(f) if *f != this => Err(Error::Parse { line, message: "numeric and calendar dates mixed in one file".into() }),
        _ => {
            *form = Some(this);
            Ok(value)
        }
    }
}


#[derive(Deserialize)]
struct ObservedRow {
    date: String,
    event_type: String,
    #[serde(default)]
    infection_date: Option<String>,
}

/// Reads registry rows `date, event_type[, infection_date]` into an event log.
///
/// Dates are day numbers or `YYYY-MM-DD`. Reconstruction rules:
/// * `k` events sharing a date `d` are placed at `d + j/(k+1)`, `j = 1..k`, in file order.
/// * Without `infection` rows, each detection or exit carrying an `infection_date`
///   contributes an infection at that date; infections before the origin count as initial infectives.
/// * The susceptible class is not observed. `S` starts at the option value, or at the number of
///   infections so it never goes negative, and follows the optional population targets.
pub fn read_observed<R: Read>(r: R, opts: &ObservedOptions) -> Result<ObservedLog> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(r);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let mut warnings = Vec::new();
    let mut form = None;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    if !headers.is_empty() {
        for need in ["date", "event_type"] {
            if !headers.iter().any(|h| h == need) {
                return Err(Error::Parse { line: 1, message: format!("missing column {need:?}") });
            }
        }
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let row: ObservedRow = match rec.deserialize(Some(&headers)) {
                Ok(r) => r,
                Err(e) => {
                    errors.push(format!("line {line}: {e}"));
                    continue;
                }
            };
            let kind: ObservedEvent = match serde_json::from_value(serde_json::Value::String(row.event_type.clone())) {
                Ok(k) => k,
                Err(_) => {
                    errors.push(format!("line {line}: unknown event_type {:?}", row.event_type));
                    continue;
                }
            };
            let date = match parse_date(&row.date, line, &mut form) {
                Ok(d) => d,
                Err(e) => {
                    errors.push(e.to_string());
                    continue;
                }
            };
            let infection = match row.infection_date.as_deref().filter(|s| !s.is_empty()) {
                None => None,
                Some(s) => match parse_date(s, line, &mut form) {
                    Ok(d) if d > date => {
                        errors.push(format!("line {line}: infection date after event date"));
                        continue;
                    }
                    Ok(d) => Some(d),
                    Err(e) => {
                        errors.push(e.to_string());
                        continue;
                    }
                },
            };
            rows.push((date, kind, infection));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Parse { line: 0, message: errors.join("; ") });
    }
    let mut form_probe = form;
    let origin = match &opts.origin {
        Some(o) => parse_date(o, 0, &mut form_probe)?,
        None => rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
    };
    let explicit_infections = rows.iter().any(|r| r.1 == ObservedEvent::Infection);
    if explicit_infections && rows.iter().any(|r| r.2.is_some()) {
        warnings.push("infection rows present; infection_date column ignored".into());
    }

    // (day, order, kind): order keeps file order within a day, synthesized infections first
    let mut timeline: Vec<(f64, usize, EventKind)> = Vec::new();
    let mut carried_in = 0u64;
    let mut synthesized_infections = 0;
    for (k, &(date, kind, infection)) in rows.iter().enumerate() {
        if date < origin {
            return Err(Error::InconsistentLog(format!("event dated before the origin ({date} < {origin})")));
        }
        timeline.push((date - origin, rows.len() + k, kind.kind()));
        if let (false, Some(d)) = (explicit_infections, infection) {
            if d < origin {
                carried_in += 1;
            } else {
                timeline.push((d - origin, k, EventKind::Infection));
                synthesized_infections += 1;
            }
        }
    }
    let mut population = Vec::new();
    for (d, target) in &opts.population {
        population.push((parse_date(d, 0, &mut form_probe)? - origin, *target));
    }
    timeline.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let infections = timeline.iter().filter(|e| e.2 == EventKind::Infection).count() as u64;
    let i0 = match opts.initial_infectives {
        Some(v) => v,
        None => {
            let (mut level, mut low) = (0i64, 0i64);
            for e in &timeline {
                level += if e.2 == EventKind::Infection { 1 } else { -1 };
                low = low.min(level);
            }
            let needed = (-low) as u64;
            if needed > carried_in && synthesized_infections > 0 {
                warnings.push(format!("{} infectives at the origin without a recorded infection date", needed - carried_in));
            }
            needed.max(carried_in)
        }
    };
    let s0 = opts.initial_susceptibles.unwrap_or(infections);

    // spread ties within the day and insert population corrections
    let mut events = Vec::with_capacity(timeline.len());
    let mut j = 0;
    while j < timeline.len() {
        let day = timeline[j].0;
        let end = timeline[j..].iter().position(|e| e.0 != day).map_or(timeline.len(), |p| j + p);
        let k = end - j;
        for (q, e) in timeline[j..end].iter().enumerate() {
            let t = if k == 1 { day } else { day + (q + 1) as f64 / (k + 1) as f64 };
            events.push((t, e.2));
        }
        j = end;
    }
    let mut synthesized_population_events = 0;
    if !population.is_empty() {
        population.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged = Vec::with_capacity(events.len());
        let mut s = s0 as i64;
        let mut queue = events.into_iter().peekable();
        for &(pt, target) in &population {
            while let Some(&(t, kind)) = queue.peek() {
                if t > pt {
                    break;
                }
                if kind == EventKind::Infection {
                    s -= 1;
                }
                merged.push((t, kind));
                queue.next();
            }
            let kind = if (target as i64) > s { EventKind::Recruitment } else { EventKind::SusceptibleExit };
            let count = (target as i64 - s).unsigned_abs();
            for q in 0..count {
                // placed just after the target date, before any later event
                merged.push((pt + (q + 1) as f64 * 1e-9, kind));
            }
            synthesized_population_events += count as usize;
            s = target as i64;
        }
        merged.extend(queue);
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        events = merged;
    }
    for w in events.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::InconsistentLog(format!("two events at time {} after tie spreading", w[1].0)));
        }
    }

    let last = events.last().map_or(0.0, |e| e.0);
    let horizon = match opts.horizon {
        Some(h) if h < last => return Err(Error::InconsistentLog(format!("horizon {h} precedes the last event at {last}"))),
        Some(h) => h,
        None if events.is_empty() => {
            warnings.push("no events; observation window set to one day".into());
            1.0
        }
        None if last == 0.0 => 1.0,
        None => last,
    };
    if rows.is_empty() {
        warnings.push("empty registry file".into());
    }
    let config = SimulationConfig::new(opts.spec.clone(), s0, i0, horizon);
    let trajectory = assemble_log(config, &events)?;
    Ok(ObservedLog { trajectory, rows: rows.len(), synthesized_infections, synthesized_population_events, warnings })
}

/// Exports the registry-visible part of a log (no recruitment or susceptible exits), dates in days.
pub fn write_observed<W: Write>(w: W, traj: &Trajectory<f64>) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        date: String,
        event_type: ObservedEvent,
    }
    let mut out = csv::Writer::from_writer(w);
    for rec in &traj.events {
        if let Some(kind) = ObservedEvent::of(rec.event) {
            out.serialize(Row { date: format!("{:?}", rec.t), event_type: kind }).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads `date, susceptibles` rows for [`ObservedOptions::population`].
pub fn read_population<R: Read>(r: R) -> Result<Vec<(String, u64)>> {
    let mut out = Vec::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    for row in reader.deserialize() {
        let (d, s): (String, u64) = row.map_err(csv_err)?;
        out.push((d, s));
    }
    Ok(out)
}

/// Event counts by type, keyed by the type's number.
pub fn event_counts(traj: &Trajectory<f64>) -> BTreeMap<u8, u64> {
    let mut m = BTreeMap::new();
    for rec in &traj.events {
        *m.entry(rec.event as u8).or_insert(0) += 1;
    }
    m
}
