//! Sessions, answer events, runner demographics, segmentation and splitting.
//!
//! A corpus directory holds three comma-separated tables with header rows:
//!
//! ```text
//! runners.csv   runner_id,age_range,sex
//! sessions.csv  session_id,runner_id,audio_path
//! events.csv    session_id,time_s,fatigue,wellbeing,surface
//! ```
//!
//! `audio_path` is resolved relative to the corpus directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RUNNERS_FILE: &str = "runners.csv";
pub const SESSIONS_FILE: &str = "sessions.csv";
pub const EVENTS_FILE: &str = "events.csv";

/// Seconds on either side of an answer covered by its segment.
pub const DEFAULT_HALF_WINDOW_S: f64 = 15.0;
pub const DEFAULT_RATIOS: [f64; 3] = [0.56, 0.23, 0.21];

pub const FATIGUE_RANGE: (u8, u8) = (6, 20);
pub const WELLBEING_RANGE: (i8, i8) = (-5, 5);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}:{line}: field `{field}`: {message}")]
    Parse {
        file: String,
        line: u64,
        field: String,
        message: String,
    },
    #[error("{file}:{line}: {message}")]
    RangeViolation {
        file: String,
        line: u64,
        message: String,
    },
    #[error("unknown runner `{0}`")]
    UnknownRunner(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("events of session `{0}` are not strictly increasing in time")]
    EventsNotSorted(String),
    #[error("need at least 3 sessions with segments to split, found {0}")]
    TooFewSessions(usize),
    #[error("invalid ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("invalid audio duration {0}")]
    InvalidDuration(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeRange {
    #[serde(rename = "21-30")]
    From21To30,
    #[serde(rename = "31-40")]
    From31To40,
    #[serde(rename = "41-50")]
    From41To50,
    #[serde(rename = "51-60")]
    From51To60,
}

impl AgeRange {
    pub const ALL: [AgeRange; 4] = [
        AgeRange::From21To30,
        AgeRange::From31To40,
        AgeRange::From41To50,
        AgeRange::From51To60,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AgeRange::From21To30 => "21-30",
            AgeRange::From31To40 => "31-40",
            AgeRange::From41To50 => "41-50",
            AgeRange::From51To60 => "51-60",
        }
    }
}

impl fmt::Display for AgeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgeRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let norm = norm.replace(['\u{2013}', '\u{2014}'], "-");
        AgeRange::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| format!("`{s}` is not one of 21-30, 31-40, 41-50, 51-60"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl Sex {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" | "m" => Ok(Sex::M),
            "F" | "f" => Ok(Sex::F),
            other => Err(format!("`{other}` is not M or F")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerProfile {
    pub runner_id: String,
    pub age_range: AgeRange,
    pub sex: Sex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEvent {
    pub time_s: f64,
    pub fatigue: u8,
    pub wellbeing: i8,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionManifest {
    pub session_id: String,
    pub runner_id: String,
    pub audio_path: PathBuf,
    pub events: Vec<AnswerEvent>,
}

/// A labelled window `[start_s, end_s)` of one session's audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub session_id: String,
    pub runner_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub fatigue: u8,
    pub wellbeing: i8,
    pub surface: String,
    pub feature_path: Option<String>,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Dev, Partition::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Partition::Train),
            "dev" => Ok(Partition::Dev),
            "test" => Ok(Partition::Test),
            other => Err(format!("`{other}` is not train, dev or test")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSplit {
    pub assignment: BTreeMap<String, Partition>,
    pub seed: u64,
}

impl PartitionSplit {
    pub fn partition_of(&self, segment_id: &str) -> Option<Partition> {
        self.assignment.get(segment_id).copied()
    }

    pub fn count(&self, part: Partition) -> usize {
        self.assignment.values().filter(|&&p| p == part).count()
    }

    /// Segments of `segments` assigned to `part`, in input order.
    pub fn select<'a>(&self, segments: &'a [Segment], part: Partition) -> Vec<&'a Segment> {
        segments
            .iter()
            .filter(|s| self.partition_of(&s.segment_id) == Some(part))
            .collect()
    }

    /// True when no session has segments both in test and in train or dev.
    pub fn test_is_session_disjoint(&self, segments: &[Segment]) -> bool {
        let mut test_sessions = HashSet::new();
        let mut other_sessions = HashSet::new();
        for s in segments {
            match self.partition_of(&s.segment_id) {
                Some(Partition::Test) => test_sessions.insert(s.session_id.as_str()),
                Some(_) => other_sessions.insert(s.session_id.as_str()),
                None => false,
            };
        }
        test_sessions.is_disjoint(&other_sessions)
    }
}

fn segment_id(session_id: &str, event_index: usize) -> String {
    format!("{session_id}-e{event_index:03}")
}

/// Cuts one `[t - 15, t + 15]` segment per answer event.
pub fn segment_session(
    manifest: &SessionManifest,
    audio_duration_s: f64,
) -> Result<Vec<Segment>, DatasetError> {
    segment_session_with(manifest, audio_duration_s, DEFAULT_HALF_WINDOW_S)
}

/// As [`segment_session`] with a configurable half window.
///
/// Windows that would extend before 0 or past the end of the audio are
/// dropped with a warning. Overlapping windows are all kept.
pub fn segment_session_with(
    manifest: &SessionManifest,
    audio_duration_s: f64,
    half_window_s: f64,
) -> Result<Vec<Segment>, DatasetError> {
    if !(audio_duration_s > 0.0) || !audio_duration_s.is_finite() {
        return Err(DatasetError::InvalidDuration(audio_duration_s));
    }
    if !(half_window_s > 0.0) {
        return Err(DatasetError::InvalidDuration(half_window_s));
    }
    if manifest
        .events
        .windows(2)
        .any(|w| !(w[0].time_s < w[1].time_s))
    {
        return Err(DatasetError::EventsNotSorted(manifest.session_id.clone()));
    }
    let width = 2.0 * half_window_s;
    let mut out = Vec::new();
    for (i, ev) in manifest.events.iter().enumerate() {
        let start_s = ev.time_s - half_window_s;
        let end_s = start_s + width;
        if start_s < 0.0 || ev.time_s + half_window_s > audio_duration_s {
            log::warn!(
                "session {}: dropping event at {:.3}s, window [{start_s:.3}, {end_s:.3}] leaves [0, {audio_duration_s:.3}]",
                manifest.session_id,
                ev.time_s
            );
            continue;
        }
        out.push(Segment {
            segment_id: segment_id(&manifest.session_id, i),
            session_id: manifest.session_id.clone(),
            runner_id: manifest.runner_id.clone(),
            start_s,
            end_s,
            fatigue: ev.fatigue,
            wellbeing: ev.wellbeing,
            surface: ev.surface.clone(),
            feature_path: None,
        });
    }
    Ok(out)
}

/// Session-level greedy split.
///
/// Sessions (grouped from the segments) are shuffled with a seeded RNG and
/// poured into train, then dev, then test; a partition is closed once its
/// share of segments reaches its ratio. Each partition receives at least one
/// session.
pub fn split_partitions(
    segments: &[Segment],
    ratios: [f64; 3],
    seed: u64,
) -> Result<PartitionSplit, DatasetError> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let mut by_session: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in segments {
        by_session
            .entry(s.session_id.as_str())
            .or_default()
            .push(s.segment_id.as_str());
    }
    let n_sessions = by_session.len();
    if n_sessions < 3 {
        return Err(DatasetError::TooFewSessions(n_sessions));
    }
    let mut sessions: Vec<(&str, Vec<&str>)> = by_session.into_iter().collect();
    sessions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = segments.len() as f64;
    let mut filled = [0usize; 3];
    let mut session_counts = [0usize; 3];
    let mut part = 0;
    let mut assignment = BTreeMap::new();
    for (i, (_, ids)) in sessions.iter().enumerate() {
        let remaining = n_sessions - i;
        while part < 2
            && session_counts[part] > 0
            && (filled[part] as f64 >= ratios[part] * total || remaining <= 2 - part)
        {
            part += 1;
        }
        for id in ids {
            if assignment.insert(id.to_string(), Partition::ALL[part]).is_some() {
                return Err(DatasetError::DuplicateId(id.to_string()));
            }
        }
        filled[part] += ids.len();
        session_counts[part] += 1;
    }
    Ok(PartitionSplit { assignment, seed })
}

// ---------------------------------------------------------------------------
// Manifest tables
// ---------------------------------------------------------------------------

struct TableReader {
    file: String,
    reader: csv::Reader<std::fs::File>,
    columns: HashMap<String, usize>,
}

impl TableReader {
    fn open(path: &Path, required: &[&str]) -> Result<Self, DatasetError> {
        let file = path.display().to_string();
        let reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::Headers)
            .from_path(path)
            .map_err(|e| csv_error(&file, e))?;
        let mut this = Self {
            file,
            reader,
            columns: HashMap::new(),
        };
        let headers = this
            .reader
            .headers()
            .map_err(|e| csv_error(&this.file, e))?
            .clone();
        this.columns = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        for col in required {
            if !this.columns.contains_key(*col) {
                return Err(DatasetError::Parse {
                    file: this.file.clone(),
                    line: 1,
                    field: col.to_string(),
                    message: "missing column in header".into(),
                });
            }
        }
        Ok(this)
    }

    fn rows(&mut self) -> Result<Vec<Row>, DatasetError> {
        let mut rows = Vec::new();
        for rec in self.reader.records() {
            let rec = rec.map_err(|e| csv_error(&self.file, e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            rows.push(Row {
                file: self.file.clone(),
                line,
                record: rec,
                columns: self.columns.clone(),
            });
        }
        Ok(rows)
    }
}

struct Row {
    file: String,
    line: u64,
    record: csv::StringRecord,
    columns: HashMap<String, usize>,
}

impl Row {
    fn raw(&self, field: &str) -> &str {
        self.columns
            .get(field)
            .and_then(|&i| self.record.get(i))
            .unwrap_or("")
    }

    fn text(&self, field: &str) -> Result<String, DatasetError> {
        let v = self.raw(field).trim();
        if v.is_empty() {
            return Err(self.err(field, "empty value".into()));
        }
        Ok(v.to_string())
    }

    fn parse<T: FromStr>(&self, field: &str) -> Result<T, DatasetError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(field).trim();
        v.parse()
            .map_err(|e: T::Err| self.err(field, format!("cannot parse `{v}`: {e}")))
    }

    fn err(&self, field: &str, message: String) -> DatasetError {
        DatasetError::Parse {
            file: self.file.clone(),
            line: self.line,
            field: field.to_string(),
            message,
        }
    }

    fn range(&self, message: String) -> DatasetError {
        DatasetError::RangeViolation {
            file: self.file.clone(),
            line: self.line,
            message,
        }
    }
}

fn csv_error(file: &str, e: csv::Error) -> DatasetError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DatasetError::Io {
            path: file.to_string(),
            source,
        },
        other => DatasetError::Parse {
            file: file.to_string(),
            line,
            field: String::new(),
            message: format!("{other:?}"),
        },
    }
}

pub fn load_runners(path: &Path) -> Result<Vec<RunnerProfile>, DatasetError> {
    let mut table = TableReader::open(path, &["runner_id", "age_range", "sex"])?;
    let mut seen = HashSet::new();
    let mut runners = Vec::new();
    for row in table.rows()? {
        let runner = RunnerProfile {
            runner_id: row.text("runner_id")?,
            age_range: row.parse("age_range")?,
            sex: row.parse("sex")?,
        };
        if !seen.insert(runner.runner_id.clone()) {
            return Err(DatasetError::DuplicateId(runner.runner_id));
        }
        runners.push(runner);
    }
    Ok(runners)
}

/// Loads and validates a corpus directory.
pub fn load_manifest(
    dir: &Path,
) -> Result<(Vec<SessionManifest>, Vec<RunnerProfile>), DatasetError> {
    let runners = load_runners(&dir.join(RUNNERS_FILE))?;
    let known: HashSet<&str> = runners.iter().map(|r| r.runner_id.as_str()).collect();

    let mut table = TableReader::open(
        &dir.join(SESSIONS_FILE),
        &["session_id", "runner_id", "audio_path"],
    )?;
    let mut sessions = Vec::new();
    let mut index = HashMap::new();
    for row in table.rows()? {
        let session_id = row.text("session_id")?;
        let runner_id = row.text("runner_id")?;
        if !known.contains(runner_id.as_str()) {
            return Err(DatasetError::UnknownRunner(runner_id));
        }
        let audio_path = PathBuf::from(row.text("audio_path")?);
        let audio_path = if audio_path.is_absolute() {
            audio_path
        } else {
            dir.join(audio_path)
        };
        if index.insert(session_id.clone(), sessions.len()).is_some() {
            return Err(DatasetError::DuplicateId(session_id));
        }
        sessions.push(SessionManifest {
            session_id,
            runner_id,
            audio_path,
            events: Vec::new(),
        });
    }

    let mut table = TableReader::open(
        &dir.join(EVENTS_FILE),
        &["session_id", "time_s", "fatigue", "wellbeing", "surface"],
    )?;
    for row in table.rows()? {
        let session_id = row.text("session_id")?;
        let &i = index
            .get(&session_id)
            .ok_or_else(|| DatasetError::UnknownSession(session_id.clone()))?;
        let time_s: f64 = row.parse("time_s")?;
        if !time_s.is_finite() || time_s < 0.0 {
            return Err(row.range(format!("time_s {time_s} must be finite and >= 0")));
        }
        let fatigue: i64 = row.parse("fatigue")?;
        if !(FATIGUE_RANGE.0 as i64..=FATIGUE_RANGE.1 as i64).contains(&fatigue) {
            return Err(row.range(format!("fatigue {fatigue} outside 6..=20")));
        }
        let wellbeing: i64 = row.parse("wellbeing")?;
        if !(WELLBEING_RANGE.0 as i64..=WELLBEING_RANGE.1 as i64).contains(&wellbeing) {
            return Err(row.range(format!("wellbeing {wellbeing} outside -5..=5")));
        }
        let session = &mut sessions[i];
        if session.events.last().is_some_and(|prev| prev.time_s >= time_s) {
            return Err(DatasetError::EventsNotSorted(session_id));
        }
        session.events.push(AnswerEvent {
            time_s,
            fatigue: fatigue as u8,
            wellbeing: wellbeing as i8,
            surface: row.raw("surface").to_string(),
        });
    }
    Ok((sessions, runners))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, DatasetError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), DatasetError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv_writer(path)?;
    let to_err = |e: csv::Error| csv_error(&path.display().to_string(), e);
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(row).map_err(to_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the three manifest tables; audio paths are written as given.
pub fn write_manifest(
    dir: &Path,
    sessions: &[SessionManifest],
    runners: &[RunnerProfile],
) -> Result<(), DatasetError> {
    write_rows(
        &dir.join(RUNNERS_FILE),
        &["runner_id", "age_range", "sex"],
        runners.iter().map(|r| {
            [
                r.runner_id.clone(),
                r.age_range.to_string(),
                r.sex.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join(SESSIONS_FILE),
        &["session_id", "runner_id", "audio_path"],
        sessions.iter().map(|s| {
            [
                s.session_id.clone(),
                s.runner_id.clone(),
                s.audio_path.display().to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join(EVENTS_FILE),
        &["session_id", "time_s", "fatigue", "wellbeing", "surface"],
        sessions.iter().flat_map(|s| {
            s.events.iter().map(move |e| {
                [
                    s.session_id.clone(),
                    e.time_s.to_string(),
                    e.fatigue.to_string(),
                    e.wellbeing.to_string(),
                    e.surface.clone(),
                ]
            })
        }),
    )
}

const SEGMENT_HEADER: [&str; 9] = [
    "segment_id",
    "session_id",
    "runner_id",
    "start_s",
    "end_s",
    "fatigue",
    "wellbeing",
    "surface",
    "feature_path",
];

pub fn write_segments(path: &Path, segments: &[Segment]) -> Result<(), DatasetError> {
    write_rows(
        path,
        &SEGMENT_HEADER,
        segments.iter().map(|s| {
            [
                s.segment_id.clone(),
                s.session_id.clone(),
                s.runner_id.clone(),
                s.start_s.to_string(),
                s.end_s.to_string(),
                s.fatigue.to_string(),
                s.wellbeing.to_string(),
                s.surface.clone(),
                s.feature_path.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn read_segments(path: &Path) -> Result<Vec<Segment>, DatasetError> {
    let mut table = TableReader::open(path, &SEGMENT_HEADER)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in table.rows()? {
        let fatigue: u8 = row.parse("fatigue")?;
        if !(FATIGUE_RANGE.0..=FATIGUE_RANGE.1).contains(&fatigue) {
            return Err(row.range(format!("fatigue {fatigue} outside 6..=20")));
        }
        let wellbeing: i8 = row.parse("wellbeing")?;
        if !(WELLBEING_RANGE.0..=WELLBEING_RANGE.1).contains(&wellbeing) {
            return Err(row.range(format!("wellbeing {wellbeing} outside -5..=5")));
        }
        let feature_path = row.raw("feature_path").trim();
        let seg = Segment {
            segment_id: row.text("segment_id")?,
            session_id: row.text("session_id")?,
            runner_id: row.text("runner_id")?,
            start_s: row.parse("start_s")?,
            end_s: row.parse("end_s")?,
            fatigue,
            wellbeing,
            surface: row.raw("surface").to_string(),
            feature_path: (!feature_path.is_empty()).then(|| feature_path.to_string()),
        };
        if !seen.insert(seg.segment_id.clone()) {
            return Err(DatasetError::DuplicateId(seg.segment_id));
        }
        out.push(seg);
    }
    Ok(out)
}

pub fn write_partition(path: &Path, split: &PartitionSplit) -> Result<(), DatasetError> {
    write_rows(
        path,
        &["segment_id", "partition"],
        split
            .assignment
            .iter()
            .map(|(id, p)| [id.clone(), p.to_string()]),
    )
}

/// Reads a partition table; the seed is not stored in the table and is set to 0.
pub fn read_partition(path: &Path) -> Result<PartitionSplit, DatasetError> {
    let mut table = TableReader::open(path, &["segment_id", "partition"])?;
    let mut assignment = BTreeMap::new();
    for row in table.rows()? {
        let id = row.text("segment_id")?;
        let part: Partition = row.parse("partition")?;
        if assignment.insert(id.clone(), part).is_some() {
            return Err(DatasetError::DuplicateId(id));
        }
    }
    Ok(PartitionSplit { assignment, seed: 0 })
}
