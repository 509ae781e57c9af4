//! Profiler trace ingestion.
//!
//! Reads Chrome-trace-event JSON as exported by the framework profiler and
//! normalizes the four event categories the pipeline consumes. Every other
//! event is kept as [`EventCategory::Other`] with only its name and timestamp.
//!
//! Field names used by the profiler are mapped in [`keys`]; the rest of the
//! crate never sees raw JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::units::Nanos;

/// Adapter table from profiler JSON field names to normalized fields.
pub mod keys {
    pub const EVENTS: &str = "traceEvents";
    pub const PHASE: &str = "ph";
    pub const CATEGORY: &str = "cat";
    pub const NAME: &str = "name";
    pub const TIMESTAMP: &str = "ts";
    pub const DURATION: &str = "dur";
    pub const ARGS: &str = "args";

    pub const PYTHON_ID: &str = "Python id";
    pub const PYTHON_PARENT_ID: &str = "Python parent id";
    pub const SEQUENCE_NUMBER: &str = "Sequence number";
    pub const ADDR: &str = "Addr";
    pub const BYTES: &str = "Bytes";
    pub const TOTAL_ALLOCATED: &str = "Total Allocated";
    pub const TOTAL_RESERVED: &str = "Total Reserved";

    pub const CAT_PYTHON_FUNCTION: &str = "python_function";
    pub const CAT_CPU_OP: &str = "cpu_op";
    pub const CAT_USER_ANNOTATION: &str = "user_annotation";
    pub const CAT_CPU_INSTANT_EVENT: &str = "cpu_instant_event";
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("trace contains no events")]
    EmptyTrace,
    #[error("event {event_id} has unknown category `{category}` (strict mode)")]
    UnknownCategory { event_id: usize, category: String },
    #[error("malformed sidecar: {0}")]
    MalformedSidecar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCategory {
    PythonFunction,
    CpuOp,
    UserAnnotation,
    CpuInstantEvent,
    Other,
}

impl EventCategory {
    fn from_raw(cat: Option<&str>) -> Self {
        match cat {
            Some(keys::CAT_PYTHON_FUNCTION) => Self::PythonFunction,
            Some(keys::CAT_CPU_OP) => Self::CpuOp,
            Some(keys::CAT_USER_ANNOTATION) => Self::UserAnnotation,
            Some(keys::CAT_CPU_INSTANT_EVENT) => Self::CpuInstantEvent,
            _ => Self::Other,
        }
    }

    fn raw(self) -> Option<&'static str> {
        match self {
            Self::PythonFunction => Some(keys::CAT_PYTHON_FUNCTION),
            Self::CpuOp => Some(keys::CAT_CPU_OP),
            Self::UserAnnotation => Some(keys::CAT_USER_ANNOTATION),
            Self::CpuInstantEvent => Some(keys::CAT_CPU_INSTANT_EVENT),
            Self::Other => None,
        }
    }
}

/// One normalized profiler event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Ordinal position in the source file.
    pub event_id: usize,
    pub category: EventCategory,
    pub name: String,
    pub start_ts: Nanos,
    /// Zero for instant events.
    pub duration: Nanos,
    /// Function id, python functions only.
    pub python_id: Option<u64>,
    pub parent_id: Option<u64>,
    pub sequence_number: Option<i64>,
    pub addr: Option<u64>,
    /// Negative for deallocations.
    pub bytes: Option<i64>,
    pub total_allocated: Option<i64>,
    pub total_reserved: Option<i64>,
    /// Original `cat` string of events bucketed as `Other`.
    pub raw_category: Option<String>,
}

impl TraceEvent {
    pub fn end_ts(&self) -> Nanos {
        self.start_ts + self.duration
    }

    pub fn is_allocation(&self) -> bool {
        self.bytes.is_some_and(|b| b > 0)
    }

    fn bare(event_id: usize, category: EventCategory, name: String) -> Self {
        Self {
            event_id,
            category,
            name,
            start_ts: 0,
            duration: 0,
            python_id: None,
            parent_id: None,
            sequence_number: None,
            addr: None,
            bytes: None,
            total_allocated: None,
            total_reserved: None,
            raw_category: None,
        }
    }
}

/// Per-task facts the trace cannot carry, recorded at capture time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub param_sizes: Vec<u64>,
    #[serde(default)]
    pub batch_bytes: Vec<u64>,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default)]
    pub device_capacity_bytes: Option<u64>,
    #[serde(default)]
    pub initial_memory_bytes: u64,
    /// Name prefixes that mark a python function as a model layer.
    #[serde(default)]
    pub layer_prefixes: Option<Vec<String>>,
}

fn default_optimizer() -> String {
    "sgd".to_string()
}

impl Sidecar {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        serde_json::from_str(text).map_err(|e| TraceError::MalformedSidecar(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Reject events outside the four consumed categories.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceBundle {
    /// Sorted by `(start_ts, event_id)`.
    pub events: Vec<TraceEvent>,
    pub source_path: String,
    pub metadata: Option<Sidecar>,
}

impl TraceBundle {
    pub fn with_sidecar(mut self, sidecar: Sidecar) -> Self {
        self.metadata = Some(sidecar);
        self
    }

    pub fn count(&self, category: EventCategory) -> usize {
        self.events
            .iter()
            .filter(|e| e.category == category)
            .count()
    }

    /// Writes the bundle back out as trace JSON. Parsing the result yields
    /// the same events.
    pub fn to_trace_json(&self) -> Value {
        let mut by_id: Vec<&TraceEvent> = self.events.iter().collect();
        by_id.sort_by_key(|e| e.event_id);
        let events = by_id.into_iter().map(event_to_json).collect();
        let mut root = Map::new();
        root.insert(keys::EVENTS.into(), Value::Array(events));
        Value::Object(root)
    }
}

/// Reads and normalizes a trace file.
pub fn parse_trace(path: impl AsRef<Path>, opts: ParseOptions) -> Result<TraceBundle, TraceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut bundle = parse_trace_str(&text, opts)?;
    bundle.source_path = path.display().to_string();
    Ok(bundle)
}

pub fn parse_trace_str(text: &str, opts: ParseOptions) -> Result<TraceBundle, TraceError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| TraceError::MalformedTrace(e.to_string()))?;
    let raw_events = match doc {
        Value::Array(events) => events,
        Value::Object(mut obj) => match obj.remove(keys::EVENTS) {
            Some(Value::Array(events)) => events,
            _ => {
                return Err(TraceError::MalformedTrace(format!(
                    "missing `{}` array",
                    keys::EVENTS
                )))
            }
        },
        _ => {
            return Err(TraceError::MalformedTrace(
                "top level must be an array or an object".into(),
            ))
        }
    };
    if raw_events.is_empty() {
        return Err(TraceError::EmptyTrace);
    }

    // (event, absolute start in ns if the event had one)
    let mut staged = Vec::with_capacity(raw_events.len());
    for (event_id, raw) in raw_events.iter().enumerate() {
        staged.push(parse_event(event_id, raw, opts)?);
    }
    let base = staged.iter().filter_map(|(_, ts)| *ts).min().unwrap_or(0);
    let mut events: Vec<TraceEvent> = staged
        .into_iter()
        .map(|(mut e, ts)| {
            e.start_ts = ts.map_or(0, |t| t - base);
            e
        })
        .collect();
    events.sort_by_key(|e| (e.start_ts, e.event_id));
    Ok(TraceBundle {
        events,
        source_path: String::new(),
        metadata: None,
    })
}

/// Stable-ordered subsequence of events in `category`.
pub fn filter_category(bundle: &TraceBundle, category: EventCategory) -> Vec<TraceEvent> {
    bundle
        .events
        .iter()
        .filter(|e| e.category == category)
        .cloned()
        .collect()
}

fn malformed(event_id: usize, what: &str) -> TraceError {
    TraceError::MalformedTrace(format!("event {event_id}: {what}"))
}

fn parse_event(
    event_id: usize,
    raw: &Value,
    opts: ParseOptions,
) -> Result<(TraceEvent, Option<Nanos>), TraceError> {
    let obj = raw
        .as_object()
        .ok_or_else(|| malformed(event_id, "not an object"))?;
    let raw_cat = obj.get(keys::CATEGORY).and_then(Value::as_str);
    let category = EventCategory::from_raw(raw_cat);
    let name = obj.get(keys::NAME).and_then(Value::as_str);
    let ts = match obj.get(keys::TIMESTAMP) {
        Some(Value::Number(n)) => {
            Some(micros_to_nanos(n).ok_or_else(|| malformed(event_id, "timestamp out of range"))?)
        }
        Some(_) => return Err(malformed(event_id, "timestamp is not a number")),
        None => None,
    };

    if category == EventCategory::Other {
        if opts.strict {
            return Err(TraceError::UnknownCategory {
                event_id,
                category: raw_cat.unwrap_or("<none>").to_string(),
            });
        }
        let mut event = TraceEvent::bare(event_id, category, name.unwrap_or("").to_string());
        event.raw_category = raw_cat.map(str::to_string);
        return Ok((event, ts));
    }

    let name = name.ok_or_else(|| malformed(event_id, "missing name"))?;
    let ts = ts.ok_or_else(|| malformed(event_id, "missing timestamp"))?;
    let mut event = TraceEvent::bare(event_id, category, name.to_string());
    let args = obj.get(keys::ARGS).and_then(Value::as_object);
    let arg = |key: &str| args.and_then(|a| a.get(key)).filter(|v| !v.is_null());

    if category != EventCategory::CpuInstantEvent {
        let dur = match obj.get(keys::DURATION) {
            Some(Value::Number(n)) => micros_to_nanos(n)
                .filter(|d| *d >= 0)
                .ok_or_else(|| malformed(event_id, "invalid duration"))?,
            _ => return Err(malformed(event_id, "missing duration")),
        };
        event.duration = dur;
    }

    match category {
        EventCategory::PythonFunction => {
            event.python_id = arg(keys::PYTHON_ID).and_then(Value::as_u64);
            event.parent_id = arg(keys::PYTHON_PARENT_ID).and_then(Value::as_u64);
        }
        EventCategory::CpuOp => {
            event.sequence_number = arg(keys::SEQUENCE_NUMBER).and_then(Value::as_i64);
        }
        EventCategory::CpuInstantEvent => {
            event.addr = Some(
                arg(keys::ADDR)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| malformed(event_id, "memory event without address"))?,
            );
            let bytes = arg(keys::BYTES)
                .and_then(Value::as_i64)
                .ok_or_else(|| malformed(event_id, "memory event without byte count"))?;
            if bytes == 0 {
                return Err(malformed(event_id, "memory event with zero bytes"));
            }
            event.bytes = Some(bytes);
            event.total_allocated = arg(keys::TOTAL_ALLOCATED).and_then(Value::as_i64);
            event.total_reserved = arg(keys::TOTAL_RESERVED).and_then(Value::as_i64);
        }
        EventCategory::UserAnnotation | EventCategory::Other => {}
    }
    Ok((event, Some(ts)))
}

/// Converts a microsecond JSON number to integer nanoseconds without going
/// through binary floating point when the literal is a plain decimal.
fn micros_to_nanos(n: &Number) -> Option<Nanos> {
    let text = n.to_string();
    if text.contains(['e', 'E']) {
        let v = n.as_f64()? * 1000.0;
        return (v.is_finite() && v.abs() < i64::MAX as f64).then(|| v.round() as i64);
    }
    let (neg, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let int: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let mut frac_digits: Vec<u8> = frac.bytes().map(|b| b - b'0').collect();
    let round_up = frac_digits.len() > 3 && frac_digits[3] >= 5;
    frac_digits.resize(3, 0);
    let frac_ns = frac_digits.iter().fold(0i64, |acc, d| acc * 10 + *d as i64);
    let ns = int
        .checked_mul(1000)?
        .checked_add(frac_ns + round_up as i64)?;
    Some(if neg { -ns } else { ns })
}

fn nanos_to_micros(ns: Nanos) -> Value {
    let sign = if ns < 0 { "-" } else { "" };
    let abs = ns.unsigned_abs();
    let text = format!("{sign}{}.{:03}", abs / 1000, abs % 1000);
    Value::Number(Number::from_str(&text).expect("decimal literal"))
}

fn event_to_json(e: &TraceEvent) -> Value {
    let mut obj = Map::new();
    let mut args = Map::new();
    let phase = match e.category {
        EventCategory::CpuInstantEvent => "i",
        EventCategory::Other => "M",
        _ => "X",
    };
    obj.insert(keys::PHASE.into(), phase.into());
    let cat = e
        .category
        .raw()
        .map(str::to_string)
        .or_else(|| e.raw_category.clone());
    if let Some(cat) = cat {
        obj.insert(keys::CATEGORY.into(), cat.into());
    }
    obj.insert(keys::NAME.into(), e.name.clone().into());
    obj.insert(keys::TIMESTAMP.into(), nanos_to_micros(e.start_ts));
    match e.category {
        EventCategory::PythonFunction | EventCategory::CpuOp | EventCategory::UserAnnotation => {
            obj.insert(keys::DURATION.into(), nanos_to_micros(e.duration));
        }
        _ => {}
    }
    let mut put = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            args.insert(key.into(), v);
        }
    };
    put(keys::PYTHON_ID, e.python_id.map(Value::from));
    put(keys::PYTHON_PARENT_ID, e.parent_id.map(Value::from));
    put(keys::SEQUENCE_NUMBER, e.sequence_number.map(Value::from));
    put(keys::ADDR, e.addr.map(Value::from));
    put(keys::BYTES, e.bytes.map(Value::from));
    put(keys::TOTAL_ALLOCATED, e.total_allocated.map(Value::from));
    put(keys::TOTAL_RESERVED, e.total_reserved.map(Value::from));
    if !args.is_empty() {
        obj.insert(keys::ARGS.into(), Value::Object(args));
    }
    Value::Object(obj)
}
