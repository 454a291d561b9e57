//! Event-sequence data model, JSONL ingestion and serialization, feature
//! standardization and synthetic missingness.
//!
//! Missing cells are stored as `0.0` with `mask[j] == false`; the mask is the
//! only source of truth for observedness.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standardized observed values must stay above this spread.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Event {
    /// Builds an event from optional values, `None` marking a missing cell.
    pub fn from_options(t: f64, values: &[Option<f64>]) -> Self {
        let x = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let mask = values.iter().map(Option::is_some).collect();
        Event { t, x, mask }
    }

    /// A fully observed event.
    pub fn complete(t: f64, x: Vec<f64>) -> Self {
        let mask = vec![true; x.len()];
        Event { t, x, mask }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_options(&self) -> Vec<Option<f64>> {
        self.x
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| m.then_some(v))
            .collect()
    }
}

/// Ordered events `(t_i, x_i, m_i)` on `[0, t_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    t_max: f64,
    dim: usize,
    events: Vec<Event>,
}

impl EventSequence {
    pub fn new(t_max: f64, dim: usize, events: Vec<Event>) -> Result<Self> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::InvalidSequence(format!("horizon {t_max} must be positive")));
        }
        for (i, ev) in events.iter().enumerate() {
            if ev.x.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: ev.x.len() });
            }
            if ev.mask.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: ev.mask.len() });
            }
            if !ev.t.is_finite() || ev.t < 0.0 || ev.t > t_max {
                return Err(Error::InvalidSequence(format!(
                    "event {i} at t = {} outside [0, {t_max}]",
                    ev.t
                )));
            }
            if i > 0 && ev.t <= events[i - 1].t {
                return Err(Error::NonMonotoneTime { index: i, t: ev.t });
            }
            if ev.observed() == 0 {
                return Err(Error::InvalidSequence(format!("event {i} has no observed value")));
            }
            for (j, (&v, &m)) in ev.x.iter().zip(&ev.mask).enumerate() {
                if m && !v.is_finite() {
                    return Err(Error::InvalidSequence(format!("event {i}, dim {j}: non-finite value")));
                }
                if !m && v != 0.0 {
                    return Err(Error::InvalidSequence(format!(
                        "event {i}, dim {j}: missing cell must hold 0.0"
                    )));
                }
            }
        }
        Ok(EventSequence { t_max, dim, events })
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }

    /// Time of the last event, or 0 for an empty sequence.
    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    /// `t_N - t_1`, or 0 for an empty sequence.
    pub fn duration(&self) -> f64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Overwrites the value at a masked cell. Used to probe masking invariance;
    /// breaks the stored-as-zero convention on purpose.
    pub fn with_masked_value(&self, event: usize, dim: usize, value: f64) -> Self {
        assert!(!self.events[event].mask[dim], "cell must be masked");
        let mut out = self.clone();
        out.events[event].x[dim] = value;
        out
    }

    fn map_observed(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for ev in &mut out.events {
            for j in 0..ev.x.len() {
                if ev.mask[j] {
                    ev.x[j] = f(j, ev.x[j]);
                }
            }
        }
        out
    }
}

/// Per-dimension affine map fitted on observed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn forward_value(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }

    pub fn inverse_value(&self, j: usize, v: f64) -> f64 {
        v * self.std[j] + self.mean[j]
    }

    /// Maps raw observed values into standardized space.
    pub fn apply(&self, seq: &EventSequence) -> EventSequence {
        seq.map_observed(|j, v| self.forward_value(j, v))
    }

    pub fn invert(&self, seq: &EventSequence) -> EventSequence {
        seq.map_observed(|j, v| self.inverse_value(j, v))
    }

    /// Composition: first `self`, then `next`.
    fn then(&self, next: &Standardization) -> Standardization {
        let mean = (0..self.dim())
            .map(|j| self.mean[j] + self.std[j] * next.mean[j])
            .collect();
        let std = (0..self.dim()).map(|j| self.std[j] * next.std[j]).collect();
        Standardization { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    /// Set once the observed values have been standardized.
    pub standardization: Option<Standardization>,
    /// Population variance of the last event time over non-empty sequences.
    pub horizon_variance: f64,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>) -> Result<Self> {
        if let Some(first) = sequences.iter().find(|s| !s.is_empty()) {
            let dim = first.dim();
            for s in &sequences {
                if !s.is_empty() && s.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found: s.dim() });
                }
            }
        }
        let horizon_variance = horizon_variance(&sequences);
        Ok(Dataset { sequences, standardization: None, horizon_variance })
    }

    pub fn empty() -> Self {
        Dataset { sequences: Vec::new(), standardization: None, horizon_variance: 0.0 }
    }

    /// Feature dimension, taken from the first non-empty sequence.
    pub fn dim(&self) -> usize {
        self.sequences
            .iter()
            .find(|s| !s.is_empty())
            .or(self.sequences.first())
            .map_or(0, EventSequence::dim)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Applies a fitted table (e.g. from a checkpoint) without refitting.
    pub fn apply_standardization(&self, table: &Standardization) -> Result<Dataset> {
        if table.dim() != self.dim() && self.event_count() > 0 {
            return Err(Error::DimensionMismatch { expected: table.dim(), found: self.dim() });
        }
        Ok(Dataset {
            sequences: self.sequences.iter().map(|s| table.apply(s)).collect(),
            standardization: Some(table.clone()),
            horizon_variance: self.horizon_variance,
        })
    }

    /// Maps standardized values back to raw units.
    pub fn destandardize(&self) -> Dataset {
        match &self.standardization {
            None => self.clone(),
            Some(table) => Dataset {
                sequences: self.sequences.iter().map(|s| table.invert(s)).collect(),
                standardization: None,
                horizon_variance: self.horizon_variance,
            },
        }
    }
}

fn horizon_variance(sequences: &[EventSequence]) -> f64 {
    let ends: Vec<f64> = sequences.iter().filter(|s| !s.is_empty()).map(|s| s.last_time()).collect();
    if ends.is_empty() {
        return 0.0;
    }
    let n = ends.len() as f64;
    let mean = ends.iter().sum::<f64>() / n;
    ends.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n
}

/// Rescales observed values to zero mean, unit (population) variance per
/// dimension. Statistics ignore masked cells entirely.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let dim = ds.dim();
    let mut sum = vec![0.0; dim];
    let mut count = vec![0usize; dim];
    for ev in ds.sequences.iter().flat_map(|s| s.events()) {
        for j in 0..dim {
            if ev.mask[j] {
                sum[j] += ev.x[j];
                count[j] += 1;
            }
        }
    }
    let mut mean = vec![0.0; dim];
    for j in 0..dim {
        if count[j] < 2 {
            return Err(Error::DegenerateDimension { dim: j, std: 0.0 });
        }
        mean[j] = sum[j] / count[j] as f64;
    }
    let mut sq = vec![0.0; dim];
    for ev in ds.sequences.iter().flat_map(|s| s.events()) {
        for j in 0..dim {
            if ev.mask[j] {
                sq[j] += (ev.x[j] - mean[j]).powi(2);
            }
        }
    }
    let mut std = vec![0.0; dim];
    for j in 0..dim {
        std[j] = (sq[j] / count[j] as f64).sqrt();
        if !(std[j] >= MIN_STD) {
            return Err(Error::DegenerateDimension { dim: j, std: std[j] });
        }
    }
    let fitted = Standardization { mean, std };
    let combined = match &ds.standardization {
        Some(prev) => prev.then(&fitted),
        None => fitted.clone(),
    };
    Ok(Dataset {
        sequences: ds.sequences.iter().map(|s| fitted.apply(s)).collect(),
        standardization: Some(combined),
        horizon_variance: ds.horizon_variance,
    })
}

/// Masks each observed cell independently with probability `rate`. An event
/// never loses its last observed cell: if every cell would drop, the last
/// originally observed one is kept.
pub fn inject_missing_mcar(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("missing rate {rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(ds.len());
    for seq in &ds.sequences {
        let mut events = seq.events().to_vec();
        for ev in &mut events {
            let observed: Vec<usize> = (0..ev.dim()).filter(|&j| ev.mask[j]).collect();
            let keep: Vec<bool> = observed.iter().map(|_| !rng.random_bool(rate)).collect();
            let survivors = keep.iter().filter(|&&k| k).count();
            for (idx, &j) in observed.iter().enumerate() {
                let last = idx + 1 == observed.len();
                if !keep[idx] && !(survivors == 0 && last) {
                    ev.mask[j] = false;
                    ev.x[j] = 0.0;
                }
            }
        }
        sequences.push(EventSequence::new(seq.t_max(), seq.dim(), events)?);
    }
    Ok(Dataset {
        sequences,
        standardization: ds.standardization.clone(),
        horizon_variance: ds.horizon_variance,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    t_max: f64,
    events: Vec<EventRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRecord {
    t: f64,
    x: Vec<Option<f64>>,
}

/// Parses one sequence per line; blank lines are skipped.
pub fn read_jsonl(reader: impl Read) -> Result<Dataset> {
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        records.push((line_no, rec));
    }
    let dim = records
        .iter()
        .find_map(|(_, r)| r.events.first().map(|e| e.x.len()))
        .unwrap_or(0);
    let mut sequences = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let events = rec.events.iter().map(|e| Event::from_options(e.t, &e.x)).collect();
        let seq = EventSequence::new(rec.t_max, dim, events)
            .map_err(|e| Error::AtLine { line, source: Box::new(e) })?;
        sequences.push(seq);
    }
    Dataset::new(sequences)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    read_jsonl(File::open(path)?)
}

pub fn write_jsonl(ds: &Dataset, mut writer: impl Write) -> Result<()> {
    for seq in &ds.sequences {
        let rec = SequenceRecord {
            t_max: seq.t_max(),
            events: seq
                .events()
                .iter()
                .map(|e| EventRecord { t: e.t, x: e.to_options() })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(ds, BufWriter::new(File::create(path)?))
}
