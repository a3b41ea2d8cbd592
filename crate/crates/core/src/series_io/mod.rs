//! Travel-time series: ingestion, validation, standard measurements, the
//! spatial index, and persistence of fitted models.

mod persist;

pub use persist::{
    from_toml_str, load_bundle, load_model, save_bundle, save_model, to_toml_string, Artifact, BundleState,
    ModelBundle, Provenance, SeriesInfo, SCHEMA_VERSION,
};

use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of the loop-detector feeds, in minutes.
pub const DEFAULT_H: f64 = 5.0;
/// Largest gap that ingestion will interpolate over, in minutes.
pub const DEFAULT_MAX_GAP: f64 = 24.0 * 60.0;
pub const CSV_HEADER: [&str; 2] = ["timestamp", "travel_time_min"];

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const GRID_EPS: f64 = 1e-9;

/// Uniformly sampled travel times (minutes) for one path.
///
/// Observation `i` sits at `start_time + i·h`. Raw series hold strictly
/// positive values; residual series (after the deterministic part has been
/// removed) may take any finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelTimeSeries {
    path_id: String,
    start_time: NaiveDateTime,
    h: f64,
    values: Vec<f64>,
    is_residual: bool,
}

impl TravelTimeSeries {
    pub fn new(
        path_id: impl Into<String>,
        start_time: NaiveDateTime,
        h: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::build(path_id.into(), start_time, h, values, false)
    }

    pub fn residual(
        path_id: impl Into<String>,
        start_time: NaiveDateTime,
        h: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::build(path_id.into(), start_time, h, values, true)
    }

    fn build(
        path_id: String,
        start_time: NaiveDateTime,
        h: f64,
        values: Vec<f64>,
        is_residual: bool,
    ) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!("sampling interval must be positive, got {h}")));
        }
        if values.len() < 2 {
            return Err(Error::invalid("a series needs at least two observations"));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("observation {i} is not finite")));
            }
            if !is_residual && *v <= 0.0 {
                return Err(Error::invalid(format!(
                    "observation {i} is not a positive travel time ({v})"
                )));
            }
        }
        Ok(Self {
            path_id,
            start_time,
            h,
            values,
            is_residual,
        })
    }

    /// Same grid, new values, flagged as residual.
    pub fn derive_residual(&self, values: Vec<f64>) -> Result<Self> {
        Self::build(self.path_id.clone(), self.start_time, self.h, values, true)
    }

    pub fn path_id(&self) -> &str {
        &self.path_id
    }

    pub fn start_time(&self) -> NaiveDateTime {
        self.start_time
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_residual(&self) -> bool {
        self.is_residual
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Minutes from the start of the series to the last observation.
    pub fn span_minutes(&self) -> f64 {
        (self.len() - 1) as f64 * self.h
    }

    pub fn time_at(&self, i: usize) -> NaiveDateTime {
        self.start_time + minutes_delta(i as f64 * self.h)
    }

    pub fn end_time(&self) -> NaiveDateTime {
        self.time_at(self.len() - 1)
    }

    /// Minutes elapsed between the series start and `t`.
    pub fn offset_minutes(&self, t: NaiveDateTime) -> f64 {
        minutes_between(self.start_time, t)
    }

    /// Minutes past midnight of the first observation.
    pub fn start_minute_of_day(&self) -> f64 {
        minutes_between(self.start_time.date().and_time(NaiveTime::MIN), self.start_time)
    }

    /// Mean of the observations whose time falls in the closed window
    /// `[offset − window/2, offset + window/2]` (minutes from the start).
    pub fn measurement_at_offset(&self, offset: f64, window: f64) -> Result<f64> {
        if !(window.is_finite() && window > 0.0) {
            return Err(Error::invalid(format!("window must be positive, got {window}")));
        }
        let lo = (offset - window / 2.0) / self.h;
        let hi = (offset + window / 2.0) / self.h;
        let first = (lo - GRID_EPS).ceil().max(0.0);
        let last = (hi + GRID_EPS).floor().min((self.len() - 1) as f64);
        if !(first.is_finite() && last.is_finite()) || first > last {
            return Err(Error::invalid(format!(
                "no observation inside the window of {window} min around offset {offset} min"
            )));
        }
        let (first, last) = (first as usize, last as usize);
        let slice = &self.values[first..=last];
        Ok(slice.iter().sum::<f64>() / slice.len() as f64)
    }
}

pub(crate) fn minutes_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    let d = to - from;
    match d.num_nanoseconds() {
        Some(ns) => ns as f64 / 60e9,
        None => d.num_seconds() as f64 / 60.0,
    }
}

pub(crate) fn minutes_delta(minutes: f64) -> TimeDelta {
    TimeDelta::milliseconds((minutes * 60_000.0).round() as i64)
}

pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(t);
        }
    }
    // Offsets are dropped: the series is kept in its own local clock.
    DateTime::parse_from_rfc3339(text).ok().map(|t| t.naive_local())
}

/// Maps a TOML decoding error to a `line:column` located parse error.
pub(crate) fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let location = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("{line}:{col}")
        }
        None => "unknown".into(),
    };
    Error::Parse {
        location,
        message: e.message().to_string(),
    }
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub path_id: String,
    pub h: f64,
    pub max_gap: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            path_id: "path".into(),
            h: DEFAULT_H,
            max_gap: DEFAULT_MAX_GAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub series: TravelTimeSeries,
    /// Rows read from the source.
    pub rows: usize,
    /// Grid cells created by linear interpolation across gaps.
    pub filled: usize,
}

/// Reads `timestamp,travel_time_min` rows onto a uniform grid of step `h`.
///
/// Lines starting with `#` are comments. Gaps that are a whole number of
/// steps are filled by linear interpolation. Row numbers in errors are file
/// line numbers.
pub fn ingest_csv<R: Read>(source: R, opts: &IngestOptions) -> Result<IngestReport> {
    if !(opts.h.is_finite() && opts.h > 0.0) {
        return Err(Error::invalid(format!("sampling interval must be positive, got {}", opts.h)));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            location: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::Empty("no header row".into()));
    }
    if headers.len() != 2 || headers[0] != *CSV_HEADER[0] || headers[1] != *CSV_HEADER[1] {
        return Err(Error::Row {
            row: 1,
            message: format!(
                "expected header `{}`, found `{}`",
                CSV_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut start: Option<NaiveDateTime> = None;
    let mut last: Option<(f64, f64)> = None; // (offset minutes, value)
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut filled = 0usize;

    for record in reader.records() {
        let record = record.map_err(|e| Error::Row {
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::Row {
                row,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let t = parse_timestamp(&record[0]).ok_or_else(|| Error::Row {
            row,
            message: format!("unparseable timestamp `{}`", &record[0]),
        })?;
        let value: f64 = record[1].parse().map_err(|_| Error::Row {
            row,
            message: format!("unparseable travel time `{}`", &record[1]),
        })?;
        if !value.is_finite() || value <= 0.0 {
            return Err(Error::Row {
                row,
                message: format!("travel time must be positive and finite, got {value}"),
            });
        }
        rows += 1;

        let start_time = *start.get_or_insert(t);
        let offset = minutes_between(start_time, t);
        if let Some((prev_offset, prev_value)) = last {
            let gap = offset - prev_offset;
            if gap <= 0.0 {
                return Err(Error::Row {
                    row,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
            if gap > opts.max_gap + GRID_EPS {
                return Err(Error::Row {
                    row,
                    message: format!("gap of {gap} min exceeds the limit of {} min", opts.max_gap),
                });
            }
            let steps = gap / opts.h;
            let whole = steps.round();
            if (steps - whole).abs() > 1e-6 {
                return Err(Error::Row {
                    row,
                    message: format!("timestamp is off the {} min grid", opts.h),
                });
            }
            let whole = whole as usize;
            for k in 1..whole {
                let w = k as f64 / whole as f64;
                values.push(prev_value + w * (value - prev_value));
                filled += 1;
            }
        }
        values.push(value);
        last = Some((offset, value));
    }

    let start_time = start.ok_or_else(|| Error::Empty("no data rows".into()))?;
    if values.len() < 2 {
        return Err(Error::Empty("a series needs at least two observations".into()));
    }
    let series = TravelTimeSeries::new(opts.path_id.clone(), start_time, opts.h, values)?;
    Ok(IngestReport {
        series,
        rows,
        filled,
    })
}

/// Writes the series in the ingest format; `preamble` lines are emitted as
/// `#` comments. Values use the shortest representation that round-trips.
pub fn write_series_csv<W: Write>(
    series: &TravelTimeSeries,
    mut out: W,
    preamble: &[String],
) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for (i, v) in series.values.iter().enumerate() {
        writeln!(out, "{},{}", format_timestamp(series.time_at(i)), v)?;
    }
    Ok(())
}

/// Standard measurement: average of the observations within `window`
/// minutes centred on `t`.
pub fn standard_measurement(series: &TravelTimeSeries, t: NaiveDateTime, window: f64) -> Result<f64> {
    series.measurement_at_offset(series.offset_minutes(t), window)
}

/// Mean of the standard measurements taken at the plan's times of day.
pub fn daily_mean(
    series: &TravelTimeSeries,
    day: NaiveDate,
    plan: &[NaiveTime],
    window: f64,
) -> Result<f64> {
    if plan.is_empty() {
        return Err(Error::Empty("measurement plan has no times".into()));
    }
    let (first_day, last_day) = (series.start_time.date(), series.end_time().date());
    if day < first_day || day > last_day {
        return Err(Error::invalid(format!(
            "day {day} is outside the series span {first_day}..={last_day}"
        )));
    }
    let mut sum = 0.0;
    for time in plan {
        let t = day.and_time(*time);
        let offset = series.offset_minutes(t);
        if offset < -GRID_EPS || offset > series.span_minutes() + GRID_EPS {
            return Err(Error::invalid(format!("plan time {t} is outside the series span")));
        }
        sum += series.measurement_at_offset(offset, window)?;
    }
    Ok(sum / plan.len() as f64)
}

/// Weighted composition of several paths into one index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialIndexSpec {
    components: Vec<(String, f64)>,
}

impl SpatialIndexSpec {
    /// Weights must be positive; they are normalized to sum to one.
    pub fn new(components: Vec<(String, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("spatial index needs at least one component".into()));
        }
        let mut total = 0.0;
        for (id, w) in &components {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::invalid(format!("weight for `{id}` must be positive, got {w}")));
            }
            total += w;
        }
        let components = components
            .into_iter()
            .map(|(id, w)| (id, w / total))
            .collect();
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(String, f64)] {
        &self.components
    }
}

/// `Σ α_i · T_i(t)` over the index components.
pub fn spatial_index(
    series_set: &[TravelTimeSeries],
    spec: &SpatialIndexSpec,
    t: NaiveDateTime,
    window: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (id, weight) in &spec.components {
        let series = series_set
            .iter()
            .find(|s| s.path_id == *id)
            .ok_or_else(|| Error::invalid(format!("no series for path `{id}`")))?;
        let offset = series.offset_minutes(t);
        if offset < -GRID_EPS || offset > series.span_minutes() + GRID_EPS {
            return Err(Error::invalid(format!("{t} is outside the span of path `{id}`")));
        }
        total += weight * series.measurement_at_offset(offset, window)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> NaiveDateTime {
        parse_timestamp("2011-01-03T00:00:00").unwrap()
    }

    fn ingest(text: &str) -> Result<IngestReport> {
        ingest_csv(text.as_bytes(), &IngestOptions::default())
    }

    #[test]
    fn ingest_identity() {
        let r = ingest(
            "timestamp,travel_time_min\n2011-01-03T00:00:00,10\n2011-01-03T00:05:00,12\n2011-01-03T00:10:00,11\n",
        )
        .unwrap();
        assert_eq!(r.series.values(), &[10.0, 12.0, 11.0]);
        assert_eq!(r.series.h(), 5.0);
        assert_eq!(r.filled, 0);
        assert_eq!(r.rows, 3);
    }

    #[test]
    fn ingest_fills_single_gap() {
        let r = ingest("timestamp,travel_time_min\n2011-01-03T00:00:00,10\n2011-01-03T00:10:00,12\n")
            .unwrap();
        assert_eq!(r.series.values(), &[10.0, 11.0, 12.0]);
        assert_eq!(r.filled, 1);
    }

    #[test]
    fn ingest_rejects_negative_value_with_row() {
        let err = ingest(
            "timestamp,travel_time_min\n2011-01-03T00:00:00,10\n2011-01-03T00:05:00,-3\n",
        )
        .unwrap_err();
        match err {
            Error::Row { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_empty_and_non_monotone() {
        assert!(matches!(ingest(""), Err(Error::Empty(_))));
        assert!(matches!(ingest("timestamp,travel_time_min\n"), Err(Error::Empty(_))));
        let err = ingest(
            "timestamp,travel_time_min\n2011-01-03T00:05:00,10\n2011-01-03T00:00:00,11\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Row { row: 3, .. }));
    }

    #[test]
    fn ingest_rejects_large_gap() {
        let err = ingest(
            "timestamp,travel_time_min\n2011-01-03T00:00:00,10\n2011-01-05T00:00:00,11\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Row { row: 3, .. }), "{err}");
    }

    #[test]
    fn ingest_accepts_offsets_and_comments() {
        let r = ingest(
            "# produced elsewhere\ntimestamp,travel_time_min\n2011-01-03T00:00:00-08:00,10\n2011-01-03T00:05:00-08:00,12\n",
        )
        .unwrap();
        assert_eq!(r.series.start_time(), t0());
    }

    #[test]
    fn write_then_ingest_reproduces_values() {
        let values = vec![2.23, 0.1 + 0.2, 1.0 / 3.0, 7.0];
        let s = TravelTimeSeries::new("p", t0(), 5.0, values.clone()).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&s, &mut buf, &["schema_version = 1".into()]).unwrap();
        let back = ingest_csv(buf.as_slice(), &IngestOptions { path_id: "p".into(), ..Default::default() })
            .unwrap();
        assert_eq!(back.series, s);
    }

    #[test]
    fn measurement_of_constant_series() {
        let s = TravelTimeSeries::new("p", t0(), 5.0, vec![10.0; 50]).unwrap();
        for (m, w) in [(0.0, 5.0), (37.0, 12.0), (120.0, 60.0)] {
            let v = s.measurement_at_offset(m, w).unwrap();
            assert_eq!(v, 10.0);
        }
    }

    #[test]
    fn measurement_two_point_mean() {
        let s = TravelTimeSeries::new("p", t0(), 5.0, vec![10.0, 20.0]).unwrap();
        assert_eq!(s.measurement_at_offset(2.5, 5.0).unwrap(), 15.0);
    }

    #[test]
    fn measurement_empty_window_errors() {
        let s = TravelTimeSeries::new("p", t0(), 5.0, vec![10.0, 20.0, 30.0]).unwrap();
        assert!(s.measurement_at_offset(2.5, 1.0).is_err());
        assert!(s.measurement_at_offset(100.0, 5.0).is_err());
    }

    #[test]
    fn measurement_over_full_period_of_sinusoid() {
        let n = 289;
        let values: Vec<f64> = (0..n)
            .map(|i| 10.0 + (2.0 * std::f64::consts::PI * i as f64 / 288.0).sin())
            .collect();
        let s = TravelTimeSeries::new("p", t0(), 5.0, values.clone()).unwrap();
        // window covers samples 0..=287 exactly (one period)
        let centre = 287.0 * 5.0 / 2.0;
        let got = s.measurement_at_offset(centre, 287.0 * 5.0).unwrap();
        let oracle: f64 = values[..288].iter().sum::<f64>() / 288.0;
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 10.0).abs() < 1e-9);
    }

    #[test]
    fn daily_mean_cases() {
        let values: Vec<f64> = (0..288 * 2).map(|i| 5.0 + (i % 7) as f64).collect();
        let s = TravelTimeSeries::new("p", t0(), 5.0, values.clone()).unwrap();
        let day = t0().date().succ_opt().unwrap();
        let all: Vec<NaiveTime> = (0..288)
            .map(|i| NaiveTime::from_num_seconds_from_midnight_opt(i * 300, 0).unwrap())
            .collect();
        let plain = values[288..].iter().sum::<f64>() / 288.0;
        assert!((daily_mean(&s, day, &all, 5.0).unwrap() - plain).abs() < 1e-12);

        let plan = [
            NaiveTime::from_hms_opt(7, 0, 0).unwrap(),
            NaiveTime::from_hms_opt(8, 30, 0).unwrap(),
            NaiveTime::from_hms_opt(17, 15, 0).unwrap(),
        ];
        let idx = |h: usize, m: usize| 288 + (h * 60 + m) / 5;
        let oracle = (values[idx(7, 0)] + values[idx(8, 30)] + values[idx(17, 15)]) / 3.0;
        assert!((daily_mean(&s, day, &plan, 5.0).unwrap() - oracle).abs() < 1e-12);

        assert!(daily_mean(&s, day, &[], 5.0).is_err());
        assert!(daily_mean(&s, day.succ_opt().unwrap(), &plan, 5.0).is_err());
    }

    #[test]
    fn spatial_index_cases() {
        let a = TravelTimeSeries::new("a", t0(), 5.0, vec![10.0; 10]).unwrap();
        let b = TravelTimeSeries::new("b", t0(), 5.0, vec![20.0; 10]).unwrap();
        let t = t0() + minutes_delta(15.0);
        let one = SpatialIndexSpec::new(vec![("a".into(), 1.0)]).unwrap();
        assert_eq!(spatial_index(&[a.clone(), b.clone()], &one, t, 5.0).unwrap(), 10.0);
        let half = SpatialIndexSpec::new(vec![("a".into(), 0.5), ("b".into(), 0.5)]).unwrap();
        assert_eq!(spatial_index(&[a.clone(), b.clone()], &half, t, 5.0).unwrap(), 15.0);
        let missing = SpatialIndexSpec::new(vec![("zz".into(), 1.0)]).unwrap();
        assert!(spatial_index(&[a.clone()], &missing, t, 5.0).is_err());
        assert!(spatial_index(&[a], &one, t0() + minutes_delta(500.0), 5.0).is_err());
    }

    #[test]
    fn spatial_index_four_paths() {
        let weights = [0.4, 0.3, 0.2, 0.1];
        let set: Vec<TravelTimeSeries> = (0..4)
            .map(|k| {
                let v = (0..20).map(|i| 3.0 + k as f64 + 0.1 * (i * (k + 1)) as f64).collect();
                TravelTimeSeries::new(format!("p{k}"), t0(), 5.0, v).unwrap()
            })
            .collect();
        let spec = SpatialIndexSpec::new(
            (0..4).map(|k| (format!("p{k}"), weights[k])).collect(),
        )
        .unwrap();
        let t = t0() + minutes_delta(35.0);
        let oracle: f64 = (0..4).map(|k| weights[k] * set[k].values()[7]).sum();
        assert!((spatial_index(&set, &spec, t, 5.0).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn weights_are_normalized() {
        let s = SpatialIndexSpec::new(vec![("a".into(), 2.0), ("b".into(), 6.0)]).unwrap();
        assert_eq!(s.components()[0].1, 0.25);
        assert!(SpatialIndexSpec::new(vec![]).is_err());
        assert!(SpatialIndexSpec::new(vec![("a".into(), 0.0)]).is_err());
    }
}
