//! Data ingestion and preparation: CSV event records, grid rasterization,
//! sliding windows, chronological splits, augmentation, and the synthetic
//! generators used by probes.

pub mod container;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime};
use rand::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{flip_horizontal, rotate90, Tensor};

/// One raw event row.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub timestamp: NaiveDateTime,
    pub latitude: f64,
    pub longitude: f64,
    pub category: String,
}

/// Grid geometry and windowing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// (lat_min, lat_max, lon_min, lon_max).
    pub bbox: (f64, f64, f64, f64),
    pub h: usize,
    pub w: usize,
    pub categories: Vec<String>,
    pub interval_days: u32,
    /// History length (input frames).
    pub m: usize,
    /// Horizon (target frames).
    pub n: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let (lat_min, lat_max, lon_min, lon_max) = self.bbox;
        if !(lat_min < lat_max) || !(lon_min < lon_max) {
            return Err(Error::Config("bbox must have min < max on both axes".into()));
        }
        if self.h < 1 || self.w < 1 || self.m < 1 || self.n < 1 {
            return Err(Error::Config("h, w, m, n must all be at least 1".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("category list must not be empty".into()));
        }
        if self.interval_days < 1 {
            return Err(Error::Config("interval_days must be at least 1".into()));
        }
        Ok(())
    }

    pub fn c(&self) -> usize {
        self.categories.len()
    }
}

/// One training sample: observation tensor X (m x c x h x w) and target
/// tensor Y (n x c x h x w), both integer-valued counts at ingestion time.
#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceSequence {
    pub x: Tensor,
    pub y: Tensor,
    pub start_time: NaiveDate,
}

/// Maps CSV header names onto the record fields. `timestamp_format` is a
/// chrono pattern; when absent a set of common layouts is tried.
#[derive(Debug, Clone)]
pub struct SchemaMap {
    pub timestamp_col: String,
    pub lat_col: String,
    pub lon_col: String,
    pub category_col: String,
    pub timestamp_format: Option<String>,
}

fn parse_timestamp(s: &str, format: Option<&str>) -> Option<NaiveDateTime> {
    let midnight = |d: NaiveDate| d.and_time(NaiveTime::MIN);
    if let Some(fmt) = format {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
        return NaiveDate::parse_from_str(s, fmt).ok().map(midnight);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f%:z"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    for fmt in ["%Y-%m-%d", "%m/%d/%Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return Some(midnight(d));
        }
    }
    None
}

/// Read event records from any UTF-8 CSV stream with a header row.
/// Malformed rows are skipped and counted; a missing mapped column is fatal.
pub fn ingest_csv_reader(
    reader: impl std::io::Read,
    schema: &SchemaMap,
) -> Result<(Vec<EventRecord>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("cannot read CSV header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("CSV is missing mapped column `{name}`")))
    };
    let t_idx = col(&schema.timestamp_col)?;
    let lat_idx = col(&schema.lat_col)?;
    let lon_idx = col(&schema.lon_col)?;
    let cat_idx = col(&schema.category_col)?;

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let field = |i: usize| row.get(i).unwrap_or("");
        let ts = parse_timestamp(field(t_idx), schema.timestamp_format.as_deref());
        let lat = field(lat_idx).trim().parse::<f64>().ok().filter(|v| v.is_finite());
        let lon = field(lon_idx).trim().parse::<f64>().ok().filter(|v| v.is_finite());
        let cat = field(cat_idx).trim();
        match (ts, lat, lon) {
            (Some(timestamp), Some(latitude), Some(longitude)) if !cat.is_empty() => {
                records.push(EventRecord {
                    timestamp,
                    latitude,
                    longitude,
                    category: cat.to_string(),
                });
            }
            _ => skipped += 1,
        }
    }
    Ok((records, skipped))
}

pub fn ingest_csv(path: &std::path::Path, schema: &SchemaMap) -> Result<(Vec<EventRecord>, usize)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open CSV {}: {e}", path.display())))?;
    ingest_csv_reader(std::io::BufReader::new(f), schema)
}

/// Most frequent `c` categories, ties broken alphabetically.
pub fn top_categories(records: &[EventRecord], c: usize) -> Vec<String> {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for r in records {
        *counts.entry(&r.category).or_insert(0) += 1;
    }
    let mut sorted: Vec<(&str, usize)> = counts.into_iter().collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    sorted.into_iter().take(c).map(|(name, _)| name.to_string()).collect()
}

/// Min/max of the record coordinates, padded by a hair so no point sits
/// outside its own box.
pub fn bbox_from_records(records: &[EventRecord]) -> Result<(f64, f64, f64, f64)> {
    if records.is_empty() {
        return Err(Error::Config("cannot derive a bounding box from zero records".into()));
    }
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in records {
        b.0 = b.0.min(r.latitude);
        b.1 = b.1.max(r.latitude);
        b.2 = b.2.min(r.longitude);
        b.3 = b.3.max(r.longitude);
    }
    if !(b.0 < b.1) || !(b.2 < b.3) {
        return Err(Error::Config("records are degenerate (zero-extent bounding box)".into()));
    }
    Ok(b)
}

fn cell_index(v: f64, lo: f64, hi: f64, cells: usize) -> Option<usize> {
    if v < lo || v > hi {
        return None;
    }
    // Interior edges belong to the higher-index cell (floor does this);
    // the maximum edge folds into the last cell.
    let idx = ((v - lo) / (hi - lo) * cells as f64).floor() as usize;
    Some(idx.min(cells - 1))
}

/// Count records into per-interval `c x h x w` frames. Row 0 spans the
/// lowest latitudes, column 0 the lowest longitudes. Records outside the
/// bbox, the period, or the category list are dropped.
pub fn rasterize(
    records: &[EventRecord],
    spec: &GridSpec,
    period_start: NaiveDate,
    period_end: NaiveDate,
) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let days = (period_end - period_start).num_days();
    if days <= 0 {
        return Err(Error::Config("period_end must be after period_start".into()));
    }
    if days % spec.interval_days as i64 != 0 {
        return Err(Error::Config(format!(
            "period length {days}d is not a multiple of the {}d interval",
            spec.interval_days
        )));
    }
    let frames_n = (days / spec.interval_days as i64) as usize;
    let c = spec.c();
    let mut frames = vec![Tensor::zeros(&[c, spec.h, spec.w]); frames_n];
    let (lat_min, lat_max, lon_min, lon_max) = spec.bbox;
    for r in records {
        let Some(k) = spec.categories.iter().position(|name| name == &r.category) else {
            continue;
        };
        let day_offset = (r.timestamp.date() - period_start).num_days();
        if day_offset < 0 || day_offset >= days {
            continue;
        }
        let t = (day_offset / spec.interval_days as i64) as usize;
        let (Some(i), Some(j)) = (
            cell_index(r.latitude, lat_min, lat_max, spec.h),
            cell_index(r.longitude, lon_min, lon_max, spec.w),
        ) else {
            continue;
        };
        let idx = [k, i, j];
        let cur = frames[t].at(&idx);
        frames[t].set(&idx, cur + 1.0);
    }
    Ok(frames)
}

/// Number of stride-1 windows over `t` frames.
pub fn window_count(t: usize, m: usize, n: usize) -> usize {
    (t + 1).saturating_sub(m + n)
}

/// Cut stride-1 (X, Y) windows out of a chronological frame series that
/// starts at `series_start`. Fewer than m+n frames yields an empty list.
pub fn sliding_windows(
    frames: &[Tensor],
    spec: &GridSpec,
    series_start: NaiveDate,
) -> Vec<OccurrenceSequence> {
    let (m, n) = (spec.m, spec.n);
    let count = window_count(frames.len(), m, n);
    let mut out = Vec::with_capacity(count);
    for t in 0..count {
        let x = stack(&frames[t..t + m]);
        let y = stack(&frames[t + m..t + m + n]);
        let start_time = series_start + chrono::Days::new((t as u64) * spec.interval_days as u64);
        out.push(OccurrenceSequence { x, y, start_time });
    }
    out
}

fn stack(frames: &[Tensor]) -> Tensor {
    let fs = frames[0].shape();
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(fs);
    let mut data = Vec::with_capacity(frames.len() * frames[0].len());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&shape, data).expect("frame shapes agree")
}

/// Contiguous chronological split. The first two partitions get
/// floor(T * ratio) frames, the remainder goes to the third.
pub fn split_periods<T: Clone>(frames: &[T], ratios: (f64, f64, f64)) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {}", a + b + c)));
    }
    let t = frames.len();
    let n_train = (t as f64 * a).floor() as usize;
    let n_val = (t as f64 * b).floor() as usize;
    let train = frames[..n_train].to_vec();
    let val = frames[n_train..n_train + n_val].to_vec();
    let test = frames[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Random augmentation: with probability 1/2 flip every frame of X and Y
/// horizontally, then rotate all frames by one shared angle drawn uniformly
/// from {0, 90, 180, 270} degrees. Counts are preserved exactly.
pub fn augment(seq: &OccurrenceSequence, rng: &mut impl Rng) -> Result<OccurrenceSequence> {
    let flip = rng.random_bool(0.5);
    let turns: i64 = rng.random_range(0..4);
    apply_transform(seq, flip, turns)
}

/// Deterministic core of [`augment`], also used by the rotation probe.
pub fn apply_transform(
    seq: &OccurrenceSequence,
    flip: bool,
    quarter_turns: i64,
) -> Result<OccurrenceSequence> {
    let (h, w) = (seq.x.shape()[2], seq.x.shape()[3]);
    if quarter_turns.rem_euclid(4) != 0 && h != w {
        return Err(Error::dim("augment", "width (square grid required)", h, w));
    }
    let mut x = seq.x.clone();
    let mut y = seq.y.clone();
    if flip {
        x = flip_horizontal(&x);
        y = flip_horizontal(&y);
    }
    if quarter_turns.rem_euclid(4) != 0 {
        x = rotate90(&x, quarter_turns)?;
        y = rotate90(&y, quarter_turns)?;
    }
    Ok(OccurrenceSequence { x, y, start_time: seq.start_time })
}

/// Epoch used for synthetic sequences (dates carry no meaning there).
pub fn synthetic_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 1).unwrap()
}

/// Diagonal moving-hotspot stimulus: per category, frame t carries `mass`
/// at cell (t+o, t+o), drifting toward the bottom-right; Y continues the
/// motion. The per-sequence offset o is drawn so the whole trajectory fits
/// on the grid (the clamp below never fires for generated offsets).
pub fn synth_moving_hotspot(
    spec: &GridSpec,
    num_sequences: usize,
    mass: f64,
    rng: &mut impl Rng,
) -> Result<Vec<OccurrenceSequence>> {
    let (m, n, c, h, w) = (spec.m, spec.n, spec.c(), spec.h, spec.w);
    if h != w || h < m + n {
        return Err(Error::Config(format!(
            "moving-hotspot generator needs a square grid with h == w >= m+n, got {h}x{w}"
        )));
    }
    let max_offset = h - (m + n);
    let mut out = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let o = rng.random_range(0..=max_offset);
        let mut x = Tensor::zeros(&[m, c, h, w]);
        let mut y = Tensor::zeros(&[n, c, h, w]);
        for k in 0..c {
            for t in 0..m {
                let p = (t + o).min(h - 1);
                x.set(&[t, k, p, p], mass);
            }
            for tau in 0..n {
                let p = (m + tau + o).min(h - 1);
                y.set(&[tau, k, p, p], mass);
            }
        }
        out.push(OccurrenceSequence { x, y, start_time: synthetic_epoch() });
    }
    Ok(out)
}

/// Time-invariant stimulus with perfectly correlated categories: one random
/// cell per sequence carries `mass` in every category and every frame.
pub fn synth_correlated(
    spec: &GridSpec,
    num_sequences: usize,
    mass: f64,
    rng: &mut impl Rng,
) -> Result<Vec<OccurrenceSequence>> {
    let (m, n, c, h, w) = (spec.m, spec.n, spec.c(), spec.h, spec.w);
    let mut out = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let (i, j) = (rng.random_range(0..h), rng.random_range(0..w));
        let mut x = Tensor::zeros(&[m, c, h, w]);
        let mut y = Tensor::zeros(&[n, c, h, w]);
        for k in 0..c {
            for t in 0..m {
                x.set(&[t, k, i, j], mass);
            }
            for tau in 0..n {
                y.set(&[tau, k, i, j], mass);
            }
        }
        out.push(OccurrenceSequence { x, y, start_time: synthetic_epoch() });
    }
    Ok(out)
}

/// Probe input: fold every category of X into channel `k`, zeroing the
/// rest. Y is left untouched (it is only used for scoring).
pub fn aggregate_into_category(seq: &OccurrenceSequence, k: usize) -> Result<OccurrenceSequence> {
    let s = seq.x.shape().to_vec();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    if k >= c {
        return Err(Error::dim("aggregate_into_category", "category", c - 1, k));
    }
    let mut x = Tensor::zeros(&[m, c, h, w]);
    for t in 0..m {
        for cat in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = seq.x.at(&[t, cat, i, j]);
                    if v != 0.0 {
                        let cur = x.at(&[t, k, i, j]);
                        x.set(&[t, k, i, j], cur + v);
                    }
                }
            }
        }
    }
    Ok(OccurrenceSequence { x, y: seq.y.clone(), start_time: seq.start_time })
}

/// A dataset ready for training: spec plus chronologically split sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GridSpec,
    pub train: Vec<OccurrenceSequence>,
    pub val: Vec<OccurrenceSequence>,
    pub test: Vec<OccurrenceSequence>,
}

impl Dataset {
    /// All X frames of the training split (used for VAE pre-training).
    pub fn train_frames(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for seq in &self.train {
            let s = seq.x.shape();
            for t in 0..s[0] {
                let block = s[1] * s[2] * s[3];
                let data = seq.x.data()[t * block..(t + 1) * block].to_vec();
                out.push(Tensor::from_vec(&s[1..], data).unwrap());
            }
        }
        out
    }
}

pub use container::{load_dataset, save_dataset, DATASET_MAGIC};
