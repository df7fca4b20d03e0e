//! File formats: time-series and result CSVs, the bench JSON document, and
//! the Larmor frequency-to-field conversion.
//!
//! Every floating-point value is written with 17 significant digits, which
//! round-trips `f64` exactly. Files start with `# key: value` metadata lines.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::bench::BenchReport;
use crate::error::{Error, Result};
use crate::kalman::{idx, TrackResult};
use crate::real::Real;
use crate::scf::ScfBlockFit;
use crate::signal::{FrequencyTrack, TimeSeries};

/// Shielded helion γ'/2π in Hz/T (CODATA 2018).
pub const HELION_GAMMA_OVER_2PI: f64 = 32.434_099_42e6;

/// Relative tolerance on sample spacing.
const UNIFORM_TOL: f64 = 1e-6;

/// `B = f / (γ/2π)`.
pub fn field_from_freq<T: Real>(f: T, gamma_over_2pi: T) -> Result<T> {
    if !(gamma_over_2pi > T::zero()) || !gamma_over_2pi.is_finite() {
        return Err(Error::invalid(format!(
            "gyromagnetic ratio must be positive, got {gamma_over_2pi}"
        )));
    }
    Ok(f / gamma_over_2pi)
}

/// Ordered `# key: value` header lines.
pub type Metadata = Vec<(String, String)>;

pub fn meta_get<'a>(meta: &'a Metadata, key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {s:?}"),
    })
}

/// A parsed CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub meta: Metadata,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn parse_table(text: &str) -> Result<Table> {
    let meta = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.trim_start_matches('#').split_once(':')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Format("missing header row".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(
            rec.iter()
                .map(|s| parse_f64(s, line))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(Table { meta, header, rows })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text)
}

/// Builds a series from a `t,y` or `y` table.
///
/// A `y`-only table needs `fs` (argument or `fs` metadata). With a `t`
/// column, consecutive spacings must agree with the mean spacing to 1 ppm.
pub fn timeseries_from_table(table: &Table, fs: Option<f64>) -> Result<TimeSeries<f64>> {
    let meta_fs = match meta_get(&table.meta, "fs") {
        Some(v) => Some(parse_f64(v, 0)?),
        None => None,
    };
    let fs_hint = fs.or(meta_fs);
    let y = table
        .column("y")
        .ok_or_else(|| Error::Format("missing `y` column".into()))?;
    if y.is_empty() {
        return Err(Error::Format("time series has no samples".into()));
    }
    let Some(t) = table.column("t") else {
        let fs = fs_hint.ok_or_else(|| {
            Error::Format("headerless time axis needs an explicit sampling rate".into())
        })?;
        return TimeSeries::new(y, fs, 0.0);
    };
    let n = t.len();
    let t0 = t[0];
    if n == 1 {
        let fs = fs_hint.ok_or_else(|| {
            Error::Format("a single sample needs an explicit sampling rate".into())
        })?;
        return TimeSeries::new(y, fs, t0);
    }
    let span = t[n - 1] - t0;
    if !(span > 0.0) {
        return Err(Error::Format(
            "time column must be strictly increasing".into(),
        ));
    }
    let dt = span / (n - 1) as f64;
    for (k, w) in t.windows(2).enumerate() {
        let step = w[1] - w[0];
        if !(step > 0.0) || (step - dt).abs() > UNIFORM_TOL * dt {
            return Err(Error::Format(format!(
                "non-uniform sampling between rows {} and {}: step {step:e} s vs mean {dt:e} s",
                k + 1,
                k + 2
            )));
        }
    }
    let fs = match fs_hint {
        Some(f) if ((f * dt) - 1.0).abs() <= UNIFORM_TOL => f,
        Some(f) => {
            return Err(Error::Format(format!(
                "sampling rate {f} Hz disagrees with time column ({} Hz)",
                1.0 / dt
            )))
        }
        None => 1.0 / dt,
    };
    TimeSeries::new(y, fs, t0)
}

/// Reads a time-series CSV; `fs` is required for `y`-only files without
/// `fs` metadata.
pub fn read_timeseries(path: &Path, fs: Option<f64>) -> Result<(TimeSeries<f64>, Metadata)> {
    let table = read_table(path)?;
    let ts = timeseries_from_table(&table, fs)?;
    Ok((ts, table.meta))
}

fn render(
    meta: &Metadata,
    header: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<String> {
    let mut out = String::new();
    for (k, v) in meta {
        out.push_str(&format!("# {k}: {v}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        w.write_record(row.iter().map(|&v| format_f64(v)))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?);
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_timeseries(path: &Path, ts: &TimeSeries<f64>, meta: &Metadata) -> Result<()> {
    let mut meta = meta.clone();
    meta.push(("fs".into(), format_f64(ts.fs())));
    let rows = (0..ts.len()).map(|k| vec![ts.time(k), ts.samples()[k]]);
    write_text(path, &render(&meta, &["t", "y"], rows)?)
}

/// Instantaneous true frequency per sample.
pub fn write_truth(
    path: &Path,
    truth: &FrequencyTrack<f64>,
    t0: f64,
    meta: &Metadata,
) -> Result<()> {
    let rows = truth
        .freqs
        .iter()
        .enumerate()
        .map(|(k, &f)| vec![t0 + k as f64 / truth.fs, f]);
    write_text(path, &render(meta, &["t", "f"], rows)?)
}

pub const TRACK_COLUMNS: [&str; 8] = [
    "block_index",
    "t_center",
    "f",
    "f_std",
    "A",
    "A_std",
    "phi",
    "loglik_cum",
];

pub const SCF_COLUMNS: [&str; 13] = [
    "block_index",
    "t_center",
    "f",
    "f_std",
    "A",
    "phi",
    "a_s",
    "a_c",
    "c0",
    "u_as",
    "u_ac",
    "u_c0",
    "residual_mse",
];

fn with_field(cols: &[&'static str], gamma: Option<f64>) -> Vec<&'static str> {
    let mut v = cols.to_vec();
    if gamma.is_some() {
        v.extend(["B", "B_std"]);
    }
    v
}

/// Smoother track; `t_center` is absolute (`t0` added). With `gamma` the
/// field and its std are appended in tesla.
pub fn write_track(
    path: &Path,
    track: &TrackResult<f64>,
    t0: f64,
    gamma: Option<f64>,
    meta: &Metadata,
) -> Result<()> {
    if let Some(g) = gamma {
        field_from_freq(1.0, g)?;
    }
    let mut cum = 0.0;
    let rows = (0..track.len()).map(|k| {
        let s = &track.smoothed[k];
        cum += track.loglik_increments.get(k).copied().unwrap_or(f64::NAN);
        let mut r = vec![
            k as f64,
            t0 + track.center_time(k),
            track.frequency(k),
            track.frequency_std(k),
            s.x.a,
            track.amplitude_std(k),
            s.x.phi,
            cum,
        ];
        if let Some(g) = gamma {
            r.push(track.frequency(k) / g);
            r.push(s.p[(idx::DF, idx::DF)].max(0.0).sqrt() / g);
        }
        r
    });
    let header = with_field(&TRACK_COLUMNS, gamma);
    let text = render(meta, &header, rows.collect::<Vec<_>>().into_iter())?;
    write_text(path, &text)
}

pub fn write_scf(
    path: &Path,
    fits: &[ScfBlockFit<f64>],
    t0: f64,
    gamma: Option<f64>,
    meta: &Metadata,
) -> Result<()> {
    if let Some(g) = gamma {
        field_from_freq(1.0, g)?;
    }
    let rows = fits.iter().map(|b| {
        let mut r = vec![
            b.block_index as f64,
            t0 + b.t_center,
            b.f,
            b.u_f,
            b.amplitude,
            b.phase0,
            b.a_s,
            b.a_c,
            b.c0,
            b.u_as,
            b.u_ac,
            b.u_c0,
            b.residual_mse,
        ];
        if let Some(g) = gamma {
            r.push(b.f / g);
            r.push(b.u_f / g);
        }
        r
    });
    write_text(path, &render(meta, &with_field(&SCF_COLUMNS, gamma), rows)?)
}

/// JSON formatter that prints every float with 17 significant digits.
struct PreciseFloats;

impl serde_json::ser::Formatter for PreciseFloats {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        w.write_all(format_f64(v).as_bytes())
    }

    fn write_f32<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        self.write_f64(w, f64::from(v))
    }
}

/// Serializes with 17-digit floats.
pub fn to_precise_json<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFloats);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Bench document: metadata plus the full report.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct BenchDocument {
    pub metadata: std::collections::BTreeMap<String, String>,
    pub report: BenchReport,
}

pub fn write_bench(path: &Path, report: &BenchReport, meta: &Metadata) -> Result<()> {
    let doc = BenchDocument {
        metadata: meta.iter().cloned().collect(),
        report: report.clone(),
    };
    write_text(path, &to_precise_json(&doc)?)
}

pub fn read_bench(path: &Path) -> Result<BenchDocument> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
