use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use super::RawSeries;
use crate::error::{Error, Result};

const TIME_HEADERS: [&str; 5] = ["timestamp", "time", "date", "datetime", "ds"];

/// Reads a univariate series from a CSV file with a header row.
///
/// The value column is the one named `value` if present, otherwise the last
/// column. A column named like a timestamp (or the first of two columns) is
/// used only to detect gaps. Missing cells and gaps are filled by linear
/// interpolation.
pub fn read_csv(path: &Path) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("{}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: no columns", path.display())));
    }
    let lower: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    let value_col = lower.iter().position(|h| h == "value").unwrap_or(lower.len() - 1);
    let time_col = lower
        .iter()
        .position(|h| TIME_HEADERS.contains(&h.as_str()))
        .or(if lower.len() == 2 { Some(0) } else { None })
        .filter(|&c| c != value_col);

    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for record in reader.records() {
        let record = record?;
        let cell = record.get(value_col).unwrap_or("");
        values.push(parse_value(cell));
        if let Some(c) = time_col {
            let raw = record.get(c).unwrap_or("");
            stamps.push(parse_timestamp(raw).ok_or_else(|| {
                Error::Data(format!("{}: cannot parse timestamp '{raw}'", path.display()))
            })?);
        }
    }
    if !stamps.is_empty() {
        values = fill_time_gaps(&stamps, values)?;
    }
    let values = interpolate_missing(values)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sampling_period = if stamps.len() > 1 {
        format!("{}s", base_step(&stamps))
    } else {
        "unknown".into()
    };
    Ok(RawSeries {
        name,
        sampling_period,
        values,
    })
}

fn parse_value(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Seconds since the epoch, or the raw number for numeric time columns.
fn parse_timestamp(raw: &str) -> Option<f64> {
    if let Ok(v) = raw.parse::<f64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp() as f64);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%d/%m/%Y %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp() as f64);
        }
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp() as f64)
}

/// Smallest spacing between consecutive timestamps, taken as the sampling step.
fn base_step(stamps: &[f64]) -> f64 {
    stamps.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Inserts missing slots wherever consecutive timestamps are further apart
/// than the sampling step.
fn fill_time_gaps(stamps: &[f64], values: Vec<Option<f64>>) -> Result<Vec<Option<f64>>> {
    if stamps.len() < 2 {
        return Ok(values);
    }
    let step = base_step(stamps);
    if !(step > 0.0) {
        return Err(Error::Data("timestamps must be strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            let delta = stamps[i] - stamps[i - 1];
            if delta <= 0.0 {
                return Err(Error::Data(format!("timestamps not increasing at row {}", i + 1)));
            }
            let slots = (delta / step).round() as usize;
            out.extend(std::iter::repeat_n(None, slots.saturating_sub(1)));
        }
        out.push(v);
    }
    Ok(out)
}

fn interpolate_missing(values: Vec<Option<f64>>) -> Result<Vec<f64>> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let (first, last) = match (known.first(), known.last()) {
        (Some(&f), Some(&l)) => (f, l),
        _ => return Err(Error::Data("series has no numeric values".into())),
    };
    let mut out = vec![0.0; values.len()];
    for i in 0..values.len() {
        out[i] = match values[i] {
            Some(v) => v,
            // Edges are held constant; interior gaps are linear.
            None if i < first => values[first].unwrap_or_default(),
            None if i > last => values[last].unwrap_or_default(),
            None => {
                let hi = known.partition_point(|&k| k < i);
                let (a, b) = (known[hi - 1], known[hi]);
                let (va, vb) = (values[a].unwrap_or_default(), values[b].unwrap_or_default());
                va + (vb - va) * (i - a) as f64 / (b - a) as f64
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_column() {
        let f = write("load\n1\n2\n3\n");
        assert_eq!(read_csv(f.path()).unwrap().values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn missing_cells_are_interpolated() {
        let f = write("value\n1\nNA\n3\nNaN\n7\n");
        assert_eq!(read_csv(f.path()).unwrap().values, vec![1.0, 2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn timestamp_gaps_are_filled() {
        let f = write(
            "timestamp,value\n2020-01-01 00:00:00,0\n2020-01-01 00:15:00,1\n2020-01-01 01:00:00,4\n",
        );
        let s = read_csv(f.path()).unwrap();
        assert_eq!(s.values, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.sampling_period, "900s");
    }

    #[test]
    fn numeric_time_column() {
        let f = write("t,y\n0,1\n1,2\n3,4\n");
        assert_eq!(read_csv(f.path()).unwrap().values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_series_rejected() {
        let f = write("value\n\n");
        assert!(read_csv(f.path()).is_err());
    }
}
