//! CSV recordings: one row per timestep.
//!
//! Default header: `t,ax,ay,az,gx,gy,gz,label,subject,domain`. Windows never
//! straddle a change of label, subject or domain.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use log::warn;

use super::SensorWindow;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub time_column: String,
    pub channel_columns: Vec<String>,
    /// Missing optional columns default to 0.
    pub label_column: Option<String>,
    pub subject_column: Option<String>,
    pub domain_column: Option<String>,
    pub sample_rate_hz: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            time_column: "t".into(),
            channel_columns: ["ax", "ay", "az", "gx", "gy", "gz"]
                .map(String::from)
                .to_vec(),
            label_column: Some("label".into()),
            subject_column: Some("subject".into()),
            domain_column: Some("domain".into()),
            sample_rate_hz: 50.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub windows: Vec<SensorWindow>,
    /// Windows dropped because they contained a non-finite cell.
    pub excluded_windows: usize,
    pub warnings: Vec<String>,
}

struct Row {
    line: usize,
    values: Vec<f32>,
    finite: bool,
    key: (usize, usize, usize),
}

pub fn ingest_csv(
    path: &Path,
    schema: &CsvSchema,
    window_len: usize,
    stride: usize,
) -> Result<Ingested> {
    if window_len == 0 || !window_len.is_multiple_of(super::FRAME_GROUP) {
        return Err(Error::InvalidArgument(format!(
            "window length {window_len} must be a positive multiple of {}",
            super::FRAME_GROUP
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let t_col = col(&schema.time_column)?;
    let ch_cols = schema
        .channel_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let optional =
        |name: &Option<String>| -> Result<Option<usize>> { name.as_deref().map(col).transpose() };
    let label_col = optional(&schema.label_column)?;
    let subject_col = optional(&schema.subject_column)?;
    let domain_col = optional(&schema.domain_column)?;

    let row_err = |line: usize, message: String| Error::Row {
        path: path.to_path_buf(),
        row: line,
        message,
    };
    let mut rows = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record?;
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        let number = |idx: usize| -> Result<f64> {
            cell(idx).parse::<f64>().map_err(|_| {
                row_err(
                    line,
                    format!(
                        "non-numeric value '{}' in column {}",
                        cell(idx),
                        &headers[idx]
                    ),
                )
            })
        };
        let id = |idx: Option<usize>| -> Result<usize> {
            match idx {
                None => Ok(0),
                Some(idx) => cell(idx).parse::<usize>().map_err(|_| {
                    row_err(
                        line,
                        format!("invalid id '{}' in column {}", cell(idx), &headers[idx]),
                    )
                }),
            }
        };
        let t = number(t_col)?;
        if !t.is_finite() || t <= last_t {
            return Err(Error::NonMonotoneTimestamp {
                path: path.to_path_buf(),
                row: line,
            });
        }
        last_t = t;
        let mut values = Vec::with_capacity(ch_cols.len());
        for &c in &ch_cols {
            values.push(number(c)? as f32);
        }
        let finite = values.iter().all(|v| v.is_finite());
        rows.push(Row {
            line,
            values,
            finite,
            key: (id(label_col)?, id(subject_col)?, id(domain_col)?),
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }

    let mut out = Ingested::default();
    let mut start = 0;
    while start < rows.len() {
        let key = rows[start].key;
        let end = rows[start..]
            .iter()
            .position(|r| r.key != key)
            .map_or(rows.len(), |p| start + p);
        let run = &rows[start..end];
        if run.len() < window_len {
            let msg = format!(
                "lines {}..={}: {} rows is shorter than one window of {window_len}",
                run[0].line,
                run[run.len() - 1].line,
                run.len()
            );
            warn!("{}: {msg}", path.display());
            out.warnings.push(msg);
        }
        let mut offset = 0;
        while offset + window_len <= run.len() {
            let slice = &run[offset..offset + window_len];
            if let Some(bad) = slice.iter().find(|r| !r.finite) {
                let msg = format!(
                    "window at line {} excluded: non-finite value on line {}",
                    slice[0].line, bad.line
                );
                warn!("{}: {msg}", path.display());
                out.warnings.push(msg);
                out.excluded_windows += 1;
            } else {
                let data: Vec<f32> = slice
                    .iter()
                    .flat_map(|r| r.values.iter().copied())
                    .collect();
                let frames = Tensor::matrix(window_len, ch_cols.len(), data)?;
                let (label, subject, domain) = key;
                let index = out.windows.len() + out.excluded_windows;
                out.windows.push(SensorWindow::new(
                    frames,
                    label,
                    subject,
                    domain,
                    schema.sample_rate_hz,
                    index,
                )?);
            }
            offset += stride;
        }
        start = end;
    }
    Ok(out)
}

/// Writes windows back to back with a continuous time axis.
pub fn write_csv(path: &Path, windows: &[SensorWindow], schema: &CsvSchema) -> Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    let mut header = vec![schema.time_column.clone()];
    header.extend(schema.channel_columns.iter().cloned());
    for c in [
        &schema.label_column,
        &schema.subject_column,
        &schema.domain_column,
    ]
    .into_iter()
    .flatten()
    {
        header.push(c.clone());
    }
    writeln!(file, "{}", header.join(","))?;
    let mut step = 0usize;
    for w in windows {
        if w.channels() != schema.channel_columns.len() {
            return Err(Error::shape(
                "write_csv",
                format!(
                    "window has {} channels, schema {}",
                    w.channels(),
                    schema.channel_columns.len()
                ),
            ));
        }
        for r in 0..w.timesteps() {
            let mut line = format!("{}", step as f64 / schema.sample_rate_hz);
            for v in w.frames.row(r) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            let ids = [
                (&schema.label_column, w.label),
                (&schema.subject_column, w.subject),
                (&schema.domain_column, w.domain),
            ];
            for (col, v) in ids {
                if col.is_some() {
                    line.push(',');
                    line.push_str(&v.to_string());
                }
            }
            writeln!(file, "{line}")?;
            step += 1;
        }
    }
    file.flush()?;
    Ok(())
}
