use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, LabelMode};
use crate::error::{Error, Result};
use crate::signal::{EcgRecord, Gender};

/// File extension of multi-lead record files.
pub const RECORD_EXTENSION: &str = "ecg";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Rows of `F` floats followed by an integer class; one single-lead record
/// per row.
pub fn parse_beat_csv(text: &str, path: &Path, sample_rate: f64) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(parse_err(path, line_no, "need at least one sample and a label"));
        }
        let (samples, label) = cells.split_at(cells.len() - 1);
        match width {
            None => width = Some(samples.len()),
            Some(w) if w != samples.len() => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("{} samples, previous rows have {w}", samples.len()),
                ))
            }
            _ => {}
        }
        let values = samples
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| parse_err(path, line_no, format!("`{c}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = parse_label(label[0]).ok_or_else(|| {
            parse_err(path, line_no, format!("`{}` is not a class index", label[0]))
        })?;
        records.push(EcgRecord::new(vec![values], sample_rate, None, None, vec![label])?);
    }
    if records.is_empty() {
        log::warn!("{}: no rows", path.display());
    }
    let class_count = records.iter().flat_map(|r| r.labels.iter()).max().map_or(0, |m| m + 1);
    Dataset::new(records, class_count, LabelMode::Single, path.display().to_string())
}

/// Accepts `3` and `3.0` (float-formatted labels are common in exports).
fn parse_label(cell: &str) -> Option<usize> {
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    let f = cell.parse::<f64>().ok()?;
    (f >= 0.0 && f.fract() == 0.0).then_some(f as usize)
}

pub fn load_beat_csv(path: &Path, sample_rate: f64) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_beat_csv(&text, path, sample_rate)
}

/// Parses the multi-lead text format:
/// `fs=<int> age=<int|?> gender=<F|M|?> labels=<comma ints>` then one line
/// per sample with tab-separated lead values.
pub fn parse_multilead(text: &str, path: &Path) -> Result<EcgRecord> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut fs = None;
    let mut age = None;
    let mut gender = None;
    let mut labels = None;
    for token in header.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, format!("malformed header field `{token}`")))?;
        let bad = |what: &str| parse_err(path, 1, format!("bad {what} `{value}`"));
        match key {
            "fs" => fs = Some(value.parse::<u32>().map_err(|_| bad("fs"))?),
            "age" => {
                age = Some(match value {
                    "?" => None,
                    v => Some(v.parse::<u32>().map_err(|_| bad("age"))?),
                })
            }
            "gender" => {
                gender = Some(match value {
                    "?" => None,
                    "F" => Some(Gender::Female),
                    "M" => Some(Gender::Male),
                    _ => return Err(bad("gender")),
                })
            }
            "labels" => {
                labels = Some(if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| v.parse::<usize>().map_err(|_| bad("labels")))
                        .collect::<Result<Vec<_>>>()?
                })
            }
            other => return Err(parse_err(path, 1, format!("unknown header key `{other}`"))),
        }
    }
    let missing = |k: &str| parse_err(path, 1, format!("header lacks `{k}=`"));
    let fs = fs.ok_or_else(|| missing("fs"))?;
    let age = age.ok_or_else(|| missing("age"))?;
    let gender = gender.ok_or_else(|| missing("gender"))?;
    let labels = labels.ok_or_else(|| missing("labels"))?;

    let mut leads: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if leads.is_empty() {
            leads = vec![Vec::new(); cells.len()];
        } else if cells.len() != leads.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("row {} has {} columns, expected {}", i, cells.len(), leads.len()),
            ));
        }
        for (lead, cell) in leads.iter_mut().zip(&cells) {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(path, line_no, format!("`{cell}` is not a number")))?;
            lead.push(v);
        }
    }
    if leads.is_empty() {
        return Err(parse_err(path, 2, "no samples"));
    }
    EcgRecord::new(leads, fs as f64, age, gender, labels)
}

pub fn load_multilead(path: &Path) -> Result<EcgRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_multilead(&text, path)
}

/// Text form of a record; values use the shortest exact decimal form.
pub fn format_multilead(record: &EcgRecord) -> String {
    let mut out = String::with_capacity(record.len() * record.lead_count() * 12);
    let labels: Vec<String> = record.labels.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(
        out,
        "fs={} age={} gender={} labels={}",
        record.sample_rate.round() as u64,
        record.age.map_or("?".to_string(), |a| a.to_string()),
        record.gender.map_or('?', |g| g.code()),
        labels.join(",")
    );
    for t in 0..record.len() {
        for (c, lead) in record.leads.iter().enumerate() {
            if c > 0 {
                out.push('\t');
            }
            let _ = write!(out, "{}", lead[t]);
        }
        out.push('\n');
    }
    out
}

pub fn write_multilead(record: &EcgRecord, path: &Path) -> Result<()> {
    fs::write(path, format_multilead(record)).map_err(|e| Error::io(path, e))
}

/// Record files (`*.ecg`) of a directory in name order.
pub fn record_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == RECORD_EXTENSION) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Every record file of `dir` as one dataset. `class_count` defaults to the
/// largest label plus one.
pub fn load_multilead_dir(dir: &Path, class_count: Option<usize>, mode: LabelMode) -> Result<Dataset> {
    use rayon::prelude::*;
    let files = record_files(dir)?;
    let records = files
        .par_iter()
        .map(|f| load_multilead(f))
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        log::warn!("{}: no .{RECORD_EXTENSION} files", dir.display());
    }
    let seen = records.iter().flat_map(|r| r.labels.iter()).max().map_or(0, |m| m + 1);
    Dataset::new(records, class_count.unwrap_or(seen), mode, dir.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn beat_csv_examples() {
        let d = parse_beat_csv("0.1,0.2,0.3,1\n0.0,0.0,0.0,0\n", p(), 125.0).unwrap();
        assert_eq!(d.records.len(), 2);
        assert_eq!(d.records[0].len(), 3);
        assert_eq!(d.records[0].labels, vec![1]);
        assert_eq!(d.records[1].labels, vec![0]);
        assert_eq!(d.records[0].sample_rate, 125.0);

        assert!(parse_beat_csv("", p(), 125.0).unwrap().records.is_empty());

        match parse_beat_csv("0.1,0.2,0.3,1\n0.1,0.2,0.3,0.4,1\n", p(), 125.0) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_beat_csv("0.1,x,0.3,1\n", p(), 125.0) {
            Err(Error::Parse { line: 1, msg, .. }) => assert!(msg.contains("`x`")),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_beat_csv("0.5,2.0\n", p(), 125.0).unwrap().records[0].labels, vec![2]);
    }

    #[test]
    fn multilead_examples() {
        let mut text = String::from("fs=500 age=63 gender=F labels=2,17\n");
        for t in 0..5000 {
            let row: Vec<String> = (0..8).map(|c| format!("{}", (t * 8 + c) as f64 * 1e-3)).collect();
            text.push_str(&row.join("\t"));
            text.push('\n');
        }
        let r = parse_multilead(&text, p()).unwrap();
        assert_eq!(r.lead_count(), 8);
        assert_eq!(r.len(), 5000);
        assert_eq!(r.labels, vec![2, 17]);
        assert_eq!(r.age, Some(63));
        assert_eq!(r.gender, Some(Gender::Female));

        let r = parse_multilead("fs=500 age=? gender=? labels=\n1\t2\n", p()).unwrap();
        assert_eq!((r.age, r.gender), (None, None));
        assert!(r.labels.is_empty());

        let ragged = "fs=500 age=1 gender=M labels=0\n1\t2\n1\t2\t3\n";
        match parse_multilead(ragged, p()) {
            Err(Error::Parse { line: 3, msg, .. }) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(parse_multilead("fs=500 agee=1 gender=M labels=0\n1\n", p()).is_err());
        assert!(parse_multilead("fs=500 age=1 gender=X labels=0\n1\n", p()).is_err());
        assert!(parse_multilead("fs=500 age=1 labels=0\n1\n", p()).is_err());
    }

    #[test]
    fn multilead_round_trip() {
        let r = EcgRecord::new(
            vec![vec![0.1, -2.5e-7, 3.0], vec![1.0 / 3.0, 0.0, -7.25]],
            500.0,
            Some(40),
            None,
            vec![1, 4],
        )
        .unwrap();
        let back = parse_multilead(&format_multilead(&r), p()).unwrap();
        assert_eq!(back, r);
    }
}
