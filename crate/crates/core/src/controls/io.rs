use std::fs;
use std::path::{Path, PathBuf};

use super::{ControlTarget, MaskedReference, Task};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::{BINS, FRAMES};

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(headers)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

/// Reads a headerless numeric grid of `rows x cols`.
fn read_grid(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut n = 0;
    for rec in reader(path, false)?.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(parse_err(path, format!("row {} has {} values, want {cols}", n + 1, rec.len())));
        }
        for v in rec.iter() {
            data.push(v.parse::<f64>().map_err(|e| parse_err(path, format!("row {}: {e}", n + 1)))?);
        }
        n += 1;
    }
    if n != rows {
        return Err(parse_err(path, format!("{n} rows, want {rows}")));
    }
    Tensor::new(&[rows, cols], data)
}

fn write_grid(path: &Path, t: &Tensor, cols: usize) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in t.data().chunks(cols) {
        w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// `.spec.csv`: one row per frequency bin, one column per frame.
pub fn read_spectrogram(path: &Path) -> Result<Tensor> {
    read_grid(path, BINS, FRAMES)
}

pub fn write_spectrogram(path: &Path, x: &Tensor) -> Result<()> {
    if x.len() != BINS * FRAMES {
        return Err(Error::shape("write_spectrogram", format!("{:?}", x.shape())));
    }
    write_grid(path, x, FRAMES)
}

fn read_pairs(path: &Path, value_header: &str) -> Result<Vec<String>> {
    let mut r = reader(path, true)?;
    let headers = r.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "frame" || &headers[1] != value_header {
        return Err(parse_err(path, format!("expected header 'frame,{value_header}'")));
    }
    let mut values = vec![None; FRAMES];
    for rec in r.records() {
        let rec = rec?;
        let f: usize = rec[0].parse().map_err(|_| parse_err(path, format!("bad frame '{}'", &rec[0])))?;
        if f >= FRAMES || values[f].is_some() {
            return Err(parse_err(path, format!("frame {f} out of range or repeated")));
        }
        values[f] = Some(rec[1].to_string());
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| parse_err(path, format!("frame {i} missing"))))
        .collect()
}

fn write_pairs(path: &Path, value_header: &str, values: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", value_header])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn mask_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.display().to_string();
    (PathBuf::from(format!("{s}.gen_mask.csv")), PathBuf::from(format!("{s}.ref_mask.csv")))
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let t = read_grid(path, BINS, FRAMES)?;
    t.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(parse_err(path, format!("mask value {v} is not 0 or 1"))),
        })
        .collect()
}

fn write_mask(path: &Path, m: &[bool]) -> Result<()> {
    let t = Tensor::new(&[BINS, FRAMES], m.iter().map(|&b| b as u8 as f64).collect())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in t.data().chunks(FRAMES) {
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a target file for `task`.
///
/// Formats: intensity `frame,db`; melody `frame,class`; structure a headerless
/// 32x32 grid; inpaint/outpaint a reference spectrogram, with optional
/// `<file>.gen_mask.csv` and `<file>.ref_mask.csv` overriding the default
/// masks; embed one value per line.
pub fn read_target(task: Task, path: &Path) -> Result<ControlTarget> {
    let target = match task {
        Task::Intensity => {
            let v = read_pairs(path, "db")?
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| parse_err(path, e.to_string())))
                .collect::<Result<_>>()?;
            ControlTarget::Intensity(v)
        }
        Task::Melody => {
            let v = read_pairs(path, "class")?
                .iter()
                .map(|s| s.parse::<u8>().map_err(|e| parse_err(path, e.to_string())))
                .collect::<Result<_>>()?;
            ControlTarget::Melody(v)
        }
        Task::Structure => ControlTarget::Structure(read_grid(path, FRAMES, FRAMES)?),
        Task::Inpaint | Task::Outpaint => {
            let reference = read_spectrogram(path)?;
            let (gp, rp) = mask_paths(path);
            let r = if gp.exists() && rp.exists() {
                MaskedReference::new(reference, read_mask(&gp)?, read_mask(&rp)?, 1)?
            } else if task == Task::Inpaint {
                MaskedReference::inpaint(reference)?
            } else {
                MaskedReference::outpaint(reference)?
            };
            if task == Task::Inpaint {
                ControlTarget::Inpaint(r)
            } else {
                ControlTarget::Outpaint(r)
            }
        }
        Task::Embed => {
            let text = fs::read_to_string(path)?;
            let v = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| l.parse::<f64>().map_err(|e| parse_err(path, e.to_string())))
                .collect::<Result<_>>()?;
            ControlTarget::Embed(v)
        }
    };
    target.validate().map_err(|e| parse_err(path, e.to_string()))?;
    Ok(target)
}

pub fn write_target(path: &Path, target: &ControlTarget) -> Result<()> {
    match target {
        ControlTarget::Intensity(v) => {
            write_pairs(path, "db", &v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>())
        }
        ControlTarget::Melody(v) => {
            write_pairs(path, "class", &v.iter().map(|x| x.to_string()).collect::<Vec<_>>())
        }
        ControlTarget::Structure(s) => write_grid(path, s, FRAMES),
        ControlTarget::Inpaint(r) | ControlTarget::Outpaint(r) => {
            write_spectrogram(path, &r.reference)?;
            let (gp, rp) = mask_paths(path);
            write_mask(&gp, &r.gen_mask)?;
            write_mask(&rp, &r.ref_mask)
        }
        ControlTarget::Embed(e) => {
            let text: String = e.iter().map(|v| format!("{v:.17e}\n")).collect();
            fs::write(path, text)?;
            Ok(())
        }
    }
}
