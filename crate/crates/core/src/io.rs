//! On-disk formats: cycle CSV, label CSV, and feature CSV with a JSON
//! sidecar describing the voltage grid and the domain physics.
//!
//! Floats are written in shortest round-trip form, so reading back a written
//! file reproduces the same values bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ecm::{CycleRecord, LabelRecord};
use crate::error::{Error, Result};
use crate::features::{QdLinearFeature, VoltageGrid};
use crate::loss::PhysicsContext;

pub const CYCLE_COLUMNS: [&str; 8] = ["cell_id", "cycle", "idx", "t_s", "voltage_v", "current_a", "temp_c", "q_ah"];
pub const LABEL_COLUMNS: [&str; 3] = ["cell_id", "cycle", "soh_pct"];
const FEATURE_META: [&str; 5] = ["cell_id", "cycle", "current_a", "temp_c", "t_obs"];

/// Grid and physics description stored next to a feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub v_lower: f64,
    pub v_upper: f64,
    pub n_points: usize,
    /// Nominal capacity (Ah) used to normalize capacities for the model.
    pub c_nom: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physics: Option<PhysicsContext>,
}

impl FeatureSidecar {
    pub fn grid(&self) -> Result<VoltageGrid> {
        VoltageGrid::new(self.v_lower, self.v_upper, self.n_points)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub sidecar: FeatureSidecar,
    pub features: Vec<QdLinearFeature>,
    pub labels: Vec<LabelRecord>,
}

impl FeatureDataset {
    /// Label of every feature, matched on `(cell_id, cycle)`.
    pub fn label_lookup(&self) -> HashMap<(usize, usize), f64> {
        self.labels.iter().map(|l| ((l.cell_id, l.cycle), l.soh_pct)).collect()
    }
}

/// `features.csv` → `features.json`.
pub fn sidecar_path(features_path: &Path) -> PathBuf {
    features_path.with_extension("json")
}

/// `features.csv` → `features.labels.csv`.
pub fn labels_path(features_path: &Path) -> PathBuf {
    features_path.with_extension("labels.csv")
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_cycles<W: Write>(out: W, cycles: &[CycleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CYCLE_COLUMNS)?;
    for c in cycles {
        for i in 0..c.len() {
            w.write_record([
                c.cell_id.to_string(),
                c.cycle.to_string(),
                i.to_string(),
                fmt(c.t_s[i]),
                fmt(c.voltage_v[i]),
                fmt(c.current_a[i]),
                fmt(c.temp_c[i]),
                fmt(c.q_ah[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cycles_csv(path: &Path, cycles: &[CycleRecord]) -> Result<()> {
    write_cycles(BufWriter::new(File::create(path)?), cycles)
}

pub fn write_labels<W: Write>(out: W, labels: &[LabelRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LABEL_COLUMNS)?;
    for l in labels {
        w.write_record([l.cell_id.to_string(), l.cycle.to_string(), fmt(l.soh_pct)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels_csv(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    write_labels(BufWriter::new(File::create(path)?), labels)
}

/// Header-indexed access to the rows of one CSV source.
struct Table<R: Read> {
    name: String,
    reader: csv::Reader<R>,
    columns: HashMap<String, usize>,
}

struct Row<'a> {
    file: &'a str,
    line: usize,
    record: csv::StringRecord,
    columns: &'a HashMap<String, usize>,
}

impl<R: Read> Table<R> {
    /// `None` for a completely empty source.
    fn open(name: &str, source: R, required: &[&str]) -> Result<Option<Self>> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(source);
        let mut header = csv::StringRecord::new();
        if !reader.read_record(&mut header)? {
            return Ok(None);
        }
        let columns: HashMap<String, usize> = header.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(Error::Parse {
                    file: name.to_string(),
                    line: 1,
                    msg: format!("missing column `{col}`"),
                });
            }
        }
        Ok(Some(Self {
            name: name.to_string(),
            reader,
            columns,
        }))
    }

    fn for_each(&mut self, mut f: impl FnMut(&Row<'_>) -> Result<()>) -> Result<()> {
        let mut record = csv::StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| Error::Parse {
                file: self.name.clone(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            if !more {
                return Ok(());
            }
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            let row = Row {
                file: &self.name,
                line: record.position().map_or(0, |p| p.line() as usize),
                record: record.clone(),
                columns: &self.columns,
            };
            f(&row)?;
        }
    }
}

impl Row<'_> {
    fn err(&self, msg: String) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            line: self.line,
            msg,
        }
    }

    fn raw(&self, col: &str) -> Result<Option<&str>> {
        let i = *self
            .columns
            .get(col)
            .ok_or_else(|| self.err(format!("missing column `{col}`")))?;
        Ok(self.record.get(i).filter(|s| !s.is_empty()))
    }

    fn field(&self, col: &str) -> Result<&str> {
        self.raw(col)?
            .ok_or_else(|| self.err(format!("missing value in column `{col}`")))
    }

    fn f64(&self, col: &str) -> Result<f64> {
        let s = self.field(col)?;
        s.parse()
            .map_err(|_| self.err(format!("column `{col}`: `{s}` is not a number")))
    }

    fn opt_f64(&self, col: &str) -> Result<Option<f64>> {
        match self.raw(col)? {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("column `{col}`: `{s}` is not a number"))),
        }
    }

    fn usize(&self, col: &str) -> Result<usize> {
        let s = self.field(col)?;
        s.parse()
            .map_err(|_| self.err(format!("column `{col}`: `{s}` is not a non-negative integer")))
    }
}

fn display_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_cycles<R: Read>(name: &str, source: R) -> Result<Vec<CycleRecord>> {
    let Some(mut table) = Table::open(name, source, &CYCLE_COLUMNS)? else {
        return Ok(Vec::new());
    };
    let mut cycles: Vec<CycleRecord> = Vec::new();
    table.for_each(|row| {
        let (cell_id, cycle, idx) = (row.usize("cell_id")?, row.usize("cycle")?, row.usize("idx")?);
        let t = row.f64("t_s")?;
        let v = row.f64("voltage_v")?;
        let i = row.f64("current_a")?;
        let temp = row.f64("temp_c")?;
        let q = row.f64("q_ah")?;
        let same = cycles.last().is_some_and(|c| c.cell_id == cell_id && c.cycle == cycle);
        if !same {
            cycles.push(CycleRecord {
                cell_id,
                cycle,
                ..Default::default()
            });
        }
        let c = cycles.last_mut().unwrap();
        if idx != c.len() {
            return Err(row.err(format!("sample index {idx} out of sequence (expected {})", c.len())));
        }
        if let Some(&prev) = c.t_s.last() {
            if !(t > prev) {
                return Err(row.err(format!("non-monotone time: {t} after {prev}")));
            }
        }
        c.t_s.push(t);
        c.voltage_v.push(v);
        c.current_a.push(i);
        c.temp_c.push(temp);
        c.q_ah.push(q);
        Ok(())
    })?;
    Ok(cycles)
}

pub fn read_cycles_csv(path: &Path) -> Result<Vec<CycleRecord>> {
    read_cycles(&display_name(path), BufReader::new(File::open(path)?))
}

pub fn read_labels<R: Read>(name: &str, source: R) -> Result<Vec<LabelRecord>> {
    let Some(mut table) = Table::open(name, source, &LABEL_COLUMNS)? else {
        return Ok(Vec::new());
    };
    let mut labels = Vec::new();
    table.for_each(|row| {
        labels.push(LabelRecord {
            cell_id: row.usize("cell_id")?,
            cycle: row.usize("cycle")?,
            soh_pct: row.f64("soh_pct")?,
        });
        Ok(())
    })?;
    Ok(labels)
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRecord>> {
    read_labels(&display_name(path), BufReader::new(File::open(path)?))
}

fn feature_header(n_points: usize) -> Vec<String> {
    FEATURE_META
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_points).map(|j| format!("v{j}")))
        .collect()
}

pub fn write_feature_rows<W: Write>(out: W, n_points: usize, features: &[QdLinearFeature]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(feature_header(n_points))?;
    for f in features {
        if f.len() != n_points {
            return Err(Error::Feature(format!(
                "cell {} cycle {}: {} points on a {n_points}-point grid",
                f.cell_id,
                f.cycle,
                f.len()
            )));
        }
        f.validate()?;
        let t_obs = f.n_observed();
        let mut rec = vec![
            f.cell_id.to_string(),
            f.cycle.to_string(),
            fmt(f.current_a),
            fmt(f.temp_c),
            t_obs.to_string(),
        ];
        rec.extend(
            f.values
                .iter()
                .enumerate()
                .map(|(j, &v)| if j < t_obs { fmt(v) } else { String::new() }),
        );
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_rows<R: Read>(name: &str, source: R, n_points: usize) -> Result<Vec<QdLinearFeature>> {
    let header = feature_header(n_points);
    let required: Vec<&str> = header.iter().map(String::as_str).collect();
    let Some(mut table) = Table::open(name, source, &required)? else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    table.for_each(|row| {
        let t_obs = row.usize("t_obs")?;
        if t_obs > n_points {
            return Err(row.err(format!("t_obs {t_obs} exceeds the {n_points}-point grid")));
        }
        let mut values = Vec::with_capacity(n_points);
        for (j, col) in header[FEATURE_META.len()..].iter().enumerate() {
            let v = if j < t_obs { row.f64(col)? } else { row.opt_f64(col)?.unwrap_or(f64::NAN) };
            values.push(v);
        }
        let f = QdLinearFeature {
            cell_id: row.usize("cell_id")?,
            cycle: row.usize("cycle")?,
            values,
            obs_mask: (0..n_points).map(|j| j < t_obs).collect(),
            current_a: row.f64("current_a")?,
            temp_c: row.f64("temp_c")?,
        };
        f.validate().map_err(|e| row.err(e.to_string()))?;
        out.push(f);
        Ok(())
    })?;
    Ok(out)
}

/// Writes the feature CSV, its JSON sidecar and, when present, the labels.
pub fn write_features(path: &Path, dataset: &FeatureDataset) -> Result<()> {
    dataset.sidecar.grid()?;
    write_feature_rows(BufWriter::new(File::create(path)?), dataset.sidecar.n_points, &dataset.features)?;
    let mut side = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut side, &dataset.sidecar)?;
    side.write_all(b"\n")?;
    side.flush()?;
    if !dataset.labels.is_empty() {
        write_labels_csv(&labels_path(path), &dataset.labels)?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureDataset> {
    let side = sidecar_path(path);
    let sidecar: FeatureSidecar = serde_json::from_reader(BufReader::new(File::open(&side).map_err(|e| {
        Error::Config(format!("cannot open sidecar {}: {e}", side.display()))
    })?))?;
    sidecar.grid()?;
    let features = read_feature_rows(&display_name(path), BufReader::new(File::open(path)?), sidecar.n_points)?;
    let lp = labels_path(path);
    let labels = if lp.exists() { read_labels_csv(&lp)? } else { Vec::new() };
    Ok(FeatureDataset {
        sidecar,
        features,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_voltage_column_is_named() {
        let text = "cell_id,cycle,idx,t_s,current_a,temp_c,q_ah\n0,0,0,0,1,25,0\n";
        let err = read_cycles("c.csv", text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("voltage_v") && err.contains("c.csv:1"), "{err}");
    }

    #[test]
    fn absent_voltage_field_reports_line() {
        let text = "cell_id,cycle,idx,t_s,voltage_v,current_a,temp_c,q_ah\n0,0,0,0,3.0,1,25,0\n0,0,1,1,,1,25,0.1\n";
        let err = read_cycles("c.csv", text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("voltage_v") && err.contains("c.csv:3"), "{err}");
    }

    #[test]
    fn non_numeric_and_non_monotone_rejected() {
        let bad = "cell_id,cycle,idx,t_s,voltage_v,current_a,temp_c,q_ah\n0,0,0,0,abc,1,25,0\n";
        assert!(read_cycles("c.csv", bad.as_bytes()).unwrap_err().to_string().contains("not a number"));
        let back = "cell_id,cycle,idx,t_s,voltage_v,current_a,temp_c,q_ah\n0,0,0,5,3,1,25,0\n0,0,1,5,3.1,1,25,0\n";
        let err = read_cycles("c.csv", back.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("non-monotone time") && err.contains(":3"), "{err}");
    }

    #[test]
    fn empty_sources_are_empty_datasets() {
        assert!(read_cycles("c.csv", "".as_bytes()).unwrap().is_empty());
        assert!(read_labels("l.csv", "".as_bytes()).unwrap().is_empty());
        assert!(read_feature_rows("f.csv", "".as_bytes(), 8).unwrap().is_empty());
        let header_only = CYCLE_COLUMNS.join(",") + "\n";
        assert!(read_cycles("c.csv", header_only.as_bytes()).unwrap().is_empty());
    }
}
