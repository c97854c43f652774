//! CSV and JSON interchange.
//!
//! Sample files have one row per record with header-named columns:
//! `id, z1..zp, D, X, Dtilde, Xtilde, entry_offset, stratum, psu, group, weight`.
//! `D`/`X` may be missing or empty (no incidence observed). `entry_offset`,
//! `stratum`, `psu`, `group` and `weight` are optional columns with defaults
//! 0, none, none, `all` and 1. Floats are written in shortest round-trip form,
//! so a write followed by a read reproduces every value exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{BaselineHazard, EventTime, RegistrySummary, Source, SurvivalRecord, WeightedSample};
use crate::error::{Error, Result};
use crate::imputation::ImputationAudit;

pub const DEFAULT_GROUP: &str = "all";

/// A parsed sample plus any non-fatal notices about the input.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: WeightedSample,
    pub warnings: Vec<String>,
}

struct Columns {
    id: usize,
    z: Vec<usize>,
    d: Option<usize>,
    x: Option<usize>,
    dtilde: usize,
    xtilde: usize,
    entry_offset: Option<usize>,
    stratum: Option<usize>,
    psu: Option<usize>,
    group: Option<usize>,
    weight: Option<usize>,
}

fn schema(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let need = |name: &str| find(name).ok_or_else(|| schema(0, name, "missing required column"));
        let mut z = Vec::new();
        while let Some(i) = find(&format!("z{}", z.len() + 1)) {
            z.push(i);
        }
        if z.is_empty() {
            return Err(schema(0, "z1", "no covariate columns"));
        }
        for h in header.iter() {
            let h = h.trim();
            if let Some(k) = h.strip_prefix('z').and_then(|s| s.parse::<usize>().ok()) {
                if k == 0 || k > z.len() {
                    return Err(schema(0, h, "covariate columns must be numbered z1..zp without gaps"));
                }
            }
        }
        let d = find("D");
        let x = find("X");
        if d.is_some() != x.is_some() {
            return Err(schema(0, if d.is_some() { "X" } else { "D" }, "D and X must appear together"));
        }
        Ok(Self {
            id: need("id")?,
            z,
            d,
            x,
            dtilde: need("Dtilde")?,
            xtilde: need("Xtilde")?,
            entry_offset: find("entry_offset"),
            stratum: find("stratum"),
            psu: find("psu"),
            group: find("group"),
            weight: find("weight"),
        })
    }
}

fn field(rec: &csv::StringRecord, i: usize) -> &str {
    rec.get(i).unwrap_or("").trim()
}

fn number(rec: &csv::StringRecord, i: usize, row: usize, column: &str) -> Result<f64> {
    let s = field(rec, i);
    let v: f64 = s
        .parse()
        .map_err(|_| schema(row, column, format!("'{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(schema(row, column, "value must be finite"));
    }
    Ok(v)
}

fn indicator(rec: &csv::StringRecord, i: usize, row: usize, column: &str) -> Result<bool> {
    match field(rec, i) {
        "0" => Ok(false),
        "1" => Ok(true),
        s => Err(schema(row, column, format!("indicator must be 0 or 1, got '{s}'"))),
    }
}

fn event_time(rec: &csv::StringRecord, d: usize, x: usize, row: usize, names: (&str, &str)) -> Result<EventTime> {
    let event = indicator(rec, d, row, names.0)?;
    let time = number(rec, x, row, names.1)?;
    if time < 0.0 {
        return Err(schema(row, names.1, "time must be nonnegative"));
    }
    Ok(EventTime::new(event, time))
}

fn optional(rec: &csv::StringRecord, i: Option<usize>) -> Option<String> {
    i.map(|i| field(rec, i)).filter(|s| !s.is_empty()).map(str::to_string)
}

/// Parses a sample file. For a survey, incidence columns are ignored with a
/// warning. Rows are numbered from 1 (the first data line) in schema errors;
/// row 0 refers to the header.
pub fn read_sample<R: Read>(reader: R, source: Source) -> Result<LoadedSample> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = Columns::from_header(rdr.headers()?)?;
    let mut warnings = Vec::new();
    let use_incidence = match (source, cols.d) {
        (Source::Survey, Some(_)) => {
            warnings.push("survey file has incidence columns D/X; they are ignored".to_string());
            false
        }
        (_, d) => d.is_some(),
    };
    let mut records = Vec::new();
    let mut weights = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let id = field(&rec, cols.id);
        if id.is_empty() {
            return Err(schema(row, "id", "empty id"));
        }
        let z = cols
            .z
            .iter()
            .enumerate()
            .map(|(j, &i)| number(&rec, i, row, &format!("z{}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        let incidence = match (use_incidence, cols.d, cols.x) {
            (true, Some(d), Some(x)) => {
                match (field(&rec, d).is_empty(), field(&rec, x).is_empty()) {
                    (true, true) => None,
                    (false, false) => Some(event_time(&rec, d, x, row, ("D", "X"))?),
                    (true, false) => return Err(schema(row, "D", "X given without D")),
                    (false, true) => return Err(schema(row, "X", "D given without X")),
                }
            }
            _ => None,
        };
        let mortality = event_time(&rec, cols.dtilde, cols.xtilde, row, ("Dtilde", "Xtilde"))?;
        if let Some(inc) = incidence {
            if mortality.event && !inc.event {
                return Err(schema(row, "D", "disease death without recorded incidence"));
            }
            if mortality.event && inc.time > mortality.time + 1e-9 {
                return Err(schema(row, "X", "incidence after disease-specific death"));
            }
        }
        let entry_offset = match cols.entry_offset {
            Some(i) if !field(&rec, i).is_empty() => {
                let v = number(&rec, i, row, "entry_offset")?;
                if v < 0.0 {
                    return Err(schema(row, "entry_offset", "must be nonnegative"));
                }
                v
            }
            _ => 0.0,
        };
        let weight = match cols.weight {
            Some(i) if !field(&rec, i).is_empty() => {
                let v = number(&rec, i, row, "weight")?;
                if v <= 0.0 {
                    return Err(schema(row, "weight", "weight must be positive"));
                }
                v
            }
            _ => 1.0,
        };
        records.push(SurvivalRecord {
            id: id.to_string(),
            z,
            incidence,
            mortality,
            imputed: None,
            entry_offset,
            stratum: optional(&rec, cols.stratum),
            psu: optional(&rec, cols.psu),
            group: optional(&rec, cols.group).unwrap_or_else(|| DEFAULT_GROUP.to_string()),
        });
        weights.push(weight);
    }
    if records.is_empty() {
        return Err(schema(1, "id", "file has no records"));
    }
    let sample = WeightedSample::new(records, weights, source)?;
    Ok(LoadedSample { sample, warnings })
}

pub fn read_sample_file(path: impl AsRef<Path>, source: Source) -> Result<LoadedSample> {
    read_sample(File::open(path)?, source)
}

/// Writes a sample in the same schema `read_sample` accepts. Incidence
/// columns are written only if some record has incidence.
pub fn write_sample<W: Write>(writer: W, sample: &WeightedSample) -> Result<()> {
    let p = sample.dim();
    let with_incidence = sample.records().iter().any(|r| r.incidence.is_some());
    let mut header = vec!["id".to_string()];
    header.extend((1..=p).map(|j| format!("z{j}")));
    if with_incidence {
        header.extend(["D".into(), "X".into()]);
    }
    header.extend(
        ["Dtilde", "Xtilde", "entry_offset", "stratum", "psu", "group", "weight"].map(String::from),
    );
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    for (r, wt) in sample.records().iter().zip(sample.weights()) {
        let mut row = vec![r.id.clone()];
        row.extend(r.z.iter().map(f64::to_string));
        if with_incidence {
            match r.incidence {
                Some(e) => row.extend([flag(e.event), e.time.to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        row.push(flag(r.mortality.event));
        row.push(r.mortality.time.to_string());
        row.push(r.entry_offset.to_string());
        row.push(r.stratum.clone().unwrap_or_default());
        row.push(r.psu.clone().unwrap_or_default());
        row.push(r.group.clone());
        row.push(wt.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sample_file(path: impl AsRef<Path>, sample: &WeightedSample) -> Result<()> {
    write_sample(File::create(path)?, sample)
}

pub fn read_registry_file(path: impl AsRef<Path>) -> Result<RegistrySummary> {
    let text = std::fs::read_to_string(path)?;
    RegistrySummary::from_json(&text)
}

pub fn write_registry_file(path: impl AsRef<Path>, registry: &RegistrySummary) -> Result<()> {
    let text = serde_json::to_string_pretty(registry)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Long-format `label,t,cumulative_hazard` rows, one block per curve.
pub fn write_hazards<'a, W: Write>(
    writer: W,
    curves: impl IntoIterator<Item = (&'a str, &'a BaselineHazard)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "t", "cumulative_hazard"])?;
    for (label, h) in curves {
        for (t, v) in h.times().iter().zip(h.cumulative()) {
            w.write_record([label, &t.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_imputation_audit<W: Write>(writer: W, audit: &[ImputationAudit]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for a in audit {
        w.serialize(a)?;
    }
    w.flush()?;
    Ok(())
}
