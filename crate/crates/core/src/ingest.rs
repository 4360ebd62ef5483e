//! Raw correlation-graph input, dichotomization and the threshold sweep.
//!
//! Two on-disk formats are supported for raw graphs:
//!
//! * long CSV with header `subject,visit,node_a,node_b,value` (1-based nodes,
//!   one row per node pair and record; either orientation of a pair may be
//!   given, diagonal rows are ignored);
//! * matrix JSON: `{"n_nodes": N, "records": [{"subject": s, "visit": v, "matrix": [[...]]}]}`.
//!
//! Binary graph datasets use the long CSV layout with values restricted to 0/1.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcem::{self, FitConfig};
use crate::model::{BinaryGraphDataset, GraphShape, SubjectGraphs};
use crate::parallel;

/// Symmetry tolerance for raw correlation matrices.
pub const SYMMETRY_TOL: f64 = 1e-8;

const CSV_HEADER: [&str; 5] = ["subject", "visit", "node_a", "node_b", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub subject: u64,
    pub visit: u64,
    pub matrix: DMatrix<f64>,
}

/// Real-valued graphs (typically correlation matrices), one per subject visit.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraphDataset {
    shape: GraphShape,
    records: Vec<RawRecord>,
}

impl RawGraphDataset {
    /// Validates dimensions, symmetry and uniqueness; records are kept sorted
    /// by `(subject, visit)`.
    pub fn new(shape: GraphShape, mut records: Vec<RawRecord>) -> Result<Self> {
        let n = shape.n_nodes();
        for r in &records {
            let loc = format!("record (subject {}, visit {})", r.subject, r.visit);
            if r.matrix.nrows() != n || r.matrix.ncols() != n {
                return Err(Error::parse(
                    loc,
                    format!(
                        "matrix is {}x{}, expected {n}x{n}",
                        r.matrix.nrows(),
                        r.matrix.ncols()
                    ),
                ));
            }
            for (a, b) in shape.pairs() {
                let (u, l) = (r.matrix[(a, b)], r.matrix[(b, a)]);
                if !u.is_finite() || !l.is_finite() {
                    return Err(Error::parse(
                        loc,
                        format!("non-finite value at ({}, {})", a + 1, b + 1),
                    ));
                }
                if (u - l).abs() > SYMMETRY_TOL {
                    return Err(Error::parse(
                        loc,
                        format!(
                            "matrix is not symmetric at ({}, {}): {u} vs {l}",
                            a + 1,
                            b + 1
                        ),
                    ));
                }
            }
        }
        records.sort_by_key(|r| (r.subject, r.visit));
        if let Some(w) = records
            .windows(2)
            .find(|w| (w[0].subject, w[0].visit) == (w[1].subject, w[1].visit))
        {
            return Err(Error::parse(
                format!("record (subject {}, visit {})", w[0].subject, w[0].visit),
                "duplicate subject/visit pair",
            ));
        }
        Ok(RawGraphDataset { shape, records })
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn records(&self) -> &[RawRecord] {
        &self.records
    }

    pub fn n_subjects(&self) -> usize {
        let mut n = 0;
        let mut last = None;
        for r in &self.records {
            if last != Some(r.subject) {
                n += 1;
                last = Some(r.subject);
            }
        }
        n
    }

    /// Smallest and largest off-diagonal value.
    pub fn value_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &self.records {
            for (a, b) in self.shape.pairs() {
                lo = lo.min(r.matrix[(a, b)]);
                hi = hi.max(r.matrix[(a, b)]);
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RawFormat {
    LongCsv,
    MatrixJson,
}

impl RawFormat {
    /// `.json` selects matrix JSON, anything else long CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => RawFormat::MatrixJson,
            _ => RawFormat::LongCsv,
        }
    }
}

pub fn load_raw(path: &Path, format: Option<RawFormat>) -> Result<RawGraphDataset> {
    let file = BufReader::new(File::open(path)?);
    match format.unwrap_or_else(|| RawFormat::from_path(path)) {
        RawFormat::LongCsv => read_long_csv(file),
        RawFormat::MatrixJson => read_matrix_json(file),
    }
}

pub fn save_raw(raw: &RawGraphDataset, path: &Path, format: Option<RawFormat>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    match format.unwrap_or_else(|| RawFormat::from_path(path)) {
        RawFormat::LongCsv => write_long_csv(raw, &mut file)?,
        RawFormat::MatrixJson => write_matrix_json(raw, &mut file)?,
    }
    file.flush()?;
    Ok(())
}

struct LongRow {
    line: u64,
    subject: u64,
    visit: u64,
    a: usize,
    b: usize,
    value: f64,
}

fn read_long_rows<R: Read>(reader: R) -> Result<Vec<LongRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::parse(
            "line 1",
            format!(
                "expected header {}, found {}",
                CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let loc = || format!("line {line}");
        let field = |k: usize| rec.get(k).unwrap_or("");
        let int = |k: usize| -> Result<u64> {
            field(k).parse::<u64>().map_err(|_| {
                Error::parse(
                    loc(),
                    format!(
                        "{} must be a non-negative integer, got {:?}",
                        CSV_HEADER[k],
                        field(k)
                    ),
                )
            })
        };
        let subject = int(0)?;
        let visit = int(1)?;
        let a = int(2)? as usize;
        let b = int(3)? as usize;
        if a == 0 || b == 0 {
            return Err(Error::parse(loc(), "node ids are 1-based"));
        }
        let value = field(4)
            .parse::<f64>()
            .map_err(|_| Error::parse(loc(), format!("value {:?} is not a number", field(4))))?;
        rows.push(LongRow {
            line,
            subject,
            visit,
            a,
            b,
            value,
        });
    }
    if rows.is_empty() {
        return Err(Error::parse("input", "no data rows"));
    }
    Ok(rows)
}

/// Groups long rows into full symmetric matrices; `None` marks a missing pair.
fn assemble_long(rows: &[LongRow]) -> Result<(GraphShape, Vec<RawRecord>)> {
    let n = rows.iter().map(|r| r.a.max(r.b)).max().unwrap_or(0);
    let shape = GraphShape::new(n)
        .map_err(|_| Error::parse("input", format!("need at least two nodes, found {n}")))?;
    let mut grouped: BTreeMap<(u64, u64), DMatrix<Option<f64>>> = BTreeMap::new();
    for r in rows {
        let m = grouped
            .entry((r.subject, r.visit))
            .or_insert_with(|| DMatrix::from_element(n, n, None));
        if r.a == r.b {
            continue;
        }
        let (a, b) = (r.a - 1, r.b - 1);
        if let Some(prev) = m[(a, b)] {
            if prev.to_bits() != r.value.to_bits() && (prev - r.value).abs() > SYMMETRY_TOL {
                return Err(Error::parse(
                    format!("line {} (subject {}, visit {})", r.line, r.subject, r.visit),
                    format!(
                        "pair ({}, {}) given twice with different values: not symmetric",
                        r.a, r.b
                    ),
                ));
            }
            if r.a < r.b {
                m[(a, b)] = Some(r.value);
                m[(b, a)] = Some(r.value);
            }
            continue;
        }
        m[(a, b)] = Some(r.value);
        m[(b, a)] = Some(r.value);
    }
    let mut records = Vec::with_capacity(grouped.len());
    for ((subject, visit), m) in grouped {
        if let Some((a, b)) = shape.pairs().find(|&(a, b)| m[(a, b)].is_none()) {
            return Err(Error::parse(
                format!("record (subject {subject}, visit {visit})"),
                format!("missing node pair ({}, {})", a + 1, b + 1),
            ));
        }
        let matrix = DMatrix::from_fn(n, n, |a, b| if a == b { 1.0 } else { m[(a, b)].unwrap() });
        records.push(RawRecord {
            subject,
            visit,
            matrix,
        });
    }
    Ok((shape, records))
}

pub fn read_long_csv<R: Read>(reader: R) -> Result<RawGraphDataset> {
    let rows = read_long_rows(reader)?;
    let (shape, records) = assemble_long(&rows)?;
    RawGraphDataset::new(shape, records)
}

/// Writes the upper triangle of every record, one row per node pair.
pub fn write_long_csv<W: Write>(raw: &RawGraphDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in raw.records() {
        for (a, b) in raw.shape.pairs() {
            w.write_record(&[
                r.subject.to_string(),
                r.visit.to_string(),
                (a + 1).to_string(),
                (b + 1).to_string(),
                r.matrix[(a, b)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    subject: u64,
    visit: u64,
    matrix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct JsonFile {
    n_nodes: usize,
    records: Vec<JsonRecord>,
}

pub fn read_matrix_json<R: Read>(reader: R) -> Result<RawGraphDataset> {
    let file: JsonFile = serde_json::from_reader(reader)?;
    let shape =
        GraphShape::new(file.n_nodes).map_err(|e| Error::parse("n_nodes", e.to_string()))?;
    let n = shape.n_nodes();
    let mut records = Vec::with_capacity(file.records.len());
    for (k, r) in file.records.into_iter().enumerate() {
        let loc = format!("records[{k}] (subject {}, visit {})", r.subject, r.visit);
        if r.matrix.len() != n || r.matrix.iter().any(|row| row.len() != n) {
            return Err(Error::parse(loc, format!("matrix must be {n}x{n}")));
        }
        let matrix = DMatrix::from_fn(n, n, |a, b| r.matrix[a][b]);
        RawGraphDataset::new(
            shape,
            vec![RawRecord {
                subject: r.subject,
                visit: r.visit,
                matrix: matrix.clone(),
            }],
        )
        .map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(loc.clone(), message),
            other => other,
        })?;
        records.push(RawRecord {
            subject: r.subject,
            visit: r.visit,
            matrix,
        });
    }
    RawGraphDataset::new(shape, records)
}

pub fn write_matrix_json<W: Write>(raw: &RawGraphDataset, writer: W) -> Result<()> {
    let n = raw.shape.n_nodes();
    let file = JsonFile {
        n_nodes: n,
        records: raw
            .records
            .iter()
            .map(|r| JsonRecord {
                subject: r.subject,
                visit: r.visit,
                matrix: (0..n)
                    .map(|a| (0..n).map(|b| r.matrix[(a, b)]).collect())
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(writer, &file)?;
    Ok(())
}

/// Reads a 0/1 long CSV into a binary dataset; subjects and visits are
/// ordered by id.
pub fn read_binary_csv<R: Read>(reader: R) -> Result<BinaryGraphDataset> {
    let rows = read_long_rows(reader)?;
    if let Some(r) = rows.iter().find(|r| r.value != 0.0 && r.value != 1.0) {
        return Err(Error::parse(
            format!("line {}", r.line),
            format!("value {} is not 0 or 1", r.value),
        ));
    }
    let (shape, records) = assemble_long(&rows)?;
    let raw = RawGraphDataset::new(shape, records)?;
    Ok(dichotomize(&raw, 0.5))
}

pub fn load_binary(path: &Path) -> Result<BinaryGraphDataset> {
    read_binary_csv(BufReader::new(File::open(path)?))
}

/// Writes a binary dataset as 0/1 long CSV with 1-based subject and visit ids.
pub fn write_binary_csv<W: Write>(data: &BinaryGraphDataset, writer: W) -> Result<()> {
    let shape = data.shape();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for (i, s) in data.subjects().iter().enumerate() {
        for (j, v) in s.visits.iter().enumerate() {
            for ((a, b), &o) in shape.pairs().zip(v) {
                w.write_record(&[
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    (a + 1).to_string(),
                    (b + 1).to_string(),
                    u8::from(o).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `o = 1` iff the raw edge value is strictly greater than `t`.
pub fn dichotomize(raw: &RawGraphDataset, t: f64) -> BinaryGraphDataset {
    let shape = raw.shape;
    let mut subjects: Vec<SubjectGraphs> = Vec::new();
    let mut last = None;
    for r in &raw.records {
        let v: Vec<bool> = shape.pairs().map(|(a, b)| r.matrix[(a, b)] > t).collect();
        if last == Some(r.subject) {
            subjects.last_mut().expect("subject started").visits.push(v);
        } else {
            subjects.push(SubjectGraphs { visits: vec![v] });
            last = Some(r.subject);
        }
    }
    BinaryGraphDataset::new(shape, subjects).expect("raw dataset is well-formed")
}

/// Ascending grid `t_min, t_min + step, …` up to `t_max` inclusive.
///
/// Grid points are rounded to 10 decimals so that e.g. 0.35 is exactly the
/// double nearest 0.35.
pub fn threshold_grid(t_min: f64, t_max: f64, t_step: f64) -> Result<Vec<f64>> {
    if !(t_min.is_finite() && t_max.is_finite() && t_step.is_finite()) {
        return Err(Error::validation("thresholds must be finite"));
    }
    if !(t_min < t_max) {
        return Err(Error::validation(format!(
            "t_min ({t_min}) must be below t_max ({t_max})"
        )));
    }
    if !(t_step > 0.0) {
        return Err(Error::validation(format!(
            "t_step must be positive, got {t_step}"
        )));
    }
    let count = ((t_max - t_min) / t_step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| ((t_min + k as f64 * t_step) * 1e10).round() / 1e10)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub thresholds: Vec<f64>,
    /// `None` where the fit failed outright.
    pub giccs: Vec<Option<f64>>,
    pub converged: Vec<bool>,
    pub best_threshold: Option<f64>,
    pub best_gicc: Option<f64>,
}

impl SweepResult {
    fn from_points(thresholds: Vec<f64>, giccs: Vec<Option<f64>>, converged: Vec<bool>) -> Self {
        let mut best: Option<(f64, f64)> = None;
        for ((&t, g), &c) in thresholds.iter().zip(&giccs).zip(&converged) {
            if let (Some(g), true) = (g, c) {
                if best.is_none_or(|(_, bg)| *g > bg) {
                    best = Some((t, *g));
                }
            }
        }
        SweepResult {
            thresholds,
            giccs,
            converged,
            best_threshold: best.map(|b| b.0),
            best_gicc: best.map(|b| b.1),
        }
    }

    /// CSV with header `threshold,gicc,converged`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["threshold", "gicc", "converged"])?;
        for ((t, g), c) in self.thresholds.iter().zip(&self.giccs).zip(&self.converged) {
            w.write_record(&[
                t.to_string(),
                g.map(|g| g.to_string()).unwrap_or_default(),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits the GICC on the dichotomized data at every grid threshold.
///
/// Thresholds whose fit fails or does not converge are excluded from the
/// argmax; ties go to the smallest threshold.
pub fn threshold_sweep(
    raw: &RawGraphDataset,
    t_min: f64,
    t_max: f64,
    t_step: f64,
    config: &FitConfig,
) -> Result<SweepResult> {
    config.validate()?;
    let thresholds = threshold_grid(t_min, t_max, t_step)?;
    let fits = parallel::map_indexed(thresholds.len(), |k| {
        let data = dichotomize(raw, thresholds[k]);
        match mcem::fit(&data, config) {
            Ok(f) => (Some(f.gicc), f.converged),
            Err(e) => {
                log::warn!("fit at threshold {} failed: {e}", thresholds[k]);
                (None, false)
            }
        }
    });
    let (giccs, converged) = fits.into_iter().unzip();
    Ok(SweepResult::from_points(thresholds, giccs, converged))
}
