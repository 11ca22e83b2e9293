//! Individual-level inputs: sparse longitudinal exposure, genotype dosages and
//! the outcome, joined on `subject_id`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Measurements for one subject. Times are sorted; ties are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SubjectSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalExposure {
    t_min: f64,
    t_max: f64,
    subjects: Vec<SubjectSeries>,
}

impl LongitudinalExposure {
    /// Validates the window, finiteness, lengths and ordering of every subject.
    pub fn new(t_min: f64, t_max: f64, subjects: Vec<SubjectSeries>) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite()) || t_max <= t_min {
            return Err(Error::Data(format!(
                "observation window [{t_min}, {t_max}] is invalid"
            )));
        }
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate subject id {}", s.id)));
            }
            if s.times.is_empty() {
                return Err(Error::Data(format!("subject {} has no measurements", s.id)));
            }
            if s.times.len() != s.values.len() {
                return Err(Error::Data(format!(
                    "subject {}: {} times but {} values",
                    s.id,
                    s.times.len(),
                    s.values.len()
                )));
            }
            if s.times.iter().chain(&s.values).any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("subject {} has non-finite entries", s.id)));
            }
            if s.times.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Data(format!("subject {}: times are not sorted", s.id)));
            }
            if s.times[0] < t_min || s.times[s.times.len() - 1] > t_max {
                return Err(Error::Data(format!(
                    "subject {}: measurement outside [{t_min}, {t_max}]",
                    s.id
                )));
            }
        }
        Ok(Self {
            t_min,
            t_max,
            subjects,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn subjects(&self) -> &[SubjectSeries] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    /// Same data with `c` added to every measurement.
    pub fn shifted(&self, c: f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectSeries {
                id: s.id.clone(),
                times: s.times.clone(),
                values: s.values.iter().map(|v| v + c).collect(),
            })
            .collect();
        Self {
            t_min: self.t_min,
            t_max: self.t_max,
            subjects,
        }
    }

    fn retain_ids(&mut self, keep: &HashSet<&str>) {
        self.subjects.retain(|s| keep.contains(s.id.as_str()));
    }

    fn reorder(&mut self, order: &[String]) {
        let mut by_id: HashMap<String, SubjectSeries> =
            self.subjects.drain(..).map(|s| (s.id.clone(), s)).collect();
        self.subjects = order.iter().filter_map(|id| by_id.remove(id)).collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    subject_ids: Vec<String>,
    variant_ids: Vec<String>,
    dosages: DMatrix<f64>,
}

impl GenotypeMatrix {
    /// Rejects non-finite dosages and columns with zero sample variance.
    pub fn new(
        subject_ids: Vec<String>,
        variant_ids: Vec<String>,
        dosages: DMatrix<f64>,
    ) -> Result<Self> {
        if dosages.nrows() != subject_ids.len() || dosages.ncols() != variant_ids.len() {
            return Err(Error::Data(format!(
                "genotype matrix is {}x{} but has {} subjects and {} variants",
                dosages.nrows(),
                dosages.ncols(),
                subject_ids.len(),
                variant_ids.len()
            )));
        }
        if variant_ids.is_empty() {
            return Err(Error::Data("genotype matrix has no variants".into()));
        }
        if dosages.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("genotype matrix has non-finite dosages".into()));
        }
        for (j, id) in variant_ids.iter().enumerate() {
            let col = dosages.column(j);
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(Error::Data(format!("variant {id} has zero variance")));
            }
        }
        Ok(Self {
            subject_ids,
            variant_ids,
            dosages,
        })
    }

    /// Skips the variance check; simulated cohorts can be tiny.
    pub(crate) fn from_parts_unchecked(
        subject_ids: Vec<String>,
        variant_ids: Vec<String>,
        dosages: DMatrix<f64>,
    ) -> Self {
        Self {
            subject_ids,
            variant_ids,
            dosages,
        }
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn variant_ids(&self) -> &[String] {
        &self.variant_ids
    }

    pub fn dosages(&self) -> &DMatrix<f64> {
        &self.dosages
    }

    pub fn n_subjects(&self) -> usize {
        self.dosages.nrows()
    }

    pub fn n_variants(&self) -> usize {
        self.dosages.ncols()
    }

    fn select_rows(&self, order: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .subject_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let rows: Vec<usize> = order.iter().map(|id| index[id.as_str()]).collect();
        let dosages = self.dosages.select_rows(rows.iter());
        Self::new(order.to_vec(), self.variant_ids.clone(), dosages)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeVector {
    subject_ids: Vec<String>,
    values: Vec<f64>,
    measurement_time: f64,
}

impl OutcomeVector {
    pub fn new(subject_ids: Vec<String>, values: Vec<f64>, measurement_time: f64) -> Result<Self> {
        if subject_ids.len() != values.len() {
            return Err(Error::Data(format!(
                "{} outcome ids but {} values",
                subject_ids.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("outcome has non-finite values".into()));
        }
        Ok(Self {
            subject_ids,
            values,
            measurement_time,
        })
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn measurement_time(&self) -> f64 {
        self.measurement_time
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn select(&self, order: &[String]) -> Self {
        let index: HashMap<&str, usize> = self
            .subject_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let values = order.iter().map(|id| self.values[index[id.as_str()]]).collect();
        Self {
            subject_ids: order.to_vec(),
            values,
            measurement_time: self.measurement_time,
        }
    }
}

/// The three inputs aligned on a common subject order.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualData {
    pub exposure: LongitudinalExposure,
    pub genotype: GenotypeMatrix,
    pub outcome: OutcomeVector,
}

impl IndividualData {
    /// Inner join on subject id. The resulting order follows the genotype table.
    pub fn align(
        mut exposure: LongitudinalExposure,
        genotype: GenotypeMatrix,
        outcome: OutcomeVector,
    ) -> Result<Self> {
        let in_exposure: HashSet<&str> = exposure.subjects.iter().map(|s| s.id.as_str()).collect();
        let in_outcome: HashSet<&str> = outcome.subject_ids.iter().map(|s| s.as_str()).collect();
        let order: Vec<String> = genotype
            .subject_ids
            .iter()
            .filter(|id| in_exposure.contains(id.as_str()) && in_outcome.contains(id.as_str()))
            .cloned()
            .collect();
        if order.is_empty() {
            return Err(Error::Data(
                "no subject is present in all of exposure, genotype and outcome".into(),
            ));
        }
        let union: HashSet<&str> = in_exposure
            .iter()
            .copied()
            .chain(in_outcome.iter().copied())
            .chain(genotype.subject_ids.iter().map(|s| s.as_str()))
            .collect();
        let dropped = union.len() - order.len();
        if dropped > 0 {
            warn!("dropped {dropped} subjects missing from at least one input");
        }
        let keep: HashSet<&str> = order.iter().map(|s| s.as_str()).collect();
        exposure.retain_ids(&keep);
        exposure.reorder(&order);
        let genotype = genotype.select_rows(&order)?;
        let outcome = outcome.select(&order);
        Ok(Self {
            exposure,
            genotype,
            outcome,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.genotype.n_subjects()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::parse(path, line, err.to_string())
}

fn check_header(path: &Path, reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    let got: Vec<&str> = header.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_field(path: &Path, line: u64, column: &str, raw: &str) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::parse(path, line, format!("missing value in column {column}")));
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::parse(path, line, format!("cannot parse {raw:?} in column {column}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value in column {column}")));
    }
    Ok(v)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Reads `subject_id,time,value`. Subjects keep first-appearance order and
/// their measurements are stably sorted by time. With a `window`, measurements
/// outside it are discarded and subjects left without measurements dropped.
pub fn read_exposure_csv(path: &Path, window: Option<(f64, f64)>) -> Result<LongitudinalExposure> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &["subject_id", "time", "value"])?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    let mut n_outside = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        let id = record.get(0).unwrap_or("");
        if id.is_empty() {
            return Err(Error::parse(path, line, "missing subject_id"));
        }
        let t = parse_field(path, line, "time", record.get(1).unwrap_or(""))?;
        let x = parse_field(path, line, "value", record.get(2).unwrap_or(""))?;
        if let Some((lo, hi)) = window {
            if t < lo || t > hi {
                n_outside += 1;
                continue;
            }
        }
        let entry = rows.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            Vec::new()
        });
        entry.push((t, x));
    }
    if order.is_empty() {
        return Err(Error::Data(format!("{}: no exposure measurements", path.display())));
    }
    if n_outside > 0 {
        info!("discarded {n_outside} exposure measurements outside the analysis window");
    }
    let subjects: Vec<SubjectSeries> = order
        .into_iter()
        .map(|id| {
            let mut obs = rows.remove(&id).unwrap_or_default();
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            SubjectSeries {
                id,
                times: obs.iter().map(|o| o.0).collect(),
                values: obs.iter().map(|o| o.1).collect(),
            }
        })
        .collect();
    let (t_min, t_max) = match window {
        Some(w) => w,
        None => subjects.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, s| {
            (acc.0.min(s.times[0]), acc.1.max(s.times[s.len() - 1]))
        }),
    };
    if t_max <= t_min {
        return Err(Error::Data(format!(
            "{}: all measurements share one timepoint",
            path.display()
        )));
    }
    LongitudinalExposure::new(t_min, t_max, subjects)
}

/// Reads `subject_id,<variant_1>,...,<variant_J>`.
pub fn read_genotype_csv(path: &Path) -> Result<GenotypeMatrix> {
    let mut reader = open_csv(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("subject_id") || header.len() < 2 {
        return Err(Error::parse(
            path,
            1,
            "expected header subject_id,<variant_1>,...,<variant_J>",
        ));
    }
    let variant_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n_var = variant_ids.len();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        let id = record.get(0).unwrap_or("");
        if id.is_empty() {
            return Err(Error::parse(path, line, "missing subject_id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(path, line, format!("duplicate subject_id {id}")));
        }
        for (j, vid) in variant_ids.iter().enumerate() {
            data.push(parse_field(path, line, vid, record.get(j + 1).unwrap_or(""))?);
        }
        ids.push(id.to_string());
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: no genotype rows", path.display())));
    }
    let dosages = DMatrix::from_row_slice(n, n_var, &data);
    GenotypeMatrix::new(ids, variant_ids, dosages)
}

/// Reads `subject_id,outcome`.
pub fn read_outcome_csv(path: &Path, measurement_time: f64) -> Result<OutcomeVector> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &["subject_id", "outcome"])?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        let id = record.get(0).unwrap_or("");
        if id.is_empty() {
            return Err(Error::parse(path, line, "missing subject_id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(path, line, format!("duplicate subject_id {id}")));
        }
        values.push(parse_field(path, line, "outcome", record.get(1).unwrap_or(""))?);
        ids.push(id.to_string());
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no outcome rows", path.display())));
    }
    OutcomeVector::new(ids, values, measurement_time)
}

/// Loads and aligns the three CSV inputs. The outcome is taken to be measured
/// at the end of the observation window.
pub fn load_individual_data(
    exposure_path: &Path,
    genotype_path: &Path,
    outcome_path: &Path,
    window: Option<(f64, f64)>,
) -> Result<IndividualData> {
    let exposure = read_exposure_csv(exposure_path, window)?;
    let genotype = read_genotype_csv(genotype_path)?;
    let outcome = read_outcome_csv(outcome_path, exposure.t_max())?;
    IndividualData::align(exposure, genotype, outcome)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

// `{}` on f64 prints the shortest representation that parses back exactly.
pub fn write_exposure_csv(path: &Path, exposure: &LongitudinalExposure) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "subject_id,time,value").map_err(io)?;
    for s in exposure.subjects() {
        for (t, x) in s.times.iter().zip(&s.values) {
            writeln!(w, "{},{},{}", s.id, t, x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_genotype_csv(path: &Path, genotype: &GenotypeMatrix) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "subject_id,{}", genotype.variant_ids().join(",")).map_err(io)?;
    let d = genotype.dosages();
    for (i, id) in genotype.subject_ids().iter().enumerate() {
        write!(w, "{id}").map_err(io)?;
        for j in 0..d.ncols() {
            write!(w, ",{}", d[(i, j)]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_outcome_csv(path: &Path, outcome: &OutcomeVector) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "subject_id,outcome").map_err(io)?;
    for (id, y) in outcome.subject_ids().iter().zip(outcome.values()) {
        writeln!(w, "{id},{y}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn create_output(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}

/// Subtracts each column's sample mean.
pub fn center_columns(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = matrix.clone();
    let n = matrix.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n;
        col.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

pub(crate) fn center_vector(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}
