//! On-disk formats.
//!
//! Volumes are a single JSON header line, a newline, then the raw
//! little-endian payload. Label volumes store class index + 1 so that 0 is
//! never a valid label on disk. Tables and traces are CSV, configuration and
//! hyperparameters are JSON.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{AllocationCounts, ChainResult, ImageVolume};
use crate::error::{Error, Result};
use crate::eval::ScoreReport;
use crate::externalfield::{DeltaHyper, FieldMode, FieldPrior};
use crate::lattice::LatticeSpec;
use crate::pathsampler::{PathTable, PathTableMeta};
use crate::potts::LabelField;
use crate::sequential::LabelWeights;

pub const MAGIC: &str = "HPOTTS-VOLUME";
pub const VERSION: u32 = 1;

/// Lowercase hex SHA-256 of `bytes`.
pub fn checksum_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementType {
    #[serde(rename = "uint8")]
    U8,
    #[serde(rename = "float64")]
    F64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub magic: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub voxel_size: Vec<f64>,
    pub element: ElementType,
    pub planes: usize,
    pub endianness: String,
    pub checksum: String,
    /// number of classes, for label volumes
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl VolumeHeader {
    /// Header describing `payload`, with its checksum filled in.
    pub fn new(spec: &LatticeSpec, element: ElementType, planes: usize, payload: &[u8]) -> Self {
        Self {
            magic: MAGIC.to_string(),
            version: VERSION,
            dims: spec.dims().to_vec(),
            voxel_size: spec.voxel_size().to_vec(),
            element,
            planes,
            endianness: "little".to_string(),
            checksum: checksum_hex(payload),
            classes: None,
        }
    }

    pub fn spec(&self) -> Result<LatticeSpec> {
        LatticeSpec::new(&self.dims, &self.voxel_size)
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.planes * self.element.size()
    }

    fn check_format(&self) -> Result<()> {
        if self.magic != MAGIC {
            return Err(Error::Format(format!("bad magic '{}'", self.magic)));
        }
        if self.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {}",
                self.version
            )));
        }
        if self.endianness != "little" {
            return Err(Error::Format(format!(
                "unsupported endianness '{}'",
                self.endianness
            )));
        }
        if self.planes == 0 {
            return Err(Error::Format("volume has no planes".into()));
        }
        Ok(())
    }
}

pub fn write_volume(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    header.check_format()?;
    header.spec()?;
    if payload.len() != header.payload_len() {
        return Err(Error::Format(format!(
            "payload has {} bytes, header describes {}",
            payload.len(),
            header.payload_len()
        )));
    }
    if checksum_hex(payload) != header.checksum {
        return Err(Error::Format(
            "header checksum does not match payload".into(),
        ));
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend_from_slice(payload);
    write_bytes(path, out)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<(VolumeHeader, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing header line", path.display())))?;
    let header: VolumeHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Format(format!("{}: unreadable header: {e}", path.display())))?;
    header.check_format()?;
    let payload = bytes[split + 1..].to_vec();
    if payload.len() != header.payload_len() {
        return Err(Error::Checksum(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            payload.len(),
            header.payload_len()
        )));
    }
    if checksum_hex(&payload) != header.checksum {
        return Err(Error::Checksum(format!(
            "{}: payload checksum mismatch",
            path.display()
        )));
    }
    Ok((header, payload))
}

fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(with_path(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(with_path(path))
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(with_path(path))
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f64_values(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

pub fn write_f64_planes(
    path: &Path,
    spec: &LatticeSpec,
    planes: usize,
    values: &[f64],
) -> Result<()> {
    let payload = f64_bytes(values);
    write_volume(
        path,
        &VolumeHeader::new(spec, ElementType::F64, planes, &payload),
        &payload,
    )
}

/// Reads a float volume; returns the lattice, plane count and values.
pub fn read_f64_planes(path: &Path) -> Result<(LatticeSpec, usize, Vec<f64>)> {
    let (header, payload) = read_volume(path)?;
    if header.element != ElementType::F64 {
        return Err(Error::Format(format!(
            "{}: expected a float64 volume",
            path.display()
        )));
    }
    Ok((header.spec()?, header.planes, f64_values(&payload)))
}

pub fn write_labels(path: &Path, spec: &LatticeSpec, z: &LabelField) -> Result<()> {
    z.check_len(spec.n_sites())?;
    let payload: Vec<u8> = z.labels().iter().map(|&l| l + 1).collect();
    let mut header = VolumeHeader::new(spec, ElementType::U8, 1, &payload);
    header.classes = Some(z.k());
    write_volume(path, &header, &payload)
}

pub fn read_labels(path: &Path) -> Result<(LatticeSpec, LabelField)> {
    let (header, payload) = read_volume(path)?;
    if header.element != ElementType::U8 || header.planes != 1 {
        return Err(Error::Format(format!(
            "{}: expected a single-plane uint8 label volume",
            path.display()
        )));
    }
    if payload.contains(&0) {
        return Err(Error::Data(format!(
            "{}: label 0 is not a valid class",
            path.display()
        )));
    }
    let max = payload.iter().copied().max().unwrap_or(1) as usize;
    let k = header.classes.unwrap_or(max);
    let labels = payload.into_iter().map(|l| l - 1).collect();
    Ok((header.spec()?, LabelField::new(labels, k)?))
}

pub fn write_image(path: &Path, image: &ImageVolume) -> Result<()> {
    write_f64_planes(path, image.spec(), 1, image.values())
}

pub fn read_image(path: &Path) -> Result<ImageVolume> {
    let (spec, planes, values) = read_f64_planes(path)?;
    if planes != 1 {
        return Err(Error::Format(format!(
            "{}: image must have one plane, found {planes}",
            path.display()
        )));
    }
    ImageVolume::new(spec, values)
}

/// Allocation counts, stored as float planes.
pub fn write_counts(path: &Path, spec: &LatticeSpec, counts: &AllocationCounts) -> Result<()> {
    let values: Vec<f64> = counts.planes().iter().map(|&c| c as f64).collect();
    write_f64_planes(path, spec, counts.k(), &values)
}

pub fn read_counts(path: &Path) -> Result<(LatticeSpec, AllocationCounts)> {
    let (spec, k, values) = read_f64_planes(path)?;
    let counts = values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::Data(format!(
                    "{}: {v} is not a count",
                    path.display()
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = spec.n_sites();
    Ok((spec, AllocationCounts::from_planes(k, n, counts)?))
}

pub fn write_weights(path: &Path, spec: &LatticeSpec, w: &LabelWeights) -> Result<()> {
    write_f64_planes(path, spec, w.k(), w.planes())
}

pub fn read_weights(path: &Path) -> Result<(LatticeSpec, LabelWeights)> {
    let (spec, k, values) = read_f64_planes(path)?;
    let n = spec.n_sites();
    Ok((spec, LabelWeights::from_planes(k, n, values)?))
}

/// `<path>.json`, holding metadata for a volume or table.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FieldSidecar {
    dims: Vec<usize>,
    voxel_size: Vec<f64>,
    k: usize,
    mode: FieldMode,
    hyper: DeltaHyper,
    reference_checksum: String,
}

pub fn write_field_prior(path: &Path, spec: &LatticeSpec, field: &FieldPrior) -> Result<()> {
    if field.n_sites() != spec.n_sites() {
        return Err(Error::Shape(format!(
            "field has {} sites, lattice has {}",
            field.n_sites(),
            spec.n_sites()
        )));
    }
    write_f64_planes(path, spec, field.k(), field.values())?;
    write_json(
        &sidecar_path(path),
        &FieldSidecar {
            dims: spec.dims().to_vec(),
            voxel_size: spec.voxel_size().to_vec(),
            k: field.k(),
            mode: field.mode(),
            hyper: field.hyper().clone(),
            reference_checksum: field.source_checksum().to_string(),
        },
    )
}

pub fn read_field_prior(path: &Path) -> Result<(LatticeSpec, FieldPrior)> {
    let (spec, k, values) = read_f64_planes(path)?;
    let meta: FieldSidecar = read_json(&sidecar_path(path))?;
    if meta.dims != spec.dims() || meta.k != k {
        return Err(Error::Format(format!(
            "{}: sidecar does not match the volume",
            path.display()
        )));
    }
    let n = spec.n_sites();
    let field =
        FieldPrior::from_planes(k, n, values, meta.reference_checksum, meta.hyper, meta.mode)?;
    Ok((spec, field))
}

pub fn write_path_table(path: &Path, table: &PathTable) -> Result<()> {
    let mut out = String::from("beta,expected_stat\n");
    for (b, s) in table.beta_grid().iter().zip(table.expected_stat()) {
        out.push_str(&format!("{},{}\n", fmt_f64(*b), fmt_f64(*s)));
    }
    write_bytes(path, out)?;
    write_json(&sidecar_path(path), table.meta())
}

pub fn read_path_table(path: &Path) -> Result<PathTable> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("beta,expected_stat") {
        return Err(Error::Format(format!(
            "{}: expected header 'beta,expected_stat'",
            path.display()
        )));
    }
    let mut grid = Vec::new();
    let mut stat = Vec::new();
    for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad row {}", path.display(), row + 2)))
        };
        let mut parts = line.split(',');
        grid.push(parse(parts.next())?);
        stat.push(parse(parts.next())?);
    }
    let meta: PathTableMeta = read_json(&sidecar_path(path))?;
    PathTable::new(grid, stat, meta)
}

/// Per-iteration traces: `iteration,beta,stat,mu_1..k,sigma2_1..k[,correct]`.
pub fn write_traces_csv(path: &Path, result: &ChainResult) -> Result<()> {
    let k = result.traces.first().map_or(0, |r| r.mu.len());
    let with_correct = result.traces.first().is_some_and(|r| r.correct.is_some());
    let mut out = String::from("iteration,beta,stat");
    for j in 1..=k {
        out.push_str(&format!(",mu_{j}"));
    }
    for j in 1..=k {
        out.push_str(&format!(",sigma2_{j}"));
    }
    if with_correct {
        out.push_str(",correct");
    }
    out.push('\n');
    for (t, r) in result.traces.iter().enumerate() {
        out.push_str(&format!("{t},{},{}", fmt_f64(r.beta), r.stat));
        for v in r.mu.iter().chain(&r.sigma2) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        if let Some(c) = r.correct {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    write_bytes(path, out)?;
    Ok(())
}

/// A two-column table of named values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub variant: String,
    pub rows: Vec<(String, Option<f64>)>,
}

impl ScoreTable {
    /// One row per class Dice, then misclassification, then `extras`.
    pub fn from_report(
        variant: &str,
        names: &[String],
        report: &ScoreReport,
        extras: &[(&str, Option<f64>)],
    ) -> Result<Self> {
        if names.len() != report.dice.len() {
            return Err(Error::Shape(format!(
                "{} names for {} classes",
                names.len(),
                report.dice.len()
            )));
        }
        let mut rows: Vec<(String, Option<f64>)> = names
            .iter()
            .cloned()
            .zip(report.dice.iter().map(|d| Some(*d)))
            .collect();
        rows.push(("misclassification".into(), Some(report.misclassification)));
        rows.extend(extras.iter().map(|(n, v)| (n.to_string(), *v)));
        Ok(Self {
            variant: variant.to_string(),
            rows,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| *v)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

pub fn write_score_csv(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut out = format!("tissue,{}\n", csv_field(&table.variant));
    for (name, v) in &table.rows {
        out.push_str(&csv_field(name));
        out.push(',');
        if let Some(v) = v {
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write_bytes(path, out)?;
    Ok(())
}

pub fn read_score_csv(path: &Path) -> Result<ScoreTable> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = split_csv_line(lines.next().unwrap_or_default());
    if header.len() != 2 || header[0] != "tissue" {
        return Err(Error::Format(format!(
            "{}: expected header 'tissue,<variant>'",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts = split_csv_line(line);
        if parts.len() != 2 {
            return Err(Error::Format(format!(
                "{}: bad row '{line}'",
                path.display()
            )));
        }
        let value = if parts[1].trim().is_empty() {
            None
        } else {
            Some(parts[1].trim().parse().map_err(|_| {
                Error::Format(format!("{}: bad value '{}'", path.display(), parts[1]))
            })?)
        };
        rows.push((parts[0].clone(), value));
    }
    Ok(ScoreTable {
        variant: header[1].clone(),
        rows,
    })
}

/// Confusion counts, rows = true class, columns = predicted class.
pub fn write_confusion_csv(path: &Path, names: &[String], report: &ScoreReport) -> Result<()> {
    if names.len() != report.k {
        return Err(Error::Shape(format!(
            "{} names for {} classes",
            names.len(),
            report.k
        )));
    }
    let mut f = fs::File::create(path).map_err(with_path(path))?;
    let header: Vec<String> = std::iter::once("truth".to_string())
        .chain(names.iter().map(|n| csv_field(n)))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (t, name) in names.iter().enumerate() {
        let row: Vec<String> = (0..report.k)
            .map(|p| report.confusion(t, p).to_string())
            .collect();
        writeln!(f, "{},{}", csv_field(name), row.join(","))?;
    }
    Ok(())
}
