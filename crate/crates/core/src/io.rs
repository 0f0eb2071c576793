//! File formats: code matrices and signals as CSV, the mask as SVG, the JSON
//! run configuration and report directories.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the value written. Every file is written to
//! a temporary sibling and renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codes::{CodeError, CodeMatrix, MaskPattern};
use crate::experiments::{
    default_mask_geometry, ExperimentReport, ReportData, ScanConfig, Scenario,
};
use crate::multiplex::{MuxError, SignalMatrix, SignalRole};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config line {line}, column {column}: {msg}")]
    Config {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Mux(#[from] MuxError),
}

fn file_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(file_err(path))?;
    tmp.write_all(bytes).map_err(file_err(path))?;
    tmp.as_file().sync_all().map_err(file_err(path))?;
    tmp.persist(path).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(file_err(path))?;
    Ok(s)
}

fn csv_rows(text: &str) -> Result<Vec<(usize, Vec<String>)>, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| IoError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

// ---- code matrices -------------------------------------------------------

/// One matrix row per line, integer entries.
pub fn matrix_to_csv(w: &CodeMatrix) -> String {
    let n = w.n();
    let rows = (0..n).map(|i| w.row(i).iter().map(|v| v.to_string()).collect());
    String::from_utf8(csv_bytes(rows)).expect("ascii")
}

/// The base sequence as a single CSV line.
pub fn base_to_csv(base: &[u8]) -> String {
    String::from_utf8(csv_bytes([base.iter().map(|v| v.to_string()).collect()])).expect("ascii")
}

pub fn matrix_from_csv(text: &str) -> Result<CodeMatrix, IoError> {
    let rows = csv_rows(text)?;
    let n = rows.len();
    if n == 0 {
        return Err(IoError::Format("matrix file is empty".into()));
    }
    let mut entries = Vec::with_capacity(n * n);
    for (line, row) in &rows {
        if row.len() != n {
            return Err(IoError::Parse {
                line: *line,
                msg: format!("expected {n} entries for a square matrix, found {}", row.len()),
            });
        }
        for field in row {
            let v: i8 = field.parse().map_err(|_| IoError::Parse {
                line: *line,
                msg: format!("`{field}` is not an integer matrix entry"),
            })?;
            entries.push(v);
        }
    }
    Ok(CodeMatrix::from_entries(n, entries)?)
}

// ---- signals -------------------------------------------------------------

/// Sampled signals as read from CSV: the time column kept verbatim and one
/// row of `values` per data column.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    pub header: Option<Vec<String>>,
    pub time: Vec<String>,
    pub values: DMatrix<f64>,
}

impl SignalTable {
    pub fn columns(&self) -> usize {
        self.values.nrows()
    }

    /// Time step and origin inferred from the time column.
    pub fn timing(&self) -> Result<(f64, f64), IoError> {
        let t: Vec<f64> = self
            .time
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::Format("time column is not numeric".into()))?;
        let dt = if t.len() > 1 { t[1] - t[0] } else { 1.0 };
        Ok((dt, t[0]))
    }

    pub fn to_signal_matrix(&self, role: SignalRole) -> Result<SignalMatrix, IoError> {
        let (dt, t0) = self.timing()?;
        Ok(SignalMatrix::new(self.values.clone(), dt, t0, role)?)
    }
}

/// Parses `time, c0, c1, …` rows. A first row whose time field is not a
/// number is taken as the header.
pub fn signal_table_from_csv(text: &str) -> Result<SignalTable, IoError> {
    let mut rows = csv_rows(text)?;
    let header = match rows.first() {
        Some((_, r)) if r[0].parse::<f64>().is_err() => Some(rows.remove(0).1),
        _ => None,
    };
    let Some((_, first)) = rows.first() else {
        return Err(IoError::Format("signal file has no data rows".into()));
    };
    let width = first.len();
    if width < 2 {
        return Err(IoError::Format(
            "signal file needs a time column and at least one data column".into(),
        ));
    }
    if let Some(h) = &header {
        if h.len() != width {
            return Err(IoError::Parse {
                line: 1,
                msg: format!("header has {} fields, data rows have {width}", h.len()),
            });
        }
    }
    let mut values = DMatrix::zeros(width - 1, rows.len());
    let mut time = Vec::with_capacity(rows.len());
    for (k, (line, row)) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(IoError::Parse {
                line: *line,
                msg: format!("expected {width} fields, found {}", row.len()),
            });
        }
        time.push(row[0].clone());
        for (j, field) in row[1..].iter().enumerate() {
            values[(j, k)] = field.parse().map_err(|_| IoError::Parse {
                line: *line,
                msg: format!("`{field}` is not a number"),
            })?;
        }
    }
    Ok(SignalTable {
        header,
        time,
        values,
    })
}

/// Writes `time_s, <prefix>0, <prefix>1, …` with the given time strings.
pub fn signal_table_to_csv(time: &[String], values: &DMatrix<f64>, prefix: &str) -> String {
    let mut rows = Vec::with_capacity(time.len() + 1);
    let mut header = vec!["time_s".to_string()];
    header.extend((0..values.nrows()).map(|j| format!("{prefix}{j}")));
    rows.push(header);
    for (k, t) in time.iter().enumerate() {
        let mut row = vec![t.clone()];
        row.extend(values.column(k).iter().map(|v| num(*v)));
        rows.push(row);
    }
    String::from_utf8(csv_bytes(rows)).expect("ascii")
}

pub fn signal_matrix_to_csv(m: &SignalMatrix, prefix: &str) -> String {
    let time: Vec<String> = (0..m.samples()).map(|k| num(m.time(k))).collect();
    signal_table_to_csv(&time, m.values(), prefix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSidecar {
    pub role: SignalRole,
    pub rows: usize,
    pub samples: usize,
    pub time_step_s: f64,
    pub t0_s: f64,
}

impl SignalSidecar {
    pub fn of(m: &SignalMatrix) -> Self {
        SignalSidecar {
            role: m.role(),
            rows: m.n(),
            samples: m.samples(),
            time_step_s: m.time_step_s(),
            t0_s: m.t0_s(),
        }
    }
}

/// `time_s, amplitude` pairs.
pub fn trace_to_csv(time_s: &[f64], columns: &[(&str, &[f64])]) -> String {
    let mut rows = Vec::with_capacity(time_s.len() + 1);
    let mut header = vec!["time_s".to_string()];
    header.extend(columns.iter().map(|(name, _)| name.to_string()));
    rows.push(header);
    for (k, t) in time_s.iter().enumerate() {
        let mut row = vec![num(*t)];
        row.extend(columns.iter().map(|(_, v)| num(v[k])));
        rows.push(row);
    }
    String::from_utf8(csv_bytes(rows)).expect("ascii")
}

/// Dense grid, one CSV line per map row.
pub fn map_to_csv(m: &DMatrix<f64>) -> String {
    let rows = (0..m.nrows()).map(|i| m.row(i).iter().map(|v| num(*v)).collect());
    String::from_utf8(csv_bytes(rows)).expect("ascii")
}

pub fn map_from_csv(text: &str) -> Result<DMatrix<f64>, IoError> {
    let rows = csv_rows(text)?;
    let cols = rows.first().map_or(0, |r| r.1.len());
    let mut m = DMatrix::zeros(rows.len(), cols);
    for (i, (line, row)) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(IoError::Parse {
                line: *line,
                msg: format!("expected {cols} fields, found {}", row.len()),
            });
        }
        for (j, f) in row.iter().enumerate() {
            m[(i, j)] = f.parse().map_err(|_| IoError::Parse {
                line: *line,
                msg: format!("`{f}` is not a number"),
            })?;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapAxes {
    pub x_mm: Vec<f64>,
    pub y_mm: Vec<f64>,
}

// ---- mask geometry -------------------------------------------------------

/// Fabrication drawing of the `2n − 1` cell strip in millimetres. Open cells
/// are circles of the aperture diameter; closed cells are left solid.
pub fn mask_svg(mask: &MaskPattern) -> String {
    let pitch = mask.pitch_mm();
    let r = 0.5 * mask.aperture_diameter_mm();
    let cells = mask.cells();
    let margin = pitch;
    let width = cells.len() as f64 * pitch + 2.0 * margin;
    let height = pitch + 2.0 * margin;
    let base: String = mask.base().iter().map(|v| v.to_string()).collect();
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}mm\" height=\"{height}mm\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    s.push_str(&format!(
        "<!-- mask n={} base={base} pitch_mm={pitch} aperture_diameter_mm={} slots={} \
         open={} array_span_mm={} units=mm -->\n",
        mask.order(),
        mask.aperture_diameter_mm(),
        cells.len(),
        cells.iter().filter(|&&c| c == 1).count(),
        mask.span_mm(),
    ));
    s.push_str(&format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{pitch}\" \
         fill=\"none\" stroke=\"black\" stroke-width=\"0.05\"/>\n",
        cells.len() as f64 * pitch
    ));
    for (k, &c) in cells.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let cx = margin + (k as f64 + 0.5) * pitch;
        let cy = margin + 0.5 * pitch;
        s.push_str(&format!(
            "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"{r}\" fill=\"none\" stroke=\"black\" \
             stroke-width=\"0.05\"/>\n"
        ));
    }
    s.push_str("</svg>\n");
    s
}

// ---- configuration -------------------------------------------------------

/// Run configuration: the scenario to execute and the scan parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: Scenario,
    #[serde(default)]
    pub config: ScanConfig,
}

/// A parsed configuration plus one notice per key filled from defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub notices: Vec<String>,
}

fn missing_keys(defaults: &Value, given: Option<&Value>, path: &str, out: &mut Vec<String>) {
    let Value::Object(map) = defaults else { return };
    for (key, default) in map {
        let here = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match (given.and_then(|g| g.get(key)), default) {
            (None, Value::Object(_)) => missing_keys(default, None, &here, out),
            (None, _) => out.push(here),
            (Some(v), _) => missing_keys(default, Some(v), &here, out),
        }
    }
}

/// Strictly parses a configuration. Unknown keys and type errors are
/// reported with line and column; absent keys take their defaults and are
/// listed in `notices`. Unset mask geometry resolves from the code order.
pub fn parse_config(text: &str) -> Result<LoadedConfig, IoError> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| IoError::Config {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let raw: Value = serde_json::from_str(text).expect("already parsed");
    let defaults = serde_json::to_value(ScanConfig::default()).expect("serializable");
    let mut missing = Vec::new();
    missing_keys(&defaults, raw.get("config"), "", &mut missing);
    let order = file.config.code_order;
    let (pitch, diameter) = default_mask_geometry(order);
    let notices = missing
        .into_iter()
        .map(|key| {
            let value = match key.as_str() {
                "mask.pitch_mm" => format!("{pitch} (order {order})"),
                "mask.aperture_diameter_mm" => format!("{diameter} (order {order})"),
                "scan.x_step_mm" => format!("{} (mask pitch)", file.config.pitch_mm()),
                _ => pointer(&defaults, &key).to_string(),
            };
            format!("config key `{key}` missing; using default {value}")
        })
        .collect();
    Ok(LoadedConfig {
        file: ConfigFile {
            scenario: file.scenario,
            config: file.config.resolved(),
        },
        notices,
    })
}

fn pointer<'a>(v: &'a Value, dotted: &str) -> &'a Value {
    let ptr = format!("/{}", dotted.replace('.', "/"));
    v.pointer(&ptr).unwrap_or(&Value::Null)
}

pub fn config_to_json(file: &ConfigFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("serializable");
    s.push('\n');
    s
}

// ---- reports -------------------------------------------------------------

/// Writes `report.json` and the scenario's data files into `dir`, returning
/// the paths written.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut json = serde_json::to_vec_pretty(&report.header).expect("serializable");
    json.push(b'\n');
    files.push(("report.json", json));
    match &report.data {
        ReportData::Uniformity(p) => {
            let mut rows = vec![vec![
                "element".to_string(),
                "position_mm".into(),
                "peak_amplitude".into(),
                "sensitivity".into(),
                "coupled".into(),
            ]];
            for j in 0..p.sensitivity.len() {
                rows.push(vec![
                    j.to_string(),
                    num(p.positions_mm[j]),
                    num(p.peak_amplitude[j]),
                    num(p.sensitivity[j]),
                    (p.coupled[j] as u8).to_string(),
                ]);
            }
            files.push(("sensitivity.csv", csv_bytes(rows)));
        }
        ReportData::FieldMap(m) => {
            files.push(("map_demuxed.csv", map_to_csv(&m.demuxed).into_bytes()));
            files.push(("map_direct.csv", map_to_csv(&m.direct).into_bytes()));
            let axes = MapAxes {
                x_mm: m.x_mm.clone(),
                y_mm: m.y_mm.clone(),
            };
            let mut a = serde_json::to_vec_pretty(&axes).expect("serializable");
            a.push(b'\n');
            files.push(("map_axes.json", a));
            let t = &m.peak_traces;
            files.push((
                "peak_traces.csv",
                trace_to_csv(&t.time_s, &[("demuxed", &t.demuxed), ("direct", &t.direct)])
                    .into_bytes(),
            ));
        }
        ReportData::Angular(rows) => {
            let mut out = vec![vec![
                "angle_deg".to_string(),
                "masked_loss_db".into(),
                "unmasked_loss_db".into(),
                "aperture_model_loss_db".into(),
            ]];
            for r in rows {
                out.push(vec![
                    num(r.angle_deg),
                    num(r.masked_loss_db),
                    num(r.unmasked_loss_db),
                    num(r.aperture_model_loss_db),
                ]);
            }
            files.push(("angular_loss.csv", csv_bytes(out)));
        }
        ReportData::Gain(g) => {
            let mut out = vec![vec![
                "element".to_string(),
                "direct_rms".into(),
                "multiplexed_rms".into(),
                "gain".into(),
            ]];
            for (j, (d, m)) in g.direct_rms.iter().zip(&g.multiplexed_rms).enumerate() {
                out.push(vec![j.to_string(), num(*d), num(*m), num(d / m)]);
            }
            files.push(("gain.csv", csv_bytes(out)));
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::build_code;
    use crate::codes::CodeKind;

    #[test]
    fn matrix_csv_roundtrip() {
        for (kind, n) in [
            (CodeKind::SMatrix, 7),
            (CodeKind::SMatrix, 59),
            (CodeKind::Hadamard, 16),
        ] {
            let w = build_code(kind, n).unwrap();
            let text = matrix_to_csv(&w);
            assert_eq!(text.lines().count(), n);
            let back = matrix_from_csv(&text).unwrap();
            assert_eq!(back, w);
        }
        assert!(matrix_from_csv("1,0\n1\n").is_err());
        assert!(matrix_from_csv("1,x\n0,1\n").is_err());
    }

    #[test]
    fn signal_csv_roundtrip_is_bit_exact() {
        let values = DMatrix::from_fn(3, 5, |i, k| ((i * 7 + k) as f64).sin() * 1e-5 / 3.0);
        let m = SignalMatrix::new(values, 1e-8, 1.0135e-4, SignalRole::Recovered).unwrap();
        let text = signal_matrix_to_csv(&m, "x");
        let table = signal_table_from_csv(&text).unwrap();
        assert_eq!(table.header.as_ref().unwrap()[0], "time_s");
        assert_eq!(&table.values, m.values());
        let back = table.to_signal_matrix(SignalRole::Recovered).unwrap();
        assert_eq!(back.t0_s(), m.t0_s());
        assert_eq!(signal_table_to_csv(&table.time, &table.values, "x"), text);
    }

    #[test]
    fn headerless_signal_csv() {
        let t = signal_table_from_csv("0,1,2\n1e-8,3,4\n").unwrap();
        assert!(t.header.is_none());
        assert_eq!(t.columns(), 2);
        assert_eq!(t.values[(1, 1)], 4.0);
        assert!(signal_table_from_csv("0,1\n1,2,3\n").is_err());
    }

    #[test]
    fn map_csv_roundtrip() {
        let m = DMatrix::from_fn(4, 6, |i, j| (i as f64 + 0.1) / (j as f64 + 0.3));
        assert_eq!(map_from_csv(&map_to_csv(&m)).unwrap(), m);
    }

    #[test]
    fn svg_slots_and_circles() {
        let mask = MaskPattern::s_matrix(7, 1.0, 1.0).unwrap();
        let svg = mask_svg(&mask);
        let circles = svg.matches("<circle").count();
        let weight_tail: usize = mask.base()[..6].iter().map(|&v| v as usize).sum();
        assert_eq!(circles, 4 + weight_tail);
        assert!(svg.contains("n=7 base=1110100"));
        assert!(svg.contains("slots=13"));
        assert!(svg.contains("mm\""));
        let big = mask_svg(&MaskPattern::s_matrix(59, 1.0, 1.0).unwrap());
        assert!(big.contains("array_span_mm=59 "));
    }

    #[test]
    fn config_strict_parsing() {
        let ok = parse_config(r#"{"scenario": "gain", "config": {"code_order": 59}}"#).unwrap();
        assert_eq!(ok.file.scenario, Scenario::Gain);
        assert_eq!(ok.file.config.mask.pitch_mm, Some(1.0));
        assert!(ok
            .notices
            .iter()
            .any(|n| n.contains("mask.pitch_mm") && n.contains("order 59")));
        assert!(ok.notices.iter().any(|n| n.contains("noise.sigma")));
        assert!(!ok.notices.iter().any(|n| n.contains("code_order")));

        let bad = "{\n  \"scenario\": \"gain\",\n  \"config\": {\"mask\": {\"pitch\": 2}}\n}";
        match parse_config(bad) {
            Err(IoError::Config { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("pitch"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_config(r#"{"config": {}}"#).is_err());
        assert!(parse_config(r#"{"scenario": "nope"}"#).is_err());
        assert!(parse_config(r#"{"scenario": "gain", "extra": 1}"#).is_err());
    }

    #[test]
    fn config_roundtrip() {
        let file = ConfigFile {
            scenario: Scenario::Angular,
            config: ScanConfig::preset(59),
        };
        let loaded = parse_config(&config_to_json(&file)).unwrap();
        assert_eq!(loaded.file, file);
        assert!(loaded.notices.is_empty());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
