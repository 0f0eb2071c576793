//! End-to-end scenario runners: element uniformity, 2D field maps, angular
//! response and the Monte-Carlo SNR-gain benchmark, all driven through the
//! acoustic forward model.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acoustics::{
    arrival_delay_s, element_signals, masked_scan_from, piston_directivity,
    unmasked_detector_signal, AcousticsError, IncidenceModel, Medium, Point2, Pulse,
    ReceiverIntegration, TimeGrid, Transducer, TransducerRole, VirtualArrayGeometry,
};
use crate::codes::{CodeError, CodeKind, CodeMatrix, CodeOrder, MaskPattern};
use crate::multiplex::{
    run_gain_batches, theoretical_gain, Demultiplexer, GainEstimate, MuxError, NoiseModel,
    SignalMatrix,
};

/// Fewest trials accepted by [`run_gain_benchmark`].
pub const MIN_BENCHMARK_TRIALS: usize = 1000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// The configuration is inconsistent; nothing was simulated.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A runner precondition failed for an otherwise valid configuration.
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Acoustics(#[from] AcousticsError),
    #[error(transparent)]
    Mux(#[from] MuxError),
    #[error(transparent)]
    Code(#[from] CodeError),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn config_err<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> ExperimentError + '_ {
    move |e| ExperimentError::Config(format!("{what}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Uniformity,
    Fieldmap,
    Angular,
    Gain,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Uniformity => "uniformity",
            Scenario::Fieldmap => "fieldmap",
            Scenario::Angular => "angular",
            Scenario::Gain => "gain",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniformity" => Ok(Scenario::Uniformity),
            "fieldmap" => Ok(Scenario::Fieldmap),
            "angular" => Ok(Scenario::Angular),
            "gain" => Ok(Scenario::Gain),
            other => Err(format!(
                "unknown scenario `{other}` (expected uniformity, fieldmap, angular or gain)"
            )),
        }
    }
}

/// Mask geometry. Unset pitch and diameter take the per-order defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub pitch_mm: Option<f64>,
    pub aperture_diameter_mm: Option<f64>,
    pub mask_to_detector_gap_mm: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            pitch_mm: None,
            aperture_diameter_mm: None,
            mask_to_detector_gap_mm: 1.5,
        }
    }
}

/// Pitch and aperture diameter used when a config leaves them unset.
pub fn default_mask_geometry(n: usize) -> (f64, f64) {
    match n {
        31 => (2.0, 1.5),
        _ => (1.0, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransmitterSpec {
    pub diameter_mm: f64,
    /// Lateral transmitter offset for field maps and the gain benchmark.
    pub x_mm: f64,
}

impl Default for TransmitterSpec {
    fn default() -> Self {
        TransmitterSpec {
            diameter_mm: 12.7,
            x_mm: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverSpec {
    pub diameter_mm: f64,
}

impl Default for ReceiverSpec {
    fn default() -> Self {
        ReceiverSpec { diameter_mm: 38.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MediumSpec {
    pub c_m_per_s: f64,
}

impl Default for MediumSpec {
    fn default() -> Self {
        MediumSpec { c_m_per_s: 1480.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseSpec {
    pub center_frequency_hz: f64,
    pub fractional_bandwidth: f64,
    pub amplitude: f64,
}

impl Default for PulseSpec {
    fn default() -> Self {
        PulseSpec {
            center_frequency_hz: 1e6,
            fractional_bandwidth: 0.6,
            amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Per-sample noise std of a single acquisition.
    pub sigma: f64,
    /// Pulses averaged per acquisition; the effective std is `sigma / √averages`.
    pub averages: u32,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: 1e-4,
            averages: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSpec {
    /// Mask step per acquisition; must equal the pitch when set.
    pub x_step_mm: Option<f64>,
    pub y_step_mm: f64,
    pub y_start_mm: f64,
    pub y_range_mm: f64,
    /// Number of interlaced transmitter x positions for field maps.
    pub interlace: usize,
    pub angles_deg: Vec<f64>,
    pub uniformity_distance_mm: f64,
    pub angular_distance_mm: f64,
    pub gain_distance_mm: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec {
            x_step_mm: None,
            y_step_mm: 0.5,
            y_start_mm: 50.0,
            y_range_mm: 150.0,
            interlace: 1,
            angles_deg: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            uniformity_distance_mm: 150.0,
            angular_distance_mm: 220.0,
            gain_distance_mm: 150.0,
        }
    }
}

/// Full description of a simulated acquisition campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub code_order: usize,
    pub mask: MaskSpec,
    pub transmitter: TransmitterSpec,
    pub receiver: ReceiverSpec,
    pub medium: MediumSpec,
    pub pulse: PulseSpec,
    pub noise: NoiseSpec,
    pub time_step_s: f64,
    pub incidence: IncidenceModel,
    pub scan: ScanSpec,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            code_order: 31,
            mask: MaskSpec::default(),
            transmitter: TransmitterSpec::default(),
            receiver: ReceiverSpec::default(),
            medium: MediumSpec::default(),
            pulse: PulseSpec::default(),
            noise: NoiseSpec::default(),
            time_step_s: 1e-8,
            incidence: IncidenceModel::default(),
            scan: ScanSpec::default(),
            trials: 10_000,
            seed: 1,
        }
    }
}

impl ScanConfig {
    /// Defaults for an S-matrix mask of order `n`, with geometry filled in.
    pub fn preset(n: usize) -> Self {
        ScanConfig {
            code_order: n,
            ..Default::default()
        }
        .resolved()
    }

    /// Copy with per-order defaults substituted for unset fields.
    pub fn resolved(mut self) -> Self {
        let (pitch, diameter) = default_mask_geometry(self.code_order);
        let pitch = *self.mask.pitch_mm.get_or_insert(pitch);
        self.mask.aperture_diameter_mm.get_or_insert(diameter);
        self.scan.x_step_mm.get_or_insert(pitch);
        self
    }

    pub fn pitch_mm(&self) -> f64 {
        self.mask
            .pitch_mm
            .unwrap_or(default_mask_geometry(self.code_order).0)
    }

    pub fn aperture_diameter_mm(&self) -> f64 {
        self.mask
            .aperture_diameter_mm
            .unwrap_or(default_mask_geometry(self.code_order).1)
    }

    /// Checks every constituent invariant without simulating anything.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.mask_pattern()?;
        self.geometry()?;
        self.pulse()?;
        self.medium()?;
        self.noise_model()?;
        self.transmitter_at(Point2::new(0.0, 1.0), 0.0)?;
        let pitch = self.pitch_mm();
        if let Some(step) = self.scan.x_step_mm {
            if (step - pitch).abs() > 1e-12 * pitch {
                return Err(ExperimentError::Config(format!(
                    "scan.x_step_mm = {step} must equal mask pitch {pitch} mm"
                )));
            }
        }
        if !(self.time_step_s.is_finite() && self.time_step_s > 0.0) {
            return Err(ExperimentError::Config(format!(
                "time_step_s must be positive, got {}",
                self.time_step_s
            )));
        }
        let pulse = self.pulse()?;
        if self.time_step_s > pulse.max_time_step_s() {
            return Err(ExperimentError::Config(format!(
                "time_step_s = {} under-resolves the pulse (need <= {})",
                self.time_step_s,
                pulse.max_time_step_s()
            )));
        }
        if self.noise.averages == 0 {
            return Err(ExperimentError::Config("noise.averages must be >= 1".into()));
        }
        let s = &self.scan;
        for (name, v) in [
            ("scan.y_step_mm", s.y_step_mm),
            ("scan.uniformity_distance_mm", s.uniformity_distance_mm),
            ("scan.angular_distance_mm", s.angular_distance_mm),
            ("scan.gain_distance_mm", s.gain_distance_mm),
            ("scan.y_start_mm", s.y_start_mm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ExperimentError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(s.y_range_mm.is_finite() && s.y_range_mm >= 0.0) {
            return Err(ExperimentError::Config(format!(
                "scan.y_range_mm must be non-negative, got {}",
                s.y_range_mm
            )));
        }
        if s.interlace == 0 {
            return Err(ExperimentError::Config("scan.interlace must be >= 1".into()));
        }
        if let Some(a) = s.angles_deg.iter().find(|a| !(a.abs() < 90.0)) {
            return Err(ExperimentError::Config(format!(
                "angle {a}° is outside (-90°, 90°)"
            )));
        }
        Ok(())
    }

    pub fn mask_pattern(&self) -> Result<MaskPattern, ExperimentError> {
        CodeOrder::s_matrix(self.code_order).map_err(config_err("code_order"))?;
        MaskPattern::s_matrix(
            self.code_order,
            self.pitch_mm(),
            self.aperture_diameter_mm(),
        )
        .map_err(config_err("mask"))
    }

    pub fn code(&self) -> Result<CodeMatrix, ExperimentError> {
        Ok(self.mask_pattern()?.code_matrix()?)
    }

    pub fn geometry(&self) -> Result<VirtualArrayGeometry, ExperimentError> {
        let receiver = Transducer::receiver(Point2::new(0.0, 0.0), self.receiver.diameter_mm)
            .map_err(config_err("receiver"))?;
        VirtualArrayGeometry::new(
            self.mask_pattern()?,
            receiver,
            self.mask.mask_to_detector_gap_mm,
        )
        .map_err(config_err("mask"))
    }

    pub fn pulse(&self) -> Result<Pulse, ExperimentError> {
        let p = &self.pulse;
        Pulse::new(p.center_frequency_hz, p.fractional_bandwidth, p.amplitude)
            .map_err(config_err("pulse"))
    }

    pub fn medium(&self) -> Result<Medium, ExperimentError> {
        Medium::new(self.medium.c_m_per_s).map_err(config_err("medium"))
    }

    /// Noise with the effective per-acquisition std `sigma / √averages`.
    pub fn noise_model(&self) -> Result<NoiseModel, ExperimentError> {
        let averages = self.noise.averages.max(1) as f64;
        NoiseModel::new(self.noise.sigma / averages.sqrt(), self.seed).map_err(config_err("noise"))
    }

    pub fn transmitter_at(
        &self,
        center: Point2,
        normal_angle_deg: f64,
    ) -> Result<Transducer, ExperimentError> {
        Transducer::new(
            center,
            self.transmitter.diameter_mm,
            normal_angle_deg,
            TransducerRole::Transmitter,
        )
        .map_err(config_err("transmitter"))
    }

    /// Number of field-map rows implied by the y scan.
    pub fn map_rows(&self) -> usize {
        (self.scan.y_range_mm / self.scan.y_step_mm + 1e-9).floor() as usize + 1
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// The part of a report that is written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub scenario: Scenario,
    pub provenance: Provenance,
    pub config: ScanConfig,
    pub summary: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    /// Element positions relative to the receiver centre.
    pub positions_mm: Vec<f64>,
    pub peak_amplitude: Vec<f64>,
    /// Peak amplitudes normalised to their maximum.
    pub sensitivity: Vec<f64>,
    pub coupled: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakTraces {
    pub row: usize,
    pub column: usize,
    pub time_s: Vec<f64>,
    pub demuxed: Vec<f64>,
    pub direct: Vec<f64>,
    /// Max absolute difference of the two traces after normalising each to unit peak.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    /// Column positions: element x minus transmitter x, ascending.
    pub x_mm: Vec<f64>,
    /// Row positions: transmitter distance from the mask line.
    pub y_mm: Vec<f64>,
    /// Peak |trace| per pixel, rows × columns.
    pub demuxed: DMatrix<f64>,
    pub direct: DMatrix<f64>,
    pub l2_discrepancy: f64,
    /// Max pixel difference relative to the largest direct pixel.
    pub max_relative_error: f64,
    pub demuxed_noise_std: f64,
    pub direct_noise_std: f64,
    pub peak_traces: PeakTraces,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularRow {
    pub angle_deg: f64,
    pub masked_loss_db: f64,
    pub unmasked_loss_db: f64,
    pub aperture_model_loss_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReportData {
    Uniformity(SensitivityProfile),
    FieldMap(FieldMap),
    Angular(Vec<AngularRow>),
    Gain(GainEstimate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub header: ReportSummary,
    pub data: ReportData,
}

impl ExperimentReport {
    fn new(
        scenario: Scenario,
        cfg: &ScanConfig,
        summary: BTreeMap<String, f64>,
        data: ReportData,
    ) -> Self {
        ExperimentReport {
            header: ReportSummary {
                scenario,
                provenance: Provenance {
                    config_hash: cfg.hash(),
                    seed: cfg.seed,
                },
                config: cfg.clone(),
                summary,
            },
            data,
        }
    }

    pub fn summary(&self, key: &str) -> Option<f64> {
        self.header.summary.get(key).copied()
    }
}

/// Grid covering arrivals from `tx` at every element position.
fn array_grid(
    cfg: &ScanConfig,
    tx: &Transducer,
    geometry: &VirtualArrayGeometry,
    pulse: &Pulse,
    medium: &Medium,
) -> Result<TimeGrid, ExperimentError> {
    let delays: Vec<f64> = (0..geometry.n())
        .map(|j| arrival_delay_s(tx, geometry.element_position(j), medium))
        .collect();
    let lo = delays.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = delays.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(TimeGrid::covering(lo, hi, pulse, cfg.time_step_s)?)
}

fn row_peaks(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|j| m.row(j).amax()).collect()
}

fn db_ratio(reference: f64, value: f64) -> f64 {
    20.0 * (reference / value).log10()
}

struct Prepared {
    cfg: ScanConfig,
    geometry: VirtualArrayGeometry,
    pulse: Pulse,
    medium: Medium,
    noise: NoiseModel,
    code: CodeMatrix,
    demux: Demultiplexer,
}

fn prepare(cfg: &ScanConfig) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let cfg = cfg.clone().resolved();
    let code = cfg.code()?;
    Ok(Prepared {
        geometry: cfg.geometry()?,
        pulse: cfg.pulse()?,
        medium: cfg.medium()?,
        noise: cfg.noise_model()?,
        demux: Demultiplexer::new(&code)?,
        code,
        cfg,
    })
}

impl Prepared {
    /// Clean element signals and the noiseless masked scan for one transmitter.
    fn acquire(&self, tx: &Transducer) -> Result<(SignalMatrix, SignalMatrix), ExperimentError> {
        let grid = array_grid(&self.cfg, tx, &self.geometry, &self.pulse, &self.medium)?;
        let x = element_signals(tx, &self.geometry, &self.pulse, &self.medium, &grid)?;
        let y = masked_scan_from(&x, self.geometry.mask())?;
        Ok((x, y))
    }

    /// Masked scan with noise from `stream`, demultiplexed.
    fn demuxed(&self, y: &SignalMatrix, stream: u64) -> Result<DMatrix<f64>, ExperimentError> {
        let mut noisy = y.values().clone();
        self.noise.add_to(&mut noisy, stream);
        Ok(self.demux.apply(&noisy)?)
    }
}

/// Moves the transmitter in front of each element in turn, demultiplexes a
/// full scan per position and keeps the facing element's peak amplitude.
pub fn run_uniformity_scan(cfg: &ScanConfig) -> Result<ExperimentReport, ExperimentError> {
    let p = prepare(cfg)?;
    let n = p.geometry.n();
    let distance = p.cfg.scan.uniformity_distance_mm;
    let peaks = (0..n)
        .into_par_iter()
        .map(|j| {
            let element = p.geometry.element_position(j);
            let tx = p.cfg.transmitter_at(Point2::new(element.x_mm, distance), 0.0)?;
            let (_, y) = p.acquire(&tx)?;
            let xhat = p.demuxed(&y, j as u64)?;
            Ok(xhat.row(j).amax())
        })
        .collect::<Result<Vec<f64>, ExperimentError>>()?;
    let max = peaks.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(ExperimentError::Precondition(
            "no element received any signal".into(),
        ));
    }
    let sensitivity: Vec<f64> = peaks.iter().map(|v| v / max).collect();
    let coupled: Vec<bool> = (0..n).map(|j| p.geometry.couples(j)).collect();
    let active: Vec<usize> = (0..n).filter(|&j| sensitivity[j] >= 0.5).collect();
    let coupled_min = (0..n)
        .filter(|&j| coupled[j])
        .map(|j| sensitivity[j])
        .fold(f64::INFINITY, f64::min);
    let mut summary = BTreeMap::new();
    summary.insert("n".into(), n as f64);
    summary.insert("active_elements".into(), active.len() as f64);
    if let (Some(&first), Some(&last)) = (active.first(), active.last()) {
        summary.insert("first_active_element".into(), first as f64);
        summary.insert("last_active_element".into(), last as f64);
    }
    summary.insert("min_coupled_sensitivity".into(), coupled_min);
    summary.insert("noise_sigma_effective".into(), p.noise.sigma());
    let profile = SensitivityProfile {
        positions_mm: p.geometry.element_offsets_mm(),
        peak_amplitude: peaks,
        sensitivity,
        coupled,
    };
    Ok(ExperimentReport::new(
        Scenario::Uniformity,
        &p.cfg,
        summary,
        ReportData::Uniformity(profile),
    ))
}

/// One interlace position of a field map before pixel reduction.
struct MapSlice {
    offset_mm: f64,
    clean: Vec<SignalMatrix>,
    demuxed: Vec<DMatrix<f64>>,
    direct: Vec<DMatrix<f64>>,
}

/// Column order that sorts interlaced columns by transmitter-relative x.
fn interlace_order(columns: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..columns.len()).collect();
    idx.sort_by(|&a, &b| columns[a].total_cmp(&columns[b]));
    idx
}

/// Merges per-position pixel blocks (each rows × n) into one map whose
/// columns are sorted by `element x − transmitter x`.
pub fn interlace_maps(
    element_x_mm: &[f64],
    offsets_mm: &[f64],
    blocks: &[DMatrix<f64>],
) -> (Vec<f64>, DMatrix<f64>) {
    let n = element_x_mm.len();
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let mut columns = Vec::with_capacity(n * blocks.len());
    for &off in offsets_mm {
        columns.extend(element_x_mm.iter().map(|x| x - off));
    }
    let order = interlace_order(&columns);
    let mut out = DMatrix::zeros(rows, columns.len());
    for (dst, &src) in order.iter().enumerate() {
        let (k, j) = (src / n, src % n);
        out.set_column(dst, &blocks[k].column(j));
    }
    (order.iter().map(|&i| columns[i]).collect(), out)
}

/// Demultiplexes each raw scan, then concatenates the recovered signals along
/// time.
pub fn demultiplex_then_stitch(
    scans: &[DMatrix<f64>],
    demux: &Demultiplexer,
) -> Result<DMatrix<f64>, MuxError> {
    let parts = scans
        .iter()
        .map(|y| demux.apply(y))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hstack(&parts))
}

/// Concatenates raw scans along time, then demultiplexes once.
pub fn stitch_then_demultiplex(
    scans: &[DMatrix<f64>],
    demux: &Demultiplexer,
) -> Result<DMatrix<f64>, MuxError> {
    demux.apply(&hstack(scans))
}

fn hstack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.first().map_or(0, |p| p.nrows());
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.view_mut((0, at), (rows, p.ncols())).copy_from(p);
        at += p.ncols();
    }
    out
}

/// Scans the transmitter along y and builds the demultiplexed field map next
/// to the direct single-aperture oracle (one aperture per element position,
/// `W = I`) acquired with the same noise level.
pub fn run_field_map(cfg: &ScanConfig) -> Result<ExperimentReport, ExperimentError> {
    let p = prepare(cfg)?;
    let rows = p.cfg.map_rows();
    if rows < 2 {
        return Err(ExperimentError::Precondition(format!(
            "field map needs at least 2 rows, y_range/y_step gives {rows}"
        )));
    }
    let n = p.geometry.n();
    let k_positions = p.cfg.scan.interlace;
    let pitch = p.cfg.pitch_mm();
    let y_mm: Vec<f64> = (0..rows)
        .map(|i| p.cfg.scan.y_start_mm + i as f64 * p.cfg.scan.y_step_mm)
        .collect();
    let slices = (0..k_positions)
        .map(|k| {
            let offset = p.cfg.transmitter.x_mm + k as f64 * pitch / k_positions as f64;
            let per_row = (0..rows)
                .into_par_iter()
                .map(|i| {
                    let tx = p.cfg.transmitter_at(Point2::new(offset, y_mm[i]), 0.0)?;
                    let (x, y) = p.acquire(&tx)?;
                    let stream = 2 * (k * rows + i) as u64;
                    let demuxed = p.demuxed(&y, stream)?;
                    let mut direct = x.values().clone();
                    p.noise.add_to(&mut direct, stream + 1);
                    Ok((x, demuxed, direct))
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let mut slice = MapSlice {
                offset_mm: offset,
                clean: Vec::with_capacity(rows),
                demuxed: Vec::with_capacity(rows),
                direct: Vec::with_capacity(rows),
            };
            for (x, d, r) in per_row {
                slice.clean.push(x);
                slice.demuxed.push(d);
                slice.direct.push(r);
            }
            Ok(slice)
        })
        .collect::<Result<Vec<MapSlice>, ExperimentError>>()?;

    let element_x = p.geometry.element_offsets_mm();
    let offsets: Vec<f64> = slices.iter().map(|s| s.offset_mm).collect();
    let pixel_block = |pick: &dyn Fn(&MapSlice, usize) -> Vec<f64>, s: &MapSlice| {
        let mut m = DMatrix::zeros(rows, n);
        for i in 0..rows {
            for (j, v) in pick(s, i).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    };
    let demux_blocks: Vec<DMatrix<f64>> = slices
        .iter()
        .map(|s| pixel_block(&|s, i| row_peaks(&s.demuxed[i]), s))
        .collect();
    let direct_blocks: Vec<DMatrix<f64>> = slices
        .iter()
        .map(|s| pixel_block(&|s, i| row_peaks(&s.direct[i]), s))
        .collect();
    let (x_mm, demuxed) = interlace_maps(&element_x, &offsets, &demux_blocks);
    let (_, direct) = interlace_maps(&element_x, &offsets, &direct_blocks);

    let diff = &demuxed - &direct;
    let direct_norm = direct.norm();
    let l2_discrepancy = if direct_norm > 0.0 {
        diff.norm() / direct_norm
    } else {
        diff.norm()
    };
    let direct_max = direct.amax();
    let max_relative_error = if direct_max > 0.0 {
        diff.amax() / direct_max
    } else {
        diff.amax()
    };

    let (mut sq_demux, mut sq_direct, mut count) = (0.0, 0.0, 0usize);
    for s in &slices {
        for i in 0..rows {
            let clean = s.clean[i].values();
            sq_demux += (&s.demuxed[i] - clean).norm_squared();
            sq_direct += (&s.direct[i] - clean).norm_squared();
            count += clean.len();
        }
    }
    let demuxed_noise_std = (sq_demux / count as f64).sqrt();
    let direct_noise_std = (sq_direct / count as f64).sqrt();

    let (mut pr, mut pc, mut best) = (0, 0, f64::NEG_INFINITY);
    for i in 0..rows {
        for c in 0..direct.ncols() {
            if direct[(i, c)] > best {
                best = direct[(i, c)];
                pr = i;
                pc = c;
            }
        }
    }
    let order = {
        let mut columns = Vec::with_capacity(n * k_positions);
        for &off in &offsets {
            columns.extend(element_x.iter().map(|x| x - off));
        }
        interlace_order(&columns)
    };
    let (slice_k, element_j) = (order[pc] / n, order[pc] % n);
    let slice = &slices[slice_k];
    let time_s: Vec<f64> = (0..slice.clean[pr].samples())
        .map(|k| slice.clean[pr].time(k))
        .collect();
    let demux_trace: Vec<f64> = slice.demuxed[pr].row(element_j).iter().cloned().collect();
    let direct_trace: Vec<f64> = slice.direct[pr].row(element_j).iter().cloned().collect();
    let normalise = |v: &[f64]| {
        let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        v.iter().map(|x| x / m).collect::<Vec<f64>>()
    };
    let (nd, nr) = (normalise(&demux_trace), normalise(&direct_trace));
    let max_deviation = nd
        .iter()
        .zip(&nr)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let gain = theoretical_gain(p.code.kind(), n)?;
    let mut summary = BTreeMap::new();
    summary.insert("n".into(), n as f64);
    summary.insert("rows".into(), rows as f64);
    summary.insert("columns".into(), x_mm.len() as f64);
    summary.insert("l2_discrepancy".into(), l2_discrepancy);
    summary.insert("max_relative_error".into(), max_relative_error);
    summary.insert("demuxed_noise_std".into(), demuxed_noise_std);
    summary.insert("direct_noise_std".into(), direct_noise_std);
    if demuxed_noise_std > 0.0 {
        summary.insert("noise_std_ratio".into(), direct_noise_std / demuxed_noise_std);
    }
    summary.insert("theoretical_gain".into(), gain);
    summary.insert("peak_trace_max_deviation".into(), max_deviation);
    let map = FieldMap {
        x_mm,
        y_mm,
        demuxed,
        direct,
        l2_discrepancy,
        max_relative_error,
        demuxed_noise_std,
        direct_noise_std,
        peak_traces: PeakTraces {
            row: pr,
            column: pc,
            time_s,
            demuxed: demux_trace,
            direct: direct_trace,
            max_deviation,
        },
    };
    Ok(ExperimentReport::new(
        Scenario::Fieldmap,
        &p.cfg,
        summary,
        ReportData::FieldMap(map),
    ))
}

/// Transmitter on an arc around the receiver centre, pointing at it, at
/// angle `theta_deg` from the receiver axis.
fn arc_transmitter(cfg: &ScanConfig, theta_deg: f64) -> Result<Transducer, ExperimentError> {
    let r = cfg.scan.angular_distance_mm;
    let t = theta_deg.to_radians();
    cfg.transmitter_at(Point2::new(r * t.sin(), r * t.cos()), -theta_deg)
}

/// Loss versus normal incidence for the demultiplexed central element and for
/// the bare receiver, per angle.
pub fn run_angular_response(cfg: &ScanConfig) -> Result<ExperimentReport, ExperimentError> {
    if cfg.scan.angles_deg.is_empty() {
        return Err(ExperimentError::Config("scan.angles_deg is empty".into()));
    }
    let p = prepare(cfg)?;
    let n = p.geometry.n();
    let center = (n - 1) / 2;
    let receiver = *p.geometry.receiver();
    let integration = ReceiverIntegration {
        model: p.cfg.incidence,
        points: None,
    };
    let a = 0.5 * receiver.diameter_mm();
    let mut angles = vec![0.0];
    angles.extend(p.cfg.scan.angles_deg.iter().cloned());
    let peaks = angles
        .par_iter()
        .enumerate()
        .map(|(i, &theta)| {
            let tx = arc_transmitter(&p.cfg, theta)?;
            let (_, y) = p.acquire(&tx)?;
            let masked = p.demuxed(&y, i as u64)?.row(center).amax();
            let r = arrival_delay_s(&tx, receiver.center(), &p.medium);
            let spread = a / p.medium.speed_mm_per_s();
            let grid = TimeGrid::covering(r - spread, r + spread, &p.pulse, p.cfg.time_step_s)?;
            let unmasked = unmasked_detector_signal(
                &tx,
                &receiver,
                0.0,
                &p.pulse,
                &p.medium,
                &grid,
                integration,
            )?
            .peak_abs();
            Ok((masked, unmasked))
        })
        .collect::<Result<Vec<(f64, f64)>, ExperimentError>>()?;
    let (m0, u0) = peaks[0];
    let aperture = p.cfg.aperture_diameter_mm();
    let freq = p.pulse.center_frequency_hz();
    let rows = angles[1..]
        .iter()
        .zip(&peaks[1..])
        .map(|(&theta, &(m, u))| {
            let d = piston_directivity(theta, aperture, freq, &p.medium)?;
            Ok(AngularRow {
                angle_deg: theta,
                masked_loss_db: db_ratio(m0, m),
                unmasked_loss_db: db_ratio(u0, u),
                aperture_model_loss_db: -20.0 * d.abs().log10(),
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut summary = BTreeMap::new();
    summary.insert("n".into(), n as f64);
    summary.insert("central_element".into(), center as f64);
    for row in &rows {
        let tag = format!("{}", row.angle_deg);
        summary.insert(format!("masked_loss_db_at_{tag}"), row.masked_loss_db);
        summary.insert(format!("unmasked_loss_db_at_{tag}"), row.unmasked_loss_db);
    }
    Ok(ExperimentReport::new(
        Scenario::Angular,
        &p.cfg,
        summary,
        ReportData::Angular(rows),
    ))
}

/// Monte-Carlo SNR gain of the masked acquisition over direct per-element
/// measurement with the same σ, for a coaxial transmitter. Trial `i` draws
/// the masked noise from stream `2i` and the direct noise from `2i + 1`.
pub fn run_gain_benchmark(cfg: &ScanConfig) -> Result<ExperimentReport, ExperimentError> {
    if cfg.trials < MIN_BENCHMARK_TRIALS {
        return Err(ExperimentError::Precondition(format!(
            "gain benchmark needs at least {MIN_BENCHMARK_TRIALS} trials, got {}",
            cfg.trials
        )));
    }
    let p = prepare(cfg)?;
    if p.noise.sigma() == 0.0 {
        return Err(ExperimentError::Precondition(
            "gain benchmark needs noise.sigma > 0".into(),
        ));
    }
    let n = p.geometry.n();
    let tx = p.cfg.transmitter_at(
        Point2::new(p.cfg.transmitter.x_mm, p.cfg.scan.gain_distance_mm),
        0.0,
    )?;
    let (x, y) = p.acquire(&tx)?;
    let truth = x.values();
    let clean = y.values();
    let estimate = run_gain_batches(n, x.samples(), p.cfg.trials, truth, |i, tally| {
        let mut noisy = clean.clone();
        p.noise.add_to(&mut noisy, 2 * i as u64);
        let recovered = p.demux.apply(&noisy).expect("dimensions checked");
        let mut direct = truth.clone();
        p.noise.add_to(&mut direct, 2 * i as u64 + 1);
        tally.add(truth, &direct, &recovered);
    });
    let theory = theoretical_gain(CodeKind::SMatrix, n)?;
    let mut summary = BTreeMap::new();
    summary.insert("n".into(), n as f64);
    summary.insert("trials".into(), estimate.trials as f64);
    summary.insert("measured_gain".into(), estimate.measured_gain);
    summary.insert("stderr".into(), estimate.stderr);
    summary.insert("peak_snr_gain".into(), estimate.peak_snr_gain);
    summary.insert("theoretical_gain".into(), theory);
    summary.insert(
        "relative_error".into(),
        (estimate.measured_gain - theory).abs() / theory,
    );
    Ok(ExperimentReport::new(
        Scenario::Gain,
        &p.cfg,
        summary,
        ReportData::Gain(estimate),
    ))
}

pub fn run_scenario(
    scenario: Scenario,
    cfg: &ScanConfig,
) -> Result<ExperimentReport, ExperimentError> {
    match scenario {
        Scenario::Uniformity => run_uniformity_scan(cfg),
        Scenario::Fieldmap => run_field_map(cfg),
        Scenario::Angular => run_angular_response(cfg),
        Scenario::Gain => run_gain_benchmark(cfg),
    }
}
