//! 2D time-domain forward model of the masked single-detector measurement.
//!
//! Geometry lives in the x–y scan plane in millimetres. The receiver faces +y
//! (before rotation) and the mask lies on the receiver face, so the virtual
//! elements sit on the line through the receiver centre along its face
//! direction, spaced by the mask pitch. A transmitter radiates a
//! Gaussian-modulated sine with `1/r` spreading and circular-piston
//! directivity; each open aperture acts as a point detector with the piston
//! directivity of its own diameter. Apertures outside the receiver span do
//! not couple into the receiver.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::MaskPattern;
use crate::multiplex::{MuxError, SignalMatrix, SignalRole};

/// Amplitude reference distance for `1/r` spreading.
pub const REFERENCE_DISTANCE_MM: f64 = 1.0;

/// Envelope standard deviations kept on each side of an arrival by [`TimeGrid::covering`].
pub const WINDOW_SIGMAS: f64 = 6.0;

/// Envelope standard deviations that must lie inside the grid around an arrival.
const REQUIRED_SIGMAS: f64 = 3.0;

/// Samples further than this many envelope sigmas from the pulse centre are zero.
const TRUNCATE_SIGMAS: f64 = 10.0;

const MAX_REFINEMENTS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcousticsError {
    #[error("speed of sound must be positive, got {0} m/s")]
    InvalidMedium(f64),
    #[error("transducer: {0}")]
    InvalidTransducer(String),
    #[error("pulse: {0}")]
    InvalidPulse(String),
    #[error("angle {0}° is outside (-90°, 90°)")]
    AngleOutOfRange(f64),
    #[error("time step {time_step_s:e} s under-resolves the pulse (need <= {max_s:e} s)")]
    UnderResolved { time_step_s: f64, max_s: f64 },
    #[error(
        "time grid [{grid_start_s:e}, {grid_end_s:e}] s does not contain the arrival; \
         required window [{required_start_s:e}, {required_end_s:e}] s"
    )]
    TimeWindow {
        required_start_s: f64,
        required_end_s: f64,
        grid_start_s: f64,
        grid_end_s: f64,
    },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("field point coincides with the transmitter centre")]
    Coincident,
    #[error("aperture at ({0}, {1}) mm is not on the mask line")]
    OffMaskLine(f64, f64),
    #[error("shift {shift} out of range for order {n}")]
    ShiftOutOfRange { shift: usize, n: usize },
    #[error("quadrature spacing {spacing_mm} mm exceeds lambda/4 = {limit_mm} mm")]
    QuadratureUnderResolved { spacing_mm: f64, limit_mm: f64 },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Signal(#[from] MuxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x_mm: f64,
    pub y_mm: f64,
}

impl Point2 {
    pub const fn new(x_mm: f64, y_mm: f64) -> Self {
        Point2 { x_mm, y_mm }
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x_mm + o.x_mm, self.y_mm + o.y_mm)
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x_mm - o.x_mm, self.y_mm - o.y_mm)
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x_mm * s, self.y_mm * s)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x_mm * o.x_mm + self.y_mm * o.y_mm
    }

    /// z-component of the 2D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x_mm * o.y_mm - self.y_mm * o.x_mm
    }

    pub fn norm(self) -> f64 {
        self.x_mm.hypot(self.y_mm)
    }

    /// Counter-clockwise rotation.
    pub fn rotate_deg(self, deg: f64) -> Point2 {
        let (s, c) = deg.to_radians().sin_cos();
        Point2::new(c * self.x_mm - s * self.y_mm, s * self.x_mm + c * self.y_mm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medium {
    speed_of_sound_m_per_s: f64,
}

impl Medium {
    pub fn new(speed_of_sound_m_per_s: f64) -> Result<Self, AcousticsError> {
        if !(speed_of_sound_m_per_s.is_finite() && speed_of_sound_m_per_s > 0.0) {
            return Err(AcousticsError::InvalidMedium(speed_of_sound_m_per_s));
        }
        Ok(Medium {
            speed_of_sound_m_per_s,
        })
    }

    /// Water at about 20 °C.
    pub fn water() -> Self {
        Medium {
            speed_of_sound_m_per_s: 1480.0,
        }
    }

    pub fn speed_of_sound_m_per_s(&self) -> f64 {
        self.speed_of_sound_m_per_s
    }

    pub fn speed_mm_per_s(&self) -> f64 {
        self.speed_of_sound_m_per_s * 1e3
    }

    pub fn wavelength_mm(&self, frequency_hz: f64) -> f64 {
        self.speed_mm_per_s() / frequency_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransducerRole {
    Transmitter,
    Receiver,
}

/// A circular piston. Unrotated, a transmitter faces −y and a receiver faces +y;
/// `normal_angle_deg` rotates the facing direction counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transducer {
    center: Point2,
    diameter_mm: f64,
    normal_angle_deg: f64,
    role: TransducerRole,
}

impl Transducer {
    pub fn new(
        center: Point2,
        diameter_mm: f64,
        normal_angle_deg: f64,
        role: TransducerRole,
    ) -> Result<Self, AcousticsError> {
        if !(diameter_mm.is_finite() && diameter_mm > 0.0) {
            return Err(AcousticsError::InvalidTransducer(format!(
                "diameter must be positive, got {diameter_mm} mm"
            )));
        }
        if !(normal_angle_deg.abs() < 90.0) {
            return Err(AcousticsError::InvalidTransducer(format!(
                "normal angle {normal_angle_deg}° outside (-90°, 90°)"
            )));
        }
        if !(center.x_mm.is_finite() && center.y_mm.is_finite()) {
            return Err(AcousticsError::InvalidTransducer("non-finite centre".into()));
        }
        Ok(Transducer {
            center,
            diameter_mm,
            normal_angle_deg,
            role,
        })
    }

    pub fn transmitter(center: Point2, diameter_mm: f64) -> Result<Self, AcousticsError> {
        Self::new(center, diameter_mm, 0.0, TransducerRole::Transmitter)
    }

    pub fn receiver(center: Point2, diameter_mm: f64) -> Result<Self, AcousticsError> {
        Self::new(center, diameter_mm, 0.0, TransducerRole::Receiver)
    }

    pub fn center(&self) -> Point2 {
        self.center
    }

    pub fn diameter_mm(&self) -> f64 {
        self.diameter_mm
    }

    pub fn normal_angle_deg(&self) -> f64 {
        self.normal_angle_deg
    }

    pub fn role(&self) -> TransducerRole {
        self.role
    }

    /// Unit vector the piston faces.
    pub fn boresight(&self) -> Point2 {
        let base = match self.role {
            TransducerRole::Transmitter => Point2::new(0.0, -1.0),
            TransducerRole::Receiver => Point2::new(0.0, 1.0),
        };
        base.rotate_deg(self.normal_angle_deg)
    }

    /// Unit vector along the face, boresight rotated by −90°.
    pub fn face_direction(&self) -> Point2 {
        self.boresight().rotate_deg(-90.0)
    }

    pub fn translated(&self, by: Point2) -> Self {
        Transducer {
            center: self.center.add(by),
            ..*self
        }
    }

    pub fn rotated(&self, angle_deg: f64) -> Result<Self, AcousticsError> {
        Self::new(
            self.center,
            self.diameter_mm,
            self.normal_angle_deg + angle_deg,
            self.role,
        )
    }
}

/// Gaussian-modulated sine `A·exp(−t²/2τ²)·sin(2πf₀t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    center_frequency_hz: f64,
    fractional_bandwidth: f64,
    amplitude: f64,
}

impl Pulse {
    pub fn new(
        center_frequency_hz: f64,
        fractional_bandwidth: f64,
        amplitude: f64,
    ) -> Result<Self, AcousticsError> {
        if !(center_frequency_hz.is_finite() && center_frequency_hz > 0.0) {
            return Err(AcousticsError::InvalidPulse(format!(
                "centre frequency must be positive, got {center_frequency_hz} Hz"
            )));
        }
        if !(fractional_bandwidth > 0.0 && fractional_bandwidth < 2.0) {
            return Err(AcousticsError::InvalidPulse(format!(
                "fractional bandwidth must lie in (0, 2), got {fractional_bandwidth}"
            )));
        }
        if !amplitude.is_finite() {
            return Err(AcousticsError::InvalidPulse("non-finite amplitude".into()));
        }
        Ok(Pulse {
            center_frequency_hz,
            fractional_bandwidth,
            amplitude,
        })
    }

    pub fn center_frequency_hz(&self) -> f64 {
        self.center_frequency_hz
    }

    pub fn fractional_bandwidth(&self) -> f64 {
        self.fractional_bandwidth
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Pulse { amplitude, ..*self }
    }

    /// Envelope standard deviation τ such that the amplitude spectrum falls to
    /// one half at `f₀ ± B·f₀/2`.
    pub fn envelope_sigma_s(&self) -> f64 {
        let half_width = 0.5 * self.fractional_bandwidth * self.center_frequency_hz;
        (std::f64::consts::LN_2 / 2.0).sqrt() / (PI * half_width)
    }

    pub fn max_time_step_s(&self) -> f64 {
        1.0 / (10.0 * self.center_frequency_hz)
    }

    /// Waveform value at time `t` relative to the pulse centre.
    pub fn value(&self, t: f64) -> f64 {
        let tau = self.envelope_sigma_s();
        self.amplitude
            * (-t * t / (2.0 * tau * tau)).exp()
            * (2.0 * PI * self.center_frequency_hz * t).sin()
    }
}

/// Uniform sampling grid `t_k = (start_index + k)·dt`, `k = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    start_index: i64,
    time_step_s: f64,
    len: usize,
}

impl TimeGrid {
    pub fn new(start_index: i64, time_step_s: f64, len: usize) -> Result<Self, AcousticsError> {
        if !(time_step_s.is_finite() && time_step_s > 0.0) {
            return Err(AcousticsError::InvalidGrid(format!(
                "time step must be positive, got {time_step_s}"
            )));
        }
        if len == 0 {
            return Err(AcousticsError::InvalidGrid("empty grid".into()));
        }
        Ok(TimeGrid {
            start_index,
            time_step_s,
            len,
        })
    }

    /// Smallest grid containing `[earliest − 6τ, latest + 6τ]`.
    pub fn covering(
        earliest_s: f64,
        latest_s: f64,
        pulse: &Pulse,
        time_step_s: f64,
    ) -> Result<Self, AcousticsError> {
        let pad = WINDOW_SIGMAS * pulse.envelope_sigma_s();
        let start = ((earliest_s - pad) / time_step_s).floor() as i64;
        let end = ((latest_s + pad) / time_step_s).ceil() as i64;
        Self::new(start, time_step_s, (end - start + 1) as usize)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn time_step_s(&self) -> f64 {
        self.time_step_s
    }

    pub fn time(&self, k: usize) -> f64 {
        (self.start_index + k as i64) as f64 * self.time_step_s
    }

    pub fn start_s(&self) -> f64 {
        self.time(0)
    }

    pub fn end_s(&self) -> f64 {
        self.time(self.len - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    pub samples: Vec<f64>,
    pub time_step_s: f64,
    pub t0_s: f64,
}

impl SignalTrace {
    fn zeros(grid: &TimeGrid) -> Self {
        SignalTrace {
            samples: vec![0.0; grid.len()],
            time_step_s: grid.time_step_s(),
            t0_s: grid.start_s(),
        }
    }

    pub fn peak_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Bessel function of the first kind, order one. Power series for `|x| <= 15`,
/// Hankel asymptotic expansion beyond.
pub fn bessel_j1(x: f64) -> f64 {
    let ax = x.abs();
    let v = if ax <= 15.0 {
        let q = 0.25 * ax * ax;
        let mut term = 0.5 * ax;
        let mut sum = term;
        let mut k = 0.0;
        loop {
            term *= -q / ((k + 1.0) * (k + 2.0));
            sum += term;
            k += 1.0;
            if term.abs() <= 1e-17 * sum.abs().max(1e-300) && k > ax {
                break;
            }
        }
        sum
    } else {
        let mu = 4.0;
        let mut p = 1.0;
        let mut q = 0.0;
        let mut term: f64 = 1.0;
        for k in 1..60 {
            let odd = (2 * k - 1) as f64;
            let next = term * (mu - odd * odd) / (k as f64 * 8.0 * ax);
            if next.abs() >= term.abs() || next.abs() < 1e-17 {
                break;
            }
            term = next;
            match k % 4 {
                1 => q += term,
                2 => p -= term,
                3 => q -= term,
                _ => p += term,
            }
        }
        let chi = ax - 0.75 * PI;
        (2.0 / (PI * ax)).sqrt() * (p * chi.cos() - q * chi.sin())
    };
    if x < 0.0 {
        -v
    } else {
        v
    }
}

fn piston_pattern(sin_theta: f64, diameter_mm: f64, frequency_hz: f64, medium: &Medium) -> f64 {
    let k = 2.0 * PI / medium.wavelength_mm(frequency_hz);
    let arg = k * 0.5 * diameter_mm * sin_theta;
    if arg.abs() < 1e-8 {
        1.0 - arg * arg / 8.0
    } else {
        2.0 * bessel_j1(arg) / arg
    }
}

/// Far-field circular piston pattern `2J₁(ka·sinθ)/(ka·sinθ)`.
pub fn piston_directivity(
    theta_deg: f64,
    diameter_mm: f64,
    frequency_hz: f64,
    medium: &Medium,
) -> Result<f64, AcousticsError> {
    if !(theta_deg.abs() < 90.0) {
        return Err(AcousticsError::AngleOutOfRange(theta_deg));
    }
    if !(diameter_mm > 0.0 && frequency_hz > 0.0) {
        return Err(AcousticsError::Geometry(
            "diameter and frequency must be positive".into(),
        ));
    }
    Ok(piston_pattern(
        theta_deg.to_radians().sin(),
        diameter_mm,
        frequency_hz,
        medium,
    ))
}

fn check_sampling(pulse: &Pulse, grid: &TimeGrid) -> Result<(), AcousticsError> {
    if grid.time_step_s() > pulse.max_time_step_s() {
        return Err(AcousticsError::UnderResolved {
            time_step_s: grid.time_step_s(),
            max_s: pulse.max_time_step_s(),
        });
    }
    Ok(())
}

fn check_window<I: IntoIterator<Item = f64>>(
    delays_s: I,
    pulse: &Pulse,
    grid: &TimeGrid,
) -> Result<(), AcousticsError> {
    let (lo, hi) = delays_s
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
            (lo.min(d), hi.max(d))
        });
    let pad = REQUIRED_SIGMAS * pulse.envelope_sigma_s();
    let (required_start_s, required_end_s) = (lo - pad, hi + pad);
    let eps = 1e-6 * grid.time_step_s();
    if required_start_s < grid.start_s() - eps || required_end_s > grid.end_s() + eps {
        return Err(AcousticsError::TimeWindow {
            required_start_s,
            required_end_s,
            grid_start_s: grid.start_s(),
            grid_end_s: grid.end_s(),
        });
    }
    Ok(())
}

/// Adds `weight · a(t − delay)` to `out`, touching only samples near the pulse.
fn accumulate_delayed(out: &mut [f64], grid: &TimeGrid, pulse: &Pulse, delay_s: f64, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let reach = TRUNCATE_SIGMAS * pulse.envelope_sigma_s();
    let dt = grid.time_step_s();
    let first = (((delay_s - reach) - grid.start_s()) / dt).floor().max(0.0) as usize;
    let last = ((((delay_s + reach) - grid.start_s()) / dt).ceil().max(0.0) as usize).min(out.len());
    for (k, v) in out.iter_mut().enumerate().take(last).skip(first) {
        *v += weight * pulse.value(grid.time(k) - delay_s);
    }
}

/// The transmitted pulse sampled on `grid`, centred at `t = 0`.
pub fn excitation_pulse(pulse: &Pulse, grid: &TimeGrid) -> Result<SignalTrace, AcousticsError> {
    check_sampling(pulse, grid)?;
    check_window([0.0], pulse, grid)?;
    let mut trace = SignalTrace::zeros(grid);
    for (k, v) in trace.samples.iter_mut().enumerate() {
        *v = pulse.value(grid.time(k));
    }
    Ok(trace)
}

/// Amplitude factor and delay of the transmitted field at `point`.
fn propagation(
    tx: &Transducer,
    point: Point2,
    pulse: &Pulse,
    medium: &Medium,
) -> Result<(f64, f64), AcousticsError> {
    let d = point.sub(tx.center());
    let r = d.norm();
    if r <= 1e-12 {
        return Err(AcousticsError::Coincident);
    }
    let sin_theta = tx.boresight().cross(d.scale(1.0 / r));
    let directivity = piston_pattern(
        sin_theta,
        tx.diameter_mm(),
        pulse.center_frequency_hz(),
        medium,
    );
    Ok((
        REFERENCE_DISTANCE_MM / r * directivity,
        r / medium.speed_mm_per_s(),
    ))
}

/// Arrival delay `r/c` from the transmitter centre to `point`, in seconds.
pub fn arrival_delay_s(tx: &Transducer, point: Point2, medium: &Medium) -> f64 {
    point.sub(tx.center()).norm() / medium.speed_mm_per_s()
}

/// `(r₀/r)·D_tx(θ)·a(t − r/c)` at `point`.
pub fn field_at_point(
    tx: &Transducer,
    point: Point2,
    pulse: &Pulse,
    medium: &Medium,
    grid: &TimeGrid,
) -> Result<SignalTrace, AcousticsError> {
    check_sampling(pulse, grid)?;
    let (amp, delay) = propagation(tx, point, pulse, medium)?;
    check_window([delay], pulse, grid)?;
    let mut trace = SignalTrace::zeros(grid);
    accumulate_delayed(&mut trace.samples, grid, pulse, delay, amp);
    Ok(trace)
}

/// Mask + receiver arrangement that forms the virtual array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualArrayGeometry {
    mask: MaskPattern,
    receiver: Transducer,
    mask_to_detector_gap_mm: f64,
}

impl VirtualArrayGeometry {
    pub fn new(
        mask: MaskPattern,
        receiver: Transducer,
        mask_to_detector_gap_mm: f64,
    ) -> Result<Self, AcousticsError> {
        if receiver.role() != TransducerRole::Receiver {
            return Err(AcousticsError::Geometry(
                "virtual array needs a receiver".into(),
            ));
        }
        if !(mask_to_detector_gap_mm.is_finite() && mask_to_detector_gap_mm >= 0.0) {
            return Err(AcousticsError::Geometry(format!(
                "gap must be non-negative, got {mask_to_detector_gap_mm} mm"
            )));
        }
        Ok(VirtualArrayGeometry {
            mask,
            receiver,
            mask_to_detector_gap_mm,
        })
    }

    pub fn n(&self) -> usize {
        self.mask.order()
    }

    pub fn mask(&self) -> &MaskPattern {
        &self.mask
    }

    pub fn receiver(&self) -> &Transducer {
        &self.receiver
    }

    pub fn mask_to_detector_gap_mm(&self) -> f64 {
        self.mask_to_detector_gap_mm
    }

    /// Signed offset of element `j` from the receiver centre along the face.
    pub fn element_offset_mm(&self, j: usize) -> f64 {
        (j as f64 - (self.n() as f64 - 1.0) / 2.0) * self.mask.pitch_mm()
    }

    pub fn element_offsets_mm(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.element_offset_mm(j)).collect()
    }

    pub fn element_position(&self, j: usize) -> Point2 {
        self.receiver
            .center()
            .add(self.receiver.face_direction().scale(self.element_offset_mm(j)))
    }

    /// Whether element `j` lies in front of the receiver face.
    pub fn couples(&self, j: usize) -> bool {
        self.element_offset_mm(j).abs() <= 0.5 * self.receiver.diameter_mm() + 1e-9
    }

    pub fn translated(&self, by: Point2) -> Self {
        VirtualArrayGeometry {
            receiver: self.receiver.translated(by),
            ..self.clone()
        }
    }

    pub fn with_mask(&self, mask: MaskPattern) -> Self {
        VirtualArrayGeometry {
            mask,
            ..self.clone()
        }
    }
}

/// Field at an aperture centre times the aperture's own piston directivity
/// for the arrival angle relative to the mask normal.
pub fn aperture_signal(
    tx: &Transducer,
    aperture_center: Point2,
    geometry: &VirtualArrayGeometry,
    pulse: &Pulse,
    medium: &Medium,
    grid: &TimeGrid,
) -> Result<SignalTrace, AcousticsError> {
    let mut trace = field_at_point(tx, aperture_center, pulse, medium, grid)?;
    let gain = aperture_gain(tx, aperture_center, geometry, pulse, medium)?;
    for v in &mut trace.samples {
        *v *= gain;
    }
    Ok(trace)
}

fn aperture_gain(
    tx: &Transducer,
    aperture_center: Point2,
    geometry: &VirtualArrayGeometry,
    pulse: &Pulse,
    medium: &Medium,
) -> Result<f64, AcousticsError> {
    let normal = geometry.receiver().boresight();
    let rel = aperture_center.sub(geometry.receiver().center());
    if rel.dot(normal).abs() > 1e-9 * (1.0 + rel.norm()) {
        return Err(AcousticsError::OffMaskLine(
            aperture_center.x_mm,
            aperture_center.y_mm,
        ));
    }
    let incoming = tx.center().sub(aperture_center);
    let r = incoming.norm();
    if r <= 1e-12 {
        return Err(AcousticsError::Coincident);
    }
    let sin_theta = normal.cross(incoming.scale(1.0 / r));
    Ok(piston_pattern(
        sin_theta,
        geometry.mask().aperture_diameter_mm(),
        pulse.center_frequency_hz(),
        medium,
    ))
}

/// Per-element signals as delivered to the receiver: row `j` is the aperture
/// signal at element `j`, zero when the element is outside the receiver span.
pub fn element_signals(
    tx: &Transducer,
    geometry: &VirtualArrayGeometry,
    pulse: &Pulse,
    medium: &Medium,
    grid: &TimeGrid,
) -> Result<SignalMatrix, AcousticsError> {
    check_sampling(pulse, grid)?;
    let n = geometry.n();
    let mut x = DMatrix::zeros(n, grid.len());
    let mut row = vec![0.0; grid.len()];
    for j in 0..n {
        if !geometry.couples(j) {
            continue;
        }
        let p = geometry.element_position(j);
        let (amp, delay) = propagation(tx, p, pulse, medium)?;
        check_window([delay], pulse, grid)?;
        let gain = aperture_gain(tx, p, geometry, pulse, medium)?;
        row.iter_mut().for_each(|v| *v = 0.0);
        accumulate_delayed(&mut row, grid, pulse, delay, amp);
        for (k, v) in row.iter().enumerate() {
            x[(j, k)] = v * gain;
        }
    }
    Ok(SignalMatrix::new(
        x,
        grid.time_step_s(),
        grid.start_s(),
        SignalRole::TrueField,
    )?)
}

fn window_sum(x: &DMatrix<f64>, window: &[u8]) -> Vec<f64> {
    let mut out = vec![0.0; x.ncols()];
    for (j, &open) in window.iter().enumerate() {
        if open == 0 {
            continue;
        }
        for (k, v) in out.iter_mut().enumerate() {
            *v += x[(j, k)];
        }
    }
    out
}

/// Receiver output with the mask at `shift`: the sum of the element signals
/// behind open cells of the current window.
pub fn masked_detector_signal(
    tx: &Transducer,
    geometry: &VirtualArrayGeometry,
    shift: usize,
    pulse: &Pulse,
    medium: &Medium,
    grid: &TimeGrid,
) -> Result<SignalTrace, AcousticsError> {
    let n = geometry.n();
    if shift >= n {
        return Err(AcousticsError::ShiftOutOfRange { shift, n });
    }
    let x = element_signals(tx, geometry, pulse, medium, grid)?;
    Ok(SignalTrace {
        samples: window_sum(x.values(), geometry.mask().window(shift)),
        time_step_s: grid.time_step_s(),
        t0_s: grid.start_s(),
    })
}

/// All `n` mask positions stacked as rows: the noiseless measurement `Y`.
pub fn masked_scan(
    tx: &Transducer,
    geometry: &VirtualArrayGeometry,
    pulse: &Pulse,
    medium: &Medium,
    grid: &TimeGrid,
) -> Result<SignalMatrix, AcousticsError> {
    let x = element_signals(tx, geometry, pulse, medium, grid)?;
    Ok(masked_scan_from(&x, geometry.mask())?)
}

/// Mask scan applied to precomputed element signals.
pub fn masked_scan_from(x: &SignalMatrix, mask: &MaskPattern) -> Result<SignalMatrix, MuxError> {
    let n = mask.order();
    if x.n() != n {
        return Err(MuxError::Dimension {
            expected: n,
            got: x.n(),
        });
    }
    let mut y = DMatrix::zeros(n, x.samples());
    for shift in 0..n {
        let row = window_sum(x.values(), mask.window(shift));
        for (k, v) in row.into_iter().enumerate() {
            y[(shift, k)] = v;
        }
    }
    SignalMatrix::new(y, x.time_step_s(), x.t0_s(), SignalRole::Measured)
}

/// How the incident field is evaluated across the receiver face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidenceModel {
    /// Local plane wave: amplitude and delay at the receiver centre, linear
    /// delay across the face along the propagation direction.
    #[default]
    PlaneWave,
    /// Exact point-source geometry at every quadrature point.
    Spherical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReceiverIntegration {
    pub model: IncidenceModel,
    /// Fixed quadrature size; `None` refines from `max(64, 2a/(λ/4))` points
    /// until successive peaks differ by less than 0.1 dB.
    pub points: Option<usize>,
}

fn chord_quadrature(
    tx: &Transducer,
    receiver: &Transducer,
    pulse: &Pulse,
    medium: &Medium,
    grid: &TimeGrid,
    model: IncidenceModel,
    points: usize,
) -> Result<SignalTrace, AcousticsError> {
    let a = 0.5 * receiver.diameter_mm();
    let face = receiver.face_direction();
    let du = 2.0 * a / points as f64;
    let c = medium.speed_mm_per_s();
    let mut terms = Vec::with_capacity(points);
    let (center_amp, center_delay) = propagation(tx, receiver.center(), pulse, medium)?;
    let propagation_dir = receiver.center().sub(tx.center());
    let along = face.dot(propagation_dir.scale(1.0 / propagation_dir.norm()));
    let offsets: Vec<f64> = (0..points).map(|i| -a + (i as f64 + 0.5) * du).collect();
    // Disc chord profile, normalised so the weights sum to the diameter.
    let profile: Vec<f64> = offsets
        .iter()
        .map(|u| (1.0 - (u / a).powi(2)).max(0.0).sqrt())
        .collect();
    let norm = 2.0 * a / profile.iter().sum::<f64>();
    for (&u, &shape) in offsets.iter().zip(&profile) {
        let weight = shape * norm;
        let (amp, delay) = match model {
            IncidenceModel::PlaneWave => (center_amp, center_delay + u * along / c),
            IncidenceModel::Spherical => {
                propagation(tx, receiver.center().add(face.scale(u)), pulse, medium)?
            }
        };
        terms.push((amp * weight, delay));
    }
    check_window(terms.iter().map(|t| t.1), pulse, grid)?;
    let mut trace = SignalTrace::zeros(grid);
    for (w, d) in terms {
        accumulate_delayed(&mut trace.samples, grid, pulse, d, w);
    }
    Ok(trace)
}

/// Output of the bare (unmasked) receiver rotated by `angle_deg`: the field
/// integrated across the receiver diameter with disc apodization.
pub fn unmasked_detector_signal(
    tx: &Transducer,
    receiver: &Transducer,
    angle_deg: f64,
    pulse: &Pulse,
    medium: &Medium,
    grid: &TimeGrid,
    integration: ReceiverIntegration,
) -> Result<SignalTrace, AcousticsError> {
    check_sampling(pulse, grid)?;
    let rotated = receiver.rotated(angle_deg)?;
    let diameter = rotated.diameter_mm();
    let limit_mm = medium.wavelength_mm(pulse.center_frequency_hz()) / 4.0;
    if let Some(points) = integration.points {
        let spacing_mm = diameter / points.max(1) as f64;
        if points == 0 || spacing_mm > limit_mm {
            return Err(AcousticsError::QuadratureUnderResolved {
                spacing_mm,
                limit_mm,
            });
        }
        return chord_quadrature(tx, &rotated, pulse, medium, grid, integration.model, points);
    }
    let mut points = 64usize.max((diameter / limit_mm).ceil() as usize);
    let mut coarse = chord_quadrature(tx, &rotated, pulse, medium, grid, integration.model, points)?;
    for _ in 0..MAX_REFINEMENTS {
        points *= 2;
        let fine = chord_quadrature(tx, &rotated, pulse, medium, grid, integration.model, points)?;
        let delta_db = 20.0 * (fine.peak_abs() / coarse.peak_abs()).log10();
        coarse = fine;
        if delta_db.abs() < 0.1 {
            break;
        }
    }
    Ok(coarse)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// J₁(x) = (1/2π)∫₀^{2π} cos(τ − x sin τ) dτ, trapezoid rule on the full period.
    fn j1_integral(x: f64) -> f64 {
        let m = 4096;
        (0..m)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / m as f64;
                (t - x * t.sin()).cos()
            })
            .sum::<f64>()
            / m as f64
    }

    fn directivity_oracle(theta_deg: f64, diameter_mm: f64) -> f64 {
        let k = 2.0 * PI / 1.48;
        let x = k * diameter_mm / 2.0 * theta_deg.to_radians().sin();
        2.0 * j1_integral(x) / x
    }

    fn db(v: f64) -> f64 {
        20.0 * v.abs().log10()
    }

    #[test]
    fn bessel_matches_integral_representation() {
        let mut x = -40.0;
        while x <= 120.0 {
            let err = (bessel_j1(x) - j1_integral(x)).abs();
            assert!(err < 1e-9, "x = {x}: err {err}");
            x += 0.173;
        }
        for x in [14.999, 15.0, 15.001, 1e-6, 0.0] {
            assert!((bessel_j1(x) - j1_integral(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn directivity_values() {
        let water = Medium::water();
        assert_eq!(piston_directivity(0.0, 38.0, 1e6, &water).unwrap(), 1.0);
        let big = piston_directivity(10.0, 38.0, 1e6, &water).unwrap();
        assert!((big - directivity_oracle(10.0, 38.0)).abs() < 1e-9);
        assert!((big.abs() - 0.0190).abs() < 5e-4, "{big}");
        assert!((db(big) + 34.4).abs() < 0.1);
        let small = piston_directivity(10.0, 1.0, 1e6, &water).unwrap();
        assert!((small - 0.983).abs() < 1e-3);
        assert!((db(small) + 0.15).abs() < 0.01);
        let oblique = piston_directivity(40.0, 1.0, 1e6, &water).unwrap();
        assert!((oblique - directivity_oracle(40.0, 1.0)).abs() < 1e-9);
        assert!((oblique - 0.785).abs() < 0.005, "{oblique}");
        assert!(piston_directivity(90.0, 1.0, 1e6, &water).is_err());
    }

    #[test]
    fn directivity_bounded_and_peaked() {
        let water = Medium::water();
        let mut theta = -89.0;
        while theta < 89.0 {
            let d = piston_directivity(theta, 12.7, 1e6, &water).unwrap();
            assert!(d.abs() <= 1.0);
            if theta != 0.0 {
                assert!(d.abs() < 1.0);
            }
            theta += 0.25;
        }
    }

    fn grid(lo: f64, hi: f64, pulse: &Pulse) -> TimeGrid {
        TimeGrid::covering(lo, hi, pulse, 1e-8).unwrap()
    }

    #[test]
    fn pulse_shape() {
        let p = Pulse::new(1e6, 0.6, 2.5).unwrap();
        let g = grid(0.0, 0.0, &p);
        let tr = excitation_pulse(&p, &g).unwrap();
        let zero = (-g.start_s() / g.time_step_s()).round() as usize;
        assert!(g.time(zero).abs() < 1e-20);
        assert_eq!(tr.samples[zero], 0.0);
        assert!(tr.peak_abs() <= 2.5);
        let tau = p.envelope_sigma_s();
        let quarter = 0.25e-6;
        assert!((p.value(quarter) - 2.5 * (-quarter * quarter / (2.0 * tau * tau)).exp()).abs() < 1e-12);
    }

    #[test]
    fn pulse_spectrum_peaks_at_centre() {
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let g = TimeGrid::covering(0.0, 10e-6, &p, 1e-8).unwrap();
        let tr = excitation_pulse(&p, &g).unwrap();
        let n = tr.samples.len();
        let df = 1.0 / (n as f64 * g.time_step_s());
        let mag = |f: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, v) in tr.samples.iter().enumerate() {
                let ph = -2.0 * PI * f * g.time(k);
                re += v * ph.cos();
                im += v * ph.sin();
            }
            re.hypot(im)
        };
        let best = (1..n / 2)
            .map(|b| b as f64 * df)
            .max_by(|a, b| mag(*a).partial_cmp(&mag(*b)).unwrap())
            .unwrap();
        assert!((best - 1e6).abs() <= df, "peak at {best} Hz");
        // half-amplitude points at f₀(1 ± B/2)
        let peak = mag(1e6);
        assert!((mag(0.7e6) / peak - 0.5).abs() < 0.01);
        assert!((mag(1.3e6) / peak - 0.5).abs() < 0.01);
    }

    #[test]
    fn pulse_rejects_coarse_grid() {
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let g = TimeGrid::covering(0.0, 0.0, &p, 2e-7).unwrap();
        assert!(matches!(
            excitation_pulse(&p, &g),
            Err(AcousticsError::UnderResolved { .. })
        ));
        assert!(Pulse::new(1e6, 2.0, 1.0).is_err());
        assert!(Pulse::new(0.0, 0.5, 1.0).is_err());
    }

    fn tx_at(x: f64, y: f64) -> Transducer {
        Transducer::transmitter(Point2::new(x, y), 12.7).unwrap()
    }

    #[test]
    fn spreading_and_delay() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let tx = tx_at(0.0, 300.0);
        let g = grid(0.0, 250e-6, &p);
        let near = field_at_point(&tx, Point2::new(0.0, 150.0), &p, &water, &g).unwrap();
        let far = field_at_point(&tx, Point2::new(0.0, 0.0), &p, &water, &g).unwrap();
        assert!((near.peak_abs() / far.peak_abs() - 2.0).abs() < 1e-3);
        let delay = arrival_delay_s(&tx, Point2::new(0.0, 150.0), &water);
        assert!((delay * 1e6 - 101.35).abs() < 0.01);
    }

    #[test]
    fn off_axis_follows_directivity() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let tx = tx_at(0.0, 150.0);
        let g = grid(90e-6, 120e-6, &p);
        let on = field_at_point(&tx, Point2::new(0.0, 0.0), &p, &water, &g).unwrap();
        for deg in [2.0, 5.0, 8.0] {
            let t = f64::to_radians(deg);
            let pt = Point2::new(150.0 * t.sin(), 150.0 - 150.0 * t.cos());
            let off = field_at_point(&tx, pt, &p, &water, &g).unwrap();
            let ratio = off.peak_abs() / on.peak_abs();
            let want = directivity_oracle(deg, 12.7).abs();
            assert!((ratio - want).abs() < 2e-3 * want.max(0.05), "{deg}: {ratio} vs {want}");
        }
    }

    #[test]
    fn missing_arrival_window() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let tx = tx_at(0.0, 150.0);
        let g = grid(0.0, 10e-6, &p);
        match field_at_point(&tx, Point2::new(0.0, 0.0), &p, &water, &g) {
            Err(AcousticsError::TimeWindow { required_start_s, .. }) => {
                assert!(required_start_s > 90e-6)
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            field_at_point(&tx, tx.center(), &p, &water, &g),
            Err(AcousticsError::Coincident)
        ));
    }

    fn geometry(n: usize, pitch: f64, diameter: f64, receiver_mm: f64) -> VirtualArrayGeometry {
        let mask = MaskPattern::s_matrix(n, pitch, diameter).unwrap();
        let rx = Transducer::receiver(Point2::new(0.0, 0.0), receiver_mm).unwrap();
        VirtualArrayGeometry::new(mask, rx, 1.5).unwrap()
    }

    #[test]
    fn aperture_on_axis_equals_field() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let geo = geometry(7, 1.0, 1.0, 38.0);
        let tx = tx_at(0.0, 150.0);
        let g = grid(95e-6, 110e-6, &p);
        let a = aperture_signal(&tx, Point2::new(0.0, 0.0), &geo, &p, &water, &g).unwrap();
        let f = field_at_point(&tx, Point2::new(0.0, 0.0), &p, &water, &g).unwrap();
        assert_eq!(a, f);
        let scaled = aperture_signal(&tx, Point2::new(0.0, 0.0), &geo, &p.with_amplitude(3.0), &water, &g)
            .unwrap();
        for (s, v) in scaled.samples.iter().zip(&a.samples) {
            assert!((s - 3.0 * v).abs() <= 1e-15 * (1.0 + v.abs()));
        }
        assert!(matches!(
            aperture_signal(&tx, Point2::new(0.0, 2.0), &geo, &p, &water, &g),
            Err(AcousticsError::OffMaskLine(..))
        ));
    }

    #[test]
    fn oblique_aperture_loss() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let geo = geometry(7, 1.0, 1.0, 38.0);
        let r = 220.0;
        let t = f64::to_radians(40.0);
        let tx = Transducer::new(
            Point2::new(r * t.sin(), r * t.cos()),
            12.7,
            -40.0,
            TransducerRole::Transmitter,
        )
        .unwrap();
        let g = grid(140e-6, 160e-6, &p);
        let a = aperture_signal(&tx, Point2::new(0.0, 0.0), &geo, &p, &water, &g).unwrap();
        let f = field_at_point(&tx, Point2::new(0.0, 0.0), &p, &water, &g).unwrap();
        let ratio = a.peak_abs() / f.peak_abs();
        assert!((ratio - directivity_oracle(40.0, 1.0)).abs() < 1e-6);
        assert!((db(ratio) + 2.2).abs() < 0.15);
    }

    #[test]
    fn masked_signal_superposition() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let geo = geometry(7, 1.0, 1.0, 38.0);
        let tx = tx_at(1.3, 120.0);
        let g = grid(75e-6, 90e-6, &p);
        for shift in 0..7 {
            let sum = masked_detector_signal(&tx, &geo, shift, &p, &water, &g).unwrap();
            let mut want = vec![0.0; g.len()];
            for (j, &cell) in geo.mask().window(shift).iter().enumerate() {
                let a = aperture_signal(&tx, geo.element_position(j), &geo, &p, &water, &g).unwrap();
                for (w, v) in want.iter_mut().zip(&a.samples) {
                    *w += cell as f64 * v;
                }
            }
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in sum.samples.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
        assert!(masked_detector_signal(&tx, &geo, 7, &p, &water, &g).is_err());
    }

    #[test]
    fn all_open_and_all_closed_masks() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let geo = geometry(7, 1.0, 1.0, 38.0);
        let tx = tx_at(0.0, 100.0);
        let g = grid(60e-6, 75e-6, &p);
        let x = element_signals(&tx, &geo, &p, &water, &g).unwrap();
        let open = MaskPattern::from_code(&[1; 7], 1.0, 1.0).unwrap();
        let closed = MaskPattern::from_code(&[0; 7], 1.0, 1.0).unwrap();
        let y_open = masked_detector_signal(&tx, &geo.with_mask(open), 3, &p, &water, &g).unwrap();
        let y_closed = masked_detector_signal(&tx, &geo.with_mask(closed), 3, &p, &water, &g).unwrap();
        for k in 0..g.len() {
            let total: f64 = x.values().column(k).sum();
            assert!((y_open.samples[k] - total).abs() < 1e-15);
            assert_eq!(y_closed.samples[k], 0.0);
        }
    }

    #[test]
    fn translation_leaves_traces_unchanged() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let geo = geometry(7, 1.0, 1.0, 38.0);
        let tx = tx_at(-2.0, 90.0);
        let g = grid(55e-6, 70e-6, &p);
        let by = Point2::new(13.25, -4.5);
        let a = masked_scan(&tx, &geo, &p, &water, &g).unwrap();
        let b = masked_scan(&tx.translated(by), &geo.translated(by), &p, &water, &g).unwrap();
        let scale = a.values().amax();
        assert!((a.values() - b.values()).amax() <= 1e-12 * scale);
    }

    #[test]
    fn receiver_span_gates_elements() {
        let geo = geometry(59, 1.0, 1.0, 38.0);
        let active: Vec<usize> = (0..59).filter(|&j| geo.couples(j)).collect();
        assert_eq!(active.first(), Some(&10));
        assert_eq!(active.last(), Some(&48));
    }

    fn on_axis_loss(angle: f64, distance: f64, model: IncidenceModel) -> f64 {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let rx = Transducer::receiver(Point2::new(0.0, 0.0), 38.0).unwrap();
        let tx = tx_at(0.0, distance);
        let t0 = distance / water.speed_mm_per_s();
        let g = grid(t0 - 20e-6, t0 + 20e-6, &p);
        let integ = ReceiverIntegration { model, points: None };
        let base = unmasked_detector_signal(&tx, &rx, 0.0, &p, &water, &g, integ).unwrap();
        let tilted = unmasked_detector_signal(&tx, &rx, angle, &p, &water, &g, integ).unwrap();
        db(base.peak_abs() / tilted.peak_abs())
    }

    #[test]
    fn unmasked_loss_matches_piston_pattern() {
        let loss = on_axis_loss(10.0, 220.0, IncidenceModel::PlaneWave);
        assert!((loss - 34.4).abs() <= 1.5, "loss {loss}");
        // Spherical incidence far away converges to the same far-field pattern.
        let far = on_axis_loss(10.0, 20_000.0, IncidenceModel::Spherical);
        assert!((far - 34.4).abs() <= 1.5, "far loss {far}");
    }

    #[test]
    fn unmasked_loss_is_even() {
        for angle in [10.0, 25.0, 40.0] {
            let a = on_axis_loss(angle, 220.0, IncidenceModel::PlaneWave);
            let b = on_axis_loss(-angle, 220.0, IncidenceModel::PlaneWave);
            assert!((a - b).abs() < 0.1);
        }
    }

    #[test]
    fn unmasked_normal_incidence_scales_with_length() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let tx = tx_at(0.0, 5000.0);
        let t0 = 5000.0 / water.speed_mm_per_s();
        let g = grid(t0 - 10e-6, t0 + 10e-6, &p);
        let integ = ReceiverIntegration::default();
        let f = field_at_point(&tx, Point2::new(0.0, 0.0), &p, &water, &g).unwrap();
        for d in [10.0, 20.0, 38.0] {
            let rx = Transducer::receiver(Point2::new(0.0, 0.0), d).unwrap();
            let s = unmasked_detector_signal(&tx, &rx, 0.0, &p, &water, &g, integ).unwrap();
            for (a, b) in s.samples.iter().zip(&f.samples) {
                assert!((a - d * b).abs() <= 1e-9 * d * f.peak_abs());
            }
        }
    }

    #[test]
    fn rotating_receiver_equals_moving_transmitter() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let rx = Transducer::receiver(Point2::new(0.0, 0.0), 38.0).unwrap();
        let r = 220.0;
        let t0 = r / water.speed_mm_per_s();
        let g = grid(t0 - 20e-6, t0 + 20e-6, &p);
        let integ = ReceiverIntegration { model: IncidenceModel::PlaneWave, points: Some(512) };
        let rotated = unmasked_detector_signal(&tx_at(0.0, r), &rx, -30.0, &p, &water, &g, integ).unwrap();
        let th = f64::to_radians(30.0);
        let arc = Transducer::new(Point2::new(r * th.sin(), r * th.cos()), 12.7, -30.0, TransducerRole::Transmitter)
            .unwrap();
        let moved = unmasked_detector_signal(&arc, &rx, 0.0, &p, &water, &g, integ).unwrap();
        let scale = rotated.peak_abs().max(moved.peak_abs());
        for (a, b) in rotated.samples.iter().zip(&moved.samples) {
            assert!((a - b).abs() <= 1e-9 * scale.max(1e-12));
        }
    }

    #[test]
    fn quadrature_under_resolution_is_rejected() {
        let water = Medium::water();
        let p = Pulse::new(1e6, 0.6, 1.0).unwrap();
        let rx = Transducer::receiver(Point2::new(0.0, 0.0), 38.0).unwrap();
        let g = grid(140e-6, 160e-6, &p);
        let integ = ReceiverIntegration { model: IncidenceModel::PlaneWave, points: Some(64) };
        assert!(matches!(
            unmasked_detector_signal(&tx_at(0.0, 220.0), &rx, 0.0, &p, &water, &g, integ),
            Err(AcousticsError::QuadratureUnderResolved { .. })
        ));
    }
}
