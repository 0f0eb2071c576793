//! Multiplexed measurement `Y = W·X + N`, demultiplexing `X̂ = W⁻¹·Y`, and the
//! noise statistics that follow from it: covariance `σ²(WᵀW)⁻¹`, average MSE
//! and the SNR gain over direct (W = I) measurement.
//!
//! Noise is always added after the matrix product. Every random draw comes
//! from a ChaCha stream selected by `(master_seed, stream_index)`, so results
//! do not depend on how work is scheduled across threads.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::{s_matrix_inverse, CodeError, CodeKind, CodeMatrix};

/// Custom matrices with a larger 2-norm condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

/// Number of contiguous trial batches used for Monte-Carlo standard errors.
pub const GAIN_BATCHES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MuxError {
    #[error("dimension mismatch: code order {expected}, signal has {got} rows")]
    Dimension { expected: usize, got: usize },
    #[error("weighing matrix is singular or ill-conditioned (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("signal matrix needs at least one time sample")]
    Empty,
    #[error("need at least {min} trials, got {got}")]
    TooFewTrials { min: usize, got: usize },
    #[error("gain estimation needs sigma > 0")]
    ZeroSigma,
    #[error("no closed-form gain for {kind:?} at order {n}")]
    NoClosedForm { kind: CodeKind, n: usize },
    #[error(transparent)]
    Code(#[from] CodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalRole {
    TrueField,
    Measured,
    Recovered,
}

/// `n × t` block of time signals, one row per element or measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    values: DMatrix<f64>,
    time_step_s: f64,
    t0_s: f64,
    role: SignalRole,
}

impl SignalMatrix {
    pub fn new(
        values: DMatrix<f64>,
        time_step_s: f64,
        t0_s: f64,
        role: SignalRole,
    ) -> Result<Self, MuxError> {
        if !(time_step_s.is_finite() && time_step_s > 0.0) {
            return Err(MuxError::InvalidTimeStep(time_step_s));
        }
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(MuxError::Empty);
        }
        Ok(SignalMatrix {
            values,
            time_step_s,
            t0_s,
            role,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn time_step_s(&self) -> f64 {
        self.time_step_s
    }

    pub fn t0_s(&self) -> f64 {
        self.t0_s
    }

    pub fn role(&self) -> SignalRole {
        self.role
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0_s + k as f64 * self.time_step_s
    }

    fn with_values(&self, values: DMatrix<f64>, role: SignalRole) -> Self {
        SignalMatrix {
            values,
            time_step_s: self.time_step_s,
            t0_s: self.t0_s,
            role,
        }
    }
}

/// Additive i.i.d. Gaussian detector noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    sigma: f64,
    master_seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, master_seed: u64) -> Result<Self, MuxError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(MuxError::InvalidSigma(sigma));
        }
        Ok(NoiseModel { sigma, master_seed })
    }

    pub fn noiseless() -> Self {
        NoiseModel {
            sigma: 0.0,
            master_seed: 0,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Independent generator for one trial / scan position.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index);
        rng
    }

    /// Adds `σ·z` to every entry (column-major order), drawing from stream `index`.
    pub fn add_to(&self, values: &mut DMatrix<f64>, index: u64) {
        if self.sigma == 0.0 {
            return;
        }
        let mut rng = self.stream(index);
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += self.sigma * z;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// 2-norm condition number from the singular values.
pub fn condition_estimate(w: &DMatrix<f64>) -> f64 {
    let sv = w.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `W⁻¹`: closed form for S-matrices, `Hᵀ/n` for Hadamard, and an LU inverse
/// behind a condition-number guard for anything else.
pub fn inverse(w: &CodeMatrix) -> Result<DMatrix<f64>, MuxError> {
    let n = w.n();
    match w.kind() {
        CodeKind::SMatrix => Ok(s_matrix_inverse(w)?),
        CodeKind::Hadamard => Ok(DMatrix::from_fn(n, n, |i, j| w.get(j, i) as f64 / n as f64)),
        CodeKind::Identity => Ok(DMatrix::identity(n, n)),
        CodeKind::Custom => {
            let dense = w.to_f64();
            let condition = condition_estimate(&dense);
            if !(condition <= MAX_CONDITION) {
                return Err(MuxError::Singular { condition });
            }
            dense
                .try_inverse()
                .ok_or(MuxError::Singular { condition })
        }
    }
}

/// Reusable `W⁻¹` for repeated demultiplexing with the same code.
#[derive(Debug, Clone)]
pub struct Demultiplexer {
    inverse: DMatrix<f64>,
}

impl Demultiplexer {
    pub fn new(w: &CodeMatrix) -> Result<Self, MuxError> {
        Ok(Demultiplexer {
            inverse: inverse(w)?,
        })
    }

    pub fn n(&self) -> usize {
        self.inverse.nrows()
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn apply(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>, MuxError> {
        if y.nrows() != self.n() {
            return Err(MuxError::Dimension {
                expected: self.n(),
                got: y.nrows(),
            });
        }
        Ok(&self.inverse * y)
    }
}

/// `Y = W·X + N` with noise drawn from stream 0 of `noise`.
pub fn multiplex_measure(
    x: &SignalMatrix,
    w: &CodeMatrix,
    noise: &NoiseModel,
) -> Result<SignalMatrix, MuxError> {
    multiplex_measure_stream(x, w, noise, 0)
}

pub fn multiplex_measure_stream(
    x: &SignalMatrix,
    w: &CodeMatrix,
    noise: &NoiseModel,
    stream: u64,
) -> Result<SignalMatrix, MuxError> {
    if x.n() != w.n() {
        return Err(MuxError::Dimension {
            expected: w.n(),
            got: x.n(),
        });
    }
    let mut y = w.to_f64() * x.values();
    noise.add_to(&mut y, stream);
    Ok(x.with_values(y, SignalRole::Measured))
}

/// `X̂ = W⁻¹·Y`.
pub fn demultiplex(y: &SignalMatrix, w: &CodeMatrix) -> Result<SignalMatrix, MuxError> {
    if y.n() != w.n() {
        return Err(MuxError::Dimension {
            expected: w.n(),
            got: y.n(),
        });
    }
    let recovered = Demultiplexer::new(w)?.apply(y.values())?;
    Ok(y.with_values(recovered, SignalRole::Recovered))
}

/// `(WᵀW)⁻¹` computed from the exact integer Gram matrix by Cholesky, a route
/// independent of [`inverse`].
fn inverse_gram(w: &CodeMatrix) -> Result<DMatrix<f64>, MuxError> {
    let n = w.n();
    if w.kind() == CodeKind::Custom {
        let condition = condition_estimate(&w.to_f64());
        if !(condition <= MAX_CONDITION) {
            return Err(MuxError::Singular { condition });
        }
    }
    let gram = w.column_gram();
    let g = DMatrix::from_fn(n, n, |i, j| gram[i * n + j] as f64);
    let chol = g.cholesky().ok_or(MuxError::Singular {
        condition: f64::INFINITY,
    })?;
    Ok(chol.inverse())
}

/// `K = σ²·(WᵀW)⁻¹`.
pub fn noise_covariance(w: &CodeMatrix, sigma: f64) -> Result<CovarianceMatrix, MuxError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(MuxError::InvalidSigma(sigma));
    }
    let inv = inverse_gram(w)?;
    let sym = (&inv + inv.transpose()) * (0.5 * sigma * sigma);
    Ok(CovarianceMatrix(sym))
}

/// `M = σ²/n · tr[(WᵀW)⁻¹]`.
pub fn average_mse(w: &CodeMatrix, sigma: f64) -> Result<f64, MuxError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(MuxError::InvalidSigma(sigma));
    }
    Ok(sigma * sigma / w.n() as f64 * inverse_gram(w)?.trace())
}

/// `G = √(n / tr[(WᵀW)⁻¹])`.
pub fn snr_gain(w: &CodeMatrix) -> Result<f64, MuxError> {
    Ok((w.n() as f64 / inverse_gram(w)?.trace()).sqrt())
}

/// Closed-form gain: `(n+1)/(2√n)` for S-matrices, `√n` for Hadamard, 1 for identity.
pub fn theoretical_gain(kind: CodeKind, n: usize) -> Result<f64, MuxError> {
    let nf = n as f64;
    match kind {
        CodeKind::SMatrix if n == 1 => Ok(1.0),
        CodeKind::SMatrix => {
            crate::codes::CodeOrder::s_matrix(n)?;
            Ok((nf + 1.0) / (2.0 * nf.sqrt()))
        }
        CodeKind::Hadamard if n > 0 && n.is_power_of_two() => Ok(nf.sqrt()),
        CodeKind::Identity if n > 0 => Ok(1.0),
        _ => Err(MuxError::NoClosedForm { kind, n }),
    }
}

/// Per-element squared-error and mean-trace accumulators for comparing a
/// multiplexed acquisition against direct measurement of the same signals.
#[derive(Debug, Clone)]
pub struct GainTally {
    direct_sq: Vec<f64>,
    mux_sq: Vec<f64>,
    direct_sum: DMatrix<f64>,
    mux_sum: DMatrix<f64>,
    samples_per_element: usize,
    trials: usize,
}

impl GainTally {
    pub fn new(n: usize, samples: usize) -> Self {
        GainTally {
            direct_sq: vec![0.0; n],
            mux_sq: vec![0.0; n],
            direct_sum: DMatrix::zeros(n, samples),
            mux_sum: DMatrix::zeros(n, samples),
            samples_per_element: 0,
            trials: 0,
        }
    }

    /// Records one trial. All matrices are `n × t`.
    pub fn add(&mut self, truth: &DMatrix<f64>, direct: &DMatrix<f64>, recovered: &DMatrix<f64>) {
        for j in 0..truth.nrows() {
            for k in 0..truth.ncols() {
                let d = direct[(j, k)] - truth[(j, k)];
                let m = recovered[(j, k)] - truth[(j, k)];
                self.direct_sq[j] += d * d;
                self.mux_sq[j] += m * m;
            }
        }
        self.direct_sum += direct;
        self.mux_sum += recovered;
        self.samples_per_element += truth.ncols();
        self.trials += 1;
    }

    pub fn merge(&mut self, other: &GainTally) {
        for j in 0..self.direct_sq.len() {
            self.direct_sq[j] += other.direct_sq[j];
            self.mux_sq[j] += other.mux_sq[j];
        }
        self.direct_sum += &other.direct_sum;
        self.mux_sum += &other.mux_sum;
        self.samples_per_element += other.samples_per_element;
        self.trials += other.trials;
    }

    pub fn direct_rms(&self) -> Vec<f64> {
        let s = self.samples_per_element as f64;
        self.direct_sq.iter().map(|v| (v / s).sqrt()).collect()
    }

    pub fn multiplexed_rms(&self) -> Vec<f64> {
        let s = self.samples_per_element as f64;
        self.mux_sq.iter().map(|v| (v / s).sqrt()).collect()
    }

    /// Mean over elements of the direct/multiplexed RMS-error ratio.
    pub fn rms_gain(&self) -> f64 {
        let d = self.direct_rms();
        let m = self.multiplexed_rms();
        d.iter().zip(&m).map(|(a, b)| a / b).sum::<f64>() / d.len() as f64
    }

    /// Peak of the trial-averaged trace over the residual RMS, as a ratio
    /// multiplexed/direct, averaged over elements whose true signal is nonzero.
    pub fn peak_gain(&self, truth: &DMatrix<f64>) -> f64 {
        let t = self.trials as f64;
        let d_rms = self.direct_rms();
        let m_rms = self.multiplexed_rms();
        let mut acc = 0.0;
        let mut count = 0usize;
        for j in 0..truth.nrows() {
            if truth.row(j).amax() == 0.0 {
                continue;
            }
            let peak_d = self.direct_sum.row(j).amax() / t;
            let peak_m = self.mux_sum.row(j).amax() / t;
            acc += (peak_m / m_rms[j]) / (peak_d / d_rms[j]);
            count += 1;
        }
        if count == 0 {
            f64::NAN
        } else {
            acc / count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    pub measured_gain: f64,
    pub stderr: f64,
    pub peak_snr_gain: f64,
    pub trials: usize,
    pub direct_rms: Vec<f64>,
    pub multiplexed_rms: Vec<f64>,
}

/// Splits `trials` into [`GAIN_BATCHES`] contiguous batches, runs them (in
/// parallel) and combines them in batch order.
pub fn run_gain_batches<F>(
    n: usize,
    samples: usize,
    trials: usize,
    truth: &DMatrix<f64>,
    trial: F,
) -> GainEstimate
where
    F: Fn(usize, &mut GainTally) + Sync,
{
    let batches = GAIN_BATCHES.min(trials).max(1);
    let tallies: Vec<GainTally> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut tally = GainTally::new(n, samples);
            for idx in b * trials / batches..(b + 1) * trials / batches {
                trial(idx, &mut tally);
            }
            tally
        })
        .collect();
    let batch_gains: Vec<f64> = tallies.iter().map(GainTally::rms_gain).collect();
    let mut total = GainTally::new(n, samples);
    for t in &tallies {
        total.merge(t);
    }
    let mean = batch_gains.iter().sum::<f64>() / batches as f64;
    let stderr = if batches > 1 {
        let var = batch_gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>()
            / (batches - 1) as f64;
        (var / batches as f64).sqrt()
    } else {
        f64::NAN
    };
    GainEstimate {
        measured_gain: total.rms_gain(),
        stderr,
        peak_snr_gain: total.peak_gain(truth),
        trials,
        direct_rms: total.direct_rms(),
        multiplexed_rms: total.multiplexed_rms(),
    }
}

/// Monte-Carlo SNR gain of `w` over direct measurement, for a known all-ones
/// signal vector. Trial `i` uses noise streams `2i` (multiplexed) and `2i + 1`
/// (direct).
pub fn monte_carlo_gain(
    w: &CodeMatrix,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<GainEstimate, MuxError> {
    if trials < 100 {
        return Err(MuxError::TooFewTrials { min: 100, got: trials });
    }
    if sigma == 0.0 {
        return Err(MuxError::ZeroSigma);
    }
    let noise = NoiseModel::new(sigma, seed)?;
    let n = w.n();
    let demux = Demultiplexer::new(w)?;
    let truth = DMatrix::from_element(n, 1, 1.0);
    let clean = w.to_f64() * &truth;
    Ok(run_gain_batches(n, 1, trials, &truth, |i, tally| {
        let mut y = clean.clone();
        noise.add_to(&mut y, 2 * i as u64);
        let recovered = &demux.inverse * &y;
        let mut direct = truth.clone();
        noise.add_to(&mut direct, 2 * i as u64 + 1);
        tally.add(&truth, &direct, &recovered);
    }))
}

/// Sample statistics of `W⁻¹n` over noise-only trials.
#[derive(Debug, Clone)]
pub struct NoiseStatistics {
    pub covariance: DMatrix<f64>,
    pub mse: f64,
    pub mse_stderr: f64,
    pub trials: usize,
}

/// Runs `trials` noise-only acquisitions (X = 0) through multiplexing and
/// demultiplexing and returns the empirical covariance of the recovered
/// vector and the per-trial average MSE.
pub fn noise_statistics(
    w: &CodeMatrix,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<NoiseStatistics, MuxError> {
    if trials < 2 {
        return Err(MuxError::TooFewTrials { min: 2, got: trials });
    }
    let noise = NoiseModel::new(sigma, seed)?;
    let n = w.n();
    let demux = Demultiplexer::new(w)?;
    let batches = GAIN_BATCHES.min(trials);
    let parts: Vec<(DMatrix<f64>, f64, f64)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let start = b * trials / batches;
            let end = (b + 1) * trials / batches;
            let mut y = DMatrix::zeros(n, end - start);
            for (col, idx) in (start..end).enumerate() {
                let mut rng = noise.stream(idx as u64);
                for r in 0..n {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    y[(r, col)] = sigma * z;
                }
            }
            let xhat = &demux.inverse * y;
            let outer = &xhat * xhat.transpose();
            let mut mse_sum = 0.0;
            let mut mse_sq = 0.0;
            for col in xhat.column_iter() {
                let m = col.norm_squared() / n as f64;
                mse_sum += m;
                mse_sq += m * m;
            }
            (outer, mse_sum, mse_sq)
        })
        .collect();
    let mut outer = DMatrix::zeros(n, n);
    let mut mse_sum = 0.0;
    let mut mse_sq = 0.0;
    for (o, s, q) in &parts {
        outer += o;
        mse_sum += s;
        mse_sq += q;
    }
    let t = trials as f64;
    let mse = mse_sum / t;
    let var = (mse_sq / t - mse * mse) * t / (t - 1.0);
    Ok(NoiseStatistics {
        covariance: outer / t,
        mse,
        mse_stderr: (var / t).sqrt(),
        trials,
    })
}
