//! Clipped uniform quantization of weight tensors.
//!
//! A `b`-bit quantizer clips values to `[-s, s]` and maps them onto the
//! `2^b` endpoint-inclusive levels `q_k = -s + k * delta`, with
//! `delta = 2s / (2^b - 1)`. For `b = 1` the grid is `{-s, +s}`.
//!
//! The clipping threshold `s` is either the tensor's largest magnitude
//! (max-scalar) or the MSE-optimal threshold found by the OCTAV fixed-point
//! recursion.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantMode {
    /// Nearest level, exact midpoints go to the larger index.
    Deterministic,
    /// Dithered rounding, unbiased inside the clipping range.
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ThresholdMode {
    Octav,
    MaxScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    bits: u8,
    pub mode: QuantMode,
    pub threshold_mode: ThresholdMode,
}

impl QuantSpec {
    pub fn new(bits: u8, mode: QuantMode, threshold_mode: ThresholdMode) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self {
            bits,
            mode,
            threshold_mode,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Number of levels, `2^b`.
    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// The level grid of a `b`-bit quantizer with threshold `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGrid {
    scale: f64,
    top: u64,
}

impl LevelGrid {
    pub fn new(bits: u8, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clipping threshold must be positive and finite, got {scale}"
            )));
        }
        Ok(Self {
            scale,
            top: (1u64 << bits) - 1,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Largest valid level index, `2^b - 1`.
    pub fn max_index(&self) -> u64 {
        self.top
    }

    /// Spacing between adjacent levels.
    pub fn step(&self) -> f64 {
        2.0 * self.scale / self.top as f64
    }

    /// Value of level `k`. Computed as `s * (2k - top) / top` so the grid is
    /// exactly symmetric and the end levels are exactly `-s` and `+s`.
    pub fn level(&self, k: u64) -> f64 {
        let top = self.top as f64;
        self.scale * (((2 * k) as f64 - top) / top)
    }

    fn position(&self, x: f64) -> f64 {
        (x + self.scale) / self.step()
    }

    /// Nearest level index of `x`, clamped into the grid.
    pub fn nearest_index(&self, x: f64) -> u64 {
        let t = (self.position(x) + 0.5).floor();
        if t <= 0.0 {
            0
        } else if t >= self.top as f64 {
            self.top
        } else {
            t as u64
        }
    }

    /// Index chosen by dithered rounding with dither draw `u`, `|u| < step / 2`.
    pub fn dithered_index(&self, x: f64, u: f64) -> u64 {
        self.nearest_index(x + u)
    }

    /// Bracketing levels of a clipped `x` and the probability of each under
    /// stochastic rounding: `(lower, p_lower, p_upper)`. The upper index is
    /// `lower + 1`.
    pub fn bracket(&self, x: f64) -> (u64, f64, f64) {
        let x = clip(x, self.scale);
        let lower = (self.position(x).floor().max(0.0) as u64).min(self.top - 1);
        let p_upper = ((x - self.level(lower)) / self.step()).clamp(0.0, 1.0);
        (lower, 1.0 - p_upper, p_upper)
    }
}

/// Clamp `x` into `[-s, s]`.
pub fn clip(x: f64, s: f64) -> f64 {
    x.max(-s).min(s)
}

/// Largest magnitude of the tensor. Returns 0 for an all-zero tensor.
pub fn max_scalar_threshold(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OctavParams {
    pub max_iters: usize,
    /// Relative change below which the recursion stops.
    pub tol: f64,
}

impl Default for OctavParams {
    fn default() -> Self {
        Self {
            max_iters: 10,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OctavStop {
    Converged,
    /// Nothing remained above the iterate (or the denominator vanished); the
    /// threshold fell back to the tensor maximum.
    Guard,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OctavOutcome {
    pub threshold: f64,
    /// Number of recursion updates applied.
    pub iterations: usize,
    pub stop: OctavStop,
}

impl OctavOutcome {
    pub fn converged(&self) -> bool {
        self.stop != OctavStop::MaxIters
    }
}

/// One application of the OCTAV recursion
///
/// `s' = sum |x| 1{|x| > s} / (4^-b / 3 * #{0 < |x| <= s} + #{|x| > s})`.
///
/// Returns `None` when the numerator or denominator is zero.
pub fn octav_update(values: &[f64], bits: u8, s: f64) -> Option<f64> {
    let mut tail_sum = 0.0;
    let mut tail = 0usize;
    let mut inside = 0usize;
    for &x in values {
        let a = x.abs();
        if a > s {
            tail_sum += a;
            tail += 1;
        } else if a > 0.0 {
            inside += 1;
        }
    }
    let denom = 4f64.powi(-i32::from(bits)) / 3.0 * inside as f64 + tail as f64;
    if tail_sum == 0.0 || denom == 0.0 {
        return None;
    }
    Some(tail_sum / denom)
}

fn validate_tensor(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty tensor".into()));
    }
    if let Some(index) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    let max = max_scalar_threshold(values);
    if max == 0.0 {
        return Err(Error::DegenerateTensor);
    }
    Ok(max)
}

/// MSE-optimal clipping threshold by the OCTAV recursion, started from
/// `mean(|x|)`.
pub fn octav_threshold(
    values: &[f64],
    bits: u8,
    max_iters: usize,
    tol: f64,
) -> Result<OctavOutcome> {
    validate_tensor(values)?;
    let init = values.iter().map(|x| x.abs()).sum::<f64>() / values.len() as f64;
    octav_threshold_from(values, bits, init, max_iters, tol)
}

/// OCTAV started from a random threshold drawn uniformly from `(0, max|x|]`.
pub fn octav_threshold_random_init(
    values: &[f64],
    bits: u8,
    max_iters: usize,
    tol: f64,
    rng: &mut dyn RngCore,
) -> Result<OctavOutcome> {
    let max = validate_tensor(values)?;
    let init = max * (1.0 - rng.gen::<f64>());
    octav_threshold_from(values, bits, init, max_iters, tol)
}

/// OCTAV started from an explicit initial threshold.
pub fn octav_threshold_from(
    values: &[f64],
    bits: u8,
    init: f64,
    max_iters: usize,
    tol: f64,
) -> Result<OctavOutcome> {
    check_bits(bits)?;
    let max = validate_tensor(values)?;
    if max_iters == 0 || !(tol > 0.0) || !(init.is_finite() && init > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "octav needs max_iters >= 1, tol > 0 and a positive start (got {max_iters}, {tol}, {init})"
        )));
    }
    let mut s = init;
    for n in 1..=max_iters {
        let Some(next) = octav_update(values, bits, s) else {
            return Ok(OctavOutcome {
                threshold: max,
                iterations: n,
                stop: OctavStop::Guard,
            });
        };
        let change = (next - s).abs() / s;
        s = next;
        if change < tol {
            return Ok(OctavOutcome {
                threshold: s,
                iterations: n,
                stop: OctavStop::Converged,
            });
        }
    }
    Ok(OctavOutcome {
        threshold: s,
        iterations: max_iters,
        stop: OctavStop::MaxIters,
    })
}

/// Clipping threshold for `values` under `mode`.
pub fn threshold(
    values: &[f64],
    bits: u8,
    mode: ThresholdMode,
    octav: &OctavParams,
) -> Result<f64> {
    match mode {
        ThresholdMode::Octav => {
            Ok(octav_threshold(values, bits, octav.max_iters, octav.tol)?.threshold)
        }
        ThresholdMode::MaxScalar => validate_tensor(values),
    }
}

/// Level indices of one weight tensor plus the threshold needed to
/// reconstruct it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub levels: Vec<u32>,
    pub scale: f64,
    pub bits: u8,
}

impl QuantizedTensor {
    pub fn count(&self) -> usize {
        self.levels.len()
    }

    pub fn grid(&self) -> Result<LevelGrid> {
        LevelGrid::new(self.bits, self.scale).map_err(|e| Error::CorruptPayload(e.to_string()))
    }
}

fn require_rng<'a>(
    mode: QuantMode,
    rng: Option<&'a mut dyn RngCore>,
) -> Result<Option<&'a mut dyn RngCore>> {
    match (mode, rng) {
        (QuantMode::Stochastic, None) => Err(Error::InvalidArgument(
            "stochastic quantization needs a random stream".into(),
        )),
        (QuantMode::Deterministic, _) => Ok(None),
        (QuantMode::Stochastic, rng) => Ok(rng),
    }
}

/// Clip and quantize `values` at threshold `s`.
pub fn quantize(
    values: &[f64],
    spec: &QuantSpec,
    s: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<QuantizedTensor> {
    let grid = LevelGrid::new(spec.bits, s)?;
    let mut rng = require_rng(spec.mode, rng)?;
    let half = grid.step() / 2.0;
    let mut levels = Vec::with_capacity(values.len());
    for (index, &x) in values.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFiniteInput { index });
        }
        let clipped = clip(x, s);
        let k = match rng.as_deref_mut() {
            // rng is only kept for stochastic mode
            Some(r) => grid.dithered_index(clipped, (2.0 * r.gen::<f64>() - 1.0) * half),
            None => grid.nearest_index(clipped),
        };
        levels.push(k as u32);
    }
    Ok(QuantizedTensor {
        levels,
        scale: s,
        bits: spec.bits,
    })
}

/// Reconstruct level values.
pub fn dequantize(qt: &QuantizedTensor) -> Result<Vec<f64>> {
    let grid = qt.grid()?;
    qt.levels
        .iter()
        .map(|&k| {
            if u64::from(k) > grid.max_index() {
                Err(Error::CorruptPayload(format!(
                    "level index {k} out of range for {} bits",
                    qt.bits
                )))
            } else {
                Ok(grid.level(u64::from(k)))
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantStats {
    /// Mean squared error against the unclipped input.
    pub msqe: f64,
    pub clipped_fraction: f64,
}

impl QuantStats {
    pub fn measure(original: &[f64], reconstructed: &[f64], s: f64) -> Self {
        debug_assert_eq!(original.len(), reconstructed.len());
        if original.is_empty() {
            return Self {
                msqe: 0.0,
                clipped_fraction: 0.0,
            };
        }
        let n = original.len() as f64;
        let sq: f64 = original
            .iter()
            .zip(reconstructed)
            .map(|(x, q)| (x - q) * (x - q))
            .sum();
        let clipped = original.iter().filter(|x| x.abs() > s).count();
        Self {
            msqe: sq / n,
            clipped_fraction: clipped as f64 / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FakeQuantized {
    pub values: Vec<f64>,
    pub stats: QuantStats,
    pub tensor: QuantizedTensor,
}

/// Quantize then dequantize at a given threshold.
pub fn fake_quantize_at(
    values: &[f64],
    spec: &QuantSpec,
    s: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<FakeQuantized> {
    let tensor = quantize(values, spec, s, rng)?;
    let out = dequantize(&tensor)?;
    let stats = QuantStats::measure(values, &out, s);
    Ok(FakeQuantized {
        values: out,
        stats,
        tensor,
    })
}

/// Quantize then dequantize with the threshold chosen by `spec.threshold_mode`.
pub fn fake_quantize(
    values: &[f64],
    spec: &QuantSpec,
    octav: &OctavParams,
    rng: Option<&mut dyn RngCore>,
) -> Result<FakeQuantized> {
    let s = threshold(values, spec.bits, spec.threshold_mode, octav)?;
    fake_quantize_at(values, spec, s, rng)
}

/// Mean of `(x - Q(clip(x)))^2` over elements and `trials` independent
/// quantizations (trials only matter in stochastic mode).
pub fn empirical_mse(
    values: &[f64],
    spec: &QuantSpec,
    s: f64,
    trials: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for _ in 0..trials {
        let r: Option<&mut dyn RngCore> = match rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        total += fake_quantize_at(values, spec, s, r)?.stats.msqe;
    }
    Ok(total / trials as f64)
}
