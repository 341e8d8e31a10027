//! C ABI over the fedquant quantizer and uplink payload codec.
//!
//! Every function returns an [`FqStatus`]. On failure a message is kept per
//! thread and can be read with [`fq_last_error_message`]. Handles are opaque
//! and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fedquant::codec;
use fedquant::federation::{AggregationStrategy, BitWidthConfig, ClientUpdate, LayerPayload, Weighting};
use fedquant::nn::Architecture;
use fedquant::quant::{self, QuantMode, QuantSpec, QuantizedTensor, ThresholdMode};
use fedquant::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DegenerateTensor = 3,
    NonFiniteInput = 4,
    CorruptPayload = 5,
    Encode = 6,
    BufferTooSmall = 7,
    /// The requested field is not present, such as the dataset size of an
    /// inverse-MSQE update.
    Absent = 8,
    Internal = 9,
    Panic = 10,
}

/// Rounding mode for [`fq_quantize`] and [`fq_fake_quantize`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FqMode {
    Deterministic = 0,
    Stochastic = 1,
}

/// Server aggregation rule an update is encoded for.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FqStrategy {
    FedAvg = 0,
    InverseMsqe = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FqArchitecture {
    MnistCnn = 0,
    CifarCnn = 1,
}

/// Uplink size of one client's quantized weights and thresholds.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FqBitBudget {
    pub quantized_bits: u64,
    pub full_precision_bits: u64,
    pub savings_ratio: f64,
}

/// Level indices, threshold and bit width of one tensor.
pub struct FqQuantizedTensor(QuantizedTensor);

/// One client's uplink message.
pub struct FqClientUpdate(ClientUpdate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::DegenerateTensor => FqStatus::DegenerateTensor,
            Error::NonFiniteInput { .. } => FqStatus::NonFiniteInput,
            Error::CorruptPayload(_) => FqStatus::CorruptPayload,
            Error::Encode(_) => FqStatus::Encode,
            Error::InvalidArgument(_) | Error::Config { .. } | Error::Shape(_) => {
                FqStatus::InvalidArgument
            }
            _ => FqStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: FqStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Run `f`, recording any error or panic for [`fq_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FqStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {message}"));
            FqStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(data: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(FqStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn output<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| fail(FqStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref()
        .ok_or_else(|| fail(FqStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle_mut<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| fail(FqStatus::NullPointer, format!("{name} is null")))
}

/// Copy `src` into a caller buffer of `capacity` elements. `written`
/// always receives the full length, so a too-small buffer reports the size
/// it needs.
unsafe fn copy_out<T: Copy>(
    src: &[T],
    dst: *mut T,
    capacity: usize,
    written: *mut usize,
) -> Result<(), Failure> {
    *output(written, "written")? = src.len();
    if src.len() > capacity {
        return Err(fail(
            FqStatus::BufferTooSmall,
            format!("buffer holds {capacity} elements, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(fail(FqStatus::NullPointer, "output buffer is null"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

fn quant_mode(mode: FqMode) -> QuantMode {
    match mode {
        FqMode::Deterministic => QuantMode::Deterministic,
        FqMode::Stochastic => QuantMode::Stochastic,
    }
}

fn strategy(s: FqStrategy) -> AggregationStrategy {
    match s {
        FqStrategy::FedAvg => AggregationStrategy::FedAvg,
        FqStrategy::InverseMsqe => AggregationStrategy::InverseMsqe,
    }
}

fn spec(bits: u8, mode: FqMode) -> Result<QuantSpec, Failure> {
    Ok(QuantSpec::new(bits, quant_mode(mode), ThresholdMode::Octav)?)
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Clipping threshold by the OCTAV recursion started from `mean(|x|)`.
///
/// # Safety
/// `values` must point to `len` readable doubles. `out_threshold` and
/// `out_iterations` must be valid for writes; `out_iterations` may be null.
#[no_mangle]
pub unsafe extern "C" fn fq_octav_threshold(
    values: *const f64,
    len: usize,
    bits: u8,
    max_iters: usize,
    tol: f64,
    out_threshold: *mut f64,
    out_iterations: *mut usize,
) -> FqStatus {
    guard(|| {
        let values = input(values, len, "values")?;
        let out = quant::octav_threshold(values, bits, max_iters, tol)?;
        *output(out_threshold, "out_threshold")? = out.threshold;
        if let Some(it) = out_iterations.as_mut() {
            *it = out.iterations;
        }
        Ok(())
    })
}

/// Largest absolute value of the tensor.
///
/// # Safety
/// `values` must point to `len` readable doubles; `out_threshold` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fq_max_scalar_threshold(
    values: *const f64,
    len: usize,
    out_threshold: *mut f64,
) -> FqStatus {
    guard(|| {
        let values = input(values, len, "values")?;
        if let Some(index) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput { index }.into());
        }
        let s = quant::max_scalar_threshold(values);
        if s == 0.0 {
            return Err(Error::DegenerateTensor.into());
        }
        *output(out_threshold, "out_threshold")? = s;
        Ok(())
    })
}

/// Clip `values` to `[-threshold, threshold]` and map them to `bits`-bit
/// level indices. Stochastic rounding draws from a stream seeded by `seed`.
///
/// # Safety
/// `values` must point to `len` readable doubles; `out` must be valid for
/// writes. The handle written to `out` must be released with
/// [`fq_quantized_free`].
#[no_mangle]
pub unsafe extern "C" fn fq_quantize(
    values: *const f64,
    len: usize,
    bits: u8,
    mode: FqMode,
    threshold: f64,
    seed: u64,
    out: *mut *mut FqQuantizedTensor,
) -> FqStatus {
    guard(|| {
        let out = output(out, "out")?;
        let values = input(values, len, "values")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = quant::quantize(values, &spec(bits, mode)?, threshold, Some(&mut rng))?;
        *out = Box::into_raw(Box::new(FqQuantizedTensor(q)));
        Ok(())
    })
}

/// Quantize then dequantize into `out_values` (`len` doubles) and report
/// the mean squared error against the input.
///
/// # Safety
/// `values` and `out_values` must each point to `len` doubles;
/// `out_msqe` may be null.
#[no_mangle]
pub unsafe extern "C" fn fq_fake_quantize(
    values: *const f64,
    len: usize,
    bits: u8,
    mode: FqMode,
    threshold: f64,
    seed: u64,
    out_values: *mut f64,
    out_msqe: *mut f64,
) -> FqStatus {
    guard(|| {
        let values = input(values, len, "values")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fq = quant::fake_quantize_at(values, &spec(bits, mode)?, threshold, Some(&mut rng))?;
        let mut written = 0;
        copy_out(&fq.values, out_values, len, &mut written)?;
        if let Some(m) = out_msqe.as_mut() {
            *m = fq.stats.msqe;
        }
        Ok(())
    })
}

/// Build a tensor from raw level indices, validating them against `bits`.
///
/// # Safety
/// `levels` must point to `len` readable values; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn fq_quantized_from_levels(
    levels: *const u32,
    len: usize,
    bits: u8,
    threshold: f64,
    out: *mut *mut FqQuantizedTensor,
) -> FqStatus {
    guard(|| {
        let out = output(out, "out")?;
        let q = QuantizedTensor {
            levels: input(levels, len, "levels")?.to_vec(),
            scale: threshold,
            bits,
        };
        quant::dequantize(&q).map_err(|e| fail(FqStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(FqQuantizedTensor(q)));
        Ok(())
    })
}

/// Element count, bit width and threshold of a tensor. Any output may be
/// null.
///
/// # Safety
/// `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fq_quantized_info(
    tensor: *const FqQuantizedTensor,
    out_count: *mut usize,
    out_bits: *mut u8,
    out_threshold: *mut f64,
) -> FqStatus {
    guard(|| {
        let t = &handle(tensor, "tensor")?.0;
        if let Some(c) = out_count.as_mut() {
            *c = t.count();
        }
        if let Some(b) = out_bits.as_mut() {
            *b = t.bits;
        }
        if let Some(s) = out_threshold.as_mut() {
            *s = t.scale;
        }
        Ok(())
    })
}

/// Copy the level indices into `out` (capacity `capacity`).
///
/// # Safety
/// `tensor` must be a live handle, `out` must hold `capacity` values and
/// `written` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fq_quantized_levels(
    tensor: *const FqQuantizedTensor,
    out: *mut u32,
    capacity: usize,
    written: *mut usize,
) -> FqStatus {
    guard(|| copy_out(&handle(tensor, "tensor")?.0.levels, out, capacity, written))
}

/// Reconstruct level values into `out` (capacity `capacity`).
///
/// # Safety
/// As for [`fq_quantized_levels`].
#[no_mangle]
pub unsafe extern "C" fn fq_dequantize(
    tensor: *const FqQuantizedTensor,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FqStatus {
    guard(|| {
        let values = quant::dequantize(&handle(tensor, "tensor")?.0)?;
        copy_out(&values, out, capacity, written)
    })
}

/// # Safety
/// `tensor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fq_quantized_free(tensor: *mut FqQuantizedTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Empty update for `client_id`. `dataset_size` is used only by FedAvg.
///
/// # Safety
/// `out` must be valid for writes. Release the handle with
/// [`fq_update_free`].
#[no_mangle]
pub unsafe extern "C" fn fq_update_new(
    client_id: u32,
    strategy: FqStrategy,
    dataset_size: u32,
    out: *mut *mut FqClientUpdate,
) -> FqStatus {
    guard(|| {
        let out = output(out, "out")?;
        let weighting = match strategy {
            FqStrategy::FedAvg => Weighting::DatasetSize(dataset_size),
            FqStrategy::InverseMsqe => Weighting::Msqe(Vec::new()),
        };
        *out = Box::into_raw(Box::new(FqClientUpdate(ClientUpdate {
            client_id,
            layers: Vec::new(),
            weighting,
            side_band: Vec::new(),
        })));
        Ok(())
    })
}

fn push_layer(update: &mut ClientUpdate, layer: LayerPayload, msqe: f32) {
    if let Weighting::Msqe(e) = &mut update.weighting {
        e.push(msqe);
    }
    update.layers.push(layer);
}

/// Append a copy of `tensor` as the next layer. `msqe` is kept only for
/// inverse-MSQE updates.
///
/// # Safety
/// `update` and `tensor` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn fq_update_push_quantized(
    update: *mut FqClientUpdate,
    tensor: *const FqQuantizedTensor,
    msqe: f32,
) -> FqStatus {
    guard(|| {
        let t = handle(tensor, "tensor")?.0.clone();
        push_layer(&mut handle_mut(update, "update")?.0, LayerPayload::Quantized(t), msqe);
        Ok(())
    })
}

/// Append a full-precision layer.
///
/// # Safety
/// `update` must be a live handle and `values` must point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn fq_update_push_full(
    update: *mut FqClientUpdate,
    values: *const f32,
    len: usize,
    msqe: f32,
) -> FqStatus {
    guard(|| {
        let values = input(values, len, "values")?.to_vec();
        push_layer(&mut handle_mut(update, "update")?.0, LayerPayload::Full(values), msqe);
        Ok(())
    })
}

/// Replace the unquantized bias and batch-norm values.
///
/// # Safety
/// `update` must be a live handle and `values` must point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn fq_update_set_side_band(
    update: *mut FqClientUpdate,
    values: *const f32,
    len: usize,
) -> FqStatus {
    guard(|| {
        let values = input(values, len, "values")?.to_vec();
        handle_mut(update, "update")?.0.side_band = values;
        Ok(())
    })
}

/// Serialize into `out` (capacity `capacity` bytes). `written` receives the
/// encoded length, also when the buffer is too small.
///
/// # Safety
/// `update` must be a live handle, `out` must hold `capacity` bytes and
/// `written` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fq_encode(
    update: *const FqClientUpdate,
    out: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> FqStatus {
    guard(|| {
        let bytes = codec::encode(&handle(update, "update")?.0)?;
        copy_out(&bytes, out, capacity, written)
    })
}

/// Parse a payload.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` must be valid for
/// writes. Release the handle with [`fq_update_free`].
#[no_mangle]
pub unsafe extern "C" fn fq_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut FqClientUpdate,
) -> FqStatus {
    guard(|| {
        let out = output(out, "out")?;
        let update = codec::decode(input(bytes, len, "bytes")?)?;
        *out = Box::into_raw(Box::new(FqClientUpdate(update)));
        Ok(())
    })
}

/// Client id, strategy and layer count. Any output may be null.
///
/// # Safety
/// `update` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fq_update_info(
    update: *const FqClientUpdate,
    out_client_id: *mut u32,
    out_strategy: *mut FqStrategy,
    out_layers: *mut usize,
) -> FqStatus {
    guard(|| {
        let u = &handle(update, "update")?.0;
        if let Some(c) = out_client_id.as_mut() {
            *c = u.client_id;
        }
        if let Some(s) = out_strategy.as_mut() {
            *s = match u.strategy() {
                AggregationStrategy::FedAvg => FqStrategy::FedAvg,
                AggregationStrategy::InverseMsqe => FqStrategy::InverseMsqe,
            };
        }
        if let Some(n) = out_layers.as_mut() {
            *n = u.layers.len();
        }
        Ok(())
    })
}

/// Dataset size of a FedAvg update; [`FqStatus::Absent`] otherwise.
///
/// # Safety
/// `update` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fq_update_dataset_size(
    update: *const FqClientUpdate,
    out: *mut u32,
) -> FqStatus {
    guard(|| {
        let size = handle(update, "update")?.0.dataset_size().ok_or_else(|| {
            fail(FqStatus::Absent, "inverse-MSQE updates carry no dataset size")
        })?;
        *output(out, "out")? = size;
        Ok(())
    })
}

/// Per-layer MSQE of an inverse-MSQE update; [`FqStatus::Absent`] for
/// FedAvg.
///
/// # Safety
/// As for [`fq_quantized_levels`].
#[no_mangle]
pub unsafe extern "C" fn fq_update_msqe(
    update: *const FqClientUpdate,
    out: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> FqStatus {
    guard(|| {
        let msqe = handle(update, "update")?
            .0
            .msqe()
            .ok_or_else(|| fail(FqStatus::Absent, "FedAvg updates carry no MSQE"))?;
        copy_out(msqe, out, capacity, written)
    })
}

/// Copy of quantized layer `index`; [`FqStatus::Absent`] for a
/// full-precision layer.
///
/// # Safety
/// `update` must be a live handle and `out` valid for writes. Release the
/// returned tensor with [`fq_quantized_free`].
#[no_mangle]
pub unsafe extern "C" fn fq_update_layer(
    update: *const FqClientUpdate,
    index: usize,
    out: *mut *mut FqQuantizedTensor,
) -> FqStatus {
    guard(|| {
        let out = output(out, "out")?;
        let u = &handle(update, "update")?.0;
        match u.layers.get(index) {
            None => Err(fail(
                FqStatus::InvalidArgument,
                format!("layer {index} out of range ({} layers)", u.layers.len()),
            )),
            Some(LayerPayload::Full(_)) => {
                Err(fail(FqStatus::Absent, format!("layer {index} is full precision")))
            }
            Some(LayerPayload::Quantized(t)) => {
                *out = Box::into_raw(Box::new(FqQuantizedTensor(t.clone())));
                Ok(())
            }
        }
    })
}

/// Reconstructed values of layer `index`, quantized or not.
///
/// # Safety
/// As for [`fq_quantized_levels`].
#[no_mangle]
pub unsafe extern "C" fn fq_update_layer_values(
    update: *const FqClientUpdate,
    index: usize,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FqStatus {
    guard(|| {
        let u = &handle(update, "update")?.0;
        let layer = u.layers.get(index).ok_or_else(|| {
            fail(
                FqStatus::InvalidArgument,
                format!("layer {index} out of range ({} layers)", u.layers.len()),
            )
        })?;
        copy_out(&layer.dequantize()?, out, capacity, written)
    })
}

/// # Safety
/// `update` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fq_update_free(update: *mut FqClientUpdate) {
    if !update.is_null() {
        drop(Box::from_raw(update));
    }
}

/// Uplink bits of one client for per-layer `bits` (four entries).
///
/// # Safety
/// `bits` must point to four bytes and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fq_bit_budget(
    architecture: FqArchitecture,
    bits: *const u8,
    strategy_kind: FqStrategy,
    out: *mut FqBitBudget,
) -> FqStatus {
    guard(|| {
        let b = input(bits, 4, "bits")?;
        for &bits in b {
            QuantSpec::new(bits, QuantMode::Deterministic, ThresholdMode::Octav)?;
        }
        let config = BitWidthConfig([b[0], b[1], b[2], b[3]]);
        let arch = match architecture {
            FqArchitecture::MnistCnn => Architecture::MnistCnn,
            FqArchitecture::CifarCnn => Architecture::CifarCnn,
        };
        let budget = codec::bit_budget(arch, &config, strategy(strategy_kind));
        *output(out, "out")? = FqBitBudget {
            quantized_bits: budget.quantized_bits,
            full_precision_bits: budget.full_precision_bits,
            savings_ratio: budget.savings_ratio,
        };
        Ok(())
    })
}
