#ifndef FEDQUANT_H
#define FEDQUANT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FqArchitecture {
  FQ_ARCHITECTURE_MNIST_CNN = 0,
  FQ_ARCHITECTURE_CIFAR_CNN = 1,
} FqArchitecture;

// Rounding mode for [`fq_quantize`] and [`fq_fake_quantize`].
typedef enum FqMode {
  FQ_MODE_DETERMINISTIC = 0,
  FQ_MODE_STOCHASTIC = 1,
} FqMode;

// Result code of every exported function.
typedef enum FqStatus {
  FQ_STATUS_OK = 0,
  FQ_STATUS_NULL_POINTER = 1,
  FQ_STATUS_INVALID_ARGUMENT = 2,
  FQ_STATUS_DEGENERATE_TENSOR = 3,
  FQ_STATUS_NON_FINITE_INPUT = 4,
  FQ_STATUS_CORRUPT_PAYLOAD = 5,
  FQ_STATUS_ENCODE = 6,
  FQ_STATUS_BUFFER_TOO_SMALL = 7,
  // The requested field is not present, such as the dataset size of an
  // inverse-MSQE update.
  FQ_STATUS_ABSENT = 8,
  FQ_STATUS_INTERNAL = 9,
  FQ_STATUS_PANIC = 10,
} FqStatus;

// Server aggregation rule an update is encoded for.
typedef enum FqStrategy {
  FQ_STRATEGY_FED_AVG = 0,
  FQ_STRATEGY_INVERSE_MSQE = 1,
} FqStrategy;

// One client's uplink message.
typedef struct FqClientUpdate FqClientUpdate;

// Level indices, threshold and bit width of one tensor.
typedef struct FqQuantizedTensor FqQuantizedTensor;

// Uplink size of one client's quantized weights and thresholds.
typedef struct FqBitBudget {
  uint64_t quantized_bits;
  uint64_t full_precision_bits;
  double savings_ratio;
} FqBitBudget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *fq_last_error_message(void);

// Clipping threshold by the OCTAV recursion started from `mean(|x|)`.
//
// # Safety
// `values` must point to `len` readable doubles. `out_threshold` and
// `out_iterations` must be valid for writes; `out_iterations` may be null.
enum FqStatus fq_octav_threshold(const double *values,
                                 size_t len,
                                 uint8_t bits,
                                 size_t max_iters,
                                 double tol,
                                 double *out_threshold,
                                 size_t *out_iterations);

// Largest absolute value of the tensor.
//
// # Safety
// `values` must point to `len` readable doubles; `out_threshold` must be
// valid for writes.
enum FqStatus fq_max_scalar_threshold(const double *values, size_t len, double *out_threshold);

// Clip `values` to `[-threshold, threshold]` and map them to `bits`-bit
// level indices. Stochastic rounding draws from a stream seeded by `seed`.
//
// # Safety
// `values` must point to `len` readable doubles; `out` must be valid for
// writes. The handle written to `out` must be released with
// [`fq_quantized_free`].
enum FqStatus fq_quantize(const double *values,
                          size_t len,
                          uint8_t bits,
                          enum FqMode mode,
                          double threshold,
                          uint64_t seed,
                          struct FqQuantizedTensor **out);

// Quantize then dequantize into `out_values` (`len` doubles) and report
// the mean squared error against the input.
//
// # Safety
// `values` and `out_values` must each point to `len` doubles;
// `out_msqe` may be null.
enum FqStatus fq_fake_quantize(const double *values,
                               size_t len,
                               uint8_t bits,
                               enum FqMode mode,
                               double threshold,
                               uint64_t seed,
                               double *out_values,
                               double *out_msqe);

// Build a tensor from raw level indices, validating them against `bits`.
//
// # Safety
// `levels` must point to `len` readable values; `out` must be valid for
// writes.
enum FqStatus fq_quantized_from_levels(const uint32_t *levels,
                                       size_t len,
                                       uint8_t bits,
                                       double threshold,
                                       struct FqQuantizedTensor **out);

// Element count, bit width and threshold of a tensor. Any output may be
// null.
//
// # Safety
// `tensor` must be a live handle.
enum FqStatus fq_quantized_info(const struct FqQuantizedTensor *tensor,
                                size_t *out_count,
                                uint8_t *out_bits,
                                double *out_threshold);

// Copy the level indices into `out` (capacity `capacity`).
//
// # Safety
// `tensor` must be a live handle, `out` must hold `capacity` values and
// `written` must be valid for writes.
enum FqStatus fq_quantized_levels(const struct FqQuantizedTensor *tensor,
                                  uint32_t *out,
                                  size_t capacity,
                                  size_t *written);

// Reconstruct level values into `out` (capacity `capacity`).
//
// # Safety
// As for [`fq_quantized_levels`].
enum FqStatus fq_dequantize(const struct FqQuantizedTensor *tensor,
                            double *out,
                            size_t capacity,
                            size_t *written);

// # Safety
// `tensor` must be null or a handle not yet freed.
void fq_quantized_free(struct FqQuantizedTensor *tensor);

// Empty update for `client_id`. `dataset_size` is used only by FedAvg.
//
// # Safety
// `out` must be valid for writes. Release the handle with
// [`fq_update_free`].
enum FqStatus fq_update_new(uint32_t client_id,
                            enum FqStrategy strategy,
                            uint32_t dataset_size,
                            struct FqClientUpdate **out);

// Append a copy of `tensor` as the next layer. `msqe` is kept only for
// inverse-MSQE updates.
//
// # Safety
// `update` and `tensor` must be live handles.
enum FqStatus fq_update_push_quantized(struct FqClientUpdate *update,
                                       const struct FqQuantizedTensor *tensor,
                                       float msqe);

// Append a full-precision layer.
//
// # Safety
// `update` must be a live handle and `values` must point to `len` floats.
enum FqStatus fq_update_push_full(struct FqClientUpdate *update,
                                  const float *values,
                                  size_t len,
                                  float msqe);

// Replace the unquantized bias and batch-norm values.
//
// # Safety
// `update` must be a live handle and `values` must point to `len` floats.
enum FqStatus fq_update_set_side_band(struct FqClientUpdate *update,
                                      const float *values,
                                      size_t len);

// Serialize into `out` (capacity `capacity` bytes). `written` receives the
// encoded length, also when the buffer is too small.
//
// # Safety
// `update` must be a live handle, `out` must hold `capacity` bytes and
// `written` must be valid for writes.
enum FqStatus fq_encode(const struct FqClientUpdate *update,
                        uint8_t *out,
                        size_t capacity,
                        size_t *written);

// Parse a payload.
//
// # Safety
// `bytes` must point to `len` readable bytes and `out` must be valid for
// writes. Release the handle with [`fq_update_free`].
enum FqStatus fq_decode(const uint8_t *bytes, size_t len, struct FqClientUpdate **out);

// Client id, strategy and layer count. Any output may be null.
//
// # Safety
// `update` must be a live handle.
enum FqStatus fq_update_info(const struct FqClientUpdate *update,
                             uint32_t *out_client_id,
                             enum FqStrategy *out_strategy,
                             size_t *out_layers);

// Dataset size of a FedAvg update; [`FqStatus::Absent`] otherwise.
//
// # Safety
// `update` must be a live handle and `out` valid for writes.
enum FqStatus fq_update_dataset_size(const struct FqClientUpdate *update, uint32_t *out);

// Per-layer MSQE of an inverse-MSQE update; [`FqStatus::Absent`] for
// FedAvg.
//
// # Safety
// As for [`fq_quantized_levels`].
enum FqStatus fq_update_msqe(const struct FqClientUpdate *update,
                             float *out,
                             size_t capacity,
                             size_t *written);

// Copy of quantized layer `index`; [`FqStatus::Absent`] for a
// full-precision layer.
//
// # Safety
// `update` must be a live handle and `out` valid for writes. Release the
// returned tensor with [`fq_quantized_free`].
enum FqStatus fq_update_layer(const struct FqClientUpdate *update,
                              size_t index,
                              struct FqQuantizedTensor **out);

// Reconstructed values of layer `index`, quantized or not.
//
// # Safety
// As for [`fq_quantized_levels`].
enum FqStatus fq_update_layer_values(const struct FqClientUpdate *update,
                                     size_t index,
                                     double *out,
                                     size_t capacity,
                                     size_t *written);

// # Safety
// `update` must be null or a handle not yet freed.
void fq_update_free(struct FqClientUpdate *update);

// Uplink bits of one client for per-layer `bits` (four entries).
//
// # Safety
// `bits` must point to four bytes and `out` must be valid for writes.
enum FqStatus fq_bit_budget(enum FqArchitecture architecture,
                            const uint8_t *bits,
                            enum FqStrategy strategy_kind,
                            struct FqBitBudget *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDQUANT_H */
