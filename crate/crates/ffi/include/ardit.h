#ifndef ARDIT_H
#define ARDIT_H

#include <stddef.h>
#include <stdint.h>

// Result codes. Nonzero values other than the last three mirror the CLI
// exit codes.
typedef enum ArditStatus {
  ARDIT_STATUS_OK = 0,
  ARDIT_STATUS_INVALID_INPUT = 2,
  ARDIT_STATUS_INVALID_CONFIG = 3,
  ARDIT_STATUS_SINGULARITY = 4,
  ARDIT_STATUS_INVALID_STATE = 5,
  ARDIT_STATUS_MISSING_DEPENDENCY = 6,
  ARDIT_STATUS_MALFORMED_FILE = 7,
  ARDIT_STATUS_IO = 8,
  ARDIT_STATUS_NULL_POINTER = 9,
  ARDIT_STATUS_BUFFER_TOO_SMALL = 10,
  ARDIT_STATUS_PANIC = 11,
} ArditStatus;

// Opaque experiment configuration.
typedef struct ArditConfig ArditConfig;

// Opaque trained velocity model.
typedef struct ArditModelHandle ArditModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *ardit_last_error(void);

// Library version as a static nul-terminated string.
const char *ardit_version(void);

struct ArditConfig *ardit_config_new(void);

// Parse flat `key = value` text into a new configuration.
//
// # Safety
// `text` must be a nul-terminated string; `out` a valid pointer.
enum ArditStatus ardit_config_parse(const char *text, struct ArditConfig **out);

// # Safety
// `cfg` must come from this library and not be used afterwards.
void ardit_config_free(struct ArditConfig *cfg);

// Run one pipeline stage (`gen-data`, `train-ae`, ..., `eval`) in `out_dir`.
//
// # Safety
// Pointers must be valid; strings nul-terminated.
enum ArditStatus ardit_run_stage(const struct ArditConfig *cfg,
                                 const char *stage,
                                 const char *out_dir);

// Load a model checkpoint written by the `train-ardit` or `distill` stage.
//
// # Safety
// `path` must be nul-terminated; `out` a valid pointer.
enum ArditStatus ardit_model_load(const char *path, struct ArditModelHandle **out);

// # Safety
// `model` must come from this library and not be used afterwards.
void ardit_model_free(struct ArditModelHandle *model);

// Width of one latent token, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t ardit_model_d_latent(const struct ArditModelHandle *model);

// Generate `n_latent` tokens for a transcript of symbol ids. Writes
// `n_latent * d_latent` floats, row-major, to `out` (capacity in floats).
// `block_size = SIZE_MAX` generates everything in one block.
//
// # Safety
// `text` must hold `n_text` ids and `out` `capacity` floats.
enum ArditStatus ardit_model_generate(const struct ArditModelHandle *model,
                                      const uint32_t *text,
                                      uintptr_t n_text,
                                      uintptr_t n_latent,
                                      uintptr_t block_size,
                                      uintptr_t ode_steps,
                                      uint64_t seed,
                                      float *out,
                                      uintptr_t capacity);

// Fill tokens `[n_left, n_right)` of a `total`-token sequence given the
// rest. `context` holds `total * d_latent` floats (middle rows ignored);
// the full sequence is written to `out`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum ArditStatus ardit_model_fill_middle(const struct ArditModelHandle *model,
                                         const uint32_t *text,
                                         uintptr_t n_text,
                                         const float *context,
                                         uintptr_t total,
                                         uintptr_t n_left,
                                         uintptr_t n_right,
                                         uintptr_t block_size,
                                         uintptr_t ode_steps,
                                         uint64_t seed,
                                         float *out,
                                         uintptr_t capacity);

// Latent length for `n_symbols` ordinary symbols at `seconds_per_symbol`.
//
// # Safety
// `out` must be a valid pointer.
enum ArditStatus ardit_estimate_length(uintptr_t n_symbols,
                                       double seconds_per_symbol,
                                       double hop_seconds,
                                       uintptr_t downsample,
                                       uintptr_t *out);

// Write the masked-reconstruction frame mask (1 = regenerated) for
// `n_frames` frames and the given anchor into `out` (`n_frames` bytes).
//
// # Safety
// `out` must hold `n_frames` bytes.
enum ArditStatus ardit_frame_mask(uintptr_t n_frames, uintptr_t anchor, uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARDIT_H */
