#ifndef EQLEN_H
#define EQLEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Window entry standing for "before the first token".
#define EQLEN_BOS UINT32_MAX

typedef enum EqlenAdvantageFamily {
  EQLEN_ADVANTAGE_FAMILY_GRPO_NORM = 0,
  EQLEN_ADVANTAGE_FAMILY_DR_GRPO = 1,
  EQLEN_ADVANTAGE_FAMILY_RLOO = 2,
} EqlenAdvantageFamily;

typedef enum EqlenStatus {
  EQLEN_STATUS_OK = 0,
  // Null pointer, bad length or a value outside its domain.
  EQLEN_STATUS_INVALID_ARGUMENT = 1,
  // A JSON document failed to parse or validate.
  EQLEN_STATUS_CONFIG = 2,
  EQLEN_STATUS_NUMERICAL = 3,
  EQLEN_STATUS_IO = 4,
  // A Rust panic was caught at the boundary.
  EQLEN_STATUS_INTERNAL = 5,
} EqlenStatus;

// Opaque tabular softmax policy.
typedef struct EqlenPolicy EqlenPolicy;

// Opaque scored dual-track rollout.
typedef struct EqlenRollout EqlenRollout;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *eqlen_last_error(void);

// Create a uniform policy over `vocab_size` tokens with context order
// `order`.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum EqlenStatus eqlen_policy_new(uint32_t vocab_size,
                                  uint32_t eos_id,
                                  uintptr_t order,
                                  struct EqlenPolicy **out);

// # Safety
// `policy` must come from [`eqlen_policy_new`] and not be freed twice.
void eqlen_policy_free(struct EqlenPolicy *policy);

// Set the logit row of one context. A null `window` sets the default row
// used by every context without its own. Window entries may be
// [`EQLEN_BOS`].
//
// # Safety
// `window` and `logits` must point to `window_len` and `logits_len`
// readable elements.
enum EqlenStatus eqlen_policy_set_logits(struct EqlenPolicy *policy,
                                         uint32_t question_id,
                                         const uint32_t *window,
                                         uintptr_t window_len,
                                         const double *logits,
                                         uintptr_t logits_len);

// Log-probability of `token` in the given context.
//
// # Safety
// `window` must point to `window_len` readable elements and `out` to
// writable storage.
enum EqlenStatus eqlen_policy_log_prob(const struct EqlenPolicy *policy,
                                       uint32_t question_id,
                                       const uint32_t *window,
                                       uintptr_t window_len,
                                       uint32_t token,
                                       double *out);

// Sample and score one dual-track rollout. `question_json` is a question
// object (`id`, `prompt`, `verifier`), `config_json` a rollout config
// (`group_size`, `max_len`, ...).
//
// # Safety
// Both strings must be NUL-terminated, `out` must be writable.
enum EqlenStatus eqlen_rollout_dualtrack(const struct EqlenPolicy *policy,
                                         const char *question_json,
                                         const char *config_json,
                                         uint64_t seed,
                                         struct EqlenRollout **out);

// # Safety
// `rollout` must come from [`eqlen_rollout_dualtrack`] and not be freed
// twice.
void eqlen_rollout_free(struct EqlenRollout *rollout);

// Number of harvested pairs, skipped ones included.
//
// # Safety
// `out` must be writable.
enum EqlenStatus eqlen_rollout_pair_count(const struct EqlenRollout *rollout, uintptr_t *out);

// Serialize the rollout. Release the string with [`eqlen_string_free`].
//
// # Safety
// `out` must be writable.
enum EqlenStatus eqlen_rollout_to_json(const struct EqlenRollout *rollout, char **out);

// # Safety
// `s` must come from this library and not be freed twice.
void eqlen_string_free(char *s);

// Group advantages of `len` rewards written to `out`. A zero-variance
// group under `GrpoNorm` yields all zeros.
//
// # Safety
// `rewards` must hold `len` readable and `out` `len` writable elements.
enum EqlenStatus eqlen_advantages(enum EqlenAdvantageFamily family,
                                  const double *rewards,
                                  uintptr_t len,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EQLEN_H */
