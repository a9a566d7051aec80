#ifndef QUARK_H
#define QUARK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QuarkStatus {
  QUARK_STATUS_OK = 0,
  QUARK_STATUS_NULL_POINTER = 1,
  QUARK_STATUS_INVALID_UTF8 = 2,
  QUARK_STATUS_INVALID_ARGUMENT = 3,
  QUARK_STATUS_IO = 4,
  QUARK_STATUS_CHECKPOINT = 5,
  QUARK_STATUS_MODEL = 6,
  QUARK_STATUS_PANIC = 7,
} QuarkStatus;

/*
 A language model with its tokenizer, loaded from a checkpoint.
 */
typedef struct QuarkModel QuarkModel;

/*
 A text reward: constant, diversity, sentiment or banned words.
 */
typedef struct QuarkReward QuarkReward;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the most recent failure on this thread, or null. Valid until the next failing call.
 */
const char *quark_last_error(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void quark_string_free(char *s);

/*
 Loads a checkpoint file into a new model handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum QuarkStatus quark_model_load(const char *path, struct QuarkModel **out);

/*
 # Safety
 `model` must come from [`quark_model_load`] and not have been freed. Null is ignored.
 */
void quark_model_free(struct QuarkModel *model);

/*
 Number of reward tokens the model was trained with (0 for a reference model).

 # Safety
 `model` must be a live handle and `out` writable.
 */
enum QuarkStatus quark_model_n_quantiles(const struct QuarkModel *model, size_t *out);

/*
 Samples a continuation of `prompt` conditioned on reward quantile `quantile`
 (1 is the lowest; 0 means unconditioned). `top_p <= 0` decodes greedily.
 Generation stops at end-of-sequence or after `max_new_tokens`.

 # Safety
 `model` must be a live handle, `prompt` a NUL-terminated string and `out` writable.
 */
enum QuarkStatus quark_model_sample(const struct QuarkModel *model,
                                    const char *prompt,
                                    uint32_t quantile,
                                    size_t max_new_tokens,
                                    double top_p,
                                    uint64_t seed,
                                    char **out);

/*
 Natural-log probability of `continuation` given `prompt` under quantile `quantile` (0 = unconditioned).

 # Safety
 `model` must be a live handle, both strings NUL-terminated and `out` writable.
 */
enum QuarkStatus quark_model_logprob(const struct QuarkModel *model,
                                     const char *prompt,
                                     const char *continuation,
                                     uint32_t quantile,
                                     double *out);

/*
 Unconditioned perplexity of `n` continuations given their prompts, pooled over all tokens.

 # Safety
 `prompts` and `continuations` must each point to `n` NUL-terminated strings; `out` must be writable.
 */
enum QuarkStatus quark_model_perplexity(const struct QuarkModel *model,
                                        const char *const *prompts,
                                        const char *const *continuations,
                                        size_t n,
                                        double *out);

/*
 Reward that always returns `value`, which must lie in [0, 1].

 # Safety
 `out` must be writable.
 */
enum QuarkStatus quark_reward_constant(double value, struct QuarkReward **out);

/*
 Distinct-n-gram diversity of the continuation.

 # Safety
 `out` must be writable.
 */
enum QuarkStatus quark_reward_diversity(struct QuarkReward **out);

/*
 Lexicon sentiment. Each list holds one term per line; `#` starts a comment.

 # Safety
 Both lists must be NUL-terminated strings or null; `out` must be writable.
 */
enum QuarkStatus quark_reward_sentiment(const char *positive,
                                        const char *negative,
                                        struct QuarkReward **out);

/*
 One minus the fraction of continuation words that are banned. `banned` holds one term per line.

 # Safety
 `banned` must be a NUL-terminated string; `out` must be writable.
 */
enum QuarkStatus quark_reward_banned(const char *banned, struct QuarkReward **out);

/*
 Scores `continuation` as a reply to `prompt`.

 # Safety
 `reward` must be a live handle, both strings NUL-terminated and `out` writable.
 */
enum QuarkStatus quark_reward_score(const struct QuarkReward *reward,
                                    const char *prompt,
                                    const char *continuation,
                                    double *out);

/*
 # Safety
 `reward` must come from a `quark_reward_*` constructor and not have been freed. Null is ignored.
 */
void quark_reward_free(struct QuarkReward *reward);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUARK_H */
