#ifndef MVGMP_H
#define MVGMP_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MvgmpStatus {
  MVGMP_STATUS_OK = 0,
  MVGMP_STATUS_NULL_POINTER = 1,
  MVGMP_STATUS_INVALID_ARGUMENT = 2,
  MVGMP_STATUS_INVALID_PROBABILITY = 3,
  MVGMP_STATUS_VIEW_OUT_OF_RANGE = 4,
  MVGMP_STATUS_INVALID_CONFIG = 5,
  MVGMP_STATUS_INVARIANT_BREACH = 6,
  MVGMP_STATUS_PANIC = 7,
} MvgmpStatus;

/**
 * Copies of each view sent on each link.
 */
typedef struct MvgmpPlan MvgmpPlan;

/**
 * Per-link loss probabilities of one user.
 */
typedef struct MvgmpUser MvgmpUser;

/**
 * The access point's view table.
 */
typedef struct MvgmpViewTable MvgmpViewTable;

typedef struct MvgmpEntryKey {
  size_t view;
  uint8_t channel;
  uint8_t rate;
} MvgmpEntryKey;

typedef struct MvgmpJoinRequest {
  struct MvgmpEntryKey key;
  uint32_t tx_count;
} MvgmpJoinRequest;

typedef struct MvgmpSchemeSummary {
  double mean_channel_time;
  double channel_time_se;
  double mean_makespan;
  double success_rate;
  uint64_t user_frames;
} MvgmpSchemeSummary;

/**
 * Steady-state summary of one run. `sufficient` is 0 when the run had too
 * few frames after warmup for the statistics to mean anything.
 */
typedef struct MvgmpSummary {
  uint8_t sufficient;
  uint64_t frames;
  double mean_population;
  double mean_transmitted_views;
  struct MvgmpSchemeSummary mvgmp;
  struct MvgmpSchemeSummary baseline;
} MvgmpSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mvgmp_last_error(void);

/**
 * Limit of the obtained view fraction when one view in every `spacing`
 * views is multicast and each is lost with probability `loss_p`. Use
 * `spacing = 1` for full multicast.
 */
enum MvgmpStatus mvgmp_alpha_asymptotic(double loss_p,
                                        size_t dibr_range,
                                        size_t spacing,
                                        double *alpha);

/**
 * Limit of the obtained view fraction under a periodic Zipf subscription
 * with probability `normalizer / phase^exponent` per view.
 */
enum MvgmpStatus mvgmp_alpha_zipf(double success_p,
                                  size_t dibr_range,
                                  size_t period,
                                  double exponent,
                                  double normalizer,
                                  double *alpha);

/**
 * Build a user from a row-major `channels x rates` loss matrix. Entries of
 * `1.0` mark links the user cannot hear. Returns null on failure.
 */
struct MvgmpUser *mvgmp_user_new(const double *loss, uint32_t channels, uint32_t rates);

void mvgmp_user_free(struct MvgmpUser *user);

/**
 * An empty plan over views `1..=total_views`. Returns null when
 * `total_views` is zero.
 */
struct MvgmpPlan *mvgmp_plan_new(size_t total_views);

void mvgmp_plan_free(struct MvgmpPlan *plan);

/**
 * Send `count` copies of `view` on `(channel, rate)`, replacing any
 * previous count for that triple.
 */
enum MvgmpStatus mvgmp_plan_set(struct MvgmpPlan *plan,
                                size_t view,
                                uint32_t channel,
                                uint32_t rate,
                                uint32_t count);

/**
 * Probability that the user neither receives nor can synthesize `view`.
 */
enum MvgmpStatus mvgmp_view_failure_prob(size_t dibr_range,
                                         const struct MvgmpUser *user,
                                         const struct MvgmpPlan *plan,
                                         size_t view,
                                         double *failure);

/**
 * Expected fraction of the `num_views` subscribed views the user obtains.
 */
enum MvgmpStatus mvgmp_expected_alpha(size_t dibr_range,
                                      const struct MvgmpUser *user,
                                      const struct MvgmpPlan *plan,
                                      const size_t *views,
                                      size_t num_views,
                                      double *alpha);

struct MvgmpViewTable *mvgmp_table_new(size_t total_views, uint8_t channels, uint8_t rates);

void mvgmp_table_free(struct MvgmpViewTable *table);

/**
 * Apply a Join from `user` at frame `now`. Nothing changes on failure.
 */
enum MvgmpStatus mvgmp_table_join(struct MvgmpViewTable *table,
                                  uint32_t user,
                                  const struct MvgmpJoinRequest *requests,
                                  size_t num_requests,
                                  uint64_t now);

/**
 * Apply a Leave from `user`. `stopped`, when not null, receives the number
 * of entries that lost their last subscriber.
 */
enum MvgmpStatus mvgmp_table_leave(struct MvgmpViewTable *table,
                                   uint32_t user,
                                   const struct MvgmpEntryKey *keys,
                                   size_t num_keys,
                                   size_t *stopped);

/**
 * Drop subscriptions not refreshed within `timeout` frames of `now`.
 * Returns the number of users that lost at least one subscription.
 */
size_t mvgmp_table_expire(struct MvgmpViewTable *table, uint64_t now, uint64_t timeout);

/**
 * Number of active entries; zero for a null table.
 */
size_t mvgmp_table_len(const struct MvgmpViewTable *table);

/**
 * On-air copies of an entry; zero when the entry is absent.
 */
uint32_t mvgmp_table_tx_count(const struct MvgmpViewTable *table, struct MvgmpEntryKey key);

/**
 * Run both schemes on the base scenario of a TOML run config (any sweep is
 * ignored) with the given seed.
 */
enum MvgmpStatus mvgmp_run_scenario(const char *config_toml,
                                    uint64_t seed,
                                    struct MvgmpSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVGMP_H */
