#ifndef PDSIM_H
#define PDSIM_H

#include <stddef.h>
#include <stdint.h>

typedef enum PdsimPhase {
  PDSIM_PHASE_PREFILL = 0,
  PDSIM_PHASE_DECODE = 1,
} PdsimPhase;

typedef enum PdsimStatus {
  PDSIM_STATUS_OK = 0,
  PDSIM_STATUS_NULL_POINTER = 1,
  PDSIM_STATUS_INVALID_ARGUMENT = 2,
  PDSIM_STATUS_VALIDATION = 3,
  PDSIM_STATUS_COVERAGE = 4,
  PDSIM_STATUS_CALIBRATION = 5,
  PDSIM_STATUS_IO = 6,
  PDSIM_STATUS_SCENARIO = 7,
  PDSIM_STATUS_INTERNAL = 8,
} PdsimStatus;

/*
 Opaque calibration handle.
 */
typedef struct PdsimCalibration PdsimCalibration;

/*
 Opaque decode router: routing config, the decode controller used for
 what-if analysis, a calibration copy and the round-robin cursor.
 */
typedef struct PdsimRouter PdsimRouter;

/*
 Mirror of the controller/router input for one instance.
 */
typedef struct PdsimSnapshot {
  uint64_t instance_id;
  enum PdsimPhase phase;
  uint64_t queue_len;
  double max_wait_ms;
  uint64_t n_req;
  uint64_t n_kv;
  uint64_t n_bt;
  uint32_t current_freq_mhz;
} PdsimSnapshot;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. The pointer is
 valid until the next pdsim call on the same thread.
 */
const char *pdsim_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *pdsim_version(void);

/*
 # Safety
 `s` must be null or a string returned by this library.
 */
void pdsim_string_free(char *s);

/*
 Built-in default calibration.

 # Safety
 `out` must be valid for writes.
 */
enum PdsimStatus pdsim_calibration_default(struct PdsimCalibration **out);

/*
 Parses a calibration JSON document.

 # Safety
 `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum PdsimStatus pdsim_calibration_from_json(const char *json, struct PdsimCalibration **out);

/*
 Loads a calibration file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum PdsimStatus pdsim_calibration_load(const char *path, struct PdsimCalibration **out);

/*
 Serializes a calibration to JSON; free the result with `pdsim_string_free`.

 # Safety
 `cal` must be a live handle; `out` must be valid for writes.
 */
enum PdsimStatus pdsim_calibration_to_json(const struct PdsimCalibration *cal, char **out);

/*
 # Safety
 `cal` must be null or a handle from this library, not used afterwards.
 */
void pdsim_calibration_free(struct PdsimCalibration *cal);

/*
 Predicted prefill batch latency in milliseconds.

 # Safety
 `cal` must be a live handle; `out_ms` must be valid for writes.
 */
enum PdsimStatus pdsim_predict_ttft(const struct PdsimCalibration *cal,
                                    uint32_t freq_mhz,
                                    uint64_t n_bt,
                                    double *out_ms);

/*
 Predicted decode iteration latency in milliseconds.

 # Safety
 `cal` must be a live handle; `out_ms` must be valid for writes.
 */
enum PdsimStatus pdsim_predict_itl(const struct PdsimCalibration *cal,
                                   uint32_t freq_mhz,
                                   uint64_t n_req,
                                   uint64_t n_kv,
                                   double *out_ms);

/*
 Lowest ladder frequency predicted to meet the SLO for `snapshot`, or the
 top level under backlog or when nothing fits.

 # Safety
 `cal` must be a live handle, `ladder` must point to `ladder_len`
 values, `snapshot` must be readable and `out_mhz` writable.
 */
enum PdsimStatus pdsim_select_frequency(const struct PdsimCalibration *cal,
                                        const uint32_t *ladder,
                                        size_t ladder_len,
                                        double ttft_slo_ms,
                                        double itl_slo_ms,
                                        const struct PdsimSnapshot *snapshot,
                                        uint32_t *out_mhz);

/*
 Creates a decode router. `delta_mhz < 0` means unbounded; `round_robin`
 non-zero selects plain round-robin instead of state-space routing.

 # Safety
 `cal` must be a live handle (it is copied), `ladder` must point to
 `ladder_len` values and `out` must be writable.
 */
enum PdsimStatus pdsim_router_new(const struct PdsimCalibration *cal,
                                  const uint32_t *ladder,
                                  size_t ladder_len,
                                  double ttft_slo_ms,
                                  double itl_slo_ms,
                                  int64_t delta_mhz,
                                  int32_t round_robin,
                                  struct PdsimRouter **out);

/*
 Picks a decode instance for a request; writes an index into `snapshots`.

 # Safety
 `router` must be a live handle, `snapshots` must point to `n` values and
 `out_index` must be writable.
 */
enum PdsimStatus pdsim_router_route_decode(struct PdsimRouter *router,
                                           const struct PdsimSnapshot *snapshots,
                                           size_t n,
                                           uint32_t input_len,
                                           uint32_t output_len,
                                           size_t *out_index);

/*
 # Safety
 `router` must be null or a handle from this library, not used afterwards.
 */
void pdsim_router_free(struct PdsimRouter *router);

/*
 Runs a scenario given as JSON and writes the metrics report as JSON.
 Relative paths in the config resolve against `base_dir` (null: current
 directory). Free the result with `pdsim_string_free`.

 # Safety
 `config_json` must be a NUL-terminated string, `base_dir` null or one,
 and `out_report_json` writable.
 */
enum PdsimStatus pdsim_run_scenario_json(const char *config_json,
                                         const char *base_dir,
                                         char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDSIM_H */
