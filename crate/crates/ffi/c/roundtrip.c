/* Builds a plan, cuts a ramp tensor into patches, stitches them back and
 * checks the result. Usage: roundtrip <scratch-dir> */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "tessellate.h"

#define CHECK(call)                                                          \
  do {                                                                       \
    TsStatus status_ = (call);                                               \
    if (status_ != TS_STATUS_OK) {                                           \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)status_,           \
              ts_last_error_message());                                      \
      return 1;                                                              \
    }                                                                        \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) {
    fprintf(stderr, "usage: %s <scratch-dir>\n", argv[0]);
    return 2;
  }
  const size_t spatial[3] = {12, 14, 10};
  const size_t window[3] = {6, 6, 6};
  const size_t step[3] = {4, 4, 4};
  const size_t border[3] = {1, 1, 1};
  const size_t channels = 2;
  const size_t total = channels * spatial[0] * spatial[1] * spatial[2];

  TsPlan *plan = NULL;
  CHECK(ts_plan_new(1, channels, spatial, 3, window, step, border, 0.5f, &plan));
  size_t m = ts_plan_len(plan);
  size_t patch_len = ts_plan_patch_len(plan, channels);

  float *input = malloc(total * sizeof(float));
  float *patches = malloc(m * patch_len * sizeof(float));
  float *output = malloc(total * sizeof(float));
  for (size_t i = 0; i < total; i++) input[i] = (float)i * 0.25f - 7.0f;
  CHECK(ts_extract(plan, input, total, patches, m * patch_len));

  char *json = NULL;
  CHECK(ts_plan_to_json(plan, &json));
  TsPlan *reloaded = NULL;
  CHECK(ts_plan_from_json(json, &reloaded));
  ts_string_free(json);
  if (ts_plan_len(reloaded) != m) return 1;

  char path[4096];
  snprintf(path, sizeof path, "%s/stitch", argv[1]);
  TsAccumulators *acc = NULL;
  CHECK(ts_accumulators_create(reloaded, channels, path, &acc));
  for (size_t i = 0; i < m; i++)
    CHECK(ts_accumulate(acc, i, patches + i * patch_len, patch_len));
  if (ts_accumulate(acc, 0, patches, patch_len) != TS_STATUS_ALREADY_ACCUMULATED) return 1;

  TsArray *stitched = NULL;
  CHECK(ts_accumulators_finalize(acc, NULL, &stitched));
  size_t shape[5];
  CHECK(ts_array_shape(stitched, shape, 5));
  const size_t origin[5] = {0, 0, 0, 0, 0};
  CHECK(ts_array_read_region(stitched, origin, shape, 5, output, total));

  float worst = 0.0f;
  for (size_t i = 0; i < total; i++) {
    float d = fabsf(output[i] - input[i]);
    if (d > worst) worst = d;
  }
  printf("placements %zu max_abs_error %g\n", m, worst);

  ts_array_free(stitched);
  ts_accumulators_free(acc);
  ts_plan_free(reloaded);
  ts_plan_free(plan);
  free(input);
  free(patches);
  free(output);
  return worst <= 1e-5f ? 0 : 1;
}
