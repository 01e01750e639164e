#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "demoval.h"

#define CHECK(cond)                                                            \
  do {                                                                         \
    if (!(cond)) {                                                             \
      const char *err = dv_last_error();                                       \
      fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond, err ? err : "");  \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(void) {
  const double w[3] = {0.1, -0.05, 0.0};
  DvModel *model = NULL;
  CHECK(dv_model_new_additive(0.5, 0.5, w, 3, &model) == DV_STATUS_OK);
  CHECK(dv_model_len(model) == 3);

  size_t seq[2] = {0, 1};
  double v = 0.0;
  CHECK(dv_model_score(model, seq, 2, &v) == DV_STATUS_OK);
  CHECK(fabs(v - 0.575) < 1e-12);

  DvTable *exact = NULL;
  CHECK(dv_exact_values(model, 2, 1000, &exact) == DV_STATUS_OK);
  double value = 0.0;
  uint64_t count = 0;
  CHECK(dv_table_get(exact, 0, &value, &count) == DV_STATUS_OK);
  CHECK(fabs(value - 0.075) < 1e-12);
  CHECK(count == 4);

  char id[8];
  CHECK(dv_table_id(exact, 1, id, sizeof id) == 2);
  CHECK(strcmp(id, "d1") == 0);

  char *csv = NULL;
  CHECK(dv_table_to_csv(exact, &csv) == DV_STATUS_OK);
  CHECK(strncmp(csv, "demo_id,value,count\n", 20) == 0);
  dv_string_free(csv);

  DvTable *tiny = NULL;
  CHECK(dv_exact_values(model, 3, 5, &tiny) == DV_STATUS_BUDGET_EXCEEDED);
  CHECK(dv_last_error() != NULL);

  const uint8_t y[8] = {1, 1, 0, 0, 1, 1, 0, 0};
  const uint8_t f[8] = {1, 1, 1, 0, 1, 0, 0, 0};
  const uint8_t a[8] = {1, 1, 1, 1, 0, 0, 0, 0};
  DvFairness fm;
  CHECK(dv_fairness_metrics(y, f, a, 8, &fm) == DV_STATUS_OK);
  CHECK(fm.m_dpd == 0.5 && fm.m_eod == 0.5);

  dv_table_free(exact);
  dv_model_free(model);
  puts("ok");
  return 0;
}
