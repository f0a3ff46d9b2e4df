#include <math.h>
#include <stdio.h>
#include <string.h>

#include "bdm.h"

static int failures = 0;

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            failures++;                                          \
        }                                                        \
    } while (0)

int main(void) {
    BdmModel *m = NULL;
    CHECK(bdm_model_exponential(6, 1.2, &m) == BDM_STATUS_OK);
    CHECK(bdm_model_dim(m) == 1);

    double theta = 0.9;
    BdmValue v;
    CHECK(bdm_evaluate(m, BDM_METHOD_HO, NULL, 0, &theta, 1, NULL, &v) == BDM_STATUS_OK);
    CHECK(fabs(v.delta - 0.6172) < 1e-3);
    CHECK(strlen(bdm_last_error()) == 0);

    theta = -1.0;
    CHECK(bdm_evaluate(m, BDM_METHOD_IO, NULL, 0, &theta, 1, NULL, &v) == BDM_STATUS_INVALID_ARGUMENT);
    CHECK(strlen(bdm_last_error()) > 0);

    char *json = NULL;
    theta = 1.2;
    CHECK(bdm_evaluate_json(m, BDM_METHOD_EXACT, NULL, 0, &theta, 1, NULL, &json) == BDM_STATUS_OK);
    CHECK(json != NULL && strstr(json, "\"method\":\"exact\"") != NULL);
    bdm_string_free(json);
    bdm_model_free(m);

    BdmModel *logit = NULL;
    CHECK(bdm_model_logistic_csv(NULL, 5.0, &logit) == BDM_STATUS_OK);
    size_t psi[2] = {1, 2};
    double zero[2] = {0.0, 0.0};
    BdmOptions opts = {false, BDM_FRAME_WHITENED};
    CHECK(bdm_evaluate(logit, BDM_METHOD_SN, psi, 2, zero, 2, &opts, &v) == BDM_STATUS_OK);
    CHECK(isnan(v.tail_low));
    CHECK(bdm_evaluate(logit, BDM_METHOD_HO, psi, 2, zero, 2, NULL, &v) == BDM_STATUS_UNSUPPORTED);
    bdm_model_free(logit);

    CHECK(bdm_model_exponential(6, 1.2, NULL) == BDM_STATUS_NULL_POINTER);
    printf("%s %d failures\n", bdm_version(), failures);
    return failures == 0 ? 0 : 1;
}
