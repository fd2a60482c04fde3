#pragma once

#include <Eigen/Dense>
#include <vector>

#include "attndb/attention_maps.hpp"

namespace attndb {

struct RegWeights {
    double lambda_mu = 0.0;
    double lambda_sigma = 0.0;
};

// Predicted and target noise with identical shapes; batches are flattened
// into the rows.
struct NoisePair {
    Eigen::MatrixXd predicted;
    Eigen::MatrixXd target;
};

// Mean squared error over all elements (the per-batch Monte-Carlo estimate of
// the denoising objective).
double diffusion_loss(const NoisePair& pair);

// lambda_mu * (mu_V - mu_cat)^2 + lambda_sigma * (var_V - var_cat)^2 with the
// pooled mean / population variance of each token's maps across all layers.
double attention_reg_loss(const AttentionMapSet& maps, const RegWeights& weights,
                          PoolingMode mode = PoolingMode::kConcat);

struct RegLossGrad {
    double loss = 0.0;
    // d loss / d value, same shape as each layer's record; zero outside the
    // "V" and "category" columns.
    std::vector<Eigen::MatrixXd> d_values;
};

RegLossGrad attention_reg_loss_grad(const AttentionMapSet& maps, const RegWeights& weights,
                                    bool detach_category = false,
                                    PoolingMode mode = PoolingMode::kConcat);

double total_loss(double diffusion, double regularizer);

}  // namespace attndb
