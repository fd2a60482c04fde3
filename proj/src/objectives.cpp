#include "attndb/objectives.hpp"

#include <cmath>

#include "attndb/common.hpp"

namespace attndb {

double diffusion_loss(const NoisePair& pair) {
    if (pair.predicted.rows() != pair.target.rows() || pair.predicted.cols() != pair.target.cols())
        fail(ErrorCode::ShapeMismatch, "diffusion_loss: predicted and target shapes differ");
    const Eigen::Index n = pair.predicted.size();
    if (n == 0) fail(ErrorCode::ShapeMismatch, "diffusion_loss: empty tensors");
    double sum = 0.0;
    for (Eigen::Index j = 0; j < pair.predicted.cols(); ++j)
        for (Eigen::Index i = 0; i < pair.predicted.rows(); ++i) {
            const double d = pair.predicted(i, j) - pair.target(i, j);
            sum += d * d;
        }
    return sum / static_cast<double>(n);
}

namespace {

PooledStats stats_for_column(const AttentionMapSet& maps, int column, PoolingMode mode) {
    if (mode == PoolingMode::kConcat) {
        std::size_t n = 0;
        double sum = 0.0;
        for (const AttentionRecord& rec : maps.layers) {
            sum += rec.values.col(column).sum();
            n += static_cast<std::size_t>(rec.values.rows());
        }
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (const AttentionRecord& rec : maps.layers)
            sq += (rec.values.col(column).array() - mean).square().sum();
        return {mean, sq / static_cast<double>(n)};
    }
    // per-layer mean / variance, averaged over layers
    double mean_acc = 0.0, var_acc = 0.0;
    for (const AttentionRecord& rec : maps.layers) {
        const double m = rec.values.col(column).mean();
        mean_acc += m;
        var_acc += (rec.values.col(column).array() - m).square().mean();
    }
    const double L = static_cast<double>(maps.layer_count());
    return {mean_acc / L, var_acc / L};
}

}  // namespace

double attention_reg_loss(const AttentionMapSet& maps, const RegWeights& weights,
                          PoolingMode mode) {
    if (maps.token_index.roles.count("V") == 0 || maps.token_index.roles.count("category") == 0)
        fail(ErrorCode::MissingTokenRole, "attention_reg_loss needs roles 'V' and 'category'");
    const PooledStats v = pooled_stats(maps, "V", mode);
    const PooledStats cat = pooled_stats(maps, "category", mode);
    const double dmu = v.mean - cat.mean;
    const double dvar = v.variance - cat.variance;
    return weights.lambda_mu * dmu * dmu + weights.lambda_sigma * dvar * dvar;
}

RegLossGrad attention_reg_loss_grad(const AttentionMapSet& maps, const RegWeights& weights,
                                    bool detach_category, PoolingMode mode) {
    if (maps.token_index.roles.count("V") == 0 || maps.token_index.roles.count("category") == 0)
        fail(ErrorCode::MissingTokenRole, "attention_reg_loss_grad needs roles 'V' and 'category'");
    const int col_v = maps.token_index.roles.at("V");
    const int col_cat = maps.token_index.roles.at("category");
    const PooledStats v = stats_for_column(maps, col_v, mode);
    const PooledStats cat = stats_for_column(maps, col_cat, mode);
    const double dmu = v.mean - cat.mean;
    const double dvar = v.variance - cat.variance;

    RegLossGrad out;
    out.loss = weights.lambda_mu * dmu * dmu + weights.lambda_sigma * dvar * dvar;
    out.d_values.reserve(maps.layers.size());

    std::size_t n_total = 0;
    for (const AttentionRecord& rec : maps.layers) n_total += rec.values.rows();
    const double L = static_cast<double>(maps.layer_count());

    // d loss = 2*lambda_mu*dmu * d(dmu) + 2*lambda_sigma*dvar * d(dvar)
    const double g_mu = 2.0 * weights.lambda_mu * dmu;
    const double g_var = 2.0 * weights.lambda_sigma * dvar;

    for (const AttentionRecord& rec : maps.layers) {
        Eigen::MatrixXd d = Eigen::MatrixXd::Zero(rec.values.rows(), rec.values.cols());
        const double n_layer = static_cast<double>(rec.values.rows());
        for (int side = 0; side < 2; ++side) {
            const bool is_v = side == 0;
            if (!is_v && detach_category) continue;
            const int col = is_v ? col_v : col_cat;
            const double sign = is_v ? 1.0 : -1.0;
            const double mean = is_v ? v.mean : cat.mean;
            if (mode == PoolingMode::kConcat) {
                const double inv_n = 1.0 / static_cast<double>(n_total);
                d.col(col) += sign * (g_mu * inv_n +
                                      g_var * 2.0 * inv_n *
                                          (rec.values.col(col).array() - mean))
                                         .matrix();
            } else {
                const double layer_mean = rec.values.col(col).mean();
                const double inv = 1.0 / (L * n_layer);
                d.col(col) += sign * (g_mu * inv +
                                      g_var * 2.0 * inv *
                                          (rec.values.col(col).array() - layer_mean))
                                         .matrix();
            }
        }
        out.d_values.push_back(std::move(d));
    }
    return out;
}

double total_loss(double diffusion, double regularizer) {
    if (!std::isfinite(diffusion) || !std::isfinite(regularizer))
        fail(ErrorCode::NonFiniteLoss, "total_loss: non-finite term");
    return diffusion + regularizer;
}

}  // namespace attndb
