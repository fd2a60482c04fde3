#include "attndb/optimizer.hpp"

#include <cmath>

#include "attndb/common.hpp"

namespace attndb {

Adam::Adam(AdamConfig config, std::vector<ParamView> params)
    : cfg_(config), params_(std::move(params)) {
    if (cfg_.learning_rate <= 0.0) fail(ErrorCode::InvalidConfig, "learning rate must be > 0");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const ParamView& p : params_) {
        if (p.value == nullptr || p.grad == nullptr)
            fail(ErrorCode::ScopeResolutionFailure, "parameter view missing value or grad");
        if (p.row >= 0 && p.row >= p.value->rows())
            fail(ErrorCode::ScopeResolutionFailure, "row view out of range for " + p.name);
        m_.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
        v_.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const ParamView& p = params_[i];
        const Eigen::MatrixXd g =
            p.row < 0 ? *p.grad : static_cast<Eigen::MatrixXd>(p.grad->row(p.row));
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const Eigen::MatrixXd update =
            cfg_.learning_rate *
            (m_[i] / bc1).cwiseQuotient(((v_[i] / bc2).cwiseSqrt().array() + cfg_.eps).matrix());
        if (p.row < 0)
            *p.value -= update;
        else
            p.value->row(p.row) -= update;
    }
}

}  // namespace attndb
