#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace attndb {

// A trainable slice of a parameter tensor: the whole tensor, or a single row
// (used for the placeholder's row of the token-embedding table).
struct ParamView {
    std::string name;
    Eigen::MatrixXd* value = nullptr;
    Eigen::MatrixXd* grad = nullptr;
    int row = -1;  // -1: whole tensor

    Eigen::Index rows() const { return row < 0 ? value->rows() : 1; }
    Eigen::Index cols() const { return value->cols(); }
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adaptive-moment optimizer, no weight decay. State is created fresh per
// training stage.
class Adam {
public:
    Adam(AdamConfig config, std::vector<ParamView> params);

    void step();  // consumes the grads currently stored in each view
    long steps_taken() const { return t_; }
    const std::vector<ParamView>& params() const { return params_; }

private:
    AdamConfig cfg_;
    std::vector<ParamView> params_;
    std::vector<Eigen::MatrixXd> m_, v_;
    long t_ = 0;
};

}  // namespace attndb
