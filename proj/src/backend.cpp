#include "attndb/backend.hpp"

#include <cmath>
#include <filesystem>

#include "attndb/common.hpp"
#include "attndb/fingerprint.hpp"

namespace attndb {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 1) fail(ErrorCode::InvalidConfig, "noise schedule needs T >= 1");
    if (beta_start <= 0.0 || beta_end >= 1.0 || beta_end < beta_start)
        fail(ErrorCode::InvalidConfig, "betas must satisfy 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alpha_bars.resize(T);
    double abar = 1.0;
    for (int t = 0; t < T; ++t) {
        s.betas[t] = T == 1 ? beta_start
                            : beta_start + (beta_end - beta_start) * t / static_cast<double>(T - 1);
        abar *= 1.0 - s.betas[t];
        s.alpha_bars[t] = abar;
        if (t > 0 && !(s.alpha_bars[t] < s.alpha_bars[t - 1]))
            fail(ErrorCode::InvalidConfig, "alpha_bar must be strictly decreasing");
    }
    return s;
}

Grid add_noise(const Grid& z0, int t, const Grid& eps, const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.T)
        fail(ErrorCode::TimestepOutOfRange, "t = " + std::to_string(t));
    if (z0.h != eps.h || z0.w != eps.w || z0.c != eps.c)
        fail(ErrorCode::ShapeMismatch, "add_noise: z0 and eps shapes differ");
    const double abar = schedule.alpha_bars[t];
    Grid out = z0;
    out.values = std::sqrt(abar) * z0.values + std::sqrt(1.0 - abar) * eps.values;
    return out;
}

std::vector<Grid> ddpm_sample(Backend& backend, const Eigen::MatrixXd& cond, int n,
                              std::mt19937_64& rng) {
    const NoiseSchedule& sched = backend.schedule();
    const int res = backend.input_resolution();
    const int ch = backend.latent_channels();
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<Grid> z(n, Grid::zeros(res, res, ch));
    for (Grid& g : z)
        for (int i = 0; i < g.values.rows(); ++i)
            for (int j = 0; j < g.values.cols(); ++j) g.values(i, j) = gauss(rng);

    for (int t = sched.T - 1; t >= 0; --t) {
        std::vector<int> ts(n, t);
        std::vector<Grid> eps_hat = backend.predict_noise(z, ts, cond);
        const double beta = sched.betas[t];
        const double alpha = 1.0 - beta;
        const double abar = sched.alpha_bars[t];
        const double abar_prev = t > 0 ? sched.alpha_bars[t - 1] : 1.0;
        const double sigma = t > 0 ? std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta) : 0.0;
        for (int i = 0; i < n; ++i) {
            z[i].values =
                (z[i].values - (beta / std::sqrt(1.0 - abar)) * eps_hat[i].values) /
                std::sqrt(alpha);
            if (t > 0)
                for (Eigen::Index r = 0; r < z[i].values.rows(); ++r)
                    for (Eigen::Index c = 0; c < z[i].values.cols(); ++c)
                        z[i].values(r, c) += sigma * gauss(rng);
        }
    }
    return z;
}

std::unique_ptr<Backend> pretrained_adapter(const std::string& weights_path) {
    namespace fs = std::filesystem;
    if (weights_path.empty())
        fail(ErrorCode::WeightsUnavailable, "no weights path configured");
    if (!fs::exists(weights_path))
        fail(ErrorCode::WeightsUnavailable, "weights not found at " + weights_path);
    // The adapter seam stops here: this build ships no pretrained diffusion
    // runtime, so an on-disk bundle cannot be executed. Callers get a clean
    // failure instead of a silent toy substitute.
    fail(ErrorCode::WeightsUnavailable,
         "no loadable diffusion runtime for bundle at " + weights_path);
}

}  // namespace attndb
