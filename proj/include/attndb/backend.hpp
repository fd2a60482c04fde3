#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "attndb/attention_maps.hpp"
#include "attndb/grid.hpp"

namespace attndb {

struct NamedParam;

// DDPM forward-process schedule. alpha_bars are the cumulative products of
// (1 - beta_t) and must be strictly decreasing.
struct NoiseSchedule {
    int T = 0;
    Eigen::VectorXd betas;
    Eigen::VectorXd alpha_bars;

    static NoiseSchedule linear(int T, double beta_start, double beta_end);
};

// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
Grid add_noise(const Grid& z0, int t, const Grid& eps, const NoiseSchedule& schedule);

struct TokenizedPrompt {
    std::vector<int> ids;
    std::vector<std::string> tokens;
};

// Result of a training-mode forward pass. `maps` holds the head- and
// batch-averaged post-softmax attention maps, value-equal to what a capture
// session records for the same pass. `tape` keeps backend-private
// intermediates for the matching backward call.
struct TrainForward {
    std::vector<Grid> eps_hat;
    AttentionMapSet maps;
    std::shared_ptr<void> tape;
};

// Contract between the trainer/evaluator and a diffusion model: text side
// (tokenize, vocabulary mutation, conditioning), latent side (encode/decode,
// noising, denoising with attention taps) and named parameter groups that
// partition all trainable parameters.
class Backend {
public:
    virtual ~Backend() = default;

    // text
    virtual TokenizedPrompt tokenize(const std::string& text) const = 0;
    virtual bool has_token(const std::string& token) const = 0;
    virtual int token_id(const std::string& token) const = 0;
    virtual int vocab_size() const = 0;
    virtual int embedding_dim() const = 0;
    virtual Eigen::VectorXd embedding_row(int id) const = 0;
    virtual void set_embedding_row(int id, const Eigen::VectorXd& value) = 0;
    virtual int append_token(const std::string& token, const Eigen::VectorXd& embedding) = 0;
    virtual Eigen::MatrixXd encode_text(const std::vector<int>& ids) const = 0;

    // latents
    virtual int input_resolution() const = 0;
    virtual int latent_channels() const = 0;
    virtual const NoiseSchedule& schedule() const = 0;
    virtual Grid encode_image(const Grid& rgb) const = 0;
    virtual Grid decode_latent(const Grid& latent) const = 0;

    // denoising; capture taps fire when a session is attached
    virtual std::vector<Grid> predict_noise(const std::vector<Grid>& z_t,
                                            const std::vector<int>& timesteps,
                                            const Eigen::MatrixXd& cond) = 0;

    // training surface
    virtual TrainForward forward_train(const std::vector<Grid>& z_t,
                                       const std::vector<int>& timesteps,
                                       const TokenizedPrompt& prompt,
                                       const TokenRoleMap& roles) = 0;
    // d_eps: gradient of the loss w.r.t. eps_hat, one Grid per batch item.
    // d_attn: per-layer gradient w.r.t. the averaged maps in TrainForward.maps
    // (empty to skip). Accumulates into the backend's gradient store.
    virtual void backward(const TrainForward& forward, const std::vector<Grid>& d_eps,
                          const std::vector<Eigen::MatrixXd>& d_attn) = 0;
    virtual void zero_grads() = 0;
    virtual Eigen::MatrixXd* grad_of(const std::string& param_name) = 0;

    // parameter groups
    virtual std::vector<std::string> group_names() const = 0;
    virtual std::vector<NamedParam> group_params(const std::string& group) = 0;

    virtual int cross_attention_layer_count() const = 0;

    // capture attachment (one session at a time)
    void attach_capture(CaptureSession* session) { capture_ = session; }
    void detach_capture() { capture_ = nullptr; }
    CaptureSession* capture() const { return capture_; }

private:
    CaptureSession* capture_ = nullptr;
};

struct ToyConfig {
    int resolution = 16;
    int latent_channels = 4;
    int model_dim = 16;
    int token_dim = 16;
    int vocab_size = 64;
    int heads = 1;
    int blocks = 2;
    int timesteps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int max_prompt_len = 32;
};

std::unique_ptr<Backend> toy_backend(const ToyConfig& config, std::uint64_t seed);

// Ancestral DDPM sampling against any backend. Returns n decodable latents;
// all stochasticity comes from `rng`.
std::vector<Grid> ddpm_sample(Backend& backend, const Eigen::MatrixXd& cond, int n,
                              std::mt19937_64& rng);

// Adapter seam for a real pretrained latent-diffusion pipeline. Fails with
// WeightsUnavailable when the referenced weights cannot be loaded; it never
// falls back to the toy backend.
std::unique_ptr<Backend> pretrained_adapter(const std::string& weights_path);

}  // namespace attndb
