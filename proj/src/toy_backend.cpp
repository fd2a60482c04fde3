#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attndb/backend.hpp"
#include "attndb/common.hpp"
#include "attndb/fingerprint.hpp"

namespace attndb {
namespace {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

const char* const kUnk = "<unk>";

// Base vocabulary, common prompt words first so small configs still cover the
// training prompt and the words used by the evaluation suite.
const char* const kBaseWords[] = {
    "a",        "photo",    "of",       "the",     "in",      "on",       "with",   "and",
    "toy",      "cat",      "dog",      "bear",    "clock",   "teapot",   "can",    "pot",
    "bowl",     "doll",     "sloth",    "backpack", "two",     "wearing",  "floats", "covered",
    "red",      "purple",   "black",    "white",   "green",   "blue",     "style",  "painting",
    "drawing",  "art",      "latte",    "pencil",  "manga",   "watercolor", "vector", "monet",
    "table",    "wall",     "garden",   "forest",  "water",   "snow",     "street", "park",
    "basket",   "cage",     "rocks",    "leaves",  "blanket", "beach",    "city",   "mountain",
    "chair",    "box",      "cube",     "sphere",  "hat",     "ribbon",   "sunglasses", "bowtie",
    "top",      "inside",   "by",       "at",      "is",      "sits",     "old",    "new",
};
constexpr int kBaseWordCount = static_cast<int>(sizeof(kBaseWords) / sizeof(kBaseWords[0]));

// init scales; the conditioning path is deliberately not tiny so that token
// embedding updates move the prediction measurably
constexpr double kEmbedInit = 0.3;
// Positional spread stays moderate: per-position key differences put an
// attention bias on every token column, and the bias an untrained model
// starts with has to be closable by the staged schedule's small step sizes.
constexpr double kPosInit = 0.18;
constexpr double kStemGain = 0.5;
constexpr double kTimeGain = 0.25;
// The output head starts with some weight behind it so the denoising loss has
// leverage on paths that never touch attention placement; with the tiny
// late-stage step sizes this is what makes training progress show up above
// minibatch noise.
constexpr double kOutGain = 0.7;
// The value/output projections start small: q/k gradients from the denoising
// loss pass through wv*wo, so this keeps attention *placement* governed by
// the map regularizer while the denoising loss trains the value path at
// whatever magnitude it needs.
constexpr double kAttnValueGain = 0.065;

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return s;
}

MatrixXd softmax_rows(const MatrixXd& logits) {
    MatrixXd out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        RowVectorXd e = (logits.row(i).array() - m).exp();
        out.row(i) = e / e.sum();
    }
    return out;
}

MatrixXd silu(const MatrixXd& x) {
    return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

MatrixXd silu_deriv(const MatrixXd& x) {
    return x.unaryExpr([](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
    });
}

// 2x2 average pooling over a location-major (res*res) x d matrix
MatrixXd pool2(const MatrixXd& x, int res) {
    const int half = res / 2;
    MatrixXd out = MatrixXd::Zero(half * half, x.cols());
    for (int y = 0; y < res; ++y)
        for (int xx = 0; xx < res; ++xx)
            out.row((y / 2) * half + xx / 2) += 0.25 * x.row(y * res + xx);
    return out;
}

MatrixXd pool2_backward(const MatrixXd& d, int res) {
    const int half = res / 2;
    MatrixXd out(res * res, d.cols());
    for (int y = 0; y < res; ++y)
        for (int xx = 0; xx < res; ++xx)
            out.row(y * res + xx) = 0.25 * d.row((y / 2) * half + xx / 2);
    return out;
}

// nearest-neighbour upsample from (parent_res/2)^2 to parent_res^2 locations
MatrixXd up2(const MatrixXd& child, int parent_res) {
    const int half = parent_res / 2;
    MatrixXd out(parent_res * parent_res, child.cols());
    for (int y = 0; y < parent_res; ++y)
        for (int xx = 0; xx < parent_res; ++xx)
            out.row(y * parent_res + xx) = child.row((y / 2) * half + xx / 2);
    return out;
}

MatrixXd up2_backward(const MatrixXd& d, int parent_res) {
    const int half = parent_res / 2;
    MatrixXd out = MatrixXd::Zero(half * half, d.cols());
    for (int y = 0; y < parent_res; ++y)
        for (int xx = 0; xx < parent_res; ++xx)
            out.row((y / 2) * half + xx / 2) += d.row(y * parent_res + xx);
    return out;
}

RowVectorXd timestep_embedding(int t, int dim) {
    RowVectorXd e = RowVectorXd::Zero(dim);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / static_cast<double>(half));
        e(k) = std::sin(t * freq);
        e(half + k) = std::cos(t * freq);
    }
    return e;
}

struct BlockParams {
    MatrixXd wq, wk, wv, wo;  // attention
    MatrixXd w1, b1, w2, b2;  // mlp
};

struct LevelTape {
    MatrixXd x_in, x_att, h_pre;
    std::vector<MatrixXd> attn;  // per head, N_l x T
};

struct ItemTape {
    RowVectorXd temb;
    MatrixXd x_final;
    std::vector<LevelTape> levels;
};

struct Tape {
    std::vector<int> ids;
    bool text_grads = false;
    MatrixXd esel;                    // T x token_dim, E[id] + Pos[pos]
    MatrixXd cond;                    // T x token_dim
    std::vector<MatrixXd> keys, vals; // per level, T x model_dim
    std::vector<MatrixXd> z;          // per item, (res*res) x channels
    std::vector<ItemTape> items;
};

class ToyBackend final : public Backend {
public:
    ToyBackend(const ToyConfig& cfg, std::uint64_t seed);

    TokenizedPrompt tokenize(const std::string& text) const override;
    bool has_token(const std::string& token) const override;
    int token_id(const std::string& token) const override;
    int vocab_size() const override { return static_cast<int>(words_.size()); }
    int embedding_dim() const override { return cfg_.token_dim; }
    Eigen::VectorXd embedding_row(int id) const override;
    void set_embedding_row(int id, const Eigen::VectorXd& value) override;
    int append_token(const std::string& token, const Eigen::VectorXd& embedding) override;
    Eigen::MatrixXd encode_text(const std::vector<int>& ids) const override;

    int input_resolution() const override { return cfg_.resolution; }
    int latent_channels() const override { return cfg_.latent_channels; }
    const NoiseSchedule& schedule() const override { return sched_; }
    Grid encode_image(const Grid& rgb) const override;
    Grid decode_latent(const Grid& latent) const override;

    std::vector<Grid> predict_noise(const std::vector<Grid>& z_t, const std::vector<int>& timesteps,
                                    const Eigen::MatrixXd& cond) override;
    TrainForward forward_train(const std::vector<Grid>& z_t, const std::vector<int>& timesteps,
                               const TokenizedPrompt& prompt, const TokenRoleMap& roles) override;
    void backward(const TrainForward& forward, const std::vector<Grid>& d_eps,
                  const std::vector<Eigen::MatrixXd>& d_attn) override;
    void zero_grads() override;
    Eigen::MatrixXd* grad_of(const std::string& param_name) override;

    std::vector<std::string> group_names() const override;
    std::vector<NamedParam> group_params(const std::string& group) override;
    int cross_attention_layer_count() const override { return cfg_.blocks; }

private:
    struct Entry {
        std::string name;
        std::string group;
        MatrixXd* p;
        MatrixXd* g;
    };

    int res_at(int level) const { return cfg_.resolution >> level; }

    MatrixXd run_level(int level, const MatrixXd& x, ItemTape& it, const Tape& tape) const;
    MatrixXd back_level(int level, const MatrixXd& dret, const ItemTape& it, const Tape& tape,
                        const std::vector<MatrixXd>& d_attn, double inv_bh,
                        std::vector<MatrixXd>& d_keys, std::vector<MatrixXd>& d_vals);
    void forward_batch(const std::vector<Grid>& z_t, const std::vector<int>& timesteps,
                       const MatrixXd& cond, Tape& tape, std::vector<Grid>& eps,
                       AttentionMapSet* maps, const TokenRoleMap* roles) const;
    void check_latent_batch(const std::vector<Grid>& z_t,
                            const std::vector<int>& timesteps) const;

    ToyConfig cfg_;
    int dh_ = 0;
    double skip_gain_ = 0.0;
    NoiseSchedule sched_;

    std::vector<std::string> words_;        // id -> token
    std::map<std::string, int> base_ids_;   // lowercase word -> id
    std::map<std::string, int> special_ids_;  // injected tokens, matched verbatim

    MatrixXd emb_, pos_, proj_;
    MatrixXd g_emb_, g_pos_, g_proj_;
    std::vector<BlockParams> blocks_, gblocks_;
    MatrixXd win_, bin_, wt_, bt_, wout_, bout_;
    MatrixXd g_win_, g_bin_, g_wt_, g_bt_, g_wout_, g_bout_;

    std::vector<Entry> registry_;
};

ToyBackend::ToyBackend(const ToyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.resolution < 2 || cfg.latent_channels < 1 || cfg.model_dim < 2 ||
        cfg.token_dim < 1 || cfg.vocab_size < 2 || cfg.heads < 1 || cfg.blocks < 1 ||
        cfg.max_prompt_len < 2)
        fail(ErrorCode::InvalidConfig, "toy backend dimensions out of range");
    if (cfg.model_dim % cfg.heads != 0)
        fail(ErrorCode::InvalidConfig, "model_dim must be divisible by heads");
    const int deepest = cfg.resolution >> (cfg.blocks - 1);
    if (deepest < 2 || (deepest << (cfg.blocks - 1)) != cfg.resolution)
        fail(ErrorCode::InvalidConfig, "resolution must halve cleanly across blocks");
    dh_ = cfg.model_dim / cfg.heads;
    sched_ = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end);

    // frozen shortcut eps ~ E_t[sqrt(1-abar)] * z_t; the network learns the
    // residual, which keeps the untrained loss well below a trivial predictor
    skip_gain_ = 0.0;
    for (int t = 0; t < sched_.T; ++t) skip_gain_ += std::sqrt(1.0 - sched_.alpha_bars[t]);
    skip_gain_ /= sched_.T;

    words_.push_back(kUnk);
    base_ids_[kUnk] = 0;
    for (int i = 0; i + 1 < cfg.vocab_size; ++i) {
        std::string w = i < kBaseWordCount ? kBaseWords[i] : "tok" + std::to_string(i);
        base_ids_[w] = static_cast<int>(words_.size());
        words_.push_back(std::move(w));
    }

    const int d = cfg.model_dim;
    const int dm = 2 * d;
    const int dt = cfg.token_dim;
    auto fill = [&](MatrixXd& m, int rows, int cols, const std::string& tag, double scale) {
        m.resize(rows, cols);
        auto rng = make_rng(seed, "init/" + tag);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = scale * gauss(rng);
    };

    fill(emb_, cfg.vocab_size, dt, "emb", kEmbedInit);
    fill(pos_, cfg.max_prompt_len, dt, "pos", kPosInit);
    fill(proj_, dt, dt, "proj", 1.0 / std::sqrt(static_cast<double>(dt)));
    blocks_.resize(cfg.blocks);
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string p = "b" + std::to_string(b) + ".";
        fill(blocks_[b].wq, d, d, p + "wq", 1.0 / std::sqrt(static_cast<double>(d)));
        fill(blocks_[b].wk, dt, d, p + "wk", 1.0 / std::sqrt(static_cast<double>(dt)));
        fill(blocks_[b].wv, dt, d, p + "wv", kAttnValueGain / std::sqrt(static_cast<double>(dt)));
        fill(blocks_[b].wo, d, d, p + "wo", kAttnValueGain / std::sqrt(static_cast<double>(d)));
        fill(blocks_[b].w1, d, dm, p + "w1", 1.0 / std::sqrt(static_cast<double>(d)));
        blocks_[b].b1 = MatrixXd::Zero(1, dm);
        fill(blocks_[b].w2, dm, d, p + "w2", 1.0 / std::sqrt(static_cast<double>(dm)));
        blocks_[b].b2 = MatrixXd::Zero(1, d);
    }
    fill(win_, cfg.latent_channels, d, "in", kStemGain / std::sqrt(static_cast<double>(cfg.latent_channels)));
    bin_ = MatrixXd::Zero(1, d);
    fill(wt_, d, d, "time", kTimeGain / std::sqrt(static_cast<double>(d)));
    bt_ = MatrixXd::Zero(1, d);
    fill(wout_, d, cfg.latent_channels, "out", kOutGain / std::sqrt(static_cast<double>(d)));
    bout_ = MatrixXd::Zero(1, cfg.latent_channels);

    gblocks_.resize(cfg.blocks);
    registry_.push_back({"token_embeddings.table", "token_embeddings", &emb_, &g_emb_});
    registry_.push_back({"text_encoder.pos", "text_encoder", &pos_, &g_pos_});
    registry_.push_back({"text_encoder.proj", "text_encoder", &proj_, &g_proj_});
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string p = "cross_attention.b" + std::to_string(b) + ".";
        registry_.push_back({p + "wq", "cross_attention", &blocks_[b].wq, &gblocks_[b].wq});
        registry_.push_back({p + "wk", "cross_attention", &blocks_[b].wk, &gblocks_[b].wk});
        registry_.push_back({p + "wv", "cross_attention", &blocks_[b].wv, &gblocks_[b].wv});
        registry_.push_back({p + "wo", "cross_attention", &blocks_[b].wo, &gblocks_[b].wo});
    }
    registry_.push_back({"unet.in.w", "unet_rest", &win_, &g_win_});
    registry_.push_back({"unet.in.b", "unet_rest", &bin_, &g_bin_});
    registry_.push_back({"unet.time.w", "unet_rest", &wt_, &g_wt_});
    registry_.push_back({"unet.time.b", "unet_rest", &bt_, &g_bt_});
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string p = "unet.b" + std::to_string(b) + ".mlp.";
        registry_.push_back({p + "w1", "unet_rest", &blocks_[b].w1, &gblocks_[b].w1});
        registry_.push_back({p + "b1", "unet_rest", &blocks_[b].b1, &gblocks_[b].b1});
        registry_.push_back({p + "w2", "unet_rest", &blocks_[b].w2, &gblocks_[b].w2});
        registry_.push_back({p + "b2", "unet_rest", &blocks_[b].b2, &gblocks_[b].b2});
    }
    registry_.push_back({"unet.out.w", "unet_rest", &wout_, &g_wout_});
    registry_.push_back({"unet.out.b", "unet_rest", &bout_, &g_bout_});
    zero_grads();
}

TokenizedPrompt ToyBackend::tokenize(const std::string& text) const {
    TokenizedPrompt out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        int id = 0;
        if (auto it = special_ids_.find(word); it != special_ids_.end()) {
            id = it->second;
        } else if (auto jt = base_ids_.find(lower(word)); jt != base_ids_.end()) {
            id = jt->second;
        }
        out.ids.push_back(id);
        out.tokens.push_back(words_[id]);
    }
    return out;
}

bool ToyBackend::has_token(const std::string& token) const {
    return special_ids_.count(token) > 0 || base_ids_.count(lower(token)) > 0;
}

int ToyBackend::token_id(const std::string& token) const {
    if (auto it = special_ids_.find(token); it != special_ids_.end()) return it->second;
    if (auto jt = base_ids_.find(lower(token)); jt != base_ids_.end()) return jt->second;
    fail(ErrorCode::UnknownToken, "unknown token: " + token);
}

Eigen::VectorXd ToyBackend::embedding_row(int id) const {
    if (id < 0 || id >= vocab_size()) fail(ErrorCode::UnknownToken, "token id out of range");
    return emb_.row(id).transpose();
}

void ToyBackend::set_embedding_row(int id, const Eigen::VectorXd& value) {
    if (id < 0 || id >= vocab_size()) fail(ErrorCode::UnknownToken, "token id out of range");
    if (value.size() != cfg_.token_dim)
        fail(ErrorCode::DimensionMismatch, "embedding row has wrong dimension");
    emb_.row(id) = value.transpose();
}

int ToyBackend::append_token(const std::string& token, const Eigen::VectorXd& embedding) {
    if (token.empty()) fail(ErrorCode::InvalidConfig, "empty token");
    if (has_token(token)) fail(ErrorCode::PlaceholderCollision, "token already present: " + token);
    if (embedding.size() != cfg_.token_dim)
        fail(ErrorCode::DimensionMismatch, "embedding row has wrong dimension");
    const int id = static_cast<int>(words_.size());
    words_.push_back(token);
    special_ids_[token] = id;
    emb_.conservativeResize(id + 1, cfg_.token_dim);
    emb_.row(id) = embedding.transpose();
    g_emb_.conservativeResize(id + 1, cfg_.token_dim);
    g_emb_.row(id).setZero();
    return id;
}

Eigen::MatrixXd ToyBackend::encode_text(const std::vector<int>& ids) const {
    const int n = static_cast<int>(ids.size());
    if (n < 1 || n > cfg_.max_prompt_len)
        fail(ErrorCode::InvalidConfig, "prompt length outside [1, max_prompt_len]");
    MatrixXd esel(n, cfg_.token_dim);
    for (int j = 0; j < n; ++j) {
        if (ids[j] < 0 || ids[j] >= vocab_size())
            fail(ErrorCode::UnknownToken, "token id out of range");
        esel.row(j) = emb_.row(ids[j]) + pos_.row(j);
    }
    return esel * proj_;
}

Grid ToyBackend::encode_image(const Grid& rgb) const {
    if (rgb.c != 3) fail(ErrorCode::ShapeMismatch, "encode_image expects 3 channels");
    if (rgb.h != cfg_.resolution || rgb.w != cfg_.resolution)
        fail(ErrorCode::ShapeMismatch, "encode_image expects the backend resolution");
    Grid z = Grid::zeros(rgb.h, rgb.w, cfg_.latent_channels);
    for (int ch = 0; ch < cfg_.latent_channels; ++ch) z.values.col(ch) = rgb.values.col(ch % 3);
    return z;
}

Grid ToyBackend::decode_latent(const Grid& latent) const {
    if (latent.h != cfg_.resolution || latent.w != cfg_.resolution ||
        latent.c != cfg_.latent_channels)
        fail(ErrorCode::ShapeMismatch, "decode_latent shape mismatch");
    Grid rgb = Grid::zeros(latent.h, latent.w, 3);
    for (int ch = 0; ch < 3; ++ch)
        rgb.values.col(ch) = latent.values.col(std::min(ch, cfg_.latent_channels - 1));
    return rgb;
}

void ToyBackend::check_latent_batch(const std::vector<Grid>& z_t,
                                    const std::vector<int>& timesteps) const {
    if (z_t.empty()) fail(ErrorCode::ShapeMismatch, "empty latent batch");
    if (timesteps.size() != z_t.size())
        fail(ErrorCode::ShapeMismatch, "one timestep per batch item required");
    for (const Grid& g : z_t)
        if (g.h != cfg_.resolution || g.w != cfg_.resolution || g.c != cfg_.latent_channels)
            fail(ErrorCode::ShapeMismatch, "latent shape mismatch");
    for (int t : timesteps)
        if (t < 0 || t >= sched_.T) fail(ErrorCode::TimestepOutOfRange, "t = " + std::to_string(t));
}

MatrixXd ToyBackend::run_level(int level, const MatrixXd& x, ItemTape& it,
                               const Tape& tape) const {
    LevelTape& lt = it.levels[level];
    lt.x_in = x;
    const BlockParams& bp = blocks_[level];
    const MatrixXd q = x * bp.wq;
    MatrixXd o(x.rows(), cfg_.model_dim);
    lt.attn.resize(cfg_.heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh_));
    for (int h = 0; h < cfg_.heads; ++h) {
        const auto qh = q.middleCols(h * dh_, dh_);
        const auto kh = tape.keys[level].middleCols(h * dh_, dh_);
        const auto vh = tape.vals[level].middleCols(h * dh_, dh_);
        lt.attn[h] = softmax_rows(qh * kh.transpose() * scale);
        o.middleCols(h * dh_, dh_) = lt.attn[h] * vh;
    }
    lt.x_att = x + o * bp.wo;
    lt.h_pre = (lt.x_att * bp.w1).rowwise() + bp.b1.row(0);
    const MatrixXd mlp_out = (silu(lt.h_pre) * bp.w2).rowwise() + bp.b2.row(0);
    MatrixXd out = lt.x_att + mlp_out;
    if (level + 1 < cfg_.blocks) {
        const int res = res_at(level);
        const MatrixXd child = run_level(level + 1, pool2(out, res), it, tape);
        out += up2(child, res);
    }
    return out;
}

void ToyBackend::forward_batch(const std::vector<Grid>& z_t, const std::vector<int>& timesteps,
                               const MatrixXd& cond, Tape& tape, std::vector<Grid>& eps,
                               AttentionMapSet* maps, const TokenRoleMap* roles) const {
    check_latent_batch(z_t, timesteps);
    if (cond.cols() != cfg_.token_dim)
        fail(ErrorCode::DimensionMismatch, "conditioning width must equal token_dim");
    if (cond.rows() < 1 || cond.rows() > cfg_.max_prompt_len)
        fail(ErrorCode::DimensionMismatch, "conditioning length outside [1, max_prompt_len]");

    const int batch = static_cast<int>(z_t.size());
    tape.keys.resize(cfg_.blocks);
    tape.vals.resize(cfg_.blocks);
    for (int b = 0; b < cfg_.blocks; ++b) {
        tape.keys[b] = cond * blocks_[b].wk;
        tape.vals[b] = cond * blocks_[b].wv;
    }
    tape.z.resize(batch);
    tape.items.resize(batch);
    eps.clear();
    eps.reserve(batch);
    for (int i = 0; i < batch; ++i) {
        tape.z[i] = z_t[i].values;
        ItemTape& it = tape.items[i];
        it.levels.assign(cfg_.blocks, LevelTape{});
        it.temb = timestep_embedding(timesteps[i], cfg_.model_dim);
        const RowVectorXd shift = (it.temb * wt_ + bt_).row(0) + bin_.row(0);
        const MatrixXd x0 = (z_t[i].values * win_).rowwise() + shift;
        it.x_final = run_level(0, x0, it, tape);
        Grid e = Grid::zeros(cfg_.resolution, cfg_.resolution, cfg_.latent_channels);
        e.values = ((it.x_final * wout_).rowwise() + bout_.row(0)) + skip_gain_ * z_t[i].values;
        eps.push_back(std::move(e));
    }

    if (maps != nullptr) {
        const double inv = 1.0 / (batch * cfg_.heads);
        maps->layers.clear();
        for (int b = 0; b < cfg_.blocks; ++b) {
            AttentionRecord rec;
            rec.layer_id = b;
            rec.height = rec.width = res_at(b);
            rec.values = MatrixXd::Zero(rec.height * rec.width, cond.rows());
            for (int i = 0; i < batch; ++i)
                for (int h = 0; h < cfg_.heads; ++h)
                    rec.values += inv * tape.items[i].levels[b].attn[h];
            maps->layers.push_back(std::move(rec));
        }
        if (roles != nullptr) maps->token_index = *roles;
    }
}

std::vector<Grid> ToyBackend::predict_noise(const std::vector<Grid>& z_t,
                                            const std::vector<int>& timesteps,
                                            const Eigen::MatrixXd& cond) {
    Tape tape;
    std::vector<Grid> eps;
    CaptureSession* session = capture();
    if (session != nullptr) {
        if (static_cast<Eigen::Index>(session->roles().tokens.size()) != cond.rows())
            fail(ErrorCode::ShapeMismatch, "capture role map does not match conditioning length");
        AttentionMapSet maps;
        forward_batch(z_t, timesteps, cond, tape, eps, &maps, &session->roles());
        session->add_pass(std::move(maps));
    } else {
        forward_batch(z_t, timesteps, cond, tape, eps, nullptr, nullptr);
    }
    return eps;
}

TrainForward ToyBackend::forward_train(const std::vector<Grid>& z_t,
                                       const std::vector<int>& timesteps,
                                       const TokenizedPrompt& prompt, const TokenRoleMap& roles) {
    const int n = static_cast<int>(prompt.ids.size());
    if (n < 1) fail(ErrorCode::ShapeMismatch, "empty prompt");
    if (static_cast<int>(roles.tokens.size()) != n)
        fail(ErrorCode::MissingTokenRole, "role map does not cover the prompt");
    std::vector<bool> seen(n, false);
    for (const auto& [role, posn] : roles.roles) {
        if (posn < 0 || posn >= n || seen[posn])
            fail(ErrorCode::MissingTokenRole, "role map positions must partition the prompt");
        seen[posn] = true;
    }
    for (bool s : seen)
        if (!s) fail(ErrorCode::MissingTokenRole, "role map leaves a prompt position uncovered");

    auto tape = std::make_shared<Tape>();
    tape->ids = prompt.ids;
    tape->text_grads = true;
    tape->esel.resize(n, cfg_.token_dim);
    for (int j = 0; j < n; ++j) {
        if (prompt.ids[j] < 0 || prompt.ids[j] >= vocab_size())
            fail(ErrorCode::UnknownToken, "token id out of range");
        tape->esel.row(j) = emb_.row(prompt.ids[j]) + pos_.row(j);
    }
    tape->cond = tape->esel * proj_;

    TrainForward out;
    forward_batch(z_t, timesteps, tape->cond, *tape, out.eps_hat, &out.maps, &roles);
    if (CaptureSession* session = capture(); session != nullptr)
        session->add_pass(out.maps);
    out.tape = std::move(tape);
    return out;
}

MatrixXd ToyBackend::back_level(int level, const MatrixXd& dret, const ItemTape& it,
                                const Tape& tape, const std::vector<MatrixXd>& d_attn,
                                double inv_bh, std::vector<MatrixXd>& d_keys,
                                std::vector<MatrixXd>& d_vals) {
    const LevelTape& lt = it.levels[level];
    const BlockParams& bp = blocks_[level];
    BlockParams& gb = gblocks_[level];

    MatrixXd dx_out;
    if (level + 1 < cfg_.blocks) {
        const int res = res_at(level);
        const MatrixXd d_child = up2_backward(dret, res);
        const MatrixXd d_pooled =
            back_level(level + 1, d_child, it, tape, d_attn, inv_bh, d_keys, d_vals);
        dx_out = dret + pool2_backward(d_pooled, res);
    } else {
        dx_out = dret;
    }

    // mlp: out = x_att + silu(x_att w1 + b1) w2 + b2
    const MatrixXd hs = silu(lt.h_pre);
    gb.w2 += hs.transpose() * dx_out;
    gb.b2 += dx_out.colwise().sum();
    const MatrixXd dhpre = (dx_out * bp.w2.transpose()).cwiseProduct(silu_deriv(lt.h_pre));
    gb.w1 += lt.x_att.transpose() * dhpre;
    gb.b1 += dhpre.colwise().sum();
    const MatrixXd dx_att = dx_out + dhpre * bp.w1.transpose();

    // attention: x_att = x_in + concat_h(A_h V_h) wo
    const MatrixXd q = lt.x_in * bp.wq;
    MatrixXd o(lt.x_in.rows(), cfg_.model_dim);
    for (int h = 0; h < cfg_.heads; ++h)
        o.middleCols(h * dh_, dh_) = lt.attn[h] * tape.vals[level].middleCols(h * dh_, dh_);
    gb.wo += o.transpose() * dx_att;
    const MatrixXd d_o = dx_att * bp.wo.transpose();

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh_));
    MatrixXd dq(lt.x_in.rows(), cfg_.model_dim);
    for (int h = 0; h < cfg_.heads; ++h) {
        const MatrixXd& a = lt.attn[h];
        const auto doh = d_o.middleCols(h * dh_, dh_);
        const auto vh = tape.vals[level].middleCols(h * dh_, dh_);
        const auto kh = tape.keys[level].middleCols(h * dh_, dh_);
        const auto qh = q.middleCols(h * dh_, dh_);
        d_vals[level].middleCols(h * dh_, dh_) += a.transpose() * doh;
        MatrixXd da = doh * vh.transpose();
        if (!d_attn.empty()) da += inv_bh * d_attn[level];
        // softmax rows: dlogit = A .* (dA - rowsum(dA .* A))
        const VectorXd rowsum = da.cwiseProduct(a).rowwise().sum();
        const MatrixXd dlog = a.cwiseProduct(da - rowsum.replicate(1, a.cols()));
        dq.middleCols(h * dh_, dh_) = dlog * kh * scale;
        d_keys[level].middleCols(h * dh_, dh_) += dlog.transpose() * qh * scale;
    }
    gb.wq += lt.x_in.transpose() * dq;
    return dx_att + dq * bp.wq.transpose();
}

void ToyBackend::backward(const TrainForward& forward, const std::vector<Grid>& d_eps,
                          const std::vector<Eigen::MatrixXd>& d_attn) {
    auto tape = std::static_pointer_cast<Tape>(forward.tape);
    if (!tape) fail(ErrorCode::InvalidConfig, "backward needs a training-mode forward result");
    const int batch = static_cast<int>(tape->items.size());
    if (static_cast<int>(d_eps.size()) != batch)
        fail(ErrorCode::ShapeMismatch, "one eps gradient per batch item required");
    for (const Grid& g : d_eps)
        if (g.h != cfg_.resolution || g.w != cfg_.resolution || g.c != cfg_.latent_channels)
            fail(ErrorCode::ShapeMismatch, "eps gradient shape mismatch");
    if (!d_attn.empty()) {
        if (static_cast<int>(d_attn.size()) != cfg_.blocks)
            fail(ErrorCode::ShapeMismatch, "one attention gradient per layer required");
        for (int b = 0; b < cfg_.blocks; ++b)
            if (d_attn[b].rows() != forward.maps.layers[b].values.rows() ||
                d_attn[b].cols() != forward.maps.layers[b].values.cols())
                fail(ErrorCode::ShapeMismatch, "attention gradient shape mismatch");
    }

    const double inv_bh = 1.0 / (batch * cfg_.heads);
    std::vector<MatrixXd> d_keys(cfg_.blocks), d_vals(cfg_.blocks);
    for (int b = 0; b < cfg_.blocks; ++b) {
        d_keys[b] = MatrixXd::Zero(tape->keys[b].rows(), tape->keys[b].cols());
        d_vals[b] = MatrixXd::Zero(tape->vals[b].rows(), tape->vals[b].cols());
    }

    for (int i = 0; i < batch; ++i) {
        const ItemTape& it = tape->items[i];
        const MatrixXd& deps = d_eps[i].values;
        g_wout_ += it.x_final.transpose() * deps;
        g_bout_ += deps.colwise().sum();
        const MatrixXd dxf = deps * wout_.transpose();
        const MatrixXd dx = back_level(0, dxf, it, *tape, d_attn, inv_bh, d_keys, d_vals);
        g_win_ += tape->z[i].transpose() * dx;
        g_bin_ += dx.colwise().sum();
        const MatrixXd dtp = dx.colwise().sum();
        g_wt_ += it.temb.transpose() * dtp;
        g_bt_ += dtp;
    }

    MatrixXd dcond = MatrixXd::Zero(tape->keys[0].rows(), cfg_.token_dim);
    for (int b = 0; b < cfg_.blocks; ++b) {
        gblocks_[b].wk += tape->cond.transpose() * d_keys[b];
        gblocks_[b].wv += tape->cond.transpose() * d_vals[b];
        dcond += d_keys[b] * blocks_[b].wk.transpose() + d_vals[b] * blocks_[b].wv.transpose();
    }
    if (tape->text_grads) {
        g_proj_ += tape->esel.transpose() * dcond;
        const MatrixXd desel = dcond * proj_.transpose();
        for (int j = 0; j < static_cast<int>(tape->ids.size()); ++j) {
            g_emb_.row(tape->ids[j]) += desel.row(j);
            g_pos_.row(j) += desel.row(j);
        }
    }
}

void ToyBackend::zero_grads() {
    for (const Entry& e : registry_) *e.g = MatrixXd::Zero(e.p->rows(), e.p->cols());
}

Eigen::MatrixXd* ToyBackend::grad_of(const std::string& param_name) {
    for (const Entry& e : registry_)
        if (e.name == param_name) return e.g;
    fail(ErrorCode::UnknownGroup, "unknown parameter: " + param_name);
}

std::vector<std::string> ToyBackend::group_names() const {
    return {"token_embeddings", "text_encoder", "cross_attention", "unet_rest"};
}

std::vector<NamedParam> ToyBackend::group_params(const std::string& group) {
    std::vector<NamedParam> out;
    for (const Entry& e : registry_)
        if (e.group == group) out.push_back({e.name, e.p});
    if (out.empty()) fail(ErrorCode::UnknownGroup, "unknown group: " + group);
    return out;
}

}  // namespace

std::unique_ptr<Backend> toy_backend(const ToyConfig& config, std::uint64_t seed) {
    return std::make_unique<ToyBackend>(config, seed);
}

}  // namespace attndb
