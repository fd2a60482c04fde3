#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "attndb/attention_maps.hpp"
#include "attndb/backend.hpp"
#include "helpers.hpp"

using namespace attndb;
using attndb::test::random_mapset;
using attndb::test::TempDir;
using attndb::test::thrown_code;

namespace {

// Independent reference: flatten the role's column across layers, then
// mean / population variance over the raw collection.
void pooled_oracle(const AttentionMapSet& maps, const std::string& role, double* mean,
                   double* var) {
    const int col = maps.token_index.roles.at(role);
    std::vector<double> vals;
    for (const AttentionRecord& rec : maps.layers)
        for (Eigen::Index i = 0; i < rec.values.rows(); ++i) vals.push_back(rec.values(i, col));
    double s = 0.0;
    for (double v : vals) s += v;
    *mean = s / static_cast<double>(vals.size());
    double q = 0.0;
    for (double v : vals) q += (v - *mean) * (v - *mean);
    *var = q / static_cast<double>(vals.size());
}

AttentionMapSet constant_mapset(double v_val, double cat_val, const std::vector<int>& res) {
    AttentionMapSet maps;
    for (std::size_t l = 0; l < res.size(); ++l) {
        AttentionRecord rec;
        rec.layer_id = static_cast<int>(l);
        rec.height = rec.width = res[l];
        rec.values.resize(res[l] * res[l], 2);
        rec.values.col(0).setConstant(v_val);
        rec.values.col(1).setConstant(cat_val);
        maps.layers.push_back(std::move(rec));
    }
    maps.token_index.tokens = {"[V]", "toy"};
    maps.token_index.roles = {{"V", 0}, {"category", 1}};
    return maps;
}

ToyConfig tiny_cfg() {
    ToyConfig c;
    c.resolution = 8;
    c.model_dim = 8;
    c.token_dim = 8;
    c.blocks = 2;
    c.timesteps = 10;
    return c;
}

}  // namespace

TEST_CASE("pooled stats of a constant field are (value, 0)") {
    const AttentionMapSet maps = constant_mapset(0.5, 0.25, {2, 4});
    const PooledStats s = pooled_stats(maps, "V");
    CHECK(s.mean == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.variance == doctest::Approx(0.0).epsilon(1e-15));
}

// Two 1x1 layers holding {0, 1}: population mean 0.5, variance 0.25.
TEST_CASE("pooled stats over {0,1} give mean one half and variance one quarter") {
    AttentionMapSet maps = constant_mapset(0.0, 0.5, {1, 1});
    maps.layers[1].values(0, 0) = 1.0;
    const PooledStats s = pooled_stats(maps, "V");
    CHECK(s.mean == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.variance == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("pooled stats match the brute-force oracle on random mapsets") {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> n_tok(2, 9);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> res;
        std::uniform_int_distribution<int> n_layers(1, 5), r(1, 8);
        for (int l = n_layers(rng); l > 0; --l) res.push_back(r(rng));
        const AttentionMapSet maps = random_mapset(rng, res, n_tok(rng));
        for (const char* role : {"V", "category"}) {
            double m = 0.0, v = 0.0;
            pooled_oracle(maps, role, &m, &v);
            const PooledStats s = pooled_stats(maps, role);
            CHECK(std::abs(s.mean - m) <= 1e-12 * std::abs(m));
            CHECK(std::abs(s.variance - v) <= 1e-12 * std::max(std::abs(v), 1e-30));
            // variance identity: E[x^2] - E[x]^2
            double sq = 0.0;
            std::size_t n = 0;
            const int col = maps.token_index.roles.at(role);
            for (const AttentionRecord& rec : maps.layers) {
                sq += rec.values.col(col).squaredNorm();
                n += rec.values.rows();
            }
            const double ident = sq / static_cast<double>(n) - m * m;
            CHECK(s.variance == doctest::Approx(ident).epsilon(1e-10));
        }
    }
}

TEST_CASE("per-layer-mean pooling averages layer statistics") {
    // layer means 0.0 and 1.0 -> pooled mean 0.5 regardless of layer sizes
    AttentionMapSet maps = constant_mapset(0.0, 0.3, {1, 4});
    maps.layers[1].values.col(0).setConstant(1.0);
    const PooledStats s = pooled_stats(maps, "V", PoolingMode::kPerLayerMean);
    CHECK(s.mean == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.variance == doctest::Approx(0.0).epsilon(1e-15));

    // concat weighs the 4x4 layer 16x heavier
    const PooledStats c = pooled_stats(maps, "V", PoolingMode::kConcat);
    CHECK(c.mean == doctest::Approx(16.0 / 17.0).epsilon(1e-12));
}

TEST_CASE("unknown roles are rejected") {
    const AttentionMapSet maps = constant_mapset(0.1, 0.2, {2});
    CHECK(thrown_code([&] { pooled_stats(maps, "nope"); }) == ErrorCode::UnknownTokenRole);
    CHECK(thrown_code([&] { aggregate_heatmap(maps, "nope", 4); }) ==
          ErrorCode::UnknownTokenRole);
}

TEST_CASE("constant maps give an all-zero heatmap") {
    const AttentionMapSet maps = constant_mapset(0.5, 0.25, {2, 4});
    const Eigen::MatrixXd h = aggregate_heatmap(maps, "V", 4);
    CHECK(h.rows() == 4);
    CHECK(h.cols() == 4);
    CHECK(h.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single layer at output resolution reduces to min-max normalization") {
    AttentionMapSet maps = constant_mapset(0.0, 0.1, {4});
    Eigen::MatrixXd& v = maps.layers[0].values;
    for (Eigen::Index i = 0; i < v.rows(); ++i) v(i, 0) = static_cast<double>(i);
    const Eigen::MatrixXd h = aggregate_heatmap(maps, "V", 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(h(y, x) == doctest::Approx((y * 4 + x) / 15.0).epsilon(1e-12));
}

// Reference with its own interpolation table: 2x2 -> 4x4 half-pixel bilinear
// weights per output index are (1,0), (3/4,1/4), (1/4,3/4), (0,1).
TEST_CASE("heatmap matches a hand-rolled upsample-sum-normalize reference") {
    AttentionMapSet maps;
    AttentionRecord big;
    big.layer_id = 0;
    big.height = big.width = 4;
    big.values = Eigen::MatrixXd::Zero(16, 1);
    big.values(0, 0) = 1.0;  // hotspot top-left
    AttentionRecord small;
    small.layer_id = 1;
    small.height = small.width = 2;
    small.values = Eigen::MatrixXd::Zero(4, 1);
    small.values(3, 0) = 1.0;  // hotspot bottom-right
    maps.layers = {big, small};
    maps.token_index.tokens = {"[V]"};
    maps.token_index.roles = {{"V", 0}};

    const double w1[4][2] = {{1.0, 0.0}, {0.75, 0.25}, {0.25, 0.75}, {0.0, 1.0}};
    Eigen::MatrixXd ref(4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            double up = 0.0;  // upsampled small layer
            for (int sy = 0; sy < 2; ++sy)
                for (int sx = 0; sx < 2; ++sx)
                    up += w1[y][sy] * w1[x][sx] * small.values(sy * 2 + sx, 0);
            ref(y, x) = big.values(y * 4 + x, 0) + up;
        }
    const double lo = ref.minCoeff(), hi = ref.maxCoeff();
    ref = (ref.array() - lo) / (hi - lo);

    const Eigen::MatrixXd h = aggregate_heatmap(maps, "V", 4);
    CHECK((h - ref).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("dump and reload round-trips maps within float32 precision") {
    std::mt19937_64 rng(7);
    const AttentionMapSet maps = random_mapset(rng, {2, 4}, 4);
    TempDir dir("maps");
    const auto manifest = dump_maps(maps, dir.path());
    CHECK(std::filesystem::exists(manifest));

    const AttentionMapSet back = load_maps(manifest);
    REQUIRE(back.layer_count() == maps.layer_count());
    for (int l = 0; l < maps.layer_count(); ++l) {
        CHECK(back.layers[l].layer_id == maps.layers[l].layer_id);
        CHECK(back.layers[l].height == maps.layers[l].height);
        CHECK((back.layers[l].values - maps.layers[l].values).cwiseAbs().maxCoeff() < 1e-6);
    }
    CHECK(back.token_index.roles == maps.token_index.roles);

    // one heatmap PNG per role
    int pngs = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path()))
        if (e.path().extension() == ".png") ++pngs;
    CHECK(pngs == static_cast<int>(maps.token_index.roles.size()));
}

TEST_CASE("capture sessions are exclusive per backend") {
    auto backend = toy_backend(tiny_cfg(), 3);
    TokenRoleMap roles;
    roles.tokens = {"a", "toy"};
    roles.roles = {{"V", 0}, {"category", 1}};
    CaptureSession first(*backend, roles);
    CHECK(thrown_code([&] { CaptureSession second(*backend, roles); }) ==
          ErrorCode::SessionAlreadyActive);
    first.end();
    CaptureSession third(*backend, roles);  // fine after end()
    CHECK(third.pass_count() == 0);
}

TEST_CASE("collecting an empty session fails") {
    auto backend = toy_backend(tiny_cfg(), 3);
    TokenRoleMap roles;
    roles.tokens = {"a"};
    roles.roles = {{"V", 0}};
    CaptureSession session(*backend, roles);
    session.end();
    CHECK(thrown_code([&] { collect_maps(session); }) == ErrorCode::EmptySession);
}

TEST_CASE("capture records one mapset per forward pass, one record per layer") {
    const ToyConfig cfg = tiny_cfg();
    auto backend = toy_backend(cfg, 5);
    const TokenizedPrompt tp = backend->tokenize("a photo of a toy");
    TokenRoleMap roles;
    roles.tokens = tp.tokens;
    roles.roles = {{"V", 3}, {"category", 4}, {"pos:0", 0}, {"pos:1", 1}, {"pos:2", 2}};

    const Eigen::MatrixXd cond = backend->encode_text(tp.ids);
    std::vector<Grid> z = {Grid::zeros(cfg.resolution, cfg.resolution, cfg.latent_channels)};
    CaptureSession session(*backend, roles);
    backend->predict_noise(z, {0}, cond);
    backend->predict_noise(z, {5}, cond);
    CHECK(session.pass_count() == 2);
    const AttentionMapSet maps = collect_maps(session);
    CHECK(maps.layer_count() == cfg.blocks);
    CHECK(maps.layers[0].layer_id == 0);
    CHECK(maps.layers[1].layer_id == 1);
    CHECK(maps.layers[0].num_tokens() == 5);
}

TEST_CASE("captured maps are normalized probabilities") {
    const ToyConfig cfg = tiny_cfg();
    auto backend = toy_backend(cfg, 11);
    const TokenizedPrompt tp = backend->tokenize("a photo of a toy");
    TokenRoleMap roles;
    roles.tokens = tp.tokens;
    roles.roles = {{"V", 3}, {"category", 4}, {"pos:0", 0}, {"pos:1", 1}, {"pos:2", 2}};
    const Eigen::MatrixXd cond = backend->encode_text(tp.ids);

    auto rng = make_rng(1, "normtest");
    std::normal_distribution<double> gauss;
    CaptureSession session(*backend, roles);
    for (int pass = 0; pass < 5; ++pass) {
        Grid z = Grid::zeros(cfg.resolution, cfg.resolution, cfg.latent_channels);
        for (Eigen::Index i = 0; i < z.values.size(); ++i)
            z.values(i / z.values.cols(), i % z.values.cols()) = gauss(rng);
        backend->predict_noise({z}, {pass}, cond);
    }
    for (int p = 0; p < session.pass_count(); ++p)
        for (const AttentionRecord& rec : session.pass(p).layers) {
            CHECK(rec.values.minCoeff() >= 0.0);
            const Eigen::VectorXd sums = rec.values.rowwise().sum();
            CHECK((sums.array() - 1.0).abs().maxCoeff() <= 1e-5);
        }
}

TEST_CASE("capture is observation-only") {
    const ToyConfig cfg = tiny_cfg();
    const TokenizedPrompt tp = toy_backend(cfg, 2)->tokenize("a toy");
    TokenRoleMap roles;
    roles.tokens = tp.tokens;
    roles.roles = {{"V", 0}, {"category", 1}};

    Grid z = Grid::zeros(cfg.resolution, cfg.resolution, cfg.latent_channels);
    z.values.setConstant(0.3);

    auto plain = toy_backend(cfg, 2);
    const std::vector<Grid> off = plain->predict_noise({z}, {3}, plain->encode_text(tp.ids));

    auto tapped = toy_backend(cfg, 2);
    CaptureSession session(*tapped, roles);
    const std::vector<Grid> on = tapped->predict_noise({z}, {3}, tapped->encode_text(tp.ids));

    CHECK(off[0].values == on[0].values);  // bit-identical
}
