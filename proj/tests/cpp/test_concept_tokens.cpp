#include <doctest.h>

#include <cmath>

#include "attndb/backend.hpp"
#include "attndb/concept_tokens.hpp"
#include "helpers.hpp"

using namespace attndb;
using attndb::test::TempDir;
using attndb::test::thrown_code;

namespace {

ToyConfig tiny_cfg() {
    ToyConfig c;
    c.resolution = 4;
    c.model_dim = 4;
    c.token_dim = 4;
    c.blocks = 1;
    c.timesteps = 10;
    return c;
}

ConceptSpec toy_spec() {
    ConceptSpec spec;
    spec.concept_id = "demo";
    spec.image_dir = "unused";
    spec.placeholder = "[V]";
    spec.super_category = "toy";
    return spec;
}

EmbeddingSnapshot snap(std::initializer_list<double> vals) {
    EmbeddingSnapshot s;
    s.token_id = 0;
    s.vector.resize(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (double v : vals) s.vector(i++) = v;
    return s;
}

}  // namespace

TEST_CASE("injection copies the super-category embedding and nothing else") {
    auto backend = toy_backend(tiny_cfg(), 10);
    std::vector<Eigen::VectorXd> before;
    for (int id = 0; id < backend->vocab_size(); ++id)
        before.push_back(backend->embedding_row(id));

    const TokenHandle handle = inject_concept_token(*backend, toy_spec());
    CHECK(handle.token == "[V]");
    CHECK(handle.token_id == static_cast<int>(before.size()));
    CHECK(backend->embedding_row(handle.token_id) ==
          backend->embedding_row(backend->token_id("toy")));
    for (int id = 0; id < static_cast<int>(before.size()); ++id)
        CHECK(backend->embedding_row(id) == before[id]);  // bit-identical
}

TEST_CASE("injection preconditions") {
    auto backend = toy_backend(tiny_cfg(), 10);
    inject_concept_token(*backend, toy_spec());
    CHECK(thrown_code([&] { inject_concept_token(*backend, toy_spec()); }) ==
          ErrorCode::PlaceholderCollision);

    auto fresh = toy_backend(tiny_cfg(), 10);
    ConceptSpec multi = toy_spec();
    multi.super_category = "cat toy";
    CHECK(thrown_code([&] { inject_concept_token(*fresh, multi); }) ==
          ErrorCode::MultiTokenCategory);

    ConceptSpec unknown = toy_spec();
    unknown.super_category = "zzzunknown";
    CHECK(thrown_code([&] { inject_concept_token(*fresh, unknown); }) ==
          ErrorCode::UnknownToken);
}

TEST_CASE("snapshots are value copies") {
    auto backend = toy_backend(tiny_cfg(), 10);
    const TokenHandle handle = inject_concept_token(*backend, toy_spec());
    const EmbeddingSnapshot s0 = snapshot_embedding(handle, 0);
    CHECK(s0.vector == backend->embedding_row(backend->token_id("toy")));
    CHECK(s0.step == 0);
    CHECK(s0.token_id == handle.token_id);

    // mutate live state; the snapshot must not move
    Eigen::VectorXd moved = s0.vector;
    moved.array() += 1.0;
    backend->set_embedding_row(handle.token_id, moved);
    CHECK(s0.vector != backend->embedding_row(handle.token_id));
    CHECK(snapshot_embedding(handle, 1).vector == moved);
}

TEST_CASE("drift is the cosine similarity") {
    const auto v = snap({1.0, 2.0, -3.0});
    CHECK(embedding_drift(v, v) == doctest::Approx(1.0).epsilon(1e-12));

    auto neg = v;
    neg.vector = -neg.vector;
    CHECK(embedding_drift(v, neg) == doctest::Approx(-1.0).epsilon(1e-12));

    CHECK(embedding_drift(snap({1.0, 0.0}), snap({0.0, 1.0})) ==
          doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("drift symmetry and scale invariance") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> gauss;
    for (int trial = 0; trial < 25; ++trial) {
        EmbeddingSnapshot a, b;
        a.vector.resize(8);
        b.vector.resize(8);
        for (int i = 0; i < 8; ++i) {
            a.vector(i) = gauss(rng);
            b.vector(i) = gauss(rng);
        }
        CHECK(std::abs(embedding_drift(a, b) - embedding_drift(b, a)) <= 1e-12);

        EmbeddingSnapshot scaled = b;
        scaled.vector *= 37.5;
        CHECK(std::abs(embedding_drift(a, scaled) - embedding_drift(a, b)) <= 1e-9);
    }
}

TEST_CASE("drift input validation") {
    CHECK(thrown_code([] { embedding_drift(snap({1.0, 0.0}), snap({1.0, 0.0, 0.0})); }) ==
          ErrorCode::DimensionMismatch);
    CHECK(thrown_code([] { embedding_drift(snap({0.0, 0.0}), snap({1.0, 0.0})); }) ==
          ErrorCode::ZeroVector);
}

TEST_CASE("drift threshold constant flags stuck embeddings") {
    CHECK(kDriftStuckThreshold == 0.999);
}

TEST_CASE("training prompt renders the template with both positions") {
    auto backend = toy_backend(tiny_cfg(), 10);
    inject_concept_token(*backend, toy_spec());
    const TrainingPrompt prompt = build_training_prompt(*backend, toy_spec());
    CHECK(prompt.text == "a photo of a [V] toy");
    CHECK(prompt.tokenized.tokens.size() == 6);
    CHECK(prompt.placeholder_pos == 4);
    CHECK(prompt.category_pos == 5);
    CHECK(prompt.category_pos == prompt.placeholder_pos + 1);
    CHECK(prompt.roles.roles.at("V") == 4);
    CHECK(prompt.roles.roles.at("category") == 5);

    // every position carries exactly one role
    std::vector<int> covered(prompt.tokenized.tokens.size(), 0);
    for (const auto& [role, pos] : prompt.roles.roles) ++covered[pos];
    for (int c : covered) CHECK(c == 1);
}

TEST_CASE("snapshot serialization round-trips at full precision") {
    TempDir dir("snap");
    EmbeddingSnapshot s;
    s.token_id = 72;
    s.step = 660;
    s.vector.resize(3);
    s.vector << 1.0 / 3.0, -2.0e-17, 0.1 + 0.2;  // values that stress f64 round-trip
    save_snapshot(s, dir.path() / "s.json");
    const EmbeddingSnapshot back = load_snapshot(dir.path() / "s.json");
    CHECK(back.token_id == 72);
    CHECK(back.step == 660);
    CHECK(back.vector == s.vector);  // bit-exact via the binary sidecar

    CHECK(thrown_code([&] { load_snapshot(dir.path() / "missing.json"); }) ==
          ErrorCode::IoFailure);
}
