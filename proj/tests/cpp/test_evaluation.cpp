#include <doctest.h>

#include <cmath>

#include "attndb/concept_tokens.hpp"
#include "attndb/evaluation.hpp"
#include "helpers.hpp"

using namespace attndb;
using attndb::test::TempDir;
using attndb::test::thrown_code;

namespace {

// Embeds a 1x1 image as the (normalized) pixel itself; text by fixed table.
class PixelEmbedder final : public Embedder {
public:
    Eigen::VectorXd embed_image(const Grid& image) const override {
        Eigen::VectorXd v = image.values.row(0).transpose();
        return v / v.norm();
    }
    Eigen::VectorXd embed_text(const std::string&) const override {
        Eigen::VectorXd v(3);
        v << 1.0, 0.0, 0.0;
        return v;
    }
    std::string identifier() const override { return "pixel-mock"; }
};

Grid pixel(double a, double b, double c) {
    Grid g = Grid::zeros(1, 1, 3);
    g.values << a, b, c;
    return g;
}

ToyConfig tiny_cfg() {
    ToyConfig c;
    c.resolution = 4;
    c.model_dim = 4;
    c.token_dim = 4;
    c.blocks = 1;
    c.timesteps = 5;
    return c;
}

}  // namespace

TEST_CASE("the prompt suite is the 24-template table, in order") {
    const PromptSuite suite = load_prompt_suite();
    REQUIRE(suite.templates.size() == 24);
    CHECK(suite.templates[0] == "a photo of a [V] [category]");
    CHECK(suite.templates[23] == "a painting of a [V] [category] in the style of Monet");
    validate_prompt_suite(suite);  // must not throw
    for (const std::string& t : suite.templates) {
        CHECK(t.find("[V]") != std::string::npos);
        CHECK(t.find("[category]") != std::string::npos);
    }
}

TEST_CASE("suite validation rejects malformed suites") {
    PromptSuite bad = load_prompt_suite();
    bad.templates.pop_back();
    CHECK(thrown_code([&] { validate_prompt_suite(bad); }) == ErrorCode::InvalidConfig);

    PromptSuite noslot = load_prompt_suite();
    noslot.templates[3] = "a photo of a dog";
    CHECK(thrown_code([&] { validate_prompt_suite(noslot); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("suite hash pins content") {
    const std::string h1 = suite_hash(load_prompt_suite());
    const std::string h2 = suite_hash(load_prompt_suite());
    CHECK(h1 == h2);
    CHECK(h1.size() == 64);
    PromptSuite other = load_prompt_suite();
    other.templates[0] += "!";
    CHECK(suite_hash(other) != h1);
}

TEST_CASE("prompt rendering substitutes both slots") {
    CHECK(render_prompt("a photo of a [V] [category]", "[V]", "toy") == "a photo of a [V] toy");
    CHECK(render_prompt("a photo of a [V] [category]", "toy", "toy") == "a photo of a toy toy");
    CHECK(render_prompt("no slots here", "x", "y") == "no slots here");
    CHECK(render_prompt("a red [V] [category] wearing bowtie", "[S]", "clock") ==
          "a red [S] clock wearing bowtie");
}

TEST_CASE("the toy embedder emits unit-norm deterministic vectors") {
    const ToyEmbedder e(42, 16);
    Grid img = Grid::zeros(4, 4, 3);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) img.at(y, x, 0) = 0.1 * (y + x) - 0.3;

    const Eigen::VectorXd vi = e.embed_image(img);
    CHECK(vi.size() == 16);
    CHECK(std::abs(vi.norm() - 1.0) <= 1e-6);
    CHECK(vi == e.embed_image(img));

    const Eigen::VectorXd vt = e.embed_text("a photo of a toy");
    CHECK(std::abs(vt.norm() - 1.0) <= 1e-6);
    CHECK(vt == e.embed_text("a photo of a toy"));
    CHECK((vt - e.embed_text("a painting of a dog")).cwiseAbs().maxCoeff() > 1e-9);

    const ToyEmbedder other(43, 16);
    CHECK((vi - other.embed_image(img)).cwiseAbs().maxCoeff() > 1e-9);
    CHECK(e.identifier() != other.identifier());
    CHECK(e.identifier().find("16") != std::string::npos);
}

TEST_CASE("identity score is the mean over all pairs") {
    const PixelEmbedder e;
    const std::vector<Grid> gen = {pixel(1, 0, 0), pixel(0.6, 0.8, 0)};
    const std::vector<Grid> ref = {pixel(0, 1, 0), pixel(1, 0, 0)};
    // pairs: (g0,r0)=0, (g0,r1)=1, (g1,r0)=0.8, (g1,r1)=0.6 -> mean 0.6
    CHECK(identity_score(gen, ref, e) == doctest::Approx(0.6).epsilon(1e-6));

    // self-similarity under all-pairs semantics: ref's two embeddings are
    // orthogonal, so (1 + 0 + 0 + 1) / 4
    CHECK(identity_score(ref, ref, e) == doctest::Approx(0.5).epsilon(1e-6));
    // a consistently-embedding set scores exactly 1 against itself
    const std::vector<Grid> consistent = {pixel(2, 0, 0), pixel(5, 0, 0)};
    CHECK(identity_score(consistent, consistent, e) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(identity_score({gen[0]}, {gen[0]}, e) == doctest::Approx(1.0).epsilon(1e-6));

    // orthogonal codes
    const std::vector<Grid> a = {pixel(1, 0, 0)};
    const std::vector<Grid> b = {pixel(0, 1, 0)};
    CHECK(identity_score(a, b, e) == doctest::Approx(0.0).epsilon(1e-12));

    // permutation invariance
    std::vector<Grid> shuffled = {gen[1], gen[0]};
    CHECK(identity_score(shuffled, ref, e) ==
          doctest::Approx(identity_score(gen, ref, e)).epsilon(1e-12));

    CHECK(thrown_code([&] { identity_score({}, ref, e); }) == ErrorCode::EmptyImageSet);
    CHECK(thrown_code([&] { identity_score(gen, {}, e); }) == ErrorCode::EmptyImageSet);
}

TEST_CASE("text alignment averages image-to-prompt similarities") {
    const PixelEmbedder e;  // prompt always embeds to e1
    CHECK(text_alignment_score({pixel(1, 0, 0)}, "whatever", e) ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK(text_alignment_score({pixel(0, 1, 0)}, "whatever", e) ==
          doctest::Approx(0.0).epsilon(1e-12));
    // mixed parallel + orthogonal -> 0.5
    CHECK(text_alignment_score({pixel(1, 0, 0), pixel(0, 0, 1)}, "p", e) ==
          doctest::Approx(0.5).epsilon(1e-12));
    CHECK(thrown_code([&] { text_alignment_score({}, "p", e); }) == ErrorCode::EmptyImageSet);
}

TEST_CASE("evaluate samples per prompt and aggregates by image count") {
    auto backend = toy_backend(tiny_cfg(), 33);
    ConceptSpec spec;
    spec.concept_id = "demo";
    spec.placeholder = "[V]";
    spec.super_category = "toy";
    spec.image_dir = "unused";
    inject_concept_token(*backend, spec);

    PromptSuite mini;
    mini.templates = {"a photo of a [V] [category]", "a [V] [category] inside a box"};

    ImageSet reference;
    for (int i = 0; i < 2; ++i) {
        Grid img = Grid::zeros(8, 8, 3);
        img.values.setConstant(i == 0 ? 120.0 : 200.0);
        reference.images.push_back(img);
        reference.source_paths.push_back("ref" + std::to_string(i) + ".png");
    }

    const ToyEmbedder embedder(7, 8);
    const MetricReport report = evaluate(*backend, spec, mini, reference, 2, embedder, 99);

    CHECK(report.concept_id == "demo");
    CHECK(report.embedder_id == embedder.identifier());
    CHECK(report.suite_digest == suite_hash(mini));
    REQUIRE(report.per_prompt.size() == 2);
    for (const MetricReport::Row& row : report.per_prompt) {
        CHECK(row.n_images == 2);
        CHECK(row.identity >= -1.0);
        CHECK(row.identity <= 1.0);
        CHECK(row.text_alignment >= -1.0);
        CHECK(row.text_alignment <= 1.0);
    }
    CHECK(report.per_prompt[0].prompt == "a photo of a [V] toy");

    // weighted-mean aggregation identity
    double wi = 0.0, wt = 0.0;
    int n = 0;
    for (const MetricReport::Row& row : report.per_prompt) {
        wi += row.identity * row.n_images;
        wt += row.text_alignment * row.n_images;
        n += row.n_images;
    }
    CHECK(report.identity == doctest::Approx(wi / n).epsilon(1e-9));
    CHECK(report.text_alignment == doctest::Approx(wt / n).epsilon(1e-9));

    // determinism under the same seed
    const MetricReport again = evaluate(*backend, spec, mini, reference, 2, embedder, 99);
    CHECK(again.identity == report.identity);
    CHECK(again.text_alignment == report.text_alignment);
}

TEST_CASE("reports round-trip through json") {
    TempDir dir("report");
    MetricReport report;
    report.concept_id = "demo";
    report.suite_digest = "cafe";
    report.embedder_id = "mock";
    report.identity = 0.625;
    report.text_alignment = 0.25;
    report.per_prompt = {{"a photo of a [V] toy", 0.5, 0.125, 4},
                         {"a [V] toy in snow", 0.75, 0.375, 4}};
    write_report_json(report, dir.path() / "report.json");
    write_report_csv(report, dir.path() / "report.csv");

    const MetricReport back = load_report_json(dir.path() / "report.json");
    CHECK(back.concept_id == report.concept_id);
    CHECK(back.suite_digest == report.suite_digest);
    CHECK(back.embedder_id == report.embedder_id);
    CHECK(back.identity == report.identity);
    CHECK(back.text_alignment == report.text_alignment);
    REQUIRE(back.per_prompt.size() == 2);
    CHECK(back.per_prompt[1].prompt == "a [V] toy in snow");
    CHECK(back.per_prompt[1].identity == 0.75);
    CHECK(back.per_prompt[1].n_images == 4);

    CHECK(std::filesystem::file_size(dir.path() / "report.csv") > 0);
}
