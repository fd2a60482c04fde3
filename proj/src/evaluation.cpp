#include "attndb/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "attndb/common.hpp"
#include "attndb/fingerprint.hpp"

namespace attndb {
namespace {

constexpr int kImageFeatures = 16;  // 12 quadrant means + 3 channel stds + global mean
constexpr int kTextBuckets = 64;

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Eigen::VectorXd normalized_or_axis(Eigen::VectorXd v) {
    const double n = v.norm();
    if (n < 1e-12) {
        v.setZero();
        v(0) = 1.0;
        return v;
    }
    return v / n;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) fail(ErrorCode::ZeroVector, "cosine of zero vector");
    return a.dot(b) / (na * nb);
}

}  // namespace

ToyEmbedder::ToyEmbedder(std::uint64_t seed, int dim) : dim_(dim), seed_(seed) {
    if (dim < 2) fail(ErrorCode::InvalidConfig, "embedder dim must be >= 2");
    auto fill = [&](Eigen::MatrixXd& m, int rows, int cols, const char* tag) {
        m.resize(rows, cols);
        auto rng = make_rng(seed, std::string("embedder/") + tag);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = gauss(rng);
    };
    fill(w_img_, dim, kImageFeatures, "img");
    fill(w_txt_, dim, kTextBuckets, "txt");
}

Eigen::VectorXd ToyEmbedder::embed_image(const Grid& image) const {
    if (image.locations() == 0 || image.c < 1)
        fail(ErrorCode::ShapeMismatch, "cannot embed an empty image");
    Eigen::VectorXd f = Eigen::VectorXd::Zero(kImageFeatures);
    const int channels = std::min(image.c, 3);
    // per-channel quadrant means
    int k = 0;
    for (int qy = 0; qy < 2; ++qy)
        for (int qx = 0; qx < 2; ++qx)
            for (int ch = 0; ch < 3; ++ch) {
                double sum = 0.0;
                int count = 0;
                const int y0 = qy * image.h / 2, y1 = (qy + 1) * image.h / 2;
                const int x0 = qx * image.w / 2, x1 = (qx + 1) * image.w / 2;
                for (int y = y0; y < std::max(y1, y0 + 1) && y < image.h; ++y)
                    for (int x = x0; x < std::max(x1, x0 + 1) && x < image.w; ++x) {
                        sum += image.at(y, x, std::min(ch, channels - 1));
                        ++count;
                    }
                f(k++) = count > 0 ? sum / count : 0.0;
            }
    for (int ch = 0; ch < 3; ++ch) {
        const auto col = image.values.col(std::min(ch, channels - 1));
        const double mean = col.mean();
        f(12 + ch) = std::sqrt((col.array() - mean).square().mean());
    }
    f(15) = image.values.leftCols(channels).mean();
    return normalized_or_axis(w_img_ * f);
}

Eigen::VectorXd ToyEmbedder::embed_text(const std::string& text) const {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(kTextBuckets);
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        f(static_cast<int>(fnv1a(word) % kTextBuckets)) += 1.0;
    }
    return normalized_or_axis(w_txt_ * f);
}

std::string ToyEmbedder::identifier() const {
    return "toy-embedder-v1/dim" + std::to_string(dim_) + "/seed" + std::to_string(seed_);
}

PromptSuite load_prompt_suite() {
    return PromptSuite{{
        "a photo of a [V] [category]",
        "a photo of a [V] [category] in Times Square",
        "a photo of two [V] [category] on a table",
        "a [V] [category] in the jungle",
        "a [V] [category] on a stone wall in the countryside",
        "a [V] [category] on a brick pathway in a garden",
        "a [V] [category] on a pile of fallen leaves in a forest",
        "a [V] [category] at a picnic spot with a checkered blanket",
        "a [V] [category] nestled among rocks",
        "a [V] [category] inside a basket",
        "a [V] [category] inside a metal cage",
        "a [V] [category] drenched in the rainy streets",
        "a [V] [category] in a grassy park with a sunglasses",
        "a [V] [category] floats on the water",
        "a [V] [category] covered by snow",
        "a red [V] [category] wearing bowtie",
        "a purple [V] [category]",
        "a black [V] [category]",
        "a [V] [category] latte art",
        "pencil drawing of a [V] [category]",
        "manga drawing of a [V] [category]",
        "a watercolor painting of a [V] [category]",
        "vector art of a [V] [category]",
        "a painting of a [V] [category] in the style of Monet",
    }};
}

void validate_prompt_suite(const PromptSuite& suite) {
    if (suite.templates.size() != 24)
        fail(ErrorCode::InvalidConfig, "prompt suite must have exactly 24 templates");
    for (const std::string& t : suite.templates)
        if (t.find("[V]") == std::string::npos || t.find("[category]") == std::string::npos)
            fail(ErrorCode::InvalidConfig, "template missing [V] or [category]: " + t);
}

std::string suite_hash(const PromptSuite& suite) {
    std::string joined;
    for (const std::string& t : suite.templates) {
        joined += t;
        joined += '\n';
    }
    return sha256_hex(joined);
}

std::string render_prompt(const std::string& tmpl, const std::string& placeholder,
                          const std::string& category) {
    std::string out = tmpl;
    auto replace_all = [&out](const std::string& from, const std::string& to) {
        for (std::size_t pos = out.find(from); pos != std::string::npos;
             pos = out.find(from, pos + to.size()))
            out.replace(pos, from.size(), to);
    };
    replace_all("[V]", placeholder);
    replace_all("[category]", category);
    return out;
}

double identity_score(const std::vector<Grid>& generated, const std::vector<Grid>& reference,
                      const Embedder& embedder) {
    if (generated.empty() || reference.empty())
        fail(ErrorCode::EmptyImageSet, "identity score needs non-empty image sets");
    std::vector<Eigen::VectorXd> ge, re;
    for (const Grid& g : generated) ge.push_back(embedder.embed_image(g));
    for (const Grid& r : reference) re.push_back(embedder.embed_image(r));
    double sum = 0.0;
    for (const auto& a : ge)
        for (const auto& b : re) sum += cosine(a, b);
    return sum / (static_cast<double>(ge.size()) * static_cast<double>(re.size()));
}

double text_alignment_score(const std::vector<Grid>& generated, const std::string& prompt,
                            const Embedder& embedder) {
    if (generated.empty()) fail(ErrorCode::EmptyImageSet, "text alignment needs images");
    const Eigen::VectorXd te = embedder.embed_text(prompt);
    double sum = 0.0;
    for (const Grid& g : generated) sum += cosine(embedder.embed_image(g), te);
    return sum / static_cast<double>(generated.size());
}

MetricReport evaluate(Backend& backend, const ConceptSpec& spec, const PromptSuite& suite,
                      const ImageSet& reference, int images_per_prompt, const Embedder& embedder,
                      std::uint64_t seed) {
    // Subsets of the suite are allowed here (quick looks, tests); only
    // load_prompt_suite pins the full 24. Each template still needs both slots.
    if (suite.templates.empty()) fail(ErrorCode::InvalidConfig, "empty prompt suite");
    for (const std::string& t : suite.templates)
        if (t.find("[V]") == std::string::npos || t.find("[category]") == std::string::npos)
            fail(ErrorCode::InvalidConfig, "template missing [V] or [category]: " + t);
    if (images_per_prompt < 1) fail(ErrorCode::InvalidConfig, "images_per_prompt must be >= 1");
    if (reference.images.empty()) fail(ErrorCode::EmptyImageSet, "empty reference set");

    std::vector<Grid> refs;
    for (const Grid& r : reference.images)
        refs.push_back(preprocess(r, backend.input_resolution()));

    MetricReport report;
    report.concept_id = spec.concept_id;
    report.suite_digest = suite_hash(suite);
    report.embedder_id = embedder.identifier();

    double id_sum = 0.0, txt_sum = 0.0;
    long n_total = 0;
    for (std::size_t i = 0; i < suite.templates.size(); ++i) {
        const std::string gen_text =
            render_prompt(suite.templates[i], spec.placeholder, spec.super_category);
        const std::string align_text =
            render_prompt(suite.templates[i], spec.super_category, spec.super_category);

        std::vector<Grid> images;
        try {
            const Eigen::MatrixXd cond = backend.encode_text(backend.tokenize(gen_text).ids);
            auto rng = make_rng(seed, "eval/prompt" + std::to_string(i));
            std::vector<Grid> latents = ddpm_sample(backend, cond, images_per_prompt, rng);
            for (const Grid& z : latents) {
                if (!z.values.allFinite())
                    fail(ErrorCode::SamplingFailure, "non-finite latent sample");
                images.push_back(backend.decode_latent(z));
            }
        } catch (const Error& e) {
            if (e.code() == ErrorCode::SamplingFailure) throw;
            fail(ErrorCode::SamplingFailure,
                 "sampling failed for \"" + gen_text + "\": " + e.what());
        }

        MetricReport::Row row;
        row.prompt = gen_text;
        row.n_images = static_cast<int>(images.size());
        row.identity = identity_score(images, refs, embedder);
        row.text_alignment = text_alignment_score(images, align_text, embedder);
        id_sum += row.identity * row.n_images;
        txt_sum += row.text_alignment * row.n_images;
        n_total += row.n_images;
        report.per_prompt.push_back(std::move(row));
    }
    report.identity = id_sum / static_cast<double>(n_total);
    report.text_alignment = txt_sum / static_cast<double>(n_total);
    return report;
}

void write_report_json(const MetricReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["concept_id"] = report.concept_id;
    j["suite_hash"] = report.suite_digest;
    j["embedder"] = report.embedder_id;
    j["identity"] = report.identity;
    j["text_alignment"] = report.text_alignment;
    j["per_prompt"] = nlohmann::json::array();
    for (const auto& row : report.per_prompt)
        j["per_prompt"].push_back({{"prompt", row.prompt},
                                   {"identity", row.identity},
                                   {"text_alignment", row.text_alignment},
                                   {"n_images", row.n_images}});
    std::ofstream out(path);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_report_csv(const MetricReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    out << "prompt,identity,text_alignment,n_images\n";
    auto quote = [](const std::string& s) { return "\"" + s + "\""; };
    for (const auto& row : report.per_prompt)
        out << quote(row.prompt) << "," << row.identity << "," << row.text_alignment << ","
            << row.n_images << "\n";
    out << quote("ALL") << "," << report.identity << "," << report.text_alignment << ","
        << "" << "\n";
}

MetricReport load_report_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::MissingArtifacts, "cannot read " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) fail(ErrorCode::IoFailure, "malformed report " + path.string());
    MetricReport report;
    report.concept_id = j.at("concept_id").get<std::string>();
    report.suite_digest = j.at("suite_hash").get<std::string>();
    report.embedder_id = j.at("embedder").get<std::string>();
    report.identity = j.at("identity").get<double>();
    report.text_alignment = j.at("text_alignment").get<double>();
    for (const auto& row : j.at("per_prompt")) {
        MetricReport::Row r;
        r.prompt = row.at("prompt").get<std::string>();
        r.identity = row.at("identity").get<double>();
        r.text_alignment = row.at("text_alignment").get<double>();
        r.n_images = row.at("n_images").get<int>();
        report.per_prompt.push_back(std::move(r));
    }
    return report;
}

}  // namespace attndb
