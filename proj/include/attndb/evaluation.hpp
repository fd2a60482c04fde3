#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "attndb/backend.hpp"
#include "attndb/concept_tokens.hpp"
#include "attndb/data_pipeline.hpp"
#include "attndb/grid.hpp"

namespace attndb {

// Joint image/text embedder contract: deterministic, unit-norm outputs.
// Injected so the metric path is testable with mocks; a CLIP-class embedder
// only exists behind the pretrained adapter.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual Eigen::VectorXd embed_image(const Grid& image) const = 0;
    virtual Eigen::VectorXd embed_text(const std::string& text) const = 0;
    virtual std::string identifier() const = 0;
};

// Seeded stand-in embedder: fixed random projections over simple image
// statistics and hashed bag-of-words text features.
class ToyEmbedder final : public Embedder {
public:
    explicit ToyEmbedder(std::uint64_t seed, int dim = 32);
    Eigen::VectorXd embed_image(const Grid& image) const override;
    Eigen::VectorXd embed_text(const std::string& text) const override;
    std::string identifier() const override;

private:
    int dim_;
    std::uint64_t seed_;
    Eigen::MatrixXd w_img_;
    Eigen::MatrixXd w_txt_;
};

struct PromptSuite {
    std::vector<std::string> templates;  // each contains "[V]" and "[category]"
};

// The 24-template evaluation suite, in table order.
PromptSuite load_prompt_suite();
void validate_prompt_suite(const PromptSuite& suite);
std::string suite_hash(const PromptSuite& suite);

// "[V]" -> placeholder, "[category]" -> category word.
std::string render_prompt(const std::string& tmpl, const std::string& placeholder,
                          const std::string& category);

// Mean cosine similarity over all generated x reference pairs.
double identity_score(const std::vector<Grid>& generated, const std::vector<Grid>& reference,
                      const Embedder& embedder);

// Mean cosine similarity between each image and the prompt text embedding.
double text_alignment_score(const std::vector<Grid>& generated, const std::string& prompt,
                            const Embedder& embedder);

struct MetricReport {
    std::string concept_id;
    std::string suite_digest;
    std::string embedder_id;
    double identity = 0.0;
    double text_alignment = 0.0;
    struct Row {
        std::string prompt;
        double identity = 0.0;
        double text_alignment = 0.0;
        int n_images = 0;
    };
    std::vector<Row> per_prompt;
};

// Samples images_per_prompt images per rendered template from the trained
// backend and scores them against the reference set. For alignment scoring
// the placeholder is replaced by the category word.
MetricReport evaluate(Backend& backend, const ConceptSpec& spec, const PromptSuite& suite,
                      const ImageSet& reference, int images_per_prompt, const Embedder& embedder,
                      std::uint64_t seed);

void write_report_json(const MetricReport& report, const std::filesystem::path& path);
void write_report_csv(const MetricReport& report, const std::filesystem::path& path);
MetricReport load_report_json(const std::filesystem::path& path);

}  // namespace attndb
