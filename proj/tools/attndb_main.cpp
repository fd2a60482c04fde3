// attndb: staged personalization trainer and inspection tools.
//
// Exit codes: 0 success, 2 configuration error, 3 training failure,
// 4 missing run artifacts.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attndb/attention_maps.hpp"
#include "attndb/backend.hpp"
#include "attndb/checkpoint.hpp"
#include "attndb/common.hpp"
#include "attndb/concept_tokens.hpp"
#include "attndb/data_pipeline.hpp"
#include "attndb/evaluation.hpp"
#include "attndb/image_io.hpp"
#include "attndb/run_config.hpp"
#include "attndb/trainer.hpp"

namespace fs = std::filesystem;
using namespace attndb;

namespace {

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidConfig:
        case ErrorCode::PlaceholderCollision:
        case ErrorCode::MultiTokenCategory:
        case ErrorCode::UnknownToken:
        case ErrorCode::UnknownTokenRole:
        case ErrorCode::WeightsUnavailable:
        case ErrorCode::EmptyImageSet:
        case ErrorCode::DimensionMismatch:
        case ErrorCode::ZeroVector:
            return 2;
        case ErrorCode::MissingArtifacts:
        case ErrorCode::IoFailure:
            return 4;
        default:
            return 3;
    }
}

std::unique_ptr<Backend> make_backend(const RunConfig& cfg) {
    if (cfg.backend == "toy") return toy_backend(cfg.toy, cfg.seed);
    if (cfg.backend == "pretrained") return pretrained_adapter(cfg.weights_path);
    fail(ErrorCode::InvalidConfig, "unknown backend '" + cfg.backend + "'");
}

RunConfig load_run_dir_config(const fs::path& run_dir) {
    const fs::path cfg_path = run_dir / "config.toml";
    if (!fs::exists(cfg_path))
        fail(ErrorCode::MissingArtifacts,
             "no config.toml under " + run_dir.string() + "; is this a run directory?");
    return parse_run_config(cfg_path);
}

// Training records image_dir as given, which may be relative to the original
// working directory. Fall back to resolving against the run dir.
fs::path resolve_image_dir(const RunConfig& cfg, const fs::path& run_dir) {
    const fs::path& dir = cfg.concept_spec.image_dir;
    if (!dir.is_absolute() && !fs::exists(dir) && fs::exists(run_dir / dir))
        return run_dir / dir;
    return dir;
}

struct RestoredRun {
    RunConfig cfg;
    std::unique_ptr<Backend> backend;
    TokenHandle handle;
};

// Rebuild the seeded backend, re-inject the concept token and replay
// checkpoints up to the requested point ("1".."3", "baseline" or "final").
RestoredRun restore_run(const fs::path& run_dir, const std::string& upto) {
    RestoredRun r;
    r.cfg = load_run_dir_config(run_dir);
    r.backend = make_backend(r.cfg);
    r.handle = inject_concept_token(*r.backend, r.cfg.concept_spec);

    std::vector<fs::path> ckpts;
    if (upto == "final") {
        ckpts.push_back(run_dir / "final" / "checkpoint.bin");
    } else if (upto == "baseline") {
        ckpts.push_back(run_dir / stage_dir_name("baseline") / "checkpoint.bin");
    } else {
        const int k = std::stoi(upto);
        for (int i = 1; i <= k; ++i)
            ckpts.push_back(run_dir / stage_dir_name(std::to_string(i)) / "checkpoint.bin");
    }
    for (const fs::path& p : ckpts) {
        if (!fs::exists(p))
            fail(ErrorCode::MissingArtifacts, "missing checkpoint " + p.string());
        apply_checkpoint(p, *r.backend);
    }
    return r;
}

TokenRoleMap roles_for_prompt(const TokenizedPrompt& tp, const ConceptSpec& spec) {
    TokenRoleMap roles;
    roles.tokens = tp.tokens;
    int vpos = -1;
    int cpos = -1;
    for (int i = 0; i < static_cast<int>(tp.tokens.size()); ++i) {
        if (vpos < 0 && tp.tokens[i] == spec.placeholder) {
            roles.roles["V"] = i;
            vpos = i;
        } else if (cpos < 0 && tp.tokens[i] == spec.super_category) {
            roles.roles["category"] = i;
            cpos = i;
        } else {
            roles.roles["pos:" + std::to_string(i)] = i;
        }
    }
    if (vpos < 0)
        fail(ErrorCode::UnknownTokenRole,
             "prompt does not contain the placeholder '" + spec.placeholder + "'");
    return roles;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(prec) << v;
    return out.str();
}

// regularizer values sit orders of magnitude below the diffusion loss
std::string fmt_sci(double v) {
    std::ostringstream out;
    out << std::scientific << std::setprecision(2) << v;
    return out.str();
}

int cmd_train(const fs::path& config_path, bool baseline, std::optional<std::uint64_t> seed,
              const std::string& backend_override) {
    RunConfig cfg = parse_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!backend_override.empty()) cfg.backend = backend_override;
    if (const char* env = std::getenv("ATTNDB_RUN_DIR"); env && *env) cfg.output_dir = env;
    validate_run_config(cfg);

    std::unique_ptr<Backend> backend = make_backend(cfg);
    const ImageSet images = load_concept_images(cfg.concept_spec.image_dir);

    std::vector<StagePlan> schedule;
    if (baseline)
        schedule.push_back(baseline_plan());
    else
        schedule.assign(cfg.schedule.begin(), cfg.schedule.end());

    fs::create_directories(cfg.output_dir);
    write_run_config(cfg, cfg.output_dir / "config.toml");

    TrainerOptions options;
    options.run_dir = cfg.output_dir;
    options.seed = cfg.seed;
    options.hflip = cfg.hflip;

    std::cout << "concept '" << cfg.concept_spec.concept_id << "' (" << images.size()
              << " images), backend " << cfg.backend << ", seed " << cfg.seed << "\n";

    const TrainedArtifacts art = run_full(schedule, *backend, cfg.concept_spec, images, options);

    for (const StageResult& sr : art.stages) {
        const StepLog& first = sr.logs.front();
        const StepLog& last = sr.logs.back();
        std::cout << "stage " << sr.plan.stage_id << "  scope=" << scope_name(sr.plan.scope)
                  << "  steps=" << sr.plan.steps << "  lr=" << sr.plan.learning_rate << "\n"
                  << "  diffusion " << fmt(first.diffusion_loss) << " -> "
                  << fmt(last.diffusion_loss) << "   reg " << fmt_sci(first.reg_loss) << " -> "
                  << fmt_sci(last.reg_loss) << "   wall " << fmt(sr.wall_seconds, 1) << "s\n";
        std::string changed;
        for (const auto& [group, fp] : sr.fingerprints_after)
            if (!(fp == sr.fingerprints_before.at(group)))
                changed += (changed.empty() ? "" : ", ") + group;
        const double dr = embedding_drift(sr.embedding_before, sr.embedding_after);
        if (dr < 1.0 - 1e-12) changed += (changed.empty() ? "" : ", ") + std::string("[V] row");
        std::cout << "  changed: " << (changed.empty() ? "(nothing)" : changed) << "\n";
    }

    const double total_drift =
        embedding_drift(art.initial_embedding, art.stages.back().embedding_after);
    std::cout << "embedding drift vs init: " << fmt(total_drift) << "\n"
              << "run dir: " << fs::absolute(cfg.output_dir).string() << "\n";
    return 0;
}

int cmd_evaluate(const fs::path& run_dir, int images_per_prompt) {
    RestoredRun r = restore_run(run_dir, "final");
    const ImageSet reference = load_concept_images(resolve_image_dir(r.cfg, run_dir));

    const PromptSuite suite = load_prompt_suite();
    const ToyEmbedder embedder(derive_seed(r.cfg.seed, "embedder"), 32);
    const MetricReport report = evaluate(*r.backend, r.cfg.concept_spec, suite, reference,
                                         images_per_prompt, embedder, r.cfg.seed);

    write_report_json(report, run_dir / "report.json");
    write_report_csv(report, run_dir / "report.csv");

    std::cout << "concept " << report.concept_id << ": identity=" << fmt(report.identity)
              << " text_alignment=" << fmt(report.text_alignment) << " ("
              << report.per_prompt.size() << " prompts x " << images_per_prompt
              << " images)\n"
              << "report: " << (run_dir / "report.json").string() << "\n";
    return 0;
}

int cmd_visualize(const fs::path& run_dir, const std::string& raw_prompt,
                  const std::string& stage, int n_images, const std::string& mode, int stride) {
    RestoredRun r = restore_run(run_dir, stage);
    const ConceptSpec& spec = r.cfg.concept_spec;

    const std::string text = render_prompt(raw_prompt, spec.placeholder, spec.super_category);
    const TokenizedPrompt tp = r.backend->tokenize(text);
    const TokenRoleMap roles = roles_for_prompt(tp, spec);

    CaptureSession session(*r.backend, roles);
    const Eigen::MatrixXd cond = r.backend->encode_text(tp.ids);
    auto rng = make_rng(r.cfg.seed, "visualize/" + stage);
    const std::vector<Grid> samples = ddpm_sample(*r.backend, cond, n_images, rng);
    session.end();

    const fs::path out_dir = run_dir / "attn_vis" / ("stage" + stage);
    fs::path manifest;
    if (mode == "per-step") {
        // One dump per sampled denoising step (most-noised first).
        for (int p = 0; p < session.pass_count(); p += stride)
            manifest = dump_maps(session.pass(p), out_dir / ("pass" + std::to_string(p)));
    } else {
        manifest = dump_maps(collect_maps(session), out_dir);
    }
    for (int i = 0; i < n_images; ++i)
        write_rgb_png(out_dir / ("sample" + std::to_string(i) + ".png"),
                      r.backend->decode_latent(samples[i]));

    std::cout << "prompt: \"" << text << "\" (" << tp.ids.size() << " tokens)\n"
              << "captured " << session.pass_count() << " denoising passes, "
              << collect_maps(session).layer_count() << " cross-attention layers\n"
              << "maps + heatmaps: " << manifest.string() << "\n";
    return 0;
}

int cmd_diagnose(const fs::path& run_dir) {
    const fs::path snap_dir = run_dir / "snapshots";
    const fs::path init_path = snap_dir / "step0.json";
    if (!fs::exists(init_path))
        fail(ErrorCode::MissingArtifacts, "no embedding snapshots under " + snap_dir.string());
    const EmbeddingSnapshot init = load_snapshot(init_path);

    std::vector<fs::path> stage_paths;
    for (const auto& entry : fs::directory_iterator(snap_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("stage", 0) == 0 && entry.path().extension() == ".json")
            stage_paths.push_back(entry.path());
    }
    std::sort(stage_paths.begin(), stage_paths.end());
    if (stage_paths.empty())
        fail(ErrorCode::MissingArtifacts, "no stage snapshots under " + snap_dir.string());

    std::cout << "token id " << init.token_id << ", dim " << init.vector.size() << "\n";
    std::cout << std::left << std::setw(16) << "snapshot" << std::setw(8) << "step"
              << std::setw(16) << "drift_vs_init" << "drift_vs_prev\n";
    EmbeddingSnapshot prev = init;
    double last_vs_init = 1.0;
    for (const fs::path& p : stage_paths) {
        const EmbeddingSnapshot snap = load_snapshot(p);
        last_vs_init = embedding_drift(init, snap);
        std::cout << std::left << std::setw(16) << p.stem().string() << std::setw(8)
                  << snap.step << std::setw(16) << fmt(last_vs_init, 6)
                  << fmt(embedding_drift(prev, snap), 6) << "\n";
        prev = snap;
    }
    if (last_vs_init >= kDriftStuckThreshold)
        std::cout << "warning: cosine similarity to the initial embedding is >= "
                  << kDriftStuckThreshold
                  << "; the embedding barely moved during joint finetuning\n";
    else
        std::cout << "embedding moved during training (similarity "
                  << fmt(last_vs_init, 6) << " < " << kDriftStuckThreshold << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Staged concept personalization for a latent diffusion backend"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "Run the staged training schedule");
    std::string config_path;
    bool baseline = false;
    std::optional<std::uint64_t> seed;
    std::string backend_override;
    train->add_option("--config", config_path, "Run configuration (TOML)")
        ->required()
        ->check(CLI::ExistingFile);
    train->add_flag("--baseline", baseline,
                    "Joint embedding+denoiser finetuning instead of the staged schedule");
    train->add_option("--seed", seed, "Override the configured seed");
    train->add_option("--backend", backend_override, "Override the configured backend")
        ->check(CLI::IsMember({"toy", "pretrained"}));

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Score a finished run on the prompt suite");
    std::string eval_dir;
    int images_per_prompt = 4;
    eval->add_option("run_dir", eval_dir, "Run directory")->required();
    eval->add_option("--images-per-prompt", images_per_prompt, "Samples per prompt")
        ->check(CLI::PositiveNumber);

    // visualize-attn
    auto* vis = app.add_subcommand("visualize-attn",
                                   "Sample with attention capture and dump per-token heatmaps");
    std::string vis_dir;
    std::string vis_prompt = "a photo of a [V] [category]";
    std::string vis_stage = "final";
    int vis_images = 1;
    std::string vis_mode = "mean";
    int vis_stride = 10;
    vis->add_option("run_dir", vis_dir, "Run directory")->required();
    vis->add_option("--prompt", vis_prompt, "Prompt; [V] and [category] are substituted");
    vis->add_option("--stage", vis_stage, "Replay checkpoints up to this stage")
        ->check(CLI::IsMember({"1", "2", "3", "baseline", "final"}));
    vis->add_option("--images", vis_images, "Images to sample")->check(CLI::PositiveNumber);
    vis->add_option("--mode", vis_mode, "Average maps over denoising steps, or dump per step")
        ->check(CLI::IsMember({"mean", "per-step"}));
    vis->add_option("--stride", vis_stride, "Step stride in per-step mode")
        ->check(CLI::PositiveNumber);

    // diagnose-embedding
    auto* diag = app.add_subcommand("diagnose-embedding",
                                    "Report embedding drift across stage boundaries");
    std::string diag_dir;
    diag->add_option("run_dir", diag_dir, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Bad flags are configuration errors; --help stays exit 0.
        const int cli_exit = app.exit(e);
        return cli_exit == 0 ? 0 : 2;
    }

    try {
        if (*train) return cmd_train(config_path, baseline, seed, backend_override);
        if (*eval) return cmd_evaluate(eval_dir, images_per_prompt);
        if (*vis)
            return cmd_visualize(vis_dir, vis_prompt, vis_stage, vis_images, vis_mode, vis_stride);
        if (*diag) return cmd_diagnose(diag_dir);
    } catch (const Error& e) {
        std::cerr << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
