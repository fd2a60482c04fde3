#include "attndb/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <utility>

#include "attndb/checkpoint.hpp"
#include "attndb/common.hpp"

namespace attndb {
namespace {

// groups a stage can change, i.e. what its checkpoint must carry
std::vector<std::string> groups_for_scope(TrainableScope scope) {
    switch (scope) {
        case TrainableScope::EMBEDDING_ONLY:
            return {};
        case TrainableScope::CROSS_ATTENTION:
            return {"cross_attention"};
        case TrainableScope::FULL_UNET:
        case TrainableScope::EMBEDDING_PLUS_FULL_UNET:
            return {"cross_attention", "unet_rest"};
    }
    fail(ErrorCode::ScopeResolutionFailure, "unhandled scope");
}

struct ParamBackup {
    std::vector<std::pair<Eigen::MatrixXd*, Eigen::MatrixXd>> tensors;

    explicit ParamBackup(Backend& backend) {
        for (const std::string& g : backend.group_names())
            for (const NamedParam& p : backend.group_params(g))
                tensors.emplace_back(p.value, *p.value);
    }
    void restore() const {
        for (const auto& [ptr, copy] : tensors) *ptr = copy;
    }
};

Grid gaussian_grid(int h, int w, int c, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Grid g = Grid::zeros(h, w, c);
    for (Eigen::Index i = 0; i < g.values.rows(); ++i)
        for (Eigen::Index j = 0; j < g.values.cols(); ++j) g.values(i, j) = gauss(rng);
    return g;
}

NoisePair stack_noise(const std::vector<Grid>& predicted, const std::vector<Grid>& target) {
    const Eigen::Index locs = predicted.front().values.rows();
    const Eigen::Index ch = predicted.front().values.cols();
    NoisePair pair;
    pair.predicted.resize(locs * static_cast<Eigen::Index>(predicted.size()), ch);
    pair.target.resize(pair.predicted.rows(), ch);
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        pair.predicted.middleRows(static_cast<Eigen::Index>(i) * locs, locs) = predicted[i].values;
        pair.target.middleRows(static_cast<Eigen::Index>(i) * locs, locs) = target[i].values;
    }
    return pair;
}

void write_log_line(std::ofstream& out, const StepLog& lg) {
    if (!out.is_open()) return;
    nlohmann::json j;
    j["step"] = lg.step;
    j["stage"] = lg.stage;
    j["diffusion_loss"] = lg.diffusion_loss;
    j["reg_loss"] = lg.reg_loss;
    j["mu_v"] = lg.mu_v;
    j["mu_cat"] = lg.mu_cat;
    j["var_v"] = lg.var_v;
    j["var_cat"] = lg.var_cat;
    out << j.dump() << "\n";
}

// Fig. 6-style diagnostic: re-runs the last training batch at timesteps
// spread over the schedule, with capture attached, and dumps the averaged
// maps. Runs on copies of the inputs; parameters are not touched.
void dump_stage_attention(Backend& backend, const TrainingBatch& batch,
                          const std::filesystem::path& dir, const TrainerOptions& options,
                          const std::string& stage_id) {
    const int passes = std::max(1, options.attn_dump_passes);
    auto noise_rng = make_rng(options.seed, "stage" + stage_id + "/attncap");
    TokenizedPrompt prompt{batch.prompt_token_ids, batch.roles.tokens};

    CaptureSession session(backend, batch.roles);
    for (int p = 0; p < passes; ++p) {
        const int t = std::min(backend.schedule().T - 1,
                               static_cast<int>((p + 0.5) * backend.schedule().T / passes));
        std::vector<Grid> z_t;
        std::vector<int> ts(batch.pixels.size(), t);
        for (const Grid& px : batch.pixels) {
            const Grid z0 = backend.encode_image(px);
            const Grid eps = gaussian_grid(z0.h, z0.w, z0.c, noise_rng);
            z_t.push_back(add_noise(z0, t, eps, backend.schedule()));
        }
        backend.forward_train(z_t, ts, prompt, batch.roles);
    }
    const AttentionMapSet maps = collect_maps(session);
    session.end();
    dump_maps(maps, dir);
}

}  // namespace

const char* scope_name(TrainableScope scope) {
    switch (scope) {
        case TrainableScope::EMBEDDING_ONLY: return "embedding_only";
        case TrainableScope::CROSS_ATTENTION: return "cross_attention";
        case TrainableScope::FULL_UNET: return "full_unet";
        case TrainableScope::EMBEDDING_PLUS_FULL_UNET: return "embedding_plus_full_unet";
    }
    return "unknown";
}

std::array<StagePlan, 3> default_schedule() {
    return {{
        {"1", TrainableScope::EMBEDDING_ONLY, 1e-3, 60, {0.1, 0.0}, 8},
        {"2", TrainableScope::CROSS_ATTENTION, 2e-5, 100, {2.0, 5.0}, 8},
        {"3", TrainableScope::FULL_UNET, 2e-6, 500, {2.0, 5.0}, 8},
    }};
}

StagePlan baseline_plan() {
    return {"baseline", TrainableScope::EMBEDDING_PLUS_FULL_UNET, 2e-6, 660, {0.0, 0.0}, 8};
}

std::string stage_dir_name(const std::string& stage_id) {
    return stage_id == "baseline" ? "baseline" : "stage" + stage_id;
}

std::vector<ParamView> resolve_scope(Backend& backend, TrainableScope scope,
                                     int placeholder_id) {
    auto group_views = [&](const std::string& g, std::vector<ParamView>& out) {
        try {
            for (const NamedParam& p : backend.group_params(g))
                out.push_back({p.name, p.value, backend.grad_of(p.name), -1});
        } catch (const Error& e) {
            fail(ErrorCode::ScopeResolutionFailure,
                 "cannot resolve group " + g + ": " + e.what());
        }
    };
    auto embedding_row_view = [&](std::vector<ParamView>& out) {
        std::vector<NamedParam> emb;
        try {
            emb = backend.group_params("token_embeddings");
        } catch (const Error& e) {
            fail(ErrorCode::ScopeResolutionFailure, std::string("no embedding table: ") + e.what());
        }
        if (emb.size() != 1)
            fail(ErrorCode::ScopeResolutionFailure, "expected a single token-embedding tensor");
        if (placeholder_id < 0 || placeholder_id >= emb[0].value->rows())
            fail(ErrorCode::ScopeResolutionFailure, "placeholder row out of range");
        out.push_back({emb[0].name, emb[0].value, backend.grad_of(emb[0].name), placeholder_id});
    };

    std::vector<ParamView> views;
    switch (scope) {
        case TrainableScope::EMBEDDING_ONLY:
            embedding_row_view(views);
            break;
        case TrainableScope::CROSS_ATTENTION:
            group_views("cross_attention", views);
            break;
        case TrainableScope::FULL_UNET:
            group_views("cross_attention", views);
            group_views("unet_rest", views);
            break;
        case TrainableScope::EMBEDDING_PLUS_FULL_UNET:
            embedding_row_view(views);
            group_views("cross_attention", views);
            group_views("unet_rest", views);
            break;
    }
    if (views.empty()) fail(ErrorCode::ScopeResolutionFailure, "scope resolved to nothing");
    return views;
}

StageResult run_stage(const StagePlan& plan, Backend& backend, const ConceptSpec& spec,
                      const TokenHandle& handle, BatchStream& stream,
                      const TrainerOptions& options, long step_offset) {
    if (plan.learning_rate <= 0.0 || plan.steps < 1 || plan.batch_size < 1)
        fail(ErrorCode::InvalidConfig, "stage plan out of range");
    const auto wall_start = std::chrono::steady_clock::now();
    const TrainingPrompt prompt = build_training_prompt(backend, spec);
    std::vector<ParamView> views = resolve_scope(backend, plan.scope, handle.token_id);
    const ParamBackup backup(backend);

    StageResult res;
    res.plan = plan;
    for (const std::string& g : backend.group_names())
        res.fingerprints_before[g] = fingerprint_params(g, backend.group_params(g));
    res.embedding_before = snapshot_embedding(handle, step_offset);

    std::filesystem::path stage_dir;
    std::ofstream log_file;
    if (!options.run_dir.empty()) {
        stage_dir = options.run_dir / stage_dir_name(plan.stage_id);
        std::filesystem::create_directories(stage_dir);
        log_file.open(stage_dir / "losses.jsonl");
        if (!log_file) fail(ErrorCode::IoFailure, "cannot write losses.jsonl in " + stage_dir.string());
    }

    Adam adam({plan.learning_rate, 0.9, 0.999, 1e-8}, std::move(views));
    auto ts_rng = make_rng(options.seed, "stage" + plan.stage_id + "/timesteps");
    auto noise_rng = make_rng(options.seed, "stage" + plan.stage_id + "/noise");
    std::uniform_int_distribution<int> pick_t(0, backend.schedule().T - 1);

    const bool use_reg = plan.reg_weights.lambda_mu != 0.0 || plan.reg_weights.lambda_sigma != 0.0;
    TrainingBatch batch;
    TrainingBatch last_batch;
    for (int s = 0; s < plan.steps; ++s) {
        if (!stream.next(batch))
            fail(ErrorCode::InvalidConfig, "batch stream exhausted before stage end");
        if (static_cast<int>(batch.pixels.size()) != plan.batch_size)
            fail(ErrorCode::ShapeMismatch, "batch size does not match the stage plan");

        std::vector<Grid> z_t, eps;
        std::vector<int> ts;
        for (const Grid& px : batch.pixels) {
            const Grid z0 = backend.encode_image(px);
            const int t = pick_t(ts_rng);
            Grid e = gaussian_grid(z0.h, z0.w, z0.c, noise_rng);
            z_t.push_back(add_noise(z0, t, e, backend.schedule()));
            eps.push_back(std::move(e));
            ts.push_back(t);
        }

        TokenizedPrompt tokenized{batch.prompt_token_ids, batch.roles.tokens};
        TrainForward fwd = backend.forward_train(z_t, ts, tokenized, batch.roles);

        const double dl = diffusion_loss(stack_noise(fwd.eps_hat, eps));
        const RegLossGrad reg =
            attention_reg_loss_grad(fwd.maps, plan.reg_weights, false, options.pooling);
        try {
            total_loss(dl, reg.loss);
        } catch (const Error&) {
            backup.restore();
            if (!stage_dir.empty())
                save_checkpoint(stage_dir / "checkpoint.bin", backend,
                                groups_for_scope(plan.scope), {handle.token_id});
            fail(ErrorCode::NonFiniteLoss,
                 "non-finite loss at stage " + plan.stage_id + " step " + std::to_string(s) +
                     " (diffusion=" + std::to_string(dl) + ", reg=" + std::to_string(reg.loss) +
                     "); stage rolled back");
        }

        backend.zero_grads();
        const double grad_scale =
            2.0 / (static_cast<double>(fwd.eps_hat.size()) * fwd.eps_hat.front().values.size());
        std::vector<Grid> d_eps;
        for (std::size_t i = 0; i < fwd.eps_hat.size(); ++i) {
            Grid d = fwd.eps_hat[i];
            d.values = grad_scale * (fwd.eps_hat[i].values - eps[i].values);
            d_eps.push_back(std::move(d));
        }
        backend.backward(fwd, d_eps, use_reg ? reg.d_values : std::vector<Eigen::MatrixXd>{});
        adam.step();

        const PooledStats sv = pooled_stats(fwd.maps, "V", options.pooling);
        const PooledStats sc = pooled_stats(fwd.maps, "category", options.pooling);
        StepLog lg{step_offset + s, plan.stage_id, dl,    reg.loss,
                   sv.mean,         sc.mean,       sv.variance, sc.variance};
        write_log_line(log_file, lg);
        res.logs.push_back(std::move(lg));
        last_batch = batch;
    }

    for (const std::string& g : backend.group_names())
        res.fingerprints_after[g] = fingerprint_params(g, backend.group_params(g));
    res.embedding_after = snapshot_embedding(handle, step_offset + plan.steps);

    if (!stage_dir.empty()) {
        save_checkpoint(stage_dir / "checkpoint.bin", backend, groups_for_scope(plan.scope),
                        {handle.token_id});
        res.checkpoint_path = stage_dir / "checkpoint.bin";
        if (options.dump_attention && backend.capture() == nullptr)
            dump_stage_attention(backend, last_batch, stage_dir / "attn", options, plan.stage_id);
    }
    (void)prompt;
    res.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    return res;
}

TrainedArtifacts run_full(const std::vector<StagePlan>& schedule, Backend& backend,
                          const ConceptSpec& spec, const ImageSet& images,
                          const TrainerOptions& options) {
    if (schedule.empty()) fail(ErrorCode::InvalidConfig, "empty schedule");

    TrainedArtifacts art;
    art.run_dir = options.run_dir;
    art.handle = inject_concept_token(backend, spec);
    art.prompt = build_training_prompt(backend, spec);
    art.initial_embedding = snapshot_embedding(art.handle, 0);
    if (!options.run_dir.empty()) {
        std::filesystem::create_directories(options.run_dir / "snapshots");
        save_snapshot(art.initial_embedding, options.run_dir / "snapshots" / "step0.json");
    }

    long offset = 0;
    for (const StagePlan& plan : schedule) {
        BatchStream stream =
            make_batches(images, art.prompt.tokenized, art.prompt.roles, plan.batch_size,
                         plan.steps, backend.input_resolution(),
                         derive_seed(options.seed, "stage" + plan.stage_id + "/data"),
                         options.hflip);
        StageResult res = run_stage(plan, backend, spec, art.handle, stream, options, offset);
        offset += plan.steps;
        if (!options.run_dir.empty())
            save_snapshot(res.embedding_after, options.run_dir / "snapshots" /
                                                   ("stage" + plan.stage_id + ".json"));
        art.stages.push_back(std::move(res));
    }

    for (const std::string& g : backend.group_names())
        art.final_fingerprints[g] = fingerprint_params(g, backend.group_params(g));

    if (!options.run_dir.empty()) {
        const std::filesystem::path final_dir = options.run_dir / "final";
        std::filesystem::create_directories(final_dir);
        save_checkpoint(final_dir / "checkpoint.bin", backend,
                        {"cross_attention", "unet_rest"}, {art.handle.token_id});
        nlohmann::json fps;
        for (const auto& [g, fp] : art.final_fingerprints) fps[g] = fp.digest;
        std::ofstream ff(final_dir / "fingerprints.json");
        ff << fps.dump(2) << "\n";

        const double drift =
            embedding_drift(art.initial_embedding, art.stages.back().embedding_after);
        nlohmann::json dj;
        dj["drift"] = drift;
        dj["threshold"] = kDriftStuckThreshold;
        dj["stuck"] = drift >= kDriftStuckThreshold;
        std::ofstream df(final_dir / "drift.json");
        df << dj.dump(2) << "\n";
    }
    return art;
}

}  // namespace attndb
