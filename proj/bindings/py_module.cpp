// Python surface over the C++ core: schedule introspection, the map
// regularizer, noising, the toy backend, metrics and a one-call training
// driver. Images cross the boundary as (h, w, c) float64 arrays.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>

#include "attndb/attention_maps.hpp"
#include "attndb/backend.hpp"
#include "attndb/common.hpp"
#include "attndb/concept_tokens.hpp"
#include "attndb/data_pipeline.hpp"
#include "attndb/evaluation.hpp"
#include "attndb/fingerprint.hpp"
#include "attndb/image_io.hpp"
#include "attndb/objectives.hpp"
#include "attndb/run_config.hpp"
#include "attndb/trainer.hpp"

namespace py = pybind11;
using namespace attndb;

namespace {

Grid grid_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 3) throw std::invalid_argument("expected an (h, w, c) array");
    const auto r = arr.unchecked<3>();
    Grid g = Grid::zeros(static_cast<int>(r.shape(0)), static_cast<int>(r.shape(1)),
                         static_cast<int>(r.shape(2)));
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
            for (int c = 0; c < g.c; ++c) g.at(y, x, c) = r(y, x, c);
    return g;
}

py::array_t<double> array_from_grid(const Grid& g) {
    py::array_t<double> out({g.h, g.w, g.c});
    auto r = out.mutable_unchecked<3>();
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
            for (int c = 0; c < g.c; ++c) r(y, x, c) = g.at(y, x, c);
    return out;
}

std::vector<Grid> grids_from_list(const py::sequence& seq) {
    std::vector<Grid> out;
    for (const auto& item : seq) out.push_back(grid_from_array(py::cast<py::array_t<double>>(item)));
    return out;
}

// Layers as (locations x tokens) matrices; square shapes inferred unless
// given. Roles: "V" at v_pos, "category" at category_pos, positional rest.
AttentionMapSet mapset_from_py(const std::vector<Eigen::MatrixXd>& layers,
                               const std::optional<std::vector<std::pair<int, int>>>& shapes,
                               int v_pos, int category_pos) {
    if (layers.empty()) throw std::invalid_argument("no layers given");
    AttentionMapSet maps;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        AttentionRecord rec;
        rec.layer_id = static_cast<int>(l);
        if (shapes) {
            rec.height = (*shapes)[l].first;
            rec.width = (*shapes)[l].second;
        } else {
            const int side = static_cast<int>(std::lround(std::sqrt(double(layers[l].rows()))));
            if (side * side != layers[l].rows())
                throw std::invalid_argument("non-square layer; pass shapes explicitly");
            rec.height = rec.width = side;
        }
        if (rec.height * rec.width != layers[l].rows())
            throw std::invalid_argument("shape does not match layer rows");
        rec.values = layers[l];
        maps.layers.push_back(std::move(rec));
    }
    const int tokens = static_cast<int>(layers[0].cols());
    for (int i = 0; i < tokens; ++i) {
        maps.token_index.tokens.push_back("t" + std::to_string(i));
        if (i == v_pos)
            maps.token_index.roles["V"] = i;
        else if (i == category_pos)
            maps.token_index.roles["category"] = i;
        else
            maps.token_index.roles["pos:" + std::to_string(i)] = i;
    }
    return maps;
}

py::dict plan_to_dict(const StagePlan& p) {
    py::dict d;
    d["stage_id"] = p.stage_id;
    d["scope"] = scope_name(p.scope);
    d["learning_rate"] = p.learning_rate;
    d["steps"] = p.steps;
    d["lambda_mu"] = p.reg_weights.lambda_mu;
    d["lambda_sigma"] = p.reg_weights.lambda_sigma;
    d["batch_size"] = p.batch_size;
    return d;
}

class PyToyBackend {
public:
    PyToyBackend(std::uint64_t seed, const ToyConfig& config)
        : backend_(toy_backend(config, seed)), config_(config) {}

    py::tuple tokenize(const std::string& text) const {
        const TokenizedPrompt p = backend_->tokenize(text);
        return py::make_tuple(p.ids, p.tokens);
    }
    bool has_token(const std::string& t) const { return backend_->has_token(t); }
    int token_id(const std::string& t) const { return backend_->token_id(t); }
    int vocab_size() const { return backend_->vocab_size(); }
    int embedding_dim() const { return backend_->embedding_dim(); }
    int input_resolution() const { return backend_->input_resolution(); }
    int latent_channels() const { return backend_->latent_channels(); }
    Eigen::VectorXd embedding_row(int id) const { return backend_->embedding_row(id); }
    Eigen::MatrixXd encode_text(const std::vector<int>& ids) const {
        return backend_->encode_text(ids);
    }
    int add_concept(const std::string& placeholder, const std::string& category) {
        ConceptSpec spec;
        spec.concept_id = placeholder;
        spec.placeholder = placeholder;
        spec.super_category = category;
        return inject_concept_token(*backend_, spec).token_id;
    }
    std::vector<std::string> group_names() const { return backend_->group_names(); }
    std::string fingerprint(const std::string& group) const {
        return fingerprint_params(group, backend_->group_params(group)).digest;
    }
    py::list sample(const std::string& prompt, int n, std::uint64_t seed) {
        const TokenizedPrompt p = backend_->tokenize(prompt);
        const Eigen::MatrixXd cond = backend_->encode_text(p.ids);
        std::mt19937_64 rng = make_rng(seed, "py/sample");
        py::list out;
        for (const Grid& latent : ddpm_sample(*backend_, cond, n, rng))
            out.append(array_from_grid(backend_->decode_latent(latent)));
        return out;
    }

    Backend& backend() { return *backend_; }

private:
    std::unique_ptr<Backend> backend_;
    ToyConfig config_;
};

py::dict train_run(const std::string& config_path) {
    const RunConfig cfg = parse_run_config(config_path);
    std::unique_ptr<Backend> backend;
    if (cfg.backend == "toy")
        backend = toy_backend(cfg.toy, cfg.seed);
    else
        backend = pretrained_adapter(cfg.weights_path);
    const ImageSet images = load_concept_images(cfg.concept_spec.image_dir);

    TrainerOptions options;
    options.run_dir = cfg.output_dir;
    options.seed = cfg.seed;
    options.hflip = cfg.hflip;

    const TrainedArtifacts art = run_full({cfg.schedule.begin(), cfg.schedule.end()}, *backend,
                                          cfg.concept_spec, images, options);

    py::dict out;
    out["run_dir"] = art.run_dir.string();
    out["placeholder_token_id"] = art.handle.token_id;
    py::dict stages;
    long total_steps = 0;
    for (const StageResult& s : art.stages) {
        py::dict sd;
        sd["steps"] = static_cast<long>(s.logs.size());
        sd["first_diffusion_loss"] = s.logs.front().diffusion_loss;
        sd["last_diffusion_loss"] = s.logs.back().diffusion_loss;
        sd["wall_seconds"] = s.wall_seconds;
        stages[py::str(s.plan.stage_id)] = sd;
        total_steps += static_cast<long>(s.logs.size());
    }
    out["stages"] = stages;
    out["total_steps"] = total_steps;
    out["embedding_drift"] =
        embedding_drift(art.initial_embedding, art.stages.back().embedding_after);
    py::dict fps;
    for (const auto& [g, fp] : art.final_fingerprints) fps[py::str(g)] = fp.digest;
    out["fingerprints"] = fps;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "staged personalization trainer for latent diffusion (toy-scale core)";
    m.attr("__version__") = "0.1.0";

    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            const std::string msg = std::string(error_code_name(e.code())) + ": " + e.what();
            PyErr_SetString(PyExc_RuntimeError, msg.c_str());
        }
    });

    m.def("default_schedule", [] {
        py::list out;
        for (const StagePlan& p : default_schedule()) out.append(plan_to_dict(p));
        return out;
    });
    m.def("baseline_plan", [] { return plan_to_dict(baseline_plan()); });

    m.def("load_prompt_suite", [] { return load_prompt_suite().templates; });
    m.def("suite_hash",
          [](const std::vector<std::string>& templates) { return suite_hash({templates}); });
    m.def("render_prompt", &render_prompt, py::arg("template"), py::arg("placeholder"),
          py::arg("category"));

    m.def(
        "diffusion_loss",
        [](const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& target) {
            return diffusion_loss({predicted, target});
        },
        py::arg("predicted"), py::arg("target"));

    m.def(
        "attention_reg_loss",
        [](const std::vector<Eigen::MatrixXd>& layers, int v_pos, int category_pos,
           double lambda_mu, double lambda_sigma,
           const std::optional<std::vector<std::pair<int, int>>>& shapes, bool per_layer_mean) {
            const AttentionMapSet maps = mapset_from_py(layers, shapes, v_pos, category_pos);
            return attention_reg_loss(
                maps, {lambda_mu, lambda_sigma},
                per_layer_mean ? PoolingMode::kPerLayerMean : PoolingMode::kConcat);
        },
        py::arg("layers"), py::arg("v_pos"), py::arg("category_pos"), py::arg("lambda_mu"),
        py::arg("lambda_sigma"), py::arg("shapes") = std::nullopt,
        py::arg("per_layer_mean") = false);

    m.def(
        "pooled_stats",
        [](const std::vector<Eigen::MatrixXd>& layers, int pos,
           const std::optional<std::vector<std::pair<int, int>>>& shapes, bool per_layer_mean) {
            const AttentionMapSet maps = mapset_from_py(layers, shapes, pos, -1);
            const PooledStats s = pooled_stats(
                maps, "V", per_layer_mean ? PoolingMode::kPerLayerMean : PoolingMode::kConcat);
            return py::make_tuple(s.mean, s.variance);
        },
        py::arg("layers"), py::arg("pos"), py::arg("shapes") = std::nullopt,
        py::arg("per_layer_mean") = false);

    m.def(
        "aggregate_heatmap",
        [](const std::vector<Eigen::MatrixXd>& layers, int pos, int out_resolution,
           const std::optional<std::vector<std::pair<int, int>>>& shapes) {
            return aggregate_heatmap(mapset_from_py(layers, shapes, pos, -1), "V",
                                     out_resolution);
        },
        py::arg("layers"), py::arg("pos"), py::arg("out_resolution"),
        py::arg("shapes") = std::nullopt);

    m.def(
        "add_noise",
        [](const py::array_t<double>& z0, int t, const py::array_t<double>& eps, int timesteps,
           double beta_start, double beta_end) {
            const NoiseSchedule sched = NoiseSchedule::linear(timesteps, beta_start, beta_end);
            return array_from_grid(add_noise(grid_from_array(z0), t, grid_from_array(eps), sched));
        },
        py::arg("z0"), py::arg("t"), py::arg("eps"), py::arg("timesteps") = 100,
        py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);

    m.def(
        "toy_identity_score",
        [](const py::sequence& generated, const py::sequence& reference, std::uint64_t seed,
           int dim) {
            const ToyEmbedder embedder(seed, dim);
            return identity_score(grids_from_list(generated), grids_from_list(reference),
                                  embedder);
        },
        py::arg("generated"), py::arg("reference"), py::arg("seed") = 0, py::arg("dim") = 32);

    m.def(
        "toy_text_alignment_score",
        [](const py::sequence& generated, const std::string& prompt, std::uint64_t seed,
           int dim) {
            const ToyEmbedder embedder(seed, dim);
            return text_alignment_score(grids_from_list(generated), prompt, embedder);
        },
        py::arg("generated"), py::arg("prompt"), py::arg("seed") = 0, py::arg("dim") = 32);

    m.def(
        "write_png",
        [](const std::filesystem::path& path, const py::array_t<double>& image) {
            write_rgb_png(path, grid_from_array(image));
        },
        py::arg("path"), py::arg("image"));

    m.def("sha256_hex", [](const std::string& data) { return sha256_hex(data); });

    py::class_<ToyConfig>(m, "ToyConfig")
        .def(py::init([](int resolution, int latent_channels, int model_dim, int token_dim,
                         int vocab_size, int heads, int blocks, int timesteps, double beta_start,
                         double beta_end, int max_prompt_len) {
                 ToyConfig c;
                 c.resolution = resolution;
                 c.latent_channels = latent_channels;
                 c.model_dim = model_dim;
                 c.token_dim = token_dim;
                 c.vocab_size = vocab_size;
                 c.heads = heads;
                 c.blocks = blocks;
                 c.timesteps = timesteps;
                 c.beta_start = beta_start;
                 c.beta_end = beta_end;
                 c.max_prompt_len = max_prompt_len;
                 return c;
             }),
             py::arg("resolution") = 16, py::arg("latent_channels") = 4,
             py::arg("model_dim") = 16, py::arg("token_dim") = 16, py::arg("vocab_size") = 64,
             py::arg("heads") = 1, py::arg("blocks") = 2, py::arg("timesteps") = 100,
             py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02,
             py::arg("max_prompt_len") = 32)
        .def_readwrite("resolution", &ToyConfig::resolution)
        .def_readwrite("timesteps", &ToyConfig::timesteps);

    py::class_<PyToyBackend>(m, "ToyBackend")
        .def(py::init<std::uint64_t, const ToyConfig&>(), py::arg("seed") = 0,
             py::arg("config") = ToyConfig{})
        .def("tokenize", &PyToyBackend::tokenize)
        .def("has_token", &PyToyBackend::has_token)
        .def("token_id", &PyToyBackend::token_id)
        .def("vocab_size", &PyToyBackend::vocab_size)
        .def("embedding_dim", &PyToyBackend::embedding_dim)
        .def("input_resolution", &PyToyBackend::input_resolution)
        .def("latent_channels", &PyToyBackend::latent_channels)
        .def("embedding_row", &PyToyBackend::embedding_row)
        .def("encode_text", &PyToyBackend::encode_text)
        .def("add_concept", &PyToyBackend::add_concept, py::arg("placeholder"),
             py::arg("category"))
        .def("group_names", &PyToyBackend::group_names)
        .def("fingerprint", &PyToyBackend::fingerprint)
        .def("sample", &PyToyBackend::sample, py::arg("prompt"), py::arg("n") = 1,
             py::arg("seed") = 0);

    m.def("train_run", &train_run, py::arg("config_path"),
          "Parse a run config, train the full schedule and return a summary dict.");
}
