#include "attndb/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "attndb/common.hpp"
#include "attndb/fingerprint.hpp"

namespace attndb {
namespace {

constexpr char kMagic[8] = {'A', 'T', 'D', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kKindTensor = 0;
constexpr std::uint32_t kKindEmbeddingRow = 1;

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) fail(ErrorCode::IoFailure, "truncated checkpoint: " + path.string());
    return v;
}

void write_matrix_f32(std::ofstream& out, const Eigen::MatrixXd& m) {
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            write_pod<float>(out, static_cast<float>(m(i, j)));
}

Eigen::MatrixXd read_matrix_f32(std::ifstream& in, const std::filesystem::path& path) {
    const auto rows = read_pod<std::uint64_t>(in, path);
    const auto cols = read_pod<std::uint64_t>(in, path);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = static_cast<double>(read_pod<float>(in, path));
    return m;
}

void write_string(std::ofstream& out, const std::string& s) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in, const std::filesystem::path& path) {
    const auto n = read_pod<std::uint32_t>(in, path);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) fail(ErrorCode::IoFailure, "truncated checkpoint: " + path.string());
    return s;
}

Eigen::MatrixXd* find_param(Backend& backend, const std::string& name) {
    for (const std::string& group : backend.group_names())
        for (const NamedParam& p : backend.group_params(group))
            if (p.name == name) return p.value;
    return nullptr;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Backend& backend,
                     const std::vector<std::string>& groups,
                     const std::vector<int>& embedding_rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kVersion);

    std::uint32_t count = static_cast<std::uint32_t>(embedding_rows.size());
    std::vector<NamedParam> tensors;
    for (const std::string& g : groups)
        for (const NamedParam& p : backend.group_params(g)) {
            tensors.push_back(p);
            ++count;
        }
    write_pod<std::uint32_t>(out, count);

    for (const NamedParam& p : tensors) {
        write_string(out, p.name);
        write_pod<std::uint32_t>(out, kKindTensor);
        write_pod<std::int32_t>(out, -1);
        write_matrix_f32(out, *p.value);
    }
    for (int id : embedding_rows) {
        write_string(out, "token_embeddings.table");
        write_pod<std::uint32_t>(out, kKindEmbeddingRow);
        write_pod<std::int32_t>(out, id);
        const Eigen::MatrixXd row = backend.embedding_row(id).transpose();
        write_matrix_f32(out, row);
    }
    if (!out) fail(ErrorCode::IoFailure, "write failed: " + path.string());
}

void apply_checkpoint(const std::filesystem::path& path, Backend& backend) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingArtifacts, "cannot read " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        fail(ErrorCode::IoFailure, "not a checkpoint: " + path.string());
    const auto version = read_pod<std::uint32_t>(in, path);
    if (version != kVersion)
        fail(ErrorCode::IoFailure, "unsupported checkpoint version " + std::to_string(version));

    const auto count = read_pod<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = read_string(in, path);
        const auto kind = read_pod<std::uint32_t>(in, path);
        const auto row_id = read_pod<std::int32_t>(in, path);
        const Eigen::MatrixXd m = read_matrix_f32(in, path);
        if (kind == kKindTensor) {
            Eigen::MatrixXd* target = find_param(backend, name);
            if (target == nullptr)
                fail(ErrorCode::MissingArtifacts, "checkpoint tensor has no target: " + name);
            if (target->rows() != m.rows() || target->cols() != m.cols())
                fail(ErrorCode::ShapeMismatch, "checkpoint tensor shape mismatch: " + name);
            *target = m;
        } else if (kind == kKindEmbeddingRow) {
            if (m.rows() != 1) fail(ErrorCode::IoFailure, "embedding row blob must have 1 row");
            backend.set_embedding_row(row_id, m.row(0).transpose());
        } else {
            fail(ErrorCode::IoFailure, "unknown checkpoint record kind");
        }
    }
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingArtifacts, "cannot read " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        fail(ErrorCode::IoFailure, "not a checkpoint: " + path.string());
    CheckpointInfo info;
    info.version = read_pod<std::uint32_t>(in, path);
    const auto count = read_pod<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = read_string(in, path);
        const auto kind = read_pod<std::uint32_t>(in, path);
        const auto row_id = read_pod<std::int32_t>(in, path);
        const auto rows = read_pod<std::uint64_t>(in, path);
        const auto cols = read_pod<std::uint64_t>(in, path);
        in.seekg(static_cast<std::streamoff>(rows * cols * sizeof(float)), std::ios::cur);
        if (kind == kKindEmbeddingRow)
            info.embedding_rows.push_back(row_id);
        else
            info.tensors.push_back(name);
    }
    return info;
}

}  // namespace attndb
