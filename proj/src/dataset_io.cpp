#include "xroute/dataset_io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>

#include "xroute/error.hpp"

namespace xroute {

namespace {

constexpr std::size_t kHeaderBytes = 16;

class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

    void magic(std::string_view expected) {
        need(expected.size());
        if (std::memcmp(data_.data() + pos_, expected.data(), expected.size()) != 0) {
            throw ValidationError(what_ + ": bad magic, expected '" + std::string(expected) + "'");
        }
        pos_ += expected.size();
    }
    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }

    void version() {
        const auto v = u32();
        if (v != kFormatVersion) {
            throw ValidationError(what_ + ": unsupported version " + std::to_string(v));
        }
    }
    /// Rejects files whose payload size disagrees with the declared shape.
    void expect_remaining(std::uint64_t bytes) const {
        if (data_.size() - pos_ != bytes) {
            throw ValidationError(what_ + ": declared shape needs " + std::to_string(bytes) +
                                  " payload bytes, file has " + std::to_string(data_.size() - pos_));
        }
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw ValidationError(what_ + ": truncated file");
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::string what_;
};

/// a * b + c in 64 bits, or ValidationError on overflow.
std::uint64_t checked_size(std::uint64_t a, std::uint64_t b, std::uint64_t c, const std::string& what) {
    constexpr auto max = std::numeric_limits<std::uint64_t>::max();
    if (a != 0 && b > (max - c) / a) throw ValidationError(what + ": dimension overflow");
    return a * b + c;
}

std::uint32_t to_u32(std::size_t v, const std::string& what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw ValidationError(what + " exceeds u32 range");
    return static_cast<std::uint32_t>(v);
}

} // namespace

// ---------------------------------------------------------------------------
// validation

void validate(const EmbeddingMatrix& m) {
    if (m.data.rows() < 1 || m.data.cols() < 1) throw ValidationError("embedding matrix must be at least 1x1");
    if (m.example_ids.size() != m.data.rows()) {
        throw ValidationError("embedding matrix has " + std::to_string(m.data.rows()) + " rows but " +
                              std::to_string(m.example_ids.size()) + " example ids");
    }
    std::set<ExampleId> seen;
    for (ExampleId id : m.example_ids) {
        if (!seen.insert(id).second) throw ValidationError("duplicate example id " + std::to_string(id));
    }
    for (std::size_t r = 0; r < m.data.rows(); ++r) {
        for (std::size_t c = 0; c < m.data.cols(); ++c) {
            if (!std::isfinite(m.data(r, c))) {
                throw ValidationError("non-finite embedding value at row " + std::to_string(r) + ", col " +
                                      std::to_string(c));
            }
        }
    }
}

void validate(const TaskDataset& t) {
    if (t.class_labels.size() != t.example_ids.size()) {
        throw ValidationError("task has mismatched id and label counts");
    }
    std::set<ExampleId> seen;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t.class_labels[i] >= t.num_classes) {
            throw ValidationError("task label " + std::to_string(t.class_labels[i]) + " at row " +
                                  std::to_string(i) + " is outside [0, " + std::to_string(t.num_classes) + ")");
        }
        if (!seen.insert(t.example_ids[i]).second) {
            throw ValidationError("duplicate task example id " + std::to_string(t.example_ids[i]));
        }
    }
}

void validate(const ProbMatrix& p) {
    if (p.kind != ProbKind::categorical && p.kind != ProbKind::multilabel) {
        throw ValidationError("unknown probability matrix kind");
    }
    for (std::size_t r = 0; r < p.data.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < p.data.cols(); ++c) {
            const float v = p.data(r, c);
            if (!(v >= 0.0f && v <= 1.0f)) {
                throw ValidationError("probability at row " + std::to_string(r) + ", col " + std::to_string(c) +
                                      " is outside [0, 1]");
            }
            sum += v;
        }
        if (p.kind == ProbKind::categorical && std::abs(sum - 1.0) > 1e-6) {
            throw ValidationError("categorical row " + std::to_string(r) + " sums to " + std::to_string(sum));
        }
    }
}

// ---------------------------------------------------------------------------
// embeddings

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
    validate(m);
    ByteWriter w;
    w.bytes("XPRT");
    w.u32(kFormatVersion);
    w.u32(to_u32(m.data.rows(), "N"));
    w.u32(to_u32(m.data.cols(), "d"));
    for (ExampleId id : m.example_ids) w.u64(id);
    for (float v : m.data.values()) w.f32(v);
    return w.take();
}

EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes, ExpertId expert_id) {
    ByteReader r(bytes, "embedding file");
    r.magic("XPRT");
    r.version();
    const std::uint64_t n = r.u32();
    const std::uint64_t d = r.u32();
    r.expect_remaining(checked_size(n, 8 + checked_size(d, 4, 0, "embedding file"), 0, "embedding file"));
    EmbeddingMatrix m;
    m.expert_id = expert_id;
    m.example_ids.resize(n);
    for (auto& id : m.example_ids) id = r.u64();
    m.data = MatrixF(n, d);
    for (auto& v : m.data.values()) v = r.f32();
    validate(m);
    return m;
}

// ---------------------------------------------------------------------------
// tasks

std::vector<std::uint8_t> encode_task(const TaskDataset& t) {
    validate(t);
    ByteWriter w;
    w.bytes("TASK");
    w.u32(kFormatVersion);
    w.u32(to_u32(t.size(), "N_T"));
    w.u32(t.num_classes);
    for (std::size_t i = 0; i < t.size(); ++i) {
        w.u64(t.example_ids[i]);
        w.u32(t.class_labels[i]);
    }
    return w.take();
}

TaskDataset decode_task(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "task file");
    r.magic("TASK");
    r.version();
    const std::uint64_t n = r.u32();
    TaskDataset t;
    t.num_classes = r.u32();
    r.expect_remaining(checked_size(n, 12, 0, "task file"));
    t.example_ids.resize(n);
    t.class_labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        t.example_ids[i] = r.u64();
        t.class_labels[i] = r.u32();
    }
    validate(t);
    return t;
}

// ---------------------------------------------------------------------------
// probabilities

std::vector<std::uint8_t> encode_probs(const ProbMatrix& p) {
    validate(p);
    ByteWriter w;
    w.bytes("PROB");
    w.u32(kFormatVersion);
    w.u32(to_u32(p.data.rows(), "N"));
    w.u32(to_u32(p.data.cols(), "K"));
    w.u8(static_cast<std::uint8_t>(p.kind));
    for (float v : p.data.values()) w.f32(v);
    return w.take();
}

ProbMatrix decode_probs(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "prob file");
    r.magic("PROB");
    r.version();
    const std::uint64_t n = r.u32();
    const std::uint64_t k = r.u32();
    const auto kind = r.u8();
    if (kind > 1) throw ValidationError("prob file: unknown kind " + std::to_string(kind));
    r.expect_remaining(checked_size(n, checked_size(k, 4, 0, "prob file"), 0, "prob file"));
    ProbMatrix p;
    p.kind = static_cast<ProbKind>(kind);
    p.data = MatrixF(n, k);
    for (auto& v : p.data.values()) v = r.f32();
    validate(p);
    return p;
}

// ---------------------------------------------------------------------------
// files

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValidationError("write failed for " + path.string());
}

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
    write_file_bytes(path, encode_embeddings(m));
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path, ExpertId expert_id) {
    try {
        return decode_embeddings(read_file_bytes(path), expert_id);
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

ExpertId expert_id_from_filename(const std::filesystem::path& path) {
    const std::string stem = path.stem().string();
    std::size_t start = stem.size();
    while (start > 0 && std::isdigit(static_cast<unsigned char>(stem[start - 1]))) --start;
    if (start == stem.size()) {
        throw ValidationError("cannot derive an expert id from file name '" + path.filename().string() + "'");
    }
    return std::stoll(stem.substr(start));
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
    return read_embeddings(path, expert_id_from_filename(path));
}

std::vector<EmbeddingMatrix> read_embeddings_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
    std::map<ExpertId, std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".xprt") continue;
        const ExpertId id = expert_id_from_filename(entry.path());
        if (!files.emplace(id, entry.path()).second) {
            throw ValidationError("two embedding files for expert " + std::to_string(id) + " in " + dir.string());
        }
    }
    if (files.empty()) throw ValidationError("no .xprt files in " + dir.string());
    std::vector<EmbeddingMatrix> out;
    for (const auto& [id, path] : files) out.push_back(read_embeddings(path, id));
    return out;
}

void write_task(const TaskDataset& t, const std::filesystem::path& path) { write_file_bytes(path, encode_task(t)); }

TaskDataset read_task(const std::filesystem::path& path) {
    try {
        return decode_task(read_file_bytes(path));
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void write_probs(const ProbMatrix& p, const std::filesystem::path& path) { write_file_bytes(path, encode_probs(p)); }

ProbMatrix read_probs(const std::filesystem::path& path) {
    try {
        return decode_probs(read_file_bytes(path));
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

} // namespace xroute
