#pragma once

// Weight bundle container:
//
//   offset 0   magic        8 bytes, "STRCINIT"
//   offset 8   version      u32 little-endian (currently 1)
//   offset 12  header_len   u64 little-endian
//   offset 20  header       UTF-8 JSON, header_len bytes, space-padded so the
//                           payload starts on an 8-byte boundary
//   payload    raw little-endian scalars; each tensor starts at a multiple of 8
//              bytes from the payload start
//
// Header keys: "bundle_spec", "solver_config", "heads" (per-head offset, loss and
// match rate) and "tensors" (name, dtype, shape, offset, length). Tensor offsets
// are relative to the payload start, lengths are in bytes.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "attention.hpp"
#include "linalg.hpp"
#include "solver.hpp"

namespace structinit {

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
public:
    IoError(const std::string& path, const std::string& what) : std::runtime_error(path + ": " + what), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

enum class BundleErrorKind {
    bad_magic,
    unknown_version,
    header_short,
    bad_header,
    overlapping_offsets,
    payload_short,
};

inline std::string_view to_string(BundleErrorKind k) {
    switch (k) {
        case BundleErrorKind::bad_magic: return "bad magic";
        case BundleErrorKind::unknown_version: return "unknown version";
        case BundleErrorKind::header_short: return "header short";
        case BundleErrorKind::bad_header: return "bad header";
        case BundleErrorKind::overlapping_offsets: return "overlapping offsets";
        case BundleErrorKind::payload_short: return "payload short";
    }
    return "?";
}

/// Malformed bundle contents.
class BundleError : public std::runtime_error {
public:
    BundleError(BundleErrorKind kind, const std::string& detail)
        : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
    BundleErrorKind kind() const noexcept { return kind_; }

private:
    BundleErrorKind kind_;
};

enum class DType { f64, f32 };

inline std::string_view to_string(DType d) { return d == DType::f64 ? "f64" : "f32"; }
inline std::size_t dtype_size(DType d) { return d == DType::f64 ? 8 : 4; }

inline constexpr char kBundleMagic[8] = {'S', 'T', 'R', 'C', 'I', 'N', 'I', 'T'};
inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::size_t kPreambleSize = 20;

inline std::string tensor_name(std::size_t layer, std::size_t head, char which) {
    return "layer" + std::to_string(layer) + ".head" + std::to_string(head) + "." + which;
}

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, std::size_t bytes) {
    for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(const std::string& in, std::size_t pos, std::size_t bytes) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

inline std::size_t align8(std::size_t v) { return (v + 7) & ~std::size_t{7}; }

inline nlohmann::json spec_to_json(const BundleSpec& s) {
    return {{"layers", s.layers},
            {"heads", s.heads},
            {"dim", s.dim},
            {"grid", {s.grid.height, s.grid.width}},
            {"filter_size", s.filter_size},
            {"padding", to_string(s.padding)},
            {"sharing", to_string(s.sharing)},
            {"pseudo_first", to_string(s.pseudo_first)},
            {"pseudo_rest", to_string(s.pseudo_rest)}};
}

inline BundleSpec spec_from_json(const nlohmann::json& j) {
    BundleSpec s;
    s.layers = j.at("layers").get<std::size_t>();
    s.heads = j.at("heads").get<std::size_t>();
    s.dim = j.at("dim").get<std::size_t>();
    s.grid = GridShape(j.at("grid").at(0).get<std::size_t>(), j.at("grid").at(1).get<std::size_t>());
    s.filter_size = j.at("filter_size").get<std::size_t>();
    s.padding = parse_padding(j.at("padding").get<std::string>());
    s.sharing = parse_sharing(j.at("sharing").get<std::string>());
    s.pseudo_first = parse_pseudo_kind(j.at("pseudo_first").get<std::string>());
    s.pseudo_rest = parse_pseudo_kind(j.at("pseudo_rest").get<std::string>());
    return s;
}

inline nlohmann::json config_to_json(const SolverConfig& c) {
    nlohmann::json j = {{"lr", c.lr},
                        {"max_iter", c.max_iter},
                        {"adam_beta1", c.adam_beta1},
                        {"adam_beta2", c.adam_beta2},
                        {"adam_eps", c.adam_eps},
                        {"init_std", c.init_std},
                        {"seed", c.seed},
                        {"early_stop_loss", nullptr}};
    if (c.early_stop_loss) j["early_stop_loss"] = *c.early_stop_loss;
    return j;
}

inline SolverConfig config_from_json(const nlohmann::json& j) {
    SolverConfig c;
    c.lr = j.at("lr").get<double>();
    c.max_iter = j.at("max_iter").get<std::size_t>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.init_std = j.at("init_std").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (!j.at("early_stop_loss").is_null()) c.early_stop_loss = j.at("early_stop_loss").get<double>();
    return c;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path, "cannot open for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError(path, "read failed");
    return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path, "cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError(path, "write failed");
}

}  // namespace detail

/// Serializes a solved bundle. f32 narrows each scalar with round-to-nearest-even.
inline std::string encode_bundle(const InitBundle& bundle, DType dtype = DType::f64) {
    const auto& spec = bundle.spec;
    if (bundle.layers.size() != spec.layers) throw std::invalid_argument("encode_bundle: layer count differs from spec");

    nlohmann::json heads = nlohmann::json::array();
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    for (std::size_t l = 0; l < bundle.layers.size(); ++l) {
        if (bundle.layers[l].size() != spec.heads) throw std::invalid_argument("encode_bundle: head count differs from spec");
        for (std::size_t h = 0; h < spec.heads; ++h) {
            const auto& r = bundle.layers[l][h];
            nlohmann::json entry = {{"layer", l},
                                    {"head", h},
                                    {"final_loss", r.final_loss},
                                    {"argmax_match_rate", r.argmax_match_rate},
                                    {"iterations_run", r.iterations_run},
                                    {"offset", nullptr}};
            if (r.target_offset) entry["offset"] = {r.target_offset->di, r.target_offset->dj};
            heads.push_back(std::move(entry));

            for (char which : {'q', 'k'}) {
                const DenseMatrix& m = which == 'q' ? r.params.q : r.params.k;
                const std::size_t offset = payload.size();
                for (double v : m.data()) {
                    if (dtype == DType::f64) {
                        detail::put_le(payload, std::bit_cast<std::uint64_t>(v), 8);
                    } else {
                        detail::put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
                    }
                }
                const std::size_t length = payload.size() - offset;
                payload.resize(detail::align8(payload.size()), '\0');
                tensors.push_back({{"name", tensor_name(l, h, which)},
                                   {"dtype", to_string(dtype)},
                                   {"shape", {m.rows(), m.cols()}},
                                   {"offset", offset},
                                   {"length", length}});
            }
        }
    }

    nlohmann::json header = {{"bundle_spec", detail::spec_to_json(spec)},
                             {"solver_config", detail::config_to_json(bundle.config)},
                             {"heads", std::move(heads)},
                             {"tensors", std::move(tensors)}};
    std::string header_text = header.dump();
    header_text.resize(detail::align8(kPreambleSize + header_text.size()) - kPreambleSize, ' ');

    std::string out(kBundleMagic, sizeof(kBundleMagic));
    detail::put_le(out, kBundleVersion, 4);
    detail::put_le(out, header_text.size(), 8);
    out += header_text;
    out += payload;
    return out;
}

inline InitBundle decode_bundle(const std::string& bytes) {
    if (bytes.size() < kPreambleSize) throw BundleError(BundleErrorKind::header_short, "file shorter than preamble");
    if (std::memcmp(bytes.data(), kBundleMagic, sizeof(kBundleMagic)) != 0)
        throw BundleError(BundleErrorKind::bad_magic, "expected STRCINIT");
    const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
    if (version != kBundleVersion) throw BundleError(BundleErrorKind::unknown_version, "version " + std::to_string(version));
    const std::uint64_t header_len = detail::get_le(bytes, 12, 8);
    if (header_len > bytes.size() - kPreambleSize)
        throw BundleError(BundleErrorKind::header_short, "header length " + std::to_string(header_len) + " exceeds file");
    const std::size_t payload_start = kPreambleSize + static_cast<std::size_t>(header_len);
    const std::size_t payload_size = bytes.size() - payload_start;

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + kPreambleSize, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
    } catch (const nlohmann::json::exception& e) {
        throw BundleError(BundleErrorKind::bad_header, e.what());
    }

    InitBundle bundle;
    struct Entry {
        DType dtype;
        std::size_t rows, cols, offset, length;
    };
    std::map<std::string, Entry> table;
    try {
        bundle.spec = detail::spec_from_json(header.at("bundle_spec"));
        bundle.config = detail::config_from_json(header.at("solver_config"));
        for (const auto& t : header.at("tensors")) {
            const auto dtype_name = t.at("dtype").get<std::string>();
            if (dtype_name != "f64" && dtype_name != "f32") throw BundleError(BundleErrorKind::bad_header, "dtype " + dtype_name);
            Entry e{dtype_name == "f64" ? DType::f64 : DType::f32, t.at("shape").at(0).get<std::size_t>(),
                    t.at("shape").at(1).get<std::size_t>(), t.at("offset").get<std::size_t>(),
                    t.at("length").get<std::size_t>()};
            const auto name = t.at("name").get<std::string>();
            if (e.length != e.rows * e.cols * dtype_size(e.dtype))
                throw BundleError(BundleErrorKind::bad_header, name + ": length does not match shape");
            if (e.offset % 8 != 0) throw BundleError(BundleErrorKind::bad_header, name + ": offset not 8-byte aligned");
            if (!table.emplace(name, e).second) throw BundleError(BundleErrorKind::bad_header, "duplicate tensor " + name);
        }
    } catch (const nlohmann::json::exception& e) {
        throw BundleError(BundleErrorKind::bad_header, e.what());
    } catch (const std::invalid_argument& e) {
        throw BundleError(BundleErrorKind::bad_header, e.what());
    }

    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& [name, e] : table) spans.emplace_back(e.offset, e.offset + e.length);
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
        if (spans[i].first < spans[i - 1].second)
            throw BundleError(BundleErrorKind::overlapping_offsets, "tensor at byte " + std::to_string(spans[i].first));
    for (const auto& [name, e] : table)
        if (e.offset + e.length > payload_size)
            throw BundleError(BundleErrorKind::payload_short, name + " ends at byte " + std::to_string(e.offset + e.length) +
                                                                  " of a " + std::to_string(payload_size) + "-byte payload");

    auto load = [&](const std::string& name) {
        auto it = table.find(name);
        if (it == table.end()) throw BundleError(BundleErrorKind::bad_header, "missing tensor " + name);
        const Entry& e = it->second;
        DenseMatrix m(e.rows, e.cols);
        const std::size_t width = dtype_size(e.dtype);
        auto data = m.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const std::uint64_t raw = detail::get_le(bytes, payload_start + e.offset + i * width, width);
            data[i] = e.dtype == DType::f64 ? std::bit_cast<double>(raw)
                                            : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(raw)));
        }
        return m;
    };

    try {
        bundle.spec.validate();
        bundle.layers.assign(bundle.spec.layers, std::vector<HeadInitResult>(bundle.spec.heads));
        for (const auto& h : header.at("heads")) {
            const auto l = h.at("layer").get<std::size_t>();
            const auto hd = h.at("head").get<std::size_t>();
            if (l >= bundle.spec.layers || hd >= bundle.spec.heads)
                throw BundleError(BundleErrorKind::bad_header, "head entry out of range");
            auto& r = bundle.layers[l][hd];
            r.final_loss = h.at("final_loss").get<double>();
            r.argmax_match_rate = h.at("argmax_match_rate").get<double>();
            r.iterations_run = h.at("iterations_run").get<std::size_t>();
            if (!h.at("offset").is_null()) r.target_offset = ImpulseOffset{h.at("offset").at(0).get<int>(), h.at("offset").at(1).get<int>()};
        }
        for (std::size_t l = 0; l < bundle.spec.layers; ++l) {
            for (std::size_t hd = 0; hd < bundle.spec.heads; ++hd) {
                auto& r = bundle.layers[l][hd];
                r.params = AttentionHeadParams(load(tensor_name(l, hd, 'q')), load(tensor_name(l, hd, 'k')));
                if (r.params.q.rows() != bundle.spec.dim || r.params.q.cols() != head_dim(bundle.spec.dim, bundle.spec.heads))
                    throw BundleError(BundleErrorKind::bad_header, tensor_name(l, hd, 'q') + ": unexpected shape");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw BundleError(BundleErrorKind::bad_header, e.what());
    } catch (const std::invalid_argument& e) {
        throw BundleError(BundleErrorKind::bad_header, e.what());
    }
    return bundle;
}

inline void write_bundle(const InitBundle& bundle, const std::string& path, DType dtype = DType::f64) {
    detail::write_file(path, encode_bundle(bundle, dtype));
}

inline InitBundle read_bundle(const std::string& path) { return decode_bundle(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Images and text dumps
// ---------------------------------------------------------------------------

/// 8-bit grayscale with each pixel = round(255 · entry / row max).
inline std::vector<std::uint8_t> attention_pixels(const DenseMatrix& map) {
    std::vector<std::uint8_t> px(map.size(), 0);
    for (std::size_t r = 0; r < map.rows(); ++r) {
        auto row = map.row(r);
        const double mx = row.empty() ? 0.0 : *std::max_element(row.begin(), row.end());
        if (!(mx > 0.0)) continue;
        for (std::size_t c = 0; c < row.size(); ++c) {
            const double v = std::clamp(std::round(255.0 * row[c] / mx), 0.0, 255.0);
            px[r * map.cols() + c] = static_cast<std::uint8_t>(v);
        }
    }
    return px;
}

/// Binary PGM (P5), maxval 255.
inline void render_attention_pgm(const AttentionMap& map, const std::string& path) {
    const auto px = attention_pixels(map.matrix);
    std::string bytes = "P5\n" + std::to_string(map.matrix.cols()) + " " + std::to_string(map.matrix.rows()) + "\n255\n";
    bytes.append(px.begin(), px.end());
    detail::write_file(path, bytes);
}

/// One row per line, comma-separated, "%.17e", no quoting.
inline std::string format_csv(const DenseMatrix& m) {
    std::string out;
    char buf[64];
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.17e", m(r, c));
            if (c) out.push_back(',');
            out += buf;
        }
        out.push_back('\n');
    }
    return out;
}

inline void write_csv(const DenseMatrix& m, const std::string& path) { detail::write_file(path, format_csv(m)); }

inline DenseMatrix parse_csv(const std::string& text) {
    std::vector<double> values;
    std::size_t rows = 0, cols = 0;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::size_t count = 0;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const std::size_t end = std::min(line.find(',', pos), line.size());
            const std::string cell = line.substr(pos, end - pos);
            char* stop = nullptr;
            const double v = std::strtod(cell.c_str(), &stop);
            if (stop == cell.c_str() || std::string_view(stop).find_first_not_of(" \t") != std::string_view::npos)
                throw std::invalid_argument("csv: cannot parse '" + cell + "' on row " + std::to_string(rows + 1));
            values.push_back(v);
            ++count;
            pos = end + 1;
        }
        if (rows == 0) cols = count;
        else if (count != cols) throw std::invalid_argument("csv: row " + std::to_string(rows + 1) + " has " +
                                                            std::to_string(count) + " fields, expected " + std::to_string(cols));
        ++rows;
    }
    return DenseMatrix(rows, cols, std::move(values));
}

inline DenseMatrix read_csv(const std::string& path) { return parse_csv(detail::read_file(path)); }

}  // namespace structinit
