#pragma once

// File formats: the little-endian binary container (FGV1 parameters, FGT1
// trajectories), CSV maps and series, PGM heatmaps and JSON sidecars.

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowgrad/adjoint.hpp"
#include "flowgrad/core.hpp"
#include "flowgrad/interpolation.hpp"
#include "flowgrad/mlp.hpp"
#include "flowgrad/quantities.hpp"
#include "flowgrad/sampler.hpp"

namespace flowgrad::io {

using json = nlohmann::ordered_json;

class IoError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Binary container: 4-byte magic, uint32 header words, then float64 payload,
// all little-endian.

class BinaryWriter {
public:
    explicit BinaryWriter(std::string_view magic) { bytes_.insert(bytes_.end(), magic.begin(), magic.end()); }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void f64(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
    }
    void f64s(std::span<const double> v) {
        for (double d : v) f64(d);
    }
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
        if (!out) throw IoError("write failed: " + path.string());
    }

    const std::vector<char>& bytes() const { return bytes_; }

private:
    std::vector<char> bytes_;
};

class BinaryReader {
public:
    BinaryReader(const std::filesystem::path& path, std::string_view magic) : name_(path.string()) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + name_);
        bytes_.assign(std::istreambuf_iterator<char>(in), {});
        if (bytes_.size() < 4 || std::string_view(bytes_.data(), 4) != magic)
            throw IoError(name_ + ": missing '" + std::string(magic) + "' magic");
        pos_ = 4;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(v);
    }
    Vec f64s(std::size_t n) {
        need(8 * n);
        Vec v(n);
        for (double& d : v) d = f64();
        return v;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void expect_end() const {
        if (pos_ != bytes_.size()) throw IoError(name_ + ": trailing bytes after payload");
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw IoError(name_ + ": truncated file");
    }
    std::string name_;
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

/// "FGV1", uint32 layer count L, L+1 uint32 widths, then per layer the
/// row-major (out x in) weights followed by the biases.
inline void write_mlp(const std::filesystem::path& path, const Mlp& net) {
    BinaryWriter w("FGV1");
    w.u32(static_cast<std::uint32_t>(net.layers().size()));
    for (auto width : net.widths()) w.u32(static_cast<std::uint32_t>(width));
    for (const auto& l : net.layers()) {
        w.f64s(l.weight.data);
        w.f64s(l.bias);
    }
    w.save(path);
}

/// Reads parameters as stored; finiteness is left to the caller to judge.
inline Mlp read_mlp(const std::filesystem::path& path) {
    BinaryReader r(path, "FGV1");
    const auto n_layers = r.u32();
    if (n_layers == 0 || n_layers > 64) throw IoError(path.string() + ": implausible layer count");
    std::vector<std::size_t> widths;
    for (std::uint32_t i = 0; i <= n_layers; ++i) {
        widths.push_back(r.u32());
        if (widths.back() == 0 || widths.back() > (1u << 20)) throw IoError(path.string() + ": implausible width");
    }
    Mlp net(widths);
    for (auto& l : net.layers()) {
        l.weight.data = r.f64s(l.weight.data.size());
        l.bias = r.f64s(l.bias.size());
    }
    r.expect_end();
    return net;
}

/// "FGT1" header words: n_levels, solver (0 euler, 1 heun), stored flag,
/// state rank + dims, c rank + dims, scalar count + one name length each;
/// then the scalar names' bytes; then float64: rho, sigma_min, sigma_max,
/// levels, initial state, final state, stored states (level-major), c, scalar values.
inline void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
    BinaryWriter w("FGT1");
    w.u32(static_cast<std::uint32_t>(traj.grid.levels.size()));
    w.u32(traj.solver == Solver::euler ? 0u : 1u);
    w.u32(traj.stored() ? 1u : 0u);
    w.u32(static_cast<std::uint32_t>(traj.state_shape.size()));
    for (auto d : traj.state_shape) w.u32(static_cast<std::uint32_t>(d));
    const auto& cs = traj.cond.c().shape();
    w.u32(static_cast<std::uint32_t>(cs.size()));
    for (auto d : cs) w.u32(static_cast<std::uint32_t>(d));
    w.u32(static_cast<std::uint32_t>(traj.cond.scalars().size()));
    for (const auto& s : traj.cond.scalars()) w.u32(static_cast<std::uint32_t>(s.name.size()));
    for (const auto& s : traj.cond.scalars()) w.raw(s.name);
    w.f64(traj.grid.rho);
    w.f64(traj.grid.sigma_min);
    w.f64(traj.grid.sigma_max);
    w.f64s(traj.grid.levels);
    w.f64s(traj.initial);
    w.f64s(traj.final_state);
    for (const auto& s : traj.states) w.f64s(s);
    w.f64s(traj.cond.c().data());
    for (const auto& s : traj.cond.scalars()) w.f64(s.value);
    w.save(path);
}

inline Trajectory read_trajectory(const std::filesystem::path& path) {
    BinaryReader r(path, "FGT1");
    Trajectory t;
    const auto n_levels = r.u32();
    t.solver = r.u32() == 0 ? Solver::euler : Solver::heun;
    const bool stored = r.u32() != 0;
    auto read_shape = [&] {
        Shape s(r.u32());
        for (auto& d : s) d = r.u32();
        return s;
    };
    t.state_shape = read_shape();
    const Shape c_shape = read_shape();
    std::vector<std::size_t> name_len(r.u32());
    for (auto& n : name_len) n = r.u32();
    std::vector<ScalarConditioner> scalars;
    for (auto n : name_len) scalars.push_back({r.raw(n), 0.0});
    t.grid.rho = r.f64();
    t.grid.sigma_min = r.f64();
    t.grid.sigma_max = r.f64();
    t.grid.levels = r.f64s(n_levels);
    const auto n = shape_size(t.state_shape);
    t.initial = r.f64s(n);
    t.final_state = r.f64s(n);
    if (stored)
        for (std::uint32_t i = 0; i < n_levels; ++i) t.states.push_back(r.f64s(n));
    Vec c = r.f64s(shape_size(c_shape));
    for (auto& s : scalars) s.value = r.f64();
    r.expect_end();
    t.cond = Conditioning(StateVector(std::move(c), c_shape), std::move(scalars));
    return t;
}

// ---------------------------------------------------------------------------
// Text formats.

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Rows x columns used for a state written as a map: the last dimension
/// becomes the columns; a rank-1 state is a single row.
inline std::pair<std::size_t, std::size_t> map_layout(const StateVector& s) {
    if (s.shape().size() <= 1) return {1, s.size()};
    return {s.size() / s.shape().back(), s.shape().back()};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// "# shape: R C" then R lines of C comma-separated values, 17 significant digits.
inline std::string map_csv(const StateVector& s) {
    const auto [rows, cols] = map_layout(s);
    std::string out = "# shape: " + std::to_string(rows) + " " + std::to_string(cols) + "\n";
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (c) out += ',';
            out += format_double(s[r * cols + c]);
        }
        out += '\n';
    }
    return out;
}

inline void write_map_csv(const std::filesystem::path& path, const StateVector& s) { write_text(path, map_csv(s)); }

/// Values in row-major order plus the (rows, cols) header.
struct MapData {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec values;
};

inline MapData read_map_csv(const std::filesystem::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    MapData m;
    if (!std::getline(in, line) || std::sscanf(line.c_str(), "# shape: %zu %zu", &m.rows, &m.cols) != 2)
        throw IoError(path.string() + ": missing '# shape: R C' header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        while (std::getline(row, cell, ',')) {
            try {
                m.values.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw IoError(path.string() + ": bad number '" + cell + "'");
            }
        }
    }
    if (m.values.size() != m.rows * m.cols) throw IoError(path.string() + ": value count does not match header");
    return m;
}

struct PgmRange {
    double min;
    double max;
};

/// 8-bit binary PGM (P5), linearly scaled between the map's min and max.
inline PgmRange write_pgm(const std::filesystem::path& path, const StateVector& s) {
    const auto [rows, cols] = map_layout(s);
    const auto [lo_it, hi_it] = std::minmax_element(s.data().begin(), s.data().end());
    const PgmRange range{*lo_it, *hi_it};
    std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (double v : s.data()) {
        const double frac = range.max > range.min ? (v - range.min) / (range.max - range.min) : 0.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * frac))));
    }
    write_text(path, out);
    return range;
}

// ---------------------------------------------------------------------------
// JSON.

inline json load_json(const std::filesystem::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

inline void save_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json to_json(const GridMeta& g) {
    return {{"n_lat", g.n_lat}, {"n_lon", g.n_lon}, {"latitudes", g.latitudes}};
}

inline GridMeta grid_meta_from_json(const json& j) {
    GridMeta g{j.at("n_lat").get<std::size_t>(), j.at("n_lon").get<std::size_t>(),
               j.at("latitudes").get<std::vector<double>>()};
    return g;
}

inline json to_json(const TimeGrid& g) {
    return {{"steps", g.n_steps()}, {"sigma_min", g.sigma_min}, {"sigma_max", g.sigma_max}, {"rho", g.rho}};
}

/// {"kind": "...", "index": i, "mask": [...] | "box": {"rows": [r0, r1], "cols": [c0, c1]},
///  "latitude_weighted": bool, "channel": k}. Boxes are half-open and need grid metadata or
/// an explicit "n_cols".
inline QuantitySpec quantity_from_json(const json& j) {
    QuantitySpec q;
    q.kind = parse_quantity_kind(j.at("kind").get<std::string>());
    q.index = j.value("index", std::size_t{0});
    q.latitude_weighted = j.value("latitude_weighted", false);
    q.channel = j.value("channel", std::size_t{0});
    if (j.contains("mask")) q.mask = j.at("mask").get<std::vector<std::size_t>>();
    if (j.contains("box")) {
        const auto rows = j.at("box").at("rows").get<std::array<std::size_t, 2>>();
        const auto cols = j.at("box").at("cols").get<std::array<std::size_t, 2>>();
        const auto n_cols = j.at("box").at("n_cols").get<std::size_t>();
        for (auto r = rows[0]; r < rows[1]; ++r)
            for (auto c = cols[0]; c < cols[1]; ++c) q.mask.push_back(r * n_cols + c);
    }
    return q;
}

inline json to_json(const QuantitySpec& q) {
    json j{{"kind", to_string(q.kind)}, {"channel", q.channel}, {"latitude_weighted", q.latitude_weighted}};
    if (q.kind == QuantityKind::component) j["index"] = q.index;
    if (q.kind == QuantityKind::patch_mean) j["mask"] = q.mask;
    return j;
}

inline json to_json(const RunMetadata& m) {
    return {{"seed", m.seed},           {"steps", m.n_steps},        {"sigma_min", m.sigma_min},
            {"sigma_max", m.sigma_max}, {"rho", m.rho},              {"solver", to_string(m.solver)},
            {"mode", to_string(m.mode)}, {"field", m.field_id},      {"quantity", m.quantity}};
}

/// Sidecar for a sensitivity map: metadata, q and per-scalar gradients.
inline json to_json(const SensitivityResult& r) {
    json j{{"metadata", to_json(r.meta)}, {"shape", r.dq_dc.shape()}};
    if (r.q) j["q"] = *r.q;
    json scal = json::object();
    for (const auto& s : r.dq_dscalar) scal[s.name] = s.value;
    j["dq_dscalar"] = scal;
    return j;
}

// ---------------------------------------------------------------------------
// Conditioning series: CSV with tau in the first column and the flattened c
// after it ('#' lines are comments), plus a JSON sidecar {"shape": [...],
// "grid": {...}} describing c.

inline ConditioningSeries load_series(const std::filesystem::path& csv, const std::filesystem::path& sidecar) {
    const json meta = load_json(sidecar);
    const Shape shape = meta.at("shape").get<Shape>();
    std::optional<GridMeta> grid;
    if (meta.contains("grid")) grid = grid_meta_from_json(meta.at("grid"));

    std::istringstream in(read_text(csv));
    std::string line;
    std::vector<SeriesNode> nodes;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        std::string cell;
        Vec values;
        while (std::getline(row, cell, ',')) {
            try {
                values.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw IoError(csv.string() + ": bad number '" + cell + "'");
            }
        }
        if (values.size() != shape_size(shape) + 1)
            throw IoError(csv.string() + ": row has " + std::to_string(values.size()) + " columns, expected " +
                          std::to_string(shape_size(shape) + 1));
        const double tau = values.front();
        values.erase(values.begin());
        nodes.push_back({tau, StateVector(std::move(values), shape, grid)});
    }
    return ConditioningSeries(std::move(nodes));
}

inline void save_series(const std::filesystem::path& csv, const std::filesystem::path& sidecar,
                        const ConditioningSeries& series) {
    std::string out = "# tau,c...\n";
    for (const auto& n : series.nodes()) {
        out += format_double(n.tau);
        for (double v : n.c.data()) out += "," + format_double(v);
        out += '\n';
    }
    write_text(csv, out);
    json meta{{"shape", series.shape()}};
    if (series.nodes().front().c.grid()) meta["grid"] = to_json(*series.nodes().front().c.grid());
    save_json(sidecar, meta);
}

}  // namespace flowgrad::io
