#include "dilo/io.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace dilo {

namespace {

constexpr char kMagic[8] = {'D', 'I', 'L', 'O', 'T', 'N', 'S', 'R'};

[[noreturn]] void io_fail(TensorIoErrorKind kind, const std::string& msg) {
    throw TensorIoError(kind, msg);
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t double_bits(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    return v;
}

double bits_double(std::uint64_t v) {
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

std::uint32_t float_bits(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    return v;
}

float bits_float(std::uint32_t v) {
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    out.push_back(1);  // version
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape) put_u64_le(out, d);
    if (t.dtype == DType::f64) {
        for (double v : t.vals()) put_u64_le(out, double_bits(v));
    } else {
        for (double v : t.vals()) {
            const std::uint32_t bits = float_bits(static_cast<float>(v));
            for (int i = 0; i < 4; ++i)
                out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
        }
    }
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 11) io_fail(TensorIoErrorKind::Truncated, "tensor file: truncated header");
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        io_fail(TensorIoErrorKind::BadMagic, "tensor file: bad magic");
    if (bytes[8] != 1)
        io_fail(TensorIoErrorKind::BadVersion,
                "tensor file: unsupported version " + std::to_string(bytes[8]));
    const std::uint8_t dtype_byte = bytes[9];
    if (dtype_byte != 1 && dtype_byte != 2)
        io_fail(TensorIoErrorKind::BadDtype,
                "tensor file: unknown dtype " + std::to_string(dtype_byte));
    const std::size_t ndim = bytes[10];
    std::size_t off = 11;
    if (bytes.size() < off + 8 * ndim)
        io_fail(TensorIoErrorKind::Truncated, "tensor file: truncated dims");
    std::vector<std::size_t> shape(ndim);
    for (std::size_t i = 0; i < ndim; ++i) {
        shape[i] = static_cast<std::size_t>(get_u64_le(bytes.data() + off));
        off += 8;
    }
    const std::size_t count = numel_of(shape);
    const std::size_t width = dtype_byte == 1 ? 4 : 8;
    if (bytes.size() != off + width * count)
        io_fail(TensorIoErrorKind::Truncated,
                "tensor file: payload has " + std::to_string(bytes.size() - off) +
                    " bytes, expected " + std::to_string(width * count));
    std::vector<double> data(count);
    if (dtype_byte == 2) {
        for (std::size_t i = 0; i < count; ++i)
            data[i] = bits_double(get_u64_le(bytes.data() + off + 8 * i));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(bytes[off + 4 * i + b]) << (8 * b);
            data[i] = static_cast<double>(bits_float(bits));
        }
    }
    return Tensor::from_vec(std::move(data), std::move(shape),
                            dtype_byte == 1 ? DType::f32 : DType::f64);
}

void atomic_write_file(const std::string& path, const void* data, std::size_t size) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) io_fail(TensorIoErrorKind::Io, "cannot open " + tmp + " for writing");
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!f) io_fail(TensorIoErrorKind::Io, "short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) io_fail(TensorIoErrorKind::Io, "rename " + tmp + " -> " + path + ": " + ec.message());
}

void atomic_write_text(const std::string& path, const std::string& text) {
    atomic_write_file(path, text.data(), text.size());
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) io_fail(TensorIoErrorKind::Io, "cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_tensor(const std::string& path, const Tensor& t) {
    const std::vector<std::uint8_t> bytes = encode_tensor(t);
    atomic_write_file(path, bytes.data(), bytes.size());
}

Tensor read_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) io_fail(TensorIoErrorKind::Io, "cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return decode_tensor(bytes);
}

std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace {

// Typed field table driving both serialization and strict parsing.
struct Field {
    const char* section;
    const char* key;
    enum class Type { U64, F64, Str } type;
    std::function<void*(RunConfig&)> get;
};

std::vector<Field> config_fields() {
    auto u = Field::Type::U64;
    auto d = Field::Type::F64;
    auto s = Field::Type::Str;
    return {
        {"schedule", "t_train", u, [](RunConfig& c) -> void* { return &c.t_train; }},
        {"schedule", "beta_start", d, [](RunConfig& c) -> void* { return &c.beta_start; }},
        {"schedule", "beta_end", d, [](RunConfig& c) -> void* { return &c.beta_end; }},
        {"schedule", "substeps", u, [](RunConfig& c) -> void* { return &c.substeps; }},
        {"ae", "grid", u, [](RunConfig& c) -> void* { return &c.grid; }},
        {"ae", "latent", u, [](RunConfig& c) -> void* { return &c.latent; }},
        {"ae", "hidden", s, [](RunConfig& c) -> void* { return &c.ae_hidden; }},
        {"ae", "epochs", u, [](RunConfig& c) -> void* { return &c.ae_epochs; }},
        {"ae", "batch", u, [](RunConfig& c) -> void* { return &c.ae_batch; }},
        {"ae", "lr", d, [](RunConfig& c) -> void* { return &c.ae_lr; }},
        {"ldm", "hidden", s, [](RunConfig& c) -> void* { return &c.score_hidden; }},
        {"ldm", "epochs", u, [](RunConfig& c) -> void* { return &c.ldm_epochs; }},
        {"ldm", "batch", u, [](RunConfig& c) -> void* { return &c.ldm_batch; }},
        {"ldm", "lr", d, [](RunConfig& c) -> void* { return &c.ldm_lr; }},
        {"ldm", "time_embed_dim", u, [](RunConfig& c) -> void* { return &c.time_embed_dim; }},
        {"surrogate", "variant", s, [](RunConfig& c) -> void* { return &c.variant; }},
        {"surrogate", "channels", u, [](RunConfig& c) -> void* { return &c.channels; }},
        {"surrogate", "layers", u, [](RunConfig& c) -> void* { return &c.layers; }},
        {"surrogate", "modes", u, [](RunConfig& c) -> void* { return &c.modes; }},
        {"surrogate", "epochs", u, [](RunConfig& c) -> void* { return &c.surr_epochs; }},
        {"surrogate", "batch", u, [](RunConfig& c) -> void* { return &c.surr_batch; }},
        {"surrogate", "lr", d, [](RunConfig& c) -> void* { return &c.surr_lr; }},
        {"physics", "kind", s, [](RunConfig& c) -> void* { return &c.kind; }},
        {"physics", "n_train", u, [](RunConfig& c) -> void* { return &c.n_train; }},
        {"physics", "n_test", u, [](RunConfig& c) -> void* { return &c.n_test; }},
        {"physics", "patterns", u, [](RunConfig& c) -> void* { return &c.patterns; }},
        {"physics", "sigma_min", d, [](RunConfig& c) -> void* { return &c.sigma_min; }},
        {"physics", "sigma_max", d, [](RunConfig& c) -> void* { return &c.sigma_max; }},
        {"physics", "cg_tol", d, [](RunConfig& c) -> void* { return &c.cg_tol; }},
        {"physics", "ns_grid", u, [](RunConfig& c) -> void* { return &c.ns_grid; }},
        {"physics", "ns_nu", d, [](RunConfig& c) -> void* { return &c.ns_nu; }},
        {"physics", "ns_T", d, [](RunConfig& c) -> void* { return &c.ns_T; }},
        {"physics", "ns_dt", d, [](RunConfig& c) -> void* { return &c.ns_dt; }},
        {"invert", "iterations", u, [](RunConfig& c) -> void* { return &c.iterations; }},
        {"invert", "optimizer", s, [](RunConfig& c) -> void* { return &c.optimizer; }},
        {"invert", "lr", d, [](RunConfig& c) -> void* { return &c.lr; }},
        {"invert", "loss_weight", d, [](RunConfig& c) -> void* { return &c.loss_weight; }},
        {"invert", "noise_gamma", d, [](RunConfig& c) -> void* { return &c.noise_gamma; }},
        {"invert", "dps_gamma", d, [](RunConfig& c) -> void* { return &c.dps_gamma; }},
        {"invert", "substeps", u, [](RunConfig& c) -> void* { return &c.invert_substeps; }},
        {"invert", "seed", u, [](RunConfig& c) -> void* { return &c.seed; }},
    };
}

}  // namespace

std::string serialize_config(const RunConfig& c) {
    RunConfig copy = c;
    std::ostringstream out;
    std::string current;
    for (const Field& f : config_fields()) {
        if (f.section != current) {
            if (!current.empty()) out << "\n";
            out << "[" << f.section << "]\n";
            current = f.section;
        }
        out << f.key << " = ";
        void* p = f.get(copy);
        switch (f.type) {
            case Field::Type::U64:
                out << *static_cast<std::size_t*>(p);
                break;
            case Field::Type::F64:
                out << format_g17(*static_cast<double*>(p));
                break;
            case Field::Type::Str:
                out << *static_cast<std::string*>(p);
                break;
        }
        out << "\n";
    }
    return out.str();
}

RunConfig parse_config(const std::string& text) {
    RunConfig c;
    const std::vector<Field> fields = config_fields();
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::runtime_error("config line " + std::to_string(lineno) +
                                         ": malformed section header");
            section = line.substr(1, line.size() - 2);
            bool known = false;
            for (const Field& f : fields)
                if (section == f.section) known = true;
            if (!known)
                throw std::runtime_error("config line " + std::to_string(lineno) +
                                         ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected key = value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto strip = [](std::string& s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
        };
        strip(key);
        strip(value);
        const Field* match = nullptr;
        for (const Field& f : fields)
            if (section == f.section && key == f.key) match = &f;
        if (!match)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": unknown key '" + key + "' in section [" + section +
                                     "]");
        void* p = match->get(c);
        try {
            switch (match->type) {
                case Field::Type::U64:
                    *static_cast<std::size_t*>(p) = std::stoull(value);
                    break;
                case Field::Type::F64:
                    *static_cast<double*>(p) = std::stod(value);
                    break;
                case Field::Type::Str:
                    *static_cast<std::string*>(p) = value;
                    break;
            }
        } catch (const std::runtime_error&) {
            throw;
        } catch (const std::exception&) {
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": cannot parse value '" + value + "'");
        }
    }
    return c;
}

RunConfig load_config(const std::string& path) { return parse_config(read_text_file(path)); }

std::uint64_t fnv1a_bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string serialize_manifest(const CheckpointManifest& m) {
    std::ostringstream out;
    out << "dilo-checkpoint v1\n";
    for (const auto& [name, e] : m.components) {
        char hash[17];
        std::snprintf(hash, sizeof(hash), "%016" PRIx64, e.hash);
        out << name << "\t" << e.file << "\t" << e.arch << "\t" << hash << "\n";
    }
    return out.str();
}

CheckpointManifest parse_manifest(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "dilo-checkpoint v1")
        throw std::runtime_error("manifest: bad header");
    CheckpointManifest m;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t pos = 0;
        while (true) {
            const auto tab = line.find('\t', pos);
            if (tab == std::string::npos) {
                cols.push_back(line.substr(pos));
                break;
            }
            cols.push_back(line.substr(pos, tab - pos));
            pos = tab + 1;
        }
        if (cols.size() != 4) throw std::runtime_error("manifest: malformed row '" + line + "'");
        ManifestEntry e;
        e.file = cols[1];
        e.arch = cols[2];
        e.hash = std::stoull(cols[3], nullptr, 16);
        m.components[cols[0]] = e;
    }
    return m;
}

void manifest_add(CheckpointManifest& m, const std::string& dir, const std::string& name,
                  const std::string& arch, const Tensor& packed) {
    const std::string file = name + ".tnsr";
    const std::vector<std::uint8_t> bytes = encode_tensor(packed);
    atomic_write_file(dir + "/" + file, bytes.data(), bytes.size());
    ManifestEntry e;
    e.file = file;
    e.arch = arch;
    e.hash = fnv1a_bytes(bytes.data(), bytes.size());
    m.components[name] = e;
}

Tensor manifest_read(const CheckpointManifest& m, const std::string& dir,
                     const std::string& name, std::string* arch_out) {
    auto it = m.components.find(name);
    if (it == m.components.end())
        throw std::runtime_error("manifest: missing component '" + name + "'");
    const std::string path = dir + "/" + it->second.file;
    const std::string raw = read_text_file(path);
    if (fnv1a_bytes(raw.data(), raw.size()) != it->second.hash)
        throw std::runtime_error("manifest: content hash mismatch for '" + name + "' (" + path +
                                 ")");
    if (arch_out) *arch_out = it->second.arch;
    std::vector<std::uint8_t> bytes(raw.begin(), raw.end());
    return decode_tensor(bytes);
}

const char* const kMetricsHeader = "iter,loss,grad_norm,grad_norm_exact,mae,wallclock_ms";

void emit_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ostringstream out;
    out << kMetricsHeader << "\n";
    for (const MetricsRow& r : rows) {
        out << r.iter << "," << format_g17(r.loss) << "," << format_g17(r.grad_norm) << ",";
        if (r.has_grad_norm_exact) out << format_g17(r.grad_norm_exact);
        out << ",";
        if (r.has_mae) out << format_g17(r.mae);
        out << ",";
        if (r.has_wallclock) out << format_g17(r.wallclock_ms);
        out << "\n";
    }
    atomic_write_text(path, out.str());
}

std::vector<MetricsRow> parse_metrics(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader)
        throw std::runtime_error("metrics: bad header");
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t pos = 0;
        while (true) {
            const auto c = line.find(',', pos);
            if (c == std::string::npos) {
                cols.push_back(line.substr(pos));
                break;
            }
            cols.push_back(line.substr(pos, c - pos));
            pos = c + 1;
        }
        if (cols.size() != 6) throw std::runtime_error("metrics: malformed row '" + line + "'");
        MetricsRow r;
        r.iter = std::stoull(cols[0]);
        r.loss = std::stod(cols[1]);
        r.grad_norm = std::stod(cols[2]);
        if (!cols[3].empty()) {
            r.has_grad_norm_exact = true;
            r.grad_norm_exact = std::stod(cols[3]);
        }
        if (!cols[4].empty()) {
            r.has_mae = true;
            r.mae = std::stod(cols[4]);
        }
        if (!cols[5].empty()) {
            r.has_wallclock = true;
            r.wallclock_ms = std::stod(cols[5]);
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace dilo
