#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "dilo/io.hpp"
#include "dilo/pipeline.hpp"
#include "dilo/rng.hpp"

using namespace dilo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("dilo-test-" + std::to_string(Rng(std::random_device{}()).uniform_index(1u << 30)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("tensor file round trip is bit-exact for f64 and preserves f32") {
    TempDir tmp;
    Rng rng(1);
    Tensor t = rng.normal_tensor({3, 4, 2});
    write_tensor(tmp.file("a.tnsr"), t);
    Tensor back = read_tensor(tmp.file("a.tnsr"));
    CHECK(back.shape == t.shape);
    CHECK(back.dtype == DType::f64);
    CHECK(std::memcmp(back.vals().data(), t.vals().data(), t.numel() * sizeof(double)) == 0);

    Tensor f32 = Tensor::from_vec({0.1, -2.5, 1e-20}, {3}, DType::f32);
    write_tensor(tmp.file("b.tnsr"), f32);
    Tensor back32 = read_tensor(tmp.file("b.tnsr"));
    CHECK(back32.dtype == DType::f32);
    for (std::size_t i = 0; i < 3; ++i) CHECK(back32.at(i) == f32.at(i));

    // scalars (rank 0) survive too
    write_tensor(tmp.file("c.tnsr"), Tensor::scalar(3.125));
    CHECK(read_tensor(tmp.file("c.tnsr")).at(0) == 3.125);
}

TEST_CASE("tensor file errors carry distinct kinds") {
    Rng rng(2);
    std::vector<std::uint8_t> good = encode_tensor(rng.normal_tensor({4}));

    std::vector<std::uint8_t> truncated(good.begin(), good.end() - 5);
    try {
        decode_tensor(truncated);
        CHECK(false);
    } catch (const TensorIoError& e) {
        CHECK(e.kind == TensorIoErrorKind::Truncated);
    }

    std::vector<std::uint8_t> magic = good;
    magic[0] = 'X';
    try {
        decode_tensor(magic);
        CHECK(false);
    } catch (const TensorIoError& e) {
        CHECK(e.kind == TensorIoErrorKind::BadMagic);
    }

    std::vector<std::uint8_t> version = good;
    version[8] = 9;
    try {
        decode_tensor(version);
        CHECK(false);
    } catch (const TensorIoError& e) {
        CHECK(e.kind == TensorIoErrorKind::BadVersion);
    }

    std::vector<std::uint8_t> dtype = good;
    dtype[9] = 7;
    try {
        decode_tensor(dtype);
        CHECK(false);
    } catch (const TensorIoError& e) {
        CHECK(e.kind == TensorIoErrorKind::BadDtype);
    }
}

TEST_CASE("config round trip, defaults, rejection of unknown keys") {
    RunConfig c;
    c.iterations = 777;
    c.lr = 1.25e-3;
    c.variant = "exact-adjoint";
    const std::string text = serialize_config(c);
    RunConfig back = parse_config(text);
    CHECK(serialize_config(back) == text);
    CHECK(back.iterations == 777);
    CHECK(back.lr == 1.25e-3);
    CHECK(back.variant == "exact-adjoint");

    // partial configs keep defaults elsewhere
    RunConfig partial = parse_config("[invert]\niterations = 5\n");
    CHECK(partial.iterations == 5);
    CHECK(partial.t_train == 1000);
    CHECK(partial.lr == 5e-3);

    CHECK_THROWS_WITH_AS(parse_config("[invert]\nnope = 1\n"), doctest::Contains("unknown key"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config("[wat]\nlr = 1\n"), doctest::Contains("unknown section"),
                         std::runtime_error);
    CHECK_THROWS_AS(parse_config("[invert]\nlr 1\n"), std::runtime_error);
}

TEST_CASE("metrics: header stability, row count, exact decimal round trip") {
    TempDir tmp;
    CHECK(std::string(kMetricsHeader) == "iter,loss,grad_norm,grad_norm_exact,mae,wallclock_ms");
    Rng rng(3);
    std::vector<MetricsRow> rows(10);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].iter = i;
        rows[i].loss = rng.normal() * 1e-7;
        rows[i].grad_norm = std::fabs(rng.normal());
        if (i % 2 == 0) {
            rows[i].has_mae = true;
            rows[i].mae = std::fabs(rng.normal());
        }
    }
    emit_metrics(tmp.file("m.csv"), rows);
    const std::string text = read_text_file(tmp.file("m.csv"));
    // optional columns stay as empty fields
    CHECK(text.find(",,") != std::string::npos);
    std::vector<MetricsRow> back = parse_metrics(text);
    REQUIRE(back.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].iter == rows[i].iter);
        CHECK(back[i].loss == rows[i].loss);
        CHECK(back[i].grad_norm == rows[i].grad_norm);
        CHECK(back[i].has_mae == rows[i].has_mae);
        if (rows[i].has_mae) CHECK(back[i].mae == rows[i].mae);
        CHECK(back[i].has_wallclock == false);
    }

    emit_metrics(tmp.file("m2.csv"), rows);
    CHECK(read_text_file(tmp.file("m2.csv")) == text);
}

TEST_CASE("manifest: round trip and hash mismatch detection") {
    TempDir tmp;
    Rng rng(4);
    CheckpointManifest m;
    manifest_add(m, tmp.path.string(), "alpha", "mlp;widths=2,3,1;act=tanh;squash=0;lo=0;hi=1",
                 rng.normal_tensor({7}));
    atomic_write_text(tmp.file("manifest.txt"), serialize_manifest(m));

    CheckpointManifest back = parse_manifest(read_text_file(tmp.file("manifest.txt")));
    std::string arch;
    Tensor t = manifest_read(back, tmp.path.string(), "alpha", &arch);
    CHECK(t.numel() == 7);
    CHECK(arch.substr(0, 3) == "mlp");
    CHECK_THROWS_WITH_AS(manifest_read(back, tmp.path.string(), "missing"),
                         doctest::Contains("missing"), std::runtime_error);

    // corrupt the payload: hash check must fire
    std::string raw = read_text_file(tmp.file("alpha.tnsr"));
    raw[raw.size() - 1] ^= 0x1;
    atomic_write_text(tmp.file("alpha.tnsr"), raw);
    CHECK_THROWS_WITH_AS(manifest_read(back, tmp.path.string(), "alpha"),
                         doctest::Contains("hash"), std::runtime_error);
}

TEST_CASE("bundle save/load reproduces parameters and schedule bit-exactly") {
    TempDir tmp;
    RunConfig c;
    c.grid = 8;
    c.latent = 6;
    c.ae_hidden = "16";
    c.score_hidden = "20";
    c.patterns = 4;
    c.channels = 4;
    c.layers = 2;
    c.modes = 3;
    ModelBundle b = bundle_from_config(c, 17);
    b.latent_shift[2] = 0.75;
    b.latent_scale[3] = 2.5;
    save_bundle(tmp.path.string(), b);
    ModelBundle back = load_bundle(tmp.path.string());
    CHECK(back.grid_n == b.grid_n);
    CHECK(back.latent_dim == b.latent_dim);
    CHECK(back.sigma_max == b.sigma_max);
    CHECK(back.latent_shift == b.latent_shift);
    CHECK(back.latent_scale == b.latent_scale);
    CHECK(back.schedule.t_train == b.schedule.t_train);
    CHECK(back.schedule.alpha_bar == b.schedule.alpha_bar);
    for (std::size_t l = 0; l < b.score.weight.size(); ++l)
        CHECK(back.score.weight[l].vals() == b.score.weight[l].vals());
    CHECK(back.surrogate.spec_im[1].vals() == b.surrogate.spec_im[1].vals());
    CHECK(back.decoder.arch.squash_output);
    CHECK(back.decoder.arch.squash_lo == b.sigma_min);

    // identical forward behaviour
    Rng rng(5);
    std::vector<double> field(64, 0.2);
    CHECK(encode_raw(back, field) == encode_raw(b, field));
}

TEST_CASE("paired dataset save/load round trip") {
    TempDir tmp;
    PairedEitDataset ds = gen_eit_paired(4, 9, 8, 4);
    save_paired_dataset(tmp.path.string(), ds);
    PairedEitDataset back = load_paired_dataset(tmp.path.string());
    CHECK(back.n == ds.n);
    CHECK(back.m_patterns == ds.m_patterns);
    CHECK(back.boundary == ds.boundary);
    REQUIRE(back.fields.size() == ds.fields.size());
    for (std::size_t i = 0; i < ds.fields.size(); ++i) {
        CHECK(back.fields[i] == ds.fields[i]);
        CHECK(back.observations[i] == ds.observations[i]);
    }
}

TEST_CASE("atomic text write leaves no temp file") {
    TempDir tmp;
    atomic_write_text(tmp.file("x.txt"), "hello\n");
    CHECK(read_text_file(tmp.file("x.txt")) == "hello\n");
    CHECK(!fs::exists(tmp.file("x.txt.tmp")));
}
