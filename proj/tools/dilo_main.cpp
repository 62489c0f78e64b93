#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "dilo/dilo.hpp"
#include "dilo/pipeline.hpp"
#include "dilo/selfcheck.hpp"

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace dilo;

namespace {

RunConfig config_from(const std::string& path, std::uint64_t seed_override, bool has_seed) {
    RunConfig c = path.empty() ? RunConfig{} : load_config(path);
    if (has_seed) c.seed = seed_override;
    return c;
}

void write_json(const std::string& path, const json& j) {
    atomic_write_text(path, j.dump(2) + "\n");
}

std::vector<std::uint64_t> parse_seeds(const std::string& spec, std::uint64_t fallback) {
    if (spec.empty()) return {fallback};
    std::vector<std::uint64_t> seeds;
    const auto colon = spec.find(':');
    if (colon != std::string::npos) {
        const std::uint64_t a = std::stoull(spec.substr(0, colon));
        const std::uint64_t b = std::stoull(spec.substr(colon + 1));
        for (std::uint64_t s = a; s <= b; ++s) seeds.push_back(s);
        return seeds;
    }
    std::size_t pos = 0;
    while (pos <= spec.size()) {
        const auto comma = spec.find(',', pos);
        const std::string tok =
            comma == std::string::npos ? spec.substr(pos) : spec.substr(pos, comma - pos);
        if (!tok.empty()) seeds.push_back(std::stoull(tok));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return seeds;
}

std::size_t suite_threads() {
    const char* env = std::getenv("DILO_THREADS");
    if (!env) return 1;
    const long v = std::atol(env);
    return v < 1 ? 1 : static_cast<std::size_t>(v);
}

SurrogateHandle surrogate_from_config(const RunConfig& c, const ModelBundle& bundle) {
    if (c.variant == "exact-adjoint") {
        EitSolverSettings st;
        st.cg_tol = c.cg_tol;
        return make_exact_surrogate(make_trig_patterns(c.grid, c.patterns), st);
    }
    if (c.variant != "neural")
        throw std::runtime_error("surrogate variant must be neural or exact-adjoint");
    return make_neural_surrogate(bundle.surrogate);
}

Observation observation_from_dataset(const PairedEitDataset& ds, std::size_t index,
                                     const RunConfig& c, std::uint64_t seed) {
    if (index >= ds.fields.size())
        throw std::runtime_error("dataset index " + std::to_string(index) + " out of range");
    Observation y;
    y.patterns = ds.m_patterns;
    y.boundary = ds.boundary;
    y.v = ds.observations[index];
    if (c.noise_gamma > 0.0) {
        Rng rng(derive_seed(seed, "noise"));
        y = inject_noise(y, c.noise_gamma, rng);
    }
    return y;
}

struct InvertArgs {
    std::string config, data, ckpt, out, seeds;
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::size_t index = 0;
    bool track_exact = false;
    bool timings = false;
};

int run_invert_one(const RunConfig& c, const InvertArgs& args, std::uint64_t seed,
                   const ModelBundle& bundle, const PairedEitDataset& ds,
                   const std::string& out_dir) {
    fs::create_directories(out_dir);
    const Observation y_obs = observation_from_dataset(ds, args.index, c, seed);
    const SurrogateHandle surrogate = surrogate_from_config(c, bundle);
    EitSolverSettings st;
    st.cg_tol = c.cg_tol;
    const SurrogateHandle exact = make_exact_surrogate(make_trig_patterns(c.grid, c.patterns), st);
    const std::vector<double>* truth = &ds.fields[args.index];

    InversionConfig icfg;
    icfg.iterations = c.iterations;
    icfg.mode = parse_optimizer(c.optimizer);
    icfg.lr = c.lr;
    icfg.seed = seed;
    icfg.substeps = c.invert_substeps;
    icfg.loss_weight = c.loss_weight;
    icfg.noise_gamma = c.noise_gamma;

    json summary;
    summary["command"] = "invert";
    summary["seed"] = seed;
    summary["optimizer"] = c.optimizer;
    summary["surrogate"] = c.variant;
    summary["noise_gamma"] = c.noise_gamma;

    TrajectoryDiagnostics diag;
    if (icfg.mode == InvOpt::Gd) {
        // gradient descent with lr = 1 / estimated smoothness, then the
        // descent checks of the convergence analysis
        TheoremSuiteResult suite = run_theorem_suite(
            y_obs, bundle, surrogate, args.track_exact ? &exact : nullptr, icfg);
        diag = std::move(suite.diagnostics);
        summary["l_hat"] = suite.l_estimate.l_hat;
        summary["delta_hat"] = suite.delta_hat;
        summary["descent_fraction"] = suite.report.descent_fraction;
        summary["telescoped_ok"] = suite.report.telescoped_ok;
        summary["triangle_ok"] = suite.report.triangle_ok;
        summary["checks_ok"] = suite.report.all_ok();
        summary["lr_used"] = diag.lr_used;
    } else {
        diag = dilo_invert(y_obs, bundle, surrogate, icfg,
                           args.track_exact ? &exact : nullptr, truth);
    }

    std::vector<MetricsRow> rows(diag.iters_run);
    for (std::size_t i = 0; i < diag.iters_run; ++i) {
        rows[i].iter = i;
        rows[i].loss = diag.loss[i];
        rows[i].grad_norm = diag.grad_norm[i];
        if (i < diag.grad_norm_exact.size()) {
            rows[i].has_grad_norm_exact = true;
            rows[i].grad_norm_exact = diag.grad_norm_exact[i];
        }
        if (i < diag.mae.size()) {
            rows[i].has_mae = true;
            rows[i].mae = diag.mae[i];
        }
        if (args.timings && i < diag.wallclock_ms.size()) {
            rows[i].has_wallclock = true;
            rows[i].wallclock_ms = diag.wallclock_ms[i];
        }
    }
    emit_metrics(out_dir + "/metrics.csv", rows);
    write_tensor(out_dir + "/field.tnsr",
                 Tensor::from_vec(diag.best_field, {bundle.grid_n, bundle.grid_n}));

    summary["iterations_run"] = diag.iters_run;
    summary["initial_loss"] = diag.initial_loss;
    summary["best_loss"] = diag.best_loss;
    summary["final_loss"] = diag.final_loss;
    summary["best_iter"] = diag.best_iter;
    summary["early_stopped"] = diag.early_stopped;
    summary["mae_best"] = mean_abs_error(diag.best_field, *truth);
    write_json(out_dir + "/summary.json", summary);
    std::cout << "invert seed " << seed << ": loss " << diag.initial_loss << " -> "
              << diag.best_loss << ", mae " << summary["mae_best"].get<double>() << "\n";
    return 0;
}

int cmd_invert(const InvertArgs& args) {
    const RunConfig c = config_from(args.config, args.seed, args.has_seed);
    const ModelBundle bundle = load_bundle(args.ckpt);
    const PairedEitDataset ds = load_paired_dataset(args.data);
    const std::vector<std::uint64_t> seeds = parse_seeds(args.seeds, c.seed);
    if (seeds.size() == 1) return run_invert_one(c, args, seeds[0], bundle, ds, args.out);

    const std::size_t workers = std::min(suite_threads(), seeds.size());
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    std::atomic<int> rc{0};
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= seeds.size()) return;
                try {
                    run_invert_one(c, args, seeds[i], bundle, ds,
                                   args.out + "/seed-" + std::to_string(seeds[i]));
                } catch (const std::exception& e) {
                    std::cerr << "seed " << seeds[i] << ": " << e.what() << "\n";
                    rc = 1;
                }
            }
        });
    for (auto& t : pool) t.join();
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion latent optimization for PDE-constrained inverse problems"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", data_dir, ckpt_dir;
    std::uint64_t seed = 0;
    bool has_seed = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run configuration file");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
            has_seed = true;
        });
    };

    auto* gen = app.add_subcommand("gen-data", "generate synthetic paired datasets");
    add_common(gen);

    auto* tae = app.add_subcommand("train-ae", "train the autoencoder");
    add_common(tae);
    tae->add_option("--data", data_dir, "dataset directory")->required();
    auto* tldm = app.add_subcommand("train-ldm", "train the latent score network");
    add_common(tldm);
    tldm->add_option("--data", data_dir, "dataset directory")->required();
    tldm->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    auto* tsur = app.add_subcommand("train-surrogate", "train the neural forward surrogate");
    add_common(tsur);
    tsur->add_option("--data", data_dir, "dataset directory")->required();
    tsur->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();

    InvertArgs inv;
    auto* invert = app.add_subcommand("invert", "latent-noise optimization against data");
    invert->add_option("--config", inv.config, "run configuration file");
    invert->add_option("--out", inv.out, "output directory")->required();
    invert->add_option("--seed", inv.seed, "seed override")->each([&inv](const std::string&) {
        inv.has_seed = true;
    });
    invert->add_option("--data", inv.data, "dataset directory")->required();
    invert->add_option("--ckpt", inv.ckpt, "checkpoint directory")->required();
    invert->add_option("--index", inv.index, "dataset instance index");
    invert->add_option("--seeds", inv.seeds, "seed list a,b,c or range a:b");
    invert->add_flag("--track-exact", inv.track_exact,
                     "record the exact-adjoint gradient norm per iteration");
    invert->add_flag("--timings", inv.timings, "include wallclock_ms in metrics");

    InvertArgs dps;
    auto* dpsc = app.add_subcommand("dps-baseline", "single guided reverse pass");
    dpsc->add_option("--config", dps.config, "run configuration file");
    dpsc->add_option("--out", dps.out, "output directory")->required();
    dpsc->add_option("--seed", dps.seed, "seed override")->each([&dps](const std::string&) {
        dps.has_seed = true;
    });
    dpsc->add_option("--data", dps.data, "dataset directory")->required();
    dpsc->add_option("--ckpt", dps.ckpt, "checkpoint directory")->required();
    dpsc->add_option("--index", dps.index, "dataset instance index");

    InvertArgs ood;
    auto* oodc = app.add_subcommand("ood-diag", "per-timestep surrogate residual curve");
    oodc->add_option("--config", ood.config, "run configuration file");
    oodc->add_option("--out", ood.out, "output directory")->required();
    oodc->add_option("--seed", ood.seed, "seed override")->each([&ood](const std::string&) {
        ood.has_seed = true;
    });
    oodc->add_option("--data", ood.data, "dataset directory")->required();
    oodc->add_option("--ckpt", ood.ckpt, "checkpoint directory")->required();
    oodc->add_option("--index", ood.index, "dataset instance index");

    auto* ver = app.add_subcommand("verify", "oracle-only property suite, no artifacts needed");
    add_common(ver);

    std::vector<std::string> report_dirs;
    auto* rep = app.add_subcommand("report", "summarize one or more run directories");
    rep->add_option("runs", report_dirs, "run directories with summary.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);  // usage text, exit code 2 on bad flags
    }

    try {
        if (gen->parsed()) {
            const RunConfig c = config_from(config_path, seed, has_seed);
            if (c.kind == "ns-grf") {
                fs::create_directories(out_dir);
                const std::vector<std::vector<double>> fields =
                    gen_ns_grf(c.n_train, derive_seed(c.seed, "data-train"), c.ns_grid);
                NsConfig ns;
                ns.n = c.ns_grid;
                ns.nu = c.ns_nu;
                for (std::size_t i = 0; i < fields.size(); ++i) {
                    char name[64];
                    std::snprintf(name, sizeof(name), "w0_%04zu.tnsr", i);
                    write_tensor(out_dir + "/" + name,
                                 Tensor::from_vec(fields[i], {c.ns_grid, c.ns_grid}));
                    std::snprintf(name, sizeof(name), "wT_%04zu.tnsr", i);
                    write_tensor(out_dir + "/" + name,
                                 Tensor::from_vec(ns_forward(fields[i], ns, c.ns_T, c.ns_dt),
                                                  {c.ns_grid, c.ns_grid}));
                }
                std::cout << "wrote " << fields.size() << " vorticity pairs to " << out_dir
                          << "\n";
                return 0;
            }
            EitSolverSettings st;
            st.cg_tol = c.cg_tol;
            save_paired_dataset(out_dir + "/train",
                                gen_eit_paired(c.n_train, derive_seed(c.seed, "data-train"),
                                               c.grid, c.patterns, c.sigma_min, c.sigma_max,
                                               st));
            save_paired_dataset(out_dir + "/test",
                                gen_eit_paired(c.n_test, derive_seed(c.seed, "data-test"),
                                               c.grid, c.patterns, c.sigma_min, c.sigma_max,
                                               st));
            std::cout << "wrote " << c.n_train << "+" << c.n_test << " paired samples to "
                      << out_dir << "\n";
            return 0;
        }
        if (tae->parsed()) {
            const RunConfig c = config_from(config_path, seed, has_seed);
            const PairedEitDataset train = load_paired_dataset(data_dir + "/train");
            const PairedEitDataset test = load_paired_dataset(data_dir + "/test");
            ModelBundle bundle = bundle_from_config(c, c.seed);
            TrainConfig tc;
            tc.epochs = c.ae_epochs;
            tc.batch = c.ae_batch;
            tc.opt.lr = c.ae_lr;
            tc.seed = derive_seed(c.seed, "ae");
            const std::vector<double> losses = train_autoencoder(bundle, train.fields, tc);
            finalize_latent_stats(bundle, train.fields);
            fs::create_directories(out_dir);
            save_bundle(out_dir, bundle);
            json j;
            j["command"] = "train-ae";
            j["epochs"] = losses.size();
            j["first_loss"] = losses.front();
            j["last_loss"] = losses.back();
            j["holdout_rel_error"] = ae_reconstruction_error(bundle, test.fields);
            write_json(out_dir + "/train_ae_summary.json", j);
            std::cout << "autoencoder: loss " << losses.front() << " -> " << losses.back()
                      << ", holdout rel err " << j["holdout_rel_error"].get<double>() << "\n";
            return 0;
        }
        if (tldm->parsed()) {
            const RunConfig c = config_from(config_path, seed, has_seed);
            const PairedEitDataset train = load_paired_dataset(data_dir + "/train");
            ModelBundle bundle = load_bundle(ckpt_dir);
            TrainConfig tc;
            tc.epochs = c.ldm_epochs;
            tc.batch = c.ldm_batch;
            tc.opt.lr = c.ldm_lr;
            tc.seed = derive_seed(c.seed, "ldm");
            const std::vector<double> losses = train_score(bundle, train.fields, tc);
            save_bundle(out_dir.empty() ? ckpt_dir : out_dir, bundle);
            json j;
            j["command"] = "train-ldm";
            j["epochs"] = losses.size();
            j["first_loss"] = losses.front();
            j["last_loss"] = losses.back();
            j["lipschitz_probe"] = score_lipschitz_probe(bundle, 8, derive_seed(c.seed, "lip"));
            write_json((out_dir.empty() ? ckpt_dir : out_dir) + "/train_ldm_summary.json", j);
            std::cout << "score net: loss " << losses.front() << " -> " << losses.back()
                      << ", lipschitz probe " << j["lipschitz_probe"].get<double>() << "\n";
            return 0;
        }
        if (tsur->parsed()) {
            const RunConfig c = config_from(config_path, seed, has_seed);
            const PairedEitDataset train = load_paired_dataset(data_dir + "/train");
            const PairedEitDataset test = load_paired_dataset(data_dir + "/test");
            ModelBundle bundle = load_bundle(ckpt_dir);
            TrainConfig tc;
            tc.epochs = c.surr_epochs;
            tc.batch = c.surr_batch;
            tc.opt.lr = c.surr_lr;
            tc.seed = derive_seed(c.seed, "surrogate");
            const SurrogateTrainResult res =
                train_surrogate(bundle.surrogate, train, &test, tc);
            save_bundle(out_dir.empty() ? ckpt_dir : out_dir, bundle);
            json j;
            j["command"] = "train-surrogate";
            j["epochs"] = res.losses.size();
            j["first_loss"] = res.losses.front();
            j["last_loss"] = res.losses.back();
            j["holdout_rel_error"] = res.holdout_rel_l2;
            write_json((out_dir.empty() ? ckpt_dir : out_dir) + "/train_surrogate_summary.json",
                       j);
            std::cout << "surrogate: loss " << res.losses.front() << " -> "
                      << res.losses.back() << ", holdout rel err " << res.holdout_rel_l2
                      << "\n";
            return 0;
        }
        if (invert->parsed()) return cmd_invert(inv);
        if (dpsc->parsed()) {
            const RunConfig c = config_from(dps.config, dps.seed, dps.has_seed);
            const ModelBundle bundle = load_bundle(dps.ckpt);
            const PairedEitDataset ds = load_paired_dataset(dps.data);
            const Observation y_obs = observation_from_dataset(ds, dps.index, c, c.seed);
            const SurrogateHandle surrogate = surrogate_from_config(c, bundle);
            InversionConfig icfg;
            icfg.seed = c.seed;
            icfg.substeps = c.invert_substeps;
            icfg.loss_weight = c.loss_weight;
            const DpsDiagnostics out = dps_baseline(y_obs, bundle, surrogate, c.dps_gamma, icfg);
            fs::create_directories(dps.out);
            std::ostringstream csv;
            csv << "step,residual\n";
            for (std::size_t i = 0; i < out.residual_per_step.size(); ++i)
                csv << i << "," << format_g17(out.residual_per_step[i]) << "\n";
            atomic_write_text(dps.out + "/residuals.csv", csv.str());
            write_tensor(dps.out + "/field.tnsr",
                         Tensor::from_vec(out.final_field, {bundle.grid_n, bundle.grid_n}));
            json j;
            j["command"] = "dps-baseline";
            j["seed"] = c.seed;
            j["guidance_scale"] = c.dps_gamma;
            j["final_loss"] = out.final_loss;
            j["mae"] = mean_abs_error(out.final_field, ds.fields[dps.index]);
            write_json(dps.out + "/summary.json", j);
            std::cout << "dps baseline: final loss " << out.final_loss << "\n";
            return 0;
        }
        if (oodc->parsed()) {
            const RunConfig c = config_from(ood.config, ood.seed, ood.has_seed);
            const ModelBundle bundle = load_bundle(ood.ckpt);
            const PairedEitDataset ds = load_paired_dataset(ood.data);
            const Observation y = observation_from_dataset(ds, ood.index, c, c.seed);
            const SurrogateHandle surrogate = surrogate_from_config(c, bundle);
            const OodCurve curve =
                ood_diagnostic(bundle, surrogate, ds.fields[ood.index], y, c.seed);
            fs::create_directories(ood.out);
            std::ostringstream csv;
            csv << "t,residual\n";
            for (std::size_t i = 0; i < curve.t.size(); ++i)
                csv << curve.t[i] << "," << format_g17(curve.residual[i]) << "\n";
            atomic_write_text(ood.out + "/ood_curve.csv", csv.str());
            json j;
            j["command"] = "ood-diag";
            j["endpoint_ratio"] = curve.endpoint_ratio;
            write_json(ood.out + "/summary.json", j);
            std::cout << "ood endpoint ratio " << curve.endpoint_ratio << "\n";
            return 0;
        }
        if (ver->parsed()) {
            const int failures = run_verify_suite(std::cout);
            std::cout << (failures == 0 ? "verify: all checks passed\n"
                                        : "verify: " + std::to_string(failures) +
                                              " check(s) failed\n");
            return failures == 0 ? 0 : 1;
        }
        if (rep->parsed()) {
            double loss_sum = 0, mae_sum = 0;
            std::size_t mae_count = 0;
            for (const std::string& dir : report_dirs) {
                const json j = json::parse(read_text_file(dir + "/summary.json"));
                std::cout << dir << ": ";
                for (const char* key :
                     {"command", "seed", "initial_loss", "best_loss", "final_loss", "mae_best",
                      "mae", "descent_fraction", "checks_ok", "endpoint_ratio"})
                    if (j.contains(key)) std::cout << key << "=" << j[key].dump() << " ";
                std::cout << "\n";
                if (j.contains("best_loss")) loss_sum += j["best_loss"].get<double>();
                if (j.contains("mae_best")) {
                    mae_sum += j["mae_best"].get<double>();
                    ++mae_count;
                }
            }
            if (!report_dirs.empty())
                std::cout << "mean best_loss "
                          << loss_sum / static_cast<double>(report_dirs.size());
            if (mae_count)
                std::cout << ", mean mae " << mae_sum / static_cast<double>(mae_count);
            std::cout << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
