#include "robustcaps/config.hpp"
#include "robustcaps/verify.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::string checkpoint;
    int precision = 32;
    int64_t seed = -1;  // -1: keep config value
};

rcaps::config::RunConfig load_run_config(const CommonOpts& o) {
    auto rc = rcaps::config::load_config(o.config_path);
    if (o.seed >= 0) {
        rc.seed = static_cast<uint64_t>(o.seed);
        rc.train.seed = rc.seed;
        rc.train_transform.seed = rc.seed;
    }
    if (!o.out_dir.empty()) rc.out_dir = o.out_dir;
    return rc;
}

template <class T>
nlohmann::json suite_json(const std::vector<rcaps::data::TestSuite<T>>& suites,
                          const std::vector<double>& acc) {
    nlohmann::json j = nlohmann::json::object();
    for (size_t i = 0; i < suites.size(); ++i) j[suites[i].name] = acc[i];
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << text;
}

template <class T>
int run_train(const rcaps::config::RunConfig& rc) {
    namespace fs = std::filesystem;
    auto [train_set, test_set] = rcaps::config::load_dataset<T>(rc);
    auto suites = rcaps::data::build_test_suites(test_set, rc.seed);
    auto ps = rcaps::init_params<T>(rc.model, rc.seed);
    rcaps::train::AdamW<T> opt;
    std::cout << "parameters: " << ps.total() << "\n";
    std::cout << "train samples: " << train_set.size() << ", test samples: " << test_set.size() << "\n";

    auto res = rcaps::train::train(rc.model, ps, opt, train_set, rc.train_transform, suites,
                                   rc.train, false, &std::cout);

    fs::create_directories(rc.out_dir);
    std::string csv = rcaps::train::metrics_csv(res.history);
    write_text((fs::path(rc.out_dir) / "metrics.csv").string(), csv);
    rcaps::train::save_checkpoint((fs::path(rc.out_dir) / "checkpoint.bin").string(), ps, opt,
                                  rcaps::config::config_digest(rc), csv);
    nlohmann::json summary = {
        {"config", rcaps::config::resolved_json(rc)},
        {"parameters", ps.total()},
        {"steps", res.steps},
        {"test_accuracy", suite_json(suites, res.final_suite_acc)},
    };
    write_text((fs::path(rc.out_dir) / "summary.json").string(), summary.dump(2) + "\n");
    std::cout << summary["test_accuracy"].dump() << "\n";
    return kExitOk;
}

template <class T>
int run_eval(const rcaps::config::RunConfig& rc, const std::string& ckpt) {
    auto [train_set, test_set] = rcaps::config::load_dataset<T>(rc);
    (void)train_set;
    auto suites = rcaps::data::build_test_suites(test_set, rc.seed);
    rcaps::ParamStore<T> ps;
    rcaps::train::AdamW<T> opt;
    rcaps::train::load_checkpoint(ckpt, ps, opt, rcaps::config::config_digest(rc));
    auto acc = rcaps::train::evaluate(rc.model, ps, suites);
    nlohmann::json summary = {{"checkpoint", ckpt}, {"test_accuracy", suite_json(suites, acc)}};
    std::cout << summary.dump(2) << "\n";
    if (!rc.out_dir.empty()) {
        std::filesystem::create_directories(rc.out_dir);
        write_text((std::filesystem::path(rc.out_dir) / "eval.json").string(), summary.dump(2) + "\n");
    }
    return kExitOk;
}

template <class T>
int run_ablate(const rcaps::config::RunConfig& base) {
    namespace fs = std::filesystem;
    auto [train_set, test_set] = rcaps::config::load_dataset<T>(base);
    auto suites = rcaps::data::build_test_suites(test_set, base.seed);

    struct Variant {
        std::string name;
        bool no_precaps, no_projcaps;
    };
    const std::vector<Variant> variants = {
        {"full", false, false}, {"no_precaps", true, false}, {"no_projcaps", false, true}};

    std::ostringstream csv;
    csv << "variant,parameters";
    for (const auto& s : suites) csv << ",acc_" << s.name;
    csv << "\n";
    nlohmann::json summary = nlohmann::json::object();
    for (const auto& v : variants) {
        rcaps::config::RunConfig rc = base;
        rc.model.no_precaps = v.no_precaps;
        rc.model.no_projcaps = v.no_projcaps;
        auto ps = rcaps::init_params<T>(rc.model, rc.seed);
        rcaps::train::AdamW<T> opt;
        std::cout << "== " << v.name << " (" << ps.total() << " parameters)\n";
        auto res = rcaps::train::train(rc.model, ps, opt, train_set, rc.train_transform, suites,
                                       rc.train, false, &std::cout);
        csv << v.name << "," << ps.total();
        for (double a : res.final_suite_acc) csv << "," << a;
        csv << "\n";
        summary[v.name] = {{"parameters", ps.total()},
                           {"test_accuracy", suite_json(suites, res.final_suite_acc)}};
    }
    fs::create_directories(base.out_dir);
    write_text((fs::path(base.out_dir) / "ablation.csv").string(), csv.str());
    write_text((fs::path(base.out_dir) / "ablation.json").string(), summary.dump(2) + "\n");
    std::cout << csv.str();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"transformation-robust capsule network trainer"};
    app.require_subcommand(1);
    CommonOpts opts;

    auto add_common = [&](CLI::App* sub, bool need_config) {
        auto* c = sub->add_option("--config", opts.config_path, "JSON run configuration");
        if (need_config) c->required();
        sub->add_option("--out", opts.out_dir, "output directory override");
        sub->add_option("--seed", opts.seed, "seed override");
        sub->add_option("--precision", opts.precision, "scalar width in bits")
            ->check(CLI::IsMember({32, 64}));
    };

    auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint + metrics");
    add_common(train_cmd, true);
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the five test suites");
    add_common(eval_cmd, true);
    eval_cmd->add_option("--checkpoint", opts.checkpoint, "checkpoint file")->required();
    auto* verify_cmd = app.add_subcommand("verify", "run the numerical verification battery");
    bool verify_full = false;
    verify_cmd->add_flag("--full", verify_full, "include the slow whole-model checks");
    verify_cmd->add_option("--seed", opts.seed, "seed override");
    auto* ablate_cmd = app.add_subcommand("ablate", "train full, no_precaps and no_projcaps variants");
    add_common(ablate_cmd, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (verify_cmd->parsed()) {
            auto rep = rcaps::verify::run_verification(verify_full, opts.seed >= 0 ? static_cast<uint64_t>(opts.seed) : 0);
            std::cout << rcaps::verify::format_report(rep);
            return rep.all_pass() ? kExitOk : kExitVerify;
        }
        auto rc = load_run_config(opts);
        if (train_cmd->parsed())
            return opts.precision == 64 ? run_train<double>(rc) : run_train<float>(rc);
        if (eval_cmd->parsed())
            return opts.precision == 64 ? run_eval<double>(rc, opts.checkpoint)
                                        : run_eval<float>(rc, opts.checkpoint);
        if (ablate_cmd->parsed())
            return opts.precision == 64 ? run_ablate<double>(rc) : run_ablate<float>(rc);
    } catch (const rcaps::config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
