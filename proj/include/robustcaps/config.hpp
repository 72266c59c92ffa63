#pragma once

#include "robustcaps/model.hpp"
#include "robustcaps/train.hpp"

#include <json.hpp>

namespace rcaps::config {

using nlohmann::json;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    std::string name = "cifar10";  // cifar10 | cifar100 | idx
    std::string path = "data";
    std::vector<std::string> train_files;
    std::vector<std::string> test_files;
    int train_per_class = 0;  // 0 = all
    int test_per_class = 0;
    int classes() const {
        if (name == "cifar100") return 100;
        return 10;
    }
};

struct RunConfig {
    DatasetConfig dataset;
    data::TransformSpec train_transform{2, 180.0, 0};
    ModelConfig model;
    train::TrainConfig train;
    std::string out_dir = "out";
    uint64_t seed = 0;
};

namespace detail {

inline void check_keys(const json& j, const std::string& where,
                       const std::vector<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("unknown config key " + where + "." + it.key());
}

template <class V>
void get_to(const json& j, const std::string& key, V& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
    detail::check_keys(j, "$", {"dataset", "transforms", "model", "train", "output", "seed"});
    RunConfig rc;
    detail::get_to(j, "seed", rc.seed);
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        detail::check_keys(d, "dataset",
                           {"name", "path", "train_files", "test_files", "train_per_class", "test_per_class"});
        detail::get_to(d, "name", rc.dataset.name);
        detail::get_to(d, "path", rc.dataset.path);
        detail::get_to(d, "train_files", rc.dataset.train_files);
        detail::get_to(d, "test_files", rc.dataset.test_files);
        detail::get_to(d, "train_per_class", rc.dataset.train_per_class);
        detail::get_to(d, "test_per_class", rc.dataset.test_per_class);
        if (rc.dataset.name != "cifar10" && rc.dataset.name != "cifar100" && rc.dataset.name != "idx")
            throw ConfigError("dataset.name must be cifar10, cifar100 or idx, got " + rc.dataset.name);
    }
    if (j.contains("transforms")) {
        const auto& t = j.at("transforms");
        detail::check_keys(t, "transforms", {"translate", "rotate"});
        detail::get_to(t, "translate", rc.train_transform.tr);
        detail::get_to(t, "rotate", rc.train_transform.rot);
        rc.train_transform.validate();
    }
    if (rc.dataset.name == "idx") {
        // grayscale 28x28 defaults; an explicit model section still wins
        rc.model.in_channels = 1;
        rc.model.image_size = 28;
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m, "model",
                           {"in_channels", "image_size", "stem_channels", "stem_stride", "blocks", "caps_types", "caps_dim",
                            "conv_caps_layers", "pred_kernel", "no_precaps", "no_projcaps", "gcn_global_pool"});
        detail::get_to(m, "in_channels", rc.model.in_channels);
        detail::get_to(m, "image_size", rc.model.image_size);
        detail::get_to(m, "stem_channels", rc.model.stem_channels);
        detail::get_to(m, "stem_stride", rc.model.stem_stride);
        if (m.contains("blocks")) {
            rc.model.blocks.clear();
            for (const auto& b : m.at("blocks")) {
                detail::check_keys(b, "model.blocks[]", {"channels", "stride"});
                BlockSpec bs;
                detail::get_to(b, "channels", bs.channels);
                detail::get_to(b, "stride", bs.stride);
                rc.model.blocks.push_back(bs);
            }
        }
        detail::get_to(m, "caps_types", rc.model.caps_types);
        detail::get_to(m, "caps_dim", rc.model.caps_dim);
        detail::get_to(m, "conv_caps_layers", rc.model.conv_caps_layers);
        detail::get_to(m, "pred_kernel", rc.model.pred_kernel);
        detail::get_to(m, "no_precaps", rc.model.no_precaps);
        detail::get_to(m, "no_projcaps", rc.model.no_projcaps);
        detail::get_to(m, "gcn_global_pool", rc.model.gcn_global_pool);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, "train",
                           {"epochs", "batch_size", "max_lr", "weight_decay", "pct_start", "div_factor",
                            "final_div", "clip_norm", "eval_subset"});
        detail::get_to(t, "epochs", rc.train.epochs);
        detail::get_to(t, "batch_size", rc.train.batch_size);
        detail::get_to(t, "max_lr", rc.train.max_lr);
        detail::get_to(t, "weight_decay", rc.train.weight_decay);
        detail::get_to(t, "pct_start", rc.train.pct_start);
        detail::get_to(t, "div_factor", rc.train.div_factor);
        detail::get_to(t, "final_div", rc.train.final_div);
        detail::get_to(t, "clip_norm", rc.train.clip_norm);
        detail::get_to(t, "eval_subset", rc.train.eval_subset);
        rc.train.validate();
    }
    if (j.contains("output")) {
        const auto& o = j.at("output");
        detail::check_keys(o, "output", {"dir"});
        detail::get_to(o, "dir", rc.out_dir);
    }
    rc.model.num_classes = rc.dataset.classes();
    rc.train.seed = rc.seed;
    rc.train_transform.seed = rc.seed;
    return rc;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_config(j);
}

// Fully resolved configuration; parse_config(resolved_json(rc)) reproduces rc.
inline json resolved_json(const RunConfig& rc) {
    json blocks = json::array();
    for (const auto& b : rc.model.blocks) blocks.push_back({{"channels", b.channels}, {"stride", b.stride}});
    return json{
        {"seed", rc.seed},
        {"dataset",
         {{"name", rc.dataset.name},
          {"path", rc.dataset.path},
          {"train_files", rc.dataset.train_files},
          {"test_files", rc.dataset.test_files},
          {"train_per_class", rc.dataset.train_per_class},
          {"test_per_class", rc.dataset.test_per_class}}},
        {"transforms", {{"translate", rc.train_transform.tr}, {"rotate", rc.train_transform.rot}}},
        {"model",
         {{"in_channels", rc.model.in_channels},
          {"image_size", rc.model.image_size},
          {"stem_channels", rc.model.stem_channels},
          {"stem_stride", rc.model.stem_stride},
          {"blocks", blocks},
          {"caps_types", rc.model.caps_types},
          {"caps_dim", rc.model.caps_dim},
          {"conv_caps_layers", rc.model.conv_caps_layers},
          {"pred_kernel", rc.model.pred_kernel},
          {"no_precaps", rc.model.no_precaps},
          {"no_projcaps", rc.model.no_projcaps},
          {"gcn_global_pool", rc.model.gcn_global_pool}}},
        {"train",
         {{"epochs", rc.train.epochs},
          {"batch_size", rc.train.batch_size},
          {"max_lr", rc.train.max_lr},
          {"weight_decay", rc.train.weight_decay},
          {"pct_start", rc.train.pct_start},
          {"div_factor", rc.train.div_factor},
          {"final_div", rc.train.final_div},
          {"clip_norm", rc.train.clip_norm},
          {"eval_subset", rc.train.eval_subset}}},
        {"output", {{"dir", rc.out_dir}}}};
}

inline uint64_t config_digest(const RunConfig& rc) { return train::fnv1a64(resolved_json(rc).dump()); }

// Loads the dataset named in the config, honoring per-class subset caps.
template <class T>
std::pair<std::vector<data::Sample<T>>, std::vector<data::Sample<T>>> load_dataset(const RunConfig& rc) {
    namespace fs = std::filesystem;
    const auto& d = rc.dataset;
    std::vector<data::Sample<T>> train_set, test_set;
    auto resolve = [&](const std::string& f) { return (fs::path(d.path) / f).string(); };
    if (d.name == "idx") {
        std::vector<std::string> tr = d.train_files.empty()
                                          ? std::vector<std::string>{"train-images-idx3-ubyte", "train-labels-idx1-ubyte"}
                                          : d.train_files;
        std::vector<std::string> te = d.test_files.empty()
                                          ? std::vector<std::string>{"t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}
                                          : d.test_files;
        if (tr.size() != 2 || te.size() != 2)
            throw ConfigError("idx datasets need [images, labels] file pairs");
        train_set = data::load_idx<T>(resolve(tr[0]), resolve(tr[1]));
        test_set = data::load_idx<T>(resolve(te[0]), resolve(te[1]));
    } else {
        std::vector<std::string> tr = d.train_files, te = d.test_files;
        if (tr.empty()) {
            if (d.name == "cifar10")
                for (int i = 1; i <= 5; ++i) tr.push_back("data_batch_" + std::to_string(i) + ".bin");
            else
                tr = {"train.bin"};
        }
        if (te.empty()) te = {d.name == "cifar10" ? "test_batch.bin" : "test.bin"};
        std::vector<std::string> trp, tep;
        for (const auto& f : tr) trp.push_back(resolve(f));
        for (const auto& f : te) tep.push_back(resolve(f));
        train_set = data::load_cifar_binary<T>(trp, d.classes());
        test_set = data::load_cifar_binary<T>(tep, d.classes());
    }
    if (d.train_per_class > 0) train_set = data::subset_per_class(train_set, d.train_per_class, d.classes());
    if (d.test_per_class > 0) test_set = data::subset_per_class(test_set, d.test_per_class, d.classes());
    return {std::move(train_set), std::move(test_set)};
}

}  // namespace rcaps::config
