#include "tatl/cli.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tatl/data.hpp"
#include "tatl/errors.hpp"
#include "tatl/metrics.hpp"
#include "tatl/nnet.hpp"
#include "tatl/stability.hpp"
#include "tatl/training.hpp"

namespace tatl {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int exit_ok = 0;
constexpr int exit_usage = 2;
constexpr int exit_failure = 3;

// Usage problems detected after flag parsing (bad list syntax and the like);
// mapped to exit code 2, unlike tatl errors which map to 3.
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& what) : std::runtime_error(what) {}
};

// ---- atomic file output ----------------------------------------------------

void atomic_write_text(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open " + tmp.string() + " for writing");
        out << content;
        if (!out) throw io_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void atomic_save_params(const param_set& params, const fs::path& path) {
    fs::path tmp = path;
    tmp += ".tmp";
    save_params(params, tmp);
    fs::rename(tmp, path);
}

// ---- small parsers ----------------------------------------------------------

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    for (char ch : text) {
        if (ch == ',') {
            out.push_back(item);
            item.clear();
        } else if (ch != ' ') {
            item += ch;
        }
    }
    out.push_back(item);
    return out;
}

std::set<int> parse_stages(const std::string& text) {
    std::set<int> stages;
    for (const std::string& tok : split_csv(text)) {
        if (tok == "1" || tok == "2" || tok == "3") {
            stages.insert(tok[0] - '0');
        } else {
            throw usage_error("--stages: expected a comma list drawn from 1,2,3; got '" + tok +
                              "'");
        }
    }
    return stages;
}

std::vector<attribute> parse_attributes(const std::string& text) {
    std::vector<attribute> attrs;
    for (const std::string& tok : split_csv(text)) {
        if (tok.size() != 1) {
            throw usage_error("--attributes: expected single-letter codes (G,M,N,P,S); got '" +
                              tok + "'");
        }
        attribute a;
        try {
            a = attribute_from_code(tok[0]);
        } catch (const data_error&) {
            throw usage_error("--attributes: unknown code '" + tok + "'");
        }
        for (attribute seen : attrs) {
            if (seen == a) throw usage_error("--attributes: duplicate code '" + tok + "'");
        }
        attrs.push_back(a);
    }
    return attrs;
}

std::vector<std::pair<std::string, std::string>> parse_inits(
    const std::vector<std::string>& raw) {
    std::vector<std::pair<std::string, std::string>> inits;
    for (const std::string& item : raw) {
        const std::size_t eq = item.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == item.size()) {
            throw usage_error("--init: expected name=weights-path; got '" + item + "'");
        }
        const std::string name = item.substr(0, eq);
        for (const auto& [seen, _] : inits) {
            if (seen == name) throw usage_error("--init: duplicate name '" + name + "'");
        }
        inits.emplace_back(name, item.substr(eq + 1));
    }
    return inits;
}

merge_mode merge_from_name(const std::string& name) {
    if (name == "concat") return merge_mode::concat;
    if (name == "add") return merge_mode::add;
    throw data_error("unknown merge mode '" + name + "'");
}

std::string merge_name(merge_mode mode) {
    return mode == merge_mode::concat ? "concat" : "add";
}

// ---- config file merging ----------------------------------------------------
//
// --config points at a flat JSON object whose keys mirror flag names (no
// leading dashes).  The object is turned into tokens injected ahead of the
// explicit flags, so with take-last flag policy the explicit flags win.

std::optional<std::string> extract_config_path(std::vector<std::string>& args) {
    std::optional<std::string> path;
    for (std::size_t i = 0; i < args.size();) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw usage_error("--config: missing value");
            path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                       args.begin() + static_cast<std::ptrdiff_t>(i + 2));
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(std::string("--config=").size());
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
        } else {
            ++i;
        }
    }
    return path;
}

// First token that names a subcommand; tokens before it are global
// value-taking flags, whose values are skipped.
std::size_t subcommand_pos(const std::vector<std::string>& args) {
    static const std::set<std::string> names = {"synth", "train", "eval", "bound"};
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (names.count(args[i]) != 0) return i;
        if (args[i].rfind("--", 0) == 0 && args[i].find('=') == std::string::npos) ++i;
    }
    return args.size();
}

void append_config_value(std::vector<std::string>& dst, const std::string& flag,
                         const json& value) {
    if (value.is_boolean()) {
        if (value.get<bool>()) dst.push_back(flag);
    } else if (value.is_string()) {
        dst.push_back(flag);
        dst.push_back(value.get<std::string>());
    } else if (value.is_number()) {
        dst.push_back(flag);
        dst.push_back(value.dump());
    } else if (value.is_array()) {
        for (const json& el : value) {
            dst.push_back(flag);
            dst.push_back(el.is_string() ? el.get<std::string>() : el.dump());
        }
    } else if (value.is_object()) {
        for (auto it = value.begin(); it != value.end(); ++it) {
            dst.push_back(flag);
            dst.push_back(it.key() + "=" +
                          (it.value().is_string() ? it.value().get<std::string>()
                                                  : it.value().dump()));
        }
    } else {
        throw data_error("config: unsupported value for key '" + flag + "'");
    }
}

void merge_config_file(std::vector<std::string>& args, const std::string& config_path) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) throw io_error("config: cannot open " + config_path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw data_error("config: " + config_path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw data_error("config: " + config_path + " must hold a JSON object");

    std::vector<std::string> globals, locals;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "config") throw usage_error("config: nested config files not allowed");
        const bool global = it.key() == "seed" || it.key() == "out-dir";
        append_config_value(global ? globals : locals, "--" + it.key(), it.value());
    }

    const std::size_t sub = subcommand_pos(args);
    if (sub < args.size()) {
        args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub + 1), locals.begin(),
                    locals.end());
    } else {
        args.insert(args.end(), locals.begin(), locals.end());
    }
    args.insert(args.begin(), globals.begin(), globals.end());
}

// ---- run manifest helpers -----------------------------------------------------

json history_json(const train_history& h) {
    json epochs = json::array();
    for (const epoch_record& rec : h.epochs) {
        epochs.push_back({{"train_loss", rec.train_loss}, {"val_loss", rec.val_loss}});
    }
    return {{"best_epoch", h.best_epoch},
            {"best_val_loss", h.best_val_loss},
            {"epochs", std::move(epochs)}};
}

json net_json(const net_config& cfg) {
    return {{"in_channels", cfg.in_channels},
            {"base_channels", cfg.base_channels},
            {"depth", cfg.depth},
            {"merge", merge_name(cfg.merge)},
            {"seed", cfg.seed}};
}

json opt_json(const opt_config& cfg) {
    return {{"mode", cfg.mode == opt_mode::momentum ? "momentum" : "theory"},
            {"learning_rate", cfg.learning_rate},
            {"momentum", cfg.momentum},
            {"step_scale", cfg.step_scale},
            {"max_epochs", cfg.max_epochs},
            {"patience", cfg.patience},
            {"batch_size", cfg.batch_size},
            {"seed", cfg.seed}};
}

json loss_json(const loss_config& cfg) {
    return {{"alpha", cfg.alpha},
            {"beta", cfg.beta},
            {"lambda1", cfg.lambda1},
            {"lambda2", cfg.lambda2}};
}

json attribute_codes_json(const std::vector<attribute>& attrs) {
    json arr = json::array();
    for (attribute a : attrs) arr.push_back(std::string(1, attribute_code(a)));
    return arr;
}

void write_run_manifest(const fs::path& out_dir, const json& body) {
    atomic_write_text(out_dir / "run_manifest.json", body.dump(2) + "\n");
}

// ---- eval model loading --------------------------------------------------------

struct eval_model {
    net_config target_cfg;
    net_config segment_cfg;
    std::optional<param_set> segment;
    std::size_t crop_offset = 40;
    std::map<attribute, param_set> targets;
};

eval_model load_eval_model(const fs::path& dir, const std::vector<attribute>& attrs) {
    const fs::path manifest_path = dir / "run_manifest.json";
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw io_error("eval: cannot open " + manifest_path.string());
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw data_error("eval: " + manifest_path.string() + " is not valid JSON: " + e.what());
    }

    eval_model model;
    try {
        const json& net = j.at("net");
        model.target_cfg.in_channels = net.at("in_channels").get<std::size_t>();
        model.target_cfg.base_channels = net.at("base_channels").get<std::size_t>();
        model.target_cfg.depth = net.at("depth").get<std::size_t>();
        model.target_cfg.merge = merge_from_name(net.at("merge").get<std::string>());
        model.crop_offset = j.value("crop_offset", std::size_t{40});

        const json& weights = j.at("weights");
        if (weights.contains("segment")) {
            model.segment = load_params(dir / weights.at("segment").get<std::string>());
        }
        for (attribute a : attrs) {
            const std::string code(1, attribute_code(a));
            if (!weights.contains("targets") || !weights.at("targets").contains(code)) {
                throw data_error("eval: no trained weights for attribute " + code + " under " +
                                 dir.string());
            }
            model.targets.emplace(
                a, load_params(dir / weights.at("targets").at(code).get<std::string>()));
        }
    } catch (const json::exception& e) {
        throw data_error("eval: " + manifest_path.string() +
                         " lacks required fields: " + e.what());
    }

    // Stage-1 lesion segmenters always use the concatenating merge.
    model.segment_cfg = model.target_cfg;
    model.segment_cfg.merge = merge_mode::concat;
    return model;
}

// Full-frame attribute probability map: when the model carries a lesion
// segmenter, prediction happens inside the predicted crop box and is pasted
// back; otherwise the network sees the whole image.
tensor_f frame_prob(const eval_model& model, attribute a, const tensor_f& image) {
    crop_box box{};
    const crop_box* box_ptr = nullptr;
    if (model.segment) {
        const segmenter seg(model.segment_cfg);
        box = predicted_crop_box(seg, *model.segment, image, model.crop_offset);
        box_ptr = &box;
    }
    const segmenter net(model.target_cfg);
    return predict_in_frame(net, model.targets.at(a), image, box_ptr);
}

tensor_f mean_prob(tensor_f a, const tensor_f& b) {
    if (!a.same_shape(b)) throw dimension_error("eval: ensemble probability shapes differ");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 * (a[i] + b[i]);
    return a;
}

// ---- commands -------------------------------------------------------------------

struct global_opts {
    std::uint64_t seed = 0;
    std::string out_dir = ".";
};

int do_synth(const global_opts& g, const std::string& preset, std::size_t n, std::size_t size,
             double noise) {
    gen_config cfg = preset_config(preset);
    cfg.n_samples = n;
    cfg.image_size = size;
    cfg.noise_level = noise;
    cfg.seed = g.seed;
    cfg.validate();

    const fs::path out_dir(g.out_dir);
    fs::create_directories(out_dir);
    const dataset ds = generate_dataset(cfg);
    save_dataset(ds, out_dir);

    json presence;
    for (const auto& [a, p] : cfg.presence) presence[std::string(1, attribute_code(a))] = p;
    write_run_manifest(out_dir, {{"command", "synth"},
                                 {"seed", g.seed},
                                 {"out_dir", g.out_dir},
                                 {"preset", preset},
                                 {"n", n},
                                 {"size", size},
                                 {"noise_level", noise},
                                 {"presence", std::move(presence)},
                                 {"samples", ds.size()},
                                 {"manifest", "manifest.jsonl"}});
    std::cout << "wrote " << ds.size() << " samples under " << out_dir.string() << "\n";
    return exit_ok;
}

int do_train(const global_opts& g, const std::string& manifest_path, const train_plan& plan,
             const std::string& merge) {
    plan.validate();
    const dataset ds = load_dataset(manifest_path);

    const pipeline_result result = run_pipeline(ds, plan);

    const fs::path out_dir(g.out_dir);
    fs::create_directories(out_dir);

    json weights;
    json histories;
    if (result.segment_weights) {
        atomic_save_params(*result.segment_weights, out_dir / "segment_net.tatlw");
        weights["segment"] = "segment_net.tatlw";
        histories["segment"] = history_json(result.segment_history);
    }
    if (result.union_weights) {
        atomic_save_params(*result.union_weights, out_dir / "union.tatlw");
        weights["union"] = "union.tatlw";
        histories["union"] = history_json(result.union_history);
    }
    if (!result.target_weights.empty()) {
        json targets;
        json target_histories;
        for (const auto& [a, params] : result.target_weights) {
            const std::string code(1, attribute_code(a));
            const std::string file = "target_" + code + ".tatlw";
            atomic_save_params(params, out_dir / file);
            targets[code] = file;
            target_histories[code] = history_json(result.target_histories.at(a));
        }
        weights["targets"] = std::move(targets);
        histories["targets"] = std::move(target_histories);
    }
    atomic_write_text(out_dir / "histories.json", histories.dump(2) + "\n");

    json manifest_body = {{"command", "train"},
                          {"seed", g.seed},
                          {"out_dir", g.out_dir},
                          {"manifest", manifest_path},
                          {"stages", json(plan.stages)},
                          {"freeze_encoder", plan.freeze_encoder},
                          {"merge", merge},
                          {"crop_offset", plan.crop_offset},
                          {"attributes", attribute_codes_json(plan.attributes)},
                          {"net", net_json(plan.net)},
                          {"opt", opt_json(plan.opt)},
                          {"loss", loss_json(plan.loss)},
                          {"weights", std::move(weights)},
                          {"histories", "histories.json"}};
    if (!result.crop_boxes.empty()) {
        json boxes = json::array();
        for (std::size_t i = 0; i < result.crop_boxes.size(); ++i) {
            const crop_box& b = result.crop_boxes[i];
            boxes.push_back({{"id", ds[i].id},
                             {"row_begin", b.row_begin},
                             {"row_end", b.row_end},
                             {"col_begin", b.col_begin},
                             {"col_end", b.col_end}});
        }
        manifest_body["crop_boxes"] = std::move(boxes);
    }
    write_run_manifest(out_dir, manifest_body);

    std::cout << "trained stages {";
    bool first = true;
    for (int s : plan.stages) {
        if (!first) std::cout << ",";
        std::cout << s;
        first = false;
    }
    std::cout << "} -> " << out_dir.string() << "\n";
    return exit_ok;
}

int do_eval(const global_opts& g, const std::string& manifest_path,
            const std::string& weights_dir, const std::string& ensemble_dir, std::size_t folds,
            const std::vector<attribute>& attrs) {
    const dataset ds = load_dataset(manifest_path);
    const eval_model model = load_eval_model(weights_dir, attrs);
    std::optional<eval_model> ensemble;
    if (!ensemble_dir.empty()) ensemble = load_eval_model(ensemble_dir, attrs);

    const fold_split split = make_folds(ds.size(), folds, g.seed);

    std::map<attribute, std::vector<fold_scores>> scores;
    for (attribute a : attrs) {
        std::vector<fold_scores> per_fold;
        for (const std::vector<std::size_t>& fold : split) {
            fold_scores fs;
            for (std::size_t idx : fold) {
                const sample& s = ds[idx];
                tensor_f prob = frame_prob(model, a, s.image);
                if (ensemble) prob = mean_prob(std::move(prob), frame_prob(*ensemble, a, s.image));
                const binary_mask pred = binarize(prob, 0.5);
                const binary_mask target = attribute_target(s, a);
                fs.jaccard.push_back(jaccard(pred, target));
                fs.dice.push_back(dice(pred, target));
            }
            per_fold.push_back(std::move(fs));
        }
        scores.emplace(a, std::move(per_fold));
    }

    const metric_summary summary = summarize(scores);
    const std::string csv = to_csv(summary);

    const fs::path out_dir(g.out_dir);
    fs::create_directories(out_dir);
    atomic_write_text(out_dir / "metrics.csv", csv);
    write_run_manifest(out_dir, {{"command", "eval"},
                                 {"seed", g.seed},
                                 {"out_dir", g.out_dir},
                                 {"manifest", manifest_path},
                                 {"weights_dir", weights_dir},
                                 {"ensemble", ensemble_dir},
                                 {"folds", folds},
                                 {"attributes", attribute_codes_json(attrs)},
                                 {"metrics", "metrics.csv"}});
    std::cout << csv;
    return exit_ok;
}

int do_bound(const global_opts& g, const std::string& manifest_path,
             const std::string& attribute_name, const std::vector<std::string>& raw_inits,
             const net_config& net, bound_inputs inputs) {
    const auto named_inits = parse_inits(raw_inits);
    if (named_inits.empty()) throw usage_error("--init: at least one name=path is required");

    const dataset ds = load_dataset(manifest_path);
    std::vector<labeled_sample> data;
    data.reserve(ds.size());
    for (const sample& s : ds) {
        binary_mask target = attribute_name == "union"
                                 ? union_target(s)
                                 : attribute_target(s, attribute_from_code(attribute_name[0]));
        data.push_back({s.image, std::move(target)});
    }

    std::vector<param_set> loaded;
    loaded.reserve(named_inits.size());
    for (const auto& [name, path] : named_inits) loaded.push_back(load_params(path));
    std::vector<std::pair<std::string, const param_set*>> candidates;
    for (std::size_t i = 0; i < named_inits.size(); ++i) {
        candidates.emplace_back(named_inits[i].first, &loaded[i]);
    }

    inputs.k_candidates = candidates.size();
    inputs.seed = g.seed;
    const bound_report report = compare_inits(candidates, net, data, inputs, {});

    const fs::path out_dir(g.out_dir);
    fs::create_directories(out_dir);
    atomic_write_text(out_dir / "bound_report.json", bound_report_json(report));

    json inits_echo;
    for (const auto& [name, path] : named_inits) inits_echo[name] = path;
    write_run_manifest(out_dir, {{"command", "bound"},
                                 {"seed", g.seed},
                                 {"out_dir", g.out_dir},
                                 {"manifest", manifest_path},
                                 {"attribute", attribute_name},
                                 {"init", std::move(inits_echo)},
                                 {"c", inputs.c},
                                 {"power_iters", inputs.power_iters},
                                 {"fd_step", inputs.fd_step},
                                 {"net", net_json(net)},
                                 {"report", "bound_report.json"}});

    for (const candidate_stats& cs : report.candidates) {
        std::cout << cs.name << " bound_score " << cs.bound_score << "\n";
    }
    std::cout << "selected: " << report.selected << "\n";
    return exit_ok;
}

// ---- flag wiring -----------------------------------------------------------------

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"synthetic skin-attribute segmentation pipeline"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    global_opts g;
    std::string config_path_doc;
    app.add_option("--seed", g.seed, "seed for every random choice")->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "directory for all output artifacts")
        ->capture_default_str();
    app.add_option("--config", config_path_doc,
                   "JSON file of flag values (keys mirror flag names); explicit flags win");

    const CLI::Validator pow2_size(
        [](std::string& value) -> std::string {
            std::size_t v = 0;
            try {
                v = std::stoull(value);
            } catch (...) {
                return "not a number: " + value;
            }
            if (v < 8 || (v & (v - 1)) != 0) return "image size must be a power of two >= 8";
            return {};
        },
        "power of two >= 8", "POW2");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->fallthrough();
    synth->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string preset = "isic2018";
    std::size_t synth_n = 100, synth_size = 32;
    double synth_noise = 0.03;
    synth->add_option("--preset", preset, "attribute presence preset")
        ->check(CLI::IsMember({"isic2018", "isic2017", "uniform"}))
        ->capture_default_str();
    synth->add_option("--n", synth_n, "number of samples")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    synth->add_option("--size", synth_size, "square image size")
        ->check(pow2_size)
        ->capture_default_str();
    synth->add_option("--noise", synth_noise, "additive gaussian noise level")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "run the staged training pipeline");
    train->fallthrough();
    train->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string train_manifest;
    std::string stages_text = "1,2,3";
    std::string merge = "concat";
    std::string opt_name = "momentum";
    std::string train_attrs_text = "G,M,N,P,S";
    bool freeze_encoder = false;
    std::size_t offset = 40;
    opt_config opt_defaults;
    double lr = opt_defaults.learning_rate;
    double momentum = opt_defaults.momentum;
    double step_scale = opt_defaults.step_scale;
    std::size_t epochs = opt_defaults.max_epochs;
    std::size_t patience = opt_defaults.patience;
    std::size_t batch_size = opt_defaults.batch_size;
    std::size_t depth = 3, base_channels = 8;
    train->add_option("--manifest", train_manifest, "dataset manifest (JSON lines)")->required();
    train->add_option("--stages", stages_text, "comma list of pipeline stages to run")
        ->capture_default_str();
    train->add_flag("--freeze-encoder", freeze_encoder,
                    "keep encoder weights fixed during per-attribute training");
    train->add_option("--merge", merge, "skip-connection merge")
        ->check(CLI::IsMember({"concat", "add"}))
        ->capture_default_str();
    train->add_option("--offset", offset, "crop-box growth in pixels around the predicted lesion")
        ->capture_default_str();
    train->add_option("--opt", opt_name, "optimizer schedule")
        ->check(CLI::IsMember({"momentum", "theory"}))
        ->capture_default_str();
    train->add_option("--lr", lr, "momentum-mode learning rate")->capture_default_str();
    train->add_option("--momentum", momentum, "momentum coefficient")->capture_default_str();
    train->add_option("--step-scale", step_scale, "theory-mode step numerator (step t uses c/t)")
        ->capture_default_str();
    train->add_option("--epochs", epochs, "maximum training epochs")->capture_default_str();
    train->add_option("--patience", patience, "early-stopping patience in epochs")
        ->capture_default_str();
    train->add_option("--batch-size", batch_size, "minibatch size")->capture_default_str();
    train->add_option("--depth", depth, "encoder depth")->capture_default_str();
    train->add_option("--base-channels", base_channels, "channels of the first encoder stage")
        ->capture_default_str();
    train->add_option("--attributes", train_attrs_text, "attribute codes to train in stage 3")
        ->capture_default_str();

    // eval
    auto* eval = app.add_subcommand("eval", "cross-validated evaluation of trained weights");
    eval->fallthrough();
    eval->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string eval_manifest, weights_dir, ensemble_dir;
    std::size_t folds = 5;
    std::string eval_attrs_text = "G,M,N,P,S";
    eval->add_option("--manifest", eval_manifest, "dataset manifest (JSON lines)")->required();
    eval->add_option("--weights-dir", weights_dir, "directory holding trained weights")
        ->required();
    eval->add_option("--folds", folds, "number of cross-validation folds")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    eval->add_option("--ensemble", ensemble_dir,
                     "second weights directory; probability maps are averaged");
    eval->add_option("--attributes", eval_attrs_text, "attribute codes to evaluate")
        ->capture_default_str();

    // bound
    auto* bound = app.add_subcommand("bound", "score candidate initializations");
    bound->fallthrough();
    bound->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string bound_manifest;
    std::string bound_attr = "union";
    std::vector<std::string> raw_inits;
    bound_inputs bound_in;
    std::size_t bound_depth = 3, bound_base = 8;
    std::string bound_merge = "concat";
    bound->add_option("--manifest", bound_manifest, "dataset manifest (JSON lines)")->required();
    bound->add_option("--attribute", bound_attr, "target mask: an attribute code or 'union'")
        ->check(CLI::IsMember({"G", "M", "N", "P", "S", "union"}))
        ->capture_default_str();
    bound->add_option("--init", raw_inits, "candidate as name=weights-path (repeatable)")
        ->required()
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    bound->add_option("--c", bound_in.c, "assumed step-size scale")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    bound->add_option("--power-iters", bound_in.power_iters, "power-iteration budget per sample")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    bound->add_option("--fd-step", bound_in.fd_step, "finite-difference step for curvature probes")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    bound->add_option("--depth", bound_depth, "encoder depth of the candidates")
        ->capture_default_str();
    bound->add_option("--base-channels", bound_base, "base channels of the candidates")
        ->capture_default_str();
    bound->add_option("--merge", bound_merge, "merge mode of the candidates")
        ->check(CLI::IsMember({"concat", "add"}))
        ->capture_default_str();

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("tatl");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
        return exit_usage;
    }

    if (*synth) return do_synth(g, preset, synth_n, synth_size, synth_noise);

    if (*train) {
        train_plan plan;
        plan.stages = parse_stages(stages_text);
        plan.freeze_encoder = freeze_encoder;
        plan.attributes = parse_attributes(train_attrs_text);
        plan.crop_offset = offset;
        plan.opt.mode = opt_name == "theory" ? opt_mode::theory : opt_mode::momentum;
        plan.opt.learning_rate = lr;
        plan.opt.momentum = momentum;
        plan.opt.step_scale = step_scale;
        plan.opt.max_epochs = epochs;
        plan.opt.patience = patience;
        plan.opt.batch_size = batch_size;
        plan.opt.seed = g.seed;
        plan.net.base_channels = base_channels;
        plan.net.depth = depth;
        plan.net.merge = merge_from_name(merge);
        plan.net.seed = g.seed;
        return do_train(g, train_manifest, plan, merge);
    }

    if (*eval) {
        return do_eval(g, eval_manifest, weights_dir, ensemble_dir, folds,
                       parse_attributes(eval_attrs_text));
    }

    if (*bound) {
        net_config net;
        net.base_channels = bound_base;
        net.depth = bound_depth;
        net.merge = merge_from_name(bound_merge);
        net.seed = g.seed;
        return do_bound(g, bound_manifest, bound_attr, raw_inits, net, bound_in);
    }

    std::cerr << "usage error: no command given\n\n" << app.help();
    return exit_usage;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
    try {
        const std::optional<std::string> config_path = extract_config_path(args);
        if (config_path) merge_config_file(args, *config_path);
        return dispatch(args);
    } catch (const usage_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_failure;
    }
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(std::move(args));
}

}  // namespace tatl
