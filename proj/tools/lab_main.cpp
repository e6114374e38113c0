// lab: pretrain, personalize, generate, evaluate, report over the synthetic
// personalization bench.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "lab/checkpoint.hpp"
#include "lab/config.hpp"
#include "lab/image.hpp"
#include "lab/personalize.hpp"
#include "lab/pretrain.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;    // config or usage error
constexpr int kExitMissing = 3;  // missing dependency artifact

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    json j;
    f >> j;
    return j;
}

Checkpoint load_checkpoint_or_exit3(const std::string& path) {
    if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
    return load_checkpoint(path);
}

TargetSet find_target(const Corpus& corpus, const std::string& id) {
    for (const auto& t : corpus.targets)
        if (t.object_id == id) return t;
    throw ConfigError("target \"" + id + "\" not in corpus manifest");
}

Corpus corpus_from(const ExperimentConfig& cfg) {
    return build_corpus(cfg.seed, cfg.classes, cfg.instances_per_class, cfg.contexts,
                        cfg.train_per_class, cfg.model.unet.image_size);
}

std::string loss_csv(const std::vector<float>& trace) {
    std::ostringstream os;
    os << "step,loss\n";
    for (size_t i = 0; i < trace.size(); ++i) os << (i + 1) << "," << trace[i] << "\n";
    return os.str();
}

std::string checkpoint_filename(const EmittedCheckpoint& ec) {
    return "ckpt_" + ec.phase + "_" + std::to_string(ec.step) + ".ckpt";
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_pretrain(const ExperimentConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    Corpus corpus = corpus_from(cfg);
    PretrainConfig pc = cfg.pretrain;
    pc.seed = cfg.seed;
    std::vector<float> trace;
    Checkpoint base = pretrain(corpus, cfg.model, pc, &trace);
    const std::string ckpt_path = (fs::path(out_dir) / "base.ckpt").string();
    save_checkpoint(base, ckpt_path);
    write_text(fs::path(out_dir) / "loss.csv", loss_csv(trace));
    json manifest;
    manifest["command"] = "pretrain";
    manifest["seed"] = cfg.seed;
    manifest["config"] = cfg.echo();
    manifest["config_hash"] = cfg.config_hash();
    manifest["checkpoint"] = "base.ckpt";
    manifest["checkpoint_hash"] = checkpoint_content_hash(base);
    manifest["steps"] = pc.steps;
    manifest["loss_trace"] = "loss.csv";
    write_text(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << ckpt_path << "\n";
    return kExitOk;
}

int cmd_personalize(const ExperimentConfig& cfg, const std::string& base_path,
                    const std::string& target_id, const std::string& out_dir) {
    Checkpoint base = load_checkpoint_or_exit3(base_path);
    if (base.config.config_hash() != cfg.config_hash())
        throw ConfigError("refusing to resume: base checkpoint config hash " +
                          base.config.config_hash() + " != config " + cfg.config_hash());
    fs::create_directories(out_dir);
    Corpus corpus = corpus_from(cfg);
    TargetSet target = find_target(corpus, target_id);

    StrategyConfig sc = cfg.strategy;
    sc.seed = cfg.seed;

    json manifest;
    manifest["command"] = "personalize";
    manifest["strategy"] = sc.strategy;
    manifest["seed"] = cfg.seed;
    manifest["target"] = target_id;
    manifest["base"] = base_path;
    manifest["base_hash"] = checkpoint_content_hash(base);
    manifest["config"] = cfg.echo();
    manifest["config_hash"] = cfg.config_hash();

    json ckpts = json::array();
    CheckpointSink sink = [&](const Checkpoint& c, const EmittedCheckpoint& ec) {
        const std::string name = checkpoint_filename(ec);
        save_checkpoint(c, (fs::path(out_dir) / name).string());
        json e;
        e["phase"] = ec.phase;
        e["step"] = ec.step;
        e["file"] = name;
        ckpts.push_back(e);
    };

    TrainRun run;
    if (sc.strategy == "two_stage") {
        run = train_two_stage(base, target, sc, sink);
    } else if (sc.strategy == "textual_inversion") {
        run = train_textual_inversion(base, target, sc, sink);
    } else if (sc.strategy == "dreambooth") {
        double prior_seconds = 0;
        auto [priors, prior_prompt] = generate_prior_images(
            base, target.class_noun, sc.prior_image_count, sampler_kind_from(sc.prior_sampler),
            sc.prior_sampler_steps, Rng(cfg.seed).child("priors").base_seed(), &prior_seconds);
        manifest["prior_generation"] = {{"count", sc.prior_image_count},
                                        {"prompt", prior_prompt},
                                        {"wall_clock_s", prior_seconds}};
        run = train_dreambooth(base, target, priors, sc, sink);
    } else {
        throw ConfigError("unknown strategy: " + sc.strategy);
    }

    json phases = json::array();
    for (const auto& p : run.phases)
        phases.push_back({{"name", p.name}, {"steps", p.steps}, {"wall_clock_s", p.seconds}});
    manifest["phases"] = phases;
    manifest["checkpoints"] = ckpts;
    manifest["loss_trace"] = "loss.csv";
    write_text(fs::path(out_dir) / "loss.csv", loss_csv(run.loss_trace));
    write_text(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
    std::cout << "personalize " << sc.strategy << " done, " << run.checkpoints.size()
              << " checkpoints in " << out_dir << "\n";
    return kExitOk;
}

int cmd_generate(const std::string& ckpt_path, const std::string& prompt, int n, uint64_t seed,
                 const std::string& out_dir, const std::string& sampler, int steps) {
    Checkpoint ckpt = load_checkpoint_or_exit3(ckpt_path);
    fs::create_directories(out_dir);
    auto images = generate_images(ckpt, prompt, n, sampler_kind_from(sampler), steps, seed);
    const std::string phash = hex64(fnv1a64(prompt)).substr(0, 8);
    for (int i = 0; i < n; ++i) {
        std::ostringstream name;
        name << "step" << ckpt.step << "_p" << phash << "_i" << i << "_s" << seed << ".png";
        write_png(images[static_cast<size_t>(i)], (fs::path(out_dir) / name.str()).string());
    }
    std::cout << "wrote " << n << " images to " << out_dir << "\n";
    return kExitOk;
}

std::string identifier_for_strategy(const std::string& strategy) {
    if (strategy == "two_stage") return kRareToken;
    if (strategy == "dreambooth") return kSksToken;
    if (strategy == "textual_inversion") return kTiToken;
    throw ConfigError("no identifier for strategy \"" + strategy + "\"");
}

json report_to_json(const SimilarityReport& rep) {
    json j;
    j["strategy"] = rep.strategy;
    j["checkpoint_step"] = rep.checkpoint_step;
    j["suite"] = rep.suite_kind;
    j["mean"] = rep.mean;
    json rows = json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"prompt", r.prompt}, {"mean", r.mean}, {"per_image", r.per_image}});
    j["rows"] = rows;
    return j;
}

std::string report_to_csv(const SimilarityReport& rep) {
    std::ostringstream os;
    os << "prompt,mean\n";
    for (const auto& r : rep.rows) os << "\"" << r.prompt << "\"," << r.mean << "\n";
    os << "ALL," << rep.mean << "\n";
    return os.str();
}

// Scores one checkpoint on one suite; optionally dumps every generated image.
SimilarityReport evaluate_checkpoint(const ExperimentConfig& cfg, const Checkpoint& ckpt,
                                     const TargetSet& target, const std::string& suite_kind,
                                     uint64_t seed) {
    std::string identifier = identifier_for_strategy(ckpt.strategy);
    std::string noun = ckpt.strategy == "textual_inversion" ? "" : target.class_noun;
    PromptSuite suite = make_prompt_suite(suite_kind, noun, identifier);
    return score_personalization(ckpt, target, suite, seed, cfg.eval_settings());
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& ckpt_path,
                 const std::string& run_dir, const std::string& base_path,
                 const std::string& target_id, const std::string& suite_arg,
                 const std::string& out_dir, bool dump_images) {
    fs::create_directories(out_dir);
    Corpus corpus = corpus_from(cfg);
    TargetSet target = find_target(corpus, target_id);
    std::vector<std::string> suites;
    if (suite_arg == "both") {
        suites = {"diverse", "simple"};
    } else {
        suites = {suite_arg};
    }

    std::vector<std::pair<std::string, Checkpoint>> ckpts;  // (label, checkpoint)
    if (!run_dir.empty()) {
        json manifest = read_json(fs::path(run_dir) / "manifest.json");
        for (const auto& e : manifest.at("checkpoints")) {
            const std::string file = e.at("file").get<std::string>();
            ckpts.emplace_back(file, load_checkpoint_or_exit3((fs::path(run_dir) / file).string()));
        }
    } else {
        ckpts.emplace_back(fs::path(ckpt_path).filename().string(),
                           load_checkpoint_or_exit3(ckpt_path));
    }

    for (const auto& suite_kind : suites) {
        std::ostringstream curve;
        curve << "step,mean\n";
        std::vector<std::pair<int, double>> curve_rows;
        for (auto& [label, ckpt] : ckpts) {
            SimilarityReport rep = evaluate_checkpoint(cfg, ckpt, target, suite_kind, cfg.seed);
            const std::string stem = "eval_" + suite_kind + "_" + label;
            write_text(fs::path(out_dir) / (stem + ".json"), report_to_json(rep).dump(2) + "\n");
            write_text(fs::path(out_dir) / (stem + ".csv"), report_to_csv(rep));
            curve_rows.emplace_back(ckpt.step, rep.mean);
            if (dump_images) {
                const std::string identifier = identifier_for_strategy(ckpt.strategy);
                const std::string noun =
                    ckpt.strategy == "textual_inversion" ? "" : target.class_noun;
                PromptSuite suite = make_prompt_suite(suite_kind, noun, identifier);
                fs::path img_dir = fs::path(out_dir) / ("images_" + suite_kind + "_" + label);
                fs::create_directories(img_dir);
                for (size_t pi = 0; pi < suite.prompts.size(); ++pi) {
                    auto imgs = generate_images(
                        ckpt, suite.prompts[pi], 1, cfg.eval_settings().sampler,
                        cfg.eval_settings().sampler_steps,
                        Rng(cfg.seed).child(static_cast<uint64_t>(pi) * 1000003ull).base_seed());
                    std::ostringstream nm;
                    nm << "p" << pi << "_i0.png";
                    write_png(imgs[0], (img_dir / nm.str()).string());
                }
            }
        }
        std::sort(curve_rows.begin(), curve_rows.end());
        for (const auto& [step, mean] : curve_rows) curve << step << "," << mean << "\n";
        write_text(fs::path(out_dir) / ("curve_" + suite_kind + ".csv"), curve.str());
    }

    if (!base_path.empty()) {
        Checkpoint base = load_checkpoint_or_exit3(base_path);
        std::ostringstream drift_csv;
        drift_csv << "step,divergence,samples\n";
        std::vector<std::pair<int, DriftReport>> rows;
        for (auto& [label, ckpt] : ckpts) {
            DriftReport dr = score_language_drift(base, ckpt, target.class_noun, cfg.drift_samples,
                                                  cfg.seed, cfg.eval_settings());
            rows.emplace_back(ckpt.step, dr);
            json j;
            j["class_noun"] = dr.class_noun;
            j["divergence"] = dr.divergence;
            j["samples"] = dr.samples;
            j["checkpoint_step"] = ckpt.step;
            write_text(fs::path(out_dir) / ("drift_" + label + ".json"), j.dump(2) + "\n");
        }
        std::sort(rows.begin(), rows.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        for (const auto& [step, dr] : rows)
            drift_csv << step << "," << dr.divergence << "," << dr.samples << "\n";
        write_text(fs::path(out_dir) / "drift.csv", drift_csv.str());
    }
    std::cout << "evaluation written to " << out_dir << "\n";
    return kExitOk;
}

int cmd_report(const ExperimentConfig& cfg, const std::vector<std::string>& eval_dirs,
               const std::string& out_dir) {
    fs::create_directories(out_dir);
    // best (max mean) score per (strategy, suite) across evaluated checkpoints
    std::map<std::string, std::map<std::string, double>> best;
    std::vector<std::string> missing;
    for (const auto& dir : eval_dirs) {
        if (!fs::exists(dir)) {
            missing.push_back(dir);
            continue;
        }
        bool found = false;
        for (const auto& entry : fs::directory_iterator(dir)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("eval_", 0) != 0 || entry.path().extension() != ".json") continue;
            json j = read_json(entry.path());
            const std::string strategy = j.at("strategy").get<std::string>();
            const std::string suite = j.at("suite").get<std::string>();
            const double mean = j.at("mean").get<double>();
            auto& slot = best[strategy];
            auto it = slot.find(suite);
            if (it == slot.end() || mean > it->second) slot[suite] = mean;
            found = true;
        }
        if (!found) missing.push_back(dir);
    }
    for (const auto& m : missing) std::cerr << "report: no evaluations found in " << m << "\n";

    std::ostringstream table;
    table << "strategy,diverse_mean,simple_mean\n";
    for (const auto& [strategy, scores] : best) {
        table << strategy << ",";
        if (auto it = scores.find("diverse"); it != scores.end()) table << it->second;
        table << ",";
        if (auto it = scores.find("simple"); it != scores.end()) table << it->second;
        table << "\n";
    }
    write_text(fs::path(out_dir) / "table.csv", table.str());

    // juxtaposition grids from dumped images, one row per prompt
    for (const std::string suite_kind : {"diverse", "simple"}) {
        std::vector<fs::path> dump_dirs;
        for (const auto& dir : eval_dirs) {
            if (!fs::exists(dir)) continue;
            std::vector<fs::path> candidates;
            for (const auto& entry : fs::directory_iterator(dir))
                if (entry.is_directory() &&
                    entry.path().filename().string().rfind("images_" + suite_kind + "_", 0) == 0)
                    candidates.push_back(entry.path());
            if (!candidates.empty()) {
                std::sort(candidates.begin(), candidates.end());
                dump_dirs.push_back(candidates.back());
            }
        }
        if (dump_dirs.empty()) continue;
        std::vector<Tensor<float>> tiles;
        int prompts = 0;
        while (true) {
            bool any = false;
            for (const auto& d : dump_dirs) {
                fs::path p = d / ("p" + std::to_string(prompts) + "_i0.png");
                if (fs::exists(p)) any = true;
            }
            if (!any) break;
            ++prompts;
        }
        if (prompts == 0) continue;
        for (int pi = 0; pi < prompts; ++pi)
            for (const auto& d : dump_dirs) {
                fs::path p = d / ("p" + std::to_string(pi) + "_i0.png");
                if (fs::exists(p)) {
                    tiles.push_back(read_png(p.string()));
                } else {
                    tiles.push_back(Tensor<float>::full(
                        {3, cfg.model.unet.image_size, cfg.model.unet.image_size}, 0.0f));
                }
            }
        Tensor<float> grid = image_grid(tiles, static_cast<int>(dump_dirs.size()));
        write_png(grid, (fs::path(out_dir) / ("grid_" + suite_kind + ".png")).string());
    }
    std::cout << "report written to " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale text-to-image personalization lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", base_path, ckpt_path, run_dir, target_id, prompt;
    std::string strategy_override, suite = "both", sampler = "ddim";
    uint64_t seed = 0;
    bool seed_set = false;
    int n_images = 1, gen_steps = 20;
    bool dump_images = false;
    std::vector<std::string> eval_dirs;

    auto add_config = [&](CLI::App* cmd, bool required = true) {
        auto* opt = cmd->add_option("--config", config_path, "experiment config file");
        if (required) opt->required();
        cmd->add_option("--seed", seed, "override [run] seed")->each([&](const std::string&) {
            seed_set = true;
        });
        cmd->add_option("--out", out_dir, "output directory");
    };

    auto* pre = app.add_subcommand("pretrain", "train the base model on the generic corpus");
    add_config(pre);

    auto* per = app.add_subcommand("personalize", "run a personalization strategy");
    add_config(per);
    per->add_option("--base", base_path, "base checkpoint")->required();
    per->add_option("--target", target_id, "target object id, e.g. backpack0")->required();
    per->add_option("--strategy", strategy_override,
                    "textual_inversion | dreambooth | two_stage (overrides config)");

    auto* gen = app.add_subcommand("generate", "sample images from a checkpoint");
    gen->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    gen->add_option("--prompt", prompt, "text prompt")->required();
    gen->add_option("--n", n_images, "number of images");
    gen->add_option("--seed", seed, "sampling seed")->each([&](const std::string&) { seed_set = true; });
    gen->add_option("--out", out_dir, "output directory");
    gen->add_option("--sampler", sampler, "ddpm | ddim");
    gen->add_option("--steps", gen_steps, "sampler steps");

    auto* ev = app.add_subcommand("evaluate", "score checkpoints against a target");
    add_config(ev);
    ev->add_option("--checkpoint", ckpt_path, "single checkpoint to score");
    ev->add_option("--run", run_dir, "personalization run directory (scores all checkpoints)");
    ev->add_option("--base", base_path, "base checkpoint for the language-drift report");
    ev->add_option("--target", target_id, "target object id")->required();
    ev->add_option("--suite", suite, "simple | diverse | both");
    ev->add_flag("--dump-images", dump_images, "write one image per prompt for report grids");

    auto* rep = app.add_subcommand("report", "comparison table and grids from evaluations");
    add_config(rep);
    rep->add_option("--eval", eval_dirs, "evaluation output directories")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) return app.exit(e);
        app.exit(e);
        return kExitUsage;
    }

    try {
        ExperimentConfig cfg = ExperimentConfig::defaults();
        if (!config_path.empty()) cfg = ExperimentConfig::from_file(config_path);
        if (seed_set) cfg.seed = seed;
        if (!strategy_override.empty()) {
            cfg.strategy.strategy = strategy_override;
            cfg.strategy.validate();
        }
        if (pre->parsed()) return cmd_pretrain(cfg, out_dir);
        if (per->parsed()) return cmd_personalize(cfg, base_path, target_id, out_dir);
        if (gen->parsed())
            return cmd_generate(ckpt_path, prompt, n_images, seed, out_dir, sampler, gen_steps);
        if (ev->parsed()) {
            if (ckpt_path.empty() == run_dir.empty())
                throw ConfigError("evaluate: pass exactly one of --checkpoint or --run");
            if (suite != "simple" && suite != "diverse" && suite != "both")
                throw ConfigError("evaluate: bad --suite " + suite);
            return cmd_evaluate(cfg, ckpt_path, run_dir, base_path, target_id, suite, out_dir,
                                dump_images);
        }
        if (rep->parsed()) return cmd_report(cfg, eval_dirs, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const VocabError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissing;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}
