#include "mbfa/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mbfa/factored.hpp"
#include "mbfa/ingest.hpp"
#include "mbfa/io.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"
#include "mbfa/sampler.hpp"

namespace mbfa::expt {

namespace {

std::string trim(std::string_view s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string_view::npos) return {};
    const auto end = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(begin, end - begin + 1));
}

struct KeyValues {
    std::map<std::string, std::string> values;
    mutable std::map<std::string, bool> used;

    bool has(const std::string& key) const {
        auto it = values.find(key);
        if (it == values.end()) return false;
        used[key] = true;
        return true;
    }
    std::string get(const std::string& key, const std::string& fallback = {}) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        used[key] = true;
        return it->second;
    }
    template <class T>
    T number(const std::string& key, T fallback) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        used[key] = true;
        std::istringstream in(it->second);
        T out;
        if (!(in >> out)) throw ConfigError("config key '" + key + "' is not a number");
        return out;
    }
    bool flag(const std::string& key, bool fallback) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        used[key] = true;
        const std::string v = it->second;
        if (v == "true" || v == "on" || v == "1") return true;
        if (v == "false" || v == "off" || v == "0") return false;
        throw ConfigError("config key '" + key + "' must be true/false");
    }
    void check_all_used() const {
        for (const auto& [key, value] : values)
            if (!used.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// model.<name>.<field> / clone.<name>.<field> enumeration
std::vector<std::string> section_names(const KeyValues& kv, const std::string& prefix) {
    std::vector<std::string> names;
    for (const auto& [key, value] : kv.values) {
        if (key.rfind(prefix + ".", 0) != 0) continue;
        const auto rest = key.substr(prefix.size() + 1);
        const auto dot = rest.find('.');
        if (dot == std::string::npos)
            throw ConfigError("config key '" + key + "' needs the form " + prefix +
                              ".<name>.<field>");
        const auto name = rest.substr(0, dot);
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    }
    return names;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
        if (kv.values.count(key)) throw ConfigError("duplicate config key '" + key + "'");
        kv.values[key] = value;
    }

    ExperimentConfig cfg;
    cfg.source_text = text;
    cfg.seed = kv.number<std::uint64_t>("seed", 0);
    cfg.out_dir = kv.get("out");
    if (cfg.out_dir.empty()) throw ConfigError("config needs an 'out' directory");

    int sources = 0;
    if (kv.has("dist.order")) {
        ++sources;
        manybody::CouplingConfig dc;
        dc.order = kv.number<std::uint32_t>("dist.order", 2);
        dc.rank = kv.number<std::uint32_t>("dist.rank", 0);
        dc.bernoulli_rate = kv.number<double>("dist.rate", 0.8);
        dc.length = kv.number<std::uint32_t>("dist.L", 0);
        dc.vocab = kv.number<std::uint32_t>("dist.V", 0);
        dc.seed = derive_seed(cfg.seed, "dist");
        if (kv.has("dist.scale")) {
            dc.scale = kv.number<double>("dist.scale", 1.0);
        } else {
            // convenience knob: scale = c / (rank^2 L^(p-1)) keeps the
            // conditionals at order-one sharpness for any (rank, L, p)
            const double c = kv.number<double>("dist.scale_c", 1.0);
            dc.scale = c / (double(dc.rank) * dc.rank * ipow(double(dc.length), dc.order - 1));
        }
        dc.validate();
        cfg.dist = dc;
        cfg.gibbs_train_rows = kv.number<std::uint64_t>("gibbs.train_rows", 0);
        cfg.gibbs_test_rows = kv.number<std::uint64_t>("gibbs.test_rows", 0);
        cfg.gibbs_burnin = kv.number<std::uint32_t>("gibbs.burnin", 100);
        cfg.gibbs_thinning = kv.number<std::uint32_t>("gibbs.thinning", 10);
        cfg.gibbs_chains = kv.number<std::uint32_t>("gibbs.chains", 64);
        if (cfg.gibbs_train_rows == 0)
            throw ConfigError("distribution source needs gibbs.train_rows");
        if (cfg.gibbs_test_rows == 0) throw ConfigError("distribution source needs gibbs.test_rows");
    }
    if (kv.has("corpus.input")) {
        ++sources;
        cfg.corpus_input = kv.get("corpus.input");
        cfg.corpus_cap = kv.number<std::uint32_t>("corpus.cap", 0);
        cfg.corpus_length = kv.number<std::uint32_t>("corpus.L", 0);
        cfg.corpus_test_fraction = kv.number<double>("corpus.test_fraction", 0.1);
        if (cfg.corpus_cap < 2 || cfg.corpus_length == 0)
            throw ConfigError("corpus source needs corpus.cap >= 2 and corpus.L >= 1");
    }
    if (kv.has("data.train")) {
        ++sources;
        cfg.data_train = kv.get("data.train");
        cfg.data_test = kv.get("data.test");
        if (cfg.data_test.empty()) throw ConfigError("data source needs data.test");
    }
    if (sources != 1)
        throw ConfigError("config needs exactly one data source (dist.*, corpus.* or data.*)");

    cfg.train_defaults.learning_rate = kv.number<double>("train.lr", 0.1);
    cfg.train_defaults.batch_size = kv.number<std::uint32_t>("train.batch", 256);
    cfg.train_defaults.epochs = kv.number<std::uint32_t>("train.epochs", 1);
    cfg.train_defaults.weight_decay = kv.number<double>("train.weight_decay", 0.0);
    cfg.train_defaults.mask_fraction = kv.number<double>("train.mask_fraction", 0.15);
    const std::string masking = kv.get("train.masking", "cyclic");
    if (masking == "cyclic") {
        cfg.train_defaults.masking = training::Masking::cyclic;
    } else if (masking == "random") {
        cfg.train_defaults.masking = training::Masking::random_fraction;
    } else {
        throw ConfigError("train.masking must be cyclic or random");
    }
    const std::string schedule = kv.get("train.schedule", "constant");
    if (schedule == "constant") {
        cfg.train_defaults.schedule = training::Schedule::constant;
    } else if (schedule == "cosine") {
        cfg.train_defaults.schedule = training::Schedule::cosine;
    } else {
        throw ConfigError("train.schedule must be constant or cosine");
    }
    cfg.train_defaults.validate();

    for (const auto& name : section_names(kv, "model")) {
        const std::string p = "model." + name + ".";
        ModelSpec spec;
        spec.name = name;
        const std::string type = kv.get(p + "type");
        if (type == "factored") {
            spec.is_factored = true;
            spec.layers_or_k = kv.number<std::uint32_t>(p + "layers", 1);
        } else if (type == "kbody") {
            spec.is_factored = false;
            spec.layers_or_k = kv.number<std::uint32_t>(p + "k", 2);
        } else {
            throw ConfigError("model." + name + ".type must be factored or kbody");
        }
        spec.value_rank = kv.number<std::uint32_t>(p + "value_rank", 0);
        spec.skip_connections = kv.flag(p + "skip", true);
        spec.layer_norm = kv.flag(p + "layer_norm", false);
        spec.init_scale = kv.number<double>(p + "init_scale", 1.0);
        spec.epochs = kv.number<std::uint32_t>(p + "epochs", 0);
        spec.lr = kv.number<double>(p + "lr", 0.0);
        cfg.models.push_back(spec);
    }

    for (const auto& name : section_names(kv, "clone")) {
        const std::string p = "clone." + name + ".";
        CloneSpec spec;
        spec.name = name;
        spec.model = kv.get(p + "model");
        spec.sweeps = kv.number<std::uint32_t>(p + "sweeps", 20);
        spec.seeds = kv.number<std::uint64_t>(p + "seeds", 620);
        if (spec.model.empty()) throw ConfigError("clone." + name + " needs a model");
        bool found = false;
        for (const auto& m : cfg.models)
            if (m.name == spec.model && m.is_factored) found = true;
        if (!found)
            throw ConfigError("clone." + name + ".model must name a factored model of this run");
        cfg.clones.push_back(spec);
    }

    if (kv.has("crosseval.layers")) {
        cfg.crosseval.layers = kv.number<std::uint32_t>("crosseval.layers", 0);
        cfg.crosseval.value_rank = kv.number<std::uint32_t>("crosseval.value_rank", 0);
        cfg.crosseval.epochs = kv.number<std::uint32_t>("crosseval.epochs", 0);
        cfg.crosseval.lr = kv.number<double>("crosseval.lr", 0.0);
        cfg.crosseval.init_scale = kv.number<double>("crosseval.init_scale", 1.0);
        cfg.crosseval.datasets = split_list(kv.get("crosseval.datasets"));
        for (const auto& ds : cfg.crosseval.datasets) {
            bool found = false;
            for (const auto& c : cfg.clones)
                if (c.name == ds) found = true;
            if (!found)
                throw ConfigError("crosseval.datasets entry '" + ds + "' is not a clone name");
        }
    }

    kv.check_all_used();
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file_text(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return parse(text);
}

namespace {

struct Manifest {
    std::ostringstream lines;

    void note(const std::string& line) { lines << line << "\n"; }
    void artifact(const std::filesystem::path& dir, const std::string& relative) {
        const auto path = dir / relative;
        const auto bytes = std::filesystem::file_size(path);
        note("artifact " + relative + " fnv64=" + hex64(fnv1a64_file(path)) +
             " bytes=" + std::to_string(bytes));
    }
};

training::TrainConfig model_train_config(const ExperimentConfig& cfg, const std::string& name,
                                      std::uint32_t epochs_override, double lr_override) {
    training::TrainConfig tc = cfg.train_defaults;
    if (epochs_override > 0) tc.epochs = epochs_override;
    if (lr_override > 0.0) tc.learning_rate = lr_override;
    tc.seed = derive_seed(cfg.seed, "train." + name);
    return tc;
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg, bool dry_run, std::ostream& log) {
    const auto& out = cfg.out_dir;

    if (dry_run) {
        log << "plan: experiment -> " << out.string() << " (seed " << cfg.seed << ")\n";
        if (cfg.dist) {
            log << "  [dist]  order-" << cfg.dist->order << " joint, rank " << cfg.dist->rank
                << ", L=" << cfg.dist->length << ", V=" << cfg.dist->vocab
                << ", scale=" << cfg.dist->scale << " -> dist.mbdj\n";
            log << "  [gibbs] " << cfg.gibbs_train_rows << " train + " << cfg.gibbs_test_rows
                << " test rows (burnin " << cfg.gibbs_burnin << ", thinning "
                << cfg.gibbs_thinning << ", " << cfg.gibbs_chains
                << " chains) -> train.mbtk test.mbtk\n";
        } else if (!cfg.corpus_input.empty()) {
            log << "  [ingest] " << cfg.corpus_input.string() << " cap " << cfg.corpus_cap
                << " L " << cfg.corpus_length << " -> train.mbtk test.mbtk vocab.txt\n";
        } else {
            log << "  [data] reuse " << cfg.data_train.string() << " / " << cfg.data_test.string()
                << "\n";
        }
        for (const auto& m : cfg.models)
            log << "  [train] " << m.name << " ("
                << (m.is_factored ? "factored n=" : "kbody k=") << m.layers_or_k << ") -> "
                << m.name << (m.is_factored ? ".fact" : ".mbkb") << " + " << m.name
                << ".metrics.csv\n";
        for (const auto& c : cfg.clones)
            log << "  [clone] " << c.name << " from " << c.model << ", " << c.sweeps
                << " sweeps, " << c.seeds << " seed rows -> " << c.name << ".mbtk\n";
        if (cfg.crosseval.layers > 0)
            log << "  [crosseval] fresh " << cfg.crosseval.layers
                << "-layer stack evaluated on test + clones -> crosseval.metrics.csv\n";
        log << "  [manifest] manifest.txt\n";
        return;
    }

    std::filesystem::create_directories(out);
    Manifest manifest;
    manifest.note("workbench = mbfa 0.1.0");
    manifest.note("seed = " + std::to_string(cfg.seed));
    manifest.note("config_fnv64 = " + hex64(fnv1a64(cfg.source_text.data(), cfg.source_text.size())));

    std::string stage = "setup";
    try {
        TokenDataset train_data, test_data;

        if (cfg.dist) {
            stage = "dist";
            log << "[dist] building couplings...\n";
            const auto dist = manybody::build_random_couplings(*cfg.dist);
            manybody::save_distribution(out / "dist.mbdj", dist);
            manifest.artifact(out, "dist.mbdj");

            stage = "gibbs";
            log << "[gibbs] sampling " << cfg.gibbs_train_rows << "+" << cfg.gibbs_test_rows
                << " rows...\n";
            train_data = manybody::gibbs_sample(dist, cfg.gibbs_train_rows, cfg.gibbs_burnin,
                                                cfg.gibbs_thinning,
                                                derive_seed(cfg.seed, "gibbs.train"),
                                                cfg.gibbs_chains);
            test_data = manybody::gibbs_sample(dist, cfg.gibbs_test_rows, cfg.gibbs_burnin,
                                               cfg.gibbs_thinning,
                                               derive_seed(cfg.seed, "gibbs.test"),
                                               cfg.gibbs_chains);
            save_dataset(out / "train.mbtk", train_data);
            save_dataset(out / "test.mbtk", test_data);
            manifest.artifact(out, "train.mbtk");
            manifest.artifact(out, "test.mbtk");
        } else if (!cfg.corpus_input.empty()) {
            stage = "ingest";
            log << "[ingest] " << cfg.corpus_input.string() << "\n";
            auto [all, vocab] =
                text::ingest_corpus(read_file_text(cfg.corpus_input), cfg.corpus_cap,
                                    cfg.corpus_length);
            const auto rows = all.rows();
            auto test_rows = static_cast<std::uint64_t>(std::llround(
                double(rows) * cfg.corpus_test_fraction));
            test_rows = std::clamp<std::uint64_t>(test_rows, 1, rows - 1);
            train_data.length = test_data.length = all.length;
            train_data.vocab = test_data.vocab = all.vocab;
            train_data.provenance = test_data.provenance = Provenance::corpus;
            const auto split = (rows - test_rows) * all.length;
            train_data.tokens.assign(all.tokens.begin(), all.tokens.begin() + split);
            test_data.tokens.assign(all.tokens.begin() + split, all.tokens.end());
            save_dataset(out / "train.mbtk", train_data);
            save_dataset(out / "test.mbtk", test_data);
            text::save_vocabulary(out / "vocab.txt", vocab);
            manifest.artifact(out, "train.mbtk");
            manifest.artifact(out, "test.mbtk");
            manifest.artifact(out, "vocab.txt");
        } else {
            stage = "data";
            train_data = load_dataset(cfg.data_train);
            test_data = load_dataset(cfg.data_test);
            manifest.note("data.train = " + cfg.data_train.string());
            manifest.note("data.test = " + cfg.data_test.string());
        }

        std::map<std::string, model::FactoredStack> trained;
        for (const auto& spec : cfg.models) {
            stage = "train." + spec.name;
            const auto tc = model_train_config(cfg, spec.name, spec.epochs, spec.lr);
            log << "[train] " << spec.name << " (" << (spec.is_factored ? "factored" : "kbody")
                << ", epochs " << tc.epochs << ")\n";
            if (spec.is_factored) {
                model::StackConfig sc;
                sc.layers = spec.layers_or_k;
                sc.length = train_data.length;
                sc.vocab = train_data.vocab;
                sc.value_rank = spec.value_rank;
                sc.skip_connections = spec.skip_connections;
                sc.layer_norm = spec.layer_norm;
                auto stack = model::make_stack(sc);
                model::init_gaussian(stack, derive_seed(cfg.seed, "init." + spec.name),
                                     spec.init_scale);
                auto metrics = training::train(stack, train_data, test_data, tc);
                metrics.write_csv(out / (spec.name + ".metrics.csv"));
                model::save_checkpoint(out / (spec.name + ".fact"), stack);
                manifest.artifact(out, spec.name + ".fact");
                manifest.artifact(out, spec.name + ".metrics.csv");
                manifest.note("model " + spec.name + " final_test_loss = " +
                              std::to_string(metrics.final_loss("test")));
                trained.emplace(spec.name, std::move(stack));
            } else {
                auto result = training::train_kbody_baseline(spec.layers_or_k, train_data, test_data,
                                                          tc);
                result.log.write_csv(out / (spec.name + ".metrics.csv"));
                training::save_kbody(out / (spec.name + ".mbkb"), result.model);
                manifest.artifact(out, spec.name + ".mbkb");
                manifest.artifact(out, spec.name + ".metrics.csv");
                manifest.note("model " + spec.name + " final_test_loss = " +
                              std::to_string(result.final_test_loss));
            }
        }

        std::map<std::string, TokenDataset> clone_data;
        for (const auto& spec : cfg.clones) {
            stage = "clone." + spec.name;
            log << "[clone] " << spec.name << " from " << spec.model << " (" << spec.sweeps
                << " sweeps)\n";
            const auto& source = trained.at(spec.model);
            TokenDataset seeds;
            seeds.length = test_data.length;
            seeds.vocab = test_data.vocab;
            seeds.provenance = test_data.provenance;
            const auto n = std::min<std::uint64_t>(spec.seeds, test_data.rows());
            seeds.tokens.assign(test_data.tokens.begin(),
                                test_data.tokens.begin() + n * test_data.length);
            const auto clone_seed = derive_seed(cfg.seed, "clone." + spec.name);
            auto result = sampler::generate_clone(source, seeds, spec.sweeps, clone_seed);
            save_dataset(out / (spec.name + ".mbtk"), result.data);
            sampler::write_score_trace_csv(out / (spec.name + ".trace.csv"), result);
            sampler::write_clone_metadata(out / (spec.name + ".meta"),
                                          fnv1a64_file(out / (spec.model + ".fact")),
                                          fnv1a64_file(out / "test.mbtk"), spec.sweeps,
                                          clone_seed);
            manifest.artifact(out, spec.name + ".mbtk");
            manifest.artifact(out, spec.name + ".trace.csv");
            manifest.artifact(out, spec.name + ".meta");
            clone_data.emplace(spec.name, std::move(result.data));
        }

        if (cfg.crosseval.layers > 0) {
            stage = "crosseval";
            log << "[crosseval] fresh " << cfg.crosseval.layers << "-layer stack\n";
            model::StackConfig sc;
            sc.layers = cfg.crosseval.layers;
            sc.length = train_data.length;
            sc.vocab = train_data.vocab;
            sc.value_rank = cfg.crosseval.value_rank;
            auto stack = model::make_stack(sc);
            model::init_gaussian(stack, derive_seed(cfg.seed, "init.crosseval"),
                                 cfg.crosseval.init_scale);
            std::vector<training::EvalSet> extras;
            extras.reserve(cfg.crosseval.datasets.size());
            for (const auto& name : cfg.crosseval.datasets)
                extras.push_back({name, &clone_data.at(name)});
            const auto tc =
                model_train_config(cfg, "crosseval", cfg.crosseval.epochs, cfg.crosseval.lr);
            auto metrics = training::train(stack, train_data, test_data, tc, extras);
            metrics.write_csv(out / "crosseval.metrics.csv");
            model::save_checkpoint(out / "crosseval.fact", stack);
            manifest.artifact(out, "crosseval.fact");
            manifest.artifact(out, "crosseval.metrics.csv");
        }

        stage = "manifest";
        manifest.note("status = ok");
        std::string text = manifest.lines.str();
        text += "--- config ---\n" + cfg.source_text;
        write_file_text(out / "manifest.txt", text);
        log << "[done] " << (out / "manifest.txt").string() << "\n";
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        // keep partial outputs, mark the failure
        manifest.note("status = FAILED at stage " + stage + ": " + e.what());
        std::error_code ec;
        std::filesystem::create_directories(out, ec);
        if (!ec) {
            write_file_text(out / "FAILED", stage + ": " + e.what() + "\n");
            write_file_text(out / "manifest.txt",
                            manifest.lines.str() + "--- config ---\n" + cfg.source_text);
        }
        throw StageError(stage, e.what());
    }
}

}  // namespace mbfa::expt
