#include "costom/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"costom: steering small language models toward mental-state tracking"};
    app.require_subcommand(1);

    std::string config;
    costom::RunOptions options;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<int> layers;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-corpus", "generate the synthetic dialogue corpus and its splits"},
        {"pretrain", "train the base language model on corpus text"},
        {"trace", "sweep activation patching over layers and mental states"},
        {"steer", "train encoder adapters through the frozen decoder"},
        {"generate", "produce steered responses and score them"},
        {"probe", "fit linear probes and estimate usable information per layer"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config, "INI configuration file")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "output directory")->required();
        sub->add_option("--seed", seed, "override run.seed");
        sub->add_option("--layers", layers, "override the swept layers")->delimiter(',');
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    options.out = out;
    options.seed = seed;
    if (!layers.empty()) options.layers = layers;
    return costom::run_command(app.get_subcommands().front()->get_name(), config, options);
}
