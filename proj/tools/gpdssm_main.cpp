#include "gpdssm/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Hip socket shape modelling and dysplasia classification"};
    app.require_subcommand(1, 1);

    std::string manifest, config, out, model = "all";
    long long seed = -1;
    for (const char* name : {"generate", "preprocess", "fit", "infer", "classify", "evaluate", "visualize"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--manifest", manifest, "dataset manifest CSV")->required();
        sub->add_option("--config", config, "key=value configuration file")->required();
        sub->add_option("--out", out, "output directory (defaults to the manifest's directory)");
        sub->add_option("--seed", seed, "overrides the configured seed")->check(CLI::NonNegativeNumber);
        sub->add_option("--model", model, "gpdssm, lddmm, angles or all")
            ->check(CLI::IsMember({"gpdssm", "lddmm", "angles", "all"}));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        gpdssm::CommandContext ctx;
        ctx.manifest = manifest;
        ctx.config = gpdssm::PipelineConfig::load(config);
        if (seed >= 0) ctx.config.seed = static_cast<std::uint64_t>(seed);
        ctx.out = out.empty() ? (ctx.manifest.has_parent_path() ? ctx.manifest.parent_path() : std::filesystem::path(".")) : std::filesystem::path(out);
        ctx.model = gpdssm::parse_model_choice(model);
        gpdssm::run_command(app.get_subcommands().front()->get_name(), ctx);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return gpdssm::exit_code_for(e);
    }
    return 0;
}
