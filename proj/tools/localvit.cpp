// Command-line front end: summarize presets, emit the complexity tables,
// run finite-difference gradient checks, and train toy-task comparisons.
// Exit codes: 0 success, 1 validation error, 2 numerical failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "localvit/cli.hpp"

using namespace localvit;

int main(int argc, char** argv) {
    CLI::App app{"LocalViT desk-scale toolkit: complexity accounting, gradient "
                 "verification, and seeded training comparisons"};
    app.require_subcommand(1);

    cli::SummarizeOptions sum_opts;
    auto* sum = app.add_subcommand(
        "summarize", "Per-layer parameter/MAC summary of a preset or config file");
    sum->add_option("--preset", sum_opts.preset_name, "preset name");
    sum->add_option("--config", sum_opts.config_path, "model config JSON file");
    sum->add_option("--out", sum_opts.out_dir,
                    "output directory (default $LOCALVIT_OUT_DIR or ./out)");

    cli::TablesOptions tab_opts;
    auto* tab = app.add_subcommand("tables", "Emit ablation tables as CSV files");
    tab->add_option("--tables", tab_opts.tables, "table ids, e.g. 1,2,3,4")
        ->delimiter(',');
    tab->add_option("--results", tab_opts.results_path,
                    "comparison.csv from a prior train run; fills the accuracy column");
    tab->add_option("--out", tab_opts.out_dir, "output directory");

    cli::GradcheckOptions gc_opts;
    auto* gc = app.add_subcommand(
        "gradcheck", "Check every parameter block against central finite differences");
    gc->add_option("--preset", gc_opts.preset_name,
                   "micro-scale preset (default micro-localvit)");
    std::string gc_config;
    gc->add_option("--config", gc_config, "model config JSON file");
    gc->add_option("--tolerance", gc_opts.tolerance,
                   "relative-error tolerance (default 1e-4)");
    gc->add_option("--corrupt", gc_opts.corrupt_block,
                   "negative control: damage this block's analytic gradient");
    gc->add_option("--batch", gc_opts.batch, "toy samples in the check batch (default 2)");
    gc->add_option("--out", gc_opts.out_dir, "output directory");

    cli::TrainOptions tr_opts;
    std::string toy_arg = "default";
    auto* tr = app.add_subcommand(
        "train", "Train presets on the seeded toy task and emit comparison artifacts");
    tr->add_option("--preset", tr_opts.presets, "preset, repeatable")->required();
    tr->add_option("--seeds", tr_opts.seeds, "seeds per preset (default 3)");
    tr->add_option("--toy", toy_arg, "'default' or a toy-spec JSON file");
    tr->add_option("--epochs", tr_opts.optimizer.epochs, "training epochs (default 160)");
    tr->add_option("--lr", tr_opts.optimizer.lr, "initial learning rate (default 1e-3)");
    tr->add_option("--batch-size", tr_opts.optimizer.batch_size, "batch size (default 32)");
    tr->add_option("--weight-decay", tr_opts.optimizer.weight_decay,
                   "decoupled weight decay (default 0.05)");
    tr->add_option("--smoothing", tr_opts.optimizer.label_smoothing,
                   "label smoothing (default 0.1)");
    tr->add_flag("--checkpoints", tr_opts.checkpoints, "save a checkpoint per finished run");
    tr->add_option("--out", tr_opts.out_dir, "output directory");

    std::string manifest_file, rerun_out;
    auto* rr = app.add_subcommand("rerun", "Re-execute a command from its manifest");
    rr->add_option("--manifest", manifest_file, "manifest JSON written by a prior run")
        ->required();
    rr->add_option("--out", rerun_out, "override the output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : cli::kValidationError;
    }

    try {
        if (sum->parsed()) return cli::run_summarize(sum_opts, std::cout);
        if (tab->parsed()) return cli::run_tables(tab_opts, std::cout);
        if (gc->parsed()) {
            if (!gc_config.empty()) {
                gc_opts.preset_name.clear();
                gc_opts.config_path = gc_config;
            }
            return cli::run_gradcheck(gc_opts, std::cout);
        }
        if (tr->parsed()) {
            if (toy_arg != "default")
                tr_opts.toy = cli::toy_from_json(nlohmann::json::parse(read_file(toy_arg)));
            return cli::run_train(tr_opts, std::cout);
        }
        if (rr->parsed()) return cli::run_from_manifest(manifest_file, rerun_out, std::cout);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kValidationError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kValidationError;
    }
    return cli::kValidationError;
}
