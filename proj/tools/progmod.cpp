// Command-line front end: generate synthetic cohorts, train the prognostic
// model, evaluate checkpoints, run ablation sweeps and repro profiles.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "progmod/cli.hpp"
#include "progmod/profiles.hpp"

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"treatment-outcome prediction toolkit: generative prognostic model "
                 "with product-of-experts fusion, on synthetic observational cohorts"};
    app.require_subcommand(1);

    // generate
    progmod::cli::GenerateArgs gen;
    std::string gen_config;
    auto* generate = app.add_subcommand("generate", "generate a synthetic cohort and splits");
    generate->add_option("--n", gen.spec.n, "cohort size");
    generate->add_option("--degree", gen.spec.degree, "bias-injection degree (1..4)")
        ->check(CLI::Range(1, 4));
    generate->add_option("--bias", gen.spec.bias_strength, "selection-bias strength (lambda)");
    generate->add_option("--seed", gen.spec.seed, "generator seed");
    generate->add_option("--k", gen.spec.k, "latent health dimension");
    generate->add_option("--tab-noise", gen.spec.tab_noise, "tabular noise scale");
    generate->add_option("--img-noise", gen.spec.img_noise, "image-feature noise scale");
    generate->add_option("--d-tab", gen.spec.d_tab, "tabular covariate count");
    generate->add_option("--d-img", gen.spec.d_img, "image feature count");
    generate->add_option("--split", gen.split_mode, "split mode: biased | uniform")
        ->check(CLI::IsMember({"biased", "uniform"}));
    generate->add_option("--config", gen_config, "generator spec JSON (flags override)");
    generate->add_option("--out", gen.out, "output directory")->required();

    // train
    progmod::cli::TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train the model on a cohort file");
    train_cmd->add_option("--cohort", tr.cohort_path, "cohort file (loaded blind)")->required();
    train_cmd->add_option("--config", tr.config_path, "train config JSON (flags override)");
    train_cmd->add_option("--seed", tr.seed, "training seed");
    train_cmd->add_option("--epochs", tr.epochs, "epochs");
    train_cmd->add_option("--batch", tr.batch_size, "batch size");
    train_cmd->add_option("--lr", tr.lr, "learning rate");
    train_cmd->add_option("--weight-decay", tr.weight_decay, "decoupled weight decay");
    train_cmd->add_option("--beta", tr.beta, "KL weight");
    train_cmd->add_option("--dim", tr.dim, "prognostic-score dimension");
    train_cmd->add_option("--mc-samples", tr.mc_samples, "Monte Carlo samples per step");
    train_cmd->add_option("--fusion", tr.fusion, "fusion variant: poe | moe | concat")
        ->check(CLI::IsMember({"poe", "moe", "concat"}));
    train_cmd->add_option("--out", tr.out, "output directory")->required();

    // eval
    progmod::cli::EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a cohort file");
    eval_cmd->add_option("--checkpoint", ev.checkpoint_path, "checkpoint file")->required();
    eval_cmd->add_option("--cohort", ev.cohort_path, "cohort file")->required();
    eval_cmd->add_option("--out", ev.out, "output directory")->required();

    // ablate
    progmod::cli::AblateArgs ab;
    std::string ab_values;
    auto* ablate = app.add_subcommand("ablate", "sweep one model axis at a bias degree");
    ablate->add_option("--axis", ab.axis, "sweep axis: dim | beta | fusion")
        ->required()
        ->check(CLI::IsMember({"dim", "beta", "fusion"}));
    ablate->add_option("--values", ab_values, "comma-separated axis values")->required();
    ablate->add_option("--seeds", ab.seeds, "number of seeds per value");
    ablate->add_option("--degree", ab.degree, "bias-injection degree (1..4)")
        ->check(CLI::Range(1, 4));
    ablate->add_option("--n", ab.generator.n, "cohort size");
    ablate->add_option("--bias", ab.generator.bias_strength, "selection-bias strength");
    ablate->add_option("--seed", ab.generator.seed, "base seed");
    ablate->add_option("--epochs", ab.epochs, "epochs per run");
    ablate->add_option("--config", ab.config_path, "train config JSON");
    ablate->add_option("--out", ab.out, "output directory")->required();

    // profile
    std::string prof_name, prof_out, prof_dir = "profiles";
    auto* profile = app.add_subcommand("profile", "run a named repro recipe end to end");
    profile->add_option("--name", prof_name, "recipe name (profiles/<name>.json)")->required();
    profile->add_option("--profiles-dir", prof_dir, "directory holding recipe files");
    profile->add_option("--out", prof_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 1;
    }

    try {
        if (generate->parsed()) {
            if (!gen_config.empty()) {
                progmod::GeneratorSpec merged;
                progmod::from_json(progmod::cli::detail::load_json_file(gen_config), merged);
                if (generate->count("--n")) merged.n = gen.spec.n;
                if (generate->count("--degree")) merged.degree = gen.spec.degree;
                if (generate->count("--bias")) merged.bias_strength = gen.spec.bias_strength;
                if (generate->count("--seed")) merged.seed = gen.spec.seed;
                if (generate->count("--k")) merged.k = gen.spec.k;
                if (generate->count("--tab-noise")) merged.tab_noise = gen.spec.tab_noise;
                if (generate->count("--img-noise")) merged.img_noise = gen.spec.img_noise;
                if (generate->count("--d-tab")) merged.d_tab = gen.spec.d_tab;
                if (generate->count("--d-img")) merged.d_img = gen.spec.d_img;
                gen.spec = merged;
            }
            progmod::cli::cmd_generate(gen);
        } else if (train_cmd->parsed()) {
            progmod::cli::cmd_train(tr);
        } else if (eval_cmd->parsed()) {
            progmod::cli::cmd_eval(ev);
        } else if (ablate->parsed()) {
            ab.values = split_csv(ab_values);
            progmod::cli::cmd_ablate(ab);
        } else if (profile->parsed()) {
            progmod::run_profile(prof_dir, prof_name, prof_out);
        }
    } catch (const progmod::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const progmod::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const progmod::MetricError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
