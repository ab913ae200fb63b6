// kamal: teacher training, amalgamation, joint learning, evaluation and
// ablation from a flat config file.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kamal/harness/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> set;
};

void add_common(CLI::App* sub, Common& o) {
  sub->add_option("--config", o.config, "config file (key = value)");
  sub->add_option("--seed", o.seed, "override the master seed");
  sub->add_option("--out", o.out, "override out.dir");
  sub->add_option("--set", o.set, "override any key, e.g. --set train.epochs_joint=5");
}

kamal::Config resolve(const Common& o) {
  kamal::Config c = o.config.empty() ? kamal::Config{} : kamal::Config::load(o.config);
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    kamal::require<kamal::ConfigError>(eq != std::string::npos, "--set expects key=value, got '", kv, "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.set("seed", std::to_string(*o.seed));
  if (!o.out.empty()) c.set("out.dir", o.out);
  return c;
}

std::vector<std::filesystem::path> paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge amalgamation of CNN classifiers"};
  app.require_subcommand(1);

  Common o;
  std::vector<std::string> teachers, models;
  std::string student;

  auto* train = app.add_subcommand("train-teachers", "train one teacher per class part");
  add_common(train, o);

  auto* amalg = app.add_subcommand("amalgamate", "autoencoders + layer-wise student learning");
  add_common(amalg, o);
  amalg->add_option("--teachers", teachers, "teacher checkpoints (default: out.dir/teacher{i}.kacp)");

  auto* learn = app.add_subcommand("learn", "joint fine-tuning of the amalgamated student and the KD baseline");
  add_common(learn, o);
  learn->add_option("--teachers", teachers, "teacher checkpoints");
  learn->add_option("--student", student, "layer-wise student (default: out.dir/student_layerwise.kacp)");

  auto* eval = app.add_subcommand("eval", "test accuracy of the ensemble and student checkpoints");
  add_common(eval, o);
  eval->add_option("--teachers", teachers, "teacher checkpoints");
  eval->add_option("--models", models, "student checkpoints (default: those present in out.dir)");

  auto* ablate = app.add_subcommand("ablate", "factorial over seeds, teacher counts, modes, FAM and layer-wise");
  add_common(ablate, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kamal::kExitConfig;
  }

  return kamal::run_command(
      [&] {
        const kamal::Config c = resolve(o);
        std::vector<kamal::MetricsRow> rows;
        if (*train) rows = kamal::cmd_train_teachers(c);
        else if (*amalg) rows = kamal::cmd_amalgamate(c, paths(teachers));
        else if (*learn) rows = kamal::cmd_learn(c, student, paths(teachers));
        else if (*eval) rows = kamal::cmd_eval(c, paths(models), paths(teachers));
        else rows = kamal::cmd_ablate(c);
        if (*eval) std::cout << kamal::metrics_csv(rows);
        else std::cout << rows.size() << " rows written to " << c.str("out.dir") << '\n';
      },
      std::cerr);
}
