#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "kamal/harness/pipeline.hpp"

namespace kamal {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

inline std::filesystem::path prepare_out(const Config& c) {
  const std::filesystem::path dir = c.str("out.dir");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require<IoError>(!ec, "cannot create output directory '", dir.string(), "': ", ec.message());
  write_text(dir / "config.cfg", c.dump());
  return dir;
}

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  [[nodiscard]] double seconds() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

inline void stamp(std::vector<MetricsRow>& rows, std::size_t from, double seconds) {
  for (std::size_t i = from; i < rows.size(); ++i) rows[i].wall_seconds = seconds;
}

// teacher{i}.kacp + teachers.csv
inline std::vector<MetricsRow> cmd_train_teachers(const Config& c) {
  const auto dir = prepare_out(c);
  const Stopwatch sw(c.flag("out.wall_time"));
  const DataBundle d = load_data(c);
  std::vector<MetricsRow> rows;
  const TeacherSet ts = train_teachers(c, d, &rows);
  stamp(rows, 0, sw.seconds());
  save_teachers(ts, dir);
  write_metrics(dir / "teachers.csv", rows);
  return rows;
}

// student_layerwise.kacp + autoencoders.kacp + amalgamate.csv
inline std::vector<MetricsRow> cmd_amalgamate(const Config& c, std::vector<std::filesystem::path> teacher_paths) {
  if (teacher_paths.empty()) teacher_paths = default_teacher_paths(c);
  const TeacherSet ts = load_teachers(teacher_paths);
  const auto dir = prepare_out(c);
  const Stopwatch sw(c.flag("out.wall_time"));
  const DataBundle d = load_data(c);
  const StudentContext sc(c, d, ts);
  const FeatureBank bank = sc.bank();
  const LayerwiseResult lw = amalgamate_layerwise(c, ts, bank, sc.map);
  std::vector<MetricsRow> rows;
  append_layerwise_rows(rows, lw, "amalgamate", config_seed(c));
  stamp(rows, 0, sw.seconds());
  write_container(dir / "student_layerwise.kacp", student_container(lw.student, sc.map));
  write_container(dir / "autoencoders.kacp", autoencoder_container(lw.amalgams));
  write_metrics(dir / "amalgamate.csv", rows);
  return rows;
}

// student_joint.kacp + baseline.kacp + learn.csv. The KD baseline is trained
// here with the same epoch budget so both curves share one file.
inline std::vector<MetricsRow> cmd_learn(const Config& c, std::filesystem::path student_path,
                                         std::vector<std::filesystem::path> teacher_paths) {
  if (teacher_paths.empty()) teacher_paths = default_teacher_paths(c);
  if (student_path.empty()) student_path = std::filesystem::path(c.str("out.dir")) / "student_layerwise.kacp";
  const TeacherSet ts = load_teachers(teacher_paths);
  auto [student, map] = load_student(student_path);
  const auto dir = prepare_out(c);
  const DataBundle d = load_data(c);
  const StudentContext sc(c, d, ts);
  require<ConfigError>(map == sc.map, "student label map does not match the teachers' classes");
  const std::uint64_t seed = config_seed(c);
  std::vector<MetricsRow> rows;
  {
    const Stopwatch sw(c.flag("out.wall_time"));
    auto [joint, log] = run_joint(c, sc, std::move(student));
    append_log(rows, log, "learn", "joint", seed, count_params(joint));
    stamp(rows, 0, sw.seconds());
    write_container(dir / "student_joint.kacp", student_container(joint, sc.map));
  }
  {
    const std::size_t from = rows.size();
    const Stopwatch sw(c.flag("out.wall_time"));
    auto [base, log] = run_baseline(c, sc);
    append_log(rows, log, "learn", "baseline", seed, count_params(base));
    stamp(rows, from, sw.seconds());
    write_container(dir / "baseline.kacp", student_container(base, sc.map));
  }
  write_metrics(dir / "learn.csv", rows);
  return rows;
}

// eval.csv: ensemble, then every student checkpoint given (or found in
// out.dir), on the held-out test set.
inline std::vector<MetricsRow> cmd_eval(const Config& c, std::vector<std::filesystem::path> models,
                                        std::vector<std::filesystem::path> teacher_paths) {
  if (teacher_paths.empty()) teacher_paths = default_teacher_paths(c);
  const TeacherSet ts = load_teachers(teacher_paths);
  const std::filesystem::path out = c.str("out.dir");
  if (models.empty())
    for (const char* name : {"baseline.kacp", "student_layerwise.kacp", "student_joint.kacp"})
      if (std::filesystem::exists(out / name)) models.push_back(out / name);
  const auto dir = prepare_out(c);
  const DataBundle d = load_data(c);
  const LabelMap map = LabelMap::from_teachers(ts.classes);
  const std::uint64_t seed = config_seed(c);
  std::vector<MetricsRow> rows;
  rows.push_back(eval_row("eval", "ensemble", seed, 0, evaluate(ts.nets, d.test, map, ts.classes)));
  for (const auto& p : models) {
    auto [net, m] = load_student(p);
    require<ConfigError>(m == map, "model '", p.string(), "' was trained for other classes");
    const std::string stem = p.stem().string();
    const std::string method = stem == "baseline"            ? "baseline"
                               : stem == "student_layerwise" ? "layerwise"
                               : stem == "student_joint"     ? "joint"
                                                             : stem;
    const std::size_t epoch = method == "layerwise" ? 0 : c.count("train.epochs_joint");
    rows.push_back(eval_row("eval", method, seed, epoch, evaluate(net, d.test, map, ts.classes)));
  }
  write_metrics(dir / "eval.csv", rows);
  return rows;
}

struct AblationCell {
  std::uint64_t seed;
  std::size_t teachers;
  std::string mode;
  bool fam;
  bool layerwise;

  [[nodiscard]] std::string id() const {
    return "ablate/n" + std::to_string(teachers) + "-" + mode + "-fam" + (fam ? "1" : "0") + "-lw" +
           (layerwise ? "1" : "0");
  }
};

// Cells in row order: seed, teacher count, mode, fam (on, off), layer-wise
// (on, off).
inline std::vector<AblationCell> ablation_cells(const Config& c) {
  std::vector<AblationCell> cells;
  for (auto s : c.int_list("ablate.seeds"))
    for (auto n : c.int_list("ablate.teachers"))
      for (const auto& mode : c.list("ablate.modes"))
        for (bool fam : {true, false})
          for (bool lw : {true, false})
            cells.push_back({static_cast<std::uint64_t>(s), static_cast<std::size_t>(n), mode, fam, lw});
  return cells;
}

// Rows when every cell succeeds: cells x 2 splits x epochs_joint.
inline std::size_t ablation_row_count(const Config& c) {
  return ablation_cells(c).size() * 2 * c.count("train.epochs_joint");
}

inline Config cell_config(const Config& base, const AblationCell& cell) {
  Config c = base;
  c.set("seed", std::to_string(cell.seed));
  c.set("teachers.count", std::to_string(cell.teachers));
  c.set("dataset.classes", std::to_string(cell.teachers * base.count("ablate.classes_per_teacher", 1)));
  c.set("teachers.overlap", "");
  c.set("amalgam.mode", cell.mode);
  c.set("fam.enabled", cell.fam ? "1" : "0");
  return c;
}

// ablate.csv over the whole factorial. Teachers are trained once per (seed,
// teacher count); joint-from-scratch does not depend on the mode and is
// computed once per (seed, teacher count, fam). A failing cell yields one
// row with status "failed" and the rest continue.
inline std::vector<MetricsRow> cmd_ablate(const Config& c) {
  const auto dir = prepare_out(c);
  const bool timed = c.flag("out.wall_time");
  std::vector<MetricsRow> rows;
  struct Trained {
    DataBundle data;
    TeacherSet teachers;
  };
  std::map<std::pair<std::uint64_t, std::size_t>, Trained> trained;
  std::map<std::tuple<std::uint64_t, std::size_t, bool>, std::pair<TrainLog, std::size_t>> scratch;
  for (const auto& cell : ablation_cells(c)) {
    const std::size_t from = rows.size();
    const Stopwatch sw(timed);
    try {
      const Config cc = cell_config(c, cell);
      const auto key = std::make_pair(cell.seed, cell.teachers);
      if (!trained.count(key)) {
        DataBundle d = load_data(cc);
        TeacherSet ts = train_teachers(cc, d);
        trained.emplace(key, Trained{std::move(d), std::move(ts)});
      }
      const Trained& t = trained.at(key);
      const StudentContext sc(cc, t.data, t.teachers);
      const auto skey = std::make_tuple(cell.seed, cell.teachers, cell.fam);
      if (cell.layerwise) {
        const FeatureBank bank = sc.bank();
        LayerwiseResult lw = amalgamate_layerwise(cc, t.teachers, bank, sc.map);
        auto [net, log] = run_joint(cc, sc, std::move(lw.student));
        append_log(rows, log, cell.id(), "joint", cell.seed, count_params(net));
      } else {
        if (!scratch.count(skey)) {
          auto [net, log] = run_joint(cc, sc, fresh_student(cc, student_spec_of(cc, t.teachers, sc.map)));
          scratch.emplace(skey, std::make_pair(std::move(log), count_params(net)));
        }
        const auto& [log, params] = scratch.at(skey);
        append_log(rows, log, cell.id(), "joint", cell.seed, params);
      }
    } catch (const Error& e) {
      rows.resize(from);
      MetricsRow r;
      r.experiment = cell.id();
      r.method = "joint";
      r.seed = cell.seed;
      r.split = "test";
      r.status = "failed";
      rows.push_back(r);
    }
    stamp(rows, from, sw.seconds());
  }
  write_metrics(dir / "ablate.csv", rows);
  return rows;
}

inline int exit_code_of(const Error& e) {
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitConfig;  // ConfigError, ShapeError, anything else from the library
}

// Runs `fn`, printing the diagnostic to `err` and mapping it to an exit code.
template <typename F>
int run_command(F&& fn, std::ostream& err) {
  try {
    fn();
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_of(e);
  }
}

}  // namespace kamal
