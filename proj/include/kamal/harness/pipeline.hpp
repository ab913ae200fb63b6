#pragma once

// Experiment stages built from a Config. Commands and the acceptance suite
// share these; every stage is a pure function of its inputs and the seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kamal/amalgam/feature.hpp"
#include "kamal/amalgam/scores.hpp"
#include "kamal/data/dataset.hpp"
#include "kamal/data/idx.hpp"
#include "kamal/harness/config.hpp"
#include "kamal/harness/metrics.hpp"
#include "kamal/learn/evaluate.hpp"
#include "kamal/learn/joint.hpp"
#include "kamal/learn/layerwise.hpp"
#include "kamal/nets/checkpoint.hpp"
#include "kamal/nets/train.hpp"

namespace kamal {

struct DataBundle {
  LabeledSet train;
  LabeledSet test;
  ClassSplit split;
  std::vector<LabeledSet> train_parts;
  std::vector<LabeledSet> test_parts;
};

inline std::uint64_t config_seed(const Config& c) { return static_cast<std::uint64_t>(c.integer("seed")); }

inline DataBundle load_data(const Config& c) {
  DataBundle d;
  const std::uint64_t seed = config_seed(c);
  int classes = 0;
  if (c.str("dataset.kind") == "synthetic") {
    classes = static_cast<int>(c.count("dataset.classes", 2));
    const auto shape = c.shape("dataset.image");
    const auto sigma = static_cast<float>(c.real("dataset.noise_sigma"));
    const std::size_t per = c.count("dataset.per_class", 1);
    d.train = gen_synthetic(classes, per, shape, sigma, seed);
    d.test = gen_synthetic(classes, c.count("dataset.test_per_class", 1), shape, sigma, seed, per);
  } else if (c.str("dataset.kind") == "idx") {
    d.train = load_idx(c.str("dataset.train_images"), c.str("dataset.train_labels"));
    d.test = load_idx(c.str("dataset.test_images"), c.str("dataset.test_labels"));
    classes = static_cast<int>(d.train.class_ids.size());
    for (int i = 0; i < classes; ++i)
      require<ConfigError>(d.train.class_ids[static_cast<std::size_t>(i)] == i,
                           "IDX labels must be the contiguous range 0..K-1");
    d.test.class_ids = d.train.class_ids;
    d.test.validate();
  } else {
    fail<ConfigError>("dataset.kind must be synthetic or idx, got '", c.str("dataset.kind"), "'");
  }
  std::vector<int> shared;
  for (auto v : c.int_list("teachers.overlap")) shared.push_back(static_cast<int>(v));
  d.split = make_class_split(classes, c.count("teachers.count", 2), seed, shared);
  d.train_parts = split_classes(d.train, d.split);
  d.test_parts = split_classes(d.test, d.split);
  return d;
}

inline NetworkSpec teacher_spec(const Config& c, std::array<std::size_t, 3> input, std::size_t classes) {
  std::vector<std::size_t> conv;
  for (auto v : c.int_list("net.conv_channels")) {
    require<ConfigError>(v >= 1, "net.conv_channels entries must be positive");
    conv.push_back(static_cast<std::size_t>(v));
  }
  NetworkSpec s = conv_classifier_spec(input, conv, c.count("net.fc_hidden"), classes, c.count("net.kernel", 1));
  s.validate();
  return s;
}

inline double width_ratio(const Config& c, std::size_t n_teachers) {
  if (c.str("amalgam.ratio") == "auto") return default_width_ratio(n_teachers);
  return c.real("amalgam.ratio");
}

inline SgdConfig sgd_of(const Config& c, const std::string& lr_key, bool decay) {
  SgdConfig s;
  s.lr = static_cast<float>(c.real(lr_key));
  s.momentum = static_cast<float>(c.real("train.momentum"));
  s.weight_decay = decay ? static_cast<float>(c.real("train.weight_decay")) : 0.0f;
  return s;
}

inline TrainHyper hyper_of(const Config& c, const std::string& epochs_key, const std::string& lr_key, bool decay,
                           std::uint64_t seed) {
  TrainHyper h;
  h.epochs = c.count(epochs_key);
  h.batch_size = c.count("train.batch_size", 1);
  h.sgd = sgd_of(c, lr_key, decay);
  h.lr_decay = static_cast<float>(c.real("train.lr_decay"));
  h.seed = seed;
  return h;
}

struct TeacherSet {
  std::vector<Network> nets;
  std::vector<std::vector<int>> classes;  // global ids per teacher

  [[nodiscard]] std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& t : nets) n += count_params(t);
    return n;
  }
};

inline TeacherSet train_teachers(const Config& c, const DataBundle& d, std::vector<MetricsRow>* rows = nullptr,
                                 const std::string& experiment = "teachers") {
  TeacherSet ts;
  const std::uint64_t seed = config_seed(c);
  for (std::size_t i = 0; i < d.split.parts.size(); ++i) {
    const NetworkSpec spec =
        teacher_spec(c, {d.train.images.dim(1), d.train.images.dim(2), d.train.images.dim(3)}, d.split.parts[i].size());
    const Network init = build_network(spec, Rng(seed, 0x7465616368ULL).split(i));
    auto [net, log] =
        train_classifier(init, d.train_parts[i], d.test_parts[i], hyper_of(c, "train.epochs_teacher", "train.lr", true,
                                                                            seed * 131ULL + i));
    if (rows) append_log(*rows, log, experiment, "teacher" + std::to_string(i + 1), seed, count_params(net));
    ts.nets.push_back(std::move(net));
    ts.classes.push_back(d.split.parts[i]);
  }
  return ts;
}

inline Tensor classes_tensor(const std::vector<int>& classes) {
  Tensor t({classes.size()});
  for (std::size_t i = 0; i < classes.size(); ++i) t[i] = static_cast<float>(classes[i]);
  return t;
}

inline std::filesystem::path teacher_path(const std::filesystem::path& dir, std::size_t i) {
  return dir / ("teacher" + std::to_string(i + 1) + ".kacp");
}

inline void save_teachers(const TeacherSet& ts, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < ts.nets.size(); ++i)
    save_checkpoint(ts.nets[i], teacher_path(dir, i), {{"meta.classes", classes_tensor(ts.classes[i])}});
}

inline TeacherSet load_teachers(const std::vector<std::filesystem::path>& paths) {
  require<ConfigError>(paths.size() >= 2, "amalgamation needs at least 2 teacher checkpoints, got ", paths.size());
  TeacherSet ts;
  for (const auto& p : paths) {
    std::map<std::string, Tensor> extras;
    Network net = load_checkpoint(p, &extras);
    const auto it = extras.find("meta.classes");
    require<IoError>(it != extras.end(), "teacher checkpoint '", p.string(), "' lacks meta.classes");
    std::vector<int> cls;
    for (float v : it->second.data()) cls.push_back(static_cast<int>(v));
    require<IoError>(cls.size() == net.spec.num_classes, "teacher checkpoint '", p.string(),
                     "': meta.classes does not match the classifier width");
    ts.nets.push_back(std::move(net));
    ts.classes.push_back(std::move(cls));
  }
  for (std::size_t i = 1; i < ts.nets.size(); ++i)
    require<ConfigError>(ts.nets[i].spec == ts.nets[0].spec, "teacher ", i + 1, " spec differs from teacher 1");
  return ts;
}

inline std::vector<std::filesystem::path> default_teacher_paths(const Config& c) {
  std::vector<std::filesystem::path> out;
  for (std::size_t i = 0; i < c.count("teachers.count", 2); ++i) out.push_back(teacher_path(c.str("out.dir"), i));
  return out;
}

// Union of the teachers' training images (unlabelled), shuffled.
inline TransferSet transfer_of(const Config& c, const DataBundle& d) {
  const std::vector<LabeledSet> src{d.train};
  return make_transfer_set(src, config_seed(c) * 7ULL + 3ULL);
}

inline NetworkSpec student_spec_of(const Config& c, const TeacherSet& ts, const LabelMap& map) {
  const std::size_t n = ts.nets.size();
  return make_student_spec(ts.nets[0].spec, n, width_ratio(c, n), map.width());
}

inline AmalgamPlan plan_of(const Config& c, const TeacherSet& ts) {
  const std::size_t n = ts.nets.size();
  return AmalgamPlan::make(parse_mode(c.str("amalgam.mode")), ts.nets[0].spec, n, width_ratio(c, n));
}

inline LayerwiseResult amalgamate_layerwise(const Config& c, const TeacherSet& ts, const FeatureBank& bank,
                                            const LabelMap& map) {
  const std::uint64_t seed = config_seed(c);
  return run_layerwise(bank, plan_of(c, ts), student_spec_of(c, ts, map), c.flag("fam.enabled"),
                       hyper_of(c, "train.epochs_ae", "train.lr_ae", false, seed * 17ULL + 1ULL),
                       hyper_of(c, "train.epochs_layerwise", "train.lr_layerwise", false, seed * 19ULL + 2ULL), seed);
}

// Randomly initialised student for joint learning without the layer-wise
// phase; FAM (identity) is inserted when enabled.
inline Network fresh_student(const Config& c, const NetworkSpec& spec) {
  Network s = build_network(spec, Rng(config_seed(c), 0x73747564));
  if (c.flag("fam.enabled")) add_fam(s);
  return s;
}

inline TrainHyper joint_hyper(const Config& c) {
  return hyper_of(c, "train.epochs_joint", "train.lr_joint", true, config_seed(c) * 23ULL + 5ULL);
}

inline KdOptions kd_options(const Config& c) {
  KdOptions kd;
  kd.temperature = static_cast<float>(c.real("kd.temperature"));
  kd.raw_logits = c.flag("kd.raw_logits");
  return kd;
}

// Everything the student-side stages need once teachers exist.
struct StudentContext {
  const DataBundle* data = nullptr;
  const TeacherSet* teachers = nullptr;
  TransferSet transfer;
  LabelMap map;
  Tensor test_scores;  // concatenated teacher logits on the test images
  EvalContext eval;

  StudentContext(const Config& c, const DataBundle& d, const TeacherSet& ts)
      : data(&d), teachers(&ts), transfer(transfer_of(c, d)), map(LabelMap::from_teachers(ts.classes)) {
    test_scores = scorer_of(std::span<const Network>(ts.nets))(d.test.images);
    eval.train = &d.train;
    eval.test = &d.test;
    eval.parts = ts.classes;
  }
  StudentContext(const StudentContext&) = delete;
  StudentContext& operator=(const StudentContext&) = delete;

  [[nodiscard]] FeatureBank bank() const { return FeatureBank(teachers->nets, transfer); }
};

inline std::pair<Network, TrainLog> run_joint(const Config& c, const StudentContext& sc, Network student) {
  const FeatureBank bank = sc.bank();
  return joint_finetune(std::move(student), bank, sc.map, joint_hyper(c), &sc.eval, &sc.test_scores);
}

inline std::pair<Network, TrainLog> run_baseline(const Config& c, const StudentContext& sc) {
  const FeatureBank bank = sc.bank();
  const NetworkSpec spec = student_spec_of(c, *sc.teachers, sc.map);
  TrainHyper h = joint_hyper(c);
  h.sgd.lr = static_cast<float>(c.real("kd.lr"));
  return kd_baseline(spec, bank, sc.map, kd_options(c), h, config_seed(c) * 29ULL + 7ULL, &sc.eval,
                     &sc.test_scores);
}

inline Container student_container(const Network& net, const LabelMap& map) {
  return to_container(net, {{"meta.label_map", map.to_tensor()}});
}

inline std::pair<Network, LabelMap> load_student(const std::filesystem::path& p) {
  std::map<std::string, Tensor> extras;
  Network net = load_checkpoint(p, &extras);
  const auto it = extras.find("meta.label_map");
  require<IoError>(it != extras.end(), "student checkpoint '", p.string(), "' lacks meta.label_map");
  return {std::move(net), LabelMap::from_tensor(it->second)};
}

// Autoencoders of every layer in one container.
inline Container autoencoder_container(const std::vector<LayerAmalgam>& amalgams) {
  Container c;
  c.spec_text = "autoencoders";
  for (std::size_t l = 1; l <= amalgams.size(); ++l) {
    const auto& la = amalgams[l - 1];
    const std::string base = "ae.layer" + std::to_string(l);
    if (la.mode != AmalgamMode::ifa) {
      c.tensors.push_back({base + ".enc", la.steps[0].enc.value});
      c.tensors.push_back({base + ".dec", la.steps[0].dec.value});
    } else {
      for (std::size_t j = 0; j < la.steps.size(); ++j) {
        const std::string s = base + ".step" + std::to_string(j + 1);
        c.tensors.push_back({s + ".enc", la.steps[j].enc.value});
        c.tensors.push_back({s + ".dec", la.steps[j].dec.value});
      }
    }
  }
  return c;
}

// Per-epoch reconstruction and stage losses; epoch 0 is the initial pass.
inline void append_layerwise_rows(std::vector<MetricsRow>& rows, const LayerwiseResult& lw,
                                  const std::string& experiment, std::uint64_t seed) {
  const std::size_t params = count_params(lw.student);
  for (std::size_t l = 1; l <= lw.amalgams.size(); ++l) {
    const auto& la = lw.amalgams[l - 1];
    for (std::size_t j = 0; j < la.reports.size(); ++j) {
      const auto& r = la.reports[j];
      std::string split = "ae" + std::to_string(l);
      if (la.mode == AmalgamMode::ifa) split += ".step" + std::to_string(j + 1);
      rows.push_back({experiment, "layerwise", seed, 0, split, r.initial_loss, 0.0, {}, params, 0.0, "ok"});
      for (std::size_t e = 0; e < r.curve.size(); ++e)
        rows.push_back({experiment, "layerwise", seed, e + 1, split, r.curve[e], 0.0, {}, params, 0.0, "ok"});
    }
    const auto& s = lw.stages[l - 1];
    const std::string split = "stage" + std::to_string(l);
    rows.push_back({experiment, "layerwise", seed, 0, split, s.initial_loss, 0.0, {}, params, 0.0, "ok"});
    for (std::size_t e = 0; e < s.loss_curve.size(); ++e)
      rows.push_back({experiment, "layerwise", seed, e + 1, split, s.loss_curve[e], 0.0, {}, params, 0.0, "ok"});
  }
}

inline MetricsRow eval_row(const std::string& experiment, const std::string& method, std::uint64_t seed,
                           std::size_t epoch, const EvalReport& rep) {
  return {experiment, method, seed, epoch, "test", 0.0, rep.accuracy_whole, rep.accuracy_per_part, rep.param_count,
          0.0, "ok"};
}

}  // namespace kamal
