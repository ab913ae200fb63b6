#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/ops.hpp"
#include "kamal/core/tensor.hpp"

namespace kamal {

enum class LayerKind { conv, fc };

// One parametric layer plus the activation/pool stage that follows it.
//
// For an fc layer with flatten_before, in_ch is the channel count of the
// incoming feature map; the actual input width is in_ch*H*W of that map.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  NonParam after;
  bool flatten_before = false;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::array<std::size_t, 3> input{3, 32, 32};  // C, H, W
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

  [[nodiscard]] std::size_t depth() const { return layers.size(); }
  [[nodiscard]] const LayerSpec& layer(std::size_t l) const { return layers.at(l - 1); }  // 1-based

  // Per-sample shapes (leading batch extent 1). raw[l-1] is layer l's output
  // before its activation/pool; post[l-1] is after.
  struct Shapes {
    std::vector<Shape> raw;
    std::vector<Shape> post;
    std::vector<std::size_t> in_features;  // input width of each layer's weight
  };

  // Validates the spec and derives every intermediate shape. Throws a
  // ConfigError naming the first inconsistent layer.
  [[nodiscard]] Shapes shapes() const {
    require<ConfigError>(input[0] >= 1 && input[1] >= 1 && input[2] >= 1, "network input extents must be >= 1");
    require<ConfigError>(!layers.empty(), "network has no layers");
    Shapes s;
    Shape cur{1, input[0], input[1], input[2]};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& ls = layers[i];
      const std::size_t l = i + 1;
      require<ConfigError>(ls.in_ch >= 1 && ls.out_ch >= 1, "layer ", l, ": channel counts must be positive");
      const std::size_t have = cur[1];
      require<ConfigError>(ls.in_ch == have, "layer ", l, ": in_ch ", ls.in_ch,
                           " does not match previous output width ", have);
      if (ls.kind == LayerKind::conv) {
        require<ConfigError>(cur.size() == 4, "layer ", l, ": conv layer after a flattened layer");
        require<ConfigError>(ls.kernel >= 1 && ls.stride >= 1, "layer ", l, ": kernel and stride must be >= 1");
        const std::size_t ho = ops::conv_out_extent(cur[2], ls.kernel, ls.stride, ls.pad);
        const std::size_t wo = ops::conv_out_extent(cur[3], ls.kernel, ls.stride, ls.pad);
        require<ConfigError>(ho >= 1 && wo >= 1, "layer ", l, ": non-positive conv output extent");
        s.in_features.push_back(ls.in_ch * ls.kernel * ls.kernel);
        cur = {1, ls.out_ch, ho, wo};
      } else {
        std::size_t features = ls.in_ch;
        if (cur.size() == 4) {
          require<ConfigError>(ls.flatten_before || (cur[2] == 1 && cur[3] == 1), "layer ", l,
                               ": fc layer on a spatial map needs flatten_before");
          features = cur[1] * cur[2] * cur[3];
        }
        s.in_features.push_back(features);
        cur = {1, ls.out_ch};
      }
      s.raw.push_back(cur);
      if (ls.after.pools()) {
        require<ConfigError>(cur.size() == 4, "layer ", l, ": pooling after an fc layer");
        require<ConfigError>(ls.after.pool_stride >= 1, "layer ", l, ": pool stride must be >= 1");
        require<ConfigError>(ls.after.pool_kernel <= cur[2] && ls.after.pool_kernel <= cur[3], "layer ", l,
                             ": pooling window larger than feature map ", shape_str(cur));
        cur = ops::nonparam_shape(cur, ls.after);
      }
      s.post.push_back(cur);
    }
    const LayerSpec& last = layers.back();
    require<ConfigError>(last.kind == LayerKind::fc, "layer ", layers.size(), ": final layer must be fc");
    require<ConfigError>(last.out_ch == num_classes, "layer ", layers.size(), ": final out_ch ", last.out_ch,
                         " != num_classes ", num_classes);
    require<ConfigError>(last.after.identity(), "layer ", layers.size(), ": final layer must not have act/pool");
    return s;
  }

  void validate() const { (void)shapes(); }

  // Canonical text form; embedded in checkpoints.
  [[nodiscard]] std::string canonical() const {
    std::ostringstream os;
    os << "kamal-net 1\n";
    os << "input " << input[0] << ' ' << input[1] << ' ' << input[2] << '\n';
    os << "classes " << num_classes << '\n';
    for (const auto& ls : layers) {
      os << "layer " << (ls.kind == LayerKind::conv ? "conv" : "fc") << " in=" << ls.in_ch << " out=" << ls.out_ch
         << " k=" << ls.kernel << " s=" << ls.stride << " p=" << ls.pad
         << " act=" << (ls.after.activation == Activation::relu ? "relu" : "none") << " pool=" << ls.after.pool_kernel
         << '/' << ls.after.pool_stride << " flatten=" << (ls.flatten_before ? 1 : 0) << '\n';
    }
    return os.str();
  }

  static NetworkSpec parse(const std::string& text) {
    NetworkSpec spec;
    std::istringstream is(text);
    std::string line;
    bool header = false;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "kamal-net") {
        int v = 0;
        ls >> v;
        require<IoError>(v == 1, "unsupported network spec version ", v);
        header = true;
      } else if (key == "input") {
        ls >> spec.input[0] >> spec.input[1] >> spec.input[2];
      } else if (key == "classes") {
        ls >> spec.num_classes;
      } else if (key == "layer") {
        LayerSpec l;
        std::string kind;
        ls >> kind;
        require<IoError>(kind == "conv" || kind == "fc", "bad layer kind '", kind, "' in network spec");
        l.kind = kind == "conv" ? LayerKind::conv : LayerKind::fc;
        std::string tok;
        while (ls >> tok) {
          const auto eq = tok.find('=');
          require<IoError>(eq != std::string::npos, "bad token '", tok, "' in network spec");
          const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
          if (k == "in") l.in_ch = std::stoul(v);
          else if (k == "out") l.out_ch = std::stoul(v);
          else if (k == "k") l.kernel = std::stoul(v);
          else if (k == "s") l.stride = std::stoul(v);
          else if (k == "p") l.pad = std::stoul(v);
          else if (k == "act") l.after.activation = v == "relu" ? Activation::relu : Activation::none;
          else if (k == "pool") {
            const auto slash = v.find('/');
            require<IoError>(slash != std::string::npos, "bad pool token '", v, "'");
            l.after.pool_kernel = std::stoul(v.substr(0, slash));
            l.after.pool_stride = std::stoul(v.substr(slash + 1));
          } else if (k == "flatten") l.flatten_before = v == "1";
          else fail<IoError>("unknown layer field '", k, "' in network spec");
        }
        spec.layers.push_back(l);
      } else {
        fail<IoError>("unknown network spec line '", line, "'");
      }
    }
    require<IoError>(header, "network spec text lacks its header line");
    return spec;
  }
};

// Conv stack (kernel k, pad k/2, relu, 2x2 max-pool) followed by one hidden
// fc layer with relu and the fc classifier.
inline NetworkSpec conv_classifier_spec(std::array<std::size_t, 3> input, const std::vector<std::size_t>& conv_channels,
                                        std::size_t fc_hidden, std::size_t num_classes, std::size_t kernel = 3,
                                        std::size_t pool = 2) {
  NetworkSpec spec;
  spec.input = input;
  spec.num_classes = num_classes;
  std::size_t in = input[0];
  for (auto c : conv_channels) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.in_ch = in;
    l.out_ch = c;
    l.kernel = kernel;
    l.stride = 1;
    l.pad = kernel / 2;
    l.after = NonParam{Activation::relu, pool, pool};
    spec.layers.push_back(l);
    in = c;
  }
  if (fc_hidden > 0) {
    LayerSpec h;
    h.kind = LayerKind::fc;
    h.in_ch = in;
    h.out_ch = fc_hidden;
    h.flatten_before = !conv_channels.empty();
    h.after = NonParam{Activation::relu, 0, 0};
    spec.layers.push_back(h);
    in = fc_hidden;
  }
  LayerSpec out;
  out.kind = LayerKind::fc;
  out.in_ch = in;
  out.out_ch = num_classes;
  out.flatten_before = fc_hidden == 0 && !conv_channels.empty();
  spec.layers.push_back(out);
  return spec;
}

// Default desk-scale teacher: 3 conv blocks 16/32/48, fc 128, classifier.
inline NetworkSpec default_teacher_spec(std::size_t num_classes, std::array<std::size_t, 3> input = {3, 32, 32}) {
  return conv_classifier_spec(input, {16, 32, 48}, 128, num_classes);
}

// Default width ratio for n teachers: sqrt(0.6/n), which puts the student
// near 0.6x the summed teacher parameters for fc-heavy nets (hidden fc
// weights scale with ratio^2 * n^2). Kept strictly inside (1/n, 1).
inline double default_width_ratio(std::size_t n_teachers) {
  require<ConfigError>(n_teachers >= 2, "student needs at least 2 teachers, got ", n_teachers);
  const double n = static_cast<double>(n_teachers);
  return std::clamp(std::sqrt(0.6 / n), 1.0 / n + 1e-3, 1.0 - 1e-3);
}

inline std::size_t student_width(std::size_t teacher_width, std::size_t n_teachers, double ratio) {
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_teachers * teacher_width)));
  const std::size_t lo = teacher_width + 1;
  const std::size_t hi = n_teachers * teacher_width - 1;
  require<ConfigError>(lo <= hi, "no integer width strictly between ", teacher_width, " and ", n_teachers * teacher_width);
  return std::clamp(target, lo, hi);
}

// Student layout: every hidden width becomes round(ratio*n*w), clamped into
// the open interval (w, n*w); the classifier covers all classes.
inline NetworkSpec make_student_spec(const NetworkSpec& teacher, std::size_t n_teachers, double width_ratio,
                                     std::size_t total_classes) {
  require<ConfigError>(n_teachers >= 2, "student needs at least 2 teachers, got ", n_teachers);
  require<ConfigError>(width_ratio > 1.0 / static_cast<double>(n_teachers) && width_ratio < 1.0,
                       "width ratio ", width_ratio, " outside (1/", n_teachers, ", 1)");
  require<ConfigError>(total_classes >= 1, "student needs at least one class");
  teacher.validate();
  NetworkSpec s = teacher;
  s.num_classes = total_classes;
  std::size_t prev = teacher.input[0];
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    LayerSpec& l = s.layers[i];
    l.in_ch = prev;
    if (i + 1 == s.layers.size()) {
      l.out_ch = total_classes;
    } else {
      l.out_ch = student_width(teacher.layers[i].out_ch, n_teachers, width_ratio);
    }
    prev = l.out_ch;
  }
  return s;
}

}  // namespace kamal
