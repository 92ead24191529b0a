#include "sfda/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <stdexcept>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "sfda/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sfda {
namespace data {

namespace io_trace {
namespace {
std::mutex g_mu;
std::vector<std::string> g_log;
}  // namespace

void clear() {
  std::lock_guard<std::mutex> lk(g_mu);
  g_log.clear();
}

void record(const std::string& path) {
  std::lock_guard<std::mutex> lk(g_mu);
  g_log.push_back(fs::absolute(fs::path(path)).lexically_normal().string());
}

std::vector<std::string> snapshot() {
  std::lock_guard<std::mutex> lk(g_mu);
  return g_log;
}

bool any_under(const std::string& dir) {
  const std::string root = fs::absolute(fs::path(dir)).lexically_normal().string();
  std::lock_guard<std::mutex> lk(g_mu);
  for (const auto& p : g_log) {
    if (p.size() > root.size() && p.compare(0, root.size(), root) == 0 &&
        p[root.size()] == fs::path::preferred_separator)
      return true;
    if (p == root) return true;
  }
  return false;
}
}  // namespace io_trace

SceneSpec source_spec(int classes, int height, int width) {
  SceneSpec s;
  s.num_classes = classes;
  s.height = height;
  s.width = width;
  return s;
}

SceneSpec target_spec(int classes, int height, int width) {
  SceneSpec s = source_spec(classes, height, width);
  s.domain = Domain::kTarget;
  s.shift.hue_deg = 40.0;
  s.shift.noise_std = 0.05;
  s.shift.texture_freq_scale = 1.6;
  return s;
}

namespace {

void check_spec(const SceneSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("SceneSpec: need at least 2 classes");
  if (spec.height <= 0 || spec.width <= 0)
    throw std::invalid_argument("SceneSpec: non-positive dimensions");
}

struct Rgb {
  double r, g, b;
};

// h in degrees (any value), s,v in [0,1]
Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

struct Shape {
  int type;  // 0 rect, 1 ellipse, 2 triangle
  int cls;
  double cx, cy, hw, hh, skew;
};

double tri_edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

}  // namespace

LabeledSample generate_scene(uint64_t seed, const SceneSpec& spec) {
  check_spec(spec);
  const int c = spec.num_classes, h = spec.height, w = spec.width;

  // One stream for everything the two domains share (geometry, palette,
  // texture parameters) and a separate one for the target-only pixel noise,
  // so labels stay bit-identical across domains for a given seed.
  Rng rng = substream(seed, "scene");
  Rng noise_rng = substream(seed, "scene.noise");

  const double horizon = (0.3 + 0.4 * rng.uniform()) * h;

  std::vector<double> hue(static_cast<size_t>(c));
  std::vector<double> sat(static_cast<size_t>(c));
  std::vector<double> val(static_cast<size_t>(c));
  for (int k = 0; k < c; ++k) {
    hue[size_t(k)] = 360.0 * k / c + 12.0 * rng.uniform();
    sat[size_t(k)] = 0.55 + 0.25 * rng.uniform();
    val[size_t(k)] = 0.55 + 0.30 * rng.uniform();
  }

  const double tex_angle = 6.283185307179586 * rng.uniform();
  const double tex_freq = 3.0 + 5.0 * rng.uniform();
  const double tex_phase = 6.283185307179586 * rng.uniform();
  const double tex_amp = 0.12 + 0.08 * rng.uniform();

  // 2..6 shapes, biased upward so foreground classes rarely go missing
  const int nshapes = 2 + int(std::max(rng.below(5), rng.below(5)));
  std::vector<int> fg(size_t(std::max(0, c - 2)));
  std::iota(fg.begin(), fg.end(), 2);
  rng.shuffle(fg);

  std::vector<Shape> shapes;
  for (int s = 0; s < nshapes; ++s) {
    Shape sh;
    sh.type = int(rng.below(3));
    if (c <= 2) {
      sh.cls = 1;  // degenerate palette: no foreground classes to assign
    } else if (s < int(fg.size())) {
      sh.cls = fg[size_t(s)];  // first shapes cover distinct classes
    } else {
      sh.cls = 2 + int(rng.below(c - 2));
    }
    sh.cx = w * (0.1 + 0.8 * rng.uniform());
    sh.cy = h * (0.1 + 0.8 * rng.uniform());
    sh.hw = w * (0.12 + 0.18 * rng.uniform());
    sh.hh = h * (0.12 + 0.18 * rng.uniform());
    sh.skew = rng.uniform(-0.6, 0.6);
    shapes.push_back(sh);
  }

  LabeledSample out;
  out.labels = Tensor({h, w});
  out.image = Tensor({3, h, w});

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.labels.at2(y, x) = (y < horizon) ? 0.0 : 1.0;

  for (const Shape& s : shapes) {
    const int y0 = std::max(0, int(s.cy - s.hh) - 1), y1 = std::min(h - 1, int(s.cy + s.hh) + 1);
    const int x0 = std::max(0, int(s.cx - s.hw) - 1), x1 = std::min(w - 1, int(s.cx + s.hw) + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        bool inside = false;
        const double dx = x - s.cx, dy = y - s.cy;
        if (s.type == 0) {
          inside = std::fabs(dx) <= s.hw && std::fabs(dy) <= s.hh;
        } else if (s.type == 1) {
          inside = (dx / s.hw) * (dx / s.hw) + (dy / s.hh) * (dy / s.hh) <= 1.0;
        } else {
          const double ax = s.cx + s.skew * s.hw, ay = s.cy - s.hh;  // apex
          const double bx = s.cx - s.hw, by = s.cy + s.hh;
          const double ex = s.cx + s.hw, ey = s.cy + s.hh;
          const double e0 = tri_edge(ax, ay, bx, by, x, y);
          const double e1 = tri_edge(bx, by, ex, ey, x, y);
          const double e2 = tri_edge(ex, ey, ax, ay, x, y);
          inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        }
        if (inside) out.labels.at2(y, x) = double(s.cls);
      }
  }

  const double freq = tex_freq * spec.shift.texture_freq_scale;
  const double ca = std::cos(tex_angle), sa = std::sin(tex_angle);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int cls = int(out.labels.at2(y, x));
      const double tex =
          1.0 + tex_amp * std::sin(6.283185307179586 * freq * (x * ca + y * sa) / w + tex_phase);
      const double v = std::clamp(val[size_t(cls)] * tex, 0.0, 1.0);
      Rgb rgb = hsv_to_rgb(hue[size_t(cls)] + spec.shift.hue_deg, sat[size_t(cls)], v);
      double px[3] = {rgb.r, rgb.g, rgb.b};
      for (int ch = 0; ch < 3; ++ch) {
        if (spec.shift.noise_std > 0.0) px[ch] += spec.shift.noise_std * noise_rng.normal();
        // snap to the 8-bit grid here so the PNG round-trip is exact
        const double q = std::round(255.0 * std::clamp(px[ch], 0.0, 1.0)) / 255.0;
        out.image.at3(ch, y, x) = q;
      }
    }
  return out;
}

namespace {

std::string sample_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d.png", i);
  return buf;
}

std::string domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

Domain domain_of(const std::string& s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw std::runtime_error("manifest: unknown domain " + s);
}

void write_image_png(const std::string& path, const Tensor& img) {
  const int h = img.dim(1), w = img.dim(2);
  cv::Mat mat(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto& px = mat.at<cv::Vec3b>(y, x);  // BGR on disk
      px[0] = uchar(std::lround(255.0 * img.at3(2, y, x)));
      px[1] = uchar(std::lround(255.0 * img.at3(1, y, x)));
      px[2] = uchar(std::lround(255.0 * img.at3(0, y, x)));
    }
  if (!cv::imwrite(path, mat)) throw std::runtime_error("cannot write " + path);
}

void write_labels_png(const std::string& path, const Tensor& labels) {
  const int h = labels.dim(0), w = labels.dim(1);
  cv::Mat mat(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) mat.at<uchar>(y, x) = uchar(labels.at2(y, x));
  if (!cv::imwrite(path, mat)) throw std::runtime_error("cannot write " + path);
}

Tensor read_image_png(const std::string& path, int h, int w) {
  io_trace::record(path);
  cv::Mat mat = cv::imread(path, cv::IMREAD_COLOR);
  if (mat.empty()) throw std::runtime_error("cannot read " + path);
  if (mat.rows != h || mat.cols != w) throw std::runtime_error("bad image size in " + path);
  Tensor t({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto& px = mat.at<cv::Vec3b>(y, x);
      t.at3(0, y, x) = px[2] / 255.0;
      t.at3(1, y, x) = px[1] / 255.0;
      t.at3(2, y, x) = px[0] / 255.0;
    }
  return t;
}

Tensor read_labels_png(const std::string& path, int h, int w, int num_classes) {
  io_trace::record(path);
  cv::Mat mat = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (mat.empty()) throw std::runtime_error("cannot read " + path);
  if (mat.rows != h || mat.cols != w) throw std::runtime_error("bad label size in " + path);
  Tensor t({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int v = mat.at<uchar>(y, x);
      if (v >= num_classes) throw std::runtime_error("label id out of range in " + path);
      t.at2(y, x) = double(v);
    }
  return t;
}

json spec_to_json(const SceneSpec& s) {
  return json{{"num_classes", s.num_classes},
              {"height", s.height},
              {"width", s.width},
              {"domain", domain_name(s.domain)},
              {"hue_deg", s.shift.hue_deg},
              {"noise_std", s.shift.noise_std},
              {"texture_freq_scale", s.shift.texture_freq_scale}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.num_classes = j.at("num_classes").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.domain = domain_of(j.at("domain").get<std::string>());
  s.shift.hue_deg = j.at("hue_deg").get<double>();
  s.shift.noise_std = j.at("noise_std").get<double>();
  s.shift.texture_freq_scale = j.at("texture_freq_scale").get<double>();
  return s;
}

}  // namespace

DatasetManifest build_dataset(int n, const SceneSpec& spec, uint64_t seed,
                              const std::string& out_dir, bool force) {
  check_spec(spec);
  if (n < 0) throw std::invalid_argument("build_dataset: negative count");
  const fs::path root(out_dir);
  if (fs::exists(root / "manifest.json") && !force)
    throw std::runtime_error("build_dataset: " + out_dir +
                             " already holds a dataset (use force to overwrite)");
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");

  DatasetManifest m;
  m.root = root.string();
  m.split = root.filename().string();
  m.count = n;
  m.seed = seed;
  m.spec = spec;
  for (int i = 0; i < n; ++i) {
    const uint64_t sample_seed = substream(seed, "dataset.sample", uint64_t(i)).raw();
    LabeledSample s = generate_scene(sample_seed, spec);
    const std::string img_rel = "images/" + sample_name(i);
    const std::string lab_rel = "labels/" + sample_name(i);
    write_image_png((root / img_rel).string(), s.image);
    write_labels_png((root / lab_rel).string(), s.labels);
    m.image_files.push_back(img_rel);
    m.label_files.push_back(lab_rel);
  }

  json j{{"split", m.split}, {"count", m.count}, {"seed", m.seed},
         {"spec", spec_to_json(spec)}, {"images", m.image_files}, {"labels", m.label_files}};
  std::ofstream f(root / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest under " + out_dir);
  f << j.dump(2) << "\n";
  return m;
}

DatasetManifest load_manifest(const std::string& dir) {
  const fs::path path = fs::path(dir) / "manifest.json";
  io_trace::record(path.string());
  std::ifstream f(path);
  if (!f) throw std::runtime_error("no manifest at " + path.string());
  json j;
  f >> j;

  DatasetManifest m;
  m.root = dir;
  m.split = j.at("split").get<std::string>();
  m.count = j.at("count").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.spec = spec_from_json(j.at("spec"));
  m.image_files = j.at("images").get<std::vector<std::string>>();
  m.label_files = j.at("labels").get<std::vector<std::string>>();
  if (int(m.image_files.size()) != m.count || int(m.label_files.size()) != m.count)
    throw std::runtime_error("manifest count mismatch in " + path.string());
  return m;
}

std::pair<Tensor, Tensor> load_batch(const DatasetManifest& m, const std::vector<int>& indices) {
  const int b = int(indices.size());
  const int h = m.spec.height, w = m.spec.width;
  Tensor images({b, 3, h, w});
  Tensor labels({b, h, w});
  for (int i = 0; i < b; ++i) {
    const int idx = indices[size_t(i)];
    if (idx < 0 || idx >= m.count)
      throw std::out_of_range("load_batch: index " + std::to_string(idx) + " outside [0," +
                              std::to_string(m.count) + ")");
    const fs::path root(m.root);
    Tensor img = read_image_png((root / m.image_files[size_t(idx)]).string(), h, w);
    Tensor lab = read_labels_png((root / m.label_files[size_t(idx)]).string(), h, w,
                                 m.spec.num_classes);
    std::copy(img.data(), img.data() + img.numel(), images.data() + int64_t(i) * 3 * h * w);
    std::copy(lab.data(), lab.data() + lab.numel(), labels.data() + int64_t(i) * h * w);
  }
  return {std::move(images), std::move(labels)};
}

}  // namespace data
}  // namespace sfda
