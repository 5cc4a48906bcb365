#include "afseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "afseg/npy.hpp"
#include "afseg/pgm.hpp"
#include "afseg/rng.hpp"

namespace afseg {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw InvalidInput("unknown split '" + s + "' (expected train or test)");
}

std::vector<const Sample*> Dataset::class_samples(int class_id) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples)
    if (s.class_id == class_id) out.push_back(&s);
  return out;
}

void Dataset::validate() const {
  std::set<int> train(train_classes.begin(), train_classes.end());
  for (int c : test_classes)
    if (train.count(c)) throw InvalidInput("class " + std::to_string(c) + " is in both the train and test split");
  for (const auto& s : samples) {
    if (s.mask.size() == 0) throw InvalidInput("sample " + std::to_string(s.index) + " of class " +
                                               std::to_string(s.class_id) + " has no mask");
    if (s.image.dim(2) != s.mask.rows() || s.image.dim(3) != s.mask.cols())
      throw InvalidInput("sample mask and image sizes differ");
  }
}

ShapeFamily family_of(int class_id) { return static_cast<ShapeFamily>(((class_id % 4) + 4) % 4); }

namespace {

constexpr double kPi = std::numbers::pi;

struct ClassStyle {
  double color_a[3], color_b[3];
  double stripe_period, stripe_angle;
  double aspect_lo, aspect_hi;
};

void hsv_to_rgb(double h, double s, double v, double out[3]) {
  const double c = v * s, hp = h * 6.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  out[0] = r + m, out[1] = g + m, out[2] = b + m;
}

ClassStyle class_style(std::uint64_t seed, int class_id) {
  Rng rng(derive_seed(seed, "class", std::uint64_t(class_id)));
  std::uniform_real_distribution<double> u;
  ClassStyle st;
  // Golden-ratio steps keep the hues of any few classes far apart.
  Rng hue_rng(derive_seed(seed, "hue-offset"));
  const double offset = u(hue_rng);
  const double hue = std::fmod(offset + 0.6180339887498949 * class_id + 0.03 * u(rng), 1.0);
  hsv_to_rgb(hue, 0.55 + 0.4 * u(rng), 0.75 + 0.25 * u(rng), st.color_a);
  hsv_to_rgb(std::fmod(hue + 0.08 + 0.25 * u(rng), 1.0), 0.5 + 0.4 * u(rng), 0.45 + 0.25 * u(rng), st.color_b);
  st.stripe_period = 3.0 + 5.0 * u(rng);
  st.stripe_angle = kPi * u(rng);
  st.aspect_lo = 0.55 + 0.2 * u(rng);
  st.aspect_hi = std::min(1.0, st.aspect_lo + 0.3);
  return st;
}

// Rasterize one shape by testing pixel centers; `scale` is the outer radius in pixels.
Mask rasterize(ShapeFamily fam, Index S, double cx, double cy, double scale, double aspect, double angle,
               double phase1, double phase2) {
  Mask m = Mask::Zero(S, S);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (Index r = 0; r < S; ++r)
    for (Index c = 0; c < S; ++c) {
      const double dx = double(c) + 0.5 - cx, dy = double(r) + 0.5 - cy;
      const double u = (ca * dx + sa * dy) / scale, v = (-sa * dx + ca * dy) / (scale * aspect);
      bool in = false;
      switch (fam) {
        case ShapeFamily::Ellipse:
          in = u * u + v * v <= 1.0;
          break;
        case ShapeFamily::Rectangle:
          in = std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
          break;
        case ShapeFamily::Ring: {
          const double rr = std::sqrt(u * u + (v * aspect) * (v * aspect));
          in = rr <= 1.0 && rr >= 0.55;
          break;
        }
        case ShapeFamily::Blob: {
          const double rr = std::sqrt(u * u + v * v), th = std::atan2(v, u);
          in = rr <= 1.0 + 0.28 * std::sin(3 * th + phase1) + 0.14 * std::sin(5 * th + phase2);
          break;
        }
      }
      m(r, c) = in ? 1 : 0;
    }
  return m;
}

double family_area(ShapeFamily fam, double aspect) {
  switch (fam) {
    case ShapeFamily::Ellipse:
      return kPi * aspect;
    case ShapeFamily::Rectangle:
      return 4.0 * aspect;
    case ShapeFamily::Ring:
      return kPi * (1 - 0.55 * 0.55);
    case ShapeFamily::Blob:
      return kPi * aspect * (1 + 0.5 * (0.28 * 0.28 + 0.14 * 0.14));
  }
  return 1.0;
}

Sample make_sample(const SynthOptions& opt, const ClassStyle& st, int class_id, int index) {
  const Index S = opt.image_size;
  Rng rng(derive_seed(opt.seed, "sample", std::uint64_t(class_id), std::uint64_t(index)));
  std::uniform_real_distribution<double> u;
  std::normal_distribution<double> n01;
  const ShapeFamily fam = family_of(class_id);

  Sample s;
  s.class_id = class_id;
  s.index = index;
  const double total = double(S * S);
  for (int attempt = 0;; ++attempt) {
    const double frac = 0.12 + 0.18 * u(rng);
    const double aspect = fam == ShapeFamily::Ring ? 1.0 : st.aspect_lo + (st.aspect_hi - st.aspect_lo) * u(rng);
    const double scale = std::sqrt(frac * total / family_area(fam, aspect));
    const double cx = double(S) * (0.3 + 0.4 * u(rng)), cy = double(S) * (0.3 + 0.4 * u(rng));
    const double angle = kPi * u(rng), p1 = 2 * kPi * u(rng), p2 = 2 * kPi * u(rng);
    s.mask = rasterize(fam, S, cx, cy, scale, aspect, angle, p1, p2);
    const double got = s.mask.cast<double>().sum() / total;
    if ((got >= 0.10 && got <= 0.35) || attempt >= 200) break;
  }

  // Shared background: dark, a faint smooth gradient, low noise.
  const double bg = 0.10 + 0.04 * u(rng), gx = 0.03 * (u(rng) - 0.5), gy = 0.03 * (u(rng) - 0.5);
  const double stripe_phase = 2 * kPi * u(rng);
  const double sc = std::cos(st.stripe_angle), ss = std::sin(st.stripe_angle);
  s.image = TensorD(Shape{1, 3, S, S});
  for (Index r = 0; r < S; ++r)
    for (Index c = 0; c < S; ++c) {
      const double nr = double(r) / double(S) - 0.5, nc = double(c) / double(S) - 0.5;
      double px[3];
      if (s.mask(r, c)) {
        const double t = 0.5 + 0.5 * std::sin(2 * kPi * (sc * double(c) + ss * double(r)) / st.stripe_period + stripe_phase);
        for (int k = 0; k < 3; ++k) px[k] = t * st.color_a[k] + (1 - t) * st.color_b[k] + 0.03 * n01(rng);
      } else {
        for (int k = 0; k < 3; ++k) px[k] = bg + gx * nc + gy * nr + 0.015 * n01(rng);
      }
      for (int k = 0; k < 3; ++k) s.image(0, k, r, c) = double(float(std::clamp(px[k], 0.0, 1.0)));
    }
  return s;
}

}  // namespace

Dataset synth_dataset(const SynthOptions& opt) {
  if (opt.classes < 2) throw InvalidInput("synth needs at least 2 classes");
  if (opt.per_class < 2) throw InvalidInput("synth needs at least 2 samples per class");
  if (opt.image_size < 32 || opt.image_size % 32 != 0)
    throw InvalidInput("synth image size must be a positive multiple of 32, got " + std::to_string(opt.image_size));
  const int n_test = opt.test_classes > 0 ? opt.test_classes : std::max(1, opt.classes / 3);
  if (n_test >= opt.classes) throw InvalidInput("synth needs at least one training class");

  Dataset ds;
  ds.image_size = opt.image_size;
  ds.seed = opt.seed;
  for (int c = 0; c < opt.classes; ++c) {
    (c < opt.classes - n_test ? ds.train_classes : ds.test_classes).push_back(c);
    const ClassStyle st = class_style(opt.seed, c);
    for (int i = 0; i < opt.per_class; ++i) ds.samples.push_back(make_sample(opt, st, c, i));
  }
  ds.validate();
  return ds;
}

namespace {

std::string sample_stem(const Sample& s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%03d_s%03d", s.class_id, s.index);
  return buf;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json classes = nlohmann::json::array();
  std::vector<int> all = ds.train_classes;
  all.insert(all.end(), ds.test_classes.begin(), ds.test_classes.end());
  std::sort(all.begin(), all.end());
  for (int c : all) {
    const bool train = std::find(ds.train_classes.begin(), ds.train_classes.end(), c) != ds.train_classes.end();
    nlohmann::json samples = nlohmann::json::array();
    for (const Sample* s : ds.class_samples(c)) {
      const std::string stem = sample_stem(*s);
      TensorD chw = s->image.reshaped(Shape{3, s->image.dim(2), s->image.dim(3)});
      npy::write((fs::path(dir) / (stem + ".npy")).string(), chw, npy::Dtype::F32);
      pgm::write((fs::path(dir) / (stem + ".pgm")).string(), s->mask);
      samples.push_back({{"index", s->index}, {"image", stem + ".npy"}, {"mask", stem + ".pgm"}});
    }
    classes.push_back({{"id", c}, {"split", train ? "train" : "test"}, {"samples", samples}});
  }
  const nlohmann::json manifest = {{"format", "afseg-dataset"}, {"version", 1}, {"image_size", ds.image_size},
                                   {"seed", ds.seed},           {"classes", classes}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw InvalidInput("cannot write dataset manifest under " + dir);
}

Dataset load_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw InvalidInput("no dataset manifest at " + mpath.string());
  Dataset ds;
  try {
    const nlohmann::json m = nlohmann::json::parse(in);
    if (m.at("format") != "afseg-dataset") throw InvalidInput(mpath.string() + " is not a dataset manifest");
    ds.image_size = m.at("image_size").get<Index>();
    ds.seed = m.at("seed").get<std::uint64_t>();
    for (const auto& c : m.at("classes")) {
      const int id = c.at("id").get<int>();
      (split_from_string(c.at("split").get<std::string>()) == Split::Train ? ds.train_classes : ds.test_classes)
          .push_back(id);
      for (const auto& s : c.at("samples")) {
        Sample smp;
        smp.class_id = id;
        smp.index = s.at("index").get<int>();
        const TensorD chw = npy::read<double>((fs::path(dir) / s.at("image").get<std::string>()).string());
        if (chw.rank() != 3 || chw.dim(0) != 3)
          throw InvalidInput("dataset image must be (3,H,W), got " + shape_str(chw.shape()));
        smp.image = chw.reshaped(Shape{1, 3, chw.dim(1), chw.dim(2)});
        smp.mask = pgm::read((fs::path(dir) / s.at("mask").get<std::string>()).string());
        ds.samples.push_back(std::move(smp));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(mpath.string() + ": " + e.what());
  }
  ds.validate();
  return ds;
}

}  // namespace afseg
