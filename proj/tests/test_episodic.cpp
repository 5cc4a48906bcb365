#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <set>

#include "afseg/episodic.hpp"

using namespace afseg;
using namespace afseg::episodic;

namespace {

const Dataset& small_dataset() {
  static const Dataset ds = [] {
    SynthOptions o;
    o.classes = 6;
    o.per_class = 6;
    o.test_classes = 2;
    o.seed = 21;
    return synth_dataset(o);
  }();
  return ds;
}

const ToyEncoder& encoder() {
  static const ToyEncoder enc(EncoderConfig{{16, 24, 32, 32}, 5, false});
  return enc;
}

spectral::SpectralOptions grid16() {
  spectral::SpectralOptions s;
  s.grid_h = s.grid_w = 16;
  return s;
}

// Upper 0.999 quantile of the chi-square distribution, Wilson-Hilferty.
double chi2_crit(int dof) {
  const double z = 3.090, a = 2.0 / (9.0 * dof);
  return dof * std::pow(1 - a + z * std::sqrt(a), 3);
}

}  // namespace

TEST_CASE("synthetic dataset structure") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SynthOptions o;
    o.classes = 12;
    o.per_class = 10;
    o.seed = seed;
    const Dataset ds = synth_dataset(o);
    CHECK(ds.train_classes.size() == 8);
    CHECK(ds.test_classes.size() == 4);
    std::set<int> train(ds.train_classes.begin(), ds.train_classes.end());
    for (int c : ds.test_classes) CHECK(train.count(c) == 0);
    CHECK(ds.samples.size() == 120);
    for (const auto& s : ds.samples) {
      CHECK(s.image.shape() == Shape{1, 3, 64, 64});
      const double frac = double(s.mask.cast<int>().sum()) / double(s.mask.size());
      CHECK(frac >= 0.10);
      CHECK(frac <= 0.35);
    }
    CHECK_NOTHROW(ds.validate());
  }
  // Deterministic under the seed.
  SynthOptions o;
  o.classes = 4;
  o.per_class = 3;
  o.seed = 8;
  const Dataset a = synth_dataset(o), b = synth_dataset(o);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(max_abs_diff(a.samples[i].image, b.samples[i].image) == 0);
    CHECK((a.samples[i].mask == b.samples[i].mask).all());
  }
  o.image_size = 48;
  CHECK_THROWS_AS(synth_dataset(o), InvalidInput);
}

TEST_CASE("shape families") {
  CHECK(family_of(0) == ShapeFamily::Ellipse);
  CHECK(family_of(1) == ShapeFamily::Rectangle);
  CHECK(family_of(2) == ShapeFamily::Ring);
  CHECK(family_of(7) == ShapeFamily::Blob);
  // A ring has a hole: its mask is not filled at the centroid of its bounding box.
  const Dataset& ds = small_dataset();
  for (const Sample* s : ds.class_samples(2)) {
    const BBox b = mask_bbox(s->mask);
    CHECK(s->mask((b.row_min + b.row_max) / 2, (b.col_min + b.col_max) / 2) == 0);
  }
}

TEST_CASE("within-class hypercolumn affinity exceeds across-class") {
  // Classes c and c + 4 share a shape family; their hues sit 4 golden-ratio steps
  // (about 0.47 of the color wheel) apart, so only the texture tells them apart.
  const Dataset& ds = small_dataset();
  auto fg_features = [&](const Sample& s) {
    const auto hc = spectral::build_hypercolumn(encoder().encode(s.image), 16, 16);
    const TensorD m = mask_target(s.mask, 16, 16);
    std::vector<Eigen::VectorXd> rows;
    for (Index i = 0; i < m.size(); ++i)
      if (m[i] > 0) rows.push_back(hc.features.row(i).transpose());
    return rows;
  };
  auto affinity = [](const auto& a, const auto& b) {
    double s = 0;
    for (const auto& x : a)
      for (const auto& y : b) s += std::max(0.0, x.dot(y));
    return s / double(a.size() * b.size());
  };
  for (auto [c1, c2] : {std::pair{0, 4}, std::pair{1, 5}}) {
    std::vector<std::vector<Eigen::VectorXd>> f1, f2;
    for (const Sample* s : ds.class_samples(c1)) f1.push_back(fg_features(*s));
    for (const Sample* s : ds.class_samples(c2)) f2.push_back(fg_features(*s));
    double within = 0, across = 0;
    int nw = 0, na = 0;
    for (const auto* f : {&f1, &f2})
      for (std::size_t i = 0; i < f->size(); ++i)
        for (std::size_t j = i + 1; j < f->size(); ++j) within += affinity((*f)[i], (*f)[j]), ++nw;
    for (const auto& a : f1)
      for (const auto& b : f2) across += affinity(a, b), ++na;
    CAPTURE(c1);
    CHECK(within / nw > across / na);
  }
}

TEST_CASE("episode sampler") {
  SynthOptions o;
  o.classes = 4;
  o.per_class = 8;
  o.test_classes = 1;
  const Dataset ds = synth_dataset(o);
  Rng rng(3);
  std::map<int, int> class_hits;
  std::map<std::pair<int, int>, int> query_hits;
  const int n = 6000;
  for (int t = 0; t < n; ++t) {
    const Episode ep = sample_episode(ds, ds.train_classes, 2, rng);
    REQUIRE(ep.k() == 2);
    std::set<const Sample*> distinct(ep.supports.begin(), ep.supports.end());
    distinct.insert(ep.query);
    CHECK(distinct.size() == 3);
    for (const Sample* s : distinct) CHECK(s->class_id == ep.class_id);
    ++class_hits[ep.class_id];
    ++query_hits[{ep.class_id, ep.query->index}];
  }
  REQUIRE(class_hits.size() == 3);
  double chi = 0;
  for (const auto& [c, h] : class_hits) chi += std::pow(h - n / 3.0, 2) / (n / 3.0);
  CHECK(chi < chi2_crit(2));
  REQUIRE(query_hits.size() == 24);
  chi = 0;
  for (const auto& [q, h] : query_hits) chi += std::pow(h - n / 24.0, 2) / (n / 24.0);
  CHECK(chi < chi2_crit(23));

  CHECK_THROWS_AS(sample_episode(ds, ds.train_classes, 8, rng), InvalidInput);
  CHECK_THROWS_AS(sample_episode(ds, {}, 1, rng), InvalidInput);

  const Sample& q = *ds.class_samples(ds.test_classes[0])[3];
  const Episode e1 = episode_for_query(ds, q, 5, 11), e2 = episode_for_query(ds, q, 5, 11);
  CHECK(e1.supports == e2.supports);
  for (const Sample* s : e1.supports) CHECK(s != &q);
}

TEST_CASE("toy encoder") {
  const auto levels = encoder().encode(TensorD(Shape{1, 3, 64, 96}, 0.5));
  REQUIRE(levels.size() == 4);
  CHECK(levels[0].shape() == Shape{1, 16, 16, 24});
  CHECK(levels[1].shape() == Shape{1, 24, 8, 12});
  CHECK(levels[2].shape() == Shape{1, 32, 4, 6});
  CHECK(levels[3].shape() == Shape{1, 32, 2, 3});
  for (const auto& l : encoder().encode(TensorD(Shape{1, 3, 32, 32}))) CHECK(l.array().abs().maxCoeff() == 0);
  CHECK_THROWS_AS(encoder().encode(TensorD(Shape{1, 3, 48, 64})), InvalidInput);
  CHECK_THROWS_AS(encoder().encode(TensorD(Shape{1, 1, 64, 64})), InvalidInput);
  const ToyEncoder other(EncoderConfig{{16, 24, 32, 32}, 6, false});
  CHECK(other.checksum() != encoder().checksum());
  CHECK(ToyEncoder(EncoderConfig{{16, 24, 32, 32}, 5, false}).checksum() == encoder().checksum());
}

TEST_CASE("prototype aggregation") {
  const Dataset& ds = small_dataset();
  FeatureCache cache(encoder(), grid16());
  const auto samples = ds.class_samples(0);
  for (SupportMode mode : {SupportMode::AnnotationFree, SupportMode::OracleMask}) {
    const Prototypes& one = cache.prototype(*samples[0], mode);
    CHECK(one.provenance == (mode == SupportMode::OracleMask ? Prototypes::Provenance::OracleMask
                                                             : Prototypes::Provenance::Spectral));
    const Prototypes twice = aggregate_prototypes({one, one});
    for (std::size_t l = 0; l < one.levels.size(); ++l) CHECK((twice.levels[l] - one.levels[l]).norm() < 1e-15);

    Episode ep;
    ep.class_id = 0;
    ep.query = samples[5];
    ep.supports = {samples[0], samples[1], samples[2], samples[3], samples[4]};
    const Prototypes five = support_prototypes(ep, cache, mode);
    std::reverse(ep.supports.begin(), ep.supports.end());
    const Prototypes reversed = support_prototypes(ep, cache, mode);
    for (std::size_t l = 0; l < 4; ++l) {
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(five.levels[l].size());
      for (int i = 0; i < 5; ++i) mean += cache.prototype(*samples[std::size_t(i)], mode).levels[l];
      mean /= 5;
      CHECK((five.levels[l] - mean).lpNorm<Eigen::Infinity>() < 1e-14);
      CHECK((five.levels[l] - reversed.levels[l]).lpNorm<Eigen::Infinity>() < 1e-14);
    }
  }
  CHECK_THROWS_AS(single_shot_prototype(cache.pyramid(*samples[0]), nullptr, SupportMode::OracleMask, grid16()),
                  InvalidInput);
  CHECK_THROWS_AS(aggregate_prototypes({}), InvalidInput);
}

TEST_CASE("provenance does not change the decoder path") {
  const Dataset& ds = small_dataset();
  FeatureCache cache(encoder(), grid16());
  auto params = decoder::init_decoder<double>(decoder::DecoderConfig{}, 4);
  Prototypes a = cache.prototype(ds.samples[0], SupportMode::AnnotationFree);
  Prototypes b = a;
  b.provenance = Prototypes::Provenance::OracleMask;
  const auto& q = cache.pyramid(ds.samples[1]);
  const TensorD la = decoder::decoder_logits(params, a, q, NormMode::Train);
  const TensorD lb = decoder::decoder_logits(params, b, q, NormMode::Train);
  CHECK(std::memcmp(la.data(), lb.data(), sizeof(double) * std::size_t(la.size())) == 0);
}

TEST_CASE("mask target") {
  Mask m = Mask::Zero(8, 8);
  m.topLeftCorner(4, 4).setOnes();
  const TensorD t = mask_target(m, 2, 2);
  CHECK(t.shape() == Shape{1, 1, 2, 2});
  CHECK(t[0] == 1);
  CHECK(t[1] == 0);
  CHECK(t[2] == 0);
  CHECK(t[3] == 0);
}

TEST_CASE("adam first steps against hand values") {
  Adam opt({0.1, 0.9, 0.999, 1e-8});
  std::vector<TensorD> p{TensorD(Shape{2}, 1.0)};
  TensorD g(Shape{2});
  g[0] = 4.0;
  g[1] = -0.5;
  opt.step(p, {g});
  // Bias-corrected first step: m_hat = g, v_hat = g^2.
  CHECK(p[0][0] == doctest::Approx(1.0 - 0.1 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));
  CHECK(p[0][1] == doctest::Approx(1.0 + 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  const double p0 = p[0][0];
  opt.step(p, {g});
  const double m = 0.9 * 0.1 * 4 + 0.1 * 4, v = 0.999 * 0.001 * 16 + 0.001 * 16;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  CHECK(p[0][0] == doctest::Approx(p0 - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-14));
  CHECK(opt.steps() == 2);
  CHECK_THROWS_AS(opt.step(p, {}), InvalidInput);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const Dataset& ds = small_dataset();
  FeatureCache cache(encoder(), grid16());
  TrainConfig cfg;
  cfg.episodes = 6;
  cfg.seed = 2;
  cfg.adam.learning_rate = 0;
  cfg.heldout_every = 0;
  const auto trained = train_toy(ds, cache, decoder::DecoderConfig{}, cfg);
  const auto init = decoder::init_decoder<double>(decoder::DecoderConfig{}, derive_seed(2, "decoder-init"));
  for (std::size_t i = 0; i < init.values.size(); ++i) CHECK(max_abs_diff(trained.values[i], init.values[i]) == 0);
}

TEST_CASE("overfits one repeated episode") {
  const Dataset& ds = small_dataset();
  FeatureCache cache(encoder(), grid16());
  Rng rng(9);
  const Episode ep = sample_episode(ds, ds.train_classes, 1, rng);
  auto params = decoder::init_decoder<double>(decoder::DecoderConfig{}, 1);
  Adam opt(AdamOptions{});
  double first = 0, last = 1;
  int reached = -1;
  for (int step = 0; step < 200; ++step) {
    last = train_step(ep, params, opt, cache, SupportMode::AnnotationFree).total();
    if (step == 0) first = last;
    if (last < 0.05 && reached < 0) reached = step;
  }
  MESSAGE("initial loss " << first << ", loss after 200 steps " << last << ", below 0.05 at step " << reached);
  CHECK(reached >= 0);
  CHECK(last < first);
}

TEST_CASE("training lowers the loss, keeps the encoder frozen, and is deterministic") {
  const Dataset& ds = small_dataset();
  const std::uint64_t before = encoder().checksum();
  TrainConfig cfg;
  cfg.episodes = 300;
  cfg.seed = 5;
  cfg.heldout_every = 100;
  std::vector<nlohmann::json> log1, log2;
  FeatureCache c1(encoder(), grid16()), c2(encoder(), grid16());
  const auto p1 = train_toy(ds, c1, decoder::DecoderConfig{}, cfg, [&](const TrainRecord& r) { log1.push_back(r.to_json()); });
  const auto p2 = train_toy(ds, c2, decoder::DecoderConfig{}, cfg, [&](const TrainRecord& r) { log2.push_back(r.to_json()); });
  CHECK(encoder().checksum() == before);
  REQUIRE(log1.size() == 300);
  CHECK(log1 == log2);
  for (std::size_t i = 0; i < p1.values.size(); ++i) CHECK(max_abs_diff(p1.values[i], p2.values[i]) == 0);

  double head = 0, tail = 0;
  for (int i = 0; i < 100; ++i) {
    head += log1[std::size_t(i)]["loss_bce"].get<double>() + log1[std::size_t(i)]["loss_dice"].get<double>();
    tail += log1[std::size_t(200 + i)]["loss_bce"].get<double>() + log1[std::size_t(200 + i)]["loss_dice"].get<double>();
  }
  MESSAGE("mean loss, first 100 episodes " << head / 100 << ", last 100 " << tail / 100);
  CHECK(tail < head);
  CHECK(log1[99].contains("heldout_miou"));
  CHECK_FALSE(log1[98].contains("heldout_miou"));
  CHECK(log1[0]["lr"] == 1e-3);

  // Evaluation fans out over threads without changing any row.
  auto params = p1;
  EvalConfig e;
  e.k = 1;
  e.seed = 3;
  const EvalResult serial = evaluate_split(ds, params, c1, e);
  e.threads = 3;
  const EvalResult threaded = evaluate_split(ds, params, c1, e);
  REQUIRE(serial.rows.size() == 12);
  for (std::size_t i = 0; i < serial.rows.size(); ++i) {
    CHECK(serial.rows[i].iou == threaded.rows[i].iou);
    CHECK(serial.rows[i].class_id == threaded.rows[i].class_id);
  }
  CHECK(metrics::to_json(serial.report) == metrics::to_json(threaded.report));
}

TEST_CASE("inference") {
  const Dataset& ds = small_dataset();
  FeatureCache cache(encoder(), grid16());
  auto params = decoder::init_decoder<double>(decoder::DecoderConfig{}, 1);
  // Batch-norm running statistics are set by training; run a few lr-0 steps first.
  Adam opt({0.0, 0.9, 0.999, 1e-8});
  Rng rng(1);
  for (int i = 0; i < 3; ++i) train_step(sample_episode(ds, ds.train_classes, 1, rng), params, opt, cache, SupportMode::AnnotationFree);
  params["head.w"].array().setZero();
  params["head.b"].array().setZero();
  const Episode ep = episode_for_query(ds, *ds.class_samples(ds.test_classes[0])[0], 1, 4);
  const InferenceResult r = run_inference(ep, params, cache, SupportMode::AnnotationFree);
  CHECK(r.mask.cast<int>().sum() == 0);
  REQUIRE(r.row);
  CHECK(r.row->iou == metrics::iou(Mask::Zero(64, 64), ep.query->mask));
  CHECK(r.row->iou == 0.0);

  auto trained = decoder::init_decoder<double>(decoder::DecoderConfig{}, 1);
  Adam opt2(AdamOptions{});
  for (int i = 0; i < 20; ++i) train_step(sample_episode(ds, ds.train_classes, 1, rng), trained, opt2, cache, SupportMode::AnnotationFree);
  const InferenceResult a = run_inference(ep, trained, cache, SupportMode::AnnotationFree);
  const InferenceResult b = run_inference(ep, trained, cache, SupportMode::AnnotationFree);
  CHECK((a.mask == b.mask).all());

  // The direct path used by the command line agrees with the cached one.
  const Mask direct = infer_mask({ep.supports[0]->image}, {}, ep.query->image, trained, encoder(), grid16(),
                                 SupportMode::AnnotationFree);
  CHECK((direct == a.mask).all());
  CHECK_THROWS_AS(infer_mask({ep.supports[0]->image}, {}, ep.query->image, trained, encoder(), grid16(),
                             SupportMode::OracleMask),
                  InvalidInput);
}

TEST_CASE("non-finite loss aborts with episode and seed") {
  Dataset ds = small_dataset();
  for (auto& s : ds.samples) s.image.array().setConstant(std::numeric_limits<double>::quiet_NaN());
  FeatureCache cache(encoder(), grid16());
  TrainConfig cfg;
  cfg.episodes = 3;
  cfg.seed = 77;
  cfg.mode = SupportMode::OracleMask;
  CHECK_THROWS_WITH_AS(train_toy(ds, cache, decoder::DecoderConfig{}, cfg),
                       doctest::Contains("episode 0 (seed 77"), NumericalError);
}
