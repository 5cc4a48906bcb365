#include "afseg/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace afseg::episodic {

std::string to_string(SupportMode m) { return m == SupportMode::AnnotationFree ? "free" : "oracle"; }

SupportMode support_mode_from_string(const std::string& s) {
  if (s == "free" || s == "annotation_free") return SupportMode::AnnotationFree;
  if (s == "oracle" || s == "oracle_mask") return SupportMode::OracleMask;
  throw InvalidInput("unknown support mode '" + s + "' (expected free or oracle)");
}

namespace {

// k + 1 distinct positions out of n, by a partial Fisher-Yates shuffle.
std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  return idx;
}

std::string class_too_small(int c, std::size_t have, Index k) {
  return "class " + std::to_string(c) + " has " + std::to_string(have) + " samples, a " + std::to_string(k) +
         "-shot episode needs " + std::to_string(k + 1);
}

}  // namespace

Episode sample_episode(const Dataset& ds, const std::vector<int>& classes, Index k, Rng& rng) {
  if (classes.empty()) throw InvalidInput("sample_episode: no classes to sample from");
  if (k < 1) throw InvalidInput("sample_episode: k must be >= 1");
  std::uniform_int_distribution<std::size_t> pick_class(0, classes.size() - 1);
  Episode ep;
  ep.class_id = classes[pick_class(rng)];
  const auto pool = ds.class_samples(ep.class_id);
  if (pool.size() < std::size_t(k + 1)) throw InvalidInput(class_too_small(ep.class_id, pool.size(), k));
  const auto idx = draw_distinct(pool.size(), std::size_t(k + 1), rng);
  ep.query = pool[idx[0]];
  for (std::size_t i = 1; i < idx.size(); ++i) ep.supports.push_back(pool[idx[i]]);
  return ep;
}

Episode episode_for_query(const Dataset& ds, const Sample& query, Index k, std::uint64_t seed) {
  if (k < 1) throw InvalidInput("episode_for_query: k must be >= 1");
  std::vector<const Sample*> rest;
  for (const Sample* s : ds.class_samples(query.class_id))
    if (s != &query) rest.push_back(s);
  if (rest.size() < std::size_t(k)) throw InvalidInput(class_too_small(query.class_id, rest.size() + 1, k));
  Rng rng(derive_seed(seed, "eval-supports", std::uint64_t(query.class_id), std::uint64_t(query.index)));
  Episode ep;
  ep.class_id = query.class_id;
  ep.query = &query;
  for (std::size_t i : draw_distinct(rest.size(), std::size_t(k), rng)) ep.supports.push_back(rest[i]);
  return ep;
}

Prototypes single_shot_prototype(const std::vector<TensorD>& pyramid, const Mask* mask, SupportMode mode,
                                 const spectral::SpectralOptions& opt) {
  if (mode == SupportMode::OracleMask) {
    if (!mask) throw InvalidInput("oracle-mask prototypes need the support mask");
    return spectral::extract_prototype(pyramid, mask_bbox(*mask), mask->rows(), mask->cols(),
                                       Prototypes::Provenance::OracleMask);
  }
  const auto est = spectral::estimate_support(pyramid, opt);
  return spectral::extract_prototype(pyramid, est.partition.bbox, opt.grid_h, opt.grid_w,
                                     Prototypes::Provenance::Spectral);
}

Prototypes aggregate_prototypes(const std::vector<Prototypes>& shots) {
  if (shots.empty()) throw InvalidInput("aggregate_prototypes: no shots");
  Prototypes out = shots.front();
  for (std::size_t s = 1; s < shots.size(); ++s) {
    if (shots[s].levels.size() != out.levels.size()) throw InvalidInput("aggregate_prototypes: level count differs");
    for (std::size_t l = 0; l < out.levels.size(); ++l) out.levels[l] += shots[s].levels[l];
  }
  for (auto& v : out.levels) v /= double(shots.size());
  return out;
}

const std::vector<TensorD>& FeatureCache::pyramid(const Sample& s) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = pyramids_.find(&s);
  if (it == pyramids_.end()) it = pyramids_.emplace(&s, encoder_.encode(s.image)).first;
  return it->second;
}

const Prototypes& FeatureCache::prototype(const Sample& s, SupportMode mode) {
  const auto& pyr = pyramid(s);
  std::lock_guard<std::mutex> lock(mu_);
  auto key = std::make_pair(&s, mode);
  auto it = prototypes_.find(key);
  if (it == prototypes_.end()) {
    try {
      it = prototypes_.emplace(key, single_shot_prototype(pyr, &s.mask, mode, spectral_)).first;
    } catch (const NumericalError& e) {
      throw NumericalError("support sample " + std::to_string(s.index) + " of class " + std::to_string(s.class_id) +
                           ": " + e.what());
    }
  }
  return it->second;
}

Prototypes support_prototypes(const Episode& ep, FeatureCache& cache, SupportMode mode) {
  std::vector<Prototypes> shots;
  for (const Sample* s : ep.supports) shots.push_back(cache.prototype(*s, mode));
  return aggregate_prototypes(shots);
}

TensorD mask_target(const Mask& gt, Index h, Index w) {
  TensorD t = bilinear_resize(mask_to_tensor<double>(gt), h, w);
  for (Index i = 0; i < t.size(); ++i) t[i] = t[i] >= 0.5 ? 1.0 : 0.0;
  return t;
}

void Adam::step(std::vector<TensorD>& params, const std::vector<TensorD>& grads) {
  if (grads.size() != params.size()) throw InvalidInput("Adam: gradient count differs from parameter count");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }
  ++t_;
  const double c1 = 1 - std::pow(opt_.beta1, double(t_)), c2 = 1 - std::pow(opt_.beta2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = m_[i].array();
    auto& v = v_[i].array();
    const auto& g = grads[i].array();
    m = opt_.beta1 * m + (1 - opt_.beta1) * g;
    v = opt_.beta2 * v + (1 - opt_.beta2) * g.square();
    params[i].array() -= opt_.learning_rate * (m / c1) / ((v / c2).sqrt() + opt_.eps);
  }
}

nlohmann::json TrainRecord::to_json() const {
  nlohmann::json j = {{"episode", episode}, {"class", class_id}, {"loss_bce", loss_bce},
                      {"loss_dice", loss_dice}, {"lr", lr}};
  if (heldout_miou) j["heldout_miou"] = *heldout_miou;
  return j;
}

SegLossValue<double> train_step(const Episode& ep, Params& params, Adam& opt, FeatureCache& cache, SupportMode mode) {
  const Prototypes protos = support_prototypes(ep, cache, mode);
  const auto& query = cache.pyramid(*ep.query);
  Tape<double> tape;
  const auto bound = decoder::bind(tape, params, true);
  Var<double> logits = decoder::decoder_forward(tape, bound, protos, query, NormMode::Train);
  const TensorD target = mask_target(ep.query->mask, logits.shape()[2], logits.shape()[3]);
  const auto loss = seg_loss(logits, target);
  if (!std::isfinite(loss.parts.total())) return loss.parts;
  const auto grads = tape.backward(loss.total);
  std::vector<TensorD> g;
  g.reserve(bound.vars.size());
  for (const auto& v : bound.vars) g.push_back(grads.contains(v) ? grads[v] : TensorD(v.shape()));
  opt.step(params.values, g);
  return loss.parts;
}

Params train_toy(const Dataset& ds, FeatureCache& cache, const decoder::DecoderConfig& dcfg, const TrainConfig& cfg,
                 const std::function<void(const TrainRecord&)>& on_record) {
  if (cfg.episodes < 1) throw InvalidInput("train_toy: episode count must be >= 1");
  if (!(cfg.adam.learning_rate >= 0)) throw InvalidInput("train_toy: learning rate must be >= 0");
  if (ds.train_classes.empty()) throw InvalidInput("train_toy: the dataset has no training classes");
  Params params = decoder::init_decoder<double>(dcfg, derive_seed(cfg.seed, "decoder-init"));
  Adam opt(cfg.adam);
  Rng rng(derive_seed(cfg.seed, "train-episodes"));
  for (Index e = 0; e < cfg.episodes; ++e) {
    const Episode ep = sample_episode(ds, ds.train_classes, cfg.k_shot, rng);
    const auto parts = train_step(ep, params, opt, cache, cfg.mode);
    if (!std::isfinite(parts.total()))
      throw NumericalError("non-finite loss at episode " + std::to_string(e) + " (seed " + std::to_string(cfg.seed) +
                           ", class " + std::to_string(ep.class_id) + ")");
    TrainRecord rec;
    rec.episode = e;
    rec.class_id = ep.class_id;
    rec.loss_bce = parts.bce;
    rec.loss_dice = parts.dice_loss;
    rec.lr = cfg.adam.learning_rate;
    if (cfg.heldout_every > 0 && (e + 1) % cfg.heldout_every == 0 && !ds.test_classes.empty()) {
      EvalConfig ecfg;
      ecfg.k = cfg.k_shot;
      ecfg.mode = cfg.mode;
      ecfg.seed = derive_seed(cfg.seed, "heldout");
      rec.heldout_miou = evaluate_split(ds, params, cache, ecfg).report.miou;
    }
    if (on_record) on_record(rec);
  }
  return params;
}

InferenceResult run_inference(const Episode& ep, Params& params, FeatureCache& cache, SupportMode mode) {
  const Prototypes protos = support_prototypes(ep, cache, mode);
  const TensorD logits = decoder::decoder_logits(params, protos, cache.pyramid(*ep.query), NormMode::Infer);
  InferenceResult r;
  r.mask = decoder::predict_mask(logits, ep.query->mask.rows(), ep.query->mask.cols());
  r.row = metrics::metrics_row(ep.class_id, r.mask, ep.query->mask);
  return r;
}

Mask infer_mask(const std::vector<TensorD>& support_images, const std::vector<Mask>& support_masks,
                const TensorD& query_image, Params& params, const ToyEncoder& encoder,
                const spectral::SpectralOptions& sopt, SupportMode mode) {
  if (support_images.empty()) throw InvalidInput("inference needs at least one support image");
  if (mode == SupportMode::OracleMask && support_masks.size() != support_images.size())
    throw InvalidInput("oracle mode needs a mask for every support image");
  std::vector<Prototypes> shots;
  for (std::size_t i = 0; i < support_images.size(); ++i) {
    try {
      shots.push_back(single_shot_prototype(encoder.encode(support_images[i]),
                                            mode == SupportMode::OracleMask ? &support_masks[i] : nullptr, mode, sopt));
    } catch (const NumericalError& e) {
      throw NumericalError("support " + std::to_string(i) + ": " + e.what());
    }
  }
  const TensorD logits =
      decoder::decoder_logits(params, aggregate_prototypes(shots), encoder.encode(query_image), NormMode::Infer);
  return decoder::predict_mask(logits, query_image.dim(2), query_image.dim(3));
}

EvalResult evaluate_split(const Dataset& ds, Params& params, FeatureCache& cache, const EvalConfig& cfg) {
  std::vector<const Sample*> queries;
  for (int c : ds.classes(cfg.split))
    for (const Sample* s : ds.class_samples(c)) queries.push_back(s);
  std::vector<Episode> episodes;
  for (const Sample* q : queries) episodes.push_back(episode_for_query(ds, *q, cfg.k, cfg.seed));
  // Fill the cache in a fixed order first so worker threads only read.
  for (const auto& ep : episodes) {
    cache.pyramid(*ep.query);
    support_prototypes(ep, cache, cfg.mode);
  }

  EvalResult out;
  out.rows.resize(episodes.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < episodes.size(); i += stride)
      out.rows[i] = *run_inference(episodes[i], params, cache, cfg.mode).row;
  };
  const std::size_t threads = std::size_t(std::max<Index>(1, cfg.threads));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          work(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  out.report = metrics::evaluate(out.rows);
  return out;
}

}  // namespace afseg::episodic
