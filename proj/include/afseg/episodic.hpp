#pragma once

// One-way k-shot episodes: sampling, support prototypes (annotation-free or from
// the ground-truth mask), decoder training with Adam, inference and evaluation.

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "afseg/dataset.hpp"
#include "afseg/decoder.hpp"
#include "afseg/encoder.hpp"
#include "afseg/metrics.hpp"
#include "afseg/rng.hpp"
#include "afseg/spectral.hpp"

namespace afseg::episodic {

enum class SupportMode { AnnotationFree, OracleMask };

std::string to_string(SupportMode m);              // "free" / "oracle"
SupportMode support_mode_from_string(const std::string& s);

using Prototypes = spectral::PrototypeSet<double>;
using Params = decoder::DecoderParams<double>;

struct Episode {
  int class_id = 0;
  std::vector<const Sample*> supports;
  const Sample* query = nullptr;

  Index k() const { return Index(supports.size()); }
};

/// Uniform class, then k + 1 distinct samples of it: the first is the query.
Episode sample_episode(const Dataset& ds, const std::vector<int>& classes, Index k, Rng& rng);

/// The given query with k supports drawn from the rest of its class.
Episode episode_for_query(const Dataset& ds, const Sample& query, Index k, std::uint64_t seed);

/// Prototype of one support image. `mask` is required for the oracle mode.
Prototypes single_shot_prototype(const std::vector<TensorD>& pyramid, const Mask* mask, SupportMode mode,
                                 const spectral::SpectralOptions& opt);

/// Per-level mean over shots.
Prototypes aggregate_prototypes(const std::vector<Prototypes>& shots);

/// Encoder outputs and single-shot prototypes are pure functions of the sample,
/// so they are computed once per sample. Safe to share between threads.
class FeatureCache {
 public:
  FeatureCache(const ToyEncoder& encoder, spectral::SpectralOptions spectral)
      : encoder_(encoder), spectral_(spectral) {}

  const std::vector<TensorD>& pyramid(const Sample& s);
  const Prototypes& prototype(const Sample& s, SupportMode mode);

  const ToyEncoder& encoder() const { return encoder_; }
  const spectral::SpectralOptions& spectral_options() const { return spectral_; }

 private:
  const ToyEncoder& encoder_;
  spectral::SpectralOptions spectral_;
  std::mutex mu_;
  std::map<const Sample*, std::vector<TensorD>> pyramids_;
  std::map<std::pair<const Sample*, SupportMode>, Prototypes> prototypes_;
};

Prototypes support_prototypes(const Episode& ep, FeatureCache& cache, SupportMode mode);

/// Ground truth at logit resolution: bilinear resize, then >= 0.5.
TensorD mask_target(const Mask& gt, Index h, Index w);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions opt) : opt_(opt) {}
  void step(std::vector<TensorD>& params, const std::vector<TensorD>& grads);
  Index steps() const { return t_; }

 private:
  AdamOptions opt_;
  Index t_ = 0;
  std::vector<TensorD> m_, v_;
};

struct TrainConfig {
  Index episodes = 500;
  AdamOptions adam;
  std::uint64_t seed = 0;
  SupportMode mode = SupportMode::AnnotationFree;
  Index k_shot = 1;
  Index heldout_every = 100;  // 0 disables the periodic held-out evaluation
};

struct TrainRecord {
  Index episode = 0;
  int class_id = 0;
  double loss_bce = 0, loss_dice = 0, lr = 0;
  std::optional<double> heldout_miou;

  nlohmann::json to_json() const;
};

/// Adam on the decoder parameters only; the encoder stays frozen.
Params train_toy(const Dataset& ds, FeatureCache& cache, const decoder::DecoderConfig& dcfg, const TrainConfig& cfg,
                 const std::function<void(const TrainRecord&)>& on_record = {});

/// One optimization step on one episode; returns the loss parts.
SegLossValue<double> train_step(const Episode& ep, Params& params, Adam& opt, FeatureCache& cache, SupportMode mode);

struct InferenceResult {
  Mask mask;
  std::optional<metrics::MetricsRow> row;  // when the query has a mask
};

InferenceResult run_inference(const Episode& ep, Params& params, FeatureCache& cache, SupportMode mode);

/// Query image given directly, supports with optional masks (for the CLI).
Mask infer_mask(const std::vector<TensorD>& support_images, const std::vector<Mask>& support_masks,
                const TensorD& query_image, Params& params, const ToyEncoder& encoder,
                const spectral::SpectralOptions& sopt, SupportMode mode);

struct EvalConfig {
  Index k = 1;
  SupportMode mode = SupportMode::AnnotationFree;
  std::uint64_t seed = 0;
  Index threads = 1;
  Split split = Split::Test;
};

struct EvalResult {
  std::vector<metrics::MetricsRow> rows;
  metrics::Report report;
};

/// Every sample of the split is the query once.
EvalResult evaluate_split(const Dataset& ds, Params& params, FeatureCache& cache, const EvalConfig& cfg);

}  // namespace afseg::episodic
