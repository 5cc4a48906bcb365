#pragma once

// Few-shot dataset: classes split into disjoint train and test sets. Test-class
// images supply both supports and queries at evaluation time, never the same
// image twice within an episode.
//
// On disk: manifest.json plus one (3,H,W) float32 NPY image and one P5 PGM mask
// per sample.

#include <cstdint>
#include <string>
#include <vector>

#include "afseg/mask.hpp"
#include "afseg/tensor.hpp"
#include "json.hpp"

namespace afseg {

enum class Split { Train, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Sample {
  int class_id = 0;
  int index = 0;
  TensorD image;  // (1, 3, H, W), values in [0, 1]
  Mask mask;
};

struct Dataset {
  Index image_size = 0;
  std::uint64_t seed = 0;
  std::vector<int> train_classes, test_classes;
  std::vector<Sample> samples;  // grouped by class id, then index

  const std::vector<int>& classes(Split s) const { return s == Split::Train ? train_classes : test_classes; }
  std::vector<const Sample*> class_samples(int class_id) const;
  /// Throws unless the train and test class sets are disjoint and every sample has a mask.
  void validate() const;
};

struct SynthOptions {
  int classes = 12;
  int per_class = 10;
  Index image_size = 64;
  int test_classes = 0;  // 0: one third of the classes
  std::uint64_t seed = 0;
};

/// Shape family per class (ellipse, rectangle, ring, blob by id mod 4) with a
/// class-specific striped color texture on a shared dark background. Masks are
/// the rasterized shapes, so they are exact.
Dataset synth_dataset(const SynthOptions& opt);

enum class ShapeFamily { Ellipse, Rectangle, Ring, Blob };
ShapeFamily family_of(int class_id);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace afseg
