#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "milforge/common.hpp"
#include "milforge/tensor.hpp"

namespace milforge {

// One MIL sample: K instance feature rows, an optional K x 2 coordinate
// block, the bag label, and (for synthetic data) per-instance ground truth
// used only at evaluation time.
struct Bag {
  std::uint32_t id = 0;
  std::uint32_t label = 0;
  Tensor<float> features;                                 // K x D
  std::optional<Tensor<float>> coords;                    // K x 2
  std::optional<std::vector<std::uint16_t>> instance_truth;  // K, values in [0, C)

  std::size_t k() const { return features.rows(); }
  std::size_t d() const { return features.cols(); }
};

struct DatasetManifest {
  std::uint32_t num_classes = 0;
  std::uint32_t feature_dim = 0;
  bool spatial = false;
  std::uint64_t seed = 0;
  std::uint32_t bag_count = 0;
  std::vector<std::uint32_t> folds;  // fold index per bag; empty when unsplit
};

// ------------------------------------------------------------------- IDX ---

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
};

struct IdxLabels {
  std::uint32_t count = 0;
  std::vector<std::uint8_t> labels;
};

// Big-endian IDX, magics 0x00000803 (images) / 0x00000801 (labels).
// Parse errors name the byte offset of the defect.
IdxImages parse_idx_images(const std::string& path);
IdxLabels parse_idx_labels(const std::string& path);
void write_idx_images(const std::string& path, const IdxImages& images);
void write_idx_labels(const std::string& path, const IdxLabels& labels);

// Procedural 28x28 digit corpus (bitmap glyphs with jitter, intensity and
// noise): the desk-scale stand-in for the real MNIST files.
std::pair<IdxImages, IdxLabels> make_digit_corpus(std::size_t count, std::uint64_t seed);

// ------------------------------------------------------------ generators ---

// Bag label from a multiset of digits, first matching rule top-down:
//   3  iff {3,5} subset;  2  iff 1 present and 7 absent;  1  iff {1,7} subset;
//   0  otherwise.
std::uint32_t mnist_bag_label(const std::vector<int>& digits);

// Trigger digits of the matched rule get the bag label as instance truth.
std::vector<std::uint16_t> mnist_instance_truth(const std::vector<int>& digits, std::uint32_t bag_label);

// Bags of K ~ Uniform{range} digit images, features = pixels / 255 (D=784).
// Regenerates with a derived seed until every class holds > 5% of bags.
std::vector<Bag> synth_mnist_bags(const IdxImages& images, const IdxLabels& labels,
                                  std::size_t num_bags, std::pair<int, int> bag_size_range,
                                  std::uint64_t seed);

// Binary spatial-pairs task: 8-dim noise instances, exactly two markers with
// feature[0] = 3.0; positive bags place the markers within Chebyshev
// distance 0.2, negative beyond 0.4. Coordinates uniform in [0,1]^2.
std::vector<Bag> synth_spatial_bags(std::size_t num_bags, std::size_t k, std::uint64_t seed);

// --------------------------------------------------------------- .milbag ---

// Little-endian container: magic "MILB", u32 version=1, u32 C, u32 D,
// u8 spatial, u64 seed, u32 B, then per bag u32 label, u32 K, u8 has_truth,
// [u16 truth * K], f32 features K*D, [f32 coords K*2 if spatial].
void write_bags(const std::string& path, const std::vector<Bag>& bags, const DatasetManifest& manifest);
std::pair<std::vector<Bag>, DatasetManifest> read_bags(const std::string& path);

// ---------------------------------------------------------------- splits ---

// Stratified k-fold: per-class round-robin dealing after a seeded shuffle;
// classes with fewer than k bags fall back to unstratified with a warning.
DatasetManifest kfold_split(const std::vector<Bag>& bags, int k, std::uint64_t seed,
                            std::vector<std::string>* warnings = nullptr);

// Stratified holdout; fold 0 = train, fold 1 = eval.
DatasetManifest holdout_split(const std::vector<Bag>& bags, double train_fraction, std::uint64_t seed);

// Default dataset directory: $MILFORGE_DATA_DIR or "./data".
std::string default_data_dir();

// FNV-1a content digest of a file, for run-config snapshots.
std::string file_digest(const std::string& path);

}  // namespace milforge
