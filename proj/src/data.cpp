#include "milforge/data.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "milforge/rng.hpp"

namespace milforge {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<std::uint8_t>& buf, std::size_t off, const std::string& path) {
  if (off + 4 > buf.size())
    throw FormatError(path + ": truncated header at byte offset " + std::to_string(buf.size()));
  return (std::uint32_t(buf[off]) << 24) | (std::uint32_t(buf[off + 1]) << 16) |
         (std::uint32_t(buf[off + 2]) << 8) | std::uint32_t(buf[off + 3]);
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16), std::uint8_t(v >> 8), std::uint8_t(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Little-endian primitives for the bag container.
template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_le<std::uint32_t>(out, bits);
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size())
      throw FormatError(path + ": payload length mismatch reading " + what + " at byte offset " +
                        std::to_string(pos));
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(buf[pos + i]) << (8 * i);
    pos += sizeof(T);
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = le<std::uint32_t>(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace

// --------------------------------------------------------------------- IDX

IdxImages parse_idx_images(const std::string& path) {
  const auto buf = read_file(path);
  const std::uint32_t magic = be32(buf, 0, path);
  if (magic != kImagesMagic)
    throw FormatError(path + ": expected image magic 2051, got " + std::to_string(magic) +
                      " at byte offset 0");
  IdxImages out;
  out.count = be32(buf, 4, path);
  out.rows = be32(buf, 8, path);
  out.cols = be32(buf, 12, path);
  if (out.rows != 28 || out.cols != 28)
    throw FormatError(path + ": expected 28x28 images, got " + std::to_string(out.rows) + "x" +
                      std::to_string(out.cols) + " at byte offset 8");
  const std::size_t expect = 16 + std::size_t(out.count) * out.rows * out.cols;
  if (buf.size() != expect)
    throw FormatError(path + ": truncated payload, expected " + std::to_string(expect) +
                      " bytes, file ends at byte offset " + std::to_string(buf.size()));
  out.pixels.assign(buf.begin() + 16, buf.end());
  return out;
}

IdxLabels parse_idx_labels(const std::string& path) {
  const auto buf = read_file(path);
  const std::uint32_t magic = be32(buf, 0, path);
  if (magic != kLabelsMagic)
    throw FormatError(path + ": expected label magic 2049, got " + std::to_string(magic) +
                      " at byte offset 0");
  IdxLabels out;
  out.count = be32(buf, 4, path);
  const std::size_t expect = 8 + std::size_t(out.count);
  if (buf.size() != expect)
    throw FormatError(path + ": truncated payload, expected " + std::to_string(expect) +
                      " bytes, file ends at byte offset " + std::to_string(buf.size()));
  out.labels.assign(buf.begin() + 8, buf.end());
  return out;
}

void write_idx_images(const std::string& path, const IdxImages& images) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write file: " + path);
  put_be32(out, kImagesMagic);
  put_be32(out, images.count);
  put_be32(out, images.rows);
  put_be32(out, images.cols);
  out.write(reinterpret_cast<const char*>(images.pixels.data()),
            static_cast<std::streamsize>(images.pixels.size()));
}

void write_idx_labels(const std::string& path, const IdxLabels& labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write file: " + path);
  put_be32(out, kLabelsMagic);
  put_be32(out, labels.count);
  out.write(reinterpret_cast<const char*>(labels.labels.data()),
            static_cast<std::streamsize>(labels.labels.size()));
}

// -------------------------------------------------------------- generators

std::uint32_t mnist_bag_label(const std::vector<int>& digits) {
  bool has[10] = {};
  for (int d : digits)
    if (d >= 0 && d < 10) has[d] = true;
  if (has[3] && has[5]) return 3;
  if (has[1] && !has[7]) return 2;
  if (has[1] && has[7]) return 1;
  return 0;
}

std::vector<std::uint16_t> mnist_instance_truth(const std::vector<int>& digits, std::uint32_t bag_label) {
  std::vector<std::uint16_t> truth(digits.size(), 0);
  auto mark = [&](std::initializer_list<int> triggers) {
    for (std::size_t i = 0; i < digits.size(); ++i)
      for (int trig : triggers)
        if (digits[i] == trig) truth[i] = static_cast<std::uint16_t>(bag_label);
  };
  switch (bag_label) {
    case 3: mark({3, 5}); break;
    case 2: mark({1}); break;
    case 1: mark({1, 7}); break;
    default: break;
  }
  return truth;
}

std::vector<Bag> synth_mnist_bags(const IdxImages& images, const IdxLabels& labels,
                                  std::size_t num_bags, std::pair<int, int> bag_size_range,
                                  std::uint64_t seed) {
  if (images.count == 0) throw ConfigError("synth_mnist_bags: empty image set");
  if (images.count != labels.count)
    throw FormatError("synth_mnist_bags: image count " + std::to_string(images.count) +
                      " does not match label count " + std::to_string(labels.count));
  if (bag_size_range.first < 2 || bag_size_range.second > 64 ||
      bag_size_range.first > bag_size_range.second)
    throw ConfigError("synth_mnist_bags: bag size range must lie within [2, 64]");
  const std::size_t dim = std::size_t(images.rows) * images.cols;

  // Resample with a derived seed until every class exceeds 5% frequency.
  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(attempt)));
    std::vector<Bag> bags;
    bags.reserve(num_bags);
    std::array<std::size_t, 4> counts{};
    for (std::size_t b = 0; b < num_bags; ++b) {
      const int k = int(rng.uniform_int(bag_size_range.first, bag_size_range.second));
      std::vector<int> digits(k);
      Bag bag;
      bag.id = static_cast<std::uint32_t>(b);
      bag.features = Tensor<float>::zeros({std::size_t(k), dim});
      for (int i = 0; i < k; ++i) {
        const std::size_t img = rng.below(images.count);
        digits[i] = labels.labels[img];
        const std::uint8_t* px = images.pixels.data() + img * dim;
        float* row = bag.features.ptr() + std::size_t(i) * dim;
        for (std::size_t j = 0; j < dim; ++j) row[j] = float(px[j]) / 255.0f;
      }
      bag.label = mnist_bag_label(digits);
      bag.instance_truth = mnist_instance_truth(digits, bag.label);
      counts[bag.label]++;
      bags.push_back(std::move(bag));
    }
    const double thr = 0.05 * double(num_bags);
    if (std::all_of(counts.begin(), counts.end(), [&](std::size_t c) { return double(c) > thr; }))
      return bags;
  }
  throw ConfigError("synth_mnist_bags: could not reach >5% frequency for all classes in 100 attempts");
}

std::vector<Bag> synth_spatial_bags(std::size_t num_bags, std::size_t k, std::uint64_t seed) {
  if (k < 4) throw ConfigError("synth_spatial_bags: K must be >= 4");
  constexpr std::size_t kDim = 8;
  Rng rng(seed);
  std::vector<Bag> bags;
  bags.reserve(num_bags);
  for (std::size_t b = 0; b < num_bags; ++b) {
    Bag bag;
    bag.id = static_cast<std::uint32_t>(b);
    bag.label = static_cast<std::uint32_t>(b % 2);  // balanced by construction
    bag.features = Tensor<float>::zeros({k, kDim});
    for (auto& v : bag.features.data) v = static_cast<float>(rng.normal());
    bag.coords = Tensor<float>::zeros({k, 2});
    for (auto& v : bag.coords->data) v = static_cast<float>(rng.uniform());

    // Two distinct marker slots.
    const std::size_t ma = rng.below(k);
    std::size_t mb = rng.below(k - 1);
    if (mb >= ma) ++mb;
    bag.features.at(ma, 0) = 3.0f;
    bag.features.at(mb, 0) = 3.0f;

    const double ax = bag.coords->at(ma, 0), ay = bag.coords->at(ma, 1);
    double bx, by;
    if (bag.label == 1) {
      // Uniform within the clipped Chebyshev ball of radius 0.2.
      bx = rng.uniform(std::max(0.0, ax - 0.2), std::min(1.0, ax + 0.2));
      by = rng.uniform(std::max(0.0, ay - 0.2), std::min(1.0, ay + 0.2));
    } else {
      do {
        bx = rng.uniform();
        by = rng.uniform();
      } while (std::max(std::abs(bx - ax), std::abs(by - ay)) <= 0.4);
    }
    bag.coords->at(mb, 0) = static_cast<float>(bx);
    bag.coords->at(mb, 1) = static_cast<float>(by);

    std::vector<std::uint16_t> truth(k, 0);
    truth[ma] = 1;
    truth[mb] = 1;
    bag.instance_truth = std::move(truth);
    bags.push_back(std::move(bag));
  }
  return bags;
}

// ------------------------------------------------------------------ milbag

void write_bags(const std::string& path, const std::vector<Bag>& bags, const DatasetManifest& manifest) {
  std::string out;
  out.append("MILB");
  put_le<std::uint32_t>(out, 1);  // version
  put_le<std::uint32_t>(out, manifest.num_classes);
  put_le<std::uint32_t>(out, manifest.feature_dim);
  out.push_back(manifest.spatial ? 1 : 0);
  put_le<std::uint64_t>(out, manifest.seed);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(bags.size()));
  for (const auto& bag : bags) {
    if (bag.d() != manifest.feature_dim)
      throw DimensionError("write_bags: bag " + std::to_string(bag.id) + " has D=" +
                           std::to_string(bag.d()) + ", manifest says " + std::to_string(manifest.feature_dim));
    if (bag.label >= manifest.num_classes)
      throw DimensionError("write_bags: bag " + std::to_string(bag.id) + " label " +
                           std::to_string(bag.label) + " outside C=" + std::to_string(manifest.num_classes));
    if (manifest.spatial && !bag.coords)
      throw DimensionError("write_bags: spatial dataset but bag " + std::to_string(bag.id) + " lacks coords");
    put_le<std::uint32_t>(out, bag.label);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(bag.k()));
    out.push_back(bag.instance_truth ? 1 : 0);
    if (bag.instance_truth) {
      if (bag.instance_truth->size() != bag.k())
        throw DimensionError("write_bags: instance_truth length mismatch in bag " + std::to_string(bag.id));
      for (std::uint16_t v : *bag.instance_truth) put_le<std::uint16_t>(out, v);
    }
    for (float v : bag.features.data) put_f32(out, v);
    if (manifest.spatial)
      for (float v : bag.coords->data) put_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write file: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::pair<std::vector<Bag>, DatasetManifest> read_bags(const std::string& path) {
  const auto buf = read_file(path);
  Reader r{buf, 0, path};
  r.need(4, "magic");
  if (std::memcmp(buf.data(), "MILB", 4) != 0)
    throw FormatError(path + ": bad magic, expected \"MILB\" at byte offset 0");
  r.pos = 4;
  const auto version = r.le<std::uint32_t>("version");
  if (version != 1)
    throw FormatError(path + ": unsupported container version " + std::to_string(version));
  DatasetManifest manifest;
  manifest.num_classes = r.le<std::uint32_t>("num_classes");
  manifest.feature_dim = r.le<std::uint32_t>("feature_dim");
  manifest.spatial = r.le<std::uint8_t>("spatial") != 0;
  manifest.seed = r.le<std::uint64_t>("seed");
  manifest.bag_count = r.le<std::uint32_t>("bag_count");

  std::vector<Bag> bags;
  bags.reserve(manifest.bag_count);
  for (std::uint32_t b = 0; b < manifest.bag_count; ++b) {
    Bag bag;
    bag.id = b;
    bag.label = r.le<std::uint32_t>("label");
    const auto k = r.le<std::uint32_t>("K");
    if (k == 0) throw FormatError(path + ": bag with K=0 at byte offset " + std::to_string(r.pos));
    const bool has_truth = r.le<std::uint8_t>("has_truth") != 0;
    if (has_truth) {
      std::vector<std::uint16_t> truth(k);
      for (auto& v : truth) v = r.le<std::uint16_t>("instance_truth");
      bag.instance_truth = std::move(truth);
    }
    bag.features = Tensor<float>::zeros({k, manifest.feature_dim});
    for (auto& v : bag.features.data) v = r.f32("features");
    if (manifest.spatial) {
      bag.coords = Tensor<float>::zeros({k, 2});
      for (auto& v : bag.coords->data) v = r.f32("coords");
    }
    bags.push_back(std::move(bag));
  }
  if (r.pos != buf.size())
    throw FormatError(path + ": payload length mismatch, " + std::to_string(buf.size() - r.pos) +
                      " trailing bytes at byte offset " + std::to_string(r.pos));
  return {std::move(bags), std::move(manifest)};
}

// ------------------------------------------------------------------ splits

namespace {

DatasetManifest manifest_from(const std::vector<Bag>& bags) {
  DatasetManifest m;
  m.bag_count = static_cast<std::uint32_t>(bags.size());
  if (!bags.empty()) {
    m.feature_dim = static_cast<std::uint32_t>(bags.front().d());
    m.spatial = bags.front().coords.has_value();
    std::uint32_t cmax = 0;
    for (const auto& b : bags) cmax = std::max(cmax, b.label);
    m.num_classes = cmax + 1;
  }
  return m;
}

std::map<std::uint32_t, std::vector<std::size_t>> by_label(const std::vector<Bag>& bags) {
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < bags.size(); ++i) groups[bags[i].label].push_back(i);
  return groups;
}

}  // namespace

DatasetManifest kfold_split(const std::vector<Bag>& bags, int k, std::uint64_t seed,
                            std::vector<std::string>* warnings) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
  if (bags.size() < static_cast<std::size_t>(k))
    throw ConfigError("kfold_split: need at least k bags");
  DatasetManifest m = manifest_from(bags);
  m.seed = seed;
  m.folds.assign(bags.size(), 0);
  Rng rng(Rng::mix(seed, 0xf01d));
  std::size_t carry = 0;  // keeps overall fold sizes balanced across classes
  for (auto& [label, group] : by_label(bags)) {
    rng.shuffle(group);
    if (group.size() < static_cast<std::size_t>(k) && warnings)
      warnings->push_back("class " + std::to_string(label) + " has only " +
                          std::to_string(group.size()) + " bags (< k); unstratified for this class");
    for (std::size_t j = 0; j < group.size(); ++j)
      m.folds[group[j]] = static_cast<std::uint32_t>((carry + j) % static_cast<std::size_t>(k));
    carry = (carry + group.size()) % static_cast<std::size_t>(k);
  }
  return m;
}

DatasetManifest holdout_split(const std::vector<Bag>& bags, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("holdout_split: train fraction must be in (0, 1)");
  if (bags.size() < 2) throw ConfigError("holdout_split: need at least 2 bags");
  DatasetManifest m = manifest_from(bags);
  m.seed = seed;
  m.folds.assign(bags.size(), 1);
  Rng rng(Rng::mix(seed, 0x801d));
  for (auto& [label, group] : by_label(bags)) {
    rng.shuffle(group);
    std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * double(group.size())));
    if (group.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, group.size() - 1);
    for (std::size_t j = 0; j < n_train; ++j) m.folds[group[j]] = 0;
  }
  return m;
}

std::string default_data_dir() {
  if (const char* env = std::getenv("MILFORGE_DATA_DIR")) return env;
  return "./data";
}

std::string file_digest(const std::string& path) {
  const auto buf = read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : buf) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return std::string("fnv1a:") + hex;
}

}  // namespace milforge
