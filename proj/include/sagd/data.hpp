#pragma once

// Data ingestion and synthesis: seeded toy ID/OOD generators (Gaussian
// mixtures and rings), the augmentation pipeline that builds the contrastive
// full set I = X u A, directory/packed-binary image loading, and the packed
// dataset converter helpers. Every generator and loader is deterministic
// given its seed.

#include "sagd/common.hpp"
#include "sagd/losses.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace sagd {

struct LabeledData {
  Mat x;
  std::vector<int> labels;

  Eigen::Index size() const { return x.rows(); }
};

struct ToyDatasetSpec {
  std::string kind = "gaussian_mixture";  // gaussian_mixture | rings
  int num_classes = 4;
  int dim = 16;
  int samples_per_class = 200;
  int test_samples_per_class = 0;  // 0: same as samples_per_class
  double class_separation = 6.0;   // mean spacing in units of the noise sigma
  std::vector<double> ood_shift_vector;  // empty: use the scalar radius below
  double ood_shift = 6.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (kind != "gaussian_mixture" && kind != "rings")
      throw ConfigError("ToyDatasetSpec: unknown kind '" + kind + "'");
    if (num_classes < 1) throw ConfigError("ToyDatasetSpec: num_classes must be >= 1");
    if (dim < 2) throw ConfigError("ToyDatasetSpec: dim must be >= 2");
    if (samples_per_class < 10)
      throw ConfigError("ToyDatasetSpec: samples_per_class must be >= 10");
    if (!(class_separation > 0.0))
      throw ConfigError("ToyDatasetSpec: class_separation must be > 0");
    if (!ood_shift_vector.empty() &&
        static_cast<int>(ood_shift_vector.size()) != dim)
      throw ConfigError("ToyDatasetSpec: ood_shift_vector dimension mismatch");
  }
};

struct ToyDataset {
  LabeledData id_train;
  LabeledData id_test;
  LabeledData ood_test;  // labels are the generating component, not used for ID
};

namespace detail {

// Class means: scaled basis vectors when the dimension allows (deterministic
// and exactly class_separation * sqrt(2) apart), random unit directions
// otherwise.
inline Mat mixture_means(const ToyDatasetSpec& spec, Rng& rng) {
  Mat means = Mat::Zero(spec.num_classes, spec.dim);
  if (spec.dim >= spec.num_classes) {
    for (int k = 0; k < spec.num_classes; ++k)
      means(k, k) = spec.class_separation;
  } else {
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int k = 0; k < spec.num_classes; ++k) {
      Vec dir(spec.dim);
      for (int j = 0; j < spec.dim; ++j) dir(j) = gauss(rng);
      means.row(k) = spec.class_separation * dir.transpose() / dir.norm();
    }
  }
  return means;
}

inline Vec ood_displacement(const ToyDatasetSpec& spec) {
  if (!spec.ood_shift_vector.empty())
    return Eigen::Map<const Vec>(spec.ood_shift_vector.data(), spec.dim);
  return Vec::Constant(spec.dim, spec.ood_shift / std::sqrt(double(spec.dim)));
}

inline LabeledData sample_mixture(const Mat& means, int per_class, Rng& rng,
                                  const Vec& shift) {
  const int k = static_cast<int>(means.rows());
  const int d = static_cast<int>(means.cols());
  LabeledData data;
  data.x = Mat(k * per_class, d);
  data.labels.resize(static_cast<size_t>(k) * per_class);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::Index row = 0;
  for (int c = 0; c < k; ++c)
    for (int s = 0; s < per_class; ++s, ++row) {
      for (int j = 0; j < d; ++j) data.x(row, j) = means(c, j) + gauss(rng) + shift(j);
      data.labels[static_cast<size_t>(row)] = c;
    }
  return data;
}

// Concentric rings in the first two coordinates; remaining coordinates are
// small Gaussian noise. ring_offset shifts every radius.
inline LabeledData sample_rings(const ToyDatasetSpec& spec, int per_class, Rng& rng,
                                double ring_offset, const Vec& shift) {
  LabeledData data;
  data.x = Mat(spec.num_classes * per_class, spec.dim);
  data.labels.resize(static_cast<size_t>(spec.num_classes) * per_class);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  const double radial_sigma = spec.class_separation / 10.0;
  Eigen::Index row = 0;
  for (int c = 0; c < spec.num_classes; ++c)
    for (int s = 0; s < per_class; ++s, ++row) {
      const double r =
          (c + 1) * spec.class_separation + ring_offset + radial_sigma * gauss(rng);
      const double a = angle(rng);
      data.x(row, 0) = r * std::cos(a) + shift(0);
      data.x(row, 1) = r * std::sin(a) + shift(1);
      for (int j = 2; j < spec.dim; ++j) data.x(row, j) = 0.1 * gauss(rng) + shift(j);
      data.labels[static_cast<size_t>(row)] = c;
    }
  return data;
}

}  // namespace detail

// ID train/test splits plus an OOD test set drawn from the shifted (mixture)
// or radius-offset (rings) generator. Same seed, bit-identical output.
inline ToyDataset generate_toy(const ToyDatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int test_per_class =
      spec.test_samples_per_class > 0 ? spec.test_samples_per_class : spec.samples_per_class;
  ToyDataset out;
  const Vec zero = Vec::Zero(spec.dim);
  const Vec shift = detail::ood_displacement(spec);
  if (spec.kind == "gaussian_mixture") {
    const Mat means = detail::mixture_means(spec, rng);
    out.id_train = detail::sample_mixture(means, spec.samples_per_class, rng, zero);
    out.id_test = detail::sample_mixture(means, test_per_class, rng, zero);
    out.ood_test = detail::sample_mixture(means, test_per_class, rng, shift);
  } else {
    out.id_train = detail::sample_rings(spec, spec.samples_per_class, rng, 0.0, zero);
    out.id_test = detail::sample_rings(spec, test_per_class, rng, 0.0, zero);
    // For rings the scalar shift moves the radii; a vector shift translates.
    if (spec.ood_shift_vector.empty()) {
      out.ood_test = detail::sample_rings(spec, test_per_class, rng,
                                          spec.ood_shift * spec.class_separation, zero);
    } else {
      out.ood_test = detail::sample_rings(spec, test_per_class, rng, 0.0, shift);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation pipeline and contrastive set construction.
// ---------------------------------------------------------------------------

struct AugmentationSpec {
  int views_per_sample = 2;
  // Vector data: additive Gaussian noise scale.
  double vector_noise_scale = 0.1;
  // Image data (active when image_shape = {C,H,W} is set): random shift
  // within +/-crop_shift pixels, horizontal flip, additive brightness jitter.
  std::vector<int> image_shape;
  int crop_shift = 2;
  bool hflip = true;
  double brightness_jitter = 0.05;
  std::array<double, 2> input_range{-1e30, 1e30};  // outputs clamped here
  std::uint64_t seed = 1;

  void validate() const {
    if (views_per_sample < 1)
      throw ConfigError("AugmentationSpec: views_per_sample must be >= 1");
    if (!image_shape.empty() && image_shape.size() != 3)
      throw ConfigError("AugmentationSpec: image_shape must be {C,H,W}");
    if (!(input_range[0] < input_range[1]))
      throw ConfigError("AugmentationSpec: empty input_range");
  }
};

// Inputs for one contrastive batch: rows 0..n_original-1 are X, the rest are
// the augmented set A. positives/candidates use the conventions of
// ContrastiveBatch (anchors over all of I, P(i) = same-label indices != i).
struct ContrastiveViews {
  Mat inputs;
  std::vector<int> labels;
  int n_original = 0;
  std::vector<std::pair<int, std::vector<int>>> positives;
  std::vector<int> candidates;
};

namespace detail {

inline Mat augment_rows(const Mat& x, const AugmentationSpec& spec, Rng& rng) {
  Mat out = x;
  std::normal_distribution<double> gauss(0.0, 1.0);
  if (spec.image_shape.empty()) {
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        out(i, j) += spec.vector_noise_scale * gauss(rng);
  } else {
    const int c = spec.image_shape[0], h = spec.image_shape[1], w = spec.image_shape[2];
    if (static_cast<Eigen::Index>(c) * h * w != x.cols())
      throw ContractViolation("augment: image_shape does not match row width");
    std::uniform_int_distribution<int> shift(-spec.crop_shift, spec.crop_shift);
    std::uniform_int_distribution<int> coin(0, 1);
    std::uniform_real_distribution<double> bright(-spec.brightness_jitter,
                                                  spec.brightness_jitter);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const int dy = shift(rng), dx = shift(rng);
      const bool flip = spec.hflip && coin(rng) == 1;
      const double db = bright(rng);
      Eigen::RowVectorXd src = x.row(i);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xi = 0; xi < w; ++xi) {
            const int sy = y + dy;
            const int sx0 = flip ? (w - 1 - xi) : xi;
            const int sx = sx0 + dx;
            double v = 0.0;
            if (sy >= 0 && sy < h && sx >= 0 && sx < w)
              v = src(ch * h * w + sy * w + sx);
            out(i, ch * h * w + y * w + xi) = v + db;
          }
    }
  }
  return out.cwiseMax(spec.input_range[0]).cwiseMin(spec.input_range[1]);
}

}  // namespace detail

// Builds I = X u A with views_per_sample augmented copies per sample.
inline ContrastiveViews make_contrastive_views(const Mat& x,
                                               const std::vector<int>& labels,
                                               const AugmentationSpec& spec, Rng& rng) {
  spec.validate();
  if (static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw ContractViolation("make_contrastive_views: labels/batch size mismatch");
  const int n = static_cast<int>(x.rows());
  const int total = n * (1 + spec.views_per_sample);

  ContrastiveViews views;
  views.n_original = n;
  views.inputs = Mat(total, x.cols());
  views.inputs.topRows(n) = x;
  views.labels.resize(static_cast<size_t>(total));
  for (int i = 0; i < n; ++i) views.labels[static_cast<size_t>(i)] = labels[i];

  for (int v = 0; v < spec.views_per_sample; ++v) {
    const Mat aug = detail::augment_rows(x, spec, rng);
    views.inputs.middleRows(n * (v + 1), n) = aug;
    for (int i = 0; i < n; ++i)
      views.labels[static_cast<size_t>(n * (v + 1) + i)] = labels[i];
  }
  for (int i = n; i < total; ++i) views.candidates.push_back(i);

  // P(i): all same-label members of I except the anchor itself.
  std::vector<std::vector<int>> by_label;
  for (int i = 0; i < total; ++i) {
    const int y = views.labels[static_cast<size_t>(i)];
    if (y >= static_cast<int>(by_label.size())) by_label.resize(y + 1);
    by_label[static_cast<size_t>(y)].push_back(i);
  }
  views.positives.reserve(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) {
    std::vector<int> ps;
    for (int j : by_label[static_cast<size_t>(views.labels[static_cast<size_t>(i)])])
      if (j != i) ps.push_back(j);
    views.positives.emplace_back(i, std::move(ps));
  }
  return views;
}

// Convenience overload seeding its own generator from the spec.
inline ContrastiveViews make_contrastive_views(const Mat& x,
                                               const std::vector<int>& labels,
                                               const AugmentationSpec& spec) {
  Rng rng(spec.seed);
  return make_contrastive_views(x, labels, spec, rng);
}

// ---------------------------------------------------------------------------
// Image datasets. Two layouts:
//  (a) directory with one subdirectory per class (sorted name order = label
//      order) holding binary PPM (P6) / PGM (P5) files;
//  (b) one packed binary file, header all little-endian:
//      magic "SAGDIMGS" (8 bytes), u32 version = 1, u64 count, u32 height,
//      u32 width, u32 channels, u32 label_width (bytes per label), then per
//      record: label (label_width bytes, little-endian) + h*w*c uint8 pixels,
//      channel-major.
// ---------------------------------------------------------------------------

struct ImageDataset {
  std::vector<std::uint8_t> pixels;  // count * c * h * w
  std::vector<int> labels;
  int height = 0, width = 0, channels = 0;

  Eigen::Index count() const { return static_cast<Eigen::Index>(labels.size()); }
  int sample_size() const { return channels * height * width; }
};

inline constexpr char kImageMagic[9] = "SAGDIMGS";

inline void write_packed_dataset(const ImageDataset& ds,
                                 const std::filesystem::path& path) {
  std::string out;
  out.append(kImageMagic, 8);
  detail::append_le<std::uint32_t>(out, 1);
  detail::append_le<std::uint64_t>(out, static_cast<std::uint64_t>(ds.count()));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.height));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.width));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.channels));
  detail::append_le<std::uint32_t>(out, 1);  // label_width: one byte
  const size_t ss = static_cast<size_t>(ds.sample_size());
  for (Eigen::Index i = 0; i < ds.count(); ++i) {
    const int y = ds.labels[static_cast<size_t>(i)];
    if (y < 0 || y > 255) throw ContractViolation("write_packed_dataset: label > 255");
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(y)));
    out.append(reinterpret_cast<const char*>(ds.pixels.data()) + ss * i, ss);
  }
  write_file_atomic(path, out);
}

inline ImageDataset read_packed_dataset(const std::filesystem::path& path) {
  const std::string s = read_file(path);
  if (s.size() < 8 || std::memcmp(s.data(), kImageMagic, 8) != 0)
    throw IngestionError("packed dataset: bad magic in " + path.string());
  size_t off = 8;
  const auto version = detail::read_le<std::uint32_t>(s, off, "version");
  if (version != 1)
    throw IngestionError("packed dataset: unsupported version in " + path.string());
  const auto count = detail::read_le<std::uint64_t>(s, off, "count");
  ImageDataset ds;
  ds.height = static_cast<int>(detail::read_le<std::uint32_t>(s, off, "height"));
  ds.width = static_cast<int>(detail::read_le<std::uint32_t>(s, off, "width"));
  ds.channels = static_cast<int>(detail::read_le<std::uint32_t>(s, off, "channels"));
  const auto label_width = detail::read_le<std::uint32_t>(s, off, "label_width");
  if (label_width < 1 || label_width > 4)
    throw IngestionError("packed dataset: bad label_width in " + path.string());
  const size_t ss = static_cast<size_t>(ds.sample_size());
  ds.pixels.resize(ss * count);
  ds.labels.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t label = 0;
    for (std::uint32_t b = 0; b < label_width; ++b)
      label |= static_cast<std::uint32_t>(
                   static_cast<std::uint8_t>(detail::read_le<char>(s, off, "label")))
               << (8 * b);
    ds.labels[i] = static_cast<int>(label);
    if (off + ss > s.size())
      throw IngestionError("packed dataset: truncated pixels in " + path.string());
    std::memcpy(ds.pixels.data() + ss * i, s.data() + off, ss);
    off += ss;
  }
  return ds;
}

namespace detail {

inline int ppm_read_token(const std::string& s, size_t& off) {
  while (off < s.size()) {
    if (std::isspace(static_cast<unsigned char>(s[off]))) {
      ++off;
    } else if (s[off] == '#') {
      while (off < s.size() && s[off] != '\n') ++off;
    } else {
      break;
    }
  }
  int value = 0;
  bool any = false;
  while (off < s.size() && std::isdigit(static_cast<unsigned char>(s[off]))) {
    value = value * 10 + (s[off] - '0');
    ++off;
    any = true;
  }
  if (!any) throw IngestionError("pnm: malformed header token");
  return value;
}

}  // namespace detail

// Binary PPM (P6, RGB) or PGM (P5, gray) with maxval 255. Returns
// channel-major uint8 pixels.
inline void read_pnm(const std::filesystem::path& path, std::vector<std::uint8_t>& pixels,
                     int& channels, int& height, int& width) {
  const std::string s = read_file(path);
  if (s.size() < 2 || s[0] != 'P' || (s[1] != '5' && s[1] != '6'))
    throw IngestionError("pnm: unsupported format in " + path.string());
  channels = s[1] == '6' ? 3 : 1;
  size_t off = 2;
  try {
    width = detail::ppm_read_token(s, off);
    height = detail::ppm_read_token(s, off);
    const int maxval = detail::ppm_read_token(s, off);
    if (maxval != 255) throw IngestionError("pnm: only maxval 255 supported");
  } catch (const IngestionError& e) {
    throw IngestionError(std::string(e.what()) + " in " + path.string());
  }
  ++off;  // single whitespace after maxval
  const size_t need = static_cast<size_t>(channels) * height * width;
  if (off + need > s.size())
    throw IngestionError("pnm: truncated pixel data in " + path.string());
  pixels.resize(need);
  // Interleaved file order -> channel-major.
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        pixels[static_cast<size_t>(c) * height * width + static_cast<size_t>(y) * width + x] =
            static_cast<std::uint8_t>(
                s[off + (static_cast<size_t>(y) * width + x) * channels + c]);
}

// Directory layout: one subdirectory per class, sorted subdirectory names
// define the label order; image files inside are read in sorted name order.
inline ImageDataset read_image_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root))
    throw IngestionError("image dataset: not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw IngestionError("image dataset: no class subdirectories in " + root.string());

  ImageDataset ds;
  for (size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[label]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::vector<std::uint8_t> pixels;
      int c = 0, h = 0, w = 0;
      read_pnm(f, pixels, c, h, w);
      if (ds.labels.empty()) {
        ds.channels = c;
        ds.height = h;
        ds.width = w;
      } else if (c != ds.channels || h != ds.height || w != ds.width) {
        throw IngestionError("image dataset: inconsistent image shape at " + f.string());
      }
      ds.pixels.insert(ds.pixels.end(), pixels.begin(), pixels.end());
      ds.labels.push_back(static_cast<int>(label));
    }
  }
  if (ds.labels.empty())
    throw IngestionError("image dataset: no images under " + root.string());
  return ds;
}

// CIFAR-style binary: records of one label byte + channel-major 32x32x3
// pixels, possibly split across several files.
inline ImageDataset read_cifar_binary(const std::vector<std::filesystem::path>& files) {
  ImageDataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  const size_t record = 1 + 3 * 32 * 32;
  for (const auto& f : files) {
    const std::string s = read_file(f);
    if (s.size() % record != 0)
      throw IngestionError("cifar binary: size not a multiple of record length: " +
                           f.string());
    for (size_t off = 0; off < s.size(); off += record) {
      ds.labels.push_back(static_cast<std::uint8_t>(s[off]));
      ds.pixels.insert(ds.pixels.end(),
                       reinterpret_cast<const std::uint8_t*>(s.data()) + off + 1,
                       reinterpret_cast<const std::uint8_t*>(s.data()) + off + record);
    }
  }
  if (ds.labels.empty()) throw IngestionError("cifar binary: no records");
  return ds;
}

// Loads either layout, scales pixels into input_range, and applies a seeded
// deterministic shuffle.
inline LabeledData load_image_dataset(const std::filesystem::path& root,
                                      const std::array<double, 2>& input_range,
                                      std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::exists(root))
    throw IngestionError("image dataset: missing path: " + root.string());
  const ImageDataset ds =
      fs::is_directory(root) ? read_image_directory(root) : read_packed_dataset(root);

  const Eigen::Index n = ds.count();
  const int ss = ds.sample_size();
  LabeledData out;
  out.x = Mat(n, ss);
  out.labels.resize(static_cast<size_t>(n));

  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const double lo = input_range[0];
  const double scale = (input_range[1] - input_range[0]) / 255.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index src = order[static_cast<size_t>(i)];
    for (int j = 0; j < ss; ++j)
      out.x(i, j) = lo + scale * ds.pixels[static_cast<size_t>(src) * ss + j];
    out.labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
  }
  return out;
}

}  // namespace sagd
