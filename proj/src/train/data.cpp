#include "tmblock/train/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "tmblock/rng.hpp"

namespace tmb::train {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.class_names = class_names;
  out.images.reserve(indices.size() * image_bytes());
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw DataError("subset index " + std::to_string(i) + " out of range");
    const auto img = image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

void Dataset::validate() const {
  if (images.size() != labels.size() * image_bytes()) {
    throw DataError("dataset holds " + std::to_string(images.size()) + " image bytes for " +
                    std::to_string(labels.size()) + " labels of " + std::to_string(image_bytes()) +
                    " bytes each");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes()) {
      throw DataError("label " + std::to_string(labels[i]) + " of record " + std::to_string(i) +
                      " outside [0," + std::to_string(num_classes()) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// CIFAR-10

std::vector<std::string> cifar10_class_names() {
  return {"airplane", "automobile", "bird", "cat", "deer",
          "dog",      "frog",       "horse", "ship", "truck"};
}

Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t whole = bytes.size() / kCifarRecordBytes;
    throw DataError(source + ": size " + std::to_string(bytes.size()) +
                    " is not a multiple of " + std::to_string(kCifarRecordBytes) +
                    " (expected " + std::to_string((whole + 1) * kCifarRecordBytes) + " or " +
                    std::to_string(whole * kCifarRecordBytes) + "); truncated record at offset " +
                    std::to_string(whole * kCifarRecordBytes));
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.class_names = cifar10_class_names();
  const std::size_t m = bytes.size() / kCifarRecordBytes;
  ds.labels.resize(m);
  ds.images.resize(m * ds.image_bytes());
  for (std::size_t r = 0; r < m; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError(source + ": record " + std::to_string(r) + " has label byte " +
                      std::to_string(rec[0]) + " > 9");
    }
    ds.labels[r] = rec[0];
    std::copy(rec + 1, rec + kCifarRecordBytes, ds.images.begin() + static_cast<std::ptrdiff_t>(r * ds.image_bytes()));
  }
  return ds;
}

std::vector<std::uint8_t> encode_cifar10(const Dataset& ds) {
  if (ds.channels != 3 || ds.height != 32 || ds.width != 32) {
    throw DataError("encode_cifar10: images must be 3x32x32");
  }
  ds.validate();
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifarRecordBytes);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    if (ds.labels[r] > 9) throw DataError("encode_cifar10: label > 9 at record " + std::to_string(r));
    out.push_back(static_cast<std::uint8_t>(ds.labels[r]));
    const auto img = ds.image(r);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

Dataset load_cifar10_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_cifar10(bytes, path.string());
}

Dataset load_cifar10(const std::filesystem::path& dir, CifarPart part) {
  std::vector<std::string> files;
  if (part == CifarPart::train) {
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back("test_batch.bin");
  }
  Dataset all;
  all.class_names = cifar10_class_names();
  for (const auto& f : files) {
    const auto ds = load_cifar10_file(dir / f);
    all.images.insert(all.images.end(), ds.images.begin(), ds.images.end());
    all.labels.insert(all.labels.end(), ds.labels.begin(), ds.labels.end());
  }
  return all;
}

Dataset balanced_subset(const Dataset& ds, std::size_t per_class) {
  std::vector<std::size_t> taken(ds.num_classes(), 0);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& t = taken[static_cast<std::size_t>(ds.labels[i])];
    if (t < per_class) {
      ++t;
      idx.push_back(i);
    }
  }
  for (std::size_t c = 0; c < taken.size(); ++c) {
    if (taken[c] < per_class) {
      throw DataError("class " + std::to_string(c) + " has only " + std::to_string(taken[c]) +
                      " examples, " + std::to_string(per_class) + " requested");
    }
  }
  return ds.subset(idx);
}

// ---------------------------------------------------------------------------
// Synthetic motifs

std::size_t synth_motif_count(std::size_t classes) {
  std::size_t m = 2;
  while (m * (m - 1) / 2 < classes) ++m;
  return m;
}

std::vector<std::array<std::uint8_t, kMotifSize * kMotifSize>> synth_motifs(std::size_t count) {
  constexpr std::size_t cells = kMotifSize * kMotifSize;
  std::vector<std::array<std::uint8_t, cells>> motifs;
  Rng rng(0x6D6F74696673ULL);
  while (motifs.size() < count) {
    std::vector<std::size_t> order(cells);
    for (std::size_t i = 0; i < cells; ++i) order[i] = i;
    rng.shuffle(order);
    std::array<std::uint8_t, cells> m{};
    for (std::size_t i = 0; i < cells / 2; ++i) m[order[i]] = 1;
    if (std::find(motifs.begin(), motifs.end(), m) == motifs.end()) motifs.push_back(m);
  }
  return motifs;
}

std::vector<std::array<std::size_t, 2>> synth_class_pairs(std::size_t classes) {
  const std::size_t m = synth_motif_count(classes);
  std::vector<std::array<std::size_t, 2>> pairs;
  for (std::size_t a = 0; a < m && pairs.size() < classes; ++a)
    for (std::size_t b = a + 1; b < m && pairs.size() < classes; ++b) pairs.push_back({a, b});
  return pairs;
}

namespace {

std::uint32_t presence_in(std::span<const std::uint8_t> plane, std::size_t h, std::size_t w,
                          const std::vector<std::array<std::uint8_t, kMotifSize * kMotifSize>>& motifs) {
  std::uint32_t mask = 0;
  constexpr std::uint8_t threshold = (kMotifOn + kBackgroundMax) / 2;
  for (std::size_t y = 0; y + kMotifSize <= h; ++y) {
    for (std::size_t x = 0; x + kMotifSize <= w; ++x) {
      for (std::size_t m = 0; m < motifs.size(); ++m) {
        bool match = true;
        for (std::size_t i = 0; i < kMotifSize && match; ++i)
          for (std::size_t j = 0; j < kMotifSize && match; ++j)
            match = (plane[(y + i) * w + x + j] >= threshold) == (motifs[m][i * kMotifSize + j] == 1);
        if (match) mask |= 1u << m;
      }
    }
  }
  return mask;
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("synth_dataset: classes must be >= 2");
  if (spec.samples % spec.classes != 0) {
    throw std::invalid_argument("synth_dataset: samples must be a multiple of classes");
  }
  if (spec.height < 2 * kMotifSize && spec.width < 2 * kMotifSize) {
    throw std::invalid_argument("synth_dataset: image too small for two motifs");
  }
  const std::size_t mcount = synth_motif_count(spec.classes);
  if (mcount > 32) throw std::invalid_argument("synth_dataset: too many classes");
  const auto motifs = synth_motifs(mcount);
  const auto pairs = synth_class_pairs(spec.classes);

  Dataset ds;
  ds.channels = 3;
  ds.height = spec.height;
  ds.width = spec.width;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    ds.class_names.push_back("motifs_" + std::to_string(pairs[c][0]) + "_" + std::to_string(pairs[c][1]));
  }
  ds.labels.resize(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) ds.labels[i] = static_cast<int>(i % spec.classes);
  Rng label_rng(combine_keys(spec.seed, 0x6C6162656C73ULL));
  label_rng.shuffle(ds.labels);

  const std::size_t plane_size = spec.height * spec.width;
  ds.images.resize(spec.samples * ds.image_bytes());
  std::vector<std::uint8_t> plane(plane_size);
  const std::uint32_t max_y = static_cast<std::uint32_t>(spec.height - kMotifSize + 1);
  const std::uint32_t max_x = static_cast<std::uint32_t>(spec.width - kMotifSize + 1);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    Rng rng(combine_keys(spec.seed, i));
    const auto& pair = pairs[static_cast<std::size_t>(ds.labels[i])];
    const std::uint32_t want = (1u << pair[0]) | (1u << pair[1]);
    for (;;) {
      for (auto& px : plane) px = static_cast<std::uint8_t>(rng.below(kBackgroundMax));
      std::size_t pos[2][2];
      for (int k = 0; k < 2; ++k) {
        pos[k][0] = rng.below(max_y);
        pos[k][1] = rng.below(max_x);
      }
      const bool overlap = pos[0][0] < pos[1][0] + kMotifSize && pos[1][0] < pos[0][0] + kMotifSize &&
                           pos[0][1] < pos[1][1] + kMotifSize && pos[1][1] < pos[0][1] + kMotifSize;
      if (overlap) continue;
      for (int k = 0; k < 2; ++k) {
        const auto& motif = motifs[pair[static_cast<std::size_t>(k)]];
        for (std::size_t a = 0; a < kMotifSize; ++a)
          for (std::size_t b = 0; b < kMotifSize; ++b)
            if (motif[a * kMotifSize + b]) plane[(pos[k][0] + a) * spec.width + pos[k][1] + b] = kMotifOn;
      }
      if (presence_in(plane, spec.height, spec.width, motifs) == want) break;
    }
    for (std::size_t c = 0; c < ds.channels; ++c) {
      std::copy(plane.begin(), plane.end(),
                ds.images.begin() + static_cast<std::ptrdiff_t>(i * ds.image_bytes() + c * plane_size));
    }
  }
  return ds;
}

std::uint32_t motif_presence(const Dataset& ds, std::size_t index, std::size_t motif_count) {
  const auto img = ds.image(index);
  return presence_in(img.subspan(0, ds.height * ds.width), ds.height, ds.width,
                     synth_motifs(motif_count));
}

int motif_oracle_classify(const Dataset& ds, std::size_t index, std::size_t classes) {
  const auto pairs = synth_class_pairs(classes);
  const auto mask = motif_presence(ds, index, synth_motif_count(classes));
  for (std::size_t c = 0; c < pairs.size(); ++c) {
    if (mask == ((1u << pairs[c][0]) | (1u << pairs[c][1]))) return static_cast<int>(c);
  }
  return -1;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentDraw augment_draw(std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch,
                         std::size_t position, const AugmentParams& params) {
  const CounterRng rng(combine_keys(combine_keys(seed, epoch), batch));
  const std::uint64_t span = 2 * params.pad + 1;
  AugmentDraw d;
  d.dy = static_cast<std::size_t>(rng.bits(3 * position) % span);
  d.dx = static_cast<std::size_t>(rng.bits(3 * position + 1) % span);
  d.flip = params.flip && (rng.bits(3 * position + 2) & 1u) != 0;
  return d;
}

void augment_image(std::span<const std::uint8_t> src, std::span<std::uint8_t> dst,
                   std::size_t channels, std::size_t height, std::size_t width,
                   const AugmentDraw& draw, std::size_t pad) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        // Position in the padded image, then back to source coordinates.
        const long sy = static_cast<long>(y + draw.dy) - static_cast<long>(pad);
        const std::size_t xx = draw.flip ? width - 1 - x : x;
        const long sx = static_cast<long>(xx + draw.dx) - static_cast<long>(pad);
        std::uint8_t v = 0;
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(height) && sx < static_cast<long>(width)) {
          v = src[(c * height + static_cast<std::size_t>(sy)) * width + static_cast<std::size_t>(sx)];
        }
        dst[(c * height + y) * width + x] = v;
      }
    }
  }
}

void augment(std::vector<std::uint8_t>& batch, std::size_t count, std::size_t channels,
             std::size_t height, std::size_t width, std::uint64_t seed, std::uint64_t epoch,
             std::uint64_t batch_index, const AugmentParams& params) {
  const std::size_t bytes = channels * height * width;
  std::vector<std::uint8_t> tmp(bytes);
  for (std::size_t i = 0; i < count; ++i) {
    const auto d = augment_draw(seed, epoch, batch_index, i, params);
    std::span<std::uint8_t> img(batch.data() + i * bytes, bytes);
    augment_image(img, tmp, channels, height, width, d, params.pad);
    std::copy(tmp.begin(), tmp.end(), img.begin());
  }
}

// ---------------------------------------------------------------------------
// Splits and tensors

std::array<std::vector<std::size_t>, 3> split_indices(const Dataset& ds,
                                                      std::array<double, 3> fractions,
                                                      std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions sum to " + std::to_string(total) + ", not 1");
  }
  std::vector<std::vector<std::size_t>> per_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) per_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::array<std::vector<std::size_t>, 3> out;
  Rng rng(seed);
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    auto& idx = per_class[c];
    const std::size_t n = idx.size();
    const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[0] + 0.5));
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[1] + 0.5));
    const bool fits = n_train + n_val <= n;
    const std::size_t n_test = fits ? n - n_train - n_val : 0;
    const std::size_t counts[3] = {n_train, n_val, n_test};
    bool ok = fits;
    for (int s = 0; s < 3; ++s) ok = ok && (fractions[static_cast<std::size_t>(s)] == 0.0 || counts[s] > 0);
    if (!ok) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(n) +
                      " samples, too few to split into the requested fractions");
    }
    rng.shuffle(idx);
    out[0].insert(out[0].end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out[1].insert(out[1].end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                  idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out[2].insert(out[2].end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

Splits split(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  const auto idx = split_indices(ds, fractions, seed);
  return {ds.subset(idx[0]), ds.subset(idx[1]), ds.subset(idx[2])};
}

ad::Tensor to_input(std::span<const std::uint8_t> images, std::size_t count, std::size_t channels,
                    std::size_t height, std::size_t width) {
  const std::size_t n = count * channels * height * width;
  if (images.size() < n) throw DataError("to_input: not enough image bytes");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (static_cast<double>(images[i]) / 255.0 - 0.5) / 0.25;
  return ad::Tensor::from({count, channels, height, width}, std::move(v));
}

ad::Tensor to_input(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(indices.size() * ds.image_bytes());
  for (auto i : indices) {
    const auto img = ds.image(i);
    bytes.insert(bytes.end(), img.begin(), img.end());
  }
  return to_input(bytes, indices.size(), ds.channels, ds.height, ds.width);
}

}  // namespace tmb::train
