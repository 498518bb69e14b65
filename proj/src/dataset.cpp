#include "tcil/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "tcil/errors.hpp"

namespace tcil {

std::map<int, int> Dataset::train_labels() const {
  std::map<int, int> out;
  for (const DataItem& item : train) out[item.id] = item.label;
  return out;
}

const DataItem& Dataset::train_item(int id) const {
  for (const DataItem& item : train)
    if (item.id == id) return item;
  throw input_error("no train sample with id " + std::to_string(id));
}

int Dataset::num_classes() const {
  int mx = -1;
  for (const DataItem& item : train) mx = std::max(mx, item.label);
  return mx + 1;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.train_per_class < 1 || spec.test_per_class < 1)
    throw config_error("synthetic dataset needs positive class and sample counts");
  Dataset ds;
  ds.channels = spec.channels;
  ds.image_size = spec.image_size;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  // Class pattern: coarse 4x4 grids per channel, bilinearly upsampled, so the
  // signal has spatial structure the conv blocks can pick up. Each class
  // mixes a shared base dictionary with a class-unique component.
  const int grid = 4;
  int s = spec.image_size;
  size_t pattern_len = static_cast<size_t>(spec.channels) * s * s;

  auto upsample = [&](const std::vector<double>& coarse) {
    std::vector<double> pattern(pattern_len);
    for (int ch = 0; ch < spec.channels; ++ch) {
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          double gy = (y + 0.5) / s * grid - 0.5;
          double gx = (x + 0.5) / s * grid - 0.5;
          int y0 = std::clamp(static_cast<int>(std::floor(gy)), 0, grid - 1);
          int x0 = std::clamp(static_cast<int>(std::floor(gx)), 0, grid - 1);
          int y1 = std::min(y0 + 1, grid - 1);
          int x1 = std::min(x0 + 1, grid - 1);
          double fy = std::clamp(gy - y0, 0.0, 1.0);
          double fx = std::clamp(gx - x0, 0.0, 1.0);
          auto at = [&](int yy, int xx) {
            return coarse[(static_cast<size_t>(ch) * grid + yy) * grid + xx];
          };
          pattern[(static_cast<size_t>(ch) * s + y) * s + x] =
              at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x1) * (1 - fy) * fx +
              at(y1, x0) * fy * (1 - fx) + at(y1, x1) * fy * fx;
        }
      }
    }
    return pattern;
  };
  auto random_coarse = [&] {
    std::vector<double> coarse(static_cast<size_t>(spec.channels) * grid * grid);
    for (double& v : coarse) v = unit(rng);
    return coarse;
  };

  std::vector<std::vector<double>> bases;
  for (int b = 0; b < spec.bases; ++b) bases.push_back(upsample(random_coarse()));

  std::vector<std::vector<double>> patterns;
  for (int c = 0; c < spec.classes; ++c) {
    std::vector<double> pattern = upsample(random_coarse());
    if (!bases.empty()) {
      // Equal-energy mix of shared and unique structure.
      std::vector<double> mix(static_cast<size_t>(spec.bases));
      double norm = 0.0;
      for (double& w : mix) {
        w = unit(rng);
        norm += w * w;
      }
      norm = std::sqrt(std::max(norm, 1e-12));
      for (size_t p = 0; p < pattern_len; ++p) {
        double shared = 0.0;
        for (int b = 0; b < spec.bases; ++b) shared += mix[static_cast<size_t>(b)] / norm * bases[static_cast<size_t>(b)][p];
        pattern[p] = (pattern[p] + shared) / std::sqrt(2.0);
      }
    }
    patterns.push_back(std::move(pattern));
  }

  int next_id = 0;
  auto emit = [&](std::vector<DataItem>& dest, int label, int count) {
    for (int i = 0; i < count; ++i) {
      DataItem item;
      item.id = next_id++;
      item.label = label;
      item.image.resize(patterns[static_cast<size_t>(label)].size());
      for (size_t p = 0; p < item.image.size(); ++p)
        item.image[p] = patterns[static_cast<size_t>(label)][p] + spec.noise * unit(rng);
      dest.push_back(std::move(item));
    }
  };
  for (int c = 0; c < spec.classes; ++c) emit(ds.train, c, spec.train_per_class);
  for (int c = 0; c < spec.classes; ++c) emit(ds.test, c, spec.test_per_class);
  return ds;
}

namespace {

void read_cifar_file(const std::string& path, int label_bytes, std::vector<DataItem>& dest,
                     int& next_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open dataset file: " + path);
  const int pixels = 3072;
  std::vector<unsigned char> record(static_cast<size_t>(label_bytes) + pixels);
  while (in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()))) {
    DataItem item;
    item.id = next_id++;
    item.label = record[static_cast<size_t>(label_bytes) - 1];  // fine label is last
    item.image.resize(pixels);
    for (int p = 0; p < pixels; ++p)
      item.image[static_cast<size_t>(p)] =
          record[static_cast<size_t>(label_bytes + p)] / 127.5 - 1.0;
    dest.push_back(std::move(item));
  }
}

}  // namespace

Dataset load_cifar10(const std::string& root) {
  Dataset ds;
  ds.channels = 3;
  ds.image_size = 32;
  int next_id = 0;
  for (int b = 1; b <= 5; ++b)
    read_cifar_file(root + "/data_batch_" + std::to_string(b) + ".bin", 1, ds.train, next_id);
  read_cifar_file(root + "/test_batch.bin", 1, ds.test, next_id);
  if (ds.train.empty() || ds.test.empty()) throw io_error("empty CIFAR-10 data under " + root);
  return ds;
}

Dataset load_cifar100(const std::string& root) {
  Dataset ds;
  ds.channels = 3;
  ds.image_size = 32;
  int next_id = 0;
  read_cifar_file(root + "/train.bin", 2, ds.train, next_id);
  read_cifar_file(root + "/test.bin", 2, ds.test, next_id);
  if (ds.train.empty() || ds.test.empty()) throw io_error("empty CIFAR-100 data under " + root);
  return ds;
}

std::vector<double> augment(const std::vector<double>& image, int channels, int size,
                            const AugmentationConfig& config, std::mt19937_64& rng) {
  std::vector<double> out = image;
  auto coin = [&rng]() { return std::uniform_int_distribution<int>(0, 1)(rng) == 1; };

  if (config.random_crop) {
    int pad = config.crop_pad;
    std::uniform_int_distribution<int> off(0, 2 * pad);
    int dy = off(rng) - pad, dx = off(rng) - pad;
    std::vector<double> shifted(out.size(), 0.0);
    for (int ch = 0; ch < channels; ++ch)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          int sy = y + dy, sx = x + dx;
          if (sy < 0 || sy >= size || sx < 0 || sx >= size) continue;
          shifted[(static_cast<size_t>(ch) * size + y) * size + x] =
              out[(static_cast<size_t>(ch) * size + sy) * size + sx];
        }
    out = std::move(shifted);
  }

  if (config.horizontal_flip && coin()) {
    for (int ch = 0; ch < channels; ++ch)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size / 2; ++x)
          std::swap(out[(static_cast<size_t>(ch) * size + y) * size + x],
                    out[(static_cast<size_t>(ch) * size + y) * size + (size - 1 - x)]);
  }

  if (config.rotation && coin()) {
    std::uniform_real_distribution<double> deg(-config.rotation_degrees, config.rotation_degrees);
    double rad = deg(rng) * 3.14159265358979323846 / 180.0;
    double cs = std::cos(rad), sn = std::sin(rad);
    double cy = (size - 1) / 2.0, cx = (size - 1) / 2.0;
    std::vector<double> rotated(out.size(), 0.0);
    for (int ch = 0; ch < channels; ++ch)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double sy = cs * (y - cy) + sn * (x - cx) + cy;
          double sx = -sn * (y - cy) + cs * (x - cx) + cx;
          int iy = static_cast<int>(std::lround(sy)), ix = static_cast<int>(std::lround(sx));
          if (iy < 0 || iy >= size || ix < 0 || ix >= size) continue;
          rotated[(static_cast<size_t>(ch) * size + y) * size + x] =
              out[(static_cast<size_t>(ch) * size + iy) * size + ix];
        }
    out = std::move(rotated);
  }

  if (config.brightness && coin()) {
    std::uniform_real_distribution<double> delta(-config.brightness_delta, config.brightness_delta);
    double d = delta(rng);
    for (double& v : out) v += d;
  }

  if (config.cutout && coin()) {
    std::uniform_int_distribution<int> pos(0, size - 1);
    int cy = pos(rng), cx = pos(rng);
    int half = config.cutout_size / 2;
    for (int ch = 0; ch < channels; ++ch)
      for (int y = std::max(0, cy - half); y < std::min(size, cy + half + 1); ++y)
        for (int x = std::max(0, cx - half); x < std::min(size, cx + half + 1); ++x)
          out[(static_cast<size_t>(ch) * size + y) * size + x] = 0.0;
  }

  return out;
}

}  // namespace tcil
