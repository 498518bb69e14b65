#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

namespace tcil {

// Images are flat CHW doubles, roughly in [-1, 1].
struct DataItem {
  int id = 0;
  int label = 0;
  std::vector<double> image;
};

struct Dataset {
  int channels = 3;
  int image_size = 32;
  std::vector<DataItem> train;
  std::vector<DataItem> test;

  std::map<int, int> train_labels() const;
  const DataItem& train_item(int id) const;
  int num_classes() const;
};

struct SyntheticSpec {
  int classes = 10;
  int train_per_class = 100;
  int test_per_class = 50;
  int image_size = 16;
  int channels = 3;
  double noise = 0.6;  // stddev around the class pattern
  // Number of shared base patterns the class patterns mix; 0 makes the
  // classes statistically independent. Shared structure is what lets
  // distillation on new-task images say anything about old classes.
  int bases = 8;
  uint64_t seed = 7;
};

// Per-class smooth random patterns plus Gaussian pixel noise; class
// difficulty is controlled by the noise level.
Dataset make_synthetic(const SyntheticSpec& spec);

// CIFAR binary format loaders (data_batch_*.bin / train.bin under root).
Dataset load_cifar10(const std::string& root);
Dataset load_cifar100(const std::string& root);

struct AugmentationConfig {
  bool random_crop = false;
  int crop_pad = 2;
  bool horizontal_flip = false;
  bool rotation = false;
  double rotation_degrees = 15.0;
  bool brightness = false;
  double brightness_delta = 0.2;
  bool cutout = false;
  int cutout_size = 4;

  bool any() const {
    return random_crop || horizontal_flip || rotation || brightness || cutout;
  }
};

std::vector<double> augment(const std::vector<double>& image, int channels, int size,
                            const AugmentationConfig& config, std::mt19937_64& rng);

}  // namespace tcil
