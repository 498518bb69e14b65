#include "tcil/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "tcil/errors.hpp"

namespace tcil {

namespace {

using nlohmann::json;

constexpr char kMagic[] = "TCILCKPT1\n";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;

struct ArrayWriter {
  json index = json::array();
  std::vector<double> payload;

  void add(const std::string& name, const Tensor& t) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = payload.size();
    index.push_back(entry);
    payload.insert(payload.end(), t.data().begin(), t.data().end());
  }
};

struct ArrayReader {
  std::map<std::string, std::pair<Shape, size_t>> index;
  std::vector<double> payload;

  Tensor get(const std::string& name, bool requires_grad) const {
    auto it = index.find(name);
    if (it == index.end()) throw checkpoint_error("checkpoint missing array: " + name);
    const auto& [shape, offset] = it->second;
    size_t n = static_cast<size_t>(numel(shape));
    if (offset + n > payload.size())
      throw checkpoint_error("checkpoint array out of bounds: " + name);
    std::vector<double> values(payload.begin() + static_cast<long>(offset),
                               payload.begin() + static_cast<long>(offset + n));
    return Tensor::from(shape, std::move(values), requires_grad);
  }
};

std::string conv_name(int extractor, int layer, const char* part) {
  return "extractor" + std::to_string(extractor) + ".conv" + std::to_string(layer) + "." + part;
}

}  // namespace

void save_checkpoint(const DeaModel& model, const std::string& path) {
  json manifest;
  manifest["format"] = "tcil-checkpoint";
  manifest["version"] = 1;
  manifest["arch"] = {{"in_channels", model.arch().in_channels},
                      {"image_size", model.arch().image_size},
                      {"channels", model.arch().channels}};
  manifest["reduction"] = model.reduction();
  manifest["seed"] = model.seed();
  manifest["step"] = model.step();
  manifest["classes_per_step"] = model.classes_per_step();
  manifest["step_class_ids"] = model.class_ids_per_step();
  if (model.rescore_state()) {
    manifest["rescore"] = {{"gamma", model.rescore_state()->gamma},
                           {"old_count", model.rescore_state()->old_count},
                           {"new_count", model.rescore_state()->new_count}};
  } else {
    manifest["rescore"] = nullptr;
  }

  json kept = json::array();
  for (int i = 0; i < model.num_extractors(); ++i)
    kept.push_back(model.extractor(i).kept_indices);
  manifest["kept_indices"] = kept;

  ArrayWriter writer;
  for (int i = 0; i < model.num_extractors(); ++i) {
    const Extractor& e = model.extractor(i);
    for (size_t l = 0; l < e.convs.size(); ++l) {
      writer.add(conv_name(i, static_cast<int>(l), "weight"), e.convs[l].weight);
      writer.add(conv_name(i, static_cast<int>(l), "bias"), e.convs[l].bias);
      writer.add(conv_name(i, static_cast<int>(l), "norm.gain"), e.norms[l].gain);
      writer.add(conv_name(i, static_cast<int>(l), "norm.bias"), e.norms[l].bias);
    }
  }
  const FusionModule& f = model.fusion();
  writer.add("fusion.mlp.fc1.weight", f.channel_mlp.fc1.weight);
  writer.add("fusion.mlp.fc1.bias", f.channel_mlp.fc1.bias);
  writer.add("fusion.mlp.fc2.weight", f.channel_mlp.fc2.weight);
  writer.add("fusion.mlp.fc2.bias", f.channel_mlp.fc2.bias);
  writer.add("fusion.spatial.weight", f.spatial_conv.weight);
  writer.add("fusion.spatial.bias", f.spatial_conv.bias);
  writer.add("classifier.weight", model.classifier().weight);
  if (model.classifier().bias.defined())
    writer.add("classifier.bias", model.classifier().bias);
  manifest["arrays"] = writer.index;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write checkpoint: " + path);
  std::string mstr = manifest.dump();
  uint64_t mlen = mstr.size();
  out.write(kMagic, static_cast<std::streamsize>(kMagicLen));
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  out.write(reinterpret_cast<const char*>(writer.payload.data()),
            static_cast<std::streamsize>(writer.payload.size() * sizeof(double)));
  if (!out) throw io_error("short write on checkpoint: " + path);
}

DeaModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint: " + path);
  char magic[kMagicLen];
  in.read(magic, static_cast<std::streamsize>(kMagicLen));
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw checkpoint_error("not a checkpoint file: " + path);
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!in || mlen > (1ull << 30)) throw checkpoint_error("corrupt manifest length in " + path);
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw checkpoint_error("truncated manifest in " + path);
  json manifest;
  try {
    manifest = json::parse(mstr);
  } catch (const json::exception& e) {
    throw checkpoint_error("corrupt manifest in " + path + ": " + e.what());
  }

  ArrayReader reader;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0)
      throw checkpoint_error("payload size not a multiple of 8 in " + path);
    reader.payload.resize(rest.size() / sizeof(double));
    std::memcpy(reader.payload.data(), rest.data(), rest.size());
  }

  try {
    for (const auto& entry : manifest.at("arrays")) {
      Shape shape = entry.at("shape").get<Shape>();
      reader.index[entry.at("name").get<std::string>()] = {shape,
                                                           entry.at("offset").get<size_t>()};
    }

    ExtractorConfig arch;
    arch.in_channels = manifest.at("arch").at("in_channels").get<int>();
    arch.image_size = manifest.at("arch").at("image_size").get<int>();
    arch.channels = manifest.at("arch").at("channels").get<std::vector<int>>();
    int reduction = manifest.at("reduction").get<int>();
    uint64_t seed = manifest.at("seed").get<uint64_t>();
    int step = manifest.at("step").get<int>();
    auto classes_per_step = manifest.at("classes_per_step").get<std::vector<int>>();
    auto step_class_ids = manifest.at("step_class_ids").get<std::vector<std::vector<int>>>();
    auto kept = manifest.at("kept_indices").get<std::vector<std::vector<std::vector<int>>>>();
    if (static_cast<int>(kept.size()) != step)
      throw checkpoint_error("kept_indices count does not match step");

    std::vector<Extractor> extractors;
    for (int i = 0; i < step; ++i) {
      Extractor e;
      e.config = arch;
      for (size_t l = 0; l < arch.channels.size(); ++l) {
        Conv2dLayer conv;
        conv.weight = reader.get(conv_name(i, static_cast<int>(l), "weight"), true);
        conv.bias = reader.get(conv_name(i, static_cast<int>(l), "bias"), true);
        conv.pad = 1;
        e.convs.push_back(std::move(conv));
        InstanceNormLayer norm;
        norm.gain = reader.get(conv_name(i, static_cast<int>(l), "norm.gain"), true);
        norm.bias = reader.get(conv_name(i, static_cast<int>(l), "norm.bias"), true);
        e.norms.push_back(std::move(norm));
      }
      e.kept_indices = kept[static_cast<size_t>(i)];
      extractors.push_back(std::move(e));
    }

    FusionModule fusion;
    fusion.channel_mlp.fc1.weight = reader.get("fusion.mlp.fc1.weight", true);
    fusion.channel_mlp.fc1.bias = reader.get("fusion.mlp.fc1.bias", true);
    fusion.channel_mlp.fc2.weight = reader.get("fusion.mlp.fc2.weight", true);
    fusion.channel_mlp.fc2.bias = reader.get("fusion.mlp.fc2.bias", true);
    fusion.spatial_conv.weight = reader.get("fusion.spatial.weight", true);
    fusion.spatial_conv.bias = reader.get("fusion.spatial.bias", true);
    fusion.spatial_conv.pad = 3;
    fusion.channels = fusion.channel_mlp.fc1.weight.shape()[1];

    GrowingClassifier classifier;
    classifier.weight = reader.get("classifier.weight", true);
    if (reader.index.count("classifier.bias"))
      classifier.bias = reader.get("classifier.bias", true);

    std::optional<RescoreState> rescore;
    if (!manifest.at("rescore").is_null()) {
      RescoreState rs;
      rs.gamma = manifest.at("rescore").at("gamma").get<double>();
      rs.old_count = manifest.at("rescore").at("old_count").get<int>();
      rs.new_count = manifest.at("rescore").at("new_count").get<int>();
      rescore = rs;
    }

    return DeaModel::restore(arch, reduction, seed, std::move(extractors), std::move(fusion),
                             std::move(classifier), rescore, std::move(classes_per_step),
                             std::move(step_class_ids));
  } catch (const json::exception& e) {
    throw checkpoint_error("corrupt checkpoint " + path + ": " + e.what());
  }
}

}  // namespace tcil
