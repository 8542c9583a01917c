#include "sts/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sts/adam.hpp"

namespace sts {

void ArchitectureConfig::validate() const {
  if (num_classes < 2) {
    throw Error("config", "class count must be at least 2, got " + std::to_string(num_classes));
  }
  if (channels != 3) throw Error("config", "only 3-channel images are supported");
  if (conv.empty()) throw Error("config", "at least one convolutional layer is required");
  flattened_size();
  for (std::size_t w : hidden) {
    if (w == 0) throw Error("config", "dense width must be positive");
  }
}

std::size_t ArchitectureConfig::flattened_size() const {
  std::size_t h = height, w = width, c = channels;
  for (const auto& layer : conv) {
    if (layer.out_channels == 0 || layer.kernel_size == 0 || layer.kernel_size > h + 2 * layer.padding ||
        layer.kernel_size > w + 2 * layer.padding) {
      throw Error("config", "convolution does not fit the feature map");
    }
    h = h + 2 * layer.padding - layer.kernel_size + 1;
    w = w + 2 * layer.padding - layer.kernel_size + 1;
    for (std::size_t p = 0; p < layer.pool_steps; ++p) {
      h = (h + 1) / 2;
      w = (w + 1) / 2;
    }
    c = layer.out_channels;
    if (h == 0 || w == 0) throw Error("config", "feature map shrinks to zero");
  }
  return c * h * w;
}

std::size_t ModelCheckpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

nlohmann::json to_json(const ArchitectureConfig& arch) {
  nlohmann::json conv = nlohmann::json::array();
  for (const auto& l : arch.conv) {
    conv.push_back({{"out_channels", l.out_channels}, {"kernel_size", l.kernel_size}, {"padding", l.padding}, {"pool_steps", l.pool_steps}});
  }
  return {{"height", arch.height},   {"width", arch.width},   {"channels", arch.channels},
          {"conv", conv},            {"hidden", arch.hidden}, {"num_classes", arch.num_classes}};
}

ArchitectureConfig architecture_from_json(const nlohmann::json& j) {
  ArchitectureConfig a;
  a.height = j.at("height").get<std::size_t>();
  a.width = j.at("width").get<std::size_t>();
  a.channels = j.at("channels").get<std::size_t>();
  a.conv.clear();
  for (const auto& l : j.at("conv")) {
    a.conv.push_back({l.at("out_channels").get<std::size_t>(), l.at("kernel_size").get<std::size_t>(),
                      l.at("padding").get<std::size_t>(), l.at("pool_steps").get<std::size_t>()});
  }
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.validate();
  return a;
}

namespace {

std::string conv_name(std::size_t i, const char* what) {
  return "conv" + std::to_string(i) + "." + what;
}
std::string dense_name(std::size_t i, const char* what) {
  return "dense" + std::to_string(i) + "." + what;
}

std::vector<std::size_t> dense_widths(const ArchitectureConfig& a) {
  std::vector<std::size_t> widths = a.hidden;
  widths.push_back(a.num_classes);
  return widths;
}

}  // namespace

ModelCheckpoint build_model(const ArchitectureConfig& config, std::uint64_t seed) {
  config.validate();
  ModelCheckpoint m;
  m.arch = config;
  m.meta.seed = seed;
  std::mt19937_64 rng(seed);
  auto he_uniform = [&](Shape shape, std::size_t fan_in) {
    const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
    std::uniform_real_distribution<float> u(-limit, limit);
    Tensor t(std::move(shape));
    for (float& v : t.data()) v = u(rng);
    return t;
  };
  std::size_t in_c = config.channels;
  for (std::size_t i = 0; i < config.conv.size(); ++i) {
    const auto& l = config.conv[i];
    m.params[conv_name(i, "weight")] =
        he_uniform({l.out_channels, in_c, l.kernel_size, l.kernel_size}, in_c * l.kernel_size * l.kernel_size);
    m.params[conv_name(i, "bias")] = Tensor({l.out_channels}, 0.0f);
    in_c = l.out_channels;
  }
  std::size_t in = config.flattened_size();
  const auto widths = dense_widths(config);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    m.params[dense_name(i, "weight")] = he_uniform({in, widths[i]}, in);
    m.params[dense_name(i, "bias")] = Tensor({widths[i]}, 0.0f);
    in = widths[i];
  }
  return m;
}

ad::NodeId build_classifier(ad::Graph<float>& g, const ModelCheckpoint& model, ad::NodeId images,
                            bool trainable) {
  const ArchitectureConfig& a = model.arch;
  const Shape& in = g.node(images).shape;
  if (in.size() != 4 || in[1] != a.channels || in[2] != a.height || in[3] != a.width) {
    throw Error("shape", "classifier expects [N," + std::to_string(a.channels) + "," +
                             std::to_string(a.height) + "," + std::to_string(a.width) +
                             "] images, got " + shape_string(in));
  }
  auto param = [&](const std::string& name) {
    auto it = model.params.find(name);
    if (it == model.params.end()) throw Error("checkpoint", "missing parameter " + name);
    return g.parameter(name, it->second, trainable);
  };
  ad::NodeId x = images;
  for (std::size_t i = 0; i < a.conv.size(); ++i) {
    x = g.conv2d(x, param(conv_name(i, "weight")), param(conv_name(i, "bias")), a.conv[i].padding);
    x = g.relu(x);
    for (std::size_t p = 0; p < a.conv[i].pool_steps; ++p) x = g.maxpool2x2(x);
  }
  x = g.flatten(x);
  const auto widths = dense_widths(a);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    x = g.dense(x, param(dense_name(i, "weight")), param(dense_name(i, "bias")));
    if (i + 1 < widths.size()) x = g.relu(x);
  }
  g.name_node(x, "logits");
  return x;
}

int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

// ---------------------------------------------------------------------------
// Inference

Classifier::Classifier(const ModelCheckpoint& model, std::size_t chunk)
    : model_(model), chunk_(std::max<std::size_t>(chunk, 1)) {
  model_.arch.validate();
}

Classifier::Slot& Classifier::slot(std::size_t batch) {
  auto it = slots_.find(batch);
  if (it != slots_.end()) return it->second;
  Slot& s = slots_[batch];
  const auto& a = model_.arch;
  s.input = s.graph.input("images", {batch, a.channels, a.height, a.width});
  s.probs = s.graph.softmax(build_classifier(s.graph, model_, s.input, false));
  return s;
}

Tensor Classifier::predict(const Tensor& images) {
  const auto& a = model_.arch;
  if (images.rank() != 4 || images.dim(1) != a.channels || images.dim(2) != a.height ||
      images.dim(3) != a.width) {
    throw Error("shape", "predict expects [N," + std::to_string(a.channels) + "," +
                             std::to_string(a.height) + "," + std::to_string(a.width) +
                             "] images, got " + shape_string(images.shape()));
  }
  const std::size_t n = images.dim(0), stride = a.channels * a.height * a.width;
  const std::size_t C = a.num_classes;
  Tensor out({n, C});
  for (std::size_t start = 0; start < n; start += chunk_) {
    const std::size_t b = std::min(chunk_, n - start);
    Slot& s = slot(b);
    Tensor chunk({b, a.channels, a.height, a.width});
    std::copy(images.raw() + start * stride, images.raw() + (start + b) * stride, chunk.raw());
    s.graph.set_input(s.input, std::move(chunk));
    s.graph.forward();
    const Tensor& p = s.graph.value(s.probs);
    std::copy(p.raw(), p.raw() + b * C, out.raw() + start * C);
  }
  return out;
}

std::vector<int> Classifier::predict_classes(const Tensor& images) {
  const Tensor p = predict(images);
  const std::size_t C = num_classes();
  std::vector<int> out(images.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(p.data().subspan(i * C, C));
  return out;
}

double Classifier::accuracy(const LabeledImageSet& set) {
  if (set.empty()) throw Error("empty", "accuracy on an empty set");
  const auto pred = predict_classes(set.all_images());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == set.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

Tensor predict(const ModelCheckpoint& model, const Tensor& images) {
  return Classifier(model).predict(images);
}

// ---------------------------------------------------------------------------
// Training

namespace {

void check_compatible(const ArchitectureConfig& a, const LabeledImageSet& set, const char* what) {
  if (set.height != a.height || set.width != a.width) {
    throw Error("shape", std::string(what) + " images are " + std::to_string(set.height) + "x" +
                             std::to_string(set.width) + ", model expects " +
                             std::to_string(a.height) + "x" + std::to_string(a.width));
  }
  if (set.num_classes != a.num_classes) {
    throw Error("label", std::string(what) + " has " + std::to_string(set.num_classes) +
                             " classes, model has " + std::to_string(a.num_classes));
  }
  set.validate();
}

}  // namespace

TrainResult train(const ModelCheckpoint& model, const LabeledImageSet& train_set,
                  const LabeledImageSet& val_set, const TrainConfig& config) {
  if (train_set.empty()) throw Error("empty", "training set is empty");
  const ArchitectureConfig& a = model.arch;
  check_compatible(a, train_set, "training set");
  if (!val_set.empty()) check_compatible(a, val_set, "validation set");
  if (config.batch == 0) throw Error("config", "batch size must be positive");

  TrainResult result;
  result.model = model;
  result.model.meta.epochs = config.epochs;
  result.model.meta.dataset_hash = train_set.content_hash();
  if (config.epochs == 0) return result;

  const std::size_t n = train_set.size();
  const std::size_t batch = std::min(config.batch, n);
  const std::size_t C = a.num_classes;

  ad::Graph<float> g;
  auto images = g.input("images", {batch, a.channels, a.height, a.width});
  auto targets = g.input("targets", {batch, C});
  auto logits = build_classifier(g, model, images, true);
  auto loss = g.softmax_cross_entropy(logits, targets);
  const auto param_ids = g.trainable_parameters();

  ad::AdamState<float> adam;
  adam.config.lr = config.lr;
  std::vector<Tensor*> param_ptrs;
  std::vector<const Tensor*> grad_ptrs;
  for (auto id : param_ids) {
    param_ptrs.push_back(&g.parameter_value(id));
    grad_ptrs.push_back(&g.gradient(id));
  }

  auto snapshot = [&] {
    ModelCheckpoint m = result.model;
    for (auto id : param_ids) m.params[g.node(id).name] = g.value(id);
    return m;
  };

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Tensor target_batch({batch, C});
  double best_val = -1.0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, steps = 0;
    for (std::size_t start = 0; start + batch <= n; start += batch) {
      std::span<const std::size_t> idx(order.data() + start, batch);
      g.set_input(images, train_set.batch(idx));
      target_batch.fill(0.0f);
      for (std::size_t b = 0; b < batch; ++b) target_batch[b * C + train_set.labels[idx[b]]] = 1.0f;
      g.set_input(targets, target_batch);
      g.forward();
      g.backward(loss);
      // Gradient buffers are (re)allocated in backward(); refresh pointers.
      for (std::size_t k = 0; k < param_ids.size(); ++k) {
        param_ptrs[k] = &g.parameter_value(param_ids[k]);
        grad_ptrs[k] = &g.gradient(param_ids[k]);
      }
      if (config.weight_decay > 0.0) {
        const float keep = static_cast<float>(1.0 - config.lr * config.weight_decay);
        for (Tensor* p : param_ptrs) {
          for (float& v : p->data()) v *= keep;
        }
      }
      ad::adam_step<float>(param_ptrs, grad_ptrs, adam);

      loss_sum += g.value(loss).item();
      const Tensor& z = g.value(logits);
      for (std::size_t b = 0; b < batch; ++b) {
        correct += argmax(z.data().subspan(b * C, C)) == train_set.labels[idx[b]];
      }
      seen += batch;
      ++steps;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(steps);
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    ModelCheckpoint current = snapshot();
    stats.val_accuracy = val_set.empty() ? stats.train_accuracy : Classifier(current).accuracy(val_set);
    result.trace.push_back(stats);
    if (stats.val_accuracy >= best_val || val_set.empty()) {
      best_val = stats.val_accuracy;
      result.best_epoch = epoch;
      result.model = std::move(current);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint files

io::Bytes encode_checkpoint(const ModelCheckpoint& model) {
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : model.params) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", t.size() * 4}});
    offset += t.size() * 4;
  }
  nlohmann::json header{{"arch", to_json(model.arch)},
                        {"metadata",
                         {{"seed", model.meta.seed},
                          {"epochs", model.meta.epochs},
                          {"dataset_hash", model.meta.dataset_hash},
                          {"is_trojan", model.meta.is_trojan}}},
                        {"tensors", index}};
  const std::string text = header.dump();
  io::Bytes out;
  out.reserve(10 + text.size() + offset);
  for (char c : {'S', 'T', 'S', 'M'}) out.push_back(static_cast<std::uint8_t>(c));
  io::put_le<std::uint16_t>(out, kCheckpointVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : model.params)
    for (float v : t.data()) io::put_le(out, v);
  return out;
}

ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "checkpoint");
  auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), "STSM")) throw Error("magic", "checkpoint: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw Error("format", "checkpoint: unsupported version " + std::to_string(version));
  }
  const auto header_len = r.get<std::uint32_t>();
  auto text = r.take(header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("checkpoint: bad header: ") + e.what());
  }
  ModelCheckpoint m;
  m.arch = architecture_from_json(header.at("arch"));
  const auto& meta = header.at("metadata");
  m.meta.seed = meta.at("seed").get<std::uint64_t>();
  m.meta.epochs = meta.at("epochs").get<std::size_t>();
  m.meta.dataset_hash = meta.at("dataset_hash").get<std::string>();
  m.meta.is_trojan = meta.at("is_trojan").get<bool>();
  const std::size_t payload = r.position();
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto length = entry.at("length").get<std::size_t>();
    if (length != shape_size(shape) * 4) throw Error("format", "checkpoint: tensor length mismatch");
    if (payload + offset + length > bytes.size()) throw Error("truncated", "checkpoint: payload truncated");
    io::Reader tr(bytes.subspan(payload + offset, length), "checkpoint tensor");
    Tensor t(shape);
    for (float& v : t.data()) v = tr.get<float>();
    m.params[entry.at("name").get<std::string>()] = std::move(t);
  }
  // Shapes must agree with the architecture.
  const ModelCheckpoint reference = build_model(m.arch, 0);
  for (const auto& [name, t] : reference.params) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw Error("checkpoint", "missing parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw Error("checkpoint", "parameter " + name + " has shape " +
                                   shape_string(it->second.shape()) + ", architecture needs " +
                                   shape_string(t.shape()));
    }
  }
  return m;
}

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(model));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace sts
