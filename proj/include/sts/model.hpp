#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sts/dataset.hpp"
#include "sts/graph.hpp"
#include "sts/tensor.hpp"

namespace sts {

struct ConvLayerSpec {
  std::size_t out_channels = 32;
  std::size_t kernel_size = 3;
  std::size_t padding = 1;     // zeros on each side
  std::size_t pool_steps = 1;  // successive 2x2 max-pools after the relu
};

/// conv(k x k, zero padded) -> relu -> `pool_steps` 2x2 max-pools for every
/// conv layer (ceil mode, so five steps on 19x19 pool globally), then
/// dense -> relu for every hidden width, then a final dense layer to
/// `num_classes` logits. Softmax is applied on top for probabilities.
struct ArchitectureConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::vector<ConvLayerSpec> conv = {{32, 3, 2, 1}, {64, 3, 2, 5}};
  std::vector<std::size_t> hidden = {256};
  std::size_t num_classes = 10;

  void validate() const;
  /// Length of the feature vector entering the first dense layer.
  std::size_t flattened_size() const;
};

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::string dataset_hash;
  // Ground-truth bookkeeping only; detection code never reads it.
  bool is_trojan = false;
};

struct ModelCheckpoint {
  ArchitectureConfig arch;
  std::map<std::string, Tensor> params;
  TrainingMetadata meta;

  std::size_t parameter_count() const;
};

nlohmann::json to_json(const ArchitectureConfig& arch);
ArchitectureConfig architecture_from_json(const nlohmann::json& j);

/// He-uniform weights, zero biases, reproducible from `seed`.
ModelCheckpoint build_model(const ArchitectureConfig& config, std::uint64_t seed);

/// Appends the classifier to `graph` reading images from `images`
/// ([B,3,H,W]); returns the logits node ([B,C]).
ad::NodeId build_classifier(ad::Graph<float>& graph, const ModelCheckpoint& model,
                            ad::NodeId images, bool trainable);

struct TrainConfig {
  double lr = 5e-3;
  std::size_t batch = 64;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;  // decoupled: p -= lr * wd * p before each Adam step
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  ModelCheckpoint model;  // best-validation checkpoint
  std::vector<EpochStats> trace;
  std::size_t best_epoch = 0;
};

/// Minimizes softmax cross-entropy with Adam over shuffled minibatches.
/// Incomplete trailing batches are dropped; the epoch reshuffle covers them.
TrainResult train(const ModelCheckpoint& model, const LabeledImageSet& train_set,
                  const LabeledImageSet& val_set, const TrainConfig& config);

/// Batched inference. Graph buffers are reused across calls with the same
/// batch size; not safe for concurrent use (create one per thread).
class Classifier {
 public:
  explicit Classifier(const ModelCheckpoint& model, std::size_t chunk = 256);

  /// [N,C] class probabilities for [N,3,H,W] images.
  Tensor predict(const Tensor& images);
  std::vector<int> predict_classes(const Tensor& images);
  double accuracy(const LabeledImageSet& set);
  std::size_t num_classes() const noexcept { return model_.arch.num_classes; }
  const ModelCheckpoint& model() const noexcept { return model_; }

 private:
  struct Slot {
    ad::Graph<float> graph;
    ad::NodeId input = 0;
    ad::NodeId probs = 0;
  };
  Slot& slot(std::size_t batch);

  ModelCheckpoint model_;
  std::size_t chunk_;
  std::map<std::size_t, Slot> slots_;
};

Tensor predict(const ModelCheckpoint& model, const Tensor& images);

/// argmax with ties broken toward the lowest index.
int argmax(std::span<const float> row);

// Checkpoint file: "STSM", u16 version, u32 header length, JSON header
// (arch, metadata, tensor index with byte offsets into the payload), then raw
// little-endian f32 payloads.
inline constexpr std::uint16_t kCheckpointVersion = 1;
io::Bytes encode_checkpoint(const ModelCheckpoint& model);
ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sts
