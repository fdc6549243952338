// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "msdetr/nn/graph.hpp"
#include "msdetr/nn/layers.hpp"
#include "msdetr/supervision.hpp"
#include "msdetr/synthdata.hpp"

namespace msdetr {

enum class LayerOrder { kSaCaFfn, kCaSaFfn };

/// Where the one-to-many heads read the queries of each decoder layer.
enum class TapPoint {
  kLayerOutput,  // after the layer's FFN, same queries as the one-to-one heads
  kInternal,     // after the first attention block, through a dedicated FFN
};

/// The four supervision placements:
///   a = SA->CA->FFN, layer output     b = CA->SA->FFN, layer output
///   c = CA->SA->FFN, internal (CA)    d = SA->CA->FFN, internal (SA)
struct DecoderVariant {
  LayerOrder order = LayerOrder::kCaSaFfn;
  TapPoint tap = TapPoint::kInternal;

  static DecoderVariant from_letter(char letter);
  char letter() const;
  friend bool operator==(const DecoderVariant&, const DecoderVariant&) = default;
};

struct ModelConfig {
  int image_height = 64;
  int image_width = 64;
  int num_queries = 30;
  int num_classes = 3;
  int embed_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int num_encoder_layers = 1;
  int num_decoder_layers = 3;
  bool share_box_head = true;
  bool share_cls_head = true;
  DecoderVariant variant;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const DecoderVariant& v);
void from_json(const nlohmann::json& j, DecoderVariant& v);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Graph handles of one decoder layer's four prediction blocks. With shared
/// heads and the layer-output tap the o2m handles alias the o2o ones.
struct LayerVars {
  nn::Var o2o_logits, o2o_boxes;
  nn::Var o2m_logits, o2m_boxes;  // invalid when decoded without o2m heads
};

struct Encoded {
  nn::Var memory;      // S x D
  nn::Var memory_pos;  // S x D constant
};

/// Final-layer one-to-one outputs.
struct Detections {
  Eigen::MatrixXd scores;  // Q x C probabilities
  std::vector<Box> boxes;  // Q
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  int sequence_length() const;

  nn::ParamList parameters();
  /// Parameters that only the one-to-many branch uses: unshared heads and the
  /// internal-tap FFNs.
  nn::ParamList o2m_only_parameters();
  bool has_o2m_branch() const;
  /// Drops every o2m-only parameter; the model can still run predict().
  void strip_o2m_branch();

  nn::Var image_input(nn::Graph& g, const Image& image) const;
  Encoded encode(nn::Graph& g, nn::Var image);
  std::vector<LayerVars> decode(nn::Graph& g, const Encoded& enc, bool with_o2m);

  /// Full training-time forward pass, values only.
  LayerPredictions forward(const Image& image);
  Detections predict(const Image& image);

 private:
  struct DecoderLayer {
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::LayerNorm norm_sa, norm_ca;
    nn::FeedForward ffn;
    nn::ClassHead o2o_cls;
    nn::BoxHead o2o_box;
    std::optional<nn::FeedForward> tap_ffn;
    std::optional<nn::ClassHead> o2m_cls;
    std::optional<nn::BoxHead> o2m_box;
  };
  struct EncoderLayer {
    nn::MultiHeadAttention self_attn;
    nn::LayerNorm norm;
    nn::FeedForward ffn;
  };

  ModelConfig cfg_;
  std::vector<nn::Conv2d> backbone_;
  nn::Parameter query_embed_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  nn::Matrix pos_;
};

/// Copies graph values of each layer into double-precision predictions.
LayerPredictions collect_predictions(const nn::Graph& g, std::span<const LayerVars> layers);

/// Adds loss gradients to the graph's output nodes before Graph::backward().
void seed_gradients(nn::Graph& g, std::span<const LayerVars> layers,
                    std::span<const LayerGrad> grads);

/// Binary checkpoint: magic, embedded ModelConfig JSON, named float32 tensors.
void save_checkpoint(Model& model, const std::filesystem::path& path);
/// Throws std::runtime_error on a malformed file, or if `expected` is given
/// and differs from the embedded config.
Model load_checkpoint(const std::filesystem::path& path,
                      const ModelConfig* expected = nullptr);

}  // namespace msdetr
