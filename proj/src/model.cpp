// SPDX-License-Identifier: Apache-2.0
#include "msdetr/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json_util.hpp"

namespace msdetr {

using nn::Graph;
using nn::Matrix;
using nn::Real;
using nn::Var;

DecoderVariant DecoderVariant::from_letter(char letter) {
  switch (letter) {
    case 'a': return {LayerOrder::kSaCaFfn, TapPoint::kLayerOutput};
    case 'b': return {LayerOrder::kCaSaFfn, TapPoint::kLayerOutput};
    case 'c': return {LayerOrder::kCaSaFfn, TapPoint::kInternal};
    case 'd': return {LayerOrder::kSaCaFfn, TapPoint::kInternal};
    default: throw std::invalid_argument(std::string("unknown decoder variant '") + letter + "'");
  }
}

char DecoderVariant::letter() const {
  if (order == LayerOrder::kSaCaFfn) return tap == TapPoint::kLayerOutput ? 'a' : 'd';
  return tap == TapPoint::kLayerOutput ? 'b' : 'c';
}

void ModelConfig::validate() const {
  if (image_height % 8 != 0 || image_width % 8 != 0 || image_height <= 0 || image_width <= 0) {
    throw std::invalid_argument("image size must be a positive multiple of 8");
  }
  if (num_queries < 1 || num_classes < 1) {
    throw std::invalid_argument("num_queries and num_classes must be positive");
  }
  if (embed_dim < 4 || embed_dim % 4 != 0) {
    throw std::invalid_argument("embed_dim must be a positive multiple of 4");
  }
  if (num_heads < 1 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("embed_dim must be divisible by num_heads");
  }
  if (ffn_dim < 1 || num_encoder_layers < 0 || num_decoder_layers < 1) {
    throw std::invalid_argument("invalid layer sizes");
  }
}

void to_json(nlohmann::json& j, const DecoderVariant& v) {
  j = {{"order", v.order == LayerOrder::kSaCaFfn ? "SA_CA_FFN" : "CA_SA_FFN"},
       {"tap", v.tap == TapPoint::kLayerOutput ? "layer_output" : "internal"}};
}

void from_json(const nlohmann::json& j, DecoderVariant& v) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s.size() != 1) throw std::invalid_argument("variant letter must be one of a, b, c, d");
    v = DecoderVariant::from_letter(s[0]);
    return;
  }
  detail::check_keys(j, {"order", "tap"}, "model.variant");
  if (j.contains("order")) {
    const auto s = j.at("order").get<std::string>();
    if (s == "SA_CA_FFN") {
      v.order = LayerOrder::kSaCaFfn;
    } else if (s == "CA_SA_FFN") {
      v.order = LayerOrder::kCaSaFfn;
    } else {
      throw std::invalid_argument("model.variant.order must be SA_CA_FFN or CA_SA_FFN");
    }
  }
  if (j.contains("tap")) {
    const auto s = j.at("tap").get<std::string>();
    if (s == "layer_output") {
      v.tap = TapPoint::kLayerOutput;
    } else if (s == "internal") {
      v.tap = TapPoint::kInternal;
    } else {
      throw std::invalid_argument("model.variant.tap must be layer_output or internal");
    }
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_height", c.image_height},
       {"image_width", c.image_width},
       {"num_queries", c.num_queries},
       {"num_classes", c.num_classes},
       {"embed_dim", c.embed_dim},
       {"num_heads", c.num_heads},
       {"ffn_dim", c.ffn_dim},
       {"num_encoder_layers", c.num_encoder_layers},
       {"num_decoder_layers", c.num_decoder_layers},
       {"share_box_head", c.share_box_head},
       {"share_cls_head", c.share_cls_head},
       {"variant", c.variant}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::check_keys(j,
                     {"image_height", "image_width", "num_queries", "num_classes", "embed_dim",
                      "num_heads", "ffn_dim", "num_encoder_layers", "num_decoder_layers",
                      "share_box_head", "share_cls_head", "variant"},
                     "model");
  detail::read_if(j, "image_height", c.image_height);
  detail::read_if(j, "image_width", c.image_width);
  detail::read_if(j, "num_queries", c.num_queries);
  detail::read_if(j, "num_classes", c.num_classes);
  detail::read_if(j, "embed_dim", c.embed_dim);
  detail::read_if(j, "num_heads", c.num_heads);
  detail::read_if(j, "ffn_dim", c.ffn_dim);
  detail::read_if(j, "num_encoder_layers", c.num_encoder_layers);
  detail::read_if(j, "num_decoder_layers", c.num_decoder_layers);
  detail::read_if(j, "share_box_head", c.share_box_head);
  detail::read_if(j, "share_cls_head", c.share_cls_head);
  if (j.contains("variant")) c.variant = j.at("variant").get<DecoderVariant>();
  c.validate();
}

namespace {

constexpr int kBackboneChannels[] = {16, 32, 64};

// Fixed 2-D sine embedding; first half of the columns encodes y, second x.
Matrix sine_position_encoding(int rows, int cols, int dim) {
  Matrix pos(static_cast<Eigen::Index>(rows) * cols, dim);
  const int quarter = dim / 4;
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      const auto r = static_cast<Eigen::Index>(y) * cols + x;
      const double ny = (y + 0.5) / rows * 2.0 * std::numbers::pi;
      const double nx = (x + 0.5) / cols * 2.0 * std::numbers::pi;
      for (int k = 0; k < quarter; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / quarter);
        pos(r, 2 * k) = static_cast<Real>(std::sin(ny * freq * 8.0));
        pos(r, 2 * k + 1) = static_cast<Real>(std::cos(ny * freq * 8.0));
        pos(r, dim / 2 + 2 * k) = static_cast<Real>(std::sin(nx * freq * 8.0));
        pos(r, dim / 2 + 2 * k + 1) = static_cast<Real>(std::cos(nx * freq * 8.0));
      }
    }
  }
  return pos;
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  nn::Rng rng(seed);
  const int d = cfg_.embed_dim;
  int in = 3;
  for (std::size_t i = 0; i < std::size(kBackboneChannels); ++i) {
    backbone_.emplace_back("backbone." + std::to_string(i), in, kBackboneChannels[i], 3, 2, 1,
                           rng);
    in = kBackboneChannels[i];
  }
  backbone_.emplace_back("backbone.proj", in, d, 1, 1, 0, rng);

  query_embed_ = nn::Parameter("query_embed", nn::truncated_normal(cfg_.num_queries, d, 1.0, rng));

  for (int l = 0; l < cfg_.num_encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    encoder_.push_back({nn::MultiHeadAttention(p + ".self_attn", d, cfg_.num_heads, rng),
                        nn::LayerNorm(p + ".norm", d),
                        nn::FeedForward(p + ".ffn", d, cfg_.ffn_dim, rng)});
  }
  decoder_.reserve(static_cast<std::size_t>(cfg_.num_decoder_layers));
  for (int l = 0; l < cfg_.num_decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer layer{nn::MultiHeadAttention(p + ".self_attn", d, cfg_.num_heads, rng),
                       nn::MultiHeadAttention(p + ".cross_attn", d, cfg_.num_heads, rng),
                       nn::LayerNorm(p + ".norm_sa", d),
                       nn::LayerNorm(p + ".norm_ca", d),
                       nn::FeedForward(p + ".ffn", d, cfg_.ffn_dim, rng),
                       nn::ClassHead(p + ".o2o_cls", d, cfg_.num_classes, rng),
                       nn::BoxHead(p + ".o2o_box", d, rng),
                       std::nullopt,
                       std::nullopt,
                       std::nullopt};
    if (cfg_.variant.tap == TapPoint::kInternal) {
      layer.tap_ffn.emplace(p + ".tap_ffn", d, cfg_.ffn_dim, rng);
    }
    if (!cfg_.share_cls_head) layer.o2m_cls.emplace(p + ".o2m_cls", d, cfg_.num_classes, rng);
    if (!cfg_.share_box_head) layer.o2m_box.emplace(p + ".o2m_box", d, rng);
    decoder_.push_back(std::move(layer));
  }
  pos_ = sine_position_encoding(cfg_.image_height / 8, cfg_.image_width / 8, d);
}

int Model::sequence_length() const { return (cfg_.image_height / 8) * (cfg_.image_width / 8); }

nn::ParamList Model::parameters() {
  nn::ParamList out;
  for (auto& c : backbone_) c.collect(out);
  out.push_back(&query_embed_);
  for (auto& e : encoder_) {
    e.self_attn.collect(out);
    e.norm.collect(out);
    e.ffn.collect(out);
  }
  for (auto& l : decoder_) {
    l.self_attn.collect(out);
    l.cross_attn.collect(out);
    l.norm_sa.collect(out);
    l.norm_ca.collect(out);
    l.ffn.collect(out);
    l.o2o_cls.collect(out);
    l.o2o_box.collect(out);
    if (l.tap_ffn) l.tap_ffn->collect(out);
    if (l.o2m_cls) l.o2m_cls->collect(out);
    if (l.o2m_box) l.o2m_box->collect(out);
  }
  return out;
}

nn::ParamList Model::o2m_only_parameters() {
  nn::ParamList out;
  for (auto& l : decoder_) {
    if (l.tap_ffn) l.tap_ffn->collect(out);
    if (l.o2m_cls) l.o2m_cls->collect(out);
    if (l.o2m_box) l.o2m_box->collect(out);
  }
  return out;
}

bool Model::has_o2m_branch() const {
  for (const auto& l : decoder_) {
    const bool tap_ok = cfg_.variant.tap == TapPoint::kLayerOutput || l.tap_ffn.has_value();
    const bool cls_ok = cfg_.share_cls_head || l.o2m_cls.has_value();
    const bool box_ok = cfg_.share_box_head || l.o2m_box.has_value();
    if (!(tap_ok && cls_ok && box_ok)) return false;
  }
  return true;
}

void Model::strip_o2m_branch() {
  for (auto& l : decoder_) {
    l.tap_ffn.reset();
    l.o2m_cls.reset();
    l.o2m_box.reset();
  }
}

Var Model::image_input(Graph& g, const Image& image) const {
  if (image.height != cfg_.image_height || image.width != cfg_.image_width ||
      image.rgb.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw std::invalid_argument("image is " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + ", model expects " +
                                std::to_string(cfg_.image_height) + "x" +
                                std::to_string(cfg_.image_width));
  }
  Matrix m(static_cast<Eigen::Index>(image.height) * image.width, 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<Real>(image.rgb[static_cast<std::size_t>(i)]) / Real(255) - Real(0.5);
  }
  return g.input(std::move(m));
}

Encoded Model::encode(Graph& g, Var image) {
  int h = cfg_.image_height;
  int w = cfg_.image_width;
  if (g.value(image).rows() != static_cast<Eigen::Index>(h) * w || g.value(image).cols() != 3) {
    throw std::invalid_argument("encode: image tensor does not match the configured size");
  }
  Var x = image;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    nn::Conv2d& conv = backbone_[i];
    x = conv(g, x, h, w);
    h = conv.out_size(h);
    w = conv.out_size(w);
    if (i + 1 < backbone_.size()) x = g.relu(x);
  }
  const Var pos = g.input(pos_);
  for (auto& layer : encoder_) {
    const Var qk = g.add(x, pos);
    x = layer.norm(g, g.add(x, layer.self_attn(g, qk, qk, x)));
    x = layer.ffn(g, x);
  }
  return {x, pos};
}

std::vector<LayerVars> Model::decode(Graph& g, const Encoded& enc, bool with_o2m) {
  if (with_o2m && !has_o2m_branch()) {
    throw std::logic_error("decode: one-to-many branch was stripped from this model");
  }
  const Var query_pos = g.param(query_embed_);
  const Var memory_key = g.add(enc.memory, enc.memory_pos);
  Var x = query_pos;
  std::vector<LayerVars> out;
  out.reserve(decoder_.size());
  for (auto& layer : decoder_) {
    auto self_attention = [&](Var in) {
      const Var qk = g.add(in, query_pos);
      return layer.norm_sa(g, g.add(in, layer.self_attn(g, qk, qk, in)));
    };
    auto cross_attention = [&](Var in) {
      const Var q = g.add(in, query_pos);
      return layer.norm_ca(g, g.add(in, layer.cross_attn(g, q, memory_key, enc.memory)));
    };
    Var first;
    if (cfg_.variant.order == LayerOrder::kSaCaFfn) {
      first = self_attention(x);
      x = cross_attention(first);
    } else {
      first = cross_attention(x);
      x = self_attention(first);
    }
    x = layer.ffn(g, x);

    LayerVars v;
    v.o2o_logits = layer.o2o_cls(g, x);
    v.o2o_boxes = layer.o2o_box(g, x);
    if (with_o2m) {
      const bool internal = cfg_.variant.tap == TapPoint::kInternal;
      const Var tap = internal ? (*layer.tap_ffn)(g, first) : x;
      if (layer.o2m_cls) {
        v.o2m_logits = (*layer.o2m_cls)(g, tap);
      } else {
        v.o2m_logits = internal ? layer.o2o_cls(g, tap) : v.o2o_logits;
      }
      if (layer.o2m_box) {
        v.o2m_boxes = (*layer.o2m_box)(g, tap);
      } else {
        v.o2m_boxes = internal ? layer.o2o_box(g, tap) : v.o2o_boxes;
      }
    }
    out.push_back(v);
  }
  return out;
}

namespace {

PredictionBlock read_block(const Graph& g, Var logits, Var boxes) {
  PredictionBlock b;
  b.logits = g.value(logits).cast<double>();
  const Matrix& bx = g.value(boxes);
  b.boxes.reserve(static_cast<std::size_t>(bx.rows()));
  for (Eigen::Index q = 0; q < bx.rows(); ++q) {
    b.boxes.push_back({bx(q, 0), bx(q, 1), bx(q, 2), bx(q, 3)});
  }
  return b;
}

}  // namespace

LayerPredictions collect_predictions(const Graph& g, std::span<const LayerVars> layers) {
  LayerPredictions out;
  out.layers.reserve(layers.size());
  for (const auto& v : layers) {
    LayerPrediction lp;
    lp.o2o = read_block(g, v.o2o_logits, v.o2o_boxes);
    if (v.o2m_logits.valid()) lp.o2m = read_block(g, v.o2m_logits, v.o2m_boxes);
    out.layers.push_back(std::move(lp));
  }
  return out;
}

void seed_gradients(Graph& g, std::span<const LayerVars> layers,
                    std::span<const LayerGrad> grads) {
  if (layers.size() != grads.size()) throw std::invalid_argument("seed_gradients: layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerVars& v = layers[l];
    const LayerGrad& d = grads[l];
    if (d.o2o.logits.size()) g.grad(v.o2o_logits) += d.o2o.logits.cast<Real>();
    if (d.o2o.boxes.size()) g.grad(v.o2o_boxes) += d.o2o.boxes.cast<Real>();
    if (v.o2m_logits.valid() && d.o2m.logits.size()) {
      g.grad(v.o2m_logits) += d.o2m.logits.cast<Real>();
    }
    if (v.o2m_boxes.valid() && d.o2m.boxes.size()) {
      g.grad(v.o2m_boxes) += d.o2m.boxes.cast<Real>();
    }
  }
}

LayerPredictions Model::forward(const Image& image) {
  Graph g;
  const Encoded enc = encode(g, image_input(g, image));
  const auto layers = decode(g, enc, true);
  return collect_predictions(g, layers);
}

Detections Model::predict(const Image& image) {
  Graph g;
  const Encoded enc = encode(g, image_input(g, image));
  const auto layers = decode(g, enc, false);
  const PredictionBlock last = read_block(g, layers.back().o2o_logits, layers.back().o2o_boxes);
  return {last.probabilities(), last.boxes};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'S', 'D', 'T', 'C', 'K', 'P', '1'};

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& f, const std::string& what) {
  T v{};
  if (!f.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("checkpoint truncated while reading " + what);
  }
  return v;
}

}  // namespace

void save_checkpoint(Model& model, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(kMagic, sizeof kMagic);
  const std::string config = nlohmann::json(model.config()).dump();
  put<std::uint64_t>(f, config.size());
  f.write(config.data(), static_cast<std::streamsize>(config.size()));
  const auto params = model.parameters();
  put<std::uint64_t>(f, params.size());
  for (const nn::Parameter* p : params) {
    put<std::uint32_t>(f, static_cast<std::uint32_t>(p->name.size()));
    f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(p->value.rows()));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(p->value.cols()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      put<float>(f, static_cast<float>(p->value.data()[i]));
    }
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!f.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  const auto config_size = get<std::uint64_t>(f, "config size");
  if (config_size > (1u << 20)) throw std::runtime_error("checkpoint config block too large");
  std::string config_text(config_size, '\0');
  if (!f.read(config_text.data(), static_cast<std::streamsize>(config_size))) {
    throw std::runtime_error("checkpoint truncated in config block");
  }
  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(config_text).get<ModelConfig>();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("checkpoint config: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw std::runtime_error("checkpoint model config differs from the expected config: " +
                             config_text);
  }
  Model model(cfg, 0);
  auto params = model.parameters();
  const auto count = get<std::uint64_t>(f, "parameter count");
  if (count != params.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(count) + " tensors, model has " +
                             std::to_string(params.size()));
  }
  for (nn::Parameter* p : params) {
    const auto name_size = get<std::uint32_t>(f, "tensor name size");
    std::string name(name_size, '\0');
    if (name_size > 4096 || !f.read(name.data(), name_size)) {
      throw std::runtime_error("checkpoint truncated in tensor name");
    }
    if (name != p->name) {
      throw std::runtime_error("checkpoint tensor '" + name + "' where '" + p->name +
                               "' was expected");
    }
    const auto rows = get<std::uint32_t>(f, name + " rows");
    const auto cols = get<std::uint32_t>(f, name + " cols");
    if (rows != p->value.rows() || cols != p->value.cols()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has the wrong shape");
    }
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      p->value.data()[i] = static_cast<Real>(get<float>(f, name));
    }
  }
  return model;
}

}  // namespace msdetr
