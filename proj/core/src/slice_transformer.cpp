#include "medvit/slice_transformer.hpp"

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {

void TransformerConfig::validate() const {
  if (d_emb < 1 || d_ff < 1 || heads < 1 || layers < 1) throw ConfigError("transformer dimensions must be positive");
  if (d_emb % heads != 0) throw ConfigError("d_emb must be divisible by the head count");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"d_emb", c.d_emb},
                     {"d_ff", c.d_ff},
                     {"heads", c.heads},
                     {"layers", c.layers},
                     {"shared", c.shared},
                     {"mode", c.mode == AttentionMode::multi_head ? "multi_head" : "projection_free"},
                     {"positional", c.positional},
                     {"ffn_bias", c.ffn_bias},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c.d_emb = j.value("d_emb", c.d_emb);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.shared = j.value("shared", c.shared);
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "multi_head") {
      c.mode = AttentionMode::multi_head;
    } else if (m == "projection_free") {
      c.mode = AttentionMode::projection_free;
    } else {
      throw ConfigError("unknown attention mode '" + m + "'");
    }
  }
  c.positional = j.value("positional", c.positional);
  c.ffn_bias = j.value("ffn_bias", c.ffn_bias);
  c.dropout = j.value("dropout", c.dropout);
}

torch::Tensor positional_encoding(std::int64_t n, std::int64_t d_emb, torch::TensorOptions options) {
  if (n < 1 || d_emb < 1) throw ConfigError("positional_encoding needs n >= 1 and d_emb >= 1");
  auto pe = torch::zeros({n, d_emb}, options.dtype(torch::kFloat64));
  auto acc = pe.accessor<double, 2>();
  for (std::int64_t pos = 0; pos < n; ++pos) {
    for (std::int64_t col = 0; col < d_emb; ++col) {
      const auto even = col - (col % 2);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(even) / static_cast<double>(d_emb));
      acc[pos][col] = (col % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe.to(options.dtype());
}

std::int64_t EncodingSequence::masked_count() const {
  return static_cast<std::int64_t>(std::count(masked.begin(), masked.end(), true));
}

SegmentEncodingImpl::SegmentEncodingImpl(std::int64_t d_emb, bool zero_init) {
  for (auto p : kPlanes) {
    auto init = zero_init ? torch::zeros({d_emb}) : torch::randn({d_emb}) * 0.02;
    vectors_[static_cast<std::size_t>(plane_index(p))] = register_parameter(std::string(plane_name(p)), init);
  }
}

AttentionBlockImpl::AttentionBlockImpl(const TransformerConfig& config) : config_(config) {
  const auto d = config_.d_emb;
  if (config_.mode == AttentionMode::multi_head) {
    query_ = register_module("query", torch::nn::Linear(d, d));
    key_ = register_module("key", torch::nn::Linear(d, d));
    value_ = register_module("value", torch::nn::Linear(d, d));
    out_ = register_module("out", torch::nn::Linear(d, d));
  }
  ff1_ = register_module("ff1", torch::nn::Linear(torch::nn::LinearOptions(d, config_.d_ff).bias(config_.ffn_bias)));
  ff2_ = register_module("ff2", torch::nn::Linear(torch::nn::LinearOptions(config_.d_ff, d).bias(config_.ffn_bias)));
  if (config_.dropout > 0.0) dropout_ = register_module("dropout", torch::nn::Dropout(config_.dropout));
}

torch::Tensor AttentionBlockImpl::attend(const torch::Tensor& e) {
  const auto n = e.size(0);
  const auto d = config_.d_emb;
  if (config_.mode == AttentionMode::projection_free) {
    auto weights = torch::softmax(torch::matmul(e, e.t()) / std::sqrt(static_cast<double>(d)), -1);
    last_attention_ = weights.detach().unsqueeze(0);
    return torch::matmul(weights, e);
  }
  const auto h = config_.heads;
  const auto dh = d / h;
  auto split = [&](const torch::Tensor& t) { return t.view({n, h, dh}).transpose(0, 1); };  // (h, N, dh)
  auto q = split(query_(e));
  auto k = split(key_(e));
  auto v = split(value_(e));
  auto weights = torch::softmax(torch::matmul(q, k.transpose(1, 2)) / std::sqrt(static_cast<double>(dh)), -1);
  last_attention_ = weights.detach();
  auto mixed = torch::matmul(weights, v).transpose(0, 1).reshape({n, d});
  return out_(mixed);
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& tokens) {
  if (tokens.dim() != 2 || tokens.size(1) != config_.d_emb) {
    throw ShapeError("attention block expects (N, " + std::to_string(config_.d_emb) + ") tokens");
  }
  auto attn = attend(tokens);
  if (dropout_) attn = dropout_(attn);
  auto bar = tokens + attn;
  auto ff = ff2_(torch::relu(ff1_(bar)));
  if (dropout_) ff = dropout_(ff);
  return bar + ff;
}

SliceTransformerImpl::SliceTransformerImpl(TransformerConfig config) : config_(std::move(config)) {
  config_.validate();
  auto make_stack = [&]() {
    torch::nn::ModuleList stack;
    for (std::int64_t l = 0; l < config_.layers; ++l) stack->push_back(AttentionBlock(config_));
    return stack;
  };
  if (config_.shared) {
    // Flat layout: transformer.<layer>.<name>.
    auto stack = make_stack();
    for (std::size_t l = 0; l < stack->size(); ++l) register_module(std::to_string(l), stack[l]);
    stacks_.push_back(stack);
  } else {
    for (auto p : kPlanes) stacks_.push_back(register_module(std::string(plane_name(p)), make_stack()));
  }
}

std::vector<AttentionBlock> SliceTransformerImpl::blocks(PlaneId plane) const {
  const auto& stack = config_.shared ? stacks_.front() : stacks_[static_cast<std::size_t>(plane_index(plane))];
  std::vector<AttentionBlock> out;
  for (const auto& m : *stack) out.emplace_back(std::dynamic_pointer_cast<AttentionBlockImpl>(m));
  return out;
}

torch::Tensor SliceTransformerImpl::forward(const torch::Tensor& tokens, PlaneId plane) {
  auto x = tokens;
  for (auto& block : blocks(plane)) x = block->forward(x);
  return x;
}

torch::Tensor encode(const EncodingSequence& sequence, SliceTransformer& transformer) {
  if (sequence.tokens.dim() != 2 || sequence.tokens.size(1) != transformer->config().d_emb) {
    throw ShapeError("sequence width does not match transformer d_emb");
  }
  auto out = transformer->forward(sequence.tokens, sequence.plane);
  if (!torch::isfinite(out).all().item<bool>()) {
    throw NumericError("non-finite values in transformer output for plane " + std::string(plane_name(sequence.plane)));
  }
  return out;
}

EncodingSequence apply_mask(const EncodingSequence& sequence, const std::vector<std::int64_t>& positions,
                            const torch::Tensor& mask_token) {
  const auto n = sequence.length();
  std::set<std::int64_t> seen;
  for (auto p : positions) {
    if (p < 0 || p >= n) throw ConfigError("mask position " + std::to_string(p) + " out of range");
    if (!seen.insert(p).second) throw ConfigError("duplicate mask position " + std::to_string(p));
  }
  EncodingSequence out = sequence;
  if (out.masked.size() != static_cast<std::size_t>(n)) out.masked.assign(static_cast<std::size_t>(n), false);
  if (positions.empty()) return out;
  auto flags = torch::zeros({n, 1}, torch::kBool);
  for (auto p : positions) {
    flags[p][0] = true;
    out.masked[static_cast<std::size_t>(p)] = true;
  }
  out.tokens = torch::where(flags, mask_token.to(sequence.tokens.dtype()).unsqueeze(0).expand_as(sequence.tokens),
                            sequence.tokens);
  return out;
}

torch::Tensor add_position_and_segment(const torch::Tensor& embeddings, PlaneId plane, const torch::Tensor& segment,
                                       bool positional) {
  auto out = embeddings + segment.unsqueeze(0);
  if (positional) {
    out = out + positional_encoding(embeddings.size(0), embeddings.size(1), embeddings.options());
  }
  return out;
}

}  // namespace medvit
