#include "infobfr/attention.hpp"

#include <cmath>

#include "infobfr/error.hpp"

namespace infobfr {

namespace {

// N x C x H x W -> N x HW x C
torch::Tensor tokens(const torch::Tensor& x) { return x.flatten(2).transpose(1, 2); }

}  // namespace

AttentionBlock AttentionBlock::create(int channels, uint64_t seed) {
  if (channels < 1) throw_invalid("attention channels must be positive");
  auto gen = make_generator(seed);
  AttentionBlock block;
  block.channels = channels;
  for (const char* name : {"attn.q", "attn.k", "attn.v"}) {
    add_conv(block.weights, name, channels, channels, 1, gen);
  }
  // Zero output projection: the block starts as the identity.
  add_zero_conv(block.weights, "attn.out", channels, channels, 1);
  return block;
}

torch::Tensor attention_matrix(const AttentionBlock& block, const TensorGrid& manifold) {
  if (manifold.channels() != block.channels) throw_invalid("attention channel mismatch");
  const auto& x = manifold.tensor();
  const auto q = tokens(conv2d(x, block.weights, "attn.q"));
  const auto k = tokens(conv2d(x, block.weights, "attn.k"));
  const auto logits = torch::bmm(q, k.transpose(1, 2)) / std::sqrt(block.scale_dim());
  return torch::softmax(logits, -1);
}

TensorGrid attend(const AttentionBlock& block, const TensorGrid& manifold) {
  const auto& x = manifold.tensor();
  const auto attn = attention_matrix(block, manifold);
  const auto v = tokens(conv2d(x, block.weights, "attn.v"));
  const auto mixed = torch::bmm(attn, v).transpose(1, 2).reshape(x.sizes());
  return TensorGrid(conv2d(mixed, block.weights, "attn.out") + x);
}

}  // namespace infobfr
