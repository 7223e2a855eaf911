#pragma once

// Multiscale video transformer: cube embedding followed by stages of
// pooling-attention blocks. The first block of each stage pools queries
// (and the residual) to shrink the grid and widens the channels; keys and
// values may be pooled in every block.

#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tapir/nn/ops.hpp"
#include "tapir/nn/params.hpp"

namespace tapir {

using nn::Grid3;
using nn::Tensor;

struct StageConfig {
  int blocks = 2;
  int heads = 2;
  Grid3 q_stride{1, 1, 1};   // applied by the first block of the stage
  Grid3 kv_stride{1, 1, 1};  // applied by every block of the stage
  double channel_mult = 1.0;  // output channels of the stage = input * mult
};

struct EncoderConfig {
  int clip_length = 16;
  int image_height = 64;
  int image_width = 64;
  Grid3 patch{2, 4, 4};
  int embed_dim = 32;
  std::vector<StageConfig> stages;
  int mlp_ratio = 4;
  double dropout = 0.0;
  bool learnable_pooling = false;  // weighted instead of plain average pooling

  // Two stages of two blocks, heads 2/4, channels doubled and the spatial
  // grid halved at the stage boundary.
  static EncoderConfig toy();

  Grid3 embed_grid() const;
  // Grid and channel count after every stage.
  std::vector<Grid3> stage_grids() const;
  std::vector<int64_t> stage_dims() const;
  int64_t output_dim() const { return stage_dims().back(); }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Tokens [B, 1 + grid.volume(), C]: the class token first, then the grid in
// (t, h, w) raster order.
struct TokenGrid {
  Tensor tokens;
  Grid3 grid;

  int64_t batch() const { return tokens.dim(0); }
  int64_t channels() const { return tokens.dim(2); }
  Tensor class_token() const;  // [B, C]
  Tensor grid_tokens() const;  // [B, N, C]
};

struct BlockParams {
  int64_t dim_in = 0, dim_out = 0;
  int heads = 1;
  Grid3 q_stride{1, 1, 1}, kv_stride{1, 1, 1};
  nn::LayerNorm norm1, norm2;
  nn::Linear q, k, v, proj, fc1, fc2;
  nn::Linear residual;  // present only when dim_in != dim_out
  Tensor pool_q, pool_k, pool_v;  // learnable pooling weights, else undefined
};

BlockParams make_block(nn::ParamStore& ps, const std::string& name, int64_t dim_in, int64_t dim_out, int heads,
                       Grid3 q_stride, Grid3 kv_stride, int mlp_ratio, bool learnable_pooling, std::mt19937_64& rng);

// One pooling-attention block (pre-norm attention and MLP, both residual).
// If probs_out is given it receives the attention probabilities
// [B, heads, Nq, Nk]. Throws std::invalid_argument when a stride exceeds
// the grid.
TokenGrid mhpa(const TokenGrid& in, const BlockParams& p, bool training = false, std::mt19937_64* rng = nullptr,
               double dropout = 0.0, std::vector<double>* probs_out = nullptr);

struct EncoderOutput {
  Tensor class_embedding;  // [B, C] after the final norm
  TokenGrid final_grid;    // normalised tokens of the last block
};

class VideoEncoder {
 public:
  VideoEncoder(const EncoderConfig& config, nn::ParamStore& params, const std::string& prefix, std::mt19937_64& rng);

  // clip [B, T, H, W, 3] -> class token + grid after the positional terms.
  TokenGrid embed_clip(const Tensor& clip) const;
  EncoderOutput encode(const Tensor& clip, bool training = false, std::mt19937_64* rng = nullptr) const;

  const EncoderConfig& config() const { return config_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  const std::string& prefix() const { return prefix_; }

 private:
  EncoderConfig config_;
  std::string prefix_;
  nn::Linear patch_embed_;
  Tensor pos_embed_, cls_token_;
  std::vector<BlockParams> blocks_;
  nn::LayerNorm final_norm_;
};

}  // namespace tapir
