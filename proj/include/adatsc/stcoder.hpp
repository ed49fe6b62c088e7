#pragma once

#include <string>
#include <utility>
#include <vector>

#include "adatsc/ops.hpp"
#include "adatsc/params.hpp"

// Convolutional-recurrent U-Net: encoder, patch nodes, decoder, reconstruction loss.
// Tensors are (B, T, H, W, C) unless noted.
namespace adatsc::stcoder {

using ad::Var;

enum class EncoderVariant { ConvLstm, CnnThenLstm };

struct EncoderConfig {
  std::vector<int> filters{8, 16, 24, 32};  // F1..F4, strictly increasing
  int patch_h = 2;
  int patch_w = 2;
  int kernel = 3;
  EncoderVariant variant = EncoderVariant::ConvLstm;
  double forget_bias = 1.0;

  void validate() const;
  // Spatial multiple the input is padded up to.
  int pad_multiple_h() const { return 8 * patch_h; }
  int pad_multiple_w() const { return 8 * patch_w; }
};

template <typename T>
struct ConvLstm {
  Var<T> wx;    // (k, k, Cin, 4F), gates [input, forget, output, candidate]
  Var<T> wh;    // (k, k, F, 4F)
  Var<T> bias;  // (4F)
  int cin = 0;
  int features = 0;

  static ConvLstm create(ParamStore<T>& ps, const std::string& prefix, int cin, int features, int kernel,
                         double forget_bias, Rng& rng);
};

// One recurrent step. x (B,H,W,Cin), h and c (B,H,W,F); returns (h', c').
template <typename T>
std::pair<Var<T>, Var<T>> convlstm_step(const Var<T>& x, const Var<T>& h, const Var<T>& c, const ConvLstm<T>& p);

// Runs the cell over the time axis from a zero state; returns every hidden state.
template <typename T>
Var<T> convlstm_sequence(const Var<T>& x, const ConvLstm<T>& p);

template <typename T>
struct ResBlock {
  ConvLstm<T> first, second;
  Var<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Var<T> proj_w, proj_b;  // 1x1 channel projection, undefined when channels match

  static ResBlock create(ParamStore<T>& ps, const std::string& prefix, int cin, int features, int kernel,
                         double forget_bias, Rng& rng);
  Var<T> forward(const Var<T>& x) const;
};

// Per-frame conv + layer norm + ReLU, used by the CNN-then-LSTM encoder.
template <typename T>
struct ConvUnit {
  Var<T> w, b, ln_gain, ln_bias;
  static ConvUnit create(ParamStore<T>& ps, const std::string& prefix, int cin, int features, int kernel, Rng& rng);
  Var<T> forward(const Var<T>& x) const;
};

template <typename T>
struct EncoderOutput {
  std::vector<Var<T>> levels;  // H^(1..4), spatial dims halving
  Var<T> nodes;                // (B, T, N, F4)
  std::int64_t height = 0, width = 0;  // original input size before padding
};

template <typename T>
struct Encoder {
  EncoderConfig cfg;
  int in_channels = 0;
  ConvLstm<T> stem;
  std::vector<ResBlock<T>> blocks;
  // CNN-then-LSTM variant
  std::vector<ConvUnit<T>> conv_units;
  ConvLstm<T> top_lstm;

  static Encoder create(ParamStore<T>& ps, const std::string& prefix, const EncoderConfig& cfg, int in_channels,
                        Rng& rng);
  EncoderOutput<T> forward(const Var<T>& x) const;
};

template <typename T>
struct Decoder {
  std::vector<ConvLstm<T>> ups;  // coarse to fine
  Var<T> out_w, out_b;           // final 1x1 conv to C

  static Decoder create(ParamStore<T>& ps, const std::string& prefix, const EncoderConfig& cfg, int out_channels,
                        Rng& rng);
  // bottleneck (B,T,Ht,Wt,F4); skips are the encoder levels. Output is cropped to (height, width).
  Var<T> forward(const Var<T>& bottleneck, const std::vector<Var<T>>& skips, std::int64_t height,
                 std::int64_t width) const;
};

// Zero-pads H and W on the high side up to the given multiples.
template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& x, int mult_h, int mult_w);

// (B,T,Ht,Wt,F) -> (B,T,N,F) by averaging each patch_h x patch_w tile.
template <typename T>
Var<T> patchify(const Var<T>& top, int patch_h, int patch_w);
// (B,T,N,F) -> (B,T,Ht,Wt,F) by copying node features to their tile.
template <typename T>
Var<T> unpatchify(const Var<T>& nodes, std::int64_t top_h, std::int64_t top_w, int patch_h, int patch_w);

// Mean squared error over all elements.
template <typename T>
Var<T> reconstruction_loss(const Var<T>& x, const Var<T>& x_hat);

}  // namespace adatsc::stcoder
