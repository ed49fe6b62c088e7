#pragma once

#include <string>

#include "adatsc/ops.hpp"
#include "adatsc/params.hpp"

// Bidirectional temporal graph attention over patch nodes. Nodes of frame t
// attend to all nodes of frame t+1 (forward) and t-1 (backward); the end
// frames attend to themselves.
namespace adatsc::bitgat {

using ad::Var;

struct BitgatConfig {
  int heads = 4;
  int d_head = 0;  // 0 means F / heads
  int D = 16;

  int head_dim(int features) const { return d_head > 0 ? d_head : features / heads; }
};

template <typename T>
struct DirectionParams {
  Var<T> wq, wk, wv;  // (F, heads*d_head)
  Var<T> wo;          // (heads*d_head, F), this direction's block of the output projection
};

template <typename T>
struct Bitgat {
  BitgatConfig cfg;
  int features = 0;
  DirectionParams<T> fwd, bwd;
  Var<T> out_b;              // (F)
  Var<T> ln_gain, ln_bias;   // (F)
  Var<T> pool_w, pool_b;     // (F, D), (D)
  Var<T> pool_gain, pool_bias;  // (D)

  static Bitgat create(ParamStore<T>& ps, const std::string& prefix, const BitgatConfig& cfg, int features, Rng& rng);
};

// Attention from query frames to source frames, both (G, N, F) with G
// independent frame pairs. Returns messages (G, N, heads*d_head); when
// `weights` is given it receives the attention (G, heads, N, N).
template <typename T>
Var<T> directional_attention(const Var<T>& query_nodes, const Var<T>& source_nodes, const DirectionParams<T>& p,
                             int heads, int d_head, Tensor<T>* weights = nullptr);

template <typename T>
struct BitgatOutput {
  Var<T> node_features;  // (B, T, N, F)
  Var<T> z;              // (B, T, D)
  Var<T> zbar;           // (B, D)
  Tensor<T> attn_fwd, attn_bwd;  // (B*T, heads, N, N), only filled on request
};

// nodes (B, T, N, F).
template <typename T>
BitgatOutput<T> bitgat_forward(const Var<T>& nodes, const Bitgat<T>& model, bool keep_attention = false);

// Mean row entropy of attention weights (..., N, N), in nats.
template <typename T>
double attention_entropy(const Tensor<T>& weights);

// Mean over nodes, linear projection, layer norm: (B,T,N,F) -> (B,T,D).
template <typename T>
Var<T> pool_nodes(const Var<T>& nodes, const Bitgat<T>& model);

}  // namespace adatsc::bitgat
