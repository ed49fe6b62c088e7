#include "adatsc/bitgat.hpp"

#include <cmath>

namespace adatsc::bitgat {

using namespace adatsc::ad;

template <typename T>
Bitgat<T> Bitgat<T>::create(ParamStore<T>& ps, const std::string& prefix, const BitgatConfig& cfg, int features,
                            Rng& rng) {
  if (cfg.heads < 1 || cfg.D < 1 || cfg.head_dim(features) < 1) throw ShapeError("bitgat: bad head configuration");
  Bitgat m;
  m.cfg = cfg;
  m.features = features;
  const std::int64_t F = features, HD = static_cast<std::int64_t>(cfg.heads) * cfg.head_dim(features);
  for (auto [dir, name] : {std::pair{&m.fwd, "fwd"}, std::pair{&m.bwd, "bwd"}}) {
    const std::string p = prefix + "." + name;
    dir->wq = ps.add_glorot(p + ".wq", {F, HD}, F, HD, rng);
    dir->wk = ps.add_glorot(p + ".wk", {F, HD}, F, HD, rng);
    dir->wv = ps.add_glorot(p + ".wv", {F, HD}, F, HD, rng);
    dir->wo = ps.add_glorot(p + ".wo", {HD, F}, 2 * HD, F, rng);
  }
  m.out_b = ps.add_fill(prefix + ".out.b", {F}, T(0));
  m.ln_gain = ps.add_fill(prefix + ".ln.g", {F}, T(1));
  m.ln_bias = ps.add_fill(prefix + ".ln.b", {F}, T(0));
  m.pool_w = ps.add_glorot(prefix + ".pool.w", {F, cfg.D}, F, cfg.D, rng);
  m.pool_b = ps.add_fill(prefix + ".pool.b", {cfg.D}, T(0));
  m.pool_gain = ps.add_fill(prefix + ".pool.ln.g", {cfg.D}, T(1));
  m.pool_bias = ps.add_fill(prefix + ".pool.ln.b", {cfg.D}, T(0));
  return m;
}

template <typename T>
Var<T> directional_attention(const Var<T>& query_nodes, const Var<T>& source_nodes, const DirectionParams<T>& p,
                             int heads, int d_head, Tensor<T>* weights) {
  if (query_nodes.rank() != 3 || query_nodes.shape() != source_nodes.shape())
    throw ShapeError("directional_attention: " + to_string(query_nodes.shape()) + " vs " +
                     to_string(source_nodes.shape()));
  const std::int64_t G = query_nodes.dim(0), N = query_nodes.dim(1), H = heads, dh = d_head;
  auto split_heads = [&](const Var<T>& v) {
    // (G, N, H*dh) -> (G*H, N, dh)
    return reshape(permute(reshape(v, Shape{G, N, H, dh}), {0, 2, 1, 3}), Shape{G * H, N, dh});
  };
  const Var<T> none;
  auto q = split_heads(linear(query_nodes, p.wq, none));
  auto k = split_heads(linear(source_nodes, p.wk, none));
  auto v = split_heads(linear(source_nodes, p.wv, none));
  auto scores = scale(bmm(q, k, false, true), T(1) / std::sqrt(static_cast<T>(dh)));
  for (T s : scores.value().values())
    if (!std::isfinite(static_cast<double>(s))) throw NumericError("attention scores are not finite");
  auto alpha = softmax_last(scores);
  if (weights) *weights = alpha.value().reshaped(Shape{G, H, N, N});
  auto m = bmm(alpha, v);  // (G*H, N, dh)
  return reshape(permute(reshape(m, Shape{G, H, N, dh}), {0, 2, 1, 3}), Shape{G, N, H * dh});
}

template <typename T>
Var<T> pool_nodes(const Var<T>& nodes, const Bitgat<T>& model) {
  if (nodes.rank() != 4) throw ShapeError("pool_nodes expects (B,T,N,F)");
  auto pooled = mean_axis(nodes, 2);
  return layer_norm(linear(pooled, model.pool_w, model.pool_b), model.pool_gain, model.pool_bias);
}

template <typename T>
BitgatOutput<T> bitgat_forward(const Var<T>& nodes, const Bitgat<T>& model, bool keep_attention) {
  if (nodes.rank() != 4 || nodes.dim(3) != model.features)
    throw ShapeError("bitgat_forward: nodes " + to_string(nodes.shape()) + " expected feature dim " +
                     std::to_string(model.features));
  const std::int64_t B = nodes.dim(0), S = nodes.dim(1), N = nodes.dim(2), F = nodes.dim(3);
  if (S < 1) throw ShapeError("bitgat_forward: empty sequence");
  std::vector<std::int64_t> next(static_cast<std::size_t>(S)), prev(static_cast<std::size_t>(S));
  for (std::int64_t t = 0; t < S; ++t) {
    next[t] = t + 1 < S ? t + 1 : t;
    prev[t] = t > 0 ? t - 1 : t;
  }
  const int heads = model.cfg.heads, dh = model.cfg.head_dim(model.features);
  const Shape flat{B * S, N, F};
  auto query = reshape(nodes, flat);
  BitgatOutput<T> out;
  auto m_fwd = directional_attention(query, reshape(gather(nodes, 1, next), flat), model.fwd, heads, dh,
                                     keep_attention ? &out.attn_fwd : nullptr);
  auto m_bwd = directional_attention(query, reshape(gather(nodes, 1, prev), flat), model.bwd, heads, dh,
                                     keep_attention ? &out.attn_bwd : nullptr);
  // W_o [m_fwd | m_bwd] with W_o stored as its two row blocks.
  const Var<T> none;
  auto fused = add(linear(m_fwd, model.fwd.wo, model.out_b), linear(m_bwd, model.bwd.wo, none));
  auto h = reshape(layer_norm(fused, model.ln_gain, model.ln_bias), Shape{B, S, N, F});
  out.node_features = h;
  out.z = pool_nodes(h, model);
  out.zbar = mean_axis(out.z, 1);
  return out;
}

template <typename T>
double attention_entropy(const Tensor<T>& weights) {
  if (weights.rank() < 2 || weights.size() == 0) return 0.0;
  const std::int64_t n = weights.dim(-1), rows = weights.size() / n;
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < n; ++j) {
      const double a = weights[r * n + j];
      if (a > 0) total -= a * std::log(a);
    }
  return total / static_cast<double>(rows);
}

#define ADATSC_INSTANTIATE_BITGAT(T)                                                                              \
  template struct Bitgat<T>;                                                                                      \
  template Var<T> directional_attention(const Var<T>&, const Var<T>&, const DirectionParams<T>&, int, int, Tensor<T>*); \
  template BitgatOutput<T> bitgat_forward(const Var<T>&, const Bitgat<T>&, bool);                                 \
  template double attention_entropy(const Tensor<T>&);                                                            \
  template Var<T> pool_nodes(const Var<T>&, const Bitgat<T>&);

ADATSC_INSTANTIATE_BITGAT(float)
ADATSC_INSTANTIATE_BITGAT(double)

}  // namespace adatsc::bitgat
