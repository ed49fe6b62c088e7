#include "adatsc/stcoder.hpp"

#include <cmath>

namespace adatsc::stcoder {

using namespace adatsc::ad;

namespace {

// Applies a per-frame op to a (B,T,H,W,C) tensor by folding time into batch.
template <typename T, typename F>
Var<T> per_frame(const Var<T>& x, F&& f) {
  const Shape s = x.shape();
  auto y = f(reshape(x, Shape{s[0] * s[1], s[2], s[3], s[4]}));
  return reshape(y, Shape{s[0], s[1], y.dim(1), y.dim(2), y.dim(3)});
}

}  // namespace

void EncoderConfig::validate() const {
  if (filters.size() != 4) throw ShapeError("encoder needs exactly 4 filter counts");
  for (std::size_t i = 0; i < filters.size(); ++i) {
    if (filters[i] < 1) throw ShapeError("filter counts must be positive");
    if (i > 0 && filters[i] <= filters[i - 1]) throw ShapeError("filter counts must be strictly increasing");
  }
  if (patch_h < 1 || patch_w < 1) throw ShapeError("patch dims must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ShapeError("kernel must be odd");
}

template <typename T>
ConvLstm<T> ConvLstm<T>::create(ParamStore<T>& ps, const std::string& prefix, int cin, int features, int kernel,
                                double forget_bias, Rng& rng) {
  ConvLstm p;
  p.cin = cin;
  p.features = features;
  const std::int64_t k = kernel, f = features;
  p.wx = ps.add_glorot(prefix + ".wx", {k, k, cin, 4 * f}, k * k * cin, k * k * f, rng);
  p.wh = ps.add_glorot(prefix + ".wh", {k, k, f, 4 * f}, k * k * f, k * k * f, rng);
  Tensor<T> b(Shape{4 * f});
  for (std::int64_t j = f; j < 2 * f; ++j) b[j] = static_cast<T>(forget_bias);
  p.bias = ps.add(prefix + ".b", std::move(b));
  return p;
}

template <typename T>
std::pair<Var<T>, Var<T>> convlstm_step(const Var<T>& x, const Var<T>& h, const Var<T>& c, const ConvLstm<T>& p) {
  if (x.rank() != 4 || x.dim(3) != p.cin) throw ShapeError("convlstm_step: input " + to_string(x.shape()));
  const Shape hs{x.dim(0), x.dim(1), x.dim(2), p.features};
  if (h.shape() != hs || c.shape() != hs)
    throw ShapeError("convlstm_step: state " + to_string(h.shape()) + " expected " + to_string(hs));
  auto pre = add(conv2d(x, p.wx, p.bias), conv2d(h, p.wh, Var<T>()));
  auto hc = lstm_pointwise(pre, c);
  return {slice(hc, -1, 0, p.features), slice(hc, -1, p.features, p.features)};
}

template <typename T>
Var<T> convlstm_sequence(const Var<T>& x, const ConvLstm<T>& p) {
  if (x.rank() != 5 || x.dim(4) != p.cin) throw ShapeError("convlstm_sequence: input " + to_string(x.shape()));
  const std::int64_t B = x.dim(0), steps = x.dim(1), H = x.dim(2), W = x.dim(3), F = p.features;
  // Input contributions for every step in one convolution.
  auto gx = per_frame(x, [&](const Var<T>& v) { return conv2d(v, p.wx, p.bias); });
  std::vector<Var<T>> hs;
  hs.reserve(static_cast<std::size_t>(steps));
  Var<T> h, c = Var<T>::constant(Tensor<T>(Shape{B, H, W, F}));
  for (std::int64_t t = 0; t < steps; ++t) {
    auto pre = reshape(slice(gx, 1, t, 1), Shape{B, H, W, 4 * F});
    if (t > 0) pre = add(pre, conv2d(h, p.wh, Var<T>()));
    auto hc = lstm_pointwise(pre, c);
    h = slice(hc, -1, 0, F);
    c = slice(hc, -1, F, F);
    hs.push_back(h);
  }
  return stack(hs, 1);
}

template <typename T>
ResBlock<T> ResBlock<T>::create(ParamStore<T>& ps, const std::string& prefix, int cin, int features, int kernel,
                                double forget_bias, Rng& rng) {
  ResBlock r;
  r.first = ConvLstm<T>::create(ps, prefix + ".lstm1", cin, features, kernel, forget_bias, rng);
  r.second = ConvLstm<T>::create(ps, prefix + ".lstm2", features, features, kernel, forget_bias, rng);
  r.ln1_gain = ps.add_fill(prefix + ".ln1.g", {features}, T(1));
  r.ln1_bias = ps.add_fill(prefix + ".ln1.b", {features}, T(0));
  r.ln2_gain = ps.add_fill(prefix + ".ln2.g", {features}, T(1));
  r.ln2_bias = ps.add_fill(prefix + ".ln2.b", {features}, T(0));
  if (cin != features) {
    r.proj_w = ps.add_glorot(prefix + ".proj.w", {1, 1, cin, features}, cin, features, rng);
    r.proj_b = ps.add_fill(prefix + ".proj.b", {features}, T(0));
  }
  return r;
}

template <typename T>
Var<T> ResBlock<T>::forward(const Var<T>& x) const {
  auto y = layer_norm(convlstm_sequence(x, first), ln1_gain, ln1_bias);
  y = layer_norm(convlstm_sequence(y, second), ln2_gain, ln2_bias);
  Var<T> skip = x;
  if (proj_w.defined()) skip = per_frame(x, [&](const Var<T>& v) { return conv2d(v, proj_w, proj_b); });
  return add(y, skip);
}

template <typename T>
ConvUnit<T> ConvUnit<T>::create(ParamStore<T>& ps, const std::string& prefix, int cin, int features, int kernel,
                                Rng& rng) {
  ConvUnit u;
  const std::int64_t k = kernel;
  u.w = ps.add_glorot(prefix + ".w", {k, k, cin, features}, k * k * cin, k * k * features, rng);
  u.b = ps.add_fill(prefix + ".b", {features}, T(0));
  u.ln_gain = ps.add_fill(prefix + ".ln.g", {features}, T(1));
  u.ln_bias = ps.add_fill(prefix + ".ln.b", {features}, T(0));
  return u;
}

template <typename T>
Var<T> ConvUnit<T>::forward(const Var<T>& x) const {
  auto y = per_frame(x, [&](const Var<T>& v) { return conv2d(v, w, b); });
  return relu(layer_norm(y, ln_gain, ln_bias));
}

template <typename T>
Encoder<T> Encoder<T>::create(ParamStore<T>& ps, const std::string& prefix, const EncoderConfig& cfg, int in_channels,
                              Rng& rng) {
  cfg.validate();
  Encoder e;
  e.cfg = cfg;
  e.in_channels = in_channels;
  const auto& f = cfg.filters;
  if (cfg.variant == EncoderVariant::ConvLstm) {
    e.stem = ConvLstm<T>::create(ps, prefix + ".stem", in_channels, f[0], cfg.kernel, cfg.forget_bias, rng);
    for (int l = 1; l < 4; ++l)
      e.blocks.push_back(ResBlock<T>::create(ps, prefix + ".block" + std::to_string(l + 1), f[l - 1], f[l],
                                             cfg.kernel, cfg.forget_bias, rng));
  } else {
    e.conv_units.push_back(ConvUnit<T>::create(ps, prefix + ".conv1", in_channels, f[0], cfg.kernel, rng));
    for (int l = 1; l < 4; ++l)
      e.conv_units.push_back(
          ConvUnit<T>::create(ps, prefix + ".conv" + std::to_string(l + 1), f[l - 1], f[l], cfg.kernel, rng));
    e.top_lstm = ConvLstm<T>::create(ps, prefix + ".top_lstm", f[3], f[3], cfg.kernel, cfg.forget_bias, rng);
  }
  return e;
}

template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& x, int mult_h, int mult_w) {
  if (x.rank() != 5) throw ShapeError("pad_spatial expects (B,T,H,W,C)");
  const std::int64_t B = x.dim(0), S = x.dim(1), H = x.dim(2), W = x.dim(3), C = x.dim(4);
  const std::int64_t Hp = (H + mult_h - 1) / mult_h * mult_h, Wp = (W + mult_w - 1) / mult_w * mult_w;
  if (Hp == H && Wp == W) return x;
  Tensor<T> out(Shape{B, S, Hp, Wp, C});
  for (std::int64_t f = 0; f < B * S; ++f)
    for (std::int64_t i = 0; i < H; ++i)
      std::copy_n(x.data() + ((f * H + i) * W) * C, W * C, out.data() + ((f * Hp + i) * Wp) * C);
  return out;
}

template <typename T>
EncoderOutput<T> Encoder<T>::forward(const Var<T>& x) const {
  if (x.rank() != 5 || x.dim(4) != in_channels)
    throw ShapeError("encoder input " + to_string(x.shape()) + " does not match " + std::to_string(in_channels) +
                     " channels");
  EncoderOutput<T> out;
  out.height = x.dim(2);
  out.width = x.dim(3);
  Var<T> input = x;
  if (x.dim(2) % cfg.pad_multiple_h() || x.dim(3) % cfg.pad_multiple_w()) {
    if (x.requires_grad()) throw ShapeError("encoder input needing padding must not require grad");
    input = Var<T>::constant(pad_spatial(x.value(), cfg.pad_multiple_h(), cfg.pad_multiple_w()));
  }
  auto pool = [](const Var<T>& v) { return per_frame(v, [](const Var<T>& f) { return maxpool2x2(f); }); };
  if (cfg.variant == EncoderVariant::ConvLstm) {
    out.levels.push_back(convlstm_sequence(input, stem));
    for (const auto& b : blocks) out.levels.push_back(b.forward(pool(out.levels.back())));
  } else {
    out.levels.push_back(conv_units[0].forward(input));
    for (std::size_t l = 1; l < conv_units.size(); ++l) {
      auto pooled = pool(out.levels.back());
      auto y = conv_units[l].forward(pooled);
      if (l == conv_units.size() - 1) y = add(y, convlstm_sequence(y, top_lstm));
      out.levels.push_back(y);
    }
  }
  out.nodes = patchify(out.levels.back(), cfg.patch_h, cfg.patch_w);
  return out;
}

template <typename T>
Decoder<T> Decoder<T>::create(ParamStore<T>& ps, const std::string& prefix, const EncoderConfig& cfg, int out_channels,
                              Rng& rng) {
  cfg.validate();
  Decoder d;
  const auto& f = cfg.filters;
  for (int l = 3; l >= 1; --l)
    d.ups.push_back(ConvLstm<T>::create(ps, prefix + ".up" + std::to_string(l), f[l] + f[l - 1], f[l - 1], cfg.kernel,
                                        cfg.forget_bias, rng));
  d.out_w = ps.add_glorot(prefix + ".out.w", {1, 1, f[0], out_channels}, f[0], out_channels, rng);
  d.out_b = ps.add_fill(prefix + ".out.b", {out_channels}, T(0));
  return d;
}

template <typename T>
Var<T> Decoder<T>::forward(const Var<T>& bottleneck, const std::vector<Var<T>>& skips, std::int64_t height,
                           std::int64_t width) const {
  if (skips.size() != ups.size() + 1) throw ShapeError("decoder needs one skip per encoder level");
  Var<T> y = bottleneck;
  for (std::size_t i = 0; i < ups.size(); ++i) {
    const auto& skip = skips[skips.size() - 2 - i];
    y = per_frame(y, [](const Var<T>& f) { return upsample2x(f); });
    if (y.dim(0) != skip.dim(0) || y.dim(1) != skip.dim(1) || y.dim(2) != skip.dim(2) || y.dim(3) != skip.dim(3))
      throw ShapeError("decoder: upsampled " + to_string(y.shape()) + " vs skip " + to_string(skip.shape()));
    y = convlstm_sequence(concat(std::vector<Var<T>>{y, skip}, -1), ups[i]);
  }
  y = per_frame(y, [&](const Var<T>& f) { return conv2d(f, out_w, out_b); });
  if (y.dim(2) != height) y = slice(y, 2, 0, height);
  if (y.dim(3) != width) y = slice(y, 3, 0, width);
  return y;
}

template <typename T>
Var<T> patchify(const Var<T>& top, int ph, int pw) {
  if (top.rank() != 5 || top.dim(2) % ph || top.dim(3) % pw)
    throw ShapeError("patchify: " + to_string(top.shape()) + " not divisible by patch");
  const std::int64_t B = top.dim(0), S = top.dim(1), Hn = top.dim(2) / ph, Wn = top.dim(3) / pw, F = top.dim(4);
  if (ph == 1 && pw == 1) return reshape(top, Shape{B, S, Hn * Wn, F});
  auto v = reshape(top, Shape{B * S, Hn, ph, Wn, pw, F});
  v = permute(v, {0, 1, 3, 2, 4, 5});
  v = reshape(v, Shape{B, S, Hn * Wn, static_cast<std::int64_t>(ph) * pw, F});
  return mean_axis(v, 3);
}

template <typename T>
Var<T> unpatchify(const Var<T>& nodes, std::int64_t top_h, std::int64_t top_w, int ph, int pw) {
  if (nodes.rank() != 4 || top_h % ph || top_w % pw || nodes.dim(2) != (top_h / ph) * (top_w / pw))
    throw ShapeError("unpatchify: nodes " + to_string(nodes.shape()) + " do not tile " + std::to_string(top_h) + "x" +
                     std::to_string(top_w));
  const std::int64_t B = nodes.dim(0), S = nodes.dim(1), Hn = top_h / ph, Wn = top_w / pw, F = nodes.dim(3);
  auto v = reshape(nodes, Shape{B * S, Hn, 1, Wn, 1, F});
  v = broadcast_to(v, Shape{B * S, Hn, ph, Wn, pw, F});
  return reshape(v, Shape{B, S, top_h, top_w, F});
}

template <typename T>
Var<T> reconstruction_loss(const Var<T>& x, const Var<T>& x_hat) {
  if (x.shape() != x_hat.shape())
    throw ShapeError("reconstruction_loss: " + to_string(x.shape()) + " vs " + to_string(x_hat.shape()));
  return mean(square(sub(x_hat, x)));
}

#define ADATSC_INSTANTIATE_STCODER(T)                                                                            \
  template struct ConvLstm<T>;                                                                                   \
  template struct ResBlock<T>;                                                                                   \
  template struct ConvUnit<T>;                                                                                   \
  template struct Encoder<T>;                                                                                    \
  template struct Decoder<T>;                                                                                    \
  template std::pair<Var<T>, Var<T>> convlstm_step(const Var<T>&, const Var<T>&, const Var<T>&, const ConvLstm<T>&); \
  template Var<T> convlstm_sequence(const Var<T>&, const ConvLstm<T>&);                                          \
  template Tensor<T> pad_spatial(const Tensor<T>&, int, int);                                                    \
  template Var<T> patchify(const Var<T>&, int, int);                                                             \
  template Var<T> unpatchify(const Var<T>&, std::int64_t, std::int64_t, int, int);                               \
  template Var<T> reconstruction_loss(const Var<T>&, const Var<T>&);

ADATSC_INSTANTIATE_STCODER(float)
ADATSC_INSTANTIATE_STCODER(double)

}  // namespace adatsc::stcoder
