#ifndef RISHGEN_LAYERS_HPP
#define RISHGEN_LAYERS_HPP

#include "rishgen/tensornet.hpp"

// Small building blocks shared by the autoencoder, denoiser and
// super-resolution networks.

namespace rishgen::tn {

/// Largest divisor of `channels` that is <= 8, used as the group count.
inline int norm_groups(int channels) {
  for (int g = std::min(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

struct ConvLayer {
  Parameter w;  // (co, ci, k, k, k)
  Parameter b;  // (co)

  ConvLayer() = default;
  ConvLayer(int ci, int co, int k, Rng& rng)
      : w(he_normal({co, ci, k, k, k}, static_cast<std::size_t>(ci) * k * k * k, rng)),
        b(Tensor::leaf({co}, std::vector<double>(co, 0.0))) {}

  static ConvLayer zero_init(int ci, int co, int k) {
    ConvLayer l;
    l.w = Parameter(Tensor::leaf({co, ci, k, k, k},
                                 std::vector<double>(static_cast<std::size_t>(co) * ci * k * k * k, 0.0)));
    l.b = Parameter(Tensor::leaf({co}, std::vector<double>(co, 0.0)));
    return l;
  }

  Tensor operator()(const Tensor& x, int stride = 1) const {
    return conv3d(x, w.value, b.value, stride);
  }

  void collect(const std::string& prefix, ParamMap& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
  }
};

struct NormLayer {
  Parameter gamma, beta;
  int groups = 1;

  NormLayer() = default;
  explicit NormLayer(int channels)
      : gamma(Tensor::leaf({channels}, std::vector<double>(channels, 1.0))),
        beta(Tensor::leaf({channels}, std::vector<double>(channels, 0.0))),
        groups(norm_groups(channels)) {}

  Tensor operator()(const Tensor& x) const {
    return group_norm(x, gamma.value, beta.value, groups);
  }

  void collect(const std::string& prefix, ParamMap& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
  }
};

/// norm-silu-conv twice with additive skip; 1x1 projection when the channel
/// count changes. With temb_dim > 0 a learned per-channel bias derived from
/// the timestep embedding is added between the convolutions.
struct ResBlock {
  NormLayer n1, n2;
  ConvLayer c1, c2;
  ConvLayer skip;  // only when in != out
  Parameter temb_w, temb_b;
  int in_ch = 0, out_ch = 0, temb_dim = 0;

  ResBlock() = default;
  ResBlock(int in, int out, Rng& rng, int temb = 0)
      : n1(in), n2(out), c1(in, out, 3, rng), c2(out, out, 3, rng),
        in_ch(in), out_ch(out), temb_dim(temb) {
    if (in != out) skip = ConvLayer(in, out, 1, rng);
    if (temb > 0) {
      temb_w = Parameter(he_normal({out, temb}, static_cast<std::size_t>(temb), rng));
      temb_b = Parameter(Tensor::leaf({out}, std::vector<double>(out, 0.0)));
    }
  }

  Tensor operator()(const Tensor& x, const Tensor& temb = Tensor()) const {
    Tensor h = c1(silu(n1(x)));
    if (temb_dim > 0 && temb.defined()) {
      Tensor bias = linear(temb, temb_w.value, temb_b.value);  // (1, out)
      h = add_channel_bias(h, reshape(bias, {out_ch}));
    }
    h = c2(silu(n2(h)));
    Tensor s = in_ch == out_ch ? x : skip(x);
    return add(h, s);
  }

  void collect(const std::string& prefix, ParamMap& out) {
    n1.collect(prefix + ".n1", out);
    c1.collect(prefix + ".c1", out);
    n2.collect(prefix + ".n2", out);
    c2.collect(prefix + ".c2", out);
    if (in_ch != out_ch) skip.collect(prefix + ".skip", out);
    if (temb_dim > 0) {
      out.emplace_back(prefix + ".temb_w", &temb_w);
      out.emplace_back(prefix + ".temb_b", &temb_b);
    }
  }
};

}  // namespace rishgen::tn

#endif
