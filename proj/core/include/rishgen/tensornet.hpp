#ifndef RISHGEN_TENSORNET_HPP
#define RISHGEN_TENSORNET_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rishgen/common.hpp"

// Minimal dense-tensor reverse-mode autodiff: just the layers the volumetric
// autoencoder, denoiser U-Net and super-resolution head need. Values and
// gradients are double precision; reductions accumulate in double as well.
// Graph construction records a tape of shared nodes; backward() walks it in
// reverse topological order. Everything is deterministic and single-threaded.

namespace rishgen::tn {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily, kept zeroed between uses
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad();
};

/// When false (inference), ops do not record parents or backward closures.
bool& grad_enabled();

/// RAII guard that disables gradient recording in its scope.
struct NoGradGuard {
  NoGradGuard() : saved(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = saved; }
  bool saved;
};

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double fill);
  static Tensor from_data(Shape s, std::vector<double> values);
  /// Leaf with persistent gradient buffer (used by Parameter).
  static Tensor leaf(Shape s, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& grad() { return node_->ensure_grad(); }
  double scalar() const;
  const std::shared_ptr<Node>& node() const { return node_; }

private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable node that requires grad (parameters keep theirs until
/// zero_grad). Throws ArgumentError if loss is not a single element.
void backward(const Tensor& loss);

// ---- elementwise / structural ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor reshape(const Tensor& x, Shape s);
Tensor detach(const Tensor& x);

// ---- reductions / losses (double accumulation) ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse_loss(const Tensor& a, const Tensor& b);
Tensor mae_loss(const Tensor& a, const Tensor& b);

// ---- dense algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);          // (n,k)x(k,m)
Tensor transpose(const Tensor& a);                        // (n,m) -> (m,n)
Tensor softmax_rows(const Tensor& a);
Tensor slice_cols(const Tensor& a, int offset, int count);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x(n,i) w(o,i) b(o)
Tensor embedding_lookup(const Tensor& table, int row);             // -> (1,d)
Tensor gather_rows(const Tensor& table, const std::vector<int>& rows);

// ---- volumetric layers; x is (C, D, H, W) ----
/// 3D convolution, kernel k in {1,3}, stride in {1,2}, zero padding k/2.
/// w is (Co, Ci, k, k, k), bias (Co) (pass an undefined Tensor for no bias).
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps = 1e-5);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // bias (C)
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor nearest_upsample2(const Tensor& x);

/// Forward replaces values wholesale, backward passes gradients straight
/// through to z (the replacement is treated as identity for the tape).
Tensor straight_through(const Tensor& z, std::vector<double> replaced);

/// Query/key/value/output projections for spatial-grid cross-attention.
struct AttentionWeights {
  Tensor wq;  ///< (heads*dk, channels)
  Tensor wk;  ///< (heads*dk, context_dim)
  Tensor wv;  ///< (heads*dk, context_dim)
  Tensor wo;  ///< (channels, heads*dk)
  int heads = 1;
  int dk = 0;  ///< per-head key dim
};

/// softmax(Q K^T / sqrt(dk)) V with Q from the flattened spatial positions of
/// x (tokens) and K, V from the context rows; multi-head, output-projected,
/// then reshaped back to (C, D, H, W). Pure composition of the primitives
/// above, so gradients come from the tape.
Tensor cross_attention(const Tensor& x, const Tensor& context,
                       const AttentionWeights& w);

// ---- parameters and optimization ----
struct Parameter {
  Tensor value;           // leaf tensor
  std::vector<double> m;  // first moment
  std::vector<double> v;  // second moment
  std::int64_t step = 0;

  Parameter() = default;
  explicit Parameter(Tensor leaf_tensor);
  void zero_grad();
  std::size_t numel() const { return value.numel(); }
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam update from the gradients currently stored in
/// each parameter. Deterministic given state.
void adamw_step(const std::vector<Parameter*>& params, const AdamWConfig& cfg);

// ---- checkpoints ----
using ParamMap = std::vector<std::pair<std::string, Parameter*>>;

/// Writes a named parameter table (versioned RGCK container, little-endian,
/// float64 payloads) plus string metadata; optionally the Adam state.
void save_checkpoint(const std::filesystem::path& path, const ParamMap& params,
                     const std::map<std::string, std::string>& meta,
                     bool include_optimizer_state);

/// Loads values (and optimizer state when present) into an existing ParamMap;
/// names and shapes must match exactly. Returns the metadata table.
std::map<std::string, std::string> load_checkpoint(const std::filesystem::path& path,
                                                   const ParamMap& params);

/// Metadata only, without touching parameters.
std::map<std::string, std::string> read_checkpoint_meta(const std::filesystem::path& path);

// ---- init helpers ----
Tensor he_normal(Shape s, std::size_t fan_in, Rng& rng);
Tensor normal_init(Shape s, double stddev, Rng& rng);

}  // namespace rishgen::tn

#endif
