// Feed-forward embedding network: tanh hidden layers, affine output layer,
// optional L2 normalisation of the output. Forward pass, exact analytic
// backward pass, plain SGD and a JSON checkpoint format.
#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcnmt/core.hpp"

namespace mcnmt {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool operator==(const Matrix&) const = default;
};

struct EncoderParams {
  std::vector<std::size_t> layer_dims;  // input, hidden..., embedding
  std::vector<Matrix> weights;          // weights[l] is layer_dims[l+1] x layer_dims[l]
  std::vector<Vector> biases;           // biases[l] has layer_dims[l+1] entries
  bool normalize = true;

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].data.size() + biases[l].size();
    return n;
  }

  /// Zero-valued parameters of the given architecture.
  static EncoderParams zeros(std::vector<std::size_t> dims, bool normalize = true) {
    if (dims.size() < 2) throw ConfigError("encoder needs at least an input and an output dimension");
    for (std::size_t d : dims)
      if (d == 0) throw ConfigError("encoder layer dimensions must be positive");
    EncoderParams p;
    p.layer_dims = std::move(dims);
    p.normalize = normalize;
    for (std::size_t l = 0; l + 1 < p.layer_dims.size(); ++l) {
      p.weights.emplace_back(p.layer_dims[l + 1], p.layer_dims[l]);
      p.biases.emplace_back(p.layer_dims[l + 1], 0.0);
    }
    return p;
  }

  bool same_shape(const EncoderParams& o) const {
    if (layer_dims != o.layer_dims || weights.size() != o.weights.size() || biases.size() != o.biases.size())
      return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows != o.weights[l].rows || weights[l].cols != o.weights[l].cols) return false;
      if (biases[l].size() != o.biases[l].size()) return false;
    }
    return true;
  }

  void check_shape() const {
    if (layer_dims.size() < 2 || weights.size() + 1 != layer_dims.size() || biases.size() != weights.size())
      throw ShapeError("encoder layer count does not match layer_dims");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const auto& w = weights[l];
      if (w.rows != layer_dims[l + 1] || w.cols != layer_dims[l] || w.data.size() != w.rows * w.cols)
        throw ShapeError("weight matrix " + std::to_string(l) + " has the wrong shape");
      if (biases[l].size() != layer_dims[l + 1])
        throw ShapeError("bias vector " + std::to_string(l) + " has the wrong length");
    }
  }

  bool finite() const {
    for (std::size_t l = 0; l < weights.size(); ++l)
      if (!all_finite(weights[l].data) || !all_finite(biases[l])) return false;
    return true;
  }

  /// Visits every scalar parameter in a fixed order (layer by layer, weights
  /// row-major, then biases).
  template <typename F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      for (double& w : weights[l].data) f(w);
      for (double& b : biases[l]) f(b);
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      for (double w : weights[l].data) f(w);
      for (double b : biases[l]) f(b);
    }
  }

  bool operator==(const EncoderParams&) const = default;
};

/// Gradients share the parameter layout.
using EncoderGradient = EncoderParams;

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
inline EncoderParams init_encoder(std::vector<std::size_t> dims, Rng& rng, bool normalize = true) {
  EncoderParams p = EncoderParams::zeros(std::move(dims), normalize);
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.layer_dims[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& w : p.weights[l].data) w = u(rng);
    for (double& b : p.biases[l]) b = u(rng);
  }
  return p;
}

struct Embedding {
  Vector values;
  /// Set when normalisation was requested but the pre-normalised output was
  /// the zero vector; `values` is then returned unnormalised.
  bool degenerate = false;

  std::size_t size() const { return values.size(); }
  double norm() const { return l2_norm(values); }
};

namespace detail {

// Activations of one forward pass. acts[0] is the input, acts[l+1] the output
// of layer l (tanh for hidden layers, affine for the last one). `out` is the
// final, possibly normalised, embedding.
struct ForwardTrace {
  std::vector<Vector> acts;
  Vector out;
  double out_norm = 0.0;
  bool degenerate = false;
};

inline void affine(const Matrix& w, const Vector& b, const Vector& x, Vector& y) {
  y.assign(w.rows, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = &w.data[r * w.cols];
    double s = b[r];
    for (std::size_t c = 0; c < w.cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
}

inline ForwardTrace trace_forward(const EncoderParams& p, std::span<const double> input) {
  if (input.size() != p.input_dim())
    throw ShapeError("encoder input has length " + std::to_string(input.size()) + ", expected " +
                     std::to_string(p.input_dim()));
  ForwardTrace t;
  const std::size_t layers = p.num_layers();
  t.acts.resize(layers + 1);
  t.acts[0].assign(input.begin(), input.end());
  for (std::size_t l = 0; l < layers; ++l) {
    affine(p.weights[l], p.biases[l], t.acts[l], t.acts[l + 1]);
    if (l + 1 < layers)
      for (double& v : t.acts[l + 1]) v = std::tanh(v);
  }
  t.out = t.acts[layers];
  t.out_norm = l2_norm(t.out);
  if (p.normalize) {
    if (t.out_norm > 0.0) {
      for (double& v : t.out) v /= t.out_norm;
    } else {
      t.degenerate = true;
    }
  }
  return t;
}

}  // namespace detail

inline Embedding forward(const EncoderParams& params, std::span<const double> input) {
  auto t = detail::trace_forward(params, input);
  return Embedding{std::move(t.out), t.degenerate};
}

/// Embeds every input; convenience for clustering and evaluation.
inline std::vector<Vector> embed_all(const EncoderParams& params, std::span<const Vector> inputs) {
  std::vector<Vector> out;
  out.reserve(inputs.size());
  for (const auto& x : inputs) out.push_back(forward(params, x).values);
  return out;
}

/// Gradient of sum_i <upstream_grads[i], forward(params, batch[i])> with
/// respect to every parameter. Batch gradients are summed, not averaged.
inline EncoderGradient backward(const EncoderParams& params, std::span<const Vector> batch,
                                std::span<const Vector> upstream_grads) {
  if (batch.size() != upstream_grads.size())
    throw ShapeError("backward: batch and upstream gradients differ in length");
  params.check_shape();
  EncoderGradient g = EncoderParams::zeros(params.layer_dims, params.normalize);
  const std::size_t layers = params.num_layers();

  Vector delta, prev;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    if (upstream_grads[s].size() != params.output_dim())
      throw ShapeError("backward: upstream gradient has the wrong length");
    const auto t = detail::trace_forward(params, batch[s]);

    // Through the normalisation: d(z/|z|)^T g = (g - y (y.g)) / |z|.
    delta = upstream_grads[s];
    if (params.normalize && !t.degenerate) {
      double dot = 0.0;
      for (std::size_t k = 0; k < delta.size(); ++k) dot += t.out[k] * delta[k];
      for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = (delta[k] - t.out[k] * dot) / t.out_norm;
    }

    for (std::size_t l = layers; l-- > 0;) {
      const Vector& in = t.acts[l];
      Matrix& gw = g.weights[l];
      for (std::size_t r = 0; r < gw.rows; ++r) {
        const double d = delta[r];
        if (d == 0.0) continue;
        double* row = &gw.data[r * gw.cols];
        for (std::size_t c = 0; c < gw.cols; ++c) row[c] += d * in[c];
        g.biases[l][r] += d;
      }
      if (l == 0) break;
      const Matrix& w = params.weights[l];
      prev.assign(w.cols, 0.0);
      for (std::size_t r = 0; r < w.rows; ++r) {
        const double d = delta[r];
        if (d == 0.0) continue;
        const double* row = &w.data[r * w.cols];
        for (std::size_t c = 0; c < w.cols; ++c) prev[c] += row[c] * d;
      }
      // acts[l] is tanh output of layer l-1.
      for (std::size_t c = 0; c < prev.size(); ++c) prev[c] *= 1.0 - in[c] * in[c];
      delta.swap(prev);
    }
  }
  return g;
}

/// params - learning_rate * grads. Throws NumericError on non-finite input or
/// result rather than writing a corrupted model.
inline EncoderParams sgd_step(const EncoderParams& params, const EncoderGradient& grads, double learning_rate) {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be a positive finite number");
  if (!params.same_shape(grads)) throw ShapeError("sgd_step: gradient shape does not match parameters");
  if (!grads.finite()) throw NumericError("sgd_step: non-finite gradient");
  EncoderParams out = params;
  for (std::size_t l = 0; l < out.num_layers(); ++l) {
    auto& w = out.weights[l].data;
    const auto& gw = grads.weights[l].data;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= learning_rate * gw[k];
    auto& b = out.biases[l];
    const auto& gb = grads.biases[l];
    for (std::size_t k = 0; k < b.size(); ++k) b[k] -= learning_rate * gb[k];
  }
  if (!out.finite()) throw NumericError("sgd_step: update produced non-finite parameters");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint JSON.

inline constexpr int kCheckpointFormatVersion = 1;

inline nlohmann::json to_json(const EncoderParams& p) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["layer_dims"] = p.layer_dims;
  j["normalize"] = p.normalize;
  auto& layers = j["weights"] = nlohmann::json::array();
  for (const auto& w : p.weights) layers.push_back(w.data);
  j["biases"] = p.biases;
  return j;
}

inline EncoderParams encoder_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw ConfigError("unsupported checkpoint format_version");
    EncoderParams p = EncoderParams::zeros(j.at("layer_dims").get<std::vector<std::size_t>>(),
                                           j.at("normalize").get<bool>());
    const auto& ws = j.at("weights");
    const auto& bs = j.at("biases");
    if (ws.size() != p.num_layers() || bs.size() != p.num_layers())
      throw ShapeError("checkpoint layer count does not match layer_dims");
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
      auto w = ws[l].get<std::vector<double>>();
      auto b = bs[l].get<Vector>();
      if (w.size() != p.weights[l].data.size() || b.size() != p.biases[l].size())
        throw ShapeError("checkpoint layer " + std::to_string(l) + " has the wrong size");
      p.weights[l].data = std::move(w);
      p.biases[l] = std::move(b);
    }
    if (!p.finite()) throw NumericError("checkpoint contains non-finite parameters");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const EncoderParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << to_json(p).dump(1) << '\n';
}

inline EncoderParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  return encoder_from_json(j);
}

}  // namespace mcnmt
