// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "exml/layers.hpp"
#include "exml/tensor.hpp"

namespace exml {

enum class ArchKind { Linear, Mlp, ConvNet };

/// Structural description of a network family plus its dimensions. The
/// canonical string form is the architecture_id persisted with every model.
struct ArchitectureSpec {
  ArchKind kind = ArchKind::Mlp;
  Shape input_shape{2};
  std::size_t hidden = 32;      // mlp only
  std::size_t channels1 = 8;    // convnet only
  std::size_t channels2 = 16;   // convnet only
  std::size_t num_classes = 10;

  friend bool operator==(const ArchitectureSpec&,
                         const ArchitectureSpec&) = default;

  std::string id() const {
    std::ostringstream os;
    switch (kind) {
      case ArchKind::Linear:
        os << "linear/in=" << join(input_shape);
        break;
      case ArchKind::Mlp:
        os << "mlp/in=" << join(input_shape) << "/hidden=" << hidden;
        break;
      case ArchKind::ConvNet:
        os << "convnet/in=" << join(input_shape) << "/ch=" << channels1 << ","
           << channels2;
        break;
    }
    os << "/classes=" << num_classes;
    return os.str();
  }

  static ArchitectureSpec parse_id(const std::string& id) {
    ArchitectureSpec spec;
    std::vector<std::string> parts;
    std::stringstream ss(id);
    for (std::string p; std::getline(ss, p, '/');) parts.push_back(p);
    if (parts.empty()) throw ArchitectureMismatchError("empty architecture id");
    if (parts[0] == "linear")
      spec.kind = ArchKind::Linear;
    else if (parts[0] == "mlp")
      spec.kind = ArchKind::Mlp;
    else if (parts[0] == "convnet")
      spec.kind = ArchKind::ConvNet;
    else
      throw ArchitectureMismatchError("unknown architecture family '" +
                                      parts[0] + "' in id '" + id + "'");
    try {
      for (std::size_t i = 1; i < parts.size(); ++i) {
        const auto eq = parts[i].find('=');
        if (eq == std::string::npos) throw std::invalid_argument(parts[i]);
        const std::string key = parts[i].substr(0, eq);
        const std::string val = parts[i].substr(eq + 1);
        if (key == "in") {
          spec.input_shape = split_dims(val, 'x');
        } else if (key == "hidden") {
          spec.hidden = std::stoul(val);
        } else if (key == "ch") {
          const auto ch = split_dims(val, ',');
          if (ch.size() != 2) throw std::invalid_argument(val);
          spec.channels1 = ch[0];
          spec.channels2 = ch[1];
        } else if (key == "classes") {
          spec.num_classes = std::stoul(val);
        } else {
          throw std::invalid_argument(key);
        }
      }
    } catch (const std::logic_error&) {
      throw ArchitectureMismatchError("malformed architecture id '" + id + "'");
    }
    if (spec.id() != id)
      throw ArchitectureMismatchError("non-canonical architecture id '" + id +
                                      "'");
    return spec;
  }

  bool is_image() const { return input_shape.size() == 3; }

 private:
  static std::string join(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    return out;
  }
  static Shape split_dims(const std::string& s, char sep) {
    Shape out;
    std::stringstream ss(s);
    for (std::string p; std::getline(ss, p, sep);) out.push_back(std::stoul(p));
    return out;
  }
};

template <class T>
using LayerVariant =
    std::variant<Linear<T>, Conv2d<T>, BatchNorm2d<T>, Relu<T>, Flatten<T>>;

/// Activations recorded by a forward pass, consumed by backward.
template <class T>
struct Tape {
  std::vector<LayerCache<T>> caches;
};

/// Normalization-layer statistics (running mean, running variance).
template <class T>
struct NormStat {
  Tensor<T> mean;
  Tensor<T> var;
};

/// A feed-forward classifier built from an ArchitectureSpec. Forward and
/// backward are const: they never touch parameters, so a model can be shared
/// read-only across threads.
template <class T>
class Model {
 public:
  Model() = default;

  /// Randomly initialized model, reproducible from the seed.
  static Model create(const ArchitectureSpec& spec, std::uint64_t seed) {
    Model m(spec);
    std::mt19937_64 rng(seed);
    for (auto& layer : m.layers_)
      std::visit([&](auto& l) { l.init(rng); }, layer);
    return m;
  }

  /// Model with every trainable parameter set to zero.
  static Model zeros(const ArchitectureSpec& spec) {
    Model m(spec);
    m.visit([](const std::string&, Tensor<T>& t, bool trainable) {
      if (trainable) t.fill(T(0));
    });
    return m;
  }

  const ArchitectureSpec& architecture() const { return spec_; }
  std::string architecture_id() const { return spec_.id(); }
  std::size_t num_classes() const { return spec_.num_classes; }
  const Shape& input_shape() const { return spec_.input_shape; }

  /// Visits every tensor as f(name, tensor, trainable) in a fixed order.
  template <class F>
  void visit(F&& f) {
    for (auto& layer : layers_)
      std::visit([&](auto& l) { l.visit(f); }, layer);
  }
  template <class F>
  void visit(F&& f) const {
    for (const auto& layer : layers_)
      std::visit([&](const auto& l) { l.visit(f); }, layer);
  }

  std::vector<Tensor<T>*> trainable_parameters() {
    std::vector<Tensor<T>*> out;
    visit([&](const std::string&, Tensor<T>& t, bool trainable) {
      if (trainable) out.push_back(&t);
    });
    return out;
  }

  /// Zero-filled gradient buffers matching trainable_parameters().
  std::vector<Tensor<T>> zero_gradients() const {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, const Tensor<T>& t, bool trainable) {
      if (trainable) out.emplace_back(t.shape());
    });
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode = Mode::Eval,
                    Tape<T>* tape = nullptr) const {
    check_input(x);
    Tape<T> local;
    Tape<T>& t = tape ? *tape : local;
    t.caches.assign(layers_.size(), LayerCache<T>{});
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      h = std::visit(
          [&](const auto& l) { return l.forward(h, t.caches[i], mode); },
          layers_[i]);
    return h;
  }

  /// Backpropagates grad_logits through the recorded tape and returns the
  /// gradient with respect to the model input. param_grads (optional) must
  /// come from zero_gradients() and is accumulated into. input_injections
  /// adds extra gradient at the input of the keyed layer index.
  Tensor<T> backward(const Tape<T>& tape, const Tensor<T>& grad_logits,
                     std::vector<Tensor<T>>* param_grads = nullptr,
                     const std::map<std::size_t, Tensor<T>>* input_injections =
                         nullptr) const {
    if (tape.caches.size() != layers_.size())
      throw InputContractError("tape does not belong to this model");
    std::vector<std::size_t> offsets = grad_offsets();
    Tensor<T> g = grad_logits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      std::span<Tensor<T>> grads;
      if (param_grads && offsets[i + 1] > offsets[i])
        grads = std::span<Tensor<T>>(param_grads->data() + offsets[i],
                                     offsets[i + 1] - offsets[i]);
      g = std::visit(
          [&](const auto& l) { return l.backward(g, tape.caches[i], grads); },
          layers_[i]);
      if (input_injections) {
        if (auto it = input_injections->find(i); it != input_injections->end())
          g += it->second;
      }
    }
    return g;
  }

  /// Folds the batch statistics of a Train-mode tape into running statistics.
  void update_running_stats(const Tape<T>& tape) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (auto* bn = std::get_if<BatchNorm2d<T>>(&layers_[i]))
        bn->update_running(tape.caches[i]);
  }

  /// Layer indices of normalization layers, in forward order.
  std::vector<std::size_t> norm_layer_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::holds_alternative<BatchNorm2d<T>>(layers_[i])) out.push_back(i);
    return out;
  }

  std::vector<NormStat<T>> norm_stats() const {
    std::vector<NormStat<T>> out;
    for (std::size_t i : norm_layer_indices()) {
      const auto& bn = std::get<BatchNorm2d<T>>(layers_[i]);
      out.push_back({bn.running_mean(), bn.running_var()});
    }
    return out;
  }

  void set_norm_stats(std::size_t k, const NormStat<T>& stat) {
    auto idx = norm_layer_indices().at(k);
    auto& bn = std::get<BatchNorm2d<T>>(layers_[idx]);
    bn.running_mean() = stat.mean;
    bn.running_var() = stat.var;
  }

  /// Rows w_k of the output layer, shape num_classes x hidden_dim.
  const Tensor<T>& classifier_weights() const {
    return std::get<Linear<T>>(layers_.back()).weight();
  }

  std::uint64_t parameter_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    visit([&](const std::string&, const Tensor<T>& t, bool) {
      h = content_hash(t, h);
    });
    return h;
  }

  friend bool same_parameters(const Model& a, const Model& b) {
    if (a.spec_ != b.spec_) return false;
    std::vector<const Tensor<T>*> ta, tb;
    a.visit([&](const std::string&, const Tensor<T>& t, bool) { ta.push_back(&t); });
    b.visit([&](const std::string&, const Tensor<T>& t, bool) { tb.push_back(&t); });
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (!(*ta[i] == *tb[i])) return false;
    return true;
  }

 private:
  explicit Model(const ArchitectureSpec& spec) : spec_(spec) { build(); }

  void build() {
    const std::size_t K = spec_.num_classes;
    if (K == 0) throw InputContractError("num_classes must be positive");
    switch (spec_.kind) {
      case ArchKind::Linear: {
        if (spec_.input_shape.size() != 1)
          throw InputContractError("linear expects a vector input shape");
        layers_.emplace_back(Linear<T>("fc", spec_.input_shape[0], K));
        break;
      }
      case ArchKind::Mlp: {
        if (spec_.input_shape.size() != 1)
          throw InputContractError("mlp expects a vector input shape");
        layers_.emplace_back(Linear<T>("fc1", spec_.input_shape[0], spec_.hidden));
        layers_.emplace_back(Relu<T>{});
        layers_.emplace_back(Linear<T>("fc2", spec_.hidden, K));
        break;
      }
      case ArchKind::ConvNet: {
        if (spec_.input_shape.size() != 3)
          throw InputContractError("convnet expects a CxHxW input shape");
        const std::size_t C = spec_.input_shape[0], H = spec_.input_shape[1],
                          W = spec_.input_shape[2];
        Conv2d<T> conv1("conv1", C, spec_.channels1, 3, 1, 1);
        Conv2d<T> conv2("conv2", spec_.channels1, spec_.channels2, 3, 2, 1);
        const std::size_t flat =
            spec_.channels2 * conv2.out_extent(H) * conv2.out_extent(W);
        layers_.emplace_back(std::move(conv1));
        layers_.emplace_back(BatchNorm2d<T>("bn1", spec_.channels1));
        layers_.emplace_back(Relu<T>{});
        layers_.emplace_back(std::move(conv2));
        layers_.emplace_back(Relu<T>{});
        layers_.emplace_back(Flatten<T>{});
        layers_.emplace_back(Linear<T>("fc", flat, K));
        break;
      }
    }
  }

  void check_input(const Tensor<T>& x) const {
    const Shape& s = x.shape();
    bool ok = s.size() == spec_.input_shape.size() + 1;
    for (std::size_t i = 0; ok && i < spec_.input_shape.size(); ++i)
      ok = s[i + 1] == spec_.input_shape[i];
    if (!ok)
      throw InputContractError("input batch " + shape_str(s) +
                               " does not match architecture input " +
                               shape_str(spec_.input_shape) + " (" +
                               spec_.id() + ")");
  }

  std::vector<std::size_t> grad_offsets() const {
    std::vector<std::size_t> offsets{0};
    for (const auto& layer : layers_) {
      std::size_t n = 0;
      std::visit(
          [&](const auto& l) {
            l.visit([&](const std::string&, const Tensor<T>&, bool trainable) {
              n += trainable ? 1 : 0;
            });
          },
          layer);
      offsets.push_back(offsets.back() + n);
    }
    return offsets;
  }

  ArchitectureSpec spec_;
  std::vector<LayerVariant<T>> layers_;
};

/// The continually consolidated student and the classes it has absorbed.
template <class T>
struct ExModel {
  Model<T> net;
  std::set<int> seen_classes;
};

}  // namespace exml
