#pragma once

// Dense layers, multi-layer perceptrons and an LSTM cell built on the tape,
// plus the `.bxp` parameter container.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "batchrx/autodiff.hpp"

namespace batchrx::nn {

using ad::Tape;
using ad::Tensor;
using ad::Var;

enum class Activation { linear, tanh, relu, sigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);
Var activate(Var x, Activation a);

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// y = act(x W + b). The weight is stored input-major ([in, out]) so a batch
/// of row vectors multiplies it directly.
class DenseLayer {
 public:
  DenseLayer(std::size_t in, std::size_t out, Activation activation, std::mt19937_64& rng);

  Var forward(Tape& tape, Var x) const;

  std::size_t in() const { return weight_.rows(); }
  std::size_t out() const { return weight_.cols(); }
  Activation activation() const { return activation_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
  Activation activation_;
};

struct MlpSpec {
  std::size_t input = 0;
  std::vector<std::size_t> hidden;
  std::size_t output = 0;
  Activation hidden_activation = Activation::relu;
  Activation output_activation = Activation::linear;

  nlohmann::json to_json() const;
  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(const MlpSpec& spec, std::uint64_t seed);

  Var forward(Tape& tape, Var x) const;

  const MlpSpec& spec() const { return spec_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<NamedTensor> named_parameters(const std::string& prefix = "");
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;

 private:
  MlpSpec spec_;
  std::vector<DenseLayer> layers_;
};

struct LstmSpec {
  std::size_t input = 0;
  std::size_t hidden = 0;

  nlohmann::json to_json() const;
  friend bool operator==(const LstmSpec&, const LstmSpec&) = default;
};

/// Gate weights are fused into one [input + hidden, 4 * hidden] matrix in the
/// order input, forget, output, candidate.
class LstmCell {
 public:
  struct State {
    Var h;
    Var c;
  };

  LstmCell() = default;
  LstmCell(const LstmSpec& spec, std::uint64_t seed);

  State zero_state(Tape& tape, std::size_t batch) const;
  State step(Tape& tape, Var x, State prev) const;

  const LstmSpec& spec() const { return spec_; }
  std::size_t hidden() const { return spec_.hidden; }
  std::vector<NamedTensor> named_parameters(const std::string& prefix = "");
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;

 private:
  LstmSpec spec_;
  Tensor weight_;
  Tensor bias_;
};

/// Runs the cell over `sequence` (each element [batch, input]) from a zero
/// state and returns the final hidden state.
Var lstm_unroll(Tape& tape, const LstmCell& cell, std::span<const Tensor> sequence);

// ---- parameter files ------------------------------------------------------

class ParamFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kParamFormatVersion = 1;

/// Writes magic "BATCHRXP", a little-endian u64 header length, a JSON header
/// (version, architecture, seed, tensor names and shapes) and the raw
/// little-endian doubles of every tensor in header order.
void save_params(const std::filesystem::path& path, std::span<const NamedTensor> tensors,
                 const nlohmann::json& architecture, std::uint64_t seed);

/// Reads a file written by save_params into `tensors`. Names, order and shapes
/// must match; nothing is modified unless the whole file validates.
nlohmann::json load_params(const std::filesystem::path& path, std::span<const NamedTensor> tensors);

}  // namespace batchrx::nn
