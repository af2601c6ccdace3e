#include "batchrx/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace batchrx::nn {

namespace {

constexpr char kMagic[8] = {'B', 'A', 'T', 'C', 'H', 'R', 'X', 'P'};

void fill_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
}

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&v, bytes, sizeof(T));
  }
  return v;
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "linear";
}

Activation activation_from_string(const std::string& s) {
  if (s == "linear") return Activation::linear;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

Var activate(Var x, Activation a) {
  switch (a) {
    case Activation::linear: return x;
    case Activation::tanh: return ad::tanh(x);
    case Activation::relu: return ad::relu(x);
    case Activation::sigmoid: return ad::sigmoid(x);
  }
  return x;
}

// ---- DenseLayer -----------------------------------------------------------

DenseLayer::DenseLayer(std::size_t in, std::size_t out, Activation activation, std::mt19937_64& rng)
    : weight_({in, out}), bias_({1, out}, 0.0), activation_(activation) {
  fill_uniform(weight_, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

Var DenseLayer::forward(Tape& tape, Var x) const {
  if (x.value().cols() != in()) {
    throw ad::ShapeError("dense: input width " + std::to_string(x.value().cols()) + " != " + std::to_string(in()));
  }
  Var z = ad::add(ad::matmul(x, tape.parameter(weight_)), tape.parameter(bias_));
  return activate(z, activation_);
}

// ---- Mlp ------------------------------------------------------------------

nlohmann::json MlpSpec::to_json() const {
  return {{"type", "mlp"},
          {"input", input},
          {"hidden", hidden},
          {"output", output},
          {"hidden_activation", to_string(hidden_activation)},
          {"output_activation", to_string(output_activation)}};
}

Mlp::Mlp(const MlpSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.input == 0 || spec.output == 0) throw std::invalid_argument("mlp: input and output widths must be positive");
  std::mt19937_64 rng(seed);
  std::size_t width = spec.input;
  for (std::size_t h : spec.hidden) {
    layers_.emplace_back(width, h, spec.hidden_activation, rng);
    width = h;
  }
  layers_.emplace_back(width, spec.output, spec.output_activation, rng);
}

Var Mlp::forward(Tape& tape, Var x) const {
  for (const auto& layer : layers_) x = layer.forward(tape, x);
  return x;
}

std::vector<NamedTensor> Mlp::named_parameters(const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string base = prefix + "l" + std::to_string(i) + ".";
    out.push_back({base + "weight", &layers_[i].weight()});
    out.push_back({base + "bias", &layers_[i].bias()});
  }
  return out;
}

std::vector<Tensor*> Mlp::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers_) {
    out.push_back(&l.weight());
    out.push_back(&l.bias());
  }
  return out;
}

std::vector<const Tensor*> Mlp::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers_) {
    out.push_back(&l.weight());
    out.push_back(&l.bias());
  }
  return out;
}

// ---- LstmCell -------------------------------------------------------------

nlohmann::json LstmSpec::to_json() const { return {{"type", "lstm"}, {"input", input}, {"hidden", hidden}}; }

LstmCell::LstmCell(const LstmSpec& spec, std::uint64_t seed)
    : spec_(spec), weight_({spec.input + spec.hidden, 4 * spec.hidden}), bias_({1, 4 * spec.hidden}, 0.0) {
  if (spec.input == 0 || spec.hidden == 0) throw std::invalid_argument("lstm: widths must be positive");
  std::mt19937_64 rng(seed);
  // Each gate block is its own (input + hidden) -> hidden map for fan purposes.
  fill_uniform(weight_, std::sqrt(6.0 / static_cast<double>(spec.input + 2 * spec.hidden)), rng);
}

LstmCell::State LstmCell::zero_state(Tape& tape, std::size_t batch) const {
  return {tape.constant(Tensor({batch, spec_.hidden}, 0.0)), tape.constant(Tensor({batch, spec_.hidden}, 0.0))};
}

LstmCell::State LstmCell::step(Tape& tape, Var x, State prev) const {
  if (x.value().cols() != spec_.input) {
    throw ad::ShapeError("lstm: input width " + std::to_string(x.value().cols()) + " != " +
                         std::to_string(spec_.input));
  }
  const std::size_t h = spec_.hidden;
  Var z = ad::add(ad::matmul(ad::concat({x, prev.h}, 1), tape.parameter(weight_)), tape.parameter(bias_));
  Var in_gate = ad::sigmoid(ad::slice(z, 1, 0, h));
  Var forget_gate = ad::sigmoid(ad::slice(z, 1, h, 2 * h));
  Var out_gate = ad::sigmoid(ad::slice(z, 1, 2 * h, 3 * h));
  Var candidate = ad::tanh(ad::slice(z, 1, 3 * h, 4 * h));
  Var c = ad::add(ad::mul(forget_gate, prev.c), ad::mul(in_gate, candidate));
  Var hidden = ad::mul(out_gate, ad::tanh(c));
  return {hidden, c};
}

std::vector<NamedTensor> LstmCell::named_parameters(const std::string& prefix) {
  return {{prefix + "weight", &weight_}, {prefix + "bias", &bias_}};
}

std::vector<Tensor*> LstmCell::parameters() { return {&weight_, &bias_}; }
std::vector<const Tensor*> LstmCell::parameters() const { return {&weight_, &bias_}; }

Var lstm_unroll(Tape& tape, const LstmCell& cell, std::span<const Tensor> sequence) {
  if (sequence.empty()) throw std::invalid_argument("lstm_unroll: empty sequence");
  auto state = cell.zero_state(tape, sequence.front().rows());
  for (const Tensor& x : sequence) state = cell.step(tape, tape.constant(x), state);
  return state.h;
}

// ---- parameter files ------------------------------------------------------

void save_params(const std::filesystem::path& path, std::span<const NamedTensor> tensors,
                 const nlohmann::json& architecture, std::uint64_t seed) {
  nlohmann::json header;
  header["format"] = "bxp";
  header["version"] = kParamFormatVersion;
  header["architecture"] = architecture;
  header["seed"] = seed;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParamFileError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = to_little<std::uint64_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    for (double v : t.tensor->values()) {
      const double le = to_little(v);
      out.write(reinterpret_cast<const char*>(&le), sizeof(le));
    }
  }
  if (!out) throw ParamFileError("write failed for '" + path.string() + "'");
}

nlohmann::json load_params(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParamFileError("cannot open '" + path.string() + "'");
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParamFileError("'" + path.string() + "' is not a parameter file (bad magic)");
  }
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) throw ParamFileError("truncated header length");
  len = to_little(len);
  if (len > (std::uint64_t{1} << 30)) throw ParamFileError("implausible header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ParamFileError("truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParamFileError(std::string("corrupt header: ") + e.what());
  }
  if (header.value("format", "") != "bxp") throw ParamFileError("header format is not 'bxp'");
  if (header.value("version", -1) != kParamFormatVersion) {
    throw ParamFileError("unsupported parameter file version " + header.value("version", nlohmann::json()).dump());
  }
  const auto& entries = header.at("tensors");
  if (entries.size() != tensors.size()) {
    throw ParamFileError("shape mismatch: file holds " + std::to_string(entries.size()) + " tensors, expected " +
                         std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto name = entries[i].at("name").get<std::string>();
    const auto shape = entries[i].at("shape").get<Tensor::Shape>();
    if (name != tensors[i].name) {
      throw ParamFileError("shape mismatch: tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                           tensors[i].name + "'");
    }
    if (shape != tensors[i].tensor->shape()) {
      throw ParamFileError("shape mismatch for '" + name + "': file " + entries[i].at("shape").dump() +
                           ", expected " + tensors[i].tensor->shape_string());
    }
  }

  std::vector<std::vector<double>> staged;
  for (const auto& t : tensors) {
    std::vector<double> values(t.tensor->size());
    if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw ParamFileError("truncated data for '" + t.name + "'");
    }
    for (double& v : values) v = to_little(v);
    staged.push_back(std::move(values));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParamFileError("trailing bytes after tensor data");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    std::copy(staged[i].begin(), staged[i].end(), tensors[i].tensor->values().begin());
  }
  return header;
}

}  // namespace batchrx::nn
