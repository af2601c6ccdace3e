#pragma once

// Batch-constrained recurrent agent: LSTM history encoder, conditional VAE
// over clinician actions, bounded perturbation actor and twin critics with
// target copies.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "batchrx/autodiff.hpp"
#include "batchrx/buffer.hpp"
#include "batchrx/nn.hpp"
#include "batchrx/rng.hpp"

namespace batchrx::agent {

using ad::Tape;
using ad::Tensor;
using ad::Var;

inline constexpr std::size_t kActionDim = cohort::kActionCount;

/// Where candidate actions come from. `uniform` bypasses the generative model
/// (the unconstrained ablation).
enum class CandidateSource { vae, uniform };

struct Hyperparameters {
  double tau = 0.005;
  std::size_t batch_size = 64;
  double max_perturbation = 0.05;
  std::size_t n_candidates = 10;
  double lambda = 0.75;
  std::size_t epochs = 10000;
  double gamma = 0.99;
  double lr_vae = 1e-3;
  double lr_critic = 1e-3;
  double lr_perturbation = 1e-4;
  std::size_t latent_dim = 10;
  double latent_clip = 0.5;
  std::size_t lstm_hidden = 64;
  std::size_t mlp_hidden = 128;
  std::size_t mlp_layers = 2;
  CandidateSource candidate_source = CandidateSource::vae;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static Hyperparameters from_json(const nlohmann::json& j);
  friend bool operator==(const Hyperparameters&, const Hyperparameters&) = default;
};

enum class LatentMode { sample, zero };

struct Selection {
  Tensor actions;          // [B, 5] normalized
  std::vector<double> q;   // Q_theta1 of each chosen action
};

/// Sum of squared reconstruction error plus KL(N(mu, sigma) || N(0, 1)),
/// averaged over batch rows. KL per dimension: 0.5 (sigma^2 + mu^2 - 1 - 2 ln sigma).
Var vae_objective(Var reconstruction, Var target, Var mu, Var log_sigma);

/// r if done, else r + gamma * max_i [lambda * min_j Q'_j + (1 - lambda) * max_j Q'_j]
/// over candidates i.
double q_target(double reward, bool done, double gamma, double lambda, std::span<const double> q1_candidates,
                std::span<const double> q2_candidates);

/// Index of the best candidate within each consecutive group of `n`.
std::vector<std::size_t> argmax_per_group(std::span<const double> values, std::size_t n);

/// target <- tau * main + (1 - tau) * target for every tensor.
void soft_update(std::span<const Tensor* const> main, std::span<Tensor* const> target, double tau);

/// Repeats every row of `t` `times` times consecutively.
Tensor repeat_rows(const Tensor& t, std::size_t times);

class Agent {
 public:
  explicit Agent(const Hyperparameters& hyper);

  const Hyperparameters& hyper() const { return hyper_; }
  std::size_t state_dim() const { return hyper_.lstm_hidden; }

  // ---- tape-level building blocks ----
  /// Encodes sequences sorted by non-increasing length; returns the hidden
  /// state after `capture[i]` steps for each row (same row order).
  Var encode_sorted(Tape& tape, std::span<const std::span<const HistoryPair>> sequences,
                    std::span<const std::size_t> capture, Var* final_hidden = nullptr) const;
  Var decode(Tape& tape, Var state, Var latent) const;
  Var perturb(Tape& tape, const nn::Mlp& net, Var state, Var action, double phi) const;
  Var critic(Tape& tape, const nn::Mlp& net, Var state, Var action) const;

  // ---- value-level inference ----
  /// Final embedding of each history (any order, any lengths).
  Tensor encode(std::span<const std::vector<HistoryPair>> histories) const;
  /// Embedding after every step of each sequence: result[i] is [len_i, H].
  std::vector<Tensor> encode_all_steps(std::span<const std::vector<HistoryPair>> sequences) const;
  /// n candidates per state row (rows grouped by state): [B * n, 5].
  Tensor sample_actions(const Tensor& states, std::size_t n, Rng& rng, LatentMode mode = LatentMode::sample) const;
  Tensor perturb_actions(const Tensor& states, const Tensor& actions, double phi, bool use_target = false) const;
  std::vector<double> q_values(const Tensor& states, const Tensor& actions, int which = 1, bool use_target = false) const;
  Selection select_action(const Tensor& states, std::size_t n, double phi, Rng& rng,
                          LatentMode mode = LatentMode::sample) const;

  // ---- parameters ----
  nn::LstmCell& encoder() { return encoder_; }
  nn::Mlp& vae_encoder() { return vae_encoder_; }
  nn::Mlp& vae_decoder() { return vae_decoder_; }
  nn::Mlp& perturbation() { return perturbation_; }
  nn::Mlp& perturbation_target() { return perturbation_target_; }
  nn::Mlp& critic1() { return critic1_; }
  nn::Mlp& critic2() { return critic2_; }
  nn::Mlp& critic1_target() { return critic1_target_; }
  nn::Mlp& critic2_target() { return critic2_target_; }
  const nn::Mlp& critic1() const { return critic1_; }
  const nn::Mlp& critic2() const { return critic2_; }
  const nn::Mlp& critic1_target() const { return critic1_target_; }
  const nn::Mlp& critic2_target() const { return critic2_target_; }
  const nn::Mlp& perturbation() const { return perturbation_; }
  const nn::Mlp& perturbation_target() const { return perturbation_target_; }
  const nn::Mlp& vae_encoder() const { return vae_encoder_; }
  const nn::Mlp& vae_decoder() const { return vae_decoder_; }
  const nn::LstmCell& encoder() const { return encoder_; }

  std::vector<nn::NamedTensor> named_parameters();
  nlohmann::json architecture() const;

  void save(const std::filesystem::path& bxp) ;
  /// Throws nn::ParamFileError when the file does not match this architecture.
  void load(const std::filesystem::path& bxp);

 private:
  Hyperparameters hyper_;
  nn::LstmCell encoder_;
  nn::Mlp vae_encoder_;
  nn::Mlp vae_decoder_;
  nn::Mlp perturbation_;
  nn::Mlp perturbation_target_;
  nn::Mlp critic1_;
  nn::Mlp critic2_;
  nn::Mlp critic1_target_;
  nn::Mlp critic2_target_;
};

bool identical_parameters(Agent& a, Agent& b);

// ---- training -------------------------------------------------------------

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

struct EpochLog {
  double vae_loss = 0.0;
  double critic_loss = 0.0;
  double perturbation_objective = 0.0;
  double vae_grad_norm = 0.0;
  double critic_grad_norm = 0.0;
  double perturbation_grad_norm = 0.0;
};

struct TrainingLog {
  std::vector<EpochLog> epochs;
  nlohmann::json to_json() const;
};

/// A minibatch after history encoding. Embeddings are constants for the
/// critic and perturbation updates.
struct EncodedBatch {
  Tensor states;       // [N, H]
  Tensor next_states;  // [N, H]
  Tensor actions;      // [N, 5]
  std::vector<double> rewards;
  std::vector<bool> done;
};

/// Stand-in for Q_theta1 in perturbation_update tests.
using CriticFn = std::function<Var(Tape&, Var state, Var action)>;

class Trainer {
 public:
  explicit Trainer(Agent& agent);

  /// Encodes the batch, takes one Adam step on the VAE and encoder jointly,
  /// and returns the embeddings computed before the step.
  EncodedBatch vae_update(std::vector<TransitionSample> batch, Rng& rng, EpochLog& log);
  std::vector<double> compute_targets(const EncodedBatch& batch, Rng& rng) const;
  double critic_update(const EncodedBatch& batch, std::span<const double> targets, EpochLog& log);
  /// One ascent step on mean Q1(s, perturb(s, a)) w.r.t. the perturbation
  /// net, with a resampled from the generative model. Returns the objective
  /// before the step.
  double perturbation_update(const EncodedBatch& batch, Rng& rng, EpochLog& log, const CriticFn& critic = {});
  void soft_update_targets();

  EpochLog step(const RecordsBuffer& buffer, Rng& rng, std::size_t epoch);

 private:
  Agent& agent_;
  ad::Adam vae_opt_;
  ad::Adam critic_opt_;
  ad::Adam perturbation_opt_;
};

struct TrainResult {
  Agent agent;
  TrainingLog log;
};

using ProgressFn = std::function<void(std::size_t epoch, const EpochLog&)>;

/// Runs `hyper.epochs` minibatch epochs; deterministic given hyper.seed.
TrainResult train(const RecordsBuffer& buffer, const Hyperparameters& hyper, const ProgressFn& progress = {});

}  // namespace batchrx::agent
