#include "batchrx/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace batchrx::agent {

namespace {

constexpr double kLogSigmaMin = -4.0;
constexpr double kLogSigmaMax = 15.0;

nn::MlpSpec mlp_spec(const Hyperparameters& h, std::size_t input, std::size_t output, nn::Activation head) {
  nn::MlpSpec s;
  s.input = input;
  s.hidden.assign(h.mlp_layers, h.mlp_hidden);
  s.output = output;
  s.hidden_activation = nn::Activation::relu;
  s.output_activation = head;
  return s;
}

std::string source_name(CandidateSource s) { return s == CandidateSource::vae ? "vae" : "uniform"; }

CandidateSource source_from_name(const std::string& s) {
  if (s == "vae") return CandidateSource::vae;
  if (s == "uniform") return CandidateSource::uniform;
  throw std::invalid_argument("unknown candidate_source '" + s + "'");
}

Tensor rows_to_tensor(std::span<const std::span<const HistoryPair>> seqs, std::size_t step, std::size_t count) {
  Tensor x({count, kPairWidth});
  for (std::size_t i = 0; i < count; ++i) std::copy(seqs[i][step].begin(), seqs[i][step].end(), x.data() + i * kPairWidth);
  return x;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), t.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(t.data() + rows[i] * t.cols(), t.cols(), out.data() + i * t.cols());
  }
  return out;
}

std::vector<std::size_t> order_by_length_desc(std::span<const std::vector<HistoryPair>> seqs) {
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return seqs[a].size() > seqs[b].size(); });
  return order;
}

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite ") + what);
}

}  // namespace

// ---- Hyperparameters ------------------------------------------------------

void Hyperparameters::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("hyperparameters: " + m); };
  if (!(tau > 0.0 && tau <= 1.0)) fail("tau must lie in (0, 1]");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(max_perturbation >= 0.0)) fail("max_perturbation must be >= 0");
  if (n_candidates < 1) fail("n_candidates must be >= 1");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
  if (!(gamma > 0.0 && gamma < 1.0)) fail("gamma must lie in (0, 1)");
  if (!(lr_vae > 0.0 && lr_critic > 0.0 && lr_perturbation > 0.0)) fail("learning rates must be positive");
  if (latent_dim < 1) fail("latent_dim must be >= 1");
  if (!(latent_clip > 0.0)) fail("latent_clip must be positive");
  if (lstm_hidden < 1 || mlp_hidden < 1) fail("layer widths must be positive");
}

nlohmann::json Hyperparameters::to_json() const {
  return {{"tau", tau},
          {"batch_size", batch_size},
          {"max_perturbation", max_perturbation},
          {"n_candidates", n_candidates},
          {"lambda", lambda},
          {"epochs", epochs},
          {"gamma", gamma},
          {"lr_vae", lr_vae},
          {"lr_critic", lr_critic},
          {"lr_perturbation", lr_perturbation},
          {"latent_dim", latent_dim},
          {"latent_clip", latent_clip},
          {"lstm_hidden", lstm_hidden},
          {"mlp_hidden", mlp_hidden},
          {"mlp_layers", mlp_layers},
          {"candidate_source", source_name(candidate_source)},
          {"seed", seed}};
}

Hyperparameters Hyperparameters::from_json(const nlohmann::json& j) {
  Hyperparameters h;
  if (!j.is_object()) throw std::invalid_argument("hyperparameters: expected an object");
  const auto known = h.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("hyperparameters: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("tau", h.tau);
  get("batch_size", h.batch_size);
  get("max_perturbation", h.max_perturbation);
  get("n_candidates", h.n_candidates);
  get("lambda", h.lambda);
  get("epochs", h.epochs);
  get("gamma", h.gamma);
  get("lr_vae", h.lr_vae);
  get("lr_critic", h.lr_critic);
  get("lr_perturbation", h.lr_perturbation);
  get("latent_dim", h.latent_dim);
  get("latent_clip", h.latent_clip);
  get("lstm_hidden", h.lstm_hidden);
  get("mlp_hidden", h.mlp_hidden);
  get("mlp_layers", h.mlp_layers);
  get("seed", h.seed);
  if (j.contains("candidate_source")) h.candidate_source = source_from_name(j.at("candidate_source").get<std::string>());
  return h;
}

// ---- pure helpers ---------------------------------------------------------

Var vae_objective(Var reconstruction, Var target, Var mu, Var log_sigma) {
  const double rows = static_cast<double>(target.value().rows());
  Var recon = ad::sum(ad::square(ad::sub(reconstruction, target)));
  Var two_log_sigma = ad::scale(log_sigma, 2.0);
  Var kl_terms = ad::add_scalar(ad::sub(ad::add(ad::exp(two_log_sigma), ad::square(mu)), two_log_sigma), -1.0);
  Var kl = ad::scale(ad::sum(kl_terms), 0.5);
  return ad::scale(ad::add(recon, kl), 1.0 / rows);
}

double q_target(double reward, bool done, double gamma, double lambda, std::span<const double> q1_candidates,
                std::span<const double> q2_candidates) {
  if (done) return reward;
  if (q1_candidates.empty() || q1_candidates.size() != q2_candidates.size()) {
    throw std::invalid_argument("q_target: candidate value lists must be non-empty and equal length");
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < q1_candidates.size(); ++i) {
    const double lo = std::min(q1_candidates[i], q2_candidates[i]);
    const double hi = std::max(q1_candidates[i], q2_candidates[i]);
    best = std::max(best, lambda * lo + (1.0 - lambda) * hi);
  }
  return reward + gamma * best;
}

std::vector<std::size_t> argmax_per_group(std::span<const double> values, std::size_t n) {
  if (n == 0 || values.size() % n != 0) throw std::invalid_argument("argmax_per_group: size not a multiple of n");
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < values.size() / n; ++g) {
    const auto first = values.begin() + static_cast<std::ptrdiff_t>(g * n);
    out.push_back(static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(n)) - first));
  }
  return out;
}

void soft_update(std::span<const Tensor* const> main, std::span<Tensor* const> target, double tau) {
  if (main.size() != target.size()) throw ad::ShapeError("soft_update: parameter lists differ in length");
  for (std::size_t i = 0; i < main.size(); ++i) {
    if (main[i]->shape() != target[i]->shape()) throw ad::ShapeError("soft_update: block " + std::to_string(i));
  }
  for (std::size_t i = 0; i < main.size(); ++i) {
    auto m = main[i]->values();
    auto t = target[i]->values();
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = tau * m[k] + (1.0 - tau) * t[k];
  }
}

Tensor repeat_rows(const Tensor& t, std::size_t times) {
  Tensor out({t.rows() * times, t.cols()});
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t k = 0; k < times; ++k) {
      std::copy_n(t.data() + r * t.cols(), t.cols(), out.data() + (r * times + k) * t.cols());
    }
  }
  return out;
}

// ---- Agent ----------------------------------------------------------------

Agent::Agent(const Hyperparameters& hyper) : hyper_(hyper) {
  hyper_.validate();
  const std::size_t h = hyper_.lstm_hidden;
  const std::uint64_t seed = hyper_.seed;
  encoder_ = nn::LstmCell({kPairWidth, h}, derive_seed(seed, 101));
  vae_encoder_ = nn::Mlp(mlp_spec(hyper_, h + kActionDim, 2 * hyper_.latent_dim, nn::Activation::linear),
                         derive_seed(seed, 102));
  vae_decoder_ = nn::Mlp(mlp_spec(hyper_, h + hyper_.latent_dim, kActionDim, nn::Activation::tanh),
                         derive_seed(seed, 103));
  perturbation_ = nn::Mlp(mlp_spec(hyper_, h + kActionDim, kActionDim, nn::Activation::tanh), derive_seed(seed, 104));
  critic1_ = nn::Mlp(mlp_spec(hyper_, h + kActionDim, 1, nn::Activation::linear), derive_seed(seed, 105));
  critic2_ = nn::Mlp(mlp_spec(hyper_, h + kActionDim, 1, nn::Activation::linear), derive_seed(seed, 106));
  perturbation_target_ = perturbation_;
  critic1_target_ = critic1_;
  critic2_target_ = critic2_;
}

Var Agent::encode_sorted(Tape& tape, std::span<const std::span<const HistoryPair>> sequences,
                         std::span<const std::size_t> capture, Var* final_hidden) const {
  const std::size_t batch = sequences.size();
  if (batch == 0) throw std::invalid_argument("encode: empty batch");
  if (capture.size() != batch) throw std::invalid_argument("encode: capture list size differs from batch");
  for (std::size_t i = 0; i < batch; ++i) {
    if (sequences[i].empty()) throw std::invalid_argument("encode: empty history");
    if (i > 0 && sequences[i].size() > sequences[i - 1].size()) {
      throw std::invalid_argument("encode: sequences must be sorted by non-increasing length");
    }
    if (capture[i] < 1 || capture[i] > sequences[i].size()) throw std::invalid_argument("encode: capture out of range");
  }
  const std::size_t steps = sequences[0].size();
  auto state = encoder_.zero_state(tape, batch);
  std::vector<std::pair<std::size_t, Var>> pieces;
  for (std::size_t k = 0; k < steps; ++k) {
    std::size_t active = 0;
    while (active < batch && sequences[active].size() > k) ++active;
    Var x = tape.constant(rows_to_tensor(sequences, k, active));
    if (active == batch) {
      state = encoder_.step(tape, x, state);
    } else {
      auto next = encoder_.step(tape, x, {ad::slice(state.h, 0, 0, active), ad::slice(state.c, 0, 0, active)});
      state.h = ad::concat({next.h, ad::slice(state.h, 0, active, batch)}, 0);
      state.c = ad::concat({next.c, ad::slice(state.c, 0, active, batch)}, 0);
    }
    for (std::size_t i = 0; i < batch;) {
      if (capture[i] != k + 1) {
        ++i;
        continue;
      }
      std::size_t end = i;
      while (end < batch && capture[end] == k + 1) ++end;
      pieces.emplace_back(i, (i == 0 && end == batch) ? state.h : ad::slice(state.h, 0, i, end));
      i = end;
    }
  }
  if (final_hidden != nullptr) *final_hidden = state.h;
  std::sort(pieces.begin(), pieces.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  if (pieces.size() == 1) return pieces.front().second;
  std::vector<Var> parts;
  for (auto& p : pieces) parts.push_back(p.second);
  return ad::concat(parts, 0);
}

Var Agent::decode(Tape& tape, Var state, Var latent) const {
  return vae_decoder_.forward(tape, ad::concat({state, latent}, 1));
}

Var Agent::perturb(Tape& tape, const nn::Mlp& net, Var state, Var action, double phi) const {
  Var adjustment = ad::scale(net.forward(tape, ad::concat({state, action}, 1)), phi);
  return ad::clamp(ad::add(action, adjustment), -1.0, 1.0);
}

Var Agent::critic(Tape& tape, const nn::Mlp& net, Var state, Var action) const {
  return net.forward(tape, ad::concat({state, action}, 1));
}

Tensor Agent::encode(std::span<const std::vector<HistoryPair>> histories) const {
  const auto order = order_by_length_desc(histories);
  std::vector<std::span<const HistoryPair>> sorted;
  std::vector<std::size_t> capture;
  for (auto i : order) {
    sorted.emplace_back(histories[i]);
    capture.push_back(histories[i].size());
  }
  Tape tape(false);
  const Tensor& h = encode_sorted(tape, sorted, capture).value();
  Tensor out({histories.size(), hyper_.lstm_hidden});
  for (std::size_t p = 0; p < order.size(); ++p) {
    std::copy_n(h.data() + p * h.cols(), h.cols(), out.data() + order[p] * h.cols());
  }
  return out;
}

std::vector<Tensor> Agent::encode_all_steps(std::span<const std::vector<HistoryPair>> sequences) const {
  std::vector<Tensor> out;
  if (sequences.empty()) return out;
  const auto order = order_by_length_desc(sequences);
  std::vector<std::span<const HistoryPair>> sorted;
  for (auto i : order) {
    if (sequences[i].empty()) throw std::invalid_argument("encode_all_steps: empty sequence");
    sorted.emplace_back(sequences[i]);
  }
  const std::size_t batch = sorted.size();
  const std::size_t width = hyper_.lstm_hidden;
  for (const auto& s : sequences) out.emplace_back(Tensor::Shape{s.size(), width});
  Tape tape(false);
  auto state = encoder_.zero_state(tape, batch);
  for (std::size_t k = 0; k < sorted[0].size(); ++k) {
    std::size_t active = 0;
    while (active < batch && sorted[active].size() > k) ++active;
    Var x = tape.constant(rows_to_tensor(sorted, k, active));
    Var h = active == batch ? state.h : ad::slice(state.h, 0, 0, active);
    Var c = active == batch ? state.c : ad::slice(state.c, 0, 0, active);
    state = encoder_.step(tape, x, {h, c});
    const Tensor& hv = state.h.value();
    for (std::size_t p = 0; p < active; ++p) {
      std::copy_n(hv.data() + p * width, width, out[order[p]].data() + k * width);
    }
  }
  return out;
}

Tensor Agent::sample_actions(const Tensor& states, std::size_t n, Rng& rng, LatentMode mode) const {
  if (n == 0) throw std::invalid_argument("sample_actions: n must be >= 1");
  const std::size_t rows = states.rows() * n;
  if (hyper_.candidate_source == CandidateSource::uniform) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor out({rows, kActionDim});
    for (double& v : out.values()) v = u(rng);
    return out;
  }
  Tensor z({rows, hyper_.latent_dim}, 0.0);
  if (mode == LatentMode::sample) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : z.values()) v = std::clamp(normal(rng), -hyper_.latent_clip, hyper_.latent_clip);
  }
  Tape tape(false);
  return decode(tape, tape.constant(repeat_rows(states, n)), tape.constant(std::move(z))).value();
}

Tensor Agent::perturb_actions(const Tensor& states, const Tensor& actions, double phi, bool use_target) const {
  Tape tape(false);
  const nn::Mlp& net = use_target ? perturbation_target_ : perturbation_;
  return perturb(tape, net, tape.constant(states), tape.constant(actions), phi).value();
}

std::vector<double> Agent::q_values(const Tensor& states, const Tensor& actions, int which, bool use_target) const {
  const nn::Mlp* net = nullptr;
  if (which == 1) net = use_target ? &critic1_target_ : &critic1_;
  else if (which == 2) net = use_target ? &critic2_target_ : &critic2_;
  else throw std::invalid_argument("q_values: critic index must be 1 or 2");
  Tape tape(false);
  const Tensor& q = critic(tape, *net, tape.constant(states), tape.constant(actions)).value();
  return {q.values().begin(), q.values().end()};
}

Selection Agent::select_action(const Tensor& states, std::size_t n, double phi, Rng& rng, LatentMode mode) const {
  const Tensor candidates = sample_actions(states, n, rng, mode);
  const Tensor repeated = repeat_rows(states, n);
  const Tensor perturbed = perturb_actions(repeated, candidates, phi);
  const auto q = q_values(repeated, perturbed);
  const auto best = argmax_per_group(q, n);
  std::vector<std::size_t> rows(best.size());
  Selection sel;
  for (std::size_t i = 0; i < best.size(); ++i) {
    rows[i] = i * n + best[i];
    sel.q.push_back(q[rows[i]]);
  }
  sel.actions = gather_rows(perturbed, rows);
  return sel;
}

std::vector<nn::NamedTensor> Agent::named_parameters() {
  std::vector<nn::NamedTensor> out;
  auto append = [&](std::vector<nn::NamedTensor> v) { out.insert(out.end(), v.begin(), v.end()); };
  append(encoder_.named_parameters("encoder."));
  append(vae_encoder_.named_parameters("vae_encoder."));
  append(vae_decoder_.named_parameters("vae_decoder."));
  append(perturbation_.named_parameters("perturbation."));
  append(perturbation_target_.named_parameters("perturbation_target."));
  append(critic1_.named_parameters("critic1."));
  append(critic2_.named_parameters("critic2."));
  append(critic1_target_.named_parameters("critic1_target."));
  append(critic2_target_.named_parameters("critic2_target."));
  return out;
}

nlohmann::json Agent::architecture() const {
  return {{"type", "bcadrqn-agent"},
          {"encoder", encoder_.spec().to_json()},
          {"vae_encoder", vae_encoder_.spec().to_json()},
          {"vae_decoder", vae_decoder_.spec().to_json()},
          {"perturbation", perturbation_.spec().to_json()},
          {"critic", critic1_.spec().to_json()}};
}

void Agent::save(const std::filesystem::path& bxp) {
  nn::save_params(bxp, named_parameters(), architecture(), hyper_.seed);
}

void Agent::load(const std::filesystem::path& bxp) {
  Agent staged = *this;
  const auto header = nn::load_params(bxp, staged.named_parameters());
  if (header.at("architecture") != architecture()) {
    throw nn::ParamFileError("architecture mismatch: checkpoint " + header.at("architecture").dump() +
                             " vs expected " + architecture().dump());
  }
  *this = std::move(staged);
}

bool identical_parameters(Agent& a, Agent& b) {
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || !(*pa[i].tensor == *pb[i].tensor)) return false;
  }
  return true;
}

// ---- training -------------------------------------------------------------

nlohmann::json TrainingLog::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : epochs) {
    arr.push_back({{"vae_loss", e.vae_loss},
                   {"critic_loss", e.critic_loss},
                   {"perturbation_objective", e.perturbation_objective},
                   {"vae_grad_norm", e.vae_grad_norm},
                   {"critic_grad_norm", e.critic_grad_norm},
                   {"perturbation_grad_norm", e.perturbation_grad_norm}});
  }
  return {{"epochs", arr}};
}

namespace {

std::vector<Tensor*> concat_params(std::initializer_list<std::vector<Tensor*>> groups) {
  std::vector<Tensor*> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

}  // namespace

Trainer::Trainer(Agent& agent)
    : agent_(agent),
      vae_opt_(concat_params({agent.encoder().parameters(), agent.vae_encoder().parameters(),
                              agent.vae_decoder().parameters()}),
               {.learning_rate = agent.hyper().lr_vae}),
      critic_opt_(concat_params({agent.critic1().parameters(), agent.critic2().parameters()}),
                  {.learning_rate = agent.hyper().lr_critic}),
      perturbation_opt_(agent.perturbation().parameters(), {.learning_rate = agent.hyper().lr_perturbation}) {}

EncodedBatch Trainer::vae_update(std::vector<TransitionSample> batch, Rng& rng, EpochLog& log) {
  const auto& hp = agent_.hyper();
  std::stable_sort(batch.begin(), batch.end(),
                   [](const TransitionSample& a, const TransitionSample& b) { return a.sequence.size() > b.sequence.size(); });
  const std::size_t n = batch.size();
  std::vector<std::span<const HistoryPair>> seqs;
  std::vector<std::size_t> capture;
  EncodedBatch out;
  out.actions = Tensor({n, kActionDim});
  for (std::size_t i = 0; i < n; ++i) {
    seqs.emplace_back(batch[i].sequence);
    capture.push_back(batch[i].prefix_length);
    std::copy(batch[i].action.begin(), batch[i].action.end(), out.actions.data() + i * kActionDim);
    out.rewards.push_back(batch[i].reward);
    out.done.push_back(batch[i].done);
  }
  Tensor eps({n, hp.latent_dim});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : eps.values()) v = normal(rng);

  Tape tape;
  Var next_state;
  Var state = agent_.encode_sorted(tape, seqs, capture, &next_state);
  Var action = tape.constant(out.actions);
  Var enc = agent_.vae_encoder().forward(tape, ad::concat({state, action}, 1));
  Var mu = ad::slice(enc, 1, 0, hp.latent_dim);
  Var log_sigma = ad::clamp(ad::slice(enc, 1, hp.latent_dim, 2 * hp.latent_dim), kLogSigmaMin, kLogSigmaMax);
  Var z = ad::add(mu, ad::mul(ad::exp(log_sigma), tape.constant(std::move(eps))));
  Var loss = vae_objective(agent_.decode(tape, state, z), action, mu, log_sigma);
  log.vae_loss = loss.value().item();
  require_finite(log.vae_loss, "VAE loss");
  out.states = state.value();
  out.next_states = next_state.value();
  tape.backward(loss);
  log.vae_grad_norm = vae_opt_.step(tape);
  return out;
}

std::vector<double> Trainer::compute_targets(const EncodedBatch& batch, Rng& rng) const {
  const auto& hp = agent_.hyper();
  const std::size_t n = hp.n_candidates;
  const Tensor candidates = agent_.sample_actions(batch.next_states, n, rng);
  const Tensor repeated = repeat_rows(batch.next_states, n);
  const Tensor perturbed = agent_.perturb_actions(repeated, candidates, hp.max_perturbation, true);
  const auto q1 = agent_.q_values(repeated, perturbed, 1, true);
  const auto q2 = agent_.q_values(repeated, perturbed, 2, true);
  std::vector<double> y(batch.rewards.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = q_target(batch.rewards[i], batch.done[i], hp.gamma, hp.lambda, std::span(q1).subspan(i * n, n),
                    std::span(q2).subspan(i * n, n));
  }
  return y;
}

double Trainer::critic_update(const EncodedBatch& batch, std::span<const double> targets, EpochLog& log) {
  Tape tape;
  Var s = tape.constant(batch.states);
  Var a = tape.constant(batch.actions);
  Var y = tape.constant(Tensor({targets.size(), 1}, std::vector<double>(targets.begin(), targets.end())));
  Var q1 = agent_.critic(tape, agent_.critic1(), s, a);
  Var q2 = agent_.critic(tape, agent_.critic2(), s, a);
  Var loss = ad::add(ad::mean(ad::square(ad::sub(y, q1))), ad::mean(ad::square(ad::sub(y, q2))));
  log.critic_loss = loss.value().item();
  require_finite(log.critic_loss, "critic loss");
  tape.backward(loss);
  log.critic_grad_norm = critic_opt_.step(tape);
  return log.critic_loss;
}

double Trainer::perturbation_update(const EncodedBatch& batch, Rng& rng, EpochLog& log, const CriticFn& critic) {
  const auto& hp = agent_.hyper();
  const Tensor sampled = agent_.sample_actions(batch.states, 1, rng);
  Tape tape;
  const auto frozen = agent_.critic1().parameters();
  tape.freeze(std::vector<const Tensor*>(frozen.begin(), frozen.end()));
  Var s = tape.constant(batch.states);
  Var a = agent_.perturb(tape, agent_.perturbation(), s, tape.constant(sampled), hp.max_perturbation);
  Var q = critic ? critic(tape, s, a) : agent_.critic(tape, agent_.critic1(), s, a);
  Var objective = ad::mean(q);
  log.perturbation_objective = objective.value().item();
  require_finite(log.perturbation_objective, "perturbation objective");
  tape.backward(ad::scale(objective, -1.0));
  log.perturbation_grad_norm = perturbation_opt_.step(tape);
  return log.perturbation_objective;
}

void Trainer::soft_update_targets() {
  const double tau = agent_.hyper().tau;
  auto update = [tau](const nn::Mlp& main, nn::Mlp& target) {
    const auto m = main.parameters();
    soft_update(m, target.parameters(), tau);
  };
  const Agent& view = agent_;
  update(view.perturbation(), agent_.perturbation_target());
  update(view.critic1(), agent_.critic1_target());
  update(view.critic2(), agent_.critic2_target());
}

EpochLog Trainer::step(const RecordsBuffer& buffer, Rng& rng, std::size_t epoch) {
  EpochLog log;
  try {
    EncodedBatch batch = vae_update(buffer.sample_minibatch(agent_.hyper().batch_size, rng), rng, log);
    const auto targets = compute_targets(batch, rng);
    critic_update(batch, targets, log);
    perturbation_update(batch, rng, log);
    soft_update_targets();
  } catch (const NonFiniteLoss& e) {
    throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch), epoch);
  } catch (const ad::NonFiniteGradient& e) {
    throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch), epoch);
  }
  return log;
}

TrainResult train(const RecordsBuffer& buffer, const Hyperparameters& hyper, const ProgressFn& progress) {
  hyper.validate();
  if (buffer.empty()) throw std::invalid_argument("train: empty records buffer");
  TrainResult result{Agent(hyper), {}};
  if (hyper.epochs == 0) return result;
  Trainer trainer(result.agent);
  Rng rng(derive_seed(hyper.seed, 1));
  result.log.epochs.reserve(hyper.epochs);
  for (std::size_t m = 0; m < hyper.epochs; ++m) {
    result.log.epochs.push_back(trainer.step(buffer, rng, m));
    if (progress) progress(m, result.log.epochs.back());
  }
  return result;
}

}  // namespace batchrx::agent
