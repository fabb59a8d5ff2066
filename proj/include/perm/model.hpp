#pragma once

// Variational response model over student ability and level difficulty.
//
// Generative side:  a, d ~ N(0, I)
//                   r | a, d ~ N(w^T (a - d), sigma^2),  w >= 0
//                   lambda | d: spike-density logit ~ N(f(d), 0.5^2),
//                               heights scored by cross-entropy against softmax(g(d))
// Inference side:   q(d | r, lambda) q(a | d, r, lambda), both diagonal Normal.
//
// Because the response mean is w^T (a - d), a student matched to a level
// (a = d) has expected normalized score exactly 0, i.e. even odds of over- or
// under-performing. Level generation exploits this by decoding lambda at d = a.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "perm/dense.hpp"
#include "perm/error.hpp"
#include "perm/irt.hpp"
#include "perm/jumper.hpp"
#include "perm/random.hpp"

namespace perm {

inline constexpr int kModelFormatVersion = 1;
inline constexpr int kLevelFeatureCount = 5;
inline constexpr double kSpikeLogitSd = 0.5;
inline constexpr double kSpikeTargetClamp = 0.005;
inline constexpr double kLogVarMin = -12.0;
inline constexpr double kLogVarMax = 8.0;
inline constexpr double kGeneratedSpikeMin = 0.01;
inline constexpr double kGeneratedSpikeMax = 0.95;

struct TrainConfig {
  int latent_dim = 1;
  std::vector<int> hidden = {64, 64};
  double learning_rate = 1e-3;
  int batch_size = 128;
  int epochs = 100;
  double kl_weight = 1.0;            // final KL weight
  double kl_anneal_fraction = 0.2;   // share of epochs spent ramping 0 -> kl_weight
  int window = 5;                    // K recent interactions used for ability
  std::uint64_t seed = 0;
  // Response noise sd held fixed during training; unset means it is learned.
  // A learned sd tends to swallow the reward signal and collapse ability.
  std::optional<double> response_sd = 0.3;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidArgument, m); };
    if (latent_dim <= 0) fail("latent_dim must be positive");
    if (hidden.empty()) fail("hidden must list at least one layer");
    for (int h : hidden) {
      if (h <= 0) fail("hidden sizes must be positive");
    }
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (batch_size <= 0) fail("batch_size must be positive");
    if (epochs <= 0) fail("epochs must be positive");
    if (!(kl_weight >= 0.0 && kl_weight <= 1.0)) fail("kl_weight must lie in [0, 1]");
    if (!(kl_anneal_fraction >= 0.0 && kl_anneal_fraction <= 1.0)) {
      fail("kl_anneal_fraction must lie in [0, 1]");
    }
    if (window <= 0) fail("window must be positive");
    if (response_sd && !(*response_sd > 0.0 && std::isfinite(*response_sd))) {
      fail("response_sd must be positive");
    }
  }

  // Linear ramp from 0 over the first kl_anneal_fraction of epochs.
  double kl_weight_at(int epoch) const {
    const double ramp = kl_anneal_fraction * epochs;
    if (ramp <= 0.0) return kl_weight;
    return kl_weight * std::min(1.0, epoch / ramp);
  }
};

/// One (level parameters, normalized response) observation.
struct ResponseSample {
  LevelParams params;
  double response = 0.0;
};

struct LatentPosterior {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_var;

  Eigen::Index dim() const { return mean.size(); }
  Eigen::VectorXd variance() const { return log_var.array().exp().matrix(); }

  static LatentPosterior standard(Eigen::Index n) {
    return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  }
};

struct ResponseDistribution {
  double mean = 0.0;
  double sd = 1.0;
};

/// Decoder output before squashing.
struct LevelDistribution {
  double spike_logit_mean = 0.0;
  std::array<double, 4> height_logits{};
};

/// Per-record averages of the four bound components.
struct ElboBreakdown {
  double recon_r = 0.0;
  double recon_lambda = 0.0;
  double kl_a_term = 0.0;  // E_q[log p(a) - log q(a|...)] = -KL, <= 0
  double kl_d_term = 0.0;
  double total = 0.0;
};

enum class GenerationMode { kMean, kSample };

/// How the raw response-head parameters map to w. Deployed models use
/// kSoftplus (w >= 0). Training runs with kSigned so either latent orientation
/// can be reached, then canonicalize() reflects dimensions with w < 0.
enum class ResponseHead { kSoftplus, kSigned };

/// Standard-normal noise used by the reparameterization, one column per record.
struct ElboNoise {
  Eigen::MatrixXd difficulty;
  Eigen::MatrixXd ability;

  static ElboNoise draw(Eigen::Index latent_dim, Eigen::Index batch, Rng& rng) {
    ElboNoise e{Eigen::MatrixXd(latent_dim, batch), Eigen::MatrixXd(latent_dim, batch)};
    for (Eigen::Index j = 0; j < batch; ++j) {
      for (Eigen::Index i = 0; i < latent_dim; ++i) e.difficulty(i, j) = rng.normal();
    }
    for (Eigen::Index j = 0; j < batch; ++j) {
      for (Eigen::Index i = 0; i < latent_dim; ++i) e.ability(i, j) = rng.normal();
    }
    return e;
  }
};

inline std::array<double, kLevelFeatureCount> level_features(const LevelParams& p) {
  return {p.spike_density - 0.5, p.height_probs[0] - 0.25, p.height_probs[1] - 0.25,
          p.height_probs[2] - 0.25, p.height_probs[3] - 0.25};
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline double spike_target_logit(double spike_density) {
  return logit(std::clamp(spike_density, kSpikeTargetClamp, 1.0 - kSpikeTargetClamp));
}

class PermModel;

/// Gradient of the batch-mean objective, laid out like the model parameters.
struct PermGradients {
  DenseNet enc_d, enc_a, dec_lambda;
  Eigen::VectorXd response_weight_raw;
  double log_response_sd = 0.0;

  std::vector<double> flatten() const {
    std::vector<double> out;
    enc_d.append_parameters(out);
    enc_a.append_parameters(out);
    dec_lambda.append_parameters(out);
    out.insert(out.end(), response_weight_raw.data(),
               response_weight_raw.data() + response_weight_raw.size());
    out.push_back(log_response_sd);
    return out;
  }
};

struct ElboEvaluation {
  ElboBreakdown breakdown;  // unweighted components
  double objective = 0.0;   // recon_r + recon_lambda + kl_weight * (kl_a + kl_d)
};

class PermModel {
 public:
  PermModel() = default;

  /// Fresh, untrained model with Glorot-initialized networks.
  static PermModel initialize(const TrainConfig& config, const Normalizer& normalizer) {
    config.validate();
    PermModel m;
    m.config_ = config;
    m.normalizer_ = normalizer;
    Rng rng(derive_seed(config.seed, 0x1417));
    const int n = config.latent_dim;
    auto sizes = [&](int in, int out) {
      std::vector<int> s{in};
      s.insert(s.end(), config.hidden.begin(), config.hidden.end());
      s.push_back(out);
      return s;
    };
    const auto sd = sizes(1 + kLevelFeatureCount, 2 * n);
    const auto sa = sizes(n + 1 + kLevelFeatureCount, 2 * n);
    const auto sl = sizes(n, 1 + 4);
    m.enc_d_ = DenseNet::glorot(sd, rng);
    m.enc_a_ = DenseNet::glorot(sa, rng);
    m.dec_lambda_ = DenseNet::glorot(sl, rng);
    // softplus(0.5413) = 1: unit response weight per latent dimension.
    m.response_weight_raw_ = Eigen::VectorXd::Constant(n, 0.5413248546129181);
    m.log_response_sd_ = 0.0;
    return m;
  }

  /// Assemble from stored parts (checkpoint loading).
  static PermModel from_parts(TrainConfig config, Normalizer normalizer, DenseNet enc_d,
                              DenseNet enc_a, DenseNet dec_lambda,
                              Eigen::VectorXd response_weight_raw, double log_response_sd,
                              bool trained, ResponseHead head = ResponseHead::kSoftplus) {
    config.validate();
    const Eigen::Index n = config.latent_dim;
    auto check = [](bool ok, const char* m) {
      if (!ok) throw Error(ErrorCode::kDimensionMismatch, m);
    };
    check(enc_d.input_size() == 1 + kLevelFeatureCount && enc_d.output_size() == 2 * n,
          "difficulty encoder shape does not match latent_dim");
    check(enc_a.input_size() == n + 1 + kLevelFeatureCount && enc_a.output_size() == 2 * n,
          "ability encoder shape does not match latent_dim");
    check(dec_lambda.input_size() == n && dec_lambda.output_size() == 5,
          "level decoder shape does not match latent_dim");
    check(response_weight_raw.size() == n, "response weights do not match latent_dim");
    PermModel m;
    m.config_ = std::move(config);
    m.normalizer_ = normalizer;
    m.enc_d_ = std::move(enc_d);
    m.enc_a_ = std::move(enc_a);
    m.dec_lambda_ = std::move(dec_lambda);
    m.response_weight_raw_ = std::move(response_weight_raw);
    m.log_response_sd_ = log_response_sd;
    m.trained_ = trained;
    m.head_ = head;
    return m;
  }

  int latent_dim() const { return config_.latent_dim; }
  const TrainConfig& config() const { return config_; }
  const Normalizer& normalizer() const { return normalizer_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  const DenseNet& difficulty_encoder() const { return enc_d_; }
  const DenseNet& ability_encoder() const { return enc_a_; }
  const DenseNet& level_decoder() const { return dec_lambda_; }
  const Eigen::VectorXd& response_weight_raw() const { return response_weight_raw_; }
  double log_response_sd() const { return log_response_sd_; }

  /// Response weights: softplus(raw), or raw itself for a signed head.
  Eigen::VectorXd response_weights() const {
    if (head_ == ResponseHead::kSigned) return response_weight_raw_;
    return response_weight_raw_.unaryExpr([](double x) { return softplus(x); });
  }

  ResponseHead response_head() const { return head_; }

  /// Switches to a signed head with the same weights.
  void use_signed_head() {
    if (head_ == ResponseHead::kSigned) return;
    response_weight_raw_ = response_weights();
    head_ = ResponseHead::kSigned;
  }

  /// Converts a signed head back to softplus form. Each latent dimension with
  /// a negative weight is reflected (a_i -> -a_i, d_i -> -d_i): encoder means,
  /// the ability encoder's difficulty input and the level decoder's input are
  /// negated. The priors are symmetric, so the distribution over (r, lambda)
  /// is unchanged.
  void canonicalize() {
    if (head_ == ResponseHead::kSoftplus) return;
    const Eigen::Index n = latent_dim();
    auto layers_d = enc_d_.layers();
    auto layers_a = enc_a_.layers();
    auto layers_l = dec_lambda_.layers();
    for (Eigen::Index i = 0; i < n; ++i) {
      double w = response_weight_raw_(i);
      if (w < 0.0) {
        layers_d.back().weight.row(i) *= -1.0;
        layers_d.back().bias(i) *= -1.0;
        layers_a.back().weight.row(i) *= -1.0;
        layers_a.back().bias(i) *= -1.0;
        layers_a.front().weight.col(i) *= -1.0;
        layers_l.front().weight.col(i) *= -1.0;
        w = -w;
      }
      // softplus^-1(w) = log(expm1(w)); keep a tiny floor so it stays finite.
      w = std::max(w, 1e-12);
      response_weight_raw_(i) = w > 30.0 ? w : std::log(std::expm1(w));
    }
    enc_d_ = DenseNet(std::move(layers_d));
    enc_a_ = DenseNet(std::move(layers_a));
    dec_lambda_ = DenseNet(std::move(layers_l));
    head_ = ResponseHead::kSoftplus;
  }
  double response_sd() const { return std::exp(log_response_sd_); }

  /// Scalar summary of a latent along the response head: w^T x.
  double project(const Eigen::VectorXd& latent) const {
    check_dim(latent, "latent");
    return response_weights().dot(latent);
  }

  // ---- encoders / decoders ----------------------------------------------

  LatentPosterior encode_difficulty(double response, const LevelParams& params) const {
    return encode_difficulty(std::span<const ResponseSample>(
        std::array<ResponseSample, 1>{ResponseSample{params, response}}))[0];
  }

  std::vector<LatentPosterior> encode_difficulty(std::span<const ResponseSample> batch) const {
    for (const auto& s : batch) validate(s.params);
    const Eigen::MatrixXd out = enc_d_.forward(difficulty_inputs(batch));
    return split_posteriors(out);
  }

  LatentPosterior encode_ability(const Eigen::VectorXd& difficulty_sample, double response,
                                 const LevelParams& params) const {
    check_dim(difficulty_sample, "difficulty sample");
    validate(params);
    const std::array<ResponseSample, 1> one{ResponseSample{params, response}};
    const Eigen::MatrixXd out =
        enc_a_.forward(ability_inputs(difficulty_sample, difficulty_inputs(one)));
    return split_posteriors(out)[0];
  }

  ResponseDistribution decode_response(const Eigen::VectorXd& ability,
                                       const Eigen::VectorXd& difficulty) const {
    check_dim(ability, "ability");
    check_dim(difficulty, "difficulty");
    return {response_weights().dot(ability - difficulty), response_sd()};
  }

  LevelDistribution decode_level_distribution(const Eigen::VectorXd& difficulty) const {
    check_dim(difficulty, "difficulty");
    const Eigen::VectorXd out = dec_lambda_.forward(difficulty);
    LevelDistribution dist;
    dist.spike_logit_mean = out(0);
    for (int k = 0; k < 4; ++k) dist.height_logits[k] = out(1 + k);
    return dist;
  }

  /// Most likely parameters under the level decoder: sigmoid of the logit
  /// mean and softmax of the height logits.
  LevelParams decode_level_params(const Eigen::VectorXd& difficulty) const {
    const auto dist = decode_level_distribution(difficulty);
    LevelParams p;
    p.spike_density = sigmoid(dist.spike_logit_mean);
    const double mx = *std::max_element(dist.height_logits.begin(), dist.height_logits.end());
    double sum = 0.0;
    for (int k = 0; k < 4; ++k) {
      p.height_probs[k] = std::exp(dist.height_logits[k] - mx);
      sum += p.height_probs[k];
    }
    for (double& h : p.height_probs) h /= sum;
    return p;
  }

  // ---- ability inference and generation ---------------------------------

  /// Pools per-interaction ability posteriors over the trailing `window`
  /// entries of `history` by precision weighting. Each interaction uses the
  /// difficulty posterior mean as its difficulty sample. Empty history gives
  /// the prior: an average student.
  LatentPosterior infer_ability(std::span<const ResponseSample> history) const {
    const Eigen::Index n = latent_dim();
    if (history.empty()) return LatentPosterior::standard(n);
    const std::size_t k = std::min<std::size_t>(history.size(), config_.window);
    const auto recent = history.subspan(history.size() - k);
    const auto difficulty = encode_difficulty(recent);
    Eigen::MatrixXd d(n, static_cast<Eigen::Index>(k));
    for (std::size_t j = 0; j < k; ++j) d.col(j) = difficulty[j].mean;
    const auto ability = split_posteriors(enc_a_.forward(ability_inputs(d, difficulty_inputs(recent))));

    Eigen::VectorXd precision = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd weighted = Eigen::VectorXd::Zero(n);
    for (const auto& post : ability) {
      const Eigen::ArrayXd prec = (-post.log_var.array()).exp();
      precision.array() += prec;
      weighted.array() += prec * post.mean.array();
    }
    LatentPosterior pooled;
    pooled.mean = (weighted.array() / precision.array()).matrix();
    pooled.log_var = (-precision.array().log()).matrix();
    return pooled;
  }

  /// Next level parameters for a student: decode at d = ability (posterior
  /// mean, or a reparameterized draw), spike density clamped to [0.01, 0.95].
  LevelParams generate_next_level_params(const LatentPosterior& ability, Rng& rng,
                                         GenerationMode mode = GenerationMode::kMean) const {
    if (!trained_) throw Error(ErrorCode::kNotTrained, "cannot generate levels from an untrained model");
    check_dim(ability.mean, "ability mean");
    check_dim(ability.log_var, "ability log_var");
    Eigen::VectorXd d = ability.mean;
    if (mode == GenerationMode::kSample) {
      for (Eigen::Index i = 0; i < d.size(); ++i) {
        d(i) += std::exp(0.5 * ability.log_var(i)) * rng.normal();
      }
    }
    LevelParams p = decode_level_params(d);
    p.spike_density = std::clamp(p.spike_density, kGeneratedSpikeMin, kGeneratedSpikeMax);
    return p;
  }

  // ---- objective -----------------------------------------------------------

  /// Single-sample reparameterized estimate of the bound, averaged over the
  /// batch.
  ElboBreakdown elbo(std::span<const ResponseSample> batch, Rng& rng) const {
    if (batch.empty()) throw Error(ErrorCode::kInsufficientData, "elbo needs a nonempty batch");
    const auto noise = ElboNoise::draw(latent_dim(), static_cast<Eigen::Index>(batch.size()), rng);
    return evaluate(batch, noise, 1.0, nullptr).breakdown;
  }

  /// Objective and (optionally) its exact gradient for fixed noise. The
  /// objective is the batch mean of recon_r + recon_lambda + kl_weight * (KL terms).
  ElboEvaluation evaluate(std::span<const ResponseSample> batch, const ElboNoise& noise,
                          double kl_weight, PermGradients* grads) const;

  // ---- flat parameter access (optimizer, gradient checks) --------------

  std::vector<double> parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    enc_d_.append_parameters(out);
    enc_a_.append_parameters(out);
    dec_lambda_.append_parameters(out);
    out.insert(out.end(), response_weight_raw_.data(),
               response_weight_raw_.data() + response_weight_raw_.size());
    out.push_back(log_response_sd_);
    return out;
  }

  void set_parameters(std::span<const double> values) {
    if (values.size() != parameter_count()) {
      throw Error(ErrorCode::kDimensionMismatch, "parameter vector has wrong length");
    }
    std::size_t k = 0;
    k += enc_d_.assign_parameters(values.subspan(k));
    k += enc_a_.assign_parameters(values.subspan(k));
    k += dec_lambda_.assign_parameters(values.subspan(k));
    for (Eigen::Index i = 0; i < response_weight_raw_.size(); ++i) response_weight_raw_(i) = values[k++];
    log_response_sd_ = values[k];
  }

  std::size_t parameter_count() const {
    return enc_d_.parameter_count() + enc_a_.parameter_count() + dec_lambda_.parameter_count() +
           static_cast<std::size_t>(response_weight_raw_.size()) + 1;
  }

  PermGradients zero_gradients() const {
    return {enc_d_.zeros_like(), enc_a_.zeros_like(), dec_lambda_.zeros_like(),
            Eigen::VectorXd::Zero(response_weight_raw_.size()), 0.0};
  }

  bool all_finite() const {
    return enc_d_.all_finite() && enc_a_.all_finite() && dec_lambda_.all_finite() &&
           response_weight_raw_.allFinite() && std::isfinite(log_response_sd_);
  }

 private:
  void check_dim(const Eigen::VectorXd& v, const char* what) const {
    if (v.size() != latent_dim()) {
      throw Error(ErrorCode::kDimensionMismatch, std::string(what) + " has length " +
                                                     std::to_string(v.size()) + ", expected " +
                                                     std::to_string(latent_dim()));
    }
  }

  static Eigen::MatrixXd difficulty_inputs(std::span<const ResponseSample> batch) {
    Eigen::MatrixXd x(1 + kLevelFeatureCount, static_cast<Eigen::Index>(batch.size()));
    for (std::size_t j = 0; j < batch.size(); ++j) {
      const auto f = level_features(batch[j].params);
      x(0, j) = batch[j].response;
      for (int k = 0; k < kLevelFeatureCount; ++k) x(1 + k, j) = f[k];
    }
    return x;
  }

  static Eigen::MatrixXd ability_inputs(const Eigen::MatrixXd& d, const Eigen::MatrixXd& rx) {
    Eigen::MatrixXd x(d.rows() + rx.rows(), d.cols());
    x.topRows(d.rows()) = d;
    x.bottomRows(rx.rows()) = rx;
    return x;
  }

  std::vector<LatentPosterior> split_posteriors(const Eigen::MatrixXd& out) const {
    const Eigen::Index n = latent_dim();
    std::vector<LatentPosterior> posts;
    posts.reserve(out.cols());
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      posts.push_back({out.col(j).head(n),
                       out.col(j).tail(n).unaryExpr([](double v) {
                         return std::clamp(v, kLogVarMin, kLogVarMax);
                       })});
    }
    return posts;
  }

  TrainConfig config_;
  Normalizer normalizer_;
  DenseNet enc_d_, enc_a_, dec_lambda_;
  Eigen::VectorXd response_weight_raw_;
  double log_response_sd_ = 0.0;
  ResponseHead head_ = ResponseHead::kSoftplus;
  bool trained_ = false;
};

inline ElboEvaluation PermModel::evaluate(std::span<const ResponseSample> batch,
                                          const ElboNoise& noise, double kl_weight,
                                          PermGradients* grads) const {
  const Eigen::Index n = latent_dim();
  const auto B = static_cast<Eigen::Index>(batch.size());
  if (B == 0) throw Error(ErrorCode::kInsufficientData, "elbo needs a nonempty batch");
  if (noise.difficulty.rows() != n || noise.difficulty.cols() != B || noise.ability.rows() != n ||
      noise.ability.cols() != B) {
    throw Error(ErrorCode::kDimensionMismatch, "noise shape does not match batch");
  }
  for (const auto& s : batch) validate(s.params);

  constexpr double kLog2Pi = 1.8378770664093453;
  const double inv_b = 1.0 / static_cast<double>(B);

  // q(d | r, lambda)
  const Eigen::MatrixXd x_d = difficulty_inputs(batch);
  DenseNet::Cache cache_d;
  const Eigen::MatrixXd out_d = enc_d_.forward(x_d, &cache_d);
  const Eigen::MatrixXd mu_d = out_d.topRows(n);
  const Eigen::MatrixXd raw_lv_d = out_d.bottomRows(n);
  const Eigen::MatrixXd lv_d = raw_lv_d.unaryExpr([](double v) { return std::clamp(v, kLogVarMin, kLogVarMax); });
  const Eigen::MatrixXd sd_d = (0.5 * lv_d.array()).exp().matrix();
  const Eigen::MatrixXd d = mu_d + sd_d.cwiseProduct(noise.difficulty);

  // q(a | d, r, lambda)
  const Eigen::MatrixXd x_a = ability_inputs(d, x_d);
  DenseNet::Cache cache_a;
  const Eigen::MatrixXd out_a = enc_a_.forward(x_a, &cache_a);
  const Eigen::MatrixXd mu_a = out_a.topRows(n);
  const Eigen::MatrixXd raw_lv_a = out_a.bottomRows(n);
  const Eigen::MatrixXd lv_a = raw_lv_a.unaryExpr([](double v) { return std::clamp(v, kLogVarMin, kLogVarMax); });
  const Eigen::MatrixXd sd_a = (0.5 * lv_a.array()).exp().matrix();
  const Eigen::MatrixXd a = mu_a + sd_a.cwiseProduct(noise.ability);

  // p(r | a, d)
  const Eigen::VectorXd w = response_weights();
  const double sigma = response_sd();
  const double var_r = sigma * sigma;
  Eigen::RowVectorXd r(B);
  for (Eigen::Index j = 0; j < B; ++j) r(j) = batch[j].response;
  const Eigen::RowVectorXd m = w.transpose() * (a - d);
  const Eigen::RowVectorXd resid = r - m;
  const double recon_r =
      (-0.5 * kLog2Pi - log_response_sd_ - resid.array().square() / (2.0 * var_r)).sum() * inv_b;

  // p(lambda | d)
  DenseNet::Cache cache_l;
  const Eigen::MatrixXd out_l = dec_lambda_.forward(d, &cache_l);
  Eigen::MatrixXd d_out_l(5, B);
  const double spike_var = kSpikeLogitSd * kSpikeLogitSd;
  double recon_l = 0.0;
  for (Eigen::Index j = 0; j < B; ++j) {
    const double t = spike_target_logit(batch[j].params.spike_density);
    const double s = out_l(0, j);
    recon_l += -0.5 * std::log(2.0 * std::numbers::pi * spike_var) - (t - s) * (t - s) / (2.0 * spike_var);
    d_out_l(0, j) = (t - s) / spike_var * inv_b;

    double mx = out_l(1, j);
    for (int k = 1; k < 4; ++k) mx = std::max(mx, out_l(1 + k, j));
    double z = 0.0;
    for (int k = 0; k < 4; ++k) z += std::exp(out_l(1 + k, j) - mx);
    const double log_z = mx + std::log(z);
    for (int k = 0; k < 4; ++k) {
      const double h = batch[j].params.height_probs[k];
      const double log_soft = out_l(1 + k, j) - log_z;
      recon_l += h * log_soft;
      d_out_l(1 + k, j) = (h - std::exp(log_soft)) * inv_b;
    }
  }
  recon_l *= inv_b;

  // Analytic -KL(q || N(0, I)).
  const double kl_d = 0.5 * (1.0 + lv_d.array() - mu_d.array().square() - lv_d.array().exp()).sum() * inv_b;
  const double kl_a = 0.5 * (1.0 + lv_a.array() - mu_a.array().square() - lv_a.array().exp()).sum() * inv_b;

  ElboEvaluation result;
  result.breakdown = {recon_r, recon_l, kl_a, kl_d, recon_r + recon_l + kl_a + kl_d};
  result.objective = recon_r + recon_l + kl_weight * (kl_a + kl_d);
  if (!grads) return result;

  // ---- reverse pass ----
  const Eigen::RowVectorXd g_m = resid / var_r * inv_b;
  grads->log_response_sd += ((resid.array().square() / var_r) - 1.0).sum() * inv_b;
  const Eigen::VectorXd g_w = (a - d) * g_m.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dw = head_ == ResponseHead::kSigned ? 1.0 : sigmoid(response_weight_raw_(i));
    grads->response_weight_raw(i) += g_w(i) * dw;
  }
  const Eigen::MatrixXd g_a = w * g_m;
  Eigen::MatrixXd g_d = -g_a;
  g_d += dec_lambda_.backward(cache_l, d_out_l, grads->dec_lambda);

  auto in_range = [](const Eigen::MatrixXd& raw) {
    return raw.unaryExpr([](double v) { return (v >= kLogVarMin && v <= kLogVarMax) ? 1.0 : 0.0; });
  };

  Eigen::MatrixXd d_out_a(2 * n, B);
  d_out_a.topRows(n) = g_a - kl_weight * mu_a * inv_b;
  d_out_a.bottomRows(n) =
      (g_a.cwiseProduct(0.5 * sd_a.cwiseProduct(noise.ability)) +
       (kl_weight * 0.5 * inv_b) * (1.0 - lv_a.array().exp()).matrix())
          .cwiseProduct(in_range(raw_lv_a));
  const Eigen::MatrixXd g_x_a = enc_a_.backward(cache_a, d_out_a, grads->enc_a);
  g_d += g_x_a.topRows(n);

  Eigen::MatrixXd d_out_d(2 * n, B);
  d_out_d.topRows(n) = g_d - kl_weight * mu_d * inv_b;
  d_out_d.bottomRows(n) =
      (g_d.cwiseProduct(0.5 * sd_d.cwiseProduct(noise.difficulty)) +
       (kl_weight * 0.5 * inv_b) * (1.0 - lv_d.array().exp()).matrix())
          .cwiseProduct(in_range(raw_lv_d));
  enc_d_.backward(cache_d, d_out_d, grads->enc_d);
  return result;
}

// ---- training ---------------------------------------------------------------

struct EpochTrace {
  int epoch = 0;
  double kl_weight = 0.0;
  ElboBreakdown elbo;
};

struct TrainResult {
  PermModel model;
  std::vector<EpochTrace> trace;
};

/// Adam ascent on the single-sample bound over seeded minibatch permutations,
/// with a signed response head that is canonicalized to w >= 0 at the end.
/// Bit-for-bit deterministic given (corpus, config, normalizer).
inline TrainResult train(std::span<const ResponseSample> corpus, const TrainConfig& config,
                         const Normalizer& normalizer,
                         const std::function<void(const EpochTrace&)>& on_epoch = {}) {
  config.validate();
  if (corpus.empty()) throw Error(ErrorCode::kInsufficientData, "training corpus is empty");
  if (!normalizer.usable()) throw Error(ErrorCode::kInvalidArgument, "normalizer not fitted");

  TrainResult out;
  out.model = PermModel::initialize(config, normalizer);
  PermModel& model = out.model;
  model.use_signed_head();
  Rng rng(derive_seed(config.seed, 0x7a1));
  Adam adam(model.parameter_count(),
            AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8});

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<ResponseSample> batch;
  batch.reserve(config.batch_size);
  std::vector<double> params = model.parameters();
  if (config.response_sd) {
    params.back() = std::log(*config.response_sd);  // log_response_sd is the last parameter
    model.set_parameters(params);
  }

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    const double beta = config.kl_weight_at(epoch);
    ElboBreakdown sum;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(corpus[order[i]]);
      const auto noise = ElboNoise::draw(model.latent_dim(), static_cast<Eigen::Index>(batch.size()), rng);
      PermGradients grads = model.zero_gradients();
      const auto eval = model.evaluate(batch, noise, beta, &grads);
      if (!std::isfinite(eval.objective)) {
        throw Error(ErrorCode::kNumerical, "non-finite objective at epoch " + std::to_string(epoch) +
                                               ", batch starting " + std::to_string(start) +
                                               " (recon_r=" + std::to_string(eval.breakdown.recon_r) +
                                               ", recon_lambda=" + std::to_string(eval.breakdown.recon_lambda) + ")");
      }
      auto g = grads.flatten();
      if (config.response_sd) g.back() = 0.0;
      adam.ascend(params, g);
      model.set_parameters(params);

      const double share = static_cast<double>(batch.size());
      sum.recon_r += eval.breakdown.recon_r * share;
      sum.recon_lambda += eval.breakdown.recon_lambda * share;
      sum.kl_a_term += eval.breakdown.kl_a_term * share;
      sum.kl_d_term += eval.breakdown.kl_d_term * share;
    }
    const double inv = 1.0 / static_cast<double>(corpus.size());
    EpochTrace t{epoch, beta, {}};
    t.elbo.recon_r = sum.recon_r * inv;
    t.elbo.recon_lambda = sum.recon_lambda * inv;
    t.elbo.kl_a_term = sum.kl_a_term * inv;
    t.elbo.kl_d_term = sum.kl_d_term * inv;
    t.elbo.total = t.elbo.recon_r + t.elbo.recon_lambda + t.elbo.kl_a_term + t.elbo.kl_d_term;
    if (!model.all_finite()) {
      throw Error(ErrorCode::kNumerical, "non-finite parameters after epoch " + std::to_string(epoch));
    }
    out.trace.push_back(t);
    if (on_epoch) on_epoch(t);
  }
  model.canonicalize();
  model.mark_trained();
  return out;
}

}  // namespace perm
