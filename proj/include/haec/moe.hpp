#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "haec/superpoint.hpp"

namespace haec {

struct MoeConfig {
  int levels = 3;
  int hidden = 16;       // D
  int experts = 4;       // E
  int top_k = 2;
  int heads = 2;
  int head_layers = 2;   // affine layers in the semantic head
  double alpha = 0.2;    // triplet margin
  double w_rec = 1.0, w_tri = 0.5, w_bal = 0.01, w_aff = 1.0;
  double lr = 0.1;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

using ParamMap = std::map<std::string, Eigen::MatrixXd>;

inline constexpr int kRpeDim = 3 + kEdgeFeatDim;

// Top-2 experts per node for every block, in block order.
struct Routing {
  std::vector<std::vector<std::array<int, 2>>> blocks;
  bool operator==(const Routing&) const = default;
};

struct GateStats {
  std::vector<double> f;  // fraction of routing slots per expert
  std::vector<double> P;  // mean gate probability per expert
  double loss = 0.0;      // E * sum f_e P_e
};

struct Losses {
  double rec = 0, triplet = 0, balance = 0, affinity = 0, total = 0;
};

struct ForwardOutput {
  RowMatrix pred_vec;                  // S x C, unit rows
  std::vector<double> pred_affinity;   // one per level-1 edge
  std::vector<GateStats> gate_stats;   // per block
  Losses losses;
  Routing routing;
};

struct EvalOptions {
  int step = 0;                     // seeds triplet sampling
  const Routing* frozen = nullptr;  // reuse these expert selections
  bool gradients = false;
};

struct Evaluation {
  ForwardOutput out;
  ParamMap grads;
};

struct GateResult {
  Eigen::VectorXd probs;
  std::array<int, 2> selected{};
  std::array<double, 2> weights{};
};

// Softmax over the logits, top-2 (ties to the lower expert id), renormalized weights.
GateResult gate_from_logits(const Eigen::VectorXd& logits);
GateResult gate(const Eigen::VectorXd& node_repr, const Eigen::VectorXd& rpe_mean, const Eigen::MatrixXd& W,
                const Eigen::RowVectorXd& b);

// probs: n x E; each node fills two slots of weight 1/2.
double load_balance_loss(const Eigen::MatrixXd& probs, std::span<const std::array<int, 2>> selected);

// Mean over the three targets of 1 - cos; a masked superpoint contributes 0.
double loss_rec(const Eigen::VectorXd& pred, const std::array<Eigen::VectorXd, 3>& targets, bool masked = false);
double loss_triplet(const Eigen::VectorXd& anchor, const Eigen::VectorXd& pos, const Eigen::VectorXd& neg,
                    double alpha);
// Class-balanced: positives and negatives each carry half the weight when both occur, else a plain mean.
double affinity_bce(std::span<const double> pred, std::span<const double> labels, double eps = 1e-12);
std::vector<double> balanced_weights(std::span<const double> labels);

// 1 when both endpoints are things with the same pseudo-instance, else 0.
std::vector<double> affinity_labels(const SuperpointHierarchy& h);

ParamMap init_params(const MoeConfig& config, std::size_t feature_dim);

Evaluation evaluate(const SuperpointHierarchy& h, const ParamMap& params, const MoeConfig& config,
                    const EvalOptions& options = {});
ForwardOutput forward(const SuperpointHierarchy& h, const ParamMap& params, const MoeConfig& config, int step = 0);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // perturbation crossed a routing boundary
};

// (f(x + eps) - f(x - eps)) / 2 eps
double central_difference(const std::function<double(double)>& f, double x, double eps);

// Central differences on up to max_samples parameter entries with routing frozen.
// `only` restricts the check to the named tensors; empty means all of them.
GradCheckResult grad_check(const SuperpointHierarchy& h, const ParamMap& params, const MoeConfig& config,
                           std::size_t max_samples = 1000, double eps = 1e-4, std::uint64_t seed = 0,
                           const std::vector<std::string>& only = {});

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-7);

struct TrainResult {
  ParamMap params;
  std::vector<Losses> trace;  // steps + 1 entries: before each update and after the last
};

// Plain gradient descent at config.lr. Throws NumericError naming the step on divergence.
TrainResult train_toy(const SuperpointHierarchy& h, ParamMap params, const MoeConfig& config, int steps);

void save_checkpoint(const std::filesystem::path& path, const ParamMap& params, const MoeConfig& config,
                     std::size_t feature_dim);
ParamMap load_checkpoint(const std::filesystem::path& path, MoeConfig* config = nullptr,
                         std::size_t* feature_dim = nullptr);

}  // namespace haec
