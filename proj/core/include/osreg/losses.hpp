#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "osreg/graph.hpp"
#include "osreg/rng.hpp"
#include "osreg/tensor.hpp"

namespace osreg {

enum class AuxKind { None, Sntg, Amc };

const char* aux_kind_name(AuxKind kind);
AuxKind parse_aux_kind(const std::string& name);

/// Weights and geometry of the regularizers.
///   lambda   consistency weight
///   lambda1  SNTG/AMC weight
///   lambda2  orthogonal-sphere weight
struct LossWeights {
  double lambda = 1.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  AuxKind aux = AuxKind::None;
  double margin_euclid = 1.0;   // SNTG margin m_e
  double margin_angle = 0.5;    // AMC margin m_g, radians
  double sphere_radius = 3.0;   // s
  bool normalize_latent = true;
  std::size_t os_blocks = 16;   // k

  void validate() const;
  /// 7e-5 with sphere projection, 5e-4 without.
  static double default_lambda2(bool normalize_latent) { return normalize_latent ? 7e-5 : 5e-4; }
};

/// Latent vector Z of length M viewed as the d x k matrix [z^1 ... z^k] whose
/// column j is the j-th contiguous block of Z. Stored column-major, which is
/// exactly the memory order of Z.
struct LatentBlockMatrix {
  std::size_t d = 0;
  std::size_t k = 0;
  std::vector<double> entries;

  double at(std::size_t row, std::size_t col) const { return entries[col * d + row]; }
  std::span<const double> column(std::size_t col) const { return {entries.data() + col * d, d}; }
};

LatentBlockMatrix partition_latent(std::span<const double> latent, std::size_t k);

/// ||Z^T Z - I_k||_F^2.
double os_loss(const LatentBlockMatrix& blocks);

/// s * z / ||z||. Throws for the zero vector.
std::vector<double> sphere_project(std::span<const double> latent, double radius);

/// ||li-lj||^2 for neighbours, max(0, m_e - ||li-lj||)^2 otherwise.
double sntg_pair(std::span<const double> li, std::span<const double> lj, int similar, double margin);

/// Same contrast on the geodesic distance acos<zi,zj> of unit vectors; the
/// inner product is clamped to [-1,1]. Inputs off the unit sphere by more
/// than 1e-4 are rejected.
double amc_pair(std::span<const double> zi, std::span<const double> zj, int similar, double margin);

/// exp(-5 (1 - t/length)^2) for t < length, 1 afterwards.
double ramp_up(double epoch, double length = 80.0);

/// 1 before the last `window` epochs, exp(-12.5 (1 - (total - t)/window)^2)
/// inside them. A window longer than `total` is clamped to `total`.
double ramp_down(double epoch, double total, double window = 50.0);

struct PairSimilarity {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<int> similar;  // 0 or 1 per pair

  std::size_t size() const noexcept { return pairs.size(); }
};

/// floor(batch/2) disjoint pairs from a shuffle of 0..batch-1.
std::vector<std::pair<std::size_t, std::size_t>> make_pairs(std::size_t batch, Rng& rng);

/// Index of the row maximum; ties go to the lowest index.
template <typename T>
std::size_t argmax_row(std::span<const T> row);

/// s_ij = 1 iff the teacher's argmax agrees on i and j.
template <typename T>
PairSimilarity build_similarity(const Tensor<T>& teacher_probs,
                                std::vector<std::pair<std::size_t, std::size_t>> pairs);

struct LossDiagnostics {
  std::size_t clamped_probabilities = 0;
};

// Graph-level losses. Each returns a scalar node.

/// -(1/|B|) sum over labeled rows of log p[y]. The divisor is the full batch
/// size. Probabilities below 1e-12 are clamped (zero adjoint) and counted.
template <typename T>
Var<T> cross_entropy_masked(Var<T> probs, std::span<const int> labels,
                            std::span<const std::uint8_t> labeled_mask, LossDiagnostics* diag = nullptr);

/// Mean over rows of ||student - teacher||^2. The teacher is a plain tensor,
/// so no adjoint can reach it.
template <typename T>
Var<T> consistency_loss(Var<T> student_probs, const Tensor<T>& teacher_probs);

/// Mean of sntg_pair over the pair list, latent rows [N,M].
template <typename T>
Var<T> sntg_loss(Var<T> latent, const PairSimilarity& sim, T margin);

/// Mean of amc_pair over the pair list; rows of `unit_latent` must be unit.
template <typename T>
Var<T> amc_loss(Var<T> unit_latent, const PairSimilarity& sim, T margin);

/// Row-wise s * z / ||z||.
template <typename T>
Var<T> sphere_project(Var<T> latent, T radius);

/// (1/N) sum over rows of ||Z_i^T Z_i - I||_F^2 with Z_i the k-block view of row i.
template <typename T>
Var<T> os_loss(Var<T> latent, std::size_t k);

/// Unweighted term values of one mini-batch objective.
struct LossBreakdown {
  double ce = 0.0;
  double consistency = 0.0;
  double aux = 0.0;
  double os = 0.0;
  double w_t = 0.0;
  double total = 0.0;
  std::size_t clamped_probabilities = 0;

  double recombined(const LossWeights& w) const {
    return ce + w_t * (w.lambda * consistency + w.lambda1 * aux + w.lambda2 * os);
  }
};

template <typename T>
struct LossInputs {
  Var<T> student_probs;
  const Tensor<T>* teacher_probs = nullptr;  // required when lambda > 0
  std::span<const int> labels;
  std::span<const std::uint8_t> labeled_mask;
  /// Feature rows for SNTG (raw l) or AMC (unit-normalized z).
  Var<T> aux_latent;
  const PairSimilarity* similarity = nullptr;
  /// Raw latent rows of every OS tap.
  std::vector<Var<T>> os_latents;
};

template <typename T>
struct TotalLoss {
  Var<T> total;
  LossBreakdown terms;
};

/// CE + w(t) [lambda * consistency + lambda1 * aux + lambda2 * sum over taps of OS].
/// With normalize_latent set, each OS tap is sphere-projected to radius s
/// before partitioning. A term whose inputs are absent contributes zero;
/// supplied terms are evaluated and logged even when their weight is zero.
template <typename T>
TotalLoss<T> total_loss(const LossInputs<T>& in, const LossWeights& weights, double w_t);

}  // namespace osreg
