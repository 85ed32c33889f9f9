#include "osreg/losses.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "osreg/ops.hpp"

namespace osreg {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::string divisors_of(std::size_t m) {
  std::string out;
  for (std::size_t k = 1; k <= m; ++k)
    if (m % k == 0) out += (out.empty() ? "" : ",") + std::to_string(k);
  return out;
}

constexpr double kUnitTolerance = 1e-4;
constexpr double kProbFloor = 1e-12;

// Lower bound on 1 - c^2 inside the acos derivative.
template <typename T>
constexpr T acos_guard() {
  return std::is_same_v<T, float> ? T(1e-7) : T(1e-14);
}

}  // namespace

const char* aux_kind_name(AuxKind kind) {
  switch (kind) {
    case AuxKind::None: return "none";
    case AuxKind::Sntg: return "sntg";
    case AuxKind::Amc: return "amc";
  }
  return "none";
}

AuxKind parse_aux_kind(const std::string& name) {
  if (name == "none") return AuxKind::None;
  if (name == "sntg") return AuxKind::Sntg;
  if (name == "amc") return AuxKind::Amc;
  throw std::invalid_argument("unknown auxiliary loss '" + name + "' (expected none|sntg|amc)");
}

void LossWeights::validate() const {
  require(lambda >= 0 && lambda1 >= 0 && lambda2 >= 0, "loss weights must be >= 0");
  require(margin_euclid > 0, "m_e must be > 0");
  require(margin_angle > 0 && margin_angle < std::numbers::pi, "m_g must be in (0, pi)");
  require(sphere_radius > 0, "sphere radius s must be > 0");
  require(os_blocks >= 1, "os block count k must be >= 1");
}

LatentBlockMatrix partition_latent(std::span<const double> latent, std::size_t k) {
  const std::size_t m = latent.size();
  require(k >= 1 && m % k == 0, "partition_latent: M=" + std::to_string(m) + " is not divisible by k=" +
                                    std::to_string(k) + "; valid k: " + divisors_of(m));
  LatentBlockMatrix b;
  b.k = k;
  b.d = m / k;
  b.entries.assign(latent.begin(), latent.end());
  return b;
}

double os_loss(const LatentBlockMatrix& blocks) {
  double total = 0.0;
  for (std::size_t a = 0; a < blocks.k; ++a)
    for (std::size_t b = 0; b < blocks.k; ++b) {
      double g = 0.0;
      for (std::size_t r = 0; r < blocks.d; ++r) g += blocks.at(r, a) * blocks.at(r, b);
      const double resid = g - (a == b ? 1.0 : 0.0);
      total += resid * resid;
    }
  return total;
}

std::vector<double> sphere_project(std::span<const double> latent, double radius) {
  double sq = 0.0;
  for (double v : latent) sq += v * v;
  require(sq > 0.0, "sphere_project: zero latent vector has no direction");
  const double f = radius / std::sqrt(sq);
  std::vector<double> out(latent.begin(), latent.end());
  for (auto& v : out) v *= f;
  return out;
}

double sntg_pair(std::span<const double> li, std::span<const double> lj, int similar, double margin) {
  require(li.size() == lj.size(), "sntg_pair: length mismatch");
  require(margin > 0, "sntg_pair: margin must be > 0");
  double sq = 0.0;
  for (std::size_t i = 0; i < li.size(); ++i) sq += (li[i] - lj[i]) * (li[i] - lj[i]);
  if (similar) return sq;
  const double hinge = std::max(0.0, margin - std::sqrt(sq));
  return hinge * hinge;
}

double amc_pair(std::span<const double> zi, std::span<const double> zj, int similar, double margin) {
  require(zi.size() == zj.size(), "amc_pair: length mismatch");
  double ni = 0.0, nj = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < zi.size(); ++i) {
    ni += zi[i] * zi[i];
    nj += zj[i] * zj[i];
    dot += zi[i] * zj[i];
  }
  require(std::abs(std::sqrt(ni) - 1.0) <= kUnitTolerance && std::abs(std::sqrt(nj) - 1.0) <= kUnitTolerance,
          "amc_pair: inputs must be unit vectors");
  const double angle = std::acos(std::clamp(dot, -1.0, 1.0));
  if (similar) return angle * angle;
  const double hinge = std::max(0.0, margin - angle);
  return hinge * hinge;
}

double ramp_up(double epoch, double length) {
  require(epoch >= 0, "ramp_up: epoch must be >= 0");
  require(length > 0, "ramp_up: length must be > 0");
  if (epoch >= length) return 1.0;
  const double p = 1.0 - epoch / length;
  return std::exp(-5.0 * p * p);
}

double ramp_down(double epoch, double total, double window) {
  require(total >= 1, "ramp_down: total must be >= 1");
  require(epoch >= 0 && epoch <= total, "ramp_down: epoch must be in [0, total]");
  if (window > total) {
    spdlog::warn("ramp_down: window {} longer than the run ({} epochs); clamped", window, total);
    window = total;
  }
  if (epoch < total - window) return 1.0;
  const double p = 1.0 - (total - epoch) / window;
  return std::exp(-12.5 * p * p);
}

std::vector<std::pair<std::size_t, std::size_t>> make_pairs(std::size_t batch, Rng& rng) {
  const auto perm = rng.permutation(batch);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i + 1 < batch; i += 2) pairs.emplace_back(perm[i], perm[i + 1]);
  return pairs;
}

template <typename T>
std::size_t argmax_row(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

template <typename T>
PairSimilarity build_similarity(const Tensor<T>& teacher_probs,
                                std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  require(teacher_probs.rank() == 2, "build_similarity: teacher probabilities must be [N,K]");
  const std::size_t n = teacher_probs.dim(0), k = teacher_probs.dim(1);
  PairSimilarity sim;
  for (const auto& [i, j] : pairs) {
    require(i < n && j < n && i != j, "build_similarity: invalid pair (" + std::to_string(i) + "," +
                                          std::to_string(j) + ") for batch of " + std::to_string(n));
    const auto ci = argmax_row<T>(teacher_probs.values().subspan(i * k, k));
    const auto cj = argmax_row<T>(teacher_probs.values().subspan(j * k, k));
    sim.similar.push_back(ci == cj ? 1 : 0);
  }
  sim.pairs = std::move(pairs);
  return sim;
}

template <typename T>
Var<T> cross_entropy_masked(Var<T> probs, std::span<const int> labels,
                            std::span<const std::uint8_t> labeled_mask, LossDiagnostics* diag) {
  const auto& s = probs.shape();
  require(s.size() == 2, "cross_entropy_masked: probabilities must be [N,K]");
  const std::size_t n = s[0], k = s[1];
  require(labels.size() == n && labeled_mask.size() == n,
          "cross_entropy_masked: labels/mask must have one entry per row");
  const T* p = probs.value().data();
  auto coef = std::make_shared<std::vector<T>>(n, T{0});
  auto cls = std::make_shared<std::vector<std::size_t>>(n, 0);
  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!labeled_mask[i]) continue;
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k,
            "cross_entropy_masked: label out of range at row " + std::to_string(i));
    const auto y = static_cast<std::size_t>(labels[i]);
    (*cls)[i] = y;
    const double py = p[i * k + y];
    if (py < kProbFloor) {
      if (diag) ++diag->clamped_probabilities;
      loss -= std::log(kProbFloor) * inv_b;
    } else {
      loss -= std::log(py) * inv_b;
      (*coef)[i] = static_cast<T>(-inv_b / py);
    }
  }
  return probs.graph().record(OpKind::CrossEntropyMasked, {probs}, Tensor<T>::scalar(static_cast<T>(loss)),
                              [coef, cls, n, k](Graph<T>& g, std::size_t self) {
                                const auto pi = g.node(self).inputs[0];
                                const T up = g.grad(self)[0];
                                auto& dp = g.grad_buffer(pi);
                                for (std::size_t i = 0; i < n; ++i)
                                  dp[i * k + (*cls)[i]] += up * (*coef)[i];
                              });
}

template <typename T>
Var<T> consistency_loss(Var<T> student_probs, const Tensor<T>& teacher_probs) {
  const auto& s = student_probs.shape();
  require(s == teacher_probs.shape(), "consistency: shape mismatch " + shape_str(s) + " vs " +
                                          shape_str(teacher_probs.shape()));
  const std::size_t n = s[0];
  auto teacher = std::make_shared<Tensor<T>>(teacher_probs);
  double acc = 0.0;
  for (std::size_t i = 0; i < teacher->size(); ++i) {
    const double d = static_cast<double>(student_probs.value()[i]) - (*teacher)[i];
    acc += d * d;
  }
  return student_probs.graph().record(
      OpKind::Consistency, {student_probs}, Tensor<T>::scalar(static_cast<T>(acc / n)),
      [teacher, n](Graph<T>& g, std::size_t self) {
        const auto si = g.node(self).inputs[0];
        const T up = g.grad(self)[0] * T(2) / static_cast<T>(n);
        const auto& sv = g.value(si);
        auto& ds = g.grad_buffer(si);
        for (std::size_t i = 0; i < ds.size(); ++i) ds[i] += up * (sv[i] - (*teacher)[i]);
      });
}

template <typename T>
Var<T> sntg_loss(Var<T> latent, const PairSimilarity& sim, T margin) {
  const auto& s = latent.shape();
  require(s.size() == 2, "sntg_loss: latent must be [N,M]");
  require(margin > T{0}, "sntg_loss: margin must be > 0");
  require(sim.size() > 0, "sntg_loss: empty pair set");
  const std::size_t m = s[1];
  const T* l = latent.value().data();
  // Per pair: coefficient c such that dL/dl_i = c (l_i - l_j), dL/dl_j = -c (l_i - l_j).
  auto coefs = std::make_shared<std::vector<T>>(sim.size());
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(sim.pairs);
  double acc = 0.0;
  for (std::size_t p = 0; p < sim.size(); ++p) {
    const auto [i, j] = sim.pairs[p];
    double sq = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      const double d = static_cast<double>(l[i * m + r]) - l[j * m + r];
      sq += d * d;
    }
    if (sim.similar[p]) {
      acc += sq;
      (*coefs)[p] = T(2);
    } else {
      const double dist = std::sqrt(sq);
      const double hinge = static_cast<double>(margin) - dist;
      if (hinge > 0) {
        acc += hinge * hinge;
        (*coefs)[p] = dist > 0 ? static_cast<T>(-2.0 * hinge / dist) : T{0};
      } else {
        (*coefs)[p] = T{0};
      }
    }
  }
  const std::size_t count = sim.size();
  return latent.graph().record(
      OpKind::Sntg, {latent}, Tensor<T>::scalar(static_cast<T>(acc / count)),
      [coefs, pairs, m, count](Graph<T>& g, std::size_t self) {
        const auto li = g.node(self).inputs[0];
        const T up = g.grad(self)[0] / static_cast<T>(count);
        const auto& l = g.value(li);
        auto& dl = g.grad_buffer(li);
        for (std::size_t p = 0; p < pairs->size(); ++p) {
          const auto [i, j] = (*pairs)[p];
          const T c = up * (*coefs)[p];
          if (c == T{0}) continue;
          for (std::size_t r = 0; r < m; ++r) {
            const T d = l[i * m + r] - l[j * m + r];
            dl[i * m + r] += c * d;
            dl[j * m + r] -= c * d;
          }
        }
      });
}

template <typename T>
Var<T> amc_loss(Var<T> unit_latent, const PairSimilarity& sim, T margin) {
  const auto& s = unit_latent.shape();
  require(s.size() == 2, "amc_loss: latent must be [N,M]");
  require(sim.size() > 0, "amc_loss: empty pair set");
  const std::size_t n = s[0], m = s[1];
  const T* z = unit_latent.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t r = 0; r < m; ++r) sq += static_cast<double>(z[i * m + r]) * z[i * m + r];
    require(std::abs(std::sqrt(sq) - 1.0) <= kUnitTolerance,
            "amc_loss: row " + std::to_string(i) + " is not unit-normalized (AMC needs unit vectors)");
  }
  // dL/dc per pair, where c = <z_i, z_j>.
  auto dcs = std::make_shared<std::vector<T>>(sim.size());
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(sim.pairs);
  double acc = 0.0;
  for (std::size_t p = 0; p < sim.size(); ++p) {
    const auto [i, j] = sim.pairs[p];
    T dot{0};
    for (std::size_t r = 0; r < m; ++r) dot += z[i * m + r] * z[j * m + r];
    const T c = std::clamp(dot, T{-1}, T{1});
    const T angle = std::acos(c);
    const T root = std::sqrt(std::max(T{1} - c * c, acos_guard<T>()));
    if (sim.similar[p]) {
      acc += static_cast<double>(angle) * angle;
      (*dcs)[p] = -T(2) * angle / root;
    } else {
      const T hinge = margin - angle;
      if (hinge > T{0}) {
        acc += static_cast<double>(hinge) * hinge;
        (*dcs)[p] = T(2) * hinge / root;
      } else {
        (*dcs)[p] = T{0};
      }
    }
  }
  const std::size_t count = sim.size();
  return unit_latent.graph().record(
      OpKind::Amc, {unit_latent}, Tensor<T>::scalar(static_cast<T>(acc / count)),
      [dcs, pairs, m, count](Graph<T>& g, std::size_t self) {
        const auto zi = g.node(self).inputs[0];
        const T up = g.grad(self)[0] / static_cast<T>(count);
        const auto& z = g.value(zi);
        auto& dz = g.grad_buffer(zi);
        for (std::size_t p = 0; p < pairs->size(); ++p) {
          const auto [i, j] = (*pairs)[p];
          const T c = up * (*dcs)[p];
          if (c == T{0}) continue;
          for (std::size_t r = 0; r < m; ++r) {
            dz[i * m + r] += c * z[j * m + r];
            dz[j * m + r] += c * z[i * m + r];
          }
        }
      });
}

template <typename T>
Var<T> sphere_project(Var<T> latent, T radius) {
  const auto& s = latent.shape();
  require(s.size() == 2, "sphere_project: latent must be [N,M]");
  require(radius > T{0}, "sphere_project: radius must be > 0");
  const std::size_t n = s[0], m = s[1];
  auto norms = std::make_shared<std::vector<T>>(n);
  Tensor<T> out = latent.value();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t r = 0; r < m; ++r) sq += static_cast<double>(out[i * m + r]) * out[i * m + r];
    require(sq > 0.0, "sphere_project: row " + std::to_string(i) + " is the zero vector");
    (*norms)[i] = static_cast<T>(std::sqrt(sq));
    for (std::size_t r = 0; r < m; ++r) out[i * m + r] *= radius / (*norms)[i];
  }
  return latent.graph().record(
      OpKind::SphereProject, {latent}, std::move(out), [norms, radius, n, m](Graph<T>& g, std::size_t self) {
        const auto li = g.node(self).inputs[0];
        const auto& y = g.value(self);
        const auto& dy = g.grad(self);
        auto& dx = g.grad_buffer(li);
        // dx = (s/|x|) (dy - u (u.dy)), u = y/s.
        for (std::size_t i = 0; i < n; ++i) {
          T dot{0};
          for (std::size_t r = 0; r < m; ++r) dot += dy[i * m + r] * y[i * m + r];
          dot /= radius;
          const T f = radius / (*norms)[i];
          for (std::size_t r = 0; r < m; ++r)
            dx[i * m + r] += f * (dy[i * m + r] - y[i * m + r] / radius * dot);
        }
      });
}

template <typename T>
Var<T> os_loss(Var<T> latent, std::size_t k) {
  const auto& s = latent.shape();
  require(s.size() == 2, "os_loss: latent must be [N,M]");
  const std::size_t n = s[0], m = s[1];
  require(k >= 1 && m % k == 0, "os_loss: M=" + std::to_string(m) + " is not divisible by k=" +
                                    std::to_string(k) + "; valid k: " + divisors_of(m));
  const std::size_t d = m / k;
  // Residual R = Z^T Z - I per row, kept for the adjoint dZ = 4 Z R.
  auto resid = std::make_shared<std::vector<T>>(n * k * k);
  const T* z = latent.value().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z + i * m;
    T* r = resid->data() + i * k * k;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a; b < k; ++b) {
        T gab{0};
        for (std::size_t t = 0; t < d; ++t) gab += row[a * d + t] * row[b * d + t];
        if (a == b) gab -= T{1};
        r[a * k + b] = gab;
        r[b * k + a] = gab;
        acc += (a == b ? 1.0 : 2.0) * static_cast<double>(gab) * gab;
      }
  }
  return latent.graph().record(
      OpKind::OsLoss, {latent}, Tensor<T>::scalar(static_cast<T>(acc / n)),
      [resid, n, m, k, d](Graph<T>& g, std::size_t self) {
        const auto li = g.node(self).inputs[0];
        const T up = g.grad(self)[0] * T(4) / static_cast<T>(n);
        const auto& zv = g.value(li);
        auto& dz = g.grad_buffer(li);
        for (std::size_t i = 0; i < n; ++i) {
          const T* row = zv.data() + i * m;
          const T* r = resid->data() + i * k * k;
          T* out = dz.data() + i * m;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) {
              const T c = up * r[b * k + a];
              for (std::size_t t = 0; t < d; ++t) out[a * d + t] += c * row[b * d + t];
            }
        }
      });
}

template <typename T>
TotalLoss<T> total_loss(const LossInputs<T>& in, const LossWeights& weights, double w_t) {
  weights.validate();
  require(w_t >= 0, "total_loss: ramp weight must be >= 0");
  TotalLoss<T> out;
  out.terms.w_t = w_t;

  LossDiagnostics diag;
  auto ce = cross_entropy_masked(in.student_probs, in.labels, in.labeled_mask, &diag);
  out.terms.ce = ce.value().item();
  out.terms.clamped_probabilities = diag.clamped_probabilities;

  std::vector<Var<T>> reg;
  if (in.teacher_probs) {
    auto c = consistency_loss(in.student_probs, *in.teacher_probs);
    out.terms.consistency = c.value().item();
    reg.push_back(scale(c, static_cast<T>(weights.lambda)));
  } else {
    require(weights.lambda == 0, "total_loss: consistency weight set but no teacher output supplied");
  }

  if (weights.aux != AuxKind::None && in.aux_latent.valid()) {
    require(in.similarity != nullptr, "total_loss: auxiliary loss needs a pair similarity");
    auto a = weights.aux == AuxKind::Sntg
                 ? sntg_loss(in.aux_latent, *in.similarity, static_cast<T>(weights.margin_euclid))
                 : amc_loss(in.aux_latent, *in.similarity, static_cast<T>(weights.margin_angle));
    out.terms.aux = a.value().item();
    reg.push_back(scale(a, static_cast<T>(weights.lambda1)));
  } else {
    require(weights.aux == AuxKind::None || weights.lambda1 == 0,
            "total_loss: auxiliary weight set but no auxiliary latent supplied");
  }

  if (!in.os_latents.empty()) {
    Var<T> os_sum;
    for (const auto& tap : in.os_latents) {
      auto z = weights.normalize_latent ? sphere_project(tap, static_cast<T>(weights.sphere_radius)) : tap;
      auto term = os_loss(z, weights.os_blocks);
      os_sum = os_sum.valid() ? add(os_sum, term) : term;
    }
    out.terms.os = os_sum.value().item();
    reg.push_back(scale(os_sum, static_cast<T>(weights.lambda2)));
  } else {
    require(weights.lambda2 == 0, "total_loss: OS weight set but no latent taps supplied");
  }

  Var<T> total = ce;
  if (!reg.empty()) {
    Var<T> r = reg.front();
    for (std::size_t i = 1; i < reg.size(); ++i) r = add(r, reg[i]);
    total = add(total, scale(r, static_cast<T>(w_t)));
  }
  out.total = total;
  out.terms.total = total.value().item();
  return out;
}

#define OSREG_INSTANTIATE_LOSSES(T)                                                              \
  template std::size_t argmax_row<T>(std::span<const T>);                                       \
  template PairSimilarity build_similarity<T>(const Tensor<T>&,                                  \
                                              std::vector<std::pair<std::size_t, std::size_t>>); \
  template Var<T> cross_entropy_masked(Var<T>, std::span<const int>, std::span<const std::uint8_t>, \
                                       LossDiagnostics*);                                        \
  template Var<T> consistency_loss(Var<T>, const Tensor<T>&);                                    \
  template Var<T> sntg_loss(Var<T>, const PairSimilarity&, T);                                   \
  template Var<T> amc_loss(Var<T>, const PairSimilarity&, T);                                    \
  template Var<T> sphere_project(Var<T>, T);                                                     \
  template Var<T> os_loss(Var<T>, std::size_t);                                                  \
  template TotalLoss<T> total_loss(const LossInputs<T>&, const LossWeights&, double);

OSREG_INSTANTIATE_LOSSES(float)
OSREG_INSTANTIATE_LOSSES(double)

}  // namespace osreg
