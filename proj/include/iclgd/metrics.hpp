#pragma once

// Similarity metrics between ICL and finetuning traces: SimAOU (plain and
// normalized), SimAM on raw attention maps, SimAM_delta on attention-map
// update vectors, and the alpha cross-method variant. Near-zero-norm update
// vectors yield Excluded (not 0) so they never bias an average; exclusion
// counts are carried everywhere.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "iclgd/model.hpp"
#include "iclgd/prng.hpp"

namespace iclgd {

constexpr double kDegenerateNormEps = 1e-12;

// Cosine similarity, or nullopt (Excluded) when either norm is below eps.
inline std::optional<double> cosine(const std::vector<double>& u,
                                    const std::vector<double>& v,
                                    double eps = kDegenerateNormEps) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine: length mismatch");
  }
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += u[i] * u[i];
    vv += v[i] * v[i];
    uv += u[i] * v[i];
  }
  double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu < eps || nv < eps) return std::nullopt;
  return uv / (nu * nv);
}

struct SimilarityScore {
  std::string metric;
  // Per-layer values; nullopt marks a layer fully excluded. Where heads
  // apply, a layer's value is the mean over its non-excluded heads.
  std::vector<std::optional<double>> per_layer;
  std::vector<std::vector<std::optional<double>>> per_head;  // empty for AOU
  double mean = 0.0;     // over non-excluded layers
  double std_dev = 0.0;  // across the averaged (layer) axis, population
  std::size_t excluded_count = 0;
  bool all_excluded = false;

  void finalize() {
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (const auto& v : per_layer) {
      if (!v) continue;
      s += *v;
      s2 += *v * *v;
      ++n;
    }
    if (n == 0) {
      all_excluded = true;
      mean = std_dev = 0.0;
      return;
    }
    mean = s / static_cast<double>(n);
    double var = s2 / static_cast<double>(n) - mean * mean;
    std_dev = std::sqrt(std::max(0.0, var));
  }
};

namespace detail {

inline std::vector<double> normalized(const std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<double> out = v;
  if (n > 0.0)
    for (double& x : out) x /= n;
  return out;
}

inline std::vector<double> diff(const std::vector<double>& a,
                                const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace detail

// Attention-output update similarity at the last test-prompt token:
// per layer, cosine(h_ICL - h_ZSL, h_FT - h_ZSL). With normalize=true each h
// is first divided by its own l2 norm (the variant shown to score 1/4 on
// constructed noise).
inline SimilarityScore sim_aou(const ForwardTrace& icl, const ForwardTrace& ft,
                               const ForwardTrace& zsl, bool normalize) {
  if (icl.n_layers != ft.n_layers || ft.n_layers != zsl.n_layers) {
    throw std::invalid_argument("sim_aou: layer-count mismatch");
  }
  SimilarityScore score;
  score.metric = normalize ? "SimAOU_norm" : "SimAOU";
  for (std::size_t l = 0; l < ft.n_layers; ++l) {
    auto h_icl = icl.attn_out_at(l, icl.seq_len - 1);
    auto h_ft = ft.attn_out_at(l, ft.seq_len - 1);
    auto h_zsl = zsl.attn_out_at(l, zsl.seq_len - 1);
    if (normalize) {
      h_icl = detail::normalized(h_icl);
      h_ft = detail::normalized(h_ft);
      h_zsl = detail::normalized(h_zsl);
    }
    auto c = cosine(detail::diff(h_icl, h_zsl), detail::diff(h_ft, h_zsl));
    if (!c) ++score.excluded_count;
    score.per_layer.push_back(c);
  }
  score.finalize();
  return score;
}

namespace detail {

template <class PairFn>
SimilarityScore map_similarity(const char* name, const ForwardTrace& a,
                               const ForwardTrace& b, PairFn&& per_head_cos) {
  if (a.n_layers != b.n_layers || a.n_heads != b.n_heads ||
      a.seq_len != b.seq_len) {
    throw std::invalid_argument(std::string(name) + ": shape mismatch");
  }
  SimilarityScore score;
  score.metric = name;
  for (std::size_t l = 0; l < a.n_layers; ++l) {
    std::vector<std::optional<double>> heads;
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t h = 0; h < a.n_heads; ++h) {
      std::optional<double> c = per_head_cos(l, h);
      if (c) {
        s += *c;
        ++n;
      } else {
        ++score.excluded_count;
      }
      heads.push_back(c);
    }
    score.per_head.push_back(std::move(heads));
    score.per_layer.push_back(
        n ? std::optional<double>(s / static_cast<double>(n)) : std::nullopt);
  }
  score.finalize();
  return score;
}

}  // namespace detail

// Cosine of the raw flattened unmasked pre-softmax maps; mean over heads then
// layers. Scale-blind to global positive scaling, which is why the shared
// zero-shot component can dominate it.
inline SimilarityScore sim_am(const ForwardTrace& icl, const ForwardTrace& ft) {
  return detail::map_similarity(
      "SimAM", icl, ft, [&](std::size_t l, std::size_t h) {
        return cosine(icl.maps[l][h].unmasked(), ft.maps[l][h].unmasked());
      });
}

// Cosine of attention-map *update* vectors relative to the zero-shot map,
// insensitive to update magnitude.
inline SimilarityScore sim_am_delta(const ForwardTrace& icl,
                                    const ForwardTrace& ft,
                                    const ForwardTrace& zsl) {
  if (zsl.n_layers != ft.n_layers || zsl.n_heads != ft.n_heads ||
      zsl.seq_len != ft.seq_len) {
    throw std::invalid_argument("SimAM_delta: shape mismatch");
  }
  return detail::map_similarity(
      "SimAM_delta", icl, ft, [&](std::size_t l, std::size_t h) {
        auto z = zsl.maps[l][h].unmasked();
        return cosine(detail::diff(icl.maps[l][h].unmasked(), z),
                      detail::diff(ft.maps[l][h].unmasked(), z));
      });
}

// alpha: SimAM_delta between the two finetuning methods' updates, measuring
// how aligned GD and LCGD are in map space.
inline SimilarityScore alpha_gd_lcgd(const ForwardTrace& gd,
                                     const ForwardTrace& lcgd,
                                     const ForwardTrace& zsl) {
  SimilarityScore score = sim_am_delta(lcgd, gd, zsl);
  score.metric = "alpha";
  return score;
}

// --- noise validation ---------------------------------------------------------

struct NoiseCheckResult {
  std::size_t dim = 0;
  std::size_t trials = 0;
  double mean_norm_variant = 0.0;
  double mean_plain_variant = 0.0;
  double std_norm_variant = 0.0;
  double std_plain_variant = 0.0;
  // Random-update baseline: h_rand uniform in [-1, 1]^d against the FT update.
  double mean_rand_norm_variant = 0.0;
  double mean_rand_plain_variant = 0.0;
};

// The constructed-noise experiment: z ~ N(0, I_d), r and r' gaussian rescaled
// so ||r||^2 = ||r'||^2 = 3 ||z||^2, z_ICL = z + r, z_FT = z + r'. The
// normalized SimAOU variant concentrates at 1/4 while the plain variant
// concentrates at 0.
inline NoiseCheckResult noise_simaou_check(std::size_t d, std::size_t trials,
                                           Prng& prng,
                                           bool correlated = false) {
  if (d < 2 || trials < 1) {
    throw std::invalid_argument("noise_simaou_check: d >= 2, trials >= 1");
  }
  auto norm_of = [](const std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    return std::sqrt(n);
  };
  NoiseCheckResult res;
  res.dim = d;
  res.trials = trials;
  double sn = 0.0, sn2 = 0.0, sp = 0.0, sp2 = 0.0, srn = 0.0, srp = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<double> z(d), r(d), r2(d), hr(d);
    for (auto& x : z) x = prng.normal();
    for (auto& x : r) x = prng.normal();
    for (auto& x : r2) x = prng.normal();
    for (auto& x : hr) x = prng.uniform(-1.0, 1.0);
    if (correlated) r2 = r;
    double target = std::sqrt(3.0) * norm_of(z);
    double cr = target / norm_of(r), cr2 = target / norm_of(r2);
    for (auto& x : r) x *= cr;
    for (auto& x : r2) x *= cr2;
    std::vector<double> z_icl(d), z_ft(d);
    for (std::size_t i = 0; i < d; ++i) {
      z_icl[i] = z[i] + r[i];
      z_ft[i] = z[i] + r2[i];
    }
    auto zn = detail::normalized(z);
    auto un = detail::diff(detail::normalized(z_icl), zn);
    auto vn = detail::diff(detail::normalized(z_ft), zn);
    double cn = cosine(un, vn).value();
    double cp = cosine(detail::diff(z_icl, z), detail::diff(z_ft, z)).value();
    sn += cn;
    sn2 += cn * cn;
    sp += cp;
    sp2 += cp * cp;
    srn += cosine(detail::diff(detail::normalized(hr), zn), vn).value();
    srp += cosine(detail::diff(hr, z), detail::diff(z_ft, z)).value();
  }
  double n = static_cast<double>(trials);
  res.mean_norm_variant = sn / n;
  res.mean_plain_variant = sp / n;
  res.std_norm_variant =
      std::sqrt(std::max(0.0, sn2 / n - res.mean_norm_variant * res.mean_norm_variant));
  res.std_plain_variant =
      std::sqrt(std::max(0.0, sp2 / n - res.mean_plain_variant * res.mean_plain_variant));
  res.mean_rand_norm_variant = srn / n;
  res.mean_rand_plain_variant = srp / n;
  return res;
}

// --- layerwise aggregation ------------------------------------------------------

struct LayerwiseAggregate {
  std::vector<double> mean;          // per layer, over non-excluded entries
  std::vector<double> std_dev;       // sample std (n-1), 0 for singletons
  std::vector<std::size_t> counts;   // included entries per layer
  std::vector<std::size_t> excluded; // dropped entries per layer
};

// Per-layer mean and sample std across a collection of scores (task x seed
// pairs), dropping Excluded entries layer by layer.
inline LayerwiseAggregate aggregate_layerwise(
    const std::vector<SimilarityScore>& scores) {
  if (scores.empty()) {
    throw std::invalid_argument("aggregate_layerwise: empty input");
  }
  std::size_t layers = scores[0].per_layer.size();
  for (const auto& s : scores) {
    if (s.per_layer.size() != layers) {
      throw std::invalid_argument("aggregate_layerwise: layer-count mismatch");
    }
  }
  LayerwiseAggregate agg;
  agg.mean.assign(layers, 0.0);
  agg.std_dev.assign(layers, 0.0);
  agg.counts.assign(layers, 0);
  agg.excluded.assign(layers, 0);
  for (std::size_t l = 0; l < layers; ++l) {
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (const auto& sc : scores) {
      if (!sc.per_layer[l]) {
        ++agg.excluded[l];
        continue;
      }
      double v = *sc.per_layer[l];
      s += v;
      s2 += v * v;
      ++n;
    }
    agg.counts[l] = n;
    if (n > 0) agg.mean[l] = s / static_cast<double>(n);
    if (n > 1) {
      double var = (s2 - s * s / static_cast<double>(n)) /
                   static_cast<double>(n - 1);
      agg.std_dev[l] = std::sqrt(std::max(0.0, var));
    }
  }
  return agg;
}

}  // namespace iclgd
