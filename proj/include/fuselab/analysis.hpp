#pragma once
// Measurement instruments, independent of training: mutual-KNN alignment
// between per-layer representation sets (with heatmap assembly and export),
// linear-probe regression onto standardized targets, and the ACTV
// activation-dump format for running the instruments on external data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace fuselab {

template <typename T>
struct RepresentationSet {
  Tensor<T> points;  // [n_samples, dim]
  std::string label;
};

enum class NeighborMetric { cosine, euclidean };

inline std::string neighbor_metric_name(NeighborMetric m) {
  return m == NeighborMetric::cosine ? "cosine" : "euclidean";
}

inline NeighborMetric neighbor_metric_from(const std::string& s) {
  if (s == "cosine") return NeighborMetric::cosine;
  if (s == "euclidean") return NeighborMetric::euclidean;
  throw config_error("unknown neighbor metric '" + s + "'");
}

namespace detail {

template <typename T>
void check_representation(const RepresentationSet<T>& r, const char* who) {
  if (!r.points.defined() || r.points.rank() != 2) {
    throw contract_error(std::string(who) + ": points must be a [n, dim] tensor");
  }
  if (r.points.dim(0) < 2) {
    throw contract_error(std::string(who) + ": need at least 2 samples, got " +
                         std::to_string(r.points.dim(0)));
  }
  if (!r.points.all_finite()) {
    throw contract_error(std::string(who) + ": non-finite values in '" + r.label + "'");
  }
}

// Per-row neighbor lists of size k, self excluded. Cosine ranks by descending
// similarity over unit-normalized rows, Euclidean by ascending squared
// distance on the raw rows; equal keys break toward the lower sample index.
// Returned lists are sorted by index for cheap intersection.
template <typename T>
std::vector<std::vector<std::size_t>> knn_sets(const Tensor<T>& pts, std::size_t k,
                                               NeighborMetric metric) {
  const std::size_t n = pts.dim(0), d = pts.dim(1);
  std::vector<double> rows(n * d);
  for (std::size_t i = 0; i < n * d; ++i) rows[i] = static_cast<double>(pts.values()[i]);
  if (metric == NeighborMetric::cosine) {
    for (std::size_t i = 0; i < n; ++i) {
      double norm2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm2 += rows[i * d + j] * rows[i * d + j];
      if (norm2 == 0.0) {
        throw contract_error("zero-norm row " + std::to_string(i) +
                             " cannot be cosine-normalized");
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (std::size_t j = 0; j < d; ++j) rows[i * d + j] *= inv;
    }
  }
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t i = 0; i < n; ++i) {
    keyed.clear();
    keyed.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double key = 0.0;
      if (metric == NeighborMetric::cosine) {
        for (std::size_t c = 0; c < d; ++c) key += rows[i * d + c] * rows[j * d + c];
        key = -key;  // sort ascending = highest similarity first
      } else {
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = rows[i * d + c] - rows[j * d + c];
          key += diff * diff;
        }
      }
      keyed.emplace_back(key, j);
    }
    std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end());
    auto& neigh = out[i];
    neigh.reserve(k);
    for (std::size_t t = 0; t < k; ++t) neigh.push_back(keyed[t].second);
    std::sort(neigh.begin(), neigh.end());
  }
  return out;
}

}  // namespace detail

// Mean over samples of |kNN_A(i) n kNN_B(i)| / k. In [0,1]; 1 means the two
// sets induce identical neighborhoods.
template <typename T>
double mutual_knn_alignment(const RepresentationSet<T>& a, const RepresentationSet<T>& b,
                            std::size_t k, NeighborMetric metric = NeighborMetric::cosine) {
  detail::check_representation(a, "mutual_knn_alignment");
  detail::check_representation(b, "mutual_knn_alignment");
  const std::size_t n = a.points.dim(0);
  if (b.points.dim(0) != n) {
    throw contract_error("mutual_knn_alignment: sample counts differ (" + std::to_string(n) +
                         " vs " + std::to_string(b.points.dim(0)) + ")");
  }
  if (k == 0 || k >= n) {
    throw contract_error("mutual_knn_alignment: k must satisfy 1 <= k < n_samples, got k=" +
                         std::to_string(k) + " n=" + std::to_string(n));
  }
  const auto na = detail::knn_sets(a.points, k, metric);
  const auto nb = detail::knn_sets(b.points, k, metric);
  std::size_t total = 0;
  std::vector<std::size_t> common;
  for (std::size_t i = 0; i < n; ++i) {
    common.clear();
    std::set_intersection(na[i].begin(), na[i].end(), nb[i].begin(), nb[i].end(),
                          std::back_inserter(common));
    total += common.size();
  }
  return static_cast<double>(total) / (static_cast<double>(n) * static_cast<double>(k));
}

struct AlignmentHeatmap {
  std::vector<std::vector<double>> scores;  // [lm_layers+1][vit_layers+1]
  std::size_t k = 0;
  NeighborMetric metric = NeighborMetric::cosine;
  std::size_t argmax_row = 0;
  std::size_t argmax_col = 0;
  std::string row_label = "lm layer (aggregate = final token)";
  std::string col_label = "vision layer (aggregate = first token)";
};

namespace detail {

// Stacks one aggregate row per sample from layer `layer` of each capture.
template <typename T>
RepresentationSet<T> layer_aggregates(const std::vector<LayerStates<T>>& per_sample,
                                      std::size_t layer, bool final_row,
                                      const std::string& label) {
  const std::size_t n = per_sample.size();
  const std::size_t d = per_sample[0].states[layer].dim(1);
  std::vector<T> vals;
  vals.reserve(n * d);
  for (const auto& ls : per_sample) {
    const auto& s = ls.states[layer];
    if (s.dim(0) == 0) throw contract_error("layer aggregate: empty state at layer " +
                                            std::to_string(layer));
    const std::size_t row = final_row ? s.dim(0) - 1 : 0;
    for (std::size_t c = 0; c < d; ++c) vals.push_back(s.at(row, c));
  }
  return {Tensor<T>::from_values({n, d}, std::move(vals)), label};
}

template <typename T>
std::size_t common_depth(const std::vector<LayerStates<T>>& per_sample, const char* who) {
  if (per_sample.size() < 2) {
    throw contract_error(std::string(who) + ": need at least 2 samples");
  }
  const std::size_t depth = per_sample[0].states.size();
  for (const auto& ls : per_sample) {
    if (ls.states.size() != depth) {
      throw contract_error(std::string(who) + ": inconsistent layer counts across samples");
    }
  }
  if (depth == 0) throw contract_error(std::string(who) + ": empty layer captures");
  return depth;
}

}  // namespace detail

// Cell (i,j) holds the mutual-KNN score between LM layer-i aggregates (final
// token row) and vision layer-j aggregates (first token row), averaged across
// the shared sample set. Argmax ties resolve to the lowest row, then column.
template <typename T>
AlignmentHeatmap alignment_heatmap(const std::vector<LayerStates<T>>& lm_per_sample,
                                   const std::vector<LayerStates<T>>& vit_per_sample,
                                   std::size_t k,
                                   NeighborMetric metric = NeighborMetric::cosine) {
  const std::size_t lm_depth = detail::common_depth(lm_per_sample, "alignment_heatmap");
  const std::size_t vit_depth = detail::common_depth(vit_per_sample, "alignment_heatmap");
  if (lm_per_sample.size() != vit_per_sample.size()) {
    throw contract_error("alignment_heatmap: sample counts differ (" +
                         std::to_string(lm_per_sample.size()) + " vs " +
                         std::to_string(vit_per_sample.size()) + ")");
  }
  AlignmentHeatmap hm;
  hm.k = k;
  hm.metric = metric;
  hm.scores.assign(lm_depth, std::vector<double>(vit_depth, 0.0));
  std::vector<RepresentationSet<T>> vit_sets;
  vit_sets.reserve(vit_depth);
  for (std::size_t j = 0; j < vit_depth; ++j) {
    vit_sets.push_back(detail::layer_aggregates(vit_per_sample, j, false,
                                                "vision layer " + std::to_string(j)));
  }
  double best = -1.0;
  for (std::size_t i = 0; i < lm_depth; ++i) {
    auto lm_set =
        detail::layer_aggregates(lm_per_sample, i, true, "lm layer " + std::to_string(i));
    for (std::size_t j = 0; j < vit_depth; ++j) {
      const double s = mutual_knn_alignment(lm_set, vit_sets[j], k, metric);
      hm.scores[i][j] = s;
      if (s > best) {
        best = s;
        hm.argmax_row = i;
        hm.argmax_col = j;
      }
    }
  }
  return hm;
}

inline void save_heatmap_csv(const std::string& path, const AlignmentHeatmap& hm) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw format_error(path + ": cannot open for writing");
  out.precision(17);
  for (const auto& row : hm.scores) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out << ",";
      out << row[j];
    }
    out << "\n";
  }
  if (!out) throw format_error(path + ": write failed");
}

inline void save_heatmap_json(const std::string& path, const AlignmentHeatmap& hm) {
  nlohmann::json j;
  j["k"] = hm.k;
  j["metric"] = neighbor_metric_name(hm.metric);
  j["argmax"] = {hm.argmax_row, hm.argmax_col};
  j["labels"] = {{"rows", hm.row_label}, {"cols", hm.col_label}};
  j["shape"] = {hm.scores.size(), hm.scores.empty() ? 0 : hm.scores[0].size()};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw format_error(path + ": cannot open for writing");
  out << j.dump(2) << "\n";
  if (!out) throw format_error(path + ": write failed");
}

// ============================================================================
// Linear probing
// ============================================================================

struct StandardizeStats {
  std::vector<double> mean;
  std::vector<double> variance;          // pre-floor population variance
  std::vector<std::size_t> floored_dims;  // variance below the floor
  double floor = 1e-8;
};

// Shifts and scales each dimension to zero mean and unit variance over the
// sample axis. Dimensions whose variance falls below the floor are scaled by
// the floor instead (constant dimensions land on exact zeros) and reported.
template <typename T>
std::pair<RepresentationSet<T>, StandardizeStats> standardize_targets(
    const RepresentationSet<T>& r) {
  detail::check_representation(r, "standardize_targets");
  const std::size_t n = r.points.dim(0), d = r.points.dim(1);
  StandardizeStats stats;
  stats.mean.resize(d);
  stats.variance.resize(d);
  std::vector<T> out(n * d);
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += static_cast<double>(r.points.at(i, c));
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = static_cast<double>(r.points.at(i, c)) - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(n);
    stats.mean[c] = mean;
    stats.variance[c] = var;
    double denom = var;
    if (var < stats.floor) {
      stats.floored_dims.push_back(c);
      denom = stats.floor;
    }
    const double inv = 1.0 / std::sqrt(denom);
    for (std::size_t i = 0; i < n; ++i) {
      out[i * d + c] = static_cast<T>((static_cast<double>(r.points.at(i, c)) - mean) * inv);
    }
  }
  return {{Tensor<T>::from_values({n, d}, std::move(out)), r.label + " (standardized)"},
          stats};
}

struct ProbeEntry {
  std::string target_label;
  std::vector<double> losses;  // loss before each update
  double final_loss = 0.0;     // after the last update
  StandardizeStats stats;
};

struct ProbeReport {
  std::vector<ProbeEntry> entries;
  std::size_t epochs = 0;
  double lr = 0.0;
};

// One affine map source -> standardized target, trained by full-batch
// gradient descent on the per-element mean squared error. Deterministic in
// the rng; epochs = 0 reports the initial loss untouched.
template <typename T>
ProbeEntry probe_regress(const RepresentationSet<T>& source, const RepresentationSet<T>& target,
                         std::size_t epochs, double lr, Rng& rng) {
  detail::check_representation(source, "probe_regress");
  auto [tgt, stats] = standardize_targets(target);
  const std::size_t n = source.points.dim(0);
  if (tgt.points.dim(0) != n) {
    throw contract_error("probe_regress: sample counts differ (" + std::to_string(n) + " vs " +
                         std::to_string(tgt.points.dim(0)) + ")");
  }
  const std::size_t ds = source.points.dim(1), dt = tgt.points.dim(1);
  auto w = Tensor<T>::normal({ds, dt}, 0.0, 0.01, rng, true);
  auto b = Tensor<T>::zeros({dt}, true);
  ProbeEntry entry;
  entry.target_label = target.label;
  entry.stats = stats;
  auto loss_of = [&] {
    auto diff = sub(add(matmul(source.points, w), b), tgt.points);
    return mean_all(mul(diff, diff));
  };
  for (std::size_t e = 0; e < epochs; ++e) {
    auto loss = loss_of();
    const double lv = static_cast<double>(loss.value());
    if (!std::isfinite(lv)) {
      throw training_error("probe diverged at epoch " + std::to_string(e) + " on '" +
                           target.label + "'");
    }
    entry.losses.push_back(lv);
    backward(loss);
    for (auto* p : {&w, &b}) {
      auto& vals = p->values();
      const auto& g = p->grad();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        vals[i] -= static_cast<T>(lr * static_cast<double>(g[i]));
      }
      p->clear_grad();
    }
  }
  autograd::NoGradGuard ng;
  const double final_loss = static_cast<double>(loss_of().value());
  if (!std::isfinite(final_loss)) {
    throw training_error("probe diverged on '" + target.label + "'");
  }
  entry.final_loss = final_loss;
  return entry;
}

// Probes the same source against the aggregate representations of several LM
// layers (final token row per sample), each standardized independently.
// Entries come back ordered by layer index.
template <typename T>
ProbeReport layer_target_sweep(const RepresentationSet<T>& source,
                               const std::vector<LayerStates<T>>& lm_per_sample,
                               std::vector<std::size_t> layer_indices, std::size_t epochs,
                               double lr, const Rng& rng) {
  ProbeReport report;
  report.epochs = epochs;
  report.lr = lr;
  if (layer_indices.empty()) return report;
  const std::size_t depth = detail::common_depth(lm_per_sample, "layer_target_sweep");
  std::sort(layer_indices.begin(), layer_indices.end());
  for (std::size_t idx : layer_indices) {
    if (idx >= depth) {
      throw range_error("layer_target_sweep: layer " + std::to_string(idx) +
                        " outside capture of " + std::to_string(depth) + " entries");
    }
  }
  for (std::size_t idx : layer_indices) {
    auto target = detail::layer_aggregates(lm_per_sample, idx, true,
                                           "lm layer " + std::to_string(idx) + " aggregate");
    Rng child = rng.child(1000 + idx);
    report.entries.push_back(probe_regress(source, target, epochs, lr, child));
  }
  return report;
}

// ============================================================================
// ACTV activation-dump format
// ============================================================================
// "ACTV" | version u32 | dtype u8 (0=f32, 1=f64) | n_samples u64 | dim u64 |
// label_len u32 | label bytes | row-major little-endian values.

namespace detail {

inline void actv_write(std::ofstream& out, const void* p, std::size_t bytes) {
  if (bytes) out.write(static_cast<const char*>(p), static_cast<std::streamsize>(bytes));
}

inline void actv_read(std::ifstream& in, void* p, std::size_t bytes, const std::string& path,
                      std::size_t offset, const char* what) {
  if (bytes) in.read(static_cast<char*>(p), static_cast<std::streamsize>(bytes));
  if (!in) {
    throw format_error(path + ": truncated reading " + what + " at byte offset " +
                       std::to_string(offset));
  }
}

}  // namespace detail

template <typename T>
void save_activations(const std::string& path, const RepresentationSet<T>& r) {
  detail::check_representation(r, "save_activations");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw format_error(path + ": cannot open for writing");
  out.write("ACTV", 4);
  const std::uint32_t version = 1;
  detail::actv_write(out, &version, 4);
  const std::uint8_t dtype = std::is_same_v<T, float> ? 0 : 1;
  detail::actv_write(out, &dtype, 1);
  const std::uint64_t n = r.points.dim(0), d = r.points.dim(1);
  detail::actv_write(out, &n, 8);
  detail::actv_write(out, &d, 8);
  const std::uint32_t label_len = static_cast<std::uint32_t>(r.label.size());
  detail::actv_write(out, &label_len, 4);
  detail::actv_write(out, r.label.data(), r.label.size());
  detail::actv_write(out, r.points.values().data(), r.points.values().size() * sizeof(T));
  if (!out) throw format_error(path + ": write failed");
}

template <typename T>
RepresentationSet<T> load_activations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error(path + ": cannot open");
  char magic[4];
  detail::actv_read(in, magic, 4, path, 0, "magic");
  if (std::memcmp(magic, "ACTV", 4) != 0) {
    throw format_error(path + ": bad magic at byte offset 0");
  }
  std::uint32_t version = 0;
  detail::actv_read(in, &version, 4, path, 4, "version");
  if (version != 1) {
    throw format_error(path + ": unsupported version " + std::to_string(version) +
                       " at byte offset 4");
  }
  std::uint8_t dtype = 0;
  detail::actv_read(in, &dtype, 1, path, 8, "dtype");
  if (dtype > 1) {
    throw format_error(path + ": unknown dtype code " + std::to_string(dtype) +
                       " at byte offset 8");
  }
  if (dtype == 1 && std::is_same_v<T, float>) {
    throw format_error(path + ": refusing to narrow f64 activations into a 32-bit reader");
  }
  std::uint64_t n = 0, d = 0;
  detail::actv_read(in, &n, 8, path, 9, "sample count");
  detail::actv_read(in, &d, 8, path, 17, "dimension");
  std::uint32_t label_len = 0;
  detail::actv_read(in, &label_len, 4, path, 25, "label length");
  std::string label(label_len, '\0');
  detail::actv_read(in, label.data(), label_len, path, 29, "label");
  const std::size_t payload_at = 29 + label_len;
  std::vector<T> vals(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
  if (dtype == 0) {
    std::vector<float> raw(vals.size());
    detail::actv_read(in, raw.data(), raw.size() * 4, path, payload_at, "values");
    for (std::size_t i = 0; i < raw.size(); ++i) vals[i] = static_cast<T>(raw[i]);
  } else {
    std::vector<double> raw(vals.size());
    detail::actv_read(in, raw.data(), raw.size() * 8, path, payload_at, "values");
    for (std::size_t i = 0; i < raw.size(); ++i) vals[i] = static_cast<T>(raw[i]);
  }
  return {Tensor<T>::from_values({static_cast<std::size_t>(n), static_cast<std::size_t>(d)},
                                 std::move(vals)),
          label};
}

}  // namespace fuselab
