#include "tcil/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "tcil/errors.hpp"

namespace tcil {

double median_objective(const std::vector<std::vector<double>>& points,
                        const std::vector<double>& y) {
  double obj = 0.0;
  for (const auto& p : points) {
    double sq = 0.0;
    for (size_t d = 0; d < y.size(); ++d) {
      double diff = p[d] - y[d];
      sq += diff * diff;
    }
    obj += std::sqrt(sq);
  }
  return obj;
}

GeometricMedianResult geometric_median(const std::vector<std::vector<double>>& points,
                                       double tol, int max_iterations) {
  if (points.empty()) throw input_error("geometric_median: no points");
  size_t dim = points[0].size();
  for (const auto& p : points)
    if (p.size() != dim) throw input_error("geometric_median: inconsistent dimensions");

  GeometricMedianResult result;
  if (points.size() == 1) {
    result.point = points[0];
    result.converged = true;
    return result;
  }

  // Start from the centroid.
  std::vector<double> y(dim, 0.0);
  for (const auto& p : points)
    for (size_t d = 0; d < dim; ++d) y[d] += p[d];
  for (double& v : y) v /= static_cast<double>(points.size());

  std::vector<double> best = y;
  double best_obj = median_objective(points, y);

  for (int it = 0; it < max_iterations; ++it) {
    result.iterations = it + 1;
    std::vector<double> numer(dim, 0.0);
    double denom = 0.0;
    int coincident = -1;
    for (size_t i = 0; i < points.size(); ++i) {
      double sq = 0.0;
      for (size_t d = 0; d < dim; ++d) {
        double diff = points[i][d] - y[d];
        sq += diff * diff;
      }
      double dist = std::sqrt(sq);
      if (dist < 1e-14) {
        coincident = static_cast<int>(i);
        continue;
      }
      double w = 1.0 / dist;
      denom += w;
      for (size_t d = 0; d < dim; ++d) numer[d] += points[i][d] * w;
    }

    std::vector<double> next(dim, 0.0);
    if (coincident >= 0) {
      if (denom == 0.0) {
        // All points coincide with y.
        result.point = y;
        result.converged = true;
        return result;
      }
      // Subgradient at a data point: r points toward the weighted centroid
      // of the others; |r| <= 1 certifies optimality, otherwise step along it.
      std::vector<double> r(dim, 0.0);
      for (size_t i = 0; i < points.size(); ++i) {
        if (static_cast<int>(i) == coincident) continue;
        double sq = 0.0;
        for (size_t d = 0; d < dim; ++d) {
          double diff = points[i][d] - y[d];
          sq += diff * diff;
        }
        double dist = std::sqrt(sq);
        if (dist < 1e-14) continue;
        for (size_t d = 0; d < dim; ++d) r[d] += (points[i][d] - y[d]) / dist;
      }
      double rn = std::sqrt(std::inner_product(r.begin(), r.end(), r.begin(), 0.0));
      if (rn <= 1.0) {
        result.point = y;
        result.converged = true;
        return result;
      }
      double step = (rn - 1.0) / denom;
      for (size_t d = 0; d < dim; ++d) next[d] = y[d] + step * r[d] / rn;
    } else {
      for (size_t d = 0; d < dim; ++d) next[d] = numer[d] / denom;
    }

    double move_sq = 0.0;
    for (size_t d = 0; d < dim; ++d) {
      double diff = next[d] - y[d];
      move_sq += diff * diff;
    }
    y = std::move(next);
    double obj = median_objective(points, y);
    if (obj < best_obj) {
      best_obj = obj;
      best = y;
    }
    if (std::sqrt(move_sq) < tol) {
      result.point = y;
      result.converged = true;
      return result;
    }
  }

  std::cerr << "[pruning] warning: geometric median did not converge in "
            << max_iterations << " iterations\n";
  result.point = best;
  result.converged = false;
  return result;
}

void PruneConfig::validate() const {
  if (mode == PruneMode::ratio && (ratio < 0.0 || ratio > 1.0))
    throw config_error("prune ratio must be in [0,1]");
  if (mode == PruneMode::threshold && (threshold < 0.0 || threshold > 1.0))
    throw config_error("prune threshold must be in [0,1]");
}

namespace {

std::vector<double> distances_to_median(const std::vector<std::vector<double>>& filters,
                                        double tol) {
  auto median = geometric_median(filters, tol);
  std::vector<double> dist(filters.size());
  for (size_t i = 0; i < filters.size(); ++i) {
    double sq = 0.0;
    for (size_t d = 0; d < filters[i].size(); ++d) {
      double diff = filters[i][d] - median.point[d];
      sq += diff * diff;
    }
    dist[i] = std::sqrt(sq);
  }
  return dist;
}

}  // namespace

PruneDecision prune_layer(const std::vector<std::vector<double>>& filters,
                          const PruneConfig& config) {
  config.validate();
  int n = static_cast<int>(filters.size());
  if (n < 2) throw input_error("prune_layer: needs at least 2 filters");

  std::vector<bool> removed_mask(static_cast<size_t>(n), false);
  if (config.mode == PruneMode::ratio) {
    int n_remove = static_cast<int>(std::lround(config.ratio * n));
    if (n_remove >= n) {
      std::cerr << "[pruning] warning: ratio " << config.ratio
                << " would remove every filter; keeping 1\n";
      n_remove = n - 1;
    }
    if (n_remove > 0) {
      auto dist = distances_to_median(filters, config.median_tol);
      std::vector<int> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dist[static_cast<size_t>(a)] < dist[static_cast<size_t>(b)];
      });
      for (int i = 0; i < n_remove; ++i) removed_mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;
    }
  } else {
    auto dist = distances_to_median(filters, config.median_tol);
    auto norm = [&](int i) {
      double s = 0.0;
      for (double v : filters[static_cast<size_t>(i)]) s += v * v;
      return std::sqrt(s);
    };
    struct Pair {
      double sim;
      int a, b;
    };
    std::vector<Pair> pairs;
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        double dot = 0.0;
        for (size_t d = 0; d < filters[static_cast<size_t>(a)].size(); ++d)
          dot += filters[static_cast<size_t>(a)][d] * filters[static_cast<size_t>(b)][d];
        double na = norm(a), nb = norm(b);
        double sim = (na > 0 && nb > 0) ? dot / (na * nb) : 1.0;
        if (sim > config.threshold) pairs.push_back({sim, a, b});
      }
    }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const Pair& x, const Pair& y) { return x.sim > y.sim; });
    int alive = n;
    for (const Pair& p : pairs) {
      if (alive <= 1) break;
      if (removed_mask[static_cast<size_t>(p.a)] || removed_mask[static_cast<size_t>(p.b)]) continue;
      // Of a redundant pair, drop the one nearer the median.
      int victim = dist[static_cast<size_t>(p.a)] <= dist[static_cast<size_t>(p.b)] ? p.a : p.b;
      removed_mask[static_cast<size_t>(victim)] = true;
      --alive;
    }
  }

  PruneDecision out;
  for (int i = 0; i < n; ++i)
    (removed_mask[static_cast<size_t>(i)] ? out.removed : out.kept).push_back(i);
  return out;
}

namespace {

void shrink_norm(InstanceNormLayer& norm, const std::vector<int>& keep) {
  bool trainable = norm.gain.requires_grad();
  Tensor g = Tensor::zeros({static_cast<int>(keep.size())}, trainable);
  Tensor b = Tensor::zeros({static_cast<int>(keep.size())}, trainable);
  for (size_t i = 0; i < keep.size(); ++i) {
    g.data()[i] = norm.gain.data()[static_cast<size_t>(keep[i])];
    b.data()[i] = norm.bias.data()[static_cast<size_t>(keep[i])];
  }
  norm.gain = g;
  norm.bias = b;
}

std::vector<std::vector<double>> conv_filters(const Conv2dLayer& conv) {
  int cout = conv.weight.shape()[0];
  size_t per = conv.weight.data().size() / static_cast<size_t>(cout);
  std::vector<std::vector<double>> filters(static_cast<size_t>(cout));
  for (int o = 0; o < cout; ++o)
    filters[static_cast<size_t>(o)].assign(conv.weight.data().begin() + o * per,
                                           conv.weight.data().begin() + (o + 1) * per);
  return filters;
}

// Rebuilds a conv keeping the listed output filters and input channels.
void shrink_conv(Conv2dLayer& conv, const std::vector<int>& out_keep,
                 const std::vector<int>& in_keep) {
  int kh = conv.weight.shape()[2], kw = conv.weight.shape()[3];
  int cin_old = conv.weight.shape()[1];
  int cout_new = static_cast<int>(out_keep.size());
  int cin_new = static_cast<int>(in_keep.size());
  bool trainable = conv.weight.requires_grad();
  Tensor w = Tensor::zeros({cout_new, cin_new, kh, kw}, trainable);
  Tensor b = Tensor::zeros({cout_new}, trainable);
  for (int o = 0; o < cout_new; ++o) {
    b.data()[static_cast<size_t>(o)] = conv.bias.data()[static_cast<size_t>(out_keep[static_cast<size_t>(o)])];
    for (int i = 0; i < cin_new; ++i) {
      for (int y = 0; y < kh; ++y)
        for (int x = 0; x < kw; ++x) {
          size_t src = ((static_cast<size_t>(out_keep[static_cast<size_t>(o)]) * cin_old +
                         in_keep[static_cast<size_t>(i)]) *
                            kh +
                        y) *
                           kw +
                       x;
          size_t dst = ((static_cast<size_t>(o) * cin_new + i) * kh + y) * kw + x;
          w.data()[dst] = conv.weight.data()[src];
        }
    }
  }
  conv.weight = w;
  conv.bias = b;
}

void drop_linear_columns(LinearLayer& layer, const std::vector<int>& keep_cols) {
  int out_dim = layer.weight.shape()[0];
  int in_old = layer.weight.shape()[1];
  int in_new = static_cast<int>(keep_cols.size());
  bool trainable = layer.weight.requires_grad();
  Tensor w = Tensor::zeros({out_dim, in_new}, trainable);
  for (int o = 0; o < out_dim; ++o)
    for (int i = 0; i < in_new; ++i)
      w.data()[static_cast<size_t>(o) * in_new + i] =
          layer.weight.data()[static_cast<size_t>(o) * in_old + keep_cols[static_cast<size_t>(i)]];
  layer.weight = w;
}

void drop_linear_rows(LinearLayer& layer, const std::vector<int>& keep_rows) {
  int in_dim = layer.weight.shape()[1];
  int out_new = static_cast<int>(keep_rows.size());
  bool trainable = layer.weight.requires_grad();
  Tensor w = Tensor::zeros({out_new, in_dim}, trainable);
  Tensor b = Tensor::zeros({out_new}, trainable);
  for (int o = 0; o < out_new; ++o) {
    int src = keep_rows[static_cast<size_t>(o)];
    b.data()[static_cast<size_t>(o)] = layer.bias.data()[static_cast<size_t>(src)];
    for (int i = 0; i < in_dim; ++i)
      w.data()[static_cast<size_t>(o) * in_dim + i] =
          layer.weight.data()[static_cast<size_t>(src) * in_dim + i];
  }
  layer.weight = w;
  layer.bias = b;
}

void drop_classifier_columns(GrowingClassifier& clf, const std::vector<int>& keep_cols) {
  int rows = clf.weight.shape()[0];
  int in_old = clf.weight.shape()[1];
  int in_new = static_cast<int>(keep_cols.size());
  bool trainable = clf.weight.requires_grad();
  Tensor w = Tensor::zeros({rows, in_new}, trainable);
  for (int r = 0; r < rows; ++r)
    for (int i = 0; i < in_new; ++i)
      w.data()[static_cast<size_t>(r) * in_new + i] =
          clf.weight.data()[static_cast<size_t>(r) * in_old + keep_cols[static_cast<size_t>(i)]];
  clf.weight = w;
}

}  // namespace

void prune_extractor(DeaModel& model, int extractor_index, const PruneConfig& config) {
  config.validate();
  if (extractor_index < 0 || extractor_index >= model.num_extractors())
    throw input_error("prune_extractor: no extractor " + std::to_string(extractor_index));
  Extractor& ext = model.extractor(extractor_index);

  // Fused-channel offset of this extractor's block before surgery.
  int block_offset = 0;
  for (int i = 0; i < extractor_index; ++i) block_offset += model.extractor(i).out_channels();
  int block_size = ext.out_channels();

  std::vector<int> final_kept;  // positions within the current final conv
  for (size_t layer = 0; layer < ext.convs.size(); ++layer) {
    Conv2dLayer& conv = ext.convs[layer];
    PruneDecision decision = prune_layer(conv_filters(conv), config);

    // Inputs were already rewired when the previous layer shrank.
    std::vector<int> in_keep(static_cast<size_t>(conv.weight.shape()[1]));
    std::iota(in_keep.begin(), in_keep.end(), 0);
    shrink_conv(conv, decision.kept, in_keep);
    shrink_norm(ext.norms[layer], decision.kept);
    if (layer + 1 < ext.convs.size()) {
      // Rewire the next conv's input channels now, so its own pruning sees
      // consistent filters.
      std::vector<int> next_out_all(static_cast<size_t>(ext.convs[layer + 1].out_channels()));
      std::iota(next_out_all.begin(), next_out_all.end(), 0);
      shrink_conv(ext.convs[layer + 1], next_out_all, decision.kept);
    } else {
      final_kept = decision.kept;
    }

    // Compose kept indices in the original architecture space.
    std::vector<int> composed;
    composed.reserve(decision.kept.size());
    for (int pos : decision.kept)
      composed.push_back(ext.kept_indices[layer][static_cast<size_t>(pos)]);
    ext.kept_indices[layer] = std::move(composed);
  }

  // Fused space: keep all other blocks, keep the surviving channels here.
  int fused_before = block_offset + block_size;
  for (int i = extractor_index + 1; i < model.num_extractors(); ++i)
    fused_before += model.extractor(i).out_channels();
  std::vector<int> fused_keep;
  for (int c = 0; c < block_offset; ++c) fused_keep.push_back(c);
  for (int pos : final_kept) fused_keep.push_back(block_offset + pos);
  for (int c = block_offset + block_size; c < fused_before; ++c) fused_keep.push_back(c);

  FusionModule& fusion = model.fusion();
  drop_linear_columns(fusion.channel_mlp.fc1, fused_keep);
  drop_linear_rows(fusion.channel_mlp.fc2, fused_keep);
  fusion.channels = static_cast<int>(fused_keep.size());
  drop_classifier_columns(model.classifier(), fused_keep);
}

PruneReport prune_model(DeaModel& model, const PruneConfig& config) {
  PruneReport report;
  report.params_before = model.parameter_count();
  for (int i = 0; i < model.num_extractors(); ++i) prune_extractor(model, i, config);

  // The channel-MLP bottleneck keeps its width when only input channels are
  // dropped; prune its hidden units by the same criterion, once.
  Mlp& mlp = model.fusion().channel_mlp;
  int hidden = mlp.fc1.out_dim();
  if (hidden >= 2) {
    int in_dim = mlp.fc1.in_dim();
    std::vector<std::vector<double>> units(static_cast<size_t>(hidden));
    for (int h = 0; h < hidden; ++h)
      units[static_cast<size_t>(h)].assign(
          mlp.fc1.weight.data().begin() + static_cast<long>(h) * in_dim,
          mlp.fc1.weight.data().begin() + static_cast<long>(h + 1) * in_dim);
    PruneDecision decision = prune_layer(units, config);
    drop_linear_rows(mlp.fc1, decision.kept);
    drop_linear_columns(mlp.fc2, decision.kept);
  }

  // Row norms changed with the dropped columns; refresh gamma.
  if (model.step() >= 2 && model.rescore_state()) model.compute_gamma_now();
  report.params_after = model.parameter_count();
  return report;
}

}  // namespace tcil
