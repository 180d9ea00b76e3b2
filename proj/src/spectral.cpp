#include "hagd/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "hagd/error.hpp"

namespace hagd {

using ad::Tensor;

Tensor normalized_laplacian(const Tensor& adj) {
  const std::size_t n = adj.rows();
  if (adj.rank() != 2 || adj.cols() != n) throw ContractError("laplacian: adjacency must be square");
  double scale = 0.0;
  for (double v : adj.data()) scale = std::max(scale, std::abs(v));
  const double tol = 1e-12 * std::max(1.0, scale);
  for (std::size_t i = 0; i < n; ++i) {
    if (adj.at(i, i) != 0.0) throw ContractError("laplacian: adjacency has a nonzero diagonal");
    for (std::size_t j = 0; j < n; ++j) {
      if (adj.at(i, j) < 0.0) throw ContractError("laplacian: negative adjacency weight");
      if (std::abs(adj.at(i, j) - adj.at(j, i)) > tol) throw ContractError("laplacian: adjacency is not symmetric");
    }
  }
  std::vector<double> inv_sqrt(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += adj.at(i, j);
    inv_sqrt[i] = deg > 0.0 ? 1.0 / std::sqrt(deg) : 0.0;
  }
  Tensor lap({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      // Average the two triangles so the result is exactly symmetric.
      const double a = 0.5 * (adj.at(i, j) + adj.at(j, i));
      lap.at(i, j) = (i == j ? 1.0 : 0.0) - (inv_sqrt[i] * inv_sqrt[j]) * a;
    }
  return lap;
}

EigenDecomposition symmetric_eigen(const Tensor& input, std::size_t num_smallest, std::size_t max_sweeps) {
  const std::size_t n = input.rows();
  if (input.rank() != 2 || input.cols() != n) throw ContractError("symmetric_eigen: matrix must be square");
  double fro = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      fro += input.at(i, j) * input.at(i, j);
      if (std::abs(input.at(i, j) - input.at(j, i)) > 1e-12 * (1.0 + std::abs(input.at(i, j))))
        throw ContractError("symmetric_eigen: matrix is not symmetric");
    }
  fro = std::sqrt(fro);

  std::vector<double> a(n * n), v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = 0.5 * (input.at(i, j) + input.at(j, i));
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) s += a[p * n + q] * a[p * n + q];
    return std::sqrt(2.0 * s);
  };
  const double target = 1e-14 * fro;
  EigenDecomposition out;
  double off = off_norm();
  while (off > target) {
    if (out.sweeps == max_sweeps)
      throw NumericError("symmetric_eigen: no convergence after " + std::to_string(max_sweeps) +
                             " sweeps (off-diagonal norm " + std::to_string(off) + ")",
                         off);
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p], aqq = a[q * n + q];
        // Skip rotations that can no longer move the diagonal.
        if (out.sweeps > 3 && std::abs(apq) < 1e-18 * (std::abs(app) + std::abs(aqq))) {
          a[p * n + q] = a[q * n + p] = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        a[p * n + q] = a[q * n + p] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    off = off_norm();
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x * n + x] < a[y * n + y]; });
  const std::size_t keep = std::min(num_smallest, n);
  out.vectors = Tensor({n, keep}, 0.0);
  for (std::size_t c = 0; c < keep; ++c) {
    const std::size_t src = order[c];
    out.values.push_back(a[src * n + src]);
    std::size_t big = 0;
    for (std::size_t r = 1; r < n; ++r)
      if (std::abs(v[r * n + src]) > std::abs(v[big * n + src]) + 1e-12) big = r;
    const double sign = v[big * n + src] < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) out.vectors.at(r, c) = sign * v[r * n + src];
  }
  return out;
}

namespace {

double sq_dist(const Tensor& pts, std::size_t i, const std::vector<double>& c) {
  double s = 0.0;
  for (std::size_t j = 0; j < c.size(); ++j) s += (pts.at(i, j) - c[j]) * (pts.at(i, j) - c[j]);
  return s;
}

std::vector<std::size_t> canonical(const std::vector<std::size_t>& labels) {
  std::map<std::size_t, std::size_t> remap;
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = remap.emplace(labels[i], remap.size());
    out[i] = it->second;
  }
  return out;
}

}  // namespace

std::vector<std::size_t> kmeans(const Tensor& pts, std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  const std::size_t n = pts.rows(), dim = pts.rank() == 2 ? pts.cols() : 1;
  if (k == 0 || k > n) throw ParameterError("kmeans: k must be in [1, n]");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> centres;
  auto row = [&](std::size_t i) {
    std::vector<double> r(dim);
    for (std::size_t j = 0; j < dim; ++j) r[j] = pts.at(i, j);
    return r;
  };
  centres.push_back(row(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)));
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = sq_dist(pts, i, centres[0]);
  std::vector<bool> used(n, false);
  while (centres.size() < k) {
    std::size_t far = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i)
      if (nearest[i] > best) best = nearest[i], far = i;
    centres.push_back(row(far));
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sq_dist(pts, i, centres.back()));
  }

  std::vector<std::size_t> label(n, 0);
  for (std::size_t iter = 0; iter <= max_iter; ++iter) {
    bool changed = iter == 0;
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double best = sq_dist(pts, i, centres[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = sq_dist(pts, i, centres[c]);
        if (d < best) best = d, arg = c;
      }
      if (label[i] != arg) changed = true;
      label[i] = arg;
      dist[i] = best;
    }
    // Refill empty clusters with the worst-fitting points of clusters that
    // can spare one.
    std::vector<std::size_t> count(k, 0);
    for (std::size_t l : label) ++count[l];
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) continue;
      std::size_t pick = n;
      for (std::size_t i = 0; i < n; ++i)
        if (count[label[i]] > 1 && (pick == n || dist[i] > dist[pick])) pick = i;
      --count[label[pick]];
      label[pick] = c;
      dist[pick] = 0.0;
      ++count[c];
      changed = true;
    }
    if (!changed || iter == max_iter) break;
    for (std::size_t c = 0; c < k; ++c) std::fill(centres[c].begin(), centres[c].end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dim; ++j) centres[label[i]][j] += pts.at(i, j);
    for (std::size_t c = 0; c < k; ++c)
      for (double& x : centres[c]) x /= static_cast<double>(count[c]);
  }
  return canonical(label);
}

namespace {

std::vector<std::size_t> spectral_connected(const Tensor& adj, std::size_t k, std::uint64_t seed) {
  const std::size_t n = adj.rows();
  if (k == 1) return std::vector<std::size_t>(n, 0);
  if (k == n) {
    std::vector<std::size_t> out(n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  // The k smallest eigenvectors minus the trivial one.
  const std::size_t dims = k - 1;
  EigenDecomposition eig = symmetric_eigen(normalized_laplacian(adj), k);
  Tensor emb({n, dims}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < dims; ++c) norm += eig.vectors.at(i, c + 1) * eig.vectors.at(i, c + 1);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < dims; ++c) emb.at(i, c) = norm > 0.0 ? eig.vectors.at(i, c + 1) / norm : 0.0;
  }
  return kmeans(emb, k, seed);
}

}  // namespace

std::vector<std::size_t> spectral_partition(const Tensor& adj, std::size_t k, std::uint64_t seed) {
  const std::size_t n = adj.rows();
  if (n == 0) throw ParameterError("spectral_partition: empty graph");
  if (k == 0 || k > n)
    throw ParameterError("spectral_partition: cluster count " + std::to_string(k) + " outside [1, " +
                         std::to_string(n) + "]");
  normalized_laplacian(adj);  // validates the adjacency
  std::vector<std::size_t> isolated, linked;
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += adj.at(i, j);
    (deg > 0.0 ? linked : isolated).push_back(i);
  }
  if (isolated.empty()) return spectral_connected(adj, k, seed);

  std::vector<std::size_t> labels(n, 0);
  std::size_t k_iso;
  if (linked.empty()) {
    k_iso = k;
  } else if (isolated.size() + 1 <= k && k - isolated.size() <= linked.size()) {
    k_iso = isolated.size();
  } else {
    const double share = static_cast<double>(k) * static_cast<double>(isolated.size()) / static_cast<double>(n);
    k_iso = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(share)));
    k_iso = std::min({k_iso, isolated.size(), k - 1});
    // The linked part must be able to fill its clusters.
    if (k - k_iso > linked.size()) k_iso = k - linked.size();
  }
  // Isolated vertices in index order, split into k_iso contiguous groups.
  for (std::size_t i = 0; i < isolated.size(); ++i) labels[isolated[i]] = i * k_iso / isolated.size();
  if (!linked.empty()) {
    Tensor sub({linked.size(), linked.size()}, 0.0);
    for (std::size_t a = 0; a < linked.size(); ++a)
      for (std::size_t b = 0; b < linked.size(); ++b) sub.at(a, b) = adj.at(linked[a], linked[b]);
    auto inner = spectral_connected(sub, k - k_iso, seed);
    for (std::size_t a = 0; a < linked.size(); ++a) labels[linked[a]] = k_iso + inner[a];
  }
  return canonical(labels);
}

double normalized_cut(const Tensor& adj, const std::vector<std::size_t>& labels) {
  std::map<std::size_t, std::pair<double, double>> per;  // cut, volume
  const std::size_t n = adj.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      per[labels[i]].second += adj.at(i, j);
      if (labels[i] != labels[j]) per[labels[i]].first += adj.at(i, j);
    }
  double total = 0.0;
  for (const auto& [c, cv] : per)
    if (cv.second > 0.0) total += cv.first / cv.second;
  return total;
}

}  // namespace hagd
