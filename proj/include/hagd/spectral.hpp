#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "hagd/tensor.hpp"

namespace hagd {

// L = I - D^{-1/2} A D^{-1/2}; rows of isolated vertices use D^{-1/2} = 0, so
// their diagonal entry is 1. A must be square, symmetric, nonnegative and
// zero on the diagonal (ContractError otherwise).
ad::Tensor normalized_laplacian(const ad::Tensor& adj);

struct EigenDecomposition {
  std::vector<double> values;  // ascending
  ad::Tensor vectors;          // column i pairs with values[i]
  std::size_t sweeps = 0;
};

// Cyclic Jacobi. Returns the `num_smallest` lowest eigenpairs (all by
// default). Each eigenvector's largest-magnitude entry is made positive.
// Throws NumericError carrying the off-diagonal norm if it fails to converge.
EigenDecomposition symmetric_eigen(const ad::Tensor& a,
                                   std::size_t num_smallest = std::numeric_limits<std::size_t>::max(),
                                   std::size_t max_sweeps = 100);

// Lloyd's algorithm on the rows of `points` with farthest-point seeding from
// a seeded first centre. Ties go to the lowest index; empty clusters are
// refilled with the point farthest from its centre. Labels are renumbered
// in order of first appearance.
std::vector<std::size_t> kmeans(const ad::Tensor& points, std::size_t k, std::uint64_t seed,
                                std::size_t max_iter = 100);

// Spectral clustering of a symmetric nonnegative adjacency into exactly k
// nonempty clusters. Degree-0 vertices are clustered on their own (one
// cluster each while the budget allows, otherwise packed in index order).
std::vector<std::size_t> spectral_partition(const ad::Tensor& adj, std::size_t k, std::uint64_t seed);

// Normalised cut value of a labelling: sum over clusters of cut(C) / vol(C).
double normalized_cut(const ad::Tensor& adj, const std::vector<std::size_t>& labels);

}  // namespace hagd
