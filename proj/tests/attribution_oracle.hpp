#pragma once

#include "hagd/attribution.hpp"
#include "hagd/model.hpp"
#include "hagd/transcoder.hpp"

namespace hagd::testing {

// Value of downstream feature (q, j) when the upstream feature's activation
// is multiplied by `alpha` before decoding. Forward passes only.
inline double downstream_value(const Transformer& m, const Transcoders& tc, const std::vector<std::size_t>& tokens,
                               const FeatureId& src, std::size_t j, std::size_t q, double alpha) {
  auto trace = forward(m, tokens);
  ad::Tensor f = encode(tc, src.layer, trace.hidden[src.layer]);
  ad::Tensor recon = decode(tc, src.layer, f);
  for (std::size_t p = 0; p < f.rows(); ++p) f.at(p, src.index) *= alpha;
  ad::Tensor injected = decode(tc, src.layer, f);
  ad::Tensor h = trace.hidden[src.layer];
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = injected[i] + (h[i] - recon[i]);
  ad::Tape t(false);
  ad::Var x = m.block(t, src.layer + 1, ad::Var::constant(h), tokens.size());
  return encode(tc, src.layer + 1, x.value()).at(q, j);
}

}  // namespace hagd::testing
