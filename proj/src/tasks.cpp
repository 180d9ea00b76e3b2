#include "hagd/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "hagd/error.hpp"

namespace hagd {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::mod_arith: return "mod_arith";
    case TaskKind::parity: return "parity";
    case TaskKind::sort: return "sort";
  }
  return "unknown";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "mod_arith") return TaskKind::mod_arith;
  if (s == "parity") return TaskKind::parity;
  if (s == "sort") return TaskKind::sort;
  throw ParameterError("unknown task kind '" + s + "'");
}

void validate(const TaskParams& p) {
  switch (p.kind) {
    case TaskKind::mod_arith:
      if (p.modulus < 2) throw ParameterError("mod_arith: modulus must be >= 2");
      break;
    case TaskKind::parity:
      if (p.parity_length < 1 || p.parity_length > 20)
        throw ParameterError("parity: length must be in [1, 20]");
      break;
    case TaskKind::sort:
      if (p.sort_length != 5) throw ParameterError("sort: sequences hold exactly 5 distinct values");
      if (p.sort_range < p.sort_length) throw ParameterError("sort: value range smaller than sequence length");
      break;
  }
}

std::size_t vocab_size(const TaskParams& p) {
  switch (p.kind) {
    case TaskKind::mod_arith: return p.modulus + 1;
    case TaskKind::parity: return 3;
    case TaskKind::sort: return p.sort_range + 1;
  }
  return 0;
}

std::size_t max_sequence_length(const TaskParams& p) {
  switch (p.kind) {
    case TaskKind::mod_arith: return 3;
    case TaskKind::parity: return p.parity_length + 1;
    case TaskKind::sort: return 2 * p.sort_length;
  }
  return 0;
}

std::size_t ground_truth(const TaskParams& p, const std::vector<std::size_t>& tokens) {
  switch (p.kind) {
    case TaskKind::mod_arith: {
      if (tokens.size() != 3 || tokens[0] >= p.modulus || tokens[1] >= p.modulus || tokens[2] != p.modulus)
        throw InputError("mod_arith: expected [a, b, =]");
      return (tokens[0] + tokens[1]) % p.modulus;
    }
    case TaskKind::parity: {
      if (tokens.size() != p.parity_length + 1 || tokens.back() != 2)
        throw InputError("parity: expected bits followed by '='");
      std::size_t x = 0;
      for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        if (tokens[i] > 1) throw InputError("parity: non-bit token");
        x ^= tokens[i];
      }
      return x;
    }
    case TaskKind::sort: {
      const std::size_t n = p.sort_length, sep = p.sort_range;
      if (tokens.size() < n + 1 || tokens.size() > 2 * n || tokens[n] != sep)
        throw InputError("sort: expected 5 values, separator, partial output");
      std::vector<std::size_t> xs(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n));
      std::sort(xs.begin(), xs.end());
      return xs[tokens.size() - n - 1];
    }
  }
  throw InputError("unknown task");
}

namespace {

TaskInstance make(const TaskParams& p, std::vector<std::size_t> tokens) {
  TaskInstance t;
  t.target = ground_truth(p, tokens);
  t.tokens = std::move(tokens);
  t.kind = p.kind;
  t.meta = p;
  return t;
}

void emit_sort(const TaskParams& p, const std::vector<std::size_t>& xs, std::vector<TaskInstance>& out) {
  std::vector<std::size_t> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> tokens = xs;
  tokens.push_back(p.sort_range);
  for (std::size_t t = 0; t < p.sort_length; ++t) {
    out.push_back(make(p, tokens));
    tokens.push_back(sorted[t]);
  }
}

}  // namespace

std::vector<TaskInstance> generate_task(const TaskParams& p, std::size_t count, std::uint64_t seed) {
  validate(p);
  std::vector<TaskInstance> out;
  std::mt19937_64 rng(seed);
  switch (p.kind) {
    case TaskKind::mod_arith: {
      if (count == 0) {
        for (std::size_t a = 0; a < p.modulus; ++a)
          for (std::size_t b = 0; b < p.modulus; ++b) out.push_back(make(p, {a, b, p.modulus}));
      } else {
        std::uniform_int_distribution<std::size_t> u(0, p.modulus - 1);
        for (std::size_t i = 0; i < count; ++i) {
          std::size_t a = u(rng);
          std::size_t b = u(rng);
          out.push_back(make(p, {a, b, p.modulus}));
        }
      }
      break;
    }
    case TaskKind::parity: {
      const std::size_t n = p.parity_length;
      auto bits_of = [&](std::uint64_t code) {
        std::vector<std::size_t> tokens(n + 1, 2);
        for (std::size_t i = 0; i < n; ++i) tokens[i] = (code >> (n - 1 - i)) & 1u;
        return tokens;
      };
      if (count == 0) {
        for (std::uint64_t code = 0; code < (std::uint64_t{1} << n); ++code) out.push_back(make(p, bits_of(code)));
      } else {
        std::uniform_int_distribution<std::uint64_t> u(0, (std::uint64_t{1} << n) - 1);
        for (std::size_t i = 0; i < count; ++i) out.push_back(make(p, bits_of(u(rng))));
      }
      break;
    }
    case TaskKind::sort: {
      const std::size_t n = p.sort_length;
      if (count == 0) {
        std::vector<std::size_t> xs(n);
        // All ordered selections of n distinct values.
        auto rec = [&](auto&& self, std::size_t depth, std::vector<bool>& used) -> void {
          if (depth == n) {
            emit_sort(p, xs, out);
            return;
          }
          for (std::size_t v = 0; v < p.sort_range; ++v) {
            if (used[v]) continue;
            used[v] = true;
            xs[depth] = v;
            self(self, depth + 1, used);
            used[v] = false;
          }
        };
        std::vector<bool> used(p.sort_range, false);
        rec(rec, 0, used);
      } else {
        std::vector<std::size_t> pool(p.sort_range);
        while (out.size() < count) {
          std::iota(pool.begin(), pool.end(), std::size_t{0});
          std::shuffle(pool.begin(), pool.end(), rng);
          emit_sort(p, std::vector<std::size_t>(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n)), out);
        }
        out.resize(count);
      }
      break;
    }
  }
  return out;
}

TaskSplit split_tasks(std::vector<TaskInstance> tasks, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) throw ParameterError("split fraction must be in [0, 1]");
  std::mt19937_64 rng(seed);
  std::shuffle(tasks.begin(), tasks.end(), rng);
  const auto cut = static_cast<std::size_t>(fraction * static_cast<double>(tasks.size()) + 0.5);
  TaskSplit s;
  s.first.assign(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(cut));
  s.second.assign(tasks.begin() + static_cast<std::ptrdiff_t>(cut), tasks.end());
  return s;
}

}  // namespace hagd
