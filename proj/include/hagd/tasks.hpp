#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hagd {

enum class TaskKind { mod_arith, parity, sort };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct TaskParams {
  TaskKind kind = TaskKind::mod_arith;
  std::size_t modulus = 13;       // mod_arith
  std::size_t parity_length = 6;  // parity, ≤ 20
  std::size_t sort_length = 5;    // sort, always 5 distinct values
  std::size_t sort_range = 10;    // sort values drawn from [0, sort_range)
};

// Next-token framing for every task: the target is the token that follows
// `tokens`, read off the model's last position.
//   mod_arith: [a, b, =]                     -> (a + b) mod p
//   parity:    [b1 .. bn, =]                 -> b1 xor .. xor bn
//   sort:      [x1 .. x5, SEP, y1 .. yt]     -> y(t+1) of the ascending order
struct TaskInstance {
  std::vector<std::size_t> tokens;
  std::size_t target = 0;
  TaskKind kind = TaskKind::mod_arith;
  TaskParams meta;
};

void validate(const TaskParams& params);
std::size_t vocab_size(const TaskParams& params);
// Longest token sequence the task produces.
std::size_t max_sequence_length(const TaskParams& params);

// Ground-truth label function. Pure; throws InputError on malformed tokens.
std::size_t ground_truth(const TaskParams& params, const std::vector<std::size_t>& tokens);

// count == 0 enumerates every instance in canonical order; otherwise draws
// `count` instances from a generator seeded with `seed`.
std::vector<TaskInstance> generate_task(const TaskParams& params, std::size_t count, std::uint64_t seed);

// Seeded shuffle then split: the first `fraction` of instances go to `first`.
struct TaskSplit {
  std::vector<TaskInstance> first;
  std::vector<TaskInstance> second;
};
TaskSplit split_tasks(std::vector<TaskInstance> tasks, double fraction, std::uint64_t seed);

// Class label used for class-conditional statistics (the target token).
inline std::size_t task_class(const TaskInstance& t) { return t.target; }

}  // namespace hagd
