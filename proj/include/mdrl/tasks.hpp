#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "mdrl/rng.hpp"
#include "mdrl/vocab.hpp"

namespace mdrl {

// Desk-scale tasks with deterministic, verifiable rewards.
//
//   countdown  prompt [target n1 n2 n3] (single-digit target), completion is
//              a flat expression d op d op d over {+,-,*} with the usual
//              precedence. 1.0 for hitting the target with exactly the given
//              numbers, 0.1 for the right numbers but the wrong value,
//              0 otherwise.
//   sudoku4    prompt is a solved 4x4 grid (rows, columns and 2x2 boxes all
//              constrain) with 4-8 cells blanked; the completion lists the
//              blank-cell values in row-major order, padded. Reward is the
//              fraction of correctly filled blanks.
//   arith      prompt "a + b = ?", completion wraps the answer in <a>...</a>.
//              Format component 1.0 (0.25 if the wrapper is broken but an
//              answer still parses) plus 2.0 for the exact answer.
//
// Every instance carries an oracle payload sufficient to score any
// completion, plus a witness completion that attains the maximum reward
// (verified at sampling time by enumeration / exhaustive solving).

enum class TaskKind { countdown, sudoku4, arith };

struct RewardBreakdown {
    double total = 0.0;
    std::map<std::string, double> components;
};

struct CountdownOracle {
    int target = 0;
    std::array<int, 3> operands{};
    std::vector<int> witness;
};

struct SudokuOracle {
    std::array<int, 16> solution{};   // digits 1..4
    std::vector<int> blank_cells;     // row-major cell indices
    std::vector<int> witness;
};

struct ArithOracle {
    int a = 0;
    int b = 0;
    int answer = 0;
    std::vector<int> witness;
};

struct TaskInstance {
    TaskKind kind = TaskKind::countdown;
    std::vector<int> prompt_ids;
    std::variant<CountdownOracle, SudokuOracle, ArithOracle> oracle;
};

const Vocab& task_vocab(TaskKind kind);
int task_prompt_len(TaskKind kind);
int task_completion_len(TaskKind kind);
double task_max_reward(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);
std::string task_name(TaskKind kind);

TaskInstance sample_task(TaskKind kind, Rng& rng);

RewardBreakdown reward_countdown(const TaskInstance& inst, const std::vector<int>& completion_ids);
RewardBreakdown reward_sudoku(const TaskInstance& inst, const std::vector<int>& completion_ids);
RewardBreakdown reward_arith(const TaskInstance& inst, const std::vector<int>& completion_ids);
RewardBreakdown reward(const TaskInstance& inst, const std::vector<int>& completion_ids);

// Values reachable from the operands by some `d op d op d` expression, under
// the same precedence rules the reward parser uses.
std::set<int> countdown_reachable(const std::array<int, 3>& operands);

// Exhaustive solution count for a 4x4 grid with zeros marking blanks; stops
// counting at `limit`.
int count_sudoku_solutions(std::array<int, 16> grid, int limit);

// JSONL: one {kind, prompt_ids, oracle} object per line.
void dump_instances(const std::vector<TaskInstance>& instances, std::ostream& out);
std::vector<TaskInstance> parse_instances(std::istream& in);

} // namespace mdrl
