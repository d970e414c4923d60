#include "mdrl/tasks.hpp"

#include <algorithm>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace mdrl {

namespace {

const Vocab& countdown_vocab() {
    static const Vocab v({"<pad>", "<mask>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
                          "+", "-", "*"});
    return v;
}

const Vocab& sudoku_vocab() {
    static const Vocab v({"<pad>", "<mask>", "1", "2", "3", "4", "_"});
    return v;
}

const Vocab& arith_vocab() {
    static const Vocab v({"<pad>", "<mask>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
                          "+", "=", "?", "<a>", "</a>"});
    return v;
}

enum CdOp { op_add, op_sub, op_mul };

int apply(CdOp op, int a, int b) {
    switch (op) {
        case op_add: return a + b;
        case op_sub: return a - b;
        case op_mul: return a * b;
    }
    return 0;
}

// d1 op1 d2 op2 d3 with * binding tighter than + and -.
int eval_expression(int d1, CdOp o1, int d2, CdOp o2, int d3) {
    if (o2 == op_mul && o1 != op_mul) return apply(o1, d1, d2 * d3);
    return apply(o2, apply(o1, d1, d2), d3);
}

struct CdExpr {
    int d1, d2, d3;
    CdOp o1, o2;
    int value;
};

std::vector<CdExpr> enumerate_expressions(const std::array<int, 3>& operands) {
    std::array<int, 3> ops = operands;
    std::sort(ops.begin(), ops.end());
    std::vector<std::array<int, 3>> perms;
    do {
        perms.push_back(ops);
    } while (std::next_permutation(ops.begin(), ops.end()));

    std::vector<CdExpr> out;
    for (const auto& p : perms) {
        for (CdOp o1 : {op_add, op_sub, op_mul}) {
            for (CdOp o2 : {op_add, op_sub, op_mul}) {
                out.push_back({p[0], p[1], p[2], o1, o2,
                               eval_expression(p[0], o1, p[1], o2, p[2])});
            }
        }
    }
    return out;
}

std::vector<int> encode_expression(const CdExpr& e) {
    const Vocab& v = countdown_vocab();
    const auto digit = [&](int d) { return v.id(std::string(1, static_cast<char>('0' + d))); };
    const auto op = [&](CdOp o) {
        return v.id(o == op_add ? "+" : o == op_sub ? "-" : "*");
    };
    return {digit(e.d1), op(e.o1), digit(e.d2), op(e.o2), digit(e.d3)};
}

// Sudoku helpers. Grids hold digits 1..4, with 0 for blanks.

bool cell_ok(const std::array<int, 16>& grid, int cell, int val) {
    const int r = cell / 4, c = cell % 4;
    for (int i = 0; i < 4; ++i) {
        if (grid[static_cast<size_t>(r * 4 + i)] == val && r * 4 + i != cell) return false;
        if (grid[static_cast<size_t>(i * 4 + c)] == val && i * 4 + c != cell) return false;
    }
    const int br = (r / 2) * 2, bc = (c / 2) * 2;
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            const int k = (br + i) * 4 + (bc + j);
            if (grid[static_cast<size_t>(k)] == val && k != cell) return false;
        }
    }
    return true;
}

int solve_count(std::array<int, 16>& grid, int limit) {
    int cell = -1;
    for (int i = 0; i < 16; ++i) {
        if (grid[static_cast<size_t>(i)] == 0) {
            cell = i;
            break;
        }
    }
    if (cell < 0) return 1;
    int found = 0;
    for (int val = 1; val <= 4; ++val) {
        if (!cell_ok(grid, cell, val)) continue;
        grid[static_cast<size_t>(cell)] = val;
        found += solve_count(grid, limit - found);
        grid[static_cast<size_t>(cell)] = 0;
        if (found >= limit) break;
    }
    return found;
}

std::array<int, 16> random_solved_grid(Rng& rng) {
    std::array<int, 16> grid{};
    // Randomized backtracking fill.
    std::vector<std::array<int, 4>> orders;
    for (int i = 0; i < 16; ++i) {
        std::array<int, 4> order = {1, 2, 3, 4};
        for (int j = 3; j > 0; --j) {
            std::swap(order[static_cast<size_t>(j)], order[static_cast<size_t>(rng.uniform_int(0, j))]);
        }
        orders.push_back(order);
    }
    const std::function<bool(int)> fill = [&](int cell) -> bool {
        if (cell == 16) return true;
        for (int val : orders[static_cast<size_t>(cell)]) {
            if (!cell_ok(grid, cell, val)) continue;
            grid[static_cast<size_t>(cell)] = val;
            if (fill(cell + 1)) return true;
            grid[static_cast<size_t>(cell)] = 0;
        }
        return false;
    };
    if (!fill(0)) throw std::logic_error("sudoku: backtracking fill failed");
    return grid;
}

} // namespace

const Vocab& task_vocab(TaskKind kind) {
    switch (kind) {
        case TaskKind::countdown: return countdown_vocab();
        case TaskKind::sudoku4: return sudoku_vocab();
        case TaskKind::arith: return arith_vocab();
    }
    throw std::logic_error("task_vocab: unknown kind");
}

int task_prompt_len(TaskKind kind) {
    switch (kind) {
        case TaskKind::countdown: return 4;
        case TaskKind::sudoku4: return 16;
        case TaskKind::arith: return 5;
    }
    throw std::logic_error("task_prompt_len: unknown kind");
}

int task_completion_len(TaskKind kind) {
    switch (kind) {
        case TaskKind::countdown: return 5;
        case TaskKind::sudoku4: return 8;
        case TaskKind::arith: return 4;
    }
    throw std::logic_error("task_completion_len: unknown kind");
}

double task_max_reward(TaskKind kind) {
    switch (kind) {
        case TaskKind::countdown: return 1.0;
        case TaskKind::sudoku4: return 1.0;
        case TaskKind::arith: return 3.0;
    }
    throw std::logic_error("task_max_reward: unknown kind");
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "countdown") return TaskKind::countdown;
    if (name == "sudoku4") return TaskKind::sudoku4;
    if (name == "arith") return TaskKind::arith;
    throw std::invalid_argument("unknown task: " + name);
}

std::string task_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::countdown: return "countdown";
        case TaskKind::sudoku4: return "sudoku4";
        case TaskKind::arith: return "arith";
    }
    throw std::logic_error("task_name: unknown kind");
}

std::set<int> countdown_reachable(const std::array<int, 3>& operands) {
    std::set<int> out;
    for (const auto& e : enumerate_expressions(operands)) out.insert(e.value);
    return out;
}

int count_sudoku_solutions(std::array<int, 16> grid, int limit) {
    return solve_count(grid, limit);
}

TaskInstance sample_task(TaskKind kind, Rng& rng) {
    TaskInstance inst;
    inst.kind = kind;
    switch (kind) {
        case TaskKind::countdown: {
            const Vocab& v = countdown_vocab();
            CountdownOracle oracle;
            std::vector<CdExpr> hits;
            while (true) {
                for (auto& o : oracle.operands) o = rng.uniform_int(1, 9);
                // Single-digit targets keep the prompt four tokens. The
                // target is the value of a random expression over the
                // operands, so typical (multi-witness) values appear with
                // their natural frequency; triples with no single-digit
                // value are resampled.
                const auto exprs = enumerate_expressions(oracle.operands);
                std::vector<int> candidates;
                for (const auto& e : exprs) {
                    if (e.value >= 0 && e.value <= 9) candidates.push_back(e.value);
                }
                if (candidates.empty()) continue;
                oracle.target = candidates[static_cast<size_t>(
                    rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
                for (const auto& e : exprs) {
                    if (e.value == oracle.target) hits.push_back(e);
                }
                break;
            }
            oracle.witness = encode_expression(hits.front());
            const auto digit = [&](int d) { return v.id(std::string(1, static_cast<char>('0' + d))); };
            inst.prompt_ids = {digit(oracle.target), digit(oracle.operands[0]),
                               digit(oracle.operands[1]), digit(oracle.operands[2])};
            inst.oracle = oracle;
            if (reward_countdown(inst, oracle.witness).total != task_max_reward(kind)) {
                throw std::logic_error("countdown: witness does not attain the maximum");
            }
            return inst;
        }
        case TaskKind::sudoku4: {
            const Vocab& v = sudoku_vocab();
            SudokuOracle oracle;
            while (true) {
                const auto solution = random_solved_grid(rng);
                const int n_blanks = rng.uniform_int(4, 8);
                std::vector<int> cells(16);
                for (int i = 0; i < 16; ++i) cells[static_cast<size_t>(i)] = i;
                rng.shuffle(cells);
                cells.resize(static_cast<size_t>(n_blanks));
                std::sort(cells.begin(), cells.end());

                std::array<int, 16> puzzle = solution;
                for (int c : cells) puzzle[static_cast<size_t>(c)] = 0;
                if (count_sudoku_solutions(puzzle, 2) != 1) continue;

                oracle.solution = solution;
                oracle.blank_cells = cells;
                break;
            }
            inst.prompt_ids.clear();
            for (int i = 0; i < 16; ++i) {
                const bool blank = std::count(oracle.blank_cells.begin(), oracle.blank_cells.end(), i) > 0;
                inst.prompt_ids.push_back(
                    blank ? v.id("_")
                          : v.id(std::string(1, static_cast<char>('0' + oracle.solution[static_cast<size_t>(i)]))));
            }
            oracle.witness.clear();
            for (int c : oracle.blank_cells) {
                oracle.witness.push_back(
                    v.id(std::string(1, static_cast<char>('0' + oracle.solution[static_cast<size_t>(c)]))));
            }
            while (oracle.witness.size() < static_cast<size_t>(task_completion_len(kind))) {
                oracle.witness.push_back(Vocab::kPad);
            }
            inst.oracle = oracle;
            if (reward_sudoku(inst, oracle.witness).total != task_max_reward(kind)) {
                throw std::logic_error("sudoku: witness does not attain the maximum");
            }
            return inst;
        }
        case TaskKind::arith: {
            const Vocab& v = arith_vocab();
            ArithOracle oracle;
            oracle.a = rng.uniform_int(1, 9);
            oracle.b = rng.uniform_int(1, 9);
            oracle.answer = oracle.a + oracle.b;
            const auto digit = [&](int d) { return v.id(std::string(1, static_cast<char>('0' + d))); };
            inst.prompt_ids = {digit(oracle.a), v.id("+"), digit(oracle.b), v.id("="), v.id("?")};
            oracle.witness = {v.id("<a>")};
            if (oracle.answer >= 10) oracle.witness.push_back(digit(oracle.answer / 10));
            oracle.witness.push_back(digit(oracle.answer % 10));
            oracle.witness.push_back(v.id("</a>"));
            while (oracle.witness.size() < static_cast<size_t>(task_completion_len(kind))) {
                oracle.witness.push_back(Vocab::kPad);
            }
            inst.oracle = oracle;
            if (reward_arith(inst, oracle.witness).total != task_max_reward(kind)) {
                throw std::logic_error("arith: witness does not attain the maximum");
            }
            return inst;
        }
    }
    throw std::logic_error("sample_task: unknown kind");
}

RewardBreakdown reward_countdown(const TaskInstance& inst, const std::vector<int>& completion_ids) {
    const auto& oracle = std::get<CountdownOracle>(inst.oracle);
    const Vocab& v = countdown_vocab();
    RewardBreakdown out;
    out.components["solved"] = 0.0;
    out.components["numbers_only"] = 0.0;

    // Longer runs pad completions; trailing padding is not part of the
    // expression.
    std::vector<int> completion = completion_ids;
    while (!completion.empty() && completion.back() == Vocab::kPad) completion.pop_back();
    if (completion.size() != 5) return out;
    const auto as_op = [&](int id) -> std::optional<CdOp> {
        const std::string& s = v.symbol(id);
        if (s == "+") return op_add;
        if (s == "-") return op_sub;
        if (s == "*") return op_mul;
        return std::nullopt;
    };
    if (!v.is_digit(completion[0]) || !v.is_digit(completion[2]) || !v.is_digit(completion[4])) {
        return out;
    }
    const auto o1 = as_op(completion[1]);
    const auto o2 = as_op(completion[3]);
    if (!o1 || !o2) return out;

    const int d1 = v.digit_value(completion[0]);
    const int d2 = v.digit_value(completion[2]);
    const int d3 = v.digit_value(completion[4]);

    std::array<int, 3> used = {d1, d2, d3};
    std::array<int, 3> given = oracle.operands;
    std::sort(used.begin(), used.end());
    std::sort(given.begin(), given.end());
    if (used != given) return out;

    const int value = eval_expression(d1, *o1, d2, *o2, d3);
    if (value == oracle.target) {
        out.components["solved"] = 1.0;
    } else {
        out.components["numbers_only"] = 0.1;
    }
    out.total = out.components["solved"] + out.components["numbers_only"];
    return out;
}

RewardBreakdown reward_sudoku(const TaskInstance& inst, const std::vector<int>& completion_ids) {
    const auto& oracle = std::get<SudokuOracle>(inst.oracle);
    const Vocab& v = sudoku_vocab();
    RewardBreakdown out;
    int correct = 0;
    for (size_t i = 0; i < oracle.blank_cells.size(); ++i) {
        if (i >= completion_ids.size()) break; // missing cells count as wrong
        const int id = completion_ids[i];
        if (!v.is_digit(id)) continue;
        if (v.digit_value(id) == oracle.solution[static_cast<size_t>(oracle.blank_cells[i])]) ++correct;
    }
    out.components["cells"] =
        static_cast<double>(correct) / static_cast<double>(oracle.blank_cells.size());
    out.total = out.components["cells"];
    return out;
}

RewardBreakdown reward_arith(const TaskInstance& inst, const std::vector<int>& completion_ids) {
    const auto& oracle = std::get<ArithOracle>(inst.oracle);
    const Vocab& v = arith_vocab();
    const int open_id = v.id("<a>");
    const int close_id = v.id("</a>");
    RewardBreakdown out;
    out.components["format"] = 0.0;
    out.components["correct"] = 0.0;

    // Well-formed: <a> digits </a> followed only by padding.
    bool well_formed = false;
    int parsed = -1;
    if (!completion_ids.empty() && completion_ids[0] == open_id) {
        size_t i = 1;
        int value = 0, n_digits = 0;
        while (i < completion_ids.size() && v.is_digit(completion_ids[i])) {
            value = value * 10 + v.digit_value(completion_ids[i]);
            ++n_digits;
            ++i;
        }
        if (n_digits >= 1 && i < completion_ids.size() && completion_ids[i] == close_id) {
            ++i;
            bool tail_ok = true;
            for (; i < completion_ids.size(); ++i) {
                if (completion_ids[i] != Vocab::kPad) tail_ok = false;
            }
            if (tail_ok) {
                well_formed = true;
                parsed = value;
            }
        }
    }

    if (!well_formed) {
        // Malformed wrapper: accept a single contiguous digit run anywhere.
        int runs = 0, value = 0, current = -1;
        for (size_t i = 0; i <= completion_ids.size(); ++i) {
            const bool digit = i < completion_ids.size() && v.is_digit(completion_ids[i]);
            if (digit) {
                if (current < 0) {
                    current = 0;
                    ++runs;
                }
                current = current * 10 + v.digit_value(completion_ids[i]);
            } else if (current >= 0) {
                value = current;
                current = -1;
            }
        }
        if (runs == 1) parsed = value;
    }

    if (well_formed) {
        out.components["format"] = 1.0;
    } else if (parsed >= 0) {
        out.components["format"] = 0.25;
    }
    if (parsed >= 0 && parsed == oracle.answer) out.components["correct"] = 2.0;
    out.total = out.components["format"] + out.components["correct"];
    return out;
}

RewardBreakdown reward(const TaskInstance& inst, const std::vector<int>& completion_ids) {
    switch (inst.kind) {
        case TaskKind::countdown: return reward_countdown(inst, completion_ids);
        case TaskKind::sudoku4: return reward_sudoku(inst, completion_ids);
        case TaskKind::arith: return reward_arith(inst, completion_ids);
    }
    throw std::logic_error("reward: unknown kind");
}

void dump_instances(const std::vector<TaskInstance>& instances, std::ostream& out) {
    for (const auto& inst : instances) {
        nlohmann::json oracle;
        if (inst.kind == TaskKind::countdown) {
            const auto& o = std::get<CountdownOracle>(inst.oracle);
            oracle = {{"target", o.target}, {"operands", o.operands}, {"witness", o.witness}};
        } else if (inst.kind == TaskKind::sudoku4) {
            const auto& o = std::get<SudokuOracle>(inst.oracle);
            oracle = {{"solution", o.solution}, {"blank_cells", o.blank_cells}, {"witness", o.witness}};
        } else {
            const auto& o = std::get<ArithOracle>(inst.oracle);
            oracle = {{"a", o.a}, {"b", o.b}, {"answer", o.answer}, {"witness", o.witness}};
        }
        out << nlohmann::json{{"kind", task_name(inst.kind)},
                              {"prompt_ids", inst.prompt_ids},
                              {"oracle", oracle}}
                   .dump()
            << "\n";
    }
}

std::vector<TaskInstance> parse_instances(std::istream& in) {
    std::vector<TaskInstance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        TaskInstance inst;
        inst.kind = task_kind_from_name(j.at("kind").get<std::string>());
        inst.prompt_ids = j.at("prompt_ids").get<std::vector<int>>();
        const auto& oj = j.at("oracle");
        if (inst.kind == TaskKind::countdown) {
            CountdownOracle o;
            o.target = oj.at("target").get<int>();
            const auto ops = oj.at("operands").get<std::vector<int>>();
            std::copy_n(ops.begin(), 3, o.operands.begin());
            o.witness = oj.at("witness").get<std::vector<int>>();
            inst.oracle = o;
        } else if (inst.kind == TaskKind::sudoku4) {
            SudokuOracle o;
            const auto sol = oj.at("solution").get<std::vector<int>>();
            std::copy_n(sol.begin(), 16, o.solution.begin());
            o.blank_cells = oj.at("blank_cells").get<std::vector<int>>();
            o.witness = oj.at("witness").get<std::vector<int>>();
            inst.oracle = o;
        } else {
            ArithOracle o;
            o.a = oj.at("a").get<int>();
            o.b = oj.at("b").get<int>();
            o.answer = oj.at("answer").get<int>();
            o.witness = oj.at("witness").get<std::vector<int>>();
            inst.oracle = o;
        }
        out.push_back(std::move(inst));
    }
    return out;
}

} // namespace mdrl
