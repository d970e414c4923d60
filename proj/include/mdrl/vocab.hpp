#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrl {

// Symbol table over a small closed alphabet. Id 0 is always <pad> and id 1
// is always <mask>; everything else is task-dependent.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kMask = 1;

    explicit Vocab(const std::vector<std::string>& symbols) {
        if (symbols.size() < 4) throw std::invalid_argument("vocab: need at least 4 symbols");
        if (symbols[0] != "<pad>" || symbols[1] != "<mask>") {
            throw std::invalid_argument("vocab: ids 0/1 must be <pad>/<mask>");
        }
        symbols_ = symbols;
        for (size_t i = 0; i < symbols_.size(); ++i) {
            if (!by_name_.emplace(symbols_[i], static_cast<int>(i)).second) {
                throw std::invalid_argument("vocab: duplicate symbol " + symbols_[i]);
            }
        }
    }

    int size() const { return static_cast<int>(symbols_.size()); }

    int id(const std::string& sym) const {
        auto it = by_name_.find(sym);
        if (it == by_name_.end()) throw std::out_of_range("vocab: unknown symbol " + sym);
        return it->second;
    }

    const std::string& symbol(int id) const {
        if (id < 0 || id >= size()) throw std::out_of_range("vocab: id out of range");
        return symbols_[static_cast<size_t>(id)];
    }

    bool is_digit(int id) const {
        const std::string& s = symbol(id);
        return s.size() == 1 && s[0] >= '0' && s[0] <= '9';
    }

    int digit_value(int id) const { return symbol(id)[0] - '0'; }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int v : ids) {
            if (!out.empty()) out += ' ';
            out += symbol(v);
        }
        return out;
    }

private:
    std::vector<std::string> symbols_;
    std::map<std::string, int> by_name_;
};

} // namespace mdrl
