#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdrl/tensor.hpp"

namespace mdrl {

// Named parameter tensors with a stable iteration order. The order matters:
// gradient clipping, optimizer updates and checkpoint layout all walk
// parameters in insertion order so runs are bit-reproducible.
class ParamStore {
public:
    void add(const std::string& name, Tensor t) {
        if (values_.count(name)) throw std::invalid_argument("param exists: " + name);
        order_.push_back(name);
        values_.emplace(name, std::move(t));
    }

    Tensor& at(const std::string& name) {
        auto it = values_.find(name);
        if (it == values_.end()) throw std::out_of_range("no param: " + name);
        return it->second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end()) throw std::out_of_range("no param: " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return values_.count(name) != 0; }

    const std::vector<std::string>& names() const { return order_; }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& name : order_) n += values_.at(name).numel();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor> values_;
};

} // namespace mdrl
