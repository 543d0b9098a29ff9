#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "biattn/tensor.hpp"

namespace biattn {

/// Named learnable tensors in insertion order. Element addresses stay valid
/// across insertions, so graphs can bind them by pointer.
class ParameterStore {
public:
    Tensor& add(const std::string& name, Tensor value) {
        if (tensors_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        value.set_requires_grad(true);
        order_.push_back(name);
        return tensors_.emplace(name, std::move(value)).first->second;
    }

    Tensor& get(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const std::vector<std::string>& names() const noexcept { return order_; }
    std::size_t size() const noexcept { return order_.size(); }
    bool empty() const noexcept { return order_.empty(); }

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        for (const auto& n : order_) out.push_back(&tensors_.at(n));
        return out;
    }

    void zero_grad() {
        for (auto& [name, t] : tensors_) t.zero_grad();
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors_) n += t.numel();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor> tensors_;
};

}  // namespace biattn
