#pragma once

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "lab/graph.hpp"
#include "lab/tensor.hpp"

namespace lab {

// Named model parameter. When trainable is false an optimizer step leaves the
// data bit-identical. A non-empty row_mask restricts updates of a 2-d
// parameter to the rows flagged 1 (used to optimize single embedding rows).
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
    std::vector<uint8_t> row_mask;

    void set_trainable(bool t) {
        trainable = t;
        tensor.requires_grad = t;
    }
};

template <typename T>
class ParameterStore {
   public:
    Parameter<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
        auto [it, inserted] = params_.try_emplace(name);
        if (!inserted) throw Error("ParameterStore: duplicate parameter " + name);
        it->second.name = name;
        it->second.tensor = std::move(init);
        it->second.set_trainable(trainable);
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Parameter<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("ParameterStore: no parameter " + name);
        return it->second;
    }
    const Parameter<T>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("ParameterStore: no parameter " + name);
        return it->second;
    }

    NodeId use(Graph<T>& g, const std::string& name) { return g.leaf(&at(name).tensor); }

    void set_all_trainable(bool t) {
        for (auto& [_, p] : params_) {
            p.set_trainable(t);
            p.row_mask.clear();
        }
    }

    // Marks every parameter whose name starts with `prefix`.
    int set_trainable_prefix(const std::string& prefix, bool t) {
        int n = 0;
        for (auto& [name, p] : params_) {
            if (name.rfind(prefix, 0) == 0) {
                p.set_trainable(t);
                ++n;
            }
        }
        return n;
    }

    void clear_grads() {
        for (auto& [_, p] : params_) p.tensor.clear_grad();
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [_, p] : params_) n += p.tensor.numel();
        return n;
    }

    size_t count() const { return params_.size(); }

    // Deterministic (lexicographic) iteration order.
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& [name, p] : params_) {
            auto& q = out.add(name, p.tensor.template cast<U>(), p.trainable);
            q.row_mask = p.row_mask;
        }
        return out;
    }

    // Names of parameters whose data differs bitwise from `other`'s.
    std::vector<std::string> diff_names(const ParameterStore& other) const {
        std::vector<std::string> out;
        for (const auto& [name, p] : params_) {
            if (!other.has(name)) {
                out.push_back(name);
                continue;
            }
            const auto& q = other.at(name);
            if (p.tensor.shape != q.tensor.shape ||
                std::memcmp(p.tensor.data.data(), q.tensor.data.data(),
                            p.tensor.data.size() * sizeof(T)) != 0)
                out.push_back(name);
        }
        for (const auto& [name, q] : other.params_)
            if (!has(name)) out.push_back(name);
        return out;
    }

   private:
    template <typename U>
    friend class ParameterStore;
    std::map<std::string, Parameter<T>> params_;
};

}  // namespace lab
