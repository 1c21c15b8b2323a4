#include "disa/tensor.hpp"

#include <stdexcept>
#include <unordered_set>

namespace disa::ad {

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void detail::Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + shape_string(shape));
    }
    if (shape_size(shape) != values.size()) {
        throw std::invalid_argument("tensor: shape " + shape_string(shape) + " holds " +
                                    std::to_string(shape_size(shape)) + " values, got " +
                                    std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    const std::size_t n = values.size();
    return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
    return from({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

static const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
    if (!node) throw std::logic_error("tensor: use of undefined tensor");
    return *node;
}

const Shape& Tensor::shape() const { return checked(node_).shape; }
std::size_t Tensor::size() const { return checked(node_).value.size(); }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() == 2) return s[0];
    if (s.size() <= 1) return 1;
    throw std::invalid_argument("tensor: rows() of rank-" + std::to_string(s.size()) + " tensor");
}

std::size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.empty()) return 1;
    if (s.size() <= 2) return s.back();
    throw std::invalid_argument("tensor: cols() of rank-" + std::to_string(s.size()) + " tensor");
}

std::span<const double> Tensor::values() const { return checked(node_).value; }

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("tensor: item() of " + shape_string(shape()));
    return node_->value[0];
}

double Tensor::operator[](std::size_t flat) const { return checked(node_).value.at(flat); }

double Tensor::at(std::size_t row, std::size_t col) const { return values()[row * cols() + col]; }

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }
std::span<const double> Tensor::grad() const { return checked(node_).grad; }

void Tensor::zero_grad() {
    checked(node_);
    node_->grad.clear();
}

Tensor Tensor::detach(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

const char* Tensor::kind() const { return checked(node_).kind; }

Tensor Tensor::make(Shape shape, std::vector<double> values, const char* kind,
                    std::vector<Tensor> parents, std::function<void(detail::Node&)> vjp) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->kind = kind;
    for (const auto& p : parents) {
        if (p.requires_grad()) {
            node->requires_grad = true;
            break;
        }
    }
    // Constant subgraphs are not recorded.
    if (node->requires_grad) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(std::move(p.node_));
        node->vjp = std::move(vjp);
    }
    return Tensor(std::move(node));
}

Graph::Graph(const Tensor& root) : root_(root.node_) {
    if (!root_) throw std::logic_error("backward: undefined root");
    if (root_->value.size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got " + shape_string(root_->shape));
    }
    if (!root_->requires_grad) throw std::invalid_argument("backward: root does not depend on any requires_grad tensor");

    // Iterative post-order DFS.
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order_.push_back(node);
            stack.pop_back();
        }
    }
}

void Graph::backward() {
    if (root_->backward_done) throw std::logic_error("backward: graph already differentiated from this root");
    root_->backward_done = true;
    for (auto* node : order_) {
        if (!node->parents.empty()) node->grad.clear();
    }
    root_->ensure_grad();
    root_->grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        detail::Node* node = *it;
        if (node->parents.empty() || node->grad.empty()) continue;
        for (auto& p : node->parents) {
            if (p->requires_grad) p->ensure_grad();
        }
        node->vjp(*node);
    }
    // Interior gradients and closures are dead after one pass.
    for (auto* node : order_) {
        if (!node->parents.empty()) {
            std::vector<double>().swap(node->grad);
            node->vjp = nullptr;
        }
    }
}

void backward(const Tensor& root) { Graph(root).backward(); }

}  // namespace disa::ad
