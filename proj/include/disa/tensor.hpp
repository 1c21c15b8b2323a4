#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their parents and a local vector-Jacobian rule;
// backward() walks the recorded nodes in reverse topological order.
// Tensors never change value after creation; only gradient buffers of
// requires_grad tensors are written, and only during backward().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace disa::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool backward_done = false;
    const char* kind = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grad buffers.
    std::function<void(Node&)> vjp;

    void ensure_grad();
};

}  // namespace detail

class Tensor {
   public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    // rows/cols view a rank-2 tensor; a rank-1 tensor is one row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    double item() const;
    double operator[](std::size_t flat) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Fresh leaf carrying the same values; the result is outside any graph.
    Tensor detach(bool requires_grad = false) const;

    const char* kind() const;
    detail::Node* node() const { return node_.get(); }

    // Op implementations construct nodes through this.
    static Tensor make(Shape shape, std::vector<double> values, const char* kind,
                       std::vector<Tensor> parents,
                       std::function<void(detail::Node&)> vjp);

   private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend class Graph;
};

// Topologically ordered record of every requires_grad node reachable from a
// scalar root. Built at backward time; the forward pass only links parents.
class Graph {
   public:
    explicit Graph(const Tensor& root);

    std::size_t node_count() const { return order_.size(); }
    // Populates grad on every requires_grad leaf reachable from the root.
    // A root may be differentiated once; rebuild the forward pass to repeat.
    void backward();

   private:
    std::shared_ptr<detail::Node> root_;
    std::vector<detail::Node*> order_;  // parents before children
};

void backward(const Tensor& root);

}  // namespace disa::ad
