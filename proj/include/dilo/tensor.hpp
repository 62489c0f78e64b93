#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace dilo {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

/// Dense row-major tensor. Data buffers are shared between copies and
/// treated as immutable; mut() performs copy-on-write.
struct Tensor {
    std::vector<std::size_t> shape;
    DType dtype = DType::f64;
    std::shared_ptr<std::vector<double>> data;
    std::int64_t node = -1;       // id in the owning graph, -1 = off-graph
    std::uint64_t graph_serial = 0;

    Tensor() : data(std::make_shared<std::vector<double>>()) {}

    static Tensor from_vec(std::vector<double> v, std::vector<std::size_t> shp,
                           DType dt = DType::f64);
    static Tensor zeros(std::vector<std::size_t> shp, DType dt = DType::f64);
    static Tensor full(std::vector<std::size_t> shp, double value, DType dt = DType::f64);
    static Tensor scalar(double value, DType dt = DType::f64);

    std::size_t numel() const;
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return numel() == 1; }

    const std::vector<double>& vals() const { return *data; }
    std::vector<double>& mut();
    double at(std::size_t i) const { return (*data)[i]; }
    double at2(std::size_t r, std::size_t c) const { return (*data)[r * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;

    double norm2() const;
    double max_abs() const;
    bool all_finite() const;
    Tensor detached() const;     // off-graph view sharing the same data
};

std::size_t numel_of(const std::vector<std::size_t>& shape);

enum class OpKind : std::uint8_t {
    leaf,
    add, sub, mul, matmul, scale,
    sum, mean, square, sqrt_op, tanh_op, relu, sin_op, cos_op,
    concat, reshape, slice, transpose,
    custom,
};

const char* op_name(OpKind k);

/// External operation with a caller-supplied derivative rule. forward() must
/// be a pure function of its inputs so graph replay stays bit-exact.
struct CustomOp {
    virtual ~CustomOp() = default;
    virtual std::string name() const = 0;
    virtual Tensor forward(const std::vector<Tensor>& inputs) = 0;
    virtual std::vector<Tensor> vjp(const std::vector<Tensor>& inputs,
                                    const Tensor& output,
                                    const Tensor& cotangent) = 0;
};

struct OpAttrs {
    double scale_c = 0.0;
    int axis = 0;
    std::size_t start = 0;
    std::size_t len = 0;
    std::vector<std::size_t> new_shape;
    std::shared_ptr<CustomOp> custom_op;
};

/// Forward evaluation of one op, independent of any graph.
Tensor eval_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs);

struct GraphNode {
    OpKind kind = OpKind::leaf;
    std::vector<std::int64_t> inputs;
    OpAttrs attrs;
    Tensor value;                 // saved forward value
};

class Graph;

/// Gradients of one scalar loss with respect to every node it reaches.
struct Gradients {
    std::uint64_t graph_serial = 0;
    std::unordered_map<std::int64_t, Tensor> by_node;

    bool has(const Tensor& t) const;
    const Tensor& wrt(const Tensor& t) const;
};

/// Recorded computation tape. Nodes are appended in topological order; each
/// node stores its op kind, input ids and forward value, so the whole
/// computation can be replayed and differentiated in reverse.
class Graph {
  public:
    Graph();

    Tensor leaf(const Tensor& t);
    Tensor constant(const Tensor& t) { return leaf(t); }

    Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, OpAttrs attrs = {});

    Tensor add(const Tensor& a, const Tensor& b) { return apply(OpKind::add, {a, b}); }
    Tensor sub(const Tensor& a, const Tensor& b) { return apply(OpKind::sub, {a, b}); }
    Tensor mul(const Tensor& a, const Tensor& b) { return apply(OpKind::mul, {a, b}); }
    Tensor matmul(const Tensor& a, const Tensor& b) { return apply(OpKind::matmul, {a, b}); }
    Tensor scale(const Tensor& a, double c);
    Tensor sum(const Tensor& a) { return apply(OpKind::sum, {a}); }
    Tensor mean(const Tensor& a) { return apply(OpKind::mean, {a}); }
    Tensor square(const Tensor& a) { return apply(OpKind::square, {a}); }
    Tensor sqrt(const Tensor& a) { return apply(OpKind::sqrt_op, {a}); }
    Tensor tanh(const Tensor& a) { return apply(OpKind::tanh_op, {a}); }
    Tensor relu(const Tensor& a) { return apply(OpKind::relu, {a}); }
    Tensor sin(const Tensor& a) { return apply(OpKind::sin_op, {a}); }
    Tensor cos(const Tensor& a) { return apply(OpKind::cos_op, {a}); }
    Tensor concat(const std::vector<Tensor>& parts, int axis);
    Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape);
    Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len);
    Tensor transpose(const Tensor& a) { return apply(OpKind::transpose, {a}); }
    Tensor custom(std::shared_ptr<CustomOp> op, const std::vector<Tensor>& inputs);

    Gradients backward(const Tensor& loss) const;

    /// Recomputes every non-leaf node from its recorded inputs and compares
    /// bitwise against the stored forward values.
    bool replay_matches() const;

    std::size_t num_nodes() const { return nodes_.size(); }
    const GraphNode& node(std::int64_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::uint64_t serial() const { return serial_; }
    bool owns(const Tensor& t) const;

  private:
    std::uint64_t serial_;
    std::vector<GraphNode> nodes_;

    Tensor record(OpKind kind, std::vector<std::int64_t> input_ids,
                  OpAttrs attrs, Tensor value);
};

}  // namespace dilo
