#include "dilo/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace dilo {

namespace {

std::atomic<std::uint64_t> g_graph_serial{1};

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string shape_to_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

void check_same_shape(OpKind k, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        fail(std::string(op_name(k)) + ": shape mismatch " + a.shape_str() + " vs " +
             b.shape_str());
    }
}

// f32 tensors are stored as doubles but rounded through float after every op.
void round_to_f32(std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

DType result_dtype(const std::vector<Tensor>& inputs) {
    for (const Tensor& t : inputs)
        if (t.dtype != DType::f32) return DType::f64;
    return inputs.empty() ? DType::f64 : DType::f32;
}

Tensor make_result(std::vector<double> v, std::vector<std::size_t> shape, DType dt) {
    if (dt == DType::f32) round_to_f32(v);
    return Tensor::from_vec(std::move(v), std::move(shape), dt);
}

}  // namespace

std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor Tensor::from_vec(std::vector<double> v, std::vector<std::size_t> shp, DType dt) {
    if (v.size() != numel_of(shp))
        fail("tensor: data length " + std::to_string(v.size()) + " does not match shape " +
             shape_to_str(shp));
    if (dt == DType::f32) round_to_f32(v);
    Tensor t;
    t.shape = std::move(shp);
    t.dtype = dt;
    t.data = std::make_shared<std::vector<double>>(std::move(v));
    return t;
}

Tensor Tensor::zeros(std::vector<std::size_t> shp, DType dt) { return full(std::move(shp), 0.0, dt); }

Tensor Tensor::full(std::vector<std::size_t> shp, double value, DType dt) {
    const std::size_t n = numel_of(shp);
    return from_vec(std::vector<double>(n, value), std::move(shp), dt);
}

Tensor Tensor::scalar(double value, DType dt) { return from_vec({value}, {}, dt); }

std::size_t Tensor::numel() const { return numel_of(shape); }

std::vector<double>& Tensor::mut() {
    if (!data) data = std::make_shared<std::vector<double>>();
    if (data.use_count() > 1) data = std::make_shared<std::vector<double>>(*data);
    return *data;
}

std::string Tensor::shape_str() const { return shape_to_str(shape); }

double Tensor::norm2() const {
    double s = 0;
    for (double x : *data) s += x * x;
    return std::sqrt(s);
}

double Tensor::max_abs() const {
    double m = 0;
    for (double x : *data) m = std::max(m, std::fabs(x));
    return m;
}

bool Tensor::all_finite() const {
    for (double x : *data)
        if (!std::isfinite(x)) return false;
    return true;
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.node = -1;
    t.graph_serial = 0;
    return t;
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::matmul: return "matmul";
        case OpKind::scale: return "scale";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::square: return "square";
        case OpKind::sqrt_op: return "sqrt";
        case OpKind::tanh_op: return "tanh";
        case OpKind::relu: return "relu";
        case OpKind::sin_op: return "sin";
        case OpKind::cos_op: return "cos";
        case OpKind::concat: return "concat";
        case OpKind::reshape: return "reshape";
        case OpKind::slice: return "slice";
        case OpKind::transpose: return "transpose";
        case OpKind::custom: return "custom";
    }
    return "?";
}

namespace {

Tensor eval_matmul(const Tensor& a, const Tensor& b, DType dt) {
    if (a.rank() != 2 || b.rank() != 2)
        fail(std::string("matmul: both inputs must be rank 2, got ") + a.shape_str() + " and " +
             b.shape_str());
    if (a.shape[1] != b.shape[0])
        fail("matmul: inner dimensions differ, " + a.shape_str() + " vs " + b.shape_str());
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.vals().data();
    const double* pb = b.vals().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* po = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* pbr = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) po[j] += av * pbr[j];
        }
    }
    return make_result(std::move(out), {m, n}, dt);
}

// Decomposes `shape` around `axis` into (outer, axis_len, inner) extents.
void axis_extents(const std::vector<std::size_t>& shape, int axis, std::size_t& outer,
                  std::size_t& alen, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    alen = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
        inner *= shape[i];
}

Tensor eval_concat(const std::vector<Tensor>& parts, int axis, DType dt) {
    if (parts.empty()) fail("concat: no inputs");
    const std::size_t rank = parts[0].rank();
    if (axis < 0 || static_cast<std::size_t>(axis) >= rank)
        fail("concat: axis " + std::to_string(axis) + " out of range for rank " +
             std::to_string(rank));
    std::size_t total_axis = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) fail("concat: rank mismatch");
        for (std::size_t d = 0; d < rank; ++d) {
            if (d == static_cast<std::size_t>(axis)) continue;
            if (p.shape[d] != parts[0].shape[d])
                fail("concat: shape mismatch " + p.shape_str() + " vs " + parts[0].shape_str());
        }
        total_axis += p.shape[static_cast<std::size_t>(axis)];
    }
    std::vector<std::size_t> out_shape = parts[0].shape;
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    std::size_t outer, alen_out, inner;
    axis_extents(out_shape, axis, outer, alen_out, inner);
    std::vector<double> out(numel_of(out_shape));
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t alen = p.shape[static_cast<std::size_t>(axis)];
        const double* src = p.vals().data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < alen; ++a)
                std::memcpy(out.data() + ((o * alen_out + offset + a) * inner),
                            src + ((o * alen + a) * inner), inner * sizeof(double));
        offset += alen;
    }
    return make_result(std::move(out), std::move(out_shape), dt);
}

Tensor eval_slice(const Tensor& a, int axis, std::size_t start, std::size_t len, DType dt) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= a.rank())
        fail("slice: axis out of range for " + a.shape_str());
    std::size_t outer, alen, inner;
    axis_extents(a.shape, axis, outer, alen, inner);
    if (start + len > alen)
        fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
             ") exceeds axis length " + std::to_string(alen));
    std::vector<std::size_t> out_shape = a.shape;
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::vector<double> out(numel_of(out_shape));
    const double* src = a.vals().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len; ++i)
            std::memcpy(out.data() + ((o * len + i) * inner),
                        src + ((o * alen + start + i) * inner), inner * sizeof(double));
    return make_result(std::move(out), std::move(out_shape), dt);
}

Tensor eval_transpose(const Tensor& a, DType dt) {
    if (a.rank() != 2) fail("transpose: input must be rank 2, got " + a.shape_str());
    const std::size_t m = a.shape[0], n = a.shape[1];
    std::vector<double> out(m * n);
    const double* src = a.vals().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
    return make_result(std::move(out), {n, m}, dt);
}

}  // namespace

Tensor eval_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
    const DType dt = result_dtype(inputs);
    auto unary = [&](const std::function<double(double)>& f) {
        std::vector<double> out(inputs[0].vals());
        for (double& x : out) x = f(x);
        return make_result(std::move(out), inputs[0].shape, dt);
    };
    switch (kind) {
        case OpKind::leaf:
            fail("leaf is not evaluable");
        case OpKind::add: {
            check_same_shape(kind, inputs[0], inputs[1]);
            std::vector<double> out(inputs[0].vals());
            const auto& b = inputs[1].vals();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
            return make_result(std::move(out), inputs[0].shape, dt);
        }
        case OpKind::sub: {
            check_same_shape(kind, inputs[0], inputs[1]);
            std::vector<double> out(inputs[0].vals());
            const auto& b = inputs[1].vals();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
            return make_result(std::move(out), inputs[0].shape, dt);
        }
        case OpKind::mul: {
            check_same_shape(kind, inputs[0], inputs[1]);
            std::vector<double> out(inputs[0].vals());
            const auto& b = inputs[1].vals();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
            return make_result(std::move(out), inputs[0].shape, dt);
        }
        case OpKind::matmul:
            return eval_matmul(inputs[0], inputs[1], dt);
        case OpKind::scale: {
            std::vector<double> out(inputs[0].vals());
            for (double& x : out) x *= attrs.scale_c;
            return make_result(std::move(out), inputs[0].shape, dt);
        }
        case OpKind::sum: {
            double s = 0;
            for (double x : inputs[0].vals()) s += x;
            return make_result({s}, {}, dt);
        }
        case OpKind::mean: {
            if (inputs[0].numel() == 0) fail("mean: empty tensor");
            double s = 0;
            for (double x : inputs[0].vals()) s += x;
            return make_result({s / static_cast<double>(inputs[0].numel())}, {}, dt);
        }
        case OpKind::square:
            return unary([](double x) { return x * x; });
        case OpKind::sqrt_op: {
            const auto& v = inputs[0].vals();
            for (std::size_t i = 0; i < v.size(); ++i)
                if (v[i] < 0.0)
                    fail("sqrt: negative entry " + std::to_string(v[i]) + " at index " +
                         std::to_string(i));
            return unary([](double x) { return std::sqrt(x); });
        }
        case OpKind::tanh_op:
            return unary([](double x) { return std::tanh(x); });
        case OpKind::relu:
            return unary([](double x) { return x > 0.0 ? x : 0.0; });
        case OpKind::sin_op:
            return unary([](double x) { return std::sin(x); });
        case OpKind::cos_op:
            return unary([](double x) { return std::cos(x); });
        case OpKind::concat:
            return eval_concat(inputs, attrs.axis, dt);
        case OpKind::reshape: {
            if (numel_of(attrs.new_shape) != inputs[0].numel())
                fail("reshape: cannot reshape " + inputs[0].shape_str() + " to " +
                     shape_to_str(attrs.new_shape));
            return make_result(inputs[0].vals(), attrs.new_shape, dt);
        }
        case OpKind::slice:
            return eval_slice(inputs[0], attrs.axis, attrs.start, attrs.len, dt);
        case OpKind::transpose:
            return eval_transpose(inputs[0], dt);
        case OpKind::custom: {
            Tensor out = attrs.custom_op->forward(inputs);
            out.node = -1;
            out.graph_serial = 0;
            return out;
        }
    }
    fail("unknown op kind");
}

Graph::Graph() : serial_(g_graph_serial.fetch_add(1)) {}

bool Graph::owns(const Tensor& t) const {
    return t.node >= 0 && t.graph_serial == serial_ &&
           static_cast<std::size_t>(t.node) < nodes_.size();
}

Tensor Graph::record(OpKind kind, std::vector<std::int64_t> input_ids, OpAttrs attrs,
                     Tensor value) {
    GraphNode nd;
    nd.kind = kind;
    nd.inputs = std::move(input_ids);
    nd.attrs = std::move(attrs);
    nd.value = value.detached();
    nodes_.push_back(std::move(nd));
    value.node = static_cast<std::int64_t>(nodes_.size() - 1);
    value.graph_serial = serial_;
    return value;
}

Tensor Graph::leaf(const Tensor& t) { return record(OpKind::leaf, {}, {}, t); }

Tensor Graph::apply(OpKind kind, const std::vector<Tensor>& inputs, OpAttrs attrs) {
    std::vector<Tensor> bound;
    bound.reserve(inputs.size());
    std::vector<std::int64_t> ids;
    ids.reserve(inputs.size());
    for (const Tensor& in : inputs) {
        Tensor b = owns(in) ? in : leaf(in);
        ids.push_back(b.node);
        bound.push_back(std::move(b));
    }
    Tensor value = eval_op(kind, bound, attrs);
    return record(kind, std::move(ids), std::move(attrs), std::move(value));
}

Tensor Graph::scale(const Tensor& a, double c) {
    OpAttrs at;
    at.scale_c = c;
    return apply(OpKind::scale, {a}, at);
}

Tensor Graph::concat(const std::vector<Tensor>& parts, int axis) {
    OpAttrs at;
    at.axis = axis;
    return apply(OpKind::concat, parts, at);
}

Tensor Graph::reshape(const Tensor& a, std::vector<std::size_t> new_shape) {
    OpAttrs at;
    at.new_shape = std::move(new_shape);
    return apply(OpKind::reshape, {a}, at);
}

Tensor Graph::slice(const Tensor& a, int axis, std::size_t start, std::size_t len) {
    OpAttrs at;
    at.axis = axis;
    at.start = start;
    at.len = len;
    return apply(OpKind::slice, {a}, at);
}

Tensor Graph::custom(std::shared_ptr<CustomOp> op, const std::vector<Tensor>& inputs) {
    OpAttrs at;
    at.custom_op = std::move(op);
    return apply(OpKind::custom, inputs, at);
}

bool Gradients::has(const Tensor& t) const {
    return t.node >= 0 && t.graph_serial == graph_serial && by_node.count(t.node) > 0;
}

const Tensor& Gradients::wrt(const Tensor& t) const {
    if (t.node < 0 || t.graph_serial != graph_serial)
        fail("gradients: tensor does not belong to the differentiated graph");
    auto it = by_node.find(t.node);
    if (it == by_node.end())
        fail("gradients: no gradient reached node " + std::to_string(t.node));
    return it->second;
}

Gradients Graph::backward(const Tensor& loss) const {
    if (!loss.is_scalar())
        fail("backward: loss must be a scalar, got shape " + loss.shape_str());
    if (!owns(loss)) fail("backward: loss is not a node of this graph");
    if (nodes_[static_cast<std::size_t>(loss.node)].value.data != loss.data)
        fail("backward: loss tensor does not match its recorded node");

    std::vector<std::optional<std::vector<double>>> grad(nodes_.size());
    grad[static_cast<std::size_t>(loss.node)] = std::vector<double>{1.0};

    auto accum = [&](std::int64_t id, const std::vector<double>& g) {
        auto& slot = grad[static_cast<std::size_t>(id)];
        if (!slot) slot = std::vector<double>(g.size(), 0.0);
        auto& acc = *slot;
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    };

    for (std::int64_t id = loss.node; id >= 0; --id) {
        if (!grad[static_cast<std::size_t>(id)]) continue;
        const GraphNode& nd = nodes_[static_cast<std::size_t>(id)];
        const std::vector<double>& g = *grad[static_cast<std::size_t>(id)];
        auto in_val = [&](std::size_t i) -> const Tensor& {
            return nodes_[static_cast<std::size_t>(nd.inputs[i])].value;
        };
        switch (nd.kind) {
            case OpKind::leaf:
                break;
            case OpKind::add:
                accum(nd.inputs[0], g);
                accum(nd.inputs[1], g);
                break;
            case OpKind::sub: {
                accum(nd.inputs[0], g);
                std::vector<double> gb(g);
                for (double& x : gb) x = -x;
                accum(nd.inputs[1], gb);
                break;
            }
            case OpKind::mul: {
                const auto& a = in_val(0).vals();
                const auto& b = in_val(1).vals();
                std::vector<double> ga(g.size()), gb(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] = g[i] * b[i];
                    gb[i] = g[i] * a[i];
                }
                accum(nd.inputs[0], ga);
                accum(nd.inputs[1], gb);
                break;
            }
            case OpKind::matmul: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
                std::vector<double> ga(m * k, 0.0), gb(k * n, 0.0);
                const double* pa = a.vals().data();
                const double* pb = b.vals().data();
                // ga = g . b^T, gb = a^T . g
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        if (gij == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p) {
                            ga[i * k + p] += gij * pb[p * n + j];
                            gb[p * n + j] += pa[i * k + p] * gij;
                        }
                    }
                accum(nd.inputs[0], ga);
                accum(nd.inputs[1], gb);
                break;
            }
            case OpKind::scale: {
                std::vector<double> ga(g);
                for (double& x : ga) x *= nd.attrs.scale_c;
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::sum: {
                accum(nd.inputs[0], std::vector<double>(in_val(0).numel(), g[0]));
                break;
            }
            case OpKind::mean: {
                const double c = g[0] / static_cast<double>(in_val(0).numel());
                accum(nd.inputs[0], std::vector<double>(in_val(0).numel(), c));
                break;
            }
            case OpKind::square: {
                const auto& x = in_val(0).vals();
                std::vector<double> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = 2.0 * x[i] * g[i];
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::sqrt_op: {
                const auto& y = nd.value.vals();
                std::vector<double> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = 0.5 / y[i] * g[i];
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::tanh_op: {
                const auto& y = nd.value.vals();
                std::vector<double> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = (1.0 - y[i] * y[i]) * g[i];
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::relu: {
                // subgradient 0 at the kink
                const auto& x = in_val(0).vals();
                std::vector<double> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = x[i] > 0.0 ? g[i] : 0.0;
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::sin_op: {
                const auto& x = in_val(0).vals();
                std::vector<double> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = std::cos(x[i]) * g[i];
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::cos_op: {
                const auto& x = in_val(0).vals();
                std::vector<double> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = -std::sin(x[i]) * g[i];
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::concat: {
                std::size_t outer, alen_out, inner;
                axis_extents(nd.value.shape, nd.attrs.axis, outer, alen_out, inner);
                std::size_t offset = 0;
                for (std::size_t pi = 0; pi < nd.inputs.size(); ++pi) {
                    const Tensor& part = in_val(pi);
                    const std::size_t alen = part.shape[static_cast<std::size_t>(nd.attrs.axis)];
                    std::vector<double> gp(part.numel());
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t a = 0; a < alen; ++a)
                            std::memcpy(gp.data() + ((o * alen + a) * inner),
                                        g.data() + ((o * alen_out + offset + a) * inner),
                                        inner * sizeof(double));
                    accum(nd.inputs[pi], gp);
                    offset += alen;
                }
                break;
            }
            case OpKind::reshape:
                accum(nd.inputs[0], g);
                break;
            case OpKind::slice: {
                const Tensor& a = in_val(0);
                std::size_t outer, alen, inner;
                axis_extents(a.shape, nd.attrs.axis, outer, alen, inner);
                std::vector<double> ga(a.numel(), 0.0);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < nd.attrs.len; ++i)
                        std::memcpy(ga.data() + ((o * alen + nd.attrs.start + i) * inner),
                                    g.data() + ((o * nd.attrs.len + i) * inner),
                                    inner * sizeof(double));
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::transpose: {
                const std::size_t m = in_val(0).shape[0], n = in_val(0).shape[1];
                std::vector<double> ga(m * n);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) ga[j * n + i] = g[i * m + j];
                accum(nd.inputs[0], ga);
                break;
            }
            case OpKind::custom: {
                std::vector<Tensor> ins;
                ins.reserve(nd.inputs.size());
                for (std::size_t i = 0; i < nd.inputs.size(); ++i) ins.push_back(in_val(i));
                Tensor cot = Tensor::from_vec(g, nd.value.shape);
                std::vector<Tensor> gs = nd.attrs.custom_op->vjp(ins, nd.value, cot);
                if (gs.size() != nd.inputs.size())
                    fail("custom op '" + nd.attrs.custom_op->name() +
                         "': vjp returned wrong number of gradients");
                for (std::size_t i = 0; i < gs.size(); ++i) {
                    if (!gs[i].same_shape(ins[i]))
                        fail("custom op '" + nd.attrs.custom_op->name() +
                             "': vjp gradient shape mismatch");
                    accum(nd.inputs[i], gs[i].vals());
                }
                break;
            }
        }
    }

    Gradients out;
    out.graph_serial = serial_;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        if (!grad[id]) continue;
        out.by_node.emplace(static_cast<std::int64_t>(id),
                            Tensor::from_vec(std::move(*grad[id]), nodes_[id].value.shape));
    }
    return out;
}

bool Graph::replay_matches() const {
    for (const GraphNode& nd : nodes_) {
        if (nd.kind == OpKind::leaf) continue;
        std::vector<Tensor> ins;
        ins.reserve(nd.inputs.size());
        for (std::int64_t id : nd.inputs) ins.push_back(nodes_[static_cast<std::size_t>(id)].value);
        Tensor re = eval_op(nd.kind, ins, nd.attrs);
        if (!re.same_shape(nd.value)) return false;
        if (std::memcmp(re.vals().data(), nd.value.vals().data(),
                        re.numel() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

}  // namespace dilo
