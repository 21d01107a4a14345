#include "promptmoe/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "promptmoe/error.hpp"

namespace pmoe {

void round_to_float32(Tensor& t) {
    for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

void zero_grads(const ParamRefs& params) {
    for (auto* p : params) p->zero_grad();
}

}  // namespace pmoe

namespace pmoe::ad {

namespace {
thread_local bool g_grad_enabled = true;

Tensor& gbuf(Node& self, std::size_t i) { return self.inputs[i]->grad_buffer(); }
bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}
}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
}

void Node::accumulate(const Tensor& g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

double Var::item() const {
    if (value().size() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape()));
    return value()[0];
}

Tensor Var::grad() const {
    if (node_->grad.empty()) return Tensor(shape());
    return node_->grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var variable(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = g_grad_enabled;
    return Var(std::move(n));
}

Var leaf(ParamGroup& param) {
    auto n = std::make_shared<Node>();
    n->value = param.value;
    if (!param.frozen && g_grad_enabled) {
        n->requires_grad = true;
        n->param = &param;
    }
    return Var(std::move(n));
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any && g_grad_enabled) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.node());
        n->backward = std::move(fn);
    }
    return Var(std::move(n));
}

void backward(const Var& root) {
    if (root.value().size() != 1) throw DimensionError("backward() requires a scalar root");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS to get a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (Node* n : order) {
        if (n->param && !n->grad.empty()) {
            auto& pg = n->param->grad;
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n->grad[i];
        }
    }
}

Var matmul(const Var& a, const Var& b) {
    return make_result(pmoe::matmul(a.value(), b.value()), {a, b}, [](Node& self) {
        const auto& A = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        if (wants(self, 0)) self.inputs[0]->accumulate(pmoe::matmul_nt(self.grad, B));
        if (wants(self, 1)) self.inputs[1]->accumulate(pmoe::matmul_tn(A, self.grad));
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    return make_result(pmoe::matmul_nt(a.value(), b.value()), {a, b}, [](Node& self) {
        const auto& A = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        if (wants(self, 0)) self.inputs[0]->accumulate(pmoe::matmul(self.grad, B));
        if (wants(self, 1)) self.inputs[1]->accumulate(pmoe::matmul_tn(self.grad, A));
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (wants(self, k)) self.inputs[k]->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        if (wants(self, 0)) self.inputs[0]->accumulate(self.grad);
        if (wants(self, 1)) {
            auto& g = gbuf(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const auto& A = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        if (wants(self, 0)) {
            auto& g = gbuf(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B[i];
        }
        if (wants(self, 1)) {
            auto& g = gbuf(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A[i];
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a.value();
    for (auto& v : out.values()) v *= c;
    return make_result(std::move(out), {a}, [c](Node& self) {
        auto& g = gbuf(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    });
}

Var add_row(const Var& a, const Var& bias) {
    const std::size_t n = a.value().cols();
    if (bias.value().size() != n) {
        throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " vs rows of " + shape_string(a.shape()));
    }
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % n];
    return make_result(std::move(out), {a, bias}, [n](Node& self) {
        if (wants(self, 0)) self.inputs[0]->accumulate(self.grad);
        if (wants(self, 1)) {
            auto& g = gbuf(self, 1);
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        }
    });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    return make_result(std::move(out), {a}, [](Node& self) {
        const auto& X = self.inputs[0]->value;
        auto& g = gbuf(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (X[i] > 0.0) g[i] += self.grad[i];
    });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    Tensor out = a.value();
    for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    return make_result(std::move(out), {a}, [](Node& self) {
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        const auto& X = self.inputs[0]->value;
        auto& g = gbuf(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = X[i];
            const double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
            g[i] += self.grad[i] * d;
        }
    });
}

Var softmax_rows(const Var& x, double temperature) {
    if (x.value().rank() > 2) throw DimensionError("softmax_rows expects rank <= 2");
    Tensor y = pmoe::softmax(x.value(), x.value().rank() - 1, temperature);
    const std::size_t n = y.cols();
    return make_result(std::move(y), {x}, [n, temperature](Node& self) {
        const auto& Y = self.value;
        auto& g = gbuf(self, 0);
        for (std::size_t r = 0; r < Y.size() / n; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * Y[r * n + j];
            for (std::size_t j = 0; j < n; ++j)
                g[r * n + j] += Y[r * n + j] * (self.grad[r * n + j] - dot) / temperature;
        }
    });
}

Var row_normalize(const Var& x) {
    const std::size_t n = x.value().cols();
    const std::size_t m = x.value().size() / n;
    Tensor y = x.value();
    std::vector<double> norms(m);
    for (std::size_t r = 0; r < m; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += y[r * n + j] * y[r * n + j];
        const double nrm = std::sqrt(s);
        if (!(nrm > 0.0) || !std::isfinite(nrm)) {
            throw EvaluationError("row_normalize: row " + std::to_string(r) + " has zero or non-finite norm");
        }
        norms[r] = nrm;
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= nrm;
    }
    return make_result(std::move(y), {x}, [n, m, norms = std::move(norms)](Node& self) {
        const auto& Y = self.value;
        auto& g = gbuf(self, 0);
        for (std::size_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += Y[r * n + j] * self.grad[r * n + j];
            for (std::size_t j = 0; j < n; ++j)
                g[r * n + j] += (self.grad[r * n + j] - Y[r * n + j] * dot) / norms[r];
        }
    });
}

Var mean_rows(const Var& x) {
    const std::size_t m = x.value().rows(), n = x.value().cols();
    Tensor y({n});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) y[j] += x.value()[r * n + j];
    for (auto& v : y.values()) v /= static_cast<double>(m);
    return make_result(std::move(y), {x}, [m, n](Node& self) {
        auto& g = gbuf(self, 0);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[j] / static_cast<double>(m);
    });
}

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return make_result(Tensor::scalar(s), {x}, [](Node& self) {
        auto& g = gbuf(self, 0);
        for (auto& v : g.values()) v += self.grad[0];
    });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var max_all(const Var& x) {
    const auto vals = x.value().values();
    const auto it = std::max_element(vals.begin(), vals.end());
    const std::size_t arg = static_cast<std::size_t>(it - vals.begin());
    return make_result(Tensor::scalar(*it), {x}, [arg](Node& self) { gbuf(self, 0)[arg] += self.grad[0]; });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows of nothing");
    const std::size_t n = parts.front().value().cols();
    std::size_t total = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        if (p.value().cols() != n) throw DimensionError("concat_rows: column count mismatch");
        offsets.push_back(total);
        total += p.value().rows();
    }
    std::vector<double> data;
    data.reserve(total * n);
    for (const auto& p : parts) data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
    return make_result(Tensor({total, n}, std::move(data)), parts, [offsets, n](Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            if (!wants(self, k)) continue;
            auto& g = gbuf(self, k);
            const std::size_t base = offsets[k] * n;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[base + i];
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of nothing");
    const std::size_t m = parts.front().value().rows();
    std::size_t total = 0;
    std::vector<std::size_t> offsets, widths;
    for (const auto& p : parts) {
        if (p.value().rows() != m) throw DimensionError("concat_cols: row count mismatch");
        offsets.push_back(total);
        widths.push_back(p.value().cols());
        total += p.value().cols();
    }
    Tensor out({m, total});
    for (std::size_t k = 0; k < parts.size(); ++k)
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < widths[k]; ++j)
                out[r * total + offsets[k] + j] = parts[k].value()[r * widths[k] + j];
    return make_result(std::move(out), parts, [offsets, widths, m, total](Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            if (!wants(self, k)) continue;
            auto& g = gbuf(self, k);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += self.grad[r * total + offsets[k] + j];
        }
    });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
    const std::size_t m = x.value().rows(), n = x.value().cols();
    if (count == 0 || begin + count > m) throw DimensionError("slice_rows out of range");
    const auto first = x.value().storage().begin() + static_cast<std::ptrdiff_t>(begin * n);
    Tensor out({count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * n)));
    return make_result(std::move(out), {x}, [begin, n](Node& self) {
        auto& g = gbuf(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
    });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
    const std::size_t m = x.value().rows(), n = x.value().cols();
    if (count == 0 || begin + count > n) throw DimensionError("slice_cols out of range");
    Tensor out({m, count});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < count; ++j) out[r * count + j] = x.value()[r * n + begin + j];
    return make_result(std::move(out), {x}, [m, n, begin, count](Node& self) {
        auto& g = gbuf(self, 0);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < count; ++j) g[r * n + begin + j] += self.grad[r * count + j];
    });
}

Var column(const Var& x, std::size_t c) {
    const std::size_t m = x.value().rows(), n = x.value().cols();
    if (c >= n) throw DimensionError("column index out of range");
    Tensor out({m});
    for (std::size_t r = 0; r < m; ++r) out[r] = x.value()[r * n + c];
    return make_result(std::move(out), {x}, [m, n, c](Node& self) {
        auto& g = gbuf(self, 0);
        for (std::size_t r = 0; r < m; ++r) g[r * n + c] += self.grad[r];
    });
}

Var reshape(const Var& x, Shape shape) {
    return make_result(x.value().reshaped(std::move(shape)), {x},
                       [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Var select(const Var& x, const std::vector<std::size_t>& indices) {
    Tensor out({indices.size()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= x.value().size()) throw DimensionError("select index out of range");
        out[i] = x.value()[indices[i]];
    }
    return make_result(std::move(out), {x}, [indices](Node& self) {
        auto& g = gbuf(self, 0);
        for (std::size_t i = 0; i < indices.size(); ++i) g[indices[i]] += self.grad[i];
    });
}

Var weighted_sum(const Var& weights, const std::vector<Var>& parts) {
    if (parts.empty() || weights.value().size() != parts.size()) {
        throw DimensionError("weighted_sum: need one weight per part");
    }
    Tensor out(parts.front().shape());
    for (std::size_t k = 0; k < parts.size(); ++k) {
        if (parts[k].shape() != out.shape()) throw DimensionError("weighted_sum: part shapes differ");
        const double w = weights.value()[k];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * parts[k].value()[i];
    }
    std::vector<Var> inputs{weights};
    inputs.insert(inputs.end(), parts.begin(), parts.end());
    return make_result(std::move(out), std::move(inputs), [](Node& self) {
        const auto& W = self.inputs[0]->value;
        for (std::size_t k = 0; k + 1 < self.inputs.size(); ++k) {
            const auto& P = self.inputs[k + 1]->value;
            if (wants(self, 0)) {
                double d = 0.0;
                for (std::size_t i = 0; i < P.size(); ++i) d += self.grad[i] * P[i];
                gbuf(self, 0)[k] += d;
            }
            if (wants(self, k + 1)) {
                auto& g = gbuf(self, k + 1);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += W[k] * self.grad[i];
            }
        }
    });
}

TopKVar topk_select(const Var& logits, std::size_t k) {
    logits.value().check_finite("router logits");
    TopKVar out;
    out.indices = topk_indices(logits.value().values(), k);
    out.gates = softmax_rows(select(logits, out.indices));
    return out;
}

}  // namespace pmoe::ad
