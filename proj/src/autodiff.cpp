#include "costom/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace costom::ad {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmap(const Tensor& t) { return CMap(t.data.data(), t.rows(), t.cols()); }
MMap mmap(Tensor& t) { return MMap(t.data.data(), t.rows(), t.cols()); }

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape));
    }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
}

Tape& tape_of(std::initializer_list<Var> vars) {
    Tape* t = nullptr;
    for (const Var& v : vars) {
        if (!v.valid()) throw std::invalid_argument("autodiff: invalid Var");
        if (t != nullptr && v.tape != t) throw std::invalid_argument("autodiff: operands live on different tapes");
        t = v.tape;
    }
    return *t;
}

void axpy(Tensor& dst, const Tensor& src, float alpha = 1.0f) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += alpha * src.data[i];
}

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

using CArr = Eigen::Map<const Eigen::ArrayXf>;
using MArr = Eigen::Map<Eigen::ArrayXf>;

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluK = 0.044715f;

template <class A>
auto gelu_inner(const A& v) {
    return kGeluC * (v + kGeluK * v * v * v);
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) n *= static_cast<std::size_t>(e);
    return n;
}

Tensor::Tensor(Shape s, float fill) : shape(std::move(s)) {
    for (int e : shape) {
        if (e < 1) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    data.assign(numel(shape), fill);
}

Tensor::Tensor(Shape s, const std::vector<float>& values) : Tensor(std::move(s), Buffer(values.begin(), values.end())) {}

Tensor::Tensor(Shape s, Buffer values) : shape(std::move(s)), data(std::move(values)) {
    for (int e : shape) {
        if (e < 1) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (data.size() != numel(shape)) {
        throw ShapeError("tensor of shape " + shape_str(shape) + " given " + std::to_string(data.size()) + " values");
    }
}

Tensor Tensor::matrix(int rows, int cols, std::initializer_list<float> values) {
    return Tensor({rows, cols}, std::vector<float>(values));
}

int Tensor::rows() const { return shape.size() == 2 ? shape[0] : 1; }
int Tensor::cols() const { return shape.empty() ? 1 : shape.back(); }

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

const Tensor& GradientMap::at(NodeId id) const {
    if (!contains(id)) throw std::out_of_range("GradientMap: no gradient for node " + std::to_string(id));
    return grads_[id];
}

std::size_t GradientMap::count() const { return static_cast<std::size_t>(std::count(present_.begin(), present_.end(), true)); }

Tensor& GradientMap::slot(NodeId id, const Shape& shape) {
    if (!present_[id]) {
        grads_[id] = Tensor(shape, 0.0f);
        present_[id] = true;
    }
    return grads_[id];
}

// ---- tape ------------------------------------------------------------------

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.kind = "leaf";
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

Var Tape::param(const Tensor& external, bool requires_grad) {
    Node n;
    n.kind = "param";
    n.external = &external;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

Var Tape::detach(Var v) {
    Var out = leaf(v.value(), false);
    nodes_[out.id].kind = "detach";
    return out;
}

Var Tape::record(std::string kind, std::vector<Var> inputs, ForwardFn fwd, BackwardFn bwd) {
    Node n;
    n.kind = std::move(kind);
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    for (const Var& v : inputs) {
        if (v.tape != this) throw std::invalid_argument("autodiff: input recorded on another tape");
        n.inputs.push_back(v.id);
        n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
        in.push_back(&value(v.id));
    }
    n.owned = fwd(Inputs(in.data(), in.size()));
    n.fwd = std::move(fwd);
    n.bwd = std::move(bwd);
    nodes_.push_back(std::move(n));
    return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

const Tensor& Tape::value(NodeId id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external != nullptr ? *n.external : n.owned;
}

GradientMap Tape::backward(Var loss) const {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const Tensor& lv = value(loss.id);
    if (lv.size() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(lv.shape));

    GradientMap grads(nodes_.size());
    if (!nodes_[loss.id].requires_grad) return grads;
    grads.slot(loss.id, lv.shape).data[0] = 1.0f;

    std::vector<const Tensor*> in;
    std::vector<Tensor*> gin;
    for (NodeId id = loss.id; id >= 0; --id) {
        const Node& n = nodes_[id];
        if (!n.requires_grad || !n.bwd || !grads.contains(id)) continue;
        in.clear();
        gin.clear();
        for (NodeId src : n.inputs) {
            in.push_back(&value(src));
            gin.push_back(nodes_[src].requires_grad ? &grads.slot(src, value(src).shape) : nullptr);
        }
        n.bwd(Inputs(in.data(), in.size()), n.owned, grads.at(id), std::span<Tensor* const>(gin.data(), gin.size()));
    }
    return grads;
}

std::vector<Tensor> Tape::replay() const {
    std::vector<Tensor> values;
    values.reserve(nodes_.size());
    std::vector<const Tensor*> in;
    for (const Node& n : nodes_) {
        if (!n.fwd) {
            values.push_back(n.external != nullptr ? *n.external : n.owned);
            continue;
        }
        in.clear();
        for (NodeId src : n.inputs) in.push_back(&values[src]);
        values.push_back(n.fwd(Inputs(in.data(), in.size())));
    }
    return values;
}

// ---- primitives --------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = tape_of({a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank2(av, "matmul");
    require_rank2(bv, "matmul");
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: inner extents disagree, " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    }
    return t.record(
        "matmul", {a, b},
        [](Inputs in) {
            Tensor out({in[0]->rows(), in[1]->cols()});
            mmap(out).noalias() = cmap(*in[0]) * cmap(*in[1]);
            return out;
        },
        [](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (gin[0]) mmap(*gin[0]).noalias() += cmap(g) * cmap(*in[1]).transpose();
            if (gin[1]) mmap(*gin[1]).noalias() += cmap(*in[0]).transpose() * cmap(g);
        });
}

Var transpose(Var a) {
    Tape& t = tape_of({a});
    require_rank2(a.value(), "transpose");
    return t.record(
        "transpose", {a},
        [](Inputs in) {
            Tensor out({in[0]->cols(), in[0]->rows()});
            mmap(out) = cmap(*in[0]).transpose();
            return out;
        },
        [](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (gin[0]) mmap(*gin[0]) += cmap(g).transpose();
        });
}

Var add(Var a, Var b) {
    Tape& t = tape_of({a, b});
    require_same(a.value(), b.value(), "add");
    return t.record(
        "add", {a, b},
        [](Inputs in) {
            Tensor out = *in[0];
            axpy(out, *in[1]);
            return out;
        },
        [](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (gin[0]) axpy(*gin[0], g);
            if (gin[1]) axpy(*gin[1], g);
        });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of({a, b});
    require_same(a.value(), b.value(), "sub");
    return t.record(
        "sub", {a, b},
        [](Inputs in) {
            Tensor out = *in[0];
            axpy(out, *in[1], -1.0f);
            return out;
        },
        [](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (gin[0]) axpy(*gin[0], g);
            if (gin[1]) axpy(*gin[1], g, -1.0f);
        });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of({a, b});
    require_same(a.value(), b.value(), "mul");
    return t.record(
        "mul", {a, b},
        [](Inputs in) {
            Tensor out = *in[0];
            for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= in[1]->data[i];
            return out;
        },
        [](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            const auto n = static_cast<Eigen::Index>(g.size());
            if (gin[0]) MArr(gin[0]->data.data(), n) += CArr(g.data.data(), n) * CArr(in[1]->data.data(), n);
            if (gin[1]) MArr(gin[1]->data.data(), n) += CArr(g.data.data(), n) * CArr(in[0]->data.data(), n);
        });
}

Var scale(Var a, float s) {
    Tape& t = tape_of({a});
    return t.record(
        "scale", {a},
        [s](Inputs in) {
            Tensor out = *in[0];
            for (float& v : out.data) v *= s;
            return out;
        },
        [s](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (gin[0]) axpy(*gin[0], g, s);
        });
}

Var add_bias(Var x, Var bias) {
    Tape& t = tape_of({x, bias});
    require_rank2(x.value(), "add_bias");
    if (bias.value().size() != static_cast<std::size_t>(x.value().cols())) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    }
    return t.record(
        "add_bias", {x, bias},
        [](Inputs in) {
            Tensor out = *in[0];
            const int n = out.cols();
            for (int r = 0; r < out.rows(); ++r)
                for (int c = 0; c < n; ++c) out.at(r, c) += in[1]->data[c];
            return out;
        },
        [](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (gin[0]) axpy(*gin[0], g);
            if (gin[1]) {
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) gin[1]->data[c] += g.at(r, c);
            }
        });
}

Var rms_norm(Var x, Var gain, float eps) {
    Tape& t = tape_of({x, gain});
    require_rank2(x.value(), "rms_norm");
    if (gain.value().size() != static_cast<std::size_t>(x.value().cols())) {
        throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match " + shape_str(x.shape()));
    }
    // inverse rms per row is recomputed in backward; cheap relative to matmuls
    auto inv_rms = [eps](const Tensor& xv) -> Eigen::ArrayXf {
        return (cmap(xv).array().square().rowwise().sum() / static_cast<float>(xv.cols()) + eps).rsqrt();
    };
    return t.record(
        "rms_norm", {x, gain},
        [inv_rms](Inputs in) {
            const Tensor& xv = *in[0];
            const Eigen::ArrayXf inv = inv_rms(xv);
            const auto gain_row = Eigen::Map<const Eigen::Array<float, 1, Eigen::Dynamic>>(in[1]->data.data(), xv.cols());
            Tensor out(xv.shape);
            mmap(out).array() = (cmap(xv).array().colwise() * inv).rowwise() * gain_row;
            return out;
        },
        [inv_rms](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            const Tensor& xv = *in[0];
            const Eigen::ArrayXf inv = inv_rms(xv);
            const auto gain_row = Eigen::Map<const Eigen::Array<float, 1, Eigen::Dynamic>>(in[1]->data.data(), xv.cols());
            const auto xa = cmap(xv).array();
            const auto ga = cmap(g).array();
            if (gin[1]) {
                Eigen::Map<Eigen::Array<float, 1, Eigen::Dynamic>>(gin[1]->data.data(), xv.cols()) +=
                    ((ga * xa).colwise() * inv).colwise().sum();
            }
            if (gin[0]) {
                const Eigen::ArrayXXf ggain = ga.rowwise() * gain_row;
                const Eigen::ArrayXf k = inv.cube() * (ggain * xa).rowwise().sum() / static_cast<float>(xv.cols());
                mmap(*gin[0]).array() += (ggain.colwise() * inv) - (xa.colwise() * k);
            }
        });
}

Var gelu(Var x) {
    Tape& t = tape_of({x});
    return t.record(
        "gelu", {x},
        [](Inputs in) {
            Tensor out = *in[0];
            auto v = CArr(in[0]->data.data(), static_cast<Eigen::Index>(in[0]->size()));
            MArr(out.data.data(), static_cast<Eigen::Index>(out.size())) = 0.5f * v * (1.0f + gelu_inner(v).tanh());
            return out;
        },
        [](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            const auto n = static_cast<Eigen::Index>(g.size());
            auto v = CArr(in[0]->data.data(), n);
            const Eigen::ArrayXf th = gelu_inner(v).tanh();
            const Eigen::ArrayXf d =
                0.5f * (1.0f + th) + 0.5f * v * (1.0f - th.square()) * kGeluC * (1.0f + 3.0f * kGeluK * v.square());
            MArr(gin[0]->data.data(), n) += CArr(g.data.data(), n) * d;
        });
}

Var embedding(Var table, std::span<const int> ids) {
    Tape& t = tape_of({table});
    require_rank2(table.value(), "embedding");
    const int vocab = table.value().rows();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab) {
            throw ShapeError("embedding: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
    }
    if (ids.empty()) throw ShapeError("embedding: empty id sequence");
    std::vector<int> idv(ids.begin(), ids.end());
    return t.record(
        "embedding", {table},
        [idv](Inputs in) {
            const Tensor& tv = *in[0];
            Tensor out({static_cast<int>(idv.size()), tv.cols()});
            for (std::size_t i = 0; i < idv.size(); ++i) {
                std::copy(tv.row(idv[i]).begin(), tv.row(idv[i]).end(), out.row(static_cast<int>(i)).begin());
            }
            return out;
        },
        [idv](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            for (std::size_t i = 0; i < idv.size(); ++i) {
                auto dst = gin[0]->row(idv[i]);
                auto src = g.row(static_cast<int>(i));
                for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
            }
        });
}

Var softmax_rows(Var x) {
    Tape& t = tape_of({x});
    require_rank2(x.value(), "softmax_rows");
    return t.record(
        "softmax_rows", {x},
        [](Inputs in) {
            Tensor out = *in[0];
            const auto n = static_cast<Eigen::Index>(out.cols());
            for (int r = 0; r < out.rows(); ++r) {
                MArr row(out.row(r).data(), n);
                row = (row - row.maxCoeff()).exp();
                row /= row.sum();
            }
            return out;
        },
        [](Inputs, const Tensor& y, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            const auto ya = cmap(y).array();
            const auto ga = cmap(g).array();
            const Eigen::ArrayXf dot = (ga * ya).rowwise().sum();
            mmap(*gin[0]).array() += ya * (ga.colwise() - dot);
        });
}

Var causal_mask(Var x, int offset) {
    Tape& t = tape_of({x});
    require_rank2(x.value(), "causal_mask");
    return t.record(
        "causal_mask", {x},
        [offset](Inputs in) {
            Tensor out = *in[0];
            for (int r = 0; r < out.rows(); ++r)
                for (int c = std::max(0, r + offset + 1); c < out.cols(); ++c) out.at(r, c) = kNegInf;
            return out;
        },
        [offset](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < std::min(g.cols(), r + offset + 1); ++c) gin[0]->at(r, c) += g.at(r, c);
        });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Tape& t = *parts.front().tape;
    int rows = 0;
    const int cols = parts.front().value().cols();
    for (const Var& p : parts) {
        require_rank2(p.value(), "concat_rows");
        if (p.value().cols() != cols) {
            throw ShapeError("concat_rows: width mismatch " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
        }
        rows += p.value().rows();
    }
    return t.record(
        "concat_rows", parts,
        [rows, cols](Inputs in) {
            Tensor out({rows, cols});
            std::size_t off = 0;
            for (const Tensor* p : in) {
                std::copy(p->data.begin(), p->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
                off += p->size();
            }
            return out;
        },
        [](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            std::size_t off = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
                if (gin[i]) {
                    for (std::size_t k = 0; k < in[i]->size(); ++k) gin[i]->data[k] += g.data[off + k];
                }
                off += in[i]->size();
            }
        });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    Tape& t = *parts.front().tape;
    const int rows = parts.front().value().rows();
    int cols = 0;
    for (const Var& p : parts) {
        require_rank2(p.value(), "concat_cols");
        if (p.value().rows() != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
        }
        cols += p.value().cols();
    }
    return t.record(
        "concat_cols", parts,
        [rows, cols](Inputs in) {
            Tensor out({rows, cols});
            int off = 0;
            for (const Tensor* p : in) {
                for (int r = 0; r < rows; ++r) std::copy(p->row(r).begin(), p->row(r).end(), out.row(r).begin() + off);
                off += p->cols();
            }
            return out;
        },
        [rows](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            int off = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
                const int w = in[i]->cols();
                if (gin[i]) {
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < w; ++c) gin[i]->at(r, c) += g.at(r, off + c);
                }
                off += w;
            }
        });
}

Var slice_cols(Var x, int start, int width) {
    Tape& t = tape_of({x});
    require_rank2(x.value(), "slice_cols");
    if (start < 0 || width < 1 || start + width > x.value().cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(width) + ") outside " +
                         shape_str(x.shape()));
    }
    return t.record(
        "slice_cols", {x},
        [start, width](Inputs in) {
            Tensor out({in[0]->rows(), width});
            for (int r = 0; r < out.rows(); ++r) {
                auto src = in[0]->row(r);
                std::copy(src.begin() + start, src.begin() + start + width, out.row(r).begin());
            }
            return out;
        },
        [start, width](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < width; ++c) gin[0]->at(r, start + c) += g.at(r, c);
        });
}

Var slice_rows(Var x, int start, int count) {
    Tape& t = tape_of({x});
    require_rank2(x.value(), "slice_rows");
    if (start < 0 || count < 1 || start + count > x.value().rows()) {
        throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " +
                         shape_str(x.shape()));
    }
    return t.record(
        "slice_rows", {x},
        [start, count](Inputs in) {
            const int n = in[0]->cols();
            Tensor out({count, n});
            std::copy(in[0]->data.begin() + static_cast<std::ptrdiff_t>(start) * n,
                      in[0]->data.begin() + static_cast<std::ptrdiff_t>(start + count) * n, out.data.begin());
            return out;
        },
        [start](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            const std::size_t off = static_cast<std::size_t>(start) * g.cols();
            for (std::size_t k = 0; k < g.size(); ++k) gin[0]->data[off + k] += g.data[k];
        });
}

Var replace_rows(Var x, int start, Var payload) {
    Tape& t = tape_of({x, payload});
    const Tensor& xv = x.value();
    const Tensor& pv = payload.value();
    require_rank2(xv, "replace_rows");
    require_rank2(pv, "replace_rows");
    if (pv.cols() != xv.cols() || start < 0 || start + pv.rows() > xv.rows()) {
        throw ShapeError("replace_rows: payload " + shape_str(pv.shape) + " at row " + std::to_string(start) +
                         " does not fit " + shape_str(xv.shape));
    }
    return t.record(
        "replace_rows", {x, payload},
        [start](Inputs in) {
            Tensor out = *in[0];
            const std::size_t off = static_cast<std::size_t>(start) * out.cols();
            std::copy(in[1]->data.begin(), in[1]->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
            return out;
        },
        [start](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            const std::size_t off = static_cast<std::size_t>(start) * g.cols();
            const std::size_t len = in[1]->size();
            if (gin[0]) {
                for (std::size_t k = 0; k < g.size(); ++k) {
                    if (k < off || k >= off + len) gin[0]->data[k] += g.data[k];
                }
            }
            if (gin[1]) {
                for (std::size_t k = 0; k < len; ++k) gin[1]->data[k] += g.data[off + k];
            }
        });
}

Var sum(Var x) {
    Tape& t = tape_of({x});
    return t.record(
        "sum", {x},
        [](Inputs in) {
            double s = 0.0;
            for (float v : in[0]->data) s += v;
            return Tensor::scalar(static_cast<float>(s));
        },
        [](Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            for (float& v : gin[0]->data) v += g.data[0];
        });
}

Var mean(Var x) { return scale(sum(x), 1.0f / static_cast<float>(x.value().size())); }

Var softmax_cross_entropy(Var logits, std::span<const int> targets, std::span<const float> mask) {
    Tape& t = tape_of({logits});
    const Tensor& lv = logits.value();
    require_rank2(lv, "softmax_cross_entropy");
    if (targets.size() != static_cast<std::size_t>(lv.rows()) || mask.size() != targets.size()) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask weights for logits " + shape_str(lv.shape));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= lv.cols()) {
            throw ShapeError("softmax_cross_entropy: target " + std::to_string(targets[i]) + " at position " +
                             std::to_string(i) + " outside " + std::to_string(lv.cols()) + " classes");
        }
        if (!(mask[i] >= 0.0f)) throw ShapeError("softmax_cross_entropy: negative mask at position " + std::to_string(i));
        total += mask[i];
    }
    if (total <= 0.0) throw ShapeError("softmax_cross_entropy: mask selects no positions");

    std::vector<int> tv(targets.begin(), targets.end());
    std::vector<float> mv(mask.begin(), mask.end());
    const float inv_total = static_cast<float>(1.0 / total);
    auto log_softmax_row = [](std::span<const float> row, std::vector<float>& out) {
        const float mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (float v : row) z += std::exp(static_cast<double>(v - mx));
        const float lz = mx + static_cast<float>(std::log(z));
        out.resize(row.size());
        for (std::size_t c = 0; c < row.size(); ++c) out[c] = row[c] - lz;
    };
    return t.record(
        "softmax_cross_entropy", {logits},
        [tv, mv, inv_total, log_softmax_row](Inputs in) {
            double loss = 0.0;
            std::vector<float> lsm;
            for (std::size_t r = 0; r < tv.size(); ++r) {
                if (mv[r] == 0.0f) continue;
                log_softmax_row(in[0]->row(static_cast<int>(r)), lsm);
                loss -= static_cast<double>(mv[r]) * lsm[tv[r]];
            }
            return Tensor::scalar(static_cast<float>(loss) * inv_total);
        },
        [tv, mv, inv_total, log_softmax_row](Inputs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            std::vector<float> lsm;
            for (std::size_t r = 0; r < tv.size(); ++r) {
                if (mv[r] == 0.0f) continue;
                log_softmax_row(in[0]->row(static_cast<int>(r)), lsm);
                const float w = g.data[0] * mv[r] * inv_total;
                auto dst = gin[0]->row(static_cast<int>(r));
                for (std::size_t c = 0; c < lsm.size(); ++c) dst[c] += w * std::exp(lsm[c]);
                dst[tv[r]] -= w;
            }
        });
}

}  // namespace costom::ad
