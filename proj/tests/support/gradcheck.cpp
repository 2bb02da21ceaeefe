#include "gradcheck.hpp"

#include "reference.hpp"

#include "costom/steering.hpp"
#include "costom/util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace gradcheck {

using costom::ad::Tensor;
namespace ad = costom::ad;

namespace {

using Flat = std::vector<double>;
using Inputs = std::vector<Flat>;

int draw(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Flat ref_matmul(const Flat& a, const Flat& b, int m, int k, int n) {
    Flat out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p)
            for (int j = 0; j < n; ++j) out[i * n + j] += a[i * k + p] * b[p * n + j];
    return out;
}

Flat ref_softmax_rows(Flat x, int m, int n) {
    for (int i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += (x[i * n + j] = std::exp(x[i * n + j] - mx));
        for (int j = 0; j < n; ++j) x[i * n + j] /= z;
    }
    return x;
}

Flat elementwise(const Flat& a, const Flat& b, double (*f)(double, double)) {
    Flat out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

}  // namespace

std::vector<PrimitiveCase> primitive_cases(std::mt19937_64& rng) {
    std::vector<PrimitiveCase> cases;
    const int m = draw(rng, 2, 6), k = draw(rng, 2, 6), n = draw(rng, 2, 6);

    cases.push_back({"matmul", {{m, k}, {k, n}}, [](const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); },
                     [=](const Inputs& x) { return ref_matmul(x[0], x[1], m, k, n); }});
    cases.push_back({"transpose", {{m, n}}, [](const std::vector<Var>& v) { return ad::transpose(v[0]); },
                     [=](const Inputs& x) {
                         Flat out(x[0].size());
                         for (int i = 0; i < m; ++i)
                             for (int j = 0; j < n; ++j) out[j * m + i] = x[0][i * n + j];
                         return out;
                     }});
    cases.push_back({"add", {{m, n}, {m, n}}, [](const std::vector<Var>& v) { return ad::add(v[0], v[1]); },
                     [](const Inputs& x) { return elementwise(x[0], x[1], [](double a, double b) { return a + b; }); }});
    cases.push_back({"sub", {{m, n}, {m, n}}, [](const std::vector<Var>& v) { return ad::sub(v[0], v[1]); },
                     [](const Inputs& x) { return elementwise(x[0], x[1], [](double a, double b) { return a - b; }); }});
    cases.push_back({"mul", {{m, n}, {m, n}}, [](const std::vector<Var>& v) { return ad::mul(v[0], v[1]); },
                     [](const Inputs& x) { return elementwise(x[0], x[1], [](double a, double b) { return a * b; }); }});
    const float s = std::uniform_real_distribution<float>(-2.0f, 2.0f)(rng);
    cases.push_back({"scale", {{m, n}}, [s](const std::vector<Var>& v) { return ad::scale(v[0], s); },
                     [s](const Inputs& x) {
                         Flat out = x[0];
                         for (double& e : out) e *= static_cast<double>(s);
                         return out;
                     }});
    cases.push_back({"add_bias", {{m, n}, {n}}, [](const std::vector<Var>& v) { return ad::add_bias(v[0], v[1]); },
                     [=](const Inputs& x) {
                         Flat out = x[0];
                         for (int i = 0; i < m; ++i)
                             for (int j = 0; j < n; ++j) out[i * n + j] += x[1][j];
                         return out;
                     }});
    cases.push_back({"rms_norm", {{m, n}, {n}}, [](const std::vector<Var>& v) { return ad::rms_norm(v[0], v[1]); },
                     [=](const Inputs& x) {
                         Flat out(x[0].size());
                         for (int i = 0; i < m; ++i) {
                             double ss = 0.0;
                             for (int j = 0; j < n; ++j) ss += x[0][i * n + j] * x[0][i * n + j];
                             const double inv = 1.0 / std::sqrt(ss / n + 1e-5);
                             for (int j = 0; j < n; ++j) out[i * n + j] = x[0][i * n + j] * inv * x[1][j];
                         }
                         return out;
                     }});
    cases.push_back({"gelu", {{m, n}}, [](const std::vector<Var>& v) { return ad::gelu(v[0]); },
                     [](const Inputs& x) {
                         Flat out(x[0].size());
                         const double c = std::sqrt(2.0 / std::acos(-1.0));
                         for (std::size_t i = 0; i < out.size(); ++i) {
                             const double u = x[0][i];
                             out[i] = 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
                         }
                         return out;
                     }});
    auto ids = std::make_shared<std::vector<int>>();
    for (int i = 0; i < m + 2; ++i) ids->push_back(draw(rng, 0, k - 1));  // repeats exercise accumulation
    cases.push_back({"embedding", {{k, n}}, [ids](const std::vector<Var>& v) { return ad::embedding(v[0], *ids); },
                     [ids, n](const Inputs& x) {
                         Flat out;
                         for (int id : *ids)
                             for (int j = 0; j < n; ++j) out.push_back(x[0][id * n + j]);
                         return out;
                     }});
    cases.push_back({"softmax_rows", {{m, n}}, [](const std::vector<Var>& v) { return ad::softmax_rows(v[0]); },
                     [=](const Inputs& x) { return ref_softmax_rows(x[0], m, n); }});
    const int offset = draw(rng, 0, 2);
    cases.push_back({"causal_mask", {{m, n}},
                     [offset](const std::vector<Var>& v) { return ad::softmax_rows(ad::causal_mask(v[0], offset)); },
                     [=](const Inputs& x) {
                         Flat masked = x[0];
                         for (int i = 0; i < m; ++i)
                             for (int j = 0; j < n; ++j)
                                 if (j > i + offset) masked[i * n + j] = -std::numeric_limits<double>::infinity();
                         return ref_softmax_rows(masked, m, n);
                     }});
    const int m2 = draw(rng, 1, 4), n2 = draw(rng, 1, 4);
    cases.push_back({"concat_rows", {{m, n}, {m2, n}},
                     [](const std::vector<Var>& v) { return ad::concat_rows({v[0], v[1]}); },
                     [](const Inputs& x) {
                         Flat out = x[0];
                         out.insert(out.end(), x[1].begin(), x[1].end());
                         return out;
                     }});
    cases.push_back({"concat_cols", {{m, n}, {m, n2}},
                     [](const std::vector<Var>& v) { return ad::concat_cols({v[0], v[1]}); },
                     [=](const Inputs& x) {
                         Flat out;
                         for (int i = 0; i < m; ++i) {
                             for (int j = 0; j < n; ++j) out.push_back(x[0][i * n + j]);
                             for (int j = 0; j < n2; ++j) out.push_back(x[1][i * n2 + j]);
                         }
                         return out;
                     }});
    const int c0 = draw(rng, 0, n - 1), cw = draw(rng, 1, n - c0);
    cases.push_back({"slice_cols", {{m, n}}, [=](const std::vector<Var>& v) { return ad::slice_cols(v[0], c0, cw); },
                     [=](const Inputs& x) {
                         Flat out;
                         for (int i = 0; i < m; ++i)
                             for (int j = c0; j < c0 + cw; ++j) out.push_back(x[0][i * n + j]);
                         return out;
                     }});
    const int r0 = draw(rng, 0, m - 1), rc = draw(rng, 1, m - r0);
    cases.push_back({"slice_rows", {{m, n}}, [=](const std::vector<Var>& v) { return ad::slice_rows(v[0], r0, rc); },
                     [=](const Inputs& x) { return Flat(x[0].begin() + r0 * n, x[0].begin() + (r0 + rc) * n); }});
    cases.push_back({"replace_rows", {{m, n}, {rc, n}},
                     [=](const std::vector<Var>& v) { return ad::replace_rows(v[0], r0, v[1]); },
                     [=](const Inputs& x) {
                         Flat out = x[0];
                         std::copy(x[1].begin(), x[1].end(), out.begin() + r0 * n);
                         return out;
                     }});
    cases.push_back({"sum", {{m, n}}, [](const std::vector<Var>& v) { return ad::sum(v[0]); },
                     [](const Inputs& x) {
                         double t = 0.0;
                         for (double e : x[0]) t += e;
                         return Flat{t};
                     }});
    cases.push_back({"mean", {{m, n}}, [](const std::vector<Var>& v) { return ad::mean(v[0]); },
                     [](const Inputs& x) {
                         double t = 0.0;
                         for (double e : x[0]) t += e;
                         return Flat{t / static_cast<double>(x[0].size())};
                     }});
    auto targets = std::make_shared<std::vector<int>>();
    auto mask = std::make_shared<std::vector<float>>();
    for (int i = 0; i < m; ++i) {
        targets->push_back(draw(rng, 0, n - 1));
        mask->push_back(static_cast<float>(draw(rng, 0, 2)) * 0.5f);
    }
    (*mask)[0] = 1.0f;
    cases.push_back({"softmax_cross_entropy", {{m, n}},
                     [targets, mask](const std::vector<Var>& v) { return ad::softmax_cross_entropy(v[0], *targets, *mask); },
                     [=](const Inputs& x) {
                         const Flat p = ref_softmax_rows(x[0], m, n);
                         double total = 0.0, weight = 0.0;
                         for (int i = 0; i < m; ++i) {
                             total -= (*mask)[i] * std::log(p[i * n + (*targets)[i]]);
                             weight += (*mask)[i];
                         }
                         return Flat{total / weight};
                     }});
    return cases;
}

double primitive_error(const PrimitiveCase& c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<Tensor> inputs;
    for (const Shape& s : c.inputs) {
        Tensor t(s);
        for (float& v : t.data) v = normal(rng);
        inputs.push_back(std::move(t));
    }
    const auto as_double = [](const Tensor& t) { return Flat(t.data.begin(), t.data.end()); };

    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
    const Var out = c.op(vars);
    Tensor r(out.shape());
    for (float& v : r.data) v = normal(rng);
    const Var loss = ad::sum(ad::mul(out, tape.leaf(r)));
    const ad::GradientMap grads = tape.backward(loss);

    Inputs x;
    for (const Tensor& t : inputs) x.push_back(as_double(t));
    const Flat rw = as_double(r);
    auto objective = [&](const Inputs& xi) {
        const Flat y = c.reference(xi);
        double total = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) total += y[i] * rw[i];
        return total;
    };

    double worst = 0.0;
    const double h = 1e-6;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        const Tensor* g = grads.find(vars[a]);
        double max_diff = 0.0, max_num = 0.0;
        for (std::size_t i = 0; i < x[a].size(); ++i) {
            Inputs xp = x, xm = x;
            xp[a][i] += h;
            xm[a][i] -= h;
            const double num = (objective(xp) - objective(xm)) / (2.0 * h);
            const double ana = g ? static_cast<double>(g->data[i]) : 0.0;
            max_diff = std::max(max_diff, std::abs(ana - num));
            max_num = std::max(max_num, std::abs(num));
        }
        worst = std::max(worst, max_num > 0.0 ? max_diff / max_num : max_diff);
    }
    return worst;
}

EndToEndCheck tom_loss_error(int instance) {
    using namespace costom;
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = vocab().size();
    cfg.max_seq = 192;
    Weights w = init_weights(cfg, 1000 + static_cast<std::uint64_t>(instance));
    // larger weights than the init so the check sees real nonlinearity
    for (auto& [name, t] : w.named_mut()) {
        if (name.find("norm") == std::string::npos) {
            for (float& v : t->data) v *= 5.0f;
        }
    }
    auto base = std::make_shared<const Weights>(std::move(w));

    const int layer = instance % 2;  // the last block's output is never read by a later block
    const Site site = kAllSites[static_cast<std::size_t>(instance) % kAllSites.size()];
    AdapterSpec spec;
    spec.rank = 4;
    spec.alpha = 8.0f;
    spec.dropout = 0.0f;
    for (int l = 0; l <= layer; ++l) spec.layers.insert(l);
    AdaptedModel enc = attach(base, spec, 77 + static_cast<std::uint64_t>(instance));
    std::mt19937_64 rng(mix_seed(99, static_cast<std::uint64_t>(instance)));
    std::normal_distribution<float> normal(0.0f, 0.1f);
    for (auto& [key, a] : enc.adapters()) {
        for (float& v : a.a.data) v *= 5.0f;
        for (float& v : a.b.data) v = normal(rng);
    }

    const auto samples = gen_negotiation(7, 20);
    const DialogueSample& s = samples[static_cast<std::size_t>(instance) % samples.size()];
    const int cut = s.cut(Stage::beginning);
    const auto tokens = dialogue_tokens(s, cut);
    const auto queries = make_queries(s, cut);
    const ProbeQuery& q = queries[static_cast<std::size_t>(instance) % queries.size()];

    ad::Tape tape;
    BoundModel benc(tape, enc);
    const ActivationPayload payload = capture_live(benc, tokens, layer);
    BoundModel dec(tape, *base);
    const ad::Var loss = tom_loss(dec, payload, q);
    const ad::GradientMap grads = tape.backward(loss);

    std::size_t index = 0;
    for (const auto& [key, a] : enc.adapters()) {
        if (key.layer == 0 && key.site == site) break;
        ++index;
    }
    const Tensor* ga = grads.find(benc.adapter_params()[2 * index]);
    const Tensor* gb = grads.find(benc.adapter_params()[2 * index + 1]);

    const ref::Model dm = ref::Model::from(*base);
    ref::Model em = ref::Model::from(enc);
    EndToEndCheck out;
    const double h = 1e-5;
    for (int part = 0; part < 2; ++part) {
        const Tensor* g = part == 0 ? ga : gb;
        std::vector<double>& params = part == 0 ? em.adapters.at({0, site}).a.v : em.adapters.at({0, site}).b.v;
        double max_diff = 0.0, max_num = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double keep = params[i];
            params[i] = keep + h;
            const double up = ref::tom_loss(em, dm, tokens, q, layer);
            params[i] = keep - h;
            const double down = ref::tom_loss(em, dm, tokens, q, layer);
            params[i] = keep;
            const double num = (up - down) / (2.0 * h);
            const double ana = g ? static_cast<double>(g->data[i]) : 0.0;
            max_diff = std::max(max_diff, std::abs(ana - num));
            max_num = std::max(max_num, std::abs(num));
            ++out.entries;
        }
        out.error = std::max(out.error, max_num > 0.0 ? max_diff / max_num : max_diff);
        out.max_gradient = std::max(out.max_gradient, max_num);
    }
    return out;
}

}  // namespace gradcheck
