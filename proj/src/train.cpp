#include "circuitforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <omp.h>

#include "circuitforge/error.hpp"
#include "circuitforge/tasks.hpp"

namespace circuitforge::train {

namespace {

// Flat parameter vector with named slices in canonical (sorted) order.
struct Layout {
    std::vector<std::string> names;
    std::map<std::string, std::pair<std::size_t, std::size_t>> slices;
    std::map<std::string, std::vector<std::size_t>> shapes;
    std::size_t total = 0;

    explicit Layout(const ModelSpec& spec) : shapes(WeightStore::required_shapes(spec)) {
        for (const auto& [name, shape] : shapes) {
            const std::size_t n = Tensor::numel_of(shape);
            names.push_back(name);
            slices[name] = {total, n};
            total += n;
        }
    }

    std::size_t offset(const std::string& name) const { return slices.at(name).first; }
};

struct LayerOffsets {
    std::size_t ln_w, ln_b, wq, wk, wv, bq, bk, bv, wo, bo;
};

struct Offsets {
    std::size_t we, wpos;
    bool has_pos;
    std::vector<LayerOffsets> layers;
    std::size_t lnf_w, lnf_b, wu, bu;

    Offsets(const Layout& lay, const ModelSpec& s) {
        we = lay.offset("embed.W_E");
        has_pos = s.positional == Positional::learned;
        wpos = has_pos ? lay.offset("pos_embed.W_pos") : 0;
        for (std::size_t l = 0; l < s.n_layers; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            layers.push_back({lay.offset(p + "ln1.w"), lay.offset(p + "ln1.b"),
                              lay.offset(p + "attn.W_Q"), lay.offset(p + "attn.W_K"),
                              lay.offset(p + "attn.W_V"), lay.offset(p + "attn.b_Q"),
                              lay.offset(p + "attn.b_K"), lay.offset(p + "attn.b_V"),
                              lay.offset(p + "attn.W_O"), lay.offset(p + "attn.b_O")});
        }
        lnf_w = lay.offset("ln_final.w");
        lnf_b = lay.offset("ln_final.b");
        wu = lay.offset("unembed.W_U");
        bu = lay.offset("unembed.b_U");
    }
};

struct LayerCache {
    std::vector<double> x, xhat, rstd, n;  // residual input, ln1 state
    std::vector<double> q, k, v, p;        // [H][S][dh], pattern [H][S][S]
    std::vector<double> z;                 // [S][H*dh]
};

struct SampleCache {
    std::vector<LayerCache> layers;
    std::vector<double> x_final, xhat_f, rstd_f, n_f, logits;
};

class Net {
public:
    Net(const ModelSpec& spec) : s_(spec), lay_(spec), off_(lay_, spec) {
        if (!spec.attn_only) fail(ErrorCode::InvalidSpec, "the toy trainer supports attention-only models");
    }

    const Layout& layout() const { return lay_; }
    const ModelSpec& spec() const { return s_; }

    void layer_norm(const double* x, const double* w, const double* b, double* xhat, double* rstd,
                    double* out, std::size_t S) const {
        const std::size_t D = s_.d_model;
        for (std::size_t t = 0; t < S; ++t) {
            const double* row = x + t * D;
            double mean = 0.0;
            for (std::size_t i = 0; i < D; ++i) mean += row[i];
            mean /= static_cast<double>(D);
            double var = 0.0;
            for (std::size_t i = 0; i < D; ++i) var += (row[i] - mean) * (row[i] - mean);
            var /= static_cast<double>(D);
            const double r = 1.0 / std::sqrt(var + static_cast<double>(s_.ln_eps));
            rstd[t] = r;
            for (std::size_t i = 0; i < D; ++i) {
                xhat[t * D + i] = (row[i] - mean) * r;
                out[t * D + i] = xhat[t * D + i] * w[i] + b[i];
            }
        }
    }

    // dx += layer-norm backward of dout.
    void layer_norm_back(const double* dout, const double* xhat, const double* rstd, const double* w,
                         double* dw, double* db, double* dx, std::size_t S) const {
        const std::size_t D = s_.d_model;
        std::vector<double> dxhat(D);
        for (std::size_t t = 0; t < S; ++t) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < D; ++i) {
                const double g = dout[t * D + i];
                dw[i] += g * xhat[t * D + i];
                db[i] += g;
                dxhat[i] = g * w[i];
                m1 += dxhat[i];
                m2 += dxhat[i] * xhat[t * D + i];
            }
            m1 /= static_cast<double>(D);
            m2 /= static_cast<double>(D);
            for (std::size_t i = 0; i < D; ++i) {
                dx[t * D + i] += rstd[t] * (dxhat[i] - m1 - xhat[t * D + i] * m2);
            }
        }
    }

    void forward(const double* P, const std::vector<std::int32_t>& tokens, SampleCache& c) const {
        const std::size_t S = tokens.size(), D = s_.d_model, H = s_.n_heads, dh = s_.d_head,
                          V = s_.vocab_size;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        c.layers.resize(s_.n_layers);
        std::vector<double> x(S * D);
        for (std::size_t t = 0; t < S; ++t) {
            for (std::size_t i = 0; i < D; ++i) {
                x[t * D + i] = P[off_.we + static_cast<std::size_t>(tokens[t]) * D + i] +
                               (off_.has_pos ? P[off_.wpos + t * D + i] : 0.0);
            }
        }
        for (std::size_t l = 0; l < s_.n_layers; ++l) {
            const LayerOffsets& o = off_.layers[l];
            LayerCache& lc = c.layers[l];
            lc.x = x;
            lc.xhat.assign(S * D, 0.0);
            lc.rstd.assign(S, 0.0);
            lc.n.assign(S * D, 0.0);
            layer_norm(x.data(), P + o.ln_w, P + o.ln_b, lc.xhat.data(), lc.rstd.data(),
                       lc.n.data(), S);
            lc.q.assign(H * S * dh, 0.0);
            lc.k.assign(H * S * dh, 0.0);
            lc.v.assign(H * S * dh, 0.0);
            lc.p.assign(H * S * S, 0.0);
            lc.z.assign(S * H * dh, 0.0);
            for (std::size_t h = 0; h < H; ++h) {
                double* q = lc.q.data() + h * S * dh;
                double* k = lc.k.data() + h * S * dh;
                double* v = lc.v.data() + h * S * dh;
                for (std::size_t t = 0; t < S; ++t) {
                    for (std::size_t e = 0; e < dh; ++e) {
                        double aq = P[o.bq + h * dh + e], ak = P[o.bk + h * dh + e],
                               av = P[o.bv + h * dh + e];
                        for (std::size_t i = 0; i < D; ++i) {
                            const double ni = lc.n[t * D + i];
                            const std::size_t wi = h * D * dh + i * dh + e;
                            aq += ni * P[o.wq + wi];
                            ak += ni * P[o.wk + wi];
                            av += ni * P[o.wv + wi];
                        }
                        q[t * dh + e] = aq;
                        k[t * dh + e] = ak;
                        v[t * dh + e] = av;
                    }
                }
                double* pat = lc.p.data() + h * S * S;
                for (std::size_t i = 0; i < S; ++i) {
                    double mx = -1e300;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double sc = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) sc += q[i * dh + e] * k[j * dh + e];
                        pat[i * S + j] = sc * scale;
                        mx = std::max(mx, pat[i * S + j]);
                    }
                    double sum = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        pat[i * S + j] = std::exp(pat[i * S + j] - mx);
                        sum += pat[i * S + j];
                    }
                    for (std::size_t j = 0; j <= i; ++j) pat[i * S + j] /= sum;
                    for (std::size_t e = 0; e < dh; ++e) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) acc += pat[i * S + j] * v[j * dh + e];
                        lc.z[i * H * dh + h * dh + e] = acc;
                    }
                }
            }
            for (std::size_t t = 0; t < S; ++t) {
                for (std::size_t i = 0; i < D; ++i) {
                    double acc = P[o.bo + i];
                    for (std::size_t j = 0; j < H * dh; ++j) acc += lc.z[t * H * dh + j] * P[o.wo + j * D + i];
                    x[t * D + i] += acc;
                }
            }
        }
        c.x_final = x;
        c.xhat_f.assign(S * D, 0.0);
        c.rstd_f.assign(S, 0.0);
        c.n_f.assign(S * D, 0.0);
        layer_norm(x.data(), P + off_.lnf_w, P + off_.lnf_b, c.xhat_f.data(), c.rstd_f.data(),
                   c.n_f.data(), S);
        c.logits.assign(S * V, 0.0);
        for (std::size_t t = 0; t < S; ++t) {
            for (std::size_t u = 0; u < V; ++u) {
                double acc = P[off_.bu + u];
                for (std::size_t i = 0; i < D; ++i) acc += c.n_f[t * D + i] * P[off_.wu + i * V + u];
                c.logits[t * V + u] = acc;
            }
        }
    }

    // Adds d(loss_sum * weight)/dP to G; returns the summed cross-entropy.
    double backward(const double* P, const Example& ex, const SampleCache& c, double weight,
                    double* G) const {
        const std::size_t S = ex.tokens.size(), D = s_.d_model, H = s_.n_heads, dh = s_.d_head,
                          V = s_.vocab_size;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        double loss = 0.0;
        std::vector<double> dlogits(S * V, 0.0);
        for (std::size_t t = 0; t < S; ++t) {
            if (ex.targets[t] < 0) continue;
            const double* row = c.logits.data() + t * V;
            const double mx = *std::max_element(row, row + V);
            double sum = 0.0;
            for (std::size_t u = 0; u < V; ++u) sum += std::exp(row[u] - mx);
            const auto target = static_cast<std::size_t>(ex.targets[t]);
            loss += std::log(sum) + mx - row[target];
            for (std::size_t u = 0; u < V; ++u) {
                dlogits[t * V + u] = weight * (std::exp(row[u] - mx) / sum - (u == target ? 1.0 : 0.0));
            }
        }

        std::vector<double> dn(S * D, 0.0);
        for (std::size_t t = 0; t < S; ++t) {
            for (std::size_t u = 0; u < V; ++u) {
                const double g = dlogits[t * V + u];
                if (g == 0.0) continue;
                G[off_.bu + u] += g;
                for (std::size_t i = 0; i < D; ++i) {
                    G[off_.wu + i * V + u] += c.n_f[t * D + i] * g;
                    dn[t * D + i] += g * P[off_.wu + i * V + u];
                }
            }
        }
        std::vector<double> dx(S * D, 0.0);
        layer_norm_back(dn.data(), c.xhat_f.data(), c.rstd_f.data(), P + off_.lnf_w, G + off_.lnf_w,
                        G + off_.lnf_b, dx.data(), S);

        for (std::size_t l = s_.n_layers; l-- > 0;) {
            const LayerOffsets& o = off_.layers[l];
            const LayerCache& lc = c.layers[l];
            // Output projection.
            std::vector<double> dz(S * H * dh, 0.0);
            for (std::size_t t = 0; t < S; ++t) {
                for (std::size_t i = 0; i < D; ++i) {
                    const double g = dx[t * D + i];
                    G[o.bo + i] += g;
                    for (std::size_t j = 0; j < H * dh; ++j) {
                        G[o.wo + j * D + i] += lc.z[t * H * dh + j] * g;
                        dz[t * H * dh + j] += g * P[o.wo + j * D + i];
                    }
                }
            }
            std::vector<double> dnorm(S * D, 0.0);
            std::vector<double> dq(S * dh), dk(S * dh), dv(S * dh), dp(S);
            for (std::size_t h = 0; h < H; ++h) {
                const double* q = lc.q.data() + h * S * dh;
                const double* k = lc.k.data() + h * S * dh;
                const double* v = lc.v.data() + h * S * dh;
                const double* pat = lc.p.data() + h * S * S;
                std::fill(dq.begin(), dq.end(), 0.0);
                std::fill(dk.begin(), dk.end(), 0.0);
                std::fill(dv.begin(), dv.end(), 0.0);
                for (std::size_t i = 0; i < S; ++i) {
                    const double* dzi = dz.data() + i * H * dh + h * dh;
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double g = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            g += dzi[e] * v[j * dh + e];
                            dv[j * dh + e] += pat[i * S + j] * dzi[e];
                        }
                        dp[j] = g;
                        dot += pat[i * S + j] * g;
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = pat[i * S + j] * (dp[j] - dot) * scale;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dq[i * dh + e] += ds * k[j * dh + e];
                            dk[j * dh + e] += ds * q[i * dh + e];
                        }
                    }
                }
                for (std::size_t t = 0; t < S; ++t) {
                    for (std::size_t e = 0; e < dh; ++e) {
                        const double gq = dq[t * dh + e], gk = dk[t * dh + e], gv = dv[t * dh + e];
                        G[o.bq + h * dh + e] += gq;
                        G[o.bk + h * dh + e] += gk;
                        G[o.bv + h * dh + e] += gv;
                        for (std::size_t i = 0; i < D; ++i) {
                            const std::size_t wi = h * D * dh + i * dh + e;
                            const double ni = lc.n[t * D + i];
                            G[o.wq + wi] += ni * gq;
                            G[o.wk + wi] += ni * gk;
                            G[o.wv + wi] += ni * gv;
                            dnorm[t * D + i] += gq * P[o.wq + wi] + gk * P[o.wk + wi] + gv * P[o.wv + wi];
                        }
                    }
                }
            }
            layer_norm_back(dnorm.data(), lc.xhat.data(), lc.rstd.data(), P + o.ln_w, G + o.ln_w,
                            G + o.ln_b, dx.data(), S);
        }
        for (std::size_t t = 0; t < S; ++t) {
            const auto tok = static_cast<std::size_t>(ex.tokens[t]);
            for (std::size_t i = 0; i < D; ++i) {
                G[off_.we + tok * D + i] += dx[t * D + i];
                if (off_.has_pos) G[off_.wpos + t * D + i] += dx[t * D + i];
            }
        }
        return loss;
    }

    // Mean loss over targeted positions; G receives the gradient of that mean.
    double loss_and_grad(const double* P, const std::vector<Example>& batch, std::vector<double>& G) const {
        std::size_t count = 0;
        for (const Example& ex : batch) {
            if (ex.tokens.size() != ex.targets.size() || ex.tokens.empty()) {
                fail(ErrorCode::InvalidArgument, "example tokens and targets differ in length");
            }
            if (ex.tokens.size() > s_.max_seq) fail(ErrorCode::SeqTooLong, "training sequence too long");
            for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
                if (ex.tokens[t] < 0 || static_cast<std::size_t>(ex.tokens[t]) >= s_.vocab_size ||
                    ex.targets[t] >= static_cast<std::int32_t>(s_.vocab_size)) {
                    fail(ErrorCode::TokenOutOfRange, "training token out of range");
                }
                count += ex.targets[t] >= 0;
            }
        }
        if (count == 0) fail(ErrorCode::InvalidArgument, "batch has no targets");
        const double weight = 1.0 / static_cast<double>(count);
        const std::size_t n = batch.size();
        std::vector<std::vector<double>> per_sample(n);
        std::vector<double> losses(n, 0.0);
#pragma omp parallel for schedule(static)
        for (std::size_t b = 0; b < n; ++b) {
            SampleCache c;
            forward(P, batch[b].tokens, c);
            per_sample[b].assign(lay_.total, 0.0);
            losses[b] = backward(P, batch[b], c, weight, per_sample[b].data());
        }
        G.assign(lay_.total, 0.0);
        double loss = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t i = 0; i < lay_.total; ++i) G[i] += per_sample[b][i];
            loss += losses[b];
        }
        return loss * weight;
    }

private:
    ModelSpec s_;
    Layout lay_;
    Offsets off_;
};

std::vector<double> flatten(const WeightStore& w, const Layout& lay) {
    std::vector<double> P(lay.total);
    for (const auto& name : lay.names) {
        const Tensor& t = w.at(name);
        std::copy(t.data(), t.data() + t.numel(), P.begin() + static_cast<std::ptrdiff_t>(lay.offset(name)));
    }
    return P;
}

std::shared_ptr<const WeightStore> unflatten(const ModelSpec& spec, const Layout& lay,
                                             const std::vector<double>& P) {
    std::map<std::string, Tensor> tensors;
    for (const auto& name : lay.names) {
        const auto [off, n] = lay.slices.at(name);
        std::vector<float> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(P[off + i]);
        tensors.emplace(name, Tensor(lay.shapes.at(name), std::move(data)));
    }
    return std::make_shared<const WeightStore>(spec, std::move(tensors));
}

// Distinct random symbols with a few isolated tokens repeated later; the target
// after each repeat is the token that followed its first occurrence.
Example repeated_tokens(std::mt19937_64& rng, const ModelSpec& spec, std::size_t repeats) {
    const std::size_t S = spec.max_seq;
    std::vector<std::int32_t> pool(spec.vocab_size);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < S; ++i) std::swap(pool[i], pool[i + rng() % (pool.size() - i)]);
    Example ex;
    ex.tokens.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(S));
    ex.targets.assign(S, -1);
    std::vector<char> used(S, 0);
    for (std::size_t placed = 0, tries = 0; placed < repeats && tries < 8 * repeats; ++tries) {
        const std::size_t src = rng() % (S - 2);
        const std::size_t dst = src + 2 + rng() % (S - src - 2);
        if (used[src] || used[src + 1] || used[dst]) continue;
        used[src] = used[src + 1] = used[dst] = 1;
        ex.tokens[dst] = ex.tokens[src];
        ex.targets[dst] = ex.tokens[src + 1];
        ++placed;
    }
    return ex;
}

// Proximal step for a group-lasso penalty on each head's W_O block.
void shrink_heads(std::vector<double>& P, const Net& net, double amount) {
    const ModelSpec& s = net.spec();
    const std::size_t block = s.d_head * s.d_model;
    for (std::size_t l = 0; l < s.n_layers; ++l) {
        const std::size_t base = net.layout().offset("blocks." + std::to_string(l) + ".attn.W_O");
        for (std::size_t h = 0; h < s.n_heads; ++h) {
            double* w = P.data() + base + h * block;
            double norm = 0.0;
            for (std::size_t i = 0; i < block; ++i) norm += w[i] * w[i];
            norm = std::sqrt(norm);
            const double factor = norm > amount ? 1.0 - amount / norm : 0.0;
            for (std::size_t i = 0; i < block; ++i) w[i] *= factor;
        }
    }
}

}  // namespace

std::shared_ptr<const WeightStore> random_weights(const ModelSpec& spec, std::uint64_t seed,
                                                  double stddev) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    std::map<std::string, Tensor> tensors;
    for (const auto& [name, shape] : WeightStore::required_shapes(spec)) {
        Tensor t(shape, 0.0f);
        const bool ln = name.find("ln") != std::string::npos;
        const bool gain = ln && name.ends_with(".w");
        const bool bias = name.ends_with(".b") || name.find(".b_") != std::string::npos;
        for (float& x : t.values()) {
            if (gain) {
                x = 1.0f;
            } else if (!bias) {
                x = static_cast<float>(normal(rng));
            }
        }
        tensors.emplace(name, std::move(t));
    }
    return std::make_shared<const WeightStore>(spec, std::move(tensors));
}

void ToyTrainConfig::validate() const {
    spec.validate();
    if (!spec.attn_only) fail(ErrorCode::InvalidSpec, "toy model must be attention-only");
    if (spec.vocab_size < spec.max_seq + 1) {
        fail(ErrorCode::InvalidSpec, "toy model needs vocab_size >= max_seq + 1");
    }
    if (batch == 0 || !(lr > 0.0) || eval_every == 0 || eval_samples == 0) {
        fail(ErrorCode::InvalidArgument, "batch, lr, eval_every and eval_samples must be positive");
    }
}

LossAndGradients loss_and_gradients(const WeightStore& weights, const std::vector<Example>& batch) {
    if (batch.empty()) fail(ErrorCode::InvalidArgument, "empty batch");
    Net net(weights.spec());
    const auto P = flatten(weights, net.layout());
    std::vector<double> G;
    LossAndGradients out;
    out.loss = net.loss_and_grad(P.data(), batch, G);
    for (const auto& name : net.layout().names) {
        const auto [off, n] = net.layout().slices.at(name);
        out.gradients[name].assign(G.begin() + static_cast<std::ptrdiff_t>(off),
                                   G.begin() + static_cast<std::ptrdiff_t>(off + n));
    }
    return out;
}

std::vector<double> trainer_logits(const WeightStore& weights, const std::vector<std::int32_t>& tokens) {
    Net net(weights.spec());
    const auto P = flatten(weights, net.layout());
    SampleCache c;
    net.forward(P.data(), tokens, c);
    return c.logits;
}

double induction_accuracy(const Model& model, std::size_t n, std::uint64_t seed) {
    const auto vocab = tasks::Vocab::toy_symbols(model.spec().vocab_size);
    tasks::GenerateOptions opts;
    opts.toy_seq = model.spec().max_seq;
    const auto ds = tasks::generate(tasks::TaskKind::ToyInduction, n, seed, vocab, opts);
    const auto batch = ds.clean_batch();
    const auto out = model.forward(batch);
    const std::size_t S = batch.seq, V = model.spec().vocab_size;
    std::size_t hits = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const float* row = out.logits.data() + (b * S + S - 1) * V;
        const auto best = static_cast<std::int32_t>(std::max_element(row, row + V) - row);
        hits += best == ds.pairs[b].answer.correct.front();
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

TrainReport train_toy(const ToyTrainConfig& cfg) {
    cfg.validate();
    const ModelSpec& spec = cfg.spec;
    Net net(spec);
    const Layout& lay = net.layout();
    auto P = flatten(*random_weights(spec, cfg.seed), lay);

    const auto vocab = tasks::Vocab::toy_symbols(spec.vocab_size);
    tasks::GenerateOptions opts;
    opts.toy_seq = spec.max_seq;
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    const double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
    std::vector<double> m(lay.total, 0.0), v(lay.total, 0.0), G;
    TrainReport report;
    const std::uint64_t eval_seed = cfg.seed + 0x5eed0001ULL;

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        std::vector<Example> batch;
        const std::size_t n_prompts = cfg.batch / 2;
        const auto prompts = tasks::generate(tasks::TaskKind::ToyInduction, n_prompts,
                                             rng(), vocab, opts);
        for (const auto& pair : prompts.pairs) {
            Example ex{pair.clean_tokens, std::vector<std::int32_t>(pair.clean_tokens.size(), -1)};
            ex.targets.back() = pair.answer.correct.front();
            batch.push_back(std::move(ex));
        }
        while (batch.size() < cfg.batch) batch.push_back(repeated_tokens(rng, spec, 3));

        report.final_loss = net.loss_and_grad(P.data(), batch, G);
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < lay.total; ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * G[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * G[i] * G[i];
            P[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
        if (cfg.head_sparsity > 0.0) shrink_heads(P, net, cfg.lr * cfg.head_sparsity);
        report.steps_run = step;

        if (step % cfg.eval_every == 0 || step == cfg.steps) {
            report.weights = unflatten(spec, lay, P);
            report.accuracy = induction_accuracy(Model(report.weights), cfg.eval_samples, eval_seed);
            if (report.accuracy >= cfg.target_accuracy && step >= cfg.min_steps) {
                report.converged = true;
                return report;
            }
        }
    }
    if (!report.weights) report.weights = unflatten(spec, lay, P);
    return report;
}

}  // namespace circuitforge::train
