#include "moelab/model.hpp"

#include <cmath>
#include <sstream>

#include "moelab/error.hpp"
#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

constexpr double kRmsEps = 1e-5;

// Init scales. Linears default to std 1/sqrt(d_in). The attention output and
// router start larger so that early routing follows sequence context more
// than token identity; this is what gives each task its own hot experts.
constexpr double kTokStd = 1.0;
constexpr double kPosStd = 0.1;
constexpr double kAttnOutGain = 10.0;
constexpr double kRouterGain = 4.0;

Tensor random_tensor(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

Linear make_linear(ParamRegistry& params, Rng& rng, std::string target, std::size_t d_in, std::size_t d_out,
                   double gain = 1.0) {
  Linear lin;
  lin.d_in = d_in;
  lin.d_out = d_out;
  lin.weight = params.add(target + ".weight", random_tensor(rng, {d_in, d_out}, gain / std::sqrt(double(d_in))));
  lin.target = std::move(target);
  return lin;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

Tensor rms_forward(const Tensor& x, NormCache& cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor y({n, d});
  cache.inv_rms.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += x.at(r, c) * x.at(r, c);
    const double inv = 1.0 / std::sqrt(ss / double(d) + kRmsEps);
    cache.inv_rms[r] = inv;
    for (std::size_t c = 0; c < d; ++c) y.at(r, c) = x.at(r, c) * inv;
  }
  cache.x = x;
  return y;
}

Tensor rms_backward(const NormCache& cache, const Tensor& dy) {
  const Tensor& x = cache.x;
  const std::size_t n = x.rows(), d = x.cols();
  Tensor dx({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const double inv = cache.inv_rms[r];
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += dy.at(r, c) * x.at(r, c);
    const double k = inv * inv * inv * dot / double(d);
    for (std::size_t c = 0; c < d; ++c) dx.at(r, c) = inv * dy.at(r, c) - k * x.at(r, c);
  }
  return dx;
}

void softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = in[0];
  for (double v : in) mx = std::max(mx, v);
  double z = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
}

struct SeqLayout {
  const std::vector<std::size_t>& offsets;
  const std::vector<std::size_t>& lengths;
};

Tensor attention_forward(const ParamRegistry& params, const MoEBlock& blk, const Tensor& u, const SeqLayout& seqs,
                         std::size_t n_heads, AttentionCache& c) {
  const std::size_t T = u.rows(), d = u.cols(), dh = d / n_heads;
  c.qm = linear_forward(params, blk.q, u, &c.q);
  c.km = linear_forward(params, blk.k, u, &c.k);
  c.vm = linear_forward(params, blk.v, u, &c.v);
  c.ctx = Tensor({T, d});
  const std::size_t n_seq = seqs.lengths.size();
  c.probs.assign(n_seq * n_heads, Tensor());
  const double inv_scale = 1.0 / std::sqrt(double(dh));
  const auto jobs = static_cast<std::ptrdiff_t>(n_seq * n_heads);
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && T * d >= 4096)
  for (std::ptrdiff_t job = 0; job < jobs; ++job) {
    const std::size_t s = std::size_t(job) / n_heads, h = std::size_t(job) % n_heads;
    const std::size_t o = seqs.offsets[s], n = seqs.lengths[s], h0 = h * dh;
    Tensor P({n, n});
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < dh; ++e) acc += c.qm.at(o + i, h0 + e) * c.km.at(o + j, h0 + e);
        scores[j] = acc * inv_scale;
      }
      softmax_row(std::span<const double>(scores).first(i + 1), P.row(i).first(i + 1));
      for (std::size_t e = 0; e < dh; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += P.at(i, j) * c.vm.at(o + j, h0 + e);
        c.ctx.at(o + i, h0 + e) = acc;
      }
    }
    c.probs[std::size_t(job)] = std::move(P);
  }
  return linear_forward(params, blk.o, c.ctx, &c.o);
}

Tensor attention_backward(const ParamRegistry& params, const MoEBlock& blk, const AttentionCache& c,
                          const SeqLayout& seqs, std::size_t n_heads, const Tensor& dout, GradBuffer& grads) {
  const Tensor dctx = linear_backward(params, blk.o, c.o, dout, grads);
  const std::size_t T = dctx.rows(), d = dctx.cols(), dh = d / n_heads;
  Tensor dq({T, d}), dk({T, d}), dv({T, d});
  const double inv_scale = 1.0 / std::sqrt(double(dh));
  const std::size_t n_seq = seqs.lengths.size();
  const auto jobs = static_cast<std::ptrdiff_t>(n_seq * n_heads);
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled() && T * d >= 4096)
  for (std::ptrdiff_t job = 0; job < jobs; ++job) {
    const std::size_t s = std::size_t(job) / n_heads, h = std::size_t(job) % n_heads;
    const std::size_t o = seqs.offsets[s], n = seqs.lengths[s], h0 = h * dh;
    const Tensor& P = c.probs[std::size_t(job)];
    std::vector<double> dP(n);
    for (std::size_t i = 0; i < n; ++i) {
      double row_dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < dh; ++e) acc += dctx.at(o + i, h0 + e) * c.vm.at(o + j, h0 + e);
        dP[j] = acc;
        row_dot += P.at(i, j) * acc;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double pij = P.at(i, j);
        const double ds = pij * (dP[j] - row_dot) * inv_scale;
        for (std::size_t e = 0; e < dh; ++e) {
          dq.at(o + i, h0 + e) += ds * c.km.at(o + j, h0 + e);
          dk.at(o + j, h0 + e) += ds * c.qm.at(o + i, h0 + e);
          dv.at(o + j, h0 + e) += pij * dctx.at(o + i, h0 + e);
        }
      }
    }
  }
  Tensor du = linear_backward(params, blk.q, c.q, dq, grads);
  add_into(du, linear_backward(params, blk.k, c.k, dk, grads));
  add_into(du, linear_backward(params, blk.v, c.v, dv, grads));
  return du;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t d = x.cols();
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) = x.at(rows[r], c);
  }
  return out;
}

void expert_forward(const ParamRegistry& params, const ExpertFFN& ffn, const Tensor& x, ExpertCache& c) {
  c.pre = linear_forward(params, ffn.up, x, &c.up);
  c.act = Tensor(c.pre.shape());
  kernels::gelu(c.pre.span(), c.act.span());
  c.out = linear_forward(params, ffn.down, c.act, &c.down);
}

Tensor expert_backward(const ParamRegistry& params, const ExpertFFN& ffn, const ExpertCache& c, const Tensor& dout,
                       GradBuffer& grads) {
  const Tensor dact = linear_backward(params, ffn.down, c.down, dout, grads);
  Tensor dpre(dact.shape());
  kernels::gelu_backward(c.pre.span(), dact.span(), dpre.span());
  return linear_backward(params, ffn.up, c.up, dpre, grads);
}

Tensor moe_forward(const ParamRegistry& params, const ModelConfig& cfg, const MoEBlock& blk, const Tensor& u,
                   MoECache& c, LayerRouting& routing, LayerStats& stats) {
  const std::size_t T = u.rows(), d = u.cols(), ne = cfg.n_experts, k = cfg.k_route;
  const Tensor logits = linear_forward(params, blk.router, u, &c.router);
  c.probs = Tensor({T, ne});
  for (std::size_t t = 0; t < T; ++t) softmax_row(logits.row(t), c.probs.row(t));

  routing.tokens = T;
  routing.k = k;
  routing.experts.assign(T * k, 0);
  routing.weights.assign(T * k, 0.0);
  c.slot.assign(T * k, 0);
  c.experts.assign(ne, ExpertCache{});
  for (std::size_t t = 0; t < T; ++t) {
    const TopK sel = route_topk(logits.row(t), k);
    for (std::size_t j = 0; j < k; ++j) {
      const auto e = std::size_t(sel.indices[j]);
      routing.experts[t * k + j] = sel.indices[j];
      routing.weights[t * k + j] = sel.weights[j];
      c.slot[t * k + j] = c.experts[e].rows.size();
      c.experts[e].rows.push_back(t);
    }
  }

  const auto n_exp = static_cast<std::ptrdiff_t>(ne);
#pragma omp parallel for schedule(dynamic) if (kernels::parallel_enabled() && T * d * cfg.d_ff >= 65536)
  for (std::ptrdiff_t ei = 0; ei < n_exp; ++ei) {
    ExpertCache& ec = c.experts[std::size_t(ei)];
    if (ec.rows.empty()) continue;
    expert_forward(params, blk.experts[std::size_t(ei)], gather_rows(u, ec.rows), ec);
  }

  // Combine in a fixed order: per token, selections by rank, then shared experts.
  Tensor y({T, d});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const ExpertCache& ec = c.experts[std::size_t(routing.experts[t * k + j])];
      const double w = routing.weights[t * k + j];
      const auto src = ec.out.row(c.slot[t * k + j]);
      for (std::size_t col = 0; col < d; ++col) y.at(t, col) += w * src[col];
    }
  }
  c.shared.assign(blk.shared.size(), ExpertCache{});
  for (std::size_t s = 0; s < blk.shared.size(); ++s) {
    expert_forward(params, blk.shared[s], u, c.shared[s]);
    add_into(y, c.shared[s].out);
  }

  stats.tokens = T;
  stats.f.assign(ne, 0.0);
  stats.P.assign(ne, 0.0);
  for (std::size_t e = 0; e < ne; ++e) stats.f[e] = double(c.experts[e].rows.size()) / double(T * k);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t e = 0; e < ne; ++e) stats.P[e] += c.probs.at(t, e);
  }
  for (double& p : stats.P) p /= double(T);
  return y;
}

Tensor moe_backward(const ParamRegistry& params, const ModelConfig& cfg, const MoEBlock& blk, const MoECache& c,
                    const LayerRouting& routing, const std::vector<double>* lb_grad, const Tensor& dy,
                    GradBuffer& grads) {
  const std::size_t T = dy.rows(), d = dy.cols(), ne = cfg.n_experts, k = cfg.k_route;
  std::vector<Tensor> dout(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    if (!c.experts[e].rows.empty()) dout[e] = Tensor({c.experts[e].rows.size(), d});
  }
  std::vector<double> dw(T * k, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto e = std::size_t(routing.experts[t * k + j]);
      const std::size_t slot = c.slot[t * k + j];
      const double w = routing.weights[t * k + j];
      const auto out_row = c.experts[e].out.row(slot);
      auto g_row = dout[e].row(slot);
      double acc = 0.0;
      for (std::size_t col = 0; col < d; ++col) {
        g_row[col] = w * dy.at(t, col);
        acc += dy.at(t, col) * out_row[col];
      }
      dw[t * k + j] = acc;
    }
  }

  std::vector<Tensor> dx(ne);
  const auto n_exp = static_cast<std::ptrdiff_t>(ne);
#pragma omp parallel for schedule(dynamic) if (kernels::parallel_enabled() && T * d * cfg.d_ff >= 65536)
  for (std::ptrdiff_t ei = 0; ei < n_exp; ++ei) {
    const auto e = std::size_t(ei);
    if (c.experts[e].rows.empty()) continue;
    dx[e] = expert_backward(params, blk.experts[e], c.experts[e], dout[e], grads);
  }

  Tensor du({T, d});
  Tensor dlogits({T, ne});
  for (std::size_t t = 0; t < T; ++t) {
    double wdw = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const auto e = std::size_t(routing.experts[t * k + j]);
      const auto src = dx[e].row(c.slot[t * k + j]);
      for (std::size_t col = 0; col < d; ++col) du.at(t, col) += src[col];
      wdw += routing.weights[t * k + j] * dw[t * k + j];
    }
    // Softmax over the selected logits; unselected logits get nothing here.
    for (std::size_t j = 0; j < k; ++j) {
      const auto e = std::size_t(routing.experts[t * k + j]);
      dlogits.at(t, e) += routing.weights[t * k + j] * (dw[t * k + j] - wdw);
    }
  }
  for (std::size_t s = 0; s < blk.shared.size(); ++s) {
    add_into(du, expert_backward(params, blk.shared[s], c.shared[s], dy, grads));
  }
  if (lb_grad) {
    // dL/dp_ti = g_i / T through the full softmax.
    for (std::size_t t = 0; t < T; ++t) {
      double dot = 0.0;
      for (std::size_t e = 0; e < ne; ++e) dot += c.probs.at(t, e) * (*lb_grad)[e];
      for (std::size_t e = 0; e < ne; ++e) {
        dlogits.at(t, e) += c.probs.at(t, e) * ((*lb_grad)[e] - dot) / double(T);
      }
    }
  }
  add_into(du, linear_backward(params, blk.router, c.router, dlogits, grads));
  return du;
}

void require_finite(const Tensor& t, const std::string& where) {
  if (!t.all_finite()) throw NumericalError("non-finite activation at " + where);
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (d_model == 0 || n_heads == 0) fail("d_model and n_heads must be >= 1");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff == 0) fail("d_ff must be >= 1");
  if (n_experts == 0) fail("n_experts must be >= 1");
  if (k_route == 0 || k_route > n_experts) fail("k_route must be in [1, n_experts]");
  if (vocab < 2) fail("vocab must be >= 2");
  if (max_seq == 0) fail("max_seq must be >= 1");
  if (!(lb_weight >= 0.0) || !std::isfinite(lb_weight)) fail("lb_weight must be finite and >= 0");
}

std::string layer_prefix(std::size_t layer) { return "layer" + std::to_string(layer); }

std::string expert_target(std::size_t layer, std::size_t expert, bool up) {
  return layer_prefix(layer) + ".expert" + std::to_string(expert) + (up ? ".up" : ".down");
}

std::string shared_target(std::size_t layer, std::size_t expert, bool up) {
  return layer_prefix(layer) + ".shared" + std::to_string(expert) + (up ? ".up" : ".down");
}

GradBuffer::GradBuffer(const ParamRegistry& registry) : grads_(registry.size()) {
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const ParamEntry& e = registry.entry(i);
    if (e.trainable) grads_[i] = Tensor::zeros(e.value.shape());
  }
}

GradMap GradBuffer::to_map(const ParamRegistry& registry) const {
  GradMap out;
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    if (!grads_[i]) continue;
    const ParamEntry& e = registry.entry(i);
    Tensor g = *grads_[i];
    if (e.mask) {
      for (std::size_t j = 0; j < g.numel(); ++j) {
        if ((*e.mask)[j] == 0.0) g[j] = 0.0;
      }
    }
    out.emplace(e.name, std::move(g));
  }
  return out;
}

Tensor linear_forward(const ParamRegistry& params, const Linear& lin, const Tensor& x, LinearCache* cache) {
  const std::size_t n = x.rows();
  Tensor y({n, lin.d_out});
  kernels::matmul(x.span(), params.value(lin.weight).span(), y.span(), n, lin.d_in, lin.d_out);
  if (lin.adapter) {
    const Adapter& ad = *lin.adapter;
    Tensor b_eff = params.value(ad.b);
    if (ad.mask) {
      const Tensor& m = params.value(*ad.mask);
      for (std::size_t i = 0; i < b_eff.numel(); ++i) b_eff[i] *= m[i];
    }
    Tensor xa({n, ad.rank});
    kernels::matmul(x.span(), params.value(ad.a).span(), xa.span(), n, lin.d_in, ad.rank);
    Tensor delta({n, lin.d_out});
    kernels::matmul(xa.span(), b_eff.span(), delta.span(), n, ad.rank, lin.d_out);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += ad.scale * delta[i];
    if (cache) {
      cache->xa = std::move(xa);
      cache->b_eff = std::move(b_eff);
    }
  }
  if (cache) cache->x = x;
  return y;
}

Tensor linear_backward(const ParamRegistry& params, const Linear& lin, const LinearCache& cache, const Tensor& dy,
                       GradBuffer& grads) {
  const std::size_t n = dy.rows();
  Tensor dx({n, lin.d_in});
  kernels::matmul_a_bt(dy.span(), params.value(lin.weight).span(), dx.span(), n, lin.d_out, lin.d_in);
  if (grads.wants(lin.weight)) {
    kernels::matmul_at_b(cache.x.span(), dy.span(), grads.at(lin.weight).span(), n, lin.d_in, lin.d_out, true);
  }
  if (lin.adapter) {
    const Adapter& ad = *lin.adapter;
    Tensor dxa({n, ad.rank});
    kernels::matmul_a_bt(dy.span(), cache.b_eff.span(), dxa.span(), n, lin.d_out, ad.rank);
    for (std::size_t i = 0; i < dxa.numel(); ++i) dxa[i] *= ad.scale;
    if (grads.wants(ad.a)) {
      kernels::matmul_at_b(cache.x.span(), dxa.span(), grads.at(ad.a).span(), n, lin.d_in, ad.rank, true);
    }
    if (grads.wants(ad.b)) {
      Tensor gb({ad.rank, lin.d_out});
      kernels::matmul_at_b(cache.xa.span(), dy.span(), gb.span(), n, ad.rank, lin.d_out);
      Tensor& acc = grads.at(ad.b);
      for (std::size_t i = 0; i < gb.numel(); ++i) acc[i] += ad.scale * gb[i];
    }
    kernels::matmul_a_bt(dxa.span(), params.value(ad.a).span(), dx.span(), n, ad.rank, lin.d_in, true);
  }
  return dx;
}

MoEModel::MoEModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  tok_embed_ = params_.add("embed.tok", random_tensor(rng, {config_.vocab, d}, kTokStd));
  pos_embed_ = params_.add("embed.pos", random_tensor(rng, {config_.max_seq, d}, kPosStd));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    MoEBlock blk;
    blk.q = make_linear(params_, rng, p + ".attn.q", d, d);
    blk.k = make_linear(params_, rng, p + ".attn.k", d, d);
    blk.v = make_linear(params_, rng, p + ".attn.v", d, d);
    blk.o = make_linear(params_, rng, p + ".attn.o", d, d, kAttnOutGain);
    blk.router = make_linear(params_, rng, p + ".router", d, config_.n_experts, kRouterGain);
    for (std::size_t e = 0; e < config_.n_experts; ++e) {
      blk.experts.push_back({make_linear(params_, rng, expert_target(l, e, true), d, config_.d_ff),
                             make_linear(params_, rng, expert_target(l, e, false), config_.d_ff, d)});
    }
    for (std::size_t s = 0; s < config_.n_shared; ++s) {
      blk.shared.push_back({make_linear(params_, rng, shared_target(l, s, true), d, config_.d_ff),
                            make_linear(params_, rng, shared_target(l, s, false), config_.d_ff, d)});
    }
    blocks_.push_back(std::move(blk));
  }
  head_ = make_linear(params_, rng, "head", d, config_.vocab);
}

LossSpec MoEModel::default_loss() const {
  return LossSpec{config_.lb_mode != LbMode::off && config_.lb_weight > 0.0, config_.lb_mode, config_.lb_weight};
}

void MoEModel::for_each_linear(const std::function<void(Linear&)>& fn) {
  for (MoEBlock& b : blocks_) {
    for (Linear* l : {&b.q, &b.k, &b.v, &b.o, &b.router}) fn(*l);
    for (ExpertFFN& e : b.experts) {
      fn(e.up);
      fn(e.down);
    }
    for (ExpertFFN& e : b.shared) {
      fn(e.up);
      fn(e.down);
    }
  }
}

void MoEModel::for_each_linear(const std::function<void(const Linear&)>& fn) const {
  const_cast<MoEModel*>(this)->for_each_linear([&](Linear& l) { fn(l); });
}

Linear* MoEModel::find_linear(const std::string& target) {
  Linear* found = nullptr;
  for_each_linear([&](Linear& l) {
    if (l.target == target) found = &l;
  });
  return found;
}

ForwardResult MoEModel::forward(const Batch& batch, const LossSpec& loss, ForwardCache* cache_out) const {
  const ModelConfig& cfg = config_;
  const std::size_t d = cfg.d_model;
  ForwardCache local;
  ForwardCache& cache = cache_out ? *cache_out : local;
  cache.offsets.clear();
  std::size_t T = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (batch.lengths[b] == 0) throw ConfigError("empty sequence in batch");
    if (batch.lengths[b] > cfg.max_seq) throw ConfigError("sequence longer than max_seq");
    cache.offsets.push_back(T);
    T += batch.lengths[b];
  }
  if (T == 0) throw ConfigError("empty batch");
  const SeqLayout seqs{cache.offsets, batch.lengths};

  const Tensor& tok = params_.value(tok_embed_);
  const Tensor& pos = params_.value(pos_embed_);
  Tensor x({T, d});
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
      const int id = batch.token(b, t);
      if (id < 0 || std::size_t(id) >= cfg.vocab) throw ConfigError("token id out of vocabulary: " + std::to_string(id));
      const std::size_t r = cache.offsets[b] + t;
      for (std::size_t c = 0; c < d; ++c) x.at(r, c) = tok.at(std::size_t(id), c) + pos.at(t, c);
    }
  }

  ForwardResult res;
  res.trace.n_experts = cfg.n_experts;
  res.trace.layers.resize(cfg.n_layers);
  res.stats.n_experts = cfg.n_experts;
  res.stats.layers.resize(cfg.n_layers);
  cache.blocks.assign(cfg.n_layers, BlockCache{});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockCache& bc = cache.blocks[l];
    const MoEBlock& blk = blocks_[l];
    const Tensor u1 = rms_forward(x, bc.norm1);
    add_into(x, attention_forward(params_, blk, u1, seqs, cfg.n_heads, bc.attn));
    const Tensor u2 = rms_forward(x, bc.norm2);
    add_into(x, moe_forward(params_, cfg, blk, u2, bc.moe, res.trace.layers[l], res.stats.layers[l]));
    require_finite(x, layer_prefix(l));
  }
  const Tensor h = rms_forward(x, cache.final_norm);
  res.logits = linear_forward(params_, head_, h, &cache.head);

  double ce = 0.0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
      if (!batch.scored(b, t)) continue;
      const int target = batch.target(b, t);
      if (target < 0 || std::size_t(target) >= cfg.vocab) throw ConfigError("target id out of vocabulary");
      const auto row = res.logits.row(cache.offsets[b] + t);
      double mx = row[0];
      for (double v : row) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      ce += (mx + std::log(z)) - row[std::size_t(target)];
      ++res.scored;
    }
  }
  res.ce = res.scored ? ce / double(res.scored) : 0.0;
  res.lb = (loss.include_lb && loss.lb_mode != LbMode::off) ? load_balancing_loss(res.stats, loss.lb_mode) : 0.0;
  res.loss = res.ce + (loss.include_lb ? loss.lb_weight * res.lb : 0.0);
  if (!std::isfinite(res.loss)) {
    std::string culprit = "head";
    for (const ParamEntry& e : params_.entries()) {
      if (!e.value.all_finite()) {
        culprit = e.name;
        break;
      }
    }
    std::ostringstream os;
    os << "non-finite loss (ce=" << res.ce << ", lb=" << res.lb << ") near " << culprit;
    throw NumericalError(os.str());
  }
  return res;
}

void MoEModel::backward(const Batch& batch, const ForwardResult& fwd, const ForwardCache& cache,
                        const Tensor& dlogits, const LossSpec& loss, GradBuffer& grads) const {
  const ModelConfig& cfg = config_;
  const SeqLayout seqs{cache.offsets, batch.lengths};
  const bool use_lb = loss.include_lb && loss.lb_mode != LbMode::off && loss.lb_weight != 0.0;
  std::vector<std::vector<double>> lb_grad;
  if (use_lb) {
    lb_grad = load_balancing_grad(fwd.stats, loss.lb_mode);
    for (auto& layer : lb_grad) {
      for (double& g : layer) g *= loss.lb_weight;
    }
  }

  Tensor dh = linear_backward(params_, head_, cache.head, dlogits, grads);
  Tensor dx = rms_backward(cache.final_norm, dh);
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const BlockCache& bc = cache.blocks[li];
    const MoEBlock& blk = blocks_[li];
    const Tensor du2 = moe_backward(params_, cfg, blk, bc.moe, fwd.trace.layers[li], use_lb ? &lb_grad[li] : nullptr,
                                    dx, grads);
    add_into(dx, rms_backward(bc.norm2, du2));
    const Tensor du1 = attention_backward(params_, blk, bc.attn, seqs, cfg.n_heads, dx, grads);
    add_into(dx, rms_backward(bc.norm1, du1));
  }

  const bool want_tok = grads.wants(tok_embed_), want_pos = grads.wants(pos_embed_);
  if (!want_tok && !want_pos) return;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
      const auto src = dx.row(cache.offsets[b] + t);
      if (want_tok) {
        auto dst = grads.at(tok_embed_).row(std::size_t(batch.token(b, t)));
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
      if (want_pos) {
        auto dst = grads.at(pos_embed_).row(t);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
    }
  }
}

LossAndGrads forward_backward(const MoEModel& model, const Batch& batch, const LossSpec& loss) {
  ForwardCache cache;
  ForwardResult fwd = model.forward(batch, loss, &cache);
  const std::size_t vocab = model.config().vocab;
  Tensor dlogits(fwd.logits.shape());
  if (fwd.scored) {
    const double inv_n = 1.0 / double(fwd.scored);
    for (std::size_t b = 0; b < batch.batch; ++b) {
      for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
        if (!batch.scored(b, t)) continue;
        const std::size_t r = cache.offsets[b] + t;
        const auto row = fwd.logits.row(r);
        auto g = dlogits.row(r);
        softmax_row(row, g);
        g[std::size_t(batch.target(b, t))] -= 1.0;
        for (std::size_t v = 0; v < vocab; ++v) g[v] *= inv_n;
      }
    }
  }
  GradBuffer grads(model.params());
  model.backward(batch, fwd, cache, dlogits, loss, grads);
  LossAndGrads out;
  out.loss = fwd.loss;
  out.grads = grads.to_map(model.params());
  for (const auto& [name, g] : out.grads) {
    if (!g.all_finite()) throw NumericalError("non-finite gradient for " + name);
  }
  out.trace = std::move(fwd.trace);
  return out;
}

double lm_loss(const MoEModel& model, const Batch& batch, const LossSpec& loss) {
  return model.forward(batch, loss).loss;
}

}  // namespace moelab
