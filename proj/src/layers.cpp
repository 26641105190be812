#include "kdse/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace kdse::inline KDSE_PRECISION {

Var ParamSet::add(const std::string& name, Tensor init) {
  for (const auto& p : items_)
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  Var v = parameter(std::move(init));
  items_.push_back({name, v});
  return v;
}

Var ParamSet::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return p.var;
  throw std::out_of_range("no parameter named " + name);
}

Index ParamSet::count() const {
  Index n = 0;
  for (const auto& p : items_) n += p.var.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

void ParamSet::append(const ParamSet& other) {
  for (const auto& p : other.items_) {
    for (const auto& q : items_)
      if (q.name == p.name) throw std::logic_error("duplicate parameter name " + p.name);
    items_.push_back(p);
  }
}

Index count_params(const ParamSet& params) { return params.count(); }

Tensor uniform_init(Shape shape, Index fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  for (Real& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
  return t;
}

Linear::Linear(ParamSet& ps, const std::string& prefix, Index in, Index out, Rng& rng)
    : w(ps.add(prefix + ".weight", uniform_init({in, out}, in, rng))),
      b(ps.add(prefix + ".bias", uniform_init({out}, in, rng))) {}

Conv2d::Conv2d(ParamSet& ps, const std::string& prefix, Index cin, Index cout, Index kh, Index kw,
               Conv2dSpec s, Rng& rng)
    : w(ps.add(prefix + ".weight", uniform_init({cout, cin, kh, kw}, cin * kh * kw, rng))),
      b(ps.add(prefix + ".bias", uniform_init({cout}, cin * kh * kw, rng))),
      spec(s) {}

ConvTranspose2d::ConvTranspose2d(ParamSet& ps, const std::string& prefix, Index cin, Index cout, Index kh,
                                 Index kw, Conv2dSpec s, Rng& rng)
    : w(ps.add(prefix + ".weight", uniform_init({cin, cout, kh, kw}, cout * kh * kw, rng))),
      b(ps.add(prefix + ".bias", uniform_init({cout}, cout * kh * kw, rng))),
      spec(s) {}

LayerNorm::LayerNorm(ParamSet& ps, const std::string& prefix, Index width)
    : gamma(ps.add(prefix + ".gamma", Tensor(Shape{width}, Real(1)))),
      beta(ps.add(prefix + ".beta", Tensor(Shape{width}, Real(0)))) {}

ChannelFreqNorm::ChannelFreqNorm(ParamSet& ps, const std::string& prefix, Index channels)
    : gamma(ps.add(prefix + ".gamma", Tensor(Shape{channels}, Real(1)))),
      beta(ps.add(prefix + ".beta", Tensor(Shape{channels}, Real(0)))) {}

Gru::Gru(ParamSet& ps, const std::string& prefix, Index in, Index hidden, Rng& rng)
    : input(ps, prefix + ".ih", in, 3 * hidden, rng),
      w_hh(ps.add(prefix + ".hh.weight", uniform_init({hidden, 3 * hidden}, hidden, rng))),
      b_hh(ps.add(prefix + ".hh.bias", uniform_init({3 * hidden}, hidden, rng))) {}

SelfAttention::SelfAttention(ParamSet& ps, const std::string& prefix, Index dim, Index h, bool c, Rng& rng)
    : qkv(ps, prefix + ".qkv", dim, 3 * dim, rng), out(ps, prefix + ".out", dim, dim, rng), heads(h), causal(c) {
  if (dim % h != 0) throw std::invalid_argument("attention width must be divisible by the head count");
}

}  // namespace kdse::inline KDSE_PRECISION
