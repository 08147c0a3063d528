#include "dood/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dood/errors.hpp"

namespace dood {

const char* to_string(SkipMode mode) { return mode == SkipMode::Concat ? "concat" : "add"; }

SkipMode parse_skip_mode(const std::string& s) {
  if (s == "concat") return SkipMode::Concat;
  if (s == "add") return SkipMode::Add;
  throw DataError("unknown skip mode '" + s + "' (expected concat|add)");
}

std::size_t default_groupnorm_groups(std::size_t hidden) {
  if (hidden < 8) return 1;
  for (std::size_t g = std::min<std::size_t>(32, hidden / 4); g > 1; --g) {
    if (hidden % g == 0) return g;
  }
  return 1;
}

DenoiserConfig DenoiserConfig::resolved() const {
  DenoiserConfig c = *this;
  if (c.hidden_dim == 0) c.hidden_dim = c.input_dim;
  if (c.groupnorm_groups == 0) c.groupnorm_groups = default_groupnorm_groups(c.hidden_dim);
  return c;
}

void DenoiserConfig::validate() const {
  if (input_dim == 0) throw DataError("denoiser input_dim must be >= 1");
  if (hidden_dim == 0) throw DataError("denoiser hidden_dim must be >= 1");
  if (n_input_blocks != n_output_blocks) {
    throw DataError("n_input_blocks (" + std::to_string(n_input_blocks) + ") must equal n_output_blocks (" +
                    std::to_string(n_output_blocks) + ")");
  }
  if (groupnorm_groups == 0 || hidden_dim % groupnorm_groups != 0) {
    throw DataError("groupnorm_groups (" + std::to_string(groupnorm_groups) + ") must divide hidden_dim (" +
                    std::to_string(hidden_dim) + ")");
  }
}

namespace {

template <typename S>
LinearLayer<S> zero_linear(std::size_t out, std::size_t in) {
  return {RowMatrix<S>::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
          ColVector<S>::Zero(static_cast<Eigen::Index>(out))};
}

template <typename S>
NormLayer<S> zero_norm(std::size_t n) {
  return {ColVector<S>::Zero(static_cast<Eigen::Index>(n)), ColVector<S>::Zero(static_cast<Eigen::Index>(n))};
}

template <typename S>
ResidualBlock<S> zero_block(std::size_t hidden, std::size_t in_width) {
  return {zero_norm<S>(in_width), zero_linear<S>(hidden, in_width), zero_norm<S>(hidden),
          zero_linear<S>(hidden, hidden)};
}

std::size_t output_block_width(const DenoiserConfig& cfg) {
  return cfg.skip == SkipMode::Concat ? 2 * cfg.hidden_dim : cfg.hidden_dim;
}

template <typename S, typename Fn>
void visit_linear(const std::string& role, LinearLayer<S>& l, Fn& fn) {
  fn(role + "_weight", std::span<S>(l.weight.data(), static_cast<std::size_t>(l.weight.size())),
     std::vector<std::size_t>{static_cast<std::size_t>(l.weight.rows()), static_cast<std::size_t>(l.weight.cols())});
  fn(role + "_bias", std::span<S>(l.bias.data(), static_cast<std::size_t>(l.bias.size())),
     std::vector<std::size_t>{static_cast<std::size_t>(l.bias.size())});
}

template <typename S, typename Fn>
void visit_norm(const std::string& role, NormLayer<S>& n, Fn& fn) {
  const std::vector<std::size_t> shape{static_cast<std::size_t>(n.scale.size())};
  fn(role + "_scale", std::span<S>(n.scale.data(), shape[0]), shape);
  fn(role + "_shift", std::span<S>(n.shift.data(), shape[0]), shape);
}

template <typename S, typename Fn>
void visit_all(BasicDenoiserParams<S>& p, Fn& fn) {
  visit_linear("input_proj", p.input_proj, fn);
  auto visit_block = [&](const std::string& prefix, ResidualBlock<S>& b) {
    visit_norm(prefix + "_norm1", b.norm1, fn);
    visit_linear(prefix + "_linear1", b.linear1, fn);
    visit_norm(prefix + "_norm2", b.norm2, fn);
    visit_linear(prefix + "_linear2", b.linear2, fn);
  };
  for (std::size_t i = 0; i < p.input_blocks.size(); ++i) visit_block("in" + std::to_string(i), p.input_blocks[i]);
  for (std::size_t i = 0; i < p.output_blocks.size(); ++i) visit_block("out" + std::to_string(i), p.output_blocks[i]);
  visit_linear("output_proj", p.output_proj, fn);
}

template <typename S>
ColVector<S> time_column(std::span<const int> timesteps, Eigen::Index rows) {
  ColVector<S> col(rows);
  if (timesteps.size() == 1) {
    col.setConstant(static_cast<S>(timesteps[0]));
  } else if (static_cast<Eigen::Index>(timesteps.size()) == rows) {
    for (Eigen::Index i = 0; i < rows; ++i) col(i) = static_cast<S>(timesteps[static_cast<std::size_t>(i)]);
  } else {
    throw DataError("timesteps must have one entry or one per row");
  }
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (!(col(i) >= S(1))) throw DataError("timestep must be >= 1");
  }
  return col;
}

template <typename S>
void affine(const ActMatrix<S>& x, const LinearLayer<S>& l, ActMatrix<S>& out) {
  out.noalias() = x * l.weight.transpose();
  out.rowwise() += l.bias.transpose();
}

// Groups are contiguous column ranges; statistics accumulate whole columns.
template <typename S>
void group_norm_forward(const ActMatrix<S>& x, const NormLayer<S>& layer, std::size_t groups, ActMatrix<S>& xhat,
                        ActMatrix<S>& inv_std, ActMatrix<S>& out) {
  const Eigen::Index rows = x.rows();
  const auto g_count = static_cast<Eigen::Index>(groups);
  const Eigen::Index gs = x.cols() / g_count;
  const S inv_gs = S(1) / static_cast<S>(gs);
  xhat.resize(rows, x.cols());
  inv_std.resize(rows, g_count);
  out.resize(rows, x.cols());
  ColVector<S> acc(rows);
  for (Eigen::Index g = 0; g < g_count; ++g) {
    const Eigen::Index c0 = g * gs;
    acc = x.col(c0);
    for (Eigen::Index c = 1; c < gs; ++c) acc += x.col(c0 + c);
    acc *= inv_gs;
    for (Eigen::Index c = 0; c < gs; ++c) xhat.col(c0 + c) = x.col(c0 + c) - acc;
    acc = xhat.col(c0).array().square();
    for (Eigen::Index c = 1; c < gs; ++c) acc.array() += xhat.col(c0 + c).array().square();
    inv_std.col(g) = (acc.array() * inv_gs + static_cast<S>(kGroupNormEps)).sqrt().inverse();
    for (Eigen::Index c = 0; c < gs; ++c) {
      xhat.col(c0 + c).array() *= inv_std.col(g).array();
      out.col(c0 + c) = (xhat.col(c0 + c) * layer.scale(c0 + c)).array() + layer.shift(c0 + c);
    }
  }
}

template <typename S>
ActMatrix<S> group_norm_backward(const ActMatrix<S>& dy, const ActMatrix<S>& xhat, const ActMatrix<S>& inv_std,
                                 const NormLayer<S>& layer, NormLayer<S>& grad) {
  grad.scale += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  grad.shift += dy.colwise().sum().transpose();
  const Eigen::Index rows = dy.rows();
  const Eigen::Index g_count = inv_std.cols();
  const Eigen::Index gs = dy.cols() / g_count;
  const S inv_gs = S(1) / static_cast<S>(gs);
  ActMatrix<S> dx(rows, dy.cols());
  ColVector<S> mean_dh(rows), mean_dh_xh(rows);
  for (Eigen::Index g = 0; g < g_count; ++g) {
    const Eigen::Index c0 = g * gs;
    for (Eigen::Index c = 0; c < gs; ++c) dx.col(c0 + c) = dy.col(c0 + c) * layer.scale(c0 + c);
    mean_dh = dx.col(c0);
    mean_dh_xh = dx.col(c0).cwiseProduct(xhat.col(c0));
    for (Eigen::Index c = 1; c < gs; ++c) {
      mean_dh += dx.col(c0 + c);
      mean_dh_xh += dx.col(c0 + c).cwiseProduct(xhat.col(c0 + c));
    }
    mean_dh *= inv_gs;
    mean_dh_xh *= inv_gs;
    for (Eigen::Index c = 0; c < gs; ++c) {
      dx.col(c0 + c) = ((dx.col(c0 + c) - mean_dh).array() - xhat.col(c0 + c).array() * mean_dh_xh.array()) *
                       inv_std.col(g).array();
    }
  }
  return dx;
}

// act = x * sigmoid(x); the sigmoid is kept for the backward pass.
template <typename S>
void silu(const ActMatrix<S>& x, ActMatrix<S>& sig, ActMatrix<S>& act) {
  sig = (S(1) + (-x.array()).exp()).inverse();
  act = x.cwiseProduct(sig);
}

template <typename S>
void silu_backward(ActMatrix<S>& dy, const ActMatrix<S>& pre, const ActMatrix<S>& sig) {
  dy.array() *= sig.array() * (S(1) + pre.array() * (S(1) - sig.array()));
}

// out = residual + linear2(silu(norm2(linear1(silu(norm1(u))) + t)))
template <typename S>
ActMatrix<S> block_forward(const ResidualBlock<S>& b, const ActMatrix<S>& u, const ActMatrix<S>& residual,
                           const ColVector<S>& t, std::size_t groups, typename ForwardCache<S>::Block* c) {
  typename ForwardCache<S>::Block local;
  auto& k = c ? *c : local;
  group_norm_forward(u, b.norm1, groups, k.xhat1, k.inv_std1, k.pre1);
  silu(k.pre1, k.sig1, k.act1);
  ActMatrix<S> z;
  affine(k.act1, b.linear1, z);
  z.colwise() += t;
  group_norm_forward(z, b.norm2, groups, k.xhat2, k.inv_std2, k.pre2);
  silu(k.pre2, k.sig2, k.act2);
  ActMatrix<S> out;
  affine(k.act2, b.linear2, out);
  out += residual;
  return out;
}

// Returns the gradient with respect to the norm1 input `u` (residual path excluded).
template <typename S>
ActMatrix<S> block_backward(const ResidualBlock<S>& b, const typename ForwardCache<S>::Block& k,
                            const ActMatrix<S>& dout, ResidualBlock<S>& g) {
  g.linear2.weight.noalias() += dout.transpose() * k.act2;
  g.linear2.bias += dout.colwise().sum().transpose();
  ActMatrix<S> d = dout * b.linear2.weight;
  silu_backward(d, k.pre2, k.sig2);
  ActMatrix<S> dz = group_norm_backward(d, k.xhat2, k.inv_std2, b.norm2, g.norm2);
  g.linear1.weight.noalias() += dz.transpose() * k.act1;
  g.linear1.bias += dz.colwise().sum().transpose();
  d = dz * b.linear1.weight;
  silu_backward(d, k.pre1, k.sig1);
  return group_norm_backward(d, k.xhat1, k.inv_std1, b.norm1, g.norm1);
}

}  // namespace

template <typename S>
BasicDenoiserParams<S> BasicDenoiserParams<S>::zeros(const DenoiserConfig& raw) {
  const auto cfg = raw.resolved();
  cfg.validate();
  BasicDenoiserParams p;
  p.input_proj = zero_linear<S>(cfg.hidden_dim, cfg.input_dim);
  for (std::size_t i = 0; i < cfg.n_input_blocks; ++i) p.input_blocks.push_back(zero_block<S>(cfg.hidden_dim, cfg.hidden_dim));
  for (std::size_t i = 0; i < cfg.n_output_blocks; ++i) {
    p.output_blocks.push_back(zero_block<S>(cfg.hidden_dim, output_block_width(cfg)));
  }
  p.output_proj = zero_linear<S>(cfg.input_dim, cfg.hidden_dim);
  return p;
}

template <typename S>
void BasicDenoiserParams<S>::for_each_tensor(
    const std::function<void(const std::string&, std::span<S>, std::vector<std::size_t>)>& fn) {
  visit_all(*this, fn);
}

template <typename S>
void BasicDenoiserParams<S>::for_each_tensor(
    const std::function<void(const std::string&, std::span<const S>, std::vector<std::size_t>)>& fn) const {
  auto adapter = [&](const std::string& role, std::span<S> v, std::vector<std::size_t> shape) {
    fn(role, std::span<const S>(v.data(), v.size()), std::move(shape));
  };
  visit_all(const_cast<BasicDenoiserParams&>(*this), adapter);
}

template <typename S>
std::size_t BasicDenoiserParams<S>::num_values() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, std::span<const S> v, std::vector<std::size_t>) { n += v.size(); });
  return n;
}

template <typename S>
template <typename T>
BasicDenoiserParams<T> BasicDenoiserParams<S>::cast() const {
  auto cast_linear = [](const LinearLayer<S>& l) {
    return LinearLayer<T>{l.weight.template cast<T>(), l.bias.template cast<T>()};
  };
  auto cast_norm = [](const NormLayer<S>& n) { return NormLayer<T>{n.scale.template cast<T>(), n.shift.template cast<T>()}; };
  auto cast_block = [&](const ResidualBlock<S>& b) {
    return ResidualBlock<T>{cast_norm(b.norm1), cast_linear(b.linear1), cast_norm(b.norm2), cast_linear(b.linear2)};
  };
  BasicDenoiserParams<T> out;
  out.input_proj = cast_linear(input_proj);
  for (const auto& b : input_blocks) out.input_blocks.push_back(cast_block(b));
  for (const auto& b : output_blocks) out.output_blocks.push_back(cast_block(b));
  out.output_proj = cast_linear(output_proj);
  return out;
}

DenoiserParams init_params(const DenoiserConfig& raw, Rng& rng) {
  const auto cfg = raw.resolved();
  auto p = DenoiserParams::zeros(cfg);
  auto fill_uniform = [&](LinearLayer<float>& l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.cols()));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) {
      l.weight.data()[i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
    }
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  };
  fill_uniform(p.input_proj);
  auto init_block = [&](ResidualBlock<float>& b) {
    b.norm1.scale.setOnes();
    b.norm2.scale.setOnes();
    fill_uniform(b.linear1);
    // linear2 stays zero: every block starts as the identity
  };
  for (auto& b : p.input_blocks) init_block(b);
  for (auto& b : p.output_blocks) init_block(b);
  return p;
}

template <typename S>
RowMatrix<S> group_norm(const RowMatrix<S>& x, const NormLayer<S>& layer, std::size_t groups) {
  if (groups == 0 || x.cols() % static_cast<Eigen::Index>(groups) != 0) throw DataError("groups must divide width");
  ActMatrix<S> xhat, inv, out;
  group_norm_forward(ActMatrix<S>(x), layer, groups, xhat, inv, out);
  return out;
}

template <typename S>
RowMatrix<S> denoiser_forward(const DenoiserConfig& raw, const BasicDenoiserParams<S>& p, const RowMatrix<S>& x,
                              std::span<const int> timesteps, ForwardCache<S>* cache) {
  const auto cfg = raw.resolved();
  if (static_cast<std::size_t>(x.cols()) != cfg.input_dim) {
    throw DataError("denoiser expects " + std::to_string(cfg.input_dim) + " channels, got " +
                    std::to_string(x.cols()));
  }
  if (p.input_blocks.size() != cfg.n_input_blocks || p.output_blocks.size() != cfg.n_output_blocks) {
    throw DataError("parameter block count does not match config");
  }
  const ColVector<S> t = time_column<S>(timesteps, x.rows());
  const std::size_t groups = cfg.groupnorm_groups;
  const auto hidden = static_cast<Eigen::Index>(cfg.hidden_dim);
  const ActMatrix<S> xa = x;
  if (cache) {
    cache->input = xa;
    cache->input_blocks.assign(cfg.n_input_blocks, {});
    cache->output_blocks.assign(cfg.n_output_blocks, {});
  }

  ActMatrix<S> h;
  affine(xa, p.input_proj, h);
  std::vector<ActMatrix<S>> skips;
  skips.reserve(cfg.n_input_blocks);
  for (std::size_t j = 0; j < cfg.n_input_blocks; ++j) {
    h = block_forward(p.input_blocks[j], h, h, t, groups, cache ? &cache->input_blocks[j] : nullptr);
    skips.push_back(h);
  }
  for (std::size_t i = 0; i < cfg.n_output_blocks; ++i) {
    const ActMatrix<S>& skip = skips[cfg.n_input_blocks - 1 - i];
    auto* c = cache ? &cache->output_blocks[i] : nullptr;
    if (cfg.skip == SkipMode::Concat) {
      ActMatrix<S> u(h.rows(), 2 * hidden);
      u.leftCols(hidden) = h;
      u.rightCols(hidden) = skip;
      h = block_forward(p.output_blocks[i], u, h, t, groups, c);
    } else {
      const ActMatrix<S> u = h + skip;
      h = block_forward(p.output_blocks[i], u, u, t, groups, c);
    }
  }
  if (cache) cache->final_hidden = h;
  ActMatrix<S> out;
  affine(h, p.output_proj, out);
  return out;  // converted back to row-major
}

template <typename S>
RowMatrix<S> denoiser_backward(const DenoiserConfig& raw, const BasicDenoiserParams<S>& p, const ForwardCache<S>& cache,
                               const RowMatrix<S>& upstream, BasicDenoiserParams<S>& g) {
  const auto cfg = raw.resolved();
  if (upstream.rows() != cache.input.rows() || static_cast<std::size_t>(upstream.cols()) != cfg.input_dim) {
    throw DataError("upstream gradient shape does not match forward batch");
  }
  const auto hidden = static_cast<Eigen::Index>(cfg.hidden_dim);
  const ActMatrix<S> up = upstream;
  g.output_proj.weight.noalias() += up.transpose() * cache.final_hidden;
  g.output_proj.bias += up.colwise().sum().transpose();
  ActMatrix<S> dh = up * p.output_proj.weight;

  std::vector<ActMatrix<S>> dskip(cfg.n_input_blocks, ActMatrix<S>::Zero(upstream.rows(), hidden));
  for (std::size_t i = cfg.n_output_blocks; i-- > 0;) {
    const ActMatrix<S> du = block_backward(p.output_blocks[i], cache.output_blocks[i], dh, g.output_blocks[i]);
    auto& ds = dskip[cfg.n_input_blocks - 1 - i];
    if (cfg.skip == SkipMode::Concat) {
      dh += du.leftCols(hidden);
      ds += du.rightCols(hidden);
    } else {
      dh += du;
      ds += dh;
    }
  }
  for (std::size_t j = cfg.n_input_blocks; j-- > 0;) {
    dh += dskip[j];
    dh += block_backward(p.input_blocks[j], cache.input_blocks[j], dh, g.input_blocks[j]);
  }
  g.input_proj.weight.noalias() += dh.transpose() * cache.input;
  g.input_proj.bias += dh.colwise().sum().transpose();
  return dh * p.input_proj.weight;
}

MlpDenoiser::MlpDenoiser(DenoiserConfig cfg, DenoiserParams params)
    : cfg_(cfg.resolved()), params_(std::move(params)) {
  cfg_.validate();
  const auto ref = DenoiserParams::zeros(cfg_);
  std::vector<std::vector<std::size_t>> expected, actual;
  ref.for_each_tensor([&](const std::string&, std::span<const float>, std::vector<std::size_t> s) { expected.push_back(s); });
  params_.for_each_tensor([&](const std::string&, std::span<const float>, std::vector<std::size_t> s) { actual.push_back(s); });
  if (expected != actual) throw DataError("denoiser parameter shapes do not match config");
}

FloatMatrix MlpDenoiser::predict(const FloatMatrix& x_t, std::span<const int> timesteps) const {
  // Row chunks keep the activations cache-resident; results do not depend on the chunking.
  constexpr Eigen::Index kChunk = 256;
  const Eigen::Index rows = x_t.rows();
  if (rows <= kChunk) return denoiser_forward<float>(cfg_, params_, x_t, timesteps, nullptr);
  if (timesteps.size() != 1 && static_cast<Eigen::Index>(timesteps.size()) != rows) {
    throw DataError("timesteps must have one entry or one per row");
  }
  FloatMatrix out(rows, x_t.cols());
  for (Eigen::Index off = 0; off < rows; off += kChunk) {
    const Eigen::Index n = std::min(kChunk, rows - off);
    const auto ts = timesteps.size() == 1 ? timesteps
                                          : timesteps.subspan(static_cast<std::size_t>(off), static_cast<std::size_t>(n));
    out.middleRows(off, n) = denoiser_forward<float>(cfg_, params_, x_t.middleRows(off, n), ts, nullptr);
  }
  return out;
}

std::vector<float> MlpDenoiser::forward(std::span<const float> x_t, int t) const {
  FloatMatrix x = Eigen::Map<const FloatMatrix>(x_t.data(), 1, static_cast<Eigen::Index>(x_t.size()));
  const int ts[1] = {t};
  const FloatMatrix y = predict(x, ts);
  return {y.data(), y.data() + y.size()};
}

bool MlpDenoiser::is_zero_output() const {
  return params_.output_proj.weight.isZero(0.0f) && params_.output_proj.bias.isZero(0.0f);
}

template struct BasicDenoiserParams<float>;
template struct BasicDenoiserParams<double>;
template BasicDenoiserParams<double> BasicDenoiserParams<float>::cast<double>() const;
template BasicDenoiserParams<float> BasicDenoiserParams<double>::cast<float>() const;
template BasicDenoiserParams<float> BasicDenoiserParams<float>::cast<float>() const;

template RowMatrix<float> group_norm(const RowMatrix<float>&, const NormLayer<float>&, std::size_t);
template RowMatrix<double> group_norm(const RowMatrix<double>&, const NormLayer<double>&, std::size_t);
template RowMatrix<float> denoiser_forward(const DenoiserConfig&, const BasicDenoiserParams<float>&,
                                          const RowMatrix<float>&, std::span<const int>, ForwardCache<float>*);
template RowMatrix<double> denoiser_forward(const DenoiserConfig&, const BasicDenoiserParams<double>&,
                                           const RowMatrix<double>&, std::span<const int>, ForwardCache<double>*);
template RowMatrix<float> denoiser_backward(const DenoiserConfig&, const BasicDenoiserParams<float>&,
                                           const ForwardCache<float>&, const RowMatrix<float>&,
                                           BasicDenoiserParams<float>&);
template RowMatrix<double> denoiser_backward(const DenoiserConfig&, const BasicDenoiserParams<double>&,
                                            const ForwardCache<double>&, const RowMatrix<double>&,
                                            BasicDenoiserParams<double>&);

}  // namespace dood
