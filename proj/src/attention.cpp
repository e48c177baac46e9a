#include "ptrack/attention.hpp"

#include "ptrack/errors.hpp"

namespace ptrack {

template <typename T>
AttentionParams<T> make_attention_params(std::size_t channels, std::size_t heads, bool use_norm,
                                         Rng& rng) {
  if (heads == 0 || channels % heads != 0)
    throw ParameterError("attention: channels " + std::to_string(channels) +
                         " not divisible by heads " + std::to_string(heads));
  AttentionParams<T> p;
  p.channels = channels;
  p.heads = heads;
  p.use_norm = use_norm;
  const std::size_t d = channels / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    p.w_q.push_back(xavier_uniform<T>(channels, d, rng));
    p.w_k.push_back(xavier_uniform<T>(channels, d, rng));
    p.w_v.push_back(xavier_uniform<T>(channels, d, rng));
  }
  p.w_o = xavier_uniform<T>(channels, channels, rng);
  p.gamma = Tensor<T>::full({1, channels}, T(1));
  p.gamma.set_requires_grad(true);
  p.beta = Tensor<T>::zeros({1, channels});
  p.beta.set_requires_grad(true);
  return p;
}

template <typename T>
PosEmbedParams<T> make_pos_embed_params(std::size_t channels, Rng& rng) {
  PosEmbedParams<T> p;
  p.w1 = xavier_uniform<T>(3, channels, rng);
  p.b1 = Tensor<T>::zeros({1, channels});
  p.b1.set_requires_grad(true);
  p.w2 = xavier_uniform<T>(channels, channels, rng);
  p.b2 = Tensor<T>::zeros({1, channels});
  p.b2.set_requires_grad(true);
  return p;
}

template <typename T>
void collect_params(const std::string& prefix, AttentionParams<T>& p, ParamList<T>& out) {
  for (std::size_t h = 0; h < p.heads; ++h) {
    const std::string tag = std::to_string(h);
    out.emplace_back(prefix + ".wq" + tag, p.w_q[h]);
    out.emplace_back(prefix + ".wk" + tag, p.w_k[h]);
    out.emplace_back(prefix + ".wv" + tag, p.w_v[h]);
  }
  out.emplace_back(prefix + ".wo", p.w_o);
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

template <typename T>
void collect_params(const std::string& prefix, PosEmbedParams<T>& p, ParamList<T>& out) {
  out.emplace_back(prefix + ".w1", p.w1);
  out.emplace_back(prefix + ".b1", p.b1);
  out.emplace_back(prefix + ".w2", p.w2);
  out.emplace_back(prefix + ".b2", p.b2);
}

template <typename T>
Tensor<T> pos_embed(const Tensor<T>& coords, const PosEmbedParams<T>& p) {
  if (coords.rank() != 2 || coords.cols() != 3)
    throw DimensionError("pos_embed: expected [N x 3] coordinates, got " + shape_str(coords.shape()));
  auto hidden = relu(add_rowvec(matmul(coords, p.w1), p.b1));
  return add_rowvec(matmul(hidden, p.w2), p.b2);
}

template <typename T>
Tensor<T> linear_attention(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                           const AttentionParams<T>& p) {
  const std::size_t c = p.channels;
  if (query.cols() != c || key.cols() != c || value.cols() != c)
    throw DimensionError("linear_attention: feature width mismatch with parameters (C=" +
                         std::to_string(c) + ")");
  if (key.rows() != value.rows())
    throw DimensionError("linear_attention: key rows " + std::to_string(key.rows()) +
                         " != value rows " + std::to_string(value.rows()));
  if (key.rows() == 0) throw ParameterError("linear_attention: empty key set");

  Tensor<T> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto qh = elu1(matmul(query, p.w_q[h]));
    auto kh = elu1(matmul(key, p.w_k[h]));
    auto vh = matmul(value, p.w_v[h]);
    auto summary = matmul(transpose(kh), vh);       // [d x d]
    auto key_mass = transpose(col_sums(kh));        // [d x 1]
    auto numer = matmul(qh, summary);               // [Nq x d]
    auto denom = matmul(qh, key_mass);              // [Nq x 1]
    auto out_h = div_cols(numer, denom);
    heads = h == 0 ? out_h : concat_cols(heads, out_h);
  }
  return matmul(heads, p.w_o);
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& tokens, const Tensor<T>& pos,
                         const AttentionParams<T>& p) {
  if (tokens.shape() != pos.shape())
    throw DimensionError("self_attention: tokens " + shape_str(tokens.shape()) +
                         " and pos " + shape_str(pos.shape()) + " disagree");
  auto mixed = add(tokens, pos);
  auto attended = linear_attention(mixed, mixed, mixed, p);
  auto out = add(tokens, attended);
  return p.use_norm ? layer_norm(out, p.gamma, p.beta) : out;
}

template <typename T>
Tensor<T> cross_attention(const Tensor<T>& query_tokens, const Tensor<T>& kv_tokens,
                          const Tensor<T>& value_pos, const AttentionParams<T>& p) {
  if (kv_tokens.shape() != value_pos.shape())
    throw DimensionError("cross_attention: kv " + shape_str(kv_tokens.shape()) + " and pos " +
                         shape_str(value_pos.shape()) + " disagree");
  auto attended =
      linear_attention(query_tokens, kv_tokens, add(kv_tokens, value_pos), p);
  auto out = add(query_tokens, attended);
  return p.use_norm ? layer_norm(out, p.gamma, p.beta) : out;
}

#define PTRACK_INSTANTIATE_ATTENTION(T)                                                        \
  template AttentionParams<T> make_attention_params(std::size_t, std::size_t, bool, Rng&);     \
  template PosEmbedParams<T> make_pos_embed_params(std::size_t, Rng&);                         \
  template void collect_params(const std::string&, AttentionParams<T>&, ParamList<T>&);        \
  template void collect_params(const std::string&, PosEmbedParams<T>&, ParamList<T>&);         \
  template Tensor<T> pos_embed(const Tensor<T>&, const PosEmbedParams<T>&);                    \
  template Tensor<T> linear_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                      const AttentionParams<T>&);                              \
  template Tensor<T> self_attention(const Tensor<T>&, const Tensor<T>&,                        \
                                    const AttentionParams<T>&);                                \
  template Tensor<T> cross_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                     const AttentionParams<T>&);

PTRACK_INSTANTIATE_ATTENTION(float)
PTRACK_INSTANTIATE_ATTENTION(double)

#undef PTRACK_INSTANTIATE_ATTENTION

}  // namespace ptrack
