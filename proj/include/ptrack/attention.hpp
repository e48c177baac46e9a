#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ptrack/rng.hpp"
#include "ptrack/tensor.hpp"

namespace ptrack {

/// Multi-head linear attention weights. Per-head projections are [C x C/h];
/// head outputs are concatenated and mixed by w_o [C x C]. gamma/beta drive
/// the post-residual normalization, skipped when use_norm is false.
template <typename T>
struct AttentionParams {
  std::size_t channels = 0;
  std::size_t heads = 1;
  bool use_norm = true;
  std::vector<Tensor<T>> w_q, w_k, w_v;
  Tensor<T> w_o;
  Tensor<T> gamma, beta;
};

/// Two-layer perceptron mapping xyz coordinates to a C-wide embedding.
template <typename T>
struct PosEmbedParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
AttentionParams<T> make_attention_params(std::size_t channels, std::size_t heads, bool use_norm,
                                         Rng& rng);

template <typename T>
PosEmbedParams<T> make_pos_embed_params(std::size_t channels, Rng& rng);

template <typename T>
void collect_params(const std::string& prefix, AttentionParams<T>& p, ParamList<T>& out);

template <typename T>
void collect_params(const std::string& prefix, PosEmbedParams<T>& p, ParamList<T>& out);

/// relu MLP over per-point coordinates: [N x 3] -> [N x C].
template <typename T>
Tensor<T> pos_embed(const Tensor<T>& coords, const PosEmbedParams<T>& p);

/// Kernelized attention, linear in N_q + N_k. Per head,
///   out_i = [phi(q_i)^T sum_j phi(k_j) v_j^T] / [phi(q_i)^T sum_j phi(k_j)]
/// with phi = elu1 applied after the head projection. The denominator is a
/// sum of strictly positive terms, so no guard is needed.
template <typename T>
Tensor<T> linear_attention(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                           const AttentionParams<T>& p);

/// Attention of a point set onto itself: q = k = v = tokens + pos, residual
/// add of tokens, then normalization when enabled.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& tokens, const Tensor<T>& pos,
                         const AttentionParams<T>& p);

/// Attention of query tokens onto a key/value set. The positional embedding
/// is added to the value rows only; residual add of the query tokens.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& query_tokens, const Tensor<T>& kv_tokens,
                          const Tensor<T>& value_pos, const AttentionParams<T>& p);

}  // namespace ptrack
