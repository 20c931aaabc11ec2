#pragma once

#include <span>
#include <vector>

#include "ropelab/tensor.h"

namespace ropelab {

// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
// x[m x n] + row[1 x n] on every row.
Tensor add_row(const Tensor& x, const Tensor& row);
// x[m x n] * row[1 x n] on every row.
Tensor mul_row(const Tensor& x, const Tensor& row);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Row-wise softmax of a rank-2 tensor. -inf entries are masked out; a row
// with no finite entry throws DegenerateRowError.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// tanh approximation of GELU.
Tensor gelu(const Tensor& x);

// x / rms(x) * gain, per row.
Tensor rms_norm(const Tensor& x, const Tensor& gain, Real eps = 1e-6);

// Rows of table[V x d] picked by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Mean negative log-likelihood of targets under row-wise softmax(logits).
// Targets < 0 are ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
// Columns [begin, end) of a rank-2 tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
// First `count` rows of a rank-2 tensor.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);

}  // namespace ropelab
