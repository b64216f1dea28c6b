#pragma once

#include <cstddef>
#include <random>
#include <utility>
#include <vector>

#include "dcrn/autodiff/graph.hpp"

namespace dcrn::ad {

// Binary elementwise ops accept a right operand that is the same shape as the
// left one, a 1 x n row, an m x 1 column, or a 1 x 1 scalar; it is broadcast.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var abs(Var a);
Var exp(Var a);
/// Throws DomainError on any non-positive entry.
Var log(Var a);
Var square(Var a);
/// Gradient passes only where lo < x < hi.
Var clamp(Var a, double lo, double hi);

/// Concatenation along the last (column) dimension.
Var concat(const std::vector<Var>& parts);
/// Columns [begin, end).
Var slice_cols(Var a, std::size_t begin, std::size_t end);
/// Stacks operands with equal column counts on top of each other.
Var concat_rows(const std::vector<Var>& parts);
/// Selected rows in the given order; indices may repeat.
Var gather_rows(Var a, const std::vector<std::size_t>& rows);

Var sum(Var a);
Var mean(Var a);
/// Per-row mean over columns: m x n -> m x 1.
Var mean_cols(Var a);
/// Per-column sum over rows: m x n -> 1 x n.
Var sum_rows(Var a);

/// Inverted dropout; identity when `training` is false or rate is zero.
Var dropout(Var a, double rate, bool training, std::mt19937_64& rng);
/// Same value, no gradient flow to `a`.
Var detach(Var a);

struct LstmState {
  Var h;
  Var c;
};

/// Single LSTM step. `wx` is in x 4H, `wh` is H x 4H, `b` is 1 x 4H with gate
/// blocks ordered (input, forget, cell, output).
LstmState lstm_cell(Var x, LstmState prev, Var wx, Var wh, Var b);

}  // namespace dcrn::ad
