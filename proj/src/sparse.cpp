#include "spotopt/sparse.hpp"

#include <algorithm>
#include <cmath>

namespace spotopt {

void CsrMatrix::validate() const {
  if (rows < 0 || cols < 0) throw std::invalid_argument("CsrMatrix: negative dims");
  if (row_offsets.size() != static_cast<std::size_t>(rows) + 1)
    throw std::invalid_argument("CsrMatrix: row_offsets size mismatch");
  if (row_offsets.front() != 0 || row_offsets.back() != values.size())
    throw std::invalid_argument("CsrMatrix: bad offset bounds");
  if (col_idx.size() != values.size())
    throw std::invalid_argument("CsrMatrix: col/value size mismatch");
  for (std::int64_t r = 0; r < rows; ++r) {
    if (row_offsets[r] > row_offsets[r + 1])
      throw std::invalid_argument("CsrMatrix: offsets not nondecreasing");
  }
  for (std::uint32_t c : col_idx) {
    if (c >= cols) throw std::invalid_argument("CsrMatrix: column index out of range");
  }
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument("CsrMatrix: entries must be finite and >= 0");
  }
}

CsrMatrix transpose(const CsrMatrix& a) {
  CsrMatrix t;
  t.rows = a.cols;
  t.cols = a.rows;
  t.row_offsets.assign(static_cast<std::size_t>(a.cols) + 1, 0);
  for (std::uint32_t c : a.col_idx) t.row_offsets[c + 1]++;
  for (std::int64_t c = 0; c < a.cols; ++c) t.row_offsets[c + 1] += t.row_offsets[c];
  t.col_idx.resize(a.values.size());
  t.values.resize(a.values.size());
  std::vector<std::uint64_t> cursor(t.row_offsets.begin(), t.row_offsets.end() - 1);
  for (std::int64_t r = 0; r < a.rows; ++r) {
    for (std::uint64_t k = a.row_offsets[r]; k < a.row_offsets[r + 1]; ++k) {
      const std::uint32_t c = a.col_idx[k];
      const std::uint64_t dst = cursor[c]++;
      t.col_idx[dst] = static_cast<std::uint32_t>(r);
      t.values[dst] = a.values[k];
    }
  }
  return t;
}

void csr_matvec(const CsrMatrix& a, const double* x, double* y, Exec e) {
  parallel_for(
      a.rows,
      [&](std::int64_t r) {
        double s = 0.0;
        for (std::uint64_t k = a.row_offsets[r]; k < a.row_offsets[r + 1]; ++k)
          s += a.values[k] * x[a.col_idx[k]];
        y[r] = s;
      },
      e);
}

void csr_matvec_add(const CsrMatrix& a, const double* x, double* y, Exec e) {
  parallel_for(
      a.rows,
      [&](std::int64_t r) {
        double s = 0.0;
        for (std::uint64_t k = a.row_offsets[r]; k < a.row_offsets[r + 1]; ++k)
          s += a.values[k] * x[a.col_idx[k]];
        y[r] += s;
      },
      e);
}

CsrMatrix CooBuilder::build() const {
  std::vector<std::size_t> order(entries_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (entries_[i].r != entries_[j].r) return entries_[i].r < entries_[j].r;
    return entries_[i].c < entries_[j].c;
  });
  CsrMatrix m;
  m.rows = rows_;
  m.cols = cols_;
  m.row_offsets.assign(static_cast<std::size_t>(rows_) + 1, 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const Entry& cur = entries_[order[oi]];
    if (oi > 0) {
      const Entry& prev = entries_[order[oi - 1]];
      if (prev.r == cur.r && prev.c == cur.c) {
        m.values.back() += cur.v;
        continue;
      }
    }
    m.col_idx.push_back(static_cast<std::uint32_t>(cur.c));
    m.values.push_back(cur.v);
    m.row_offsets[cur.r + 1] = m.values.size();
  }
  for (std::int64_t r = 0; r < rows_; ++r)
    if (m.row_offsets[r + 1] < m.row_offsets[r]) m.row_offsets[r + 1] = m.row_offsets[r];
  return m;
}

}  // namespace spotopt
