// Row-compressed sparse matrix for dose influence data.
//
// Layout matches the planprob/1 container: 64-bit row offsets, 32-bit
// column indices, 64-bit values, row-major. A column-compressed mirror is
// built on demand so transpose products parallelize over output entries
// without scatter races.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "spotopt/parallel.hpp"

namespace spotopt {

struct CsrMatrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::uint64_t> row_offsets;  // size rows + 1
  std::vector<std::uint32_t> col_idx;      // size nnz
  std::vector<double> values;              // size nnz

  std::int64_t nnz() const { return static_cast<std::int64_t>(values.size()); }

  void validate() const;
};

// Transpose into a new CSR (counting sort by column; deterministic).
CsrMatrix transpose(const CsrMatrix& a);

// y = A x. Row-parallel; each row accumulates in index order.
void csr_matvec(const CsrMatrix& a, const double* x, double* y, Exec e);
inline void csr_matvec(const CsrMatrix& a, const double* x, double* y) {
  csr_matvec(a, x, y, default_exec());
}

// y += A x. Same parallel shape as csr_matvec.
void csr_matvec_add(const CsrMatrix& a, const double* x, double* y, Exec e);

// Builder that accepts unsorted triplets and emits canonical CSR
// (row-major, columns ascending, duplicates summed in column order).
class CooBuilder {
 public:
  CooBuilder(std::int64_t rows, std::int64_t cols) : rows_(rows), cols_(cols) {}
  void add(std::int64_t r, std::int64_t c, double v) {
    if (r < 0 || r >= rows_ || c < 0 || c >= cols_)
      throw std::out_of_range("CooBuilder: index out of range");
    entries_.push_back({r, c, v});
  }
  CsrMatrix build() const;

 private:
  struct Entry {
    std::int64_t r, c;
    double v;
  };
  std::int64_t rows_, cols_;
  std::vector<Entry> entries_;
};

}  // namespace spotopt
