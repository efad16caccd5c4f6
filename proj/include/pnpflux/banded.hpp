#pragma once

// Square banded matrix in LAPACK general-band storage and its LU factorization.

#include <lapacke.h>

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "pnpflux/error.hpp"

namespace pnpflux {

class BandedMatrix {
 public:
  BandedMatrix(std::size_t n, std::size_t lower, std::size_t upper)
      : n_(n), kl_(lower), ku_(upper), ldab_(2 * lower + upper + 1), data_(ldab_ * n, 0.0) {}

  std::size_t size() const { return n_; }
  std::size_t lower() const { return kl_; }
  std::size_t upper() const { return ku_; }

  bool in_band(std::size_t i, std::size_t j) const {
    return i < n_ && j < n_ && i <= j + kl_ && j <= i + ku_;
  }

  double& at(std::size_t i, std::size_t j) {
    if (!in_band(i, j)) throw std::out_of_range("BandedMatrix: entry outside the band");
    return data_[kl_ + ku_ + i - j + j * ldab_];
  }
  double at(std::size_t i, std::size_t j) const {
    if (!in_band(i, j)) return 0.0;
    return data_[kl_ + ku_ + i - j + j * ldab_];
  }

  void add(std::size_t i, std::size_t j, double v) { at(i, j) += v; }

  void set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  std::vector<double> multiply(std::span<const double> x) const {
    std::vector<double> y(n_, 0.0);
    for (std::size_t j = 0; j < n_; ++j) {
      const std::size_t i0 = j > ku_ ? j - ku_ : 0;
      const std::size_t i1 = std::min(n_ - 1, j + kl_);
      for (std::size_t i = i0; i <= i1; ++i) y[i] += at(i, j) * x[j];
    }
    return y;
  }

  /// Solves A x = b by banded LU with partial pivoting. The matrix is left untouched.
  std::vector<double> solve(std::span<const double> rhs) const {
    if (rhs.size() != n_) throw validation_error("BandedMatrix::solve: size mismatch");
    std::vector<double> ab = data_;
    std::vector<double> x(rhs.begin(), rhs.end());
    std::vector<lapack_int> pivots(n_);
    const lapack_int info = LAPACKE_dgbsv(LAPACK_COL_MAJOR, static_cast<lapack_int>(n_),
                                          static_cast<lapack_int>(kl_), static_cast<lapack_int>(ku_), 1,
                                          ab.data(), static_cast<lapack_int>(ldab_), pivots.data(), x.data(),
                                          static_cast<lapack_int>(n_));
    if (info != 0) throw domain_error("BandedMatrix::solve: singular matrix (dgbsv info " + std::to_string(info) + ")");
    return x;
  }

 private:
  friend class BandedLU;
  std::size_t n_, kl_, ku_, ldab_;
  std::vector<double> data_;
};

/// dgbtrf factorization kept for repeated solves.
class BandedLU {
 public:
  explicit BandedLU(const BandedMatrix& a) : n_(a.n_), kl_(a.kl_), ku_(a.ku_), ldab_(a.ldab_), ab_(a.data_), pivots_(n_) {
    const lapack_int info =
        LAPACKE_dgbtrf(LAPACK_COL_MAJOR, static_cast<lapack_int>(n_), static_cast<lapack_int>(n_),
                       static_cast<lapack_int>(kl_), static_cast<lapack_int>(ku_), ab_.data(),
                       static_cast<lapack_int>(ldab_), pivots_.data());
    if (info != 0) throw domain_error("BandedLU: singular matrix (dgbtrf info " + std::to_string(info) + ")");
  }

  std::vector<double> solve(std::span<const double> rhs) const {
    if (rhs.size() != n_) throw validation_error("BandedLU::solve: size mismatch");
    std::vector<double> x(rhs.begin(), rhs.end());
    const lapack_int info = LAPACKE_dgbtrs(LAPACK_COL_MAJOR, 'N', static_cast<lapack_int>(n_),
                                           static_cast<lapack_int>(kl_), static_cast<lapack_int>(ku_), 1, ab_.data(),
                                           static_cast<lapack_int>(ldab_), pivots_.data(), x.data(),
                                           static_cast<lapack_int>(n_));
    if (info != 0) throw domain_error("BandedLU::solve: dgbtrs info " + std::to_string(info));
    return x;
  }

 private:
  std::size_t n_, kl_, ku_, ldab_;
  std::vector<double> ab_;
  std::vector<lapack_int> pivots_;
};

}  // namespace pnpflux
