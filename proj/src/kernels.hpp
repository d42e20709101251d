#pragma once

#include <cstddef>
#include <span>

namespace modfuse::detail {

inline constexpr std::size_t lane = 16;

inline std::size_t round_up_lane(std::size_t n)
{
    return (n + lane - 1) / lane * lane;
}

// out[r][i] += sum_k wt[k * ldw + r] * src[k][i] for i in [0, len).
// len must be a multiple of `lane` and every src row readable up to len.
void shifted_gemm(std::span<double* const> out, const double* wt, std::size_t ldw,
                  std::span<const double* const> src, std::size_t len);

// out[r * ldo + k] += sum_i a[r][i] * b[k][i] for i in [0, len).
void row_dots(std::span<const double* const> a, std::span<const double* const> b, std::size_t len, double* out,
              std::size_t ldo);

}  // namespace modfuse::detail
