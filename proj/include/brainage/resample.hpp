#pragma once

#include <span>
#include <vector>

namespace brainage::detail {

// Two-tap linear interpolation weights mapping an axis of length `in` onto
// length `out` with half-voxel-centred sample positions (edges clamped).
struct LinearTap {
  int i0;
  int i1;
  float w0;
  float w1;
};

std::vector<LinearTap> linear_taps(int in, int out);

// Resample one axis of a dense [outer][axis][inner] block.
void resample_axis(std::span<const float> src, std::span<float> dst, int outer, int in_len,
                   int out_len, int inner, const std::vector<LinearTap>& taps);

// Adjoint of resample_axis: scatters dst gradients back onto src.
void resample_axis_adjoint(std::span<const float> grad_dst, std::span<float> grad_src, int outer,
                           int in_len, int out_len, int inner, const std::vector<LinearTap>& taps);

}  // namespace brainage::detail
