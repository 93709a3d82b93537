#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "densegrade/rng.hpp"
#include "densegrade/tensor.hpp"

namespace densegrade {

// Per-epoch random-strength geometric augmentation. Strengths are drawn
// fresh for every sample in every epoch from a stream keyed by
// (seed, epoch, sample index), so results never depend on batch composition
// or execution order.
struct AugmentationPolicy {
  double rotation_max_deg = 30.0;
  double width_shift_frac = 0.1;
  double height_shift_frac = 0.1;
  double shear_max_deg = 15.0;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  enum class Fill { Nearest, Constant } fill_mode = Fill::Nearest;
  double fill_value = 0.0;

  static AugmentationPolicy none() {
    AugmentationPolicy p;
    p.rotation_max_deg = p.width_shift_frac = p.height_shift_frac = p.shear_max_deg = 0.0;
    p.hflip_prob = p.vflip_prob = 0.0;
    return p;
  }

  bool is_zero() const {
    return rotation_max_deg == 0.0 && width_shift_frac == 0.0 && height_shift_frac == 0.0 &&
           shear_max_deg == 0.0 && hflip_prob == 0.0 && vflip_prob == 0.0;
  }

  void validate() const {
    if (rotation_max_deg < 0 || shear_max_deg < 0)
      throw std::invalid_argument("augmentation: rotation/shear ranges must be >= 0");
    if (width_shift_frac < 0 || width_shift_frac >= 1 || height_shift_frac < 0 ||
        height_shift_frac >= 1)
      throw std::invalid_argument("augmentation: shift fractions must be in [0, 1)");
    if (hflip_prob < 0 || hflip_prob > 1 || vflip_prob < 0 || vflip_prob > 1)
      throw std::invalid_argument("augmentation: flip probabilities must be in [0, 1]");
  }
};

// Forward map: p_out = A * (p_in - c) + c + t, composed flip -> rotate ->
// shear -> shift about the image center; flips kept as booleans.
struct SampledTransform {
  // affine for rotate/shear/shift: {a, b, tx, c, d, ty}
  std::array<double, 6> m = {1, 0, 0, 0, 1, 0};
  bool hflip = false;
  bool vflip = false;

  bool is_identity() const {
    return !hflip && !vflip && m == std::array<double, 6>{1, 0, 0, 0, 1, 0};
  }
};

inline SampledTransform sample_transform(const AugmentationPolicy& policy, RngStream& rng,
                                         std::size_t width, std::size_t height) {
  policy.validate();
  SampledTransform t;
  t.hflip = policy.hflip_prob > 0 && rng.bernoulli(policy.hflip_prob);
  t.vflip = policy.vflip_prob > 0 && rng.bernoulli(policy.vflip_prob);
  const double deg2rad = std::numbers::pi / 180.0;
  const double angle =
      policy.rotation_max_deg > 0
          ? rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg) * deg2rad
          : 0.0;
  const double shear =
      policy.shear_max_deg > 0
          ? rng.uniform(-policy.shear_max_deg, policy.shear_max_deg) * deg2rad
          : 0.0;
  const double tx = policy.width_shift_frac > 0
                        ? rng.uniform(-policy.width_shift_frac, policy.width_shift_frac) *
                              static_cast<double>(width)
                        : 0.0;
  const double ty = policy.height_shift_frac > 0
                        ? rng.uniform(-policy.height_shift_frac, policy.height_shift_frac) *
                              static_cast<double>(height)
                        : 0.0;

  // shear_x(s) * rot(angle); exact identity when both strengths are zero
  if (angle != 0.0 || shear != 0.0) {
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double sh = std::tan(shear);
    t.m[0] = ca + sh * sa;
    t.m[1] = -sa + sh * ca;
    t.m[3] = sa;
    t.m[4] = ca;
  }
  t.m[2] = tx;
  t.m[5] = ty;
  return t;
}

// Inverse-mapping bilinear warp of a C x H x W image. Every output pixel is
// sampled at the inverse-transformed source coordinate; out-of-range samples
// follow the policy fill mode (nearest = edge replication).
template <typename S>
TensorT<S> apply_transform(const TensorT<S>& image, const SampledTransform& t,
                           const AugmentationPolicy& policy) {
  if (image.shape().size() != 3)
    throw std::invalid_argument("apply_transform: expected C x H x W, got " +
                                shape_to_string(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H < 2 || W < 2)
    throw std::invalid_argument("apply_transform: image too small " +
                                shape_to_string(image.shape()));
  if (t.is_identity()) return image.clone_detached();

  // fold the flips into the forward matrix, then invert
  const double fx = t.hflip ? -1.0 : 1.0;
  const double fy = t.vflip ? -1.0 : 1.0;
  const double a = t.m[0] * fx, b = t.m[1] * fy;
  const double c = t.m[3] * fx, d = t.m[4] * fy;
  const double det = a * d - b * c;
  if (std::abs(det) < 1e-12)
    throw std::invalid_argument("apply_transform: degenerate (non-invertible) transform");
  const double ia = d / det, ib = -b / det;
  const double ic = -c / det, id = a / det;

  const double cx = (static_cast<double>(W) - 1.0) / 2.0;
  const double cy = (static_cast<double>(H) - 1.0) / 2.0;
  const bool nearest_fill = policy.fill_mode == AugmentationPolicy::Fill::Nearest;
  const S fill = static_cast<S>(policy.fill_value);

  auto out = TensorT<S>::zeros({C, H, W});
  const S* in = image.data();
  S* dst = out.data();
  for (std::size_t oy = 0; oy < H; ++oy) {
    const double ry = static_cast<double>(oy) - cy - t.m[5];
    for (std::size_t ox = 0; ox < W; ++ox) {
      const double rx = static_cast<double>(ox) - cx - t.m[2];
      const double sx = ia * rx + ib * ry + cx;
      const double sy = ic * rx + id * ry + cy;

      const double x0f = std::floor(sx), y0f = std::floor(sy);
      const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
      const double wx = sx - x0f, wy = sy - y0f;

      for (std::size_t ch = 0; ch < C; ++ch) {
        const S* plane = in + ch * H * W;
        auto sample = [&](long y, long x) -> double {
          if (nearest_fill) {
            y = std::clamp<long>(y, 0, static_cast<long>(H) - 1);
            x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
            return plane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
          }
          if (y < 0 || y >= static_cast<long>(H) || x < 0 || x >= static_cast<long>(W))
            return fill;
          return plane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
        };
        const double top = (1.0 - wx) * sample(y0, x0) + wx * sample(y0, x0 + 1);
        const double bot = (1.0 - wx) * sample(y0 + 1, x0) + wx * sample(y0 + 1, x0 + 1);
        dst[ch * H * W + oy * W + ox] = static_cast<S>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

// Augments each sample of an N x C x H x W batch with an independent
// transform keyed by (seed, epoch, sample_indices[i]). Labels are untouched
// by construction; batch order is preserved.
template <typename S>
TensorT<S> augment_batch(const TensorT<S>& images, const AugmentationPolicy& policy,
                         std::uint64_t seed, std::uint64_t epoch,
                         std::span<const std::uint64_t> sample_indices) {
  if (images.shape().size() != 4)
    throw std::invalid_argument("augment_batch: expected N x C x H x W, got " +
                                shape_to_string(images.shape()));
  const std::size_t N = images.dim(0);
  if (N == 0) throw std::invalid_argument("augment_batch: empty batch");
  if (sample_indices.size() != N)
    throw std::invalid_argument("augment_batch: " + std::to_string(sample_indices.size()) +
                                " sample indices for batch of " + std::to_string(N));
  if (policy.is_zero()) return images.clone_detached();

  const std::size_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const std::size_t sample_size = C * H * W;
  auto out = TensorT<S>::zeros(images.shape());
  for (std::size_t i = 0; i < N; ++i) {
    auto one = TensorT<S>::zeros({C, H, W});
    std::copy(images.data() + i * sample_size, images.data() + (i + 1) * sample_size, one.data());
    RngStream rng = keyed_stream(seed, epoch, sample_indices[i]);
    const SampledTransform t = sample_transform(policy, rng, W, H);
    auto warped = apply_transform(one, t, policy);
    std::copy(warped.data(), warped.data() + sample_size, out.data() + i * sample_size);
  }
  return out;
}

}  // namespace densegrade
