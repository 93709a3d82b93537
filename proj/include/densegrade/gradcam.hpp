#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "densegrade/image.hpp"
#include "densegrade/model.hpp"
#include "densegrade/ops.hpp"

namespace densegrade {

// Class-activation heatmap at input resolution, normalized so the peak is 1
// (identically-zero maps are flagged instead of divided).
struct Heatmap {
  int height = 0, width = 0;
  std::vector<float> values;
  int target_class = 0;
  std::string source_layer;
  int peak_row = 0, peak_col = 0;
  bool all_zero = false;
};

// Which scalar is backpropagated to the captured layer: the raw class logit
// (canonical Grad-CAM) or the cross-entropy loss at that class.
enum class CamTarget { Logit, Loss };

template <typename S>
struct CaptureResult {
  TensorT<S> activations;  // 1 x C x h x w, on the tape
  TensorT<S> logits;       // 1 x num_classes
};

// Eval-mode forward retaining the named conv output and the graph needed to
// backpropagate into it.
template <typename S>
CaptureResult<S> capture(ModelT<S>& model, const TensorT<S>& input,
                         const std::string& layer_name) {
  TensorT<S> batched = input;
  if (input.shape().size() == 3) {
    batched = TensorT<S>::zeros({1, input.dim(0), input.dim(1), input.dim(2)});
    std::copy(input.data(), input.data() + input.size(), batched.data());
  }
  CaptureRequest<S> request;
  request.layer = layer_name;
  auto logits = model.forward(batched, /*training=*/false, &request);
  if (!request.found())
    throw std::runtime_error("capture: model has no convolutional layer named '" + layer_name +
                             "'");
  return {request.captured, logits};
}

// Channel weights are spatial means of the gradient; the map is the
// ReLU-clipped weighted activation sum. `cam_weighted_sum` is the pre-clip
// linear form.
template <typename S>
std::vector<S> cam_weighted_sum(const TensorT<S>& activations, const TensorT<S>& gradients) {
  if (activations.shape() != gradients.shape())
    throw std::invalid_argument("cam: activation shape " + shape_to_string(activations.shape()) +
                                " does not match gradient shape " +
                                shape_to_string(gradients.shape()));
  const auto& shape = activations.shape();
  if (shape.size() != 3 && !(shape.size() == 4 && shape[0] == 1))
    throw std::invalid_argument("cam: expected C x h x w activations, got " +
                                shape_to_string(shape));
  const std::size_t C = shape[shape.size() - 3];
  const std::size_t h = shape[shape.size() - 2];
  const std::size_t w = shape[shape.size() - 1];
  const std::size_t plane = h * w;
  const S* a = activations.data();
  const S* g = gradients.data();

  std::vector<S> map(plane, S(0));
  for (std::size_t c = 0; c < C; ++c) {
    double weight = 0.0;
    for (std::size_t i = 0; i < plane; ++i) weight += g[c * plane + i];
    weight /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i)
      map[i] += static_cast<S>(weight * a[c * plane + i]);
  }
  return map;
}

template <typename S>
std::vector<S> cam(const TensorT<S>& activations, const TensorT<S>& gradients) {
  auto map = cam_weighted_sum(activations, gradients);
  for (S& v : map) v = std::max(v, S(0));
  return map;
}

// Full pipeline: capture -> backprop target -> weighted sum -> bilinear
// upsample to input resolution -> max-normalize; peak is the first row-major
// argmax. `target_class` defaults to the predicted class.
template <typename S>
Heatmap explain(ModelT<S>& model, const TensorT<S>& image,
                std::optional<int> target_class = std::nullopt,
                CamTarget target = CamTarget::Logit,
                const std::string* layer_override = nullptr) {
  if (image.shape().size() != 3)
    throw std::invalid_argument("explain: expected C x H x W image, got " +
                                shape_to_string(image.shape()));
  const std::string layer = layer_override ? *layer_override : model.default_cam_layer();
  auto cap = capture(model, image, layer);

  const int num_classes = static_cast<int>(cap.logits.dim(1));
  int cls;
  if (target_class) {
    cls = *target_class;
    if (cls < 0 || cls >= num_classes)
      throw std::invalid_argument("explain: class index " + std::to_string(cls) +
                                  " out of range [0," + std::to_string(num_classes) + ")");
  } else {
    const S* z = cap.logits.data();
    cls = 0;
    for (int k = 1; k < num_classes; ++k)
      if (z[k] > z[cls]) cls = k;
  }

  TensorT<S> scalar;
  if (target == CamTarget::Logit) {
    scalar = pick(cap.logits, static_cast<std::size_t>(cls));
  } else {
    std::vector<int> label = {cls};
    scalar = softmax_cross_entropy(cap.logits, label).loss;
  }
  backward(scalar);
  auto grads = TensorT<S>::from_vector(cap.activations.shape(), cap.activations.grad());
  model.zero_grad();

  auto raw = cam(cap.activations, grads);
  const std::size_t h = cap.activations.dim(2), w = cap.activations.dim(3);
  const std::size_t out_h = image.dim(1), out_w = image.dim(2);
  auto up = resize_bilinear_plane(raw, h, w, out_h, out_w);

  Heatmap heat;
  heat.height = static_cast<int>(out_h);
  heat.width = static_cast<int>(out_w);
  heat.target_class = cls;
  heat.source_layer = layer;
  heat.values.resize(up.size());

  S max_v = S(0);
  std::size_t peak = 0;
  for (std::size_t i = 0; i < up.size(); ++i)
    if (up[i] > max_v) {
      max_v = up[i];
      peak = i;
    }
  if (max_v <= S(0)) {
    heat.all_zero = true;
    std::fill(heat.values.begin(), heat.values.end(), 0.0f);
  } else {
    for (std::size_t i = 0; i < up.size(); ++i)
      heat.values[i] = static_cast<float>(std::max(up[i], S(0)) / max_v);
  }
  heat.peak_row = static_cast<int>(peak / out_w);
  heat.peak_col = static_cast<int>(peak % out_w);
  return heat;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

enum class Colormap { Hot, Gray };

inline std::array<double, 3> colormap_rgb(Colormap map, double v) {
  v = std::clamp(v, 0.0, 1.0);
  switch (map) {
    case Colormap::Hot:  // black -> red -> yellow -> white
      return {std::clamp(3.0 * v, 0.0, 1.0), std::clamp(3.0 * v - 1.0, 0.0, 1.0),
              std::clamp(3.0 * v - 2.0, 0.0, 1.0)};
    case Colormap::Gray:
      return {v, v, v};
  }
  return {0, 0, 0};
}

inline Image render_heatmap(const Heatmap& heat, Colormap map = Colormap::Hot) {
  Image img;
  img.width = heat.width;
  img.height = heat.height;
  img.pixels.resize(static_cast<std::size_t>(heat.width) * heat.height * 3);
  for (std::size_t i = 0; i < heat.values.size(); ++i) {
    const auto rgb = colormap_rgb(map, heat.values[i]);
    for (int c = 0; c < 3; ++c)
      img.pixels[i * 3 + c] =
          static_cast<std::uint8_t>(std::clamp(std::round(rgb[c] * 255.0), 0.0, 255.0));
  }
  return img;
}

// Alpha blend of the colorized heatmap over a [0,1] C x H x W image; a zero
// heatmap therefore yields the input dimmed by (1 - alpha).
template <typename S>
Image render_overlay(const TensorT<S>& image, const Heatmap& heat, Colormap map = Colormap::Hot,
                     double alpha = 0.4) {
  if (image.shape().size() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("render_overlay: expected 3 x H x W image, got " +
                                shape_to_string(image.shape()));
  if (static_cast<int>(image.dim(1)) != heat.height ||
      static_cast<int>(image.dim(2)) != heat.width)
    throw std::invalid_argument("render_overlay: heatmap " + std::to_string(heat.height) + "x" +
                                std::to_string(heat.width) + " does not match image " +
                                shape_to_string(image.shape()));
  Image out;
  out.width = heat.width;
  out.height = heat.height;
  out.pixels.resize(static_cast<std::size_t>(heat.width) * heat.height * 3);
  const std::size_t plane = static_cast<std::size_t>(heat.width) * heat.height;
  const S* p = image.data();
  for (std::size_t i = 0; i < plane; ++i) {
    const auto rgb = colormap_rgb(map, heat.values[i]);
    for (int c = 0; c < 3; ++c) {
      const double blended = (1.0 - alpha) * static_cast<double>(p[c * plane + i]) + alpha * rgb[c];
      out.pixels[i * 3 + c] =
          static_cast<std::uint8_t>(std::clamp(std::round(blended * 255.0), 0.0, 255.0));
    }
  }
  return out;
}

}  // namespace densegrade
