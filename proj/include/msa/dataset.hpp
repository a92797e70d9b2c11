#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "msa/core.hpp"

namespace msa {

// Labelled images stored as u8 pixels; pixel v decodes to v / 255.
struct Dataset {
  Shape shape{3, 16, 16};
  std::size_t num_classes = 10;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;  // n * c * h * w

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  ImageTensor image(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("dataset index " + std::to_string(i) + " out of range");
    std::vector<double> v(shape.size());
    const std::uint8_t* p = pixels.data() + i * shape.size();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<double>(p[k]) / 255.0;
    return ImageTensor(shape, std::move(v));
  }

  std::size_t label(std::size_t i) const { return labels.at(i); }

  void validate() const {
    if (shape.size() == 0) throw std::invalid_argument("dataset has an empty image shape");
    if (num_classes < 2) throw std::invalid_argument("dataset needs at least two classes");
    if (pixels.size() != labels.size() * shape.size())
      throw std::invalid_argument("dataset pixel count does not match n * c * h * w");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= num_classes)
        throw std::invalid_argument("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                                    " is >= K = " + std::to_string(num_classes));
  }

  // Contiguous index range [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size())
      throw std::out_of_range("dataset slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                              ") outside 0.." + std::to_string(size()));
    Dataset d;
    d.shape = shape;
    d.num_classes = num_classes;
    d.labels.assign(labels.begin() + begin, labels.begin() + end);
    d.pixels.assign(pixels.begin() + begin * shape.size(), pixels.begin() + end * shape.size());
    return d;
  }

  void push_back(const Tensor& img, std::size_t label) {
    if (img.shape() != shape) throw ShapeMismatch("dataset push_back: image shape " + img.shape().str());
    for (double v : img.values())
      pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    labels.push_back(static_cast<std::uint16_t>(label));
  }
};

}  // namespace msa
