#pragma once

#include <cstdint>
#include <limits>
#include <string>

#include "blackfed/bytes.hpp"
#include "blackfed/tensor.hpp"

namespace blackfed {

// Tensor encoding shared by the protocol and on-disk caches:
// rank u8, extents u32 each, then little-endian elements (f32 for real
// tensors, u16 for class-index tensors).

namespace detail {

inline void write_shape(ByteWriter& w, const Shape& shape) {
  if (shape.size() > std::numeric_limits<std::uint8_t>::max()) {
    throw Error(ErrorCode::protocol, "tensor rank too large to encode");
  }
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t e : shape) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw Error(ErrorCode::protocol, "tensor extent too large");
    w.u32(static_cast<std::uint32_t>(e));
  }
}

inline Shape read_shape(ByteReader& r, ErrorCode code) {
  const std::size_t rank = r.u8();
  Shape shape(rank);
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) throw Error(code, "tensor extent of zero");
  }
  return shape;
}

}  // namespace detail

inline void write_tensor(ByteWriter& w, const Tensor<float>& t) {
  if (!t.all_finite()) throw Error(ErrorCode::non_finite, "refusing to encode a non-finite tensor");
  detail::write_shape(w, t.shape());
  w.raw(t.data(), t.size() * sizeof(float));
}

inline void write_tensor(ByteWriter& w, const Labels& t) {
  detail::write_shape(w, t.shape());
  w.raw(t.data(), t.size() * sizeof(std::uint16_t));
}

inline Tensor<float> read_real_tensor(ByteReader& r, ErrorCode code) {
  Shape shape = detail::read_shape(r, code);
  const std::size_t n = shape_size(shape);
  if (r.remaining() / sizeof(float) < n) throw Error(code, "unexpected end of frame");
  std::vector<float> data(n);
  r.raw(data.data(), n * sizeof(float));
  Tensor<float> t(std::move(shape), std::move(data));
  if (!t.all_finite()) throw Error(ErrorCode::non_finite, "decoded tensor holds non-finite values");
  return t;
}

inline Labels read_label_tensor(ByteReader& r, ErrorCode code) {
  Shape shape = detail::read_shape(r, code);
  const std::size_t n = shape_size(shape);
  if (r.remaining() / sizeof(std::uint16_t) < n) throw Error(code, "unexpected end of frame");
  std::vector<std::uint16_t> data(n);
  r.raw(data.data(), n * sizeof(std::uint16_t));
  return Labels(std::move(shape), std::move(data));
}

}  // namespace blackfed
