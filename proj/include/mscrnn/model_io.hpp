#pragma once

// Model file ("MSCM"):
//
//   magic "MSCM" | u16 version | u64 file length | str descriptor (JSON) | float payload |
//   u8 has_quantized | [quantized payload] | u32 CRC32
//
// Float tensors are stored as f64 so a save/load round trip is bit exact.
// Quantized tensors are (u32 rows, u32 cols, i32 scale_exp, i16 payload).
// Everything is little-endian.

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "mscrnn/binary_io.hpp"
#include "mscrnn/quant.hpp"

namespace mscrnn {

struct ModelGeometry {
  std::size_t window_len = 256;
  std::size_t omega = 48;
  std::size_t stride = 16;
  double sample_rate_hz = 256.0;

  bool operator==(const ModelGeometry&) const = default;
};

struct SavedModel {
  MSCModel model;
  ModelGeometry geometry;
  std::optional<quant::QuantizedModel> quantized;

  bool operator==(const SavedModel&) const = default;
};

inline constexpr std::string_view kModelMagic = "MSCM";
inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

inline void put_matrix(io::ByteWriter& w, const Matrix& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (double v : m.values()) w.f64(v);
}

inline Matrix get_matrix(io::ByteReader& r) {
  const std::size_t rows = r.u32(), cols = r.u32();
  r.need(rows * cols * 8);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = r.f64();
  return m;
}

inline void put_vector(io::ByteWriter& w, const Vector& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  for (double x : v) w.f64(x);
}

inline Vector get_vector(io::ByteReader& r) {
  const std::size_t n = r.u32();
  r.need(n * 8);
  Vector v(n);
  for (auto& x : v) x = r.f64();
  return v;
}

inline void put_weight(io::ByteWriter& w, const Weight& wt) {
  if (const auto* lr = std::get_if<LowRankMatrix>(&wt)) {
    w.u8(1);
    put_matrix(w, lr->left);
    put_matrix(w, lr->right);
  } else {
    w.u8(0);
    put_matrix(w, std::get<Matrix>(wt));
  }
}

inline Weight get_weight(io::ByteReader& r) {
  const auto kind = r.u8();
  if (kind == 0) return get_matrix(r);
  if (kind != 1) throw FormatError(FormatError::Kind::malformed, "model: bad weight kind");
  Matrix l = get_matrix(r);
  Matrix rt = get_matrix(r);
  if (l.cols() != rt.rows()) throw FormatError(FormatError::Kind::malformed, "model: low-rank factor mismatch");
  return LowRankMatrix(std::move(l), std::move(rt));
}

inline void put_cell(io::ByteWriter& w, const FastGRNNParams& p) {
  put_weight(w, p.W);
  put_weight(w, p.U);
  put_vector(w, p.b_h);
  put_vector(w, p.b_z);
  w.f64(p.zeta_raw);
  w.f64(p.nu_raw);
  w.u8(static_cast<std::uint8_t>(p.gate));
  w.u8(static_cast<std::uint8_t>(p.update));
}

inline Activation get_activation(io::ByteReader& r) {
  const auto a = r.u8();
  if (a > 3) throw FormatError(FormatError::Kind::malformed, "model: bad activation tag");
  return static_cast<Activation>(a);
}

inline FastGRNNParams get_cell(io::ByteReader& r) {
  FastGRNNParams p;
  p.W = get_weight(r);
  p.U = get_weight(r);
  p.b_h = get_vector(r);
  p.b_z = get_vector(r);
  p.zeta_raw = r.f64();
  p.nu_raw = r.f64();
  p.gate = get_activation(r);
  p.update = get_activation(r);
  return p;
}

inline void put_readout(io::ByteWriter& w, const Readout& ro) {
  put_matrix(w, ro.w);
  put_vector(w, ro.b);
}

inline Readout get_readout(io::ByteReader& r) {
  Readout ro;
  ro.w = get_matrix(r);
  ro.b = get_vector(r);
  return ro;
}

inline void put_q(io::ByteWriter& w, const quant::Q15Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.rows));
  w.u32(static_cast<std::uint32_t>(t.cols));
  w.i32(t.scale_exp);
  for (auto v : t.data) w.i16(v);
}

inline quant::Q15Tensor get_q(io::ByteReader& r) {
  quant::Q15Tensor t;
  t.rows = r.u32();
  t.cols = r.u32();
  t.scale_exp = r.i32();
  r.need(t.rows * t.cols * 2);
  t.data.resize(t.rows * t.cols);
  for (auto& v : t.data) v = r.i16();
  return t;
}

inline void put_qweight(io::ByteWriter& w, const quant::QuantWeight& qw) {
  if (const auto* lr = std::get_if<quant::QuantLowRank>(&qw)) {
    w.u8(1);
    put_q(w, lr->left);
    put_q(w, lr->right);
    w.i32(lr->inter_exp);
  } else {
    w.u8(0);
    put_q(w, std::get<quant::Q15Tensor>(qw));
  }
}

inline quant::QuantWeight get_qweight(io::ByteReader& r) {
  const auto kind = r.u8();
  if (kind == 0) return get_q(r);
  if (kind != 1) throw FormatError(FormatError::Kind::malformed, "model: bad quantized weight kind");
  quant::QuantLowRank lr;
  lr.left = get_q(r);
  lr.right = get_q(r);
  lr.inter_exp = r.i32();
  return lr;
}

inline void put_qcell(io::ByteWriter& w, const quant::QuantCell& c) {
  put_qweight(w, c.W);
  put_qweight(w, c.U);
  put_q(w, c.b_h);
  put_q(w, c.b_z);
  w.i16(c.zeta);
  w.i16(c.nu);
  w.i32(c.input_exp);
  w.i32(c.state_exp);
  w.u32(static_cast<std::uint32_t>(c.input_dim));
  w.u32(static_cast<std::uint32_t>(c.hidden_dim));
}

inline quant::QuantCell get_qcell(io::ByteReader& r) {
  quant::QuantCell c;
  c.W = get_qweight(r);
  c.U = get_qweight(r);
  c.b_h = get_q(r);
  c.b_z = get_q(r);
  c.zeta = r.i16();
  c.nu = r.i16();
  c.input_exp = r.i32();
  c.state_exp = r.i32();
  c.input_dim = r.u32();
  c.hidden_dim = r.u32();
  return c;
}

inline nlohmann::json descriptor(const SavedModel& s) {
  const auto& m = s.model;
  auto rank = [](const Weight& w) -> nlohmann::json {
    if (const auto* lr = std::get_if<LowRankMatrix>(&w)) return lr->rank();
    return nullptr;
  };
  return {
      {"features", m.lower.cell.input_dim()},
      {"lower_hidden", m.lower.cell.hidden_dim()},
      {"upper_hidden", m.upper_cell.hidden_dim()},
      {"lower_rank_w", rank(m.lower.cell.W)},
      {"lower_rank_u", rank(m.lower.cell.U)},
      {"upper_rank_w", rank(m.upper_cell.W)},
      {"upper_rank_u", rank(m.upper_cell.U)},
      {"gate", activation_name(m.lower.cell.gate)},
      {"update", activation_name(m.lower.cell.update)},
      {"window_len", s.geometry.window_len},
      {"omega", s.geometry.omega},
      {"stride", s.geometry.stride},
      {"sample_rate_hz", s.geometry.sample_rate_hz},
      {"k", m.lower.k},
      {"p_hat", m.lower.p_hat},
      {"class_names", m.class_names},
      {"quantized", s.quantized.has_value()},
  };
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_model(const SavedModel& s) {
  validate(s.model);
  io::ByteWriter w;
  w.raw(kModelMagic);
  w.u16(kModelVersion);
  const std::size_t length_at = w.size();
  w.u64(0);
  w.str(detail::descriptor(s).dump());
  w.u32(static_cast<std::uint32_t>(s.geometry.window_len));
  w.u32(static_cast<std::uint32_t>(s.geometry.omega));
  w.u32(static_cast<std::uint32_t>(s.geometry.stride));
  w.f64(s.geometry.sample_rate_hz);
  w.u32(static_cast<std::uint32_t>(s.model.lower.k));
  w.f64(s.model.lower.p_hat);
  w.u32(static_cast<std::uint32_t>(s.model.class_names.size()));
  for (const auto& n : s.model.class_names) w.str(n);
  detail::put_cell(w, s.model.lower.cell);
  detail::put_readout(w, s.model.lower.readout);
  detail::put_cell(w, s.model.upper_cell);
  detail::put_readout(w, s.model.upper_readout);
  w.u8(s.quantized ? 1 : 0);
  if (s.quantized) {
    const auto& q = *s.quantized;
    detail::put_qcell(w, q.lower);
    detail::put_q(w, q.lower_readout.w);
    detail::put_q(w, q.lower_readout.b);
    detail::put_qcell(w, q.upper);
    detail::put_q(w, q.upper_readout.w);
    detail::put_q(w, q.upper_readout.b);
    w.u32(static_cast<std::uint32_t>(q.k));
    w.i16(q.p_hat_q15);
    w.i32(q.logit_threshold);
    w.i32(q.input_exp);
  }
  w.put_u64_at(length_at, w.size() + 4);
  w.seal();
  return w.bytes();
}

inline SavedModel decode_model(std::span<const std::uint8_t> bytes) {
  auto r = io::ByteReader::open_framed(bytes, kModelMagic, "model");
  const auto version = r.u16();
  if (version != kModelVersion)
    throw FormatError(FormatError::Kind::version_mismatch, "model: unsupported version " + std::to_string(version));
  // The recorded length tells truncation apart from corruption.
  const std::uint64_t length = r.u64();
  if (bytes.size() < length) throw FormatError(FormatError::Kind::truncated, "model: file truncated");
  if (bytes.size() > length) throw FormatError(FormatError::Kind::malformed, "model: trailing bytes");
  io::ByteReader::verify_crc(bytes, "model");
  SavedModel s;
  (void)r.str();  // descriptor; the binary fields below are authoritative
  s.geometry.window_len = r.u32();
  s.geometry.omega = r.u32();
  s.geometry.stride = r.u32();
  s.geometry.sample_rate_hz = r.f64();
  s.model.lower.k = r.u32();
  s.model.lower.p_hat = r.f64();
  const std::size_t names = r.u32();
  for (std::size_t i = 0; i < names; ++i) s.model.class_names.push_back(r.str());
  s.model.lower.cell = detail::get_cell(r);
  s.model.lower.readout = detail::get_readout(r);
  s.model.upper_cell = detail::get_cell(r);
  s.model.upper_readout = detail::get_readout(r);
  if (r.u8()) {
    quant::QuantizedModel q;
    q.lower = detail::get_qcell(r);
    q.lower_readout.w = detail::get_q(r);
    q.lower_readout.b = detail::get_q(r);
    q.upper = detail::get_qcell(r);
    q.upper_readout.w = detail::get_q(r);
    q.upper_readout.b = detail::get_q(r);
    q.k = r.u32();
    q.p_hat_q15 = r.i16();
    q.logit_threshold = r.i32();
    q.input_exp = r.i32();
    s.quantized = std::move(q);
  }
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::malformed, "model: trailing bytes");
  try {
    validate(s.model);
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("model: ") + e.what());
  }
  return s;
}

inline void save_model(const SavedModel& s, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_model(s));
}

inline SavedModel load_model(const std::filesystem::path& path) { return decode_model(io::read_file(path)); }

}  // namespace mscrnn
