#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "aq/core.hpp"
#include "aq/error.hpp"

namespace aq {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// complex values as [re, im]

inline json complex_json(cplx z) { return json::array({z.real(), z.imag()}); }

inline cplx complex_from_json(const json& j, const std::string& where) {
  if (j.is_number()) return {j.get<double>(), 0.0};
  if (j.is_array() && j.size() == 2 && j[0].is_number() && j[1].is_number()) return {j[0].get<double>(), j[1].get<double>()};
  fail(ErrorKind::ConfigError, where + ": expected a number or [re, im]");
}

inline json state_json(const StateVector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(complex_json(v[i]));
  return out;
}

inline StateVector state_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) fail(ErrorKind::ConfigError, where + ": expected a non-empty array");
  StateVector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = complex_from_json(j[i], where + "[" + std::to_string(i) + "]");
  return v;
}

inline json matrix_json(const CMatrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(complex_json(m(r, c)));
    out.push_back(row);
  }
  return out;
}

/// Row-major square matrix of numbers or [re, im] pairs.
inline CMatrix matrix_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) fail(ErrorKind::ConfigError, where + ": expected a non-empty array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  CMatrix m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    const std::string at = where + "[" + std::to_string(r) + "]";
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n) fail(ErrorKind::ConfigError, at + ": row length differs from row count");
    for (Eigen::Index c = 0; c < n; ++c) m(r, c) = complex_from_json(row[static_cast<std::size_t>(c)], at + "[" + std::to_string(c) + "]");
  }
  return m;
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorKind::IoError, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::ConfigError, p.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) fail(ErrorKind::IoError, "cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// Line-delimited JSON records.
class JsonLines {
 public:
  JsonLines() = default;
  explicit JsonLines(const std::filesystem::path& p) : out_(p) {
    if (!out_) fail(ErrorKind::IoError, "cannot write " + p.string());
  }
  void write(const json& record) {
    if (out_.is_open()) out_ << record.dump() << '\n';
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// raster frames

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image(int w, int h, std::array<std::uint8_t, 3> fill = {255, 255, 255})
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3) {
    for (std::size_t k = 0; k < rgb.size(); k += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<std::ptrdiff_t>(k));
  }

  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const auto k = (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3;
    std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(k));
  }
};

/// Binary portable pixmap (P6).
inline void write_ppm(const std::filesystem::path& p, const Image& img) {
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + p.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

inline std::array<std::uint8_t, 3> type_color(const QuantumType& t) {
  if (t.part == Part::alpha) return t.sign == Sign::plus ? std::array<std::uint8_t, 3>{220, 50, 40} : std::array<std::uint8_t, 3>{120, 30, 20};
  return t.sign == Sign::plus ? std::array<std::uint8_t, 3>{40, 100, 220} : std::array<std::uint8_t, 3>{20, 40, 110};
}

/// Slice |z| < thickness of a spherical bubble, quanta colored by part and sign.
inline Image cross_section(const std::vector<AmplitudeQuantum>& quanta, double radius, int size, double thickness) {
  Image img(size, size);
  const double half = 0.5 * (size - 1);
  for (int a = 0; a < 720; ++a) {
    const double phi = a * std::numbers::pi / 360;
    img.set(static_cast<int>(std::lround(half + half * std::cos(phi))), static_cast<int>(std::lround(half + half * std::sin(phi))),
            {90, 90, 90});
  }
  for (const auto& q : quanta) {
    if (std::abs(q.position.z) >= thickness) continue;
    const int x = static_cast<int>(std::lround(half + half * q.position.x / radius));
    const int y = static_cast<int>(std::lround(half - half * q.position.y / radius));
    img.set(x, y, type_color(q.type));
  }
  return img;
}

/// One bar per basic state, height = probability weight.
inline Image bar_chart(const std::vector<double>& weights, int width, int height) {
  Image img(width, height);
  if (weights.empty()) return img;
  const int bar = std::max(1, width / static_cast<int>(weights.size()));
  for (std::size_t j = 0; j < weights.size(); ++j) {
    const int h = static_cast<int>(std::lround(std::clamp(weights[j], 0.0, 1.0) * (height - 1)));
    for (int x = static_cast<int>(j) * bar + 1; x < static_cast<int>(j + 1) * bar - 1; ++x)
      for (int y = height - 1; y >= height - 1 - h; --y) img.set(x, y, {40, 100, 220});
  }
  return img;
}

inline std::string frame_name(std::uint64_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04llu.ppm", static_cast<unsigned long long>(k));
  return buf;
}

}  // namespace aq
