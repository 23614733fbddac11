#pragma once

// PMAT matrix dump: "PMAT", u32 rows, u32 cols, rows*cols little-endian
// IEEE-754 doubles in row-major order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "perft/errors.hpp"
#include "perft/matrix.hpp"

namespace perft {

namespace pmat_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 8);
}

inline std::uint64_t get_le(std::istream& is, int nbytes) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), nbytes);
  if (!is) throw IoError("PMAT: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace pmat_detail

inline void write_pmat(std::ostream& os, const Matrix& m) {
  if (m.rows() > std::numeric_limits<std::uint32_t>::max() ||
      m.cols() > std::numeric_limits<std::uint32_t>::max()) {
    throw IoError("PMAT: matrix too large");
  }
  os.write("PMAT", 4);
  pmat_detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
  pmat_detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) pmat_detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw IoError("PMAT: write failed");
}

inline Matrix read_pmat(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || std::memcmp(magic.data(), "PMAT", 4) != 0) throw IoError("PMAT: bad magic");
  const auto rows = static_cast<std::size_t>(pmat_detail::get_le(is, 4));
  const auto cols = static_cast<std::size_t>(pmat_detail::get_le(is, 4));
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = std::bit_cast<double>(pmat_detail::get_le(is, 8));
  return m;
}

inline void save_pmat(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_pmat(os, m);
}

inline Matrix load_pmat(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_pmat(is);
}

}  // namespace perft
