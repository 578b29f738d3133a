#include "rock/rten.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace rock::rten {

namespace {

static_assert(std::endian::native == std::endian::little, "RTEN I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view bytes, std::size_t& pos) {
  if (bytes.size() - pos < sizeof(T)) fail(ErrorKind::FormatError, "truncated RTEN header");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string encode(const Tensor& t) {
  std::string out = "RTEN";
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  out.reserve(out.size() + 4 * t.size());
  for (double v : t.values()) put<float>(out, static_cast<float>(v));
  return out;
}

Tensor decode(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "RTEN") fail(ErrorKind::FormatError, "bad RTEN magic");
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kVersion) fail(ErrorKind::FormatError, "unsupported RTEN version " + std::to_string(version));
  const auto rank = take<std::uint32_t>(bytes, pos);
  std::vector<std::size_t> shape;
  std::uint64_t count = 1;
  const std::uint64_t budget = (bytes.size() - pos) / 4;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = take<std::uint64_t>(bytes, pos);
    if (d != 0 && count > budget / d) fail(ErrorKind::FormatError, "RTEN dims overflow the payload");
    count *= d;
    shape.push_back(static_cast<std::size_t>(d));
  }
  if (bytes.size() - pos != count * 4) {
    fail(ErrorKind::FormatError, "RTEN payload holds " + std::to_string(bytes.size() - pos) + " bytes, dims need " +
                                     std::to_string(count * 4));
  }
  std::vector<double> data(count);
  for (auto& v : data) v = take<float>(bytes, pos);
  return Tensor(std::move(shape), std::move(data));
}

void write(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
  const auto bytes = encode(t);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::IoError, "write failed: " + path.string());
}

Tensor read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode(ss.str());
}

}  // namespace rock::rten
