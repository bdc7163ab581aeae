#include "spi/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "spi/error.hpp"
#include "spi/hash.hpp"

namespace spi {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'I', 'C', 'K', 'P', 'T', '1'};

template <class T>
void put(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

void put_string(std::string& out, std::string_view s) {
  put<std::uint64_t>(out, s.size());
  out.append(s);
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    require(n <= b_.size() - pos_, ErrorCode::io, "checkpoint is truncated");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string Checkpoint::serialize() const {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put_string(out, config.dump());
  put_string(out, history.dump());
  put<std::int64_t>(out, epoch);
  put<std::uint64_t>(out, arrays.size());
  for (const auto& [name, values] : arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put<std::uint64_t>(out, values.size());
    for (double v : values) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  put<std::uint64_t>(out, fnv1a64(out.data(), out.size()));
  return out;
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  require(bytes.size() >= sizeof kMagic + 4 + 8 && std::memcmp(bytes.data(), kMagic, sizeof kMagic) == 0,
          ErrorCode::io, "not a checkpoint file (bad magic)");
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes.substr(body));
  require(tail.get<std::uint64_t>() == fnv1a64(bytes.data(), body), ErrorCode::io, "checkpoint checksum mismatch");

  Reader r(bytes.substr(0, body));
  r.take(sizeof kMagic);
  const auto version = r.get<std::uint32_t>();
  require(version == kVersion, ErrorCode::io, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  try {
    c.config = nlohmann::json::parse(r.take(r.get<std::uint64_t>()));
    c.history = nlohmann::json::parse(r.take(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::io, std::string("corrupt checkpoint metadata: ") + e.what());
  }
  c.epoch = r.get<std::int64_t>();
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name(r.take(r.get<std::uint32_t>()));
    const auto count = r.get<std::uint64_t>();
    require(count <= (body - r.pos()) / 8, ErrorCode::io, "checkpoint array length exceeds file size");
    std::vector<double> values(count);
    for (auto& v : values) v = std::bit_cast<double>(r.get<std::uint64_t>());
    c.arrays.emplace(std::move(name), std::move(values));
  }
  require(r.pos() == body, ErrorCode::io, "trailing bytes in checkpoint");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::io, "failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

const std::vector<double>& Checkpoint::array(const std::string& name) const {
  auto it = arrays.find(name);
  require(it != arrays.end(), ErrorCode::io, "checkpoint lacks array '" + name + "'");
  return it->second;
}

}  // namespace spi
