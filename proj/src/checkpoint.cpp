#include "gpn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gpn::checkpoint {

namespace {

constexpr char kMagic[4] = {'G', 'P', 'N', 'F'};
constexpr std::uint8_t kTensorKind = 1;
constexpr std::uint8_t kTextKind = 2;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t pos() const { return pos_; }

  [[noreturn]] void fail(const std::string& why) const {
    throw CheckpointError(source_ + ": " + why + " (at byte " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      fail(std::string("truncated while reading ") + what);
    }
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

void Archive::put_tensor(const std::string& name, const Shape& shape, std::span<const float> values) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("checkpoint entry " + name + ": shape " + shape_str(shape) +
                                " does not match " + std::to_string(values.size()) + " values");
  }
  if (!has(name)) order_.push_back(name);
  auto& e = entries_[name];
  e.shape = shape;
  e.values.assign(values.begin(), values.end());
  e.text.clear();
  e.is_text = false;
}

void Archive::put_text(const std::string& name, std::string text) {
  if (!has(name)) order_.push_back(name);
  auto& e = entries_[name];
  e.shape.clear();
  e.values.clear();
  e.text = std::move(text);
  e.is_text = true;
}

const Archive::Entry& Archive::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("checkpoint has no entry '" + name + "'");
  return it->second;
}

const std::vector<float>& Archive::tensor(const std::string& name, const Shape& shape) const {
  const auto& e = get(name);
  if (e.is_text) throw CheckpointError("checkpoint entry '" + name + "' is text, expected a tensor");
  if (e.shape != shape) {
    throw CheckpointError("checkpoint entry '" + name + "' has shape " + shape_str(e.shape) +
                          ", model expects " + shape_str(shape));
  }
  return e.values;
}

const std::string& Archive::text(const std::string& name) const {
  const auto& e = get(name);
  if (!e.is_text) throw CheckpointError("checkpoint entry '" + name + "' is a tensor, expected text");
  return e.text;
}

std::vector<std::string> Archive::names() const { return order_; }

std::string Archive::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kVersion.size()));
  out += kVersion;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(order_.size()));
  for (const auto& name : order_) {
    const auto& e = entries_.at(name);
    out.push_back(static_cast<char>(e.is_text ? kTextKind : kTensorKind));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    if (e.is_text) {
      put_le<std::uint64_t>(out, e.text.size());
      out += e.text;
    } else {
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) put_le<std::uint64_t>(out, d);
      for (float v : e.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
  }
  put_le<std::uint64_t>(out, fnv1a(out));
  return out;
}

Archive Archive::deserialize(std::string_view bytes, const std::string& source) {
  Reader in(bytes, source);
  if (in.take(sizeof(kMagic), "magic") != std::string_view(kMagic, sizeof(kMagic))) {
    in.fail("not a gpnf checkpoint (bad magic)");
  }
  const auto version_len = in.le<std::uint32_t>("version length");
  if (version_len > 64) in.fail("implausible version tag length " + std::to_string(version_len));
  const auto version = in.take(version_len, "version tag");
  if (version != kVersion) {
    in.fail("unsupported checkpoint version '" + std::string(version) + "', expected '" +
            std::string(kVersion) + "'");
  }
  if (bytes.size() < 8) in.fail("missing checksum");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  Reader tail(bytes.substr(bytes.size() - 8), source);
  const auto stored = tail.le<std::uint64_t>("checksum");
  if (stored != fnv1a(body)) {
    throw CheckpointError(source + ": checksum mismatch, file is corrupt or truncated");
  }

  Archive archive;
  const auto count = in.le<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = in.le<std::uint8_t>("entry kind");
    const auto name_len = in.le<std::uint32_t>("entry name length");
    const std::string name(in.take(name_len, "entry name"));
    if (archive.has(name)) in.fail("duplicate entry '" + name + "'");
    if (kind == kTextKind) {
      const auto len = in.le<std::uint64_t>("text length");
      archive.put_text(name, std::string(in.take(len, "text payload")));
    } else if (kind == kTensorKind) {
      const auto rank = in.le<std::uint32_t>("tensor rank");
      if (rank > 8) in.fail("entry '" + name + "' has implausible rank " + std::to_string(rank));
      Shape shape(rank);
      for (auto& d : shape) d = in.le<std::uint64_t>("tensor dims");
      const std::size_t n = shape_numel(shape);
      if (n > (bytes.size() - in.pos()) / 4) in.fail("entry '" + name + "' payload exceeds file size");
      std::vector<float> values(n);
      for (auto& v : values) v = std::bit_cast<float>(in.le<std::uint32_t>("tensor payload"));
      archive.put_tensor(name, shape, values);
    } else {
      in.fail("entry '" + name + "' has unknown kind " + std::to_string(kind));
    }
  }
  if (in.pos() != body.size()) in.fail("trailing bytes after last entry");
  return archive;
}

void Archive::save(const std::filesystem::path& path) const {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    const auto bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return deserialize(buffer.str(), path.string());
}

}  // namespace gpn::checkpoint
