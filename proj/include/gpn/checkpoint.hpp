#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gpn/adam.hpp"
#include "gpn/layers.hpp"

namespace gpn::checkpoint {

inline constexpr std::string_view kVersion = "gpnf-v1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Self-describing container of named float32 arrays and text blobs.
//
// Layout (all integers little-endian):
//   "GPNF" | u32 len | version | u32 count | entries | u64 FNV-1a of all prior bytes
//   entry: u8 kind | u32 len | name | kind 1: u32 rank, u64 dims..., f32 values...
//                                     kind 2: u64 len, bytes
class Archive {
 public:
  struct Entry {
    Shape shape;
    std::vector<float> values;
    std::string text;
    bool is_text = false;
  };

  void put_tensor(const std::string& name, const Shape& shape, std::span<const float> values);
  void put_text(const std::string& name, std::string text);

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& get(const std::string& name) const;
  // Values of a tensor entry whose shape must equal `shape`.
  const std::vector<float>& tensor(const std::string& name, const Shape& shape) const;
  const std::string& text(const std::string& name) const;
  std::vector<std::string> names() const;

  std::string serialize() const;
  static Archive deserialize(std::string_view bytes, const std::string& source = "checkpoint");

  // Writes through a temporary file and renames, so readers never see a
  // half-written checkpoint.
  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
};

template <typename T>
void put_params(Archive& archive, const NamedParams<T>& params) {
  for (const auto& [name, t] : params) {
    std::vector<float> v(t.values().begin(), t.values().end());
    archive.put_tensor(name, t.shape(), v);
  }
}

template <typename T>
void get_params(const Archive& archive, const NamedParams<T>& params) {
  for (const auto& [name, t] : params) {
    const auto& v = archive.tensor(name, t.shape());
    auto dst = Tensor<T>(t).values();
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
  }
}

// Moments and step count of an optimizer under "adam.<label>.*".
template <typename T>
void put_adam(Archive& archive, const std::string& label, const Adam<T>& opt) {
  archive.put_text("adam." + label + ".steps", std::to_string(opt.steps()));
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const Shape shape = opt.params()[i].shape();
    std::vector<float> m1(opt.first_moments()[i].begin(), opt.first_moments()[i].end());
    std::vector<float> m2(opt.second_moments()[i].begin(), opt.second_moments()[i].end());
    archive.put_tensor("adam." + label + ".m1." + std::to_string(i), shape, m1);
    archive.put_tensor("adam." + label + ".m2." + std::to_string(i), shape, m2);
  }
}

template <typename T>
void get_adam(const Archive& archive, const std::string& label, Adam<T>& opt) {
  const auto& steps = archive.text("adam." + label + ".steps");
  try {
    opt.set_steps(std::stoull(steps));
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint: bad step count '" + steps + "' for optimizer " + label);
  }
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const Shape shape = opt.params()[i].shape();
    const auto& m1 = archive.tensor("adam." + label + ".m1." + std::to_string(i), shape);
    const auto& m2 = archive.tensor("adam." + label + ".m2." + std::to_string(i), shape);
    opt.first_moments()[i].assign(m1.begin(), m1.end());
    opt.second_moments()[i].assign(m2.begin(), m2.end());
  }
}

}  // namespace gpn::checkpoint
