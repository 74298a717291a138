// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace fgmoe {

namespace {

constexpr const char* kMagic = "FGMOE-CKPT";

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
void store_le(T value, std::uint8_t* out) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  std::memcpy(out, raw, sizeof(T));
}

template <typename T>
T load_le(const std::uint8_t* in) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, in, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

class Reader {
 public:
  Reader(std::string buf, std::string origin) : buf_(std::move(buf)), origin_(std::move(origin)) {}

  std::string line() {
    const auto nl = buf_.find('\n', pos_);
    if (nl == std::string::npos) fail("unexpected end of header");
    std::string out = buf_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return out;
  }

  std::string keyed(const std::string& key) {
    const std::string l = line();
    if (l.rfind(key + " ", 0) != 0) fail("expected '" + key + "', got '" + l + "'");
    return l.substr(key.size() + 1);
  }

  std::uint64_t keyed_uint(const std::string& key) {
    const std::string v = keyed(key);
    try {
      std::size_t used = 0;
      const auto out = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      fail("bad value for '" + key + "': " + v);
    }
  }

  std::string blob(const std::string& key) {
    const std::uint64_t n = keyed_uint(key);
    if (buf_.size() - pos_ < n + 1) fail("truncated '" + key + "' block");
    std::string out = buf_.substr(pos_, n);
    pos_ += n;
    if (buf_[pos_] != '\n') fail("missing terminator after '" + key + "' block");
    ++pos_;
    return out;
  }

  std::size_t pos() const { return pos_; }
  const std::string& buf() const { return buf_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw CheckpointError(origin_ + ": " + what);
  }

 private:
  std::string buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

Shape parse_shape(const std::string& text, const Reader& r) {
  Shape s;
  if (text == "-") return s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      s.push_back(std::stoull(item));
    } catch (const std::exception&) {
      r.fail("bad shape '" + text + "'");
    }
  }
  return s;
}

std::string format_shape(const Shape& s) {
  if (s.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

template <typename T>
CheckpointTensor CheckpointTensor::pack(std::string name, const Shape& shape, std::span<const T> values) {
  CheckpointTensor t{std::move(name), dtype_name<T>(), shape, std::vector<std::uint8_t>(values.size() * sizeof(T))};
  for (std::size_t i = 0; i < values.size(); ++i) store_le<T>(values[i], t.bytes.data() + i * sizeof(T));
  return t;
}

template <typename T>
std::vector<T> CheckpointTensor::unpack() const {
  if (dtype != dtype_name<T>()) {
    throw CheckpointError("tensor " + name + " has dtype " + dtype + ", expected " + dtype_name<T>());
  }
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = load_le<T>(bytes.data() + i * sizeof(T));
  return out;
}

template CheckpointTensor CheckpointTensor::pack<float>(std::string, const Shape&, std::span<const float>);
template CheckpointTensor CheckpointTensor::pack<double>(std::string, const Shape&, std::span<const double>);
template std::vector<float> CheckpointTensor::unpack<float>() const;
template std::vector<double> CheckpointTensor::unpack<double>() const;

const CheckpointTensor& Checkpoint::find(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
  if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
  return *it;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string header;
  header += std::string(kMagic) + "\n";
  header += "version " + std::to_string(Checkpoint::kVersion) + "\n";
  header += "dtype " + ckpt.dtype + "\n";
  header += "epoch " + std::to_string(ckpt.epoch) + "\n";
  header += "steps " + std::to_string(ckpt.steps) + "\n";
  header += "rng " + std::to_string(ckpt.rng_state.size()) + "\n" + ckpt.rng_state + "\n";
  header += "config " + std::to_string(ckpt.config_text.size()) + "\n" + ckpt.config_text + "\n";
  header += "metrics " + std::to_string(ckpt.metrics_csv.size()) + "\n" + ckpt.metrics_csv + "\n";
  header += "tensors " + std::to_string(ckpt.tensors.size()) + "\n";
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.name.find_first_of(" \n") != std::string::npos) {
      throw CheckpointError("tensor name '" + t.name + "' contains whitespace");
    }
    header += t.name + " " + t.dtype + " " + format_shape(t.shape) + " " + std::to_string(offset) + " " +
              std::to_string(t.bytes.size()) + "\n";
    offset += t.bytes.size();
  }
  header += "data\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& t : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
  }
  if (!out) throw CheckpointError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()), path.string());
  if (r.line() != kMagic) r.fail("not a checkpoint (bad magic)");
  const auto version = r.keyed_uint("version");
  if (version != Checkpoint::kVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.dtype = r.keyed("dtype");
  if (ckpt.dtype != "f32" && ckpt.dtype != "f64") r.fail("unknown dtype " + ckpt.dtype);
  ckpt.epoch = r.keyed_uint("epoch");
  ckpt.steps = r.keyed_uint("steps");
  ckpt.rng_state = r.blob("rng");
  ckpt.config_text = r.blob("config");
  ckpt.metrics_csv = r.blob("metrics");
  const auto count = r.keyed_uint("tensors");
  struct Entry {
    CheckpointTensor tensor;
    std::size_t offset, size;
  };
  std::vector<Entry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::stringstream ss(r.line());
    std::string name, dtype, shape;
    std::size_t offset = 0, size = 0;
    if (!(ss >> name >> dtype >> shape >> offset >> size)) r.fail("malformed tensor entry");
    Entry e{CheckpointTensor{name, dtype, parse_shape(shape, r), {}}, offset, size};
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) r.fail("tensor " + name + ": unknown dtype " + dtype);
    if (numel(e.tensor.shape) * width != size) r.fail("tensor " + name + ": byte count does not match shape");
    entries.push_back(std::move(e));
  }
  if (r.line() != "data") r.fail("missing data marker");
  const std::size_t base = r.pos();
  for (auto& e : entries) {
    if (base + e.offset + e.size > r.buf().size()) r.fail("tensor " + e.tensor.name + ": truncated payload");
    const auto* p = reinterpret_cast<const std::uint8_t*>(r.buf().data()) + base + e.offset;
    e.tensor.bytes.assign(p, p + e.size);
    ckpt.tensors.push_back(std::move(e.tensor));
  }
  return ckpt;
}

}  // namespace fgmoe
