#include "megl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace megl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'M', 'E', 'G', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

uint64_t fnv1a(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

uint8_t dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat: return 0;
    case torch::kDouble: return 1;
    case torch::kLong: return 2;
    case torch::kByte: return 3;
    case torch::kBool: return 4;
    default: fail(ErrorKind::kDomainError, "unsupported checkpoint dtype");
  }
}

torch::ScalarType dtype_from_tag(uint8_t tag) {
  switch (tag) {
    case 0: return torch::kFloat;
    case 1: return torch::kDouble;
    case 2: return torch::kLong;
    case 3: return torch::kByte;
    case 4: return torch::kBool;
    default: fail(ErrorKind::kCorruptCheckpoint, "unknown dtype tag");
  }
}

class Writer {
 public:
  template <typename T>
  void put(T value) {
    buf_.append(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void bytes(const void* data, size_t n) { buf_.append(static_cast<const char*>(data), n); }
  void str32(const std::string& s) {
    put<uint32_t>(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void str64(const std::string& s) {
    put<uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string buf) : buf_(std::move(buf)) {}
  template <typename T>
  T get() {
    T value;
    need(sizeof(T));
    std::memcpy(&value, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string take(size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const char* raw(size_t n) {
    need(n);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > buf_.size()) fail(ErrorKind::kCorruptCheckpoint, "truncated checkpoint");
  }
  std::string buf_;
  size_t pos_ = 0;
};

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::vector<std::pair<std::string, torch::Tensor>> Checkpoint::with_prefix(const std::string& prefix) const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& entry : arrays) {
    if (entry.first.rfind(prefix, 0) == 0) out.push_back(entry);
  }
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.put<uint32_t>(kVersion);
  const auto config_text = serialize_config(checkpoint.config);
  w.put<uint64_t>(fnv1a(config_text));
  w.str64(config_text);
  w.put<uint64_t>(checkpoint.arrays.size() + checkpoint.texts.size());
  for (const auto& [name, tensor] : checkpoint.arrays) {
    w.str32(name);
    w.put<uint8_t>(0);
    const auto t = tensor.detach().contiguous();
    w.put<uint8_t>(dtype_tag(t.scalar_type()));
    w.put<uint32_t>(static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes()) w.put<int64_t>(d);
    w.bytes(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size());
  }
  for (const auto& [name, text] : checkpoint.texts) {
    w.str32(name);
    w.put<uint8_t>(1);
    w.str64(text);
  }
  std::string out = w.buffer();
  const uint64_t trailer = fnv1a(out);
  out.append(reinterpret_cast<const char*>(&trailer), sizeof(trailer));

  std::ofstream file(path, std::ios::binary);
  if (!file) fail(ErrorKind::kMissingFile, "cannot write checkpoint '" + path.string() + "'");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) fail(ErrorKind::kMissingFile, "cannot open checkpoint '" + path.string() + "'");
  std::stringstream ss;
  ss << file.rdbuf();
  std::string all = ss.str();
  if (all.size() < sizeof(kMagic) + sizeof(uint64_t)) fail(ErrorKind::kCorruptCheckpoint, "file too short");

  uint64_t trailer;
  std::memcpy(&trailer, all.data() + all.size() - sizeof(trailer), sizeof(trailer));
  all.resize(all.size() - sizeof(trailer));
  if (fnv1a(all) != trailer) fail(ErrorKind::kCorruptCheckpoint, "checksum mismatch");

  Reader r(std::move(all));
  if (std::memcmp(r.raw(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::kCorruptCheckpoint, "bad magic");
  }
  if (r.get<uint32_t>() != kVersion) fail(ErrorKind::kCorruptCheckpoint, "unsupported version");
  const auto hash = r.get<uint64_t>();
  const auto config_text = r.take(r.get<uint64_t>());
  if (fnv1a(config_text) != hash) fail(ErrorKind::kCorruptCheckpoint, "config hash mismatch");

  Checkpoint ck;
  ck.config = parse_config(config_text);
  const auto count = r.get<uint64_t>();
  for (uint64_t i = 0; i < count; ++i) {
    auto name = r.take(r.get<uint32_t>());
    const auto kind = r.get<uint8_t>();
    if (kind == 0) {
      const auto dtype = dtype_from_tag(r.get<uint8_t>());
      const auto ndim = r.get<uint32_t>();
      std::vector<int64_t> dims(ndim);
      for (auto& d : dims) d = r.get<int64_t>();
      auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
      const size_t n = static_cast<size_t>(t.numel()) * t.element_size();
      std::memcpy(t.data_ptr(), r.raw(n), n);
      ck.arrays.emplace_back(std::move(name), std::move(t));
    } else if (kind == 1) {
      ck.texts.emplace(std::move(name), r.take(r.get<uint64_t>()));
    } else {
      fail(ErrorKind::kCorruptCheckpoint, "unknown entry kind");
    }
  }
  return ck;
}

void export_module(torch::nn::Module& module, const std::string& prefix, Checkpoint& checkpoint) {
  for (const auto& item : module.named_parameters()) {
    checkpoint.arrays.emplace_back(prefix + item.key(), item.value().detach().clone());
  }
  for (const auto& item : module.named_buffers()) {
    checkpoint.arrays.emplace_back(prefix + item.key(), item.value().detach().clone());
  }
}

void import_module(torch::nn::Module& module, const std::string& prefix, const Checkpoint& checkpoint) {
  torch::NoGradGuard no_grad;
  const auto copy = [&](const std::string& name, torch::Tensor& target) {
    const auto* src = checkpoint.find(prefix + name);
    if (!src) fail(ErrorKind::kCorruptCheckpoint, "checkpoint lacks '" + prefix + name + "'");
    if (src->sizes() != target.sizes()) {
      fail(ErrorKind::kShapeMismatch, "shape mismatch for '" + prefix + name + "'");
    }
    target.copy_(*src);
  };
  for (auto& item : module.named_parameters()) copy(item.key(), item.value());
  for (auto& item : module.named_buffers()) copy(item.key(), item.value());
}

}  // namespace megl
