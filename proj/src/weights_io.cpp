#include "watchped/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace watchped::ad {
namespace {

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

constexpr char kMagic[4] = {'W', 'P', 'W', 'T'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void read_doubles(double* dst, std::size_t n) {
    need(n * sizeof(double), "tensor values");
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw WeightsFormatError(std::string("weights file truncated while reading ") + what);
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_weights(const WeightsFile& file) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, file.version);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.metadata.size()));
  out += file.metadata;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
    for (Index d : t.value.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.value.data().data()),
               static_cast<std::size_t>(t.value.size()) * sizeof(double));
  }
  return out;
}

WeightsFile decode_weights(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw WeightsFormatError("not a weights file (bad magic)");
  WeightsFile file;
  file.version = r.get<std::uint32_t>("version");
  if (file.version != kWeightsFormatVersion) {
    throw WeightsFormatError("unsupported weights format version " + std::to_string(file.version));
  }
  file.metadata = r.str(r.get<std::uint32_t>("metadata length"), "metadata");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.get<std::uint32_t>("name length"), "name");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.get<std::uint64_t>("dim")));
    t.value = Tensor(shape);
    r.read_doubles(t.value.data().data(), static_cast<std::size_t>(t.value.size()));
    file.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw WeightsFormatError("trailing bytes after last tensor");
  return file;
}

void write_weights(const std::filesystem::path& path, const WeightsFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_weights(file);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

WeightsFile read_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weights file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_weights(ss.str());
}

WeightsFile snapshot(const ParamSet& params, std::string metadata) {
  WeightsFile file;
  file.metadata = std::move(metadata);
  for (const auto& e : params.entries()) file.tensors.push_back({e.name, e.var.value()});
  return file;
}

namespace {

const NamedTensor* find(const WeightsFile& file, const std::string& name) {
  for (const auto& t : file.tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void copy_into(ParamSet::Entry& e, const NamedTensor& t) {
  if (t.value.shape() != e.var.shape()) {
    throw WeightsFormatError("shape mismatch for " + e.name + ": file has " + shape_string(t.value.shape()) +
                             ", model expects " + shape_string(e.var.shape()));
  }
  e.var.mutable_value() = t.value;
}

}  // namespace

void restore(ParamSet& params, const WeightsFile& file) {
  for (auto& e : params.entries()) {
    const NamedTensor* t = find(file, e.name);
    if (!t) throw WeightsFormatError("weights file lacks parameter " + e.name);
    copy_into(e, *t);
  }
}

std::size_t restore_matching(ParamSet& params, const WeightsFile& file) {
  std::size_t n = 0;
  for (auto& e : params.entries()) {
    if (const NamedTensor* t = find(file, e.name)) {
      copy_into(e, *t);
      ++n;
    }
  }
  return n;
}

}  // namespace watchped::ad
