#include "aag/weight_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "aag/errors.hpp"

namespace aag {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

namespace {

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
  }
  throw FormatError("unknown dtype");
}

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes(b) {}

  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > bytes.size() - pos) throw FormatError(std::string("weight file truncated in ") + what);
    const auto* p = bytes.data() + pos;
    pos += n;
    return p;
  }
  std::size_t remaining() const { return bytes.size() - pos; }

 private:
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

}  // namespace

std::string to_string(DType d) { return d == DType::F32 ? "f32" : "f64"; }

std::size_t TensorRecord::numel() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

template <typename T>
TensorRecord TensorRecord::from_values(std::string name, const Shape& dims, std::span<const T> values) {
  TensorRecord r{std::move(name), dtype_of<T>(), dims, {}};
  r.payload.resize(values.size() * sizeof(T));
  std::memcpy(r.payload.data(), values.data(), r.payload.size());
  return r;
}

template <typename T>
std::vector<T> TensorRecord::values() const {
  std::vector<T> out(numel());
  if (dtype == DType::F32) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      float f;
      std::memcpy(&f, payload.data() + 4 * i, 4);
      out[i] = static_cast<T>(f);
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      double d;
      std::memcpy(&d, payload.data() + 8 * i, 8);
      out[i] = static_cast<T>(d);
    }
  }
  return out;
}

const TensorRecord* WeightFile::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> WeightFile::serialize() const {
  Writer w;
  w.put_bytes("AAGW", 4);
  w.put<std::uint32_t>(kVersion);
  const std::string head = header.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(head.size()));
  w.put_bytes(head.data(), head.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.payload.size() != t.numel() * dtype_size(t.dtype)) {
      throw DimensionError("tensor '" + t.name + "' payload does not match its dims");
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.put<std::uint64_t>(d);
    w.put_bytes(t.payload.data(), t.payload.size());
  }
  return std::move(w.out);
}

WeightFile WeightFile::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), "AAGW", 4) != 0) throw FormatError("not a weight file (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported weight file version " + std::to_string(version));
  }
  WeightFile file;
  const auto head_len = r.get<std::uint32_t>("header length");
  const auto* head = reinterpret_cast<const char*>(r.take(head_len, "header"));
  try {
    file.header = nlohmann::json::parse(head, head + head_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weight file header is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    const auto* name = reinterpret_cast<const char*>(r.take(name_len, "tensor name"));
    t.name.assign(name, name_len);
    const auto code = r.get<std::uint8_t>("dtype");
    if (code != 1 && code != 2) throw FormatError("tensor '" + t.name + "' has unknown dtype code");
    t.dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("tensor '" + t.name + "' has implausible rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>("dims");
      if (d != 0 && n > r.remaining() / d) throw FormatError("weight file truncated in payload");
      t.dims.push_back(static_cast<std::size_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    const std::size_t len = n * dtype_size(t.dtype);
    const auto* p = r.take(len, "payload");
    t.payload.assign(p, p + len);
    file.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  }
  return file;
}

void WeightFile::save(const std::string& path) const {
  const auto bytes = serialize();
  // Write then rename so an interrupted save never clobbers the old file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move " + tmp + " to " + path);
}

WeightFile WeightFile::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open weight file " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

template <typename T>
WeightFile weights_from_model(MultiTaskModel<T>& model) {
  WeightFile file;
  file.header["model"] = model.spec().to_json();
  for (auto& nt : model.named_tensors()) {
    file.tensors.push_back(TensorRecord::from_values<T>(nt.name, nt.tensor.dims(), nt.tensor.data()));
  }
  return file;
}

MultiTaskModelSpec spec_from_weights(const WeightFile& file) {
  if (!file.header.contains("model")) throw FormatError("weight file header has no model spec");
  return MultiTaskModelSpec::from_json(file.header.at("model"));
}

template <typename T>
void load_into(MultiTaskModel<T>& model, const WeightFile& file) {
  for (auto& nt : model.named_tensors()) {
    const auto* rec = file.find(nt.name);
    if (!rec) throw FormatError("weight file lacks tensor '" + nt.name + "'");
    if (rec->dims != nt.tensor.dims()) throw FormatError("tensor '" + nt.name + "' has the wrong shape");
    const auto values = rec->template values<T>();
    std::copy(values.begin(), values.end(), nt.tensor.mutable_data().begin());
  }
}

template <typename T>
MultiTaskModel<T> model_from_weights(const WeightFile& file) {
  MultiTaskModel<T> model(spec_from_weights(file));
  load_into(model, file);
  return model;
}

template TensorRecord TensorRecord::from_values<float>(std::string, const Shape&, std::span<const float>);
template TensorRecord TensorRecord::from_values<double>(std::string, const Shape&, std::span<const double>);
template std::vector<float> TensorRecord::values<float>() const;
template std::vector<double> TensorRecord::values<double>() const;
template WeightFile weights_from_model(MultiTaskModel<float>&);
template WeightFile weights_from_model(MultiTaskModel<double>&);
template MultiTaskModel<float> model_from_weights(const WeightFile&);
template MultiTaskModel<double> model_from_weights(const WeightFile&);
template void load_into(MultiTaskModel<float>&, const WeightFile&);
template void load_into(MultiTaskModel<double>&, const WeightFile&);

}  // namespace aag
