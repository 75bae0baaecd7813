#include "convrec/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace convrec {

namespace {

constexpr std::array<char, 8> kMagic{'C', 'V', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kFormatVersion = 1;

std::uint32_t crc32(const std::string& bytes) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (unsigned char ch : bytes) c = table[(c ^ ch) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

template <class T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.append(s);
}

class Reader {
 public:
  Reader(std::string bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size())
      throw std::runtime_error(path_ + ": truncated checkpoint");
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string() {
    const auto len = get<std::uint64_t>();
    if (pos_ + len > bytes_.size())
      throw std::runtime_error(path_ + ": truncated checkpoint");
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  std::vector<float> get_floats(std::uint64_t count) {
    if (pos_ + count * sizeof(float) > bytes_.size())
      throw std::runtime_error(path_ + ": truncated checkpoint");
    std::vector<float> v(count);
    std::memcpy(v.data(), bytes_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
    return v;
  }

  size_t pos() const { return pos_; }
  const std::string& bytes() const { return bytes_; }
  const std::string& path() const { return path_; }

 private:
  std::string bytes_;
  std::string path_;
  size_t pos_ = 0;
};

std::string encode_meta(const std::map<std::string, std::string>& meta) {
  std::ostringstream os;
  for (const auto& [k, v] : meta) os << k << " = " << v << "\n";
  return os.str();
}

std::map<std::string, std::string> decode_meta(const std::string& text) {
  std::map<std::string, std::string> meta;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    meta[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return meta;
}

template <class Params>
Checkpoint checkpoint_of(const char* component, const Params& params,
                         std::map<std::string, std::string> extra) {
  Checkpoint ckpt;
  ckpt.meta = std::move(extra);
  ckpt.meta["component"] = component;
  const ModelConfig& cfg = params.config;
  ckpt.meta["dim"] = std::to_string(cfg.dim);
  ckpt.meta["layers"] = std::to_string(cfg.layers);
  ckpt.meta["heads"] = std::to_string(cfg.heads);
  ckpt.meta["max_items"] = std::to_string(cfg.max_items);
  ckpt.meta["max_attrs"] = std::to_string(cfg.max_attrs);
  ckpt.meta["dropout"] = std::to_string(cfg.dropout);
  auto& mutable_params = const_cast<Params&>(params);
  for_each_parameter(mutable_params, [&](const std::string& name, Tensor<float>& t) {
    ckpt.arrays.push_back({name, t.shape, t.data});
  });
  return ckpt;
}

int meta_int(const Checkpoint& ckpt, const std::string& key) {
  return std::stoi(ckpt.meta_at(key));
}

template <class Params>
void fill_from_checkpoint(Params& params, const Checkpoint& ckpt) {
  std::map<std::string, const CheckpointArray*> by_name;
  for (const auto& a : ckpt.arrays) {
    if (!by_name.emplace(a.name, &a).second)
      throw std::runtime_error("checkpoint holds duplicate array '" + a.name + "'");
  }
  size_t used = 0;
  for_each_parameter(params, [&](const std::string& name, Tensor<float>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint is missing array '" + name + "'");
    const CheckpointArray& a = *it->second;
    if (a.shape != t.shape)
      throw std::runtime_error("checkpoint array '" + name + "' has shape " +
                               shape_str({a.shape.data(), a.shape.size()}) + ", expected " +
                               shape_str({t.shape.data(), t.shape.size()}));
    t.data = a.data;
    ++used;
  });
  if (used != ckpt.arrays.size())
    throw std::runtime_error("checkpoint holds " + std::to_string(ckpt.arrays.size()) +
                             " arrays but the model expects " + std::to_string(used));
}

ModelConfig config_from(const Checkpoint& ckpt) {
  ModelConfig cfg;
  cfg.dim = meta_int(ckpt, "dim");
  cfg.layers = meta_int(ckpt, "layers");
  cfg.heads = meta_int(ckpt, "heads");
  cfg.max_items = meta_int(ckpt, "max_items");
  cfg.max_attrs = meta_int(ckpt, "max_attrs");
  cfg.dropout = std::stof(ckpt.meta_at("dropout"));
  return cfg;
}

}  // namespace

const std::string& Checkpoint::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw std::runtime_error("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  out.append(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kFormatVersion);
  put_string(out, encode_meta(ckpt.meta));
  put<std::uint64_t>(out, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    put_string(out, a.name);
    put<std::uint64_t>(out, a.shape.size());
    for (Index d : a.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    const char* raw = reinterpret_cast<const char*>(a.data.data());
    out.append(raw, a.data.size() * sizeof(float));
  }
  put<std::uint32_t>(out, crc32(out));

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot write " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << file.rdbuf();
  Reader r(buf.str(), path);

  if (r.bytes().size() < kMagic.size() + sizeof(std::uint32_t) * 2)
    throw std::runtime_error(path + ": truncated checkpoint");
  const std::string payload = r.bytes().substr(0, r.bytes().size() - sizeof(std::uint32_t));
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, r.bytes().data() + r.bytes().size() - sizeof(std::uint32_t),
              sizeof(std::uint32_t));
  if (crc32(payload) != stored_crc)
    throw std::runtime_error(path + ": checksum mismatch, file is corrupted");

  for (char expected : kMagic)
    if (r.get<char>() != expected) throw std::runtime_error(path + ": bad checkpoint magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));

  Checkpoint ckpt;
  ckpt.version = version;
  ckpt.meta = decode_meta(r.get_string());
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointArray a;
    a.name = r.get_string();
    const auto rank = r.get<std::uint64_t>();
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      a.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
      numel *= static_cast<std::uint64_t>(a.shape.back());
    }
    a.data = r.get_floats(numel);
    ckpt.arrays.push_back(std::move(a));
  }
  if (r.pos() != payload.size())
    throw std::runtime_error(path + ": trailing bytes after arrays");
  return ckpt;
}

Checkpoint make_checkpoint(const DualEncoderParams<float>& params,
                           std::map<std::string, std::string> extra_meta) {
  Checkpoint ckpt = checkpoint_of(kDualEncoderComponent, params, std::move(extra_meta));
  ckpt.meta["item_vocab"] = std::to_string(params.item_vocab);
  ckpt.meta["attr_vocab"] = std::to_string(params.attr_vocab);
  return ckpt;
}

Checkpoint make_checkpoint(const GeneratorParams<float>& params,
                           std::map<std::string, std::string> extra_meta) {
  Checkpoint ckpt = checkpoint_of(kGeneratorComponent, params, std::move(extra_meta));
  ckpt.meta["item_vocab"] = std::to_string(params.item_vocab);
  return ckpt;
}

DualEncoderParams<float> dual_encoder_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta_at("component") != kDualEncoderComponent)
    throw std::runtime_error("checkpoint component is '" + ckpt.meta_at("component") +
                             "', expected '" + kDualEncoderComponent + "'");
  std::mt19937 rng(0);  // values are overwritten from the checkpoint
  auto params = init_dual_encoder<float>(config_from(ckpt), meta_int(ckpt, "item_vocab"),
                                         meta_int(ckpt, "attr_vocab"), rng);
  fill_from_checkpoint(params, ckpt);
  return params;
}

GeneratorParams<float> generator_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta_at("component") != kGeneratorComponent)
    throw std::runtime_error("checkpoint component is '" + ckpt.meta_at("component") +
                             "', expected '" + kGeneratorComponent + "'");
  std::mt19937 rng(0);
  auto params =
      init_generator<float>(config_from(ckpt), meta_int(ckpt, "item_vocab"), rng);
  fill_from_checkpoint(params, ckpt);
  return params;
}

}  // namespace convrec
