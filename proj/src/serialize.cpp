#include "latinf/serialize.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "latinf/errors.hpp"

namespace latinf {

namespace {

constexpr std::string_view kMagic = "LATINFW1";

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IntegrityError("parameter blob truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string encode_params(const nn::ParamSet& params) {
  std::string out(kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.items()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const auto& t = p.var.value();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::int64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.numel()) * sizeof(double));
  }
  return out;
}

void decode_params(std::string_view blob, nn::ParamSet& params) {
  Reader r(blob);
  if (r.take(kMagic.size()) != kMagic) throw IntegrityError("not a parameter blob (bad magic)");
  const auto count = r.get<std::uint32_t>();
  if (count != params.size())
    throw ContractError("parameter blob holds " + std::to_string(count) + " tensors, model expects " +
                        std::to_string(params.size()));
  for (auto& p : params.items()) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name(r.take(name_len));
    if (name != p.name) throw ContractError("parameter blob entry '" + name + "' where '" + p.name + "' expected");
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IntegrityError("implausible tensor rank in parameter blob");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::int64_t>();
    if (shape != p.var.shape())
      throw ContractError("parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                          shape_str(p.var.shape()));
    auto raw = r.take(static_cast<std::size_t>(shape_numel(shape)) * sizeof(double));
    std::memcpy(p.var.mutable_value().data(), raw.data(), raw.size());
  }
  if (!r.done()) throw IntegrityError("trailing bytes in parameter blob");
}

std::string params_checksum(const nn::ParamSet& params) { return sha256_hex(encode_params(params)); }

}  // namespace latinf
