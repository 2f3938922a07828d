#include "infobfr/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "infobfr/error.hpp"

namespace infobfr {

namespace {

constexpr std::array<char, 8> kMagic{'I', 'B', 'F', 'R', 'C', 'K', 'P', 'T'};

template <typename T>
void write_pod(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw_invalid("truncated checkpoint");
  return value;
}

std::string read_string(std::istream& in, std::size_t length) {
  if (length > (std::size_t{1} << 30)) throw_invalid("corrupt checkpoint record length");
  std::string s(length, '\0');
  in.read(s.data(), static_cast<std::streamsize>(length));
  if (!in) throw_invalid("truncated checkpoint");
  return s;
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_runtime("cannot write checkpoint " + path.string());

  out.write(kMagic.data(), kMagic.size());
  write_pod<uint32_t>(out, kCheckpointFormatVersion);
  const std::string meta_text = meta.dump();
  write_pod<uint64_t>(out, meta_text.size());
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

  uint32_t count = 0;
  for (const auto& [_, ws] : sections) count += static_cast<uint32_t>(ws.items().size());
  write_pod<uint32_t>(out, count);
  for (const auto& [section, ws] : sections) {
    for (const auto& [name, tensor] : ws.items()) {
      const std::string full = section + "/" + name;
      write_pod<uint32_t>(out, static_cast<uint32_t>(full.size()));
      out.write(full.data(), static_cast<std::streamsize>(full.size()));
      const auto t = tensor.detach().to(torch::kFloat32).contiguous();
      write_pod<uint32_t>(out, static_cast<uint32_t>(t.dim()));
      for (int64_t d : t.sizes()) write_pod<int64_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
  }
  if (!out) throw_runtime("failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw_missing("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_missing("cannot open checkpoint " + path.string());

  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw_invalid("not a checkpoint file: " + path.string());
  const auto version = read_pod<uint32_t>(in);
  if (version != kCheckpointFormatVersion) {
    throw_invalid("unsupported checkpoint format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto meta_len = read_pod<uint64_t>(in);
  ckpt.meta = nlohmann::json::parse(read_string(in, meta_len));

  const auto count = read_pod<uint32_t>(in);
  for (uint32_t i = 0; i < count; ++i) {
    const std::string full = read_string(in, read_pod<uint32_t>(in));
    const auto slash = full.find('/');
    if (slash == std::string::npos) throw_invalid("array name without section: " + full);
    const auto ndim = read_pod<uint32_t>(in);
    if (ndim > 8) throw_invalid("corrupt array rank in " + full);
    std::vector<int64_t> dims(ndim);
    int64_t numel = 1;
    for (auto& d : dims) {
      d = read_pod<int64_t>(in);
      if (d < 0) throw_invalid("negative dimension in " + full);
      numel *= d;
    }
    auto t = torch::empty(dims, torch::kFloat32);
    in.read(reinterpret_cast<char*>(t.data_ptr<float>()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in) throw_invalid("truncated array " + full);
    ckpt.sections[full.substr(0, slash)].add(full.substr(slash + 1), t);
  }
  return ckpt;
}

const WeightSet& Checkpoint::section(const std::string& name) const {
  auto it = sections.find(name);
  if (it == sections.end()) throw_invalid("checkpoint has no section '" + name + "'");
  return it->second;
}

std::string sha256_hex(const void* data, std::size_t size) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (EVP_Digest(data, size, digest.data(), &length, EVP_sha256(), nullptr) != 1) {
    throw_runtime("SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_missing("cannot read " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace infobfr
