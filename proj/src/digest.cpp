#include "cdtta/digest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <vector>

#include "cdtta/errors.hpp"

namespace cdtta {

namespace fs = std::filesystem;

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      fail(ErrorKind::data, "sha256: cannot initialise digest");
  }
  void update(const void* data, std::size_t len) { EVP_DigestUpdate(ctx_.get(), data, len); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[md[i] >> 4]);
      out.push_back(kHex[md[i] & 15]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

void hash_file(Sha256& h, const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) fail(ErrorKind::data, "cannot read '" + p.string() + "'");
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
}

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_hex(const std::string& text) {
  Sha256 h;
  h.update(text.data(), text.size());
  return h.hex();
}

std::string file_digest(const std::string& path) {
  Sha256 h;
  hash_file(h, path);
  return h.hex();
}

std::string directory_digest(const std::string& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::data, "'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) {
    const std::string name = f.generic_string();
    h.update(name.data(), name.size() + 1);
    const std::string inner = file_digest((fs::path(dir) / f).string());
    h.update(inner.data(), inner.size());
  }
  return h.hex();
}

}  // namespace cdtta
