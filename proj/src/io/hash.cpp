#include "kdse/io/hash.hpp"

#include <openssl/sha.h>

namespace kdse::io {

std::string sha1_hex(std::string_view bytes) {
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * SHA_DIGEST_LENGTH);
  for (unsigned char b : digest) {
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

std::string git_blob_hash(std::string_view content) {
  std::string data = "blob " + std::to_string(content.size());
  data += '\0';
  data.append(content);
  return sha1_hex(data);
}

}  // namespace kdse::io
