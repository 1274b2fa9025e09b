#include "moelab/digest.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <memory>

#include "moelab/error.hpp"

namespace moelab {

namespace {

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw IoError("SHA-256 update failed");
  }
  void update(const Tensor& t) {
    const std::string shape = shape_to_string(t.shape());
    update(shape.data(), shape.size());
    // Payload is hashed as stored; the checkpoint format assumes a little-endian host too.
    update(t.data(), t.numel() * sizeof(double));
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw IoError("SHA-256 final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx_;
};

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string tensor_sha256(const Tensor& t) {
  Sha256 h;
  h.update(t);
  return h.hex();
}

std::string expert_sha256(const MoEModel& model, std::size_t layer, std::size_t expert) {
  if (layer >= model.blocks().size() || expert >= model.blocks()[layer].experts.size()) {
    throw ConfigError("expert_sha256: no expert " + std::to_string(expert) + " in layer " + std::to_string(layer));
  }
  const ExpertFFN& e = model.blocks()[layer].experts[expert];
  Sha256 h;
  h.update(model.params().value(e.up.weight));
  h.update(model.params().value(e.down.weight));
  return h.hex();
}

}  // namespace moelab
