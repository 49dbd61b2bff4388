#include <sodium.h>

#include <array>
#include <stdexcept>

#include "studyflow/error.hpp"
#include "studyflow/providers.hpp"

namespace studyflow {

using nlohmann::json;

namespace {

constexpr std::string_view kKeyPrefix = "api-key.";
constexpr std::string_view kConfigPrefix = "provider-config.";

void ensure_sodium() {
  static const int rc = sodium_init();
  if (rc < 0) throw StorageFailure("libsodium failed to initialise");
}

using SecretKey = std::array<unsigned char, crypto_secretbox_KEYBYTES>;

SecretKey derive_key(const std::string& secret) {
  SecretKey key{};
  static constexpr unsigned char context[] = "studyflow credential key v1";
  crypto_generichash(key.data(), key.size(), reinterpret_cast<const unsigned char*>(secret.data()), secret.size(),
                     context, sizeof context - 1);
  return key;
}

std::string to_hex(const unsigned char* data, std::size_t size) {
  std::string out(size * 2 + 1, '\0');
  sodium_bin2hex(out.data(), out.size(), data, size);
  out.pop_back();
  return out;
}

std::vector<unsigned char> from_hex(const std::string& hex) {
  std::vector<unsigned char> out(hex.size() / 2);
  std::size_t len = 0;
  if (sodium_hex2bin(out.data(), out.size(), hex.data(), hex.size(), nullptr, &len, nullptr) != 0) {
    throw StorageFailure("stored credential is not valid hex");
  }
  out.resize(len);
  return out;
}

DocumentRef key_ref_doc(std::string_view prefix, const std::string& ref) {
  std::string key(prefix);
  key += ref;
  check_key(key);
  if (key.find('/') != std::string::npos) throw PreconditionViolation("credential refs cannot contain '/'");
  return {Collection::credentials, key};
}

ProviderConfig builtin_mock(const std::string& corpus) {
  ProviderConfig config;
  config.llm.provider = LlmProviderKind::mock_echo;
  config.llm.model = "mock-echo";
  config.search.provider = SearchProviderKind::mock_corpus;
  config.search.corpus_path = corpus;
  return config;
}

}  // namespace

CredentialStore::CredentialStore(Store& store, std::string secret) : store_(store), secret_(std::move(secret)) {
  ensure_sodium();
}

void CredentialStore::set_key(const std::string& key_ref, const std::string& plaintext) {
  if (secret_.empty()) throw PreconditionViolation("no credential-encryption secret configured");
  const auto ref = key_ref_doc(kKeyPrefix, key_ref);
  const SecretKey key = derive_key(secret_);
  std::array<unsigned char, crypto_secretbox_NONCEBYTES> nonce{};
  randombytes_buf(nonce.data(), nonce.size());
  std::vector<unsigned char> cipher(plaintext.size() + crypto_secretbox_MACBYTES);
  crypto_secretbox_easy(cipher.data(), reinterpret_cast<const unsigned char*>(plaintext.data()), plaintext.size(),
                        nonce.data(), key.data());
  const json doc = {{"nonce", to_hex(nonce.data(), nonce.size())}, {"ciphertext", to_hex(cipher.data(), cipher.size())}};
  for (;;) {
    const auto current = store_.get(ref);
    try {
      store_.put(ref, doc.dump(), current ? current->version : 0);
      return;
    } catch (const VersionConflict&) {
    }
  }
}

std::optional<std::string> CredentialStore::get_key(const std::string& key_ref) const {
  const auto stored = store_.get(key_ref_doc(kKeyPrefix, key_ref));
  if (!stored || secret_.empty()) return std::nullopt;
  const json doc = json::parse(stored->value, nullptr, false);
  if (doc.is_discarded() || !doc.contains("nonce") || !doc.contains("ciphertext")) {
    throw StorageFailure("credential record '" + key_ref + "' is corrupt");
  }
  const auto nonce = from_hex(doc["nonce"].get<std::string>());
  const auto cipher = from_hex(doc["ciphertext"].get<std::string>());
  if (nonce.size() != crypto_secretbox_NONCEBYTES || cipher.size() < crypto_secretbox_MACBYTES) {
    throw StorageFailure("credential record '" + key_ref + "' is corrupt");
  }
  const SecretKey key = derive_key(secret_);
  std::string plain(cipher.size() - crypto_secretbox_MACBYTES, '\0');
  if (crypto_secretbox_open_easy(reinterpret_cast<unsigned char*>(plain.data()), cipher.data(), cipher.size(),
                                 nonce.data(), key.data()) != 0) {
    // Encrypted under a different secret.
    return std::nullopt;
  }
  return plain;
}

void CredentialStore::remove_key(const std::string& key_ref) {
  const auto ref = key_ref_doc(kKeyPrefix, key_ref);
  if (auto current = store_.get(ref)) store_.erase(ref, current->version);
}

void CredentialStore::put_provider_config(const std::string& ref, const ProviderConfig& config) {
  if (ref == "mock") throw PreconditionViolation("'mock' is the built-in provider configuration");
  const auto doc_ref = key_ref_doc(kConfigPrefix, ref);
  const std::string body = provider_config_to_json(config).dump();
  for (;;) {
    const auto current = store_.get(doc_ref);
    try {
      store_.put(doc_ref, body, current ? current->version : 0);
      return;
    } catch (const VersionConflict&) {
    }
  }
}

std::optional<ProviderConfig> CredentialStore::provider_config(const std::string& ref) const {
  if (ref == "mock") return builtin_mock(default_corpus_);
  const auto stored = store_.get(key_ref_doc(kConfigPrefix, ref));
  if (!stored) return std::nullopt;
  return provider_config_from_json(json::parse(stored->value));
}

std::vector<std::string> CredentialStore::provider_config_refs() const {
  std::vector<std::string> out{"mock"};
  for (const auto& key : store_.list(Collection::credentials, kConfigPrefix)) {
    out.push_back(key.substr(kConfigPrefix.size()));
  }
  return out;
}

}  // namespace studyflow
