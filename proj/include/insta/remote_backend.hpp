#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
// <resolv.h> (via httplib) defines _res, which collides with Eigen parameter names.
#ifdef _res
#undef _res
#endif
#include <json.hpp>

#include "insta/embed.hpp"
#include "insta/errors.hpp"

namespace insta {

struct RemoteOptions {
  std::chrono::milliseconds timeout{10000};
  std::size_t batch_size = 32;
  int attempts = 3;
  std::chrono::milliseconds backoff{200};  // doubled after each failed attempt
};

// Client for the embedding service:
//   GET  /healthz   -> {"status":"ok","model":str,"dim":int}
//   POST /v1/embed  {"model":str,"texts":[str]} -> {"model":str,"dim":int,"embeddings":[[number]]}
class RemoteBackend final : public EmbeddingBackend {
 public:
  RemoteBackend(std::string endpoint, std::string model_id, RemoteOptions opts = {})
      : endpoint_(std::move(endpoint)), model_(std::move(model_id)), opts_(opts) {
    if (opts_.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (opts_.attempts < 1) throw ConfigError("attempts must be positive");
    auto body = with_retries([&](httplib::Client& cli) { return cli.Get("/healthz"); });
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("healthz: ") + e.what());
    }
    if (!j.is_object() || j.value("status", "") != "ok" || !j.contains("dim") || !j["dim"].is_number_unsigned()) {
      throw ProtocolError("healthz: unexpected body " + body);
    }
    dim_ = j["dim"].get<std::size_t>();
    if (dim_ == 0) throw ProtocolError("healthz: dim must be positive");
    if (model_.empty() && j.contains("model") && j["model"].is_string()) model_ = j["model"].get<std::string>();
  }

  std::string id() const override { return "remote:" + endpoint_; }
  std::string model_id() const override { return model_; }
  std::size_t dim() const override { return dim_; }
  bool deterministic() const override { return true; }
  std::size_t request_count() const { return requests_.load(); }

  std::vector<std::vector<float>> embed_raw(std::span<const std::string> texts) const override {
    std::vector<std::vector<float>> out;
    out.reserve(texts.size());
    for (std::size_t start = 0; start < texts.size(); start += opts_.batch_size) {
      const auto n = std::min(opts_.batch_size, texts.size() - start);
      nlohmann::json req{{"model", model_}, {"texts", nlohmann::json::array()}};
      for (std::size_t i = 0; i < n; ++i) req["texts"].push_back(texts[start + i]);
      const auto payload = req.dump();
      auto body = with_retries([&](httplib::Client& cli) { return cli.Post("/v1/embed", payload, "application/json"); });
      auto rows = parse_rows(body, n);
      for (auto& r : rows) out.push_back(std::move(r));
    }
    return out;
  }

 private:
  template <typename Call>
  std::string with_retries(Call&& call) const {
    auto delay = opts_.backoff;
    std::string last_error;
    for (int attempt = 0; attempt < opts_.attempts; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(delay);
        delay *= 2;
      }
      httplib::Client cli(endpoint_);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opts_.timeout - secs);
      cli.set_connection_timeout(secs.count(), usecs.count());
      cli.set_read_timeout(secs.count(), usecs.count());
      cli.set_write_timeout(secs.count(), usecs.count());
      ++requests_;
      auto res = call(cli);
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 200) return res->body;
      if (res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      throw ProtocolError("HTTP " + std::to_string(res->status) + ": " + res->body);
    }
    throw BackendUnavailableError(endpoint_ + " unavailable after " + std::to_string(opts_.attempts) +
                                  " attempts: " + last_error);
  }

  std::vector<std::vector<float>> parse_rows(const std::string& body, std::size_t expected) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("malformed embed response: ") + e.what());
    }
    if (!j.is_object() || !j.contains("embeddings") || !j["embeddings"].is_array()) {
      throw ProtocolError("embed response lacks 'embeddings' array");
    }
    if (j.contains("dim") && (!j["dim"].is_number_unsigned() || j["dim"].get<std::size_t>() != dim_)) {
      throw DimensionMismatchError("embed response dim differs from advertised " + std::to_string(dim_));
    }
    const auto& rows = j["embeddings"];
    if (rows.size() != expected) {
      throw ProtocolError("expected " + std::to_string(expected) + " rows, got " + std::to_string(rows.size()));
    }
    std::vector<std::vector<float>> out;
    out.reserve(rows.size());
    for (const auto& row : rows) {
      if (!row.is_array()) throw ProtocolError("embedding row is not an array");
      if (row.size() != dim_) {
        throw DimensionMismatchError("row of length " + std::to_string(row.size()) + ", advertised dim " +
                                     std::to_string(dim_));
      }
      std::vector<float> v;
      v.reserve(dim_);
      for (const auto& x : row) {
        if (!x.is_number()) throw ProtocolError("embedding value is not a number");
        const double d = x.get<double>();
        if (!std::isfinite(d)) throw ProtocolError("embedding value is not finite");
        v.push_back(static_cast<float>(d));
      }
      out.push_back(std::move(v));
    }
    return out;
  }

  std::string endpoint_;
  std::string model_;
  RemoteOptions opts_;
  std::size_t dim_ = 0;
  mutable std::atomic<std::size_t> requests_{0};
};

inline std::unique_ptr<EmbeddingBackend> remote_backend(std::string endpoint, std::string model_id,
                                                        RemoteOptions opts = {}) {
  return std::make_unique<RemoteBackend>(std::move(endpoint), std::move(model_id), opts);
}

}  // namespace insta
