// Copyright 2026 The APS Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Chat-completions oracle over HTTP(S). Requests in a batch run on a bounded
// pool of worker threads; each result is stored at its request's position,
// so the outcome does not depend on completion order.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "aps/oracle.hpp"
#include "httplib.h"
#include "json.hpp"

namespace aps {

struct HttpOracleConfig {
  std::string base_url = "http://127.0.0.1:8000/v1";
  std::string model_id;
  std::string api_key_env = "APS_API_KEY";
  std::size_t max_in_flight = 16;
  double timeout_s = 120.0;
  std::size_t retries = 3;  // total attempts per decision
  double backoff_base_s = 1.0;
  double backoff_cap_s = 30.0;
  std::string transcript;   // JSONL path, empty for none
  PromptTemplate prompt = PromptTemplate::generic();

  void validate() const {
    if (max_in_flight < 1) throw ConfigError("oracle.max_in_flight must be >= 1");
    if (retries < 1) throw ConfigError("oracle.retries must be >= 1");
    if (!(timeout_s > 0.0)) throw ConfigError("oracle.timeout_s must be > 0");
    if (backoff_base_s < 0.0 || backoff_cap_s < 0.0) throw ConfigError("oracle backoff must be >= 0");
    prompt.validate();
  }
};

namespace detail {
/// Splits "scheme://host[:port][/prefix]" into the client origin and path prefix.
inline std::pair<std::string, std::string> split_base_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("oracle.base_url needs a scheme: '" + url + "'");
  const auto slash = url.find('/', scheme + 3);
  std::string origin = slash == std::string::npos ? url : url.substr(0, slash);
  std::string prefix = slash == std::string::npos ? "" : url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {origin, prefix};
}
}  // namespace detail

class HttpOracle final : public Oracle {
 public:
  explicit HttpOracle(HttpOracleConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::tie(origin_, prefix_) = detail::split_base_url(cfg_.base_url);
    if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    if (!cfg_.transcript.empty()) {
      const auto parent = std::filesystem::path(cfg_.transcript).parent_path();
      if (!parent.empty()) std::filesystem::create_directories(parent);
      transcript_.open(cfg_.transcript, std::ios::app);
      if (!transcript_) throw ConfigError("cannot open oracle transcript " + cfg_.transcript);
    }
  }

  std::string name() const override { return "http"; }
  const HttpOracleConfig& config() const { return cfg_; }

  nlohmann::json request_body(const std::string& prompt) const {
    return {{"model", cfg_.model_id},
            {"messages",
             {{{"role", "system"}, {"content", kSystemInstruction}}, {{"role", "user"}, {"content", prompt}}}},
            {"temperature", 0},
            {"top_p", 1.0},
            {"max_tokens", 500}};
  }

  double backoff_delay(std::size_t attempt, Rng& rng) const {
    const double d = std::min(cfg_.backoff_cap_s, cfg_.backoff_base_s * std::pow(2.0, static_cast<double>(attempt)));
    std::uniform_real_distribution<double> jitter(0.5, 1.0);
    return d * jitter(rng);
  }

 protected:
  Decision decide(const QueryRequest& req) override {
    const std::string prompt = render_prompt(req.context, cfg_.prompt);
    const std::string body = request_body(prompt).dump();
    const std::size_t K = req.context.option_count();
    Rng rng = keyed_rng(0, {stream::kOracle, req.context.agent, req.round, static_cast<std::uint64_t>(req.category)});
    bool last_transport = true;
    std::string last_error;
    for (std::size_t attempt = 0; attempt < cfg_.retries; ++attempt) {
      if (attempt > 0) {
        ledger_.record_retry(req.round);
        const double wait = backoff_delay(attempt - 1, rng);
        if (wait > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      }
      httplib::Client cli(origin_);
      const auto to = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(cfg_.timeout_s));
      cli.set_connection_timeout(to);
      cli.set_read_timeout(to);
      cli.set_write_timeout(to);
      httplib::Headers headers;
      if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
      auto res = cli.Post(prefix_ + "/chat/completions", headers, body, "application/json");
      if (!res) {
        last_transport = true;
        last_error = "transport error: " + httplib::to_string(res.error());
        log(req, attempt, prompt, "", last_error);
        continue;
      }
      if (res->status != 200) {
        last_transport = true;
        last_error = "HTTP status " + std::to_string(res->status);
        log(req, attempt, prompt, res->body, last_error);
        continue;
      }
      std::string content;
      try {
        content = nlohmann::json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const std::exception& e) {
        last_transport = true;
        last_error = std::string("malformed completion envelope: ") + e.what();
        log(req, attempt, prompt, res->body, last_error);
        continue;
      }
      try {
        Decision d;
        d.option = parse_decision(content, K);
        d.raw = content;
        d.attempts = static_cast<int>(attempt + 1);
        log(req, attempt, prompt, content, "");
        return d;
      } catch (const ParseError& e) {
        ledger_.record_parse_failure(req.round);
        last_transport = false;
        last_error = e.what();
        log(req, attempt, prompt, content, last_error);
      }
    }
    throw OracleError(last_transport ? OracleError::Kind::kTransport : OracleError::Kind::kUnresolved,
                      req.context.agent, req.round, req.category,
                      "no decision after " + std::to_string(cfg_.retries) + " attempts: " + last_error);
  }

  std::vector<Decision> decide_batch(std::span<const QueryRequest> reqs) override {
    std::vector<Decision> out(reqs.size());
    std::vector<std::exception_ptr> errors(reqs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < reqs.size(); i = next++) {
        try {
          out[i] = decide(reqs[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    const std::size_t workers = std::min(cfg_.max_in_flight, reqs.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    return out;
  }

 private:
  void log(const QueryRequest& req, std::size_t attempt, const std::string& prompt, const std::string& response,
           const std::string& error) {
    if (!transcript_.is_open()) return;
    nlohmann::json j{{"agent", req.context.agent}, {"round", req.round}, {"category", to_string(req.category)},
                     {"attempt", attempt + 1},     {"prompt", prompt},   {"response", response},
                     {"error", error}};
    std::lock_guard lock(log_mu_);
    transcript_ << j.dump() << '\n' << std::flush;
  }

  HttpOracleConfig cfg_;
  std::string origin_, prefix_, api_key_;
  std::mutex log_mu_;
  std::ofstream transcript_;
};

}  // namespace aps
