#pragma once

#include <string>

#include "httplib.h"
#include "json.hpp"

#include "freeatm/errors.hpp"

namespace freeatm::prompt {

// Client for an external text-augmentation service. POSTs
// {"class": ..., "template": ...} to `path` and expects {"sentence": ...}.
// Nothing in the library calls it; the template engine is the default.
class AugmentationClient {
 public:
  AugmentationClient(std::string host, int port, std::string path = "/augment", int timeout_s = 10)
      : host_(std::move(host)), port_(port), path_(std::move(path)), timeout_s_(timeout_s) {}

  std::string augment(const std::string& class_name, const std::string& template_id) const {
    httplib::Client client(host_, port_);
    client.set_connection_timeout(timeout_s_, 0);
    client.set_read_timeout(timeout_s_, 0);
    const nlohmann::json request = {{"class", class_name}, {"template", template_id}};
    const auto res = client.Post(path_, request.dump(), "application/json");
    require<BackendError>(static_cast<bool>(res), "augmentation service unreachable at " + host_ +
                                                      ":" + std::to_string(port_));
    require<BackendError>(res->status == 200,
                          "augmentation service returned HTTP " + std::to_string(res->status));
    try {
      const auto body = nlohmann::json::parse(res->body);
      std::string sentence = body.at("sentence").get<std::string>();
      require<BackendError>(!sentence.empty(), "augmentation service returned an empty sentence");
      return sentence;
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("malformed augmentation response: ") + e.what());
    }
  }

 private:
  std::string host_;
  int port_;
  std::string path_;
  int timeout_s_;
};

}  // namespace freeatm::prompt
