#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "saesens/annotation.hpp"

namespace saesens {

// Sessions and ratings under one data directory:
//   sessions/<id>.json   full session, hidden categories included
//   ratings.log          append-only rating log
//   audit.log            overwrite history
class AnnotationService {
 public:
  explicit AnnotationService(std::filesystem::path data_dir);

  void add_session(const Session& session);
  bool has_session(const std::string& session_id) const;
  // Blinded view. With an annotator id, each item also reports whether that
  // annotator has rated it, so a client can resume.
  nlohmann::json session_view(const std::string& session_id, const std::optional<std::string>& annotator) const;
  // Validates and stores; returns the acknowledgement body.
  nlohmann::json submit(const nlohmann::json& body);
  nlohmann::json results() const;

  RatingStore& store() { return store_; }

 private:
  std::filesystem::path data_dir_;
  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
  std::map<std::string, std::string> item_session_;  // item id -> session id
  RatingStore store_;
};

// HTTP front end:
//   GET  /session/:id[?annotator=<id>]  blinded items
//   POST /rating                        {item_id, annotator_id, label}
//   GET  /results                       per-category label distribution
//   GET  /health
// Errors are {"error": kind, "message": text} with 400, 404 or 500.
class AnnotationServer {
 public:
  AnnotationServer(AnnotationService& service, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  // Binds and serves on a background thread; port 0 picks a free port.
  int start(const std::string& host, int port);
  // Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace saesens
