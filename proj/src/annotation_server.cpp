#include "saesens/annotation_server.hpp"

#include <httplib.h>

#include <spdlog/spdlog.h>

#include "saesens/error.hpp"
#include "saesens/io.hpp"

namespace saesens {

AnnotationService::AnnotationService(std::filesystem::path data_dir)
    : data_dir_(std::move(data_dir)), store_(data_dir_) {
  const auto sessions_dir = data_dir_ / "sessions";
  std::filesystem::create_directories(sessions_dir);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(sessions_dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    Session s;
    try {
      s = session_from_json(nlohmann::json::parse(read_file(f)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("session file " + f.string() + ": " + e.what(), e.byte);
    }
    for (const auto& it : s.items) item_session_[it.item_id] = s.session_id;
    sessions_[s.session_id] = std::move(s);
  }
}

void AnnotationService::add_session(const Session& session) {
  std::lock_guard lock(mu_);
  for (const auto& it : session.items) {
    auto owner = item_session_.find(it.item_id);
    if (owner != item_session_.end() && owner->second != session.session_id) {
      throw ValidationError("item id " + it.item_id + " already belongs to session " + owner->second);
    }
  }
  write_file_atomic(data_dir_ / "sessions" / (session.session_id + ".json"), to_json(session).dump(2) + "\n");
  for (const auto& it : session.items) item_session_[it.item_id] = session.session_id;
  sessions_[session.session_id] = session;
}

bool AnnotationService::has_session(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  return sessions_.count(session_id) > 0;
}

nlohmann::json AnnotationService::session_view(const std::string& session_id,
                                               const std::optional<std::string>& annotator) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session: " + session_id);
  nlohmann::json view = ui_payload(it->second);
  if (annotator) {
    for (auto& item : view["items"]) {
      item["rated"] = store_.get(item["item_id"].get<std::string>(), *annotator).has_value();
    }
  }
  return view;
}

nlohmann::json AnnotationService::submit(const nlohmann::json& body) {
  Rating r = rating_from_json(body);
  {
    std::lock_guard lock(mu_);
    if (!item_session_.count(r.item_id)) throw NotFoundError("unknown item: " + r.item_id);
  }
  r.timestamp.clear();  // the server's clock is authoritative
  const auto ack = store_.submit(r);
  nlohmann::json out = {{"status", "ok"}, {"item_id", r.item_id}, {"overwritten", ack.overwritten}};
  if (ack.previous_label) out["previous_label"] = *ack.previous_label;
  return out;
}

nlohmann::json AnnotationService::results() const {
  std::vector<Session> sessions;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, s] : sessions_) sessions.push_back(s);
  }
  const auto ratings = store_.ratings();
  if (ratings.empty()) {
    return {{"schema_version", kAnnotationSchema},
            {"n_ratings", 0},
            {"categories", nlohmann::json::array()},
            {"notes", {"no ratings yet"}}};
  }
  nlohmann::json out = to_json(rating_distribution(sessions, ratings));
  out["n_ratings"] = ratings.size();
  return out;
}

struct AnnotationServer::Impl {
  httplib::Server server;
};

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
  send_json(res, status, {{"error", kind}, {"message", message}});
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const NotFoundError& e) {
    send_error(res, 404, "not_found", e.what());
  } catch (const ValidationError& e) {
    send_error(res, 400, "validation", e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, "validation", e.what());
  } catch (const std::exception& e) {
    spdlog::error("annotation request failed: {}", e.what());
    send_error(res, 500, "internal", e.what());
  }
}

}  // namespace

AnnotationServer::AnnotationServer(AnnotationService& service, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->server;
  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"schema_version", kAnnotationSchema}});
  });
  srv.Get(R"(/session/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::optional<std::string> annotator;
      if (req.has_param("annotator")) annotator = req.get_param_value("annotator");
      send_json(res, 200, service.session_view(req.matches[1].str(), annotator));
    });
  });
  srv.Post("/rating", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.submit(nlohmann::json::parse(req.body))); });
  });
  srv.Get("/results", [&service](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.results()); });
  });
  if (static_dir) {
    if (!srv.set_mount_point("/", static_dir->string())) {
      throw ConfigError("static directory not found: " + static_dir->string());
    }
  }
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  int bound = port;
  if (port == 0) {
    bound = srv.bind_to_any_port(host);
  } else if (!srv.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  return bound;
}

void AnnotationServer::run(const std::string& host, int port) {
  auto& srv = impl_->server;
  if (!srv.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  spdlog::info("annotation service listening on {}:{}", host, port);
  srv.listen_after_bind();
}

void AnnotationServer::stop() {
  if (impl_) impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace saesens
