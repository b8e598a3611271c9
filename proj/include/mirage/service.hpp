#pragma once

// Local HTTP session server for interactive editing. JSON bodies, PNG
// renders; see docs/api.md for the endpoint reference.

#include "mirage/camera.hpp"
#include "mirage/core.hpp"
#include "mirage/edit.hpp"
#include "mirage/games.hpp"
#include "mirage/io.hpp"
#include "mirage/physics.hpp"
#include "mirage/rasterizer.hpp"
#include "mirage/trainer.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace mirage {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 7878;
    std::size_t undo_depth = 32;
    int max_render_side = 4096;
    std::string static_dir; // served at / when set
};

class SimulationJob {
public:
    enum class State { Running, Done, Failed, Cancelled };

    SimulationJob(std::shared_ptr<const Scene> scene, MaterialParams mat, SimulateOptions opt)
        : scene_(std::move(scene)), mat_(mat), opt_(opt) {
        thread_ = std::thread([this] { run(); });
    }

    ~SimulationJob() {
        cancel_ = true;
        if (thread_.joinable()) thread_.join();
    }

    SimulationJob(const SimulationJob &) = delete;
    SimulationJob &operator=(const SimulationJob &) = delete;

    void cancel() { cancel_ = true; }
    std::size_t requested() const { return opt_.frames; }

    std::size_t completed() const {
        std::lock_guard lock(mu_);
        return frames_.size();
    }

    State state() const {
        std::lock_guard lock(mu_);
        return state_;
    }

    std::string error() const {
        std::lock_guard lock(mu_);
        return error_;
    }

    std::shared_ptr<const Scene> frame(std::size_t k) const {
        std::lock_guard lock(mu_);
        return k < frames_.size() ? frames_[k] : nullptr;
    }

    void wait() {
        if (thread_.joinable()) thread_.join();
    }

private:
    void run() {
        try {
            simulate(*scene_, mat_, opt_, nullptr, [this](std::size_t, const Scene &s) {
                std::lock_guard lock(mu_);
                frames_.push_back(std::make_shared<const Scene>(s));
                return !cancel_.load();
            });
            std::lock_guard lock(mu_);
            state_ = frames_.size() == opt_.frames ? State::Done : State::Cancelled;
        } catch (const std::exception &e) {
            std::lock_guard lock(mu_);
            state_ = State::Failed;
            error_ = e.what();
        }
    }

    std::shared_ptr<const Scene> scene_;
    MaterialParams mat_;
    SimulateOptions opt_;
    mutable std::mutex mu_;
    std::vector<std::shared_ptr<const Scene>> frames_;
    State state_ = State::Running;
    std::string error_;
    std::atomic<bool> cancel_{false};
    std::thread thread_;
};

inline const char *to_string(SimulationJob::State s) {
    switch (s) {
    case SimulationJob::State::Running: return "running";
    case SimulationJob::State::Done: return "done";
    case SimulationJob::State::Failed: return "failed";
    case SimulationJob::State::Cancelled: return "cancelled";
    }
    return "?";
}

struct Session {
    std::string id;
    std::mutex writer;
    std::mutex state; // guards scene, revision, undo, sim
    std::shared_ptr<const Scene> scene;
    std::uint64_t revision = 0;
    std::deque<std::shared_ptr<const Scene>> undo;
    std::shared_ptr<SimulationJob> sim;
};

namespace detail {

class HttpError : public Error {
public:
    HttpError(int status, const std::string &what) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

inline void send_json(httplib::Response &res, int status, const nlohmann::json &body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline nlohmann::json parse_body(const httplib::Request &req) {
    try {
        return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error &e) {
        throw HttpError(400, std::string("body: invalid JSON: ") + e.what());
    }
}

inline nlohmann::json scene_summary(const Scene &s) {
    const CameraRig rig = s.rig.value_or(CameraRig{});
    const PlaneExtents e = plane_extents(rig);
    return {{"gaussians", s.size()},
            {"mode", std::string(to_string(s.mode))},
            {"extents", {{"dev_x", e.dev_x}, {"dev_z", e.dev_z}}},
            {"width", rig.width},
            {"height", rig.height}};
}

inline int query_int(const httplib::Request &req, const char *key, int fallback) {
    if (!req.has_param(key)) return fallback;
    const std::string v = req.get_param_value(key);
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception &) {
        throw HttpError(400, std::string("query.") + key + ": expected an integer, got '" + v + "'");
    }
}

} // namespace detail

class Service {
public:
    explicit Service(ServiceConfig cfg = {}) : cfg_(std::move(cfg)) { routes(); }

    ~Service() { stop(); }

    Service(const Service &) = delete;
    Service &operator=(const Service &) = delete;

    /// Blocks until stop().
    bool listen() { return server_.listen(cfg_.host, cfg_.port); }

    /// Binds an ephemeral port and serves on a background thread.
    int start_background() {
        const int port = server_.bind_to_any_port(cfg_.host);
        if (port < 0) throw Error("service: cannot bind " + cfg_.host);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port;
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
        std::lock_guard lock(sessions_mu_);
        for (auto &[id, s] : sessions_) {
            std::lock_guard st(s->state);
            if (s->sim) s->sim->cancel();
        }
        sessions_.clear();
    }

    /// Creates a session directly; used by the CLI to preload a scene.
    std::string create_session(Scene scene) {
        auto s = std::make_shared<Session>();
        s->scene = std::make_shared<const Scene>(std::move(scene));
        std::lock_guard lock(sessions_mu_);
        s->id = next_id();
        sessions_[s->id] = s;
        return s->id;
    }

private:
    std::string next_id() {
        char buf[32];
        std::snprintf(buf, sizeof buf, "s%04zu-%08llx", ++counter_, static_cast<unsigned long long>(rng_() & 0xffffffffu));
        return buf;
    }

    std::shared_ptr<Session> find(const std::string &id) {
        std::lock_guard lock(sessions_mu_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw detail::HttpError(404, "unknown session '" + id + "'");
        return it->second;
    }

    template <class Fn> auto guarded(Fn fn) {
        return [fn](const httplib::Request &req, httplib::Response &res) {
            try {
                fn(req, res);
            } catch (const detail::HttpError &e) {
                detail::send_json(res, e.status(), {{"error", e.what()}});
            } catch (const ParseError &e) {
                detail::send_json(res, 400, {{"error", e.what()}});
            } catch (const std::exception &e) {
                detail::send_json(res, 500, {{"error", e.what()}});
            }
        };
    }

    void render_png(const Scene &scene, const httplib::Request &req, httplib::Response &res) {
        const CameraRig rig = scene.rig.value_or(CameraRig{});
        const int w = detail::query_int(req, "width", rig.width);
        const int h = detail::query_int(req, "height", rig.height);
        if (w <= 0 || h <= 0 || w > cfg_.max_render_side || h > cfg_.max_render_side)
            throw detail::HttpError(400, "render: width and height must lie in [1, " +
                                             std::to_string(cfg_.max_render_side) + "]");
        const std::string cam = req.has_param("camera") ? req.get_param_value("camera") : "primary";
        if (cam != "primary" && cam != "mirror")
            throw detail::HttpError(400, "render: camera must be primary or mirror, got '" + cam + "'");
        const Camera c = make_camera(rig, cam == "mirror" ? View::Mirror : View::Primary, w, h);
        res.status = 200;
        res.set_content(encode_png(render(scene, c)), "image/png");
    }

    void routes() {
        server_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
        server_.Options(R"(.*)", [](const httplib::Request &, httplib::Response &res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type, If-None-Match");
            res.status = 204;
        });
        if (!cfg_.static_dir.empty()) server_.set_mount_point("/", cfg_.static_dir);

        server_.Post("/sessions", guarded([this](const httplib::Request &req, httplib::Response &res) {
            const nlohmann::json body = detail::parse_body(req);
            Scene scene;
            if (body.is_object() && body.contains("path")) {
                if (!body["path"].is_string()) throw detail::HttpError(400, "body.path: expected a string");
                scene = scene_load(body["path"].get<std::string>());
            } else {
                scene = scene_from_json(body.is_object() && body.contains("scene") ? body["scene"] : body);
            }
            nlohmann::json summary = detail::scene_summary(scene);
            const std::string id = create_session(std::move(scene));
            detail::send_json(res, 201, {{"id", id}, {"revision", 0}, {"summary", summary}});
        }));

        server_.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            std::lock_guard lock(s->state);
            detail::send_json(res, 200,
                              {{"id", s->id},
                               {"revision", s->revision},
                               {"undo_depth", s->undo.size()},
                               {"summary", detail::scene_summary(*s->scene)}});
        }));

        server_.Delete(R"(/sessions/([^/]+))", guarded([this](const httplib::Request &req, httplib::Response &res) {
            std::shared_ptr<Session> s = find(req.matches[1]);
            {
                std::lock_guard lock(sessions_mu_);
                sessions_.erase(s->id);
            }
            std::lock_guard lock(s->state);
            if (s->sim) s->sim->cancel();
            res.status = 204;
        }));

        server_.Get(R"(/sessions/([^/]+)/scene)", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            std::shared_ptr<const Scene> scene;
            {
                std::lock_guard lock(s->state);
                scene = s->scene;
            }
            res.set_content(scene_to_string(*scene), "application/json");
        }));

        server_.Get(R"(/sessions/([^/]+)/soup)", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            std::shared_ptr<const Scene> scene;
            std::uint64_t rev;
            {
                std::lock_guard lock(s->state);
                scene = s->scene;
                rev = s->revision;
            }
            nlohmann::json faces = nlohmann::json::array();
            for (std::size_t i = 0; i < scene->size(); ++i) {
                const FaceRep f = face_of(*scene, i);
                nlohmann::json tri = nlohmann::json::array();
                for (const Vec3 &v : f.v) tri.push_back({v.x(), v.y(), v.z()});
                faces.push_back(std::move(tri));
            }
            detail::send_json(res, 200, {{"revision", rev}, {"faces", std::move(faces)}});
        }));

        server_.Get(R"(/sessions/([^/]+)/render)", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            std::shared_ptr<const Scene> scene;
            std::uint64_t rev;
            {
                std::lock_guard lock(s->state);
                scene = s->scene;
                rev = s->revision;
            }
            const std::string etag = "\"" + std::to_string(rev) + "\"";
            if (req.get_header_value("If-None-Match") == etag) {
                res.status = 304;
                res.set_header("ETag", etag);
                return;
            }
            render_png(*scene, req, res);
            res.set_header("ETag", etag);
            res.set_header("X-Revision", std::to_string(rev));
        }));

        server_.Post(R"(/sessions/([^/]+)/edits)", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            const nlohmann::json body = detail::parse_body(req);
            const nlohmann::json &list = body.is_array() ? body : body.value("edits", nlohmann::json::array());
            if (!list.is_array()) throw detail::HttpError(400, "body.edits: expected an array");

            std::lock_guard writer(s->writer);
            std::shared_ptr<const Scene> base;
            {
                std::lock_guard lock(s->state);
                base = s->scene;
            }
            if (list.empty()) {
                std::lock_guard lock(s->state);
                detail::send_json(res, 200, {{"revision", s->revision}});
                return;
            }
            std::map<std::size_t, FaceRep> faces;
            for (std::size_t e = 0; e < list.size(); ++e) {
                const std::string path = "edits[" + std::to_string(e) + "]";
                const nlohmann::json &item = list[e];
                if (!item.is_object()) throw detail::HttpError(400, path + ": expected an object");
                const double gi = detail::number(detail::field(item, "gaussian", path), path + ".gaussian");
                const double vk = detail::number(detail::field(item, "vertex", path), path + ".vertex");
                if (gi < 0 || gi != std::floor(gi) || gi >= static_cast<double>(base->size()))
                    throw detail::HttpError(400, path + ".gaussian: index out of range");
                if (vk != 0 && vk != 1 && vk != 2) throw detail::HttpError(400, path + ".vertex: expected 0, 1 or 2");
                const Vec3 p = detail::fixed_vec<3>(detail::field(item, "position", path), path + ".position");
                const auto i = static_cast<std::size_t>(gi);
                auto [it, inserted] = faces.try_emplace(i, face_of(*base, i));
                it->second.v[static_cast<int>(vk)] = p;
            }
            Scene next = *base;
            for (const auto &[i, f] : faces) {
                try {
                    assign_face(next, i, f);
                } catch (const DegenerateTriangleError &e) {
                    throw detail::HttpError(422, e.what());
                } catch (const ValidationError &e) {
                    throw detail::HttpError(409, e.what());
                }
            }
            std::lock_guard lock(s->state);
            s->undo.push_back(s->scene);
            while (s->undo.size() > cfg_.undo_depth) s->undo.pop_front();
            s->scene = std::make_shared<const Scene>(std::move(next));
            ++s->revision;
            detail::send_json(res, 200, {{"revision", s->revision}});
        }));

        server_.Post(R"(/sessions/([^/]+)/undo)", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            std::lock_guard writer(s->writer);
            std::lock_guard lock(s->state);
            if (s->undo.empty()) throw detail::HttpError(409, "undo: nothing to undo");
            s->scene = s->undo.back();
            s->undo.pop_back();
            ++s->revision;
            detail::send_json(res, 200, {{"revision", s->revision}, {"undo_depth", s->undo.size()}});
        }));

        server_.Post(R"(/sessions/([^/]+)/simulate)", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            const nlohmann::json body = req.body.empty() ? nlohmann::json::object() : detail::parse_body(req);
            if (!body.is_object()) throw detail::HttpError(400, "body: expected an object");
            std::lock_guard writer(s->writer);
            std::shared_ptr<const Scene> scene;
            {
                std::lock_guard lock(s->state);
                scene = s->scene;
            }
            if (scene->mode != Mode::TwoD)
                throw detail::HttpError(409, std::string("simulate: needs a 2d scene, session is ") +
                                                 std::string(to_string(scene->mode)));
            MaterialParams mat;
            SimulateOptions opt;
            apply_physics_json(mat, opt, body);
            try {
                if (!body.contains("dt"))
                    mat.dt = mat.max_dt(grid_for(scene->rig.value_or(CameraRig{}), opt.grid_resolution).dx);
                mat.validate(grid_for(scene->rig.value_or(CameraRig{}), opt.grid_resolution).dx);
                if (opt.frames == 0 || opt.substeps == 0)
                    throw ValidationError("simulate: frames and substeps must be >= 1");
            } catch (const ValidationError &e) {
                throw detail::HttpError(400, e.what());
            }
            Scene sim_scene = *scene;
            if (!sim_scene.rig) sim_scene.rig = CameraRig{};
            auto job = std::make_shared<SimulationJob>(std::make_shared<const Scene>(std::move(sim_scene)), mat, opt);
            std::shared_ptr<SimulationJob> old;
            {
                std::lock_guard lock(s->state);
                old = std::move(s->sim);
                s->sim = job;
            }
            if (old) old->cancel();
            detail::send_json(res, 202, {{"state", "running"}, {"requested", opt.frames}, {"dt", mat.dt}});
        }));

        server_.Get(R"(/sessions/([^/]+)/simulate)", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            std::shared_ptr<SimulationJob> job;
            {
                std::lock_guard lock(s->state);
                job = s->sim;
            }
            if (!job) {
                detail::send_json(res, 200, {{"state", "none"}, {"completed", 0}, {"requested", 0}});
                return;
            }
            nlohmann::json out = {{"state", to_string(job->state())},
                                  {"completed", job->completed()},
                                  {"requested", job->requested()}};
            if (job->state() == SimulationJob::State::Failed) out["error"] = job->error();
            detail::send_json(res, 200, out);
        }));

        server_.Get(R"(/sessions/([^/]+)/frames/(\d+))", guarded([this](const httplib::Request &req, httplib::Response &res) {
            auto s = find(req.matches[1]);
            std::shared_ptr<SimulationJob> job;
            {
                std::lock_guard lock(s->state);
                job = s->sim;
            }
            if (!job) throw detail::HttpError(404, "frames: no simulation in this session");
            const std::size_t k = std::stoul(req.matches[2]);
            if (k >= job->requested())
                throw detail::HttpError(404, "frames: frame " + std::to_string(k) + " out of range (requested " +
                                                 std::to_string(job->requested()) + ")");
            if (auto frame = job->frame(k)) {
                render_png(*frame, req, res);
                return;
            }
            const auto state = job->state();
            if (state == SimulationJob::State::Failed)
                throw detail::HttpError(500, "frames: simulation failed: " + job->error());
            if (state == SimulationJob::State::Cancelled)
                throw detail::HttpError(410, "frames: simulation was cancelled before frame " + std::to_string(k));
            detail::send_json(res, 202,
                              {{"state", to_string(state)}, {"completed", job->completed()}, {"requested", job->requested()}});
        }));
    }

    ServiceConfig cfg_;
    httplib::Server server_;
    std::thread thread_;
    std::mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::size_t counter_ = 0;
    std::mt19937_64 rng_{std::random_device{}()};
};

} // namespace mirage
