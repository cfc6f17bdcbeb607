// ceusnav: simulate, stream, record and quantify tracked contrast sessions.

#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <boost/asio.hpp>
#include <spdlog/spdlog.h>

#include "ceusnav/error.hpp"
#include "ceusnav/harness.hpp"
#include "ceusnav/server.hpp"

using namespace ceusnav;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::config, "cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, "config " + path + " is not valid JSON: " + e.what());
  }
}

/// Flags first, then the config file on top: file values win.
json layered(json flags, const std::string& config_path) {
  if (!config_path.empty()) flags.merge_patch(load_json(config_path));
  return flags;
}

void setup_logging(bool json_logs, const std::string& level) {
  if (json_logs) {
    spdlog::set_pattern(R"({"time":"%Y-%m-%dT%H:%M:%S.%e","level":"%l","msg":"%v"})");
  } else {
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  }
  spdlog::set_level(spdlog::level::from_str(level));
}

struct SimFlags {
  std::string config;
  double duration = 0;
  std::uint64_t seed = 0;
  std::string motion;
  double noise = -1;
  double frame_rate = 0;
  std::vector<double> flashes;
  bool no_tracker = false;

  void add(CLI::App* app) {
    app->add_option("--config", config, "simulation config JSON (overrides flags)");
    app->add_option("--duration", duration, "session length, s");
    app->add_option("--seed", seed, "simulation seed");
    app->add_option("--motion", motion, "motion model kind")
        ->check(CLI::IsMember({"hold_bmode", "hold_tracked", "hold_blind", "reposition", "breathing"}));
    app->add_option("--noise", noise, "speckle noise SD (fraction)");
    app->add_option("--frame-rate", frame_rate, "volume rate, Hz");
    app->add_option("--flash", flashes, "fixed flash times, s (disables auto flash)");
    app->add_flag("--no-tracker", no_tracker, "omit tracker messages");
  }

  SimulationConfig build() const {
    json j = json::object();
    if (duration > 0) j["duration_s"] = duration;
    if (seed) j["seed"] = seed;
    if (!motion.empty()) j["motion"] = {{"kind", motion}, {"seed", seed}};
    if (noise >= 0) j["render"] = {{"noise_sd", noise}};
    if (frame_rate > 0) j["frame_rate_hz"] = frame_rate;
    if (!flashes.empty()) {
      j["flash_times"] = flashes;
      j["auto_flash"] = false;
    }
    if (no_tracker) j["emit_tracker"] = false;
    return simulation_config_from_json(layered(j, config));
  }
};

int cmd_simulate(const SimFlags& flags, const std::string& out) {
  LiveSimulationSource source(flags.build());
  SessionRecorder recorder(out, source.header());
  while (auto m = source.next()) recorder.append(*m);
  recorder.finish();
  spdlog::info("wrote {} messages to {}; flashes at {}", recorder.message_count(), out,
               json(source.flash_times()).dump());
  return 0;
}

std::atomic<bool> g_interrupted{false};

int cmd_serve(const SimFlags& sim, const std::string& replay, ServerOptions options, const std::string& record) {
  std::unique_ptr<MessageSource> source;
  if (!replay.empty()) {
    source = std::make_unique<ReplaySource>(replay);
  } else {
    source = std::make_unique<LiveSimulationSource>(sim.build());
  }
  const json header = source->header();
  SessionServer server(std::move(source), options);
  std::unique_ptr<SessionRecorder> recorder;
  if (!record.empty()) {
    recorder = std::make_unique<SessionRecorder>(record, header);
    server.add_local_subscriber([&](const Message&, std::span<const std::uint8_t> bytes) { recorder->append_encoded(bytes); });
  }
  spdlog::info("serving on tcp {} and websocket {}", server.tcp_port(), server.ws_port());
  std::signal(SIGINT, [](int) { g_interrupted = true; });
  std::signal(SIGTERM, [](int) { g_interrupted = true; });
  server.start();
  while (!g_interrupted && !server.source_finished()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  if (g_interrupted) {
    server.stop();
  } else {
    server.wait();
  }
  const auto stats = server.stats();
  if (recorder) recorder->finish();
  spdlog::info("streamed {} messages in {:.2f} s; {} subscribers, {} dropped, {} controls", stats.messages,
               stats.elapsed_s, stats.subscribers_accepted, stats.subscribers_dropped, stats.controls_received);
  return 0;
}

int cmd_record(const std::string& host, std::uint16_t port, const std::string& out, double timeout_s) {
  namespace asio = boost::asio;
  asio::io_context ioc;
  asio::ip::tcp::socket socket(ioc);
  try {
    asio::ip::tcp::resolver resolver(ioc);
    asio::connect(socket, resolver.resolve(host, std::to_string(port)));
  } catch (const boost::system::system_error& e) {
    throw Error(ErrorCode::io, "cannot connect to " + host + ":" + std::to_string(port) + ": " + e.what());
  }
  json header = {{"source", host + ":" + std::to_string(port)}, {"protocol_version", kProtocolVersion}};
  SessionRecorder recorder(out, header);
  StreamDecoder decoder;
  std::array<std::uint8_t, 65536> buf{};
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  for (;;) {
    boost::system::error_code ec;
    const std::size_t n = socket.read_some(asio::buffer(buf), ec);
    if (ec == asio::error::eof) break;
    if (ec) throw Error(ErrorCode::io, "stream read failed: " + ec.message());
    decoder.feed(std::span<const std::uint8_t>(buf.data(), n));
    while (auto m = decoder.next()) recorder.append(*m);
    if (timeout_s > 0 && std::chrono::steady_clock::now() > deadline) break;
  }
  recorder.finish();
  if (decoder.error_count() > 0) spdlog::warn("skipped {} malformed segments", decoder.error_count());
  spdlog::info("recorded {} messages to {}", recorder.message_count(), out);
  return 0;
}

int cmd_replay(const std::string& path, bool lines) {
  SessionReader reader(path);
  std::size_t frames = 0, trackers = 0, controls = 0, dropouts = 0;
  double last = 0.0;
  if (lines) std::cout << json({{"header", reader.config()}}).dump() << "\n";
  while (auto m = reader.next()) {
    last = m->time_s();
    switch (m->kind) {
      case MessageKind::frame: ++frames; break;
      case MessageKind::tracker:
        ++trackers;
        dropouts += std::get<TrackerPayload>(m->payload).dropout ? 1 : 0;
        break;
      case MessageKind::control: ++controls; break;
    }
    if (!lines) continue;
    json row = {{"t_us", m->timestamp_us}};
    if (const auto* c = std::get_if<ControlPayload>(&m->payload)) {
      row["kind"] = "control";
      for (const auto& [k, v] : c->fields) row[k] = v;
    } else if (const auto* t = std::get_if<TrackerPayload>(&m->payload)) {
      row["kind"] = "tracker";
      row["pose"] = to_json(t->pose);
      row["quality"] = t->quality;
      row["dropout"] = t->dropout;
    } else {
      const auto& f = std::get<FramePayload>(m->payload);
      row["kind"] = "frame";
      row["dims"] = f.dims;
      row["pose"] = f.pose ? to_json(*f.pose) : json(nullptr);
    }
    std::cout << row.dump() << "\n";
  }
  if (!lines) {
    std::cout << json({{"frames", frames}, {"tracker", trackers}, {"dropouts", dropouts}, {"control", controls},
                       {"last_time_s", last}})
                     .dump()
              << "\n";
  }
  return 0;
}

int cmd_quantify(const std::vector<std::string>& files, const std::string& config, const std::string& out,
                 bool realign, double span, double window, double tolerance) {
  json flags = json::object();
  if (span > 0) flags["fit_span_s"] = span;
  if (window > 0) flags["steady_window_s"] = window;
  if (tolerance > 0) flags["steady_slope_tolerance"] = tolerance;
  if (realign) flags["realign"] = true;
  const json j = layered(flags, config);
  QuantifyOptions q;
  try {
    q.realign = j.value("realign", false);
    q.fit_span_s = j.value("fit_span_s", q.fit_span_s);
    q.steady.window_s = j.value("steady_window_s", q.steady.window_s);
    q.steady.slope_tolerance = j.value("steady_slope_tolerance", q.steady.slope_tolerance);
    q.voi_shrink = j.value("voi_shrink", q.voi_shrink);
    q.dynamic_range_db = j.value("dynamic_range_db", q.dynamic_range_db);
    if (j.contains("voi")) q.voi = voi_from_json(j.at("voi"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed quantify config: ") + e.what());
  }
  std::vector<std::filesystem::path> paths(files.begin(), files.end());
  const auto csv = quantify_csv(quantify_batch(paths, q));
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  return 0;
}

int cmd_operator_study(const std::string& config, const std::string& out, std::size_t operators, double duration,
                       std::uint64_t seed, bool no_traces) {
  json flags = json::object();
  if (operators) flags["operators"] = operators;
  if (duration > 0) flags["duration_s"] = duration;
  if (seed) flags["seed"] = seed;
  const auto cfg = operator_study_config_from_json(layered(flags, config));
  const auto result = run_operator_study(cfg);
  write_operator_study(result, cfg, out, !no_traces);
  std::cout << operator_summary_csv(result);
  return 0;
}

int cmd_repeatability(const std::string& config, const std::string& out, std::size_t patients, std::uint64_t seed,
                      bool zero_motion, bool zero_noise) {
  json flags = json::object();
  if (patients) flags["patients"] = patients;
  if (seed) flags["seed"] = seed;
  if (zero_motion) {
    flags["base"]["motion"] = {{"kind", "breathing"}, {"breathing_amplitude_mm", 0.0}, {"drift_rate_mm_per_min", 0.0},
                               {"jitter_sd_mm", 0.0}, {"rot_jitter_sd_deg", 0.0}};
    flags["base"]["tracker"] = {{"trans_sd_mm", 0.0}, {"rot_sd_deg", 0.0}, {"dropout_prob", 0.0}};
  }
  if (zero_noise) flags["base"]["render"] = {{"noise_sd", 0.0}};
  const auto cfg = repeatability_config_from_json(layered(flags, config));
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = run_repeatability(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out.empty()) {
    write_text(std::filesystem::path(out) / "icc.csv", repeatability_csv(report));
    write_text(std::filesystem::path(out) / "fits.csv", repeatability_fits_csv(report));
    write_text(std::filesystem::path(out) / "report.json", to_json(report).dump(2) + "\n");
    write_text(std::filesystem::path(out) / "config.json", to_json(cfg).dump(2) + "\n");
  }
  std::cout << repeatability_csv(report);
  spdlog::info("repeatability over {} patients took {:.1f} s", cfg.patients, secs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tracked 4D contrast ultrasound workbench"};
  app.require_subcommand(1);
  bool json_logs = false;
  std::string log_level = "info";
  app.add_flag("--json", json_logs, "machine-readable JSON log lines");
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  SimFlags sim;
  std::string out;

  auto* simulate = app.add_subcommand("simulate", "simulate a session and write a session file");
  sim.add(simulate);
  simulate->add_option("-o,--out", out, "session file")->required();

  auto* serve = app.add_subcommand("serve", "stream a simulated or recorded session");
  SimFlags serve_sim;
  serve_sim.add(serve);
  std::string replay_path, record_path;
  ServerOptions server_options;
  serve->add_option("--replay", replay_path, "serve a recorded session instead of simulating");
  serve->add_option("--address", server_options.address, "bind address");
  serve->add_option("--tcp-port", server_options.tcp_port, "raw TCP port (0 = ephemeral)");
  serve->add_option("--ws-port", server_options.ws_port, "WebSocket port (0 = ephemeral)");
  serve->add_flag("--max-speed", server_options.max_speed, "ignore timestamps when pacing");
  serve->add_option("--speed", server_options.speed, "pacing multiplier");
  serve->add_option("--backlog", server_options.backlog, "per-subscriber queue limit");
  serve->add_option("--wait-for", server_options.wait_for_subscribers, "subscribers required before streaming");
  serve->add_option("--record", record_path, "also record the stream to this file");

  auto* record = app.add_subcommand("record", "record a served stream to a session file");
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  double record_timeout = 0;
  record->add_option("--host", host, "server host");
  record->add_option("--port", port, "server TCP port")->required();
  record->add_option("-o,--out", out, "session file")->required();
  record->add_option("--timeout", record_timeout, "stop after this many seconds (0 = until the stream ends)");

  auto* replay = app.add_subcommand("replay", "decode a session file");
  std::string replay_file;
  bool replay_lines = false;
  replay->add_option("file", replay_file, "session file")->required();
  replay->add_flag("--lines", replay_lines, "print one JSON line per message");

  auto* quantify = app.add_subcommand("quantify", "fit replenishment curves in session files");
  std::vector<std::string> files;
  std::string quant_config;
  bool realign = false;
  double span = 0, window = 0, tolerance = 0;
  quantify->add_option("files", files, "session files")->required();
  quantify->add_option("--config", quant_config, "quantification config JSON (overrides flags)");
  quantify->add_flag("--realign", realign, "re-align frames on tracked poses first");
  quantify->add_option("--span", span, "fit span after each flash, s");
  quantify->add_option("--window", window, "steady-state window, s");
  quantify->add_option("--tolerance", tolerance, "steady-state slope tolerance, fraction/s");
  quantify->add_option("-o,--out", out, "CSV output (default stdout)");

  auto* op_study = app.add_subcommand("operator-study", "simulated probe-holding study");
  std::string study_config;
  std::size_t operators = 0;
  double duration = 0;
  std::uint64_t seed = 0;
  bool no_traces = false;
  op_study->add_option("--config", study_config, "study config JSON (overrides flags)");
  op_study->add_option("-o,--out", out, "output directory")->required();
  op_study->add_option("--operators", operators, "simulated operators");
  op_study->add_option("--duration", duration, "hold duration, s");
  op_study->add_option("--seed", seed, "study seed");
  op_study->add_flag("--no-traces", no_traces, "skip per-run trace CSVs");

  auto* repeat = app.add_subcommand("repeatability", "R1/R2 repeatability with and without re-alignment");
  std::size_t patients = 0;
  bool zero_motion = false, zero_noise = false;
  repeat->add_option("--config", study_config, "study config JSON (overrides flags)");
  repeat->add_option("-o,--out", out, "output directory");
  repeat->add_option("--patients", patients, "virtual patients");
  repeat->add_option("--seed", seed, "study seed");
  repeat->add_flag("--zero-motion", zero_motion, "no probe motion and an ideal tracker");
  repeat->add_flag("--zero-noise", zero_noise, "no speckle noise");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }
  setup_logging(json_logs, log_level);

  try {
    if (*simulate) return cmd_simulate(sim, out);
    if (*serve) return cmd_serve(serve_sim, replay_path, server_options, record_path);
    if (*record) return cmd_record(host, port, out, record_timeout);
    if (*replay) return cmd_replay(replay_file, replay_lines);
    if (*quantify) return cmd_quantify(files, quant_config, out, realign, span, window, tolerance);
    if (*op_study) return cmd_operator_study(study_config, out, operators, duration, seed, no_traces);
    if (*repeat) return cmd_repeatability(study_config, out, patients, seed, zero_motion, zero_noise);
  } catch (const Error& e) {
    spdlog::error("{}: {}", to_string(e.code()), e.what());
    return e.code() == ErrorCode::config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
