#include <gtest/gtest.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <chrono>
#include <future>
#include <thread>
#include <vector>

#include "ceusnav/error.hpp"
#include "ceusnav/server.hpp"
#include "oracles.hpp"

using namespace ceusnav;
namespace asio = boost::asio;
namespace beast = boost::beast;
using tcp = asio::ip::tcp;

namespace {

// Reads everything a TCP subscriber receives until the server closes.
std::vector<std::uint8_t> tcp_drain(std::uint16_t port) {
  asio::io_context ioc;
  tcp::socket sock(ioc);
  sock.connect({asio::ip::make_address("127.0.0.1"), port});
  std::vector<std::uint8_t> all;
  std::array<std::uint8_t, 65536> buf{};
  boost::system::error_code ec;
  for (;;) {
    const auto n = sock.read_some(asio::buffer(buf), ec);
    all.insert(all.end(), buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n));
    if (ec) break;
  }
  return all;
}

using WsStream = beast::websocket::stream<tcp::socket>;

void ws_connect(WsStream& ws, std::uint16_t port) {
  beast::get_lowest_layer(ws).connect({asio::ip::make_address("127.0.0.1"), port});
  ws.handshake("127.0.0.1:" + std::to_string(port), "/");
  ws.binary(true);
}

// One decoded message per WebSocket message, until the server closes.
std::vector<std::vector<std::uint8_t>> ws_drain(WsStream& ws) {
  std::vector<std::vector<std::uint8_t>> out;
  for (;;) {
    beast::flat_buffer buf;
    boost::system::error_code ec;
    ws.read(buf, ec);
    if (ec) break;
    const auto data = static_cast<const std::uint8_t*>(buf.data().data());
    out.emplace_back(data, data + buf.size());
  }
  return out;
}

SessionLog tracker_log(double seconds, double rate_hz) {
  SessionLog log;
  log.config = make_session_header({}, 1);
  const int n = static_cast<int>(seconds * rate_hz);
  for (int i = 0; i <= n; ++i) {
    TrackedSample s;
    s.timestamp = i / rate_hz;
    s.marker_pose = RigidTransform::from_translation(Vec3(i, 0, 0));
    log.messages.push_back(make_tracker(s));
  }
  return log;
}

}  // namespace

TEST(Server, SubscribersReceiveIdenticalStreams) {
  std::mt19937_64 rng(5);
  SessionLog log;
  for (int i = 0; i < 300; ++i) {
    auto m = oracle::random_message(rng);
    m.timestamp_us = static_cast<std::uint64_t>(i);
    log.messages.push_back(std::move(m));
  }
  std::vector<std::uint8_t> expected;
  for (const auto& m : log.messages) encode_message(m, expected);

  ServerOptions opt;
  opt.max_speed = true;
  opt.backlog = 1000;
  opt.wait_for_subscribers = 3;
  SessionServer server(std::make_unique<ReplaySource>(log), opt);
  server.start();
  auto a = std::async(std::launch::async, tcp_drain, server.tcp_port());
  auto b = std::async(std::launch::async, tcp_drain, server.tcp_port());
  auto c = std::async(std::launch::async, [port = server.ws_port()] {
    asio::io_context ioc;
    WsStream ws(ioc);
    ws_connect(ws, port);
    return ws_drain(ws);
  });
  const auto ra = a.get(), rb = b.get();
  const auto rc = c.get();
  server.wait();
  EXPECT_EQ(ra, expected);
  EXPECT_EQ(rb, expected);

  // WebSocket: exactly one encoded message per binary frame, same order.
  ASSERT_EQ(rc.size(), log.messages.size());
  for (std::size_t i = 0; i < rc.size(); ++i) ASSERT_EQ(decode_message(rc[i]), log.messages[i]);
  EXPECT_EQ(server.stats().messages, log.messages.size());
  EXPECT_EQ(server.stats().subscribers_dropped, 0u);
}

TEST(Server, RealTimePacing) {
  ServerOptions opt;
  opt.enable_ws = false;
  SessionServer server(std::make_unique<ReplaySource>(tracker_log(10.0, 20.0)), opt);
  const auto t0 = std::chrono::steady_clock::now();
  server.start();
  server.wait();
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_NEAR(elapsed, 10.0, 0.5);
  EXPECT_NEAR(server.stats().elapsed_s, 10.0, 0.5);
}

TEST(Server, WebSocketFlashReachesSimulation) {
  SimulationConfig cfg;
  cfg.render.image_grid = {{32, 32, 32}, {1, 1, 1}};
  cfg.duration_s = 4.0;
  cfg.auto_flash = false;
  cfg.seed = 3;
  auto source = std::make_unique<LiveSimulationSource>(cfg);
  const LiveSimulationSource* live = source.get();

  ServerOptions opt;
  opt.wait_for_subscribers = 1;
  opt.backlog = 10000;
  SessionServer server(std::move(source), opt);
  server.start();

  asio::io_context ioc;
  WsStream ws(ioc);
  ws_connect(ws, server.ws_port());
  ASSERT_TRUE(server.wait_for_subscribers(1, std::chrono::seconds(5)));
  // Let the session run for a moment so the flash lands mid-session.
  beast::flat_buffer first;
  ws.read(first);
  std::this_thread::sleep_for(std::chrono::milliseconds(1500));
  const auto flash = encode_message(make_control(0, control_event::flash));
  ws.write(asio::buffer(flash));
  const auto rest = ws_drain(ws);
  server.wait();

  ASSERT_EQ(live->flash_times().size(), 1u);
  const double tf = live->flash_times()[0];
  EXPECT_GT(tf, 0.5);
  EXPECT_LE(tf, cfg.duration_s);
  EXPECT_EQ(server.stats().controls_received, 1u);

  // The control is echoed into the stream at the session time it took effect.
  bool echoed = false;
  for (const auto& bytes : rest) {
    const auto m = decode_message(bytes);
    if (m.kind == MessageKind::control && std::get<ControlPayload>(m.payload).event() == "flash") {
      EXPECT_EQ(m.timestamp_us, to_timestamp_us(tf));
      echoed = true;
    }
  }
  EXPECT_TRUE(echoed);
}

TEST(Server, SlowSubscriberIsDropped) {
  SessionLog log;
  VolumeFrame f;
  f.grid = {{64, 64, 64}, {1, 1, 1}};
  f.voxels.assign(f.grid.voxel_count(), 3);
  for (int i = 0; i < 200; ++i) {
    f.timestamp = i * 1e-3;
    log.messages.push_back(make_frame(f));
  }
  ServerOptions opt;
  opt.max_speed = true;
  opt.enable_ws = false;
  opt.backlog = 4;
  opt.wait_for_subscribers = 1;
  opt.drain_timeout = std::chrono::milliseconds(2000);
  SessionServer server(std::make_unique<ReplaySource>(log), opt);
  server.start();

  asio::io_context ioc;
  tcp::socket idle(ioc);  // connects, never reads
  idle.connect({asio::ip::make_address("127.0.0.1"), server.tcp_port()});
  server.wait();
  EXPECT_TRUE(server.source_finished());
  EXPECT_EQ(server.stats().messages, 200u);
  EXPECT_EQ(server.stats().subscribers_dropped, 1u);
}

TEST(Server, BindFailure) {
  ServerOptions opt;
  opt.enable_ws = false;
  SessionServer first(std::make_unique<ReplaySource>(SessionLog{}), opt);
  opt.tcp_port = first.tcp_port();
  try {
    SessionServer second(std::make_unique<ReplaySource>(SessionLog{}), opt);
    FAIL() << "second bind succeeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::bind);
  }
}

TEST(Server, LocalSubscriberRecordsSession) {
  oracle::TempDir dir;
  const auto log = tracker_log(1.0, 50.0);
  ServerOptions opt;
  opt.max_speed = true;
  opt.enable_ws = false;
  SessionServer server(std::make_unique<ReplaySource>(log), opt);
  SessionRecorder rec(dir / "r.snav", log.config);
  server.add_local_subscriber([&](const Message&, std::span<const std::uint8_t> bytes) { rec.append_encoded(bytes); });
  server.start();
  server.wait();
  rec.finish();
  EXPECT_EQ(read_session(dir / "r.snav").messages, log.messages);
}
