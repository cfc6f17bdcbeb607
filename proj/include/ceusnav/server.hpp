#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>

#include "ceusnav/source.hpp"

namespace ceusnav {

struct ServerOptions {
  std::string address = "127.0.0.1";
  std::uint16_t tcp_port = 0;  // 0 picks an ephemeral port
  std::uint16_t ws_port = 0;
  bool enable_ws = true;
  bool max_speed = false;  // ignore timestamps when pacing
  double speed = 1.0;      // pacing multiplier
  std::size_t backlog = 64;  // per-subscriber queued messages before it is dropped
  std::size_t wait_for_subscribers = 0;  // network subscribers required before streaming
  std::chrono::milliseconds drain_timeout{5000};
};

struct ServerStats {
  std::size_t messages = 0;
  std::size_t subscribers_accepted = 0;
  std::size_t subscribers_dropped = 0;
  std::size_t controls_received = 0;
  double elapsed_s = 0.0;  // first to last message, wall clock
};

/// Streams a source to raw-TCP subscribers and WebSocket clients. Every
/// message is broadcast in source order; each WebSocket binary message holds
/// exactly one encoded message. Control messages received from any client
/// are forwarded to the source.
class SessionServer {
 public:
  using LocalSubscriber = std::function<void(const Message&, std::span<const std::uint8_t> encoded)>;

  /// Binds both endpoints; bind failures raise ErrorCode::bind.
  SessionServer(std::unique_ptr<MessageSource> source, ServerOptions options);
  ~SessionServer();
  SessionServer(const SessionServer&) = delete;
  SessionServer& operator=(const SessionServer&) = delete;

  std::uint16_t tcp_port() const;
  std::uint16_t ws_port() const;

  /// In-process subscriber called on the producer thread (e.g. a recorder).
  /// Register before start().
  void add_local_subscriber(LocalSubscriber subscriber);

  void start();
  /// Blocks until the source is exhausted and subscribers have drained.
  void wait();
  void stop();
  bool wait_for_subscribers(std::size_t n, std::chrono::milliseconds timeout);
  std::size_t subscriber_count() const;
  /// True once the source is exhausted (subscribers may still be draining).
  bool source_finished() const;
  ServerStats stats() const;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace ceusnav
