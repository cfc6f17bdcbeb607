#include "ceusnav/server.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <set>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include "ceusnav/error.hpp"

namespace ceusnav {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using Buffer = std::shared_ptr<const std::vector<std::uint8_t>>;

class Subscriber;

struct SessionServer::Impl {
  ServerOptions options;
  std::unique_ptr<MessageSource> source;
  std::mutex source_mutex;

  asio::io_context ioc;
  asio::executor_work_guard<asio::io_context::executor_type> work{ioc.get_executor()};
  tcp::acceptor tcp_acceptor{ioc};
  tcp::acceptor ws_acceptor{ioc};
  std::thread io_thread;
  std::thread producer;

  std::set<std::shared_ptr<Subscriber>> subscribers;  // io thread only
  bool finished = false;                              // io thread only
  std::vector<LocalSubscriber> locals;

  mutable std::mutex state_mutex;
  std::condition_variable state_cv;
  std::size_t active = 0;
  bool stopping = false;
  bool producer_done = false;
  ServerStats stats;

  void accept_tcp();
  void accept_ws();
  void add(const std::shared_ptr<Subscriber>& s);
  void remove(const std::shared_ptr<Subscriber>& s, const char* reason);
  void subscriber_ready();
  void forward_control(const Message& msg);
  void run_producer();
  void broadcast(const Buffer& buf);
  void finish_all();
};

class Subscriber : public std::enable_shared_from_this<Subscriber> {
 public:
  explicit Subscriber(SessionServer::Impl& hub) : hub_(hub) {}
  virtual ~Subscriber() = default;

  virtual void start() = 0;
  virtual std::string describe() const = 0;

  void deliver(const Buffer& buf) {
    if (closed_) return;
    if (queue_.size() >= hub_.options.backlog) {
      hub_.remove(shared_from_this(), "backlog exceeded");
      return;
    }
    queue_.push_back(buf);
    pump();
  }

  void finish() {
    finishing_ = true;
    pump();
  }

  bool ready() const { return ready_; }

  void close() {
    if (closed_) return;
    closed_ = true;
    do_close();
  }

 protected:
  void pump() {
    if (closed_ || writing_ || !ready_) return;
    if (queue_.empty()) {
      if (finishing_) graceful_close();
      return;
    }
    writing_ = true;
    write(queue_.front());
  }

  void on_written(const boost::system::error_code& ec) {
    writing_ = false;
    if (ec) {
      hub_.remove(shared_from_this(), "write failed");
      return;
    }
    queue_.pop_front();
    pump();
  }

  void on_control_bytes(const Message& msg) {
    if (msg.kind == MessageKind::control) {
      hub_.forward_control(msg);
    } else {
      spdlog::warn("ignoring upstream {} message from {}", static_cast<int>(msg.kind), describe());
    }
  }

  virtual void write(const Buffer& buf) = 0;
  virtual void graceful_close() = 0;
  virtual void do_close() = 0;

  SessionServer::Impl& hub_;
  std::deque<Buffer> queue_;
  bool writing_ = false;
  bool finishing_ = false;
  bool closed_ = false;
  bool ready_ = false;
};

class TcpSubscriber final : public Subscriber {
 public:
  TcpSubscriber(SessionServer::Impl& hub, tcp::socket socket) : Subscriber(hub), socket_(std::move(socket)) {}

  void start() override {
    ready_ = true;
    hub_.subscriber_ready();
    read();
    pump();
  }

  std::string describe() const override {
    boost::system::error_code ec;
    const auto ep = socket_.remote_endpoint(ec);
    return ec ? std::string("tcp subscriber") : "tcp " + ep.address().to_string() + ":" + std::to_string(ep.port());
  }

 private:
  void read() {
    auto self = shared_from_this();
    socket_.async_read_some(asio::buffer(read_buf_), [this, self](boost::system::error_code ec, std::size_t n) {
      if (closed_) return;
      if (ec) {
        if (!finishing_) hub_.remove(self, ec == asio::error::eof ? "disconnected" : "read failed");
        return;
      }
      decoder_.feed(std::span<const std::uint8_t>(read_buf_.data(), n));
      while (auto msg = decoder_.next()) on_control_bytes(*msg);
      read();
    });
  }

  void write(const Buffer& buf) override {
    auto self = shared_from_this();
    asio::async_write(socket_, asio::buffer(*buf),
                      [this, self, buf](boost::system::error_code ec, std::size_t) { on_written(ec); });
  }

  void graceful_close() override {
    boost::system::error_code ec;
    socket_.shutdown(tcp::socket::shutdown_send, ec);
    hub_.remove(shared_from_this(), nullptr);
  }

  void do_close() override {
    boost::system::error_code ec;
    socket_.close(ec);
  }

  tcp::socket socket_;
  std::array<std::uint8_t, 4096> read_buf_{};
  StreamDecoder decoder_;
};

class WsSubscriber final : public Subscriber {
 public:
  WsSubscriber(SessionServer::Impl& hub, tcp::socket socket) : Subscriber(hub), ws_(std::move(socket)) {}

  void start() override {
    auto self = shared_from_this();
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.read_message_max(kMaxPayload + kHeaderSize);
    ws_.async_accept([this, self](beast::error_code ec) {
      if (closed_) return;
      if (ec) {
        hub_.remove(self, "websocket handshake failed");
        return;
      }
      ws_.binary(true);
      ready_ = true;
      hub_.subscriber_ready();
      read();
      pump();
    });
  }

  std::string describe() const override { return "websocket client"; }

 private:
  void read() {
    auto self = shared_from_this();
    ws_.async_read(read_buf_, [this, self](beast::error_code ec, std::size_t) {
      if (closed_) return;
      if (ec) {
        if (!finishing_) hub_.remove(self, ec == websocket::error::closed ? "disconnected" : "read failed");
        return;
      }
      const auto data = read_buf_.cdata();
      std::span<const std::uint8_t> bytes(static_cast<const std::uint8_t*>(data.data()), data.size());
      try {
        on_control_bytes(decode_message(bytes));
      } catch (const Error& e) {
        spdlog::warn("malformed message from {}: {}", describe(), e.what());
      }
      read_buf_.consume(read_buf_.size());
      read();
    });
  }

  void write(const Buffer& buf) override {
    auto self = shared_from_this();
    ws_.async_write(asio::buffer(*buf), [this, self, buf](beast::error_code ec, std::size_t) { on_written(ec); });
  }

  void graceful_close() override {
    if (close_sent_) return;
    close_sent_ = true;
    auto self = shared_from_this();
    ws_.async_close(websocket::close_code::normal, [this, self](beast::error_code) { hub_.remove(self, nullptr); });
  }

  void do_close() override {
    beast::error_code ec;
    beast::get_lowest_layer(ws_).close(ec);
  }

  websocket::stream<tcp::socket> ws_;
  beast::flat_buffer read_buf_;
  bool close_sent_ = false;
};

// ---------------------------------------------------------------------------

void SessionServer::Impl::accept_tcp() {
  tcp_acceptor.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
    if (ec) return;
    socket.set_option(tcp::no_delay(true), ec);
    add(std::make_shared<TcpSubscriber>(*this, std::move(socket)));
    accept_tcp();
  });
}

void SessionServer::Impl::accept_ws() {
  ws_acceptor.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
    if (ec) return;
    socket.set_option(tcp::no_delay(true), ec);
    add(std::make_shared<WsSubscriber>(*this, std::move(socket)));
    accept_ws();
  });
}

void SessionServer::Impl::add(const std::shared_ptr<Subscriber>& s) {
  subscribers.insert(s);
  s->start();
  if (finished) s->finish();
}

void SessionServer::Impl::subscriber_ready() {
  {
    std::lock_guard lock(state_mutex);
    ++active;
    ++stats.subscribers_accepted;
  }
  state_cv.notify_all();
}

void SessionServer::Impl::remove(const std::shared_ptr<Subscriber>& s, const char* reason) {
  if (subscribers.erase(s) == 0) return;
  if (reason) spdlog::warn("dropping {}: {}", s->describe(), reason);
  s->close();
  {
    std::lock_guard lock(state_mutex);
    if (s->ready() && active > 0) --active;
    if (reason) ++stats.subscribers_dropped;
  }
  state_cv.notify_all();
}

void SessionServer::Impl::forward_control(const Message& msg) {
  bool accepted = false;
  {
    std::lock_guard lock(source_mutex);
    accepted = source->on_control(msg);
  }
  {
    std::lock_guard lock(state_mutex);
    ++stats.controls_received;
  }
  const auto* c = std::get_if<ControlPayload>(&msg.payload);
  spdlog::info("control '{}' {}", c ? c->event() : std::string(), accepted ? "forwarded" : "ignored by source");
}

void SessionServer::Impl::broadcast(const Buffer& buf) {
  std::vector<std::shared_ptr<Subscriber>> targets(subscribers.begin(), subscribers.end());
  for (const auto& s : targets) s->deliver(buf);
}

void SessionServer::Impl::finish_all() {
  finished = true;
  std::vector<std::shared_ptr<Subscriber>> targets(subscribers.begin(), subscribers.end());
  for (const auto& s : targets) s->finish();
}

void SessionServer::Impl::run_producer() {
  using clock = std::chrono::steady_clock;
  {
    std::unique_lock lock(state_mutex);
    state_cv.wait(lock, [&] { return stopping || active >= options.wait_for_subscribers; });
    if (stopping) return;
  }

  std::optional<clock::time_point> wall0;
  std::uint64_t ts0 = 0;
  clock::time_point last = clock::now();
  std::vector<std::uint8_t> bytes;
  try {
    for (;;) {
      std::optional<Message> msg;
      {
        std::lock_guard lock(source_mutex);
        msg = source->next();
      }
      if (!msg) break;
      if (!wall0) {
        wall0 = clock::now();
        ts0 = msg->timestamp_us;
      } else if (!options.max_speed) {
        const double dt = static_cast<double>(msg->timestamp_us - std::min(ts0, msg->timestamp_us)) * 1e-6 / options.speed;
        const auto target = *wall0 + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(dt));
        std::unique_lock lock(state_mutex);
        if (state_cv.wait_until(lock, target, [&] { return stopping; })) break;
      }
      {
        std::lock_guard lock(state_mutex);
        if (stopping) break;
      }
      bytes.clear();
      encode_message(*msg, bytes);
      for (const auto& local : locals) local(*msg, bytes);
      auto buf = std::make_shared<const std::vector<std::uint8_t>>(bytes);
      asio::post(ioc, [this, buf] { broadcast(buf); });
      last = clock::now();
      std::lock_guard lock(state_mutex);
      ++stats.messages;
    }
  } catch (const std::exception& e) {
    spdlog::error("source failed: {}", e.what());
  }
  {
    std::lock_guard lock(state_mutex);
    stats.elapsed_s = wall0 ? std::chrono::duration<double>(last - *wall0).count() : 0.0;
    producer_done = true;
  }
  asio::post(ioc, [this] { finish_all(); });
  state_cv.notify_all();
}

// ---------------------------------------------------------------------------

namespace {

void bind_endpoint(tcp::acceptor& acceptor, const std::string& address, std::uint16_t port) {
  try {
    const tcp::endpoint ep(asio::ip::make_address(address), port);
    acceptor.open(ep.protocol());
    acceptor.set_option(tcp::acceptor::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen();
  } catch (const boost::system::system_error& e) {
    throw Error(ErrorCode::bind, "cannot bind " + address + ":" + std::to_string(port) + ": " + e.what());
  }
}

}  // namespace

SessionServer::SessionServer(std::unique_ptr<MessageSource> source, ServerOptions options)
    : impl_(std::make_unique<Impl>()) {
  if (!source) throw Error(ErrorCode::config, "server needs a source");
  if (!(options.speed > 0.0)) throw Error(ErrorCode::config, "speed must be positive");
  if (options.backlog == 0) throw Error(ErrorCode::config, "backlog must be at least 1");
  impl_->options = std::move(options);
  impl_->source = std::move(source);
  bind_endpoint(impl_->tcp_acceptor, impl_->options.address, impl_->options.tcp_port);
  if (impl_->options.enable_ws) bind_endpoint(impl_->ws_acceptor, impl_->options.address, impl_->options.ws_port);
}

SessionServer::~SessionServer() { stop(); }

std::uint16_t SessionServer::tcp_port() const { return impl_->tcp_acceptor.local_endpoint().port(); }

std::uint16_t SessionServer::ws_port() const {
  return impl_->ws_acceptor.is_open() ? impl_->ws_acceptor.local_endpoint().port() : 0;
}

void SessionServer::add_local_subscriber(LocalSubscriber subscriber) {
  if (impl_->producer.joinable()) throw Error(ErrorCode::config, "local subscribers must be added before start()");
  impl_->locals.push_back(std::move(subscriber));
}

void SessionServer::start() {
  if (impl_->io_thread.joinable()) return;
  impl_->accept_tcp();
  if (impl_->ws_acceptor.is_open()) impl_->accept_ws();
  impl_->io_thread = std::thread([this] { impl_->ioc.run(); });
  impl_->producer = std::thread([this] { impl_->run_producer(); });
}

void SessionServer::wait() {
  if (impl_->producer.joinable()) impl_->producer.join();
  {
    std::unique_lock lock(impl_->state_mutex);
    impl_->state_cv.wait_for(lock, impl_->options.drain_timeout, [&] { return impl_->active == 0; });
  }
  stop();
}

void SessionServer::stop() {
  {
    std::lock_guard lock(impl_->state_mutex);
    impl_->stopping = true;
  }
  impl_->state_cv.notify_all();
  if (impl_->producer.joinable()) impl_->producer.join();
  if (impl_->io_thread.joinable()) {
    asio::post(impl_->ioc, [this] {
      boost::system::error_code ec;
      impl_->tcp_acceptor.close(ec);
      impl_->ws_acceptor.close(ec);
      for (const auto& s : impl_->subscribers) s->close();
      impl_->subscribers.clear();
    });
    asio::post(impl_->ioc, [this] { impl_->ioc.stop(); });
    impl_->work.reset();
    impl_->io_thread.join();
  }
}

bool SessionServer::wait_for_subscribers(std::size_t n, std::chrono::milliseconds timeout) {
  std::unique_lock lock(impl_->state_mutex);
  return impl_->state_cv.wait_for(lock, timeout, [&] { return impl_->active >= n; });
}

std::size_t SessionServer::subscriber_count() const {
  std::lock_guard lock(impl_->state_mutex);
  return impl_->active;
}

bool SessionServer::source_finished() const {
  std::lock_guard lock(impl_->state_mutex);
  return impl_->producer_done;
}

ServerStats SessionServer::stats() const {
  std::lock_guard lock(impl_->state_mutex);
  return impl_->stats;
}

}  // namespace ceusnav
