#pragma once

// Byte-identical transports: both the in-process channel and the TCP socket
// channel move the same encoded frames, so a training trajectory does not
// depend on which one carried it.

#include <functional>
#include <memory>

#include <json.hpp>

namespace fedcausal {

// Observes raw frames as they pass through a channel (used by protocol tests
// to prove no raw payload leaks onto the wire).
using FrameTap = std::function<void(bool outgoing, const std::vector<std::uint8_t>& frame)>;

class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const nlohmann::json& msg) = 0;
  virtual nlohmann::json recv() = 0;  // blocks; throws ProtocolError on timeout/close
  virtual void close() = 0;

  void set_tap(FrameTap tap) { tap_ = std::move(tap); }
  void set_timeout_ms(int ms) { timeout_ms_ = ms; }

 protected:
  FrameTap tap_;
  int timeout_ms_ = 120000;
};

// A connected pair of in-process endpoints.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_inproc_pair();

class SocketServer {
 public:
  explicit SocketServer(int port);  // 0 picks an ephemeral port
  ~SocketServer();
  int port() const { return port_; }
  std::unique_ptr<Channel> accept_connection();

 private:
  int listen_fd_ = -1;
  int port_ = 0;
};

std::unique_ptr<Channel> socket_connect(const std::string& host, int port);

}  // namespace fedcausal
