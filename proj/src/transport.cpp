#include "fedcausal/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>

#include "fedcausal/errors.hpp"
#include "fedcausal/messages.hpp"

namespace fedcausal {

namespace {

struct InprocQueue {
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<std::vector<std::uint8_t>> frames;
  bool closed = false;
};

class InprocChannel : public Channel {
 public:
  InprocChannel(std::shared_ptr<InprocQueue> out, std::shared_ptr<InprocQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}

  void send(const nlohmann::json& msg) override {
    auto frame = encode_frame(msg);
    if (tap_) tap_(true, frame);
    std::lock_guard<std::mutex> lock(out_->mutex);
    if (out_->closed) throw ProtocolError("send on closed channel");
    out_->frames.push_back(std::move(frame));
    out_->cv.notify_all();
  }

  nlohmann::json recv() override {
    std::unique_lock<std::mutex> lock(in_->mutex);
    if (!in_->cv.wait_for(lock, std::chrono::milliseconds(timeout_ms_),
                          [&] { return !in_->frames.empty() || in_->closed; }))
      throw ProtocolError("recv timeout");
    if (in_->frames.empty()) throw ProtocolError("channel closed");
    auto frame = std::move(in_->frames.front());
    in_->frames.pop_front();
    lock.unlock();
    if (tap_) tap_(false, frame);
    return decode_frame(frame);
  }

  void close() override {
    for (auto& q : {out_, in_}) {
      std::lock_guard<std::mutex> lock(q->mutex);
      q->closed = true;
      q->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<InprocQueue> out_, in_;
};

class SocketChannel : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {}
  ~SocketChannel() override { close(); }

  void send(const nlohmann::json& msg) override {
    auto frame = encode_frame(msg);
    if (tap_) tap_(true, frame);
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) throw ProtocolError("socket send failed");
      sent += static_cast<std::size_t>(n);
    }
  }

  nlohmann::json recv() override {
    apply_timeout();
    std::vector<std::uint8_t> header = read_exact(4);
    const std::uint32_t len = (static_cast<std::uint32_t>(header[0]) << 24) |
                              (static_cast<std::uint32_t>(header[1]) << 16) |
                              (static_cast<std::uint32_t>(header[2]) << 8) |
                              static_cast<std::uint32_t>(header[3]);
    std::vector<std::uint8_t> body = read_exact(len);
    std::vector<std::uint8_t> frame = std::move(header);
    frame.insert(frame.end(), body.begin(), body.end());
    if (tap_) tap_(false, frame);
    return decode_frame(frame);
  }

  void close() override {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  void apply_timeout() const {
    timeval tv;
    tv.tv_sec = timeout_ms_ / 1000;
    tv.tv_usec = (timeout_ms_ % 1000) * 1000;
    setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  }

  std::vector<std::uint8_t> read_exact(std::size_t count) {
    std::vector<std::uint8_t> buf(count);
    std::size_t got = 0;
    while (got < count) {
      const ssize_t n = ::recv(fd_, buf.data() + got, count - got, 0);
      if (n == 0) throw ProtocolError("peer closed connection");
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) throw ProtocolError("recv timeout");
        throw ProtocolError("socket recv failed");
      }
      got += static_cast<std::size_t>(n);
    }
    return buf;
  }

  int fd_;
};

}  // namespace

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_inproc_pair() {
  auto a_to_b = std::make_shared<InprocQueue>();
  auto b_to_a = std::make_shared<InprocQueue>();
  return {std::make_unique<InprocChannel>(a_to_b, b_to_a),
          std::make_unique<InprocChannel>(b_to_a, a_to_b)};
}

SocketServer::SocketServer(int port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw ProtocolError("cannot create socket");
  int yes = 1;
  setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
    throw ProtocolError("cannot bind port " + std::to_string(port));
  if (::listen(listen_fd_, 64) != 0) throw ProtocolError("cannot listen");
  socklen_t len = sizeof(addr);
  getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

SocketServer::~SocketServer() {
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

std::unique_ptr<Channel> SocketServer::accept_connection() {
  const int fd = ::accept(listen_fd_, nullptr, nullptr);
  if (fd < 0) throw ProtocolError("accept failed");
  int yes = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
  return std::make_unique<SocketChannel>(fd);
}

std::unique_ptr<Channel> socket_connect(const std::string& host, int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw ProtocolError("cannot create socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw ProtocolError("bad host address: " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw ProtocolError("cannot connect to " + host + ":" + std::to_string(port));
  }
  int yes = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
  return std::make_unique<SocketChannel>(fd);
}

}  // namespace fedcausal
