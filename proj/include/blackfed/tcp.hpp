#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <string>
#include <utility>

#include "blackfed/protocol.hpp"

namespace blackfed {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static Endpoint parse(const std::string& text) {
    const auto colon = text.rfind(':');
    if (colon == std::string::npos) throw Error(ErrorCode::config, "endpoint '" + text + "' is not host:port");
    Endpoint e;
    e.host = text.substr(0, colon);
    try {
      const long port = std::stol(text.substr(colon + 1));
      if (port < 0 || port > 65535) throw std::out_of_range("port");
      e.port = static_cast<std::uint16_t>(port);
    } catch (const std::exception&) {
      throw Error(ErrorCode::config, "endpoint '" + text + "' has an invalid port");
    }
    return e;
  }

  std::string str() const { return host + ":" + std::to_string(port); }
};

/// Owning socket descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

namespace detail {

inline std::string errno_text() { return std::strerror(errno); }

/// Waits until `fd` is readable; false on timeout.
inline bool wait_readable(int fd, int timeout_ms) {
  pollfd p{fd, POLLIN, 0};
  for (;;) {
    const int rc = ::poll(&p, 1, timeout_ms);
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) throw Error(ErrorCode::session, "poll failed: " + errno_text());
    return rc > 0;
  }
}

inline void write_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw Error(ErrorCode::session, "send failed: " + errno_text());
    sent += static_cast<std::size_t>(n);
  }
}

/// Reads exactly n bytes; a deadline of -1 waits forever.
inline void read_exact(int fd, std::uint8_t* dst, std::size_t n, int timeout_ms) {
  std::size_t got = 0;
  while (got < n) {
    if (timeout_ms >= 0 && !wait_readable(fd, timeout_ms)) {
      throw Error(ErrorCode::session, "timed out after " + std::to_string(timeout_ms) + " ms waiting for a reply");
    }
    const ssize_t r = ::recv(fd, dst + got, n - got, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r < 0) throw Error(ErrorCode::session, "recv failed: " + errno_text());
    if (r == 0) throw Error(ErrorCode::session, "connection closed by peer");
    got += static_cast<std::size_t>(r);
  }
}

inline std::vector<std::uint8_t> read_frame(int fd, int timeout_ms) {
  std::vector<std::uint8_t> frame(kFrameHeaderSize);
  read_exact(fd, frame.data(), kFrameHeaderSize, timeout_ms);
  const FrameHeader h = decode_header(frame);
  frame.resize(kFrameHeaderSize + h.length);
  read_exact(fd, frame.data() + kFrameHeaderSize, h.length, timeout_ms);
  return frame;
}

inline sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw Error(ErrorCode::session, "cannot resolve host " + ep.host);
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace detail

/// Client end of a TCP connection to a split-learning server.
class TcpClientTransport : public Transport {
 public:
  TcpClientTransport(const Endpoint& server, int timeout_ms = 30000) : timeout_ms_(timeout_ms) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw Error(ErrorCode::session, "socket: " + detail::errno_text());
    const sockaddr_in addr = detail::resolve(server);
    if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      throw Error(ErrorCode::session, "connect to " + server.str() + " failed: " + detail::errno_text());
    }
    detail::set_nodelay(s.fd());
    socket_ = std::move(s);
  }

 protected:
  void send_bytes(std::span<const std::uint8_t> frame) override { detail::write_all(socket_.fd(), frame); }
  std::vector<std::uint8_t> receive_bytes() override { return detail::read_frame(socket_.fd(), timeout_ms_); }

 private:
  Socket socket_;
  int timeout_ms_;
};

/// Single-session TCP front end for a MessageHandler. Connections are served
/// one at a time; a Hello arriving on a second connection while a session is
/// open is answered with Error BUSY and closed.
class TcpServer {
 public:
  TcpServer(MessageHandler& handler, const Endpoint& listen) : handler_(&handler) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw Error(ErrorCode::session, "socket: " + detail::errno_text());
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    const sockaddr_in addr = detail::resolve(listen);
    if (::bind(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      throw Error(ErrorCode::session, "bind " + listen.str() + " failed: " + detail::errno_text());
    }
    if (::listen(s.fd(), 8) != 0) throw Error(ErrorCode::session, "listen failed: " + detail::errno_text());
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    listener_ = std::move(s);
  }

  std::uint16_t port() const { return port_; }

  /// Asks serve() to return once the current session (if any) ends.
  void stop() { stop_.store(true); }

  /// Accepts and serves sessions until `max_sessions` have completed
  /// (0 = unbounded) or stop() is called.
  void serve(std::size_t max_sessions = 0) {
    std::size_t done = 0;
    while (!stop_.load() && (max_sessions == 0 || done < max_sessions)) {
      if (!detail::wait_readable(listener_.fd(), 100)) continue;
      Socket conn(::accept(listener_.fd(), nullptr, nullptr));
      if (!conn.valid()) continue;
      detail::set_nodelay(conn.fd());
      serve_connection(conn);
      ++done;
    }
  }

 private:
  void serve_connection(Socket& conn) {
    for (;;) {
      pollfd fds[2] = {{conn.fd(), POLLIN, 0}, {listener_.fd(), POLLIN, 0}};
      const int rc = ::poll(fds, 2, 100);
      if (rc < 0 && errno != EINTR) throw Error(ErrorCode::session, "poll failed: " + detail::errno_text());
      if (rc <= 0) continue;
      if (fds[1].revents & POLLIN) reject_busy();
      if (!(fds[0].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      std::vector<std::uint8_t> frame;
      try {
        frame = detail::read_frame(conn.fd(), -1);
      } catch (const Error&) {
        handler_->on_disconnect();
        return;
      }
      SplitMessage msg;
      std::optional<SplitMessage> reply;
      try {
        msg = decode(frame);
        reply = handler_->handle(msg);
      } catch (const Error& e) {
        reply = ErrorMessage{ProtocolError::bad_sequence, e.what()};
      }
      if (reply) detail::write_all(conn.fd(), encode(*reply));
      if (std::holds_alternative<EndSession>(msg)) return;
    }
  }

  void reject_busy() {
    Socket extra(::accept(listener_.fd(), nullptr, nullptr));
    if (!extra.valid()) return;
    try {
      (void)detail::read_frame(extra.fd(), 1000);
      detail::write_all(extra.fd(), encode(ErrorMessage{ProtocolError::busy, "another client session is active"}));
    } catch (const Error&) {
    }
  }

  MessageHandler* handler_;
  Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stop_{false};
};

}  // namespace blackfed
