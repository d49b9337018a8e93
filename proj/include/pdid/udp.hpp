#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "pdid/auth_service.hpp"
#include "pdid/errors.hpp"

namespace pdid {

inline TimeMs wall_now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

/// UDP front end: one auth socket, one acct socket, a small worker pool per
/// socket. NAS clients are matched by source IP address.
class UdpServer {
 public:
  explicit UdpServer(AuthService& service) : service_(service) {}

  ~UdpServer() { stop(); }

  Status start(std::uint16_t auth_port, std::uint16_t acct_port, int workers_per_socket = 2) {
    auth_fd_ = bind_socket(auth_port);
    if (auth_fd_ < 0) return Error{Errc::BindError, "auth port " + std::to_string(auth_port)};
    acct_fd_ = bind_socket(acct_port);
    if (acct_fd_ < 0) {
      ::close(auth_fd_);
      auth_fd_ = -1;
      return Error{Errc::BindError, "acct port " + std::to_string(acct_port)};
    }
    running_ = true;
    for (int i = 0; i < workers_per_socket; ++i) {
      workers_.emplace_back([this] { serve_loop(auth_fd_, false); });
      workers_.emplace_back([this] { serve_loop(acct_fd_, true); });
    }
    return {};
  }

  void stop() {
    if (!running_.exchange(false)) return;
    for (auto& w : workers_) w.join();
    workers_.clear();
    if (auth_fd_ >= 0) ::close(auth_fd_);
    if (acct_fd_ >= 0) ::close(acct_fd_);
    auth_fd_ = acct_fd_ = -1;
  }

  std::uint16_t auth_port() const { return local_port(auth_fd_); }
  std::uint16_t acct_port() const { return local_port(acct_fd_); }

 private:
  static int bind_socket(std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (fd < 0) return -1;
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(port);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      return -1;
    }
    timeval tv{0, 200 * 1000};  // wake regularly so stop() can drain workers
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    return fd;
  }

  static std::uint16_t local_port(int fd) {
    if (fd < 0) return 0;
    sockaddr_in addr{};
    socklen_t len = sizeof(addr);
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) return 0;
    return ntohs(addr.sin_port);
  }

  void serve_loop(int fd, bool acct) {
    std::vector<std::uint8_t> buf(radius::kMaxPacketLen + 64);
    while (running_) {
      sockaddr_in peer{};
      socklen_t plen = sizeof(peer);
      ssize_t n = ::recvfrom(fd, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&peer),
                             &plen);
      if (n <= 0) continue;  // timeout or transient error
      char ip[INET_ADDRSTRLEN] = {0};
      ::inet_ntop(AF_INET, &peer.sin_addr, ip, sizeof(ip));
      radius::Octets raw(buf.begin(), buf.begin() + n);
      auto response = service_.handle_datagram(acct, ip, raw, wall_now_ms());
      if (response) {
        ::sendto(fd, response->data(), response->size(), 0, reinterpret_cast<sockaddr*>(&peer),
                 plen);
      }
    }
  }

  AuthService& service_;
  std::atomic<bool> running_{false};
  int auth_fd_ = -1;
  int acct_fd_ = -1;
  std::vector<std::thread> workers_;
};

/// Minimal client for tests and the simulator's optional UDP transport.
class UdpClient {
 public:
  UdpClient() { fd_ = ::socket(AF_INET, SOCK_DGRAM, 0); }
  ~UdpClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  /// Binds the local end to a specific loopback alias so the server sees the
  /// intended NAS source address.
  bool bind_source(const std::string& ip) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = 0;
    if (::inet_pton(AF_INET, ip.c_str(), &addr.sin_addr) != 1) return false;
    return ::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0;
  }

  std::optional<radius::Octets> exchange(const std::string& host, std::uint16_t port,
                                         const radius::Octets& payload, int timeout_ms = 2000) {
    if (fd_ < 0) return std::nullopt;
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) return std::nullopt;
    timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    if (::sendto(fd_, payload.data(), payload.size(), 0, reinterpret_cast<sockaddr*>(&addr),
                 sizeof(addr)) < 0)
      return std::nullopt;
    std::vector<std::uint8_t> buf(radius::kMaxPacketLen + 64);
    ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
    if (n <= 0) return std::nullopt;
    return radius::Octets(buf.begin(), buf.begin() + n);
  }

 private:
  int fd_ = -1;
};

}  // namespace pdid
