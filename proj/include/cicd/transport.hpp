#pragma once

#include <cerrno>
#include <csignal>
#include <cstring>
#include <deque>
#include <memory>
#include <optional>
#include <string>

#include <fcntl.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include "cicd/error.hpp"
#include "cicd/protocol.hpp"

namespace cicd::proto {

// In-process pairing of a client with a server.
class LoopbackChannel : public LineChannel {
 public:
  explicit LoopbackChannel(ProtocolServer& server) : server_(server) {}

  void write_line(const std::string& line) override {
    if (auto reply = server_.handle(line)) pending_.push_back(std::move(*reply));
  }

  std::optional<std::string> read_line() override {
    if (pending_.empty()) return std::nullopt;
    std::string line = std::move(pending_.front());
    pending_.pop_front();
    return line;
  }

 private:
  ProtocolServer& server_;
  std::deque<std::string> pending_;
};

class FdChannel : public LineChannel {
 public:
  FdChannel(int in_fd, int out_fd, bool owned) : in_(in_fd), out_(out_fd), owned_(owned) {}
  FdChannel(const FdChannel&) = delete;
  FdChannel& operator=(const FdChannel&) = delete;
  ~FdChannel() override { close_fds(); }

  void write_line(const std::string& line) override {
    std::size_t done = 0;
    while (done < line.size()) {
      const ssize_t n = ::write(out_, line.data() + done, line.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(Errc::session_error, std::string("write failed: ") + std::strerror(errno));
      }
      done += static_cast<std::size_t>(n);
    }
  }

  std::optional<std::string> read_line() override {
    for (;;) {
      if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl + 1);
        buffer_.erase(0, nl + 1);
        return line;
      }
      char chunk[65536];
      const ssize_t n = ::read(in_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(Errc::session_error, std::string("read failed: ") + std::strerror(errno));
      }
      if (n == 0) {
        if (buffer_.empty()) return std::nullopt;
        std::string rest = std::move(buffer_);
        buffer_.clear();
        return rest;
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 protected:
  void close_fds() {
    if (!owned_) return;
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0 && out_ != in_) ::close(out_);
    in_ = out_ = -1;
  }

 private:
  int in_;
  int out_;
  bool owned_;
  std::string buffer_;
};

// Runs `/bin/sh -c command` with its stdin/stdout connected to the channel.
class SubprocessChannel : public FdChannel {
 public:
  static std::unique_ptr<SubprocessChannel> spawn(const std::string& command) {
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw Error(Errc::session_error, "pipe failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw Error(Errc::session_error, "pipe failed");
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(Errc::session_error, "fork failed");
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
    return std::unique_ptr<SubprocessChannel>(new SubprocessChannel(from_child[0], to_child[1], pid));
  }

  ~SubprocessChannel() override {
    close_fds();
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }

 private:
  SubprocessChannel(int in_fd, int out_fd, pid_t pid) : FdChannel(in_fd, out_fd, true), pid_(pid) {}
  pid_t pid_;
};

inline sockaddr_un unix_address(const std::string& path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.size() >= sizeof(addr.sun_path)) throw Error(Errc::config_error, "socket path too long: " + path);
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
  return addr;
}

inline std::unique_ptr<FdChannel> connect_unix(const std::string& path) {
  std::signal(SIGPIPE, SIG_IGN);
  const int fd = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw Error(Errc::session_error, "socket failed");
  const sockaddr_un addr = unix_address(path);
  if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw Error(Errc::session_error, "cannot connect to " + path + ": " + std::strerror(errno));
  }
  return std::make_unique<FdChannel>(fd, fd, true);
}

// Listening socket; each accepted connection is served to completion.
class UnixListener {
 public:
  explicit UnixListener(const std::string& path) : path_(path) {
    std::signal(SIGPIPE, SIG_IGN);
    fd_ = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw Error(Errc::session_error, "socket failed");
    ::unlink(path.c_str());
    const sockaddr_un addr = unix_address(path);
    if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 4) != 0) {
      ::close(fd_);
      throw Error(Errc::session_error, "cannot listen on " + path + ": " + std::strerror(errno));
    }
  }
  UnixListener(const UnixListener&) = delete;
  UnixListener& operator=(const UnixListener&) = delete;
  ~UnixListener() {
    ::close(fd_);
    ::unlink(path_.c_str());
  }

  std::unique_ptr<FdChannel> accept() {
    const int c = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (c < 0) throw Error(Errc::session_error, std::string("accept failed: ") + std::strerror(errno));
    return std::make_unique<FdChannel>(c, c, true);
  }

 private:
  std::string path_;
  int fd_ = -1;
};

}  // namespace cicd::proto
