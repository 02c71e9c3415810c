// SPDX-License-Identifier: Apache-2.0
#include "soup/evaluators.hpp"

#include "json.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <utility>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

namespace soup {

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t pool_size, double fraction,
                                                                             std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw Error("selection fraction must be in (0, 1)");
    }
    if (pool_size < 2) {
        throw Error("held-out pool needs at least 2 examples to split");
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(pool_size);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);

    const double exact = fraction * static_cast<double>(pool_size);
    auto n_sel = static_cast<std::size_t>(std::floor(exact));
    if (exact > static_cast<double>(n_sel) && (rng() & 1)) {
        ++n_sel;
    }
    n_sel = std::clamp<std::size_t>(n_sel, 1, pool_size - 1);
    return {std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_sel)),
            std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(n_sel), idx.end())};
}

Splits make_splits(const Dataset & heldout_pool, double selection_fraction, std::uint64_t split_seed) {
    auto [sel, test] = split_indices(heldout_pool.size(), selection_fraction, split_seed);
    return {heldout_pool.subset(sel), heldout_pool.subset(test)};
}

Splits make_splits(const SplitSpec & spec) {
    return make_splits(load_dataset(spec.dataset_path).heldout, spec.selection_fraction, spec.split_seed);
}

double builtin_eval(const TensorMap & map, const MlpArch & arch, const Dataset & data) {
    if (data.size() == 0) {
        throw Error("cannot evaluate on an empty split");
    }
    return static_cast<double>(count_correct(map, arch, data)) / static_cast<double>(data.size());
}

BuiltinEvaluator::BuiltinEvaluator(MlpArch arch, Splits splits) : arch_(std::move(arch)), splits_(std::move(splits)) {
    for (const auto * d : {&splits_.selection, &splits_.test}) {
        if (d->input_dim != arch_.input_dim) {
            throw Error("split input_dim " + std::to_string(d->input_dim) + " does not match architecture input_dim " +
                        std::to_string(arch_.input_dim));
        }
    }
}

double BuiltinEvaluator::evaluate(const TensorMap & map, Split split) {
    return builtin_eval(map, arch_, data(split));
}

const char * to_string(ExternalErrorKind kind) {
    switch (kind) {
        case ExternalErrorKind::launch:           return "launch failure";
        case ExternalErrorKind::exit_status:      return "nonzero exit";
        case ExternalErrorKind::malformed_output: return "malformed output";
        case ExternalErrorKind::out_of_range:     return "accuracy out of range";
        case ExternalErrorKind::timeout:          return "timeout";
    }
    return "external evaluator error";
}

double parse_external_output(const std::string & stdout_text, const std::string & stderr_text) {
    std::string line = stdout_text;
    if (!line.empty() && line.back() == '\n') {
        line.pop_back();
    }
    if (line.empty() || line.find('\n') != std::string::npos) {
        throw ExternalEvalError(ExternalErrorKind::malformed_output,
                                "expected exactly one JSON line on stdout, got: " + stdout_text.substr(0, 200),
                                stderr_text);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception & e) {
        throw ExternalEvalError(ExternalErrorKind::malformed_output, std::string("invalid JSON: ") + e.what(),
                                stderr_text);
    }
    if (!j.is_object() || !j.contains("accuracy") || !j["accuracy"].is_number() || !j.contains("n") ||
        !j["n"].is_number_integer()) {
        throw ExternalEvalError(ExternalErrorKind::malformed_output,
                                "expected {\"accuracy\": <real>, \"n\": <integer>}, got " + line, stderr_text);
    }
    if (j["n"].get<std::int64_t>() < 1) {
        throw ExternalEvalError(ExternalErrorKind::malformed_output, "n must be positive, got " + line, stderr_text);
    }
    const double acc = j["accuracy"].get<double>();
    if (!(acc >= 0.0 && acc <= 1.0)) {
        throw ExternalEvalError(ExternalErrorKind::out_of_range, "accuracy " + j["accuracy"].dump() + " not in [0, 1]",
                                stderr_text);
    }
    return acc;
}

namespace {

struct ProcessOutput {
    int status = 0;
    bool timed_out = false;
    std::string out;
    std::string err;
};

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(const Fd &) = delete;
    Fd & operator=(const Fd &) = delete;
    Fd(Fd && o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd & operator=(Fd && o) noexcept {
        reset();
        fd_ = std::exchange(o.fd_, -1);
        return *this;
    }
    ~Fd() { reset(); }
    int get() const { return fd_; }
    void reset() {
        if (fd_ >= 0) {
            ::close(fd_);
        }
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

std::pair<Fd, Fd> make_pipe() {
    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) {
        throw ExternalEvalError(ExternalErrorKind::launch, std::string("pipe: ") + std::strerror(errno), "");
    }
    return {Fd(fds[0]), Fd(fds[1])};
}

ProcessOutput run_process(const std::vector<std::string> & argv, std::chrono::milliseconds timeout) {
    auto [out_r, out_w] = make_pipe();
    auto [err_r, err_w] = make_pipe();
    auto [exec_r, exec_w] = make_pipe();

    std::vector<char *> args;
    for (const auto & a : argv) {
        args.push_back(const_cast<char *>(a.c_str()));
    }
    args.push_back(nullptr);

    const pid_t pid = ::fork();
    if (pid < 0) {
        throw ExternalEvalError(ExternalErrorKind::launch, std::string("fork: ") + std::strerror(errno), "");
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(out_w.get(), STDOUT_FILENO);
        ::dup2(err_w.get(), STDERR_FILENO);
        const int devnull = ::open("/dev/null", O_RDONLY);
        if (devnull >= 0) {
            ::dup2(devnull, STDIN_FILENO);
        }
        ::execvp(args[0], args.data());
        const int e = errno;
        [[maybe_unused]] auto n = ::write(exec_w.get(), &e, sizeof(e));
        ::_exit(127);
    }
    out_w.reset();
    err_w.reset();
    exec_w.reset();

    int exec_errno = 0;
    if (::read(exec_r.get(), &exec_errno, sizeof(exec_errno)) == sizeof(exec_errno)) {
        ::waitpid(pid, nullptr, 0);
        throw ExternalEvalError(ExternalErrorKind::launch,
                                "cannot execute '" + argv[0] + "': " + std::strerror(exec_errno), "");
    }

    ProcessOutput result;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    pollfd fds[2] = {{out_r.get(), POLLIN, 0}, {err_r.get(), POLLIN, 0}};
    std::string * sinks[2] = {&result.out, &result.err};
    int open_fds = 2;
    char buf[4096];
    while (open_fds > 0) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            result.timed_out = true;
            break;
        }
        const int rc = ::poll(fds, 2, static_cast<int>(std::min<std::int64_t>(left.count(), 1 << 30)));
        if (rc < 0) {
            if (errno == EINTR) {
                continue;
            }
            break;
        }
        for (int i = 0; i < 2; ++i) {
            if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) {
                continue;
            }
            const ssize_t n = ::read(fds[i].fd, buf, sizeof(buf));
            if (n > 0) {
                sinks[i]->append(buf, static_cast<std::size_t>(n));
            } else if (n == 0 || errno != EINTR) {
                fds[i].fd = -1;
                --open_fds;
            }
        }
    }
    int status = 0;
    // output closed does not mean the process exited; keep honouring the deadline
    while (!result.timed_out) {
        const pid_t r = ::waitpid(pid, &status, WNOHANG);
        if (r == pid || (r < 0 && errno != EINTR)) {
            result.status = status;
            return result;
        }
        if (std::chrono::steady_clock::now() >= deadline) {
            result.timed_out = true;
            break;
        }
        ::usleep(2000);
    }
    ::kill(-pid, SIGKILL);
    ::kill(pid, SIGKILL);
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    result.status = status;
    return result;
}

// Candidate checkpoint file removed on scope exit.
class ScratchFile {
public:
    explicit ScratchFile(std::filesystem::path path) : path_(std::move(path)) {}
    ScratchFile(const ScratchFile &) = delete;
    ScratchFile & operator=(const ScratchFile &) = delete;
    ~ScratchFile() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    const std::filesystem::path & path() const { return path_; }

private:
    std::filesystem::path path_;
};

std::atomic<std::uint64_t> g_scratch_counter{0};

} // namespace

ExternalEvaluator::ExternalEvaluator(ExternalConfig config) : config_(std::move(config)) {
    if (config_.command.empty()) {
        throw Error("external evaluator needs a command");
    }
    if (config_.scratch_dir.empty()) {
        config_.scratch_dir = std::filesystem::temp_directory_path();
    }
}

double ExternalEvaluator::evaluate(const TensorMap & map, Split split) {
    ++invocations_;
    ScratchFile file(config_.scratch_dir / ("soup-candidate-" + std::to_string(::getpid()) + "-" +
                                            std::to_string(g_scratch_counter++) + ".soupt"));
    CheckpointMeta meta;
    meta.tag = "candidate";
    save_checkpoint(map, meta, file.path());

    std::vector<std::string> argv{config_.command.string()};
    argv.insert(argv.end(), config_.extra_args.begin(), config_.extra_args.end());
    argv.insert(argv.end(), {"--checkpoint", file.path().string(), "--split", to_string(split)});

    const ProcessOutput out = run_process(argv, config_.timeout);
    if (out.timed_out) {
        throw ExternalEvalError(ExternalErrorKind::timeout,
                                "'" + argv[0] + "' exceeded " + std::to_string(config_.timeout.count()) + " ms", out.err);
    }
    if (!WIFEXITED(out.status) || WEXITSTATUS(out.status) != 0) {
        const std::string how = WIFEXITED(out.status) ? "exit status " + std::to_string(WEXITSTATUS(out.status))
                                                      : "signal " + std::to_string(WTERMSIG(out.status));
        throw ExternalEvalError(ExternalErrorKind::exit_status, "'" + argv[0] + "' ended with " + how, out.err);
    }
    return parse_external_output(out.out, out.err);
}

} // namespace soup
