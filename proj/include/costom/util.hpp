#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace costom {

/// Bad or missing configuration. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A documented precondition was violated. The CLI maps this to exit code 3.
class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incremental SHA-256, hex output.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(const void* data, std::size_t len);
    Sha256& update(std::string_view s) { return update(s.data(), s.size()); }
    template <class T>
    Sha256& update_pod(const T& v) {
        return update(&v, sizeof(T));
    }
    std::string hex();

private:
    void* ctx_;
};

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

/// Worker count from COSTOM_THREADS (default 1).
int thread_count();

/// Calls fn(i) for i in [0, n) on up to thread_count() threads. Each index is
/// visited exactly once; callers write results into per-index slots so the
/// outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// SplitMix64 mixing, used to derive per-item seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace costom
