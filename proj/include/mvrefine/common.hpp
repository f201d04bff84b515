#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mvr {

// Bumped whenever synthetic data generation changes in a way that alters pixels.
inline constexpr int kGeneratorVersion = 1;

// Exit codes used by the CLI: 0 ok, 1 validation, 2 integrity, 3 numerical.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

uint64_t fnv1a64(const void* data, size_t size, uint64_t state = 0xcbf29ce484222325ull);
uint64_t fnv1a64_file(const std::string& path);
std::string hex64(uint64_t value);
std::string hash_hex(const std::string& text);

}  // namespace mvr
