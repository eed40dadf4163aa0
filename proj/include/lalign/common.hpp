#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lalign {

// Error taxonomy used across the pipeline; the CLI maps these to distinct
// exit codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Tokens = std::vector<int32_t>;

// One (prompt, response) record.
struct XY {
    Tokens x;
    Tokens y;
};

inline constexpr int32_t kEosToken = 0;

inline void check_tokens(const Tokens& t, int vocab_size, const char* what) {
    for (int32_t id : t) {
        if (id < 0 || id >= vocab_size)
            throw InputError(std::string(what) + ": token id " + std::to_string(id) +
                             " outside vocab of size " + std::to_string(vocab_size));
    }
}

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace lalign
