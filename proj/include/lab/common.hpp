#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lab {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Shape mismatch in a graph op; message names the op and the offending shapes.
class ShapeError : public Error {
   public:
    using Error::Error;
};

class VocabError : public Error {
   public:
    using Error::Error;
};

class ConfigError : public Error {
   public:
    using Error::Error;
};

class IoError : public Error {
   public:
    using Error::Error;
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// without this, a string literal silently binds to the (void*, size_t) overload
inline uint64_t fnv1a64(const char* s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(std::string(s), h);
}

inline std::string hex64(uint64_t v) {
    static const char* d = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = d[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace lab
