// Copyright 2026 The BLO-Inst Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace bloinst {

// 64-bit FNV-1a. Used for content digests in files and parameter hashes.
class Fnv1a {
public:
    void update(std::span<const unsigned char> bytes) {
        for (unsigned char b : bytes) {
            state_ ^= b;
            state_ *= 0x100000001b3ULL;
        }
    }

    void update(std::string_view s) {
        update(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
    }

    // Doubles are hashed by their little-endian IEEE-754 bytes.
    void update(std::span<const double> values) {
        for (double v : values) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            unsigned char le[8];
            for (int i = 0; i < 8; ++i) {
                le[i] = static_cast<unsigned char>(bits >> (8 * i));
            }
            update(std::span<const unsigned char>(le, 8));
        }
    }

    std::uint64_t value() const { return state_; }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
        return buf;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace bloinst
