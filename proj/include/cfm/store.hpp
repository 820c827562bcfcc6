#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cfm/errors.hpp"

namespace cfm {

// Flat container of named float tensors.
//
// On-disk layout (all integers little-endian):
//   magic "CFMN" | version u32 | entry count u32
//   per entry: name length u16 | name bytes | rank u8 | dims u32 each |
//              payload f32 * prod(dims)
// Round-trips are bit-exact.
class NamedTensorStore {
  public:
    static constexpr std::uint32_t kVersion = 1;

    struct Entry {
        std::string name;
        std::vector<std::uint32_t> dims;
        std::vector<float> data;
    };

    void add(const std::string& name, std::vector<std::uint32_t> dims, std::vector<float> data);
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const Entry& get(const std::string& name) const;
    const std::vector<Entry>& entries() const { return entries_; }

    // Scalar convenience accessors (shape [1]).
    void add_scalar(const std::string& name, float value) { add(name, {1}, {value}); }
    float scalar(const std::string& name) const;

    // 64-bit counters stored losslessly as four 16-bit limbs.
    void add_u64(const std::string& name, std::uint64_t value);
    std::uint64_t u64(const std::string& name) const;

    void save(const std::string& path) const;
    static NamedTensorStore load(const std::string& path);

  private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace cfm
