#pragma once

// Corrupted checkpoint and stream images paired with the error each should
// raise. Cases are derived from a valid image by editing header fields,
// truncating at random offsets or resizing the payload.

#include "saelab/io.hpp"

#include <cstring>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace saelab::fuzz {

struct Case {
  std::string name;
  std::string bytes;
  bool stream = false;
  FormatError::Kind expected;
};

inline SaeParams sample_params(std::uint64_t seed, Index latents = 4) {
  return init_sae(6, latents, Activation::topk(2), false, MatryoshkaSpec{{1, latents}, {0.5, 1.0}, false},
                  0.1, seed);
}

inline std::uint64_t read_u64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  std::memcpy(&v, s.data() + at, 8);
  return v;
}

inline void write_u64(std::string& s, std::size_t at, std::uint64_t v) {
  std::memcpy(s.data() + at, &v, 8);
}

inline void write_u32(std::string& s, std::size_t at, std::uint32_t v) {
  std::memcpy(s.data() + at, &v, 4);
}

// Replaces the JSON header, fixing up its length prefix.
inline std::string with_header(const std::string& image, const std::string& header) {
  const std::uint64_t len = read_u64(image, 8);
  std::string out = image.substr(0, 8);
  out.append(8, '\0');
  write_u64(out, 8, header.size());
  out += header;
  out += image.substr(16 + len);
  return out;
}

inline std::string header_of(const std::string& image) {
  return image.substr(16, read_u64(image, 8));
}

inline std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  if (at != std::string::npos) s.replace(at, from.size(), to);
  return s;
}

inline std::vector<Case> corruption_cases(std::uint64_t seed) {
  using K = FormatError::Kind;
  std::mt19937_64 rng(seed);
  std::vector<Case> cases;
  const std::string ck = encode_checkpoint(sample_params(seed), {});
  const std::string header = header_of(ck);

  {
    std::string b = ck;
    b[0] = 'X';
    cases.push_back({"checkpoint bad magic", b, false, K::kBadMagic});
  }
  {
    std::string b = ck;
    write_u32(b, 4, 99);
    cases.push_back({"checkpoint bad version", b, false, K::kBadVersion});
  }
  {
    std::string b = ck;
    write_u64(b, 8, 1ULL << 40);
    cases.push_back({"checkpoint header length past end", b, false, K::kTruncated});
  }
  cases.push_back({"checkpoint header not json", with_header(ck, "{\"dims\": 6,"), false, K::kBadHeader});
  cases.push_back({"checkpoint header missing field",
                   with_header(ck, replace_once(header, "\"latents\"", "\"latentz\"")), false, K::kBadHeader});
  cases.push_back({"checkpoint header unknown activation",
                   with_header(ck, replace_once(header, "\"topk\"", "\"sigmoid\"")), false, K::kBadHeader});
  cases.push_back({"checkpoint header negative dims",
                   with_header(ck, replace_once(header, "\"dims\":6", "\"dims\":-6")), false, K::kBadHeader});
  {
    // Header says 4 latents, payload sized for 5.
    const std::string five = encode_checkpoint(sample_params(seed, 5), {});
    const std::string hdr4 = header_of(ck);
    const std::string payload5 = five.substr(16 + read_u64(five, 8));
    std::string b = ck.substr(0, 16 + hdr4.size()) + payload5;
    cases.push_back({"checkpoint payload for more latents", b, false, K::kDimensionMismatch});
  }
  cases.push_back({"checkpoint truncated by 4 bytes", ck.substr(0, ck.size() - 4), false, K::kTruncated});
  cases.push_back({"checkpoint cut inside magic", ck.substr(0, 2), false, K::kTruncated});
  cases.push_back({"checkpoint cut inside length", ck.substr(0, 11), false, K::kTruncated});
  {
    const std::size_t payload_start = 16 + header.size();
    for (int i = 0; i < 4; ++i) {
      std::uniform_int_distribution<std::size_t> cut(payload_start, ck.size() - 1);
      const std::size_t at = cut(rng);
      cases.push_back({"checkpoint truncated at " + std::to_string(at), ck.substr(0, at), false,
                       K::kTruncated});
    }
  }

  const std::string st = encode_stream(Matrix::Random(10, 3));
  {
    std::string b = st;
    b[3] = 'Z';
    cases.push_back({"stream bad magic", b, true, K::kBadMagic});
  }
  {
    std::string b = st;
    write_u32(b, 4, 7);
    cases.push_back({"stream bad version", b, true, K::kBadVersion});
  }
  cases.push_back({"stream truncated payload", st.substr(0, st.size() - 5), true, K::kTruncated});
  cases.push_back({"stream header only partly present", st.substr(0, 12), true, K::kTruncated});
  cases.push_back({"stream with trailing bytes", st + std::string(12, '\0'), true, K::kDimensionMismatch});
  {
    std::string b = st;
    write_u64(b, 12, 11);
    cases.push_back({"stream count larger than payload", b, true, K::kTruncated});
  }
  return cases;
}

// Runs one case; returns the kind raised, or nullopt if nothing was thrown.
inline std::optional<FormatError::Kind> raised(const Case& c, const std::filesystem::path& scratch) {
  try {
    if (!c.stream) {
      decode_checkpoint(c.bytes);
      return std::nullopt;
    }
    write_file(scratch, c.bytes);
    StreamReader reader(scratch);
    while (reader.next_batch(4)) {
    }
    return std::nullopt;
  } catch (const FormatError& e) {
    return e.kind();
  }
}

}  // namespace saelab::fuzz
