#pragma once

// Binary checkpoint / activation-stream formats and CSV output.
//
// Checkpoint ("SAEC", little endian):
//   magic[4] | version u32 | header_len u64 | header JSON | payload
//   payload = f32 W_enc (L x D row-major) | b_enc (L) | W_dec (L x D) | b_dec (D)
//   optional optimizer section when header "optimizer" is true:
//   f32 Adam m then v in the same tensor order (W_enc omitted when tied),
//   then u64 samples-since-fired per latent.
//
// Activation stream ("ACTS"):
//   magic[4] | version u32 | D u32 | count u64 | count x D f32 row-major

#include "saelab/sae.hpp"
#include "saelab/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace saelab {

class FormatError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kBadVersion, kBadHeader, kTruncated, kDimensionMismatch, kIo };

  FormatError(Kind kind, std::uint64_t offset, const std::string& detail);

  Kind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
};

std::string to_string(FormatError::Kind kind);

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kStreamVersion = 1;
inline constexpr std::size_t kStreamHeaderBytes = 20;

struct CheckpointMeta {
  std::int64_t step = 0;
  double l1 = 0.0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  SaeParams params;
  CheckpointMeta meta;
  std::optional<TrainerState> state;  // present when the optimizer section was saved
};

std::string encode_checkpoint(const SaeParams& params, const CheckpointMeta& meta,
                              const TrainerState* state = nullptr);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const SaeParams& params,
                     const CheckpointMeta& meta = {});
void save_checkpoint(const std::filesystem::path& path, const TrainerState& state,
                     const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Header JSON of a checkpoint file, validated only for magic and version.
std::string checkpoint_header(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::string encode_stream(const Matrix& samples);

void write_stream(const std::filesystem::path& path, const Matrix& samples);

/// Appends batches to a stream file and patches the count on close.
class StreamWriter {
 public:
  StreamWriter(const std::filesystem::path& path, Index dims);
  ~StreamWriter();
  StreamWriter(const StreamWriter&) = delete;
  StreamWriter& operator=(const StreamWriter&) = delete;

  void append(const Matrix& rows);
  void close();
  std::uint64_t count() const { return count_; }

 private:
  std::ofstream out_;
  Index dims_;
  std::uint64_t count_ = 0;
};

class StreamReader {
 public:
  explicit StreamReader(const std::filesystem::path& path);

  Index dims() const { return dims_; }
  std::uint64_t count() const { return count_; }
  std::uint64_t position() const { return position_; }

  /// Restart at a recorded sample offset.
  void seek(std::uint64_t sample);

  /// Next batch of up to `rows` samples; nullopt when exhausted.
  std::optional<Matrix> next_batch(Index rows);

 private:
  std::ifstream in_;
  Index dims_ = 0;
  std::uint64_t count_ = 0;
  std::uint64_t position_ = 0;
};

class StreamSource final : public BatchSource {
 public:
  explicit StreamSource(const std::filesystem::path& path) : reader_(path) {}
  Index dims() const override { return reader_.dims(); }
  Matrix next(Index rows) override;
  StreamReader& reader() { return reader_; }

 private:
  StreamReader reader_;
};

/// CSV with a header row; numbers use 9 significant digits.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  CsvTable& add(std::vector<std::string> row);
  std::string str() const;
  void write(const std::filesystem::path& path) const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

std::string fmt_num(double value);
std::string fmt_int(std::int64_t value);

CsvTable log_table(const std::vector<LogRow>& log);

}  // namespace saelab
