#include "saelab/io.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <json.hpp>
#include <sstream>

namespace saelab {

using json = nlohmann::json;

FormatError::FormatError(Kind kind, std::uint64_t offset, const std::string& detail)
    : std::runtime_error(to_string(kind) + " at byte " + std::to_string(offset) + ": " + detail),
      kind_(kind),
      offset_(offset) {}

std::string to_string(FormatError::Kind kind) {
  switch (kind) {
    case FormatError::Kind::kBadMagic: return "bad magic";
    case FormatError::Kind::kBadVersion: return "unsupported version";
    case FormatError::Kind::kBadHeader: return "malformed header";
    case FormatError::Kind::kTruncated: return "truncated";
    case FormatError::Kind::kDimensionMismatch: return "dimension mismatch";
    case FormatError::Kind::kIo: return "i/o error";
  }
  return "format error";
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    T out;
    auto* src = reinterpret_cast<const unsigned char*>(&value);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
    return out;
  } else {
    return value;
  }
}

class ByteWriter {
 public:
  void raw(std::string_view s) { buf_.append(s); }
  template <typename T>
  void scalar(T value) {
    value = to_little(value);
    buf_.append(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void f32(double value) { scalar(std::bit_cast<std::uint32_t>(static_cast<float>(value))); }
  template <typename Derived>
  void tensor(const Eigen::DenseBase<Derived>& t) {
    for (Index r = 0; r < t.rows(); ++r) {
      for (Index c = 0; c < t.cols(); ++c) f32(t(r, c));
    }
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return bytes_.size() - pos_; }

  std::string_view raw(std::size_t n, const char* what) {
    need(n, what);
    std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  template <typename T>
  T scalar(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(value);
  }
  double f32(const char* what) {
    return static_cast<double>(std::bit_cast<float>(scalar<std::uint32_t>(what)));
  }
  void tensor(Matrix& m, const char* what) {
    need(4 * static_cast<std::uint64_t>(m.size()), what);
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = f32(what);
    }
  }
  void tensor(Vector& v, const char* what) {
    need(4 * static_cast<std::uint64_t>(v.size()), what);
    for (Index i = 0; i < v.size(); ++i) v(i) = f32(what);
  }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (remaining() < n) {
      std::ostringstream msg;
      msg << "need " << n << " bytes for " << what << ", " << remaining() << " left";
      throw FormatError(FormatError::Kind::kTruncated, pos_, msg.str());
    }
  }

  std::string_view bytes_;
  std::uint64_t pos_ = 0;
};

json header_json(const SaeParams& params, const CheckpointMeta& meta, bool optimizer) {
  json h;
  h["dims"] = params.dims();
  h["latents"] = params.latents();
  h["activation"] = to_string(params.activation().kind);
  h["k"] = params.activation().k;
  h["tied"] = params.tied();
  if (const auto& spec = params.matryoshka()) {
    h["matryoshka"] = {{"prefixes", spec->prefixes},
                       {"betas", spec->betas},
                       {"detached_inner", spec->detached_inner}};
  } else {
    h["matryoshka"] = nullptr;
  }
  h["step"] = meta.step;
  h["l1"] = meta.l1;
  h["seed"] = meta.seed;
  h["optimizer"] = optimizer;
  return h;
}

void write_moments(ByteWriter& w, const AdamMoments& m, bool tied) {
  if (!tied) w.tensor(m.w_enc);
  w.tensor(m.b_enc);
  w.tensor(m.w_dec);
  w.tensor(m.b_dec);
}

void read_moments(ByteReader& r, AdamMoments& m, bool tied) {
  if (!tied) r.tensor(m.w_enc, "optimizer W_enc");
  r.tensor(m.b_enc, "optimizer b_enc");
  r.tensor(m.w_dec, "optimizer W_dec");
  r.tensor(m.b_dec, "optimizer b_dec");
}

std::uint64_t optimizer_bytes(Index dims, Index latents, bool tied) {
  const auto d = static_cast<std::uint64_t>(dims);
  const auto l = static_cast<std::uint64_t>(latents);
  const std::uint64_t per_set = 4 * ((tied ? 0 : l * d) + l + l * d + d);
  return 2 * per_set + 8 * l;
}

}  // namespace

std::string encode_checkpoint(const SaeParams& params, const CheckpointMeta& meta,
                              const TrainerState* state) {
  const std::string header = header_json(params, meta, state != nullptr).dump();
  ByteWriter w;
  w.raw("SAEC");
  w.scalar<std::uint32_t>(kCheckpointVersion);
  w.scalar<std::uint64_t>(header.size());
  w.raw(header);
  w.tensor(params.w_enc());
  w.tensor(params.b_enc().transpose());
  w.tensor(params.w_dec());
  w.tensor(params.b_dec().transpose());
  if (state != nullptr) {
    write_moments(w, state->m, params.tied());
    write_moments(w, state->v, params.tied());
    for (std::int64_t c : state->since_fired) w.scalar<std::uint64_t>(static_cast<std::uint64_t>(c));
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.raw(4, "magic") != "SAEC") {
    throw FormatError(FormatError::Kind::kBadMagic, 0, "expected \"SAEC\"");
  }
  const auto version = r.scalar<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kBadVersion, 4, "version " + std::to_string(version));
  }
  const auto header_len = r.scalar<std::uint64_t>("header length");
  const std::uint64_t header_offset = r.offset();
  if (header_len > r.remaining()) {
    throw FormatError(FormatError::Kind::kTruncated, header_offset,
                      "header length " + std::to_string(header_len) + " exceeds file");
  }
  json h;
  Index dims = 0, latents = 0, k = 0;
  bool tied = false, optimizer = false;
  Activation act;
  std::optional<MatryoshkaSpec> spec;
  Checkpoint ck;
  try {
    h = json::parse(r.raw(static_cast<std::size_t>(header_len), "header"));
    dims = h.at("dims").get<Index>();
    latents = h.at("latents").get<Index>();
    k = h.at("k").get<Index>();
    tied = h.at("tied").get<bool>();
    optimizer = h.at("optimizer").get<bool>();
    act = Activation{activation_kind_from_string(h.at("activation").get<std::string>()), k};
    if (!h.at("matryoshka").is_null()) {
      const json& m = h.at("matryoshka");
      spec = MatryoshkaSpec{m.at("prefixes").get<std::vector<Index>>(),
                            m.at("betas").get<std::vector<double>>(),
                            m.at("detached_inner").get<bool>()};
    }
    ck.meta.step = h.at("step").get<std::int64_t>();
    ck.meta.l1 = h.at("l1").get<double>();
    ck.meta.seed = h.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::kBadHeader, header_offset, e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::kBadHeader, header_offset, e.what());
  }
  if (dims <= 0 || latents <= 0 || dims > (1 << 24) || latents > (1 << 24)) {
    throw FormatError(FormatError::Kind::kBadHeader, header_offset, "implausible dims/latents");
  }

  const auto d = static_cast<std::uint64_t>(dims);
  const auto l = static_cast<std::uint64_t>(latents);
  std::uint64_t expected = 4 * (2 * l * d + l + d);
  if (optimizer) expected += optimizer_bytes(dims, latents, tied);
  const std::uint64_t payload_offset = r.offset();
  if (r.remaining() < expected) {
    throw FormatError(FormatError::Kind::kTruncated, payload_offset + r.remaining(),
                      "payload has " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(expected));
  }
  if (r.remaining() > expected) {
    throw FormatError(FormatError::Kind::kDimensionMismatch, payload_offset + expected,
                      "payload has " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(expected));
  }

  try {
    ck.params = SaeParams(dims, latents, act, tied, spec);
  } catch (const std::exception& e) {
    throw FormatError(FormatError::Kind::kBadHeader, header_offset, e.what());
  }
  Matrix w_enc(latents, dims);
  r.tensor(w_enc, "W_enc");
  r.tensor(ck.params.b_enc(), "b_enc");
  r.tensor(ck.params.w_dec(), "W_dec");
  r.tensor(ck.params.b_dec(), "b_dec");
  if (tied) {
    if (w_enc != ck.params.w_dec()) {
      throw FormatError(FormatError::Kind::kDimensionMismatch, payload_offset,
                        "tied checkpoint stores an encoder that differs from the decoder");
    }
  } else {
    ck.params.w_enc() = w_enc;
  }
  if (optimizer) {
    TrainerState state = initial_state(ck.params);
    read_moments(r, state.m, tied);
    read_moments(r, state.v, tied);
    for (auto& c : state.since_fired) {
      c = static_cast<std::int64_t>(r.scalar<std::uint64_t>("fire counters"));
    }
    state.step = ck.meta.step;
    ck.state = std::move(state);
  }
  return ck;
}

std::string read_file(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) {
    throw FormatError(FormatError::Kind::kIo, 0, path.string() + " is a directory");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, 0, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::kIo, 0, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::kIo, 0, "short write to " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const SaeParams& params,
                     const CheckpointMeta& meta) {
  write_file(path, encode_checkpoint(params, meta));
}

void save_checkpoint(const std::filesystem::path& path, const TrainerState& state,
                     const CheckpointMeta& meta) {
  CheckpointMeta m = meta;
  m.step = state.step;
  write_file(path, encode_checkpoint(state.params, m, &state));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

std::string checkpoint_header(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes);
  if (r.raw(4, "magic") != "SAEC") throw FormatError(FormatError::Kind::kBadMagic, 0, "expected \"SAEC\"");
  const auto version = r.scalar<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kBadVersion, 4, "version " + std::to_string(version));
  }
  const auto len = r.scalar<std::uint64_t>("header length");
  if (len > r.remaining()) throw FormatError(FormatError::Kind::kTruncated, 16, "header exceeds file");
  return std::string(r.raw(static_cast<std::size_t>(len), "header"));
}

std::string encode_stream(const Matrix& samples) {
  ByteWriter w;
  w.raw("ACTS");
  w.scalar<std::uint32_t>(kStreamVersion);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(samples.cols()));
  w.scalar<std::uint64_t>(static_cast<std::uint64_t>(samples.rows()));
  w.tensor(samples);
  return w.take();
}

void write_stream(const std::filesystem::path& path, const Matrix& samples) {
  write_file(path, encode_stream(samples));
}

StreamWriter::StreamWriter(const std::filesystem::path& path, Index dims) : dims_(dims) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw FormatError(FormatError::Kind::kIo, 0, "cannot write " + path.string());
  ByteWriter w;
  w.raw("ACTS");
  w.scalar<std::uint32_t>(kStreamVersion);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(dims));
  w.scalar<std::uint64_t>(0);
  const std::string header = w.take();
  out_.write(header.data(), static_cast<std::streamsize>(header.size()));
}

StreamWriter::~StreamWriter() {
  try {
    close();
  } catch (...) {
  }
}

void StreamWriter::append(const Matrix& rows) {
  if (rows.cols() != dims_) throw DimensionError("StreamWriter: row width mismatch");
  ByteWriter w;
  w.tensor(rows);
  const std::string bytes = w.take();
  out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  count_ += static_cast<std::uint64_t>(rows.rows());
}

void StreamWriter::close() {
  if (!out_.is_open()) return;
  out_.seekp(12);
  const std::uint64_t le = to_little(count_);
  out_.write(reinterpret_cast<const char*>(&le), sizeof(le));
  out_.close();
}

StreamReader::StreamReader(const std::filesystem::path& path) {
  in_.open(path, std::ios::binary);
  if (!in_) throw FormatError(FormatError::Kind::kIo, 0, "cannot open " + path.string());
  char header[kStreamHeaderBytes];
  in_.read(header, kStreamHeaderBytes);
  const auto got = static_cast<std::uint64_t>(in_.gcount());
  ByteReader r(std::string_view(header, static_cast<std::size_t>(got)));
  if (got < 4 || std::string_view(header, 4) != "ACTS") {
    throw FormatError(FormatError::Kind::kBadMagic, 0, "expected \"ACTS\"");
  }
  r.raw(4, "magic");
  const auto version = r.scalar<std::uint32_t>("version");
  if (version != kStreamVersion) {
    throw FormatError(FormatError::Kind::kBadVersion, 4, "version " + std::to_string(version));
  }
  dims_ = static_cast<Index>(r.scalar<std::uint32_t>("dims"));
  count_ = r.scalar<std::uint64_t>("count");
  const auto size = std::filesystem::file_size(path);
  const std::uint64_t expected = kStreamHeaderBytes + 4 * count_ * static_cast<std::uint64_t>(dims_);
  if (size < expected) {
    throw FormatError(FormatError::Kind::kTruncated, size,
                      "file has " + std::to_string(size) + " bytes, header implies " +
                          std::to_string(expected));
  }
  if (size > expected) {
    throw FormatError(FormatError::Kind::kDimensionMismatch, expected,
                      "file has " + std::to_string(size) + " bytes, header implies " +
                          std::to_string(expected));
  }
}

void StreamReader::seek(std::uint64_t sample) {
  if (sample > count_) throw std::out_of_range("StreamReader::seek past end of stream");
  position_ = sample;
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(kStreamHeaderBytes + 4 * sample * static_cast<std::uint64_t>(dims_)));
}

std::optional<Matrix> StreamReader::next_batch(Index rows) {
  if (position_ >= count_ || rows <= 0) return std::nullopt;
  const auto take = static_cast<Index>(std::min<std::uint64_t>(static_cast<std::uint64_t>(rows), count_ - position_));
  std::string bytes(static_cast<std::size_t>(4 * take * dims_), '\0');
  in_.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in_.gcount()) != bytes.size()) {
    throw FormatError(FormatError::Kind::kTruncated,
                      kStreamHeaderBytes + 4 * position_ * static_cast<std::uint64_t>(dims_),
                      "stream shorter than its header count");
  }
  ByteReader r(bytes);
  Matrix out(take, dims_);
  r.tensor(out, "samples");
  position_ += static_cast<std::uint64_t>(take);
  return out;
}

Matrix StreamSource::next(Index rows) {
  auto batch = reader_.next_batch(rows);
  if (!batch || batch->rows() < rows) {
    throw TruncationError("activation stream exhausted at sample " +
                          std::to_string(reader_.position()) + " of " +
                          std::to_string(reader_.count()) + " before the training budget");
  }
  return *std::move(batch);
}

std::string fmt_num(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

std::string fmt_int(std::int64_t value) { return std::to_string(value); }

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

CsvTable& CsvTable::add(std::vector<std::string> row) {
  if (row.size() != header_.size()) throw std::invalid_argument("CsvTable: row width mismatch");
  rows_.push_back(std::move(row));
  return *this;
}

std::string CsvTable::str() const {
  std::string out;
  auto line = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const { write_file(path, str()); }

CsvTable log_table(const std::vector<LogRow>& log) {
  CsvTable t({"step", "total", "mse", "sparsity", "aux", "l0", "lambda_eff"});
  for (const LogRow& r : log) {
    t.add({fmt_int(r.step), fmt_num(r.total), fmt_num(r.mse), fmt_num(r.sparsity),
           fmt_num(r.aux), fmt_num(r.l0), fmt_num(r.lambda_eff)});
  }
  return t;
}

}  // namespace saelab
