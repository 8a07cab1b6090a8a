#include "gradmatch/persist.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gradmatch/errors.hpp"

namespace gradmatch::persist {

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw ContractError(std::string("checkpoint: ") + what + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_checkpoint(const data::SyntheticSet& set, ad::Precision precision) {
  set.validate();
  const Shape s = set.sample_shape();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint16_t>(out, kVersion);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(precision));
  put<std::uint32_t>(out, checked_u32(set.num_classes, "class count"));
  put<std::uint32_t>(out, checked_u32(set.ipc, "ipc"));
  for (std::size_t d : s) put<std::uint32_t>(out, checked_u32(d, "image dimension"));
  for (int y : set.labels) put<std::uint32_t>(out, static_cast<std::uint32_t>(y));
  const std::size_t payload_start = out.size();
  for (double v : set.images.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  const std::uint32_t crc = crc32(std::span(out).subspan(payload_start));
  put<std::uint32_t>(out, crc);
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(sizeof(kMagic), "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw FormatError("checkpoint: bad magic (not DCSET1)");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto prec = r.get<std::uint16_t>("precision");
  if (prec != 64 && prec != 32) throw FormatError("checkpoint: bad precision field " + std::to_string(prec));
  const std::size_t classes = r.get<std::uint32_t>("class count");
  const std::size_t ipc = r.get<std::uint32_t>("ipc");
  const std::size_t cin = r.get<std::uint32_t>("channels");
  const std::size_t h = r.get<std::uint32_t>("height");
  const std::size_t w = r.get<std::uint32_t>("width");
  if (classes < 1 || ipc < 1 || cin < 1 || h < 1 || w < 1) throw FormatError("checkpoint: zero dimension in header");
  const std::size_t rows = classes * ipc;
  const std::size_t count = rows * cin * h * w;
  if (r.remaining() != rows * 4 + count * 8 + 4) {
    throw FormatError("checkpoint: file size does not match header (" + std::to_string(classes) + " classes, ipc " +
                      std::to_string(ipc) + ", sample " + std::to_string(cin) + "x" + std::to_string(h) + "x" +
                      std::to_string(w) + ")");
  }
  std::vector<int> labels(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto y = r.get<std::uint32_t>("labels");
    if (y != i / ipc) throw FormatError("checkpoint: labels are not class-major and balanced");
    labels[i] = static_cast<int>(y);
  }
  const auto payload = r.take(count * 8, "payload");
  const auto stored = r.get<std::uint32_t>("checksum");
  if (crc32(payload) != stored) throw FormatError("checkpoint: payload checksum mismatch");
  std::vector<double> values(count);
  Reader pr(payload);
  for (double& v : values) v = std::bit_cast<double>(pr.get<std::uint64_t>("payload"));
  Checkpoint out;
  out.set = data::make_synthetic(Tensor({rows, cin, h, w}, std::move(values)), ipc, classes);
  out.precision = static_cast<ad::Precision>(prec);
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

void save_checkpoint(const std::filesystem::path& path, const data::SyntheticSet& set, ad::Precision precision) {
  write_file(path, encode_checkpoint(set, precision));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_pgm_grid(const std::filesystem::path& path, const data::SyntheticSet& set, const data::NormStats& stats) {
  const Tensor img = data::denormalize_clamped(set.images, stats);
  const std::size_t cin = img.dim(1), h = img.dim(2), w = img.dim(3);
  constexpr std::size_t gap = 1;
  const std::size_t width = set.ipc * w + (set.ipc - 1) * gap;
  const std::size_t height = set.num_classes * h + (set.num_classes - 1) * gap;
  std::vector<std::uint8_t> pixels(width * height, 0);
  for (std::size_t c = 0; c < set.num_classes; ++c)
    for (std::size_t k = 0; k < set.ipc; ++k) {
      const std::size_t n = c * set.ipc + k;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          double v = 0.0;
          for (std::size_t ch = 0; ch < cin; ++ch) v += img[((n * cin + ch) * h + i) * w + j];
          v /= static_cast<double>(cin);
          pixels[(c * (h + gap) + i) * width + k * (w + gap) + j] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file(path, bytes);
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void append_csv_row(const std::filesystem::path& path, std::span<const std::string> header,
                    std::span<const std::string> row) {
  if (header.size() != row.size()) throw ContractError("append_csv_row: row width differs from header");
  std::error_code ec;
  const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open '" + path.string() + "' for appending");
  auto line = [&](std::span<const std::string> fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << csv_escape(fields[i]);
    out << '\n';
  };
  if (fresh) line(header);
  line(row);
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace gradmatch::persist
