#pragma once

#include <Eigen/Core>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "motionrag/kinematics.hpp"

namespace motionrag {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts need byte swapping");

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Append-only little-endian encoder.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::string_view raw) { bytes_.insert(bytes_.end(), raw.begin(), raw.end()); }
  void put_string(std::string_view s);  // u32 length + bytes

  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string source)
      : bytes_(std::move(bytes)), source_(std::move(source)) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    require(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_bytes(std::size_t n);
  std::string get_string();
  void expect_magic(std::string_view magic);
  bool at_end() const { return pos_ == bytes_.size(); }
  void expect_end() const;
  const std::string& source() const { return source_; }

 private:
  void require(std::size_t n) const;

  std::vector<char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& b) {
  write_file_atomic(path, std::string_view(b.data(), b.size()));
}

// Motion file: "MRAGMOTN", u32 version, u32 frames, u32 joints, f64 fps, then
// per frame f64 root_pos[3] followed by f64 quat[joints][4] in (w, x, y, z).
std::vector<char> encode_motion(const MotionClip& clip);
MotionClip decode_motion(std::vector<char> bytes, const std::string& id,
                         const std::string& source);
void save_motion(const std::filesystem::path& path, const MotionClip& clip);
MotionClip load_motion(const std::filesystem::path& path, const std::string& id);

// Feature file: i32 rows, i32 cols, then rows*cols float32, row-major.
void save_features(const std::filesystem::path& path, const FeatureMatrix& m);
FeatureMatrix load_features(const std::filesystem::path& path);

// Beat file: one ascending timestamp in seconds per line.
void save_beats(const std::filesystem::path& path, const std::vector<double>& beats);
std::vector<double> load_beats(const std::filesystem::path& path);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// FNV-1a over raw bytes; used for artifact digests.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ULL);

}  // namespace motionrag
