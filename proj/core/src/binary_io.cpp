#include "motionrag/binary_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <system_error>

#include "motionrag/error.hpp"

namespace motionrag {

namespace {

constexpr std::string_view kMotionMagic = "MRAGMOTN";
constexpr std::uint32_t kMotionVersion = 1;

}  // namespace

void ByteWriter::put_string(std::string_view s) {
  put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
  put_bytes(s);
}

void ByteReader::require(std::size_t n) const {
  if (bytes_.size() - pos_ < n) fail(ErrorCode::data, source_ + ": truncated file");
}

std::string ByteReader::get_bytes(std::size_t n) {
  require(n);
  std::string out(bytes_.data() + pos_, n);
  pos_ += n;
  return out;
}

std::string ByteReader::get_string() {
  const auto n = get<std::uint32_t>();
  return get_bytes(n);
}

void ByteReader::expect_magic(std::string_view magic) {
  if (get_bytes(magic.size()) != magic) {
    fail(ErrorCode::data, source_ + ": bad magic, expected " + std::string(magic));
  }
}

void ByteReader::expect_end() const {
  if (!at_end()) fail(ErrorCode::data, source_ + ": trailing bytes");
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::data, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::data, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(tmp, ignored);
      fail(ErrorCode::data, "short write to " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorCode::data, "cannot rename into " + path.string());
  }
}

std::vector<char> encode_motion(const MotionClip& clip) {
  ByteWriter w;
  w.put_bytes(kMotionMagic);
  w.put<std::uint32_t>(kMotionVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(clip.frames()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(clip.joints));
  w.put<double>(clip.fps);
  for (std::size_t f = 0; f < clip.frames(); ++f) {
    for (int k = 0; k < 3; ++k) w.put<double>(clip.root_pos[f][k]);
    for (std::size_t j = 0; j < clip.joints; ++j) {
      const Quat& q = clip.rotation(f, j);
      w.put<double>(q.w());
      w.put<double>(q.x());
      w.put<double>(q.y());
      w.put<double>(q.z());
    }
  }
  return w.bytes();
}

MotionClip decode_motion(std::vector<char> bytes, const std::string& id,
                         const std::string& source) {
  ByteReader r(std::move(bytes), source);
  r.expect_magic(kMotionMagic);
  if (r.get<std::uint32_t>() != kMotionVersion) fail(ErrorCode::data, source + ": unsupported version");
  const auto frames = r.get<std::uint32_t>();
  const auto joints = r.get<std::uint32_t>();
  MotionClip clip;
  clip.id = id;
  clip.fps = r.get<double>();
  clip.joints = joints;
  clip.root_pos.resize(frames);
  clip.rot.resize(static_cast<std::size_t>(frames) * joints);
  for (std::size_t f = 0; f < frames; ++f) {
    for (int k = 0; k < 3; ++k) clip.root_pos[f][k] = r.get<double>();
    for (std::size_t j = 0; j < joints; ++j) {
      const double qw = r.get<double>();
      const double qx = r.get<double>();
      const double qy = r.get<double>();
      const double qz = r.get<double>();
      clip.rotation(f, j) = Quat(qw, qx, qy, qz);
    }
  }
  r.expect_end();
  return clip;
}

void save_motion(const std::filesystem::path& path, const MotionClip& clip) {
  write_file_atomic(path, encode_motion(clip));
}

MotionClip load_motion(const std::filesystem::path& path, const std::string& id) {
  return decode_motion(read_file(path), id, path.string());
}

void save_features(const std::filesystem::path& path, const FeatureMatrix& m) {
  ByteWriter w;
  w.put<std::int32_t>(static_cast<std::int32_t>(m.rows()));
  w.put<std::int32_t>(static_cast<std::int32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.put<float>(m.data()[i]);
  write_file_atomic(path, w.bytes());
}

FeatureMatrix load_features(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  const auto rows = r.get<std::int32_t>();
  const auto cols = r.get<std::int32_t>();
  if (rows < 0 || cols < 0) fail(ErrorCode::data, path.string() + ": negative matrix shape");
  FeatureMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.get<float>();
  r.expect_end();
  return m;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void save_beats(const std::filesystem::path& path, const std::vector<double>& beats) {
  std::string text;
  for (double b : beats) {
    text += format_double(b);
    text += '\n';
  }
  write_file_atomic(path, text);
}

std::vector<double> load_beats(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<double> beats;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    double v = 0.0;
    const auto res = std::from_chars(line.data(), line.data() + line.size(), v);
    if (res.ec != std::errc() || res.ptr != line.data() + line.size()) {
      fail(ErrorCode::data, path.string() + ":" + std::to_string(line_no) + ": malformed beat");
    }
    beats.push_back(v);
  }
  return beats;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace motionrag
