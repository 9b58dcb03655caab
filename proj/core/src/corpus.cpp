#include "motionrag/corpus.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

#include "motionrag/error.hpp"

namespace motionrag {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::size_t to_frames(double seconds, double fps) {
  return static_cast<std::size_t>(std::llround(seconds * fps));
}

json skeleton_to_json(const Skeleton& s) {
  json joints = json::array();
  for (std::size_t j = 0; j < s.joint_count(); ++j) {
    joints.push_back({{"name", s.joint_names[j]},
                      {"parent", s.parent[j]},
                      {"offset", {s.offset[j].x(), s.offset[j].y(), s.offset[j].z()}}});
  }
  return {{"joints", joints}, {"foot_joints", s.foot_joints}};
}

Skeleton skeleton_from_json(const json& j) {
  Skeleton s;
  for (const auto& joint : j.at("joints")) {
    s.joint_names.push_back(joint.at("name").get<std::string>());
    s.parent.push_back(joint.at("parent").get<int>());
    const auto& o = joint.at("offset");
    if (o.size() != 3) fail(ErrorCode::data, "skeleton offset must have 3 components");
    s.offset.emplace_back(o[0].get<double>(), o[1].get<double>(), o[2].get<double>());
  }
  s.foot_joints = j.at("foot_joints").get<std::vector<int>>();
  return s;
}

template <typename Fn>
auto with_record(const std::string& record, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), record + ": " + e.what());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::data, record + ": malformed record (" + e.what() + ")");
  }
}

}  // namespace

std::size_t WindowingConfig::window_frames(double fps) const { return to_frames(window_seconds, fps); }

std::size_t WindowingConfig::stride_frames(double fps) const { return to_frames(stride_seconds, fps); }

void WindowingConfig::validate(double fps) const {
  if (!(window_seconds > 0.0) || !(stride_seconds > 0.0)) {
    fail(ErrorCode::invariant, "window and stride must be positive");
  }
  if (stride_seconds > window_seconds) fail(ErrorCode::invariant, "stride exceeds window");
  if (window_frames(fps) < 2) fail(ErrorCode::invariant, "window shorter than 2 frames");
  if (stride_frames(fps) < 1) fail(ErrorCode::invariant, "stride shorter than 1 frame");
}

std::size_t segment_count(std::size_t frames, const WindowingConfig& cfg, double fps) {
  const std::size_t window = cfg.window_frames(fps);
  const std::size_t stride = cfg.stride_frames(fps);
  if (frames < window) return 0;
  return (frames - window) / stride + 1;
}

std::string window_id(const std::string& source_id, std::size_t start_frame) {
  return source_id + "@" + std::to_string(start_frame);
}

void Corpus::validate() const {
  skeleton.validate();
  windowing.validate(fps);
  std::set<std::string> ids;
  for (const MotionClip& c : clips) {
    const std::string record = "clip '" + c.id + "'";
    if (!ids.insert(c.id).second) fail(ErrorCode::invariant, record + ": duplicate clip id");
    c.validate();
    if (c.fps != fps) fail(ErrorCode::invariant, record + ": fps differs from manifest");
    if (c.joints != skeleton.joint_count()) {
      fail(ErrorCode::invariant, record + ": joint count differs from skeleton");
    }
    const std::size_t segments = segment_count(c.frames(), windowing, fps);
    const auto check_feats = [&](const std::map<std::string, FeatureMatrix>& table,
                                 std::size_t dim, const char* kind) {
      const auto it = table.find(c.id);
      if (it == table.end()) fail(ErrorCode::invariant, record + ": missing " + kind + " features");
      if (static_cast<std::size_t>(it->second.rows()) != segments) {
        fail(ErrorCode::invariant, record + ": " + kind + " feature rows " +
                                       std::to_string(it->second.rows()) + " != segment count " +
                                       std::to_string(segments));
      }
      if (static_cast<std::size_t>(it->second.cols()) != dim) {
        fail(ErrorCode::invariant, record + ": " + kind + " feature dim mismatch");
      }
      if (!it->second.allFinite()) fail(ErrorCode::invariant, record + ": non-finite features");
    };
    check_feats(music_feats, music_dim, "music");
    check_feats(motion_feats, motion_dim, "motion");
    const auto beat_it = beats.find(c.id);
    if (beat_it == beats.end()) fail(ErrorCode::invariant, record + ": missing beats");
    const double duration = static_cast<double>(c.frames() - 1) / fps;
    const auto& b = beat_it->second;
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (!(b[i] >= 0.0 && b[i] <= duration)) {
        fail(ErrorCode::invariant, record + ": beat outside clip duration");
      }
      if (i > 0 && !(b[i] > b[i - 1])) {
        fail(ErrorCode::invariant, record + ": beats not strictly increasing");
      }
    }
  }
  if (music_feats.size() != clips.size() || motion_feats.size() != clips.size() ||
      beats.size() != clips.size()) {
    fail(ErrorCode::invariant, "feature or beat tables reference unknown clips");
  }
}

const MotionClip& Corpus::clip(const std::string& id) const {
  for (const MotionClip& c : clips) {
    if (c.id == id) return c;
  }
  fail(ErrorCode::data, "unknown clip id '" + id + "'");
}

std::size_t Corpus::total_segments() const {
  std::size_t n = 0;
  for (const MotionClip& c : clips) n += segment_count(c.frames(), windowing, fps);
  return n;
}

Corpus load_corpus(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) fail(ErrorCode::data, "manifest missing in " + dir.string());
  const auto bytes = read_file(manifest_path);
  json manifest;
  try {
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorCode::data, "manifest.json: malformed JSON (" + std::string(e.what()) + ")");
  }

  Corpus corpus;
  with_record("manifest.json", [&] {
    if (manifest.value("version", kManifestVersion) != kManifestVersion) {
      fail(ErrorCode::data, "unsupported manifest version");
    }
    corpus.fps = manifest.at("fps").get<double>();
    const auto& sk = manifest.at("skeleton");
    if (sk.is_string()) {
      const auto sk_bytes = read_file(dir / sk.get<std::string>());
      corpus.skeleton = skeleton_from_json(json::parse(sk_bytes.begin(), sk_bytes.end()));
    } else {
      corpus.skeleton = skeleton_from_json(sk);
    }
    if (manifest.contains("windowing")) {
      corpus.windowing.window_seconds = manifest["windowing"].at("window_seconds").get<double>();
      corpus.windowing.stride_seconds = manifest["windowing"].at("stride_seconds").get<double>();
    }
    corpus.music_dim = manifest.at("feat_dims").at("music").get<std::size_t>();
    corpus.motion_dim = manifest.at("feat_dims").at("motion").get<std::size_t>();
  });
  corpus.skeleton.validate();

  const auto& clips = with_record("manifest.json", [&]() -> const json& { return manifest.at("clips"); });
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const json& entry = clips[i];
    const std::string id = entry.value("id", "#" + std::to_string(i));
    with_record("clip '" + id + "'", [&] {
      MotionClip clip = load_motion(dir / entry.at("motion_file").get<std::string>(), id);
      clip.validate();
      corpus.beats[id] = load_beats(dir / entry.at("beats_file").get<std::string>());
      corpus.music_feats[id] = load_features(dir / entry.at("music_feat_file").get<std::string>());
      corpus.motion_feats[id] = load_features(dir / entry.at("motion_feat_file").get<std::string>());
      corpus.clips.push_back(std::move(clip));
    });
  }
  corpus.validate();
  return corpus;
}

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  corpus.validate();
  fs::create_directories(dir);
  json clips = json::array();
  for (const MotionClip& c : corpus.clips) {
    const std::string stem = c.id;
    json entry = {{"id", c.id},
                  {"motion_file", stem + ".motion"},
                  {"beats_file", stem + ".beats"},
                  {"music_feat_file", stem + ".music.f32"},
                  {"motion_feat_file", stem + ".dance.f32"}};
    save_motion(dir / entry["motion_file"].get<std::string>(), c);
    save_beats(dir / entry["beats_file"].get<std::string>(), corpus.beats.at(c.id));
    save_features(dir / entry["music_feat_file"].get<std::string>(), corpus.music_feats.at(c.id));
    save_features(dir / entry["motion_feat_file"].get<std::string>(), corpus.motion_feats.at(c.id));
    clips.push_back(std::move(entry));
  }
  json manifest = {
      {"format", "motionrag-corpus"},
      {"version", kManifestVersion},
      {"fps", corpus.fps},
      {"windowing",
       {{"window_seconds", corpus.windowing.window_seconds},
        {"stride_seconds", corpus.windowing.stride_seconds}}},
      {"feat_dims", {{"music", corpus.music_dim}, {"motion", corpus.motion_dim}}},
      {"skeleton", skeleton_to_json(corpus.skeleton)},
      {"clips", clips},
  };
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<MotionClip> window_clip(const MotionClip& clip, const WindowingConfig& cfg) {
  cfg.validate(clip.fps);
  const std::size_t window = cfg.window_frames(clip.fps);
  const std::size_t stride = cfg.stride_frames(clip.fps);
  const std::size_t n = segment_count(clip.frames(), cfg, clip.fps);
  std::vector<MotionClip> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t start = k * stride;
    MotionClip w = clip.slice(start, window, window_id(clip.id, start));
    w.origin = ClipOrigin{clip.id, start, k};
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<MotionClip> window_clips(const Corpus& corpus, const WindowingConfig& cfg) {
  std::vector<MotionClip> out;
  for (const MotionClip& c : corpus.clips) {
    auto windows = window_clip(c, cfg);
    out.insert(out.end(), std::make_move_iterator(windows.begin()),
               std::make_move_iterator(windows.end()));
  }
  return out;
}

std::uint64_t corpus_digest(const Corpus& corpus) {
  ByteWriter w;
  for (std::size_t j = 0; j < corpus.skeleton.joint_count(); ++j) {
    w.put_string(corpus.skeleton.joint_names[j]);
    w.put<std::int32_t>(corpus.skeleton.parent[j]);
    for (int k = 0; k < 3; ++k) w.put<double>(corpus.skeleton.offset[j][k]);
  }
  for (int f : corpus.skeleton.foot_joints) w.put<std::int32_t>(f);
  w.put<double>(corpus.fps);
  w.put<double>(corpus.windowing.window_seconds);
  w.put<double>(corpus.windowing.stride_seconds);
  for (const MotionClip& c : corpus.clips) {
    w.put_string(c.id);
    const auto motion = encode_motion(c);
    w.put_bytes(std::string_view(motion.data(), motion.size()));
    for (double b : corpus.beats.at(c.id)) w.put<double>(b);
    for (const auto* table : {&corpus.music_feats, &corpus.motion_feats}) {
      const FeatureMatrix& m = table->at(c.id);
      w.put<std::int64_t>(m.rows());
      w.put<std::int64_t>(m.cols());
      for (Eigen::Index i = 0; i < m.size(); ++i) w.put<float>(m.data()[i]);
    }
  }
  return fnv1a(w.bytes().data(), w.bytes().size());
}

}  // namespace motionrag
