#include <gtest/gtest.h>

#include <fstream>

#include "motionrag/binary_io.hpp"
#include "motionrag/corpus.hpp"
#include "support.hpp"

namespace motionrag {
namespace {

using testing::TempDir;

constexpr std::uint64_t kSeed0Digest = 7925004844963919273ull;

TEST(Windowing, CountsFollowSlideArithmetic) {
  WindowingConfig cfg{2.0, 2.0};
  EXPECT_EQ(segment_count(300, cfg, 30.0), 5u);
  EXPECT_EQ(segment_count(59, cfg, 30.0), 0u);
  EXPECT_EQ(segment_count(60, cfg, 30.0), 1u);
  cfg.stride_seconds = 1.0;
  EXPECT_EQ(segment_count(150, cfg, 30.0), 4u);
}

TEST(Windowing, MatchesBruteForceSlide) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const WindowingConfig cfg{0.5 + rng.uniform() * 2.0, 0.0};
    WindowingConfig c = cfg;
    c.stride_seconds = 0.1 + rng.uniform() * (c.window_seconds - 0.1);
    const std::size_t frames = 2 + rng.below(400);
    const std::size_t w = c.window_frames(30.0);
    const std::size_t s = c.stride_frames(30.0);
    std::size_t brute = 0;
    for (std::size_t start = 0; start + w <= frames; start += s) ++brute;
    EXPECT_EQ(segment_count(frames, c, 30.0), brute);
  }
}

TEST(Windowing, WindowsAreContiguousSlicesWithIds) {
  Rng rng(2);
  const MotionClip clip = testing::random_clip(rng, 130, 3, 30.0, "src");
  const auto windows = window_clip(clip, WindowingConfig{2.0, 1.0});
  ASSERT_EQ(windows.size(), 3u);
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const MotionClip& w = windows[k];
    EXPECT_EQ(w.id, window_id("src", 30 * k));
    ASSERT_TRUE(w.origin.has_value());
    EXPECT_EQ(w.origin->start_frame, 30 * k);
    EXPECT_EQ(w.origin->segment, k);
    for (std::size_t f = 0; f < w.frames(); ++f) {
      EXPECT_EQ(w.root_pos[f], clip.root_pos[30 * k + f]);
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(w.rotation(f, j).coeffs(), clip.rotation(30 * k + f, j).coeffs());
    }
  }
}

TEST(Windowing, RejectsBadConfigs) {
  EXPECT_MOTIONRAG_ERROR((WindowingConfig{1.0, 2.0}.validate(30.0)), ErrorCode::invariant, "stride exceeds window");
  EXPECT_MOTIONRAG_ERROR((WindowingConfig{0.02, 0.01}.validate(30.0)), ErrorCode::invariant, "2 frames");
}

TEST(SynthCorpus, SixteenClipsValidateAndAreDeterministic) {
  const Corpus a = synthesize_test_corpus(0, 16);
  EXPECT_EQ(a.clips.size(), 16u);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.total_segments(), 64u);
  const Corpus b = synthesize_test_corpus(0, 16);
  EXPECT_EQ(corpus_digest(a), corpus_digest(b));
  EXPECT_NE(corpus_digest(a), corpus_digest(synthesize_test_corpus(1, 16)));
}

TEST(SynthCorpus, GoldenDigest) {
  const std::uint64_t d = corpus_digest(synthesize_test_corpus(0, 16));
  EXPECT_EQ(d, kSeed0Digest);
}

TEST(SynthCorpus, BeatsLieInsideClipsAndIncrease) {
  const Corpus c = synthesize_test_corpus(3, 4);
  for (const auto& clip : c.clips) {
    const auto& beats = c.beats.at(clip.id);
    ASSERT_FALSE(beats.empty());
    for (std::size_t i = 0; i < beats.size(); ++i) {
      EXPECT_GE(beats[i], 0.0);
      EXPECT_LE(beats[i], static_cast<double>(clip.frames() - 1) / clip.fps);
      if (i > 0) {
        EXPECT_GT(beats[i], beats[i - 1]);
      }
    }
  }
}

TEST(Corpus, SaveLoadRoundTripIsLossless) {
  TempDir dir("roundtrip");
  const Corpus c = synthesize_test_corpus(5, 3);
  save_corpus(c, dir.path());
  const Corpus back = load_corpus(dir.path());
  EXPECT_EQ(corpus_digest(back), corpus_digest(c));
  ASSERT_EQ(back.clips.size(), c.clips.size());
  for (std::size_t i = 0; i < c.clips.size(); ++i) EXPECT_TRUE(back.clips[i] == c.clips[i]);
  EXPECT_EQ(back.beats, c.beats);
  EXPECT_TRUE(back.skeleton == c.skeleton);
}

TEST(Corpus, SingleClipRoundTrip) {
  TempDir dir("single");
  const Corpus c = synthesize_test_corpus(9, 1);
  save_corpus(c, dir.path());
  EXPECT_EQ(load_corpus(dir.path()).clips.size(), 1u);
}

TEST(Corpus, EmptyDirectoryReportsMissingManifest) {
  TempDir dir("empty");
  EXPECT_MOTIONRAG_ERROR(load_corpus(dir.path()), ErrorCode::data, "manifest missing");
}

TEST(Corpus, OneFrameClipIsRejectedByName) {
  TempDir dir("oneframe");
  const Corpus c = synthesize_test_corpus(4, 2);
  save_corpus(c, dir.path());
  const MotionClip one = c.clips[1].slice(0, 1, c.clips[1].id);
  write_file_atomic(dir / (c.clips[1].id + ".motion"), encode_motion(one));
  EXPECT_MOTIONRAG_ERROR(load_corpus(dir.path()), ErrorCode::invariant, "frame count < 2");
  try {
    load_corpus(dir.path());
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(c.clips[1].id), std::string::npos);
  }
}

TEST(Corpus, MalformedManifestIsDataError) {
  TempDir dir("malformed");
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_MOTIONRAG_ERROR(load_corpus(dir.path()), ErrorCode::data, "malformed");
}

TEST(Corpus, ValidateNamesMissingFeatures) {
  Corpus c = synthesize_test_corpus(6, 2);
  c.music_feats.erase(c.clips[0].id);
  EXPECT_MOTIONRAG_ERROR(c.validate(), ErrorCode::invariant, "missing music features");
}

TEST(Corpus, ValidateRejectsUnsortedBeats) {
  Corpus c = synthesize_test_corpus(6, 2);
  auto& b = c.beats[c.clips[0].id];
  ASSERT_GE(b.size(), 2u);
  std::swap(b[0], b[1]);
  EXPECT_MOTIONRAG_ERROR(c.validate(), ErrorCode::invariant, "strictly increasing");
}

TEST(Formats, MotionFileIsBitExact) {
  Rng rng(7);
  const MotionClip c = testing::random_clip(rng, 12, 4, 24.0, "m");
  const auto bytes = encode_motion(c);
  EXPECT_EQ(std::string(bytes.data(), 8), "MRAGMOTN");
  const MotionClip back = decode_motion(bytes, "m", "memory");
  EXPECT_TRUE(back == c);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_MOTIONRAG_ERROR(decode_motion(truncated, "m", "memory"), ErrorCode::data, "memory");
}

TEST(Formats, FeatureAndBeatFilesRoundTrip) {
  TempDir dir("formats");
  FeatureMatrix m(3, 5);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(i) * 0.25f - 1.0f;
  save_features(dir / "f.f32", m);
  EXPECT_EQ(load_features(dir / "f.f32"), m);
  const std::vector<double> beats{0.1, 0.5, 1.0 / 3.0 + 1.0};
  save_beats(dir / "b.beats", beats);
  EXPECT_EQ(load_beats(dir / "b.beats"), beats);
  std::ofstream(dir / "bad.beats") << "0.5\nabc\n";
  EXPECT_MOTIONRAG_ERROR(load_beats(dir / "bad.beats"), ErrorCode::data, "malformed beat");
}

TEST(Formats, AtomicWriteLeavesNoTemporary) {
  TempDir dir("atomic");
  write_file_atomic(dir / "x.bin", std::string_view("hello"));
  EXPECT_TRUE(std::filesystem::exists(dir / "x.bin"));
  EXPECT_FALSE(std::filesystem::exists(dir / "x.bin.tmp"));
  EXPECT_MOTIONRAG_ERROR(write_file_atomic(dir / "missing" / "x.bin", std::string_view("x")), ErrorCode::data,
                         "cannot write");
}

}  // namespace
}  // namespace motionrag
