#include <benchmark/benchmark.h>

#include "motionrag/contrastive.hpp"
#include "motionrag/corpus.hpp"
#include "motionrag/diffusion.hpp"
#include "motionrag/graph.hpp"
#include "motionrag/metrics.hpp"
#include "motionrag/synthesis.hpp"

namespace motionrag {
namespace {

const Corpus& corpus() {
  static const Corpus c = synthesize_test_corpus(0, 16);
  return c;
}

void BM_ForwardKinematics(benchmark::State& state) {
  const MotionClip& clip = corpus().clips.front();
  for (auto _ : state) benchmark::DoNotOptimize(forward_kinematics(corpus().skeleton, clip));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * clip.frames()));
}
BENCHMARK(BM_ForwardKinematics);

void BM_BuildGraph(benchmark::State& state) {
  const Corpus c = synthesize_test_corpus(1, static_cast<std::size_t>(state.range(0)));
  const auto windows = window_clips(c, c.windowing);
  for (auto _ : state) benchmark::DoNotOptimize(build_graph(windows, c.skeleton, GraphBuildConfig{}));
  state.counters["windows"] = static_cast<double>(windows.size());
}
BENCHMARK(BM_BuildGraph)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Generate(benchmark::State& state) {
  const Corpus& c = corpus();
  const MotionGraph pruned = prune(build_graph(window_clips(c, c.windowing), c.skeleton, GraphBuildConfig{}));
  TrainConfig tc;
  tc.epochs = 5;
  const ContrastiveModel model = train(c, tc).model;
  const NodeLibrary lib = make_library(pruned, c, model);
  const Eigen::MatrixXd music = embed(model, c.music_feats.at(c.clips[0].id).cast<double>(), Side::music);
  const auto frames = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    ClipSink sink("bench");
    benchmark::DoNotOptimize(generate(pruned, lib, music, frames, SynthesisConfig{}, sink));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * frames));
}
BENCHMARK(BM_Generate)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_DenoiserPredict(benchmark::State& state) {
  const Corpus& c = corpus();
  const auto windows = window_clips(c, c.windowing);
  std::vector<Eigen::MatrixXd> raws{encode_window(windows[0]), encode_window(windows[1])};
  DiffusionConfig cfg;
  const DiffusionModel model = DiffusionModel::create(cfg, c.skeleton, c.music_dim, 32, Normalizer::fit(raws), 0);
  Rng rng(0);
  ConditionSet cs;
  cs.music = Eigen::MatrixXd::Zero(2, static_cast<Eigen::Index>(c.music_dim));
  cs.beat = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cfg.frames));
  cs.topk.assign(cfg.top_k, model.normalizer.apply(raws[0]));
  cs.contrastive_emb = Eigen::VectorXd::Zero(32);
  const Eigen::MatrixXd x = model.normalizer.apply(raws[1]);
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(x, 10, cs));
}
BENCHMARK(BM_DenoiserPredict)->Unit(benchmark::kMillisecond);

void BM_Frechet(benchmark::State& state) {
  const auto dim = state.range(0);
  Rng rng(0);
  Eigen::MatrixXd a(4 * dim, dim), b(4 * dim, dim);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.normal();
    b.data()[i] = rng.normal() + 0.5;
  }
  const FeatureSummary sa = FeatureSummary::of(a), sb = FeatureSummary::of(b);
  for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(sa, sb));
}
BENCHMARK(BM_Frechet)->Arg(32)->Arg(128);

}  // namespace
}  // namespace motionrag

BENCHMARK_MAIN();
