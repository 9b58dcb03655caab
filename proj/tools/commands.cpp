#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <sstream>

#include "motionrag/binary_io.hpp"
#include "motionrag/conditioning.hpp"
#include "motionrag/contrastive.hpp"
#include "motionrag/corpus.hpp"
#include "motionrag/diffusion.hpp"
#include "motionrag/error.hpp"
#include "motionrag/graph.hpp"
#include "motionrag/metrics.hpp"
#include "motionrag/synthesis.hpp"

namespace motionrag::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Eigen::MatrixXd to_double(const FeatureMatrix& m) { return m.cast<double>(); }

std::string csv_line(std::initializer_list<double> values) {
  std::string line;
  for (const double v : values) {
    if (!line.empty()) line += ',';
    line += format_double(v);
  }
  return line + "\n";
}

// Creates the parent directory of an output path.
const std::string& output(const std::string& path) {
  if (path.empty()) return path;
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  return path;
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) fail(ErrorCode::usage, std::string(what) + " not found: " + p.string());
}

const std::map<std::string, SearchStrategy> kStrategies{{"greedy", SearchStrategy::greedy},
                                                        {"beam", SearchStrategy::beam}};
const std::map<std::string, SegmentBinding> kBindings{{"per-node", SegmentBinding::per_node},
                                                      {"by-time", SegmentBinding::by_time}};
const std::map<std::string, ScheduleKind> kSchedules{{"cosine", ScheduleKind::cosine},
                                                     {"linear", ScheduleKind::linear}};
const std::map<std::string, OptimizerKind> kOptimizers{{"sgd", OptimizerKind::sgd},
                                                       {"adamw", OptimizerKind::adamw}};

// Every window of a motion under the corpus windowing, as pose sequences.
std::vector<PoseSequence> window_poses(const MotionClip& clip, const Skeleton& skeleton,
                                       const WindowingConfig& windowing) {
  std::vector<PoseSequence> out;
  for (const MotionClip& w : window_clip(clip, windowing)) out.push_back(forward_kinematics(skeleton, w));
  return out;
}

struct FeatureSet {
  Eigen::MatrixXd kinematic;
  Eigen::MatrixXd geometric;
};

FeatureSet features_of(const std::vector<PoseSequence>& poses, const Skeleton& skeleton, double fps) {
  FeatureSet fs;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Eigen::VectorXd k = kinematic_features(poses[i], fps);
    const Eigen::VectorXd g = geometric_features(poses[i], skeleton);
    if (i == 0) {
      fs.kinematic.resize(static_cast<Eigen::Index>(poses.size()), k.size());
      fs.geometric.resize(static_cast<Eigen::Index>(poses.size()), g.size());
    }
    fs.kinematic.row(static_cast<Eigen::Index>(i)) = k.transpose();
    fs.geometric.row(static_cast<Eigen::Index>(i)) = g.transpose();
  }
  return fs;
}

// ---- synth-corpus -----------------------------------------------------------

Command synth_corpus(CLI::App& app, const Globals& g) {
  struct Opts {
    std::string out;
    std::size_t clips = 16;
    double seconds = 5.0;
    bool unimodal = false;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("synth-corpus", "Write the procedural test corpus");
  sub->add_option("--out", o->out, "Corpus directory")->required();
  sub->add_option("--clips", o->clips, "Number of clips")->capture_default_str();
  sub->add_option("--seconds", o->seconds, "Seconds per clip")->capture_default_str();
  sub->add_flag("--unimodal", o->unimodal, "Single style at constant amplitude");
  return {sub, [o, &g] {
            SynthCorpusOptions so;
            so.clip_seconds = o->seconds;
            so.unimodal = o->unimodal;
            const Corpus c = synthesize_test_corpus(g.seed, o->clips, so);
            save_corpus(c, output(o->out));
            return json{{"command", "synth-corpus"},
                        {"corpus", o->out},
                        {"clips", c.clips.size()},
                        {"windows", c.total_segments()}};
          }};
}

// ---- stats ------------------------------------------------------------------

Command stats(CLI::App& app, const Globals&) {
  struct Opts {
    std::string corpus;
    std::string graph;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("stats", "Summarize a corpus and/or a graph");
  sub->add_option("--corpus", o->corpus, "Corpus directory");
  sub->add_option("--graph", o->graph, "Graph file");
  return {sub, [o] {
            if (o->corpus.empty() && o->graph.empty()) fail(ErrorCode::usage, "stats needs --corpus or --graph");
            json j{{"command", "stats"}};
            if (!o->corpus.empty()) {
              const Corpus c = load_corpus(o->corpus);
              std::size_t frames = 0;
              for (const auto& clip : c.clips) frames += clip.frames();
              j["corpus"] = {{"clips", c.clips.size()},  {"frames", frames},
                             {"windows", c.total_segments()}, {"joints", c.skeleton.joint_count()},
                             {"music_dim", c.music_dim}, {"motion_dim", c.motion_dim}};
            }
            if (!o->graph.empty()) j["graph"] = json::parse(graph_stats_json(graph_stats(load_graph(o->graph))));
            return j;
          }};
}

// ---- build-graph / prune ----------------------------------------------------

Command build_graph_cmd(CLI::App& app, const Globals&) {
  struct Opts {
    std::string corpus;
    std::string out;
    GraphBuildConfig cfg;
    bool local = false;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("build-graph", "Build the motion graph over corpus windows");
  sub->add_option("--corpus", o->corpus, "Corpus directory")->required();
  sub->add_option("--out", o->out, "Graph file")->required();
  sub->add_option("--n-mean", o->cfg.n_mean_frames, "Frames averaged for the adaptive thresholds")
      ->capture_default_str();
  sub->add_option("--joint-threshold", o->cfg.joint_threshold, "Joints that must agree (0: 75%)")
      ->capture_default_str();
  sub->add_flag("--root-relative", o->local, "Compare root-relative joint positions");
  return {sub, [o] {
            const Corpus c = load_corpus(o->corpus);
            o->cfg.use_world_positions = !o->local;
            const auto windows = window_clips(c, c.windowing);
            const MotionGraph graph = build_graph(windows, c.skeleton, o->cfg);
            save_graph(output(o->out), graph);
            json j{{"command", "build-graph"}, {"graph", o->out}};
            j["stats"] = json::parse(graph_stats_json(graph_stats(graph)));
            return j;
          }};
}

Command prune_cmd(CLI::App& app, const Globals&) {
  struct Opts {
    std::string graph;
    std::string out;
    std::string stats;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("prune", "Keep the largest strongly connected component");
  sub->add_option("--graph", o->graph, "Input graph file")->required();
  sub->add_option("--out", o->out, "Pruned graph file")->required();
  sub->add_option("--stats", o->stats, "Write the pruned graph's stats JSON here");
  return {sub, [o] {
            const MotionGraph pruned = prune(load_graph(o->graph));
            const std::string stats = graph_stats_json(graph_stats(pruned));
            save_graph(output(o->out), pruned);
            if (!o->stats.empty()) write_file_atomic(output(o->stats), stats + "\n");
            json j{{"command", "prune"}, {"graph", o->out}};
            j["stats"] = json::parse(stats);
            return j;
          }};
}

// ---- train-contrastive --------------------------------------------------------

Command train_contrastive(CLI::App& app, const Globals& g) {
  struct Opts {
    std::string corpus;
    std::string out;
    std::string loss_csv;
    std::string optimizer = "sgd";
    bool one_sided = false;
    TrainConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("train-contrastive", "Train the music/motion embedding model");
  sub->add_option("--corpus", o->corpus, "Corpus directory")->required();
  sub->add_option("--out", o->out, "Model file")->required();
  sub->add_option("--epochs", o->cfg.epochs)->capture_default_str();
  sub->add_option("--batch", o->cfg.batch_size)->capture_default_str();
  sub->add_option("--lr", o->cfg.learning_rate)->capture_default_str();
  sub->add_option("--hidden", o->cfg.hidden)->capture_default_str();
  sub->add_option("--latent", o->cfg.latent)->capture_default_str();
  sub->add_option("--weight-decay", o->cfg.weight_decay, "AdamW only")->capture_default_str();
  sub->add_option("--optimizer", o->optimizer)->check(CLI::IsMember({"sgd", "adamw"}))->capture_default_str();
  sub->add_flag("--one-sided", o->one_sided, "Music-to-motion loss term only");
  sub->add_option("--loss-csv", o->loss_csv, "Per-epoch loss CSV");
  return {sub, [o, &g] {
            const Corpus c = load_corpus(o->corpus);
            o->cfg.seed = g.seed;
            o->cfg.symmetric_loss = !o->one_sided;
            o->cfg.optimizer = kOptimizers.at(o->optimizer);
            const TrainResult r = train(c, o->cfg);
            save_model(output(o->out), r.model);
            if (!o->loss_csv.empty()) {
              std::string csv = "epoch,loss\n";
              for (std::size_t e = 0; e < r.loss_history.size(); ++e) {
                csv += std::to_string(e) + "," + format_double(r.loss_history[e]) + "\n";
              }
              write_file_atomic(output(o->loss_csv), csv);
            }
            const PairTable pairs = corpus_pairs(c);
            return json{{"command", "train-contrastive"},
                        {"model", o->out},
                        {"loss_initial", r.loss_history.front()},
                        {"loss_final", r.loss_history.back()},
                        {"tau", r.model.tau()},
                        {"top1", top1_accuracy(r.model, pairs.music, pairs.motion)}};
          }};
}

// ---- generate ---------------------------------------------------------------

Command generate_cmd(CLI::App& app, const Globals& g) {
  struct Opts {
    std::string graph, model, corpus, music, out, trace;
    std::size_t frames = 0;
    std::string strategy = "greedy";
    std::string binding = "per-node";
    SynthesisConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("generate", "Walk the pruned graph under music guidance (motion_mg)");
  sub->add_option("--graph", o->graph, "Pruned graph file")->required();
  sub->add_option("--model", o->model, "Contrastive model file")->required();
  sub->add_option("--corpus", o->corpus, "Corpus the graph was built from")->required();
  sub->add_option("--music-feats", o->music, "Music segment features (f32 matrix file)")->required();
  sub->add_option("--frames", o->frames, "Output length in frames")->required();
  sub->add_option("--blend", o->cfg.blend_frames, "Transition blend frames W")->capture_default_str();
  sub->add_option("--strategy", o->strategy)->check(CLI::IsMember({"greedy", "beam"}))->capture_default_str();
  sub->add_option("--beam-width", o->cfg.beam_width)->capture_default_str();
  sub->add_option("--beam-depth", o->cfg.beam_depth)->capture_default_str();
  sub->add_option("--binding", o->binding, "Music segment binding")
      ->check(CLI::IsMember({"per-node", "by-time"}))
      ->capture_default_str();
  sub->add_option("--out", o->out, "Motion file")->required();
  sub->add_option("--trace", o->trace, "Trace JSON");
  return {sub, [o, &g] {
            if (o->frames == 0) fail(ErrorCode::usage, "--frames must be >= 1");
            const MotionGraph graph = load_graph(o->graph);
            const ContrastiveModel model = load_model(o->model);
            const Corpus corpus = load_corpus(o->corpus);
            const Eigen::MatrixXd music_emb = embed(model, to_double(load_features(o->music)), Side::music);
            const NodeLibrary lib = make_library(graph, corpus, model);
            o->cfg.strategy = kStrategies.at(o->strategy);
            o->cfg.binding = kBindings.at(o->binding);
            o->cfg.segment_stride_frames = corpus.windowing.stride_frames(corpus.fps);
            o->cfg.seed = g.seed;
            MotionFileSink sink(output(o->out));
            GenerateOptions opts;
            opts.record_trace = !o->trace.empty();
            const GenerationTrace trace = generate(graph, lib, music_emb, o->frames, o->cfg, sink, opts);
            if (!o->trace.empty()) write_file_atomic(output(o->trace), trace_json(trace, graph) + "\n");
            return json{{"command", "generate"},
                        {"motion", o->out},
                        {"frames", trace.frames},
                        {"node_visits", trace.node_visits},
                        {"transitions", trace.seams.transitions},
                        {"seam_mean_unblended", trace.seams.mean_unblended},
                        {"seam_mean_blended", trace.seams.mean_blended}};
          }};
}

// ---- train-diffusion --------------------------------------------------------

Command train_diffusion_cmd(CLI::App& app, const Globals& g) {
  struct Opts {
    std::string corpus, model, out, loss_csv;
    std::string schedule = "cosine";
    bool no_ema = false;
    DiffusionConfig cfg;
    DiffusionTrainConfig train;
  };
  auto o = std::make_shared<Opts>();
  o->train.epochs = 300;
  CLI::App* sub = app.add_subcommand("train-diffusion", "Train the conditional diffusion refiner");
  sub->add_option("--corpus", o->corpus, "Corpus directory")->required();
  sub->add_option("--model", o->model, "Contrastive model file")->required();
  sub->add_option("--out", o->out, "Diffusion checkpoint")->required();
  sub->add_option("--loss-csv", o->loss_csv, "Per-epoch component losses");
  sub->add_option("--epochs", o->train.epochs)->capture_default_str();
  sub->add_option("--batch", o->train.batch_size)->capture_default_str();
  sub->add_option("--lr", o->train.learning_rate)->capture_default_str();
  sub->add_option("--ema-decay", o->train.ema_decay)->capture_default_str();
  sub->add_flag("--no-ema", o->no_ema, "Keep the raw final weights");
  sub->add_option("--lambda-pos", o->train.weights.pos)->capture_default_str();
  sub->add_option("--lambda-vel", o->train.weights.vel)->capture_default_str();
  sub->add_option("--lambda-contact", o->train.weights.contact)->capture_default_str();
  sub->add_option("--steps", o->cfg.steps, "Diffusion steps T")->capture_default_str();
  sub->add_option("--schedule", o->schedule)->check(CLI::IsMember({"cosine", "linear"}))->capture_default_str();
  sub->add_option("--hidden", o->cfg.hidden)->check(CLI::Range(2, 128))->capture_default_str();
  sub->add_option("--blocks", o->cfg.blocks)->capture_default_str();
  sub->add_option("--mlp-hidden", o->cfg.mlp_hidden)->capture_default_str();
  sub->add_option("--top-k", o->cfg.top_k)->capture_default_str();
  return {sub, [o, &g] {
            const Corpus corpus = load_corpus(o->corpus);
            const ContrastiveModel cm = load_model(o->model);
            o->cfg.schedule = kSchedules.at(o->schedule);
            o->cfg.frames = corpus.windowing.window_frames(corpus.fps);
            o->train.seed = g.seed;
            o->train.ema = !o->no_ema;
            const DiffusionDataset ds = build_training_set(corpus, cm, o->cfg.frames, o->cfg.top_k);
            DiffusionModel model = DiffusionModel::create(o->cfg, corpus.skeleton, corpus.music_dim,
                                                          cm.music_head.shape().latent, ds.normalizer, g.seed);
            const DiffusionTrainResult r = train_diffusion(model, ds.examples, o->train);
            save_diffusion(output(o->out), model);
            if (!o->loss_csv.empty()) {
              std::string csv = "epoch,total,simple,pos,vel,contact\n";
              for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
                const LossComponents& l = r.epoch_losses[e];
                csv += std::to_string(e) + "," + csv_line({l.total, l.simple, l.pos, l.vel, l.contact});
              }
              write_file_atomic(output(o->loss_csv), csv);
            }
            json j{{"command", "train-diffusion"},
                   {"checkpoint", o->out},
                   {"examples", ds.examples.size()},
                   {"optimizer_steps", r.optimizer_steps}};
            if (!r.epoch_losses.empty()) {
              j["loss_first_epoch"] = r.epoch_losses.front().total;
              j["loss_last_epoch"] = r.epoch_losses.back().total;
            }
            return j;
          }};
}

// ---- refine -----------------------------------------------------------------

Command refine_cmd(CLI::App& app, const Globals& g) {
  struct Opts {
    std::string checkpoint, model, corpus, motion, music, beats, out;
    RefineConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("refine", "Refine motion_mg with the diffusion model (motion_diff)");
  sub->add_option("--diffusion", o->checkpoint, "Diffusion checkpoint")->required();
  sub->add_option("--model", o->model, "Contrastive model file")->required();
  sub->add_option("--corpus", o->corpus, "Corpus used for top-k retrieval")->required();
  sub->add_option("--motion", o->motion, "Stage-1 motion file")->required();
  sub->add_option("--music-feats", o->music, "Music segment features (f32 matrix file)")->required();
  sub->add_option("--beats", o->beats, "Music beat file (seconds, one per line)")->required();
  sub->add_option("--blend", o->cfg.blend_frames, "Blend frames between refined windows")->capture_default_str();
  sub->add_option("--out", o->out, "Refined motion file")->required();
  return {sub, [o, &g] {
            require_file(o->motion, "motion file");
            const DiffusionModel model = load_diffusion(o->checkpoint);
            const ContrastiveModel cm = load_model(o->model);
            const Corpus corpus = load_corpus(o->corpus);
            if (!(corpus.skeleton == model.skeleton)) {
              fail(ErrorCode::invariant, "corpus skeleton differs from the checkpoint's");
            }
            const RetrievalIndex index = make_retrieval_index(corpus, cm, model.normalizer);
            const MotionClip mg = load_motion(o->motion, fs::path(o->motion).stem().string());
            const std::vector<double> beats = load_beats(o->beats);
            o->cfg.seed = g.seed;
            const MotionClip refined =
                refine(model, cm, index, mg, to_double(load_features(o->music)), beats, o->cfg);
            save_motion(output(o->out), refined);
            return json{{"command", "refine"}, {"motion", o->out}, {"frames", refined.frames()}};
          }};
}

// ---- evaluate ---------------------------------------------------------------

Command evaluate_cmd(CLI::App& app, const Globals&) {
  struct Opts {
    std::string generated, gt, beats, out;
    std::vector<std::string> motions;
    MetricsConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  CLI::App* sub = app.add_subcommand("evaluate", "BAS, diversity, Frechet distances and seam statistics");
  sub->add_option("--generated", o->generated, "Directory of generated .motion files");
  sub->add_option("--motion", o->motions, "Generated motion file (repeatable)");
  sub->add_option("--gt", o->gt, "Ground-truth corpus directory")->required();
  sub->add_option("--beats", o->beats, "Music beat file")->required();
  sub->add_option("--sigma", o->cfg.sigma, "BAS kernel width, seconds")->capture_default_str();
  sub->add_flag("--transpose-bas", o->cfg.transpose_bas, "Average over dance beats instead of music beats");
  sub->add_option("--out", o->out, "Report JSON")->required();
  return {sub, [o] {
            o->cfg.validate();
            std::vector<fs::path> files(o->motions.begin(), o->motions.end());
            if (!o->generated.empty()) {
              require_file(o->generated, "generated directory");
              for (const auto& e : fs::directory_iterator(o->generated)) {
                if (e.path().extension() == ".motion") files.push_back(e.path());
              }
            }
            std::sort(files.begin(), files.end());
            if (files.empty()) fail(ErrorCode::usage, "evaluate needs --generated or --motion");

            const Corpus corpus = load_corpus(o->gt);
            const std::vector<double> music_beats = load_beats(o->beats);
            std::vector<PoseSequence> gt_windows;
            for (const MotionClip& c : corpus.clips) {
              for (auto& p : window_poses(c, corpus.skeleton, corpus.windowing)) gt_windows.push_back(std::move(p));
            }
            const FeatureSet gt = features_of(gt_windows, corpus.skeleton, corpus.fps);
            const FeatureSummary gt_k = FeatureSummary::of(gt.kinematic);
            const FeatureSummary gt_g = FeatureSummary::of(gt.geometric);

            json motions = json::object();
            for (const fs::path& f : files) {
              const MotionClip clip = load_motion(f, f.stem().string());
              if (clip.joints != corpus.skeleton.joint_count()) {
                fail(ErrorCode::invariant, f.string() + ": joint count differs from the ground-truth skeleton");
              }
              const PoseSequence pose = forward_kinematics(corpus.skeleton, clip);
              const auto windows = window_poses(clip, corpus.skeleton, corpus.windowing);
              json m{{"frames", clip.frames()}, {"windows", windows.size()}};
              m["bas"] = beat_alignment_score(music_beats, motion_beats(pose, clip.fps), o->cfg);
              if (windows.size() >= 2) {
                const FeatureSet fsx = features_of(windows, corpus.skeleton, clip.fps);
                m["div_k"] = diversity(fsx.kinematic);
                m["div_g"] = diversity(fsx.geometric);
                m["fid_k"] = frechet_distance(FeatureSummary::of(fsx.kinematic), gt_k);
                m["fid_g"] = frechet_distance(FeatureSummary::of(fsx.geometric), gt_g);
              } else {
                m["div_k"] = m["div_g"] = m["fid_k"] = m["fid_g"] = nullptr;
              }
              const JumpStats js = jump_stats(frame_jumps(pose));
              m["seam_stats"] = {{"mean_jump", js.mean},
                                 {"p95_jump", js.p95},
                                 {"max_jump", js.max},
                                 {"jumps_over_3x_p95", js.over_3x_p95}};
              motions[f.stem().string()] = std::move(m);
            }
            json report{{"sigma", o->cfg.sigma},
                        {"transpose_bas", o->cfg.transpose_bas},
                        {"feature_note", "simplified kinematic/geometric features; not comparable to published FID/DIV"},
                        {"ground_truth_windows", gt_windows.size()},
                        {"motions", motions}};
            write_file_atomic(output(o->out), report.dump(2) + "\n");
            json j{{"command", "evaluate"}, {"report", o->out}};
            for (const auto& [name, m] : motions.items()) j[name + ".bas"] = m["bas"];
            return j;
          }};
}

}  // namespace

std::vector<Command> register_commands(CLI::App& app, const Globals& globals) {
  return {synth_corpus(app, globals),      stats(app, globals),          build_graph_cmd(app, globals),
          prune_cmd(app, globals),         train_contrastive(app, globals), generate_cmd(app, globals),
          train_diffusion_cmd(app, globals), refine_cmd(app, globals),   evaluate_cmd(app, globals)};
}

}  // namespace motionrag::cli
