#include "motionrag/graph.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "motionrag/binary_io.hpp"
#include "motionrag/error.hpp"

namespace motionrag {

namespace {

constexpr std::string_view kGraphMagic = "MRAGGRPH";
constexpr std::uint32_t kGraphVersion = 1;

GraphNode node_for(const MotionClip& w) {
  GraphNode n;
  n.window_id = w.id;
  n.frame_count = w.frames();
  if (w.origin) {
    n.source_id = w.origin->source_id;
    n.start_frame = w.origin->start_frame;
    n.segment = w.origin->segment;
  } else {
    n.source_id = w.id;
  }
  return n;
}

}  // namespace

std::size_t GraphBuildConfig::resolved_threshold(std::size_t joints) const {
  if (joint_threshold != 0) return joint_threshold;
  return static_cast<std::size_t>(std::ceil(0.75 * static_cast<double>(joints)));
}

void GraphBuildConfig::validate(std::size_t joints) const {
  if (n_mean_frames < 1) fail(ErrorCode::usage, "N (frames for mean) must be >= 1");
  const std::size_t t = resolved_threshold(joints);
  if (t < 1 || t > joints) fail(ErrorCode::usage, "joint threshold must lie in [1, joints]");
}

std::size_t MotionGraph::edge_count() const {
  std::size_t n = 0;
  for (const auto& out : adjacency) n += out.size();
  return n;
}

bool MotionGraph::has_edge(std::size_t from, std::size_t to) const {
  const auto& out = adjacency.at(from);
  return std::binary_search(out.begin(), out.end(), static_cast<std::uint32_t>(to));
}

std::vector<std::size_t> MotionGraph::in_degrees() const {
  std::vector<std::size_t> in(nodes.size(), 0);
  for (const auto& out : adjacency) {
    for (auto v : out) ++in[v];
  }
  return in;
}

void MotionGraph::validate() const {
  if (adjacency.size() != nodes.size()) fail(ErrorCode::invariant, "adjacency size mismatch");
  for (std::size_t u = 0; u < adjacency.size(); ++u) {
    const auto& out = adjacency[u];
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] >= nodes.size()) fail(ErrorCode::invariant, "edge endpoint out of range");
      if (out[i] == u) fail(ErrorCode::invariant, "self-loop at node " + std::to_string(u));
      if (i > 0 && out[i] <= out[i - 1]) fail(ErrorCode::invariant, "adjacency not sorted/unique");
    }
  }
}

EdgeProfile edge_profile(const MotionClip& clip, const Skeleton& skeleton,
                         const GraphBuildConfig& cfg) {
  const std::size_t frames = clip.frames();
  const std::size_t n = cfg.n_mean_frames;
  if (frames < 2) fail(ErrorCode::invariant, "clip '" + clip.id + "': frame count < 2");
  if (n > frames - 1) {
    fail(ErrorCode::invariant, "N = " + std::to_string(n) + " exceeds the " +
                                   std::to_string(frames - 1) + " velocity frames of clip '" +
                                   clip.id + "'");
  }
  const PoseSequence pos = forward_kinematics(
      skeleton, clip, cfg.use_world_positions ? PositionSpace::world : PositionSpace::root_relative);
  const PoseSequence vel = velocities(pos, clip.fps);
  const std::size_t joints = pos.joints;

  EdgeProfile p;
  p.first_pos.resize(joints);
  p.first_vel.resize(joints);
  p.last_pos.resize(joints);
  p.last_vel.resize(joints);
  p.pos_threshold.resize(joints);
  p.vel_threshold.resize(joints);

  const auto mean_abs_dev = [n](const PoseSequence& s, std::size_t j) {
    Vec3 mean = Vec3::Zero();
    for (std::size_t f = s.frames - n; f < s.frames; ++f) mean += s.at(f, j);
    mean /= static_cast<double>(n);
    double dev = 0.0;
    for (std::size_t f = s.frames - n; f < s.frames; ++f) dev += (s.at(f, j) - mean).norm();
    return dev / static_cast<double>(n);
  };
  for (std::size_t j = 0; j < joints; ++j) {
    p.first_pos[j] = pos.at(0, j);
    p.first_vel[j] = vel.at(0, j);
    p.last_pos[j] = pos.at(pos.frames - 1, j);
    p.last_vel[j] = vel.at(vel.frames - 1, j);
    p.pos_threshold[j] = mean_abs_dev(pos, j);
    p.vel_threshold[j] = mean_abs_dev(vel, j);
  }
  return p;
}

bool edge_compatible(const EdgeProfile& current, const EdgeProfile& next, std::size_t threshold) {
  std::size_t pos_ok = 0, vel_ok = 0;
  for (std::size_t j = 0; j < current.last_pos.size(); ++j) {
    if ((current.last_pos[j] - next.first_pos[j]).norm() < current.pos_threshold[j]) ++pos_ok;
    if ((current.last_vel[j] - next.first_vel[j]).norm() < current.vel_threshold[j]) ++vel_ok;
  }
  return pos_ok >= threshold && vel_ok >= threshold;
}

bool check_edge(const MotionClip& current, const MotionClip& next, const Skeleton& skeleton,
                const GraphBuildConfig& cfg) {
  const std::size_t joints = skeleton.joint_count();
  cfg.validate(joints);
  if (current.joints != joints || next.joints != joints) {
    fail(ErrorCode::invariant, "clip joint count differs from skeleton");
  }
  if (current.fps != next.fps) fail(ErrorCode::invariant, "clips have different fps");
  GraphBuildConfig next_cfg = cfg;
  next_cfg.n_mean_frames = 1;  // only the head of `next` is needed
  return edge_compatible(edge_profile(current, skeleton, cfg),
                         edge_profile(next, skeleton, next_cfg), cfg.resolved_threshold(joints));
}

MotionGraph build_graph(std::span<const MotionClip> windows, const Skeleton& skeleton,
                        const GraphBuildConfig& cfg) {
  const std::size_t joints = skeleton.joint_count();
  cfg.validate(joints);
  const std::size_t threshold = cfg.resolved_threshold(joints);

  MotionGraph g;
  g.nodes.reserve(windows.size());
  std::vector<EdgeProfile> profiles;
  profiles.reserve(windows.size());
  for (const MotionClip& w : windows) {
    if (w.joints != joints) fail(ErrorCode::invariant, "window '" + w.id + "' joint count mismatch");
    if (!windows.empty() && w.fps != windows[0].fps) {
      fail(ErrorCode::invariant, "window '" + w.id + "' fps differs");
    }
    g.nodes.push_back(node_for(w));
    profiles.push_back(edge_profile(w, skeleton, cfg));
  }
  const std::size_t n = g.nodes.size();
  g.adjacency.assign(n, {});
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      const bool natural = g.nodes[a].source_id == g.nodes[b].source_id &&
                           windows[a].origin && windows[b].origin &&
                           g.nodes[b].segment == g.nodes[a].segment + 1;
      if (natural || edge_compatible(profiles[a], profiles[b], threshold)) {
        g.adjacency[a].push_back(static_cast<std::uint32_t>(b));
      }
    }
  }
  g.original_node_count = n;
  return g;
}

std::vector<std::vector<std::size_t>> strongly_connected_components(const MotionGraph& g) {
  const std::size_t n = g.node_count();
  constexpr std::size_t kUnvisited = static_cast<std::size_t>(-1);
  std::vector<std::size_t> index(n, kUnvisited), lowlink(n, 0);
  std::vector<bool> on_stack(n, false);
  std::vector<std::size_t> stack;
  std::vector<std::vector<std::size_t>> components;
  std::size_t counter = 0;

  // Explicit DFS frames: (node, next adjacency position).
  std::vector<std::pair<std::size_t, std::size_t>> call;
  for (std::size_t root = 0; root < n; ++root) {
    if (index[root] != kUnvisited) continue;
    call.emplace_back(root, 0);
    while (!call.empty()) {
      auto& [v, pos] = call.back();
      if (pos == 0) {
        index[v] = lowlink[v] = counter++;
        stack.push_back(v);
        on_stack[v] = true;
      }
      const auto& out = g.adjacency[v];
      bool descended = false;
      while (pos < out.size()) {
        const std::size_t w = out[pos++];
        if (index[w] == kUnvisited) {
          call.emplace_back(w, 0);
          descended = true;
          break;
        }
        if (on_stack[w]) lowlink[v] = std::min(lowlink[v], index[w]);
      }
      if (descended) continue;
      const std::size_t done = v;
      if (lowlink[done] == index[done]) {
        std::vector<std::size_t> comp;
        std::size_t w;
        do {
          w = stack.back();
          stack.pop_back();
          on_stack[w] = false;
          comp.push_back(w);
        } while (w != done);
        std::sort(comp.begin(), comp.end());
        components.push_back(std::move(comp));
      }
      call.pop_back();
      if (!call.empty()) {
        const std::size_t parent = call.back().first;
        lowlink[parent] = std::min(lowlink[parent], lowlink[done]);
      }
    }
  }
  std::sort(components.begin(), components.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return components;
}

MotionGraph prune(const MotionGraph& g) {
  if (g.pruned) fail(ErrorCode::invariant, "graph already pruned");
  const auto components = strongly_connected_components(g);
  const std::vector<std::size_t>* best = nullptr;
  for (const auto& c : components) {
    if (best == nullptr || c.size() > best->size()) best = &c;
  }
  if (best == nullptr || best->size() < 2) {
    fail(ErrorCode::invariant, "graph degenerate; no cyclic structure");
  }
  std::vector<std::int64_t> remap(g.node_count(), -1);
  for (std::size_t i = 0; i < best->size(); ++i) remap[(*best)[i]] = static_cast<std::int64_t>(i);

  MotionGraph out;
  out.pruned = true;
  out.original_node_count = g.original_node_count != 0 ? g.original_node_count : g.node_count();
  out.nodes.reserve(best->size());
  out.adjacency.resize(best->size());
  for (std::size_t i = 0; i < best->size(); ++i) {
    const std::size_t old = (*best)[i];
    out.nodes.push_back(g.nodes[old]);
    for (auto w : g.adjacency[old]) {
      if (remap[w] >= 0) out.adjacency[i].push_back(static_cast<std::uint32_t>(remap[w]));
    }
  }
  return out;
}

GraphStats graph_stats(const MotionGraph& g) {
  GraphStats s;
  s.nodes = g.node_count();
  s.edges = g.edge_count();
  for (const auto& out : g.adjacency) ++s.out_degree_histogram[out.size()];
  const auto components = strongly_connected_components(g);
  s.scc_count = components.size();
  for (const auto& c : components) s.largest_scc = std::max(s.largest_scc, c.size());
  s.pruned = g.pruned;
  s.original_nodes = g.original_node_count != 0 ? g.original_node_count : g.node_count();
  s.removed_fraction = s.original_nodes == 0
                           ? 0.0
                           : 1.0 - static_cast<double>(s.nodes) / static_cast<double>(s.original_nodes);
  return s;
}

std::string graph_stats_json(const GraphStats& s) {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [degree, count] : s.out_degree_histogram) hist[std::to_string(degree)] = count;
  nlohmann::json j = {{"nodes", s.nodes},
                      {"edges", s.edges},
                      {"out_degree_histogram", hist},
                      {"scc_count", s.scc_count},
                      {"largest_scc", s.largest_scc},
                      {"pruned", s.pruned},
                      {"original_nodes", s.original_nodes},
                      {"removed_fraction", s.removed_fraction}};
  return j.dump(2);
}

std::vector<char> encode_graph(const MotionGraph& g) {
  g.validate();
  ByteWriter w;
  w.put_bytes(kGraphMagic);
  w.put<std::uint32_t>(kGraphVersion);
  w.put<std::uint8_t>(g.pruned ? 1 : 0);
  w.put<std::uint64_t>(g.original_node_count);
  w.put<std::uint64_t>(g.node_count());
  for (const GraphNode& n : g.nodes) {
    w.put_string(n.window_id);
    w.put_string(n.source_id);
    w.put<std::uint64_t>(n.start_frame);
    w.put<std::uint64_t>(n.frame_count);
    w.put<std::uint64_t>(n.segment);
  }
  std::uint64_t offset = 0;
  w.put<std::uint64_t>(offset);
  for (const auto& out : g.adjacency) {
    offset += out.size();
    w.put<std::uint64_t>(offset);
  }
  for (const auto& out : g.adjacency) {
    for (auto v : out) w.put<std::uint32_t>(v);
  }
  return w.bytes();
}

MotionGraph decode_graph(std::vector<char> bytes, const std::string& source) {
  ByteReader r(std::move(bytes), source);
  r.expect_magic(kGraphMagic);
  if (r.get<std::uint32_t>() != kGraphVersion) fail(ErrorCode::data, source + ": unsupported graph version");
  MotionGraph g;
  g.pruned = r.get<std::uint8_t>() != 0;
  g.original_node_count = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    GraphNode node;
    node.window_id = r.get_string();
    node.source_id = r.get_string();
    node.start_frame = r.get<std::uint64_t>();
    node.frame_count = r.get<std::uint64_t>();
    node.segment = r.get<std::uint64_t>();
    g.nodes.push_back(std::move(node));
  }
  std::vector<std::uint64_t> offsets(n + 1);
  for (auto& o : offsets) o = r.get<std::uint64_t>();
  g.adjacency.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    if (offsets[i + 1] < offsets[i]) fail(ErrorCode::data, source + ": corrupt CSR offsets");
    for (std::uint64_t e = offsets[i]; e < offsets[i + 1]; ++e) {
      g.adjacency[i].push_back(r.get<std::uint32_t>());
    }
  }
  r.expect_end();
  try {
    g.validate();
  } catch (const Error& e) {
    fail(ErrorCode::data, source + ": " + e.what());
  }
  return g;
}

void save_graph(const std::filesystem::path& path, const MotionGraph& g) {
  write_file_atomic(path, encode_graph(g));
}

MotionGraph load_graph(const std::filesystem::path& path) {
  return decode_graph(read_file(path), path.string());
}

}  // namespace motionrag
