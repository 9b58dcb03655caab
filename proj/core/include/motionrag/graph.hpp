#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "motionrag/kinematics.hpp"

namespace motionrag {

struct GraphBuildConfig {
  std::size_t n_mean_frames = 4;    // N: frames averaged for the adaptive thresholds
  std::size_t joint_threshold = 0;  // T: 0 selects ceil(0.75 * joints)
  bool use_world_positions = true;

  std::size_t resolved_threshold(std::size_t joints) const;
  void validate(std::size_t joints) const;
};

struct GraphNode {
  std::string window_id;
  std::string source_id;
  std::size_t start_frame = 0;
  std::size_t frame_count = 0;
  std::size_t segment = 0;  // row of the source clip's feature matrices

  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct MotionGraph {
  std::vector<GraphNode> nodes;
  std::vector<std::vector<std::uint32_t>> adjacency;  // sorted out-neighbors
  bool pruned = false;
  std::size_t original_node_count = 0;  // before pruning

  std::size_t node_count() const { return nodes.size(); }
  std::size_t edge_count() const;
  bool has_edge(std::size_t from, std::size_t to) const;
  std::vector<std::size_t> in_degrees() const;

  // Endpoints valid, no self-loops, sorted unique adjacency.
  void validate() const;

  friend bool operator==(const MotionGraph&, const MotionGraph&) = default;
};

// Boundary quantities of one clip used by the edge test.
struct EdgeProfile {
  std::vector<Vec3> first_pos, first_vel;  // per joint
  std::vector<Vec3> last_pos, last_vel;
  std::vector<double> pos_threshold, vel_threshold;  // per joint, from the last N frames
};

EdgeProfile edge_profile(const MotionClip& clip, const Skeleton& skeleton,
                         const GraphBuildConfig& cfg);

bool edge_compatible(const EdgeProfile& current, const EdgeProfile& next, std::size_t threshold);

// True iff at least T joints have both position gap < T_p and velocity gap
// < T_v, where T_p/T_v are the current clip's mean absolute deviation of its
// last N positions/velocities from their N-frame mean.
bool check_edge(const MotionClip& current, const MotionClip& next, const Skeleton& skeleton,
                const GraphBuildConfig& cfg);

MotionGraph build_graph(std::span<const MotionClip> windows, const Skeleton& skeleton,
                        const GraphBuildConfig& cfg);

// Maximal SCCs; members ascending, components ordered by smallest member.
std::vector<std::vector<std::size_t>> strongly_connected_components(const MotionGraph& g);

// Subgraph induced by the largest SCC (ties: the one holding the smallest index).
MotionGraph prune(const MotionGraph& g);

struct GraphStats {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  std::map<std::size_t, std::size_t> out_degree_histogram;  // degree -> node count
  std::size_t scc_count = 0;
  std::size_t largest_scc = 0;
  bool pruned = false;
  std::size_t original_nodes = 0;
  double removed_fraction = 0.0;
};

GraphStats graph_stats(const MotionGraph& g);
std::string graph_stats_json(const GraphStats& s);

// Versioned binary: header, node table, CSR adjacency.
std::vector<char> encode_graph(const MotionGraph& g);
MotionGraph decode_graph(std::vector<char> bytes, const std::string& source);
void save_graph(const std::filesystem::path& path, const MotionGraph& g);
MotionGraph load_graph(const std::filesystem::path& path);

}  // namespace motionrag
