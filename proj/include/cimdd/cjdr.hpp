#pragma once

// Joint frontdoor deconfounding of the video and audio streams, fused by
// cross-attention.

#include <filesystem>
#include <random>
#include <vector>

#include "cimdd/kmeans.hpp"
#include "cimdd/layers.hpp"
#include "cimdd/tape.hpp"

namespace cimdd::cjdr {

/// K aligned (video, audio) sequence pairs. Pair k occupies rows
/// [k*t_v, (k+1)*t_v) of `video` and [k*t_a, (k+1)*t_a) of `audio`.
struct JointDictionary {
  Tensor video;  // [K*t_v x d_v]
  Tensor audio;  // [K*t_a x d_a]
  std::size_t t_v = 1, t_a = 1;
  std::vector<std::size_t> source_indices;
  std::uint64_t seed = 0;
  std::uint64_t split_hash = 0;

  std::size_t size() const { return source_indices.size(); }
};

/// Each view is mean-pooled over its sequence, z-scored per dimension and
/// concatenated; k-means picks one sample per cluster and that sample's full
/// sequences form the pair. With t_v = t_a = 1 the inputs are plain [n x d] features.
JointDictionary build_joint_dictionary(const Tensor& video, const Tensor& audio, std::size_t t_v, std::size_t t_a,
                                       const KMeansOptions& opts);

/// Writes `dir`/video.cimd, `dir`/audio.cimd and `dir`/joint.json.
void save_joint_dictionary(const JointDictionary& d, const std::filesystem::path& dir);
JointDictionary load_joint_dictionary(const std::filesystem::path& dir);

struct CjdrConfig {
  std::size_t video_dim = 16;
  std::size_t audio_dim = 16;
  std::size_t fuse_dim = 16;  // d_f
  std::size_t out_dim = 64;
  std::size_t mediators = 64;  // K_m
};

class CjdrModule {
 public:
  CjdrModule() = default;
  /// Mediators start random; call init_mediators() before training.
  CjdrModule(const CjdrConfig& cfg, JointDictionary dict, std::mt19937_64& rng);

  /// softmax((V W_Q)(A W_K)^T / sqrt(d_f)) (A W_V), independently per sample.
  /// V: [B*t_v x d_v], A: [B*t_a x d_a] -> [B*t_v x d_f].
  Var fuse(Tape& t, Var v, Var a, std::size_t batch);
  /// Mean-pooled fusion, [B x d_f]. Ops carry the caller's scope tag.
  Var fused_summary(Tape& t, Var v, Var a, std::size_t batch);
  /// Dictionary pairs pushed through the fusion, [K x d_f].
  Var fused_dictionary(Tape& t);
  /// {E[v',a'], E[m|v,a]}, each [B x d_f].
  std::pair<Var, Var> expectations(Tape& t, Var v, Var a, std::size_t batch);
  /// [B x out_dim].
  Var forward(Tape& t, Var v, Var a, std::size_t batch);

  /// Mediator bank <- k-means centroids of the current fused summaries of the training set.
  void init_mediators(const Tensor& video, const Tensor& audio, std::size_t n, std::uint64_t seed);

  const CjdrConfig& config() const { return cfg_; }
  void collect(std::vector<Parameter*>& out);

  JointDictionary dictionary;  // frozen
  Linear w_q, w_k, w_v;
  Linear q1, q2;
  Linear w_ab, w_m;
  Parameter mediators;  // [K_m x d_f]

 private:
  CjdrConfig cfg_;
};

}  // namespace cimdd::cjdr
