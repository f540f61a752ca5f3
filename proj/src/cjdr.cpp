#include "cimdd/cjdr.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cimdd/error.hpp"
#include "cimdd/tensor_io.hpp"

namespace cimdd::cjdr {

namespace {

void check_sequences(const Tensor& x, std::size_t t, const char* what, std::size_t& n) {
  if (x.ndim() != 2 || t == 0 || x.rows() % t != 0)
    throw DimensionError(std::string("cjdr: ") + what + " " + shape_str(x.shape()) +
                         " is not a stack of length-" + std::to_string(t) + " sequences");
  n = x.rows() / t;
}

// Per-sample mean over the sequence, then z-score of each column.
Tensor pooled_zscore(const Tensor& x, std::size_t t) {
  const std::size_t n = x.rows() / t, d = x.cols();
  Tensor p({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t c = 0; c < d; ++c) p.at(i, c) += x.at(i * t + s, c) / double(t);
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += p.at(i, c);
    mean /= double(n);
    for (std::size_t i = 0; i < n; ++i) var += (p.at(i, c) - mean) * (p.at(i, c) - mean);
    const double sd = std::sqrt(var / double(n));
    for (std::size_t i = 0; i < n; ++i) p.at(i, c) = (p.at(i, c) - mean) / (sd > 0.0 ? sd : 1.0);
  }
  return p;
}

Tensor gather_sequences(const Tensor& x, std::size_t t, const std::vector<std::size_t>& idx) {
  Tensor out({idx.size() * t, x.cols()});
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t s = 0; s < t; ++s) {
      auto src = x.row_span(idx[k] * t + s);
      std::copy(src.begin(), src.end(), out.row_span(k * t + s).begin());
    }
  return out;
}

}  // namespace

JointDictionary build_joint_dictionary(const Tensor& video, const Tensor& audio, std::size_t t_v, std::size_t t_a,
                                       const KMeansOptions& opts) {
  std::size_t nv = 0, na = 0;
  check_sequences(video, t_v, "video", nv);
  check_sequences(audio, t_a, "audio", na);
  if (nv != na)
    throw DimensionError("cjdr: " + std::to_string(nv) + " video samples but " + std::to_string(na) +
                         " audio samples");
  Tensor pv = pooled_zscore(video, t_v), pa = pooled_zscore(audio, t_a);
  Tensor joint({nv, pv.cols() + pa.cols()});
  for (std::size_t i = 0; i < nv; ++i) {
    auto dst = joint.row_span(i);
    auto a = pv.row_span(i), b = pa.row_span(i);
    std::copy(b.begin(), b.end(), std::copy(a.begin(), a.end(), dst.begin()));
  }
  auto fd = kmeans_dictionary(joint, opts, DictMode::Sample);

  JointDictionary d;
  d.t_v = t_v;
  d.t_a = t_a;
  d.source_indices = fd.source_indices;
  d.seed = opts.seed;
  d.split_hash = fd.split_hash;
  d.video = gather_sequences(video, t_v, d.source_indices);
  d.audio = gather_sequences(audio, t_a, d.source_indices);
  return d;
}

void save_joint_dictionary(const JointDictionary& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_tensor(d.video, dir / "video.cimd");
  write_tensor(d.audio, dir / "audio.cimd");
  nlohmann::json j{{"K", d.size()},         {"t_v", d.t_v},   {"t_a", d.t_a},
                   {"seed", d.seed},        {"split_hash", d.split_hash},
                   {"source_indices", d.source_indices}};
  std::ofstream os(dir / "joint.json");
  if (!os) throw DataError("cannot write " + (dir / "joint.json").string());
  os << j.dump(2) << "\n";
}

JointDictionary load_joint_dictionary(const std::filesystem::path& dir) {
  JointDictionary d;
  d.video = read_tensor(dir / "video.cimd");
  d.audio = read_tensor(dir / "audio.cimd");
  std::ifstream is(dir / "joint.json");
  if (!is) throw DataError("missing " + (dir / "joint.json").string());
  try {
    auto j = nlohmann::json::parse(is);
    d.t_v = j.at("t_v").get<std::size_t>();
    d.t_a = j.at("t_a").get<std::size_t>();
    d.seed = j.at("seed").get<std::uint64_t>();
    d.split_hash = j.at("split_hash").get<std::uint64_t>();
    d.source_indices = j.at("source_indices").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("joint dictionary sidecar: " + std::string(e.what()));
  }
  if (d.t_v == 0 || d.t_a == 0 || d.video.rows() != d.size() * d.t_v || d.audio.rows() != d.size() * d.t_a)
    throw DataError("joint dictionary tensors do not match " + (dir / "joint.json").string());
  return d;
}

// ---------------------------------------------------------------- module

CjdrModule::CjdrModule(const CjdrConfig& cfg, JointDictionary dict, std::mt19937_64& rng)
    : dictionary(std::move(dict)),
      w_q("cjdr.w_q", cfg.video_dim, cfg.fuse_dim, false, rng),
      w_k("cjdr.w_k", cfg.audio_dim, cfg.fuse_dim, false, rng),
      w_v("cjdr.w_v", cfg.audio_dim, cfg.fuse_dim, false, rng),
      q1("cjdr.q1", cfg.fuse_dim, cfg.fuse_dim, false, rng),
      q2("cjdr.q2", cfg.fuse_dim, cfg.fuse_dim, false, rng),
      w_ab("cjdr.w_ab", cfg.fuse_dim, cfg.out_dim, false, rng),
      w_m("cjdr.w_m", cfg.fuse_dim, cfg.out_dim, false, rng),
      mediators("cjdr.mediators", Tensor::randn({cfg.mediators, cfg.fuse_dim}, rng, 1.0)),
      cfg_(cfg) {
  if (cfg.mediators == 0) throw ConfigError("cjdr: mediator count must be at least 1");
  if (dictionary.size() == 0) throw ConfigError("cjdr: joint dictionary is empty");
  if (dictionary.video.cols() != cfg.video_dim || dictionary.audio.cols() != cfg.audio_dim ||
      dictionary.video.rows() != dictionary.size() * dictionary.t_v ||
      dictionary.audio.rows() != dictionary.size() * dictionary.t_a)
    throw DimensionError("cjdr: joint dictionary " + shape_str(dictionary.video.shape()) + " / " +
                         shape_str(dictionary.audio.shape()) + " does not match video/audio widths " +
                         std::to_string(cfg.video_dim) + "/" + std::to_string(cfg.audio_dim));
}

Var CjdrModule::fuse(Tape& t, Var v, Var a, std::size_t batch) {
  if (batch == 0 || v.rows() % batch != 0 || a.rows() % batch != 0)
    throw DimensionError("cjdr: " + shape_str(v.shape()) + " / " + shape_str(a.shape()) +
                         " cannot be split into " + std::to_string(batch) + " samples");
  if (v.cols() != cfg_.video_dim || a.cols() != cfg_.audio_dim)
    throw DimensionError("cjdr: video " + shape_str(v.shape()) + " / audio " + shape_str(a.shape()) +
                         " do not have widths " + std::to_string(cfg_.video_dim) + "/" +
                         std::to_string(cfg_.audio_dim));
  return grouped_attention(w_q(t, v), w_k(t, a), w_v(t, a), batch, 1.0 / std::sqrt(double(cfg_.fuse_dim)));
}

Var CjdrModule::fused_summary(Tape& t, Var v, Var a, std::size_t batch) {
  return mean_groups(fuse(t, v, a, batch), v.rows() / batch);
}

Var CjdrModule::fused_dictionary(Tape& t) {
  Tape::Scope scope(t, "cjdr");
  return fused_summary(t, t.constant(dictionary.video), t.constant(dictionary.audio), dictionary.size());
}

std::pair<Var, Var> CjdrModule::expectations(Tape& t, Var v, Var a, std::size_t batch) {
  Var m_hat;
  {
    Tape::Scope scope(t, "fuse");
    m_hat = fused_summary(t, v, a, batch);
  }
  Var fd = fused_dictionary(t);
  Tape::Scope scope(t, "cjdr");
  const double s = 1.0 / std::sqrt(double(cfg_.fuse_dim));
  Var m = t.param(mediators);
  Var e_m = attention(q1(t, m_hat), m, m, s);
  Var e_va = attention(q2(t, m_hat), fd, fd, s);
  return {e_va, e_m};
}

Var CjdrModule::forward(Tape& t, Var v, Var a, std::size_t batch) {
  auto [e_va, e_m] = expectations(t, v, a, batch);
  Tape::Scope scope(t, "cjdr");
  return add(w_ab(t, e_va), w_m(t, e_m));
}

void CjdrModule::init_mediators(const Tensor& video, const Tensor& audio, std::size_t n, std::uint64_t seed) {
  Tape t;
  Tensor summary = fused_summary(t, t.constant(video), t.constant(audio), n).value();
  mediators.value = kmeans(summary, {cfg_.mediators, seed, 100}).centroids;
  mediators.grad = Tensor::zeros(mediators.value.shape());
}

void CjdrModule::collect(std::vector<Parameter*>& out) {
  w_q.collect(out);
  w_k.collect(out);
  w_v.collect(out);
  q1.collect(out);
  q2.collect(out);
  w_ab.collect(out);
  w_m.collect(out);
  out.push_back(&mediators);
}

}  // namespace cimdd::cjdr
