#include "cimdd/model.hpp"

#include <fstream>

#include "cimdd/error.hpp"
#include "cimdd/tensor_io.hpp"

namespace cimdd {

void ModelConfig::validate() const {
  for (std::size_t v : {d_t, d_i, d_v, d_a, branch_dim, lexicon_dim, lexicon_attn_dim, fuse_dim, vfdr_dict,
                        vfdr_mediators, joint_dict, cjdr_mediators, d_h, heads})
    if (v == 0) throw ConfigError("model dimensions and dictionary sizes must be positive");
  if (d_h % heads != 0)
    throw ConfigError("d_h " + std::to_string(d_h) + " is not divisible by " + std::to_string(heads) + " heads");
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
#define CIMDD_FIELD(name) c.name = j.value(#name, c.name)
    CIMDD_FIELD(d_t);
    CIMDD_FIELD(d_i);
    CIMDD_FIELD(d_v);
    CIMDD_FIELD(d_a);
    CIMDD_FIELD(branch_dim);
    CIMDD_FIELD(lexicon_dim);
    CIMDD_FIELD(lexicon_attn_dim);
    CIMDD_FIELD(fuse_dim);
    CIMDD_FIELD(vfdr_dict);
    CIMDD_FIELD(vfdr_mediators);
    CIMDD_FIELD(joint_dict);
    CIMDD_FIELD(cjdr_mediators);
    CIMDD_FIELD(kmeans_iters);
    CIMDD_FIELD(lbdr_renorm);
    CIMDD_FIELD(d_h);
    CIMDD_FIELD(heads);
    CIMDD_FIELD(lbdr);
    CIMDD_FIELD(vfdr);
    CIMDD_FIELD(cjdr);
#undef CIMDD_FIELD
    if (j.contains("dict_mode")) c.dict_mode = parse_dict_mode(j["dict_mode"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_t", d_t},
          {"d_i", d_i},
          {"d_v", d_v},
          {"d_a", d_a},
          {"branch_dim", branch_dim},
          {"lexicon_dim", lexicon_dim},
          {"lexicon_attn_dim", lexicon_attn_dim},
          {"fuse_dim", fuse_dim},
          {"vfdr_dict", vfdr_dict},
          {"vfdr_mediators", vfdr_mediators},
          {"joint_dict", joint_dict},
          {"cjdr_mediators", cjdr_mediators},
          {"kmeans_iters", kmeans_iters},
          {"dict_mode", to_string(dict_mode)},
          {"lbdr_renorm", lbdr_renorm},
          {"d_h", d_h},
          {"heads", heads},
          {"lbdr", lbdr},
          {"vfdr", vfdr},
          {"cjdr", cjdr}};
}

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "no_lbdr", "no_vfdr", "no_cjdr", "no_ci"};
  return v;
}

ModelConfig with_variant(ModelConfig cfg, const std::string& variant) {
  cfg.lbdr = cfg.vfdr = cfg.cjdr = true;
  if (variant == "full") return cfg;
  if (variant == "no_lbdr") cfg.lbdr = false;
  else if (variant == "no_vfdr") cfg.vfdr = false;
  else if (variant == "no_cjdr") cfg.cjdr = false;
  else if (variant == "no_ci") cfg.lbdr = cfg.vfdr = cfg.cjdr = false;
  else throw ConfigError("unknown ablation variant '" + variant + "'");
  return cfg;
}

Tensor count_matrix(const synth::Dataset& d, const lbdr::ConfounderLexicon& lexicon) {
  const std::size_t n = d.size(), k = lexicon.size();
  Tensor c({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    auto row = lbdr::count_matches(d.tokens[i], lexicon);
    std::copy(row.counts.begin(), row.counts.end(), c.row_span(i).begin());
  }
  return c;
}

namespace {

void gather(const Tensor& src, std::size_t t, const std::vector<std::size_t>& idx, Tensor& dst) {
  dst = Tensor({idx.size() * t, src.cols()});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto from = src.data().subspan(idx[k] * t * src.cols(), t * src.cols());
    std::copy(from.begin(), from.end(), dst.data().begin() + k * t * src.cols());
  }
}

}  // namespace

Batch make_batch(const synth::Dataset& d, const Tensor& counts, const std::vector<std::size_t>& idx) {
  Batch b;
  for (auto i : idx)
    if (i >= d.size()) throw DataError("batch index " + std::to_string(i) + " out of range");
  gather(d.x_t, 1, idx, b.x_t);
  gather(counts, 1, idx, b.counts);
  gather(d.x_i, 1, idx, b.x_i);
  gather(d.x_v, d.t_v, idx, b.x_v);
  gather(d.x_a, d.t_a, idx, b.x_a);
  for (auto i : idx) b.labels.push_back(d.labels[i]);
  return b;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& component) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : component) h = (h ^ c) * 1099511628211ULL;
  // splitmix64 finalizer over the mix
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Buffers build_buffers(const ModelConfig& cfg, const synth::Dataset& train, const lbdr::ConfounderLexicon& lexicon,
                      std::uint64_t seed) {
  Buffers b;
  b.prior = lbdr::prior_from_corpus(train.tokens, lexicon);
  b.vfdr_dict = kmeans_dictionary(train.x_i, {cfg.vfdr_dict, derive_seed(seed, "vfdr.dict"), cfg.kmeans_iters},
                                  cfg.dict_mode);
  b.vfdr_mediators = kmeans(train.x_i, {cfg.vfdr_mediators, derive_seed(seed, "vfdr.mediators"), cfg.kmeans_iters})
                         .centroids;
  b.joint = cjdr::build_joint_dictionary(train.x_v, train.x_a, train.t_v, train.t_a,
                                         {cfg.joint_dict, derive_seed(seed, "cjdr.dict"), cfg.kmeans_iters});
  return b;
}

void Buffers::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_dictionary(vfdr_dict, dir / "vfdr_dict.cimd");
  write_tensor(vfdr_mediators, dir / "vfdr_mediators_init.cimd");
  cjdr::save_joint_dictionary(joint, dir / "joint_dict");
  std::ofstream os(dir / "lexicon_prior.json");
  if (!os) throw DataError("cannot write " + (dir / "lexicon_prior.json").string());
  os << nlohmann::json{{"prior", prior.p}}.dump(2) << "\n";
}

Buffers Buffers::load(const std::filesystem::path& dir) {
  Buffers b;
  b.vfdr_dict = load_dictionary(dir / "vfdr_dict.cimd");
  b.vfdr_mediators = read_tensor(dir / "vfdr_mediators_init.cimd");
  b.joint = cjdr::load_joint_dictionary(dir / "joint_dict");
  std::ifstream is(dir / "lexicon_prior.json");
  if (!is) throw DataError("missing " + (dir / "lexicon_prior.json").string());
  try {
    b.prior.p = nlohmann::json::parse(is).at("prior").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("lexicon prior: ") + e.what());
  }
  return b;
}

Model::Model(const ModelConfig& cfg, const Buffers& buf, std::size_t categories, std::uint64_t seed,
             const synth::Dataset* train)
    : cfg_(cfg), prior_(buf.prior) {
  cfg.validate();
  if (prior_.p.size() != categories) throw DimensionError("lexicon prior does not match the category count");
  std::mt19937_64 r_lbdr(derive_seed(seed, "lbdr")), r_vfdr(derive_seed(seed, "vfdr")),
      r_cjdr(derive_seed(seed, "cjdr")), r_head(derive_seed(seed, "head"));

  lbdr::LbdrConfig lc;
  lc.text_dim = cfg.d_t;
  lc.dict_dim = cfg.lexicon_dim;
  lc.attn_dim = cfg.lexicon_attn_dim;
  lc.out_dim = cfg.branch_dim;
  lc.renormalize = cfg.lbdr_renorm;
  if (cfg.lbdr) lbdr_ = lbdr::LbdrModule(lc, categories, r_lbdr);

  if (cfg.vfdr) {
    vfdr::VfdrConfig vc;
    vc.feat_dim = cfg.d_i;
    vc.out_dim = cfg.branch_dim;
    vfdr_ = vfdr::VfdrModule(vc, buf.vfdr_dict.entries, buf.vfdr_mediators, r_vfdr);
  }

  cjdr::CjdrConfig cc;
  cc.video_dim = cfg.d_v;
  cc.audio_dim = cfg.d_a;
  cc.fuse_dim = cfg.fuse_dim;
  cc.out_dim = cfg.branch_dim;
  cc.mediators = cfg.cjdr_mediators;
  cjdr_ = cjdr::CjdrModule(cc, buf.joint, r_cjdr);
  if (cfg.cjdr && train) cjdr_.init_mediators(train->x_v, train->x_a, train->size(), derive_seed(seed, "cjdr.mediators"));

  std::mt19937_64 r_pt(derive_seed(seed, "proj.text")), r_pi(derive_seed(seed, "proj.image")),
      r_pav(derive_seed(seed, "proj.av"));
  proj_t_ = Linear("proj.text", cfg.lbdr ? cfg.branch_dim : cfg.d_t, cfg.d_h, true, r_pt);
  proj_i_ = Linear("proj.image", cfg.vfdr ? cfg.branch_dim : cfg.d_i, cfg.d_h, true, r_pi);
  proj_av_ = Linear("proj.av", cfg.cjdr ? cfg.branch_dim : cfg.fuse_dim, cfg.d_h, true, r_pav);
  head_ = head::FusionHead({cfg.d_h, cfg.heads, 4, 2}, r_head);

  if (cfg.lbdr) lbdr_.collect(params_);
  if (cfg.vfdr) vfdr_.collect(params_);
  cjdr_.w_q.collect(params_);
  cjdr_.w_k.collect(params_);
  cjdr_.w_v.collect(params_);
  if (cfg.cjdr) {
    cjdr_.q1.collect(params_);
    cjdr_.q2.collect(params_);
    cjdr_.w_ab.collect(params_);
    cjdr_.w_m.collect(params_);
    params_.push_back(&cjdr_.mediators);
  }
  proj_t_.collect(params_);
  proj_i_.collect(params_);
  proj_av_.collect(params_);
  head_.collect(params_);
}

Var Model::logits(Tape& t, const Batch& b) {
  const std::size_t n = b.size();
  if (n == 0) throw DataError("empty batch");
  Var xt = t.constant(b.x_t), xi = t.constant(b.x_i), xv = t.constant(b.x_v), xa = t.constant(b.x_a);
  Var text = cfg_.lbdr ? lbdr_.forward(t, xt, b.counts, prior_) : xt;
  Var image = cfg_.vfdr ? vfdr_.forward(t, xi) : xi;
  Var av;
  if (cfg_.cjdr) {
    av = cjdr_.forward(t, xv, xa, n);
  } else {
    Tape::Scope scope(t, "fuse");
    av = cjdr_.fused_summary(t, xv, xa, n);
  }
  Tape::Scope scope(t, "proj");
  return head_.logits(t, {proj_t_(t, text), proj_i_(t, image), proj_av_(t, av)});
}

Var Model::loss(Tape& t, const Batch& b) { return cross_entropy(logits(t, b), b.labels); }

std::vector<int> Model::predict(const Batch& b) {
  Tape t;
  const Tensor& z = logits(t, b).value();
  std::vector<int> out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) out[i] = z.at(i, 1) > z.at(i, 0) ? 1 : 0;
  return out;
}

void Model::save_parameters(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto* p : params_) {
    const std::string file = p->name + ".cimd";
    write_tensor(p->value, dir / file);
    manifest.push_back({{"name", p->name}, {"file", file}, {"shape", p->value.shape()}, {"hash", tensor_hash(p->value)}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw DataError("cannot write " + (dir / "manifest.json").string());
  os << nlohmann::json{{"parameters", manifest}}.dump(2) << "\n";
}

void Model::load_parameters(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("missing " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is).at("parameters");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }
  if (m.size() != params_.size())
    throw DataError("checkpoint has " + std::to_string(m.size()) + " parameters, model has " +
                    std::to_string(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto name = m[i].at("name").get<std::string>();
    if (name != params_[i]->name)
      throw DataError("checkpoint parameter " + name + " does not match model parameter " + params_[i]->name);
    Tensor v = read_tensor(dir / m[i].at("file").get<std::string>());
    if (v.shape() != params_[i]->value.shape())
      throw DimensionError("checkpoint parameter " + name + " has shape " + shape_str(v.shape()) + ", expected " +
                           shape_str(params_[i]->value.shape()));
    params_[i]->value = std::move(v);
    params_[i]->zero_grad();
  }
}

}  // namespace cimdd
