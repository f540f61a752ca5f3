// Acceptance suite: one PASS/FAIL line per headline criterion.
//
//   acceptance [--only name[,name...]] [--report-only]
//
// Exit status is 1 if any selected criterion fails, unless --report-only.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cimdd/experiment.hpp"
#include "cimdd/head.hpp"
#include "cimdd/kmeans.hpp"
#include "oracles.hpp"
#include "scm_fixtures.hpp"

using namespace cimdd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- oracle equivalence

Outcome oracle_equivalence() {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(7001);
  double worst[3] = {0, 0, 0};
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    auto b = testing::random_backdoor_scm(rng);
    auto f = testing::random_frontdoor_scm(rng);
    auto j = testing::random_joint_scm(rng);
    worst[0] = std::max(worst[0], testing::max_table_diff(scm::backdoor_adjust(b, "X", "Y", {"C"}),
                                                          scm::interventional_by_enumeration(b, {"X"}, "Y")));
    worst[1] = std::max(worst[1], testing::max_table_diff(scm::frontdoor_adjust(f, "X", "M", "Y"),
                                                          scm::interventional_by_enumeration(f, {"X"}, "Y")));
    worst[2] = std::max(worst[2], testing::max_table_diff(scm::joint_intervention_adjust(j, "V", "A", "M", "Y"),
                                                          scm::interventional_by_enumeration(j, {"V", "A"}, "Y")));
  }
  const double secs = elapsed(t0);
  std::ostringstream os;
  os << n << " SCMs per formula; max |diff| backdoor " << fmt("%.2e", worst[0]) << ", frontdoor "
     << fmt("%.2e", worst[1]) << ", joint " << fmt("%.2e", worst[2]) << " (tol 1e-10); " << fmt("%.1f", secs)
     << " s (limit 60 s)";
  return {worst[0] <= 1e-10 && worst[1] <= 1e-10 && worst[2] <= 1e-10 && secs < 60.0, os.str()};
}

// ---------------------------------------------------------------- gradient integrity

Outcome gradient_integrity() {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(7002);
  std::vector<std::pair<std::string, double>> errs;

  {
    lbdr::LbdrConfig c{5, 4, 3, 6, false};
    for (bool renorm : {false, true}) {
      c.renormalize = renorm;
      lbdr::LbdrModule m(c, 3, rng);
      Tensor x = Tensor::randn({3, 5}, rng), r = Tensor::randn({3, 6}, rng);
      Tensor counts({3, 3});
      for (std::size_t i = 0; i < counts.numel(); ++i) counts[i] = double(1 + rng() % 3);
      lbdr::LexiconPrior p{{0.2, 0.5, 0.3}};
      std::vector<Parameter*> ps;
      m.collect(ps);
      errs.emplace_back(renorm ? "lbdr(renorm)" : "lbdr",
                        grad_check([&](Tape& t) { return sum(mul(m.forward(t, t.constant(x), counts, p), t.constant(r))); },
                                   ps).max_error());
    }
  }
  {
    vfdr::VfdrConfig c;
    c.feat_dim = 4;
    c.out_dim = 5;
    vfdr::VfdrModule m(c, Tensor::randn({6, 4}, rng), Tensor::randn({3, 4}, rng), rng);
    Tensor x = Tensor::randn({3, 4}, rng), r = Tensor::randn({3, 5}, rng);
    std::vector<Parameter*> ps;
    m.collect(ps);
    errs.emplace_back("vfdr", grad_check([&](Tape& t) { return sum(mul(m.forward(t, t.constant(x)), t.constant(r))); },
                                         ps).max_error());
  }
  {
    cjdr::CjdrConfig c;
    c.video_dim = 4;
    c.audio_dim = 3;
    c.fuse_dim = 5;
    c.out_dim = 2;
    c.mediators = 3;
    cjdr::JointDictionary d;
    d.video = Tensor::randn({3 * 2, 4}, rng);
    d.audio = Tensor::randn({3 * 2, 3}, rng);
    d.t_v = d.t_a = 2;
    d.source_indices = {0, 1, 2};
    cjdr::CjdrModule m(c, d, rng);
    Tensor v = Tensor::randn({4, 4}, rng), a = Tensor::randn({4, 3}, rng), r = Tensor::randn({2, 2}, rng);
    std::vector<Parameter*> ps;
    m.collect(ps);
    errs.emplace_back("cjdr", grad_check([&](Tape& t) {
                                return sum(mul(m.forward(t, t.constant(v), t.constant(a), 2), t.constant(r)));
                              },
                                         ps).max_error());
  }
  {
    head::FusionHead h({4, 2, 2, 2}, rng);
    std::vector<Tensor> f{Tensor::randn({2, 4}, rng), Tensor::randn({2, 4}, rng), Tensor::randn({2, 4}, rng)};
    std::vector<Parameter*> ps;
    h.collect(ps);
    errs.emplace_back("fusion-head", grad_check([&](Tape& t) {
                                       return cross_entropy(
                                           h.logits(t, {t.constant(f[0]), t.constant(f[1]), t.constant(f[2])}), {0, 1});
                                     },
                                                ps).max_error());
  }
  for (const auto& v : ablation_variants())
    errs.emplace_back("pipeline:" + v, pipeline_grad_check(with_variant(gradcheck_model_config(), v), 7, 2).max_error());

  double worst = 0.0;
  std::ostringstream os;
  for (std::size_t i = 0; i < errs.size(); ++i) {
    worst = std::max(worst, errs[i].second);
    os << (i ? ", " : "") << errs[i].first << " " << fmt("%.1e", errs[i].second);
  }
  const double secs = elapsed(t0);
  os << " (tol 1e-4); " << fmt("%.1f", secs) << " s (limit 300 s)";
  return {worst <= 1e-4 && secs < 300.0, os.str()};
}

// ---------------------------------------------------------------- estimator exactness

Outcome estimator_exactness() {
  std::mt19937_64 rng(7003);
  const int trials = 1000;
  double w_lbdr = 0, w_vfdr = 0, w_cjdr = 0;
  std::uniform_int_distribution<std::size_t> small(1, 5);

  for (int i = 0; i < trials; ++i) {
    const std::size_t n = small(rng), b = small(rng);
    lbdr::LbdrConfig c{small(rng), small(rng), small(rng), 2, false};
    lbdr::LbdrModule m(c, n, rng);
    Tensor x = Tensor::randn({b, c.text_dim}, rng, 2.0);
    Tensor counts({b, n});
    for (std::size_t k = 0; k < counts.numel(); ++k) counts[k] = double(rng() % 4);
    lbdr::LexiconPrior p{std::vector<double>(n)};
    double s = 0;
    for (auto& v : p.p) s += (v = 0.1 + double(rng() % 100) / 100.0);
    for (auto& v : p.p) v /= s;
    Tape t;
    Tensor e = m.confounder_expectation(t, t.constant(x), counts, p).value();
    for (std::size_t r = 0; r < b; ++r) {
      auto xs = x.row_span(r);
      auto cs = counts.row_span(r);
      auto ref = testing::lbdr_expectation(m, {xs.begin(), xs.end()}, {cs.begin(), cs.end()}, p.p);
      for (std::size_t j = 0; j < c.dict_dim; ++j) w_lbdr = std::max(w_lbdr, std::abs(e.at(r, j) - ref[j]));
    }
  }

  for (int i = 0; i < trials; ++i) {
    const std::size_t d = small(rng), b = small(rng);
    vfdr::VfdrConfig c;
    c.feat_dim = d;
    c.out_dim = 2;
    vfdr::VfdrModule m(c, Tensor::randn({small(rng) + 1, d}, rng), Tensor::randn({small(rng), d}, rng), rng);
    Tensor x = Tensor::randn({b, d}, rng, 2.0);
    Tape t;
    auto [e_x, e_m] = m.expectations(t, t.constant(x));
    for (std::size_t r = 0; r < b; ++r) {
      auto rx = testing::vfdr_expectation(m.q2.weight.value, m.dictionary, x.row_span(r));
      auto rm = testing::vfdr_expectation(m.q1.weight.value, m.mediators.value, x.row_span(r));
      for (std::size_t j = 0; j < d; ++j) {
        w_vfdr = std::max(w_vfdr, std::abs(e_x.value().at(r, j) - rx[j]));
        w_vfdr = std::max(w_vfdr, std::abs(e_m.value().at(r, j) - rm[j]));
      }
    }
  }

  for (int i = 0; i < trials; ++i) {
    const std::size_t k = small(rng), tv = small(rng), ta = small(rng), b = small(rng);
    cjdr::CjdrConfig c;
    c.video_dim = small(rng);
    c.audio_dim = small(rng);
    c.fuse_dim = small(rng);
    c.out_dim = 2;
    c.mediators = small(rng);
    cjdr::JointDictionary d;
    d.video = Tensor::randn({k * tv, c.video_dim}, rng);
    d.audio = Tensor::randn({k * ta, c.audio_dim}, rng);
    d.t_v = tv;
    d.t_a = ta;
    d.source_indices.resize(k);
    std::iota(d.source_indices.begin(), d.source_indices.end(), 0);
    cjdr::CjdrModule m(c, d, rng);
    Tensor v = Tensor::randn({b * tv, c.video_dim}, rng), a = Tensor::randn({b * ta, c.audio_dim}, rng);
    Tape t;
    auto [e_va, e_m] = m.expectations(t, t.constant(v), t.constant(a), b);
    std::vector<std::vector<double>> fd;
    for (std::size_t j = 0; j < k; ++j)
      fd.push_back(testing::cjdr_summary(m, m.dictionary.video, j * tv, tv, m.dictionary.audio, j * ta, ta));
    auto med = testing::rows(m.mediators.value);
    const double sc = 1.0 / std::sqrt(double(c.fuse_dim));
    for (std::size_t s = 0; s < b; ++s) {
      auto mh = testing::cjdr_summary(m, v, s * tv, tv, a, s * ta, ta);
      auto rva = testing::attend(testing::vec_mat(mh, m.q2.weight.value), fd, fd, sc);
      auto rm = testing::attend(testing::vec_mat(mh, m.q1.weight.value), med, med, sc);
      for (std::size_t j = 0; j < c.fuse_dim; ++j) {
        w_cjdr = std::max(w_cjdr, std::abs(e_va.value().at(s, j) - rva[j]));
        w_cjdr = std::max(w_cjdr, std::abs(e_m.value().at(s, j) - rm[j]));
      }
    }
  }

  std::ostringstream os;
  os << trials << " trials each; max |diff| lexical " << fmt("%.2e", w_lbdr) << ", visual " << fmt("%.2e", w_vfdr)
     << ", audio-visual " << fmt("%.2e", w_cjdr) << " (tol 1e-12)";
  return {w_lbdr <= 1e-12 && w_vfdr <= 1e-12 && w_cjdr <= 1e-12, os.str()};
}

// ---------------------------------------------------------------- benchmark runs

ExperimentConfig benchmark_config(double rho_train, double rho_test) {
  ExperimentConfig c;
  c.gen.n_train = 8000;
  c.gen.n_test = 2000;
  c.gen.rho_train = {rho_train, rho_train, rho_train};
  c.gen.rho_test = {rho_test, rho_test, rho_test};
  c.seeds = {0, 1, 2, 3, 4};
  return c;
}

double mean_of(const std::vector<std::pair<std::string, double>>& m, const std::string& v) {
  for (const auto& [name, acc] : m)
    if (name == v) return acc;
  return NAN;
}

Outcome deconfounding_benefit() {
  auto t0 = std::chrono::steady_clock::now();
  auto cfg = benchmark_config(0.9, 0.1);
  auto data = load_data(cfg);
  auto means = run_ablation(cfg, data).mean_accuracy();
  const double secs = elapsed(t0);
  const double full = mean_of(means, "full"), none = mean_of(means, "no_ci");
  bool pass = full >= none + 0.05 && secs < 1800.0;
  std::ostringstream os;
  os << "test accuracy over 5 seeds:";
  for (const auto& [name, acc] : means) {
    os << " " << name << " " << fmt("%.4f", acc);
    if (name != "full" && name != "no_ci" && full < acc - 0.01) pass = false;
  }
  os << "; need full >= no_ci + 0.05 and full >= each single ablation - 0.01; bayes "
     << fmt("%.4f", synth::bayes_accuracy(cfg.gen, "test")) << "; " << fmt("%.0f", secs) << " s (target 1800 s)";
  return {pass, os.str()};
}

Outcome no_confounder_sanity() {
  auto cfg = benchmark_config(0.5, 0.5);
  auto data = load_data(cfg);
  auto means = run_ablation(cfg, data, {"full", "no_ci"}).mean_accuracy();
  const double full = mean_of(means, "full"), none = mean_of(means, "no_ci");
  const double bayes = synth::bayes_accuracy(cfg.gen, "test");
  std::ostringstream os;
  os << "full " << fmt("%.4f", full) << ", no_ci " << fmt("%.4f", none) << ", |diff| " << fmt("%.4f", std::abs(full - none))
     << " (< 0.03), bayes " << fmt("%.4f", bayes) << " (+0.02 ceiling)";
  return {std::abs(full - none) < 0.03 && full <= bayes + 0.02 && none <= bayes + 0.02, os.str()};
}

Outcome overfit_smoke() {
  ExperimentConfig cfg;
  cfg.gen.n_train = 32;
  cfg.gen.n_test = 32;
  cfg.model.vfdr_dict = cfg.model.joint_dict = 32;
  cfg.model.vfdr_mediators = cfg.model.cjdr_mediators = 16;
  cfg.epochs = 200;
  cfg.patience = 0;
  cfg.val_fraction = 0.0;
  cfg.batch_size = 32;
  cfg.optim.lr = 1e-3;
  auto data = load_data(cfg);
  auto res = run_train(cfg, data);
  std::ostringstream os;
  os << "32 samples, " << res.epochs_run << " epochs, lr 1e-3: train accuracy " << fmt("%.4f", res.train.accuracy)
     << " (>= 0.99)";
  return {res.train.accuracy >= 0.99, os.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism() {
  ExperimentConfig cfg;
  cfg.gen.n_train = 600;
  cfg.gen.n_test = 200;
  cfg.epochs = 3;
  auto base = fs::temp_directory_path() / "cimdd_acceptance_determinism";
  fs::remove_all(base);
  for (const char* run : {"a", "b"}) {
    auto c = cfg;
    c.out_dir = (base / run).string();
    run_train(c, load_data(c));
  }
  std::size_t files = 0, differ = 0;
  std::set<fs::path> seen;
  for (const char* run : {"a", "b"})
    for (const auto& e : fs::recursive_directory_iterator(base / run))
      if (e.is_regular_file()) seen.insert(fs::relative(e.path(), base / run));
  for (const auto& rel : seen) {
    ++files;
    if (!fs::exists(base / "a" / rel) || !fs::exists(base / "b" / rel) || slurp(base / "a" / rel) != slurp(base / "b" / rel))
      ++differ;
  }
  fs::remove_all(base);
  std::ostringstream os;
  os << files << " files compared across two identical runs (checkpoint, metrics, log); " << differ << " differ";
  return {differ == 0 && files > 0, os.str()};
}

Outcome kmeans_and_permutation() {
  std::mt19937_64 rng(7008);
  std::uniform_int_distribution<std::size_t> nd(10, 80), kd(1, 10), dd(1, 6);
  std::size_t violations = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = nd(rng), k = std::min(kd(rng), n), d = dd(rng);
    auto km = kmeans(Tensor::randn({n, d}, rng), {k, std::uint64_t(i), 100});
    for (std::size_t s = 1; s < km.inertia.size(); ++s)
      if (km.inertia[s] > km.inertia[s - 1]) ++violations;
  }

  double w_v = 0, w_c = 0;
  for (int i = 0; i < 100; ++i) {
    vfdr::VfdrConfig vc;
    vc.feat_dim = 4;
    vc.out_dim = 3;
    const std::size_t kv = 2 + rng() % 8;
    vfdr::VfdrModule m(vc, Tensor::randn({kv, 4}, rng), Tensor::randn({3, 4}, rng), rng);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tape t1;
    Tensor before = m.forward(t1, t1.constant(x)).value();
    std::vector<std::size_t> perm(kv);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor pd({kv, 4});
    for (std::size_t r = 0; r < kv; ++r)
      for (std::size_t j = 0; j < 4; ++j) pd.at(r, j) = m.dictionary.at(perm[r], j);
    m.dictionary = pd;
    Tape t2;
    w_v = std::max(w_v, max_abs_diff(before, m.forward(t2, t2.constant(x)).value()));

    cjdr::CjdrConfig cc;
    cc.video_dim = 3;
    cc.audio_dim = 2;
    cc.fuse_dim = 4;
    cc.out_dim = 2;
    cc.mediators = 3;
    const std::size_t kc = 2 + rng() % 6, tv = 2, ta = 3;
    cjdr::JointDictionary jd;
    jd.video = Tensor::randn({kc * tv, 3}, rng);
    jd.audio = Tensor::randn({kc * ta, 2}, rng);
    jd.t_v = tv;
    jd.t_a = ta;
    jd.source_indices.resize(kc);
    std::iota(jd.source_indices.begin(), jd.source_indices.end(), 0);
    cjdr::CjdrModule cm(cc, jd, rng);
    Tensor v = Tensor::randn({2 * tv, 3}, rng), a = Tensor::randn({2 * ta, 2}, rng);
    Tape t3;
    Tensor cb = cm.forward(t3, t3.constant(v), t3.constant(a), 2).value();
    std::vector<std::size_t> cp(kc);
    std::iota(cp.begin(), cp.end(), 0);
    std::shuffle(cp.begin(), cp.end(), rng);
    cjdr::JointDictionary pj = cm.dictionary;
    for (std::size_t j = 0; j < kc; ++j) {
      for (std::size_t s = 0; s < tv; ++s)
        for (std::size_t c = 0; c < 3; ++c) pj.video.at(j * tv + s, c) = cm.dictionary.video.at(cp[j] * tv + s, c);
      for (std::size_t s = 0; s < ta; ++s)
        for (std::size_t c = 0; c < 2; ++c) pj.audio.at(j * ta + s, c) = cm.dictionary.audio.at(cp[j] * ta + s, c);
    }
    cm.dictionary = pj;
    Tape t4;
    w_c = std::max(w_c, max_abs_diff(cb, cm.forward(t4, t4.constant(v), t4.constant(a), 2).value()));
  }
  std::ostringstream os;
  os << "100 k-means instances, " << violations << " inertia increases; dictionary permutation max |diff| visual "
     << fmt("%.2e", w_v) << ", audio-visual " << fmt("%.2e", w_c) << " (tol 1e-12)";
  return {violations == 0 && w_v <= 1e-12 && w_c <= 1e-12, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> only;
  bool report_only = false;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--report-only") {
      report_only = true;
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string name; std::getline(ss, name, ',');) only.insert(name);
    } else {
      std::fprintf(stderr, "usage: acceptance [--only name[,name...]] [--report-only]\n");
      return 2;
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle-equivalence", oracle_equivalence},
      {"gradient-integrity", gradient_integrity},
      {"estimator-exactness", estimator_exactness},
      {"deconfounding-benefit", deconfounding_benefit},
      {"no-confounder-sanity", no_confounder_sanity},
      {"overfit-smoke", overfit_smoke},
      {"determinism", determinism},
      {"kmeans-monotonicity", kmeans_and_permutation},
  };

  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed && !report_only ? 1 : 0;
}
