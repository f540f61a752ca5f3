#include "cimdd/kmeans.hpp"

#include <fstream>
#include <limits>
#include <random>

#include <json.hpp>

#include "cimdd/error.hpp"
#include "cimdd/tape.hpp"
#include "cimdd/tensor_io.hpp"

namespace cimdd {

DictMode parse_dict_mode(const std::string& s) {
  if (s == "sample") return DictMode::Sample;
  if (s == "centroid") return DictMode::Centroid;
  throw ConfigError("dict-mode must be 'sample' or 'centroid', got '" + s + "'");
}

std::string to_string(DictMode m) { return m == DictMode::Sample ? "sample" : "centroid"; }

namespace {

double sqdist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double norm2(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

Tensor seed_plus_plus(const Tensor& x, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor c({k, d});
  std::vector<bool> chosen(n, false);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t pick = first;
    if (j > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : best[i];
      if (total > 0.0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (chosen[i] || best[i] == 0.0) continue;
          pick = i;
          if ((u -= best[i]) < 0.0) break;
        }
      } else {
        // All remaining points coincide with chosen centers.
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < n; ++i)
          if (!chosen[i]) rest.push_back(i);
        pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
      }
    }
    chosen[pick] = true;
    auto src = x.row_span(pick);
    std::copy(src.begin(), src.end(), c.row_span(j).begin());
    for (std::size_t i = 0; i < n; ++i) best[i] = std::min(best[i], sqdist(x.row_span(i), c.row_span(j)));
  }
  return c;
}

}  // namespace

KMeansResult kmeans(const Tensor& x, const KMeansOptions& opts) {
  if (x.ndim() != 2) throw DimensionError("kmeans: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.rows(), d = x.cols(), k = opts.k;
  if (k == 0) throw ConfigError("kmeans: K must be at least 1");
  if (n < k)
    throw CapacityError("kmeans: " + std::to_string(n) + " points cannot fill " + std::to_string(k) + " clusters");
  std::mt19937_64 rng(opts.seed);
  KMeansResult r;
  r.centroids = seed_plus_plus(x, k, rng);
  r.assignment.assign(n, k);
  std::vector<double> dist(n);
  const std::size_t max_iter = std::max<std::size_t>(opts.max_iter, 1);

  std::vector<double> xsq(n);
  for (std::size_t i = 0; i < n; ++i) xsq[i] = norm2(x.row_span(i));

  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    double inertia = 0.0;
    // Nearest centroid via |x|^2 - 2 x.c + |c|^2; the recorded distance is
    // recomputed exactly, comparing near-ties exactly as well.
    const Tensor cross = matmul_nt(x, r.centroids);
    std::vector<double> csq(k);
    for (std::size_t j = 0; j < k; ++j) csq[j] = norm2(r.centroids.row_span(j));
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double dd = xsq[i] - 2.0 * cross[i * k + j] + csq[j];
        if (dd < bd) bd = dd, best = j;
      }
      double exact = sqdist(x.row_span(i), r.centroids.row_span(best));
      const double slack = 1e-9 * (xsq[i] + csq[best]) + 1e-12;
      for (std::size_t j = 0; j < k; ++j) {
        if (j == best || xsq[i] - 2.0 * cross[i * k + j] + csq[j] > bd + slack) continue;
        const double e = sqdist(x.row_span(i), r.centroids.row_span(j));
        if (e < exact || (e == exact && j < best)) exact = e, best = j;
      }
      bd = exact;
      changed |= best != r.assignment[i];
      r.assignment[i] = best;
      dist[i] = bd;
      inertia += bd;
    }
    r.inertia.push_back(inertia);
    r.iterations = it + 1;
    if (!changed) break;

    Tensor sums({k, d});
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = x.row_span(i);
      auto s = sums.row_span(r.assignment[i]);
      for (std::size_t c = 0; c < d; ++c) s[c] += row[c];
      ++count[r.assignment[i]];
    }
    for (std::size_t j = 0; j < k; ++j) {
      auto cj = r.centroids.row_span(j);
      if (count[j] > 0) {
        auto s = sums.row_span(j);
        for (std::size_t c = 0; c < d; ++c) cj[c] = s[c] / double(count[j]);
        continue;
      }
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      auto src = x.row_span(far);
      std::copy(src.begin(), src.end(), cj.begin());
      dist[far] = 0.0;
    }
  }
  return r;
}

FeatureDictionary kmeans_dictionary(const Tensor& features, const KMeansOptions& opts, DictMode mode) {
  auto km = kmeans(features, opts);
  FeatureDictionary out;
  out.mode = mode;
  out.seed = opts.seed;
  out.split_hash = tensor_hash(features);
  if (mode == DictMode::Centroid) {
    out.entries = km.centroids;
    return out;
  }
  std::vector<std::vector<std::size_t>> members(opts.k);
  for (std::size_t i = 0; i < km.assignment.size(); ++i) members[km.assignment[i]].push_back(i);
  // Separate stream so the pick does not depend on how many draws Lloyd used.
  std::mt19937_64 rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  out.entries = Tensor({opts.k, features.cols()});
  for (std::size_t j = 0; j < opts.k; ++j) {
    std::size_t pick;
    if (members[j].empty()) {
      // Only possible when max_iter ran out right after a re-seed: use the nearest point.
      pick = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < features.rows(); ++i) {
        const double dd = sqdist(features.row_span(i), km.centroids.row_span(j));
        if (dd < bd) bd = dd, pick = i;
      }
    } else {
      pick = members[j][std::uniform_int_distribution<std::size_t>(0, members[j].size() - 1)(rng)];
    }
    out.source_indices.push_back(pick);
    auto src = features.row_span(pick);
    std::copy(src.begin(), src.end(), out.entries.row_span(j).begin());
  }
  return out;
}

void save_dictionary(const FeatureDictionary& d, const std::filesystem::path& path) {
  write_tensor(d.entries, path);
  nlohmann::json j{{"K", d.size()},
                   {"seed", d.seed},
                   {"mode", to_string(d.mode)},
                   {"split_hash", d.split_hash},
                   {"source_indices", d.source_indices}};
  std::ofstream os(path.string() + ".json");
  if (!os) throw DataError("cannot write " + path.string() + ".json");
  os << j.dump(2) << "\n";
}

FeatureDictionary load_dictionary(const std::filesystem::path& path) {
  FeatureDictionary d;
  d.entries = read_tensor(path);
  std::ifstream is(path.string() + ".json");
  if (!is) throw DataError("missing sidecar " + path.string() + ".json");
  try {
    auto j = nlohmann::json::parse(is);
    d.seed = j.at("seed").get<std::uint64_t>();
    d.mode = parse_dict_mode(j.at("mode").get<std::string>());
    d.split_hash = j.at("split_hash").get<std::uint64_t>();
    d.source_indices = j.at("source_indices").get<std::vector<std::size_t>>();
    if (j.at("K").get<std::size_t>() != d.entries.rows())
      throw DataError("dictionary sidecar K does not match " + path.string());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dictionary sidecar " + path.string() + ".json: " + e.what());
  }
  return d;
}

}  // namespace cimdd
