#include "cimdd/scm.hpp"

#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "cimdd/error.hpp"

namespace cimdd::scm {

namespace {

std::size_t product_of_cards(const std::vector<Variable>& vars) {
  std::size_t n = 1;
  for (const auto& v : vars) n *= v.cardinality;
  return n;
}

std::string describe(const Assignment& a) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [k, v] : a) {
    os << (first ? "" : ", ") << k << "=" << v;
    first = false;
  }
  return os.str();
}

void flatten_cpt(const nlohmann::json& node, std::size_t depth, const std::vector<std::size_t>& dims,
                 std::vector<double>& out, const std::string& var) {
  if (!node.is_array() || node.size() != dims[depth])
    throw ConfigError("cpt for '" + var + "' has wrong extent at depth " + std::to_string(depth) + ", expected " +
                      std::to_string(dims[depth]));
  for (const auto& child : node) {
    if (depth + 1 == dims.size()) {
      if (!child.is_number()) throw ConfigError("cpt for '" + var + "' contains a non-number");
      out.push_back(child.get<double>());
    } else {
      flatten_cpt(child, depth + 1, dims, out, var);
    }
  }
}

nlohmann::json nest_cpt(const std::vector<double>& flat, const std::vector<std::size_t>& dims, std::size_t depth,
                        std::size_t& pos) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < dims[depth]; ++i) {
    if (depth + 1 == dims.size())
      arr.push_back(flat[pos++]);
    else
      arr.push_back(nest_cpt(flat, dims, depth + 1, pos));
  }
  return arr;
}

}  // namespace

// ---------------------------------------------------------------- DiscreteSCM

DiscreteSCM::DiscreteSCM(std::vector<Variable> variables, std::map<std::string, std::vector<std::string>> parents,
                         std::map<std::string, std::vector<double>> cpts)
    : variables_(std::move(variables)) {
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    const auto& v = variables_[i];
    if (v.name.empty()) throw ConfigError("variable with empty name");
    if (v.cardinality == 0) throw ConfigError("variable '" + v.name + "' has zero cardinality");
    if (!index_.emplace(v.name, i).second) throw ConfigError("duplicate variable '" + v.name + "'");
  }
  for (const auto& [name, _] : parents)
    if (!index_.count(name)) throw ConfigError("parents given for unknown variable '" + name + "'");
  for (const auto& [name, _] : cpts)
    if (!index_.count(name)) throw ConfigError("cpt given for unknown variable '" + name + "'");

  parents_.resize(variables_.size());
  cpts_.resize(variables_.size());
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    const auto& v = variables_[i];
    if (auto it = parents.find(v.name); it != parents.end()) parents_[i] = it->second;
    std::set<std::string> seen;
    std::size_t rows = 1;
    for (const auto& p : parents_[i]) {
      if (!index_.count(p)) throw ConfigError("variable '" + v.name + "' has unknown parent '" + p + "'");
      if (p == v.name) throw ConfigError("variable '" + v.name + "' lists itself as parent");
      if (!seen.insert(p).second) throw ConfigError("variable '" + v.name + "' repeats parent '" + p + "'");
      rows *= variables_[index_.at(p)].cardinality;
    }
    auto it = cpts.find(v.name);
    if (it == cpts.end()) throw ConfigError("missing cpt for '" + v.name + "'");
    cpts_[i] = it->second;
    if (cpts_[i].size() != rows * v.cardinality)
      throw ConfigError("cpt for '" + v.name + "' has " + std::to_string(cpts_[i].size()) + " entries, expected " +
                        std::to_string(rows * v.cardinality));
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < v.cardinality; ++k) {
        const double p = cpts_[i][r * v.cardinality + k];
        if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("cpt for '" + v.name + "' has invalid entry");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-12)
        throw ConfigError("cpt row " + std::to_string(r) + " of '" + v.name + "' sums to " + std::to_string(s));
    }
  }

  // Kahn's algorithm, always taking the lowest declared index that is ready.
  std::vector<std::size_t> indeg(variables_.size(), 0);
  std::vector<std::vector<std::size_t>> children(variables_.size());
  for (std::size_t i = 0; i < variables_.size(); ++i)
    for (const auto& p : parents_[i]) {
      children[index_.at(p)].push_back(i);
      ++indeg[i];
    }
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < variables_.size(); ++i)
    if (!indeg[i]) ready.insert(i);
  while (!ready.empty()) {
    const std::size_t i = *ready.begin();
    ready.erase(ready.begin());
    topo_.push_back(i);
    for (auto c : children[i])
      if (--indeg[c] == 0) ready.insert(c);
  }
  if (topo_.size() != variables_.size()) throw ConfigError("parent graph contains a cycle");
}

DiscreteSCM DiscreteSCM::from_json(const nlohmann::json& j) {
  try {
    std::vector<Variable> vars;
    for (const auto& v : j.at("variables")) vars.push_back({v.at("name").get<std::string>(), v.at("cardinality").get<std::size_t>()});
    std::map<std::string, std::vector<std::string>> parents;
    if (j.contains("parents"))
      for (const auto& [k, v] : j.at("parents").items()) parents[k] = v.get<std::vector<std::string>>();
    std::map<std::string, std::size_t> card;
    for (const auto& v : vars) card[v.name] = v.cardinality;
    std::map<std::string, std::vector<double>> cpts;
    for (const auto& [k, node] : j.at("cpts").items()) {
      if (!card.count(k)) throw ConfigError("cpt given for unknown variable '" + k + "'");
      std::vector<std::size_t> dims;
      if (auto it = parents.find(k); it != parents.end())
        for (const auto& p : it->second) {
          if (!card.count(p)) throw ConfigError("variable '" + k + "' has unknown parent '" + p + "'");
          dims.push_back(card.at(p));
        }
      dims.push_back(card.at(k));
      std::vector<double> flat;
      flatten_cpt(node, 0, dims, flat, k);
      cpts[k] = std::move(flat);
    }
    return DiscreteSCM(std::move(vars), std::move(parents), std::move(cpts));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed SCM description: ") + e.what());
  }
}

nlohmann::json DiscreteSCM::to_json() const {
  nlohmann::json j;
  j["variables"] = nlohmann::json::array();
  for (const auto& v : variables_) j["variables"].push_back({{"name", v.name}, {"cardinality", v.cardinality}});
  j["parents"] = nlohmann::json::object();
  j["cpts"] = nlohmann::json::object();
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    if (!parents_[i].empty()) j["parents"][variables_[i].name] = parents_[i];
    std::vector<std::size_t> dims;
    for (const auto& p : parents_[i]) dims.push_back(variables_[index_.at(p)].cardinality);
    dims.push_back(variables_[i].cardinality);
    std::size_t pos = 0;
    j["cpts"][variables_[i].name] = nest_cpt(cpts_[i], dims, 0, pos);
  }
  return j;
}

std::size_t DiscreteSCM::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw QueryError("unknown variable '" + name + "'");
  return it->second;
}

const std::vector<std::string>& DiscreteSCM::parents(const std::string& name) const {
  return parents_[index_of(name)];
}

const std::vector<double>& DiscreteSCM::cpt(const std::string& name) const { return cpts_[index_of(name)]; }

double DiscreteSCM::probability(const std::string& var, std::size_t value,
                                const std::vector<std::size_t>& parent_values) const {
  const std::size_t i = index_of(var);
  std::size_t row = 0;
  for (std::size_t k = 0; k < parents_[i].size(); ++k)
    row = row * variables_[index_.at(parents_[i][k])].cardinality + parent_values.at(k);
  return cpts_[i][row * variables_[i].cardinality + value];
}

// ---------------------------------------------------------------- ProbabilityTable

ProbabilityTable::ProbabilityTable(std::vector<Variable> vars, std::vector<double> p)
    : vars_(std::move(vars)), p_(std::move(p)) {
  if (p_.size() != product_of_cards(vars_)) throw DimensionError("probability table size mismatch");
}

Assignment ProbabilityTable::assignment(std::size_t flat) const {
  Assignment a;
  for (std::size_t k = vars_.size(); k-- > 0;) {
    a[vars_[k].name] = flat % vars_[k].cardinality;
    flat /= vars_[k].cardinality;
  }
  return a;
}

double ProbabilityTable::probability(const Assignment& partial) const {
  std::vector<int> fixed(vars_.size(), -1);
  for (const auto& [name, val] : partial) {
    bool found = false;
    for (std::size_t k = 0; k < vars_.size(); ++k)
      if (vars_[k].name == name) {
        if (val >= vars_[k].cardinality) throw QueryError("value " + std::to_string(val) + " out of range for '" + name + "'");
        fixed[k] = static_cast<int>(val);
        found = true;
      }
    if (!found) throw QueryError("variable '" + name + "' not in table");
  }
  double s = 0.0;
  std::vector<std::size_t> digits(vars_.size(), 0);
  for (std::size_t flat = 0; flat < p_.size(); ++flat) {
    bool match = true;
    for (std::size_t k = 0; k < vars_.size() && match; ++k) match = fixed[k] < 0 || digits[k] == static_cast<std::size_t>(fixed[k]);
    if (match) s += p_[flat];
    for (std::size_t k = vars_.size(); k-- > 0;) {
      if (++digits[k] < vars_[k].cardinality) break;
      digits[k] = 0;
    }
  }
  return s;
}

ProbabilityTable ProbabilityTable::marginal(const std::vector<std::string>& names) const {
  std::vector<std::size_t> pos;
  std::vector<Variable> out_vars;
  for (const auto& n : names) {
    std::size_t k = 0;
    while (k < vars_.size() && vars_[k].name != n) ++k;
    if (k == vars_.size()) throw QueryError("variable '" + n + "' not in table");
    for (auto p : pos)
      if (p == k) throw QueryError("variable '" + n + "' listed twice");
    pos.push_back(k);
    out_vars.push_back(vars_[k]);
  }
  std::vector<double> out(product_of_cards(out_vars), 0.0);
  std::vector<std::size_t> digits(vars_.size(), 0);
  for (std::size_t flat = 0; flat < p_.size(); ++flat) {
    std::size_t idx = 0;
    for (std::size_t j = 0; j < pos.size(); ++j) idx = idx * out_vars[j].cardinality + digits[pos[j]];
    out[idx] += p_[flat];
    for (std::size_t k = vars_.size(); k-- > 0;) {
      if (++digits[k] < vars_[k].cardinality) break;
      digits[k] = 0;
    }
  }
  return ProbabilityTable(std::move(out_vars), std::move(out));
}

// ---------------------------------------------------------------- enumeration / surgery

ProbabilityTable enumerate_joint(const DiscreteSCM& scm, std::size_t max_states) {
  const auto& vars = scm.variables();
  std::size_t n = 1;
  for (const auto& v : vars) {
    if (n > max_states / v.cardinality)
      throw CapacityError("joint state space exceeds " + std::to_string(max_states) + " entries");
    n *= v.cardinality;
  }
  std::vector<std::vector<std::size_t>> parent_idx(vars.size());
  for (std::size_t i = 0; i < vars.size(); ++i)
    for (const auto& p : scm.parents(vars[i].name)) parent_idx[i].push_back(scm.index_of(p));

  std::vector<double> p(n, 0.0);
  std::vector<std::size_t> digits(vars.size(), 0);
  std::vector<std::size_t> pv;
  for (std::size_t flat = 0; flat < n; ++flat) {
    double prob = 1.0;
    for (std::size_t i = 0; i < vars.size() && prob > 0.0; ++i) {
      pv.clear();
      for (auto j : parent_idx[i]) pv.push_back(digits[j]);
      prob *= scm.probability(vars[i].name, digits[i], pv);
    }
    p[flat] = prob;
    for (std::size_t k = vars.size(); k-- > 0;) {
      if (++digits[k] < vars[k].cardinality) break;
      digits[k] = 0;
    }
  }
  return ProbabilityTable(vars, std::move(p));
}

DiscreteSCM do_intervene(const DiscreteSCM& scm, const Assignment& do_set) {
  std::map<std::string, std::vector<std::string>> parents;
  std::map<std::string, std::vector<double>> cpts;
  for (const auto& [name, val] : do_set) {
    const std::size_t card = scm.cardinality(name);
    if (card < 2) throw QueryError("intervention target '" + name + "' must have cardinality >= 2");
    if (val >= card) throw QueryError("do-value " + std::to_string(val) + " out of range for '" + name + "'");
  }
  for (const auto& v : scm.variables()) {
    if (auto it = do_set.find(v.name); it != do_set.end()) {
      std::vector<double> point(v.cardinality, 0.0);
      point[it->second] = 1.0;
      cpts[v.name] = std::move(point);
    } else {
      parents[v.name] = scm.parents(v.name);
      cpts[v.name] = scm.cpt(v.name);
    }
  }
  return DiscreteSCM(scm.variables(), std::move(parents), std::move(cpts));
}

std::vector<double> evaluate(const DiscreteSCM& scm, const InterventionQuery& q) {
  scm.index_of(q.target);
  for (const auto& [k, _] : q.condition_set) {
    scm.index_of(k);
    if (q.do_set.count(k)) throw QueryError("variable '" + k + "' appears in both do and condition sets");
  }
  const auto joint = enumerate_joint(do_intervene(scm, q.do_set));
  const double pc = joint.probability(q.condition_set);
  if (pc <= 0.0)
    throw UndefinedConditionalError("conditioning event {" + describe(q.condition_set) + "} has zero probability");
  std::vector<double> out(scm.cardinality(q.target));
  for (std::size_t y = 0; y < out.size(); ++y) {
    Assignment a = q.condition_set;
    if (auto it = a.find(q.target); it != a.end()) {
      out[y] = it->second == y ? 1.0 : 0.0;
      continue;
    }
    a[q.target] = y;
    out[y] = joint.probability(a) / pc;
  }
  return out;
}

// ---------------------------------------------------------------- adjustment formulas

namespace {

void require_distinct(const std::vector<std::string>& names) {
  std::set<std::string> s(names.begin(), names.end());
  if (s.size() != names.size()) throw QueryError("query roles must name distinct variables");
}

std::size_t configs(const DiscreteSCM& scm, const std::vector<std::string>& names) {
  std::size_t n = 1;
  for (const auto& s : names) n *= scm.cardinality(s);
  return n;
}

// sum_m P(m | t) sum_t' P(Y | t', m) P(t'), for a treatment tuple t.
AdjustedTable frontdoor_generic(const DiscreteSCM& scm, const std::vector<std::string>& treatments,
                                const std::string& m, const std::string& y) {
  std::vector<std::string> names = treatments;
  names.push_back(m);
  names.push_back(y);
  require_distinct(names);
  const auto table = enumerate_joint(scm).marginal(names);
  const auto& p = table.values();
  const std::size_t nt = configs(scm, treatments), nm = scm.cardinality(m), ny = scm.cardinality(y);
  auto at = [&](std::size_t t, std::size_t mi, std::size_t yi) { return p[(t * nm + mi) * ny + yi]; };

  std::vector<double> pt(nt, 0.0), ptm(nt * nm, 0.0);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t mi = 0; mi < nm; ++mi)
      for (std::size_t yi = 0; yi < ny; ++yi) {
        ptm[t * nm + mi] += at(t, mi, yi);
        pt[t] += at(t, mi, yi);
      }

  auto cell = [&](std::size_t t) {
    Assignment a;
    std::size_t rest = t;
    for (std::size_t k = treatments.size(); k-- > 0;) {
      a[treatments[k]] = rest % scm.cardinality(treatments[k]);
      rest /= scm.cardinality(treatments[k]);
    }
    return describe(a);
  };

  // inner[m][y] = sum_t' P(y | t', m) P(t'), computed on demand.
  std::vector<std::vector<double>> inner(nm);
  auto inner_for = [&](std::size_t mi) -> const std::vector<double>& {
    if (!inner[mi].empty()) return inner[mi];
    std::vector<double> acc(ny, 0.0);
    for (std::size_t t = 0; t < nt; ++t) {
      if (pt[t] <= 0.0) continue;
      const double denom = ptm[t * nm + mi];
      if (denom <= 0.0)
        throw UndefinedConditionalError("P(" + y + " | " + m + "=" + std::to_string(mi) + ", " + cell(t) +
                                        ") undefined: cell has zero probability");
      for (std::size_t yi = 0; yi < ny; ++yi) acc[yi] += at(t, mi, yi) / denom * pt[t];
    }
    inner[mi] = std::move(acc);
    return inner[mi];
  };

  AdjustedTable out(nt, std::vector<double>(ny, 0.0));
  for (std::size_t t = 0; t < nt; ++t) {
    if (pt[t] <= 0.0) throw UndefinedConditionalError("P(" + m + " | " + cell(t) + ") undefined: zero probability");
    for (std::size_t mi = 0; mi < nm; ++mi) {
      const double pm_t = ptm[t * nm + mi] / pt[t];
      if (pm_t <= 0.0) continue;
      const auto& in = inner_for(mi);
      for (std::size_t yi = 0; yi < ny; ++yi) out[t][yi] += pm_t * in[yi];
    }
  }
  return out;
}

}  // namespace

AdjustedTable interventional_by_enumeration(const DiscreteSCM& scm, const std::vector<std::string>& treatments,
                                            const std::string& y) {
  std::vector<std::string> names = treatments;
  names.push_back(y);
  require_distinct(names);
  const std::size_t nt = configs(scm, treatments);
  AdjustedTable out;
  for (std::size_t t = 0; t < nt; ++t) {
    InterventionQuery q{y, {}, {}};
    std::size_t rest = t;
    for (std::size_t k = treatments.size(); k-- > 0;) {
      q.do_set[treatments[k]] = rest % scm.cardinality(treatments[k]);
      rest /= scm.cardinality(treatments[k]);
    }
    out.push_back(evaluate(scm, q));
  }
  return out;
}

AdjustedTable observational_conditional(const DiscreteSCM& scm, const std::string& x, const std::string& y) {
  require_distinct({x, y});
  const auto table = enumerate_joint(scm).marginal({x, y});
  const std::size_t nx = scm.cardinality(x), ny = scm.cardinality(y);
  AdjustedTable out(nx, std::vector<double>(ny));
  for (std::size_t xi = 0; xi < nx; ++xi) {
    double px = 0.0;
    for (std::size_t yi = 0; yi < ny; ++yi) px += table.values()[xi * ny + yi];
    if (px <= 0.0) throw UndefinedConditionalError("P(" + y + " | " + x + "=" + std::to_string(xi) + ") undefined: zero probability");
    for (std::size_t yi = 0; yi < ny; ++yi) out[xi][yi] = table.values()[xi * ny + yi] / px;
  }
  return out;
}

AdjustedTable backdoor_adjust(const DiscreteSCM& scm, const std::string& x, const std::string& y,
                              const std::vector<std::string>& adjustment_set) {
  std::vector<std::string> names{x};
  names.insert(names.end(), adjustment_set.begin(), adjustment_set.end());
  names.push_back(y);
  require_distinct(names);
  const auto table = enumerate_joint(scm).marginal(names);
  const auto& p = table.values();
  const std::size_t nx = scm.cardinality(x), nc = configs(scm, adjustment_set), ny = scm.cardinality(y);
  auto at = [&](std::size_t xi, std::size_t c, std::size_t yi) { return p[(xi * nc + c) * ny + yi]; };

  std::vector<double> pc(nc, 0.0);
  for (std::size_t xi = 0; xi < nx; ++xi)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t yi = 0; yi < ny; ++yi) pc[c] += at(xi, c, yi);

  AdjustedTable out(nx, std::vector<double>(ny, 0.0));
  for (std::size_t xi = 0; xi < nx; ++xi)
    for (std::size_t c = 0; c < nc; ++c) {
      if (pc[c] <= 0.0) continue;
      double pxc = 0.0;
      for (std::size_t yi = 0; yi < ny; ++yi) pxc += at(xi, c, yi);
      if (pxc <= 0.0) {
        Assignment a{{x, xi}};
        std::size_t rest = c;
        for (std::size_t k = adjustment_set.size(); k-- > 0;) {
          a[adjustment_set[k]] = rest % scm.cardinality(adjustment_set[k]);
          rest /= scm.cardinality(adjustment_set[k]);
        }
        throw UndefinedConditionalError("P(" + y + " | " + describe(a) + ") undefined: cell has zero probability");
      }
      for (std::size_t yi = 0; yi < ny; ++yi) out[xi][yi] += at(xi, c, yi) / pxc * pc[c];
    }
  return out;
}

AdjustedTable frontdoor_adjust(const DiscreteSCM& scm, const std::string& x, const std::string& m,
                               const std::string& y) {
  return frontdoor_generic(scm, {x}, m, y);
}

AdjustedTable joint_intervention_adjust(const DiscreteSCM& scm, const std::string& v, const std::string& a,
                                        const std::string& m, const std::string& y) {
  return frontdoor_generic(scm, {v, a}, m, y);
}

}  // namespace cimdd::scm
