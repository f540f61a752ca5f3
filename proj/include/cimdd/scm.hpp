#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace cimdd::scm {

struct Variable {
  std::string name;
  std::size_t cardinality = 2;
};

/// Variable name -> value index.
using Assignment = std::map<std::string, std::size_t>;

/// Finite discrete structural causal model. Each CPT is stored flattened:
/// one row per parent assignment (mixed radix, first listed parent most
/// significant), each row a distribution over the variable's values.
class DiscreteSCM {
 public:
  DiscreteSCM(std::vector<Variable> variables, std::map<std::string, std::vector<std::string>> parents,
              std::map<std::string, std::vector<double>> cpts);

  /// `{"variables": [{"name", "cardinality"}], "parents": {...}, "cpts": {...}}`
  /// where each CPT is a nested array indexed [parent_1]...[parent_k][value].
  static DiscreteSCM from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  const std::vector<Variable>& variables() const { return variables_; }
  std::size_t index_of(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t cardinality(const std::string& name) const { return variables_[index_of(name)].cardinality; }
  const std::vector<std::string>& parents(const std::string& name) const;
  const std::vector<double>& cpt(const std::string& name) const;
  /// P(var = value | parents = parent_values), parent values in parents() order.
  double probability(const std::string& var, std::size_t value, const std::vector<std::size_t>& parent_values) const;
  /// Variable indices in a topological order (stable w.r.t. declaration order).
  const std::vector<std::size_t>& topological_order() const { return topo_; }

 private:
  std::vector<Variable> variables_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<std::string>> parents_;
  std::vector<std::vector<double>> cpts_;
  std::vector<std::size_t> topo_;
};

/// Probability table over an ordered subset of variables, row-major with the
/// first variable most significant.
class ProbabilityTable {
 public:
  ProbabilityTable(std::vector<Variable> vars, std::vector<double> p);

  const std::vector<Variable>& variables() const { return vars_; }
  const std::vector<double>& values() const { return p_; }
  std::size_t size() const { return p_.size(); }
  /// Marginal probability of a partial assignment over this table's variables.
  double probability(const Assignment& partial) const;
  /// Marginalizes onto `names`, in the given order.
  ProbabilityTable marginal(const std::vector<std::string>& names) const;
  /// Full assignment for a flat index.
  Assignment assignment(std::size_t flat) const;

 private:
  std::vector<Variable> vars_;
  std::vector<double> p_;
};

/// Joint distribution over all variables (declaration order).
/// Throws CapacityError if the state space exceeds `max_states`.
ProbabilityTable enumerate_joint(const DiscreteSCM& scm, std::size_t max_states = 10'000'000);

/// Graph surgery: intervened variables lose their parents and get a point mass.
DiscreteSCM do_intervene(const DiscreteSCM& scm, const Assignment& do_set);

struct InterventionQuery {
  std::string target;
  Assignment do_set;
  Assignment condition_set;
};

/// P(target | do(do_set), condition_set) by mutilation + enumeration.
std::vector<double> evaluate(const DiscreteSCM& scm, const InterventionQuery& q);

/// One distribution over Y per treatment configuration. For several
/// treatment variables the configurations are mixed radix in argument order.
using AdjustedTable = std::vector<std::vector<double>>;

/// P(Y | do(treatments)) from the mutilated graph, for every treatment configuration.
AdjustedTable interventional_by_enumeration(const DiscreteSCM& scm, const std::vector<std::string>& treatments,
                                            const std::string& y);
/// Observational P(Y | X) per value of X.
AdjustedTable observational_conditional(const DiscreteSCM& scm, const std::string& x, const std::string& y);

/// sum_c P(Y | x, c) P(c).
AdjustedTable backdoor_adjust(const DiscreteSCM& scm, const std::string& x, const std::string& y,
                              const std::vector<std::string>& adjustment_set);
/// sum_m P(m | x) sum_x' P(Y | x', m) P(x').
AdjustedTable frontdoor_adjust(const DiscreteSCM& scm, const std::string& x, const std::string& m,
                               const std::string& y);
/// sum_m P(m | v, a) sum_{v',a'} P(Y | v', a', m) P(v', a'); rows indexed v * |A| + a.
AdjustedTable joint_intervention_adjust(const DiscreteSCM& scm, const std::string& v, const std::string& a,
                                        const std::string& m, const std::string& y);

}  // namespace cimdd::scm
