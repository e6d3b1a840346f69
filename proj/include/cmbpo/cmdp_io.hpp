#pragma once

// Plain-text matrix format for TabularCMDP fixtures.
//
//   tabular_cmdp 1
//   n_states <S>
//   n_actions <A>
//   gamma <g>
//   n_costs <K>
//   cost_limits <d_0> ... <d_{K-1}>
//   start_dist <mu_0> ... <mu_{S-1}>
//   transition
//   <S*A rows of S numbers; row (s,a) holds P(.|s,a)>
//   reward
//   <S*A rows of S numbers>
//   cost 0
//   <S*A rows of S numbers>
//   ...
//
// Lines starting with '#' are comments. Probability rows within 1e-9 of a
// valid distribution are renormalised on load; anything further off is
// rejected.

#include "cmbpo/cmdp.hpp"

#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace cmbpo {

inline constexpr double kLoadTol = 1e-9;

namespace detail {

inline void write_tensor(std::ostream& os, const Tensor3& t) {
  for (Index s = 0; s < t.n_states(); ++s)
    for (Index a = 0; a < t.n_actions(); ++a) {
      for (Index s2 = 0; s2 < t.n_states(); ++s2) os << (s2 ? " " : "") << t(s, a, s2);
      os << '\n';
    }
}

class TokenReader {
 public:
  explicit TokenReader(std::istream& is) {
    std::string line;
    while (std::getline(is, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string tok;
      while (ls >> tok) tokens_.push_back(tok);
    }
  }

  std::string word() {
    if (pos_ >= tokens_.size()) throw InvalidArgument("cmdp text: unexpected end of input");
    return tokens_[pos_++];
  }
  void expect(const std::string& w) {
    const auto got = word();
    if (got != w) throw InvalidArgument("cmdp text: expected '" + w + "', got '" + got + "'");
  }
  double number() {
    const auto tok = word();
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw InvalidArgument("cmdp text: malformed number '" + tok + "'");
    }
  }
  long integer() {
    const double v = number();
    if (v < 0 || v != static_cast<double>(static_cast<long>(v)))
      throw InvalidArgument("cmdp text: expected a non-negative integer");
    return static_cast<long>(v);
  }
  bool done() const { return pos_ >= tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::size_t pos_ = 0;
};

inline Tensor3 read_tensor(TokenReader& in, Index n, Index m) {
  Tensor3 t(n, m);
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < m; ++a)
      for (Index s2 = 0; s2 < n; ++s2) t(s, a, s2) = in.number();
  return t;
}

/// Renormalises a near-valid distribution in place; throws when it is off by
/// more than kLoadTol.
template <class V>
void normalize_on_load(V&& p, const std::string& what) {
  for (Index i = 0; i < p.size(); ++i) {
    if (!std::isfinite(p[i]) || p[i] < -kLoadTol) throw InvalidArgument(what + ": invalid probability");
    if (p[i] < 0.0) p[i] = 0.0;
  }
  const double sum = p.sum();
  if (std::abs(sum - 1.0) > kLoadTol) throw InvalidArgument(what + ": probabilities do not sum to 1");
  p /= sum;
}

}  // namespace detail

inline void write_cmdp(std::ostream& os, const TabularCMDP& cmdp) {
  const auto old_precision = os.precision(std::numeric_limits<double>::max_digits10);
  os << "tabular_cmdp 1\n";
  os << "n_states " << cmdp.n_states() << '\n';
  os << "n_actions " << cmdp.n_actions() << '\n';
  os << "gamma " << cmdp.discount() << '\n';
  os << "n_costs " << cmdp.n_costs() << '\n';
  os << "cost_limits";
  for (double d : cmdp.cost_limits()) os << ' ' << d;
  os << "\nstart_dist";
  for (Index s = 0; s < cmdp.n_states(); ++s) os << ' ' << cmdp.start_dist()[s];
  os << "\ntransition\n";
  detail::write_tensor(os, cmdp.transition());
  os << "reward\n";
  detail::write_tensor(os, cmdp.reward());
  for (std::size_t i = 0; i < cmdp.n_costs(); ++i) {
    os << "cost " << i << '\n';
    detail::write_tensor(os, cmdp.cost(i));
  }
  os.precision(old_precision);
}

inline TabularCMDP read_cmdp(std::istream& is) {
  detail::TokenReader in(is);
  in.expect("tabular_cmdp");
  if (in.integer() != 1) throw InvalidArgument("cmdp text: unsupported version");
  in.expect("n_states");
  const Index n = in.integer();
  in.expect("n_actions");
  const Index m = in.integer();
  require(n > 0 && m > 0, "cmdp text: sizes must be positive");
  in.expect("gamma");
  const double gamma = in.number();
  in.expect("n_costs");
  const long k = in.integer();
  in.expect("cost_limits");
  std::vector<double> limits;
  for (long i = 0; i < k; ++i) limits.push_back(in.number());
  in.expect("start_dist");
  Vector mu(n);
  for (Index s = 0; s < n; ++s) mu[s] = in.number();
  detail::normalize_on_load(mu, "start_dist");
  in.expect("transition");
  Tensor3 p = detail::read_tensor(in, n, m);
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < m; ++a) detail::normalize_on_load(p.row(s, a), "transition row");
  in.expect("reward");
  Tensor3 r = detail::read_tensor(in, n, m);
  std::vector<Tensor3> costs;
  for (long i = 0; i < k; ++i) {
    in.expect("cost");
    if (in.integer() != i) throw InvalidArgument("cmdp text: cost tensors out of order");
    costs.push_back(detail::read_tensor(in, n, m));
  }
  if (!in.done()) throw InvalidArgument("cmdp text: trailing content");
  return {std::move(p), std::move(r), std::move(costs), std::move(mu), gamma, std::move(limits)};
}

inline void save_cmdp(const std::string& path, const TabularCMDP& cmdp) {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot open " + path + " for writing");
  write_cmdp(os, cmdp);
}

inline TabularCMDP load_cmdp(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open " + path);
  return read_cmdp(is);
}

}  // namespace cmbpo
