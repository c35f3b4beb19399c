#include "tomolab/probe_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "tomolab/error.hpp"
#include "tomolab/rng.hpp"

namespace tomolab {

std::uint64_t SchemeCounts::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

std::size_t SchemeCounts::scheme_size() const {
  std::size_t k = 0;
  while ((std::size_t{1} << k) < counts.size()) ++k;
  return k;
}

std::string outcome_bits(std::uint32_t mask, std::size_t k) {
  std::string s(k, '0');
  for (std::size_t j = 0; j < k; ++j) {
    if (mask & (1u << j)) s[j] = '1';
  }
  return s;
}

std::uint32_t parse_outcome_bits(const std::string& bits) {
  if (bits.empty() || bits.size() > 31) {
    throw InputError(fmt::format("invalid outcome bitstring '{}'", bits));
  }
  std::uint32_t mask = 0;
  for (std::size_t j = 0; j < bits.size(); ++j) {
    if (bits[j] == '1') {
      mask |= 1u << j;
    } else if (bits[j] != '0') {
      throw InputError(fmt::format("invalid outcome bitstring '{}'", bits));
    }
  }
  return mask;
}

void validate(const LossModel& model, const Topology& topology) {
  for (const auto& [k, a] : model.alpha) {
    if (!topology.contains(k) || k == topology.root()) {
      throw InputError(fmt::format("loss model names unknown link {}", k));
    }
    if (!(a > 0.0 && a <= 1.0)) {
      throw InputError(fmt::format("link {}: success probability {} outside (0, 1]", k, a));
    }
  }
}

namespace {

void validate_family(NodeId k, const ContinuousFamily& f) {
  std::visit(
      [k](const auto& law) {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, ExponentialLaw>) {
          if (!(law.rate > 0.0)) throw InputError(fmt::format("link {}: rate must be > 0", k));
        } else if constexpr (std::is_same_v<T, GammaLaw>) {
          if (!(law.shape > 0.0 && law.scale > 0.0)) {
            throw InputError(fmt::format("link {}: gamma shape and scale must be > 0", k));
          }
        } else {
          if (!(law.upper > 0.0)) throw InputError(fmt::format("link {}: upper must be > 0", k));
        }
      },
      f);
}

double draw(const ContinuousFamily& f, StreamRng& rng) {
  return std::visit(
      [&rng](const auto& law) -> double {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, ExponentialLaw>) {
          return std::exponential_distribution<double>(law.rate)(rng);
        } else if constexpr (std::is_same_v<T, GammaLaw>) {
          return std::gamma_distribution<double>(law.shape, law.scale)(rng);
        } else {
          // (0, upper]: the law puts no mass at zero.
          return law.upper * (1.0 - rng.uniform());
        }
      },
      f);
}

double draw(const LinkDelayLaw& law, StreamRng& rng) {
  if (const auto* d = std::get_if<DiscreteLaw>(&law)) {
    double u = rng.uniform();
    double cdf = 0.0;
    for (std::size_t i = 0; i < d->pmf.size(); ++i) {
      cdf += d->pmf[i];
      if (u < cdf) return static_cast<double>(i) * d->q;
    }
    // Rounding in the cumulative sum; fall back to the last bin with mass.
    std::size_t i = d->pmf.size();
    while (i > 0 && d->pmf[i - 1] <= 0.0) --i;
    return static_cast<double>(i == 0 ? 0 : i - 1) * d->q;
  }
  const auto& z = std::get<ZeroInflatedLaw>(law);
  if (rng.uniform() < z.p_zero) return 0.0;
  return draw(z.family, rng);
}

template <class Map>
void require_links(const Map& m, const std::vector<NodeId>& links, std::size_t scheme) {
  for (NodeId k : links) {
    if (!m.contains(k)) {
      throw InputError(fmt::format("model has no parameter for link {} (scheme {})", k, scheme));
    }
  }
}

// Receiver paths expressed as indices into the scheme's link list.
std::vector<std::vector<std::size_t>> path_indices(const Topology& topology, const Scheme& s,
                                                   const std::vector<NodeId>& links) {
  std::vector<std::vector<std::size_t>> out;
  for (NodeId r : s.receivers) {
    std::vector<std::size_t> idx;
    for (NodeId k : topology.path_from_root(r)) {
      idx.push_back(static_cast<std::size_t>(std::ranges::lower_bound(links, k) - links.begin()));
    }
    out.push_back(std::move(idx));
  }
  return out;
}

}  // namespace

void validate(const DelayModel& model, const Topology& topology) {
  for (const auto& [k, law] : model.links) {
    if (!topology.contains(k) || k == topology.root()) {
      throw InputError(fmt::format("delay model names unknown link {}", k));
    }
    if (const auto* d = std::get_if<DiscreteLaw>(&law)) {
      if (!(d->q > 0.0)) throw InputError(fmt::format("link {}: bin width must be > 0", k));
      if (d->pmf.empty()) throw InputError(fmt::format("link {}: empty pmf", k));
      double sum = 0.0;
      for (double p : d->pmf) {
        if (!(p >= 0.0)) throw InputError(fmt::format("link {}: negative pmf entry", k));
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-12) {
        throw InputError(fmt::format("link {}: pmf sums to {:.17g}, not 1", k, sum));
      }
    } else {
      const auto& z = std::get<ZeroInflatedLaw>(law);
      if (!(z.p_zero >= 0.0 && z.p_zero <= 1.0)) {
        throw InputError(fmt::format("link {}: zero-delay probability outside [0, 1]", k));
      }
      validate_family(k, z.family);
    }
  }
}

LossObservations simulate_loss(const Topology& topology, const LossModel& model,
                               const FlexicastExperiment& experiment, std::uint64_t n_per_scheme,
                               std::uint64_t seed, std::uint64_t stream) {
  experiment.validate(topology);
  validate(model, topology);
  if (n_per_scheme == 0) throw InputError("number of probes per scheme must be positive");

  LossObservations obs;
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    const auto& s = experiment.schemes[j];
    const auto links = scheme_links(topology, s);
    require_links(model.alpha, links, j);
    const auto paths = path_indices(topology, s, links);
    std::vector<double> alpha;
    for (NodeId k : links) alpha.push_back(model.alpha.at(k));

    SchemeCounts sc;
    sc.counts.assign(std::size_t{1} << s.size(), 0);
    std::vector<char> up(links.size());
    for (std::uint64_t i = 0; i < n_per_scheme; ++i) {
      for (std::size_t l = 0; l < links.size(); ++l) {
        StreamRng rng{seed, stream, j, i, static_cast<std::uint64_t>(links[l])};
        up[l] = rng.uniform() < alpha[l];
      }
      std::uint32_t mask = 0;
      for (std::size_t r = 0; r < paths.size(); ++r) {
        bool ok = true;
        for (std::size_t l : paths[r]) ok = ok && up[l];
        if (ok) mask |= 1u << r;
      }
      ++sc.counts[mask];
    }
    obs.schemes.push_back(std::move(sc));
  }
  return obs;
}

DelayObservations simulate_delay(const Topology& topology, const DelayModel& model,
                                 const FlexicastExperiment& experiment,
                                 std::uint64_t n_per_scheme, std::uint64_t seed,
                                 std::uint64_t stream) {
  experiment.validate(topology);
  validate(model, topology);
  if (n_per_scheme == 0) throw InputError("number of probes per scheme must be positive");

  DelayObservations obs;
  for (std::size_t j = 0; j < experiment.schemes.size(); ++j) {
    const auto& s = experiment.schemes[j];
    const auto links = scheme_links(topology, s);
    require_links(model.links, links, j);
    const auto paths = path_indices(topology, s, links);
    std::vector<const LinkDelayLaw*> laws;
    for (NodeId k : links) laws.push_back(&model.links.at(k));

    Eigen::MatrixXd y(static_cast<Eigen::Index>(n_per_scheme), static_cast<Eigen::Index>(s.size()));
    std::vector<double> x(links.size());
    for (std::uint64_t i = 0; i < n_per_scheme; ++i) {
      for (std::size_t l = 0; l < links.size(); ++l) {
        StreamRng rng{seed, stream, j, i, static_cast<std::uint64_t>(links[l])};
        x[l] = draw(*laws[l], rng);
      }
      for (std::size_t r = 0; r < paths.size(); ++r) {
        double sum = 0.0;
        for (std::size_t l : paths[r]) sum += x[l];
        y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) = sum;
      }
    }
    obs.schemes.push_back(std::move(y));
  }
  return obs;
}

FamilyMoments moments_of(const ContinuousFamily& family) {
  return std::visit(
      [](const auto& law) -> FamilyMoments {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, ExponentialLaw>) {
          double m = 1.0 / law.rate;
          return {m, m * m, 2.0 * m * m * m};
        } else if constexpr (std::is_same_v<T, GammaLaw>) {
          double b = law.scale;
          return {law.shape * b, law.shape * b * b, 2.0 * law.shape * b * b * b};
        } else {
          return {law.upper / 2.0, law.upper * law.upper / 12.0, 0.0};
        }
      },
      family);
}

}  // namespace tomolab
