#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tomolab/delay_discrete.hpp"
#include "tomolab/mom.hpp"
#include "tomolab/probe_sim.hpp"
#include "tomolab/study.hpp"
#include "tomolab/topology.hpp"

namespace tomolab {

// Parsers take the exact bytes read and a name used in diagnostics. All
// throw InputError naming the line or field at fault.

struct InputFile {
  std::string name;
  std::string bytes;
};

InputFile read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

nlohmann::json parse_json(const InputFile& file);

/// {"root": int, "edges": [[parent, child], ...]}
Topology parse_topology(const InputFile& file);
nlohmann::json topology_json(const Topology& topology);

/// {"schemes": [[receiver, ...], ...]}
FlexicastExperiment parse_experiment(const InputFile& file);
nlohmann::json experiment_json(const FlexicastExperiment& experiment);

/// {"type": "loss", "links": {"1": 0.9, ...}} or
/// {"type": "delay", "links": {"1": {"family": "exp", "rate": 2, "p_zero": 0}, ...}}
/// with families exp (rate), gamma (shape, scale), uniform (upper) and
/// discrete (q, pmf).
using Model = std::variant<LossModel, DelayModel>;
Model parse_model(const InputFile& file);
nlohmann::json model_json(const Model& model);

/// scheme_index,outcome_bits,count
std::string loss_csv(const LossObservations& obs, const FlexicastExperiment& experiment);
LossObservations parse_loss_csv(const InputFile& file, const FlexicastExperiment& experiment);

/// scheme_index,probe_index,receiver_id,delay_seconds
std::string delay_csv(const DelayObservations& obs, const FlexicastExperiment& experiment);
DelayObservations parse_delay_csv(const InputFile& file, const FlexicastExperiment& experiment);

/// scheme_index,y_bins,count with y_bins a quoted comma-joined bin tuple.
std::string outcome_table_csv(const std::vector<OutcomeTable>& tables);
std::vector<OutcomeTable> parse_outcome_table_csv(const InputFile& file,
                                                  const FlexicastExperiment& experiment);

/// [{"scheme": 0, "kind": "cov", "receivers": [2, 3]}, ...]
std::vector<MomentDescriptor> parse_descriptors(const InputFile& file);

/// {"topology": {...}, "experiment": {...}, "model": {...}, "replications": R,
///  "probes": n, "seed": s, "estimators": ["mle", "ols", "gls"], "tol": t}
StudyConfig parse_study_config(const InputFile& file);

/// Decimal with 17 significant digits, so values read back exactly.
std::string format_double(double x);

}  // namespace tomolab
