#pragma once

// The mmsqc command line: simulate | train | evaluate | control.

#include "mmsqc/app/config.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace mmsqc::app {

/// Stable process exit codes.
enum ExitCode : int {
    exit_ok = 0,
    exit_failure = 1,    ///< anything not listed below
    exit_config = 2,     ///< bad command line, config, dataset or missing checkpoint
    exit_simulation = 3, ///< plant blew up
    exit_divergence = 4, ///< training went non-finite
    exit_solver = 5,     ///< controller failed beyond its fail-safe budget
};

/// Maps the library's exception types onto exit codes.
int exit_code_for(const std::exception& e) noexcept;

/// `args` excludes the program name. Progress goes to `out`, errors to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Command bodies over already parsed configs; `doc` is written to the run
/// directory with the manifest.
void cmd_simulate(const SimulateRun& run, const Json& doc, std::ostream& out);
void cmd_train(const TrainRun& run, const Json& doc, std::ostream& out);
void cmd_evaluate(const EvaluateRun& run, const Json& doc, std::ostream& out);
void cmd_control(const ControlRun& run, const Json& doc, std::ostream& out);

/// Caps OpenMP workers from MMSQC_THREADS when it is set.
void apply_thread_limit();

} // namespace mmsqc::app
