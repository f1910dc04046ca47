#pragma once

// Command-line entry point.
//
// One binary, one dispatch: corpus, pretrain, build-pairs, train, sample,
// eval, analyze {kl-position | ref-margin | prob-position | length-bias},
// mdp-verify. Every flag is also a config-file key: flat "key = value" lines
// under a section named after the subcommand ("[train]",
// "[analyze.kl-position]"); root options such as "seed" go before any
// section. Precedence: command-line flag > DECAYPO_SEED (seed only) > config
// file > built-in default.

#include <iosfwd>
#include <string>
#include <vector>

namespace decaypo {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

/// args excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(const std::vector<std::string>& args);

/// "0.5,0.9" -> {0.5, 0.9}; throws std::invalid_argument on malformed items.
std::vector<double> parse_real_list(const std::string& text);
std::vector<int> parse_int_list(const std::string& text);

}  // namespace decaypo
