#ifndef SEQFIT_CLI_HPP
#define SEQFIT_CLI_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace seqfit {

std::string version_string();

// Flag-level overrides for values that also live in the JSON configs. Flags
// win over config values; everything structured stays in the config file.
struct CliOverrides {
  std::optional<std::string> out_dir;
  std::optional<uint64_t> seed;
  std::optional<std::string> stage;     // train: "1" | "2" | "3" | "all"
  std::optional<std::string> mode;      // label mode
  std::optional<std::string> resume;    // train: checkpoint to continue from
  std::optional<std::string> checkpoint;  // eval/label: weights to load
};

// Commands throw (ConfigError, IoError, ...); run_cli maps exceptions to
// exit codes: 0 ok, 2 configuration, 3 I/O, 4 internal invariant violation.
void cmd_simulate(const std::filesystem::path& config,
                  const CliOverrides& overrides = {});
void cmd_train(const std::filesystem::path& config,
               const CliOverrides& overrides = {});
void cmd_eval(const std::filesystem::path& config,
              const CliOverrides& overrides = {});
void cmd_label(const std::filesystem::path& config,
               const CliOverrides& overrides = {});
void cmd_report(const std::vector<std::filesystem::path>& eval_jsons,
                const std::filesystem::path& out_path);

int run_cli(int argc, const char* const* argv);

}  // namespace seqfit

#endif
