#pragma once

#include <string>

namespace tcil {

// Command entry points shared by the binary and the tests. Every failure is
// reported as one "E_CODE: message" line on stderr with a nonzero status.
int cmd_train(const std::string& config_path, const std::string& out_dir, bool resume);
int cmd_analyze(const std::string& log_path, const std::string& map_path,
                const std::string& out_dir);
int cmd_prune(const std::string& checkpoint_path, const std::string& prune_config_path,
              const std::string& out_path);

}  // namespace tcil
