#pragma once

// Command-line front end. Every subcommand takes an optional JSON config
// file (`--config`) whose keys are flag names; flags given on the command
// line win over config values. Runs that produce files write manifest.json
// into their output directory.

#include <filesystem>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "cmsnet/annotation.hpp"
#include "cmsnet/sample.hpp"

namespace cmsnet {

inline constexpr std::string_view kToolVersion = "1.0.0";
inline constexpr const char* kOutDirEnv = "CMSNET_OUT_DIR";

/// `args` excludes the program name. Returns 0 on success, 1 on validation
/// or runtime errors, 2 on usage errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Layout shared by `toy generate`, `train`, `eval` and `sweep`:
///   <dir>/images/<stem>.png, <dir>/masks/<stem>.png, optional <dir>/classes.json
/// Samples come back in file-name order; `skip` and `limit` (0 = all) select
/// a contiguous slice.
std::vector<LabeledSample> load_dataset(const std::filesystem::path& dir, std::size_t skip = 0,
                                        std::size_t limit = 0);

/// Writes images, masks, annotations and classes.json.
void save_dataset(const std::filesystem::path& dir, const ToyDataset& data,
                  const ClassTable& classes);

}  // namespace cmsnet
