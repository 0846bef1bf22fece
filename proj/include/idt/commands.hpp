#pragma once

// Command implementations behind the `idt` executable. Each returns an exit
// code: 0 ok, 2 usage or configuration, 3 I/O or file format, 4 numerical abort.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

namespace idt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

struct GenDataArgs {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

struct TrainArgs {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
};

struct DecomposeArgs {
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> images;
  std::filesystem::path out;
};

struct EvalArgs {
  std::optional<std::filesystem::path> checkpoint;  // not needed with oracle
  std::filesystem::path dataset;
  std::optional<std::filesystem::path> out;          // stdout when absent
  bool per_view = false;
  bool oracle = false;
  bool json = false;
  bool all_references = false;
  double occlusion_tau = 0.01;
};

struct RelightArgs {
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> images;
  std::filesystem::path sgm;
  std::filesystem::path out;
};

int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_decompose(const DecomposeArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_relight(const RelightArgs& args, std::ostream& out, std::ostream& err);

// Parses `idt <command> [flags]` and dispatches.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace idt
