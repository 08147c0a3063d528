#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "CLI11.hpp"

namespace dood::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

/// The `dood` subcommands: stats, train, score, eval, synth, ablate.
class CommandSet {
 public:
  explicit CommandSet(CLI::App& app);
  ~CommandSet();

  /// Runs the subcommand selected by the last parse. Module errors propagate as exceptions.
  void run() const;

  struct State;

 private:
  std::unique_ptr<State> state_;
  std::vector<std::pair<CLI::App*, std::function<void()>>> runners_;
};

}  // namespace dood::cli
