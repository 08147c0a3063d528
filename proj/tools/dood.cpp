#include <filesystem>
#include <iostream>

#include "commands.hpp"
#include "dood/errors.hpp"

int main(int argc, char** argv) {
  using namespace dood::cli;
  CLI::App app{"Diffusion score matching for dense out-of-distribution detection", "dood"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DOOD_VERSION);
  CommandSet commands(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    commands.run();
    return kExitOk;
  } catch (const CLI::Error& e) {
    std::cerr << "dood: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const dood::NumericalError& e) {
    std::cerr << "dood: numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const dood::DataError& e) {
    std::cerr << "dood: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "dood: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "dood: error: " << e.what() << "\n";
    return 1;
  }
}
