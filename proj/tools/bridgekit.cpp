#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "bridgekit/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"bridgekit: diffusion bridge samplers checked against Gaussian oracles"};
  app.set_version_flag("--version", std::string(bridgekit::kVersion));
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  auto* run = app.add_subcommand("run", "Run one experiment from a JSON config");
  run->add_option("--config", config_path, "Path to the run configuration")->required();
  auto* out_opt = run->add_option("--out", out_dir, "Output directory (overrides config 'output')");
  auto* seed_opt = run->add_option("--seed", seed, "Seed (overrides config)");
  auto* threads_opt = run->add_option("--threads", threads, "Worker threads, 0 = auto (falls back to BRIDGEKIT_THREADS)");

  auto* selftest = app.add_subcommand("selftest", "Run the fast built-in checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : bridgekit::cli::kExitConfigInvalid;
  }

  if (selftest->parsed()) return bridgekit::cli::selftest(std::cout);

  const unsigned k = bridgekit::cli::resolve_thread_flag(threads_opt->count() ? std::optional<unsigned>(threads)
                                                                               : std::nullopt);
  return bridgekit::cli::run_command(
      config_path, out_opt->count() ? std::optional<std::filesystem::path>(out_dir) : std::nullopt,
      seed_opt->count() ? std::optional<std::uint64_t>(seed) : std::nullopt, k, std::cerr);
}
