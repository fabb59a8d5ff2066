// perm_server: HTTP session service for human players.
//
// Flags fall back to PERM_HOST, PERM_PORT, PERM_MODEL, PERM_CONDITION,
// PERM_SEED and PERM_DUMP. SIGINT/SIGTERM stop the server; with --dump every
// session log is appended as JSONL on the way out.

#include <csignal>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>

#include <pthread.h>

#include <CLI/CLI.hpp>

#include "perm/checkpoint.hpp"
#include "perm/http.hpp"
#include "perm/service.hpp"

int main(int argc, char** argv) {
  CLI::App app{"PERM session service"};
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string model_path, condition_text, dump_path;
  std::optional<std::uint64_t> seed;
  int training_levels = 10, attempts_cap = 15;
  bool cors = false;
  app.add_option("--host", host)->envname("PERM_HOST");
  app.add_option("--port", port)->envname("PERM_PORT")->check(CLI::Range(0, 65535));
  app.add_option("--model", model_path, "PERM checkpoint; without one only random/none run")
      ->envname("PERM_MODEL")
      ->check(CLI::ExistingFile);
  app.add_option("--condition", condition_text, "Force every session into perm | random | none")
      ->envname("PERM_CONDITION");
  app.add_option("--seed", seed, "Session seed base (default: random)")->envname("PERM_SEED");
  app.add_option("--dump", dump_path, "Append session logs as JSONL on shutdown")->envname("PERM_DUMP");
  app.add_option("--training-levels", training_levels);
  app.add_option("--attempts-cap", attempts_cap);
  app.add_flag("--cors", cors, "Allow cross-origin browser clients");
  CLI11_PARSE(app, argc, argv);

  try {
    std::shared_ptr<const perm::PermModel> model;
    if (!model_path.empty()) model = std::make_shared<const perm::PermModel>(perm::load_checkpoint(model_path));
    perm::ServiceConfig cfg;
    cfg.protocol = {training_levels, attempts_cap};
    if (!condition_text.empty()) cfg.condition_override = perm::parse_condition(condition_text);
    cfg.seed = seed ? *seed : (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
    perm::SessionService service(model, cfg);

    httplib::Server server;
    if (cors) {
      server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                  {"Access-Control-Allow-Headers", "Content-Type"},
                                  {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
      server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    }
    perm::install_routes(server, service);

    // Signals are taken synchronously by one thread; workers never see them.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    std::thread waiter([&] {
      int sig = 0;
      sigwait(&signals, &sig);
      server.stop();
    });

    const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) {
      std::cerr << "perm_server: cannot bind " << host << ":" << port << '\n';
      pthread_kill(waiter.native_handle(), SIGTERM);
      waiter.join();
      return 1;
    }
    std::cerr << "perm_server: listening on " << host << ":" << bound << " (model "
              << (model ? "loaded" : "none") << ")\n";
    server.listen_after_bind();
    if (server.is_running()) server.stop();
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();

    if (!dump_path.empty()) {
      std::ofstream out(dump_path, std::ios::app);
      for (const auto& log : service.snapshot()) out << nlohmann::json(log).dump() << '\n';
      if (!out) throw perm::Error(perm::ErrorCode::kIo, "could not write " + dump_path);
    }
    return 0;
  } catch (const perm::Error& e) {
    std::cerr << "perm_server: " << e.what() << '\n';
    return 2;
  }
}
