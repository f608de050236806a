#include <iostream>

#include "common.hpp"
#include "lucid/error.hpp"

namespace {

// Exit codes: 2 usage, 3 invalid input, 4 missing file/entity, 5 state conflict,
// 6 malformed file, 7 numeric failure, 1 anything else.
int exit_code_for(std::exception_ptr ep, std::string& kind) {
  try {
    std::rethrow_exception(ep);
  } catch (const lucid::InvalidArgument&) {
    kind = "invalid_argument";
    return 3;
  } catch (const lucid::ShapeError&) {
    kind = "shape";
    return 3;
  } catch (const lucid::NotFound&) {
    kind = "not_found";
    return 4;
  } catch (const lucid::IoError&) {
    kind = "io";
    return 4;
  } catch (const lucid::Conflict&) {
    kind = "conflict";
    return 5;
  } catch (const lucid::ConsistencyError&) {
    kind = "consistency";
    return 5;
  } catch (const lucid::FormatError&) {
    kind = "format";
    return 6;
  } catch (const lucid::NumericError&) {
    kind = "numeric";
    return 7;
  } catch (const nlohmann::json::exception&) {
    kind = "invalid_argument";
    return 3;
  } catch (...) {
    kind = "internal";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lucid: train human-interpretable CNNs, manage concepts, measure interpretability and robustness"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lucid 0.1.0");
  lucid::cli::register_data(app);
  lucid::cli::register_train(app);
  lucid::cli::register_concepts(app);
  lucid::cli::register_metrics(app);
  lucid::cli::register_attack(app);
  lucid::cli::register_serve(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    lucid::cli::diag("error", e.what(), {{"kind", "usage"}});
    return 2;
  } catch (const std::exception& e) {
    std::string kind;
    const int code = exit_code_for(std::current_exception(), kind);
    lucid::cli::diag("error", e.what(), {{"kind", kind}});
    return code;
  }
  return 0;
}
