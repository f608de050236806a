#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "lucid/data.hpp"
#include "lucid/model.hpp"

namespace lucid::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

// One JSON object per line on stderr.
void diag(const std::string& level, const std::string& msg, const json& fields = json::object());
inline void info(const std::string& msg, const json& fields = json::object()) { diag("info", msg, fields); }

json read_json_file(const fs::path& p);
void write_json_file(const fs::path& p, const json& j);
void write_text_file(const fs::path& p, const std::string& text);

// Accepts a checkpoint directory or a run directory holding model/.
fs::path checkpoint_dir(const fs::path& p);
Model load_model(const fs::path& p);

LabeledDataset load_split(const fs::path& dir, Split split, std::optional<int> limit = {});
std::string dataset_name(const fs::path& dir);
std::string hex_digest(std::uint64_t v);

// Flag values that were given explicitly, as a JSON object keyed like the
// config structs; applied on top of the config file.
class Overrides {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    return app->add_option_function<T>(flag, [this, key](const T& v) { j_[key] = v; }, help);
  }
  const json& json_value() const { return j_; }

 private:
  json j_ = json::object();
};

// Section `name` of a JSON config file (or the whole file when it has no
// such section); empty object without a file.
json config_section(const std::string& path, const std::string& name);

void register_data(CLI::App& app);
void register_train(CLI::App& app);
void register_concepts(CLI::App& app);
void register_metrics(CLI::App& app);
void register_attack(CLI::App& app);
void register_serve(CLI::App& app);

}  // namespace lucid::cli
