#include "common.hpp"

#include <fstream>
#include <iostream>
#include <mutex>

#include "lucid/error.hpp"

namespace lucid::cli {

void diag(const std::string& level, const std::string& msg, const json& fields) {
  static std::mutex mu;
  json line = {{"level", level}, {"msg", msg}};
  line.update(fields);
  std::lock_guard lock(mu);
  std::cerr << line.dump() << std::endl;
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + p.string());
}

void write_json_file(const fs::path& p, const json& j) { write_text_file(p, j.dump(2) + "\n"); }

fs::path checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "manifest.json")) return p;
  if (fs::exists(p / "model" / "manifest.json")) return p / "model";
  throw NotFound("no checkpoint at " + p.string());
}

Model load_model(const fs::path& p) { return load_checkpoint(checkpoint_dir(p)); }

LabeledDataset load_split(const fs::path& dir, Split split, std::optional<int> limit) {
  auto ds = load_dataset_dir(dir, split);
  if (limit) {
    if (*limit < 1) throw InvalidArgument("sample limit must be >= 1");
    ds = ds.head(std::min(*limit, ds.size()));
  }
  return ds;
}

std::string dataset_name(const fs::path& dir) {
  const fs::path clean = dir.lexically_normal();
  const std::string name = clean.filename().string();
  return name.empty() ? clean.parent_path().filename().string() : name;
}

std::string hex_digest(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json config_section(const std::string& path, const std::string& name) {
  if (path.empty()) return json::object();
  json j = read_json_file(path);
  if (!j.is_object()) throw InvalidArgument("config file must hold a JSON object");
  if (j.contains(name)) return j[name];
  static const char* sections[] = {"train", "conventional", "attack", "oracle", "detector"};
  for (const char* s : sections)
    if (j.contains(s)) return json::object();  // sectioned file without this section
  return j;
}

}  // namespace lucid::cli
