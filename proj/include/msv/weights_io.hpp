#pragma once

// Weight directories: one tensor file per parameter, named
// <block>.<layer>.<tensor>.mst, plus a plain-text manifest.txt listing names,
// shapes and the configuration the weights were built for.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "msv/blocks.hpp"
#include "msv/tensor_io.hpp"

namespace msv {

template <class T>
void save_param_store(const std::string& dir, const ParamStore<T>& store,
                      const std::vector<std::string>& config_lines = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "msv-weights 1\n";
  manifest << "dtype " << (std::is_same_v<T, float> ? "f32" : "f64") << "\n";
  for (const auto& line : config_lines) manifest << "config " << line << "\n";
  for (const auto& [name, tensor] : store.tensors) {
    manifest << "tensor " << name;
    for (std::size_t d = 0; d < tensor.rank(); ++d) manifest << " " << tensor.extent(d);
    manifest << "\n";
    save_tensor((fs::path(dir) / (name + ".mst")).string(), tensor);
  }
  write_file_atomic((fs::path(dir) / "manifest.txt").string(), manifest.str());
}

template <class T>
ParamStore<T> load_param_store(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto manifest_path = (fs::path(dir) / "manifest.txt").string();
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error(manifest_path + ": cannot open weights manifest");

  ParamStore<T> store;
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (line_no == 1) {
      if (tag != "msv-weights")
        throw std::runtime_error(manifest_path + ": line 1: not a weights manifest");
      header_seen = true;
      continue;
    }
    if (tag == "dtype" || tag == "config") continue;
    if (tag == "tensor") {
      std::string name;
      ls >> name;
      if (name.empty())
        throw std::runtime_error(manifest_path + ": line " + std::to_string(line_no) +
                                 ": tensor entry without a name");
      store.tensors[name] = load_tensor<T>((fs::path(dir) / (name + ".mst")).string());
      continue;
    }
    throw std::runtime_error(manifest_path + ": line " + std::to_string(line_no) +
                             ": unknown entry '" + tag + "'");
  }
  if (!header_seen) throw std::runtime_error(manifest_path + ": empty manifest");
  return store;
}

// Checks that every expected parameter exists with the right shape; the error
// names the offending <block>.<layer>.<tensor>.
template <class T>
void validate_param_store(const ParamStore<T>& store, const std::vector<ParamInfo>& expected) {
  for (const ParamInfo& p : expected) {
    const Tensor<T>& t = store.at(p.name);
    if (t.shape() != p.shape)
      throw std::runtime_error("weight tensor '" + p.name + "' has shape " +
                               shape_str(t.shape()) + ", expected " + shape_str(p.shape));
  }
}

}  // namespace msv
