#include "latinf/dataset.hpp"

#include <algorithm>
#include <cctype>

#include "latinf/errors.hpp"

namespace latinf {

namespace fs = std::filesystem;

std::vector<int> DatasetSplit::labels() const {
  std::vector<int> out;
  out.reserve(classes.size());
  for (const auto& c : classes) out.push_back(c.label);
  return out;
}

const ClassFiles& DatasetSplit::at(int label) const {
  for (const auto& c : classes)
    if (c.label == label) return c;
  throw DataError("split '" + split + "' has no class with label " + std::to_string(label));
}

bool DatasetSplit::contains(int label) const {
  return std::any_of(classes.begin(), classes.end(), [label](const ClassFiles& c) { return c.label == label; });
}

std::size_t DatasetSplit::image_count() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.files.size();
  return n;
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

namespace {
bool all_digits(const std::string& s) {
  return !s.empty() && s.size() < 9 && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}
}  // namespace

DatasetSplit scan_split(const fs::path& root, const std::string& split) {
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw DataError("dataset split directory not found: " + dir.string());
  DatasetSplit out{root, split, {}};
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  const bool numeric = std::all_of(names.begin(), names.end(), all_digits);
  for (std::size_t i = 0; i < names.size(); ++i) {
    ClassFiles cf;
    cf.dir_name = names[i];
    cf.label = numeric ? std::stoi(names[i]) : static_cast<int>(i);
    for (const auto& e : fs::directory_iterator(dir / names[i]))
      if (e.is_regular_file() && is_image_file(e.path()))
        cf.files.push_back((fs::path(split) / names[i] / e.path().filename()).generic_string());
    std::sort(cf.files.begin(), cf.files.end());
    out.classes.push_back(std::move(cf));
  }
  std::sort(out.classes.begin(), out.classes.end(),
            [](const ClassFiles& a, const ClassFiles& b) { return a.label < b.label; });
  for (std::size_t i = 1; i < out.classes.size(); ++i)
    if (out.classes[i].label == out.classes[i - 1].label)
      throw DataError("duplicate class label " + std::to_string(out.classes[i].label) + " in " + dir.string());
  if (out.classes.empty()) throw DataError("no class directories under " + dir.string());
  return out;
}

}  // namespace latinf
