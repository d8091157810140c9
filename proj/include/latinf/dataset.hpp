#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace latinf {

struct ClassFiles {
  int label = 0;
  std::string dir_name;
  std::vector<std::string> files;  // relative to the dataset root, sorted
};

// One split of a root/split/class_dir/image layout.
//
// Class directories named by non-negative integers use that integer as the
// label; otherwise labels are ranks in lexicographic directory order (the
// usual ImageNet synset layout).
struct DatasetSplit {
  std::filesystem::path root;
  std::string split;
  std::vector<ClassFiles> classes;  // ascending label

  std::vector<int> labels() const;
  const ClassFiles& at(int label) const;
  bool contains(int label) const;
  std::size_t image_count() const;
};

bool is_image_file(const std::filesystem::path& p);
DatasetSplit scan_split(const std::filesystem::path& root, const std::string& split);

}  // namespace latinf
