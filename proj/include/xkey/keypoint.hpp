#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "xkey/volume.hpp"

namespace xkey {

struct Keypoint {
  Vec3 position_mm = Vec3::Zero();
  Vec3 position_norm = Vec3::Zero();
  double scale = 1.0;  ///< mm
  double score = 0.0;
  int octave = 0;

  static Keypoint at(const Grid& grid, const Vec3& mm, double scale = 1.0, double score = 0.0) {
    Keypoint k;
    k.position_mm = mm;
    k.position_norm = grid.normalized(mm);
    k.scale = scale;
    k.score = score;
    return k;
  }
};

/// CSV: x_mm,y_mm,z_mm,scale_mm,score
inline void save_keypoints_csv(const std::vector<Keypoint>& kps, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write keypoints: " + path.string());
  out << "x_mm,y_mm,z_mm,scale_mm,score\n" << std::setprecision(9);
  for (const Keypoint& k : kps)
    out << k.position_mm.x() << ',' << k.position_mm.y() << ',' << k.position_mm.z() << ',' << k.scale << ','
        << k.score << '\n';
}

inline std::vector<Keypoint> load_keypoints_csv(const std::filesystem::path& path, const Grid& grid) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open keypoints: " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<Keypoint> kps;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    for (char& c : line)
      if (c == ',') c = ' ';
    std::istringstream row(line);
    double x, y, z, s, score;
    require(static_cast<bool>(row >> x >> y >> z >> s >> score), ErrorKind::format,
            "malformed keypoint row in " + path.string());
    kps.push_back(Keypoint::at(grid, Vec3(x, y, z), s, score));
  }
  return kps;
}

}  // namespace xkey
