#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "xkey/keypoint.hpp"
#include "xkey/parallel.hpp"

namespace xkey {

struct Match {
  std::size_t mr_index = 0;
  std::size_t us_index = 0;
  double distance = 0.0;
  double ratio = 0.0;
};

using MatchSet = std::vector<Match>;

inline constexpr double default_ratio() { return 0.75; }

inline void validate_ratio(double l) {
  require(l > 0.0 && l <= 1.0, ErrorKind::invalid_argument, "ratio threshold must lie in (0, 1]");
}

/// Nearest-neighbour matching with the ratio test d1/d2 < l, then one-to-one on
/// the US side: the claimant with the smallest d1 keeps a contested US index
/// (ties to the smaller MR index). Output is ordered by MR index.
template <typename MatM, typename MatU>
MatchSet match_descriptors(const MatM& mr, const MatU& us, double l = default_ratio(), int threads = 1) {
  validate_ratio(l);
  require(us.cols() >= 2, ErrorKind::invalid_argument, "matching needs at least 2 US descriptors");
  require(mr.rows() == us.rows(), ErrorKind::invalid_argument, "descriptor dimensions differ");
  const Eigen::MatrixXd a = mr.template cast<double>();
  const Eigen::MatrixXd b = us.template cast<double>();
  const auto n = static_cast<std::size_t>(a.cols());
  const auto m = static_cast<std::size_t>(b.cols());

  struct Best {
    std::size_t j = 0;
    double d1 = 0.0, d2 = 0.0;
  };
  std::vector<Best> best(n);
  parallel_for(n, threads, [&](std::size_t i) {
    double d1 = std::numeric_limits<double>::infinity(), d2 = d1;
    std::size_t j1 = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = (a.col(static_cast<Eigen::Index>(i)) - b.col(static_cast<Eigen::Index>(j))).norm();
      if (d < d1) {
        d2 = d1;
        d1 = d;
        j1 = j;
      } else if (d < d2) {
        d2 = d;
      }
    }
    best[i] = {j1, d1, d2};
  });

  std::vector<std::size_t> owner(m, n);
  std::vector<double> ratio(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Best& c = best[i];
    ratio[i] = c.d2 > 0.0 ? c.d1 / c.d2 : 1.0;
    if (!(ratio[i] < l)) continue;
    const std::size_t o = owner[c.j];
    if (o == n || c.d1 < best[o].d1) owner[c.j] = i;
  }
  MatchSet out;
  for (std::size_t i = 0; i < n; ++i)
    if (ratio[i] < l && owner[best[i].j] == i) out.push_back({i, best[i].j, best[i].d1, ratio[i]});
  return out;
}

inline void save_matches_csv(const MatchSet& matches, const std::vector<Keypoint>& mr_kps,
                             const std::vector<Keypoint>& us_kps, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write matches: " + path.string());
  out << "mr_idx,us_idx,dist,ratio,mr_x,mr_y,mr_z,us_x,us_y,us_z\n" << std::setprecision(9);
  for (const Match& m : matches) {
    require(m.mr_index < mr_kps.size() && m.us_index < us_kps.size(), ErrorKind::out_of_bounds,
            "match index outside keypoint list");
    const Vec3& p = mr_kps[m.mr_index].position_mm;
    const Vec3& q = us_kps[m.us_index].position_mm;
    out << m.mr_index << ',' << m.us_index << ',' << m.distance << ',' << m.ratio << ',' << p.x() << ',' << p.y()
        << ',' << p.z() << ',' << q.x() << ',' << q.y() << ',' << q.z() << '\n';
  }
}

/// Matched point pairs as (MR position, US position).
struct PointPairs {
  std::vector<Vec3> mr, us;
};

inline PointPairs matched_points(const MatchSet& matches, const std::vector<Keypoint>& mr_kps,
                                 const std::vector<Keypoint>& us_kps) {
  PointPairs p;
  for (const Match& m : matches) {
    p.mr.push_back(mr_kps.at(m.mr_index).position_mm);
    p.us.push_back(us_kps.at(m.us_index).position_mm);
  }
  return p;
}

}  // namespace xkey
