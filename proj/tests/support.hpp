#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vessel3d/volume.hpp"

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("vessel3d_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline vessel3d::Volume3 random_volume(vessel3d::Dims dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> data(dims.voxels());
  for (auto& v : data) v = u(rng);
  return vessel3d::Volume3(dims, std::move(data));
}

inline std::ptrdiff_t clampi(std::ptrdiff_t v, std::size_t n) {
  return std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1);
}

inline double voxel(const vessel3d::Volume3& v, std::ptrdiff_t x, std::ptrdiff_t y, std::ptrdiff_t z) {
  const auto& d = v.dims();
  const std::size_t cx = clampi(x, d.nx), cy = clampi(y, d.ny), cz = clampi(z, d.nz);
  return v.data()[(cz * d.ny + cy) * d.nx + cx];
}

// Direct triple loop, cross-correlation, clamp-to-edge, x-fastest taps.
inline std::vector<double> naive_correlate(const vessel3d::Volume3& v, const std::vector<double>& f, int k) {
  const auto& d = v.dims();
  const int h = k / 2;
  std::vector<double> out(d.voxels());
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        double s = 0.0;
        for (int c = 0; c < k; ++c)
          for (int b = 0; b < k; ++b)
            for (int a = 0; a < k; ++a)
              s += f[(c * k + b) * k + a] * voxel(v, std::ptrdiff_t(x) + a - h, std::ptrdiff_t(y) + b - h,
                                                  std::ptrdiff_t(z) + c - h);
        out[(z * d.ny + y) * d.nx + x] = s;
      }
  return out;
}

// Dense 3D smoothing with the outer-product kernel w_i w_j w_l.
inline std::vector<double> dense_smooth(const vessel3d::Volume3& v, const std::vector<double>& w) {
  const int k = static_cast<int>(w.size());
  std::vector<double> f(static_cast<std::size_t>(k * k * k));
  for (int c = 0; c < k; ++c)
    for (int b = 0; b < k; ++b)
      for (int a = 0; a < k; ++a) f[(c * k + b) * k + a] = w[a] * w[b] * w[c];
  return naive_correlate(v, f, k);
}

inline double lasso_value(const Eigen::MatrixXd& D, const Eigen::VectorXd& p, const Eigen::VectorXd& x,
                          double lambda) {
  return (D * x - p).squaredNorm() + lambda * x.lpNorm<1>();
}

// Cyclic coordinate descent on ||Dx - p||^2 + lambda ||x||_1, run until the
// subgradient optimality residual is below `kkt_tol`.
inline Eigen::VectorXd cd_lasso(const Eigen::MatrixXd& D, const Eigen::VectorXd& p, double lambda,
                                double kkt_tol = 1e-12, long max_sweeps = 20000000) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(D.cols());
  Eigen::VectorXd r = p;
  const double t = lambda / 2.0;
  for (long sweep = 0; sweep < max_sweeps; ++sweep) {
    for (Eigen::Index j = 0; j < D.cols(); ++j) {
      const double nj = D.col(j).squaredNorm();
      const double rho = D.col(j).dot(r) + nj * x[j];
      const double xn = (rho > t ? rho - t : rho < -t ? rho + t : 0.0) / nj;
      if (xn != x[j]) {
        r -= (xn - x[j]) * D.col(j);
        x[j] = xn;
      }
    }
    if (sweep % 16 == 0) {
      r = p - D * x;
      const Eigen::VectorXd c = D.transpose() * r;
      double worst = 0.0;
      for (Eigen::Index j = 0; j < D.cols(); ++j)
        worst = std::max(worst, x[j] != 0.0 ? std::abs(c[j] - t * (x[j] > 0 ? 1 : -1)) : std::abs(c[j]) - t);
      if (worst < kkt_tol) break;
    }
  }
  return x;
}

inline double sigmoid(double t) { return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }

// Sum of log-losses plus (l2/2)||w||^2, bias unpenalized.
inline double logistic_value(const Eigen::MatrixXd& z, const std::vector<std::uint8_t>& y, const Eigen::VectorXd& w,
                             double b, double l2) {
  double f = 0.5 * l2 * w.squaredNorm();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double t = z.row(i).dot(w) + b;
    const double s = y[i] ? -t : t;
    f += s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
  }
  return f;
}

// Fixed-step gradient descent with step 1/L for the smooth logistic objective.
inline double gd_logistic(const Eigen::MatrixXd& z, const std::vector<std::uint8_t>& y, double l2,
                          int iters = 400000) {
  const Eigen::Index d = z.cols();
  Eigen::MatrixXd aug(z.rows(), d + 1);
  aug << z, Eigen::VectorXd::Ones(z.rows());
  const double lip = 0.25 * aug.squaredNorm() + l2;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  for (int it = 0; it < iters; ++it) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(d + 1);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double p = sigmoid(aug.row(i).dot(theta));
      g += (p - y[i]) * aug.row(i).transpose();
    }
    g.head(d) += l2 * theta.head(d);
    if (g.lpNorm<Eigen::Infinity>() < 1e-13) break;
    theta -= g / lip;
  }
  return logistic_value(z, y, theta.head(d), theta[d], l2);
}

}  // namespace testsupport
