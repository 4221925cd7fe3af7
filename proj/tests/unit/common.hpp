#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>
#undef CHECK
#include <doctest.h>

namespace testutil {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("docseg_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline double rel_err(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

/// Central-difference check of d(f)/d(x) on every element of x (small tensors only).
/// Errors are relative, with denominators floored at floor * max(1, max |grad|).
template <typename F>
double fd_max_rel_error(torch::Tensor x, F f, double eps = 1e-5, double floor = 1e-6) {
  x.requires_grad_(true);
  if (x.grad().defined()) x.grad().zero_();
  auto y = f();
  y.backward();
  auto grad = x.grad().clone();
  torch::NoGradGuard guard;
  auto flat = x.view({-1});
  auto g = grad.view({-1});
  const double gmax = std::max(1.0, grad.abs().max().template item<double>());
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].template item<double>();
    flat[i] = orig + eps;
    const double plus = f().template item<double>();
    flat[i] = orig - eps;
    const double minus = f().template item<double>();
    flat[i] = orig;
    const double numeric = (plus - minus) / (2 * eps);
    const double analytic = g[i].template item<double>();
    const double scale = std::max({std::abs(numeric), std::abs(analytic), floor * gmax});
    worst = std::max(worst, std::abs(numeric - analytic) / scale);
  }
  return worst;
}

}  // namespace testutil
