#include "peco/numerics.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace peco {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kBounds: return "bounds";
    case ErrorCode::kEvaluation: return "evaluation";
    case ErrorCode::kIngestion: return "ingestion";
    case ErrorCode::kManifestParse: return "manifest-parse";
    case ErrorCode::kTruncatedBlob: return "truncated-blob";
    case ErrorCode::kOffsetOverflow: return "offset-overflow";
    case ErrorCode::kVersionMismatch: return "version-mismatch";
    case ErrorCode::kFingerprint: return "fingerprint";
    case ErrorCode::kEmptyCodeword: return "empty-codeword";
    case ErrorCode::kUndefinedLoss: return "undefined-loss";
    case ErrorCode::kDiverged: return "diverged";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) fail(ErrorCode::kConfig, "uniform_int: n must be positive");
  const auto range = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % range);
  uint64_t v = engine_();
  while (v >= limit) v = engine_();
  return static_cast<int64_t>(v % range);
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<int64_t> Rng::permutation(int64_t n) {
  std::vector<int64_t> p(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) p[i] = i;
  shuffle(p);
  return p;
}

Rng Rng::fork(uint64_t salt) {
  // splitmix64 finalizer over (next draw, salt).
  uint64_t z = engine_() ^ (salt + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return Rng(z ^ (z >> 31));
}

std::string Rng::state() const {
  std::ostringstream os;
  os << seed_ << ' ' << engine_;
  return os.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream is(state);
  is >> seed_ >> engine_;
  if (!is) fail(ErrorCode::kConfig, "malformed rng state");
}

void seed_torch(uint64_t seed) { torch::manual_seed(seed); }

void check_finite(const torch::Tensor& t, std::string_view what) {
  if (!t.defined()) return;
  if (!torch::isfinite(t).all().item<bool>()) {
    fail(ErrorCode::kEvaluation, std::string(what) + ": non-finite values");
  }
}

namespace {

double eval_scalar(const ScalarFn& f, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  torch::Tensor y = f(x);
  if (y.numel() != 1) fail(ErrorCode::kShape, "grad_check: f must return a scalar");
  const double v = y.item<double>();
  if (!std::isfinite(v)) fail(ErrorCode::kEvaluation, "grad_check: non-finite f(x)");
  return v;
}

}  // namespace

GradCheckResult grad_check_detailed(const ScalarFn& f, const torch::Tensor& x,
                                    double eps) {
  if (!(eps > 0.0)) fail(ErrorCode::kConfig, "grad_check: eps must be positive");
  const torch::Tensor base = x.detach().to(torch::kFloat32).contiguous().clone();

  torch::Tensor analytic;
  {
    torch::Tensor xv = base.clone().requires_grad_(true);
    torch::Tensor y = f(xv);
    if (y.numel() != 1) fail(ErrorCode::kShape, "grad_check: f must return a scalar");
    if (!std::isfinite(y.item<double>())) {
      fail(ErrorCode::kEvaluation, "grad_check: non-finite f(x)");
    }
    auto grads = torch::autograd::grad({y.sum()}, {xv}, /*grad_outputs=*/{},
                                       /*retain_graph=*/false,
                                       /*create_graph=*/false,
                                       /*allow_unused=*/true);
    analytic = grads[0].defined() ? grads[0].detach() : torch::zeros_like(base);
  }

  const torch::Tensor flat_analytic = analytic.reshape({-1}).to(torch::kFloat64);
  auto ga = flat_analytic.accessor<double, 1>();

  GradCheckResult result;
  torch::Tensor probe = base.clone();
  auto flat = probe.view({-1});
  auto acc = flat.accessor<float, 1>();
  const int64_t n = flat.numel();
  for (int64_t i = 0; i < n; ++i) {
    const float orig = acc[i];
    const float up = static_cast<float>(orig + eps);
    const float down = static_cast<float>(orig - eps);
    acc[i] = up;
    const double f_up = eval_scalar(f, probe);
    acc[i] = down;
    const double f_down = eval_scalar(f, probe);
    acc[i] = orig;
    // Divide by the step actually representable in float32.
    const double step = static_cast<double>(up) - static_cast<double>(down);
    const double numeric = (f_up - f_down) / step;
    const double a = ga[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_relative_error || result.worst_index < 0) {
      result.max_relative_error = rel;
      result.worst_index = i;
      result.analytic_at_worst = a;
      result.numeric_at_worst = numeric;
    }
  }
  return result;
}

uint64_t fnv1a64(const void* data, size_t size, uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a64(const torch::Tensor& t, uint64_t seed) {
  const torch::Tensor c = t.detach().contiguous();
  return fnv1a64(c.data_ptr(), static_cast<size_t>(c.numel() * c.element_size()), seed);
}

std::string to_hex(uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace peco
