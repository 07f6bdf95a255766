#include "fdp/normalization.hpp"

#include <cmath>

#include "fdp/errors.hpp"

namespace fdp {

namespace {

constexpr double kMinSpread = 1e-9;
constexpr double kMinStd = 1e-6;

Vec read_vec(ByteReader& r) {
  const auto n = r.u64();
  if (n > r.remaining() / 8) throw CorruptionError("vector length exceeds payload");
  Vec v(static_cast<Eigen::Index>(n));
  r.f64s(std::span<double>(v.data(), static_cast<std::size_t>(n)));
  return v;
}

void write_vec(ByteWriter& w, const Vec& v) {
  w.u64(static_cast<std::uint64_t>(v.size()));
  w.f64s(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

}  // namespace

ActionNormalizer ActionNormalizer::fit(const Mat& raw) {
  if (raw.cols() == 0) throw ArgumentError("cannot fit normalization on no actions");
  ActionNormalizer n;
  n.min = raw.rowwise().minCoeff();
  n.max = raw.rowwise().maxCoeff();
  return n;
}

Vec ActionNormalizer::normalize(const Vec& x) const {
  const Eigen::Index d = min.size();
  if (d == 0 || x.size() % d != 0) throw ArgumentError("action length is not a multiple of the action dimension");
  Vec out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Eigen::Index k = i % d;
    const double span = max[k] - min[k];
    out[i] = span > kMinSpread ? 2.0 * (x[i] - min[k]) / span - 1.0 : x[i] - min[k];
  }
  return out;
}

Vec ActionNormalizer::denormalize(const Vec& x) const {
  const Eigen::Index d = min.size();
  if (d == 0 || x.size() % d != 0) throw ArgumentError("action length is not a multiple of the action dimension");
  Vec out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Eigen::Index k = i % d;
    const double span = max[k] - min[k];
    out[i] = span > kMinSpread ? (x[i] + 1.0) * 0.5 * span + min[k] : x[i] + min[k];
  }
  return out;
}

Mat ActionNormalizer::denormalize(const Mat& x) const {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j) = denormalize(Vec(x.col(j)));
  return out;
}

void ActionNormalizer::write(ByteWriter& w) const {
  write_vec(w, min);
  write_vec(w, max);
}

ActionNormalizer ActionNormalizer::read(ByteReader& r) {
  ActionNormalizer n;
  n.min = read_vec(r);
  n.max = read_vec(r);
  if (n.min.size() != n.max.size()) throw CorruptionError("action statistics disagree in size");
  return n;
}

ObsNormalizer ObsNormalizer::fit(const std::vector<ModalitySpec>& specs, const std::vector<Mat>& samples) {
  if (samples.size() != specs.size()) throw ArgumentError("one sample matrix per modality required");
  ObsNormalizer n;
  n.specs = specs;
  for (std::size_t m = 0; m < specs.size(); ++m) {
    const Mat& s = samples[m];
    if (s.rows() != specs[m].dim || s.cols() == 0) throw ArgumentError("bad sample matrix for " + specs[m].name);
    Vec mean, sd;
    if (specs[m].kind == ModalityKind::vision_grid) {
      const double mu = s.mean();
      const double var = (s.array() - mu).square().mean();
      mean = Vec::Constant(specs[m].dim, mu);
      sd = Vec::Constant(specs[m].dim, std::max(std::sqrt(var), kMinStd));
    } else {
      mean = s.rowwise().mean();
      sd = ((s.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
      sd = sd.cwiseMax(kMinStd);
    }
    n.mean.push_back(std::move(mean));
    n.stddev.push_back(std::move(sd));
  }
  return n;
}

Vec ObsNormalizer::normalize(std::size_t m, const Vec& x) const {
  const Eigen::Index d = mean[m].size();
  if (x.size() % d != 0) throw ArgumentError("observation length mismatch for " + specs[m].name);
  Vec out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = (x[i] - mean[m][i % d]) / stddev[m][i % d];
  return out;
}

Vec ObsNormalizer::denormalize(std::size_t m, const Vec& x) const {
  const Eigen::Index d = mean[m].size();
  if (x.size() % d != 0) throw ArgumentError("observation length mismatch for " + specs[m].name);
  Vec out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = x[i] * stddev[m][i % d] + mean[m][i % d];
  return out;
}

void ObsNormalizer::write(ByteWriter& w) const {
  w.u32(static_cast<std::uint32_t>(specs.size()));
  for (std::size_t m = 0; m < specs.size(); ++m) {
    w.str(specs[m].name);
    w.u32(static_cast<std::uint32_t>(specs[m].dim));
    w.str(to_string(specs[m].kind));
    write_vec(w, mean[m]);
    write_vec(w, stddev[m]);
  }
}

ObsNormalizer ObsNormalizer::read(ByteReader& r) {
  ObsNormalizer n;
  const auto count = r.u32();
  if (count > 64) throw CorruptionError("implausible modality count");
  for (std::uint32_t m = 0; m < count; ++m) {
    ModalitySpec spec;
    spec.name = r.str();
    spec.dim = static_cast<int>(r.u32());
    spec.kind = parse_modality_kind(r.str());
    n.specs.push_back(spec);
    n.mean.push_back(read_vec(r));
    n.stddev.push_back(read_vec(r));
  }
  return n;
}

}  // namespace fdp
