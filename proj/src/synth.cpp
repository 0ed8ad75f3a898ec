#include "srlora/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "srlora/error.hpp"

namespace srlora {

namespace {

using synth_detail::domain_rotation;
using synth_detail::example_seed;
using synth_detail::sample_tokens;
using synth_detail::token_scales;

constexpr std::size_t kTeacherHidden = 32;
constexpr std::size_t kCalibrationSamples = 20000;

// Frozen 2-layer nonlinear labeler. Class biases are calibrated so the
// argmax over source-domain draws is close to uniform; multi-label
// thresholds sit at the per-logit median.
struct Teacher {
  Matrix w1;  // hidden x input_dim
  std::vector<double> b1;
  Matrix w2;  // classes x hidden
  std::vector<double> b2;
  std::vector<double> thresholds;
};

std::vector<double> pooled_input(const Matrix& tokens) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(tokens.rows()));
  std::vector<double> pooled(tokens.cols(), 0.0);
  for (std::size_t i = 0; i < tokens.rows(); ++i) {
    const double* row = tokens.row(i);
    for (std::size_t j = 0; j < tokens.cols(); ++j) pooled[j] += row[j];
  }
  for (double& v : pooled) v *= inv_sqrt;
  return pooled;
}

std::vector<double> teacher_logits(const Teacher& teacher,
                                   const std::vector<double>& pooled) {
  std::vector<double> hidden = matvec(teacher.w1, pooled);
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    hidden[i] = std::tanh(hidden[i] + teacher.b1[i]);
  }
  std::vector<double> logits = matvec(teacher.w2, hidden);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += teacher.b2[i];
  return logits;
}

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

Teacher build_teacher(const TaskSpec& spec) {
  Teacher teacher;
  Rng rng(derive_seed(spec.seed, 0x7EAC4E8));
  teacher.w1 = Matrix::gaussian(kTeacherHidden, spec.input_dim, rng);
  const double w1_scale = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
  for (double& v : teacher.w1.data()) v *= w1_scale;
  teacher.b1.resize(kTeacherHidden);
  for (double& v : teacher.b1) v = 0.1 * rng.next_gaussian();
  teacher.w2 = Matrix::gaussian(spec.num_classes, kTeacherHidden, rng);
  const double w2_scale = 1.0 / std::sqrt(static_cast<double>(kTeacherHidden));
  for (double& v : teacher.w2.data()) v *= w2_scale;
  teacher.b2.assign(spec.num_classes, 0.0);
  teacher.thresholds.assign(spec.num_classes, 0.0);

  // Calibration sample from the source distribution.
  std::vector<std::vector<double>> pooled;
  pooled.reserve(kCalibrationSamples);
  for (std::size_t i = 0; i < kCalibrationSamples; ++i) {
    pooled.push_back(pooled_input(
        sample_tokens(spec, example_seed(spec, 0xCA11B, i))));
  }
  // b2 is still zero here, so these are the un-shifted logits.
  std::vector<std::vector<double>> raw_logits;
  raw_logits.reserve(pooled.size());
  for (const auto& p : pooled) {
    raw_logits.push_back(teacher_logits(teacher, p));
  }

  if (spec.label_mode == LabelMode::multi_class) {
    // Iterative bias adjustment toward uniform argmax frequencies.
    const double target = 1.0 / static_cast<double>(spec.num_classes);
    for (int round = 0; round < 120; ++round) {
      std::vector<double> freq(spec.num_classes, 0.0);
      for (const auto& logits : raw_logits) {
        std::vector<double> shifted = logits;
        for (std::size_t c = 0; c < shifted.size(); ++c) {
          shifted[c] += teacher.b2[c];
        }
        freq[argmax(shifted)] += 1.0;
      }
      double worst = 0.0;
      for (std::size_t c = 0; c < spec.num_classes; ++c) {
        freq[c] = std::max(freq[c] / static_cast<double>(raw_logits.size()),
                           1e-4);
        worst = std::max(worst, std::abs(freq[c] - target) / target);
        teacher.b2[c] += 0.5 * (std::log(target) - std::log(freq[c]));
      }
      if (worst < 0.01) break;
    }
  } else {
    // Per-logit median threshold: each label is positive for about half of
    // the source draws.
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      std::vector<double> values;
      values.reserve(raw_logits.size());
      for (const auto& logits : raw_logits) values.push_back(logits[c]);
      std::nth_element(values.begin(),
                       values.begin() + values.size() / 2, values.end());
      teacher.thresholds[c] = values[values.size() / 2];
    }
  }
  return teacher;
}

std::vector<std::uint8_t> label_for(const Teacher& teacher,
                                    const TaskSpec& spec,
                                    const Matrix& tokens) {
  const std::vector<double> logits =
      teacher_logits(teacher, pooled_input(tokens));
  std::vector<std::uint8_t> label(spec.num_classes, 0);
  if (spec.label_mode == LabelMode::multi_class) {
    label[argmax(logits)] = 1;
  } else {
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      label[c] = logits[c] > teacher.thresholds[c] ? 1 : 0;
    }
  }
  return label;
}

std::size_t primary_class(const Teacher& teacher, const Matrix& tokens) {
  return argmax(teacher_logits(teacher, pooled_input(tokens)));
}

Matrix transform_tokens(const Matrix& tokens, const Matrix& rotation) {
  // Row vectors: x' = R x  <=>  X' = X R^T.
  return matmul_nt(tokens, rotation);
}

Split draw_split(const TaskSpec& spec, const Teacher& teacher,
                 std::uint64_t tag, std::size_t count, bool target_domain,
                 const Matrix& rotation) {
  Split split;
  split.inputs.resize(count);
  split.labels.resize(count);
  const std::int64_t n = static_cast<std::int64_t>(count);
#pragma omp parallel for schedule(static) if (count >= 64)
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t idx = static_cast<std::size_t>(i);
    Matrix tokens = sample_tokens(spec, example_seed(spec, tag, idx));
    if (target_domain && spec.gap != 0.0) {
      tokens = transform_tokens(tokens, rotation);
    }
    split.labels[idx] = label_for(teacher, spec, tokens);
    split.inputs[idx] = std::move(tokens);
  }
  return split;
}

// Exactly `shots` examples per primary class, found by scanning the
// deterministic candidate stream.
Split draw_balanced_split(const TaskSpec& spec, const Teacher& teacher,
                          std::uint64_t tag, const Matrix& rotation) {
  Split split;
  std::vector<std::size_t> quota(spec.num_classes, spec.shots);
  std::size_t remaining = spec.shots * spec.num_classes;
  const std::size_t scan_limit = 1000 * spec.shots * spec.num_classes + 100000;
  for (std::size_t idx = 0; idx < scan_limit && remaining > 0; ++idx) {
    Matrix tokens = sample_tokens(spec, example_seed(spec, tag, idx));
    if (spec.gap != 0.0) tokens = transform_tokens(tokens, rotation);
    const std::size_t cls = primary_class(teacher, tokens);
    if (quota[cls] == 0) continue;
    --quota[cls];
    --remaining;
    split.labels.push_back(label_for(teacher, spec, tokens));
    split.inputs.push_back(std::move(tokens));
  }
  if (remaining > 0) {
    throw Error(ErrorCode::ConfigError,
                "adapt split: could not balance classes; a class is too rare "
                "in the target domain");
  }
  return split;
}

void validate_spec(const TaskSpec& spec) {
  if (spec.shots < 1 || spec.num_classes < 2 || spec.input_dim < 2 ||
      spec.seq_len < 1) {
    throw Error(ErrorCode::ConfigError, "task spec: degenerate dimensions");
  }
  if (spec.gap < 0.0 || spec.gap > 1.0) {
    throw Error(ErrorCode::ConfigError, "task spec: gap outside [0, 1]");
  }
}

}  // namespace

const char* label_mode_name(LabelMode mode) {
  return mode == LabelMode::multi_class ? "multi_class" : "multi_label";
}

namespace synth_detail {

std::vector<double> token_scales(const TaskSpec& spec) {
  // Geometrically decaying spectrum; the rotation of the resulting
  // anisotropic Gaussian is what creates the domain gap.
  std::vector<double> scales(spec.input_dim);
  for (std::size_t j = 0; j < spec.input_dim; ++j) {
    const double t = spec.input_dim > 1
                         ? static_cast<double>(j) /
                               static_cast<double>(spec.input_dim - 1)
                         : 0.0;
    scales[j] = std::exp(-1.5 * t);  // std devs in [0.22, 1]
  }
  return scales;
}

Matrix domain_rotation(const TaskSpec& spec, double gap) {
  const std::size_t n = spec.input_dim;
  // Seeded eigenbasis Q from Gram-Schmidt on a Gaussian matrix.
  Rng rng(derive_seed(spec.seed, 0x207A7E));
  Matrix q = Matrix::gaussian(n, n, rng);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t prev = 0; prev < j; ++prev) {
      double proj = 0.0;
      for (std::size_t i = 0; i < n; ++i) proj += q(i, j) * q(i, prev);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= proj * q(i, prev);
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= nrm;
  }
  // Disjoint 2-D rotation planes with seeded angles; scaling the angles by
  // gap traces the geodesic exp(gap * log R(1)).
  std::vector<double> angles(n / 2);
  for (double& a : angles) {
    a = (0.25 + 0.75 * rng.next_double()) * M_PI;  // in [pi/4, pi)
  }
  Matrix block(n, n);
  for (std::size_t i = 0; i < n; ++i) block(i, i) = 1.0;
  for (std::size_t p = 0; p + 1 < n; p += 2) {
    const double theta = gap * angles[p / 2];
    block(p, p) = std::cos(theta);
    block(p, p + 1) = -std::sin(theta);
    block(p + 1, p) = std::sin(theta);
    block(p + 1, p + 1) = std::cos(theta);
  }
  return matmul(matmul(q, block), transpose(q));
}

Matrix sample_tokens(const TaskSpec& spec, std::uint64_t seed) {
  // Scales depend only on input_dim; cached per thread.
  static thread_local std::vector<double> scales_cache;
  static thread_local std::size_t scales_dim = 0;
  if (scales_dim != spec.input_dim) {
    scales_cache = token_scales(spec);
    scales_dim = spec.input_dim;
  }
  Rng rng(seed);
  Matrix tokens(spec.seq_len, spec.input_dim);
  for (std::size_t i = 0; i < spec.seq_len; ++i) {
    double* row = tokens.row(i);
    for (std::size_t j = 0; j < spec.input_dim; ++j) {
      row[j] = scales_cache[j] * rng.next_gaussian();
    }
  }
  return tokens;
}

std::uint64_t example_seed(const TaskSpec& spec, std::uint64_t split_tag,
                           std::uint64_t index) {
  return derive_seed(spec.seed, split_tag, index);
}

}  // namespace synth_detail

TaskData generate(const TaskSpec& spec) {
  validate_spec(spec);
  const Teacher teacher = build_teacher(spec);
  const Matrix rotation = spec.gap != 0.0
                              ? domain_rotation(spec, spec.gap)
                              : Matrix::identity(spec.input_dim);

  TaskData data;
  data.spec = spec;
  data.pretrain = draw_split(spec, teacher, synth_detail::kPretrainTag,
                             spec.pretrain_size, /*target=*/false, rotation);
  data.train = draw_balanced_split(spec, teacher, synth_detail::kTrainTag,
                                   rotation);
  data.val = draw_split(spec, teacher, synth_detail::kValTag, spec.val_size,
                        /*target=*/true, rotation);
  data.test = draw_split(spec, teacher, synth_detail::kTestTag, spec.test_size,
                         /*target=*/true, rotation);
  return data;
}

std::vector<TaskData> gap_sweep(const TaskSpec& spec,
                                const std::vector<double>& gaps) {
  std::vector<TaskData> tasks;
  tasks.reserve(gaps.size());
  for (double gap : gaps) {
    TaskSpec variant = spec;
    variant.gap = gap;
    tasks.push_back(generate(variant));
  }
  return tasks;
}

std::string task_id(const TaskSpec& spec) {
  std::uint64_t h = derive_seed(spec.seed, 0x1D);
  h = derive_seed(h, spec.input_dim, spec.seq_len);
  h = derive_seed(h, spec.num_classes, spec.shots);
  h = derive_seed(h, static_cast<std::uint64_t>(spec.gap * 1e6),
                  spec.label_mode == LabelMode::multi_class ? 0 : 1);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "task-%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace srlora
