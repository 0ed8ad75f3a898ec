#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "srlora/matrix.hpp"

namespace srlora {

enum class LabelMode { multi_class, multi_label };

const char* label_mode_name(LabelMode mode);

// Few-shot task family: a frozen seeded teacher labels anisotropic Gaussian
// token sequences; the downstream domain rotates the inputs by an orthogonal
// map interpolated by `gap` (0 = identity, 1 = the full seeded rotation)
// and relabels with the same teacher.
struct TaskSpec {
  std::size_t input_dim = 32;
  std::size_t seq_len = 16;
  std::size_t num_classes = 4;
  std::size_t shots = 5;
  double gap = 0.0;  // in [0, 1]
  LabelMode label_mode = LabelMode::multi_class;
  std::uint64_t seed = 0;
  std::size_t pretrain_size = 5000;
  std::size_t val_size = 100;
  std::size_t test_size = 200;
};

struct Split {
  std::vector<Matrix> inputs;  // each seq_len x input_dim
  std::vector<std::vector<std::uint8_t>> labels;  // multi-hot, num_classes
};

struct TaskData {
  TaskSpec spec;
  Split pretrain;  // source domain
  Split train;     // downstream, exactly `shots` per primary class
  Split val;
  Split test;
};

TaskData generate(const TaskSpec& spec);

// One TaskData per gap, sharing the source distribution and teacher.
std::vector<TaskData> gap_sweep(const TaskSpec& spec,
                                const std::vector<double>& gaps);

// Deterministic construction pieces, exposed so tests can check the
// generated data against the process that defines it.
namespace synth_detail {

// Per-dimension standard deviations of the source token distribution.
std::vector<double> token_scales(const TaskSpec& spec);

// Orthogonal domain map at the given gap: eigenbasis fixed by the seed,
// rotation angles scaled by gap, so R(g) follows the geodesic from identity
// to R(1).
Matrix domain_rotation(const TaskSpec& spec, double gap);

// Raw source-domain token draw for one example.
Matrix sample_tokens(const TaskSpec& spec, std::uint64_t example_seed);

std::uint64_t example_seed(const TaskSpec& spec, std::uint64_t split_tag,
                           std::uint64_t index);

inline constexpr std::uint64_t kPretrainTag = 1;
inline constexpr std::uint64_t kTrainTag = 2;
inline constexpr std::uint64_t kValTag = 3;
inline constexpr std::uint64_t kTestTag = 4;

}  // namespace synth_detail

// Stable identifier for the task family (used to match runs against their
// baseline in correlation reports).
std::string task_id(const TaskSpec& spec);

}  // namespace srlora
