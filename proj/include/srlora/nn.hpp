#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "srlora/adapter.hpp"
#include "srlora/bundle.hpp"
#include "srlora/matrix.hpp"
#include "srlora/planner.hpp"
#include "srlora/synth.hpp"

namespace srlora {

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_dim = 128;
  std::size_t seq_len = 16;
  std::size_t num_classes = 4;
  std::size_t input_dim = 32;
  std::uint64_t seed = 0;
};

struct BlockWeights {
  Matrix w_q, w_k, w_v, w_o;  // d x d, applied as y = x W^T on row vectors
  Matrix w_mlp_in;            // mlp x d
  Matrix w_mlp_out;           // d x mlp
  Matrix ln1_gamma, ln1_beta;  // 1 x d
  Matrix ln2_gamma, ln2_beta;  // 1 x d
};

// Pre-norm attention/MLP stack over linearly embedded token features, mean
// pooled into a pre-classifier representation. Adapters may sit on the
// query/value/output projections; the key projection never carries one.
struct ToyTransformer {
  ModelConfig config;
  Matrix embed;  // d x input_dim
  std::vector<BlockWeights> blocks;
  Matrix final_gamma, final_beta;  // 1 x d
  Matrix classifier;               // classes x d
  std::map<WeightKey, LoraAdapter> adapters;
};

ToyTransformer build_model(const ModelConfig& config);

// Stable enumeration of every parameter tensor (backbone, classifier, and
// attached adapter factors). Gradient maps and optimizer state key on these
// names.
struct ParamRef {
  std::string name;
  Matrix* tensor;
};
std::vector<ParamRef> model_params(ToyTransformer& model);

bool is_norm_param(const std::string& name);
bool is_adapter_param(const std::string& name);
bool is_backbone_param(const std::string& name);

// W + BA for an adapted projection, the plain weight otherwise.
Matrix effective_weight(const ToyTransformer& model, const WeightKey& key);

// ---- forward / backward -------------------------------------------------

struct BlockTape {
  Matrix x_in;
  Matrix n1_xhat;
  std::vector<double> n1_rstd;
  Matrix n1;
  Matrix q, k, v;
  Matrix adapter_q_mid, adapter_v_mid, adapter_o_mid;  // X A_act^T caches
  std::vector<Matrix> attn_probs;  // per head, seq x seq rows sum to 1
  Matrix attn_concat;
  Matrix x_mid;
  Matrix n2_xhat;
  std::vector<double> n2_rstd;
  Matrix n2;
  Matrix mlp_pre;  // before the activation
  Matrix mlp_act;
};

struct ExampleTape {
  Matrix tokens;
  Matrix x0;
  std::vector<BlockTape> blocks;
  Matrix final_xhat;
  std::vector<double> final_rstd;
  Matrix feat;  // 1 x d
  std::vector<double> logits;
};

struct GradTape {
  std::vector<ExampleTape> examples;
  std::vector<std::vector<std::uint8_t>> labels;
  LabelMode label_mode = LabelMode::multi_class;
  std::map<WeightKey, std::size_t> active_ranks;  // as used in the forward
  double loss = 0.0;
  bool consumed = false;
};

struct ForwardResult {
  Matrix logits;    // batch x classes
  Matrix features;  // batch x d, pooled pre-classifier representations
};

// Forward over a batch of token matrices (each seq_len x input_dim).
// Batch elements run in parallel into indexed slots, so results and tape
// contents do not depend on the thread count.
ForwardResult forward(const ToyTransformer& model,
                      const std::vector<Matrix>& tokens,
                      GradTape* tape = nullptr);

// Forward plus the task loss (softmax cross-entropy for multi_class,
// per-label sigmoid cross-entropy for multi_label), recording everything
// backward() needs.
double forward_loss(const ToyTransformer& model,
                    const std::vector<Matrix>& tokens,
                    const std::vector<std::vector<std::uint8_t>>& labels,
                    LabelMode mode, GradTape& tape);

using GradMap = std::map<std::string, Matrix>;

// Exact reverse-mode gradients of the recorded loss for the named tensors.
// Tensors outside `trainable` get no entry. Factor regions beyond the
// recorded active_rank stay zero: they were absent from the forward graph.
// A tape drives one backward pass; a second call reports TapeConsumed.
GradMap backward(const ToyTransformer& model, GradTape& tape,
                 const std::set<std::string>& trainable);

// Singular values (descending) of the stacked pre-classifier features plus
// the count above rel_threshold * sigma_1.
struct FeatureSpectrum {
  std::vector<double> singular_values;
  std::size_t above_threshold = 0;
};
FeatureSpectrum extract_feature_spectrum(const ToyTransformer& model,
                                         const std::vector<Matrix>& dataset,
                                         double rel_threshold = 1e-3);

// ---- checkpoint round trip ----------------------------------------------

WeightBundle model_to_bundle(const ToyTransformer& model);
ToyTransformer model_from_bundle(const WeightBundle& bundle);

}  // namespace srlora
