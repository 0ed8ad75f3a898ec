#include "srlora/nn.hpp"

#include <cmath>

#include "srlora/error.hpp"
#include "srlora/linalg.hpp"

namespace srlora {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2)); }

double gelu_grad(double z) {
  return 0.5 * (1.0 + std::erf(z * kInvSqrt2)) +
         z * kInvSqrt2Pi * std::exp(-0.5 * z * z);
}

void validate_config(const ModelConfig& c) {
  if (c.layers < 1 || c.model_dim < 1 || c.heads < 1 || c.mlp_dim < 1 ||
      c.seq_len < 1 || c.num_classes < 1 || c.input_dim < 1) {
    throw Error(ErrorCode::ConfigError, "model config: dimensions must be positive");
  }
  if (c.model_dim % c.heads != 0) {
    throw Error(ErrorCode::ConfigError,
                "model config: model_dim must be divisible by heads");
  }
}

Matrix scaled_gaussian(std::size_t rows, std::size_t cols, double scale,
                       Rng& rng) {
  Matrix m = Matrix::gaussian(rows, cols, rng);
  for (double& v : m.data()) v *= scale;
  return m;
}

// y = gamma .* (x - mean) * rstd + beta, per row. Caches the normalized
// values and per-row rstd for the backward pass.
Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                  Matrix& xhat, std::vector<double>& rstd) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  xhat = Matrix(rows, cols);
  rstd.assign(rows, 0.0);
  Matrix y(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(cols);
    const double r = 1.0 / std::sqrt(var + kLnEps);
    rstd[i] = r;
    double* hr = xhat.row(i);
    double* yr = y.row(i);
    for (std::size_t j = 0; j < cols; ++j) {
      hr[j] = (xr[j] - mean) * r;
      yr[j] = gamma(0, j) * hr[j] + beta(0, j);
    }
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat,
                           const std::vector<double>& rstd,
                           const Matrix& gamma, Matrix* dgamma,
                           Matrix* dbeta) {
  const std::size_t rows = dy.rows();
  const std::size_t cols = dy.cols();
  Matrix dx(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* dyr = dy.row(i);
    const double* hr = xhat.row(i);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double dxh = dyr[j] * gamma(0, j);
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * hr[j];
    }
    mean_dxhat /= static_cast<double>(cols);
    mean_dxhat_xhat /= static_cast<double>(cols);
    double* dxr = dx.row(i);
    for (std::size_t j = 0; j < cols; ++j) {
      const double dxh = dyr[j] * gamma(0, j);
      dxr[j] = rstd[i] * (dxh - mean_dxhat - hr[j] * mean_dxhat_xhat);
    }
  }
  if (dgamma != nullptr || dbeta != nullptr) {
    for (std::size_t i = 0; i < rows; ++i) {
      const double* dyr = dy.row(i);
      const double* hr = xhat.row(i);
      for (std::size_t j = 0; j < cols; ++j) {
        if (dgamma != nullptr) (*dgamma)(0, j) += dyr[j] * hr[j];
        if (dbeta != nullptr) (*dbeta)(0, j) += dyr[j];
      }
    }
  }
  return dx;
}

const LoraAdapter* adapter_for(const ToyTransformer& model, int layer,
                               Role role) {
  const auto it = model.adapters.find(WeightKey{layer, role});
  return it == model.adapters.end() ? nullptr : &it->second;
}

// y = x W^T (+ x A_act^T B_act^T when an adapter is attached). The mid
// product x A_act^T is cached for the backward pass; the full d x k delta
// never materializes.
Matrix project(const Matrix& x, const Matrix& w, const LoraAdapter* adapter,
               std::size_t active_rank, Matrix& mid) {
  Matrix y = matmul_nt(x, w);
  if (adapter != nullptr && active_rank > 0) {
    mid = matmul_nt(x, take_rows(adapter->a_factor, active_rank));
    add_in_place(y, matmul_nt(mid, take_cols(adapter->b_factor, active_rank)));
  } else {
    mid = Matrix();
  }
  return y;
}

void softmax_rows_in_place(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double* r = m.row(i);
    double peak = r[0];
    for (std::size_t j = 1; j < m.cols(); ++j) peak = std::max(peak, r[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      r[j] = std::exp(r[j] - peak);
      total += r[j];
    }
    for (std::size_t j = 0; j < m.cols(); ++j) r[j] /= total;
  }
}

Matrix head_slice(const Matrix& m, std::size_t head, std::size_t head_dim) {
  Matrix out(m.rows(), head_dim);
  const std::size_t base = head * head_dim;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* src = m.row(i);
    double* dst = out.row(i);
    for (std::size_t j = 0; j < head_dim; ++j) dst[j] = src[base + j];
  }
  return out;
}

void head_scatter_add(Matrix& dst, const Matrix& part, std::size_t head,
                      std::size_t head_dim) {
  const std::size_t base = head * head_dim;
  for (std::size_t i = 0; i < dst.rows(); ++i) {
    double* d = dst.row(i);
    const double* s = part.row(i);
    for (std::size_t j = 0; j < head_dim; ++j) d[base + j] += s[j];
  }
}

void run_example(const ToyTransformer& model, const Matrix& tokens,
                 ExampleTape& tape) {
  const ModelConfig& cfg = model.config;
  if (tokens.rows() != cfg.seq_len || tokens.cols() != cfg.input_dim) {
    throw Error(ErrorCode::ShapeMismatch,
                "forward: tokens are " + std::to_string(tokens.rows()) + "x" +
                    std::to_string(tokens.cols()) + ", expected " +
                    std::to_string(cfg.seq_len) + "x" +
                    std::to_string(cfg.input_dim));
  }
  const std::size_t head_dim = cfg.model_dim / cfg.heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  tape.tokens = tokens;
  tape.x0 = matmul_nt(tokens, model.embed);
  tape.blocks.assign(cfg.layers, BlockTape{});

  Matrix x = tape.x0;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const BlockWeights& w = model.blocks[l];
    BlockTape& bt = tape.blocks[l];
    const int layer = static_cast<int>(l) + 1;
    bt.x_in = x;

    bt.n1 = layer_norm(x, w.ln1_gamma, w.ln1_beta, bt.n1_xhat, bt.n1_rstd);

    const LoraAdapter* aq = adapter_for(model, layer, Role::query);
    const LoraAdapter* av = adapter_for(model, layer, Role::value);
    const LoraAdapter* ao = adapter_for(model, layer, Role::output);
    bt.q = project(bt.n1, w.w_q, aq, aq ? aq->active_rank : 0,
                   bt.adapter_q_mid);
    bt.k = matmul_nt(bt.n1, w.w_k);
    bt.v = project(bt.n1, w.w_v, av, av ? av->active_rank : 0,
                   bt.adapter_v_mid);

    bt.attn_probs.assign(cfg.heads, Matrix());
    bt.attn_concat = Matrix(cfg.seq_len, cfg.model_dim);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Matrix qh = head_slice(bt.q, h, head_dim);
      const Matrix kh = head_slice(bt.k, h, head_dim);
      const Matrix vh = head_slice(bt.v, h, head_dim);
      Matrix scores = matmul_nt(qh, kh);
      for (double& s : scores.data()) s *= attn_scale;
      softmax_rows_in_place(scores);
      bt.attn_probs[h] = scores;
      head_scatter_add(bt.attn_concat, matmul(scores, vh), h, head_dim);
    }

    Matrix attn = project(bt.attn_concat, w.w_o, ao,
                          ao ? ao->active_rank : 0, bt.adapter_o_mid);
    bt.x_mid = add(x, attn);

    bt.n2 = layer_norm(bt.x_mid, w.ln2_gamma, w.ln2_beta, bt.n2_xhat,
                       bt.n2_rstd);
    bt.mlp_pre = matmul_nt(bt.n2, w.w_mlp_in);
    bt.mlp_act = bt.mlp_pre;
    for (double& v : bt.mlp_act.data()) v = gelu(v);
    x = add(bt.x_mid, matmul_nt(bt.mlp_act, w.w_mlp_out));
  }

  const Matrix f = layer_norm(x, model.final_gamma, model.final_beta,
                              tape.final_xhat, tape.final_rstd);
  tape.feat = Matrix(1, cfg.model_dim);
  for (std::size_t i = 0; i < f.rows(); ++i) {
    const double* fr = f.row(i);
    for (std::size_t j = 0; j < cfg.model_dim; ++j) {
      tape.feat(0, j) += fr[j];
    }
  }
  const double inv_seq = 1.0 / static_cast<double>(cfg.seq_len);
  for (double& v : tape.feat.data()) v *= inv_seq;

  const Matrix logits = matmul_nt(tape.feat, model.classifier);
  tape.logits.assign(logits.data().begin(), logits.data().end());
}

Matrix* grad_slot(GradMap& grads, const std::set<std::string>& trainable,
                  const std::string& name, std::size_t rows,
                  std::size_t cols) {
  if (!trainable.contains(name)) return nullptr;
  auto [it, inserted] = grads.try_emplace(name, Matrix(rows, cols));
  return &it->second;
}

// Backward through y = x W^T (+ adapter path). Returns dx and accumulates
// into whatever gradient slots are trainable.
Matrix project_backward(const Matrix& dy, const Matrix& x, const Matrix& w,
                        const LoraAdapter* adapter, std::size_t active_rank,
                        const Matrix& mid, Matrix* dw, Matrix* da,
                        Matrix* db) {
  if (dw != nullptr) add_in_place(*dw, matmul_tn(dy, x));
  Matrix dx = matmul(dy, w);
  if (adapter != nullptr && active_rank > 0) {
    const Matrix a_act = take_rows(adapter->a_factor, active_rank);
    const Matrix b_act = take_cols(adapter->b_factor, active_rank);
    if (db != nullptr) {
      const Matrix db_act = matmul_tn(dy, mid);  // d x s
      for (std::size_t i = 0; i < db_act.rows(); ++i) {
        for (std::size_t j = 0; j < active_rank; ++j) {
          (*db)(i, j) += db_act(i, j);
        }
      }
    }
    const Matrix dmid = matmul(dy, b_act);  // seq x s
    if (da != nullptr) {
      const Matrix da_act = matmul_tn(dmid, x);  // s x k
      for (std::size_t i = 0; i < active_rank; ++i) {
        for (std::size_t j = 0; j < da_act.cols(); ++j) {
          (*da)(i, j) += da_act(i, j);
        }
      }
    }
    add_in_place(dx, matmul(dmid, a_act));
  }
  return dx;
}

void backward_example(const ToyTransformer& model, const ExampleTape& tape,
                      const std::vector<double>& dlogits_row, GradMap& grads,
                      const std::set<std::string>& trainable,
                      const std::map<WeightKey, std::size_t>& active_ranks) {
  const ModelConfig& cfg = model.config;
  const std::size_t head_dim = cfg.model_dim / cfg.heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Matrix dlogits(1, cfg.num_classes);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    dlogits(0, c) = dlogits_row[c];
  }

  if (Matrix* dwc = grad_slot(grads, trainable, "classifier",
                              cfg.num_classes, cfg.model_dim)) {
    add_in_place(*dwc, matmul_tn(dlogits, tape.feat));
  }
  const Matrix dfeat = matmul(dlogits, model.classifier);  // 1 x d

  // Mean pooling spreads the feature gradient evenly over positions.
  Matrix df(cfg.seq_len, cfg.model_dim);
  const double inv_seq = 1.0 / static_cast<double>(cfg.seq_len);
  for (std::size_t i = 0; i < cfg.seq_len; ++i) {
    for (std::size_t j = 0; j < cfg.model_dim; ++j) {
      df(i, j) = dfeat(0, j) * inv_seq;
    }
  }

  Matrix dx = layer_norm_backward(
      df, tape.final_xhat, tape.final_rstd, model.final_gamma,
      grad_slot(grads, trainable, "final_norm_gamma", 1, cfg.model_dim),
      grad_slot(grads, trainable, "final_norm_beta", 1, cfg.model_dim));

  for (std::size_t l = cfg.layers; l-- > 0;) {
    const BlockWeights& w = model.blocks[l];
    const BlockTape& bt = tape.blocks[l];
    const int layer = static_cast<int>(l) + 1;
    const std::string prefix = "layer" + std::to_string(layer) + ".";

    // x_out = x_mid + mlp(n2(x_mid))
    const Matrix& dm = dx;
    Matrix dh = matmul(dm, w.w_mlp_out);  // seq x mlp
    if (Matrix* dw2 = grad_slot(grads, trainable, prefix + "mlp_out",
                                cfg.model_dim, cfg.mlp_dim)) {
      add_in_place(*dw2, matmul_tn(dm, bt.mlp_act));
    }
    Matrix dz = dh;
    {
      auto dzd = dz.data();
      auto zp = bt.mlp_pre.data();
      for (std::size_t i = 0; i < dzd.size(); ++i) {
        dzd[i] *= gelu_grad(zp[i]);
      }
    }
    if (Matrix* dw1 = grad_slot(grads, trainable, prefix + "mlp_in",
                                cfg.mlp_dim, cfg.model_dim)) {
      add_in_place(*dw1, matmul_tn(dz, bt.n2));
    }
    const Matrix dn2 = matmul(dz, w.w_mlp_in);
    Matrix dx_mid = dx;
    add_in_place(
        dx_mid,
        layer_norm_backward(
            dn2, bt.n2_xhat, bt.n2_rstd, w.ln2_gamma,
            grad_slot(grads, trainable, prefix + "norm2_gamma", 1,
                      cfg.model_dim),
            grad_slot(grads, trainable, prefix + "norm2_beta", 1,
                      cfg.model_dim)));

    // x_mid = x_in + attn_out
    const LoraAdapter* aq = adapter_for(model, layer, Role::query);
    const LoraAdapter* av = adapter_for(model, layer, Role::value);
    const LoraAdapter* ao = adapter_for(model, layer, Role::output);
    auto rank_of = [&](Role role) -> std::size_t {
      const auto it = active_ranks.find(WeightKey{layer, role});
      return it == active_ranks.end() ? 0 : it->second;
    };

    const Matrix dconcat = project_backward(
        dx_mid, bt.attn_concat, w.w_o, ao, rank_of(Role::output),
        bt.adapter_o_mid,
        grad_slot(grads, trainable, prefix + "output", cfg.model_dim,
                  cfg.model_dim),
        ao ? grad_slot(grads, trainable, prefix + "lora_a.output", ao->r,
                       ao->k)
           : nullptr,
        ao ? grad_slot(grads, trainable, prefix + "lora_b.output", ao->d,
                       ao->r)
           : nullptr);

    Matrix dq(cfg.seq_len, cfg.model_dim);
    Matrix dk(cfg.seq_len, cfg.model_dim);
    Matrix dv(cfg.seq_len, cfg.model_dim);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Matrix dctx = head_slice(dconcat, h, head_dim);
      const Matrix qh = head_slice(bt.q, h, head_dim);
      const Matrix kh = head_slice(bt.k, h, head_dim);
      const Matrix vh = head_slice(bt.v, h, head_dim);
      const Matrix& probs = bt.attn_probs[h];

      Matrix dprobs = matmul_nt(dctx, vh);        // seq x seq
      head_scatter_add(dv, matmul_tn(probs, dctx), h, head_dim);

      // Softmax rows: dg = p .* (dp - sum(dp .* p)), then the score scale.
      Matrix dscores(cfg.seq_len, cfg.seq_len);
      for (std::size_t i = 0; i < cfg.seq_len; ++i) {
        const double* pr = probs.row(i);
        const double* dpr = dprobs.row(i);
        double inner = 0.0;
        for (std::size_t j = 0; j < cfg.seq_len; ++j) inner += pr[j] * dpr[j];
        double* dsr = dscores.row(i);
        for (std::size_t j = 0; j < cfg.seq_len; ++j) {
          dsr[j] = pr[j] * (dpr[j] - inner) * attn_scale;
        }
      }
      head_scatter_add(dq, matmul(dscores, kh), h, head_dim);
      head_scatter_add(dk, matmul_tn(dscores, qh), h, head_dim);
    }

    Matrix dn1 = project_backward(
        dq, bt.n1, w.w_q, aq, rank_of(Role::query), bt.adapter_q_mid,
        grad_slot(grads, trainable, prefix + "query", cfg.model_dim,
                  cfg.model_dim),
        aq ? grad_slot(grads, trainable, prefix + "lora_a.query", aq->r, aq->k)
           : nullptr,
        aq ? grad_slot(grads, trainable, prefix + "lora_b.query", aq->d, aq->r)
           : nullptr);
    if (Matrix* dwk = grad_slot(grads, trainable, prefix + "key",
                                cfg.model_dim, cfg.model_dim)) {
      add_in_place(*dwk, matmul_tn(dk, bt.n1));
    }
    add_in_place(dn1, matmul(dk, w.w_k));
    add_in_place(dn1, project_backward(
                          dv, bt.n1, w.w_v, av, rank_of(Role::value),
                          bt.adapter_v_mid,
                          grad_slot(grads, trainable, prefix + "value",
                                    cfg.model_dim, cfg.model_dim),
                          av ? grad_slot(grads, trainable,
                                         prefix + "lora_a.value", av->r, av->k)
                             : nullptr,
                          av ? grad_slot(grads, trainable,
                                         prefix + "lora_b.value", av->d, av->r)
                             : nullptr));

    Matrix dx_in = dx_mid;
    add_in_place(
        dx_in,
        layer_norm_backward(
            dn1, bt.n1_xhat, bt.n1_rstd, w.ln1_gamma,
            grad_slot(grads, trainable, prefix + "norm1_gamma", 1,
                      cfg.model_dim),
            grad_slot(grads, trainable, prefix + "norm1_beta", 1,
                      cfg.model_dim)));
    dx = std::move(dx_in);
  }

  if (Matrix* dembed = grad_slot(grads, trainable, "embed", cfg.model_dim,
                                 cfg.input_dim)) {
    add_in_place(*dembed, matmul_tn(dx, tape.tokens));
  }
}

}  // namespace

ToyTransformer build_model(const ModelConfig& config) {
  validate_config(config);
  ToyTransformer model;
  model.config = config;
  Rng rng(derive_seed(config.seed, 0x90DE1));
  const double d_scale = 1.0 / std::sqrt(static_cast<double>(config.model_dim));
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(config.input_dim));
  const double mlp_scale = 1.0 / std::sqrt(static_cast<double>(config.mlp_dim));

  model.embed = scaled_gaussian(config.model_dim, config.input_dim, in_scale,
                                rng);
  model.blocks.resize(config.layers);
  for (BlockWeights& w : model.blocks) {
    w.w_q = scaled_gaussian(config.model_dim, config.model_dim, d_scale, rng);
    w.w_k = scaled_gaussian(config.model_dim, config.model_dim, d_scale, rng);
    w.w_v = scaled_gaussian(config.model_dim, config.model_dim, d_scale, rng);
    w.w_o = scaled_gaussian(config.model_dim, config.model_dim, d_scale, rng);
    w.w_mlp_in = scaled_gaussian(config.mlp_dim, config.model_dim, d_scale,
                                 rng);
    w.w_mlp_out = scaled_gaussian(config.model_dim, config.mlp_dim, mlp_scale,
                                  rng);
    w.ln1_gamma = Matrix(1, config.model_dim);
    w.ln1_beta = Matrix(1, config.model_dim);
    w.ln2_gamma = Matrix(1, config.model_dim);
    w.ln2_beta = Matrix(1, config.model_dim);
    for (std::size_t j = 0; j < config.model_dim; ++j) {
      w.ln1_gamma(0, j) = 1.0;
      w.ln2_gamma(0, j) = 1.0;
    }
  }
  model.final_gamma = Matrix(1, config.model_dim);
  model.final_beta = Matrix(1, config.model_dim);
  for (std::size_t j = 0; j < config.model_dim; ++j) {
    model.final_gamma(0, j) = 1.0;
  }
  model.classifier = scaled_gaussian(config.num_classes, config.model_dim,
                                     d_scale, rng);
  return model;
}

std::vector<ParamRef> model_params(ToyTransformer& model) {
  std::vector<ParamRef> params;
  params.push_back({"embed", &model.embed});
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    BlockWeights& w = model.blocks[l];
    const std::string prefix = "layer" + std::to_string(l + 1) + ".";
    params.push_back({prefix + "query", &w.w_q});
    params.push_back({prefix + "key", &w.w_k});
    params.push_back({prefix + "value", &w.w_v});
    params.push_back({prefix + "output", &w.w_o});
    params.push_back({prefix + "mlp_in", &w.w_mlp_in});
    params.push_back({prefix + "mlp_out", &w.w_mlp_out});
    params.push_back({prefix + "norm1_gamma", &w.ln1_gamma});
    params.push_back({prefix + "norm1_beta", &w.ln1_beta});
    params.push_back({prefix + "norm2_gamma", &w.ln2_gamma});
    params.push_back({prefix + "norm2_beta", &w.ln2_beta});
  }
  params.push_back({"final_norm_gamma", &model.final_gamma});
  params.push_back({"final_norm_beta", &model.final_beta});
  params.push_back({"classifier", &model.classifier});
  for (auto& [key, adapter] : model.adapters) {
    const std::string prefix = "layer" + std::to_string(key.layer) + ".";
    params.push_back(
        {prefix + "lora_a." + role_name(key.role), &adapter.a_factor});
    params.push_back(
        {prefix + "lora_b." + role_name(key.role), &adapter.b_factor});
  }
  return params;
}

bool is_norm_param(const std::string& name) {
  return name.find("norm") != std::string::npos;
}

bool is_adapter_param(const std::string& name) {
  return name.find("lora_") != std::string::npos;
}

bool is_backbone_param(const std::string& name) {
  return !is_adapter_param(name) && name != "classifier";
}

Matrix effective_weight(const ToyTransformer& model, const WeightKey& key) {
  if (key.layer < 1 ||
      static_cast<std::size_t>(key.layer) > model.blocks.size()) {
    throw Error(ErrorCode::MissingWeight, weight_key_name(key));
  }
  const BlockWeights& w = model.blocks[static_cast<std::size_t>(key.layer - 1)];
  const Matrix* base = nullptr;
  switch (key.role) {
    case Role::query: base = &w.w_q; break;
    case Role::value: base = &w.w_v; break;
    case Role::output: base = &w.w_o; break;
  }
  const auto it = model.adapters.find(key);
  if (it == model.adapters.end()) return *base;
  return merge(it->second, *base);
}

ForwardResult forward(const ToyTransformer& model,
                      const std::vector<Matrix>& tokens, GradTape* tape) {
  const ModelConfig& cfg = model.config;
  const std::size_t batch = tokens.size();
  std::vector<ExampleTape> local;
  std::vector<ExampleTape>& examples = tape != nullptr ? tape->examples : local;
  examples.assign(batch, ExampleTape{});

  std::string failure;
  const std::int64_t n = static_cast<std::int64_t>(batch);
#pragma omp parallel for schedule(static) if (batch > 1)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      run_example(model, tokens[static_cast<std::size_t>(i)],
                  examples[static_cast<std::size_t>(i)]);
    } catch (const Error& e) {
#pragma omp critical
      failure = e.what();
    }
  }
  if (!failure.empty()) {
    throw Error(ErrorCode::ShapeMismatch, failure);
  }

  ForwardResult result;
  result.logits = Matrix(batch, cfg.num_classes);
  result.features = Matrix(batch, cfg.model_dim);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      result.logits(i, c) = examples[i].logits[c];
    }
    for (std::size_t j = 0; j < cfg.model_dim; ++j) {
      result.features(i, j) = examples[i].feat(0, j);
    }
  }
  if (tape != nullptr) {
    tape->active_ranks.clear();
    for (const auto& [key, adapter] : model.adapters) {
      tape->active_ranks[key] = adapter.active_rank;
    }
  }
  return result;
}

double forward_loss(const ToyTransformer& model,
                    const std::vector<Matrix>& tokens,
                    const std::vector<std::vector<std::uint8_t>>& labels,
                    LabelMode mode, GradTape& tape) {
  if (tokens.size() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "forward_loss: batch has " + std::to_string(tokens.size()) +
                    " inputs and " + std::to_string(labels.size()) +
                    " labels");
  }
  if (tokens.empty()) {
    throw Error(ErrorCode::EmptyDataset, "forward_loss: empty batch");
  }
  forward(model, tokens, &tape);
  tape.labels = labels;
  tape.label_mode = mode;
  tape.consumed = false;

  const std::size_t classes = model.config.num_classes;
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::vector<double>& logits = tape.examples[i].logits;
    const std::vector<std::uint8_t>& y = labels[i];
    if (y.size() != classes) {
      throw Error(ErrorCode::ShapeMismatch,
                  "forward_loss: label width " + std::to_string(y.size()));
    }
    if (mode == LabelMode::multi_class) {
      double peak = logits[0];
      for (double v : logits) peak = std::max(peak, v);
      double lse = 0.0;
      for (double v : logits) lse += std::exp(v - peak);
      lse = peak + std::log(lse);
      double picked = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        if (y[c] != 0) picked = logits[c];
      }
      total += lse - picked;
    } else {
      double ex = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        const double l = logits[c];
        const double t = y[c] != 0 ? 1.0 : 0.0;
        ex += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
      }
      total += ex / static_cast<double>(classes);
    }
  }
  tape.loss = total / static_cast<double>(tokens.size());
  return tape.loss;
}

GradMap backward(const ToyTransformer& model, GradTape& tape,
                 const std::set<std::string>& trainable) {
  if (tape.consumed) {
    throw Error(ErrorCode::TapeConsumed, "backward already ran on this tape");
  }
  if (tape.examples.empty() || tape.labels.size() != tape.examples.size()) {
    throw Error(ErrorCode::TapeConsumed, "tape lacks a recorded loss");
  }
  tape.consumed = true;

  const std::size_t classes = model.config.num_classes;
  const double inv_batch = 1.0 / static_cast<double>(tape.examples.size());
  GradMap grads;
  for (std::size_t i = 0; i < tape.examples.size(); ++i) {
    const std::vector<double>& logits = tape.examples[i].logits;
    const std::vector<std::uint8_t>& y = tape.labels[i];
    std::vector<double> dlogits(classes, 0.0);
    if (tape.label_mode == LabelMode::multi_class) {
      double peak = logits[0];
      for (double v : logits) peak = std::max(peak, v);
      double total = 0.0;
      for (double v : logits) total += std::exp(v - peak);
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp(logits[c] - peak) / total;
        dlogits[c] = (p - (y[c] != 0 ? 1.0 : 0.0)) * inv_batch;
      }
    } else {
      for (std::size_t c = 0; c < classes; ++c) {
        const double sigmoid = 1.0 / (1.0 + std::exp(-logits[c]));
        dlogits[c] = (sigmoid - (y[c] != 0 ? 1.0 : 0.0)) /
                     static_cast<double>(classes) * inv_batch;
      }
    }
    backward_example(model, tape.examples[i], dlogits, grads, trainable,
                     tape.active_ranks);
  }
  return grads;
}

FeatureSpectrum extract_feature_spectrum(const ToyTransformer& model,
                                         const std::vector<Matrix>& dataset,
                                         double rel_threshold) {
  if (dataset.empty()) {
    throw Error(ErrorCode::EmptyDataset, "feature spectrum of no examples");
  }
  const ForwardResult result = forward(model, dataset);
  const SvdResult dec = svd(result.features);
  FeatureSpectrum spectrum;
  spectrum.singular_values = dec.singular_values;
  if (!dec.singular_values.empty() && dec.singular_values[0] > 0.0) {
    const double cutoff = rel_threshold * dec.singular_values[0];
    for (double s : dec.singular_values) {
      if (s > cutoff) ++spectrum.above_threshold;
    }
  }
  return spectrum;
}

WeightBundle model_to_bundle(const ToyTransformer& model) {
  const ModelConfig& cfg = model.config;
  WeightBundle bundle;
  auto push = [&](const std::string& name, std::optional<int> layer,
                  const std::string& role, std::vector<std::size_t> shape,
                  const Matrix& data) {
    TensorEntry entry;
    entry.name = name;
    entry.layer = layer;
    entry.role = role;
    entry.shape = std::move(shape);
    entry.data = data;
    bundle.tensors.push_back(std::move(entry));
  };

  push("embed", std::nullopt, "embed", {cfg.model_dim, cfg.input_dim},
       model.embed);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const BlockWeights& w = model.blocks[l];
    const int layer = static_cast<int>(l) + 1;
    const std::string prefix = "layer" + std::to_string(layer) + ".";
    push(prefix + "query", layer, "query", {cfg.model_dim, cfg.model_dim},
         w.w_q);
    push(prefix + "key", layer, "key", {cfg.model_dim, cfg.model_dim}, w.w_k);
    push(prefix + "value", layer, "value", {cfg.model_dim, cfg.model_dim},
         w.w_v);
    push(prefix + "output", layer, "output", {cfg.model_dim, cfg.model_dim},
         w.w_o);
    push(prefix + "mlp_in", layer, "mlp_in", {cfg.mlp_dim, cfg.model_dim},
         w.w_mlp_in);
    push(prefix + "mlp_out", layer, "mlp_out", {cfg.model_dim, cfg.mlp_dim},
         w.w_mlp_out);
    Matrix norm(4, cfg.model_dim);
    for (std::size_t j = 0; j < cfg.model_dim; ++j) {
      norm(0, j) = w.ln1_gamma(0, j);
      norm(1, j) = w.ln1_beta(0, j);
      norm(2, j) = w.ln2_gamma(0, j);
      norm(3, j) = w.ln2_beta(0, j);
    }
    push(prefix + "norm", layer, "norm", {4, cfg.model_dim}, norm);
  }
  Matrix final_norm(2, cfg.model_dim);
  for (std::size_t j = 0; j < cfg.model_dim; ++j) {
    final_norm(0, j) = model.final_gamma(0, j);
    final_norm(1, j) = model.final_beta(0, j);
  }
  push("final_norm", std::nullopt, "norm", {2, cfg.model_dim}, final_norm);
  push("classifier", std::nullopt, "classifier",
       {cfg.num_classes, cfg.model_dim}, model.classifier);
  for (const auto& [key, adapter] : model.adapters) {
    const std::string prefix = "layer" + std::to_string(key.layer) + ".";
    const std::string target = role_name(key.role);
    push(prefix + "lora_a." + target, key.layer, "lora_a." + target,
         {adapter.r, adapter.k}, adapter.a_factor);
    push(prefix + "lora_b." + target, key.layer, "lora_b." + target,
         {adapter.d, adapter.r}, adapter.b_factor);
  }

  bundle.meta["model"] = {
      {"layers", cfg.layers},       {"model_dim", cfg.model_dim},
      {"heads", cfg.heads},         {"mlp_dim", cfg.mlp_dim},
      {"seq_len", cfg.seq_len},     {"num_classes", cfg.num_classes},
      {"input_dim", cfg.input_dim}, {"seed", cfg.seed},
  };
  return bundle;
}

ToyTransformer model_from_bundle(const WeightBundle& bundle) {
  if (!bundle.meta.contains("model")) {
    throw Error(ErrorCode::ManifestParse,
                "bundle lacks the model meta block");
  }
  const nlohmann::json& meta = bundle.meta["model"];
  ModelConfig cfg;
  try {
    cfg.layers = meta.at("layers").get<std::size_t>();
    cfg.model_dim = meta.at("model_dim").get<std::size_t>();
    cfg.heads = meta.at("heads").get<std::size_t>();
    cfg.mlp_dim = meta.at("mlp_dim").get<std::size_t>();
    cfg.seq_len = meta.at("seq_len").get<std::size_t>();
    cfg.num_classes = meta.at("num_classes").get<std::size_t>();
    cfg.input_dim = meta.at("input_dim").get<std::size_t>();
    cfg.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ManifestParse,
                std::string("model meta: ") + e.what());
  }
  validate_config(cfg);

  ToyTransformer model = build_model(cfg);
  auto require = [&](std::optional<int> layer,
                     const std::string& role) -> const Matrix& {
    const TensorEntry* t = bundle.find(layer, role);
    if (t == nullptr) {
      throw Error(ErrorCode::MissingWeight,
                  "bundle lacks role '" + role + "'" +
                      (layer ? " at layer " + std::to_string(*layer) : ""));
    }
    return t->data;
  };
  auto expect_shape = [&](const Matrix& m, std::size_t rows, std::size_t cols,
                          const char* what) -> const Matrix& {
    if (m.rows() != rows || m.cols() != cols) {
      throw Error(ErrorCode::ShapeMismatch,
                  std::string(what) + ": got " + std::to_string(m.rows()) +
                      "x" + std::to_string(m.cols()));
    }
    return m;
  };

  model.embed = expect_shape(require(std::nullopt, "embed"), cfg.model_dim,
                             cfg.input_dim, "embed");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const int layer = static_cast<int>(l) + 1;
    BlockWeights& w = model.blocks[l];
    w.w_q = expect_shape(require(layer, "query"), cfg.model_dim,
                         cfg.model_dim, "query");
    w.w_k = expect_shape(require(layer, "key"), cfg.model_dim, cfg.model_dim,
                         "key");
    w.w_v = expect_shape(require(layer, "value"), cfg.model_dim,
                         cfg.model_dim, "value");
    w.w_o = expect_shape(require(layer, "output"), cfg.model_dim,
                         cfg.model_dim, "output");
    w.w_mlp_in = expect_shape(require(layer, "mlp_in"), cfg.mlp_dim,
                              cfg.model_dim, "mlp_in");
    w.w_mlp_out = expect_shape(require(layer, "mlp_out"), cfg.model_dim,
                               cfg.mlp_dim, "mlp_out");
    const Matrix& norm =
        expect_shape(require(layer, "norm"), 4, cfg.model_dim, "norm");
    for (std::size_t j = 0; j < cfg.model_dim; ++j) {
      w.ln1_gamma(0, j) = norm(0, j);
      w.ln1_beta(0, j) = norm(1, j);
      w.ln2_gamma(0, j) = norm(2, j);
      w.ln2_beta(0, j) = norm(3, j);
    }
  }
  const Matrix& final_norm =
      expect_shape(require(std::nullopt, "norm"), 2, cfg.model_dim, "norm");
  for (std::size_t j = 0; j < cfg.model_dim; ++j) {
    model.final_gamma(0, j) = final_norm(0, j);
    model.final_beta(0, j) = final_norm(1, j);
  }
  model.classifier = expect_shape(require(std::nullopt, "classifier"),
                                  cfg.num_classes, cfg.model_dim,
                                  "classifier");

  for (const TensorEntry& t : bundle.tensors) {
    if (!t.layer || t.role.rfind("lora_a.", 0) != 0) continue;
    const std::string target = t.role.substr(7);
    const auto role = role_from_name(target);
    if (!role) {
      throw Error(ErrorCode::ManifestParse,
                  "tensor " + t.name + ": unknown adapter target");
    }
    const Matrix& a = t.data;
    const Matrix& b = require(*t.layer, "lora_b." + target);
    if (a.rows() != b.cols() || a.cols() != cfg.model_dim ||
        b.rows() != cfg.model_dim) {
      throw Error(ErrorCode::ShapeMismatch,
                  "tensor " + t.name + ": factor shapes disagree");
    }
    LoraAdapter adapter;
    adapter.d = b.rows();
    adapter.k = a.cols();
    adapter.r = a.rows();
    adapter.a_factor = a;
    adapter.b_factor = b;
    adapter.active_rank = adapter.r;
    model.adapters.emplace(WeightKey{*t.layer, *role}, std::move(adapter));
  }
  return model;
}

}  // namespace srlora
