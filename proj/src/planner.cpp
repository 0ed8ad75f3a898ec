#include "srlora/planner.hpp"

#include <cmath>
#include <limits>

#include "srlora/adapter.hpp"
#include "srlora/error.hpp"
#include "srlora/linalg.hpp"

namespace srlora {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::size_t round_rank(double value, Rounding rounding) {
  double rounded = 0.0;
  switch (rounding) {
    case Rounding::ceil: rounded = std::ceil(value); break;
    case Rounding::floor: rounded = std::floor(value); break;
    case Rounding::nearest: rounded = std::round(value); break;
  }
  return rounded < 0.0 ? 0 : static_cast<std::size_t>(rounded);
}

// Adapted projections present in the bundle, validated to be the complete
// {q, v, o} x [1, L] grid.
std::vector<std::pair<WeightKey, const TensorEntry*>> collect_projections(
    const WeightBundle& bundle) {
  int max_layer = 0;
  for (const TensorEntry& t : bundle.tensors) {
    if (!t.layer || !role_from_name(t.role)) continue;
    max_layer = std::max(max_layer, *t.layer);
  }
  if (max_layer == 0) {
    throw Error(ErrorCode::MissingWeight,
                "bundle has no query/value/output projections");
  }
  std::vector<std::pair<WeightKey, const TensorEntry*>> found;
  for (int layer = 1; layer <= max_layer; ++layer) {
    for (Role role : {Role::query, Role::value, Role::output}) {
      const TensorEntry* t = bundle.find(layer, role_name(role));
      if (t == nullptr) {
        throw Error(ErrorCode::MissingWeight,
                    weight_key_name({layer, role}) + " absent from bundle");
      }
      if (t->shape.size() != 2) {
        throw Error(ErrorCode::ShapeMismatch,
                    weight_key_name({layer, role}) + " is not a matrix");
      }
      found.emplace_back(WeightKey{layer, role}, t);
    }
  }
  return found;
}

void finalize_totals(RankPlan& plan, const WeightBundle& bundle) {
  plan.total_trainable = 0;
  for (const auto& [key, entry] : plan.entries) {
    plan.total_trainable += trainable_params(entry.d, entry.k,
                                             entry.assigned_rank);
  }
  plan.backbone_total = bundle.backbone_total();
  plan.trainable_ratio =
      plan.backbone_total > 0
          ? static_cast<double>(plan.total_trainable) /
                static_cast<double>(plan.backbone_total)
          : 0.0;
}

}  // namespace

const char* role_name(Role role) {
  switch (role) {
    case Role::query: return "query";
    case Role::value: return "value";
    case Role::output: return "output";
  }
  return "?";
}

std::optional<Role> role_from_name(const std::string& name) {
  if (name == "query") return Role::query;
  if (name == "value") return Role::value;
  if (name == "output") return Role::output;
  return std::nullopt;
}

std::string weight_key_name(const WeightKey& key) {
  return "(layer " + std::to_string(key.layer) + ", " + role_name(key.role) +
         ")";
}

const char* rounding_name(Rounding rounding) {
  switch (rounding) {
    case Rounding::ceil: return "ceil";
    case Rounding::floor: return "floor";
    case Rounding::nearest: return "nearest";
  }
  return "?";
}

std::optional<Rounding> rounding_from_name(const std::string& name) {
  if (name == "ceil") return Rounding::ceil;
  if (name == "floor") return Rounding::floor;
  if (name == "nearest") return Rounding::nearest;
  return std::nullopt;
}

RankPlan plan_stable(const WeightBundle& bundle, Rounding rounding) {
  const auto projections = collect_projections(bundle);

  std::vector<double> sranks(projections.size(), 0.0);
  std::vector<std::string> failures(projections.size());
  const std::int64_t count = static_cast<std::int64_t>(projections.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < count; ++i) {
    const auto& [key, tensor] = projections[static_cast<std::size_t>(i)];
    try {
      sranks[static_cast<std::size_t>(i)] = stable_rank(tensor->data);
    } catch (const Error& e) {
      failures[static_cast<std::size_t>(i)] =
          weight_key_name(key) + ": " + e.what();
    }
  }
  for (std::size_t i = 0; i < projections.size(); ++i) {
    if (!failures[i].empty()) {
      throw Error(ErrorCode::ZeroMatrix, failures[i]);
    }
  }

  RankPlan plan;
  plan.rounding = rounding;
  plan.strategy = "stable";
  for (std::size_t i = 0; i < projections.size(); ++i) {
    const auto& [key, tensor] = projections[i];
    RankPlanEntry entry;
    entry.d = tensor->data.rows();
    entry.k = tensor->data.cols();
    entry.stable_rank_value = sranks[i];
    const std::size_t cap = std::min(entry.d, entry.k);
    std::size_t rank = round_rank(entry.stable_rank_value, rounding);
    entry.clamped = rank < 1 || rank > cap;
    entry.assigned_rank = std::clamp<std::size_t>(rank, 1, cap);
    plan.entries.emplace(key, entry);
  }
  finalize_totals(plan, bundle);
  return plan;
}

RankPlan plan_fixed(const WeightBundle& bundle, std::size_t r) {
  if (r < 1) {
    throw Error(ErrorCode::ConfigError, "plan_fixed: rank must be >= 1");
  }
  const auto projections = collect_projections(bundle);

  RankPlan plan;
  plan.rounding = Rounding::ceil;
  plan.strategy = "fixed:" + std::to_string(r);
  plan.fixed_rank = r;
  for (const auto& [key, tensor] : projections) {
    RankPlanEntry entry;
    entry.d = tensor->data.rows();
    entry.k = tensor->data.cols();
    entry.stable_rank_value = kNan;  // fixed plans never read the weights
    const std::size_t cap = std::min(entry.d, entry.k);
    entry.clamped = r > cap;
    entry.assigned_rank = std::min(r, cap);
    plan.entries.emplace(key, entry);
  }
  finalize_totals(plan, bundle);
  return plan;
}

BudgetReport budget_report(const RankPlan& plan, long long backbone_total,
                           long long head_total) {
  if (backbone_total <= 0) {
    throw Error(ErrorCode::ConfigError,
                "budget_report: backbone_total must be > 0");
  }
  BudgetReport report;
  report.backbone_total = backbone_total;
  report.head_total = head_total;
  std::map<int, long long> per_layer;
  for (const auto& [key, entry] : plan.entries) {
    const long long params =
        trainable_params(entry.d, entry.k, entry.assigned_rank);
    report.total_trainable += params;
    per_layer[key.layer] += params;
    if (entry.clamped) report.clamped.push_back(key);
  }
  report.per_layer.assign(per_layer.begin(), per_layer.end());
  report.trainable_ratio = static_cast<double>(report.total_trainable) /
                           static_cast<double>(backbone_total);
  report.trainable_ratio_with_head =
      static_cast<double>(report.total_trainable + head_total) /
      static_cast<double>(backbone_total + head_total);
  return report;
}

bool verify_lower_bound(const RankPlan& plan, const WeightBundle& bundle) {
  for (const auto& [key, entry] : plan.entries) {
    const TensorEntry* tensor = bundle.find(key.layer, role_name(key.role));
    if (tensor == nullptr) {
      throw Error(ErrorCode::MissingWeight,
                  weight_key_name(key) + " absent from bundle");
    }
    const double srank = std::isnan(entry.stable_rank_value)
                             ? stable_rank(tensor->data)
                             : entry.stable_rank_value;
    const double numerical_rank =
        static_cast<double>(effective_rank(tensor->data, 1e-12));
    if (srank > numerical_rank + 1e-9) return false;
  }
  return true;
}

nlohmann::json plan_to_json(const RankPlan& plan) {
  nlohmann::json doc;
  doc["strategy"] = plan.strategy;
  doc["rounding"] = rounding_name(plan.rounding);
  doc["backbone_total"] = plan.backbone_total;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [key, entry] : plan.entries) {
    nlohmann::json je;
    je["layer"] = key.layer;
    je["role"] = role_name(key.role);
    je["d"] = entry.d;
    je["k"] = entry.k;
    je["stable_rank"] = std::isnan(entry.stable_rank_value)
                            ? nlohmann::json(nullptr)
                            : nlohmann::json(entry.stable_rank_value);
    je["rank"] = entry.assigned_rank;
    entries.push_back(std::move(je));
  }
  doc["entries"] = std::move(entries);
  doc["total_trainable"] = plan.total_trainable;
  doc["trainable_ratio"] = plan.trainable_ratio;
  return doc;
}

RankPlan plan_from_json(const nlohmann::json& doc) {
  RankPlan plan;
  try {
    plan.strategy = doc.at("strategy").get<std::string>();
    const auto rounding = rounding_from_name(doc.at("rounding"));
    if (!rounding) {
      throw Error(ErrorCode::ConfigError, "plan: unknown rounding");
    }
    plan.rounding = *rounding;
    plan.backbone_total = doc.at("backbone_total").get<long long>();
    plan.total_trainable = doc.at("total_trainable").get<long long>();
    plan.trainable_ratio = doc.at("trainable_ratio").get<double>();
    if (plan.strategy.rfind("fixed:", 0) == 0) {
      plan.fixed_rank =
          static_cast<std::size_t>(std::stoul(plan.strategy.substr(6)));
    }
    for (const auto& je : doc.at("entries")) {
      WeightKey key;
      key.layer = je.at("layer").get<int>();
      const auto role = role_from_name(je.at("role").get<std::string>());
      if (!role) {
        throw Error(ErrorCode::ConfigError, "plan: unknown role");
      }
      key.role = *role;
      RankPlanEntry entry;
      entry.d = je.at("d").get<std::size_t>();
      entry.k = je.at("k").get<std::size_t>();
      entry.stable_rank_value =
          je.at("stable_rank").is_null() ? kNan
                                         : je.at("stable_rank").get<double>();
      entry.assigned_rank = je.at("rank").get<std::size_t>();
      plan.entries.emplace(key, entry);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("plan: ") + e.what());
  }
  return plan;
}

}  // namespace srlora
