#pragma once

#include <compare>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "srlora/bundle.hpp"

namespace srlora {

// Only the attention query/value/output projections receive adapters; key
// and MLP weights stay frozen and the planner ignores them.
enum class Role { query = 0, value = 1, output = 2 };

const char* role_name(Role role);
std::optional<Role> role_from_name(const std::string& name);

struct WeightKey {
  int layer = 0;  // 1-based
  Role role = Role::query;

  auto operator<=>(const WeightKey&) const = default;
};

std::string weight_key_name(const WeightKey& key);

enum class Rounding { ceil, floor, nearest };

const char* rounding_name(Rounding rounding);
std::optional<Rounding> rounding_from_name(const std::string& name);

struct RankPlanEntry {
  // NaN for fixed-rank plans, which never touch the weights.
  double stable_rank_value = 0.0;
  std::size_t assigned_rank = 0;
  std::size_t d = 0;
  std::size_t k = 0;
  bool clamped = false;
};

struct RankPlan {
  std::map<WeightKey, RankPlanEntry> entries;
  Rounding rounding = Rounding::ceil;
  std::string strategy;  // "stable" or "fixed:R"
  std::size_t fixed_rank = 0;
  long long backbone_total = 0;
  long long total_trainable = 0;
  double trainable_ratio = 0.0;
};

// Per-entry rank = round(stable_rank(W)) clamped into [1, min(d, k)].
// Per-entry stable ranks are independent, so they are computed in parallel
// and assembled in key order.
RankPlan plan_stable(const WeightBundle& bundle,
                     Rounding rounding = Rounding::ceil);

// Unified rank for every adapted projection, clamped to min(d, k).
RankPlan plan_fixed(const WeightBundle& bundle, std::size_t r);

struct BudgetReport {
  long long backbone_total = 0;
  long long head_total = 0;
  long long total_trainable = 0;
  double trainable_ratio = 0.0;
  double trainable_ratio_with_head = 0.0;
  std::vector<std::pair<int, long long>> per_layer;  // layer -> trainable
  std::vector<WeightKey> clamped;
};

// head_total covers the task classifier, reported separately because budget
// conventions differ on whether to count it.
BudgetReport budget_report(const RankPlan& plan, long long backbone_total,
                           long long head_total = 0);

// True iff every entry's stable rank is at or below the numerical rank of
// its weight matrix (threshold 1e-12), within 1e-9.
bool verify_lower_bound(const RankPlan& plan, const WeightBundle& bundle);

nlohmann::json plan_to_json(const RankPlan& plan);
RankPlan plan_from_json(const nlohmann::json& doc);

}  // namespace srlora
