#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "studyrig/study.hpp"

namespace studyrig {

using Ordering = std::vector<std::string>;

// Condition orderings for a counterbalanced block of k >= 2 children.
//
// Even k: Williams design. Row 0 is c0, c1, c(k-1), c2, c(k-2), ...; row r
// adds r to every index mod k. Each condition sits in each position once and
// each ordered adjacent pair occurs exactly once.
// Odd k: cyclic Latin square, row r = c(r), c(r+1), ... . Carryover is only
// balanced across 2k participants for odd k.
//
// Throws validation_error for k < 2.
std::vector<Ordering> generate_order_rows(const std::vector<std::string>& children);

// Row cursor for one counterbalanced block.
struct OrderPlan {
  std::string block_id;
  std::vector<Ordering> rows;
  // rows[row_for_slot[i]] is used by the i-th arrival modulo rows.size().
  // Identity unless the study carries an assignment_seed.
  std::vector<std::size_t> row_for_slot;
  std::uint64_t next_row_index = 0;

  std::size_t k() const { return rows.size(); }
  // Row the next arrival receives, then advances the cursor.
  const Ordering& take();

  bool operator==(const OrderPlan&) const = default;
};

OrderPlan make_order_plan(const Block& block, std::optional<std::uint64_t> seed);

// One plan per counterbalanced block, in procedure order.
std::vector<OrderPlan> make_order_plans(const Study& study);

nlohmann::json to_json(const OrderPlan& plan);
OrderPlan order_plan_from_json(const nlohmann::json& j);

struct Assignment {
  std::string session_id;
  BlockOrders orders;
  std::uint64_t assignment_index = 0;

  bool operator==(const Assignment&) const = default;
};

nlohmann::json to_json(const Assignment& a);
Assignment assignment_from_json(const nlohmann::json& j);

// Takes the next row from every plan. `index` is the arrival index.
// Callers serialize access per study.
Assignment assign_from_plans(std::vector<OrderPlan>& plans, std::string session_id,
                             std::uint64_t index);

// Stable between-subject routing: the same external id always lands on the
// same target. Throws validation_error on an empty target list.
std::string split_link(const std::vector<std::string>& target_study_ids,
                       std::string_view external_id);

}  // namespace studyrig
