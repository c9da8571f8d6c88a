#include "studyrig/assignment.hpp"

#include <numeric>
#include <random>

#include "json_fields.hpp"
#include "studyrig/error.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

using nlohmann::json;

std::vector<Ordering> generate_order_rows(const std::vector<std::string>& children) {
  const std::size_t k = children.size();
  if (k < 2) throw errors::validation("counterbalancing needs at least 2 conditions");

  std::vector<std::size_t> first(k);
  if (k % 2 == 0) {
    // 0, 1, k-1, 2, k-2, ...
    std::size_t lo = 1;
    std::size_t hi = k - 1;
    first[0] = 0;
    for (std::size_t j = 1; j < k; ++j) first[j] = (j % 2 == 1) ? lo++ : hi--;
  } else {
    std::iota(first.begin(), first.end(), 0);
  }

  std::vector<Ordering> rows(k);
  for (std::size_t r = 0; r < k; ++r) {
    rows[r].reserve(k);
    for (std::size_t j = 0; j < k; ++j) rows[r].push_back(children[(first[j] + r) % k]);
  }
  return rows;
}

const Ordering& OrderPlan::take() {
  const std::size_t slot = static_cast<std::size_t>(next_row_index % rows.size());
  ++next_row_index;
  return rows[row_for_slot.empty() ? slot : row_for_slot[slot]];
}

OrderPlan make_order_plan(const Block& block, std::optional<std::uint64_t> seed) {
  OrderPlan plan;
  plan.block_id = block.id;
  plan.rows = generate_order_rows(block.children);
  plan.row_for_slot.resize(plan.rows.size());
  std::iota(plan.row_for_slot.begin(), plan.row_for_slot.end(), 0);
  if (seed) {
    // Explicit Fisher-Yates so the mapping does not depend on the standard
    // library's shuffle implementation.
    std::mt19937_64 rng(*seed ^ stable_hash64(block.id));
    for (std::size_t i = plan.row_for_slot.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(plan.row_for_slot[i], plan.row_for_slot[j]);
    }
  }
  return plan;
}

std::vector<OrderPlan> make_order_plans(const Study& study) {
  std::vector<OrderPlan> plans;
  for (const Block* b : counterbalanced_blocks(study)) {
    plans.push_back(make_order_plan(*b, study.assignment_seed));
  }
  return plans;
}

json to_json(const OrderPlan& plan) {
  return json{{"block_id", plan.block_id},
              {"rows", plan.rows},
              {"row_for_slot", plan.row_for_slot},
              {"next_row_index", plan.next_row_index}};
}

OrderPlan order_plan_from_json(const json& j) {
  OrderPlan plan;
  plan.block_id = j.at("block_id").get<std::string>();
  plan.rows = j.at("rows").get<std::vector<Ordering>>();
  plan.row_for_slot = j.at("row_for_slot").get<std::vector<std::size_t>>();
  plan.next_row_index = j.at("next_row_index").get<std::uint64_t>();
  return plan;
}

json to_json(const Assignment& a) {
  return json{{"session_id", a.session_id},
              {"orders", a.orders},
              {"assignment_index", a.assignment_index}};
}

Assignment assignment_from_json(const json& j) {
  Assignment a;
  a.session_id = j.at("session_id").get<std::string>();
  a.orders = j.at("orders").get<BlockOrders>();
  a.assignment_index = j.at("assignment_index").get<std::uint64_t>();
  return a;
}

Assignment assign_from_plans(std::vector<OrderPlan>& plans, std::string session_id,
                             std::uint64_t index) {
  Assignment a;
  a.session_id = std::move(session_id);
  a.assignment_index = index;
  for (auto& plan : plans) a.orders[plan.block_id] = plan.take();
  return a;
}

std::string split_link(const std::vector<std::string>& target_study_ids,
                       std::string_view external_id) {
  if (target_study_ids.empty()) throw errors::validation("split_link needs at least one target");
  const auto h = stable_hash64(external_id);
  return target_study_ids[static_cast<std::size_t>(h % target_study_ids.size())];
}

}  // namespace studyrig
