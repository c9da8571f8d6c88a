#include "studyrig/connector.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "json_fields.hpp"
#include "studyrig/error.hpp"
#include "studyrig/http_transport.hpp"
#include "studyrig/ids.hpp"

namespace studyrig {

using nlohmann::json;
using namespace detail;

namespace {

constexpr std::size_t kSnippetChars = 160;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::toupper(static_cast<unsigned char>(s[i])) !=
        std::toupper(static_cast<unsigned char>(prefix[i]))) {
      return false;
    }
  }
  return true;
}

// Whitespace collapsed, cut at kSnippetChars code points.
std::string make_snippet(std::string_view body) {
  std::string collapsed;
  bool space = false;
  for (char c : body) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !collapsed.empty();
      continue;
    }
    if (space) collapsed.push_back(' ');
    space = false;
    collapsed.push_back(c);
  }
  std::size_t points = 0;
  for (std::size_t i = 0; i < collapsed.size(); ++i) {
    if ((static_cast<unsigned char>(collapsed[i]) & 0xC0) == 0x80) continue;
    if (points == kSnippetChars) return collapsed.substr(0, i) + "…";
    ++points;
  }
  return collapsed;
}

ResponseKind parse_response_kind(const std::string& s, const std::string& path) {
  if (s == "results") return ResponseKind::results;
  if (s == "answer") return ResponseKind::answer;
  if (s == "agent_trace") return ResponseKind::agent_trace;
  throw errors::malformed(path + ": unknown response kind '" + s + "'");
}

std::vector<Turn> turns_from_json(const json& arr, const std::string& path) {
  std::vector<Turn> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string p = index_path(path, i);
    require_object(arr[i], p);
    Turn t{req_string(arr[i], "role", p), string_or(arr[i], "text", p, "")};
    if (t.role != "participant" && t.role != "system") {
      throw errors::malformed(field_path(p, "role") + ": expected participant or system");
    }
    out.push_back(std::move(t));
  }
  return out;
}

AgentStep step_from_json(const json& j, const std::string& path) {
  require_object(j, path);
  AgentStep s;
  const auto index = opt_int(j, "step_index", path);
  if (!index) throw errors::malformed(field_path(path, "step_index") + ": required");
  s.step_index = static_cast<int>(*index);
  s.thought = string_or(j, "thought", path, "");
  s.observation = string_or(j, "observation", path, "");
  const json* action = find_field(j, "action");
  const std::string apath = field_path(path, "action");
  if (action == nullptr) throw errors::malformed(apath + ": required");
  require_object(*action, apath);
  const std::string type = req_string(*action, "type", apath);
  if (type == "tool_call") {
    s.action = ToolCall{req_string(*action, "tool", apath), string_or(*action, "input", apath, "")};
  } else if (type == "finalize") {
    s.action = Finalize{};
  } else {
    throw errors::malformed(field_path(apath, "type") + ": expected tool_call or finalize");
  }
  return s;
}

Error as_connector_error(const Error& e, json extra = json::object()) {
  if (e.code() == "connector_error") {
    json merged = e.extra().is_object() ? e.extra() : json::object();
    merged.update(extra);
    return Error("connector_error", e.detail(), 502, merged);
  }
  if (e.extra().is_object()) extra.update(e.extra());
  return Error("connector_error", e.code() + ": " + e.detail(), 502, extra);
}

json trace_json(const std::vector<AgentStep>& steps) {
  json arr = json::array();
  for (const auto& s : steps) arr.push_back(to_json(s));
  return arr;
}

PromptVars base_vars(const InteractionRequest& request, const ConnectorContext& ctx) {
  return {{"task", ctx.task_briefing},
          {"query", request.text},
          {"history", format_history(request.history)},
          {"date", to_date_string(ctx.now)}};
}

ChatOptions chat_options(const BackendConfig& config) {
  return ChatOptions{config.model.value_or(""), config.temperature};
}

ChatModel& require_model(const ConnectorContext& ctx) {
  if (ctx.model == nullptr) {
    throw Error("connector_error", "no chat model configured for backend '" +
                                       ctx.config.backend_id + "'",
                502);
  }
  return *ctx.model;
}

InteractionResponse mock_echo(const InteractionRequest& request, const ConnectorContext&) {
  InteractionResponse r;
  r.request_id = request.request_id;
  r.kind = ResponseKind::answer;
  r.answer_text = "echo: " + request.text;
  return r;
}

InteractionResponse keyword_search(const InteractionRequest& request,
                                   const ConnectorContext& ctx) {
  InteractionResponse r;
  r.request_id = request.request_id;
  r.kind = ResponseKind::results;
  json doc_ids = json::array();
  if (ctx.corpus != nullptr) {
    for (auto& hit : search_corpus(*ctx.corpus, request.text,
                                   static_cast<std::size_t>(ctx.config.retrieval_top_k))) {
      doc_ids.push_back(hit.doc_id);
      r.items.push_back(std::move(hit.item));
    }
  }
  r.upstream_meta = json{{"doc_ids", doc_ids}};
  return r;
}

const std::vector<RequestKind> kAllRequestKinds = {RequestKind::query, RequestKind::message,
                                                   RequestKind::follow_up};

}  // namespace

// --- Corpus -------------------------------------------------------------------

json documents_to_json(const Corpus& c) {
  json arr = json::array();
  for (const auto& d : c.documents) {
    arr.push_back({{"doc_id", d.doc_id}, {"title", d.title}, {"body", d.body}, {"url", d.url}});
  }
  return arr;
}

Corpus corpus_from_json(const json& j, std::string corpus_id) {
  const json* docs = &j;
  if (j.is_object()) {
    if (auto id = opt_string(j, "corpus_id", "")) corpus_id = *id;
    docs = &req_array(j, "documents", "");
  } else if (!j.is_array()) {
    throw errors::malformed("corpus: expected a list of documents");
  }
  if (corpus_id.empty()) throw errors::validation("corpus_id must not be empty");
  Corpus c{std::move(corpus_id), {}};
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < docs->size(); ++i) {
    const std::string p = index_path("documents", i);
    const json& d = (*docs)[i];
    require_object(d, p);
    Document doc{req_string(d, "doc_id", p), string_or(d, "title", p, ""),
                 string_or(d, "body", p, ""), string_or(d, "url", p, "")};
    if (!seen.insert(doc.doc_id).second) {
      throw errors::validation("duplicate doc_id '" + doc.doc_id + "'");
    }
    c.documents.push_back(std::move(doc));
  }
  return c;
}

// --- Envelope -----------------------------------------------------------------

std::string_view to_string(RequestKind k) {
  switch (k) {
    case RequestKind::query: return "query";
    case RequestKind::message: return "message";
    case RequestKind::follow_up: return "follow_up";
  }
  return "query";
}

std::string_view to_string(ResponseKind k) {
  switch (k) {
    case ResponseKind::results: return "results";
    case ResponseKind::answer: return "answer";
    case ResponseKind::agent_trace: return "agent_trace";
  }
  return "answer";
}

RequestKind parse_request_kind(std::string_view s) {
  if (s == "query") return RequestKind::query;
  if (s == "message") return RequestKind::message;
  if (s == "follow_up") return RequestKind::follow_up;
  throw errors::malformed("kind: unknown request kind '" + std::string(s) + "'");
}

json to_json(const InteractionRequest& r) {
  json history = json::array();
  for (const auto& t : r.history) history.push_back({{"role", t.role}, {"text", t.text}});
  return json{{"envelope_version", kEnvelopeVersion},
              {"request_id", r.request_id},
              {"session_id", r.session_id},
              {"element_id", r.element_id},
              {"backend_id", r.backend_id},
              {"kind", to_string(r.kind)},
              {"text", r.text},
              {"history", history},
              {"issued_at", to_iso8601(r.issued_at)}};
}

json to_json(const AgentStep& s) {
  json action = std::holds_alternative<ToolCall>(s.action)
                    ? json{{"type", "tool_call"},
                           {"tool", std::get<ToolCall>(s.action).tool},
                           {"input", std::get<ToolCall>(s.action).input}}
                    : json{{"type", "finalize"}};
  return json{{"step_index", s.step_index},
              {"thought", s.thought},
              {"action", action},
              {"observation", s.observation}};
}

json to_json(const InteractionResponse& r) {
  json items = json::array();
  for (const auto& it : r.items) {
    items.push_back({{"title", it.title}, {"snippet", it.snippet}, {"url", it.url}});
  }
  return json{{"envelope_version", kEnvelopeVersion},
              {"request_id", r.request_id},
              {"kind", to_string(r.kind)},
              {"items", items},
              {"answer_text", r.answer_text},
              {"trace", trace_json(r.trace)},
              {"latency_ms", r.latency_ms},
              {"upstream_meta", r.upstream_meta}};
}

InteractionRequest request_from_json(const json& j) {
  require_object(j, "");
  if (auto v = opt_int(j, "envelope_version", ""); v && *v != kEnvelopeVersion) {
    throw errors::malformed("envelope_version: unsupported version " + std::to_string(*v));
  }
  InteractionRequest r;
  r.request_id = req_string(j, "request_id", "");
  r.session_id = string_or(j, "session_id", "", "");
  r.element_id = string_or(j, "element_id", "", "");
  r.backend_id = string_or(j, "backend_id", "", "");
  r.kind = parse_request_kind(req_string(j, "kind", ""));
  r.text = string_or(j, "text", "", "");
  r.history = turns_from_json(array_or_empty(j, "history", ""), "history");
  if (auto ts = opt_string(j, "issued_at", "")) {
    auto t = parse_iso8601(*ts);
    if (!t) throw errors::malformed("issued_at: expected ISO-8601 UTC timestamp");
    r.issued_at = *t;
  }
  if (r.kind == RequestKind::follow_up && r.history.empty()) {
    throw errors::malformed("history: follow_up requires prior turns");
  }
  return r;
}

InteractionResponse response_from_json(const json& j) {
  require_object(j, "");
  if (auto v = opt_int(j, "envelope_version", ""); v && *v != kEnvelopeVersion) {
    throw errors::malformed("envelope_version: unsupported version " + std::to_string(*v));
  }
  InteractionResponse r;
  r.request_id = req_string(j, "request_id", "");
  r.kind = parse_response_kind(req_string(j, "kind", ""), "kind");
  const json& items = array_or_empty(j, "items", "");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string p = index_path("items", i);
    require_object(items[i], p);
    r.items.push_back({string_or(items[i], "title", p, ""), string_or(items[i], "snippet", p, ""),
                       string_or(items[i], "url", p, "")});
  }
  r.answer_text = string_or(j, "answer_text", "", "");
  const json& trace = array_or_empty(j, "trace", "");
  for (std::size_t i = 0; i < trace.size(); ++i) {
    r.trace.push_back(step_from_json(trace[i], index_path("trace", i)));
  }
  r.latency_ms = opt_int(j, "latency_ms", "").value_or(0);
  if (const json* meta = find_field(j, "upstream_meta")) {
    require_object(*meta, "upstream_meta");
    r.upstream_meta = *meta;
  }
  if (r.kind == ResponseKind::agent_trace) {
    if (r.trace.empty()) throw errors::malformed("trace: agent_trace needs at least one step");
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
      if (i > 0 && r.trace[i].step_index <= r.trace[i - 1].step_index) {
        throw errors::malformed(index_path("trace", i) + ".step_index: must increase");
      }
      if (std::holds_alternative<Finalize>(r.trace[i].action) && i + 1 != r.trace.size()) {
        throw errors::malformed(index_path("trace", i) + ".action: finalize must be last");
      }
    }
  }
  return r;
}

// --- Keyword search -----------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (uc < 0x80 && std::isalnum(uc)) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<SearchHit> search_corpus(const Corpus& corpus, std::string_view query,
                                     std::size_t top_k) {
  if (top_k == 0) throw errors::validation("top_k must be >= 1");
  std::vector<std::string> terms = tokenize(query);
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
  if (terms.empty() || corpus.documents.empty()) return {};

  std::vector<std::unordered_map<std::string, int>> tf(corpus.documents.size());
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    const auto& d = corpus.documents[i];
    for (auto& tok : tokenize(d.title + " " + d.body)) ++tf[i][tok];
  }
  const double n = static_cast<double>(corpus.documents.size());
  std::vector<SearchHit> hits;
  std::vector<double> idf(terms.size(), 0.0);
  for (std::size_t t = 0; t < terms.size(); ++t) {
    std::size_t df = 0;
    for (const auto& counts : tf) df += counts.count(terms[t]);
    if (df > 0) idf[t] = std::log(1.0 + n / static_cast<double>(df));
  }
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    double score = 0.0;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      auto it = tf[i].find(terms[t]);
      if (it != tf[i].end()) score += it->second * idf[t];
    }
    if (score > 0.0) {
      const auto& d = corpus.documents[i];
      hits.push_back({d.doc_id, score, {d.title, make_snippet(d.body), d.url}});
    }
  }
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
  });
  if (hits.size() > top_k) hits.resize(top_k);
  return hits;
}

// --- Prompts ------------------------------------------------------------------

std::string render_prompt(std::string_view tmpl, const PromptVars& vars) {
  std::string out;
  std::vector<std::string> missing;
  std::size_t pos = 0;
  while (true) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    const auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) {
      throw Error("template_error", "unterminated placeholder at offset " + std::to_string(open),
                  422);
    }
    out.append(tmpl.substr(pos, open - pos));
    const std::string name = trim(tmpl.substr(open + 2, close - open - 2));
    if (auto it = vars.find(name); it != vars.end()) {
      out.append(it->second);
    } else if (std::find(missing.begin(), missing.end(), name) == missing.end()) {
      missing.push_back(name);
    }
    pos = close + 2;
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw Error("template_error", "missing: " + list, 422, json{{"missing", missing}});
  }
  return out;
}

std::string format_retrieved(const std::vector<SearchHit>& hits) {
  std::string out;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (i > 0) out.push_back('\n');
    out += std::to_string(i + 1) + ". " + hits[i].item.title + " — " + hits[i].item.snippet;
  }
  return out;
}

std::string format_history(const std::vector<Turn>& history) {
  std::string out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (i > 0) out.push_back('\n');
    out += history[i].role + ": " + history[i].text;
  }
  return out;
}

// --- Chat models --------------------------------------------------------------

HttpChatModel::HttpChatModel(std::string endpoint_url, std::optional<std::string> api_key,
                             std::chrono::milliseconds timeout)
    : endpoint_url_(std::move(endpoint_url)), api_key_(std::move(api_key)), timeout_(timeout) {}

ChatReply HttpChatModel::complete(const std::vector<ChatMessage>& messages,
                                  const ChatOptions& options) {
  json body{{"temperature", options.temperature}, {"messages", json::array()}};
  if (!options.model.empty()) body["model"] = options.model;
  for (const auto& m : messages) {
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  }
  Headers headers;
  if (api_key_) headers.emplace_back("Authorization", "Bearer " + *api_key_);
  const HttpResult res = http_post(endpoint_url_, body.dump(), headers, timeout_);
  if (res.status != 200) {
    throw Error("connector_error", "upstream returned HTTP " + std::to_string(res.status), 502,
                json{{"upstream_status", res.status}});
  }
  const json parsed = json::parse(res.body, nullptr, false);
  if (parsed.is_discarded() || !parsed.contains("choices") || !parsed["choices"].is_array() ||
      parsed["choices"].empty()) {
    throw Error("connector_error", "malformed chat completion response", 502);
  }
  const json& msg = parsed["choices"][0].value("message", json::object());
  if (!msg.contains("content") || !msg["content"].is_string()) {
    throw Error("connector_error", "choices[0].message.content missing", 502);
  }
  ChatReply reply{msg["content"].get<std::string>(), json::object()};
  if (parsed.contains("usage")) reply.meta["usage"] = parsed["usage"];
  if (parsed.contains("model")) reply.meta["model"] = parsed["model"];
  return reply;
}

ChatReply OfflineChatModel::complete(const std::vector<ChatMessage>& messages,
                                     const ChatOptions&) {
  const bool agent = !messages.empty() && messages.front().role == "system" &&
                     messages.front().content.find("ACTION:") != std::string::npos;
  std::size_t observations = 0;
  std::string question;
  for (const auto& m : messages) {
    if (m.role != "user") continue;
    if (starts_with_ci(m.content, "OBSERVATION:")) {
      ++observations;
    } else if (question.empty()) {
      question = m.content;
    }
  }
  ChatReply reply;
  reply.meta = json{{"offline", true}};
  if (!agent) {
    const std::string& prompt = messages.empty() ? question : messages.back().content;
    reply.content = "Offline answer (" + std::to_string(utf8_length(prompt)) + " prompt chars).";
    return reply;
  }
  const bool forced = starts_with_ci(messages.back().content, "Step limit reached");
  if (observations == 0 && !forced) {
    reply.content = "```\nTHOUGHT: I should search first.\nACTION: search\nINPUT: " + question +
                    "\n```";
  } else {
    reply.content = "```\nTHOUGHT: I have enough information.\nACTION: finalize\nINPUT: Offline "
                    "answer after " +
                    std::to_string(observations) + " search(es).\n```";
  }
  return reply;
}

// --- Agent protocol -----------------------------------------------------------

std::optional<AgentAction> parse_agent_action(std::string_view text) {
  const auto open = text.find("```");
  if (open == std::string_view::npos) return std::nullopt;
  auto body_start = text.find('\n', open + 3);
  if (body_start == std::string_view::npos) return std::nullopt;
  const auto close = text.find("```", body_start);
  if (close == std::string_view::npos) return std::nullopt;
  const std::string_view block = text.substr(body_start + 1, close - body_start - 1);

  AgentAction action;
  std::optional<std::string> kind;
  std::optional<std::string> input;
  std::size_t line_start = 0;
  while (line_start <= block.size()) {
    auto line_end = block.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = block.size();
    const std::string_view line = block.substr(line_start, line_end - line_start);
    if (starts_with_ci(line, "THOUGHT:")) {
      action.thought = trim(line.substr(8));
    } else if (starts_with_ci(line, "ACTION:")) {
      kind = trim(line.substr(7));
    } else if (starts_with_ci(line, "INPUT:")) {
      // INPUT runs to the end of the block.
      input = trim(block.substr(line_start + 6));
      break;
    }
    line_start = line_end + 1;
  }
  if (!kind || !input) return std::nullopt;
  std::string lowered = *kind;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lowered == "search") {
    action.kind = AgentAction::Kind::search;
  } else if (lowered == "finalize") {
    action.kind = AgentAction::Kind::finalize;
  } else {
    return std::nullopt;
  }
  if (input->empty()) return std::nullopt;
  action.input = *input;
  if (action.thought.empty()) action.thought = trim(text.substr(0, open));
  return action;
}

std::string agent_protocol_instructions() {
  return "Reply with exactly one fenced block in this format:\n"
         "```\n"
         "THOUGHT: <your reasoning>\n"
         "ACTION: search | finalize\n"
         "INPUT: <search query, or your final answer>\n"
         "```\n"
         "Use search to query the document collection; the result comes back as an "
         "OBSERVATION. Use finalize once you can answer.";
}

// --- Connectors ---------------------------------------------------------------

json to_json(const ConnectorDescriptor& d) {
  json kinds = json::array();
  for (auto k : d.request_kinds) kinds.push_back(to_string(k));
  return json{{"kind", d.kind},
              {"request_kinds", kinds},
              {"required_fields", d.required_fields},
              {"capabilities", {{"streaming", d.streaming}, {"tools", d.tools}}}};
}

InteractionResponse run_rag(const InteractionRequest& request, const ConnectorContext& ctx) {
  const auto& config = ctx.config;
  PromptVars vars = base_vars(request, ctx);
  json doc_ids = json::array();
  if (ctx.corpus != nullptr) {
    const auto hits = search_corpus(*ctx.corpus, request.text,
                                    static_cast<std::size_t>(config.retrieval_top_k));
    for (const auto& h : hits) doc_ids.push_back(h.doc_id);
    vars["retrieved"] = format_retrieved(hits);
  }
  const std::string tmpl = config.prompt_template.value_or(
      ctx.corpus != nullptr ? "Context:\n{{retrieved}}\n\nQuestion: {{query}}" : "{{query}}");
  const std::string prompt = render_prompt(tmpl, vars);
  const ChatReply reply = require_model(ctx).complete({{"user", prompt}}, chat_options(config));

  InteractionResponse r;
  r.request_id = request.request_id;
  r.kind = ResponseKind::answer;
  r.answer_text = reply.content;
  r.upstream_meta = json{{"retrieved_doc_ids", doc_ids}, {"model", reply.meta}};
  return r;
}

InteractionResponse run_agent(const InteractionRequest& request, const ConnectorContext& ctx) {
  const auto& config = ctx.config;
  if (config.max_steps < 1) throw errors::validation("max_steps must be >= 1");
  ChatModel& model = require_model(ctx);
  const ChatOptions options = chat_options(config);

  std::string system = config.prompt_template
                           ? render_prompt(*config.prompt_template, base_vars(request, ctx))
                           : "You are a research assistant with access to a search tool.";
  std::vector<ChatMessage> messages{{"system", system + "\n\n" + agent_protocol_instructions()}};
  for (const auto& t : request.history) {
    messages.push_back({t.role == "participant" ? "user" : "assistant", t.text});
  }
  messages.push_back({"user", request.text});

  std::vector<AgentStep> steps;
  int tool_calls = 0;
  int malformed_streak = 0;
  std::int64_t proposals = 0;

  auto call = [&]() -> ChatReply {
    try {
      return model.complete(messages, options);
    } catch (const Error& e) {
      throw as_connector_error(e, json{{"partial_trace", trace_json(steps)}});
    }
  };

  while (proposals < config.max_steps) {
    const ChatReply reply = call();
    const auto action = parse_agent_action(reply.content);
    messages.push_back({"assistant", reply.content});
    if (!action) {
      if (++malformed_streak == 2) {
        throw Error("connector_error", "malformed_action", 502,
                    json{{"partial_trace", trace_json(steps)}, {"last_output", reply.content}});
      }
      messages.push_back({"user", "Your reply did not contain a valid action block. " +
                                      agent_protocol_instructions()});
      continue;
    }
    malformed_streak = 0;
    ++proposals;
    AgentStep step;
    step.step_index = static_cast<int>(steps.size()) + 1;
    step.thought = action->thought;
    if (action->kind == AgentAction::Kind::finalize) {
      step.action = Finalize{};
      steps.push_back(std::move(step));
      InteractionResponse r;
      r.request_id = request.request_id;
      r.kind = ResponseKind::agent_trace;
      r.answer_text = action->input;
      r.trace = std::move(steps);
      r.upstream_meta = json{{"tool_calls", tool_calls}, {"forced_final", false}};
      return r;
    }
    std::vector<SearchHit> hits;
    if (ctx.corpus != nullptr) {
      hits = search_corpus(*ctx.corpus, action->input,
                           static_cast<std::size_t>(config.retrieval_top_k));
    }
    ++tool_calls;
    step.action = ToolCall{"search", action->input};
    step.observation = hits.empty() ? "No results." : format_retrieved(hits);
    messages.push_back({"user", "OBSERVATION:\n" + step.observation});
    steps.push_back(std::move(step));
  }

  messages.push_back({"user",
                      "Step limit reached. Answer now from what you have, using ACTION: "
                      "finalize."});
  const ChatReply reply = call();
  const auto action = parse_agent_action(reply.content);
  AgentStep final_step;
  final_step.step_index = static_cast<int>(steps.size()) + 1;
  final_step.action = Finalize{};
  std::string answer = trim(reply.content);
  if (action && action->kind == AgentAction::Kind::finalize) {
    final_step.thought = action->thought;
    answer = action->input;
  }
  steps.push_back(std::move(final_step));

  InteractionResponse r;
  r.request_id = request.request_id;
  r.kind = ResponseKind::agent_trace;
  r.answer_text = std::move(answer);
  r.trace = std::move(steps);
  r.upstream_meta = json{{"tool_calls", tool_calls}, {"forced_final", true}};
  return r;
}

InteractionResponse forward_local(const InteractionRequest& request, const ConnectorContext& ctx,
                                  std::chrono::milliseconds timeout) {
  const auto& config = ctx.config;
  if (!config.endpoint_url || config.endpoint_url->empty()) {
    throw Error("connector_error", "local_http backend has no endpoint_url", 502);
  }
  Headers headers;
  if (config.credential_ref && ctx.resolve_secret) {
    if (auto secret = ctx.resolve_secret(*config.credential_ref)) {
      headers.emplace_back("Authorization", "Bearer " + *secret);
    }
  }
  const HttpResult res = http_post(*config.endpoint_url, to_json(request).dump(), headers, timeout);
  if (res.status != 200) {
    throw Error("connector_error", "upstream returned HTTP " + std::to_string(res.status), 502,
                json{{"upstream_status", res.status}});
  }
  const json parsed = json::parse(res.body, nullptr, false);
  if (parsed.is_discarded()) {
    throw Error("connector_error", "malformed upstream envelope: body is not JSON", 502);
  }
  InteractionResponse r;
  try {
    r = response_from_json(parsed);
  } catch (const Error& e) {
    throw Error("connector_error", "malformed upstream envelope: " + e.detail(), 502,
                json{{"diagnostic", e.detail()}});
  }
  if (r.request_id != request.request_id) {
    throw Error("connector_error", "malformed upstream envelope: request_id: mismatch", 502,
                json{{"diagnostic", "request_id: mismatch"}});
  }
  return r;
}

ConnectorRegistry::ConnectorRegistry() {
  using namespace std::string_literals;
  register_connector({std::string(connector_kinds::mock_echo), kAllRequestKinds, {}, false, {}},
                     mock_echo);
  register_connector(
      {std::string(connector_kinds::keyword_search), kAllRequestKinds, {}, false, {}},
      keyword_search);
  register_connector({std::string(connector_kinds::chat_completion), kAllRequestKinds,
                      {}, false, {"search"s}},
                     [](const InteractionRequest& req, const ConnectorContext& ctx) {
                       return ctx.config.agentic_mode ? run_agent(req, ctx) : run_rag(req, ctx);
                     });
  register_connector({std::string(connector_kinds::agentic_loop), kAllRequestKinds, {}, false,
                      {"search"s}},
                     run_agent);
  register_connector({std::string(connector_kinds::local_http), kAllRequestKinds,
                      {"endpoint_url"s}, false, {}},
                     [](const InteractionRequest& req, const ConnectorContext& ctx) {
                       return forward_local(req, ctx);
                     });
}

void ConnectorRegistry::register_connector(ConnectorDescriptor descriptor,
                                           ConnectorHandler handler) {
  if (descriptor.kind.empty()) throw errors::validation("connector kind name must not be empty");
  if (!handler) throw errors::validation("connector handler must be callable");
  std::lock_guard lock(mutex_);
  if (entries_.count(descriptor.kind) != 0) {
    throw errors::conflict("duplicate_connector",
                           "connector kind '" + descriptor.kind + "' already registered");
  }
  auto key = descriptor.kind;
  entries_.emplace(std::move(key), std::make_shared<const Entry>(
                                       Entry{std::move(descriptor), std::move(handler)}));
}

std::optional<ConnectorDescriptor> ConnectorRegistry::descriptor(std::string_view kind) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(kind);
  if (it == entries_.end()) return std::nullopt;
  return it->second->descriptor;
}

std::set<std::string> ConnectorRegistry::kinds() const {
  std::lock_guard lock(mutex_);
  std::set<std::string> out;
  for (const auto& [k, _] : entries_) out.insert(k);
  return out;
}

InteractionResponse ConnectorRegistry::route(const InteractionRequest& request,
                                             const ConnectorContext& ctx) const {
  std::shared_ptr<const Entry> entry;
  {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(ctx.config.connector_kind);
    if (it != entries_.end()) entry = it->second;
  }
  if (!entry) {
    throw Error("unknown_connector", "no connector registered for kind '" +
                                         ctx.config.connector_kind + "'",
                422);
  }
  const auto& kinds = entry->descriptor.request_kinds;
  if (std::find(kinds.begin(), kinds.end(), request.kind) == kinds.end()) {
    throw Error("unsupported_kind", "connector '" + entry->descriptor.kind +
                                        "' does not accept " + std::string(to_string(request.kind)),
                422);
  }
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&start] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - start)
        .count();
  };
  InteractionResponse response;
  try {
    response = entry->handler(request, ctx);
  } catch (const Error& e) {
    throw as_connector_error(e, json{{"latency_ms", elapsed()}});
  } catch (const std::exception& e) {
    throw Error("connector_error", e.what(), 502, json{{"latency_ms", elapsed()}});
  }
  if (response.request_id.empty()) response.request_id = request.request_id;
  if (response.request_id != request.request_id) {
    throw Error("connector_error", "connector returned a mismatched request_id", 502);
  }
  response.latency_ms = elapsed();
  return response;
}

}  // namespace studyrig
