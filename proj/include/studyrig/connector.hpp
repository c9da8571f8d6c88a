#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "studyrig/clock.hpp"
#include "studyrig/study.hpp"

namespace studyrig {

inline constexpr int kEnvelopeVersion = 1;

// --- Corpus ------------------------------------------------------------------

struct Document {
  std::string doc_id;
  std::string title;
  std::string body;
  std::string url;

  bool operator==(const Document&) const = default;
};

struct Corpus {
  std::string corpus_id;
  std::vector<Document> documents;

  bool operator==(const Corpus&) const = default;
};

// Documents only, as the uploaded corpus file format: [{doc_id,title,body,url}].
nlohmann::json documents_to_json(const Corpus& c);
// Accepts the bare document list or {"corpus_id", "documents"}. Throws
// validation_error on duplicate doc ids.
Corpus corpus_from_json(const nlohmann::json& j, std::string corpus_id);

// --- Envelope ---------------------------------------------------------------

enum class RequestKind { query, message, follow_up };
enum class ResponseKind { results, answer, agent_trace };

std::string_view to_string(RequestKind k);
std::string_view to_string(ResponseKind k);
RequestKind parse_request_kind(std::string_view s);

struct Turn {
  std::string role;  // participant | system
  std::string text;

  bool operator==(const Turn&) const = default;
};

struct InteractionRequest {
  std::string request_id;
  std::string session_id;
  std::string element_id;
  std::string backend_id;
  RequestKind kind = RequestKind::query;
  std::string text;
  std::vector<Turn> history;
  TimePoint issued_at{};

  bool operator==(const InteractionRequest&) const = default;
};

struct ResultItem {
  std::string title;
  std::string snippet;
  std::string url;

  bool operator==(const ResultItem&) const = default;
};

struct ToolCall {
  std::string tool;
  std::string input;

  bool operator==(const ToolCall&) const = default;
};

struct Finalize {
  bool operator==(const Finalize&) const = default;
};

struct AgentStep {
  int step_index = 0;
  std::string thought;
  std::variant<ToolCall, Finalize> action;
  std::string observation;

  bool operator==(const AgentStep&) const = default;
};

struct InteractionResponse {
  std::string request_id;
  ResponseKind kind = ResponseKind::answer;
  std::vector<ResultItem> items;    // results
  std::string answer_text;          // answer, agent_trace
  std::vector<AgentStep> trace;     // agent_trace
  std::int64_t latency_ms = 0;
  nlohmann::json upstream_meta = nlohmann::json::object();

  bool operator==(const InteractionResponse&) const = default;
};

// Wire envelope (snake_case keys, envelope_version: 1).
nlohmann::json to_json(const InteractionRequest& r);
nlohmann::json to_json(const InteractionResponse& r);
nlohmann::json to_json(const AgentStep& s);
// Both throw malformed_body with field-level diagnostics.
InteractionRequest request_from_json(const nlohmann::json& j);
InteractionResponse response_from_json(const nlohmann::json& j);

// --- Keyword search ---------------------------------------------------------

struct SearchHit {
  std::string doc_id;
  double score = 0.0;
  ResultItem item;
};

// Lowercased ASCII alphanumeric runs; every other byte separates tokens.
std::vector<std::string> tokenize(std::string_view text);

// tf-idf ranking: score(d) = sum over distinct query terms of
// tf(term, d) * ln(1 + N / df(term)). Title and body are both indexed.
// Zero-score documents are dropped; ties go to the smaller doc_id.
std::vector<SearchHit> search_corpus(const Corpus& corpus, std::string_view query,
                                     std::size_t top_k);

// --- Prompts ----------------------------------------------------------------

using PromptVars = std::map<std::string, std::string>;

// Replaces every {{name}} with vars[name]. Throws Error("template_error")
// listing all missing names, or on an unterminated placeholder.
std::string render_prompt(std::string_view tmpl, const PromptVars& vars);

// One numbered line per hit: "1. " + title + " \u2014 " + snippet.
std::string format_retrieved(const std::vector<SearchHit>& hits);
// "participant: text" / "system: text" lines.
std::string format_history(const std::vector<Turn>& history);

// --- Upstream chat model ----------------------------------------------------

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;
};

struct ChatOptions {
  std::string model;
  double temperature = 0.0;
};

struct ChatReply {
  std::string content;
  nlohmann::json meta = nlohmann::json::object();
};

class ChatModel {
 public:
  virtual ~ChatModel() = default;
  // Throws Error("connector_error") on upstream failure.
  virtual ChatReply complete(const std::vector<ChatMessage>& messages,
                             const ChatOptions& options) = 0;
};

// Speaks the common chat-completions HTTP schema: POST {model, messages,
// temperature}, reads choices[0].message.content.
class HttpChatModel final : public ChatModel {
 public:
  HttpChatModel(std::string endpoint_url, std::optional<std::string> api_key,
                std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ChatReply complete(const std::vector<ChatMessage>& messages,
                     const ChatOptions& options) override;

 private:
  std::string endpoint_url_;
  std::optional<std::string> api_key_;
  std::chrono::milliseconds timeout_;
};

// Deterministic stand-in used when the server runs without live models.
// Follows the agent action protocol when the system prompt asks for it.
class OfflineChatModel final : public ChatModel {
 public:
  ChatReply complete(const std::vector<ChatMessage>& messages,
                     const ChatOptions& options) override;
};

// --- Agent protocol ---------------------------------------------------------

struct AgentAction {
  enum class Kind { search, finalize };
  Kind kind = Kind::finalize;
  std::string thought;
  std::string input;
};

// Parses the first ``` fenced block carrying "ACTION: search|finalize" and
// "INPUT: ...". Returns nullopt when the block is missing or malformed.
std::optional<AgentAction> parse_agent_action(std::string_view model_output);

// Appended to every agent system prompt.
std::string agent_protocol_instructions();

// --- Connectors -------------------------------------------------------------

struct ConnectorContext {
  const BackendConfig& config;
  const Corpus* corpus = nullptr;    // resolved corpus_ref, may be null
  ChatModel* model = nullptr;        // chat-backed kinds only
  std::string task_briefing;
  TimePoint now{};
  std::function<std::optional<std::string>(std::string_view)> resolve_secret;
};

struct ConnectorDescriptor {
  std::string kind;
  std::vector<RequestKind> request_kinds;
  std::vector<std::string> required_fields;
  bool streaming = false;
  std::vector<std::string> tools;
};

nlohmann::json to_json(const ConnectorDescriptor& d);

using ConnectorHandler =
    std::function<InteractionResponse(const InteractionRequest&, const ConnectorContext&)>;

// Single-step retrieval-augmented generation.
InteractionResponse run_rag(const InteractionRequest& request, const ConnectorContext& ctx);

// Search/observe loop bounded by config.max_steps proposals, followed by a
// forced final call when the model never finalizes.
InteractionResponse run_agent(const InteractionRequest& request, const ConnectorContext& ctx);

// POSTs the request envelope to config.endpoint_url and parses the response
// envelope.
InteractionResponse forward_local(const InteractionRequest& request, const ConnectorContext& ctx,
                                  std::chrono::milliseconds timeout = std::chrono::seconds(30));

class ConnectorRegistry {
 public:
  ConnectorRegistry();  // pre-populated with the built-in kinds

  // Throws conflict("duplicate_connector") if the kind is taken.
  void register_connector(ConnectorDescriptor descriptor, ConnectorHandler handler);

  std::optional<ConnectorDescriptor> descriptor(std::string_view kind) const;
  std::set<std::string> kinds() const;

  // Dispatches on config.connector_kind and measures latency. Errors other
  // than unknown/unsupported kind are normalized to connector_error.
  InteractionResponse route(const InteractionRequest& request, const ConnectorContext& ctx) const;

 private:
  struct Entry {
    ConnectorDescriptor descriptor;
    ConnectorHandler handler;
  };
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const Entry>, std::less<>> entries_;
};

}  // namespace studyrig
