#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "muffin/checkpoint.hpp"
#include "muffin/decoder.hpp"
#include "muffin/errors.hpp"
#include "muffin/io.hpp"
#include "muffin/model.hpp"
#include "muffin/tensor.hpp"

// Two-stage training: caption pre-training with the LLM frozen, then
// instruction tuning with every group trainable. The stages also mirror the
// resolution bump (16 -> 32 at desk scale). Metrics logs are byte
// deterministic under a fixed seed; wall time lives in a separate summary.

namespace muffin::train {

enum class Stage { pretrain, instruct };

inline const char* stage_name(Stage s) {
  return s == Stage::pretrain ? "pretrain" : "instruct";
}

inline Stage stage_from_name(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "instruct") return Stage::instruct;
  throw ConfigError("unknown stage '" + s + "' (pretrain|instruct)");
}

// ---------------------------------------------------------------------------
// Parameter groups and freezing

struct ParamGroup {
  std::string name;  // bridge | projection | llm
  nn::NamedParams params;
  bool trainable = true;
};

/// Applies the stage freeze policy and returns the three named groups.
/// Pre-training freezes the LLM; instruction tuning trains everything.
inline std::vector<ParamGroup> stage_groups(model::Model& m, Stage stage) {
  const bool llm_trainable = stage == Stage::instruct;
  std::vector<ParamGroup> groups;
  groups.push_back({"bridge", m.bridge_params(), true});
  groups.push_back({"projection", m.projection_params(), true});
  groups.push_back({"llm", m.llm_params(), llm_trainable});
  for (auto& g : groups)
    for (auto& [name, t] : g.params) t.set_requires_grad(g.trainable);
  return groups;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Moment buffers and per-parameter step
/// counts persist across calls; absent gradients count as zero.
class AdamW {
 public:
  void update(ParamGroup& group, const AdamWConfig& cfg) {
    if (!group.trainable) return;
    for (auto& [name, t] : group.params) {
      if (!t.requires_grad()) continue;
      auto& state = states_[name];
      auto& values = t.mutable_data();
      if (state.m.empty()) {
        state.m.assign(values.size(), 0.0);
        state.v.assign(values.size(), 0.0);
      }
      state.t += 1;
      const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
      const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
      const double* g = nullptr;
      if (t.has_grad()) g = t.grad().data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double gi = g ? g[i] : 0.0;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        values[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        values[i] -= cfg.lr * cfg.weight_decay * values[i];
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
    std::size_t t = 0;
  };
  std::unordered_map<std::string, State> states_;
};

// ---------------------------------------------------------------------------
// Stage configuration and data

struct StageConfig {
  Stage stage = Stage::pretrain;
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  // Paper-provenance defaults (1e-4 pre-training, 2e-5 instruction tuning);
  // fixtures override for overfitting runs.
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  std::string data_path;
  std::size_t image_size = 16;  // 16 pretrain / 32 instruct at desk scale
  double weight_decay = 0.01;

  void validate() const {
    if (steps < 1) throw ConfigError("stage config: steps must be >= 1");
    if (!(learning_rate > 0))
      throw ConfigError("stage config: learning_rate must be > 0");
    if (batch_size < 1)
      throw ConfigError("stage config: batch_size must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const StageConfig& c) {
  j = nlohmann::json{{"stage", stage_name(c.stage)},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"seed", c.seed},
                     {"data_path", c.data_path},
                     {"image_size", c.image_size},
                     {"weight_decay", c.weight_decay}};
}
inline void from_json(const nlohmann::json& j, StageConfig& c) {
  c.stage = stage_from_name(j.at("stage").get<std::string>());
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  c.seed = j.value("seed", std::uint64_t{0});
  c.data_path = j.value("data_path", std::string{});
  j.at("image_size").get_to(c.image_size);
  c.weight_decay = j.value("weight_decay", 0.01);
}

struct CaptionPair {
  std::string image_id;
  std::string caption;
};

struct DialogueSample {
  std::string image_id;
  std::vector<lm::Turn> turns;
};

inline std::vector<CaptionPair> load_caption_pairs(
    const std::filesystem::path& path) {
  std::vector<CaptionPair> out;
  for (const auto& j : io::read_jsonl(path))
    out.push_back({j.at("image_id").get<std::string>(),
                   j.at("caption").get<std::string>()});
  return out;
}

inline std::vector<DialogueSample> load_dialogues(
    const std::filesystem::path& path) {
  std::vector<DialogueSample> out;
  for (const auto& j : io::read_jsonl(path))
    out.push_back({j.at("image_id").get<std::string>(),
                   j.at("turns").get<std::vector<lm::Turn>>()});
  return out;
}

/// The 11 caption instructions, loaded verbatim from the golden file.
struct CaptionInstructionSet {
  std::vector<std::string> instructions;

  static CaptionInstructionSet load(const std::filesystem::path& path) {
    std::istringstream is(io::read_file(path));
    CaptionInstructionSet set;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) set.instructions.push_back(line);
    }
    if (set.instructions.size() != 11)
      throw DataError("caption instructions: expected 11 entries, got " +
                      std::to_string(set.instructions.size()));
    if (set.instructions.front() != "Describe the image concisely.")
      throw DataError(
          "caption instructions: first entry must be the concise-description "
          "instruction");
    return set;
  }
};

inline const std::string& sample_instruction(const CaptionInstructionSet& set,
                                             std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dist(0,
                                                  set.instructions.size() - 1);
  return set.instructions[dist(rng)];
}

// ---------------------------------------------------------------------------
// Steps

namespace detail {

struct PreparedSample {
  std::string image_id;
  lm::ConversationSnippet snippet;
};

/// Builds the batch loss (nats per answer token), runs backward, applies
/// the optimizer to every trainable group, and clears gradients.
inline double run_batch(model::Model& m, std::vector<ParamGroup>& groups,
                        AdamW& opt, const AdamWConfig& opt_cfg,
                        const std::vector<PreparedSample>& batch,
                        std::size_t image_size) {
  std::vector<Tensor> losses;
  std::size_t answer_tokens = 0;
  for (const auto& sample : batch) {
    Tensor image = bridge::synthetic_image(sample.image_id, image_size,
                                           m.cfg.bridge.channels);
    losses.push_back(m.loss_for(image, sample.snippet));
    answer_tokens += lm::answer_token_count(sample.snippet);
  }
  Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i)
    total = add(total, losses[i]);
  if (answer_tokens > 0)
    total = scale(total, 1.0 / static_cast<double>(answer_tokens));
  backward(total);
  for (auto& g : groups) opt.update(g, opt_cfg);
  for (auto& g : groups)
    for (auto& [name, t] : g.params) t.zero_grad();
  return total.item();
}

}  // namespace detail

/// One pre-training step: per sample, draw an instruction uniformly, render
/// a one-round (instruction -> caption) conversation, and update the
/// non-frozen groups on the answer-span loss.
inline double pretrain_step(model::Model& m, std::vector<ParamGroup>& groups,
                            AdamW& opt, const AdamWConfig& opt_cfg,
                            const std::vector<CaptionPair>& batch,
                            std::mt19937_64& rng,
                            const lm::ConversationTemplate& tmpl,
                            const CaptionInstructionSet& instructions,
                            std::size_t image_size) {
  if (batch.empty()) throw ContractError("pretrain_step: empty batch");
  for (const auto& g : groups)
    if (g.name == "llm" && g.trainable)
      throw ContractError("pretrain_step: llm group must be frozen");
  std::vector<detail::PreparedSample> prepared;
  prepared.reserve(batch.size());
  for (const auto& pair : batch) {
    const std::string& ins = sample_instruction(instructions, rng);
    prepared.push_back(
        {pair.image_id,
         lm::render_conversation(
             {{"user", ins}, {"assistant", pair.caption}}, tmpl)});
  }
  return detail::run_batch(m, groups, opt, opt_cfg, prepared, image_size);
}

/// One instruction-tuning step over conversation snippets; every group
/// updates. Snippets that exceed the context window are skipped with a log
/// line rather than truncated.
inline double instruct_step(model::Model& m, std::vector<ParamGroup>& groups,
                            AdamW& opt, const AdamWConfig& opt_cfg,
                            const std::vector<DialogueSample>& batch,
                            const lm::ConversationTemplate& tmpl,
                            std::size_t image_size) {
  if (batch.empty()) throw ContractError("instruct_step: empty batch");
  std::vector<detail::PreparedSample> prepared;
  for (const auto& sample : batch) {
    auto snippet = lm::render_conversation(sample.turns, tmpl);
    const std::size_t need = m.cfg.bridge.n + snippet.token_ids.size();
    if (need > m.cfg.decoder.max_seq_len) {
      std::fprintf(stderr,
                   "muffin: skipping oversize snippet for image %s "
                   "(%zu > %zu tokens)\n",
                   sample.image_id.c_str(), need, m.cfg.decoder.max_seq_len);
      continue;
    }
    prepared.push_back({sample.image_id, std::move(snippet)});
  }
  if (prepared.empty())
    throw DataError("instruct_step: every snippet exceeded max_seq_len");
  return detail::run_batch(m, groups, opt, opt_cfg, prepared, image_size);
}

// ---------------------------------------------------------------------------
// Stage runner

struct StageResult {
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
};

/// Runs a full stage: seeded with-replacement batches, per-step metrics
/// line {step, loss, lr}, end-of-stage checkpoint. A non-finite loss aborts
/// with the offending batch's image ids. Wall time goes to a summary
/// sidecar so the metrics log stays byte-reproducible.
inline StageResult run_stage(model::Model& m, const StageConfig& cfg,
                             const lm::ConversationTemplate& tmpl,
                             const CaptionInstructionSet& instructions,
                             const std::filesystem::path& out_dir,
                             const std::string& config_hash) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<CaptionPair> captions;
  std::vector<DialogueSample> dialogues;
  if (cfg.stage == Stage::pretrain) {
    captions = load_caption_pairs(cfg.data_path);
    if (captions.empty())
      throw DataError("run_stage: no caption pairs in " + cfg.data_path);
  } else {
    dialogues = load_dialogues(cfg.data_path);
    if (dialogues.empty())
      throw DataError("run_stage: no dialogues in " + cfg.data_path);
  }
  const std::size_t pool =
      cfg.stage == Stage::pretrain ? captions.size() : dialogues.size();

  auto groups = stage_groups(m, cfg.stage);
  AdamW opt;
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.learning_rate;
  opt_cfg.weight_decay = cfg.weight_decay;

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool - 1);

  std::ostringstream metrics;
  double loss = 0.0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> idx(cfg.batch_size);
    for (auto& i : idx) i = pick(rng);
    std::vector<std::string> batch_ids;
    try {
      if (cfg.stage == Stage::pretrain) {
        std::vector<CaptionPair> batch;
        for (auto i : idx) {
          batch.push_back(captions[i]);
          batch_ids.push_back(captions[i].image_id);
        }
        loss = pretrain_step(m, groups, opt, opt_cfg, batch, rng, tmpl,
                             instructions, cfg.image_size);
      } else {
        std::vector<DialogueSample> batch;
        for (auto i : idx) {
          batch.push_back(dialogues[i]);
          batch_ids.push_back(dialogues[i].image_id);
        }
        loss = instruct_step(m, groups, opt, opt_cfg, batch, tmpl,
                             cfg.image_size);
      }
    } catch (const ContractError& e) {
      // Finite-check builds surface NaN/Inf as ContractError mid-forward.
      if (std::string(e.what()).find("non-finite") == std::string::npos)
        throw;
      loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(loss)) {
      std::string ids;
      for (const auto& id : batch_ids) ids += (ids.empty() ? "" : ", ") + id;
      throw DataError("run_stage: non-finite loss at step " +
                      std::to_string(step) + " (batch image ids: " + ids +
                      ")");
    }
    nlohmann::json line = {
        {"step", step}, {"loss", loss}, {"lr", cfg.learning_rate}};
    metrics << line.dump() << '\n';
  }

  std::filesystem::create_directories(out_dir);
  const std::string stage_tag = stage_name(cfg.stage);
  StageResult result;
  result.final_loss = loss;
  result.metrics_path = out_dir / (stage_tag + "_metrics.jsonl");
  io::write_file(result.metrics_path, metrics.str());

  result.checkpoint_path = out_dir / (stage_tag + ".ckpt");
  auto params = m.all_params();
  checkpoint::save(result.checkpoint_path, params, config_hash);

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  nlohmann::json summary = {{"stage", stage_tag},
                            {"steps", cfg.steps},
                            {"final_loss", result.final_loss},
                            {"wall_seconds", result.wall_seconds},
                            {"config_hash", config_hash}};
  io::write_file(out_dir / (stage_tag + "_summary.json"),
                 summary.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification suite

struct GroupCheck {
  std::string group;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t non_finite = 0;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Core of the suite: checks an arbitrary scalar loss thunk against every
/// trainable group via the finite-difference oracle.
inline GradCheckReport grad_check_groups(const std::function<Tensor()>& f,
                                         std::vector<ParamGroup>& groups,
                                         double eps = 1e-5,
                                         double tolerance = 1e-4) {
  GradCheckReport report;
  for (auto& g : groups) {
    if (!g.trainable) continue;  // frozen groups are absent from the report
    auto fd = finite_diff_check(f, g.params, eps);
    GroupCheck check;
    check.group = g.name;
    check.max_rel_err = fd.max_rel_err;
    for (const auto& e : fd.entries) {
      check.checked += e.checked;
      check.non_finite += e.non_finite;
    }
    report.max_rel_err = std::max(report.max_rel_err, check.max_rel_err);
    report.groups.push_back(check);
    for (auto& [name, t] : g.params) t.zero_grad();
  }
  report.pass = report.max_rel_err < tolerance;
  for (const auto& c : report.groups)
    if (c.non_finite > 0) report.pass = false;
  return report;
}

/// Finite-difference verification of the full answer-span loss against
/// every trainable group. Requires a deliberately tiny model; passes iff
/// the worst relative error stays under 1e-4.
inline GradCheckReport grad_check_suite(
    model::Model& m, std::vector<ParamGroup>& groups,
    const std::vector<detail::PreparedSample>& batch, std::size_t image_size,
    double eps = 1e-5, double tolerance = 1e-4) {
  const std::size_t trainable = m.trainable_count();
  if (trainable >= 5000)
    throw ContractError("grad_check_suite: model has " +
                        std::to_string(trainable) +
                        " trainable parameters; the finite-difference "
                        "oracle requires < 5000");
  if (batch.empty()) throw ContractError("grad_check_suite: empty batch");

  std::size_t answer_tokens = 0;
  for (const auto& sample : batch)
    answer_tokens += lm::answer_token_count(sample.snippet);
  // Same objective the trainer optimizes: nats per answer token. The
  // normalization keeps |f| small so finite differences stay above
  // rounding noise.
  auto f = [&]() -> Tensor {
    Tensor total;
    for (const auto& sample : batch) {
      Tensor image = bridge::synthetic_image(sample.image_id, image_size,
                                             m.cfg.bridge.channels);
      Tensor loss = m.loss_for(image, sample.snippet);
      total = total.defined() ? add(total, loss) : loss;
    }
    if (answer_tokens > 0)
      total = scale(total, 1.0 / static_cast<double>(answer_tokens));
    return total;
  };
  return grad_check_groups(f, groups, eps, tolerance);
}

/// Convenience wrapper: renders snippets for (image, instruction, answer)
/// triples before running the suite.
inline GradCheckReport grad_check_suite(
    model::Model& m, std::vector<ParamGroup>& groups,
    const std::vector<CaptionPair>& tiny_batch,
    const lm::ConversationTemplate& tmpl,
    const CaptionInstructionSet& instructions, std::mt19937_64& rng,
    std::size_t image_size) {
  std::vector<detail::PreparedSample> prepared;
  for (const auto& pair : tiny_batch)
    prepared.push_back(
        {pair.image_id,
         lm::render_conversation({{"user", sample_instruction(instructions,
                                                              rng)},
                                  {"assistant", pair.caption}},
                                 tmpl)});
  return grad_check_suite(m, groups, prepared, image_size);
}

}  // namespace muffin::train
