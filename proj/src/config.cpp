#include <deque>
#include <set>

#include "bld/pipeline.hpp"
#include "json.hpp"

namespace bld {

namespace {

using nlohmann::json;

/// Reads known keys from an object section and rejects anything else.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorKind::Config, "config section '" + path_ + "' must be an object");
  }
  /// Throws Config for any key no getter asked for, here or in a sub-section.
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(ErrorKind::Config, "unknown config key '" + qualified(k) + "'");
    for (const auto& c : children_) c.finish();
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::Config, "config key '" + qualified(key) + "': " + e.what());
    }
  }
  void size_or_inf(const char* key, std::size_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (v.is_string() && v.get<std::string>() == "inf") {
      out = kUnboundedBeam;
    } else if (v.is_number_unsigned()) {
      out = v.get<std::size_t>();
    } else {
      fail(ErrorKind::Config, "config key '" + qualified(key) + "' must be a non-negative integer or \"inf\"");
    }
  }
  Section* sub(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return nullptr;
    return &children_.emplace_back(j_.at(key), qualified(key));
  }

 private:
  std::string qualified(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
  std::deque<Section> children_;
};

json k_json(std::size_t k) { return k == kUnboundedBeam ? json("inf") : json(k); }

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.train.warmup_steps = 100;
  c.sweep.workers = 1;
  return c;
}

void RunConfig::validate() const {
  beam.validate();
  sweep.reference.validate();
  train.validate();
  if (sweep.ks.empty() || sweep.epsilons.empty()) fail(ErrorKind::Config, "sweep needs at least one K and one epsilon");
  for (std::size_t k : sweep.ks)
    if (k == 0) fail(ErrorKind::Config, "sweep K values must be at least 1");
  for (double e : sweep.epsilons)
    if (!(e >= 0.0 && e < 1.0)) fail(ErrorKind::Config, "sweep epsilon values must be in [0, 1)");
  if (shards == 0) fail(ErrorKind::Config, "shard count must be positive");
  if (workers == 0) fail(ErrorKind::Config, "worker count must be positive");
  if (d == 0 || layers == 0 || max_seq_len == 0) fail(ErrorKind::Config, "model dimensions must be positive");
  if (byte_vocab < 258) fail(ErrorKind::Config, "byte vocabulary must hold 256 bytes plus specials");
}

RunConfig parse_run_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c = default_run_config();
  {
    Section top(root, "");
    if (auto s = top.sub("paths")) {
      s->get("vocab", c.paths.vocab);
      s->get("merges", c.paths.merges);
      s->get("corpus", c.paths.corpus);
      s->get("shards", c.paths.shards);
      s->get("checkpoint", c.paths.checkpoint);
      s->get("reports", c.paths.reports);
      s->get("teacher_vocab", c.paths.teacher_vocab);
      s->get("teacher_merges", c.paths.teacher_merges);
      s->get("teacher_checkpoint", c.paths.teacher_checkpoint);
    }
    if (auto s = top.sub("beam")) {
      s->size_or_inf("k", c.beam.k);
      s->get("epsilon", c.beam.epsilon);
      s->get("batch_size", c.beam.batch_size);
    }
    if (auto s = top.sub("sweep")) {
      s->get("ks", c.sweep.ks);
      s->get("epsilons", c.sweep.epsilons);
      s->get("repeats", c.sweep.repeats);
      s->get("max_samples", c.sweep.max_samples);
      if (auto r = s->sub("reference")) {
        r->size_or_inf("k", c.sweep.reference.k);
        r->get("epsilon", c.sweep.reference.epsilon);
      }
    }
    if (auto s = top.sub("optimizer")) {
      s->get("lr", c.train.lr);
      s->get("weight_decay", c.train.weight_decay);
      s->get("beta1", c.train.beta1);
      s->get("beta2", c.train.beta2);
      s->get("eps", c.train.adam_eps);
      s->get("grad_clip", c.train.grad_clip);
    }
    if (auto s = top.sub("schedule")) {
      s->get("steps", c.train.steps);
      s->get("warmup_steps", c.train.warmup_steps);
      s->get("min_lr_ratio", c.train.min_lr_ratio);
      s->get("batch_size", c.train.batch_size);
      s->get("sft_epochs", c.sft_epochs);
    }
    if (auto s = top.sub("loss")) {
      s->get("lambda_token", c.train.weights.lambda_token);
      s->get("lambda_kl", c.train.weights.lambda_kl);
      s->get("lambda_byte", c.train.weights.lambda_byte);
    }
    if (auto s = top.sub("byte_head")) {
      s->get("heads", c.byte_heads);
      s->get("vocab", c.byte_vocab);
      s->get("pretrain", c.train.pretrain_byte_head);
      s->get("pretrain_steps", c.train.pretrain_steps);
    }
    if (auto s = top.sub("model")) {
      s->get("d", c.d);
      s->get("layers", c.layers);
      s->get("max_seq_len", c.max_seq_len);
    }
    if (auto s = top.sub("lora")) {
      s->get("enabled", c.train.lora);
      s->get("targets", c.train.lora_targets);
    }
    if (auto s = top.sub("data")) {
      s->get("shards", c.shards);
      s->get("workers", c.workers);
      s->get("prefetch", c.train.prefetch);
    }
    top.get("seed", c.seed);
    top.finish();
  }
  c.sweep.batch_size = c.beam.batch_size;
  c.sweep.workers = c.workers;
  c.sweep.seed = c.seed;
  c.train.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return parse_run_config(read_file(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Io) throw;
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

std::string serialize_run_config(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["paths"] = {{"vocab", c.paths.vocab},
                {"merges", c.paths.merges},
                {"corpus", c.paths.corpus},
                {"shards", c.paths.shards},
                {"checkpoint", c.paths.checkpoint},
                {"reports", c.paths.reports},
                {"teacher_vocab", c.paths.teacher_vocab},
                {"teacher_merges", c.paths.teacher_merges},
                {"teacher_checkpoint", c.paths.teacher_checkpoint}};
  j["beam"] = {{"k", k_json(c.beam.k)}, {"epsilon", c.beam.epsilon}, {"batch_size", c.beam.batch_size}};
  j["sweep"] = {{"ks", c.sweep.ks},
                {"epsilons", c.sweep.epsilons},
                {"repeats", c.sweep.repeats},
                {"max_samples", c.sweep.max_samples},
                {"reference", {{"k", k_json(c.sweep.reference.k)}, {"epsilon", c.sweep.reference.epsilon}}}};
  j["optimizer"] = {{"lr", c.train.lr},       {"weight_decay", c.train.weight_decay}, {"beta1", c.train.beta1},
                    {"beta2", c.train.beta2}, {"eps", c.train.adam_eps},              {"grad_clip", c.train.grad_clip}};
  j["schedule"] = {{"steps", c.train.steps},
                   {"warmup_steps", c.train.warmup_steps},
                   {"min_lr_ratio", c.train.min_lr_ratio},
                   {"batch_size", c.train.batch_size},
                   {"sft_epochs", c.sft_epochs}};
  j["loss"] = {{"lambda_token", c.train.weights.lambda_token},
               {"lambda_kl", c.train.weights.lambda_kl},
               {"lambda_byte", c.train.weights.lambda_byte}};
  j["byte_head"] = {{"heads", c.byte_heads},
                    {"vocab", c.byte_vocab},
                    {"pretrain", c.train.pretrain_byte_head},
                    {"pretrain_steps", c.train.pretrain_steps}};
  j["model"] = {{"d", c.d}, {"layers", c.layers}, {"max_seq_len", c.max_seq_len}};
  j["lora"] = {{"enabled", c.train.lora}, {"targets", c.train.lora_targets}};
  j["data"] = {{"shards", c.shards}, {"workers", c.workers}, {"prefetch", c.train.prefetch}};
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

}  // namespace bld
