#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>
#include <thread>

#include "bld/distill.hpp"
#include "json.hpp"

namespace bld {

namespace {

struct Example {
  SupervisionTargets sup;
  std::optional<TeacherByteTargets> teacher;
};

using Batch = std::vector<Example>;

Example make_example(const Tokenizer& tokenizer, std::size_t heads, const TargetProvider* teacher, std::size_t index,
                     std::span<const Byte> sample) {
  Example e;
  e.sup = make_supervision(tokenizer, sample, heads);
  if (teacher && teacher->available(index)) e.teacher = teacher->targets(index, sample);
  return e;
}

bool matches(const std::string& name, const std::vector<std::string>& patterns) {
  for (const auto& p : patterns) {
    if (name.rfind(p, 0) == 0) return true;
    if (name.size() > p.size() && name.compare(name.size() - p.size(), p.size(), p) == 0 &&
        name[name.size() - p.size() - 1] == '.')
      return true;
  }
  return false;
}

/// Decoupled-weight-decay Adam over the trainable tensors of a student.
class AdamW {
 public:
  AdamW(const StudentModel& model, const TrainConfig& config) : config_(config) {
    for (const auto& t : model.tensors()) {
      m_.push_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
      v_.push_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
    }
  }

  void step(StudentModel& model, GradientSet& grads, const std::vector<bool>& trainable, double lr) {
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i)
      if (trainable[i]) sq += grads[i].squaredNorm();
    double norm = std::sqrt(sq);
    double scale = (config_.grad_clip > 0.0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;
    ++t_;
    double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    auto& tensors = model.tensors();
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!trainable[i]) continue;
      Eigen::MatrixXd g = grads[i] * scale;
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
      auto& p = tensors[i].value;
      p -= lr * config_.weight_decay * p;
      p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.adam_eps);
    }
  }

 private:
  const TrainConfig& config_;
  std::vector<Eigen::MatrixXd> m_, v_;
  std::size_t t_ = 0;
};

std::vector<bool> trainable_mask(const StudentModel& model, const TrainConfig& config, bool byte_head_only) {
  std::vector<bool> mask;
  for (const auto& t : model.tensors()) {
    bool on = true;
    if (config.lora) on = matches(t.name, config.lora_targets);
    if (matches(t.name, config.frozen)) on = false;
    if (byte_head_only) on = t.name.rfind("byte_head", 0) == 0;
    mask.push_back(on);
  }
  return mask;
}

/// Produces batches in order, optionally on a helper thread with a bounded queue.
class BatchFeed {
 public:
  BatchFeed(std::size_t count, std::size_t capacity, std::function<Batch(std::size_t)> make)
      : count_(count), capacity_(capacity), make_(std::move(make)) {
    if (capacity_ > 0) worker_ = std::thread([this] { run(); });
  }
  ~BatchFeed() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Batch next() {
    if (capacity_ == 0) return make_(served_++);
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || error_; });
    if (queue_.empty()) std::rethrow_exception(error_);
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    ++served_;
    cv_.notify_all();
    return b;
  }

 private:
  void run() {
    for (std::size_t i = 0; i < count_; ++i) {
      Batch b;
      try {
        b = make_(i);
      } catch (...) {
        std::lock_guard lock(mu_);
        error_ = std::current_exception();
        cv_.notify_all();
        return;
      }
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return queue_.size() < capacity_ || stop_; });
      if (stop_) return;
      queue_.push_back(std::move(b));
      cv_.notify_all();
    }
  }

  std::size_t count_;
  std::size_t capacity_;
  std::function<Batch(std::size_t)> make_;
  std::size_t served_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Batch> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
  std::thread worker_;
};

/// One optimization step over a batch; returns the batch-mean loss.
LossBreakdown train_step(StudentModel& model, AdamW& opt, const Batch& batch, const std::vector<bool>& trainable,
                         const LossWeights& weights, double lr, std::size_t step) {
  GradientSet grads = model.zero_gradients();
  LossBreakdown mean;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    auto pass = model.forward(ex.sup.input);
    LossResult r;
    try {
      r = bld_loss(pass, model.config(), ex.sup, ex.teacher ? &*ex.teacher : nullptr, weights);
    } catch (const Error& e) {
      fail(e.kind(), "step " + std::to_string(step) + ": " + e.what());
    }
    r.d_token *= inv_b;
    if (r.d_byte.size() > 0) r.d_byte *= inv_b;
    auto g = model.backward(pass, r.d_token, r.d_byte);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (trainable[i]) grads[i] += g[i];
    r.loss *= inv_b;
    mean += r.loss;
  }
  if (!std::isfinite(mean.total)) fail(ErrorKind::Numeric, "loss diverged at step " + std::to_string(step));
  for (const auto& g : grads)
    if (!g.allFinite()) fail(ErrorKind::Numeric, "non-finite gradient at step " + std::to_string(step));
  opt.step(model, grads, trainable, lr);
  return mean;
}

std::size_t byte_heads_of(const StudentModel& model) {
  return model.has_byte_head() ? model.config().byte_heads : 0;
}

}  // namespace

void TrainConfig::validate() const {
  weights.validate();
  if (batch_size == 0) fail(ErrorKind::Config, "batch size must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorKind::Config, "learning rate must be finite and non-negative");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) fail(ErrorKind::Config, "min_lr_ratio must be in [0, 1]");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::Config, "weight decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail(ErrorKind::Config, "Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail(ErrorKind::Config, "Adam epsilon must be positive");
  if (!(grad_clip >= 0.0)) fail(ErrorKind::Config, "gradient clip must be non-negative");
  if (lora && lora_targets.empty()) fail(ErrorKind::Config, "LoRA is enabled but lists no target tensors");
}

double scheduled_lr(const TrainConfig& config, std::size_t step) {
  if (config.warmup_steps > 0 && step < config.warmup_steps)
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  std::size_t decay = config.steps > config.warmup_steps ? config.steps - config.warmup_steps : 0;
  if (decay <= 1) return config.lr;
  double progress = static_cast<double>(step - config.warmup_steps) / static_cast<double>(decay - 1);
  progress = std::clamp(progress, 0.0, 1.0);
  double floor = config.lr * config.min_lr_ratio;
  return floor + (config.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<MetricRecord> train(StudentModel& student, const Tokenizer& tokenizer, std::span<const ByteString> corpus,
                                const TargetProvider* teacher, const TrainConfig& config) {
  config.validate();
  std::vector<MetricRecord> trace;
  if (config.steps == 0) return trace;
  if (corpus.empty()) fail(ErrorKind::EmptyInput, "training corpus is empty");
  if (student.config().vocab_rows != tokenizer.vocab().size())
    fail(ErrorKind::Contract, "student vocabulary does not match the tokenizer");
  if (config.pretrain_byte_head && !student.has_byte_head())
    fail(ErrorKind::Contract, "byte-head pretraining needs a byte head");

  // Sample indices are drawn up front so batches do not depend on prefetching.
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<std::vector<std::size_t>> plan(config.steps);
  for (auto& b : plan) {
    b.resize(config.batch_size);
    for (auto& i : b) i = pick(rng);
  }
  const std::size_t heads = byte_heads_of(student);
  BatchFeed feed(config.steps, config.prefetch, [&](std::size_t s) {
    Batch b;
    for (std::size_t i : plan[s]) b.push_back(make_example(tokenizer, heads, teacher, i, corpus[i]));
    return b;
  });

  AdamW opt(student, config);
  const auto full = trainable_mask(student, config, false);
  const auto head_only = trainable_mask(student, config, true);
  for (std::size_t step = 0; step < config.steps; ++step) {
    Batch batch = feed.next();
    double lr = scheduled_lr(config, step);
    bool pre = config.pretrain_byte_head && step < config.pretrain_steps;
    auto loss = train_step(student, opt, batch, pre ? head_only : full, config.weights, lr, step);
    trace.push_back({step, loss.token_ce, loss.byte_ce, loss.byte_kl, loss.total, lr});
  }
  return trace;
}

LossBreakdown evaluate(const StudentModel& student, const Tokenizer& tokenizer, std::span<const ByteString> corpus,
                       const TargetProvider* teacher, const LossWeights& weights) {
  if (corpus.empty()) fail(ErrorKind::EmptyInput, "evaluation corpus is empty");
  const std::size_t heads = byte_heads_of(student);
  LossBreakdown sum;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto ex = make_example(tokenizer, heads, teacher, i, corpus[i]);
    auto pass = student.forward(ex.sup.input);
    sum += bld_loss(pass, student.config(), ex.sup, ex.teacher ? &*ex.teacher : nullptr, weights).loss;
  }
  sum *= 1.0 / static_cast<double>(corpus.size());
  return sum;
}

std::string serialize_metrics(std::span<const MetricRecord> trace) {
  std::string out;
  for (const auto& r : trace) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["token_ce"] = r.token_ce;
    j["byte_ce"] = r.byte_ce;
    j["byte_kl"] = r.byte_kl;
    j["total"] = r.total;
    j["lr"] = r.lr;
    out += j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
    out += '\n';
  }
  return out;
}

namespace {

template <typename F>
void for_each_json_line(std::string_view text, const char* what, F&& f) {
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Format, std::string(what) + " record " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<MetricRecord> parse_metrics(std::string_view text) {
  std::vector<MetricRecord> out;
  for_each_json_line(text, "metrics", [&](const nlohmann::json& j) {
    out.push_back({j.at("step").get<std::size_t>(), j.at("token_ce").get<double>(), j.at("byte_ce").get<double>(),
                   j.at("byte_kl").get<double>(), j.at("total").get<double>(), j.at("lr").get<double>()});
  });
  return out;
}

std::vector<SftEpochRecord> byte_only_sft(StudentModel& student, const Tokenizer& tokenizer,
                                          std::span<const ByteString> train_corpus,
                                          std::span<const ByteString> val_corpus, const SftConfig& config) {
  if (!student.has_byte_head()) fail(ErrorKind::Contract, "byte-only SFT needs a student with a byte head");
  if (train_corpus.empty() || val_corpus.empty()) fail(ErrorKind::EmptyInput, "byte-only SFT needs non-empty corpora");
  TrainConfig tc = config.train;
  tc.weights = LossWeights{0.0, 0.0, 1.0};
  tc.frozen.push_back("token_head");
  tc.pretrain_byte_head = false;
  const std::size_t per_epoch = (train_corpus.size() + tc.batch_size - 1) / tc.batch_size;
  tc.steps = per_epoch * config.epochs;
  tc.validate();

  const LossWeights report{1.0, 0.0, 1.0};
  auto record = [&](std::size_t epoch) {
    auto tr = evaluate(student, tokenizer, train_corpus, nullptr, report);
    auto va = evaluate(student, tokenizer, val_corpus, nullptr, report);
    return SftEpochRecord{epoch, tr.byte_ce, tr.token_ce, va.byte_ce, va.token_ce};
  };
  std::vector<SftEpochRecord> out{record(0)};
  if (config.epochs == 0) return out;

  std::mt19937_64 rng(tc.seed);
  const std::size_t heads = byte_heads_of(student);
  AdamW opt(student, tc);
  const auto mask = trainable_mask(student, tc, false);
  std::vector<std::size_t> order(train_corpus.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++step) {
      Batch batch;
      for (std::size_t i = start; i < std::min(order.size(), start + tc.batch_size); ++i)
        batch.push_back(make_example(tokenizer, heads, nullptr, order[i], train_corpus[order[i]]));
      train_step(student, opt, batch, mask, tc.weights, scheduled_lr(tc, step), step);
    }
    out.push_back(record(epoch));
  }
  return out;
}

std::string serialize_sft(std::span<const SftEpochRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_byte_ce"] = r.train_byte_ce;
    j["train_token_ce"] = r.train_token_ce;
    j["val_byte_ce"] = r.val_byte_ce;
    j["val_token_ce"] = r.val_token_ce;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<SftEpochRecord> parse_sft(std::string_view text) {
  std::vector<SftEpochRecord> out;
  for_each_json_line(text, "sft", [&](const nlohmann::json& j) {
    out.push_back({j.at("epoch").get<std::size_t>(), j.at("train_byte_ce").get<double>(),
                   j.at("train_token_ce").get<double>(), j.at("val_byte_ce").get<double>(),
                   j.at("val_token_ce").get<double>()});
  });
  return out;
}

}  // namespace bld
