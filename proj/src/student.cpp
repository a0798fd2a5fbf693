#include "bld/student.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

namespace bld {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kRmsEps = 1e-5;
constexpr char kCheckpointMagic[4] = {'B', 'L', 'D', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr int kTensorsPerLayer = 8;  // wq wk wv wo w1 b1 w2 b2

MatrixXd rms_forward(const MatrixXd& x, VectorXd& r) {
  const double d = static_cast<double>(x.cols());
  r = ((x.array().square().rowwise().sum() / d) + kRmsEps).sqrt();
  return x.array().colwise() / r.array();
}

MatrixXd rms_backward(const MatrixXd& dy, const MatrixXd& y, const VectorXd& r) {
  const double d = static_cast<double>(y.cols());
  VectorXd m = (dy.array() * y.array()).rowwise().sum() / d;
  return (dy.array() - y.array().colwise() * m.array()).colwise() / r.array();
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n)
      fail(ErrorKind::Truncated, "checkpoint truncated at offset " + std::to_string(pos_));
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

void StudentConfig::validate() const {
  if (vocab_rows < 2) fail(ErrorKind::Config, "student vocab_rows must be at least 2");
  if (d == 0 || layers == 0 || mlp_hidden == 0) fail(ErrorKind::Config, "student dimensions must be positive");
  if (max_seq_len == 0) fail(ErrorKind::Config, "student max_seq_len must be positive");
  if (byte_heads == 0) fail(ErrorKind::Config, "byte head count must be positive");
  if (byte_vocab < ByteSlots::kEos + 1)
    fail(ErrorKind::Config, "byte vocabulary must hold 256 bytes and the special slots (>= 258)");
}

VectorXd ForwardPass::byte_head_logits(std::size_t pos, std::size_t head, std::size_t byte_vocab) const {
  return byte_logits.block(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(head * byte_vocab), 1,
                           static_cast<Eigen::Index>(byte_vocab))
      .transpose();
}

VectorXd softmax(const VectorXd& logits) {
  double m = logits.maxCoeff();
  if (!std::isfinite(m)) {
    if (m == -std::numeric_limits<double>::infinity()) fail(ErrorKind::Numeric, "softmax over all -inf logits");
    fail(ErrorKind::Numeric, "non-finite logits in softmax");
  }
  VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

StudentModel::StudentModel(const StudentConfig& config) : config_(config) {
  config_.validate();
  build_tensors(true);
  initialize();
}

void StudentModel::build_tensors(bool with_byte_head) {
  const auto rows = static_cast<Eigen::Index>(config_.vocab_rows);
  const auto d = static_cast<Eigen::Index>(config_.d);
  const auto h = static_cast<Eigen::Index>(config_.mlp_hidden);
  tensors_.clear();
  tensors_.push_back({"embed", MatrixXd::Zero(rows, d)});
  tensors_.push_back({"pos", MatrixXd::Zero(config_.max_seq_len, d)});
  for (std::uint32_t l = 0; l < config_.layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    tensors_.push_back({p + "wq", MatrixXd::Zero(d, d)});
    tensors_.push_back({p + "wk", MatrixXd::Zero(d, d)});
    tensors_.push_back({p + "wv", MatrixXd::Zero(d, d)});
    tensors_.push_back({p + "wo", MatrixXd::Zero(d, d)});
    tensors_.push_back({p + "w1", MatrixXd::Zero(d, h)});
    tensors_.push_back({p + "b1", MatrixXd::Zero(1, h)});
    tensors_.push_back({p + "w2", MatrixXd::Zero(h, d)});
    tensors_.push_back({p + "b2", MatrixXd::Zero(1, d)});
  }
  tensors_.push_back({"token_head.w", MatrixXd::Zero(d, rows)});
  tensors_.push_back({"token_head.b", MatrixXd::Zero(1, rows)});
  has_byte_head_ = with_byte_head;
  if (with_byte_head) {
    const auto cols = static_cast<Eigen::Index>(config_.byte_heads) * static_cast<Eigen::Index>(config_.byte_vocab);
    tensors_.push_back({"byte_head.w", MatrixXd::Zero(d, cols)});
    tensors_.push_back({"byte_head.b", MatrixXd::Zero(1, cols)});
  }
}

void StudentModel::initialize() {
  std::mt19937_64 rng(config_.seed);
  auto fill = [&rng](MatrixXd& m, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = n(rng);
  };
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config_.d));
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(config_.mlp_hidden));
  fill(tensors_[0].value, 1.0);
  fill(tensors_[1].value, 0.1);
  for (std::uint32_t l = 0; l < config_.layers; ++l) {
    std::size_t base = 2 + l * kTensorsPerLayer;
    fill(tensors_[base + 0].value, inv_sqrt_d);
    fill(tensors_[base + 1].value, inv_sqrt_d);
    fill(tensors_[base + 2].value, inv_sqrt_d);
    fill(tensors_[base + 3].value, 0.5 * inv_sqrt_d);
    fill(tensors_[base + 4].value, inv_sqrt_d);
    fill(tensors_[base + 6].value, 0.5 * inv_sqrt_h);
  }
  auto [tw, tb] = token_head_indices();
  (void)tb;
  auto [bw, bb] = byte_head_indices();
  (void)bb;
  if (!config_.zero_init_heads) {
    fill(tensors_[static_cast<std::size_t>(tw)].value, inv_sqrt_d);
    if (bw >= 0) fill(tensors_[static_cast<std::size_t>(bw)].value, inv_sqrt_d);
  }
}

std::pair<int, int> StudentModel::token_head_indices() const {
  int base = 2 + static_cast<int>(config_.layers) * kTensorsPerLayer;
  return {base, base + 1};
}

std::pair<int, int> StudentModel::byte_head_indices() const {
  if (!has_byte_head_) return {-1, -1};
  int base = 4 + static_cast<int>(config_.layers) * kTensorsPerLayer;
  return {base, base + 1};
}

int StudentModel::tensor_index(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].name == name) return static_cast<int>(i);
  return -1;
}

std::size_t StudentModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
  return n;
}

GradientSet StudentModel::zero_gradients() const {
  GradientSet g;
  g.reserve(tensors_.size());
  for (const auto& t : tensors_) g.push_back(MatrixXd::Zero(t.value.rows(), t.value.cols()));
  return g;
}

MatrixXd StudentModel::backbone(std::span<const TokenId> input, ForwardPass* pass) const {
  const std::size_t n = input.size();
  if (n == 0) fail(ErrorKind::InvalidArgument, "student forward needs at least one input token");
  if (n > config_.max_seq_len)
    fail(ErrorKind::InvalidArgument, "input of " + std::to_string(n) + " tokens exceeds max_seq_len " +
                                         std::to_string(config_.max_seq_len));
  const auto& embed = tensors_[0].value;
  const auto& pos = tensors_[1].value;
  const auto d = static_cast<Eigen::Index>(config_.d);
  const auto rows = static_cast<Eigen::Index>(n);
  MatrixXd x(rows, d);
  for (std::size_t i = 0; i < n; ++i) {
    TokenId id = input[i];
    if (id < 0 || static_cast<std::uint32_t>(id) >= config_.vocab_rows)
      fail(ErrorKind::Lookup, "student input position " + std::to_string(i) + " holds invalid id " +
                                  std::to_string(id));
    x.row(static_cast<Eigen::Index>(i)) = embed.row(id) + pos.row(static_cast<Eigen::Index>(i));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d));
  for (std::uint32_t l = 0; l < config_.layers; ++l) {
    std::size_t base = 2 + l * kTensorsPerLayer;
    const auto& wq = tensors_[base + 0].value;
    const auto& wk = tensors_[base + 1].value;
    const auto& wv = tensors_[base + 2].value;
    const auto& wo = tensors_[base + 3].value;
    const auto& w1 = tensors_[base + 4].value;
    const auto& b1 = tensors_[base + 5].value;
    const auto& w2 = tensors_[base + 6].value;
    const auto& b2 = tensors_[base + 7].value;

    ForwardPass::Layer c;
    c.x_in = x;
    c.h = rms_forward(x, c.r1);
    c.q = c.h * wq;
    c.k = c.h * wk;
    c.v = c.h * wv;
    MatrixXd s = (c.q * c.k.transpose()) * scale;
    c.a = MatrixXd::Zero(rows, rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
      double m = s.row(i).head(i + 1).maxCoeff();
      double z = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        double e = std::exp(s(i, j) - m);
        c.a(i, j) = e;
        z += e;
      }
      c.a.row(i).head(i + 1) /= z;
    }
    c.o = c.a * c.v;
    c.x_mid = c.x_in + c.o * wo;
    c.h2 = rms_forward(c.x_mid, c.r2);
    c.g = ((c.h2 * w1).rowwise() + b1.row(0)).array().tanh();
    x = c.x_mid + ((c.g * w2).rowwise() + b2.row(0)).eval();
    if (pass) pass->layers.push_back(std::move(c));
  }
  return x;
}

ForwardPass StudentModel::forward(std::span<const TokenId> input) const {
  ForwardPass pass;
  pass.input.assign(input.begin(), input.end());
  MatrixXd x = backbone(input, &pass);
  pass.f = rms_forward(x, pass.r_final);
  auto [tw, tb] = token_head_indices();
  pass.token_logits = (pass.f * tensors_[static_cast<std::size_t>(tw)].value).rowwise() +
                      tensors_[static_cast<std::size_t>(tb)].value.row(0);
  if (has_byte_head_) {
    auto [bw, bb] = byte_head_indices();
    pass.byte_logits = (pass.f * tensors_[static_cast<std::size_t>(bw)].value).rowwise() +
                       tensors_[static_cast<std::size_t>(bb)].value.row(0);
  }
  return pass;
}

VectorXd StudentModel::next_token_logits(std::span<const TokenId> input) const {
  MatrixXd x = backbone(input, nullptr);
  VectorXd r;
  MatrixXd last = x.bottomRows(1);
  MatrixXd f = rms_forward(last, r);
  auto [tw, tb] = token_head_indices();
  return ((f * tensors_[static_cast<std::size_t>(tw)].value) + tensors_[static_cast<std::size_t>(tb)].value)
      .transpose();
}

GradientSet StudentModel::backward(const ForwardPass& pass, const MatrixXd& d_token, const MatrixXd& d_byte) const {
  GradientSet g = zero_gradients();
  const auto n = static_cast<Eigen::Index>(pass.length());
  if (d_token.rows() != n || d_token.cols() != static_cast<Eigen::Index>(config_.vocab_rows))
    fail(ErrorKind::InvalidArgument, "token logit gradient has wrong shape");

  auto [tw, tb] = token_head_indices();
  const auto& wt = tensors_[static_cast<std::size_t>(tw)].value;
  g[static_cast<std::size_t>(tw)] = pass.f.transpose() * d_token;
  g[static_cast<std::size_t>(tb)] = d_token.colwise().sum();
  MatrixXd df = d_token * wt.transpose();
  if (d_byte.size() > 0) {
    if (!has_byte_head_) fail(ErrorKind::InvalidArgument, "byte logit gradient given to a detached model");
    auto [bw, bb] = byte_head_indices();
    if (d_byte.rows() != n || d_byte.cols() != pass.byte_logits.cols())
      fail(ErrorKind::InvalidArgument, "byte logit gradient has wrong shape");
    g[static_cast<std::size_t>(bw)] = pass.f.transpose() * d_byte;
    g[static_cast<std::size_t>(bb)] = d_byte.colwise().sum();
    df += d_byte * tensors_[static_cast<std::size_t>(bw)].value.transpose();
  }
  MatrixXd dx = rms_backward(df, pass.f, pass.r_final);

  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d));
  for (int l = static_cast<int>(config_.layers) - 1; l >= 0; --l) {
    std::size_t base = 2 + static_cast<std::size_t>(l) * kTensorsPerLayer;
    const auto& c = pass.layers[static_cast<std::size_t>(l)];
    const auto& wq = tensors_[base + 0].value;
    const auto& wk = tensors_[base + 1].value;
    const auto& wv = tensors_[base + 2].value;
    const auto& wo = tensors_[base + 3].value;
    const auto& w1 = tensors_[base + 4].value;
    const auto& w2 = tensors_[base + 6].value;

    // MLP block.
    MatrixXd d_mid = dx;
    g[base + 6] += c.g.transpose() * dx;
    g[base + 7] += dx.colwise().sum();
    MatrixXd dz = ((dx * w2.transpose()).array() * (1.0 - c.g.array().square())).matrix();
    g[base + 4] += c.h2.transpose() * dz;
    g[base + 5] += dz.colwise().sum();
    d_mid += rms_backward(dz * w1.transpose(), c.h2, c.r2);

    // Attention block.
    MatrixXd d_in = d_mid;
    g[base + 3] += c.o.transpose() * d_mid;
    MatrixXd d_o = d_mid * wo.transpose();
    MatrixXd d_a = d_o * c.v.transpose();
    MatrixXd d_v = c.a.transpose() * d_o;
    VectorXd row_dot = (d_a.array() * c.a.array()).rowwise().sum();
    MatrixXd d_s = (c.a.array() * (d_a.array().colwise() - row_dot.array())).matrix();
    MatrixXd d_q = d_s * c.k * scale;
    MatrixXd d_k = d_s.transpose() * c.q * scale;
    g[base + 0] += c.h.transpose() * d_q;
    g[base + 1] += c.h.transpose() * d_k;
    g[base + 2] += c.h.transpose() * d_v;
    MatrixXd d_h = d_q * wq.transpose() + d_k * wk.transpose() + d_v * wv.transpose();
    d_in += rms_backward(d_h, c.h, c.r1);
    dx = std::move(d_in);
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    g[0].row(pass.input[static_cast<std::size_t>(i)]) += dx.row(i);
    g[1].row(i) += dx.row(i);
  }
  return g;
}

StudentModel StudentModel::detach_byte_head() const {
  StudentModel out = *this;
  if (out.has_byte_head_) {
    out.tensors_.pop_back();
    out.tensors_.pop_back();
    out.has_byte_head_ = false;
  }
  return out;
}

std::string StudentModel::serialize() const {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, config_.vocab_rows);
  put_u32(out, config_.d);
  put_u32(out, config_.layers);
  put_u32(out, config_.mlp_hidden);
  put_u32(out, config_.max_seq_len);
  put_u32(out, config_.byte_heads);
  put_u32(out, config_.byte_vocab);
  std::uint32_t flags = (has_byte_head_ ? 1u : 0u) | (config_.zero_init_heads ? 2u : 0u);
  put_u32(out, flags);
  put_u64(out, config_.seed);
  for (const auto& t : tensors_) {
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      for (Eigen::Index c = 0; c < t.value.cols(); ++c)
        put_u64(out, std::bit_cast<std::uint64_t>(t.value(r, c)));
  }
  return out;
}

StudentModel StudentModel::deserialize(std::string_view data) {
  Reader in(data);
  auto magic = in.bytes(4);
  if (magic != std::string_view(kCheckpointMagic, 4)) fail(ErrorKind::Format, "not a model checkpoint (bad magic)");
  std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    fail(ErrorKind::UnsupportedVersion, "unsupported checkpoint version " + std::to_string(version));
  StudentModel m;
  m.config_.vocab_rows = in.u32();
  m.config_.d = in.u32();
  m.config_.layers = in.u32();
  m.config_.mlp_hidden = in.u32();
  m.config_.max_seq_len = in.u32();
  m.config_.byte_heads = in.u32();
  m.config_.byte_vocab = in.u32();
  std::uint32_t flags = in.u32();
  m.config_.zero_init_heads = (flags & 2u) != 0;
  m.config_.seed = in.u64();
  m.config_.validate();
  m.build_tensors((flags & 1u) != 0);
  for (auto& t : m.tensors_) {
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) t.value(r, c) = in.f64();
  }
  if (in.remaining() != 0) fail(ErrorKind::Format, "trailing bytes after checkpoint tensors");
  return m;
}

void StudentModel::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

StudentModel StudentModel::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

bool operator==(const StudentModel& a, const StudentModel& b) {
  if (!(a.config_ == b.config_) || a.has_byte_head_ != b.has_byte_head_ || a.tensors_.size() != b.tensors_.size())
    return false;
  for (std::size_t i = 0; i < a.tensors_.size(); ++i)
    if (a.tensors_[i].name != b.tensors_[i].name || a.tensors_[i].value != b.tensors_[i].value) return false;
  return true;
}

StudentLM::StudentLM(TokenizerPtr tokenizer, StudentModelPtr model)
    : LanguageModel(std::move(tokenizer)), model_(std::move(model)) {
  if (!model_) fail(ErrorKind::InvalidArgument, "StudentLM needs a model");
  if (model_->config().vocab_rows != vocab().size())
    fail(ErrorKind::Contract, "student model rows (" + std::to_string(model_->config().vocab_rows) +
                                  ") do not match vocabulary size (" + std::to_string(vocab().size()) + ")");
}

TokenDistribution StudentLM::compute(std::span<const TokenId> prefix) const {
  std::vector<TokenId> input;
  input.reserve(prefix.size() + 1);
  input.push_back(model_->bos_id());
  input.insert(input.end(), prefix.begin(), prefix.end());
  VectorXd p = softmax(model_->next_token_logits(input));
  TokenDistribution d;
  d.probs.assign(p.data(), p.data() + p.size());
  return d;
}

StudentConfig student_config_for(const Tokenizer& tokenizer, std::uint32_t d, std::uint64_t seed) {
  StudentConfig c;
  c.vocab_rows = static_cast<std::uint32_t>(tokenizer.vocab().size());
  c.d = d;
  c.mlp_hidden = 2 * d;
  c.seed = seed;
  return c;
}

}  // namespace bld
