#include <random>

#include "doctest.h"
#include "bld/distill.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace bld;

namespace {

StudentConfig small_config(const Tokenizer& tok, std::uint64_t seed, std::uint32_t d = 8) {
  StudentConfig c = student_config_for(tok, d, seed);
  c.max_seq_len = 16;
  c.byte_heads = 3;
  return c;
}

std::vector<TokenId> random_input(std::mt19937_64& rng, const StudentModel& m, std::size_t n) {
  std::vector<TokenId> in{m.bos_id()};
  while (in.size() < n) in.push_back(static_cast<TokenId>(rng() % (m.config().vocab_rows - 1)));
  return in;
}

}  // namespace

TEST_CASE("uniform model") {
  auto lm = testing::toy_uniform();
  auto d = lm->next_token_dist({});
  auto& v = lm->vocab();
  for (const char* t : {"a", "b", "ab"}) CHECK(d.probs[static_cast<std::size_t>(testing::id_of(lm->tokenizer(), t))] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(d.probs[static_cast<std::size_t>(v.eos_id())] == 0.0);
  CHECK(d.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.probs.size() == v.size());
  CHECK_THROWS_AS(lm->next_token_dist(std::vector<TokenId>{v.eos_id()}), Error);
  CHECK_THROWS_AS(lm->next_token_dist(std::vector<TokenId>{9999}), Error);
}

TEST_CASE("bigram model renormalizes its counts") {
  auto tok = testing::toy_tokenizer();
  const std::size_t n = tok->vocab().size();
  std::vector<std::vector<double>> counts(n, std::vector<double>(n, 0.0));
  TokenId a = testing::id_of(*tok, "a"), b = testing::id_of(*tok, "b"), eos = tok->vocab().eos_id();
  counts[n - 1][static_cast<std::size_t>(a)] = 3;  // start row
  counts[n - 1][static_cast<std::size_t>(b)] = 1;
  counts[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = 2;
  counts[static_cast<std::size_t>(a)][static_cast<std::size_t>(eos)] = 6;
  BigramLM lm(tok, counts);
  auto start = lm.next_token_dist({});
  CHECK(start.probs[static_cast<std::size_t>(a)] == doctest::Approx(0.75));
  CHECK(start.probs[static_cast<std::size_t>(b)] == doctest::Approx(0.25));
  auto after_a = lm.next_token_dist(std::vector<TokenId>{b, a});
  CHECK(after_a.probs[static_cast<std::size_t>(b)] == doctest::Approx(0.25));
  CHECK(after_a.probs[static_cast<std::size_t>(eos)] == doctest::Approx(0.75));

  BigramLM smoothed(tok, counts, 1.0);
  auto s = smoothed.next_token_dist({});
  CHECK(s.probs[static_cast<std::size_t>(a)] == doctest::Approx(4.0 / (4.0 + static_cast<double>(n))));
  CHECK(s.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bigram counting over samples") {
  auto tok = testing::toy_tokenizer();
  std::vector<ByteString> samples{to_bytes("ab"), to_bytes("aba")};
  auto counts = BigramLM::count(*tok, samples);
  const std::size_t start = tok->vocab().size() - 1;
  auto ab = static_cast<std::size_t>(testing::id_of(*tok, "ab"));
  auto a = static_cast<std::size_t>(testing::id_of(*tok, "a"));
  auto eos = static_cast<std::size_t>(tok->vocab().eos_id());
  CHECK(counts[start][ab] == 2);
  CHECK(counts[ab][eos] == 1);
  CHECK(counts[ab][a] == 1);
  CHECK(counts[a][eos] == 1);
}

TEST_CASE("random model is normalized and deterministic") {
  auto tok = testing::toy_tokenizer();
  RandomLM lm(tok, 42);
  RandomLM same(tok, 42);
  RandomLM other(tok, 43);
  std::vector<TokenId> prefix{0, 1, 2};
  auto d = lm.next_token_dist(prefix);
  CHECK(d.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.probs == same.next_token_dist(prefix).probs);
  CHECK(d.probs != other.next_token_dist(prefix).probs);
  CHECK(d.probs != lm.next_token_dist(std::vector<TokenId>{0, 1}).probs);
}

TEST_CASE("scripted model") {
  auto tok = testing::toy_tokenizer();
  TokenId ab = testing::id_of(*tok, "ab");
  ScriptedLM lm(tok, {ab});
  CHECK(lm.next_token_dist({}).probs[static_cast<std::size_t>(ab)] == 1.0);
  CHECK(lm.next_token_dist(std::vector<TokenId>{ab}).probs.back() == 1.0);
}

TEST_CASE("student forward shapes") {
  auto tok = testing::toy_tokenizer();
  StudentModel m(small_config(*tok, 1));
  auto pass = m.forward(std::vector<TokenId>{m.bos_id()});
  CHECK(pass.token_logits.rows() == 1);
  CHECK(pass.token_logits.cols() == static_cast<Eigen::Index>(tok->vocab().size()));
  CHECK(pass.byte_logits.rows() == 1);
  CHECK(pass.byte_logits.cols() == 3 * 260);
  CHECK(pass.byte_head_logits(0, 2, 260).size() == 260);

  StudentConfig ten = student_config_for(*tok, 8, 1);
  StudentModel m10(ten);
  CHECK(m10.forward(std::vector<TokenId>{m10.bos_id(), 0}).byte_logits.cols() == 10 * 260);
}

TEST_CASE("student input validation") {
  auto tok = testing::toy_tokenizer();
  StudentModel m(small_config(*tok, 1));
  CHECK_THROWS_AS(m.forward(std::vector<TokenId>{}), Error);
  std::vector<TokenId> long_input(17, 0);
  try {
    m.forward(long_input);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("16") != std::string::npos);
  }
  CHECK_THROWS_AS(m.forward(std::vector<TokenId>{static_cast<TokenId>(tok->vocab().size())}), Error);
}

TEST_CASE("student forward is causal") {
  auto tok = testing::toy_tokenizer();
  StudentModel m(small_config(*tok, 2));
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto in = random_input(rng, m, 8);
    auto changed = in;
    std::size_t cut = 1 + rng() % 7;
    for (std::size_t i = cut; i < changed.size(); ++i) changed[i] = static_cast<TokenId>(rng() % 257);
    auto p1 = m.forward(in), p2 = m.forward(changed);
    auto c = static_cast<Eigen::Index>(cut);
    CHECK(p1.token_logits.topRows(c) == p2.token_logits.topRows(c));
    CHECK(p1.byte_logits.topRows(c) == p2.byte_logits.topRows(c));
  }
}

TEST_CASE("zero-initialized heads give uniform softmax") {
  auto tok = testing::toy_tokenizer();
  auto c = small_config(*tok, 3);
  c.zero_init_heads = true;
  StudentModel m(c);
  auto pass = m.forward(std::vector<TokenId>{m.bos_id(), 0, 1});
  for (Eigen::Index r = 0; r < 3; ++r) {
    Eigen::VectorXd q = softmax(pass.token_logits.row(r).transpose());
    CHECK((q.array() - 1.0 / static_cast<double>(q.size())).abs().maxCoeff() < 1e-15);
    for (std::size_t h = 0; h < 3; ++h) {
      Eigen::VectorXd qb = softmax(pass.byte_head_logits(static_cast<std::size_t>(r), h, 260));
      CHECK((qb.array() - 1.0 / 260.0).abs().maxCoeff() < 1e-15);
    }
  }
}

TEST_CASE("student as a language model") {
  auto tok = testing::toy_tokenizer();
  auto m = std::make_shared<const StudentModel>(small_config(*tok, 4));
  StudentLM lm(tok, m);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    std::vector<TokenId> prefix;
    for (std::size_t k = 0; k < rng() % 6; ++k) prefix.push_back(static_cast<TokenId>(rng() % 257));
    auto d = lm.next_token_dist(prefix);
    CHECK(d.sum() == doctest::Approx(1.0).epsilon(1e-12));
    auto pass = m->forward(std::vector<TokenId>{m->bos_id()});
    for (std::size_t h = 0; h < 3; ++h)
      CHECK(softmax(pass.byte_head_logits(0, h, 260)).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("seeded initialization is deterministic") {
  auto tok = testing::toy_tokenizer();
  StudentModel a(small_config(*tok, 9)), b(small_config(*tok, 9)), c(small_config(*tok, 10));
  CHECK(a == b);
  CHECK_FALSE(a == c);
  std::vector<TokenId> in{a.bos_id(), 5, 6};
  CHECK(a.forward(in).token_logits == b.forward(in).token_logits);
}

TEST_CASE("backward matches finite differences for linear logit losses") {
  auto m = StudentModel(testing::gradcheck_config(5));
  std::mt19937_64 rng(9);
  auto in = random_input(rng, m, 6);
  auto pass = m.forward(in);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd wt = Eigen::MatrixXd::NullaryExpr(pass.token_logits.rows(), pass.token_logits.cols(), [&] { return n(rng); });
  Eigen::MatrixXd wb = Eigen::MatrixXd::NullaryExpr(pass.byte_logits.rows(), pass.byte_logits.cols(), [&] { return n(rng); });
  auto loss = [&] {
    auto p = m.forward(in);
    double s = (p.token_logits.array() * wt.array()).sum() + (p.byte_logits.array() * wb.array()).sum();
    return std::tanh(0.01 * s);
  };
  double s0 = (pass.token_logits.array() * wt.array()).sum() + (pass.byte_logits.array() * wb.array()).sum();
  double outer = 0.01 * (1.0 - std::tanh(0.01 * s0) * std::tanh(0.01 * s0));
  auto g = m.backward(pass, outer * wt, outer * wb);
  auto r = testing::finite_difference_check(m, loss, g);
  INFO("max relative error " << r.max_rel << ", max absolute error " << r.max_abs);
  CHECK(r.entries <= 5000);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("compute_gradients contracts") {
  auto m = StudentModel(testing::gradcheck_config(6));
  std::vector<std::vector<TokenId>> inputs{{m.bos_id(), 3, 4}, {m.bos_id(), 7}};
  SUBCASE("constant loss gives zero gradients") {
    LogitLossFn constant = [&](std::size_t, const ForwardPass& pass) {
      LossResult r;
      r.loss.total = 3.0;
      r.d_token = Eigen::MatrixXd::Zero(pass.token_logits.rows(), pass.token_logits.cols());
      r.d_byte = Eigen::MatrixXd::Zero(pass.byte_logits.rows(), pass.byte_logits.cols());
      return r;
    };
    for (const auto& g : compute_gradients(m, inputs, constant)) CHECK(g.isZero(0.0));
  }
  SUBCASE("doubling the loss doubles every gradient") {
    auto make = [&](double scale) {
      return [&, scale](std::size_t i, const ForwardPass& pass) {
        SupervisionTargets sup;
        sup.input = inputs[i];
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
          sup.token_targets.push_back(static_cast<TokenId>(k + 1));
          sup.token_lengths.push_back(1);
          sup.byte_targets.push_back({k + 1});
        }
        LossWeights w{scale, 0.0, scale};
        return bld_loss(pass, m.config(), sup, nullptr, w);
      };
    };
    auto g1 = compute_gradients(m, inputs, make(1.0));
    auto g2 = compute_gradients(m, inputs, make(2.0));
    for (std::size_t t = 0; t < g1.size(); ++t) CHECK((g2[t] - 2.0 * g1[t]).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + g1[t].cwiseAbs().maxCoeff()));
  }
  SUBCASE("non-finite loss names the batch index") {
    LogitLossFn bad = [&](std::size_t i, const ForwardPass& pass) {
      LossResult r;
      r.loss.total = i == 1 ? std::nan("") : 0.0;
      r.d_token = Eigen::MatrixXd::Zero(pass.token_logits.rows(), pass.token_logits.cols());
      return r;
    };
    try {
      compute_gradients(m, inputs, bad);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Numeric);
      CHECK(std::string(e.what()).find("batch index 1") != std::string::npos);
    }
  }
}

TEST_CASE("detaching the byte head") {
  auto tok = testing::toy_tokenizer();
  StudentModel m(small_config(*tok, 7));
  auto d = m.detach_byte_head();
  CHECK_FALSE(d.has_byte_head());
  CHECK(d.byte_head_indices() == std::pair<int, int>{-1, -1});
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    auto in = random_input(rng, m, 1 + rng() % 10);
    auto a = m.forward(in), b = d.forward(in);
    CHECK(a.token_logits == b.token_logits);
    CHECK(b.byte_logits.size() == 0);
  }
  CHECK(d.detach_byte_head() == d);
  CHECK(d.serialize().size() < m.serialize().size());
  CHECK(d.parameter_count() < m.parameter_count());
}

TEST_CASE("checkpoint round trip") {
  testing::TempDir dir;
  auto tok = testing::toy_tokenizer();
  StudentModel m(small_config(*tok, 8));
  m.save(dir / "m.bin");
  auto first = read_file(dir / "m.bin");
  CHECK(first.substr(0, 4) == "BLDM");
  auto back = StudentModel::load(dir / "m.bin");
  back.save(dir / "again.bin");
  CHECK(read_file(dir / "again.bin") == first);
  CHECK(StudentModel::deserialize(back.serialize()) == back);
  CHECK(back == m);

  auto bad = first;
  bad[0] = 'X';
  CHECK_THROWS_AS(StudentModel::deserialize(bad), Error);
  CHECK_THROWS_AS(StudentModel::deserialize(first.substr(0, first.size() - 3)), Error);
  auto detached = StudentModel::deserialize(m.detach_byte_head().serialize());
  CHECK_FALSE(detached.has_byte_head());
}
