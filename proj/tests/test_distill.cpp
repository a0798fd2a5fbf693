#include <random>

#include "doctest.h"
#include "bld/distill.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace bld;
using testing::id_of;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ByteDistribution random_dist(std::mt19937_64& rng, double zero_fraction = 0.3) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, kByteDistSize> p{};
  double s = 0.0;
  for (auto& x : p) {
    x = u(rng) < zero_fraction ? 0.0 : u(rng);
    s += x;
  }
  ByteDistribution d;
  for (std::size_t i = 0; i < kByteDistSize; ++i) d.logp[i] = p[i] > 0.0 ? std::log(p[i] / s) : -kInf;
  return d;
}

/// Teacher targets with random distributions in every unmasked slot.
TeacherByteTargets random_teacher(std::mt19937_64& rng, const SupervisionTargets& sup) {
  TeacherByteTargets t;
  for (std::size_t l = 0; l < sup.length(); ++l) {
    std::vector<ByteDistribution> slots;
    for (std::size_t j = 0; j < sup.byte_targets[l].size(); ++j) slots.push_back(random_dist(rng));
    t.slots.push_back(slots);
    t.token_lengths.push_back(sup.token_lengths[l]);
  }
  return t;
}

/// Scalar re-implementation of the per-sequence loss straight from its definition.
LossBreakdown scalar_loss(const ForwardPass& pass, std::size_t byte_vocab, const SupervisionTargets& sup,
                          const TeacherByteTargets* teacher, const LossWeights& w) {
  LossBreakdown r;
  const double n = static_cast<double>(sup.length());
  for (std::size_t l = 0; l < sup.length(); ++l) {
    const auto row = static_cast<Eigen::Index>(l);
    double z = 0.0;
    for (Eigen::Index c = 0; c < pass.token_logits.cols(); ++c) z += std::exp(pass.token_logits(row, c));
    r.token_ce += -(pass.token_logits(row, sup.token_targets[l]) - std::log(z)) / n;
    for (std::size_t j = 0; j < sup.byte_targets[l].size(); ++j) {
      // Slots 0..255 are bytes and 257 is end-of-sequence; begin, pad and unknown are left out.
      std::vector<double> logit;
      for (std::size_t s = 0; s < 256; ++s) logit.push_back(pass.byte_logits(row, static_cast<Eigen::Index>(j * byte_vocab + s)));
      logit.push_back(pass.byte_logits(row, static_cast<Eigen::Index>(j * byte_vocab + 257)));
      double zb = 0.0;
      for (double x : logit) zb += std::exp(x);
      std::size_t truth = sup.byte_targets[l][j] == 257 ? 256 : sup.byte_targets[l][j];
      const double scale = 1.0 / (n * static_cast<double>(sup.token_lengths[l]));
      r.byte_ce += -(logit[truth] - std::log(zb)) * scale;
      if (teacher) {
        double kl = 0.0;
        for (std::size_t s = 0; s < 257; ++s) {
          double p = std::exp(teacher->slots[l][j].logp[s]);
          if (p > 0.0) kl += p * (std::log(p) - (logit[s] - std::log(zb)));
        }
        r.byte_kl += kl * scale;
      }
    }
  }
  r.total = w.lambda_token * r.token_ce + w.lambda_byte * r.byte_ce + w.lambda_kl * r.byte_kl;
  return r;
}

TokenizerPtr mixed_tokenizer() {
  std::vector<ByteString> tokens{to_bytes("a"), to_bytes("b"), to_bytes("ab"), to_bytes("abb")};
  MergeRules merges{{to_bytes("a"), to_bytes("b")}, {to_bytes("ab"), to_bytes("b")}};
  return std::make_shared<const Tokenizer>(Tokenizer::build(tokens, merges));
}

StudentConfig student_for(const Tokenizer& tok, std::uint64_t seed, std::uint32_t heads = 2) {
  StudentConfig c = student_config_for(tok, 6, seed);
  c.byte_heads = heads;
  c.max_seq_len = 32;
  return c;
}

/// Student whose restricted byte distribution on head 0 equals its token distribution (char vocabulary).
void tie_byte_head_to_token_head(StudentModel& m) {
  auto [tw, tb] = m.token_head_indices();
  auto [bw, bb] = m.byte_head_indices();
  auto& t = m.tensors();
  for (Eigen::Index v = 0; v < 256; ++v) {
    t[static_cast<std::size_t>(bw)].value.col(v) = t[static_cast<std::size_t>(tw)].value.col(v);
    t[static_cast<std::size_t>(bb)].value(0, v) = t[static_cast<std::size_t>(tb)].value(0, v);
  }
  t[static_cast<std::size_t>(bw)].value.col(257) = t[static_cast<std::size_t>(tw)].value.col(256);
  t[static_cast<std::size_t>(bb)].value(0, 257) = t[static_cast<std::size_t>(tb)].value(0, 256);
}

}  // namespace

TEST_CASE("supervision targets") {
  auto tok = mixed_tokenizer();
  auto sup = make_supervision(*tok, to_bytes("abbab"), 2);
  const auto& v = tok->vocab();
  REQUIRE(sup.length() == 3);
  CHECK(sup.input == std::vector<TokenId>{v.eos_id(), id_of(*tok, "abb"), id_of(*tok, "ab")});
  CHECK(sup.token_targets == std::vector<TokenId>{id_of(*tok, "abb"), id_of(*tok, "ab"), v.eos_id()});
  CHECK(sup.token_lengths == std::vector<std::size_t>{3, 2, 1});
  CHECK(sup.byte_targets[0] == std::vector<std::size_t>{'a', 'b'});
  CHECK(sup.byte_targets[1] == std::vector<std::size_t>{'a', 'b'});
  CHECK(sup.byte_targets[2] == std::vector<std::size_t>{ByteSlots::kEos});
}

TEST_CASE("aligning the teacher stream") {
  SUBCASE("char student re-indexes one to one") {
    auto tok = testing::char_tokenizer();
    std::mt19937_64 rng(1);
    std::vector<ByteDistribution> stream;
    for (int i = 0; i < 6; ++i) stream.push_back(random_dist(rng));
    auto t = align_byte_targets(stream, *tok, to_bytes("hello"), 10);
    REQUIRE(t.slots.size() == 6);
    for (std::size_t l = 0; l < 6; ++l) {
      REQUIRE(t.slots[l].size() == 1);
      CHECK(t.slots[l][0].logp == stream[l].logp);
      CHECK_FALSE(t.masked(l, 0));
      CHECK(t.masked(l, 1));
    }
  }
  SUBCASE("slots past the head count are masked") {
    std::vector<ByteString> tokens{to_bytes("abcdefghijkl")};
    auto tok = std::make_shared<const Tokenizer>(Tokenizer::build(tokens));
    auto lm = std::make_shared<UniformLM>(tok, std::vector<TokenId>{0}, 0.5);
    auto sup = make_supervision(*tok, to_bytes("abcdefghijkl"), 10);
    // Without merges the word splits into single bytes.
    CHECK(sup.length() == 13);
    MergeRules chain;
    std::vector<ByteString> all;
    std::string w = "abcdefghijkl";
    for (std::size_t i = 1; i <= w.size(); ++i) all.push_back(to_bytes(w.substr(0, i)));
    for (std::size_t i = 2; i <= w.size(); ++i) chain.push_back({to_bytes(w.substr(0, i - 1)), to_bytes(w.substr(i - 1, 1))});
    auto student = Tokenizer::build(all, chain);
    auto t = build_byte_targets(lm, student, to_bytes(w), {10, 0.0, 256}, 10);
    REQUIRE(t.slots.size() == 2);
    CHECK(t.token_lengths[0] == 12);
    CHECK(t.slots[0].size() == 10);
    CHECK(t.masked(0, 10));
    CHECK(t.masked(0, 11));
    CHECK(make_supervision(student, to_bytes(w), 10).byte_targets[0].size() == 10);
  }
  SUBCASE("toy targets match exact conditionals") {
    auto lm = testing::toy_uniform();
    auto tok = lm->tokenizer_ptr();
    auto b = to_bytes("abaab");
    auto t = build_byte_targets(lm, *tok, b, {kUnboundedBeam, 0.0, 256}, 10);
    auto exact = exact_byte_stream(*lm, b);
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < t.slots.size(); ++l) {
      for (std::size_t j = 0; j < t.slots[l].size(); ++j)
        CHECK(testing::max_abs_diff(t.slots[l][j], exact[offset + j]) <= 1e-9);
      offset += t.token_lengths[l];
    }
    CHECK(testing::max_abs_diff(t.slots.back()[0], exact.back()) <= 1e-9);
  }
  SUBCASE("stream length is checked") {
    std::vector<ByteDistribution> stream(2);
    CHECK_THROWS_AS(align_byte_targets(stream, *testing::char_tokenizer(), to_bytes("abc"), 10), Error);
  }
  SUBCASE("beam failures carry the byte position") {
    auto lm = testing::toy_uniform();
    try {
      build_byte_targets(lm, lm->tokenizer(), to_bytes("abz"), {10, 0.0, 256}, 10);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("position 2") != std::string::npos);
    }
  }
}

TEST_CASE("loss matches a scalar re-implementation") {
  std::mt19937_64 rng(3);
  auto tok = mixed_tokenizer();
  for (int trial = 0; trial < 10; ++trial) {
    StudentModel m(student_for(*tok, rng()));
    auto b = testing::random_text(rng, "abx", 1 + rng() % 12);
    auto sup = make_supervision(*tok, b, 2);
    auto teacher = random_teacher(rng, sup);
    LossWeights w{0.7, 0.3, 1.3};
    auto pass = m.forward(sup.input);
    auto got = bld_loss(pass, m.config(), sup, &teacher, w).loss;
    auto want = scalar_loss(pass, 260, sup, &teacher, w);
    CHECK(std::abs(got.token_ce - want.token_ce) <= 1e-10);
    CHECK(std::abs(got.byte_ce - want.byte_ce) <= 1e-10);
    CHECK(std::abs(got.byte_kl - want.byte_kl) <= 1e-10);
    CHECK(std::abs(got.total - want.total) <= 1e-10);
    CHECK(std::abs(got.total - (w.lambda_token * got.token_ce + w.lambda_byte * got.byte_ce + w.lambda_kl * got.byte_kl)) <= 1e-9);
    CHECK(got.byte_kl >= 0.0);
  }
}

TEST_CASE("student byte softmax equal to the teacher gives zero KL") {
  auto tok = mixed_tokenizer();
  StudentModel m(student_for(*tok, 4));
  auto sup = make_supervision(*tok, to_bytes("abbabxab"), 2);
  auto pass = m.forward(sup.input);
  TeacherByteTargets t;
  for (std::size_t l = 0; l < sup.length(); ++l) {
    std::vector<ByteDistribution> slots;
    for (std::size_t j = 0; j < sup.byte_targets[l].size(); ++j) {
      Eigen::VectorXd logits = pass.byte_head_logits(l, j, 260);
      Eigen::VectorXd restricted(257);
      restricted.head(256) = logits.head(256);
      restricted(256) = logits(257);
      Eigen::VectorXd q = softmax(restricted);
      ByteDistribution d;
      for (std::size_t s = 0; s < 257; ++s) d.logp[s] = std::log(q(static_cast<Eigen::Index>(s)));
      slots.push_back(d);
    }
    t.slots.push_back(slots);
    t.token_lengths.push_back(sup.token_lengths[l]);
  }
  auto r = bld_loss(pass, m.config(), sup, &t, LossWeights{});
  CHECK(std::abs(r.loss.byte_kl) <= 1e-9);
}

TEST_CASE("all byte slots masked leaves the token loss") {
  auto tok = mixed_tokenizer();
  StudentModel m(student_for(*tok, 5));
  auto sup = make_supervision(*tok, to_bytes("abab"), 2);
  for (auto& s : sup.byte_targets) s.clear();
  TeacherByteTargets t;
  t.slots.resize(sup.length());
  t.token_lengths = sup.token_lengths;
  auto r = bld_loss(m, sup, &t, LossWeights{});
  CHECK(r.byte_ce == 0.0);
  CHECK(r.byte_kl == 0.0);
  CHECK(r.total == r.token_ce);
}

TEST_CASE("loss errors") {
  auto tok = mixed_tokenizer();
  StudentModel m(student_for(*tok, 6));
  auto sup = make_supervision(*tok, to_bytes("abab"), 2);
  std::mt19937_64 rng(2);
  SUBCASE("inconsistent mask") {
    auto t = random_teacher(rng, sup);
    t.slots[0].pop_back();
    CHECK_THROWS_AS(bld_loss(m, sup, &t, LossWeights{}), Error);
  }
  SUBCASE("non-finite term names its location") {
    auto t = random_teacher(rng, sup);
    t.slots[1][1].logp[7] = std::nan("");
    try {
      bld_loss(m, sup, &t, LossWeights{});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Numeric);
      CHECK(std::string(e.what()).find("(position 1, slot 1)") != std::string::npos);
    }
  }
  SUBCASE("negative weights") { CHECK_THROWS_AS(bld_loss(m, sup, nullptr, LossWeights{1.0, -0.1, 1.0}), Error); }
}

TEST_CASE("loss gradients match finite differences") {
  auto chars = testing::char_tokenizer();
  std::mt19937_64 rng(17);
  StudentModel m(testing::gradcheck_config(3));
  auto b = to_bytes("abbxa");
  auto sup = make_supervision(*chars, b, 2);
  // Give one position a three-byte target so slot masking is exercised.
  sup.token_lengths[1] = 3;
  sup.byte_targets[1].push_back('x');
  auto teacher = random_teacher(rng, sup);
  struct Variant {
    const char* name;
    LossWeights w;
    bool with_teacher;
  };
  for (const auto& v : {Variant{"full", {1.0, 0.1, 1.0}, true}, Variant{"token only", {1.0, 0.0, 0.0}, false},
                        Variant{"byte only", {0.0, 0.0, 1.0}, false}, Variant{"kl heavy", {0.5, 2.0, 0.0}, true}}) {
    const TeacherByteTargets* t = v.with_teacher ? &teacher : nullptr;
    std::vector<std::vector<TokenId>> inputs{sup.input};
    auto g = compute_gradients(m, inputs, [&](std::size_t, const ForwardPass& pass) {
      return bld_loss(pass, m.config(), sup, t, v.w);
    });
    auto r = testing::finite_difference_check(m, [&] { return bld_loss(m, sup, t, v.w).total; }, g);
    INFO(v.name << ": max relative error " << r.max_rel << ", max absolute error " << r.max_abs);
    CHECK(r.entries <= 5000);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("standard KD") {
  auto tok = testing::char_tokenizer();
  SUBCASE("identical teacher and student") {
    auto model = std::make_shared<const StudentModel>(student_for(*tok, 8));
    StudentLM student(tok, model);
    std::vector<ByteString> batch{to_bytes("hi"), to_bytes("there")};
    auto r = standard_kd_loss(student, student, batch);
    CHECK(std::abs(r.token_kl) <= 1e-12);
    double ce = 0.0;
    for (const auto& s : batch) ce += bld_loss(*model, make_supervision(*tok, s, 0), nullptr, LossWeights{1.0, 0.0, 0.0}).token_ce;
    CHECK(r.token_ce == doctest::Approx(ce).epsilon(1e-12));
  }
  SUBCASE("uniform teacher and uniform student") {
    auto c = student_for(*tok, 4);
    c.zero_init_heads = true;
    StudentLM student(tok, std::make_shared<const StudentModel>(c));
    UniformLM teacher(tok, {}, 1.0 / 257.0);
    std::vector<ByteString> batch{to_bytes("abc")};
    auto r = standard_kd_loss(teacher, student, batch);
    CHECK(std::abs(r.token_kl) <= 1e-12);
    CHECK(r.token_ce == doctest::Approx(std::log(257.0)).epsilon(1e-12));
  }
  SUBCASE("random pair against a scalar re-implementation") {
    auto tm = std::make_shared<const StudentModel>(student_for(*tok, 1));
    auto sm = std::make_shared<const StudentModel>(student_for(*tok, 2));
    StudentLM teacher(tok, tm), student(tok, sm);
    std::vector<ByteString> batch{to_bytes("kd"), to_bytes("loss!")};
    auto r = standard_kd_loss(teacher, student, batch);
    double ce = 0.0, kl = 0.0;
    for (const auto& s : batch) {
      std::vector<TokenId> ids;
      for (Byte v : s) ids.push_back(tok->vocab().byte_token(v));
      ids.push_back(tok->vocab().eos_id());
      const double n = static_cast<double>(ids.size());
      for (std::size_t l = 0; l < ids.size(); ++l) {
        std::vector<TokenId> prefix(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(l));
        auto p = teacher.next_token_dist(prefix).probs;
        auto q = student.next_token_dist(prefix).probs;
        ce += -std::log(q[static_cast<std::size_t>(ids[l])]) / n;
        for (std::size_t k = 0; k < p.size(); ++k) kl += p[k] * std::log(p[k] / q[k]) / n;
      }
    }
    CHECK(std::abs(r.token_ce - ce) <= 1e-10);
    CHECK(std::abs(r.token_kl - kl) <= 1e-10);
    CHECK(r.total == doctest::Approx(ce + kl).epsilon(1e-12));
  }
  SUBCASE("vocabulary mismatch") {
    auto toy = testing::toy_tokenizer();
    StudentLM student(tok, std::make_shared<const StudentModel>(student_for(*tok, 1)));
    UniformLM teacher(toy);
    try {
      standard_kd_loss(teacher, student, std::vector<ByteString>{to_bytes("a")});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Contract);
    }
  }
  SUBCASE("gradient matches finite differences") {
    auto teacher_model = std::make_shared<const StudentModel>(testing::gradcheck_config(1));
    StudentLM teacher(tok, teacher_model);
    StudentModel m(testing::gradcheck_config(2));
    std::vector<ByteString> batch{to_bytes("ab"), to_bytes("c")};
    auto view = [&] { return StudentLM(tok, std::make_shared<const StudentModel>(m)); };
    GradientSet g;
    standard_kd_loss(teacher, view(), batch, &g);
    auto r = testing::finite_difference_check(m, [&] { return standard_kd_loss(teacher, view(), batch).total; }, g);
    INFO("max relative error " << r.max_rel);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("byte KL equals token KL for a shared char vocabulary") {
  auto tok = testing::char_tokenizer();
  auto teacher_model = std::make_shared<const StudentModel>(student_for(*tok, 11, 1));
  auto teacher = std::make_shared<StudentLM>(tok, teacher_model);
  StudentModel m(student_for(*tok, 12, 1));
  tie_byte_head_to_token_head(m);
  StudentLM student(tok, std::make_shared<const StudentModel>(m));
  auto b = to_bytes("bytes");
  auto sup = make_supervision(*tok, b, 1);
  auto targets = build_byte_targets(teacher, *tok, b, {kUnboundedBeam, 0.0, 256}, 1);
  auto byte = bld_loss(m, sup, &targets, LossWeights{});
  auto token = standard_kd_loss(*teacher, student, std::vector<ByteString>{b});
  CHECK(std::abs(byte.byte_kl - token.token_kl) <= 1e-9);
}

TEST_CASE("naive byte-chain token probabilities") {
  SUBCASE("toy teacher") {
    auto lm = testing::toy_uniform();
    ExactByteSource src(lm);
    auto r = naive_ctd_token_probs(src, lm->vocab(), ByteString{});
    auto ab = static_cast<std::size_t>(id_of(lm->tokenizer(), "ab"));
    auto a = static_cast<std::size_t>(id_of(lm->tokenizer(), "a"));
    CHECK(r.probs[ab] == doctest::Approx(4.0 / 9).epsilon(1e-12));
    CHECK(r.probs[ab] == doctest::Approx(std::exp(exact_prefix_logprob(*lm, to_bytes("ab")))).epsilon(1e-12));
    CHECK(r.probs[a] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(r.sum > 1.0);
    CHECK(r.byte_queries > 0);
  }
  SUBCASE("char student reproduces the teacher conditionals") {
    std::mt19937_64 rng(4);
    auto teacher_tok = testing::random_chain_tokenizer(rng, 20, "abc", 3);
    auto lm = std::make_shared<RandomLM>(teacher_tok, 3);
    ExactByteSource src(lm);
    auto chars = testing::char_tokenizer();
    auto ctx = to_bytes("ab");
    auto r = naive_ctd_token_probs(src, chars->vocab(), ctx);
    auto d = exact_next_byte_dist(*lm, ctx);
    for (std::size_t v = 0; v < 256; ++v) CHECK(std::abs(r.probs[chars->vocab().byte_token(static_cast<Byte>(v))] - d.prob(v)) <= 1e-12);
    CHECK(std::abs(r.probs.back() - d.eos_prob()) <= 1e-12);
    CHECK(r.sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("missing conditionals") {
    TableByteSource table;
    try {
      naive_ctd_token_probs(table, testing::toy_tokenizer()->vocab(), to_bytes("q"));
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Coverage);
    }
  }
  SUBCASE("beam source agrees with the exact source when unpruned") {
    auto lm = testing::toy_uniform();
    ExactByteSource exact(lm);
    BeamByteSource beam(lm, {kUnboundedBeam, 0.0, 256});
    auto e = naive_ctd_token_probs(exact, lm->vocab(), to_bytes("ab"));
    auto b = naive_ctd_token_probs(beam, lm->vocab(), to_bytes("ab"));
    for (std::size_t i = 0; i < e.probs.size(); ++i) CHECK(std::abs(e.probs[i] - b.probs[i]) <= 1e-9);
  }
}

TEST_CASE("vocabulary transfer initialization") {
  auto src_tok = testing::char_tokenizer();
  auto tgt_tok = testing::toy_tokenizer();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd src = Eigen::MatrixXd::NullaryExpr(257, 2, [&] { return n(rng); });
  src.row('a') << 1.0, 0.0;
  src.row('b') << 0.0, 1.0;
  auto out = fvt_init(src, *src_tok, tgt_tok->vocab(), 1);
  REQUIRE(out.rows() == 258);
  auto ab = id_of(*tgt_tok, "ab");
  CHECK(out(ab, 0) == 0.5);
  CHECK(out(ab, 1) == 0.5);
  for (TokenId t = 0; static_cast<std::size_t>(t) < tgt_tok->vocab().content_size(); ++t) {
    if (t == ab) continue;
    auto s = *src_tok->vocab().find(tgt_tok->vocab().bytes(t));
    CHECK(out.row(t) == src.row(s));
  }
  CHECK(out.row(257) == src.row(256));
  CHECK_THROWS_AS(fvt_init(Eigen::MatrixXd(0, 2), *src_tok, tgt_tok->vocab(), 1), Error);
}

TEST_CASE("undecomposable tokens follow the source statistics") {
  auto src_tok = testing::toy_tokenizer();
  // 10k two-byte tokens over bytes the source only covers with injected tokens.
  std::vector<ByteString> tokens;
  for (int x = 0; x < 100; ++x)
    for (int y = 0; y < 100; ++y) tokens.push_back(ByteString{static_cast<Byte>(0x80 + x), static_cast<Byte>(0x80 + y)});
  auto tgt = Vocabulary::build(tokens);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd src(258, 3);
  for (Eigen::Index r = 0; r < src.rows(); ++r) src.row(r) << 2.0 + n(rng), -1.0 + 0.5 * n(rng), 3.0 * n(rng);
  auto out = fvt_init(src, *src_tok, tgt, 77);
  CHECK(out == fvt_init(src, *src_tok, tgt, 77));
  CHECK_FALSE(out == fvt_init(src, *src_tok, tgt, 78));
  const auto content = src.topRows(257);
  const double count = 10000.0;
  for (Eigen::Index c = 0; c < 3; ++c) {
    double mu = content.col(c).mean();
    double sd = std::sqrt((content.col(c).array() - mu).square().mean());
    auto sample = out.col(c).head(10000);
    double smu = sample.mean();
    double ssd = std::sqrt((sample.array() - smu).square().sum() / (count - 1.0));
    CHECK(std::abs(smu - mu) <= 3.0 * sd / std::sqrt(count));
    CHECK(std::abs(ssd - sd) <= 3.0 * sd / std::sqrt(2.0 * count));
  }
}

TEST_CASE("vocabulary transfer of a whole student") {
  auto src_tok = testing::char_tokenizer();
  auto tgt_tok = testing::toy_tokenizer();
  StudentModel src(student_for(*src_tok, 3));
  auto out = fvt_transfer(src, *src_tok, *tgt_tok, 5);
  CHECK(out.config().vocab_rows == 258);
  for (const auto& t : src.tensors()) {
    if (t.name == "embed" || t.name.rfind("token_head", 0) == 0) continue;
    CHECK(out.tensors()[static_cast<std::size_t>(out.tensor_index(t.name))].value == t.value);
  }
  auto [sw, sb] = src.token_head_indices();
  auto [dw, db] = out.token_head_indices();
  auto z = static_cast<Eigen::Index>(id_of(*tgt_tok, "z"));
  CHECK(out.tensors()[static_cast<std::size_t>(dw)].value.col(z) == src.tensors()[static_cast<std::size_t>(sw)].value.col('z'));
  CHECK(out.tensors()[static_cast<std::size_t>(db)].value(0, z) == src.tensors()[static_cast<std::size_t>(sb)].value(0, 'z'));
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.lr = 1.0;
  c.steps = 110;
  c.warmup_steps = 10;
  c.min_lr_ratio = 0.1;
  CHECK(scheduled_lr(c, 0) == doctest::Approx(0.1));
  CHECK(scheduled_lr(c, 9) == doctest::Approx(1.0));
  CHECK(scheduled_lr(c, 10) == doctest::Approx(1.0));
  CHECK(scheduled_lr(c, 109) == doctest::Approx(0.1));
  CHECK(scheduled_lr(c, 59) == doctest::Approx(0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * 49.0 / 99.0))));
  for (std::size_t s = 10; s + 1 < 110; ++s) CHECK(scheduled_lr(c, s + 1) <= scheduled_lr(c, s));
}

TEST_CASE("training loop") {
  auto tok = mixed_tokenizer();
  std::vector<ByteString> corpus{to_bytes("abab"), to_bytes("abb"), to_bytes("ba"), to_bytes("aabba"), to_bytes("b")};
  auto teacher_lm = std::make_shared<RandomLM>(tok, 3, std::vector<TokenId>{0, 1, 2, 3}, 0.2);
  OnTheFlyTargets teacher(teacher_lm, tok, {8, 1e-3, 256}, 2);
  TrainConfig cfg;
  cfg.steps = 12;
  cfg.batch_size = 3;
  cfg.lr = 1e-2;
  cfg.warmup_steps = 3;
  cfg.seed = 4;

  SUBCASE("zero steps leave the student unchanged") {
    StudentModel m(student_for(*tok, 1));
    auto before = m;
    cfg.steps = 0;
    CHECK(train(m, *tok, corpus, &teacher, cfg).empty());
    CHECK(m == before);
  }
  SUBCASE("runs are deterministic, with or without prefetching") {
    StudentModel a(student_for(*tok, 1)), b(student_for(*tok, 1));
    auto ta = train(a, *tok, corpus, &teacher, cfg);
    cfg.prefetch = 2;
    auto tb = train(b, *tok, corpus, &teacher, cfg);
    CHECK(ta == tb);
    CHECK(a == b);
    REQUIRE(ta.size() == 12);
    CHECK(ta[0].lr == doctest::Approx(cfg.lr / 3));
    StudentModel fresh(student_for(*tok, 1));
    CHECK(evaluate(a, *tok, corpus, &teacher, cfg.weights).total < evaluate(fresh, *tok, corpus, &teacher, cfg.weights).total);
  }
  SUBCASE("zero byte weights reduce to token SFT") {
    cfg.weights = {1.0, 0.0, 0.0};
    StudentModel a(student_for(*tok, 1)), b(student_for(*tok, 1));
    auto ta = train(a, *tok, corpus, &teacher, cfg);
    auto tb = train(b, *tok, corpus, nullptr, cfg);
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) {
      CHECK(ta[i].total == tb[i].total);
      CHECK(ta[i].token_ce == tb[i].token_ce);
      CHECK(ta[i].byte_ce == tb[i].byte_ce);
      CHECK(tb[i].byte_kl == 0.0);
    }
    CHECK(a == b);
  }
  SUBCASE("frozen and LoRA-listed tensors") {
    StudentModel m(student_for(*tok, 1));
    auto before = m;
    cfg.lora = true;
    cfg.lora_targets = {"wq", "wv"};
    train(m, *tok, corpus, &teacher, cfg);
    for (std::size_t i = 0; i < m.tensors().size(); ++i) {
      const auto& name = m.tensors()[i].name;
      bool listed = name.ends_with(".wq") || name.ends_with(".wv");
      CHECK((m.tensors()[i].value == before.tensors()[i].value) == !listed);
    }
  }
  SUBCASE("byte-head pretraining touches only the byte head") {
    StudentModel m(student_for(*tok, 1));
    auto before = m;
    cfg.pretrain_byte_head = true;
    cfg.pretrain_steps = cfg.steps;
    train(m, *tok, corpus, &teacher, cfg);
    for (std::size_t i = 0; i < m.tensors().size(); ++i)
      CHECK((m.tensors()[i].value == before.tensors()[i].value) == (m.tensors()[i].name.rfind("byte_head", 0) != 0));
  }
  SUBCASE("divergence reports the step") {
    StudentModel m(student_for(*tok, 1));
    cfg.lr = 1e200;
    cfg.warmup_steps = 0;
    cfg.grad_clip = 0.0;
    try {
      train(m, *tok, corpus, &teacher, cfg);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Numeric);
      CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
  }
  SUBCASE("invalid configurations") {
    StudentModel m(student_for(*tok, 1));
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(m, *tok, corpus, &teacher, cfg), Error);
    cfg.batch_size = 2;
    cfg.beta2 = 1.0;
    CHECK_THROWS_AS(train(m, *tok, corpus, &teacher, cfg), Error);
    cfg.beta2 = 0.95;
    CHECK_THROWS_AS(train(m, *testing::toy_tokenizer(), corpus, nullptr, cfg), Error);
  }
}

TEST_CASE("metrics records round trip") {
  std::vector<MetricRecord> trace{{0, 1.5, 2.25, 0.125, 3.0, 1e-5}, {1, 1.0, 2.0, 0.0, 2.5, 2e-5}};
  auto text = serialize_metrics(trace);
  CHECK(parse_metrics(text) == trace);
  CHECK_THROWS_AS(parse_metrics("{\"step\": 1}\n"), Error);
}

TEST_CASE("byte-only SFT") {
  auto tok = mixed_tokenizer();
  std::vector<ByteString> train_set{to_bytes("abab"), to_bytes("abb"), to_bytes("ba"), to_bytes("abba")};
  std::vector<ByteString> val{to_bytes("ab"), to_bytes("bab")};
  StudentModel m(student_for(*tok, 2));
  auto before = m;
  SftConfig cfg;
  cfg.epochs = 3;
  cfg.train.batch_size = 2;
  cfg.train.lr = 1e-2;
  cfg.train.warmup_steps = 1;
  auto records = byte_only_sft(m, *tok, train_set, val, cfg);
  REQUIRE(records.size() == 4);
  for (std::size_t e = 0; e < records.size(); ++e) CHECK(records[e].epoch == e);
  CHECK(records[3].train_byte_ce < records[0].train_byte_ce);
  auto [tw, tb] = m.token_head_indices();
  CHECK(m.tensors()[static_cast<std::size_t>(tw)].value == before.tensors()[static_cast<std::size_t>(tw)].value);
  CHECK(m.tensors()[static_cast<std::size_t>(tb)].value == before.tensors()[static_cast<std::size_t>(tb)].value);
  CHECK_FALSE(m == before);
  auto text = serialize_sft(records);
  CHECK(serialize_sft(parse_sft(text)) == text);

  auto detached = m.detach_byte_head();
  try {
    byte_only_sft(detached, *tok, train_set, val, cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Contract);
  }
}
