#include <map>
#include <random>

#include "doctest.h"
#include "bld/beam.hpp"
#include "support.hpp"

using namespace bld;
using testing::id_of;

namespace {

/// Next-token distributions looked up by prefix; unlisted prefixes stop.
class TableLM final : public LanguageModel {
 public:
  TableLM(TokenizerPtr tok, std::map<std::vector<TokenId>, std::map<TokenId, double>> table)
      : LanguageModel(std::move(tok)), table_(std::move(table)) {}

 protected:
  TokenDistribution compute(std::span<const TokenId> prefix) const override {
    TokenDistribution d;
    d.probs.assign(vocab().size(), 0.0);
    auto it = table_.find(std::vector<TokenId>(prefix.begin(), prefix.end()));
    if (it == table_.end()) {
      d.probs.back() = 1.0;
      return d;
    }
    double rest = 1.0;
    for (auto [t, p] : it->second) {
      d.probs[static_cast<std::size_t>(t)] = p;
      rest -= p;
    }
    d.probs.back() += std::max(0.0, rest);
    return d;
  }

 private:
  std::map<std::vector<TokenId>, std::map<TokenId, double>> table_;
};

TokenizerPtr abc_tokenizer() {
  std::vector<ByteString> tokens{to_bytes("a"), to_bytes("b"), to_bytes("c"), to_bytes("ab"), to_bytes("bc")};
  MergeRules merges{{to_bytes("a"), to_bytes("b")}, {to_bytes("b"), to_bytes("c")}};
  return std::make_shared<const Tokenizer>(Tokenizer::build(tokens, merges));
}

/// After "ab": [ab] has weight p_ab, [a, b] has p_a * p_b, and [a] + in-flight "b" of "bc" has p_a * p_bc.
LanguageModelPtr weighted_model(double p_ab, double p_a, double p_b, double p_bc) {
  auto tok = abc_tokenizer();
  TokenId a = id_of(*tok, "a"), b = id_of(*tok, "b"), ab = id_of(*tok, "ab"), bc = id_of(*tok, "bc");
  std::map<std::vector<TokenId>, std::map<TokenId, double>> table;
  table[{}] = {{ab, p_ab}, {a, p_a}};
  table[{a}] = {{b, p_b}, {bc, p_bc}};
  return std::make_shared<TableLM>(tok, table);
}

std::vector<double> weights_of(const BeamLattice& lat) {
  std::vector<double> w;
  for (const auto& h : lat.hypotheses()) w.push_back(std::exp(h.log_weight));
  std::sort(w.rbegin(), w.rend());
  return w;
}

}  // namespace

TEST_CASE("beam_init") {
  auto lm = testing::toy_uniform();
  auto lat = beam_init(lm, 10, 0.01);
  REQUIRE(lat.hypotheses().size() == 1);
  CHECK(lat.hypotheses()[0].log_weight == 0.0);
  CHECK(lat.hypotheses()[0].completed.empty());
  CHECK(lat.consumed().empty());
  CHECK(beam_init(lm, 10, 0.01) == lat);
  for (auto [k, eps] : std::vector<std::pair<std::size_t, double>>{{0, 0.01}, {1, -0.1}, {1, 1.0}}) {
    try {
      beam_init(lm, k, eps);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
    }
  }
}

TEST_CASE("toy lattice after one byte") {
  auto lm = testing::toy_uniform();
  auto tok = lm->tokenizer_ptr();
  auto lat = advance(beam_init(lm, 10, 1e-6), 'a');
  REQUIRE(lat.hypotheses().size() == 2);
  bool saw_done = false, saw_partial = false;
  for (const auto& h : lat.hypotheses()) {
    CHECK(std::exp(h.log_weight) == doctest::Approx(1.0 / 3).epsilon(1e-12));
    if (h.boundary()) {
      saw_done = h.completed == std::vector<TokenId>{id_of(*tok, "a")};
    } else {
      saw_partial = h.completed.empty() && to_string(h.partial) == "a";
    }
  }
  CHECK(saw_done);
  CHECK(saw_partial);
  auto d = lat.logp_next();
  CHECK(d.prob('a') == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(d.prob('b') == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(testing::max_abs_diff(d, exact_next_byte_dist(*lm, to_bytes("a"))) <= 1e-12);
}

TEST_CASE("fresh lattice under a deterministic teacher") {
  auto tok = testing::toy_tokenizer();
  auto lm = std::make_shared<ScriptedLM>(tok, std::vector<TokenId>{id_of(*tok, "ab")});
  auto lat = beam_init(lm, 10, 0.01);
  CHECK(lat.logp_next().prob('a') == 1.0);
  lat.advance('a');
  lat.advance('b');
  CHECK(lat.logp_next().eos_prob() == doctest::Approx(1.0).epsilon(1e-15));
  try {
    lat.advance('z');
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Advance);
    CHECK(std::string(e.what()).find("position 2") != std::string::npos);
  }
}

TEST_CASE("char vocabulary keeps one hypothesis and reproduces the model") {
  auto tok = testing::char_tokenizer();
  auto lm = std::make_shared<RandomLM>(tok, 17);
  for (std::size_t k : {std::size_t{1}, std::size_t{3}, kUnboundedBeam}) {
    auto lat = beam_init(lm, k, 0.5);
    std::vector<TokenId> prefix;
    for (Byte v : to_bytes("tokens")) {
      auto d = lat.logp_next();
      auto t = lm->next_token_dist(prefix);
      for (std::size_t s = 0; s < 256; ++s) CHECK(std::abs(d.prob(s) - t.probs[s]) <= 1e-15);
      CHECK(std::abs(d.eos_prob() - t.probs.back()) <= 1e-15);
      lat.advance(v);
      CHECK(lat.hypotheses().size() == 1);
      prefix.push_back(tok->vocab().byte_token(v));
    }
  }
}

TEST_CASE("epsilon threshold") {
  auto lm = weighted_model(0.6, 0.4, 0.75, 0.00025);
  auto full = advance(advance(beam_init(lm, kUnboundedBeam, 0.0), 'a'), 'b');
  auto w = weights_of(full);
  REQUIRE(w.size() == 3);
  CHECK(w[0] == doctest::Approx(0.6));
  CHECK(w[1] == doctest::Approx(0.3));
  CHECK(w[2] == doctest::Approx(0.0001));
  auto pruned = advance(advance(beam_init(lm, 10, 0.01), 'a'), 'b');
  CHECK(weights_of(pruned).size() == 2);
  CHECK(pruned.last_leaked_mass() == doctest::Approx(0.0001 / 0.9001));
}

TEST_CASE("top-K cut and the identity case") {
  auto lm = weighted_model(0.5, 0.5, 0.6, 0.4);
  auto full = advance(advance(beam_init(lm, kUnboundedBeam, 0.0), 'a'), 'b');
  auto w = weights_of(full);
  REQUIRE(w.size() == 3);
  CHECK(w[0] == doctest::Approx(0.5));
  CHECK(w[1] == doctest::Approx(0.3));
  CHECK(w[2] == doctest::Approx(0.2));
  auto top2 = advance(advance(beam_init(lm, 2, 0.0), 'a'), 'b');
  auto w2 = weights_of(top2);
  REQUIRE(w2.size() == 2);
  CHECK(w2[0] == doctest::Approx(0.5));
  CHECK(w2[1] == doctest::Approx(0.3));
  CHECK(prune(full) == full);
}

TEST_CASE("the best hypothesis survives any pruning") {
  auto lm = weighted_model(0.5, 0.5, 0.6, 0.4);
  auto lat = advance(advance(beam_init(lm, 1, 0.99), 'a'), 'b');
  REQUIRE(lat.hypotheses().size() == 1);
  CHECK(std::exp(lat.hypotheses()[0].log_weight) == doctest::Approx(0.5));
}

TEST_CASE("ties at the K-th slot break by path") {
  auto lm = testing::toy_uniform();
  auto a = advance(beam_init(lm, 1, 0.0), 'a');
  auto b = advance(beam_init(lm, 1, 0.0), 'a');
  REQUIRE(a.hypotheses().size() == 1);
  CHECK(a == b);
  // Both survivors weigh 1/3; the empty completed path sorts first.
  CHECK(a.hypotheses()[0].completed.empty());
}

TEST_CASE("extend_token_boundaries splits by token mass") {
  auto lm = testing::toy_uniform();
  auto lat = beam_init(lm, kUnboundedBeam, 0.0);
  lat.consume('a');
  REQUIRE(lat.hypotheses().size() == 1);
  double parent = lat.log_mass();
  auto root = lm->next_token_dist({});
  auto split = extend_token_boundaries(lat);
  REQUIRE(split.hypotheses().size() == 2);
  CHECK(split.log_mass() == doctest::Approx(parent).epsilon(1e-14));
  for (const auto& h : split.hypotheses())
    if (h.boundary()) CHECK(std::exp(h.log_weight) == doctest::Approx(root.probs[static_cast<std::size_t>(id_of(lm->tokenizer(), "a"))]));

  auto plain = beam_init(std::make_shared<UniformLM>(testing::char_tokenizer()), 4, 0.0);
  plain.consume('q');
  auto before = plain.hypotheses().size();
  plain.extend_token_boundaries();
  CHECK(plain.hypotheses().size() == before);
}

TEST_CASE("unpruned lattice reproduces exact prefix probabilities") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    auto tok = testing::random_chain_tokenizer(rng, 15, "abc", 3);
    std::vector<TokenId> support;
    for (std::size_t i = 0; i < tok->vocab().user_token_count(); ++i) support.push_back(static_cast<TokenId>(i));
    auto lm = std::make_shared<RandomLM>(tok, rng(), support, 0.1);
    auto b = testing::random_text(rng, "abc", 1 + rng() % 8);
    auto lat = beam_init(lm, kUnboundedBeam, 0.0);
    double chain = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      auto d = lat.logp_next();
      CHECK(d.total() == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(testing::max_abs_diff(d, exact_next_byte_dist(*lm, std::span<const Byte>(b).first(i))) <= 1e-9);
      chain += d.logp[b[i]];
      lat.advance(b[i]);
    }
    double exact = exact_prefix_logprob(*lm, b);
    CHECK(std::exp(lat.log_mass()) == doctest::Approx(std::exp(exact)).epsilon(1e-9));
    CHECK(std::exp(chain) == doctest::Approx(std::exp(exact)).epsilon(1e-9));
    CHECK(testing::max_abs_diff(lat.logp_next(), exact_next_byte_dist(*lm, b)) <= 1e-9);
  }
}

TEST_CASE("pruned lattices stay normalized and deterministic") {
  std::mt19937_64 rng(2);
  auto tok = testing::random_chain_tokenizer(rng, 30, "abcd", 4);
  auto lm = std::make_shared<RandomLM>(tok, 5);
  auto b = testing::random_text(rng, "abcd", 30);
  for (auto [k, eps] : std::vector<std::pair<std::size_t, double>>{{1, 0.0}, {2, 0.1}, {5, 0.01}, {50, 1e-4}}) {
    BeamLattice l1(lm, {k, eps, 3}), l2(lm, {k, eps, 3});
    std::size_t i = 0;
    for (; i < b.size(); ++i) {
      auto d1 = l1.logp_next();
      CHECK(d1.total() == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(d1.logp == l2.logp_next().logp);
      // A pruned lattice may lose every path that reaches the next byte.
      if (d1.prob(b[i]) == 0.0) {
        CHECK_THROWS_AS(l1.advance(b[i]), Error);
        break;
      }
      l1.advance(b[i]);
      l2.advance(b[i]);
      CHECK(l1 == l2);
      CHECK(l1.last_leaked_mass() >= 0.0);
    }
    if (k == 50) CHECK(i == b.size());
  }
}

TEST_CASE("lattice size stays within K") {
  std::mt19937_64 rng(12);
  auto tok = testing::random_chain_tokenizer(rng, 30, "ab", 5);
  auto lm = std::make_shared<RandomLM>(tok, 1);
  auto lat = beam_init(lm, 3, 0.0);
  for (Byte v : testing::random_text(rng, "ab", 20)) {
    lat.advance(v);
    CHECK(lat.hypotheses().size() <= 3);
    for (const auto& h : lat.hypotheses()) CHECK(h.log_weight <= 0.0);
  }
}

TEST_CASE("jsd") {
  ByteDistribution p, q, uniform;
  p.logp.fill(-std::numeric_limits<double>::infinity());
  q.logp.fill(-std::numeric_limits<double>::infinity());
  p.logp[0] = 0.0;
  q.logp[1] = 0.0;
  uniform.logp.fill(-std::log(257.0));
  CHECK(jsd(p, p) == 0.0);
  CHECK(jsd(p, q) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(jsd(uniform, p) == doctest::Approx(jsd(p, uniform)).epsilon(1e-15));

  // Direct evaluation for the uniform-against-point-mass case.
  const double u = 1.0 / 257.0;
  const double m0 = 0.5 * (u + 1.0), mi = 0.5 * u;
  double kl_u = u * std::log(u / m0) + 256.0 * u * std::log(u / mi);
  double kl_p = std::log(1.0 / m0);
  CHECK(jsd(uniform, p) == doctest::Approx(0.5 * kl_u + 0.5 * kl_p).epsilon(1e-13));

  ByteDistribution bad = uniform;
  bad.logp[0] = 0.0;
  CHECK_THROWS_AS(jsd(bad, p), Error);
}

TEST_CASE("sweep") {
  SUBCASE("char vocabulary gives zero divergence everywhere") {
    auto lm = std::make_shared<RandomLM>(testing::char_tokenizer(), 4);
    SweepConfig c;
    c.ks = {1, 2};
    c.epsilons = {0.5, 0.0};
    auto r = sweep(lm, std::vector<ByteString>{to_bytes("sample")}, c);
    REQUIRE(r.rows.size() == 4);
    for (const auto& row : r.rows) {
      CHECK(row.median_jsd == 0.0);
      CHECK(row.mean_jsd == 0.0);
      CHECK(row.positions == 6);
    }
  }
  SUBCASE("the reference configuration compares as zero") {
    std::mt19937_64 rng(3);
    auto tok = testing::random_chain_tokenizer(rng, 20, "abc", 3);
    auto lm = std::make_shared<RandomLM>(tok, 9);
    std::vector<ByteString> corpus;
    for (int i = 0; i < 6; ++i) corpus.push_back(testing::random_text(rng, "abc", 10));
    SweepConfig c;
    c.reference = {20, 1e-3, 256};
    c.ks = {20, 3};
    c.epsilons = {1e-3};
    c.workers = 3;
    auto r = sweep(lm, corpus, c);
    REQUIRE(r.rows.size() == 2);
    CHECK(r.rows[0].k == 20);
    CHECK(r.rows[0].median_jsd == 0.0);
    CHECK(r.rows[1].mean_jsd > 0.0);
    c.workers = 1;
    auto serial = sweep(lm, corpus, c);
    CHECK(serial.rows[1].mean_jsd == r.rows[1].mean_jsd);
    CHECK(serial.rows[1].median_jsd == r.rows[1].median_jsd);
  }
  SUBCASE("sample failures are recorded") {
    auto lm = testing::toy_uniform();
    SweepConfig c;
    c.ks = {2};
    c.epsilons = {0.1};
    auto r = sweep(lm, std::vector<ByteString>{to_bytes("ab"), to_bytes("zz")}, c);
    REQUIRE(r.rows.size() == 1);
    CHECK(r.rows[0].failed_samples == 1);
    REQUIRE(r.errors.size() == 1);
    CHECK(r.errors[0].rfind("sample 1:", 0) == 0);
  }
}

TEST_CASE("sweep records round trip") {
  SweepReport r;
  r.rows.push_back({2, 0.1, 0.01, 0.02, 0.5, 40, 0, 0.001, 12.5});
  r.rows.push_back({kUnboundedBeam, 1e-6, 0.0, 0.0, 1.5, 40, 1, 0.0, 30.0});
  auto text = serialize_sweep(r);
  auto back = parse_sweep(text);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[1].k == kUnboundedBeam);
  CHECK(back.rows[0].median_jsd == 0.01);
  CHECK(serialize_sweep(back) == text);
  CHECK_THROWS_AS(parse_sweep("{not json}\n"), Error);
}
