#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "emin/metrics.hpp"
#include "emin/rng.hpp"

using emin::PRF;
using emin::bleu4;
using emin::rouge_l;
using emin::rouge_n;

namespace {

std::vector<std::string> toks(std::initializer_list<const char*> ts) {
  std::vector<std::string> out;
  for (const char* t : ts) out.emplace_back(t);
  return out;
}

// Independent brute-force oracle: n-gram counting via string join + map,
// written without sharing code with the implementation under test.
int brute_clipped_overlap(const std::vector<std::string>& cand,
                          const std::vector<std::string>& ref, int n) {
  auto grams = [n](const std::vector<std::string>& s) {
    std::map<std::string, int> m;
    for (int i = 0; i + n <= static_cast<int>(s.size()); ++i) {
      std::string g;
      for (int j = 0; j < n; ++j) g += s[i + j] + "\x1f";
      ++m[g];
    }
    return m;
  };
  const auto c = grams(cand), r = grams(ref);
  int overlap = 0;
  for (const auto& [g, cnt] : c) {
    auto it = r.find(g);
    if (it != r.end()) overlap += std::min(cnt, it->second);
  }
  return overlap;
}

// Independent recursive LCS (memoized top-down, distinct from the DP under
// test).
int brute_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<int(int, int)> go = [&](int i, int j) -> int {
    if (i == 0 || j == 0) return 0;
    int& m = memo[i][j];
    if (m >= 0) return m;
    if (a[i - 1] == b[j - 1]) return m = go(i - 1, j - 1) + 1;
    return m = std::max(go(i - 1, j), go(i, j - 1));
  };
  return go(static_cast<int>(a.size()), static_cast<int>(b.size()));
}

std::vector<std::string> random_tokens(emin::Rng& rng, int max_len, int alphabet) {
  const int len = static_cast<int>(rng.below(max_len + 1));
  std::vector<std::string> out;
  for (int i = 0; i < len; ++i)
    out.push_back(std::string(1, static_cast<char>('a' + rng.below(alphabet))));
  return out;
}

}  // namespace

TEST_CASE("rouge_n hand examples") {
  // identical sequences
  PRF same = rouge_n(toks({"a", "b", "c"}), toks({"a", "b", "c"}), 1);
  CHECK(same.f1 == doctest::Approx(1.0).epsilon(1e-12));

  // "the cat" vs "the cat sat", unigrams: P=1, R=2/3, F1=0.8
  PRF r = rouge_n(toks({"the", "cat"}), toks({"the", "cat", "sat"}), 1);
  CHECK(r.precision == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.f1 == doctest::Approx(0.8).epsilon(1e-12));

  // disjoint vocabularies
  PRF d = rouge_n(toks({"x", "y"}), toks({"a", "b"}), 1);
  CHECK(d.f1 == 0.0);

  // empty candidate
  PRF e = rouge_n({}, toks({"a"}), 1);
  CHECK(e.precision == 0.0);
  CHECK(e.recall == 0.0);
  CHECK(e.f1 == 0.0);

  // clipping: candidate repeats a token beyond the reference count
  PRF c = rouge_n(toks({"a", "a", "a"}), toks({"a", "b"}), 1);
  CHECK(c.precision == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(c.recall == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("rouge_l hand examples") {
  // "a b c d" vs "a c b d": LCS 3 -> P=R=F1=0.75
  PRF r = rouge_l(toks({"a", "b", "c", "d"}), toks({"a", "c", "b", "d"}));
  CHECK(r.precision == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(r.recall == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(r.f1 == doctest::Approx(0.75).epsilon(1e-12));

  CHECK(rouge_l(toks({"a", "b"}), toks({"a", "b"})).f1 == doctest::Approx(1.0));
  CHECK(rouge_l({}, toks({"a"})).f1 == 0.0);
}

TEST_CASE("bleu4 hand examples") {
  // perfect match
  CHECK(bleu4({toks({"a", "b", "c", "d", "e"})}, {toks({"a", "b", "c", "d", "e"})}) ==
        doctest::Approx(1.0).epsilon(1e-12));

  // "the the the the" vs "the cat": p1 clipped = 1/4, p2..p4 zero -> 0 unsmoothed
  CHECK(bleu4({toks({"the", "the", "the", "the"})}, {toks({"the", "cat"})}, false) == 0.0);

  // candidate = first 4 tokens of a 5-token reference: all p_n = 1, BP = e^{1-5/4}
  const double b = bleu4({toks({"a", "b", "c", "d"})}, {toks({"a", "b", "c", "d", "e"})});
  CHECK(b == doctest::Approx(std::exp(1.0 - 5.0 / 4.0)).epsilon(1e-12));
}

TEST_CASE("bleu4 smoothing replaces a zero corpus precision") {
  // Unigram overlap exists but no higher-order overlap: smoothing substitutes
  // 1/(2*total) for the zero p_n instead of zeroing the score.
  const auto cand = toks({"the", "dog", "the", "dog"});
  const auto ref = toks({"dog", "ate", "the", "bone"});
  CHECK(bleu4({cand}, {ref}, false) == 0.0);
  CHECK(bleu4({cand}, {ref}, true) > 0.0);
  CHECK(bleu4({cand}, {ref}, true) < 1.0);
}

TEST_CASE("rouge precision/recall swap under argument exchange") {
  emin::Rng rng(21);
  for (int it = 0; it < 50; ++it) {
    const auto a = random_tokens(rng, 8, 4);
    const auto b = random_tokens(rng, 8, 4);
    for (int n = 1; n <= 2; ++n) {
      const PRF ab = rouge_n(a, b, n);
      const PRF ba = rouge_n(b, a, n);
      CHECK(ab.precision == doctest::Approx(ba.recall).epsilon(1e-12));
      CHECK(ab.recall == doctest::Approx(ba.precision).epsilon(1e-12));
    }
  }
}

TEST_CASE("appending a matching token never decreases rouge-1 recall") {
  emin::Rng rng(22);
  for (int it = 0; it < 50; ++it) {
    auto cand = random_tokens(rng, 6, 3);
    const auto ref = random_tokens(rng, 6, 3);
    if (ref.empty()) continue;
    const double before = rouge_n(cand, ref, 1).recall;
    cand.push_back(ref[rng.below(ref.size())]);
    CHECK(rouge_n(cand, ref, 1).recall >= before - 1e-12);
  }
}

TEST_CASE("100 random fixtures agree with the brute-force oracle") {
  emin::Rng rng(97);
  for (int it = 0; it < 100; ++it) {
    const auto cand = random_tokens(rng, 12, 5);
    const auto ref = random_tokens(rng, 12, 5);

    for (int n = 1; n <= 4; ++n) {
      const int overlap = brute_clipped_overlap(cand, ref, n);
      const int ctot = std::max(0, static_cast<int>(cand.size()) - n + 1);
      const int rtot = std::max(0, static_cast<int>(ref.size()) - n + 1);
      const PRF got = rouge_n(cand, ref, n);
      const double p = ctot > 0 ? static_cast<double>(overlap) / ctot : 0.0;
      const double r = rtot > 0 ? static_cast<double>(overlap) / rtot : 0.0;
      CHECK(got.precision == doctest::Approx(p).epsilon(1e-12));
      CHECK(got.recall == doctest::Approx(r).epsilon(1e-12));
    }

    const int lcs = brute_lcs(cand, ref);
    const PRF gl = rouge_l(cand, ref);
    const double pl = cand.empty() ? 0.0 : static_cast<double>(lcs) / cand.size();
    const double rl = ref.empty() ? 0.0 : static_cast<double>(lcs) / ref.size();
    CHECK(gl.precision == doctest::Approx(pl).epsilon(1e-12));
    CHECK(gl.recall == doctest::Approx(rl).epsilon(1e-12));

    // BLEU-4 from the brute-force counts (same smoothing rule, independent
    // counting path).
    double log_sum = 0.0;
    bool zero = false;
    for (int n = 1; n <= 4; ++n) {
      const int overlap = brute_clipped_overlap(cand, ref, n);
      const int ctot = std::max(0, static_cast<int>(cand.size()) - n + 1);
      double pn;
      if (ctot == 0)
        pn = 0.0;
      else if (overlap == 0)
        pn = 1.0 / (2.0 * ctot);
      else
        pn = static_cast<double>(overlap) / ctot;
      if (pn <= 0.0) {
        zero = true;
        break;
      }
      log_sum += 0.25 * std::log(pn);
    }
    double expected = 0.0;
    if (!zero) {
      const double c = static_cast<double>(cand.size());
      const double r = static_cast<double>(ref.size());
      const double bp = (c >= r || c == 0.0) ? 1.0 : std::exp(1.0 - r / c);
      expected = bp * std::exp(log_sum);
    }
    CHECK(bleu4({cand}, {ref}) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("evaluate_corpus aggregates means and sample stddevs") {
  const std::vector<std::vector<std::string>> cands = {toks({"a", "b"}), toks({"x"})};
  const std::vector<std::vector<std::string>> refs = {toks({"a", "b"}), toks({"y"})};
  const emin::MetricReport rep = emin::evaluate_corpus(cands, refs);
  REQUIRE(rep.per_instance_rouge1.size() == 2);
  CHECK(rep.per_instance_rouge1[0] == doctest::Approx(1.0));
  CHECK(rep.per_instance_rouge1[1] == doctest::Approx(0.0));
  CHECK(rep.rouge1.mean == doctest::Approx(0.5));
  // sample stddev of {1, 0} is sqrt(0.5)
  CHECK(rep.rouge1.stddev == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  CHECK(rep.bleu4_corpus >= 0.0);
  CHECK(rep.bleu4_corpus <= 1.0);
}

TEST_CASE("metric argument errors") {
  CHECK_THROWS_AS(rouge_n({}, {}, 0), emin::UsageError);
  CHECK_THROWS_AS(bleu4({}, {}), emin::UsageError);
  CHECK_THROWS_AS(bleu4({toks({"a"})}, {}), emin::UsageError);
}
