/*
 * Copyright 2026 The subjlab Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "subjlab/corpus.hpp"
#include "subjlab/synthetic.hpp"

using namespace subjlab;

namespace {

std::vector<AnnotationRecord> parse(const std::string& text, FormatConfig fmt = {}) {
  std::istringstream in(text);
  return parse_annotations(in, fmt, "fixture");
}

AnnotationRecord rec(std::string arg, std::string who, std::vector<std::uint8_t> labels) {
  std::string text = "text of " + arg;
  return {std::move(arg), std::move(who), std::move(text), std::move(labels)};
}

// Independent Fleiss (1971) formula over an items x categories count table.
double fleiss_oracle(const std::vector<std::vector<int>>& table) {
  const double n = static_cast<double>(table.size());
  const double m = static_cast<double>(table[0][0] + table[0][1]);
  std::vector<double> pj(2, 0.0);
  double pbar = 0.0;
  for (const auto& row : table) {
    double sq = 0.0;
    for (int j = 0; j < 2; ++j) {
      sq += double(row[j]) * row[j];
      pj[j] += row[j];
    }
    pbar += (sq - m) / (m * (m - 1));
  }
  pbar /= n;
  double pe = 0.0;
  for (double& p : pj) {
    p /= n * m;
    pe += p * p;
  }
  return (pbar - pe) / (1 - pe);
}

Corpus tiny_corpus() {
  // 6 arguments, 3 annotators, 2 values.
  std::vector<AnnotationRecord> r;
  const std::vector<std::vector<std::vector<std::uint8_t>>> labels = {
      {{1, 0}, {1, 0}, {1, 0}},  // agree
      {{1, 0}, {0, 0}, {1, 0}},  // v0 subjective
      {{0, 1}, {0, 0}, {0, 1}},  // v1 subjective
      {{1, 1}, {1, 0}, {0, 1}},  // both
      {{0, 0}, {0, 0}, {0, 0}},  // agree
      {{0, 1}, {0, 1}, {0, 1}},  // agree
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      r.push_back(rec("A" + std::to_string(i), "W" + std::to_string(j), labels[i][j]));
    }
  }
  const std::vector<std::string> annotators{"W0", "W1", "W2"};
  return build_corpus(r, annotators, select_values(r, annotators, 2));
}

}  // namespace

TEST(Parse, CommaRowWithQuotedPremise) {
  const auto r = parse("A01001, W014, 'if entrapment is allowed, crime drops', [0,0,0,0,1,0]\n",
                       FormatConfig{',', std::nullopt, true});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].argument_id, "A01001");
  EXPECT_EQ(r[0].annotator_id, "W014");
  EXPECT_EQ(r[0].text, "if entrapment is allowed, crime drops");
  ASSERT_EQ(r[0].labels.size(), 6u);
  EXPECT_EQ(r[0].labels[4], 1);
  EXPECT_EQ(std::count(r[0].labels.begin(), r[0].labels.end(), 1), 1);
}

TEST(Parse, EmptyFileGivesNoRecords) { EXPECT_TRUE(parse("").empty()); }

TEST(Parse, HeaderRowSkippedAndOrderKept) {
  const auto r = parse("Argument ID\tWorker ID\tPremise\tLabels\nB\tW1\tsecond\t[0, 1]\nA\tW1\tfirst\t[1, 0]\n");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].argument_id, "B");
  EXPECT_EQ(r[1].argument_id, "A");
}

TEST(Parse, NonBinaryTokenIsParseErrorWithLine) {
  try {
    parse("A\tW1\tx\t[0,1]\nB\tW1\ty\t[0,2]\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("fixture:2"), std::string::npos);
  }
}

TEST(Parse, WrongLengthAndDuplicates) {
  EXPECT_THROW(parse("A\tW1\tx\t[0,1]\nB\tW1\ty\t[0,1,1]\n"), ParseError);
  EXPECT_THROW(parse("A\tW1\tx\t[0,1,0]\n", FormatConfig{'\t', 2, true}), ParseError);
  EXPECT_THROW(parse("A\tW1\tx\t[0,1]\nA\tW1\ty\t[1,1]\n"), DuplicateError);
  EXPECT_THROW(parse("A\tW1\tx\n"), ParseError);
  EXPECT_THROW(parse("A\tW1\t\xff\xfe\t[0,1]\n"), ParseError);
}

TEST(Select, AnnotatorsByCountWithLexTies) {
  // Counts: W5:4, W2:3, W3:3, W1:1, W4:2. Brute force ranking below.
  std::vector<AnnotationRecord> r;
  const std::map<std::string, int> counts{{"W5", 4}, {"W2", 3}, {"W3", 3}, {"W1", 1}, {"W4", 2}};
  for (const auto& [who, n] : counts) {
    for (int i = 0; i < n; ++i) r.push_back(rec("A" + std::to_string(i), who, {0}));
  }
  std::vector<std::pair<int, std::string>> ranked;
  for (const auto& [who, n] : counts) ranked.emplace_back(-n, who);
  std::sort(ranked.begin(), ranked.end());
  const auto got = select_annotators(r, 3);
  ASSERT_EQ(got.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(got[i], ranked[i].second);
  EXPECT_EQ(got, (std::vector<std::string>{"W5", "W2", "W3"}));
  EXPECT_THROW(select_annotators(r, 6), SelectionError);
}

TEST(Select, SingleAnnotator) {
  std::vector<AnnotationRecord> r{rec("A", "solo", {1}), rec("B", "solo", {0})};
  EXPECT_EQ(select_annotators(r, 1), std::vector<std::string>{"solo"});
}

TEST(Select, RepeatedArgumentCountsOnce) {
  std::vector<AnnotationRecord> r{rec("A", "W1", {1}), rec("B", "W1", {1}), rec("A", "W2", {1}),
                                  rec("B", "W2", {1}), rec("C", "W2", {1})};
  EXPECT_EQ(select_annotators(r, 1), std::vector<std::string>{"W2"});
}

TEST(Select, ValuesByColumnSum) {
  // Column sums over W1,W2: v0=5, v1=9, v2=7.
  std::vector<AnnotationRecord> r;
  const std::vector<int> sums{5, 9, 7};
  for (int i = 0; i < 10; ++i) {
    std::vector<std::uint8_t> l(3);
    for (int c = 0; c < 3; ++c) l[c] = i < sums[c] ? 1 : 0;
    r.push_back(rec("A" + std::to_string(i), i % 2 ? "W1" : "W2", l));
  }
  r.push_back(rec("X", "W9", {1, 0, 0}));  // not selected, ignored
  const auto sel = select_values(r, {"W1", "W2"}, 2, {"alpha", "beta", "gamma"});
  EXPECT_EQ(sel.indices, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(sel.names, (std::vector<std::string>{"beta", "gamma"}));
  EXPECT_EQ(sel.k(), 2u);
  EXPECT_THROW(select_values(r, {"W1"}, 4), SelectionError);
}

TEST(Select, AllZeroTiesGoToFirstColumns) {
  std::vector<AnnotationRecord> r{rec("A", "W1", {0, 0, 0, 0})};
  const auto sel = select_values(r, {"W1"}, 2);
  EXPECT_EQ(sel.indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sel.names[0], "value_0");
}

TEST(Subjectivity, ExamplesAndBruteForceM4) {
  EXPECT_EQ(derive_subjectivity(std::vector<std::uint8_t>{1, 1, 1, 1}), 0);
  EXPECT_EQ(derive_subjectivity(std::vector<std::uint8_t>{1, 0, 1, 1}), 1);
  int ones = 0;
  for (int mask = 0; mask < 16; ++mask) {
    std::vector<std::uint8_t> v(4);
    for (int b = 0; b < 4; ++b) v[b] = (mask >> b) & 1;
    const auto s = derive_subjectivity(v);
    EXPECT_EQ(s, (mask == 0 || mask == 15) ? 0 : 1);
    ones += s;
  }
  EXPECT_EQ(ones, 14);
  EXPECT_THROW(derive_subjectivity(std::vector<std::uint8_t>{1}), Error);
}

TEST(BuildCorpus, IntersectionRule) {
  std::vector<AnnotationRecord> r;
  for (const char* w : {"W1", "W2", "W3", "W4"}) r.push_back(rec("full", w, {1, 0}));
  for (const char* w : {"W1", "W2", "W3"}) r.push_back(rec("partial", w, {1, 0}));
  const std::vector<std::string> ann{"W1", "W2", "W3", "W4"};
  const auto c = build_corpus(r, ann, select_values(r, ann, 2));
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.argument_ids[0], "full");
  EXPECT_THROW(build_corpus({rec("a", "W1", {1}), rec("b", "W2", {1})}, {"W1", "W2"}, ValueSelection{{"v"}, {0}}),
               EmptyCorpusError);
}

TEST(BuildCorpus, IdenticalAnnotatorsAreNeverSubjective) {
  std::vector<AnnotationRecord> r;
  for (int i = 0; i < 5; ++i) {
    std::vector<std::uint8_t> l{std::uint8_t(i % 2), std::uint8_t(i % 3 == 0)};
    r.push_back(rec("A" + std::to_string(i), "W1", l));
    r.push_back(rec("A" + std::to_string(i), "W2", l));
  }
  const auto c = build_corpus(r, {"W1", "W2"}, select_values(r, {"W1", "W2"}, 2));
  EXPECT_TRUE(std::all_of(c.subjectivity.begin(), c.subjectivity.end(), [](auto b) { return b == 0; }));
}

TEST(BuildCorpus, TinyFixtureHandTally) {
  const auto c = tiny_corpus();
  ASSERT_EQ(c.size(), 6u);
  // Column sums: v0 = 1*3+2+0+2 = 7, v1 = 0+0+2+2+0+3 = 7; tie keeps column order.
  EXPECT_EQ(c.values.indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(c.count_subjective(0), 2u);  // A1, A3
  EXPECT_EQ(c.count_subjective(1), 2u);  // A2, A3
  for (std::size_t v = 0; v < 2; ++v) EXPECT_EQ(c.count_subjective(v) + (c.size() - c.count_subjective(v)), c.size());
  EXPECT_DOUBLE_EQ(subjectivity_ratio(c, 0), 2.0 / 4.0);
}

TEST(BuildCorpus, AnnotatorPermutationInvariance) {
  SyntheticSpec spec;
  spec.n_arguments = 60;
  const auto r = make_synthetic_records(spec);
  const auto ann = select_annotators(r, 4);
  auto rev = ann;
  std::reverse(rev.begin(), rev.end());
  const auto sel = select_values(r, ann, 4);
  EXPECT_EQ(build_corpus(r, ann, sel).subjectivity, build_corpus(r, rev, sel).subjectivity);
}

TEST(Ratio, Examples) {
  Corpus c;
  c.values = {{"v"}, {0}};
  c.annotator_ids = {"a", "b"};
  for (int i = 0; i < 15; ++i) {
    c.argument_ids.push_back("x" + std::to_string(i));
    c.texts.push_back("t");
    const std::uint8_t s = i < 3;
    c.annotations.push_back(1);
    c.annotations.push_back(s ? 0 : 1);
  }
  c.derive_all_subjectivity();
  EXPECT_DOUBLE_EQ(subjectivity_ratio(c, 0), 0.25);
  // 743 S / 2038 NS.
  EXPECT_NEAR(743.0 / 2038.0, 0.364, 0.001);
  for (auto& a : c.annotations) a = 1;
  c.derive_all_subjectivity();
  EXPECT_DOUBLE_EQ(subjectivity_ratio(c, 0), 0.0);
  for (std::size_t i = 0; i < c.annotations.size(); i += 2) c.annotations[i] = 0;
  c.derive_all_subjectivity();
  EXPECT_THROW(subjectivity_ratio(c, 0), UndefinedError);
}

namespace {
Corpus corpus_of_size(std::size_t n) {
  Corpus c;
  c.values = {{"v"}, {0}};
  c.annotator_ids = {"a", "b"};
  for (std::size_t i = 0; i < n; ++i) {
    c.argument_ids.push_back("A" + std::to_string(i));
    c.texts.push_back("t");
    c.annotations.push_back(i % 3 == 0);
    c.annotations.push_back(0);
  }
  c.derive_all_subjectivity();
  return c;
}
}  // namespace

TEST(Splits, SizesFor2781) {
  const auto c = corpus_of_size(2781);
  SplitOptions o;
  const auto s = make_splits(c, o);
  // 2781 * 0.22 = 611.82 -> 612; 2169 * 0.10 = 216.9 -> 217; rest 1952.
  EXPECT_EQ(s.test.size(), 612u);
  EXPECT_EQ(s.val.size(), 217u);
  EXPECT_EQ(s.train.size(), 1952u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 2781u);
}

TEST(Splits, FixedTestAcrossSeedsAndDeterminism) {
  const auto c = corpus_of_size(300);
  SplitOptions o;
  o.seed = 1;
  const auto a = make_splits(c, o);
  EXPECT_EQ(a, make_splits(c, o));
  o.seed = 2;
  const auto b = make_splits(c, o);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, b.train);
  o.fixed_test = false;
  const auto free2 = make_splits(c, o);
  o.seed = 3;
  EXPECT_NE(free2.test, make_splits(c, o).test);
}

TEST(Splits, BadFractions) {
  const auto c = corpus_of_size(20);
  SplitOptions o;
  o.fractions.train = 1.0;
  o.fractions.test = 0.0;
  EXPECT_THROW(make_splits(c, o), ConfigError);
  o.fractions = {0.5, 0.6, 0.1};
  EXPECT_THROW(make_splits(c, o), ConfigError);
}

TEST(Splits, StratifiedKeepsClassShares) {
  const auto c = corpus_of_size(300);  // 100 subjective
  SplitOptions o;
  o.stratify_value = 0;
  const auto s = make_splits(c, o);
  std::size_t test_pos = 0;
  for (auto r : s.test) test_pos += c.subjective(r, 0);
  EXPECT_EQ(test_pos, 22u);  // round(100 * 0.22)
  EXPECT_EQ(s.test.size(), 22u + 44u);
}

TEST(Fleiss, PerfectAgreementAndUndefined) {
  const std::vector<std::size_t> perfect{0, 4, 4, 0, 4};
  ASSERT_TRUE(fleiss_kappa_binary(perfect, 4).has_value());
  EXPECT_NEAR(*fleiss_kappa_binary(perfect, 4), 1.0, 1e-15);
  const std::vector<std::size_t> all_zero{0, 0, 0};
  EXPECT_FALSE(fleiss_kappa_binary(all_zero, 4).has_value());
  const std::vector<std::size_t> all_one{3, 3};
  EXPECT_FALSE(fleiss_kappa_binary(all_one, 3).has_value());
}

TEST(Fleiss, MatchesIndependentOracleAndCategorySwap) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> present(10);
    std::vector<std::vector<int>> table;
    std::vector<std::size_t> flipped;
    for (auto& p : present) {
      p = rng.index(5);
      table.push_back({int(p), int(4 - p)});
      flipped.push_back(4 - p);
    }
    const auto k = fleiss_kappa_binary(present, 4);
    if (!k) continue;
    EXPECT_NEAR(*k, fleiss_oracle(table), 1e-12);
    EXPECT_NEAR(*k, *fleiss_kappa_binary(flipped, 4), 1e-12);
  }
}

TEST(Fleiss, CorpusAndBands) {
  const auto c = tiny_corpus();
  std::vector<std::vector<int>> table;
  for (std::size_t i = 0; i < c.size(); ++i) {
    int p = 0;
    for (std::size_t j = 0; j < 3; ++j) p += c.annotation(i, j, 0);
    table.push_back({p, 3 - p});
  }
  EXPECT_NEAR(*fleiss_kappa(c, 0), fleiss_oracle(table), 1e-12);
  EXPECT_EQ(kappa_band(0.65), "substantial");
  EXPECT_EQ(kappa_band(0.3), "fair");
  EXPECT_EQ(kappa_band(-0.1), "poor");
  EXPECT_EQ(kappa_band(0.9), "almost perfect");
}

namespace {
std::vector<LabeledText> labeled(std::size_t pos, std::size_t neg) {
  std::vector<LabeledText> out;
  for (std::size_t i = 0; i < pos; ++i) out.push_back({"positive sample number " + std::to_string(i) + " with words", 1});
  for (std::size_t i = 0; i < neg; ++i) out.push_back({"negative sample " + std::to_string(i), 0});
  return out;
}

class FailingClient : public ParaphraseClient {
 public:
  std::string name() const override { return "failing"; }
  std::vector<std::string> paraphrase(const ParaphraseRequest&) override { throw BackendError("down"); }
};

class EmptyClient : public ParaphraseClient {
 public:
  std::string name() const override { return "empty"; }
  std::vector<std::string> paraphrase(const ParaphraseRequest&) override { return {}; }
};
}  // namespace

TEST(Augment, BalancesTenToThirty) {
  const auto in = labeled(10, 30);
  const auto out = augment_minority(in, nullptr, AugmentOptions{5});
  EXPECT_EQ(out.items.size(), 60u);
  EXPECT_EQ(out.generated, 20u);
  std::size_t pos = 0, gen = 0;
  for (const auto& it : out.items) {
    pos += it.label;
    gen += it.generated;
    if (it.generated) {
      EXPECT_EQ(it.label, 1);
      EXPECT_EQ(in[it.source].label, 1);
    }
  }
  EXPECT_EQ(pos, 30u);
  EXPECT_EQ(gen, 20u);
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out.items[i].text, in[i].text);
    EXPECT_FALSE(out.items[i].generated);
  }
  const auto again = augment_minority(in, nullptr, AugmentOptions{5});
  for (std::size_t i = 0; i < out.items.size(); ++i) EXPECT_EQ(again.items[i].text, out.items[i].text);
}

TEST(Augment, BalancedIsIdentityAndEmptyMinorityThrows) {
  const auto in = labeled(4, 4);
  const auto out = augment_minority(in, nullptr, {});
  ASSERT_EQ(out.items.size(), in.size());
  EXPECT_EQ(out.generated, 0u);
  EXPECT_THROW(augment_minority(labeled(0, 5), nullptr, {}), AugmentError);
}

TEST(Augment, FailingClientFallsBackWithWarning) {
  FailingClient failing;
  const auto out = augment_minority(labeled(2, 5), &failing, {});
  EXPECT_EQ(out.generated, 3u);
  ASSERT_FALSE(out.warnings.empty());
  EXPECT_NE(out.warnings[0].find("falling back"), std::string::npos);
}

TEST(Augment, ExhaustedClientStopsShort) {
  EmptyClient empty;
  const auto out = augment_minority(labeled(2, 5), &empty, {});
  EXPECT_EQ(out.generated, 0u);
  EXPECT_FALSE(out.warnings.empty());
}

TEST(Augment, WordDropoutBound) {
  WordDropoutParaphraser p(3);
  const std::string text = "one two three four five six seven eight nine ten eleven twelve thirteen fourteen";
  const auto n = split_whitespace(text).size();
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    const auto out = split_whitespace(p.one(text, salt));
    EXPECT_EQ(out.front(), "one");
    EXPECT_LT(out.size(), n);
    EXPECT_GE(double(out.size()), double(n) - 0.15 * double(n - 1));
  }
  EXPECT_EQ(p.one("short", 1), "short");
}

TEST(Cache, RoundTripByteStable) {
  SyntheticSpec spec;
  spec.n_arguments = 40;
  const auto r = make_synthetic_records(spec);
  const auto ann = select_annotators(r, 4);
  auto c = build_corpus(r, ann, select_values(r, ann, 3));
  c.texts[0] = "tab\there\nnewline \\ backslash";
  std::ostringstream a;
  save_corpus(c, a);
  std::istringstream in(a.str());
  const auto back = load_corpus(in);
  EXPECT_EQ(back.texts, c.texts);
  EXPECT_EQ(back.argument_ids, c.argument_ids);
  EXPECT_EQ(back.annotations, c.annotations);
  EXPECT_EQ(back.subjectivity, c.subjectivity);
  EXPECT_EQ(back.values.names, c.values.names);
  std::ostringstream b;
  save_corpus(back, b);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Cache, RejectsTamperedSubjectivity) {
  const auto c = tiny_corpus();
  std::ostringstream a;
  save_corpus(c, a);
  std::string s = a.str();
  std::istringstream bad_magic("not-a-corpus 1\n");
  EXPECT_THROW(load_corpus(bad_magic), ParseError);
  // Flip the first stored subjectivity bit of the first argument line.
  const auto pos = s.find("A0\t");
  ASSERT_NE(pos, std::string::npos);
  const auto bits = s.find('\t', s.find('\t', pos) + 1) + 1;
  s[bits] = s[bits] == '0' ? '1' : '0';
  std::istringstream in(s);
  EXPECT_THROW(load_corpus(in), ParseError);
}
