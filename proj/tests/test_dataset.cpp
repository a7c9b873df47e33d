#include "lccm/dataset.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace lccm;
using Catch::Matchers::ContainsSubstring;

namespace {

ChoiceDataset load_choices(const std::string& text) {
  std::istringstream in(text);
  return load_choice_csv(in);
}

IndicatorMatrix load_indicators(const std::string& text, double lo = -kInf, double hi = kInf) {
  std::istringstream in(text);
  return load_indicator_csv(in, lo, hi);
}

const char* kTiny =
    "resp_id,task_id,alt_id,avail,chosen,price\n"
    "1,1,a,1,1,3.5\n"
    "1,1,b,1,0,2.0\n";

}  // namespace

TEST_CASE("minimal choice panel loads") {
  ChoiceDataset ds = load_choices(kTiny);
  REQUIRE(ds.n_respondents() == 1);
  REQUIRE(ds.n_situations() == 1);
  REQUIRE(ds.n_alternatives() == 2);
  REQUIRE(ds.attribute_names == std::vector<std::string>{"price"});
  const Situation& s = ds.respondents[0].situations[0];
  REQUIRE(s.chosen == ds.alternative_index("a"));
  REQUIRE(s.attrs(ds.alternative_index("a"), 0) == 3.5);
  REQUIRE(s.attrs(ds.alternative_index("b"), 0) == 2.0);
  REQUIRE(s.n_available() == 2);
}

TEST_CASE("alternatives absent from a situation are unavailable") {
  ChoiceDataset ds = load_choices(
      "resp_id,task_id,alt_id,avail,chosen,x\n"
      "1,1,a,1,1,1\n"
      "1,1,b,1,0,2\n"
      "1,1,c,1,0,3\n"
      "1,2,a,1,0,1\n"
      "1,2,c,1,1,3\n");
  REQUIRE(ds.n_alternatives() == 3);
  const Situation& s2 = ds.respondents[0].situations[1];
  REQUIRE(s2.n_available() == 2);
  REQUIRE(!s2.avail[ds.alternative_index("b")]);
  REQUIRE(s2.attrs(ds.alternative_index("b"), 0) == 0.0);
}

TEST_CASE("explicit avail=0 rows are honoured") {
  ChoiceDataset ds = load_choices(
      "resp_id,task_id,alt_id,avail,chosen,x\n"
      "1,1,a,1,1,1\n"
      "1,1,b,0,0,9\n"
      "1,1,c,1,0,3\n");
  const Situation& s = ds.respondents[0].situations[0];
  REQUIRE(!s.avail[ds.alternative_index("b")]);
  REQUIRE(s.n_available() == 2);
}

TEST_CASE("choice loader rejects structural defects") {
  SECTION("chosen but unavailable") {
    REQUIRE_THROWS_WITH(load_choices("resp_id,task_id,alt_id,avail,chosen,x\n"
                                     "1,1,a,0,1,1\n"
                                     "1,1,b,1,0,2\n"
                                     "1,1,c,1,0,2\n"),
                        ContainsSubstring("not available"));
  }
  SECTION("no chosen alternative") {
    REQUIRE_THROWS_WITH(load_choices("resp_id,task_id,alt_id,avail,chosen,x\n"
                                     "1,1,a,1,0,1\n"
                                     "1,1,b,1,0,2\n"),
                        ContainsSubstring("exactly one chosen"));
  }
  SECTION("two chosen alternatives") {
    REQUIRE_THROWS_WITH(load_choices("resp_id,task_id,alt_id,avail,chosen,x\n"
                                     "1,1,a,1,1,1\n"
                                     "1,1,b,1,1,2\n"),
                        ContainsSubstring("exactly one chosen"));
  }
  SECTION("fewer than two available") {
    REQUIRE_THROWS_WITH(load_choices("resp_id,task_id,alt_id,avail,chosen,x\n"
                                     "1,1,a,1,1,1\n"
                                     "1,1,b,0,0,2\n"
                                     "2,1,a,1,1,1\n"
                                     "2,1,b,1,0,2\n"),
                        ContainsSubstring("fewer than 2 available"));
  }
  SECTION("duplicate alternative row") {
    REQUIRE_THROWS_WITH(load_choices("resp_id,task_id,alt_id,avail,chosen,x\n"
                                     "1,1,a,1,1,1\n"
                                     "1,1,a,1,0,2\n"),
                        ContainsSubstring("duplicate alternative"));
  }
  SECTION("non-numeric attribute") {
    REQUIRE_THROWS_WITH(load_choices("resp_id,task_id,alt_id,avail,chosen,x\n"
                                     "1,1,a,1,1,oops\n"
                                     "1,1,b,1,0,2\n"),
                        ContainsSubstring("expected a number"));
  }
  SECTION("avail outside 0/1") {
    REQUIRE_THROWS_WITH(load_choices("resp_id,task_id,alt_id,avail,chosen,x\n"
                                     "1,1,a,2,1,1\n"
                                     "1,1,b,1,0,2\n"),
                        ContainsSubstring("avail"));
  }
  SECTION("wrong header") {
    REQUIRE_THROWS_AS(load_choices("id,task_id,alt_id,avail,chosen,x\n1,1,a,1,1,1\n"),
                      data_error);
  }
  SECTION("no attribute columns") {
    REQUIRE_THROWS_AS(load_choices("resp_id,task_id,alt_id,avail,chosen\n1,1,a,1,1\n"),
                      data_error);
  }
}

TEST_CASE("respondents, tasks and alternatives use numeric-aware order") {
  ChoiceDataset ds = load_choices(
      "resp_id,task_id,alt_id,avail,chosen,x\n"
      "10,1,2,1,1,1\n"
      "10,1,10,1,0,2\n"
      "2,2,10,1,1,1\n"
      "2,2,2,1,0,2\n"
      "2,10,2,1,1,1\n"
      "2,10,10,1,0,2\n"
      "2,1,2,1,1,1\n"
      "2,1,10,1,0,2\n");
  REQUIRE(ds.respondents[0].id == "2");
  REQUIRE(ds.respondents[1].id == "10");
  REQUIRE(ds.alternative_ids == std::vector<std::string>{"2", "10"});
  const auto& tasks = ds.respondents[0].situations;
  REQUIRE(tasks[0].task_id == "1");
  REQUIRE(tasks[1].task_id == "2");
  REQUIRE(tasks[2].task_id == "10");
}

TEST_CASE("choice csv write/load round trip") {
  ChoiceDataset ds = load_choices(
      "resp_id,task_id,alt_id,avail,chosen,x,y\n"
      "1,1,a,1,1,1.25,-3\n"
      "1,1,b,1,0,0.5,2\n"
      "1,2,a,1,0,0.125,0\n"
      "1,2,b,1,1,7,1e-3\n"
      "2,1,a,1,1,1,2\n"
      "2,1,b,1,0,3,4\n");
  std::ostringstream out;
  write_choice_csv(out, ds);
  ChoiceDataset back = load_choices(out.str());
  REQUIRE(back.n_respondents() == ds.n_respondents());
  REQUIRE(back.n_situations() == ds.n_situations());
  REQUIRE(back.alternative_ids == ds.alternative_ids);
  for (int n = 0; n < ds.n_respondents(); ++n)
    for (size_t t = 0; t < ds.respondents[n].situations.size(); ++t) {
      const auto& a = ds.respondents[n].situations[t];
      const auto& b = back.respondents[n].situations[t];
      REQUIRE(a.chosen == b.chosen);
      REQUIRE(a.avail == b.avail);
      REQUIRE(a.attrs == b.attrs);
    }

  std::ostringstream out2;
  write_choice_csv(out2, back);
  REQUIRE(out.str() == out2.str());  // byte-stable emission
}

TEST_CASE("indicator table loads with missing cells") {
  IndicatorMatrix m = load_indicators(
      "resp_id,q1,q2\n"
      "1,5,3\n"
      "2,,7\n"
      "3,4,\n",
      1.0, 7.0);
  REQUIRE(m.n_rows() == 3);
  REQUIRE(m.n_cols() == 2);
  REQUIRE(m.values(0, 0) == 5.0);
  REQUIRE(m.is_missing(1, 0));
  REQUIRE(m.is_missing(2, 1));
  REQUIRE(m.complete_rows() == std::vector<int>{0});
  REQUIRE(m.complete_rows({1}) == std::vector<int>{0, 1});
  REQUIRE(m.scale_lo == 1.0);
  REQUIRE(m.scale_hi == 7.0);
}

TEST_CASE("indicator loader rejects bad input") {
  REQUIRE_THROWS_WITH(load_indicators("resp_id,q1\n1,9\n", 1.0, 7.0),
                      ContainsSubstring("outside scale"));
  REQUIRE_THROWS_WITH(load_indicators("resp_id,q1\n1,5\n1,6\n"),
                      ContainsSubstring("duplicate resp_id"));
  REQUIRE_THROWS_AS(load_indicators("id,q1\n1,5\n"), data_error);
  REQUIRE_THROWS_AS(load_indicators("resp_id\n1\n"), data_error);
  REQUIRE_THROWS_AS(load_indicators("resp_id,q1\n1,abc\n"), csv_error);
}

TEST_CASE("join aligns on the id intersection") {
  ChoiceDataset ds = load_choices(
      "resp_id,task_id,alt_id,avail,chosen,x\n"
      "1,1,a,1,1,1\n1,1,b,1,0,2\n"
      "2,1,a,1,1,1\n2,1,b,1,0,2\n"
      "3,1,a,1,1,1\n3,1,b,1,0,2\n");

  SECTION("identical id sets") {
    IndicatorMatrix m = load_indicators("resp_id,q\n1,4\n2,5\n3,6\n");
    JoinResult j = join(ds, m);
    REQUIRE(j.dropped_choice_respondents == 0);
    REQUIRE(j.dropped_indicator_rows == 0);
    REQUIRE(j.choices.n_respondents() == 3);
    for (int i = 0; i < 3; ++i)
      REQUIRE(j.indicators.respondent_ids[i] == j.choices.respondents[i].id);
  }
  SECTION("partial overlap drops and counts") {
    IndicatorMatrix m = load_indicators("resp_id,q\n2,5\n3,6\n9,1\n");
    JoinResult j = join(ds, m);
    REQUIRE(j.dropped_choice_respondents == 1);
    REQUIRE(j.dropped_indicator_rows == 1);
    REQUIRE(j.choices.n_respondents() == 2);
    REQUIRE(j.choices.respondents[0].id == "2");
    REQUIRE(j.indicators.respondent_ids == std::vector<std::string>{"2", "3"});
  }
  SECTION("disjoint ids fail") {
    IndicatorMatrix m = load_indicators("resp_id,q\n7,5\n8,6\n");
    REQUIRE_THROWS_WITH(join(ds, m), ContainsSubstring("no respondent ids"));
  }
}

TEST_CASE("indicator csv write/load round trip") {
  IndicatorMatrix m = load_indicators("resp_id,q1,q2\n1,5,3.25\n2,,7\n", 1.0, 7.0);
  std::ostringstream out;
  write_indicator_csv(out, m);
  IndicatorMatrix back = load_indicators(out.str(), 1.0, 7.0);
  REQUIRE(back.respondent_ids == m.respondent_ids);
  REQUIRE(back.values(0, 1) == 3.25);
  REQUIRE(back.is_missing(1, 0));
}
