#include "lccm/csv.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace lccm;

TEST_CASE("csv round trip with quoting") {
  Table t;
  t.header = {"a", "b,comma", "c"};
  t.rows = {{"1", "plain", "x\"quote"}, {"2", "multi\nline", ""}};
  const std::string text = write_csv_string(t);
  Table back = parse_csv_string(text);
  REQUIRE(back.header == t.header);
  REQUIRE(back.rows == t.rows);
}

TEST_CASE("csv parser rejects ragged rows") {
  REQUIRE_THROWS_AS(parse_csv_string("a,b\n1,2,3\n"), csv_error);
  REQUIRE_THROWS_AS(parse_csv_string(""), csv_error);
  REQUIRE_THROWS_AS(parse_csv_string("a,b\n\"unterminated"), csv_error);
}

TEST_CASE("csv parser handles crlf and blank lines") {
  Table t = parse_csv_string("a,b\r\n1,2\r\n\n3,4\n");
  REQUIRE(t.rows.size() == 2);
  REQUIRE(t.rows[1][1] == "4");
  REQUIRE(t.col("b") == 1);
  REQUIRE(t.col("zzz") == -1);
}

TEST_CASE("shortest round-trip float formatting") {
  REQUIRE(fmt_double(0.1) == "0.1");
  REQUIRE(fmt_double(1.0) == "1");
  REQUIRE(fmt_double(-2.5e-7) == "-2.5e-07");
  const double v = 0.317281941;
  REQUIRE(parse_double(fmt_double(v), "test") == v);
  REQUIRE(fmt_fixed(3.14159, 2) == "3.14");
}

TEST_CASE("numeric parsing reports context") {
  REQUIRE(parse_double(" 2.5 ", "x") == 2.5);
  REQUIRE_THROWS_WITH(parse_double("abc", "column days"),
                      Catch::Matchers::ContainsSubstring("column days"));
  REQUIRE(parse_long("42", "x") == 42);
  REQUIRE_THROWS_AS(parse_long("4.2", "x"), csv_error);
}

TEST_CASE("identifier ordering is numeric-aware") {
  REQUIRE(id_less("2", "10"));
  REQUIRE(!id_less("10", "2"));
  REQUIRE(id_less("1", "a"));   // numbers sort before words
  REQUIRE(id_less("alpha", "beta"));
  REQUIRE(!id_less("7", "7"));
}

TEST_CASE("markdown table layout") {
  const std::string md = markdown_table({"x", "y"}, {{"1", "2"}});
  REQUIRE(md == "| x | y |\n|---|---|\n| 1 | 2 |\n");
}
