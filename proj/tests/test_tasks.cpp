#include <doctest.h>

#include <set>
#include <sstream>

#include "circuitscope/tasks.hpp"

using namespace circuitscope;

TEST_CASE("vocabulary layout") {
  const auto& v = Vocabulary::standard();
  CHECK(v.word(0) == "<bos>");
  CHECK(v.year_token(0) == 1);
  CHECK(v.year_token(99) == 100);
  CHECK(v.word(v.year_token(43)) == "43");
  CHECK(v.year_value(v.year_token(7)) == 7);
  CHECK(v.year_value(0) == -1);
  CHECK(v.contains("he"));
  CHECK(v.contains("she"));
  CHECK(v.contains("Evan"));
  CHECK_THROWS(v.id("zebra-crossing"));
  CHECK_THROWS(v.year_token(100));
  const auto toks = v.encode("The war lasted");
  CHECK(v.decode(toks) == "The war lasted");
}

TEST_CASE("task names") {
  CHECK(parse_task("gt") == TaskKind::GreaterThan);
  CHECK(parse_task("ioi") == TaskKind::Ioi);
  CHECK(parse_task("gp") == TaskKind::GenderedPronoun);
  CHECK(task_name(TaskKind::Ioi) == "ioi");
  CHECK_THROWS_AS(parse_task("sst"), ConfigError);
}

TEST_CASE("greater-than examples") {
  const auto& v = Vocabulary::standard();
  const auto ex = gen_gt(200, 4);
  REQUIRE(ex.size() == 200);
  std::set<std::string> keys;
  for (const auto& e : ex) {
    CHECK(e.task == TaskKind::GreaterThan);
    CHECK(e.clean.size() == e.corrupt.size());
    CHECK(e.answer_position == e.clean.size() - 1);
    CHECK(e.spec.y_start >= 2);
    CHECK(e.spec.y_start <= 98);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < e.clean.size(); ++i) {
      if (e.clean[i] != e.corrupt[i]) {
        ++changed;
        CHECK(v.year_value(e.clean[i]) == e.spec.y_start);
        CHECK(e.corrupt[i] == v.year_token(1));
      }
    }
    CHECK(changed >= 1);
    CHECK(e.clean[e.answer_position] == e.corrupt[e.answer_position]);
    keys.insert(e.fill_key);
  }
  CHECK(keys.size() == ex.size());
  CHECK(gen_gt(50, 4).front().clean == ex.front().clean);
}

TEST_CASE("IOI examples") {
  for (auto mode : {IoiCorruption::Abc, IoiCorruption::Xyz}) {
    const auto ex = gen_ioi(100, 2, mode);
    for (const auto& e : ex) {
      CHECK(e.spec.io != e.spec.s);
      CHECK(e.clean.size() == e.corrupt.size());
      std::size_t changed = 0;
      std::size_t io = 0, s = 0;
      for (std::size_t i = 0; i < e.clean.size(); ++i) {
        changed += e.clean[i] != e.corrupt[i];
        io += e.clean[i] == e.spec.io;
        s += e.clean[i] == e.spec.s;
      }
      CHECK(io == 1);
      CHECK(s == 2);
      CHECK(changed == (mode == IoiCorruption::Abc ? 1u : 3u));
    }
  }
}

TEST_CASE("gendered pronoun examples") {
  const auto& v = Vocabulary::standard();
  const auto ex = gen_gp(60, 9);
  std::size_t male = 0;
  for (const auto& e : ex) {
    CHECK(((e.spec.consistent == v.id("he") && e.spec.inconsistent == v.id("she")) ||
           (e.spec.consistent == v.id("she") && e.spec.inconsistent == v.id("he"))));
    male += e.spec.consistent == v.id("he");
    std::size_t changed = 0;
    for (std::size_t i = 0; i < e.clean.size(); ++i) changed += e.clean[i] != e.corrupt[i];
    CHECK(changed == 1);
  }
  CHECK(male == 30);
}

TEST_CASE("splits are disjoint and sized") {
  SplitSizes sizes;
  sizes.base = 300;
  sizes.train = 40;
  sizes.validation = 30;
  sizes.test = 20;
  const auto s = make_splits(TaskKind::GreaterThan, sizes, 1);
  CHECK(s.base.size() == 300);
  CHECK(s.train.size() == 40);
  CHECK(s.validation.size() == 30);
  CHECK(s.test.size() == 20);
  std::set<std::string> keys;
  for (const auto* part : {&s.base, &s.train, &s.validation, &s.test}) {
    for (const auto& e : *part) keys.insert(e.fill_key);
  }
  CHECK(keys.size() == 390);
  CHECK(default_split_sizes(TaskKind::Ioi).test == 200);
  CHECK(default_split_sizes(TaskKind::GenderedPronoun).base == 800);
}

TEST_CASE("generator refuses impossible sizes") {
  CHECK_THROWS(gen_gp(1000000, 1));
}

TEST_CASE("JSON lines round trip") {
  std::vector<TaskExample> all = gen_gt(3, 1);
  for (auto& e : gen_ioi(3, 1)) all.push_back(e);
  for (auto& e : gen_gp(3, 1)) all.push_back(e);
  std::stringstream ss;
  write_jsonl(ss, all);
  const auto back = read_jsonl(ss);
  REQUIRE(back.size() == all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(back[i].task == all[i].task);
    CHECK(back[i].clean == all[i].clean);
    CHECK(back[i].corrupt == all[i].corrupt);
    CHECK(back[i].answer_position == all[i].answer_position);
    CHECK(back[i].spec.y_start == all[i].spec.y_start);
    CHECK(back[i].spec.io == all[i].spec.io);
    CHECK(back[i].spec.consistent == all[i].spec.consistent);
    CHECK(back[i].fill_key == all[i].fill_key);
  }
  CHECK_THROWS(example_from_json(nlohmann::json::parse(R"({"clean":[0,1],"corrupt":[0],"spec":{"task":"gt"}})")));
}
