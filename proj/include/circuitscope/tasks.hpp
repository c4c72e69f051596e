#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "circuitscope/model.hpp"

namespace circuitscope {

enum class TaskKind { GreaterThan, Ioi, GenderedPronoun };

std::string_view task_name(TaskKind t);  // "gt", "ioi", "gp"
TaskKind parse_task(std::string_view name);

// Word-level vocabulary shared by all tasks. Two-digit year tokens "00".."99"
// are contiguous and double as century tokens.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  std::size_t size() const { return words_.size(); }
  Token id(std::string_view word) const;
  const std::string& word(Token id) const;
  bool contains(std::string_view word) const;

  Token year_token(int two_digit) const;
  // Two-digit value of a year token, or -1.
  int year_value(Token id) const;
  Token bos() const { return 0; }

  Tokens encode(std::string_view text) const;
  std::string decode(std::span<const Token> tokens) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::map<std::string, Token, std::less<>> ids_;
  Token first_year_ = 0;
};

const std::vector<std::string>& male_names();
const std::vector<std::string>& female_names();
const std::vector<std::string>& ioi_names();
const std::vector<std::string>& gt_nouns();

struct AnswerSpec {
  int y_start = -1;       // GT
  Token io = -1;          // IOI
  Token s = -1;           // IOI
  Token consistent = -1;  // GP
  Token inconsistent = -1;
};

struct TaskExample {
  TaskKind task = TaskKind::GreaterThan;
  Tokens clean;
  Tokens corrupt;
  std::size_t answer_position = 0;
  AnswerSpec spec;
  // Identity of the template fill; splits are disjoint on this key.
  std::string fill_key;
};

enum class IoiCorruption {
  Abc,  // repeated subject replaced by a fresh name
  Xyz,  // all three name mentions replaced by fresh names
};

IoiCorruption parse_ioi_corruption(std::string_view name);

std::vector<TaskExample> gen_gt(std::size_t n, std::uint64_t seed);
std::vector<TaskExample> gen_ioi(std::size_t n, std::uint64_t seed, IoiCorruption corruption = IoiCorruption::Abc);
std::vector<TaskExample> gen_gp(std::size_t n, std::uint64_t seed);
std::vector<TaskExample> generate(TaskKind task, std::size_t n, std::uint64_t seed,
                                  IoiCorruption corruption = IoiCorruption::Abc);

struct SplitSizes {
  std::size_t base = 2000;  // used only to base-train the toy model
  std::size_t train = 150;
  std::size_t validation = 150;
  std::size_t test = 150;
};

struct TaskSplits {
  std::vector<TaskExample> base;
  std::vector<TaskExample> train;
  std::vector<TaskExample> validation;
  std::vector<TaskExample> test;
};

SplitSizes default_split_sizes(TaskKind task);
TaskSplits make_splits(TaskKind task, const SplitSizes& sizes, std::uint64_t seed,
                       IoiCorruption corruption = IoiCorruption::Abc);

nlohmann::json example_to_json(const TaskExample& ex);
TaskExample example_from_json(const nlohmann::json& j);
void write_jsonl(std::ostream& out, const std::vector<TaskExample>& examples);
std::vector<TaskExample> read_jsonl(std::istream& in);

}  // namespace circuitscope
