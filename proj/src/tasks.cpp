#include "circuitscope/tasks.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace circuitscope {

namespace {

const std::vector<std::string> kGtTemplates = {
    "The {noun} lasted from the year {cc} {yy} to the year {cc}",
    "The {noun} started in the year {cc} {yy} and ended in the year {cc}",
    "The {noun} began in {cc} {yy} and it stopped in {cc}",
    "The {noun} ran from the year {cc} {yy} until the year {cc}",
    "The {noun} lasted from {cc} {yy} to {cc}",
};

const std::vector<std::string> kIoiTemplates = {
    "Then , {X1} and {X2} had a long argument . Afterwards , {S} said to",
    "Friends {X1} and {X2} found a mango at the bar . {S} gave it to",
    "When {X1} and {X2} went to the store , {S} gave a drink to",
    "After {X1} and {X2} went to the park , {S} handed a ball to",
    "{X1} and {X2} had lunch at the cafe . {S} passed the salt to",
    "While {X1} and {X2} were working at the office , {S} sent an email to",
};

const std::vector<std::string> kGpTemplates = {
    "So {name} is a really {adj} friend , isn't",
    "{name} is such a {adj} person , isn't",
    "Well {name} is a very {adj} neighbor , isn't",
    "I think {name} is a truly {adj} teacher , isn't",
};

const std::vector<std::string> kGpAdjectives = {"great", "good", "kind", "nice", "funny", "smart"};

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

bool is_slot(const std::string& w) { return w.size() > 2 && w.front() == '{' && w.back() == '}'; }

struct Filled {
  Tokens tokens;
  std::map<std::string, std::vector<std::size_t>> slots;
};

Filled fill(const std::string& tmpl, const std::map<std::string, std::string>& values) {
  const auto& vocab = Vocabulary::standard();
  Filled f;
  f.tokens.push_back(vocab.bos());
  for (const auto& w : split_words(tmpl)) {
    if (is_slot(w)) {
      f.slots[w].push_back(f.tokens.size());
      f.tokens.push_back(vocab.id(values.at(w)));
    } else {
      f.tokens.push_back(vocab.id(w));
    }
  }
  return f;
}

std::string two_digit(int v) {
  std::string s = std::to_string(v);
  return v < 10 ? "0" + s : s;
}

template <class Rng>
std::size_t pick(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

void require_capacity(std::size_t n, std::size_t space, std::string_view task) {
  if (n > space) {
    throw std::invalid_argument(std::string(task) + ": requested " + std::to_string(n) +
                                " examples but only " + std::to_string(space) + " distinct fills exist");
  }
}

}  // namespace

std::string_view task_name(TaskKind t) {
  switch (t) {
    case TaskKind::GreaterThan: return "gt";
    case TaskKind::Ioi: return "ioi";
    case TaskKind::GenderedPronoun: return "gp";
  }
  return "unknown";
}

TaskKind parse_task(std::string_view name) {
  if (name == "gt") return TaskKind::GreaterThan;
  if (name == "ioi") return TaskKind::Ioi;
  if (name == "gp") return TaskKind::GenderedPronoun;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected gt, ioi or gp)");
}

IoiCorruption parse_ioi_corruption(std::string_view name) {
  if (name == "abc") return IoiCorruption::Abc;
  if (name == "xyz") return IoiCorruption::Xyz;
  throw ConfigError("unknown IOI corruption '" + std::string(name) + "' (expected abc or xyz)");
}

const std::vector<std::string>& male_names() {
  static const std::vector<std::string> names = {
      "Evan",   "James", "John",  "Robert", "Michael", "William", "David",  "Richard", "Joseph", "Thomas",
      "Daniel", "Mark",  "Paul",  "Steven", "Andrew",  "Kevin",   "Brian",  "George",  "Edward", "Ryan",
      "Jacob",  "Gary",  "Eric",  "Jason",  "Justin",  "Scott",   "Brandon", "Frank",  "Gregory", "Samuel"};
  return names;
}

const std::vector<std::string>& female_names() {
  static const std::vector<std::string> names = {
      "Mary",   "Patricia", "Jennifer", "Linda",  "Elizabeth", "Barbara", "Susan",   "Jessica", "Sarah", "Karen",
      "Nancy",  "Lisa",     "Betty",    "Sandra", "Ashley",    "Emily",   "Donna",   "Michelle", "Carol", "Amanda",
      "Melissa", "Deborah", "Laura",    "Rebecca", "Sharon",   "Cynthia", "Kathleen", "Amy",     "Angela", "Anna"};
  return names;
}

const std::vector<std::string>& ioi_names() {
  static const std::vector<std::string> names = {
      "Juana",  "Kristi", "Alice",  "Bob",    "Carlos", "Diana", "Ethan",  "Fiona", "Gavin",  "Hannah",
      "Ivan",   "Julia",  "Kyle",   "Leah",   "Marco",  "Nora",  "Oscar",  "Paula", "Quinn",  "Rosa",
      "Simon",  "Tara",   "Umar",   "Vera",   "Wade",   "Xena",  "Yusuf",  "Zoe",   "Aaron",  "Bella",
      "Colin",  "Daisy",  "Felix",  "Grace",  "Henry",  "Iris",  "Jonah",  "Kara",  "Liam",   "Maya"};
  return names;
}

const std::vector<std::string>& gt_nouns() {
  static const std::vector<std::string> nouns = {
      "war",     "drought",  "expedition", "siege",    "famine",  "campaign", "voyage",
      "reign",   "plague",   "rebellion",  "dynasty",  "alliance", "construction", "trial",
      "strike",  "journey",  "festival",   "embargo",  "occupation", "migration"};
  return nouns;
}

Vocabulary::Vocabulary() {
  words_.push_back("<bos>");
  first_year_ = static_cast<Token>(words_.size());
  for (int y = 0; y < 100; ++y) words_.push_back(two_digit(y));
  std::set<std::string> rest;
  auto add_text = [&](const std::string& t) {
    for (const auto& w : split_words(t)) {
      if (!is_slot(w)) rest.insert(w);
    }
  };
  for (const auto& t : kGtTemplates) add_text(t);
  for (const auto& t : kIoiTemplates) add_text(t);
  for (const auto& t : kGpTemplates) add_text(t);
  for (const auto* list : {&gt_nouns(), &male_names(), &female_names(), &ioi_names(), &kGpAdjectives}) {
    rest.insert(list->begin(), list->end());
  }
  rest.insert("he");
  rest.insert("she");
  for (const auto& w : rest) {
    if (!ids_.contains(w) && std::find(words_.begin(), words_.end(), w) == words_.end()) words_.push_back(w);
  }
  for (std::size_t i = 0; i < words_.size(); ++i) ids_.emplace(words_[i], static_cast<Token>(i));
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

Token Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw std::out_of_range("word '" + std::string(word) + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocabulary::word(Token id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " is not in the vocabulary");
  }
  return words_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view word) const { return ids_.find(word) != ids_.end(); }

Token Vocabulary::year_token(int two_digit_value) const {
  if (two_digit_value < 0 || two_digit_value > 99) throw std::out_of_range("year value outside 00..99");
  return first_year_ + two_digit_value;
}

int Vocabulary::year_value(Token id) const {
  const int v = id - first_year_;
  return (v >= 0 && v < 100) ? v : -1;
}

Tokens Vocabulary::encode(std::string_view text) const {
  Tokens out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const Token> tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += word(tokens[i]);
  }
  return out;
}

std::vector<TaskExample> gen_gt(std::size_t n, std::uint64_t seed) {
  const auto& nouns = gt_nouns();
  const std::size_t space = kGtTemplates.size() * nouns.size() * 11 * 97;
  require_capacity(n, space, "gt");
  std::mt19937_64 rng(seed);
  std::set<std::string> used;
  std::vector<TaskExample> out;
  const auto& vocab = Vocabulary::standard();
  while (out.size() < n) {
    const std::size_t t = pick(rng, kGtTemplates.size());
    const std::size_t noun = pick(rng, nouns.size());
    const int century = 11 + static_cast<int>(pick(rng, 11));
    const int yy = 2 + static_cast<int>(pick(rng, 97));
    const std::string key = "gt/" + std::to_string(t) + "/" + nouns[noun] + "/" + std::to_string(century) + "/" +
                            two_digit(yy);
    if (!used.insert(key).second) continue;
    const Filled f =
        fill(kGtTemplates[t], {{"{noun}", nouns[noun]}, {"{cc}", two_digit(century)}, {"{yy}", two_digit(yy)}});
    TaskExample ex;
    ex.task = TaskKind::GreaterThan;
    ex.clean = f.tokens;
    ex.corrupt = f.tokens;
    for (std::size_t pos : f.slots.at("{yy}")) ex.corrupt[pos] = vocab.year_token(1);
    ex.answer_position = ex.clean.size() - 1;
    ex.spec.y_start = yy;
    ex.fill_key = key;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> gen_ioi(std::size_t n, std::uint64_t seed, IoiCorruption corruption) {
  const auto& names = ioi_names();
  const std::size_t space = kIoiTemplates.size() * 2 * names.size() * (names.size() - 1);
  require_capacity(n, space, "ioi");
  std::mt19937_64 rng(seed);
  std::set<std::string> used;
  std::vector<TaskExample> out;
  const auto& vocab = Vocabulary::standard();
  auto fresh = [&](std::initializer_list<std::size_t> avoid) {
    for (;;) {
      const std::size_t z = pick(rng, names.size());
      if (std::find(avoid.begin(), avoid.end(), z) == avoid.end()) return z;
    }
  };
  while (out.size() < n) {
    const std::size_t t = pick(rng, kIoiTemplates.size());
    const bool io_first = pick(rng, 2) == 0;
    const std::size_t a = pick(rng, names.size());
    const std::size_t b = pick(rng, names.size());
    if (a == b) continue;
    const std::string key = "ioi/" + std::to_string(t) + "/" + (io_first ? "ab" : "ba") + "/" + names[a] + "/" + names[b];
    if (!used.insert(key).second) continue;
    const std::string& x1 = io_first ? names[a] : names[b];
    const std::string& x2 = io_first ? names[b] : names[a];
    const Filled f = fill(kIoiTemplates[t], {{"{X1}", x1}, {"{X2}", x2}, {"{S}", names[b]}});
    TaskExample ex;
    ex.task = TaskKind::Ioi;
    ex.clean = f.tokens;
    ex.corrupt = f.tokens;
    const std::size_t s_pos = f.slots.at("{S}").front();
    const std::size_t a_pos = f.slots.at(io_first ? "{X1}" : "{X2}").front();
    const std::size_t b_pos = f.slots.at(io_first ? "{X2}" : "{X1}").front();
    if (corruption == IoiCorruption::Abc) {
      ex.corrupt[s_pos] = vocab.id(names[fresh({a, b})]);
    } else {
      const std::size_t x = fresh({a, b});
      const std::size_t y = fresh({a, b, x});
      const std::size_t z = fresh({a, b, x, y});
      ex.corrupt[a_pos] = vocab.id(names[x]);
      ex.corrupt[b_pos] = vocab.id(names[y]);
      ex.corrupt[s_pos] = vocab.id(names[z]);
    }
    ex.answer_position = ex.clean.size() - 1;
    ex.spec.io = vocab.id(names[a]);
    ex.spec.s = vocab.id(names[b]);
    ex.fill_key = key;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> gen_gp(std::size_t n, std::uint64_t seed) {
  const auto& male = male_names();
  const auto& female = female_names();
  const std::size_t space = kGpTemplates.size() * kGpAdjectives.size() * std::min(male.size(), female.size()) * 2;
  require_capacity(n, space, "gp");
  std::mt19937_64 rng(seed);
  std::set<std::string> used;
  std::vector<TaskExample> out;
  const auto& vocab = Vocabulary::standard();
  while (out.size() < n) {
    const bool is_male = out.size() % 2 == 0;
    const auto& own = is_male ? male : female;
    const auto& other = is_male ? female : male;
    const std::size_t t = pick(rng, kGpTemplates.size());
    const std::size_t name = pick(rng, own.size());
    const std::size_t adj = pick(rng, kGpAdjectives.size());
    const std::string key = "gp/" + std::to_string(t) + "/" + own[name] + "/" + kGpAdjectives[adj];
    if (!used.insert(key).second) continue;
    const Filled f = fill(kGpTemplates[t], {{"{name}", own[name]}, {"{adj}", kGpAdjectives[adj]}});
    TaskExample ex;
    ex.task = TaskKind::GenderedPronoun;
    ex.clean = f.tokens;
    ex.corrupt = f.tokens;
    ex.corrupt[f.slots.at("{name}").front()] = vocab.id(other[pick(rng, other.size())]);
    ex.answer_position = ex.clean.size() - 1;
    ex.spec.consistent = vocab.id(is_male ? "he" : "she");
    ex.spec.inconsistent = vocab.id(is_male ? "she" : "he");
    ex.fill_key = key;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> generate(TaskKind task, std::size_t n, std::uint64_t seed, IoiCorruption corruption) {
  switch (task) {
    case TaskKind::GreaterThan: return gen_gt(n, seed);
    case TaskKind::Ioi: return gen_ioi(n, seed, corruption);
    case TaskKind::GenderedPronoun: return gen_gp(n, seed);
  }
  return {};
}

SplitSizes default_split_sizes(TaskKind task) {
  SplitSizes s;
  if (task == TaskKind::Ioi) {
    s.train = 200;
    s.validation = 200;
    s.test = 200;
  }
  if (task == TaskKind::GenderedPronoun) s.base = 800;
  return s;
}

TaskSplits make_splits(TaskKind task, const SplitSizes& sizes, std::uint64_t seed, IoiCorruption corruption) {
  const std::size_t total = sizes.base + sizes.train + sizes.validation + sizes.test;
  auto all = generate(task, total, seed, corruption);
  TaskSplits s;
  auto take = [&](std::size_t begin, std::size_t count) {
    return std::vector<TaskExample>(all.begin() + static_cast<std::ptrdiff_t>(begin),
                                    all.begin() + static_cast<std::ptrdiff_t>(begin + count));
  };
  s.train = take(0, sizes.train);
  s.validation = take(sizes.train, sizes.validation);
  s.test = take(sizes.train + sizes.validation, sizes.test);
  s.base = take(sizes.train + sizes.validation + sizes.test, sizes.base);
  return s;
}

nlohmann::json example_to_json(const TaskExample& ex) {
  nlohmann::json spec = {{"task", task_name(ex.task)}, {"answer_position", ex.answer_position}, {"key", ex.fill_key}};
  switch (ex.task) {
    case TaskKind::GreaterThan: spec["y_start"] = ex.spec.y_start; break;
    case TaskKind::Ioi:
      spec["io"] = ex.spec.io;
      spec["s"] = ex.spec.s;
      break;
    case TaskKind::GenderedPronoun:
      spec["consistent"] = ex.spec.consistent;
      spec["inconsistent"] = ex.spec.inconsistent;
      break;
  }
  return {{"clean", ex.clean}, {"corrupt", ex.corrupt}, {"spec", spec}};
}

TaskExample example_from_json(const nlohmann::json& j) {
  TaskExample ex;
  ex.clean = j.at("clean").get<Tokens>();
  ex.corrupt = j.at("corrupt").get<Tokens>();
  const auto& spec = j.at("spec");
  ex.task = parse_task(spec.at("task").get<std::string>());
  ex.answer_position = spec.value("answer_position", ex.clean.empty() ? 0 : ex.clean.size() - 1);
  ex.fill_key = spec.value("key", "");
  ex.spec.y_start = spec.value("y_start", -1);
  ex.spec.io = spec.value("io", -1);
  ex.spec.s = spec.value("s", -1);
  ex.spec.consistent = spec.value("consistent", -1);
  ex.spec.inconsistent = spec.value("inconsistent", -1);
  if (ex.clean.size() != ex.corrupt.size()) throw std::invalid_argument("clean/corrupt length mismatch");
  if (ex.answer_position >= ex.clean.size()) throw std::invalid_argument("answer position out of range");
  return ex;
}

void write_jsonl(std::ostream& out, const std::vector<TaskExample>& examples) {
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

std::vector<TaskExample> read_jsonl(std::istream& in) {
  std::vector<TaskExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(example_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace circuitscope
