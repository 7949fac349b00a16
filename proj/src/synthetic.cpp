#include "prag/synthetic.hpp"

#include "prag/binary_io.hpp"
#include "prag/hashing.hpp"
#include "prag/random.hpp"

#include <algorithm>
#include <array>
#include <optional>
#include <cstdio>
#include <vector>

namespace prag {

namespace {

const std::vector<std::string> kSurnames = {"Zhang", "Wang", "Li",   "Zhao", "Chen", "Liu",  "Yang", "Huang", "Zhou", "Wu",
                                            "Xu",    "Sun",  "Ma",   "Zhu",  "Hu",   "Guo",  "He",   "Lin",   "Luo",  "Gao",
                                            "Liang", "Qiu",  "Tang", "Feng", "Deng", "Cao",  "Peng", "Xie",   "Han",  "Pan"};
const std::vector<std::string> kSyllables = {"wei", "fang", "hao", "jun", "lei", "min", "qiang", "ting", "yan", "yong",
                                             "jie", "lin",  "ning", "tao", "xin", "bo",  "kai",   "rui",  "shan", "yu",
                                             "zhen", "hui", "dong", "mei", "ping", "ran", "xuan", "yi",   "chen", "long"};
const std::vector<std::string> kCities = {"Harbin", "Changsha", "Kunming", "Hefei",   "Nanning", "Taiyuan", "Lanzhou",
                                          "Xiamen", "Wuxi",     "Zhuhai",  "Guiyang", "Yantai",  "Baotou",  "Jilin"};
const std::vector<std::string> kMonths = {"January", "February", "March",     "April",   "May",      "June",
                                          "July",    "August",   "September", "October", "November", "December"};

struct Ctx {
  Rng& rng;
  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[rng.below(v.size())];
  }
  int range(int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }
  std::string name() {
    std::string given = pick(kSyllables) + pick(kSyllables);
    given[0] = static_cast<char>(given[0] - 'a' + 'A');
    return pick(kSurnames) + " " + given;
  }
  std::string date(int year) { return std::to_string(range(1, 28)) + " " + pick(kMonths) + " " + std::to_string(year); }
  // Amounts are rounded to tens so they read like real figures.
  int amount(int lo, int hi) { return range(lo / 10, hi / 10) * 10; }
};

std::string iso_date(int y, int m, int d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", y, m, d);
  return buf;
}

std::string cite(int article, const std::string& law) { return "Article " + std::to_string(article) + " of the " + law; }

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += sep;
    out += p;
  }
  return out;
}

struct Draft {
  std::string domain;
  std::string cause;
  std::string date;
  std::string fact;
  std::string focus;
  std::string reason;
  std::string judgment;
  std::vector<std::string> articles;
};

const std::vector<std::string> kCriminalCauses = {"theft", "fraud", "robbery", "intentional injury", "dangerous driving",
                                                  "embezzlement"};
const std::vector<std::string> kCivilCauses = {"loan dispute", "sales contract dispute", "lease dispute"};

Draft criminal(Ctx& c, const std::string& cause, bool prosecution_note) {
  const std::string law = "Criminal Law";
  const int year = c.range(2018, 2023);
  const std::string d = c.name();
  const std::string v = c.name();
  const std::string city = c.pick(kCities);
  const std::string when = c.date(year);
  const std::string arrest = c.date(year);
  Draft r;
  r.domain = "criminal";
  r.cause = cause;
  r.date = iso_date(year + 1, c.range(1, 12), c.range(1, 28));
  int amount = 0;
  int article = 0;
  std::string conduct;
  std::string issue;
  if (cause == "theft") {
    static const std::vector<std::string> items = {"a laptop", "a gold necklace", "an electric scooter", "two mobile phones",
                                                   "a camera"};
    amount = c.amount(2000, 40000);
    article = 264;
    r.fact = "On " + when + ", the defendant " + d + " entered the home of the victim " + v + " in " + city +
             " through an unlocked window and stole " + c.pick(items) + " together with cash, goods worth " +
             std::to_string(amount) + " yuan in total. The defendant was arrested on " + arrest +
             " and confessed truthfully; the stolen goods were returned to the victim.";
    conduct = "secretly took property of others worth " + std::to_string(amount) + " yuan";
    issue = "whether the value of the stolen goods reaches the threshold of a relatively large amount";
  } else if (cause == "fraud") {
    static const std::vector<std::string> roles = {"a bank clerk", "a customs officer", "a property agent",
                                                   "a school official"};
    amount = c.amount(5000, 90000);
    article = 266;
    r.fact = "In " + c.pick(kMonths) + " " + std::to_string(year) + ", the defendant " + d + " posed as " + c.pick(roles) +
             " and persuaded the victim " + v + " in " + city + " to transfer " + std::to_string(amount) +
             " yuan to an account the defendant controlled, promising a refund that never came. The defendant was "
             "arrested on " +
             arrest + " and admitted the facts.";
    conduct = "obtained " + std::to_string(amount) + " yuan from the victim by fabricating an identity";
    issue = "whether the defendant intended to take the money permanently";
  } else if (cause == "robbery") {
    static const std::vector<std::string> weapons = {"a kitchen knife", "an iron bar", "a broken bottle"};
    amount = c.amount(500, 8000);
    article = 263;
    r.fact = "On the night of " + when + ", the defendant " + d + " threatened the victim " + v + " with " +
             c.pick(weapons) + " near a bus station in " + city + " and took a wallet holding " + std::to_string(amount) +
             " yuan. Police arrested the defendant on " + arrest + " after reviewing street cameras.";
    conduct = "took " + std::to_string(amount) + " yuan from the victim by threatening violence";
    issue = "whether the threat used amounts to violence that prevented resistance";
  } else if (cause == "intentional injury") {
    amount = c.amount(3000, 30000);
    article = 234;
    r.fact = "On " + when + ", the defendant " + d + " quarrelled with the victim " + v + " over a parking space in " +
             city + " and struck the victim with a wooden stick, causing a minor injury of the second grade. Medical "
             "costs came to " +
             std::to_string(amount) + " yuan. The defendant surrendered on " + arrest + ".";
    conduct = "intentionally injured the body of another, causing a minor injury";
    issue = "whether the victim's own conduct provoked the assault";
  } else if (cause == "dangerous driving") {
    const int bac = c.range(85, 220);
    amount = c.amount(2000, 9000);
    article = 133;
    r.fact = "On " + when + ", the defendant " + d + " drove a car along Riverside Road in " + city +
             " after drinking at a dinner and was stopped at a checkpoint. A blood test showed " + std::to_string(bac) +
             " mg of alcohol per 100 ml. The defendant " + d + " cooperated with the police and paid " +
             std::to_string(amount) + " yuan for damage to a roadside barrier.";
    conduct = "drove a motor vehicle on a road while intoxicated with " + std::to_string(bac) + " mg of alcohol per 100 ml";
    issue = "whether the blood test was taken within the required time";
  } else {
    static const std::vector<std::string> jobs = {"cashier", "warehouse keeper", "sales manager", "accountant"};
    amount = c.amount(20000, 150000);
    article = 271;
    r.fact = "While working as a " + c.pick(jobs) + " at a trading company in " + city + ", the defendant " + d +
             " moved " + std::to_string(amount) + " yuan of company funds into a personal account between " + when +
             " and " + arrest + ". The company reported the loss and the defendant repaid part of the money.";
    conduct = "used the convenience of the position to take " + std::to_string(amount) + " yuan of company funds";
    issue = "whether the defendant held a position that gave control over the funds";
  }
  const int months = c.pick(std::vector<int>{6, 8, 10, 12, 18, 24, 30, 36, 42, 48});
  const bool probation = months <= 24 && c.range(0, 1) == 1;
  const int probation_months = months + c.pick(std::vector<int>{6, 12});
  const int fine = c.amount(1000, std::max(2000, amount / 4));
  if (prosecution_note)
    r.fact += " The prosecution recommended " + std::to_string(months) + " months of imprisonment.";

  r.articles = {cite(article, law), cite(67, law), cite(52, law)};
  if (probation) r.articles.push_back(cite(72, law));
  r.focus = "The dispute is " + issue + ".";
  r.reason = "The court considers that the defendant " + d + " " + conduct + ", and the conduct constitutes " + cause +
             ". Because the defendant confessed truthfully, a lighter punishment may be given. In accordance with " +
             join(r.articles, ", ") + ", the judgment is as follows.";
  r.judgment = "The defendant " + d + " is guilty of " + cause + " and is sentenced to " + std::to_string(months) +
               " months of imprisonment";
  if (probation) r.judgment += ", suspended with " + std::to_string(probation_months) + " months of probation";
  r.judgment += ", and a fine of " + std::to_string(fine) + " yuan.";
  return r;
}

Draft civil(Ctx& c, const std::string& cause) {
  const std::string law = "Civil Code";
  const int year = c.range(2019, 2023);
  const std::string p = c.name();
  const std::string d = c.name();
  const std::string city = c.pick(kCities);
  const std::string when = c.date(year);
  const int amount = c.amount(10000, 200000);
  const int paid = c.amount(1000, amount / 2);
  Draft r;
  r.domain = "civil";
  r.cause = cause;
  r.date = iso_date(year + 1, c.range(1, 12), c.range(1, 28));
  std::vector<int> arts;
  if (cause == "loan dispute") {
    r.fact = "On " + when + ", the plaintiff " + p + " lent " + std::to_string(amount) + " yuan to the defendant " + d +
             " in " + city + ", and the defendant signed a note promising repayment within one year. The defendant repaid " +
             std::to_string(paid) + " yuan and then stopped answering calls, so the plaintiff sued for the balance.";
    arts = {667, 675, 676};
  } else if (cause == "sales contract dispute") {
    r.fact = "On " + when + ", the plaintiff " + p + " agreed to sell building materials to the defendant " + d + " in " +
             city + " for " + std::to_string(amount) + " yuan. The plaintiff delivered the goods, but the defendant paid only " +
             std::to_string(paid) + " yuan and claimed that part of the batch was damaged.";
    arts = {509, 577, 626};
  } else {
    r.fact = "On " + when + ", the plaintiff " + p + " leased a shop in " + city + " to the defendant " + d +
             " for a yearly rent of " + std::to_string(amount) + " yuan. After paying " + std::to_string(paid) +
             " yuan the defendant stopped paying rent and kept using the shop for several months.";
    arts = {703, 721, 722};
  }
  const int owed = amount - paid;
  for (int a : arts) r.articles.push_back(cite(a, law));
  r.focus = "The dispute is whether the defendant still owes " + std::to_string(owed) + " yuan to the plaintiff.";
  r.reason = "The court considers that the contract between the plaintiff " + p + " and the defendant " + d +
             " is valid, and the defendant failed to perform the payment obligation in full. Under " +
             join(r.articles, ", ") + ", the defendant shall bear liability for breach.";
  r.judgment = "The defendant " + d + " shall pay the plaintiff " + p + " " + std::to_string(owed) +
               " yuan within ten days, and the remaining claims of the plaintiff are dismissed.";
  return r;
}

std::string render(const std::string& id, const Draft& d) {
  std::string s = "ID: " + id + "\nDOMAIN: " + d.domain + "\nCAUSE: " + d.cause + "\nDATE: " + d.date + "\n";
  s += "FACTS: " + d.fact + "\n";
  s += "FOCUS: " + d.focus + "\n";
  s += "REASONING: " + d.reason + "\n";
  s += "JUDGMENT: " + d.judgment + "\n";
  s += "ARTICLES: " + join(d.articles, "; ") + "\n";
  return s;
}

std::string make_doc(const std::string& id, std::uint64_t seed, std::size_t index, double civil_fraction,
                     bool prosecution_note, std::optional<std::string> cause = std::nullopt) {
  Rng rng(derive_seed(seed, id));
  Ctx c{rng};
  if (!cause) {
    const bool is_civil = rng.uniform() < civil_fraction;
    const auto& pool = is_civil ? kCivilCauses : kCriminalCauses;
    cause = pool[index % pool.size()];
  }
  const bool is_civil = std::find(kCivilCauses.begin(), kCivilCauses.end(), *cause) != kCivilCauses.end();
  return render(id, is_civil ? civil(c, *cause) : criminal(c, *cause, prosecution_note));
}

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%03zu", prefix, i + 1);
  return buf;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& opts) {
  SyntheticCorpus out;
  const std::string sep = "=====\n";
  std::vector<std::string> online_causes;
  for (std::size_t i = 0; i < opts.offline; ++i) {
    if (i) out.offline_raw += sep;
    out.offline_raw += make_doc(numbered("off", i), derive_seed(opts.seed, "offline"), i, opts.civil_fraction, false);
  }
  for (std::size_t i = 0; i < opts.online; ++i) {
    if (i) out.online_raw += sep;
    const std::string doc = make_doc(numbered("onl", i), derive_seed(opts.seed, "online"), i, opts.civil_fraction, i % 3 == 0);
    const auto p = doc.find("CAUSE: ") + 7;
    online_causes.push_back(doc.substr(p, doc.find('\n', p) - p));
    out.online_raw += doc;
  }
  // Test cases share a cause with some online case so retrieval has a target.
  for (std::size_t i = 0; i < opts.test; ++i) {
    if (i) out.test_raw += sep;
    std::optional<std::string> cause;
    if (!online_causes.empty()) cause = online_causes[(i * 3) % online_causes.size()];
    out.test_raw += make_doc(numbered("tst", i), derive_seed(opts.seed, "test"), i, opts.civil_fraction, true, cause);
  }
  return out;
}

void write_synthetic_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  binary::write_file(dir / "offline.txt", corpus.offline_raw);
  binary::write_file(dir / "online.txt", corpus.online_raw);
  binary::write_file(dir / "test.txt", corpus.test_raw);
}

}  // namespace prag
