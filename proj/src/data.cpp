#include "convrec/data.hpp"

#include "convrec/rng.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace convrec {

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

[[noreturn]] void fail(const std::string& path, size_t line_no, const std::string& msg) {
  throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + msg);
}

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

std::ofstream create_or_throw(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

long parse_long(const std::string& s, const std::string& path, size_t line_no,
                const char* what) {
  try {
    size_t pos = 0;
    long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing chars");
    return v;
  } catch (const std::exception&) {
    fail(path, line_no, std::string("bad ") + what + " '" + s + "'");
  }
}

}  // namespace

const std::vector<int>& Catalog::attributes_of(int item) const {
  if (item < kFirstItemId || item >= items.end_id())
    throw std::out_of_range("attributes_of: item id " + std::to_string(item) +
                            " outside catalog");
  return item_attrs[static_cast<size_t>(item)];
}

bool Catalog::item_has_attribute(int item, int attr) const {
  const auto& a = attributes_of(item);
  return std::binary_search(a.begin(), a.end(), attr);
}

std::int64_t InteractionLog::total_interactions() const {
  std::int64_t n = 0;
  for (const auto& s : sequences) n += static_cast<std::int64_t>(s.size());
  return n;
}

Catalog load_catalog(const std::string& path, const IdMap* expected_attrs) {
  auto in = open_or_throw(path);
  Catalog cat;
  cat.item_attrs.resize(kFirstItemId);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    if (cols.size() != 2) fail(path, line_no, "expected item<TAB>attr,attr,...");
    if (cat.items.find(cols[0])) fail(path, line_no, "duplicate item '" + cols[0] + "'");
    const int item = cat.items.add(cols[0]);
    std::vector<int> attrs;
    for (const auto& tok : split(cols[1], ',')) {
      if (tok.empty()) fail(path, line_no, "empty attribute token");
      if (expected_attrs && !expected_attrs->find(tok))
        fail(path, line_no, "unknown attribute '" + tok + "'");
      attrs.push_back(cat.attrs.add(tok));
    }
    std::sort(attrs.begin(), attrs.end());
    attrs.erase(std::unique(attrs.begin(), attrs.end()), attrs.end());
    if (attrs.empty()) fail(path, line_no, "item '" + cols[0] + "' has no attributes");
    cat.item_attrs.push_back(std::move(attrs));
    (void)item;
  }
  if (cat.item_count() == 0) throw std::runtime_error(path + ": no items");
  return cat;
}

InteractionLog load_interactions(const std::string& path, const Catalog& catalog,
                                 int min_item_frequency) {
  auto in = open_or_throw(path);
  struct Event {
    int user;
    int item;
    long ts;
    size_t order;
  };
  std::vector<Event> events;
  InteractionLog log;
  std::string line;
  size_t line_no = 0;
  std::unordered_map<int, int> item_freq;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    if (cols.size() != 3) fail(path, line_no, "expected user<TAB>item<TAB>timestamp");
    auto item = catalog.items.find(cols[1]);
    if (!item) fail(path, line_no, "item '" + cols[1] + "' not in catalog");
    const int user = log.users.add(cols[0]);
    const long ts = parse_long(cols[2], path, line_no, "timestamp");
    events.push_back({user, *item, ts, events.size()});
    ++item_freq[*item];
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    if (a.user != b.user) return a.user < b.user;
    if (a.ts != b.ts) return a.ts < b.ts;
    return a.order < b.order;
  });
  log.sequences.resize(static_cast<size_t>(log.user_count()));
  for (const auto& e : events) {
    if (item_freq[e.item] < min_item_frequency) continue;
    log.sequences[static_cast<size_t>(e.user)].push_back(e.item);
  }
  return log;
}

std::vector<ConversationRecord> load_records(const std::string& path, const Catalog& catalog,
                                             const InteractionLog& log) {
  auto in = open_or_throw(path);
  std::vector<ConversationRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    if (cols.size() != 4)
      fail(path, line_no, "expected user<TAB>attrs<TAB>target<TAB>history_cutoff");
    auto user = log.users.find(cols[0]);
    if (!user) fail(path, line_no, "user '" + cols[0] + "' not in interaction log");
    ConversationRecord rec;
    rec.user = *user;
    for (const auto& tok : split(cols[1], ',')) {
      auto attr = catalog.attrs.find(tok);
      if (!attr) fail(path, line_no, "attribute '" + tok + "' not in catalog");
      rec.attributes.push_back(*attr);
    }
    if (rec.attributes.empty()) fail(path, line_no, "record without attributes");
    auto target = catalog.items.find(cols[2]);
    if (!target) fail(path, line_no, "target item '" + cols[2] + "' not in catalog");
    rec.target = *target;
    const long cutoff = parse_long(cols[3], path, line_no, "history_cutoff");
    const auto& seq = log.sequence_of(rec.user);
    if (cutoff < 0 || cutoff > static_cast<long>(seq.size()))
      fail(path, line_no, "history_cutoff " + std::to_string(cutoff) +
                              " exceeds log length " + std::to_string(seq.size()));
    rec.history_cutoff = static_cast<int>(cutoff);
    records.push_back(std::move(rec));
  }
  return records;
}

void write_catalog(const std::string& path, const Catalog& catalog) {
  auto out = create_or_throw(path);
  for (int item = kFirstItemId; item < catalog.items.end_id(); ++item) {
    out << catalog.items.raw_of(item) << '\t';
    const auto& attrs = catalog.attributes_of(item);
    for (size_t i = 0; i < attrs.size(); ++i)
      out << (i ? "," : "") << catalog.attrs.raw_of(attrs[i]);
    out << '\n';
  }
}

void write_interactions(const std::string& path, const InteractionLog& log,
                        const Catalog& catalog) {
  auto out = create_or_throw(path);
  for (int user = 0; user < log.user_count(); ++user) {
    const auto& seq = log.sequence_of(user);
    for (size_t t = 0; t < seq.size(); ++t)
      out << log.users.raw_of(user) << '\t' << catalog.items.raw_of(seq[t]) << '\t' << t
          << '\n';
  }
}

void write_records(const std::string& path, const std::vector<ConversationRecord>& records,
                   const Catalog& catalog, const InteractionLog& log) {
  auto out = create_or_throw(path);
  for (const auto& rec : records) {
    out << log.users.raw_of(rec.user) << '\t';
    for (size_t i = 0; i < rec.attributes.size(); ++i)
      out << (i ? "," : "") << catalog.attrs.raw_of(rec.attributes[i]);
    out << '\t' << catalog.items.raw_of(rec.target) << '\t' << rec.history_cutoff << '\n';
  }
}

void write_idmap(const std::string& path, const IdMap& map) {
  auto out = create_or_throw(path);
  for (int id = map.base; id < map.end_id(); ++id)
    out << map.raw_of(id) << '\t' << id << '\n';
}

IdMap read_idmap(const std::string& path, int base) {
  auto in = open_or_throw(path);
  IdMap map(base);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    if (cols.size() != 2) fail(path, line_no, "expected raw_id<TAB>internal_id");
    const int assigned = map.add(cols[0]);
    const long expected = parse_long(cols[1], path, line_no, "internal id");
    if (assigned != expected)
      fail(path, line_no, "non-dense id map: '" + cols[0] + "' maps to " +
                              std::to_string(expected) + ", expected " +
                              std::to_string(assigned));
  }
  return map;
}

SplitSpec leave_one_out_split(const std::vector<ConversationRecord>& records) {
  // group per user, preserving order
  std::map<int, std::vector<const ConversationRecord*>> per_user;
  for (const auto& rec : records) per_user[rec.user].push_back(&rec);
  SplitSpec split;
  for (const auto& [user, recs] : per_user) {
    (void)user;
    if (recs.size() < 3) {
      for (const auto* r : recs) split.train.push_back(*r);
      continue;
    }
    for (size_t i = 0; i + 2 < recs.size(); ++i) split.train.push_back(*recs[i]);
    split.valid.push_back(*recs[recs.size() - 2]);
    split.test.push_back(*recs[recs.size() - 1]);
  }
  return split;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_users < 1 || spec.num_items < 1 || spec.num_attrs < 1 ||
      spec.attrs_per_item < 1 || spec.sessions_per_user < 1 || spec.interactions_per_user < 1)
    throw std::invalid_argument("generate_synthetic: all counts must be >= 1");
  if (spec.attrs_per_item > spec.num_attrs)
    throw std::invalid_argument("generate_synthetic: attrs_per_item exceeds num_attrs");

  std::mt19937 rng = make_rng(spec.seed);
  SyntheticData data;
  Catalog& cat = data.catalog;
  cat.item_attrs.resize(kFirstItemId);

  for (int a = 0; a < spec.num_attrs; ++a) cat.attrs.add(std::to_string(a + 1));

  auto sample_distinct_attrs = [&](int count) {
    std::vector<int> pool(static_cast<size_t>(spec.num_attrs));
    std::iota(pool.begin(), pool.end(), kFirstAttrId);
    std::vector<int> chosen;
    for (int i = 0; i < count; ++i) {
      std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
      size_t j = pick(rng);
      chosen.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
  };

  for (int i = 0; i < spec.num_items; ++i) {
    cat.items.add(std::to_string(i + 1));
    cat.item_attrs.push_back(sample_distinct_attrs(spec.attrs_per_item));
  }

  InteractionLog& log = data.log;
  const int latent_count = std::min(spec.latent_attrs_per_user, spec.num_attrs);
  for (int u = 0; u < spec.num_users; ++u) {
    log.users.add("u" + std::to_string(u + 1));
    data.user_latent_attrs.push_back(sample_distinct_attrs(latent_count));
  }
  log.sequences.resize(static_cast<size_t>(spec.num_users));

  auto overlap = [&](int item, const std::vector<int>& latent) {
    int n = 0;
    for (int a : latent)
      if (cat.item_has_attribute(item, a)) ++n;
    return n;
  };

  auto draw_preferred_item = [&](const std::vector<int>& latent) {
    std::vector<double> weights(static_cast<size_t>(spec.num_items));
    double total = 0;
    for (int i = 0; i < spec.num_items; ++i) {
      weights[static_cast<size_t>(i)] = overlap(kFirstItemId + i, latent);
      total += weights[static_cast<size_t>(i)];
    }
    if (total <= 0) {
      std::uniform_int_distribution<int> pick(0, spec.num_items - 1);
      return kFirstItemId + pick(rng);
    }
    std::uniform_real_distribution<double> unit(0.0, total);
    double r = unit(rng);
    for (int i = 0; i < spec.num_items; ++i) {
      r -= weights[static_cast<size_t>(i)];
      if (r <= 0) return kFirstItemId + i;
    }
    return kFirstItemId + spec.num_items - 1;
  };

  for (int u = 0; u < spec.num_users; ++u) {
    const auto& latent = data.user_latent_attrs[static_cast<size_t>(u)];
    for (int t = 0; t < spec.interactions_per_user; ++t)
      log.sequences[static_cast<size_t>(u)].push_back(draw_preferred_item(latent));
  }

  for (int u = 0; u < spec.num_users; ++u) {
    const auto& latent = data.user_latent_attrs[static_cast<size_t>(u)];
    const int len = spec.interactions_per_user;
    for (int s = 0; s < spec.sessions_per_user; ++s) {
      ConversationRecord rec;
      rec.user = u;
      rec.target = draw_preferred_item(latent);
      rec.history_cutoff = static_cast<int>(
          static_cast<long>(len) * (s + 1) / spec.sessions_per_user);
      const auto& attrs = cat.attributes_of(rec.target);
      std::uniform_int_distribution<size_t> size_pick(1, attrs.size());
      size_t reveal = size_pick(rng);
      std::vector<int> shuffled = attrs;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      rec.attributes.assign(shuffled.begin(),
                            shuffled.begin() + static_cast<std::ptrdiff_t>(reveal));
      data.records.push_back(std::move(rec));
    }
  }
  return data;
}

std::vector<std::vector<int>> item_windows(const InteractionLog& log, int max_len) {
  if (max_len < 1) throw std::invalid_argument("item_windows: max_len must be >= 1");
  const size_t stride = std::max<size_t>(1, static_cast<size_t>(max_len) / 2);
  std::vector<std::vector<int>> windows;
  for (const auto& seq : log.sequences) {
    if (seq.empty()) continue;
    if (seq.size() <= static_cast<size_t>(max_len)) {
      windows.emplace_back(seq);
      continue;
    }
    size_t start = 0;
    for (;;) {
      const size_t begin = std::min(start, seq.size() - static_cast<size_t>(max_len));
      windows.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(begin),
                           seq.begin() + static_cast<std::ptrdiff_t>(begin + max_len));
      if (begin + max_len >= seq.size()) break;
      start += stride;
    }
  }
  return windows;
}

}  // namespace convrec
