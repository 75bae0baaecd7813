#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace convrec {

// Reserved internal ids. Item ids start at 2 (0 = padding, 1 = the mask
// token); attribute ids start at 1 (0 = padding).
inline constexpr int kPadId = 0;
inline constexpr int kItemMaskId = 1;
inline constexpr int kFirstItemId = 2;
inline constexpr int kFirstAttrId = 1;

/// Dense raw-id <-> internal-id mapping. Internal ids are assigned in first
/// appearance order starting at `base`.
struct IdMap {
  int base = 0;
  std::vector<std::string> raw;            // internal - base -> raw id
  std::map<std::string, int> to_internal;  // raw id -> internal

  explicit IdMap(int base_id = 0) : base(base_id) {}

  int add(const std::string& raw_id) {
    auto [it, inserted] = to_internal.try_emplace(raw_id, base + static_cast<int>(raw.size()));
    if (inserted) raw.push_back(raw_id);
    return it->second;
  }
  std::optional<int> find(const std::string& raw_id) const {
    auto it = to_internal.find(raw_id);
    if (it == to_internal.end()) return std::nullopt;
    return it->second;
  }
  const std::string& raw_of(int internal_id) const {
    return raw.at(static_cast<size_t>(internal_id - base));
  }
  int size() const { return static_cast<int>(raw.size()); }
  int end_id() const { return base + size(); }
};

struct Catalog {
  IdMap items{kFirstItemId};
  IdMap attrs{kFirstAttrId};
  // indexed by internal item id; entries 0 and 1 stay empty; each set is
  // duplicate-free and sorted ascending
  std::vector<std::vector<int>> item_attrs;

  int item_count() const { return items.size(); }
  int attribute_count() const { return attrs.size(); }
  int item_vocab_size() const { return item_count() + kFirstItemId; }
  int attr_vocab_size() const { return attribute_count() + kFirstAttrId; }

  const std::vector<int>& attributes_of(int item) const;
  bool item_has_attribute(int item, int attr) const;
};

/// Per-user chronological item sequences.
struct InteractionLog {
  IdMap users{0};
  std::vector<std::vector<int>> sequences;  // indexed by internal user id

  const std::vector<int>& sequence_of(int user) const {
    return sequences.at(static_cast<size_t>(user));
  }
  int user_count() const { return users.size(); }
  std::int64_t total_interactions() const;
};

/// One conversation: the attributes the user confirmed, the item they were
/// after, and how much of their interaction log predates the conversation.
struct ConversationRecord {
  int user = 0;
  std::vector<int> attributes;
  int target = 0;
  int history_cutoff = 0;

  bool operator==(const ConversationRecord&) const = default;
};

struct SplitSpec {
  std::vector<ConversationRecord> train;
  std::vector<ConversationRecord> valid;
  std::vector<ConversationRecord> test;
};

// --- file formats (UTF-8 TSV) ----------------------------------------------
// items:        item_raw_id <TAB> attr_raw_id,attr_raw_id,...
// interactions: user_raw_id <TAB> item_raw_id <TAB> timestamp_seconds
// records:      user_raw_id <TAB> attr,attr,... <TAB> target_item_raw_id <TAB> history_cutoff
// id map:       raw_id <TAB> internal_id

/// When `expected_attrs` is given (a previously persisted id map), every
/// attribute must already be known to it; unknown references are errors.
Catalog load_catalog(const std::string& path, const IdMap* expected_attrs = nullptr);

/// Events are sorted per user by timestamp, file order breaking ties. Items
/// occurring fewer than `min_item_frequency` times in the file are dropped.
InteractionLog load_interactions(const std::string& path, const Catalog& catalog,
                                 int min_item_frequency = 1);

std::vector<ConversationRecord> load_records(const std::string& path, const Catalog& catalog,
                                             const InteractionLog& log);

void write_catalog(const std::string& path, const Catalog& catalog);
void write_interactions(const std::string& path, const InteractionLog& log,
                        const Catalog& catalog);
void write_records(const std::string& path, const std::vector<ConversationRecord>& records,
                   const Catalog& catalog, const InteractionLog& log);
void write_idmap(const std::string& path, const IdMap& map);
IdMap read_idmap(const std::string& path, int base);

/// Last record per user -> test, the one before -> validation, rest -> train.
/// Users with fewer than 3 records contribute to train only. Records must be
/// grouped per user in chronological order (file order).
SplitSpec leave_one_out_split(const std::vector<ConversationRecord>& records);

// --- synthetic data ---------------------------------------------------------

struct SyntheticSpec {
  std::uint64_t seed = 7;
  int num_users = 50;
  int num_items = 100;
  int num_attrs = 20;
  int attrs_per_item = 4;
  int sessions_per_user = 3;
  int interactions_per_user = 20;
  int latent_attrs_per_user = 4;
};

struct SyntheticData {
  Catalog catalog;
  InteractionLog log;
  std::vector<ConversationRecord> records;
  std::vector<std::vector<int>> user_latent_attrs;  // planted preference sets
};

/// Planted-structure generator: each user prefers a latent attribute subset,
/// interaction items are drawn proportionally to their overlap with it, and
/// each conversation reveals a random subset of the target item's attributes.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// Sliding windows over every user sequence: length <= max_len, stride
/// max_len/2 (at least 1), with the final window anchored at the tail.
std::vector<std::vector<int>> item_windows(const InteractionLog& log, int max_len);

}  // namespace convrec
