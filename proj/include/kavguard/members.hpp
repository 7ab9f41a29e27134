/*
 * Copyright 2026 The kavguard Authors.
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

#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <queue>
#include <string>
#include <vector>

#include "json.hpp"
#include "kavguard/error.hpp"
#include "kavguard/geometry.hpp"
#include "kavguard/kav_store.hpp"
#include "kavguard/stats.hpp"

namespace kavguard {

inline constexpr std::size_t kDefaultMembers = 25;
inline constexpr const char* kMembersFormat = "kav-members/1";

struct Member {
  std::uint64_t record_index = 0;
  double distance = 0.0;

  // Ascending distance, ties by ascending record index.
  friend bool operator<(const Member& a, const Member& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.record_index < b.record_index;
  }
  bool operator==(const Member&) const = default;
};

/// For each class, the training records nearest to that class's own
/// distribution, nearest first.
struct MemberStore {
  std::size_t M = kDefaultMembers;
  std::string source_file;
  std::map<ClassId, std::vector<Member>> classes;

  bool operator==(const MemberStore&) const = default;
};

/// Incremental builder: keeps a bounded max-heap of the M best per class.
class MemberStoreBuilder {
 public:
  MemberStoreBuilder(const FittedModel& model, std::size_t M) : model_(&model), M_(M) {
    if (M == 0) throw UsageError("member count M must be positive");
  }

  void add(const KavRecord& record) {
    if (record.label == kUnlabeled) return;
    const auto it = model_->classes.find(record.label);
    if (it == model_->classes.end()) {
      throw UsageError("record " + std::to_string(record.record_index) + " has class " +
                       std::to_string(record.label) + " which is not in the model");
    }
    const Member m{record.record_index, mahalanobis_diag(record.kav, it->second)};
    auto& heap = heaps_[record.label];
    if (heap.size() < M_) {
      heap.push(m);
    } else if (m < heap.top()) {
      heap.pop();
      heap.push(m);
    }
  }

  MemberStore build(std::string source_file = {}) && {
    MemberStore store;
    store.M = M_;
    store.source_file = std::move(source_file);
    for (auto& [id, heap] : heaps_) {
      std::vector<Member> list;
      list.reserve(heap.size());
      while (!heap.empty()) {
        list.push_back(heap.top());
        heap.pop();
      }
      std::reverse(list.begin(), list.end());
      store.classes.emplace(id, std::move(list));
    }
    return store;
  }

 private:
  const FittedModel* model_;
  std::size_t M_;
  std::map<ClassId, std::priority_queue<Member>> heaps_;
};

inline MemberStore build_member_store(const KavDataset& training, const FittedModel& model,
                                      std::size_t M = kDefaultMembers,
                                      std::string source_file = {}) {
  MemberStoreBuilder builder(model, M);
  for (const auto& r : training.records()) builder.add(r);
  return std::move(builder).build(std::move(source_file));
}

inline MemberStore build_member_store(KavReader& reader, const FittedModel& model,
                                      std::size_t M = kDefaultMembers,
                                      std::string source_file = {}) {
  MemberStoreBuilder builder(model, M);
  while (auto r = reader.next()) builder.add(*r);
  return std::move(builder).build(std::move(source_file));
}

/// First m record indices stored for `class_id`, nearest first.
inline std::vector<std::uint64_t> retrieve_members(const MemberStore& store, ClassId class_id,
                                                   std::size_t m) {
  const auto it = store.classes.find(class_id);
  if (it == store.classes.end()) {
    throw UsageError("unknown class " + std::to_string(class_id) + " in member store");
  }
  if (m == 0) throw UsageError("m must be positive");
  if (m > store.M) {
    throw UsageError("requested " + std::to_string(m) + " members but the store keeps M = " +
                     std::to_string(store.M));
  }
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < std::min(m, it->second.size()); ++i) {
    out.push_back(it->second[i].record_index);
  }
  return out;
}

inline void write_members_json(const MemberStore& store, std::ostream& out) {
  std::string buf = "{\"format\":\"";
  buf += kMembersFormat;
  buf += "\",\"M\":" + std::to_string(store.M);
  buf += ",\"source_file\":" + nlohmann::json(store.source_file).dump();
  buf += ",\"classes\":{";
  bool first = true;
  for (const auto& [id, list] : store.classes) {
    buf += first ? "\n" : ",\n";
    first = false;
    buf += "\"" + std::to_string(id) + "\":[";
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (i != 0) buf += ',';
      buf += "[" + std::to_string(list[i].record_index) + "," + format_real(list[i].distance) +
             "]";
    }
    buf += ']';
  }
  buf += "\n}}\n";
  out << buf;
  if (!out) throw IoError("failed writing member store");
}

inline MemberStore read_members_json(std::istream& in) try {
  const auto doc = detail::parse_json(in, kMembersFormat);
  MemberStore store;
  store.M = detail::json_get<std::size_t>(doc, "M");
  if (store.M == 0) throw FormatError("M must be positive");
  store.source_file = detail::json_get<std::string>(doc, "source_file");
  const auto& classes = doc.at("classes");
  if (!classes.is_object()) throw FormatError("classes must be an object");
  for (const auto& [key, list] : classes.items()) {
    const auto id = parse_int<ClassId>(key);
    if (!id) throw FormatError("bad class id '" + key + "'");
    if (!list.is_array() || list.size() > store.M) {
      throw FormatError("class " + key + " must list at most M members");
    }
    std::vector<Member> members;
    for (const auto& pair : list) {
      if (!pair.is_array() || pair.size() != 2) {
        throw FormatError("class " + key + " entries must be [record_index, distance]");
      }
      members.push_back({pair[0].get<std::uint64_t>(), pair[1].get<double>()});
    }
    if (!std::is_sorted(members.begin(), members.end())) {
      throw FormatError("class " + key + " members are not sorted by distance");
    }
    store.classes.emplace(*id, std::move(members));
  }
  return store;
} catch (const nlohmann::json::exception& e) {
  throw FormatError(std::string("malformed member store: ") + e.what());
}

}  // namespace kavguard
