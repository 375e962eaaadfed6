#pragma once

// Field visitors shared by every config struct: one `visit` function per
// struct lists its keys once, and the writer/reader below turn that list into
// serialization and validated parsing.

#include <cstdint>
#include <set>
#include <type_traits>
#include <string>
#include <vector>

#include "json.hpp"

namespace egn::detail {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds and sizes share one JSON reader");

using Json = nlohmann::ordered_json;

class JsonWriter {
 public:
  explicit JsonWriter(Json& root) : cur_(&root) {}

  template <class T>
  void field(const char* key, const T& value) {
    (*cur_)[key] = value;
  }

  template <class F>
  void section(const char* key, F&& body) {
    Json* saved = cur_;
    (*cur_)[key] = Json::object();
    cur_ = &(*cur_)[key];
    body();
    cur_ = saved;
  }

 private:
  Json* cur_;
};

// Reads into existing values; absent keys keep their defaults. Type errors and
// unknown keys are collected, never thrown, so callers can report all at once.
class JsonReader {
 public:
  JsonReader(const Json& root, std::vector<std::string>& errors) : cur_(&root), errors_(errors) { enter(""); }

  void field(const char* key, std::size_t& value) {
    if (const Json* j = take(key)) {
      if (j->is_number_unsigned()) {
        value = j->get<std::size_t>();
      } else {
        error(key, "must be a nonnegative integer");
      }
    }
  }
  void field(const char* key, double& value) {
    if (const Json* j = take(key)) {
      if (j->is_number()) value = j->get<double>();
      else error(key, "must be a number");
    }
  }
  void field(const char* key, bool& value) {
    if (const Json* j = take(key)) {
      if (j->is_boolean()) value = j->get<bool>();
      else error(key, "must be true or false");
    }
  }
  void field(const char* key, std::string& value) {
    if (const Json* j = take(key)) {
      if (j->is_string()) value = j->get<std::string>();
      else error(key, "must be a string");
    }
  }
  void field(const char* key, std::vector<std::size_t>& value) {
    if (const Json* j = take(key)) {
      bool ok = j->is_array();
      if (ok) {
        for (const auto& e : *j) ok = ok && e.is_number_unsigned();
      }
      if (ok) value = j->get<std::vector<std::size_t>>();
      else error(key, "must be a list of nonnegative integers");
    }
  }

  template <class F>
  void section(const char* key, F&& body) {
    const Json* j = take(key);
    if (!j) return;
    if (!j->is_object()) {
      error(key, "must be an object");
      return;
    }
    const Json* saved = cur_;
    cur_ = j;
    enter(prefix_.back() + key + ".");
    body();
    leave();
    cur_ = saved;
  }

  // Reports keys present in the current object that no field consumed.
  void finish() { leave(); }

 private:
  const Json* take(const char* key) {
    seen_.back().insert(key);
    auto it = cur_->find(key);
    return it == cur_->end() ? nullptr : &*it;
  }
  void error(const char* key, const std::string& what) { errors_.push_back(prefix_.back() + key + " " + what); }
  void enter(std::string prefix) {
    prefix_.push_back(std::move(prefix));
    seen_.emplace_back();
  }
  void leave() {
    if (cur_->is_object()) {
      for (const auto& [k, v] : cur_->items()) {
        if (!seen_.back().count(k)) errors_.push_back("unknown key " + prefix_.back() + k);
      }
    }
    prefix_.pop_back();
    seen_.pop_back();
  }

  const Json* cur_;
  std::vector<std::string>& errors_;
  std::vector<std::string> prefix_;
  std::vector<std::set<std::string>> seen_;
};

}  // namespace egn::detail
