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
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "kavguard/error.hpp"
#include "kavguard/kav_store.hpp"

namespace kavguard {

/// Worker count: KAVGUARD_THREADS if set, else the hardware concurrency.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("KAVGUARD_THREADS"); env != nullptr && *env != '\0') {
    const auto n = parse_int<std::size_t>(env);
    if (!n || *n == 0) {
      throw UsageError(std::string("KAVGUARD_THREADS must be a positive integer, got '") + env +
                       "'");
    }
    return *n;
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(task) for task in [0, tasks) on up to `threads` workers. Tasks are
/// dealt out in contiguous runs so each worker touches adjacent output slots.
/// The first exception thrown by the lowest-numbered failing worker is rethrown.
template <typename Fn>
void parallel_for(std::size_t tasks, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(tasks, 1));
  if (threads == 1) {
    for (std::size_t t = 0; t < tasks; ++t) fn(t);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> workers;
  workers.reserve(threads);
  const std::size_t per = (tasks + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        const std::size_t lo = w * per;
        const std::size_t hi = std::min(tasks, lo + per);
        for (std::size_t t = lo; t < hi; ++t) fn(t);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace kavguard
