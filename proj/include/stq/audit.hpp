// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>

namespace stq::audit {

/// Counts data-dependent statistic evaluations (min/max/abs-max reductions
/// that feed quantization parameters) and quantized linear calls while it is
/// installed on the current thread.
class StatisticAudit {
 public:
  void record_statistic() noexcept { statistics_.fetch_add(1, std::memory_order_relaxed); }
  void record_linear_call() noexcept { linear_calls_.fetch_add(1, std::memory_order_relaxed); }

  std::uint64_t statistics() const noexcept { return statistics_.load(std::memory_order_relaxed); }
  std::uint64_t linear_calls() const noexcept { return linear_calls_.load(std::memory_order_relaxed); }

  // Adding counters is commutative, so merge order does not affect totals.
  void merge(const StatisticAudit& other) noexcept {
    statistics_.fetch_add(other.statistics(), std::memory_order_relaxed);
    linear_calls_.fetch_add(other.linear_calls(), std::memory_order_relaxed);
  }

 private:
  std::atomic<std::uint64_t> statistics_{0};
  std::atomic<std::uint64_t> linear_calls_{0};
};

/// Installs an audit on the calling thread for the lifetime of the scope.
/// Scopes nest; the previous audit is restored on exit.
class ScopedAudit {
 public:
  explicit ScopedAudit(StatisticAudit& audit) noexcept;
  ~ScopedAudit();
  ScopedAudit(const ScopedAudit&) = delete;
  ScopedAudit& operator=(const ScopedAudit&) = delete;

 private:
  StatisticAudit* previous_;
};

void record_statistic() noexcept;
void record_linear_call() noexcept;

}  // namespace stq::audit
