// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/audit.hpp"

namespace stq::audit {
namespace {

thread_local StatisticAudit* active_audit = nullptr;

}  // namespace

ScopedAudit::ScopedAudit(StatisticAudit& audit) noexcept : previous_(active_audit) {
  active_audit = &audit;
}

ScopedAudit::~ScopedAudit() { active_audit = previous_; }

void record_statistic() noexcept {
  if (active_audit != nullptr) active_audit->record_statistic();
}

void record_linear_call() noexcept {
  if (active_audit != nullptr) active_audit->record_linear_call();
}

}  // namespace stq::audit
