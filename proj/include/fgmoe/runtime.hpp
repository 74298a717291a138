// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace fgmoe {

/// Keeps freed activation buffers in the heap instead of returning them to
/// the kernel after every step. No-op outside glibc.
void tune_allocator();

}  // namespace fgmoe
