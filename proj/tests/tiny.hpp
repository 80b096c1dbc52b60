// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

// Small configurations that keep training-path tests to a few seconds.

#pragma once

#include "stagediff/data.hpp"
#include "stagediff/networks.hpp"
#include "stagediff/trainer.hpp"

namespace tiny {

inline stagediff::NetworkConfig network() {
  stagediff::NetworkConfig c;
  c.input_side = 32;
  c.widths = {4, 4, 8, 8, 8};
  c.heads = 2;
  c.time_dim = 8;
  return c;
}

inline stagediff::SynthConfig synth(std::uint64_t seed = 0) {
  stagediff::SynthConfig c;
  c.samples_per_domain = 4;
  c.side = 32;
  c.seed = seed;
  return c;
}

inline stagediff::TrainConfig train(std::uint64_t seed = 0) {
  stagediff::TrainConfig c = stagediff::desk_train_config();
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = seed;
  c.val_samples = 2;
  c.val_fanout = 1;
  return c;
}

}  // namespace tiny
