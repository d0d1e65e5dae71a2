// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "motionfill/geometry.hpp"

namespace motionfill {

using BoolGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// frames x tokens grid; true = masked.
struct MaskGrid {
    BoolGrid grid;

    int frames() const { return static_cast<int>(grid.rows()); }
    int tokens() const { return static_cast<int>(grid.cols()); }
    int count() const { return static_cast<int>(grid.count()); }

    static MaskGrid none(int F, int P) { return {BoolGrid::Constant(F, P, false)}; }
    static MaskGrid all(int F, int P) { return {BoolGrid::Constant(F, P, true)}; }
};

// Exactly round(ratio * F * P) positions masked, uniformly without
// replacement; deterministic per seed.
MaskGrid random_mask(int F, int P, double ratio, std::uint64_t seed);

// A contiguous block of round(frame_ratio * F) fully-masked frames with a
// uniformly placed start.
MaskGrid temporal_block_mask(int F, int P, double frame_ratio, std::uint64_t seed);

// round(token_ratio * P) token columns masked in every frame.
MaskGrid spatial_mask(int F, int P, double token_ratio, std::uint64_t seed);

// Unmasks the keep_total highest-confidence non-frozen positions plus all
// frozen positions; masks everything else. Ties break by (frame, token)
// lexicographic order.
MaskGrid confidence_remask(const Mat& confidences, int keep_total, const MaskGrid& frozen);

// Cumulative keep counts for the iterative decode: keep(t) grows with the
// masked-generative cosine curve and reaches N at t = T.
int cosine_keep_schedule(int t, int T, int N);
int linear_keep_schedule(int t, int T, int N);

}  // namespace motionfill
