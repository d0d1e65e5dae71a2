// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#include "motionfill/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>
#include <vector>

namespace motionfill {

namespace {

void check_ratio(double ratio, const char* what) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw DegenerateInput(std::string(what) + ": ratio must lie in [0, 1]");
    }
}

int rounded_count(double ratio, int n) {
    return static_cast<int>(std::lround(ratio * n));
}

}  // namespace

MaskGrid random_mask(int F, int P, double ratio, std::uint64_t seed) {
    check_ratio(ratio, "random_mask");
    const int total = F * P;
    const int want = rounded_count(ratio, total);
    std::vector<int> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates: only the first `want` draws matter.
    for (int i = 0; i < want; ++i) {
        std::uniform_int_distribution<int> pick(i, total - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    MaskGrid m = MaskGrid::none(F, P);
    for (int i = 0; i < want; ++i) {
        m.grid(idx[i] / P, idx[i] % P) = true;
    }
    return m;
}

MaskGrid temporal_block_mask(int F, int P, double frame_ratio, std::uint64_t seed) {
    check_ratio(frame_ratio, "temporal_block_mask");
    const int block = rounded_count(frame_ratio, F);
    MaskGrid m = MaskGrid::none(F, P);
    if (block == 0) return m;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, F - block);
    const int start = pick(rng);
    m.grid.block(start, 0, block, P) = true;
    return m;
}

MaskGrid spatial_mask(int F, int P, double token_ratio, std::uint64_t seed) {
    check_ratio(token_ratio, "spatial_mask");
    const int want = rounded_count(token_ratio, P);
    std::vector<int> cols(P);
    std::iota(cols.begin(), cols.end(), 0);
    std::mt19937_64 rng(seed);
    for (int i = 0; i < want; ++i) {
        std::uniform_int_distribution<int> pick(i, P - 1);
        std::swap(cols[i], cols[pick(rng)]);
    }
    MaskGrid m = MaskGrid::none(F, P);
    for (int i = 0; i < want; ++i) {
        m.grid.col(cols[i]).setConstant(true);
    }
    return m;
}

MaskGrid confidence_remask(const Mat& confidences, int keep_total, const MaskGrid& frozen) {
    const int F = static_cast<int>(confidences.rows());
    const int P = static_cast<int>(confidences.cols());
    if (frozen.frames() != F || frozen.tokens() != P) {
        throw ShapeMismatch("confidence_remask: frozen grid shape mismatch");
    }
    if (keep_total < 0 || keep_total > F * P) {
        throw DegenerateInput("confidence_remask: keep_total out of range");
    }
    struct Cand {
        double conf;
        int f, p;
    };
    std::vector<Cand> cand;
    cand.reserve(F * P);
    for (int f = 0; f < F; ++f) {
        for (int p = 0; p < P; ++p) {
            if (!frozen.grid(f, p)) cand.push_back({confidences(f, p), f, p});
        }
    }
    const int want = std::min<int>(keep_total, static_cast<int>(cand.size()));
    std::partial_sort(cand.begin(), cand.begin() + want, cand.end(), [](const Cand& a, const Cand& b) {
        if (a.conf != b.conf) return a.conf > b.conf;
        return std::tie(a.f, a.p) < std::tie(b.f, b.p);
    });
    MaskGrid m = MaskGrid::all(F, P);
    for (int f = 0; f < F; ++f) {
        for (int p = 0; p < P; ++p) {
            if (frozen.grid(f, p)) m.grid(f, p) = false;
        }
    }
    for (int i = 0; i < want; ++i) {
        m.grid(cand[i].f, cand[i].p) = false;
    }
    return m;
}

int cosine_keep_schedule(int t, int T, int N) {
    if (T < 1 || t < 0 || t > T) {
        throw DegenerateInput("cosine_keep_schedule: need 0 <= t <= T, T >= 1");
    }
    if (t == 0) return 0;
    if (t == T) return N;
    const double frac = 1.0 - std::cos(M_PI * t / (2.0 * T));
    return static_cast<int>(std::ceil(N * frac));
}

int linear_keep_schedule(int t, int T, int N) {
    if (T < 1 || t < 0 || t > T) {
        throw DegenerateInput("linear_keep_schedule: need 0 <= t <= T, T >= 1");
    }
    return static_cast<int>(std::ceil(static_cast<double>(N) * t / T));
}

}  // namespace motionfill
