// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace motionfill {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define MOTIONFILL_DEFINE_ERROR(NAME)            \
    struct NAME : Error {                        \
        using Error::Error;                      \
    }

MOTIONFILL_DEFINE_ERROR(DegenerateInput);
MOTIONFILL_DEFINE_ERROR(NotARotation);
MOTIONFILL_DEFINE_ERROR(TooShort);
MOTIONFILL_DEFINE_ERROR(Degenerate);
MOTIONFILL_DEFINE_ERROR(BehindCamera);
MOTIONFILL_DEFINE_ERROR(DegenerateScale);
MOTIONFILL_DEFINE_ERROR(BadSkeleton);
MOTIONFILL_DEFINE_ERROR(ShapeMismatch);
MOTIONFILL_DEFINE_ERROR(Diverged);
MOTIONFILL_DEFINE_ERROR(MissingDataset);
MOTIONFILL_DEFINE_ERROR(VersionMismatch);
MOTIONFILL_DEFINE_ERROR(CorruptFile);
MOTIONFILL_DEFINE_ERROR(SkeletonMismatch);
MOTIONFILL_DEFINE_ERROR(DegeneratePath);
MOTIONFILL_DEFINE_ERROR(SubjectBehindCamera);

#undef MOTIONFILL_DEFINE_ERROR

}  // namespace motionfill
