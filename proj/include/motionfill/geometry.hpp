// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <vector>

#include "motionfill/errors.hpp"

namespace motionfill {

using Mat = Eigen::MatrixXd;
using Mat3 = Eigen::Matrix3d;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

/// Continuous 6D rotation parameterization: the first two columns of a
/// rotation matrix, stored column-major as (c0, c1) and orthonormalized
/// on decode. Per-column scale is removed by the decode normalization.
struct Rotation6D {
    Vec6 r = (Vec6() << 1, 0, 0, 0, 1, 0).finished();

    static Rotation6D identity() { return Rotation6D{}; }
};

struct TrajectoryFrame {
    Rotation6D orient;
    Vec3 trans = Vec3::Zero();
};

/// Per-frame global root state of a motion sequence.
struct Trajectory {
    std::vector<TrajectoryFrame> frames;
    double fps = 30.0;

    int length() const { return static_cast<int>(frames.size()); }
};

struct CameraIntrinsics {
    double focal = 500.0;                     // pixels
    Vec2 principal_point{320.0, 240.0};       // pixels
    Vec2 image_size{640.0, 480.0};            // pixels
};

struct SimilarityTransform {
    double scale = 1.0;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
};

// Gram-Schmidt decode of the 6D representation. Throws DegenerateInput when a
// column is near-zero or the columns are near-parallel.
Mat3 rot6d_to_matrix(const Rotation6D& r);

// Inverse embedding (first two columns). Throws NotARotation when the input is
// not orthonormal within 1e-4.
Rotation6D matrix_to_rot6d(const Mat3& m);

// Relative root motion toward the next frame: output frame t holds
// orient = Phi_t^-1 Phi_{t+1} and trans = Phi_t^-1 (gamma_{t+1} - gamma_t).
// Output has length T-1. Throws TooShort when T < 2.
Trajectory canonicalize_trajectory(const Trajectory& r);

// Integrates per-frame deltas from an anchor frame; first output frame equals
// the anchor. Inverse of canonicalize_trajectory.
Trajectory decanonicalize_trajectory(const Trajectory& canonical, const TrajectoryFrame& anchor);

// Similarity (or rigid, with_scale=false) alignment of pred onto gt minimizing
// mean squared error. Points are N x 3 rows. Throws Degenerate when the
// point covariance is rank-deficient (e.g. collinear points).
SimilarityTransform procrustes_align(const Mat& pred, const Mat& gt, bool with_scale = true);

// Pinhole projection of N x 3 camera-frame points to N x 2 pixels.
// Throws BehindCamera when any z <= 1e-6.
Mat project_points(const Mat& points, const CameraIntrinsics& cam);

// Converts crop-space weak-perspective parameters (s, tx, ty) plus the pixel
// bounding box (center bx, by, square size) into a full-camera root
// translation. Convention: the root projects at bbox center + s*t*size/2
// pixels inside the crop, and depth = 2*focal / (s*size).
Vec3 crop_cam_to_full_translation(const Vec3& weak, const Vec3& bbox, const CameraIntrinsics& cam);

// Row-major flattening helpers used at module boundaries: a trajectory frame
// maps to 9 reals (6D orientation, then translation).
Mat trajectory_to_rows(const Trajectory& t);                       // T x 9
Trajectory rows_to_trajectory(const Mat& rows, double fps);        // T x 9 -> Trajectory

// 3x3 matrix <-> length-9 row (column-major columns c0 c1 c2).
Eigen::Matrix<double, 9, 1> mat3_to_row(const Mat3& m);
Mat3 row_to_mat3(const Eigen::Matrix<double, 9, 1>& r);

}  // namespace motionfill
