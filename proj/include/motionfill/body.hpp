// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "motionfill/geometry.hpp"

namespace motionfill {

/// Desk-scale kinematic proxy: a fixed-bone-length skeleton plus a fixed
/// row-stochastic vertex regression matrix standing in for a mesh surface.
struct SkeletonConfig {
    int joint_count = 0;
    std::vector<int> parent;          // -1 for the pelvis root
    Mat bone_offset;                  // J x 3, meters, in parent frame
    std::vector<int> foot_joint_ids;
    Mat vertex_weights;               // V x J, rows sum to 1

    int vertex_count() const { return static_cast<int>(vertex_weights.rows()); }
};

/// Per-joint local rotations. Entry 0 belongs to the pelvis and is identity by
/// convention: the global orientation lives in the Trajectory.
struct LocalPose {
    std::vector<Rotation6D> joint_rotations;
};

struct BodyFrame {
    Mat joints;    // J x 3
    Mat vertices;  // V x 3
};

// 22-joint body with 64 surrogate vertices. Pelvis stands 0.95 m above the
// ground plane (y = 0); heading faces +z; feet are joints {10, 11}.
SkeletonConfig default_skeleton();

// Validates the parent array (tree rooted at joint 0, no cycles); throws
// BadSkeleton otherwise.
void validate_skeleton(const SkeletonConfig& skel);

// J x V left pseudo-inverse of vertex_weights, used to read joints back from
// predicted vertices.
Mat joint_regressor(const SkeletonConfig& skel);

// Zero-root forward kinematics: pelvis at the origin, child position =
// parent position + parent global rotation * bone offset; vertices from the
// fixed weight matrix.
BodyFrame forward_kinematics(const LocalPose& pose, const SkeletonConfig& skel);

// Applies a rigid trajectory frame to every joint and vertex.
BodyFrame compose_global(const BodyFrame& body, const TrajectoryFrame& frame);

// Contact at frame t iff foot height < height_thresh AND foot speed (central
// difference, one-sided at boundaries) < vel_thresh. world_joints is a T-long
// sequence of J x 3 matrices; the result is T x |feet|.
Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> detect_foot_contact(
    const std::vector<Mat>& world_joints, const SkeletonConfig& skel,
    double height_thresh, double vel_thresh, double fps);

}  // namespace motionfill
