// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#include "motionfill/body.hpp"

#include <algorithm>
#include <numeric>

namespace motionfill {

SkeletonConfig default_skeleton() {
    SkeletonConfig s;
    s.joint_count = 22;
    s.parent = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19};
    s.bone_offset.resize(22, 3);
    const double rows[22][3] = {
        {0.00, 0.00, 0.00},    // 0 pelvis
        {0.09, -0.05, 0.00},   // 1 l_hip
        {-0.09, -0.05, 0.00},  // 2 r_hip
        {0.00, 0.12, 0.00},    // 3 spine1
        {0.00, -0.40, 0.00},   // 4 l_knee
        {0.00, -0.40, 0.00},   // 5 r_knee
        {0.00, 0.12, 0.00},    // 6 spine2
        {0.00, -0.42, 0.00},   // 7 l_ankle
        {0.00, -0.42, 0.00},   // 8 r_ankle
        {0.00, 0.12, 0.00},    // 9 spine3
        {0.00, -0.06, 0.15},   // 10 l_foot
        {0.00, -0.06, 0.15},   // 11 r_foot
        {0.00, 0.10, 0.00},    // 12 neck
        {0.07, 0.06, 0.00},    // 13 l_collar
        {-0.07, 0.06, 0.00},   // 14 r_collar
        {0.00, 0.12, 0.00},    // 15 head
        {0.10, 0.00, 0.00},    // 16 l_shoulder
        {-0.10, 0.00, 0.00},   // 17 r_shoulder
        {0.26, 0.00, 0.00},    // 18 l_elbow
        {-0.26, 0.00, 0.00},   // 19 r_elbow
        {0.25, 0.00, 0.00},    // 20 l_wrist
        {-0.25, 0.00, 0.00},   // 21 r_wrist
    };
    for (int j = 0; j < 22; ++j) {
        s.bone_offset.row(j) << rows[j][0], rows[j][1], rows[j][2];
    }
    // Feet are the toe joints; at rest they sit ~0.02 m above the ground.
    s.foot_joint_ids = {10, 11};

    // 64 surrogate vertices in three tiers: tier 0 sits on each joint, later
    // tiers blend each joint with its parent so every vertex row is stochastic
    // and the weight matrix has full column rank.
    const int V = 64;
    const int J = s.joint_count;
    s.vertex_weights = Mat::Zero(V, J);
    const double tier_alpha[3] = {1.0, 0.7, 0.45};
    for (int v = 0; v < V; ++v) {
        const int j = v % J;
        const int tier = v / J;
        const double a = tier_alpha[std::min(tier, 2)];
        const int p = s.parent[j] < 0 ? j : s.parent[j];
        s.vertex_weights(v, j) += a;
        s.vertex_weights(v, p) += 1.0 - a;
    }
    return s;
}

void validate_skeleton(const SkeletonConfig& skel) {
    const int J = skel.joint_count;
    if (J <= 0 || static_cast<int>(skel.parent.size()) != J || skel.bone_offset.rows() != J) {
        throw BadSkeleton("skeleton: inconsistent joint count");
    }
    if (skel.parent[0] != -1) {
        throw BadSkeleton("skeleton: joint 0 must be the root");
    }
    for (int j = 1; j < J; ++j) {
        if (skel.parent[j] < 0 || skel.parent[j] >= J || skel.parent[j] == j) {
            throw BadSkeleton("skeleton: invalid parent index");
        }
        int cur = j, steps = 0;
        while (cur != 0) {
            cur = skel.parent[cur];
            if (cur < 0 || ++steps > J) {
                throw BadSkeleton("skeleton: parent chain does not reach the root");
            }
        }
    }
    if (skel.foot_joint_ids.empty()) {
        throw BadSkeleton("skeleton: foot_joint_ids must be non-empty");
    }
    for (int f : skel.foot_joint_ids) {
        if (f < 0 || f >= J) throw BadSkeleton("skeleton: foot joint out of range");
    }
    if (skel.vertex_weights.cols() != J) {
        throw BadSkeleton("skeleton: vertex weight columns must match joints");
    }
    for (Eigen::Index v = 0; v < skel.vertex_weights.rows(); ++v) {
        if (std::abs(skel.vertex_weights.row(v).sum() - 1.0) > 1e-6) {
            throw BadSkeleton("skeleton: vertex weight rows must sum to 1");
        }
    }
}

Mat joint_regressor(const SkeletonConfig& skel) {
    const Mat& W = skel.vertex_weights;
    return (W.transpose() * W).ldlt().solve(W.transpose());
}

BodyFrame forward_kinematics(const LocalPose& pose, const SkeletonConfig& skel) {
    validate_skeleton(skel);
    const int J = skel.joint_count;
    if (static_cast<int>(pose.joint_rotations.size()) != J) {
        throw ShapeMismatch("forward_kinematics: pose must have one rotation per joint");
    }
    // Parents may appear after children in the index order; process by depth.
    std::vector<int> depth(J, 0);
    for (int j = 1; j < J; ++j) {
        int cur = j;
        while (cur != 0) {
            cur = skel.parent[cur];
            ++depth[j];
        }
    }
    std::vector<int> order(J);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return depth[a] < depth[b]; });

    std::vector<Mat3> global(J);
    BodyFrame out;
    out.joints = Mat::Zero(J, 3);
    for (int j : order) {
        const Mat3 local = rot6d_to_matrix(pose.joint_rotations[j]);
        if (j == 0) {
            global[0] = local;
            continue;
        }
        const int p = skel.parent[j];
        out.joints.row(j) = out.joints.row(p) + (global[p] * skel.bone_offset.row(j).transpose()).transpose();
        global[j] = global[p] * local;
    }
    out.vertices = skel.vertex_weights * out.joints;
    return out;
}

BodyFrame compose_global(const BodyFrame& body, const TrajectoryFrame& frame) {
    const Mat3 R = rot6d_to_matrix(frame.orient);
    BodyFrame out;
    out.joints = body.joints * R.transpose();
    out.joints.rowwise() += frame.trans.transpose();
    out.vertices = body.vertices * R.transpose();
    out.vertices.rowwise() += frame.trans.transpose();
    return out;
}

Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> detect_foot_contact(
    const std::vector<Mat>& world_joints, const SkeletonConfig& skel,
    double height_thresh, double vel_thresh, double fps) {
    const int T = static_cast<int>(world_joints.size());
    if (T < 2) {
        throw TooShort("detect_foot_contact: need at least 2 frames");
    }
    const int nfeet = static_cast<int>(skel.foot_joint_ids.size());
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> contact(T, nfeet);
    for (int fi = 0; fi < nfeet; ++fi) {
        const int j = skel.foot_joint_ids[fi];
        for (int t = 0; t < T; ++t) {
            Vec3 vel;
            if (t == 0) {
                vel = (world_joints[1].row(j) - world_joints[0].row(j)).transpose() * fps;
            } else if (t == T - 1) {
                vel = (world_joints[T - 1].row(j) - world_joints[T - 2].row(j)).transpose() * fps;
            } else {
                vel = (world_joints[t + 1].row(j) - world_joints[t - 1].row(j)).transpose() * (fps / 2.0);
            }
            const double height = world_joints[t](j, 1);
            contact(t, fi) = height < height_thresh && vel.norm() < vel_thresh;
        }
    }
    return contact;
}

}  // namespace motionfill
