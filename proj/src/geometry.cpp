// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#include "motionfill/geometry.hpp"

#include <Eigen/SVD>
#include <cmath>

namespace motionfill {

namespace {
constexpr double kColumnEps = 1e-8;
}

Mat3 rot6d_to_matrix(const Rotation6D& r) {
    const Vec3 a1 = r.r.head<3>();
    const Vec3 a2 = r.r.tail<3>();
    const double n1 = a1.norm();
    if (n1 <= kColumnEps) {
        throw DegenerateInput("rot6d_to_matrix: first column is near-zero");
    }
    const Vec3 b1 = a1 / n1;
    const Vec3 u2 = a2 - b1.dot(a2) * b1;
    const double n2 = u2.norm();
    if (a2.norm() <= kColumnEps || n2 <= kColumnEps) {
        throw DegenerateInput("rot6d_to_matrix: columns are near-zero or near-parallel");
    }
    const Vec3 b2 = u2 / n2;
    Mat3 m;
    m.col(0) = b1;
    m.col(1) = b2;
    m.col(2) = b1.cross(b2);
    return m;
}

Rotation6D matrix_to_rot6d(const Mat3& m) {
    const double ortho_err = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (ortho_err > 1e-4 || m.determinant() < 0.0) {
        throw NotARotation("matrix_to_rot6d: input is not orthonormal with det +1");
    }
    Rotation6D out;
    out.r.head<3>() = m.col(0);
    out.r.tail<3>() = m.col(1);
    return out;
}

Trajectory canonicalize_trajectory(const Trajectory& r) {
    const int T = r.length();
    if (T < 2) {
        throw TooShort("canonicalize_trajectory: need at least 2 frames");
    }
    Trajectory out;
    out.fps = r.fps;
    out.frames.resize(T - 1);
    for (int t = 0; t < T - 1; ++t) {
        const Mat3 cur = rot6d_to_matrix(r.frames[t].orient);
        const Mat3 nxt = rot6d_to_matrix(r.frames[t + 1].orient);
        out.frames[t].orient = matrix_to_rot6d(cur.transpose() * nxt);
        out.frames[t].trans = cur.transpose() * (r.frames[t + 1].trans - r.frames[t].trans);
    }
    return out;
}

Trajectory decanonicalize_trajectory(const Trajectory& canonical, const TrajectoryFrame& anchor) {
    Trajectory out;
    out.fps = canonical.fps;
    out.frames.resize(canonical.length() + 1);
    out.frames[0] = anchor;
    Mat3 cur = rot6d_to_matrix(anchor.orient);
    Vec3 pos = anchor.trans;
    for (int t = 0; t < canonical.length(); ++t) {
        pos += cur * canonical.frames[t].trans;
        cur = cur * rot6d_to_matrix(canonical.frames[t].orient);
        out.frames[t + 1].orient = matrix_to_rot6d(cur);
        out.frames[t + 1].trans = pos;
    }
    return out;
}

SimilarityTransform procrustes_align(const Mat& pred, const Mat& gt, bool with_scale) {
    if (pred.rows() != gt.rows() || pred.cols() != 3 || gt.cols() != 3) {
        throw ShapeMismatch("procrustes_align: inputs must be N x 3 with matching N");
    }
    const auto n = pred.rows();
    if (n < 3) {
        throw Degenerate("procrustes_align: need at least 3 points");
    }
    const Eigen::RowVector3d mu_p = pred.colwise().mean();
    const Eigen::RowVector3d mu_g = gt.colwise().mean();
    const Mat pc = pred.rowwise() - mu_p;
    const Mat gc = gt.rowwise() - mu_g;

    const Mat3 cov = gc.transpose() * pc / static_cast<double>(n);
    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    const double var_p = pc.array().square().sum() / static_cast<double>(n);
    if (sv(1) <= 1e-12 * std::max(1.0, sv(0)) || var_p <= 1e-24) {
        throw Degenerate("procrustes_align: rank-deficient point covariance");
    }
    Vec3 d = Vec3::Ones();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) {
        d(2) = -1.0;
    }
    SimilarityTransform out;
    out.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
    out.scale = with_scale ? (sv.dot(d) / var_p) : 1.0;
    out.translation = mu_g.transpose() - out.scale * out.rotation * mu_p.transpose();
    return out;
}

Mat project_points(const Mat& points, const CameraIntrinsics& cam) {
    if (points.cols() != 3) {
        throw ShapeMismatch("project_points: points must be N x 3");
    }
    Mat out(points.rows(), 2);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const double z = points(i, 2);
        if (z <= 1e-6) {
            throw BehindCamera("project_points: point at or behind the camera");
        }
        out(i, 0) = cam.focal * points(i, 0) / z + cam.principal_point.x();
        out(i, 1) = cam.focal * points(i, 1) / z + cam.principal_point.y();
    }
    return out;
}

Vec3 crop_cam_to_full_translation(const Vec3& weak, const Vec3& bbox, const CameraIntrinsics& cam) {
    const double s = weak(0), tx = weak(1), ty = weak(2);
    const double size = bbox(2);
    if (s * size <= 1e-6) {
        throw DegenerateScale("crop_cam_to_full_translation: s * size is non-positive");
    }
    const double depth = 2.0 * cam.focal / (s * size);
    // The root projects at (bbox center + s*t*size/2) px in the full image.
    const double u = bbox(0) + s * tx * size / 2.0;
    const double v = bbox(1) + s * ty * size / 2.0;
    return {(u - cam.principal_point.x()) * depth / cam.focal,
            (v - cam.principal_point.y()) * depth / cam.focal,
            depth};
}

Mat trajectory_to_rows(const Trajectory& t) {
    Mat rows(t.length(), 9);
    for (int i = 0; i < t.length(); ++i) {
        rows.row(i).head<6>() = t.frames[i].orient.r.transpose();
        rows.row(i).tail<3>() = t.frames[i].trans.transpose();
    }
    return rows;
}

Trajectory rows_to_trajectory(const Mat& rows, double fps) {
    if (rows.cols() != 9) {
        throw ShapeMismatch("rows_to_trajectory: expected T x 9");
    }
    Trajectory t;
    t.fps = fps;
    t.frames.resize(rows.rows());
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        t.frames[i].orient.r = rows.row(i).head<6>().transpose();
        t.frames[i].trans = rows.row(i).tail<3>().transpose();
    }
    return t;
}

Eigen::Matrix<double, 9, 1> mat3_to_row(const Mat3& m) {
    Eigen::Matrix<double, 9, 1> r;
    r << m.col(0), m.col(1), m.col(2);
    return r;
}

Mat3 row_to_mat3(const Eigen::Matrix<double, 9, 1>& r) {
    Mat3 m;
    m.col(0) = r.segment<3>(0);
    m.col(1) = r.segment<3>(3);
    m.col(2) = r.segment<3>(6);
    return m;
}

}  // namespace motionfill
