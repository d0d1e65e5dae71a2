// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "motionfill/geometry.hpp"

namespace motionfill::ad {

using motionfill::Mat;

/// Named parameter matrices with stable indices. The registry layout is the
/// serialization order, so indices are stable across save/load.
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Mat> values;

    int add(const std::string& name, int rows, int cols) {
        names.push_back(name);
        values.emplace_back(Mat::Zero(rows, cols));
        return static_cast<int>(values.size()) - 1;
    }
    int size() const { return static_cast<int>(values.size()); }
    std::vector<Mat> zero_grads() const {
        std::vector<Mat> g;
        g.reserve(values.size());
        for (const auto& v : values) g.emplace_back(Mat::Zero(v.rows(), v.cols()));
        return g;
    }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over Eigen double matrices. One tape per forward pass;
/// not thread-safe, but independent tapes may run on concurrent threads.
class Tape {
public:
    explicit Tape(const ParamStore* params = nullptr, bool grad_enabled = true);

    bool grad_enabled() const { return grad_; }
    const Mat& val(Var v) const;

    Var constant(Mat m);
    Var param(int param_index);  // one leaf per index, cached

    // Arithmetic.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);  // elementwise
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var matmul(Var a, Var b);
    Var add_rowvec(Var a, Var row);  // broadcast 1 x C over rows
    Var mul_colvec(Var a, Var col);  // scale row i by col(i, 0)

    // Shape plumbing.
    Var slice_rows(Var a, int start, int n);
    Var slice_cols(Var a, int start, int n);
    Var concat_rows(const std::vector<Var>& parts);
    Var concat_cols(const std::vector<Var>& parts);
    Var take_rows(Var a, std::vector<int> rows);
    Var reshape_to_points(Var a);             // F x 3n -> (F*n) x 3, row-major triples
    Var reshape_from_points(Var a, int F);    // inverse of the above

    // Elementwise nonlinearities.
    Var gelu(Var a);
    Var relu(Var a);
    Var tanh_elem(Var a);
    Var softplus(Var a);
    Var abs_elem(Var a);
    Var pow_elem(Var a, double p);  // requires positive input when p is fractional

    // Reductions (all 1 x 1 unless noted).
    Var sum(Var a);
    Var mean_all(Var a);
    Var sumsq(Var a);
    Var sum_abs(Var a);
    Var rows_dot(Var a, Var b);                       // N x 1
    Var rows_norm(Var a, double eps = 0.0);           // N x 1
    Var weighted_sum(Var a, const Eigen::VectorXd& w);  // sum_i w_i * a(i, 0)

    // Table lookups.
    Var gather_rows(Var table, std::vector<int> ids);

    // Normalization and attention building blocks.
    Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
    Var softmax_rows(Var x);
    Var cross_entropy(Var logits, std::vector<int> targets, Eigen::VectorXd row_weights);

    // Single-head scaled-dot attention over frames with rotary relative
    // positions and a banded window (|dt| <= window / 2).
    Var rope_attention(Var q, Var k, Var v, std::vector<int> positions, int window,
                       double rope_base = 10000.0);

    // Fused multi-head blocks used by the transformer stacks. x is (F*R) x D,
    // frame-major. Spatial attends across the R rows inside each frame;
    // temporal attends across frames for each row independently.
    Var spatial_attention(Var x, Var wq, Var wk, Var wv, Var wo, int F, int R, int heads);
    Var temporal_attention(Var x, Var wq, Var wk, Var wv, Var wo, int F, int R, int heads,
                           std::vector<int> positions, int window, double rope_base = 10000.0);

    // Geometry nodes for the loss paths.
    Var rot6d_rows_to_matrices(Var x6);  // N x 6 -> N x 9 via Gram-Schmidt + cross
    // Integrates per-step rotations (N x 9) and local deltas (N x 3) from a
    // fixed anchor; returns (N+1) x 12 rows [R | t].
    Var integrate_canonical(Var rot_rows, Var deltas, const Mat3& anchor_rot, const Vec3& anchor_trans);
    // World points: per frame f, y = p * R_f^T + t_f for the n points of that
    // frame. R is F x 9 rows, t is F x 3, pts is (F*n) x 3.
    Var apply_rigid(Var rot_rows, Var trans, Var pts);
    Var blocked_matmul(const Mat& w, Var pts, int F);  // per-frame w * block, pts (F*b) x 3
    Var project_rows(Var pts, double focal, const Vec2& pp);  // N x 3 -> N x 2

    // Value is q; gradient passes through to z unchanged (vector quantization).
    Var straight_through(Var z, Mat q);

    // Seeds d(loss)=1 and accumulates parameter gradients into param_grads
    // (indexed like the ParamStore). loss must be 1 x 1.
    void backward(Var loss, std::vector<Mat>& param_grads);

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        int param_index = -1;
        std::function<void(Tape&, const Node&)> back;
    };

    Var emplace(Mat value, bool needs_grad, std::function<void(Tape&, const Node&)> back);
    Mat& grad_of(int id);

    const ParamStore* params_ = nullptr;
    bool grad_ = true;
    std::vector<Node> nodes_;
    std::vector<int> param_leaf_;  // param index -> node id (or -1)
};

// Gradient utilities shared by training code.
double global_grad_norm(const std::vector<Mat>& grads);
void clip_grads(std::vector<Mat>& grads, double max_norm);

}  // namespace motionfill::ad
