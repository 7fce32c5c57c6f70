#pragma once

// Recorded training runs. Gradient-flow trajectories are integrated with RK4
// on the weights; SGD trajectories store the discrete iterates.

#include "poprisk/models.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace poprisk {

enum class TrajectoryKind { gradient_flow, sgd };

struct TrainingTrajectory {
    TrajectoryKind kind = TrajectoryKind::gradient_flow;
    Model model;  // architecture and w(0)
    Dataset data;
    Loss loss;
    std::optional<Vector> example_weights;
    double weight_decay = 0.0;

    std::vector<double> times;
    std::vector<Vector> weights;
    std::vector<Vector> velocities;  // dw/dt on the grid (gradient flow only)
    std::vector<Vector> outputs;     // U_S(w(t_k))
    std::vector<Vector> gradients;   // g(t_k) = grad_u Phi_S
    std::vector<double> losses;      // Phi_S(u(t_k))

    std::size_t size() const { return times.size(); }
    double horizon() const { return times.back(); }
    Eigen::Index n() const { return data.size(); }
    Eigen::Index p() const { return data.output_dim(); }
    const Vector* weights_ptr() const { return example_weights ? &*example_weights : nullptr; }

    /// B is the constant I/n exactly when the loss is squared and unweighted.
    bool constant_hessian() const { return loss.kind == LossKind::squared && !example_weights; }

    /// Grid index of time t; t must coincide with a grid point.
    std::size_t index_of(double t) const {
        require(!times.empty(), "trajectory: empty");
        const double tol = 1e-9 * std::max(1.0, std::abs(horizon()));
        require(t >= times.front() - tol && t <= times.back() + tol, "trajectory: time outside grid");
        if (times.size() == 1) return 0;
        const double h = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
        const auto k = static_cast<std::size_t>(std::llround((t - times.front()) / h));
        require(k < times.size() && std::abs(times[k] - t) <= tol, "trajectory: time is not a grid point");
        return k;
    }

    /// Weights at any time in the window: cubic Hermite interpolation from
    /// the recorded iterates and velocities.
    Vector weights_at(double t) const {
        require(kind == TrajectoryKind::gradient_flow, "weights_at: needs a gradient-flow trajectory");
        const double tol = 1e-9 * std::max(1.0, std::abs(horizon()));
        require(t >= times.front() - tol && t <= times.back() + tol, "weights_at: time outside grid");
        if (times.size() == 1) return weights.front();
        const double h = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
        const double pos = (t - times.front()) / h;
        auto k = static_cast<std::size_t>(std::floor(pos));
        if (k >= times.size() - 1) k = times.size() - 2;
        const double th = std::clamp(pos - static_cast<double>(k), 0.0, 1.0);
        if (th == 0.0) return weights[k];
        if (th == 1.0) return weights[k + 1];
        const double t2 = th * th, t3 = t2 * th;
        const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + th;
        const double h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
        return h00 * weights[k] + (h10 * h) * velocities[k] + h01 * weights[k + 1] + (h11 * h) * velocities[k + 1];
    }

    Model model_at(double t) const { return model.with_weights(weights_at(t)); }
    Model model_at_index(std::size_t k) const { return model.with_weights(weights[k]); }
};

struct FlowOptions {
    Loss loss{};
    std::optional<Vector> example_weights;
    double weight_decay = 0.0;
};

namespace detail {

inline Vector flow_velocity(const Model& base, const Dataset& data, const FlowOptions& opt, const Vector& w) {
    const Vector* c = opt.example_weights ? &*opt.example_weights : nullptr;
    Vector v = -mean_loss_gradient(base.with_weights(w), data, opt.loss, {}, c).gradient;
    if (opt.weight_decay != 0.0) v -= opt.weight_decay * w;
    return v;
}

inline void record_point(TrainingTrajectory& tr, double t, const Vector& w, const FlowOptions& opt) {
    const Model m = tr.model.with_weights(w);
    const Vector u = forward_stacked(m, tr.data);
    tr.times.push_back(t);
    tr.weights.push_back(w);
    tr.velocities.push_back(flow_velocity(tr.model, tr.data, opt, w));
    tr.outputs.push_back(u);
    tr.gradients.push_back(output_gradient(u, tr.data, tr.loss, tr.weights_ptr()));
    tr.losses.push_back(output_loss(u, tr.data, tr.loss, tr.weights_ptr()));
}

}  // namespace detail

/// Integrates dw/dt = -J_S^T g (minus weight decay) with RK4 on a uniform grid
/// of `steps` intervals over [0,T] and records outputs, gradients and losses.
inline TrainingTrajectory record_gradient_flow(const Model& model, const Dataset& data, double T, int steps,
                                               const FlowOptions& opt = {}) {
    data.validate();
    require(T >= 0.0, "record_gradient_flow: T must be >= 0");
    require(T == 0.0 || steps >= 1, "record_gradient_flow: steps must be >= 1");
    require(!opt.example_weights || opt.example_weights->size() == data.size(),
            "record_gradient_flow: example weights must have length n");
    TrainingTrajectory tr{TrajectoryKind::gradient_flow, model, data, opt.loss, opt.example_weights,
                          opt.weight_decay, {}, {}, {}, {}, {}, {}};
    detail::record_point(tr, 0.0, model.weights(), opt);
    if (T == 0.0) return tr;
    const double h = T / steps;
    auto f = [&](double, const Vector& w) -> Vector { return detail::flow_velocity(model, data, opt, w); };
    Vector w = model.weights();
    for (int k = 0; k < steps; ++k) {
        w = rk4_step(f, k * h, w, h);
        detail::record_point(tr, k + 1 == steps ? T : (k + 1) * h, w, opt);
    }
    return tr;
}

/// Gradient flow until a fixed horizon chosen from the initial kernel scale:
/// horizon = mult * n / lambda_max(K_SS(0)).
inline double kernel_time_scale(const Model& model, const Dataset& data) {
    const Matrix j = jacobian_stacked(model, data);
    const double top = op_norm(j);
    require(top > 0.0, "kernel_time_scale: zero Jacobian");
    return static_cast<double>(data.size()) / (top * top);
}

}  // namespace poprisk
