#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow::ad {

class Tape;

// Handle into a Tape.  Cheap to copy; all arithmetic on Vars appends nodes
// to the owning tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::uint32_t index) : tape_(tape), index_(index) {}

    double value() const;
    double adjoint() const;
    std::uint32_t index() const { return index_; }
    Tape* tape() const { return tape_; }

private:
    Tape* tape_ = nullptr;
    std::uint32_t index_ = 0;
};

// Append-only arena of computation nodes.  Parents always precede children,
// so reverse accumulation is a single linear sweep from the root index down.
class Tape {
public:
    struct Node {
        double value;
        double adjoint;
        std::uint32_t parent[2];
        double partial[2];
        std::uint32_t arity;
    };

    Var leaf(double value) {
        nodes_.push_back(Node{value, 0.0, {0, 0}, {0.0, 0.0}, 0});
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    Var emit1(double value, std::uint32_t p0, double d0) {
        nodes_.push_back(Node{value, 0.0, {p0, 0}, {d0, 0.0}, 1});
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    Var emit2(double value, std::uint32_t p0, double d0, std::uint32_t p1,
              double d1) {
        nodes_.push_back(Node{value, 0.0, {p0, p1}, {d0, d1}, 2});
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    double value(std::uint32_t i) const { return nodes_[i].value; }
    double adjoint(std::uint32_t i) const { return nodes_[i].adjoint; }

    // Overwrites a leaf in place (used to push optimizer updates back onto
    // long-lived parameter leaves without re-tracing).
    void set_value(const Var& v, double x) { nodes_[v.index()].value = x; }

    std::size_t size() const { return nodes_.size(); }

    // Marks the boundary between persistent leaves and per-batch scratch.
    std::size_t watermark() const { return nodes_.size(); }

    // Drops everything emitted after `mark` and clears surviving adjoints,
    // so a fresh trace starts from a clean slate.  Capacity is retained.
    void rollback(std::size_t mark) {
        nodes_.resize(mark);
        for (Node& n : nodes_) n.adjoint = 0.0;
    }

    // Reverse accumulation from `root` with seed 1.  Afterwards every node's
    // adjoint holds d(root)/d(node); nodes the root does not depend on keep
    // adjoint 0.
    void backward(const Var& root) {
        if (root.tape() != this)
            throw std::logic_error("backward: root lives on another tape");
        for (Node& n : nodes_) n.adjoint = 0.0;
        nodes_[root.index()].adjoint = 1.0;
        for (std::uint32_t i = root.index() + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (n.adjoint == 0.0 || n.arity == 0) continue;
            nodes_[n.parent[0]].adjoint += n.adjoint * n.partial[0];
            if (n.arity == 2)
                nodes_[n.parent[1]].adjoint += n.adjoint * n.partial[1];
        }
    }

private:
    std::vector<Node> nodes_;
};

inline double Var::value() const { return tape_->value(index_); }
inline double Var::adjoint() const { return tape_->adjoint(index_); }

namespace detail {
inline Tape* common_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape())
        throw std::logic_error("operands live on different tapes");
    return a.tape();
}
}  // namespace detail

// value_of lets templated numeric code branch on magnitudes uniformly for
// double and Var operands.
inline double value_of(double x) { return x; }
inline double value_of(const Var& v) { return v.value(); }

inline Var operator+(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    return t->emit2(a.value() + b.value(), a.index(), 1.0, b.index(), 1.0);
}
inline Var operator+(const Var& a, double b) {
    return a.tape()->emit1(a.value() + b, a.index(), 1.0);
}
inline Var operator+(double a, const Var& b) { return b + a; }

inline Var operator-(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    return t->emit2(a.value() - b.value(), a.index(), 1.0, b.index(), -1.0);
}
inline Var operator-(const Var& a, double b) {
    return a.tape()->emit1(a.value() - b, a.index(), 1.0);
}
inline Var operator-(double a, const Var& b) {
    return b.tape()->emit1(a - b.value(), b.index(), -1.0);
}
inline Var operator-(const Var& a) {
    return a.tape()->emit1(-a.value(), a.index(), -1.0);
}

inline Var operator*(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    return t->emit2(a.value() * b.value(), a.index(), b.value(), b.index(),
                    a.value());
}
inline Var operator*(const Var& a, double b) {
    return a.tape()->emit1(a.value() * b, a.index(), b);
}
inline Var operator*(double a, const Var& b) { return b * a; }

inline Var operator/(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    double inv = 1.0 / b.value();
    return t->emit2(a.value() * inv, a.index(), inv, b.index(),
                    -a.value() * inv * inv);
}
inline Var operator/(const Var& a, double b) {
    return a.tape()->emit1(a.value() / b, a.index(), 1.0 / b);
}
inline Var operator/(double a, const Var& b) {
    double inv = 1.0 / b.value();
    return b.tape()->emit1(a * inv, b.index(), -a * inv * inv);
}

inline Var exp(const Var& a) {
    double e = std::exp(a.value());
    return a.tape()->emit1(e, a.index(), e);
}

inline Var log(const Var& a) {
    if (!(a.value() > 0.0))
        throw std::domain_error("log of non-positive value " +
                                std::to_string(a.value()));
    return a.tape()->emit1(std::log(a.value()), a.index(), 1.0 / a.value());
}

inline Var tanh(const Var& a) {
    double th = std::tanh(a.value());
    return a.tape()->emit1(th, a.index(), 1.0 - th * th);
}

// Subgradient 0 at the kink, matching the convention used for max.
inline Var abs(const Var& a) {
    double s = a.value() > 0.0 ? 1.0 : (a.value() < 0.0 ? -1.0 : 0.0);
    return a.tape()->emit1(std::abs(a.value()), a.index(), s);
}

inline Var pow(const Var& a, double c) {
    return a.tape()->emit1(std::pow(a.value(), c), a.index(),
                           c * std::pow(a.value(), c - 1.0));
}

inline Var pow(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    if (!(a.value() > 0.0))
        throw std::domain_error("pow with non-positive base " +
                                std::to_string(a.value()));
    double v = std::pow(a.value(), b.value());
    return t->emit2(v, a.index(), b.value() * v / a.value(), b.index(),
                    v * std::log(a.value()));
}

// The branch is taken at trace time: gradients flow only through the
// argument that won the comparison (ties favor the first).
inline Var max(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    if (a.value() >= b.value()) return t->emit1(a.value(), a.index(), 1.0);
    return t->emit1(b.value(), b.index(), 1.0);
}
inline Var max(const Var& a, double b) {
    if (a.value() >= b) return a.tape()->emit1(a.value(), a.index(), 1.0);
    return a.tape()->emit1(b, a.index(), 0.0);
}
inline Var max(double a, const Var& b) {
    if (b.value() > a) return b.tape()->emit1(b.value(), b.index(), 1.0);
    return b.tape()->emit1(a, b.index(), 0.0);
}

}  // namespace mflow::ad
