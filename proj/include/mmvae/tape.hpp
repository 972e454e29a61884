#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mmvae/errors.hpp"

namespace mmvae::ad {

class Tape;

// Handle into a tape. Cheap to copy; valid only for the tape that created it.
struct Value {
  Tape* tape = nullptr;
  int id = -1;
};

// Define-by-run reverse-mode tape over row-major matrices (rows x cols).
// Scalars are 1x1. Forward values are computed eagerly at op creation;
// backward() runs once per recording and accumulates into every ancestor.
class Tape {
  enum class Op {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kScale,      // c0 * x + c1
    kLinear,     // y = x * w^T, x:(b,in), w:(out,in)
    kBiasAdd,    // x:(b,w) + bias:(1,w)
    kRelu,
    kTanh,
    kExp,
    kLog,
    kSqrt,
    kRecip,
    kSquare,
    kAbs,
    kClamp,      // clamp to [c0, c1]; gradient zero where saturated
    kSliceCols,  // columns [c0, c0+c1)
    kRowSum,     // (b,w) -> (b,1)
    kSumAll,     // (b,w) -> (1,1)
    kLseRows,    // n-ary over (b,1) parents; aux = per-parent log-weights
    kXentRows,   // softmax cross-entropy; aux = per-row class labels
  };

  struct Rec {
    Op op;
    int a = -1;
    int b = -1;
    std::vector<int> parents;  // n-ary ops only
    int rows = 0, cols = 0;
    double c0 = 0.0, c1 = 0.0;
    std::vector<double> val;
    std::vector<double> grad;  // allocated lazily during backward
    std::vector<double> aux;
  };

 public:
  Value leaf(int rows, int cols, std::span<const double> v) {
    require(rows > 0 && cols > 0, "tape: leaf dimensions must be positive");
    require(static_cast<std::size_t>(rows) * cols == v.size(),
            "tape: leaf data size does not match shape");
    Rec r;
    r.op = Op::kLeaf;
    r.rows = rows;
    r.cols = cols;
    r.val.assign(v.begin(), v.end());
    return push(std::move(r));
  }

  Value constant(int rows, int cols, std::span<const double> v) { return leaf(rows, cols, v); }

  Value scalar(double v) {
    double buf[1] = {v};
    return leaf(1, 1, buf);
  }

  // Value copy with no parents; gradients stop here.
  Value detach(Value x) {
    const Rec& rx = at(x);
    return leaf(rx.rows, rx.cols, rx.val);
  }

  Value add(Value x, Value y) { return binary(Op::kAdd, x, y); }
  Value sub(Value x, Value y) { return binary(Op::kSub, x, y); }
  Value mul(Value x, Value y) { return binary(Op::kMul, x, y); }

  Value scale(Value x, double m, double shift = 0.0) {
    Rec r = unary_shell(Op::kScale, x);
    r.c0 = m;
    r.c1 = shift;
    for (auto& v : r.val) v = m * v + shift;
    return push(std::move(r));
  }

  Value neg(Value x) { return scale(x, -1.0); }

  Value linear(Value x, Value w) {
    const Rec& rx = at(x);
    const Rec& rw = at(w);
    require(rx.cols == rw.cols, "tape: linear shape mismatch, input cols " +
                                    std::to_string(rx.cols) + " vs weight cols " +
                                    std::to_string(rw.cols));
    Rec r;
    r.op = Op::kLinear;
    r.a = x.id;
    r.b = w.id;
    r.rows = rx.rows;
    r.cols = rw.rows;
    r.val.assign(static_cast<std::size_t>(r.rows) * r.cols, 0.0);
    const int in = rx.cols;
    for (int i = 0; i < r.rows; ++i) {
      const double* xr = rx.val.data() + static_cast<std::size_t>(i) * in;
      double* yr = r.val.data() + static_cast<std::size_t>(i) * r.cols;
      for (int o = 0; o < r.cols; ++o) {
        const double* wr = rw.val.data() + static_cast<std::size_t>(o) * in;
        double acc = 0.0;
        for (int k = 0; k < in; ++k) acc += xr[k] * wr[k];
        yr[o] = acc;
      }
    }
    return push(std::move(r));
  }

  Value bias_add(Value x, Value bias) {
    const Rec& rx = at(x);
    const Rec& rb = at(bias);
    require(rb.rows == 1 && rb.cols == rx.cols,
            "tape: bias shape (1," + std::to_string(rx.cols) + ") required");
    Rec r;
    r.op = Op::kBiasAdd;
    r.a = x.id;
    r.b = bias.id;
    r.rows = rx.rows;
    r.cols = rx.cols;
    r.val = rx.val;
    for (int i = 0; i < r.rows; ++i)
      for (int j = 0; j < r.cols; ++j) r.val[static_cast<std::size_t>(i) * r.cols + j] += rb.val[j];
    return push(std::move(r));
  }

  Value relu(Value x) {
    Rec r = unary_shell(Op::kRelu, x);
    for (auto& v : r.val) v = v > 0.0 ? v : 0.0;
    return push(std::move(r));
  }

  Value tanh_(Value x) {
    Rec r = unary_shell(Op::kTanh, x);
    for (auto& v : r.val) v = std::tanh(v);
    return push(std::move(r));
  }

  Value exp_(Value x) {
    Rec r = unary_shell(Op::kExp, x);
    for (auto& v : r.val) v = std::exp(v);
    return push(std::move(r));
  }

  Value log_(Value x) {
    Rec r = unary_shell(Op::kLog, x);
    for (auto& v : r.val) {
      if (!(v > 0.0)) throw NumericError("tape: log of non-positive value " + std::to_string(v));
      v = std::log(v);
    }
    return push(std::move(r));
  }

  Value sqrt_(Value x) {
    Rec r = unary_shell(Op::kSqrt, x);
    for (auto& v : r.val) {
      if (v < 0.0) throw NumericError("tape: sqrt of negative value " + std::to_string(v));
      v = std::sqrt(v);
    }
    return push(std::move(r));
  }

  Value recip(Value x) {
    Rec r = unary_shell(Op::kRecip, x);
    for (auto& v : r.val) {
      if (v == 0.0) throw NumericError("tape: reciprocal of zero");
      v = 1.0 / v;
    }
    return push(std::move(r));
  }

  Value square(Value x) {
    Rec r = unary_shell(Op::kSquare, x);
    for (auto& v : r.val) v = v * v;
    return push(std::move(r));
  }

  Value abs_(Value x) {
    Rec r = unary_shell(Op::kAbs, x);
    for (auto& v : r.val) v = std::fabs(v);
    return push(std::move(r));
  }

  Value clamp(Value x, double lo, double hi) {
    require(lo < hi, "tape: clamp bounds out of order");
    Rec r = unary_shell(Op::kClamp, x);
    r.c0 = lo;
    r.c1 = hi;
    for (auto& v : r.val) v = v < lo ? lo : (v > hi ? hi : v);
    return push(std::move(r));
  }

  Value slice_cols(Value x, int offset, int len) {
    const Rec& rx = at(x);
    require(offset >= 0 && len > 0 && offset + len <= rx.cols,
            "tape: slice [" + std::to_string(offset) + "," + std::to_string(offset + len) +
                ") outside " + std::to_string(rx.cols) + " columns");
    Rec r;
    r.op = Op::kSliceCols;
    r.a = x.id;
    r.rows = rx.rows;
    r.cols = len;
    r.c0 = offset;
    r.c1 = len;
    r.val.resize(static_cast<std::size_t>(r.rows) * len);
    for (int i = 0; i < r.rows; ++i)
      for (int j = 0; j < len; ++j)
        r.val[static_cast<std::size_t>(i) * len + j] =
            rx.val[static_cast<std::size_t>(i) * rx.cols + offset + j];
    return push(std::move(r));
  }

  Value row_sum(Value x) {
    const Rec& rx = at(x);
    Rec r;
    r.op = Op::kRowSum;
    r.a = x.id;
    r.rows = rx.rows;
    r.cols = 1;
    r.val.assign(rx.rows, 0.0);
    for (int i = 0; i < rx.rows; ++i) {
      double acc = 0.0;
      for (int j = 0; j < rx.cols; ++j) acc += rx.val[static_cast<std::size_t>(i) * rx.cols + j];
      r.val[i] = acc;
    }
    return push(std::move(r));
  }

  Value sum_all(Value x) {
    const Rec& rx = at(x);
    Rec r;
    r.op = Op::kSumAll;
    r.a = x.id;
    r.rows = 1;
    r.cols = 1;
    double acc = 0.0;
    for (double v : rx.val) acc += v;
    r.val.assign(1, acc);
    return push(std::move(r));
  }

  Value mean_all(Value x) {
    const Rec& rx = at(x);
    return scale(sum_all(x), 1.0 / (static_cast<double>(rx.rows) * rx.cols));
  }

  // Per-row log(sum_k w_k * exp(term_k)); terms are (b,1) columns, log_w are constants.
  Value lse_rows(std::span<const Value> terms, std::span<const double> log_w) {
    require(!terms.empty() && terms.size() == log_w.size(),
            "tape: lse needs matching terms and log-weights");
    const Rec& r0 = at(terms[0]);
    Rec r;
    r.op = Op::kLseRows;
    r.rows = r0.rows;
    r.cols = 1;
    r.aux.assign(log_w.begin(), log_w.end());
    for (Value t : terms) {
      const Rec& rt = at(t);
      require(rt.rows == r.rows && rt.cols == 1, "tape: lse terms must be (rows,1)");
      r.parents.push_back(t.id);
    }
    r.val.assign(r.rows, 0.0);
    const std::size_t k = terms.size();
    for (int i = 0; i < r.rows; ++i) {
      double m = -kInf;
      for (std::size_t j = 0; j < k; ++j) {
        double t = rec(r.parents[j]).val[i] + r.aux[j];
        if (t > m) m = t;
      }
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(rec(r.parents[j]).val[i] + r.aux[j] - m);
      r.val[i] = m + std::log(s);
    }
    return push(std::move(r));
  }

  // Per-row -log softmax(logits)[label]; labels are fixed class indices.
  Value xent_rows(Value logits, std::span<const int> labels) {
    const Rec& rx = at(logits);
    require(static_cast<int>(labels.size()) == rx.rows, "tape: one label per logits row");
    Rec r;
    r.op = Op::kXentRows;
    r.a = logits.id;
    r.rows = rx.rows;
    r.cols = 1;
    r.val.assign(rx.rows, 0.0);
    r.aux.assign(labels.begin(), labels.end());
    for (int i = 0; i < rx.rows; ++i) {
      int y = labels[i];
      require(y >= 0 && y < rx.cols, "tape: label outside logit range");
      const double* row = rx.val.data() + static_cast<std::size_t>(i) * rx.cols;
      double m = row[0];
      for (int c = 1; c < rx.cols; ++c) m = std::max(m, row[c]);
      double s = 0.0;
      for (int c = 0; c < rx.cols; ++c) s += std::exp(row[c] - m);
      r.val[i] = m + std::log(s) - row[y];
    }
    return push(std::move(r));
  }

  void backward(Value out) {
    check_mine(out);
    require(!backward_done_, "tape: backward already ran on this recording");
    const Rec& ro = at(out);
    require(ro.rows == 1 && ro.cols == 1, "tape: backward output must be scalar");
    backward_done_ = true;
    touch(out.id).grad.assign(1, 1.0);
    for (int i = out.id; i >= 0; --i) {
      Rec& r = recs_[i];
      if (r.grad.empty()) continue;
      propagate(r);
    }
  }

  const std::vector<double>& value(Value x) const { return at(x).val; }
  double scalar_value(Value x) const {
    const Rec& r = at(x);
    require(r.rows == 1 && r.cols == 1, "tape: scalar_value on non-scalar");
    return r.val[0];
  }

  const std::vector<double>& grad(Value x) {
    require(backward_done_, "tape: gradients are available only after backward");
    return touch(x.id).grad;
  }

  int rows(Value x) const { return at(x).rows; }
  int cols(Value x) const { return at(x).cols; }
  std::size_t size() const { return recs_.size(); }

 private:
  static constexpr double kInf = std::numeric_limits<double>::infinity();

  Value push(Rec&& r) {
    require(!backward_done_, "tape: recording after backward is not allowed");
    recs_.push_back(std::move(r));
    return Value{this, static_cast<int>(recs_.size() - 1)};
  }

  const Rec& at(Value x) const {
    check_mine(x);
    return recs_[x.id];
  }

  Rec& rec(int id) { return recs_[id]; }
  const Rec& rec(int id) const { return recs_[id]; }

  Rec& touch(int id) {
    Rec& r = recs_[id];
    if (r.grad.empty()) r.grad.assign(r.val.size(), 0.0);
    return r;
  }

  void check_mine(Value x) const {
    require(x.tape == this, "tape: value belongs to a different tape");
    require(x.id >= 0 && x.id < static_cast<int>(recs_.size()), "tape: stale value handle");
  }

  Rec unary_shell(Op op, Value x) {
    const Rec& rx = at(x);
    Rec r;
    r.op = op;
    r.a = x.id;
    r.rows = rx.rows;
    r.cols = rx.cols;
    r.val = rx.val;
    return r;
  }

  Value binary(Op op, Value x, Value y) {
    const Rec& rx = at(x);
    const Rec& ry = at(y);
    require(rx.rows == ry.rows && rx.cols == ry.cols,
            "tape: elementwise shape mismatch (" + std::to_string(rx.rows) + "," +
                std::to_string(rx.cols) + ") vs (" + std::to_string(ry.rows) + "," +
                std::to_string(ry.cols) + ")");
    Rec r;
    r.op = op;
    r.a = x.id;
    r.b = y.id;
    r.rows = rx.rows;
    r.cols = rx.cols;
    r.val.resize(rx.val.size());
    switch (op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < r.val.size(); ++i) r.val[i] = rx.val[i] + ry.val[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < r.val.size(); ++i) r.val[i] = rx.val[i] - ry.val[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < r.val.size(); ++i) r.val[i] = rx.val[i] * ry.val[i];
        break;
      default:
        throw ContractError("tape: not a binary op");
    }
    return push(std::move(r));
  }

  void propagate(Rec& r) {
    switch (r.op) {
      case Op::kLeaf:
        return;
      case Op::kAdd: {
        Rec& a = touch(r.a);
        Rec& b = touch(r.b);
        for (std::size_t i = 0; i < r.grad.size(); ++i) {
          a.grad[i] += r.grad[i];
          b.grad[i] += r.grad[i];
        }
        return;
      }
      case Op::kSub: {
        Rec& a = touch(r.a);
        Rec& b = touch(r.b);
        for (std::size_t i = 0; i < r.grad.size(); ++i) {
          a.grad[i] += r.grad[i];
          b.grad[i] -= r.grad[i];
        }
        return;
      }
      case Op::kMul: {
        Rec& a = touch(r.a);
        Rec& b = touch(r.b);
        for (std::size_t i = 0; i < r.grad.size(); ++i) {
          a.grad[i] += r.grad[i] * b.val[i];
          b.grad[i] += r.grad[i] * a.val[i];
        }
        return;
      }
      case Op::kScale: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i) a.grad[i] += r.c0 * r.grad[i];
        return;
      }
      case Op::kLinear: {
        Rec& x = touch(r.a);
        Rec& w = touch(r.b);
        const int in = x.cols;
        for (int i = 0; i < r.rows; ++i) {
          const double* gy = r.grad.data() + static_cast<std::size_t>(i) * r.cols;
          const double* xr = x.val.data() + static_cast<std::size_t>(i) * in;
          double* gx = x.grad.data() + static_cast<std::size_t>(i) * in;
          for (int o = 0; o < r.cols; ++o) {
            const double g = gy[o];
            if (g == 0.0) continue;
            const double* wr = w.val.data() + static_cast<std::size_t>(o) * in;
            double* gw = w.grad.data() + static_cast<std::size_t>(o) * in;
            for (int k = 0; k < in; ++k) {
              gx[k] += g * wr[k];
              gw[k] += g * xr[k];
            }
          }
        }
        return;
      }
      case Op::kBiasAdd: {
        Rec& x = touch(r.a);
        Rec& b = touch(r.b);
        for (int i = 0; i < r.rows; ++i)
          for (int j = 0; j < r.cols; ++j) {
            double g = r.grad[static_cast<std::size_t>(i) * r.cols + j];
            x.grad[static_cast<std::size_t>(i) * r.cols + j] += g;
            b.grad[j] += g;
          }
        return;
      }
      case Op::kRelu: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i)
          if (a.val[i] > 0.0) a.grad[i] += r.grad[i];
        return;
      }
      case Op::kTanh: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i)
          a.grad[i] += r.grad[i] * (1.0 - r.val[i] * r.val[i]);
        return;
      }
      case Op::kExp: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i) a.grad[i] += r.grad[i] * r.val[i];
        return;
      }
      case Op::kLog: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i) a.grad[i] += r.grad[i] / a.val[i];
        return;
      }
      case Op::kSqrt: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i)
          a.grad[i] += r.grad[i] * 0.5 / r.val[i];
        return;
      }
      case Op::kRecip: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i)
          a.grad[i] -= r.grad[i] * r.val[i] * r.val[i];
        return;
      }
      case Op::kSquare: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i)
          a.grad[i] += r.grad[i] * 2.0 * a.val[i];
        return;
      }
      case Op::kAbs: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i) {
          if (a.val[i] > 0.0)
            a.grad[i] += r.grad[i];
          else if (a.val[i] < 0.0)
            a.grad[i] -= r.grad[i];
        }
        return;
      }
      case Op::kClamp: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < r.grad.size(); ++i)
          if (a.val[i] >= r.c0 && a.val[i] <= r.c1) a.grad[i] += r.grad[i];
        return;
      }
      case Op::kSliceCols: {
        Rec& a = touch(r.a);
        const int off = static_cast<int>(r.c0);
        for (int i = 0; i < r.rows; ++i)
          for (int j = 0; j < r.cols; ++j)
            a.grad[static_cast<std::size_t>(i) * a.cols + off + j] +=
                r.grad[static_cast<std::size_t>(i) * r.cols + j];
        return;
      }
      case Op::kRowSum: {
        Rec& a = touch(r.a);
        for (int i = 0; i < a.rows; ++i)
          for (int j = 0; j < a.cols; ++j)
            a.grad[static_cast<std::size_t>(i) * a.cols + j] += r.grad[i];
        return;
      }
      case Op::kSumAll: {
        Rec& a = touch(r.a);
        for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += r.grad[0];
        return;
      }
      case Op::kLseRows: {
        const std::size_t k = r.parents.size();
        for (std::size_t j = 0; j < k; ++j) {
          Rec& p = touch(r.parents[j]);
          for (int i = 0; i < r.rows; ++i)
            p.grad[i] += r.grad[i] * std::exp(p.val[i] + r.aux[j] - r.val[i]);
        }
        return;
      }
      case Op::kXentRows: {
        Rec& x = touch(r.a);
        for (int i = 0; i < r.rows; ++i) {
          const double g = r.grad[i];
          if (g == 0.0) continue;
          const int y = static_cast<int>(r.aux[i]);
          const double* row = x.val.data() + static_cast<std::size_t>(i) * x.cols;
          double m = row[0];
          for (int c = 1; c < x.cols; ++c) m = std::max(m, row[c]);
          double s = 0.0;
          for (int c = 0; c < x.cols; ++c) s += std::exp(row[c] - m);
          double* gx = x.grad.data() + static_cast<std::size_t>(i) * x.cols;
          for (int c = 0; c < x.cols; ++c) {
            double soft = std::exp(row[c] - m) / s;
            gx[c] += g * (soft - (c == y ? 1.0 : 0.0));
          }
        }
        return;
      }
    }
  }

  std::vector<Rec> recs_;
  bool backward_done_ = false;
};

inline Value operator+(Value a, Value b) { return a.tape->add(a, b); }
inline Value operator-(Value a, Value b) { return a.tape->sub(a, b); }
inline Value operator*(Value a, Value b) { return a.tape->mul(a, b); }

}  // namespace mmvae::ad
