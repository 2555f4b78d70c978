#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace rit::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means absent
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->data.size(); }

  const std::vector<double>& data() const { return n_->data; }
  // Only for leaves outside an active graph (optimizer updates, loading).
  std::vector<double>& mutable_data() { return n_->data; }
  double item() const;
  double at(std::size_t i) const { return n_->data[i]; }

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<double>& grad() const { return n_->grad; }
  std::vector<double>& mutable_grad() { return n_->ensure_grad(); }
  void zero_grad();
  void clear_grad() { n_->grad.clear(); }

  // Copy of the values with no graph history.
  Tensor detach() const;

  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Recorded operations in topological order (inputs before outputs).
struct Tape {
  std::vector<Node*> nodes;
};

Tape build_tape(const Tensor& root);

// Populates grads of every requires_grad leaf reachable from loss.
// Leaf grads accumulate; interior grads are recomputed on every call.
void backward(const Tensor& loss);

Tensor matmul(const Tensor& a, const Tensor& b);

// Element-wise with suffix broadcasting: the smaller operand's shape must be
// a trailing suffix of the larger operand's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);

enum class OpKind { add, mul, sub, sigmoid, relu, abs, scale, tanh };
Tensor elementwise(OpKind kind, const std::vector<Tensor>& inputs, double c = 1.0);

Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reduce_mean(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor sum_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Rank-2 concatenation along the last axis.
Tensor concat_cols(const Tensor& a, const Tensor& b);
// table [V, d], ids of length rows*cols → [rows, cols, d]
Tensor embedding(const Tensor& table, const std::vector<int>& ids, std::size_t rows, std::size_t cols);
// images [B, H, W, C] → [B, N, p*p*C] with patches in row-major grid order
Tensor patchify(const Tensor& images, std::size_t patch);
// Overwrite the k×k×C region at (r0, c0) of every image with patch [k, k, C].
Tensor paste_patch(const Tensor& images, const Tensor& patch, std::size_t r0, std::size_t c0);

Tensor sq_l2_distance(const Tensor& a, const Tensor& b);
// logits [R, V]; mean over rows of -log softmax at target.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);

}  // namespace rit::ad
