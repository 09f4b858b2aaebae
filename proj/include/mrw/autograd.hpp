#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mrw/tensor.hpp"

namespace mrw {

// One recorded primitive. The closure reads output adjoints and accumulates
// into input adjoints; outputs are tracked so a fresh pass can reset them.
struct TapeNode {
  std::vector<std::shared_ptr<TensorImpl>> outputs;
  std::function<void()> backward;
};

// Ordered record of executed primitives. Nodes are appended in execution
// order, so inputs of any node precede it; the reverse walk is a valid
// adjoint schedule. A tape is confined to one thread.
class Tape {
 public:
  void record(TapeNode node) { nodes_.push_back(std::move(node)); }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs the reverse sweep. Adjoints of leaf
  // tensors (parameters) accumulate; intermediate adjoints are reset first so
  // repeated calls on one tape replay identically.
  void backward(const Tensor& loss);

 private:
  std::vector<TapeNode> nodes_;
};

// Thread-local active tape. Ops record onto it only while a scope is open and
// some input requires gradients; otherwise they run as pure functions.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Records `fn` if recording is active and any input needs gradients. Marks
// outputs requires_grad accordingly and returns whether recording happened.
bool record_op(const std::vector<Tensor>& inputs, const std::vector<Tensor>& outputs,
               std::function<void()> fn);

}  // namespace mrw
