#include "mrw/autograd.hpp"

#include <stdexcept>

namespace mrw {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  // Reset every adjoint this tape produces; leaves keep their accumulators.
  for (auto& node : nodes_)
    for (auto& out : node.outputs) {
      out->ensure_grad();
      out->zero_grad();
    }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if (it->backward) it->backward();
}

bool record_op(const std::vector<Tensor>& inputs, const std::vector<Tensor>& outputs,
               std::function<void()> fn) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return false;
  bool needs = false;
  for (const auto& in : inputs)
    if (in.defined() && in.requires_grad()) {
      needs = true;
      break;
    }
  if (!needs) return false;
  TapeNode node;
  for (const auto& out : outputs) {
    const_cast<Tensor&>(out).set_requires_grad(true);
    node.outputs.push_back(out.impl());
  }
  node.backward = std::move(fn);
  tape->record(std::move(node));
  return true;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

}  // namespace mrw
